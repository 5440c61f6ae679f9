//! The recursion for the higher-order value-function tensors.
//!
//! `T_2` is the Riccati form. For `k >= 3`, `T_k` solves
//! `sum_i T_k(.., A_Pi z_i, ..) = R_k(z_1..z_k) / (2 alpha)` where `R_k` is
//! assembled from the lower-order tensors through the blocks
//! `C_i = T_{i+1}(B, ..)` and `G_i = (1/i) sum_j T_i(.., N z_j, ..)`.

use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};
use crate::multilinear::{all_modes_product, storage_len, SymTensor};
use crate::spectral::{self, RiccatiSolution, Spectrum, C64, KRONECKER_LIMIT};
use crate::system::BilinearSystem;

pub const CACHE_SCHEMA_VERSION: u32 = 1;

/// Value-function expansion `V_p(y) = sum_{k=2}^p T_k(y^k) / k!`.
#[derive(Debug, Clone)]
pub struct ExpansionCoeffs {
    pub dim: usize,
    pub degree: usize,
    pub alpha: f64,
    pub pi: DMatrix<f64>,
    /// `T_3 .. T_p`.
    pub tensors: Vec<SymTensor>,
    pub closed_loop: DMatrix<f64>,
    pub spectrum: Spectrum,
    t2: SymTensor,
}

impl ExpansionCoeffs {
    /// `T_k` for `2 <= k <= degree`.
    pub fn form(&self, k: usize) -> &SymTensor {
        assert!(k >= 2 && k <= self.degree, "no T_{k} in a degree-{} expansion", self.degree);
        if k == 2 {
            &self.t2
        } else {
            &self.tensors[k - 3]
        }
    }

    /// `T_2 .. T_p` in order.
    pub fn forms(&self) -> impl Iterator<Item = &SymTensor> {
        std::iter::once(&self.t2).chain(self.tensors.iter())
    }

    /// The same expansion cut at a lower degree.
    pub fn truncated(&self, p: usize) -> Result<ExpansionCoeffs> {
        if p < 2 || p > self.degree {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a degree-{} expansion to degree {p}",
                self.degree
            )));
        }
        Ok(ExpansionCoeffs {
            degree: p,
            tensors: self.tensors[..p - 2].to_vec(),
            ..self.clone()
        })
    }

    fn assemble(pi: DMatrix<f64>, tensors: Vec<SymTensor>, closed_loop: DMatrix<f64>, alpha: f64) -> Result<Self> {
        let dim = pi.nrows();
        let t2 = SymTensor::from_matrix(&pi)?;
        if !t2.is_symmetric() {
            return Err(Error::Integrity("Riccati matrix is not exactly symmetric".into()));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.order() != i + 3 || t.dim() != dim || !t.is_symmetric() {
                return Err(Error::Integrity(format!("tensor T_{} has the wrong shape or symmetry", i + 3)));
            }
        }
        let spectrum = spectral::eig(&closed_loop)?;
        Ok(ExpansionCoeffs {
            dim,
            degree: tensors.len() + 2,
            alpha,
            pi,
            tensors,
            closed_loop,
            spectrum,
            t2,
        })
    }
}

/// `C_i(z_1..z_i) = T_{i+1}(B, z_1..z_i)`.
pub fn assemble_c(i: usize, t_next: &SymTensor, b: &DVector<f64>) -> Result<SymTensor> {
    if i == 0 || t_next.order() != i + 1 {
        return Err(Error::InvalidArgument(format!(
            "C_{i} needs a form of order {}, got {}",
            i + 1,
            t_next.order()
        )));
    }
    if !t_next.is_symmetric() {
        return Err(Error::ContractViolation("C_i needs a symmetric form".into()));
    }
    t_next.contract_last(b.as_slice())
}

/// `G_i(z_1..z_i) = (1/i) sum_j T_i(.., N z_j, ..)`, with `G_1 = 0`.
pub fn assemble_g(i: usize, t_i: &SymTensor, n: &DMatrix<f64>) -> Result<SymTensor> {
    if i == 0 || t_i.order() != i {
        return Err(Error::InvalidArgument(format!(
            "G_{i} needs a form of order {i}, got {}",
            t_i.order()
        )));
    }
    if !t_i.is_symmetric() {
        return Err(Error::ContractViolation("G_i needs a symmetric form".into()));
    }
    if i == 1 {
        return SymTensor::zeros(1, t_i.dim());
    }
    Ok(t_i.mode_sum(n)?.scaled(1.0 / i as f64))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Right-hand side `R_k` from `forms = [T_2, .., T_{k-1}]`.
pub fn assemble_r(k: usize, forms: &[SymTensor], n: &DMatrix<f64>, b: &DVector<f64>) -> Result<SymTensor> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("R_k is defined for k >= 3, got {k}")));
    }
    if forms.len() < k - 2 {
        return Err(Error::InvalidArgument(format!(
            "R_{k} needs T_2..T_{}, got {} forms",
            k - 1,
            forms.len()
        )));
    }
    let t = |order: usize| &forms[order - 2];
    let c: Vec<SymTensor> = (1..=k - 2)
        .map(|i| assemble_c(i, t(i + 1), b))
        .collect::<Result<_>>()?;
    let g: Vec<SymTensor> = (1..=k - 1)
        .map(|i| {
            if i == 1 {
                SymTensor::zeros(1, b.len())
            } else {
                assemble_g(i, t(i), n)
            }
        })
        .collect::<Result<_>>()?;
    let kf = k as f64;
    let mut r = SymTensor::sym_pair(&c[0], &g[k - 2])?.scaled(2.0 * kf * (kf - 1.0));
    for i in 2..=k - 2 {
        let left = c[i - 1].add_scaled(&g[i - 1], i as f64)?;
        let right = c[k - i - 1].add_scaled(&g[k - i - 1], (k - i) as f64)?;
        r = r.add_scaled(&SymTensor::sym_pair(&left, &right)?, binomial(k, i))?;
    }
    Ok(r)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Solves `sum_i T(.., A z_i, ..) = R / (2 alpha)` in the eigenbasis of `A`.
pub fn solve_generalized_lyapunov(spectrum: &Spectrum, r: &SymTensor, alpha: f64) -> Result<SymTensor> {
    check_alpha(alpha)?;
    let (n, k) = (r.dim(), r.order());
    ensure_dim("spectrum dimension", spectrum.dim(), n)?;
    if !spectrum.is_well_conditioned() {
        return Err(Error::Precondition(format!(
            "eigenvector condition estimate {:e} too large for the spectral solve",
            spectrum.condition_estimate
        )));
    }
    let guard = 1e-12 * k as f64 * spectrum.max_modulus().max(f64::MIN_POSITIVE);
    let rc: Vec<C64> = r.entries().iter().map(|&x| C64::new(x, 0.0)).collect();
    let mut tt = all_modes_product(&rc, n, k, &spectrum.right_vectors);
    let mut idx = vec![0usize; k];
    for (lin, v) in tt.iter_mut().enumerate() {
        let mut rem = lin;
        for slot in idx.iter_mut().rev() {
            *slot = rem % n;
            rem /= n;
        }
        let sum: C64 = idx.iter().map(|&j| spectrum.eigenvalues[j]).sum();
        if sum.norm() <= guard {
            return Err(Error::SingularEquation(format!(
                "eigenvalue sum {sum} vanishes; the closed loop is not stable"
            )));
        }
        *v /= sum * (2.0 * alpha);
    }
    let t = all_modes_product(&tt, n, k, &spectrum.inverse_vectors);
    let re: Vec<f64> = t.iter().map(|z| z.re).collect();
    let re_norm = re.iter().map(|x| x * x).sum::<f64>().sqrt();
    let im_norm = t.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
    if im_norm > 1e-9 * re_norm {
        return Err(Error::numerical("complex solve left a non-negligible imaginary part", im_norm));
    }
    SymTensor::symmetric_from_entries(k, n, re)
}

/// Dense Kronecker solve of the same equation; needs `n^k <= 4096`.
pub fn kronecker_oracle(a: &DMatrix<f64>, r: &SymTensor, alpha: f64) -> Result<SymTensor> {
    check_alpha(alpha)?;
    let (n, k) = (r.dim(), r.order());
    ensure_dim("A rows", a.nrows(), n)?;
    ensure_dim("A columns", a.ncols(), n)?;
    let size = storage_len(k, n)?;
    if size > KRONECKER_LIMIT {
        return Err(Error::SizeGuard(format!(
            "Kronecker system of size {size} exceeds {KRONECKER_LIMIT}"
        )));
    }
    let mut op = DMatrix::<f64>::zeros(size, size);
    let mut stride = 1;
    for m in (0..k).rev() {
        for row in 0..size {
            let digit = (row / stride) % n;
            let base = row - digit * stride;
            for b in 0..n {
                op[(row, base + b * stride)] += a[(b, digit)];
            }
        }
        stride *= n;
        let _ = m;
    }
    let rhs = DVector::from_iterator(size, r.entries().iter().map(|x| x / (2.0 * alpha)));
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularEquation("Kronecker Lyapunov system is singular".into()))?;
    SymTensor::symmetric_from_entries(k, n, sol.as_slice().to_vec())
}

// Gauss-Kronrod 7/15 abscissae and weights on [-1, 1].
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

struct Panel {
    lo: f64,
    hi: f64,
    value: Vec<f64>,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gk15(f: &mut impl FnMut(f64) -> Vec<f64>, lo: f64, hi: f64) -> Panel {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut kron: Vec<f64> = fc.iter().map(|v| v * WGK[7]).collect();
    let mut gauss: Vec<f64> = fc.iter().map(|v| v * WG[3]).collect();
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        for (i, (a, b)) in f1.iter().zip(&f2).enumerate() {
            kron[i] += WGK[j] * (a + b);
            if j % 2 == 1 {
                gauss[i] += WG[j / 2] * (a + b);
            }
        }
    }
    let value: Vec<f64> = kron.iter().map(|v| v * half).collect();
    let error = kron
        .iter()
        .zip(&gauss)
        .map(|(k, g)| ((k - g) * half).powi(2))
        .sum::<f64>()
        .sqrt();
    Panel { lo, hi, value, error }
}

/// Globally adaptive Gauss-Kronrod quadrature of a vector-valued integrand.
pub(crate) fn integrate_adaptive(
    mut f: impl FnMut(f64) -> Vec<f64>,
    lo: f64,
    hi: f64,
    initial_panels: usize,
    rel_tol: f64,
    max_panels: usize,
) -> Result<Vec<f64>> {
    let width = (hi - lo) / initial_panels as f64;
    let mut heap: BinaryHeap<Panel> = (0..initial_panels)
        .map(|i| gk15(&mut f, lo + i as f64 * width, lo + (i + 1) as f64 * width))
        .collect();
    loop {
        let len = heap.iter().next().map_or(0, |p| p.value.len());
        let mut total = vec![0.0; len];
        let mut err = 0.0;
        for p in heap.iter() {
            total.iter_mut().zip(&p.value).for_each(|(t, v)| *t += v);
            err += p.error;
        }
        let norm = total.iter().map(|v| v * v).sum::<f64>().sqrt();
        if err <= rel_tol * norm || err <= 1e-300 {
            return Ok(total);
        }
        if heap.len() >= max_panels {
            return Err(Error::numerical("adaptive quadrature did not reach tolerance", err / norm));
        }
        let worst = heap.pop().expect("non-empty panel set");
        let mid = 0.5 * (worst.lo + worst.hi);
        heap.push(gk15(&mut f, worst.lo, mid));
        heap.push(gk15(&mut f, mid, worst.hi));
    }
}

/// `T(z_1..z_k) = -(1/2 alpha) int_0^inf R(e^{At} z_1, .., e^{At} z_k) dt` by adaptive quadrature.
pub fn quadrature_oracle(a: &DMatrix<f64>, r: &SymTensor, alpha: f64) -> Result<SymTensor> {
    check_alpha(alpha)?;
    let (n, k) = (r.dim(), r.order());
    ensure_dim("A rows", a.nrows(), n)?;
    ensure_dim("A columns", a.ncols(), n)?;
    let abscissa = spectral::spectral_abscissa(a)?;
    if abscissa >= 0.0 {
        return Err(Error::Precondition(format!(
            "quadrature oracle needs a stable matrix (spectral abscissa {abscissa:e})"
        )));
    }
    let t_max = (1e12f64).ln() / abscissa.abs();
    let integrand = |t: f64| {
        let e = (a * t).exp();
        all_modes_product(r.entries(), n, k, &e)
    };
    let integral = integrate_adaptive(integrand, 0.0, t_max, 16, 1e-10, 20_000)?;
    let scale = -1.0 / (2.0 * alpha);
    SymTensor::symmetric_from_entries(k, n, integral.into_iter().map(|v| v * scale).collect())
}

/// Generalized Lyapunov solve with the Kronecker system as fallback for
/// ill-conditioned spectra.
pub fn solve_lyapunov_tensor(a: &DMatrix<f64>, spectrum: &Spectrum, r: &SymTensor, alpha: f64) -> Result<SymTensor> {
    if spectrum.is_well_conditioned() {
        solve_generalized_lyapunov(spectrum, r, alpha)
    } else {
        log::warn!(
            "eigenvector condition estimate {:e}; using the Kronecker solve",
            spectrum.condition_estimate
        );
        kronecker_oracle(a, r, alpha)
    }
}

/// Largest value of `|sum_i T(.., A z_i, ..) - R/(2 alpha)| / (1 + |R|)` over random tuples.
pub fn lyapunov_residual(
    a: &DMatrix<f64>,
    t: &SymTensor,
    r: &SymTensor,
    alpha: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (n, k) = (t.dim(), t.order());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let zs: Vec<DVector<f64>> = (0..k)
            .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let azs: Vec<DVector<f64>> = zs.iter().map(|z| a * z).collect();
        let mut lhs = 0.0;
        for slot in 0..k {
            let args: Vec<&[f64]> = (0..k)
                .map(|i| if i == slot { azs[i].as_slice() } else { zs[i].as_slice() })
                .collect();
            lhs += t.eval(&args)?;
        }
        let args: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
        let rv = r.eval(&args)?;
        worst = worst.max((lhs - rv / (2.0 * alpha)).abs() / (1.0 + rv.abs()));
    }
    Ok(worst)
}

/// Builds `T_3 .. T_p` by the recursion, checking each Lyapunov residual.
pub fn build_expansion(system: &BilinearSystem, p: usize, riccati: &RiccatiSolution) -> Result<ExpansionCoeffs> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!("degree must be at least 2, got {p}")));
    }
    let n = system.dim();
    ensure_dim("Riccati solution", riccati.pi.nrows(), n)?;
    storage_len(p, n)?;
    let a_pi = &riccati.closed_loop;
    let spectrum = spectral::eig(a_pi)?;
    let mut forms = vec![SymTensor::from_matrix(&riccati.pi)?];
    for k in 3..=p {
        let r = assemble_r(k, &forms, &system.n, &system.b)?;
        let t = solve_lyapunov_tensor(a_pi, &spectrum, &r, system.alpha)?;
        let residual = lyapunov_residual(a_pi, &t, &r, system.alpha, 50, 0x5eed + k as u64)?;
        log::debug!("T_{k}: Lyapunov residual {residual:e}");
        if !(residual <= 1e-8) {
            return Err(Error::numerical(format!("T_{k} fails its Lyapunov equation"), residual));
        }
        forms.push(t);
    }
    let tensors = forms.split_off(1);
    let mut coeffs = ExpansionCoeffs::assemble(riccati.pi.clone(), tensors, a_pi.clone(), system.alpha)?;
    coeffs.spectrum = spectrum;
    Ok(coeffs)
}

/// Riccati solve with `Q = I` followed by [`build_expansion`].
pub fn expand(system: &BilinearSystem, p: usize, k0: Option<&DVector<f64>>) -> Result<ExpansionCoeffs> {
    let q = DMatrix::identity(system.dim(), system.dim());
    let riccati = spectral::solve_riccati(&system.a, &system.b, &q, system.alpha, k0)?;
    log::info!(
        "Riccati: {} Newton steps, residual {:e}",
        riccati.iterations,
        riccati.residual_norm
    );
    build_expansion(system, p, &riccati)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CachePayload {
    schema_version: u32,
    system_hash: String,
    degree: usize,
    dim: usize,
    alpha: f64,
    pi: SymTensor,
    closed_loop: SymTensor,
    tensors: Vec<SymTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFile {
    payload: CachePayload,
    checksum: String,
}

fn checksum(payload: &CachePayload) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(payload)?)))
}

impl ExpansionCoeffs {
    /// Cache document tied to `system` by its content hash.
    pub fn to_cache_json(&self, system: &BilinearSystem) -> Result<String> {
        let payload = CachePayload {
            schema_version: CACHE_SCHEMA_VERSION,
            system_hash: system.content_hash(),
            degree: self.degree,
            dim: self.dim,
            alpha: self.alpha,
            pi: self.t2.clone(),
            closed_loop: SymTensor::from_matrix(&self.closed_loop)?,
            tensors: self.tensors.clone(),
        };
        let checksum = checksum(&payload)?;
        Ok(serde_json::to_string_pretty(&CacheFile { payload, checksum })?)
    }

    /// Parses a cache document, verifying checksum, schema and that it belongs to `system`.
    pub fn from_cache_json(text: &str, system: &BilinearSystem) -> Result<ExpansionCoeffs> {
        let file: CacheFile =
            serde_json::from_str(text).map_err(|e| Error::Integrity(format!("unreadable expansion cache: {e}")))?;
        if checksum(&file.payload)? != file.checksum {
            return Err(Error::Integrity("expansion cache checksum mismatch".into()));
        }
        let p = file.payload;
        if p.schema_version != CACHE_SCHEMA_VERSION {
            return Err(Error::Integrity(format!("unsupported cache schema {}", p.schema_version)));
        }
        if p.system_hash != system.content_hash() {
            return Err(Error::Integrity("expansion cache belongs to a different system".into()));
        }
        if p.dim != system.dim() || p.alpha.to_bits() != system.alpha.to_bits() || p.tensors.len() + 2 != p.degree {
            return Err(Error::Integrity("expansion cache header is inconsistent".into()));
        }
        if p.pi.order() != 2 || p.closed_loop.order() != 2 || p.pi.dim() != p.dim || p.closed_loop.dim() != p.dim {
            return Err(Error::Integrity("expansion cache matrices have the wrong shape".into()));
        }
        ExpansionCoeffs::assemble(p.pi.to_matrix()?, p.tensors, p.closed_loop.to_matrix()?, p.alpha)
            .map_err(|e| match e {
                Error::Integrity(_) => e,
                other => Error::Integrity(other.to_string()),
            })
    }
}

/// Path of the cache file for `(system, p)` inside `dir`.
pub fn cache_path(dir: &Path, system: &BilinearSystem, p: usize) -> PathBuf {
    dir.join(format!("expansion-{}-p{p}.json", &system.content_hash()[..16]))
}

/// Loads the cached expansion if present, otherwise builds and stores it.
/// The flag reports a cache hit.
pub fn load_or_expand(
    dir: &Path,
    system: &BilinearSystem,
    p: usize,
    k0: Option<&DVector<f64>>,
) -> Result<(ExpansionCoeffs, bool)> {
    let path = cache_path(dir, system, p);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        return Ok((ExpansionCoeffs::from_cache_json(&text, system)?, true));
    }
    let coeffs = expand(system, p, k0)?;
    fs::create_dir_all(dir)?;
    fs::write(&path, coeffs.to_cache_json(system)?)?;
    Ok((coeffs, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(nu: f64) -> BilinearSystem {
        BilinearSystem::new(
            "scalar",
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, nu),
            DVector::from_element(1, 1.0),
            1.0,
        )
        .unwrap()
    }

    fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let shift = spectral::spectral_abscissa(&m).unwrap() + 0.5;
        m - DMatrix::identity(n, n) * shift
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, k: usize, n: usize) -> SymTensor {
        let len = n.pow(k as u32);
        SymTensor::symmetric_from_entries(k, n, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gauss_kronrod_integrates_exponential() {
        let v = integrate_adaptive(|t| vec![(-3.0 * t).exp(), t * t], 0.0, 2.0, 1, 1e-12, 100).unwrap();
        assert!((v[0] - (1.0 - (-6.0f64).exp()) / 3.0).abs() < 1e-13);
        assert!((v[1] - 8.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn c_and_g_blocks() {
        let pi = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let t2 = SymTensor::from_matrix(&pi).unwrap();
        let b = DVector::from_vec(vec![0.3, -1.0]);
        let c1 = assemble_c(1, &t2, &b).unwrap();
        let expected = pi.transpose() * &b;
        assert!((DVector::from_column_slice(c1.entries()) - expected).norm() < 1e-15);
        assert_eq!(assemble_c(1, &t2, &DVector::zeros(2)).unwrap().max_abs(), 0.0);

        let n = DMatrix::from_row_slice(2, 2, &[0.1, -0.4, 0.7, 0.2]);
        let g2 = assemble_g(2, &t2, &n).unwrap();
        let (z1, z2) = (DVector::from_vec(vec![0.4, 1.1]), DVector::from_vec(vec![-0.9, 0.3]));
        let hand = 0.5 * ((&n * &z1).dot(&(&pi * &z2)) + (&n * &z2).dot(&(&pi * &z1)));
        let got = g2.eval(&[z1.as_slice(), z2.as_slice()]).unwrap();
        assert!((got - hand).abs() < 1e-14);
        assert_eq!(assemble_g(2, &t2, &DMatrix::zeros(2, 2)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn g_diagonal_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        for i in 2..=4 {
            let t = random_symmetric(&mut rng, i, 3);
            let g = assemble_g(i, &t, &n).unwrap();
            let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let ny = &n * &y;
            let mut args: Vec<&[f64]> = vec![y.as_slice(); i];
            args[0] = ny.as_slice();
            let rhs = t.eval(&args).unwrap();
            let lhs = g.eval_diagonal(y.as_slice()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1e-12));
        }
    }

    #[test]
    fn c2_from_random_t3() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let t3 = random_symmetric(&mut rng, 3, 3);
        let b = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let c2 = assemble_c(2, &t3, &b).unwrap();
        let z1 = [0.2, -0.5, 0.9];
        let z2 = [1.0, 0.1, -0.3];
        let direct = t3.eval(&[b.as_slice(), &z1, &z2]).unwrap();
        assert!((c2.eval(&[&z1, &z2]).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn scalar_r3_and_t3_closed_forms() {
        let nu = 0.5;
        let sys = scalar_system(nu);
        let pi = -1.0 + 2f64.sqrt();
        let a_pi = -(2f64.sqrt());
        let coeffs = expand(&sys, 3, None).unwrap();
        assert!((coeffs.pi[(0, 0)] - pi).abs() < 1e-12);
        let r3 = assemble_r(3, &[SymTensor::from_matrix(&coeffs.pi).unwrap()], &sys.n, &sys.b).unwrap();
        assert!((r3.entries()[0] - 12.0 * pi * pi * nu).abs() < 1e-13);
        let t3 = 2.0 * pi * pi * nu / a_pi;
        assert!((coeffs.form(3).entries()[0] - t3).abs() < 1e-13);

        let a = DMatrix::from_element(1, 1, a_pi);
        let kr = kronecker_oracle(&a, &r3, 1.0).unwrap();
        assert!((kr.entries()[0] - t3).abs() < 1e-13);
        let quad = quadrature_oracle(&a, &r3, 1.0).unwrap();
        // -(1/2) R3 int e^{3 a t} dt = R3 / (2 * 3 a)
        assert!((quad.entries()[0] - r3.entries()[0] / (6.0 * a_pi)).abs() < 1e-9 * t3.abs());
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random_stable(&mut rng, 3);
        let s = spectral::eig(&a).unwrap();
        let zero = SymTensor::zeros(3, 3).unwrap();
        assert_eq!(solve_generalized_lyapunov(&s, &zero, 1.0).unwrap().max_abs(), 0.0);
        assert_eq!(quadrature_oracle(&a, &zero, 1.0).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn order_two_kronecker_is_lyapunov() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let a = random_stable(&mut rng, 4);
        let r = random_symmetric(&mut rng, 2, 4);
        let t = kronecker_oracle(&a, &r, 0.5).unwrap();
        let x = spectral::solve_sylvester_kronecker(&a, &a, &r.to_matrix().unwrap()).unwrap();
        assert!((t.to_matrix().unwrap() - x).norm() < 1e-10 * t.frobenius_norm());
    }

    #[test]
    fn three_solvers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for (n, k) in [(3, 3), (2, 4), (4, 3)] {
            let a = random_stable(&mut rng, n);
            let s = spectral::eig(&a).unwrap();
            let r = random_symmetric(&mut rng, k, n);
            let t = solve_generalized_lyapunov(&s, &r, 0.7).unwrap();
            let kr = kronecker_oracle(&a, &r, 0.7).unwrap();
            let q = quadrature_oracle(&a, &r, 0.7).unwrap();
            assert!(t.relative_distance(&kr).unwrap() <= 1e-7);
            assert!(t.relative_distance(&q).unwrap() <= 1e-7);
            assert!(lyapunov_residual(&a, &t, &r, 0.7, 20, 1).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn lqr_case_has_no_higher_tensors() {
        let sys = scalar_system(0.0);
        let coeffs = expand(&sys, 5, None).unwrap();
        assert_eq!(coeffs.tensors.len(), 3);
        assert!(coeffs.tensors.iter().all(|t| t.max_abs() == 0.0));
        let p2 = expand(&sys, 2, None).unwrap();
        assert!(p2.tensors.is_empty());
    }

    #[test]
    fn cache_roundtrip_and_tamper_detection() {
        let sys = scalar_system(0.5);
        let coeffs = expand(&sys, 4, None).unwrap();
        let json = coeffs.to_cache_json(&sys).unwrap();
        let back = ExpansionCoeffs::from_cache_json(&json, &sys).unwrap();
        assert_eq!(back.pi, coeffs.pi);
        assert_eq!(back.tensors, coeffs.tensors);
        assert_eq!(back.to_cache_json(&sys).unwrap(), json);

        let tampered = json.replacen("\"degree\": 4", "\"degree\": 3", 1);
        assert!(matches!(ExpansionCoeffs::from_cache_json(&tampered, &sys), Err(Error::Integrity(_))));
        let other = scalar_system(0.25);
        assert!(matches!(ExpansionCoeffs::from_cache_json(&json, &other), Err(Error::Integrity(_))));
        assert!(matches!(ExpansionCoeffs::from_cache_json("{", &sys), Err(Error::Integrity(_))));
    }

    #[test]
    fn load_or_expand_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let sys = scalar_system(0.5);
        let (_, hit) = load_or_expand(dir.path(), &sys, 3, None).unwrap();
        assert!(!hit);
        let first = fs::read(cache_path(dir.path(), &sys, 3)).unwrap();
        let (_, hit) = load_or_expand(dir.path(), &sys, 3, None).unwrap();
        assert!(hit);
        assert_eq!(fs::read(cache_path(dir.path(), &sys, 3)).unwrap(), first);
    }
}
