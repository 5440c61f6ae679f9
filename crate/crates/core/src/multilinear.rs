//! Dense multilinear forms over `R^n`.
//!
//! A form of order `k` is stored as the full `n^k` coefficient array in
//! row-major order (last index fastest). Symmetric forms carry a flag; every
//! constructor that sets it guarantees that entries are bitwise identical
//! across index permutations, so permutation invariance of [`SymTensor::eval`]
//! holds exactly rather than up to rounding.

use std::ops::{Add, Mul};

use nalgebra::{DMatrix, DVector, Scalar};
use num_traits::Zero;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Upper bound on stored coefficients (about 270 MB of `f64`).
pub const MAX_ENTRIES: usize = 1 << 25;

/// Dense multilinear form of order `k` on `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct SymTensor {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
    symmetric: bool,
}

/// On-disk layout: `{order, dim, entries: [row-major], symmetric}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRepr {
    order: usize,
    dim: usize,
    entries: Vec<f64>,
    #[serde(default)]
    symmetric: bool,
}

impl TryFrom<TensorRepr> for SymTensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        let t = SymTensor::from_entries(r.order, r.dim, r.entries)?;
        if r.symmetric {
            if !t.is_exactly_symmetric() {
                return Err(Error::Integrity(
                    "tensor flagged symmetric but entries are not permutation invariant".into(),
                ));
            }
            Ok(SymTensor {
                symmetric: true,
                ..t
            })
        } else {
            Ok(t)
        }
    }
}

impl From<SymTensor> for TensorRepr {
    fn from(t: SymTensor) -> Self {
        TensorRepr {
            order: t.order,
            dim: t.dim,
            entries: t.entries,
            symmetric: t.symmetric,
        }
    }
}

pub(crate) fn storage_len(order: usize, dim: usize) -> Result<usize> {
    if order == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "tensor order and dimension must be positive (got order {order}, dim {dim})"
        )));
    }
    let mut len: usize = 1;
    for _ in 0..order {
        len = len
            .checked_mul(dim)
            .filter(|&l| l <= MAX_ENTRIES)
            .ok_or_else(|| {
                Error::SizeGuard(format!(
                    "order-{order} tensor on dimension {dim} exceeds {MAX_ENTRIES} entries"
                ))
            })?;
    }
    Ok(len)
}

#[inline]
fn decode(mut lin: usize, dim: usize, idx: &mut [usize]) {
    for slot in idx.iter_mut().rev() {
        *slot = lin % dim;
        lin /= dim;
    }
}

#[inline]
fn encode(idx: &[usize], dim: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * dim + i)
}

/// Fills a symmetric coefficient array by evaluating `f` only on sorted
/// multi-indices and copying the value to every permutation.
fn build_symmetric(order: usize, dim: usize, mut f: impl FnMut(&[usize]) -> f64) -> Result<Vec<f64>> {
    let len = storage_len(order, dim)?;
    let mut out = vec![0.0; len];
    let mut idx = vec![0usize; order];
    for lin in 0..len {
        decode(lin, dim, &mut idx);
        if idx.windows(2).all(|w| w[0] <= w[1]) {
            out[lin] = f(&idx);
        } else {
            // the sorted tuple is lexicographically smallest, so already filled
            idx.sort_unstable();
            out[lin] = out[encode(&idx, dim)];
        }
    }
    Ok(out)
}

/// Mode-`mode` product: `out[.., j, ..] = sum_i input[.., i, ..] * m[(i, j)]`.
pub(crate) fn mode_product<T>(input: &[T], dim: usize, order: usize, mode: usize, m: &DMatrix<T>) -> Vec<T>
where
    T: Scalar + Copy + Zero + Add<Output = T> + Mul<Output = T>,
{
    debug_assert!(mode < order);
    debug_assert_eq!(m.nrows(), dim);
    debug_assert_eq!(m.ncols(), dim);
    let stride = dim.pow((order - 1 - mode) as u32);
    let block = stride * dim;
    let mut out = vec![T::zero(); input.len()];
    for (src, dst) in input.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for j in 0..dim {
            let dst_row = &mut dst[j * stride..(j + 1) * stride];
            for i in 0..dim {
                let c = m[(i, j)];
                let src_row = &src[i * stride..(i + 1) * stride];
                for (d, &s) in dst_row.iter_mut().zip(src_row) {
                    *d = *d + s * c;
                }
            }
        }
    }
    out
}

/// Applies `m` in every slot: `T'(z_1..z_k) = T(m z_1, .., m z_k)` in coefficient form.
pub(crate) fn all_modes_product<T>(input: &[T], dim: usize, order: usize, m: &DMatrix<T>) -> Vec<T>
where
    T: Scalar + Copy + Zero + Add<Output = T> + Mul<Output = T>,
{
    let mut buf = input.to_vec();
    for mode in 0..order {
        buf = mode_product(&buf, dim, order, mode, m);
    }
    buf
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// All `i`-element subsets of `0..k` in lexicographic order, each paired with its complement.
pub(crate) fn split_positions(k: usize, i: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::with_capacity(binomial(k, i));
    let mut subset: Vec<usize> = (0..i).collect();
    loop {
        let complement: Vec<usize> = (0..k).filter(|p| !subset.contains(p)).collect();
        out.push((subset.clone(), complement));
        // next combination
        let mut pos = i;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            if subset[pos] < k - i + pos {
                subset[pos] += 1;
                for q in pos + 1..i {
                    subset[q] = subset[q - 1] + 1;
                }
                break;
            }
        }
    }
}

impl SymTensor {
    /// Zero form; flagged symmetric.
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        let len = storage_len(order, dim)?;
        Ok(SymTensor {
            order,
            dim,
            entries: vec![0.0; len],
            symmetric: true,
        })
    }

    /// General (not necessarily symmetric) form from row-major coefficients.
    pub fn from_entries(order: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        let len = storage_len(order, dim)?;
        ensure_dim("tensor entries", entries.len(), len)?;
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument("tensor entries must be finite".into()));
        }
        Ok(SymTensor {
            order,
            dim,
            entries,
            symmetric: false,
        })
    }

    /// Symmetric form obtained by averaging `entries` over index permutations.
    pub fn symmetric_from_entries(order: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        Ok(Self::from_entries(order, dim, entries)?.symmetrize())
    }

    /// Order-1 form `z -> v . z`.
    pub fn from_vector(v: &[f64]) -> Result<Self> {
        let t = Self::from_entries(1, v.len(), v.to_vec())?;
        Ok(SymTensor { symmetric: true, ..t })
    }

    /// Order-2 form `(z1, z2) -> z1^T m z2`.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidArgument("bilinear form needs a square matrix".into()));
        }
        let n = m.nrows();
        let entries = (0..n * n).map(|l| m[(l / n, l % n)]).collect();
        let t = Self::from_entries(2, n, entries)?;
        let symmetric = t.is_exactly_symmetric();
        Ok(SymTensor { symmetric, ..t })
    }

    /// Kronecker-delta bilinear form (the Euclidean inner product).
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_matrix(&DMatrix::identity(dim, dim))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.order);
        self.entries[encode(idx, self.dim)]
    }

    /// Matrix of an order-2 form.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.order != 2 {
            return Err(Error::InvalidArgument(format!(
                "to_matrix needs an order-2 form, got order {}",
                self.order
            )));
        }
        let n = self.dim;
        Ok(DMatrix::from_fn(n, n, |i, j| self.entries[i * n + j]))
    }

    /// Checks bitwise permutation invariance of the stored coefficients.
    pub fn is_exactly_symmetric(&self) -> bool {
        let mut idx = vec![0usize; self.order];
        (0..self.entries.len()).all(|lin| {
            decode(lin, self.dim, &mut idx);
            idx.sort_unstable();
            self.entries[encode(&idx, self.dim)].to_bits() == self.entries[lin].to_bits()
        })
    }

    fn require_symmetric(&self, op: &str) -> Result<()> {
        if !self.symmetric {
            return Err(Error::ContractViolation(format!("{op} requires a symmetric form")));
        }
        Ok(())
    }

    fn contract_last_raw(entries: &[f64], v: &[f64]) -> Vec<f64> {
        entries
            .chunks_exact(v.len())
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Full contraction `sum T[i1..ik] z1[i1] .. zk[ik]`.
    pub fn eval(&self, args: &[&[f64]]) -> Result<f64> {
        ensure_dim("number of arguments", args.len(), self.order)?;
        for z in args {
            ensure_dim("argument", z.len(), self.dim)?;
        }
        let mut buf = Self::contract_last_raw(&self.entries, args[self.order - 1]);
        for z in args[..self.order - 1].iter().rev() {
            buf = Self::contract_last_raw(&buf, z);
        }
        Ok(buf[0])
    }

    /// `T(y, .., y)`.
    pub fn eval_diagonal(&self, y: &[f64]) -> Result<f64> {
        ensure_dim("argument", y.len(), self.dim)?;
        let mut buf = Self::contract_last_raw(&self.entries, y);
        for _ in 1..self.order {
            buf = Self::contract_last_raw(&buf, y);
        }
        Ok(buf[0])
    }

    /// `T(., y, .., y)` as a vector: contracts `y` into the last `k - 1` slots.
    pub fn partial_diagonal(&self, y: &[f64]) -> Result<DVector<f64>> {
        ensure_dim("argument", y.len(), self.dim)?;
        let mut buf = self.entries.clone();
        for _ in 1..self.order {
            buf = Self::contract_last_raw(&buf, y);
        }
        Ok(DVector::from_vec(buf))
    }

    /// The order-`k-1` form `S(z1..z_{k-1}) = T(z1..z_{k-1}, v)`.
    pub fn contract_last(&self, v: &[f64]) -> Result<SymTensor> {
        ensure_dim("contraction vector", v.len(), self.dim)?;
        if self.order < 2 {
            return Err(Error::InvalidArgument(
                "contract_last on an order-1 form yields a scalar; use eval".into(),
            ));
        }
        Ok(SymTensor {
            order: self.order - 1,
            dim: self.dim,
            entries: Self::contract_last_raw(&self.entries, v),
            symmetric: self.symmetric,
        })
    }

    /// Gradient of `y -> T(y, .., y)`, i.e. the vector `g` with `g . z = k T(y, .., y, z)`.
    pub fn diagonal_gradient(&self, y: &[f64]) -> Result<DVector<f64>> {
        self.require_symmetric("diagonal_gradient")?;
        Ok(self.partial_diagonal(y)? * self.order as f64)
    }

    /// Symmetrization by averaging over all index permutations.
    ///
    /// Each orbit of multi-indices receives the mean of its members, so the
    /// result is bitwise permutation invariant. Orbits whose members are
    /// already equal keep their value untouched, which makes the operation
    /// exactly idempotent.
    pub fn symmetrize(&self) -> SymTensor {
        if self.symmetric {
            return self.clone();
        }
        let len = self.entries.len();
        let mut sums = vec![0.0; len];
        let mut counts = vec![0u32; len];
        let mut uniform = vec![true; len];
        let mut canon = vec![0usize; len];
        let mut idx = vec![0usize; self.order];
        for lin in 0..len {
            decode(lin, self.dim, &mut idx);
            idx.sort_unstable();
            let c = encode(&idx, self.dim);
            canon[lin] = c;
            if counts[c] > 0 && self.entries[lin].to_bits() != self.entries[c].to_bits() {
                uniform[c] = false;
            }
            sums[c] += self.entries[lin];
            counts[c] += 1;
        }
        let entries = (0..len)
            .map(|lin| {
                let c = canon[lin];
                if uniform[c] {
                    self.entries[c]
                } else {
                    sums[c] / counts[c] as f64
                }
            })
            .collect();
        SymTensor {
            order: self.order,
            dim: self.dim,
            entries,
            symmetric: true,
        }
    }

    /// `Sym_{i,j}(T1 (x) T2)`: the average of `T1(z_S) T2(z_{S^c})` over all
    /// `i`-element position sets `S`.
    pub fn sym_pair(t1: &SymTensor, t2: &SymTensor) -> Result<SymTensor> {
        ensure_dim("sym_pair dimensions", t2.dim, t1.dim)?;
        t1.require_symmetric("sym_pair")?;
        t2.require_symmetric("sym_pair")?;
        let (i, j, n) = (t1.order, t2.order, t1.dim);
        let k = i + j;
        let splits = split_positions(k, i);
        let weight = 1.0 / splits.len() as f64;
        let mut a = vec![0usize; i];
        let mut b = vec![0usize; j];
        let entries = build_symmetric(k, n, |idx| {
            let mut acc = 0.0;
            for (s, c) in &splits {
                for (dst, &p) in a.iter_mut().zip(s) {
                    *dst = idx[p];
                }
                for (dst, &p) in b.iter_mut().zip(c) {
                    *dst = idx[p];
                }
                acc += t1.entries[encode(&a, n)] * t2.entries[encode(&b, n)];
            }
            acc * weight
        })?;
        Ok(SymTensor {
            order: k,
            dim: n,
            entries,
            symmetric: true,
        })
    }

    /// `sum_j T(z1, .., m z_j, .., zk)`. Symmetric input gives symmetric output.
    pub fn mode_sum(&self, m: &DMatrix<f64>) -> Result<SymTensor> {
        ensure_dim("mode_sum matrix rows", m.nrows(), self.dim)?;
        ensure_dim("mode_sum matrix cols", m.ncols(), self.dim)?;
        let mut acc = vec![0.0; self.entries.len()];
        for mode in 0..self.order {
            let term = mode_product(&self.entries, self.dim, self.order, mode, m);
            acc.iter_mut().zip(term).for_each(|(a, t)| *a += t);
        }
        let out = SymTensor {
            order: self.order,
            dim: self.dim,
            entries: acc,
            symmetric: false,
        };
        Ok(if self.symmetric { out.symmetrize() } else { out })
    }

    /// `T'(z1..zk) = T(m z1, .., m zk)`.
    pub fn transform_all_modes(&self, m: &DMatrix<f64>) -> Result<SymTensor> {
        ensure_dim("transform matrix rows", m.nrows(), self.dim)?;
        ensure_dim("transform matrix cols", m.ncols(), self.dim)?;
        let entries = all_modes_product(&self.entries, self.dim, self.order, m);
        let out = SymTensor {
            order: self.order,
            dim: self.dim,
            entries,
            symmetric: false,
        };
        Ok(if self.symmetric { out.symmetrize() } else { out })
    }

    pub fn scaled(&self, c: f64) -> SymTensor {
        SymTensor {
            entries: self.entries.iter().map(|e| e * c).collect(),
            ..self.clone()
        }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &SymTensor, c: f64) -> Result<SymTensor> {
        ensure_dim("tensor order", other.order, self.order)?;
        ensure_dim("tensor dimension", other.dim, self.dim)?;
        Ok(SymTensor {
            order: self.order,
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + c * b)
                .collect(),
            // elementwise ops preserve bitwise permutation invariance
            symmetric: self.symmetric && other.symmetric,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Entrywise l1 norm: an upper bound on the operator norm over Euclidean unit balls.
    pub fn l1_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    /// Lower bound on the operator norm from `samples` random unit-vector tuples.
    pub fn sampled_norm_lower_bound<R: Rng>(&self, rng: &mut R, samples: usize) -> f64 {
        let mut best: f64 = 0.0;
        let mut args: Vec<Vec<f64>> = vec![vec![0.0; self.dim]; self.order];
        for _ in 0..samples {
            for z in args.iter_mut() {
                z.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
                let norm = z.iter().map(|c| c * c).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                z.iter_mut().for_each(|c| *c /= norm);
            }
            let refs: Vec<&[f64]> = args.iter().map(|z| z.as_slice()).collect();
            if let Ok(v) = self.eval(&refs) {
                best = best.max(v.abs());
            }
        }
        best
    }

    /// Largest deviation between the two forms' coefficients.
    pub fn max_abs_diff(&self, other: &SymTensor) -> Result<f64> {
        ensure_dim("tensor order", other.order, self.order)?;
        ensure_dim("tensor dimension", other.dim, self.dim)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `||self - other||_F / max(||other||_F, tiny)`.
    pub fn relative_distance(&self, other: &SymTensor) -> Result<f64> {
        ensure_dim("tensor order", other.order, self.order)?;
        ensure_dim("tensor dimension", other.dim, self.dim)?;
        let diff: f64 = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(diff / other.frobenius_norm().max(1e-300))
    }
}
