use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taylor_hjb::config::Setup;
use taylor_hjb::fokker_planck::DiscretizedFP;
use taylor_hjb::lyapchain::{
    assemble_r, expand, kronecker_oracle, lyapunov_residual, quadrature_oracle, solve_generalized_lyapunov,
    ExpansionCoeffs,
};
use taylor_hjb::spectral::{riccati_residual, spectral_abscissa, KRONECKER_LIMIT};
use taylor_hjb::valuefn::{grad_vp, hjb_residual, residual_rp};
use taylor_hjb::{BilinearSystem, Result, SymTensor};

use crate::commands::{coefficients, load};

const HJB_SAMPLES: usize = 20;
const HJB_RELATIVE: f64 = 1e-8;

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }

    fn skip(&self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

pub fn run(config: &Path, cache_dir: &Path, p: usize, seed: u64) -> Result<u8> {
    let (_, setup) = load(config)?;
    let (coeffs, hit) = coefficients(&setup, cache_dir, p)?;
    let sys = &setup.system;
    println!(
        "checking {} (dim {}), degree {p}, expansion {}",
        sys.label,
        sys.dim(),
        if hit { "from cache" } else { "computed" }
    );
    let mut report = Report { passed: 0, failed: 0 };

    check_symmetry(&mut report, &coeffs);
    check_riccati(&mut report, sys, &coeffs);
    check_lyapunov(&mut report, sys, &coeffs)?;
    check_solvers(&mut report, sys, &coeffs)?;
    check_hjb(&mut report, sys, &coeffs, seed)?;
    if let Some(fp) = &setup.fp {
        check_fokker_planck(&mut report, fp)?;
    }
    check_lqr(&mut report, &setup, p)?;

    println!("check: {} passed, {} failed", report.passed, report.failed);
    Ok(if report.failed == 0 { 0 } else { 3 })
}

fn check_symmetry(report: &mut Report, coeffs: &ExpansionCoeffs) {
    for t in coeffs.forms() {
        report.record(
            &format!("T_{} symmetric", t.order()),
            t.is_exactly_symmetric(),
            "invariant under every index permutation".into(),
        );
    }
}

fn check_riccati(report: &mut Report, sys: &BilinearSystem, coeffs: &ExpansionCoeffs) {
    let q = nalgebra::DMatrix::identity(sys.dim(), sys.dim());
    let res = riccati_residual(&sys.a, &sys.b, &q, sys.alpha, &coeffs.pi);
    let scale = 1.0 + coeffs.pi.norm() * (1.0 + sys.a.norm());
    report.record(
        "riccati residual",
        res <= 1e-10 * scale,
        format!("{res:e} (bound {:e})", 1e-10 * scale),
    );
    let sym = (&coeffs.pi - coeffs.pi.transpose()).norm();
    report.record("Pi symmetric", sym == 0.0, format!("asymmetry {sym:e}"));
    let abscissa = coeffs.spectrum.abscissa();
    report.record(
        "closed loop stable",
        abscissa < 0.0,
        format!("spectral abscissa {abscissa:.6}"),
    );
}

fn lower_forms(coeffs: &ExpansionCoeffs, k: usize) -> Vec<SymTensor> {
    coeffs.forms().take(k - 2).cloned().collect()
}

fn check_lyapunov(report: &mut Report, sys: &BilinearSystem, coeffs: &ExpansionCoeffs) -> Result<()> {
    for t in &coeffs.tensors {
        let k = t.order();
        let r = assemble_r(k, &lower_forms(coeffs, k), &sys.n, &sys.b)?;
        let res = lyapunov_residual(&coeffs.closed_loop, t, &r, sys.alpha, 50, k as u64)?;
        report.record(&format!("T_{k} lyapunov residual"), res <= 1e-8, format!("{res:e}"));
    }
    Ok(())
}

fn check_solvers(report: &mut Report, sys: &BilinearSystem, coeffs: &ExpansionCoeffs) -> Result<()> {
    let name = "R_3 solver agreement";
    if coeffs.degree < 3 {
        report.skip(name, "degree below 3");
        return Ok(());
    }
    let n = sys.dim();
    if n * n * n > KRONECKER_LIMIT {
        report.skip(name, "Kronecker system too large");
        return Ok(());
    }
    let r = assemble_r(3, &lower_forms(coeffs, 3), &sys.n, &sys.b)?;
    let spectral = solve_generalized_lyapunov(&coeffs.spectrum, &r, sys.alpha)?;
    let kron = kronecker_oracle(&coeffs.closed_loop, &r, sys.alpha)?;
    let quad = quadrature_oracle(&coeffs.closed_loop, &r, sys.alpha)?;
    let dk = spectral.relative_distance(&kron)?;
    let dq = spectral.relative_distance(&quad)?;
    report.record(
        name,
        dk <= 1e-8 && dq <= 1e-6,
        format!("spectral vs kronecker {dk:e}, spectral vs quadrature {dq:e}"),
    );
    Ok(())
}

/// Roundoff scale of the terms that cancel in the HJB residual at `y`.
fn hjb_term_scale(sys: &BilinearSystem, coeffs: &ExpansionCoeffs, y: &DVector<f64>) -> Result<f64> {
    let g = grad_vp(coeffs, y)?;
    let s = g.dot(&sys.input_direction(y));
    Ok(g.dot(&(&sys.a * y)).abs() + 0.5 * y.norm_squared() + s * s / (2.0 * sys.alpha))
}

fn check_hjb(report: &mut Report, sys: &BilinearSystem, coeffs: &ExpansionCoeffs, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..HJB_SAMPLES {
        let dir = DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0));
        let y = dir.normalize() * rng.random_range(0.05..0.1);
        let lhs = hjb_residual(coeffs, sys, &y)?;
        let rp = residual_rp(coeffs, sys, &y)?;
        let floor = 256.0 * f64::EPSILON * hjb_term_scale(sys, coeffs, &y)?;
        let diff = (lhs - rp).abs();
        ok &= diff <= HJB_RELATIVE * rp.abs() + floor;
        worst = worst.max(diff / (rp.abs() + floor));
    }
    report.record(
        "HJB residual identity",
        ok,
        format!("{HJB_SAMPLES} samples, worst |difference| / (|r_p| + roundoff) {worst:.3e}"),
    );
    Ok(())
}

fn check_fokker_planck(report: &mut Report, fp: &DiscretizedFP) -> Result<()> {
    let a_norm = fp.full_a.norm();
    let col_a = fp.full_a.row_sum().abs().max();
    let col_n = fp.full_n.row_sum().abs().max();
    report.record(
        "FP column sums",
        col_a <= 1e-10 * a_norm && col_n <= 1e-10 * (1.0 + fp.full_n.norm()),
        format!("A {col_a:e}, N {col_n:e}"),
    );
    let steady = (&fp.full_a * &fp.rho_inf).norm();
    report.record(
        "FP steady state",
        steady <= 1e-10 * a_norm,
        format!("|A rho_inf| {steady:e}, mass {:.15}", fp.h * fp.rho_inf.sum()),
    );
    let b_mass = (fp.h * fp.full_b.sum()).abs();
    report.record("FP control preserves mass", b_mass <= 1e-12, format!("h sum B {b_mass:e}"));
    let abscissa = spectral_abscissa(&fp.reduced.a)?;
    report.record(
        "FP reduced dynamics stable",
        abscissa < 0.0,
        format!("spectral abscissa {abscissa:.6}"),
    );
    Ok(())
}

fn check_lqr(report: &mut Report, setup: &Setup, p: usize) -> Result<()> {
    let lqr = setup.system.without_bilinear_term();
    let coeffs = expand(&lqr, p, setup.k0.as_ref())?;
    let largest = coeffs.tensors.iter().map(SymTensor::max_abs).fold(0.0, f64::max);
    report.record(
        "LQR tensors vanish",
        largest == 0.0,
        format!("largest entry of T_3..T_{p} with N = 0: {largest:e}"),
    );
    Ok(())
}
