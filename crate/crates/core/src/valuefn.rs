//! Evaluation of `V_p`, its gradient, the feedback `u_p` and the HJB remainder.

use nalgebra::DVector;

use crate::error::{ensure_dim, Error, Result};
use crate::lyapchain::{assemble_c, assemble_g, ExpansionCoeffs};
use crate::multilinear::SymTensor;
use crate::system::BilinearSystem;

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn check_state(coeffs: &ExpansionCoeffs, y: &DVector<f64>) -> Result<()> {
    ensure_dim("state", y.len(), coeffs.dim)
}

fn check_system(coeffs: &ExpansionCoeffs, system: &BilinearSystem) -> Result<()> {
    ensure_dim("system dimension", system.dim(), coeffs.dim)?;
    if system.alpha.to_bits() != coeffs.alpha.to_bits() {
        return Err(Error::InvalidArgument(format!(
            "expansion built for alpha = {}, system has alpha = {}",
            coeffs.alpha, system.alpha
        )));
    }
    Ok(())
}

/// `V_p(y) = sum_k T_k(y^k) / k!`.
pub fn eval_vp(coeffs: &ExpansionCoeffs, y: &DVector<f64>) -> Result<f64> {
    check_state(coeffs, y)?;
    let mut v = 0.0;
    for t in coeffs.forms() {
        v += t.eval_diagonal(y.as_slice())? / factorial(t.order());
    }
    Ok(v)
}

/// `DV_p(y)`, the vector `g` with `g . z = sum_k T_k(z, y^(k-1)) / (k-1)!`.
pub fn grad_vp(coeffs: &ExpansionCoeffs, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_state(coeffs, y)?;
    let mut g = DVector::zeros(coeffs.dim);
    for t in coeffs.forms() {
        g += t.partial_diagonal(y.as_slice())? / factorial(t.order() - 1);
    }
    Ok(g)
}

/// Feedback value with the quantities it was computed from.
#[derive(Debug, Clone)]
pub struct FeedbackEval {
    pub value: f64,
    pub gradient_vp: DVector<f64>,
    pub vp: f64,
}

pub fn feedback(coeffs: &ExpansionCoeffs, system: &BilinearSystem, y: &DVector<f64>) -> Result<FeedbackEval> {
    check_system(coeffs, system)?;
    let gradient_vp = grad_vp(coeffs, y)?;
    let value = -gradient_vp.dot(&system.input_direction(y)) / system.alpha;
    Ok(FeedbackEval {
        value,
        gradient_vp,
        vp: eval_vp(coeffs, y)?,
    })
}

/// `u_p(y) = -(1/alpha) DV_p(y) (N y + B)`.
pub fn feedback_up(coeffs: &ExpansionCoeffs, system: &BilinearSystem, y: &DVector<f64>) -> Result<f64> {
    check_system(coeffs, system)?;
    Ok(-grad_vp(coeffs, y)?.dot(&system.input_direction(y)) / system.alpha)
}

/// `F(y)` in `y' = A_Pi y + F(y)` for the closed loop under `u_p`,
/// assembled without cancelling the linear part.
pub fn closed_loop_nonlinearity(
    coeffs: &ExpansionCoeffs,
    system: &BilinearSystem,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_system(coeffs, system)?;
    check_state(coeffs, y)?;
    let ny = &system.n * y;
    let dir = &ny + &system.b;
    let pi_y = &coeffs.pi * y;
    let mut h = pi_y.dot(&ny);
    for t in &coeffs.tensors {
        h += t.partial_diagonal(y.as_slice())?.dot(&dir) / factorial(t.order() - 1);
    }
    Ok(-(ny * system.b.dot(&pi_y) + dir * h) / system.alpha)
}

/// `-DV_p(y)(Ay) - |y|^2/2 + (DV_p(y)(Ny+B))^2 / (2 alpha)`.
pub fn hjb_residual(coeffs: &ExpansionCoeffs, system: &BilinearSystem, y: &DVector<f64>) -> Result<f64> {
    check_system(coeffs, system)?;
    let g = grad_vp(coeffs, y)?;
    let s = g.dot(&system.input_direction(y));
    Ok(-g.dot(&(&system.a * y)) - 0.5 * y.norm_squared() + s * s / (2.0 * system.alpha))
}

/// The remainder `r_p` of the HJB equation for `V_p`, built from the blocks
/// `C_i` and `G_i` of the expansion.
#[derive(Debug, Clone)]
pub struct Remainder {
    degree: usize,
    alpha: f64,
    /// `C_1 .. C_{p-1}`.
    c: Vec<SymTensor>,
    /// `G_2 .. G_p`.
    g: Vec<SymTensor>,
}

impl Remainder {
    pub fn new(coeffs: &ExpansionCoeffs, system: &BilinearSystem) -> Result<Self> {
        check_system(coeffs, system)?;
        let p = coeffs.degree;
        let c = (1..p)
            .map(|i| assemble_c(i, coeffs.form(i + 1), &system.b))
            .collect::<Result<_>>()?;
        let g = (2..=p)
            .map(|i| assemble_g(i, coeffs.form(i), &system.n))
            .collect::<Result<_>>()?;
        Ok(Remainder {
            degree: p,
            alpha: system.alpha,
            c,
            g,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// `q_{p,1} .. q_{p,p}` at `y`.
    pub fn q_terms(&self, y: &DVector<f64>) -> Result<Vec<f64>> {
        let p = self.degree;
        let y = y.as_slice();
        let mut q = Vec::with_capacity(p);
        q.push(self.c[0].eval_diagonal(y)?);
        for i in 2..p {
            let ci = self.c[i - 1].eval_diagonal(y)?;
            let gi = self.g[i - 2].eval_diagonal(y)?;
            q.push((ci + i as f64 * gi) / factorial(i));
        }
        q.push(self.g[p - 2].eval_diagonal(y)? / factorial(p - 1));
        Ok(q)
    }

    /// `r_p(y) = (1/2 alpha) sum_{i=p+1}^{2p} sum_{j=i-p}^{p} q_j q_{i-j}`.
    pub fn eval(&self, y: &DVector<f64>) -> Result<f64> {
        let p = self.degree;
        let q = self.q_terms(y)?;
        let mut acc = 0.0;
        for i in p + 1..=2 * p {
            for j in i - p..=p {
                acc += q[j - 1] * q[i - j - 1];
            }
        }
        Ok(acc / (2.0 * self.alpha))
    }
}

/// `r_p(y)`; builds the remainder blocks on every call, see [`Remainder`] for reuse.
pub fn residual_rp(coeffs: &ExpansionCoeffs, system: &BilinearSystem, y: &DVector<f64>) -> Result<f64> {
    check_state(coeffs, y)?;
    Remainder::new(coeffs, system)?.eval(y)
}

/// `l(y, u) = |y|^2/2 + alpha u^2 / 2`.
pub fn running_cost(y: &DVector<f64>, u: f64, alpha: f64) -> f64 {
    0.5 * y.norm_squared() + 0.5 * alpha * u * u
}

/// `l_p(y, u) = l(y, u) + r_p(y)`.
pub fn running_cost_p(remainder: &Remainder, y: &DVector<f64>, u: f64) -> Result<f64> {
    Ok(running_cost(y, u, remainder.alpha) + remainder.eval(y)?)
}
