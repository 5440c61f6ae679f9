//! Reference values of the value function by direct open-loop optimization.
//!
//! The control is a piecewise-linear function on a uniform grid over a finite
//! horizon with terminal cost `y(T)^T Pi y(T) / 2`. The state follows the same
//! IMEX scheme as [`crate::dynamics::simulate_open_loop`], and the gradient is
//! the exact derivative of that discrete objective, obtained by running the
//! scheme backwards (a discrete adjoint). Minimization uses L-BFGS in the
//! `L^2` inner product induced by the trapezoidal weights.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate_closed_loop, ControlSignal, Imex, SimOptions, Trajectory};
use crate::error::{ensure_dim, Error, Result};
use crate::lyapchain::ExpansionCoeffs;
use crate::system::BilinearSystem;

/// Discretization and stopping parameters of one optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub h: f64,
    pub horizon: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Fast,
    Reference,
}

impl OracleOptions {
    /// Horizon `20 / |a|` for the closed-loop decay rate `a`, at step `h`.
    pub fn for_decay_rate(abscissa: f64, h: f64) -> Self {
        OracleOptions {
            h,
            horizon: 20.0 / abscissa.abs().max(1e-12),
            grad_tol: 1e-9,
            max_iter: 500,
            memory: 12,
        }
    }

    pub fn steps(&self) -> Result<usize> {
        if !(self.h > 0.0 && self.horizon > 0.0 && self.h.is_finite() && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument("oracle step and horizon must be positive".into()));
        }
        let k = (self.horizon / self.h).round();
        if k < 1999.0 {
            return Err(Error::Precondition(format!(
                "oracle grid needs at least 2000 points, got {}",
                k + 1.0
            )));
        }
        if k > 5e7 {
            return Err(Error::SizeGuard(format!("{k} oracle steps requested")));
        }
        Ok(k as usize)
    }
}

/// Outcome of one optimization.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub control: Vec<f64>,
    pub value: f64,
    pub gradient_norm_final: f64,
    pub iterations: usize,
    pub degraded: bool,
    pub trajectory: Trajectory,
}

struct Sweep {
    ys: Vec<f64>,
    ws: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += a * v);
}

/// `out = beta out + a M x` for a column-major `M`.
#[inline]
fn gemv(out: &mut [f64], a: f64, m: &DMatrix<f64>, x: &[f64], beta: f64) {
    let n = out.len();
    if beta == 0.0 {
        out.fill(0.0);
    } else if beta != 1.0 {
        out.iter_mut().for_each(|o| *o *= beta);
    }
    for (col, &xj) in m.as_slice().chunks_exact(n).zip(x) {
        axpy(out, a * xj, col);
    }
}

/// The discrete objective `J_h(u)` for a fixed initial state.
pub struct DiscreteProblem<'a> {
    system: &'a BilinearSystem,
    pi: DMatrix<f64>,
    y0: DVector<f64>,
    imex: Imex,
    steps: usize,
    /// Trapezoidal weights.
    weights: Vec<f64>,
    /// Transposes used by the backward sweep.
    m_inv_t: DMatrix<f64>,
    m_inv_p_t: DMatrix<f64>,
    n_t: DMatrix<f64>,
}

impl<'a> DiscreteProblem<'a> {
    pub fn new(
        system: &'a BilinearSystem,
        pi: &DMatrix<f64>,
        y0: &DVector<f64>,
        opts: &OracleOptions,
    ) -> Result<Self> {
        ensure_dim("initial state", y0.len(), system.dim())?;
        ensure_dim("Riccati matrix", pi.nrows(), system.dim())?;
        let steps = opts.steps()?;
        let imex = Imex::new(&system.a, opts.h)?;
        let mut weights = vec![opts.h; steps + 1];
        weights[0] *= 0.5;
        weights[steps] *= 0.5;
        Ok(DiscreteProblem {
            system,
            pi: pi.clone(),
            y0: y0.clone(),
            m_inv_t: imex.m_inv.transpose(),
            m_inv_p_t: imex.m_inv_p.transpose(),
            n_t: system.n.transpose(),
            imex,
            steps,
            weights,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.steps + 1
    }

    pub fn h(&self) -> f64 {
        self.imex.h
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// States `y_0 .. y_K` and predictor states `w_0 .. w_{K-1}`, stored flat.
    fn forward(&self, u: &[f64]) -> Result<Sweep> {
        let (sys, h, k, n) = (self.system, self.imex.h, self.steps, self.system.dim());
        let b = sys.b.as_slice();
        let mut ys = vec![0.0; (k + 1) * n];
        let mut ws = vec![0.0; k * n];
        ys[..n].copy_from_slice(self.y0.as_slice());
        let guard = (1e6 * self.y0.norm()).clamp(1e-300, 1e3);
        let (mut d, mut e, mut base, mut mix) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for step in 0..k {
            let (head, tail) = ys.split_at_mut((step + 1) * n);
            let y = &head[step * n..];
            let next = &mut tail[..n];
            let w = &mut ws[step * n..(step + 1) * n];
            d.copy_from_slice(b);
            gemv(&mut d, 1.0, &sys.n, y, 1.0);
            gemv(&mut base, 1.0, &self.imex.m_inv_p, y, 0.0);
            w.copy_from_slice(&base);
            gemv(w, h * u[step], &self.imex.m_inv, &d, 1.0);
            e.copy_from_slice(b);
            gemv(&mut e, 1.0, &sys.n, w, 1.0);
            for i in 0..n {
                mix[i] = d[i] * u[step] + e[i] * u[step + 1];
            }
            next.copy_from_slice(&base);
            gemv(next, 0.5 * h, &self.imex.m_inv, &mix, 1.0);
            let norm = dot(next, next).sqrt();
            if !norm.is_finite() {
                return Err(Error::numerical("oracle forward solve produced non-finite states", norm));
            }
            if norm > guard {
                return Err(Error::Divergence {
                    time: (step + 1) as f64 * h,
                    norm,
                });
            }
        }
        Ok(Sweep { ys, ws })
    }

    fn cost(&self, sweep: &Sweep, u: &[f64]) -> f64 {
        let (alpha, n) = (self.system.alpha, self.system.dim());
        let running: f64 = sweep
            .ys
            .chunks_exact(n)
            .zip(u)
            .zip(&self.weights)
            .map(|((y, &un), &c)| c * (0.5 * dot(y, y) + 0.5 * alpha * un * un))
            .sum();
        let last = &sweep.ys[self.steps * n..];
        let mut pi_y = vec![0.0; n];
        gemv(&mut pi_y, 1.0, &self.pi, last, 0.0);
        running + 0.5 * dot(last, &pi_y)
    }

    pub fn objective(&self, u: &[f64]) -> Result<f64> {
        ensure_dim("control samples", u.len(), self.grid_len())?;
        let sweep = self.forward(u)?;
        Ok(self.cost(&sweep, u))
    }

    /// Objective and its exact gradient with respect to the nodal controls.
    pub fn objective_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        ensure_dim("control samples", u.len(), self.grid_len())?;
        let sweep = self.forward(u)?;
        let value = self.cost(&sweep, u);
        let (sys, h, k, n) = (self.system, self.imex.h, self.steps, self.system.dim());
        let b = sys.b.as_slice();
        let mut grad: Vec<f64> = u
            .iter()
            .zip(&self.weights)
            .map(|(&un, &c)| c * sys.alpha * un)
            .collect();
        let last = &sweep.ys[k * n..];
        let mut lambda: Vec<f64> = last.iter().map(|v| v * self.weights[k]).collect();
        gemv(&mut lambda, 1.0, &self.pi, last, 1.0);
        let mut bufs = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let [d, e, v_bar, n_v, y_bar, z_bar] = &mut bufs;
        for step in (0..k).rev() {
            let y = &sweep.ys[step * n..(step + 1) * n];
            let w = &sweep.ws[step * n..(step + 1) * n];
            d.copy_from_slice(b);
            gemv(d, 1.0, &sys.n, y, 1.0);
            e.copy_from_slice(b);
            gemv(e, 1.0, &sys.n, w, 1.0);
            // corrector
            gemv(v_bar, 1.0, &self.m_inv_t, &lambda, 0.0);
            gemv(n_v, 1.0, &self.n_t, v_bar, 0.0);
            grad[step] += 0.5 * h * dot(d, v_bar);
            grad[step + 1] += 0.5 * h * dot(e, v_bar);
            gemv(y_bar, 1.0, &self.m_inv_p_t, &lambda, 0.0);
            axpy(y_bar, 0.5 * h * u[step], n_v);
            // predictor, with w_bar = (h/2) u_{n+1} n_v
            let w_scale = 0.5 * h * u[step + 1];
            gemv(z_bar, w_scale, &self.m_inv_t, n_v, 0.0);
            grad[step] += h * dot(d, z_bar);
            gemv(y_bar, w_scale, &self.m_inv_p_t, n_v, 1.0);
            gemv(y_bar, h * u[step], &self.n_t, z_bar, 1.0);
            for i in 0..n {
                lambda[i] = y_bar[i] + self.weights[step] * y[i];
            }
        }
        Ok((value, grad))
    }

    /// Trajectory of the discrete scheme under `u`.
    pub fn trajectory(&self, u: &[f64]) -> Result<Trajectory> {
        ensure_dim("control samples", u.len(), self.grid_len())?;
        let sweep = self.forward(u)?;
        let n = self.system.dim();
        let states: Vec<DVector<f64>> = sweep.ys.chunks_exact(n).map(DVector::from_column_slice).collect();
        let times = (0..=self.steps).map(|i| i as f64 * self.imex.h).collect();
        let terminal_norm = states[self.steps].norm();
        Ok(Trajectory {
            times,
            states,
            controls: u.to_vec(),
            terminal_norm,
        })
    }

    fn weighted_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.weights).map(|((x, y), c)| c * x * y).sum()
    }

    /// Nodal samples of a control signal on this grid; zero past its end.
    pub fn sample(&self, control: &ControlSignal) -> Vec<f64> {
        (0..=self.steps).map(|n| control.at(n as f64 * self.imex.h)).collect()
    }

    /// L-BFGS minimization started from `u0`.
    pub fn minimize(&self, u0: Vec<f64>, opts: &OracleOptions) -> Result<OracleResult> {
        ensure_dim("initial control", u0.len(), self.grid_len())?;
        let mut u = u0;
        let (mut value, g) = self.objective_and_gradient(&u)?;
        let mut gw: Vec<f64> = g.iter().zip(&self.weights).map(|(g, c)| g / c).collect();
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        let mut iterations = 0;
        let mut degraded = false;
        loop {
            let gnorm = self.weighted_dot(&gw, &gw).sqrt();
            if gnorm <= opts.grad_tol * value.max(1.0) {
                break;
            }
            if iterations >= opts.max_iter {
                degraded = true;
                break;
            }
            iterations += 1;

            // two-loop recursion in the weighted inner product
            let mut q = gw.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * self.weighted_dot(s, &q);
                q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
                alphas.push(a);
            }
            if let Some((s, y, _)) = history.back() {
                let gamma = self.weighted_dot(s, y) / self.weighted_dot(y, y);
                q.iter_mut().for_each(|qi| *qi *= gamma);
            }
            for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
                let b = rho * self.weighted_dot(y, &q);
                q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
            }
            let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut slope = self.weighted_dot(&gw, &dir);
            if !(slope < 0.0) {
                history.clear();
                dir = gw.iter().map(|v| -v).collect();
                slope = -gnorm * gnorm;
            }

            // Armijo backtracking
            let mut t = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = u.iter().zip(&dir).map(|(ui, di)| ui + t * di).collect();
                match self.objective_and_gradient(&trial) {
                    Ok((v, g)) => {
                        if v <= value + 1e-4 * t * slope {
                            break Some((trial, v, g));
                        }
                        // near the optimum the decrease drowns in rounding;
                        // fall back to approximate Wolfe conditions on the slope
                        let slope_t = dot(&g, &dir);
                        let flat = v <= value + 1e-14 * value.abs();
                        if flat && slope_t >= 0.9 * slope && slope_t <= -0.8 * slope {
                            break Some((trial, v, g));
                        }
                    }
                    Err(Error::Divergence { .. }) => {}
                    Err(e) => return Err(e),
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            let Some((trial, v, g)) = accepted else {
                degraded = true;
                break;
            };
            let g_new: Vec<f64> = g.iter().zip(&self.weights).map(|(g, c)| g / c).collect();
            let s: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&gw).map(|(a, b)| a - b).collect();
            let sy = self.weighted_dot(&s, &y);
            if sy > 1e-16 * self.weighted_dot(&s, &s).sqrt() * self.weighted_dot(&y, &y).sqrt() {
                history.push_back((s, y, 1.0 / sy));
                if history.len() > opts.memory {
                    history.pop_front();
                }
            }
            u = trial;
            value = v;
            gw = g_new;
        }
        let gradient_norm_final = self.weighted_dot(&gw, &gw).sqrt();
        Ok(OracleResult {
            trajectory: self.trajectory(&u)?,
            control: u,
            value,
            gradient_norm_final,
            iterations,
            degraded,
        })
    }
}

/// Closed-loop controls of `u_p` sampled on the oracle grid.
pub fn warm_start(
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    y0: &DVector<f64>,
    problem: &DiscreteProblem<'_>,
) -> Result<Vec<f64>> {
    let sim = SimOptions {
        h: problem.h(),
        t_max: problem.h() * (problem.grid_len() - 1) as f64,
        tail_tol: None,
        blowup_guard: None,
    };
    let traj = simulate_closed_loop(system, coeffs, y0, &sim)?;
    let mut u = traj.controls;
    u.resize(problem.grid_len(), 0.0);
    Ok(u)
}

/// Minimizes the discrete objective from `init`, or from the `u_p` closed-loop control.
pub fn solve_open_loop_optimal(
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    y0: &DVector<f64>,
    opts: &OracleOptions,
    init: Option<Vec<f64>>,
) -> Result<OracleResult> {
    let problem = DiscreteProblem::new(system, &coeffs.pi, y0, opts)?;
    let u0 = match init {
        Some(u) => u,
        None => warm_start(system, coeffs, y0, &problem)?,
    };
    problem.minimize(u0, opts)
}

/// Discretization offset of the oracle at quadratic order: the discrete optimum
/// of the linearized problem (`N = 0`) minus its exact value `y0^T Pi y0 / 2`.
/// Subtracting it from a discrete value removes the `O(h^2 |y0|^2)` error term.
pub fn lqr_discretization_shift(
    system: &BilinearSystem,
    pi: &DMatrix<f64>,
    y0: &DVector<f64>,
    opts: &OracleOptions,
) -> Result<f64> {
    if y0.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let linear = system.without_bilinear_term();
    let problem = DiscreteProblem::new(&linear, pi, y0, opts)?;
    let r = problem.minimize(vec![0.0; problem.grid_len()], opts)?;
    Ok(r.value - 0.5 * y0.dot(&(pi * y0)))
}

/// Value estimate with its refinement diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub refined_value: Option<f64>,
    pub refinement_failure: bool,
    pub degraded: bool,
}

/// `V(y0)` by [`solve_open_loop_optimal`]. The reference quality repeats the
/// solve on a doubled horizon and grid and flags disagreement above `1e-6`.
pub fn estimate_v(
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    y0: &DVector<f64>,
    opts: &OracleOptions,
    quality: Quality,
) -> Result<ValueEstimate> {
    if y0.iter().all(|&v| v == 0.0) {
        return Ok(ValueEstimate {
            value: 0.0,
            refined_value: None,
            refinement_failure: false,
            degraded: false,
        });
    }
    let base = solve_open_loop_optimal(system, coeffs, y0, opts, None)?;
    let mut est = ValueEstimate {
        value: base.value,
        refined_value: None,
        refinement_failure: false,
        degraded: base.degraded,
    };
    if quality == Quality::Reference {
        let fine = OracleOptions {
            horizon: 2.0 * opts.horizon,
            ..*opts
        };
        let refined = solve_open_loop_optimal(system, coeffs, y0, &fine, None)?;
        let rel = (refined.value - base.value).abs() / base.value.abs().max(f64::MIN_POSITIVE);
        if rel > 1e-7 {
            log::warn!("oracle refinement changed the value by {rel:e} (relative)");
        }
        if refined.value > base.value + 1e-9 {
            log::warn!("refined oracle value exceeds the coarse one");
        }
        est.refinement_failure = rel > 1e-6;
        est.degraded |= refined.degraded;
        est.refined_value = Some(refined.value);
        est.value = refined.value;
    }
    Ok(est)
}
