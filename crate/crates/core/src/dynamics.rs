//! Time integration of the open and closed loop, and cost quadrature.
//!
//! Both loops use the same second-order IMEX scheme: a linear part `L` is
//! treated by the trapezoidal rule, the rest `f` explicitly by a Heun
//! predictor-corrector,
//!
//! ```text
//! w       = (I - h/2 L)^-1 ((I + h/2 L) y_n + h f(y_n, u_n))
//! y_{n+1} = (I - h/2 L)^-1 ((I + h/2 L) y_n + h/2 (f(y_n, u_n) + f(w, u_{n+1})))
//! ```
//!
//! The closed loop uses `L = A_Pi`, the open loop `L = A`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::lyapchain::ExpansionCoeffs;
use crate::valuefn::{self, Remainder};

pub use crate::system::BilinearSystem;

/// Step size, horizon and stopping thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    pub h: f64,
    pub t_max: f64,
    /// Early stop once `|y| <= tail_tol`; `None` means `1e-8 max(1, |y0|)`.
    pub tail_tol: Option<f64>,
    /// Divergence threshold; `None` means `min(1e6 |y0|, 1e3)`.
    pub blowup_guard: Option<f64>,
}

impl SimOptions {
    /// `h = 1e-3 / |a|`, `T = 40 / |a|` for a decay rate `a`.
    pub fn for_decay_rate(abscissa: f64) -> Self {
        let rate = abscissa.abs().max(1e-12);
        SimOptions {
            h: 1e-3 / rate,
            t_max: 40.0 / rate,
            tail_tol: None,
            blowup_guard: None,
        }
    }

    pub fn tail_tol_for(&self, y0: &DVector<f64>) -> f64 {
        self.tail_tol.unwrap_or(1e-8 * y0.norm().max(1.0))
    }

    fn guard_for(&self, y0: &DVector<f64>) -> f64 {
        self.blowup_guard.unwrap_or((1e6 * y0.norm()).min(1e3))
    }

    fn validate(&self) -> Result<usize> {
        if !(self.h > 0.0 && self.h.is_finite() && self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step {} and horizon {} must be positive",
                self.h, self.t_max
            )));
        }
        let steps = (self.t_max / self.h).round();
        if steps > 1e8 {
            return Err(Error::SizeGuard(format!("{steps} time steps requested")));
        }
        Ok((steps as usize).max(1))
    }
}

/// Sampled solution on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<f64>,
    pub terminal_norm: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// CSV with columns `t,u,y_norm` and, if requested, `y0..y{n-1}`.
    pub fn write_csv<W: Write>(&self, writer: W, full_state: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["t".to_string(), "u".into(), "y_norm".into()];
        if full_state {
            header.extend((0..n).map(|i| format!("y{i}")));
        }
        w.write_record(&header)?;
        for ((t, y), u) in self.times.iter().zip(&self.states).zip(&self.controls) {
            let mut row = vec![format!("{t:e}"), format!("{u:e}"), format!("{:e}", y.norm())];
            if full_state {
                row.extend(y.iter().map(|v| format!("{v:e}")));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the full-state CSV layout written by [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "t" || &header[1] != "u" || &header[2] != "y_norm" {
            return Err(Error::InvalidArgument(
                "trajectory CSV needs columns t,u,y_norm,y0,.. with the full state".into(),
            ));
        }
        let n = header.len() - 3;
        for (i, name) in header.iter().skip(3).enumerate() {
            if name != format!("y{i}") {
                return Err(Error::InvalidArgument(format!("unexpected column {name:?}")));
            }
        }
        let mut traj = Trajectory {
            times: Vec::new(),
            states: Vec::new(),
            controls: Vec::new(),
            terminal_norm: 0.0,
        };
        for record in r.records() {
            let record = record?;
            ensure_dim("CSV row width", record.len(), n + 3)?;
            let vals: Vec<f64> = record
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidArgument(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("trajectory CSV contains non-finite values".into()));
            }
            if let Some(&last) = traj.times.last() {
                if !(vals[0] > last) {
                    return Err(Error::InvalidArgument("trajectory times must increase".into()));
                }
            }
            traj.times.push(vals[0]);
            traj.controls.push(vals[1]);
            traj.states.push(DVector::from_column_slice(&vals[3..]));
        }
        if traj.is_empty() {
            return Err(Error::InvalidArgument("trajectory CSV has no rows".into()));
        }
        traj.terminal_norm = traj.states.last().map_or(0.0, |y| y.norm());
        Ok(traj)
    }
}

/// Cost of a trajectory split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub state_cost: f64,
    pub control_cost: f64,
    pub remainder_cost: f64,
    pub tail_estimate: f64,
    pub total_j: f64,
    pub total_jp: f64,
    /// Set when the trajectory stopped before reaching the tail tolerance.
    pub tail_flag: bool,
}

/// Precomputed trapezoidal propagators for `y' = L y + f`.
#[derive(Debug, Clone)]
pub(crate) struct Imex {
    pub h: f64,
    /// `(I - h/2 L)^-1`.
    pub m_inv: DMatrix<f64>,
    /// `(I - h/2 L)^-1 (I + h/2 L)`.
    pub m_inv_p: DMatrix<f64>,
}

impl Imex {
    pub fn new(l: &DMatrix<f64>, h: f64) -> Result<Self> {
        let n = l.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        let m = &id - l * (0.5 * h);
        let m_inv = m
            .try_inverse()
            .ok_or_else(|| Error::SingularEquation("trapezoidal matrix I - h/2 L is singular".into()))?;
        let m_inv_p = &m_inv * (&id + l * (0.5 * h));
        Ok(Imex { h, m_inv, m_inv_p })
    }

    /// One predictor-corrector step given a closure for the explicit part.
    pub fn step(
        &self,
        y: &DVector<f64>,
        f_n: &DVector<f64>,
        mut f_next: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let base = &self.m_inv_p * y;
        let predictor = &base + &self.m_inv * f_n * self.h;
        let f_pred = f_next(&predictor)?;
        Ok(base + &self.m_inv * (f_n + f_pred) * (0.5 * self.h))
    }
}

fn check_finite(y: &DVector<f64>, t: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("state became non-finite at t = {t}"), f64::NAN));
    }
    Ok(())
}

fn run<FU>(
    imex: &Imex,
    y0: &DVector<f64>,
    opts: &SimOptions,
    steps: usize,
    mut explicit: impl FnMut(&DVector<f64>, usize) -> Result<(DVector<f64>, f64)>,
    mut explicit_at: FU,
) -> Result<Trajectory>
where
    FU: FnMut(&DVector<f64>, usize) -> Result<DVector<f64>>,
{
    let tail_tol = opts.tail_tol_for(y0);
    let guard = opts.guard_for(y0);
    let mut traj = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        controls: Vec::with_capacity(steps + 1),
        terminal_norm: 0.0,
    };
    let mut y = y0.clone();
    check_finite(&y, 0.0)?;
    for n in 0..=steps {
        let t = n as f64 * imex.h;
        let (f_n, u_n) = explicit(&y, n)?;
        traj.times.push(t);
        traj.states.push(y.clone());
        traj.controls.push(u_n);
        let norm = y.norm();
        if norm <= tail_tol || n == steps {
            break;
        }
        let next = imex.step(&y, &f_n, |w| explicit_at(w, n + 1))?;
        let t_next = t + imex.h;
        check_finite(&next, t_next)?;
        let next_norm = next.norm();
        if next_norm > guard {
            return Err(Error::Divergence { time: t_next, norm: next_norm });
        }
        y = next;
    }
    traj.terminal_norm = traj.states.last().map_or(0.0, |y| y.norm());
    Ok(traj)
}

/// Integrates `y' = A_Pi y + F(y)`, i.e. the system under the feedback `u_p`.
pub fn simulate_closed_loop(
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    y0: &DVector<f64>,
    opts: &SimOptions,
) -> Result<Trajectory> {
    ensure_dim("initial state", y0.len(), system.dim())?;
    let steps = opts.validate()?;
    let imex = Imex::new(&coeffs.closed_loop, opts.h)?;
    run(
        &imex,
        y0,
        opts,
        steps,
        |y, _| {
            Ok((
                valuefn::closed_loop_nonlinearity(coeffs, system, y)?,
                valuefn::feedback_up(coeffs, system, y)?,
            ))
        },
        |y, _| valuefn::closed_loop_nonlinearity(coeffs, system, y),
    )
}

/// Piecewise-linear control `u(t)` through samples on a uniform grid of spacing `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl ControlSignal {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt > 0.0) || values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("control signal needs dt > 0 and finite samples".into()));
        }
        Ok(ControlSignal { dt, values })
    }

    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        let dt = if traj.len() > 1 { traj.times[1] - traj.times[0] } else { 1.0 };
        Self::new(dt, traj.controls.clone())
    }

    pub fn horizon(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dt
    }

    /// Value at `t`; zero after the last sample.
    pub fn at(&self, t: f64) -> f64 {
        let s = t / self.dt;
        let i = s.floor();
        if i < 0.0 {
            return self.values[0];
        }
        let i = i as usize;
        if i + 1 >= self.values.len() {
            return if i + 1 == self.values.len() && (s - i as f64) < 1e-9 {
                self.values[i]
            } else {
                0.0
            };
        }
        let w = s - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }
}

/// Integrates `y' = A y + (N y + B) u(t)` for a prescribed control.
///
/// The control is sampled at the step grid; beyond its last sample it is zero.
pub fn simulate_open_loop(
    system: &BilinearSystem,
    y0: &DVector<f64>,
    control: &ControlSignal,
    opts: &SimOptions,
) -> Result<Trajectory> {
    ensure_dim("initial state", y0.len(), system.dim())?;
    let steps = opts.validate()?;
    let imex = Imex::new(&system.a, opts.h)?;
    let h = opts.h;
    run(
        &imex,
        y0,
        opts,
        steps,
        |y, n| {
            let u = control.at(n as f64 * h);
            Ok((system.input_direction(y) * u, u))
        },
        |y, n| Ok(system.input_direction(y) * control.at(n as f64 * h)),
    )
}

fn trapezoid(h: f64, values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

fn grid_step(traj: &Trajectory) -> f64 {
    if traj.len() > 1 {
        traj.times[1] - traj.times[0]
    } else {
        0.0
    }
}

/// `J`: trapezoidal running cost plus the quadratic tail `y(T)^T Pi y(T) / 2`.
pub fn cost_j(traj: &Trajectory, system: &BilinearSystem, pi: &DMatrix<f64>, tail_tol: f64) -> Result<CostReport> {
    ensure_dim("Riccati matrix", pi.nrows(), system.dim())?;
    let h = grid_step(traj);
    let state_cost = trapezoid(h, traj.states.iter().map(|y| 0.5 * y.norm_squared()));
    let control_cost = trapezoid(h, traj.controls.iter().map(|u| 0.5 * system.alpha * u * u));
    let tail_estimate = traj.states.last().map_or(0.0, |y| 0.5 * y.dot(&(pi * y)));
    let total_j = state_cost + control_cost + tail_estimate;
    Ok(CostReport {
        state_cost,
        control_cost,
        remainder_cost: 0.0,
        tail_estimate,
        total_j,
        total_jp: total_j,
        tail_flag: traj.terminal_norm > tail_tol,
    })
}

/// `J_p = J + int r_p(y) dt`.
pub fn cost_jp(
    traj: &Trajectory,
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    remainder: &Remainder,
    tail_tol: f64,
) -> Result<CostReport> {
    let mut report = cost_j(traj, system, &coeffs.pi, tail_tol)?;
    let h = grid_step(traj);
    let r: Vec<f64> = traj.states.iter().map(|y| remainder.eval(y)).collect::<Result<_>>()?;
    report.remainder_cost = trapezoid(h, r.into_iter());
    report.total_jp = report.total_j + report.remainder_cost;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapchain::expand;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_system(rng: &mut ChaCha8Rng, n: usize, bilinear: bool) -> BilinearSystem {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let shift = crate::spectral::spectral_abscissa(&m).unwrap() + 1.0;
        let nmat = if bilinear {
            DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5))
        } else {
            DMatrix::zeros(n, n)
        };
        BilinearSystem::new(
            "small",
            m - DMatrix::identity(n, n) * shift,
            nmat,
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
            1.0,
        )
        .unwrap()
    }

    fn opts(h: f64, t_max: f64) -> SimOptions {
        SimOptions {
            h,
            t_max,
            tail_tol: None,
            blowup_guard: None,
        }
    }

    #[test]
    fn zero_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let sys = small_system(&mut rng, 3, true);
        let c = expand(&sys, 3, None).unwrap();
        let traj = simulate_closed_loop(&sys, &c, &DVector::zeros(3), &opts(1e-2, 10.0)).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.controls, vec![0.0]);
        let cost = cost_j(&traj, &sys, &c.pi, 1e-8).unwrap();
        assert_eq!(cost.total_j, 0.0);
    }

    #[test]
    fn scalar_exponential_decay() {
        let sys = BilinearSystem::new(
            "decay",
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            1.0,
        )
        .unwrap();
        let y0 = DVector::from_element(1, 1.0);
        let u = ControlSignal::new(1e-3, vec![0.0]).unwrap();
        let traj = simulate_open_loop(&sys, &y0, &u, &opts(1e-3, 5.0)).unwrap();
        let worst = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, y)| ((y[0] - (-t).exp()) / (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4);
    }

    #[test]
    fn lqr_cost_equals_riccati_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let sys = small_system(&mut rng, 4, false);
        let c = expand(&sys, 2, None).unwrap();
        let y0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let o = opts(1e-3, 60.0);
        let traj = simulate_closed_loop(&sys, &c, &y0, &o).unwrap();
        assert!(traj.terminal_norm <= o.tail_tol_for(&y0));
        let cost = cost_j(&traj, &sys, &c.pi, o.tail_tol_for(&y0)).unwrap();
        let exact = 0.5 * y0.dot(&(&c.pi * &y0));
        assert!(((cost.total_j - exact) / exact).abs() <= 1e-6, "{} vs {exact}", cost.total_j);
        assert!(!cost.tail_flag);
    }

    #[test]
    fn step_halving_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let sys = small_system(&mut rng, 3, true);
        let c = expand(&sys, 3, None).unwrap();
        let y0 = DVector::from_fn(3, |_, _| rng.random_range(-0.3..0.3));
        let at = |h: f64| {
            let o = SimOptions {
                tail_tol: Some(0.0),
                ..opts(h, 2.0)
            };
            simulate_closed_loop(&sys, &c, &y0, &o).unwrap().states.last().unwrap().clone()
        };
        let (a, b, d) = (at(0.02), at(0.01), at(0.005));
        let ratio = (&a - &b).norm() / (&b - &d).norm();
        assert!((ratio - 4.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn open_loop_replay_reproduces_closed_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let sys = small_system(&mut rng, 3, true);
        let c = expand(&sys, 3, None).unwrap();
        let y0 = DVector::from_fn(3, |_, _| rng.random_range(-0.3..0.3));
        let o = opts(1e-3, 20.0);
        let closed = simulate_closed_loop(&sys, &c, &y0, &o).unwrap();
        let u = ControlSignal::from_trajectory(&closed).unwrap();
        let replay = simulate_open_loop(&sys, &y0, &u, &SimOptions { tail_tol: Some(0.0), ..o }).unwrap();
        let worst = closed
            .states
            .iter()
            .zip(&replay.states)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-5 * y0.norm(), "{worst}");
    }

    #[test]
    fn divergence_is_reported() {
        let sys = BilinearSystem::new(
            "unstable",
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            1.0,
        )
        .unwrap();
        let u = ControlSignal::new(0.1, vec![0.0]).unwrap();
        let err = simulate_open_loop(&sys, &DVector::from_element(1, 1.0), &u, &opts(0.01, 100.0));
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    #[test]
    fn csv_roundtrip() {
        let traj = Trajectory {
            times: vec![0.0, 0.5, 1.0],
            states: vec![
                DVector::from_vec(vec![1.0, -2.0]),
                DVector::from_vec(vec![0.5, 0.25]),
                DVector::from_vec(vec![0.1, 1e-17]),
            ],
            controls: vec![0.3, -0.1, 0.0],
            terminal_norm: DVector::from_vec(vec![0.1, 1e-17]).norm(),
        };
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,u,y_norm,y0,y1\n"));
        assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), traj);
        let mut short = Vec::new();
        traj.write_csv(&mut short, false).unwrap();
        assert!(Trajectory::read_csv(short.as_slice()).is_err());
    }

    #[test]
    fn control_signal_interpolates() {
        let u = ControlSignal::new(0.5, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(u.at(0.25), 0.5);
        assert_eq!(u.at(0.75), 2.0);
        assert_eq!(u.at(1.0), 3.0);
        assert_eq!(u.at(2.0), 0.0);
    }
}
