//! Convergence studies of the Taylor feedback against reference optimal controls.
//!
//! For each degree `p`, direction `d` and scale `s` the initial state is `y0 = s d`.
//! A study point records the reference value `V_hat`, the polynomial value `V_p`,
//! the cost of the closed-loop control `U_p`, the remainder integral along the
//! closed loop and the `L^2` distance between the reference control and `U_p`.
//! Slopes are least-squares fits of `log(quantity)` against `log(s)`.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Direction, Setup};
use crate::dynamics::{cost_jp, simulate_closed_loop, SimOptions};
use crate::error::{Error, Result};
use crate::lyapchain::ExpansionCoeffs;
use crate::oracle::{lqr_discretization_shift, solve_open_loop_optimal, warm_start, DiscreteProblem, OracleOptions, Quality};
use crate::system::BilinearSystem;
use crate::valuefn::{eval_vp, Remainder};

/// Values below this are treated as round-off and left out of slope fits.
pub const NOISE_FLOOR: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct StudyPlan {
    pub degrees: Vec<usize>,
    pub scales: Vec<f64>,
    pub directions: Vec<Direction>,
    pub sim: SimOptions,
    pub oracle: OracleOptions,
    pub quality: Quality,
}

/// One study point. `v_hat` carries the quadratic-order discretization
/// correction, `v_hat_raw` and `j_up` are values of the same discrete objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub system: String,
    pub p: usize,
    pub direction: String,
    pub scale: f64,
    pub v_hat: f64,
    pub v_hat_raw: f64,
    pub vp: f64,
    pub j_up: f64,
    pub j_up_sim: f64,
    pub jp_up: f64,
    pub remainder_integral: f64,
    pub control_err: f64,
    pub oracle_iterations: usize,
    pub oracle_degraded: bool,
    pub refinement_failure: bool,
    pub diverged: bool,
    pub tail_flag: bool,
}

impl StudyRecord {
    fn diverged(system: &str, p: usize, direction: &str, scale: f64) -> Self {
        StudyRecord {
            system: system.to_string(),
            p,
            direction: direction.to_string(),
            scale,
            v_hat: f64::NAN,
            v_hat_raw: f64::NAN,
            vp: f64::NAN,
            j_up: f64::NAN,
            j_up_sim: f64::NAN,
            jp_up: f64::NAN,
            remainder_integral: f64::NAN,
            control_err: f64::NAN,
            oracle_iterations: 0,
            oracle_degraded: false,
            refinement_failure: false,
            diverged: true,
            tail_flag: false,
        }
    }

    pub fn flagged(&self) -> bool {
        self.oracle_degraded || self.refinement_failure || self.diverged
    }

    pub fn value_error(&self) -> f64 {
        (self.v_hat - self.vp).abs()
    }

    /// `J(U_p) - V_hat`, both in the oracle discretization.
    pub fn suboptimality(&self) -> f64 {
        self.j_up - self.v_hat_raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    ValueError,
    Suboptimality,
    ControlError,
    RemainderIntegral,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [
        Quantity::ValueError,
        Quantity::Suboptimality,
        Quantity::ControlError,
        Quantity::RemainderIntegral,
    ];

    pub fn of(self, r: &StudyRecord) -> f64 {
        match self {
            Quantity::ValueError => r.value_error(),
            Quantity::Suboptimality => r.suboptimality(),
            Quantity::ControlError => r.control_err,
            Quantity::RemainderIntegral => r.remainder_integral.abs(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quantity::ValueError => "value_error",
            Quantity::Suboptimality => "suboptimality",
            Quantity::ControlError => "control_error",
            Quantity::RemainderIntegral => "remainder_integral",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Fitted,
    /// Every usable point is below the noise floor.
    Floor,
    /// Fewer than three usable points.
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub p: usize,
    pub direction: String,
    pub quantity: Quantity,
    pub slope: Option<f64>,
    pub points: usize,
    pub status: FitStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOutput {
    pub records: Vec<StudyRecord>,
    pub slopes: Vec<SlopeFit>,
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Log-log slope of `quantity` over the records of one `(p, direction)` group.
pub fn fit_quantity(records: &[&StudyRecord], quantity: Quantity) -> (Option<f64>, usize, FitStatus) {
    let candidates: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.flagged())
        .map(|r| (r.scale, quantity.of(r)))
        .filter(|(_, q)| q.is_finite())
        .collect();
    let usable: Vec<(f64, f64)> = candidates.iter().copied().filter(|&(_, q)| q >= NOISE_FLOOR).collect();
    if usable.len() < 3 {
        let status = if usable.is_empty() && !candidates.is_empty() {
            FitStatus::Floor
        } else {
            FitStatus::Inconclusive
        };
        return (None, usable.len(), status);
    }
    let x: Vec<f64> = usable.iter().map(|(s, _)| s.ln()).collect();
    let y: Vec<f64> = usable.iter().map(|(_, q)| q.ln()).collect();
    (fit_slope(&x, &y), usable.len(), FitStatus::Fitted)
}

/// Slopes of every quantity for each `(p, direction)` group, in record order.
pub fn fit_slopes(records: &[StudyRecord]) -> Vec<SlopeFit> {
    let mut groups: Vec<(usize, &str)> = Vec::new();
    for r in records {
        if !groups.contains(&(r.p, r.direction.as_str())) {
            groups.push((r.p, &r.direction));
        }
    }
    let mut fits = Vec::new();
    for (p, dir) in groups {
        let members: Vec<&StudyRecord> = records.iter().filter(|r| r.p == p && r.direction == dir).collect();
        for q in Quantity::ALL {
            let (slope, points, status) = fit_quantity(&members, q);
            fits.push(SlopeFit {
                p,
                direction: dir.to_string(),
                quantity: q,
                slope,
                points,
                status,
            });
        }
    }
    fits
}

/// Checks that `scales` has at least four entries with a constant ratio.
pub fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.len() < 4 {
        return Err(Error::Precondition(format!(
            "a study needs at least 4 scales, got {}",
            scales.len()
        )));
    }
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Precondition("scales must be positive".into()));
    }
    let ratio = scales[1] / scales[0];
    if (ratio - 1.0).abs() < 1e-12 {
        return Err(Error::Precondition("scales must be distinct".into()));
    }
    for w in scales.windows(2) {
        if ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition("scales must form a geometric sequence".into()));
        }
    }
    Ok(())
}

fn is_divergence<T>(r: &Result<T>) -> bool {
    matches!(r, Err(Error::Divergence { .. }))
}

/// One study point for the initial state `y0 = scale * direction`.
#[allow(clippy::too_many_arguments)]
pub fn study_point(
    system: &BilinearSystem,
    coeffs: &ExpansionCoeffs,
    remainder: &Remainder,
    direction_id: &str,
    y0: &DVector<f64>,
    scale: f64,
    plan: &StudyPlan,
) -> Result<StudyRecord> {
    let p = coeffs.degree;
    let diverged = || StudyRecord::diverged(&system.label, p, direction_id, scale);
    let traj = simulate_closed_loop(system, coeffs, y0, &plan.sim);
    if is_divergence(&traj) {
        return Ok(diverged());
    }
    let traj = traj?;
    let tail_tol = plan.sim.tail_tol_for(y0);
    let cost = cost_jp(&traj, system, coeffs, remainder, tail_tol)?;

    let problem = DiscreteProblem::new(system, &coeffs.pi, y0, &plan.oracle)?;
    let u_p = warm_start(system, coeffs, y0, &problem);
    if is_divergence(&u_p) {
        return Ok(diverged());
    }
    let u_p = u_p?;
    let j_up = problem.objective(&u_p)?;
    let best = problem.minimize(u_p.clone(), &plan.oracle);
    if is_divergence(&best) {
        return Ok(diverged());
    }
    let best = best?;
    let control_err = u_p
        .iter()
        .zip(&best.control)
        .zip(problem.weights())
        .map(|((a, b), w)| w * (a - b).powi(2))
        .sum::<f64>()
        .sqrt();

    let mut refinement_failure = false;
    let mut degraded = best.degraded;
    if plan.quality == Quality::Reference && best.value > 0.0 {
        let fine = OracleOptions {
            horizon: 2.0 * plan.oracle.horizon,
            ..plan.oracle
        };
        let refined = solve_open_loop_optimal(system, coeffs, y0, &fine, None)?;
        let rel = (refined.value - best.value).abs() / best.value;
        if rel > 1e-7 {
            log::warn!("p={p} {direction_id} s={scale}: refinement moved the value by {rel:e}");
        }
        refinement_failure = rel > 1e-6;
        degraded |= refined.degraded;
    }
    let shift = lqr_discretization_shift(system, &coeffs.pi, y0, &plan.oracle)?;

    Ok(StudyRecord {
        system: system.label.clone(),
        p,
        direction: direction_id.to_string(),
        scale,
        v_hat: best.value - shift,
        v_hat_raw: best.value,
        vp: eval_vp(coeffs, y0)?,
        j_up,
        j_up_sim: cost.total_j,
        jp_up: cost.total_jp,
        remainder_integral: cost.remainder_cost,
        control_err,
        oracle_iterations: best.iterations,
        oracle_degraded: degraded,
        refinement_failure,
        diverged: false,
        tail_flag: cost.tail_flag,
    })
}

/// Runs every `(p, direction, scale)` point on `jobs` worker threads (all
/// cores when `None`). Records come out ordered by `p`, direction, scale.
pub fn run_study(setup: &Setup, coeffs: &ExpansionCoeffs, plan: &StudyPlan, jobs: Option<usize>) -> Result<StudyOutput> {
    check_scales(&plan.scales)?;
    if plan.degrees.is_empty() || plan.directions.is_empty() {
        return Err(Error::Precondition("a study needs at least one degree and one direction".into()));
    }
    if let Some(&p) = plan.degrees.iter().find(|&&p| p < 2 || p > coeffs.degree) {
        return Err(Error::Precondition(format!(
            "degree {p} outside the available expansion 2..={}",
            coeffs.degree
        )));
    }
    let system = &setup.system;
    let truncated: Vec<(ExpansionCoeffs, Remainder)> = plan
        .degrees
        .iter()
        .map(|&p| {
            let c = coeffs.truncated(p)?;
            let r = Remainder::new(&c, system)?;
            Ok((c, r))
        })
        .collect::<Result<_>>()?;
    let dirs: Vec<(String, DVector<f64>)> = plan
        .directions
        .iter()
        .map(|d| Ok((d.id(), d.resolve(setup)?)))
        .collect::<Result<_>>()?;

    let mut tasks = Vec::new();
    for k in 0..truncated.len() {
        for d in 0..dirs.len() {
            for &s in &plan.scales {
                tasks.push((k, d, s));
            }
        }
    }
    let work = || {
        tasks
            .par_iter()
            .map(|&(k, d, s)| {
                let (c, r) = &truncated[k];
                let (id, dir) = &dirs[d];
                study_point(system, c, r, id, &(dir * s), s, plan)
            })
            .collect::<Result<Vec<_>>>()
    };
    let records = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let slopes = fit_slopes(&records);
    Ok(StudyOutput { records, slopes })
}

pub fn write_records_csv<W: Write>(writer: W, records: &[StudyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(reader: R) -> Result<Vec<StudyRecord>> {
    let mut rd = csv::Reader::from_reader(reader);
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_slopes_csv<W: Write>(writer: W, slopes: &[SlopeFit]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["p", "direction", "quantity", "slope", "points", "status"])?;
    for f in slopes {
        let status = match f.status {
            FitStatus::Fitted => "fitted",
            FitStatus::Floor => "floor",
            FitStatus::Inconclusive => "inconclusive",
        };
        w.write_record([
            f.p.to_string(),
            f.direction.clone(),
            f.quantity.name().to_string(),
            f.slope.map_or(String::new(), |s| format!("{s:.6}")),
            f.points.to_string(),
            status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
