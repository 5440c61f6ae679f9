//! Run configuration files and the small text formats accepted on the command line.
//!
//! A configuration is a JSON document:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "system": { "kind": "fokker_planck", "cells": 16, "nu": 0.1 },
//!   "k0": null,
//!   "sim": { "h": 2.5e-4, "t_max": 10.0 },
//!   "oracle": { "grad_tol": 1e-9, "quality": "fast" },
//!   "study": { "p": [2, 3], "scales": [0.1, 0.05, 0.025, 0.0125], "directions": 2, "seed": 1 }
//! }
//! ```
//!
//! `system` is either `{"kind": "fokker_planck", ..FPConfig}` or
//! `{"kind": "explicit", "a": [[..]], "n": [[..]], "b": [..], "alpha": ..}`.
//! Every section except `schema_version` and `system` is optional.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::SimOptions;
use crate::error::{Error, Result};
use crate::fokker_planck::{DiscretizedFP, FPConfig};
use crate::oracle::{OracleOptions, Quality};
use crate::system::BilinearSystem;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    FokkerPlanck(FPConfig),
    Explicit(BilinearSystem),
}

/// Overrides of the simulation defaults derived from the closed-loop decay rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub h: Option<f64>,
    pub t_max: Option<f64>,
    pub tail_tol: Option<f64>,
    pub blowup_guard: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub h: Option<f64>,
    pub horizon: Option<f64>,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub quality: Quality,
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            h: None,
            horizon: None,
            grad_tol: 1e-9,
            max_iter: 500,
            memory: 12,
            quality: Quality::Fast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub p: Vec<usize>,
    pub scales: Vec<f64>,
    pub directions: usize,
    pub seed: u64,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            p: vec![2, 3],
            scales: vec![0.1, 0.05, 0.025, 0.0125],
            directions: 2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub k0: Option<Vec<f64>>,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub study: StudySettings,
}

/// A configured system ready for expansion.
#[derive(Debug, Clone)]
pub struct Setup {
    pub system: BilinearSystem,
    pub fp: Option<DiscretizedFP>,
    pub k0: Option<DVector<f64>>,
}

fn positive(what: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(Error::Config(format!("{what} must be positive, got {x}"))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn new(system: SystemSpec) -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            system,
            k0: None,
            sim: SimSettings::default(),
            oracle: OracleSettings::default(),
            study: StudySettings::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let SystemSpec::FokkerPlanck(fp) = &self.system {
            fp.validate()?;
        }
        positive("sim.h", self.sim.h)?;
        positive("sim.t_max", self.sim.t_max)?;
        positive("sim.tail_tol", self.sim.tail_tol)?;
        positive("sim.blowup_guard", self.sim.blowup_guard)?;
        positive("oracle.h", self.oracle.h)?;
        positive("oracle.horizon", self.oracle.horizon)?;
        positive("oracle.grad_tol", Some(self.oracle.grad_tol))?;
        if self.oracle.memory == 0 {
            return Err(Error::Config("oracle.memory must be at least 1".into()));
        }
        if self.study.p.iter().any(|&p| p < 2) {
            return Err(Error::Config("expansion degrees must be at least 2".into()));
        }
        for &s in &self.study.scales {
            positive("study scale", Some(s))?;
        }
        Ok(())
    }

    pub fn setup(&self) -> Result<Setup> {
        let (system, fp) = match &self.system {
            SystemSpec::FokkerPlanck(cfg) => {
                let fp = DiscretizedFP::build(cfg)?;
                (fp.reduced.clone(), Some(fp))
            }
            SystemSpec::Explicit(sys) => (sys.clone(), None),
        };
        let k0 = match &self.k0 {
            Some(k) if k.len() != system.dim() => {
                return Err(Error::Config(format!(
                    "k0 has length {} but the system has dimension {}",
                    k.len(),
                    system.dim()
                )))
            }
            Some(k) => Some(DVector::from_column_slice(k)),
            None => None,
        };
        Ok(Setup { system, fp, k0 })
    }

    /// Simulation options for a closed loop with spectral abscissa `abscissa`.
    pub fn sim_options(&self, abscissa: f64) -> SimOptions {
        let base = SimOptions::for_decay_rate(abscissa);
        SimOptions {
            h: self.sim.h.unwrap_or(base.h),
            t_max: self.sim.t_max.unwrap_or(base.t_max),
            tail_tol: self.sim.tail_tol,
            blowup_guard: self.sim.blowup_guard,
        }
    }

    /// Oracle options; the step defaults to the simulation step.
    pub fn oracle_options(&self, abscissa: f64) -> OracleOptions {
        let h = self.oracle.h.unwrap_or(self.sim_options(abscissa).h);
        let base = OracleOptions::for_decay_rate(abscissa, h);
        OracleOptions {
            h,
            horizon: self.oracle.horizon.unwrap_or(base.horizon),
            grad_tol: self.oracle.grad_tol,
            max_iter: self.oracle.max_iter,
            memory: self.oracle.memory,
        }
    }
}

/// Named initial-state direction.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    Zero,
    /// Zero-mean part of a Gaussian bump (Fokker-Planck systems only).
    Bump { center: f64, width: f64 },
    /// Seeded random direction; smooth for Fokker-Planck systems.
    Random { seed: u64 },
    Axis(usize),
    Values(Vec<f64>),
}

/// `direction` or `direction*scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Y0Spec {
    pub direction: Direction,
    pub scale: f64,
}

fn parse_f64(what: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{what}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        return Err(Error::Config(format!("{what}: {s:?} is not finite")));
    }
    Ok(v)
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let args: Vec<&str> = if args.is_empty() { Vec::new() } else { args.split(':').collect() };
        let arity = |n: &[usize]| -> Result<()> {
            if n.contains(&args.len()) {
                Ok(())
            } else {
                Err(Error::Config(format!("direction {name:?}: wrong number of arguments in {s:?}")))
            }
        };
        match name {
            "zero" => {
                arity(&[0])?;
                Ok(Direction::Zero)
            }
            "bump" => {
                arity(&[0, 2])?;
                if args.is_empty() {
                    return Ok(Direction::Bump { center: 0.3, width: 0.1 });
                }
                let center = parse_f64("bump center", args[0])?;
                let width = parse_f64("bump width", args[1])?;
                if width <= 0.0 {
                    return Err(Error::Config("bump width must be positive".into()));
                }
                Ok(Direction::Bump { center, width })
            }
            "random" => {
                arity(&[1])?;
                let seed = args[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("random: bad seed {:?}", args[0])))?;
                Ok(Direction::Random { seed })
            }
            "axis" => {
                arity(&[1])?;
                let i = args[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("axis: bad index {:?}", args[0])))?;
                Ok(Direction::Axis(i))
            }
            "values" => {
                arity(&[1])?;
                let v = args[0]
                    .split(',')
                    .map(|x| parse_f64("values", x))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Direction::Values(v))
            }
            _ => Err(Error::Config(format!("unknown direction {name:?}"))),
        }
    }
}

impl std::str::FromStr for Y0Spec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dir, scale) = match s.rsplit_once('*') {
            Some((d, sc)) => (d, parse_f64("y0 scale", sc)?),
            None => (s, 1.0),
        };
        Ok(Y0Spec {
            direction: dir.parse()?,
            scale,
        })
    }
}

impl Direction {
    /// Short identifier used in study outputs.
    pub fn id(&self) -> String {
        match self {
            Direction::Zero => "zero".into(),
            Direction::Bump { center, width } => format!("bump:{center}:{width}"),
            Direction::Random { seed } => format!("random:{seed}"),
            Direction::Axis(i) => format!("axis:{i}"),
            Direction::Values(_) => "values".into(),
        }
    }

    /// Coordinates in the state space of `setup.system`. All named directions
    /// except `values` have unit norm.
    pub fn resolve(&self, setup: &Setup) -> Result<DVector<f64>> {
        let dim = setup.system.dim();
        match self {
            Direction::Zero => Ok(DVector::zeros(dim)),
            Direction::Bump { center, width } => match &setup.fp {
                Some(fp) => fp.bump_direction(*center, *width),
                None => Err(Error::Config("bump directions need a Fokker-Planck system".into())),
            },
            Direction::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let v = match &setup.fp {
                    Some(fp) => {
                        let coef: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let (lo, len) = (fp.config.x_lo, fp.config.length());
                        let full = DVector::from_iterator(
                            fp.config.cells,
                            fp.config.centers().iter().map(|&x| {
                                let xi = (x - lo) / len;
                                coef.iter()
                                    .enumerate()
                                    .map(|(k, c)| c * ((k + 1) as f64 * PI * xi).cos())
                                    .sum::<f64>()
                            }),
                        );
                        fp.reduce(&full)?
                    }
                    None => DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0)),
                };
                let norm = v.norm();
                if norm == 0.0 {
                    return Err(Error::numerical("random direction vanished", 0.0));
                }
                Ok(v / norm)
            }
            Direction::Axis(i) => {
                if *i >= dim {
                    return Err(Error::Config(format!("axis {i} out of range for dimension {dim}")));
                }
                let mut v = DVector::zeros(dim);
                v[*i] = 1.0;
                Ok(v)
            }
            Direction::Values(v) => {
                if v.len() != dim {
                    return Err(Error::Config(format!(
                        "{} values given for a system of dimension {dim}",
                        v.len()
                    )));
                }
                Ok(DVector::from_column_slice(v))
            }
        }
    }
}

impl Y0Spec {
    pub fn resolve(&self, setup: &Setup) -> Result<DVector<f64>> {
        Ok(self.direction.resolve(setup)? * self.scale)
    }
}

/// Comma-separated list of positive scales.
pub fn parse_scales(s: &str) -> Result<Vec<f64>> {
    let scales = s
        .split(',')
        .map(|x| parse_f64("scales", x))
        .collect::<Result<Vec<_>>>()?;
    if let Some(bad) = scales.iter().find(|&&x| x <= 0.0) {
        return Err(Error::Config(format!("scales must be positive, got {bad}")));
    }
    Ok(scales)
}

/// Comma-separated list of expansion degrees, each at least 2.
pub fn parse_degrees(s: &str) -> Result<Vec<usize>> {
    let ps = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("cannot parse degree {x:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ps.iter().any(|&p| p < 2) {
        return Err(Error::Config("expansion degrees must be at least 2".into()));
    }
    Ok(ps)
}

/// The study directions: a bump (Fokker-Planck only) followed by seeded random ones.
pub fn study_directions(setup: &Setup, count: usize, seed: u64) -> Vec<Direction> {
    let mut dirs = Vec::with_capacity(count);
    if setup.fp.is_some() && count > 0 {
        dirs.push(Direction::Bump { center: 0.3, width: 0.1 });
    }
    let mut next = seed;
    while dirs.len() < count {
        dirs.push(Direction::Random { seed: next });
        next = next.wrapping_add(1);
    }
    dirs
}
