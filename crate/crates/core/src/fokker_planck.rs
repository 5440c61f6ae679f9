//! One-dimensional controlled Fokker-Planck equation
//! `rho_t = nu rho_xx + (rho G')_x + u (rho alpha')_x` with no-flux boundaries,
//! discretized by finite volumes and reduced to the zero-mean subspace.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::system::BilinearSystem;

pub const FP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Potential {
    /// `G(x) = kappa (x - center)^2`.
    Quadratic { kappa: f64, center: f64 },
    /// `G(x) = kappa xi^2 (1 - xi)^2` with `xi` the relative position in the interval.
    DoubleWell { kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlShape {
    /// `alpha(x) = amplitude cos(pi xi)`.
    Cosine { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FPConfig {
    pub x_lo: f64,
    pub x_hi: f64,
    pub cells: usize,
    pub nu: f64,
    pub potential: Potential,
    pub control_shape: ControlShape,
    pub alpha_cost: f64,
}

impl Default for FPConfig {
    fn default() -> Self {
        FPConfig {
            x_lo: 0.0,
            x_hi: 1.0,
            cells: 16,
            nu: 0.1,
            potential: Potential::DoubleWell { kappa: 0.1 },
            control_shape: ControlShape::Cosine { amplitude: 1.0 },
            alpha_cost: 1.0,
        }
    }
}

impl FPConfig {
    pub fn length(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    pub fn cell_width(&self) -> f64 {
        self.length() / self.cells as f64
    }

    fn xi(&self, x: f64) -> f64 {
        (x - self.x_lo) / self.length()
    }

    pub fn potential_value(&self, x: f64) -> f64 {
        match self.potential {
            Potential::Quadratic { kappa, center } => kappa * (x - center).powi(2),
            Potential::DoubleWell { kappa } => {
                let s = self.xi(x);
                kappa * s * s * (1.0 - s) * (1.0 - s)
            }
        }
    }

    pub fn potential_slope(&self, x: f64) -> f64 {
        match self.potential {
            Potential::Quadratic { kappa, center } => 2.0 * kappa * (x - center),
            Potential::DoubleWell { kappa } => {
                let s = self.xi(x);
                2.0 * kappa * s * (1.0 - s) * (1.0 - 2.0 * s) / self.length()
            }
        }
    }

    pub fn shape_value(&self, x: f64) -> f64 {
        match self.control_shape {
            ControlShape::Cosine { amplitude } => amplitude * (std::f64::consts::PI * self.xi(x)).cos(),
        }
    }

    pub fn shape_slope(&self, x: f64) -> f64 {
        match self.control_shape {
            ControlShape::Cosine { amplitude } => {
                -amplitude * std::f64::consts::PI * (std::f64::consts::PI * self.xi(x)).sin() / self.length()
            }
        }
    }

    /// Cell centers.
    pub fn centers(&self) -> Vec<f64> {
        let h = self.cell_width();
        (0..self.cells).map(|i| self.x_lo + (i as f64 + 0.5) * h).collect()
    }

    /// Interior interfaces `x_{i+1/2}`, `i = 0 .. cells-2`.
    pub fn interfaces(&self) -> Vec<f64> {
        let h = self.cell_width();
        (1..self.cells).map(|i| self.x_lo + i as f64 * h).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_lo, self.x_hi, self.nu, self.alpha_cost].iter().all(|v| v.is_finite());
        if !finite || !(self.x_hi > self.x_lo) {
            return Err(Error::Config("interval must be finite with x_lo < x_hi".into()));
        }
        if self.cells < 4 {
            return Err(Error::Config(format!("need at least 4 cells, got {}", self.cells)));
        }
        if !(self.nu > 0.0) {
            return Err(Error::Config(format!("diffusion must be positive, got {}", self.nu)));
        }
        if !(self.alpha_cost > 0.0) {
            return Err(Error::Config(format!("alpha_cost must be positive, got {}", self.alpha_cost)));
        }
        match self.potential {
            Potential::Quadratic { kappa, center } if !(kappa.is_finite() && center.is_finite()) => {
                return Err(Error::Config("potential parameters must be finite".into()))
            }
            Potential::DoubleWell { kappa } if !kappa.is_finite() => {
                return Err(Error::Config("potential parameters must be finite".into()))
            }
            _ => {}
        }
        let ControlShape::Cosine { amplitude } = self.control_shape;
        if !amplitude.is_finite() {
            return Err(Error::Config("control amplitude must be finite".into()));
        }
        let scale = amplitude.abs().max(1.0) * 1e-12 / self.length();
        if self.shape_slope(self.x_lo).abs() > scale || self.shape_slope(self.x_hi).abs() > scale {
            return Err(Error::Config("control shape derivative must vanish at the boundary".into()));
        }
        // positivity of the discrete steady state
        let h = self.cell_width();
        let peclet = self
            .interfaces()
            .iter()
            .map(|&x| h * self.potential_slope(x).abs() / self.nu)
            .fold(0.0, f64::max);
        if peclet >= 2.0 {
            return Err(Error::Config(format!(
                "cell Peclet number {peclet:.3} must stay below 2; refine the grid or increase nu"
            )));
        }
        Ok(())
    }
}

/// Full and reduced discrete operators.
#[derive(Debug, Clone)]
pub struct DiscretizedFP {
    pub config: FPConfig,
    pub h: f64,
    pub full_a: DMatrix<f64>,
    pub full_n: DMatrix<f64>,
    pub full_b: DVector<f64>,
    pub rho_inf: DVector<f64>,
    /// Columns span the zero-mean subspace with `h basis^T basis = I`.
    pub basis: DMatrix<f64>,
    pub reduced: BilinearSystem,
}

/// Matrix of `rho -> (F_{i+1/2} - F_{i-1/2}) / h` for the flux
/// `F = diffusion (rho_{i+1} - rho_i)/h + (rho_i + rho_{i+1})/2 * drift(x_{i+1/2})`.
fn flux_operator(cells: usize, h: f64, diffusion: f64, drift: &[f64]) -> DMatrix<f64> {
    let mut op = DMatrix::zeros(cells, cells);
    for (i, &d) in drift.iter().enumerate() {
        // flux through interface i+1/2 as a row functional of rho
        let left = -diffusion / h + 0.5 * d;
        let right = diffusion / h + 0.5 * d;
        op[(i, i)] += left / h;
        op[(i, i + 1)] += right / h;
        op[(i + 1, i)] -= left / h;
        op[(i + 1, i + 1)] -= right / h;
    }
    op
}

/// `(A, N, B, rho_inf)` on the full grid.
pub type FullOperators = (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>);

/// `A`, `N`, `B = N rho_inf` and the discrete steady state.
pub fn build_full_operators(config: &FPConfig) -> Result<FullOperators> {
    config.validate()?;
    let (m, h) = (config.cells, config.cell_width());
    let faces = config.interfaces();
    let g_slope: Vec<f64> = faces.iter().map(|&x| config.potential_slope(x)).collect();
    let a_slope: Vec<f64> = faces.iter().map(|&x| config.shape_slope(x)).collect();
    let a = flux_operator(m, h, config.nu, &g_slope);
    let n = flux_operator(m, h, 0.0, &a_slope);

    // zero flux at every interface
    let mut rho = DVector::zeros(m);
    rho[0] = 1.0;
    for (i, &d) in g_slope.iter().enumerate() {
        rho[i + 1] = rho[i] * (config.nu / h - 0.5 * d) / (config.nu / h + 0.5 * d);
    }
    let mass = h * rho.sum();
    rho /= mass;
    let b = &n * &rho;
    Ok((a, n, b, rho))
}

/// Helmert basis of the zero-mean subspace, scaled so that `h V^T V = I`.
pub fn zero_mean_basis(cells: usize, h: f64) -> DMatrix<f64> {
    let mut v = DMatrix::zeros(cells, cells - 1);
    for k in 1..cells {
        let norm = ((k * (k + 1)) as f64 * h).sqrt();
        for i in 0..k {
            v[(i, k - 1)] = 1.0 / norm;
        }
        v[(k, k - 1)] = -(k as f64) / norm;
    }
    v
}

/// Sampled Gibbs density `exp(-G/nu)` normalized to unit mass.
pub fn gibbs_state(config: &FPConfig) -> DVector<f64> {
    let h = config.cell_width();
    let mut rho = DVector::from_iterator(
        config.cells,
        config.centers().iter().map(|&x| (-config.potential_value(x) / config.nu).exp()),
    );
    let mass = h * rho.sum();
    rho /= mass;
    rho
}

/// Discrete `L^1` norm `h sum |A rho_G|` of the operator applied to the sampled Gibbs density.
pub fn gibbs_residual(config: &FPConfig) -> Result<f64> {
    let (a, _, _, _) = build_full_operators(config)?;
    let h = config.cell_width();
    Ok(h * (&a * gibbs_state(config)).abs().sum())
}

impl DiscretizedFP {
    pub fn build(config: &FPConfig) -> Result<Self> {
        let (full_a, full_n, full_b, rho_inf) = build_full_operators(config)?;
        let h = config.cell_width();
        let basis = zero_mean_basis(config.cells, h);
        let vt = basis.transpose() * h;
        let reduced = BilinearSystem::new(
            format!("fokker-planck-m{}", config.cells),
            &vt * &full_a * &basis,
            &vt * &full_n * &basis,
            &vt * &full_b,
            config.alpha_cost,
        )?;
        Ok(DiscretizedFP {
            config: config.clone(),
            h,
            full_a,
            full_n,
            full_b,
            rho_inf,
            basis,
            reduced,
        })
    }

    /// `P y = y - (h sum y) rho_inf`.
    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("full state", y.len(), self.config.cells)?;
        Ok(y - &self.rho_inf * (self.h * y.sum()))
    }

    /// Reduced coordinates of `P y`.
    pub fn reduce(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.basis.transpose() * self.project(y)? * self.h)
    }

    /// Full zero-mean vector with reduced coordinates `c`.
    pub fn lift(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("reduced state", c.len(), self.config.cells - 1)?;
        Ok(&self.basis * c)
    }

    /// The unreduced system acting on densities.
    pub fn full_system(&self) -> Result<BilinearSystem> {
        BilinearSystem::new(
            format!("fokker-planck-full-m{}", self.config.cells),
            self.full_a.clone(),
            self.full_n.clone(),
            self.full_b.clone(),
            self.config.alpha_cost,
        )
    }

    /// Zero-mean part of a Gaussian bump centered at `center` with width `width`,
    /// in reduced coordinates and scaled to unit norm.
    pub fn bump_direction(&self, center: f64, width: f64) -> Result<DVector<f64>> {
        let bump = DVector::from_iterator(
            self.config.cells,
            self.config
                .centers()
                .iter()
                .map(|&x| (-(x - center).powi(2) / (2.0 * width * width)).exp()),
        );
        let c = self.reduce(&bump)?;
        let norm = c.norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("bump direction has no zero-mean part".into()));
        }
        Ok(c / norm)
    }
}
