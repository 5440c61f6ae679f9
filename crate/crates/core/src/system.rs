use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_dim, Error, Result};

/// `y' = A y + (N y + B) u` with cost `1/2 int |y|^2 + alpha/2 int u^2`,
/// in coordinates where the state inner product is Euclidean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRepr", into = "SystemRepr")]
pub struct BilinearSystem {
    pub label: String,
    pub a: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub b: DVector<f64>,
    pub alpha: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemRepr {
    #[serde(default)]
    label: String,
    a: Vec<Vec<f64>>,
    n: Vec<Vec<f64>>,
    b: Vec<f64>,
    alpha: f64,
}

pub(crate) fn matrix_from_rows(what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<SystemRepr> for BilinearSystem {
    type Error = Error;

    fn try_from(r: SystemRepr) -> Result<Self> {
        BilinearSystem::new(
            r.label,
            matrix_from_rows("A", &r.a)?,
            matrix_from_rows("N", &r.n)?,
            DVector::from_vec(r.b),
            r.alpha,
        )
    }
}

impl From<BilinearSystem> for SystemRepr {
    fn from(s: BilinearSystem) -> Self {
        SystemRepr {
            label: s.label,
            a: matrix_to_rows(&s.a),
            n: matrix_to_rows(&s.n),
            b: s.b.iter().copied().collect(),
            alpha: s.alpha,
        }
    }
}

impl BilinearSystem {
    pub fn new(
        label: impl Into<String>,
        a: DMatrix<f64>,
        n: DMatrix<f64>,
        b: DVector<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let dim = a.nrows();
        if dim == 0 {
            return Err(Error::InvalidArgument("system dimension must be positive".into()));
        }
        ensure_dim("A columns", a.ncols(), dim)?;
        ensure_dim("N rows", n.nrows(), dim)?;
        ensure_dim("N columns", n.ncols(), dim)?;
        ensure_dim("B", b.len(), dim)?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if a.iter().chain(n.iter()).chain(b.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("system matrices must be finite".into()));
        }
        Ok(BilinearSystem {
            label: label.into(),
            a,
            n,
            b,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Same system with `N = 0`.
    pub fn without_bilinear_term(&self) -> Self {
        BilinearSystem {
            label: format!("{}-lqr", self.label),
            n: DMatrix::zeros(self.dim(), self.dim()),
            ..self.clone()
        }
    }

    /// `N y + B`.
    pub fn input_direction(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.n * y + &self.b
    }

    /// `A y + (N y + B) u`.
    pub fn rhs(&self, y: &DVector<f64>, u: f64) -> DVector<f64> {
        &self.a * y + self.input_direction(y) * u
    }

    /// SHA-256 over the bit patterns of `A`, `N`, `B` and `alpha`; the label is ignored.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim() as u64).to_le_bytes());
        for x in self.a.iter().chain(self.n.iter()).chain(self.b.iter()) {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update(self.alpha.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> BilinearSystem {
        BilinearSystem::new(
            "scalar",
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(1, 1.0),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn json_roundtrip() {
        let s = scalar();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"label":"scalar","a":[[-1.0]],"n":[[0.5]],"b":[1.0],"alpha":1.0}"#);
        let back: BilinearSystem = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn validation() {
        let bad = r#"{"a":[[-1.0]],"n":[[0.5]],"b":[1.0],"alpha":0.0}"#;
        assert!(serde_json::from_str::<BilinearSystem>(bad).is_err());
        let ragged = r#"{"a":[[-1.0, 1.0],[2.0]],"n":[[0.5]],"b":[1.0],"alpha":1.0}"#;
        assert!(serde_json::from_str::<BilinearSystem>(ragged).is_err());
    }

    #[test]
    fn hash_ignores_label_only() {
        let s = scalar();
        let mut t = s.clone();
        t.label = "other".into();
        assert_eq!(s.content_hash(), t.content_hash());
        t.alpha = 2.0;
        assert_ne!(s.content_hash(), t.content_hash());
    }
}
