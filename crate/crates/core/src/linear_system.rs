//! Linear-quadratic problem instances.
//!
//! A [`LinearSystem`] bundles the dynamics `(A, B)`, the quadratic running
//! cost `(Q, R)`, the time mode and an optional discount. In continuous time
//! the discount is the horizon `tau` of the weight `exp(-s / tau)`; in
//! discrete time it is the factor `gamma` in `(0, 1]`. An absent discount
//! means undiscounted.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{AtlasError, Result};
use crate::linalg;

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-10;
pub const PD_TOL: f64 = 1e-10;
pub const RANK_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemJson", into = "SystemJson")]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mode: TimeMode,
    pub discount: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SystemDiagnostics {
    pub controllable: bool,
    pub observable: bool,
    pub controllability_rank: usize,
    pub observability_rank: usize,
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mode: TimeMode,
    ) -> Self {
        Self { a, b, q, r, mode, discount: None }
    }

    pub fn with_discount(mut self, discount: Option<f64>) -> Self {
        self.discount = discount;
        self
    }

    /// The 2-state example with `A = B = Q = R = I`.
    pub fn toy() -> Self {
        let i = DMatrix::identity(2, 2);
        Self::new(i.clone(), i.clone(), i.clone(), i, TimeMode::Continuous)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_continuous(&self) -> bool {
        self.mode == TimeMode::Continuous
    }

    /// Checks every structural invariant and returns the system unchanged.
    pub fn validate(self) -> Result<Self> {
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(AtlasError::DimensionMismatch(format!(
                "A is {}x{}, expected square",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n {
            return Err(AtlasError::DimensionMismatch(format!(
                "B has {} rows, expected {n}",
                self.b.nrows()
            )));
        }
        let m = self.b.ncols();
        if self.q.shape() != (n, n) {
            return Err(AtlasError::DimensionMismatch(format!(
                "Q is {:?}, expected {n}x{n}",
                self.q.shape()
            )));
        }
        if self.r.shape() != (m, m) {
            return Err(AtlasError::DimensionMismatch(format!(
                "R is {:?}, expected {m}x{m}",
                self.r.shape()
            )));
        }
        let finite = [&self.a, &self.b, &self.q, &self.r]
            .iter()
            .all(|x| x.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(AtlasError::DimensionMismatch("non-finite entries".into()));
        }

        let q_asym = linalg::symmetry_defect(&self.q);
        let q_min = linalg::min_symmetric_eigenvalue(&self.q);
        if q_asym > SYMMETRY_TOL || q_min < -PSD_TOL {
            return Err(AtlasError::NotPsd { min_eig: q_min, asym: q_asym });
        }
        let r_asym = linalg::symmetry_defect(&self.r);
        let r_min = linalg::min_symmetric_eigenvalue(&self.r);
        if r_asym > SYMMETRY_TOL || r_min < PD_TOL {
            return Err(AtlasError::NotPd { min_eig: r_min, asym: r_asym });
        }

        match (self.mode, self.discount) {
            (_, None) => {}
            (TimeMode::Continuous, Some(tau)) => {
                if !(tau.is_finite() && tau > 0.0) {
                    return Err(AtlasError::InvalidDiscount(format!("tau must be positive, got {tau}")));
                }
            }
            (TimeMode::Discrete, Some(gamma)) => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(AtlasError::InvalidDiscount(format!(
                        "gamma must lie in (0, 1], got {gamma}"
                    )));
                }
            }
        }

        if self.mode == TimeMode::Discrete && !is_invertible(&self.a) {
            return Err(AtlasError::SingularA);
        }
        Ok(())
    }

    /// Controllability of `(A, B)` and observability of `(C, A)` with `C^T C = Q`.
    pub fn diagnose(&self) -> SystemDiagnostics {
        let n = self.n();
        let ctrb = controllability_matrix(&self.a, &self.b);
        let c = cost_factor(&self.q);
        let obsv = controllability_matrix(&self.a.transpose(), &c.transpose());
        let controllability_rank = linalg::rank_relative(&ctrb, RANK_REL_TOL);
        let observability_rank = linalg::rank_relative(&obsv, RANK_REL_TOL);
        SystemDiagnostics {
            controllable: controllability_rank == n,
            observable: observability_rank == n,
            controllability_rank,
            observability_rank,
        }
    }

    /// Undiscounted problem whose HJB solutions coincide with those of the
    /// discounted one: `A <- A - I / (2 tau)`.
    pub fn modified_dynamics(&self) -> Result<Self> {
        let tau = match (self.mode, self.discount) {
            (TimeMode::Continuous, Some(tau)) => tau,
            (TimeMode::Discrete, _) => {
                return Err(AtlasError::WrongMode("modified dynamics need continuous time".into()))
            }
            (TimeMode::Continuous, None) => {
                return Err(AtlasError::WrongMode("system is already undiscounted".into()))
            }
        };
        let n = self.n();
        let mut out = self.clone();
        out.a -= DMatrix::identity(n, n) * (0.5 / tau);
        out.discount = None;
        Ok(out)
    }

    /// The undiscounted system whose Riccati equation is solved for this
    /// instance: modified dynamics in continuous time, `sqrt(gamma)`-scaled
    /// `(A, B)` in discrete time.
    pub fn effective(&self) -> Result<Self> {
        match (self.mode, self.discount) {
            (_, None) => Ok(self.clone()),
            (TimeMode::Continuous, Some(_)) => self.modified_dynamics(),
            (TimeMode::Discrete, Some(gamma)) => {
                let s = gamma.sqrt();
                let mut out = self.clone();
                out.a *= s;
                out.b *= s;
                out.discount = None;
                Ok(out)
            }
        }
    }

    /// `B R^-1 B^T`.
    pub fn control_gramian(&self) -> DMatrix<f64> {
        let r_inv = self.r.clone().try_inverse().expect("R validated positive definite");
        &self.b * r_inv * self.b.transpose()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn is_invertible(a: &DMatrix<f64>) -> bool {
    linalg::rank_relative(a, 1e-12) == a.nrows()
}

/// `[B, AB, ..., A^{n-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// A factor `C` with `C^T C = Q`, keeping only the rows of significant weight.
pub fn cost_factor(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > RANK_REL_TOL * scale.max(f64::MIN_POSITIVE))
        .collect();
    let mut c = DMatrix::zeros(keep.len(), n);
    for (row, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for j in 0..n {
            c[(row, j)] = s * eig.eigenvectors[(j, i)];
        }
    }
    c
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SystemJson {
    mode: TimeMode,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
}

impl TryFrom<SystemJson> for LinearSystem {
    type Error = AtlasError;

    fn try_from(j: SystemJson) -> Result<Self> {
        let discount = match j.mode {
            TimeMode::Continuous => {
                if j.gamma.is_some() {
                    return Err(AtlasError::InvalidDiscount("gamma given for a continuous system".into()));
                }
                j.tau
            }
            TimeMode::Discrete => {
                if j.tau.is_some() {
                    return Err(AtlasError::InvalidDiscount("tau given for a discrete system".into()));
                }
                j.gamma
            }
        };
        let n = j.a.len();
        let m = j.r.len();
        let mut b = linalg::matrix_from_rows(&j.b)?;
        if j.b.is_empty() {
            b = DMatrix::zeros(n, m);
        }
        Ok(LinearSystem {
            a: linalg::matrix_from_rows(&j.a)?,
            b,
            q: linalg::matrix_from_rows(&j.q)?,
            r: linalg::matrix_from_rows(&j.r)?,
            mode: j.mode,
            discount,
        })
    }
}

impl From<LinearSystem> for SystemJson {
    fn from(s: LinearSystem) -> Self {
        let (tau, gamma) = match s.mode {
            TimeMode::Continuous => (s.discount, None),
            TimeMode::Discrete => (None, s.discount),
        };
        SystemJson {
            mode: s.mode,
            a: linalg::matrix_to_rows(&s.a),
            b: linalg::matrix_to_rows(&s.b),
            q: linalg::matrix_to_rows(&s.q),
            r: linalg::matrix_to_rows(&s.r),
            tau,
            gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn toy_is_valid() {
        assert!(LinearSystem::toy().validate().is_ok());
    }

    #[test]
    fn zero_r_is_rejected() {
        let sys = LinearSystem::new(
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[1.0]),
            m(1, 1, &[0.0]),
            TimeMode::Continuous,
        );
        assert!(matches!(sys.validate(), Err(AtlasError::NotPd { .. })));
    }

    #[test]
    fn nilpotent_a_rejected_in_discrete_mode() {
        let sys = LinearSystem::new(
            m(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            m(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
            TimeMode::Discrete,
        );
        assert!(matches!(sys.validate(), Err(AtlasError::SingularA)));
    }

    #[test]
    fn indefinite_q_and_bad_shapes_rejected() {
        let mut sys = LinearSystem::toy();
        sys.q[(0, 0)] = -1.0;
        assert!(matches!(sys.check(), Err(AtlasError::NotPsd { .. })));

        let mut sys = LinearSystem::toy();
        sys.b = DMatrix::identity(3, 2);
        assert!(matches!(sys.check(), Err(AtlasError::DimensionMismatch(_))));

        let sys = LinearSystem::toy().with_discount(Some(-1.0));
        assert!(matches!(sys.check(), Err(AtlasError::InvalidDiscount(_))));
    }

    #[test]
    fn diagnose_identity() {
        let d = LinearSystem::toy().diagnose();
        assert!(d.controllable && d.observable);
        assert_eq!(d.controllability_rank, 2);
    }

    #[test]
    fn diagnose_single_input_on_identity_dynamics() {
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            m(2, 1, &[1.0, 0.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
            TimeMode::Continuous,
        );
        let d = sys.diagnose();
        assert!(!d.controllable);
        assert_eq!(d.controllability_rank, 1);
        assert!(d.observable);
    }

    #[test]
    fn diagnose_double_integrator() {
        let sys = LinearSystem::new(
            m(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            m(2, 1, &[0.0, 1.0]),
            DMatrix::identity(2, 2),
            m(1, 1, &[1.0]),
            TimeMode::Continuous,
        );
        assert!(sys.diagnose().controllable);
    }

    #[test]
    fn unobservable_when_q_misses_a_mode() {
        let sys = LinearSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            m(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::identity(2, 2),
            TimeMode::Continuous,
        );
        let d = sys.diagnose();
        assert!(!d.observable);
        assert_eq!(d.observability_rank, 1);
    }

    #[test]
    fn modified_dynamics_examples() {
        let sys = LinearSystem::toy().with_discount(Some(1.0));
        let md = sys.modified_dynamics().unwrap();
        assert_eq!(md.a, DMatrix::identity(2, 2) * 0.5);
        assert!(md.discount.is_none());
        assert!(matches!(md.modified_dynamics(), Err(AtlasError::WrongMode(_))));

        assert!(matches!(LinearSystem::toy().modified_dynamics(), Err(AtlasError::WrongMode(_))));

        let mut sys = LinearSystem::toy().with_discount(Some(0.25));
        sys.a = m(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        let md = sys.modified_dynamics().unwrap();
        assert_eq!(md.a, m(2, 2, &[0.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn json_round_trip_and_schema() {
        let text = r#"{"mode":"continuous","A":[[1,0],[0,1]],"B":[[1,0],[0,1]],
                       "Q":[[1,0],[0,1]],"R":[[1,0],[0,1]],"tau":null}"#;
        let sys = LinearSystem::from_json(text).unwrap();
        assert_eq!(sys, LinearSystem::toy());
        let back = LinearSystem::from_json(&sys.to_json().unwrap()).unwrap();
        assert_eq!(back, sys);

        let discrete = r#"{"mode":"discrete","A":[[2]],"B":[[1]],"Q":[[1]],"R":[[1]],"gamma":0.9}"#;
        let sys = LinearSystem::from_json(discrete).unwrap();
        assert_eq!(sys.discount, Some(0.9));
        assert!(LinearSystem::from_json(r#"{"mode":"discrete","A":[[2]],"B":[[1]],"Q":[[1]],"R":[[1]],"tau":1}"#).is_err());
    }
}
