//! Joint Gaussian law of the stacked vector (T, D~) pre-selection, and the
//! regression decomposition of the nuisance block on the target.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::event::AffineEvent;
use crate::linalg;

/// Mean and covariance of (T, D~), partitioned at `t_dim`.
#[derive(Debug, Clone)]
pub struct JointGaussianLaw {
    mean: Array1<f64>,
    cov: Array2<f64>,
    t_dim: usize,
}

impl JointGaussianLaw {
    pub fn new(mean: Array1<f64>, cov: Array2<f64>, t_dim: usize) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch("cov shape != mean length".into()));
        }
        if t_dim == 0 || t_dim > dim {
            return Err(Error::InvalidInput("need 1 <= dim(T) <= dim".into()));
        }
        for i in 0..dim {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-10 {
                    return Err(Error::InvalidInput("cov is not symmetric".into()));
                }
            }
        }
        let sym = (&cov + &cov.t()) * 0.5;
        let (vals, _) = linalg::sym_eigh(&sym.view())?;
        if vals.iter().any(|v| *v < -1e-10) {
            return Err(Error::InvalidInput(format!(
                "cov has eigenvalue {:.3e} < -1e-10",
                vals.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        Ok(JointGaussianLaw { mean, cov: sym, t_dim })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn t_dim(&self) -> usize {
        self.t_dim
    }

    pub fn d_dim(&self) -> usize {
        self.dim() - self.t_dim
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Array2<f64> {
        &self.cov
    }

    pub fn theta(&self) -> ArrayView1<'_, f64> {
        self.mean.slice(s![..self.t_dim])
    }

    pub fn mu_d(&self) -> ArrayView1<'_, f64> {
        self.mean.slice(s![self.t_dim..])
    }

    pub fn sigma_t(&self) -> ArrayView2<'_, f64> {
        self.cov.slice(s![..self.t_dim, ..self.t_dim])
    }

    pub fn sigma_td(&self) -> ArrayView2<'_, f64> {
        self.cov.slice(s![..self.t_dim, self.t_dim..])
    }

    pub fn sigma_dt(&self) -> ArrayView2<'_, f64> {
        self.cov.slice(s![self.t_dim.., ..self.t_dim])
    }

    pub fn sigma_d(&self) -> ArrayView2<'_, f64> {
        self.cov.slice(s![self.t_dim.., self.t_dim..])
    }

    /// Reassembles the four blocks; bit-identical to `cov`.
    pub fn reassemble_cov(&self) -> Array2<f64> {
        let d = self.dim();
        let t = self.t_dim;
        let mut out = Array2::zeros((d, d));
        out.slice_mut(s![..t, ..t]).assign(&self.sigma_t());
        out.slice_mut(s![..t, t..]).assign(&self.sigma_td());
        out.slice_mut(s![t.., ..t]).assign(&self.sigma_dt());
        out.slice_mut(s![t.., t..]).assign(&self.sigma_d());
        out
    }
}

/// The regression of D~ on T: `D~ = regression_map T + residual`, with the
/// residual (N_D~) evaluated at the observed pair and then conditioned on.
#[derive(Debug, Clone)]
pub struct TargetDecomposition {
    pub regression_map: Array2<f64>,
    pub residual: Array1<f64>,
}

impl TargetDecomposition {
    pub fn reconstruct(&self, t: &ArrayView1<f64>) -> Array1<f64> {
        self.regression_map.dot(t) + &self.residual
    }
}

/// Regression map Sigma_{D,T} Sigma_T^{-1} and residual N_D = D_obs - map T_obs.
pub fn decompose_on_target(
    law: &JointGaussianLaw,
    t_obs: &ArrayView1<f64>,
    d_obs: &ArrayView1<f64>,
) -> Result<TargetDecomposition> {
    if t_obs.len() != law.t_dim() || d_obs.len() != law.d_dim() {
        return Err(Error::DimensionMismatch(
            "observation lengths do not match the law partition".into(),
        ));
    }
    let sigma_t = law.sigma_t().to_owned();
    let cond = linalg::sym_condition_number(&sigma_t.view())?;
    if !cond.is_finite() || cond >= 1e12 {
        return Err(Error::DegenerateTargetCovariance { cond });
    }
    // map^T solves Sigma_T map^T = Sigma_{T,D}
    let rhs = law.sigma_td().to_owned();
    let map_t = linalg::solve_psd_mat(&sigma_t.view(), &rhs.view())?;
    let regression_map = map_t.t().to_owned();
    let residual = d_obs.to_owned() - regression_map.dot(t_obs);
    Ok(TargetDecomposition { regression_map, residual })
}

/// Rewrites an event over D~ as an event over T using the decomposition.
/// Membership of the observed T in the output equals membership of the
/// observed D~ in the input (exactly, since the residual reconstructs D~).
pub fn restrict_event_to_target(
    event: &AffineEvent,
    dec: &TargetDecomposition,
) -> Result<AffineEvent> {
    event.substitute(&dec.regression_map, &dec.residual)
}
