//! Covariance estimation for the stacked statistic (T, D, Err): the
//! influence-function linearization, pairs bootstrap over its rows, and
//! parametric closed forms for Gaussian-model comparisons.
//!
//! Everything here works on the "mean scale": the data vector's inactive
//! score is divided by n so that all blocks share the 1/sqrt(n) CLT scale;
//! selection events built on the raw score are rescaled before use.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::cv::{CvCurve, FoldPlan};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lasso::{self, Loss};
use crate::linalg;

/// Per-observation contribution rows; column means reproduce the observed
/// stacked statistic exactly.
#[derive(Debug, Clone)]
pub struct InfluenceTable {
    /// n x (e + p + L) matrix: target block, data-vector block, error block.
    pub rows: Array2<f64>,
    pub t_dim: usize,
    pub d_dim: usize,
    pub err_dim: usize,
}

impl InfluenceTable {
    pub fn dim(&self) -> usize {
        self.t_dim + self.d_dim + self.err_dim
    }

    /// Observed stacked statistic (the column means).
    pub fn statistic(&self) -> Array1<f64> {
        self.rows.mean_axis(Axis(0)).unwrap()
    }
}

/// Builds the influence rows for the active set's target/data blocks and,
/// when a curve and fold plan are supplied, the per-lambda error block using
/// each observation's fold-out coefficients.
pub fn influence_contributions(
    data: &Dataset,
    active: &[usize],
    loss: Loss,
    curve: Option<(&CvCurve, &FoldPlan)>,
) -> Result<InfluenceTable> {
    let n = data.n();
    let p = data.p();
    let e = active.len();
    let err_dim = curve.map_or(0, |(c, _)| c.len());
    let dim = e + p + err_dim;
    let mut rows = Array2::zeros((n, dim));

    let inactive = lasso::complement(active, p);
    let (resid, m_e, m_me, ols) = match loss {
        Loss::Squared => {
            let dv = lasso::data_vector(data, active)?;
            let (m_e, m_me) = if e > 0 {
                let xe = data.x_cols(active);
                let g = linalg::gram(&xe.view()) / n as f64;
                let m_e = linalg::invert_psd(&g.view())?;
                let xm = data.x_cols(&inactive);
                let m_me = xm.t().dot(&xe) / n as f64;
                (m_e, m_me)
            } else {
                (Array2::zeros((0, 0)), Array2::zeros((p, 0)))
            };
            let fitted = if e > 0 {
                data.x_cols(active).dot(&dv.ols_active)
            } else {
                Array1::zeros(n)
            };
            (data.y() - &fitted, m_e, m_me, dv.ols_active)
        }
        Loss::Logistic => {
            let dv = lasso::data_vector_logistic(data, active)?;
            let (m_e, m_me) = if e > 0 {
                let (i_e, i_me) = lasso::fisher_blocks(data, active, &dv.ols_active);
                let i_e_n = &i_e / n as f64;
                let m_e = linalg::invert_psd(&i_e_n.view())?;
                (m_e, i_me / n as f64)
            } else {
                (Array2::zeros((0, 0)), Array2::zeros((p, 0)))
            };
            let eta = data.x_cols(active).dot(&dv.ols_active);
            let pi = eta.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            (data.y() - &pi, m_e, m_me, dv.ols_active)
        }
    };

    for i in 0..n {
        let ri = resid[i];
        // target block: plug-in value plus the estimator's influence
        if e > 0 {
            let xe_i = Array1::from_iter(active.iter().map(|&j| data.x()[[i, j]]));
            let infl = m_e.dot(&xe_i) * ri;
            for a in 0..e {
                rows[[i, a]] = ols[a] + infl[a];
                rows[[i, e + a]] = ols[a] + infl[a];
            }
            // inactive score block, mean scale
            let m_corr = m_me.dot(&infl);
            for (b, &j) in inactive.iter().enumerate() {
                rows[[i, e + e + b]] = data.x()[[i, j]] * ri - m_corr[b];
            }
        } else {
            for (b, &j) in inactive.iter().enumerate() {
                rows[[i, e + e + b]] = data.x()[[i, j]] * ri;
            }
        }
    }

    if let Some((curve, plan)) = curve {
        let coefs = curve
            .fold_coefs
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("curve lacks fold coefficients".into()))?;
        let l = curve.len();
        for i in 0..n {
            let k = plan.assignments[i];
            let w = n as f64 / plan.sizes[k] as f64;
            for li in 0..l {
                let beta = coefs.slice(s![li, k, ..]);
                let eta: f64 = (0..p).map(|j| data.x()[[i, j]] * beta[j]).sum();
                let loss_i = match curve.loss {
                    Loss::Squared => {
                        let r = data.y()[i] - eta;
                        r * r
                    }
                    Loss::Logistic => softplus(eta) - data.y()[i] * eta,
                };
                rows[[i, e + p + li]] = w * loss_i;
            }
        }
    }

    Ok(InfluenceTable { rows, t_dim: e, d_dim: p, err_dim })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Pairs bootstrap over the influence rows: covariance of resampled means,
/// scaled by n (the asymptotic, sqrt(n)-standardized covariance).
/// Eigen-clipped at zero so the output is always symmetric PSD.
pub fn pairs_bootstrap_cov<R: Rng>(
    table: &InfluenceTable,
    b: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if b < 200 {
        return Err(Error::InvalidInput("need at least 200 bootstrap draws".into()));
    }
    let n = table.rows.nrows();
    let dim = table.dim();
    let mut means = Array2::zeros((b, dim));
    let mut buf = Array1::zeros(dim);
    for draw in 0..b {
        buf.fill(0.0);
        for _ in 0..n {
            let idx = rng.random_range(0..n);
            buf += &table.rows.row(idx);
        }
        buf.mapv_inplace(|v| v / n as f64);
        means.row_mut(draw).assign(&buf);
    }
    let center = means.mean_axis(Axis(0)).unwrap();
    let mut cov = Array2::zeros((dim, dim));
    for draw in 0..b {
        let dev = &means.row(draw) - &center;
        for a in 0..dim {
            for c in a..dim {
                cov[[a, c]] += dev[a] * dev[c];
            }
        }
    }
    for a in 0..dim {
        for c in 0..a {
            cov[[a, c]] = cov[[c, a]];
        }
    }
    cov.mapv_inplace(|v| v * n as f64 / (b as f64 - 1.0));
    linalg::psd_clip(&cov.view())
}

/// Statistic-scale covariance (the asymptotic covariance divided by n),
/// which is what the selective laws consume directly.
pub fn statistic_cov<R: Rng>(table: &InfluenceTable, b: usize, rng: &mut R) -> Result<Array2<f64>> {
    let n = table.rows.nrows() as f64;
    Ok(pairs_bootstrap_cov(table, b, rng)? / n)
}

/// Parametric covariance blocks under the Gaussian linear model with noise
/// SD `sigma` (statistic scale): Sigma_T = sigma^2 (X_E^T X_E)^{-1}, the
/// inactive mean-scale score independent of T with covariance
/// sigma^2 X_{-E}^T (I - P_E) X_{-E} / n^2.
#[derive(Debug, Clone)]
pub struct ParametricCov {
    pub sigma_t: Array2<f64>,
    pub sigma_d2: Array2<f64>,
}

impl ParametricCov {
    /// Full covariance of the stacked (T, D) = (T, (T, score/n)) vector.
    pub fn assemble_t_d(&self) -> Array2<f64> {
        let e = self.sigma_t.nrows();
        let m = self.sigma_d2.nrows();
        let dim = e + e + m;
        let mut out = Array2::zeros((dim, dim));
        out.slice_mut(s![..e, ..e]).assign(&self.sigma_t);
        out.slice_mut(s![..e, e..2 * e]).assign(&self.sigma_t);
        out.slice_mut(s![e..2 * e, ..e]).assign(&self.sigma_t);
        out.slice_mut(s![e..2 * e, e..2 * e]).assign(&self.sigma_t);
        out.slice_mut(s![2 * e.., 2 * e..]).assign(&self.sigma_d2);
        out
    }
}

pub fn parametric_cov_lasso(data: &Dataset, active: &[usize], sigma: f64) -> Result<ParametricCov> {
    let n = data.n() as f64;
    let p = data.p();
    let inactive = lasso::complement(active, p);
    let xm = data.x_cols(&inactive);
    if active.is_empty() {
        let sigma_d2 = xm.t().dot(&xm) * (sigma * sigma / (n * n));
        return Ok(ParametricCov { sigma_t: Array2::zeros((0, 0)), sigma_d2 });
    }
    let xe = data.x_cols(active);
    let g = linalg::gram(&xe.view());
    let ginv = linalg::invert_psd(&g.view())?;
    let sigma_t = &ginv * (sigma * sigma);
    // X_{-E}^T (I - P_E) X_{-E} = X_{-E}^T X_{-E} - (X_{-E}^T X_E) G^{-1} (X_E^T X_{-E})
    let xme = xm.t().dot(&xe);
    let proj = xme.dot(&ginv).dot(&xme.t());
    let sigma_d2 = (xm.t().dot(&xm) - proj) * (sigma * sigma / (n * n));
    Ok(ParametricCov { sigma_t, sigma_d2 })
}
