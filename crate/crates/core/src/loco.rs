//! Marginal LOCO inference: the split estimator with CLT intervals and the
//! carved estimator whose selective density treats the random training
//! split as a Gaussian randomization view.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::lasso::{self, LassoFit};
use crate::law::JointGaussianLaw;
use crate::linalg;
use crate::pivot::ConfidenceInterval;
use crate::sampler::{ConstraintBlock, RandomizationView, SelectiveDensity};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocoVariant {
    Split,
    Carved,
}

#[derive(Debug, Clone)]
pub struct LocoEstimate {
    /// Natural column index; must belong to the selected set.
    pub coordinate: usize,
    pub value: f64,
    pub randomization: f64,
    pub sigma_r: f64,
    pub variant: LocoVariant,
    /// Estimated variance of the estimator (randomization included).
    pub variance: f64,
}

// OLS with a jitter fallback so an identically-zero covariate degrades to a
// zero coefficient instead of an error (the vacuous-covariate convention).
fn ols_coef(x: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    if x.ncols() == 0 {
        return Ok(Array1::zeros(0));
    }
    let g = linalg::gram(&x.view());
    let b = x.t().dot(y);
    linalg::solve_psd(&g.view(), &b.view())
}

// per-row drop in squared residual from leaving covariate j out; the
// E \ {j} model for |E| = 1 is the empty model whose residual is y itself
fn loco_contributions(data: &Dataset, active: &[usize], j: usize) -> Result<Array1<f64>> {
    if !active.contains(&j) {
        return Err(Error::InvalidInput(format!("coordinate {j} is not in the selected set")));
    }
    let without: Vec<usize> = active.iter().copied().filter(|&k| k != j).collect();
    let xe = data.x_cols(active);
    let beta_full = ols_coef(&xe, data.y())?;
    let r_full = data.y() - &xe.dot(&beta_full);
    let r_drop = if without.is_empty() {
        data.y().clone()
    } else {
        let xd = data.x_cols(&without);
        let beta_drop = ols_coef(&xd, data.y())?;
        data.y() - &xd.dot(&beta_drop)
    };
    Ok(Array1::from_iter(
        r_drop.iter().zip(r_full.iter()).map(|(a, b)| a * a - b * b),
    ))
}

/// Default randomization scale for the LOCO estimator: the 1 * m^{-1/2} CLT
/// scale of a mean over the m rows the estimator averages. The per-row
/// contribution variance itself degenerates at the null (the reason the
/// randomization exists), so the unit constant anchors the scale.
pub fn default_loco_sigma_r(data: &Dataset, active: &[usize], j: usize) -> Result<f64> {
    let _ = loco_contributions(data, active, j)?; // validates j in E and ranks
    Ok(1.0 / (data.n() as f64).sqrt())
}

/// The data-splitting estimator: the average contribution over the test set
/// plus an independent N(0, sigma_r^2) draw; variance by pairs bootstrap of
/// the per-row contributions plus sigma_r^2.
pub fn loco_split<R: Rng>(
    test_data: &Dataset,
    active: &[usize],
    j: usize,
    sigma_r: f64,
    rng: &mut R,
) -> Result<LocoEstimate> {
    if active.len() >= test_data.n() {
        return Err(Error::InvalidInput("need |E| < test-set size".into()));
    }
    let c = loco_contributions(test_data, active, j)?;
    let n2 = test_data.n() as f64;
    let mean = c.sum() / n2;
    let r_j = if sigma_r > 0.0 {
        Normal::new(0.0, sigma_r).unwrap().sample(rng)
    } else {
        0.0
    };
    // pairs bootstrap of the mean of per-row contributions
    let b = 500;
    let mut boot = Vec::with_capacity(b);
    for _ in 0..b {
        let mut s = 0.0;
        for _ in 0..test_data.n() {
            s += c[rng.random_range(0..test_data.n())];
        }
        boot.push(s / n2);
    }
    let variance = stats::variance(&boot) + sigma_r * sigma_r;
    Ok(LocoEstimate {
        coordinate: j,
        value: mean + r_j,
        randomization: r_j,
        sigma_r,
        variant: LocoVariant::Split,
        variance,
    })
}

/// Everything the sampler needs to do selective inference on the carved
/// estimator: the density over (gamma_hat, beta_E), its observed state, and
/// the estimator itself.
#[derive(Debug, Clone)]
pub struct CarvedInference {
    pub estimate: LocoEstimate,
    pub density: SelectiveDensity,
    pub init: Array1<f64>,
}

/// The data-carving estimator and its selective density.
///
/// Selection ran as a plain Lasso on the training rows only; the estimator
/// uses the whole dataset. The training-score deviation
/// `omega = X1' y1 - f X' y` is modeled as a Gaussian view with covariance
/// `f (1 - f) n Cov(x_i y_i)` (the without-replacement split variance, equal
/// to the (1/f - 1) inflation of the training-size score covariance), and
/// the training KKT map rewrites it as an affine function of
/// (gamma_hat, beta_E) after conditioning on the inactive subgradient.
pub fn loco_carved<R: Rng>(
    full_data: &Dataset,
    train_rows: &[usize],
    fit: &LassoFit,
    j: usize,
    sigma_r: f64,
    rng: &mut R,
) -> Result<CarvedInference> {
    if fit.randomization.is_some() {
        return Err(Error::InvalidInput(
            "carving expects a plain (non-randomized) training-set Lasso".into(),
        ));
    }
    if train_rows.is_empty() || train_rows.len() >= full_data.n() {
        return Err(Error::MissingSelectionTrace);
    }
    let active = &fit.active;
    if !active.contains(&j) {
        return Err(Error::InvalidInput(format!("coordinate {j} not selected")));
    }
    let n = full_data.n() as f64;
    let p = full_data.p();
    let e = active.len();
    let f = train_rows.len() as f64 / n;

    // the estimator: full-data contributions plus randomization
    let contribs = loco_contributions(full_data, active, j)?;
    let gamma_plug = contribs.sum() / n;
    let r_j = if sigma_r > 0.0 {
        Normal::new(0.0, sigma_r).unwrap().sample(rng)
    } else {
        0.0
    };
    let gamma_hat = gamma_plug + r_j;

    // joint law of (gamma_hat, D) from the influence rows
    let table = crate::covariance::influence_contributions(full_data, active, fit.loss, None)?;
    let mut rows = Array2::zeros((full_data.n(), 1 + p));
    for i in 0..full_data.n() {
        rows[[i, 0]] = contribs[i];
        for c in 0..p {
            rows[[i, 1 + c]] = table.rows[[i, e + c]];
        }
    }
    let joint = crate::covariance::InfluenceTable { rows, t_dim: 1, d_dim: p, err_dim: 0 };
    let mut cov = crate::covariance::statistic_cov(&joint, 400, rng)?;
    cov[[0, 0]] += sigma_r * sigma_r;
    let mut mean = Array1::zeros(1 + p);
    mean[0] = gamma_hat;
    let stat = joint.statistic();
    for c in 0..p {
        mean[1 + c] = stat[1 + c];
    }
    let law = JointGaussianLaw::new(mean.clone(), cov, 1)?;
    let t_obs = Array1::from_elem(1, gamma_hat);
    let d_obs = mean.slice(s![1..]).to_owned();
    let dec = crate::law::decompose_on_target(&law, &t_obs.view(), &d_obs.view())?;

    // reconstruction of the split randomization from the training KKT:
    // omega = -f M_pos D_raw + G1_E beta_E + (lambda s ; u_obs)
    let inactive = lasso::complement(active, p);
    let xe = full_data.x_cols(active);
    let xm = full_data.x_cols(&inactive);
    let mut m_pos = Array2::zeros((p, p));
    m_pos.slice_mut(s![..e, ..e]).assign(&linalg::gram(&xe.view()));
    m_pos.slice_mut(s![e.., ..e]).assign(&xm.t().dot(&xe));
    for c in 0..p - e {
        m_pos[[e + c, e + c]] = 1.0;
    }
    // raw-vs-mean data-vector scale
    for c in e..p {
        m_pos.column_mut(c).mapv_inplace(|v| v * n);
    }
    let m_mat = &m_pos * (-f);

    let train = full_data.subset_rows(train_rows);
    let xe1 = train.x_cols(active);
    let xm1 = train.x_cols(&inactive);
    let mut b_mat = Array2::zeros((p, e));
    b_mat.slice_mut(s![..e, ..]).assign(&linalg::gram(&xe1.view()));
    b_mat.slice_mut(s![e.., ..]).assign(&xm1.t().dot(&xe1));

    let map_t = m_mat.dot(&dec.regression_map);
    let mut offset = m_mat.dot(&dec.residual);
    for i in 0..e {
        offset[i] += fit.lambda * fit.signs[i];
    }
    for c in 0..p - e {
        offset[e + c] += fit.subgrad_inactive[c];
    }

    let mut map = Array2::zeros((p, 1 + e));
    map.slice_mut(s![.., ..1]).assign(&map_t);
    map.slice_mut(s![.., 1..]).assign(&b_mat);

    // split covariance: f (1 - f) n Cov(x_i y_i)
    let mut v_rows = Array2::zeros((full_data.n(), p));
    // rows follow the KKT order (active first, then inactive)
    let order: Vec<usize> = active.iter().copied().chain(inactive.iter().copied()).collect();
    for i in 0..full_data.n() {
        for (c, &col) in order.iter().enumerate() {
            v_rows[[i, c]] = full_data.x()[[i, col]] * full_data.y()[i];
        }
    }
    let v_mean = v_rows.mean_axis(ndarray::Axis(0)).unwrap();
    let mut sigma_omega = Array2::zeros((p, p));
    for i in 0..full_data.n() {
        let d = &v_rows.row(i) - &v_mean;
        for a in 0..p {
            for b in a..p {
                sigma_omega[[a, b]] += d[a] * d[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            sigma_omega[[a, b]] = sigma_omega[[b, a]];
        }
    }
    sigma_omega.mapv_inplace(|v| v * f * (1.0 - f));
    // keep the view well-posed for extreme splits
    for a in 0..p {
        sigma_omega[[a, a]] += 1e-8;
    }

    let view = RandomizationView::gaussian_mv(map, offset, &sigma_omega)?;
    let blocks = vec![
        ConstraintBlock::Free { dim: 1 },
        ConstraintBlock::SignOrthant { signs: fit.signs.clone() },
    ];
    let mut init = Array1::zeros(1 + e);
    init[0] = gamma_hat;
    for (i, &col) in active.iter().enumerate() {
        init[1 + i] = fit.beta[col];
    }
    let density = SelectiveDensity::new(
        t_obs,
        law.sigma_t().to_owned(),
        vec![view],
        blocks,
        None,
    )?;
    if !density.log_density(&init).is_finite() {
        return Err(Error::InvalidInput("carved log-density not finite at the observation".into()));
    }

    let estimate = LocoEstimate {
        coordinate: j,
        value: gamma_hat,
        randomization: r_j,
        sigma_r,
        variant: LocoVariant::Carved,
        variance: law.sigma_t()[[0, 0]],
    };
    Ok(CarvedInference { estimate, density, init })
}

/// Wald interval and p-value for a split estimate.
pub fn loco_interval_split(est: &LocoEstimate, alpha: f64) -> (ConfidenceInterval, f64) {
    let sd = est.variance.sqrt();
    let z = stats::norm_ppf(1.0 - alpha / 2.0);
    let ci = ConfidenceInterval {
        lo: est.value - z * sd,
        hi: est.value + z * sd,
        lo_exhausted: false,
        hi_exhausted: false,
        method: crate::pivot::InversionMethod::Bisection,
    };
    let pv = 2.0 * stats::norm_sf((est.value / sd).abs());
    (ci, pv)
}

/// Randomized-pivot interval and p-value for a carved estimate, by tilting
/// reference chains on its selective density.
pub fn loco_interval_carved<R: Rng>(
    carved: &CarvedInference,
    alpha: f64,
    cfg: &crate::sampler::ChainConfig,
    rng: &mut R,
) -> Result<(ConfidenceInterval, f64)> {
    let mut inference = crate::sampler::ChainInference::new(
        carved.density.clone(),
        carved.init.clone(),
        *cfg,
        rng,
    )?;
    let t_obs = carved.estimate.value;
    let ci = inference.ci_coord(0, t_obs, alpha)?;
    let pv = inference.pvalue_coord(0, 0.0, t_obs)?;
    Ok((ci, pv))
}
