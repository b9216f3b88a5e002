//! The comparison procedures: selection, per-coordinate p-values and
//! intervals, wired through the pivot and sampler machinery.

use ndarray::{s, Array1};
use rand::Rng;

use super::{
    CoordinateRecord, CovEstimator, CvRandomization, CvViewConfig, LossConfig, ProcedureId,
    ReplicationRecord, ScenarioConfig, Truth,
};
use crate::covariance;
use crate::cv::{self, CvCurve, FoldPlan};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::event::stack_events_block_diag;
use crate::lasso::{self, LassoFit};
use crate::law::JointGaussianLaw;
use crate::linalg;
use crate::pivot;
use crate::rng::{RngHub, Substream};
use crate::sampler::{self, ChainConfig, CvViewMode, SubgradientMode};
use crate::stats;

const BOOTSTRAP_DRAWS: usize = 1000;

struct CvSelection {
    curve: CvCurve,
    plan: FoldPlan,
    lambda_min: f64,
    lambda_one_sigma: f64,
}

fn cv_select(data: &Dataset, cfg: &ScenarioConfig, hub: &RngHub) -> Result<CvSelection> {
    let plan = cv::make_folds(data.n(), cfg.k_folds, &mut hub.stream(Substream::Folds, 0))?;
    let grid = cv::lambda_grid(data, cfg.grid_len);
    let raw = cv::cv_curve(data, &plan, &grid, cfg.loss.loss())?;
    let mode = match cfg.cv_randomization {
        CvRandomization::None => cv::RandomizeMode::PerFold { tau: 0.0 },
        CvRandomization::PerFold => cv::RandomizeMode::PerFold {
            tau: cv::default_tau(data, cfg.loss.loss()),
        },
        CvRandomization::TwoPart => cv::RandomizeMode::TwoPart {
            sigma_r1: cfg.sigma_r1,
            sigma_r2: cfg.sigma_r2,
        },
    };
    let curve = cv::randomize_curve(&raw, mode, &mut hub.stream(Substream::Randomization, 0));
    let lambda_min = curve.grid[curve.winner()];
    let lambda_one_sigma = cv::one_sigma_lambda(&curve);
    Ok(CvSelection { curve, plan, lambda_min, lambda_one_sigma })
}

fn empty_record(rep: usize) -> ReplicationRecord {
    ReplicationRecord { replication: rep, selected_size: 0, superset: false, coordinates: vec![] }
}

fn superset_of(active: &[usize], truth: Option<&Truth>) -> bool {
    match truth {
        None => false,
        Some(t) => t.support.iter().all(|j| active.contains(j)),
    }
}

fn label(j: usize, truth: Option<&Truth>) -> (bool, Option<f64>) {
    match truth {
        None => (false, None),
        Some(t) => (t.beta[j] != 0.0, Some(t.beta[j])),
    }
}

/// Runs one procedure on one dataset. `truth` labels the records for the
/// simulation metrics; `analyze` passes `None`.
pub fn run_procedure(
    id: ProcedureId,
    data: &Dataset,
    truth: Option<&Truth>,
    cfg: &ScenarioConfig,
    rep: usize,
    hub: &RngHub,
) -> Result<ReplicationRecord> {
    match id {
        ProcedureId::Ds1 => run_ds1(data, truth, cfg, rep, hub),
        ProcedureId::Tg1 | ProcedureId::Tg2 => run_tg(id, data, truth, cfg, rep, hub),
        ProcedureId::R1 | ProcedureId::R2 => run_randomized(id, data, truth, cfg, rep, hub),
        ProcedureId::Loco => Err(Error::InvalidInput(
            "the LOCO comparison runs through its own scenario driver".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// DS1: select on one half with plain (non-randomized) CV Lasso, classical
// inference on the other half.

fn run_ds1(
    data: &Dataset,
    truth: Option<&Truth>,
    cfg: &ScenarioConfig,
    rep: usize,
    hub: &RngHub,
) -> Result<ReplicationRecord> {
    let n = data.n();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = hub.stream(Substream::Folds, 1);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let n1 = (cfg.split_fraction * n as f64).round() as usize;
    let mut half_a: Vec<usize> = perm[..n1].to_vec();
    let mut half_b: Vec<usize> = perm[n1..].to_vec();
    half_a.sort_unstable();
    half_b.sort_unstable();
    let train = data.subset_rows(&half_a);
    let test = data.subset_rows(&half_b);

    // plain cross-validated Lasso on the selection half
    let plan = cv::make_folds(train.n(), cfg.k_folds, &mut hub.stream(Substream::Folds, 2))?;
    let grid = cv::lambda_grid(&train, cfg.grid_len);
    let curve = cv::cv_curve(&train, &plan, &grid, cfg.loss.loss())?;
    let lambda = curve.grid[curve.winner()];
    let fit = match cfg.loss {
        LossConfig::Squared => lasso::solve_lasso(&train, lambda)?,
        LossConfig::Logistic => lasso::solve_lasso_logistic_warm(&train, lambda, None)?,
    };
    if fit.active.is_empty() || fit.active.len() + 1 >= test.n() {
        return Ok(empty_record(rep));
    }

    // classical inference on the held-out half
    let records = match cfg.loss {
        LossConfig::Squared => {
            let xe = test.x_cols(&fit.active);
            let g = linalg::gram(&xe.view());
            let ginv = linalg::invert_psd(&g.view())?;
            let coef = ginv.dot(&xe.t().dot(test.y()));
            let resid = test.y() - &xe.dot(&coef);
            let dof = (test.n() - fit.active.len()) as f64;
            let sigma2 = resid.dot(&resid) / dof;
            let z = stats::norm_ppf(1.0 - cfg.level / 2.0);
            fit.active
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    let se = (sigma2 * ginv[[i, i]]).sqrt();
                    let (is_signal, target) = label(j, truth);
                    CoordinateRecord {
                        coordinate: j,
                        method: "ols".into(),
                        pvalue: 2.0 * stats::norm_sf((coef[i] / se).abs()),
                        ci_lo: coef[i] - z * se,
                        ci_hi: coef[i] + z * se,
                        is_signal,
                        target,
                    }
                })
                .collect()
        }
        LossConfig::Logistic => {
            let xe = test.x_cols(&fit.active);
            let mle = lasso::logistic_mle(&xe, test.y())?;
            let eta = xe.dot(&mle);
            let w = eta.mapv(|e| {
                let q = 1.0 / (1.0 + (-e).exp());
                (q * (1.0 - q)).max(1e-10)
            });
            let mut xw = xe.clone();
            for (i, mut row) in xw.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|v| v * w[i]);
            }
            let info = xe.t().dot(&xw);
            let iinv = linalg::invert_psd(&info.view())?;
            let z = stats::norm_ppf(1.0 - cfg.level / 2.0);
            fit.active
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    let se = iinv[[i, i]].sqrt();
                    let (is_signal, target) = label(j, truth);
                    CoordinateRecord {
                        coordinate: j,
                        method: "mle".into(),
                        pvalue: 2.0 * stats::norm_sf((mle[i] / se).abs()),
                        ci_lo: mle[i] - z * se,
                        ci_hi: mle[i] + z * se,
                        is_signal,
                        target,
                    }
                })
                .collect()
        }
    };
    Ok(ReplicationRecord {
        replication: rep,
        selected_size: fit.active.len(),
        superset: superset_of(&fit.active, truth),
        coordinates: records,
    })
}

// ---------------------------------------------------------------------------
// TG1 / TG2: plain Lasso at the randomized-CV penalty with per-coordinate
// truncated-Gaussian pivots; `adjust_cv` stacks the argmin rows.

fn run_tg(
    id: ProcedureId,
    data: &Dataset,
    truth: Option<&Truth>,
    cfg: &ScenarioConfig,
    rep: usize,
    hub: &RngHub,
) -> Result<ReplicationRecord> {
    if cfg.loss != LossConfig::Squared {
        return Err(Error::InvalidInput("TG pivots are implemented for squared loss".into()));
    }
    let sel = cv_select(data, cfg, hub)?;
    let lambda = if id == ProcedureId::Tg2 { sel.lambda_one_sigma } else { sel.lambda_min };
    let fit = lasso::solve_lasso(data, lambda)?;
    if fit.active.is_empty() {
        return Ok(empty_record(rep));
    }
    let coords = tg_coordinate_records(data, &fit, &sel, cfg, truth, hub)?;
    Ok(ReplicationRecord {
        replication: rep,
        selected_size: fit.active.len(),
        superset: superset_of(&fit.active, truth),
        coordinates: coords,
    })
}

fn tg_coordinate_records(
    data: &Dataset,
    fit: &LassoFit,
    sel: &CvSelection,
    cfg: &ScenarioConfig,
    truth: Option<&Truth>,
    hub: &RngHub,
) -> Result<Vec<CoordinateRecord>> {
    let n = data.n() as f64;
    let p = data.p();
    let e = fit.active.len();
    let l = sel.curve.len();
    let dv = lasso::data_vector(data, &fit.active)?;

    // stacked statistic: mean-scale data vector, plus the randomized curve
    // when the CV rows are stacked on
    let dim = if cfg.adjust_cv { p + l } else { p };
    let mut stat = Array1::zeros(dim);
    for i in 0..e {
        stat[i] = dv.ols_active[i];
    }
    for j in 0..p - e {
        stat[e + j] = dv.inactive_score[j] / n;
    }
    if cfg.adjust_cv {
        for li in 0..l {
            stat[p + li] = sel.curve.randomized[li];
        }
    }

    let cov = match cfg.cov {
        CovEstimator::Parametric => {
            if cfg.adjust_cv {
                return Err(Error::InvalidInput(
                    "the CV-adjusted event needs the bootstrap covariance".into(),
                ));
            }
            let xe = data.x_cols(&fit.active);
            let g = linalg::gram(&xe.view());
            let coef = linalg::solve_psd(&g.view(), &xe.t().dot(data.y()).view())?;
            let resid = data.y() - &xe.dot(&coef);
            let sigma2 = resid.dot(&resid) / (data.n() - e) as f64;
            let par = covariance::parametric_cov_lasso(data, &fit.active, sigma2.sqrt())?;
            let full = par.assemble_t_d();
            full.slice(s![e.., e..]).to_owned()
        }
        CovEstimator::Bootstrap => {
            let curve_arg = if cfg.adjust_cv { Some((&sel.curve, &sel.plan)) } else { None };
            let table =
                covariance::influence_contributions(data, &fit.active, fit.loss, curve_arg)?;
            let mut rng = hub.stream(Substream::Bootstrap, 0);
            let full = covariance::statistic_cov(&table, BOOTSTRAP_DRAWS, &mut rng)?;
            let mut cov = full.slice(s![e.., e..]).to_owned();
            if cfg.adjust_cv {
                // the stored randomization draws are independent of the data
                let noise_var = curve_noise_variance(&sel.curve);
                for li in 0..l {
                    cov[[p + li, p + li]] += noise_var[li];
                }
            }
            cov
        }
    };

    // selection event on the stacked statistic
    let raw_event = lasso::selection_event_fixed_lambda(fit, data)?;
    let mut scales = vec![1.0; p];
    for s in scales.iter_mut().skip(e) {
        *s = n;
    }
    let event_mean = raw_event.rescale_columns(&scales)?;
    let event = if cfg.adjust_cv {
        let am = cv::argmin_event(&sel.curve)?;
        stack_events_block_diag(&[event_mean, am.event()])?
    } else {
        event_mean
    };
    debug_assert!(event.contains_with_tol(&stat.view(), 1e-7));

    let mut out = Vec::with_capacity(e);
    for (i, &j) in fit.active.iter().enumerate() {
        let (region, sd) = pivot::scalar_coordinate_region(&stat.view(), &cov, &event, i)?;
        let t_obs = stat[i];
        // two-sided p-value from the same CDF pivot the intervals invert
        let f = pivot::tg_cdf_1d(t_obs, 0.0, sd, &region)?;
        let pvalue = (2.0 * f.min(1.0 - f)).clamp(0.0, 1.0);
        let ci = pivot::invert_pivot_ci(
            |theta| pivot::tg_cdf_1d(t_obs, theta, sd, &region).unwrap_or(0.5),
            t_obs,
            sd,
            cfg.level,
        );
        let (is_signal, target) = label(j, truth);
        out.push(CoordinateRecord {
            coordinate: j,
            method: "tg".into(),
            pvalue,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            is_signal,
            target,
        });
        if cfg.include_naive {
            let z = stats::norm_ppf(1.0 - cfg.level / 2.0);
            out.push(CoordinateRecord {
                coordinate: j,
                method: "naive".into(),
                pvalue: 2.0 * stats::norm_sf((stat[i] / sd).abs()),
                ci_lo: stat[i] - z * sd,
                ci_hi: stat[i] + z * sd,
                is_signal,
                target,
            });
        }
    }
    Ok(out)
}

fn curve_noise_variance(curve: &CvCurve) -> Array1<f64> {
    let l = curve.len();
    match &curve.noise {
        cv::CurveNoise::None => Array1::zeros(l),
        cv::CurveNoise::PerFold { .. } => {
            let v: f64 =
                curve.fold_sizes.iter().map(|&nk| curve.tau * curve.tau / nk as f64).sum();
            Array1::from_elem(l, v)
        }
        cv::CurveNoise::TwoPart { sigma_r1, sigma_r2, .. } => {
            Array1::from_elem(l, sigma_r1 * sigma_r1 + sigma_r2 * sigma_r2)
        }
    }
}

// ---------------------------------------------------------------------------
// R1 / R2: randomized Lasso at the randomized-CV penalty with projected
// Langevin inference.

fn run_randomized(
    id: ProcedureId,
    data: &Dataset,
    truth: Option<&Truth>,
    cfg: &ScenarioConfig,
    rep: usize,
    hub: &RngHub,
) -> Result<ReplicationRecord> {
    let sel = cv_select(data, cfg, hub)?;
    let lambda = if id == ProcedureId::R2 { sel.lambda_one_sigma } else { sel.lambda_min };
    let n = data.n() as f64;
    let sd_y = stats::variance(&data.y().to_vec()).sqrt();
    let sigma_omega = 0.8 * n.sqrt() * sd_y;
    let mut rng = hub.stream(Substream::Randomization, 1);
    let omega = Array1::from_iter((0..data.p()).map(|_| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        sigma_omega * z
    }));
    let ridge = 1.0;
    let fit = match cfg.loss {
        LossConfig::Squared => lasso::solve_randomized_lasso(data, lambda, ridge, &omega)?,
        LossConfig::Logistic => {
            lasso::solve_randomized_lasso_logistic(data, lambda, ridge, &omega)?
        }
    };
    let e = fit.active.len();
    if e == 0 {
        return Ok(empty_record(rep));
    }
    let p = data.p();
    let l = sel.curve.len();

    // joint mean and covariance of the stacked statistic (T, D[, Err1]);
    // T duplicates the active block of D
    let (stat, cov, cov_has_err) = match cfg.cov {
        CovEstimator::Parametric => {
            let xe = data.x_cols(&fit.active);
            let g = linalg::gram(&xe.view());
            let coef = linalg::solve_psd(&g.view(), &xe.t().dot(data.y()).view())?;
            let resid = data.y() - &xe.dot(&coef);
            let sigma2 = resid.dot(&resid) / (data.n() - e) as f64;
            let par = covariance::parametric_cov_lasso(data, &fit.active, sigma2.sqrt())?;
            let cov = par.assemble_t_d();
            let dv = match cfg.loss {
                LossConfig::Squared => lasso::data_vector(data, &fit.active)?,
                LossConfig::Logistic => lasso::data_vector_logistic(data, &fit.active)?,
            };
            let mut mean = Array1::zeros(e + p);
            for i in 0..e {
                mean[i] = dv.ols_active[i];
                mean[e + i] = dv.ols_active[i];
            }
            for j in 0..p - e {
                mean[2 * e + j] = dv.inactive_score[j] / n;
            }
            // the decoupled-curve simplification: no CV view
            (mean, cov, false)
        }
        CovEstimator::Bootstrap => {
            let table = covariance::influence_contributions(
                data,
                &fit.active,
                fit.loss,
                Some((&sel.curve, &sel.plan)),
            )?;
            let mut brng = hub.stream(Substream::Bootstrap, 0);
            let mut cov = covariance::statistic_cov(&table, BOOTSTRAP_DRAWS, &mut brng)?;
            // Err^{(1)} = Err + R1 absorbs only the R1 noise
            if let cv::CurveNoise::TwoPart { sigma_r1, .. } = &sel.curve.noise {
                for li in 0..l {
                    cov[[e + p + li, e + p + li]] += sigma_r1 * sigma_r1;
                }
            }
            (table.statistic(), cov, true)
        }
    };

    // per-coordinate scalar targets: condition the remaining coordinates
    // into the nuisance, one chain per tested coefficient
    let chain_cfg = ChainConfig {
        burn_in: cfg.chain_burn_in,
        thin: cfg.chain_thin,
        kept: cfg.chain_kept,
        step_size: None,
        seed: cfg.seed ^ rep as u64,
    };
    let mut coords = Vec::with_capacity(e);
    for (i, &j) in fit.active.iter().enumerate() {
        // law over (T_i, D): row/column i against the D block
        let mut idx: Vec<usize> = Vec::with_capacity(1 + p);
        idx.push(i);
        idx.extend(e..e + p);
        let law_i = JointGaussianLaw::new(subvec(&stat, &idx), submat(&cov, &idx), 1)?;
        let t_obs_i = Array1::from_elem(1, stat[i]);
        let (density, init) = sampler::build_density_randomized_lasso(
            &fit,
            data,
            &law_i,
            &t_obs_i,
            sigma_omega,
            SubgradientMode::Marginalize,
        )?;
        let view_mode = match cfg.cv_view {
            CvViewConfig::Skip => None,
            _ if !cov_has_err => None, // parametric path has no curve blocks
            CvViewConfig::Joint => Some(CvViewMode::Joint),
            CvViewConfig::Condition => Some(CvViewMode::Condition),
        };
        let (density, init) = if let Some(mode) = view_mode {
            let mut idx_full: Vec<usize> = Vec::with_capacity(1 + p + l);
            idx_full.push(i);
            idx_full.extend(e..e + p + l);
            let law_full =
                JointGaussianLaw::new(subvec(&stat, &idx_full), submat(&cov, &idx_full), 1)?;
            sampler::add_cv_view(&density, &init, &sel.curve, &law_full, &t_obs_i, mode)?
        } else {
            (density, init)
        };
        let mut srng = hub.stream(Substream::Sampler, i as u64);
        let mut inference = sampler::ChainInference::new(density, init, chain_cfg, &mut srng)?;
        if let Some(dir) = &cfg.chain_dump_dir {
            std::fs::create_dir_all(dir)?;
            let path = std::path::Path::new(dir).join(format!("rep{rep}_coord{j}.csv"));
            inference.chain().dump_csv(std::fs::File::create(path)?)?;
        }
        let pvalue = inference.pvalue_coord(0, 0.0, stat[i])?;
        let ci = inference.ci_coord(0, stat[i], cfg.level)?;
        let (is_signal, target) = label(j, truth);
        coords.push(CoordinateRecord {
            coordinate: j,
            method: "sampler".into(),
            pvalue,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            is_signal,
            target,
        });
    }
    Ok(ReplicationRecord {
        replication: rep,
        selected_size: e,
        superset: superset_of(&fit.active, truth),
        coordinates: coords,
    })
}

fn subvec(v: &Array1<f64>, idx: &[usize]) -> Array1<f64> {
    Array1::from_iter(idx.iter().map(|&i| v[i]))
}

fn submat(m: &ndarray::Array2<f64>, idx: &[usize]) -> ndarray::Array2<f64> {
    let k = idx.len();
    let mut out = ndarray::Array2::zeros((k, k));
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            out[[a, b]] = m[[i, j]];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// LOCO scenario: split vs carved records side by side.

pub fn run_loco_replication(
    cfg: &ScenarioConfig,
    data: &Dataset,
    truth: &Truth,
    rep: usize,
    hub: &RngHub,
) -> Result<ReplicationRecord> {
    let n = data.n();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = hub.stream(Substream::Folds, 3);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let n1 = (cfg.split_fraction * n as f64).round() as usize;
    let mut train_rows: Vec<usize> = perm[..n1].to_vec();
    let mut test_rows: Vec<usize> = perm[n1..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    let train = data.subset_rows(&train_rows);
    let test = data.subset_rows(&test_rows);

    // plain Lasso at a fixed penalty on the training split
    let sd_y = stats::variance(&train.y().to_vec()).sqrt();
    let lambda = 2.0 * (train.n() as f64).sqrt() * sd_y;
    let fit = lasso::solve_lasso(&train, lambda)?;
    if fit.active.is_empty() || fit.active.len() + 1 >= test.n() {
        return Ok(empty_record(rep));
    }

    let mut coords = Vec::new();
    let mut rrng = hub.stream(Substream::Randomization, 2);
    let z = stats::norm_ppf(1.0 - cfg.level / 2.0);
    let _ = z;
    for &j in &fit.active {
        // the marginal LOCO parameter is 0 on null data for every E
        let (is_signal, target) = (truth.beta[j] != 0.0, Some(0.0));

        let sigma_r_split = crate::loco::default_loco_sigma_r(&test, &fit.active, j)?;
        let split = crate::loco::loco_split(&test, &fit.active, j, sigma_r_split, &mut rrng)?;
        let (ci_s, pv_s) = crate::loco::loco_interval_split(&split, cfg.level);
        coords.push(CoordinateRecord {
            coordinate: j,
            method: "split".into(),
            pvalue: pv_s,
            ci_lo: ci_s.lo,
            ci_hi: ci_s.hi,
            is_signal,
            target,
        });

        let sigma_r_carved = crate::loco::default_loco_sigma_r(data, &fit.active, j)?;
        let carved =
            crate::loco::loco_carved(data, &train_rows, &fit, j, sigma_r_carved, &mut rrng)?;
        let chain_cfg = ChainConfig {
            burn_in: cfg.chain_burn_in,
            thin: cfg.chain_thin,
            kept: cfg.chain_kept,
            step_size: None,
            seed: cfg.seed ^ ((rep as u64) << 1),
        };
        let mut srng = hub.stream(Substream::Sampler, 1 + j as u64);
        let (ci_c, pv_c) =
            crate::loco::loco_interval_carved(&carved, cfg.level, &chain_cfg, &mut srng)?;
        coords.push(CoordinateRecord {
            coordinate: j,
            method: "carved".into(),
            pvalue: pv_c,
            ci_lo: ci_c.lo,
            ci_hi: ci_c.hi,
            is_signal,
            target,
        });
    }
    Ok(ReplicationRecord {
        replication: rep,
        selected_size: fit.active.len(),
        superset: superset_of(&fit.active, Some(truth)),
        coordinates: coords,
    })
}

/// Result of `analyze` on a user-supplied dataset.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AnalysisResult {
    pub selected: Vec<usize>,
    pub records: Vec<CoordinateRecord>,
}

/// Runs a procedure on user data (no truth labels) and returns the selected
/// model with adjusted p-values and intervals.
pub fn analyze_dataset(
    data: &Dataset,
    cfg: &ScenarioConfig,
) -> Result<AnalysisResult> {
    let hub = RngHub::new(cfg.seed);
    let rec = run_procedure(cfg.procedure, data, None, cfg, 0, &hub)?;
    let selected: Vec<usize> = {
        let mut s: Vec<usize> = rec.coordinates.iter().map(|c| c.coordinate).collect();
        s.dedup();
        s
    };
    Ok(AnalysisResult { selected, records: rec.coordinates })
}
