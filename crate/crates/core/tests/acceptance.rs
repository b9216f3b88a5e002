//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS/FAIL line. Oracles here are written independently of the library
//! paths they check.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Distribution;
use std::time::Instant;

use postsel::harness::{self, metrics_filtered, CvRandomization, ProcedureId, ScenarioConfig};
use postsel::rng::{RngHub, Substream};
use postsel::{aic_fs, covariance, cv, lasso, law, linalg, loco, sampler, stats, Dataset};

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: pivot-uniformity contrast on the null CV-Lasso scenario

#[test]
fn criterion_1_pivot_uniformity_contrast() {
    let t0 = Instant::now();
    let mut unadjusted = ScenarioConfig::preset("fig1", false).unwrap();
    unadjusted.replications = 100;
    let rep_a = harness::simulate(&unadjusted).unwrap();
    let naive = metrics_filtered(&rep_a.records, 0, "naive");
    let tg_plain = metrics_filtered(&rep_a.records, 0, "tg");

    let mut adjusted = ScenarioConfig::preset("fig3", false).unwrap();
    adjusted.replications = 100;
    let rep_b = harness::simulate(&adjusted).unwrap();
    let tg_adj = metrics_filtered(&rep_b.records, 0, "tg");
    let elapsed = t0.elapsed();

    let pooled_ok = naive.null_pvalue_count >= 300
        && tg_plain.null_pvalue_count >= 300
        && tg_adj.null_pvalue_count >= 300;
    let naive_fails = naive.ks_pvalue < 0.01;
    let plain_fails = tg_plain.ks_pvalue < 0.01;
    let adj_passes = tg_adj.ks_pvalue >= 0.01;
    let coverage_ok = (tg_adj.coverage - 0.90).abs() <= 0.04;
    let runtime_ok = elapsed.as_secs() < 30 * 60;
    verdict(
        "criterion 1 (uniformity contrast)",
        pooled_ok && naive_fails && plain_fails && adj_passes && coverage_ok && runtime_ok,
        &format!(
            "naive KS p {:.2e}, unadjusted KS p {:.2e}, adjusted KS p {:.3}, \
             adjusted coverage {:.3}, pooled ({}, {}, {}), {:.1} s",
            naive.ks_pvalue,
            tg_plain.ks_pvalue,
            tg_adj.ks_pvalue,
            tg_adj.coverage,
            naive.null_pvalue_count,
            tg_plain.null_pvalue_count,
            tg_adj.null_pvalue_count,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: randomized Lasso + randomized CV coverage, squared + logistic

#[test]
fn criterion_2_randomized_lasso_cv() {
    let mut squared = ScenarioConfig::preset("fig4", false).unwrap();
    squared.replications = 100;
    let rep = harness::simulate(&squared).unwrap();
    let agg = &rep.aggregates;
    let squared_cov_ok = (agg.coverage - 0.88).abs() <= 0.07;
    let squared_ks_ok = agg.ks_pvalue >= 0.01;
    let squared_detail = format!(
        "squared: coverage {:.3} ({}/{}), KS p {:.3}",
        agg.coverage, agg.covered_count, agg.testable_count, agg.ks_pvalue
    );

    let mut logistic = ScenarioConfig::preset("fig5", false).unwrap();
    logistic.replications = 100;
    let rep_l = harness::simulate(&logistic).unwrap();
    let agg_l = &rep_l.aggregates;
    let logistic_cov_ok = (agg_l.coverage - 0.88).abs() <= 0.07;
    verdict(
        "criterion 2 (randomized Lasso + CV)",
        squared_cov_ok && squared_ks_ok && logistic_cov_ok,
        &format!("{squared_detail}; logistic: coverage {:.3}", agg_l.coverage),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: marginal LOCO split vs carved

#[test]
fn criterion_3_loco() {
    let mut cfg = ScenarioConfig::preset("fig6", false).unwrap();
    cfg.replications = 100;
    let rep = harness::simulate(&cfg).unwrap();
    let split = metrics_filtered(&rep.records, 0, "split");
    let carved = metrics_filtered(&rep.records, 0, "carved");
    let split_ok = (split.coverage - 0.92).abs() <= 0.05;
    let carved_ok = (carved.coverage - 0.91).abs() <= 0.05;
    let length_ok = carved.mean_ci_length < split.mean_ci_length;
    verdict(
        "criterion 3 (LOCO)",
        split_ok && carved_ok && length_ok,
        &format!(
            "split coverage {:.3} (len {:.3}), carved coverage {:.3} (len {:.3})",
            split.coverage, split.mean_ci_length, carved.coverage, carved.mean_ci_length
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: cone projections vs an active-set QP oracle

// independent reference: minimize ||x - z||^2 s.t. A x <= 0 by enumerating
// active subsets and checking the KKT multipliers
fn qp_oracle(a: &Array2<f64>, z: &Array1<f64>) -> Array1<f64> {
    let m = a.nrows();
    let d = a.ncols();
    assert!(m <= 20, "oracle enumeration limit");
    let mut best: Option<(f64, Array1<f64>)> = None;
    for mask in 0..(1u32 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let x = if rows.is_empty() {
            z.clone()
        } else {
            let k = rows.len();
            let mut asub = Array2::zeros((k, d));
            for (r, &i) in rows.iter().enumerate() {
                asub.row_mut(r).assign(&a.row(i));
            }
            let gram = asub.dot(&asub.t());
            let rhs = asub.dot(z);
            let Ok(nu) = linalg::solve_psd(&gram.view(), &rhs.view()) else { continue };
            if nu.iter().any(|v| *v < -1e-9) {
                continue;
            }
            z - &asub.t().dot(&nu)
        };
        if a.dot(&x).iter().any(|v| *v > 1e-8) {
            continue;
        }
        let obj = (&x - z).mapv(|v| v * v).sum();
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.expect("infeasible oracle instance").1
}

fn min_cone_rows(l: usize, winner: usize) -> Array2<f64> {
    let mut a = Array2::zeros((l - 1, l));
    let mut r = 0;
    for j in 0..l {
        if j != winner {
            a[[r, winner]] = 1.0;
            a[[r, j]] = -1.0;
            r += 1;
        }
    }
    a
}

#[test]
fn criterion_4_cone_projections() {
    let hub = RngHub::new(4242);
    let mut rng = hub.stream(Substream::Data, 0);
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_idem = 0.0f64;

    for _ in 0..1000 {
        let l = 3 + rng.random_range(0..4usize);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let w = rng.random_range(0..l);
        let p = sampler::project_min_cone(&z, w);
        let q = qp_oracle(&min_cone_rows(l, w), &z);
        worst = worst.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let pp = sampler::project_min_cone(&p, w);
        worst_idem = worst_idem.max((&pp - &p).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    for _ in 0..1000 {
        let l = 3 + rng.random_range(0..4usize);
        let k = 1 + rng.random_range(0..l - 1);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let mut idx: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut winners = idx[..k].to_vec();
        winners.sort_unstable();
        let p = sampler::project_k_smallest_cone(&z, &winners);
        let mut rows = Array2::zeros((k * (l - k), l));
        let mut r = 0;
        for &j in &winners {
            for c in 0..l {
                if !winners.contains(&c) {
                    rows[[r, j]] = 1.0;
                    rows[[r, c]] = -1.0;
                    r += 1;
                }
            }
        }
        let q = qp_oracle(&rows, &z);
        worst = worst.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let pp = sampler::project_k_smallest_cone(&p, &winners);
        worst_idem = worst_idem.max((&pp - &p).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    for _ in 0..1000 {
        let l = 2 + rng.random_range(0..4usize);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let apex = rng.random_range(0..l);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let p = sampler::project_linf_cone(&z, apex, sign);
        let mut rows = Array2::zeros(((l - 1) * 2, l));
        let mut r = 0;
        for j in 0..l {
            if j == apex {
                continue;
            }
            rows[[r, j]] = 1.0;
            rows[[r, apex]] = -sign;
            rows[[r + 1, j]] = -1.0;
            rows[[r + 1, apex]] = -sign;
            r += 2;
        }
        let q = qp_oracle(&rows, &z);
        worst = worst.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let pp = sampler::project_linf_cone(&p, apex, sign);
        worst_idem = worst_idem.max((&pp - &p).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    let elapsed = t0.elapsed();
    verdict(
        "criterion 4 (cone projections)",
        worst < 1e-8 && worst_idem < 1e-10 && elapsed.as_secs_f64() < 1.0,
        &format!(
            "max oracle gap {worst:.2e}, idempotency {worst_idem:.2e}, {:.3} s",
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: the fixed-lambda selection event vs a re-solve oracle

#[test]
fn criterion_5_selection_event_resolve_oracle() {
    let hub = RngHub::new(55);
    let mut agree = 0usize;
    let mut disagree = 0usize;
    let mut kkt_worst = 0.0f64;
    let mut instances = 0usize;
    let mut attempts = 0u64;
    while instances < 200 && attempts < 2000 {
        attempts += 1;
        let ihub = hub.replication(attempts);
        let mut rng = ihub.stream(Substream::Data, 0);
        let (n, p) = (25, 5);
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..p {
                x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
            }
            y[i] = rand_distr::StandardNormal.sample(&mut rng);
        }
        let ds = Dataset::new(x, y).unwrap();
        let lambda = 2.2;
        let fit = lasso::solve_lasso(&ds, lambda).unwrap();
        kkt_worst = kkt_worst.max(fit.kkt_residual(&ds));
        if fit.active.is_empty() || fit.active.len() == p {
            continue;
        }
        instances += 1;
        let event = lasso::selection_event_fixed_lambda(&fit, &ds).unwrap();
        let dv = lasso::data_vector(&ds, &fit.active).unwrap();
        let d_obs = dv.stacked();
        let e = fit.active.len();

        // response reconstruction: y' = y + X_E a + (I - P_E) X_{-E} b moves
        // the data vector to exactly (ols + a, score + M b)
        let xe = ds.x_cols(&fit.active);
        let inact = lasso::complement(&fit.active, p);
        let xm = ds.x_cols(&inact);
        let g = linalg::gram(&xe.view());
        let ginv = linalg::invert_psd(&g.view()).unwrap();
        let pe_xm = &xm - &xe.dot(&ginv).dot(&xe.t().dot(&xm));
        let m_mat = xm.t().dot(&pe_xm);

        let scale_active = 0.2;
        let scale_score = 0.3 * lambda;
        for _ in 0..50 {
            let da = Array1::from_iter((0..e).map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                scale_active * z
            }));
            let dsc = Array1::from_iter((0..p - e).map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                scale_score * z
            }));
            let mut d_new = d_obs.clone();
            for i in 0..e {
                d_new[i] += da[i];
            }
            for j in 0..p - e {
                d_new[e + j] += dsc[j];
            }
            // boundary cases excluded
            let margin = event.margin(&d_new.view());
            if margin.abs() < 1e-6 {
                continue;
            }
            let b = linalg::solve_psd(&m_mat.view(), &dsc.view()).unwrap();
            let y_new = ds.y() + &xe.dot(&da) + &pe_xm.dot(&b);
            let ds_new = Dataset::new(ds.x().clone(), y_new).unwrap();
            let refit = lasso::solve_lasso(&ds_new, lambda).unwrap();
            kkt_worst = kkt_worst.max(refit.kkt_residual(&ds_new));
            let same = refit.active == fit.active && refit.signs == fit.signs;
            if same == (margin > 0.0) {
                agree += 1;
            } else {
                disagree += 1;
            }
        }
    }
    let total = agree + disagree;
    let rate = agree as f64 / total as f64;
    verdict(
        "criterion 5 (selection-event oracle)",
        instances == 200 && rate >= 0.99 && kkt_worst <= 1e-6,
        &format!(
            "{instances} instances, agreement {rate:.4} ({agree}/{total}), worst KKT {kkt_worst:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: randomization restores normality of criteria differences

#[test]
fn criterion_6_gaussianization() {
    // CV curve differences at adjacent grid points with identical selected
    // supports across folds
    let mut raw_cv = Vec::new();
    let mut rand_cv = Vec::new();
    let hub = RngHub::new(66);
    let mut attempts = 0u64;
    while raw_cv.len() < 300 && attempts < 8000 {
        attempts += 1;
        let rhub = hub.replication(attempts);
        let mut rng = rhub.stream(Substream::Data, 0);
        let (n, p) = (120, 6);
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..p {
                x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
            }
            y[i] = rand_distr::StandardNormal.sample(&mut rng);
        }
        let ds = Dataset::new(x, y).unwrap();
        let plan = cv::make_folds(n, 5, &mut rhub.stream(Substream::Folds, 0)).unwrap();
        let grid = cv::lambda_grid(&ds, 8);
        let Ok(curve) = cv::cv_curve(&ds, &plan, &grid, lasso::Loss::Squared) else { continue };
        // adjacent pair low on the grid, where the fits are dense enough
        // for the quadratic (non-Gaussian) error terms to dominate
        let (l1, l2) = (4, 5);
        let coefs = curve.fold_coefs.as_ref().unwrap();
        let mut same = true;
        for k in 0..5 {
            let s1: Vec<bool> = (0..p).map(|j| coefs[[l1, k, j]] != 0.0).collect();
            let s2: Vec<bool> = (0..p).map(|j| coefs[[l2, k, j]] != 0.0).collect();
            if s1 != s2 {
                same = false;
                break;
            }
        }
        if !same {
            continue;
        }
        raw_cv.push(curve.total[l1] - curve.total[l2]);
        let tau = cv::default_tau(&ds, lasso::Loss::Squared);
        let rcurve = cv::randomize_curve(
            &curve,
            cv::RandomizeMode::PerFold { tau },
            &mut rhub.stream(Substream::Randomization, 0),
        );
        rand_cv.push(rcurve.randomized[l1] - rcurve.randomized[l2]);
    }
    let (_, p_raw_cv) = stats::shapiro_wilk(&raw_cv);
    let (_, p_rand_cv) = stats::shapiro_wilk(&rand_cv);

    // AIC differences across two fixed nested models
    let mut raw_aic = Vec::with_capacity(300);
    let mut rand_aic = Vec::with_capacity(300);
    for rep in 0..300u64 {
        let rhub = RngHub::new(67).replication(rep);
        let mut rng = rhub.stream(Substream::Data, 0);
        let (n, p) = (120, 3);
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..p {
                x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
            }
            y[i] = rand_distr::StandardNormal.sample(&mut rng);
        }
        let ds = Dataset::new(x, y).unwrap();
        let menu = aic_fs::ModelMenu {
            models: vec![vec![0], vec![0, 1, 2]],
            penalty_mode: aic_fs::PenaltyMode::Additive,
        };
        let err = aic_fs::aic_vector(&ds, &menu, aic_fs::classical_aic_penalty(n)).unwrap();
        raw_aic.push(err[0] - err[1]);
        let d = aic_fs::randomize_two_part(
            &err,
            0.1,
            0.1,
            &mut rhub.stream(Substream::Randomization, 0),
        );
        rand_aic.push(d.values[0] - d.values[1]);
    }
    let (_, p_raw_aic) = stats::shapiro_wilk(&raw_aic);
    let (_, p_rand_aic) = stats::shapiro_wilk(&rand_aic);

    verdict(
        "criterion 6 (gaussianization)",
        raw_cv.len() >= 300
            && p_raw_cv < 0.01
            && p_rand_cv >= 0.01
            && p_raw_aic < 0.01
            && p_rand_aic >= 0.01,
        &format!(
            "CV: raw SW p {p_raw_cv:.2e} vs randomized {p_rand_cv:.3} (n={}); \
             AIC: raw SW p {p_raw_aic:.2e} vs randomized {p_rand_aic:.3}",
            raw_cv.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: sampler calibration

fn fd_check(density: &sampler::SelectiveDensity, init: &Array1<f64>, rng: &mut impl Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mut x = init.clone();
        for v in x.iter_mut() {
            *v += rng.random_range(-0.03..0.03);
        }
        density.project(&mut x);
        let g = density.grad_log_density(&x);
        let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for j in 0..x.len() {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (density.log_density(&xp) - density.log_density(&xm)) / (2.0 * h);
            worst = worst.max(((g[j] - fd) / scale).abs());
        }
    }
    worst
}

#[test]
fn criterion_7_sampler_calibration() {
    let hub = RngHub::new(77);

    // unconstrained Gaussian moments at 1e5 kept draws
    let density = sampler::SelectiveDensity::new(
        Array1::zeros(1),
        Array2::eye(1),
        vec![],
        vec![sampler::ConstraintBlock::Free { dim: 1 }],
        None,
    )
    .unwrap();
    let cfg = sampler::ChainConfig {
        burn_in: 2000,
        thin: 10,
        kept: 100_000,
        step_size: Some(0.08),
        seed: 0,
    };
    let out = sampler::run_chain(
        &density,
        &Array1::from_elem(1, 0.4),
        &cfg,
        &mut hub.stream(Substream::Sampler, 0),
    )
    .unwrap();
    let xs: Vec<f64> = out.draws.column(0).to_vec();
    let mean = stats::mean(&xs);
    let var = stats::variance(&xs);
    let moments_ok = mean.abs() < 0.02 && (var - 1.0).abs() < 0.05;

    // half-line truncated normal mean vs a quadrature oracle
    let a = 0.7;
    let trunc = sampler::SelectiveDensity::new(
        Array1::zeros(1),
        Array2::eye(1),
        vec![],
        vec![sampler::ConstraintBlock::Polyhedron {
            a: ndarray::array![[-1.0]],
            b: ndarray::array![-a],
        }],
        None,
    )
    .unwrap();
    let cfg_t = sampler::ChainConfig {
        burn_in: 20_000,
        thin: 10,
        kept: 60_000,
        step_size: Some(1e-3),
        seed: 0,
    };
    let out_t = sampler::run_chain(
        &trunc,
        &Array1::from_elem(1, a + 0.5),
        &cfg_t,
        &mut hub.stream(Substream::Sampler, 1),
    )
    .unwrap();
    let ts: Vec<f64> = out_t.draws.column(0).to_vec();
    let (emp, se) = sampler::batch_mean_se(&ts);
    // trapezoid quadrature of x phi(x) / Z over [a, a+12]
    let quad_mean = {
        let steps = 400_000;
        let hi = a + 12.0;
        let h = (hi - a) / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=steps {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            let d = stats::norm_pdf(x);
            num += w * x * d;
            den += w * d;
        }
        num / den
    };
    let trunc_ok = (emp - quad_mean).abs() < 3.0 * se;

    // finite-difference gradients for every density builder
    let mut worst_fd = 0.0f64;
    {
        let mut rng = hub.stream(Substream::Data, 2);
        let (n, p) = (40, 4);
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..p {
                x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
            }
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            y[i] = 0.8 * x[[i, 0]] + z;
        }
        let ds = Dataset::new(x, y).unwrap();
        let omega = Array1::from_iter((0..p).map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
            2.0 * z
        }));
        let fit = lasso::solve_randomized_lasso(&ds, 6.0, 1.0, &omega).unwrap();
        let e = fit.active.len();
        assert!(e >= 1);
        let table =
            covariance::influence_contributions(&ds, &fit.active, fit.loss, None).unwrap();
        let cov =
            covariance::statistic_cov(&table, 400, &mut hub.stream(Substream::Bootstrap, 0))
                .unwrap();
        let stat = table.statistic();
        let law_td = law::JointGaussianLaw::new(stat.clone(), cov.clone(), e).unwrap();
        let dv = lasso::data_vector(&ds, &fit.active).unwrap();
        for mode in [
            sampler::SubgradientMode::Keep,
            sampler::SubgradientMode::Marginalize,
            sampler::SubgradientMode::Condition,
        ] {
            let (density, init) = sampler::build_density_randomized_lasso(
                &fit,
                &ds,
                &law_td,
                &dv.ols_active,
                2.0,
                mode,
            )
            .unwrap();
            worst_fd = worst_fd.max(fd_check(&density, &init, &mut rng));
        }
        // CV view, both modes
        let plan = cv::make_folds(n, 4, &mut hub.stream(Substream::Folds, 0)).unwrap();
        let grid = cv::lambda_grid(&ds, 3);
        let raw = cv::cv_curve(&ds, &plan, &grid, lasso::Loss::Squared).unwrap();
        let curve = cv::randomize_curve(
            &raw,
            cv::RandomizeMode::TwoPart { sigma_r1: 0.1, sigma_r2: 0.1 },
            &mut hub.stream(Substream::Randomization, 0),
        );
        let table_full = covariance::influence_contributions(
            &ds,
            &fit.active,
            fit.loss,
            Some((&curve, &plan)),
        )
        .unwrap();
        let mut cov_full =
            covariance::statistic_cov(&table_full, 400, &mut hub.stream(Substream::Bootstrap, 1))
                .unwrap();
        for li in 0..3 {
            cov_full[[e + p + li, e + p + li]] += 0.01;
        }
        let law_full =
            law::JointGaussianLaw::new(table_full.statistic(), cov_full, e).unwrap();
        let (density, init) = sampler::build_density_randomized_lasso(
            &fit,
            &ds,
            &law_td,
            &dv.ols_active,
            2.0,
            sampler::SubgradientMode::Marginalize,
        )
        .unwrap();
        for mode in [sampler::CvViewMode::Joint, sampler::CvViewMode::Condition] {
            let (d2, i2) = sampler::add_cv_view(
                &density,
                &init,
                &curve,
                &law_full,
                &dv.ols_active,
                mode,
            )
            .unwrap();
            worst_fd = worst_fd.max(fd_check(&d2, &i2, &mut rng));
        }

        // AIC density
        let menu = aic_fs::ModelMenu {
            models: vec![vec![0], vec![0, 1], vec![1, 2], vec![0, 1, 2, 3]],
            penalty_mode: aic_fs::PenaltyMode::Additive,
        };
        let err = aic_fs::aic_vector(&ds, &menu, aic_fs::classical_aic_penalty(n)).unwrap();
        let draws = aic_fs::randomize_two_part(
            &err,
            0.1,
            0.1,
            &mut hub.stream(Substream::Randomization, 1),
        );
        let (winners, _) = aic_fs::k_smallest_event(&draws.values, 2).unwrap();
        let t_obs = dv.ols_active.clone();
        let mut mean_te = Array1::zeros(e + 4);
        for i in 0..e {
            mean_te[i] = t_obs[i];
        }
        let err1 = draws.err1();
        for li in 0..4 {
            mean_te[e + li] = err1[li];
        }
        let mut cov_te = Array2::eye(e + 4) * 0.3;
        cov_te[[0, e]] = 0.05;
        cov_te[[e, 0]] = 0.05;
        let law_te = law::JointGaussianLaw::new(mean_te, cov_te, e).unwrap();
        for mode in [sampler::CvViewMode::Joint, sampler::CvViewMode::Condition] {
            let (d3, i3) =
                aic_fs::aic_selective_density(&law_te, &t_obs, &draws, &winners, mode).unwrap();
            worst_fd = worst_fd.max(fd_check(&d3, &i3, &mut rng));
        }

        // FS density with stopping view
        let trace =
            aic_fs::run_randomized_fs(&ds, 0.95, 1.0, 0.05, 0.05, &mut hub.stream(Substream::Sampler, 5))
                .unwrap();
        let active = trace.selected();
        let ef = active.len();
        let dvf = lasso::data_vector(&ds, &active).unwrap();
        let lf = trace.stopping.l_stop;
        let mut mean_fs = Array1::zeros(ef + p + lf);
        for i in 0..ef {
            mean_fs[i] = dvf.ols_active[i];
            mean_fs[ef + i] = dvf.ols_active[i];
        }
        for j in 0..p - ef {
            mean_fs[2 * ef + j] = dvf.inactive_score[j] / n as f64;
        }
        let err1f = trace.criteria_draws.err1();
        for li in 0..lf {
            mean_fs[ef + p + li] = err1f[li];
        }
        let mut cov_fs = Array2::eye(ef + p + lf) * 0.4;
        cov_fs[[0, ef]] = 0.1;
        cov_fs[[ef, 0]] = 0.1;
        let law_fs = law::JointGaussianLaw::new(mean_fs, cov_fs, ef).unwrap();
        let (d4, i4) = aic_fs::fs_selective_density(&trace, &ds, &law_fs, 1.0, true).unwrap();
        worst_fd = worst_fd.max(fd_check(&d4, &i4, &mut rng));

        // carved LOCO density
        let train_rows: Vec<usize> = (0..32).collect();
        let train = ds.subset_rows(&train_rows);
        let fit_tr = lasso::solve_lasso(&train, 3.0).unwrap();
        if !fit_tr.active.is_empty() {
            let j = fit_tr.active[0];
            let carved = loco::loco_carved(
                &ds,
                &train_rows,
                &fit_tr,
                j,
                0.05,
                &mut hub.stream(Substream::Randomization, 2),
            )
            .unwrap();
            worst_fd = worst_fd.max(fd_check(&carved.density, &carved.init, &mut rng));
        }
    }
    let fd_ok = worst_fd < 1e-5;

    verdict(
        "criterion 7 (sampler calibration)",
        moments_ok && trunc_ok && fd_ok,
        &format!(
            "moments (mean {mean:.4}, var {var:.4}), truncated mean {emp:.4} vs quadrature \
             {quad_mean:.4} (se {se:.4}), worst gradient gap {worst_fd:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 8: desk-scale ordering and error control

#[test]
fn criterion_8_desk_scale_ordering() {
    let mut lines = Vec::new();
    let mut all_ok = true;
    for rho in [0.0, 0.4] {
        let mut powers = std::collections::BTreeMap::new();
        for proc_id in [
            ProcedureId::Ds1,
            ProcedureId::Tg1,
            ProcedureId::Tg2,
            ProcedureId::R1,
            ProcedureId::R2,
        ] {
            let mut cfg = ScenarioConfig::preset("tables", false).unwrap();
            cfg.procedure = proc_id;
            cfg.rho = rho;
            cfg.replications = 50;
            if matches!(proc_id, ProcedureId::Ds1) {
                cfg.cv_randomization = CvRandomization::None;
            }
            let rep = harness::simulate(&cfg).unwrap();
            let a = rep.aggregates;
            let type_i_ok = a.type_i_threshold <= 0.07;
            all_ok &= type_i_ok;
            powers.insert(proc_id.name(), a.power_bh);
            lines.push(format!(
                "rho {rho}: {} power(BH) {:.3}, Type I {:.3}{}",
                proc_id.name(),
                a.power_bh,
                a.type_i_threshold,
                if type_i_ok { "" } else { " [type I violated]" }
            ));
        }
        let ordering_ok = powers["R1"] > powers["TG1"];
        all_ok &= ordering_ok;
        lines.push(format!(
            "rho {rho}: R1 power {:.3} > TG1 power {:.3}: {}",
            powers["R1"], powers["TG1"], ordering_ok
        ));
    }
    verdict("criterion 8 (desk-scale ordering)", all_ok, &lines.join("; "));
}

// ---------------------------------------------------------------------------
// criterion 9: byte determinism across thread counts

#[test]
fn criterion_9_determinism() {
    let mut cfg = ScenarioConfig::preset("fig1", false).unwrap();
    cfg.n = 150;
    cfg.p = 12;
    cfg.grid_len = 10;
    cfg.replications = 6;
    let base = harness::simulate(&cfg).unwrap();
    let mut buf0 = Vec::new();
    base.write_report_csv(&mut buf0).unwrap();

    std::env::set_var("POSTSEL_THREADS", "3");
    let multi = harness::simulate(&cfg).unwrap();
    std::env::remove_var("POSTSEL_THREADS");
    let mut buf1 = Vec::new();
    multi.write_report_csv(&mut buf1).unwrap();

    let again = harness::simulate(&cfg).unwrap();
    let mut buf2 = Vec::new();
    again.write_report_csv(&mut buf2).unwrap();

    verdict(
        "criterion 9 (determinism)",
        buf0 == buf1 && buf0 == buf2,
        &format!("{} bytes, identical across 1 and 3 threads and repeat runs", buf0.len()),
    );
}
