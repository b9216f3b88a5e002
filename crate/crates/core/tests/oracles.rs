//! Independent-oracle tests: brute-force and resampling references for the
//! solver, the Monte Carlo pivot, and the tilt machinery.

use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_distr::Distribution;

use postsel::pivot::{self, McConfig};
use postsel::rng::{RngHub, Substream};
use postsel::sampler::{self, SubgradientMode};
use postsel::{covariance, lasso, law, linalg, stats, Dataset};

fn gaussian_instance(n: usize, p: usize, seed: u64, signal: f64) -> Dataset {
    let hub = RngHub::new(seed);
    let mut rng = hub.stream(Substream::Data, 0);
    let mut x = Array2::zeros((n, p));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = rand_distr::StandardNormal.sample(&mut rng);
        }
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        y[i] = signal * x[[i, 0]] + z;
    }
    Dataset::new(x, y).unwrap()
}

// exhaustive solver: enumerate active sets and sign patterns, solve the
// stationarity system for each, keep consistent candidates, return the
// objective minimizer
fn lasso_by_sign_enumeration(ds: &Dataset, lambda: f64) -> Array1<f64> {
    let p = ds.p();
    let mut best: Option<(f64, Array1<f64>)> = None;
    let objective = |beta: &Array1<f64>| -> f64 {
        let r = ds.y() - &ds.x().dot(beta);
        0.5 * r.dot(&r) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    };
    // each coordinate is -1, 0 or +1
    let total = 3usize.pow(p as u32);
    for code in 0..total {
        let mut c = code;
        let mut signs = vec![0i8; p];
        for s in signs.iter_mut() {
            *s = match c % 3 {
                0 => 0,
                1 => 1,
                _ => -1,
            };
            c /= 3;
        }
        let active: Vec<usize> = (0..p).filter(|&j| signs[j] != 0).collect();
        let beta = if active.is_empty() {
            Array1::zeros(p)
        } else {
            let xe = ds.x_cols(&active);
            let g = linalg::gram(&xe.view());
            let mut rhs = xe.t().dot(ds.y());
            for (i, &j) in active.iter().enumerate() {
                rhs[i] -= lambda * signs[j] as f64;
            }
            let Ok(be) = linalg::solve_psd(&g.view(), &rhs.view()) else { continue };
            // sign consistency
            if be
                .iter()
                .zip(active.iter())
                .any(|(b, &j)| b.signum() != signs[j] as f64 || *b == 0.0)
            {
                continue;
            }
            let mut beta = Array1::zeros(p);
            for (i, &j) in active.iter().enumerate() {
                beta[j] = be[i];
            }
            beta
        };
        // inactive subgradient feasibility
        let r = ds.y() - &ds.x().dot(&beta);
        let score = ds.x().t().dot(&r);
        let feasible = (0..p)
            .filter(|j| signs[*j] == 0)
            .all(|j| score[j].abs() <= lambda + 1e-8);
        if !feasible {
            continue;
        }
        let obj = objective(&beta);
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, beta));
        }
    }
    best.expect("enumeration found no KKT point").1
}

#[test]
fn solver_matches_sign_pattern_enumeration() {
    for seed in 0..6u64 {
        let ds = gaussian_instance(20, 5, 100 + seed, 0.6);
        for lambda in [1.5, 4.0, 9.0] {
            let fit = lasso::solve_lasso(&ds, lambda).unwrap();
            let brute = lasso_by_sign_enumeration(&ds, lambda);
            for j in 0..5 {
                assert!(
                    (fit.beta[j] - brute[j]).abs() < 1e-6,
                    "seed {seed} lambda {lambda} coord {j}: {} vs {}",
                    fit.beta[j],
                    brute[j]
                );
            }
        }
    }
}

#[test]
fn randomized_solution_approaches_plain_as_ridge_vanishes() {
    let ds = gaussian_instance(40, 4, 7, 1.2);
    let plain = lasso::solve_lasso(&ds, 5.0).unwrap();
    let omega = Array1::zeros(4);
    let rand_fit = lasso::solve_randomized_lasso(&ds, 5.0, 1e-8, &omega).unwrap();
    assert_eq!(plain.active, rand_fit.active);
    assert_eq!(plain.signs, rand_fit.signs);
    for j in 0..4 {
        assert!((plain.beta[j] - rand_fit.beta[j]).abs() < 1e-5);
    }
}

#[test]
fn data_vector_matches_explicit_normal_equations() {
    let ds = gaussian_instance(30, 5, 11, 0.0);
    let active = vec![1, 3];
    let dv = lasso::data_vector(&ds, &active).unwrap();
    let xe = ds.x_cols(&active);
    let g = linalg::gram(&xe.view());
    let ginv = linalg::invert_psd(&g.view()).unwrap();
    let ols = ginv.dot(&xe.t().dot(ds.y()));
    for i in 0..2 {
        assert!((dv.ols_active[i] - ols[i]).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------------------
// hit-and-run Monte Carlo pivot

#[test]
fn mc_pivot_matches_closed_form_in_1d() {
    let mean = array![0.0, 0.0];
    let cov = array![[1.0, 0.0], [0.0, 1.0]];
    let lw = law::JointGaussianLaw::new(mean, cov, 1).unwrap();
    // event: t >= 0.3 (one-dimensional half line)
    let event = postsel::AffineEvent::new(array![[-1.0]], array![-0.3]).unwrap();
    let t_obs = array![1.4];
    let theta0 = array![0.0];
    let hub = RngHub::new(5);
    let cfg = McConfig { burn_in_sweeps: 50, thin: 5, kept: 20_000 };
    let mc = pivot::selective_pivot_mc(
        &lw,
        &event,
        &t_obs.view(),
        &theta0.view(),
        &cfg,
        &mut hub.stream(Substream::Sampler, 0),
    )
    .unwrap();
    let region = pivot::TruncationRegion { intervals: vec![(0.3, f64::INFINITY)] };
    let exact = pivot::tg_pivot_1d(1.4, 0.0, 1.0, &region).unwrap();
    let se = mc.mc_error.unwrap();
    assert!(
        (mc.value - exact.value).abs() <= 3.0 * se + 1e-3,
        "mc {} vs exact {} (se {se})",
        mc.value,
        exact.value
    );
}

#[test]
fn mc_pivot_zero_radius() {
    let mean = array![0.0, 0.0, 0.0, 0.0];
    let cov = Array2::eye(4);
    let lw = law::JointGaussianLaw::new(mean, cov, 2).unwrap();
    let event = postsel::AffineEvent::unconstrained(2);
    let t_obs = array![0.7, -0.2];
    let hub = RngHub::new(6);
    let cfg = McConfig { burn_in_sweeps: 20, thin: 2, kept: 4000 };
    let mc = pivot::selective_pivot_mc(
        &lw,
        &event,
        &t_obs.view(),
        &t_obs.view(),
        &cfg,
        &mut hub.stream(Substream::Sampler, 1),
    )
    .unwrap();
    assert!(mc.value < 1e-3, "zero-radius pivot {}", mc.value);
}

#[test]
fn mc_pivot_matches_rejection_sampling_in_2d() {
    // event {z1 >= 0, z2 >= 0}, identity covariance, theta0 = 0
    let mean = array![0.0, 0.0, 0.0];
    let cov = Array2::eye(3);
    let lw = law::JointGaussianLaw::new(mean, cov, 2).unwrap();
    let event =
        postsel::AffineEvent::new(array![[-1.0, 0.0], [0.0, -1.0]], array![0.0, 0.0]).unwrap();
    let t_obs = array![0.9, 1.3];
    let theta0 = array![0.0, 0.0];
    let hub = RngHub::new(7);
    let cfg = McConfig { burn_in_sweeps: 50, thin: 5, kept: 30_000 };
    let mc = pivot::selective_pivot_mc(
        &lw,
        &event,
        &t_obs.view(),
        &theta0.view(),
        &cfg,
        &mut hub.stream(Substream::Sampler, 2),
    )
    .unwrap();

    // rejection oracle with a million proposals
    let mut rng = hub.stream(Substream::Data, 3);
    let radius = t_obs.dot(&t_obs).sqrt();
    let (mut kept, mut inside) = (0u64, 0u64);
    for _ in 0..1_000_000 {
        let z1: f64 = rand_distr::StandardNormal.sample(&mut rng);
        let z2: f64 = rand_distr::StandardNormal.sample(&mut rng);
        if z1 >= 0.0 && z2 >= 0.0 {
            kept += 1;
            if (z1 * z1 + z2 * z2).sqrt() <= radius {
                inside += 1;
            }
        }
    }
    let reject_est = inside as f64 / kept as f64;
    let reject_se = (reject_est * (1.0 - reject_est) / kept as f64).sqrt();
    let combined = mc.mc_error.unwrap().hypot(reject_se);
    assert!(
        (mc.value - reject_est).abs() <= 3.0 * combined + 1e-3,
        "mc {} vs rejection {reject_est} (combined se {combined})",
        mc.value
    );
}

// ---------------------------------------------------------------------------
// tilted confidence intervals vs fresh chains

#[test]
fn tilted_ci_matches_fresh_chain_ci() {
    // scalar-target randomized-lasso density; compare the pooled-tilt
    // interval against endpoints located by fresh chains at each theta
    let ds = gaussian_instance(60, 4, 21, 0.8);
    let hub = RngHub::new(22);
    let mut rng = hub.stream(Substream::Randomization, 0);
    let sigma_omega = 0.8 * (ds.n() as f64).sqrt();
    let omega = Array1::from_iter((0..4).map(|_| {
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        sigma_omega * z
    }));
    let fit = lasso::solve_randomized_lasso(&ds, 8.0, 1.0, &omega).unwrap();
    assert!(!fit.active.is_empty());
    let e = fit.active.len();
    let table = covariance::influence_contributions(&ds, &fit.active, fit.loss, None).unwrap();
    let cov =
        covariance::statistic_cov(&table, 400, &mut hub.stream(Substream::Bootstrap, 0)).unwrap();
    let stat = table.statistic();
    // scalar target: first active coordinate
    let mut idx = vec![0usize];
    idx.extend(e..e + 4);
    let mut mean_i = Array1::zeros(idx.len());
    let mut cov_i = Array2::zeros((idx.len(), idx.len()));
    for (a, &ia) in idx.iter().enumerate() {
        mean_i[a] = stat[ia];
        for (b, &ib) in idx.iter().enumerate() {
            cov_i[[a, b]] = cov[[ia, ib]];
        }
    }
    let law_i = law::JointGaussianLaw::new(mean_i, cov_i, 1).unwrap();
    let t_obs = Array1::from_elem(1, stat[0]);
    let (density, init) = sampler::build_density_randomized_lasso(
        &fit,
        &ds,
        &law_i,
        &t_obs,
        sigma_omega,
        SubgradientMode::Marginalize,
    )
    .unwrap();
    let cfg = sampler::ChainConfig {
        burn_in: 2000,
        thin: 3,
        kept: 12_000,
        step_size: None,
        seed: 3,
    };
    let sd = density.sigma_t[[0, 0]].sqrt();

    let mut srng = hub.stream(Substream::Sampler, 0);
    let mut inference =
        sampler::ChainInference::new(density.clone(), init.clone(), cfg, &mut srng).unwrap();
    let ci = inference.ci_coord(0, stat[0], 0.10).unwrap();

    // fresh-chain oracle: scan theta on a fine grid, each with its own chain,
    // and take the equal-tailed crossing points of the cdf pivot
    let mut grid_lo = None;
    let mut grid_hi = None;
    let lo0 = stat[0] - 6.0 * sd;
    let steps = 60;
    let mut prev_theta = lo0;
    let mut prev_f = 1.0f64;
    for k in 0..=steps {
        let theta = lo0 + 12.0 * sd * k as f64 / steps as f64;
        let d = density.with_theta(Array1::from_elem(1, theta));
        let mut rng_k = hub.stream(Substream::Sampler, 100 + k as u64);
        let chain = sampler::run_chain(&d, &init, &cfg, &mut rng_k).unwrap();
        let col = chain.t_samples().column(0).to_owned();
        let f = col.iter().filter(|v| **v <= stat[0]).count() as f64 / col.len() as f64;
        if grid_lo.is_none() && prev_f >= 0.95 && f < 0.95 {
            grid_lo = Some(0.5 * (prev_theta + theta));
        }
        if grid_hi.is_none() && prev_f >= 0.05 && f < 0.05 {
            grid_hi = Some(0.5 * (prev_theta + theta));
        }
        prev_theta = theta;
        prev_f = f;
    }
    let (olo, ohi) = (grid_lo.expect("no lower crossing"), grid_hi.expect("no upper crossing"));
    assert!(
        (ci.lo - olo).abs() < 0.25 * sd && (ci.hi - ohi).abs() < 0.25 * sd,
        "tilted ({:.4}, {:.4}) vs fresh ({olo:.4}, {ohi:.4}), sd {sd:.4}",
        ci.lo,
        ci.hi
    );
}

// ---------------------------------------------------------------------------
// chain states mapped through the KKT map reproduce the randomization law

#[test]
fn chain_kkt_reconstruction_matches_rejection_oracle() {
    // small instance where rejection sampling over (y, omega) is feasible:
    // the chain's implied omega draws must match the moments of
    // g_omega restricted by selection
    let p = 2;
    let n = 25;
    let hub = RngHub::new(31);
    let ds = gaussian_instance(n, p, 31, 0.0);
    let sigma_omega = 0.9 * (n as f64).sqrt();
    let mut rng = hub.stream(Substream::Randomization, 0);
    let omega = Array1::from_iter((0..p).map(|_| {
        let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
        sigma_omega * z
    }));
    let lambda = 0.9 * (n as f64).sqrt();
    let fit = lasso::solve_randomized_lasso(&ds, lambda, 1.0, &omega).unwrap();
    if fit.active.is_empty() || fit.active.len() == p {
        return; // draw-dependent; the fixed seed gives a proper subset
    }
    let e = fit.active.len();

    // parametric law with the true noise level
    let par = covariance::parametric_cov_lasso(&ds, &fit.active, 1.0).unwrap();
    let cov = par.assemble_t_d();
    let dv = lasso::data_vector(&ds, &fit.active).unwrap();
    let mut mean = Array1::zeros(e + p);
    for i in 0..e {
        mean[i] = dv.ols_active[i];
        mean[e + i] = dv.ols_active[i];
    }
    for j in 0..p - e {
        mean[2 * e + j] = dv.inactive_score[j] / n as f64;
    }
    let lw = law::JointGaussianLaw::new(mean, cov, e).unwrap();
    // null truth for the oracle: theta = 0
    let (density, init) = sampler::build_density_randomized_lasso(
        &fit,
        &ds,
        &lw,
        &dv.ols_active,
        sigma_omega,
        SubgradientMode::Keep,
    )
    .unwrap();
    let density0 = density.with_theta(Array1::zeros(e));
    // probe the default step, then shrink it: the selection region here is
    // tight and the unadjusted discretization bias scales with the step
    let probe = sampler::run_chain(
        &density0,
        &init,
        &sampler::ChainConfig { burn_in: 0, thin: 1, kept: 1, step_size: None, seed: 0 },
        &mut hub.stream(Substream::Sampler, 3),
    )
    .unwrap();
    let cfg = sampler::ChainConfig {
        burn_in: 150_000,
        thin: 10,
        kept: 200_000,
        step_size: Some(probe.diagnostics.step_size / 16.0),
        seed: 0,
    };
    let chain =
        sampler::run_chain(&density0, &init, &cfg, &mut hub.stream(Substream::Sampler, 0)).unwrap();
    // implied omega = the (only) view value at each kept state
    let view = &density0.views[0];
    let mut omega_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(chain.kept()); p];
    for i in 0..chain.kept() {
        let state = chain.draws.row(i).to_owned();
        let w = view.map.dot(&state) + &view.offset;
        for c in 0..p {
            omega_cols[c].push(w[c]);
        }
    }
    let chain_stats: Vec<(f64, f64)> =
        omega_cols.iter().map(|col| sampler::batch_mean_se(col)).collect();
    let chain_means = Array1::from_iter(chain_stats.iter().map(|(m, _)| *m));

    // rejection oracle conditioned exactly like the chain: N_D is held at
    // its observed value, so a draw moves (T, omega) only. T* ~ N(0, Sigma_T)
    // maps to a response via the active/orthogonal reconstruction, omega* is
    // fresh, and the draw is kept when the randomized lasso reproduces (E, s).
    let mut orng = hub.stream(Substream::Data, 9);
    let mut kept = 0usize;
    let mut oracle_means = Array1::<f64>::zeros(p);
    let mut oracle_sq = Array1::<f64>::zeros(p);
    let mut tries = 0usize;
    let dec = law::decompose_on_target(&lw, &dv.ols_active.view(), &{
        let mut d_mean = Array1::zeros(p);
        for i in 0..e {
            d_mean[i] = dv.ols_active[i];
        }
        for j in 0..p - e {
            d_mean[e + j] = dv.inactive_score[j] / n as f64;
        }
        d_mean
    }.view())
    .unwrap();
    let chol_t = linalg::cholesky_jitter(&lw.sigma_t()).unwrap();
    let xe = ds.x_cols(&fit.active);
    let inact_cols = lasso::complement(&fit.active, p);
    let xm = ds.x_cols(&inact_cols);
    let g = linalg::gram(&xe.view());
    let ginv = linalg::invert_psd(&g.view()).unwrap();
    let pe_xm = &xm - &xe.dot(&ginv).dot(&xe.t().dot(&xm));
    let m_mat = xm.t().dot(&pe_xm);
    while kept < 4000 && tries < 400_000 {
        tries += 1;
        // T* from the null law, D* = c T* + N_obs
        let z = Array1::from_iter((0..e).map(|_| {
            let v: f64 = rand_distr::StandardNormal.sample(&mut orng);
            v
        }));
        let t_star = chol_t.dot(&z);
        let d_star = dec.reconstruct(&t_star.view());
        let da = Array1::from_iter((0..e).map(|i| d_star[i] - dv.ols_active[i]));
        let dsc = Array1::from_iter(
            (0..p - e).map(|j| n as f64 * d_star[e + j] - dv.inactive_score[j]),
        );
        let b = linalg::solve_psd(&m_mat.view(), &dsc.view()).unwrap();
        let y_star = ds.y() + &xe.dot(&da) + &pe_xm.dot(&b);
        let om = Array1::from_iter((0..p).map(|_| {
            let v: f64 = rand_distr::StandardNormal.sample(&mut orng);
            sigma_omega * v
        }));
        let ds_new = Dataset::new(ds.x().clone(), y_star).unwrap();
        let refit = lasso::solve_randomized_lasso(&ds_new, lambda, 1.0, &om).unwrap();
        if refit.active == fit.active && refit.signs == fit.signs {
            kept += 1;
            let order: Vec<usize> =
                fit.active.iter().copied().chain(inact_cols.iter().copied()).collect();
            for (c, &jj) in order.iter().enumerate() {
                oracle_means[c] += om[jj];
                oracle_sq[c] += om[jj] * om[jj];
            }
        }
    }
    assert!(kept >= 2000, "rejection oracle starved ({kept} keeps in {tries})");
    oracle_means.mapv_inplace(|v| v / kept as f64);
    for c in 0..p {
        let var = oracle_sq[c] / kept as f64 - oracle_means[c] * oracle_means[c];
        let se_oracle = (var / kept as f64).sqrt();
        let se_chain = chain_stats[c].1;
        // 3 combined standard errors plus a small discretization allowance
        let tol = 3.0 * se_oracle.hypot(se_chain) + 0.02 * sigma_omega;
        assert!(
            (chain_means[c] - oracle_means[c]).abs() < tol,
            "omega moment {c}: chain {:.3} vs oracle {:.3} (tol {tol:.3})",
            chain_means[c],
            oracle_means[c]
        );
    }
}
