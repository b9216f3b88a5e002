//! Named self-check suites behind the `check` CLI subcommand: quick
//! property runs over the numerical core, one pass/fail line per check.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{RngHub, Substream};
use crate::sampler;
use crate::stats;

pub const SUITES: [&str; 4] = ["projection", "sampler", "lasso-event", "gauss"];

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn run_check_suite(suite: &str, seed: u64) -> Result<Vec<CheckLine>> {
    match suite {
        "projection" => Ok(projection_suite(seed)),
        "sampler" => Ok(sampler_suite(seed)),
        "lasso-event" => Ok(lasso_event_suite(seed)),
        "gauss" => Ok(gauss_suite(seed)),
        other => Err(Error::InvalidInput(format!("unknown check suite `{other}`"))),
    }
}

// small active-set quadratic program: minimize ||x - z||^2 s.t. A x <= 0,
// by enumerating active subsets (reference for the closed-form projections)
fn qp_projection(a: &Array2<f64>, z: &Array1<f64>) -> Array1<f64> {
    let m = a.nrows();
    let d = a.ncols();
    let mut best: Option<(f64, Array1<f64>)> = None;
    for mask in 0..(1u32 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = rows.len();
        // KKT: x = z - A_S^T nu, A_S x = 0  =>  (A_S A_S^T) nu = A_S z
        let x = if k == 0 {
            z.clone()
        } else {
            let mut asub = Array2::zeros((k, d));
            for (r, &i) in rows.iter().enumerate() {
                asub.row_mut(r).assign(&a.row(i));
            }
            let gram = asub.dot(&asub.t());
            let rhs = asub.dot(z);
            let Ok(nu) = crate::linalg::solve_psd(&gram.view(), &rhs.view()) else {
                continue;
            };
            if nu.iter().any(|v| *v < -1e-9) {
                continue;
            }
            z - &asub.t().dot(&nu)
        };
        let feasible = a.dot(&x).iter().all(|v| *v <= 1e-8);
        if !feasible {
            continue;
        }
        let obj = (&x - z).mapv(|v| v * v).sum();
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, x));
        }
    }
    best.expect("QP oracle found no feasible subset").1
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

fn projection_suite(seed: u64) -> Vec<CheckLine> {
    let hub = RngHub::new(seed);
    let mut rng = hub.stream(Substream::Data, 0);
    let mut lines = Vec::new();

    let mut worst_min = 0.0f64;
    let mut worst_idem = 0.0f64;
    for _ in 0..300 {
        let l = 3 + rng.random_range(0..4usize);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let w = rng.random_range(0..l);
        let p = sampler::project_min_cone(&z, w);
        let q = qp_projection(&min_cone_rows(l, w), &z);
        worst_min = worst_min.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let pp = sampler::project_min_cone(&p, w);
        worst_idem = worst_idem.max((&pp - &p).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    lines.push(CheckLine {
        name: "min-cone projection vs QP oracle".into(),
        passed: worst_min < 1e-8 && worst_idem < 1e-10,
        detail: format!("max err {worst_min:.2e}, idempotency {worst_idem:.2e}"),
    });

    let mut worst_k = 0.0f64;
    for _ in 0..300 {
        let l = 3 + rng.random_range(0..4usize);
        let k = 1 + rng.random_range(0..l - 1);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let winners: Vec<usize> = {
            let mut idx: Vec<usize> = (0..l).collect();
            for i in (1..l).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let mut w = idx[..k].to_vec();
            w.sort_unstable();
            w
        };
        let p = sampler::project_k_smallest_cone(&z, &winners);
        let mut rows = Vec::new();
        for &j in &winners {
            for c in 0..l {
                if !winners.contains(&c) {
                    let mut row = vec![0.0; l];
                    row[j] = 1.0;
                    row[c] = -1.0;
                    rows.push(row);
                }
            }
        }
        let mut a = Array2::zeros((rows.len(), l));
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                a[[r, c]] = *v;
            }
        }
        let q = qp_projection(&a, &z);
        worst_k = worst_k.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    lines.push(CheckLine {
        name: "k-smallest cone projection vs QP oracle".into(),
        passed: worst_k < 1e-8,
        detail: format!("max err {worst_k:.2e}"),
    });

    let mut worst_linf = 0.0f64;
    for _ in 0..300 {
        let l = 2 + rng.random_range(0..4usize);
        let z = Array1::from_iter((0..l).map(|_| rng.random_range(-2.0..2.0)));
        let apex = rng.random_range(0..l);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let p = sampler::project_linf_cone(&z, apex, sign);
        // rows: z_j - sign z_apex <= 0 and -z_j - sign z_apex <= 0
        let mut a = Array2::zeros(((l - 1) * 2, l));
        let mut r = 0;
        for j in 0..l {
            if j == apex {
                continue;
            }
            a[[r, j]] = 1.0;
            a[[r, apex]] = -sign;
            a[[r + 1, j]] = -1.0;
            a[[r + 1, apex]] = -sign;
            r += 2;
        }
        let q = qp_projection(&a, &z);
        worst_linf = worst_linf.max((&p - &q).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    lines.push(CheckLine {
        name: "normal-cone projection vs QP oracle".into(),
        passed: worst_linf < 1e-8,
        detail: format!("max err {worst_linf:.2e}"),
    });
    lines
}

fn sampler_suite(seed: u64) -> Vec<CheckLine> {
    let hub = RngHub::new(seed);
    let mut lines = Vec::new();
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
        kept: 50_000,
        step_size: Some(0.08),
        seed,
    };
    let out = sampler::run_chain(
        &density,
        &Array1::from_elem(1, 0.2),
        &cfg,
        &mut hub.stream(Substream::Sampler, 0),
    )
    .unwrap();
    let xs: Vec<f64> = out.draws.column(0).to_vec();
    let m = stats::mean(&xs);
    let v = stats::variance(&xs);
    lines.push(CheckLine {
        name: "unconstrained Gaussian chain moments".into(),
        passed: m.abs() < 0.03 && (v - 1.0).abs() < 0.06,
        detail: format!("mean {m:.4}, var {v:.4}"),
    });
    lines
}

fn lasso_event_suite(seed: u64) -> Vec<CheckLine> {
    let hub = RngHub::new(seed);
    let mut rng = hub.stream(Substream::Data, 1);
    let mut ok = 0usize;
    let mut total = 0usize;
    for _ in 0..40 {
        let (n, p) = (25, 5);
        let mut x = Array2::zeros((n, p));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..p {
                x[[i, j]] = StandardNormal.sample(&mut rng);
            }
            y[i] = StandardNormal.sample(&mut rng);
        }
        let Ok(ds) = crate::dataset::Dataset::new(x, y) else { continue };
        let Ok(fit) = crate::lasso::solve_lasso(&ds, 2.5) else { continue };
        if fit.active.is_empty() {
            continue;
        }
        let Ok(ev) = crate::lasso::selection_event_fixed_lambda(&fit, &ds) else { continue };
        let Ok(dv) = crate::lasso::data_vector(&ds, &fit.active) else { continue };
        total += 1;
        if ev.contains(&dv.stacked().view()) && fit.kkt_residual(&ds) <= 1e-6 {
            ok += 1;
        }
    }
    vec![CheckLine {
        name: "fixed-lambda event holds at the observed data vector".into(),
        passed: total > 10 && ok == total,
        detail: format!("{ok}/{total} instances"),
    }]
}

fn gauss_suite(seed: u64) -> Vec<CheckLine> {
    // randomized AIC-style differences pass normality while raw chi-square
    // style differences fail (quick 150-replication version)
    let hub = RngHub::new(seed);
    let reps = 150;
    let mut raw = Vec::with_capacity(reps);
    let mut randomized = Vec::with_capacity(reps);
    for rep in 0..reps {
        let rhub = hub.replication(rep as u64);
        let mut rng = rhub.stream(Substream::Data, 2);
        let n = 120;
        let mut x = Array2::zeros((n, 3));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            for j in 0..3 {
                x[[i, j]] = StandardNormal.sample(&mut rng);
            }
            y[i] = StandardNormal.sample(&mut rng);
        }
        let ds = crate::dataset::Dataset::new(x, y).unwrap();
        let menu = crate::aic_fs::ModelMenu {
            models: vec![vec![0], vec![0, 1, 2]],
            penalty_mode: crate::aic_fs::PenaltyMode::Additive,
        };
        let err = crate::aic_fs::aic_vector(&ds, &menu, |_| 0.0).unwrap();
        raw.push(err[0] - err[1]);
        let d = crate::aic_fs::randomize_two_part(
            &err,
            0.1,
            0.1,
            &mut rhub.stream(Substream::Randomization, 0),
        );
        randomized.push(d.values[0] - d.values[1]);
    }
    let (_, p_raw) = stats::shapiro_wilk(&raw);
    let (_, p_rand) = stats::shapiro_wilk(&randomized);
    vec![CheckLine {
        name: "randomization restores normality of criteria differences".into(),
        passed: p_raw < 0.01 && p_rand >= 0.01,
        detail: format!("raw p {p_raw:.2e}, randomized p {p_rand:.3}"),
    }]
}
