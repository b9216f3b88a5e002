//! K-fold cross-validation machinery: fold plans, per-fold error curves,
//! the randomized CV curve (per-fold noise or the two-part form), minimizer
//! and one-sigma penalty choice, and the argmin affine event.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Write;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::event::AffineEvent;
use crate::lasso::{self, Loss};
use crate::stats;

#[derive(Debug, Clone)]
pub struct FoldPlan {
    /// Fold id (0-based) for each observation.
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn fold_rows(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == k).collect()
    }

    pub fn train_rows(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != k).collect()
    }
}

/// Uniformly random balanced partition of {1..n} into K folds
/// (sizes differ by at most one).
pub fn make_folds<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidInput("need K >= 2".into()));
    }
    if n < 2 * k {
        return Err(Error::InvalidInput(format!("need n >= 2K, got n={n}, K={k}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let mut assignments = vec![0usize; n];
    let mut sizes = vec![0usize; k];
    for (pos, &row) in perm.iter().enumerate() {
        let fold = pos % k;
        assignments[row] = fold;
        sizes[fold] += 1;
    }
    Ok(FoldPlan { assignments, sizes })
}

/// How the curve was randomized, with the stored draws.
#[derive(Debug, Clone)]
pub enum CurveNoise {
    None,
    /// `Err_R(l,k) = Err(l,k) + n_k^{-1/2} R[l,k]`, R iid N(0, tau^2).
    PerFold { draws: Array2<f64> },
    /// `Err_R = Err + R1 + R2` with R1 ~ N(0, s1^2 I), R2 ~ N(0, s2^2 I).
    TwoPart { r1: Array1<f64>, r2: Array1<f64>, sigma_r1: f64, sigma_r2: f64 },
}

#[derive(Debug, Clone)]
pub struct CvCurve {
    /// Strictly decreasing penalty grid.
    pub grid: Vec<f64>,
    /// L x K raw test errors.
    pub per_fold: Array2<f64>,
    /// Row sums of `per_fold`.
    pub total: Array1<f64>,
    /// Randomized curve (= `total` when tau = 0).
    pub randomized: Array1<f64>,
    pub noise: CurveNoise,
    pub tau: f64,
    pub fold_sizes: Vec<usize>,
    pub loss: Loss,
    /// Training-fold coefficients, (L, K, p); consumed by the influence
    /// linearization of the curve's covariance.
    pub fold_coefs: Option<Array3<f64>>,
}

impl CvCurve {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Index of the randomized minimizer (smallest index on ties).
    pub fn winner(&self) -> usize {
        argmin(self.randomized.as_slice().unwrap())
    }

    /// CSV export: lambda, fold, err, err_randomized. Two-part noise is
    /// spread evenly across folds so the per-fold randomized values re-sum
    /// to the randomized curve.
    pub fn export_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["lambda", "fold", "err", "err_randomized"])?;
        let k = self.fold_sizes.len();
        for l in 0..self.len() {
            for f in 0..k {
                let raw = self.per_fold[[l, f]];
                let rand = raw + self.fold_noise(l, f);
                wtr.write_record(&[
                    format!("{:.17e}", self.grid[l]),
                    format!("{f}"),
                    format!("{raw:.17e}"),
                    format!("{rand:.17e}"),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    fn fold_noise(&self, l: usize, f: usize) -> f64 {
        match &self.noise {
            CurveNoise::None => 0.0,
            CurveNoise::PerFold { draws } => draws[[l, f]] / (self.fold_sizes[f] as f64).sqrt(),
            CurveNoise::TwoPart { r1, r2, .. } => (r1[l] + r2[l]) / self.fold_sizes.len() as f64,
        }
    }

    /// Randomized per-fold errors (raw plus that fold's share of the noise).
    pub fn randomized_per_fold(&self, l: usize) -> Vec<f64> {
        (0..self.fold_sizes.len())
            .map(|f| self.per_fold[[l, f]] + self.fold_noise(l, f))
            .collect()
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Geometric grid of `len` points from `lambda_max = ||X^T y||_inf` down to
/// `0.01 lambda_max`.
pub fn lambda_grid(data: &Dataset, len: usize) -> Vec<f64> {
    let score = data.x().t().dot(data.y());
    let lmax = score.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    geometric_grid(lmax, 0.01 * lmax, len)
}

pub fn geometric_grid(hi: f64, lo: f64, len: usize) -> Vec<f64> {
    assert!(hi > lo && lo > 0.0 && len >= 2);
    let ratio = (lo / hi).powf(1.0 / (len as f64 - 1.0));
    (0..len).map(|i| hi * ratio.powi(i as i32)).collect()
}

/// Default randomization scale: a quarter of the empirical SD of the
/// per-observation errors at the null fit, which matches the CLT scale of
/// each fold's error. Squared loss uses the squared responses; logistic uses
/// squared centered responses.
pub fn default_tau(data: &Dataset, loss: Loss) -> f64 {
    let vals: Vec<f64> = match loss {
        Loss::Squared => data.y().iter().map(|y| y * y).collect(),
        Loss::Logistic => {
            let m = data.y().sum() / data.n() as f64;
            data.y().iter().map(|y| (y - m) * (y - m)).collect()
        }
    };
    0.25 * stats::variance(&vals).sqrt()
}

/// Raw (tau = 0) cross-validation curve: for each grid point and fold, the
/// held-out loss of the Lasso trained on the remaining folds.
pub fn cv_curve(data: &Dataset, plan: &FoldPlan, grid: &[f64], loss: Loss) -> Result<CvCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty lambda grid".into()));
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidInput("lambda grid must be strictly decreasing".into()));
    }
    let l = grid.len();
    let k = plan.k();
    let mut per_fold = Array2::zeros((l, k));
    let mut fold_coefs = Array3::zeros((l, k, data.p()));
    for fold in 0..k {
        let train = data.subset_rows(&plan.train_rows(fold));
        let test = data.subset_rows(&plan.fold_rows(fold));
        let nk = test.n() as f64;
        let mut warm: Option<Array1<f64>> = None;
        for (li, &lam) in grid.iter().enumerate() {
            let fit = match loss {
                Loss::Squared => lasso::solve_lasso_warm(&train, lam, warm.as_ref()),
                Loss::Logistic => lasso::solve_lasso_logistic_warm(&train, lam, warm.as_ref()),
            }
            .map_err(|e| Error::CvCellFailed {
                lambda_index: li,
                fold,
                message: e.to_string(),
            })?;
            per_fold[[li, fold]] = test_loss(&test, &fit.beta, loss) / nk;
            fold_coefs.slice_mut(ndarray::s![li, fold, ..]).assign(&fit.beta);
            warm = Some(fit.beta);
        }
    }
    let total = per_fold.sum_axis(ndarray::Axis(1));
    Ok(CvCurve {
        grid: grid.to_vec(),
        per_fold,
        randomized: total.clone(),
        total,
        noise: CurveNoise::None,
        tau: 0.0,
        fold_sizes: plan.sizes.clone(),
        loss,
        fold_coefs: Some(fold_coefs),
    })
}

fn test_loss(test: &Dataset, beta: &Array1<f64>, loss: Loss) -> f64 {
    let eta = test.x().dot(beta);
    match loss {
        Loss::Squared => {
            let r = test.y() - &eta;
            r.dot(&r)
        }
        Loss::Logistic => eta
            .iter()
            .zip(test.y().iter())
            .map(|(e, y)| softplus(*e) - y * e)
            .sum(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RandomizeMode {
    /// Independent N(0, tau^2) per (fold, lambda), scaled by n_k^{-1/2}.
    PerFold { tau: f64 },
    /// `Err_R = Err + R1 + R2` on the summed curve.
    TwoPart { sigma_r1: f64, sigma_r2: f64 },
}

/// Adds randomization to a raw curve, storing the draws.
pub fn randomize_curve<R: Rng>(curve: &CvCurve, mode: RandomizeMode, rng: &mut R) -> CvCurve {
    let l = curve.len();
    let k = curve.fold_sizes.len();
    let mut out = curve.clone();
    match mode {
        RandomizeMode::PerFold { tau } => {
            if tau == 0.0 {
                out.noise = CurveNoise::None;
                out.randomized = out.total.clone();
                out.tau = 0.0;
                return out;
            }
            let gauss = Normal::new(0.0, tau).unwrap();
            let mut draws = Array2::zeros((l, k));
            // indexed by (fold, lambda) so parallel schedules cannot reorder
            for f in 0..k {
                for li in 0..l {
                    draws[[li, f]] = gauss.sample(rng);
                }
            }
            let mut randomized = Array1::zeros(l);
            for li in 0..l {
                let mut s = curve.total[li];
                for f in 0..k {
                    s += draws[[li, f]] / (curve.fold_sizes[f] as f64).sqrt();
                }
                randomized[li] = s;
            }
            out.noise = CurveNoise::PerFold { draws };
            out.randomized = randomized;
            out.tau = tau;
        }
        RandomizeMode::TwoPart { sigma_r1, sigma_r2 } => {
            let draw = |s: f64, rng: &mut R| -> Array1<f64> {
                if s == 0.0 {
                    Array1::zeros(l)
                } else {
                    let g = Normal::new(0.0, s).unwrap();
                    Array1::from_iter((0..l).map(|_| g.sample(rng)))
                }
            };
            let r1 = draw(sigma_r1, rng);
            let r2 = draw(sigma_r2, rng);
            out.randomized = &curve.total + &r1 + &r2;
            out.noise = CurveNoise::TwoPart { r1, r2, sigma_r1, sigma_r2 };
            out.tau = (sigma_r1 * sigma_r1 + sigma_r2 * sigma_r2).sqrt();
        }
    }
    out
}

/// The argmin selection event: `B v <= 0` iff the winner coordinate is the
/// minimum of `v` (ties inside).
#[derive(Debug, Clone)]
pub struct ArgminEvent {
    pub winner: usize,
    pub b_matrix: Array2<f64>,
}

impl ArgminEvent {
    pub fn event(&self) -> AffineEvent {
        AffineEvent::new(self.b_matrix.clone(), Array1::zeros(self.b_matrix.nrows())).unwrap()
    }
}

pub fn argmin_event(curve: &CvCurve) -> Result<ArgminEvent> {
    if curve.len() < 2 {
        return Err(Error::InvalidInput("argmin event needs a grid of length >= 2".into()));
    }
    let winner = curve.winner();
    Ok(argmin_event_for(winner, curve.len()))
}

/// B matrix for a given winner: one row per non-winner, +1 at the winner and
/// -1 at that coordinate.
pub fn argmin_event_for(winner: usize, len: usize) -> ArgminEvent {
    let mut b = Array2::zeros((len - 1, len));
    let mut r = 0;
    for j in 0..len {
        if j == winner {
            continue;
        }
        b[[r, winner]] = 1.0;
        b[[r, j]] = -1.0;
        r += 1;
    }
    ArgminEvent { winner, b_matrix: b }
}

/// One-sigma rule: the largest lambda whose randomized error is within one
/// fold-wise standard error of the randomized minimum.
///
/// The standard error at the minimizer treats the curve as a sum of K
/// fold-level errors: `sqrt(K) * sd_k` of the randomized per-fold values,
/// plus (for two-part noise) the known randomization variance.
pub fn one_sigma_lambda(curve: &CvCurve) -> f64 {
    let star = curve.winner();
    let per = curve.randomized_per_fold(star);
    let k = per.len() as f64;
    let mut var = if per.len() > 1 { k * stats::variance(&per) } else { 0.0 };
    if let CurveNoise::TwoPart { sigma_r1, sigma_r2, .. } = &curve.noise {
        var += sigma_r1 * sigma_r1 + sigma_r2 * sigma_r2;
    }
    let sd = var.sqrt();
    let cutoff = curve.randomized[star] + sd;
    for (l, &lam) in curve.grid.iter().enumerate() {
        if curve.randomized[l] <= cutoff {
            return lam; // grid is decreasing, so the first qualifying l is max lambda
        }
    }
    curve.grid[star]
}
