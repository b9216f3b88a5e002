//! Plain and randomized Lasso: coordinate-descent solvers, active-set
//! extraction, the exact affine selection event for fixed penalty, and the
//! randomization-reconstruction map feeding the selective sampler.

use ndarray::{s, Array1, Array2};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::event::AffineEvent;
use crate::linalg;

/// Coefficients below this magnitude are treated as exactly zero when
/// extracting the active set; their subgradient is recomputed from
/// stationarity.
pub const ZERO_THRESHOLD: f64 = 1e-10;

/// Duality-gap convergence target for the squared-loss solvers.
pub const GAP_TOL: f64 = 1e-8;

/// KKT stationarity target (max norm).
pub const KKT_TOL: f64 = 1e-6;

const MAX_SWEEPS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub beta: Array1<f64>,
    /// Ascending indices of the non-zero coefficients.
    pub active: Vec<usize>,
    /// Signs over `active` (+1 / -1).
    pub signs: Vec<f64>,
    /// Lambda-scaled inactive subgradient, over the complement of `active`
    /// in ascending order; satisfies max-norm <= lambda.
    pub subgrad_inactive: Array1<f64>,
    pub lambda: f64,
    pub ridge: f64,
    pub randomization: Option<Array1<f64>>,
    pub loss: Loss,
}

impl LassoFit {
    pub fn inactive(&self, p: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(p - self.active.len());
        let mut it = self.active.iter().peekable();
        for j in 0..p {
            if it.peek() == Some(&&j) {
                it.next();
            } else {
                out.push(j);
            }
        }
        out
    }

    /// Max-norm KKT residual of the solved objective at this fit.
    pub fn kkt_residual(&self, data: &Dataset) -> f64 {
        let grad = smooth_gradient(data, &self.beta, self.ridge, self.randomization.as_ref(), self.loss);
        let mut worst = 0.0f64;
        for j in 0..data.p() {
            let r = if self.beta[j].abs() > ZERO_THRESHOLD {
                (grad[j] + self.lambda * self.beta[j].signum()).abs()
            } else {
                (grad[j].abs() - self.lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    }
}

// gradient of the smooth part: loss + (ridge/2)||beta||^2 - omega^T beta
fn smooth_gradient(
    data: &Dataset,
    beta: &Array1<f64>,
    ridge: f64,
    omega: Option<&Array1<f64>>,
    loss: Loss,
) -> Array1<f64> {
    let mut g = match loss {
        Loss::Squared => {
            let r = data.y() - &data.x().dot(beta);
            -data.x().t().dot(&r)
        }
        Loss::Logistic => {
            let eta = data.x().dot(beta);
            let pi = eta.mapv(sigmoid);
            data.x().t().dot(&(&pi - data.y()))
        }
    };
    g = g + &(beta * ridge);
    if let Some(w) = omega {
        g = g - w;
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves the plain Lasso `0.5 ||y - X b||^2 + lambda ||b||_1`.
pub fn solve_lasso(data: &Dataset, lambda: f64) -> Result<LassoFit> {
    solve_lasso_warm(data, lambda, None)
}

/// Plain Lasso with an optional warm start (used along CV paths).
pub fn solve_lasso_warm(
    data: &Dataset,
    lambda: f64,
    warm: Option<&Array1<f64>>,
) -> Result<LassoFit> {
    if lambda <= 0.0 {
        return Err(Error::InvalidInput("lambda must be positive".into()));
    }
    let beta = cd_squared(data, lambda, 0.0, None, warm)?;
    Ok(extract_fit(data, beta, lambda, 0.0, None, Loss::Squared))
}

/// Solves the randomized Lasso
/// `0.5 ||y - X b||^2 + lambda ||b||_1 + (ridge/2)||b||^2 - omega^T b`.
pub fn solve_randomized_lasso(
    data: &Dataset,
    lambda: f64,
    ridge: f64,
    omega: &Array1<f64>,
) -> Result<LassoFit> {
    if lambda <= 0.0 {
        return Err(Error::InvalidInput("lambda must be positive".into()));
    }
    if ridge <= 0.0 {
        return Err(Error::InvalidInput(
            "ridge must be positive so the randomized objective has a solution".into(),
        ));
    }
    if omega.len() != data.p() {
        return Err(Error::DimensionMismatch("omega length != p".into()));
    }
    let beta = cd_squared(data, lambda, ridge, Some(omega), None)?;
    Ok(extract_fit(data, beta, lambda, ridge, Some(omega.clone()), Loss::Squared))
}

/// Randomized Lasso with logistic loss (the fit term of the objective is the
/// logistic negative log-likelihood). Solved by IRLS with weighted
/// coordinate-descent inner loops.
pub fn solve_randomized_lasso_logistic(
    data: &Dataset,
    lambda: f64,
    ridge: f64,
    omega: &Array1<f64>,
) -> Result<LassoFit> {
    if lambda <= 0.0 || ridge < 0.0 {
        return Err(Error::InvalidInput("need lambda > 0, ridge >= 0".into()));
    }
    let beta = irls_logistic(data, lambda, ridge, Some(omega), None)?;
    Ok(extract_fit(data, beta, lambda, ridge, Some(omega.clone()), Loss::Logistic))
}

/// Non-randomized logistic Lasso (used by cross-validation with logistic loss).
pub fn solve_lasso_logistic_warm(
    data: &Dataset,
    lambda: f64,
    warm: Option<&Array1<f64>>,
) -> Result<LassoFit> {
    if lambda <= 0.0 {
        return Err(Error::InvalidInput("lambda must be positive".into()));
    }
    let beta = irls_logistic(data, lambda, 0.0, None, warm)?;
    Ok(extract_fit(data, beta, lambda, 0.0, None, Loss::Logistic))
}

// Cyclic coordinate descent with an active-set strategy; convergence is
// declared on the duality gap of the (ridge-augmented) Lasso problem.
fn cd_squared(
    data: &Dataset,
    lambda: f64,
    ridge: f64,
    omega: Option<&Array1<f64>>,
    warm: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let x = data.x();
    let y = data.y();
    let (n, p) = (data.n(), data.p());
    let col_sq: Vec<f64> = (0..p).map(|j| x.column(j).dot(&x.column(j))).collect();

    let mut beta = warm.cloned().unwrap_or_else(|| Array1::zeros(p));
    let mut resid = y - &x.dot(&beta);

    let update = |j: usize, beta: &mut Array1<f64>, resid: &mut Array1<f64>| -> f64 {
        let old = beta[j];
        let rho = x.column(j).dot(resid) + col_sq[j] * old + omega.map_or(0.0, |w| w[j]);
        let newv = soft_threshold(rho, lambda) / (col_sq[j] + ridge);
        if newv != old {
            let delta = newv - old;
            resid.scaled_add(-delta, &x.column(j));
            beta[j] = newv;
        }
        (newv - old).abs()
    };

    let mut sweeps = 0usize;
    let mut gap = f64::INFINITY;
    while sweeps < MAX_SWEEPS {
        // full pass
        for j in 0..p {
            update(j, &mut beta, &mut resid);
        }
        sweeps += 1;
        // inner passes on the current active set
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        loop {
            let mut max_move = 0.0f64;
            for &j in &active {
                max_move = max_move.max(update(j, &mut beta, &mut resid));
            }
            sweeps += 1;
            if max_move < 1e-12 || sweeps >= MAX_SWEEPS {
                break;
            }
        }
        // periodic residual refresh fights drift from incremental updates
        resid = y - &x.dot(&beta);
        gap = duality_gap_squared(data, &beta, &resid, lambda, ridge, omega);
        if gap <= GAP_TOL {
            return Ok(beta);
        }
        if n * p > 0 && !gap.is_finite() {
            break;
        }
    }
    Err(Error::SolverDidNotConverge { sweeps, gap })
}

// The randomized objective equals a plain Lasso on the augmented data
// (X; sqrt(ridge) I), (y; omega/sqrt(ridge)) up to a constant, which gives a
// duality gap without materializing the augmentation.
fn duality_gap_squared(
    data: &Dataset,
    beta: &Array1<f64>,
    resid: &Array1<f64>,
    lambda: f64,
    ridge: f64,
    omega: Option<&Array1<f64>>,
) -> f64 {
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let omega_term = omega.map_or(0.0, |w| w.dot(beta));
    let primal = 0.5 * resid.dot(resid) + 0.5 * ridge * beta.dot(beta) - omega_term + lambda * l1;

    // augmented residual: (resid, (omega - ridge beta)/sqrt(ridge))
    let mut corr = -data.x().t().dot(resid); // gradient of 0.5||y-Xb||^2
    if let Some(w) = omega {
        corr = corr - w;
    }
    corr = corr + &(beta * ridge);
    // corr = -X~^T r~; dual point is r~ scaled into the feasible box
    let max_corr = corr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_corr > lambda { lambda / max_corr } else { 1.0 };

    let aug_sq = if ridge > 0.0 {
        let w = omega.cloned().unwrap_or_else(|| Array1::zeros(beta.len()));
        let extra = (&w - &(beta * ridge)).mapv(|v| v * v).sum() / ridge;
        resid.dot(resid) + extra
    } else {
        resid.dot(resid)
    };
    let y_sq = if ridge > 0.0 {
        let w = omega.cloned().unwrap_or_else(|| Array1::zeros(beta.len()));
        data.y().dot(data.y()) + w.dot(&w) / ridge
    } else {
        data.y().dot(data.y())
    };
    let const_shift = if ridge > 0.0 {
        omega.map_or(0.0, |w| 0.5 * w.dot(w) / ridge)
    } else {
        0.0
    };
    // dual objective at theta = scale * r~:
    // 0.5||y~||^2 - 0.5||theta - y~||^2 where ||theta - y~||^2 expands as
    // (1-scale)^2 ||r~||^2 + cross terms with X~ beta; use the identity
    // y~ = r~ + X~ beta.
    // ||theta - y~||^2 = ||(scale-1) r~ - X~ beta||^2
    let xb_sq = {
        let xb = data.x().dot(beta);
        if ridge > 0.0 {
            xb.dot(&xb) + ridge * beta.dot(beta)
        } else {
            xb.dot(&xb)
        }
    };
    let cross = {
        // r~ . X~ beta = resid . X beta + (omega - ridge beta)/sqrt(r) . sqrt(r) beta
        let xb = data.x().dot(beta);
        let mut c = resid.dot(&xb);
        if ridge > 0.0 {
            let w = omega.cloned().unwrap_or_else(|| Array1::zeros(beta.len()));
            c += (&w - &(beta * ridge)).dot(beta);
        }
        c
    };
    let theta_minus_y_sq = (scale - 1.0) * (scale - 1.0) * aug_sq
        - 2.0 * (scale - 1.0) * cross
        + xb_sq;
    let dual = 0.5 * y_sq - 0.5 * theta_minus_y_sq - const_shift;
    primal - dual
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

// IRLS outer loop around weighted coordinate descent; stops on the KKT
// residual of the full logistic objective.
fn irls_logistic(
    data: &Dataset,
    lambda: f64,
    ridge: f64,
    omega: Option<&Array1<f64>>,
    warm: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    let x = data.x();
    let p = data.p();
    let mut beta = warm.cloned().unwrap_or_else(|| Array1::zeros(p));

    for _outer in 0..60 {
        let eta = x.dot(&beta);
        let pi = eta.mapv(sigmoid);
        let w = pi.mapv(|q| (q * (1.0 - q)).max(1e-6));
        // working response z = eta + (y - pi)/w
        let z = &eta + &((data.y() - &pi) / &w);

        // weighted CD: minimize 0.5 sum w_i (z_i - x_i b)^2 + lambda|b|_1
        //              + ridge/2 |b|^2 - omega^T b
        let wz_cols: Vec<f64> = (0..p)
            .map(|j| x.column(j).iter().zip(w.iter()).map(|(v, wi)| v * v * wi).sum())
            .collect();
        let mut r = &z - &x.dot(&beta);
        for _sweep in 0..200 {
            let mut max_move = 0.0f64;
            for j in 0..p {
                let old = beta[j];
                let xw: f64 = x
                    .column(j)
                    .iter()
                    .zip(w.iter())
                    .zip(r.iter())
                    .map(|((v, wi), ri)| v * wi * ri)
                    .sum();
                let rho = xw + wz_cols[j] * old + omega.map_or(0.0, |o| o[j]);
                let newv = soft_threshold(rho, lambda) / (wz_cols[j] + ridge);
                if newv != old {
                    let delta = newv - old;
                    for (ri, xi) in r.iter_mut().zip(x.column(j).iter()) {
                        *ri -= delta * xi;
                    }
                    beta[j] = newv;
                    max_move = max_move.max(delta.abs());
                }
            }
            if max_move < 1e-11 {
                break;
            }
        }

        // KKT check on the true objective
        let kkt = kkt_residual_at(data, &beta, lambda, ridge, omega, Loss::Logistic);
        if kkt <= KKT_TOL * 0.1 {
            return Ok(beta);
        }
    }
    let kkt = kkt_residual_at(data, &beta, lambda, ridge, omega, Loss::Logistic);
    if kkt <= KKT_TOL {
        return Ok(beta);
    }
    Err(Error::SolverDidNotConverge { sweeps: 60, gap: kkt })
}

fn kkt_residual_at(
    data: &Dataset,
    beta: &Array1<f64>,
    lambda: f64,
    ridge: f64,
    omega: Option<&Array1<f64>>,
    loss: Loss,
) -> f64 {
    let omega_owned = omega.cloned();
    let fit = LassoFit {
        beta: beta.clone(),
        active: (0..data.p()).filter(|&j| beta[j].abs() > ZERO_THRESHOLD).collect(),
        signs: vec![],
        subgrad_inactive: Array1::zeros(0),
        lambda,
        ridge,
        randomization: omega_owned,
        loss,
    };
    fit.kkt_residual(data)
}

fn extract_fit(
    data: &Dataset,
    mut beta: Array1<f64>,
    lambda: f64,
    ridge: f64,
    omega: Option<Array1<f64>>,
    loss: Loss,
) -> LassoFit {
    let p = data.p();
    for b in beta.iter_mut() {
        if b.abs() <= ZERO_THRESHOLD {
            *b = 0.0;
        }
    }
    let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
    let signs: Vec<f64> = active.iter().map(|&j| beta[j].signum()).collect();

    // inactive subgradient from stationarity, lambda-scaled and clamped to
    // the cube so boundary fuzz cannot violate the invariant
    let grad = smooth_gradient(data, &beta, ridge, omega.as_ref(), loss);
    let inactive: Vec<usize> = (0..p).filter(|&j| beta[j] == 0.0).collect();
    let sub = Array1::from_vec(
        inactive
            .iter()
            .map(|&j| (-grad[j]).clamp(-lambda, lambda))
            .collect(),
    );

    LassoFit {
        beta,
        active,
        signs,
        subgrad_inactive: sub,
        lambda,
        ridge,
        randomization: omega,
        loss,
    }
}

/// The data vector: OLS coefficients on the active columns plus the inactive
/// score, through which the fixed-lambda selection event acts.
#[derive(Debug, Clone)]
pub struct DataVector {
    pub ols_active: Array1<f64>,
    pub inactive_score: Array1<f64>,
}

impl DataVector {
    /// Concatenation (active block first, then inactive score).
    pub fn stacked(&self) -> Array1<f64> {
        let mut v = Array1::zeros(self.ols_active.len() + self.inactive_score.len());
        v.slice_mut(s![..self.ols_active.len()]).assign(&self.ols_active);
        v.slice_mut(s![self.ols_active.len()..]).assign(&self.inactive_score);
        v
    }
}

/// Computes the data vector for an active set under squared loss.
pub fn data_vector(data: &Dataset, active: &[usize]) -> Result<DataVector> {
    let p = data.p();
    let inactive: Vec<usize> = complement(active, p);
    if active.is_empty() {
        let score = data.x_cols(&inactive).t().dot(data.y());
        return Ok(DataVector { ols_active: Array1::zeros(0), inactive_score: score });
    }
    let xe = data.x_cols(active);
    let g = linalg::gram(&xe.view());
    let cond = linalg::sym_condition_number(&g.view())?;
    if !cond.is_finite() || cond >= 1e12 {
        return Err(Error::RankDeficient(format!(
            "X_E^T X_E condition number {cond:.3e}"
        )));
    }
    let xty = xe.t().dot(data.y());
    let ols = linalg::solve_psd(&g.view(), &xty.view())?;
    let resid = data.y() - &xe.dot(&ols);
    let score = data.x_cols(&inactive).t().dot(&resid);
    Ok(DataVector { ols_active: ols, inactive_score: score })
}

/// Logistic analogue: the MLE on (X_E, y) and the inactive score at it.
pub fn data_vector_logistic(data: &Dataset, active: &[usize]) -> Result<DataVector> {
    let p = data.p();
    let inactive: Vec<usize> = complement(active, p);
    if active.is_empty() {
        let pi = Array1::from_elem(data.n(), 0.5);
        let score = data.x_cols(&inactive).t().dot(&(data.y() - &pi));
        return Ok(DataVector { ols_active: Array1::zeros(0), inactive_score: score });
    }
    let xe = data.x_cols(active);
    let mle = logistic_mle(&xe, data.y())?;
    let pi = xe.dot(&mle).mapv(sigmoid);
    let score = data.x_cols(&inactive).t().dot(&(data.y() - &pi));
    Ok(DataVector { ols_active: mle, inactive_score: score })
}

/// Newton MLE for logistic regression without penalty.
pub fn logistic_mle(x: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let p = x.ncols();
    let mut beta = Array1::zeros(p);
    for _ in 0..100 {
        let eta = x.dot(&beta);
        let pi = eta.mapv(sigmoid);
        let grad = x.t().dot(&(&pi - y));
        if grad.iter().all(|g| g.abs() < 1e-10) {
            return Ok(beta);
        }
        let w = pi.mapv(|q| (q * (1.0 - q)).max(1e-10));
        let mut h = Array2::zeros((p, p));
        for i in 0..x.nrows() {
            let xi = x.row(i);
            for a in 0..p {
                for b in 0..p {
                    h[[a, b]] += w[i] * xi[a] * xi[b];
                }
            }
        }
        let step = linalg::solve_psd(&h.view(), &grad.view())?;
        let mut t = 1.0;
        let nll = |b: &Array1<f64>| -> f64 {
            let eta = x.dot(b);
            eta.iter().zip(y.iter()).map(|(e, yi)| softplus(*e) - yi * e).sum()
        };
        let base = nll(&beta);
        for _ in 0..30 {
            let cand = &beta - &(&step * t);
            if nll(&cand) <= base {
                beta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(beta)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Observed Fisher information X_E^T W X_E at the logistic MLE.
pub fn fisher_blocks(data: &Dataset, active: &[usize], mle: &Array1<f64>) -> (Array2<f64>, Array2<f64>) {
    let xe = data.x_cols(active);
    let inactive = complement(active, data.p());
    let xm = data.x_cols(&inactive);
    let w = xe.dot(mle).mapv(|e| {
        let q = sigmoid(e);
        q * (1.0 - q)
    });
    let mut xe_w = xe.clone();
    for (i, mut row) in xe_w.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * w[i]);
    }
    let i_e = xe.t().dot(&xe_w);
    let i_me = xm.t().dot(&xe_w);
    (i_e, i_me)
}

pub fn complement(active: &[usize], p: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(p - active.len());
    let mut it = active.iter().peekable();
    for j in 0..p {
        if it.peek() == Some(&&j) {
            it.next();
        } else {
            out.push(j);
        }
    }
    out
}

/// The fixed-lambda Lasso selection event as affine constraints on the data
/// vector (active block first, then inactive score): sign constraints on the
/// active OLS block and a two-sided box on the shifted inactive score,
/// 2p - |E| rows in total.
pub fn selection_event_fixed_lambda(fit: &LassoFit, data: &Dataset) -> Result<AffineEvent> {
    let p = data.p();
    let e = fit.active.len();
    let lambda = fit.lambda;
    let m = p - e;
    let mut a = Array2::zeros((e + 2 * m, p));
    let mut off = Array1::zeros(e + 2 * m);

    let shift = if e > 0 {
        let xe = data.x_cols(&fit.active);
        let g = linalg::gram(&xe.view());
        let s = Array1::from_vec(fit.signs.clone());
        let ginv_s = linalg::solve_psd(&g.view(), &s.view())?;
        // sign rows: -s_j (ols_j) <= -lambda s_j ((X_E^T X_E)^{-1} s)_j
        for i in 0..e {
            a[[i, i]] = -fit.signs[i];
            off[i] = -lambda * fit.signs[i] * ginv_s[i];
        }
        // X_{-E}^T X_E (X_E^T X_E)^{-1} s
        let xm = data.x_cols(&fit.inactive(p));
        let xme = xm.t().dot(&xe);
        Some(xme.dot(&ginv_s))
    } else {
        None
    };

    for j in 0..m {
        let t = shift.as_ref().map_or(0.0, |v| v[j]);
        a[[e + j, e + j]] = 1.0;
        off[e + j] = lambda * (1.0 - t);
        a[[e + m + j, e + j]] = -1.0;
        off[e + m + j] = lambda * (1.0 + t);
    }
    AffineEvent::new(a, off)
}

/// The randomization reconstruction map: at a fit with active set E,
///
/// `omega = M d + B beta_E + (lambda s_E ; u_{-E}) + remainder`
///
/// in (E, -E)-permuted coordinates, where `d` is the stacked data vector.
/// For squared loss the remainder vanishes; for logistic loss it carries the
/// (constant) linearization error at the observed fit, so the identity is
/// exact at the observation in both cases.
#[derive(Debug, Clone)]
pub struct KktMap {
    pub m: Array2<f64>,
    pub b: Array2<f64>,
    /// Constant correction (zero for squared loss).
    pub remainder: Array1<f64>,
    /// Natural column indices in KKT order: active ascending, then inactive.
    pub order: Vec<usize>,
    pub lambda: f64,
}

impl KktMap {
    pub fn reconstruct_omega(
        &self,
        d: &Array1<f64>,
        beta_active: &Array1<f64>,
        signs: &[f64],
        u_inactive: &Array1<f64>,
    ) -> Array1<f64> {
        let e = beta_active.len();
        let mut pen = Array1::zeros(self.m.nrows());
        for i in 0..e {
            pen[i] = self.lambda * signs[i];
        }
        for (i, u) in u_inactive.iter().enumerate() {
            pen[e + i] = *u;
        }
        self.m.dot(d) + self.b.dot(beta_active) + pen + &self.remainder
    }

    /// Reorders a natural-order p-vector into KKT (E, -E) order.
    pub fn permute(&self, v: &Array1<f64>) -> Array1<f64> {
        Array1::from_vec(self.order.iter().map(|&j| v[j]).collect())
    }
}

/// Builds the reconstruction map for a randomized fit. Squared loss uses the
/// exact Gram blocks; logistic loss substitutes the observed Fisher
/// information at the constrained MLE.
pub fn kkt_map(fit: &LassoFit, data: &Dataset) -> Result<KktMap> {
    if fit.randomization.is_none() {
        return Err(Error::InvalidInput("KKT map requires a randomized fit".into()));
    }
    let p = data.p();
    let e = fit.active.len();
    let inactive = fit.inactive(p);

    let (g_e, g_me, dvec) = match fit.loss {
        Loss::Squared => {
            let xe = data.x_cols(&fit.active);
            let xm = data.x_cols(&inactive);
            let g_e = linalg::gram(&xe.view());
            let g_me = xm.t().dot(&xe);
            (g_e, g_me, data_vector(data, &fit.active)?)
        }
        Loss::Logistic => {
            let dv = data_vector_logistic(data, &fit.active)?;
            let (i_e, i_me) = fisher_blocks(data, &fit.active, &dv.ols_active);
            (i_e, i_me, dv)
        }
    };
    if e > 0 {
        let cond = linalg::sym_condition_number(&g_e.view())?;
        if !cond.is_finite() || cond >= 1e12 {
            return Err(Error::RankDeficient(format!("active Gram condition {cond:.3e}")));
        }
    }

    // The stationarity identity needs the negated Gram acting on the data
    // vector: M d fills in -X^T y (or the Fisher analogue).
    let mut m = Array2::zeros((p, p));
    m.slice_mut(s![..e, ..e]).assign(&(&g_e * -1.0));
    m.slice_mut(s![e.., ..e]).assign(&(&g_me * -1.0));
    for j in 0..p - e {
        m[[e + j, e + j]] = -1.0;
    }
    let mut b = Array2::zeros((p, e));
    b.slice_mut(s![..e, ..]).assign(&g_e);
    b.slice_mut(s![e.., ..]).assign(&g_me);
    for i in 0..e {
        b[[i, i]] += fit.ridge;
    }

    let mut order = fit.active.clone();
    order.extend(inactive.iter().copied());

    let mut map = KktMap { m, b, remainder: Array1::zeros(p), order, lambda: fit.lambda };

    // pin the identity exactly at the observed fit
    let beta_active = Array1::from_vec(fit.active.iter().map(|&j| fit.beta[j]).collect());
    let omega_perm = map.permute(fit.randomization.as_ref().unwrap());
    let rec = map.reconstruct_omega(&dvec.stacked(), &beta_active, &fit.signs, &fit.subgrad_inactive);
    let remainder = &omega_perm - &rec;
    match fit.loss {
        Loss::Squared => {
            // algebraic identity; anything large signals a bug upstream
            if remainder.iter().any(|r| r.abs() > 1e-5) {
                return Err(Error::InvalidInput(format!(
                    "KKT reconstruction residual {:.3e} for squared loss",
                    remainder.iter().fold(0.0f64, |m, r| m.max(r.abs()))
                )));
            }
            map.remainder = remainder;
        }
        Loss::Logistic => {
            map.remainder = remainder;
        }
    }
    Ok(map)
}
