//! Non-randomized selective pivots: the 1-D truncated-Gaussian closed form,
//! a hit-and-run Monte Carlo pivot for vector targets, pivot-inversion
//! confidence intervals, and the combined Lasso + randomized-CV event.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::cv::{argmin_event, CvCurve};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::event::{stack_events_block_diag, AffineEvent};
use crate::lasso::{self, LassoFit};
use crate::law::{decompose_on_target, JointGaussianLaw};
use crate::linalg;
use crate::stats;

/// Ordered list of disjoint closed intervals on the real line (endpoints may
/// be infinite); always contains the observed statistic.
#[derive(Debug, Clone)]
pub struct TruncationRegion {
    pub intervals: Vec<(f64, f64)>,
}

impl TruncationRegion {
    pub fn whole_line() -> Self {
        TruncationRegion { intervals: vec![(f64::NEG_INFINITY, f64::INFINITY)] }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| t >= a && t <= b)
    }

    fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::EmptyRegion);
        }
        for w in self.intervals.windows(2) {
            if w[0].1 >= w[1].0 {
                return Err(Error::InvalidInput("intervals must be disjoint and increasing".into()));
            }
        }
        Ok(())
    }
}

/// Solves each affine row for the scalar variable and intersects the
/// half-lines. The observed value must satisfy the event.
pub fn truncation_region_1d(event: &AffineEvent, t_obs: f64) -> Result<TruncationRegion> {
    if event.dim() != 1 {
        return Err(Error::DimensionMismatch("event is not over a scalar".into()));
    }
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let coef_tol = 1e-12;
    for i in 0..event.rows() {
        let c = event.matrix()[[i, 0]];
        let b = event.offset()[i];
        if c > coef_tol {
            hi = hi.min(b / c);
        } else if c < -coef_tol {
            lo = lo.max(b / c);
        } else if b < -1e-9 {
            return Err(Error::EmptyRegion);
        }
    }
    if lo > hi {
        return Err(Error::EmptyRegion);
    }
    // numerical fuzz right at a constraint boundary: admit the observation
    let slack = 1e-8 * (1.0 + t_obs.abs());
    if t_obs < lo - slack || t_obs > hi + slack {
        return Err(Error::EmptyRegion);
    }
    let region = TruncationRegion { intervals: vec![(lo.min(t_obs), hi.max(t_obs))] };
    region.validate()?;
    Ok(region)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PivotMethod {
    ClosedForm1d,
    MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct PivotResult {
    pub value: f64,
    pub method: PivotMethod,
    pub mc_error: Option<f64>,
}

// log of P(Z in region), Z ~ N(theta0, sigma^2), by log-sum-exp over intervals
fn log_region_prob(region: &TruncationRegion, theta0: f64, sigma: f64) -> f64 {
    let logs: Vec<f64> = region
        .intervals
        .iter()
        .map(|&(a, b)| stats::log_norm_interval_prob((a - theta0) / sigma, (b - theta0) / sigma))
        .collect();
    log_sum_exp(&logs)
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn intersect_with(region: &TruncationRegion, lo: f64, hi: f64) -> TruncationRegion {
    let mut out = Vec::new();
    for &(a, b) in &region.intervals {
        let l = a.max(lo);
        let h = b.min(hi);
        if l <= h {
            out.push((l, h));
        }
    }
    TruncationRegion { intervals: out }
}

/// Two-sided truncated-Gaussian pivot:
/// `P(|Z - theta0| <= |T - theta0| | Z in region)` for Z ~ N(theta0, sigma^2).
pub fn tg_pivot_1d(
    t_obs: f64,
    theta0: f64,
    sigma: f64,
    region: &TruncationRegion,
) -> Result<PivotResult> {
    if !region.contains(t_obs) {
        return Err(Error::InvalidInput("region does not contain the observation".into()));
    }
    // all arithmetic stays in log space, so a region probability far below
    // the smallest positive double is still usable; only a numerically empty
    // region aborts
    let log_den = log_region_prob(region, theta0, sigma);
    if !log_den.is_finite() {
        return Err(Error::RegionUnderflow);
    }
    let r = (t_obs - theta0).abs();
    let ball = intersect_with(region, theta0 - r, theta0 + r);
    let value = if ball.intervals.is_empty() {
        0.0
    } else {
        let log_num = log_region_prob(&ball, theta0, sigma);
        (log_num - log_den).exp().clamp(0.0, 1.0)
    };
    Ok(PivotResult { value, method: PivotMethod::ClosedForm1d, mc_error: None })
}

/// One-sided (CDF) truncated-Gaussian pivot:
/// `P(Z <= T | Z in region)`, monotone decreasing in theta0 and therefore the
/// quantity inverted for confidence intervals.
pub fn tg_cdf_1d(
    t_obs: f64,
    theta0: f64,
    sigma: f64,
    region: &TruncationRegion,
) -> Result<f64> {
    if !region.contains(t_obs) {
        return Err(Error::InvalidInput("region does not contain the observation".into()));
    }
    let log_den = log_region_prob(region, theta0, sigma);
    if !log_den.is_finite() {
        return Err(Error::RegionUnderflow);
    }
    let lower = intersect_with(region, f64::NEG_INFINITY, t_obs);
    if lower.intervals.is_empty() {
        return Ok(0.0);
    }
    let log_num = log_region_prob(&lower, theta0, sigma);
    Ok((log_num - log_den).exp().clamp(0.0, 1.0))
}

/// Hit-and-run sampler configuration for the Monte Carlo pivot.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub burn_in_sweeps: usize,
    pub thin: usize,
    pub kept: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { burn_in_sweeps: 50, thin: 5, kept: 20_000 }
    }
}

/// Monte Carlo selective pivot for a vector target: estimates
/// `P(||Z - theta0|| <= ||T - theta0|| | A Z <= a)` for Z ~ N(theta0, Sigma_T)
/// by hit-and-run over the polyhedron, started at its Chebyshev center.
pub fn selective_pivot_mc<R: Rng>(
    law: &JointGaussianLaw,
    event_t: &AffineEvent,
    t_obs: &ArrayView1<f64>,
    theta0: &ArrayView1<f64>,
    config: &McConfig,
    rng: &mut R,
) -> Result<PivotResult> {
    let d = law.t_dim();
    if event_t.dim() != d || t_obs.len() != d || theta0.len() != d {
        return Err(Error::DimensionMismatch("pivot dimensions disagree".into()));
    }
    let sigma_t = law.sigma_t().to_owned();
    let l = linalg::cholesky_jitter(&sigma_t.view())?;

    // u-space: z = theta0 + L u, standard normal target
    let g = event_t.matrix().dot(&l);
    let h = event_t.offset() - &event_t.matrix().dot(theta0);
    let diff = t_obs.to_owned() - theta0;
    let u_obs = linalg::forward_sub(&l.view(), &diff.view());
    if !AffineEvent::new(g.clone(), h.clone())?.contains_with_tol(&u_obs.view(), 1e-7) {
        return Err(Error::InfeasibleStart);
    }
    let start = linalg::chebyshev_center(&g.view(), &h.view(), &u_obs.view(), 1e-7)?;

    let radius = diff.dot(&diff).sqrt();
    let draws = hit_and_run_gaussian(&g, &h, &start, config, rng);
    let mut inside = Vec::with_capacity(draws.len());
    for u in &draws {
        let z = l.dot(u);
        inside.push(if z.dot(&z).sqrt() <= radius { 1.0 } else { 0.0 });
    }
    let (value, se) = batch_mean_se(&inside);
    Ok(PivotResult { value, method: PivotMethod::MonteCarlo, mc_error: Some(se) })
}

// hit-and-run for a standard normal restricted to {u : G u <= h}
fn hit_and_run_gaussian<R: Rng>(
    g: &Array2<f64>,
    h: &Array1<f64>,
    start: &Array1<f64>,
    config: &McConfig,
    rng: &mut R,
) -> Vec<Array1<f64>> {
    let d = start.len();
    let m = g.nrows();
    let mut u = start.clone();
    let mut gu = g.dot(&u);
    let total = config.burn_in_sweeps * d + config.kept * config.thin;
    let mut draws = Vec::with_capacity(config.kept);
    let mut dir = Array1::zeros(d);

    for step in 0..total {
        // uniform direction on the sphere
        loop {
            let mut norm = 0.0;
            for v in dir.iter_mut() {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                *v = z;
                norm += z * z;
            }
            if norm > 1e-12 {
                dir.mapv_inplace(|v| v / norm.sqrt());
                break;
            }
        }
        let gd = g.dot(&dir);
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        for i in 0..m {
            let s = h[i] - gu[i];
            if gd[i] > 1e-14 {
                t_hi = t_hi.min(s / gd[i]);
            } else if gd[i] < -1e-14 {
                t_lo = t_lo.max(s / gd[i]);
            }
        }
        if t_lo > t_hi {
            continue; // numerically stuck at a face; resample direction
        }
        let mu_t = -dir.dot(&u);
        let t = if t_lo == f64::NEG_INFINITY && t_hi == f64::INFINITY {
            mu_t + {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                z
            }
        } else {
            mu_t + stats::sample_truncnorm(t_lo - mu_t, t_hi - mu_t, rng)
        };
        u.scaled_add(t, &dir);
        gu.scaled_add(t, &gd);

        let after_burn = step >= config.burn_in_sweeps * d;
        if after_burn && (step - config.burn_in_sweeps * d) % config.thin == 0 && draws.len() < config.kept
        {
            draws.push(u.clone());
        }
    }
    draws
}

// batch-means standard error for an autocorrelated 0/1 chain
fn batch_mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let nb = (n as f64).sqrt().floor() as usize;
    if nb < 2 {
        return (mean, 0.5);
    }
    let bs = n / nb;
    let mut batch = Vec::with_capacity(nb);
    for b in 0..nb {
        let s: f64 = xs[b * bs..(b + 1) * bs].iter().sum();
        batch.push(s / bs as f64);
    }
    let se = (stats::variance(&batch) / nb as f64).sqrt();
    (mean, se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMethod {
    Bisection,
    GridHull,
}

#[derive(Debug, Clone)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// Set when the search bracket was exhausted on that side.
    pub lo_exhausted: bool,
    pub hi_exhausted: bool,
    pub method: InversionMethod,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn covers(&self, theta: f64) -> bool {
        theta >= self.lo && theta <= self.hi
    }
}

/// Inverts a monotone-decreasing pivot into the equal-tailed interval
/// `{theta : alpha/2 <= pivot(theta) <= 1 - alpha/2}` by bisection over a
/// bracket of +-20 pre-selection standard deviations around the observation.
/// If a 200-point scan shows the pivot is not monotone enough, falls back to
/// the convex hull of the accepted grid.
pub fn invert_pivot_ci<F: FnMut(f64) -> f64>(
    mut pivot_fn: F,
    t_obs: f64,
    sigma: f64,
    alpha: f64,
) -> ConfidenceInterval {
    let lo_b = t_obs - 20.0 * sigma;
    let hi_b = t_obs + 20.0 * sigma;
    let tol = 1e-4 * sigma;

    // monotonicity scan
    let scan_n = 200;
    let mut grid_vals = Vec::with_capacity(scan_n + 1);
    for i in 0..=scan_n {
        let th = lo_b + (hi_b - lo_b) * i as f64 / scan_n as f64;
        grid_vals.push((th, pivot_fn(th)));
    }
    let mut violations = 0;
    for w in grid_vals.windows(2) {
        if w[1].1 > w[0].1 + 1e-6 {
            violations += 1;
        }
    }
    if violations > 2 {
        let accepted: Vec<f64> = grid_vals
            .iter()
            .filter(|(_, p)| *p >= alpha / 2.0 && *p <= 1.0 - alpha / 2.0)
            .map(|(t, _)| *t)
            .collect();
        let (lo, hi) = if accepted.is_empty() {
            (t_obs, t_obs)
        } else {
            (accepted[0], *accepted.last().unwrap())
        };
        return ConfidenceInterval {
            lo,
            hi,
            lo_exhausted: false,
            hi_exhausted: false,
            method: InversionMethod::GridHull,
        };
    }

    // pivot decreasing in theta: lower endpoint where it crosses 1 - alpha/2
    fn solve<F: FnMut(f64) -> f64>(
        pivot_fn: &mut F,
        target: f64,
        mut a: f64,
        mut b: f64,
        pa: f64,
        pb: f64,
        tol: f64,
    ) -> Option<f64> {
        // wants pivot(a) >= target >= pivot(b)
        if pa < target || pb > target {
            return None;
        }
        for _ in 0..200 {
            if b - a <= tol {
                break;
            }
            let mid = 0.5 * (a + b);
            if pivot_fn(mid) >= target {
                a = mid;
            } else {
                b = mid;
            }
        }
        Some(0.5 * (a + b))
    }

    let p_lo = grid_vals[0].1;
    let p_hi = grid_vals[scan_n].1;

    let (lo, lo_exhausted) =
        match solve(&mut pivot_fn, 1.0 - alpha / 2.0, lo_b, hi_b, p_lo, p_hi, tol) {
            Some(v) => (v, false),
            None => (lo_b, true),
        };
    let (hi, hi_exhausted) = match solve(&mut pivot_fn, alpha / 2.0, lo_b, hi_b, p_lo, p_hi, tol) {
        Some(v) => (v, false),
        None => (hi_b, true),
    };
    ConfidenceInterval { lo, hi, lo_exhausted, hi_exhausted, method: InversionMethod::Bisection }
}

/// The combined event of Lasso selection at the CV-chosen penalty plus the
/// randomized-CV argmin, written over the target T = OLS on the active set.
///
/// The law partitions as (T, D, Err_R) with D on the mean scale; the output
/// rows stack the rescaled fixed-lambda event with the argmin event and the
/// observed T always satisfies it (the residual reconstructs the nuisance).
pub fn lasso_cv_event(
    fit: &LassoFit,
    data: &Dataset,
    curve: &CvCurve,
    law: &JointGaussianLaw,
) -> Result<AffineEvent> {
    let e = fit.active.len();
    let p = data.p();
    let l = curve.len();
    if law.t_dim() != e || law.dim() != e + p + l {
        return Err(Error::DimensionMismatch(format!(
            "law dims ({}, {}) do not match |E|={e}, p={p}, L={l}",
            law.t_dim(),
            law.dim()
        )));
    }
    let dv = if fit.loss == lasso::Loss::Logistic {
        lasso::data_vector_logistic(data, &fit.active)?
    } else {
        lasso::data_vector(data, &fit.active)?
    };
    let raw_event = lasso::selection_event_fixed_lambda(fit, data)?;
    // raw event acts on (ols, score); the law carries score/n
    let mut scales = vec![1.0; p];
    for s in scales.iter_mut().skip(e) {
        *s = data.n() as f64;
    }
    let event_mean = raw_event.rescale_columns(&scales)?;
    let cv_ev = argmin_event(curve)?;
    let joint = stack_events_block_diag(&[event_mean, cv_ev.event()])?;

    let t_obs = dv.ols_active.clone();
    let mut d_obs = Array1::zeros(p + l);
    for i in 0..e {
        d_obs[i] = dv.ols_active[i];
    }
    for j in 0..p - e {
        d_obs[e + j] = dv.inactive_score[j] / data.n() as f64;
    }
    for li in 0..l {
        d_obs[p + li] = curve.randomized[li];
    }
    let dec = decompose_on_target(law, &t_obs.view(), &d_obs.view())?;
    let out = joint.substitute(&dec.regression_map, &dec.residual)?;
    if !out.contains_with_tol(&t_obs.view(), 1e-6) {
        return Err(Error::ObservedOutsideEvent);
    }
    Ok(out)
}

/// Restriction of an event over a stacked statistic to one scalar coordinate,
/// conditioning on the residual of the remaining coordinates: the Lee-et-al
/// construction that turns any affine event into a 1-D truncation region for
/// coordinate `j`.
pub fn scalar_coordinate_region(
    stat_obs: &ArrayView1<f64>,
    cov: &Array2<f64>,
    event: &AffineEvent,
    j: usize,
) -> Result<(TruncationRegion, f64)> {
    let dim = stat_obs.len();
    if event.dim() != dim || cov.nrows() != dim {
        return Err(Error::DimensionMismatch("stat/cov/event disagree".into()));
    }
    let var_j = cov[[j, j]];
    if var_j <= 0.0 {
        return Err(Error::DegenerateTargetCovariance { cond: f64::INFINITY });
    }
    let c = cov.column(j).to_owned() / var_j;
    let t = stat_obs[j];
    let resid = stat_obs.to_owned() - &c * t;
    let a_c = event.matrix().dot(&c);
    let off = event.offset() - &event.matrix().dot(&resid);
    let scalar_event = AffineEvent::new(
        a_c.insert_axis(ndarray::Axis(1)),
        off,
    )?;
    let region = truncation_region_1d(&scalar_event, t)?;
    Ok((region, var_j.sqrt()))
}
