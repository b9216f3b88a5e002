//! Projected Langevin MCMC over constrained selective densities, the cone
//! projections the moves need, cube marginalization of the inactive
//! subgradient, the randomized selective pivot, and importance-sampling
//! tilts for confidence intervals.
//!
//! A density is a Gaussian log-likelihood on the target block times a
//! product of log-concave randomization views, each an affine map of the
//! state; constraints live in per-block projections.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::stats;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

// ---------------------------------------------------------------------------
// cone projections (used by the per-block constraint projections)

/// Euclidean projection onto `{x : x_winner <= x_j for all j}`: fix the
/// winner value v, clip the others to max(v, z_j), and root-find the
/// piecewise-linear derivative in v.
pub fn project_min_cone(z: &Array1<f64>, winner: usize) -> Array1<f64> {
    let l = z.len();
    debug_assert!(winner < l);
    let mut others: Vec<f64> = (0..l).filter(|&j| j != winner).map(|j| z[j]).collect();
    others.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // already feasible
    if others.first().map_or(true, |&m| z[winner] <= m) {
        return z.clone();
    }
    // on a segment where the active set is the first m sorted others,
    // the stationary point is the mean of z_winner and those values
    let mut prefix = 0.0;
    let mut v = z[winner];
    for m in 0..=others.len() {
        let cand = (z[winner] + prefix) / (m as f64 + 1.0);
        let seg_lo = if m == 0 { f64::NEG_INFINITY } else { others[m - 1] };
        let seg_hi = if m == others.len() { f64::INFINITY } else { others[m] };
        if cand >= seg_lo && cand <= seg_hi {
            v = cand;
            break;
        }
        if m < others.len() {
            prefix += others[m];
        }
    }
    let mut out = z.clone();
    out[winner] = v;
    for j in 0..l {
        if j != winner {
            out[j] = z[j].max(v);
        }
    }
    out
}

/// Euclidean projection onto `{x : x_j <= x_l for all j in winners, l not in
/// winners}` (the K-smallest cone): search the separating value v with
/// x_j = min(v, z_j) on the winner set and max(v, z_j) off it.
pub fn project_k_smallest_cone(z: &Array1<f64>, winners: &[usize]) -> Array1<f64> {
    let l = z.len();
    let is_w: Vec<bool> = {
        let mut b = vec![false; l];
        for &j in winners {
            b[j] = true;
        }
        b
    };
    let max_w = winners.iter().map(|&j| z[j]).fold(f64::NEG_INFINITY, f64::max);
    let min_o = (0..l)
        .filter(|j| !is_w[*j])
        .map(|j| z[j])
        .fold(f64::INFINITY, f64::min);
    if max_w <= min_o {
        return z.clone();
    }
    // derivative of the separating-value objective:
    // h'(v) = 2 sum_{j in W, z_j >= v} (v - z_j) + 2 sum_{j notin W, z_j <= v} (v - z_j)
    let mut breaks: Vec<f64> = z.to_vec();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let hprime = |v: f64| -> f64 {
        let mut s = 0.0;
        for j in 0..l {
            if is_w[j] && z[j] >= v {
                s += v - z[j];
            } else if !is_w[j] && z[j] <= v {
                s += v - z[j];
            }
        }
        2.0 * s
    };
    // locate the sign change over the breakpoints, then solve the linear
    // piece exactly
    let mut v = breaks[0];
    let mut prev = breaks[0];
    let mut found = false;
    for &bk in &breaks {
        if hprime(bk) >= 0.0 {
            // root in [prev, bk]: on this piece h' is linear
            let (mut cnt, mut sum) = (0.0, 0.0);
            let mid = 0.5 * (prev + bk);
            for j in 0..l {
                if is_w[j] && z[j] >= mid {
                    cnt += 1.0;
                    sum += z[j];
                } else if !is_w[j] && z[j] <= mid {
                    cnt += 1.0;
                    sum += z[j];
                }
            }
            v = if cnt > 0.0 { sum / cnt } else { mid };
            found = true;
            break;
        }
        prev = bk;
    }
    if !found {
        // h' negative at every breakpoint: root beyond the last one, where
        // all winners are inactive and all others active
        let (mut cnt, mut sum) = (0.0, 0.0);
        for j in 0..l {
            if !is_w[j] {
                cnt += 1.0;
                sum += z[j];
            }
        }
        v = if cnt > 0.0 { sum / cnt } else { *breaks.last().unwrap() };
    }
    let mut out = z.clone();
    for j in 0..l {
        out[j] = if is_w[j] { z[j].min(v) } else { z[j].max(v) };
    }
    out
}

/// Euclidean projection onto the forward-stepwise normal cone
/// `{z : sign * z_apex >= |z_j| for all j}`.
pub fn project_linf_cone(z: &Array1<f64>, apex: usize, sign: f64) -> Array1<f64> {
    let a = sign * z[apex];
    let mut mags: Vec<f64> = (0..z.len()).filter(|&j| j != apex).map(|j| z[j].abs()).collect();
    if mags.iter().all(|&m| m <= a) {
        return z.clone();
    }
    mags.sort_by(|x, y| y.partial_cmp(x).unwrap()); // descending
    // minimize (t - a)^2 + sum_{m_j > t} (m_j - t)^2 over t >= 0
    let mut t = a.max(0.0);
    let mut prefix = 0.0;
    for k in 0..=mags.len() {
        let cand = (a + prefix) / (k as f64 + 1.0);
        let seg_hi = if k == 0 { f64::INFINITY } else { mags[k - 1] };
        let seg_lo = if k == mags.len() { f64::NEG_INFINITY } else { mags[k] };
        if cand >= seg_lo && cand <= seg_hi {
            t = cand;
            break;
        }
        if k < mags.len() {
            prefix += mags[k];
        }
    }
    let t = t.max(0.0);
    let mut out = z.clone();
    out[apex] = sign * t;
    for j in 0..z.len() {
        if j != apex {
            out[j] = out[j].clamp(-t, t);
        }
    }
    out
}

/// Dykstra's alternating projections onto an intersection of halfspaces
/// `{x : A x <= b}`; used for the forward-stepwise stopping region whose
/// projection has no closed form.
pub fn project_polyhedron(a: &Array2<f64>, b: &Array1<f64>, z: &Array1<f64>) -> Array1<f64> {
    let m = a.nrows();
    if m == 0 {
        return z.clone();
    }
    let norms2: Vec<f64> = (0..m).map(|i| a.row(i).dot(&a.row(i)).max(1e-300)).collect();
    let mut x = z.clone();
    let mut corrections = vec![Array1::<f64>::zeros(z.len()); m];
    for _pass in 0..600 {
        let mut worst = 0.0f64;
        for i in 0..m {
            let y = &x + &corrections[i];
            let viol = (a.row(i).dot(&y) - b[i]) / norms2[i];
            let newx = if viol > 0.0 { &y - &(&a.row(i).to_owned() * viol) } else { y.clone() };
            corrections[i] = &y - &newx;
            x = newx;
        }
        for i in 0..m {
            worst = worst.max(a.row(i).dot(&x) - b[i]);
        }
        if worst <= 1e-12 {
            break;
        }
    }
    x
}

// ---------------------------------------------------------------------------
// constraint blocks

#[derive(Debug, Clone)]
pub enum ConstraintBlock {
    Free { dim: usize },
    /// Coordinates clamped into the open orthant given by the signs; after
    /// clipping, a 1e-12 nudge keeps gradients finite at the face.
    SignOrthant { signs: Vec<f64> },
    Cube { half_width: f64, dim: usize },
    MinCone { winner: usize, dim: usize },
    KSmallestCone { winners: Vec<usize>, dim: usize },
    LinfCone { apex: usize, sign: f64, dim: usize },
    Polyhedron { a: Array2<f64>, b: Array1<f64> },
}

impl ConstraintBlock {
    pub fn dim(&self) -> usize {
        match self {
            ConstraintBlock::Free { dim } => *dim,
            ConstraintBlock::SignOrthant { signs } => signs.len(),
            ConstraintBlock::Cube { dim, .. } => *dim,
            ConstraintBlock::MinCone { dim, .. } => *dim,
            ConstraintBlock::KSmallestCone { dim, .. } => *dim,
            ConstraintBlock::LinfCone { dim, .. } => *dim,
            ConstraintBlock::Polyhedron { a, .. } => a.ncols(),
        }
    }

    pub fn project(&self, x: &mut Array1<f64>) {
        match self {
            ConstraintBlock::Free { .. } => {}
            ConstraintBlock::SignOrthant { signs } => {
                for (v, s) in x.iter_mut().zip(signs) {
                    if *v * s < 1e-12 {
                        *v = s * 1e-12;
                    }
                }
            }
            ConstraintBlock::Cube { half_width, .. } => {
                for v in x.iter_mut() {
                    *v = v.clamp(-half_width, *half_width);
                }
            }
            ConstraintBlock::MinCone { winner, .. } => {
                let p = project_min_cone(x, *winner);
                x.assign(&p);
            }
            ConstraintBlock::KSmallestCone { winners, .. } => {
                let p = project_k_smallest_cone(x, winners);
                x.assign(&p);
            }
            ConstraintBlock::LinfCone { apex, sign, .. } => {
                let p = project_linf_cone(x, *apex, *sign);
                x.assign(&p);
            }
            ConstraintBlock::Polyhedron { a, b } => {
                let p = project_polyhedron(a, b, x);
                x.assign(&p);
            }
        }
    }

    pub fn satisfied(&self, x: &Array1<f64>, tol: f64) -> bool {
        match self {
            ConstraintBlock::Free { .. } => true,
            ConstraintBlock::SignOrthant { signs } => {
                x.iter().zip(signs).all(|(v, s)| v * s >= 0.0)
            }
            ConstraintBlock::Cube { half_width, .. } => {
                x.iter().all(|v| v.abs() <= half_width + tol)
            }
            ConstraintBlock::MinCone { winner, .. } => x.iter().all(|v| x[*winner] <= v + tol),
            ConstraintBlock::KSmallestCone { winners, .. } => {
                let mut is_w = vec![false; x.len()];
                for &j in winners {
                    is_w[j] = true;
                }
                let mx = winners.iter().map(|&j| x[j]).fold(f64::NEG_INFINITY, f64::max);
                (0..x.len()).filter(|j| !is_w[*j]).all(|j| mx <= x[j] + tol)
            }
            ConstraintBlock::LinfCone { apex, sign, .. } => {
                let a = sign * x[*apex];
                x.iter().enumerate().all(|(j, v)| j == *apex || v.abs() <= a + tol)
            }
            ConstraintBlock::Polyhedron { a, b } => {
                let v = a.dot(x) - b;
                v.iter().all(|r| *r <= tol)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// randomization views

#[derive(Debug, Clone)]
pub enum ViewKind {
    /// iid N(0, sigma^2) coordinates.
    GaussianIid { sigma: f64 },
    /// N(0, Sigma) with a precomputed precision matrix.
    GaussianMv { precision: Array2<f64>, log_norm_const: f64 },
    /// Per-coordinate integral of an N(c_j, sigma^2) randomization over the
    /// cube [-half_width, half_width]: the analytic marginalization of the
    /// inactive subgradient.
    CubeMarginal { sigma: f64, half_width: f64 },
}

/// One randomization query on the data: a log-concave density evaluated at
/// an affine function of the sampler state.
#[derive(Debug, Clone)]
pub struct RandomizationView {
    pub map: Array2<f64>,
    pub offset: Array1<f64>,
    pub kind: ViewKind,
}

impl RandomizationView {
    pub fn gaussian_mv(map: Array2<f64>, offset: Array1<f64>, cov: &Array2<f64>) -> Result<Self> {
        let precision = linalg::invert_psd(&cov.view())?;
        let (vals, _) = linalg::sym_eigh(&cov.view())?;
        let log_det: f64 = vals.iter().map(|v| v.max(1e-300).ln()).sum();
        let d = cov.nrows() as f64;
        Ok(RandomizationView {
            map,
            offset,
            kind: ViewKind::GaussianMv {
                precision,
                log_norm_const: -0.5 * log_det - d * LN_SQRT_2PI,
            },
        })
    }

    fn value(&self, state: &Array1<f64>) -> Array1<f64> {
        self.map.dot(state) + &self.offset
    }

    pub fn log_density(&self, state: &Array1<f64>) -> f64 {
        let v = self.value(state);
        match &self.kind {
            ViewKind::GaussianIid { sigma } => v
                .iter()
                .map(|x| -0.5 * (x / sigma) * (x / sigma) - sigma.ln() - LN_SQRT_2PI)
                .sum(),
            ViewKind::GaussianMv { precision, log_norm_const } => {
                -0.5 * v.dot(&precision.dot(&v)) + log_norm_const
            }
            ViewKind::CubeMarginal { sigma, half_width } => v
                .iter()
                .map(|c| {
                    stats::log_norm_interval_prob((-half_width - c) / sigma, (half_width - c) / sigma)
                })
                .sum(),
        }
    }

    /// Accumulates map^T (d log g / d v) into `grad`.
    pub fn accumulate_grad(&self, state: &Array1<f64>, grad: &mut Array1<f64>) {
        let v = self.value(state);
        let dv: Array1<f64> = match &self.kind {
            ViewKind::GaussianIid { sigma } => v.mapv(|x| -x / (sigma * sigma)),
            ViewKind::GaussianMv { precision, .. } => precision.dot(&v) * -1.0,
            ViewKind::CubeMarginal { sigma, half_width } => v.mapv(|c| {
                let lo = (-half_width - c) / sigma;
                let hi = (half_width - c) / sigma;
                let lp = stats::log_norm_interval_prob(lo, hi);
                let dhi = (stats::log_norm_pdf(hi) - lp).exp();
                let dlo = (stats::log_norm_pdf(lo) - lp).exp();
                -(dhi - dlo) / sigma
            }),
        };
        *grad += &self.map.t().dot(&dv);
    }
}

// ---------------------------------------------------------------------------
// the selective density

/// Gaussian target block plus randomization views, restricted by per-block
/// constraints. The state is the concatenation of the blocks; block 0 is the
/// (unconstrained) target T.
#[derive(Debug, Clone)]
pub struct SelectiveDensity {
    pub theta: Array1<f64>,
    pub sigma_t: Array2<f64>,
    precision_t: Array2<f64>,
    log_norm_t: f64,
    pub views: Vec<RandomizationView>,
    pub blocks: Vec<ConstraintBlock>,
    /// Index of the cube block (inactive subgradient), when present, together
    /// with the view whose trailing columns read it.
    pub cube: Option<CubeLayout>,
}

#[derive(Debug, Clone, Copy)]
pub struct CubeLayout {
    pub block_idx: usize,
    pub view_idx: usize,
}

impl SelectiveDensity {
    pub fn new(
        theta: Array1<f64>,
        sigma_t: Array2<f64>,
        views: Vec<RandomizationView>,
        blocks: Vec<ConstraintBlock>,
        cube: Option<CubeLayout>,
    ) -> Result<Self> {
        let t_dim = theta.len();
        if sigma_t.nrows() != t_dim {
            return Err(Error::DimensionMismatch("Sigma_T shape != theta".into()));
        }
        match blocks.first() {
            Some(b) if b.dim() == t_dim => {}
            _ => {
                return Err(Error::InvalidInput(
                    "block 0 must be the target block of dim(theta)".into(),
                ))
            }
        }
        let state_dim: usize = blocks.iter().map(|b| b.dim()).sum();
        for v in &views {
            if v.map.ncols() != state_dim {
                return Err(Error::DimensionMismatch("view map columns != state dim".into()));
            }
        }
        let precision_t = linalg::invert_psd(&sigma_t.view())?;
        let (vals, _) = linalg::sym_eigh(&sigma_t.view())?;
        let log_det: f64 = vals.iter().map(|v| v.max(1e-300).ln()).sum();
        let log_norm_t = -0.5 * log_det - t_dim as f64 * LN_SQRT_2PI;
        Ok(SelectiveDensity { theta, sigma_t, precision_t, log_norm_t, views, blocks, cube })
    }

    pub fn state_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn t_dim(&self) -> usize {
        self.theta.len()
    }

    /// Offset of a block within the flat state.
    pub fn block_offset(&self, idx: usize) -> usize {
        self.blocks[..idx].iter().map(|b| b.dim()).sum()
    }

    /// Same density with the target mean moved (views and constraints do not
    /// depend on theta).
    pub fn with_theta(&self, theta: Array1<f64>) -> SelectiveDensity {
        let mut out = self.clone();
        assert_eq!(theta.len(), out.theta.len());
        out.theta = theta;
        out
    }

    pub fn log_density(&self, state: &Array1<f64>) -> f64 {
        let t = state.slice(s![..self.t_dim()]).to_owned();
        let d = &t - &self.theta;
        let mut lp = -0.5 * d.dot(&self.precision_t.dot(&d)) + self.log_norm_t;
        for v in &self.views {
            lp += v.log_density(state);
        }
        lp
    }

    pub fn grad_log_density(&self, state: &Array1<f64>) -> Array1<f64> {
        let mut grad = Array1::zeros(self.state_dim());
        {
            let t = state.slice(s![..self.t_dim()]).to_owned();
            let d = &t - &self.theta;
            let gt = self.precision_t.dot(&d) * -1.0;
            grad.slice_mut(s![..self.t_dim()]).assign(&gt);
        }
        for v in &self.views {
            v.accumulate_grad(state, &mut grad);
        }
        grad
    }

    /// Per-block projection of the full state.
    pub fn project(&self, state: &mut Array1<f64>) {
        let mut off = 0;
        for b in &self.blocks {
            let d = b.dim();
            let mut chunk = state.slice(s![off..off + d]).to_owned();
            b.project(&mut chunk);
            state.slice_mut(s![off..off + d]).assign(&chunk);
            off += d;
        }
    }

    pub fn satisfies(&self, state: &Array1<f64>, tol: f64) -> bool {
        let mut off = 0;
        for b in &self.blocks {
            let d = b.dim();
            let chunk = state.slice(s![off..off + d]).to_owned();
            if !b.satisfied(&chunk, tol) {
                return false;
            }
            off += d;
        }
        true
    }
}

/// Analytic marginalization of the inactive-subgradient cube: the product of
/// 1-D Gaussian integrals over [-lambda, lambda], one per inactive
/// coordinate. Requires the cube view to have iid Gaussian coordinates and
/// drops the cube block from the state.
pub fn marginalize_cube(density: &SelectiveDensity) -> Result<SelectiveDensity> {
    let layout = density
        .cube
        .ok_or_else(|| Error::InvalidInput("density has no cube block to marginalize".into()))?;
    let sigma = match &density.views[layout.view_idx].kind {
        ViewKind::GaussianIid { sigma } => *sigma,
        _ => return Err(Error::CorrelatedRandomization),
    };
    let (half_width, cube_dim) = match &density.blocks[layout.block_idx] {
        ConstraintBlock::Cube { half_width, dim } => (*half_width, *dim),
        _ => return Err(Error::InvalidInput("cube layout does not point at a cube".into())),
    };
    let cube_off = density.block_offset(layout.block_idx);
    let keep: Vec<usize> = (0..density.state_dim())
        .filter(|&c| c < cube_off || c >= cube_off + cube_dim)
        .collect();

    // any other view reading the cube coordinates cannot be marginalized
    for (vi, v) in density.views.iter().enumerate() {
        if vi == layout.view_idx {
            continue;
        }
        for &c in (cube_off..cube_off + cube_dim).collect::<Vec<_>>().iter() {
            if v.map.column(c).iter().any(|x| x.abs() > 0.0) {
                return Err(Error::CorrelatedRandomization);
            }
        }
    }

    let omega_view = &density.views[layout.view_idx];
    // the cube coordinates must enter the view as an identity block on
    // distinct rows: coordinate u_j adds to exactly one row with weight 1
    let mut u_rows = Vec::with_capacity(cube_dim);
    for (k, c) in (cube_off..cube_off + cube_dim).enumerate() {
        let col = omega_view.map.column(c);
        let mut row_idx = None;
        for (r, val) in col.iter().enumerate() {
            if val.abs() > 0.0 {
                if (val - 1.0).abs() > 1e-12 || row_idx.is_some() {
                    return Err(Error::CorrelatedRandomization);
                }
                row_idx = Some(r);
            }
        }
        u_rows.push(row_idx.ok_or_else(|| {
            Error::InvalidInput(format!("cube coordinate {k} unused by the view"))
        })?);
    }

    let view_rows = omega_view.map.nrows();
    let is_u_row = {
        let mut b = vec![false; view_rows];
        for &r in &u_rows {
            b[r] = true;
        }
        b
    };

    let take_cols = |rows: &[usize]| -> (Array2<f64>, Array1<f64>) {
        let mut m = Array2::zeros((rows.len(), keep.len()));
        let mut o = Array1::zeros(rows.len());
        for (ri, &r) in rows.iter().enumerate() {
            for (ci, &c) in keep.iter().enumerate() {
                m[[ri, ci]] = omega_view.map[[r, c]];
            }
            o[ri] = omega_view.offset[r];
        }
        (m, o)
    };
    let gauss_rows: Vec<usize> = (0..view_rows).filter(|r| !is_u_row[*r]).collect();
    let (g_map, g_off) = take_cols(&gauss_rows);
    let (c_map, c_off) = take_cols(&u_rows);

    let mut views = Vec::new();
    if !gauss_rows.is_empty() {
        views.push(RandomizationView {
            map: g_map,
            offset: g_off,
            kind: ViewKind::GaussianIid { sigma },
        });
    }
    views.push(RandomizationView {
        map: c_map,
        offset: c_off,
        kind: ViewKind::CubeMarginal { sigma, half_width },
    });
    for (vi, v) in density.views.iter().enumerate() {
        if vi == layout.view_idx {
            continue;
        }
        let mut m = Array2::zeros((v.map.nrows(), keep.len()));
        for (ci, &c) in keep.iter().enumerate() {
            m.column_mut(ci).assign(&v.map.column(c));
        }
        views.push(RandomizationView { map: m, offset: v.offset.clone(), kind: v.kind.clone() });
    }

    let blocks: Vec<ConstraintBlock> = density
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != layout.block_idx)
        .map(|(_, b)| b.clone())
        .collect();

    SelectiveDensity::new(density.theta.clone(), density.sigma_t.clone(), views, blocks, None)
}

// ---------------------------------------------------------------------------
// density builders for the randomized Lasso and its CV view

/// What to do with the inactive subgradient coordinates in the sampler
/// state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgradientMode {
    /// Keep u_{-E} as cube-constrained coordinates.
    Keep,
    /// Integrate u_{-E} out analytically (the default workflow).
    Marginalize,
    /// Fix u_{-E} at its observed value.
    Condition,
}

/// The selective density of the randomized Lasso written over
/// (T, beta_E [, u_{-E}]): the Gaussian law of the target times the
/// randomization density evaluated at the KKT reconstruction, with the sign
/// orthant (and optionally the subgradient cube) as constraints.
///
/// The target is whatever the law's T block describes (the full active OLS
/// vector, or a single coordinate of it in the per-coordinate workflow);
/// `t_obs` is its observed value. Also returns the observed state vector,
/// the natural chain start.
pub fn build_density_randomized_lasso(
    fit: &crate::lasso::LassoFit,
    data: &crate::dataset::Dataset,
    law: &crate::law::JointGaussianLaw,
    t_obs: &Array1<f64>,
    sigma_omega: f64,
    mode: SubgradientMode,
) -> Result<(SelectiveDensity, Array1<f64>)> {
    use crate::lasso::Loss;
    let p = data.p();
    let e = fit.active.len();
    let t_dim = law.t_dim();
    if t_obs.len() != t_dim || law.d_dim() != p {
        return Err(Error::DimensionMismatch(format!(
            "law over (T, D) must have d_dim = p = {p} and t_dim = len(t_obs)"
        )));
    }
    let kkt = crate::lasso::kkt_map(fit, data)?;
    let dv = match fit.loss {
        Loss::Squared => crate::lasso::data_vector(data, &fit.active)?,
        Loss::Logistic => crate::lasso::data_vector_logistic(data, &fit.active)?,
    };
    let n = data.n() as f64;
    let t_obs = t_obs.clone();
    let mut d_mean = Array1::zeros(p);
    for i in 0..e {
        d_mean[i] = dv.ols_active[i];
    }
    for j in 0..p - e {
        d_mean[e + j] = dv.inactive_score[j] / n;
    }
    let dec = crate::law::decompose_on_target(law, &t_obs.view(), &d_mean.view())?;

    // the KKT map acts on the raw-scale data vector: rescale its score
    // columns before composing with the mean-scale regression map
    let mut m_scaled = kkt.m.clone();
    for c in e..p {
        m_scaled.column_mut(c).mapv_inplace(|v| v * n);
    }
    let map_t = m_scaled.dot(&dec.regression_map);
    let mut offset = m_scaled.dot(&dec.residual) + &kkt.remainder;
    for i in 0..e {
        offset[i] += fit.lambda * fit.signs[i];
    }

    let keep_u = mode != SubgradientMode::Condition;
    let u_dim = if keep_u { p - e } else { 0 };
    let state_dim = t_dim + e + u_dim;
    let mut map = Array2::zeros((p, state_dim));
    map.slice_mut(s![.., ..t_dim]).assign(&map_t);
    map.slice_mut(s![.., t_dim..t_dim + e]).assign(&kkt.b);
    if keep_u {
        for j in 0..p - e {
            map[[e + j, t_dim + e + j]] = 1.0;
        }
    } else {
        for j in 0..p - e {
            offset[e + j] += fit.subgrad_inactive[j];
        }
    }

    let view = RandomizationView { map, offset, kind: ViewKind::GaussianIid { sigma: sigma_omega } };
    let mut blocks = vec![
        ConstraintBlock::Free { dim: t_dim },
        ConstraintBlock::SignOrthant { signs: fit.signs.clone() },
    ];
    let cube = if keep_u {
        blocks.push(ConstraintBlock::Cube { half_width: fit.lambda, dim: p - e });
        Some(CubeLayout { block_idx: 2, view_idx: 0 })
    } else {
        None
    };
    let beta_active = Array1::from_vec(fit.active.iter().map(|&j| fit.beta[j]).collect());
    let mut init = Array1::zeros(state_dim);
    init.slice_mut(s![..t_dim]).assign(&t_obs);
    init.slice_mut(s![t_dim..t_dim + e]).assign(&beta_active);
    if keep_u {
        init.slice_mut(s![t_dim + e..]).assign(&fit.subgrad_inactive);
    }
    let density = SelectiveDensity::new(t_obs, law.sigma_t().to_owned(), vec![view], blocks, cube)?;
    if !density.log_density(&init).is_finite() {
        return Err(Error::InvalidInput("log-density not finite at the observed state".into()));
    }
    let out = if mode == SubgradientMode::Marginalize {
        let m = marginalize_cube(&density)?;
        let mut init_m = Array1::zeros(t_dim + e);
        init_m.slice_mut(s![..t_dim + e]).assign(&init.slice(s![..t_dim + e]));
        (m, init_m)
    } else {
        (density, init)
    };
    Ok(out)
}

/// How the randomized-CV constraint enters the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvViewMode {
    /// Err_R joins the state, constrained to the argmin cone.
    Joint,
    /// Err_R is fixed at its observed value (smaller state).
    Condition,
}

/// Appends the randomized-cross-validation view to a density over
/// (T, ...): the g_{R2} term at `Err_R - Sigma_{Err1,T} Sigma_T^{-1} T -
/// N_{Err1}`, with Err_R either a new cone-constrained block or conditioned
/// at its observed value.
///
/// `law_full` is the joint law of (T, D, Err^{(1)}); only its Err rows are
/// consumed here. Returns the density plus the extended initial state.
pub fn add_cv_view(
    density: &SelectiveDensity,
    init: &Array1<f64>,
    curve: &crate::cv::CvCurve,
    law_full: &crate::law::JointGaussianLaw,
    t_obs: &Array1<f64>,
    mode: CvViewMode,
) -> Result<(SelectiveDensity, Array1<f64>)> {
    let (r1, sigma_r2) = match &curve.noise {
        crate::cv::CurveNoise::TwoPart { r1, sigma_r2, .. } => (r1.clone(), *sigma_r2),
        _ => return Err(Error::MissingTwoPartDraws),
    };
    let l = curve.len();
    let e = density.t_dim();
    if law_full.t_dim() != e || law_full.d_dim() < l {
        return Err(Error::DimensionMismatch("law does not cover (T, ..., Err)".into()));
    }
    // Err^{(1)} rows sit at the tail of the law's nuisance block
    let d_dim = law_full.d_dim();
    let sigma_t = law_full.sigma_t().to_owned();
    let rhs = law_full.sigma_td().to_owned();
    let map_t_full = linalg::solve_psd_mat(&sigma_t.view(), &rhs.view())?.t().to_owned();
    let c_err = map_t_full.slice(s![d_dim - l.., ..]).to_owned();
    let err1_obs = &curve.total + &r1;
    let n_err1 = &err1_obs - &c_err.dot(t_obs);

    let old_dim = density.state_dim();
    let add_dim = if mode == CvViewMode::Joint { l } else { 0 };
    let mut views = Vec::with_capacity(density.views.len() + 1);
    for v in &density.views {
        let mut m = Array2::zeros((v.map.nrows(), old_dim + add_dim));
        m.slice_mut(s![.., ..old_dim]).assign(&v.map);
        views.push(RandomizationView { map: m, offset: v.offset.clone(), kind: v.kind.clone() });
    }
    let mut map = Array2::zeros((l, old_dim + add_dim));
    map.slice_mut(s![.., ..e]).assign(&(&c_err * -1.0));
    let offset = match mode {
        CvViewMode::Joint => {
            for li in 0..l {
                map[[li, old_dim + li]] = 1.0;
            }
            -n_err1.clone()
        }
        CvViewMode::Condition => &curve.randomized - &n_err1,
    };
    views.push(RandomizationView { map, offset, kind: ViewKind::GaussianIid { sigma: sigma_r2 } });

    let mut blocks = density.blocks.clone();
    let mut new_init = Array1::zeros(old_dim + add_dim);
    new_init.slice_mut(s![..old_dim]).assign(init);
    if mode == CvViewMode::Joint {
        blocks.push(ConstraintBlock::MinCone { winner: curve.winner(), dim: l });
        new_init.slice_mut(s![old_dim..]).assign(&curve.randomized);
    }
    let out = SelectiveDensity::new(
        density.theta.clone(),
        density.sigma_t.clone(),
        views,
        blocks,
        density.cube,
    )?;
    Ok((out, new_init))
}

// ---------------------------------------------------------------------------
// the chain

#[derive(Debug, Clone, Copy)]
pub struct ChainConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub kept: usize,
    /// Explicit Langevin step; `None` estimates 1/(dim * Lipschitz) from 100
    /// probe points around the start.
    pub step_size: Option<f64>,
    /// Recorded into the output for reproducibility bookkeeping.
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { burn_in: 2000, thin: 5, kept: 10_000, step_size: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    pub mean_grad_norm: f64,
    pub projection_rate: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// kept x state_dim.
    pub draws: Array2<f64>,
    pub t_dim: usize,
    pub diagnostics: ChainDiagnostics,
    pub seed: u64,
}

impl ChainOutput {
    pub fn kept(&self) -> usize {
        self.draws.nrows()
    }

    pub fn t_samples(&self) -> ndarray::ArrayView2<'_, f64> {
        self.draws.slice(s![.., ..self.t_dim])
    }

    /// Debug dump: one state per row.
    pub fn dump_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in self.draws.rows() {
            let rec: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

// Diagonal preconditioning scales: 1/sqrt of the per-coordinate curvature of
// -log pi, estimated by probing the gradient. Cone and polyhedron blocks get
// one uniform scale (their projections only commute with uniform scaling);
// separable blocks get per-coordinate scales.
fn preconditioner(density: &SelectiveDensity, init: &Array1<f64>) -> Array1<f64> {
    let d = density.state_dim();
    let g0 = density.grad_log_density(init);
    let h = 1e-4;
    let mut curv = Array1::from_elem(d, 1e-12f64);
    for j in 0..d {
        let mut x = init.clone();
        x[j] += h;
        let g = density.grad_log_density(&x);
        curv[j] = ((g[j] - g0[j]) / h).abs().max(1e-12);
    }
    let mut scale = curv.mapv(|c| 1.0 / c.sqrt());
    let mut off = 0;
    for b in &density.blocks {
        let dim = b.dim();
        let uniform = matches!(
            b,
            ConstraintBlock::MinCone { .. }
                | ConstraintBlock::KSmallestCone { .. }
                | ConstraintBlock::LinfCone { .. }
                | ConstraintBlock::Polyhedron { .. }
        );
        if uniform && dim > 0 {
            let geo: f64 =
                (off..off + dim).map(|i| scale[i].ln()).sum::<f64>() / dim as f64;
            let s = geo.exp();
            for i in off..off + dim {
                scale[i] = s;
            }
        }
        off += dim;
    }
    scale
}

// Lipschitz estimate of the preconditioned gradient from probe points around
// the start, giving the default step 1/(dim * Lipschitz).
fn estimate_step(density: &SelectiveDensity, init: &Array1<f64>, scale: &Array1<f64>) -> f64 {
    let dim = density.state_dim() as f64;
    let g0 = density.grad_log_density(init) * scale;
    let mut lip: f64 = 0.0;
    let n_probe = 100;
    let d = density.state_dim();
    for k in 0..n_probe {
        let j = k % d;
        let sign = if (k / d) % 2 == 0 { 1.0 } else { -1.0 };
        let mut x = init.clone();
        x[j] += 0.5 * scale[j] * sign;
        density.project(&mut x);
        let dz = (&x - init) / scale;
        let nz = dz.dot(&dz).sqrt();
        if nz < 1e-12 {
            continue;
        }
        let g = density.grad_log_density(&x) * scale;
        let dg = &g - &g0;
        lip = lip.max(dg.dot(&dg).sqrt() / nz);
    }
    let lip = lip.max(1e-8);
    (1.0 / (dim * lip)).clamp(1e-8, 1.0)
}

/// Projected (unadjusted) Langevin:
/// `x <- Proj(x + (step/2) grad log pi (x) + sqrt(step) xi)`.
pub fn run_chain<R: Rng>(
    density: &SelectiveDensity,
    init: &Array1<f64>,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<ChainOutput> {
    if init.len() != density.state_dim() {
        return Err(Error::DimensionMismatch("init length != state dim".into()));
    }
    let mut x = init.clone();
    density.project(&mut x);
    if !density.satisfies(&x, 1e-9) {
        return Err(Error::InvalidInput("initial state violates constraints".into()));
    }
    // diagonal preconditioning: run the dynamics for z = S^{-1} x, whose
    // gradient is S grad log pi; cone blocks share a uniform scale so their
    // projections commute with the change of variables
    let scale = preconditioner(density, &x);
    let step = cfg.step_size.unwrap_or_else(|| estimate_step(density, &x, &scale));
    if step <= 0.0 {
        return Err(Error::InvalidInput("step size must be positive".into()));
    }
    let half = 0.5 * step;
    let noise_scale = step.sqrt();
    let drift_scale = scale.mapv(|s| s * s);
    let total = cfg.burn_in + cfg.kept * cfg.thin;
    let dim = density.state_dim();
    let mut draws = Array2::zeros((cfg.kept, dim));
    let mut kept = 0;
    let mut grad_norm_sum = 0.0;
    let mut projected_steps = 0usize;

    for stepi in 0..total {
        let g = density.grad_log_density(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { state: x.to_vec() });
        }
        grad_norm_sum += g.dot(&g).sqrt();
        let mut prop = &x + &(&g * &drift_scale * half);
        for (v, s) in prop.iter_mut().zip(scale.iter()) {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_scale * s * z;
        }
        let before = prop.clone();
        density.project(&mut prop);
        let moved = (&prop - &before).iter().any(|v| v.abs() > 1e-14);
        if moved {
            projected_steps += 1;
        }
        x = prop;
        if stepi >= cfg.burn_in && (stepi - cfg.burn_in) % cfg.thin == 0 && kept < cfg.kept {
            draws.row_mut(kept).assign(&x);
            kept += 1;
        }
    }
    Ok(ChainOutput {
        draws,
        t_dim: density.t_dim(),
        diagnostics: ChainDiagnostics {
            mean_grad_norm: grad_norm_sum / total as f64,
            projection_rate: projected_steps as f64 / total as f64,
            step_size: step,
        },
        seed: cfg.seed,
    })
}

// ---------------------------------------------------------------------------
// pivots and tilts

/// The randomized selective pivot: the chain fraction of target draws inside
/// the ball `||Z_T - theta0|| <= ||T_obs - theta0||`, with a batch-means
/// Monte Carlo error.
pub fn randomized_pivot(
    chain: &ChainOutput,
    t_obs: &Array1<f64>,
    theta0: &Array1<f64>,
) -> Result<crate::pivot::PivotResult> {
    let n = chain.kept();
    if n == 0 {
        return Err(Error::DegenerateChain);
    }
    let first = chain.draws.row(0).to_owned();
    if (1..n).all(|i| chain.draws.row(i) == first.view()) {
        return Err(Error::DegenerateChain);
    }
    let diff = t_obs - theta0;
    let radius = diff.dot(&diff).sqrt();
    let mut inside = Vec::with_capacity(n);
    for i in 0..n {
        let t = chain.t_samples().row(i).to_owned();
        let d = &t - theta0;
        inside.push(if d.dot(&d).sqrt() <= radius { 1.0 } else { 0.0 });
    }
    let (value, se) = batch_mean_se(&inside);
    Ok(crate::pivot::PivotResult {
        value,
        method: crate::pivot::PivotMethod::MonteCarlo,
        mc_error: Some(se),
    })
}

/// Batch-means estimate of (mean, MC standard error) for an autocorrelated
/// chain functional.
pub fn batch_mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let nb = (n as f64).sqrt().floor() as usize;
    if nb < 2 {
        return (mean, 0.5);
    }
    let bs = n / nb;
    let batches: Vec<f64> = (0..nb)
        .map(|b| xs[b * bs..(b + 1) * bs].iter().sum::<f64>() / bs as f64)
        .collect();
    (mean, (stats::variance(&batches) / nb as f64).sqrt())
}

fn uniform_cdf(chain: &ChainOutput, j: usize, x: f64) -> f64 {
    let n = chain.kept();
    let mut s = 0usize;
    for i in 0..n {
        if chain.t_samples()[[i, j]] <= x {
            s += 1;
        }
    }
    s as f64 / n as f64
}

/// Importance weights retargeting a chain sampled at `theta_ref` to a new
/// theta. Self-normalized; refuses to extrapolate when the effective sample
/// size drops below 5% of the draws.
#[derive(Debug, Clone)]
pub struct TiltedChain {
    pub weights: Array1<f64>,
    pub ess: f64,
}

pub fn tilt_reference(
    chain: &ChainOutput,
    density_at_ref: &SelectiveDensity,
    theta_new: &Array1<f64>,
) -> Result<TiltedChain> {
    let n = chain.kept();
    let t_dim = chain.t_dim;
    if theta_new.len() != t_dim {
        return Err(Error::DimensionMismatch("theta length != t_dim".into()));
    }
    let prec = linalg::invert_psd(&density_at_ref.sigma_t.view())?;
    let theta_ref = &density_at_ref.theta;
    let delta = theta_new - theta_ref;
    let lin = prec.dot(&delta);
    let quad = 0.5 * (theta_new.dot(&prec.dot(theta_new)) - theta_ref.dot(&prec.dot(theta_ref)));
    let mut logw = Array1::zeros(n);
    for i in 0..n {
        let t = chain.t_samples().row(i).to_owned();
        logw[i] = t.dot(&lin) - quad;
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = logw.mapv(|l| (l - m).exp());
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    if ess < 0.05 * n as f64 {
        return Err(Error::EssCollapse { ess, draws: n });
    }
    Ok(TiltedChain { weights: w, ess })
}

impl TiltedChain {
    /// Weighted CDF of target coordinate `j` at `x`.
    pub fn cdf_coord(&self, chain: &ChainOutput, j: usize, x: f64) -> f64 {
        let mut s = 0.0;
        for i in 0..chain.kept() {
            if chain.t_samples()[[i, j]] <= x {
                s += self.weights[i];
            }
        }
        s
    }

    /// Weighted mean of target coordinate `j`.
    pub fn mean_coord(&self, chain: &ChainOutput, j: usize) -> f64 {
        (0..chain.kept())
            .map(|i| self.weights[i] * chain.t_samples()[[i, j]])
            .sum()
    }
}

/// Per-coordinate inference on a selective density: p-values and confidence
/// intervals by tilting reference chains. References accumulate in a small
/// pool; each evaluation tilts from the nearest one and a fresh chain is run
/// only when every nearby reference's importance weights collapse.
pub struct ChainInference<'a, R: Rng> {
    pub density: SelectiveDensity,
    pub cfg: ChainConfig,
    pub init: Array1<f64>,
    pub rng: &'a mut R,
    /// Reference chains sampled so far (the first is at the observed theta).
    pub pool: Vec<(Array1<f64>, ChainOutput)>,
    /// Fresh chains beyond the first (diagnostic).
    pub rechains: usize,
}

const POOL_CAP: usize = 12;

impl<'a, R: Rng> ChainInference<'a, R> {
    pub fn new(
        density: SelectiveDensity,
        init: Array1<f64>,
        cfg: ChainConfig,
        rng: &'a mut R,
    ) -> Result<Self> {
        let chain = run_chain(&density, &init, &cfg, rng)?;
        let theta0 = density.theta.clone();
        Ok(ChainInference {
            density,
            cfg,
            init,
            rng,
            pool: vec![(theta0, chain)],
            rechains: 0,
        })
    }

    /// Compatibility accessor: the first reference chain.
    pub fn chain(&self) -> &ChainOutput {
        &self.pool[0].1
    }

    /// Weighted CDF of coordinate j at `x` under theta = reference with
    /// coordinate j moved to `theta_j`; tilts from the nearest pooled
    /// reference and re-chains on weight collapse.
    fn cdf_at(&mut self, j: usize, theta_j: f64, x: f64) -> Result<f64> {
        let mut theta = self.density.theta.clone();
        theta[j] = theta_j;
        // nearest reference first
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (&self.pool[a].0 - &theta).mapv(|v| v * v).sum();
            let db = (&self.pool[b].0 - &theta).mapv(|v| v * v).sum();
            da.partial_cmp(&db).unwrap()
        });
        for idx in order.into_iter().take(3) {
            let (ref_theta, chain) = &self.pool[idx];
            let ref_density = self.density.with_theta(ref_theta.clone());
            match tilt_reference(chain, &ref_density, &theta) {
                Ok(t) => return Ok(t.cdf_coord(chain, j, x)),
                Err(Error::EssCollapse { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        // no usable reference: sample a fresh chain at the requested theta
        let density = self.density.with_theta(theta.clone());
        let chain = run_chain(&density, &self.init, &self.cfg, self.rng)?;
        self.rechains += 1;
        let f = uniform_cdf(&chain, j, x);
        if self.pool.len() >= POOL_CAP {
            self.pool.remove(1); // keep the observed-theta reference
        }
        self.pool.push((theta, chain));
        Ok(f)
    }

    /// Two-sided p-value for theta_j = theta0 from the tilted CDF pivot.
    pub fn pvalue_coord(&mut self, j: usize, theta0: f64, t_obs_j: f64) -> Result<f64> {
        let f = self.walk_cdf(j, theta0, t_obs_j)?;
        Ok((2.0 * f.min(1.0 - f)).clamp(0.0, 1.0))
    }

    // evaluate the cdf pivot at theta_j; the tilt re-chains at the requested
    // theta whenever the importance weights collapse
    fn walk_cdf(&mut self, j: usize, theta_j: f64, x: f64) -> Result<f64> {
        self.cdf_at(j, theta_j, x)
    }

    /// Equal-tailed interval for theta_j by bisecting the monotone tilted
    /// CDF pivot.
    pub fn ci_coord(&mut self, j: usize, t_obs_j: f64, alpha: f64) -> Result<crate::pivot::ConfidenceInterval> {
        let sd = self.density.sigma_t[[j, j]].sqrt().max(1e-12);
        let lo = self.search_endpoint(j, t_obs_j, 1.0 - alpha / 2.0, sd)?;
        let hi = self.search_endpoint(j, t_obs_j, alpha / 2.0, sd)?;
        Ok(crate::pivot::ConfidenceInterval {
            lo,
            hi,
            lo_exhausted: false,
            hi_exhausted: false,
            method: crate::pivot::InversionMethod::Bisection,
        })
    }

    // find theta_j with cdf pivot = target (pivot decreasing in theta_j)
    fn search_endpoint(&mut self, j: usize, t_obs_j: f64, target: f64, sd: f64) -> Result<f64> {
        // bracket by outward steps
        let mut lo = t_obs_j;
        let mut hi = t_obs_j;
        let f_at = |s: &mut Self, th: f64| s.walk_cdf(j, th, t_obs_j);
        let f0 = f_at(self, t_obs_j)?;
        if f0 > target {
            // move up until pivot <= target
            let mut step = 0.5 * sd;
            loop {
                hi = hi + step;
                if f_at(self, hi)? <= target || hi > t_obs_j + 25.0 * sd {
                    break;
                }
                step *= 1.6;
            }
            lo = t_obs_j;
        } else {
            let mut step = 0.5 * sd;
            loop {
                lo = lo - step;
                if f_at(self, lo)? >= target || lo < t_obs_j - 25.0 * sd {
                    break;
                }
                step *= 1.6;
            }
            hi = t_obs_j;
        }
        for _ in 0..40 {
            if hi - lo <= 1e-3 * sd {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if f_at(self, mid)? >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}
