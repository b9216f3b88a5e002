//! AIC-based model choice over a fixed menu and randomized forward stepwise
//! with a data-dependent number of steps: criteria vectors, two-part
//! randomization, K-smallest selection events, and selective densities for
//! the sampler.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::event::AffineEvent;
use crate::law::JointGaussianLaw;
use crate::linalg;
use crate::sampler::{
    ConstraintBlock, CvViewMode, RandomizationView, SelectiveDensity, ViewKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    Additive,
    Multiplicative,
}

/// A fixed menu of candidate models with a size penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMenu {
    pub models: Vec<Vec<usize>>,
    pub penalty_mode: PenaltyMode,
}

impl ModelMenu {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidInput("empty model menu".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.models {
            let mut sorted = m.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != m.len() {
                return Err(Error::InvalidInput("duplicate index inside a model".into()));
            }
            if sorted.iter().any(|&j| j >= data.p()) {
                return Err(Error::InvalidInput("model index out of range".into()));
            }
            if !seen.insert(sorted) {
                return Err(Error::InvalidInput("menu models must be distinct".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("menu JSON: {e}")))
    }
}

/// The classical additive AIC penalty with known residual variance: 2k/n.
pub fn classical_aic_penalty(n: usize) -> impl Fn(usize) -> f64 {
    move |k| 2.0 * k as f64 / n as f64
}

fn rss(data: &Dataset, model: &[usize]) -> Result<f64> {
    if model.is_empty() {
        return Ok(data.y().dot(data.y()));
    }
    let dv = crate::lasso::data_vector(data, model)?;
    let xe = data.x_cols(model);
    let r = data.y() - &xe.dot(&dv.ols_active);
    Ok(r.dot(&r))
}

/// The criteria vector: RSS/n plus (or times) the size penalty per model.
pub fn aic_vector(
    data: &Dataset,
    menu: &ModelMenu,
    penalty: impl Fn(usize) -> f64,
) -> Result<Array1<f64>> {
    menu.validate(data)?;
    let n = data.n() as f64;
    let mut out = Array1::zeros(menu.models.len());
    for (l, model) in menu.models.iter().enumerate() {
        let base = rss(data, model)? / n;
        out[l] = match menu.penalty_mode {
            PenaltyMode::Additive => base + penalty(model.len()),
            PenaltyMode::Multiplicative => base * penalty(model.len()),
        };
    }
    Ok(out)
}

/// Stored draws of the two-part randomization `Err_R = Err + R1 + R2`.
#[derive(Debug, Clone)]
pub struct TwoPartDraws {
    pub values: Array1<f64>,
    pub r1: Array1<f64>,
    pub r2: Array1<f64>,
    pub sigma_r1: f64,
    pub sigma_r2: f64,
}

impl TwoPartDraws {
    /// `Err^{(1)} = Err + R1` (the Gaussian part absorbed into the law).
    pub fn err1(&self) -> Array1<f64> {
        &self.values - &self.r2
    }
}

pub fn randomize_two_part<R: Rng>(
    err: &Array1<f64>,
    sigma_r1: f64,
    sigma_r2: f64,
    rng: &mut R,
) -> TwoPartDraws {
    let l = err.len();
    let draw = |sigma: f64, rng: &mut R| {
        if sigma == 0.0 {
            Array1::zeros(l)
        } else {
            let g = Normal::new(0.0, sigma).unwrap();
            Array1::from_iter((0..l).map(|_| g.sample(rng)))
        }
    };
    let r1 = draw(sigma_r1, rng);
    let r2 = draw(sigma_r2, rng);
    TwoPartDraws { values: err + &r1 + &r2, r1, r2, sigma_r1, sigma_r2 }
}

/// Indices of the K smallest entries (ties to the smaller index) and the
/// affine event `x_j <= x_l` for every winner j and non-winner l
/// (K (L - K) rows).
pub fn k_smallest_event(err_r: &Array1<f64>, k: usize) -> Result<(Vec<usize>, AffineEvent)> {
    let l = err_r.len();
    if k == 0 || k >= l {
        return Err(Error::InvalidInput("need 1 <= K < L".into()));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| err_r[a].partial_cmp(&err_r[b]).unwrap().then(a.cmp(&b)));
    let mut winners = order[..k].to_vec();
    winners.sort_unstable();
    let mut a = Array2::zeros((k * (l - k), l));
    let mut r = 0;
    let is_w = {
        let mut b = vec![false; l];
        for &j in &winners {
            b[j] = true;
        }
        b
    };
    for &j in &winners {
        for c in 0..l {
            if !is_w[c] {
                a[[r, j]] = 1.0;
                a[[r, c]] = -1.0;
                r += 1;
            }
        }
    }
    let ev = AffineEvent::new(a, Array1::zeros(k * (l - k)))?;
    Ok((winners, ev))
}

/// The selective density on (T, Err_R) for AIC selection: the Gaussian law
/// of T times the g_{R2} view at `Err_R - Sigma_{Err1,T} Sigma_T^{-1} T -
/// N_{Err1}`, with Err_R restricted to the K-smallest cone (or conditioned
/// at its observed value).
///
/// `law` is the joint law of (T, Err^{(1)}); returns the density and the
/// observed state.
pub fn aic_selective_density(
    law: &JointGaussianLaw,
    t_obs: &Array1<f64>,
    draws: &TwoPartDraws,
    winners: &[usize],
    mode: CvViewMode,
) -> Result<(SelectiveDensity, Array1<f64>)> {
    let e = law.t_dim();
    let l = draws.values.len();
    if law.d_dim() != l || t_obs.len() != e {
        return Err(Error::DimensionMismatch("law must be over (T, Err1)".into()));
    }
    let err1 = draws.err1();
    let dec = crate::law::decompose_on_target(law, &t_obs.view(), &err1.view())?;
    let c_err = dec.regression_map.clone();
    let n_err1 = dec.residual.clone();

    let add = if mode == CvViewMode::Joint { l } else { 0 };
    let mut map = Array2::zeros((l, e + add));
    map.slice_mut(s![.., ..e]).assign(&(&c_err * -1.0));
    let offset = match mode {
        CvViewMode::Joint => {
            for li in 0..l {
                map[[li, e + li]] = 1.0;
            }
            -n_err1.clone()
        }
        CvViewMode::Condition => &draws.values - &n_err1,
    };
    let view = RandomizationView {
        map,
        offset,
        kind: ViewKind::GaussianIid { sigma: draws.sigma_r2 },
    };
    let mut blocks = vec![ConstraintBlock::Free { dim: e }];
    let mut init = Array1::zeros(e + add);
    init.slice_mut(s![..e]).assign(t_obs);
    if mode == CvViewMode::Joint {
        blocks.push(ConstraintBlock::KSmallestCone { winners: winners.to_vec(), dim: l });
        init.slice_mut(s![e..]).assign(&draws.values);
    }
    let density = SelectiveDensity::new(
        t_obs.clone(),
        law.sigma_t().to_owned(),
        vec![view],
        blocks,
        None,
    )?;
    if !density.log_density(&init).is_finite() {
        return Err(Error::InvalidInput("log-density not finite at the observation".into()));
    }
    Ok((density, init))
}

// ---------------------------------------------------------------------------
// randomized forward stepwise

/// One step of the randomized forward-stepwise trace.
#[derive(Debug, Clone)]
pub struct FsStep {
    /// Column chosen at this step (natural index into 1..p).
    pub index: usize,
    pub sign: f64,
    /// The randomized score vector (the cone point z_l), over `score_space`.
    pub score: Array1<f64>,
    /// Natural column indices of the step's score space, in order.
    pub score_space: Vec<usize>,
    /// Position of `index` within `score_space`.
    pub apex: usize,
    pub omega: Array1<f64>,
    /// Exact tie in the max-absolute coordinate (resolved to the smaller
    /// index).
    pub boundary_tie: bool,
}

/// Maximizes `eta^T (X_{-E}^T Pperp_E y + omega)` over the l1 ball: picks the
/// max-absolute coordinate of the randomized score with its sign, and the
/// normal cone of the ball at that vertex is the selection constraint.
pub fn fs_step_randomized(
    data: &Dataset,
    active: &[usize],
    omega: &Array1<f64>,
) -> Result<FsStep> {
    let p = data.p();
    if active.len() >= p {
        return Err(Error::InvalidInput("active set must be a proper subset".into()));
    }
    let rest = crate::lasso::complement(active, p);
    if omega.len() != rest.len() {
        return Err(Error::DimensionMismatch("omega length != remaining columns".into()));
    }
    let resid = if active.is_empty() {
        data.y().clone()
    } else {
        let dv = crate::lasso::data_vector(data, active)?;
        data.y() - &data.x_cols(active).dot(&dv.ols_active)
    };
    let raw = data.x_cols(&rest).t().dot(&resid);
    let score = &raw + omega;
    let mut apex = 0;
    let mut boundary_tie = false;
    for j in 1..score.len() {
        let a = score[j].abs();
        let b = score[apex].abs();
        if a > b {
            apex = j;
            boundary_tie = false;
        } else if a == b {
            boundary_tie = true;
        }
    }
    Ok(FsStep {
        index: rest[apex],
        sign: score[apex].signum(),
        score,
        score_space: rest,
        apex,
        omega: omega.clone(),
        boundary_tie,
    })
}

/// Result of the data-dependent stopping rule.
#[derive(Debug, Clone)]
pub struct FsStopping {
    /// Number of steps kept (1-based count).
    pub l_stop: usize,
    /// Affine event on the first `l_stop` randomized criteria.
    pub event: AffineEvent,
    /// Rows that encode strict inequalities (the failure rows).
    pub open_rows: Vec<bool>,
    /// The predicate never fired; `l_stop` is the cap.
    pub capped: bool,
}

/// `L = min{2 <= l <= cap : Err_{R,l} <= eta Err_{R,l-1}}` plus the affine
/// event it induces on (Err_{R,1}, ..., Err_{R,L}).
pub fn fs_stopping(criteria_r: &[f64], eta: f64) -> Result<FsStopping> {
    let cap = criteria_r.len();
    if cap < 2 {
        return Err(Error::InvalidInput("need at least 2 criteria".into()));
    }
    if eta <= 0.0 || eta > 1.0 {
        return Err(Error::InvalidInput("eta must be in (0, 1]".into()));
    }
    let mut l_stop = cap;
    let mut capped = true;
    for l in 2..=cap {
        if criteria_r[l - 1] <= eta * criteria_r[l - 2] {
            l_stop = l;
            capped = false;
            break;
        }
    }
    let rows = l_stop - 1;
    let mut a = Array2::zeros((rows, l_stop));
    let mut open_rows = vec![false; rows];
    for l in 2..l_stop {
        // failure at step l: eta Err_{R,l-1} - Err_{R,l} < 0
        a[[l - 2, l - 2]] = eta;
        a[[l - 2, l - 1]] = -1.0;
        open_rows[l - 2] = true;
    }
    if !capped {
        // success at L: Err_{R,L} - eta Err_{R,L-1} <= 0
        a[[rows - 1, l_stop - 1]] = 1.0;
        a[[rows - 1, l_stop - 2]] = -eta;
    } else {
        // capped: the last comparison also failed
        a[[rows - 1, l_stop - 2]] = eta;
        a[[rows - 1, l_stop - 1]] = -1.0;
        open_rows[rows - 1] = true;
    }
    let event = AffineEvent::new(a, Array1::zeros(rows))?;
    Ok(FsStopping { l_stop, event, open_rows, capped })
}

/// A complete randomized forward-stepwise run with its randomized criteria.
#[derive(Debug, Clone)]
pub struct FsTrace {
    pub steps: Vec<FsStep>,
    pub criteria: Array1<f64>,
    pub criteria_draws: TwoPartDraws,
    pub eta: f64,
    pub stopping: FsStopping,
}

impl FsTrace {
    pub fn active_at(&self, l: usize) -> Vec<usize> {
        let mut a: Vec<usize> = self.steps[..l].iter().map(|s| s.index).collect();
        a.sort_unstable();
        a
    }

    pub fn selected(&self) -> Vec<usize> {
        self.active_at(self.stopping.l_stop)
    }
}

/// Runs randomized FS, lazily extending until the stopping predicate fires
/// or the cap `min(n, p)` is hit. The criterion of step l is the additive
/// AIC of the union model.
pub fn run_randomized_fs<R: Rng>(
    data: &Dataset,
    eta: f64,
    sigma_omega: f64,
    sigma_r1: f64,
    sigma_r2: f64,
    rng: &mut R,
) -> Result<FsTrace> {
    let cap = data.n().min(data.p());
    let n = data.n() as f64;
    let penalty = classical_aic_penalty(data.n());
    let mut steps: Vec<FsStep> = Vec::new();
    let mut raw_criteria: Vec<f64> = Vec::new();
    let mut r1s: Vec<f64> = Vec::new();
    let mut r2s: Vec<f64> = Vec::new();
    let g1 = Normal::new(0.0, sigma_r1.max(1e-300)).unwrap();
    let g2 = Normal::new(0.0, sigma_r2.max(1e-300)).unwrap();

    let mut active: Vec<usize> = Vec::new();
    let mut rand_criteria: Vec<f64> = Vec::new();
    for l in 1..=cap {
        let rest = crate::lasso::complement(&active, data.p());
        let omega = Array1::from_iter(rest.iter().map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma_omega * z
        }));
        let step = fs_step_randomized(data, &active, &omega)?;
        active.push(step.index);
        active.sort_unstable();
        steps.push(step);

        let err = rss(data, &active)? / n + penalty(active.len());
        raw_criteria.push(err);
        let r1 = if sigma_r1 > 0.0 { g1.sample(rng) } else { 0.0 };
        let r2 = if sigma_r2 > 0.0 { g2.sample(rng) } else { 0.0 };
        r1s.push(r1);
        r2s.push(r2);
        rand_criteria.push(err + r1 + r2);

        if l >= 2 && rand_criteria[l - 1] <= eta * rand_criteria[l - 2] {
            break;
        }
    }
    let stopping = fs_stopping(&rand_criteria, eta)?;
    let l = stopping.l_stop;
    let draws = TwoPartDraws {
        values: Array1::from_vec(rand_criteria[..l].to_vec()),
        r1: Array1::from_vec(r1s[..l].to_vec()),
        r2: Array1::from_vec(r2s[..l].to_vec()),
        sigma_r1,
        sigma_r2,
    };
    Ok(FsTrace {
        steps: steps[..l].to_vec(),
        criteria: Array1::from_vec(raw_criteria[..l].to_vec()),
        criteria_draws: draws,
        eta,
        stopping,
    })
}

/// The selective density of randomized FS with data-dependent stopping:
/// product of per-step views `g_l(z_l + M_l N_D + M_l Sigma_{D,T}
/// Sigma_T^{-1} T)` over the normal cones, times the stopping view on Err_R
/// restricted to the stopping region.
///
/// `law` is over (T, D, Err^{(1)}) when `with_stopping_view` is set, over
/// (T, D) otherwise; D is the mean-scale data vector of the selected set.
pub fn fs_selective_density(
    trace: &FsTrace,
    data: &Dataset,
    law: &JointGaussianLaw,
    sigma_omega: f64,
    with_stopping_view: bool,
) -> Result<(SelectiveDensity, Array1<f64>)> {
    let active = {
        let mut a: Vec<usize> = trace.steps.iter().map(|s| s.index).collect();
        a.sort_unstable();
        a
    };
    let e = active.len();
    let p = data.p();
    let l_steps = trace.steps.len();
    let n = data.n() as f64;
    let err_dim = if with_stopping_view { trace.stopping.l_stop } else { 0 };
    if law.t_dim() != e || law.d_dim() != p + err_dim {
        return Err(Error::DimensionMismatch("law must cover (T, D[, Err1])".into()));
    }

    let dv = crate::lasso::data_vector(data, &active)?;
    let t_obs = dv.ols_active.clone();
    let mut d_obs = Array1::zeros(p + err_dim);
    for i in 0..e {
        d_obs[i] = dv.ols_active[i];
    }
    for j in 0..p - e {
        d_obs[e + j] = dv.inactive_score[j] / n;
    }
    if with_stopping_view {
        let err1 = trace.criteria_draws.err1();
        for li in 0..err_dim {
            d_obs[p + li] = err1[li];
        }
    }
    let dec = crate::law::decompose_on_target(law, &t_obs.view(), &d_obs.view())?;
    let c_d = dec.regression_map.slice(s![..p, ..]).to_owned();
    let n_d = dec.residual.slice(s![..p]).to_owned();

    // M_pos maps the raw data vector to (X_E^T y ; X_{-E}^T y) in final-set
    // order; M_l then rides the permutation to the step's own ordering.
    let inactive = crate::lasso::complement(&active, p);
    let xe = data.x_cols(&active);
    let xm = data.x_cols(&inactive);
    let mut m_pos = Array2::zeros((p, p));
    if e > 0 {
        m_pos.slice_mut(s![..e, ..e]).assign(&linalg::gram(&xe.view()));
        m_pos.slice_mut(s![e.., ..e]).assign(&xm.t().dot(&xe));
    }
    for j in 0..p - e {
        m_pos[[e + j, e + j]] = 1.0;
    }
    // raw-vs-mean scale of the data vector
    let mut m_pos_scaled = m_pos;
    for c in e..p {
        m_pos_scaled.column_mut(c).mapv_inplace(|v| v * n);
    }
    // natural column -> row of M_pos output (E first, then -E)
    let mut pos_of = vec![0usize; p];
    for (i, &j) in active.iter().enumerate() {
        pos_of[j] = i;
    }
    for (i, &j) in inactive.iter().enumerate() {
        pos_of[j] = e + i;
    }

    let state_dim: usize =
        e + trace.steps.iter().map(|s| s.score_space.len()).sum::<usize>() + err_dim;
    let mut blocks: Vec<ConstraintBlock> = vec![ConstraintBlock::Free { dim: e }];
    let mut views: Vec<RandomizationView> = Vec::new();
    let mut init = Array1::zeros(state_dim);
    init.slice_mut(s![..e]).assign(&t_obs);

    let mut off = e;
    for step in trace.steps.iter().take(l_steps) {
        let sd = step.score_space.len();
        let prev_active: Vec<usize> = {
            let mut a: Vec<usize> =
                (0..p).filter(|j| !step.score_space.contains(j)).collect();
            a.sort_unstable();
            a
        };
        // Q_l = [ X_{-El}^T X_El (X_El^T X_El)^{-1} | -I ] in the step's
        // (E_{l-1}, -E_{l-1}) ordering
        let mut q = Array2::zeros((sd, p));
        if prev_active.is_empty() {
            for (r, &j) in step.score_space.iter().enumerate() {
                q[[r, pos_of[j]]] = -1.0;
            }
        } else {
            let xel = data.x_cols(&prev_active);
            let g = linalg::gram(&xel.view());
            let xmel = data.x_cols(&step.score_space);
            let cross = xmel.t().dot(&xel);
            let ginv = linalg::invert_psd(&g.view())?;
            let h = cross.dot(&ginv); // sd x |E_{l-1}|
            for (r, _) in step.score_space.iter().enumerate() {
                for (c, &j) in prev_active.iter().enumerate() {
                    q[[r, pos_of[j]]] = h[[r, c]];
                }
            }
            for (r, &j) in step.score_space.iter().enumerate() {
                q[[r, pos_of[j]]] = -1.0;
            }
        }
        let m_l = q.dot(&m_pos_scaled) * -1.0;
        let map_t = m_l.dot(&c_d);
        let view_off = m_l.dot(&n_d);
        let mut map = Array2::zeros((sd, state_dim));
        map.slice_mut(s![.., ..e]).assign(&map_t);
        for r in 0..sd {
            map[[r, off + r]] = 1.0;
        }
        views.push(RandomizationView {
            map,
            offset: view_off,
            kind: ViewKind::GaussianIid { sigma: sigma_omega },
        });
        blocks.push(ConstraintBlock::LinfCone { apex: step.apex, sign: step.sign, dim: sd });
        init.slice_mut(s![off..off + sd]).assign(&step.score);
        off += sd;
    }

    if with_stopping_view {
        let c_err = dec.regression_map.slice(s![p.., ..]).to_owned();
        let n_err = dec.residual.slice(s![p..]).to_owned();
        let mut map = Array2::zeros((err_dim, state_dim));
        map.slice_mut(s![.., ..e]).assign(&(&c_err * -1.0));
        for li in 0..err_dim {
            map[[li, off + li]] = 1.0;
        }
        views.push(RandomizationView {
            map,
            offset: -n_err,
            kind: ViewKind::GaussianIid { sigma: trace.criteria_draws.sigma_r2 },
        });
        blocks.push(ConstraintBlock::Polyhedron {
            a: trace.stopping.event.matrix().clone(),
            b: trace.stopping.event.offset().clone(),
        });
        init.slice_mut(s![off..off + err_dim]).assign(&trace.criteria_draws.values);
    }

    let density =
        SelectiveDensity::new(t_obs, law.sigma_t().to_owned(), views, blocks, None)?;
    if !density.log_density(&init).is_finite() {
        return Err(Error::InvalidInput("log-density not finite at the observed trace".into()));
    }
    Ok((density, init))
}
