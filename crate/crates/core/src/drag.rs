//! Motion supervision, point tracking and the two editing schedules.
//!
//! A session inverts the source to depth `T`, then performs `K` drag
//! operations. Each drag runs `J` gradient steps on the latent followed by one
//! round of point tracking. Under [`Schedule::GoodDrag`] a DDIM denoising step
//! follows every `B` drags, so the perturbation is spread over `K / B`
//! timesteps; under [`Schedule::AllAtOnce`] every drag happens at `T`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::bilinear::{sample_patch, sample_patch_adjoint, PatchSpec};
use crate::denoiser::{Denoiser, FeatureMap};
use crate::diffusion::{ddim_denoise_step, denoise_to_clean, invert_trajectory, InversionTrajectory, Latent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Grid;

/// Integer pixel coordinate `(row, col)`.
pub type Point = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlPair {
    /// Handle point.
    pub p: Point,
    /// Target point.
    pub q: Point,
}

impl ControlPair {
    pub fn new(p: Point, q: Point) -> Self {
        Self { p, q }
    }

    pub fn length(&self) -> f64 {
        distance(self.p, self.q)
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    dy.hypot(dx)
}

/// Binary editability mask; `true` marks pixels the edit may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    height: usize,
    width: usize,
    editable: Vec<bool>,
}

impl EditMask {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            editable: vec![true; height * width],
        }
    }

    pub fn none(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            editable: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let editable = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, editable }
    }

    /// Inclusive row and column ranges, clipped to the canvas.
    pub fn rect(height: usize, width: usize, rows: (usize, usize), cols: (usize, usize)) -> Self {
        Self::from_fn(height, width, |y, x| (rows.0..=rows.1).contains(&y) && (cols.0..=cols.1).contains(&x))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_editable(&self, y: usize, x: usize) -> bool {
        self.editable[y * self.width + x]
    }

    pub fn is_all(&self) -> bool {
        self.editable.iter().all(|&e| e)
    }

    pub fn editable_count(&self) -> usize {
        self.editable.iter().filter(|&&e| e).count()
    }

    /// Alternating run lengths in row-major order, starting with a (possibly
    /// empty) run of frozen pixels.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &e in &self.editable {
            if e == current {
                len += 1;
            } else {
                runs.push(len);
                current = e;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(height: usize, width: usize, runs: &[usize]) -> Result<Self> {
        let total: usize = runs.iter().sum();
        if total != height * width {
            return Err(Error::Format(format!(
                "mask runs cover {total} pixels, canvas has {}",
                height * width
            )));
        }
        let mut editable = Vec::with_capacity(total);
        for (i, &n) in runs.iter().enumerate() {
            editable.extend(std::iter::repeat_n(i % 2 == 1, n));
        }
        Ok(Self { height, width, editable })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Reference patch at the original handle on the unedited trajectory.
    #[serde(rename = "ip")]
    InformationPreserving,
    /// Reference patch at the current handle on the current latent.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Alternate `B` drags with one denoising step.
    #[serde(rename = "gooddrag")]
    GoodDrag,
    /// Every drag at `T`, then full denoising.
    AllAtOnce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// `z -= eta * grad`.
    Sgd,
    /// Adam with `beta1 = 0.9`, `beta2 = 0.999`; moments persist for the whole session.
    Adam,
}

/// Which cached latent supplies the reference features for point tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingReference {
    /// `z_t^0` at the drag's current timestep.
    Current,
    /// `z_T^0` at the inversion depth.
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DragConfig {
    /// Total drag operations `K`.
    pub drags: usize,
    /// Drags per denoising step `B`.
    pub drags_per_denoise: usize,
    /// Motion-supervision steps per drag `J`.
    pub supervision_steps: usize,
    pub eta: f64,
    /// Movement step `beta` in pixels.
    pub beta: f64,
    /// Supervision patch radius.
    pub r1: usize,
    /// Tracking search radius.
    pub r2: usize,
    /// Mask-term weight.
    pub lambda: f64,
    /// Inversion depth `T`.
    pub inversion_depth: usize,
    pub converge_radius: f64,
    pub optimizer: Optimizer,
    pub tracking_reference: TrackingReference,
}

/// Spatial radii (`beta`, `r1`, `r2`) are sized for 32×32 canvases: half of
/// the values commonly used on 64×64 latents.
impl Default for DragConfig {
    fn default() -> Self {
        Self {
            drags: 70,
            drags_per_denoise: 10,
            supervision_steps: 3,
            eta: 0.005,
            beta: 2.0,
            r1: 2,
            r2: 6,
            lambda: 0.2,
            inversion_depth: 38,
            converge_radius: 1.0,
            optimizer: Optimizer::Adam,
            tracking_reference: TrackingReference::Current,
        }
    }
}

impl DragConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.drags_per_denoise == 0 || !self.drags.is_multiple_of(self.drags_per_denoise) {
            return bad(format!(
                "K={} must be divisible by B={}",
                self.drags, self.drags_per_denoise
            ));
        }
        if self.drags / self.drags_per_denoise > self.inversion_depth {
            return bad(format!(
                "K/B={} exceeds the inversion depth T={}",
                self.drags / self.drags_per_denoise,
                self.inversion_depth
            ));
        }
        if self.supervision_steps == 0 || self.r1 == 0 || self.r2 == 0 {
            return bad("J, r1 and r2 must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.beta > 0.0 && self.lambda > 0.0 && self.converge_radius >= 0.0) {
            return bad("eta, beta and lambda must be positive".into());
        }
        Ok(())
    }

    /// Timestep at which drag `k` runs.
    pub fn timestep_for(&self, k: usize, schedule: Schedule) -> usize {
        match schedule {
            Schedule::GoodDrag => self.inversion_depth - k / self.drags_per_denoise,
            Schedule::AllAtOnce => self.inversion_depth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// The evolving state of one drag session.
#[derive(Debug, Clone)]
pub struct DragState {
    pub z: Latent,
    pub pairs: Vec<ControlPair>,
    pub handles: Vec<Point>,
    pub frozen: Vec<bool>,
    /// Completed drag operations.
    pub k: usize,
    pub trajectory: Arc<InversionTrajectory>,
    /// Features of the cached trajectory latents, keyed by timestep.
    pub references: Arc<BTreeMap<usize, FeatureMap>>,
    /// One DDIM step from each cached `z_t^0`, keyed by the starting `t`:
    /// what plain reconstruction produces at `t - 1`.
    pub unedited_steps: Arc<BTreeMap<usize, Grid>>,
    pub loss_log: Vec<LossValue>,
    adam: AdamMoments,
}

impl DragState {
    /// Inverts `source` to depth `T` and caches reference features.
    pub fn start(
        source: &Latent,
        pairs: &[ControlPair],
        cfg: &DragConfig,
        denoiser: &dyn Denoiser,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let trajectory = invert_trajectory(source, cfg.inversion_depth, denoiser, sched)?;
        Self::from_trajectory(Arc::new(trajectory), pairs, denoiser, sched)
    }

    pub fn from_trajectory(
        trajectory: Arc<InversionTrajectory>,
        pairs: &[ControlPair],
        denoiser: &dyn Denoiser,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let (h, w) = (trajectory.source().grid.height(), trajectory.source().grid.width());
        for pair in pairs {
            let inside = |p: Point| p.0 < h && p.1 < w;
            if !inside(pair.p) || !inside(pair.q) {
                return Err(Error::OutOfBounds(format!("control pair {pair:?} outside {h}x{w}")));
            }
            if pair.p == pair.q {
                return Err(Error::InvalidConfig(format!("handle equals target in {pair:?}")));
            }
        }
        let references = trajectory
            .iter()
            .map(|z| Ok((z.t, denoiser.extract_features(z)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let unedited_steps = trajectory
            .iter()
            .filter(|z| z.t > 0)
            .map(|z| Ok((z.t, ddim_denoise_step(z, denoiser, sched)?.grid)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            z: trajectory.top().clone(),
            pairs: pairs.to_vec(),
            handles: pairs.iter().map(|p| p.p).collect(),
            frozen: vec![false; pairs.len()],
            k: 0,
            trajectory,
            references: Arc::new(references),
            unedited_steps: Arc::new(unedited_steps),
            loss_log: Vec::new(),
            adam: AdamMoments::default(),
        })
    }

    pub fn reference(&self, t: usize) -> Result<&FeatureMap> {
        self.references.get(&t).ok_or(Error::TimestepOutOfRange {
            t,
            max: self.trajectory.depth(),
        })
    }

    fn tracking_reference(&self, cfg: &DragConfig) -> Result<&FeatureMap> {
        match cfg.tracking_reference {
            TrackingReference::Current => self.reference(self.z.t),
            TrackingReference::Top => self.reference(self.trajectory.depth()),
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    /// `||F_{p_i^k}(z^k) - F_{p_i^0}(z^0)||_1` per handle, with the tracking reference.
    pub fn drift(&self, cfg: &DragConfig, denoiser: &dyn Denoiser) -> Result<Vec<f64>> {
        let features = denoiser.extract_features(&self.z)?;
        self.drift_with(&features, cfg)
    }

    fn drift_with(&self, features: &FeatureMap, cfg: &DragConfig) -> Result<Vec<f64>> {
        let reference = self.tracking_reference(cfg)?;
        Ok(self
            .pairs
            .iter()
            .zip(&self.handles)
            .map(|(pair, h)| features.l1_to(h.0, h.1, &reference.at(pair.p.0, pair.p.1)))
            .collect())
    }
}

/// One evaluated supervision loss with its gradient.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub motion: f64,
    pub mask: f64,
    pub grad: Grid,
}

impl LossEval {
    pub fn total(&self) -> f64 {
        self.motion + self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub motion: f64,
    pub mask: f64,
}

/// Where the supervised patch of a handle is centred this step.
pub fn supervision_center(handle: Point, target: Point, beta: f64) -> (f64, f64) {
    let (py, px) = (handle.0 as f64, handle.1 as f64);
    let (dy, dx) = (target.0 as f64 - py, target.1 as f64 - px);
    let n = dy.hypot(dx);
    if n < beta {
        (target.0 as f64, target.1 as f64)
    } else {
        (py + beta * dy / n, px + beta * dx / n)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Supervision loss and its gradient with respect to `state.z`.
///
/// The motion term is `sum_i ||F_{patch(p_i + beta d_i)}(z) - ref_i||_1` over
/// non-frozen handles; the mask term is `lambda ||(z_{t-1} - z_{t-1}^0) * (1 - M)||_1`
/// where `z_{t-1}` is a DDIM step taken with the same forward pass and
/// `z_{t-1}^0` is the same step taken from the unedited `z_t^0`.
pub fn motion_loss(
    state: &DragState,
    cfg: &DragConfig,
    mask: &EditMask,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    variant: LossVariant,
) -> Result<LossEval> {
    let t = state.z.t;
    if t == 0 {
        return Err(Error::TimestepOutOfRange { t: 0, max: sched.t_max() });
    }
    let shape = state.z.shape();
    if mask.height() != shape.height || mask.width() != shape.width {
        return Err(Error::shape(
            format!("{}x{}", shape.height, shape.width),
            format!("{}x{}", mask.height(), mask.width()),
        ));
    }
    let lin = denoiser.linearize(&state.z)?;
    let features = &lin.features().grid;

    let mut motion = 0.0;
    let mut cot_features = Grid::zeros(features.shape());
    for (i, pair) in state.pairs.iter().enumerate() {
        if state.frozen[i] {
            continue;
        }
        let handle = state.handles[i];
        let patch = PatchSpec::new(supervision_center(handle, pair.q, cfg.beta), cfg.r1);
        let moved = sample_patch(features, patch)?;
        let reference = match variant {
            LossVariant::InformationPreserving => {
                let origin = (pair.p.0 as f64, pair.p.1 as f64);
                sample_patch(&state.reference(t)?.grid, PatchSpec::new(origin, cfg.r1))?
            }
            LossVariant::Baseline => {
                let here = (handle.0 as f64, handle.1 as f64);
                sample_patch(features, PatchSpec::new(here, cfg.r1))?
            }
        };
        let diff = moved.lincomb(1.0, &reference, -1.0)?;
        motion += diff.l1_norm();
        sample_patch_adjoint(&diff.map(sign), patch, &mut cot_features)?;
    }

    let mut mask_loss = 0.0;
    let mut direct = Grid::zeros(shape);
    let mut cot_eps = None;
    if !mask.is_all() {
        let (c_z, c_eps) = sched.denoise_coefficients(t)?;
        let stepped = state.z.grid.lincomb(c_z, lin.eps(), c_eps)?;
        let unedited = state.unedited_steps.get(&t).ok_or(Error::TimestepOutOfRange {
            t,
            max: state.trajectory.depth(),
        })?;
        let mut cot = Grid::zeros(shape);
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    if mask.is_editable(y, x) {
                        continue;
                    }
                    let r = stepped.get(c, y, x) - unedited.get(c, y, x);
                    mask_loss += cfg.lambda * r.abs();
                    cot.set(c, y, x, cfg.lambda * sign(r));
                }
            }
        }
        direct = cot.scale(c_z);
        cot_eps = Some(cot.scale(c_eps));
    }

    let mut grad = lin.pullback(cot_eps.as_ref(), Some(&cot_features))?;
    grad.axpy(1.0, &direct)?;
    Ok(LossEval {
        motion,
        mask: mask_loss,
        grad,
    })
}

pub fn motion_loss_ip(
    state: &DragState,
    cfg: &DragConfig,
    mask: &EditMask,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<LossEval> {
    motion_loss(state, cfg, mask, denoiser, sched, LossVariant::InformationPreserving)
}

pub fn motion_loss_baseline(
    state: &DragState,
    cfg: &DragConfig,
    mask: &EditMask,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<LossEval> {
    motion_loss(state, cfg, mask, denoiser, sched, LossVariant::Baseline)
}

/// `J` gradient steps on the latent; handles and `k` are left alone.
pub fn motion_supervise(
    state: &DragState,
    cfg: &DragConfig,
    mask: &EditMask,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    variant: LossVariant,
) -> Result<DragState> {
    if cfg.supervision_steps == 0 {
        return Err(Error::InvalidConfig("J must be at least 1".into()));
    }
    let mut next = state.clone();
    for j in 0..cfg.supervision_steps {
        let eval = motion_loss(&next, cfg, mask, denoiser, sched, variant)?;
        if !eval.total().is_finite() || !eval.grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "supervision loss at k={} j={j} (t={})",
                next.k, next.z.t
            )));
        }
        next.loss_log.push(LossValue {
            motion: eval.motion,
            mask: eval.mask,
        });
        let step = match cfg.optimizer {
            Optimizer::Sgd => eval.grad.scale(cfg.eta),
            Optimizer::Adam => adam_step(&mut next.adam, &eval.grad, cfg.eta),
        };
        let z = next.z.grid.lincomb(1.0, &step, -1.0)?;
        next.z = Latent::new(z, next.z.t)?;
    }
    Ok(next)
}

fn adam_step(adam: &mut AdamMoments, grad: &Grid, lr: f64) -> Grid {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    if adam.m.len() != grad.len() {
        adam.m = vec![0.0; grad.len()];
        adam.v = vec![0.0; grad.len()];
        adam.steps = 0;
    }
    adam.steps += 1;
    let c1 = 1.0 - B1.powi(adam.steps);
    let c2 = 1.0 - B2.powi(adam.steps);
    let mut step = grad.clone();
    for ((s, m), v) in step.data_mut().iter_mut().zip(&mut adam.m).zip(&mut adam.v) {
        let g = *s;
        *m = B1 * *m + (1.0 - B1) * g;
        *v = B2 * *v + (1.0 - B2) * g * g;
        *s = lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
    }
    step
}

/// L1 feature distance to `reference` at every pixel of the window
/// `Omega(current, r2)`, clipped to the canvas, in row-major order.
pub fn tracking_heatmap(features: &FeatureMap, reference: &[f64], current: Point, r2: usize) -> Vec<(Point, f64)> {
    let (h, w) = (features.grid.height(), features.grid.width());
    let rows = current.0.saturating_sub(r2)..=(current.0 + r2).min(h - 1);
    let mut out = Vec::new();
    for y in rows {
        for x in current.1.saturating_sub(r2)..=(current.1 + r2).min(w - 1) {
            out.push(((y, x), features.l1_to(y, x, reference)));
        }
    }
    out
}

/// Window argmin of the feature distance; ties go to the smallest L-infinity
/// distance from `current`, then to the first in row-major order.
pub fn track_point(features: &FeatureMap, reference: &[f64], current: Point, r2: usize) -> Point {
    let linf = |p: Point| p.0.abs_diff(current.0).max(p.1.abs_diff(current.1));
    tracking_heatmap(features, reference, current, r2)
        .into_iter()
        .min_by(|(pa, da), (pb, db)| da.total_cmp(db).then(linf(*pa).cmp(&linf(*pb))).then(pa.cmp(pb)))
        .map(|(p, _)| p)
        .unwrap_or(current)
}

/// New handle positions after a supervision round; frozen handles stay put.
pub fn track_points(state: &DragState, cfg: &DragConfig, denoiser: &dyn Denoiser) -> Result<Vec<Point>> {
    let features = denoiser.extract_features(&state.z)?;
    track_with(state, cfg, &features)
}

fn track_with(state: &DragState, cfg: &DragConfig, features: &FeatureMap) -> Result<Vec<Point>> {
    let reference = state.tracking_reference(cfg)?;
    Ok(state
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            if state.frozen[i] {
                state.handles[i]
            } else {
                track_point(features, &reference.at(pair.p.0, pair.p.1), state.handles[i], cfg.r2)
            }
        })
        .collect())
}

/// One drag operation as recorded in the session report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragStep {
    pub k: usize,
    pub t: usize,
    /// Loss terms of each of the `J` supervision steps.
    pub losses: Vec<LossValue>,
    /// Handles after tracking.
    pub handles: Vec<Point>,
    pub frozen: Vec<bool>,
    /// Per-handle feature drift after tracking.
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragReport {
    pub schedule: Schedule,
    pub variant: LossVariant,
    pub config: DragConfig,
    pub pairs: Vec<ControlPair>,
    pub steps: Vec<DragStep>,
    /// Start timesteps of the denoising steps taken between drags.
    pub alternation_denoise: Vec<usize>,
    /// Start timesteps of the denoising steps after the last drag.
    pub tail_denoise: Vec<usize>,
    pub final_handles: Vec<Point>,
    /// Set when the session stopped early.
    pub aborted: Option<String>,
}

impl DragReport {
    pub fn total_denoise_steps(&self) -> usize {
        self.alternation_denoise.len() + self.tail_denoise.len()
    }
}

/// The edited image and what happened on the way.
#[derive(Debug, Clone)]
pub struct DragOutcome {
    pub edited: Latent,
    pub report: DragReport,
    pub state: DragState,
}

/// Alternating drag-and-denoise session.
pub fn run_gooddrag(
    source: &Latent,
    pairs: &[ControlPair],
    mask: &EditMask,
    cfg: &DragConfig,
    variant: LossVariant,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<DragOutcome> {
    run_session(source, pairs, mask, cfg, Schedule::GoodDrag, variant, denoiser, sched)
}

/// All drags at `T`, then `T` denoising steps.
pub fn run_all_at_once(
    source: &Latent,
    pairs: &[ControlPair],
    mask: &EditMask,
    cfg: &DragConfig,
    variant: LossVariant,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<DragOutcome> {
    run_session(source, pairs, mask, cfg, Schedule::AllAtOnce, variant, denoiser, sched)
}

/// Runs a full session. A non-finite loss stops the session and returns
/// [`Error::Aborted`] carrying the report up to that point.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    source: &Latent,
    pairs: &[ControlPair],
    mask: &EditMask,
    cfg: &DragConfig,
    schedule: Schedule,
    variant: LossVariant,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<DragOutcome> {
    cfg.validate()?;
    let state = DragState::start(source, pairs, cfg, denoiser, sched)?;
    run_from_state(state, mask, cfg, schedule, variant, denoiser, sched)
}

/// Runs the drag loop from a freshly started state.
pub fn run_from_state(
    mut state: DragState,
    mask: &EditMask,
    cfg: &DragConfig,
    schedule: Schedule,
    variant: LossVariant,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
) -> Result<DragOutcome> {
    cfg.validate()?;
    let mut report = DragReport {
        schedule,
        variant,
        config: cfg.clone(),
        pairs: state.pairs.clone(),
        steps: Vec::with_capacity(cfg.drags),
        alternation_denoise: Vec::new(),
        tail_denoise: Vec::new(),
        final_handles: Vec::new(),
        aborted: None,
    };
    for k in 0..cfg.drags {
        debug_assert_eq!(state.z.t, cfg.timestep_for(k, schedule));
        state = match motion_supervise(&state, cfg, mask, denoiser, sched, variant) {
            Ok(s) => s,
            Err(Error::NonFinite(reason)) => {
                report.final_handles = state.handles.clone();
                report.aborted = Some(reason.clone());
                return Err(Error::Aborted {
                    reason,
                    report: Box::new(report),
                });
            }
            Err(e) => return Err(e),
        };
        let features = denoiser.extract_features(&state.z)?;
        state.handles = track_with(&state, cfg, &features)?;
        for i in 0..state.pairs.len() {
            if !state.frozen[i] && distance(state.handles[i], state.pairs[i].q) <= cfg.converge_radius {
                state.frozen[i] = true;
            }
        }
        let drift = state.drift_with(&features, cfg)?;
        let losses = state.loss_log[state.loss_log.len() - cfg.supervision_steps..].to_vec();
        report.steps.push(DragStep {
            k,
            t: state.z.t,
            losses,
            handles: state.handles.clone(),
            frozen: state.frozen.clone(),
            drift,
        });
        state.k = k + 1;
        if schedule == Schedule::GoodDrag && state.k.is_multiple_of(cfg.drags_per_denoise) {
            report.alternation_denoise.push(state.z.t);
            state.z = ddim_denoise_step(&state.z, denoiser, sched)?;
        }
    }
    let mut z = state.z.clone();
    while z.t > 0 {
        report.tail_denoise.push(z.t);
        z = ddim_denoise_step(&z, denoiser, sched)?;
    }
    report.final_handles = state.handles.clone();
    Ok(DragOutcome {
        edited: z,
        report,
        state,
    })
}

/// Invert to `T` and denoise back with no edits.
pub fn reconstruct(source: &Latent, depth: usize, denoiser: &dyn Denoiser, sched: &NoiseSchedule) -> Result<Latent> {
    let trajectory = invert_trajectory(source, depth, denoiser, sched)?;
    denoise_to_clean(trajectory.top(), denoiser, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::GaussianAnalyticDenoiser;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_setup(seed: u64) -> (GaussianAnalyticDenoiser, NoiseSchedule, Latent) {
        let sched = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(1, 16, 16);
        let mu = Grid::randn(shape, &mut rng).scale(0.3);
        let den = GaussianAnalyticDenoiser::new(mu, 0.7, sched.clone()).unwrap();
        let src = Latent::clean(Grid::randn(shape, &mut rng)).unwrap();
        (den, sched, src)
    }

    fn cfg_small() -> DragConfig {
        DragConfig {
            drags: 4,
            drags_per_denoise: 2,
            supervision_steps: 2,
            inversion_depth: 6,
            r1: 2,
            r2: 3,
            beta: 2.0,
            ..DragConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        DragConfig::default().validate().unwrap();
        let mut c = DragConfig {
            drags: 75,
            ..DragConfig::default()
        };
        assert!(c.validate().is_err());
        c = DragConfig {
            drags: 80,
            drags_per_denoise: 2,
            inversion_depth: 38,
            ..DragConfig::default()
        };
        assert!(c.validate().is_err());
        c = DragConfig {
            lambda: 0.0,
            ..DragConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_runs_round_trip() {
        let m = EditMask::rect(6, 7, (1, 3), (2, 5));
        let runs = m.to_runs();
        assert_eq!(runs.iter().sum::<usize>(), 42);
        assert_eq!(EditMask::from_runs(6, 7, &runs).unwrap(), m);
        assert_eq!(EditMask::all(3, 3).to_runs(), vec![0, 9]);
        assert_eq!(EditMask::none(3, 3).to_runs(), vec![9]);
        assert!(EditMask::from_runs(3, 3, &[4, 4]).is_err());
    }

    #[test]
    fn supervision_center_clamps_near_target() {
        assert_eq!(supervision_center((10, 10), (10, 20), 4.0), (10.0, 14.0));
        assert_eq!(supervision_center((10, 10), (12, 11), 4.0), (12.0, 11.0));
        let (y, x) = supervision_center((0, 0), (3, 4), 2.5);
        assert!((y - 1.5).abs() < 1e-12 && (x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_latent_and_zero_beta_give_zero_loss() {
        let (den, sched, src) = small_setup(1);
        let pairs = [ControlPair::new((7, 7), (7, 11))];
        let mut cfg = cfg_small();
        cfg.beta = 0.0;
        let state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        let mask = EditMask::rect(16, 16, (3, 11), (3, 13));
        for variant in [LossVariant::InformationPreserving, LossVariant::Baseline] {
            let e = motion_loss(&state, &cfg, &mask, &den, &sched, variant).unwrap();
            assert_eq!(e.motion, 0.0);
            assert_eq!(e.mask, 0.0);
            assert!(e.grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn full_mask_drops_the_mask_term() {
        let (den, sched, src) = small_setup(2);
        let pairs = [ControlPair::new((7, 6), (8, 10))];
        let cfg = cfg_small();
        let mut state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        state.z.grid = Grid::randn(state.z.shape(), &mut rng);
        let e = motion_loss_ip(&state, &cfg, &EditMask::all(16, 16), &den, &sched).unwrap();
        assert_eq!(e.mask, 0.0);
        assert!(e.motion > 0.0);
        let frozen = motion_loss_ip(&state, &cfg, &EditMask::none(16, 16), &den, &sched).unwrap();
        assert!(frozen.mask > 0.0);
        assert_eq!(frozen.motion, e.motion);
    }

    #[test]
    fn variants_agree_at_k0_and_differ_later() {
        let (den, sched, src) = small_setup(4);
        let pairs = [ControlPair::new((7, 6), (9, 11))];
        let cfg = cfg_small();
        let mask = EditMask::rect(16, 16, (2, 13), (2, 14));
        let mut state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        let ip = motion_loss_ip(&state, &cfg, &mask, &den, &sched).unwrap();
        let bl = motion_loss_baseline(&state, &cfg, &mask, &den, &sched).unwrap();
        assert_eq!(ip.total(), bl.total());
        state = motion_supervise(&state, &cfg, &mask, &den, &sched, LossVariant::Baseline).unwrap();
        state.handles = vec![(8, 8)];
        let ip = motion_loss_ip(&state, &cfg, &mask, &den, &sched).unwrap();
        let bl = motion_loss_baseline(&state, &cfg, &mask, &den, &sched).unwrap();
        assert!(ip.total().is_finite() && bl.total().is_finite());
        assert_ne!(ip.motion, bl.motion);
    }

    #[test]
    fn patches_leaving_the_canvas_are_errors() {
        let (den, sched, src) = small_setup(5);
        let pairs = [ControlPair::new((1, 7), (1, 12))];
        let cfg = cfg_small();
        let state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        let r = motion_loss_ip(&state, &cfg, &EditMask::all(16, 16), &den, &sched);
        assert!(matches!(r, Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn supervision_composes_and_zero_eta_is_identity() {
        let (den, sched, src) = small_setup(6);
        let pairs = [ControlPair::new((7, 6), (8, 11))];
        let mask = EditMask::rect(16, 16, (2, 13), (2, 14));
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let cfg3 = DragConfig {
                supervision_steps: 3,
                optimizer,
                eta: 0.05,
                ..cfg_small()
            };
            let cfg1 = DragConfig {
                supervision_steps: 1,
                ..cfg3.clone()
            };
            let start = DragState::start(&src, &pairs, &cfg3, &den, &sched).unwrap();
            let three = motion_supervise(&start, &cfg3, &mask, &den, &sched, LossVariant::InformationPreserving).unwrap();
            let mut manual = start.clone();
            for _ in 0..3 {
                manual = motion_supervise(&manual, &cfg1, &mask, &den, &sched, LossVariant::InformationPreserving).unwrap();
            }
            assert_eq!(three.z, manual.z);
            assert_eq!(three.loss_log, manual.loss_log);
            assert_eq!(three.handles, start.handles);
            assert_eq!(three.k, start.k);
            assert_ne!(three.z, start.z);

            let still = DragConfig { eta: 0.0, ..cfg3 };
            let same = motion_supervise(&start, &still, &mask, &den, &sched, LossVariant::Baseline).unwrap();
            assert_eq!(same.z, start.z);
        }
    }

    #[test]
    fn single_sgd_step_is_a_plain_gradient_step() {
        let (den, sched, src) = small_setup(7);
        let pairs = [ControlPair::new((7, 6), (8, 11))];
        let mask = EditMask::rect(16, 16, (2, 13), (2, 14));
        let cfg = DragConfig {
            supervision_steps: 1,
            optimizer: Optimizer::Sgd,
            eta: 0.02,
            ..cfg_small()
        };
        let start = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        let g = motion_loss_baseline(&start, &cfg, &mask, &den, &sched).unwrap().grad;
        let next = motion_supervise(&start, &cfg, &mask, &den, &sched, LossVariant::Baseline).unwrap();
        assert_eq!(next.z.grid, start.z.grid.lincomb(1.0, &g, -0.02).unwrap());
    }

    #[test]
    fn tracking_returns_to_the_origin_on_the_unedited_latent() {
        let (den, sched, src) = small_setup(8);
        let pairs = [ControlPair::new((7, 6), (8, 11))];
        let cfg = cfg_small();
        let mut state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        state.handles = vec![(8, 8)];
        assert_eq!(track_points(&state, &cfg, &den).unwrap(), vec![(7, 6)]);
    }

    #[test]
    fn zero_radius_window_keeps_the_handle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = FeatureMap::new(Grid::randn(Shape::new(3, 10, 10), &mut rng)).unwrap();
        assert_eq!(track_point(&f, &[0.0, 0.0, 0.0], (4, 5), 0), (4, 5));
    }

    #[test]
    fn tracking_ties_prefer_nearest_then_row_major() {
        let f = FeatureMap::new(Grid::zeros(Shape::new(1, 9, 9))).unwrap();
        assert_eq!(track_point(&f, &[0.0], (4, 4), 3), (4, 4));
        let mut g = Grid::filled(Shape::new(1, 9, 9), 5.0);
        for &(y, x) in &[(2, 6), (6, 2), (1, 1)] {
            g.set(0, y, x, 1.0);
        }
        let f = FeatureMap::new(g).unwrap();
        // (2,6) and (6,2) are both at L-inf 2, (1,1) at 3; row-major picks (2,6)
        assert_eq!(track_point(&f, &[1.0], (4, 4), 4), (2, 6));
    }

    #[test]
    fn window_clips_at_the_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = FeatureMap::new(Grid::randn(Shape::new(2, 8, 8), &mut rng)).unwrap();
        let hm = tracking_heatmap(&f, &[0.0, 0.0], (1, 6), 3);
        assert_eq!(hm.len(), 5 * 5);
        assert_eq!(hm[0].0, (0, 3));
        assert_eq!(hm.last().unwrap().0, (4, 7));
    }

    #[test]
    fn no_drags_reproduce_plain_reconstruction() {
        let (den, sched, src) = small_setup(11);
        let pairs = [ControlPair::new((7, 6), (8, 11))];
        let cfg = DragConfig {
            drags: 0,
            ..cfg_small()
        };
        let mask = EditMask::all(16, 16);
        let plain = reconstruct(&src, cfg.inversion_depth, &den, &sched).unwrap();
        for schedule in [Schedule::GoodDrag, Schedule::AllAtOnce] {
            let out = run_session(&src, &pairs, &mask, &cfg, schedule, LossVariant::InformationPreserving, &den, &sched).unwrap();
            assert_eq!(out.edited, plain);
            assert_eq!(out.report.total_denoise_steps(), cfg.inversion_depth);
        }
    }

    #[test]
    fn schedule_bookkeeping_small() {
        let (den, sched, src) = small_setup(12);
        let pairs = [ControlPair::new((7, 6), (8, 12))];
        let cfg = cfg_small();
        let mask = EditMask::all(16, 16);
        let good = run_gooddrag(&src, &pairs, &mask, &cfg, LossVariant::InformationPreserving, &den, &sched).unwrap();
        let ts: Vec<usize> = good.report.steps.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![6, 6, 5, 5]);
        assert_eq!(good.report.alternation_denoise, vec![6, 5]);
        assert_eq!(good.report.tail_denoise, vec![4, 3, 2, 1]);
        let flat = run_all_at_once(&src, &pairs, &mask, &cfg, LossVariant::InformationPreserving, &den, &sched).unwrap();
        assert!(flat.report.steps.iter().all(|s| s.t == 6));
        assert!(flat.report.alternation_denoise.is_empty());
        assert_eq!(flat.report.tail_denoise.len(), 6);
        assert_eq!(flat.edited.t, 0);
    }

    #[test]
    fn frozen_handles_stay_put_and_drop_out_of_the_loss() {
        let (den, sched, src) = small_setup(13);
        let pairs = [ControlPair::new((7, 6), (8, 11))];
        let cfg = cfg_small();
        let mut state = DragState::start(&src, &pairs, &cfg, &den, &sched).unwrap();
        state.frozen = vec![true];
        state.handles = vec![(8, 10)];
        let mask = EditMask::rect(16, 16, (2, 13), (2, 14));
        let e = motion_loss_ip(&state, &cfg, &mask, &den, &sched).unwrap();
        assert_eq!(e.motion, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        state.z.grid = Grid::randn(state.z.shape(), &mut rng);
        assert_eq!(track_points(&state, &cfg, &den).unwrap(), vec![(8, 10)]);
    }

    #[test]
    fn invalid_pairs_rejected() {
        let (den, sched, src) = small_setup(15);
        let cfg = cfg_small();
        assert!(DragState::start(&src, &[ControlPair::new((3, 3), (3, 3))], &cfg, &den, &sched).is_err());
        assert!(DragState::start(&src, &[ControlPair::new((3, 3), (3, 16))], &cfg, &den, &sched).is_err());
    }

    /// Gaussian denoiser that fails once the latent leaves a sane range.
    struct Fragile(GaussianAnalyticDenoiser);

    impl Denoiser for Fragile {
        fn linearize<'a>(&'a self, z: &Latent) -> Result<Box<dyn crate::denoiser::Linearization + 'a>> {
            if z.grid.data().iter().any(|v| v.abs() > 1e3) {
                return Err(Error::NonFinite("activations overflowed".into()));
            }
            self.0.linearize(z)
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_partial_report() {
        let (den, sched, src) = small_setup(16);
        let cfg = DragConfig {
            eta: 1e6,
            optimizer: Optimizer::Sgd,
            ..cfg_small()
        };
        let r = run_gooddrag(
            &src,
            &[ControlPair::new((7, 6), (8, 11))],
            &EditMask::rect(16, 16, (2, 13), (2, 14)),
            &cfg,
            LossVariant::InformationPreserving,
            &Fragile(den),
            &sched,
        );
        match r {
            Err(Error::Aborted { report, .. }) => {
                assert!(report.aborted.is_some());
                assert!(report.steps.len() < cfg.drags);
                assert_eq!(report.final_handles.len(), 1);
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected abort"),
        }
    }
}
