//! Loss terms, Adam, rollout-horizon annealing and the greedy training loop.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::findiff::SeriesStencil;
use crate::fom::{ParameterPoint, Trajectory};
use crate::gp::{fit_gp, greedy_select, Candidate, GpFitOptions, GpSurrogate};
use crate::interp::{fit_spline, CubicSpline};
use crate::rom::{rollout_latent_batch, AutoencoderModel, AutoencoderVars, CoeffVars, LatentCoefficients};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub eta4: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub greedy_every: usize,
    pub gp_samples: usize,
    /// Largest rollout horizon as a fraction of the final time.
    pub horizon_cap: f64,
    /// Epochs over which the horizon ramps up; half of `epochs` when unset.
    pub horizon_ramp_epochs: Option<usize>,
    /// Latent RK4 substep; the trajectory's mean output step when unset.
    pub substep: Option<f64>,
    pub seed: u64,
    pub gp: GpFitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta1: 1.0,
            eta2: 1.0,
            eta3: 1.0,
            eta4: 1e-3,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 17_500,
            greedy_every: 2_500,
            gp_samples: 20,
            horizon_cap: 0.1,
            horizon_ramp_epochs: None,
            substep: None,
            seed: 0,
            gp: GpFitOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let etas = [self.eta1, self.eta2, self.eta3, self.eta4];
        if etas.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {etas:?}")));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if !(self.horizon_cap > 0.0 && self.horizon_cap.is_finite()) {
            return Err(Error::Config(format!("horizon_cap must be positive, got {}", self.horizon_cap)));
        }
        if let Some(s) = self.substep {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("substep must be positive, got {s}")));
            }
        }
        if self.gp_samples == 0 {
            return Err(Error::Config("gp_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn ramp_epochs(&self) -> usize {
        self.horizon_ramp_epochs.unwrap_or(self.epochs / 2)
    }

    pub fn rollout_enabled(&self) -> bool {
        self.eta3 > 0.0
    }

    pub fn substep_for(&self, mean_step: f64) -> f64 {
        self.substep.unwrap_or(mean_step)
    }
}

/// Largest rollout horizon for one trajectory at `epoch` (0-based): a linear
/// ramp from its mean output step to `horizon_cap · T`.
pub fn anneal_horizon(epoch: usize, config: &TrainConfig, trajectory: &Trajectory) -> f64 {
    let start = trajectory.mean_step();
    let end = config.horizon_cap * trajectory.final_time();
    let ramp = config.ramp_epochs();
    if epoch >= ramp {
        return end;
    }
    start + (end - start) * epoch as f64 / ramp as f64
}

/// Rollout samples for one trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThetaRollouts {
    pub frames: Vec<usize>,
    pub horizons: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub per_theta: Vec<ThetaRollouts>,
}

impl RolloutBatch {
    pub fn total(&self) -> usize {
        self.per_theta.iter().map(|r| r.frames.len()).sum()
    }

    /// Same frames with every horizon set to zero.
    pub fn with_zero_horizons(&self) -> Self {
        Self {
            per_theta: self
                .per_theta
                .iter()
                .map(|r| ThetaRollouts {
                    frames: r.frames.clone(),
                    horizons: vec![0.0; r.frames.len()],
                })
                .collect(),
        }
    }
}

fn rollable(t: f64, horizon: f64, t_end: f64) -> bool {
    t + horizon <= t_end + 1e-12 * t_end.abs().max(1.0)
}

/// Every frame `j` with `t_j + H ≤ T` gets an independent `Δt ~ U(0, H)`.
pub fn sample_rollout_batch(
    times: &[&[f64]],
    horizons: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    if times.len() != horizons.len() {
        return Err(Error::Dimension(format!(
            "{} trajectories, {} horizons",
            times.len(),
            horizons.len()
        )));
    }
    let mut per_theta = Vec::with_capacity(times.len());
    for (ts, &h) in times.iter().zip(horizons) {
        if !(h > 0.0) {
            return Err(Error::Domain(format!("rollout horizon must be positive, got {h}")));
        }
        let t_end = *ts.last().ok_or_else(|| Error::Domain("empty time grid".into()))?;
        let mut r = ThetaRollouts::default();
        for (j, &t) in ts.iter().enumerate() {
            if rollable(t, h, t_end) {
                r.frames.push(j);
                r.horizons.push(rng.random_range(0.0..=h));
            }
        }
        per_theta.push(r);
    }
    Ok(RolloutBatch { per_theta })
}

/// One trajectory prepared for training.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub trajectory: Trajectory,
    /// Position in the candidate grid, when the trajectory came from one.
    pub grid_index: Option<usize>,
    pub origin: Origin,
    /// Epoch count at which the item joined the training set.
    pub joined_at: usize,
    /// Frames feature-major, `N_u × n_frames`.
    frames: Tensor,
    stencil: Arc<SeriesStencil>,
    spline: CubicSpline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Initial,
    Acquired,
}

impl TrainingItem {
    pub fn new(trajectory: Trajectory, grid_index: Option<usize>, origin: Origin, joined_at: usize) -> Result<Self> {
        let n = trajectory.n_frames();
        let stencil = Arc::new(SeriesStencil::new(&trajectory.times)?);
        let spline = fit_spline(&trajectory.times, &trajectory.states, trajectory.n_u)?;
        let frames = Tensor::matrix(
            trajectory.n_u,
            n,
            crate::rom::transpose(&trajectory.states, n, trajectory.n_u),
        )?;
        Ok(Self {
            trajectory,
            grid_index,
            origin,
            joined_at,
            frames,
            stencil,
            spline,
        })
    }

    pub fn theta(&self) -> ParameterPoint {
        self.trajectory.theta
    }

    pub fn spline(&self) -> &CubicSpline {
        &self.spline
    }

    pub fn stencil(&self) -> &Arc<SeriesStencil> {
        &self.stencil
    }
}

/// Data and latent encodings of one trajectory on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub frames: Var,
    pub latents: Var,
}

pub fn encode_items(tape: &mut Tape, ae: &AutoencoderVars, items: &[TrainingItem]) -> Result<Vec<Encoded>> {
    items
        .iter()
        .map(|it| {
            let frames = tape.constant(it.frames.clone());
            let latents = ae.encode(tape, frames)?;
            Ok(Encoded { frames, latents })
        })
        .collect()
}

fn total_columns(tape: &Tape, encoded: &[Encoded]) -> Result<usize> {
    let mut n = 0;
    for e in encoded {
        n += tape.value(e.frames).dims2()?.1;
    }
    Ok(n)
}

/// Sum over all frames of the L1 reconstruction error, divided by the total
/// frame count.
pub fn loss_recon(tape: &mut Tape, ae: &AutoencoderVars, encoded: &[Encoded]) -> Result<Var> {
    if encoded.is_empty() {
        return Err(Error::Domain("reconstruction loss needs at least one trajectory".into()));
    }
    let n = total_columns(tape, encoded)?;
    let mut terms = Vec::with_capacity(encoded.len());
    for e in encoded {
        let rec = ae.decode(tape, e.latents)?;
        let diff = tape.sub(e.frames, rec)?;
        terms.push(tape.l1_norm(diff)?);
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Squared mismatch between finite-difference latent velocities and the
/// linear model, summed over frames and divided by the total frame count.
pub fn loss_ld(
    tape: &mut Tape,
    encoded: &[Encoded],
    coeffs: &[CoeffVars],
    stencils: &[Arc<SeriesStencil>],
) -> Result<Var> {
    if coeffs.len() != encoded.len() || stencils.len() != encoded.len() {
        return Err(Error::Config(format!(
            "{} trajectories but {} coefficient sets and {} stencils",
            encoded.len(),
            coeffs.len(),
            stencils.len()
        )));
    }
    if encoded.is_empty() {
        return Err(Error::Domain("latent dynamics loss needs at least one trajectory".into()));
    }
    let n = total_columns(tape, encoded)?;
    let mut terms = Vec::with_capacity(encoded.len());
    for ((e, c), st) in encoded.iter().zip(coeffs).zip(stencils) {
        let zdot = tape.column_stencil(e.latents, st.clone())?;
        let model = crate::rom::latent_rhs(tape, e.latents, c)?;
        let r = tape.sub(zdot, model)?;
        terms.push(tape.sq_l2_norm(r)?);
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// L1 error between decoded latent rollouts and spline-interpolated data,
/// divided by the number of rollouts. Zero when the batch is empty.
pub fn loss_rollout(
    tape: &mut Tape,
    ae: &AutoencoderVars,
    encoded: &[Encoded],
    coeffs: &[CoeffVars],
    items: &[TrainingItem],
    substeps: &[f64],
    batch: &RolloutBatch,
) -> Result<Var> {
    let k = encoded.len();
    if coeffs.len() != k || items.len() != k || substeps.len() != k || batch.per_theta.len() != k {
        return Err(Error::Config("rollout inputs disagree on the number of trajectories".into()));
    }
    let n_ro = batch.total();
    if n_ro == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    for i in 0..k {
        let r = &batch.per_theta[i];
        if r.frames.is_empty() {
            continue;
        }
        let it = &items[i];
        let n_u = it.trajectory.n_u;
        let m = r.frames.len();
        let mut target = vec![0.0; n_u * m];
        let mut col = vec![0.0; n_u];
        let t_end = it.trajectory.final_time();
        for (c, (&j, &h)) in r.frames.iter().zip(&r.horizons).enumerate() {
            let t = (it.trajectory.times[j] + h).min(t_end);
            it.spline.eval_into(t, &mut col)?;
            for (row, v) in col.iter().enumerate() {
                target[row * m + c] = *v;
            }
        }
        let target = tape.constant(Tensor::matrix(n_u, m, target)?);
        let cols: Arc<[usize]> = r.frames.as_slice().into();
        let z0 = tape.select_columns(encoded[i].latents, cols)?;
        let z1 = rollout_latent_batch(tape, z0, &r.horizons, &coeffs[i], substeps[i])?;
        let pred = ae.decode(tape, z1)?;
        let diff = tape.sub(target, pred)?;
        terms.push(tape.l1_norm(diff)?);
    }
    let s = tape.add_all(&terms)?;
    Ok(tape.scale(s, 1.0 / n_ro as f64))
}

/// `Σ_i ‖A_i‖_F² + ‖b_i‖₂²`
pub fn regularizer(tape: &mut Tape, coeffs: &[CoeffVars]) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * coeffs.len());
    for c in coeffs {
        terms.push(tape.frobenius_sq(c.a)?);
        terms.push(tape.sq_l2_norm(c.b)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    tape.add_all(&terms)
}

/// Component losses and their weighted sum on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub recon: Var,
    pub ld: Var,
    pub rollout: Option<Var>,
    pub reg: Var,
    pub total: Var,
}

/// `η₁·recon + η₂·ld + η₃·rollout + η₄·reg`; an absent rollout term is
/// omitted entirely.
pub fn total_loss(
    tape: &mut Tape,
    config: &TrainConfig,
    recon: Var,
    ld: Var,
    rollout: Option<Var>,
    reg: Var,
) -> Result<Var> {
    let mut terms = vec![
        tape.scale(recon, config.eta1),
        tape.scale(ld, config.eta2),
    ];
    if let Some(r) = rollout {
        terms.push(tape.scale(r, config.eta3));
    }
    terms.push(tape.scale(reg, config.eta4));
    tape.add_all(&terms)
}

/// Records the full objective. The rollout machinery is only touched when
/// `η₃ > 0` and a batch is given.
pub fn build_objective(
    tape: &mut Tape,
    config: &TrainConfig,
    ae: &AutoencoderVars,
    coeffs: &[CoeffVars],
    items: &[TrainingItem],
    batch: Option<&RolloutBatch>,
) -> Result<LossTerms> {
    let encoded = encode_items(tape, ae, items)?;
    let recon = loss_recon(tape, ae, &encoded)?;
    let stencils: Vec<_> = items.iter().map(|it| it.stencil.clone()).collect();
    let ld = loss_ld(tape, &encoded, coeffs, &stencils)?;
    let rollout = match batch {
        Some(b) if config.rollout_enabled() => {
            let substeps: Vec<f64> = items
                .iter()
                .map(|it| config.substep_for(it.trajectory.mean_step()))
                .collect();
            Some(loss_rollout(tape, ae, &encoded, coeffs, items, &substeps, b)?)
        }
        _ => None,
    };
    let reg = regularizer(tape, coeffs)?;
    let total = total_loss(tape, config, recon, ld, rollout, reg)?;
    Ok(LossTerms {
        recon,
        ld,
        rollout,
        reg,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub recon: f64,
    pub ld: f64,
    pub rollout: Option<f64>,
    pub reg: f64,
    pub total: f64,
}

impl LossValues {
    fn read(tape: &Tape, t: &LossTerms) -> Self {
        Self {
            recon: tape.value(t.recon).item(),
            ld: tape.value(t.ld).item(),
            rollout: t.rollout.map(|r| tape.value(r).item()),
            reg: tape.value(t.reg).item(),
            total: tape.value(t.total).item(),
        }
    }
}

/// Objective value without gradients.
pub fn evaluate_objective(
    config: &TrainConfig,
    model: &AutoencoderModel,
    coeffs: &[LatentCoefficients],
    items: &[TrainingItem],
    batch: Option<&RolloutBatch>,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let ae = model.bind(&mut tape, false);
    let cv: Vec<_> = coeffs.iter().map(|c| c.bind(&mut tape, false)).collect();
    let terms = build_objective(&mut tape, config, &ae, &cv, items, batch)?;
    Ok(LossValues::read(&tape, &terms))
}

/// Objective value and gradients in parameter-slot order: encoder layers
/// (weight, bias), decoder layers, then `(A, b)` per coefficient set.
pub fn objective_gradients(
    config: &TrainConfig,
    model: &AutoencoderModel,
    coeffs: &[LatentCoefficients],
    items: &[TrainingItem],
    batch: Option<&RolloutBatch>,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let ae = model.bind(&mut tape, true);
    let cv: Vec<_> = coeffs.iter().map(|c| c.bind(&mut tape, true)).collect();
    let terms = build_objective(&mut tape, config, &ae, &cv, items, batch)?;
    tape.backward(terms.total)?;
    let vars: Vec<Var> = ae
        .encoder
        .vars()
        .chain(ae.decoder.vars())
        .chain(cv.iter().flat_map(|c| [c.a, c.b]))
        .collect();
    let grads = vars
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    Ok((LossValues::read(&tape, &terms), grads))
}

/// Mutable parameter slices in the same order as [`objective_gradients`].
pub fn param_slots<'a>(
    model: &'a mut AutoencoderModel,
    coeffs: &'a mut [LatentCoefficients],
) -> Vec<&'a mut [f64]> {
    let mut slots: Vec<&mut [f64]> = model.encoder.params_mut().collect();
    slots.extend(model.decoder.params_mut());
    for c in coeffs.iter_mut() {
        slots.push(&mut c.a);
        slots.push(&mut c.b);
    }
    slots
}

#[derive(Debug, Clone, Default, PartialEq)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction. Moment buffers are kept per parameter slot, so
/// slots appended later (new coefficient sets) start from a fresh step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            slots: Vec::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.learning_rate, c.beta1, c.beta2, c.epsilon)
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    /// One update. Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter slots, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.len() > params.len() {
            return Err(Error::Dimension("optimizer has more slots than parameters".into()));
        }
        for (s, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.slots.get(s).is_some_and(|sl| sl.m.len() != p.len()) {
                return Err(Error::Dimension(format!("slot {s}: parameter/gradient size mismatch")));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} in parameter slot {s} entry {i}",
                    g[i]
                )));
            }
        }
        while self.slots.len() < params.len() {
            let n = params[self.slots.len()].len();
            self.slots.push(AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        }
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powf(slot.t as f64);
            let c2 = 1.0 - self.beta2.powf(slot.t as f64);
            for i in 0..p.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = slot.m[i] / c1;
                let vh = slot.v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: AutoencoderModel,
    /// One set per training trajectory, in the same order.
    pub coeffs: Vec<LatentCoefficients>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    rollout_rng: ChaCha8Rng,
    greedy_rng: ChaCha8Rng,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub recon: f64,
    pub ld: f64,
    pub rollout: Option<f64>,
    pub reg: f64,
    pub total: f64,
    pub wall_seconds: f64,
    pub n_train_params: usize,
}

/// Access to full-order solutions for acquisition.
pub trait FomSource {
    /// Candidate parameters, indexed by grid position.
    fn candidates(&self) -> &[ParameterPoint];
    /// Initial frame and output times for candidate `index`.
    fn setup(&self, index: usize) -> Result<(Vec<f64>, Vec<f64>)>;
    fn solve(&self, index: usize) -> Result<Trajectory>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Epoch(HistoryRow),
    NoRollableFrames { epoch: usize, theta: ParameterPoint },
    Acquired { epoch: usize, index: usize, theta: ParameterPoint, score: f64 },
    SkippedCandidate { epoch: usize, index: usize, reason: String },
    Exhausted { epoch: usize },
}

/// Drives epochs and acquisitions over a growing training set.
pub struct Trainer<'s> {
    pub config: TrainConfig,
    pub state: TrainState,
    pub items: Vec<TrainingItem>,
    source: Option<&'s dyn FomSource>,
    exhausted: bool,
    started: Instant,
}

impl<'s> Trainer<'s> {
    pub fn new(
        config: TrainConfig,
        model: AutoencoderModel,
        initial: Vec<(Option<usize>, Trajectory)>,
        source: Option<&'s dyn FomSource>,
    ) -> Result<Self> {
        config.validate()?;
        if initial.is_empty() {
            return Err(Error::Domain("training needs at least one trajectory".into()));
        }
        let mut items = Vec::with_capacity(initial.len());
        for (idx, traj) in initial {
            if traj.n_u != model.n_u() {
                return Err(Error::Dimension(format!(
                    "trajectory has {} nodes, autoencoder expects {}",
                    traj.n_u,
                    model.n_u()
                )));
            }
            items.push(TrainingItem::new(traj, idx, Origin::Initial, 0)?);
        }
        let l = model.latent_dim();
        let coeffs = vec![LatentCoefficients::zeros(l); items.len()];
        let state = TrainState {
            model,
            coeffs,
            adam: Adam::from_config(&config),
            epoch: 0,
            rollout_rng: stream_rng(config.seed, 1),
            greedy_rng: stream_rng(config.seed, 2),
        };
        Ok(Self {
            config,
            state,
            items,
            source,
            exhausted: false,
            started: Instant::now(),
        })
    }

    fn rollout_batch(&mut self, events: &mut dyn FnMut(TrainEvent)) -> Result<Option<RolloutBatch>> {
        if !self.config.rollout_enabled() {
            return Ok(None);
        }
        let horizons: Vec<f64> = self
            .items
            .iter()
            .map(|it| anneal_horizon(self.state.epoch, &self.config, &it.trajectory))
            .collect();
        let times: Vec<&[f64]> = self.items.iter().map(|it| it.trajectory.times.as_slice()).collect();
        let batch = sample_rollout_batch(&times, &horizons, &mut self.state.rollout_rng)?;
        for (it, r) in self.items.iter().zip(&batch.per_theta) {
            if r.frames.is_empty() {
                events(TrainEvent::NoRollableFrames {
                    epoch: self.state.epoch + 1,
                    theta: it.theta(),
                });
            }
        }
        Ok(Some(batch))
    }

    /// Evaluates the objective, backpropagates, and applies one Adam step.
    pub fn run_epoch(&mut self, events: &mut dyn FnMut(TrainEvent)) -> Result<HistoryRow> {
        let batch = self.rollout_batch(events)?;
        let (values, grads) = objective_gradients(
            &self.config,
            &self.state.model,
            &self.state.coeffs,
            &self.items,
            batch.as_ref(),
        )?;
        if !values.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {} at epoch {}",
                values.total,
                self.state.epoch + 1
            )));
        }
        let TrainState { model, coeffs, adam, .. } = &mut self.state;
        adam.step(&mut param_slots(model, coeffs), &grads)?;
        self.state.epoch += 1;
        let row = HistoryRow {
            epoch: self.state.epoch,
            recon: values.recon,
            ld: values.ld,
            rollout: values.rollout,
            reg: values.reg,
            total: values.total,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            n_train_params: self.items.len(),
        };
        events(TrainEvent::Epoch(row.clone()));
        Ok(row)
    }

    /// GP fitted on the coefficient sets that have been trained for at least
    /// one epoch.
    pub fn fit_surrogate(&mut self) -> Result<GpSurrogate> {
        let (thetas, sets): (Vec<_>, Vec<_>) = self
            .items
            .iter()
            .zip(&self.state.coeffs)
            .filter(|(it, _)| it.joined_at < self.state.epoch)
            .map(|(it, c)| (it.theta(), c.clone()))
            .unzip();
        fit_gp(&thetas, &sets, &self.config.gp, &mut self.state.greedy_rng)
    }

    /// Runs one greedy acquisition. Returns the grid index added, if any.
    pub fn acquire(&mut self, events: &mut dyn FnMut(TrainEvent)) -> Result<Option<usize>> {
        let Some(source) = self.source else {
            return Ok(None);
        };
        if self.exhausted {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        let taken: Vec<ParameterPoint> = self.items.iter().map(|it| it.theta()).collect();
        let pool: Vec<usize> = (0..source.candidates().len())
            .filter(|&i| {
                let th = source.candidates()[i];
                !self.items.iter().any(|it| it.grid_index == Some(i)) && !taken.contains(&th)
            })
            .collect();
        if pool.is_empty() {
            self.exhausted = true;
            events(TrainEvent::Exhausted { epoch });
            return Ok(None);
        }
        let surrogate = self.fit_surrogate()?;
        let mut candidates = Vec::with_capacity(pool.len());
        for &i in &pool {
            let (initial_state, times) = source.setup(i)?;
            let mean_step = (times[times.len() - 1] - times[0]) / (times.len() - 1).max(1) as f64;
            candidates.push(Candidate {
                theta: source.candidates()[i],
                initial_state,
                times,
                substep: self.config.substep_for(mean_step),
            });
        }
        let choice = greedy_select(
            &surrogate,
            &self.state.model,
            &candidates,
            self.config.gp_samples,
            &mut self.state.greedy_rng,
        )?;
        for c in choice.ranking() {
            let index = pool[c];
            match source.solve(index) {
                Ok(traj) => {
                    let item = TrainingItem::new(traj, Some(index), Origin::Acquired, epoch)?;
                    events(TrainEvent::Acquired {
                        epoch,
                        index,
                        theta: item.theta(),
                        score: choice.scores[c],
                    });
                    self.items.push(item);
                    self.state
                        .coeffs
                        .push(LatentCoefficients::zeros(self.state.model.latent_dim()));
                    return Ok(Some(index));
                }
                Err(e) if e.is_numerical() => {
                    events(TrainEvent::SkippedCandidate {
                        epoch,
                        index,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub items: Vec<TrainingItem>,
    pub history: Vec<HistoryRow>,
    pub surrogate: GpSurrogate,
}

/// Full training: `epochs` Adam steps on the full batch, with a greedy
/// acquisition after every `greedy_every`-th epoch. A set acquired after the
/// final epoch is never trained and stays out of the returned surrogate.
pub fn train_loop(
    config: TrainConfig,
    model: AutoencoderModel,
    initial: Vec<(Option<usize>, Trajectory)>,
    source: Option<&dyn FomSource>,
    events: &mut dyn FnMut(TrainEvent),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, model, initial, source)?;
    let epochs = trainer.config.epochs;
    let every = trainer.config.greedy_every;
    let mut history = Vec::with_capacity(epochs);
    for e in 1..=epochs {
        history.push(trainer.run_epoch(events)?);
        if every > 0 && e % every == 0 {
            trainer.acquire(events)?;
        }
    }
    let surrogate = trainer.fit_surrogate()?;
    Ok(TrainOutcome {
        state: trainer.state,
        items: trainer.items,
        history,
        surrogate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::findiff::differentiate_series;

    fn traj(times: Vec<f64>, n_u: usize, f: impl Fn(f64, usize) -> f64) -> Trajectory {
        let states = times.iter().flat_map(|&t| (0..n_u).map(move |k| (t, k))).map(|(t, k)| f(t, k)).collect();
        Trajectory::new(ParameterPoint::new(0.1, 1.0).unwrap(), times, states, n_u).unwrap()
    }

    fn uniform(n: usize, t_end: f64) -> Vec<f64> {
        (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let v: Vec<Var> = [2.0, 3.0, 4.0, 10.0]
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let c = TrainConfig::default();
        let t = total_loss(&mut tape, &c, v[0], v[1], Some(v[2]), v[3]).unwrap();
        assert!((tape.value(t).item() - 9.01).abs() < 1e-12);
    }

    #[test]
    fn regularizer_matches_direct_sum() {
        let sets = [
            LatentCoefficients::new(2, vec![1.0, -2.0, 0.5, 3.0], vec![0.25, -1.0]).unwrap(),
            LatentCoefficients::new(2, vec![0.0, 1.5, 0.0, 0.0], vec![2.0, 0.0]).unwrap(),
        ];
        let direct: f64 = sets.iter().flat_map(|c| c.flatten()).map(|x| x * x).sum();
        let mut tape = Tape::new();
        let cv: Vec<_> = sets.iter().map(|c| c.bind(&mut tape, false)).collect();
        let r = regularizer(&mut tape, &cv).unwrap();
        assert_eq!(tape.value(r).item(), direct);

        let mut tape = Tape::new();
        let cv = vec![LatentCoefficients::zeros(3).bind(&mut tape, false)];
        let r = regularizer(&mut tape, &cv).unwrap();
        assert_eq!(tape.value(r).item(), 0.0);
    }

    #[test]
    fn recon_single_frame_by_hand() {
        let mut tape = Tape::new();
        let frames = tape.constant(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap());
        let latents = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        // decoder with zero weights outputs zero
        let zero = crate::rom::Mlp::from_layers(vec![crate::rom::Layer {
            weight: Tensor::matrix(2, 1, vec![0.0; 2]).unwrap(),
            bias: Tensor::vector(vec![0.0; 2]),
        }])
        .unwrap();
        let enc = crate::rom::Mlp::from_layers(vec![crate::rom::Layer {
            weight: Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        }])
        .unwrap();
        let model = AutoencoderModel::from_parts(enc, zero, 0).unwrap();
        let ae = model.bind(&mut tape, false);
        let l = loss_recon(&mut tape, &ae, &[Encoded { frames, latents }]).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let t = traj(uniform(101, 2.0), 1, |t, _| t);
        let c = TrainConfig {
            epochs: 100,
            horizon_cap: 0.1,
            ..TrainConfig::default()
        };
        assert!((anneal_horizon(0, &c, &t) - 0.02).abs() < 1e-15);
        assert!((anneal_horizon(50, &c, &t) - 0.2).abs() < 1e-15);
        assert!((anneal_horizon(80, &c, &t) - 0.2).abs() < 1e-15);
        assert!((anneal_horizon(25, &c, &t) - 0.11).abs() < 1e-15);
    }

    #[test]
    fn rollable_frames() {
        let times = uniform(5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_rollout_batch(&[&times], &[0.5], &mut rng).unwrap();
        assert_eq!(b.per_theta[0].frames, vec![0, 1, 2, 3]);
        assert!(b.per_theta[0].horizons.iter().all(|h| (0.0..=0.5).contains(h)));

        let b = sample_rollout_batch(&[&times], &[2.5], &mut rng).unwrap();
        assert_eq!(b.total(), 0);

        let again = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            sample_rollout_batch(&[&times, &times], &[0.5, 1.0], &mut r).unwrap()
        };
        assert_eq!(again(9), again(9));
        assert!(sample_rollout_batch(&[&times], &[0.0], &mut rng).is_err());
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = vec![1.0, -2.0];
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut [&mut p[..]], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let mut q = [0.5, 0.5];
        adam.step(&mut [&mut q[..]], &[vec![3.0, -0.01]]).unwrap();
        assert!((q[0] - (0.5 - 1e-3)).abs() < 1e-10);
        assert!((q[1] - (0.5 + 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = vec![1.0];
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let r = adam.step(&mut [&mut p[..]], &[vec![f64::NAN]]);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn adam_quadratic_bowl() {
        let c = [0.3, -1.2, 2.5];
        let mut x = [0.0; 3];
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        let mut steps = 0;
        while steps < 5000 {
            let g: Vec<f64> = x.iter().zip(&c).map(|(x, c)| 2.0 * (x - c)).collect();
            adam.step(&mut [&mut x[..]], &[g]).unwrap();
            steps += 1;
        }
        for (x, c) in x.iter().zip(&c) {
            assert!((x - c).abs() < 1e-6, "{x} vs {c}");
        }
    }

    #[test]
    fn ld_loss_at_zero_coefficients_is_mean_squared_velocity() {
        let times = vec![0.0, 0.1, 0.25, 0.3, 0.5, 0.8];
        let t = traj(times.clone(), 4, |t, k| (t * (k as f64 + 1.0)).sin());
        let item = TrainingItem::new(t, None, Origin::Initial, 0).unwrap();
        let model = AutoencoderModel::new(&[4, 3, 2], 3).unwrap();
        let mut tape = Tape::new();
        let ae = model.bind(&mut tape, false);
        let cv = vec![LatentCoefficients::zeros(2).bind(&mut tape, false)];
        let enc = encode_items(&mut tape, &ae, std::slice::from_ref(&item)).unwrap();
        let l = loss_ld(&mut tape, &enc, &cv, &[item.stencil().clone()]).unwrap();

        let z = model.encode(&crate::rom::transpose(&item.trajectory.states, 6, 4), 6).unwrap();
        let z_rows = crate::rom::transpose(&z, 2, 6);
        let v = differentiate_series(&times, &z_rows, 2).unwrap();
        let expect = v.iter().map(|x| x * x).sum::<f64>() / 6.0;
        assert!((tape.value(l).item() - expect).abs() < 1e-13 * expect.max(1.0));
    }

    #[test]
    fn ld_loss_vanishes_on_linear_latents() {
        // identity encoder on 1-D data
        let layer = |w: f64| crate::rom::Layer {
            weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        let model = AutoencoderModel::from_parts(
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            0,
        )
        .unwrap();
        let times = vec![0.0, 0.3, 0.4, 1.0, 1.1];
        let item = TrainingItem::new(traj(times, 1, |t, _| 0.5 - 2.0 * t), None, Origin::Initial, 0).unwrap();
        let coeffs = [LatentCoefficients::new(1, vec![0.0], vec![-2.0]).unwrap()];
        let c = TrainConfig {
            eta3: 0.0,
            ..TrainConfig::default()
        };
        let v = evaluate_objective(&c, &model, &coeffs, &[item], None).unwrap();
        assert!(v.ld < 1e-24);
        assert_eq!(v.recon, 0.0);
        assert!(v.rollout.is_none());
    }

    #[test]
    fn ld_hand_case_quadratic_latent() {
        // z(t) = t² on t = 0, 1, 2, 3 with identity maps; the one-sided
        // stencils give exact derivatives of a quadratic: 0, 2, 4, 6.
        let layer = |w: f64| crate::rom::Layer {
            weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        let model = AutoencoderModel::from_parts(
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            0,
        )
        .unwrap();
        let item = TrainingItem::new(traj(vec![0.0, 1.0, 2.0, 3.0], 1, |t, _| t * t), None, Origin::Initial, 0).unwrap();
        let c = TrainConfig {
            eta3: 0.0,
            ..TrainConfig::default()
        };
        let v = evaluate_objective(&c, &model, &[LatentCoefficients::zeros(1)], &[item], None).unwrap();
        assert!((v.ld - (0.0 + 4.0 + 16.0 + 36.0) / 4.0).abs() < 1e-12);
    }

    fn toy_items(n_u: usize, n_frames: usize, variable: bool) -> Vec<TrainingItem> {
        let mut times = uniform(n_frames, 1.0);
        if variable {
            for (i, t) in times.iter_mut().enumerate().skip(1).take(n_frames - 2) {
                *t += 0.3 / (n_frames - 1) as f64 * ((i * 7 % 5) as f64 / 4.0 - 0.5);
            }
        }
        [(0.05, 0.7), (0.2, 1.3)]
            .iter()
            .map(|&(nu, om)| {
                let states = times
                    .iter()
                    .flat_map(|&t| {
                        (0..n_u).map(move |k| {
                            let x = k as f64 / n_u as f64;
                            om * (-nu * 10.0 * t).exp() * (2.0 * std::f64::consts::PI * x).sin() + 0.1 * t
                        })
                    })
                    .collect();
                let tr = Trajectory::new(ParameterPoint::new(nu, om).unwrap(), times.clone(), states, n_u).unwrap();
                TrainingItem::new(tr, None, Origin::Initial, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn rollout_with_zero_horizons_is_rollable_reconstruction() {
        let items = toy_items(5, 8, true);
        let model = AutoencoderModel::new(&[5, 4, 2], 1).unwrap();
        let coeffs = vec![
            LatentCoefficients::new(2, vec![0.1, -0.3, 0.2, 0.05], vec![0.5, -0.1]).unwrap(),
            LatentCoefficients::new(2, vec![-0.2, 0.0, 0.4, 0.1], vec![0.0, 0.3]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let times: Vec<&[f64]> = items.iter().map(|i| i.trajectory.times.as_slice()).collect();
        let batch = sample_rollout_batch(&times, &[0.3, 0.45], &mut rng).unwrap().with_zero_horizons();
        let c = TrainConfig::default();
        let v = evaluate_objective(&c, &model, &coeffs, &items, Some(&batch)).unwrap();

        let mut direct = 0.0;
        for (it, r) in items.iter().zip(&batch.per_theta) {
            for &j in &r.frames {
                let u = it.trajectory.frame(j);
                let rec = model.decode(&model.encode(u, 1).unwrap(), 1).unwrap();
                direct += u.iter().zip(&rec).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
        direct /= batch.total() as f64;
        assert!((v.rollout.unwrap() - direct).abs() < 1e-12, "{:?} vs {direct}", v.rollout);
    }

    #[test]
    fn rollout_hand_case_single_rk4_step() {
        // N_u = L = 1, identity maps, ż = a z + b, one frame rolled by h with
        // a single RK4 step.
        let layer = |w: f64| crate::rom::Layer {
            weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        let model = AutoencoderModel::from_parts(
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            0,
        )
        .unwrap();
        let (a, b, h, z0) = (-0.5, 0.25, 0.5, 2.0);
        // data linear in t, so the spline target at t = h is exact
        let item = TrainingItem::new(traj(vec![0.0, 0.5, 1.0], 1, |t, _| 2.0 + t), None, Origin::Initial, 0).unwrap();
        let f = |z: f64| a * z + b;
        let k1 = f(z0);
        let k2 = f(z0 + 0.5 * h * k1);
        let k3 = f(z0 + 0.5 * h * k2);
        let k4 = f(z0 + h * k3);
        let z1 = z0 + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let expect = (2.5 - z1).abs();

        let batch = RolloutBatch {
            per_theta: vec![ThetaRollouts {
                frames: vec![0],
                horizons: vec![h],
            }],
        };
        let c = TrainConfig {
            substep: Some(h),
            ..TrainConfig::default()
        };
        let coeffs = [LatentCoefficients::new(1, vec![a], vec![b]).unwrap()];
        let v = evaluate_objective(&c, &model, &coeffs, &[item], Some(&batch)).unwrap();
        assert!((v.rollout.unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn rollout_vanishes_for_exact_linear_latent_model() {
        // u = z with z(t) = e^{a t}(z0 + b/a) − b/a sampled exactly; identity maps
        let layer = |w: f64| crate::rom::Layer {
            weight: Tensor::matrix(1, 1, vec![w]).unwrap(),
            bias: Tensor::vector(vec![0.0]),
        };
        let model = AutoencoderModel::from_parts(
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            crate::rom::Mlp::from_layers(vec![layer(1.0)]).unwrap(),
            0,
        )
        .unwrap();
        let (a, b, z0) = (-0.8, 0.3, 1.5);
        let exact = move |t: f64| (a * t).exp() * (z0 + b / a) - b / a;
        let item = TrainingItem::new(traj(uniform(201, 2.0), 1, |t, _| exact(t)), None, Origin::Initial, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_rollout_batch(&[&item.trajectory.times], &[0.4], &mut rng).unwrap();
        let c = TrainConfig {
            substep: Some(0.01),
            ..TrainConfig::default()
        };
        let coeffs = [LatentCoefficients::new(1, vec![a], vec![b]).unwrap()];
        let v = evaluate_objective(&c, &model, &coeffs, &[item], Some(&batch)).unwrap();
        // limited by the spline target accuracy, not the integrator
        assert!(v.rollout.unwrap() < 1e-7, "{:?}", v.rollout);
    }

    fn flat_params(model: &AutoencoderModel, coeffs: &[LatentCoefficients]) -> Vec<Vec<f64>> {
        let mut m = model.clone();
        let mut c = coeffs.to_vec();
        param_slots(&mut m, &mut c).into_iter().map(|s| s.to_vec()).collect()
    }

    #[allow(clippy::needless_range_loop)]
    fn check_gradients(config: &TrainConfig, variable: bool) {
        let items = toy_items(6, 7, variable);
        let model = AutoencoderModel::with_frequency(&[6, 5, 2], 11, 3.0).unwrap();
        let coeffs = vec![
            LatentCoefficients::new(2, vec![0.3, -0.2, 0.1, -0.4], vec![0.2, -0.1]).unwrap(),
            LatentCoefficients::new(2, vec![-0.1, 0.5, 0.0, 0.2], vec![-0.3, 0.4]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times: Vec<&[f64]> = items.iter().map(|i| i.trajectory.times.as_slice()).collect();
        let batch = sample_rollout_batch(&times, &[0.3, 0.3], &mut rng).unwrap();
        let (_, grads) = objective_gradients(config, &model, &coeffs, &items, Some(&batch)).unwrap();
        let base = flat_params(&model, &coeffs);
        let eps = 1e-6;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (s, slot) in base.iter().enumerate() {
            for i in 0..slot.len() {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut c = coeffs.clone();
                    param_slots(&mut m, &mut c)[s][i] += delta;
                    evaluate_objective(config, &m, &c, &items, Some(&batch)).unwrap().total
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                num = num.max((fd - grads[s][i]).abs());
                den = den.max(fd.abs());
            }
        }
        assert!(num / den < 1e-5, "relative gradient error {}", num / den);
    }

    #[test]
    fn gradient_check_each_term() {
        let only = |e: [f64; 4]| TrainConfig {
            eta1: e[0],
            eta2: e[1],
            eta3: e[2],
            eta4: e[3],
            ..TrainConfig::default()
        };
        check_gradients(&only([1.0, 0.0, 0.0, 0.0]), true);
        check_gradients(&only([0.0, 1.0, 0.0, 0.0]), true);
        check_gradients(&only([0.0, 0.0, 1.0, 0.0]), true);
        check_gradients(&only([0.0, 0.0, 0.0, 1.0]), false);
        check_gradients(&TrainConfig::default(), false);
    }

    #[test]
    fn objective_ignores_batch_without_rollout_weight() {
        let items = toy_items(4, 6, false);
        let model = AutoencoderModel::new(&[4, 3, 2], 5).unwrap();
        let coeffs = vec![LatentCoefficients::zeros(2); 2];
        let c = TrainConfig {
            eta3: 0.0,
            ..TrainConfig::default()
        };
        let times: Vec<&[f64]> = items.iter().map(|i| i.trajectory.times.as_slice()).collect();
        let b1 = sample_rollout_batch(&times, &[0.2, 0.2], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b2 = sample_rollout_batch(&times, &[0.5, 0.1], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (v1, g1) = objective_gradients(&c, &model, &coeffs, &items, Some(&b1)).unwrap();
        let (v2, g2) = objective_gradients(&c, &model, &coeffs, &items, Some(&b2)).unwrap();
        let (v0, g0) = objective_gradients(&c, &model, &coeffs, &items, None).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(v1, v0);
        assert_eq!(g1, g2);
        assert_eq!(g1, g0);
    }

    fn toy_run(seed: u64) -> TrainOutcome {
        let items = toy_items(9, 11, true);
        let initial = items.into_iter().map(|i| (None, i.trajectory)).collect();
        let model = AutoencoderModel::new(&[9, 6, 2], seed).unwrap();
        let c = TrainConfig {
            epochs: 200,
            learning_rate: 1e-2,
            greedy_every: 1000,
            seed,
            ..TrainConfig::default()
        };
        train_loop(c, model, initial, None, &mut |_| {}).unwrap()
    }

    #[test]
    fn toy_training_reduces_loss_tenfold_and_is_deterministic() {
        let out = toy_run(7);
        assert_eq!(out.history.len(), 200);
        let first = out.history[0].total;
        let last = out.history.last().unwrap().total;
        assert!(last * 10.0 <= first, "{first} -> {last}");
        assert_eq!(out.items.len(), 2);
        assert_eq!(out.state.coeffs.len(), 2);
        let again = toy_run(7);
        assert_eq!(again.history.last().unwrap().total, last);
    }
}
