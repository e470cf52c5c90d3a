//! Particle discretizations of MMD-energy gradient flows.
//!
//! * [`run_ift`]: interaction-force transport by JKO splitting. Each iteration
//!   moves the particles along the negative witness gradient, then re-solves
//!   the weights with a simplex QP that trades the energy against an MMD
//!   proximity term to the previous iterate.
//! * [`run_mmd_flow`]: fixed-weight particle descent, optionally with noise
//!   injected at the gradient evaluation points.
//! * [`run_wfr`]: the same transport step followed by a multiplicative
//!   (entropic mirror descent) weight update.
//!
//! Losses are the full `MMD^2` of the current iterate. Splitting methods
//! record one step per half-step, so an iteration counts as two steps.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::MmdEnergy;
use crate::error::Error as InputError;
use crate::kernels::GramBundle;
use crate::measures::{clamp_small_weights, simplex_project, ParticleMeasure, MASS_TOLERANCE};
use crate::points::PointCloud;
use crate::solvers::{assemble_mmd_step_qp, qp_pgd_step, solve_qp_exact, SolverError, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdStepMode {
    /// Solve the weight QP to tolerance.
    ExactQp,
    /// One projected-gradient step on the weight QP.
    SinglePgd,
}

/// Locations the proximal term compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxAnchor {
    /// `sum a_prev_i delta(x_old_i)`: the previous iterate as it was.
    OldLocations,
    /// `sum a_prev_i delta(x_new_i)`: previous weights on the moved particles.
    NewLocations,
}

/// How `tau` maps to the step applied to each particle position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportScaling {
    /// `x_i <- x_i - tau * grad w(x_i)`.
    #[default]
    Absolute,
    /// `x_i <- x_i - (tau / n) * grad w(x_i)`: `tau` is a step on positions of
    /// particles carrying mass `1/n`, as when differentiating the energy with
    /// respect to the stacked particle coordinates.
    PerParticleMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Transport step size, interpreted through `transport_scaling`.
    pub tau: f64,
    pub transport_scaling: TransportScaling,
    /// Reaction step size: WFR mirror-descent rate, and the default
    /// projected-gradient step of the single-PGD weight update.
    pub eta: f64,
    /// Energy weight relative to a unit proximal weight in the weight QP.
    pub prox_tradeoff: f64,
    /// Step of the single-PGD weight update. `None` uses `eta`.
    pub pgd_step: Option<f64>,
    pub mmd_step_mode: MmdStepMode,
    pub prox_anchor: ProxAnchor,
    /// Standard deviation of the gradient-point noise.
    pub noise_level: f64,
    /// Noise is applied during the first `noise_off_iteration` steps only.
    pub noise_off_iteration: usize,
    pub iterations: usize,
    pub snapshot_every: usize,
    pub loss_every: usize,
    pub seed: u64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    /// Diagonal jitter added to `Kxx` inside the weight QP.
    pub jitter: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tau: 50.0,
            transport_scaling: TransportScaling::Absolute,
            eta: 0.1,
            prox_tradeoff: 0.1,
            pgd_step: None,
            mmd_step_mode: MmdStepMode::SinglePgd,
            prox_anchor: ProxAnchor::OldLocations,
            noise_level: 0.0,
            noise_off_iteration: 0,
            iterations: 3000,
            snapshot_every: 100,
            loss_every: 1,
            seed: 0,
            qp_tol: DEFAULT_TOL,
            qp_max_iter: DEFAULT_MAX_ITER,
            jitter: 0.0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), InputError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(InputError::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("eta", self.eta)?;
        if !(self.prox_tradeoff.is_finite() && self.prox_tradeoff >= 0.0) {
            return Err(InputError::invalid("prox_tradeoff must be nonnegative"));
        }
        if let Some(s) = self.pgd_step {
            positive("pgd_step", s)?;
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(InputError::invalid("noise_level must be nonnegative"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(InputError::invalid("jitter must be nonnegative"));
        }
        if self.iterations == 0 || self.snapshot_every == 0 || self.loss_every == 0 {
            return Err(InputError::invalid(
                "iterations, snapshot_every and loss_every must be at least 1",
            ));
        }
        Ok(())
    }

    pub fn effective_pgd_step(&self) -> f64 {
        self.pgd_step.unwrap_or(self.eta)
    }

    /// Step applied to particle positions for a cloud of `n` particles.
    pub fn effective_tau(&self, n: usize) -> f64 {
        match self.transport_scaling {
            TransportScaling::Absolute => self.tau,
            TransportScaling::PerParticleMass => self.tau / n as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub measure: ParticleMeasure,
}

/// Loss curve and particle snapshots of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub losses: Vec<LossRecord>,
    pub snapshots: Vec<Snapshot>,
    /// Steps charged per iteration of the method.
    pub step_accounting: usize,
}

impl Trace {
    fn new(step_accounting: usize) -> Self {
        Self {
            losses: Vec::new(),
            snapshots: Vec::new(),
            step_accounting,
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|r| r.loss)
    }

    pub fn final_measure(&self) -> Option<&ParticleMeasure> {
        self.snapshots.last().map(|s| &s.measure)
    }

    /// Loss recorded at exactly `step`, if any.
    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.losses
            .binary_search_by_key(&step, |r| r.step)
            .ok()
            .map(|i| self.losses[i].loss)
    }
}

#[derive(Debug, Clone, Error)]
pub enum FlowError {
    #[error(transparent)]
    Input(#[from] InputError),

    #[error("weight step failed: {0}")]
    Solver(#[from] SolverError),

    #[error("non-finite update at step {step} (particle {particle})")]
    Diverged { step: usize, particle: usize },

    #[error("all weights vanished at step {step}")]
    Degenerate { step: usize },
}

impl FlowError {
    fn at_step(self, step: usize) -> Self {
        match self {
            FlowError::Diverged { particle, .. } => FlowError::Diverged { step, particle },
            FlowError::Degenerate { .. } => FlowError::Degenerate { step },
            other => other,
        }
    }
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunFailure {
    #[source]
    pub error: FlowError,
    pub partial: Trace,
}

struct Recorder {
    trace: Trace,
    loss_every: usize,
    snapshot_every: usize,
    last_step: usize,
}

impl Recorder {
    fn new(step_accounting: usize, cfg: &FlowConfig, last_step: usize) -> Self {
        Self {
            trace: Trace::new(step_accounting),
            loss_every: cfg.loss_every,
            snapshot_every: cfg.snapshot_every,
            last_step,
        }
    }

    fn record(&mut self, step: usize, loss: impl FnOnce() -> f64, mu: &ParticleMeasure) {
        let boundary = step == 0 || step == self.last_step;
        if boundary || step % self.loss_every == 0 {
            self.trace.losses.push(LossRecord { step, loss: loss() });
        }
        if boundary || step % self.snapshot_every == 0 {
            self.trace.snapshots.push(Snapshot {
                step,
                measure: mu.clone(),
            });
        }
    }

    fn fail(self, error: FlowError) -> RunFailure {
        RunFailure {
            error,
            partial: self.trace,
        }
    }
}

fn check_start(energy: &MmdEnergy, mu0: &ParticleMeasure, cfg: &FlowConfig) -> Result<(), FlowError> {
    cfg.validate()?;
    mu0.validate_probability()?;
    if mu0.dim() != energy.dim() {
        return Err(InputError::DimensionMismatch {
            expected: energy.dim(),
            found: mu0.dim(),
        }
        .into());
    }
    Ok(())
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Moves every location by `-tau` times its gradient; weights are untouched.
fn apply_transport(mu: &ParticleMeasure, grads: &PointCloud, tau: f64) -> Result<ParticleMeasure, FlowError> {
    let mut next = mu.clone();
    for i in 0..mu.len() {
        let g = grads.point(i);
        let x = next.locations.point_mut(i);
        for (xd, gd) in x.iter_mut().zip(g) {
            *xd -= tau * gd;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Diverged { step: 0, particle: i });
        }
    }
    Ok(next)
}

fn perturbed_points<R: rand::Rng>(locations: &PointCloud, noise_level: f64, rng: &mut R) -> PointCloud {
    let normal = Normal::new(0.0, noise_level).expect("noise level is finite and nonnegative");
    let data: Vec<f64> = locations
        .as_flat()
        .iter()
        .map(|x| x + normal.sample(rng))
        .collect();
    PointCloud::from_flat(locations.dim(), data).expect("same shape as input")
}

/// One transport step `x_i <- x_i - tau * grad w(x_i + xi_i)` with
/// `xi_i ~ N(0, noise_level^2 I)` (no noise when `noise_level == 0`).
pub fn wasserstein_step<R: rand::Rng>(
    energy: &MmdEnergy,
    mu: &ParticleMeasure,
    tau: f64,
    noise_level: f64,
    rng: &mut R,
) -> Result<ParticleMeasure, FlowError> {
    if !(tau.is_finite() && tau >= 0.0 && noise_level.is_finite() && noise_level >= 0.0) {
        return Err(InputError::invalid("tau and noise_level must be finite and nonnegative").into());
    }
    let grads = if noise_level > 0.0 {
        let points = perturbed_points(&mu.locations, noise_level, rng);
        energy.witness_gradients(mu, &points)?
    } else {
        energy.witness_gradients(mu, &mu.locations)?
    };
    apply_transport(mu, &grads, tau)
}

/// Weight QP solve from precomputed Gram blocks of the new locations.
fn weight_update(
    energy: &MmdEnergy,
    kxx: &DMatrix<f64>,
    kxy: &DMatrix<f64>,
    kx_old: DMatrix<f64>,
    alpha_prev: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<f64>, FlowError> {
    let bundle = GramBundle {
        kxx: kxx.clone(),
        kxy: kxy.clone(),
        kx_old,
        kyy: None,
    }
    .with_jitter(cfg.jitter);
    let qp = assemble_mmd_step_qp(&bundle, alpha_prev, cfg.prox_tradeoff, energy.target().len())?;
    let mut beta = match cfg.mmd_step_mode {
        MmdStepMode::ExactQp => solve_qp_exact(&qp, alpha_prev, cfg.qp_tol, cfg.qp_max_iter)?,
        MmdStepMode::SinglePgd => qp_pgd_step(&qp, alpha_prev, cfg.effective_pgd_step()),
    };
    finish_weights(&mut beta);
    if beta.iter().any(|w| !w.is_finite()) {
        return Err(FlowError::Diverged { step: 0, particle: 0 });
    }
    Ok(beta)
}

/// Zeroes vanished weights and restores unit mass when that changed the sum.
fn finish_weights(w: &mut Vec<f64>) {
    let before = w.clone();
    clamp_small_weights(w);
    if *w != before || (w.iter().sum::<f64>() - 1.0).abs() > MASS_TOLERANCE {
        let projected = simplex_project(w);
        *w = projected;
        clamp_small_weights(w);
    }
}

/// The weight half of the splitting: new weights for `mu_new.locations`,
/// proximal to `previous` (the iterate before the transport step).
pub fn mmd_step(
    energy: &MmdEnergy,
    mu_new: &ParticleMeasure,
    previous: &ParticleMeasure,
    cfg: &FlowConfig,
) -> Result<ParticleMeasure, FlowError> {
    cfg.validate()?;
    previous.validate_probability()?;
    if mu_new.len() != previous.len() {
        return Err(InputError::DimensionMismatch {
            expected: previous.len(),
            found: mu_new.len(),
        }
        .into());
    }
    let kernel = energy.kernel();
    let x = &mu_new.locations;
    let kxx = kernel.gram_symmetric(x)?;
    let kxy = kernel.gram(x, &energy.target().locations)?;
    let kx_old = match cfg.prox_anchor {
        ProxAnchor::OldLocations => kernel.gram(x, &previous.locations)?,
        ProxAnchor::NewLocations => kernel.gram(x, x)?,
    };
    let weights = weight_update(energy, &kxx, &kxy, kx_old, &previous.weights, cfg)?;
    Ok(ParticleMeasure {
        locations: mu_new.locations.clone(),
        weights,
    })
}

/// Kernel blocks of the current locations, reused across half-steps.
struct Grams {
    kxx: DMatrix<f64>,
    kxy: DMatrix<f64>,
}

impl Grams {
    fn of(energy: &MmdEnergy, x: &PointCloud) -> Result<Self, FlowError> {
        let kernel = energy.kernel();
        Ok(Self {
            kxx: kernel.gram_symmetric(x)?,
            kxy: kernel.gram(x, &energy.target().locations)?,
        })
    }

    fn loss(&self, energy: &MmdEnergy, weights: &[f64]) -> f64 {
        energy.mmd_squared_from_grams(weights, &self.kxx, &self.kxy)
    }
}

/// Transport half-step with optional gradient-point noise, using cached blocks
/// when no noise is drawn.
fn transport(
    energy: &MmdEnergy,
    mu: &ParticleMeasure,
    grams: &Grams,
    tau: f64,
    noise_level: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ParticleMeasure, FlowError> {
    let grads = if noise_level > 0.0 {
        let points = perturbed_points(&mu.locations, noise_level, rng);
        energy.witness_gradients(mu, &points)?
    } else {
        energy.witness_gradients_at_atoms(mu, &grams.kxx, &grams.kxy)
    };
    apply_transport(mu, &grads, tau)
}

/// JKO-splitting particle descent: transport step, then QP weight step.
///
/// Noise is never injected. Records two steps per iteration.
pub fn run_ift(energy: &MmdEnergy, mu0: &ParticleMeasure, cfg: &FlowConfig) -> Result<Trace, RunFailure> {
    let mut rec = Recorder::new(2, cfg, 2 * cfg.iterations);
    if let Err(e) = check_start(energy, mu0, cfg) {
        return Err(rec.fail(e));
    }
    let mut rng = noise_rng(cfg.seed);
    let mut mu = mu0.clone();
    let mut grams = match Grams::of(energy, &mu.locations) {
        Ok(g) => g,
        Err(e) => return Err(rec.fail(e)),
    };
    rec.record(0, || grams.loss(energy, &mu.weights), &mu);

    for it in 0..cfg.iterations {
        let step = 2 * it + 1;
        let result = (|| {
            let moved = transport(energy, &mu, &grams, cfg.effective_tau(mu.len()), 0.0, &mut rng)?;
            let new_grams = Grams::of(energy, &moved.locations)?;
            Ok::<_, FlowError>((moved, new_grams))
        })();
        let (moved, new_grams) = match result {
            Ok(v) => v,
            Err(e) => return Err(rec.fail(e.at_step(step))),
        };
        rec.record(step, || new_grams.loss(energy, &moved.weights), &moved);

        let kx_old = match cfg.prox_anchor {
            ProxAnchor::OldLocations => energy.kernel().gram(&moved.locations, &mu.locations),
            ProxAnchor::NewLocations => energy.kernel().gram(&moved.locations, &moved.locations),
        };
        let weights = kx_old
            .map_err(FlowError::from)
            .and_then(|k| weight_update(energy, &new_grams.kxx, &new_grams.kxy, k, &mu.weights, cfg));
        let weights = match weights {
            Ok(w) => w,
            Err(e) => return Err(rec.fail(e.at_step(step + 1))),
        };
        mu = ParticleMeasure {
            locations: moved.locations,
            weights,
        };
        grams = new_grams;
        rec.record(step + 1, || grams.loss(energy, &mu.weights), &mu);
    }
    Ok(rec.trace)
}

/// Fixed-weight particle descent for `cfg.iterations` steps; noise is active
/// for the first `cfg.noise_off_iteration` steps.
pub fn run_mmd_flow(energy: &MmdEnergy, mu0: &ParticleMeasure, cfg: &FlowConfig) -> Result<Trace, RunFailure> {
    let mut rec = Recorder::new(1, cfg, cfg.iterations);
    if let Err(e) = check_start(energy, mu0, cfg) {
        return Err(rec.fail(e));
    }
    let mut rng = noise_rng(cfg.seed);
    let mut mu = mu0.clone();
    let mut grams = match Grams::of(energy, &mu.locations) {
        Ok(g) => g,
        Err(e) => return Err(rec.fail(e)),
    };
    rec.record(0, || grams.loss(energy, &mu.weights), &mu);

    for it in 0..cfg.iterations {
        let step = it + 1;
        let noise = if it < cfg.noise_off_iteration { cfg.noise_level } else { 0.0 };
        let result = transport(energy, &mu, &grams, cfg.effective_tau(mu.len()), noise, &mut rng)
            .and_then(|moved| Ok((Grams::of(energy, &moved.locations)?, moved)));
        match result {
            Ok((g, moved)) => {
                grams = g;
                mu = moved;
            }
            Err(e) => return Err(rec.fail(e.at_step(step))),
        }
        rec.record(step, || grams.loss(energy, &mu.weights), &mu);
    }
    Ok(rec.trace)
}

/// `a_i <- a_i exp(-eta w_i)`, renormalized. Computed with a max-shift so only
/// atoms that already carry zero weight can end at zero.
pub fn multiplicative_weight_update(weights: &[f64], witness: &[f64], eta: f64) -> Result<Vec<f64>, FlowError> {
    if weights.len() != witness.len() {
        return Err(InputError::DimensionMismatch {
            expected: weights.len(),
            found: witness.len(),
        }
        .into());
    }
    let shift = weights
        .iter()
        .zip(witness)
        .filter(|(a, _)| **a > 0.0)
        .map(|(_, w)| -eta * w)
        .fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(FlowError::Degenerate { step: 0 });
    }
    let mut out: Vec<f64> = weights
        .iter()
        .zip(witness)
        .map(|(a, w)| if *a > 0.0 { a * (-eta * w - shift).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(FlowError::Degenerate { step: 0 });
    }
    for w in out.iter_mut() {
        *w /= total;
    }
    finish_weights(&mut out);
    if out.iter().all(|w| *w == 0.0) {
        return Err(FlowError::Degenerate { step: 0 });
    }
    Ok(out)
}

/// Wasserstein-Fisher-Rao splitting: transport step, then a multiplicative
/// weight update driven by the witness of the previous iterate evaluated at
/// the moved particles. Records two steps per iteration.
pub fn run_wfr(energy: &MmdEnergy, mu0: &ParticleMeasure, cfg: &FlowConfig) -> Result<Trace, RunFailure> {
    let mut rec = Recorder::new(2, cfg, 2 * cfg.iterations);
    if let Err(e) = check_start(energy, mu0, cfg) {
        return Err(rec.fail(e));
    }
    let mut rng = noise_rng(cfg.seed);
    let mut mu = mu0.clone();
    let mut grams = match Grams::of(energy, &mu.locations) {
        Ok(g) => g,
        Err(e) => return Err(rec.fail(e)),
    };
    rec.record(0, || grams.loss(energy, &mu.weights), &mu);

    for it in 0..cfg.iterations {
        let step = 2 * it + 1;
        let result = transport(energy, &mu, &grams, cfg.effective_tau(mu.len()), 0.0, &mut rng)
            .and_then(|moved| Ok((Grams::of(energy, &moved.locations)?, moved)));
        let (new_grams, moved) = match result {
            Ok(v) => v,
            Err(e) => return Err(rec.fail(e.at_step(step))),
        };
        rec.record(step, || new_grams.loss(energy, &moved.weights), &moved);

        let weights = energy
            .witness_values(&mu, &moved.locations)
            .map_err(FlowError::from)
            .and_then(|w| multiplicative_weight_update(&mu.weights, &w, cfg.eta));
        let weights = match weights {
            Ok(w) => w,
            Err(e) => return Err(rec.fail(e.at_step(step + 1))),
        };
        mu = ParticleMeasure {
            locations: moved.locations,
            weights,
        };
        grams = new_grams;
        rec.record(step + 1, || grams.loss(energy, &mu.weights), &mu);
    }
    Ok(rec.trace)
}

/// Closed-form pure-reaction flow `mu_t = e^{-t} mu0 + (1 - e^{-t}) pi`,
/// represented on the joint support (atoms of `mu0` first, then of `target`).
pub fn interpolation_oracle(
    mu0: &ParticleMeasure,
    target: &ParticleMeasure,
    t: f64,
) -> Result<ParticleMeasure, InputError> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(InputError::invalid(format!("time must be nonnegative, got {t}")));
    }
    mu0.validate_probability()?;
    target.validate_probability()?;
    let decay = (-t).exp();
    let locations = mu0.locations.concat(&target.locations)?;
    let weights = mu0
        .weights
        .iter()
        .map(|a| decay * a)
        .chain(target.weights.iter().map(|b| (1.0 - decay) * b))
        .collect();
    Ok(ParticleMeasure { locations, weights })
}

/// Explicit Euler for `d/dt mu = -(mu - pi)` on the joint support of `mu0`
/// and the energy's target: `w <- w - h (w - w_pi)`. Loss is recorded every
/// step; snapshots at the start and the end.
pub fn euler_spherical_mmd(
    energy: &MmdEnergy,
    mu0: &ParticleMeasure,
    h: f64,
    steps: usize,
) -> Result<Trace, FlowError> {
    if !(h > 0.0 && h < 1.0) {
        return Err(InputError::invalid(format!("Euler step must lie in (0, 1), got {h}")).into());
    }
    mu0.validate_probability()?;
    let target = energy.target();
    let locations = mu0.locations.concat(&target.locations)?;
    let n = mu0.len();
    let w_target: Vec<f64> = std::iter::repeat(0.0)
        .take(n)
        .chain(target.weights.iter().copied())
        .collect();
    let mut w: Vec<f64> = mu0
        .weights
        .iter()
        .copied()
        .chain(std::iter::repeat(0.0).take(target.len()))
        .collect();
    let joint = energy.kernel().gram_symmetric(&locations)?;
    let loss = |w: &[f64]| {
        let diff: Vec<f64> = w.iter().zip(&w_target).map(|(a, b)| a - b).collect();
        crate::energy::quad(&diff, &joint, &diff).max(0.0)
    };

    let mut trace = Trace::new(1);
    let snapshot = |w: &[f64]| ParticleMeasure {
        locations: locations.clone(),
        weights: w.to_vec(),
    };
    trace.losses.push(LossRecord { step: 0, loss: loss(&w) });
    trace.snapshots.push(Snapshot { step: 0, measure: snapshot(&w) });
    for step in 1..=steps {
        euler_reaction_step(&mut w, &w_target, h);
        trace.losses.push(LossRecord { step, loss: loss(&w) });
    }
    trace.snapshots.push(Snapshot {
        step: steps,
        measure: snapshot(&w),
    });
    Ok(trace)
}

/// `w <- w - h (w - w_target)`.
pub fn euler_reaction_step(w: &mut [f64], w_target: &[f64], h: f64) {
    for (wi, ti) in w.iter_mut().zip(w_target) {
        *wi -= h * (*wi - ti);
    }
}

/// Least-squares slope of `ln(loss)` against `step * time_per_step` over the
/// trace records indexed by `window`.
pub fn fit_decay_rate(trace: &Trace, window: Range<usize>, time_per_step: f64) -> Result<f64, InputError> {
    let records = trace
        .losses
        .get(window.clone())
        .ok_or_else(|| InputError::invalid(format!("window {window:?} out of range")))?;
    if records.len() < 2 {
        return Err(InputError::invalid("decay fit needs at least two records"));
    }
    if let Some(r) = records.iter().find(|r| !(r.loss > 0.0)) {
        return Err(InputError::invalid(format!(
            "nonpositive loss {} at step {}",
            r.loss, r.step
        )));
    }
    let n = records.len() as f64;
    let ts: Vec<f64> = records.iter().map(|r| r.step as f64 * time_per_step).collect();
    let ls: Vec<f64> = records.iter().map(|r| r.loss.ln()).collect();
    let t_mean = ts.iter().sum::<f64>() / n;
    let l_mean = ls.iter().sum::<f64>() / n;
    let cov: f64 = ts.iter().zip(&ls).map(|(t, l)| (t - t_mean) * (l - l_mean)).sum();
    let var: f64 = ts.iter().map(|t| (t - t_mean).powi(2)).sum();
    if var == 0.0 {
        return Err(InputError::invalid("window spans a single time point"));
    }
    Ok(cov / var)
}
