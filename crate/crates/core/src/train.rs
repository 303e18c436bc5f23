//! Training steps for the quantile-risk method and the ER baseline, plus
//! the evaluation metrics used by the harness.
//!
//! One step of the quantile-risk method on the current batch `B`:
//!
//! 1. risks `r_0 = CE(B)` and `r_j = CE(B_R^j)` for `n_risk_batches`
//!    batches drawn from memory;
//! 2. Gaussian α-quantile `L_G` of those risks;
//! 3. `L_M = CE(B_M)` on one more memory batch;
//! 4. one SGD step on `ρ L_G + L_M`;
//! 5. `B` goes into the reservoir *after* the update.
//!
//! Until memory holds anything the step is plain SGD on `CE(B)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Batch, Dataset, EnvironmentSchedule, TrainingView, ROTATION_GRID};
use crate::error::{Error, Result};
use crate::nn::{self, read_exact, read_u32, read_u64, ForwardTrace, MlpModel};
use crate::quantile::{estimate_quantile, quantile_risk_weights, ScaleMode};
use crate::replay::ReservoirBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// Replay plus the α-quantile risk term.
    Pdg,
    /// Experience replay.
    Er,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Pdg => "pdg",
            Method::Er => "er",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pdg" => Ok(Method::Pdg),
            "er" => Ok(Method::Er),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub alpha: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub memory_batch: usize,
    pub risk_batch: usize,
    pub n_risk_batches: usize,
    pub memory_capacity: usize,
    /// Whether `CE(B)` joins the memory-batch risks in the quantile estimate.
    pub include_current_risk: bool,
    pub scale_mode: ScaleMode,
    pub layer_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Pdg,
            alpha: 0.9999,
            rho: 0.5,
            lr: 0.1,
            batch_size: 512,
            memory_batch: 64,
            risk_batch: 64,
            n_risk_batches: 3,
            memory_capacity: 10_000,
            include_current_risk: true,
            scale_mode: ScaleMode::Variance,
            layer_dims: nn::MNIST_DIMS.to_vec(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Probability(self.alpha));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be >= 0, got {}", self.rho)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::LearningRate(self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("memory_batch", self.memory_batch),
            ("risk_batch", self.risk_batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.method == Method::Pdg
            && self.n_risk_batches + usize::from(self.include_current_risk) < 2
        {
            return Err(Error::Config(
                "the quantile estimate needs at least two risk batches".into(),
            ));
        }
        Ok(())
    }
}

/// Seeds for the independent random streams of one run, derived from the
/// run seed `s` as `16 s + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub model_init: u64,
    pub schedule: u64,
    pub buffer: u64,
}

pub const MODEL_SEED_OFFSET: u64 = 1;
pub const SCHEDULE_SEED_OFFSET: u64 = 2;
pub const BUFFER_SEED_OFFSET: u64 = 3;

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let base = seed.wrapping_mul(16);
        RunSeeds {
            model_init: base.wrapping_add(MODEL_SEED_OFFSET),
            schedule: base.wrapping_add(SCHEDULE_SEED_OFFSET),
            buffer: base.wrapping_add(BUFFER_SEED_OFFSET),
        }
    }
}

/// Loss statistics of one update. Quantile fields are `None` when the
/// estimate was skipped (ER, or fewer than two risks available).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub current_loss: f64,
    pub mu: Option<f64>,
    pub sigma_sq: Option<f64>,
    pub l_g: Option<f64>,
    pub l_m: f64,
}

struct Part {
    trace: ForwardTrace,
    labels: Vec<usize>,
    loss: f64,
}

fn traced(model: &MlpModel, view: TrainingView<'_>) -> Result<Part> {
    let trace = nn::forward(model, view.inputs)?;
    let loss = nn::cross_entropy(trace.logits(), view.labels)?;
    Ok(Part {
        trace,
        labels: view.labels.to_vec(),
        loss,
    })
}

fn apply(model: &mut MlpModel, parts: &[Part], weights: &[f64], lr: f64) -> Result<()> {
    let refs: Vec<(&ForwardTrace, &[usize])> =
        parts.iter().map(|p| (&p.trace, p.labels.as_slice())).collect();
    let grads = nn::backward_weighted_sum(model, &refs, weights)?;
    nn::sgd_step(model, &grads, lr)
}

/// One update of the quantile-risk method. `batch` is inserted into
/// `buffer` after the parameter update.
pub fn step_pdg(
    model: &mut MlpModel,
    buffer: &mut ReservoirBuffer,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let current = traced(model, batch.training_view())?;
    let current_loss = current.loss;
    let mut metrics = StepMetrics {
        current_loss,
        ..StepMetrics::default()
    };

    if buffer.is_empty() {
        apply(model, &[current], &[1.0], config.lr)?;
        buffer.insert_batch(batch);
        return Ok(metrics);
    }

    let mut parts = Vec::with_capacity(config.n_risk_batches + 2);
    if config.include_current_risk {
        parts.push(current);
    }
    for _ in 0..config.n_risk_batches {
        let b = buffer.sample_batch(config.risk_batch)?;
        parts.push(traced(model, b.training_view())?);
    }
    let risks: Vec<f64> = parts.iter().map(|p| p.loss).collect();
    let mut weights = if risks.len() >= 2 {
        let est = estimate_quantile(&risks, config.alpha, config.scale_mode)?;
        metrics.mu = Some(est.mu);
        metrics.sigma_sq = Some(est.sigma_sq);
        metrics.l_g = Some(est.l_g);
        quantile_risk_weights(&est)
            .into_iter()
            .map(|w| config.rho * w)
            .collect()
    } else {
        metrics.l_g = risks.first().copied();
        vec![config.rho; risks.len()]
    };

    let memory = buffer.sample_batch(config.memory_batch)?;
    let memory = traced(model, memory.training_view())?;
    metrics.l_m = memory.loss;
    parts.push(memory);
    weights.push(1.0);

    apply(model, &parts, &weights, config.lr)?;
    buffer.insert_batch(batch);
    Ok(metrics)
}

/// One ER update on `½ (CE(B) + CE(B_M))`, or `CE(B)` while memory is
/// empty. `batch` is inserted after the update.
pub fn step_er(
    model: &mut MlpModel,
    buffer: &mut ReservoirBuffer,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    let current = traced(model, batch.training_view())?;
    let mut metrics = StepMetrics {
        current_loss: current.loss,
        ..StepMetrics::default()
    };
    if buffer.is_empty() {
        apply(model, &[current], &[1.0], config.lr)?;
    } else {
        let memory = buffer.sample_batch(config.memory_batch)?;
        let memory = traced(model, memory.training_view())?;
        metrics.l_m = memory.loss;
        apply(model, &[current, memory], &[0.5, 0.5], config.lr)?;
    }
    buffer.insert_batch(batch);
    Ok(metrics)
}

pub fn step(
    model: &mut MlpModel,
    buffer: &mut ReservoirBuffer,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    match config.method {
        Method::Pdg => step_pdg(model, buffer, batch, config),
        Method::Er => step_er(model, buffer, batch, config),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub avg_accuracy: f64,
    pub target_accuracy: f64,
    pub per_rotation: BTreeMap<i32, f64>,
}

/// Accuracy on every grid rotation; `avg` is the unweighted mean over all
/// seven sets, held-out rotation included.
pub fn evaluate(
    model: &MlpModel,
    test_sets: &BTreeMap<i32, Batch>,
    held_out: i32,
) -> Result<Evaluation> {
    let mut per_rotation = BTreeMap::new();
    for deg in ROTATION_GRID {
        let set = test_sets.get(&deg).ok_or(Error::MissingRotation(deg))?;
        per_rotation.insert(deg, nn::accuracy(model, set.inputs(), set.labels())?);
    }
    let target_accuracy = *per_rotation
        .get(&held_out)
        .ok_or(Error::MissingRotation(held_out))?;
    let avg_accuracy = per_rotation.values().sum::<f64>() / per_rotation.len() as f64;
    Ok(Evaluation {
        avg_accuracy,
        target_accuracy,
        per_rotation,
    })
}

const MEMORIZATION_CHUNK: usize = 2048;

/// Accuracy over everything stored in memory; 1.0 for an empty memory.
pub fn memorization_accuracy(model: &MlpModel, buffer: &ReservoirBuffer) -> Result<f64> {
    let items = buffer.items();
    if items.is_empty() {
        return Ok(1.0);
    }
    let mut correct = 0;
    for chunk in items.chunks(MEMORIZATION_CHUNK) {
        let mut inputs = Array2::zeros((chunk.len(), chunk[0].pixels.len()));
        for (mut row, s) in inputs.rows_mut().into_iter().zip(chunk) {
            row.assign(&ArrayView1::from(s.pixels.as_slice()));
        }
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        correct += nn::correct_count(model, inputs.view(), &labels)?;
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Accuracies recorded at an evaluation step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub per_rotation: BTreeMap<i32, f64>,
    pub avg_accuracy: f64,
    pub target_accuracy: f64,
    pub memorization_accuracy: f64,
}

/// One row of a run's metrics stream. Every update produces a row;
/// `eval` is filled only at evaluation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// Updates applied so far.
    pub step: usize,
    pub step_metrics: StepMetrics,
    pub eval: Option<EvalRecord>,
}

pub const DEFAULT_EVAL_EVERY: usize = 50;

/// Steps (1-based update counts) at which a run is evaluated.
pub fn is_eval_step(step: usize, total: usize, eval_every: usize) -> bool {
    step == total || (eval_every > 0 && step % eval_every == 0)
}

/// Model and memory of one run in progress.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: MlpModel,
    pub buffer: ReservoirBuffer,
    pub next_step: usize,
}

impl RunState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        let seeds = RunSeeds::derive(config.seed);
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.model_init);
        Ok(RunState {
            model: MlpModel::he_uniform(&config.layer_dims, &mut init_rng)?,
            buffer: ReservoirBuffer::new(config.memory_capacity, seeds.buffer),
            next_step: 0,
        })
    }
}

/// Train over the whole schedule, calling `on_record` after every update. Returns the final state.
pub fn run_stream<F>(
    config: &TrainConfig,
    schedule: &EnvironmentSchedule,
    base_train: &Dataset,
    test_sets: &BTreeMap<i32, Batch>,
    eval_every: usize,
    mut on_record: F,
) -> Result<RunState>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    config.validate()?;
    let state = RunState::fresh(config)?;
    resume_stream(config, schedule, base_train, test_sets, eval_every, state, &mut on_record)
}

/// Continue a run from `state.next_step`.
pub fn resume_stream<F>(
    config: &TrainConfig,
    schedule: &EnvironmentSchedule,
    base_train: &Dataset,
    test_sets: &BTreeMap<i32, Batch>,
    eval_every: usize,
    mut state: RunState,
    mut on_record: F,
) -> Result<RunState>
where
    F: FnMut(&MetricsRecord) -> Result<()>,
{
    let total = schedule.total_steps();
    while state.next_step < total {
        let t = state.next_step;
        let batch = data::next_batch(schedule, base_train, t, config.batch_size)?;
        let step_metrics = step(&mut state.model, &mut state.buffer, &batch, config)?;
        state.next_step += 1;
        let eval = if is_eval_step(state.next_step, total, eval_every) {
            let e = evaluate(&state.model, test_sets, schedule.held_out_degrees)?;
            Some(EvalRecord {
                per_rotation: e.per_rotation,
                avg_accuracy: e.avg_accuracy,
                target_accuracy: e.target_accuracy,
                memorization_accuracy: memorization_accuracy(&state.model, &state.buffer)?,
            })
        } else {
            None
        };
        let record = MetricsRecord {
            step: state.next_step,
            step_metrics,
            eval,
        };
        on_record(&record)?;
    }
    Ok(state)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDGCLCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint container: step counter, model block, optional buffer block.
///
/// ```text
/// magic "PDGCLCKP" | version u32 | next_step u64 | model block
/// | has_buffer u8 | buffer block (if has_buffer = 1)
/// ```
pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &MlpModel,
    buffer: Option<&ReservoirBuffer>,
    next_step: usize,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(next_step as u64).to_le_bytes())?;
    model.write_to(&mut w)?;
    match buffer {
        Some(b) => {
            w.write_all(&[1])?;
            b.write_to(&mut w)?;
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(MlpModel, Option<ReservoirBuffer>, usize)> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "checkpoint magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    if read_u32(&mut r)? != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint("unsupported checkpoint version".into()));
    }
    let next_step = read_u64(&mut r)? as usize;
    let model = MlpModel::read_from(&mut r)?;
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, "buffer flag")?;
    let buffer = match flag[0] {
        0 => None,
        1 => Some(ReservoirBuffer::read_from(&mut r)?),
        other => return Err(Error::Checkpoint(format!("bad buffer flag {other}"))),
    };
    Ok((model, buffer, next_step))
}

impl RunState {
    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.model, Some(&self.buffer), self.next_step)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let (model, buffer, next_step) = read_checkpoint(r)?;
        let buffer =
            buffer.ok_or_else(|| Error::Checkpoint("checkpoint has no buffer block".into()))?;
        Ok(RunState {
            model,
            buffer,
            next_step,
        })
    }
}
