//! Unsupervised training: loss, Adam, batching, early stopping, evaluation.

use std::io::Write;
use std::time::Instant;

use fas_autodiff::{BnStats, Coord, GradCheckEntry, GradCheckReport, Part, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{check_feasibility, utility, ChannelSample, Utility};
use crate::config::SystemConfig;
use crate::error::{FasError, Result};
use crate::model::TwoStageModel;
use crate::pipeline::{infer, loss_tape, pipeline_forward, PositionSource, UTILITY_FLOOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub utility: Utility,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Samples per evaluation-mode tape.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            batch_size: 1024,
            max_epochs: 2000,
            patience: 50,
            utility: Utility::SumRate,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_chunk: 256,
        }
    }
}

impl TrainConfig {
    /// CPU-scale profile: larger steps on smaller batches for fewer epochs.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(FasError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(FasError::Config(
                "batch_size must be at least 2 for batch norm".into(),
            ));
        }
        if self.patience == 0 {
            return Err(FasError::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return Err(FasError::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Adam moments over the flattened real-pair parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `false` and leaves everything
/// but the skip counter untouched when a gradient is not finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(FasError::Dimension(
            "Adam state, parameters and gradients differ in length".into(),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        state.skipped += 1;
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(true)
}

/// Loss, flattened gradient and batch statistics of one batch.
pub struct BatchGradient {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub bn_updates: Vec<(usize, BnStats)>,
    /// Samples whose utility hit [`UTILITY_FLOOR`].
    pub clamped: usize,
}

/// Forward and backward pass of the loss over `batch`. `training` selects
/// batch statistics for batch norm.
pub fn loss_and_gradient(
    model: &TwoStageModel,
    batch: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    training: bool,
) -> Result<BatchGradient> {
    let mut tape = Tape::new();
    let mut fwd = model.forward(&mut tape, training, true);
    let vars = pipeline_forward(&mut fwd, model, batch, cfg, &PositionSource::Learned, kind)?;
    let clamped = fwd
        .tape
        .value(vars.utility)
        .data()
        .iter()
        .filter(|u| u.re <= UTILITY_FLOOR)
        .count();
    let loss = loss_tape(fwd.tape, vars.utility)?;
    let params = fwd.params().to_vec();
    let bn_updates = std::mem::take(&mut fwd.bn_updates);
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.num_parameters());
    for p in params {
        for z in grads.get(p).data() {
            flat.push(z.re);
            flat.push(z.im);
        }
    }
    Ok(BatchGradient {
        loss: tape.value(loss).data()[0].re,
        grads: flat,
        bn_updates,
        clamped,
    })
}

/// Loss of `batch` without gradients.
pub fn loss(
    model: &TwoStageModel,
    batch: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    training: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut fwd = model.forward(&mut tape, training, false);
    let vars = pipeline_forward(&mut fwd, model, batch, cfg, &PositionSource::Learned, kind)?;
    let l = loss_tape(fwd.tape, vars.utility)?;
    Ok(fwd.tape.value(l).data()[0].re)
}

/// Gradient magnitude below which pipeline gradient errors are measured
/// absolutely rather than relatively.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// Compares the parameter gradient of the loss on `batch` with central
/// differences on `coords` randomly chosen flattened coordinates. Errors are
/// `|a − n| / max(|a|, |n|, GRADIENT_FLOOR)`.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_gradcheck(
    model: &TwoStageModel,
    batch: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    coords: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = loss_and_gradient(model, batch, cfg, kind, true)?.grads;
    let flat = model.params.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen =
        rand::seq::index::sample(&mut rng, flat.len(), coords.min(flat.len())).into_vec();
    chosen.sort_unstable();
    let mut offsets = Vec::with_capacity(model.params.len());
    let mut acc = 0;
    for e in model.params.entries() {
        offsets.push(acc);
        acc += 2 * e.value.len();
    }
    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(chosen.len());
    let mut max_rel: f64 = 0.0;
    for i in chosen {
        let mut shifted = flat.clone();
        shifted[i] = flat[i] + step;
        probe.params.assign_flat(&shifted)?;
        let plus = loss(&probe, batch, cfg, kind, true)?;
        shifted[i] = flat[i] - step;
        probe.params.assign_flat(&shifted)?;
        let minus = loss(&probe, batch, cfg, kind, true)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        max_rel = max_rel.max(rel);
        let input = offsets.partition_point(|&o| o <= i) - 1;
        let local = i - offsets[input];
        entries.push(GradCheckEntry {
            coord: Coord {
                input,
                entry: local / 2,
                part: if local % 2 == 0 { Part::Re } else { Part::Im },
            },
            analytic: a,
            numeric,
            abs_error: (a - numeric).abs(),
            rel_error: rel,
        });
    }
    Ok(GradCheckReport {
        name: format!("pipeline/{}", kind.name()),
        step,
        tolerance,
        entries,
        max_rel_error: max_rel,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_utility: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation utility of the untrained model.
    pub initial_val_utility: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters are returned.
    pub best_epoch: usize,
    pub best_val_utility: f64,
    pub stop_reason: StopReason,
    pub skipped_steps: u64,
    pub clamped_samples: usize,
}

impl TrainReport {
    /// Columns `epoch,train_loss,val_utility,seconds`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "val_utility", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:e}", e.train_loss),
                format!("{:e}", e.val_utility),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Report without wall-clock columns, for reproducibility checks.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.seconds = 0.0;
        }
        r
    }
}

pub struct FitResult {
    pub report: TrainReport,
    pub best: TwoStageModel,
    /// Parameters after the last epoch.
    pub last: TwoStageModel,
}

/// Mean evaluation-mode utility over `samples`.
pub fn mean_utility(
    model: &TwoStageModel,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    chunk: usize,
) -> Result<f64> {
    let sols = infer(model, samples, cfg, &PositionSource::Learned, kind, chunk)?;
    Ok(sols.iter().map(|s| s.utility).sum::<f64>() / sols.len().max(1) as f64)
}

/// Trains with validation by mean utility on `validation`.
pub fn fit(
    model: TwoStageModel,
    train: &[ChannelSample],
    validation: &[ChannelSample],
    cfg: &SystemConfig,
    tc: &TrainConfig,
) -> Result<FitResult> {
    if validation.is_empty() {
        return Err(FasError::Input("validation set is empty".into()));
    }
    fit_with(model, train, cfg, tc, |m| {
        mean_utility(m, validation, cfg, tc.utility, tc.eval_chunk)
    })
}

/// Trains with a caller-supplied validation metric (higher is better).
pub fn fit_with<F>(
    mut model: TwoStageModel,
    train: &[ChannelSample],
    cfg: &SystemConfig,
    tc: &TrainConfig,
    mut validate: F,
) -> Result<FitResult>
where
    F: FnMut(&TwoStageModel) -> Result<f64>,
{
    tc.validate()?;
    cfg.validate()?;
    if train.len() < 2 {
        return Err(FasError::Input(
            "training set needs at least two samples".into(),
        ));
    }
    let initial = validate(&model)?;
    let mut adam = AdamState::new(model.num_parameters());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = (model.clone(), f64::NEG_INFINITY, 0usize);
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut clamped_samples = 0;
    for epoch in 1..=tc.max_epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch: Vec<ChannelSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let step = loss_and_gradient(&model, &batch, cfg, tc.utility, true)?;
            if !step.loss.is_finite() {
                return Err(FasError::NonFinite {
                    stage: format!("loss (epoch {epoch}, batch {bi})"),
                    layer: 0,
                });
            }
            clamped_samples += step.clamped;
            model.apply_bn_updates(&step.bn_updates);
            let mut flat = model.params.flatten();
            if adam_step(&mut flat, &step.grads, &mut adam, tc)? {
                model.params.assign_flat(&flat)?;
            }
            loss_sum += step.loss;
            batches += 1;
        }
        let val = validate(&model)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_utility: val,
            seconds: start.elapsed().as_secs_f64(),
        });
        if val > best.1 {
            best = (model.clone(), val, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let report = TrainReport {
        initial_val_utility: initial,
        epochs,
        best_epoch: best.2,
        best_val_utility: best.1,
        stop_reason,
        skipped_steps: adam.skipped,
        clamped_samples,
    };
    Ok(FitResult {
        report,
        best: best.0,
        last: model,
    })
}

/// Aggregate evaluation results over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_antennas: usize,
    pub n_users: usize,
    pub samples: usize,
    pub utility: Utility,
    pub mean_utility: f64,
    pub median_utility: f64,
    /// Fraction of samples whose positions and beams pass every constraint.
    pub feasibility_rate: f64,
    /// Mean wall-clock per sample of the batched forward.
    pub mean_inference_ms: f64,
}

impl Metrics {
    pub fn csv_header() -> [&'static str; 8] {
        [
            "dataset",
            "k",
            "n",
            "samples",
            "mean_utility",
            "median_utility",
            "feasibility_rate",
            "mean_inference_ms",
        ]
    }

    pub fn csv_row(&self, dataset: &str) -> Vec<String> {
        vec![
            dataset.to_string(),
            self.n_users.to_string(),
            self.n_antennas.to_string(),
            self.samples.to_string(),
            format!("{:e}", self.mean_utility),
            format!("{:e}", self.median_utility),
            format!("{}", self.feasibility_rate),
            format!("{:.6}", self.mean_inference_ms),
        ]
    }

    pub fn write_csv<W: Write>(rows: &[(String, Metrics)], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header())?;
        for (name, m) in rows {
            w.write_record(m.csv_row(name))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Same metrics with the timing column zeroed.
    pub fn without_timing(&self) -> Metrics {
        Metrics {
            mean_inference_ms: 0.0,
            ..self.clone()
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluation-mode metrics of `model` on `samples`. `cfg.n_users` is taken
/// from the samples, so a model may be evaluated at any `K ≤ N`.
pub fn evaluate(
    model: &TwoStageModel,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
) -> Result<Metrics> {
    evaluate_with(model, samples, cfg, kind, &PositionSource::Learned, 256)
}

pub fn evaluate_with(
    model: &TwoStageModel,
    samples: &[ChannelSample],
    cfg: &SystemConfig,
    kind: Utility,
    source: &PositionSource,
    chunk: usize,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(FasError::Input("evaluation set is empty".into()));
    }
    let k = samples[0].n_users();
    let cfg = cfg.with_users(k);
    let start = Instant::now();
    let sols = infer(model, samples, &cfg, source, kind, chunk)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut utilities = Vec::with_capacity(sols.len());
    let mut feasible = 0usize;
    for s in &sols {
        utilities.push(utility(&s.beams, &s.channel, &cfg, kind)?);
        if check_feasibility(&s.beams, &s.positions, &cfg).passed() {
            feasible += 1;
        }
    }
    Ok(Metrics {
        n_antennas: cfg.n_antennas,
        n_users: k,
        samples: sols.len(),
        utility: kind,
        mean_utility: utilities.iter().sum::<f64>() / utilities.len() as f64,
        median_utility: median(&utilities),
        feasibility_rate: feasible as f64 / sols.len() as f64,
        mean_inference_ms: 1e3 * elapsed / sols.len() as f64,
    })
}
