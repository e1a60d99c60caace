//! Iterative prompt-growing training: per-window loss summed over `N_r`
//! passes with a growing prompt set, AdamW updates, validation-based early
//! stopping.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape};
use crate::data::{ChannelStats, Dataset, GranularitySpec, Level, Split, Window};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::network::{argmax, forward_logits, ModelConfig, ModelParams, Network, RunMode};
use crate::prompt::{boundaries_from_states, grow_prompt_set, simulate_inference_prompts, PromptRows, PromptSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Forward passes per window (`N_r`).
    pub iterations: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub learning_rate: f64,
    /// Optimizer steps over which the learning rate ramps up linearly from
    /// zero; 0 keeps it fixed from the first step.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Sliding-window stride used to cut training and validation windows.
    pub window_stride: usize,
    /// Prompt budget used for validation loss.
    pub val_prompt_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            n_min: 1,
            n_max: 3,
            learning_rate: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            window_stride: 64,
            val_prompt_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad("need 1 <= n_min <= n_max");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        if self.batch_size == 0 || self.window_stride == 0 {
            return bad("batch size and window stride must be positive");
        }
        Ok(())
    }
}

/// The label space implied by a config: its levels, or one flat level.
pub fn granularity_of(config: &ModelConfig) -> GranularitySpec {
    config.granularity().unwrap_or_else(|| GranularitySpec {
        levels: vec![Level {
            name: "states".into(),
            k: config.k_total,
        }],
    })
}

/// Deterministic seed for an independent stream.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Normalized training and validation windows cut from a dataset.
pub struct PreparedData {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub stats: ChannelStats,
}

/// Statistics come from the training portion only; validation windows do
/// not overlap (stride `window`).
pub fn prepare_data(dataset: &Dataset, window: usize, stride: usize) -> Result<PreparedData> {
    let stats = dataset.train_stats(window)?;
    let normalized = dataset.normalized(&stats);
    Ok(PreparedData {
        train: normalized.split_windows(Split::Train, window, stride)?,
        val: normalized.split_windows(Split::Validation, window, window)?,
        stats,
    })
}

/// `base` with channel count, label space and input statistics taken from
/// the data.
pub fn config_for(base: &ModelConfig, dataset: &Dataset, stats: &ChannelStats) -> ModelConfig {
    ModelConfig {
        channels: dataset.channels(),
        k_total: dataset.spec.k_total(),
        levels: dataset.spec.levels.clone(),
        normalization: Some(stats.clone()),
        ..base.clone()
    }
}

/// Seed of the fixed validation prompt draw used by [`fit`].
pub fn validation_seed(seed: u64) -> u64 {
    derive_seed(seed, 0x0056_414c, 0)
}

pub fn window_input<F: Float>(window: &Window) -> Array2<F> {
    window.x.mapv(|v| F::from_f64_lossy(v as f64))
}

/// Loss, gradients and bookkeeping of one window.
pub struct WindowLoss<F> {
    /// Sum of per-iteration mean cross-entropies.
    pub loss: f64,
    pub per_iteration: Vec<f64>,
    /// Prompt set used by each pass; the first is always empty.
    pub prompt_history: Vec<PromptSet>,
    pub grads: Vec<Option<Array2<F>>>,
    /// Correct argmax predictions of the last pass.
    pub correct: usize,
}

/// Runs `N_r` passes over one window; pass `r` sees the prompt set grown
/// `r` times, and gradients of the summed loss accumulate across passes.
pub fn window_loss<F: Float>(
    params: &ModelParams<F>,
    window: &Window,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<WindowLoss<F>> {
    let mc = &params.config;
    let spec = granularity_of(mc);
    let targets = window.targets(&spec);
    if let Some(&bad) = targets.iter().find(|&&s| s >= mc.k_total) {
        return Err(Error::StateOutOfRange {
            state: bad,
            k_total: mc.k_total,
        });
    }
    let boundaries = boundaries_from_states(&targets);
    let label_space = spec.level_range(window.level_in_use);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(rng));

    let net = Network::new(mc);
    let mut tape = Tape::new(&params.tensors);
    let mut mode = RunMode::Train(&mut dropout_rng);
    let xp = net.patched_input(&mut tape, &window_input::<F>(window))?;
    let z_x = net.encode(&mut tape, xp, &mut mode);

    let mut prompts = PromptSet::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut last_logits = None;
    for r in 0..cfg.iterations {
        let rows = PromptRows::new(&prompts, mc.window, mc.k_total)?;
        let logits = net.decode(&mut tape, z_x, &rows, &mut mode);
        losses.push(tape.softmax_cross_entropy(logits, targets.clone()));
        last_logits = Some(logits);
        history.push(prompts.clone());
        if r + 1 < cfg.iterations {
            prompts = grow_prompt_set(&targets, &boundaries, &prompts, cfg.n_min, cfg.n_max, label_space.clone(), rng).prompts;
        }
    }
    let per_iteration: Vec<f64> = losses.iter().map(|&l| tape.scalar(l).to_f64_lossy()).collect();
    let total = tape.sum(losses);
    let loss = tape.scalar(total).to_f64_lossy();
    let correct = last_logits
        .map(|l| {
            tape.value(l)
                .rows()
                .into_iter()
                .zip(&targets)
                .filter(|(row, &y)| argmax(row.iter().map(|v| v.to_f64_lossy())) == y)
                .count()
        })
        .unwrap_or(0);
    let grads = tape.backward(total).into_params();
    Ok(WindowLoss {
        loss,
        per_iteration,
        prompt_history: history,
        grads,
        correct,
    })
}

/// Mean loss and gradient over a batch of windows.
pub struct BatchGradient<F> {
    pub loss: f64,
    pub window_losses: Vec<f64>,
    pub correct: usize,
    pub timesteps: usize,
    pub grads: Vec<Option<Array2<F>>>,
}

/// Windows are evaluated independently (in parallel when `exec` allows),
/// each with its own seed; gradients are reduced in batch order.
pub fn batch_gradient<F: Float>(
    params: &ModelParams<F>,
    batch: &[&Window],
    seeds: &[u64],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<BatchGradient<F>> {
    let results = exec.map(batch, |i, w| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        window_loss(params, w, cfg, &mut rng)
    });
    let n = F::from_usize(batch.len().max(1)).expect("batch size");
    let mut grads: Vec<Option<Array2<F>>> = vec![None; params.tensors.len()];
    let mut window_losses = Vec::with_capacity(batch.len());
    let mut correct = 0;
    let mut timesteps = 0;
    for (res, w) in results.into_iter().zip(batch) {
        let res = res?;
        window_losses.push(res.loss);
        correct += res.correct;
        timesteps += w.len();
        for (acc, g) in grads.iter_mut().zip(res.grads) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => *a += &g,
                (None, Some(g)) => *acc = Some(g),
                _ => {}
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v / n);
    }
    let loss = window_losses.iter().sum::<f64>() / batch.len().max(1) as f64;
    Ok(BatchGradient {
        loss,
        window_losses,
        correct,
        timesteps,
        grads,
    })
}

/// Adam with decoupled weight decay.
pub struct AdamW<F> {
    lr: F,
    warmup: usize,
    weight_decay: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: i32,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(params: &ModelParams<F>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Array2<F>> = params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            lr: F::from_f64_lossy(cfg.learning_rate),
            warmup: cfg.warmup_steps,
            weight_decay: F::from_f64_lossy(cfg.weight_decay),
            beta1: F::from_f64_lossy(cfg.beta1),
            beta2: F::from_f64_lossy(cfg.beta2),
            eps: F::from_f64_lossy(cfg.eps),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &[Option<Array2<F>>]) {
        self.step += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.step);
        let bc2 = one - self.beta2.powi(self.step);
        let lr = if (self.step as usize) < self.warmup {
            self.lr * F::from_f64_lossy(self.step as f64 / self.warmup as f64)
        } else {
            self.lr
        };
        let decay = one - lr * self.weight_decay;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

/// Validation loss and accuracy under simulated prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub loss: f64,
    pub accuracy: f64,
}

/// Single eval-mode pass per window with `floor(fraction * T)` simulated
/// prompts; the prompt draw for window `i` depends only on `(seed, i)`.
pub fn validation_score(
    params: &ModelParams<f32>,
    windows: &[Window],
    fraction: f64,
    seed: u64,
    exec: Execution,
) -> Result<ValidationScore> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset("no validation windows".into()));
    }
    let spec = granularity_of(&params.config);
    let per_window = exec.map(windows, |i, w| -> Result<(f64, usize)> {
        let targets = w.targets(&spec);
        let bounds = boundaries_from_states(&targets);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0x0076_616c));
        let prompts = simulate_inference_prompts(&targets, &bounds, fraction, &mut rng);
        let logits = forward_logits(&window_input::<f32>(w), &prompts, params, RunMode::Eval)?;
        let mut ce = 0.0;
        let mut correct = 0;
        for (row, &y) in logits.rows().into_iter().zip(&targets) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ce += lse - row[y];
            if argmax(row.iter().copied()) == y {
                correct += 1;
            }
        }
        Ok((ce / targets.len() as f64, correct))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    let mut total = 0;
    for (r, w) in per_window.into_iter().zip(windows) {
        let (l, c) = r?;
        loss += l;
        correct += c;
        total += w.len();
    }
    Ok(ValidationScore {
        loss: loss / windows.len() as f64,
        accuracy: correct as f64 / total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable record") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub report: TrainReport,
}

pub fn fit(
    train: &[Window],
    val: &[Window],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    fit_with(train, val, model_cfg, cfg, exec, |_| {})
}

/// Like [`fit`], calling `on_epoch` after every completed epoch.
pub fn fit_with(
    train: &[Window],
    val: &[Window],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training windows".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("no validation windows".into()));
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg);
    let val_seed = validation_seed(cfg.seed);
    let mut best: Option<(f64, ModelParams<f32>, usize)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0x5348)));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(cfg.seed, epoch as u64 + 1, i as u64))
                .collect();
            let bg = batch_gradient(&params, &batch, &seeds, cfg, exec)?;
            let finite = bg.loss.is_finite() && bg.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::NonFiniteLoss { epoch });
            }
            opt.step(&mut params, &bg.grads);
            loss_sum += bg.window_losses.iter().sum::<f64>();
            correct += bg.correct;
            steps += bg.timesteps;
        }
        let vs = validation_score(&params, val, cfg.val_prompt_fraction, val_seed, exec)?;
        if !vs.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / steps.max(1) as f64,
            val_loss: vs.loss,
            val_accuracy: vs.accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} ({:.1}s)",
            record.train_loss,
            record.train_accuracy,
            record.val_loss,
            record.val_accuracy,
            record.seconds
        );
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| vs.loss < *b) {
            best = Some((vs.loss, params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.ok_or_else(|| Error::EmptyDataset("max_epochs is 0".into()))?;
    Ok(TrainOutcome {
        params,
        report: TrainReport {
            epochs,
            best_epoch,
            stopped_early,
        },
    })
}


/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
}

/// Compares every parameter gradient of [`window_loss`] against central
/// differences with step `h`. Prompt sampling is replayed from `seed`, so
/// the loss is a deterministic function of the parameters when dropout is 0.
pub fn check_gradients(params: &ModelParams<f64>, window: &Window, cfg: &TrainConfig, seed: u64, h: f64) -> Result<GradientCheck> {
    if params.config.dropout != 0.0 {
        return Err(Error::InvalidConfig("gradient check needs dropout 0".into()));
    }
    let loss_at = |p: &ModelParams<f64>| -> Result<f64> {
        Ok(window_loss(p, window, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?.loss)
    };
    let analytic = window_loss(params, window, cfg, &mut ChaCha8Rng::seed_from_u64(seed))?.grads;
    let layout = params.layout();
    let mut probe = params.clone();
    let mut out = GradientCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for id in 0..params.tensors.len() {
        let n = params.tensors[id].len();
        for flat in 0..n {
            let orig = params.tensors[id].as_slice().expect("standard layout")[flat];
            probe.tensors[id].as_slice_mut().expect("standard layout")[flat] = orig + h;
            let up = loss_at(&probe)?;
            probe.tensors[id].as_slice_mut().expect("standard layout")[flat] = orig - h;
            let down = loss_at(&probe)?;
            probe.tensors[id].as_slice_mut().expect("standard layout")[flat] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id].as_ref().map_or(0.0, |g| g.as_slice().expect("standard layout")[flat]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (layout.name(id).to_string(), flat);
            }
        }
    }
    Ok(out)
}
