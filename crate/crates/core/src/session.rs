//! Whole-series inference: window stitching, interactive prompt editing
//! with incremental recomputation and undo, and split evaluation.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, Dataset, MultivariateSeries, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{EvalRow, LevelAccumulator};
use crate::network::{argmax, forward, ModelParams, RunMode, SegmentationResult};
use crate::prompt::{boundaries_from_states, simulate_inference_prompts, Prompt, PromptKind, PromptSet};
use crate::trainer::{derive_seed, granularity_of, window_input};

/// Sliding starts at `stride`, plus one right-aligned window when the last
/// full window stops short of the end.
pub fn window_starts(total: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window > total {
        return Err(Error::WindowTooLong { window, len: total });
    }
    if window == 0 || stride == 0 {
        return Err(Error::InvalidWindow("window and stride must be positive".into()));
    }
    if stride > window {
        return Err(Error::InvalidWindow(format!("stride {stride} leaves gaps between windows of {window}")));
    }
    let mut starts: Vec<usize> = (0..=total - window).step_by(stride).collect();
    if starts.last().is_some_and(|&s| s + window < total) {
        starts.push(total - window);
    }
    Ok(starts)
}

fn model_input(params: &ModelParams<f32>, series: &MultivariateSeries) -> Result<MultivariateSeries> {
    if series.channels() != params.config.channels {
        return Err(Error::ShapeMismatch(format!(
            "series has {} channels, model expects {}",
            series.channels(),
            params.config.channels
        )));
    }
    Ok(match &params.config.normalization {
        Some(stats) => normalize(series, stats),
        None => series.clone(),
    })
}

fn window_probs(params: &ModelParams<f32>, values: &Array2<f32>, start: usize, prompts: &PromptSet) -> Result<Array2<f64>> {
    let t = params.config.window;
    let x = values.slice(s![start..start + t, ..]).to_owned();
    Ok(forward(&x, &prompts.slice(start, t), params, RunMode::Eval)?.probs)
}

/// Mean of the window rows covering each timestep in `range`, renormalized.
/// Windows are visited in order, so any sub-range reproduces the full pass
/// bit for bit.
fn stitch_into(out: &mut Array2<f64>, range: Range<usize>, starts: &[usize], window: usize, probs: &[Array2<f64>]) {
    let mut acc = Array2::<f64>::zeros((range.len(), out.ncols()));
    let mut count = vec![0usize; range.len()];
    for (&s0, p) in starts.iter().zip(probs) {
        let lo = s0.max(range.start);
        let hi = (s0 + window).min(range.end);
        if lo >= hi {
            continue;
        }
        let mut dst = acc.slice_mut(s![lo - range.start..hi - range.start, ..]);
        dst += &p.slice(s![lo - s0..hi - s0, ..]);
        for c in &mut count[lo - range.start..hi - range.start] {
            *c += 1;
        }
    }
    for ((mut row, &c), mut dst) in acc.rows_mut().into_iter().zip(&count).zip(out.slice_mut(s![range, ..]).rows_mut()) {
        row.mapv_inplace(|v| v / c as f64);
        let total: f64 = row.sum();
        row.mapv_inplace(|v| v / total);
        dst.assign(&row);
    }
}

/// Per-timestep prediction over a whole series; `prompts` live on the
/// series timeline.
pub fn predict_series(
    params: &ModelParams<f32>,
    series: &MultivariateSeries,
    prompts: &PromptSet,
    stride: usize,
    exec: Execution,
) -> Result<SegmentationResult> {
    let input = model_input(params, series)?;
    prompts.validate(series.len(), params.config.k_total)?;
    let t = params.config.window;
    let starts = window_starts(series.len(), t, stride)?;
    let probs: Vec<Array2<f64>> = exec
        .map(&starts, |_, &s0| window_probs(params, &input.values, s0, prompts))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((series.len(), params.config.k_total));
    stitch_into(&mut out, 0..series.len(), &starts, t, &probs);
    Ok(SegmentationResult::from_probs(out, &params.config.levels))
}

/// A reversible prompt edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Edit {
    Add { prompt: Prompt, replaced: Option<Prompt> },
    Remove { prompt: Prompt },
}

/// Rows of the stitched result that changed after an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub start: usize,
    pub end: usize,
    /// Indices of recomputed windows.
    pub windows: Vec<usize>,
    pub states: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub struct Session {
    pub id: String,
    pub series: MultivariateSeries,
    pub model: Arc<ModelParams<f32>>,
    input: MultivariateSeries,
    stride: usize,
    starts: Vec<usize>,
    prompts: PromptSet,
    window_cache: Vec<Array2<f64>>,
    result: SegmentationResult,
    history: Vec<Edit>,
}

impl Session {
    pub fn new(id: impl Into<String>, model: Arc<ModelParams<f32>>, series: MultivariateSeries, stride: usize) -> Result<Self> {
        let input = model_input(&model, &series)?;
        let starts = window_starts(series.len(), model.config.window, stride)?;
        let empty = PromptSet::new();
        let window_cache = starts
            .iter()
            .map(|&s0| window_probs(&model, &input.values, s0, &empty))
            .collect::<Result<Vec<_>>>()?;
        let mut probs = Array2::zeros((series.len(), model.config.k_total));
        stitch_into(&mut probs, 0..series.len(), &starts, model.config.window, &window_cache);
        let result = SegmentationResult::from_probs(probs, &model.config.levels);
        Ok(Self {
            id: id.into(),
            series,
            model,
            input,
            stride,
            starts,
            prompts: empty,
            window_cache,
            result,
            history: Vec::new(),
        })
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn result(&self) -> &SegmentationResult {
        &self.result
    }

    pub fn history(&self) -> &[Edit] {
        &self.history
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Indices of windows whose range contains `t`.
    pub fn windows_containing(&self, t: usize) -> Vec<usize> {
        let w = self.model.config.window;
        (0..self.starts.len())
            .filter(|&i| self.starts[i] <= t && t < self.starts[i] + w)
            .collect()
    }

    fn refresh(&mut self, t: usize) -> Result<Delta> {
        let w = self.model.config.window;
        let windows = self.windows_containing(t);
        for &i in &windows {
            self.window_cache[i] = window_probs(&self.model, &self.input.values, self.starts[i], &self.prompts)?;
        }
        let start = windows.iter().map(|&i| self.starts[i]).min().unwrap_or(t);
        let end = windows.iter().map(|&i| self.starts[i] + w).max().unwrap_or(t + 1);
        stitch_into(&mut self.result.probs, start..end, &self.starts, w, &self.window_cache);
        let levels = &self.model.config.levels;
        self.result = SegmentationResult::from_probs(std::mem::take(&mut self.result.probs), levels);
        Ok(Delta {
            start,
            end,
            windows,
            states: self.result.states[start..end].to_vec(),
            probs: self.result.probs.slice(s![start..end, ..]).rows().into_iter().map(|r| r.to_vec()).collect(),
        })
    }

    /// Stores `prompt`. An occupied slot is an error unless `replace` is set.
    pub fn add_prompt(&mut self, prompt: Prompt, replace: bool) -> Result<Delta> {
        let t = prompt.t();
        if t >= self.series.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.series.len() });
        }
        if let Prompt::Label(p) = &prompt {
            p.validate(self.model.config.k_total)?;
        }
        let existing = self.prompts.get(t, prompt.kind());
        if let Some(old) = &existing {
            if !replace {
                return Err(match (old, &prompt) {
                    (Prompt::Boundary(a), Prompt::Boundary(b)) if a.kind != b.kind => Error::ConflictingBoundary(t),
                    _ => Error::SlotOccupied(t),
                });
            }
        }
        self.prompts.insert(prompt.clone());
        self.history.push(Edit::Add { prompt, replaced: existing });
        self.refresh(t)
    }

    pub fn remove_prompt(&mut self, t: usize, kind: PromptKind) -> Result<Delta> {
        let prompt = self.prompts.remove(t, kind).ok_or(Error::NoSuchPrompt { t, kind: kind.as_str() })?;
        self.history.push(Edit::Remove { prompt });
        self.refresh(t)
    }

    /// Reverts the latest edit.
    pub fn undo(&mut self) -> Result<Delta> {
        let edit = self.history.pop().ok_or(Error::NothingToUndo)?;
        let t = match edit {
            Edit::Add { prompt, replaced } => {
                self.prompts.remove(prompt.t(), prompt.kind());
                if let Some(old) = replaced {
                    self.prompts.insert(old);
                }
                prompt.t()
            }
            Edit::Remove { prompt } => {
                let t = prompt.t();
                self.prompts.insert(prompt);
                t
            }
        };
        self.refresh(t)
    }
}

/// Scores from [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fraction: f64,
    pub rows: Vec<EvalRow>,
    /// Per level: share of predictions inside that level's label range.
    pub in_level: Vec<(String, f64)>,
}

/// Window-level evaluation of one split: each window (one per offset and
/// level, stride `T`) gets `floor(fraction * T)` simulated prompts drawn
/// from `(seed, window index)` and is scored at its own level.
pub fn evaluate(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    split: Split,
    fraction: f64,
    seed: u64,
    exec: Execution,
) -> Result<Evaluation> {
    let data = match &params.config.normalization {
        Some(stats) => dataset.normalized(stats),
        None => dataset.clone(),
    };
    let t = params.config.window;
    let windows = data.split_windows(split, t, t)?;
    if windows.is_empty() {
        return Err(Error::EmptyDataset(format!("{split:?} split has no windows")));
    }
    let spec = granularity_of(&params.config);
    let preds = exec.map(&windows, |i, w| -> Result<(Vec<usize>, Vec<usize>)> {
        let truth = w.targets(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0x6576));
        let prompts = simulate_inference_prompts(&truth, &boundaries_from_states(&truth), fraction, &mut rng);
        let res = forward(&window_input::<f32>(w), &prompts, params, RunMode::Eval)?;
        Ok((res.states, truth))
    });
    let mut acc = LevelAccumulator::new(&spec);
    let mut inside = vec![(0usize, 0usize); spec.levels.len()];
    for (r, w) in preds.into_iter().zip(&windows) {
        let (pred, truth) = r?;
        let range = spec.level_range(w.level_in_use);
        inside[w.level_in_use].0 += pred.iter().filter(|p| range.contains(p)).count();
        inside[w.level_in_use].1 += pred.len();
        acc.push(w.level_in_use, &pred, &truth)?;
    }
    Ok(Evaluation {
        fraction,
        rows: acc.rows()?,
        in_level: spec
            .levels
            .iter()
            .zip(inside)
            .filter(|(_, (_, n))| *n > 0)
            .map(|(l, (k, n))| (l.name.clone(), k as f64 / n as f64))
            .collect(),
    })
}

/// Level-specific argmax: the best state inside `level`'s label range.
pub fn argmax_in_level(probs: &Array2<f64>, range: Range<usize>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| range.start + argmax(r.slice(s![range.clone()]).iter().copied()))
        .collect()
}
