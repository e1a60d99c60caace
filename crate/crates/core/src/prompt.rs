//! Label and boundary prompts: representation, encoding and the samplers
//! used during iterative training and simulated evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use ndarray::Array2;
use num_traits::Zero;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a sampled training label prompt also carries one
/// incorrect state as a negative.
pub const NEGATIVE_PROB: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPrompt {
    pub t: usize,
    pub positive: Option<usize>,
    #[serde(default)]
    pub negatives: BTreeSet<usize>,
}

impl LabelPrompt {
    pub fn positive(t: usize, state: usize) -> Self {
        Self {
            t,
            positive: Some(state),
            negatives: BTreeSet::new(),
        }
    }

    pub fn validate(&self, k_total: usize) -> Result<()> {
        if self.positive.is_none() && self.negatives.is_empty() {
            return Err(Error::InvalidPrompt(format!("label prompt at t={} is empty", self.t)));
        }
        if let Some(p) = self.positive {
            if self.negatives.contains(&p) {
                return Err(Error::InvalidPrompt(format!(
                    "state {p} is both positive and negative at t={}",
                    self.t
                )));
            }
        }
        if let Some(&s) = self.positive.iter().chain(&self.negatives).find(|&&s| s >= k_total) {
            return Err(Error::StateOutOfRange { state: s, k_total });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundaryKind {
    #[serde(rename = "neg")]
    Negative,
    #[serde(rename = "pos")]
    Positive,
}

impl BoundaryKind {
    /// Row of the boundary lookup table.
    pub fn index(self) -> usize {
        match self {
            BoundaryKind::Negative => 0,
            BoundaryKind::Positive => 1,
        }
    }

    pub fn from_transition(is_transition: bool) -> Self {
        if is_transition {
            BoundaryKind::Positive
        } else {
            BoundaryKind::Negative
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryPrompt {
    pub t: usize,
    pub kind: BoundaryKind,
}

/// Wire form of a single prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Prompt {
    Label(LabelPrompt),
    Boundary(BoundaryPrompt),
}

impl Prompt {
    pub fn t(&self) -> usize {
        match self {
            Prompt::Label(p) => p.t,
            Prompt::Boundary(p) => p.t,
        }
    }

    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Label(_) => PromptKind::Label,
            Prompt::Boundary(_) => PromptKind::Boundary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Label,
    Boundary,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Label => "label",
            PromptKind::Boundary => "boundary",
        }
    }
}

/// At most one label prompt and one boundary prompt per timestep.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub label: BTreeMap<usize, LabelPrompt>,
    pub boundary: BTreeMap<usize, BoundaryPrompt>,
}

impl PromptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.label.is_empty() && self.boundary.is_empty()
    }

    /// Number of individual prompts (label and boundary counted separately).
    pub fn len(&self) -> usize {
        self.label.len() + self.boundary.len()
    }

    pub fn insert(&mut self, prompt: Prompt) -> Option<Prompt> {
        match prompt {
            Prompt::Label(p) => self.label.insert(p.t, p).map(Prompt::Label),
            Prompt::Boundary(p) => self.boundary.insert(p.t, p).map(Prompt::Boundary),
        }
    }

    pub fn remove(&mut self, t: usize, kind: PromptKind) -> Option<Prompt> {
        match kind {
            PromptKind::Label => self.label.remove(&t).map(Prompt::Label),
            PromptKind::Boundary => self.boundary.remove(&t).map(Prompt::Boundary),
        }
    }

    pub fn get(&self, t: usize, kind: PromptKind) -> Option<Prompt> {
        match kind {
            PromptKind::Label => self.label.get(&t).cloned().map(Prompt::Label),
            PromptKind::Boundary => self.boundary.get(&t).copied().map(Prompt::Boundary),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Prompt> + '_ {
        self.label
            .values()
            .cloned()
            .map(Prompt::Label)
            .chain(self.boundary.values().copied().map(Prompt::Boundary))
    }

    pub fn is_subset_of(&self, other: &PromptSet) -> bool {
        self.label.iter().all(|(t, p)| other.label.get(t) == Some(p))
            && self.boundary.iter().all(|(t, p)| other.boundary.get(t) == Some(p))
    }

    /// Timesteps carrying at least one prompt.
    pub fn timesteps(&self) -> BTreeSet<usize> {
        self.label.keys().chain(self.boundary.keys()).copied().collect()
    }

    pub fn validate(&self, len: usize, k_total: usize) -> Result<()> {
        for (&t, p) in &self.label {
            if t >= len || p.t != t {
                return Err(Error::TimestepOutOfRange { t, len });
            }
            p.validate(k_total)?;
        }
        for (&t, p) in &self.boundary {
            if t >= len || p.t != t {
                return Err(Error::TimestepOutOfRange { t, len });
            }
        }
        Ok(())
    }

    /// Prompts inside `[offset, offset + len)`, shifted to window coordinates.
    pub fn slice(&self, offset: usize, len: usize) -> PromptSet {
        let range = offset..offset + len;
        PromptSet {
            label: self
                .label
                .range(range.clone())
                .map(|(&t, p)| {
                    (
                        t - offset,
                        LabelPrompt {
                            t: t - offset,
                            ..p.clone()
                        },
                    )
                })
                .collect(),
            boundary: self
                .boundary
                .range(range)
                .map(|(&t, p)| (t - offset, BoundaryPrompt { t: t - offset, kind: p.kind }))
                .collect(),
        }
    }
}

/// `[one-hot positive | multi-hot negatives]`, length `2 * k_total`.
pub fn encode_label_vector(p: &LabelPrompt, k_total: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; 2 * k_total];
    for &s in p.positive.iter().chain(&p.negatives) {
        if s >= k_total {
            return Err(Error::StateOutOfRange { state: s, k_total });
        }
    }
    if let Some(s) = p.positive {
        v[s] = 1;
    }
    for &s in &p.negatives {
        v[k_total + s] = 1;
    }
    Ok(v)
}

/// Sparse view of a prompt set: for each prompted timestep, the active
/// slots of its label vector and its boundary table row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptRows {
    pub label: Vec<(usize, Vec<usize>)>,
    pub boundary: Vec<(usize, usize)>,
}

impl PromptRows {
    pub fn new(prompts: &PromptSet, len: usize, k_total: usize) -> Result<Self> {
        prompts.validate(len, k_total)?;
        let label = prompts
            .label
            .iter()
            .map(|(&t, p)| {
                let slots = encode_label_vector(p, k_total)?
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b == 1)
                    .map(|(i, _)| i)
                    .collect();
                Ok((t, slots))
            })
            .collect::<Result<_>>()?;
        let boundary = prompts.boundary.iter().map(|(&t, p)| (t, p.kind.index())).collect();
        Ok(Self { label, boundary })
    }
}

/// Learnable prompt encoder tensors: a `2K x D` linear map with a `1 x D`
/// bias for label vectors and a `2 x D` boundary lookup table.
#[derive(Debug, Clone, Copy)]
pub struct PromptEncoderParams<'a, F> {
    pub label_weight: &'a Array2<F>,
    pub label_bias: &'a Array2<F>,
    pub boundary_table: &'a Array2<F>,
}

/// `T x D` prompt embedding. Rows without prompts are exactly zero.
pub fn embed_prompts<F>(prompts: &PromptSet, len: usize, params: PromptEncoderParams<'_, F>) -> Result<Array2<F>>
where
    F: Copy + Zero + std::ops::Add<Output = F>,
{
    let d = params.label_weight.ncols();
    let k_total = params.label_weight.nrows() / 2;
    let rows = PromptRows::new(prompts, len, k_total)?;
    let mut out = Array2::from_elem((len, d), F::zero());
    add_label_rows(&mut out, &rows.label, params.label_weight, params.label_bias);
    add_boundary_rows(&mut out, &rows.boundary, params.boundary_table);
    Ok(out)
}

pub(crate) fn add_label_rows<F>(out: &mut Array2<F>, rows: &[(usize, Vec<usize>)], weight: &Array2<F>, bias: &Array2<F>)
where
    F: Copy + std::ops::Add<Output = F>,
{
    for (t, slots) in rows {
        let mut row = out.row_mut(*t);
        for (j, v) in row.iter_mut().enumerate() {
            let mut acc = bias[[0, j]];
            for &i in slots {
                acc = acc + weight[[i, j]];
            }
            *v = *v + acc;
        }
    }
}

pub(crate) fn add_boundary_rows<F>(out: &mut Array2<F>, rows: &[(usize, usize)], table: &Array2<F>)
where
    F: Copy + std::ops::Add<Output = F>,
{
    for &(t, k) in rows {
        let mut row = out.row_mut(t);
        row.zip_mut_with(&table.row(k), |o, &e| *o = *o + e);
    }
}

/// `out[t]` is true when a transition happens at `t`; `out[0]` is false.
pub fn boundaries_from_states(states: &[usize]) -> Vec<bool> {
    (0..states.len())
        .map(|t| t > 0 && states[t] != states[t - 1])
        .collect()
}

/// Result of one growth step.
#[derive(Debug, Clone, PartialEq)]
pub struct Grown {
    pub prompts: PromptSet,
    pub added: usize,
    /// Set when every timestep was already occupied for both prompt types.
    pub exhausted: bool,
}

fn free_timesteps<V>(occupied: &BTreeMap<usize, V>, len: usize) -> Vec<usize> {
    (0..len).filter(|t| !occupied.contains_key(t)).collect()
}

/// Adds `Uniform{n_min..=n_max}` ground-truth-consistent prompts to
/// `current`. Label negatives, when drawn, come from `label_space`.
pub fn grow_prompt_set<R: Rng + ?Sized>(
    gt_states: &[usize],
    gt_boundaries: &[bool],
    current: &PromptSet,
    n_min: usize,
    n_max: usize,
    label_space: Range<usize>,
    rng: &mut R,
) -> Grown {
    let len = gt_states.len();
    let mut prompts = current.clone();
    let n = rng.random_range(n_min..=n_max.max(n_min));
    let mut added = 0;
    for _ in 0..n {
        let want_label = rng.random_bool(0.5);
        let label_free = free_timesteps(&prompts.label, len);
        let boundary_free = free_timesteps(&prompts.boundary, len);
        let use_label = match (label_free.is_empty(), boundary_free.is_empty()) {
            (true, true) => {
                return Grown {
                    prompts,
                    added,
                    exhausted: true,
                }
            }
            (false, true) => true,
            (true, false) => false,
            (false, false) => want_label,
        };
        if use_label {
            let t = label_free[rng.random_range(0..label_free.len())];
            let gt = gt_states[t];
            let mut negatives = BTreeSet::new();
            let others = label_space.len().saturating_sub(usize::from(label_space.contains(&gt)));
            if others > 0 && rng.random_bool(NEGATIVE_PROB) {
                let candidates: Vec<usize> = label_space.clone().filter(|&s| s != gt).collect();
                negatives.insert(candidates[rng.random_range(0..candidates.len())]);
            }
            prompts.label.insert(
                t,
                LabelPrompt {
                    t,
                    positive: Some(gt),
                    negatives,
                },
            );
        } else {
            let t = boundary_free[rng.random_range(0..boundary_free.len())];
            prompts.boundary.insert(
                t,
                BoundaryPrompt {
                    t,
                    kind: BoundaryKind::from_transition(gt_boundaries[t]),
                },
            );
        }
        added += 1;
    }
    Grown {
        prompts,
        added,
        exhausted: false,
    }
}

/// Number of prompted timesteps for a prompt budget `fraction` of `len`.
pub fn prompt_count(len: usize, fraction: f64) -> usize {
    ((fraction.clamp(0.0, 1.0) * len as f64) + 1e-9).floor() as usize
}

/// Picks `floor(fraction * T)` distinct timesteps uniformly and places both
/// a positive label prompt and a boundary prompt at each.
pub fn simulate_inference_prompts<R: Rng + ?Sized>(
    gt_states: &[usize],
    gt_boundaries: &[bool],
    fraction: f64,
    rng: &mut R,
) -> PromptSet {
    let len = gt_states.len();
    let m = prompt_count(len, fraction).min(len);
    let mut prompts = PromptSet::new();
    let mut picked = index::sample(rng, len, m).into_vec();
    picked.sort_unstable();
    for t in picked {
        prompts.label.insert(t, LabelPrompt::positive(t, gt_states[t]));
        prompts.boundary.insert(
            t,
            BoundaryPrompt {
                t,
                kind: BoundaryKind::from_transition(gt_boundaries[t]),
            },
        );
    }
    prompts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn label(t: usize, pos: Option<usize>, neg: &[usize]) -> LabelPrompt {
        LabelPrompt {
            t,
            positive: pos,
            negatives: neg.iter().copied().collect(),
        }
    }

    #[test]
    fn label_vector_layout() {
        assert_eq!(
            encode_label_vector(&label(0, Some(2), &[0, 3]), 4).unwrap(),
            vec![0, 0, 1, 0, 1, 0, 0, 1]
        );
        assert_eq!(encode_label_vector(&label(0, Some(0), &[]), 2).unwrap(), vec![1, 0, 0, 0]);
        assert_eq!(encode_label_vector(&label(0, None, &[1]), 3).unwrap(), vec![0, 0, 0, 0, 1, 0]);
        assert!(matches!(
            encode_label_vector(&label(0, Some(5), &[]), 3),
            Err(Error::StateOutOfRange { .. })
        ));
    }

    fn params(k: usize, d: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (
            Array2::from_shape_fn((2 * k, d), |(i, j)| (i as f64 + 1.0) * 0.1 - j as f64 * 0.03),
            Array2::from_shape_fn((1, d), |(_, j)| 0.5 - j as f64 * 0.2),
            Array2::from_shape_fn((2, d), |(i, j)| -(i as f64) + j as f64 * 0.7 - 0.3),
        )
    }

    #[test]
    fn empty_prompts_embed_to_exact_zero() {
        let (w, b, e) = params(3, 5);
        let p = PromptEncoderParams {
            label_weight: &w,
            label_bias: &b,
            boundary_table: &e,
        };
        let z = embed_prompts(&PromptSet::new(), 7, p).unwrap();
        assert!(z.iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn embedding_is_additive() {
        let (w, b, e) = params(3, 5);
        let p = PromptEncoderParams {
            label_weight: &w,
            label_bias: &b,
            boundary_table: &e,
        };
        let mut boundary_only = PromptSet::new();
        boundary_only.insert(Prompt::Boundary(BoundaryPrompt {
            t: 2,
            kind: BoundaryKind::Positive,
        }));
        let zb = embed_prompts(&boundary_only, 4, p).unwrap();
        assert_eq!(zb.row(2), e.row(1));
        assert!(zb.row(0).iter().all(|&v| v.to_bits() == 0));

        let mut label_only = PromptSet::new();
        label_only.insert(Prompt::Label(label(2, Some(1), &[0])));
        let zl = embed_prompts(&label_only, 4, p).unwrap();
        let expect: Vec<f64> = (0..5).map(|j| b[[0, j]] + w[[1, j]] + w[[3, j]]).collect();
        assert_eq!(zl.row(2).to_vec(), expect);

        let mut both = label_only.clone();
        both.insert(Prompt::Boundary(BoundaryPrompt {
            t: 2,
            kind: BoundaryKind::Positive,
        }));
        let z = embed_prompts(&both, 4, p).unwrap();
        assert_eq!(z, &zl + &zb);
        assert!(matches!(embed_prompts(&both, 2, p), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn boundaries() {
        assert_eq!(boundaries_from_states(&[0, 0, 1, 1]), vec![false, false, true, false]);
        assert_eq!(boundaries_from_states(&[2, 2, 2]), vec![false; 3]);
        assert_eq!(boundaries_from_states(&[0, 1, 0, 1]), vec![false, true, true, true]);
        assert!(boundaries_from_states(&[]).is_empty());
    }

    #[test]
    fn growth_adds_exactly_n() {
        let gt = vec![0, 0, 1, 1, 2, 2, 2, 0];
        let gb = boundaries_from_states(&gt);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grow_prompt_set(&gt, &gb, &PromptSet::new(), 1, 1, 0..3, &mut rng);
        assert_eq!(g.prompts.len(), 1);
        assert!(!g.exhausted);
    }

    #[test]
    fn growth_is_monotone_and_consistent() {
        let gt = vec![3, 3, 4, 4, 4, 5, 5, 3, 3, 3];
        let gb = boundaries_from_states(&gt);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cur = PromptSet::new();
        for _ in 0..12 {
            let g = grow_prompt_set(&gt, &gb, &cur, 1, 3, 3..6, &mut rng);
            assert!(cur.is_subset_of(&g.prompts));
            for p in g.prompts.label.values() {
                assert_eq!(p.positive, Some(gt[p.t]));
                assert!(p.negatives.iter().all(|&n| n != gt[p.t] && (3..6).contains(&n)));
            }
            for p in g.prompts.boundary.values() {
                assert_eq!(p.kind == BoundaryKind::Positive, gb[p.t]);
            }
            cur = g.prompts;
        }
        assert_eq!(cur.len(), 20);
        let g = grow_prompt_set(&gt, &gb, &cur, 1, 3, 3..6, &mut rng);
        assert!(g.exhausted);
        assert_eq!(g.prompts, cur);
    }

    #[test]
    fn label_boundary_balance() {
        let gt: Vec<usize> = (0..400).map(|t| t / 50).collect();
        let gb = boundaries_from_states(&gt);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut labels, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let g = grow_prompt_set(&gt, &gb, &PromptSet::new(), 1, 1, 0..8, &mut rng);
            labels += g.prompts.label.len();
            total += g.prompts.len();
        }
        let ratio = labels as f64 / total as f64;
        assert!((0.47..=0.53).contains(&ratio), "{ratio}");
    }

    #[test]
    fn inference_prompt_counts() {
        assert_eq!(prompt_count(256, 0.05), 12);
        assert_eq!(prompt_count(512, 0.01), 5);
        assert_eq!(prompt_count(256, 0.0), 0);
        let gt: Vec<usize> = (0..256).map(|t| t / 40).collect();
        let gb = boundaries_from_states(&gt);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = simulate_inference_prompts(&gt, &gb, 0.05, &mut rng);
        assert_eq!(p.label.len(), 12);
        assert_eq!(p.boundary.len(), 12);
        assert_eq!(p.timesteps().len(), 12);
        assert!(simulate_inference_prompts(&gt, &gb, 0.0, &mut rng).is_empty());
        let full = simulate_inference_prompts(&gt, &gb, 1.0, &mut rng);
        assert_eq!(full.label.len(), 256);
    }

    #[test]
    fn slicing_shifts_coordinates() {
        let mut p = PromptSet::new();
        p.insert(Prompt::Label(LabelPrompt::positive(5, 1)));
        p.insert(Prompt::Boundary(BoundaryPrompt {
            t: 9,
            kind: BoundaryKind::Negative,
        }));
        let s = p.slice(4, 4);
        assert_eq!(s.label.keys().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(s.label[&1].t, 1);
        assert!(s.boundary.is_empty());
    }

    #[test]
    fn wire_format() {
        let p: Prompt = serde_json::from_str(r#"{"t":3,"type":"label","positive":2,"negatives":[0]}"#).unwrap();
        assert_eq!(p, Prompt::Label(label(3, Some(2), &[0])));
        let b: Prompt = serde_json::from_str(r#"{"t":4,"type":"boundary","kind":"neg"}"#).unwrap();
        assert_eq!(
            b,
            Prompt::Boundary(BoundaryPrompt {
                t: 4,
                kind: BoundaryKind::Negative
            })
        );
        let s = serde_json::to_value(&b).unwrap();
        assert_eq!(s["type"], "boundary");
        assert_eq!(s["kind"], "neg");
        let n: Prompt = serde_json::from_str(r#"{"t":1,"type":"label","positive":null,"negatives":[2]}"#).unwrap();
        assert_eq!(n, Prompt::Label(label(1, None, &[2])));
    }
}
