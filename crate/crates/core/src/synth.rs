//! Piecewise-stationary Gaussian series with a fine label track and
//! derived coarser tracks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{coarsen_states, Dataset, DEFAULT_SPLIT, GranularitySpec, Level, MultivariateSeries};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Generator configuration. Each series is a sequence of segments whose
/// lengths are drawn uniformly from `duration` and whose state differs from
/// the previous segment's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub channels: usize,
    pub states: Vec<StateSpec>,
    /// Inclusive segment-length range.
    pub duration: [usize; 2],
    /// Minimum length of each series; generation stops at the first segment
    /// end at or past this length.
    pub length: usize,
    #[serde(default = "one")]
    pub n_series: usize,
    /// Coarsening factors applied to the fine track, one extra level each.
    #[serde(default)]
    pub coarsen: Vec<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn one() -> usize {
    1
}

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

impl SynthSpec {
    /// `k` fine states on the corners of a scaled hypercube (wrapping when
    /// `2^channels < k`), shared noise level.
    pub fn hypercube(channels: usize, k: usize, separation: f64, noise: f64) -> Self {
        let states = (0..k)
            .map(|s| StateSpec {
                mean: (0..channels)
                    .map(|c| {
                        let bit = (s >> (c % usize::BITS as usize)) & 1;
                        let ring = (s >> channels) as f64;
                        (if bit == 1 { 1.0 } else { -1.0 }) * separation / 2.0 + ring * separation
                    })
                    .collect(),
                std: vec![noise; channels],
            })
            .collect();
        Self {
            channels,
            states,
            duration: [50, 200],
            length: 20_000,
            n_series: 1,
            coarsen: vec![2],
            split: default_split(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.states.len() < 2 {
            return bad("need at least two states".into());
        }
        if self.duration[0] == 0 || self.duration[0] > self.duration[1] {
            return bad(format!("bad duration range {:?}", self.duration));
        }
        if self.length == 0 || self.n_series == 0 {
            return bad("length and n_series must be positive".into());
        }
        for (i, st) in self.states.iter().enumerate() {
            if st.mean.len() != self.channels || st.std.len() != self.channels {
                return bad(format!("state {i} has wrong channel count"));
            }
            if st.std.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) || st.mean.iter().any(|m| !m.is_finite()) {
                return bad(format!("state {i} has invalid mean/std"));
            }
        }
        let mut k = self.states.len();
        for &f in &self.coarsen {
            let (_, kc) = coarsen_states(&[], k, f).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            k = kc;
        }
        Ok(())
    }

    pub fn granularity(&self) -> Result<GranularitySpec> {
        let mut levels = vec![Level {
            name: "fine".into(),
            k: self.states.len(),
        }];
        let mut k = self.states.len();
        let mut total = 1;
        for &f in &self.coarsen {
            let (_, kc) = coarsen_states(&[], k, f)?;
            total *= f;
            levels.push(Level {
                name: format!("coarse{total}x"),
                k: kc,
            });
            k = kc;
        }
        GranularitySpec::new(levels)
    }
}

fn generate_series(spec: &SynthSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<MultivariateSeries> {
    let k = spec.states.len();
    let mut fine = Vec::with_capacity(spec.length + spec.duration[1]);
    let mut state = rng.random_range(0..k);
    while fine.len() < spec.length {
        let len = rng.random_range(spec.duration[0]..=spec.duration[1]);
        fine.extend(std::iter::repeat_n(state, len));
        let next = rng.random_range(0..k - 1);
        state = if next >= state { next + 1 } else { next };
    }
    let t_total = fine.len();
    let mut values = Array2::<f32>::zeros((t_total, spec.channels));
    for (t, mut row) in values.rows_mut().into_iter().enumerate() {
        let st = &spec.states[fine[t]];
        for (c, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *v = (st.mean[c] + st.std[c] * z) as f32;
        }
    }
    let mut tracks = vec![fine];
    let mut kc = k;
    for &f in &spec.coarsen {
        let (next, k_next) = coarsen_states(tracks.last().expect("fine track"), kc, f)?;
        tracks.push(next);
        kc = k_next;
    }
    Ok(MultivariateSeries {
        id: format!("series_{index}"),
        values,
        channel_names: (0..spec.channels).map(|c| format!("f{c}")).collect(),
        label_tracks: tracks,
    })
}

/// Deterministic given `seed`.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let granularity = spec.granularity()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let series = (0..spec.n_series)
        .map(|i| generate_series(spec, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(series, granularity, spec.split)
}

/// Lengths of maximal constant runs in a label track.
pub fn run_lengths(track: &[usize]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut iter = track.iter();
    let Some(mut prev) = iter.next() else {
        return runs;
    };
    let mut len = 1;
    for s in iter {
        if s == prev {
            len += 1;
        } else {
            runs.push(len);
            len = 1;
            prev = s;
        }
    }
    runs.push(len);
    runs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            length: 3000,
            n_series: 2,
            ..SynthSpec::hypercube(3, 8, 3.0, 0.5)
        }
    }

    #[test]
    fn deterministic() {
        let a = synthesize_dataset(&small(), 7).unwrap();
        let b = synthesize_dataset(&small(), 7).unwrap();
        assert_eq!(a.series, b.series);
        let c = synthesize_dataset(&small(), 8).unwrap();
        assert_ne!(a.series, c.series);
    }

    #[test]
    fn coarse_track_has_half_the_states() {
        let ds = synthesize_dataset(&small(), 1).unwrap();
        assert_eq!(ds.spec.levels[1].k, 4);
        assert_eq!(ds.spec.k_total(), 12);
        for s in &ds.series {
            assert!(s.label_tracks[1].iter().all(|&c| c < 4));
            for (f, c) in s.label_tracks[0].iter().zip(&s.label_tracks[1]) {
                assert_eq!(f / 2, *c);
            }
        }
    }

    #[test]
    fn segment_lengths_within_range() {
        let ds = synthesize_dataset(&small(), 3).unwrap();
        for s in &ds.series {
            assert!(s.len() >= 3000);
            let runs = run_lengths(&s.label_tracks[0]);
            assert!(runs.len() > 10);
            assert!(runs.iter().all(|&r| (50..=200).contains(&r)), "{runs:?}");
        }
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.duration = [10, 5];
        assert!(matches!(synthesize_dataset(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = small();
        s.coarsen = vec![8];
        assert!(matches!(synthesize_dataset(&s, 0), Err(Error::InvalidSpec(_))));
        let mut s = small();
        s.states[0].mean.pop();
        assert!(synthesize_dataset(&s, 0).is_err());
    }

    #[test]
    fn runs() {
        assert_eq!(run_lengths(&[0, 0, 1, 1, 1, 0]), vec![2, 3, 1]);
        assert!(run_lengths(&[]).is_empty());
    }
}
