//! Labeled multivariate series: loading, windowing, coarsening, splitting
//! and normalization.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An evenly sampled `T_total x C` record with one aligned label track per
/// granularity level. Labels are stored as local (per-level) ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateSeries {
    pub id: String,
    pub values: Array2<f32>,
    pub channel_names: Vec<String>,
    pub label_tracks: Vec<Vec<usize>>,
}

impl MultivariateSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn levels(&self) -> usize {
        self.label_tracks.len()
    }

    /// Checks the structural invariants against a granularity spec.
    pub fn validate(&self, spec: &GranularitySpec) -> Result<()> {
        if self.values.nrows() == 0 || self.values.ncols() == 0 {
            return Err(Error::SchemaMismatch(format!("series {} is empty", self.id)));
        }
        if self.channel_names.len() != self.values.ncols() {
            return Err(Error::SchemaMismatch(format!(
                "series {}: {} channel names for {} channels",
                self.id,
                self.channel_names.len(),
                self.values.ncols()
            )));
        }
        if self.label_tracks.len() != spec.levels.len() {
            return Err(Error::SchemaMismatch(format!(
                "series {}: {} label tracks for {} levels",
                self.id,
                self.label_tracks.len(),
                spec.levels.len()
            )));
        }
        for (g, track) in self.label_tracks.iter().enumerate() {
            if track.len() != self.len() {
                return Err(Error::SchemaMismatch(format!(
                    "series {}: label track {g} has length {} (expected {})",
                    self.id,
                    track.len(),
                    self.len()
                )));
            }
            let k = spec.levels[g].k;
            if let Some((t, &label)) = track.iter().enumerate().find(|(_, &l)| l >= k) {
                return Err(Error::LabelOutOfRange {
                    level: g,
                    t,
                    label: label as i64,
                    k,
                });
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::SchemaMismatch(format!(
                "series {} has missing or non-finite values",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Level {
    pub name: String,
    #[serde(rename = "K")]
    pub k: usize,
}

/// The disjoint union of per-level label sets. Level `g`, local state `k`
/// has global id `offset_g + k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub levels: Vec<Level>,
}

impl GranularitySpec {
    pub fn new(levels: Vec<Level>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidSpec("at least one level is required".into()));
        }
        if let Some(l) = levels.iter().find(|l| l.k == 0) {
            return Err(Error::InvalidSpec(format!("level {} has K=0", l.name)));
        }
        Ok(Self { levels })
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.levels
            .iter()
            .scan(0, |acc, l| {
                let off = *acc;
                *acc += l.k;
                Some(off)
            })
            .collect()
    }

    pub fn k_total(&self) -> usize {
        self.levels.iter().map(|l| l.k).sum()
    }

    pub fn global_id(&self, level: usize, local: usize) -> usize {
        self.offsets()[level] + local
    }

    /// Inverse of [`global_id`](Self::global_id).
    pub fn level_of(&self, global: usize) -> Option<(usize, usize)> {
        let mut off = 0;
        for (g, l) in self.levels.iter().enumerate() {
            if global < off + l.k {
                return Some((g, global - off));
            }
            off += l.k;
        }
        None
    }

    /// Global id range occupied by one level.
    pub fn level_range(&self, level: usize) -> Range<usize> {
        let off = self.offsets()[level];
        off..off + self.levels[level].k
    }
}

/// A `T x C` slice of a series, the unit of training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub series_id: String,
    pub offset: usize,
    pub x: Array2<f32>,
    /// Local states per level, each of length `T`.
    pub states: Vec<Vec<usize>>,
    pub level_in_use: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Ground truth at `level_in_use`, as global ids.
    pub fn targets(&self, spec: &GranularitySpec) -> Vec<usize> {
        let off = spec.offsets()[self.level_in_use];
        self.states[self.level_in_use].iter().map(|&s| s + off).collect()
    }

    pub fn with_level(&self, level: usize) -> Window {
        Window {
            level_in_use: level,
            ..self.clone()
        }
    }
}

fn window_at(series: &MultivariateSeries, offset: usize, t: usize) -> Window {
    Window {
        series_id: series.id.clone(),
        offset,
        x: series.values.slice(s![offset..offset + t, ..]).to_owned(),
        states: series
            .label_tracks
            .iter()
            .map(|tr| tr[offset..offset + t].to_vec())
            .collect(),
        level_in_use: 0,
    }
}

/// Start offsets `0, S, 2S, ...` of every length-`t` window fitting in `len`.
pub fn window_offsets(len: usize, t: usize, stride: usize) -> Result<Vec<usize>> {
    if t == 0 || stride == 0 || stride > t {
        return Err(Error::InvalidWindow(format!(
            "need 1 <= S <= T, got T={t}, S={stride}"
        )));
    }
    if t > len {
        return Err(Error::WindowTooLong { window: t, len });
    }
    Ok((0..=(len - t)).step_by(stride).collect())
}

pub fn sliding_windows(series: &MultivariateSeries, t: usize, stride: usize) -> Result<Vec<Window>> {
    Ok(window_offsets(series.len(), t, stride)?
        .into_iter()
        .map(|off| window_at(series, off, t))
        .collect())
}

/// Sliding windows restricted to a timestep range of the series.
pub fn windows_in_range(
    series: &MultivariateSeries,
    range: Range<usize>,
    t: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    if range.end > series.len() || range.start > range.end {
        return Err(Error::InvalidWindow(format!(
            "range {range:?} outside series of length {}",
            series.len()
        )));
    }
    Ok(window_offsets(range.len(), t, stride)?
        .into_iter()
        .map(|off| window_at(series, range.start + off, t))
        .collect())
}

/// Merges adjacent states: `s -> s / factor`.
pub fn coarsen_states(track: &[usize], k_fine: usize, factor: usize) -> Result<(Vec<usize>, usize)> {
    if factor < 2 {
        return Err(Error::InvalidSpec(format!("coarsening factor must be >= 2, got {factor}")));
    }
    let k_coarse = k_fine.div_ceil(factor);
    if k_coarse < 2 {
        return Err(Error::FactorTooLarge { k_fine, factor });
    }
    Ok((track.iter().map(|&s| s / factor).collect(), k_coarse))
}

/// Contiguous train/validation/test ranges with boundaries at
/// `floor(f * T_total)`. Every range must hold at least `min_len` steps.
pub fn chronological_split(
    t_total: usize,
    fractions: [f64; 3],
    min_len: usize,
) -> Result<[Range<usize>; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::DegenerateSplit(format!(
            "fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let cut = |f: f64| ((f * t_total as f64) + 1e-9).floor() as usize;
    let b1 = cut(fractions[0]).min(t_total);
    let b2 = cut(fractions[0] + fractions[1]).clamp(b1, t_total);
    let ranges = [0..b1, b1..b2, b2..t_total];
    if let Some(r) = ranges.iter().find(|r| r.len() < min_len.max(1)) {
        return Err(Error::DegenerateSplit(format!(
            "range {r:?} of {t_total} steps is shorter than {}",
            min_len.max(1)
        )));
    }
    Ok(ranges)
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over the given (series, range) portions. Constant channels
    /// get `std = 1`.
    pub fn from_ranges<'a>(portions: impl IntoIterator<Item = (&'a MultivariateSeries, Range<usize>)>) -> Self {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let portions: Vec<_> = portions.into_iter().collect();
        for (series, range) in &portions {
            if sum.is_empty() {
                sum = vec![0.0; series.channels()];
            }
            for row in series.values.slice(s![range.clone(), ..]).rows() {
                for (acc, &v) in sum.iter_mut().zip(row) {
                    *acc += v as f64;
                }
                n += 1;
            }
        }
        let n_f = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n_f).collect();
        sq.resize(mean.len(), 0.0);
        for (series, range) in &portions {
            for row in series.values.slice(s![range.clone(), ..]).rows() {
                for ((acc, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let d = v as f64 - m;
                    *acc += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n_f).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

pub fn normalize(series: &MultivariateSeries, stats: &ChannelStats) -> MultivariateSeries {
    let mut out = series.clone();
    for mut row in out.values.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let sd = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
            *v = ((*v as f64 - stats.mean[c]) / sd) as f32;
        }
    }
    out
}

/// On-disk dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub series: Vec<String>,
    pub levels: Vec<Level>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

/// Chronological train/validation/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }
}

/// Series plus their shared granularity spec and split fractions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: Vec<MultivariateSeries>,
    pub spec: GranularitySpec,
    pub split: [f64; 3],
}

impl Dataset {
    pub fn new(series: Vec<MultivariateSeries>, spec: GranularitySpec, split: [f64; 3]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::EmptyDataset("no series".into()));
        }
        let c = series[0].channels();
        for s in &series {
            s.validate(&spec)?;
            if s.channels() != c {
                return Err(Error::SchemaMismatch(format!(
                    "series {} has {} channels, expected {c}",
                    s.id,
                    s.channels()
                )));
            }
        }
        Ok(Self { series, spec, split })
    }

    pub fn channels(&self) -> usize {
        self.series[0].channels()
    }

    pub fn ranges(&self, min_len: usize) -> Result<Vec<[Range<usize>; 3]>> {
        self.series
            .iter()
            .map(|s| chronological_split(s.len(), self.split, min_len))
            .collect()
    }

    /// Training-portion statistics across all series.
    pub fn train_stats(&self, min_len: usize) -> Result<ChannelStats> {
        let ranges = self.ranges(min_len)?;
        Ok(ChannelStats::from_ranges(
            self.series.iter().zip(ranges).map(|(s, r)| (s, r[0].clone())),
        ))
    }

    pub fn normalized(&self, stats: &ChannelStats) -> Dataset {
        Dataset {
            series: self.series.iter().map(|s| normalize(s, stats)).collect(),
            spec: self.spec.clone(),
            split: self.split,
        }
    }

    /// Windows of one split, with every window offset repeated once per
    /// granularity level (level-major within each offset).
    pub fn split_windows(&self, split: Split, t: usize, stride: usize) -> Result<Vec<Window>> {
        let ranges = self.ranges(t)?;
        let mut out = Vec::new();
        for (series, r) in self.series.iter().zip(ranges) {
            for w in windows_in_range(series, r[split.index()].clone(), t, stride)? {
                for g in 0..self.spec.levels.len() {
                    out.push(w.with_level(g));
                }
            }
        }
        Ok(out)
    }
}

fn parse_series_csv(path: &Path, spec: &GranularitySpec) -> Result<MultivariateSeries> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_series(&id, &text, spec)
}

/// Parses the series CSV layout `t,f0..f{C-1},y0..y{G-1}`.
pub fn parse_series(id: &str, text: &str, spec: &GranularitySpec) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::SchemaMismatch(format!("{id}: {e}")))?
        .clone();
    if header.is_empty() || header.get(0) != Some("t") {
        return Err(Error::SchemaMismatch(format!("{id}: header must start with `t`")));
    }
    let n_levels = spec.levels.len();
    let n_feat = header.len().saturating_sub(1 + n_levels);
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((0..n_feat).map(|c| format!("f{c}")))
        .chain((0..n_levels).map(|g| format!("y{g}")))
        .collect();
    if n_feat == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::SchemaMismatch(format!(
            "{id}: expected header {}, found {}",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut values = Vec::new();
    let mut tracks = vec![Vec::new(); n_levels];
    let mut rows = 0usize;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::SchemaMismatch(format!("{id}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::SchemaMismatch(format!(
                "{id}: row {rows} has {} columns, expected {}",
                rec.len(),
                header.len()
            )));
        }
        let t_field = &rec[0];
        if t_field.parse::<usize>().ok() != Some(rows) {
            return Err(Error::NonUniformSampling {
                expected: rows,
                found: t_field.to_string(),
            });
        }
        for c in 0..n_feat {
            let v: f32 = rec[1 + c].parse().map_err(|_| {
                Error::SchemaMismatch(format!("{id}: row {rows}: bad value `{}`", &rec[1 + c]))
            })?;
            if !v.is_finite() {
                return Err(Error::SchemaMismatch(format!("{id}: row {rows}: non-finite value")));
            }
            values.push(v);
        }
        for (g, track) in tracks.iter_mut().enumerate() {
            let raw = &rec[1 + n_feat + g];
            let label: i64 = raw
                .parse()
                .map_err(|_| Error::SchemaMismatch(format!("{id}: row {rows}: bad label `{raw}`")))?;
            let k = spec.levels[g].k;
            if label < 0 || label as usize >= k {
                return Err(Error::LabelOutOfRange { level: g, t: rows, label, k });
            }
            track.push(label as usize);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::SchemaMismatch(format!("{id}: no data rows")));
    }
    let values = Array2::from_shape_vec((rows, n_feat), values)
        .map_err(|e| Error::SchemaMismatch(format!("{id}: {e}")))?;
    Ok(MultivariateSeries {
        id: id.to_string(),
        values,
        channel_names: (0..n_feat).map(|c| format!("f{c}")).collect(),
        label_tracks: tracks,
    })
}

pub fn series_to_csv(series: &MultivariateSeries) -> String {
    let mut out = String::from("t");
    for c in 0..series.channels() {
        out.push_str(&format!(",f{c}"));
    }
    for g in 0..series.levels() {
        out.push_str(&format!(",y{g}"));
    }
    out.push('\n');
    for (t, row) in series.values.rows().into_iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        for track in &series.label_tracks {
            out.push(',');
            out.push_str(&track[t].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("manifest: {e}")))
}

fn resolve(manifest_path: &Path, entry: &str) -> PathBuf {
    let p = PathBuf::from(entry);
    if p.is_absolute() {
        p
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads a manifest and every series CSV it references.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let spec = GranularitySpec::new(manifest.levels.clone())?;
    let series = manifest
        .series
        .iter()
        .map(|entry| parse_series_csv(&resolve(manifest_path, entry), &spec))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(series, spec, manifest.split)
}

/// Writes `series_<i>.csv` files plus `manifest.json` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for s in &dataset.series {
        let name = format!("{}.csv", s.id);
        fs::write(dir.join(&name), series_to_csv(s))?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        series: names,
        levels: dataset.spec.levels.clone(),
        split: dataset.split,
        normalization: None,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec2() -> GranularitySpec {
        GranularitySpec::new(vec![
            Level { name: "fine".into(), k: 4 },
            Level { name: "coarse".into(), k: 2 },
        ])
        .unwrap()
    }

    fn toy_series(len: usize) -> MultivariateSeries {
        MultivariateSeries {
            id: "s".into(),
            values: Array2::from_shape_fn((len, 2), |(t, c)| (t * 2 + c) as f32),
            channel_names: vec!["f0".into(), "f1".into()],
            label_tracks: vec![
                (0..len).map(|t| (t / 3) % 4).collect(),
                (0..len).map(|t| ((t / 3) % 4) / 2).collect(),
            ],
        }
    }

    #[test]
    fn offsets_and_total() {
        let spec = spec2();
        assert_eq!(spec.k_total(), 6);
        assert_eq!(spec.offsets(), vec![0, 4]);
        assert_eq!(spec.global_id(1, 1), 5);
        assert_eq!(spec.level_of(5), Some((1, 1)));
        assert_eq!(spec.level_of(6), None);
        for gid in 0..6 {
            let (g, k) = spec.level_of(gid).unwrap();
            assert_eq!(spec.global_id(g, k), gid);
        }
    }

    #[test]
    fn window_offsets_enumerate() {
        let s = toy_series(10);
        let w = sliding_windows(&s, 4, 2).unwrap();
        assert_eq!(w.iter().map(|w| w.offset).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert_eq!(w[1].x[[0, 0]], 4.0);
        assert_eq!(w[1].states[0], s.label_tracks[0][2..6].to_vec());
        assert_eq!(window_offsets(256, 256, 64).unwrap(), vec![0]);
        assert!(matches!(sliding_windows(&s, 11, 2), Err(Error::WindowTooLong { .. })));
        assert!(sliding_windows(&s, 4, 5).is_err());
    }

    #[test]
    fn coarsening() {
        assert_eq!(coarsen_states(&[0, 1, 2, 3], 4, 2).unwrap(), (vec![0, 0, 1, 1], 2));
        assert_eq!(coarsen_states(&[], 43, 2).unwrap().1, 22);
        assert_eq!(coarsen_states(&[], 12, 2).unwrap().1, 6);
        assert!(matches!(coarsen_states(&[0], 4, 4), Err(Error::FactorTooLarge { .. })));
        let track: Vec<usize> = (0..40).collect();
        let (twice, _) = coarsen_states(&coarsen_states(&track, 40, 2).unwrap().0, 20, 2).unwrap();
        assert_eq!(twice, coarsen_states(&track, 40, 4).unwrap().0);
    }

    #[test]
    fn splits() {
        assert_eq!(
            chronological_split(1000, [0.7, 0.15, 0.15], 1).unwrap(),
            [0..700, 700..850, 850..1000]
        );
        assert_eq!(
            chronological_split(100, [0.5, 0.25, 0.25], 1).unwrap(),
            [0..50, 50..75, 75..100]
        );
        assert!(matches!(
            chronological_split(10, [0.7, 0.15, 0.15], 8),
            Err(Error::DegenerateSplit(_))
        ));
        assert!(chronological_split(10, [0.5, 0.5, 0.0], 1).is_err());
    }

    #[test]
    fn normalization() {
        let mut s = toy_series(20);
        s.values.column_mut(1).fill(3.0);
        let stats = ChannelStats::from_ranges([(&s, 0..14)]);
        assert_eq!(stats.std[1], 1.0);
        let n = normalize(&s, &stats);
        assert!(n.values.column(1).iter().all(|&v| v == 0.0));
        let mean: f64 = n.values.slice(s![0..14, 0]).iter().map(|&v| v as f64).sum::<f64>() / 14.0;
        assert!(mean.abs() < 1e-6);
        // test range uses training statistics unchanged
        let expect = ((s.values[[17, 0]] as f64 - stats.mean[0]) / stats.std[0]) as f32;
        assert_eq!(n.values[[17, 0]], expect);
        assert_eq!(n.label_tracks, s.label_tracks);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let spec = spec2();
        let s = toy_series(7);
        let parsed = parse_series("s", &series_to_csv(&s), &spec).unwrap();
        assert_eq!(parsed, s);

        let bad_label = "t,f0,y0,y1\n0,1.0,4,0\n";
        assert!(matches!(parse_series("b", bad_label, &spec), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(parse_series("e", "", &spec), Err(Error::SchemaMismatch(_))));
        let header_only = "t,f0,y0,y1\n";
        assert!(matches!(parse_series("h", header_only, &spec), Err(Error::SchemaMismatch(_))));
        let gap = "t,f0,y0,y1\n0,1.0,0,0\n2,1.0,0,0\n";
        assert!(matches!(parse_series("g", gap, &spec), Err(Error::NonUniformSampling { .. })));
        let wrong_cols = "t,f0,y0\n0,1.0,0\n";
        assert!(matches!(parse_series("w", wrong_cols, &spec), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "t,f0,f1,y0,y1\n0,0.5,1,3,1\n1,0.25,2,2,1\n2,0,3,0,0\n";
        std::fs::write(dir.path().join("a.csv"), csv).unwrap();
        let manifest = r#"{"series":["a.csv"],"levels":[{"name":"fine","K":4},{"name":"coarse","K":2}],"split":[0.7,0.15,0.15]}"#;
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, manifest).unwrap();
        let ds = load_dataset(&mpath).unwrap();
        assert_eq!(ds.spec.k_total(), 6);
        assert_eq!(ds.spec.offsets(), vec![0, 4]);
        assert_eq!(ds.series[0].label_tracks[0], vec![3, 2, 0]);
        assert_eq!(ds.channels(), 2);

        let missing = r#"{"series":["nope.csv"],"levels":[{"name":"fine","K":4},{"name":"coarse","K":2}]}"#;
        std::fs::write(&mpath, missing).unwrap();
        assert!(matches!(load_dataset(&mpath), Err(Error::MissingFile(_))));
        assert!(matches!(load_dataset(&dir.path().join("x.json")), Err(Error::MissingFile(_))));
    }
}
