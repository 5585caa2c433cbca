//! Dataset records, the JSON file format, synthetic corpora and fold splits.
//!
//! A dataset file is one JSON document:
//!
//! ```json
//! {"mode": "tvsum",
//!  "videos": [{"id": "v0", "n_frames": 60, "picks": [0, 15, 30, 45],
//!              "change_points": [[0, 29], [30, 59]],
//!              "features": [[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]],
//!              "scores": [[0.2, 0.3, 0.8, 0.9]]}]}
//! ```
//!
//! TVSum-mode videos carry `scores` (annotators x timesteps, in `[0, 1]`);
//! SumMe-mode videos carry binary `summaries` of the same shape. Both live on
//! the sampled timeline given by `picks`.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeline::{assign_segment_ids, ChangePointPartition, PickSequence, Segment, SegmentIndexMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Tvsum,
    Summe,
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetMode::Tvsum => "tvsum",
            DatasetMode::Summe => "summe",
        })
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tvsum" => Ok(DatasetMode::Tvsum),
            "summe" => Ok(DatasetMode::Summe),
            other => Err(Error::config(format!(
                "unknown dataset mode `{other}` (expected tvsum or summe)"
            ))),
        }
    }
}

/// Per-annotator targets on the sampled timeline, `U x T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotations {
    Scores(Array2<f64>),
    Summaries(Array2<f64>),
}

impl Annotations {
    pub fn matrix(&self) -> &Array2<f64> {
        match self {
            Annotations::Scores(a) | Annotations::Summaries(a) => a,
        }
    }

    pub fn mode(&self) -> DatasetMode {
        match self {
            Annotations::Scores(_) => DatasetMode::Tvsum,
            Annotations::Summaries(_) => DatasetMode::Summe,
        }
    }

    pub fn n_annotators(&self) -> usize {
        self.matrix().nrows()
    }
}

/// One validated video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub picks: PickSequence,
    pub partition: ChangePointPartition,
    /// `T x D`.
    pub features: Array2<f64>,
    pub annotations: Annotations,
    pub segments: SegmentIndexMap,
}

impl VideoRecord {
    pub fn new(
        id: impl Into<String>,
        picks: PickSequence,
        partition: ChangePointPartition,
        features: Array2<f64>,
        annotations: Annotations,
    ) -> Result<Self> {
        let id = id.into();
        let fail = |reason: String| Error::Validation {
            video: id.clone(),
            reason,
        };
        let t_len = picks.len();
        if picks.last() >= partition.n_frames() {
            return Err(fail(format!(
                "pick {} lies outside the {} frames",
                picks.last(),
                partition.n_frames()
            )));
        }
        if features.nrows() != t_len || features.ncols() == 0 {
            return Err(fail(format!(
                "features are {}x{}, expected {t_len} rows and at least one column",
                features.nrows(),
                features.ncols()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(fail("features contain non-finite values".into()));
        }
        let ann = annotations.matrix();
        if ann.nrows() == 0 {
            return Err(fail("no annotator rows".into()));
        }
        if ann.ncols() != t_len {
            return Err(fail(format!(
                "annotation rows have {} entries, expected {t_len}",
                ann.ncols()
            )));
        }
        match &annotations {
            Annotations::Scores(a) => {
                if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(fail("scores must lie in [0, 1]".into()));
                }
            }
            Annotations::Summaries(a) => {
                if a.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(fail("summaries must be binary".into()));
                }
            }
        }
        let segments = assign_segment_ids(&picks, &partition).map_err(|e| fail(e.to_string()))?;
        Ok(Self {
            id,
            picks,
            partition,
            features,
            annotations,
            segments,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.picks.len()
    }

    pub fn n_frames(&self) -> usize {
        self.partition.n_frames()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Mean annotation per timestep: the evaluation target of both protocols.
    pub fn mean_annotation(&self) -> Vec<f64> {
        self.annotations
            .matrix()
            .mean_axis(Axis(0))
            .expect("at least one annotator")
            .to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mode: DatasetMode,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn new(mode: DatasetMode, videos: Vec<VideoRecord>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::invalid("dataset has no videos"));
        }
        let dim = videos[0].feature_dim();
        let mut seen = std::collections::HashSet::new();
        for v in &videos {
            if v.annotations.mode() != mode {
                return Err(Error::Validation {
                    video: v.id.clone(),
                    reason: format!("{} annotations in a {mode} dataset", v.annotations.mode()),
                });
            }
            if v.feature_dim() != dim {
                return Err(Error::Validation {
                    video: v.id.clone(),
                    reason: format!("feature dim {} differs from {dim}", v.feature_dim()),
                });
            }
            if !seen.insert(v.id.as_str()) {
                return Err(Error::Validation {
                    video: v.id.clone(),
                    reason: "duplicate video id".into(),
                });
            }
        }
        Ok(Self { mode, videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.videos[0].feature_dim()
    }

    pub fn ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }

    /// Videos with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let videos = ids
            .iter()
            .map(|id| {
                self.videos
                    .iter()
                    .find(|v| &v.id == id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("unknown video id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.mode, videos)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(text)?;
        raw.into_dataset()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&RawDataset::from_dataset(self))?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    mode: DatasetMode,
    videos: Vec<RawVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVideo {
    id: String,
    n_frames: usize,
    picks: Vec<usize>,
    change_points: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    summaries: Option<Vec<Vec<f64>>>,
}

fn matrix(rows: Vec<Vec<f64>>, what: &str, id: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Validation {
            video: id.to_owned(),
            reason: format!("{what} rows have unequal lengths"),
        });
    }
    Ok(Array2::from_shape_vec((n, m), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl RawDataset {
    fn into_dataset(self) -> Result<Dataset> {
        let mode = self.mode;
        let videos = self
            .videos
            .into_iter()
            .map(|v| {
                let id = v.id;
                let fail = |reason: String| Error::Validation {
                    video: id.clone(),
                    reason,
                };
                let partition = ChangePointPartition::from_pairs(&v.change_points, v.n_frames)
                    .map_err(|e| fail(format!("change points: {e}")))?;
                let picks = PickSequence::new(v.picks).map_err(|e| fail(format!("picks: {e}")))?;
                let annotations = match (v.scores, v.summaries) {
                    (Some(s), None) => Annotations::Scores(matrix(s, "scores", &id)?),
                    (None, Some(s)) => Annotations::Summaries(matrix(s, "summaries", &id)?),
                    _ => return Err(fail("exactly one of `scores` and `summaries` is required".into())),
                };
                let features = matrix(v.features, "features", &id)?;
                VideoRecord::new(id.clone(), picks, partition, features, annotations)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(mode, videos)
    }

    fn from_dataset(d: &Dataset) -> Self {
        Self {
            mode: d.mode,
            videos: d
                .videos
                .iter()
                .map(|v| {
                    let (scores, summaries) = match &v.annotations {
                        Annotations::Scores(a) => (Some(rows(a)), None),
                        Annotations::Summaries(a) => (None, Some(rows(a))),
                    };
                    RawVideo {
                        id: v.id.clone(),
                        n_frames: v.n_frames(),
                        picks: v.picks.as_slice().to_vec(),
                        change_points: v.partition.segments().iter().map(|s| (s.start, s.end)).collect(),
                        features: rows(&v.features),
                        scores,
                        summaries,
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    /// Sampled timesteps per video.
    pub steps: usize,
    pub feature_dim: usize,
    pub annotators: usize,
    pub segments: usize,
    /// Original frames between consecutive picks.
    pub frame_stride: usize,
    pub feature_noise: f64,
    pub annotator_noise: f64,
    pub mode: DatasetMode,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 8,
            steps: 64,
            feature_dim: 16,
            annotators: 3,
            segments: 6,
            frame_stride: 15,
            feature_noise: 0.1,
            annotator_noise: 0.05,
            mode: DatasetMode::Tvsum,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_videos", self.n_videos),
            ("steps", self.steps),
            ("feature_dim", self.feature_dim),
            ("annotators", self.annotators),
            ("segments", self.segments),
            ("frame_stride", self.frame_stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("synthetic {name} must be at least 1")));
            }
        }
        if self.segments > self.steps {
            return Err(Error::config(format!(
                "synthetic segments ({}) cannot exceed steps ({})",
                self.segments, self.steps
            )));
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("annotator_noise", self.annotator_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("synthetic {name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Synthetic videos with a linearly recoverable per-segment importance.
///
/// Picks sit every `frame_stride` frames; segment boundaries fall between
/// picks so every segment is sampled. Features are a fixed random linear map
/// of `[importance; one-hot(segment)]` plus Gaussian noise.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let code_dim = 1 + cfg.segments;
    let embed = Array2::from_shape_simple_fn((code_dim, cfg.feature_dim), || rng.sample::<f64, _>(StandardNormal));
    let (t_len, stride) = (cfg.steps, cfg.frame_stride);
    let n_frames = t_len * stride;
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for vi in 0..cfg.n_videos {
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, t_len - 1, cfg.segments - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(t_len);
        let segments: Vec<Segment> = bounds
            .windows(2)
            .map(|w| Segment::new(w[0] * stride, w[1] * stride - 1))
            .collect();
        let partition = ChangePointPartition::new(segments, n_frames)?;
        let picks = PickSequence::new((0..t_len).map(|t| t * stride).collect())?;
        let importance: Vec<f64> = (0..cfg.segments).map(|_| rng.gen_range(0.0..1.0)).collect();
        let seg_of: Vec<usize> = (0..t_len).map(|t| bounds.partition_point(|&b| b <= t) - 1).collect();

        let mut code = Array2::zeros((t_len, code_dim));
        for (t, &k) in seg_of.iter().enumerate() {
            code[[t, 0]] = importance[k];
            code[[t, 1 + k]] = 1.0;
        }
        let mut features = code.dot(&embed);
        features.mapv_inplace(|v| v + cfg.feature_noise * rng.sample::<f64, _>(StandardNormal));

        let latent = |t: usize| importance[seg_of[t]];
        let annotations = match cfg.mode {
            DatasetMode::Tvsum => Annotations::Scores(Array2::from_shape_fn((cfg.annotators, t_len), |(_, t)| {
                (latent(t) + cfg.annotator_noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
            })),
            DatasetMode::Summe => {
                let mut a = Array2::zeros((cfg.annotators, t_len));
                for mut row in a.rows_mut() {
                    for (t, y) in row.iter_mut().enumerate() {
                        let noisy = latent(t) + cfg.annotator_noise * rng.sample::<f64, _>(StandardNormal);
                        *y = if noisy > 0.5 { 1.0 } else { 0.0 };
                    }
                }
                Annotations::Summaries(a)
            }
        };
        videos.push(VideoRecord::new(
            format!("video_{vi:03}"),
            picks,
            partition,
            features,
            annotations,
        )?);
    }
    Dataset::new(cfg.mode, videos)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle split into `k` contiguous test chunks; the first
/// `n mod k` chunks take one extra video. Train ids keep dataset order.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::invalid(format!("{} videos cannot fill {k} folds", ids.len())));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let chunk = &order[start..start + size];
        start += size;
        let test: Vec<String> = chunk.iter().map(|&i| ids[i].clone()).collect();
        let train = (0..ids.len())
            .filter(|i| !chunk.contains(i))
            .map(|i| ids[i].clone())
            .collect();
        folds.push(Fold { train, test });
    }
    Ok(folds)
}
