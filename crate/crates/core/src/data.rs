//! Datasets: synthetic generation, on-disk manifest + payload format,
//! temporal interpolation, and balanced mini-batch sampling.
//!
//! On disk a dataset is a `manifest.json` listing video records next to one
//! payload file per video: raw little-endian f32, row-major
//! `[crops, t_raw, c]`, header-free (shape comes from the manifest). A `.csv`
//! payload (one snippet per row) is accepted for hand-built fixtures.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Abnormal,
}

/// One video's metadata; features live in the payload file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    pub crops: usize,
    pub t_raw: usize,
    pub c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_labels: Option<Vec<bool>>,
    pub payload: String,
}

impl VideoRecord {
    fn validate(&self) -> Result<()> {
        if self.crops == 0 || self.t_raw == 0 || self.c == 0 {
            return Err(Error::Format(format!("video {}: empty shape", self.id)));
        }
        if let Some(labels) = &self.snippet_labels {
            if labels.len() != self.t_raw {
                return Err(Error::Format(format!(
                    "video {}: {} snippet labels for {} snippets",
                    self.id,
                    labels.len(),
                    self.t_raw
                )));
            }
            let any_abnormal = labels.iter().any(|&l| l);
            if any_abnormal != (self.label == Label::Abnormal) {
                return Err(Error::Format(format!(
                    "video {}: snippet labels contradict the video label",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Video {
    pub record: VideoRecord,
    /// `[crops, t_raw, c]`
    pub features: FeatureTensor,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn normal_indices(&self) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| self.videos[i].record.label == Label::Normal)
            .collect()
    }

    pub fn abnormal_indices(&self) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| self.videos[i].record.label == Label::Abnormal)
            .collect()
    }

    /// Channel count, uniform across all videos.
    pub fn channels(&self) -> Result<usize> {
        let c = self.videos.first().ok_or(Error::EmptyBatch)?.record.c;
        if self.videos.iter().any(|v| v.record.c != c) {
            return Err(Error::Format("mixed channel counts in dataset".into()));
        }
        Ok(c)
    }

    pub fn has_snippet_labels(&self) -> bool {
        self.videos
            .iter()
            .all(|v| v.record.snippet_labels.is_some())
    }

    /// Write `manifest.json` plus one payload file per video.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            version: 1,
            videos: self.videos.iter().map(|v| v.record.clone()).collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
        for video in &self.videos {
            let path = dir.join(&video.record.payload);
            let mut file = fs::File::create(path)?;
            let mut bytes =
                Vec::with_capacity(video.features.len() * std::mem::size_of::<f32>());
            for &v in video.features.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.version != 1 {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for record in manifest.videos {
            record.validate()?;
            let path = dir.join(&record.payload);
            let features = if record.payload.ends_with(".csv") {
                read_csv_payload(&path, &record)?
            } else {
                read_binary_payload(&path, &record)?
            };
            videos.push(Video { record, features });
        }
        Ok(Dataset { videos })
    }
}

fn read_binary_payload(path: &Path, record: &VideoRecord) -> Result<FeatureTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let expected = record.crops * record.t_raw * record.c;
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "payload {}: {} bytes, expected {}",
            record.payload,
            bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((record.crops, record.t_raw, record.c), values)
        .map_err(|e| Error::Format(format!("payload {}: {e}", record.payload)))
}

/// One snippet per row, `c` comma-separated floats; implies a single crop.
fn read_csv_payload(path: &Path, record: &VideoRecord) -> Result<FeatureTensor> {
    if record.crops != 1 {
        return Err(Error::Format(format!(
            "payload {}: csv payloads hold a single crop",
            record.payload
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut values = Vec::with_capacity(record.t_raw * record.c);
    let mut rows = 0;
    for row in reader.records() {
        let row = row?;
        if row.len() != record.c {
            return Err(Error::Format(format!(
                "payload {}: row with {} fields, expected {}",
                record.payload,
                row.len(),
                record.c
            )));
        }
        for field in row.iter() {
            values.push(field.trim().parse::<f32>().map_err(|e| {
                Error::Format(format!("payload {}: {e}", record.payload))
            })?);
        }
        rows += 1;
    }
    if rows != record.t_raw {
        return Err(Error::Format(format!(
            "payload {}: {rows} rows, expected {}",
            record.payload, record.t_raw
        )));
    }
    Array3::from_shape_vec((1, record.t_raw, record.c), values)
        .map_err(|e| Error::Format(format!("payload {}: {e}", record.payload)))
}

// --- synthetic generation ------------------------------------------------

/// One anomaly class: its share of abnormal videos, the per-channel mean
/// shift applied on abnormal snippets, and the Beta parameters its per-video
/// abnormality ratio is drawn from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub fraction: f64,
    pub shift: Vec<f64>,
    pub ratio_beta: (f64, f64),
}

/// Synthetic generator configuration. Normal snippets are Gaussian around
/// `normal_mean`; abnormal videos mark a Beta-distributed fraction of their
/// snippets and shift those snippets' means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    pub c: usize,
    #[serde(default = "default_crops")]
    pub crops: usize,
    pub normal_mean: Vec<f64>,
    pub normal_var: Vec<f64>,
    pub anomaly_shift: Vec<f64>,
    pub ratio_beta: (f64, f64),
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default)]
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

fn default_t() -> usize {
    200
}

fn default_crops() -> usize {
    1
}

fn default_segments() -> usize {
    1
}

impl SynthConfig {
    /// Cleanly separable benchmark: anomalies shift every channel by two
    /// standard deviations, per-video ratios around 0.2.
    pub fn separable(seed: u64) -> Self {
        let c = 16;
        SynthConfig {
            n_normal: 64,
            n_abnormal: 64,
            t: 50,
            c,
            crops: 1,
            normal_mean: vec![0.0; c],
            normal_var: vec![1.0; c],
            anomaly_shift: vec![2.0; c],
            ratio_beta: (2.0, 8.0),
            segments: 1,
            classes: Vec::new(),
            seed,
        }
    }

    /// Anomalies rotate the mean vector without changing its magnitude, under
    /// strongly anisotropic per-channel variances. Feature magnitude carries
    /// no signal here; only a variance-aware divergence separates the
    /// classes.
    pub fn direction_only(seed: u64) -> Self {
        let c = 16;
        // normal energy sits on channel 0; anomalies relocate it to channel 1,
        // which is nearly silent in normal data
        let mut normal_mean = vec![0.0; c];
        normal_mean[0] = 3.0;
        let mut var = vec![1.0; c];
        var[1] = 0.05;
        let mut shift = vec![0.0; c];
        shift[0] = -3.0;
        shift[1] = 3.0;
        SynthConfig {
            n_normal: 64,
            n_abnormal: 64,
            t: 50,
            c,
            crops: 1,
            normal_mean,
            normal_var: var,
            anomaly_shift: shift,
            ratio_beta: (2.0, 8.0),
            segments: 1,
            classes: Vec::new(),
            seed,
        }
    }

    /// Mixed abnormality ratios (uniform by default) with a rare anomaly
    /// class of low ratios and weak shifts alongside a frequent strong one.
    pub fn mixed_ratio(seed: u64) -> Self {
        let c = 16;
        SynthConfig {
            n_normal: 64,
            n_abnormal: 64,
            t: 50,
            c,
            crops: 1,
            normal_mean: vec![0.0; c],
            normal_var: vec![1.0; c],
            anomaly_shift: vec![2.0; c],
            ratio_beta: (1.0, 1.0),
            segments: 1,
            classes: vec![
                ClassSpec {
                    name: "frequent".into(),
                    fraction: 0.75,
                    shift: vec![2.0; c],
                    ratio_beta: (1.0, 1.0),
                },
                ClassSpec {
                    name: "rare".into(),
                    fraction: 0.25,
                    shift: vec![1.0; c],
                    ratio_beta: (1.5, 10.0),
                },
            ],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c == 0 || self.crops == 0 {
            return Err(Error::InvalidConfig("empty synthetic shape".into()));
        }
        for (name, v) in [
            ("normal_mean", &self.normal_mean),
            ("normal_var", &self.normal_var),
            ("anomaly_shift", &self.anomaly_shift),
        ] {
            if v.len() != self.c {
                return Err(Error::InvalidConfig(format!(
                    "{name} has {} entries for {} channels",
                    v.len(),
                    self.c
                )));
            }
        }
        if self.normal_var.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig("negative variance".into()));
        }
        check_beta(self.ratio_beta)?;
        if self.segments == 0 {
            return Err(Error::InvalidConfig("segments must be >= 1".into()));
        }
        let mut total = 0.0;
        for class in &self.classes {
            check_beta(class.ratio_beta)?;
            if class.shift.len() != self.c {
                return Err(Error::InvalidConfig(format!(
                    "class {} shift has {} entries for {} channels",
                    class.name,
                    class.shift.len(),
                    self.c
                )));
            }
            if class.fraction <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "class {} has non-positive fraction",
                    class.name
                )));
            }
            total += class.fraction;
        }
        if !self.classes.is_empty() && (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "class fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

fn check_beta((a, b): (f64, f64)) -> Result<()> {
    if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid Beta({a}, {b})")))
    }
}

/// Mark `n_abn` snippets out of `t` as abnormal, split into `segments`
/// contiguous runs at seeded-random starts.
fn place_segments(t: usize, n_abn: usize, segments: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask = vec![false; t];
    let segments = segments.min(n_abn.max(1));
    let base = n_abn / segments;
    let extra = n_abn % segments;
    let lengths: Vec<usize> = (0..segments)
        .map(|s| base + usize::from(s < extra))
        .filter(|&len| len > 0)
        .collect();
    for len in lengths {
        // retry a few random starts, then fall back to the first free run
        let mut placed = false;
        for _ in 0..64 {
            let start = rng.random_range(0..=t - len);
            if mask[start..start + len].iter().all(|&m| !m) {
                mask[start..start + len].iter_mut().for_each(|m| *m = true);
                placed = true;
                break;
            }
        }
        if !placed {
            let mut run = 0;
            for i in 0..t {
                run = if mask[i] { 0 } else { run + 1 };
                if run == len {
                    mask[i + 1 - len..=i].iter_mut().for_each(|m| *m = true);
                    break;
                }
            }
        }
    }
    if n_abn > 0 && mask.iter().all(|&m| !m) {
        mask[0] = true;
    }
    mask
}

/// Seed-deterministic synthetic dataset with recorded snippet labels.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_dev: Vec<f64> = cfg.normal_var.iter().map(|&v| v.sqrt()).collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let mut videos = Vec::with_capacity(cfg.n_normal + cfg.n_abnormal);
    for i in 0..cfg.n_normal {
        let mut features = Array3::<f32>::zeros((cfg.crops, cfg.t, cfg.c));
        for crop in features.axis_iter_mut(Axis(0)) {
            fill_gaussian(crop, &cfg.normal_mean, &std_dev, None, &gauss, &mut rng);
        }
        videos.push(Video {
            record: VideoRecord {
                id: format!("normal_{i:04}"),
                label: Label::Normal,
                class_name: None,
                crops: cfg.crops,
                t_raw: cfg.t,
                c: cfg.c,
                snippet_labels: Some(vec![false; cfg.t]),
                payload: format!("normal_{i:04}.bin"),
            },
            features,
        });
    }

    for i in 0..cfg.n_abnormal {
        let (class_name, shift, ratio_beta) = if cfg.classes.is_empty() {
            (None, cfg.anomaly_shift.clone(), cfg.ratio_beta)
        } else {
            let pick: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = cfg.classes.last().expect("non-empty");
            for class in &cfg.classes {
                acc += class.fraction;
                if pick < acc {
                    chosen = class;
                    break;
                }
            }
            (
                Some(chosen.name.clone()),
                chosen.shift.clone(),
                chosen.ratio_beta,
            )
        };
        let beta = Beta::new(ratio_beta.0, ratio_beta.1)
            .map_err(|e| Error::InvalidConfig(format!("beta: {e}")))?;
        let ratio: f64 = beta.sample(&mut rng);
        let n_abn = ((ratio * cfg.t as f64).round() as usize).clamp(1, cfg.t);
        let snippet_mask = place_segments(cfg.t, n_abn, cfg.segments, &mut rng);

        let mut features = Array3::<f32>::zeros((cfg.crops, cfg.t, cfg.c));
        for crop in features.axis_iter_mut(Axis(0)) {
            fill_gaussian(
                crop,
                &cfg.normal_mean,
                &std_dev,
                Some((&snippet_mask, &shift)),
                &gauss,
                &mut rng,
            );
        }
        videos.push(Video {
            record: VideoRecord {
                id: format!("abnormal_{i:04}"),
                label: Label::Abnormal,
                class_name,
                crops: cfg.crops,
                t_raw: cfg.t,
                c: cfg.c,
                snippet_labels: Some(snippet_mask),
                payload: format!("abnormal_{i:04}.bin"),
            },
            features,
        });
    }

    Ok(Dataset { videos })
}

fn fill_gaussian(
    mut crop: ndarray::ArrayViewMut2<'_, f32>,
    mean: &[f64],
    std_dev: &[f64],
    anomaly: Option<(&[bool], &[f64])>,
    gauss: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    let (t, c) = crop.dim();
    for ti in 0..t {
        let shifted = anomaly.map(|(mask, _)| mask[ti]).unwrap_or(false);
        for ci in 0..c {
            let mut value = mean[ci] + std_dev[ci] * gauss.sample(rng);
            if shifted {
                value += anomaly.expect("checked").1[ci];
            }
            crop[[ti, ci]] = value as f32;
        }
    }
}

// --- interpolation and batching ------------------------------------------

/// Per-channel linear interpolation from `t0` to `t` snippets on the uniform
/// grid. Identity when the lengths already match.
pub fn interpolate(x: ArrayView2<'_, f32>, t: usize) -> Result<Array2<f32>> {
    let (t0, c) = x.dim();
    if t0 == 0 {
        return Err(Error::EmptyBatch);
    }
    if t == 0 {
        return Err(Error::InvalidConfig("interpolation to zero length".into()));
    }
    if t0 == t {
        return Ok(x.to_owned());
    }
    let mut out = Array2::<f32>::zeros((t, c));
    for ti in 0..t {
        let pos = if t == 1 {
            0.0
        } else {
            ti as f64 * (t0 - 1) as f64 / (t - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = (pos - lo as f64) as f32;
        for ci in 0..c {
            out[[ti, ci]] = x[[lo, ci]] * (1.0 - frac) + x[[hi, ci]] * frac;
        }
    }
    Ok(out)
}

/// Mean over the crop axis of per-crop score vectors `[crops, t]`.
pub fn crop_average(scores: ArrayView2<'_, f64>) -> Result<ndarray::Array1<f64>> {
    if scores.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(scores.mean_axis(Axis(0)).expect("non-empty"))
}

/// One balanced mini-batch in double precision, normal half first.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_nor: Array3<f64>,
    pub x_abn: Array3<f64>,
    pub nor_videos: Vec<usize>,
    pub abn_videos: Vec<usize>,
}

/// Epoch-wise balanced sampler: uniform without replacement within an epoch,
/// reshuffling each list when it runs out.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    normal_order: Vec<usize>,
    abnormal_order: Vec<usize>,
    pos_normal: usize,
    pos_abnormal: usize,
}

impl BalancedSampler {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let normal = ds.normal_indices();
        let abnormal = ds.abnormal_indices();
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::InvalidConfig(
                "dataset needs both normal and abnormal videos".into(),
            ));
        }
        Ok(BalancedSampler {
            normal_order: normal,
            abnormal_order: abnormal,
            pos_normal: 0,
            pos_abnormal: 0,
        })
    }

    fn draw(
        order: &mut [usize],
        pos: &mut usize,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        if n > order.len() {
            return Err(Error::InvalidConfig(format!(
                "batch of {n} from {} videos",
                order.len()
            )));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if *pos == 0 {
                order.shuffle(rng);
            }
            let take = (n - out.len()).min(order.len() - *pos);
            out.extend_from_slice(&order[*pos..*pos + take]);
            *pos = (*pos + take) % order.len();
        }
        Ok(out)
    }

    /// Draw `b_nor` normal and `b_abn` abnormal videos and assemble their
    /// features, optionally interpolated to a fixed snippet count. Multi-crop
    /// videos contribute one seeded-random crop per draw.
    pub fn sample_batch(
        &mut self,
        ds: &Dataset,
        b_nor: usize,
        b_abn: usize,
        t: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Batch> {
        let nor_videos = Self::draw(&mut self.normal_order, &mut self.pos_normal, b_nor, rng)?;
        let abn_videos =
            Self::draw(&mut self.abnormal_order, &mut self.pos_abnormal, b_abn, rng)?;
        let x_nor = gather(ds, &nor_videos, t, rng)?;
        let x_abn = gather(ds, &abn_videos, t, rng)?;
        Ok(Batch {
            x_nor,
            x_abn,
            nor_videos,
            abn_videos,
        })
    }
}

/// One-shot balanced draw; see [`BalancedSampler::sample_batch`].
pub fn sample_batch(
    ds: &Dataset,
    b_nor: usize,
    b_abn: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    BalancedSampler::new(ds)?.sample_batch(ds, b_nor, b_abn, None, rng)
}

fn gather(
    ds: &Dataset,
    indices: &[usize],
    t: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f64>> {
    let c = ds.channels()?;
    let t_target = match t {
        Some(t) => t,
        None => {
            let t0 = ds.videos[indices[0]].record.t_raw;
            if indices.iter().any(|&i| ds.videos[i].record.t_raw != t0) {
                return Err(Error::InvalidConfig(
                    "varying snippet counts; set a fixed training length".into(),
                ));
            }
            t0
        }
    };
    let mut out = Array3::<f64>::zeros((indices.len(), t_target, c));
    for (row, &vi) in indices.iter().enumerate() {
        let video = &ds.videos[vi];
        let crop = if video.record.crops > 1 {
            rng.random_range(0..video.record.crops)
        } else {
            0
        };
        let slice = video.features.index_axis(Axis(0), crop);
        let features = interpolate(slice, t_target)?;
        for ti in 0..t_target {
            for ci in 0..c {
                out[[row, ti, ci]] = f64::from(features[[ti, ci]]);
            }
        }
    }
    Ok(out)
}
