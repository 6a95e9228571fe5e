//! Training orchestration: one step runs the train-mode forward, folds the
//! batch statistics into the running statistics, scores every snippet's
//! divergence, selects abnormal and matched normal snippets, assembles the
//! losses, and applies one optimizer update. Selection masks and running
//! statistics are constants within a step.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_average, BalancedSampler, Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    abnormal_loss, mpp_loss, normal_loss, total_loss, LossWeights, MppConfig, BCE_CLAMP,
};
use crate::metrics::{report, MetricReport, VideoScores};
use crate::model::{
    anomaly_score, backward, forward_eval, forward_train, init_params, ClassifierInput, Enhancer,
    ModelConfig, ModelParams, Normalization,
};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::selection::{select_normal_matched, select_sbs, SelectionRatios};
use crate::stats::{dfm_batch, DfmMetric, RunningStats};

/// Whether divergence-based selection sees the running statistics from before
/// or after this step's update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsOrder {
    Pre,
    Post,
}

/// Which layer's divergence grid drives snippet selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLayer {
    Sum,
    Hidden1,
    Hidden2,
}

/// Full training configuration; every field has a default so JSON configs can
/// override selectively.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub b_nor: usize,
    pub b_abn: usize,
    /// Fixed training snippet count; `None` requires uniform raw lengths.
    pub t: Option<usize>,
    pub rho_s: f64,
    pub rho_b: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub hinge: bool,
    pub metric: DfmMetric,
    pub momentum: f64,
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub h1: usize,
    pub h2: usize,
    /// Enhancer output width; `None` keeps the input width.
    pub c_e: Option<usize>,
    pub enhancer: Enhancer,
    pub normalization: Normalization,
    pub classifier_input: ClassifierInput,
    pub dfm_stats: StatsOrder,
    pub selection_layer: SelectionLayer,
    pub use_sls: bool,
    pub use_bls: bool,
    pub use_abn_loss: bool,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            b_nor: 64,
            b_abn: 64,
            t: None,
            rho_s: 0.1,
            rho_b: 0.2,
            lambda1: 5.0,
            lambda2: 20.0,
            margin: 1.0,
            hinge: true,
            metric: DfmMetric::Mahalanobis,
            momentum: 0.1,
            eps: 1e-5,
            lr: 1e-4,
            weight_decay: 5e-5,
            h1: 32,
            h2: 16,
            c_e: None,
            enhancer: Enhancer::Identity,
            normalization: Normalization::BatchNorm,
            classifier_input: ClassifierInput::Hidden2,
            dfm_stats: StatsOrder::Post,
            selection_layer: SelectionLayer::Sum,
            use_sls: true,
            use_bls: true,
            use_abn_loss: false,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults sized for the synthetic benchmarks.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            iterations: 500,
            b_nor: 8,
            b_abn: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self, c_in: usize) -> ModelConfig {
        ModelConfig {
            c_in,
            c_e: self.c_e.unwrap_or(c_in),
            h1: self.h1,
            h2: self.h2,
            enhancer: self.enhancer,
            normalization: self.normalization,
            classifier_input: self.classifier_input,
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    fn mpp_config(&self) -> MppConfig {
        MppConfig {
            margin: self.margin,
            hinge: self.hinge,
            metric: self.metric,
        }
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    fn ratios(&self) -> Result<SelectionRatios> {
        SelectionRatios::new(
            if self.use_sls { self.rho_s } else { 0.0 },
            if self.use_bls { self.rho_b } else { 0.0 },
        )
    }
}

/// Everything a training step records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub total: f64,
    pub l_nor: f64,
    pub l_mpp1: f64,
    pub l_mpp2: f64,
    pub l_abn: Option<f64>,
    pub selected_k: usize,
    pub mean_dfm_abn: f64,
    pub mean_dfm_nor: f64,
}

pub type TrainingCurve = Vec<StepLog>;

/// Mutable training state owned by `fit`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub iter: usize,
}

impl TrainState {
    pub fn new(cfg: TrainConfig, c_in: usize) -> Result<Self> {
        let params = init_params(&cfg.model_config(c_in), cfg.seed)?;
        let adam = AdamState::new(&params.block_sizes());
        Ok(TrainState {
            cfg,
            params,
            adam,
            iter: 0,
        })
    }
}

/// Constants of one step, pinned so an independent objective evaluation can
/// differentiate against exactly what the step treated as fixed: the running
/// statistics the losses saw and the rank-paired snippet selection.
#[derive(Debug, Clone)]
pub struct StepPin {
    pub rs1: RunningStats,
    pub rs2: RunningStats,
    /// (normal cell, abnormal cell) per pair, absolute batch coordinates.
    pub pairs1: Vec<((usize, usize), (usize, usize))>,
    pub pairs2: Vec<((usize, usize), (usize, usize))>,
    pub abn_cells: Vec<(usize, usize)>,
}

/// Losses, upstream gradients, and bookkeeping from the forward half of a
/// step, before any parameter update.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub cache: crate::model::ForwardCache,
    pub total: f64,
    pub l_nor: f64,
    pub l_mpp1: f64,
    pub l_mpp2: f64,
    pub l_abn: Option<f64>,
    pub selected_k: usize,
    pub mean_dfm_abn: f64,
    pub mean_dfm_nor: f64,
    pub d_preds: Array2<f64>,
    pub d_h1: Array3<f64>,
    pub d_h2: Array3<f64>,
    pub pin: StepPin,
}

fn rank_cells_desc(grid: &Array2<f64>, cells: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut order = cells.to_vec();
    order.sort_by(|&a, &b| {
        grid[[b.0, b.1]]
            .partial_cmp(&grid[[a.0, a.1]])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order
}

fn gather_cells(h: &Array3<f64>, cells: &[(usize, usize)]) -> Array2<f64> {
    let c = h.dim().2;
    Array2::from_shape_fn((cells.len(), c), |(i, ci)| h[[cells[i].0, cells[i].1, ci]])
}

/// Forward pass plus loss assembly on one batch. Mutates only the running
/// statistics (through the train-mode forward).
pub fn step_objective(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<StepEval> {
    let b_nor = batch.x_nor.dim().0;
    let b_abn = batch.x_abn.dim().0;
    if b_nor == 0 || b_abn == 0 {
        return Err(Error::EmptyBatch);
    }
    let x = concatenate(Axis(0), &[batch.x_nor.view(), batch.x_abn.view()]).map_err(|_| {
        Error::DimensionMismatch {
            expected: batch.x_nor.dim().2,
            got: batch.x_abn.dim().2,
        }
    })?;
    let (rs1_pre, rs2_pre) = (params.bn1.rs.clone(), params.bn2.rs.clone());
    let cache = forward_train(x.view(), params)?;
    let (rs1, rs2) = match cfg.dfm_stats {
        StatsOrder::Post => (params.bn1.rs.clone(), params.bn2.rs.clone()),
        StatsOrder::Pre => (rs1_pre, rs2_pre),
    };

    let d1 = dfm_batch(cache.h1.view(), &rs1, cfg.metric)?;
    let d2 = dfm_batch(cache.h2.view(), &rs2, cfg.metric)?;
    let sel_grid = match cfg.selection_layer {
        SelectionLayer::Sum => &d1 + &d2,
        SelectionLayer::Hidden1 => d1.clone(),
        SelectionLayer::Hidden2 => d2.clone(),
    };
    let abn_grid = sel_grid.slice(s![b_nor.., ..]).to_owned();
    let nor_grid = sel_grid.slice(s![..b_nor, ..]).to_owned();

    let abn_mask = select_sbs(abn_grid.view(), &cfg.ratios()?)?;
    let k = abn_mask.count;
    if k == 0 {
        return Err(Error::EmptySelection);
    }
    let nor_mask = select_normal_matched(nor_grid.view(), k)?;

    // absolute batch coordinates
    let abn_cells: Vec<(usize, usize)> = abn_mask
        .indices()
        .into_iter()
        .map(|(bi, ti)| (bi + b_nor, ti))
        .collect();
    let nor_cells = nor_mask.indices();

    // rank-pair per layer by that layer's divergence
    let weights = cfg.loss_weights();
    let mpp_cfg = cfg.mpp_config();
    let mut d_h1 = Array3::<f64>::zeros(cache.h1.dim());
    let mut d_h2 = Array3::<f64>::zeros(cache.h2.dim());
    let mut layer_pairs: Vec<Vec<((usize, usize), (usize, usize))>> = Vec::with_capacity(2);
    let mut mpp_values = Vec::with_capacity(2);
    {
        let layers: [(&Array2<f64>, &Array3<f64>, &mut Array3<f64>, &RunningStats, f64); 2] = [
            (&d1, &cache.h1, &mut d_h1, &rs1, weights.lambda1),
            (&d2, &cache.h2, &mut d_h2, &rs2, weights.lambda2),
        ];
        for (grid, h, d_h, rs, lambda) in layers {
            let nor_order = rank_cells_desc(grid, &nor_cells);
            let abn_order = rank_cells_desc(grid, &abn_cells);
            let x_nor = gather_cells(h, &nor_order);
            let x_abn = gather_cells(h, &abn_order);
            let mpp = mpp_loss(x_nor.view(), x_abn.view(), rs, &mpp_cfg)?;
            for (row, &(bi, ti)) in nor_order.iter().enumerate() {
                for ci in 0..h.dim().2 {
                    d_h[[bi, ti, ci]] += lambda * mpp.d_normal[[row, ci]];
                }
            }
            for (row, &(bi, ti)) in abn_order.iter().enumerate() {
                for ci in 0..h.dim().2 {
                    d_h[[bi, ti, ci]] += lambda * mpp.d_abnormal[[row, ci]];
                }
            }
            layer_pairs.push(
                nor_order
                    .iter()
                    .copied()
                    .zip(abn_order.iter().copied())
                    .collect(),
            );
            mpp_values.push(mpp.value);
        }
    }
    let pairs2 = layer_pairs.pop().expect("two layers");
    let pairs1 = layer_pairs.pop().expect("two layers");
    let (l_mpp1, l_mpp2) = (mpp_values[0], mpp_values[1]);

    let preds_nor = cache.preds.slice(s![..b_nor, ..]).to_owned();
    let nor = normal_loss(preds_nor.view())?;
    let mut d_preds = Array2::<f64>::zeros(cache.preds.dim());
    d_preds.slice_mut(s![..b_nor, ..]).assign(&nor.d_preds);

    let mut total = total_loss(nor.value, l_mpp1, l_mpp2, &weights);
    let mut l_abn = None;
    if cfg.use_abn_loss {
        let clamped: ndarray::Array1<f64> = abn_cells
            .iter()
            .map(|&(bi, ti)| cache.preds[[bi, ti]].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
            .collect();
        let abn = abnormal_loss(clamped.view())?;
        for (i, &(bi, ti)) in abn_cells.iter().enumerate() {
            d_preds[[bi, ti]] += abn.d_preds[i];
        }
        total += abn.value;
        l_abn = Some(abn.value);
    }

    let mean_dfm_abn = abn_grid.mean().unwrap_or(0.0);
    let mean_dfm_nor = nor_grid.mean().unwrap_or(0.0);

    Ok(StepEval {
        cache,
        total,
        l_nor: nor.value,
        l_mpp1,
        l_mpp2,
        l_abn,
        selected_k: k,
        mean_dfm_abn,
        mean_dfm_nor,
        d_preds,
        d_h1,
        d_h2,
        pin: StepPin {
            rs1,
            rs2,
            pairs1,
            pairs2,
            abn_cells,
        },
    })
}

/// Re-evaluate the step objective with the selection and running statistics
/// pinned to a previous step's constants. This is the function of the
/// parameters that `backward` differentiates; gradient checks difference it.
pub fn step_loss_pinned(
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &Batch,
    pin: &StepPin,
) -> Result<f64> {
    let b_nor = batch.x_nor.dim().0;
    let x = concatenate(Axis(0), &[batch.x_nor.view(), batch.x_abn.view()])
        .expect("matching channel counts");
    let mut probe = params.clone();
    let cache = forward_train(x.view(), &mut probe)?;
    let weights = cfg.loss_weights();
    let mpp_cfg = cfg.mpp_config();

    let mut values = [0.0; 2];
    for (i, (h, rs, pairs)) in [
        (&cache.h1, &pin.rs1, &pin.pairs1),
        (&cache.h2, &pin.rs2, &pin.pairs2),
    ]
    .into_iter()
    .enumerate()
    {
        let nor_cells: Vec<(usize, usize)> = pairs.iter().map(|p| p.0).collect();
        let abn_cells: Vec<(usize, usize)> = pairs.iter().map(|p| p.1).collect();
        let x_nor = gather_cells(h, &nor_cells);
        let x_abn = gather_cells(h, &abn_cells);
        values[i] = mpp_loss(x_nor.view(), x_abn.view(), rs, &mpp_cfg)?.value;
    }

    let preds_nor = cache.preds.slice(s![..b_nor, ..]).to_owned();
    let nor = normal_loss(preds_nor.view())?;
    let mut total = total_loss(nor.value, values[0], values[1], &weights);
    if cfg.use_abn_loss {
        let clamped: ndarray::Array1<f64> = pin
            .abn_cells
            .iter()
            .map(|&(bi, ti)| cache.preds[[bi, ti]].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
            .collect();
        total += abnormal_loss(clamped.view())?.value;
    }
    Ok(total)
}

/// One full training step: objective, backward, optimizer update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepLog> {
    let cfg = state.cfg.clone();
    let eval = step_objective(&mut state.params, &cfg, batch)?;
    let grads = backward(
        &eval.cache,
        &state.params,
        eval.d_preds.view(),
        eval.d_h1.view(),
        eval.d_h2.view(),
    )?;
    let grad_blocks = grads.blocks();
    let mut param_blocks = state.params.param_blocks_mut();
    adam_step(&mut param_blocks, &grad_blocks, &mut state.adam, &cfg.hyper())?;
    state.iter += 1;
    Ok(StepLog {
        iteration: state.iter,
        total: eval.total,
        l_nor: eval.l_nor,
        l_mpp1: eval.l_mpp1,
        l_mpp2: eval.l_mpp2,
        l_abn: eval.l_abn,
        selected_k: eval.selected_k,
        mean_dfm_abn: eval.mean_dfm_abn,
        mean_dfm_nor: eval.mean_dfm_nor,
    })
}

/// Outcome of a full training run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub adam: AdamState,
    pub curve: TrainingCurve,
}

/// Run the configured number of steps over reshuffled balanced batches,
/// optionally writing periodic checkpoints into `checkpoint_dir`.
pub fn fit(cfg: &TrainConfig, ds: &Dataset, checkpoint_dir: Option<&Path>) -> Result<FitResult> {
    if cfg.iterations == 0 {
        return Err(Error::InvalidConfig("iterations must be >= 1".into()));
    }
    cfg.ratios()?;
    let c_in = ds.channels()?;
    let mut state = TrainState::new(cfg.clone(), c_in)?;
    let mut sampler = BalancedSampler::new(ds)?;
    // batch stream independent of the init draw
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = sampler.sample_batch(ds, cfg.b_nor, cfg.b_abn, cfg.t, &mut rng)?;
        let log = train_step(&mut state, &batch)?;
        curve.push(log);
        if let (Some(dir), Some(every)) = (checkpoint_dir, cfg.checkpoint_every) {
            if every > 0 && (it + 1) % every == 0 {
                std::fs::create_dir_all(dir)?;
                crate::model::save_checkpoint(
                    &dir.join(format!("ckpt_{:06}.bin", it + 1)),
                    &state.params,
                    Some(&state.adam),
                )?;
            }
        }
    }
    Ok(FitResult {
        params: state.params,
        adam: state.adam,
        curve,
    })
}

/// Per-snippet scoring output, crop-aggregated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnippetScore {
    pub video_id: String,
    pub snippet_index: usize,
    pub pred: f64,
    pub dfm1: f64,
    pub dfm2: f64,
    pub score: f64,
}

/// Eval-mode scores for every snippet of every video. The fused score is the
/// mean over crops of the per-crop fused grid; `pred`/`dfm1`/`dfm2` expose
/// the crop-mean factors for debugging.
pub fn score_dataset(
    params: &ModelParams,
    ds: &Dataset,
    metric: DfmMetric,
) -> Result<Vec<SnippetScore>> {
    let mut out = Vec::new();
    for video in &ds.videos {
        let t = video.record.t_raw;
        let crops = video.record.crops;
        let mut fused = Array2::<f64>::zeros((crops, t));
        let mut pred = Array2::<f64>::zeros((crops, t));
        let mut dfm1 = Array2::<f64>::zeros((crops, t));
        let mut dfm2 = Array2::<f64>::zeros((crops, t));
        for crop in 0..crops {
            let features = video
                .features
                .index_axis(Axis(0), crop)
                .mapv(f64::from)
                .insert_axis(Axis(0));
            let cache = forward_eval(features.view(), params)?;
            let score = anomaly_score(&cache, params, metric)?;
            let d1 = dfm_batch(cache.h1.view(), &params.bn1.rs, metric)?;
            let d2 = dfm_batch(cache.h2.view(), &params.bn2.rs, metric)?;
            for ti in 0..t {
                fused[[crop, ti]] = score[[0, ti]];
                pred[[crop, ti]] = cache.preds[[0, ti]];
                dfm1[[crop, ti]] = d1[[0, ti]];
                dfm2[[crop, ti]] = d2[[0, ti]];
            }
        }
        let fused = crop_average(fused.view())?;
        let pred = crop_average(pred.view())?;
        let dfm1 = crop_average(dfm1.view())?;
        let dfm2 = crop_average(dfm2.view())?;
        for ti in 0..t {
            out.push(SnippetScore {
                video_id: video.record.id.clone(),
                snippet_index: ti,
                pred: pred[ti],
                dfm1: dfm1[ti],
                dfm2: dfm2[ti],
                score: fused[ti],
            });
        }
    }
    Ok(out)
}

/// Group per-snippet scores by video and attach ground truth from the
/// dataset.
pub fn scores_to_video_scores(ds: &Dataset, scores: &[SnippetScore]) -> Result<Vec<VideoScores>> {
    let mut by_video: std::collections::HashMap<&str, Vec<&SnippetScore>> =
        std::collections::HashMap::new();
    for s in scores {
        by_video.entry(s.video_id.as_str()).or_default().push(s);
    }
    let mut out = Vec::with_capacity(ds.len());
    for video in &ds.videos {
        let labels = video
            .record
            .snippet_labels
            .clone()
            .ok_or(Error::MissingSnippetLabels)?;
        let mut values = vec![f64::NAN; video.record.t_raw];
        for s in by_video.get(video.record.id.as_str()).into_iter().flatten() {
            if s.snippet_index >= values.len() {
                return Err(Error::Format(format!(
                    "score for {} snippet {} out of range",
                    s.video_id, s.snippet_index
                )));
            }
            values[s.snippet_index] = s.score;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format(format!(
                "missing scores for video {}",
                video.record.id
            )));
        }
        out.push(VideoScores {
            video_id: video.record.id.clone(),
            label: video.record.label,
            class_name: video.record.class_name.clone(),
            scores: values,
            snippet_labels: labels,
        });
    }
    Ok(out)
}

/// Score the dataset and compute the metric report.
pub fn evaluate(
    params: &ModelParams,
    ds: &Dataset,
    metric: DfmMetric,
    frames_per_snippet: usize,
) -> Result<MetricReport> {
    if !ds.has_snippet_labels() {
        return Err(Error::MissingSnippetLabels);
    }
    let scores = score_dataset(params, ds, metric)?;
    let videos = scores_to_video_scores(ds, &scores)?;
    report(&videos, frames_per_snippet)
}

/// Training-curve CSV: one row per iteration.
pub fn write_curve(path: &Path, curve: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iteration",
        "L",
        "L_nor",
        "L_mpp1",
        "L_mpp2",
        "selected_K",
        "mean_DFM_abn",
        "mean_DFM_nor",
    ])?;
    for log in curve {
        w.write_record([
            log.iteration.to_string(),
            log.total.to_string(),
            log.l_nor.to_string(),
            log.l_mpp1.to_string(),
            log.l_mpp2.to_string(),
            log.selected_k.to_string(),
            log.mean_dfm_abn.to_string(),
            log.mean_dfm_nor.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, sample_batch, SynthConfig};

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_synthetic(&SynthConfig {
            n_normal: 4,
            n_abnormal: 4,
            t: 4,
            c: 6,
            normal_mean: vec![0.0; 6],
            normal_var: vec![1.0; 6],
            anomaly_shift: vec![2.0; 6],
            ..SynthConfig::separable(seed)
        })
        .unwrap()
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: 1,
            b_nor: 2,
            b_abn: 2,
            h1: 4,
            h2: 3,
            rho_s: 0.3,
            rho_b: 0.3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn saturated_classifier_with_zero_weights_is_fixed_point() {
        let ds = tiny_dataset(0);
        let mut cfg = tiny_config(0);
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        cfg.weight_decay = 0.0;
        let mut state = TrainState::new(cfg, 6).unwrap();
        // drive every prediction into the clamp so the classifier path is flat
        state.params.clf.b[0] = -60.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, 2, 2, &mut rng).unwrap();
        let before = state.params.clone();
        let log = train_step(&mut state, &batch).unwrap();
        assert!(log.l_nor < 1e-10);
        // learnable blocks bit-identical; running statistics did move
        let before_blocks: Vec<Vec<f64>> = {
            let mut b = before.clone();
            b.param_blocks_mut().iter().map(|s| s.to_vec()).collect()
        };
        let after_blocks: Vec<Vec<f64>> = state
            .params
            .param_blocks_mut()
            .iter()
            .map(|s| s.to_vec())
            .collect();
        assert_eq!(before_blocks, after_blocks);
        assert_ne!(before.bn1.rs.mean, state.params.bn1.rs.mean);
    }

    #[test]
    fn fit_one_iteration_equals_one_step() {
        let ds = tiny_dataset(1);
        let cfg = tiny_config(7);
        let result = fit(&cfg, &ds, None).unwrap();
        assert_eq!(result.curve.len(), 1);

        let mut state = TrainState::new(cfg.clone(), 6).unwrap();
        let mut sampler = BalancedSampler::new(&ds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
        let batch = sampler
            .sample_batch(&ds, cfg.b_nor, cfg.b_abn, cfg.t, &mut rng)
            .unwrap();
        let log = train_step(&mut state, &batch).unwrap();
        assert_eq!(state.params, result.params);
        assert_eq!(log.total, result.curve[0].total);
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let ds = tiny_dataset(2);
        let mut cfg = tiny_config(3);
        cfg.iterations = 5;
        let a = fit(&cfg, &ds, None).unwrap();
        let b = fit(&cfg, &ds, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam, b.adam);
        for (x, y) in a.curve.iter().zip(b.curve.iter()) {
            assert_eq!(x.total, y.total);
        }
    }

    #[test]
    fn one_step_descends_on_the_same_batch() {
        // the step's own objective (statistics and selection held at the
        // step's constants) must go down after the update
        let mut decreased = 0;
        for seed in 0..50 {
            let ds = tiny_dataset(100 + seed);
            let cfg = tiny_config(seed);
            let mut state = TrainState::new(cfg.clone(), 6).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = sample_batch(&ds, 2, 2, &mut rng).unwrap();
            let eval = step_objective(&mut state.params.clone(), &cfg, &batch).unwrap();
            train_step(&mut state, &batch).unwrap();
            let after = step_loss_pinned(&state.params, &cfg, &batch, &eval.pin).unwrap();
            if after < eval.total {
                decreased += 1;
            }
        }
        assert!(decreased >= 45, "only {decreased}/50 seeds decreased");
    }

    #[test]
    fn full_step_gradient_matches_finite_differences() {
        // B = 2+2, T = 4, C = 6, hidden 4/3
        let ds = tiny_dataset(5);
        let cfg = tiny_config(11);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = sample_batch(&ds, 2, 2, &mut rng).unwrap();
        let params0 = TrainState::new(cfg.clone(), 6).unwrap().params;

        let mut work = params0.clone();
        let eval = step_objective(&mut work, &cfg, &batch).unwrap();
        let grads = backward(
            &eval.cache,
            &params0,
            eval.d_preds.view(),
            eval.d_h1.view(),
            eval.d_h2.view(),
        )
        .unwrap();

        let analytic: Vec<f64> = grads
            .blocks()
            .iter()
            .flat_map(|b| b.iter().copied())
            .collect();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(analytic.len());
        let mut probe = params0.clone();
        let n_blocks = probe.param_blocks_mut().len();
        for bi in 0..n_blocks {
            let len = probe.param_blocks_mut()[bi].len();
            for i in 0..len {
                let orig = probe.param_blocks_mut()[bi][i];
                probe.param_blocks_mut()[bi][i] = orig + h;
                let up = step_loss_pinned(&probe, &cfg, &batch, &eval.pin).unwrap();
                probe.param_blocks_mut()[bi][i] = orig - h;
                let down = step_loss_pinned(&probe, &cfg, &batch, &eval.pin).unwrap();
                probe.param_blocks_mut()[bi][i] = orig;
                fd.push((up - down) / (2.0 * h));
            }
        }
        for (a, f) in analytic.iter().zip(fd.iter()) {
            let tol = 1e-6f64.max(1e-3 * f.abs().max(a.abs()));
            assert!((a - f).abs() <= tol, "analytic {a} vs fd {f}");
        }
    }

    #[test]
    fn selection_counts_obey_sbs_bounds() {
        let ds = tiny_dataset(8);
        let cfg = TrainConfig {
            iterations: 6,
            ..tiny_config(8)
        };
        let result = fit(&cfg, &ds, None).unwrap();
        let t = 4;
        let k_s = ((cfg.rho_s * t as f64).ceil() as usize).max(1);
        let k_b = ((cfg.rho_b * (cfg.b_abn * t) as f64).ceil() as usize).max(1);
        for log in &result.curve {
            assert!(log.selected_k >= (k_s * cfg.b_abn).max(k_b));
            assert!(log.selected_k <= k_s * cfg.b_abn + k_b);
        }
    }

    #[test]
    fn evaluate_requires_labels() {
        let mut ds = tiny_dataset(9);
        for v in &mut ds.videos {
            v.record.snippet_labels = None;
        }
        let cfg = tiny_config(9);
        let state = TrainState::new(cfg, 6).unwrap();
        assert!(matches!(
            evaluate(&state.params, &ds, DfmMetric::Mahalanobis, 1),
            Err(Error::MissingSnippetLabels)
        ));
    }

    #[test]
    fn score_dataset_covers_every_snippet() {
        let ds = tiny_dataset(10);
        let state = TrainState::new(tiny_config(10), 6).unwrap();
        let scores = score_dataset(&state.params, &ds, DfmMetric::Mahalanobis).unwrap();
        assert_eq!(scores.len(), ds.len() * 4);
        for s in &scores {
            assert!(s.score.is_finite() && s.score >= 0.0);
            assert!((0.0..=1.0).contains(&s.pred));
        }
    }
}
