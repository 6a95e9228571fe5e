//! Per-snippet scoring network.
//!
//! Two 1x1 projection layers (per-snippet linear maps), each followed by
//! batch normalization and a rectifier, then a sigmoid classifier head.
//! An optional linear enhancer sits in front. Train-mode forward normalizes
//! with current batch statistics and folds them into the running statistics;
//! eval-mode forward normalizes with the running statistics only.
//!
//! The backward pass is exact: it propagates through the batch mean and
//! variance and accepts extra upstream gradients injected at the pre-norm
//! hidden features (the pull-push loss path). Running statistics never
//! receive gradients.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::stats::{batch_stats, dfm_batch, ema_update, BatchStats, DfmMetric, RunningStats};
use crate::tensor::{ensure_finite2, ensure_finite3, ScoreGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enhancer {
    Identity,
    Linear,
    LinearResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    BatchNorm,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    Hidden2,
    Hidden1,
}

/// Shape and wiring of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub c_in: usize,
    pub c_e: usize,
    pub h1: usize,
    pub h2: usize,
    pub enhancer: Enhancer,
    pub normalization: Normalization,
    pub classifier_input: ClassifierInput,
    pub momentum: f64,
    pub eps: f64,
}

impl ModelConfig {
    pub fn new(c_in: usize) -> Self {
        ModelConfig {
            c_in,
            c_e: c_in,
            h1: 32,
            h2: 16,
            enhancer: Enhancer::Identity,
            normalization: Normalization::BatchNorm,
            classifier_input: ClassifierInput::Hidden2,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_e == 0 || self.h1 == 0 || self.h2 == 0 {
            return Err(Error::InvalidConfig("zero layer dimension".into()));
        }
        if self.enhancer == Enhancer::Identity && self.c_e != self.c_in {
            return Err(Error::InvalidConfig(
                "identity enhancer requires c_e == c_in".into(),
            ));
        }
        if self.enhancer == Enhancer::LinearResidual && self.c_e != self.c_in {
            return Err(Error::InvalidConfig(
                "residual enhancer requires c_e == c_in".into(),
            ));
        }
        if !(0.0 < self.momentum && self.momentum <= 1.0) {
            return Err(Error::InvalidConfig("momentum outside (0, 1]".into()));
        }
        if self.eps < 0.0 {
            return Err(Error::InvalidConfig("negative eps".into()));
        }
        Ok(())
    }

    fn classifier_dim(&self) -> usize {
        match self.classifier_input {
            ClassifierInput::Hidden2 => self.h2,
            ClassifierInput::Hidden1 => self.h1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[fan_in, fan_out]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearLayer {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub rs: RunningStats,
}

impl BnLayer {
    fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BnLayer {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            rs: RunningStats::new(channels, momentum, eps),
        }
    }
}

/// All learnable parameters plus the running-statistics buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub enhancer: Option<LinearLayer>,
    pub proj1: LinearLayer,
    pub bn1: BnLayer,
    pub proj2: LinearLayer,
    pub bn2: BnLayer,
    pub clf: LinearLayer,
}

/// Gradients mirroring the learnable parameters (not the running buffers).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub enhancer: Option<LinearLayer>,
    pub proj1: LinearLayer,
    pub gamma1: Array1<f64>,
    pub beta1: Array1<f64>,
    pub proj2: LinearLayer,
    pub gamma2: Array1<f64>,
    pub beta2: Array1<f64>,
    pub clf: LinearLayer,
}

impl ModelParams {
    /// Learnable tensors in the fixed block order shared with the optimizer
    /// and checkpoint format.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(e) = self.enhancer.as_mut() {
            out.push(e.w.as_slice_mut().expect("standard layout"));
            out.push(e.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.proj1.w.as_slice_mut().expect("standard layout"));
        out.push(self.proj1.b.as_slice_mut().expect("standard layout"));
        out.push(self.bn1.gamma.as_slice_mut().expect("standard layout"));
        out.push(self.bn1.beta.as_slice_mut().expect("standard layout"));
        out.push(self.proj2.w.as_slice_mut().expect("standard layout"));
        out.push(self.proj2.b.as_slice_mut().expect("standard layout"));
        out.push(self.bn2.gamma.as_slice_mut().expect("standard layout"));
        out.push(self.bn2.beta.as_slice_mut().expect("standard layout"));
        out.push(self.clf.w.as_slice_mut().expect("standard layout"));
        out.push(self.clf.b.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(e) = self.enhancer.as_ref() {
            out.push(e.w.len());
            out.push(e.b.len());
        }
        out.extend([
            self.proj1.w.len(),
            self.proj1.b.len(),
            self.bn1.gamma.len(),
            self.bn1.beta.len(),
            self.proj2.w.len(),
            self.proj2.b.len(),
            self.bn2.gamma.len(),
            self.bn2.beta.len(),
            self.clf.w.len(),
            self.clf.b.len(),
        ]);
        out
    }
}

impl Gradients {
    fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            enhancer: params
                .enhancer
                .as_ref()
                .map(|e| LinearLayer::zeros(e.w.nrows(), e.w.ncols())),
            proj1: LinearLayer::zeros(params.proj1.w.nrows(), params.proj1.w.ncols()),
            gamma1: Array1::zeros(params.bn1.gamma.len()),
            beta1: Array1::zeros(params.bn1.beta.len()),
            proj2: LinearLayer::zeros(params.proj2.w.nrows(), params.proj2.w.ncols()),
            gamma2: Array1::zeros(params.bn2.gamma.len()),
            beta2: Array1::zeros(params.bn2.beta.len()),
            clf: LinearLayer::zeros(params.clf.w.nrows(), params.clf.w.ncols()),
        }
    }

    /// Same block order as [`ModelParams::param_blocks_mut`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(e) = self.enhancer.as_ref() {
            out.push(e.w.as_slice().expect("standard layout"));
            out.push(e.b.as_slice().expect("standard layout"));
        }
        out.push(self.proj1.w.as_slice().expect("standard layout"));
        out.push(self.proj1.b.as_slice().expect("standard layout"));
        out.push(self.gamma1.as_slice().expect("standard layout"));
        out.push(self.beta1.as_slice().expect("standard layout"));
        out.push(self.proj2.w.as_slice().expect("standard layout"));
        out.push(self.proj2.b.as_slice().expect("standard layout"));
        out.push(self.gamma2.as_slice().expect("standard layout"));
        out.push(self.beta2.as_slice().expect("standard layout"));
        out.push(self.clf.w.as_slice().expect("standard layout"));
        out.push(self.clf.b.as_slice().expect("standard layout"));
        out
    }
}

/// Seed-deterministic initialization: uniform weights in `±1/sqrt(fan_in)`,
/// zero biases, unit scale / zero shift on the normalization layers.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    use rand::{Rng, SeedableRng};
    cfg.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut init_linear = |fan_in: usize, fan_out: usize| -> LinearLayer {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            rng.random::<f64>() * 2.0 * bound - bound
        });
        LinearLayer {
            w,
            b: Array1::zeros(fan_out),
        }
    };
    let enhancer = match cfg.enhancer {
        Enhancer::Identity => None,
        Enhancer::Linear | Enhancer::LinearResidual => Some(init_linear(cfg.c_in, cfg.c_e)),
    };
    let proj1 = init_linear(cfg.c_e, cfg.h1);
    let proj2 = init_linear(cfg.h1, cfg.h2);
    let clf = init_linear(cfg.classifier_dim(), 1);
    Ok(ModelParams {
        cfg: *cfg,
        enhancer,
        proj1,
        bn1: BnLayer::new(cfg.h1, cfg.momentum, cfg.eps),
        proj2,
        bn2: BnLayer::new(cfg.h2, cfg.momentum, cfg.eps),
        clf,
    })
}

/// Guard against zero batch variance inside the normalization denominator.
/// Small enough that standardization stays exact to ~1e-10; the running
/// statistics' `eps` is reserved for the divergence criterion's floor.
pub const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the backward pass and the scoring path need from a forward run.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: Mode,
    /// Raw input, kept only when an enhancer needs it for backward.
    x_in: Option<Array3<f64>>,
    pub x_e: Array3<f64>,
    pub h1: Array3<f64>,
    pub n1: Array3<f64>,
    pub z1: Array3<f64>,
    pub a1: Array3<f64>,
    pub h2: Array3<f64>,
    pub n2: Array3<f64>,
    pub z2: Array3<f64>,
    pub a2: Array3<f64>,
    pub preds: Array2<f64>,
    pub bstats1: Option<BatchStats>,
    pub bstats2: Option<BatchStats>,
}

fn linear3(x: &Array3<f64>, layer: &LinearLayer) -> Array3<f64> {
    let (b, t, i) = x.dim();
    let o = layer.w.ncols();
    let x2 = x
        .view()
        .into_shape_with_order((b * t, i))
        .expect("contiguous");
    let mut out = x2.dot(&layer.w);
    out += &layer.b;
    out.into_shape_with_order((b, t, o)).expect("contiguous")
}

/// Predictions stay inside the open interval; the clamp's flat region has an
/// exactly zero derivative (see `sigmoid_deriv`).
const PRED_CLAMP: f64 = 1e-12;

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

fn sigmoid_deriv(p: f64) -> f64 {
    if p <= PRED_CLAMP || p >= 1.0 - PRED_CLAMP {
        0.0
    } else {
        p * (1.0 - p)
    }
}

struct BlockOut {
    h: Array3<f64>,
    n: Array3<f64>,
    z: Array3<f64>,
    a: Array3<f64>,
    bstats: Option<BatchStats>,
}

fn block_forward(
    input: &Array3<f64>,
    proj: &LinearLayer,
    bn: &BnLayer,
    normalization: Normalization,
    mode: Mode,
) -> Result<BlockOut> {
    let h = linear3(input, proj);
    let (mean, var, bstats) = match mode {
        Mode::Train => {
            let bs = batch_stats(h.view())?;
            (bs.mean.clone(), bs.var.clone(), Some(bs))
        }
        Mode::Eval => (bn.rs.mean.clone(), bn.rs.var.clone(), None),
    };
    let n = match normalization {
        Normalization::BatchNorm => {
            let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
            let mut n = h.clone();
            for mut row in n.rows_mut() {
                row -= &mean;
                row *= &inv_std;
            }
            n
        }
        Normalization::Identity => h.clone(),
    };
    let mut z = n.clone();
    for mut row in z.rows_mut() {
        row *= &bn.gamma;
        row += &bn.beta;
    }
    let a = z.mapv(|v| v.max(0.0));
    Ok(BlockOut {
        h,
        n,
        z,
        a,
        bstats,
    })
}

fn run_forward(x: ArrayView3<'_, f64>, params: &ModelParams, mode: Mode) -> Result<ForwardCache> {
    params.cfg.validate()?;
    ensure_finite3(x)?;
    let (b, t, c_in) = x.dim();
    if c_in != params.cfg.c_in {
        return Err(Error::DimensionMismatch {
            expected: params.cfg.c_in,
            got: c_in,
        });
    }
    if b * t == 0 {
        return Err(Error::EmptyBatch);
    }
    if mode == Mode::Train && b * t < 2 {
        return Err(Error::DegenerateBatch);
    }

    let owned = x.to_owned();
    let (x_in, x_e) = match (&params.enhancer, params.cfg.enhancer) {
        (None, _) => (None, owned),
        (Some(layer), Enhancer::Linear) => {
            let e = linear3(&owned, layer);
            (Some(owned), e)
        }
        (Some(layer), Enhancer::LinearResidual) => {
            let mut e = linear3(&owned, layer);
            e += &owned;
            (Some(owned), e)
        }
        (Some(_), Enhancer::Identity) => {
            return Err(Error::InvalidConfig(
                "enhancer parameters present but config says identity".into(),
            ))
        }
    };

    let b1 = block_forward(&x_e, &params.proj1, &params.bn1, params.cfg.normalization, mode)?;
    let b2 = block_forward(&b1.a, &params.proj2, &params.bn2, params.cfg.normalization, mode)?;

    let clf_in = match params.cfg.classifier_input {
        ClassifierInput::Hidden2 => &b2.a,
        ClassifierInput::Hidden1 => &b1.a,
    };
    let logits = linear3(clf_in, &params.clf);
    let preds = Array2::from_shape_fn((b, t), |(bi, ti)| sigmoid(logits[[bi, ti, 0]]));

    Ok(ForwardCache {
        mode,
        x_in,
        x_e,
        h1: b1.h,
        n1: b1.n,
        z1: b1.z,
        a1: b1.a,
        h2: b2.h,
        n2: b2.n,
        z2: b2.z,
        a2: b2.a,
        preds,
        bstats1: b1.bstats,
        bstats2: b2.bstats,
    })
}

/// Train-mode forward: normalizes with the current batch statistics and
/// folds them into the running statistics.
pub fn forward_train(x: ArrayView3<'_, f64>, params: &mut ModelParams) -> Result<ForwardCache> {
    let cache = run_forward(x, params, Mode::Train)?;
    ema_update(&mut params.bn1.rs, cache.bstats1.as_ref().expect("train stats"))?;
    ema_update(&mut params.bn2.rs, cache.bstats2.as_ref().expect("train stats"))?;
    Ok(cache)
}

/// Eval-mode forward: a pure function of parameters and input.
pub fn forward_eval(x: ArrayView3<'_, f64>, params: &ModelParams) -> Result<ForwardCache> {
    run_forward(x, params, Mode::Eval)
}

fn flat2<'a>(x: &'a Array3<f64>) -> ArrayView2<'a, f64> {
    let (b, t, c) = x.dim();
    x.view()
        .into_shape_with_order((b * t, c))
        .expect("contiguous")
}

/// Backward through normalization computed from batch statistics.
///
/// `d_n` is the gradient at the normalized output, `n_hat` the normalized
/// values, `inv_std` the per-channel `1/sqrt(var + eps)` of the batch.
fn bn_backward(d_n: &Array2<f64>, n_hat: ArrayView2<'_, f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let (rows, _c) = d_n.dim();
    let nf = rows as f64;
    let sum_dn = d_n.sum_axis(Axis(0));
    let sum_dn_nhat = (d_n * &n_hat).sum_axis(Axis(0));
    let mut out = d_n * nf;
    out -= &sum_dn;
    out -= &(&n_hat * &sum_dn_nhat);
    out *= &(inv_std / nf);
    out
}

struct BlockBack {
    d_input: Array2<f64>,
    d_w: Array2<f64>,
    d_b: Array1<f64>,
    d_gamma: Array1<f64>,
    d_beta: Array1<f64>,
}

/// Backward for one projection + normalization + rectifier block.
///
/// `d_a` arrives at the rectifier output, `d_h_extra` directly at the pre-norm
/// hidden features.
#[allow(clippy::too_many_arguments)]
fn block_backward(
    input2: ArrayView2<'_, f64>,
    z2d: ArrayView2<'_, f64>,
    n2d: ArrayView2<'_, f64>,
    bstats: &BatchStats,
    proj: &LinearLayer,
    bn: &BnLayer,
    normalization: Normalization,
    d_a: &Array2<f64>,
    d_h_extra: Option<&Array2<f64>>,
) -> BlockBack {
    // rectifier
    let mut d_z = d_a.clone();
    d_z.zip_mut_with(&z2d, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    // affine
    let d_gamma = (&d_z * &n2d).sum_axis(Axis(0));
    let d_beta = d_z.sum_axis(Axis(0));
    let d_n = &d_z * &bn.gamma;
    // normalization
    let mut d_h = match normalization {
        Normalization::BatchNorm => {
            let inv_std = bstats.var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
            bn_backward(&d_n, n2d, &inv_std)
        }
        Normalization::Identity => d_n,
    };
    if let Some(extra) = d_h_extra {
        d_h += extra;
    }
    // projection
    let d_w = input2.t().dot(&d_h);
    let d_b = d_h.sum_axis(Axis(0));
    let d_input = d_h.dot(&proj.w.t());
    BlockBack {
        d_input,
        d_w,
        d_b,
        d_gamma,
        d_beta,
    }
}

/// Exact parameter gradients for a train-mode forward, combining the
/// classifier path (`d_preds`) with gradients injected at the pre-norm hidden
/// features (`d_h1`, `d_h2`).
pub fn backward(
    cache: &ForwardCache,
    params: &ModelParams,
    d_preds: ArrayView2<'_, f64>,
    d_h1: ArrayView3<'_, f64>,
    d_h2: ArrayView3<'_, f64>,
) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::ModeMismatch);
    }
    let (b, t, _c) = cache.h1.dim();
    ensure_finite2(d_preds)?;
    if d_preds.dim() != (b, t) {
        return Err(Error::DimensionMismatch {
            expected: b * t,
            got: d_preds.len(),
        });
    }
    if d_h1.dim() != cache.h1.dim() || d_h2.dim() != cache.h2.dim() {
        return Err(Error::DimensionMismatch {
            expected: cache.h1.len(),
            got: d_h1.len(),
        });
    }
    let n = b * t;
    let mut grads = Gradients::zeros_like(params);

    // sigmoid head
    let mut d_logits = Array2::<f64>::zeros((n, 1));
    for bi in 0..b {
        for ti in 0..t {
            let p = cache.preds[[bi, ti]];
            d_logits[[bi * t + ti, 0]] = d_preds[[bi, ti]] * sigmoid_deriv(p);
        }
    }
    let clf_in2 = match params.cfg.classifier_input {
        ClassifierInput::Hidden2 => flat2(&cache.a2),
        ClassifierInput::Hidden1 => flat2(&cache.a1),
    };
    grads.clf.w = clf_in2.t().dot(&d_logits);
    grads.clf.b = d_logits.sum_axis(Axis(0));
    let d_clf_in = d_logits.dot(&params.clf.w.t());

    // block 2
    let mut d_a2 = Array2::<f64>::zeros((n, params.cfg.h2));
    if params.cfg.classifier_input == ClassifierInput::Hidden2 {
        d_a2 += &d_clf_in;
    }
    let d_h2_extra = d_h2
        .into_shape_with_order((n, params.cfg.h2))
        .expect("contiguous")
        .to_owned();
    let back2 = block_backward(
        flat2(&cache.a1),
        flat2(&cache.z2),
        flat2(&cache.n2),
        cache.bstats2.as_ref().expect("train stats"),
        &params.proj2,
        &params.bn2,
        params.cfg.normalization,
        &d_a2,
        Some(&d_h2_extra),
    );
    grads.proj2.w = back2.d_w;
    grads.proj2.b = back2.d_b;
    grads.gamma2 = back2.d_gamma;
    grads.beta2 = back2.d_beta;

    // block 1
    let mut d_a1 = back2.d_input;
    if params.cfg.classifier_input == ClassifierInput::Hidden1 {
        d_a1 += &d_clf_in;
    }
    let d_h1_extra = d_h1
        .into_shape_with_order((n, params.cfg.h1))
        .expect("contiguous")
        .to_owned();
    let back1 = block_backward(
        flat2(&cache.x_e),
        flat2(&cache.z1),
        flat2(&cache.n1),
        cache.bstats1.as_ref().expect("train stats"),
        &params.proj1,
        &params.bn1,
        params.cfg.normalization,
        &d_a1,
        Some(&d_h1_extra),
    );
    grads.proj1.w = back1.d_w;
    grads.proj1.b = back1.d_b;
    grads.gamma1 = back1.d_gamma;
    grads.beta1 = back1.d_beta;

    // enhancer
    if let Some(_layer) = params.enhancer.as_ref() {
        let x_in = cache.x_in.as_ref().expect("input cached for enhancer");
        let d_xe = back1.d_input;
        let eg = grads.enhancer.as_mut().expect("gradients mirror params");
        eg.w = flat2(x_in).t().dot(&d_xe);
        eg.b = d_xe.sum_axis(Axis(0));
    }

    Ok(grads)
}

/// Fused anomaly score on an eval-mode cache: classifier probability times
/// the summed divergence of both hidden layers from their running means.
pub fn anomaly_score(
    cache: &ForwardCache,
    params: &ModelParams,
    metric: DfmMetric,
) -> Result<ScoreGrid> {
    if cache.mode != Mode::Eval {
        return Err(Error::ModeMismatch);
    }
    let d1 = dfm_batch(cache.h1.view(), &params.bn1.rs, metric)?;
    let d2 = dfm_batch(cache.h2.view(), &params.bn2.rs, metric)?;
    Ok(&cache.preds * &(&d1 + &d2))
}

// --- checkpoint io ------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"WVCP";
const CHECKPOINT_VERSION: u32 = 1;

fn write_arr(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn arr(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::Format(format!(
                "checkpoint array length {n}, expected {expected}"
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn enhancer_tag(e: Enhancer) -> u8 {
    match e {
        Enhancer::Identity => 0,
        Enhancer::Linear => 1,
        Enhancer::LinearResidual => 2,
    }
}

/// Serialize parameters (and optionally optimizer state) to a versioned
/// little-endian binary file. Round-trips bit-exactly.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    adam: Option<&AdamState>,
) -> Result<()> {
    let cfg = &params.cfg;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [cfg.c_in, cfg.c_e, cfg.h1, cfg.h2] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.push(enhancer_tag(cfg.enhancer));
    buf.push(match cfg.normalization {
        Normalization::BatchNorm => 0,
        Normalization::Identity => 1,
    });
    buf.push(match cfg.classifier_input {
        ClassifierInput::Hidden2 => 0,
        ClassifierInput::Hidden1 => 1,
    });
    buf.extend_from_slice(&cfg.momentum.to_le_bytes());
    buf.extend_from_slice(&cfg.eps.to_le_bytes());

    if let Some(e) = params.enhancer.as_ref() {
        write_arr(&mut buf, e.w.as_slice().unwrap());
        write_arr(&mut buf, e.b.as_slice().unwrap());
    }
    for (proj, bn) in [(&params.proj1, &params.bn1), (&params.proj2, &params.bn2)] {
        write_arr(&mut buf, proj.w.as_slice().unwrap());
        write_arr(&mut buf, proj.b.as_slice().unwrap());
        write_arr(&mut buf, bn.gamma.as_slice().unwrap());
        write_arr(&mut buf, bn.beta.as_slice().unwrap());
        write_arr(&mut buf, bn.rs.mean.as_slice().unwrap());
        write_arr(&mut buf, bn.rs.var.as_slice().unwrap());
    }
    write_arr(&mut buf, params.clf.w.as_slice().unwrap());
    write_arr(&mut buf, params.clf.b.as_slice().unwrap());

    match adam {
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.t.to_le_bytes());
            buf.extend_from_slice(&(state.m.len() as u32).to_le_bytes());
            for block in state.m.iter().chain(state.v.iter()) {
                write_arr(&mut buf, block);
            }
        }
        None => buf.push(0),
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<AdamState>)> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let c_in = r.u32()? as usize;
    let c_e = r.u32()? as usize;
    let h1 = r.u32()? as usize;
    let h2 = r.u32()? as usize;
    let enhancer = match r.u8()? {
        0 => Enhancer::Identity,
        1 => Enhancer::Linear,
        2 => Enhancer::LinearResidual,
        other => return Err(Error::Format(format!("unknown enhancer tag {other}"))),
    };
    let normalization = match r.u8()? {
        0 => Normalization::BatchNorm,
        1 => Normalization::Identity,
        other => return Err(Error::Format(format!("unknown normalization tag {other}"))),
    };
    let classifier_input = match r.u8()? {
        0 => ClassifierInput::Hidden2,
        1 => ClassifierInput::Hidden1,
        other => return Err(Error::Format(format!("unknown classifier tag {other}"))),
    };
    let momentum = r.f64()?;
    let eps = r.f64()?;
    let cfg = ModelConfig {
        c_in,
        c_e,
        h1,
        h2,
        enhancer,
        normalization,
        classifier_input,
        momentum,
        eps,
    };
    cfg.validate()?;

    let read_linear = |r: &mut Reader<'_>, fan_in: usize, fan_out: usize| -> Result<LinearLayer> {
        let w = r.arr(fan_in * fan_out)?;
        let b = r.arr(fan_out)?;
        Ok(LinearLayer {
            w: Array2::from_shape_vec((fan_in, fan_out), w).expect("shape checked"),
            b: Array1::from_vec(b),
        })
    };
    let enhancer_layer = match enhancer {
        Enhancer::Identity => None,
        _ => Some(read_linear(&mut r, c_in, c_e)?),
    };
    let read_block = |r: &mut Reader<'_>, fan_in: usize, ch: usize| -> Result<(LinearLayer, BnLayer)> {
        let proj = read_linear(r, fan_in, ch)?;
        let gamma = Array1::from_vec(r.arr(ch)?);
        let beta = Array1::from_vec(r.arr(ch)?);
        let mean = Array1::from_vec(r.arr(ch)?);
        let var = Array1::from_vec(r.arr(ch)?);
        Ok((
            proj,
            BnLayer {
                gamma,
                beta,
                rs: RunningStats {
                    mean,
                    var,
                    momentum,
                    eps,
                },
            },
        ))
    };
    let (proj1, bn1) = read_block(&mut r, c_e, h1)?;
    let (proj2, bn2) = read_block(&mut r, h1, h2)?;
    let clf = read_linear(&mut r, cfg.classifier_dim(), 1)?;
    let params = ModelParams {
        cfg,
        enhancer: enhancer_layer,
        proj1,
        bn1,
        proj2,
        bn2,
        clf,
    };

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let n_blocks = r.u32()? as usize;
            let sizes = params.block_sizes();
            if n_blocks != sizes.len() {
                return Err(Error::Format(format!(
                    "optimizer block count {n_blocks}, expected {}",
                    sizes.len()
                )));
            }
            let mut m = Vec::with_capacity(n_blocks);
            for &sz in &sizes {
                m.push(r.arr(sz)?);
            }
            let mut v = Vec::with_capacity(n_blocks);
            for &sz in &sizes {
                v.push(r.arr(sz)?);
            }
            Some(AdamState { m, v, t })
        }
        other => return Err(Error::Format(format!("unknown optimizer tag {other}"))),
    };
    if r.pos != data.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((params, adam))
}
