//! Training losses and their analytic gradients.
//!
//! The pull-push loss treats the running mean as the only anchor: selected
//! normal features are pulled toward it, selected abnormal features pushed
//! away, paired by divergence rank. The normal regression loss drives all
//! predictions on normal videos toward zero. Running statistics are gradient
//! constants throughout.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::stats::{dfm_grad, DfmMetric, RunningStats};
use crate::tensor::ensure_finite2;

/// Margin, hinge switch, and divergence metric for the pull-push loss.
#[derive(Debug, Clone, Copy)]
pub struct MppConfig {
    pub margin: f64,
    pub hinge: bool,
    pub metric: DfmMetric,
}

impl Default for MppConfig {
    fn default() -> Self {
        MppConfig {
            margin: 1.0,
            hinge: true,
            metric: DfmMetric::Mahalanobis,
        }
    }
}

/// Weights for the two pull-push terms in the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 20.0,
        }
    }
}

/// Pull-push loss value and gradients for both feature sets.
#[derive(Debug, Clone)]
pub struct MppLoss {
    pub value: f64,
    pub d_normal: Array2<f64>,
    pub d_abnormal: Array2<f64>,
}

/// Margin loss over rank-paired selected features:
/// mean over pairs of `[margin + dfm(normal) - dfm(abnormal)]`, each bracket
/// clamped at zero when hinged. Rows must be pre-sorted by descending
/// divergence on both sides.
pub fn mpp_loss(
    x_nor: ArrayView2<'_, f64>,
    x_abn: ArrayView2<'_, f64>,
    rs: &RunningStats,
    cfg: &MppConfig,
) -> Result<MppLoss> {
    let (k, c) = x_nor.dim();
    let (ka, ca) = x_abn.dim();
    if k == 0 {
        return Err(Error::EmptySelection);
    }
    if ka != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: ka,
        });
    }
    if ca != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: ca,
        });
    }
    ensure_finite2(x_nor)?;
    ensure_finite2(x_abn)?;

    let inv_k = 1.0 / k as f64;
    let mut value = 0.0;
    let mut d_nor = Array2::<f64>::zeros((k, c));
    let mut d_abn = Array2::<f64>::zeros((k, c));
    for pair in 0..k {
        let (dn, gn) = dfm_grad(x_nor.row(pair), rs, cfg.metric)?;
        let (da, ga) = dfm_grad(x_abn.row(pair), rs, cfg.metric)?;
        let bracket = cfg.margin + dn - da;
        if cfg.hinge {
            if bracket > 0.0 {
                value += bracket;
                d_nor.row_mut(pair).assign(&(&gn * inv_k));
                d_abn.row_mut(pair).assign(&(&ga * (-inv_k)));
            }
        } else {
            value += bracket;
            d_nor.row_mut(pair).assign(&(&gn * inv_k));
            d_abn.row_mut(pair).assign(&(&ga * (-inv_k)));
        }
    }
    Ok(MppLoss {
        value: value * inv_k,
        d_normal: d_nor,
        d_abnormal: d_abn,
    })
}

/// Normal regression loss value and gradient on the prediction grid.
#[derive(Debug, Clone)]
pub struct NormalLoss {
    pub value: f64,
    pub d_preds: Array2<f64>,
}

/// Sum over videos of the L2 norm of the per-video prediction vector.
pub fn normal_loss(preds: ArrayView2<'_, f64>) -> Result<NormalLoss> {
    ensure_finite2(preds)?;
    let (b, t) = preds.dim();
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((b, t));
    for bi in 0..b {
        let norm: f64 = preds.row(bi).iter().map(|v| v * v).sum::<f64>().sqrt();
        value += norm;
        if norm > 0.0 {
            for ti in 0..t {
                grad[[bi, ti]] = preds[[bi, ti]] / norm;
            }
        }
    }
    Ok(NormalLoss {
        value,
        d_preds: grad,
    })
}

/// Optional binary cross-entropy against target 1 over selected abnormal
/// predictions; kept for the ablation where it degrades performance.
#[derive(Debug, Clone)]
pub struct AbnormalLoss {
    pub value: f64,
    pub d_preds: Array1<f64>,
}

/// Callers clamp predictions away from zero; this value is the clamp floor.
pub const BCE_CLAMP: f64 = 1e-7;

pub fn abnormal_loss(preds: ArrayView1<'_, f64>) -> Result<AbnormalLoss> {
    let k = preds.len();
    if k == 0 {
        return Err(Error::EmptySelection);
    }
    if preds.iter().any(|&p| !p.is_finite()) {
        return Err(Error::NonFiniteFeature);
    }
    if preds.iter().any(|&p| p <= 0.0) {
        return Err(Error::InvalidConfig(
            "abnormal loss undefined at zero prediction; clamp first".into(),
        ));
    }
    let inv_k = 1.0 / k as f64;
    let value = -preds.iter().map(|&p| p.ln()).sum::<f64>() * inv_k;
    let grad = preds.mapv(|p| -inv_k / p);
    Ok(AbnormalLoss {
        value,
        d_preds: grad,
    })
}

/// Total objective: `nor + lambda1 * mpp1 + lambda2 * mpp2`.
pub fn total_loss(nor: f64, mpp1: f64, mpp2: f64, w: &LossWeights) -> f64 {
    nor + w.lambda1 * mpp1 + w.lambda2 * mpp2
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rs(c: usize) -> RunningStats {
        RunningStats::new(c, 0.1, 0.0)
    }

    fn random_features(seed: u64, k: usize, c: usize, offset: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((k, c), |_| rng.random::<f64>() * 2.0 - 1.0 + offset)
    }

    /// Central finite differences of a scalar function of one matrix.
    fn fd_grad<F: FnMut(&Array2<f64>) -> f64>(
        x: &Array2<f64>,
        mut f: F,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros(x.dim());
        let mut probe = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = probe[[r, c]];
            probe[[r, c]] = orig + h;
            let up = f(&probe);
            probe[[r, c]] = orig - h;
            let down = f(&probe);
            probe[[r, c]] = orig;
            g[[r, c]] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &Array2<f64>, fd: &Array2<f64>, rel: f64, abs_floor: f64) {
        for (a, b) in analytic.iter().zip(fd.iter()) {
            let tol = abs_floor.max(rel * b.abs().max(a.abs()));
            assert!(
                (a - b).abs() <= tol,
                "gradient mismatch: analytic {a}, fd {b}"
            );
        }
    }

    #[test]
    fn mpp_equal_divergence_gives_margin() {
        let rs = unit_rs(3);
        let x = random_features(0, 4, 3, 0.0);
        for hinge in [true, false] {
            let cfg = MppConfig {
                margin: 1.0,
                hinge,
                metric: DfmMetric::Mahalanobis,
            };
            let out = mpp_loss(x.view(), x.view(), &rs, &cfg).unwrap();
            assert!((out.value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mpp_single_pair_raw_vs_hinged() {
        // one pair with dfm(abn) - dfm(nor) = 3 under unit variance
        let rs = unit_rs(1);
        let x_nor = arr2(&[[1.0]]);
        let x_abn = arr2(&[[4.0]]);
        let raw = mpp_loss(
            x_nor.view(),
            x_abn.view(),
            &rs,
            &MppConfig {
                margin: 1.0,
                hinge: false,
                metric: DfmMetric::Mahalanobis,
            },
        )
        .unwrap();
        assert!((raw.value - (-2.0)).abs() < 1e-12);
        let hinged = mpp_loss(
            x_nor.view(),
            x_abn.view(),
            &rs,
            &MppConfig::default(),
        )
        .unwrap();
        assert_eq!(hinged.value, 0.0);
        assert!(hinged.d_normal.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mpp_empty_selection_errors() {
        let rs = unit_rs(2);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            mpp_loss(empty.view(), empty.view(), &rs, &MppConfig::default()),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn mpp_gradients_match_finite_differences() {
        let metrics = [
            DfmMetric::Mahalanobis,
            DfmMetric::Euclidean,
            DfmMetric::Cosine,
            DfmMetric::FeatureMagnitude,
        ];
        for (mi, metric) in metrics.into_iter().enumerate() {
            for hinge in [false, true] {
                let mut rng = ChaCha8Rng::seed_from_u64(40 + mi as u64);
                let c = 6;
                let rs = RunningStats {
                    mean: Array1::from_shape_fn(c, |_| rng.random::<f64>() + 0.5),
                    var: Array1::from_shape_fn(c, |_| rng.random::<f64>() + 0.2),
                    momentum: 0.1,
                    eps: 1e-5,
                };
                let x_nor = random_features(90 + mi as u64, 4, c, 0.8);
                let x_abn = random_features(91 + mi as u64, 4, c, 2.0);
                let cfg = MppConfig {
                    margin: 1.0,
                    hinge,
                    metric,
                };
                let out = mpp_loss(x_nor.view(), x_abn.view(), &rs, &cfg).unwrap();
                let fd_nor = fd_grad(
                    &x_nor,
                    |x| mpp_loss(x.view(), x_abn.view(), &rs, &cfg).unwrap().value,
                    1e-4,
                );
                let fd_abn = fd_grad(
                    &x_abn,
                    |x| mpp_loss(x_nor.view(), x.view(), &rs, &cfg).unwrap().value,
                    1e-4,
                );
                assert_close(&out.d_normal, &fd_nor, 1e-4, 1e-7);
                assert_close(&out.d_abnormal, &fd_abn, 1e-4, 1e-7);
            }
        }
    }

    #[test]
    fn normal_loss_values_and_gradient() {
        let zero = Array2::<f64>::zeros((2, 4));
        let out = normal_loss(zero.view()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.d_preds.iter().all(|&g| g == 0.0));

        let preds = arr2(&[[0.3, 0.4]]);
        let out = normal_loss(preds.view()).unwrap();
        assert!((out.value - 0.5).abs() < 1e-12);

        let preds = random_features(17, 2, 5, 0.6).mapv(f64::abs);
        let out = normal_loss(preds.view()).unwrap();
        let fd = fd_grad(&preds, |p| normal_loss(p.view()).unwrap().value, 1e-4);
        assert_close(&out.d_preds, &fd, 1e-4, 1e-7);
    }

    #[test]
    fn abnormal_loss_values_and_gradient() {
        let near_one = arr1(&[1.0 - 1e-7, 1.0 - 1e-7]);
        let out = abnormal_loss(near_one.view()).unwrap();
        assert!(out.value < 1e-6);

        let half = arr1(&[0.5]);
        let out = abnormal_loss(half.view()).unwrap();
        assert!((out.value - 2.0f64.ln()).abs() < 1e-12);

        assert!(abnormal_loss(arr1(&[0.0]).view()).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let preds: Array1<f64> = (0..6).map(|_| rng.random::<f64>() * 0.8 + 0.1).collect();
        let out = abnormal_loss(preds.view()).unwrap();
        let h = 1e-4;
        for i in 0..preds.len() {
            let mut up = preds.clone();
            up[i] += h;
            let mut down = preds.clone();
            down[i] -= h;
            let fd = (abnormal_loss(up.view()).unwrap().value
                - abnormal_loss(down.view()).unwrap().value)
                / (2.0 * h);
            let tol = 1e-6f64.max(1e-4 * fd.abs());
            assert!((out.d_preds[i] - fd).abs() <= tol);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(1.0, 0.1, 0.05, &w) - 2.5).abs() < 1e-12);
        let doubled = LossWeights {
            lambda1: 10.0,
            lambda2: 40.0,
        };
        let base = total_loss(1.0, 0.1, 0.05, &w);
        let twice = total_loss(1.0, 0.1, 0.05, &doubled);
        assert!(((twice - 1.0) - 2.0 * (base - 1.0)).abs() < 1e-12);
    }

    use ndarray::Array1;

    proptest! {
        #[test]
        fn hinged_is_nonnegative_and_dominates_raw(seed in 0u64..500) {
            let rs = unit_rs(4);
            let x_nor = random_features(seed, 3, 4, 0.0);
            let x_abn = random_features(seed + 1000, 3, 4, 0.5);
            let hinged = mpp_loss(x_nor.view(), x_abn.view(), &rs, &MppConfig::default()).unwrap();
            let raw = mpp_loss(
                x_nor.view(), x_abn.view(), &rs,
                &MppConfig { hinge: false, ..MppConfig::default() },
            ).unwrap();
            prop_assert!(hinged.value >= 0.0);
            prop_assert!(hinged.value >= raw.value - 1e-12);
        }

        #[test]
        fn mpp_permutation_symmetric(seed in 0u64..500) {
            let rs = unit_rs(3);
            let x_nor = random_features(seed, 4, 3, 0.2);
            let x_abn = random_features(seed + 2000, 4, 3, 1.0);
            let base = mpp_loss(x_nor.view(), x_abn.view(), &rs, &MppConfig::default()).unwrap();
            let perm = [2usize, 0, 3, 1];
            let pn = Array2::from_shape_fn((4, 3), |(r, c)| x_nor[[perm[r], c]]);
            let pa = Array2::from_shape_fn((4, 3), |(r, c)| x_abn[[perm[r], c]]);
            let permuted = mpp_loss(pn.view(), pa.view(), &rs, &MppConfig::default()).unwrap();
            prop_assert!((base.value - permuted.value).abs() < 1e-12);
        }

        #[test]
        fn normal_loss_zero_iff_zero(seed in 0u64..500) {
            let preds = random_features(seed, 2, 4, 0.5).mapv(f64::abs);
            let out = normal_loss(preds.view()).unwrap();
            let all_zero = preds.iter().all(|&p| p == 0.0);
            prop_assert_eq!(out.value == 0.0, all_zero);
        }
    }
}
