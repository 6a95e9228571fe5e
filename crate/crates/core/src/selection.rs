//! Snippet selection over abnormality-score grids.
//!
//! Three strategies: per-video top-k (SLS), per-batch top-k (BLS), and their
//! union (SBS). Normal videos get a matched selection whose total equals the
//! abnormal selection count. All selection is rank-based with deterministic
//! tie-breaking by index.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::ensure_finite2;

/// Which strategy selected a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Provenance {
    #[default]
    None,
    Sls,
    Bls,
    Both,
}

/// Boolean selection grid with per-cell provenance.
#[derive(Debug, Clone)]
pub struct SelectionMask {
    pub selected: Array2<bool>,
    pub provenance: Array2<Provenance>,
    pub count: usize,
}

impl SelectionMask {
    fn empty(b: usize, t: usize) -> Self {
        SelectionMask {
            selected: Array2::from_elem((b, t), false),
            provenance: Array2::from_elem((b, t), Provenance::None),
            count: 0,
        }
    }

    fn mark(&mut self, b: usize, t: usize, p: Provenance) {
        if !self.selected[[b, t]] {
            self.selected[[b, t]] = true;
            self.count += 1;
            self.provenance[[b, t]] = p;
        } else if self.provenance[[b, t]] != p {
            self.provenance[[b, t]] = Provenance::Both;
        }
    }

    /// Selected cells in row-major order.
    pub fn indices(&self) -> Vec<(usize, usize)> {
        let (b, t) = self.selected.dim();
        let mut out = Vec::with_capacity(self.count);
        for bi in 0..b {
            for ti in 0..t {
                if self.selected[[bi, ti]] {
                    out.push((bi, ti));
                }
            }
        }
        out
    }

    /// Elementwise union, merging provenance.
    pub fn union(&self, other: &SelectionMask) -> SelectionMask {
        let (b, t) = self.selected.dim();
        let mut out = SelectionMask::empty(b, t);
        for bi in 0..b {
            for ti in 0..t {
                if self.selected[[bi, ti]] {
                    out.mark(bi, ti, self.provenance[[bi, ti]]);
                }
                if other.selected[[bi, ti]] {
                    out.mark(bi, ti, other.provenance[[bi, ti]]);
                }
            }
        }
        out
    }
}

/// Sample-level and batch-level selection ratios.
#[derive(Debug, Clone, Copy)]
pub struct SelectionRatios {
    pub rho_s: f64,
    pub rho_b: f64,
}

impl SelectionRatios {
    pub fn new(rho_s: f64, rho_b: f64) -> Result<Self> {
        check_ratio(rho_s)?;
        check_ratio(rho_b)?;
        if rho_s == 0.0 && rho_b == 0.0 {
            return Err(Error::InvalidRatio(0.0));
        }
        Ok(SelectionRatios { rho_s, rho_b })
    }
}

fn check_ratio(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
        Err(Error::InvalidRatio(rho))
    } else {
        Ok(())
    }
}

/// k = max(1, ceil(rho * n)); the floor of 1 keeps tiny grids selectable.
fn k_from_ratio(rho: f64, n: usize) -> usize {
    ((rho * n as f64).ceil() as usize).max(1).min(n)
}

/// Indices 0..n sorted by descending score, ties by ascending index.
fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores validated finite")
            .then(a.cmp(&b))
    });
    idx
}

/// Sample-level selection: per video, the top `max(1, ceil(rho_s * T))`
/// snippets by score.
pub fn select_sls(scores: ArrayView2<'_, f64>, rho_s: f64) -> Result<SelectionMask> {
    check_ratio(rho_s)?;
    ensure_finite2(scores)?;
    let (b, t) = scores.dim();
    if t == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = k_from_ratio(rho_s, t);
    let mut mask = SelectionMask::empty(b, t);
    for bi in 0..b {
        let row: Vec<f64> = scores.row(bi).to_vec();
        for &ti in rank_desc(&row).iter().take(k) {
            mask.mark(bi, ti, Provenance::Sls);
        }
    }
    Ok(mask)
}

/// Batch-level selection: the top `max(1, ceil(rho_b * B * T))` cells across
/// the whole grid, ties by (video, snippet) index.
pub fn select_bls(scores: ArrayView2<'_, f64>, rho_b: f64) -> Result<SelectionMask> {
    check_ratio(rho_b)?;
    ensure_finite2(scores)?;
    let (b, t) = scores.dim();
    if b * t == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = k_from_ratio(rho_b, b * t);
    let flat: Vec<f64> = scores.iter().copied().collect();
    let mut mask = SelectionMask::empty(b, t);
    for &i in rank_desc(&flat).iter().take(k) {
        mask.mark(i / t, i % t, Provenance::Bls);
    }
    Ok(mask)
}

/// Sample-batch selection: the union of SLS and BLS. A ratio of zero disables
/// that strategy.
pub fn select_sbs(scores: ArrayView2<'_, f64>, ratios: &SelectionRatios) -> Result<SelectionMask> {
    let (b, t) = scores.dim();
    let sls = if ratios.rho_s > 0.0 {
        select_sls(scores, ratios.rho_s)?
    } else {
        ensure_finite2(scores)?;
        SelectionMask::empty(b, t)
    };
    let bls = if ratios.rho_b > 0.0 {
        select_bls(scores, ratios.rho_b)?
    } else {
        SelectionMask::empty(b, t)
    };
    Ok(sls.union(&bls))
}

/// Select exactly `k_abn` snippets from normal videos: an equal per-video
/// quota of floor(k_abn / B) top snippets, with the remainder going to the
/// globally highest-scoring cells left over.
pub fn select_normal_matched(
    scores: ArrayView2<'_, f64>,
    k_abn: usize,
) -> Result<SelectionMask> {
    ensure_finite2(scores)?;
    let (b, t) = scores.dim();
    if k_abn > b * t {
        return Err(Error::InsufficientNormalSnippets {
            requested: k_abn,
            available: b * t,
        });
    }
    let mut mask = SelectionMask::empty(b, t);
    if k_abn == 0 || b == 0 {
        return Ok(mask);
    }
    let quota = (k_abn / b).min(t);
    for bi in 0..b {
        let row: Vec<f64> = scores.row(bi).to_vec();
        for &ti in rank_desc(&row).iter().take(quota) {
            mask.mark(bi, ti, Provenance::Sls);
        }
    }
    let remainder = k_abn - mask.count;
    if remainder > 0 {
        let flat: Vec<f64> = scores.iter().copied().collect();
        let mut taken = 0;
        for &i in rank_desc(&flat).iter() {
            if taken == remainder {
                break;
            }
            let (bi, ti) = (i / t, i % t);
            if !mask.selected[[bi, ti]] {
                mask.mark(bi, ti, Provenance::Bls);
                taken += 1;
            }
        }
    }
    debug_assert_eq!(mask.count, k_abn);
    Ok(mask)
}
