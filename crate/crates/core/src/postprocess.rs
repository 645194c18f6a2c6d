//! From score maps to ranked proposals: boundary fusion, confidence fusion,
//! dense candidate enumeration, Gaussian Soft-NMS and final retrieval.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{interval_iou, Interval};
use crate::tensor::{Real, Tensor};

/// A scored temporal interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    /// Grid coordinates within the producing map.
    pub start: usize,
    pub end: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
    pub completeness: f64,
    pub start_prob: f64,
    pub end_prob: f64,
}

impl Proposal {
    pub fn interval(&self) -> Interval {
        Interval::new(self.start_s, self.end_s)
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Score descending, then earlier start, then shorter duration.
pub fn rank_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_s.total_cmp(&b.start_s))
        .then(a.duration().total_cmp(&b.duration()))
}

/// Maps grid coordinates of one score map to seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMapping {
    /// Grid index of the map's first location in video coordinates.
    pub offset: f64,
    pub seconds_per_unit: f64,
}

impl GridMapping {
    /// A map of `length` locations spanning a whole video.
    pub fn rescaled(length: usize, duration: f64) -> Self {
        Self {
            offset: 0.0,
            seconds_per_unit: duration / length as f64,
        }
    }

    pub fn to_seconds(&self, grid: f64) -> f64 {
        (self.offset + grid) * self.seconds_per_unit
    }
}

fn square_side<T: Real>(op: &'static str, map: &Tensor<T>) -> Result<usize> {
    if map.rank() != 2 || map.dim(0) != map.dim(1) {
        return Err(Error::shape(op, format!("expected an L×L map, got {:?}", map.shape())));
    }
    Ok(map.dim(0))
}

/// Averages every row of the start map and every column of the end map.
pub fn fuse_boundary_maps<T: Real>(start: &Tensor<T>, end: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = square_side("fuse_boundary_maps", start)?;
    if end.shape() != start.shape() {
        return Err(Error::shape("fuse_boundary_maps", format!("start {:?} vs end {:?}", start.shape(), end.shape())));
    }
    let n = l as f64;
    let mut fused_start = vec![0.0; l];
    let mut fused_end = vec![0.0; l];
    for (i, fs) in fused_start.iter_mut().enumerate() {
        for (j, fe) in fused_end.iter_mut().enumerate() {
            *fs += start.get2(i, j).as_f64();
            *fe += end.get2(i, j).as_f64();
        }
    }
    fused_start.iter_mut().chain(fused_end.iter_mut()).for_each(|v| *v /= n);
    Ok((fused_start, fused_end))
}

/// `P[i][j] = P^c[i][j] · start[i] · end[j]`, row-major.
pub fn fuse_confidence<T: Real>(completeness: &Tensor<T>, start: &[f64], end: &[f64]) -> Result<Vec<f64>> {
    let l = square_side("fuse_confidence", completeness)?;
    if start.len() != l || end.len() != l {
        return Err(Error::shape(
            "fuse_confidence",
            format!("{l}×{l} map with {} start and {} end probabilities", start.len(), end.len()),
        ));
    }
    let mut out = Vec::with_capacity(l * l);
    for (i, &s) in start.iter().enumerate() {
        for (j, &e) in end.iter().enumerate() {
            out.push(completeness.get2(i, j).as_f64() * s * e);
        }
    }
    Ok(out)
}

/// Score maps of one network output, ready for candidate enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMaps {
    pub length: usize,
    pub confidence: Vec<f64>,
    pub completeness: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl FusedMaps {
    pub fn new<T: Real>(completeness: &Tensor<T>, start: &Tensor<T>, end: &Tensor<T>) -> Result<Self> {
        let (fs, fe) = fuse_boundary_maps(start, end)?;
        let confidence = fuse_confidence(completeness, &fs, &fe)?;
        if completeness.shape() != start.shape() {
            return Err(Error::shape(
                "fuse",
                format!("completeness {:?} vs boundary {:?}", completeness.shape(), start.shape()),
            ));
        }
        Ok(Self {
            length: fs.len(),
            confidence,
            completeness: completeness.data().iter().map(|v| v.as_f64()).collect(),
            start: fs,
            end: fe,
        })
    }
}

/// Every `(i, j)` with `i < j`, ranked by [`rank_order`].
pub fn dense_candidates(maps: &FusedMaps, grid: GridMapping) -> Vec<Proposal> {
    let l = maps.length;
    let mut out = Vec::with_capacity(l * l.saturating_sub(1) / 2);
    for i in 0..l {
        for j in i + 1..l {
            out.push(Proposal {
                start: i,
                end: j,
                start_s: grid.to_seconds(i as f64),
                end_s: grid.to_seconds(j as f64),
                score: maps.confidence[i * l + j],
                completeness: maps.completeness[i * l + j],
                start_prob: maps.start[i],
                end_prob: maps.end[j],
            });
        }
    }
    out.sort_by(rank_order);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftNmsConfig {
    /// Overlap above which a proposal is decayed.
    pub theta: f64,
    /// Gaussian decay width.
    pub eps: f64,
    /// When false every pair is decayed regardless of `theta`.
    pub gated: bool,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            theta: 0.8,
            eps: 0.75,
            gated: true,
        }
    }
}

impl SoftNmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Invalid(format!("soft-nms theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Invalid(format!("soft-nms eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Gaussian Soft-NMS. Returns every proposal in selection order, which is
/// non-increasing in the final score; endpoints are never modified.
pub fn soft_nms(proposals: &[Proposal], config: &SoftNmsConfig) -> Result<Vec<Proposal>> {
    config.validate()?;
    let mut remaining: Vec<Proposal> = proposals.to_vec();
    remaining.sort_by(rank_order);
    let mut kept = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best_idx = (1..remaining.len()).fold(0, |best, k| {
            if rank_order(&remaining[k], &remaining[best]) == Ordering::Less {
                k
            } else {
                best
            }
        });
        let best = remaining.remove(best_idx);
        let anchor = best.interval();
        for p in remaining.iter_mut() {
            let iou = interval_iou(anchor, p.interval())?;
            if !config.gated || iou > config.theta {
                p.score *= (-iou * iou / config.eps).exp();
            }
        }
        kept.push(best);
    }
    Ok(kept)
}

/// Drops proposals scoring below `min_score` and keeps the `max_count` best.
pub fn retrieve(proposals: &[Proposal], max_count: usize, min_score: f64) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = proposals.iter().filter(|p| p.score >= min_score).copied().collect();
    out.sort_by(rank_order);
    out.truncate(max_count);
    out
}

/// Final retrieval settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub max_count: usize,
    pub min_score: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            max_count: 100,
            min_score: 0.0,
        }
    }
}

/// Soft-NMS over the merged candidates of one video followed by retrieval.
pub fn finalize(candidates: Vec<Proposal>, nms: &SoftNmsConfig, retrieval: &RetrievalConfig) -> Result<Vec<Proposal>> {
    let rescored = soft_nms(&candidates, nms)?;
    Ok(retrieve(&rescored, retrieval.max_count, retrieval.min_score))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(s: f64, e: f64, score: f64) -> Proposal {
        Proposal {
            start: 0,
            end: 1,
            start_s: s,
            end_s: e,
            score,
            completeness: score,
            start_prob: 1.0,
            end_prob: 1.0,
        }
    }

    fn map(l: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[l, l], |k| f(k / l, k % l))
    }

    #[test]
    fn boundary_fusion() {
        let (s, e) = fuse_boundary_maps(&map(3, |_, _| 0.3), &map(3, |_, _| 0.3)).unwrap();
        assert!(s.iter().chain(&e).all(|&v| (v - 0.3).abs() < 1e-15));
        let ps = map(4, |i, j| if i == 1 { [0.0, 1.0, 0.0, 1.0][j] } else { 0.2 });
        let (s, _) = fuse_boundary_maps(&ps, &ps).unwrap();
        assert_eq!(s[1], 0.5);
        let pe = map(4, |i, j| (i * 4 + j) as f64 / 16.0);
        let (_, e) = fuse_boundary_maps(&pe, &pe).unwrap();
        for (j, &ej) in e.iter().enumerate() {
            let col = (0..4).map(|i| pe.get2(i, j)).sum::<f64>() / 4.0;
            assert_eq!(ej, col);
        }
    }

    #[test]
    fn confidence_fusion() {
        let c = map(2, |_, _| 0.5);
        let p = fuse_confidence(&c, &[0.8, 0.8], &[0.9, 0.9]).unwrap();
        assert!((p[1] - 0.36).abs() < 1e-15);
        assert_eq!(fuse_confidence(&map(2, |_, _| 1.0), &[1.0; 2], &[1.0; 2]).unwrap(), vec![1.0; 4]);
        assert!(fuse_confidence(&c, &[0.0, 1.0], &[1.0; 2]).unwrap()[..2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn candidates_count_and_order() {
        let l = 3;
        let c = map(l, |i, j| if i < j { 0.5 } else { 0.0 });
        let fused = FusedMaps::new(&c, &map(l, |_, _| 1.0), &map(l, |_, _| 1.0)).unwrap();
        let cands = dense_candidates(&fused, GridMapping::rescaled(l, 3.0));
        let cells: Vec<(usize, usize)> = cands.iter().map(|p| (p.start, p.end)).collect();
        // equal scores: earlier start first, then shorter
        assert_eq!(cells, vec![(0, 1), (0, 2), (1, 2)]);
        let l = 100;
        let c = map(l, |i, j| ((i * 7 + j * 13) % 17) as f64 / 17.0);
        let fused = FusedMaps::new(&c, &map(l, |_, _| 0.9), &map(l, |_, _| 0.8)).unwrap();
        let cands = dense_candidates(&fused, GridMapping::rescaled(l, 50.0));
        assert_eq!(cands.len(), 4950);
        assert!(cands.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn identical_pair_is_decayed() {
        let out = soft_nms(&[prop(1.0, 5.0, 0.8), prop(1.0, 5.0, 0.9)], &SoftNmsConfig::default()).unwrap();
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-1.0f64 / 0.75).exp()).abs() < 1e-12);
    }

    #[test]
    fn single_and_disjoint_are_unchanged() {
        let cfg = SoftNmsConfig::default();
        assert_eq!(soft_nms(&[prop(0.0, 1.0, 0.4)], &cfg).unwrap()[0].score, 0.4);
        let out = soft_nms(&[prop(0.0, 1.0, 0.4), prop(2.0, 3.0, 0.7), prop(4.0, 9.0, 0.1)], &cfg).unwrap();
        let scores: Vec<f64> = out.iter().map(|p| p.score).collect();
        assert_eq!(scores, vec![0.7, 0.4, 0.1]);
    }

    #[test]
    fn gate_controls_moderate_overlaps() {
        // IoU 0.5 sits below theta 0.8
        let pair = [prop(0.0, 2.0, 0.9), prop(1.0, 3.0, 0.6)];
        let gated = soft_nms(&pair, &SoftNmsConfig::default()).unwrap();
        assert_eq!(gated[1].score, 0.6);
        let ungated = soft_nms(&pair, &SoftNmsConfig { gated: false, ..Default::default() }).unwrap();
        let iou = 1.0 / 3.0;
        assert!((ungated[1].score - 0.6 * (-iou * iou / 0.75f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn tiny_eps_approaches_hard_nms() {
        let cfg = SoftNmsConfig { theta: 0.5, eps: 1e-4, gated: true };
        let out = soft_nms(&[prop(0.0, 10.0, 0.9), prop(0.0, 9.0, 0.8), prop(20.0, 30.0, 0.5)], &cfg).unwrap();
        assert_eq!(out[1].score, 0.5);
        assert!(out[2].score < 1e-100);
    }

    #[test]
    fn retrieval() {
        let ps: Vec<Proposal> = (0..10).map(|k| prop(k as f64, k as f64 + 1.0, k as f64 / 10.0)).collect();
        let all = retrieve(&ps, 100, 0.0);
        assert_eq!(all.len(), 10);
        assert!(retrieve(&ps, 100, 1.0).is_empty());
        let top = retrieve(&ps, 3, 0.0);
        assert_eq!(top.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.9, 0.8, 0.7]);
    }
}
