//! Training targets on the temporal grid.
//!
//! All computations are in grid units, where adjacent temporal locations are
//! one unit apart. A location `i` owns the region `[i - 0.5, i + 0.5]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Overlap threshold above which a location is labelled positive.
pub const OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn intersection(&self, other: &Interval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }
}

/// Intersection over union of two intervals.
pub fn interval_iou(a: Interval, b: Interval) -> Result<f64> {
    if a.len() < 0.0 || b.len() < 0.0 {
        return Err(Error::Invalid(format!("inverted interval in IoU: {a:?}, {b:?}")));
    }
    let inter = a.intersection(&b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        return Err(Error::Invalid("IoU of intervals with zero-length union".into()));
    }
    Ok(inter / union)
}

/// Intersection divided by the length of `region`.
pub fn interval_ior(region: Interval, gt: Interval) -> Result<f64> {
    if region.len() <= 0.0 {
        return Err(Error::Invalid(format!("IoR over zero-length region {region:?}")));
    }
    Ok(region.intersection(&gt) / region.len())
}

/// Maps seconds onto a grid of `length` locations spanning `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalGrid {
    pub length: usize,
    pub duration: f64,
}

impl TemporalGrid {
    pub fn new(length: usize, duration: f64) -> Result<Self> {
        if length == 0 || !(duration.is_finite() && duration > 0.0) {
            return Err(Error::Invalid(format!(
                "grid needs L >= 1 and a positive duration, got L={length}, duration={duration}"
            )));
        }
        Ok(Self { length, duration })
    }

    pub fn to_grid(&self, seconds: f64) -> f64 {
        seconds / self.duration * self.length as f64
    }

    pub fn to_seconds(&self, grid: f64) -> f64 {
        grid * self.duration / self.length as f64
    }
}

/// A ground-truth action in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub start: f64,
    pub end: f64,
}

impl GtInstance {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start >= end {
            return Err(Error::Invalid(format!("ground truth needs start < end, got ({start}, {end})")));
        }
        Ok(Self { start, end })
    }

    pub fn action_region(&self) -> Interval {
        Interval::new(self.start, self.end)
    }

    pub fn start_region(&self) -> Interval {
        Interval::new(self.start - 1.0, self.start + 1.0)
    }

    pub fn end_region(&self) -> Interval {
        Interval::new(self.end - 1.0, self.end + 1.0)
    }
}

/// Converts `(start, end)` annotations in seconds to grid instances.
pub fn to_grid(annotations: &[(f64, f64)], duration: f64, length: usize) -> Result<Vec<GtInstance>> {
    let grid = TemporalGrid::new(length, duration)?;
    annotations
        .iter()
        .map(|&(s, e)| {
            if !(0.0 <= s && s < e && e <= duration) {
                return Err(Error::Invalid(format!(
                    "annotation ({s}, {e}) outside 0 <= start < end <= {duration}"
                )));
            }
            GtInstance::new(grid.to_grid(s), grid.to_grid(e))
        })
        .collect()
}

fn location_region(i: usize) -> Interval {
    Interval::new(i as f64 - 0.5, i as f64 + 0.5)
}

fn max_ior(region: Interval, targets: impl Iterator<Item = Interval>) -> f64 {
    targets
        .map(|t| region.intersection(&t) / region.len())
        .fold(0.0, f64::max)
}

/// Per-location actionness targets.
pub fn actionness_labels(gts: &[GtInstance], length: usize) -> Vec<bool> {
    (0..length)
        .map(|i| max_ior(location_region(i), gts.iter().map(GtInstance::action_region)) > OVERLAP_THRESHOLD)
        .collect()
}

/// Per-location start and end indicators; the maps broadcast these along
/// the free coordinate.
pub fn boundary_indicators(gts: &[GtInstance], length: usize) -> (Vec<bool>, Vec<bool>) {
    let starts = (0..length)
        .map(|i| max_ior(location_region(i), gts.iter().map(GtInstance::start_region)) > OVERLAP_THRESHOLD)
        .collect();
    let ends = (0..length)
        .map(|j| max_ior(location_region(j), gts.iter().map(GtInstance::end_region)) > OVERLAP_THRESHOLD)
        .collect();
    (starts, ends)
}

/// Row-major `L×L` start and end label maps: `g^s[i][j]` depends on `i` only,
/// `g^e[i][j]` on `j` only.
pub fn boundary_label_maps(gts: &[GtInstance], length: usize) -> (Vec<bool>, Vec<bool>) {
    let (starts, ends) = boundary_indicators(gts, length);
    let mut gs = vec![false; length * length];
    let mut ge = vec![false; length * length];
    for i in 0..length {
        for j in 0..length {
            gs[i * length + j] = starts[i];
            ge[i * length + j] = ends[j];
        }
    }
    (gs, ge)
}

/// Row-major `L×L` map of the best IoU between `[i, j]` and any ground truth,
/// zero for `i >= j`.
pub fn completeness_label_map(gts: &[GtInstance], length: usize) -> Vec<f64> {
    let mut gc = vec![0.0; length * length];
    for i in 0..length {
        for j in i + 1..length {
            let cell = Interval::new(i as f64, j as f64);
            gc[i * length + j] = gts
                .iter()
                .map(|g| {
                    let gt = g.action_region();
                    let inter = cell.intersection(&gt);
                    inter / (cell.len() + gt.len() - inter)
                })
                .fold(0.0, f64::max);
        }
    }
    gc
}

/// All targets of one training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub length: usize,
    pub actionness: Vec<bool>,
    pub start: Vec<bool>,
    pub end: Vec<bool>,
    pub completeness: Vec<f64>,
}

impl LabelSet {
    pub fn compute(gts: &[GtInstance], length: usize) -> Self {
        let (start, end) = boundary_label_maps(gts, length);
        Self {
            length,
            actionness: actionness_labels(gts, length),
            start,
            end,
            completeness: completeness_label_map(gts, length),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(s: f64, e: f64) -> GtInstance {
        GtInstance::new(s, e).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        let a = Interval::new(0.0, 2.0);
        assert_eq!(interval_iou(a, a).unwrap(), 1.0);
        assert_eq!(interval_iou(a, Interval::new(3.0, 4.0)).unwrap(), 0.0);
        assert_eq!(interval_iou(a, Interval::new(1.0, 3.0)).unwrap(), 1.0 / 3.0);
        assert!(interval_iou(Interval::new(1.0, 1.0), Interval::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn ior_fixtures() {
        assert_eq!(interval_ior(Interval::new(5.0, 6.0), Interval::new(4.0, 9.0)).unwrap(), 1.0);
        assert_eq!(interval_ior(Interval::new(0.0, 1.0), Interval::new(4.0, 9.0)).unwrap(), 0.0);
        assert_eq!(interval_ior(Interval::new(4.0, 6.0), Interval::new(5.0, 9.0)).unwrap(), 0.5);
        assert!(interval_ior(Interval::new(2.0, 2.0), Interval::new(0.0, 9.0)).is_err());
    }

    #[test]
    fn actionness_fixtures() {
        let labels = actionness_labels(&[gt(2.0, 8.0)], 10);
        assert!(labels[5]);
        assert!(!labels[0] && !labels[9]);
        // location 2 covers [1.5, 2.5]: IoR exactly 0.5, not above threshold
        assert!(!labels[2]);
        assert!(labels[3] && labels[7]);
        assert!(!labels[8]);
        assert!(actionness_labels(&[], 10).iter().all(|&v| !v));
    }

    #[test]
    fn integer_start_marks_only_its_own_location() {
        // start region [3, 5]; locations 3 and 5 overlap it by exactly half
        let (starts, _) = boundary_indicators(&[gt(4.0, 9.0)], 12);
        let positives: Vec<usize> = (0..12).filter(|&i| starts[i]).collect();
        assert_eq!(positives, vec![4]);
        let (starts, _) = boundary_indicators(&[gt(4.3, 9.0)], 12);
        let positives: Vec<usize> = (0..12).filter(|&i| starts[i]).collect();
        assert_eq!(positives, vec![4, 5]);
    }

    #[test]
    fn boundary_maps_are_axis_constant() {
        let l = 9;
        let (gs, ge) = boundary_label_maps(&[gt(1.2, 4.0), gt(5.5, 8.0)], l);
        for i in 0..l {
            for j in 0..l {
                assert_eq!(gs[i * l + j], gs[i * l]);
                assert_eq!(ge[i * l + j], ge[j]);
            }
        }
        let (gs, ge) = boundary_label_maps(&[], l);
        assert!(gs.iter().chain(&ge).all(|&v| !v));
    }

    #[test]
    fn completeness_fixtures() {
        let l = 10;
        let gc = completeness_label_map(&[gt(2.0, 8.0)], l);
        assert_eq!(gc[2 * l + 8], 1.0);
        assert_eq!(gc[2 * l + 5], 0.5);
        for i in 0..l {
            for j in 0..=i {
                assert_eq!(gc[i * l + j], 0.0);
            }
        }
        assert!(completeness_label_map(&[], l).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn to_grid_rescales_and_validates() {
        let g = to_grid(&[(20.0, 60.0)], 200.0, 100).unwrap();
        assert_eq!(g, vec![gt(10.0, 30.0)]);
        let g = to_grid(&[(12.5, 40.0)], 100.0, 100).unwrap();
        assert_eq!(g, vec![gt(12.5, 40.0)]);
        assert!(to_grid(&[(30.0, 10.0)], 100.0, 100).is_err());
        assert!(to_grid(&[(30.0, 110.0)], 100.0, 100).is_err());
        let grid = TemporalGrid::new(100, 200.0).unwrap();
        for s in [0.0, 13.0, 77.0, 200.0] {
            assert_eq!(grid.to_seconds(grid.to_grid(s)), s);
        }
    }

    #[test]
    fn permuting_gts_changes_nothing() {
        let a = [gt(1.0, 4.5), gt(6.2, 9.0), gt(3.0, 7.0)];
        let b = [a[2], a[0], a[1]];
        assert_eq!(LabelSet::compute(&a, 12), LabelSet::compute(&b, 12));
    }
}
