//! Training objective: balanced binary losses for actionness and boundaries,
//! masked smooth-L1 regression for completeness, and their weighted sum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Weight of the actionness term in the total loss.
pub const ACTIONNESS_WEIGHT: f64 = 2.0;

/// Completeness IoU bins `[0, 0.2)`, `[0.2, 0.6)`, `[0.6, 1]` and their sampling ratio.
pub const IOU_BIN_EDGES: [f64; 2] = [0.2, 0.6];
pub const IOU_BIN_RATIO: [usize; 3] = [2, 1, 1];

#[inline]
fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::prob_eps();
    p.max(eps).min(T::one() - eps)
}

pub(crate) fn weighted_bce_value<T: Real>(p: &[T], labels: &[bool], coef: &[T]) -> T {
    let mut acc = T::zero();
    for ((&p, &g), &c) in p.iter().zip(labels).zip(coef) {
        if c == T::zero() {
            continue;
        }
        let q = clamp_prob(p);
        let term = if g { q.ln() } else { (T::one() - q).ln() };
        acc = acc - c * term;
    }
    acc
}

pub(crate) fn weighted_bce_grad<T: Real>(p: &[T], labels: &[bool], coef: &[T], upstream: T) -> Vec<T> {
    let eps = T::prob_eps();
    p.iter()
        .zip(labels)
        .zip(coef)
        .map(|((&p, &g), &c)| {
            if c == T::zero() || p < eps || p > T::one() - eps {
                T::zero()
            } else if g {
                -upstream * c / p
            } else {
                upstream * c / (T::one() - p)
            }
        })
        .collect()
}

#[inline]
pub fn smooth_l1<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

#[inline]
fn smooth_l1_derivative<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

pub(crate) fn weighted_smooth_l1_value<T: Real>(x: &[T], target: &[T], coef: &[T]) -> T {
    x.iter()
        .zip(target)
        .zip(coef)
        .filter(|(_, &c)| c != T::zero())
        .map(|((&x, &t), &c)| c * smooth_l1(x - t))
        .sum()
}

pub(crate) fn weighted_smooth_l1_grad<T: Real>(x: &[T], target: &[T], coef: &[T], upstream: T) -> Vec<T> {
    x.iter()
        .zip(target)
        .zip(coef)
        .map(|((&x, &t), &c)| upstream * c * smooth_l1_derivative(x - t))
        .collect()
}

/// Per-entry weights of a class-balanced binary loss.
#[derive(Debug, Clone)]
pub struct BalancedWeights<T> {
    pub coef: Vec<T>,
    /// Positive fraction `r` among the masked entries.
    pub positive_fraction: f64,
    /// Set when all masked entries share one label; the loss then falls
    /// back to the unweighted mean.
    pub degenerate: bool,
}

/// `α⁺ = 0.5/r` on positives and `α⁻ = 0.5/(1-r)` on negatives, each divided
/// by the number of masked entries. Entries outside `mask` get weight zero.
pub fn balanced_weights<T: Real>(labels: &[bool], mask: Option<&[bool]>) -> Result<BalancedWeights<T>> {
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(Error::shape("balanced_binary_loss", format!("{} labels vs {} mask entries", labels.len(), m.len())));
        }
    }
    let inside = |i: usize| mask.is_none_or(|m| m[i]);
    let total = (0..labels.len()).filter(|&i| inside(i)).count();
    if total == 0 {
        return Err(Error::Invalid("balanced binary loss over an empty mask".into()));
    }
    let positives = (0..labels.len()).filter(|&i| inside(i) && labels[i]).count();
    let r = positives as f64 / total as f64;
    let degenerate = positives == 0 || positives == total;
    let (pos_w, neg_w) = if degenerate {
        (1.0, 1.0)
    } else {
        (0.5 / r, 0.5 / (1.0 - r))
    };
    let n = total as f64;
    let coef = labels
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            if !inside(i) {
                T::zero()
            } else if g {
                T::lit(pos_w / n)
            } else {
                T::lit(neg_w / n)
            }
        })
        .collect();
    Ok(BalancedWeights {
        coef,
        positive_fraction: r,
        degenerate,
    })
}

/// Class-balanced binary log loss. Returns the value and whether the
/// unweighted fallback was used.
pub fn balanced_binary_loss<T: Real>(p: &[T], labels: &[bool], mask: Option<&[bool]>) -> Result<(T, bool)> {
    if p.len() != labels.len() {
        return Err(Error::shape("balanced_binary_loss", format!("{} probabilities vs {} labels", p.len(), labels.len())));
    }
    let w = balanced_weights::<T>(labels, mask)?;
    Ok((weighted_bce_value(p, labels, &w.coef), w.degenerate))
}

/// Mean of the balanced loss over the three actionness heads.
pub fn actionness_loss<T: Real>(heads: [&[T]; 3], labels: &[bool]) -> Result<T> {
    let mut acc = T::zero();
    for h in heads {
        acc = acc + balanced_binary_loss(h, labels, None)?.0;
    }
    Ok(acc / T::lit(3.0))
}

/// Start and end losses, each balanced over its full `L×L` map.
pub fn boundary_loss<T: Real>(
    start: &[T],
    end: &[T],
    start_labels: &[bool],
    end_labels: &[bool],
) -> Result<(T, T)> {
    Ok((
        balanced_binary_loss(start, start_labels, None)?.0,
        balanced_binary_loss(end, end_labels, None)?.0,
    ))
}

/// Masked mean of `smoothL1(p - g)`.
pub fn completeness_loss<T: Real>(pred: &[T], target: &[f64], mask: &[bool]) -> Result<T> {
    let coef = completeness_weights::<T>(mask)?;
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::shape("completeness_loss", "prediction, target and mask lengths differ"));
    }
    let target: Vec<T> = target.iter().map(|&v| T::lit(v)).collect();
    Ok(weighted_smooth_l1_value(pred, &target, &coef))
}

fn completeness_weights<T: Real>(mask: &[bool]) -> Result<Vec<T>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Invalid("completeness loss over an empty mask".into()));
    }
    let w = T::one() / T::from_usize_lossy(n);
    Ok(mask.iter().map(|&m| if m { w } else { T::zero() }).collect())
}

/// IoU-stratified subset of valid proposals used by the regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessMask {
    /// Row-major `L×L` selection.
    pub mask: Vec<bool>,
    /// Available valid proposals per IoU bin.
    pub available: [usize; 3],
    /// Selected proposals per IoU bin.
    pub selected: [usize; 3],
    /// A bin was empty, so the 2:1:1 ratio could not be met.
    pub degenerate: bool,
}

pub fn iou_bin(iou: f64) -> usize {
    if iou < IOU_BIN_EDGES[0] {
        0
    } else if iou < IOU_BIN_EDGES[1] {
        1
    } else {
        2
    }
}

/// Samples valid `(i < j)` cells so that the counts per IoU bin follow
/// 2:1:1, sized by the scarcest bin. Empty bins are skipped and flagged.
pub fn sample_completeness_mask<R: Rng + ?Sized>(
    completeness: &[f64],
    length: usize,
    rng: &mut R,
) -> Result<CompletenessMask> {
    if completeness.len() != length * length {
        return Err(Error::shape("sample_completeness_mask", format!("{} values for L={length}", completeness.len())));
    }
    let mut bins: [Vec<usize>; 3] = Default::default();
    for i in 0..length {
        for j in i + 1..length {
            let idx = i * length + j;
            bins[iou_bin(completeness[idx])].push(idx);
        }
    }
    let available = [bins[0].len(), bins[1].len(), bins[2].len()];
    let degenerate = available.contains(&0);
    let unit = (0..3)
        .filter(|&b| available[b] > 0)
        .map(|b| available[b] / IOU_BIN_RATIO[b])
        .min()
        .unwrap_or(0)
        .max(1);
    let mut mask = vec![false; length * length];
    let mut selected = [0usize; 3];
    for (b, bin) in bins.iter_mut().enumerate() {
        let take = (IOU_BIN_RATIO[b] * unit).min(bin.len());
        let (chosen, _) = bin.partial_shuffle(rng, take);
        for &idx in chosen.iter() {
            mask[idx] = true;
        }
        selected[b] = take;
    }
    Ok(CompletenessMask {
        mask,
        available,
        selected,
        degenerate,
    })
}

/// Values of the loss terms of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub actionness: f64,
    pub start: f64,
    pub end: f64,
    pub completeness: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(actionness: f64, start: f64, end: f64, completeness: f64) -> Self {
        Self {
            actionness,
            start,
            end,
            completeness,
            total: ACTIONNESS_WEIGHT * actionness + start + end + completeness,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.actionness, self.start, self.end, self.completeness, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &Self, weight: f64) {
        self.actionness += weight * other.actionness;
        self.start += weight * other.start;
        self.end += weight * other.end;
        self.completeness += weight * other.completeness;
        self.total += weight * other.total;
    }

    pub const CSV_HEADER: &'static str = "epoch,loss_actionness,loss_start,loss_end,loss_completeness,loss_total";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{:e},{:e},{:e},{:e},{:e}",
            self.actionness, self.start, self.end, self.completeness, self.total
        )
    }
}

/// Tape handles of the recorded loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub actionness: Var,
    pub start: Var,
    pub end: Var,
    pub completeness: Var,
    pub total: Var,
    /// A balanced loss fell back to unweighted because a target was single-class.
    pub flagged: bool,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<'_, T>) -> LossBreakdown {
        let v = |var: Var| tape.value(var).item().as_f64();
        LossBreakdown {
            actionness: v(self.actionness),
            start: v(self.start),
            end: v(self.end),
            completeness: v(self.completeness),
            total: v(self.total),
        }
    }
}

/// Records a class-balanced binary loss on the tape.
pub fn record_balanced_bce<T: Real>(
    tape: &mut Tape<'_, T>,
    p: Var,
    labels: &[bool],
    mask: Option<&[bool]>,
) -> Result<(Var, bool)> {
    let w = balanced_weights::<T>(labels, mask)?;
    let v = tape.weighted_bce(p, labels.to_vec(), w.coef)?;
    Ok((v, w.degenerate))
}

/// Records the masked completeness regression loss on the tape.
pub fn record_completeness<T: Real>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let coef = completeness_weights::<T>(mask)?;
    tape.smooth_l1(pred, target.iter().map(|&v| T::lit(v)).collect(), coef)
}

/// Everything the combined objective is computed from.
pub struct LossInputs<'l> {
    pub actionness_heads: [Var; 3],
    pub start_map: Var,
    pub end_map: Var,
    pub completeness_map: Var,
    pub actionness_labels: &'l [bool],
    pub start_labels: &'l [bool],
    pub end_labels: &'l [bool],
    pub completeness_labels: &'l [f64],
    pub completeness_mask: &'l [bool],
    /// Weight of the actionness term, normally [`ACTIONNESS_WEIGHT`].
    pub actionness_weight: f64,
}

/// Records all four terms and `total = λ·L_a + L_s + L_e + L_c`.
pub fn record_total_loss<T: Real>(tape: &mut Tape<'_, T>, inputs: &LossInputs<'_>) -> Result<LossVars> {
    let mut flagged = false;
    let mut heads = Vec::with_capacity(3);
    for &h in &inputs.actionness_heads {
        let (v, f) = record_balanced_bce(tape, h, inputs.actionness_labels, None)?;
        flagged |= f;
        heads.push(v);
    }
    let third = T::one() / T::lit(3.0);
    let actionness = tape.weighted_sum(&[(heads[0], third), (heads[1], third), (heads[2], third)])?;
    let (start, fs) = record_balanced_bce(tape, inputs.start_map, inputs.start_labels, None)?;
    let (end, fe) = record_balanced_bce(tape, inputs.end_map, inputs.end_labels, None)?;
    flagged |= fs | fe;
    let completeness = record_completeness(
        tape,
        inputs.completeness_map,
        inputs.completeness_labels,
        inputs.completeness_mask,
    )?;
    let total = tape.weighted_sum(&[
        (actionness, T::lit(inputs.actionness_weight)),
        (start, T::one()),
        (end, T::one()),
        (completeness, T::one()),
    ])?;
    for v in [actionness, start, end, completeness, total] {
        if !tape.value(v).item().is_finite() {
            return Err(Error::NonFinite { stage: "loss".into() });
        }
    }
    Ok(LossVars {
        actionness,
        start,
        end,
        completeness,
        total,
        flagged,
    })
}

/// Convenience for tests and tools: total loss value of detached tensors.
pub fn total_loss_value<T: Real>(
    heads: [&Tensor<T>; 3],
    start: &Tensor<T>,
    end: &Tensor<T>,
    completeness: &Tensor<T>,
    labels: &crate::labels::LabelSet,
    mask: &[bool],
) -> Result<LossBreakdown> {
    let la = actionness_loss([heads[0].data(), heads[1].data(), heads[2].data()], &labels.actionness)?;
    let (ls, le) = boundary_loss(start.data(), end.data(), &labels.start, &labels.end)?;
    let lc = completeness_loss(completeness.data(), &labels.completeness, mask)?;
    Ok(LossBreakdown::from_components(la.as_f64(), ls.as_f64(), le.as_f64(), lc.as_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_probability_gives_ln2_for_any_mix() {
        for labels in [
            vec![true, false],
            vec![true, false, false, false, false],
            vec![true, true, true, false],
        ] {
            let p = vec![0.5f64; labels.len()];
            let (v, flagged) = balanced_binary_loss(&p, &labels, None).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
            assert!(!flagged);
        }
    }

    #[test]
    fn perfect_prediction_tends_to_zero() {
        let labels = vec![true, false, true, false];
        let p: Vec<f64> = labels.iter().map(|&g| if g { 1.0 - 1e-9 } else { 1e-9 }).collect();
        assert!(balanced_binary_loss(&p, &labels, None).unwrap().0 < 1e-8);
    }

    #[test]
    fn single_class_falls_back_and_flags() {
        let (v, flagged) = balanced_binary_loss(&[0.25f64, 0.25], &[false, false], None).unwrap();
        assert!(flagged);
        assert!((v - (-(0.75f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn actionness_fixture() {
        // labels 1,0,0,1 -> r = 0.5, α⁺ = α⁻ = 1; loss = -mean(log terms)
        let labels = [true, false, false, true];
        let p = [0.9f64, 0.2, 0.4, 0.7];
        let expected = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.7f64.ln()) / 4.0;
        let single = balanced_binary_loss(&p, &labels, None).unwrap().0;
        assert!((single - expected).abs() < 1e-12);
        let all = actionness_loss([&p, &p, &p], &labels).unwrap();
        assert!((all - single).abs() < 1e-15);

        let q = [0.6f64, 0.3, 0.1, 0.55];
        let r = [0.5f64, 0.5, 0.5, 0.5];
        let a = actionness_loss([&p, &q, &r], &labels).unwrap();
        let b = actionness_loss([&r, &p, &q], &labels).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn imbalanced_fixture() {
        // one positive of four: α⁺ = 2, α⁻ = 2/3
        let labels = [true, false, false, false];
        let p = [0.8f64, 0.1, 0.3, 0.5];
        let expected = -(2.0 * 0.8f64.ln() + (2.0 / 3.0) * (0.9f64.ln() + 0.7f64.ln() + 0.5f64.ln())) / 4.0;
        let v = balanced_binary_loss(&p, &labels, None).unwrap().0;
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn boundary_losses_swap_with_inputs() {
        let ps = [0.2f64, 0.7, 0.4, 0.9];
        let pe = [0.6f64, 0.3, 0.8, 0.1];
        let gs = [false, true, false, true];
        let ge = [true, false, false, false];
        let (ls, le) = boundary_loss(&ps, &pe, &gs, &ge).unwrap();
        let (le2, ls2) = boundary_loss(&pe, &ps, &ge, &gs).unwrap();
        assert_eq!((ls, le), (ls2, le2));
    }

    #[test]
    fn smooth_l1_fixtures() {
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
        let v = completeness_loss(&[0.7f64, 0.1], &[0.2, 0.0], &[true, false]).unwrap();
        assert!((v - 0.125).abs() < 1e-15);
        assert!(completeness_loss(&[0.7f64], &[0.2], &[false]).is_err());
    }

    #[test]
    fn completeness_ignores_unmasked_predictions() {
        let mask = [true, false, true];
        let g = [0.5, 0.5, 0.1];
        let a = completeness_loss(&[0.2f64, 0.9, 0.3], &g, &mask).unwrap();
        let b = completeness_loss(&[0.2f64, -40.0, 0.3], &g, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = LossBreakdown::from_components(1.0, 1.0, 1.0, 1.0);
        assert_eq!(b.total, 5.0);
        assert_eq!(LossBreakdown::from_components(0.0, 0.0, 0.0, 0.0).total, 0.0);
    }

    fn bins_fixture(counts: [usize; 3]) -> (Vec<f64>, usize) {
        let need = counts.iter().sum::<usize>();
        let mut l = 2;
        while l * (l - 1) / 2 < need {
            l += 1;
        }
        let mut g = vec![0.0; l * l];
        let mut k = 0;
        let values = [0.1, 0.4, 0.8];
        for i in 0..l {
            for j in i + 1..l {
                let bin = if k < counts[0] {
                    0
                } else if k < counts[0] + counts[1] {
                    1
                } else if k < need {
                    2
                } else {
                    0
                };
                g[i * l + j] = values[bin];
                k += 1;
            }
        }
        // pad cells land in bin 0; account for them
        (g, l)
    }

    #[test]
    fn mask_follows_two_one_one() {
        let (g, l) = bins_fixture([200, 50, 50]);
        let extra = l * (l - 1) / 2 - 300;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = sample_completeness_mask(&g, l, &mut rng).unwrap();
        assert_eq!(m.available, [200 + extra, 50, 50]);
        assert_eq!(m.selected, [100, 50, 50]);
        assert_eq!(m.mask.iter().filter(|&&v| v).count(), 200);
        assert!(!m.degenerate);
        for i in 0..l {
            for j in 0..=i {
                assert!(!m.mask[i * l + j]);
            }
        }
    }

    #[test]
    fn mask_degenerate_and_deterministic() {
        let l = 10;
        let g = vec![0.0; l * l];
        let m = sample_completeness_mask(&g, l, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.selected[1] + m.selected[2], 0);
        assert!(m.selected[0] > 0);

        let (g, l) = bins_fixture([60, 20, 7]);
        let a = sample_completeness_mask(&g, l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_completeness_mask(&g, l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected, [14, 7, 7]);
    }
}
