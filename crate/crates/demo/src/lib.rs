//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each operation has a plain Rust form returning a JSON value (tested
//! natively) and a `#[wasm_bindgen]` wrapper returning the JSON as a string.

use dbg_core::labels::{GtInstance, LabelSet};
use dbg_core::pfg::{sample_plan, SamplingConfig};
use dbg_core::postprocess::{dense_candidates, retrieve, soft_nms, FusedMaps, GridMapping, Proposal, SoftNmsConfig};
use dbg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub const MAX_LENGTH: usize = 200;

fn check_length(length: usize) -> Result<(), String> {
    if (2..=MAX_LENGTH).contains(&length) {
        Ok(())
    } else {
        Err(format!("L must lie in 2..={MAX_LENGTH}, got {length}"))
    }
}

/// Parses ground truths written as `start-end` pairs separated by commas,
/// e.g. `"3-9, 12.5-20"`, in grid units.
pub fn parse_gts(text: &str, length: usize) -> Result<Vec<GtInstance>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (s, e) = pair
                .split_once('-')
                .ok_or_else(|| format!("{pair:?}: expected start-end"))?;
            let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{pair:?}: {e}"));
            let (s, e) = (num(s)?, num(e)?);
            if s < 0.0 || e > (length - 1) as f64 {
                return Err(format!("{pair:?} lies outside [0, {}]", length - 1));
            }
            GtInstance::new(s, e).map_err(|e| e.to_string())
        })
        .collect()
}

/// Sampling positions and interpolation weights of one proposal.
pub fn plan(t_start: usize, t_end: usize, left: usize, center: usize, right: usize, length: usize) -> Result<Value, String> {
    check_length(length)?;
    let cfg = SamplingConfig::new(left, center, right);
    let p = sample_plan(t_start, t_end, &cfg, length).map_err(|e| e.to_string())?;
    let taps: Vec<Value> = p
        .taps
        .iter()
        .enumerate()
        .map(|(n, t)| {
            let region = if n < left {
                "left"
            } else if n < left + center {
                "center"
            } else {
                "right"
            };
            json!({
                "region": region,
                "position": t.position,
                "left": t.left,
                "w_left": t.w_left,
                "w_right": t.w_right,
                "inside": t.left >= 0 && t.right() < length as isize,
            })
        })
        .collect();
    Ok(json!({ "length": length, "t_start": t_start, "t_end": t_end, "taps": taps }))
}

/// Training targets for the given ground truths.
pub fn labels(length: usize, gts: &str) -> Result<Value, String> {
    check_length(length)?;
    let gts = parse_gts(gts, length)?;
    let set = LabelSet::compute(&gts, length);
    let first_row: Vec<bool> = (0..length).map(|i| set.start[i * length]).collect();
    let first_col: Vec<bool> = set.end[..length].to_vec();
    Ok(json!({
        "length": length,
        "actionness": set.actionness,
        "start": first_row,
        "end": first_col,
        "completeness": set.completeness,
    }))
}

/// Score maps shaped like a trained network's output: the targets blurred
/// toward 0.5 and perturbed by seeded noise.
fn synthetic_maps(set: &LabelSet, noise: f64, seed: u64) -> Result<FusedMaps, String> {
    let l = set.length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |v: f64| (v + noise * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
    let soft = |b: bool| if b { 0.85 } else { 0.1 };
    let starts: Vec<f64> = (0..l).map(|i| jitter(soft(set.start[i * l]))).collect();
    let ends: Vec<f64> = (0..l).map(|j| jitter(soft(set.end[j]))).collect();
    let completeness = Tensor::from_fn(&[l, l], |k| jitter(0.05 + 0.9 * set.completeness[k]));
    let start = Tensor::from_fn(&[l, l], |k| starts[k / l]);
    let end = Tensor::from_fn(&[l, l], |k| ends[k % l]);
    FusedMaps::new(&completeness, &start, &end).map_err(|e| e.to_string())
}

fn proposal_json(p: &Proposal) -> Value {
    json!({ "start": p.start_s, "end": p.end_s, "score": p.score })
}

/// Dense candidates from synthetic score maps, before and after Soft-NMS.
#[allow(clippy::too_many_arguments)]
pub fn rank(length: usize, gts: &str, noise: f64, seed: u64, theta: f64, eps: f64, gated: bool, keep: usize) -> Result<Value, String> {
    check_length(length)?;
    if !(0.0..=1.0).contains(&noise) {
        return Err(format!("noise must lie in [0, 1], got {noise}"));
    }
    let set = LabelSet::compute(&parse_gts(gts, length)?, length);
    let maps = synthetic_maps(&set, noise, seed)?;
    let candidates = dense_candidates(&maps, GridMapping::rescaled(length, length as f64));
    let cfg = SoftNmsConfig { theta, eps, gated };
    let after = soft_nms(&candidates, &cfg).map_err(|e| e.to_string())?;
    let after = retrieve(&after, keep, 0.0);
    Ok(json!({
        "length": length,
        "confidence": maps.confidence,
        "candidates": candidates.len(),
        "before": candidates.iter().take(keep).map(proposal_json).collect::<Vec<_>>(),
        "after": after.iter().map(proposal_json).collect::<Vec<_>>(),
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = samplePlan)]
pub fn sample_plan_js(t_start: usize, t_end: usize, left: usize, center: usize, right: usize, length: usize) -> Result<String, JsError> {
    to_js(plan(t_start, t_end, left, center, right, length))
}

#[wasm_bindgen(js_name = labelMaps)]
pub fn label_maps_js(length: usize, gts: &str) -> Result<String, JsError> {
    to_js(labels(length, gts))
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen(js_name = rankProposals)]
pub fn rank_proposals_js(length: usize, gts: &str, noise: f64, seed: u32, theta: f64, eps: f64, gated: bool, keep: usize) -> Result<String, JsError> {
    to_js(rank(length, gts, noise, seed as u64, theta, eps, gated, keep))
}
