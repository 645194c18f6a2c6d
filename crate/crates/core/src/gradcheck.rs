//! Central finite-difference verification of every differentiable primitive
//! and of the full network loss.
//!
//! Each primitive is checked through a random projection: for an upstream
//! gradient `g` drawn once, `f(x) = <op(x), g>` is differentiated numerically
//! and compared against the op's backward applied to `g`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::{GtInstance, LabelSet};
use crate::losses::{self, sample_completeness_mask};
use crate::model::{DbgModel, HiddenWidths, ModelConfig, ModelParameters};
use crate::ops::{self, Activation};
use crate::pfg::{PfgPlan, SamplingConfig};
use crate::tensor::Tensor;

/// Step used by the suites.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Largest relative error a check may report.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Max relative error between `analytic` and the central differences of `f`
/// at `point` over every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, eps: f64, analytic: &Tensor<f64>) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(f, point, eps, analytic, &coords)
}

/// Like [`finite_difference_check`], restricted to `coords`.
pub fn finite_difference_check_at<F>(
    mut f: F,
    point: &Tensor<f64>,
    eps: f64,
    analytic: &Tensor<f64>,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference step must lie in [1e-7, 1e-3], got {eps}")));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("gradient {:?} vs point {:?}", analytic.shape(), point.shape()),
        ));
    }
    point.ensure_finite("finite-difference point")?;
    analytic.ensure_finite("analytic gradient")?;
    let mut x = point.clone();
    let mut worst = 0.0f64;
    for &c in coords {
        let orig = x.data()[c];
        x.data_mut()[c] = orig + eps;
        let up = f(&x)?;
        x.data_mut()[c] = orig - eps;
        let down = f(&x)?;
        x.data_mut()[c] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite { stage: "finite difference".into() });
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[c], numeric));
    }
    Ok(worst)
}

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

type Forward<'f> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'f;
type Backward<'f> = dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>> + 'f;

/// Records `op` on a fresh tape over leaves holding `inputs` and returns the
/// vector-Jacobian product with `g` for each input.
fn tape_vjp(
    inputs: &[Tensor<f64>],
    g: &Tensor<f64>,
    op: impl FnOnce(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let grads = tape.backward_from(out, g.clone())?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Checks `backward` against `<forward(inputs), g>` for every named input.
fn check_projected(
    op: &str,
    names: &[&str],
    inputs: Vec<Tensor<f64>>,
    forward: &Forward<'_>,
    backward: &Backward<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CheckReport>> {
    let out = forward(&inputs)?;
    let g = uniform(out.shape(), rng, -1.0, 1.0);
    let grads = backward(&inputs, &g)?;
    let mut reports = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let objective = |x: &Tensor<f64>| -> Result<f64> {
            let mut args = inputs.clone();
            args[k] = x.clone();
            Ok(forward(&args)?.dot(&g))
        };
        let err = finite_difference_check(objective, &inputs[k], DEFAULT_EPS, &grads[k])?;
        reports.push(CheckReport {
            name: format!("{op} d/d{name}"),
            max_rel_error: err,
            coordinates: inputs[k].len(),
        });
    }
    Ok(reports)
}

fn conv1d_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for (k, l, cin, cout) in [(3, 7, 3, 4), (1, 5, 4, 2), (3, 1, 2, 3)] {
        let inputs = vec![
            uniform(&[l, cin], rng, -1.0, 1.0),
            uniform(&[k, cin, cout], rng, -1.0, 1.0),
            uniform(&[cout], rng, -1.0, 1.0),
        ];
        out.extend(check_projected(
            &format!("conv1d k={k} L={l}"),
            &["input", "weight", "bias"],
            inputs,
            &|a| ops::conv1d(&a[0], &a[1], &a[2]),
            &|a, g| {
                let (gi, gw, gb) = ops::conv1d_backward(g, &a[0], &a[1]);
                Ok(vec![gi, gw, gb])
            },
            rng,
        )?);
    }
    Ok(out)
}

fn linear_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for shape in [vec![6, 3], vec![4, 5, 3]] {
        let inputs = vec![
            uniform(&shape, rng, -1.0, 1.0),
            uniform(&[3, 4], rng, -1.0, 1.0),
            uniform(&[4], rng, -1.0, 1.0),
        ];
        out.extend(check_projected(
            &format!("pointwise_linear {shape:?}"),
            &["input", "weight", "bias"],
            inputs,
            &|a| ops::pointwise_linear(&a[0], &a[1], &a[2]),
            &|a, g| {
                let (gi, gw, gb) = ops::pointwise_linear_backward(g, &a[0], &a[1]);
                Ok(vec![gi, gw, gb])
            },
            rng,
        )?);
    }
    let inputs = vec![
        uniform(&[4, 4, 3, 2], rng, -1.0, 1.0),
        uniform(&[3, 2, 5], rng, -1.0, 1.0),
        uniform(&[5], rng, -1.0, 1.0),
    ];
    out.extend(check_projected(
        "conv_collapse_samples",
        &["input", "weight", "bias"],
        inputs,
        &|a| ops::conv_collapse_samples(&a[0], &a[1], &a[2]),
        &|a, g| {
            let (gi, gw, gb) = ops::conv_collapse_samples_backward(g, &a[0], &a[1]);
            Ok(vec![gi, gw, gb])
        },
        rng,
    )?);
    Ok(out)
}

fn elementwise_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for kind in [Activation::Relu, Activation::Sigmoid] {
        // keep relu inputs away from the kink
        let x = Tensor::from_fn(&[5, 4], |_| {
            let m: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        });
        out.extend(check_projected(
            &format!("{kind:?}").to_lowercase(),
            &["input"],
            vec![x],
            &|a| Ok(ops::activation(&a[0], kind)),
            &|a, g| Ok(vec![ops::activation_backward(g, &ops::activation(&a[0], kind), kind)]),
            rng,
        )?);
    }
    out.extend(check_projected(
        "elementwise_sum",
        &["a", "b"],
        vec![uniform(&[4, 3], rng, -1.0, 1.0), uniform(&[4, 3], rng, -1.0, 1.0)],
        &|a| ops::elementwise_sum(&a[0], &a[1]),
        &|a, g| tape_vjp(a, g, |tape, v| tape.add(v[0], v[1])),
        rng,
    )?);
    out.extend(check_projected(
        "stack_mean",
        &["a", "b", "c"],
        (0..3).map(|_| uniform(&[6, 1], rng, -1.0, 1.0)).collect(),
        &|a| ops::stack_mean(&[&a[0], &a[1], &a[2]]),
        &|a, g| tape_vjp(a, g, |tape, v| tape.mean(v)),
        rng,
    )?);
    Ok(out)
}

fn pfg_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let plan = PfgPlan::new(7, SamplingConfig::new(4, 6, 4))?;
    out.extend(check_projected(
        "pfg dense",
        &["input"],
        vec![uniform(&[7, 2], rng, -1.0, 1.0)],
        &|a| plan.forward_dense(&a[0]),
        &|_, g| Ok(vec![plan.backward_dense(g)?]),
        rng,
    )?);
    out.extend(check_projected(
        "pfg cells",
        &["input"],
        vec![uniform(&[7, 2], rng, -1.0, 1.0)],
        &|a| plan.forward_cells(&a[0]),
        &|_, g| Ok(vec![plan.backward_cells(g)?]),
        rng,
    )?);
    let n = plan.samples();
    out.extend(check_projected(
        "pfg collapse",
        &["input", "weight", "bias"],
        vec![
            uniform(&[7, 3], rng, -1.0, 1.0),
            uniform(&[n, 3, 4], rng, -1.0, 1.0),
            uniform(&[4], rng, -1.0, 1.0),
        ],
        &|a| plan.forward_collapse(&a[0], &a[1], &a[2]),
        &|a, g| {
            let (gx, gw, gb) = plan.backward_collapse(g, &a[0], &a[1])?;
            Ok(vec![gx, gw, gb])
        },
        rng,
    )?);
    Ok(out)
}

/// Loss checks go through the tape, so they also cover its plumbing.
fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let n = 24;
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0 || rng.random_bool(0.2)).collect();
    let mask: Vec<bool> = (0..n).map(|i| i < 2 || rng.random_bool(0.7)).collect();
    for (name, mask) in [("balanced_bce", None), ("balanced_bce masked", Some(mask.as_slice()))] {
        let p = uniform(&[n], rng, 0.05, 0.95);
        let value = |x: &Tensor<f64>| -> Result<f64> { Ok(losses::balanced_binary_loss(x.data(), &labels, mask)?.0) };
        let mut tape = Tape::new();
        let v = tape.leaf(p.clone());
        let (loss, _) = losses::record_balanced_bce(&mut tape, v, &labels, mask)?;
        let grad = tape.backward(loss)?.wrt(v);
        out.push(CheckReport {
            name: format!("{name} d/dp"),
            max_rel_error: finite_difference_check(value, &p, DEFAULT_EPS, &grad)?,
            coordinates: n,
        });
    }

    // values straddle both smooth-L1 regimes without sitting on |x - t| = 1
    let x = Tensor::from_fn(&[n], |i| {
        let d: f64 = if i % 2 == 0 { rng.random_range(-0.9..0.9) } else { rng.random_range(1.1..2.5) };
        d * if i % 4 == 1 { -1.0 } else { 1.0 }
    });
    let target = vec![0.0; n];
    let cmask: Vec<bool> = (0..n).map(|i| i % 5 != 4).collect();
    let value = |x: &Tensor<f64>| losses::completeness_loss(x.data(), &target, &cmask);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = losses::record_completeness(&mut tape, v, &target, &cmask)?;
    let grad = tape.backward(loss)?.wrt(v);
    out.push(CheckReport {
        name: "smooth_l1 completeness d/dx".into(),
        max_rel_error: finite_difference_check(value, &x, DEFAULT_EPS, &grad)?,
        coordinates: n,
    });
    Ok(out)
}

/// Small network used by the end-to-end check.
pub fn end_to_end_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        length: 8,
        widths: HiddenWidths {
            dsb_hidden: 16,
            dsb_out: 12,
            acr_hidden: 16,
            tbc_collapse: 24,
            tbc_hidden: 16,
        },
        sampling: SamplingConfig::default(),
        seed,
    }
}

/// Total-loss gradient of the full network against central differences on
/// `samples` parameter coordinates spread over every tensor.
pub fn end_to_end_check(config: ModelConfig, samples: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::<f64>::init(config)?;
    // non-zero biases keep hidden units off the relu kink
    for (k, t) in params.tensors_mut().enumerate() {
        if k % 2 == 1 {
            for b in t.data_mut() {
                *b = rng.random_range(-0.1..0.1);
            }
        }
    }
    let (l, c) = (config.length, config.input_channels);
    let spatial = uniform(&[l, c], &mut rng, -1.0, 1.0);
    let temporal = uniform(&[l, c], &mut rng, -1.0, 1.0);
    let gts = [GtInstance::new(1.3, 3.6)?, GtInstance::new(4.8, 7.0)?];
    let labels = LabelSet::compute(&gts, l);
    let mask = sample_completeness_mask(&labels.completeness, l, &mut rng)?.mask;

    let model = DbgModel::new(params.clone())?;
    let (_, grads, _) = model.loss_and_gradients(&spatial, &temporal, &labels, &mask, losses::ACTIONNESS_WEIGHT)?;

    let loss_at = |p: &ModelParameters<f64>| -> Result<f64> {
        let m = DbgModel::new(p.clone())?;
        Ok(m.loss_and_gradients(&spatial, &temporal, &labels, &mask, losses::ACTIONNESS_WEIGHT)?.0.total)
    };

    // spread the sample evenly across tensors, then uniformly within each
    let sizes: Vec<usize> = params.tensors().map(Tensor::len).collect();
    let mut quota = vec![0usize; sizes.len()];
    let mut remaining = samples;
    'fill: loop {
        let before = remaining;
        for (q, &s) in quota.iter_mut().zip(&sizes) {
            if remaining == 0 {
                break 'fill;
            }
            if *q < s {
                *q += 1;
                remaining -= 1;
            }
        }
        if remaining == before {
            break;
        }
    }

    let mut worst = 0.0f64;
    let mut checked = 0;
    let grad_tensors: Vec<Tensor<f64>> = grads.tensors().cloned().collect();
    for (k, (&q, &size)) in quota.iter().zip(&sizes).enumerate() {
        if q == 0 {
            continue;
        }
        let coords = sample(&mut rng, size, q).into_vec();
        let point = params.tensors().nth(k).expect("tensor index").clone();
        let mut local = params.clone();
        let objective = |x: &Tensor<f64>| -> Result<f64> {
            *local.tensors_mut().nth(k).expect("tensor index") = x.clone();
            loss_at(&local)
        };
        worst = worst.max(finite_difference_check_at(
            objective,
            &point,
            DEFAULT_EPS,
            &grad_tensors[k],
            &coords,
        )?);
        checked += q;
    }
    Ok(CheckReport {
        name: format!("dbg total loss L={l} C={c}"),
        max_rel_error: worst,
        coordinates: checked,
    })
}

/// Every primitive suite followed by the end-to-end check.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    reports.extend(conv1d_checks(&mut rng)?);
    reports.extend(linear_checks(&mut rng)?);
    reports.extend(elementwise_checks(&mut rng)?);
    reports.extend(pfg_checks(&mut rng)?);
    reports.extend(loss_checks(&mut rng)?);
    reports.push(end_to_end_check(end_to_end_config(seed), 64, seed ^ 0x9e37_79b9)?);
    Ok(reports)
}
