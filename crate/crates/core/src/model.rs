//! The dense boundary generator network.
//!
//! * Dual stream base: two stacked temporal convolutions per stream, their
//!   sum `dsf`, three actionness heads and their mean `asf`.
//! * Completeness branch: proposal features of `asf` (`N` channels per cell)
//!   followed by three 1×1 layers, giving the `L×L` completeness map.
//! * Boundary branch: proposal features of `dsf` collapsed over the sample
//!   axis, then two 1×1 layers giving the start and end maps.
//!
//! Hidden layers use ReLU, every score-emitting layer a sigmoid.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::losses::{self, LossBreakdown, LossInputs};
use crate::pfg::{PfgPlan, SamplingConfig};
use crate::tensor::{Precision, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenWidths {
    pub dsb_hidden: usize,
    pub dsb_out: usize,
    pub acr_hidden: usize,
    pub tbc_collapse: usize,
    pub tbc_hidden: usize,
}

impl Default for HiddenWidths {
    fn default() -> Self {
        Self {
            dsb_hidden: 256,
            dsb_out: 128,
            acr_hidden: 256,
            tbc_collapse: 512,
            tbc_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub length: usize,
    pub widths: HiddenWidths,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_channels: usize, length: usize, seed: u64) -> Self {
        Self {
            input_channels,
            length,
            widths: HiddenWidths::default(),
            sampling: SamplingConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Invalid("model needs at least one input channel".into()));
        }
        if self.length < 2 {
            return Err(Error::Invalid(format!("model needs L >= 2, got {}", self.length)));
        }
        let w = self.widths;
        if [w.dsb_hidden, w.dsb_out, w.acr_hidden, w.tbc_collapse, w.tbc_hidden].contains(&0) {
            return Err(Error::Invalid("hidden widths must be positive".into()));
        }
        self.sampling.validate()
    }
}

/// Every learnable layer, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerId {
    Conv1d11,
    Conv1d12,
    Conv1d13,
    Conv1d21,
    Conv1d22,
    Conv1d23,
    Conv1d33,
    Conv2d11,
    Conv2d12,
    Conv2d13,
    Conv3d21,
    Conv2d22,
    Conv2d23,
}

impl LayerId {
    pub const ALL: [LayerId; 13] = [
        LayerId::Conv1d11,
        LayerId::Conv1d12,
        LayerId::Conv1d13,
        LayerId::Conv1d21,
        LayerId::Conv1d22,
        LayerId::Conv1d23,
        LayerId::Conv1d33,
        LayerId::Conv2d11,
        LayerId::Conv2d12,
        LayerId::Conv2d13,
        LayerId::Conv3d21,
        LayerId::Conv2d22,
        LayerId::Conv2d23,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::Conv1d11 => "conv1d_11",
            LayerId::Conv1d12 => "conv1d_12",
            LayerId::Conv1d13 => "conv1d_13",
            LayerId::Conv1d21 => "conv1d_21",
            LayerId::Conv1d22 => "conv1d_22",
            LayerId::Conv1d23 => "conv1d_23",
            LayerId::Conv1d33 => "conv1d_33",
            LayerId::Conv2d11 => "conv2d_11",
            LayerId::Conv2d12 => "conv2d_12",
            LayerId::Conv2d13 => "conv2d_13",
            LayerId::Conv3d21 => "conv3d_21",
            LayerId::Conv2d22 => "conv2d_22",
            LayerId::Conv2d23 => "conv2d_23",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Weight shape and fan-in for a given configuration.
    pub fn weight_shape(self, cfg: &ModelConfig) -> (Vec<usize>, usize) {
        let w = cfg.widths;
        let c = cfg.input_channels;
        let n = cfg.sampling.total();
        match self {
            LayerId::Conv1d11 | LayerId::Conv1d21 => (vec![3, c, w.dsb_hidden], 3 * c),
            LayerId::Conv1d12 | LayerId::Conv1d22 => (vec![3, w.dsb_hidden, w.dsb_out], 3 * w.dsb_hidden),
            LayerId::Conv1d13 | LayerId::Conv1d23 | LayerId::Conv1d33 => (vec![1, w.dsb_out, 1], w.dsb_out),
            LayerId::Conv2d11 => (vec![n, w.acr_hidden], n),
            LayerId::Conv2d12 => (vec![w.acr_hidden, w.acr_hidden], w.acr_hidden),
            LayerId::Conv2d13 => (vec![w.acr_hidden, 1], w.acr_hidden),
            LayerId::Conv3d21 => (vec![n, w.dsb_out, w.tbc_collapse], n * w.dsb_out),
            LayerId::Conv2d22 => (vec![w.tbc_collapse, w.tbc_hidden], w.tbc_collapse),
            LayerId::Conv2d23 => (vec![w.tbc_hidden, 2], w.tbc_hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Named weights and biases of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    config: ModelConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero, drawn from a
    /// ChaCha8 stream seeded with `config.seed` in [`LayerId::ALL`] order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = LayerId::ALL
            .iter()
            .map(|&id| {
                let (shape, fan_in) = id.weight_shape(&config);
                let bound = (1.0 / fan_in as f64).sqrt();
                let weight = Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)));
                let bias = Tensor::zeros(&[*shape.last().expect("non-empty shape")]);
                Layer { weight, bias }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn from_layers(config: ModelConfig, layers: Vec<Layer<T>>) -> Result<Self> {
        config.validate()?;
        if layers.len() != LayerId::ALL.len() {
            return Err(Error::Invalid(format!("expected {} layers, got {}", LayerId::ALL.len(), layers.len())));
        }
        for (&id, layer) in LayerId::ALL.iter().zip(&layers) {
            let (shape, _) = id.weight_shape(&config);
            if layer.weight.shape() != shape.as_slice() || layer.bias.shape() != [*shape.last().unwrap()] {
                return Err(Error::shape("model parameters", format!(
                    "{}: weight {:?} bias {:?}, expected weight {shape:?}",
                    id.name(),
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer(&self, id: LayerId) -> &Layer<T> {
        &self.layers[id.index()]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut Layer<T> {
        &mut self.layers[id.index()]
    }

    /// `(name, tensor)` pairs, weights before biases per layer.
    pub fn named_tensors(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        LayerId::ALL.iter().zip(&self.layers).flat_map(|(id, l)| {
            [
                (format!("{}.weight", id.name()), &l.weight),
                (format!("{}.bias", id.name()), &l.bias),
            ]
        })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Adds `scale * other` to every tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }
}

/// Parameter handles recorded on a tape, indexed like [`LayerId::ALL`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn layer(&self, id: LayerId) -> (Var, Var) {
        self.vars[id.index()]
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub params: ParamVars,
    pub spatial_feature: Var,
    pub temporal_feature: Var,
    pub dual_stream: Var,
    pub actionness: [Var; 3],
    pub actionness_score: Var,
    pub completeness: Var,
    pub start: Var,
    pub end: Var,
}

/// Detached results of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    pub spatial_feature: Tensor<T>,
    pub temporal_feature: Tensor<T>,
    /// `L×dsb_out` dual stream feature.
    pub dual_stream: Tensor<T>,
    /// Three `L×1` actionness probability sequences.
    pub actionness: [Tensor<T>; 3],
    /// `L×1` mean of the actionness heads.
    pub actionness_score: Tensor<T>,
    /// `L×L` maps.
    pub completeness: Tensor<T>,
    pub start: Tensor<T>,
    pub end: Tensor<T>,
}

/// Parameters together with the sampling plan for their sequence length.
#[derive(Debug, Clone)]
pub struct DbgModel<T> {
    params: ModelParameters<T>,
    plan: Arc<PfgPlan>,
}

impl<T: Real> DbgModel<T> {
    pub fn new(params: ModelParameters<T>) -> Result<Self> {
        let cfg = params.config();
        let plan = Arc::new(PfgPlan::new(cfg.length, cfg.sampling)?);
        Ok(Self { params, plan })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        Self::new(ModelParameters::init(config)?)
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParameters<T> {
        self.params
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn plan(&self) -> &Arc<PfgPlan> {
        &self.plan
    }

    fn check_inputs(&self, spatial: &Tensor<T>, temporal: &Tensor<T>) -> Result<()> {
        let cfg = self.config();
        for (name, t) in [("spatial", spatial), ("temporal", temporal)] {
            if t.shape() != [cfg.length, cfg.input_channels] {
                return Err(Error::shape("dbg forward", format!(
                    "{name} stream is {:?}, model expects {}×{}",
                    t.shape(),
                    cfg.length,
                    cfg.input_channels
                )));
            }
        }
        Ok(())
    }

    /// Records the parameters on the tape.
    pub fn record_params<'a>(&'a self, tape: &mut Tape<'a, T>) -> ParamVars {
        ParamVars {
            vars: self
                .params
                .layers
                .iter()
                .map(|l| (tape.param(&l.weight), tape.param(&l.bias)))
                .collect(),
        }
    }

    /// Dual stream base: returns `(sf, tf, dsf, heads, asf)`.
    pub fn record_dsb(
        &self,
        tape: &mut Tape<'_, T>,
        params: &ParamVars,
        spatial: Var,
        temporal: Var,
    ) -> Result<(Var, Var, Var, [Var; 3], Var)> {
        let conv = |tape: &mut Tape<'_, T>, x: Var, id: LayerId| -> Result<Var> {
            let (w, b) = params.layer(id);
            tape.conv1d(x, w, b)
        };
        let h = conv(tape, spatial, LayerId::Conv1d11)?;
        let h = tape.relu(h);
        let sf = conv(tape, h, LayerId::Conv1d12)?;
        let sf = tape.relu(sf);
        let h = conv(tape, temporal, LayerId::Conv1d21)?;
        let h = tape.relu(h);
        let tf = conv(tape, h, LayerId::Conv1d22)?;
        let tf = tape.relu(tf);
        let dsf = tape.add(sf, tf)?;
        let mut heads = [sf; 3];
        for (slot, (x, id)) in heads.iter_mut().zip([
            (sf, LayerId::Conv1d13),
            (tf, LayerId::Conv1d23),
            (dsf, LayerId::Conv1d33),
        ]) {
            let logits = conv(tape, x, id)?;
            *slot = tape.sigmoid(logits);
        }
        let asf = tape.mean(&heads)?;
        Ok((sf, tf, dsf, heads, asf))
    }

    /// Completeness branch: `asf` (`L×1`) → `L×L` completeness map.
    pub fn record_acr(&self, tape: &mut Tape<'_, T>, params: &ParamVars, asf: Var) -> Result<Var> {
        let feats = tape.pfg_cells(asf, &self.plan)?;
        let rows = self.plan.cells().rows();
        let n = self.plan.samples();
        // N samples × 1 channel per cell act as N input channels
        let mut h = tape.reshape(feats, &[rows, n])?;
        for (id, last) in [(LayerId::Conv2d11, false), (LayerId::Conv2d12, false), (LayerId::Conv2d13, true)] {
            let (w, b) = params.layer(id);
            let z = tape.linear(h, w, b)?;
            h = if last { tape.sigmoid(z) } else { tape.relu(z) };
        }
        tape.cells_to_map(h, 0, &self.plan)
    }

    /// Boundary branch: `dsf` (`L×dsb_out`) → `(start map, end map)`.
    pub fn record_tbc(&self, tape: &mut Tape<'_, T>, params: &ParamVars, dsf: Var) -> Result<(Var, Var)> {
        let (w, b) = params.layer(LayerId::Conv3d21);
        let h = tape.pfg_collapse(dsf, w, b, &self.plan)?;
        let h = tape.relu(h);
        let (w, b) = params.layer(LayerId::Conv2d22);
        let h = tape.linear(h, w, b)?;
        let h = tape.relu(h);
        let (w, b) = params.layer(LayerId::Conv2d23);
        let h = tape.linear(h, w, b)?;
        let h = tape.sigmoid(h);
        Ok((tape.cells_to_map(h, 0, &self.plan)?, tape.cells_to_map(h, 1, &self.plan)?))
    }

    /// Full forward pass on one tape.
    pub fn record_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        spatial: &'a Tensor<T>,
        temporal: &'a Tensor<T>,
    ) -> Result<ForwardVars> {
        self.check_inputs(spatial, temporal)?;
        let params = self.record_params(tape);
        let s = tape.param(spatial);
        let t = tape.param(temporal);
        let (sf, tf, dsf, heads, asf) = self.record_dsb(tape, &params, s, t)?;
        let completeness = self.record_acr(tape, &params, asf)?;
        let (start, end) = self.record_tbc(tape, &params, dsf)?;
        Ok(ForwardVars {
            params,
            spatial_feature: sf,
            temporal_feature: tf,
            dual_stream: dsf,
            actionness: heads,
            actionness_score: asf,
            completeness,
            start,
            end,
        })
    }

    pub fn forward(&self, spatial: &Tensor<T>, temporal: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        let mut tape = Tape::new();
        let v = self.record_forward(&mut tape, spatial, temporal)?;
        let get = |var: Var| tape.value(var).clone();
        let out = ForwardOutputs {
            spatial_feature: get(v.spatial_feature),
            temporal_feature: get(v.temporal_feature),
            dual_stream: get(v.dual_stream),
            actionness: v.actionness.map(get),
            actionness_score: get(v.actionness_score),
            completeness: get(v.completeness),
            start: get(v.start),
            end: get(v.end),
        };
        for map in [&out.completeness, &out.start, &out.end] {
            map.ensure_finite("forward")?;
        }
        Ok(out)
    }

    /// Forward, total loss and gradients w.r.t. every parameter.
    pub fn loss_and_gradients(
        &self,
        spatial: &Tensor<T>,
        temporal: &Tensor<T>,
        labels: &LabelSet,
        completeness_mask: &[bool],
        actionness_weight: f64,
    ) -> Result<(LossBreakdown, ModelParameters<T>, bool)> {
        let mut tape = Tape::new();
        let v = self.record_forward(&mut tape, spatial, temporal)?;
        let lv = losses::record_total_loss(
            &mut tape,
            &LossInputs {
                actionness_heads: v.actionness,
                start_map: v.start,
                end_map: v.end,
                completeness_map: v.completeness,
                actionness_labels: &labels.actionness,
                start_labels: &labels.start,
                end_labels: &labels.end,
                completeness_labels: &labels.completeness,
                completeness_mask,
                actionness_weight,
            },
        )?;
        let breakdown = lv.breakdown(&tape);
        let mut grads = tape.backward(lv.total)?;
        let mut store = self.params.zeros_like();
        for (&id, layer) in LayerId::ALL.iter().zip(store.layers.iter_mut()) {
            let (w, b) = v.params.layer(id);
            layer.weight = grads.take(w);
            layer.bias = grads.take(b);
        }
        Ok((breakdown, store, lv.flagged))
    }
}
