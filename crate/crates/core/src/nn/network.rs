use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::layers::{backward_seq, forward_seq, forward_seq_cached, Cache, Layer, Linear, ParamMut, ParamRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Architecture identifier as recorded in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Stacked stride-2 4×4 conv + softplus stages.
    ReferenceCnn { channels: Vec<usize> },
    Resnet18,
    Resnet34,
    Resnet50,
    /// Hand-assembled network (tests, experiments); not loadable from a manifest.
    Custom,
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::ReferenceCnn { .. } => "reference-cnn",
            Architecture::Resnet18 => "resnet18",
            Architecture::Resnet34 => "resnet34",
            Architecture::Resnet50 => "resnet50",
            Architecture::Custom => "custom",
        }
    }
}

/// Nominal input shape. Channels are enforced; height and width are the
/// training resolution, and any spatial size at least `min_size` is accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A named group of layers whose output can be hooked.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub name: String,
    pub hookable: bool,
    pub layers: Vec<Layer>,
}

impl Stage {
    pub fn new(name: impl Into<String>, hookable: bool, layers: Vec<Layer>) -> Self {
        Self {
            name: name.into(),
            hookable,
            layers,
        }
    }
}

/// Feed-forward CNN: stages, global average pooling, linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub architecture: Architecture,
    pub input: InputSpec,
    pub stages: Vec<Stage>,
    pub head: Linear,
    /// Smallest accepted spatial input size.
    pub min_size: usize,
}

/// Everything kept from a cached forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Index of the first stage that was run.
    pub start: usize,
    /// Output of each stage from `start` on.
    pub outputs: Vec<Tensor3>,
    pub caches: Vec<Vec<Cache>>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl Network {
    pub fn new(
        architecture: Architecture,
        input: InputSpec,
        stages: Vec<Stage>,
        head: Linear,
    ) -> Result<Self> {
        if !stages.iter().any(|s| s.hookable) {
            return Err(Error::Validation("network exposes no hookable layer".into()));
        }
        if head.out_features < 2 {
            return Err(Error::Validation("a classifier needs at least two classes".into()));
        }
        Ok(Self {
            architecture,
            input,
            stages,
            head,
            min_size: 8,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    /// Hookable stage names in forward order.
    pub fn layer_registry(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.hookable)
            .map(|s| s.name.as_str())
            .collect()
    }

    /// The last hookable stage: the default CAM target.
    pub fn default_layer(&self) -> &str {
        self.stages
            .iter()
            .rev()
            .find(|s| s.hookable)
            .map(|s| s.name.as_str())
            .expect("checked at construction")
    }

    pub fn stage_index(&self, layer: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.hookable && s.name == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    pub fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != self.input.channels {
            return Err(Error::InputSpec(format!(
                "expected {} channel(s), got {}",
                self.input.channels,
                x.channels()
            )));
        }
        if x.height() < self.min_size || x.width() < self.min_size {
            return Err(Error::InputSpec(format!(
                "spatial size {}x{} below the minimum {}",
                x.height(),
                x.width(),
                self.min_size
            )));
        }
        x.ensure_finite("input image")
    }

    /// Runs stages `start..` on `x` (the output of stage `start - 1`, or
    /// the image when `start == 0`) and applies pooling and the head.
    pub fn run_from(&self, start: usize, x: &Tensor3) -> Result<Vec<f64>> {
        let mut cur = x.clone();
        for s in &self.stages[start..] {
            cur = forward_seq(&s.layers, &cur)?;
        }
        Ok(self.head.forward(&global_avg_pool(&cur)))
    }

    pub fn logits(&self, x: &Tensor3) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.run_from(0, x)
    }

    /// Pooled feature vector (the embedding used for contrastive training).
    pub fn features(&self, x: &Tensor3) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for s in &self.stages {
            cur = forward_seq(&s.layers, &cur)?;
        }
        Ok(global_avg_pool(&cur))
    }

    /// Output of one stage, without running the rest of the network.
    pub fn stage_output(&self, x: &Tensor3, stage: usize) -> Result<Tensor3> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for s in &self.stages[..=stage] {
            cur = forward_seq(&s.layers, &cur)?;
        }
        Ok(cur)
    }

    /// Cached forward pass from stage `start` on.
    pub fn trace_from(&self, start: usize, x: &Tensor3) -> Result<Trace> {
        let mut cur = x.clone();
        let mut outputs = Vec::with_capacity(self.stages.len() - start);
        let mut caches = Vec::with_capacity(self.stages.len() - start);
        for s in &self.stages[start..] {
            let (y, c) = forward_seq_cached(&s.layers, &cur)?;
            caches.push(c);
            outputs.push(y.clone());
            cur = y;
        }
        let pooled = global_avg_pool(&cur);
        let logits = self.head.forward(&pooled);
        Ok(Trace {
            start,
            outputs,
            caches,
            pooled,
            logits,
        })
    }

    pub fn trace(&self, x: &Tensor3) -> Result<Trace> {
        self.check_input(x)?;
        self.trace_from(0, x)
    }

    /// Backpropagates `d_logits` through the head and returns the gradient
    /// with respect to the pooled features.
    pub fn head_backward(&self, trace: &Trace, d_logits: &[f64], grads: Option<&mut Network>) -> Vec<f64> {
        self.head
            .backward(&trace.pooled, d_logits, grads.map(|g| &mut g.head))
    }

    /// Backpropagates a gradient on the pooled features down to the output
    /// of stage `stop` (or through every traced stage when `stop` is `None`).
    /// Parameter gradients of the traversed stages are accumulated into
    /// `grads`. Returns the gradient at the stop point.
    pub fn features_backward(
        &self,
        trace: &Trace,
        d_pooled: &[f64],
        stop: Option<usize>,
        mut grads: Option<&mut Network>,
    ) -> Tensor3 {
        let last = trace.outputs.last().expect("trace has at least one stage");
        let (c, h, w) = last.shape();
        let area = (h * w) as f64;
        let mut g = Tensor3::zeros(c, h, w);
        for (ch, &d) in d_pooled.iter().enumerate() {
            g.channel_mut(ch).iter_mut().for_each(|v| *v = d / area);
        }
        let first = stop.map_or(trace.start, |s| s + 1);
        for idx in (first..self.stages.len()).rev() {
            let local = idx - trace.start;
            let gstage = grads.as_deref_mut().map(|n| n.stages[idx].layers.as_mut_slice());
            g = backward_seq(&self.stages[idx].layers, &trace.caches[local], &g, gstage);
        }
        g
    }

    /// Gradient of `Σ d_logits[i] · logit_i` w.r.t. the output of stage `stop`.
    pub fn backward_to(&self, trace: &Trace, d_logits: &[f64], stop: Option<usize>) -> Tensor3 {
        let dp = self.head_backward(trace, d_logits, None);
        self.features_backward(trace, &dp, stop, None)
    }

    /// A network of identical structure with every parameter set to zero,
    /// used as a gradient accumulator.
    pub fn zeros_like(&self) -> Network {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// All named tensors (parameters and buffers) in a fixed order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for s in &self.stages {
            s.layers.iter().for_each(|l| l.for_each_param(&mut out));
        }
        out.push(ParamRef {
            module: &self.head.name,
            field: "weight",
            values: &self.head.weight,
            trainable: true,
        });
        out.push(ParamRef {
            module: &self.head.name,
            field: "bias",
            values: &self.head.bias,
            trainable: true,
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            s.layers.iter_mut().for_each(|l| l.for_each_param_mut(&mut out));
        }
        out.push(ParamMut {
            module: &self.head.name,
            field: "weight",
            values: &mut self.head.weight,
            trainable: true,
        });
        out.push(ParamMut {
            module: &self.head.name,
            field: "bias",
            values: &mut self.head.bias,
            trainable: true,
        });
        out
    }

    /// Tensor shapes in the order of [`Network::params`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for s in &self.stages {
            s.layers.iter().for_each(|l| l.param_shapes(&mut out));
        }
        out.push(vec![self.head.out_features, self.head.in_features]);
        out.push(vec![self.head.out_features]);
        out
    }

    /// Replaces every named tensor with the one returned by `lookup`.
    /// Missing names and length mismatches are errors.
    pub fn load_params(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<()> {
        let shapes = self.param_shapes();
        for (p, shape) in self.params_mut().into_iter().zip(shapes) {
            let name = p.name();
            let values = lookup(&name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let expected: usize = shape.iter().product();
            if values.len() != expected {
                return Err(Error::Shape(format!(
                    "`{name}` has {} values, expected {expected} for shape {shape:?}",
                    values.len()
                )));
            }
            *p.values = values;
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.values.len())
            .sum()
    }
}

pub fn global_avg_pool(x: &Tensor3) -> Vec<f64> {
    let area = (x.height() * x.width()) as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / area)
        .collect()
}
