use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layers::{BatchNorm2d, Conv2d, Layer, Linear, MaxPool2d, Residual};
use super::network::{Architecture, InputSpec, Network, Stage};
use crate::error::{Error, Result};
use crate::math;

/// Stage widths of the reference network.
pub const REFERENCE_CHANNELS: [usize; 3] = [8, 16, 32];

/// Deterministic weight initializer: He-normal kernels, uniform
/// `±1/sqrt(fan_in)` biases.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn conv(&mut self, conv: &mut Conv2d) {
        let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f64;
        let normal = Normal::new(0.0, math::sqrt(2.0 / fan_in)).expect("positive std");
        conv.weight.iter_mut().for_each(|w| *w = normal.sample(&mut self.rng));
        let bound = 1.0 / math::sqrt(fan_in);
        if let Some(b) = conv.bias.as_mut() {
            b.iter_mut().for_each(|v| *v = self.rng.random_range(-bound..bound));
        }
    }

    pub fn linear(&mut self, lin: &mut Linear) {
        let bound = 1.0 / math::sqrt(lin.in_features as f64);
        lin.weight.iter_mut().for_each(|w| *w = self.rng.random_range(-bound..bound));
        lin.bias.iter_mut().for_each(|w| *w = self.rng.random_range(-bound..bound));
    }

    fn layers(&mut self, layers: &mut [Layer]) {
        for l in layers {
            match l {
                Layer::Conv(c) => self.conv(c),
                Layer::Residual(r) => {
                    self.layers(&mut r.main);
                    self.layers(&mut r.shortcut);
                }
                _ => {}
            }
        }
    }

    pub fn network(&mut self, net: &mut Network) {
        for s in &mut net.stages {
            self.layers(&mut s.layers);
        }
        self.linear(&mut net.head);
    }
}

/// The desk-scale reference classifier: three stride-2 4×4 conv + softplus
/// stages (8, 16, 32 channels) over 1×64×64 inputs, global average pooling
/// and a 2-class linear head. Every stage output is hookable.
pub fn reference_network(seed: u64) -> Network {
    reference_network_with(seed, &REFERENCE_CHANNELS, 1, 2, 64)
        .expect("reference configuration is valid")
}

pub fn reference_network_with(
    seed: u64,
    channels: &[usize],
    in_channels: usize,
    num_classes: usize,
    size: usize,
) -> Result<Network> {
    if channels.is_empty() {
        return Err(Error::Validation("reference network needs at least one stage".into()));
    }
    let mut stages = Vec::with_capacity(channels.len());
    let mut prev = in_channels;
    for (i, &c) in channels.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let conv = Conv2d::new(format!("{name}.conv"), prev, c, 4, 2, 1, true);
        stages.push(Stage::new(name, true, vec![Layer::Conv(conv), Layer::Softplus]));
        prev = c;
    }
    let head = Linear::new("fc", prev, num_classes);
    let mut net = Network::new(
        Architecture::ReferenceCnn {
            channels: channels.to_vec(),
        },
        InputSpec {
            channels: in_channels,
            height: size,
            width: size,
        },
        stages,
        head,
    )?;
    Init::new(seed).network(&mut net);
    Ok(net)
}

fn conv_bn(prefix: &str, conv: &str, bn: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> [Layer; 2] {
    [
        Layer::Conv(Conv2d::new(format!("{prefix}{conv}"), cin, cout, k, s, p, false)),
        Layer::BatchNorm(BatchNorm2d::new(format!("{prefix}{bn}"), cout)),
    ]
}

fn basic_block(prefix: &str, cin: usize, cout: usize, stride: usize) -> Layer {
    let mut main = Vec::new();
    main.extend(conv_bn(prefix, "conv1", "bn1", cin, cout, 3, stride, 1));
    main.push(Layer::Relu);
    main.extend(conv_bn(prefix, "conv2", "bn2", cout, cout, 3, 1, 1));
    let shortcut = if stride != 1 || cin != cout {
        conv_bn(prefix, "downsample.0", "downsample.1", cin, cout, 1, stride, 0).to_vec()
    } else {
        Vec::new()
    };
    Layer::Residual(Box::new(Residual { main, shortcut }))
}

fn bottleneck_block(prefix: &str, cin: usize, width: usize, stride: usize) -> Layer {
    let cout = width * 4;
    let mut main = Vec::new();
    main.extend(conv_bn(prefix, "conv1", "bn1", cin, width, 1, 1, 0));
    main.push(Layer::Relu);
    main.extend(conv_bn(prefix, "conv2", "bn2", width, width, 3, stride, 1));
    main.push(Layer::Relu);
    main.extend(conv_bn(prefix, "conv3", "bn3", width, cout, 1, 1, 0));
    let shortcut = if stride != 1 || cin != cout {
        conv_bn(prefix, "downsample.0", "downsample.1", cin, cout, 1, stride, 0).to_vec()
    } else {
        Vec::new()
    };
    Layer::Residual(Box::new(Residual { main, shortcut }))
}

/// Residual classifier with torchvision parameter naming (`conv1`, `bn1`,
/// `layer1.0.conv1`, ..., `fc`). Registry: `layer1`..`layer4`.
pub fn resnet(architecture: Architecture, input: InputSpec, num_classes: usize, seed: u64) -> Result<Network> {
    let (blocks, bottleneck): ([usize; 4], bool) = match architecture {
        Architecture::Resnet18 => ([2, 2, 2, 2], false),
        Architecture::Resnet34 => ([3, 4, 6, 3], false),
        Architecture::Resnet50 => ([3, 4, 6, 3], true),
        ref other => {
            return Err(Error::Validation(format!(
                "`{}` is not a residual architecture",
                other.id()
            )))
        }
    };
    let mut stem = conv_bn("", "conv1", "bn1", input.channels, 64, 7, 2, 3).to_vec();
    stem.push(Layer::Relu);
    stem.push(Layer::MaxPool(MaxPool2d {
        kernel: 3,
        stride: 2,
        padding: 1,
    }));
    let mut stages = vec![Stage::new("stem", false, stem)];
    let mut cin = 64;
    for (i, &n) in blocks.iter().enumerate() {
        let width = 64 << i;
        let name = format!("layer{}", i + 1);
        let mut layers = Vec::with_capacity(n);
        for b in 0..n {
            let stride = if i > 0 && b == 0 { 2 } else { 1 };
            let prefix = format!("{name}.{b}.");
            if bottleneck {
                layers.push(bottleneck_block(&prefix, cin, width, stride));
                cin = width * 4;
            } else {
                layers.push(basic_block(&prefix, cin, width, stride));
                cin = width;
            }
        }
        stages.push(Stage::new(name, true, layers));
    }
    let head = Linear::new("fc", cin, num_classes);
    let mut net = Network::new(architecture, input, stages, head)?;
    net.min_size = 32;
    Init::new(seed).network(&mut net);
    Ok(net)
}

/// Builds an untrained network for a manifest architecture; weights are
/// expected to be overwritten by a checkpoint.
pub fn build_architecture(architecture: &Architecture, input: InputSpec, num_classes: usize) -> Result<Network> {
    match architecture {
        Architecture::ReferenceCnn { channels } => {
            reference_network_with(0, channels, input.channels, num_classes, input.height.max(input.width))
                .map(|mut n| {
                    n.input = input;
                    n
                })
        }
        Architecture::Custom => Err(Error::Validation(
            "custom architectures cannot be rebuilt from a manifest".into(),
        )),
        other => resnet(other.clone(), input, num_classes, 0),
    }
}
