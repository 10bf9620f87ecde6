use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor3;

/// 2D convolution with square stride and symmetric zero padding.
/// Weights are laid out `[out, in, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: bias.then(|| vec![0.0; out_channels]),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::InputSpec(format!(
                "{h}x{w} input is too small for `{}` ({}x{} kernel)",
                self.name, self.kernel, self.kernel
            )));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    /// Output rows `oy` for which input row `oy*stride + k - padding` is in range.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= in_len - 1
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.in_channels {
            return Err(Error::InputSpec(format!(
                "`{}` expects {} channels, got {}",
                self.name,
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.output_size(h, w)?;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        let k = self.kernel;
        let s = self.stride;
        let xd = x.data();
        for oc in 0..self.out_channels {
            let dst = out.channel_mut(oc);
            if let Some(b) = &self.bias {
                dst.iter_mut().for_each(|v| *v = b[oc]);
            }
            for ic in 0..self.in_channels {
                let src = &xd[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let wv = self.weight[((oc * self.in_channels + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.padding;
                            let row = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let ix0 = x0 + kx - self.padding;
                                for (d, v) in drow[x0..x1].iter_mut().zip(&row[ix0..]) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] += wv * row[ox * s + kx - self.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the input; accumulates parameter gradients into `grads`.
    pub fn backward(&self, x: &Tensor3, g: &Tensor3, grads: Option<&mut Conv2d>) -> Tensor3 {
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = (g.height(), g.width());
        let k = self.kernel;
        let s = self.stride;
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        let mut grads = grads;
        let xd = x.data();
        for oc in 0..self.out_channels {
            let go = g.channel(oc);
            if let Some(gr) = grads.as_deref_mut() {
                if let Some(b) = gr.bias.as_mut() {
                    b[oc] += go.iter().sum::<f64>();
                }
            }
            for ic in 0..self.in_channels {
                let src = &xd[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let widx = ((oc * self.in_channels + ic) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let (x0, x1) = self.valid_range(kx, w, ow);
                        let mut gw = 0.0;
                        let dxc = dx.channel_mut(ic);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.padding;
                            let grow = &go[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                let ix = ox * s + kx - self.padding;
                                let gv = grow[ox];
                                gw += gv * src[iy * w + ix];
                                dxc[iy * w + ix] += wv * gv;
                            }
                        }
                        if let Some(gr) = grads.as_deref_mut() {
                            gr.weight[widx] += gw;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Batch normalization with frozen running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            weight: vec![1.0; channels],
            bias: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    fn scale(&self, c: usize) -> f64 {
        self.weight[c] / math::sqrt(self.running_var[c] + self.eps)
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.channels {
            return Err(Error::InputSpec(format!(
                "`{}` expects {} channels, got {}",
                self.name,
                self.channels,
                x.channels()
            )));
        }
        let mut out = x.clone();
        for c in 0..self.channels {
            let a = self.scale(c);
            let b = self.bias[c] - self.running_mean[c] * a;
            out.channel_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor3, g: &Tensor3, grads: Option<&mut BatchNorm2d>) -> Tensor3 {
        let mut dx = g.clone();
        let mut grads = grads;
        for c in 0..self.channels {
            let a = self.scale(c);
            dx.channel_mut(c).iter_mut().for_each(|v| *v *= a);
            if let Some(gr) = grads.as_deref_mut() {
                let inv = 1.0 / math::sqrt(self.running_var[c] + self.eps);
                let mean = self.running_mean[c];
                let (mut dw, mut db) = (0.0, 0.0);
                for (gv, xv) in g.channel(c).iter().zip(x.channel(c)) {
                    dw += gv * (xv - mean) * inv;
                    db += gv;
                }
                gr.weight[c] += dw;
                gr.bias[c] += db;
            }
        }
        dx
    }
}

/// Max pooling with implicit negative-infinity padding.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::InputSpec(format!("{h}x{w} input is too small to pool")));
        }
        Ok((
            (hp - self.kernel) / self.stride + 1,
            (wp - self.kernel) / self.stride + 1,
        ))
    }

    /// Returns the pooled tensor and, per output element, the flat input index
    /// of the selected maximum.
    pub fn forward(&self, x: &Tensor3) -> Result<(Tensor3, Vec<usize>)> {
        let (c, h, w) = x.shape();
        let (oh, ow) = self.output_size(h, w)?;
        let mut out = Tensor3::zeros(c, oh, ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = x.index(ch, iy as usize, ix as usize);
                            if x.data()[i] > best || best_i == usize::MAX {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    out.set(ch, oy, ox, best);
                    arg.push(best_i);
                }
            }
        }
        Ok((out, arg))
    }
}

/// Fully connected layer, weights laid out `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_features)
            .map(|o| {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                self.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], g: &[f64], grads: Option<&mut Linear>) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_features];
        for (o, &go) in g.iter().enumerate() {
            let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
            for (d, wv) in dx.iter_mut().zip(row) {
                *d += wv * go;
            }
        }
        if let Some(gr) = grads {
            for (o, &go) in g.iter().enumerate() {
                gr.bias[o] += go;
                let row = &mut gr.weight[o * self.in_features..(o + 1) * self.in_features];
                for (d, xv) in row.iter_mut().zip(x) {
                    *d += go * xv;
                }
            }
        }
        dx
    }
}

/// Residual unit: `relu(main(x) + shortcut(x))`, with an empty shortcut
/// meaning identity. Covers both basic and bottleneck ResNet blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    /// `log(1 + e^x)`; smooth, so finite differences through it are exact
    /// to second order.
    Softplus,
    MaxPool(MaxPool2d),
    Residual(Box<Residual>),
}

/// Per-layer state kept from the forward pass for backpropagation.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Tensor3),
    Relu(Tensor3),
    MaxPool { argmax: Vec<usize>, shape: (usize, usize, usize) },
    Residual { main: Vec<Cache>, shortcut: Vec<Cache>, out: Tensor3 },
}

impl Layer {
    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::BatchNorm(b) => b.forward(x),
            Layer::Relu => {
                let mut y = x.clone();
                y.map_inplace(math::relu);
                Ok(y)
            }
            Layer::Softplus => {
                let mut y = x.clone();
                y.map_inplace(math::softplus);
                Ok(y)
            }
            Layer::MaxPool(p) => p.forward(x).map(|(y, _)| y),
            Layer::Residual(r) => {
                let mut y = forward_seq(&r.main, x)?;
                let s = forward_seq(&r.shortcut, x)?;
                add_checked(&mut y, &s)?;
                y.map_inplace(math::relu);
                Ok(y)
            }
        }
    }

    pub fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, Cache)> {
        match self {
            Layer::Conv(_) | Layer::BatchNorm(_) | Layer::Softplus => {
                Ok((self.forward(x)?, Cache::Input(x.clone())))
            }
            Layer::Relu => {
                let y = self.forward(x)?;
                Ok((y.clone(), Cache::Relu(y)))
            }
            Layer::MaxPool(p) => {
                let (y, argmax) = p.forward(x)?;
                Ok((y, Cache::MaxPool { argmax, shape: x.shape() }))
            }
            Layer::Residual(r) => {
                let (mut y, main) = forward_seq_cached(&r.main, x)?;
                let (s, shortcut) = forward_seq_cached(&r.shortcut, x)?;
                add_checked(&mut y, &s)?;
                y.map_inplace(math::relu);
                Ok((y.clone(), Cache::Residual { main, shortcut, out: y }))
            }
        }
    }

    pub fn backward(&self, cache: &Cache, g: &Tensor3, grads: Option<&mut Layer>) -> Tensor3 {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let gr = match grads {
                    Some(Layer::Conv(gc)) => Some(gc),
                    _ => None,
                };
                c.backward(x, g, gr)
            }
            (Layer::BatchNorm(b), Cache::Input(x)) => {
                let gr = match grads {
                    Some(Layer::BatchNorm(gb)) => Some(gb),
                    _ => None,
                };
                b.backward(x, g, gr)
            }
            (Layer::Relu, Cache::Relu(y)) => relu_backward(y, g),
            (Layer::Softplus, Cache::Input(x)) => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= math::sigmoid(v);
                }
                dx
            }
            (Layer::MaxPool(_), Cache::MaxPool { argmax, shape }) => {
                let mut dx = Tensor3::zeros(shape.0, shape.1, shape.2);
                for (gv, &i) in g.data().iter().zip(argmax) {
                    dx.data_mut()[i] += gv;
                }
                dx
            }
            (Layer::Residual(r), Cache::Residual { main, shortcut, out }) => {
                let gy = relu_backward(out, g);
                let (gm, gs) = match grads {
                    Some(Layer::Residual(gr)) => {
                        let gr = &mut **gr;
                        (Some(&mut gr.main), Some(&mut gr.shortcut))
                    }
                    _ => (None, None),
                };
                let mut dx = backward_seq(&r.main, main, &gy, gm.map(|v| v.as_mut_slice()));
                let ds = backward_seq(&r.shortcut, shortcut, &gy, gs.map(|v| v.as_mut_slice()));
                dx.add_assign(&ds);
                dx
            }
            _ => unreachable!("cache does not belong to this layer"),
        }
    }

    pub(crate) fn for_each_param<'a>(&'a self, out: &mut Vec<ParamRef<'a>>) {
        match self {
            Layer::Conv(c) => {
                out.push(ParamRef::new(&c.name, "weight", &c.weight, true));
                if let Some(b) = &c.bias {
                    out.push(ParamRef::new(&c.name, "bias", b, true));
                }
            }
            Layer::BatchNorm(b) => {
                out.push(ParamRef::new(&b.name, "weight", &b.weight, true));
                out.push(ParamRef::new(&b.name, "bias", &b.bias, true));
                out.push(ParamRef::new(&b.name, "running_mean", &b.running_mean, false));
                out.push(ParamRef::new(&b.name, "running_var", &b.running_var, false));
            }
            Layer::Relu | Layer::Softplus | Layer::MaxPool(_) => {}
            Layer::Residual(r) => {
                r.main.iter().for_each(|l| l.for_each_param(out));
                r.shortcut.iter().for_each(|l| l.for_each_param(out));
            }
        }
    }

    pub(crate) fn for_each_param_mut<'a>(&'a mut self, out: &mut Vec<ParamMut<'a>>) {
        match self {
            Layer::Conv(c) => {
                out.push(ParamMut::new(&c.name, "weight", &mut c.weight, true));
                if let Some(b) = &mut c.bias {
                    out.push(ParamMut::new(&c.name, "bias", b, true));
                }
            }
            Layer::BatchNorm(b) => {
                out.push(ParamMut::new(&b.name, "weight", &mut b.weight, true));
                out.push(ParamMut::new(&b.name, "bias", &mut b.bias, true));
                out.push(ParamMut::new(&b.name, "running_mean", &mut b.running_mean, false));
                out.push(ParamMut::new(&b.name, "running_var", &mut b.running_var, false));
            }
            Layer::Relu | Layer::Softplus | Layer::MaxPool(_) => {}
            Layer::Residual(r) => {
                let r = &mut **r;
                r.main.iter_mut().for_each(|l| l.for_each_param_mut(out));
                r.shortcut.iter_mut().for_each(|l| l.for_each_param_mut(out));
            }
        }
    }

    /// Shape of each parameter tensor in the same order as `for_each_param`.
    pub(crate) fn param_shapes(&self, out: &mut Vec<Vec<usize>>) {
        match self {
            Layer::Conv(c) => {
                out.push(vec![c.out_channels, c.in_channels, c.kernel, c.kernel]);
                if c.bias.is_some() {
                    out.push(vec![c.out_channels]);
                }
            }
            Layer::BatchNorm(b) => {
                for _ in 0..4 {
                    out.push(vec![b.channels]);
                }
            }
            Layer::Relu | Layer::Softplus | Layer::MaxPool(_) => {}
            Layer::Residual(r) => {
                r.main.iter().for_each(|l| l.param_shapes(out));
                r.shortcut.iter().for_each(|l| l.param_shapes(out));
            }
        }
    }
}

/// Borrowed view of one named parameter tensor.
pub struct ParamRef<'a> {
    pub module: &'a str,
    pub field: &'static str,
    pub values: &'a [f64],
    pub trainable: bool,
}

impl<'a> ParamRef<'a> {
    fn new(module: &'a str, field: &'static str, values: &'a [f64], trainable: bool) -> Self {
        Self {
            module,
            field,
            values,
            trainable,
        }
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.module, self.field)
    }
}

pub struct ParamMut<'a> {
    pub module: &'a str,
    pub field: &'static str,
    pub values: &'a mut Vec<f64>,
    pub trainable: bool,
}

impl<'a> ParamMut<'a> {
    fn new(module: &'a str, field: &'static str, values: &'a mut Vec<f64>, trainable: bool) -> Self {
        Self {
            module,
            field,
            values,
            trainable,
        }
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.module, self.field)
    }
}

fn add_checked(y: &mut Tensor3, s: &Tensor3) -> Result<()> {
    if y.shape() != s.shape() {
        return Err(Error::Shape(format!(
            "residual branches disagree: {:?} vs {:?}",
            y.shape(),
            s.shape()
        )));
    }
    y.add_assign(s);
    Ok(())
}

fn relu_backward(y: &Tensor3, g: &Tensor3) -> Tensor3 {
    let mut dx = g.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn forward_seq(layers: &[Layer], x: &Tensor3) -> Result<Tensor3> {
    let mut cur = x.clone();
    for l in layers {
        cur = l.forward(&cur)?;
    }
    Ok(cur)
}

pub fn forward_seq_cached(layers: &[Layer], x: &Tensor3) -> Result<(Tensor3, Vec<Cache>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers {
        let (y, c) = l.forward_cached(&cur)?;
        caches.push(c);
        cur = y;
    }
    Ok((cur, caches))
}

pub fn backward_seq(
    layers: &[Layer],
    caches: &[Cache],
    g: &Tensor3,
    grads: Option<&mut [Layer]>,
) -> Tensor3 {
    let mut cur = g.clone();
    match grads {
        Some(gl) => {
            for ((l, c), gr) in layers.iter().zip(caches).zip(gl.iter_mut()).rev() {
                cur = l.backward(c, &cur, Some(gr));
            }
        }
        None => {
            for (l, c) in layers.iter().zip(caches).rev() {
                cur = l.backward(c, &cur, None);
            }
        }
    }
    cur
}
