//! Uniform classifier interface consumed by the CAM methods.
//!
//! A [`ClassifierHandle`] wraps a [`Network`] and answers three questions
//! about an image: the class logits, the activations at a named layer, and
//! the gradient of one raw class logit (not its softmax) with respect to
//! those activations. It also replays the forward pass from a layer, which
//! is what the finite-difference gradient oracle perturbs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::{InputSpec, Linear, Network};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inference,
    Training,
}

/// Raw class scores for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub scores: Vec<f64>,
}

impl LogitVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.scores.iter().enumerate() {
            if v > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

/// K×h×w feature maps of one layer at its native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStack {
    pub layer: String,
    pub maps: Tensor3,
}

/// ∂(class logit)/∂(activation), same shape as the matching activations.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientStack {
    pub layer: String,
    pub grads: Tensor3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHandle {
    network: Network,
    mode: Mode,
}

impl ClassifierHandle {
    /// Wraps a network in inference mode.
    pub fn new(network: Network) -> Self {
        Self {
            network,
            mode: Mode::Inference,
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes()
    }

    pub fn input_spec(&self) -> InputSpec {
        self.network.input
    }

    pub fn layer_registry(&self) -> Vec<&str> {
        self.network.layer_registry()
    }

    pub fn default_layer(&self) -> &str {
        self.network.default_layer()
    }

    /// The linear output head; exposed so callers can rescale or shift
    /// class outputs (invariance checks, calibration experiments).
    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.network.head
    }

    pub fn ensure_inference(&self) -> Result<()> {
        match self.mode {
            Mode::Inference => Ok(()),
            Mode::Training => Err(Error::TrainingMode),
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        let n = self.num_classes();
        if class >= n {
            return Err(Error::ClassIndex {
                index: class,
                num_classes: n,
            });
        }
        Ok(())
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<LogitVector> {
        let scores = self.network.logits(image)?;
        Ok(LogitVector { scores })
    }

    /// Forward passes over independent images. Results are in input order
    /// and do not depend on how the work is scheduled.
    pub fn forward_batch(&self, images: &[ImageTensor]) -> Result<Vec<LogitVector>> {
        exec::map(images, |img| self.forward(img)).into_iter().collect()
    }

    pub fn activations(&self, image: &ImageTensor, layer: &str) -> Result<ActivationStack> {
        let idx = self.network.stage_index(layer)?;
        let maps = self.network.stage_output(image, idx)?;
        Ok(ActivationStack {
            layer: layer.to_string(),
            maps,
        })
    }

    /// Activations and class-logit gradients of one layer from a single
    /// forward/backward pass.
    pub fn activations_and_gradients(
        &self,
        image: &ImageTensor,
        class: usize,
        layer: &str,
    ) -> Result<(ActivationStack, GradientStack, LogitVector)> {
        self.check_class(class)?;
        let idx = self.network.stage_index(layer)?;
        let trace = self.network.trace(image)?;
        let mut seed = vec![0.0; self.num_classes()];
        seed[class] = 1.0;
        let grads = self.network.backward_to(&trace, &seed, Some(idx));
        let maps = trace.outputs[idx].clone();
        Ok((
            ActivationStack {
                layer: layer.to_string(),
                maps,
            },
            GradientStack {
                layer: layer.to_string(),
                grads,
            },
            LogitVector {
                scores: trace.logits,
            },
        ))
    }

    pub fn grad_class_wrt_layer(
        &self,
        image: &ImageTensor,
        class: usize,
        layer: &str,
    ) -> Result<GradientStack> {
        self.activations_and_gradients(image, class, layer)
            .map(|(_, g, _)| g)
    }

    /// Logits obtained by feeding `activation` in place of the output of
    /// `layer` and running the remainder of the network.
    pub fn forward_from_layer(&self, layer: &str, activation: &Tensor3) -> Result<LogitVector> {
        let idx = self.network.stage_index(layer)?;
        activation.ensure_finite("activation")?;
        let scores = self.network.run_from(idx + 1, activation)?;
        Ok(LogitVector { scores })
    }

    /// Central-difference estimate of the class-logit gradient at `layer`.
    pub fn finite_difference_gradient(
        &self,
        image: &ImageTensor,
        class: usize,
        layer: &str,
        eps: f64,
    ) -> Result<GradientStack> {
        self.check_class(class)?;
        let acts = self.activations(image, layer)?;
        let grads = central_difference(&acts.maps, eps, |a| {
            self.forward_from_layer(layer, a).map(|l| l.scores[class])
        })?;
        Ok(GradientStack {
            layer: layer.to_string(),
            grads,
        })
    }

    /// Central difference at selected flat element indices only.
    pub fn finite_difference_at(
        &self,
        image: &ImageTensor,
        class: usize,
        layer: &str,
        eps: f64,
        indices: &[usize],
    ) -> Result<Vec<f64>> {
        check_eps(eps)?;
        self.check_class(class)?;
        let acts = self.activations(image, layer)?;
        let mut probe = acts.maps.clone();
        indices
            .iter()
            .map(|&i| {
                if i >= probe.len() {
                    return Err(Error::Validation(format!("element {i} out of range")));
                }
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + eps;
                let up = self.forward_from_layer(layer, &probe)?.scores[class];
                probe.data_mut()[i] = orig - eps;
                let down = self.forward_from_layer(layer, &probe)?.scores[class];
                probe.data_mut()[i] = orig;
                Ok((up - down) / (2.0 * eps))
            })
            .collect()
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!("finite-difference step must be > 0, got {eps}")));
    }
    Ok(())
}

/// Elementwise `(f(a + ε·e_i) − f(a − ε·e_i)) / 2ε` for every element of `a`.
pub fn central_difference(
    a: &Tensor3,
    eps: f64,
    mut f: impl FnMut(&Tensor3) -> Result<f64>,
) -> Result<Tensor3> {
    check_eps(eps)?;
    let mut probe = a.clone();
    let mut out = Tensor3::zeros(a.channels(), a.height(), a.width());
    for i in 0..a.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{reference_network, Architecture, Stage};

    fn zeros_image() -> Tensor3 {
        Tensor3::zeros(1, 64, 64)
    }

    fn probe_image() -> Tensor3 {
        Tensor3::from_fn(1, 64, 64, |_, y, x| {
            let dy = y as f64 - 24.0;
            let dx = x as f64 - 40.0;
            0.2 + 0.8 * libm::exp(-(dy * dy + dx * dx) / 50.0) + 0.05 * libm::sin(x as f64 * 0.7)
        })
    }

    /// Network whose only stage is the identity: activations equal the input
    /// and the head sees the pooled input directly.
    fn identity_net(weights: [f64; 4]) -> ClassifierHandle {
        let mut head = Linear::new("fc", 2, 2);
        head.weight = weights.to_vec();
        let net = Network::new(
            Architecture::Custom,
            InputSpec { channels: 2, height: 8, width: 8 },
            vec![Stage::new("input", true, vec![])],
            head,
        )
        .unwrap();
        ClassifierHandle::new(net)
    }

    // reference_network(7) on the zero image, recomputed by an independent
    // NumPy forward pass over the exported weights.
    const GOLDEN_ZERO_LOGITS: [f64; 2] = [-0.5017801523531424, -0.3869436783545178];
    const GOLDEN_ZERO_STAGE3: [((usize, usize, usize), f64); 4] = [
        ((0, 0, 0), 1.502943550501317),
        ((5, 3, 4), 1.791283842193868),
        ((31, 7, 7), 0.5631705334182762),
        ((17, 0, 5), 0.15721730532636297),
    ];

    #[test]
    fn golden_logits_on_zero_image() {
        let h = ClassifierHandle::new(reference_network(7));
        let l = h.forward(&zeros_image()).unwrap();
        for (a, b) in l.scores.iter().zip(GOLDEN_ZERO_LOGITS) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn golden_stage3_on_zero_image() {
        let h = ClassifierHandle::new(reference_network(7));
        let a = h.activations(&zeros_image(), "stage3").unwrap();
        assert_eq!(a.maps.shape(), (32, 8, 8));
        for ((c, y, x), v) in GOLDEN_ZERO_STAGE3 {
            assert!((a.maps.at(c, y, x) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut h = ClassifierHandle::new(reference_network(3));
        h.head_mut().weight.iter_mut().for_each(|w| *w = 0.0);
        h.head_mut().bias.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(h.forward(&probe_image()).unwrap().scores, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let h = ClassifierHandle::new(reference_network(7));
        let img = probe_image();
        assert_eq!(h.forward(&img).unwrap(), h.forward(&img.clone()).unwrap());
        assert_eq!(
            h.activations(&img, "stage2").unwrap(),
            h.activations(&img, "stage2").unwrap()
        );
    }

    #[test]
    fn seeds_control_weights() {
        assert_eq!(reference_network(11), reference_network(11));
        let img = probe_image();
        let a = ClassifierHandle::new(reference_network(1)).forward(&img).unwrap();
        let b = ClassifierHandle::new(reference_network(2)).forward(&img).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn input_errors() {
        let h = ClassifierHandle::new(reference_network(7));
        assert!(matches!(
            h.forward(&Tensor3::zeros(3, 64, 64)),
            Err(Error::InputSpec(_))
        ));
        let mut bad = zeros_image();
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(h.forward(&bad), Err(Error::Validation(_))));
        assert!(matches!(
            h.activations(&zeros_image(), "fc"),
            Err(Error::UnknownLayer(_))
        ));
        assert!(matches!(
            h.grad_class_wrt_layer(&zeros_image(), 2, "stage3"),
            Err(Error::ClassIndex { index: 2, num_classes: 2 })
        ));
        assert!(matches!(
            h.finite_difference_gradient(&zeros_image(), 0, "stage3", 0.0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn identity_stage_passes_input_through() {
        let h = identity_net([1.0, 0.0, 0.0, 1.0]);
        let img = Tensor3::from_fn(2, 8, 8, |c, y, x| (c * 64 + y * 8 + x) as f64);
        assert_eq!(h.activations(&img, "input").unwrap().maps, img);
    }

    #[test]
    fn linear_head_gradient_is_weight_over_pool_area() {
        let h = identity_net([0.5, -2.0, 3.0, 0.25]);
        let img = Tensor3::from_fn(2, 8, 8, |c, y, x| (c + y + x) as f64 * 0.1);
        let g = h.grad_class_wrt_layer(&img, 1, "input").unwrap().grads;
        for c in 0..2 {
            let expected = [3.0, 0.25][c] / 64.0;
            assert!(g.channel(c).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn gradient_doubles_with_head() {
        let mut h = ClassifierHandle::new(reference_network(7));
        let img = probe_image();
        let g1 = h.grad_class_wrt_layer(&img, 1, "stage2").unwrap().grads;
        let n = h.head_mut().in_features;
        h.head_mut().weight[n..2 * n].iter_mut().for_each(|w| *w *= 2.0);
        let g2 = h.grad_class_wrt_layer(&img, 1, "stage2").unwrap().grads;
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradient_shape_matches_activations_everywhere() {
        let h = ClassifierHandle::new(reference_network(7));
        let img = probe_image();
        for layer in h.layer_registry() {
            let (a, g, _) = h.activations_and_gradients(&img, 0, layer).unwrap();
            assert_eq!(a.maps.shape(), g.grads.shape());
        }
    }

    #[test]
    fn central_difference_of_square() {
        let a = Tensor3::filled(1, 1, 1, 3.0);
        let g = central_difference(&a, 1e-3, |t| Ok(t.data()[0] * t.data()[0])).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let c = central_difference(&a, 1e-3, |_| Ok(4.2)).unwrap();
        assert_eq!(c.data()[0], 0.0);
    }

    #[test]
    fn analytic_matches_finite_difference_on_reference_net() {
        let h = ClassifierHandle::new(reference_network(7));
        let img = probe_image();
        let layer = "stage2";
        let g = h.grad_class_wrt_layer(&img, 1, layer).unwrap().grads;
        let idx: Vec<usize> = (0..g.len()).step_by(37).collect();
        let fd = h.finite_difference_at(&img, 1, layer, 1e-3, &idx).unwrap();
        for (&i, f) in idx.iter().zip(fd) {
            let a = g.data()[i];
            assert!((a - f).abs() <= 1e-3 * a.abs().max(1e-6), "element {i}: {a} vs {f}");
        }
    }

    #[test]
    fn training_mode_is_reported() {
        let mut h = ClassifierHandle::new(reference_network(7));
        h.set_mode(Mode::Training);
        assert_eq!(h.ensure_inference(), Err(Error::TrainingMode));
    }
}
