use alloc::vec::Vec;

use super::ops::{mask_input, min_max_normalize, softmax, upsample_bilinear, weighted_sum_relu};
use super::{ChannelWeights, SaliencyMap, Weighting, WeightingKind};
use crate::adapter::{ActivationStack, ClassifierHandle, LogitVector};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{ImageTensor, Map2, Tensor3};

fn finish(acts: &Tensor3, weights: &[f64], height: usize, width: usize) -> Result<SaliencyMap> {
    let raw = weighted_sum_relu(acts, weights)?;
    let up = upsample_bilinear(&raw, height, width)?;
    min_max_normalize(&up)
}

pub fn grad_cam_weights(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
) -> Result<(ActivationStack, ChannelWeights)> {
    handle.ensure_inference()?;
    let (acts, grads, _) = handle.activations_and_gradients(image, class, layer)?;
    let g = &grads.grads;
    let area = (g.height() * g.width()) as f64;
    let weights = (0..g.channels())
        .map(|k| g.channel(k).iter().sum::<f64>() / area)
        .collect();
    Ok((
        acts,
        ChannelWeights {
            kind: WeightingKind::GradientGap,
            weights,
        },
    ))
}

pub fn grad_cam(handle: &ClassifierHandle, image: &ImageTensor, class: usize, layer: &str) -> Result<SaliencyMap> {
    let (acts, w) = grad_cam_weights(handle, image, class, layer)?;
    finish(&acts.maps, &w.weights, image.height(), image.width())
}

/// `H_k`: each channel upsampled to the image size and min-max normalized.
pub fn channel_masks(image: &ImageTensor, acts: &ActivationStack) -> Result<Vec<SaliencyMap>> {
    (0..acts.maps.channels())
        .map(|k| {
            let up = upsample_bilinear(&acts.maps.channel_map(k), image.height(), image.width())?;
            min_max_normalize(&up)
        })
        .collect()
}

/// Logits of `X ∘ H_k` for every channel, evaluated `batch_size` at a time.
fn masked_logits(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    acts: &ActivationStack,
    batch_size: usize,
) -> Result<Vec<LogitVector>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let masks = channel_masks(image, acts)?;
    let mut out = Vec::with_capacity(masks.len());
    for chunk in masks.chunks(batch_size) {
        let batch = chunk
            .iter()
            .map(|m| mask_input(image, m))
            .collect::<Result<Vec<_>>>()?;
        out.extend(handle.forward_batch(&batch)?);
    }
    Ok(out)
}

fn check_class(handle: &ClassifierHandle, class: usize) -> Result<()> {
    if class >= handle.num_classes() {
        return Err(Error::ClassIndex {
            index: class,
            num_classes: handle.num_classes(),
        });
    }
    Ok(())
}

pub fn score_cam_weights(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
    batch_size: usize,
) -> Result<(ActivationStack, ChannelWeights)> {
    handle.ensure_inference()?;
    check_class(handle, class)?;
    let acts = handle.activations(image, layer)?;
    let baseline_image = Tensor3::zeros(image.channels(), image.height(), image.width());
    let baseline = handle.forward(&baseline_image)?.scores[class];
    let increases: Vec<f64> = masked_logits(handle, image, &acts, batch_size)?
        .iter()
        .map(|l| l.scores[class] - baseline)
        .collect();
    let weights = softmax(&increases)?;
    Ok((
        acts,
        ChannelWeights {
            kind: WeightingKind::ScoreSoftmax,
            weights,
        },
    ))
}

pub fn score_cam(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
    batch_size: usize,
) -> Result<SaliencyMap> {
    let (acts, w) = score_cam_weights(handle, image, class, layer, batch_size)?;
    finish(&acts.maps, &w.weights, image.height(), image.width())
}

/// Channel weights of Cfd-CAM: the classifier's target-class confidence
/// (softmax probability) on each channel-masked input, or the raw logit for
/// the ablation variant.
pub fn cfd_cam_weights(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
    weighting: Weighting,
    batch_size: usize,
) -> Result<(ActivationStack, ChannelWeights)> {
    handle.ensure_inference()?;
    check_class(handle, class)?;
    let acts = handle.activations(image, layer)?;
    let logits = masked_logits(handle, image, &acts, batch_size)?;
    let (kind, weights) = match weighting {
        Weighting::Confidence => (
            WeightingKind::Confidence,
            logits
                .iter()
                .map(|l| softmax(&l.scores).map(|p| p[class]))
                .collect::<Result<Vec<_>>>()?,
        ),
        Weighting::Logits => (
            WeightingKind::Logit,
            logits.iter().map(|l| l.scores[class]).collect(),
        ),
    };
    Ok((acts, ChannelWeights { kind, weights }))
}

pub fn cfd_cam(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
    weighting: Weighting,
    batch_size: usize,
) -> Result<SaliencyMap> {
    let (acts, w) = cfd_cam_weights(handle, image, class, layer, weighting, batch_size)?;
    finish(&acts.maps, &w.weights, image.height(), image.width())
}

/// One layer's LayerCAM map `Σ_k ReLU(G_k) ⊙ A_k`, upsampled and normalized.
pub fn layer_cam_layer_map(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layer: &str,
) -> Result<SaliencyMap> {
    handle.ensure_inference()?;
    let (acts, grads, _) = handle.activations_and_gradients(image, class, layer)?;
    let (k, h, w) = acts.maps.shape();
    let mut m = Map2::zeros(h, w);
    for c in 0..k {
        for ((o, a), g) in m
            .data_mut()
            .iter_mut()
            .zip(acts.maps.channel(c))
            .zip(grads.grads.channel(c))
        {
            *o += math::relu(*g) * a;
        }
    }
    min_max_normalize(&upsample_bilinear(&m, image.height(), image.width())?)
}

pub fn layer_cam(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class: usize,
    layers: &[impl AsRef<str>],
) -> Result<SaliencyMap> {
    if layers.is_empty() {
        return Err(Error::Validation("LayerCAM needs at least one layer".into()));
    }
    let mut fused: Option<Map2> = None;
    for layer in layers {
        let m = layer_cam_layer_map(handle, image, class, layer.as_ref())?.into_map();
        fused = Some(match fused {
            None => m,
            Some(mut f) => {
                for (a, b) in f.data_mut().iter_mut().zip(m.data()) {
                    *a = a.max(*b);
                }
                f
            }
        });
    }
    min_max_normalize(&fused.expect("at least one layer"))
}
