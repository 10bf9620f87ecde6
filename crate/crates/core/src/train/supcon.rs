use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// B×d embeddings, each row of unit Euclidean norm, with one label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub const NORM_TOLERANCE: f64 = 1e-6;

    /// Validates row norms, `B ≥ 2` and label count.
    pub fn new(rows: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) || dim == 0 {
            return Err(Error::Shape("embedding rows must share a positive dimension".into()));
        }
        Self::from_flat(dim, rows.concat(), labels.to_vec())
    }

    pub fn from_flat(dim: usize, embeddings: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || !embeddings.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", embeddings.len())));
        }
        let b = embeddings.len() / dim;
        if b < 2 {
            return Err(Error::Validation("a contrastive batch needs at least two rows".into()));
        }
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for {b} embeddings", labels.len())));
        }
        for (i, row) in embeddings.chunks(dim).enumerate() {
            let n = math::sqrt(row.iter().map(|v| v * v).sum());
            if !((n - 1.0).abs() <= Self::NORM_TOLERANCE) {
                return Err(Error::Validation(format!("embedding {i} has norm {n}")));
            }
        }
        Ok(Self { dim, embeddings, labels })
    }

    /// L2-normalizes each row first. Zero rows are rejected.
    pub fn normalized(rows: &[Vec<f64>], labels: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let n = math::sqrt(r.iter().map(|v| v * v).sum());
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Validation("cannot normalize a zero or non-finite embedding".into()));
            }
            out.push(r.iter().map(|v| v / n).collect::<Vec<_>>());
        }
        Self::new(&out, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(batch: &EmbeddingBatch, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Validation(format!("temperature {temperature} must be positive")));
    }
    let labels = batch.labels();
    for (i, &l) in labels.iter().enumerate() {
        if !labels.iter().enumerate().any(|(p, &lp)| p != i && lp == l) {
            return Err(Error::Contract(format!("anchor {i} (label {l}) has no positive in the batch")));
        }
    }
    Ok(())
}

/// Supervised contrastive loss: mean over anchors of the negative average
/// log-probability of each positive among all other samples.
pub fn supcon_loss(batch: &EmbeddingBatch, temperature: f64) -> Result<f64> {
    supcon_loss_and_grad(batch, temperature).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the (unconstrained) embedding
/// rows, flattened B×d.
pub fn supcon_loss_and_grad(batch: &EmbeddingBatch, temperature: f64) -> Result<(f64, Vec<f64>)> {
    check(batch, temperature)?;
    let b = batch.len();
    let labels = batch.labels();
    let mut sim = vec![0.0; b * b];
    for i in 0..b {
        for a in 0..b {
            sim[i * b + a] = dot(batch.row(i), batch.row(a)) / temperature;
        }
    }
    // coef[i][a] = dL/ds_ia
    let mut coef = vec![0.0; b * b];
    let mut loss = 0.0;
    for i in 0..b {
        let row = &sim[i * b..(i + 1) * b];
        let mx = (0..b).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&a| a != i).map(|a| math::exp(row[a] - mx)).sum();
        let lse = mx + math::log(z);
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let np = positives.len() as f64;
        loss += positives.iter().map(|&p| lse - row[p]).sum::<f64>() / np;
        for a in (0..b).filter(|&a| a != i) {
            coef[i * b + a] = math::exp(row[a] - lse) / b as f64;
        }
        for &p in &positives {
            coef[i * b + p] -= 1.0 / (np * b as f64);
        }
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("contrastive loss is {loss}")));
    }
    let d = batch.dim();
    let mut grad = vec![0.0; b * d];
    for i in 0..b {
        for a in 0..b {
            let c = (coef[i * b + a] + coef[a * b + i]) / temperature;
            if c != 0.0 {
                for (g, z) in grad[i * d..(i + 1) * d].iter_mut().zip(batch.row(a)) {
                    *g += c * z;
                }
            }
        }
    }
    Ok((loss.max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct transcription of the definition with nested loops.
    fn loop_oracle(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let b = rows.len();
        let mut total = 0.0;
        for i in 0..b {
            let mut denom = 0.0;
            for a in 0..b {
                if a != i {
                    denom += (dot(&rows[i], &rows[a]) / tau).exp();
                }
            }
            let mut acc = 0.0;
            let mut np = 0;
            for p in 0..b {
                if p != i && labels[p] == labels[i] {
                    acc += ((dot(&rows[i], &rows[p]) / tau).exp() / denom).ln();
                    np += 1;
                }
            }
            total += -acc / np as f64;
        }
        total / b as f64
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn identical_pair_is_zero() {
        let rows = vec![unit(&[1.0, 2.0, 2.0]); 2];
        let b = EmbeddingBatch::new(&rows, &[3, 3]).unwrap();
        assert_eq!(supcon_loss(&b, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_four() {
        let rows = vec![
            unit(&[1.0, 0.0]),
            unit(&[0.9, 0.1]),
            unit(&[0.0, 1.0]),
            unit(&[-0.2, 1.0]),
        ];
        let labels = [0, 0, 1, 1];
        let b = EmbeddingBatch::new(&rows, &labels).unwrap();
        let l = supcon_loss(&b, 0.07).unwrap();
        assert!((l - loop_oracle(&rows, &labels, 0.07)).abs() < 1e-9);
        assert!(l < 0.01);
    }

    #[test]
    fn large_temperature_limit() {
        let rows = vec![unit(&[1.0, 0.2]), unit(&[0.3, 1.0]), unit(&[-1.0, 0.5]), unit(&[0.1, -1.0]), unit(&[1.0, 1.0])];
        let b = EmbeddingBatch::new(&rows, &[0, 1, 0, 1, 1]).unwrap();
        assert!((supcon_loss(&b, 1e6).unwrap() - 4f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn contract_errors() {
        let rows = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 1.0])];
        let b = EmbeddingBatch::new(&rows, &[0, 0, 1]).unwrap();
        assert!(matches!(supcon_loss(&b, 0.07), Err(Error::Contract(_))));
        let b = EmbeddingBatch::new(&rows, &[0, 0, 0]).unwrap();
        assert!(supcon_loss(&b, 0.0).is_err());
        assert!(EmbeddingBatch::new(&[vec![2.0, 0.0], vec![1.0, 0.0]], &[0, 0]).is_err());
        assert!(EmbeddingBatch::new(&[vec![1.0, 0.0]], &[0]).is_err());
        assert!(EmbeddingBatch::new(&rows, &[0, 0]).is_err());
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..=16, 1usize..=8).prop_flat_map(|(b, d)| {
            (
                proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, d), b),
                proptest::collection::vec(0usize..3, b),
            )
        })
        .prop_filter_map("needs unit rows and positives", |(rows, mut labels)| {
            if rows.iter().any(|r| r.iter().map(|v| v * v).sum::<f64>() < 1e-4) {
                return None;
            }
            // Give every anchor a partner by pairing singleton labels.
            for i in 0..labels.len() {
                let l = labels[i];
                if labels.iter().filter(|&&x| x == l).count() == 1 {
                    labels[i] = labels[(i + 1) % labels.len()];
                }
            }
            let ok = (0..labels.len())
                .all(|i| (0..labels.len()).any(|p| p != i && labels[p] == labels[i]));
            ok.then(|| (rows.iter().map(|r| unit(r)).collect(), labels))
        })
    }

    proptest! {
        #[test]
        fn matches_loop_oracle((rows, labels) in batch_strategy(), tau in 0.05f64..2.0) {
            let b = EmbeddingBatch::new(&rows, &labels).unwrap();
            let l = supcon_loss(&b, tau).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
            prop_assert!((l - loop_oracle(&rows, &labels, tau)).abs() < 1e-9);
        }

        #[test]
        fn rotation_invariant((rows, labels) in batch_strategy(), theta in 0.0f64..core::f64::consts::TAU) {
            let (c, s) = (theta.cos(), theta.sin());
            let rotated: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    if r.len() >= 2 {
                        let (a, b) = (r[0], r[1]);
                        r[0] = c * a - s * b;
                        r[1] = s * a + c * b;
                    } else {
                        r[0] = -r[0];
                    }
                    r
                })
                .collect();
            let l0 = supcon_loss(&EmbeddingBatch::new(&rows, &labels).unwrap(), 0.07).unwrap();
            let l1 = supcon_loss(&EmbeddingBatch::new(&rotated, &labels).unwrap(), 0.07).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9 * l0.abs().max(1.0));
        }

        #[test]
        fn gradient_matches_finite_differences((rows, labels) in batch_strategy()) {
            let tau = 0.5;
            let b = EmbeddingBatch::new(&rows, &labels).unwrap();
            let (_, grad) = supcon_loss_and_grad(&b, tau).unwrap();
            let d = rows[0].len();
            // Evaluate the loss formula on perturbed, unnormalized rows.
            let eval = |r: &[Vec<f64>]| loop_oracle(r, &labels, tau);
            let eps = 1e-6;
            for i in 0..rows.len() {
                for k in 0..d {
                    let mut p = rows.clone();
                    p[i][k] += eps;
                    let mut m = rows.clone();
                    m[i][k] -= eps;
                    let fd = (eval(&p) - eval(&m)) / (2.0 * eps);
                    prop_assert!((fd - grad[i * d + k]).abs() < 1e-5, "{} vs {}", fd, grad[i * d + k]);
                }
            }
        }
    }
}
