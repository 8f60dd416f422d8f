//! Small fully connected autoencoder used by the reconstruction scorer.
//! Hidden layers use tanh, the output layer is linear. Parameters are kept
//! as one flat vector (per layer: weights row-major, then biases).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{seeded, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

fn layer_sizes(widths: &[usize]) -> Vec<(usize, usize)> {
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

pub fn param_count(widths: &[usize]) -> usize {
    layer_sizes(widths).iter().map(|(i, o)| i * o + o).sum()
}

impl Mlp {
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2
            || widths.iter().any(|w| *w == 0)
            || widths[0] != widths[widths.len() - 1]
        {
            return Err(invalid(
                "autoencoder widths must chain and end where they start",
            ));
        }
        let mut rng = seeded(seed, stream::RECON_INIT);
        let mut params = Vec::with_capacity(param_count(widths));
        for (i, o) in layer_sizes(widths) {
            let a = (6.0 / (i + o) as f64).sqrt();
            params.extend((0..i * o).map(|_| rng.random_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.widths.len() < 2 || self.params.len() != param_count(&self.widths) {
            return Err(invalid("autoencoder layer shapes do not chain"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        forward(&self.widths, &self.params, x)
            .pop()
            .expect("at least one layer")
    }

    /// Mean squared reconstruction error.
    pub fn error(&self, x: &[f64]) -> f64 {
        recon_error(&self.forward(x), x)
    }
}

fn recon_error(y: &[f64], x: &[f64]) -> f64 {
    y.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64
}

/// Activations of every layer, input first.
fn forward(widths: &[usize], params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let layers = layer_sizes(widths);
    let mut acts = vec![x.to_vec()];
    let mut off = 0;
    for (li, (ni, no)) in layers.iter().enumerate() {
        let w = &params[off..off + ni * no];
        let b = &params[off + ni * no..off + ni * no + no];
        off += ni * no + no;
        let input = acts.last().expect("input present");
        let last = li + 1 == layers.len();
        let out: Vec<f64> = (0..*no)
            .map(|r| {
                let z = b[r] + (0..*ni).map(|c| w[r * ni + c] * input[c]).sum::<f64>();
                if last {
                    z
                } else {
                    z.tanh()
                }
            })
            .collect();
        acts.push(out);
    }
    acts
}

/// Adds `scale * d err / d params` for one sample into `grad`; returns err.
fn backprop(widths: &[usize], params: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
    let acts = forward(widths, params, x);
    let layers = layer_sizes(widths);
    let y = acts.last().expect("output");
    let d = x.len() as f64;
    let err = recon_error(y, x);
    if scale == 0.0 {
        return err;
    }
    let mut delta: Vec<f64> = y
        .iter()
        .zip(x)
        .map(|(a, b)| scale * 2.0 * (a - b) / d)
        .collect();
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for (ni, no) in &layers {
        offsets.push(off);
        off += ni * no + no;
    }
    for li in (0..layers.len()).rev() {
        let (ni, no) = layers[li];
        let off = offsets[li];
        let input = &acts[li];
        for r in 0..no {
            for c in 0..ni {
                grad[off + r * ni + c] += delta[r] * input[c];
            }
            grad[off + ni * no + r] += delta[r];
        }
        if li > 0 {
            let w = &params[off..off + ni * no];
            delta = (0..ni)
                .map(|c| {
                    let back: f64 = (0..no).map(|r| w[r * ni + c] * delta[r]).sum();
                    back * (1.0 - input[c] * input[c])
                })
                .collect();
        }
    }
    err
}

/// Hinge-contrastive loss: mean expert error plus mean max(0, m - error) over negatives.
pub fn loss_and_grad(
    widths: &[usize],
    params: &[f64],
    experts: &[Vec<f64>],
    negatives: &[Vec<f64>],
    margin: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let ne = experts.len().max(1) as f64;
    let nn = negatives.len().max(1) as f64;
    let mut loss = 0.0;
    for x in experts {
        loss += backprop(widths, params, x, 1.0 / ne, &mut grad) / ne;
    }
    for x in negatives {
        let err = forward(widths, params, x)
            .pop()
            .map(|y| recon_error(&y, x))
            .unwrap_or(0.0);
        if err < margin {
            loss += (margin - err) / nn;
            backprop(widths, params, x, -1.0 / nn, &mut grad);
        }
    }
    (loss, grad)
}

pub fn loss(
    widths: &[usize],
    params: &[f64],
    experts: &[Vec<f64>],
    negatives: &[Vec<f64>],
    margin: f64,
) -> f64 {
    let ne = experts.len().max(1) as f64;
    let nn = negatives.len().max(1) as f64;
    let e: f64 = experts
        .iter()
        .map(|x| recon_error(&forward(widths, params, x).pop().unwrap(), x))
        .sum();
    let n: f64 = negatives
        .iter()
        .map(|x| (margin - recon_error(&forward(widths, params, x).pop().unwrap(), x)).max(0.0))
        .sum();
    e / ne + n / nn
}

/// Full-batch Adam on the hinge-contrastive loss.
pub fn train(
    mlp: &mut Mlp,
    experts: &[Vec<f64>],
    negatives: &[Vec<f64>],
    margin: f64,
    iterations: usize,
    step: f64,
) {
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; mlp.params.len()];
    let mut v = vec![0.0; mlp.params.len()];
    for t in 1..=iterations {
        let (_, g) = loss_and_grad(&mlp.widths, &mlp.params, experts, negatives, margin);
        let c1 = 1.0 - b1_pow(b1, t);
        let c2 = 1.0 - b1_pow(b2, t);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            mlp.params[i] -= step * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
}

fn b1_pow(b: f64, t: usize) -> f64 {
    b.powi(t.min(i32::MAX as usize) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let m = Mlp::init(&[2, 8, 2], 1).unwrap();
        assert_eq!(m.params.len(), 2 * 8 + 8 + 8 * 2 + 2);
        assert!(Mlp::init(&[2, 8, 3], 1).is_err());
        assert_eq!(m.forward(&[0.1, 0.2]).len(), 2);
    }
}
