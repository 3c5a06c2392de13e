//! Dense MLP math over a fixed set of weight matrices.
//!
//! The trainer takes one weight snapshot per layer at the start of a step and
//! runs everything here against it. Hidden layers compute
//! `relu(s * (W^T a) + b)`, the output layer `softmax(s * (W^T a) + b)`,
//! where `s = 1 / sqrt(fan_in)` is a fixed digital scale.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Probability floor applied before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct LayerParams<'a> {
    pub weights: &'a Matrix,
    pub bias: &'a [f64],
    pub scale: f64,
}

pub fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass {
    /// Input to each layer; `inputs[0]` is the sample itself.
    pub inputs: Vec<Vec<f64>>,
    /// Raw column sums `W^T a` per layer, before scaling and bias.
    pub currents: Vec<Vec<f64>>,
    /// `scale * current + bias` per layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl ForwardPass {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().expect("at least one layer")
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Per-layer gradients of the loss with respect to weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(layers: &[LayerParams<'_>]) -> Self {
        Self {
            weights: layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.scale(factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0))
            && self.biases.iter().flatten().all(|&v| v == 0.0)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::domain(format!("label {label} outside {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

fn check_chain(layers: &[LayerParams<'_>]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::domain("network has no layers"));
    }
    for (l, p) in layers.iter().enumerate() {
        if p.bias.len() != p.weights.cols() {
            return Err(Error::domain(format!("layer {l}: bias length does not match outputs")));
        }
        if l > 0 && layers[l - 1].weights.cols() != p.weights.rows() {
            return Err(Error::domain(format!("layer {l}: fan-in does not match previous layer")));
        }
    }
    Ok(())
}

pub fn forward(layers: &[LayerParams<'_>], x: &[f64]) -> Result<ForwardPass> {
    check_chain(layers)?;
    let last = layers.len() - 1;
    let mut inputs = Vec::with_capacity(layers.len());
    let mut currents = Vec::with_capacity(layers.len());
    let mut pre_activations = Vec::with_capacity(layers.len());
    let mut a = x.to_vec();
    for (l, p) in layers.iter().enumerate() {
        let current = p.weights.vmm_forward(&a)?;
        let z: Vec<f64> = current
            .iter()
            .zip(p.bias)
            .map(|(c, b)| p.scale * c + b)
            .collect();
        inputs.push(a);
        a = if l < last {
            z.iter().map(|&v| relu(v)).collect()
        } else {
            Vec::new()
        };
        currents.push(current);
        pre_activations.push(z);
    }
    let probs = softmax(pre_activations.last().expect("non-empty"));
    Ok(ForwardPass {
        inputs,
        currents,
        pre_activations,
        probs,
    })
}

/// Add the gradients of the cross-entropy loss for one sample to `grads`.
pub fn backward_into(
    layers: &[LayerParams<'_>],
    pass: &ForwardPass,
    label: usize,
    grads: &mut Gradients,
) -> Result<()> {
    if label >= pass.probs.len() {
        return Err(Error::domain(format!(
            "label {label} outside {} classes",
            pass.probs.len()
        )));
    }
    let mut delta: Vec<f64> = pass.probs.clone();
    delta[label] -= 1.0;
    for l in (0..layers.len()).rev() {
        let p = &layers[l];
        grads.weights[l].add_outer(&pass.inputs[l], &delta, p.scale);
        for (g, d) in grads.biases[l].iter_mut().zip(&delta) {
            *g += d;
        }
        if l > 0 {
            let back = p.weights.vmm_backward(&delta)?;
            delta = back
                .iter()
                .zip(&pass.pre_activations[l - 1])
                .map(|(r, &z)| if z > 0.0 { p.scale * r } else { 0.0 })
                .collect();
        }
    }
    Ok(())
}

pub fn backward(layers: &[LayerParams<'_>], pass: &ForwardPass, label: usize) -> Result<Gradients> {
    let mut grads = Gradients::zeros(layers);
    backward_into(layers, pass, label, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_and_loss() {
        let p = softmax(&[0.0; 10]);
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert!((cross_entropy(&p, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(cross_entropy(&[0.0, 1.0], 0).unwrap(), -PROB_FLOOR.ln());
        assert!(cross_entropy(&p, 10).is_err());
        let big = softmax(&[1000.0, 0.0]);
        assert!(big[0].is_finite() && big[1] >= 0.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.1; 4]), 0);
    }

    #[test]
    fn single_layer_outer_product() {
        let w = Matrix::from_vec(1, 2, vec![0.3, -0.2]).unwrap();
        let b = [0.0, 0.0];
        let layers = [LayerParams {
            weights: &w,
            bias: &b,
            scale: 1.0,
        }];
        let pass = forward(&layers, &[1.0]).unwrap();
        let g = backward(&layers, &pass, 0).unwrap();
        let delta = [pass.probs[0] - 1.0, pass.probs[1]];
        assert_eq!(g.weights[0].as_slice(), &delta);
        assert_eq!(g.biases[0], delta.to_vec());
    }

    #[test]
    fn chain_shape_errors() {
        let w1 = Matrix::zeros(2, 3);
        let w2 = Matrix::zeros(2, 2);
        let b3 = [0.0; 3];
        let b2 = [0.0; 2];
        let layers = [
            LayerParams { weights: &w1, bias: &b3, scale: 1.0 },
            LayerParams { weights: &w2, bias: &b2, scale: 1.0 },
        ];
        assert!(forward(&layers, &[0.0, 0.0]).is_err());
        assert!(forward(&[], &[0.0]).is_err());
    }

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], rng: &mut ChaCha8Rng) -> (Vec<Matrix>, Vec<Vec<f64>>) {
        let weights = sizes
            .windows(2)
            .map(|p| Matrix::from_fn(p[0], p[1], |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let biases = sizes[1..]
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        (weights, biases)
    }

    fn params<'a>(w: &'a [Matrix], b: &'a [Vec<f64>]) -> Vec<LayerParams<'a>> {
        w.iter()
            .zip(b)
            .map(|(w, b)| LayerParams {
                weights: w,
                bias: b,
                scale: fan_in_scale(w.rows()),
            })
            .collect()
    }

    /// Straight-line reimplementation with explicit index loops.
    fn oracle_probs(w: &[Matrix], b: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let last = w.len() - 1;
        let mut a = x.to_vec();
        for (l, (w, b)) in w.iter().zip(b).enumerate() {
            let s = 1.0 / (w.rows() as f64).sqrt();
            let mut z = vec![0.0; w.cols()];
            for j in 0..w.cols() {
                let mut acc = 0.0;
                for i in 0..w.rows() {
                    acc += w.get(i, j) * a[i];
                }
                z[j] = s * acc + b[j];
            }
            if l < last {
                a = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
        let m = a.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = a.iter().map(|v| (v - m).exp()).collect();
        let t: f64 = e.iter().sum();
        e.iter().map(|v| v / t).collect()
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (w, b) = random_net(&[6, 5, 4, 3], &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let pass = forward(&params(&w, &b), &x).unwrap();
            let want = oracle_probs(&w, &b, &x);
            for (p, q) in pass.probs.iter().zip(&want) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1e-300), "{p} vs {q}");
            }
            assert!((pass.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn loss_at(w: &[Matrix], b: &[Vec<f64>], x: &[f64], label: usize) -> f64 {
        cross_entropy(&forward(&params(w, b), x).unwrap().probs, label).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut w, b) = random_net(&[16, 8, 4], &mut rng);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let label = 2;
        let pass = forward(&params(&w, &b), &x).unwrap();
        let grads = backward(&params(&w, &b), &pass, label).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        while checked < 20 {
            let l = rng.random_range(0..2);
            let (r, c) = (rng.random_range(0..w[l].rows()), rng.random_range(0..w[l].cols()));
            let analytic = grads.weights[l].get(r, c);
            let orig = w[l].get(r, c);
            w[l].set(r, c, orig + h);
            let up = loss_at(&w, &b, &x, label);
            w[l].set(r, c, orig - h);
            let down = loss_at(&w, &b, &x, label);
            w[l].set(r, c, orig);
            let numeric = (up - down) / (2.0 * h);
            if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
                // Dead ReLU path; nothing to compare.
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            assert!(rel <= 1e-4, "layer {l} ({r},{c}): {analytic} vs {numeric}");
            checked += 1;
        }
    }

    #[test]
    fn one_hot_output_gives_zero_gradient() {
        let w = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let b = [800.0, 0.0];
        let layers = [LayerParams { weights: &w, bias: &b, scale: 1.0 }];
        let pass = forward(&layers, &[1.0]).unwrap();
        assert_eq!(pass.probs, vec![1.0, 0.0]);
        assert!(backward(&layers, &pass, 0).unwrap().is_zero());
    }

    #[test]
    fn cross_entropy_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let t: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let label = rng.random_range(0..10);
            let want = -(p[label].max(1e-12)).ln();
            assert!((cross_entropy(&p, label).unwrap() - want).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn argmax_ignores_positive_logit_scaling(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            k in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = z.iter().map(|v| v * k).collect();
            prop_assert_eq!(argmax(&softmax(&z)), argmax(&softmax(&scaled)));
        }
    }
}
