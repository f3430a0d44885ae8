//! Multilayer perceptron building blocks with hand-written backward passes.
//!
//! There is no autodiff anywhere in this crate. Every network is a stack of
//! [`LayerParams`]; [`mlp_forward`] records the per-layer inputs and
//! pre-activations needed by [`mlp_backward`], and the flatten/assign helpers
//! move whole stacks in and out of the flat vectors the optimizers work on.
//!
//! Parameter layout convention: weights are `[in_dim x out_dim]`, a batch is
//! `[n x in_dim]`, and a layer computes `activation(x * W + b)` row by row.
//! Flattening order is (weights row-major, then bias) per layer, in stack
//! order. This order is part of the checkpoint format.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn new(weights: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dimension(
                "LayerParams::new",
                format!("bias of length {}", weights.cols()),
                bias.len().to_string(),
            ));
        }
        Ok(LayerParams {
            weights,
            bias,
            activation,
        })
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        LayerParams {
            weights: Tensor2::from_vec(in_dim, out_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-layer inputs and pre-activations recorded during a forward pass.
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    preacts: Vec<Tensor2>,
}

impl MlpCache {
    pub fn output(&self, stack: &[LayerParams]) -> Result<Tensor2> {
        let last = self
            .preacts
            .last()
            .ok_or_else(|| Error::Numerical("forward cache for empty stack".into()))?;
        let act = stack
            .last()
            .ok_or_else(|| Error::Numerical("empty parameter stack".into()))?
            .activation;
        Ok(last.map(|x| act.apply(x)))
    }
}

/// Runs the stack on `input` (`[n x in_dim]`) and keeps what backward needs.
pub fn mlp_forward(stack: &[LayerParams], input: &Tensor2) -> Result<(Tensor2, MlpCache)> {
    if stack.is_empty() {
        return Err(Error::Config("mlp_forward on an empty stack".into()));
    }
    let mut inputs = Vec::with_capacity(stack.len());
    let mut preacts = Vec::with_capacity(stack.len());
    let mut current = input.clone();
    for (i, layer) in stack.iter().enumerate() {
        if current.cols() != layer.in_dim() {
            return Err(Error::dimension(
                "mlp_forward",
                format!("layer {i} input width {}", layer.in_dim()),
                current.cols().to_string(),
            ));
        }
        let mut pre = current.matmul(&layer.weights)?;
        for r in 0..pre.rows() {
            let row = pre.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        inputs.push(current);
        current = pre.map(|x| layer.activation.apply(x));
        preacts.push(pre);
    }
    Ok((current, MlpCache { inputs, preacts }))
}

/// Forward pass without keeping the cache.
pub fn mlp_apply(stack: &[LayerParams], input: &Tensor2) -> Result<Tensor2> {
    mlp_forward(stack, input).map(|(out, _)| out)
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

/// Backpropagates `upstream` (dLoss/dOutput, same shape as the forward output)
/// through the stack. Returns per-layer gradients and dLoss/dInput.
pub fn mlp_backward(
    stack: &[LayerParams],
    cache: &MlpCache,
    upstream: &Tensor2,
) -> Result<(Vec<LayerGrads>, Tensor2)> {
    if cache.inputs.len() != stack.len() {
        return Err(Error::dimension(
            "mlp_backward",
            format!("cache for {} layers", stack.len()),
            cache.inputs.len().to_string(),
        ));
    }
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(stack.len());
    let mut d_act = upstream.clone();
    for (i, layer) in stack.iter().enumerate().rev() {
        let pre = &cache.preacts[i];
        let d_pre = d_act.zip_map(pre, |g, z| g * layer.activation.derivative(z))?;
        let input = &cache.inputs[i];
        let d_weights = input.transpose().matmul(&d_pre)?;
        let mut d_bias = vec![0.0; layer.out_dim()];
        for r in 0..d_pre.rows() {
            for (acc, &g) in d_bias.iter_mut().zip(d_pre.row(r)) {
                *acc += g;
            }
        }
        d_act = d_pre.matmul(&layer.weights.transpose())?;
        grads.push(LayerGrads {
            weights: d_weights,
            bias: d_bias,
        });
    }
    grads.reverse();
    Ok((grads, d_act))
}

pub fn param_count(stack: &[LayerParams]) -> usize {
    stack.iter().map(LayerParams::param_count).sum()
}

/// Serializes a stack into one flat vector (weights row-major, then bias,
/// layer by layer).
pub fn flatten_params(stack: &[LayerParams]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(param_count(stack));
    for layer in stack {
        flat.extend_from_slice(layer.weights.data());
        flat.extend_from_slice(&layer.bias);
    }
    flat
}

/// Writes a flat vector produced by [`flatten_params`] back into the stack.
pub fn assign_from_flat(stack: &mut [LayerParams], flat: &[f64]) -> Result<()> {
    let expected = param_count(stack);
    if flat.len() != expected {
        return Err(Error::dimension(
            "assign_from_flat",
            expected.to_string(),
            flat.len().to_string(),
        ));
    }
    let mut offset = 0;
    for layer in stack.iter_mut() {
        let w = layer.weights.len();
        layer
            .weights
            .data_mut()
            .copy_from_slice(&flat[offset..offset + w]);
        offset += w;
        let b = layer.bias.len();
        layer.bias.copy_from_slice(&flat[offset..offset + b]);
        offset += b;
    }
    Ok(())
}

pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    let mut flat = Vec::new();
    for g in grads {
        flat.extend_from_slice(g.weights.data());
        flat.extend_from_slice(&g.bias);
    }
    flat
}

pub fn zero_grads_like(stack: &[LayerParams]) -> Vec<LayerGrads> {
    stack
        .iter()
        .map(|layer| LayerGrads {
            weights: Tensor2::zeros(layer.in_dim(), layer.out_dim()),
            bias: vec![0.0; layer.out_dim()],
        })
        .collect()
}

/// acc += scale * g, elementwise across the whole stack.
pub fn accumulate_grads(acc: &mut [LayerGrads], g: &[LayerGrads], scale: f64) -> Result<()> {
    if acc.len() != g.len() {
        return Err(Error::dimension(
            "accumulate_grads",
            acc.len().to_string(),
            g.len().to_string(),
        ));
    }
    for (a, b) in acc.iter_mut().zip(g) {
        a.weights.add_scaled(&b.weights, scale)?;
        for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
            *x += scale * y;
        }
    }
    Ok(())
}

/// Central-difference gradient of a scalar function, for checking analytic
/// backward passes. `h` is the half-step; 1e-5 is a good default for values
/// of order one.
pub fn numerical_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    at: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; at.len()];
    let mut point = at.to_vec();
    for i in 0..at.len() {
        let original = point[i];
        point[i] = original + h;
        let plus = f(&point)?;
        point[i] = original - h;
        let minus = f(&point)?;
        point[i] = original;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative disagreement between two gradient vectors, using an
/// absolute fallback near zero. Gradient checks assert this is below 1e-4.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1.0);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_stack(rng: &mut ChaCha12Rng) -> Vec<LayerParams> {
        vec![
            LayerParams::xavier(3, 4, Activation::Tanh, rng),
            LayerParams::xavier(4, 2, Activation::Identity, rng),
        ]
    }

    #[test]
    fn forward_shapes_follow_the_stack() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let stack = small_stack(&mut rng);
        let input = Tensor2::from_vec(5, 3, (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (out, _) = mlp_forward(&stack, &input).unwrap();
        assert_eq!(out.rows(), 5);
        assert_eq!(out.cols(), 2);
    }

    #[test]
    fn flatten_assign_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let stack = small_stack(&mut rng);
        let flat = flatten_params(&stack);
        assert_eq!(flat.len(), param_count(&stack));
        let mut copy = stack.clone();
        let mut shifted = flat.clone();
        for v in &mut shifted {
            *v += 1.0;
        }
        assign_from_flat(&mut copy, &shifted).unwrap();
        let back = flatten_params(&copy);
        for (a, b) in back.iter().zip(&flat) {
            assert!((a - b - 1.0).abs() < 1e-12);
        }
    }

    // Loss = 0.5 * sum(output^2), so upstream = output. Checked against
    // central differences on every weight and bias.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let stack = small_stack(&mut rng);
        let input = Tensor2::from_vec(
            4,
            3,
            (0..12)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.2)
                .collect(),
        )
        .unwrap();

        let (out, cache) = mlp_forward(&stack, &input).unwrap();
        let (grads, _) = mlp_backward(&stack, &cache, &out).unwrap();
        let analytic = flatten_grads(&grads);

        let at = flatten_params(&stack);
        let mut probe = stack.clone();
        let numeric = numerical_gradient(
            |flat| {
                assign_from_flat(&mut probe, flat)?;
                let y = mlp_apply(&probe, &input)?;
                Ok(0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
            },
            &at,
            1e-5,
        )
        .unwrap();

        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    // Same check but through a relu stack; inputs chosen so no pre-activation
    // sits on the kink.
    #[test]
    fn backward_matches_finite_differences_with_relu() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let stack = vec![
            LayerParams::xavier(2, 5, Activation::Relu, &mut rng),
            LayerParams::xavier(5, 3, Activation::Identity, &mut rng),
        ];
        let input = Tensor2::from_vec(3, 2, vec![0.9, -0.4, 0.3, 1.2, -0.8, 0.6]).unwrap();

        let (out, cache) = mlp_forward(&stack, &input).unwrap();
        for pre in &cache.preacts {
            for &z in pre.data() {
                assert!(z.abs() > 1e-3, "pre-activation too close to relu kink");
            }
        }
        let (grads, input_grad) = mlp_backward(&stack, &cache, &out).unwrap();
        let analytic = flatten_grads(&grads);

        let at = flatten_params(&stack);
        let mut probe = stack.clone();
        let numeric = numerical_gradient(
            |flat| {
                assign_from_flat(&mut probe, flat)?;
                let y = mlp_apply(&probe, &input)?;
                Ok(0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);

        // Input gradient too.
        let numeric_input = numerical_gradient(
            |flat| {
                let x = Tensor2::from_vec(3, 2, flat.to_vec())?;
                let y = mlp_apply(&stack, &x)?;
                Ok(0.5 * y.data().iter().map(|v| v * v).sum::<f64>())
            },
            input.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(input_grad.data(), &numeric_input) < 1e-4);
    }

    #[test]
    fn empty_stack_is_rejected() {
        let input = Tensor2::zeros(1, 1);
        assert!(mlp_forward(&[], &input).is_err());
    }
}
