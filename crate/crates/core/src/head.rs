//! The differentiable tail of the network: a chain of affine layers with
//! optional elementwise activations, ending in an affine logit layer.
//!
//! Gradients of a single logit come from one reverse sweep; directional
//! derivatives of all logits come from one forward-mode sweep. The explicit
//! Jacobian is available for diagnostics.
//!
//! FLOP convention: a multiply-add counts 2, an activation evaluation counts
//! 1, an activation derivative counts 1, and the elementwise product with a
//! derivative counts 1. Bias additions are folded into the multiply-adds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, GscError, Result};
use crate::numcore::{argmax, dot_unchecked, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::None => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at `z`. The relu subgradient at exactly zero is 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn is_identity(self) -> bool {
        self == Activation::None
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = GscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "identity" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(GscError::UnknownActivation(other.to_string())),
        }
    }
}

/// One affine map `W x + b` followed by an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weight: Matrix,
    bias: Vector,
    activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vector, activation: Activation) -> Result<Self> {
        check_len("Layer bias", weight.rows(), bias.len())?;
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    /// Affine layer with zero bias and no activation.
    pub fn linear(weight: Matrix) -> Self {
        let bias = Vector::zeros(weight.rows());
        Layer {
            weight,
            bias,
            activation: Activation::None,
        }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn macs(&self) -> u64 {
        (self.out_dim() * self.in_dim()) as u64
    }

    fn activation_units(&self) -> u64 {
        if self.activation.is_identity() {
            0
        } else {
            self.out_dim() as u64
        }
    }
}

/// The tail `F ↦ y` of a classifier, cut at a flat feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward evaluation, kept so that the reverse
/// and forward-mode sweeps do not recompute them.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Activation derivatives per layer, evaluated at the pre-activations.
    derivatives: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre_activations: Vec<Vec<f64>>,
    pub logits: Vector,
    pub flops: u64,
}

impl ForwardTrace {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre_activations
    }

    /// Sign pattern of every hidden relu/tanh unit (`z > 0`). Two inputs with
    /// equal patterns lie in the same linear region of a relu head.
    pub fn activation_pattern(&self, head: &HeadModel) -> Vec<bool> {
        head.layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(layer, _)| !layer.activation.is_identity())
            .flat_map(|(_, z)| z.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Reverse sweep for `∇_F y_c`. Returns the gradient and the FLOPs spent.
    pub fn grad_logit(&self, head: &HeadModel, class: usize) -> Result<(Vector, u64)> {
        let k = head.output_dim();
        if class >= k {
            return Err(GscError::Index {
                index: class,
                len: k,
            });
        }
        let last = head.layers.len() - 1;
        let mut delta = head.layers[last].weight.row(class).to_vec();
        let mut flops = 0u64;
        for l in (0..last).rev() {
            let layer = &head.layers[l];
            if !layer.activation.is_identity() {
                for (d, &a) in delta.iter_mut().zip(&self.derivatives[l]) {
                    *d *= a;
                }
                flops += 2 * layer.out_dim() as u64;
            }
            let mut next = vec![0.0; layer.in_dim()];
            for (i, &d) in delta.iter().enumerate() {
                for (n, &w) in next.iter_mut().zip(layer.weight.row(i)) {
                    *n += w * d;
                }
            }
            flops += 2 * layer.macs();
            delta = next;
        }
        Ok((Vector::checked(delta)?, flops))
    }

    /// Forward-mode sweep for `J(F) · tangent`. Zero entries of the input
    /// tangent are skipped, so a `k`-sparse tangent costs `2·out·k` in the
    /// first layer; hidden tangents are treated as dense.
    pub fn jvp(&self, head: &HeadModel, tangent: &[f64]) -> Result<(Vector, u64)> {
        check_len("jvp tangent", head.input_dim(), tangent.len())?;
        let mut t = tangent.to_vec();
        let mut flops = 0u64;
        for (l, layer) in head.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim()];
            for (j, &tj) in t.iter().enumerate() {
                if l == 0 && tj == 0.0 {
                    continue;
                }
                for (i, n) in next.iter_mut().enumerate() {
                    *n += layer.weight.get(i, j) * tj;
                }
                flops += 2 * layer.out_dim() as u64;
            }
            if !layer.activation.is_identity() {
                for (n, &a) in next.iter_mut().zip(&self.derivatives[l]) {
                    *n *= a;
                }
                flops += layer.out_dim() as u64;
            }
            t = next;
        }
        Ok((Vector::checked(t)?, flops))
    }
}

/// Forward logits, predicted class and its gradient for one feature vector.
#[derive(Debug, Clone)]
pub struct LogitBundle {
    pub y: Vector,
    pub class: usize,
    pub g: Vector,
    pub flops_forward: u64,
    pub flops_backward: u64,
}

/// Analytic FLOP counts for the two ways of obtaining post-modification
/// logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub forward: u64,
    pub backward: u64,
    /// Forward-mode sweep for a tangent with the given number of nonzeros.
    pub approx_extra: u64,
    pub tangent_nnz: u64,
    /// `2 · forward`.
    pub two_forward: u64,
    /// `forward + backward + approx_extra`.
    pub approx_path: u64,
    /// `2 · forward + backward`: the backward is needed for selection anyway.
    pub naive_path: u64,
}

impl FlopReport {
    pub fn approx_to_naive_ratio(&self) -> f64 {
        self.approx_path as f64 / self.naive_path as f64
    }
}

impl HeadModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(GscError::Config("head needs at least one layer".into()));
        };
        if !last.activation.is_identity() {
            return Err(GscError::Config(format!(
                "final layer must be affine, found activation {}",
                last.activation
            )));
        }
        for pair in layers.windows(2) {
            check_len("head layer chain", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(HeadModel { layers })
    }

    /// Single affine layer `y = W F + b`.
    pub fn affine(weight: Matrix, bias: Vector) -> Result<Self> {
        Self::new(vec![Layer::new(weight, bias, Activation::None)?])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn is_affine(&self) -> bool {
        self.layers.len() == 1
    }

    pub fn has_activation(&self, activation: Activation) -> bool {
        self.layers.iter().any(|l| l.activation == activation)
    }

    pub fn forward_trace(&self, features: &[f64]) -> Result<ForwardTrace> {
        check_len("forward input", self.input_dim(), features.len())?;
        let mut x = features.to_vec();
        let mut flops = 0u64;
        let mut derivatives = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z: Vec<f64> = (0..layer.out_dim())
                .map(|i| dot_unchecked(layer.weight.row(i), &x) + layer.bias[i])
                .collect();
            flops += 2 * layer.macs();
            derivatives.push(z.iter().map(|&v| layer.activation.derivative(v)).collect());
            x = if layer.activation.is_identity() {
                z.clone()
            } else {
                flops += layer.out_dim() as u64;
                z.iter().map(|&v| layer.activation.apply(v)).collect()
            };
            pre_activations.push(z);
        }
        Ok(ForwardTrace {
            derivatives,
            pre_activations,
            logits: Vector::checked(x)?,
            flops,
        })
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vector> {
        Ok(self.forward_trace(features)?.logits)
    }

    /// `∇_F [y]_c` by reverse-mode accumulation.
    pub fn grad_logit(&self, features: &[f64], class: usize) -> Result<Vector> {
        let trace = self.forward_trace(features)?;
        Ok(trace.grad_logit(self, class)?.0)
    }

    /// `J(F) · tangent` by forward-mode accumulation.
    pub fn jvp(&self, features: &[f64], tangent: &[f64]) -> Result<Vector> {
        let trace = self.forward_trace(features)?;
        Ok(trace.jvp(self, tangent)?.0)
    }

    /// The `K × d` logit Jacobian; row `j` is `grad_logit(F, j)`.
    pub fn jacobian(&self, features: &[f64]) -> Result<Matrix> {
        let trace = self.forward_trace(features)?;
        let k = self.output_dim();
        let mut data = Vec::with_capacity(k * self.input_dim());
        for j in 0..k {
            data.extend_from_slice(&trace.grad_logit(self, j)?.0);
        }
        Ok(Matrix::from_raw(k, self.input_dim(), data))
    }

    /// Forward pass, predicted class and its gradient.
    pub fn analyze(&self, features: &[f64]) -> Result<(ForwardTrace, LogitBundle)> {
        let trace = self.forward_trace(features)?;
        let class = argmax(&trace.logits)?;
        let (g, flops_backward) = trace.grad_logit(self, class)?;
        let bundle = LogitBundle {
            y: trace.logits.clone(),
            class,
            g,
            flops_forward: trace.flops,
            flops_backward,
        };
        Ok((trace, bundle))
    }

    pub fn forward_flops(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| 2 * l.macs() + l.activation_units())
            .sum()
    }

    pub fn backward_flops(&self) -> u64 {
        let last = self.layers.len() - 1;
        self.layers[..last]
            .iter()
            .map(|l| 2 * l.macs() + 2 * l.activation_units())
            .sum()
    }

    /// Cost of a forward-mode sweep whose tangent has `nnz` nonzeros.
    /// Hidden tangents are counted as dense.
    pub fn jvp_flops(&self, nnz: usize) -> u64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let cols = if l == 0 {
                    nnz.min(layer.in_dim())
                } else {
                    layer.in_dim()
                };
                2 * (layer.out_dim() * cols) as u64 + layer.activation_units()
            })
            .sum()
    }

    pub fn flop_report(&self, tangent_nnz: usize) -> FlopReport {
        let forward = self.forward_flops();
        let backward = self.backward_flops();
        let approx_extra = self.jvp_flops(tangent_nnz);
        FlopReport {
            forward,
            backward,
            approx_extra,
            tangent_nnz: tangent_nnz.min(self.input_dim()) as u64,
            two_forward: 2 * forward,
            approx_path: forward + backward + approx_extra,
            naive_path: 2 * forward + backward,
        }
    }
}
