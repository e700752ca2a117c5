//! Classifier and bit-width policy networks.
//!
//! Both are ReLU multilayer perceptrons. A classifier's quantizable sites
//! are the outputs of its hidden ReLUs; the final logits are never
//! activation-quantized. In the quantized forward pass every affine weight
//! matrix is fake-quantized (symmetric, abs-max, 16 bits by default) and
//! each hidden activation is fake-quantized per example at the width the
//! policy chose for that layer (asymmetric, min-max). Biases are left
//! untouched and the input features are not quantized.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, RowQuantizer, Tape, Var};
use crate::budget::PolicyOutput;
use crate::error::{contract, Error, Result};
use crate::math;
use crate::quant::{self, QuantSpec, ScaleRule, Scheme};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Width used for the static weight quantization.
pub const DEFAULT_WEIGHT_BITS: u32 = 16;

/// Layer sizes of an MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            output_dim,
        })
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }
}

/// Affine block `x · W + b`, `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Plain ReLU MLP; the last layer has no activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

/// Leaf handles of one network's parameters on a tape, in
/// `[w0, b0, w1, b1, ...]` order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        let dims = spec.dims();
        let layers = dims
            .windows(2)
            .map(|d| {
                let std = math::sqrt(2.0 / d[0] as f64);
                let w = (0..d[0] * d[1]).map(|_| rng.normal() * std).collect();
                Linear {
                    weight: Tensor::new(&[d[0], d[1]], w).unwrap(),
                    bias: Tensor::zeros(&[d[1]]),
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let dims = spec.dims();
        let layers = dims
            .windows(2)
            .map(|d| Linear {
                weight: Tensor::zeros(&[d[0], d[1]]),
                bias: Tensor::zeros(&[d[1]]),
            })
            .collect();
        Self { spec, layers }
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Named parameters (`layer{i}.weight`, `layer{i}.bias`).
    pub fn named_params(&self) -> Vec<(alloc::string::String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (alloc::format!("layer{i}.weight"), &l.weight),
                    (alloc::format!("layer{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let params = self
            .params()
            .map(|p| tape.leaf(p.clone().with_requires_grad(trainable)))
            .collect();
        Bound { params }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Dimension {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        Ok(())
    }
}

/// Activation quantization plan for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ActivationPlan<'a> {
    /// `[B × L·O]` selection; row `b`, block `l` is layer `l`'s one-hot
    /// (or straight-through) choice among `options`.
    pub selection: Var,
    pub options: &'a [u32],
    /// Layers to quantize; `None` quantizes all of them.
    pub mask: Option<&'a [bool]>,
    pub quantizer: RowQuantizer,
}

/// What to quantize in a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantConfig<'a> {
    pub weight_bits: Option<u32>,
    pub activations: Option<ActivationPlan<'a>>,
    pub collect_trace: bool,
}

/// Per-layer record of one quantized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Activations before quantization, `[B × n]`.
    pub pre: Tensor,
    /// Activations after quantization (equal to `pre` when the layer was skipped).
    pub post: Tensor,
    pub quantized: bool,
    /// One spec per example when quantized.
    pub specs: Vec<QuantSpec>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Widths applied, one vector of length L per example.
    pub gamma: Vec<Vec<u32>>,
}

impl QuantForwardTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

fn forward_mlp(
    mlp: &Mlp,
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    cfg: &QuantConfig<'_>,
) -> Result<(Var, Option<QuantForwardTrace>)> {
    mlp.check_input(tape.value(x))?;
    let hidden = mlp.hidden_count();
    if let Some(plan) = &cfg.activations {
        let sel = tape.value(plan.selection).shape();
        let want = hidden * plan.options.len();
        if sel.len() != 2 || sel[0] != tape.value(x).rows() || sel[1] != want {
            return Err(Error::Dimension {
                op: "forward_quantized",
                lhs: sel.to_vec(),
                rhs: vec![tape.value(x).rows(), want],
            });
        }
        if plan.mask.is_some_and(|m| m.len() != hidden) {
            return Err(contract("layer mask length must equal the quantizable layer count"));
        }
    }
    let mut trace = cfg.collect_trace.then(QuantForwardTrace::default);
    let mut h = x;
    for (i, _) in mlp.layers.iter().enumerate() {
        let mut w = bound.params[2 * i];
        let b = bound.params[2 * i + 1];
        if let Some(bits) = cfg.weight_bits {
            w = quant::fake_quantize(tape, w, Scheme::Symmetric, bits, ScaleRule::AbsMax)?;
        }
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i == hidden {
            break;
        }
        h = tape.relu(h);
        let pre = h;
        let mut specs = Vec::new();
        let mut quantized = false;
        if let Some(plan) = &cfg.activations {
            if plan.mask.map_or(true, |m| m[i]) {
                let o = plan.options.len();
                let sel = tape.slice_cols(plan.selection, i * o, o)?;
                let (q, s) = tape.quant_select(h, sel, plan.options, plan.quantizer)?;
                h = q;
                specs = s.into_iter().flatten().collect();
                quantized = true;
            }
        }
        if let Some(t) = trace.as_mut() {
            t.layers.push(LayerTrace {
                pre: tape.value(pre).clone().with_requires_grad(false),
                post: tape.value(h).clone().with_requires_grad(false),
                quantized,
                specs,
            });
        }
    }
    Ok((h, trace))
}

/// Teacher / student classifier; hidden ReLU outputs are the quantizable sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    pub mlp: Mlp,
}

impl ClassifierNet {
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::init(spec, rng),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.spec.output_dim
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.spec.input_dim
    }

    /// Number of quantizable activation sites (hidden layers).
    pub fn quantizable_layers(&self) -> usize {
        self.mlp.hidden_count()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.mlp.bind(tape, trainable)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        cfg: &QuantConfig<'_>,
    ) -> Result<(Var, Option<QuantForwardTrace>)> {
        forward_mlp(&self.mlp, tape, bound, x, cfg)
    }
}

/// Bit-width policy: maps an input to an `L × O` matrix of logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub num_layers: usize,
    pub num_options: usize,
}

impl PolicyNet {
    pub fn new(input_dim: usize, hidden: Vec<usize>, num_layers: usize, num_options: usize, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(input_dim, hidden, num_layers * num_options)?;
        Ok(Self {
            mlp: Mlp::init(spec, rng),
            num_layers,
            num_options,
        })
    }

    /// Policy whose every parameter is zero.
    pub fn zeros(input_dim: usize, hidden: Vec<usize>, num_layers: usize, num_options: usize) -> Result<Self> {
        let spec = MlpSpec::new(input_dim, hidden, num_layers * num_options)?;
        Ok(Self {
            mlp: Mlp::zeros(spec),
            num_layers,
            num_options,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.mlp.bind(tape, trainable)
    }

    /// Logits as `[B·L × O]`, one row per (example, layer).
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let (out, _) = forward_mlp(&self.mlp, tape, bound, x, &QuantConfig::default())?;
        let b = tape.value(x).rows();
        tape.reshape(out, &[b * self.num_layers, self.num_options])
    }
}

/// Query-only wrapper: inputs in, temperature-1 softmax out. The wrapped
/// network's parameters are not reachable through this type, and no tape
/// ever sees them.
#[derive(Debug, Clone)]
pub struct BlackBoxHandle {
    net: ClassifierNet,
}

impl BlackBoxHandle {
    pub fn new(net: ClassifierNet) -> Self {
        Self { net }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    /// Softmax outputs `[B × K]` at temperature 1.
    pub fn query(&self, x: &Tensor) -> Result<Tensor> {
        let logits = forward_full_precision(&self.net, x)?;
        softmax_rows(&logits, 1.0)
    }
}

/// Re-tempers probabilities: `softmax(log p / tau)`, i.e. `p^(1/tau)` renormalized.
pub fn temper_probs(p: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(contract("temperature must be positive"));
    }
    let k = p.cols();
    let mut out = Vec::with_capacity(p.numel());
    for row in p.data().chunks(k) {
        let r: Vec<f64> = row.iter().map(|&v| if v > 0.0 { libm::pow(v, 1.0 / tau) } else { 0.0 }).collect();
        let total: f64 = r.iter().sum();
        out.extend(r.iter().map(|v| v / total));
    }
    Tensor::new(p.shape(), out)
}

/// Row-wise softmax of a plain tensor.
pub fn softmax_rows(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !logits.all_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let k = logits.cols();
    let data = logits.data().chunks(k).flat_map(|r| softmax(r, tau)).collect();
    Tensor::new(logits.shape(), data)
}

/// Standard forward pass, no quantization anywhere. `x` is `[B × d]`.
pub fn forward_full_precision(net: &ClassifierNet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (out, _) = net.forward_on_tape(&mut tape, &bound, xv, &QuantConfig::default())?;
    Ok(tape.value(out).clone())
}

/// One-hot selection `[B × L·O]` for explicit per-example widths.
pub fn selection_from_widths(gamma: &[Vec<u32>], num_layers: usize, options: &[u32]) -> Result<Tensor> {
    let o = options.len();
    let mut data = vec![0.0; gamma.len() * num_layers * o];
    for (b, g) in gamma.iter().enumerate() {
        if g.len() != num_layers {
            return Err(contract(alloc::format!(
                "bit-width vector has length {}, expected {num_layers}",
                g.len()
            )));
        }
        for (l, w) in g.iter().enumerate() {
            let k = options
                .iter()
                .position(|o| o == w)
                .ok_or_else(|| contract(alloc::format!("bit-width {w} is not a configured option")))?;
            data[(b * num_layers + l) * o + k] = 1.0;
        }
    }
    Tensor::new(&[gamma.len(), num_layers * o], data)
}

/// Forward with static weight quantization and per-example activation
/// quantization restricted to `mask` (all layers when `None`).
pub fn forward_masked(
    net: &ClassifierNet,
    x: &Tensor,
    gamma: &[Vec<u32>],
    options: &[u32],
    mask: Option<&[bool]>,
    weight_bits: Option<u32>,
    quantizer: RowQuantizer,
) -> Result<(Tensor, QuantForwardTrace)> {
    if gamma.len() != x.rows() {
        return Err(contract("one bit-width vector per example is required"));
    }
    let l = net.quantizable_layers();
    let sel = selection_from_widths(gamma, l, options)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let sel = tape.constant(sel);
    let cfg = QuantConfig {
        weight_bits,
        activations: Some(ActivationPlan {
            selection: sel,
            options,
            mask,
            quantizer,
        }),
        collect_trace: true,
    };
    let (out, trace) = net.forward_on_tape(&mut tape, &bound, xv, &cfg)?;
    let mut trace = trace.unwrap_or_default();
    trace.gamma = gamma.to_vec();
    Ok((tape.value(out).clone(), trace))
}

/// Quantized forward: 16-bit (or `weight_bits`) symmetric weights and
/// asymmetric min-max activations at the widths in `gamma`.
pub fn forward_quantized(
    net: &ClassifierNet,
    x: &Tensor,
    gamma: &[Vec<u32>],
    options: &[u32],
    weight_bits: u32,
) -> Result<(Tensor, QuantForwardTrace)> {
    forward_masked(net, x, gamma, options, None, Some(weight_bits), RowQuantizer::default())
}

/// Weight-only quantized forward (all activations at full precision).
pub fn forward_weights_quantized(net: &ClassifierNet, x: &Tensor, weight_bits: u32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let cfg = QuantConfig {
        weight_bits: Some(weight_bits),
        ..Default::default()
    };
    let (out, _) = net.forward_on_tape(&mut tape, &bound, xv, &cfg)?;
    Ok(tape.value(out).clone())
}

/// Policy outputs for a batch, one [`PolicyOutput`] per example.
pub fn policy_forward(policy: &PolicyNet, x: &Tensor) -> Result<Vec<PolicyOutput>> {
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = policy.forward_on_tape(&mut tape, &bound, xv)?;
    let t = tape.value(out);
    let per = policy.num_layers * policy.num_options;
    t.data()
        .chunks(per)
        .map(|c| PolicyOutput::from_logits(&Tensor::new(&[policy.num_layers, policy.num_options], c.to_vec())?))
        .collect()
}
