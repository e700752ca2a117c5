//! Diagnostics on trained models: accuracy under different quantization
//! sources, the policy-swap matrix, transitory points, layer sweeps,
//! activation histograms and perturbation robustness.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::RowQuantizer;
use crate::budget::{allocate_bitwidths, FeasibleSampler, ProfitSource};
use crate::data::Split;
use crate::error::{contract, Error, Result};
use crate::math;
use crate::nn::{
    forward_full_precision, forward_masked, forward_weights_quantized, policy_forward, ClassifierNet, PolicyNet,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// Options, budget and weight width shared by every quantized evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSetup {
    pub options: Vec<u32>,
    pub capacity: u32,
    pub profit_source: ProfitSource,
    pub weight_bits: u32,
}

/// Where the per-example activation widths come from.
#[derive(Debug, Clone)]
pub enum QuantSource<'a> {
    FullPrecision,
    Policy(&'a PolicyNet),
    /// The same widths for every example.
    Fixed(Vec<u32>),
    /// Uniform draws from the width vectors that exactly meet the budget.
    Random { seed: u64 },
}

/// Accuracy in percent over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetric {
    pub value: f64,
}

/// Per-example widths for `x`, or `None` at full precision.
pub fn allocate(
    source: &QuantSource<'_>,
    x: &Tensor,
    num_layers: usize,
    setup: Option<&QuantSetup>,
) -> Result<Option<Vec<Vec<u32>>>> {
    let need = || setup.ok_or_else(|| contract("quantized evaluation needs options and a budget"));
    Ok(match source {
        QuantSource::FullPrecision => None,
        QuantSource::Fixed(g) => Some(vec![g.clone(); x.rows()]),
        QuantSource::Policy(p) => {
            let s = need()?;
            if p.num_layers != num_layers || p.num_options != s.options.len() {
                return Err(contract("policy shape does not match the network and options"));
            }
            let outs = policy_forward(p, x)?;
            let mut g = Vec::with_capacity(outs.len());
            for o in &outs {
                g.push(allocate_bitwidths(o, &s.options, s.capacity, s.profit_source)?.widths);
            }
            Some(g)
        }
        QuantSource::Random { seed } => {
            let s = need()?;
            let sampler = FeasibleSampler::new(num_layers, &s.options, s.capacity)?;
            let mut rng = Rng::seeded(*seed);
            Some((0..x.rows()).map(|_| sampler.sample(&mut rng).widths).collect())
        }
    })
}

fn logits_for(
    net: &ClassifierNet,
    x: &Tensor,
    gamma: Option<&[Vec<u32>]>,
    mask: Option<&[bool]>,
    setup: Option<&QuantSetup>,
) -> Result<Tensor> {
    match gamma {
        None => forward_full_precision(net, x),
        Some(g) => {
            let s = setup.ok_or_else(|| contract("quantized evaluation needs options and a budget"))?;
            let (out, _) = forward_masked(net, x, g, &s.options, mask, Some(s.weight_bits), RowQuantizer::default())?;
            Ok(out)
        }
    }
}

/// Predicted classes of `net` on `x` under `source`.
pub fn predict(
    net: &ClassifierNet,
    x: &Tensor,
    source: &QuantSource<'_>,
    setup: Option<&QuantSetup>,
) -> Result<Vec<usize>> {
    let gamma = allocate(source, x, net.quantizable_layers(), setup)?;
    Ok(logits_for(net, x, gamma.as_deref(), None, setup)?.argmax_rows())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

pub fn evaluate(
    net: &ClassifierNet,
    split: &Split,
    source: &QuantSource<'_>,
    setup: Option<&QuantSetup>,
) -> Result<EvalMetric> {
    Ok(EvalMetric {
        value: accuracy(&predict(net, &split.x, source, setup)?, &split.y),
    })
}

/// Accuracy of every (network, policy) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapMatrix {
    pub networks: Vec<String>,
    pub policies: Vec<String>,
    /// `accuracy[n][p]`: network `n` under policy `p`.
    pub accuracy: Vec<Vec<f64>>,
    pub full_precision: Vec<f64>,
}

impl SwapMatrix {
    pub fn get(&self, network: &str, policy: &str) -> Option<f64> {
        let n = self.networks.iter().position(|s| s == network)?;
        let p = self.policies.iter().position(|s| s == policy)?;
        Some(self.accuracy[n][p])
    }
}

/// Networks `f_N`, `f_R`, `f_D` against policies `pi_R`, `pi_D` and random.
pub fn policy_swap_matrix(
    nets: [&ClassifierNet; 3],
    pi_r: &PolicyNet,
    pi_d: &PolicyNet,
    random_seed: u64,
    split: &Split,
    setup: &QuantSetup,
) -> Result<SwapMatrix> {
    let sources = [
        QuantSource::Policy(pi_r),
        QuantSource::Policy(pi_d),
        QuantSource::Random { seed: random_seed },
    ];
    let mut accuracy = Vec::with_capacity(3);
    let mut fp = Vec::with_capacity(3);
    for net in nets {
        fp.push(evaluate(net, split, &QuantSource::FullPrecision, None)?.value);
        let row = sources
            .iter()
            .map(|s| evaluate(net, split, s, Some(setup)).map(|m| m.value))
            .collect::<Result<Vec<_>>>()?;
        accuracy.push(row);
    }
    Ok(SwapMatrix {
        networks: ["f_N", "f_R", "f_D"].map(ToString::to_string).to_vec(),
        policies: ["pi_R", "pi_D", "random"].map(ToString::to_string).to_vec(),
        accuracy,
        full_precision: fp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitoryReport {
    pub indices: Vec<usize>,
    pub percentage: f64,
    pub total: usize,
}

/// Examples both full-precision models classify correctly but the
/// quantized detrimental model gets wrong.
pub fn transitory_from_predictions(
    labels: &[usize],
    pred_r: &[usize],
    pred_d: &[usize],
    pred_dq: &[usize],
) -> TransitoryReport {
    let indices: Vec<usize> = (0..labels.len())
        .filter(|&n| pred_r[n] == labels[n] && pred_d[n] == labels[n] && pred_dq[n] != labels[n])
        .collect();
    let percentage = if labels.is_empty() {
        0.0
    } else {
        100.0 * indices.len() as f64 / labels.len() as f64
    };
    TransitoryReport {
        indices,
        percentage,
        total: labels.len(),
    }
}

pub fn transitory_points(
    f_r: &ClassifierNet,
    f_d: &ClassifierNet,
    pi_d: &PolicyNet,
    split: &Split,
    setup: &QuantSetup,
) -> Result<TransitoryReport> {
    if f_r.num_classes() != f_d.num_classes() {
        return Err(contract("models must share a label space"));
    }
    let pr = predict(f_r, &split.x, &QuantSource::FullPrecision, None)?;
    let pd = predict(f_d, &split.x, &QuantSource::FullPrecision, None)?;
    let pdq = predict(f_d, &split.x, &QuantSource::Policy(pi_d), Some(setup))?;
    Ok(transitory_from_predictions(&split.y, &pr, &pd, &pdq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepScheme {
    Before,
    After,
    Single,
}

impl SweepScheme {
    pub const ALL: [SweepScheme; 3] = [SweepScheme::Before, SweepScheme::After, SweepScheme::Single];

    pub fn name(self) -> &'static str {
        match self {
            SweepScheme::Before => "before",
            SweepScheme::After => "after",
            SweepScheme::Single => "single",
        }
    }

    /// Quantized layers for 1-indexed `layer` out of `num_layers`.
    pub fn mask(self, layer: usize, num_layers: usize) -> Vec<bool> {
        (1..=num_layers)
            .map(|m| match self {
                SweepScheme::Before => m < layer,
                SweepScheme::After => m > layer,
                SweepScheme::Single => m == layer,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// 1-indexed layer.
    pub layer: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepResult {
    pub scheme: SweepScheme,
    pub records: Vec<SweepRecord>,
    /// Weights quantized, activations at full precision.
    pub baseline_train: f64,
    pub baseline_test: f64,
}

/// Weights-only quantized accuracy.
pub fn weights_only_accuracy(net: &ClassifierNet, split: &Split, weight_bits: u32) -> Result<f64> {
    Ok(accuracy(&forward_weights_quantized(net, &split.x, weight_bits)?.argmax_rows(), &split.y))
}

/// Quantizes only the activation subset picked by `scheme` for each layer
/// in turn; widths come from `source` and stay fixed for the whole sweep.
pub fn layer_sweep(
    net: &ClassifierNet,
    source: &QuantSource<'_>,
    scheme: SweepScheme,
    train: &Split,
    test: &Split,
    setup: &QuantSetup,
) -> Result<LayerSweepResult> {
    let l = net.quantizable_layers();
    if matches!(source, QuantSource::FullPrecision) {
        return Err(contract("a layer sweep needs a quantization source"));
    }
    let g_train = allocate(source, &train.x, l, Some(setup))?.unwrap_or_default();
    let g_test = allocate(source, &test.x, l, Some(setup))?.unwrap_or_default();
    let mut records = Vec::with_capacity(l);
    for layer in 1..=l {
        let mask = scheme.mask(layer, l);
        let acc = |split: &Split, g: &[Vec<u32>]| -> Result<f64> {
            let out = logits_for(net, &split.x, Some(g), Some(&mask), Some(setup))?;
            Ok(accuracy(&out.argmax_rows(), &split.y))
        };
        records.push(SweepRecord {
            layer,
            train_accuracy: acc(train, &g_train)?,
            test_accuracy: acc(test, &g_test)?,
        });
    }
    Ok(LayerSweepResult {
        scheme,
        records,
        baseline_train: weights_only_accuracy(net, train, setup.weight_bits)?,
        baseline_test: weights_only_accuracy(net, test, setup.weight_bits)?,
    })
}

pub const HIST_BINS: usize = 1600;
pub const HIST_LO: f64 = -8.0;
pub const HIST_HI: f64 = 8.0;
pub const HIST_BIN_WIDTH: f64 = 0.01;

/// Bin of `v`; out-of-range values land in the edge bins.
pub fn bin_index(v: f64) -> usize {
    let b = math::floor((v - HIST_LO) * 100.0);
    if !(b >= 0.0) {
        0
    } else if b >= HIST_BINS as f64 {
        HIST_BINS - 1
    } else {
        b as usize
    }
}

/// The bin whose interval `[lo, lo + 0.01)` contains zero.
pub fn zero_bin() -> usize {
    bin_index(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistVariant {
    Fp,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHistogram {
    /// 1-indexed layer.
    pub layer: usize,
    pub variant: HistVariant,
    pub counts: Vec<u64>,
    /// Counts renormalized after dropping the zero bin (whose entry is 0).
    /// `None` when every value fell in the zero bin.
    pub normalized: Option<Vec<f64>>,
    /// Fraction of values in the zero bin.
    pub sparsity: f64,
    /// Normalized mass below zero.
    pub negative_mass: f64,
}

impl ActivationHistogram {
    pub fn from_values(layer: usize, variant: HistVariant, values: &[f64]) -> Self {
        let mut counts = vec![0u64; HIST_BINS];
        for &v in values {
            counts[bin_index(v)] += 1;
        }
        let z = zero_bin();
        let total = values.len() as u64;
        let zero = counts[z];
        let sparsity = if total == 0 { 1.0 } else { zero as f64 / total as f64 };
        let rest = total - zero;
        let normalized = (rest > 0).then(|| {
            counts
                .iter()
                .enumerate()
                .map(|(i, &c)| if i == z { 0.0 } else { c as f64 / rest as f64 })
                .collect::<Vec<_>>()
        });
        let negative_mass = normalized.as_ref().map_or(0.0, |n| n[..z].iter().sum());
        Self {
            layer,
            variant,
            counts,
            normalized,
            sparsity,
            negative_mass,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }

    /// Left edge of bin `i`.
    pub fn bin_left(i: usize) -> f64 {
        HIST_LO + i as f64 * HIST_BIN_WIDTH
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistograms {
    pub layer: usize,
    pub fp: ActivationHistogram,
    pub quantized: ActivationHistogram,
    /// `quantized.sparsity - fp.sparsity`.
    pub sparsity_delta: f64,
}

/// Histograms of each layer's activations before and after fake
/// quantization in the policy-quantized forward pass.
pub fn activation_histograms(
    net: &ClassifierNet,
    source: &QuantSource<'_>,
    sample: &Tensor,
    setup: &QuantSetup,
) -> Result<Vec<LayerHistograms>> {
    if sample.rows() == 0 {
        return Err(contract("histogram sample is empty"));
    }
    let l = net.quantizable_layers();
    let gamma = allocate(source, sample, l, Some(setup))?
        .ok_or_else(|| contract("histograms need a quantization source"))?;
    let (_, trace) = forward_masked(
        net,
        sample,
        &gamma,
        &setup.options,
        None,
        Some(setup.weight_bits),
        RowQuantizer::default(),
    )?;
    Ok(trace
        .layers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let fp = ActivationHistogram::from_values(i + 1, HistVariant::Fp, t.pre.data());
            let q = ActivationHistogram::from_values(i + 1, HistVariant::Quantized, t.post.data());
            LayerHistograms {
                layer: i + 1,
                sparsity_delta: q.sparsity - fp.sparsity,
                fp,
                quantized: q,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    GaussianNoise,
    FeatureErasing,
    ScaleJitter,
    ContrastJitter,
    NormalizationShift,
}

impl Transform {
    pub const ALL: [Transform; 5] = [
        Transform::GaussianNoise,
        Transform::FeatureErasing,
        Transform::ScaleJitter,
        Transform::ContrastJitter,
        Transform::NormalizationShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::GaussianNoise => "gaussian_noise",
            Transform::FeatureErasing => "feature_erasing",
            Transform::ScaleJitter => "scale_jitter",
            Transform::ContrastJitter => "contrast_jitter",
            Transform::NormalizationShift => "normalization_shift",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown transform `{name}`")))
    }

    /// Perturbs standardized features at `degree`. Degree 0 returns `x`
    /// unchanged; the result depends only on `(x, degree, seed)`.
    pub fn apply(self, x: &Tensor, degree: f64, seed: u64) -> Result<Tensor> {
        if !(degree >= 0.0) {
            return Err(contract("perturbation degree must be non-negative"));
        }
        if degree == 0.0 {
            return Ok(x.clone());
        }
        let (n, d) = (x.rows(), x.cols());
        let mut rng = Rng::seeded(derive_seed(seed, degree.to_bits()));
        let mut out = x.data().to_vec();
        match self {
            Transform::GaussianNoise => out.iter_mut().for_each(|v| *v += degree * rng.normal()),
            Transform::FeatureErasing => {
                let len = (math::round_half_even(degree.min(1.0) * d as f64) as usize).clamp(1, d);
                for row in out.chunks_mut(d) {
                    let start = rng.below(d - len + 1);
                    row[start..start + len].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Transform::ScaleJitter => {
                for row in out.chunks_mut(d) {
                    let f = (1.0 + degree * rng.uniform_range(-1.0, 1.0)).max(0.0);
                    row.iter_mut().for_each(|v| *v *= f);
                }
            }
            Transform::ContrastJitter => {
                for row in out.chunks_mut(d) {
                    let f = (1.0 + degree * rng.uniform_range(-1.0, 1.0)).max(0.0);
                    let mu = row.iter().sum::<f64>() / d as f64;
                    row.iter_mut().for_each(|v| *v = mu + (*v - mu) * f);
                }
            }
            Transform::NormalizationShift => {
                // One wrong set of normalization statistics for the whole split.
                let shift: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let spread: Vec<f64> = (0..d).map(|_| 1.0 + 0.5 * degree * rng.uniform()).collect();
                for row in out.chunks_mut(d) {
                    for ((v, s), r) in row.iter_mut().zip(&shift).zip(&spread) {
                        *v = (*v - degree * s) / r;
                    }
                }
            }
        }
        Tensor::new(&[n, d], out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub transform: Transform,
    pub degrees: Vec<f64>,
    pub models: Vec<String>,
    /// `accuracy[m][k]`: model `m` at `degrees[k]`.
    pub accuracy: Vec<Vec<f64>>,
}

/// Full-precision accuracy of each model on perturbed test inputs.
pub fn perturbation_robustness(
    models: &[(&str, &ClassifierNet)],
    transform: Transform,
    degrees: &[f64],
    split: &Split,
    seed: u64,
) -> Result<PerturbationCurve> {
    if degrees.first() != Some(&0.0) || degrees.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("degrees must start at 0 and increase".into()));
    }
    let mut accuracy = vec![Vec::with_capacity(degrees.len()); models.len()];
    for &deg in degrees {
        let x = transform.apply(&split.x, deg, seed)?;
        for (m, (_, net)) in models.iter().enumerate() {
            accuracy[m].push(accuracy_fp(net, &x, &split.y)?);
        }
    }
    Ok(PerturbationCurve {
        transform,
        degrees: degrees.to_vec(),
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        accuracy,
    })
}

fn accuracy_fp(net: &ClassifierNet, x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(accuracy(&forward_full_precision(net, x)?.argmax_rows(), y))
}
