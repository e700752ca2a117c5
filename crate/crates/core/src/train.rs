//! Losses, optimizer, schedule and the three training stages.
//!
//! * [`train_teacher`]: cross-entropy training of the network that later
//!   sits behind a [`BlackBoxHandle`].
//! * [`distill_blackbox`]: query-only distillation with mixup into `f_N`.
//! * [`train_pair`]: joint policy and student finetuning from `f_N` with a
//!   hinge loss on the quantized student plus a KD term on the
//!   full-precision student.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, QuantSetup, QuantSource};
use crate::autodiff::{RowQuantizer, Tape, Var};
use crate::budget::{allocate_on_tape, FeasibleSampler, ProfitSource};
use crate::data::{batches, SyntheticDataset};
use crate::error::{contract, Error, Result};
use crate::math;
use crate::nn::{
    forward_full_precision, softmax_rows, temper_probs, ActivationPlan, BlackBoxHandle, ClassifierNet, PolicyNet,
    QuantConfig, DEFAULT_WEIGHT_BITS,
};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{argmax, Tensor};

/// Floor applied to student probabilities inside the KD logarithm.
pub const KD_LOG_FLOOR: f64 = 1e-12;

const PROB_TOL: f64 = 1e-9;

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(contract(alloc::format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// `KL(p_t || p_s)` with `p_s` floored at [`KD_LOG_FLOOR`] inside the log.
pub fn kd_loss(p_t: &[f64], p_s: &[f64]) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(Error::Dimension {
            op: "kd_loss",
            lhs: vec![p_t.len()],
            rhs: vec![p_s.len()],
        });
    }
    check_probs(p_t, "teacher distribution")?;
    check_probs(p_s, "student distribution")?;
    Ok(p_t
        .iter()
        .zip(p_s)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (math::ln(*t) - math::ln(s.max(KD_LOG_FLOOR))))
        .sum())
}

/// `max(0, p(j) - p(i) + delta)`.
pub fn hinge_robust(p_hat: &[f64], i: usize, j: usize, delta: f64) -> Result<f64> {
    if i == j {
        return Err(contract("robust hinge needs distinct teacher indices"));
    }
    if i >= p_hat.len() || j >= p_hat.len() {
        return Err(contract("hinge index out of range"));
    }
    Ok((p_hat[j] - p_hat[i] + delta).max(0.0))
}

/// `max(0, p(i) - p(k) + delta)`.
pub fn hinge_detrimental(p_hat: &[f64], i: usize, k: usize, delta: f64) -> Result<f64> {
    if p_hat.len() < 2 {
        return Err(contract("detrimental hinge needs at least two classes"));
    }
    if i == k || i >= p_hat.len() || k >= p_hat.len() {
        return Err(contract("detrimental hinge needs a competitor distinct from the teacher class"));
    }
    Ok((p_hat[i] - p_hat[k] + delta).max(0.0))
}

/// Largest entry of `p` other than `i` (first index on ties).
pub fn top_other(p: &[f64], i: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in p.iter().enumerate() {
        if c != i && (best == usize::MAX || v > p[best]) {
            best = c;
        }
    }
    best
}

/// Teacher argmax and second argmax.
pub fn top_two(p: &[f64]) -> (usize, usize) {
    let i = argmax(p);
    (i, top_other(p, i))
}

/// `lambda * x1 + (1 - lambda) * x2`.
pub fn mixup(x1: &Tensor, x2: &Tensor, lambda: f64) -> Result<Tensor> {
    if x1.shape() != x2.shape() {
        return Err(Error::Dimension {
            op: "mixup",
            lhs: x1.shape().to_vec(),
            rhs: x2.shape().to_vec(),
        });
    }
    let data = x1.data().iter().zip(x2.data()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    Tensor::new(x1.shape(), data)
}

/// Batch-mean KD loss on the tape. `p_t` is a constant `[B × K]`; `p_s` a
/// `[B × K]` node of student probabilities.
pub fn kd_loss_on_tape(tape: &mut Tape, p_t: &Tensor, p_s: Var) -> Result<Var> {
    let b = p_t.rows() as f64;
    let entropy: f64 = p_t.data().iter().filter(|t| **t > 0.0).map(|t| t * math::ln(*t)).sum();
    let floored = tape.max_scalar(p_s, KD_LOG_FLOOR);
    let logs = tape.log(floored)?;
    let pt = tape.constant(p_t.clone());
    let cross = tape.mul(pt, logs)?;
    let cross = tape.sum(cross);
    let neg = tape.mul_scalar(cross, -1.0 / b);
    Ok(tape.add_scalar(neg, entropy / b))
}

/// Batch-mean hinge on the tape: `mean_b max(0, p[b, hi_b] - p[b, lo_b] + delta)`.
pub fn hinge_loss_on_tape(tape: &mut Tape, p_hat: Var, hi: &[usize], lo: &[usize], delta: f64) -> Result<Var> {
    let a = tape.gather(p_hat, hi)?;
    let b = tape.gather(p_hat, lo)?;
    let d = tape.sub(a, b)?;
    let d = tape.add_scalar(d, delta);
    let h = tape.relu(d);
    Ok(tape.mean(h))
}

/// Batch-mean cross entropy against integer labels.
fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let p = tape.softmax(logits, 1.0)?;
    let p = tape.max_scalar(p, KD_LOG_FLOOR);
    let lp = tape.log(p)?;
    let picked = tape.gather(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.mul_scalar(m, -1.0))
}

/// Half-period cosine decay from `lr0` at step 0 towards 0 at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + math::cos(core::f64::consts::PI * step as f64 / total as f64))
}

/// SGD with heavy-ball momentum and coupled L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.into_iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect()
}

/// Shared optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr_initial: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

fn check_optim(epochs_ok: bool, batch: usize, lr: f64, momentum: f64, wd: f64) -> Result<()> {
    if !epochs_ok || batch == 0 || !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || !(wd >= 0.0) {
        return Err(Error::Config("optimizer settings out of range".into()));
    }
    Ok(())
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        check_optim(true, self.batch_size, self.lr_initial, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KDConfig {
    pub tau: f64,
    pub mixup_enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for KDConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            mixup_enabled: true,
            epochs: 200,
            batch_size: 64,
            lr_initial: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("kd.tau must be positive".into()));
        }
        check_optim(true, self.batch_size, self.lr_initial, self.momentum, self.weight_decay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    Robust,
    Detrimental,
}

impl PairMode {
    pub fn name(self) -> &'static str {
        match self {
            PairMode::Robust => "robust",
            PairMode::Detrimental => "detrimental",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairTrainConfig {
    pub mode: PairMode,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub options: Vec<u32>,
    pub budget: u32,
    pub profit_source: ProfitSource,
    /// KD temperature for the full-precision student and the frozen teacher.
    pub tau: f64,
    /// Temperature of the quantized student's softmax inside the hinge.
    pub hinge_tau: f64,
    pub weight_bits: u32,
    pub policy_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub policy_lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PairTrainConfig {
    fn default() -> Self {
        Self {
            mode: PairMode::Robust,
            delta: 0.01,
            alpha: 1.0,
            beta: 1.0,
            options: (2..=10).collect(),
            budget: 24,
            profit_source: ProfitSource::Softmax,
            tau: 1.0,
            hinge_tau: 5.0,
            weight_bits: DEFAULT_WEIGHT_BITS,
            policy_hidden: vec![64, 64],
            epochs: 50,
            batch_size: 64,
            lr_initial: 0.01,
            policy_lr_initial: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl PairTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("pair: delta must be positive and alpha, beta non-negative".into()));
        }
        if !(self.tau > 0.0) || !(self.hinge_tau > 0.0) {
            return Err(Error::Config("pair: temperatures must be positive".into()));
        }
        crate::budget::validate_options(&self.options).map_err(|e| Error::Config(alloc::format!("{e}")))?;
        if !(2..=crate::quant::MAX_BIT_WIDTH).contains(&self.weight_bits) {
            return Err(Error::Config("pair: weight_bits out of range".into()));
        }
        if !(self.policy_lr_initial > 0.0) {
            return Err(Error::Config("pair: policy learning rate must be positive".into()));
        }
        check_optim(true, self.batch_size, self.lr_initial, self.momentum, self.weight_decay)
    }

    pub fn quant_setup(&self) -> QuantSetup {
        QuantSetup {
            options: self.options.clone(),
            capacity: self.budget,
            profit_source: self.profit_source,
            weight_bits: self.weight_bits,
        }
    }
}

/// One line of a training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hinge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd: Option<f64>,
    pub fp_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub quant_accuracy: Option<f64>,
    pub budget_violations: u64,
}

fn diverged(stage: &'static str, epoch: usize, step: usize) -> Error {
    Error::Diverged { stage, epoch, step }
}

fn fp_accuracy(net: &ClassifierNet, data: &SyntheticDataset) -> Result<f64> {
    Ok(analysis::evaluate(net, &data.test, &QuantSource::FullPrecision, None)?.value)
}

/// Cross-entropy training from a fresh initialization.
pub fn train_teacher(
    mut net: ClassifierNet,
    data: &SyntheticDataset,
    cfg: &TeacherConfig,
) -> Result<(ClassifierNet, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let mut rng = Rng::seeded(derive_seed(cfg.seed, 11));
    let mut opt = Sgd::new(net.mlp.params(), cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_initial, step, total);
        let mut loss_sum = 0.0;
        for (s, idx) in batches(data.train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let (x, y) = data.train.batch(&idx);
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let xv = tape.constant(x);
            let (logits, _) = net.forward_on_tape(&mut tape, &bound, xv, &QuantConfig::default())?;
            let loss = cross_entropy_on_tape(&mut tape, logits, &y)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(diverged("teacher", epoch, s));
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bound.params);
            opt.step(net.mlp.params_mut(), &grads, cosine_lr(cfg.lr_initial, step, total));
            loss_sum += l;
            step += 1;
        }
        metrics.push(EpochMetrics {
            stage: "teacher".into(),
            epoch,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            hinge: None,
            kd: None,
            fp_accuracy: fp_accuracy(&net, data)?,
            quant_accuracy: None,
            budget_violations: 0,
        });
    }
    Ok((net, metrics))
}

/// Distills a query-only teacher into `student` using KD on mixup inputs.
/// No ground-truth labels are used.
pub fn distill_blackbox(
    bb: &BlackBoxHandle,
    mut student: ClassifierNet,
    data: &SyntheticDataset,
    cfg: &KDConfig,
) -> Result<(ClassifierNet, Vec<EpochMetrics>)> {
    cfg.validate()?;
    if bb.input_dim() != student.input_dim() || bb.num_classes() != student.num_classes() {
        return Err(Error::Config("teacher and student disagree on input or class count".into()));
    }
    let mut rng = Rng::seeded(derive_seed(cfg.seed, 21));
    let mut mix_rng = Rng::seeded(derive_seed(cfg.seed, 22));
    let mut opt = Sgd::new(student.mlp.params(), cfg.momentum, cfg.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_initial, step, total);
        let mut loss_sum = 0.0;
        for (s, idx) in batches(data.train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let (mut x, _) = data.train.batch(&idx);
            if cfg.mixup_enabled {
                let lambda = mix_rng.uniform();
                let partner = x.select_rows(&mix_rng.permutation(idx.len()));
                x = mixup(&x, &partner, lambda)?;
            }
            let p_t = temper_probs(&bb.query(&x)?, cfg.tau)?;
            let mut tape = Tape::new();
            let bound = student.bind(&mut tape, true);
            let xv = tape.constant(x);
            let (logits, _) = student.forward_on_tape(&mut tape, &bound, xv, &QuantConfig::default())?;
            let p_s = tape.softmax(logits, cfg.tau)?;
            let loss = kd_loss_on_tape(&mut tape, &p_t, p_s)?;
            let l = tape.value(loss).data()[0];
            if !l.is_finite() {
                return Err(diverged("distill", epoch, s));
            }
            tape.backward(loss)?;
            let grads = collect_grads(&tape, &bound.params);
            opt.step(student.mlp.params_mut(), &grads, cosine_lr(cfg.lr_initial, step, total));
            loss_sum += l;
            step += 1;
        }
        metrics.push(EpochMetrics {
            stage: "distill".into(),
            epoch,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            hinge: None,
            kd: None,
            fp_accuracy: fp_accuracy(&student, data)?,
            quant_accuracy: None,
            budget_violations: 0,
        });
    }
    Ok((student, metrics))
}

/// Result of [`train_pair`].
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub student: ClassifierNet,
    pub policy: PolicyNet,
    pub metrics: Vec<EpochMetrics>,
    /// Steps whose allocation missed the budget. Always zero unless the
    /// allocator is broken; training aborts on the first one.
    pub budget_violations: u64,
}

/// Losses and gradients of one pair-training step (exposed for tests).
#[derive(Debug, Clone)]
pub struct PairStep {
    pub hinge: f64,
    pub kd: f64,
    pub total: f64,
    pub student_grads: Vec<Vec<f64>>,
    pub policy_grads: Vec<Vec<f64>>,
    pub widths: Vec<Vec<u32>>,
}

/// Builds the loss of one step and backpropagates it. `teacher_probs` is
/// the frozen teacher's temperature-1 softmax on `x`.
pub fn pair_step(
    student: &ClassifierNet,
    policy: &PolicyNet,
    x: &Tensor,
    teacher_probs: &Tensor,
    cfg: &PairTrainConfig,
) -> Result<PairStep> {
    let l = student.quantizable_layers();
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape, true);
    let pb = policy.bind(&mut tape, true);
    let xv = tape.constant(x.clone());

    let logits = policy.forward_on_tape(&mut tape, &pb, xv)?;
    let alloc = allocate_on_tape(&mut tape, logits, l, &cfg.options, cfg.budget, cfg.profit_source)?;
    let widths: Vec<Vec<u32>> = alloc.hard.iter().map(|s| s.widths.clone()).collect();
    let b = x.rows();
    let sel = tape.reshape(alloc.selection, &[b, l * cfg.options.len()])?;
    let qcfg = QuantConfig {
        weight_bits: Some(cfg.weight_bits),
        activations: Some(ActivationPlan {
            selection: sel,
            options: &cfg.options,
            mask: None,
            quantizer: RowQuantizer::default(),
        }),
        collect_trace: false,
    };
    let (q_logits, _) = student.forward_on_tape(&mut tape, &sb, xv, &qcfg)?;
    let p_hat = tape.softmax(q_logits, cfg.hinge_tau)?;
    let k = teacher_probs.cols();
    let mut hi = Vec::with_capacity(b);
    let mut lo = Vec::with_capacity(b);
    for r in 0..b {
        let (i, j) = top_two(teacher_probs.row(r));
        match cfg.mode {
            PairMode::Robust => {
                hi.push(j);
                lo.push(i);
            }
            PairMode::Detrimental => {
                let ph = &tape.value(p_hat).data()[r * k..(r + 1) * k];
                hi.push(i);
                lo.push(top_other(ph, i));
            }
        }
    }
    let hinge = hinge_loss_on_tape(&mut tape, p_hat, &hi, &lo, cfg.delta)?;

    let (fp_logits, _) = student.forward_on_tape(&mut tape, &sb, xv, &QuantConfig::default())?;
    let p_s = tape.softmax(fp_logits, cfg.tau)?;
    let p_t = temper_probs(teacher_probs, cfg.tau)?;
    let kd = kd_loss_on_tape(&mut tape, &p_t, p_s)?;
    if pb.params.iter().any(|&p| tape.depends_on(kd, p)) {
        return Err(contract("KD loss must not depend on policy parameters"));
    }

    let wh = tape.mul_scalar(hinge, cfg.alpha);
    let wk = tape.mul_scalar(kd, cfg.beta);
    let total = tape.add(wh, wk)?;
    tape.backward(total)?;
    Ok(PairStep {
        hinge: tape.value(hinge).data()[0],
        kd: tape.value(kd).data()[0],
        total: tape.value(total).data()[0],
        student_grads: collect_grads(&tape, &sb.params),
        policy_grads: collect_grads(&tape, &pb.params),
        widths,
    })
}

/// Finetunes a copy of `f_n` jointly with a fresh policy.
pub fn train_pair(f_n: &ClassifierNet, cfg: &PairTrainConfig, data: &SyntheticDataset) -> Result<PairOutcome> {
    cfg.validate()?;
    let l = f_n.quantizable_layers();
    FeasibleSampler::new(l, &cfg.options, cfg.budget)?;
    let mut student = f_n.clone();
    let mut policy = PolicyNet::new(
        f_n.input_dim(),
        cfg.policy_hidden.clone(),
        l,
        cfg.options.len(),
        &mut Rng::seeded(derive_seed(cfg.seed, 31)),
    )?;
    let mut rng = Rng::seeded(derive_seed(cfg.seed, 32));
    let mut s_opt = Sgd::new(student.mlp.params(), cfg.momentum, cfg.weight_decay);
    let mut p_opt = Sgd::new(policy.mlp.params(), cfg.momentum, cfg.weight_decay);
    let teacher_train = softmax_rows(&forward_full_precision(f_n, &data.train.x)?, 1.0)?;
    let setup = cfg.quant_setup();
    let stage = match cfg.mode {
        PairMode::Robust => "pair-robust",
        PairMode::Detrimental => "pair-detrimental",
    };
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut violations = 0u64;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_initial, step, total);
        let (mut sum_total, mut sum_hinge, mut sum_kd) = (0.0, 0.0, 0.0);
        for (s, idx) in batches(data.train.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let (x, _) = data.train.batch(&idx);
            let tp = teacher_train.select_rows(&idx);
            let out = pair_step(&student, &policy, &x, &tp, cfg)?;
            let bad = out.widths.iter().filter(|w| w.iter().sum::<u32>() != cfg.budget).count() as u64;
            violations += bad;
            if bad > 0 {
                return Err(contract("allocation missed the bit budget"));
            }
            if !out.total.is_finite() {
                return Err(diverged("pair", epoch, s));
            }
            s_opt.step(student.mlp.params_mut(), &out.student_grads, cosine_lr(cfg.lr_initial, step, total));
            p_opt.step(
                policy.mlp.params_mut(),
                &out.policy_grads,
                cosine_lr(cfg.policy_lr_initial, step, total),
            );
            sum_total += out.total;
            sum_hinge += out.hinge;
            sum_kd += out.kd;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        metrics.push(EpochMetrics {
            stage: stage.into(),
            epoch,
            lr,
            loss: sum_total / n,
            hinge: Some(sum_hinge / n),
            kd: Some(sum_kd / n),
            fp_accuracy: fp_accuracy(&student, data)?,
            quant_accuracy: Some(
                analysis::evaluate(&student, &data.test, &QuantSource::Policy(&policy), Some(&setup))?.value,
            ),
            budget_violations: violations,
        });
    }
    Ok(PairOutcome {
        student,
        policy,
        metrics,
        budget_violations: violations,
    })
}
