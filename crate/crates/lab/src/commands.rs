//! The pipeline commands. Each one validates the configuration, takes the
//! run directory lock, writes its artifacts and returns a printable summary.
//!
//! Run directory layout:
//!
//! | file | producer |
//! |---|---|
//! | `config.toml` | every command (effective configuration) |
//! | `teacher.ckpt`, `teacher_metrics.jsonl` | `train-teacher` |
//! | `f_n.ckpt`, `distill_metrics.jsonl` | `distill` |
//! | `f_r.ckpt`, `pi_r.ckpt`, `pair_robust_metrics.jsonl` | `train-pair --mode robust` |
//! | `f_d.ckpt`, `pi_d.ckpt`, `pair_detrimental_metrics.jsonl` | `train-pair --mode detrimental` |
//! | `<analysis>.csv`, `<analysis>.json` | `analyze <analysis>` |
//! | `grid.csv`, `grid.json` | `reproduce-grid` |

use std::path::{Path, PathBuf};

use dptq_core::analysis::{
    activation_histograms, evaluate, layer_sweep, perturbation_robustness, policy_swap_matrix, predict,
    transitory_from_predictions, ActivationHistogram, QuantSetup, QuantSource, SweepScheme, Transform,
};
use dptq_core::data::SyntheticDataset;
use dptq_core::nn::{BlackBoxHandle, ClassifierNet, PolicyNet};
use dptq_core::rng::{derive_seed, Rng};
use dptq_core::train::{self, EpochMetrics, PairMode};
use serde::Serialize;

use crate::checkpoint::{file_hash, Checkpoint, Model, Provenance};
use crate::config::{RunConfig, SweepSource};
use crate::error::{LabError, LabResult};
use crate::report::{pct, table, write_csv, write_json, write_jsonl};
use crate::rundir::RunDir;

pub const CONFIG_FILE: &str = "config.toml";

/// Random-stream ids under the master seed.
const TEACHER_INIT: u64 = 1;
const STUDENT_INIT: u64 = 2;
const RANDOM_POLICY: u64 = 4;
const PERTURB: u64 = 5;

pub fn ckpt_name(role: &str) -> String {
    format!("{role}.ckpt")
}

fn pair_roles(mode: PairMode) -> (&'static str, &'static str) {
    match mode {
        PairMode::Robust => ("f_r", "pi_r"),
        PairMode::Detrimental => ("f_d", "pi_d"),
    }
}

/// Validated configuration, generated data and the locked run directory.
pub struct Session {
    pub cfg: RunConfig,
    pub data: SyntheticDataset,
    pub dir: RunDir,
    hash: String,
}

impl Session {
    pub fn open(mut cfg: RunConfig, out: &Path) -> LabResult<Self> {
        cfg.validate()?;
        let dir = RunDir::open(out)?;
        let text = cfg.to_toml()?;
        let path = dir.file(CONFIG_FILE);
        std::fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
        let data = SyntheticDataset::generate(&cfg.dataset)?;
        let hash = cfg.hash()?;
        Ok(Self { cfg, data, dir, hash })
    }

    fn provenance(&self, stage: &str) -> Provenance {
        Provenance {
            stage: stage.into(),
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
        }
    }

    fn save(&self, role: &str, stage: &str, model: Model) -> LabResult<PathBuf> {
        let path = self.dir.file(&ckpt_name(role));
        Checkpoint {
            model,
            provenance: self.provenance(stage),
        }
        .save(&path)?;
        Ok(path)
    }

    fn setup(&self) -> QuantSetup {
        self.cfg.pair.quant_setup()
    }

    fn load_classifier(&self, path: &Path) -> LabResult<ClassifierNet> {
        let net = Checkpoint::load(path)?.into_classifier(path)?;
        if net.input_dim() != self.cfg.dataset.input_dim || net.num_classes() != self.cfg.dataset.num_classes {
            return Err(LabError::Compat(format!(
                "{} expects {} inputs and {} classes; the dataset has {} and {}",
                path.display(),
                net.input_dim(),
                net.num_classes(),
                self.cfg.dataset.input_dim,
                self.cfg.dataset.num_classes
            )));
        }
        Ok(net)
    }

    fn load_policy(&self, path: &Path, net: &ClassifierNet) -> LabResult<PolicyNet> {
        let p = Checkpoint::load(path)?.into_policy(path)?;
        if p.num_layers != net.quantizable_layers() || p.num_options != self.cfg.pair.options.len() {
            return Err(LabError::Compat(format!(
                "{} allocates {}x{} widths; expected {}x{}",
                path.display(),
                p.num_layers,
                p.num_options,
                net.quantizable_layers(),
                self.cfg.pair.options.len()
            )));
        }
        if p.mlp.spec.input_dim != self.cfg.dataset.input_dim {
            return Err(LabError::Compat(format!("{} has the wrong input size", path.display())));
        }
        Ok(p)
    }
}

fn metrics_table(m: &[EpochMetrics]) -> String {
    let Some(last) = m.last() else {
        return "no epochs run\n".into();
    };
    let mut rows = vec![vec!["epochs".into(), m.len().to_string()], vec!["final loss".into(), format!("{:.6}", last.loss)]];
    rows.push(vec!["test accuracy (fp)".into(), pct(last.fp_accuracy)]);
    if let Some(q) = last.quant_accuracy {
        rows.push(vec!["test accuracy (quantized)".into(), pct(q)]);
        rows.push(vec!["budget violations".into(), last.budget_violations.to_string()]);
    }
    table(&["stage", &last.stage], &rows)
}

/// Trains the cross-entropy teacher that later sits behind the black box.
pub fn train_teacher(cfg: RunConfig, out: &Path) -> LabResult<String> {
    let s = Session::open(cfg, out)?;
    let init = ClassifierNet::new(s.cfg.teacher_spec()?, &mut Rng::seeded(derive_seed(s.cfg.seed, TEACHER_INIT)));
    let (net, metrics) = train::train_teacher(init, &s.data, &s.cfg.teacher)?;
    write_jsonl(&s.dir.file("teacher_metrics.jsonl"), &metrics)?;
    let path = s.save("teacher", "teacher", Model::Classifier(net))?;
    Ok(format!("{}checkpoint {} sha256 {}\n", metrics_table(&metrics), path.display(), file_hash(&path)?))
}

/// Distills `f_N` from the teacher checkpoint through query access only.
pub fn distill(cfg: RunConfig, out: &Path, teacher: Option<&Path>) -> LabResult<String> {
    let s = Session::open(cfg, out)?;
    let tpath = teacher.map(Path::to_path_buf).unwrap_or_else(|| s.dir.file(&ckpt_name("teacher")));
    let bb = BlackBoxHandle::new(s.load_classifier(&tpath)?);
    let init = ClassifierNet::new(s.cfg.student_spec()?, &mut Rng::seeded(derive_seed(s.cfg.seed, STUDENT_INIT)));
    let (net, metrics) = train::distill_blackbox(&bb, init, &s.data, &s.cfg.kd)?;
    write_jsonl(&s.dir.file("distill_metrics.jsonl"), &metrics)?;
    let path = s.save("f_n", "distill", Model::Classifier(net))?;
    Ok(format!("{}checkpoint {} sha256 {}\n", metrics_table(&metrics), path.display(), file_hash(&path)?))
}

/// Finetunes a robust or detrimental student and its policy from `f_N`.
pub fn train_pair(cfg: RunConfig, out: &Path, mode: PairMode, base: Option<&Path>) -> LabResult<String> {
    let s = Session::open(cfg, out)?;
    let bpath = base.map(Path::to_path_buf).unwrap_or_else(|| s.dir.file(&ckpt_name("f_n")));
    let f_n = s.load_classifier(&bpath)?;
    if f_n.quantizable_layers() != s.cfg.network.student_hidden.len() {
        return Err(LabError::Compat(format!(
            "{} has {} hidden layers; the configuration expects {}",
            bpath.display(),
            f_n.quantizable_layers(),
            s.cfg.network.student_hidden.len()
        )));
    }
    let outcome = train::train_pair(&f_n, &s.cfg.pair_config(mode), &s.data)?;
    write_jsonl(&s.dir.file(&format!("pair_{}_metrics.jsonl", mode.name())), &outcome.metrics)?;
    let (student, policy) = pair_roles(mode);
    let stage = format!("pair-{}", mode.name());
    let sp = s.save(student, &stage, Model::Classifier(outcome.student))?;
    let pp = s.save(policy, &stage, Model::Policy(outcome.policy))?;
    Ok(format!(
        "{}checkpoint {} sha256 {}\ncheckpoint {} sha256 {}\n",
        metrics_table(&outcome.metrics),
        sp.display(),
        file_hash(&sp)?,
        pp.display(),
        file_hash(&pp)?
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analysis {
    Swap,
    Transitory,
    Sweep,
    Histograms,
    Perturb,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::Swap => "swap",
            Analysis::Transitory => "transitory",
            Analysis::Sweep => "sweep",
            Analysis::Histograms => "histograms",
            Analysis::Perturb => "perturb",
        }
    }
}

/// Trained models of one run directory.
struct Models {
    f_n: ClassifierNet,
    f_r: ClassifierNet,
    f_d: ClassifierNet,
    pi_r: PolicyNet,
    pi_d: PolicyNet,
}

fn load_models(s: &Session, from: &Path) -> LabResult<Models> {
    let f = |role: &str| from.join(ckpt_name(role));
    let f_n = s.load_classifier(&f("f_n"))?;
    let f_r = s.load_classifier(&f("f_r"))?;
    let f_d = s.load_classifier(&f("f_d"))?;
    if f_r.mlp.spec != f_n.mlp.spec || f_d.mlp.spec != f_n.mlp.spec {
        return Err(LabError::Compat("f_N, f_R and f_D must share one architecture".into()));
    }
    let pi_r = s.load_policy(&f("pi_r"), &f_n)?;
    let pi_d = s.load_policy(&f("pi_d"), &f_n)?;
    Ok(Models {
        f_n,
        f_r,
        f_d,
        pi_r,
        pi_d,
    })
}

#[derive(Serialize)]
struct SwapRow<'a> {
    network: &'a str,
    full_precision: f64,
    pi_r: f64,
    pi_d: f64,
    random: f64,
}

#[derive(Serialize)]
struct TransitoryRow {
    index: usize,
    label: usize,
    pred_f_r: usize,
    pred_f_d: usize,
    pred_f_d_quantized: usize,
}

#[derive(Serialize)]
struct TransitorySummary {
    count: usize,
    total: usize,
    percentage: f64,
}

#[derive(Serialize)]
struct SweepRow<'a> {
    model: &'a str,
    scheme: &'a str,
    layer: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    baseline_train: f64,
    baseline_test: f64,
}

#[derive(Serialize)]
struct HistRow<'a> {
    model: &'a str,
    layer: usize,
    variant: &'a str,
    bin_left: f64,
    count: u64,
    normalized: f64,
}

#[derive(Serialize)]
struct HistSummary<'a> {
    model: &'a str,
    layer: usize,
    fp_sparsity: f64,
    quantized_sparsity: f64,
    sparsity_delta: f64,
    fp_degenerate: bool,
    quantized_degenerate: bool,
}

#[derive(Serialize)]
struct PerturbRow {
    transform: &'static str,
    degree: f64,
    model: String,
    accuracy: f64,
}

/// Even split of the budget over the layers, larger widths last.
pub fn uniform_widths(layers: usize, options: &[u32], capacity: u32) -> LabResult<Vec<u32>> {
    let base = capacity / layers as u32;
    let extra = capacity as usize % layers;
    let g: Vec<u32> = (0..layers).map(|l| base + u32::from(l >= layers - extra)).collect();
    if g.iter().any(|w| !options.contains(w)) {
        return Err(LabError::Config(format!(
            "budget {capacity} cannot be split evenly over {layers} layers with options {options:?}"
        )));
    }
    Ok(g)
}

/// Runs one analysis on the models stored in `from` (default: `out`).
pub fn analyze(cfg: RunConfig, out: &Path, which: Analysis, from: Option<&Path>) -> LabResult<String> {
    let s = Session::open(cfg, out)?;
    let from = from.map(Path::to_path_buf).unwrap_or_else(|| s.dir.path().to_path_buf());
    let m = load_models(&s, &from)?;
    let setup = s.setup();
    let test = &s.data.test;
    let csv = s.dir.file(&format!("{}.csv", which.name()));
    let json = s.dir.file(&format!("{}.json", which.name()));
    let summary = match which {
        Analysis::Swap => {
            let sm = policy_swap_matrix(
                [&m.f_n, &m.f_r, &m.f_d],
                &m.pi_r,
                &m.pi_d,
                derive_seed(s.cfg.seed, RANDOM_POLICY),
                test,
                &setup,
            )?;
            let rows: Vec<SwapRow> = sm
                .networks
                .iter()
                .enumerate()
                .map(|(i, n)| SwapRow {
                    network: n,
                    full_precision: sm.full_precision[i],
                    pi_r: sm.accuracy[i][0],
                    pi_d: sm.accuracy[i][1],
                    random: sm.accuracy[i][2],
                })
                .collect();
            write_csv(&csv, &rows)?;
            write_json(&json, &sm)?;
            table(
                &["network", "fp", "pi_R", "pi_D", "random"],
                &rows
                    .iter()
                    .map(|r| {
                        vec![r.network.to_string(), pct(r.full_precision), pct(r.pi_r), pct(r.pi_d), pct(r.random)]
                    })
                    .collect::<Vec<_>>(),
            )
        }
        Analysis::Transitory => {
            let pr = predict(&m.f_r, &test.x, &QuantSource::FullPrecision, None)?;
            let pd = predict(&m.f_d, &test.x, &QuantSource::FullPrecision, None)?;
            let pdq = predict(&m.f_d, &test.x, &QuantSource::Policy(&m.pi_d), Some(&setup))?;
            let rep = transitory_from_predictions(&test.y, &pr, &pd, &pdq);
            let rows: Vec<TransitoryRow> = rep
                .indices
                .iter()
                .map(|&i| TransitoryRow {
                    index: i,
                    label: test.y[i],
                    pred_f_r: pr[i],
                    pred_f_d: pd[i],
                    pred_f_d_quantized: pdq[i],
                })
                .collect();
            write_csv(&csv, &rows)?;
            write_json(
                &json,
                &TransitorySummary {
                    count: rep.indices.len(),
                    total: rep.total,
                    percentage: rep.percentage,
                },
            )?;
            format!(
                "transitory points: {} of {} ({}%)\n",
                rep.indices.len(),
                rep.total,
                pct(rep.percentage)
            )
        }
        Analysis::Sweep => {
            let l = m.f_n.quantizable_layers();
            let uniform = match s.cfg.analysis.sweep_source {
                SweepSource::Uniform => Some(uniform_widths(l, &setup.options, setup.capacity)?),
                SweepSource::Policy => None,
            };
            let mut rows = Vec::new();
            let mut results = Vec::new();
            for (name, net, pi) in [("f_R", &m.f_r, &m.pi_r), ("f_D", &m.f_d, &m.pi_d)] {
                let src = match &uniform {
                    Some(g) => QuantSource::Fixed(g.clone()),
                    None => QuantSource::Policy(pi),
                };
                for scheme in SweepScheme::ALL {
                    let r = layer_sweep(net, &src, scheme, &s.data.train, test, &setup)?;
                    for rec in &r.records {
                        rows.push(SweepRow {
                            model: name,
                            scheme: scheme.name(),
                            layer: rec.layer,
                            train_accuracy: rec.train_accuracy,
                            test_accuracy: rec.test_accuracy,
                            baseline_train: r.baseline_train,
                            baseline_test: r.baseline_test,
                        });
                    }
                    results.push((name, r));
                }
            }
            write_csv(&csv, &rows)?;
            let json_val: Vec<_> = results
                .iter()
                .map(|(n, r)| serde_json::json!({ "model": n, "result": r }))
                .collect();
            write_json(&json, &json_val)?;
            let header: Vec<String> = std::iter::once("model/scheme".to_string())
                .chain((1..=l).map(|i| format!("l{i}")))
                .chain(std::iter::once("baseline".into()))
                .collect();
            let trows: Vec<Vec<String>> = results
                .iter()
                .map(|(n, r)| {
                    std::iter::once(format!("{n} {}", r.scheme.name()))
                        .chain(r.records.iter().map(|x| pct(x.test_accuracy)))
                        .chain(std::iter::once(pct(r.baseline_test)))
                        .collect()
                })
                .collect();
            table(&header.iter().map(String::as_str).collect::<Vec<_>>(), &trows)
        }
        Analysis::Histograms => {
            let cap = s.cfg.analysis.histogram_sample;
            let sample = if cap == 0 { test.clone() } else { test.head(cap) };
            let mut rows = Vec::new();
            let mut sums = Vec::new();
            for (name, net, pi) in [("f_R", &m.f_r, &m.pi_r), ("f_D", &m.f_d, &m.pi_d)] {
                for h in activation_histograms(net, &QuantSource::Policy(pi), &sample.x, &setup)? {
                    for (variant, hist) in [("fp", &h.fp), ("quantized", &h.quantized)] {
                        for (i, &c) in hist.counts.iter().enumerate() {
                            rows.push(HistRow {
                                model: name,
                                layer: h.layer,
                                variant,
                                bin_left: ActivationHistogram::bin_left(i),
                                count: c,
                                normalized: hist.normalized.as_ref().map_or(0.0, |n| n[i]),
                            });
                        }
                    }
                    sums.push(HistSummary {
                        model: name,
                        layer: h.layer,
                        fp_sparsity: h.fp.sparsity,
                        quantized_sparsity: h.quantized.sparsity,
                        sparsity_delta: h.sparsity_delta,
                        fp_degenerate: h.fp.is_degenerate(),
                        quantized_degenerate: h.quantized.is_degenerate(),
                    });
                }
            }
            write_csv(&csv, &rows)?;
            write_json(&json, &sums)?;
            table(
                &["model", "layer", "fp sparsity", "q sparsity", "delta"],
                &sums
                    .iter()
                    .map(|h| {
                        vec![
                            h.model.to_string(),
                            h.layer.to_string(),
                            format!("{:.4}", h.fp_sparsity),
                            format!("{:.4}", h.quantized_sparsity),
                            format!("{:+.4}", h.sparsity_delta),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )
        }
        Analysis::Perturb => {
            let models = [("f_N", &m.f_n), ("f_R", &m.f_r), ("f_D", &m.f_d)];
            let mut rows = Vec::new();
            let mut curves = Vec::new();
            for t in &s.cfg.analysis.transforms {
                let t = Transform::parse(t)?;
                let c = perturbation_robustness(
                    &models,
                    t,
                    &s.cfg.analysis.degrees,
                    test,
                    derive_seed(s.cfg.seed, PERTURB),
                )?;
                for (mi, name) in c.models.iter().enumerate() {
                    for (k, &d) in c.degrees.iter().enumerate() {
                        rows.push(PerturbRow {
                            transform: t.name(),
                            degree: d,
                            model: name.clone(),
                            accuracy: c.accuracy[mi][k],
                        });
                    }
                }
                curves.push(c);
            }
            write_csv(&csv, &rows)?;
            write_json(&json, &curves)?;
            let trows: Vec<Vec<String>> = curves
                .iter()
                .flat_map(|c| {
                    c.models.iter().enumerate().map(move |(mi, n)| {
                        let mean = c.accuracy[mi].iter().sum::<f64>() / c.degrees.len() as f64;
                        vec![c.transform.name().to_string(), n.clone(), pct(mean)]
                    })
                })
                .collect();
            table(&["transform", "model", "mean accuracy"], &trows)
        }
    };
    Ok(format!("{summary}wrote {} and {}\n", csv.display(), json.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub version: String,
    pub options: String,
    pub budget_label: String,
    pub budget: u32,
    pub mode: String,
    pub fp_accuracy: f64,
    pub quant_accuracy: f64,
    pub delta: f64,
}

/// Teacher, `f_N`, then a robust and a detrimental pair for every
/// (version, budget) cell of the grid.
pub fn reproduce_grid(cfg: RunConfig, out: &Path) -> LabResult<String> {
    let s = Session::open(cfg, out)?;
    let init = ClassifierNet::new(s.cfg.teacher_spec()?, &mut Rng::seeded(derive_seed(s.cfg.seed, TEACHER_INIT)));
    let (teacher, _) = train::train_teacher(init, &s.data, &s.cfg.teacher)?;
    let bb = BlackBoxHandle::new(teacher);
    let init = ClassifierNet::new(s.cfg.student_spec()?, &mut Rng::seeded(derive_seed(s.cfg.seed, STUDENT_INIT)));
    let (f_n, _) = train::distill_blackbox(&bb, init, &s.data, &s.cfg.kd)?;
    let mut rows = Vec::new();
    for v in &s.cfg.grid.versions {
        for (bi, &budget) in v.budgets.iter().enumerate() {
            for mode in [PairMode::Robust, PairMode::Detrimental] {
                let pc = dptq_core::train::PairTrainConfig {
                    mode,
                    options: v.options.clone(),
                    budget,
                    ..s.cfg.pair.clone()
                };
                let o = train::train_pair(&f_n, &pc, &s.data)?;
                let fp = evaluate(&o.student, &s.data.test, &QuantSource::FullPrecision, None)?.value;
                let q = evaluate(&o.student, &s.data.test, &QuantSource::Policy(&o.policy), Some(&pc.quant_setup()))?.value;
                rows.push(GridRow {
                    version: v.name.clone(),
                    options: format!("{}-{}", v.options[0], v.options[v.options.len() - 1]),
                    budget_label: char::from(b'A' + bi as u8).to_string(),
                    budget,
                    mode: mode.name().into(),
                    fp_accuracy: fp,
                    quant_accuracy: q,
                    delta: q - fp,
                });
            }
        }
    }
    write_csv(&s.dir.file("grid.csv"), &rows)?;
    write_json(&s.dir.file("grid.json"), &rows)?;
    Ok(table(
        &["version", "options", "budget", "mode", "fp", "delta"],
        &rows
            .iter()
            .map(|r| {
                vec![
                    r.version.clone(),
                    r.options.clone(),
                    format!("{} ({})", r.budget_label, r.budget),
                    r.mode.clone(),
                    pct(r.fp_accuracy),
                    format!("{:+.2}", r.delta),
                ]
            })
            .collect::<Vec<_>>(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_split() {
        assert_eq!(uniform_widths(8, &[3, 4, 5, 6], 36).unwrap(), vec![4, 4, 4, 4, 5, 5, 5, 5]);
        assert_eq!(uniform_widths(8, &[4, 5], 32).unwrap(), vec![4; 8]);
        assert!(uniform_widths(8, &[4, 8], 44).is_err());
    }
}
