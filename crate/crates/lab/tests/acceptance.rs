//! Acceptance run on the default configuration.
//!
//! Trains the full pipeline for three seeds, then checks every criterion
//! and prints one PASS/FAIL line each. Exits non-zero if any fails.

#[path = "../../core/tests/checks/mod.rs"]
mod checks;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dptq_core::analysis::{
    activation_histograms, evaluate, layer_sweep, policy_swap_matrix, predict, transitory_points, ActivationHistogram,
    QuantSetup, QuantSource, SweepScheme, HIST_BINS, HIST_BIN_WIDTH, HIST_HI, HIST_LO,
};
use dptq_core::data::SyntheticDataset;
use dptq_core::nn::{ClassifierNet, PolicyNet};
use dptq_core::train::{EpochMetrics, PairMode};
use dptq_lab::checkpoint::Checkpoint;
use dptq_lab::commands;
use dptq_lab::config::RunConfig;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Files every pipeline run leaves behind.
const ARTIFACTS: &[&str] = &[
    "config.toml",
    "teacher.ckpt",
    "teacher_metrics.jsonl",
    "f_n.ckpt",
    "distill_metrics.jsonl",
    "f_r.ckpt",
    "pi_r.ckpt",
    "pair_robust_metrics.jsonl",
    "f_d.ckpt",
    "pi_d.ckpt",
    "pair_detrimental_metrics.jsonl",
];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, took: Duration, what: &str) -> Result<(), String> {
    ensure(took < limit, format!("{what} took {took:.1?}, limit {limit:?}"))
}

struct Trained {
    seed: u64,
    dir: PathBuf,
    elapsed: Duration,
    f_n: ClassifierNet,
    f_r: ClassifierNet,
    f_d: ClassifierNet,
    pi_r: PolicyNet,
    pi_d: PolicyNet,
    pair_metrics: Vec<EpochMetrics>,
}

fn config(seed: u64) -> RunConfig {
    RunConfig::default().with_seed(seed)
}

fn run_pipeline(seed: u64, dir: &Path) -> Result<(), String> {
    let e = |x: dptq_lab::LabError| x.to_string();
    commands::train_teacher(config(seed), dir).map_err(e)?;
    commands::distill(config(seed), dir, None).map_err(e)?;
    commands::train_pair(config(seed), dir, PairMode::Robust, None).map_err(e)?;
    commands::train_pair(config(seed), dir, PairMode::Detrimental, None).map_err(e)?;
    Ok(())
}

fn load_metrics(path: &Path) -> Vec<EpochMetrics> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn train(seed: u64, dir: &Path) -> Result<Trained, String> {
    let start = Instant::now();
    run_pipeline(seed, dir)?;
    let elapsed = start.elapsed();
    let cls = |role: &str| {
        let p = dir.join(format!("{role}.ckpt"));
        Checkpoint::load(&p).and_then(|c| c.into_classifier(&p)).map_err(|e| e.to_string())
    };
    let pol = |role: &str| {
        let p = dir.join(format!("{role}.ckpt"));
        Checkpoint::load(&p).and_then(|c| c.into_policy(&p)).map_err(|e| e.to_string())
    };
    let mut pair_metrics = load_metrics(&dir.join("pair_robust_metrics.jsonl"));
    pair_metrics.extend(load_metrics(&dir.join("pair_detrimental_metrics.jsonl")));
    Ok(Trained {
        seed,
        dir: dir.to_path_buf(),
        elapsed,
        f_n: cls("f_n")?,
        f_r: cls("f_r")?,
        f_d: cls("f_d")?,
        pi_r: pol("pi_r")?,
        pi_d: pol("pi_d")?,
        pair_metrics,
    })
}

struct Fixture {
    data: SyntheticDataset,
    setup: QuantSetup,
    runs: Vec<Trained>,
}

impl Fixture {
    /// The single-pair fixture used by the structural criteria.
    fn first(&self) -> &Trained {
        &self.runs[0]
    }
}

fn fp(net: &ClassifierNet, f: &Fixture) -> f64 {
    evaluate(net, &f.data.test, &QuantSource::FullPrecision, None).unwrap().value
}

fn quant(net: &ClassifierNet, pi: &PolicyNet, f: &Fixture) -> f64 {
    evaluate(net, &f.data.test, &QuantSource::Policy(pi), Some(&f.setup)).unwrap().value
}

fn c1_mckp() -> Outcome {
    let start = Instant::now();
    let (feasible, infeasible) = checks::mckp::dp_matches_exhaustive_search();
    Ok(format!("{feasible} feasible + {infeasible} infeasible instances in {:.1?}", start.elapsed()))
}

fn c2_quantizer() -> Outcome {
    let start = Instant::now();
    checks::quant::all();
    let took = start.elapsed();
    within(Duration::from_secs(10), took, "quantizer properties")?;
    Ok(format!("4 properties x {} tensors in {took:.1?}", checks::quant::TENSORS))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    checks::gradients::all();
    let took = start.elapsed();
    within(Duration::from_secs(60), took, "gradient checks")?;
    Ok(format!("every op at {} cases, rel. err < 1e-4, in {took:.1?}", checks::gradients::CASES))
}

fn c4_catastrophic(f: &Fixture) -> Outcome {
    let mut lines = Vec::new();
    let mut good = 0;
    for r in &f.runs {
        within(Duration::from_secs(600), r.elapsed, &format!("seed {} pipeline", r.seed))?;
        let (fr, fd) = (fp(&r.f_r, f), fp(&r.f_d, f));
        let (qr, qd) = (quant(&r.f_r, &r.pi_r, f), quant(&r.f_d, &r.pi_d, f));
        let ok = (fr - fd).abs() <= 2.0 && fr - qr <= 2.0 && fd - qd >= 15.0;
        good += usize::from(ok);
        lines.push(format!(
            "seed {}: FP(f_R) {fr:.2} drop {:.2} | FP(f_D) {fd:.2} drop {:.2} | {:.0?} {}",
            r.seed,
            fr - qr,
            fd - qd,
            r.elapsed,
            if ok { "ok" } else { "miss" }
        ));
    }
    let detail = lines.join("; ");
    ensure(good >= 2, format!("{good}/3 seeds meet the bounds: {detail}"))?;
    Ok(format!("{good}/3 seeds: {detail}"))
}

fn c5_swap(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let r = f.first();
    let sm = policy_swap_matrix(
        [&r.f_n, &r.f_r, &r.f_d],
        &r.pi_r,
        &r.pi_d,
        dptq_core::rng::derive_seed(r.seed, 4),
        &f.data.test,
        &f.setup,
    )
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let (dr, dd) = (sm.get("f_D", "pi_R").unwrap(), sm.get("f_D", "pi_D").unwrap());
    let detail = format!("f_D: pi_R {dr:.2} vs pi_D {dd:.2}; matrix {:?}; fp {:?}", sm.accuracy, sm.full_precision);
    ensure(dr - dd >= 10.0, format!("pi_R advantage on f_D below 10 points: {detail}"))?;
    for (n, name) in [(0, "f_N"), (1, "f_R")] {
        for (p, pol) in sm.policies.iter().enumerate() {
            let gap = (sm.accuracy[n][p] - sm.full_precision[n]).abs();
            ensure(gap <= 3.0, format!("{name} under {pol} is {gap:.2} from FP: {detail}"))?;
        }
    }
    within(Duration::from_secs(120), took, "swap matrix")?;
    Ok(format!("{detail} in {took:.1?}"))
}

fn c6_transitory(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let r = f.first();
    let test = &f.data.test;
    let rep = transitory_points(&r.f_r, &r.f_d, &r.pi_d, test, &f.setup).map_err(|e| e.to_string())?;
    let took = start.elapsed();

    // independent recomputation with set algebra on cached predictions
    let correct = |pred: Vec<usize>| -> BTreeSet<usize> { (0..test.len()).filter(|&i| pred[i] == test.y[i]).collect() };
    let pr = correct(predict(&r.f_r, &test.x, &QuantSource::FullPrecision, None).unwrap());
    let pd = correct(predict(&r.f_d, &test.x, &QuantSource::FullPrecision, None).unwrap());
    let pq = correct(predict(&r.f_d, &test.x, &QuantSource::Policy(&r.pi_d), Some(&f.setup)).unwrap());
    let both: BTreeSet<usize> = pr.intersection(&pd).copied().collect();
    let expected: Vec<usize> = both.difference(&pq).copied().collect();
    let pct = 100.0 * expected.len() as f64 / test.len() as f64;
    ensure(rep.indices == expected, "index sets differ")?;
    ensure(rep.percentage.to_bits() == pct.to_bits(), format!("{} vs {pct}", rep.percentage))?;
    ensure(rep.percentage > 0.0, "no transitory points on the detrimental fixture")?;
    within(Duration::from_secs(60), took, "transitory points")?;
    Ok(format!("{} points ({:.2}%) match the set recomputation, {took:.1?}", expected.len(), pct))
}

fn c7_sweep(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let r = f.first();
    let mut worst = Vec::new();
    for (name, net, pi) in [("f_R", &r.f_r, &r.pi_r), ("f_D", &r.f_d, &r.pi_d)] {
        let src = QuantSource::Policy(pi);
        let run = |s| layer_sweep(net, &src, s, &f.data.train, &f.data.test, &f.setup).map_err(|e| e.to_string());
        let before = run(SweepScheme::Before)?;
        let after = run(SweepScheme::After)?;
        let single = run(SweepScheme::Single)?;
        let l = net.quantizable_layers();
        ensure(before.records.len() == l && after.records.len() == l && single.records.len() == l, "record count")?;
        let b1 = &before.records[0];
        let al = &after.records[l - 1];
        ensure(
            b1.test_accuracy == before.baseline_test && b1.train_accuracy == before.baseline_train,
            format!("{name}: before(1) {} != baseline {}", b1.test_accuracy, before.baseline_test),
        )?;
        ensure(
            al.test_accuracy == after.baseline_test && al.train_accuracy == after.baseline_train,
            format!("{name}: after(L) {} != baseline {}", al.test_accuracy, after.baseline_test),
        )?;
        let drop = single
            .records
            .iter()
            .map(|x| single.baseline_test - x.test_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        worst.push((name, drop));
    }
    let took = start.elapsed();
    let (rd, dd) = (worst[0].1, worst[1].1);
    let detail = format!("worst single(l) drop: f_R {rd:.2}, f_D {dd:.2}");
    ensure(dd >= 5.0 && rd < dd, detail.clone())?;
    within(Duration::from_secs(180), took, "layer sweeps")?;
    Ok(format!("before(1) = after(L) = weights-only baseline; {detail}; {took:.1?}"))
}

fn c8_histograms(f: &Fixture) -> Outcome {
    let start = Instant::now();
    let r = f.first();
    ensure(HIST_BINS == 1600 && HIST_LO == -8.0 && HIST_HI == 8.0, "bin layout")?;
    ensure(
        ActivationHistogram::bin_left(0) == HIST_LO
            && (ActivationHistogram::bin_left(HIST_BINS - 1) + HIST_BIN_WIDTH - HIST_HI).abs() < 1e-12,
        "bin edges",
    )?;
    let mut layers = 0;
    for (name, net, pi) in [("f_R", &r.f_r, &r.pi_r), ("f_D", &r.f_d, &r.pi_d)] {
        let hs = activation_histograms(net, &QuantSource::Policy(pi), &f.data.test.x, &f.setup)
            .map_err(|e| e.to_string())?;
        ensure(hs.len() == net.quantizable_layers(), format!("{name}: one entry per layer"))?;
        for h in &hs {
            for hist in [&h.fp, &h.quantized] {
                ensure(hist.counts.len() == HIST_BINS, "bin count")?;
                if let Some(n) = &hist.normalized {
                    let mass: f64 = n.iter().sum();
                    ensure((mass - 1.0).abs() <= 1e-9, format!("{name} layer {}: mass {mass}", h.layer))?;
                }
                ensure(
                    hist.negative_mass == 0.0,
                    format!("{name} layer {}: negative mass {}", h.layer, hist.negative_mass),
                )?;
            }
            ensure(
                h.sparsity_delta == h.quantized.sparsity - h.fp.sparsity,
                format!("{name} layer {}: sparsity delta", h.layer),
            )?;
            layers += 1;
        }
    }
    let took = start.elapsed();
    within(Duration::from_secs(60), took, "histograms")?;
    Ok(format!("{layers} layer pairs, unit mass, no negative mass, deltas emitted; {took:.1?}"))
}

fn c9_budget(f: &Fixture) -> Outcome {
    let mut steps = 0;
    for r in &f.runs {
        for m in &r.pair_metrics {
            ensure(m.budget_violations == 0, format!("seed {} {} epoch {}: violations", r.seed, m.stage, m.epoch))?;
            steps += 1;
        }
    }
    Ok(format!("0 violations over {steps} pair-training epochs"))
}

fn c10_determinism(f: &Fixture, scratch: &Path) -> Outcome {
    let r = f.first();
    let again = scratch.join("rerun");
    run_pipeline(r.seed, &again)?;
    for name in ARTIFACTS {
        let a = std::fs::read(r.dir.join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(again.join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{name} differs on rerun"))?;
    }
    Ok(format!("{} files bitwise identical on rerun of seed {}", ARTIFACTS.len(), r.seed))
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn build_fixture(scratch: &Path) -> Result<Fixture, String> {
    let cfg = config(SEEDS[0]);
    let data = SyntheticDataset::generate(&cfg.dataset).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for seed in SEEDS {
        eprintln!("training seed {seed}");
        runs.push(train(seed, &scratch.join(format!("seed{seed}")))?);
    }
    Ok(Fixture {
        data,
        setup: cfg.pair.quant_setup(),
        runs,
    })
}

fn main() {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "knapsack solver vs brute force", guarded(c1_mckp)),
        (2, "quantizer properties", guarded(c2_quantizer)),
        (3, "gradient checks", guarded(c3_gradients)),
    ];
    match guarded(|| build_fixture(scratch.path())) {
        Ok(f) => {
            results.push((4, "catastrophic failure", guarded(|| c4_catastrophic(&f))));
            results.push((5, "policy swap", guarded(|| c5_swap(&f))));
            results.push((6, "transitory points", guarded(|| c6_transitory(&f))));
            results.push((7, "layer sweep", guarded(|| c7_sweep(&f))));
            results.push((8, "histograms", guarded(|| c8_histograms(&f))));
            results.push((9, "budget in vivo", guarded(|| c9_budget(&f))));
            results.push((10, "determinism", guarded(|| c10_determinism(&f, scratch.path()))));
        }
        Err(e) => {
            let names = [
                "catastrophic failure",
                "policy swap",
                "transitory points",
                "layer sweep",
                "histograms",
                "budget in vivo",
                "determinism",
            ];
            for (n, name) in (4..).zip(names) {
                results.push((n, name, Err(format!("fixture training failed: {e}"))));
            }
        }
    }

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
