//! Finite-difference checks for every differentiable tape operation.
//!
//! Every case rebuilds the graph from scratch for each perturbed input, so
//! the numeric side shares nothing with the tape's backward pass. Inputs
//! are sampled away from kinks (ReLU, max, hinge) so both sides see the
//! same smooth piece.

use dptq_core::autodiff::{RowQuantizer, Tape, Var};
use dptq_core::budget::{allocate_on_tape, ProfitSource};
use dptq_core::rng::Rng;
use dptq_core::train::{hinge_detrimental, hinge_loss_on_tape, hinge_robust, kd_loss, kd_loss_on_tape, top_other, top_two};
use dptq_core::{Result, Tensor};

pub const CASES: usize = 120;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Values bounded away from `at` by at least `gap`.
fn away_from(rng: &mut Rng, shape: &[usize], at: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform_range(-2.0, 2.0);
            if (v - at).abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces `v` to a scalar with fixed pseudo-random weights.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = rand_tensor(&mut Rng::seeded(seed), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn eval(build: &Build<'_>, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).data()[0]
}

/// Relative error between the tape gradient and central differences over
/// all inputs listed in `wrt`.
fn rel_error(build: &Build<'_>, inputs: &[Tensor], wrt: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone().with_requires_grad(wrt.contains(&i))))
        .collect();
    let out = build(&mut tape, &vars).unwrap();
    assert!(tape.value(out).is_scalar());
    tape.backward(out).unwrap();
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for &i in wrt {
        let analytic = tape.grad(vars[i]).unwrap().to_vec();
        for (j, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let num = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-9 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

pub fn run(name: &str, mut case: impl FnMut(&mut Rng, u64) -> f64) {
    let mut rng = Rng::seeded(0x6752_4144 ^ name.len() as u64);
    let mut worst = 0.0f64;
    for c in 0..CASES {
        let e = case(&mut rng, c as u64);
        assert!(e < TOL, "{name}: case {c} relative error {e:e}");
        worst = worst.max(e);
    }
    println!("{name:<24} {CASES} cases, worst relative error {worst:.2e}");
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4))
}

pub fn matmul() {
    run("matmul", |rng, c| {
        let (m, k, n) = dims(rng);
        let a = rand_tensor(rng, &[m, k], -1.0, 1.0);
        let b = rand_tensor(rng, &[k, n], -1.0, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, c)
        };
        rel_error(&f, &[a, b], &[0, 1])
    });
}

pub fn elementwise_binary() {
    for kind in 0..3 {
        let name = ["add", "sub", "mul"][kind];
        run(name, |rng, c| {
            let (m, n, _) = dims(rng);
            let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
            let scalar_rhs = rng.below(3) == 0;
            let b = if scalar_rhs {
                rand_tensor(rng, &[1], -1.0, 1.0)
            } else {
                rand_tensor(rng, &[m, n], -1.0, 1.0)
            };
            let f = move |t: &mut Tape, v: &[Var]| {
                let y = match kind {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                probe(t, y, c)
            };
            rel_error(&f, &[a, b], &[0, 1])
        });
    }
}

pub fn scalar_ops_and_row_bias() {
    run("add_scalar", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let k = rng.uniform_range(-2.0, 2.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.add_scalar(v[0], k);
            let y = t.mul(y, y)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("mul_scalar", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let k = rng.uniform_range(-2.0, 2.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.mul_scalar(v[0], k);
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("add_row", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let b = rand_tensor(rng, &[n], -1.0, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.add_row(v[0], v[1])?;
            let y = t.mul(y, y)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a, b], &[0, 1])
    });
}

pub fn unary() {
    run("relu", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = away_from(rng, &[m, n], 0.0, 0.05);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0]);
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("exp", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -2.0, 2.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.exp(v[0]);
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("log", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], 0.2, 3.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.log(v[0])?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("max_scalar", |rng, c| {
        let (m, n, _) = dims(rng);
        let k = rng.uniform_range(-1.0, 1.0);
        let a = away_from(rng, &[m, n], k, 0.05);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.max_scalar(v[0], k);
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
}

pub fn reductions_and_shapes() {
    run("sum", |rng, _| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum(y))
        };
        rel_error(&f, &[a], &[0])
    });
    run("mean", |rng, _| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.exp(v[0]);
            Ok(t.mean(y))
        };
        rel_error(&f, &[a], &[0])
    });
    run("sum_rows", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = |t: &mut Tape, v: &[Var]| {
            let y = t.sum_rows(v[0]);
            let y = t.mul(y, y)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("reshape", |rng, c| {
        let (m, n, _) = dims(rng);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.reshape(v[0], &[n, m])?;
            let y = t.exp(y);
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("slice_cols", |rng, c| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        let start = rng.below(n);
        let len = 1 + rng.below(n - start);
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.slice_cols(v[0], start, len)?;
            let y = t.mul(y, y)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
    run("gather", |rng, c| {
        let (m, n, _) = dims(rng);
        let idx: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
        let a = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let e = t.exp(v[0]);
            let y = t.gather(e, &idx)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
}

pub fn softmax_with_temperature() {
    run("softmax", |rng, c| {
        let (m, n, _) = dims(rng);
        let n = n + 1;
        let tau = [0.5, 1.0, 2.0, 5.0][rng.below(4)];
        let a = rand_tensor(rng, &[m, n], -3.0, 3.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let y = t.softmax(v[0], tau)?;
            probe(t, y, c)
        };
        rel_error(&f, &[a], &[0])
    });
}

pub fn straight_through_is_identity_on_source() {
    run("ste_passthrough", |rng, c| {
        let (m, n, _) = dims(rng);
        let fwd = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let src = rand_tensor(rng, &[m, n], -1.0, 1.0);
        let mut tape = Tape::new();
        let f = tape.constant(fwd);
        let s = tape.leaf(src.clone().with_requires_grad(true));
        let y = tape.ste_passthrough(f, s).unwrap();
        let l = probe(&mut tape, y, c).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(s).unwrap().to_vec();
        let id = |t: &mut Tape, v: &[Var]| probe(t, v[0], c);
        let mut worst = 0.0f64;
        for (j, a) in analytic.iter().enumerate() {
            let mut p = src.clone();
            p.data_mut()[j] += STEP;
            let mut q = src.clone();
            q.data_mut()[j] -= STEP;
            let num = (eval(&id, &[p]) - eval(&id, &[q])) / (2.0 * STEP);
            worst = worst.max((a - num).abs() / num.abs().max(1e-9));
        }
        worst
    });
}

pub fn quant_select_selection_gradient() {
    run("quant_select", |rng, c| {
        let (m, n, _) = dims(rng);
        let n = n + 2;
        let options = [2u32, 3, 4, 6];
        let x = rand_tensor(rng, &[m, n], -1.0, 2.0);
        let sel = rand_tensor(rng, &[m, 4], 0.0, 1.0);
        let f = move |t: &mut Tape, v: &[Var]| {
            let (y, _) = t.quant_select(v[0], v[1], &options, RowQuantizer::default())?;
            probe(t, y, c)
        };
        rel_error(&f, &[x, sel], &[1])
    });
}

pub fn kd_loss_gradient_and_value() {
    run("kd_loss", |rng, c| {
        let (b, k, _) = dims(rng);
        let k = k + 1;
        let tau = [1.0, 2.0, 5.0][rng.below(3)];
        let teacher_logits = rand_tensor(rng, &[b, k], -3.0, 3.0);
        let p_t = Tensor::new(
            &[b, k],
            (0..b)
                .flat_map(|r| dptq_core::autodiff::softmax(teacher_logits.row(r), tau))
                .collect(),
        )
        .unwrap();
        let z = rand_tensor(rng, &[b, k], -3.0, 3.0);
        let pt = p_t.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let ps = t.softmax(v[0], tau)?;
            kd_loss_on_tape(t, &pt, ps)
        };
        // tape value equals the batch mean of the plain loss
        let mut plain = 0.0;
        for r in 0..b {
            plain += kd_loss(p_t.row(r), &dptq_core::autodiff::softmax(z.row(r), tau)).unwrap();
        }
        let v = eval(&f, &[z.clone()]);
        assert!((v - plain / b as f64).abs() < 1e-12, "{c}");
        rel_error(&f, &[z], &[0])
    });
}

fn probs(rng: &mut Rng, b: usize, k: usize) -> Tensor {
    let z = rand_tensor(rng, &[b, k], -3.0, 3.0);
    Tensor::new(&[b, k], (0..b).flat_map(|r| dptq_core::autodiff::softmax(z.row(r), 1.0)).collect()).unwrap()
}

pub fn hinge_gradients() {
    const DELTA: f64 = 0.01;
    for detrimental in [false, true] {
        let name = if detrimental { "hinge_detrimental" } else { "hinge_robust" };
        run(name, |rng, _| loop {
            let (b, k, _) = dims(rng);
            let k = k + 1;
            let teacher = probs(rng, b, k);
            let z = rand_tensor(rng, &[b, k], -2.0, 2.0);
            let p_hat = probs_from(&z);
            let mut hi = Vec::new();
            let mut lo = Vec::new();
            let mut plain = 0.0;
            let mut smooth = true;
            for r in 0..b {
                let p = p_hat.row(r);
                let (i, j) = top_two(teacher.row(r));
                let (h, l) = if detrimental {
                    let kk = top_other(p, i);
                    // competitor must be unique so it does not switch under perturbation
                    let runner_up = (0..k)
                        .filter(|&c| c != i && c != kk)
                        .map(|c| p[c])
                        .fold(f64::NEG_INFINITY, f64::max);
                    smooth &= p[kk] - runner_up > 1e-3;
                    plain += hinge_detrimental(p, i, kk, DELTA).unwrap();
                    (i, kk)
                } else {
                    plain += hinge_robust(p, i, j, DELTA).unwrap();
                    (j, i)
                };
                smooth &= (p[h] - p[l] + DELTA).abs() > 1e-3;
                hi.push(h);
                lo.push(l);
            }
            if !smooth {
                continue;
            }
            let f = move |t: &mut Tape, v: &[Var]| {
                let p = t.softmax(v[0], 1.0)?;
                hinge_loss_on_tape(t, p, &hi, &lo, DELTA)
            };
            let v = eval(&f, &[z.clone()]);
            assert!((v - plain / b as f64).abs() < 1e-12);
            break rel_error(&f, &[z], &[0]);
        });
    }
}

fn probs_from(z: &Tensor) -> Tensor {
    let k = z.cols();
    Tensor::new(z.shape(), z.data().chunks(k).flat_map(|r| dptq_core::autodiff::softmax(r, 1.0)).collect()).unwrap()
}

/// The allocator's backward pass is the gradient of the relaxed path in
/// which the hard selection is replaced by the profit matrix itself.
pub fn allocator_straight_through_path() {
    for source in [ProfitSource::Softmax, ProfitSource::Logits] {
        let name = match source {
            ProfitSource::Softmax => "allocator_ste_softmax",
            ProfitSource::Logits => "allocator_ste_logits",
        };
        run(name, |rng, c| {
            let batch = 1 + rng.below(3);
            let layers = 1 + rng.below(3);
            let options = [2u32, 3, 4];
            let budget = 3 * layers as u32;
            let n = 3 + rng.below(3);
            let x = rand_tensor(rng, &[batch * layers, n], -1.0, 2.0);
            let logits = rand_tensor(rng, &[batch * layers, 3], -2.0, 2.0);

            let mut tape = Tape::new();
            let lv = tape.leaf(logits.clone().with_requires_grad(true));
            let xv = tape.constant(x.clone());
            let alloc = allocate_on_tape(&mut tape, lv, layers, &options, budget, source).unwrap();
            assert!(alloc.hard.iter().all(|s| s.total_width() == budget));
            let (y, _) = tape.quant_select(xv, alloc.selection, &options, RowQuantizer::default()).unwrap();
            let l = probe(&mut tape, y, c).unwrap();
            tape.backward(l).unwrap();
            let analytic = tape.grad(lv).unwrap().to_vec();

            let relaxed = move |t: &mut Tape, v: &[Var]| {
                let sel = match source {
                    ProfitSource::Softmax => t.softmax(v[0], 1.0)?,
                    ProfitSource::Logits => v[0],
                };
                let (y, _) = t.quant_select(v[1], sel, &options, RowQuantizer::default())?;
                probe(t, y, c)
            };
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for (j, a) in analytic.iter().enumerate() {
                let mut p = logits.clone();
                p.data_mut()[j] += STEP;
                let mut q = logits.clone();
                q.data_mut()[j] -= STEP;
                let num = (eval(&relaxed, &[p, x.clone()]) - eval(&relaxed, &[q, x.clone()])) / (2.0 * STEP);
                diff += (a - num) * (a - num);
                na += a * a;
                nn += num * num;
            }
            let scale = na.sqrt().max(nn.sqrt());
            if scale < 1e-9 {
                diff.sqrt()
            } else {
                diff.sqrt() / scale
            }
        });
    }
}

/// Every suite above.
pub fn all() {
    matmul();
    elementwise_binary();
    scalar_ops_and_row_bias();
    unary();
    reductions_and_shapes();
    softmax_with_temperature();
    straight_through_is_identity_on_source();
    quant_select_selection_gradient();
    kd_loss_gradient_and_value();
    hinge_gradients();
    allocator_straight_through_path();
}
