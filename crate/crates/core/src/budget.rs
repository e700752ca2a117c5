//! Exact-budget bit-width allocation.
//!
//! Choosing one bit-width per layer so the widths sum to a fixed budget
//! while maximizing the policy's scores is a multiple-choice knapsack
//! problem: every layer is a group, every option is an item whose weight
//! is its width and whose profit is the policy's logit or probability for
//! it. [`solve_mckp_exact`] solves it by dynamic programming over
//! (layer, cumulative width) and requires the widths to hit the budget
//! exactly, not merely stay under it.
//!
//! [`allocate_on_tape`] wraps the solver in a straight-through estimator
//! so the hard one-hot selection can be used in the forward pass while
//! the policy still receives gradient.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Var};
use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which policy output is used as the knapsack profit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfitSource {
    Logits,
    #[default]
    Softmax,
}

/// Validated bit-width option list (strictly increasing, every width ≥ 2).
pub fn validate_options(options: &[u32]) -> Result<()> {
    if options.len() < 2 {
        return Err(contract("at least two bit-width options are required"));
    }
    if options.iter().any(|&w| w < 2) {
        return Err(contract("bit-width options must be at least 2"));
    }
    if options.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("bit-width options must be strictly increasing"));
    }
    Ok(())
}

/// `(L * min(options), L * max(options))`.
pub fn feasible_budget_range(num_layers: usize, options: &[u32]) -> (u32, u32) {
    let lo = options.iter().copied().min().unwrap_or(0);
    let hi = options.iter().copied().max().unwrap_or(0);
    (num_layers as u32 * lo, num_layers as u32 * hi)
}

fn infeasible(capacity: u32, layers: usize, options: &[u32]) -> Error {
    let (min, max) = feasible_budget_range(layers, options);
    Error::BudgetInfeasible {
        capacity,
        layers,
        min,
        max,
    }
}

/// One knapsack instance: `profits` is `L×O` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetProblem {
    pub num_layers: usize,
    pub options: Vec<u32>,
    pub profits: Vec<f64>,
    pub capacity: u32,
}

impl BudgetProblem {
    pub fn new(num_layers: usize, options: Vec<u32>, profits: Vec<f64>, capacity: u32) -> Result<Self> {
        validate_options(&options)?;
        if num_layers == 0 {
            return Err(contract("at least one layer is required"));
        }
        if profits.len() != num_layers * options.len() {
            return Err(Error::Dimension {
                op: "budget_problem",
                lhs: vec![num_layers, options.len()],
                rhs: vec![profits.len()],
            });
        }
        if profits.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "budget_problem" });
        }
        Ok(Self {
            num_layers,
            options,
            profits,
            capacity,
        })
    }

    pub fn profit(&self, layer: usize, option: usize) -> f64 {
        self.profits[layer * self.options.len() + option]
    }

    pub fn is_feasible(&self) -> bool {
        let (lo, hi) = feasible_budget_range(self.num_layers, &self.options);
        (lo..=hi).contains(&self.capacity)
    }
}

/// One-hot choice per layer, stored both as option indices and widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMatrix {
    pub num_options: usize,
    pub choices: Vec<usize>,
    pub widths: Vec<u32>,
}

impl SelectionMatrix {
    pub fn from_choices(choices: Vec<usize>, options: &[u32]) -> Self {
        let widths = choices.iter().map(|&c| options[c]).collect();
        Self {
            num_options: options.len(),
            choices,
            widths,
        }
    }

    /// Dense `L×O` binary entries.
    pub fn entries(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.choices.len() * self.num_options];
        for (l, &c) in self.choices.iter().enumerate() {
            e[l * self.num_options + c] = 1.0;
        }
        e
    }

    pub fn total_width(&self) -> u32 {
        self.widths.iter().sum()
    }

    /// Profit of this selection, summed layer by layer from the first.
    pub fn profit(&self, problem: &BudgetProblem) -> f64 {
        self.choices
            .iter()
            .enumerate()
            .fold(0.0, |acc, (l, &c)| acc + problem.profit(l, c))
    }
}

/// Exact solver: maximizes total profit subject to `sum(widths) == C`.
///
/// The table is built forward over layers, so the stored value of every
/// state is a left-to-right profit sum. Among optimal selections the one
/// with the smallest width at the earliest differing layer is returned.
pub fn solve_mckp_exact(problem: &BudgetProblem) -> Result<SelectionMatrix> {
    let l_count = problem.num_layers;
    let opts = &problem.options;
    let cap = problem.capacity as usize;
    if !problem.is_feasible() {
        return Err(infeasible(problem.capacity, l_count, opts));
    }
    let width = cap + 1;
    // best[l][c]: best profit over the first l layers with widths summing to c.
    let mut best = vec![f64::NEG_INFINITY; (l_count + 1) * width];
    best[0] = 0.0;
    for l in 0..l_count {
        for c in 0..width {
            let prev = best[l * width + c];
            if prev == f64::NEG_INFINITY {
                continue;
            }
            for (i, &w) in opts.iter().enumerate() {
                let nc = c + w as usize;
                if nc > cap {
                    break;
                }
                let cand = prev + problem.profit(l, i);
                let slot = &mut best[(l + 1) * width + nc];
                if cand > *slot {
                    *slot = cand;
                }
            }
        }
    }
    if best[l_count * width + cap] == f64::NEG_INFINITY {
        return Err(infeasible(problem.capacity, l_count, opts));
    }
    // Mark states lying on an optimal path, walking back from (L, C).
    let mut on_path = vec![false; (l_count + 1) * width];
    on_path[l_count * width + cap] = true;
    for l in (1..=l_count).rev() {
        for c in 0..width {
            if !on_path[l * width + c] {
                continue;
            }
            for (i, &w) in opts.iter().enumerate() {
                let Some(pc) = c.checked_sub(w as usize) else { break };
                let prev = best[(l - 1) * width + pc];
                if prev != f64::NEG_INFINITY && prev + problem.profit(l - 1, i) == best[l * width + c] {
                    on_path[(l - 1) * width + pc] = true;
                }
            }
        }
    }
    // Forward walk taking the smallest tight width at each layer.
    let mut choices = Vec::with_capacity(l_count);
    let mut c = 0usize;
    for l in 0..l_count {
        let here = best[l * width + c];
        let pick = opts.iter().enumerate().position(|(i, &w)| {
            let nc = c + w as usize;
            nc <= cap && on_path[(l + 1) * width + nc] && here + problem.profit(l, i) == best[(l + 1) * width + nc]
        });
        let i = pick.ok_or_else(|| contract("knapsack backtrack lost the optimal path"))?;
        choices.push(i);
        c += opts[i] as usize;
    }
    debug_assert_eq!(c, cap);
    Ok(SelectionMatrix::from_choices(choices, opts))
}

/// Row-softmaxed policy logits for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub num_layers: usize,
    pub num_options: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl PolicyOutput {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(contract("policy logits must be an L×O matrix"));
        }
        if !logits.all_finite() {
            return Err(Error::NonFinite { op: "policy_output" });
        }
        let (l, o) = (logits.shape()[0], logits.shape()[1]);
        let probs = logits.data().chunks(o).flat_map(|r| softmax(r, 1.0)).collect();
        Ok(Self {
            num_layers: l,
            num_options: o,
            logits: logits.data().to_vec(),
            probs,
        })
    }

    pub fn profits(&self, source: ProfitSource) -> &[f64] {
        match source {
            ProfitSource::Logits => &self.logits,
            ProfitSource::Softmax => &self.probs,
        }
    }
}

/// Hard allocation for one policy output.
pub fn allocate_bitwidths(
    policy_out: &PolicyOutput,
    options: &[u32],
    capacity: u32,
    source: ProfitSource,
) -> Result<SelectionMatrix> {
    if policy_out.num_options != options.len() {
        return Err(Error::Dimension {
            op: "allocate_bitwidths",
            lhs: vec![policy_out.num_layers, policy_out.num_options],
            rhs: vec![options.len()],
        });
    }
    let problem = BudgetProblem::new(
        policy_out.num_layers,
        options.to_vec(),
        policy_out.profits(source).to_vec(),
        capacity,
    )?;
    solve_mckp_exact(&problem)
}

/// Result of allocating a batch on the tape.
#[derive(Debug, Clone)]
pub struct TapeAllocation {
    /// Straight-through selection `[B·L × O]`: forward bits are the hard
    /// one-hot Γ, backward is the identity onto the policy profits.
    pub selection: Var,
    pub hard: Vec<SelectionMatrix>,
}

/// Allocates every example of a batch. `logits` is `[B·L × O]`, rows
/// grouped per example.
pub fn allocate_on_tape(
    tape: &mut Tape,
    logits: Var,
    num_layers: usize,
    options: &[u32],
    capacity: u32,
    source: ProfitSource,
) -> Result<TapeAllocation> {
    validate_options(options)?;
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != options.len() || num_layers == 0 || shape[0] % num_layers != 0 {
        return Err(Error::Dimension {
            op: "allocate_on_tape",
            lhs: shape,
            rhs: vec![num_layers, options.len()],
        });
    }
    let profit = match source {
        ProfitSource::Softmax => tape.softmax(logits, 1.0)?,
        ProfitSource::Logits => logits,
    };
    let o = options.len();
    let per = num_layers * o;
    let values = tape.value(profit).data().to_vec();
    let mut hard = Vec::with_capacity(shape[0] / num_layers);
    let mut gamma = Vec::with_capacity(values.len());
    for chunk in values.chunks(per) {
        let problem = BudgetProblem::new(num_layers, options.to_vec(), chunk.to_vec(), capacity)?;
        let sel = solve_mckp_exact(&problem)?;
        gamma.extend(sel.entries());
        hard.push(sel);
    }
    let gamma = tape.constant(Tensor::new(&shape, gamma)?);
    let selection = tape.ste_passthrough(gamma, profit)?;
    Ok(TapeAllocation { selection, hard })
}

/// Uniform sampler over all width vectors that hit the budget exactly.
#[derive(Debug, Clone)]
pub struct FeasibleSampler {
    num_layers: usize,
    options: Vec<u32>,
    capacity: u32,
    // counts[l][c]: number of ways layers l.. can use exactly c bits
    counts: Vec<f64>,
}

impl FeasibleSampler {
    pub fn new(num_layers: usize, options: &[u32], capacity: u32) -> Result<Self> {
        validate_options(options)?;
        let width = capacity as usize + 1;
        let mut counts = vec![0.0; (num_layers + 1) * width];
        counts[num_layers * width] = 1.0;
        for l in (0..num_layers).rev() {
            for c in 0..width {
                counts[l * width + c] = options
                    .iter()
                    .filter(|&&w| w as usize <= c)
                    .map(|&w| counts[(l + 1) * width + c - w as usize])
                    .sum();
            }
        }
        if counts[capacity as usize] == 0.0 {
            return Err(infeasible(capacity, num_layers, options));
        }
        Ok(Self {
            num_layers,
            options: options.to_vec(),
            capacity,
            counts,
        })
    }

    /// Number of feasible width vectors.
    pub fn count(&self) -> f64 {
        self.counts[self.capacity as usize]
    }

    pub fn sample(&self, rng: &mut Rng) -> SelectionMatrix {
        let width = self.capacity as usize + 1;
        let mut rem = self.capacity as usize;
        let mut choices = Vec::with_capacity(self.num_layers);
        for l in 0..self.num_layers {
            let total = self.counts[l * width + rem];
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &w) in self.options.iter().enumerate() {
                if w as usize > rem {
                    break;
                }
                let ways = self.counts[(l + 1) * width + rem - w as usize];
                if ways == 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < ways {
                    break;
                }
                target -= ways;
            }
            let i = pick.expect("feasible state has a completion");
            choices.push(i);
            rem -= self.options[i] as usize;
        }
        SelectionMatrix::from_choices(choices, &self.options)
    }
}
