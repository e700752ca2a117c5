//! Exhaustive-enumeration oracle for the exact knapsack solver.

use std::time::Instant;

use dptq_core::budget::{feasible_budget_range, solve_mckp_exact, BudgetProblem};
use dptq_core::rng::Rng;
use dptq_core::Error;

pub const INSTANCES: u64 = 1000;
pub const INFEASIBLE: u64 = 200;

/// Best left-to-right profit over every selection with widths summing to
/// `capacity`, or `None` when no selection fits exactly.
pub fn brute_force(p: &BudgetProblem) -> Option<f64> {
    let o = p.options.len();
    let total = o.pow(p.num_layers as u32);
    let mut best: Option<f64> = None;
    for code in 0..total {
        let mut rest = code;
        let (mut width, mut profit) = (0u32, 0.0f64);
        for l in 0..p.num_layers {
            let c = rest % o;
            rest /= o;
            width += p.options[c];
            profit += p.profit(l, c);
        }
        if width == p.capacity && best.map_or(true, |b| profit > b) {
            best = Some(profit);
        }
    }
    best
}

pub fn instance(seed: u64, feasible: bool) -> BudgetProblem {
    let mut rng = Rng::seeded(seed);
    let layers = 1 + rng.below(5);
    let num_options = 2 + rng.below(3);
    let lo = 2 + rng.below(6) as u32;
    let options: Vec<u32> = (lo..lo + num_options as u32).collect();
    let profits = (0..layers * num_options).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let (min, max) = feasible_budget_range(layers, &options);
    let capacity = if feasible {
        min + rng.below((max - min + 1) as usize) as u32
    } else if rng.below(2) == 0 {
        min - 1 - rng.below(min as usize) as u32
    } else {
        max + 1 + rng.below(5) as u32
    };
    BudgetProblem::new(layers, options, profits, capacity).unwrap()
}

/// Solves every instance both ways; returns (feasible, infeasible) counts.
pub fn dp_matches_exhaustive_search() -> (u64, u64) {
    let start = Instant::now();
    let (mut feasible, mut infeasible) = (0, 0);
    let cases = (0..INSTANCES).map(|s| (s, true)).chain((0..INFEASIBLE).map(|s| (INSTANCES + s, false)));
    for (seed, fits) in cases {
        let p = instance(seed, fits);
        match (solve_mckp_exact(&p), brute_force(&p)) {
            (Ok(sel), Some(best)) => {
                feasible += 1;
                assert_eq!(sel.total_width(), p.capacity, "seed {seed}");
                assert_eq!(sel.profit(&p), best, "seed {seed}");
                assert!(sel.entries().chunks(p.options.len()).all(|r| r.iter().sum::<f64>() == 1.0));
            }
            (Err(Error::BudgetInfeasible { .. }), None) => infeasible += 1,
            (got, want) => panic!("seed {seed}: solver {got:?}, brute force {want:?}"),
        }
    }
    let elapsed = start.elapsed();
    println!("{feasible} feasible, {infeasible} infeasible instances in {elapsed:?}");
    assert!(feasible == INSTANCES && infeasible == INFEASIBLE);
    assert!(elapsed.as_secs_f64() < 10.0);
    (feasible, infeasible)
}
