mod common;

use common::small_space;
use epd_sim::optimizer::{solve, Metric, Objective, SearchProblem, Strategy};
use epd_sim::presets::preset;

fn problem(metric: Metric, beta: f64) -> SearchProblem {
    let p = preset("table5-optimizer").unwrap();
    let mut workload = p.workload.clone();
    workload.num_requests = 40;
    SearchProblem {
        base: p.systems[0].config.clone(),
        workload,
        rates: (1..=8).map(|i| f64::from(i) * 0.5).collect(),
        objective: Objective::new(metric, beta),
    }
}

/// Brute force over the enumerated space, independent of the solver's own loop.
fn oracle(problem: &SearchProblem) -> (f64, usize) {
    let all = small_space().enumerate().unwrap();
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, c) in all.iter().enumerate() {
        let s = problem.evaluate(c).score;
        if s > best.0 {
            best = (s, i);
        }
    }
    best
}

#[test]
fn small_space_fits_the_oracle_bound() {
    let all = small_space().enumerate().unwrap();
    assert!(!all.is_empty() && all.len() <= 50, "{} configs", all.len());
    assert!(all.iter().all(|c| c.gpus() == 8));
}

#[test]
fn exhaustive_equals_brute_force() {
    for (metric, beta) in [(Metric::Goodput, 0.0), (Metric::NegMeanTtft, 0.0), (Metric::Throughput, 0.1)] {
        let problem = problem(metric, beta);
        let (score, index) = oracle(&problem);
        let out = solve(&small_space(), &problem, Strategy::Exhaustive, 1, 0).unwrap();
        let all = small_space().enumerate().unwrap();
        assert_eq!(out.best.score, score, "{metric:?}");
        assert_eq!(out.best.candidate, all[index], "{metric:?}");
        assert_eq!(out.log.len(), all.len());
    }
}

#[test]
fn guided_search_on_a_small_space_finds_the_optimum() {
    let problem = problem(Metric::Goodput, 0.0);
    let (score, _) = oracle(&problem);
    let n = small_space().enumerate().unwrap().len();
    let out = solve(&small_space(), &problem, Strategy::SurrogateGuided, n, 3).unwrap();
    assert_eq!(out.best.score, score);
}
