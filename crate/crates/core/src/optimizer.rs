//! Configuration search: maximise `f(config) - beta * cost(config)` over a
//! discrete space of EPD deployments, using the simulator as the black box.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metrics::{self, GOODPUT_THRESHOLD};
use crate::model::StageRole;
use crate::sim::{run_simulation, InstanceConfig, SchedulePolicy, SystemConfig};
use crate::workload::{generate_poisson, WorkloadSpec};

/// `c * sum(tp * pp)` over the instances.
pub fn cost(instances: &[InstanceConfig], cost_per_gpu: f64) -> f64 {
    cost_per_gpu * instances.iter().map(|i| f64::from(i.tp * i.pp)).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetMode {
    AtMost,
    Exactly,
}

/// Allowed values for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRange {
    /// Inclusive instance-count range.
    pub count: [u32; 2],
    pub tp: Vec<u32>,
    pub pp: Vec<u32>,
    pub max_batch: Vec<u32>,
}

impl StageRange {
    pub fn fixed(count: [u32; 2], max_batch: Vec<u32>) -> Self {
        Self {
            count,
            tp: vec![1],
            pp: vec![1],
            max_batch,
        }
    }

    fn dims(&self) -> [usize; 4] {
        [
            (self.count[1] - self.count[0] + 1) as usize,
            self.tp.len(),
            self.pp.len(),
            self.max_batch.len(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpace {
    pub gpu_budget: u32,
    pub budget_mode: BudgetMode,
    pub encode: StageRange,
    pub prefill: StageRange,
    pub decode: StageRange,
    pub policies: Vec<SchedulePolicy>,
    pub irp: Vec<bool>,
}

/// One stage of a candidate deployment; all instances of the stage share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageChoice {
    pub count: u32,
    pub tp: u32,
    pub pp: u32,
    pub max_batch: u32,
}

impl StageChoice {
    fn gpus(&self) -> u32 {
        self.count * self.tp * self.pp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub encode: StageChoice,
    pub prefill: StageChoice,
    pub decode: StageChoice,
    pub policy: SchedulePolicy,
    pub irp: bool,
}

impl Candidate {
    pub fn gpus(&self) -> u32 {
        self.encode.gpus() + self.prefill.gpus() + self.decode.gpus()
    }

    pub fn layout(&self) -> String {
        format!("{}E{}P{}D", self.encode.count, self.prefill.count, self.decode.count)
    }

    pub fn instances(&self) -> Vec<InstanceConfig> {
        let stages = [
            (StageRole::Encode, self.encode),
            (StageRole::Prefill, self.prefill),
            (StageRole::Decode, self.decode),
        ];
        stages
            .iter()
            .flat_map(|&(role, s)| {
                (0..s.count).map(move |_| InstanceConfig {
                    role,
                    tp: s.tp,
                    pp: s.pp,
                    max_batch: s.max_batch,
                    policy: self.policy,
                })
            })
            .collect()
    }

    /// `base` with this candidate's instances and IRP setting.
    pub fn apply(&self, base: &SystemConfig) -> SystemConfig {
        let mut cfg = base.clone();
        cfg.instances = self.instances();
        cfg.irp = self.irp;
        cfg
    }
}

impl ConfigSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("config space", r));
        for s in [&self.encode, &self.prefill, &self.decode] {
            if s.count[0] > s.count[1] {
                return bad("count range is empty");
            }
            if s.tp.is_empty() || s.pp.is_empty() || s.max_batch.is_empty() {
                return bad("every stage needs tp, pp and max_batch values");
            }
            if s.tp.contains(&0) || s.pp.contains(&0) || s.max_batch.contains(&0) {
                return bad("tp, pp and max_batch must be >= 1");
            }
        }
        if self.encode.pp != [1] {
            return bad("encode instances use pp = 1");
        }
        if self.policies.is_empty() || self.irp.is_empty() {
            return bad("policies and irp need at least one value");
        }
        if self.gpu_budget == 0 {
            return bad("gpu_budget must be >= 1");
        }
        Ok(())
    }

    fn radices(&self) -> Vec<usize> {
        let mut r = Vec::with_capacity(14);
        for s in [&self.encode, &self.prefill, &self.decode] {
            r.extend(s.dims());
        }
        r.push(self.policies.len());
        r.push(self.irp.len());
        r
    }

    /// Size of the unconstrained Cartesian product.
    pub fn product_size(&self) -> u128 {
        self.radices().iter().map(|&d| d as u128).product()
    }

    fn decode_index(&self, mut index: u128) -> Candidate {
        let radices = self.radices();
        let mut digit = radices.iter().map(|&r| {
            let d = (index % r as u128) as usize;
            index /= r as u128;
            d
        });
        let mut stage = |s: &StageRange| {
            let c = digit.next().expect("radix");
            let tp = digit.next().expect("radix");
            let pp = digit.next().expect("radix");
            let b = digit.next().expect("radix");
            StageChoice {
                count: s.count[0] + c as u32,
                tp: s.tp[tp],
                pp: s.pp[pp],
                max_batch: s.max_batch[b],
            }
        };
        let encode = stage(&self.encode);
        let prefill = stage(&self.prefill);
        let decode = stage(&self.decode);
        let policy = self.policies[digit.next().expect("radix")];
        let irp = self.irp[digit.next().expect("radix")];
        Candidate {
            encode,
            prefill,
            decode,
            policy,
            irp,
        }
    }

    pub fn within_budget(&self, c: &Candidate) -> bool {
        let g = c.gpus();
        match self.budget_mode {
            BudgetMode::AtMost => g <= self.gpu_budget,
            BudgetMode::Exactly => g == self.gpu_budget,
        }
    }

    /// Every candidate satisfying the budget, in index order.
    pub fn enumerate(&self) -> Result<Vec<Candidate>> {
        self.validate()?;
        let n = self.product_size();
        if n > 10_000_000 {
            return Err(Error::invalid("config space", format!("{n} points is too many to enumerate")));
        }
        Ok((0..n)
            .map(|i| self.decode_index(i))
            .filter(|c| self.within_budget(c))
            .collect())
    }

    /// Uniform draw from the budget-feasible candidates by rejection.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Candidate> {
        let n = self.product_size();
        for _ in 0..1_000_000 {
            let c = self.decode_index(rng.random_range(0..n));
            if self.within_budget(&c) {
                return Ok(c);
            }
        }
        Err(Error::EmptyFeasibleSet)
    }

    /// `n` independent uniform draws, seeded.
    pub fn sample_n(&self, n: usize, seed: u64) -> Result<Vec<Candidate>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    /// Surrogate features: counts, log2 of tp/pp/batch, policy one-hot, IRP.
    fn features(&self, c: &Candidate) -> Vec<f64> {
        let lg = |v: u32| f64::from(v).log2();
        let mut x = Vec::with_capacity(16);
        for s in [c.encode, c.prefill, c.decode] {
            x.extend([f64::from(s.count), lg(s.tp), lg(s.pp), lg(s.max_batch)]);
        }
        for p in &self.policies {
            x.push(f64::from(u8::from(*p == c.policy)));
        }
        x.push(f64::from(u8::from(c.irp)));
        x
    }

    fn feature_scales(&self) -> Vec<f64> {
        let span = |v: &[u32]| {
            let lo = v.iter().min().copied().unwrap_or(1);
            let hi = v.iter().max().copied().unwrap_or(1);
            (f64::from(hi).log2() - f64::from(lo).log2()).max(1.0)
        };
        let mut s = Vec::with_capacity(16);
        for r in [&self.encode, &self.prefill, &self.decode] {
            s.extend([
                f64::from(r.count[1] - r.count[0]).max(1.0),
                span(&r.tp),
                span(&r.pp),
                span(&r.max_batch),
            ]);
        }
        s.extend(std::iter::repeat_n(1.0, self.policies.len() + 1));
        s
    }
}

/// The space used for the optimizer ablation: 8 GPUs exactly, tp = pp = 1,
/// one batch size per stage.
pub fn restricted_appendix_b4() -> ConfigSpace {
    ConfigSpace {
        gpu_budget: 8,
        budget_mode: BudgetMode::Exactly,
        encode: StageRange::fixed([1, 6], vec![1, 2, 4, 8]),
        prefill: StageRange::fixed([1, 6], vec![1, 2, 4]),
        decode: StageRange::fixed([1, 6], vec![16, 64, 128]),
        policies: vec![SchedulePolicy::Fcfs],
        irp: vec![true, false],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Highest rate on the grid with attainment >= 0.9.
    Goodput,
    /// Negative mean TTFT at the workload's own rate.
    NegMeanTtft,
    /// Completed requests per second of makespan at the workload's own rate.
    Throughput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub metric: Metric,
    pub beta: f64,
    pub cost_per_gpu: f64,
}

impl Objective {
    pub fn new(metric: Metric, beta: f64) -> Self {
        Self {
            metric,
            beta,
            cost_per_gpu: 1.0,
        }
    }
}

/// Everything an evaluation needs besides the candidate.
#[derive(Debug, Clone)]
pub struct SearchProblem {
    /// Model, hardware, cost and cache settings; instances are replaced.
    pub base: SystemConfig,
    pub workload: WorkloadSpec,
    /// Rate grid for the goodput metric.
    pub rates: Vec<f64>,
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub candidate: Candidate,
    /// Objective metric before the cost term; `-inf` when infeasible.
    pub f: f64,
    pub cost: f64,
    pub score: f64,
    pub error: Option<String>,
}

impl SearchProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.objective.beta >= 0.0 && self.objective.beta.is_finite()) {
            return Err(Error::invalid("objective", "beta must be >= 0"));
        }
        if !(self.objective.cost_per_gpu >= 0.0 && self.objective.cost_per_gpu.is_finite()) {
            return Err(Error::invalid("objective", "cost_per_gpu must be >= 0"));
        }
        self.workload.validate()?;
        if self.objective.metric == Metric::Goodput {
            metrics::validate_grid(&self.rates)?;
        }
        Ok(())
    }

    fn metric(&self, cfg: &SystemConfig) -> Result<f64> {
        match self.objective.metric {
            Metric::Goodput => metrics::goodput(cfg, &self.workload, &self.rates, GOODPUT_THRESHOLD),
            Metric::NegMeanTtft | Metric::Throughput => {
                let reqs = generate_poisson(&self.workload)?;
                let trace = run_simulation(cfg, &reqs, self.workload.seed)?;
                if trace.rejected() > 0 {
                    return Ok(f64::NEG_INFINITY);
                }
                if self.objective.metric == Metric::Throughput {
                    let span = trace.makespan();
                    return Ok(if span > 0.0 { trace.completed() as f64 / span } else { 0.0 });
                }
                let ttfts = trace
                    .requests
                    .iter()
                    .map(metrics::ttft)
                    .collect::<Result<Vec<f64>>>()?;
                Ok(-ttfts.iter().sum::<f64>() / ttfts.len() as f64)
            }
        }
    }

    /// Scores one candidate. Simulation errors yield a `-inf` score with the
    /// error recorded instead of failing the search.
    pub fn evaluate(&self, candidate: &Candidate) -> Evaluation {
        let cfg = candidate.apply(&self.base);
        let cost = cost(&cfg.instances, self.objective.cost_per_gpu);
        let (f, error) = match cfg.validate().and_then(|_| self.metric(&cfg)) {
            Ok(f) => (f, None),
            Err(e) => (f64::NEG_INFINITY, Some(format!("{}: {e}", e.kind()))),
        };
        Evaluation {
            candidate: *candidate,
            f,
            cost,
            score: f - self.objective.beta * cost,
            error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Exhaustive,
    RandomSearch,
    /// Inverse-distance-weighted surrogate with expected-improvement proposals.
    SurrogateGuided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub best: Evaluation,
    /// Every evaluation in the order it was made.
    pub log: Vec<Evaluation>,
}

fn best_of(log: &[Evaluation]) -> Result<Evaluation> {
    log.iter()
        .filter(|e| e.score.is_finite())
        .fold(None, |best: Option<&Evaluation>, e| match best {
            Some(b) if b.score >= e.score => Some(b),
            _ => Some(e),
        })
        .cloned()
        .ok_or(Error::EmptyFeasibleSet)
}

/// Searches `space` for the best candidate. `trials` bounds the number of
/// evaluations for the sampling strategies and is ignored by `Exhaustive`.
pub fn solve(
    space: &ConfigSpace,
    problem: &SearchProblem,
    strategy: Strategy,
    trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    problem.validate()?;
    if trials == 0 {
        return Err(Error::invalid("solve", "trials must be >= 1"));
    }
    let log = match strategy {
        Strategy::Exhaustive => {
            let all = space.enumerate()?;
            all.par_iter().map(|c| problem.evaluate(c)).collect()
        }
        Strategy::RandomSearch => {
            let draws = space.sample_n(trials, seed)?;
            let mut unique: Vec<Candidate> = Vec::new();
            for c in &draws {
                if !unique.contains(c) {
                    unique.push(*c);
                }
            }
            let scored: HashMap<Candidate, Evaluation> =
                unique.par_iter().map(|c| (*c, problem.evaluate(c))).collect();
            draws.iter().map(|c| scored[c].clone()).collect()
        }
        Strategy::SurrogateGuided => surrogate_search(space, problem, trials, seed)?,
    };
    Ok(SearchOutcome {
        best: best_of(&log)?,
        log,
    })
}

struct Surrogate {
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    spread: f64,
}

impl Surrogate {
    fn new(xs: Vec<Vec<f64>>, raw: &[f64]) -> Self {
        let finite: Vec<f64> = raw.iter().copied().filter(|y| y.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (floor, spread) = if finite.is_empty() {
            (0.0, 1.0)
        } else {
            let spread = (hi - lo).max(1e-9);
            (lo - spread, spread)
        };
        let ys = raw.iter().map(|&y| if y.is_finite() { y } else { floor }).collect();
        Self { xs, ys, spread }
    }

    /// Predicted mean and uncertainty at `x`.
    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let dist = |a: &[f64]| a.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let d: Vec<f64> = self.xs.iter().map(|a| dist(a)).collect();
        if let Some(i) = d.iter().position(|&v| v == 0.0) {
            return (self.ys[i], 0.0);
        }
        let w: Vec<f64> = d.iter().map(|v| 1.0 / (v * v)).collect();
        let total: f64 = w.iter().sum();
        let mu = w.iter().zip(&self.ys).map(|(w, y)| w * y).sum::<f64>() / total;
        let var = w.iter().zip(&self.ys).map(|(w, y)| w * (y - mu).powi(2)).sum::<f64>() / total;
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let reach = (dmin / (x.len() as f64).sqrt()).min(1.0);
        (mu, var.sqrt() + self.spread * reach)
    }

    fn expected_improvement(&self, x: &[f64], best: f64, normal: &Normal) -> f64 {
        let (mu, sigma) = self.predict(x);
        if sigma <= 0.0 {
            return (mu - best).max(0.0);
        }
        let z = (mu - best) / sigma;
        (mu - best) * normal.cdf(z) + sigma * normal.pdf(z)
    }
}

fn surrogate_search(space: &ConfigSpace, problem: &SearchProblem, trials: usize, seed: u64) -> Result<Vec<Evaluation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = space.feature_scales();
    let encode = |c: &Candidate| -> Vec<f64> {
        space.features(c).iter().zip(&scales).map(|(v, s)| v / s).collect()
    };
    // Small spaces are scored in full at every step; large ones by a fresh pool.
    let full = if space.product_size() <= 50_000 { Some(space.enumerate()?) } else { None };
    if full.as_ref().is_some_and(Vec::is_empty) {
        return Err(Error::EmptyFeasibleSet);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");

    let mut log: Vec<Evaluation> = Vec::new();
    let mut seen: Vec<Candidate> = Vec::new();
    let n_init = trials.min((trials / 4).max(4));
    let mut attempts = 0;
    let mut init = Vec::new();
    while init.len() < n_init && attempts < n_init * 100 {
        attempts += 1;
        let c = space.sample(&mut rng)?;
        if !init.contains(&c) {
            init.push(c);
        }
    }
    log.extend(init.par_iter().map(|c| problem.evaluate(c)).collect::<Vec<_>>());
    seen.extend(init);

    while log.len() < trials {
        let pool: Vec<Candidate> = match &full {
            Some(all) => all.iter().filter(|c| !seen.contains(c)).copied().collect(),
            None => {
                let mut p = Vec::new();
                for _ in 0..512 {
                    let c = space.sample(&mut rng)?;
                    if !seen.contains(&c) && !p.contains(&c) {
                        p.push(c);
                    }
                }
                p
            }
        };
        if pool.is_empty() {
            break;
        }
        let xs: Vec<Vec<f64>> = seen.iter().map(&encode).collect();
        let ys: Vec<f64> = log.iter().map(|e| e.score).collect();
        let model = Surrogate::new(xs, &ys);
        let best = model.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pick = pool
            .iter()
            .map(|c| (model.expected_improvement(&encode(c), best, &normal), c))
            .fold(None, |acc: Option<(f64, &Candidate)>, (ei, c)| match acc {
                Some((b, _)) if b >= ei => acc,
                _ => Some((ei, c)),
            })
            .map(|(_, c)| *c)
            .expect("non-empty pool");
        log.push(problem.evaluate(&pick));
        seen.push(pick);
    }
    Ok(log)
}

#[derive(Debug, Serialize)]
struct LogRow {
    trial: usize,
    layout: String,
    encode_tp: u32,
    encode_batch: u32,
    prefill_tp: u32,
    prefill_pp: u32,
    prefill_batch: u32,
    decode_tp: u32,
    decode_pp: u32,
    decode_batch: u32,
    policy: String,
    irp: bool,
    gpus: u32,
    f: f64,
    cost: f64,
    score: f64,
    error: String,
}

/// Search log as CSV, one row per evaluation.
pub fn write_search_log<W: Write>(log: &[Evaluation], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (trial, e) in log.iter().enumerate() {
        let c = &e.candidate;
        w.serialize(LogRow {
            trial,
            layout: c.layout(),
            encode_tp: c.encode.tp,
            encode_batch: c.encode.max_batch,
            prefill_tp: c.prefill.tp,
            prefill_pp: c.prefill.pp,
            prefill_batch: c.prefill.max_batch,
            decode_tp: c.decode.tp,
            decode_pp: c.decode.pp,
            decode_batch: c.decode.max_batch,
            policy: c.policy.to_string(),
            irp: c.irp,
            gpus: c.gpus(),
            f: e.f,
            cost: e.cost,
            score: e.score,
            error: e.error.clone().unwrap_or_default(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(tp: u32, pp: u32) -> InstanceConfig {
        InstanceConfig {
            tp,
            pp,
            ..InstanceConfig::new(StageRole::Decode, 1)
        }
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost(&[inst(2, 1), inst(1, 1), inst(1, 2)], 1.0), 5.0);
        assert_eq!(cost(&[], 1.0), 0.0);
        let c = restricted_appendix_b4().enumerate().unwrap();
        let five_two_one = c
            .iter()
            .find(|c| c.layout() == "5E2P1D")
            .expect("5E2P1D is in the space");
        assert_eq!(cost(&five_two_one.instances(), 1.0), 8.0);
    }

    #[test]
    fn restricted_space_size() {
        // 21 ways to split 8 GPUs into three non-empty stages.
        let s = restricted_appendix_b4();
        assert_eq!(s.enumerate().unwrap().len(), 21 * 4 * 3 * 3 * 2);
    }

    #[test]
    fn sampling_respects_budget_modes() {
        let mut s = restricted_appendix_b4();
        for c in s.sample_n(200, 1).unwrap() {
            assert_eq!(c.gpus(), 8);
        }
        s.budget_mode = BudgetMode::AtMost;
        s.gpu_budget = 5;
        for c in s.sample_n(200, 2).unwrap() {
            assert!(c.gpus() <= 5);
        }
        s.gpu_budget = 2;
        assert!(s.enumerate().unwrap().is_empty());
        assert!(matches!(s.sample(&mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyFeasibleSet)));
    }

    #[test]
    fn candidates_expand_in_stage_order() {
        let s = restricted_appendix_b4();
        let c = s.sample_n(1, 3).unwrap()[0];
        let roles: Vec<_> = c.instances().iter().map(|i| i.role).collect();
        let mut sorted = roles.clone();
        sorted.sort_by_key(|r| match r {
            StageRole::Encode => 0,
            StageRole::Prefill => 1,
            _ => 2,
        });
        assert_eq!(roles, sorted);
        assert_eq!(roles.len() as u32, c.gpus());
    }

    #[test]
    fn surrogate_interpolates_and_is_certain_at_data() {
        let m = Surrogate::new(vec![vec![0.0], vec![1.0]], &[1.0, 3.0]);
        assert_eq!(m.predict(&[0.0]), (1.0, 0.0));
        let (mu, sigma) = m.predict(&[0.5]);
        assert!((mu - 2.0).abs() < 1e-12);
        assert!(sigma > 0.0);
        let bad = Surrogate::new(vec![vec![0.0], vec![1.0]], &[f64::NEG_INFINITY, 2.0]);
        assert!(bad.ys[0] < 2.0 && bad.ys[0].is_finite());
    }

    #[test]
    fn best_prefers_earliest_tie_and_skips_infeasible() {
        let s = restricted_appendix_b4();
        let cs = s.sample_n(3, 4).unwrap();
        let ev = |i: usize, score: f64| Evaluation {
            candidate: cs[i],
            f: score,
            cost: 8.0,
            score,
            error: None,
        };
        let log = vec![ev(0, f64::NEG_INFINITY), ev(1, 2.0), ev(2, 2.0)];
        assert_eq!(best_of(&log).unwrap().candidate, cs[1]);
        assert!(matches!(best_of(&log[..1]), Err(Error::EmptyFeasibleSet)));
    }
}
