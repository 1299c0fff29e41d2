//! Mapping search.
//!
//! Trials are pure functions of (layer, mapping, config). Each strategy
//! decides the order of trials sequentially from its seeded PRNG and hands
//! batches to a worker pool; results come back in trial order, so the
//! number of workers never changes a result.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accelconfig::{validate_config, ControllerType, HardwareConfig, ValidatedConfig};
use crate::graph::{Layer, Model};
use crate::mapping::{
    count_space, enumerate_space, Mapping, MappingError, MappingFile, MappingSpace, SpacePolicy, Workload,
};
use crate::runner::{run_model, RunOptions};
use crate::simulator::{count_psums, simulate_flexible_conv, simulate_flexible_fc, SimError};
use crate::tensorops::{LayoutTag, Tensor, ValueMode};

/// Grid search refuses spaces larger than this.
pub const GRID_LIMIT: usize = 1_000_000;

const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Simulated clock cycles; every trial runs the simulator.
    Cycles,
    /// Partial-sum count; analytic.
    Psums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Random,
    Genetic,
}

macro_rules! parse_names {
    ($ty:ty, $what:literal, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    other => Err(format!(concat!("unknown ", $what, " '{}'"), other)),
                }
            }
        }
    };
}

parse_names!(Objective, "objective", "cycles" => Objective::Cycles, "psums" => Objective::Psums);
parse_names!(Strategy, "tuner", "grid" => Strategy::Grid, "random" => Strategy::Random,
    "ga" => Strategy::Genetic, "genetic" => Strategy::Genetic);

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cycles => "cycles",
            Objective::Psums => "psums",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerOptions {
    pub strategy: Strategy,
    /// Maximum trials. `None` leaves only the size of the space as a cap.
    pub budget: Option<usize>,
    /// Trials without improvement before halting. Grid search ignores it.
    pub early_stop: Option<usize>,
    pub seed: u64,
    pub population: usize,
    pub mutation_rate: f64,
    pub elite_fraction: f64,
    /// Concurrent trials.
    pub parallelism: usize,
    pub policy: SpacePolicy,
}

impl Default for TunerOptions {
    fn default() -> Self {
        TunerOptions {
            strategy: Strategy::Grid,
            budget: None,
            early_stop: None,
            seed: 0,
            population: 32,
            mutation_rate: 0.1,
            elite_fraction: 0.1,
            parallelism: 1,
            policy: SpacePolicy::Divisors,
        }
    }
}

impl TunerOptions {
    pub fn check(&self) -> Result<(), TuneError> {
        let bad = |s: &str| Err(TuneError::Options(s.to_string()));
        if self.budget == Some(0) {
            return bad("budget must be at least 1");
        }
        if self.early_stop == Some(0) {
            return bad("early_stop must be at least 1");
        }
        if !(self.mutation_rate > 0.0 && self.mutation_rate < 1.0) {
            return bad("mutation_rate must lie strictly between 0 and 1");
        }
        if !(0.0..1.0).contains(&self.elite_fraction) {
            return bad("elite_fraction must lie in [0, 1)");
        }
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid tuner options: {0}")]
    Options(String),
    #[error("mapping space is empty")]
    EmptySpace,
    #[error("mapping space has {size} points; grid search is limited to {limit}. Use --tuner random|ga or --policy divisors")]
    GridTooLarge { size: usize, limit: usize },
    #[error("mapping search needs a FLEX_LINEAR config, got {0}")]
    Controller(ControllerType),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("unknown sweep parameter '{0}'")]
    UnknownParam(String),
    #[error("{0}")]
    Run(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub mapping: Mapping,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TuneResult {
    pub best_mapping: Mapping,
    pub best_cost: u64,
    pub trials_evaluated: usize,
    /// Trials in evaluation order.
    pub history: Vec<Trial>,
    /// Early stopping halted the search.
    pub converged: bool,
}

/// Operands for cycle trials, generated once per layer.
pub struct TrialContext {
    workload: Workload,
    cfg: ValidatedConfig,
    objective: Objective,
    operands: Option<(Tensor, Tensor)>,
}

impl TrialContext {
    pub fn new(workload: Workload, cfg: &ValidatedConfig, objective: Objective, seed: u64) -> Result<Self, TuneError> {
        if cfg.controller() != ControllerType::FlexLinear {
            return Err(TuneError::Controller(cfg.controller()));
        }
        let operands = match objective {
            Objective::Psums => None,
            Objective::Cycles => {
                let gen = |dims: Vec<usize>, tag, s| Tensor::random(dims, tag, s, ValueMode::Integer, (-1, 1));
                let pair = match &workload {
                    Workload::Conv(p) => (
                        gen(vec![1, p.h, p.w, p.c], LayoutTag::Nhwc, seed),
                        gen(vec![p.r, p.s, p.c_per_group(), p.k], LayoutTag::Rsck, seed ^ 0x5eed),
                    ),
                    Workload::Fc(fc) => (
                        gen(vec![1, fc.in_features], LayoutTag::Matrix, seed),
                        gen(vec![fc.in_features, fc.out_features], LayoutTag::Matrix, seed ^ 0x5eed),
                    ),
                };
                Some((pair.0.map_err(SimError::from)?, pair.1.map_err(SimError::from)?))
            }
        };
        Ok(TrialContext {
            workload,
            cfg: cfg.clone(),
            objective,
            operands,
        })
    }

    pub fn cost(&self, m: &Mapping) -> Result<u64, TuneError> {
        match (&self.operands, &self.workload, m) {
            (None, _, _) => Ok(count_psums(&self.workload, m)?),
            (Some((x, w)), Workload::Conv(p), Mapping::Conv(cm)) => {
                Ok(simulate_flexible_conv(x, w, p, cm, &self.cfg)?.cycles)
            }
            (Some((x, w)), Workload::Fc(fc), Mapping::Fc(fm)) => {
                Ok(simulate_flexible_fc(x, w, fc, fm, &self.cfg)?.cycles)
            }
            _ => Err(count_psums(&self.workload, m).unwrap_err().into()),
        }
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }
}

/// Cost of one mapping: simulated cycles or the psum count.
pub fn trial_cost(
    workload: &Workload,
    m: &Mapping,
    cfg: &ValidatedConfig,
    objective: Objective,
) -> Result<u64, TuneError> {
    TrialContext::new(*workload, cfg, objective, 0)?.cost(m)
}

/// Runs batches of trials on a fixed number of workers.
struct Evaluator {
    pool: Option<rayon::ThreadPool>,
}

impl Evaluator {
    fn new(parallelism: usize) -> Self {
        let pool = (parallelism > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .build()
                .expect("thread pool")
        });
        Evaluator { pool }
    }

    fn eval(&self, ctx: &TrialContext, space: &MappingSpace, idx: &[usize]) -> Result<Vec<u64>, TuneError> {
        let one = |&i: &usize| ctx.cost(&space.points()[i]);
        match &self.pool {
            None => idx.iter().map(one).collect(),
            Some(pool) => pool.install(|| idx.par_iter().map(one).collect()),
        }
    }
}

/// Bookkeeping shared by all strategies: best so far, stagnation, budget.
struct Search<'a> {
    space: &'a MappingSpace,
    history: Vec<(usize, u64)>,
    best: Option<(u64, usize)>,
    since_improvement: usize,
    budget: usize,
    early_stop: Option<usize>,
    converged: bool,
}

impl<'a> Search<'a> {
    fn new(space: &'a MappingSpace, opts: &TunerOptions) -> Self {
        Search {
            space,
            history: Vec::new(),
            best: None,
            since_improvement: 0,
            budget: opts.budget.unwrap_or(usize::MAX).min(space.len()),
            early_stop: opts.early_stop,
            converged: false,
        }
    }

    fn remaining(&self) -> usize {
        if self.converged {
            0
        } else {
            self.budget - self.history.len()
        }
    }

    /// Records trials in order; stops early once the stagnation limit is hit.
    fn record(&mut self, idx: &[usize], costs: &[u64]) {
        for (&i, &c) in idx.iter().zip(costs) {
            if self.remaining() == 0 {
                return;
            }
            self.history.push((i, c));
            // points are sorted, so the smaller index is the smaller tile vector
            match self.best {
                Some((bc, bi)) if c > bc || (c == bc && i > bi) => {}
                Some((bc, _)) if c == bc => self.best = Some((c, i)),
                _ => {
                    self.best = Some((c, i));
                    self.since_improvement = 0;
                    continue;
                }
            }
            self.since_improvement += 1;
            if let Some(limit) = self.early_stop {
                if self.since_improvement >= limit && self.history.len() < self.budget {
                    self.converged = true;
                }
            }
        }
    }

    fn finish(self) -> TuneResult {
        let (best_cost, best) = self.best.expect("at least one trial");
        TuneResult {
            best_mapping: self.space.points()[best],
            best_cost,
            trials_evaluated: self.history.len(),
            history: self
                .history
                .iter()
                .map(|&(i, cost)| Trial {
                    mapping: self.space.points()[i],
                    cost,
                })
                .collect(),
            converged: self.converged,
        }
    }
}

/// Searches one layer's mapping space.
pub fn tune_layer(
    layer: &Layer,
    cfg: &ValidatedConfig,
    objective: Objective,
    opts: &TunerOptions,
) -> Result<TuneResult, TuneError> {
    tune_workload(&Workload::from_layer(layer)?, cfg, objective, opts)
}

pub fn tune_workload(
    workload: &Workload,
    cfg: &ValidatedConfig,
    objective: Objective,
    opts: &TunerOptions,
) -> Result<TuneResult, TuneError> {
    opts.check()?;
    let ctx = TrialContext::new(*workload, cfg, objective, opts.seed)?;
    if opts.strategy == Strategy::Grid {
        let size = count_space(workload, cfg, opts.policy, GRID_LIMIT);
        if size > GRID_LIMIT {
            return Err(TuneError::GridTooLarge {
                size,
                limit: GRID_LIMIT,
            });
        }
    }
    let space = enumerate_space(workload, cfg, opts.policy)?;
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    let eval = Evaluator::new(opts.parallelism);
    tune_in_space(&ctx, &space, opts, &eval)
}

fn tune_in_space(
    ctx: &TrialContext,
    space: &MappingSpace,
    opts: &TunerOptions,
    eval: &Evaluator,
) -> Result<TuneResult, TuneError> {
    let mut search = Search::new(space, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    match opts.strategy {
        Strategy::Grid => {
            search.early_stop = None;
            let order: Vec<usize> = (0..search.budget).collect();
            run_order(&mut search, ctx, space, eval, &order)?;
        }
        Strategy::Random => {
            let order = sample(&mut rng, space.len(), search.budget).into_vec();
            run_order(&mut search, ctx, space, eval, &order)?;
        }
        Strategy::Genetic => genetic(&mut search, ctx, space, eval, opts, &mut rng)?,
    }
    Ok(search.finish())
}

fn run_order(
    search: &mut Search,
    ctx: &TrialContext,
    space: &MappingSpace,
    eval: &Evaluator,
    order: &[usize],
) -> Result<(), TuneError> {
    for chunk in order.chunks(BATCH) {
        if search.remaining() == 0 {
            break;
        }
        let costs = eval.eval(ctx, space, chunk)?;
        search.record(chunk, &costs);
    }
    Ok(())
}

/// Tournament selection of size two, uniform crossover, per-tile mutation
/// and elitism. A child that was already evaluated, or that falls outside
/// the space, is replaced by a random unvisited point, so every trial is a
/// distinct mapping.
fn genetic(
    search: &mut Search,
    ctx: &TrialContext,
    space: &MappingSpace,
    eval: &Evaluator,
    opts: &TunerOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(), TuneError> {
    let n = space.len();
    let pop_size = opts.population.min(n);
    let mut seen: HashSet<usize> = HashSet::new();
    let unvisited_pick = |rng: &mut ChaCha8Rng, seen: &mut HashSet<usize>| -> Option<usize> {
        if seen.len() >= n {
            return None;
        }
        // rejection sampling while the space is sparsely visited, else scan
        for _ in 0..32 {
            let i = rng.gen_range(0..n);
            if seen.insert(i) {
                return Some(i);
            }
        }
        let free: Vec<usize> = (0..n).filter(|i| !seen.contains(i)).collect();
        let i = free[rng.gen_range(0..free.len())];
        seen.insert(i);
        Some(i)
    };

    let init = sample(rng, n, pop_size.min(search.remaining())).into_vec();
    seen.extend(init.iter().copied());
    let costs = eval.eval(ctx, space, &init)?;
    search.record(&init, &costs);
    let mut population: Vec<(u64, usize)> = costs.into_iter().zip(init).collect();

    let elites = ((opts.elite_fraction * pop_size as f64).ceil() as usize).clamp(1, pop_size);
    while search.remaining() > 0 && seen.len() < n {
        population.sort_unstable();
        let mut next: Vec<(u64, usize)> = population[..elites.min(population.len())].to_vec();
        let want = (pop_size - next.len()).min(search.remaining());
        let mut children = Vec::with_capacity(want);
        for _ in 0..want {
            let a = tournament(&population, rng);
            let b = tournament(&population, rng);
            let (ta, tb) = (space.points()[a].tiles(), space.points()[b].tiles());
            let mut tiles: Vec<usize> = ta
                .iter()
                .zip(&tb)
                .map(|(&x, &y)| if rng.gen_bool(0.5) { x } else { y })
                .collect();
            for (t, cands) in tiles.iter_mut().zip(&space.candidates) {
                if cands.len() > 1 && rng.gen_bool(opts.mutation_rate) {
                    *t = cands[rng.gen_range(0..cands.len())];
                }
            }
            let child = space
                .index_of(&space.workload.mapping_from_tiles(&tiles))
                .filter(|i| seen.insert(*i))
                .or_else(|| unvisited_pick(rng, &mut seen));
            match child {
                Some(i) => children.push(i),
                None => break,
            }
        }
        if children.is_empty() {
            break;
        }
        let costs = eval.eval(ctx, space, &children)?;
        search.record(&children, &costs);
        next.extend(costs.into_iter().zip(children));
        population = next;
    }
    Ok(())
}

fn tournament(pop: &[(u64, usize)], rng: &mut ChaCha8Rng) -> usize {
    let a = pop[rng.gen_range(0..pop.len())];
    let b = pop[rng.gen_range(0..pop.len())];
    a.min(b).1
}

/// Per-layer outcome of [`tune_model`], in model order.
#[derive(Debug)]
pub struct ModelTuning {
    pub results: Vec<(String, TuneResult)>,
    pub errors: Vec<(String, TuneError)>,
}

impl ModelTuning {
    pub fn mapping_file(&self) -> MappingFile {
        let mut file = MappingFile::default();
        for (id, r) in &self.results {
            file.insert(id, &r.best_mapping);
        }
        file
    }

    pub fn get(&self, id: &str) -> Option<&TuneResult> {
        self.results.iter().find(|(l, _)| l == id).map(|(_, r)| r)
    }
}

/// Tunes every conv2d and dense layer independently. Layer `i` uses seed
/// `opts.seed + i`. A failing layer does not stop the others.
pub fn tune_model(
    model: &Model,
    cfg: &ValidatedConfig,
    objective: Objective,
    opts: &TunerOptions,
) -> Result<ModelTuning, TuneError> {
    opts.check()?;
    let mut out = ModelTuning {
        results: Vec::new(),
        errors: Vec::new(),
    };
    for (i, layer) in model.layers.iter().enumerate() {
        if !layer.op.is_offloadable() {
            continue;
        }
        let layer_opts = TunerOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..opts.clone()
        };
        match tune_layer(layer, cfg, objective, &layer_opts) {
            Ok(r) => out.results.push((layer.id.clone(), r)),
            Err(e) => out.errors.push((layer.id.clone(), e)),
        }
    }
    Ok(out)
}

/// `trial_index,layer_id,tiles,cost,best_so_far`, one row per trial.
pub fn history_csv(tuning: &ModelTuning) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial_index", "layer_id", "tiles", "cost", "best_so_far"])
        .unwrap();
    for (id, r) in &tuning.results {
        let mut best = u64::MAX;
        for (i, t) in r.history.iter().enumerate() {
            best = best.min(t.cost);
            w.write_record([
                i.to_string(),
                id.clone(),
                t.mapping.to_string(),
                t.cost.to_string(),
                best.to_string(),
            ])
            .unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub const SWEEP_PARAMS: [&str; 7] = [
    "ms_size",
    "ms_rows",
    "ms_cols",
    "dn_bw",
    "rn_bw",
    "sparsity_ratio",
    "accumulation_buffer",
];

/// Copy of `base` with one parameter replaced. `accumulation_buffer` takes
/// 0 or 1.
pub fn substitute_param(base: &HardwareConfig, param: &str, value: u32) -> Result<HardwareConfig, TuneError> {
    let mut cfg = base.clone();
    match param {
        "ms_size" => cfg.ms_size = Some(value),
        "ms_rows" => cfg.ms_rows = Some(value),
        "ms_cols" => cfg.ms_cols = Some(value),
        "dn_bw" => cfg.dn_bw = value,
        "rn_bw" => cfg.rn_bw = value,
        "sparsity_ratio" => cfg.sparsity_ratio = value,
        "accumulation_buffer" => match value {
            0 | 1 => cfg.accumulation_buffer = value == 1,
            _ => return Err(TuneError::Options("accumulation_buffer takes 0 or 1".into())),
        },
        other => return Err(TuneError::UnknownParam(other.to_string())),
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: u32,
    /// Best total cost over the offloaded layers, or why the row failed.
    pub outcome: Result<u64, String>,
    /// Per-layer tuning, when the row was tuned.
    pub layers: Vec<(String, TuneResult)>,
}

/// Evaluates a model under each value of one hardware parameter. FLEX_LINEAR
/// rows are tuned layer by layer unless `mappings` fixes the mappings; other
/// controllers have no mapping space and are simulated directly.
pub fn sweep_hardware(
    model: &Model,
    base: &HardwareConfig,
    param: &str,
    values: &[u32],
    objective: Objective,
    opts: &TunerOptions,
    mappings: Option<&MappingFile>,
) -> Result<Vec<SweepRow>, TuneError> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(TuneError::UnknownParam(param.to_string()));
    }
    opts.check()?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let row = |outcome, layers| SweepRow { value, outcome, layers };
        let cfg = match substitute_param(base, param, value).map(|c| validate_config(&c)) {
            Err(e) => {
                rows.push(row(Err(e.to_string()), Vec::new()));
                continue;
            }
            Ok(Err(e)) => {
                rows.push(row(Err(e.to_string()), Vec::new()));
                continue;
            }
            Ok(Ok(cfg)) => cfg,
        };
        if cfg.controller() == ControllerType::FlexLinear && mappings.is_none() {
            let tuning = tune_model(model, &cfg, objective, opts)?;
            if let Some((id, e)) = tuning.errors.first() {
                rows.push(row(Err(format!("layer '{id}': {e}")), Vec::new()));
            } else {
                let total = tuning.results.iter().map(|(_, r)| r.best_cost).sum();
                rows.push(row(Ok(total), tuning.results));
            }
        } else {
            let run_opts = RunOptions {
                seed: None,
                retain_outputs: false,
                ..RunOptions::default()
            };
            let outcome = run_model(model, &cfg, mappings, None, &run_opts)
                .map(|r| match objective {
                    Objective::Cycles => r.totals.cycles,
                    Objective::Psums => r.totals.psums,
                })
                .map_err(|e| e.to_string());
            rows.push(row(outcome, Vec::new()));
        }
    }
    Ok(rows)
}

/// `value,status,best_cost`; failed rows carry the reason in `status`.
pub fn sweep_csv(param: &str, objective: Objective, rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([param, "status", &format!("best_{objective}")]).unwrap();
    for r in rows {
        let (status, cost) = match &r.outcome {
            Ok(c) => ("ok".to_string(), c.to_string()),
            Err(e) => (format!("invalid: {e}"), String::new()),
        };
        w.write_record([r.value.to_string(), status, cost]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
