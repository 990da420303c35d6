//! Generation loop for vanilla decoding, chain and tree speculative
//! decoding, and layer-parallel speculation with bonus calibration.
//!
//! Both caches lag the committed sequence by a few *pending* tokens that
//! are fed at the start of the next forward: the base cache holds
//! everything but the last bonus token, the drafter cache whatever its
//! commit policy kept. The first iteration feeds the whole prompt.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use crate::draft::ChildSelection;
use crate::cost::{CostParams, SimClock, SimCost, Stage};
use crate::draft::{draft_tree, forward_fuzzy, forward_sequential, DraftMode, WorkerPool};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::model::WeightStore;
use crate::plan::{parse_plan_override, plan_groups, LayerPlan};
use crate::report::{aggregate, RunMeta, RunReport};
use crate::rng::{SeededRng, UniformSource};
use crate::tensor::{softmax_temp, ProbVector};
use crate::verify::verify_tree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Vanilla,
    Sd,
    SdTree,
    Easyspec,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Vanilla, Algorithm::Sd, Algorithm::SdTree, Algorithm::Easyspec];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Vanilla => "vanilla",
            Algorithm::Sd => "sd",
            Algorithm::SdTree => "sd_tree",
            Algorithm::Easyspec => "easyspec",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Speculation length (tree depth).
    pub n: usize,
    /// Branching factor per depth; empty means a chain.
    pub widths: Vec<usize>,
    /// Layer-parallel size for the default plan.
    pub lp_size: usize,
    /// Explicit plan such as `0|1-3|4-6|7`; overrides `lp_size`.
    pub plan: Option<String>,
    pub temperature: f32,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Bonus calibration (layer-parallel speculation only).
    pub calibration: bool,
    pub child_selection: ChildSelection,
    /// Attention workers; defaults to the largest group size.
    pub workers: Option<usize>,
    pub cost: CostParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Easyspec,
            n: 5,
            widths: Vec::new(),
            lp_size: 2,
            plan: None,
            temperature: 0.8,
            max_new_tokens: 32,
            seed: 0,
            calibration: true,
            child_selection: ChildSelection::Auto,
            workers: None,
            cost: CostParams::default(),
        }
    }
}

impl RunConfig {
    /// Widths actually used: a chain for `sd`, `[1; n]` when unset.
    pub fn effective_widths(&self) -> Result<Vec<usize>> {
        if self.n == 0 {
            return Err(Error::Config("speculation length must be positive".into()));
        }
        let widths = if self.widths.is_empty() { vec![1; self.n] } else { self.widths.clone() };
        if widths.len() != self.n {
            return Err(Error::Config(format!("{} widths for speculation length {}", widths.len(), self.n)));
        }
        if widths.contains(&0) {
            return Err(Error::Config("tree widths must be positive".into()));
        }
        if self.algorithm == Algorithm::Sd && widths.iter().any(|&w| w != 1) {
            return Err(Error::Config("sd drafts a chain; use sd_tree for wider trees".into()));
        }
        Ok(widths)
    }

    /// Drafter layer plan.
    pub fn layer_plan(&self, draft_layers: usize) -> Result<LayerPlan> {
        let plan = match &self.plan {
            Some(p) => parse_plan_override(p)?,
            None => plan_groups(draft_layers, self.lp_size)?,
        };
        plan.check_layers(draft_layers)?;
        Ok(plan)
    }
}

/// Work done by one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// Accepted draft tokens.
    pub m: usize,
    /// Speculation depth (0 for vanilla).
    pub n: usize,
    /// Drafted tree nodes.
    pub n_drafted: usize,
    /// Tokens appended to the output (accepted plus bonus, capped).
    pub emitted: usize,
    pub draft_wall: f64,
    pub verify_wall: f64,
    pub calibrate_wall: f64,
    pub draft_sim: f64,
    pub verify_sim: f64,
    pub calibrate_sim: f64,
    pub fuzzy_forwards: usize,
    pub sequential_forwards: usize,
    pub base_forwards: usize,
}

impl IterationTrace {
    fn charge(&mut self, stage: Stage, wall: f64, cost: &SimCost, clock: &mut SimClock) {
        let (w, s) = match stage {
            Stage::Draft => (&mut self.draft_wall, &mut self.draft_sim),
            Stage::Verify => (&mut self.verify_wall, &mut self.verify_sim),
            Stage::Calibrate => (&mut self.calibrate_wall, &mut self.calibrate_sim),
        };
        *w += wall;
        *s += cost.duration;
        clock.advance(stage, cost);
    }

    pub fn total_sim(&self) -> f64 {
        self.draft_sim + self.verify_sim + self.calibrate_sim
    }
}

/// Mutable state of one generation.
#[derive(Debug, Clone)]
pub struct GenState {
    tokens: Vec<u32>,
    prompt_len: usize,
    base_cache: KvCache,
    base_pending: Vec<u32>,
    draft_cache: KvCache,
    draft_pending: Vec<u32>,
    rng: SeededRng,
    clock: SimClock,
}

impl GenState {
    /// Prompt plus everything emitted so far.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn draft_cache(&self) -> &KvCache {
        &self.draft_cache
    }

    pub fn base_cache(&self) -> &KvCache {
        &self.base_cache
    }

    /// Tokens not yet in the drafter cache.
    pub fn draft_pending(&self) -> &[u32] {
        &self.draft_pending
    }

    pub fn base_pending(&self) -> &[u32] {
        &self.base_pending
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }
}

/// Output of [`Engine::generate`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub report: RunReport,
    pub clock: SimClock,
}

pub struct Engine<'m> {
    base: &'m WeightStore,
    draft: &'m WeightStore,
    config: RunConfig,
    widths: Vec<usize>,
    plan: LayerPlan,
    pool: WorkerPool,
}

impl<'m> Engine<'m> {
    pub fn new(base: &'m WeightStore, draft: &'m WeightStore, config: RunConfig) -> Result<Self> {
        if base.config.vocab_size != draft.config.vocab_size {
            return Err(Error::Config("base and drafter vocabularies differ".into()));
        }
        if !(config.temperature >= 0.0 && config.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be >= 0", config.temperature)));
        }
        if config.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        config.cost.validate()?;
        let widths = config.effective_widths()?;
        if let Some(&w) = widths.iter().find(|&&w| w > draft.config.vocab_size) {
            return Err(Error::Config(format!("width {w} exceeds the vocabulary")));
        }
        let plan = if config.algorithm == Algorithm::Easyspec {
            let plan = config.layer_plan(draft.n_layers())?;
            if plan.lp_size() > config.cost.devices {
                return Err(Error::Capacity { needed: plan.lp_size(), available: config.cost.devices });
            }
            plan
        } else {
            plan_groups(draft.n_layers(), 1)?
        };
        let workers = config.workers.unwrap_or(plan.lp_size());
        let pool = WorkerPool::new(workers)?;
        Ok(Self { base, draft, config, widths, plan, pool })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn start(&self, prompt: &[u32]) -> Result<GenState> {
        if prompt.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        Ok(GenState {
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            base_cache: KvCache::new(self.base.n_layers(), self.base.config.d_model),
            base_pending: prompt.to_vec(),
            draft_cache: KvCache::new(self.draft.n_layers(), self.draft.config.d_model),
            draft_pending: prompt.to_vec(),
            rng: SeededRng::new(self.config.seed),
            clock: SimClock::new(self.config.cost.devices),
        })
    }

    /// Runs one iteration and appends its tokens (capped by the remaining
    /// budget) to the state.
    pub fn step(&self, state: &mut GenState) -> Result<IterationTrace> {
        let mut trace = match self.config.algorithm {
            Algorithm::Vanilla => self.step_vanilla(state)?,
            _ => self.step_speculative(state)?,
        };
        let budget = self.config.max_new_tokens.saturating_sub(state.generated().len() - trace.emitted);
        if trace.emitted > budget {
            state.tokens.truncate(state.tokens.len() - (trace.emitted - budget));
            trace.emitted = budget;
        }
        Ok(trace)
    }

    pub fn generate(&self, prompt: &[u32]) -> Result<Generation> {
        let mut state = self.start(prompt)?;
        let mut traces = Vec::new();
        while state.generated().len() < self.config.max_new_tokens {
            traces.push(self.step(&mut state)?);
        }
        let emitted: usize = traces.iter().map(|t| t.emitted).sum();
        let vanilla = emitted as f64 * self.config.cost.base_forward(self.base.n_layers(), 1.0).duration;
        let meta = RunMeta {
            algorithm: self.config.algorithm,
            n: if self.config.algorithm == Algorithm::Vanilla { 0 } else { self.config.n },
            widths: self.widths.clone(),
            lp_size: self.plan.lp_size(),
        };
        let report = aggregate(meta, traces, vanilla)?;
        Ok(Generation { tokens: state.generated().to_vec(), report, clock: state.clock })
    }

    fn sample(&self, dist: &ProbVector, rng: &mut SeededRng) -> u32 {
        if self.config.temperature == 0.0 {
            dist.argmax() as u32
        } else {
            dist.sample(rng.next_uniform()) as u32
        }
    }

    fn step_vanilla(&self, state: &mut GenState) -> Result<IterationTrace> {
        let mut trace = IterationTrace::default();
        let t0 = Instant::now();
        let pending = std::mem::take(&mut state.base_pending);
        let rows = state.base_cache.extend_committed(pending.len(), false)?;
        let mask = state.base_cache.build_tree_mask();
        let h = self.base.embed(&pending)?;
        let out = forward_sequential(self.base, &h, &mut state.base_cache, rows, &mask)?;
        let logits = self.base.lm_logits(&out.select_rows(&[out.rows() - 1]))?;
        let dist = softmax_temp(logits.row(0), self.config.temperature)?;
        let token = self.sample(&dist, &mut state.rng);
        trace.base_forwards = 1;
        trace.emitted = 1;
        let cost = self.config.cost.base_forward(self.base.n_layers(), pending.len() as f64);
        trace.charge(Stage::Verify, t0.elapsed().as_secs_f64(), &cost, &mut state.clock);
        state.tokens.push(token);
        state.base_pending = vec![token];
        Ok(trace)
    }

    fn step_speculative(&self, state: &mut GenState) -> Result<IterationTrace> {
        let cfg = &self.config;
        let easyspec = cfg.algorithm == Algorithm::Easyspec;
        let calibrate = easyspec && cfg.calibration;
        let mut trace = IterationTrace { n: cfg.n, ..Default::default() };

        // Frontier forward over the drafter's pending tokens. With
        // calibration this is the precise pass over accepted + bonus; without
        // it, layer-parallel speculation keeps running fuzzy once the prompt
        // has been prefilled.
        let t0 = Instant::now();
        let pending = std::mem::take(&mut state.draft_pending);
        let sequential = !easyspec || calibrate || state.draft_cache.is_empty();
        let rows = state.draft_cache.extend_committed(pending.len(), !sequential)?;
        let mask = state.draft_cache.build_tree_mask();
        let h = self.draft.embed(&pending)?;
        let s = pending.len() as f64;
        let (out, cost) = if sequential {
            trace.sequential_forwards += 1;
            let out = forward_sequential(self.draft, &h, &mut state.draft_cache, rows, &mask)?;
            (out, cfg.cost.draft_sequential(self.draft.n_layers(), s))
        } else {
            trace.fuzzy_forwards += 1;
            let out = forward_fuzzy(self.draft, &self.plan, &h, &mut state.draft_cache, rows, &mask, &self.pool, None)?;
            (out, cfg.cost.draft_fuzzy(&self.plan, s)?)
        };
        let logits = self.draft.lm_logits(&out.select_rows(&[out.rows() - 1]))?;
        let root_dist = softmax_temp(logits.row(0), cfg.temperature)?;
        let stage = if calibrate { Stage::Calibrate } else { Stage::Draft };
        trace.charge(stage, t0.elapsed().as_secs_f64(), &cost, &mut state.clock);

        // Remaining levels.
        let t0 = Instant::now();
        let mode = if easyspec { DraftMode::Fuzzy(&self.plan) } else { DraftMode::Sequential };
        let (tree, forwards) = draft_tree(
            self.draft,
            mode,
            &mut state.draft_cache,
            root_dist,
            &self.widths,
            cfg.temperature,
            cfg.child_selection,
            &mut state.rng,
            &self.pool,
        )?;
        let wall = t0.elapsed().as_secs_f64();
        let mut level_sizes = vec![0usize; tree.depth() + 1];
        for node in &tree.nodes {
            level_sizes[node.depth] += 1;
        }
        let mut draft_cost = SimCost { duration: 0.0, busy: Vec::new() };
        for &size in level_sizes.iter().skip(1).take(forwards) {
            let c = if easyspec {
                trace.fuzzy_forwards += 1;
                cfg.cost.draft_fuzzy(&self.plan, size as f64)?
            } else {
                trace.sequential_forwards += 1;
                cfg.cost.draft_sequential(self.draft.n_layers(), size as f64)
            };
            draft_cost.duration += c.duration;
            draft_cost.busy.extend(c.busy);
        }
        trace.charge(Stage::Draft, wall, &draft_cost, &mut state.clock);
        trace.n_drafted = tree.len();

        // Verification: one base forward over pending tokens and the tree.
        let t0 = Instant::now();
        let base_pending = std::mem::take(&mut state.base_pending);
        let pending_rows = state.base_cache.extend_committed(base_pending.len(), false)?;
        let mut base_rows: Vec<usize> = Vec::with_capacity(tree.len());
        let parents: Vec<Option<usize>> =
            tree.nodes.iter().map(|n| n.parent.map(|p| pending_rows.end + p)).collect();
        base_rows.extend(state.base_cache.stage_append(&parents, false)?);
        let mask = state.base_cache.build_tree_mask();
        let mut fed = base_pending.clone();
        fed.extend(tree.nodes.iter().map(|n| n.token));
        let h = self.base.embed(&fed)?;
        let all = pending_rows.start..state.base_cache.len();
        let out = forward_sequential(self.base, &h, &mut state.base_cache, all, &mask)?;
        let mut wanted = vec![base_pending.len() - 1];
        wanted.extend(base_pending.len()..fed.len());
        let logits = self.base.lm_logits(&out.select_rows(&wanted))?;
        let root_target = softmax_temp(logits.row(0), cfg.temperature)?;
        let node_targets =
            (1..logits.rows()).map(|r| softmax_temp(logits.row(r), cfg.temperature)).collect::<Result<Vec<_>>>()?;
        let outcome = verify_tree(&tree, &root_target, &node_targets, cfg.temperature == 0.0, &mut state.rng)?;
        trace.base_forwards += 1;
        trace.m = outcome.m;
        let cost = cfg.cost.base_forward(self.base.n_layers(), fed.len() as f64);

        // Commit.
        let path_rows: Vec<usize> = outcome.accepted_path.iter().map(|&i| base_rows[i]).collect();
        state.base_cache.commit_path(&path_rows)?;
        state.base_pending = vec![outcome.bonus_token];
        trace.charge(Stage::Verify, t0.elapsed().as_secs_f64(), &cost, &mut state.clock);

        let mut next_pending;
        if calibrate {
            // Every fuzzy row goes; accepted + bonus are recomputed precisely
            // at the start of the next iteration.
            state.draft_cache.discard_staged();
            next_pending = outcome.accepted_tokens.clone();
        } else {
            let kept: Vec<usize> =
                outcome.accepted_path.iter().map_while(|&i| tree.nodes[i].draft_row).collect();
            state.draft_cache.commit_path(&kept)?;
            next_pending = outcome.accepted_tokens[kept.len()..].to_vec();
        }
        next_pending.push(outcome.bonus_token);
        state.draft_pending = next_pending;

        state.tokens.extend(&outcome.accepted_tokens);
        state.tokens.push(outcome.bonus_token);
        trace.emitted = outcome.m + 1;
        Ok(trace)
    }
}
