//! Simulated multi-device timing.
//!
//! One kernel of workload `w` over `s` tokens on `tp` devices costs
//! `c_fixed + c_mem·w/tp + c_comp·(w/tp)·s`, plus `t_addi` for the
//! synchronization when `tp > 1`. The memory term dominates by default, so
//! extra tokens are almost free while splitting a small kernel across
//! devices costs more than it saves. Units are abstract; the defaults are
//! illustrative, not measured.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::LayerPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub c_fixed: f64,
    pub c_mem: f64,
    pub c_comp: f64,
    pub t_addi: f64,
    pub attn_workload: f64,
    pub mlp_workload: f64,
    pub base_layer_workload: f64,
    pub tp_size_base: usize,
    pub tp_size_draft: usize,
    pub devices: usize,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            c_fixed: 40.0,
            c_mem: 1.0,
            c_comp: 0.01,
            t_addi: 45.0,
            attn_workload: 40.0,
            mlp_workload: 20.0,
            base_layer_workload: 2000.0,
            tp_size_base: 8,
            tp_size_draft: 1,
            devices: 8,
        }
    }
}

/// Duration of one forward and how long each device was busy during it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCost {
    pub duration: f64,
    pub busy: Vec<(usize, f64)>,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.c_fixed,
            self.c_mem,
            self.c_comp,
            self.t_addi,
            self.attn_workload,
            self.mlp_workload,
            self.base_layer_workload,
        ];
        if scalars.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("cost parameters must be finite and non-negative".into()));
        }
        if self.tp_size_base == 0 || self.tp_size_draft == 0 || self.devices == 0 {
            return Err(Error::Config("tp sizes and device count must be positive".into()));
        }
        for tp in [self.tp_size_base, self.tp_size_draft] {
            if tp > self.devices {
                return Err(Error::Capacity { needed: tp, available: self.devices });
            }
        }
        Ok(())
    }

    /// Execution time of one kernel.
    pub fn t_exe(&self, w: f64, s: f64, tp: usize) -> f64 {
        let share = w / tp as f64;
        let sync = if tp > 1 { self.t_addi } else { 0.0 };
        self.c_fixed + self.c_mem * share + self.c_comp * share * s + sync
    }

    /// TP size in `1..=devices` with the lowest single-token latency.
    pub fn optimal_tp(&self, w: f64) -> usize {
        (1..=self.devices)
            .min_by(|&a, &b| self.t_exe(w, 1.0, a).total_cmp(&self.t_exe(w, 1.0, b)))
            .unwrap_or(1)
    }

    /// Attention time of a layer-parallel group of `g` layers, one per device.
    pub fn group_attention_time(&self, g: usize, s: f64) -> f64 {
        let sync = if g > 1 { self.t_addi } else { 0.0 };
        self.t_exe(self.attn_workload, s, 1) + sync
    }

    /// The same `g` attention layers run one after another.
    pub fn sequential_attention_time(&self, g: usize, s: f64) -> f64 {
        g as f64 * self.t_exe(self.attn_workload, s, 1)
    }

    /// Layer-sequential drafter forward at the drafter's TP size.
    pub fn draft_sequential(&self, n_layers: usize, s: f64) -> SimCost {
        let tp = self.tp_size_draft;
        let mut duration = 0.0;
        for _ in 0..n_layers {
            duration += self.t_exe(self.attn_workload, s, tp) + self.t_exe(self.mlp_workload, s, tp);
        }
        SimCost { duration, busy: (0..tp).map(|d| (d, duration)).collect() }
    }

    /// Layer-parallel drafter forward: each group's attentions run
    /// concurrently on separate devices, then its MLPs run one by one.
    pub fn draft_fuzzy(&self, plan: &LayerPlan, s: f64) -> Result<SimCost> {
        if plan.lp_size() > self.devices {
            return Err(Error::Capacity { needed: plan.lp_size(), available: self.devices });
        }
        let mut busy = vec![0.0; plan.lp_size()];
        let mut duration = 0.0;
        let attn = self.t_exe(self.attn_workload, s, 1);
        let mlp = self.t_exe(self.mlp_workload, s, 1);
        for g in plan.groups() {
            for b in busy.iter_mut().take(g.len()) {
                *b += attn;
            }
            busy[0] += g.len() as f64 * mlp;
            duration += self.group_attention_time(g.len(), s) + g.len() as f64 * mlp;
        }
        Ok(SimCost { duration, busy: busy.into_iter().enumerate().collect() })
    }

    /// Simulated time of one layer-parallel drafter forward.
    pub fn simulate_draft_group(&self, plan: &LayerPlan, s: f64) -> Result<f64> {
        Ok(self.draft_fuzzy(plan, s)?.duration)
    }

    /// Base-model forward at the base TP size.
    pub fn base_forward(&self, n_layers: usize, s: f64) -> SimCost {
        let tp = self.tp_size_base;
        let duration = n_layers as f64 * self.t_exe(self.base_layer_workload, s, tp);
        SimCost { duration, busy: (0..tp).map(|d| (d, duration)).collect() }
    }
}

/// `n_tokens·t_draft + n_tokens/(n·α)·t_base`.
pub fn total_time_model(n_tokens: f64, t_draft: f64, t_base: f64, n: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::UndefinedThroughput);
    }
    if alpha > 1.0 || n == 0 {
        return Err(Error::Config(format!("alpha {alpha} must be in (0, 1] and n {n} positive")));
    }
    Ok(n_tokens * t_draft + n_tokens / (n as f64 * alpha) * t_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Draft,
    Verify,
    Calibrate,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Draft, Stage::Verify, Stage::Calibrate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Draft => "draft",
            Stage::Verify => "verify",
            Stage::Calibrate => "calibrate",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Accumulated simulated time per stage and per device.
#[derive(Debug, Clone, PartialEq)]
pub struct SimClock {
    stages: [f64; 3],
    busy: Vec<[f64; 3]>,
}

impl SimClock {
    pub fn new(devices: usize) -> Self {
        Self { stages: [0.0; 3], busy: vec![[0.0; 3]; devices] }
    }

    pub fn advance(&mut self, stage: Stage, cost: &SimCost) {
        self.stages[stage.index()] += cost.duration;
        for &(d, b) in &cost.busy {
            self.busy[d][stage.index()] += b;
        }
    }

    pub fn stage(&self, stage: Stage) -> f64 {
        self.stages[stage.index()]
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().sum()
    }

    pub fn devices(&self) -> usize {
        self.busy.len()
    }

    pub fn busy(&self, device: usize, stage: Stage) -> f64 {
        self.busy[device][stage.index()]
    }

    /// Devices with non-zero busy time in `stage`.
    pub fn active_devices(&self, stage: Stage) -> usize {
        self.busy.iter().filter(|b| b[stage.index()] > 0.0).count()
    }

    /// `device,stage,busy_units,total_units` rows.
    pub fn occupancy_csv(&self) -> String {
        let mut out = String::from("device,stage,busy_units,total_units\n");
        for d in 0..self.busy.len() {
            for s in Stage::ALL {
                out.push_str(&format!("{d},{},{},{}\n", s.name(), self.busy(d, s), self.stage(s)));
            }
        }
        out
    }
}

/// Expected cost of one speculative iteration, without tensor math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lp_size: usize,
    pub width: usize,
    pub alpha: f64,
    pub draft_units: f64,
    pub verify_units: f64,
    pub calibrate_units: f64,
    pub tokens_per_iteration: f64,
    /// Tokens per 1000 simulated units.
    pub throughput: f64,
    pub speedup_vs_vanilla: f64,
}

/// One iteration with bonus calibration: a sequential drafter pass over the
/// `n·α + 1` accepted-plus-bonus tokens, `n - 1` layer-parallel passes over
/// `width` tokens each, and one base pass over `n·width + 1` tokens.
pub fn simulate_iteration(
    params: &CostParams,
    plan: &LayerPlan,
    base_layers: usize,
    n: usize,
    width: usize,
    alpha: f64,
) -> Result<SweepPoint> {
    if !(0.0..=1.0).contains(&alpha) || n == 0 || width == 0 {
        return Err(Error::Config(format!("alpha {alpha}, n {n} and width {width} out of range")));
    }
    let accepted = n as f64 * alpha;
    let calibrate_units = params.draft_sequential(plan.n_layers(), accepted + 1.0).duration;
    let draft_units = (n - 1) as f64 * params.simulate_draft_group(plan, width as f64)?;
    let verify_units = params.base_forward(base_layers, (n * width) as f64 + 1.0).duration;
    let total = calibrate_units + draft_units + verify_units;
    let tokens = accepted + 1.0;
    let vanilla = params.base_forward(base_layers, 1.0).duration;
    Ok(SweepPoint {
        lp_size: plan.lp_size(),
        width,
        alpha,
        draft_units,
        verify_units,
        calibrate_units,
        tokens_per_iteration: tokens,
        throughput: 1000.0 * tokens / total,
        speedup_vs_vanilla: tokens * vanilla / total,
    })
}

/// Sweep over layer-parallel sizes and widths with the default plan rule.
/// `alpha(lp_size, width)` supplies the acceptance rate of each point.
pub fn ablation_grid(
    params: &CostParams,
    draft_layers: usize,
    base_layers: usize,
    n: usize,
    lp_sizes: &[usize],
    widths: &[usize],
    alpha: &dyn Fn(usize, usize) -> f64,
) -> Result<Vec<SweepPoint>> {
    let mut points = Vec::with_capacity(lp_sizes.len() * widths.len());
    for &width in widths {
        for &lp in lp_sizes {
            let plan = crate::plan::plan_groups(draft_layers, lp)?;
            let mut point = simulate_iteration(params, &plan, base_layers, n, width, alpha(lp, width))?;
            // Report the requested size; the plan's largest group can be smaller.
            point.lp_size = lp;
            points.push(point);
        }
    }
    Ok(points)
}
