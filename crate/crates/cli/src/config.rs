//! JSON configuration file and flag merging.
//!
//! ```json
//! {
//!   "run": { "algorithm": "easyspec", "n": 5, "lp_size": 4, "cost": { "t_addi": 45.0 } },
//!   "model": { "init_seed": 7, "base_layers": 12, "keep_layers": 8 },
//!   "bench": { "algorithms": ["sd", "easyspec"], "prompts": 16 }
//! }
//! ```
//!
//! Every section and field is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use easyspec_core::{Algorithm, RunConfig};
use serde::{Deserialize, Serialize};

use crate::cli::{ModelArgs, RunArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub run: RunConfig,
    pub model: ModelSpec,
    pub bench: BenchSpec,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self { run: RunConfig::default(), model: ModelSpec::default(), bench: BenchSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub base: Option<PathBuf>,
    pub draft: Option<PathBuf>,
    pub init_seed: u64,
    pub base_layers: usize,
    pub keep_layers: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { base: None, draft: None, init_seed: 7, base_layers: 12, keep_layers: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub algorithms: Vec<Algorithm>,
    pub prompts: usize,
    pub prompt_bytes: usize,
    pub corpus_seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { algorithms: Algorithm::ALL.to_vec(), prompts: 64, prompt_bytes: 24, corpus_seed: 2 }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl FileConfig {
    pub fn apply_globals(&mut self, seed: Option<u64>, workers: Option<usize>) {
        if let Some(s) = seed {
            self.run.seed = s;
        }
        if workers.is_some() {
            self.run.workers = workers;
        }
    }

    pub fn apply_run(&mut self, args: &RunArgs) {
        let run = &mut self.run;
        if let Some(n) = args.n {
            run.n = n;
        }
        if let Some(lp) = args.lp {
            run.lp_size = lp;
            run.plan = None;
        }
        if let Some(plan) = &args.plan {
            run.plan = Some(plan.clone());
        }
        if let Some(w) = &args.widths {
            run.widths = w.clone();
            if args.n.is_none() {
                run.n = w.len();
            }
        }
        if let Some(t) = args.temperature {
            run.temperature = t;
        }
        if let Some(m) = args.max_new_tokens {
            run.max_new_tokens = m;
        }
        if args.no_calibration {
            run.calibration = false;
        }
    }

    pub fn apply_model(&mut self, args: &ModelArgs) {
        let m = &mut self.model;
        if args.base.is_some() {
            m.base = args.base.clone();
            m.draft = args.draft.clone();
        }
        if let Some(s) = args.init_seed {
            m.init_seed = s;
            m.base = None;
            m.draft = None;
        }
        if let Some(l) = args.base_layers {
            m.base_layers = l;
        }
        if let Some(k) = args.keep_layers {
            m.keep_layers = k;
        }
    }
}

/// Parses `1..5` (inclusive) or `1,2,4`.
pub fn parse_sizes(spec: &str) -> anyhow::Result<Vec<usize>> {
    let sizes: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim_start_matches('=').trim().parse()?);
        (a..=b).collect()
    } else {
        spec.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?
    };
    if sizes.is_empty() || sizes.contains(&0) {
        bail!("sizes {spec:?} must be non-empty and positive");
    }
    Ok(sizes)
}

/// Reads `lp_size,alpha` rows; a header line is allowed.
pub fn parse_alpha_csv(text: &str) -> anyhow::Result<Vec<(usize, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with(|c: char| c.is_alphabetic())) {
            continue;
        }
        let (lp, alpha) = line.split_once(',').with_context(|| format!("line {}: expected lp_size,alpha", i + 1))?;
        let lp: usize = lp.trim().parse().with_context(|| format!("line {}", i + 1))?;
        let alpha: f64 = alpha.trim().parse().with_context(|| format!("line {}", i + 1))?;
        if !(0.0..=1.0).contains(&alpha) {
            bail!("line {}: alpha {alpha} outside [0, 1]", i + 1);
        }
        rows.push((lp, alpha));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_sizes("1..5").unwrap(), [1, 2, 3, 4, 5]);
        assert_eq!(parse_sizes("1..=3").unwrap(), [1, 2, 3]);
        assert_eq!(parse_sizes("2, 4").unwrap(), [2, 4]);
        assert!(parse_sizes("0..2").is_err());
        assert!(parse_sizes("x").is_err());
    }

    #[test]
    fn alpha_csv() {
        assert_eq!(parse_alpha_csv("lp_size,alpha\n1,0.5\n2, 0.25\n").unwrap(), [(1, 0.5), (2, 0.25)]);
        assert!(parse_alpha_csv("1,1.5").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"run": {"nn": 3}}"#).is_err());
        assert!(serde_json::from_str::<FileConfig>(r#"{"extra": 1}"#).is_err());
        let c: FileConfig = serde_json::from_str(r#"{"run": {"n": 3, "cost": {"t_addi": 1.0}}}"#).unwrap();
        assert_eq!(c.run.n, 3);
        assert_eq!(c.run.cost.t_addi, 1.0);
    }

    #[test]
    fn flags_override_file() {
        let mut c: FileConfig = serde_json::from_str(r#"{"run": {"n": 3, "lp_size": 3, "plan": "0|1-2|3"}}"#).unwrap();
        c.apply_run(&RunArgs { lp: Some(2), widths: Some(vec![2, 1]), ..Default::default() });
        assert_eq!((c.run.n, c.run.lp_size, c.run.plan.clone()), (2, 2, None));
        c.apply_globals(Some(9), None);
        assert_eq!(c.run.seed, 9);
    }
}
