use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use easyspec_core::corpus;
use easyspec_core::cost::{ablation_grid, SweepPoint};
use easyspec_core::draft::{probe_similarity, select_children, ChildMode, WorkerPool};
use easyspec_core::model::{init_model, load_model, make_truncated_draft, save_model};
use easyspec_core::plan::plan_groups;
use easyspec_core::report::{aggregate, csv_table, emit, similarity_csv, sweep_csv, ReportFormat, RunMeta};
use easyspec_core::rng::{SeededRng, UniformSource};
use easyspec_core::tensor::ProbVector;
use easyspec_core::tokenizer;
use easyspec_core::verify::{induced_step_distribution, verify_tree};
use easyspec_core::{Algorithm, DraftTree, Engine, ModelConfig, RunReport, WeightStore};

use crate::cli::{BenchArgs, CheckArgs, GenerateArgs, ModelArgs, ProbeArgs, SimulateArgs};
use crate::config::{parse_alpha_csv, parse_sizes, FileConfig, ModelSpec};

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    ModelIo(anyhow::Error),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::ModelIo(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "error: {e:#}"),
            Failure::ModelIo(e) => write!(f, "model I/O error: {e:#}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

trait OrConfig<T> {
    fn config(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrConfig<T> for Result<T, E> {
    fn config(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }
}

fn load_models(spec: &ModelSpec) -> CmdResult<(WeightStore, WeightStore)> {
    match (&spec.base, &spec.draft) {
        (Some(b), Some(d)) => {
            let load = |p: &Path| load_model(p).with_context(|| format!("loading {}", p.display())).map_err(Failure::ModelIo);
            Ok((load(b)?, load(d)?))
        }
        (None, None) => {
            let base = init_model(&ModelConfig::toy(spec.base_layers, spec.init_seed)).config()?;
            let draft = make_truncated_draft(&base, spec.keep_layers).config()?;
            Ok((base, draft))
        }
        _ => Err(Failure::Config(anyhow!("base and draft model paths must be given together"))),
    }
}

fn write_out(out: Option<&Path>, name: &str, bytes: &[u8]) -> CmdResult {
    let Some(dir) = out else {
        return Ok(());
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).config()?;
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).config()
}

pub fn init(cfg: &mut FileConfig, args: &ModelArgs, out: Option<&Path>) -> CmdResult {
    cfg.apply_model(args);
    let out = out.ok_or_else(|| Failure::Config(anyhow!("init needs --out")))?;
    let (base, draft) = load_models(&cfg.model)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(Failure::ModelIo)?;
    for (name, model) in [("base.espec", &base), ("draft.espec", &draft)] {
        let path = out.join(name);
        save_model(&path, model).with_context(|| format!("writing {}", path.display())).map_err(Failure::ModelIo)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn generate(cfg: &mut FileConfig, args: &GenerateArgs, out: Option<&Path>) -> CmdResult {
    cfg.apply_model(&args.model);
    cfg.apply_run(&args.run);
    if let Some(a) = &args.algorithm {
        cfg.run.algorithm = a.parse().config()?;
    }
    let (base, draft) = load_models(&cfg.model)?;
    let engine = Engine::new(&base, &draft, cfg.run.clone()).config()?;
    let prompt = tokenizer::encode(args.prompt.as_bytes(), true);
    let g = engine.generate(&prompt).config()?;
    println!("{}", String::from_utf8_lossy(&tokenizer::decode(&g.tokens)));
    eprintln!(
        "{}: {} tokens, alpha {:.3}, simulated speedup {:.3}",
        g.report.algorithm, g.report.emitted_tokens, g.report.alpha, g.report.sim.total_speedup_vs_vanilla
    );
    write_out(out, "report.json", &emit(&g.report, ReportFormat::Json).config()?)?;
    write_out(out, "occupancy.csv", g.clock.occupancy_csv().as_bytes())
}

fn bench_prompts(cfg: &FileConfig, args: &BenchArgs) -> CmdResult<Vec<Vec<u32>>> {
    if let Some(path) = &args.corpus {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).config()?;
        let prompts: Vec<Vec<u32>> =
            text.lines().filter(|l| !l.trim().is_empty()).map(|l| tokenizer::encode(l.as_bytes(), true)).collect();
        if prompts.is_empty() {
            return Err(Failure::Config(anyhow!("{} has no prompts", path.display())));
        }
        return Ok(prompts);
    }
    let count = args.prompts.unwrap_or(cfg.bench.prompts);
    if count == 0 {
        return Err(Failure::Config(anyhow!("at least one prompt is needed")));
    }
    Ok(corpus::synthetic_prompts(count, cfg.bench.prompt_bytes, cfg.bench.corpus_seed))
}

/// Runs `algorithm` over every prompt and aggregates all iterations.
fn bench_one(base: &WeightStore, draft: &WeightStore, cfg: &FileConfig, algorithm: Algorithm, prompts: &[Vec<u32>]) -> CmdResult<RunReport> {
    let mut run = cfg.run.clone();
    run.algorithm = algorithm;
    if matches!(algorithm, Algorithm::Vanilla | Algorithm::Sd) {
        run.widths.clear();
    }
    let engine = Engine::new(base, draft, run.clone()).config()?;
    let mut traces = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let mut per_prompt = run.clone();
        per_prompt.seed = run.seed.wrapping_add(i as u64);
        let g = Engine::new(base, draft, per_prompt).config()?.generate(prompt).config()?;
        traces.extend(g.report.iterations);
    }
    let emitted: usize = traces.iter().map(|t| t.emitted).sum();
    let vanilla = emitted as f64 * run.cost.base_forward(base.n_layers(), 1.0).duration;
    let meta = RunMeta {
        algorithm,
        n: if algorithm == Algorithm::Vanilla { 0 } else { run.n },
        widths: run.effective_widths().config()?,
        lp_size: match (algorithm, &run.plan) {
            (Algorithm::Easyspec, None) => run.lp_size,
            _ => engine.plan().lp_size(),
        },
    };
    aggregate(meta, traces, vanilla).config()
}

pub fn bench(cfg: &mut FileConfig, args: &BenchArgs, out: Option<&Path>) -> CmdResult {
    cfg.apply_model(&args.model);
    cfg.apply_run(&args.run);
    let algorithms: Vec<Algorithm> = match &args.algorithms {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<_, _>>().config()?,
        None => cfg.bench.algorithms.clone(),
    };
    if algorithms.is_empty() {
        return Err(Failure::Config(anyhow!("no algorithms selected")));
    }
    let (base, draft) = load_models(&cfg.model)?;
    let prompts = bench_prompts(cfg, args)?;
    let mut reports = Vec::new();
    for a in algorithms {
        reports.push(bench_one(&base, &draft, cfg, a, &prompts)?);
    }
    let table = csv_table(&reports);
    print!("{table}");
    write_out(out, "bench.csv", table.as_bytes())?;
    write_out(out, "bench.json", &serde_json::to_vec_pretty(&reports).config()?)
}

pub fn simulate(cfg: &mut FileConfig, args: &SimulateArgs, out: Option<&Path>) -> CmdResult {
    let sizes = parse_sizes(&args.lp).config()?;
    let n = args.n.unwrap_or(cfg.run.n);
    let base_layers = args.base_layers.unwrap_or(cfg.model.base_layers);
    let draft_layers = args.keep_layers.unwrap_or(cfg.model.keep_layers);
    let table: Option<Vec<(usize, f64)>> = match &args.alpha_csv {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).config()?;
            Some(parse_alpha_csv(&text).config()?)
        }
        None => None,
    };
    if let Some(rows) = &table {
        if let Some(lp) = sizes.iter().find(|lp| !rows.iter().any(|(l, _)| l == *lp)) {
            return Err(Failure::Config(anyhow!("no alpha for layer-parallel size {lp}")));
        }
    }
    let fixed = args.alpha.unwrap_or(0.8);
    let alpha = |lp: usize, _w: usize| match &table {
        Some(rows) => rows.iter().find(|(l, _)| *l == lp).map_or(fixed, |r| r.1),
        None => fixed,
    };
    let points: Vec<SweepPoint> =
        ablation_grid(&cfg.run.cost, draft_layers, base_layers, n, &sizes, &args.widths, &alpha).config()?;
    let csv = sweep_csv(&points);
    print!("{csv}");
    write_out(out, "simulate.csv", csv.as_bytes())
}

pub fn probe(cfg: &mut FileConfig, args: &ProbeArgs, out: Option<&Path>) -> CmdResult {
    cfg.apply_model(&args.model);
    let sizes = parse_sizes(&args.lp).config()?;
    let (_, draft) = load_models(&cfg.model)?;
    let text = match &args.corpus {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display())).config()?,
        None => corpus::synthetic_text(4096, 1),
    };
    let seqs = corpus::chunked(&text, 256);
    let mut rows = Vec::new();
    for lp in sizes {
        let plan = plan_groups(draft.n_layers(), lp).config()?;
        let pool = WorkerPool::new(cfg.run.workers.unwrap_or(plan.lp_size())).config()?;
        rows.push((lp, probe_similarity(&draft, &plan, &seqs, &pool).config()?));
    }
    let csv = similarity_csv(&rows).config()?;
    print!("{csv}");
    write_out(out, "probe.csv", csv.as_bytes())
}

fn random_dist(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|_| -(1.0 - rng.next_uniform()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn prob(v: &[f64]) -> ProbVector {
    ProbVector::normalized(v, 0.0).expect("non-empty distribution")
}

/// Largest deviation of the one-step output distribution from the target
/// over random and adversarial pairs.
fn analytic_check(vocab: usize, trials: usize, rng: &mut SeededRng) -> CmdResult<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let p = random_dist(rng, vocab);
        let q = match trial % 3 {
            0 => {
                let mut q = vec![0.0; vocab];
                q[(rng.next_u64() % vocab as u64) as usize] = 1.0;
                q
            }
            1 => {
                let top = (0..vocab).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
                let mut q = random_dist(rng, vocab);
                q[top] = 1e-7;
                q
            }
            _ => random_dist(rng, vocab),
        };
        let induced = induced_step_distribution(&prob(&p), &prob(&q)).config()?;
        let target = prob(&p);
        for t in 0..vocab {
            worst = worst.max((induced.get(t) as f64 - target.get(t) as f64).abs());
        }
    }
    Ok(worst)
}

/// Monte-Carlo frequency of the first two emitted tokens for one tree
/// shape, compared cell by cell against the target joint distribution.
/// Returns the worst deviation in standard errors.
fn statistical_check(vocab: usize, widths: &[usize], mode: ChildMode, samples: usize, rng: &mut SeededRng) -> CmdResult<f64> {
    let p_root = prob(&random_dist(rng, vocab));
    let q_root = prob(&random_dist(rng, vocab));
    let p_next: Vec<ProbVector> = (0..vocab).map(|_| prob(&random_dist(rng, vocab))).collect();
    let q_next: Vec<ProbVector> = (0..vocab).map(|_| prob(&random_dist(rng, vocab))).collect();
    let modes = vec![mode; widths.len()];
    let mut counts = vec![0usize; vocab * vocab];
    for _ in 0..samples {
        let mut tree = DraftTree::new(q_root.clone(), widths.to_vec(), modes.clone());
        let first = select_children(&q_root, widths[0], mode, rng).config()?;
        let mut frontier = tree.push_children(None, &first);
        for &w in &widths[1..] {
            let mut next = Vec::new();
            for &i in &frontier {
                let q = &q_next[tree.nodes[i].token as usize];
                let kids = select_children(q, w, mode, rng).config()?;
                tree.node_dists[i] = Some(q.clone());
                next.extend(tree.push_children(Some(i), &kids));
            }
            frontier = next;
        }
        let targets: Vec<ProbVector> = tree.nodes.iter().map(|n| p_next[n.token as usize].clone()).collect();
        let out = verify_tree(&tree, &p_root, &targets, false, rng).config()?;
        let mut emitted: Vec<usize> = out.accepted_tokens.iter().map(|&t| t as usize).collect();
        emitted.push(out.bonus_token as usize);
        if emitted.len() == 1 {
            emitted.push(p_next[emitted[0]].sample(rng.next_uniform()));
        }
        counts[emitted[0] * vocab + emitted[1]] += 1;
    }
    let mut worst = 0.0f64;
    for a in 0..vocab {
        for b in 0..vocab {
            let p = p_root.get(a) as f64 * p_next[a].get(b) as f64;
            let f = counts[a * vocab + b] as f64 / samples as f64;
            let sigma = (p * (1.0 - p) / samples as f64).sqrt().max(1e-4 / 5.0);
            worst = worst.max((f - p).abs() / sigma);
        }
    }
    Ok(worst)
}

pub fn check_lossless(cfg: &FileConfig, args: &CheckArgs) -> CmdResult {
    if !(2..=64).contains(&args.vocab) || args.trials == 0 || args.samples == 0 {
        return Err(Failure::Config(anyhow!("vocab must be in 2..=64 and trials, samples positive")));
    }
    let mut rng = SeededRng::new(cfg.run.seed);
    let mut failures = Vec::new();
    let worst = analytic_check(args.vocab, args.trials, &mut rng)?;
    let ok = worst <= 1e-6;
    println!("analytic     {}  max |induced - p| = {worst:.3e} over {} pairs (tol 1e-6)", verdict(ok), args.trials);
    if !ok {
        failures.push("analytic".to_string());
    }
    let wide = args.vocab.min(3);
    let shapes: [(&str, Vec<usize>, ChildMode); 3] = [
        ("chain", vec![1, 1], ChildMode::Sampled),
        ("sampled", vec![wide, 2], ChildMode::Sampled),
        ("top_k", vec![wide, 2], ChildMode::TopK),
    ];
    for (name, widths, mode) in shapes {
        let z = statistical_check(args.vocab, &widths, mode, args.samples, &mut rng)?;
        let ok = z <= 5.0;
        println!("statistical  {}  {name} {widths:?}: worst cell {z:.2} standard errors over {} samples (tol 5)", verdict(ok), args.samples);
        if !ok {
            failures.push(name.to_string());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join(", ")))
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
