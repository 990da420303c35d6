//! Drafter execution: layer-sequential and layer-parallel (fuzzy) forwards,
//! token-tree drafting, and similarity probing of fuzzy against precise
//! intermediate values.
//!
//! In a fuzzy forward every attention layer of a group reads the hidden
//! state entering the group. The attentions of a group are independent and
//! may run on separate workers; the residual/MLP chain afterwards stays
//! sequential: `h'_i = h_i + attn_i`, `h_{i+1} = h'_i + MLP(h'_i)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{KvCache, TreeMask};
use crate::model::WeightStore;
use crate::plan::LayerPlan;
use crate::rng::UniformSource;
use crate::tensor::{cosine_sim, sample_weights, softmax_temp, Matrix, ProbVector};

/// Thread pool for the attention layers of a group. With one worker
/// everything runs inline. Results are always combined in layer order.
#[derive(Debug)]
pub struct WorkerPool {
    pool: Option<rayon::ThreadPool>,
    workers: usize,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        let workers = workers.max(1);
        let pool = if workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self { pool, workers })
    }

    pub fn inline() -> Self {
        Self { pool: None, workers: 1 }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    fn map<I, T, F>(&self, items: Vec<I>, f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(I) -> T + Sync + Send,
    {
        match &self.pool {
            Some(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.into_par_iter().map(&f).collect())
            }
            None => items.into_iter().map(f).collect(),
        }
    }
}

/// Values observed at one layer during a forward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub layer: usize,
    /// Hidden state fed to the attention (the group entry in fuzzy mode).
    pub h_attn: Matrix,
    /// Hidden state `h_i` of the residual chain.
    pub h_chain: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn_out: Matrix,
    /// MLP block input `h'_i`.
    pub h_mid: Matrix,
    pub h_out: Matrix,
}

/// Writes precise keys/values. Committed rows go through
/// [`KvCache::calibrate_overwrite`], staged rows are written as reserved.
fn write_precise(cache: &mut KvCache, layer: usize, rows: &Range<usize>, k: &Matrix, v: &Matrix) -> Result<()> {
    let split = rows.end.min(cache.committed_len()).max(rows.start);
    let n_committed = split - rows.start;
    if n_committed > 0 {
        let idx: Vec<usize> = (0..n_committed).collect();
        let positions: Vec<usize> = (rows.start..split).collect();
        cache.calibrate_overwrite(layer, &positions, &k.select_rows(&idx), &v.select_rows(&idx))?;
    }
    if split < rows.end {
        let idx: Vec<usize> = (n_committed..rows.len()).collect();
        cache.write_rows(layer, split, &k.select_rows(&idx), &v.select_rows(&idx))?;
    }
    Ok(())
}

fn check_rows(model: &WeightStore, h: &Matrix, cache: &KvCache, rows: &Range<usize>, mask: &TreeMask) -> Result<()> {
    if h.rows() != rows.len() || h.cols() != model.config.d_model {
        return Err(Error::Shape(format!(
            "hidden {}x{} for {} rows of width {}",
            h.rows(),
            h.cols(),
            rows.len(),
            model.config.d_model
        )));
    }
    if cache.n_layers() != model.n_layers() {
        return Err(Error::Config(format!(
            "cache has {} layers, model {}",
            cache.n_layers(),
            model.n_layers()
        )));
    }
    if rows.end > cache.len() || mask.size() != cache.len() {
        return Err(Error::Structural(format!(
            "rows {rows:?} / mask {} do not match a cache of {} rows",
            mask.size(),
            cache.len()
        )));
    }
    Ok(())
}

/// Layer-sequential forward with optional capture of every layer.
pub fn forward_sequential_with_capture(
    model: &WeightStore,
    h_input: &Matrix,
    cache: &mut KvCache,
    rows: Range<usize>,
    mask: &TreeMask,
    mut capture: Option<&mut Vec<LayerCapture>>,
) -> Result<Matrix> {
    check_rows(model, h_input, cache, &rows, mask)?;
    let positions = cache.positions(rows.clone()).to_vec();
    let mut h = h_input.clone();
    for layer in 0..model.n_layers() {
        let normed = model.attn_norm(layer, &h)?;
        let (q, k, v) = model.project_qkv(layer, &normed, &positions)?;
        write_precise(cache, layer, &rows, &k, &v)?;
        let ctx = model.attend(&q, cache.layer(layer), rows.clone(), mask)?;
        let attn_out = crate::tensor::matmul(&ctx, &model.layers[layer].wo)?;
        let h_mid = h.add(&attn_out)?;
        let h_out = model.mlp_residual(layer, &h_mid)?;
        if let Some(c) = capture.as_deref_mut() {
            c.push(LayerCapture {
                layer,
                h_attn: h.clone(),
                h_chain: h.clone(),
                q,
                k,
                v,
                attn_out,
                h_mid,
                h_out: h_out.clone(),
            });
        }
        h = h_out;
    }
    Ok(h)
}

/// Layer-sequential forward over `rows` (already reserved in `cache`).
/// Writes precise keys and values for every layer and returns the final
/// hidden rows.
pub fn forward_sequential(
    model: &WeightStore,
    h_input: &Matrix,
    cache: &mut KvCache,
    rows: Range<usize>,
    mask: &TreeMask,
) -> Result<Matrix> {
    forward_sequential_with_capture(model, h_input, cache, rows, mask, None)
}

/// Layer-parallel forward with optional capture of every layer.
#[allow(clippy::too_many_arguments)]
pub fn forward_fuzzy_with_capture(
    model: &WeightStore,
    plan: &LayerPlan,
    h_input: &Matrix,
    cache: &mut KvCache,
    rows: Range<usize>,
    mask: &TreeMask,
    pool: &WorkerPool,
    mut capture: Option<&mut Vec<LayerCapture>>,
) -> Result<Matrix> {
    plan.check_layers(model.n_layers())?;
    check_rows(model, h_input, cache, &rows, mask)?;
    let positions = cache.positions(rows.clone()).to_vec();
    let mut h = h_input.clone();
    for group in plan.groups() {
        let entry = h.clone();
        let views = cache.layers_mut(group.clone());
        let parts = if group.len() == 1 {
            let layer = group.start;
            let normed = model.attn_norm(layer, &entry)?;
            vec![model.attention_parts(layer, &normed, &mut views[0], rows.clone(), &positions, mask)?]
        } else {
            let jobs: Vec<_> = group.clone().zip(views.iter_mut()).collect();
            let results = pool.map(jobs, |(layer, kv)| {
                let normed = model.attn_norm(layer, &entry)?;
                model.attention_parts(layer, &normed, kv, rows.clone(), &positions, mask)
            });
            results.into_iter().collect::<Result<Vec<_>>>()?
        };
        for (layer, p) in group.clone().zip(parts) {
            let h_mid = h.add(&p.out)?;
            let h_out = model.mlp_residual(layer, &h_mid)?;
            if let Some(c) = capture.as_deref_mut() {
                c.push(LayerCapture {
                    layer,
                    h_attn: entry.clone(),
                    h_chain: h.clone(),
                    q: p.q,
                    k: p.k,
                    v: p.v,
                    attn_out: p.out,
                    h_mid,
                    h_out: h_out.clone(),
                });
            }
            h = h_out;
        }
    }
    Ok(h)
}

/// Layer-parallel forward following `plan`. With `probe`, a precise forward
/// runs on a copy of the cache and per-layer similarities are accumulated.
#[allow(clippy::too_many_arguments)]
pub fn forward_fuzzy(
    model: &WeightStore,
    plan: &LayerPlan,
    h_input: &Matrix,
    cache: &mut KvCache,
    rows: Range<usize>,
    mask: &TreeMask,
    pool: &WorkerPool,
    probe: Option<&mut SimilarityStats>,
) -> Result<Matrix> {
    let Some(stats) = probe else {
        return forward_fuzzy_with_capture(model, plan, h_input, cache, rows, mask, pool, None);
    };
    let mut precise_cache = cache.clone();
    let mut precise = Vec::new();
    forward_sequential_with_capture(model, h_input, &mut precise_cache, rows.clone(), mask, Some(&mut precise))?;
    let mut fuzzy = Vec::new();
    let out = forward_fuzzy_with_capture(model, plan, h_input, cache, rows, mask, pool, Some(&mut fuzzy))?;
    stats.record(&precise, &fuzzy)?;
    Ok(out)
}

/// Compared quantities, in report column order.
pub const QUANTITIES: [&str; 5] = ["h", "q", "k", "v", "attnoutput"];

/// Running means of cosine similarity between precise and fuzzy values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    sums: [f64; 5],
    count: u64,
}

fn cos_or_one(a: &[f32], b: &[f32]) -> Result<f64> {
    match cosine_sim(a, b) {
        Ok(c) => Ok(c as f64),
        // Two zero vectors are identical.
        Err(Error::UndefinedSimilarity) => Ok(1.0),
        Err(e) => Err(e),
    }
}

impl SimilarityStats {
    /// Adds one sample per (layer, row) from matching captures.
    pub fn record(&mut self, precise: &[LayerCapture], fuzzy: &[LayerCapture]) -> Result<()> {
        if precise.len() != fuzzy.len() {
            return Err(Error::Shape(format!("{} vs {} captured layers", precise.len(), fuzzy.len())));
        }
        for (p, f) in precise.iter().zip(fuzzy) {
            let pairs = [(&p.h_attn, &f.h_attn), (&p.q, &f.q), (&p.k, &f.k), (&p.v, &f.v), (&p.attn_out, &f.attn_out)];
            for r in 0..p.q.rows() {
                for (sum, (a, b)) in self.sums.iter_mut().zip(pairs) {
                    *sum += cos_or_one(a.row(r), b.row(r))?;
                }
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Means for h, q, k, v and attention output; `None` before any sample.
    pub fn means(&self) -> Option<[f64; 5]> {
        if self.count == 0 {
            return None;
        }
        Some(self.sums.map(|s| (s / self.count as f64).clamp(-1.0, 1.0)))
    }

    pub fn merge(&mut self, other: &SimilarityStats) {
        for (a, b) in self.sums.iter_mut().zip(other.sums) {
            *a += b;
        }
        self.count += other.count;
    }
}

/// Measures fuzzy-vs-precise similarity token by token over `corpus`. Each
/// token is forwarded both ways from the same precise cache, and the precise
/// values are kept for the next token.
pub fn probe_similarity(
    model: &WeightStore,
    plan: &LayerPlan,
    corpus: &[Vec<u32>],
    pool: &WorkerPool,
) -> Result<SimilarityStats> {
    plan.check_layers(model.n_layers())?;
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("similarity corpus"));
    }
    let mut stats = SimilarityStats::default();
    for seq in corpus {
        let mut cache = KvCache::new(model.n_layers(), model.config.d_model);
        for &tok in seq {
            let rows = cache.extend_committed(1, true)?;
            let mask = cache.build_tree_mask();
            let h = model.embed(&[tok])?;
            forward_fuzzy(model, plan, &h, &mut cache, rows.clone(), &mask, pool, Some(&mut stats))?;
            forward_sequential(model, &h, &mut cache, rows, &mask)?;
        }
    }
    Ok(stats)
}

/// How children are picked from a draft distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildMode {
    /// The `width` most probable tokens, descending, lowest id first on ties.
    TopK,
    /// `width` distinct tokens drawn one after another from the draft
    /// distribution with earlier picks removed.
    Sampled,
}

/// Child policy for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChildSelection {
    /// Sampled for width-1 levels (a plain draft chain), top-k otherwise.
    #[default]
    Auto,
    TopK,
    Sampled,
}

impl ChildSelection {
    /// Mode for a level of the given width. Greedy decoding always uses
    /// top-k, which then coincides with sampling.
    pub fn mode(self, width: usize, temperature: f32) -> ChildMode {
        if temperature == 0.0 {
            return ChildMode::TopK;
        }
        match self {
            ChildSelection::Auto if width == 1 => ChildMode::Sampled,
            ChildSelection::Auto | ChildSelection::TopK => ChildMode::TopK,
            ChildSelection::Sampled => ChildMode::Sampled,
        }
    }
}

/// Picks up to `width` children of a node whose draft distribution is `dist`.
pub fn select_children(
    dist: &ProbVector,
    width: usize,
    mode: ChildMode,
    rng: &mut dyn UniformSource,
) -> Result<Vec<u32>> {
    if width > dist.len() {
        return Err(Error::Config(format!("width {width} exceeds vocabulary {}", dist.len())));
    }
    Ok(match mode {
        ChildMode::TopK => dist.top_k(width).into_iter().map(|t| t as u32).collect(),
        ChildMode::Sampled => {
            let mut weights: Vec<f64> = dist.as_slice().iter().map(|&p| p as f64).collect();
            let mut out = Vec::with_capacity(width);
            for _ in 0..width {
                if weights.iter().all(|&w| w <= 0.0) {
                    break;
                }
                let t = sample_weights(&weights, rng.next_uniform());
                weights[t] = 0.0;
                out.push(t as u32);
            }
            out
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftNode {
    pub token: u32,
    /// Parent node; `None` for children of the context frontier.
    pub parent: Option<usize>,
    /// Depth below the frontier, starting at 1.
    pub depth: usize,
    /// Drafter cache row, for nodes that were fed to the drafter.
    pub draft_row: Option<usize>,
}

/// Token tree drafted in one iteration. Nodes are stored level by level;
/// every parent precedes its children.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
    pub widths: Vec<usize>,
    /// Child policy per depth (index `d` picks the children at depth `d+1`).
    pub modes: Vec<ChildMode>,
    /// Draft distribution at the context frontier.
    pub root_dist: ProbVector,
    /// Draft distribution after each node (leaves have none).
    pub node_dists: Vec<Option<ProbVector>>,
    root_children: Vec<usize>,
    children: Vec<Vec<usize>>,
}

impl DraftTree {
    /// A tree with only the frontier distribution; levels are added with
    /// [`DraftTree::push_children`].
    pub fn new(root_dist: ProbVector, widths: Vec<usize>, modes: Vec<ChildMode>) -> Self {
        Self {
            nodes: Vec::new(),
            widths,
            modes,
            root_dist,
            node_dists: Vec::new(),
            root_children: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Children of `node` (`None` = frontier) in selection order.
    pub fn children_of(&self, node: Option<usize>) -> &[usize] {
        match node {
            None => &self.root_children,
            Some(i) => &self.children[i],
        }
    }

    /// Draft distribution the children of `node` were chosen from.
    pub fn dist_of(&self, node: Option<usize>) -> Option<&ProbVector> {
        match node {
            None => Some(&self.root_dist),
            Some(i) => self.node_dists[i].as_ref(),
        }
    }

    /// Appends children below `parent` and returns their node indices.
    pub fn push_children(&mut self, parent: Option<usize>, tokens: &[u32]) -> Vec<usize> {
        let depth = parent.map_or(1, |p| self.nodes[p].depth + 1);
        let mut out = Vec::with_capacity(tokens.len());
        for &token in tokens {
            let idx = self.nodes.len();
            self.nodes.push(DraftNode { token, parent, depth, draft_row: None });
            self.node_dists.push(None);
            self.children.push(Vec::new());
            match parent {
                None => self.root_children.push(idx),
                Some(p) => self.children[p].push(idx),
            }
            out.push(idx);
        }
        out
    }

    /// Node indices from the frontier down to `node`.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            path.push(p);
            cur = self.nodes[p].parent;
        }
        path.reverse();
        path
    }

    /// Node count of a full tree with these widths.
    pub fn full_size(widths: &[usize]) -> usize {
        let mut total = 0;
        let mut level = 1;
        for &w in widths {
            level *= w;
            total += level;
        }
        total
    }
}

/// Which forward the drafter uses for tree levels.
#[derive(Debug, Clone, Copy)]
pub enum DraftMode<'p> {
    Sequential,
    Fuzzy(&'p LayerPlan),
}

/// Drafts a token tree below the committed context of `cache`.
///
/// `root_dist` is the drafter's distribution at the frontier (from the
/// forward over the pending tokens). Each further level feeds the previous
/// level's nodes as one token-parallel batch under the tree mask. Leaves are
/// never fed, so only `widths.len() - 1` forwards run. Returns the tree and
/// the number of forwards.
#[allow(clippy::too_many_arguments)]
pub fn draft_tree(
    model: &WeightStore,
    mode: DraftMode<'_>,
    cache: &mut KvCache,
    root_dist: ProbVector,
    widths: &[usize],
    temperature: f32,
    selection: ChildSelection,
    rng: &mut dyn UniformSource,
    pool: &WorkerPool,
) -> Result<(DraftTree, usize)> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Config(format!("tree widths {widths:?} must be non-empty and positive")));
    }
    let modes: Vec<ChildMode> = widths.iter().map(|&w| selection.mode(w, temperature)).collect();
    let mut tree = DraftTree::new(root_dist, widths.to_vec(), modes.clone());
    let first = select_children(&tree.root_dist, widths[0], modes[0], rng)?;
    let mut frontier = tree.push_children(None, &first);
    let mut forwards = 0;
    for d in 1..widths.len() {
        if frontier.is_empty() {
            break;
        }
        let parents: Vec<Option<usize>> = frontier
            .iter()
            .map(|&i| tree.nodes[i].parent.map(|p| tree.nodes[p].draft_row.expect("fed parent")))
            .collect();
        let fuzzy = matches!(mode, DraftMode::Fuzzy(_));
        let rows = cache.stage_append(&parents, fuzzy)?;
        for (&i, &r) in frontier.iter().zip(&rows) {
            tree.nodes[i].draft_row = Some(r);
        }
        let range = rows[0]..rows[rows.len() - 1] + 1;
        let mask = cache.build_tree_mask();
        let tokens: Vec<u32> = frontier.iter().map(|&i| tree.nodes[i].token).collect();
        let h = model.embed(&tokens)?;
        let out = match mode {
            DraftMode::Sequential => forward_sequential(model, &h, cache, range, &mask)?,
            DraftMode::Fuzzy(plan) => forward_fuzzy(model, plan, &h, cache, range, &mask, pool, None)?,
        };
        forwards += 1;
        let logits = model.lm_logits(&out)?;
        let mut next = Vec::new();
        for (r, &i) in frontier.iter().enumerate() {
            let dist = softmax_temp(logits.row(r), temperature)?;
            let kids = select_children(&dist, widths[d], modes[d], rng)?;
            tree.node_dists[i] = Some(dist);
            next.extend(tree.push_children(Some(i), &kids));
        }
        frontier = next;
    }
    Ok((tree, forwards))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::plan::plan_groups;
    use crate::rng::SeededRng;

    fn prefill(model: &WeightStore, tokens: &[u32]) -> KvCache {
        let mut cache = KvCache::new(model.n_layers(), model.config.d_model);
        let rows = cache.extend_committed(tokens.len(), false).unwrap();
        let mask = cache.build_tree_mask();
        let h = model.embed(tokens).unwrap();
        forward_sequential(model, &h, &mut cache, rows, &mask).unwrap();
        cache
    }

    #[test]
    fn singleton_plan_matches_sequential_bitwise() {
        let m = init_model(&ModelConfig::toy(6, 2)).unwrap();
        let plan = plan_groups(6, 1).unwrap();
        let base = prefill(&m, &[256, 72, 105]);
        let (mut a, mut b) = (base.clone(), base);
        for c in [&mut a, &mut b] {
            c.extend_committed(2, false).unwrap();
        }
        let mask = a.build_tree_mask();
        let h = m.embed(&[33, 34]).unwrap();
        let seq = forward_sequential(&m, &h, &mut a, 3..5, &mask).unwrap();
        let fuz = forward_fuzzy(&m, &plan, &h, &mut b, 3..5, &mask, &WorkerPool::inline(), None).unwrap();
        assert_eq!(seq, fuz);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let m = init_model(&ModelConfig::toy(8, 2)).unwrap();
        let plan = plan_groups(8, 3).unwrap();
        let base = prefill(&m, &[256, 1, 2, 3]);
        let run = |workers: usize| {
            let mut c = base.clone();
            c.stage_append(&[None, None, Some(4)], true).unwrap();
            let mask = c.build_tree_mask();
            let h = m.embed(&[5, 6, 7]).unwrap();
            let pool = WorkerPool::new(workers).unwrap();
            let out = forward_fuzzy(&m, &plan, &h, &mut c, 4..7, &mask, &pool, None).unwrap();
            (out, c)
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn group_attention_reads_group_entry_and_mlp_chain_is_sequential() {
        let m = init_model(&ModelConfig::toy(8, 4)).unwrap();
        let plan = plan_groups(8, 4).unwrap();
        let base = prefill(&m, &[256, 9, 8]);
        let mut c = base.clone();
        let rows = c.extend_committed(1, true).unwrap();
        let mask = c.build_tree_mask();
        let h = m.embed(&[70]).unwrap();
        let mut cap = Vec::new();
        forward_fuzzy_with_capture(&m, &plan, &h, &mut c, rows.clone(), &mask, &WorkerPool::inline(), Some(&mut cap))
            .unwrap();
        for g in plan.groups() {
            let entry = &cap[g.start].h_chain;
            // Recompute each attention in reverse order from the entry alone.
            let mut fresh = base.clone();
            fresh.extend_committed(1, true).unwrap();
            for layer in g.clone().rev() {
                let normed = m.attn_norm(layer, entry).unwrap();
                let out = m
                    .attention_parts(layer, &normed, fresh.layer_mut(layer), rows.clone(), &[3], &mask)
                    .unwrap();
                assert_eq!(out.out, cap[layer].attn_out, "layer {layer}");
                assert_eq!(&cap[layer].h_attn, entry);
            }
            for layer in g.clone() {
                assert_eq!(cap[layer].h_mid, cap[layer].h_chain.add(&cap[layer].attn_out).unwrap());
                if layer + 1 < 8 {
                    assert_eq!(cap[layer + 1].h_chain, cap[layer].h_out);
                }
            }
        }
    }

    #[test]
    fn fuzzy_differs_but_stays_aligned() {
        let m = init_model(&ModelConfig::toy(8, 4)).unwrap();
        let plan = plan_groups(8, 2).unwrap();
        let mut c = prefill(&m, &[256, 50, 60, 70]);
        let rows = c.extend_committed(1, true).unwrap();
        let mask = c.build_tree_mask();
        let h = m.embed(&[80]).unwrap();
        let mut precise = c.clone();
        let p = forward_sequential(&m, &h, &mut precise, rows.clone(), &mask).unwrap();
        let f = forward_fuzzy(&m, &plan, &h, &mut c, rows, &mask, &WorkerPool::inline(), None).unwrap();
        assert_ne!(p, f);
        assert!(cosine_sim(p.row(0), f.row(0)).unwrap() > 0.0);
    }

    #[test]
    fn probe_lp1_is_exactly_one() {
        let m = init_model(&ModelConfig::toy(4, 1)).unwrap();
        let corpus = vec![vec![256, 1, 2, 3, 4], vec![256, 9]];
        let s = probe_similarity(&m, &plan_groups(4, 1).unwrap(), &corpus, &WorkerPool::inline()).unwrap();
        assert_eq!(s.means().unwrap(), [1.0; 5]);
        assert_eq!(s.count(), 7 * 4);
        assert!(matches!(
            probe_similarity(&m, &plan_groups(4, 1).unwrap(), &[], &WorkerPool::inline()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn greedy_chain_and_counting() {
        let m = init_model(&ModelConfig::toy(4, 1)).unwrap();
        let mut rng = SeededRng::new(0);
        let mut c = prefill(&m, &[256, 65]);
        let dist = ProbVector::one_hot(258, 66);
        let (tree, fw) = draft_tree(
            &m,
            DraftMode::Sequential,
            &mut c,
            dist.clone(),
            &[1; 5],
            0.0,
            ChildSelection::Auto,
            &mut rng,
            &WorkerPool::inline(),
        )
        .unwrap();
        assert_eq!(tree.len(), 5);
        assert_eq!(fw, 4);
        assert!(tree.nodes.iter().enumerate().all(|(i, n)| n.depth == i + 1));
        assert_eq!(c.staged_len(), 4);

        let mut c = prefill(&m, &[256, 65]);
        let plan = plan_groups(4, 2).unwrap();
        let (tree, _) = draft_tree(
            &m,
            DraftMode::Fuzzy(&plan),
            &mut c,
            ProbVector::uniform(258),
            &[2, 2],
            0.8,
            ChildSelection::Auto,
            &mut rng,
            &WorkerPool::inline(),
        )
        .unwrap();
        assert_eq!(tree.len(), DraftTree::full_size(&[2, 2]));
        assert_eq!(tree.len(), 6);
        assert_eq!(c.fuzzy_rows(), 2);
    }

    #[test]
    fn top_k_children_match_sort_oracle() {
        let mut rng = SeededRng::new(3);
        let logits: Vec<f32> = (0..258).map(|i| ((i * 37) % 101) as f32 / 10.0).collect();
        let dist = softmax_temp(&logits, 0.8).unwrap();
        let kids = select_children(&dist, 4, ChildMode::TopK, &mut rng).unwrap();
        let mut order: Vec<usize> = (0..258).collect();
        order.sort_by(|&a, &b| dist.get(b).partial_cmp(&dist.get(a)).unwrap().then(a.cmp(&b)));
        assert_eq!(kids, order[..4].iter().map(|&t| t as u32).collect::<Vec<_>>());
        assert!(select_children(&dist, 259, ChildMode::TopK, &mut rng).is_err());
    }

    #[test]
    fn sampled_children_are_distinct_and_supported() {
        let mut rng = SeededRng::new(3);
        let dist = ProbVector::new(vec![0.5, 0.0, 0.3, 0.2]).unwrap();
        for _ in 0..100 {
            let kids = select_children(&dist, 4, ChildMode::Sampled, &mut rng).unwrap();
            assert_eq!(kids.len(), 3);
            assert!(!kids.contains(&1));
            let mut sorted = kids.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 3);
        }
    }
}
