//! Lossless verification of drafted tokens.
//!
//! Each tree node is resolved by recursive rejection sampling: every child
//! is a proposal `q` with acceptance probability `min(1, target/q)` at the
//! child's token, and a rejection replaces the target with
//! `norm(max(0, target - q))`. When no child survives, or the tree ends, the
//! bonus token is drawn from the current target. Whatever the proposals, the
//! emitted token at each position is distributed exactly as the base
//! model's distribution there.
//!
//! Proposals depend on how children were chosen:
//! * sampled children: the draft distribution with earlier siblings removed
//!   and renormalized (a single sampled child gives the classic
//!   `min(1, p/p')` test and the `norm(max(0, p - p'))` residual);
//! * top-k children: a point mass on the child, so acceptance is `target(c)`
//!   and rejection clamps `c` to zero and renormalizes.

use serde::{Deserialize, Serialize};

use crate::draft::{ChildMode, DraftTree};
use crate::error::{Error, Result};
use crate::rng::UniformSource;
use crate::tensor::{sample_weights, ProbVector};

/// Residual mass below which the residual is treated as empty.
pub const RESIDUAL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub accepted_tokens: Vec<u32>,
    pub bonus_token: u32,
    /// Tree node indices of the accepted tokens, frontier first.
    pub accepted_path: Vec<usize>,
    pub m: usize,
    pub n: usize,
}

/// `u < min(1, p / p')`.
pub fn acceptance_test(p_tok: f32, p_prime_tok: f32, u: f64) -> Result<bool> {
    accept(p_tok as f64, p_prime_tok as f64, u)
}

fn accept(p: f64, q: f64, u: f64) -> Result<bool> {
    if !(q > 0.0) {
        return Err(Error::Consistency(format!("drafted token has proposal probability {q}")));
    }
    Ok(u < (p / q).min(1.0))
}

/// `norm(max(0, p - q))`, or `None` when its mass is below [`RESIDUAL_EPS`].
fn residual(p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
    let mut r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = r.iter().sum();
    if !(mass >= RESIDUAL_EPS) {
        return None;
    }
    for v in &mut r {
        *v /= mass;
    }
    Some(r)
}

fn to_f64(p: &ProbVector) -> Vec<f64> {
    p.as_slice().iter().map(|&v| v as f64).collect()
}

fn to_prob(v: &[f64]) -> ProbVector {
    ProbVector::normalized(v, 0.0).expect("non-empty distribution")
}

/// Bonus distribution after `m` of `n` drafted tokens were accepted: `p`
/// when everything was accepted, otherwise `norm(max(0, p - p'))`, falling
/// back to `p` when the residual is numerically empty.
pub fn bonus_distribution(p: &ProbVector, p_prime: Option<&ProbVector>, m: usize, n: usize) -> Result<ProbVector> {
    if m >= n {
        return Ok(p.clone());
    }
    let q = p_prime.ok_or_else(|| Error::Consistency("rejection without a draft distribution".into()))?;
    if q.len() != p.len() {
        return Err(Error::Shape(format!("p has {} entries, p' {}", p.len(), q.len())));
    }
    Ok(match residual(&to_f64(p), &to_f64(q)) {
        Some(r) => to_prob(&r),
        None => p.clone(),
    })
}

/// Marginal distribution of one draft-then-verify step:
/// `p'(x)·min(1, p(x)/p'(x)) + (1 - β)·res(x)` with
/// `β = Σ min(p, p')` and `res = norm(max(0, p - p'))`.
pub fn induced_step_distribution(p: &ProbVector, p_prime: &ProbVector) -> Result<ProbVector> {
    if p.len() != p_prime.len() {
        return Err(Error::Shape(format!("p has {} entries, p' {}", p.len(), p_prime.len())));
    }
    let (p, q) = (to_f64(p), to_f64(p_prime));
    let beta: f64 = p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum();
    let res = residual(&p, &q).unwrap_or_else(|| p.clone());
    let out: Vec<f64> = (0..p.len())
        .map(|x| {
            let accepted = if q[x] > 0.0 { q[x] * (p[x] / q[x]).min(1.0) } else { 0.0 };
            accepted + (1.0 - beta) * res[x]
        })
        .collect();
    Ok(to_prob(&out))
}

/// Resolves one node: tries its children in order against `target`.
/// Returns the accepted child, or `None` with `target` replaced by the final
/// residual.
fn resolve_node(
    tree: &DraftTree,
    node: Option<usize>,
    target: &mut Vec<f64>,
    greedy: bool,
    rng: &mut dyn UniformSource,
) -> Result<Option<usize>> {
    let children = tree.children_of(node);
    if children.is_empty() {
        return Ok(None);
    }
    if greedy {
        let best = sample_argmax(target);
        return Ok(children.iter().copied().find(|&c| tree.nodes[c].token as usize == best));
    }
    let depth = node.map_or(0, |n| tree.nodes[n].depth);
    let mode = tree.modes[depth];
    let original = target.clone();
    let mut proposal_base: Option<Vec<f64>> = match mode {
        ChildMode::Sampled => Some(to_f64(
            tree.dist_of(node).ok_or_else(|| Error::Consistency("node without draft distribution".into()))?,
        )),
        ChildMode::TopK => None,
    };
    for &c in children {
        let tok = tree.nodes[c].token as usize;
        if tok >= target.len() {
            return Err(Error::Consistency(format!("token {tok} outside the target distribution")));
        }
        let q: Vec<f64> = match proposal_base.as_mut() {
            // The first sampled child is tested against the stored draft
            // distribution as is; later ones against the renormalized rest.
            Some(base) if c == children[0] => base.clone(),
            Some(base) => {
                let mass: f64 = base.iter().sum();
                base.iter().map(|v| v / mass).collect()
            }
            None => {
                let mut point = vec![0.0; target.len()];
                point[tok] = 1.0;
                point
            }
        };
        if accept(target[tok], q[tok], rng.next_uniform())? {
            return Ok(Some(c));
        }
        *target = residual(target, &q).unwrap_or_else(|| original.clone());
        if let Some(base) = proposal_base.as_mut() {
            base[tok] = 0.0;
        }
    }
    Ok(None)
}

fn sample_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Walks `tree` from the frontier, accepting at most one child per level.
///
/// `root_target` is the base distribution at the frontier and
/// `node_targets[i]` the base distribution after node `i`. With `greedy`
/// (temperature 0) a child is accepted iff it is the base argmax and the
/// bonus is the base argmax; no uniforms are drawn.
pub fn verify_tree(
    tree: &DraftTree,
    root_target: &ProbVector,
    node_targets: &[ProbVector],
    greedy: bool,
    rng: &mut dyn UniformSource,
) -> Result<VerificationOutcome> {
    if tree.is_empty() {
        return Err(Error::Empty("draft tree"));
    }
    if node_targets.len() != tree.len() {
        return Err(Error::Shape(format!(
            "{} base distributions for {} tree nodes",
            node_targets.len(),
            tree.len()
        )));
    }
    let mut node = None;
    let mut target = to_f64(root_target);
    let mut path = Vec::new();
    while let Some(child) = resolve_node(tree, node, &mut target, greedy, rng)? {
        path.push(child);
        node = Some(child);
        target = to_f64(&node_targets[child]);
    }
    let bonus = if greedy { sample_argmax(&target) } else { sample_weights(&target, rng.next_uniform()) };
    Ok(VerificationOutcome {
        accepted_tokens: path.iter().map(|&i| tree.nodes[i].token).collect(),
        bonus_token: bonus as u32,
        m: path.len(),
        n: tree.depth(),
        accepted_path: path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{ScriptedUniforms, SeededRng};
    use proptest::prelude::*;

    fn pv(v: &[f32]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn acceptance_examples() {
        assert!(acceptance_test(0.3, 0.3, 0.999).unwrap());
        assert!(acceptance_test(0.2, 0.4, 0.49).unwrap());
        assert!(!acceptance_test(0.2, 0.4, 0.5).unwrap());
        assert!(acceptance_test(0.9, 0.4, 0.9999).unwrap());
        assert!(matches!(acceptance_test(0.2, 0.0, 0.1), Err(Error::Consistency(_))));
    }

    #[test]
    fn bonus_examples() {
        let p = pv(&[0.5, 0.5]);
        assert_eq!(bonus_distribution(&p, None, 3, 3).unwrap(), p);
        let r = bonus_distribution(&pv(&[0.7, 0.3]), Some(&pv(&[0.3, 0.7])), 0, 3).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 0.0]);
        let p = pv(&[0.6, 0.4]);
        assert_eq!(bonus_distribution(&p, Some(&p), 1, 3).unwrap(), p);
    }

    #[test]
    fn induced_examples() {
        let out = induced_step_distribution(&pv(&[0.5, 0.5]), &pv(&[0.9, 0.1])).unwrap();
        assert!((out.get(0) - 0.5).abs() < 1e-6 && (out.get(1) - 0.5).abs() < 1e-6);
        let p = pv(&[0.2, 0.3, 0.5]);
        let out = induced_step_distribution(&p, &p).unwrap();
        for i in 0..3 {
            assert!((out.get(i) - p.get(i)).abs() < 1e-6);
        }
    }

    fn random_dist(rng: &mut SeededRng, n: usize) -> ProbVector {
        let w: Vec<f64> = (0..n).map(|_| rng.next_uniform()).collect();
        ProbVector::normalized(&w, 0.0).unwrap()
    }

    #[test]
    fn induced_is_lossless_on_random_pairs() {
        let mut rng = SeededRng::new(17);
        for trial in 0..1000 {
            let n = 2 + trial % 15;
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            let out = induced_step_distribution(&p, &q).unwrap();
            for i in 0..n {
                assert!((out.get(i) - p.get(i)).abs() <= 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn bonus_is_valid(ws in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..16)) {
            let p = ProbVector::normalized(&ws.iter().map(|w| w.0 + 1e-3).collect::<Vec<_>>(), 0.0).unwrap();
            let q = ProbVector::normalized(&ws.iter().map(|w| w.1 + 1e-3).collect::<Vec<_>>(), 0.0).unwrap();
            let r = bonus_distribution(&p, Some(&q), 0, 1).unwrap();
            let s: f32 = r.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-4);
            prop_assert!(r.as_slice().iter().all(|&v| v >= 0.0));
        }
    }

    fn single_level_tree(dist: ProbVector, tokens: &[u32], mode: ChildMode) -> DraftTree {
        let mut t = DraftTree::new(dist, vec![tokens.len()], vec![mode]);
        t.push_children(None, tokens);
        t
    }

    #[test]
    fn greedy_accepts_only_argmax() {
        let tree = single_level_tree(pv(&[0.0, 1.0, 0.0]), &[1, 2], ChildMode::TopK);
        let root = pv(&[0.0, 0.0, 1.0]);
        let targets = vec![pv(&[1.0, 0.0, 0.0]); 2];
        let mut rng = ScriptedUniforms::new(vec![]);
        let out = verify_tree(&tree, &root, &targets, true, &mut rng).unwrap();
        assert_eq!(out.accepted_tokens, vec![2]);
        assert_eq!(out.bonus_token, 0);
        assert_eq!((out.m, out.n), (1, 1));
    }

    #[test]
    fn point_mass_rejection_clamps_child() {
        // Child 0 rejected (u >= 0.5), target becomes [0, .6, .4]; bonus
        // with u = 0.7 lands on token 2.
        let tree = single_level_tree(pv(&[0.6, 0.4, 0.0]), &[0], ChildMode::TopK);
        let root = pv(&[0.5, 0.3, 0.2]);
        let mut rng = ScriptedUniforms::new(vec![0.5, 0.7]);
        let out = verify_tree(&tree, &root, &[pv(&[1.0, 0.0, 0.0])], false, &mut rng).unwrap();
        assert_eq!(out.m, 0);
        assert_eq!(out.bonus_token, 2);
        assert_eq!(rng.consumed(), 2);
    }

    #[test]
    fn empty_tree_rejected() {
        let tree = DraftTree::new(pv(&[1.0]), vec![1], vec![ChildMode::TopK]);
        let mut rng = ScriptedUniforms::new(vec![]);
        assert!(matches!(verify_tree(&tree, &pv(&[1.0]), &[], false, &mut rng), Err(Error::Empty(_))));
    }
}
