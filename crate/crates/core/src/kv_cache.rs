//! Per-layer key/value storage with a committed prefix and a staged token
//! forest.
//!
//! Rows are addressed by a single flat index. Rows `0..committed_len` hold the
//! accepted sequence and attend causally; staged rows form a forest whose
//! roots hang off the committed tail. A staged row attends to every committed
//! row, its staged ancestors, and itself. The rotary position of a row is its
//! depth from the start of the sequence, so siblings share a position.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Keys and values of one layer, one row per flat position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    width: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    fuzzy: Vec<bool>,
}

impl LayerKv {
    fn new(width: usize) -> Self {
        Self { width, keys: Vec::new(), values: Vec::new(), fuzzy: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.fuzzy.len()
    }

    #[inline]
    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.width..(row + 1) * self.width]
    }

    #[inline]
    pub fn value(&self, row: usize) -> &[f32] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn is_fuzzy(&self, row: usize) -> bool {
        self.fuzzy[row]
    }

    /// Writes consecutive rows starting at `start`.
    pub fn write_rows(&mut self, start: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        if k.cols() != self.width || v.cols() != self.width || k.rows() != v.rows() {
            return Err(Error::Shape(format!(
                "kv rows {}x{} / {}x{} into width {}",
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols(),
                self.width
            )));
        }
        if start + k.rows() > self.rows() {
            return Err(Error::Structural(format!(
                "rows {start}..{} are not reserved ({} rows)",
                start + k.rows(),
                self.rows()
            )));
        }
        let (a, b) = (start * self.width, (start + k.rows()) * self.width);
        self.keys[a..b].copy_from_slice(k.data());
        self.values[a..b].copy_from_slice(v.data());
        Ok(())
    }

    fn push_rows(&mut self, count: usize, fuzzy: bool) {
        self.keys.resize(self.keys.len() + count * self.width, 0.0);
        self.values.resize(self.values.len() + count * self.width, 0.0);
        self.fuzzy.resize(self.fuzzy.len() + count, fuzzy);
    }

    fn truncate(&mut self, rows: usize) {
        self.keys.truncate(rows * self.width);
        self.values.truncate(rows * self.width);
        self.fuzzy.truncate(rows);
    }

    fn copy_row(&mut self, from: usize, to: usize) {
        let w = self.width;
        self.keys.copy_within(from * w..(from + 1) * w, to * w);
        self.values.copy_within(from * w..(from + 1) * w, to * w);
        self.fuzzy[to] = self.fuzzy[from];
    }
}

/// Boolean attention mask over flat positions: `allowed(q, k)` is true iff
/// query row `q` may attend to key row `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeMask {
    size: usize,
    allowed: Vec<bool>,
}

impl TreeMask {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    /// Key rows visible to `query`, ascending.
    pub fn visible(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.allowed[query * self.size..(query + 1) * self.size];
        row.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    layers: Vec<LayerKv>,
    committed: usize,
    /// Parent of each staged row (index `row - committed`); `None` is the
    /// committed tail.
    parents: Vec<Option<usize>>,
    positions: Vec<usize>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            layers: (0..n_layers).map(|_| LayerKv::new(width)).collect(),
            committed: 0,
            parents: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total stored rows per layer.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn committed_len(&self) -> usize {
        self.committed
    }

    pub fn staged_len(&self) -> usize {
        self.parents.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer]
    }

    /// Disjoint mutable access to a run of layers, one view per worker.
    pub fn layers_mut(&mut self, range: Range<usize>) -> &mut [LayerKv] {
        &mut self.layers[range]
    }

    pub fn position(&self, row: usize) -> usize {
        self.positions[row]
    }

    pub fn positions(&self, rows: Range<usize>) -> &[usize] {
        &self.positions[rows]
    }

    /// Parent of a staged row; `None` for roots and committed rows.
    pub fn parent_of(&self, row: usize) -> Option<usize> {
        if row < self.committed {
            return None;
        }
        self.parents[row - self.committed]
    }

    /// True if any layer's value for `row` came from a fuzzy forward.
    pub fn is_fuzzy(&self, row: usize) -> bool {
        self.layers.iter().any(|l| l.is_fuzzy(row))
    }

    pub fn fuzzy_rows(&self) -> usize {
        (0..self.len()).filter(|&r| self.is_fuzzy(r)).count()
    }

    /// Reserves `count` committed rows directly after the committed prefix.
    pub fn extend_committed(&mut self, count: usize, fuzzy: bool) -> Result<Range<usize>> {
        if self.staged_len() > 0 {
            return Err(Error::Structural(
                "cannot extend the committed region while rows are staged".into(),
            ));
        }
        let start = self.committed;
        for layer in &mut self.layers {
            layer.push_rows(count, fuzzy);
        }
        self.positions.extend(start..start + count);
        self.committed += count;
        Ok(start..self.committed)
    }

    /// Stages one row per entry of `parents` and returns their flat indices.
    /// A parent is either `None` (the committed tail) or an earlier staged
    /// row, possibly one appended by this same call.
    pub fn stage_append(&mut self, parents: &[Option<usize>], fuzzy: bool) -> Result<Vec<usize>> {
        let start = self.len();
        for (i, parent) in parents.iter().enumerate() {
            let index = start + i;
            if let Some(p) = *parent {
                if p >= index || p < self.committed {
                    return Err(Error::Structural(format!(
                        "row {index} cannot have parent {p} (staged rows start at {})",
                        self.committed
                    )));
                }
            }
        }
        let mut indices = Vec::with_capacity(parents.len());
        for (i, parent) in parents.iter().enumerate() {
            let index = start + i;
            let position = match parent {
                Some(p) => self.positions[*p] + 1,
                None => self.committed,
            };
            self.parents.push(*parent);
            self.positions.push(position);
            indices.push(index);
        }
        for layer in &mut self.layers {
            layer.push_rows(parents.len(), fuzzy);
        }
        Ok(indices)
    }

    /// Staged ancestors of `row` (nearest first), excluding `row` itself.
    pub fn ancestors(&self, row: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = self.parent_of(row);
        while let Some(p) = cur {
            out.push(p);
            cur = self.parent_of(p);
        }
        out
    }

    /// Mask over every stored row: causal on the committed prefix, ancestor
    /// closure plus the whole prefix on the staged forest.
    pub fn build_tree_mask(&self) -> TreeMask {
        let size = self.len();
        let mut allowed = vec![false; size * size];
        for q in 0..size {
            let row = &mut allowed[q * size..(q + 1) * size];
            if q < self.committed {
                row[..=q].fill(true);
                continue;
            }
            row[..self.committed].fill(true);
            row[q] = true;
            let mut cur = self.parents[q - self.committed];
            while let Some(p) = cur {
                row[p] = true;
                cur = self.parents[p - self.committed];
            }
        }
        TreeMask { size, allowed }
    }

    /// Moves the staged rows along `path` (a root-to-node chain) into the
    /// committed region in order and drops every other staged row.
    pub fn commit_path(&mut self, path: &[usize]) -> Result<()> {
        let mut expected_parent = None;
        for &row in path {
            if row < self.committed || row >= self.len() {
                return Err(Error::Structural(format!("row {row} is not staged")));
            }
            if self.parents[row - self.committed] != expected_parent {
                return Err(Error::Structural(format!(
                    "path is not a chain from the committed tail at row {row}"
                )));
            }
            expected_parent = Some(row);
        }
        for layer in &mut self.layers {
            for (i, &row) in path.iter().enumerate() {
                layer.copy_row(row, self.committed + i);
            }
        }
        self.committed += path.len();
        self.truncate_to_committed();
        Ok(())
    }

    /// Drops every staged row.
    pub fn discard_staged(&mut self) {
        self.truncate_to_committed();
    }

    fn truncate_to_committed(&mut self) {
        for layer in &mut self.layers {
            layer.truncate(self.committed);
        }
        self.parents.clear();
        self.positions.truncate(self.committed);
        for (i, p) in self.positions.iter_mut().enumerate() {
            *p = i;
        }
    }

    /// Writes consecutive rows of one layer.
    pub fn write_rows(&mut self, layer: usize, start: usize, k: &Matrix, v: &Matrix) -> Result<()> {
        self.layers[layer].write_rows(start, k, v)
    }

    /// Replaces committed rows of one layer with precisely computed keys and
    /// values (row `i` of `k`/`v` goes to `positions[i]`) and clears their
    /// fuzzy flag.
    pub fn calibrate_overwrite(
        &mut self,
        layer: usize,
        positions: &[usize],
        k: &Matrix,
        v: &Matrix,
    ) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Structural(format!("layer {layer} out of range")));
        }
        if k.rows() != positions.len() || v.rows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} positions for {} key rows and {} value rows",
                positions.len(),
                k.rows(),
                v.rows()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.committed) {
            return Err(Error::Structural(format!(
                "position {bad} is outside the committed region ({})",
                self.committed
            )));
        }
        let kv = &mut self.layers[layer];
        if k.cols() != kv.width || v.cols() != kv.width {
            return Err(Error::Shape(format!("kv width {} vs {}", k.cols(), kv.width)));
        }
        let w = kv.width;
        for (i, &p) in positions.iter().enumerate() {
            kv.keys[p * w..(p + 1) * w].copy_from_slice(k.row(i));
            kv.values[p * w..(p + 1) * w].copy_from_slice(v.row(i));
            kv.fuzzy[p] = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ancestor_sets_oracle(parents: &[Option<usize>], committed: usize) -> Vec<Vec<usize>> {
        // Brute force: walk parent links from each node independently.
        let total = committed + parents.len();
        (0..total)
            .map(|q| {
                if q < committed {
                    return (0..=q).collect();
                }
                let mut set: Vec<usize> = (0..committed).collect();
                set.push(q);
                let mut cur = parents[q - committed];
                while let Some(p) = cur {
                    set.push(p);
                    cur = parents[p - committed];
                }
                set.sort_unstable();
                set
            })
            .collect()
    }

    fn mask_rows(mask: &TreeMask) -> Vec<Vec<usize>> {
        (0..mask.size()).map(|q| mask.visible(q).collect()).collect()
    }

    #[test]
    fn first_staged_node_hangs_off_tail() {
        let mut c = KvCache::new(2, 4);
        assert_eq!(c.stage_append(&[None], true).unwrap(), vec![0]);
        assert_eq!(c.parent_of(0), None);
        assert_eq!(c.position(0), 0);
    }

    #[test]
    fn chain_parents_and_positions() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(3, false).unwrap();
        let idx = c.stage_append(&[None, Some(3), Some(4)], true).unwrap();
        assert_eq!(idx, vec![3, 4, 5]);
        assert_eq!(
            (3..6).map(|r| c.parent_of(r)).collect::<Vec<_>>(),
            vec![None, Some(3), Some(4)]
        );
        assert_eq!(c.positions(3..6), &[3, 4, 5]);
    }

    #[test]
    fn bad_parent_is_structural_error() {
        let mut c = KvCache::new(1, 2);
        assert!(matches!(c.stage_append(&[Some(0)], true), Err(Error::Structural(_))));
        c.extend_committed(2, false).unwrap();
        assert!(matches!(c.stage_append(&[Some(1)], true), Err(Error::Structural(_))));
    }

    #[test]
    fn siblings_do_not_see_each_other() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(2, false).unwrap();
        c.stage_append(&[None, None], true).unwrap();
        let mask = c.build_tree_mask();
        assert!(!mask.allowed(2, 3) && !mask.allowed(3, 2));
        assert_eq!(mask_rows(&mask), ancestor_sets_oracle(&[None, None], 2));
        assert_eq!(c.position(2), c.position(3));
    }

    #[test]
    fn chain_mask_is_causal() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(2, false).unwrap();
        c.stage_append(&[None, Some(2), Some(3)], true).unwrap();
        let mask = c.build_tree_mask();
        for q in 0..5 {
            for k in 0..5 {
                assert_eq!(mask.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn branching_tree_mask_matches_enumeration() {
        // Root with two children, each with two children.
        let parents = [None, None, Some(3), Some(3), Some(4), Some(4)];
        let mut c = KvCache::new(1, 2);
        c.extend_committed(3, false).unwrap();
        c.stage_append(&parents, true).unwrap();
        assert_eq!(mask_rows(&c.build_tree_mask()), ancestor_sets_oracle(&parents, 3));
    }

    #[test]
    fn empty_staged_region_gives_causal_prefix() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(4, false).unwrap();
        let mask = c.build_tree_mask();
        assert_eq!(mask_rows(&mask), ancestor_sets_oracle(&[], 4));
    }

    #[test]
    fn random_forests_match_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(11);
        for _ in 0..200 {
            let committed = rng.gen_range(0..6);
            let n = rng.gen_range(1..=64);
            let parents: Vec<Option<usize>> = (0..n)
                .map(|i| {
                    if i == 0 || rng.gen_bool(0.2) {
                        None
                    } else {
                        Some(committed + rng.gen_range(0..i))
                    }
                })
                .collect();
            let mut c = KvCache::new(1, 1);
            c.extend_committed(committed, false).unwrap();
            c.stage_append(&parents, true).unwrap();
            assert_eq!(mask_rows(&c.build_tree_mask()), ancestor_sets_oracle(&parents, committed));
        }
    }

    fn tagged(v: f32, width: usize) -> Matrix {
        Matrix::from_vec(1, width, vec![v; width]).unwrap()
    }

    #[test]
    fn commit_path_compacts_the_chain() {
        let mut c = KvCache::new(2, 2);
        c.extend_committed(1, false).unwrap();
        // Width-4 tree of depth 3: four roots, first root has a chain below it.
        let idx = c.stage_append(&[None, None, None, None, Some(1), Some(5)], true).unwrap();
        for &r in &idx {
            for l in 0..2 {
                c.write_rows(l, r, &tagged(r as f32, 2), &tagged(-(r as f32), 2)).unwrap();
            }
        }
        c.commit_path(&[1, 5, 6]).unwrap();
        assert_eq!(c.committed_len(), 4);
        assert_eq!(c.staged_len(), 0);
        assert_eq!(c.layer(1).key(1), &[1.0, 1.0]);
        assert_eq!(c.layer(1).key(2), &[5.0, 5.0]);
        assert_eq!(c.layer(0).value(3), &[-6.0, -6.0]);
        assert_eq!(c.positions(0..4), &[0, 1, 2, 3]);
    }

    #[test]
    fn commit_path_rejects_non_chain() {
        let mut c = KvCache::new(1, 1);
        c.stage_append(&[None, None, Some(0)], true).unwrap();
        assert!(matches!(c.commit_path(&[1, 2]), Err(Error::Structural(_))));
        assert!(matches!(c.commit_path(&[2]), Err(Error::Structural(_))));
    }

    #[test]
    fn discard_leaves_no_fuzzy_rows() {
        let mut c = KvCache::new(3, 2);
        c.extend_committed(2, false).unwrap();
        c.stage_append(&[None, Some(2), None], true).unwrap();
        assert_eq!(c.fuzzy_rows(), 3);
        c.discard_staged();
        assert_eq!(c.fuzzy_rows(), 0);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn calibrate_overwrite_round_trips_and_clears_flags() {
        let mut c = KvCache::new(2, 3);
        c.extend_committed(3, true).unwrap();
        let k = Matrix::from_rows(&[[1.5, 2.5, -3.0], [0.25, 0.0, 9.0]]).unwrap();
        let v = Matrix::from_rows(&[[7.0, 8.0, 9.0], [1.0, 2.0, 3.0]]).unwrap();
        c.calibrate_overwrite(1, &[0, 2], &k, &v).unwrap();
        assert_eq!(c.layer(1).key(0), k.row(0));
        assert_eq!(c.layer(1).key(2), k.row(1));
        assert_eq!(c.layer(1).value(2), v.row(1));
        assert!(!c.layer(1).is_fuzzy(0) && c.layer(1).is_fuzzy(1));
        assert!(c.layer(0).is_fuzzy(0));
    }

    #[test]
    fn calibrate_zero_positions_is_noop() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(2, true).unwrap();
        let before = c.clone();
        c.calibrate_overwrite(0, &[], &Matrix::zeros(0, 2), &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn calibrate_rejects_positions_outside_committed() {
        let mut c = KvCache::new(1, 2);
        c.extend_committed(1, false).unwrap();
        c.stage_append(&[None], true).unwrap();
        let m = tagged(1.0, 2);
        assert!(matches!(c.calibrate_overwrite(0, &[1], &m, &m), Err(Error::Structural(_))));
    }
}
