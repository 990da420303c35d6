//! Per-layer kernels of the toy transformer.

use std::ops::Range;

use super::WeightStore;
use crate::error::{Error, Result};
use crate::kv_cache::{LayerKv, TreeMask};
use crate::tensor::{apply_rope, matmul, matmul_transposed, rms_norm_rows, Matrix};

/// Hidden states around one block: `h_mid = h_in + attn_out`,
/// `h_out = h_mid + MLP(h_mid)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerIO {
    pub h_in: Matrix,
    pub attn_out: Matrix,
    pub h_mid: Matrix,
    pub h_out: Matrix,
}

/// Intermediate attention tensors (queries and keys after rotation).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParts {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub out: Matrix,
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl WeightStore {
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Config(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Matrix::from_vec(tokens.len(), d, data)
    }

    pub fn check_positions(&self, positions: &[usize]) -> Result<()> {
        let max = self.config.max_positions;
        match positions.iter().find(|&&p| p >= max) {
            Some(&position) => Err(Error::PositionOverflow { position, max }),
            None => Ok(()),
        }
    }

    /// Queries, keys (both rotated) and values for normalized inputs.
    pub fn project_qkv(
        &self,
        layer: usize,
        h_norm: &Matrix,
        positions: &[usize],
    ) -> Result<(Matrix, Matrix, Matrix)> {
        self.check_positions(positions)?;
        let w = &self.layers[layer];
        let hd = self.config.d_head;
        let q = apply_rope(&matmul(h_norm, &w.wq)?, positions, hd)?;
        let k = apply_rope(&matmul(h_norm, &w.wk)?, positions, hd)?;
        let v = matmul(h_norm, &w.wv)?;
        Ok((q, k, v))
    }

    /// Multi-head attention of query rows `rows` over the visible keys in
    /// `kv`, concatenated over heads (before the output projection).
    pub fn attend(&self, q: &Matrix, kv: &LayerKv, rows: Range<usize>, mask: &TreeMask) -> Result<Matrix> {
        if q.rows() != rows.len() {
            return Err(Error::Shape(format!("{} queries for {} rows", q.rows(), rows.len())));
        }
        if rows.end > kv.rows() || rows.end > mask.size() {
            return Err(Error::Structural(format!(
                "query rows up to {} exceed cache ({}) or mask ({})",
                rows.end,
                kv.rows(),
                mask.size()
            )));
        }
        let (heads, hd) = (self.config.n_heads, self.config.d_head);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = Matrix::zeros(q.rows(), self.config.d_model);
        let mut keys = Vec::new();
        let mut scores = Vec::new();
        for (i, row) in rows.enumerate() {
            keys.clear();
            keys.extend(mask.visible(row));
            let qrow = q.row(i);
            let orow = out.row_mut(i);
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                let qh = &qrow[span.clone()];
                scores.clear();
                let mut max = f32::NEG_INFINITY;
                for &j in &keys {
                    let kh = &kv.key(j)[span.clone()];
                    let mut s = 0.0f32;
                    for (a, b) in qh.iter().zip(kh) {
                        s += a * b;
                    }
                    s *= scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut sum = 0.0f32;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let oh = &mut orow[span.clone()];
                for (&j, &s) in keys.iter().zip(&scores) {
                    let w = s / sum;
                    for (o, v) in oh.iter_mut().zip(&kv.value(j)[span.clone()]) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Attention for rows `rows` whose normalized inputs are `h_norm`. The
    /// new keys and values are written into `kv` before attending.
    pub fn attention_parts(
        &self,
        layer: usize,
        h_norm: &Matrix,
        kv: &mut LayerKv,
        rows: Range<usize>,
        positions: &[usize],
        mask: &TreeMask,
    ) -> Result<AttnParts> {
        let (q, k, v) = self.project_qkv(layer, h_norm, positions)?;
        kv.write_rows(rows.start, &k, &v)?;
        let ctx = self.attend(&q, kv, rows, mask)?;
        let out = matmul(&ctx, &self.layers[layer].wo)?;
        Ok(AttnParts { q, k, v, out })
    }

    pub fn attention_forward(
        &self,
        layer: usize,
        h_norm: &Matrix,
        kv: &mut LayerKv,
        rows: Range<usize>,
        positions: &[usize],
        mask: &TreeMask,
    ) -> Result<Matrix> {
        Ok(self.attention_parts(layer, h_norm, kv, rows, positions, mask)?.out)
    }

    /// Gated MLP: `(silu(x·Wgate) ⊙ x·Wup) · Wdown`.
    pub fn mlp_forward(&self, layer: usize, h_norm: &Matrix) -> Result<Matrix> {
        let w = &self.layers[layer];
        let mut gate = matmul(h_norm, &w.w_gate)?;
        let up = matmul(h_norm, &w.w_up)?;
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        matmul(&gate, &w.w_down)
    }

    pub fn attn_norm(&self, layer: usize, h: &Matrix) -> Result<Matrix> {
        rms_norm_rows(h, &self.layers[layer].attn_norm, self.config.norm_eps)
    }

    /// Residual MLP step: `h_mid + MLP(norm(h_mid))`.
    pub fn mlp_residual(&self, layer: usize, h_mid: &Matrix) -> Result<Matrix> {
        let normed = rms_norm_rows(h_mid, &self.layers[layer].mlp_norm, self.config.norm_eps)?;
        h_mid.add(&self.mlp_forward(layer, &normed)?)
    }

    /// One full block on `h_in`.
    pub fn block_forward(
        &self,
        layer: usize,
        h_in: &Matrix,
        kv: &mut LayerKv,
        rows: Range<usize>,
        positions: &[usize],
        mask: &TreeMask,
    ) -> Result<LayerIO> {
        let normed = self.attn_norm(layer, h_in)?;
        let attn_out = self.attention_forward(layer, &normed, kv, rows, positions, mask)?;
        let h_mid = h_in.add(&attn_out)?;
        let h_out = self.mlp_residual(layer, &h_mid)?;
        Ok(LayerIO { h_in: h_in.clone(), attn_out, h_mid, h_out })
    }

    /// Final norm followed by the tied head: `norm(h) · embeddingᵀ`.
    pub fn lm_logits(&self, h_final: &Matrix) -> Result<Matrix> {
        let normed = rms_norm_rows(h_final, &self.final_norm, self.config.norm_eps)?;
        matmul_transposed(&normed, &self.embedding)
    }
}
