//! Toy decoder-only transformer: configuration, weights, seeded init and
//! drafter derivation by truncation.

mod forward;
mod io;

pub use forward::{AttnParts, LayerIO};
pub use io::{load_model, read_model, save_model, write_model, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Matrix, DEFAULT_NORM_EPS};
use crate::tokenizer::VOCAB_SIZE;

/// How projection weights are drawn at init.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    /// Every tensor ~ N(0, (std/√nLayers)²), embedding included.
    Scaled { std: f32 },
    /// Embedding ~ N(0, embed_std²); projections ~ N(0, (gain/√dModel)²);
    /// residual-output projections (Wo, Wdown) further divided by √nLayers.
    FanIn { embed_std: f32, gain: f32 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::FanIn { embed_std: 1.0, gain: 1.5 }
    }
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_eps() -> f32 {
    DEFAULT_NORM_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    pub seed: u64,
    #[serde(default)]
    pub init: InitScheme,
}

impl ModelConfig {
    /// The desk-scale shape used throughout the tests and the CLI defaults:
    /// width 32, 4 heads of 8, MLP width 64, byte vocabulary.
    pub fn toy(n_layers: usize, seed: u64) -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers,
            n_heads: 4,
            d_head: 8,
            d_mlp: 64,
            max_positions: 1024,
            norm_eps: DEFAULT_NORM_EPS,
            seed,
            init: InitScheme::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_mlp == 0 || self.max_positions == 0 {
            return fail("vocab_size, d_model, d_mlp and max_positions must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.d_head == 0 || self.d_head % 2 != 0 {
            return fail(format!("d_head {} must be even", self.d_head));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers {} must be at least 2", self.n_layers));
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps {} must be positive", self.norm_eps));
        }
        let stds_ok = match self.init {
            InitScheme::Scaled { std } => std.is_finite() && std >= 0.0,
            InitScheme::FanIn { embed_std, gain } => {
                embed_std.is_finite() && embed_std >= 0.0 && gain.is_finite() && gain >= 0.0
            }
        };
        if !stds_ok {
            return fail("init scales must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm: Vec<f32>,
    pub mlp_norm: Vec<f32>,
}

/// All parameters. Projections are stored input-major so `y = x · W`; the
/// LM head is the embedding table itself.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub final_norm: Vec<f32>,
    pub layers: Vec<LayerWeights>,
}

/// Tensor names and shapes in file order.
pub(crate) fn manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, m) = (config.d_model, config.d_mlp);
    let mut out = vec![("embedding".to_string(), vec![config.vocab_size, d])];
    for i in 0..config.n_layers {
        for (name, shape) in [
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("w_gate", vec![d, m]),
            ("w_up", vec![d, m]),
            ("w_down", vec![m, d]),
            ("attn_norm", vec![d]),
            ("mlp_norm", vec![d]),
        ] {
            out.push((format!("layers.{i}.{name}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out
}

impl WeightStore {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tensors in manifest order.
    pub(crate) fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                l.w_gate.data(),
                l.w_up.data(),
                l.w_down.data(),
                &l.attn_norm[..],
                &l.mlp_norm[..],
            ]);
        }
        out.push(&self.final_norm);
        out
    }

    /// Concatenated little-endian bytes of every tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors().iter().flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic weights from `config.seed`. Norm gains start at one.
pub fn init_model(config: &ModelConfig) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = SeededRng::new(config.seed);
    let (d, m, l) = (config.d_model, config.d_mlp, config.n_layers as f32);
    let (embed_std, proj_std, resid_std) = match config.init {
        InitScheme::Scaled { std } => {
            let s = std / l.sqrt();
            (s, s, s)
        }
        InitScheme::FanIn { embed_std, gain } => {
            let p = gain / (d as f32).sqrt();
            (embed_std, p, p / l.sqrt())
        }
    };
    let mut normal = |rows: usize, cols: usize, std: f32| {
        let data = (0..rows * cols).map(|_| rng.normal(std)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized buffer")
    };
    let embedding = normal(config.vocab_size, d, embed_std);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: normal(d, d, proj_std),
            wk: normal(d, d, proj_std),
            wv: normal(d, d, proj_std),
            wo: normal(d, d, resid_std),
            w_gate: normal(d, m, proj_std),
            w_up: normal(d, m, proj_std),
            w_down: normal(m, d, resid_std),
            attn_norm: vec![1.0; d],
            mlp_norm: vec![1.0; d],
        })
        .collect();
    Ok(WeightStore { config: config.clone(), embedding, final_norm: vec![1.0; d], layers })
}

/// Drafter made of the base's embedding, final norm, tied head and first
/// `keep_layers` blocks.
pub fn make_truncated_draft(base: &WeightStore, keep_layers: usize) -> Result<WeightStore> {
    if keep_layers < 2 || keep_layers >= base.n_layers() {
        return Err(Error::Config(format!(
            "keep_layers {keep_layers} must be in 2..{}",
            base.n_layers()
        )));
    }
    let mut config = base.config.clone();
    config.n_layers = keep_layers;
    Ok(WeightStore {
        config,
        embedding: base.embedding.clone(),
        final_norm: base.final_norm.clone(),
        layers: base.layers[..keep_layers].to_vec(),
    })
}
