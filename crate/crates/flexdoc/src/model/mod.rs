//! The document network: per-attribute encoders summed per element, stacked
//! transformer blocks over element embeddings, and per-attribute decoder
//! heads.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{BatchPrep, Model};

use indexmap::IndexMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AttributeKind, Schema, MAX_ELEMENTS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Learnable per-position table added to the element embeddings. Only
    /// useful for schemas where otherwise-identical elements must be told
    /// apart; breaks permutation equivariance.
    pub use_positional_embedding: bool,
    /// Task-specific query embedding prepended as an extra sequence
    /// position and dropped before decoding.
    pub use_task_embedding: bool,
    /// Size of the task-embedding table (number of distinct tasks).
    pub num_tasks: usize,
    /// Self-attention can be disabled to measure its contribution; blocks
    /// then reduce to per-element feed-forward layers.
    pub use_attention: bool,
    pub max_elements: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_model: 256,
            num_layers: 4,
            num_heads: 8,
            ffn_dim: 1024,
            dropout: 0.1,
            use_positional_embedding: false,
            use_task_embedding: false,
            num_tasks: 5,
            use_attention: true,
            max_elements: MAX_ELEMENTS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidArgument("model config: dimensions must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model config: d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "model config: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.use_task_embedding && self.num_tasks == 0 {
            return Err(Error::InvalidArgument(
                "model config: task embedding enabled with num_tasks = 0".into(),
            ));
        }
        if self.max_elements == 0 {
            return Err(Error::InvalidArgument("model config: max_elements must be positive".into()));
        }
        Ok(())
    }

    /// A small configuration that trains in seconds; used by tests and the
    /// synthetic benchmark.
    pub fn small() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            num_layers: 4,
            num_heads: 8,
            ffn_dim: 256,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    /// Whether L2 weight decay applies. Embedding tables and layer-norm
    /// parameters are excluded.
    pub decay: bool,
}

/// Named tensors for all embeddings, transformer weights, and decoder
/// heads. Insertion order is the canonical parameter order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Param>,
}

impl ParameterStore {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Param { tensor, decay });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copies of all tensors keyed by name (for the gradient checker).
    pub fn tensors(&self) -> IndexMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.tensor.clone()))
            .collect()
    }

    pub fn set_tensors(&mut self, tensors: &IndexMap<String, Tensor>) {
        for (name, tensor) in tensors {
            let slot = self.get_mut(name);
            assert_eq!(slot.shape(), tensor.shape(), "shape mismatch for `{name}`");
            *slot = tensor.clone();
        }
    }

    /// Rounds every parameter to f32 precision; see checkpoint format.
    pub fn quantize_f32(&mut self) {
        for (_, param) in self.entries.iter_mut() {
            param.tensor.quantize_f32();
        }
    }
}

/// Builds the full parameter set for a schema/config pair.
pub fn init_params(schema: &Schema, config: &ModelConfig, seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::default();
    let d = config.d_model;

    let embedding = |store: &mut ParameterStore, name: String, rows: usize, rng: &mut ChaCha8Rng| {
        store.insert(name, Tensor::uniform(vec![rows, d], 0.05, rng), false);
    };
    let xavier = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();

    // encoders
    for spec in schema.attributes() {
        match spec.kind {
            AttributeKind::Categorical { cardinality } => {
                // two extra rows for [NULL] and [MASK]
                embedding(&mut store, format!("enc.{}.table", spec.name), cardinality + 2, &mut rng);
            }
            AttributeKind::Numerical { dim } => {
                store.insert(
                    format!("enc.{}.proj", spec.name),
                    Tensor::uniform(vec![dim, d], xavier(dim, d), &mut rng),
                    true,
                );
                embedding(&mut store, format!("enc.{}.special", spec.name), 2, &mut rng);
            }
        }
    }
    if config.use_positional_embedding {
        embedding(&mut store, "enc.pos.table".to_string(), config.max_elements, &mut rng);
    }
    if config.use_task_embedding {
        embedding(&mut store, "enc.task.table".to_string(), config.num_tasks, &mut rng);
    }

    // transformer blocks
    for l in 0..config.num_layers {
        if config.use_attention {
            store.insert(format!("layer{l}.ln1.gamma"), Tensor::new(vec![d], vec![1.0; d]), false);
            store.insert(format!("layer{l}.ln1.beta"), Tensor::zeros(vec![d]), false);
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    format!("layer{l}.attn.{w}"),
                    Tensor::uniform(vec![d, d], xavier(d, d), &mut rng),
                    true,
                );
                store.insert(format!("layer{l}.attn.b{}", &w[1..]), Tensor::zeros(vec![d]), true);
            }
        }
        store.insert(format!("layer{l}.ln2.gamma"), Tensor::new(vec![d], vec![1.0; d]), false);
        store.insert(format!("layer{l}.ln2.beta"), Tensor::zeros(vec![d]), false);
        store.insert(
            format!("layer{l}.ffn.w1"),
            Tensor::uniform(vec![d, config.ffn_dim], xavier(d, config.ffn_dim), &mut rng),
            true,
        );
        store.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![config.ffn_dim]), true);
        store.insert(
            format!("layer{l}.ffn.w2"),
            Tensor::uniform(vec![config.ffn_dim, d], xavier(config.ffn_dim, d), &mut rng),
            true,
        );
        store.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![d]), true);
    }
    store.insert("final_ln.gamma", Tensor::new(vec![d], vec![1.0; d]), false);
    store.insert("final_ln.beta", Tensor::zeros(vec![d]), false);

    // decoder heads predict only real categories, never special tokens
    for spec in schema.attributes() {
        let out_dim = match spec.kind {
            AttributeKind::Categorical { cardinality } => cardinality,
            AttributeKind::Numerical { dim } => dim,
        };
        store.insert(
            format!("dec.{}.w", spec.name),
            Tensor::uniform(vec![d, out_dim], xavier(d, out_dim), &mut rng),
            true,
        );
        store.insert(format!("dec.{}.b", spec.name), Tensor::zeros(vec![out_dim]), true);
    }
    store
}
