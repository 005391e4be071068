//! Toy decoder-only transformer with named, selectable weight matrices.
//!
//! The model exists to be taken apart: every projection is addressable by a
//! hierarchical name (`block2.key`, `block0.ff_in`, ...), the forward pass
//! accepts additive offsets at any projection's pre-bias output, and the
//! reverse pass exposes "taps" — the activation entering a matrix together
//! with the loss gradient at its pre-bias output. Layers compute
//! `y_t = A·x_t + b` per token, so a matrix of role `r` has shape
//! `d_out(r) × d_in(r)`.
//!
//! Weights are immutable during attribution and evaluation; training is the
//! only writer.

mod backward;
mod checkpoint;
mod forward;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::scalar::{real, Scalar};

pub use backward::TapRecord;
pub use checkpoint::{fingerprint, load_checkpoint, model_bytes, save_model, save_pruned, Checkpoint};
pub use forward::loss;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("token id {id} at position {position} exceeds vocab size {vocab_size}")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },
    #[error("expected {want} tokens, got {got}")]
    WrongSeqLen { got: usize, want: usize },
    #[error("answer position {pos} out of range for seq_len {seq_len}")]
    BadAnswerPos { pos: usize, seq_len: usize },
    #[error("selector '{0}' matches no matrix")]
    EmptySelection(String),
    #[error("unknown matrix '{0}'")]
    UnknownMatrix(String),
    #[error("offset for '{name}' has shape {got}, expected {want}")]
    BadOffsetShape {
        name: String,
        got: String,
        want: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not an EPCK checkpoint")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {found}")]
    UnsupportedVersion { path: String, found: u32 },
    #[error("{path}: corrupt checkpoint: {detail}")]
    CorruptCheckpoint { path: String, detail: String },
}

/// Architecture hyperparameters. Sequence length is fixed per model; inputs
/// of any other length are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Roles a selectable weight matrix can play inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

pub const ALL_ROLES: [Role; 6] = [
    Role::Query,
    Role::Key,
    Role::Value,
    Role::Output,
    Role::FfIn,
    Role::FfOut,
];

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Key => "key",
            Role::Value => "value",
            Role::Output => "output",
            Role::FfIn => "ff_in",
            Role::FfOut => "ff_out",
        }
    }

    /// (d_in, d_out) under the `y = A·x` convention.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Role::Query | Role::Key | Role::Value | Role::Output => (cfg.d_model, cfg.d_model),
            Role::FfIn => (cfg.d_model, cfg.d_ff),
            Role::FfOut => (cfg.d_ff, cfg.d_model),
        }
    }
}

impl FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        ALL_ROLES
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ModelError::EmptySelection(s.to_string()))
    }
}

/// Chooses the set of matrices the pipeline operates on: a role (or `all`)
/// plus an optional block-index subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixSelector {
    pub roles: Vec<Role>,
    pub blocks: Option<BTreeSet<usize>>,
}

impl MatrixSelector {
    pub fn all() -> Self {
        Self {
            roles: ALL_ROLES.to_vec(),
            blocks: None,
        }
    }

    pub fn role(role: Role) -> Self {
        Self {
            roles: vec![role],
            blocks: None,
        }
    }

    /// Selected matrix names in deterministic (block, role) order.
    pub fn select(&self, cfg: &ModelConfig) -> Result<Vec<String>, ModelError> {
        let mut names = Vec::new();
        for block in 0..cfg.n_layers {
            if let Some(blocks) = &self.blocks {
                if !blocks.contains(&block) {
                    continue;
                }
            }
            for role in ALL_ROLES {
                if self.roles.contains(&role) {
                    names.push(format!("block{block}.{}", role.as_str()));
                }
            }
        }
        if names.is_empty() {
            return Err(ModelError::EmptySelection(self.to_string()));
        }
        Ok(names)
    }
}

impl fmt::Display for MatrixSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.roles.len() == ALL_ROLES.len() {
            write!(f, "all")?;
        } else {
            let names: Vec<&str> = self.roles.iter().map(|r| r.as_str()).collect();
            write!(f, "{}", names.join("+"))?;
        }
        if let Some(blocks) = &self.blocks {
            let ids: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
            write!(f, ":{}", ids.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for MatrixSelector {
    type Err = ModelError;

    /// Accepts `key`, `all`, `query+value`, or `key:0,2` (role list plus
    /// block subset).
    fn from_str(s: &str) -> Result<Self, ModelError> {
        let (role_part, block_part) = match s.split_once(':') {
            Some((r, b)) => (r, Some(b)),
            None => (s, None),
        };
        let roles = if role_part == "all" {
            ALL_ROLES.to_vec()
        } else {
            role_part
                .split('+')
                .map(Role::from_str)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ModelError::EmptySelection(s.to_string()))?
        };
        let blocks = match block_part {
            None => None,
            Some(b) => Some(
                b.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| ModelError::EmptySelection(s.to_string()))
                    })
                    .collect::<Result<BTreeSet<_>, _>>()?,
            ),
        };
        if roles.is_empty() {
            return Err(ModelError::EmptySelection(s.to_string()));
        }
        Ok(Self { roles, blocks })
    }
}

fn role_of_selectable(name: &str) -> Option<Role> {
    let (_, role) = name.split_once('.')?;
    Role::from_str(role).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every parameter tensor in declaration order: name, shape, init rule.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let mut layout = vec![
        ("tok_emb".to_string(), (cfg.vocab_size, d), Init::Normal),
        ("pos_emb".to_string(), (cfg.seq_len, d), Init::Normal),
    ];
    for i in 0..cfg.n_layers {
        let p = |suffix: &str| format!("block{i}.{suffix}");
        layout.push((p("ln1.gain"), (1, d), Init::Ones));
        layout.push((p("ln1.bias"), (1, d), Init::Zeros));
        for role in [Role::Query, Role::Key, Role::Value, Role::Output] {
            let (d_in, d_out) = role.dims(cfg);
            layout.push((p(&format!("{}.w", role.as_str())), (d_out, d_in), Init::Normal));
            layout.push((p(&format!("{}.b", role.as_str())), (1, d_out), Init::Zeros));
        }
        layout.push((p("ln2.gain"), (1, d), Init::Ones));
        layout.push((p("ln2.bias"), (1, d), Init::Zeros));
        for role in [Role::FfIn, Role::FfOut] {
            let (d_in, d_out) = role.dims(cfg);
            layout.push((p(&format!("{}.w", role.as_str())), (d_out, d_in), Init::Normal));
            layout.push((p(&format!("{}.b", role.as_str())), (1, d_out), Init::Zeros));
        }
    }
    layout.push(("final_ln.gain".to_string(), (1, d), Init::Ones));
    layout.push(("final_ln.bias".to_string(), (1, d), Init::Zeros));
    layout.push(("unembed.w".to_string(), (cfg.vocab_size, d), Init::Normal));
    layout
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T: Scalar = f64> {
    config: ModelConfig,
    params: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Deterministic initialization: projections and embeddings are drawn
    /// from Normal(0, 0.02) in a fixed order from a ChaCha stream seeded by
    /// `config.seed`; biases start at zero and layer-norm gains at one.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid distribution");
        let mut params = BTreeMap::new();
        for (name, (rows, cols), init) in param_layout(&config) {
            let data = match init {
                Init::Normal => (0..rows * cols)
                    .map(|_| real::<T>(normal.sample(&mut rng)))
                    .collect(),
                Init::Zeros => vec![T::zero(); rows * cols],
                Init::Ones => vec![T::one(); rows * cols],
            };
            params.insert(name, Matrix::new(rows, cols, data).expect("layout shape"));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(
        config: ModelConfig,
        params: BTreeMap<String, Matrix<T>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in layout {
            let m = params
                .get(&name)
                .ok_or_else(|| ModelError::UnknownMatrix(name.clone()))?;
            if m.shape() != shape {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )));
            }
            m.validate_finite()?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Matrix<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Matrix<T>> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Matrix<T>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::UnknownMatrix(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Matrix<T>, ModelError> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownMatrix(name.to_string()))
    }

    /// Weight matrix behind a selectable name like `block0.key`.
    pub fn weight(&self, selectable: &str) -> Result<&Matrix<T>, ModelError> {
        if role_of_selectable(selectable).is_none() {
            return Err(ModelError::UnknownMatrix(selectable.to_string()));
        }
        self.param(&format!("{selectable}.w"))
            .map_err(|_| ModelError::UnknownMatrix(selectable.to_string()))
    }

    /// Zero-filled gradient (or accumulator) map matching the parameters.
    pub fn zero_like_params(&self) -> BTreeMap<String, Matrix<T>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
            .collect()
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.len() != self.config.seq_len {
            return Err(ModelError::WrongSeqLen {
                got: tokens.len(),
                want: self.config.seq_len,
            });
        }
        for (position, &id) in tokens.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    position,
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Logits for all positions, `seq_len x vocab_size`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix<T>, ModelError> {
        self.forward_with_offsets(tokens, &BTreeMap::new())
    }

    /// Forward pass with additive offsets at selected pre-bias outputs.
    /// Each offset is `seq_len x d_out` keyed by a selectable matrix name;
    /// the frozen-bias deltas of a pruned model and the exact-patching
    /// oracle both enter through here.
    pub fn forward_with_offsets(
        &self,
        tokens: &[usize],
        offsets: &BTreeMap<String, Matrix<T>>,
    ) -> Result<Matrix<T>, ModelError> {
        Ok(self.forward_cached(tokens, offsets)?.logits)
    }

    /// Loss plus one [`TapRecord`] per selected matrix from a single
    /// reverse pass. `G` at matrix `A` is the gradient of the loss with
    /// respect to `A·x` per token position, which by linearity is also the
    /// gradient with respect to every `E_i·x`.
    pub fn backward_with_taps(
        &self,
        tokens: &[usize],
        target: usize,
        answer_pos: usize,
        selector: &MatrixSelector,
    ) -> Result<(T, BTreeMap<String, TapRecord<T>>), ModelError> {
        let names: BTreeSet<String> = selector.select(&self.config)?.into_iter().collect();
        let (loss, taps, _) = self.backprop(tokens, target, answer_pos, Some(&names), None)?;
        Ok((loss, taps))
    }

    /// Accumulates parameter gradients for one example into `grads`
    /// (shaped like [`Self::zero_like_params`]) and returns the loss.
    pub fn accumulate_grads(
        &self,
        tokens: &[usize],
        target: usize,
        answer_pos: usize,
        grads: &mut BTreeMap<String, Matrix<T>>,
    ) -> Result<T, ModelError> {
        let (loss, _, _) = self.backprop(tokens, target, answer_pos, None, Some(grads))?;
        Ok(loss)
    }
}

/// A model whose selected matrices have been rewritten as `A' = A − Σ E_i`
/// with the removed terms' mean effect folded into a token-indexed bias
/// delta (`seq_len x d_out` per modified matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel<T: Scalar = f64> {
    pub model: TransformerModel<T>,
    pub delta_b: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> PrunedModel<T> {
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix<T>, ModelError> {
        self.model.forward_with_offsets(tokens, &self.delta_b)
    }
}

/// Anything that maps a token sequence to per-position logits; lets the
/// evaluator score base models, pruned models, and test stand-ins alike.
pub trait Forwardable<T: Scalar> {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix<T>, ModelError>;
}

impl<T: Scalar> Forwardable<T> for TransformerModel<T> {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix<T>, ModelError> {
        self.forward(tokens)
    }
}

impl<T: Scalar> Forwardable<T> for PrunedModel<T> {
    fn logits(&self, tokens: &[usize]) -> Result<Matrix<T>, ModelError> {
        self.forward(tokens)
    }
}

#[cfg(test)]
mod tests;
