//! Byte-level tokenization, instruction templating and the prefix-conditioned
//! transformer encoder.
//!
//! The encoder is a pre-norm causal transformer. In every layer, path `i`
//! prepends its own `K × d` key and value rows to the projected keys and
//! values; these rows are visible to every query position and carry no
//! positional code. The path embedding is the final-norm hidden state at the
//! last real token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{param_tree, LeafFn, Norm, ParamKind};
use crate::tensor::{concat, DenseArray, Var};
use crate::{Error, Result};

const MASKED: f64 = -1e30;
pub const PREFIX_INIT_STD: f64 = 0.02;
const WEIGHT_INIT_STD: f64 = 0.02;

/// Byte vocabulary: token id = byte value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    pub max_len: usize,
}

impl TokenVocab {
    pub const SIZE: usize = 256;

    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    pub fn size(&self) -> usize {
        Self::SIZE
    }
}

/// Byte ids of `text`, truncated to `vocab.max_len`.
pub fn tokenize(text: &str, vocab: &TokenVocab) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot tokenize empty text".into()));
    }
    Ok(text.bytes().take(vocab.max_len).map(usize::from).collect())
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::OutOfRange(format!("token id {id}"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Instruction template for the query side. Targets are encoded as-is.
pub fn build_query_input(task_definition: &str, query: &str) -> Result<String> {
    if task_definition.is_empty() {
        return Err(Error::InvalidInput("empty task definition".into()));
    }
    if query.is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    Ok(format!("Instruct: {task_definition} Query: {query}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub num_paths: usize,
    pub prefix_len: usize,
    /// Intermediate width of the gated feed-forward block.
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: TokenVocab::SIZE,
            d_model: 64,
            layers: 4,
            heads: 4,
            max_len: 64,
            num_paths: 2,
            prefix_len: 20,
            ffn_hidden: 6 * 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be a positive multiple of heads");
        }
        if self.num_paths == 0 {
            return fail("num_paths must be at least 1");
        }
        if self.layers == 0 {
            return fail("layers must be at least 1");
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ffn_hidden == 0 {
            return fail("vocab_size, max_len and ffn_hidden must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn vocab(&self) -> TokenVocab {
        TokenVocab::new(self.max_len)
    }

    /// Trainable backbone scalars (excluding prefixes).
    pub fn backbone_param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d + 4 * d * d + 3 * d * self.ffn_hidden;
        self.vocab_size * d + self.max_len * d + self.layers * per_layer + 2 * d
    }

    pub fn prefix_param_count(&self) -> usize {
        2 * self.num_paths * self.layers * self.prefix_len * self.d_model
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: Norm<T>,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: Norm<T>,
    pub gate: T,
    pub up: T,
    pub down: T,
}

impl<T> Layer<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Layer<U> {
        let w = ParamKind::Weight;
        Layer {
            attn_norm: self.attn_norm.map(&format!("{path}.attn_norm"), f),
            wq: f(&format!("{path}.wq"), w, &self.wq),
            wk: f(&format!("{path}.wk"), w, &self.wk),
            wv: f(&format!("{path}.wv"), w, &self.wv),
            wo: f(&format!("{path}.wo"), w, &self.wo),
            ffn_norm: self.ffn_norm.map(&format!("{path}.ffn_norm"), f),
            gate: f(&format!("{path}.gate"), w, &self.gate),
            up: f(&format!("{path}.up"), w, &self.up),
            down: f(&format!("{path}.down"), w, &self.down),
        }
    }
}

/// Encoder weights shared by every path.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Norm<T>,
}

pub type BackboneParams = Backbone<DenseArray>;

param_tree!(Layer, "layer");
param_tree!(Backbone, "backbone");
param_tree!(PrefixBank, "prefix");

impl<T> Backbone<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> Backbone<U> {
        Backbone {
            token_embedding: f(&format!("{path}.token_embedding"), ParamKind::Embedding, &self.token_embedding),
            position_embedding: f(
                &format!("{path}.position_embedding"),
                ParamKind::Embedding,
                &self.position_embedding,
            ),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("{path}.layers.{l}"), f))
                .collect(),
            final_norm: self.final_norm.map(&format!("{path}.final_norm"), f),
        }
    }
}

impl BackboneParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_hidden;
        let mut w = |shape: &[usize]| DenseArray::randn(shape, WEIGHT_INIT_STD, &mut rng);
        let token_embedding = w(&[config.vocab_size, d]);
        let position_embedding = w(&[config.max_len, d]);
        let layers = (0..config.layers)
            .map(|_| Layer {
                attn_norm: Norm::new(d),
                wq: w(&[d, d]),
                wk: w(&[d, d]),
                wv: w(&[d, d]),
                wo: w(&[d, d]),
                ffn_norm: Norm::new(d),
                gate: w(&[d, f]),
                up: w(&[d, f]),
                down: w(&[f, d]),
            })
            .collect();
        Self { token_embedding, position_embedding, layers, final_norm: Norm::new(d) }
    }

    pub fn param_count(&self) -> usize {
        crate::nn::leaf_count(self)
    }
}

/// Per-path, per-layer key/value prefixes, indexed `path * layers + layer`.
///
/// Empty when the prefix length is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank<T> {
    pub num_paths: usize,
    pub layers: usize,
    pub prefix_len: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

impl<T> PrefixBank<T> {
    pub fn map<U>(&self, path: &str, f: &mut impl LeafFn<T, U>) -> PrefixBank<U> {
        let mut keys = Vec::with_capacity(self.keys.len());
        let mut values = Vec::with_capacity(self.values.len());
        for (idx, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            let (p, l) = (idx / self.layers, idx % self.layers);
            keys.push(f(&format!("{path}.{p}.{l}.key"), ParamKind::Prefix, k));
            values.push(f(&format!("{path}.{p}.{l}.value"), ParamKind::Prefix, v));
        }
        PrefixBank { num_paths: self.num_paths, layers: self.layers, prefix_len: self.prefix_len, keys, values }
    }

    fn index(&self, path: usize, layer: usize) -> Result<usize> {
        if path >= self.num_paths {
            return Err(Error::OutOfRange(format!("path {path} of {}", self.num_paths)));
        }
        if layer >= self.layers {
            return Err(Error::OutOfRange(format!("layer {layer} of {}", self.layers)));
        }
        Ok(path * self.layers + layer)
    }

    /// `(key, value)` prefix of one path and layer; `None` when the prefix length is zero.
    pub fn get(&self, path: usize, layer: usize) -> Result<Option<(&T, &T)>> {
        let idx = self.index(path, layer)?;
        Ok(self.keys.get(idx).zip(self.values.get(idx)))
    }
}

impl PrefixBank<DenseArray> {
    /// Gaussian init; each path draws from its own ChaCha stream of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let (n, m, k, d) = (config.num_paths, config.layers, config.prefix_len, config.d_model);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        if k > 0 {
            for p in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(p as u64 + 1);
                for _ in 0..m {
                    keys.push(DenseArray::randn(&[k, d], PREFIX_INIT_STD, &mut rng));
                    values.push(DenseArray::randn(&[k, d], PREFIX_INIT_STD, &mut rng));
                }
            }
        }
        Self { num_paths: n, layers: m, prefix_len: k, keys, values }
    }

    pub fn zero_path(&mut self, path: usize) -> Result<()> {
        for l in 0..self.layers {
            let idx = self.index(path, l)?;
            if let Some(k) = self.keys.get_mut(idx) {
                k.values_mut().fill(0.0);
            }
            if let Some(v) = self.values.get_mut(idx) {
                v.values_mut().fill(0.0);
            }
        }
        Ok(())
    }

    /// Copies path `from`'s prefixes onto path `to`.
    pub fn copy_path(&mut self, from: usize, to: usize) -> Result<()> {
        for l in 0..self.layers {
            let (src, dst) = (self.index(from, l)?, self.index(to, l)?);
            if src < self.keys.len() {
                self.keys[dst] = self.keys[src].clone();
                self.values[dst] = self.values[src].clone();
            }
        }
        Ok(())
    }
}

/// Encoder and prefixes bound to one tape.
#[derive(Clone, Copy)]
pub struct EncoderView<'a, 't> {
    pub config: &'a ModelConfig,
    pub backbone: &'a Backbone<Var<'t>>,
    pub prefixes: &'a PrefixBank<Var<'t>>,
}

/// `K' = [p_K; K]` and `V' = [p_V; V]`, each `(prefix_len + L) × d`.
pub fn augment_keys_values<'t>(
    keys: &Var<'t>,
    values: &Var<'t>,
    prefix: Option<(&Var<'t>, &Var<'t>)>,
) -> Result<(Var<'t>, Var<'t>)> {
    match prefix {
        Some((pk, pv)) => Ok((concat(&[*pk, *keys], 0)?, concat(&[*pv, *values], 0)?)),
        None => Ok((*keys, *values)),
    }
}

/// Additive mask over `[L, prefix_len + L]`: prefix columns open, real columns causal.
fn attention_mask(len: usize, prefix_len: usize) -> DenseArray {
    let width = prefix_len + len;
    let mut mask = DenseArray::zeros(&[len, width]);
    for t in 0..len {
        for s in (t + 1)..len {
            mask.values_mut()[t * width + prefix_len + s] = MASKED;
        }
    }
    mask
}

impl<'a, 't> EncoderView<'a, 't> {
    /// Self-attention of layer `layer` on already-normalized `hidden`
    /// (`L × d`), with path `path`'s prefixes prepended to keys and values.
    /// `path = None` runs without prefixes.
    pub fn attention_with_prefix(&self, hidden: &Var<'t>, layer: usize, path: Option<usize>) -> Result<Var<'t>> {
        let params = self
            .backbone
            .layers
            .get(layer)
            .ok_or_else(|| Error::OutOfRange(format!("layer {layer} of {}", self.config.layers)))?;
        let prefix = match path {
            Some(p) => self.prefixes.get(p, layer)?,
            None => None,
        };
        let tape = hidden.tape();
        let len = hidden.shape()[0];
        let q = hidden.matmul(&params.wq)?;
        let k = hidden.matmul(&params.wk)?;
        let v = hidden.matmul(&params.wv)?;
        let (k_aug, v_aug) = augment_keys_values(&k, &v, prefix)?;
        let prefix_len = k_aug.shape()[0] - len;
        let mask = tape.constant(attention_mask(len, prefix_len));
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = q.cols(h * dh, dh)?;
            let kh = k_aug.cols(h * dh, dh)?;
            let vh = v_aug.cols(h * dh, dh)?;
            let weights = qh.matmul_nt(&kh)?.scale(scale).add(&mask)?.softmax(1)?;
            heads.push(weights.matmul(&vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { concat(&heads, 1)? };
        Ok(merged.matmul(&params.wo)?)
    }

    /// Final-norm hidden states (`L × d`) for all real positions.
    pub fn hidden_states(&self, tokens: &[usize], path: Option<usize>) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(p) = path {
            if p >= self.config.num_paths {
                return Err(Error::OutOfRange(format!("path {p} of {}", self.config.num_paths)));
            }
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let bb = self.backbone;
        let mut x = bb.token_embedding.gather_rows(tokens)?.add(&bb.position_embedding.gather_rows(&positions)?)?;
        for (l, layer) in bb.layers.iter().enumerate() {
            let a = layer.attn_norm.forward(&x)?;
            x = x.add(&self.attention_with_prefix(&a, l, path)?)?;
            let b = layer.ffn_norm.forward(&x)?;
            let gated = b.matmul(&layer.gate)?.silu().mul(&b.matmul(&layer.up)?)?;
            x = x.add(&gated.matmul(&layer.down)?)?;
        }
        Ok(bb.final_norm.forward(&x)?)
    }

    /// Path embedding `h^(i)` as a `1 × d` row: the last real token's state.
    pub fn encode_path(&self, tokens: &[usize], path: usize) -> Result<Var<'t>> {
        let states = self.hidden_states(tokens, Some(path))?;
        Ok(states.rows(tokens.len() - 1, 1)?)
    }

    /// Last-token embedding with every prefix removed.
    pub fn encode_without_prefix(&self, tokens: &[usize]) -> Result<Var<'t>> {
        let states = self.hidden_states(tokens, None)?;
        Ok(states.rows(tokens.len() - 1, 1)?)
    }

    pub fn encode_all_paths(&self, tokens: &[usize]) -> Result<Vec<Var<'t>>> {
        (0..self.config.num_paths).map(|p| self.encode_path(tokens, p)).collect()
    }
}
