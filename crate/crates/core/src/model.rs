//! Small decoder-only transformer: pre-norm residual blocks, learned position
//! embeddings, untied output head, no biases on linear maps.
//!
//! Linear weights are stored `[d_out, d_in]` and applied as `y = x Wᵀ`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{LoraAdapter, Target};
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Matrix, Real};
use crate::tensorio::{self, Meta};
use crate::tokenizer::{TokenId, VOCAB_SIZE};

const MODEL_MAGIC: &[u8; 4] = b"TAMW";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 512,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Single-layer model small enough for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 64,
            init_seed: 0,
        }
    }

    /// The reduced model the synthetic-mix experiment trains on a single core.
    pub fn mix_experiment() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            init_seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model config: {name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::config(format!(
                "model config: vocab_size {} smaller than the byte vocabulary ({VOCAB_SIZE})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a targetable weight.
    pub fn target_shape(&self, target: Target) -> (usize, usize) {
        let d = self.d_model;
        match target {
            Target::Query | Target::Key | Target::Value | Target::Output => (d, d),
            Target::FfnUp => (self.d_ff, d),
            Target::FfnDown => (d, self.d_ff),
        }
    }

    fn to_meta(self) -> Meta {
        Meta::from([
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("init_seed".into(), self.init_seed.to_string()),
        ])
    }

    fn from_meta(path: &Path, meta: &Meta) -> Result<Self> {
        let get = |k| tensorio::meta_get::<usize>(path, meta, k);
        Ok(ModelConfig {
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            d_model: get("d_model")?,
            d_ff: get("d_ff")?,
            vocab_size: get("vocab_size")?,
            max_seq_len: get("max_seq_len")?,
            init_seed: tensorio::meta_get(path, meta, "init_seed")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<F = f32> {
    pub ln1_gain: Matrix<F>,
    pub ln1_bias: Matrix<F>,
    pub query: Matrix<F>,
    pub key: Matrix<F>,
    pub value: Matrix<F>,
    pub output: Matrix<F>,
    pub ln2_gain: Matrix<F>,
    pub ln2_bias: Matrix<F>,
    pub ffn_up: Matrix<F>,
    pub ffn_down: Matrix<F>,
}

impl<F: Real> LayerWeights<F> {
    pub fn target(&self, t: Target) -> &Matrix<F> {
        match t {
            Target::Query => &self.query,
            Target::Key => &self.key,
            Target::Value => &self.value,
            Target::Output => &self.output,
            Target::FfnUp => &self.ffn_up,
            Target::FfnDown => &self.ffn_down,
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix<F>); 10] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.query", &self.query),
            ("attn.key", &self.key),
            ("attn.value", &self.value),
            ("attn.output", &self.output),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.up", &self.ffn_up),
            ("ffn.down", &self.ffn_down),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix<F>); 10] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.query", &mut self.query),
            ("attn.key", &mut self.key),
            ("attn.value", &mut self.value),
            ("attn.output", &mut self.output),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("ffn.up", &mut self.ffn_up),
            ("ffn.down", &mut self.ffn_down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<F = f32> {
    pub config: ModelConfig,
    pub tok_emb: Matrix<F>,
    pub pos_emb: Matrix<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_gain: Matrix<F>,
    pub lnf_bias: Matrix<F>,
    pub head: Matrix<F>,
}

/// Deterministic scaled-normal initialization from `config.init_seed`.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let (d, ff, v) = (config.d_model, config.d_ff, config.vocab_size);
    let std = 0.02;
    let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
    let tok_emb = Matrix::randn(v, d, std, &mut rng);
    let pos_emb = Matrix::randn(config.max_seq_len, d, std, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            query: Matrix::randn(d, d, std, &mut rng),
            key: Matrix::randn(d, d, std, &mut rng),
            value: Matrix::randn(d, d, std, &mut rng),
            output: Matrix::randn(d, d, proj_std, &mut rng),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
            ffn_up: Matrix::randn(ff, d, std, &mut rng),
            ffn_down: Matrix::randn(d, ff, proj_std, &mut rng),
        })
        .collect();
    Ok(ModelWeights {
        config: *config,
        tok_emb,
        pos_emb,
        layers,
        lnf_gain: Matrix::filled(1, d, 1.0),
        lnf_bias: Matrix::zeros(1, d),
        head: Matrix::randn(v, d, std, &mut rng),
    })
}

impl<F: Real> ModelWeights<F> {
    /// Every parameter tensor with its stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.tensors().into_iter().map(|(n, m)| (format!("layers.{i}.{n}"), m)));
        }
        out.push(("ln_f.gain".into(), &self.lnf_gain));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.tensors_mut().into_iter().map(|(n, m)| (format!("layers.{i}.{n}"), m)));
        }
        out.push(("ln_f.gain".into(), &mut self.lnf_gain));
        out.push(("ln_f.bias".into(), &mut self.lnf_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.named_tensors_mut().into_iter().for_each(|(_, m)| m.fill_zero());
        z
    }

    pub fn cast<G: Real>(&self) -> ModelWeights<G> {
        ModelWeights {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    query: l.query.cast(),
                    key: l.key.cast(),
                    value: l.value.cast(),
                    output: l.output.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ffn_up: l.ffn_up.cast(),
                    ffn_down: l.ffn_down.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            head: self.head.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Logits `[tokens.len(), vocab]` for every position.
    pub fn forward(&self, adapter: Option<&LoraAdapter<F>>, tokens: &[TokenId]) -> Result<Matrix<F>> {
        nn::check_inputs(self, adapter, tokens)?;
        Ok(nn::forward(self, adapter, tokens, false).0)
    }
}

impl ModelWeights<f32> {
    /// SHA-256 over every tensor name and its little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            h.update(m.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensorio::write(path, MODEL_MAGIC, &self.config.to_meta(), &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = tensorio::read(path, MODEL_MAGIC)?;
        let config = ModelConfig::from_meta(path, &meta)?;
        config.validate()?;
        let mut weights = init_model(&ModelConfig { init_seed: 0, ..config })?;
        weights.config = config;
        let mut slots = weights.named_tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("expected {} tensors, found {}", slots.len(), tensors.len()),
            });
        }
        for ((name, slot), (found, m)) in slots.iter_mut().zip(tensors) {
            if *name != found || (slot.rows, slot.cols) != (m.rows, m.cols) {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("tensor {found} [{}x{}] where {name} was expected", m.rows, m.cols),
                });
            }
            **slot = m;
        }
        Ok(weights)
    }
}

/// `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Log-probabilities `log softmax(logits / temperature)`, evaluated in f64.
pub fn log_softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// Next-token distribution after `context` at the given temperature.
pub fn next_token_distribution<F: Real>(
    weights: &ModelWeights<F>,
    adapter: Option<&LoraAdapter<F>>,
    context: &[TokenId],
    temperature: f64,
) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::data("next-token distribution needs a non-empty context"));
    }
    let logits = weights.forward(adapter, context)?;
    let last: Vec<f64> = logits.row(context.len() - 1).iter().map(|x| x.as_f64()).collect();
    softmax_with_temperature(&last, temperature)
}
