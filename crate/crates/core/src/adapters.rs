//! Low-rank adapters (LoRA) and per-session adapter swapping.
//!
//! For a target weight `W` (`d_out × d_in`) an adapter holds `A` (`r × d_in`)
//! and `B` (`d_out × r`); the adapted layer computes
//! `y = x Wᵀ + (alpha / r) · (x Aᵀ) Bᵀ`. `B` starts at zero, so a fresh
//! adapter leaves the model's outputs unchanged.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::{Matrix, Real};
use crate::tensorio::{self, Meta};
use crate::tokenizer::TokenId;

const ADAPTER_MAGIC: &[u8; 4] = b"TALA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Query,
    Key,
    Value,
    Output,
    FfnUp,
    FfnDown,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Query,
        Target::Key,
        Target::Value,
        Target::Output,
        Target::FfnUp,
        Target::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Query => "query",
            Target::Key => "key",
            Target::Value => "value",
            Target::Output => "output",
            Target::FfnUp => "ffn_up",
            Target::FfnDown => "ffn_down",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown adapter target {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
}

impl Default for LoraConfig {
    /// Rank 8, alpha 2r, query and value projections in every layer.
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: vec![Target::Query, Target::Value],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("adapter rank must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("adapter alpha must be positive, got {}", self.alpha)));
        }
        if self.targets.is_empty() {
            return Err(Error::config("adapter has no targets"));
        }
        for &t in &self.targets {
            let (d_out, d_in) = model.target_shape(t);
            if self.rank > d_out.min(d_in) {
                return Err(Error::config(format!(
                    "adapter rank {} exceeds {t} dimensions {d_out}x{d_in}",
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule<F = f32> {
    pub layer: usize,
    pub target: Target,
    /// `rank × d_in`
    pub a: Matrix<F>,
    /// `d_out × rank`
    pub b: Matrix<F>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub slice_id: u32,
    pub seed: u64,
    pub steps: u64,
    /// Seconds since the Unix epoch; informational only.
    pub created_unix: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F = f32> {
    pub config: LoraConfig,
    pub modules: Vec<LoraModule<F>>,
    pub meta: AdapterMeta,
    /// `(n_layers, d_model, d_ff)` of the model this adapter was built for.
    pub model_dims: (usize, usize, usize),
}

/// `A ~ N(0, 1/r)`, `B = 0`, one module per (layer, target).
pub fn init_adapter(model: &ModelConfig, config: &LoraConfig, seed: u64) -> Result<LoraAdapter> {
    config.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / config.rank as f64).sqrt();
    let mut targets = config.targets.clone();
    targets.sort();
    targets.dedup();
    let mut modules = Vec::new();
    for layer in 0..model.n_layers {
        for &target in &targets {
            let (d_out, d_in) = model.target_shape(target);
            modules.push(LoraModule {
                layer,
                target,
                a: Matrix::randn(config.rank, d_in, std, &mut rng),
                b: Matrix::zeros(d_out, config.rank),
            });
        }
    }
    let created_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(LoraAdapter {
        config: LoraConfig { targets, ..config.clone() },
        modules,
        meta: AdapterMeta {
            seed,
            created_unix,
            ..AdapterMeta::default()
        },
        model_dims: (model.n_layers, model.d_model, model.d_ff),
    })
}

impl<F: Real> LoraAdapter<F> {
    pub fn scale(&self) -> F {
        F::of(self.config.scale())
    }

    pub fn module(&self, layer: usize, target: Target) -> Option<&LoraModule<F>> {
        self.modules.iter().find(|m| m.layer == layer && m.target == target)
    }

    /// `(alpha / r) · B · A`, shaped like the target weight.
    pub fn effective_delta(&self, layer: usize, target: Target) -> Result<Matrix<F>> {
        let m = self
            .module(layer, target)
            .ok_or_else(|| Error::config(format!("adapter has no {target} module in layer {layer}")))?;
        let mut delta = m.b.matmul(&m.a);
        delta.scale(self.scale());
        Ok(delta)
    }

    pub fn parameter_count(&self) -> usize {
        self.modules.iter().map(|m| m.a.data.len() + m.b.data.len()).sum()
    }

    /// Shapes must match the model's target weights exactly.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        for m in &self.modules {
            if m.layer >= model.n_layers {
                return Err(Error::shape(format!(
                    "adapter targets layer {} but the model has {}",
                    m.layer, model.n_layers
                )));
            }
            let (d_out, d_in) = model.target_shape(m.target);
            let r = self.config.rank;
            if (m.a.rows, m.a.cols) != (r, d_in) || (m.b.rows, m.b.cols) != (d_out, r) {
                return Err(Error::shape(format!(
                    "adapter {} layer {}: A {}x{}, B {}x{} do not fit a {d_out}x{d_in} weight at rank {r}",
                    m.target, m.layer, m.a.rows, m.a.cols, m.b.rows, m.b.cols
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for m in &mut z.modules {
            m.a.fill_zero();
            m.b.fill_zero();
        }
        z
    }

    pub fn cast<G: Real>(&self) -> LoraAdapter<G> {
        LoraAdapter {
            config: self.config.clone(),
            modules: self
                .modules
                .iter()
                .map(|m| LoraModule {
                    layer: m.layer,
                    target: m.target,
                    a: m.a.cast(),
                    b: m.b.cast(),
                })
                .collect(),
            meta: self.meta.clone(),
            model_dims: self.model_dims,
        }
    }

    /// Weight-level equality, ignoring metadata.
    pub fn same_weights(&self, other: &Self) -> bool {
        self.config == other.config && self.modules == other.modules
    }
}

impl LoraAdapter<f32> {
    fn named_tensors(&self) -> Vec<(String, &Matrix<f32>)> {
        self.modules
            .iter()
            .flat_map(|m| {
                [
                    (format!("layers.{}.{}.lora_a", m.layer, m.target), &m.a),
                    (format!("layers.{}.{}.lora_b", m.layer, m.target), &m.b),
                ]
            })
            .collect()
    }

    fn to_meta(&self) -> Meta {
        let targets: Vec<&str> = self.config.targets.iter().map(|t| t.name()).collect();
        Meta::from([
            ("slice_id".into(), self.meta.slice_id.to_string()),
            ("seed".into(), self.meta.seed.to_string()),
            ("steps".into(), self.meta.steps.to_string()),
            ("created_unix".into(), self.meta.created_unix.to_string()),
            ("rank".into(), self.config.rank.to_string()),
            // Round-trip exact: Rust prints the shortest representation that parses back.
            ("alpha".into(), format!("{:?}", self.config.alpha)),
            ("targets".into(), targets.join(",")),
            ("n_layers".into(), self.model_dims.0.to_string()),
            ("d_model".into(), self.model_dims.1.to_string()),
            ("d_ff".into(), self.model_dims.2.to_string()),
        ])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensorio::write(path, ADAPTER_MAGIC, &self.to_meta(), &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = tensorio::read(path, ADAPTER_MAGIC)?;
        let get_usize = |k| tensorio::meta_get::<usize>(path, &meta, k);
        let targets = meta
            .get("targets")
            .map(|s| s.split(',').map(Target::from_str).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default();
        let config = LoraConfig {
            rank: get_usize("rank")?,
            alpha: tensorio::meta_get(path, &meta, "alpha")?,
            targets: targets.clone(),
        };
        let model_dims = (get_usize("n_layers")?, get_usize("d_model")?, get_usize("d_ff")?);
        let adapter_meta = AdapterMeta {
            slice_id: tensorio::meta_get(path, &meta, "slice_id")?,
            seed: tensorio::meta_get(path, &meta, "seed")?,
            steps: tensorio::meta_get(path, &meta, "steps")?,
            created_unix: tensorio::meta_get(path, &meta, "created_unix")?,
        };
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if tensors.len() != 2 * model_dims.0 * targets.len() {
            return Err(corrupt(format!(
                "expected {} tensors, found {}",
                2 * model_dims.0 * targets.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut modules = Vec::new();
        for layer in 0..model_dims.0 {
            for &target in &targets {
                let (na, a) = it.next().unwrap();
                let (nb, b) = it.next().unwrap();
                if na != format!("layers.{layer}.{target}.lora_a") || nb != format!("layers.{layer}.{target}.lora_b") {
                    return Err(corrupt(format!("unexpected tensors {na}, {nb}")));
                }
                modules.push(LoraModule { layer, target, a, b });
            }
        }
        let adapter = LoraAdapter {
            config,
            modules,
            meta: adapter_meta,
            model_dims,
        };
        let model_cfg = ModelConfig {
            n_layers: model_dims.0,
            d_model: model_dims.1,
            d_ff: model_dims.2,
            n_heads: 1,
            ..ModelConfig::default()
        };
        adapter.check_compatible(&model_cfg).map_err(|e| corrupt(e.to_string()))?;
        Ok(adapter)
    }
}

/// A read-only view of frozen base weights with at most one active adapter.
///
/// Swapping only replaces the session's adapter handle; base weights are
/// borrowed immutably and never touched.
#[derive(Clone)]
pub struct Session<'m> {
    base: &'m ModelWeights,
    adapter: Option<Arc<LoraAdapter>>,
}

impl<'m> Session<'m> {
    pub fn new(base: &'m ModelWeights) -> Self {
        Session { base, adapter: None }
    }

    pub fn with_adapter(base: &'m ModelWeights, adapter: Option<Arc<LoraAdapter>>) -> Result<Self> {
        let mut s = Session::new(base);
        s.swap(adapter)?;
        Ok(s)
    }

    pub fn swap(&mut self, adapter: Option<Arc<LoraAdapter>>) -> Result<()> {
        if let Some(a) = &adapter {
            a.check_compatible(&self.base.config)?;
        }
        self.adapter = adapter;
        Ok(())
    }

    pub fn base(&self) -> &'m ModelWeights {
        self.base
    }

    pub fn adapter(&self) -> Option<&LoraAdapter> {
        self.adapter.as_deref()
    }

    pub fn forward(&self, tokens: &[TokenId]) -> Result<Matrix<f32>> {
        self.base.forward(self.adapter(), tokens)
    }
}
