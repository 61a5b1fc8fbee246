//! Causal-LM fine-tuning of adapters on a frozen base, plus full-parameter
//! pretraining of the base itself.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::nn::{self, GradSink};
use crate::tensor::{Matrix, Real};
use crate::tokenizer::{Chunk, TokenId, PAD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Exactly `max_steps` optimizer steps, cycling through the data as needed.
    #[default]
    Steps,
    /// `min(max_steps, ceil(max_epochs · steps_per_epoch))`.
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub max_epochs: f64,
    pub budget: Budget,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 6,
            grad_accum_steps: 4,
            max_steps: 350,
            checkpoint_every: 50,
            max_epochs: 1.0,
            budget: Budget::Steps,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters used for the 8B-parameter original; kept for reference runs.
    pub fn reference_preset() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("checkpoint_every", self.checkpoint_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("train config: {name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.max_epochs > 0.0 && self.eps > 0.0) {
            return Err(Error::config("train config: learning_rate, max_epochs and eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(Error::config("train config: invalid AdamW parameters"));
        }
        if self.max_steps > 0 && self.checkpoint_every > self.max_steps {
            return Err(Error::config(format!(
                "train config: checkpoint_every {} exceeds max_steps {}",
                self.checkpoint_every, self.max_steps
            )));
        }
        Ok(())
    }

    fn chunks_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// Optimizer steps the run will take on `n_chunks` chunks.
    pub fn planned_steps(&self, n_chunks: usize) -> usize {
        match self.budget {
            Budget::Steps => self.max_steps,
            Budget::Epochs => {
                let per_epoch = n_chunks as f64 / self.chunks_per_step() as f64;
                self.max_steps.min((self.max_epochs * per_epoch).ceil() as usize)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub tokens_seen: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossPoint>,
    pub steps: usize,
    pub tokens_seen: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("step,loss,tokens_seen\n");
        for p in &self.losses {
            out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.tokens_seen));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Mean loss over the first `n` recorded steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().take(k).map(|p| p.loss).sum::<f64>() / k as f64
    }

    /// Mean loss over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(k).map(|p| p.loss).sum::<f64>() / k as f64
    }
}

/// Next-token inputs and targets for one chunk; PAD targets are masked.
pub fn shift_targets(tokens: &[TokenId]) -> (&[TokenId], Vec<Option<TokenId>>) {
    let inputs = &tokens[..tokens.len().saturating_sub(1)];
    let targets = tokens[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    (inputs, targets)
}

/// Mean token-level cross-entropy in nats over unmasked positions.
pub fn lm_loss<F: Real>(logits: &Matrix<F>, targets: &[Option<TokenId>]) -> Result<f64> {
    if logits.rows != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            logits.rows,
            targets.len()
        )));
    }
    Ok(nn::cross_entropy(logits, targets)?.0)
}

/// Loss of one chunk under `weights` + `adapter`.
pub fn chunk_loss<F: Real>(weights: &ModelWeights<F>, adapter: Option<&LoraAdapter<F>>, tokens: &[TokenId]) -> Result<f64> {
    let (inputs, targets) = shift_targets(tokens);
    let logits = weights.forward(adapter, inputs)?;
    lm_loss(&logits, &targets)
}

/// Decoupled-weight-decay Adam over a flat list of matrices.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, shapes: &[usize]) -> Self {
        AdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix<f32>>, grads: Vec<&Matrix<f32>>) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let (inv_bc1, inv_bc2) = ((1.0 / bc1) as f32, (1.0 / bc2) as f32);
        let eps = self.eps as f32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let update = (m[j] * inv_bc1) / ((v[j] * inv_bc2).sqrt() + eps);
                p.data[j] = p.data[j] * decay - lr * update;
            }
        }
    }
}

/// Deterministic chunk order: a fresh seeded permutation per epoch.
struct BatchOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut o = BatchOrder {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        o.reshuffle();
        o
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// What one training run optimizes; the step loop is shared.
trait Learner {
    /// Add one chunk's gradient scaled by `weight`; returns the chunk loss.
    fn accumulate(&mut self, tokens: &[TokenId], weight: f32) -> Result<f64>;
    fn apply(&mut self);
    fn snapshot(&mut self, _step: usize) {}
}

fn run_loop(chunks: &[Chunk], config: &TrainConfig, learner: &mut dyn Learner) -> Result<TrainReport> {
    config.validate()?;
    if chunks.is_empty() {
        return Err(Error::data("no training chunks"));
    }
    let start = Instant::now();
    let total_steps = config.planned_steps(chunks.len());
    let per_step = config.chunks_per_step();
    let weight = 1.0 / per_step as f32;
    let mut order = BatchOrder::new(chunks.len(), config.seed);
    let mut report = TrainReport::default();
    for step in 1..=total_steps {
        let mut loss = 0.0;
        for _ in 0..per_step {
            let chunk = &chunks[order.next()];
            let l = learner.accumulate(&chunk.tokens, weight)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {l} at step {step}")));
            }
            loss += l;
            report.tokens_seen += chunk.tokens.len().saturating_sub(1);
        }
        learner.apply();
        report.losses.push(LossPoint {
            step,
            loss: loss / per_step as f64,
            tokens_seen: report.tokens_seen,
        });
        report.steps = step;
        if step % config.checkpoint_every == 0 {
            learner.snapshot(step);
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Forward + reverse pass for one chunk; accumulates `weight`-scaled gradients.
fn chunk_gradients<F: Real>(
    base: &ModelWeights<F>,
    adapter: Option<&LoraAdapter<F>>,
    tokens: &[TokenId],
    weight: F,
    sink: GradSink<'_, F>,
) -> Result<f64> {
    let (inputs, targets) = shift_targets(tokens);
    nn::check_inputs(base, adapter, inputs)?;
    let (logits, cache) = nn::forward(base, adapter, inputs, true);
    let (loss, mut dlogits) = nn::cross_entropy(&logits, &targets)?;
    dlogits.scale(weight);
    nn::backward(base, adapter, &cache.expect("cache kept"), &dlogits, sink);
    Ok(loss)
}

pub struct TrainOutcome {
    pub adapter: LoraAdapter,
    pub report: TrainReport,
    /// Snapshots every `checkpoint_every` optimizer steps, `meta.steps` set.
    pub checkpoints: Vec<LoraAdapter>,
}

struct AdapterLearner<'a> {
    base: &'a ModelWeights,
    adapter: LoraAdapter,
    grads: LoraAdapter,
    opt: AdamW,
    checkpoints: Vec<LoraAdapter>,
}

impl Learner for AdapterLearner<'_> {
    fn accumulate(&mut self, tokens: &[TokenId], weight: f32) -> Result<f64> {
        chunk_gradients(
            self.base,
            Some(&self.adapter),
            tokens,
            weight,
            GradSink {
                base: None,
                adapter: Some(&mut self.grads),
            },
        )
    }

    fn apply(&mut self) {
        let params = self.adapter.modules.iter_mut().flat_map(|m| [&mut m.a, &mut m.b]).collect();
        let grads = self.grads.modules.iter().flat_map(|m| [&m.a, &m.b]).collect();
        self.opt.step(params, grads);
        for m in &mut self.grads.modules {
            m.a.fill_zero();
            m.b.fill_zero();
        }
        self.adapter.meta.steps += 1;
    }

    fn snapshot(&mut self, _step: usize) {
        self.checkpoints.push(self.adapter.clone());
    }
}

/// Train only the adapter's `A`/`B` matrices; `base` is borrowed immutably.
pub fn train_adapter(
    base: &ModelWeights,
    adapter: LoraAdapter,
    chunks: &[Chunk],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    adapter.check_compatible(&base.config)?;
    let shapes: Vec<usize> = adapter
        .modules
        .iter()
        .flat_map(|m| [m.a.data.len(), m.b.data.len()])
        .collect();
    let mut learner = AdapterLearner {
        base,
        grads: adapter.zeros_like(),
        adapter,
        opt: AdamW::new(config, &shapes),
        checkpoints: Vec::new(),
    };
    let report = run_loop(chunks, config, &mut learner)?;
    Ok(TrainOutcome {
        adapter: learner.adapter,
        report,
        checkpoints: learner.checkpoints,
    })
}

struct BaseLearner<'a> {
    weights: &'a mut ModelWeights,
    grads: ModelWeights,
    opt: AdamW,
}

impl Learner for BaseLearner<'_> {
    fn accumulate(&mut self, tokens: &[TokenId], weight: f32) -> Result<f64> {
        chunk_gradients(
            &*self.weights,
            None,
            tokens,
            weight,
            GradSink {
                base: Some(&mut self.grads),
                adapter: None,
            },
        )
    }

    fn apply(&mut self) {
        let params = self.weights.named_tensors_mut().into_iter().map(|(_, m)| m).collect();
        let grads = self.grads.named_tensors().into_iter().map(|(_, m)| m).collect();
        self.opt.step(params, grads);
        self.grads.named_tensors_mut().into_iter().for_each(|(_, m)| m.fill_zero());
    }
}

/// Full-parameter causal-LM training of the base model.
pub fn pretrain_base(weights: &mut ModelWeights, chunks: &[Chunk], config: &TrainConfig) -> Result<TrainReport> {
    let shapes: Vec<usize> = weights.named_tensors().iter().map(|(_, m)| m.data.len()).collect();
    let mut learner = BaseLearner {
        grads: weights.zeros_like(),
        opt: AdamW::new(config, &shapes),
        weights,
    };
    let report = run_loop(chunks, config, &mut learner)?;
    if !learner.weights.is_finite() {
        return Err(Error::Numeric("base weights became non-finite".into()));
    }
    Ok(report)
}

/// Analytic dL/dA and dL/dB for one chunk, shaped like the adapter.
pub fn adapter_gradients<F: Real>(base: &ModelWeights<F>, adapter: &LoraAdapter<F>, tokens: &[TokenId]) -> Result<(f64, LoraAdapter<F>)> {
    let mut grads = adapter.zeros_like();
    let loss = chunk_gradients(
        base,
        Some(adapter),
        tokens,
        F::one(),
        GradSink {
            base: None,
            adapter: Some(&mut grads),
        },
    )?;
    Ok((loss, grads))
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub module: usize,
    pub in_b: bool,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Floor on the relative-error denominator, so entries whose true gradient is
/// near zero are judged by absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compare analytic adapter gradients against central finite differences, both
/// in double precision, on `samples` randomly chosen `A`/`B` entries.
pub fn grad_check(
    base: &ModelWeights,
    adapter: &LoraAdapter,
    tokens: &[TokenId],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let base64 = base.cast::<f64>();
    let adapter64 = adapter.cast::<f64>();
    let (_, analytic) = adapter_gradients(&base64, &adapter64, tokens)?;

    let mut slots = Vec::new();
    for (mi, m) in adapter.modules.iter().enumerate() {
        slots.extend((0..m.a.data.len()).map(|i| (mi, false, i)));
        slots.extend((0..m.b.data.len()).map(|i| (mi, true, i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, slots.len(), samples.min(slots.len()));

    let mut entries = Vec::with_capacity(picks.len());
    for p in picks {
        let (mi, in_b, i) = slots[p];
        let eval = |delta: f64| -> Result<f64> {
            let mut a = adapter64.clone();
            let m = &mut a.modules[mi];
            let mat = if in_b { &mut m.b } else { &mut m.a };
            mat.data[i] += delta;
            chunk_loss(&base64, Some(&a), tokens)
        };
        let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
        let g = &analytic.modules[mi];
        let an = if in_b { g.b.data[i] } else { g.a.data[i] };
        let rel_err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        entries.push(GradCheckEntry {
            module: mi,
            in_b,
            index: i,
            analytic: an,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, entries })
}

/// Give an adapter non-zero `B` so every `A`/`B` gradient is informative.
pub fn randomize_b<R: Rng>(adapter: &mut LoraAdapter, std: f64, rng: &mut R) {
    for m in &mut adapter.modules {
        m.b = Matrix::randn(m.b.rows, m.b.cols, std, rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, LoraConfig, Target};
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer::{pack_chunks, FinalChunk, VOCAB_SIZE};

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut logits = Matrix::filled(2, 4, -1e4f64);
        logits.data[1] = 0.0;
        logits.data[4 + 3] = 0.0;
        let loss = lm_loss(&logits, &[Some(1), Some(3)]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn uniform_loss_is_log_vocab() {
        let logits = Matrix::filled(3, VOCAB_SIZE, 0.3f32);
        let loss = lm_loss(&logits, &[Some(1), None, Some(200)]).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn small_case_by_hand() {
        let logits = Matrix::from_vec(2, 4, vec![1.0f64, 2.0, 0.5, -1.0, 0.0, 0.0, 3.0, 1.0]);
        let lp = |row: &[f64], t: usize| row[t] - row.iter().map(|x| x.exp()).sum::<f64>().ln();
        let expect = -(lp(&logits.data[..4], 1) + lp(&logits.data[4..], 3)) / 2.0;
        let loss = lm_loss(&logits, &[Some(1), Some(3)]).unwrap();
        assert!((loss - expect).abs() < 1e-14);
    }

    #[test]
    fn all_masked_is_an_error() {
        let logits = Matrix::filled(2, 4, 0.0f32);
        assert!(lm_loss(&logits, &[None, None]).is_err());
    }

    #[test]
    fn pad_targets_are_masked() {
        let (inputs, targets) = shift_targets(&[1, 2, PAD, PAD]);
        assert_eq!(inputs, &[1, 2, PAD]);
        assert_eq!(targets, vec![Some(2), None, None]);
    }

    fn tiny_setup() -> (ModelWeights, LoraAdapter, Vec<Chunk>) {
        let base = init_model(&ModelConfig::tiny()).unwrap();
        let adapter = init_adapter(&base.config, &LoraConfig::default(), 1).unwrap();
        let docs = ["I felt happy today", "so happy right now", "happy happy joy"];
        let chunks = pack_chunks(&docs, 16, 0, FinalChunk::Drop, 0).unwrap().chunks;
        (base, adapter, chunks)
    }

    fn small_config(max_steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            grad_accum_steps: 2,
            max_steps,
            checkpoint_every: 2.min(max_steps.max(1)),
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leaves_adapter_unchanged() {
        let (base, adapter, chunks) = tiny_setup();
        let out = train_adapter(&base, adapter.clone(), &chunks, &small_config(0)).unwrap();
        assert!(out.adapter.same_weights(&adapter));
        assert!(out.report.losses.is_empty());
        assert!(out.checkpoints.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_counted() {
        let (base, adapter, chunks) = tiny_setup();
        let cfg = TrainConfig {
            checkpoint_every: 3,
            ..small_config(7)
        };
        let a = train_adapter(&base, adapter.clone(), &chunks, &cfg).unwrap();
        let b = train_adapter(&base, adapter, &chunks, &cfg).unwrap();
        assert!(a.adapter.same_weights(&b.adapter));
        assert_eq!(a.report.losses, b.report.losses);
        assert_eq!(a.checkpoints.len(), 7 / 3);
        assert_eq!(a.checkpoints[1].meta.steps, 6);
        assert_eq!(a.adapter.meta.steps, 7);
    }

    #[test]
    fn empty_chunks_rejected() {
        let (base, adapter, _) = tiny_setup();
        assert!(train_adapter(&base, adapter, &[], &small_config(3)).is_err());
    }

    #[test]
    fn epoch_budget_caps_steps() {
        let cfg = TrainConfig {
            budget: Budget::Epochs,
            max_epochs: 1.0,
            batch_size: 2,
            grad_accum_steps: 2,
            max_steps: 100,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.planned_steps(10), 3);
        assert_eq!(TrainConfig { max_steps: 2, ..cfg.clone() }.planned_steps(10), 2);
    }

    #[test]
    fn alpha_scales_b_gradient_linearly_at_zero_b() {
        let (base, adapter, chunks) = tiny_setup();
        let mut doubled = adapter.clone();
        doubled.config.alpha *= 2.0;
        let (_, g1) = adapter_gradients(&base.cast::<f64>(), &adapter.cast::<f64>(), &chunks[0].tokens).unwrap();
        let (_, g2) = adapter_gradients(&base.cast::<f64>(), &doubled.cast::<f64>(), &chunks[0].tokens).unwrap();
        for (m1, m2) in g1.modules.iter().zip(&g2.modules) {
            assert!(m1.a.data.iter().all(|&x| x == 0.0));
            for (x, y) in m1.b.data.iter().zip(&m2.b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn pretraining_changes_base_and_lowers_loss() {
        let (mut base, _, chunks) = tiny_setup();
        let before = base.checksum();
        let report = pretrain_base(&mut base, &chunks, &small_config(30)).unwrap();
        assert_ne!(before, base.checksum());
        assert!(report.tail_mean(5) < report.head_mean(5));
    }

    #[test]
    fn grad_check_on_all_targets() {
        let base = init_model(&ModelConfig::tiny()).unwrap();
        let lc = LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: Target::ALL.to_vec(),
        };
        let mut adapter = init_adapter(&base.config, &lc, 3).unwrap();
        randomize_b(&mut adapter, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let tokens: Vec<TokenId> = "grad check tokens!".bytes().map(TokenId::from).collect();
        let report = grad_check(&base, &adapter, &tokens, 1e-4, 64, 7).unwrap();
        assert!(report.max_rel_err < 1e-3, "{:?}", report.max_rel_err);
    }
}
