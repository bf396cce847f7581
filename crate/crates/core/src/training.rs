//! Optimization loop: bucketed batching, condition dropout, KL warm-up,
//! Adam with global-norm clipping, and best-epoch selection.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::model::{check_finite, fused_noise, Batch, CRepair, ForwardOptions, LossParts, ModelConfig, ParamStore};
use crate::numerics::{Rng, Tape, Tensor};
use crate::preproc::{prepare, PromptMode};
use crate::tokenizer::{BpeVocab, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub kl_warmup_fraction: f64,
    /// Probability that a batch uses the null condition instead of the target's.
    pub condition_dropout: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub grad_clip: f64,
    /// Reparameterized sampling during training; off means `Z = mu`.
    pub latent_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 16,
            kl_warmup_fraction: 0.2,
            condition_dropout: 0.3,
            seed: 0,
            checkpoint_dir: None,
            grad_clip: 1.0,
            latent_noise: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::invalid(format!("learning rate {} outside (0, 1)", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) || !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return Err(Error::invalid("condition dropout and KL warm-up fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `min(1, step / (fraction * total_steps))`; 1 when there is no warm-up.
pub fn kl_weight(step: usize, total_steps: usize, fraction: f64) -> f64 {
    let warm = fraction * total_steps as f64;
    if warm <= 0.0 {
        1.0
    } else {
        (step as f64 / warm).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            config: AdamConfig::default(),
        }
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched, moments included.
pub fn adam_step(params: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("gradient list does not match the parameter store"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::shape("adam", g.shape(), params.tensors()[i].shape()));
            }
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for {}", params.names()[i])));
            }
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = &mut params.tensors_mut()[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Tokenized input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: TokenSequence,
    pub target: TokenSequence,
}

/// Prompts and tokenizes records. An example over `max_len` is an error.
pub fn prepare_examples(records: &[SampleRecord], vocab: &BpeVocab, mode: PromptMode, max_len: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let p = prepare(r, mode)?;
            let input = vocab.encode(&p.input_text);
            let target = vocab.encode(&p.target_text);
            if input.len() > max_len || target.len() > max_len {
                return Err(Error::data(format!(
                    "{}: {} input / {} target tokens exceed max_len {max_len}",
                    r.id,
                    input.len(),
                    target.len()
                )));
            }
            Ok(Example {
                id: r.id.clone(),
                input,
                target,
            })
        })
        .collect()
}

/// Batches of example indices: shuffled, grouped into pools of similar
/// input length, then the batch order is shuffled again.
pub fn bucketed_batches(examples: &[Example], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    const POOL_BATCHES: usize = 32;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| (examples[i].input.len(), examples[i].target.len()));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

fn make_batch(examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let src: Vec<&TokenSequence> = idx.iter().map(|&i| &examples[i].input).collect();
    let tgt: Vec<&TokenSequence> = idx.iter().map(|&i| &examples[i].target).collect();
    Batch::new(&src, &tgt)
}

fn target_tokens(batch: &Batch) -> usize {
    batch.shifted_targets().iter().filter(|&&t| t != crate::tokenizer::PAD_ID).count()
}

/// Forward and backward on one batch followed by an Adam update.
pub fn train_step(
    model: &mut CRepair,
    state: &mut AdamState,
    batch: &Batch,
    opts: &ForwardOptions,
    lr: f64,
    grad_clip: f64,
) -> Result<LossParts> {
    let (parts, mut grads) = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let loss = model.batch_loss(&mut tape, &p, batch, opts)?;
        let parts = LossParts {
            total: tape.value(loss.total).item(),
            rc: tape.value(loss.rc).item(),
            kl: tape.value(loss.kl).item(),
        };
        check_finite(parts.rc, parts.kl)?;
        let vars = p.vars().to_vec();
        let mut g = tape.backward(loss.total)?;
        let grads: Vec<Option<Tensor>> = vars.into_iter().map(|v| g.take(v)).collect();
        (parts, grads)
    };
    clip_global_norm(&mut grads, grad_clip);
    adam_step(&mut model.params, &grads, state, lr)?;
    Ok(parts)
}

/// Loss of one batch without updating anything.
pub fn batch_loss_value(model: &CRepair, batch: &Batch, opts: &ForwardOptions) -> Result<LossParts> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let loss = model.batch_loss(&mut tape, &p, batch, opts)?;
    Ok(LossParts {
        total: tape.value(loss.total).item(),
        rc: tape.value(loss.rc).item(),
        kl: tape.value(loss.kl).item(),
    })
}

/// Token-weighted RC and example-weighted KL, noise off, null condition.
pub fn evaluate_loss(model: &CRepair, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    let opts = ForwardOptions {
        noise: None,
        use_condition: false,
        kl_weight: 1.0,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| examples[i].input.len());
    let (mut rc, mut kl, mut tokens) = (0.0, 0.0, 0usize);
    for idx in order.chunks(batch_size.max(1)) {
        let batch = make_batch(examples, idx)?;
        let parts = batch_loss_value(model, &batch, &opts)?;
        let n = target_tokens(&batch);
        rc += parts.rc * n as f64;
        kl += parts.kl * idx.len() as f64;
        tokens += n;
    }
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    Ok((rc / tokens.max(1) as f64, kl / examples.len() as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_rc: f64,
    pub train_kl: f64,
    /// `NaN` when there is no validation set.
    pub valid_rc: f64,
    pub valid_kl: f64,
    pub wall_seconds: f64,
}

impl PartialEq for EpochStats {
    /// Wall time is excluded so equal runs compare equal.
    fn eq(&self, o: &Self) -> bool {
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        self.epoch == o.epoch
            && same(self.train_total, o.train_total)
            && same(self.train_rc, o.train_rc)
            && same(self.train_kl, o.train_kl)
            && same(self.valid_rc, o.valid_rc)
            && same(self.valid_kl, o.valid_kl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn metrics_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn wall_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_seconds).sum()
    }
}

impl fmt::Display for TrainReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>5}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}  {:>8}",
            "epoch", "total", "rc", "kl", "valid_rc", "valid_kl", "seconds"
        )?;
        for e in &self.epochs {
            let mark = if e.epoch == self.best_epoch { " *" } else { "" };
            writeln!(
                f,
                "{:>5}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>8.1}{mark}",
                e.epoch, e.train_total, e.train_rc, e.train_kl, e.valid_rc, e.valid_kl, e.wall_seconds
            )?;
        }
        write!(f, "best epoch: {}", self.best_epoch)
    }
}

pub struct TrainOutcome {
    /// Parameters from the best epoch.
    pub model: CRepair,
    pub report: TrainReport,
}

/// Trains from a fresh initialization seeded by `cfg.seed`.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, train_set: &[Example], valid_set: &[Example]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    for e in train_set {
        if e.input.len() > model_cfg.max_len || e.target.len() > model_cfg.max_len {
            return Err(Error::data(format!("{} exceeds max_len {}", e.id, model_cfg.max_len)));
        }
    }
    let root = Rng::new(cfg.seed);
    let mut model = CRepair::new(model_cfg.clone(), root.fork(1).next_u64())?;
    let mut state = AdamState::new(&model.params);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut erng = root.fork(1000 + epoch as u64);
        let mut order_rng = erng.fork(1);
        let mut noise_rng = erng.fork(2);
        let batches = bucketed_batches(train_set, cfg.batch_size, &mut order_rng);
        let (mut total, mut rc, mut kl, mut tokens, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = make_batch(train_set, idx)?;
            let use_condition = erng.uniform() >= cfg.condition_dropout;
            let noise = cfg
                .latent_noise
                .then(|| fused_noise(&mut noise_rng, batch.size, model_cfg.latent_dim, model_cfg.sample_count));
            let opts = ForwardOptions {
                noise,
                use_condition,
                kl_weight: kl_weight(step, total_steps, cfg.kl_warmup_fraction),
            };
            let parts = train_step(&mut model, &mut state, &batch, &opts, cfg.learning_rate, cfg.grad_clip)
                .map_err(|e| Error::numeric(format!("epoch {epoch}, batch {bi}: {e}")))?;
            let n = target_tokens(&batch);
            total += parts.total * idx.len() as f64;
            rc += parts.rc * n as f64;
            kl += parts.kl * idx.len() as f64;
            tokens += n;
            seen += idx.len();
            step += 1;
        }
        let (valid_rc, valid_kl) = evaluate_loss(&model, valid_set, cfg.batch_size)?;
        let stats = EpochStats {
            epoch,
            train_total: total / seen as f64,
            train_rc: rc / tokens.max(1) as f64,
            train_kl: kl / seen as f64,
            valid_rc,
            valid_kl,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train rc {:.4} kl {:.4}, valid rc {:.4} ({:.1}s)",
            stats.train_rc,
            stats.train_kl,
            stats.valid_rc,
            stats.wall_seconds
        );
        // Without validation data the last epoch wins.
        let score = if valid_rc.is_nan() { -(epoch as f64) } else { valid_rc };
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.params.clone()));
        }
        epochs.push(stats);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let report = TrainReport { epochs, best_epoch };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join("metrics.jsonl");
        std::fs::write(&metrics, report.metrics_lines()?).map_err(|e| Error::io(&metrics, e))?;
    }
    Ok(TrainOutcome { model, report })
}
