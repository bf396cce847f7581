//! The conditional variational encoder-decoder.
//!
//! Data flow for one example:
//!
//! ```text
//! tokens -> encoder -> E ---------------------------+
//!                      |                            |
//!                      +-> weighted conv heads -> (mu, log_var) -> Z
//! target -> condition extractor -> c  (or the learned null vector)
//! memory M = LN(E + Z W_z + c W_c)
//! prefix -> causal decoder with cross-attention to M -> logits
//! ```
//!
//! Graph builders operate on a [`Tape`] and are shared by training,
//! inference and the value-level helpers, so every path runs the same math.

mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use params::{Bound, ParamStore};
use params::Init;

use crate::error::{Error, Result};
use crate::numerics::{AttentionSpec, Checkpoint, Tape, Tensor, Var};
use crate::tokenizer::{BpeVocab, TokenSequence, PAD_ID};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub latent_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub sample_count: usize,
    /// Relative offsets are clipped to `[-max_rel, max_rel]`.
    #[serde(default = "default_max_rel")]
    pub max_rel: usize,
}

fn default_max_rel() -> usize {
    16
}

pub const PRESETS: [&str; 4] = ["base", "toy", "trend", "tiny"];

/// Settings from the original experiments. The three widths cannot all hold
/// in one residual network, so they are kept as reference values only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSettings {
    pub encoding_dim: usize,
    pub decoding_dim: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beam_width: usize,
    pub sample_count: usize,
}

pub const REFERENCE_SETTINGS: ReferenceSettings = ReferenceSettings {
    encoding_dim: 512,
    decoding_dim: 256,
    embedding_dim: 768,
    epochs: 75,
    learning_rate: 2e-5,
    batch_size: 8,
    beam_width: 50,
    sample_count: 5,
};

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Named size preset with the given vocabulary size.
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (d_model, n_heads, n_enc, n_dec, ffn_dim, latent_dim, max_len, sample_count) = match name {
            "base" => (768, 12, 12, 12, 3072, 256, 512, REFERENCE_SETTINGS.sample_count),
            "toy" => (128, 4, 2, 2, 256, 64, 128, 5),
            "trend" => (64, 4, 2, 2, 128, 32, 128, 5),
            "tiny" => (16, 2, 1, 1, 32, 8, 32, 2),
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        let cfg = ModelConfig {
            d_model,
            n_heads,
            n_enc_layers: n_enc,
            n_dec_layers: n_dec,
            ffn_dim,
            latent_dim,
            max_len,
            vocab_size,
            sample_count,
            max_rel: default_max_rel(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.sample_count == 0 {
            return bad("sample_count must be at least 1".into());
        }
        if self.max_len < 8 {
            return bad(format!("max_len {} must be at least 8", self.max_len));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.latent_dim == 0 || self.d_model == 0 {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Posterior parameters; `sigma` is derived from the stored log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentStats {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Final encoder states `[len, d_model]` and the token mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub rc: f64,
    pub kl: f64,
}

/// `0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2)` against a standard normal prior.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Mean of `n` reparameterized draws `mu + sigma * eps_i`.
pub fn sample_fused_latent(stats: &LatentStats, n: usize, rng: &mut crate::numerics::Rng) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let eps = fused_noise(rng, 1, stats.mu.len(), n);
    Ok(fuse_with(stats, eps.data()))
}

/// `mu + sigma * eps` elementwise.
pub fn fuse_with(stats: &LatentStats, eps: &[f64]) -> Vec<f64> {
    stats
        .mu
        .iter()
        .zip(stats.sigma())
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Mean of `n` standard normal tensors of shape `[batch, dim]`.
pub fn fused_noise(rng: &mut crate::numerics::Rng, batch: usize, dim: usize, n: usize) -> Tensor {
    let mut acc = Tensor::zeros(&[batch, dim]);
    for _ in 0..n {
        acc.add_assign(&rng.standard_normal(&[batch, dim]));
    }
    let inv = 1.0 / n as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    acc
}

/// Padded source/target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_ids: Vec<usize>,
    pub tgt_mask: Vec<bool>,
}

fn pad_all(seqs: &[&TokenSequence]) -> (usize, Vec<usize>, Vec<bool>) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(len * seqs.len());
    let mut mask = Vec::with_capacity(len * seqs.len());
    for s in seqs {
        let p = (*s).clone().padded(len);
        ids.extend(p.ids);
        mask.extend(p.mask);
    }
    (len, ids, mask)
}

impl Batch {
    pub fn new(src: &[&TokenSequence], tgt: &[&TokenSequence]) -> Result<Self> {
        if src.is_empty() || src.len() != tgt.len() {
            return Err(Error::invalid("batch needs equal, non-zero source and target counts"));
        }
        let (src_len, src_ids, src_mask) = pad_all(src);
        let (tgt_len, tgt_ids, tgt_mask) = pad_all(tgt);
        Ok(Batch {
            size: src.len(),
            src_len,
            src_ids,
            src_mask,
            tgt_len,
            tgt_ids,
            tgt_mask,
        })
    }

    /// Row `t` of each target is trained to predict token `t + 1`; the last
    /// row and padding carry `<Pad>`, which the loss ignores.
    pub fn shifted_targets(&self) -> Vec<usize> {
        shift(&self.tgt_ids, &self.tgt_mask, self.tgt_len)
    }
}

fn shift(ids: &[usize], mask: &[bool], len: usize) -> Vec<usize> {
    let mut out = vec![PAD_ID; ids.len()];
    for (row, o) in out.chunks_mut(len.max(1)).enumerate() {
        for t in 0..len.saturating_sub(1) {
            let j = row * len + t + 1;
            if mask[j] {
                o[t] = ids[j];
            }
        }
    }
    out
}

/// How a training or validation forward pass treats the latent and condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOptions {
    /// Mean noise `[batch, latent_dim]`; `None` uses `Z = mu`.
    pub noise: Option<Tensor>,
    /// Extract `c` from the target instead of using the null vector.
    pub use_condition: bool,
    pub kl_weight: f64,
}

/// Loss nodes of a batch forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rc: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CRepair {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const CHECKPOINT_KIND: &str = "crepair-model";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: ModelConfig,
    #[serde(default)]
    vocab: Option<String>,
}

impl CRepair {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut p = ParamStore::new();
        let (d, f, l, v) = (config.d_model, config.ffn_dim, config.latent_dim, config.vocab_size);
        let n_rel = 2 * config.max_rel + 1;
        let lin = 1.0 / (d as f64).sqrt();

        let layer_norm = |p: &mut ParamStore, name: &str| {
            p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
        };
        let attention = |p: &mut ParamStore, init: &mut Init, name: &str, rel: bool| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("{name}.{w}"), init.normal(&[d, d], lin));
            }
            p.insert(format!("{name}.bo"), Tensor::zeros(&[d]));
            if rel {
                p.insert(format!("{name}.rel"), init.normal(&[n_rel, d], 0.1));
            }
        };
        let ffn = |p: &mut ParamStore, init: &mut Init, name: &str| {
            p.insert(format!("{name}.w1"), init.normal(&[d, f], lin));
            p.insert(format!("{name}.b1"), Tensor::zeros(&[f]));
            p.insert(format!("{name}.w2"), init.normal(&[f, d], 1.0 / (f as f64).sqrt()));
            p.insert(format!("{name}.b2"), Tensor::zeros(&[d]));
        };

        p.insert("embed", init.normal(&[v, d], 1.0));
        for i in 0..config.n_enc_layers {
            layer_norm(&mut p, &format!("enc.{i}.ln1"));
            attention(&mut p, &mut init, &format!("enc.{i}.attn"), true);
            layer_norm(&mut p, &format!("enc.{i}.ln2"));
            ffn(&mut p, &mut init, &format!("enc.{i}.ffn"));
        }
        layer_norm(&mut p, "enc.ln");

        p.insert("lat.w", init.normal(&[d, 1], lin));
        let conv = 1.0 / ((3 * d) as f64).sqrt();
        p.insert("lat.mu.w", init.normal(&[3, d, l], conv));
        p.insert("lat.mu.b", Tensor::zeros(&[l]));
        p.insert("lat.lv.w", init.normal(&[3, d, l], conv * 0.1));
        p.insert("lat.lv.b", Tensor::zeros(&[l]));

        layer_norm(&mut p, "cond.ln");
        attention(&mut p, &mut init, "cond.attn", true);
        p.insert("cond.proj.w", init.normal(&[d, l], lin));
        p.insert("cond.proj.b", Tensor::zeros(&[l]));
        p.insert("cond.null", Tensor::zeros(&[l]));

        let lat = 1.0 / (l as f64).sqrt();
        p.insert("mem.z.w", init.normal(&[l, d], lat));
        p.insert("mem.c.w", init.normal(&[l, d], lat));
        layer_norm(&mut p, "mem.ln");

        for i in 0..config.n_dec_layers {
            layer_norm(&mut p, &format!("dec.{i}.ln1"));
            attention(&mut p, &mut init, &format!("dec.{i}.self"), true);
            layer_norm(&mut p, &format!("dec.{i}.ln2"));
            attention(&mut p, &mut init, &format!("dec.{i}.cross"), false);
            layer_norm(&mut p, &format!("dec.{i}.ln3"));
            ffn(&mut p, &mut init, &format!("dec.{i}.ffn"));
        }
        layer_norm(&mut p, "dec.ln");
        p.insert("out.w", init.normal(&[d, v], lin));
        p.insert("out.b", Tensor::zeros(&[v]));

        Ok(CRepair { config, params: p })
    }

    fn check_len(&self, seq: &TokenSequence, what: &str) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "{what} has {} tokens, more than max_len {}",
                seq.len(),
                self.config.max_len
            )));
        }
        if seq.is_empty() {
            return Err(Error::invalid(format!("{what} is empty")));
        }
        Ok(())
    }

    pub fn encode_forward(&self, tokens: &TokenSequence) -> Result<EncoderOutput> {
        self.check_len(tokens, "input")?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = encoder(&mut tape, &p, &self.config, &tokens.ids, &tokens.mask, 1, tokens.len())?;
        Ok(EncoderOutput {
            states: tape.value(e).clone(),
            mask: tokens.mask.clone(),
        })
    }

    pub fn latent_stats(&self, enc: &EncoderOutput) -> Result<LatentStats> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(enc.states.clone());
        let lat = latent(&mut tape, &p, &self.config, e, &enc.mask, 1, enc.len())?;
        Ok(LatentStats {
            mu: tape.value(lat.mu).data().to_vec(),
            log_var: tape.value(lat.log_var).data().to_vec(),
        })
    }

    /// Pooling weights the latent heads put on each encoder position.
    pub fn latent_weights(&self, enc: &EncoderOutput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(enc.states.clone());
        let lat = latent(&mut tape, &p, &self.config, e, &enc.mask, 1, enc.len())?;
        Ok(tape.value(lat.weights).data().to_vec())
    }

    /// Condition vector from a target, or the null vector for `None`.
    pub fn extract_condition(&self, target: Option<&TokenSequence>) -> Result<Vec<f64>> {
        if let Some(t) = target {
            self.check_len(t, "target")?;
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let c = condition(
            &mut tape,
            &p,
            &self.config,
            target.map(|t| (t.ids.as_slice(), t.mask.as_slice(), t.len())),
            1,
        )?;
        Ok(tape.value(c).data().to_vec())
    }

    /// Logits `[prefix len, vocab]` for a single example.
    pub fn decode_forward(&self, enc: &EncoderOutput, z: &[f64], c: &[f64], prefix: &TokenSequence) -> Result<Tensor> {
        self.check_len(prefix, "decoder prefix")?;
        let l = self.config.latent_dim;
        if z.len() != l || c.len() != l {
            return Err(Error::shape("decode_forward", &[z.len(), c.len()], &[l, l]));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.constant(enc.states.clone());
        let zv = tape.constant(Tensor::new(vec![1, l], z.to_vec())?);
        let cv = tape.constant(Tensor::new(vec![1, l], c.to_vec())?);
        let m = memory(&mut tape, &p, &self.config, e, zv, cv, 1, enc.len())?;
        let cross = cross_kv(&mut tape, &p, &self.config, m)?;
        let states = decoder(
            &mut tape,
            &p,
            &self.config,
            &DecoderInput {
                ids: &prefix.ids,
                mask: &prefix.mask,
                batch: 1,
                len: prefix.len(),
            },
            &CrossMemory {
                kv: &cross,
                mask: &enc.mask,
                len: enc.len(),
                kv_map: None,
            },
        )?;
        let logits = output(&mut tape, &p, states)?;
        Ok(tape.value(logits).clone())
    }

    /// Noise-off, null-condition logits of `target` given `input`.
    pub fn inference_logits(&self, input: &TokenSequence, target: &TokenSequence) -> Result<Tensor> {
        let enc = self.encode_forward(input)?;
        let stats = self.latent_stats(&enc)?;
        let c = self.extract_condition(None)?;
        self.decode_forward(&enc, &stats.mu, &c, target)
    }

    /// Builds the full training graph for `batch`.
    pub fn batch_loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        p: &Bound<'p>,
        batch: &Batch,
        opts: &ForwardOptions,
    ) -> Result<LossVars> {
        let cfg = &self.config;
        let (b, ts, tt) = (batch.size, batch.src_len, batch.tgt_len);
        if ts > cfg.max_len || tt > cfg.max_len {
            return Err(Error::invalid(format!(
                "batch lengths {ts}/{tt} exceed max_len {}",
                cfg.max_len
            )));
        }
        let e = encoder(tape, p, cfg, &batch.src_ids, &batch.src_mask, b, ts)?;
        let LatentVars { mu, log_var: lv, .. } = latent(tape, p, cfg, e, &batch.src_mask, b, ts)?;
        let z = match &opts.noise {
            Some(eps) => {
                let half = tape.scale(lv, 0.5);
                let sigma = tape.exp(half);
                let eps = tape.constant(eps.clone());
                let noise = tape.mul(sigma, eps)?;
                tape.add(mu, noise)?
            }
            None => mu,
        };
        let target = opts
            .use_condition
            .then(|| (batch.tgt_ids.as_slice(), batch.tgt_mask.as_slice(), tt));
        let c = condition(tape, p, cfg, target, b)?;
        let m = memory(tape, p, cfg, e, z, c, b, ts)?;
        let cross = cross_kv(tape, p, cfg, m)?;
        let states = decoder(
            tape,
            p,
            cfg,
            &DecoderInput {
                ids: &batch.tgt_ids,
                mask: &batch.tgt_mask,
                batch: b,
                len: tt,
            },
            &CrossMemory {
                kv: &cross,
                mask: &batch.src_mask,
                len: ts,
                kv_map: None,
            },
        )?;
        let logits = output(tape, p, states)?;
        let rc = tape.cross_entropy(logits, &batch.shifted_targets(), PAD_ID)?;
        let kl = kl_graph(tape, mu, lv, b)?;
        let weighted = tape.scale(kl, opts.kl_weight);
        let total = tape.add(rc, weighted)?;
        Ok(LossVars { total, rc, kl })
    }

    pub fn to_checkpoint(&self, vocab: Option<&BpeVocab>) -> Result<Checkpoint> {
        let header = Header {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            vocab: vocab.map(BpeVocab::to_text),
        };
        Ok(Checkpoint {
            header: serde_json::to_string(&header)?,
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<(Self, Option<BpeVocab>)> {
        let header: Header = serde_json::from_str(&ckpt.header)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::data(format!("checkpoint kind {:?} is not a model", header.kind)));
        }
        let mut model = CRepair::new(header.config, 0)?;
        if ckpt.tensors.len() != model.params.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, config expects {}",
                ckpt.tensors.len(),
                model.params.len()
            )));
        }
        for (name, tensor) in ckpt.tensors {
            let slot = model
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::data(format!("checkpoint tensor {name} is not a model parameter")))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::data(format!(
                    "checkpoint tensor {name} has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        let vocab = header.vocab.as_deref().map(BpeVocab::from_text).transpose()?;
        Ok((model, vocab))
    }

    pub fn save(&self, path: &Path, vocab: Option<&BpeVocab>) -> Result<()> {
        self.to_checkpoint(vocab)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<BpeVocab>)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// Loads a checkpoint and fails unless it was written with `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<(Self, Option<BpeVocab>)> {
        let (model, vocab) = Self::load(path)?;
        if &model.config != expected {
            return Err(Error::data(format!(
                "checkpoint config {:?} does not match requested {:?}",
                model.config, expected
            )));
        }
        Ok((model, vocab))
    }
}

/// Value-level loss for one example: teacher-forced cross-entropy on
/// `target` plus `kl_weight` times the KL term.
pub fn loss(logits: &Tensor, target: &TokenSequence, stats: &LatentStats, kl_weight: f64) -> Result<LossParts> {
    if logits.rank() != 2 || logits.shape()[0] != target.len() {
        return Err(Error::shape("loss", logits.shape(), &[target.len()]));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let targets = shift(&target.ids, &target.mask, target.len());
    let rc = tape.cross_entropy(l, &targets, PAD_ID)?;
    let rc = tape.value(rc).item();
    let kl = kl_divergence(&stats.mu, &stats.log_var);
    check_finite(rc, kl)?;
    Ok(LossParts {
        total: rc + kl_weight * kl,
        rc,
        kl,
    })
}

pub(crate) fn check_finite(rc: f64, kl: f64) -> Result<()> {
    if !rc.is_finite() {
        return Err(Error::numeric(format!("reconstruction loss is {rc}")));
    }
    if !kl.is_finite() {
        return Err(Error::numeric(format!("KL loss is {kl}")));
    }
    Ok(())
}

// ---- graph builders ----

fn layer_norm(tape: &mut Tape<'_>, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{name}.g"))?;
    let b = p.var(&format!("{name}.b"))?;
    tape.layer_norm(x, g, b, 1)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

fn feed_forward(tape: &mut Tape<'_>, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let h = linear(tape, x, p.var(&format!("{name}.w1"))?, Some(p.var(&format!("{name}.b1"))?))?;
    let h = tape.relu(h);
    linear(tape, h, p.var(&format!("{name}.w2"))?, Some(p.var(&format!("{name}.b2"))?))
}

/// Self-attention sublayer output (before the residual add).
fn self_attention(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    spec: AttentionSpec,
) -> Result<Var> {
    let q = tape.matmul(x, p.var(&format!("{name}.wq"))?)?;
    let k = tape.matmul(x, p.var(&format!("{name}.wk"))?)?;
    let v = tape.matmul(x, p.var(&format!("{name}.wv"))?)?;
    let rel = p.var(&format!("{name}.rel"))?;
    let o = tape.attention(q, k, v, Some(rel), spec)?;
    linear(tape, o, p.var(&format!("{name}.wo"))?, Some(p.var(&format!("{name}.bo"))?))
}

fn self_spec(cfg: &ModelConfig, mask: &[bool], batch: usize, len: usize, causal: bool) -> AttentionSpec {
    AttentionSpec {
        batch,
        q_len: len,
        kv_len: len,
        heads: cfg.n_heads,
        key_mask: mask.to_vec(),
        causal,
        max_rel: cfg.max_rel,
        kv_map: None,
    }
}

/// Encoder states `[batch * len, d_model]` after the final layer norm.
pub fn encoder(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    ids: &[usize],
    mask: &[bool],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let mut x = tape.embedding(p.var("embed")?, ids)?;
    for i in 0..cfg.n_enc_layers {
        let h = layer_norm(tape, p, &format!("enc.{i}.ln1"), x)?;
        let a = self_attention(tape, p, &format!("enc.{i}.attn"), h, self_spec(cfg, mask, batch, len, false))?;
        x = tape.add(x, a)?;
        let h = layer_norm(tape, p, &format!("enc.{i}.ln2"), x)?;
        let f = feed_forward(tape, p, &format!("enc.{i}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    layer_norm(tape, p, "enc.ln", x)
}

/// Per-row count of real positions, erroring on an all-padding row.
fn real_counts(mask: &[bool], batch: usize, len: usize) -> Result<Vec<f64>> {
    (0..batch)
        .map(|b| {
            let n = mask[b * len..(b + 1) * len].iter().filter(|&&m| m).count();
            if n == 0 {
                Err(Error::invalid("every position of a sequence is masked"))
            } else {
                Ok(n as f64)
            }
        })
        .collect()
}

/// Mean over the real positions of `x: [batch, len, width]`, giving `[batch, width]`.
fn masked_mean(tape: &mut Tape<'_>, x: Var, mask: &[bool], counts: &[f64], batch: usize, len: usize) -> Result<Var> {
    let w: Vec<f64> = (0..batch * len)
        .map(|i| if mask[i] { 1.0 / counts[i / len] } else { 0.0 })
        .collect();
    let w = tape.constant(Tensor::new(vec![batch, len, 1], w)?);
    let xw = tape.mul(x, w)?;
    tape.sum(xw, 1)
}

/// Outputs of [`latent`].
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// `[batch, latent_dim]`
    pub mu: Var,
    /// `[batch, latent_dim]`
    pub log_var: Var,
    /// Pooling weights `[batch, len]`, summing to one over real positions.
    pub weights: Var,
}

/// Posterior mean and log-variance.
///
/// Positions get softmax weights from a learned scoring vector. The states,
/// scaled by weight times the number of real positions, feed two kernel-3
/// convolutions whose outputs are averaged over real positions. With an
/// identity kernel this reproduces the weighted mean of the states.
pub fn latent(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    e: Var,
    mask: &[bool],
    batch: usize,
    len: usize,
) -> Result<LatentVars> {
    let counts = real_counts(mask, batch, len)?;
    let scores = tape.matmul(e, p.var("lat.w")?)?;
    let scores = tape.reshape(scores, &[batch, len])?;
    let bias: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::NEG_INFINITY }).collect();
    let bias = tape.constant(Tensor::new(vec![batch, len], bias)?);
    let scores = tape.add(scores, bias)?;
    let pool = tape.softmax(scores, 1)?;
    let n = tape.constant(Tensor::new(vec![batch, 1], counts.clone())?);
    let weights = tape.mul(pool, n)?;
    let weights = tape.reshape(weights, &[batch, len, 1])?;
    let states = tape.reshape(e, &[batch, len, cfg.d_model])?;
    let weighted = tape.mul(states, weights)?;
    let mut head = |name: &str| -> Result<Var> {
        let w = p.var(&format!("lat.{name}.w"))?;
        let b = p.var(&format!("lat.{name}.b"))?;
        let y = tape.conv1d(weighted, w, b)?;
        masked_mean(tape, y, mask, &counts, batch, len)
    };
    let mu = head("mu")?;
    let log_var = head("lv")?;
    Ok(LatentVars {
        mu,
        log_var,
        weights: pool,
    })
}

/// Condition vectors `[batch, latent_dim]`. `None` broadcasts the null vector.
pub fn condition(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    target: Option<(&[usize], &[bool], usize)>,
    batch: usize,
) -> Result<Var> {
    let l = cfg.latent_dim;
    let Some((ids, mask, len)) = target else {
        let null = tape.reshape(p.var("cond.null")?, &[1, l])?;
        let zeros = tape.constant(Tensor::zeros(&[batch, l]));
        return tape.add(zeros, null);
    };
    let counts = real_counts(mask, batch, len)?;
    let x = tape.embedding(p.var("embed")?, ids)?;
    let h = layer_norm(tape, p, "cond.ln", x)?;
    let a = self_attention(tape, p, "cond.attn", h, self_spec(cfg, mask, batch, len, false))?;
    let x = tape.add(x, a)?;
    let x = tape.reshape(x, &[batch, len, cfg.d_model])?;
    let pooled = masked_mean(tape, x, mask, &counts, batch, len)?;
    let y = linear(tape, pooled, p.var("cond.proj.w")?, Some(p.var("cond.proj.b")?))?;
    Ok(tape.tanh(y))
}

/// Decoder memory `LN(E + Z W_z + c W_c)`, `[batch * len, d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn memory(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    e: Var,
    z: Var,
    c: Var,
    batch: usize,
    len: usize,
) -> Result<Var> {
    let d = cfg.d_model;
    let zp = tape.matmul(z, p.var("mem.z.w")?)?;
    let zp = tape.reshape(zp, &[batch, 1, d])?;
    let cp = tape.matmul(c, p.var("mem.c.w")?)?;
    let cp = tape.reshape(cp, &[batch, 1, d])?;
    let x = tape.reshape(e, &[batch, len, d])?;
    let x = tape.add(x, zp)?;
    let x = tape.add(x, cp)?;
    let x = tape.reshape(x, &[batch * len, d])?;
    layer_norm(tape, p, "mem.ln", x)
}

/// Cross-attention keys and values for every decoder layer.
pub fn cross_kv(tape: &mut Tape<'_>, p: &Bound<'_>, cfg: &ModelConfig, m: Var) -> Result<Vec<(Var, Var)>> {
    (0..cfg.n_dec_layers)
        .map(|i| {
            let k = tape.matmul(m, p.var(&format!("dec.{i}.cross.wk"))?)?;
            let v = tape.matmul(m, p.var(&format!("dec.{i}.cross.wv"))?)?;
            Ok((k, v))
        })
        .collect()
}

pub struct DecoderInput<'a> {
    pub ids: &'a [usize],
    pub mask: &'a [bool],
    pub batch: usize,
    pub len: usize,
}

pub struct CrossMemory<'a> {
    /// Per-layer `(K, V)` from [`cross_kv`].
    pub kv: &'a [(Var, Var)],
    pub mask: &'a [bool],
    pub len: usize,
    /// Memory sequence used by each decoder row; `None` is the identity.
    pub kv_map: Option<Vec<usize>>,
}

/// Decoder states `[batch * len, d_model]` after the final layer norm.
pub fn decoder(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    cfg: &ModelConfig,
    input: &DecoderInput<'_>,
    mem: &CrossMemory<'_>,
) -> Result<Var> {
    let mut x = tape.embedding(p.var("embed")?, input.ids)?;
    for i in 0..cfg.n_dec_layers {
        let h = layer_norm(tape, p, &format!("dec.{i}.ln1"), x)?;
        let spec = self_spec(cfg, input.mask, input.batch, input.len, true);
        let a = self_attention(tape, p, &format!("dec.{i}.self"), h, spec)?;
        x = tape.add(x, a)?;

        let h = layer_norm(tape, p, &format!("dec.{i}.ln2"), x)?;
        let q = tape.matmul(h, p.var(&format!("dec.{i}.cross.wq"))?)?;
        let (k, v) = mem.kv[i];
        let spec = AttentionSpec {
            batch: input.batch,
            q_len: input.len,
            kv_len: mem.len,
            heads: cfg.n_heads,
            key_mask: mem.mask.to_vec(),
            causal: false,
            max_rel: cfg.max_rel,
            kv_map: mem.kv_map.clone(),
        };
        let o = tape.attention(q, k, v, None, spec)?;
        let o = linear(
            tape,
            o,
            p.var(&format!("dec.{i}.cross.wo"))?,
            Some(p.var(&format!("dec.{i}.cross.bo"))?),
        )?;
        x = tape.add(x, o)?;

        let h = layer_norm(tape, p, &format!("dec.{i}.ln3"), x)?;
        let f = feed_forward(tape, p, &format!("dec.{i}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    layer_norm(tape, p, "dec.ln", x)
}

/// Vocabulary logits for decoder states.
pub fn output(tape: &mut Tape<'_>, p: &Bound<'_>, states: Var) -> Result<Var> {
    linear(tape, states, p.var("out.w")?, Some(p.var("out.b")?))
}

/// Batch-mean KL against the standard normal prior.
fn kl_graph(tape: &mut Tape<'_>, mu: Var, lv: Var, batch: usize) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(lv);
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, lv)?;
    let s = tape.add_scalar(s, -1.0);
    let total = tape.sum_all(s);
    Ok(tape.scale(total, 0.5 / batch as f64))
}

#[cfg(test)]
mod tests;
