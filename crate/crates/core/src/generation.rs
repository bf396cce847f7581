//! Beam-search decoding of candidate patches.
//!
//! Each step expands every live hypothesis by every token except `<Pad>`
//! and `<Bos>` and ranks the expansions (ties go to the lower token id,
//! then the better-ranked parent). `<Eos>` expansions ranked within the
//! top `width` move to a completed pool; the live beam is refilled with
//! the `width` best unfinished expansions. The search ends when no live
//! hypothesis is left, when the pool holds `width` hypotheses and no live
//! one can still outscore them, or after `max_len` generated tokens, when
//! the surviving live hypotheses join the pool as truncated.

use crate::error::{Error, Result};
use crate::model::{condition, cross_kv, decoder, encoder, latent, memory, output, CRepair, CrossMemory, DecoderInput};
use crate::numerics::{Rng, Tape, Tensor};
use crate::tokenizer::{BpeVocab, TokenSequence, BOS_ID, EOS_ID, PAD_ID};

/// Next-token log-probabilities for a set of equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BeamOptions {
    /// Rank by mean per-token log-probability instead of the sum.
    pub length_normalize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, starting with `<Bos>`.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn rank_score(&self, opts: BeamOptions) -> f64 {
        if opts.length_normalize {
            self.log_prob / (self.ids.len() - 1).max(1) as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePatch {
    pub text: String,
    pub token_ids: TokenSequence,
    pub log_prob: f64,
    /// 1-based.
    pub rank: usize,
}

fn by_rank(opts: BeamOptions) -> impl Fn(&Hypothesis, &Hypothesis) -> std::cmp::Ordering {
    move |a, b| {
        b.rank_score(opts)
            .total_cmp(&a.rank_score(opts))
            .then_with(|| a.ids.cmp(&b.ids))
    }
}

/// Beam search over any scorer. Returns at most `width` hypotheses, best first.
pub fn beam_search_ids<S: StepScorer + ?Sized>(
    scorer: &S,
    width: usize,
    max_len: usize,
    opts: BeamOptions,
) -> Result<Vec<Hypothesis>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        ids: vec![BOS_ID],
        log_prob: 0.0,
        finished: false,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.ids.clone()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (parent, (h, row)) in live.iter().zip(&rows).enumerate() {
            for (token, &lp) in row.iter().enumerate() {
                if token == PAD_ID || token == BOS_ID || lp == f64::NEG_INFINITY {
                    continue;
                }
                expansions.push((h.log_prob + lp, token, parent));
            }
        }
        let key = |&(score, token, parent): &(f64, usize, usize)| {
            let len = live[parent].ids.len();
            let s = if opts.length_normalize { score / len as f64 } else { score };
            (s, token, parent)
        };
        expansions.sort_by(|a, b| {
            let (sa, ta, pa) = key(a);
            let (sb, tb, pb) = key(b);
            sb.total_cmp(&sa).then(ta.cmp(&tb)).then(pa.cmp(&pb))
        });
        let mut next = Vec::with_capacity(width);
        for (rank, (score, token, parent)) in expansions.into_iter().enumerate() {
            let finished = token == EOS_ID;
            // A completion counts only if it ranks within the beam; live
            // slots are refilled from the best unfinished expansions.
            if finished && rank >= width {
                continue;
            }
            let mut ids = live[parent].ids.clone();
            ids.push(token);
            let h = Hypothesis {
                ids,
                log_prob: score,
                finished,
            };
            if finished {
                pool.push(h);
            } else {
                next.push(h);
                if next.len() == width {
                    break;
                }
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if step + 1 == max_len {
            pool.append(&mut live);
            break;
        }
        if pool.len() >= width {
            pool.sort_by(by_rank(opts));
            let worst = pool[width - 1].rank_score(opts);
            // Raw scores only fall as hypotheses grow, so no live one can
            // overtake the pool once the best of them is below its worst.
            let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if opts.length_normalize || best_live <= worst {
                break;
            }
        }
    }
    pool.sort_by(by_rank(opts));
    pool.truncate(width);
    Ok(pool)
}

/// Argmax decoding (ties to the lower id), the same stopping rule as the beam.
pub fn greedy_ids<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        ids: vec![BOS_ID],
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_len {
        let row = scorer.next_log_probs(std::slice::from_ref(&h.ids))?.remove(0);
        let (token, lp) = row
            .iter()
            .enumerate()
            .filter(|&(t, _)| t != PAD_ID && t != BOS_ID)
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &lp)| if lp > best.1 { (t, lp) } else { best });
        if token == usize::MAX {
            break;
        }
        h.ids.push(token);
        h.log_prob += lp;
        if token == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Decoder scorer for one input: the encoder, latent and cross-attention
/// keys and values are computed once and shared by every hypothesis.
pub struct ModelScorer<'m> {
    model: &'m CRepair,
    cross: Vec<(Tensor, Tensor)>,
    mem_mask: Vec<bool>,
}

impl<'m> ModelScorer<'m> {
    /// `sample` draws `Z` from the posterior instead of using `mu`.
    pub fn new(model: &'m CRepair, input: &TokenSequence, sample: Option<&mut Rng>) -> Result<Self> {
        let cfg = &model.config;
        if input.len() > cfg.max_len {
            return Err(Error::invalid(format!("input of {} tokens exceeds max_len {}", input.len(), cfg.max_len)));
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let len = input.len();
        let e = encoder(&mut tape, &p, cfg, &input.ids, &input.mask, 1, len)?;
        let lat = latent(&mut tape, &p, cfg, e, &input.mask, 1, len)?;
        let z = match sample {
            Some(rng) => {
                let eps = crate::model::fused_noise(rng, 1, cfg.latent_dim, cfg.sample_count);
                let eps = tape.constant(eps);
                let half = tape.scale(lat.log_var, 0.5);
                let sigma = tape.exp(half);
                let noise = tape.mul(sigma, eps)?;
                tape.add(lat.mu, noise)?
            }
            None => lat.mu,
        };
        let c = condition(&mut tape, &p, cfg, None, 1)?;
        let m = memory(&mut tape, &p, cfg, e, z, c, 1, len)?;
        let kv = cross_kv(&mut tape, &p, cfg, m)?;
        let cross = kv
            .into_iter()
            .map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
            .collect();
        Ok(ModelScorer {
            model,
            cross,
            mem_mask: input.mask.clone(),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.model.config;
        let batch = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if len == 0 || len > cfg.max_len || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::invalid("prefixes must share a length in 1..=max_len"));
        }
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, false);
        let kv: Vec<_> = self
            .cross
            .iter()
            .map(|(k, v)| (tape.leaf_ref(k, false), tape.leaf_ref(v, false)))
            .collect();
        let ids = prefixes.concat();
        let mask = vec![true; ids.len()];
        let states = decoder(
            &mut tape,
            &p,
            cfg,
            &DecoderInput {
                ids: &ids,
                mask: &mask,
                batch,
                len,
            },
            &CrossMemory {
                kv: &kv,
                mask: &self.mem_mask,
                len: self.mem_mask.len(),
                kv_map: Some(vec![0; batch]),
            },
        )?;
        let last: Vec<usize> = (0..batch).map(|b| b * len + len - 1).collect();
        let last = tape.embedding(states, &last)?;
        let logits = output(&mut tape, &p, last)?;
        Ok(tape
            .value(logits)
            .data()
            .chunks(cfg.vocab_size)
            .map(log_softmax)
            .collect())
    }
}

/// Sum of next-token log-probabilities of `ids` (starting with `<Bos>`),
/// from one full teacher-forced pass.
pub fn sequence_log_prob(model: &CRepair, input: &TokenSequence, ids: &[usize]) -> Result<f64> {
    let prefix = TokenSequence::new(ids[..ids.len() - 1].to_vec());
    let logits = model.inference_logits(input, &prefix)?;
    Ok(logits
        .data()
        .chunks(model.config.vocab_size)
        .zip(&ids[1..])
        .map(|(row, &t)| log_softmax(row)[t])
        .sum())
}

fn to_candidates(vocab: &BpeVocab, hyps: Vec<Hypothesis>) -> Result<Vec<CandidatePatch>> {
    hyps.into_iter()
        .enumerate()
        .map(|(i, h)| {
            Ok(CandidatePatch {
                text: vocab.decode(&h.ids)?,
                log_prob: h.log_prob,
                token_ids: TokenSequence::new(h.ids),
                rank: i + 1,
            })
        })
        .collect()
}

/// Noise-off, null-condition beam search. Inputs longer than the model's
/// `max_len` are right-truncated with a warning.
pub fn beam_search(
    model: &CRepair,
    vocab: &BpeVocab,
    input: &TokenSequence,
    width: usize,
    max_len: usize,
) -> Result<Vec<CandidatePatch>> {
    let input = fit_input(model, input);
    let scorer = ModelScorer::new(model, &input, None)?;
    let max_len = max_len.min(model.config.max_len - 1);
    to_candidates(vocab, beam_search_ids(&scorer, width, max_len, BeamOptions::default())?)
}

pub fn greedy(model: &CRepair, vocab: &BpeVocab, input: &TokenSequence, max_len: usize) -> Result<CandidatePatch> {
    let input = fit_input(model, input);
    let scorer = ModelScorer::new(model, &input, None)?;
    let h = greedy_ids(&scorer, max_len.min(model.config.max_len - 1))?;
    Ok(to_candidates(vocab, vec![h])?.remove(0))
}

fn fit_input(model: &CRepair, input: &TokenSequence) -> TokenSequence {
    if input.len() > model.config.max_len {
        log::warn!(
            "input of {} tokens truncated to max_len {}",
            input.len(),
            model.config.max_len
        );
    }
    input.clone().truncated(model.config.max_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table indexed by the last token.
    struct Bigram(Vec<Vec<f64>>);

    impl StepScorer for Bigram {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|p| log_softmax(&self.0[*p.last().unwrap()])).collect())
        }
    }

    fn table() -> Bigram {
        Bigram(vec![
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.2, 1.5, 1.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.2, 0.1, 0.9],
            vec![0.0, 0.0, 0.4, 1.1, 0.2],
        ])
    }

    #[test]
    fn width_one_is_greedy() {
        let s = table();
        let beam = beam_search_ids(&s, 1, 6, BeamOptions::default()).unwrap();
        let g = greedy_ids(&s, 6).unwrap();
        assert_eq!(beam[0].ids, g.ids);
        assert!((beam[0].log_prob - g.log_prob).abs() < 1e-12);
    }

    #[test]
    fn results_are_sorted_and_clean() {
        let s = table();
        let beam = beam_search_ids(&s, 5, 4, BeamOptions::default()).unwrap();
        assert_eq!(beam.len(), 5);
        for w in beam.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for h in &beam {
            assert_eq!(h.ids[0], BOS_ID);
            assert!(!h.ids[1..].contains(&BOS_ID) && !h.ids.contains(&PAD_ID));
            assert!(h.finished || h.ids.len() == 5);
        }
    }

    #[test]
    fn zero_width_is_an_error() {
        assert!(beam_search_ids(&table(), 0, 4, BeamOptions::default()).is_err());
    }

    #[test]
    fn length_normalized_ranking() {
        let opts = BeamOptions { length_normalize: true };
        let beam = beam_search_ids(&table(), 3, 4, opts).unwrap();
        for w in beam.windows(2) {
            assert!(w[0].rank_score(opts) >= w[1].rank_score(opts));
        }
    }

    fn tiny(vocab: usize, seed: u64) -> CRepair {
        let mut cfg = crate::model::ModelConfig::preset("tiny", vocab).unwrap();
        cfg.max_len = 12;
        CRepair::new(cfg, seed).unwrap()
    }

    fn input() -> TokenSequence {
        TokenSequence::new(vec![BOS_ID, 3, 4, 3, EOS_ID])
    }

    #[test]
    fn beam_scores_match_full_rescoring() {
        let model = tiny(9, 3);
        let x = input();
        let scorer = ModelScorer::new(&model, &x, None).unwrap();
        let beam = beam_search_ids(&scorer, 4, 6, BeamOptions::default()).unwrap();
        assert!(!beam.is_empty());
        for h in &beam {
            let full = sequence_log_prob(&model, &x, &h.ids).unwrap();
            assert!((full - h.log_prob).abs() < 1e-9, "{full} vs {}", h.log_prob);
        }
    }

    #[test]
    fn model_width_one_is_greedy() {
        let model = tiny(9, 5);
        let scorer = ModelScorer::new(&model, &input(), None).unwrap();
        let beam = beam_search_ids(&scorer, 1, 6, BeamOptions::default()).unwrap();
        assert_eq!(beam[0].ids, greedy_ids(&scorer, 6).unwrap().ids);
    }

    #[test]
    fn long_prefix_batches_agree_with_single_rows() {
        let model = tiny(9, 8);
        let scorer = ModelScorer::new(&model, &input(), None).unwrap();
        let a = vec![BOS_ID, 5, 6];
        let b = vec![BOS_ID, 7, 3];
        let both = scorer.next_log_probs(&[a.clone(), b.clone()]).unwrap();
        let one = scorer.next_log_probs(&[b]).unwrap();
        for (x, y) in both[1].iter().zip(&one[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

