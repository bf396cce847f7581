use super::*;
use crate::numerics::Rng;
use crate::tokenizer::{BOS_ID, EOS_ID};

fn tiny(vocab: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: layers,
        n_dec_layers: layers,
        ffn_dim: 12,
        latent_dim: 4,
        max_len: 16,
        vocab_size: vocab,
        sample_count: 3,
        max_rel: 4,
    }
}

fn seq(ids: &[usize]) -> TokenSequence {
    TokenSequence::new(ids.to_vec())
}

#[test]
fn presets_validate() {
    for name in PRESETS {
        let cfg = ModelConfig::preset(name, 500).unwrap();
        assert_eq!(cfg.d_model % cfg.n_heads, 0);
    }
    let toy = ModelConfig::preset("toy", 2000).unwrap();
    assert_eq!((toy.d_model, toy.n_heads, toy.n_enc_layers, toy.n_dec_layers), (128, 4, 2, 2));
    assert!(ModelConfig::preset("huge", 10).is_err());
    let mut bad = tiny(10, 1);
    bad.n_heads = 3;
    assert!(bad.validate().is_err());
    bad = tiny(10, 1);
    bad.sample_count = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn shapes() {
    let m = CRepair::new(tiny(11, 1), 3).unwrap();
    let input = seq(&[BOS_ID, 7, 8, 9, EOS_ID]);
    let enc = m.encode_forward(&input).unwrap();
    assert_eq!(enc.states.shape(), &[5, 8]);
    let stats = m.latent_stats(&enc).unwrap();
    assert_eq!(stats.mu.len(), 4);
    assert!(stats.sigma().iter().all(|&s| s > 0.0));
    let c = m.extract_condition(Some(&seq(&[BOS_ID, 7, EOS_ID]))).unwrap();
    assert_eq!(c.len(), 4);
    let logits = m.decode_forward(&enc, &stats.mu, &c, &seq(&[BOS_ID, 7, 10])).unwrap();
    assert_eq!(logits.shape(), &[3, 11]);
    let long = seq(&[5; 17]);
    assert!(m.encode_forward(&long).is_err());
    assert!(m.decode_forward(&enc, &stats.mu, &c, &seq(&[])).is_err());
}

#[test]
fn single_token_attention_is_value_plus_rel() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
    let k = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.2, -0.4, 0.0]).unwrap());
    let v = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let rel: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let rel = tape.constant(Tensor::new(vec![3, 4], rel).unwrap());
    let spec = AttentionSpec {
        batch: 1,
        q_len: 1,
        kv_len: 1,
        heads: 2,
        key_mask: vec![true],
        causal: false,
        max_rel: 1,
        kv_map: None,
    };
    let o = tape.attention(q, k, v, Some(rel), spec).unwrap();
    // Offset 0 is table row 1.
    let expected = [1.4, 2.5, 3.6, 4.7];
    for (a, b) in tape.value(o).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn equal_scores_give_uniform_weights() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[3, 2]));
    let k = tape.constant(Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap());
    let v = tape.constant(Tensor::zeros(&[4, 2]));
    let spec = AttentionSpec {
        batch: 1,
        q_len: 3,
        kv_len: 4,
        heads: 1,
        key_mask: vec![true, true, true, false],
        causal: false,
        max_rel: 2,
        kv_map: None,
    };
    let o = tape.attention(q, k, v, None, spec).unwrap();
    for row in tape.attention_weights(o).unwrap().chunks(4) {
        for &w in &row[..3] {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(row[3], 0.0);
    }
}

#[test]
fn identity_conv_gives_weighted_mean() {
    let mut m = CRepair::new(tiny(10, 1), 1).unwrap();
    let (d, l) = (8, 4);
    let mut kernel = Tensor::zeros(&[3, d, l]);
    for j in 0..l {
        kernel.data_mut()[d * l + j * l + j] = 1.0;
    }
    *m.params.get_mut("lat.mu.w").unwrap() = kernel;
    let w: Vec<f64> = (0..d).map(|i| 0.1 * i as f64 - 0.3).collect();
    *m.params.get_mut("lat.w").unwrap() = Tensor::new(vec![d, 1], w.clone()).unwrap();
    let states: Vec<f64> = (0..3 * d).map(|i| ((i * 7) % 11) as f64 * 0.2 - 1.0).collect();
    let enc = EncoderOutput {
        states: Tensor::new(vec![3, d], states.clone()).unwrap(),
        mask: vec![true; 3],
    };
    let stats = m.latent_stats(&enc).unwrap();

    let scores: Vec<f64> = (0..3)
        .map(|t| (0..d).map(|i| states[t * d + i] * w[i]).sum())
        .collect();
    let z: f64 = scores.iter().map(|s| s.exp()).sum();
    let a: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
    for j in 0..l {
        let expected: f64 = (0..3).map(|t| a[t] * states[t * d + j]).sum();
        assert!((stats.mu[j] - expected).abs() < 1e-12, "{} vs {expected}", stats.mu[j]);
    }
}

#[test]
fn uniform_states_give_uniform_latent_weights() {
    let m = CRepair::new(tiny(10, 1), 1).unwrap();
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
    let enc = EncoderOutput {
        states: Tensor::new(vec![4, 8], row.repeat(4)).unwrap(),
        mask: vec![true, true, true, false],
    };
    let weights = m.latent_weights(&enc).unwrap();
    for &w in &weights[..3] {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(weights[3], 0.0);
}

#[test]
fn all_masked_latent_is_an_error() {
    let m = CRepair::new(tiny(10, 1), 1).unwrap();
    let enc = EncoderOutput {
        states: Tensor::zeros(&[2, 8]),
        mask: vec![false, false],
    };
    assert!(m.latent_stats(&enc).is_err());
}

#[test]
fn fusion_identities() {
    let stats = LatentStats {
        mu: vec![0.5, -1.0, 2.0],
        log_var: vec![0.1, -0.2, 0.3],
    };
    assert_eq!(fuse_with(&stats, &[0.0; 3]), stats.mu);
    let eps = [0.3, -0.7, 1.1];
    let one = fuse_with(&stats, &eps);
    let mean_eps: Vec<f64> = eps.iter().map(|e| (e + e + e) / 3.0).collect();
    for (a, b) in fuse_with(&stats, &mean_eps).iter().zip(&one) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(sample_fused_latent(&stats, 0, &mut Rng::new(1)).is_err());
    let a = sample_fused_latent(&stats, 5, &mut Rng::new(9)).unwrap();
    let b = sample_fused_latent(&stats, 5, &mut Rng::new(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn condition_contracts() {
    let m = CRepair::new(tiny(10, 1), 5).unwrap();
    let a = m.extract_condition(None).unwrap();
    let b = m.extract_condition(None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, m.params.get("cond.null").unwrap().data());

    let mut t = seq(&[BOS_ID, 7, 8, EOS_ID]).padded(7);
    let c1 = m.extract_condition(Some(&t)).unwrap();
    t.ids[5] = 9;
    t.ids[6] = 3;
    let c2 = m.extract_condition(Some(&t)).unwrap();
    assert_eq!(c1, c2);
    let short = m.extract_condition(Some(&seq(&[BOS_ID]))).unwrap();
    assert_eq!(short.len(), 4);
}

#[test]
fn decoder_is_causal_at_every_depth() {
    for layers in [1, 2, 4] {
        let m = CRepair::new(tiny(12, layers), 7).unwrap();
        let input = seq(&[BOS_ID, 5, 6, 7, 8, EOS_ID]);
        let enc = m.encode_forward(&input).unwrap();
        let stats = m.latent_stats(&enc).unwrap();
        let c = m.extract_condition(None).unwrap();
        let base = [BOS_ID, 9, 10, 11, 5, 6];
        let reference = m.decode_forward(&enc, &stats.mu, &c, &seq(&base)).unwrap();
        for t in 0..base.len() - 1 {
            let mut changed = base;
            changed[t + 1] = if base[t + 1] == 7 { 8 } else { 7 };
            let out = m.decode_forward(&enc, &stats.mu, &c, &seq(&changed)).unwrap();
            let rows = (t + 1) * 12;
            assert_eq!(&out.data()[..rows], &reference.data()[..rows], "layers {layers}, t {t}");
            assert_ne!(&out.data()[rows..], &reference.data()[rows..]);
        }
    }
}

#[test]
fn zero_latent_path_matches_plain_transformer() {
    let mut m = CRepair::new(tiny(12, 2), 4).unwrap();
    for name in ["mem.z.w", "mem.c.w"] {
        let shape = m.params.get(name).unwrap().shape().to_vec();
        *m.params.get_mut(name).unwrap() = Tensor::zeros(&shape);
    }
    let input = seq(&[BOS_ID, 5, 6, 7, EOS_ID]);
    let prefix = seq(&[BOS_ID, 8, 9]);
    let enc = m.encode_forward(&input).unwrap();
    let zeros = vec![0.0; 4];
    let got = m.decode_forward(&enc, &zeros, &zeros, &prefix).unwrap();

    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let e = tape.constant(enc.states.clone());
    let g = p.var("mem.ln.g").unwrap();
    let b = p.var("mem.ln.b").unwrap();
    let mem = tape.layer_norm(e, g, b, 1).unwrap();
    let kv = cross_kv(&mut tape, &p, &m.config, mem).unwrap();
    let states = decoder(
        &mut tape,
        &p,
        &m.config,
        &DecoderInput {
            ids: &prefix.ids,
            mask: &prefix.mask,
            batch: 1,
            len: 3,
        },
        &CrossMemory {
            kv: &kv,
            mask: &enc.mask,
            len: 5,
            kv_map: None,
        },
    )
    .unwrap();
    let logits = output(&mut tape, &p, states).unwrap();
    for (a, b) in got.data().iter().zip(tape.value(logits).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loss_closed_forms() {
    assert_eq!(kl_divergence(&[0.0; 6], &[0.0; 6]), 0.0);
    assert!((kl_divergence(&[1.0; 4], &[0.0; 4]) - 2.0).abs() < 1e-15);
    let stats = LatentStats {
        mu: vec![0.0; 4],
        log_var: vec![0.0; 4],
    };
    let target = seq(&[BOS_ID, 5, 6, EOS_ID]).padded(6);
    let logits = Tensor::zeros(&[6, 9]);
    let parts = loss(&logits, &target, &stats, 0.5).unwrap();
    assert!((parts.rc - 9f64.ln()).abs() < 1e-12);
    assert_eq!(parts.kl, 0.0);
    assert_eq!(parts.total, parts.rc);
    let bad = LatentStats {
        mu: vec![f64::NAN; 4],
        log_var: vec![0.0; 4],
    };
    let err = loss(&logits, &target, &bad, 1.0).unwrap_err().to_string();
    assert!(err.contains("KL"), "{err}");
}

#[test]
fn shifted_targets_align_with_next_token() {
    let a = seq(&[BOS_ID, 5, 6, EOS_ID]);
    let b = seq(&[BOS_ID, 7, EOS_ID]);
    let batch = Batch::new(&[&a, &b], &[&a, &b]).unwrap();
    assert_eq!(
        batch.shifted_targets(),
        vec![5, 6, EOS_ID, PAD_ID, 7, EOS_ID, PAD_ID, PAD_ID]
    );
}

fn random_batch() -> Batch {
    let a = seq(&[BOS_ID, 5, 6, 7, EOS_ID]);
    let b = seq(&[BOS_ID, 8, EOS_ID]);
    let ta = seq(&[BOS_ID, 9, EOS_ID]);
    let tb = seq(&[BOS_ID, 10, 11, EOS_ID]);
    Batch::new(&[&a, &b], &[&ta, &tb]).unwrap()
}

#[test]
fn batch_loss_matches_value_path() {
    let m = CRepair::new(tiny(12, 1), 8).unwrap();
    let batch = random_batch();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let opts = ForwardOptions {
        noise: None,
        use_condition: false,
        kl_weight: 0.3,
    };
    let lv = m.batch_loss(&mut tape, &p, &batch, &opts).unwrap();
    let batch_rc = tape.value(lv.rc).item();
    let batch_kl = tape.value(lv.kl).item();

    let mut rc_sum = 0.0;
    let mut tokens = 0.0;
    let mut kl_sum = 0.0;
    for (src, tgt) in [(&[BOS_ID, 5, 6, 7, EOS_ID][..], &[BOS_ID, 9, EOS_ID][..]), (&[BOS_ID, 8, EOS_ID], &[BOS_ID, 10, 11, EOS_ID])] {
        let src = seq(src);
        let tgt = seq(tgt);
        let enc = m.encode_forward(&src).unwrap();
        let stats = m.latent_stats(&enc).unwrap();
        let c = m.extract_condition(None).unwrap();
        let logits = m.decode_forward(&enc, &stats.mu, &c, &tgt).unwrap();
        let parts = loss(&logits, &tgt, &stats, 0.0).unwrap();
        let n = (tgt.len() - 1) as f64;
        rc_sum += parts.rc * n;
        tokens += n;
        kl_sum += parts.kl;
    }
    assert!((batch_rc - rc_sum / tokens).abs() < 1e-10, "{batch_rc} vs {}", rc_sum / tokens);
    assert!((batch_kl - kl_sum / 2.0).abs() < 1e-10);
}

#[test]
fn every_parameter_gets_a_gradient() {
    let m = CRepair::new(tiny(12, 2), 2).unwrap();
    let batch = random_batch();
    let mut seen = vec![false; m.params.len()];
    for use_condition in [true, false] {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, true);
        let opts = ForwardOptions {
            noise: Some(fused_noise(&mut Rng::new(3), 2, 4, 3)),
            use_condition,
            kl_weight: 1.0,
        };
        let lv = m.batch_loss(&mut tape, &p, &batch, &opts).unwrap();
        let vars = p.vars().to_vec();
        let grads = tape.backward(lv.total).unwrap();
        for (i, v) in vars.into_iter().enumerate() {
            if let Some(g) = grads.get(v) {
                assert!(g.is_finite(), "{}", m.params.names()[i]);
                seen[i] |= g.data().iter().any(|&x| x != 0.0);
            }
        }
    }
    for (name, s) in m.params.names().iter().zip(seen) {
        assert!(s, "no gradient reached {name}");
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = CRepair::new(tiny(12, 1), 6).unwrap();
    m.save(&path, None).unwrap();
    let (back, vocab) = CRepair::load(&path).unwrap();
    assert_eq!(back, m);
    assert!(vocab.is_none());
    let mut other = tiny(12, 1);
    other.latent_dim = 6;
    let err = CRepair::load_expecting(&path, &other).unwrap_err().to_string();
    assert!(err.contains("does not match"), "{err}");
}

#[test]
fn noise_off_inference_is_deterministic() {
    let m = CRepair::new(tiny(12, 2), 11).unwrap();
    let input = seq(&[BOS_ID, 5, 6, EOS_ID]);
    let target = seq(&[BOS_ID, 7, 8]);
    let a = m.inference_logits(&input, &target).unwrap();
    let b = m.inference_logits(&input, &target).unwrap();
    assert_eq!(a, b);
}
