//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints one `PASS`/`FAIL` line; pass criterion numbers as
//! arguments to run a subset.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{check_gradients, project, random};
use crepair::corpus::{gen_synthetic, SampleRecord};
use crepair::evaluation::{
    format_ratio, perfect_repair_ratio, run_ablation, run_experiment, ExperimentConfig, RecordResult, Sampling,
    EvalResult,
};
use crepair::generation::{beam_search_ids, greedy_ids, BeamOptions, ModelScorer, StepScorer};
use crepair::model::{
    fuse_with, kl_divergence, sample_fused_latent, Batch, CRepair, ForwardOptions, LatentStats, ModelConfig,
};
use crepair::numerics::{AttentionSpec, Rng};
use crepair::preproc::{build_target, extract_patch, serialize, PromptMode};
use crepair::tokenizer::{train_bpe, TokenSequence, BOS_ID, EOS_ID};
use crepair::training::{train_step, AdamState, TrainConfig};

/// Fixed seed for every stochastic step of the suite.
const SEED: u64 = 7;

/// Perfect-repair floor for the end-to-end task, pinned after calibration.
const E2E_THRESHOLD: f64 = 0.95;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()))
}

fn err(e: crepair::Error) -> String {
    e.to_string()
}

fn gradients() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = Rng::new(SEED);
    let h = 1e-5;
    let mut worst_op: f64 = 0.0;
    let mut record = |name: &str, r: common::GradReport| -> Result<(), String> {
        ensure(r.checked > 0 && r.max_rel < 1e-4, || format!("{name}: max rel {:.2e}", r.max_rel))?;
        worst_op = worst_op.max(r.max_rel);
        Ok(())
    };

    let x = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])];
    record(
        "matmul/add/unaries",
        check_gradients(&x, h, 1, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.add(y, v[2])?;
            let a = t.tanh(y);
            let b = t.exp(a);
            let c = t.relu(y);
            let d = t.mul(b, c)?;
            let d = t.scale(d, 0.5);
            let d = t.add_scalar(d, 1.0);
            let d = t.sub(d, a)?;
            project(t, d, 1)
        })
        .map_err(err)?,
    )?;
    let x = [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4]), random(&mut rng, &[4])];
    record(
        "softmax/layer_norm/reductions",
        check_gradients(&x, h, 1, |t, v| {
            let s = t.softmax(v[0], 1)?;
            let n = t.layer_norm(v[0], v[1], v[2], 2)?;
            let m = t.mul(s, n)?;
            let r = t.sum(m, 1)?;
            let q = t.mean(v[0], 2)?;
            let r = t.reshape(r, &[2, 4])?;
            let c = t.concat(&[r, q], 1)?;
            project(t, c, 2)
        })
        .map_err(err)?,
    )?;
    let x = [random(&mut rng, &[2, 5, 3]), random(&mut rng, &[3, 3, 4]), random(&mut rng, &[4])];
    record(
        "conv1d",
        check_gradients(&x, h, 1, |t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            project(t, y, 3)
        })
        .map_err(err)?,
    )?;
    let x = [random(&mut rng, &[6, 4]), random(&mut rng, &[4, 5])];
    record(
        "embedding/cross_entropy",
        check_gradients(&x, h, 1, |t, v| {
            let e = t.embedding(v[0], &[1, 0, 5, 5, 2])?;
            let w = t.matmul(e, v[1])?;
            t.cross_entropy(w, &[0, 3, 1, 0, 2], 0)
        })
        .map_err(err)?,
    )?;
    let (batch, len, d) = (2, 4, 6);
    let x = [
        random(&mut rng, &[batch * len, d]),
        random(&mut rng, &[batch * len, d]),
        random(&mut rng, &[batch * len, d]),
        random(&mut rng, &[5, d]),
    ];
    for causal in [false, true] {
        let spec = AttentionSpec {
            batch,
            q_len: len,
            kv_len: len,
            heads: 2,
            key_mask: vec![true, true, true, true, true, true, true, false],
            causal,
            max_rel: 2,
            kv_map: None,
        };
        record(
            "relative attention",
            check_gradients(&x, h, 1, |t, v| {
                let y = t.attention(v[0], v[1], v[2], Some(v[3]), spec.clone())?;
                project(t, y, 4)
            })
            .map_err(err)?,
        )?;
    }

    let mut worst_model: f64 = 0.0;
    let mut params = 0;
    for use_condition in [true, false] {
        let r = common::model_gradient_check(use_condition).map_err(err)?;
        ensure(r.max_rel < 1e-3, || format!("whole model: max rel {:.2e}", r.max_rel))?;
        worst_model = worst_model.max(r.max_rel);
        params = r.checked;
    }
    within(Duration::from_secs(60), start, "gradient checks")?;
    Ok(format!(
        "ops max rel {worst_op:.2e} < 1e-4; 2+2-layer model ({params} params) max rel {worst_model:.2e} < 1e-3"
    ))
}

/// Log density of a diagonal Gaussian, summed over dimensions.
fn log_normal(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(z, (m, s))| -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum()
}

fn kl_monte_carlo() -> Result<String, String> {
    let start = Instant::now();
    ensure(kl_divergence(&[0.0; 8], &[0.0; 8]) == 0.0, || "KL(0, 1) is not exactly 0".into())?;
    let mut rng = Rng::new(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu = [rng.uniform() * 2.0 - 1.0];
        let sigma = [0.5 + rng.uniform()];
        let lv = [2.0 * sigma[0].ln()];
        let closed = kl_divergence(&mu, &lv);
        let n = 1_000_000;
        let zero = [0.0];
        let one = [1.0];
        let mut acc = 0.0;
        for _ in 0..n {
            let z = [mu[0] + sigma[0] * rng.normal()];
            acc += log_normal(&z, &mu, &sigma) - log_normal(&z, &zero, &one);
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - closed).abs());
        ensure((mc - closed).abs() < 1e-2, || format!("mu {:.3} sigma {:.3}: closed {closed:.5} vs MC {mc:.5}", mu[0], sigma[0]))?;
    }
    within(Duration::from_secs(60), start, "KL check")?;
    Ok(format!("20 (mu, sigma) pairs, 1e6 draws each, max |closed - MC| {worst:.2e} < 1e-2; KL(0,1) = 0"))
}

fn fusion_statistics() -> Result<String, String> {
    let dim = 10;
    let stats = LatentStats {
        mu: vec![0.0; dim],
        log_var: vec![0.0; dim],
    };
    let mut rng = Rng::new(SEED);
    let mut parts = Vec::new();
    for n in [1, 3, 5, 7, 9] {
        let draws = 100_000 / dim;
        let mut values = Vec::with_capacity(draws * dim);
        for _ in 0..draws {
            values.extend(sample_fused_latent(&stats, n, &mut rng).map_err(err)?);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        let expected = 1.0 / n as f64;
        let rel = (var - expected).abs() / expected;
        ensure(rel < 0.05, || format!("n={n}: Var(Z) {var:.4} vs {expected:.4}"))?;
        parts.push(format!("n={n} {:.1}%", rel * 100.0));
    }
    let stats = LatentStats {
        mu: vec![0.3, -1.7, 2.5e-9],
        log_var: vec![0.2, -0.4, 1.0],
    };
    let z = fuse_with(&stats, &[0.0; 3]);
    ensure(z.iter().zip(&stats.mu).all(|(a, b)| a.to_bits() == b.to_bits()), || {
        "eps = 0 does not return mu bitwise".into()
    })?;
    Ok(format!("1e5 draws, |Var(Z) - 1/n| / (1/n): {}; eps = 0 gives mu bitwise", parts.join(", ")))
}

/// Tiny vocab-5 model briefly trained on a fixed pattern task and then frozen.
fn frozen_beam_model() -> CRepair {
    let mut cfg = ModelConfig::preset("tiny", 5).unwrap();
    cfg.max_len = 8;
    let mut model = CRepair::new(cfg, SEED).unwrap();
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for code in 0..8usize {
        let toks: Vec<usize> = (0..3).map(|i| if code >> i & 1 == 1 { 4 } else { 3 }).collect();
        let mut s = vec![BOS_ID];
        s.extend(&toks);
        s.push(EOS_ID);
        let mut t = vec![BOS_ID];
        t.extend(toks.iter().filter(|&&x| x == 4).map(|_| 3));
        t.push(4);
        t.push(EOS_ID);
        src.push(TokenSequence::new(s));
        tgt.push(TokenSequence::new(t).padded(5));
    }
    let batch = Batch::new(&src.iter().collect::<Vec<_>>(), &tgt.iter().collect::<Vec<_>>()).unwrap();
    let mut state = AdamState::new(&model.params);
    let opts = ForwardOptions {
        noise: None,
        use_condition: false,
        kl_weight: 1.0,
    };
    for _ in 0..100 {
        train_step(&mut model, &mut state, &batch, &opts, 1e-2, 1.0).unwrap();
    }
    model
}

/// Every sequence of at most `max_len` generated tokens, best first. A
/// sequence ends at `<Eos>` or at the length limit.
fn enumerate_all(s: &dyn StepScorer, max_len: usize) -> Vec<(f64, Vec<usize>)> {
    let mut out = Vec::new();
    let mut stack = vec![(0.0, vec![BOS_ID])];
    while let Some((lp, ids)) = stack.pop() {
        let row = s.next_log_probs(std::slice::from_ref(&ids)).unwrap().remove(0);
        for (t, &p) in row.iter().enumerate().skip(EOS_ID) {
            let mut next = ids.clone();
            next.push(t);
            if t == EOS_ID || next.len() > max_len {
                out.push((lp + p, next));
            } else {
                stack.push((lp + p, next));
            }
        }
    }
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    out
}

fn beam_oracle() -> Result<String, String> {
    let start = Instant::now();
    let model = frozen_beam_model();
    let max_len = 4;
    let mut cases = 0;
    let mut space = 0;
    for code in 0..8usize {
        let mut ids = vec![BOS_ID];
        ids.extend((0..3).map(|i| if code >> i & 1 == 1 { 4 } else { 3 }));
        ids.push(EOS_ID);
        let scorer = ModelScorer::new(&model, &TokenSequence::new(ids), None).map_err(err)?;
        let all = enumerate_all(&scorer, max_len);
        space = all.len();
        let greedy = greedy_ids(&scorer, max_len).map_err(err)?;
        for width in 1..=10 {
            let beam = beam_search_ids(&scorer, width, max_len, BeamOptions::default()).map_err(err)?;
            ensure(beam.len() == width, || format!("input {code}, width {width}: {} candidates", beam.len()))?;
            for (rank, (h, (p, ids))) in beam.iter().zip(&all).enumerate() {
                ensure(&h.ids == ids && (h.log_prob - p).abs() < 1e-9, || {
                    format!("input {code}, width {width}, rank {}: beam {:?} vs exhaustive {ids:?}", rank + 1, h.ids)
                })?;
            }
            if width == 1 {
                ensure(beam[0].ids == greedy.ids, || format!("input {code}: width 1 differs from greedy"))?;
            }
            cases += 1;
        }
    }
    within(Duration::from_secs(10), start, "beam oracle")?;
    Ok(format!(
        "{cases} (input, width) cases match exhaustive top-k over all {space} sequences; width 1 = greedy; {:.1}s",
        start.elapsed().as_secs_f64()
    ))
}

fn code_lines(records: &[SampleRecord]) -> Vec<String> {
    records
        .iter()
        .flat_map(|r| r.vulnerable_code.lines().map(str::to_string).collect::<Vec<_>>())
        .filter(|l| !l.trim().is_empty())
        .collect()
}

fn tokenizer() -> Result<String, String> {
    let train_lines = code_lines(&gen_synthetic(600, SEED));
    let specials = vec!["CWE-787".to_string(), "CWE-476".to_string()];
    let a = train_bpe(&train_lines, 2000, &specials).map_err(err)?;
    let b = train_bpe(&train_lines, 2000, &specials).map_err(err)?;
    ensure(a.merges == b.merges && a.to_text() == b.to_text(), || "merge lists differ across runs".into())?;

    let mut lines = code_lines(&gen_synthetic(3000, SEED + 1));
    ensure(lines.len() >= 10_000, || format!("only {} lines generated", lines.len()))?;
    lines.truncate(10_000);
    for line in &lines {
        let back = a.decode(&a.encode(line).ids).map_err(err)?;
        ensure(&back == line, || format!("round trip failed: {line:?} -> {back:?}"))?;
    }
    for special in ["CWE-787", "<StartLoc>", "<EndLoc>", "<Empty>"] {
        let id = a.id(special).ok_or_else(|| format!("{special} has no id"))?;
        let seq = a.encode(&format!("x = {special} y; z{special}w"));
        let hits = seq.ids.iter().filter(|&&t| t == id).count();
        ensure(hits == 2, || format!("{special} not atomic in encoding"))?;
    }
    Ok(format!(
        "10000 held-out lines round-trip; specials atomic; {} merges identical across runs",
        a.merges.len()
    ))
}

fn preprocessing() -> Result<String, String> {
    let records = gen_synthetic(5000, SEED);
    for r in &records {
        let target = build_target(r).map_err(err)?;
        let spliced = extract_patch(&target, r).map_err(err)?;
        let fixed = serialize(&r.fixed_code).map_err(err)?;
        ensure(spliced == fixed, || format!("{}: splice differs from serialized fix", r.id))?;
    }
    Ok(format!("{} / {} synthetic records reproduce the serialized fix", records.len(), records.len()))
}

fn causal_masking() -> Result<String, String> {
    for depth in [1, 2, 4] {
        let mut cfg = ModelConfig::preset("tiny", 11).map_err(err)?;
        cfg.n_dec_layers = depth;
        cfg.max_len = 10;
        let model = CRepair::new(cfg, SEED + depth as u64).map_err(err)?;
        let input = TokenSequence::new(vec![BOS_ID, 5, 6, 7, 8, EOS_ID]);
        let base_ids = vec![BOS_ID, 4, 9, 10, 6, 7, 8];
        let base = model.inference_logits(&input, &TokenSequence::new(base_ids.clone())).map_err(err)?;
        let v = 11;
        for t in 0..base_ids.len() - 1 {
            let mut ids = base_ids.clone();
            ids[t + 1] = if ids[t + 1] == 5 { 6 } else { 5 };
            let out = model.inference_logits(&input, &TokenSequence::new(ids)).map_err(err)?;
            let same = base.data()[..(t + 1) * v]
                .iter()
                .zip(&out.data()[..(t + 1) * v])
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("depth {depth}: rows <= {t} changed after perturbing {}", t + 1))?;
            let changed = base.data()[(t + 1) * v..].iter().zip(&out.data()[(t + 1) * v..]).any(|(a, b)| a != b);
            ensure(changed, || format!("depth {depth}: perturbing {} changed nothing", t + 1))?;
        }
    }
    Ok("rows <= t bit-identical after perturbing t+1, every t, depths 1, 2, 4".into())
}

fn e2e_config(preset: &str, epochs: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        preset: preset.into(),
        vocab_size: 2000,
        beam_width: 10,
        decode_max_len: 32,
        train: TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
    }
}

fn end_to_end() -> Result<String, String> {
    let start = Instant::now();
    let records = gen_synthetic(2400, SEED);
    let (train, test) = records.split_at(2000);
    let cfg = e2e_config("toy", 20, SEED);
    let (fitted, result) = run_experiment(&cfg, PromptMode::Full, Sampling::multi(5), train, &[], test).map_err(err)?;
    ensure(result.ratio >= E2E_THRESHOLD, || format!("ratio {} < {E2E_THRESHOLD}", format_ratio(result.ratio)))?;
    within(Duration::from_secs(30 * 60), start, "end-to-end run")?;
    Ok(format!(
        "toy preset, vocab {}, 2000 pairs x 20 epochs, beam 10: {} >= {E2E_THRESHOLD} on 400 held-out ({:.0}s)",
        fitted.vocab.len(),
        result,
        start.elapsed().as_secs_f64()
    ))
}

/// Smaller runs for the trend criteria, which need many trainings.
const TREND_PRESET: &str = "trend";
const TREND_TRAIN: usize = 600;
const TREND_TEST: usize = 200;
const TREND_EPOCHS: usize = 16;
const TREND_SEEDS: [u64; 3] = [SEED, SEED + 1, SEED + 2];

fn trend_data(seed: u64) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
    let mut records = gen_synthetic(TREND_TRAIN + TREND_TEST, seed);
    let test = records.split_off(TREND_TRAIN);
    (records, test)
}

fn ablation_trend() -> Result<String, String> {
    let mut rows = Vec::new();
    let (mut mp_beats_nn, mut mp_beats_np) = (0, 0);
    for seed in TREND_SEEDS {
        let (train, test) = trend_data(seed);
        let table = run_ablation(&e2e_config(TREND_PRESET, TREND_EPOCHS, seed), &train, &[], &test).map_err(err)?;
        let r = |n: &str| table.ratio(n).unwrap();
        mp_beats_nn += usize::from(r("MP") >= r("NN"));
        mp_beats_np += usize::from(r("MP") >= r("NP"));
        rows.push(format!(
            "seed {seed}: MP {} NP {} MN {} NN {}",
            format_ratio(r("MP")),
            format_ratio(r("NP")),
            format_ratio(r("MN")),
            format_ratio(r("NN"))
        ));
    }
    let detail = format!("MP >= NN in {mp_beats_nn}/3, MP >= NP in {mp_beats_np}/3 [{}]", rows.join("; "));
    ensure(mp_beats_nn == 3 && mp_beats_np >= 2, || detail.clone())?;
    Ok(detail)
}

fn sweep_trend() -> Result<String, String> {
    let mut rows = Vec::new();
    for seed in TREND_SEEDS {
        let (train, test) = trend_data(seed);
        let cfg = e2e_config(TREND_PRESET, TREND_EPOCHS, seed);
        let ratio = |n: usize| -> Result<f64, String> {
            let (_, r) = run_experiment(&cfg, PromptMode::Full, Sampling::multi(n), &train, &[], &test).map_err(err)?;
            Ok(r.ratio)
        };
        let (one, five) = (ratio(1)?, ratio(5)?);
        ensure(five >= one - 0.02, || format!("seed {seed}: n=5 {five:.4} < n=1 {one:.4} - 0.02"))?;
        rows.push(format!("seed {seed}: n=1 {} n=5 {}", format_ratio(one), format_ratio(five)));
    }
    Ok(format!("n=5 >= n=1 - 0.02 in 3/3 [{}]", rows.join("; ")))
}

fn metric_arithmetic() -> Result<String, String> {
    let records = (0..1638)
        .map(|i| RecordResult {
            id: i.to_string(),
            hit_rank: (i < 850).then_some(1),
        })
        .collect();
    let r = EvalResult::from_records(records).map_err(err)?;
    let shown = format_ratio(r.ratio);
    ensure(shown == "0.5189", || format!("printed {shown}"))?;
    let targets: Vec<String> = (0..1638).map(|i| format!("t{i};")).collect();
    let cands: Vec<Vec<String>> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| if i < 850 { vec![format!(" {t} ")] } else { vec![] })
        .collect();
    let again = perfect_repair_ratio(&cands, &targets).map_err(err)?;
    ensure(format_ratio(again.ratio) == "0.5189", || "candidate-list path disagrees".into())?;
    Ok(format!("850 / 1638 prints {shown}"))
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let bin = env!("CARGO_BIN_EXE_crepair");
    let run = |args: &[&str]| -> Result<(), String> {
        let o = Command::new(bin)
            .args(args)
            .current_dir(d)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    };
    run(&["gen-synthetic", "--count", "120", "--seed", "3", "--out", "train.jsonl"])?;
    run(&["gen-synthetic", "--count", "20", "--seed", "4", "--out", "test.jsonl"])?;
    std::fs::write(d.join("cfg.json"), format!(r#"{{"preset": "trend", "epochs": 2, "seed": {SEED}}}"#))
        .map_err(|e| e.to_string())?;
    for tag in ["a", "b"] {
        let out = format!("run_{tag}");
        run(&["train", "--config", "cfg.json", "--train-data", "train.jsonl", "--out-dir", &out])?;
        run(&[
            "eval",
            "--checkpoint",
            &format!("{out}/model.ckpt"),
            "--data",
            "test.jsonl",
            "--beam",
            "4",
            "--max-len",
            "24",
            "--out",
            &format!("{out}/eval.json"),
        ])?;
    }
    let read = |p: &str| std::fs::read(d.join(p)).map_err(|e| e.to_string());
    let (ca, cb) = (read("run_a/model.ckpt")?, read("run_b/model.ckpt")?);
    ensure(ca == cb, || "checkpoints differ".into())?;
    ensure(read("run_a/eval.json")? == read("run_b/eval.json")?, || "eval results differ".into())?;
    Ok(format!("two train+eval runs: checkpoints ({} bytes) and EvalResults byte-identical", ca.len()))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let checks: [(usize, &str, Check); 12] = [
        (1, "gradient correctness", gradients),
        (2, "KL correctness", kl_monte_carlo),
        (3, "fusion statistics", fusion_statistics),
        (4, "beam-search oracle", beam_oracle),
        (5, "tokenizer", tokenizer),
        (6, "preprocessing round trip", preprocessing),
        (7, "causal masking", causal_masking),
        (8, "end-to-end synthetic task", end_to_end),
        (9, "ablation trend", ablation_trend),
        (10, "sample-count trend", sweep_trend),
        (11, "metric arithmetic", metric_arithmetic),
        (12, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
