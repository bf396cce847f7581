#![allow(dead_code)]

use crepair::numerics::{Rng, Tape, Tensor, Var};
use crepair::Result;

/// Worst relative error between analytic and central-difference gradients.
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Checks `d f / d inputs` for a scalar-valued `f` against central finite
/// differences with step `h`. `stride` > 1 subsamples the checked entries.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, stride: usize, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (which, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for idx in (0..t.numel()).step_by(stride.max(1)) {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[idx] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.data()[idx];
            // Entries where both are ~0 are dominated by rounding noise.
            if a.abs() < 1e-7 && numeric.abs() < 1e-7 {
                continue;
            }
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel, checked })
}

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.standard_normal(shape)
}

/// `sum(x * r)` with a fixed random `r`, so every output entry matters.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = tape.constant(Rng::new(seed).standard_normal(&shape));
    let prod = tape.mul(x, r)?;
    Ok(tape.sum_all(prod))
}

/// A two-layer encoder/decoder small enough to difference every parameter.
pub fn toy_model_config() -> crepair::model::ModelConfig {
    crepair::model::ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        ffn_dim: 12,
        latent_dim: 4,
        max_len: 8,
        vocab_size: 9,
        sample_count: 3,
        max_rel: 4,
    }
}

/// Central differences over every parameter of the full training loss.
pub fn model_gradient_check(use_condition: bool) -> Result<GradReport> {
    use crepair::model::{fused_noise, Batch, CRepair, ForwardOptions};
    use crepair::tokenizer::TokenSequence;

    let cfg = toy_model_config();
    let mut model = CRepair::new(cfg.clone(), 21)?;
    let src = [
        TokenSequence::new(vec![1, 5, 6, 7, 2]),
        TokenSequence::new(vec![1, 8, 5, 2]).padded(5),
    ];
    let tgt = [TokenSequence::new(vec![1, 6, 2]), TokenSequence::new(vec![1, 7, 8, 2])];
    let tgt = [tgt[0].clone().padded(4), tgt[1].clone()];
    let batch = Batch::new(&[&src[0], &src[1]], &[&tgt[0], &tgt[1]])?;
    let opts = ForwardOptions {
        noise: Some(fused_noise(&mut Rng::new(5), 2, cfg.latent_dim, cfg.sample_count)),
        use_condition,
        kl_weight: 0.7,
    };
    let loss_of = |m: &CRepair| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let l = m.batch_loss(&mut tape, &p, &batch, &opts)?;
        Ok(tape.value(l.total).item())
    };
    let analytic: Vec<Option<Tensor>> = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let l = model.batch_loss(&mut tape, &p, &batch, &opts)?;
        let vars = p.vars().to_vec();
        let mut g = tape.backward(l.total)?;
        vars.iter().map(|&v| g.take(v)).collect()
    };
    let h = 1e-5;
    let (mut max_rel, mut checked) = (0.0f64, 0);
    for i in 0..model.params.len() {
        for j in 0..model.params.tensors()[i].numel() {
            let orig = model.params.tensors()[i].data()[j];
            model.params.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = loss_of(&model)?;
            model.params.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = loss_of(&model)?;
            model.params.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
            max_rel = max_rel.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(GradReport { max_rel, checked })
}
