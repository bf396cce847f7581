//! Fused multi-head scaled dot-product attention with an optional learned
//! relative-position table added to both keys and values:
//!
//! `softmax(Q (K + P)^T / sqrt(d_k)) (V + P)`
//!
//! where `P[i, j]` is the table row for the clipped offset `j - i`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    /// Number of query sequences. Queries are laid out `[batch * q_len, d]`.
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// `false` entries are padding; indexed by `[kv_batch * kv_len + j]`.
    pub key_mask: Vec<bool>,
    /// Query `i` may only attend to keys `j <= i`.
    pub causal: bool,
    /// Offsets are clipped to `[-max_rel, max_rel]`; the table has `2 * max_rel + 1` rows.
    pub max_rel: usize,
    /// Key/value sequence used by each query sequence. `None` means the identity.
    pub kv_map: Option<Vec<usize>>,
}

impl AttentionSpec {
    pub fn kv_batch(&self) -> usize {
        self.key_mask.len() / self.kv_len.max(1)
    }

    fn kv_index(&self, b: usize) -> usize {
        match &self.kv_map {
            Some(map) => map[b],
            None => b,
        }
    }

    fn rel_index(&self, i: usize, j: usize) -> usize {
        let r = self.max_rel as isize;
        let off = (j as isize - i as isize).clamp(-r, r);
        (off + r) as usize
    }

    pub(crate) fn validate(
        &self,
        q: &[usize],
        k: &[usize],
        v: &[usize],
        rel: Option<&[usize]>,
    ) -> Result<usize> {
        if q.len() != 2 || k.len() != 2 || v.len() != 2 {
            return Err(Error::shape("attention", q, k));
        }
        let d = q[1];
        if k[1] != d || v[1] != d || k[0] != v[0] {
            return Err(Error::shape("attention", k, v));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {d} not divisible by {} heads",
                self.heads
            )));
        }
        if q[0] != self.batch * self.q_len {
            return Err(Error::shape("attention", q, &[self.batch, self.q_len]));
        }
        if self.kv_len == 0 || k[0] % self.kv_len != 0 || self.key_mask.len() != k[0] {
            return Err(Error::shape("attention", k, &[self.key_mask.len()]));
        }
        let kv_batch = k[0] / self.kv_len;
        match &self.kv_map {
            Some(map) => {
                if map.len() != self.batch || map.iter().any(|&m| m >= kv_batch) {
                    return Err(Error::invalid("attention kv_map out of range"));
                }
            }
            None => {
                if kv_batch != self.batch {
                    return Err(Error::shape("attention", q, k));
                }
            }
        }
        if let Some(rel) = rel {
            if rel.len() != 2 || rel[0] != 2 * self.max_rel + 1 || rel[1] != d {
                return Err(Error::shape("attention.rel", rel, &[2 * self.max_rel + 1, d]));
            }
        }
        Ok(d)
    }
}

/// Returns `(output, weights)` where weights are laid out `[batch, heads, q_len, kv_len]`.
pub(crate) fn forward(
    spec: &AttentionSpec,
    d: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rel: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (tq, tk, h) = (spec.q_len, spec.kv_len, spec.heads);
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();
    let n_rel = 2 * spec.max_rel + 1;
    let mut out = vec![0.0; spec.batch * tq * d];
    let mut weights = vec![0.0; spec.batch * h * tq * tk];
    let mut scores = vec![0.0; tk];
    let mut q_rel = vec![0.0; n_rel];
    let mut rel_mass = vec![0.0; n_rel];

    for b in 0..spec.batch {
        let kb = spec.kv_index(b);
        for hh in 0..h {
            let c0 = hh * dk;
            for i in 0..tq {
                let qi = &q[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dk];
                if let Some(p) = rel {
                    for (r, qr) in q_rel.iter_mut().enumerate() {
                        *qr = dot(qi, &p[r * d + c0..r * d + c0 + dk]);
                    }
                }
                let mut max = f64::NEG_INFINITY;
                for j in 0..tk {
                    let visible = spec.key_mask[kb * tk + j] && !(spec.causal && j > i);
                    scores[j] = if visible {
                        let kj = &k[(kb * tk + j) * d + c0..(kb * tk + j) * d + c0 + dk];
                        let mut s = dot(qi, kj);
                        if rel.is_some() {
                            s += q_rel[spec.rel_index(i, j)];
                        }
                        s * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    max = max.max(scores[j]);
                }
                let w_row = &mut weights[((b * h + hh) * tq + i) * tk..((b * h + hh) * tq + i + 1) * tk];
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..tk {
                    let e = (scores[j] - max).exp();
                    w_row[j] = e;
                    z += e;
                }
                for w in w_row.iter_mut() {
                    *w /= z;
                }
                let oi = &mut out[(b * tq + i) * d + c0..(b * tq + i) * d + c0 + dk];
                rel_mass.iter_mut().for_each(|m| *m = 0.0);
                for j in 0..tk {
                    let a = w_row[j];
                    if a == 0.0 {
                        continue;
                    }
                    let vj = &v[(kb * tk + j) * d + c0..(kb * tk + j) * d + c0 + dk];
                    axpy(a, vj, oi);
                    if rel.is_some() {
                        rel_mass[spec.rel_index(i, j)] += a;
                    }
                }
                if let Some(p) = rel {
                    for (r, &m) in rel_mass.iter().enumerate() {
                        if m != 0.0 {
                            axpy(m, &p[r * d + c0..r * d + c0 + dk], oi);
                        }
                    }
                }
            }
        }
    }
    (out, weights)
}

pub(crate) struct AttentionGrads {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub rel: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &AttentionSpec,
    d: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rel: Option<&[f64]>,
    weights: &[f64],
    grad_out: &[f64],
) -> AttentionGrads {
    let (tq, tk, h) = (spec.q_len, spec.kv_len, spec.heads);
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();
    let n_rel = 2 * spec.max_rel + 1;
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut grel = rel.map(|p| vec![0.0; p.len()]);
    let mut g_rel_dot = vec![0.0; n_rel];
    let mut d_weights = vec![0.0; tk];
    let mut rel_mass = vec![0.0; n_rel];
    let mut rel_score = vec![0.0; n_rel];

    for b in 0..spec.batch {
        let kb = spec.kv_index(b);
        for hh in 0..h {
            let c0 = hh * dk;
            for i in 0..tq {
                let w_row = &weights[((b * h + hh) * tq + i) * tk..((b * h + hh) * tq + i + 1) * tk];
                let row = (b * tq + i) * d + c0;
                let gi = &grad_out[row..row + dk];
                if let Some(p) = rel {
                    for (r, gr) in g_rel_dot.iter_mut().enumerate() {
                        *gr = dot(gi, &p[r * d + c0..r * d + c0 + dk]);
                    }
                }
                // Upstream gradient on the attention weights and the value side.
                let mut weighted = 0.0;
                rel_mass.iter_mut().for_each(|m| *m = 0.0);
                for j in 0..tk {
                    let a = w_row[j];
                    if a == 0.0 {
                        d_weights[j] = 0.0;
                        continue;
                    }
                    let kv = (kb * tk + j) * d + c0;
                    let mut da = dot(gi, &v[kv..kv + dk]);
                    if rel.is_some() {
                        let r = spec.rel_index(i, j);
                        da += g_rel_dot[r];
                        rel_mass[r] += a;
                    }
                    d_weights[j] = da;
                    weighted += a * da;
                    axpy(a, gi, &mut gv[kv..kv + dk]);
                }
                if let Some(gp) = grel.as_mut() {
                    for (r, &m) in rel_mass.iter().enumerate() {
                        if m != 0.0 {
                            axpy(m, gi, &mut gp[r * d + c0..r * d + c0 + dk]);
                        }
                    }
                }
                // Softmax backward, then through the scaled scores.
                rel_score.iter_mut().for_each(|m| *m = 0.0);
                let qi = &q[row..row + dk];
                for j in 0..tk {
                    let a = w_row[j];
                    if a == 0.0 {
                        continue;
                    }
                    let ds = a * (d_weights[j] - weighted) * scale;
                    let kv = (kb * tk + j) * d + c0;
                    axpy(ds, &k[kv..kv + dk], &mut gq[row..row + dk]);
                    axpy(ds, qi, &mut gk[kv..kv + dk]);
                    if rel.is_some() {
                        rel_score[spec.rel_index(i, j)] += ds;
                    }
                }
                if let (Some(p), Some(gp)) = (rel, grel.as_mut()) {
                    for (r, &s) in rel_score.iter().enumerate() {
                        if s != 0.0 {
                            axpy(s, &p[r * d + c0..r * d + c0 + dk], &mut gq[row..row + dk]);
                            axpy(s, qi, &mut gp[r * d + c0..r * d + c0 + dk]);
                        }
                    }
                }
            }
        }
    }
    AttentionGrads {
        q: gq,
        k: gk,
        v: gv,
        rel: grel,
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
