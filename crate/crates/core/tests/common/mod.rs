//! Straight-loop reference transformer used as an oracle for the model.

#![allow(dead_code)]

use ssa_core::attention::AttnMode;
use ssa_core::model::{Model, ModelConfig};

pub struct RefOutput {
    /// `[T][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// Per layer SmoothL1 between full and sparse attention outputs.
    pub layer_alignment: Vec<f64>,
}

fn param<'a>(m: &'a Model<f64>, name: &str) -> &'a [f64] {
    let id = m
        .params
        .find(name)
        .unwrap_or_else(|| panic!("missing {name}"));
    m.params.get(id).value.data()
}

fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * r * g).collect()
}

fn rope(x: &mut [f64], pos: usize, d: usize, theta: f64) {
    let half = d / 2;
    for head in x.chunks_exact_mut(d) {
        for i in 0..half {
            let ang = pos as f64 * theta.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = ang.sin_cos();
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Blocks visible to query `t` of one head: own block plus the best
/// `k - 1` strictly earlier blocks by score against the block-mean key.
pub fn ref_select(q: &[f64], keys: &[Vec<f64>], t: usize, s: usize, k: usize) -> Vec<usize> {
    let own = t / s;
    if own < k {
        return (0..=own).collect();
    }
    let mut scored: Vec<(f64, usize)> = (0..own)
        .map(|b| {
            let mut mean = vec![0.0; q.len()];
            for key in &keys[b * s..(b + 1) * s] {
                for (m, v) in mean.iter_mut().zip(key) {
                    *m += v / s as f64;
                }
            }
            (dot(q, &mean), b)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = scored.iter().take(k - 1).map(|p| p.1).collect();
    out.push(own);
    out.sort_unstable();
    out
}

/// Attention output `[T][h*d]` for the given mode.
fn attend(
    cfg: &ModelConfig,
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    mode: AttnMode,
) -> Vec<Vec<f64>> {
    let (h, hkv, d) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let (s, topk) = (cfg.attn.block_size, cfg.attn.top_k);
    let t_len = q.len();
    let mut out = vec![vec![0.0; h * d]; t_len];
    for head in 0..h {
        let kvh = head / (h / hkv);
        let keys: Vec<Vec<f64>> = k
            .iter()
            .map(|r| r[kvh * d..(kvh + 1) * d].to_vec())
            .collect();
        for t in 0..t_len {
            let qt = &q[t][head * d..(head + 1) * d];
            let allowed: Vec<usize> = match mode {
                AttnMode::Full => (0..=t).collect(),
                AttnMode::Sparse => {
                    let blocks = ref_select(qt, &keys, t, s, topk);
                    (0..=t).filter(|j| blocks.contains(&(j / s))).collect()
                }
            };
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| dot(qt, &keys[j]) / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
            for (&j, sc) in allowed.iter().zip(&scores) {
                let p = (sc - m).exp() / z;
                for e in 0..d {
                    out[t][head * d + e] += p * v[j][kvh * d + e];
                }
            }
        }
    }
    out
}

fn smooth_l1(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            let e = (x - y).abs();
            total += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
            n += 1;
        }
    }
    total / n as f64
}

pub fn reference_forward(m: &Model<f64>, tokens: &[u32], mode: AttnMode) -> RefOutput {
    let cfg = &m.config;
    let (dm, qw, kvw, ff) = (cfg.d_model, cfg.q_width(), cfg.kv_width(), cfg.ffn_dim());
    let emb = param(m, "tok_embeddings");
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * dm..(t as usize + 1) * dm].to_vec())
        .collect();
    let mut layer_alignment = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |n: &str| param(m, &format!("layers.{l}.{n}"));
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| rmsnorm(r, p("attn_norm"), cfg.norm_eps))
            .collect();
        let mut q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, p("wq"), qw)).collect();
        let mut k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, p("wk"), kvw)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, p("wv"), kvw)).collect();
        for t in 0..tokens.len() {
            rope(&mut q[t], t, cfg.head_dim, cfg.rope_theta);
            rope(&mut k[t], t, cfg.head_dim, cfg.rope_theta);
        }
        let full = attend(cfg, &q, &k, &v, AttnMode::Full);
        let sparse = attend(cfg, &q, &k, &v, AttnMode::Sparse);
        layer_alignment.push(smooth_l1(&full, &sparse));
        let a = if mode == AttnMode::Full { full } else { sparse };
        for t in 0..tokens.len() {
            let mut gated = a[t].clone();
            if cfg.attn.gate_enabled {
                let pre = matvec(&h[t], p("gate_w"), qw);
                for ((g, pr), b) in gated.iter_mut().zip(&pre).zip(p("gate_b")) {
                    *g *= sigmoid(pr + b);
                }
            }
            let o = matvec(&gated, p("wo"), dm);
            x[t].iter_mut().zip(&o).for_each(|(xi, oi)| *xi += oi);
            let h2 = rmsnorm(&x[t], p("ffn_norm"), cfg.norm_eps);
            let up: Vec<f64> = matvec(&h2, p("w1"), ff)
                .into_iter()
                .map(|u| u * sigmoid(u))
                .collect();
            let down = matvec(&up, p("w2"), dm);
            x[t].iter_mut().zip(&down).for_each(|(xi, di)| *xi += di);
        }
    }
    let head = if cfg.tie_embeddings {
        emb
    } else {
        param(m, "lm_head")
    };
    let logits = x
        .iter()
        .map(|r| {
            let xf = rmsnorm(r, param(m, "final_norm"), cfg.norm_eps);
            (0..cfg.vocab_size)
                .map(|vid| dot(&xf, &head[vid * dm..(vid + 1) * dm]))
                .collect()
        })
        .collect();
    RefOutput {
        logits,
        layer_alignment,
    }
}

/// Random token ids below `vocab`, deterministic in `seed`.
pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}
