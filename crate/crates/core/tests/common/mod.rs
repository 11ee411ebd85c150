//! Plain-loop reference implementations used as oracles by the integration
//! tests. Nothing here goes through the tape.

#![allow(dead_code)]

use calm::calm::{ConnectionSpec, CrossAttnWeights};
use calm::lm::{ModelConfig, TransformerModel};
use calm::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn micro_config(vocab: usize, layers: usize, width: usize, heads: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        context_len: 16,
        n_layers: layers,
        width,
        n_heads: heads,
        mlp_hidden: 2 * width,
        seed,
    }
}

pub fn param<'a>(m: &'a TransformerModel, name: &str) -> &'a Tensor {
    m.named_params()
        .find(|(n, _)| *n == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .1
}

/// `x[T, din] @ w[din, dout]` by triple loop.
pub fn matmul(x: &Mat, w: &Tensor) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|j| (0..din).map(|i| row[i] * w.data()[i * dout + j]).sum())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * r * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Multi-head scaled dot-product attention; `causal` restricts query `t` to
/// keys `<= t`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> Mat {
    let t_len = q.len();
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; t_len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..t_len {
            let visible = if causal { t + 1 } else { k.len() };
            let scores: Vec<f64> = (0..visible)
                .map(|s| cols.clone().map(|c| q[t][c] * k[s][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (s, e) in exps.iter().enumerate() {
                for c in cols.clone() {
                    out[t][c] += e / z * v[s][c];
                }
            }
        }
    }
    out
}

pub fn embed(m: &TransformerModel, tokens: &[usize]) -> Mat {
    let d = m.config().width;
    let emb = param(m, "tok_emb");
    tokens
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            (0..d)
                .map(|i| {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    let angle = t as f64 / freq;
                    let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    emb.data()[id * d + i] * d as f64 + pe
                })
                .collect()
        })
        .collect()
}

pub fn block(m: &TransformerModel, b: usize, x: &Mat) -> Mat {
    let p = |n: &str| param(m, &format!("blocks.{b}.{n}"));
    let heads = m.config().n_heads;
    let n1 = layer_norm(x, p("ln1.gain"), p("ln1.bias"));
    let att = attention(
        &matmul(&n1, p("attn.q")),
        &matmul(&n1, p("attn.k")),
        &matmul(&n1, p("attn.v")),
        heads,
        true,
    );
    let x = add(x, &matmul(&att, p("attn.o")));
    let n2 = layer_norm(&x, p("ln2.gain"), p("ln2.bias"));
    let mut up = matmul(&n2, p("mlp.up"));
    up.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    add(&x, &matmul(&up, p("mlp.down")))
}

pub fn head(m: &TransformerModel, x: &Mat) -> Mat {
    let n = layer_norm(x, param(m, "ln_f.gain"), param(m, "ln_f.bias"));
    matmul(&n, param(m, "unembed"))
}

/// Every layer representation (`L + 1`) and the logits.
pub fn reference_forward(m: &TransformerModel, tokens: &[usize]) -> (Vec<Mat>, Mat) {
    let mut hidden = vec![embed(m, tokens)];
    for b in 0..m.config().n_layers {
        let next = block(m, b, hidden.last().unwrap());
        hidden.push(next);
    }
    let logits = head(m, hidden.last().unwrap());
    (hidden, logits)
}

pub fn reference_cross(h_a: &Mat, h_b: &Mat, w: &CrossAttnWeights, heads: usize, causal: bool) -> Mat {
    let keys_in = match &w.proj {
        Some(p) => matmul(h_a, p),
        None => h_a.clone(),
    };
    let att = attention(
        &matmul(h_b, &w.w_q),
        &matmul(&keys_in, &w.w_k),
        &matmul(&keys_in, &w.w_v),
        heads,
        causal,
    );
    matmul(&att, &w.w_o)
}

/// Anchor walked block by block, adding the bridge output to the layer-`j`
/// representation before block `j + 1` (1-based) consumes it.
pub fn reference_composed(
    anchor: &TransformerModel,
    augment: &TransformerModel,
    spec: &ConnectionSpec,
    weights: &[CrossAttnWeights],
    tokens: &[usize],
) -> Mat {
    let (aug_hidden, _) = reference_forward(augment, tokens);
    let mut x = embed(anchor, tokens);
    for layer in 0..anchor.config().n_layers {
        for (k, &(i, j)) in spec.pairs.iter().enumerate() {
            if j == layer {
                let cross = reference_cross(&aug_hidden[i], &x, &weights[k], spec.n_cross_heads, true);
                x = add(&x, &cross);
            }
        }
        x = block(anchor, layer, &x);
    }
    head(anchor, &x)
}

pub fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = calm::tensor::seeded_rng(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random bridge weights, including a non-zero output projection.
pub fn random_bridges(spec: &ConnectionSpec, d_a: usize, d_b: usize, std: f64, seed: u64) -> Vec<CrossAttnWeights> {
    let mut rng = calm::tensor::seeded_rng(seed);
    spec.pairs
        .iter()
        .map(|_| {
            let mut w = CrossAttnWeights::init(d_a, d_b, &mut rng);
            w.w_o = Tensor::randn(vec![d_b, d_b], std, &mut rng);
            w.w_q = Tensor::randn(vec![d_b, d_b], std, &mut rng);
            w.w_k = Tensor::randn(vec![d_b, d_b], std, &mut rng);
            w.w_v = Tensor::randn(vec![d_b, d_b], std, &mut rng);
            w
        })
        .collect()
}
