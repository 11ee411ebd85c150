//! Cross-attention bridges between a frozen augmenting model and a frozen
//! anchor model.
//!
//! For every connection `(i, j)` the anchor's layer-`j` representation
//! queries the augmenting model's layer-`i` representation:
//!
//! ```text
//! f_cross(H_Ai, H_Bj) = Concat_k(head_k) W_O,  head_k = Attn(H_Bj W_Q^k, H_Ai W_K^k, H_Ai W_V^k)
//! H_Bj <- H_Bj + f_cross(H_Ai, H_Bj)          (input to anchor block j + 1)
//! ```
//!
//! `W_Q`, `W_K`, `W_V` are stored whole as `[D, D]` and read as `N_H` column
//! slices of width `D / N_H`. When the widths differ, `H_Ai` first passes
//! through a `[D_A, D_B]` projection. Attention is causally masked so that
//! step-by-step decoding agrees with a full-sequence forward.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{BoundModel, LanguageModel, TokenId, TransformerModel};
use crate::tensor::{seeded_rng, Tape, Tensor, Var};

/// Ordered `(augment layer i, anchor layer j)` pairs plus the cross-attention
/// head count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    pub pairs: Vec<(usize, usize)>,
    pub n_cross_heads: usize,
}

impl ConnectionSpec {
    pub fn validate(&self, augment_layers: usize, anchor_layers: usize, anchor_width: usize) -> Result<()> {
        if self.n_cross_heads == 0 || !anchor_width.is_multiple_of(self.n_cross_heads) {
            return Err(Error::config(
                "n_cross_heads",
                format!("{} does not divide anchor width {anchor_width}", self.n_cross_heads),
            ));
        }
        let mut prev: Option<usize> = None;
        for &(i, j) in &self.pairs {
            if i > augment_layers {
                return Err(Error::config(
                    "topology",
                    format!("augment layer {i} outside 0..={augment_layers}"),
                ));
            }
            if j + 2 > anchor_layers {
                return Err(Error::config(
                    "topology",
                    format!("anchor layer {j} outside 0..={}", anchor_layers.saturating_sub(2)),
                ));
            }
            if prev.is_some_and(|p| j <= p) {
                return Err(Error::config(
                    "topology",
                    format!("anchor layers must be strictly increasing, got {:?}", self.pairs),
                ));
            }
            prev = Some(j);
        }
        Ok(())
    }
}

/// Connection layouts accepted on the command line: `stride:K`, `head`,
/// `mid`, `tail`, `pairs:(i,j);(i,j);...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Topology {
    Stride(usize),
    Head,
    Mid,
    Tail,
    Pairs(Vec<(usize, usize)>),
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::config("topology", format!("`{s}`: {msg}"));
        match s {
            "head" => return Ok(Topology::Head),
            "mid" => return Ok(Topology::Mid),
            "tail" => return Ok(Topology::Tail),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("stride:") {
            let k: usize = k.parse().map_err(|_| bad("stride must be a positive integer"))?;
            if k == 0 {
                return Err(bad("stride must be a positive integer"));
            }
            return Ok(Topology::Stride(k));
        }
        if let Some(list) = s.strip_prefix("pairs:") {
            let mut pairs = Vec::new();
            for item in list.split(';').filter(|p| !p.trim().is_empty()) {
                let inner = item
                    .trim()
                    .strip_prefix('(')
                    .and_then(|p| p.strip_suffix(')'))
                    .ok_or_else(|| bad("pairs look like (i,j)"))?;
                let (i, j) = inner.split_once(',').ok_or_else(|| bad("pairs look like (i,j)"))?;
                let i = i.trim().parse().map_err(|_| bad("layer index must be an integer"))?;
                let j = j.trim().parse().map_err(|_| bad("layer index must be an integer"))?;
                pairs.push((i, j));
            }
            if pairs.is_empty() {
                return Err(bad("no pairs given"));
            }
            return Ok(Topology::Pairs(pairs));
        }
        Err(bad("expected stride:K, head, mid, tail or pairs:(i,j);..."))
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Stride(k) => write!(f, "stride:{k}"),
            Topology::Head => f.write_str("head"),
            Topology::Mid => f.write_str("mid"),
            Topology::Tail => f.write_str("tail"),
            Topology::Pairs(p) => {
                let items: Vec<String> = p.iter().map(|(i, j)| format!("({i},{j})")).collect();
                write!(f, "pairs:{}", items.join(";"))
            }
        }
    }
}

/// Expands a topology into connection pairs for models with `augment_layers`
/// and `anchor_layers` blocks. Named kinds connect equal layer indices and
/// require equal depths.
pub fn make_topology(
    kind: &Topology,
    augment_layers: usize,
    anchor_layers: usize,
    n_cross_heads: usize,
) -> Result<ConnectionSpec> {
    let same_depth = || {
        if augment_layers != anchor_layers {
            Err(Error::config(
                "topology",
                format!("`{kind}` needs equal depths, got augment {augment_layers} and anchor {anchor_layers}"),
            ))
        } else if anchor_layers < 2 {
            Err(Error::config("topology", "models need at least 2 layers"))
        } else {
            Ok(anchor_layers)
        }
    };
    let pairs = match kind {
        Topology::Stride(0) => return Err(Error::config("topology", "stride must be positive")),
        Topology::Stride(k) => {
            let l = same_depth()?;
            (0..=l - 2).step_by(*k).map(|m| (m, m)).collect()
        }
        Topology::Head => {
            same_depth()?;
            vec![(0, 0)]
        }
        Topology::Mid => {
            let l = same_depth()?;
            vec![(l / 2, l / 2)]
        }
        Topology::Tail => {
            let l = same_depth()?;
            vec![(l - 2, l - 2)]
        }
        Topology::Pairs(p) => p.clone(),
    };
    Ok(ConnectionSpec { pairs, n_cross_heads })
}

/// Trainable parameter total of a connection spec: `4 D_B^2` per connection,
/// plus `D_A D_B` for the projection when the widths differ.
pub fn connector_param_count(spec: &ConnectionSpec, augment_width: usize, anchor_width: usize) -> usize {
    let per = 4 * anchor_width * anchor_width
        + if augment_width != anchor_width {
            augment_width * anchor_width
        } else {
            0
        };
    spec.pairs.len() * per
}

/// Weights of one bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub proj: Option<Tensor>,
}

pub const CONNECTOR_INIT_STD: f64 = 0.02;

impl CrossAttnWeights {
    /// `W_Q`, `W_K` (and the projection, if any) from `N(0, 0.02^2)`;
    /// `W_O = 0`, so a fresh bridge adds exactly nothing.
    ///
    /// With equal widths `W_V` starts as the identity: the first gradient on
    /// `W_O` is then the raw correlation between augment states and anchor
    /// residual gradients, which lets training find a state-copying bridge
    /// reliably. A small random `W_V` leaves `W_V W_O` to grow out of a saddle
    /// and stalled at chance on the desk benchmark for some seeds.
    pub fn init(augment_width: usize, anchor_width: usize, rng: &mut crate::tensor::Rng) -> Self {
        let d = anchor_width;
        let proj = (augment_width != anchor_width)
            .then(|| Tensor::randn(vec![augment_width, d], CONNECTOR_INIT_STD, rng).with_requires_grad(true));
        let w_q = Tensor::randn(vec![d, d], CONNECTOR_INIT_STD, rng).with_requires_grad(true);
        let w_k = Tensor::randn(vec![d, d], CONNECTOR_INIT_STD, rng).with_requires_grad(true);
        let w_v = if proj.is_none() {
            Tensor::eye(d)
        } else {
            Tensor::randn(vec![d, d], CONNECTOR_INIT_STD, rng)
        };
        CrossAttnWeights {
            w_q,
            w_k,
            w_v: w_v.with_requires_grad(true),
            w_o: Tensor::zeros(vec![d, d]).with_requires_grad(true),
            proj,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        v.extend(self.proj.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o];
        v.extend(self.proj.as_mut());
        v
    }

    pub fn tensor_names(&self) -> &'static [&'static str] {
        if self.proj.is_some() {
            &["w_q", "w_k", "w_v", "w_o", "proj"]
        } else {
            &["w_q", "w_k", "w_v", "w_o"]
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundCrossAttn {
        BoundCrossAttn {
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
            w_o: tape.leaf(&self.w_o),
            proj: self.proj.as_ref().map(|p| tape.leaf(p)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCrossAttn {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub proj: Option<Var>,
}

impl BoundCrossAttn {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_q, self.w_k, self.w_v, self.w_o];
        v.extend(self.proj);
        v
    }
}

/// `f_cross` on the tape. `h_a: [B, T, D_A]`, `h_b: [B, T, D_B]`; returns
/// `[B, T, D_B]`.
pub fn cross_attention_on(
    tape: &mut Tape,
    h_a: Var,
    h_b: Var,
    w: &BoundCrossAttn,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let (sa, sb) = (tape.shape(h_a).to_vec(), tape.shape(h_b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[..2] != sb[..2] {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: sa,
            rhs: sb,
        });
    }
    let (batch, seq, d_a, d_b) = (sb[0], sb[1], sa[2], sb[2]);
    if d_b % n_heads != 0 {
        return Err(Error::invalid(
            "cross_attention",
            format!("{n_heads} heads do not divide {d_b}"),
        ));
    }
    let keys_in = match w.proj {
        Some(p) => tape.matmul(h_a, p)?,
        None if d_a != d_b => {
            return Err(Error::invalid(
                "cross_attention",
                format!("augment width {d_a} differs from anchor width {d_b} but no projection is present"),
            ))
        }
        None => h_a,
    };
    let dh = d_b / n_heads;
    let split = |tape: &mut Tape, x: Var, w: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, vec![batch, seq, n_heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = split(tape, h_b, w.w_q)?;
    let k = split(tape, keys_in, w.w_k)?;
    let v = split(tape, keys_in, w.w_v)?;
    let scores = tape.matmul_transposed(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = if causal {
        tape.causal_softmax(scores)?
    } else {
        tape.softmax_lastdim(scores)
    };
    let heads = tape.matmul(att, v)?;
    let heads = tape.permute(heads, &[0, 2, 1, 3])?;
    let concat = tape.reshape(heads, vec![batch, seq, d_b])?;
    tape.matmul(concat, w.w_o)
}

/// `f_cross` for a single sequence: `h_a: [T, D_A]`, `h_b: [T, D_B]`.
pub fn cross_attention(
    h_a: &Tensor,
    h_b: &Tensor,
    w: &CrossAttnWeights,
    n_heads: usize,
    causal: bool,
) -> Result<Tensor> {
    if h_a.shape().len() != 2 || h_b.shape().len() != 2 || h_a.shape()[0] != h_b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: h_a.shape().to_vec(),
            rhs: h_b.shape().to_vec(),
        });
    }
    let seq = h_b.shape()[0];
    let mut tape = Tape::new();
    let a = tape.leaf(&h_a.reshaped(vec![1, seq, h_a.shape()[1]])?);
    let b = tape.leaf(&h_b.reshaped(vec![1, seq, h_b.shape()[1]])?);
    let bw = w.bind(&mut tape);
    let out = cross_attention_on(&mut tape, a, b, &bw, n_heads, causal)?;
    tape.to_tensor(out).reshaped(vec![seq, h_b.shape()[1]])
}

/// Frozen anchor + frozen augment + trainable bridges, usable as one LM.
#[derive(Debug, Clone)]
pub struct ComposedModel {
    anchor: TransformerModel,
    augment: TransformerModel,
    spec: ConnectionSpec,
    weights: Vec<CrossAttnWeights>,
    causal: bool,
}

/// Tape handles produced by one composed forward.
#[derive(Debug, Clone)]
pub struct BoundComposed {
    pub anchor: BoundModel,
    pub bridges: Vec<BoundCrossAttn>,
}

impl ComposedModel {
    /// Freezes both models and initializes one bridge per connection.
    pub fn new(
        mut anchor: TransformerModel,
        mut augment: TransformerModel,
        spec: ConnectionSpec,
        seed: u64,
    ) -> Result<Self> {
        let (ca, cb) = (augment.config().clone(), anchor.config().clone());
        if ca.vocab_size != cb.vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "anchor and augment must share a vocabulary ({} vs {})",
                    cb.vocab_size, ca.vocab_size
                ),
            ));
        }
        spec.validate(ca.n_layers, cb.n_layers, cb.width)?;
        anchor.freeze(true);
        augment.freeze(true);
        let mut rng = seeded_rng(seed);
        let weights = spec
            .pairs
            .iter()
            .map(|_| CrossAttnWeights::init(ca.width, cb.width, &mut rng))
            .collect();
        Ok(ComposedModel {
            anchor,
            augment,
            spec,
            weights,
            causal: true,
        })
    }

    /// Replaces the bridge weights (checkpoint loading).
    pub fn with_weights(mut self, weights: Vec<CrossAttnWeights>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::invalid(
                "with_weights",
                format!("expected {} bridges, got {}", self.weights.len(), weights.len()),
            ));
        }
        for (new, old) in weights.iter().zip(&self.weights) {
            let same = new
                .tensors()
                .iter()
                .zip(old.tensors())
                .all(|(a, b)| a.shape() == b.shape())
                && new.proj.is_some() == old.proj.is_some();
            if !same {
                return Err(Error::invalid(
                    "with_weights",
                    "bridge tensor shapes do not match the spec",
                ));
            }
        }
        self.weights = weights
            .into_iter()
            .map(|mut w| {
                w.tensors_mut().into_iter().for_each(|t| t.set_requires_grad(true));
                w
            })
            .collect();
        Ok(self)
    }

    /// Disables the causal mask on the bridges. Step-wise generation then no
    /// longer matches a full-sequence forward.
    pub fn set_causal(&mut self, causal: bool) {
        self.causal = causal;
    }

    pub fn anchor(&self) -> &TransformerModel {
        &self.anchor
    }

    pub fn augment(&self) -> &TransformerModel {
        &self.augment
    }

    pub fn spec(&self) -> &ConnectionSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[CrossAttnWeights] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [CrossAttnWeights] {
        &mut self.weights
    }

    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().flat_map(CrossAttnWeights::tensors).collect()
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .flat_map(CrossAttnWeights::tensors_mut)
            .collect()
    }

    /// Enumerated trainable element count.
    pub fn trainable_params(&self) -> usize {
        self.trainable_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Augment layer representations needed by the bridges, one `[B, T, D_A]`
    /// tensor per connection. No gradient is recorded.
    pub fn augment_states(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.augment.bind(&mut tape);
        let mut x = self.augment.embed(&mut tape, &bound, tokens, batch, seq)?;
        let deepest = self.spec.pairs.iter().map(|p| p.0).max().unwrap_or(0);
        let mut layers = vec![x];
        for b in 0..deepest {
            x = self.augment.block(&mut tape, &bound, b, x)?;
            layers.push(x);
        }
        Ok(self
            .spec
            .pairs
            .iter()
            .map(|&(i, _)| tape.to_tensor(layers[i]))
            .collect())
    }

    /// Composed logits `[B, T, V]` on `tape`, given precomputed augment states
    /// (see [`ComposedModel::augment_states`]).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        batch: usize,
        seq: usize,
        augment_states: &[Tensor],
    ) -> Result<(Var, BoundComposed)> {
        let bridges: Vec<BoundCrossAttn> = self.weights.iter().map(|w| w.bind(tape)).collect();
        let (logits, anchor) = self.forward_with(tape, &bridges, tokens, batch, seq, augment_states)?;
        Ok((logits, BoundComposed { anchor, bridges }))
    }

    /// Like [`ComposedModel::forward_on`] but with bridge weights already on
    /// the tape (used by finite-difference checks that own the leaves).
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bridges: &[BoundCrossAttn],
        tokens: &[TokenId],
        batch: usize,
        seq: usize,
        augment_states: &[Tensor],
    ) -> Result<(Var, BoundModel)> {
        let n = self.spec.pairs.len();
        if augment_states.len() != n || bridges.len() != n {
            return Err(Error::invalid(
                "composed_forward",
                format!(
                    "{} augment states and {} bridges for {n} connections",
                    augment_states.len(),
                    bridges.len()
                ),
            ));
        }
        let bound = self.anchor.bind(tape);
        let mut x = self.anchor.embed(tape, &bound, tokens, batch, seq)?;
        let mut next = 0;
        for j in 0..self.anchor.config().n_layers {
            if next < n && self.spec.pairs[next].1 == j {
                let h_a = tape.leaf(&augment_states[next]);
                let cross = cross_attention_on(tape, h_a, x, &bridges[next], self.spec.n_cross_heads, self.causal)?;
                x = tape.add(x, cross)?;
                next += 1;
            }
            x = self.anchor.block(tape, &bound, j, x)?;
        }
        let logits = self.anchor.head(tape, &bound, x)?;
        Ok((logits, bound))
    }

    /// Copies bridge gradients from `tape` into the bridge tensors.
    pub fn write_grads(&mut self, tape: &Tape, bound: &BoundComposed) {
        for (w, b) in self.weights.iter_mut().zip(&bound.bridges) {
            for (t, v) in w.tensors_mut().into_iter().zip(b.vars()) {
                tape.write_grad(v, t);
            }
        }
    }

    /// Logits `[T, V]` for one sequence.
    pub fn composed_forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        let seq = tokens.len();
        let logits = self.batch_logits(tokens, 1, seq)?;
        logits.reshaped(vec![seq, self.anchor.config().vocab_size])
    }
}

impl LanguageModel for ComposedModel {
    fn vocab_size(&self) -> usize {
        self.anchor.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.anchor.config().context_len.min(self.augment.config().context_len)
    }

    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        self.anchor.check_tokens(tokens, seq)?;
        let states = self.augment_states(tokens, batch, seq)?;
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on(&mut tape, tokens, batch, seq, &states)?;
        Ok(tape.to_tensor(logits))
    }
}
