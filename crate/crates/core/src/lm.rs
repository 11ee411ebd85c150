//! Pre-norm decoder-only transformer.
//!
//! The same type serves as anchor and augmenting model. Besides logits, a
//! forward pass exposes every layer representation: index 0 is the scaled
//! token embedding plus sinusoidal positions, index `l` (1..=L) the output of
//! block `l`. The block-level API ([`TransformerModel::embed`],
//! [`TransformerModel::block`], [`TransformerModel::head`]) lets callers
//! splice extra computation between blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, seeded_rng, Tape, Tensor, Var};

pub type TokenId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale reference shape: 8 blocks of width 64.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 64,
            n_layers: 8,
            width: 64,
            n_heads: 4,
            mlp_hidden: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("width", self.width),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be positive"));
        }
        if self.context_len < 2 {
            return Err(Error::config(
                "context_len",
                format!("need at least 2, got {}", self.context_len),
            ));
        }
        if !self.width.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "width",
                format!("{} is not divisible by n_heads = {}", self.width, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.n_heads
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let (v, d, m) = (self.vocab_size, self.width, self.mlp_hidden);
        ParamBreakdown {
            embedding: v * d,
            per_block: 4 * d * d + 2 * d * m + 4 * d,
            blocks: self.n_layers * (4 * d * d + 2 * d * m + 4 * d),
            final_norm: 2 * d,
            unembedding: d * v,
        }
    }
}

/// Closed-form parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    /// `vocab * D`
    pub embedding: usize,
    /// `4 D^2` attention, `2 D M` MLP, `4 D` for two norm affine pairs.
    pub per_block: usize,
    pub blocks: usize,
    pub final_norm: usize,
    /// `D * vocab` (untied)
    pub unembedding: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.blocks + self.final_norm + self.unembedding
    }
}

/// Slot offsets of a block's tensors within the parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockParam {
    Ln1Gain = 0,
    Ln1Bias,
    Query,
    Key,
    Value,
    Output,
    Ln2Gain,
    Ln2Bias,
    MlpUp,
    MlpDown,
}

const PER_BLOCK: usize = 10;

impl BlockParam {
    pub const ALL: [BlockParam; PER_BLOCK] = [
        BlockParam::Ln1Gain,
        BlockParam::Ln1Bias,
        BlockParam::Query,
        BlockParam::Key,
        BlockParam::Value,
        BlockParam::Output,
        BlockParam::Ln2Gain,
        BlockParam::Ln2Bias,
        BlockParam::MlpUp,
        BlockParam::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockParam::Ln1Gain => "ln1.gain",
            BlockParam::Ln1Bias => "ln1.bias",
            BlockParam::Query => "attn.q",
            BlockParam::Key => "attn.k",
            BlockParam::Value => "attn.v",
            BlockParam::Output => "attn.o",
            BlockParam::Ln2Gain => "ln2.gain",
            BlockParam::Ln2Bias => "ln2.bias",
            BlockParam::MlpUp => "mlp.up",
            BlockParam::MlpDown => "mlp.down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Layer representations and logits of one sequence.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    /// `L + 1` tensors of shape `[T, D]`.
    pub hidden: Vec<Tensor>,
    /// `[T, vocab]`
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    names: Vec<String>,
    positions: Vec<f64>,
    frozen: bool,
}

/// Tape handles for every parameter of a model, in parameter order. Entries
/// may be replaced to route a block through an adapted weight.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: Vec<Var>,
}

impl TransformerModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let (v, d, m, l) = (config.vocab_size, config.width, config.mlp_hidden, config.n_layers);
        let std = 0.02;
        let out_std = std / ((2 * l) as f64).sqrt();
        let mut params = Vec::with_capacity(3 + PER_BLOCK * l);
        let mut names = Vec::with_capacity(params.capacity());
        params.push(Tensor::randn(vec![v, d], std, &mut rng));
        names.push("tok_emb".to_string());
        for b in 0..l {
            for p in BlockParam::ALL {
                let t = match p {
                    BlockParam::Ln1Gain | BlockParam::Ln2Gain => Tensor::filled(vec![d], 1.0),
                    BlockParam::Ln1Bias | BlockParam::Ln2Bias => Tensor::zeros(vec![d]),
                    BlockParam::Query | BlockParam::Key | BlockParam::Value => Tensor::randn(vec![d, d], std, &mut rng),
                    BlockParam::Output => Tensor::randn(vec![d, d], out_std, &mut rng),
                    BlockParam::MlpUp => Tensor::randn(vec![d, m], std, &mut rng),
                    BlockParam::MlpDown => Tensor::randn(vec![m, d], out_std, &mut rng),
                };
                params.push(t);
                names.push(format!("blocks.{b}.{}", p.name()));
            }
        }
        params.push(Tensor::filled(vec![d], 1.0));
        names.push("ln_f.gain".to_string());
        params.push(Tensor::zeros(vec![d]));
        names.push("ln_f.bias".to_string());
        params.push(Tensor::randn(vec![d, v], std, &mut rng));
        names.push("unembed".to_string());

        let mut model = TransformerModel {
            positions: sinusoidal_positions(config.context_len, d),
            config,
            params,
            names,
            frozen: false,
        };
        model.freeze(false);
        Ok(model)
    }

    /// Rebuilds a model from named tensors (checkpoint loading). Tensors must
    /// match the layout `init` would produce for `config`.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = TransformerModel::init(config)?;
        if named.len() != model.params.len() {
            return Err(Error::invalid(
                "from_params",
                format!("expected {} tensors, got {}", model.params.len(), named.len()),
            ));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] || t.shape() != model.params[i].shape() {
                return Err(Error::invalid(
                    "from_params",
                    format!(
                        "tensor {i}: expected {} {:?}, got {name} {:?}",
                        model.names[i],
                        model.params[i].shape(),
                        t.shape()
                    ),
                ));
            }
            model.params[i] = t;
        }
        model.freeze(false);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen weights never require gradients.
    pub fn freeze(&mut self, frozen: bool) {
        self.frozen = frozen;
        for p in &mut self.params {
            p.set_requires_grad(!frozen);
        }
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn block_slot(&self, block: usize, p: BlockParam) -> usize {
        1 + block * PER_BLOCK + p as usize
    }

    pub fn block_param(&self, block: usize, p: BlockParam) -> &Tensor {
        &self.params[self.block_slot(block, p)]
    }

    /// All weight bytes, in parameter order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(Tensor::to_le_bytes).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            vars: self.params.iter().map(|p| tape.leaf(p)).collect(),
        }
    }

    /// Copies tape gradients into the parameters that require them.
    pub fn write_grads(&mut self, tape: &Tape, bound: &BoundModel) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            tape.write_grad(v, p);
        }
    }

    pub fn check_tokens(&self, tokens: &[TokenId], seq: usize) -> Result<()> {
        if seq > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: seq,
                context: self.config.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Layer-0 representation of a `[batch, seq]` token block: embedding rows
    /// scaled by `D` plus sinusoidal positions. Shape `[batch, seq, D]`.
    ///
    /// With the 0.02 init the scaled rows start at roughly the per-coordinate
    /// magnitude of the positional code; the conventional `sqrt(D)` factor
    /// leaves token identity swamped by position and slows fact memorization
    /// about twofold at desk scale.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[TokenId],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        if tokens.len() != batch * seq || seq == 0 {
            return Err(Error::invalid(
                "forward",
                format!("{} tokens for batch {batch} x seq {seq}", tokens.len()),
            ));
        }
        self.check_tokens(tokens, seq)?;
        let d = self.config.width;
        let rows = tape.embedding(bound.vars[0], tokens)?;
        let rows = tape.scale(rows, d as f64);
        let x = tape.reshape(rows, vec![batch, seq, d])?;
        let pos = tape.constant(vec![seq, d], self.positions[..seq * d].to_vec())?;
        tape.add(x, pos)
    }

    /// Applies block `block` (0-based) to `x: [batch, seq, D]`.
    pub fn block(&self, tape: &mut Tape, bound: &BoundModel, block: usize, x: Var) -> Result<Var> {
        let p = |bp: BlockParam| bound.vars[self.block_slot(block, bp)];
        let shape = tape.shape(x).to_vec();
        let (batch, seq, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.config.n_heads, self.config.head_dim());

        let n1 = tape.layer_norm(x, p(BlockParam::Ln1Gain), p(BlockParam::Ln1Bias))?;
        let split = |tape: &mut Tape, w: Var| -> Result<Var> {
            let y = tape.matmul(n1, w)?;
            let y = tape.reshape(y, vec![batch, seq, h, dh])?;
            tape.permute(y, &[0, 2, 1, 3])
        };
        let q = split(tape, p(BlockParam::Query))?;
        let k = split(tape, p(BlockParam::Key))?;
        let v = split(tape, p(BlockParam::Value))?;
        let scores = tape.matmul_transposed(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.causal_softmax(scores)?;
        let ctx = tape.matmul(att, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![batch, seq, d])?;
        let attn_out = tape.matmul(ctx, p(BlockParam::Output))?;
        let x = tape.add(x, attn_out)?;

        let n2 = tape.layer_norm(x, p(BlockParam::Ln2Gain), p(BlockParam::Ln2Bias))?;
        let up = tape.matmul(n2, p(BlockParam::MlpUp))?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, p(BlockParam::MlpDown))?;
        tape.add(x, down)
    }

    /// Final norm and unembedding: `[batch, seq, D]` to `[batch, seq, vocab]`.
    pub fn head(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        let n = bound.vars.len();
        let normed = tape.layer_norm(x, bound.vars[n - 3], bound.vars[n - 2])?;
        tape.matmul(normed, bound.vars[n - 1])
    }

    /// Runs all blocks on a `[batch, seq]` token block, returning every layer
    /// representation (`L + 1` vars) and the logits var.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        tokens: &[TokenId],
        batch: usize,
        seq: usize,
    ) -> Result<(Vec<Var>, Var)> {
        let mut hidden = Vec::with_capacity(self.config.n_layers + 1);
        let mut x = self.embed(tape, bound, tokens, batch, seq)?;
        hidden.push(x);
        for b in 0..self.config.n_layers {
            x = self.block(tape, bound, b, x)?;
            hidden.push(x);
        }
        let logits = self.head(tape, bound, x)?;
        Ok((hidden, logits))
    }

    /// Full trace of a single sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<HiddenTrace> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let seq = tokens.len();
        let (hidden, logits) = self.forward_vars(&mut tape, &bound, tokens, 1, seq)?;
        let squeeze = |tape: &Tape, v: Var| {
            let t = tape.to_tensor(v);
            let last = *t.shape().last().expect("non-empty");
            t.reshaped(vec![seq, last]).expect("batch of one")
        };
        Ok(HiddenTrace {
            hidden: hidden.iter().map(|&v| squeeze(&tape, v)).collect(),
            logits: squeeze(&tape, logits),
        })
    }
}

impl LanguageModel for TransformerModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (_, logits) = self.forward_vars(&mut tape, &bound, tokens, batch, seq)?;
        Ok(tape.to_tensor(logits))
    }
}

/// `PE[t, 2i] = sin(t / 10000^(2i/D))`, `PE[t, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(context: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; context * d];
    for t in 0..context {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / freq;
            pe[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Anything that maps token blocks to next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;
    /// Logits for a row-major `[batch, seq]` token block, shape
    /// `[batch, seq, vocab]`.
    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor>;
}

/// Greedy decoding: appends the arg-max token (lowest id on ties) until
/// `stop` is produced or `max_new` tokens have been added.
pub fn generate_greedy<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_new: usize,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let mut out = generate_greedy_batch(model, &[prompt.to_vec()], max_new, stop)?;
    Ok(out.pop().expect("one sequence"))
}

/// Greedy decoding of equal-length prompts in lockstep. Each sequence stops
/// independently; the result for a prompt equals [`generate_greedy`] on it.
pub fn generate_greedy_batch<M: LanguageModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    max_new: usize,
    stop: Option<TokenId>,
) -> Result<Vec<Vec<TokenId>>> {
    let Some(first) = prompts.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if prompts.iter().any(|p| p.len() != len) {
        return Err(Error::invalid("generate", "prompts in a batch must share a length"));
    }
    if len == 0 {
        return Err(Error::invalid("generate", "empty prompt"));
    }
    if len + max_new > model.context_len() {
        return Err(Error::ContextOverflow {
            len: len + max_new,
            context: model.context_len(),
        });
    }
    let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
    let mut done = vec![false; prompts.len()];
    let vocab = model.vocab_size();
    for _ in 0..max_new {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let seq = seqs[active[0]].len();
        let flat: Vec<TokenId> = active.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
        let logits = model.batch_logits(&flat, active.len(), seq)?;
        for (row, &i) in active.iter().enumerate() {
            let off = (row * seq + seq - 1) * vocab;
            let next = argmax(&logits.data()[off..off + vocab]);
            seqs[i].push(next);
            if Some(next) == stop {
                done[i] = true;
            }
        }
        // Sequences that finished early stay shorter; lockstep continues on
        // the remaining ones, which all share the same length.
    }
    Ok(seqs)
}
