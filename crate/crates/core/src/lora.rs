//! Low-rank adapters on a frozen anchor, sized to match a connector budget.

use crate::error::{Error, Result};
use crate::lm::{BlockParam, BoundModel, LanguageModel, TokenId, TransformerModel};
use crate::tensor::{seeded_rng, Tape, Tensor, Var};

/// A chosen rank and the parameter count it realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankChoice {
    pub rank: usize,
    pub realized: usize,
}

impl RankChoice {
    /// `|realized - budget| / budget`
    pub fn parity_gap(&self, budget: usize) -> f64 {
        (self.realized as f64 - budget as f64).abs() / budget as f64
    }
}

/// `r = max(1, round(budget / sum(d_in + d_out)))`.
pub fn lora_rank_for_budget(budget: usize, targets: &[(usize, usize)]) -> Result<RankChoice> {
    if budget == 0 {
        return Err(Error::invalid("lora_rank_for_budget", "budget must be positive"));
    }
    let per_rank: usize = targets.iter().map(|(i, o)| i + o).sum();
    if per_rank == 0 {
        return Err(Error::invalid("lora_rank_for_budget", "no target matrices"));
    }
    let rank = ((budget as f64 / per_rank as f64).round() as usize).max(1);
    Ok(RankChoice {
        rank,
        realized: rank * per_rank,
    })
}

/// An adapted anchor matrix, addressed as `blocks.<b>.attn.<q|k|v|o>` or
/// `blocks.<b>.mlp.<up|down>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraTarget {
    pub block: usize,
    pub param: BlockParam,
}

impl LoraTarget {
    pub fn parse(name: &str, anchor: &TransformerModel) -> Result<Self> {
        let unknown = || Error::config("lora.targets", format!("unknown target `{name}`"));
        let rest = name.strip_prefix("blocks.").ok_or_else(unknown)?;
        let (block, param) = rest.split_once('.').ok_or_else(unknown)?;
        let block: usize = block.parse().map_err(|_| unknown())?;
        let param = BlockParam::from_name(param).ok_or_else(unknown)?;
        let matrix = matches!(
            param,
            BlockParam::Query
                | BlockParam::Key
                | BlockParam::Value
                | BlockParam::Output
                | BlockParam::MlpUp
                | BlockParam::MlpDown
        );
        if !matrix || block >= anchor.config().n_layers {
            return Err(unknown());
        }
        Ok(LoraTarget { block, param })
    }

    pub fn name(&self) -> String {
        format!("blocks.{}.{}", self.block, self.param.name())
    }
}

/// Self-attention query and value projections of every block.
pub fn default_targets(anchor: &TransformerModel) -> Vec<String> {
    (0..anchor.config().n_layers)
        .flat_map(|b| [format!("blocks.{b}.attn.q"), format!("blocks.{b}.attn.v")])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    /// `[d_in, r]` per target.
    pub a: Vec<Tensor>,
    /// `[r, d_out]` per target, zero at init.
    pub b: Vec<Tensor>,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_params(&self) -> usize {
        self.a.iter().chain(&self.b).map(Tensor::numel).sum()
    }
}

/// Frozen anchor whose target matrices `W` act as `W + (alpha / r) A B`.
#[derive(Debug, Clone)]
pub struct LoraModel {
    anchor: TransformerModel,
    adapter: LoraAdapter,
}

/// Tape handles of one adapted forward.
#[derive(Debug, Clone)]
pub struct BoundLora {
    pub anchor: BoundModel,
    pub a: Vec<Var>,
    pub b: Vec<Var>,
}

/// Wraps `anchor` (frozen here) with rank-`rank` adapters on `targets`.
/// `A ~ N(0, 1 / d_in)`, `B = 0`.
pub fn attach_lora(
    mut anchor: TransformerModel,
    rank: usize,
    alpha: f64,
    targets: &[String],
    seed: u64,
) -> Result<LoraModel> {
    if rank == 0 {
        return Err(Error::config("lora.rank", "must be positive"));
    }
    if targets.is_empty() {
        return Err(Error::config("lora.targets", "no targets"));
    }
    anchor.freeze(true);
    let parsed = targets
        .iter()
        .map(|t| LoraTarget::parse(t, &anchor))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = seeded_rng(seed);
    let mut a = Vec::with_capacity(parsed.len());
    let mut b = Vec::with_capacity(parsed.len());
    for t in &parsed {
        let shape = anchor.block_param(t.block, t.param).shape();
        let (d_in, d_out) = (shape[0], shape[1]);
        a.push(Tensor::randn(vec![d_in, rank], 1.0 / (d_in as f64).sqrt(), &mut rng).with_requires_grad(true));
        b.push(Tensor::zeros(vec![rank, d_out]).with_requires_grad(true));
    }
    Ok(LoraModel {
        anchor,
        adapter: LoraAdapter {
            rank,
            alpha,
            targets: parsed,
            a,
            b,
        },
    })
}

impl LoraModel {
    pub fn from_parts(mut anchor: TransformerModel, mut adapter: LoraAdapter) -> Result<Self> {
        anchor.freeze(true);
        for (i, t) in adapter.targets.iter().enumerate() {
            let shape = anchor.block_param(t.block, t.param).shape();
            if adapter.a[i].shape() != [shape[0], adapter.rank] || adapter.b[i].shape() != [adapter.rank, shape[1]] {
                return Err(Error::invalid(
                    "lora",
                    format!("adapter shapes do not fit {}", t.name()),
                ));
            }
        }
        adapter
            .a
            .iter_mut()
            .chain(adapter.b.iter_mut())
            .for_each(|t| t.set_requires_grad(true));
        Ok(LoraModel { anchor, adapter })
    }

    pub fn anchor(&self) -> &TransformerModel {
        &self.anchor
    }

    pub fn adapter(&self) -> &LoraAdapter {
        &self.adapter
    }

    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        self.adapter.a.iter().chain(&self.adapter.b).collect()
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.adapter.a.iter_mut().chain(self.adapter.b.iter_mut()).collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.adapter.trainable_params()
    }

    /// Binds the anchor and routes every target through its adapted weight.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundLora> {
        let mut anchor = self.anchor.bind(tape);
        let a: Vec<Var> = self.adapter.a.iter().map(|t| tape.leaf(t)).collect();
        let b: Vec<Var> = self.adapter.b.iter().map(|t| tape.leaf(t)).collect();
        let scaling = self.adapter.scaling();
        for (k, t) in self.adapter.targets.iter().enumerate() {
            let slot = self.anchor.block_slot(t.block, t.param);
            let delta = tape.matmul(a[k], b[k])?;
            let delta = tape.scale(delta, scaling);
            anchor.vars[slot] = tape.add(anchor.vars[slot], delta)?;
        }
        Ok(BoundLora { anchor, a, b })
    }

    pub fn forward_on(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        batch: usize,
        seq: usize,
    ) -> Result<(Var, BoundLora)> {
        let bound = self.bind(tape)?;
        let (_, logits) = self.anchor.forward_vars(tape, &bound.anchor, tokens, batch, seq)?;
        Ok((logits, bound))
    }

    pub fn write_grads(&mut self, tape: &Tape, bound: &BoundLora) {
        for (t, &v) in self.adapter.a.iter_mut().zip(&bound.a) {
            tape.write_grad(v, t);
        }
        for (t, &v) in self.adapter.b.iter_mut().zip(&bound.b) {
            tape.write_grad(v, t);
        }
    }
}

impl LanguageModel for LoraModel {
    fn vocab_size(&self) -> usize {
        self.anchor.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.anchor.config().context_len
    }

    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward_on(&mut tape, tokens, batch, seq)?;
        Ok(tape.to_tensor(logits))
    }
}
