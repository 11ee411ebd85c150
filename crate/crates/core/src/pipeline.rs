//! The end-to-end desk experiment: run configuration, the shared-base
//! pretraining recipe, the four-model comparison for one seed and the
//! single-connection ablation.
//!
//! Artifacts of a run live under one directory:
//!
//! ```text
//! config.json
//! data/{base,augment,anchor}_corpus.txt  data/connector_qa.jsonl  data/eval.jsonl
//! models/{base,anchor,augment,connector,lora}.ckpt
//! reports/*.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calm::{make_topology, ComposedModel, ConnectionSpec, Topology};
use crate::checkpoint::{
    base_checkpoint, connector_checkpoint, load_checkpoint, lora_checkpoint, model_from_checkpoint, save_checkpoint,
    write_atomic, BaseRef, Checkpoint,
};
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, TokenId, TransformerModel};
use crate::lora::{attach_lora, default_targets, lora_rank_for_budget, LoraModel, RankChoice};
use crate::synth::{
    compare_models, evaluate, gen_corpora, ComparisonTable, Corpora, DataConfig, EvalReport, EvalSets, QaDataset, Task,
    Vocab,
};
use crate::train::{pretrain, train_connector, train_lora, TrainConfig, TrainReport};

/// Largest tolerated `|LoRA - connector| / connector` trainable-count gap.
pub const PARITY_TOLERANCE: f64 = 0.05;

/// Model shape shared by the base, anchor and augment models; the
/// vocabulary size comes from the data and the seed from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub context_len: usize,
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 0);
        ModelShape {
            context_len: d.context_len,
            n_layers: d.n_layers,
            width: d.width,
            n_heads: d.n_heads,
            mlp_hidden: d.mlp_hidden,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len: self.context_len,
            n_layers: self.n_layers,
            width: self.width,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            seed,
        }
    }
}

/// Optimizer settings per training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub base: TrainConfig,
    pub anchor: TrainConfig,
    pub augment: TrainConfig,
    pub connector: TrainConfig,
    pub lora: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let stage = |epochs, batch_size| TrainConfig {
            epochs,
            batch_size,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        TrainSection {
            base: stage(60, 16),
            anchor: stage(10, 16),
            augment: stage(60, 16),
            connector: stage(20, 4),
            lora: stage(20, 4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    /// Connection layout of the shipped composed model.
    pub connection: String,
    pub n_cross_heads: usize,
    /// Single-connection layouts compared by the ablation.
    pub ablation: Vec<String>,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            connection: "pairs:(8,6)".into(),
            n_cross_heads: 4,
            ablation: vec!["head".into(), "mid".into(), "tail".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { seeds: vec![0, 1, 2] }
    }
}

/// Every knob of a run. Unknown keys are rejected; missing keys take the
/// shipped defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelShape,
    pub train: TrainSection,
    pub topology: TopologySection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses and validates a JSON run configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Schema checks that need no compute.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let vocab = Vocab::for_data(&self.data);
        self.model_config(&vocab).validate()?;
        for (name, t) in [
            ("train.base", &self.train.base),
            ("train.anchor", &self.train.anchor),
            ("train.augment", &self.train.augment),
            ("train.connector", &self.train.connector),
            ("train.lora", &self.train.lora),
        ] {
            t.validate().map_err(|e| Error::config(name, e.to_string()))?;
        }
        if self.train.connector.split_ratio != self.data.split_ratio {
            return Err(Error::config(
                "train.connector.split_ratio",
                "must equal data.split_ratio so the memorized set is the connector's training split",
            ));
        }
        let spec = self.connection(&self.topology.connection.parse()?)?;
        spec.validate(self.model.n_layers, self.model.n_layers, self.model.width)?;
        for point in &self.topology.ablation {
            let spec = self.connection(&point.parse()?)?;
            spec.validate(self.model.n_layers, self.model.n_layers, self.model.width)?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "needs at least one seed"));
        }
        Ok(())
    }

    /// The configuration of one seed's run: the data, every trainer and the
    /// base initialization all follow `seed`.
    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.data.seed = seed;
        for t in [
            &mut cfg.train.base,
            &mut cfg.train.anchor,
            &mut cfg.train.augment,
            &mut cfg.train.connector,
            &mut cfg.train.lora,
        ] {
            t.seed = seed;
        }
        cfg
    }

    pub fn seed(&self) -> u64 {
        self.data.seed
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        self.model.config(vocab.len(), self.data.seed)
    }

    pub fn connection(&self, topology: &Topology) -> Result<ConnectionSpec> {
        make_topology(
            topology,
            self.model.n_layers,
            self.model.n_layers,
            self.topology.n_cross_heads,
        )
    }

    pub fn ablation_points(&self) -> Result<Vec<Topology>> {
        self.topology.ablation.iter().map(|p| p.parse()).collect()
    }
}

/// The three pretrained models. The base learns general text from scratch;
/// anchor and augment both continue from it, so their residual streams share
/// a coordinate system the bridge can exploit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Anchor,
    Augment,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Base => "base",
            Role::Anchor => "anchor",
            Role::Augment => "augment",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Role::Base),
            "anchor" => Ok(Role::Anchor),
            "augment" => Ok(Role::Augment),
            _ => Err(Error::config(
                "role",
                format!("`{s}` is not one of base, anchor, augment"),
            )),
        }
    }
}

/// Pretrains `role` on its corpus. Anchor and augment need the trained base
/// as `init`; the base must not get one.
pub fn pretrain_role(
    cfg: &RunConfig,
    data: &Corpora,
    role: Role,
    init: Option<&TransformerModel>,
) -> Result<(TransformerModel, TrainReport)> {
    let (corpus, train_cfg) = match role {
        Role::Base => (&data.base_corpus, &cfg.train.base),
        Role::Anchor => (&data.anchor_corpus, &cfg.train.anchor),
        Role::Augment => (&data.augment_corpus, &cfg.train.augment),
    };
    let mut model = match (role, init) {
        (Role::Base, None) => TransformerModel::init(cfg.model_config(&data.vocab))?,
        (Role::Base, Some(_)) => return Err(Error::config("init", "the base model starts from scratch")),
        (_, Some(base)) => {
            if base.config() != &cfg.model_config(&data.vocab) {
                return Err(Error::config(
                    "init",
                    "base checkpoint does not match the configured model",
                ));
            }
            let mut m = base.clone();
            m.freeze(false);
            m
        }
        (_, None) => {
            return Err(Error::config(
                "init",
                format!("the {} model continues from the base checkpoint", role.name()),
            ))
        }
    };
    data.vocab.check_fits(model.config().vocab_size)?;
    let report = pretrain(&mut model, corpus, train_cfg, data.vocab.pad())?;
    Ok((model, report))
}

/// LoRA on the anchor's default targets with the rank that matches
/// `budget`, `alpha = rank`.
pub fn lora_for_budget(anchor: TransformerModel, budget: usize, seed: u64) -> Result<(LoraModel, RankChoice)> {
    let targets = default_targets(&anchor);
    let shapes: Vec<(usize, usize)> = targets
        .iter()
        .map(|t| {
            let t = crate::lora::LoraTarget::parse(t, &anchor)?;
            let s = anchor.block_param(t.block, t.param).shape();
            Ok((s[0], s[1]))
        })
        .collect::<Result<_>>()?;
    let choice = lora_rank_for_budget(budget, &shapes)?;
    if choice.parity_gap(budget) > PARITY_TOLERANCE {
        return Err(Error::config(
            "lora.rank",
            format!(
                "no rank matches the connector budget: {} vs {budget} ({:.1}% apart)",
                choice.realized,
                100.0 * choice.parity_gap(budget)
            ),
        ));
    }
    let model = attach_lora(anchor, choice.rank, choice.rank as f64, &targets, seed)?;
    Ok((model, choice))
}

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn corpus(&self, role: Role) -> PathBuf {
        self.root.join("data").join(format!("{}_corpus.txt", role.name()))
    }

    pub fn connector_qa(&self) -> PathBuf {
        self.root.join("data/connector_qa.jsonl")
    }

    pub fn eval_sets(&self) -> PathBuf {
        self.root.join("data/eval.jsonl")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn text_report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }

    /// Writes the generated data files.
    pub fn write_data(&self, data: &Corpora) -> Result<()> {
        write_atomic(&self.corpus(Role::Base), data.corpus_text(&data.base_corpus).as_bytes())?;
        write_atomic(
            &self.corpus(Role::Anchor),
            data.corpus_text(&data.anchor_corpus).as_bytes(),
        )?;
        write_atomic(
            &self.corpus(Role::Augment),
            data.corpus_text(&data.augment_corpus).as_bytes(),
        )?;
        write_atomic(&self.connector_qa(), data.connector_qa.to_jsonl(&data.vocab).as_bytes())?;
        write_atomic(&self.eval_sets(), data.eval.to_jsonl(&data.vocab).as_bytes())
    }

    pub fn read_corpus(&self, role: Role, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
        let path = self.corpus(role);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| vocab.encode(l))
            .collect()
    }

    pub fn read_connector_qa(&self, vocab: &Vocab) -> Result<QaDataset> {
        let path = self.connector_qa();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        QaDataset::from_jsonl(&text, vocab)
    }

    pub fn read_eval_sets(&self, vocab: &Vocab) -> Result<EvalSets> {
        let path = self.eval_sets();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        EvalSets::from_jsonl(&text, vocab)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        write_atomic(&self.report(name), text.as_bytes())
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let path = self.report(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Saves a base model tagged with the run's eval-set hash; returns the
/// reference other checkpoints record.
pub fn save_base(model: &TransformerModel, eval_hash: &str, path: &Path) -> Result<BaseRef> {
    let mut ckpt = base_checkpoint(model);
    ckpt.header.eval_hash = Some(eval_hash.to_string());
    let crc32 = save_checkpoint(&ckpt, path)?;
    Ok(BaseRef {
        path: path.to_path_buf(),
        crc32,
    })
}

/// Loads a base checkpoint, refusing one produced for different eval sets.
pub fn load_base(path: &Path, eval_hash: &str) -> Result<(TransformerModel, BaseRef)> {
    let ckpt = load_checkpoint(path)?;
    check_eval_hash(&ckpt, eval_hash)?;
    let model = model_from_checkpoint(&ckpt, path)?;
    Ok((
        model,
        BaseRef {
            path: path.to_path_buf(),
            crc32: ckpt.crc32(),
        },
    ))
}

/// Fails with both hashes when `ckpt` was tagged for other eval sets.
pub fn check_eval_hash(ckpt: &Checkpoint, eval_hash: &str) -> Result<()> {
    match &ckpt.header.eval_hash {
        Some(h) if h != eval_hash => Err(Error::HashMismatch {
            expected: h.clone(),
            found: eval_hash.to_string(),
        }),
        _ => Ok(()),
    }
}

/// Reads the file at `r.path` and fails unless its payload CRC is `r.crc32`.
pub fn verify_base_ref(r: &BaseRef) -> Result<Vec<u8>> {
    let bytes = fs::read(&r.path).map_err(|e| Error::io(&r.path, e))?;
    let crc = Checkpoint::from_bytes(&bytes, &r.path)?.crc32();
    if crc != r.crc32 {
        return Err(Error::Checkpoint {
            path: r.path.clone(),
            msg: format!("CRC {crc:08x} differs from the recorded {:08x}", r.crc32),
        });
    }
    Ok(bytes)
}

/// Evidence that connector training left both bases untouched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenCheck {
    pub anchor_crc_before: u32,
    pub anchor_crc_after: u32,
    pub augment_crc_before: u32,
    pub augment_crc_after: u32,
    /// Serialized in-memory bases after training equal the files on disk.
    pub bytes_identical: bool,
}

impl FrozenCheck {
    pub fn passed(&self) -> bool {
        self.bytes_identical
            && self.anchor_crc_before == self.anchor_crc_after
            && self.augment_crc_before == self.augment_crc_after
    }
}

/// Trains a connector over the two saved bases, checks they are unchanged
/// and writes the connector checkpoint with both base CRCs in its header.
#[allow(clippy::too_many_arguments)]
pub fn compose_and_train(
    anchor_ref: &BaseRef,
    augment_ref: &BaseRef,
    spec: ConnectionSpec,
    qa: &QaDataset,
    cfg: &TrainConfig,
    eval_hash: &str,
    pad: TokenId,
    out: Option<&Path>,
) -> Result<(ComposedModel, TrainReport, FrozenCheck)> {
    let anchor_bytes = verify_base_ref(anchor_ref)?;
    let augment_bytes = verify_base_ref(augment_ref)?;
    let (anchor, _) = load_base(&anchor_ref.path, eval_hash)?;
    let (augment, _) = load_base(&augment_ref.path, eval_hash)?;
    let mut cm = ComposedModel::new(anchor, augment, spec, cfg.seed)?;
    let report = train_connector(&mut cm, &qa.examples(), cfg, pad)?;
    let reserialize = |m: &TransformerModel| {
        let mut ckpt = base_checkpoint(m);
        ckpt.header.eval_hash = Some(eval_hash.to_string());
        ckpt.to_bytes()
    };
    let after_anchor = verify_base_ref(anchor_ref);
    let after_augment = verify_base_ref(augment_ref);
    let check = FrozenCheck {
        anchor_crc_before: anchor_ref.crc32,
        anchor_crc_after: base_checkpoint(cm.anchor()).crc32(),
        augment_crc_before: augment_ref.crc32,
        augment_crc_after: base_checkpoint(cm.augment()).crc32(),
        bytes_identical: reserialize(cm.anchor()) == anchor_bytes
            && reserialize(cm.augment()) == augment_bytes
            && after_anchor.is_ok()
            && after_augment.is_ok(),
    };
    if !check.passed() {
        return Err(Error::FrozenViolation(format!("base checkpoints changed: {check:?}")));
    }
    if let Some(path) = out {
        let mut ckpt = connector_checkpoint(&cm, anchor_ref.clone(), augment_ref.clone());
        ckpt.header.eval_hash = Some(eval_hash.to_string());
        save_checkpoint(&ckpt, path)?;
    }
    Ok((cm, report, check))
}

/// Everything one seed of the four-model comparison produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub eval_hash: String,
    /// anchor, augment, lora, calm — in that order.
    pub reports: Vec<EvalReport>,
    pub pretrain: BTreeMap<String, TrainReport>,
    pub connector_train: TrainReport,
    pub lora_train: TrainReport,
    pub connector_params: usize,
    pub lora_params: usize,
    pub lora_rank: usize,
    pub frozen: FrozenCheck,
}

impl SeedOutcome {
    pub fn report(&self, model: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.model == model)
    }

    pub fn accuracy(&self, model: &str, task: Task) -> f64 {
        self.report(model).map_or(0.0, |r| r.accuracy(task))
    }
}

/// Labels of the four compared models.
pub const MODELS: [&str; 4] = ["anchor", "augment", "lora", "calm"];

/// Runs the whole pipeline for one seed, writing every artifact under `dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, dir: &RunDir, log: &mut dyn FnMut(&str)) -> Result<SeedOutcome> {
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    write_atomic(&dir.config(), cfg.to_json().as_bytes())?;
    let data = gen_corpora(&cfg.data)?;
    dir.write_data(&data)?;
    let vocab = &data.vocab;
    let pad = vocab.pad();
    let eval_hash = data.eval.content_hash(vocab);
    log(&format!("seed {seed}: data ready (eval hash {})", &eval_hash[..12]));

    let mut pretrain_reports = BTreeMap::new();
    let (base, r) = pretrain_role(&cfg, &data, Role::Base, None)?;
    save_base(&base, &eval_hash, &dir.model("base"))?;
    log(&format!(
        "seed {seed}: base trained, final loss {:.4}",
        r.train_loss.last().unwrap_or(&f64::NAN)
    ));
    pretrain_reports.insert("base".to_string(), r);
    let mut refs = BTreeMap::new();
    for role in [Role::Anchor, Role::Augment] {
        let (model, r) = pretrain_role(&cfg, &data, role, Some(&base))?;
        refs.insert(role.name(), save_base(&model, &eval_hash, &dir.model(role.name()))?);
        log(&format!(
            "seed {seed}: {} trained, final loss {:.4}",
            role.name(),
            r.train_loss.last().unwrap_or(&f64::NAN)
        ));
        pretrain_reports.insert(role.name().to_string(), r);
    }
    let (anchor_ref, augment_ref) = (refs["anchor"].clone(), refs["augment"].clone());

    let spec = cfg.connection(&cfg.topology.connection.parse()?)?;
    let (cm, connector_train, frozen) = compose_and_train(
        &anchor_ref,
        &augment_ref,
        spec,
        &data.connector_qa,
        &cfg.train.connector,
        &eval_hash,
        pad,
        Some(&dir.model("connector")),
    )?;
    log(&format!(
        "seed {seed}: connector trained (best epoch {})",
        connector_train.best_epoch
    ));

    let (anchor, _) = load_base(&anchor_ref.path, &eval_hash)?;
    let (mut lora, choice) = lora_for_budget(anchor, cm.trainable_params(), seed)?;
    let lora_train = train_lora(&mut lora, &data.connector_qa.examples(), &cfg.train.lora, pad)?;
    let mut ckpt = lora_checkpoint(&lora, anchor_ref.clone());
    ckpt.header.eval_hash = Some(eval_hash.clone());
    save_checkpoint(&ckpt, &dir.model("lora"))?;
    log(&format!(
        "seed {seed}: LoRA rank {} trained (best epoch {})",
        choice.rank, lora_train.best_epoch
    ));

    let (anchor, _) = load_base(&anchor_ref.path, &eval_hash)?;
    let (augment, _) = load_base(&augment_ref.path, &eval_hash)?;
    let mut reports = vec![
        evaluate(&anchor, &data.eval, vocab, "anchor", seed)?,
        evaluate(&augment, &data.eval, vocab, "augment", seed)?,
    ];
    let mut r = evaluate(&lora, &data.eval, vocab, "lora", seed)?;
    r.trainable_params = Some(lora.trainable_params());
    reports.push(r);
    let mut r = evaluate(&cm, &data.eval, vocab, "calm", seed)?;
    r.trainable_params = Some(cm.trainable_params());
    reports.push(r);
    for r in &reports {
        dir.write_json(&format!("eval_{}", r.model), r)?;
    }
    dir.write_json("train_connector", &connector_train)?;
    dir.write_json("train_lora", &lora_train)?;
    log(&format!(
        "seed {seed}: transfer anchor {:.3} augment {:.3} lora {:.3} calm {:.3}",
        reports[0].accuracy(Task::Transfer),
        reports[1].accuracy(Task::Transfer),
        reports[2].accuracy(Task::Transfer),
        reports[3].accuracy(Task::Transfer),
    ));

    Ok(SeedOutcome {
        seed,
        eval_hash,
        reports,
        pretrain: pretrain_reports,
        connector_train,
        lora_train,
        connector_params: cm.trainable_params(),
        lora_params: lora.trainable_params(),
        lora_rank: choice.rank,
        frozen,
    })
}

/// The single-connection comparison over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub points: Vec<String>,
    pub seeds: Vec<u64>,
    pub table: ComparisonTable,
    /// Transfer accuracy per point, one entry per seed.
    pub transfer: BTreeMap<String, Vec<f64>>,
}

/// Ordering published for the three single-layer connection points, with
/// the scores it was reported with.
pub const REFERENCE_ORDERING: [(&str, f64); 3] = [("mid", 0.244444), ("tail", 0.093056), ("head", 0.052778)];

impl AblationOutcome {
    pub fn mean_transfer(&self, point: &str) -> Option<f64> {
        let v = self.transfer.get(point)?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Points sorted by mean transfer accuracy, best first.
    pub fn observed_ordering(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self
            .points
            .iter()
            .map(|p| (p.clone(), self.mean_transfer(p).unwrap_or(0.0)))
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v
    }

    /// Seeds on which `a` scored at least `b` on transfer.
    pub fn wins(&self, a: &str, b: &str) -> Option<usize> {
        let (x, y) = (self.transfer.get(a)?, self.transfer.get(b)?);
        Some(x.iter().zip(y).filter(|(x, y)| x >= y).count())
    }

    /// `mid >= head` and `mid >= tail` each on a majority of seeds.
    pub fn mid_majority(&self) -> Option<bool> {
        let need = self.seeds.len() / 2 + 1;
        Some(self.wins("mid", "head")? >= need && self.wins("mid", "tail")? >= need)
    }

    pub fn render(&self) -> String {
        let fmt = |v: &[(String, f64)]| {
            v.iter()
                .map(|(p, s)| format!("{p} ({s:.6})"))
                .collect::<Vec<_>>()
                .join(" > ")
        };
        let reference: Vec<(String, f64)> = REFERENCE_ORDERING.iter().map(|(p, s)| (p.to_string(), *s)).collect();
        let mut out = self.table.render();
        out.push_str("\ntransfer accuracy per seed\n");
        for p in &self.points {
            let v: Vec<String> = self.transfer[p].iter().map(|x| format!("{x:.4}")).collect();
            out.push_str(&format!("  {p:<8} {}\n", v.join("  ")));
        }
        out.push_str(&format!("\nobserved ordering:  {}\n", fmt(&self.observed_ordering())));
        out.push_str(&format!("published ordering: {}\n", fmt(&reference)));
        if let (Some(h), Some(t)) = (self.wins("mid", "head"), self.wins("mid", "tail")) {
            let n = self.seeds.len();
            out.push_str(&format!("mid >= head on {h}/{n} seeds, mid >= tail on {t}/{n} seeds\n"));
        }
        out
    }
}

/// Trains one connector per `(point, seed)` between the same two bases and
/// evaluates each on every task.
#[allow(clippy::too_many_arguments)]
pub fn ablate_connection_points(
    anchor: &TransformerModel,
    augment: &TransformerModel,
    qa: &QaDataset,
    sets: &EvalSets,
    vocab: &Vocab,
    points: &[Topology],
    n_cross_heads: usize,
    cfg: &TrainConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<AblationOutcome> {
    if points.is_empty() {
        return Err(Error::config(
            "topology.ablation",
            "needs at least one connection point",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::config("eval.seeds", "needs at least one seed"));
    }
    let (la, lb) = (augment.config().n_layers, anchor.config().n_layers);
    let mut reports = Vec::new();
    let mut transfer: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for point in points {
        let spec = make_topology(point, la, lb, n_cross_heads)?;
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let mut cm = ComposedModel::new(anchor.clone(), augment.clone(), spec.clone(), seed)?;
            train_connector(&mut cm, &qa.examples(), &cfg, vocab.pad())?;
            let mut r = evaluate(&cm, sets, vocab, &point.to_string(), seed)?;
            r.trainable_params = Some(cm.trainable_params());
            log(&format!(
                "ablation {point} seed {seed}: transfer {:.4}",
                r.accuracy(Task::Transfer)
            ));
            transfer
                .entry(point.to_string())
                .or_default()
                .push(r.accuracy(Task::Transfer));
            reports.push(r);
        }
    }
    Ok(AblationOutcome {
        points: points.iter().map(Topology::to_string).collect(),
        seeds: seeds.to_vec(),
        table: compare_models(&reports)?,
        transfer,
    })
}

/// Table over every seed's four reports.
pub fn comparison(outcomes: &[SeedOutcome]) -> Result<ComparisonTable> {
    let reports: Vec<EvalReport> = outcomes.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    compare_models(&reports)
}
