//! Synthetic knowledge corpora and exact-match evaluation.
//!
//! Domain facts `(entity, attribute) -> value` are stated declaratively in the
//! augment's corpus ("E7 A3 is V12 ."), while the anchor only ever sees
//! question/answer text about a disjoint set of general entities
//! ("Q G4 A1 ? A V9 ."). Bridges are trained on QA over a fraction of the
//! domain facts; the remaining domain facts probe knowledge transfer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{generate_greedy_batch, LanguageModel, TokenId};
use crate::tensor::{seeded_rng, Tensor};
use crate::train::{split_dataset, Example};

pub const PAD: &str = "<pad>";
pub const END: &str = ".";
const FIXED: [&str; 6] = [PAD, "Q", "?", "A", "is", END];

/// Whitespace tokenizer over a closed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Fixed symbols, then attributes `A*`, values `V*`, domain entities `E*`
    /// and general entities `G*`.
    pub fn for_data(cfg: &DataConfig) -> Self {
        let mut tokens: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..cfg.n_attrs).map(|i| format!("A{i}")));
        tokens.extend((0..cfg.n_values).map(|i| format!("V{i}")));
        tokens.extend((0..cfg.n_domain_entities).map(|i| format!("E{i}")));
        tokens.extend((0..cfg.n_general_entities).map(|i| format!("G{i}")));
        Vocab::new(tokens).expect("generated names are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown token `{token}`")))
    }

    pub fn pad(&self) -> TokenId {
        self.index[PAD]
    }

    pub fn end(&self) -> TokenId {
        self.index[END]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Fails when a model with `model_vocab` output rows cannot represent
    /// every token.
    pub fn check_fits(&self, model_vocab: usize) -> Result<()> {
        if model_vocab < self.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("{model_vocab} is smaller than the data vocabulary ({})", self.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_domain_entities: usize,
    pub n_attrs: usize,
    pub n_general_entities: usize,
    pub n_values: usize,
    pub connector_fraction: f64,
    /// Share of general facts whose general text is replayed in the augment
    /// corpus alongside the domain sentences.
    pub general_slice: f64,
    /// Train/validation ratio used to carve the memorized set out of the
    /// connector data; must match the trainer's.
    pub split_ratio: f64,
    pub n_general_eval: usize,
    pub n_declarative_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_domain_entities: 200,
            n_attrs: 5,
            n_general_entities: 60,
            n_values: 64,
            connector_fraction: 0.3,
            general_slice: 1.0,
            split_ratio: 0.85,
            n_general_eval: 100,
            n_declarative_eval: 200,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.connector_fraction > 0.0 && self.connector_fraction < 1.0) {
            return Err(Error::config(
                "data.connector_fraction",
                format!("{} is not in (0, 1)", self.connector_fraction),
            ));
        }
        if !(0.0..=1.0).contains(&self.general_slice) {
            return Err(Error::config("data.general_slice", "must lie in [0, 1]"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::config("data.split_ratio", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("data.n_domain_entities", self.n_domain_entities),
            ("data.n_attrs", self.n_attrs),
            ("data.n_general_entities", self.n_general_entities),
            ("data.n_values", self.n_values),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let s = (self.connector_fraction * (self.n_domain_entities * self.n_attrs) as f64).round() as usize;
        if s < 2 || s >= self.n_domain_entities * self.n_attrs {
            return Err(Error::config(
                "data.connector_fraction",
                "leaves the connector set or the transfer pool empty",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactDomain {
    Domain,
    General,
}

/// `value(e, a)` for every entity/attribute pair, drawn uniformly from the
/// value vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FactTable {
    pub domain: FactDomain,
    pub entities: Vec<String>,
    pub attributes: Vec<String>,
    pub value_names: Vec<String>,
    values: Vec<usize>,
}

impl FactTable {
    pub fn generate(domain: FactDomain, cfg: &DataConfig) -> Self {
        let (prefix, n, stream) = match domain {
            FactDomain::Domain => ("E", cfg.n_domain_entities, 1u64),
            FactDomain::General => ("G", cfg.n_general_entities, 2u64),
        };
        let mut rng = seeded_rng(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream);
        let values = (0..n * cfg.n_attrs)
            .map(|_| rng.random_range(0..cfg.n_values))
            .collect();
        FactTable {
            domain,
            entities: (0..n).map(|i| format!("{prefix}{i}")).collect(),
            attributes: (0..cfg.n_attrs).map(|i| format!("A{i}")).collect(),
            value_names: (0..cfg.n_values).map(|i| format!("V{i}")).collect(),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, e: usize, a: usize) -> &str {
        &self.value_names[self.values[e * self.attributes.len() + a]]
    }

    /// All `(entity, attribute)` index pairs in row-major order.
    pub fn keys(&self) -> Vec<(usize, usize)> {
        (0..self.entities.len())
            .flat_map(|e| (0..self.attributes.len()).map(move |a| (e, a)))
            .collect()
    }

    pub fn fact_key(&self, e: usize, a: usize) -> String {
        format!("{}:{}", self.entities[e], self.attributes[a])
    }

    pub fn qa_text(&self, e: usize, a: usize) -> (String, String) {
        (
            format!("Q {} {} ? A", self.entities[e], self.attributes[a]),
            format!("{} {END}", self.value(e, a)),
        )
    }

    pub fn declarative_text(&self, e: usize, a: usize) -> (String, String) {
        (
            format!("{} {} is", self.entities[e], self.attributes[a]),
            format!("{} {END}", self.value(e, a)),
        )
    }

    /// Bare question without the answer marker: `Q E A ?` / `V .`.
    pub fn question_text(&self, e: usize, a: usize) -> (String, String) {
        (
            format!("Q {} {} ?", self.entities[e], self.attributes[a]),
            format!("{} {END}", self.value(e, a)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Bridge/adapter training data.
    Train,
    Transfer,
    Memorized,
    General,
    Declarative,
}

impl Task {
    pub const EVAL: [Task; 4] = [Task::Transfer, Task::Memorized, Task::General, Task::Declarative];

    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Transfer => "transfer",
            Task::Memorized => "memorized",
            Task::General => "general",
            Task::Declarative => "declarative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QaItem {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub task: Task,
    /// `entity:attribute`
    pub fact: String,
}

impl QaItem {
    pub fn example(&self) -> Example {
        Example {
            tokens: self.prompt.iter().chain(&self.answer).copied().collect(),
            loss_from: self.prompt.len(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QaRecord {
    prompt: String,
    answer: String,
    task: Task,
    fact: String,
}

/// An ordered list of prompt/answer items.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QaDataset {
    pub items: Vec<QaItem>,
}

impl QaDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.items.iter().map(QaItem::example).collect()
    }

    pub fn fact_keys(&self) -> HashSet<&str> {
        self.items.iter().map(|i| i.fact.as_str()).collect()
    }

    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for item in &self.items {
            let rec = QaRecord {
                prompt: vocab.decode(&item.prompt),
                answer: vocab.decode(&item.answer),
                task: item.task,
                fact: item.fact.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: QaRecord = serde_json::from_str(line).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            items.push(QaItem {
                prompt: vocab.encode(&rec.prompt)?,
                answer: vocab.encode(&rec.answer)?,
                task: rec.task,
                fact: rec.fact,
            });
        }
        Ok(QaDataset { items })
    }
}

/// The four evaluation tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalSets {
    pub transfer: QaDataset,
    pub memorized: QaDataset,
    pub general: QaDataset,
    pub declarative: QaDataset,
}

impl EvalSets {
    pub fn get(&self, task: Task) -> Option<&QaDataset> {
        match task {
            Task::Transfer => Some(&self.transfer),
            Task::Memorized => Some(&self.memorized),
            Task::General => Some(&self.general),
            Task::Declarative => Some(&self.declarative),
            Task::Train => None,
        }
    }

    /// All items, task by task, as one JSONL document.
    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        Task::EVAL
            .iter()
            .map(|&t| self.get(t).expect("eval task").to_jsonl(vocab))
            .collect()
    }

    /// Splits a combined JSONL document by each record's task.
    pub fn from_jsonl(text: &str, vocab: &Vocab) -> Result<Self> {
        let all = QaDataset::from_jsonl(text, vocab)?;
        let mut sets = EvalSets::default();
        for item in all.items {
            match item.task {
                Task::Transfer => sets.transfer.items.push(item),
                Task::Memorized => sets.memorized.items.push(item),
                Task::General => sets.general.items.push(item),
                Task::Declarative => sets.declarative.items.push(item),
                Task::Train => return Err(Error::Data("training record in evaluation sets".into())),
            }
        }
        Ok(sets)
    }

    /// Hex SHA-256 of [`EvalSets::to_jsonl`].
    pub fn content_hash(&self, vocab: &Vocab) -> String {
        hex(&Sha256::digest(self.to_jsonl(vocab).as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Everything [`gen_corpora`] produces.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub vocab: Vocab,
    pub domain: FactTable,
    pub general: FactTable,
    /// General text both composed models start from: every general fact as
    /// a declarative sentence and as a bare question.
    pub base_corpus: Vec<Vec<TokenId>>,
    pub augment_corpus: Vec<Vec<TokenId>>,
    pub anchor_corpus: Vec<Vec<TokenId>>,
    pub connector_qa: QaDataset,
    pub eval: EvalSets,
}

impl Corpora {
    pub fn corpus_text(&self, corpus: &[Vec<TokenId>]) -> String {
        corpus.iter().map(|s| self.vocab.decode(s) + "\n").collect()
    }
}

fn item(vocab: &Vocab, (prompt, answer): (String, String), task: Task, fact: String) -> QaItem {
    QaItem {
        prompt: vocab.encode(&prompt).expect("generated text is in vocabulary"),
        answer: vocab.encode(&answer).expect("generated text is in vocabulary"),
        task,
        fact,
    }
}

/// Builds the pretraining corpora, the bridge training set and the
/// evaluation sets. Pure function of `cfg`.
///
/// - base corpus: general text (declarative + bare question per general fact)
/// - augment corpus: every domain fact as a declarative sentence, plus the
///   general text of a `general_slice` share of general facts
/// - anchor corpus: answer-marked QA over general facts, minus the general
///   evaluation facts; no domain entity ever appears
/// - connector QA: a `connector_fraction` subset S of domain facts; transfer
///   evaluation is every domain fact outside S
pub fn gen_corpora(cfg: &DataConfig) -> Result<Corpora> {
    cfg.validate()?;
    let vocab = Vocab::for_data(cfg);
    let domain = FactTable::generate(FactDomain::Domain, cfg);
    let general = FactTable::generate(FactDomain::General, cfg);
    let mut rng = seeded_rng(cfg.seed ^ 0x5EED_DA7A);

    let seq = |t: (String, String)| vocab.encode(&format!("{} {}", t.0, t.1)).expect("in vocabulary");
    let general_text =
        |&(e, a): &(usize, usize)| [seq(general.declarative_text(e, a)), seq(general.question_text(e, a))];

    let mut base_corpus: Vec<Vec<TokenId>> = general.keys().iter().flat_map(general_text).collect();
    base_corpus.shuffle(&mut rng);

    let mut general_keys = general.keys();
    general_keys.shuffle(&mut rng);
    let n_slice = (cfg.general_slice * general_keys.len() as f64).round() as usize;
    let mut augment_corpus: Vec<Vec<TokenId>> = domain
        .keys()
        .into_iter()
        .map(|(e, a)| seq(domain.declarative_text(e, a)))
        .chain(general_keys[..n_slice].iter().flat_map(general_text))
        .collect();
    augment_corpus.shuffle(&mut rng);

    let mut general_keys = general.keys();
    general_keys.shuffle(&mut rng);
    let n_general_eval = cfg.n_general_eval.min(general.len() - 1);
    let (general_held, general_seen) = general_keys.split_at(n_general_eval);
    let anchor_corpus: Vec<Vec<TokenId>> = general_seen.iter().map(|&(e, a)| seq(general.qa_text(e, a))).collect();

    let mut domain_keys = domain.keys();
    domain_keys.shuffle(&mut rng);
    let n_s = (cfg.connector_fraction * domain_keys.len() as f64).round() as usize;
    let (s, rest) = domain_keys.split_at(n_s);
    let qa = |keys: &[(usize, usize)], task| QaDataset {
        items: keys
            .iter()
            .map(|&(e, a)| item(&vocab, domain.qa_text(e, a), task, domain.fact_key(e, a)))
            .collect(),
    };
    let connector_qa = qa(s, Task::Train);
    let transfer = qa(rest, Task::Transfer);
    let (seen, _) = split_dataset(s, cfg.split_ratio, cfg.seed)?;
    let memorized = qa(&seen, Task::Memorized);

    let general_eval = QaDataset {
        items: general_held
            .iter()
            .map(|&(e, a)| item(&vocab, general.qa_text(e, a), Task::General, general.fact_key(e, a)))
            .collect(),
    };
    let declarative = QaDataset {
        items: domain
            .keys()
            .choose_multiple(&mut rng, cfg.n_declarative_eval.min(domain.len()))
            .map(|&(e, a)| {
                item(
                    &vocab,
                    domain.declarative_text(e, a),
                    Task::Declarative,
                    domain.fact_key(e, a),
                )
            })
            .collect(),
    };

    Ok(Corpora {
        vocab,
        domain,
        general,
        base_corpus,
        augment_corpus,
        anchor_corpus,
        connector_qa,
        eval: EvalSets {
            transfer,
            memorized,
            general: general_eval,
            declarative,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Exact-match accuracies of one model on the evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub eval_hash: String,
    pub trainable_params: Option<usize>,
    pub tasks: BTreeMap<Task, TaskScore>,
}

impl EvalReport {
    pub fn accuracy(&self, task: Task) -> f64 {
        self.tasks.get(&task).map_or(0.0, |s| s.accuracy)
    }

    pub fn mean_accuracy(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.values().map(|s| s.accuracy).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Prompts decoded together in one generation batch.
pub const EVAL_BATCH: usize = 64;

/// Greedy-decodes `answer.len()` tokens after each prompt and scores an item
/// correct when the first generated token equals the expected value token.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    sets: &EvalSets,
    vocab: &Vocab,
    label: &str,
    seed: u64,
) -> Result<EvalReport> {
    let mut tasks = BTreeMap::new();
    for task in Task::EVAL {
        let set = sets.get(task).expect("eval task");
        let mut correct = 0;
        let mut groups: BTreeMap<(usize, usize), Vec<&QaItem>> = BTreeMap::new();
        for it in &set.items {
            groups.entry((it.prompt.len(), it.answer.len())).or_default().push(it);
        }
        for ((plen, alen), items) in groups {
            for chunk in items.chunks(EVAL_BATCH) {
                let prompts: Vec<Vec<TokenId>> = chunk.iter().map(|i| i.prompt.clone()).collect();
                let outs = generate_greedy_batch(model, &prompts, alen, None)?;
                correct += chunk
                    .iter()
                    .zip(&outs)
                    .filter(|(it, out)| out.get(plen) == it.answer.first())
                    .count();
            }
        }
        let total = set.len();
        tasks.insert(
            task,
            TaskScore {
                correct,
                total,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            },
        );
    }
    Ok(EvalReport {
        model: label.to_string(),
        seed,
        eval_hash: sets.content_hash(vocab),
        trainable_params: None,
        tasks,
    })
}

/// A model whose next token is the recorded answer continuation of any known
/// prompt, and the end token otherwise.
pub struct OracleModel {
    vocab_size: usize,
    context_len: usize,
    answers: HashMap<Vec<TokenId>, Vec<TokenId>>,
    fallback: TokenId,
}

impl OracleModel {
    pub fn new(sets: &EvalSets, vocab: &Vocab, context_len: usize) -> Self {
        let answers = Task::EVAL
            .iter()
            .flat_map(|&t| sets.get(t).expect("eval task").items.iter())
            .map(|i| (i.prompt.clone(), i.answer.clone()))
            .collect();
        OracleModel {
            vocab_size: vocab.len(),
            context_len,
            answers,
            fallback: vocab.end(),
        }
    }

    fn next(&self, seq: &[TokenId]) -> TokenId {
        (1..=seq.len())
            .rev()
            .find_map(|p| {
                let ans = self.answers.get(&seq[..p])?;
                ans.get(seq.len() - p).copied()
            })
            .unwrap_or(self.fallback)
    }
}

/// A model that answers with a value token drawn uniformly at random
/// (deterministically per seed and context).
pub struct RandomGuessModel {
    vocab_size: usize,
    context_len: usize,
    values: Vec<TokenId>,
    seed: u64,
}

impl RandomGuessModel {
    pub fn new(vocab: &Vocab, context_len: usize, seed: u64) -> Self {
        let values = vocab
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| t.starts_with('V') && t[1..].parse::<usize>().is_ok())
            .map(|(i, _)| i)
            .collect();
        RandomGuessModel {
            vocab_size: vocab.len(),
            context_len,
            values,
            seed,
        }
    }

    fn next(&self, seq: &[TokenId]) -> TokenId {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for &t in seq {
            h.update((t as u64).to_le_bytes());
        }
        let digest = h.finalize();
        let x = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        *self.values.choose(&mut seeded_rng(x)).unwrap_or(&0)
    }
}

fn one_hot_logits(
    tokens: &[TokenId],
    batch: usize,
    seq: usize,
    vocab: usize,
    next: impl Fn(&[TokenId]) -> TokenId,
) -> Result<Tensor> {
    if tokens.len() != batch * seq {
        return Err(Error::invalid("batch_logits", "token count does not match batch x seq"));
    }
    let mut data = vec![0.0; batch * seq * vocab];
    for b in 0..batch {
        let row = &tokens[b * seq..(b + 1) * seq];
        for t in 0..seq {
            data[(b * seq + t) * vocab + next(&row[..=t])] = 1.0;
        }
    }
    Tensor::new(vec![batch, seq, vocab], data)
}

impl LanguageModel for OracleModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        one_hot_logits(tokens, batch, seq, self.vocab_size, |s| self.next(s))
    }
}

impl LanguageModel for RandomGuessModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn batch_logits(&self, tokens: &[TokenId], batch: usize, seq: usize) -> Result<Tensor> {
        one_hot_logits(tokens, batch, seq, self.vocab_size, |s| self.next(s))
    }
}

/// One aggregated model row: mean accuracies across the seeds it was run
/// with, plus the per-seed reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub trainable_params: Option<usize>,
    pub seeds: Vec<u64>,
    pub accuracy: BTreeMap<Task, f64>,
    pub mean: f64,
    pub per_seed: Vec<EvalReport>,
}

/// `row(a) - row(b)` per task, for every ordered row pair `a < b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub a: String,
    pub b: String,
    pub delta: BTreeMap<Task, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub eval_hashes: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub deltas: Vec<Delta>,
}

/// Groups reports by model label (first-appearance order) and averages each
/// group over its seeds. Reports of the same seed must share an eval-set hash.
pub fn compare_models(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Data("no reports to compare".into()));
    }
    let mut seed_hash: BTreeMap<u64, &str> = BTreeMap::new();
    for r in reports {
        let h = seed_hash.entry(r.seed).or_insert(&r.eval_hash);
        if *h != r.eval_hash {
            return Err(Error::HashMismatch {
                expected: h.to_string(),
                found: r.eval_hash.clone(),
            });
        }
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&EvalReport>> = HashMap::new();
    for r in reports {
        if !groups.contains_key(r.model.as_str()) {
            order.push(&r.model);
        }
        groups.entry(&r.model).or_default().push(r);
    }
    let rows: Vec<ComparisonRow> = order
        .iter()
        .map(|m| {
            let g = &groups[m];
            let mut seeds: Vec<u64> = g.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            let accuracy: BTreeMap<Task, f64> = Task::EVAL
                .iter()
                .map(|&t| (t, g.iter().map(|r| r.accuracy(t)).sum::<f64>() / g.len() as f64))
                .collect();
            let mean = accuracy.values().sum::<f64>() / accuracy.len() as f64;
            ComparisonRow {
                model: m.to_string(),
                trainable_params: g[0].trainable_params,
                seeds,
                accuracy,
                mean,
                per_seed: g.iter().map(|r| (*r).clone()).collect(),
            }
        })
        .collect();
    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            deltas.push(Delta {
                a: rows[i].model.clone(),
                b: rows[j].model.clone(),
                delta: Task::EVAL
                    .iter()
                    .map(|&t| (t, rows[i].accuracy[&t] - rows[j].accuracy[&t]))
                    .collect(),
                mean: rows[i].mean - rows[j].mean,
            });
        }
    }
    Ok(ComparisonTable {
        eval_hashes: seed_hash.values().map(|h| h.to_string()).collect(),
        rows,
        deltas,
    })
}

impl ComparisonTable {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned plain-text rendering: mean rows, per-seed rows, then deltas.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            let _ = write!(out, "{first:<24} {:>8}", "params");
            for t in Task::EVAL {
                let _ = write!(out, " {:>11}", t.name());
            }
            let _ = writeln!(out, " {:>8}", "mean");
        };
        header(&mut out, "model");
        for r in &self.rows {
            let params = r.trainable_params.map_or("-".to_string(), |p| p.to_string());
            let _ = write!(out, "{:<24} {params:>8}", r.model);
            for t in Task::EVAL {
                let _ = write!(out, " {:>11.6}", r.accuracy[&t]);
            }
            let _ = writeln!(out, " {:>8.6}", r.mean);
        }
        out.push('\n');
        header(&mut out, "model @ seed");
        for r in &self.rows {
            for rep in &r.per_seed {
                let params = rep.trainable_params.map_or("-".to_string(), |p| p.to_string());
                let _ = write!(out, "{:<24} {params:>8}", format!("{} @ {}", rep.model, rep.seed));
                for t in Task::EVAL {
                    let _ = write!(out, " {:>11.6}", rep.accuracy(t));
                }
                let _ = writeln!(out, " {:>8.6}", rep.mean_accuracy());
            }
        }
        if !self.deltas.is_empty() {
            out.push('\n');
            header(&mut out, "delta");
            for d in &self.deltas {
                let _ = write!(out, "{:<24} {:>8}", format!("{} - {}", d.a, d.b), "");
                for t in Task::EVAL {
                    let _ = write!(out, " {:>+11.6}", d.delta[&t]);
                }
                let _ = writeln!(out, " {:>+8.6}", d.mean);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::for_data(&DataConfig::default());
        assert_eq!(v.len(), 6 + 5 + 64 + 200 + 60);
        let ids = v.encode("Q E7 A3 ? A V12 .").unwrap();
        assert_eq!(v.decode(&ids), "Q E7 A3 ? A V12 .");
        assert!(v.encode("Q E999").is_err());
        assert!(v.check_fits(v.len()).is_ok());
        assert!(v.check_fits(v.len() - 1).is_err());
    }

    #[test]
    fn config_rejects_bad_fraction() {
        for f in [0.0, 1.0, -0.1] {
            let cfg = DataConfig {
                connector_fraction: f,
                ..DataConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }
}
