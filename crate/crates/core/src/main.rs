//! Command-line driver for the desk experiment.
//!
//! Every command works inside a run directory (`--out`, or the `CALM_OUT`
//! environment variable, default `runs/desk`). Exit codes: 1 configuration or
//! input error, 2 checkpoint / CRC / eval-hash error, 3 failed check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use calm::calm::{connector_param_count, ComposedModel, Topology};
use calm::checkpoint::{
    composed_from_checkpoint, load_checkpoint, lora_checkpoint, lora_from_checkpoint, save_checkpoint, write_atomic,
};
use calm::lm::TransformerModel;
use calm::pipeline::{
    ablate_connection_points, check_eval_hash, comparison, compose_and_train, load_base, lora_for_budget,
    pretrain_role, run_seed, save_base, verify_base_ref, Role, RunConfig, RunDir, MODELS,
};
use calm::synth::{compare_models, evaluate, gen_corpora, EvalReport, EvalSets, Task, Vocab};
use calm::train::{
    connector_grad_check, train_lora, CONNECTOR_GRAD_EPSILON, CONNECTOR_GRAD_FLOOR, CONNECTOR_GRAD_TOLERANCE,
};
use calm::Error;

const GRAD_EXAMPLES: usize = 4;

#[derive(Parser)]
#[command(
    name = "calm",
    version,
    about = "Compose frozen language models through trainable cross-attention"
)]
struct Cli {
    /// Run directory holding config, data, checkpoints and reports.
    #[arg(long, env = "CALM_OUT", default_value = "runs/desk", global = true)]
    out: PathBuf,
    /// JSON run configuration; defaults to the run directory's config.json,
    /// then to the shipped defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Connection layout, e.g. `mid` or `pairs:(8,6)`.
    #[arg(long, global = true)]
    topology: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora, connector QA and evaluation sets.
    GenData,
    /// Pretrain a base, anchor or augment model.
    Pretrain {
        #[arg(long)]
        role: Role,
        /// Base checkpoint to continue from (anchor and augment only).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train a connector between the frozen anchor and augment models.
    ComposeTrain,
    /// Train the parameter-matched LoRA baseline on the anchor.
    LoraTrain,
    /// Evaluate one model (or all four) on the evaluation sets.
    Eval {
        #[arg(long, default_value = "all")]
        model: String,
    },
    /// Compare single-connection layouts across the configured seeds.
    Ablate,
    /// Finite-difference check of the connector gradients.
    Gradcheck,
    /// Merge evaluation reports into the comparison table.
    Report {
        /// Report files; defaults to the run directory's four reports.
        files: Vec<PathBuf>,
    },
    /// The full pipeline for every configured seed, the ablation and the report.
    Run,
}

/// A failed run, carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint { .. } | Error::HashMismatch { .. } | Error::FrozenViolation(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn resolve_config(cli: &Cli, dir: &RunDir) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if dir.config().exists() => RunConfig::load(&dir.config())?,
        None => RunConfig::default(),
    };
    if let Some(t) = &cli.topology {
        t.parse::<Topology>()?;
        cfg.topology.connection = t.clone();
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Vocabulary, eval sets and their hash for the configured data.
fn load_eval(cfg: &RunConfig, dir: &RunDir) -> CliResult<(Vocab, EvalSets, String)> {
    let vocab = Vocab::for_data(&cfg.data);
    let sets = dir.read_eval_sets(&vocab)?;
    let hash = sets.content_hash(&vocab);
    Ok((vocab, sets, hash))
}

fn run(cli: Cli) -> CliResult<()> {
    let dir = RunDir::new(&cli.out);
    let cfg = resolve_config(&cli, &dir)?;
    match &cli.command {
        Command::GenData => {
            let data = gen_corpora(&cfg.data)?;
            write_atomic(&dir.config(), cfg.to_json().as_bytes())?;
            dir.write_data(&data)?;
            println!(
                "wrote data for seed {} to {} (eval hash {})",
                cfg.seed(),
                dir.root.display(),
                data.eval.content_hash(&data.vocab)
            );
        }
        Command::Pretrain { role, init } => pretrain_cmd(&cfg, &dir, *role, init.as_deref())?,
        Command::ComposeTrain => {
            let (vocab, _, hash) = load_eval(&cfg, &dir)?;
            let (_, anchor_ref) = load_base(&dir.model("anchor"), &hash)?;
            let (_, augment_ref) = load_base(&dir.model("augment"), &hash)?;
            let qa = dir.read_connector_qa(&vocab)?;
            let spec = cfg.connection(&cfg.topology.connection.parse()?)?;
            let (_, report, frozen) = compose_and_train(
                &anchor_ref,
                &augment_ref,
                spec,
                &qa,
                &cfg.train.connector,
                &hash,
                vocab.pad(),
                Some(&dir.model("connector")),
            )?;
            dir.write_json("train_connector", &report)?;
            println!(
                "connector: {} trainable parameters, best epoch {}, anchor CRC {:08x} -> {:08x}, augment CRC {:08x} -> {:08x}",
                report.trainable_params,
                report.best_epoch,
                frozen.anchor_crc_before,
                frozen.anchor_crc_after,
                frozen.augment_crc_before,
                frozen.augment_crc_after
            );
        }
        Command::LoraTrain => {
            let (vocab, _, hash) = load_eval(&cfg, &dir)?;
            let (anchor, anchor_ref) = load_base(&dir.model("anchor"), &hash)?;
            let spec = cfg.connection(&cfg.topology.connection.parse()?)?;
            let w = anchor.config().width;
            let budget = connector_param_count(&spec, w, w);
            let (mut lora, choice) = lora_for_budget(anchor, budget, cfg.seed())?;
            let qa = dir.read_connector_qa(&vocab)?;
            let report = train_lora(&mut lora, &qa.examples(), &cfg.train.lora, vocab.pad())?;
            let mut ckpt = lora_checkpoint(&lora, anchor_ref);
            ckpt.header.eval_hash = Some(hash);
            save_checkpoint(&ckpt, &dir.model("lora"))?;
            dir.write_json("train_lora", &report)?;
            println!(
                "lora: rank {}, {} trainable parameters (connector {budget}), best epoch {}",
                choice.rank, report.trainable_params, report.best_epoch
            );
        }
        Command::Eval { model } => {
            let models: Vec<&str> = if model == "all" {
                MODELS.to_vec()
            } else {
                vec![model.as_str()]
            };
            for m in models {
                let r = eval_model(&cfg, &dir, m)?;
                dir.write_json(&format!("eval_{m}"), &r)?;
                let scores: Vec<String> = Task::EVAL
                    .iter()
                    .map(|&t| format!("{} {:.4}", t.name(), r.accuracy(t)))
                    .collect();
                println!("{m}: {}", scores.join(", "));
            }
        }
        Command::Ablate => {
            let (vocab, sets, hash) = load_eval(&cfg, &dir)?;
            let (anchor, _) = load_base(&dir.model("anchor"), &hash)?;
            let (augment, _) = load_base(&dir.model("augment"), &hash)?;
            let qa = dir.read_connector_qa(&vocab)?;
            let outcome = ablate_connection_points(
                &anchor,
                &augment,
                &qa,
                &sets,
                &vocab,
                &cfg.ablation_points()?,
                cfg.topology.n_cross_heads,
                &cfg.train.connector,
                &cfg.eval.seeds,
                &mut |m| log(m),
            )?;
            let text = outcome.render();
            dir.write_json("ablation", &outcome)?;
            write_atomic(&dir.text_report("ablation"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Gradcheck => {
            let (vocab, _, hash) = load_eval(&cfg, &dir)?;
            let cm = load_composed(&cfg, &dir, &hash)?;
            let qa = dir.read_connector_qa(&vocab)?;
            let examples: Vec<_> = qa.examples().into_iter().take(GRAD_EXAMPLES).collect();
            let r = connector_grad_check(&cm, &examples, vocab.pad(), CONNECTOR_GRAD_EPSILON)?;
            let err = r.max_rel_error_floored;
            println!(
                "max relative error {err:.3e} (tolerance {CONNECTOR_GRAD_TOLERANCE:.0e}, denominator floor {CONNECTOR_GRAD_FLOOR:.0e}); \
                 unfloored {:.3e}, max absolute error {:.3e}, {} coordinates",
                r.max_rel_error, r.max_abs_error, r.coordinates
            );
            // written so that a NaN error also fails
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(err <= CONNECTOR_GRAD_TOLERANCE) {
                return Err(Failure {
                    code: 3,
                    msg: format!("gradient check failed: {err:.3e} > {CONNECTOR_GRAD_TOLERANCE:.0e}"),
                });
            }
        }
        Command::Report { files } => {
            let files: Vec<PathBuf> = if files.is_empty() {
                MODELS.iter().map(|m| dir.report(&format!("eval_{m}"))).collect()
            } else {
                files.clone()
            };
            let reports = files
                .iter()
                .map(|p| read_report(p))
                .collect::<CliResult<Vec<EvalReport>>>()?;
            let table = compare_models(&reports)?;
            let text = table.render();
            dir.write_json("comparison", &table)?;
            write_atomic(&dir.text_report("comparison"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Run => run_all(&cfg, &dir)?,
    }
    Ok(())
}

fn pretrain_cmd(cfg: &RunConfig, dir: &RunDir, role: Role, init: Option<&Path>) -> CliResult<()> {
    let (vocab, _, hash) = load_eval(cfg, dir)?;
    let data = calm::synth::Corpora {
        base_corpus: dir.read_corpus(Role::Base, &vocab)?,
        anchor_corpus: dir.read_corpus(Role::Anchor, &vocab)?,
        augment_corpus: dir.read_corpus(Role::Augment, &vocab)?,
        ..gen_corpora(&cfg.data)?
    };
    let base: Option<TransformerModel> = match role {
        Role::Base => None,
        _ => {
            let path = init.map(Path::to_path_buf).unwrap_or_else(|| dir.model("base"));
            Some(load_base(&path, &hash)?.0)
        }
    };
    let (model, report) = pretrain_role(cfg, &data, role, base.as_ref())?;
    let r = save_base(&model, &hash, &dir.model(role.name()))?;
    dir.write_json(&format!("pretrain_{}", role.name()), &report)?;
    println!(
        "{}: {} parameters, final loss {:.4}, CRC {:08x}",
        role.name(),
        model.count_params(),
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        r.crc32
    );
    Ok(())
}

/// The trained connector when its layout is the configured one, else a
/// freshly initialized connector (whose output projection is zero).
fn load_composed(cfg: &RunConfig, dir: &RunDir, hash: &str) -> CliResult<ComposedModel> {
    let (anchor, _) = load_base(&dir.model("anchor"), hash)?;
    let (augment, _) = load_base(&dir.model("augment"), hash)?;
    let spec = cfg.connection(&cfg.topology.connection.parse()?)?;
    let path = dir.model("connector");
    if path.exists() {
        let ckpt = load_checkpoint(&path)?;
        if ckpt.header.connection.as_ref() == Some(&spec) {
            check_eval_hash(&ckpt, hash)?;
            for r in [&ckpt.header.anchor, &ckpt.header.augment].into_iter().flatten() {
                verify_base_ref(r)?;
            }
            return Ok(composed_from_checkpoint(&ckpt, &path, anchor, augment)?);
        }
    }
    Ok(ComposedModel::new(anchor, augment, spec, cfg.seed())?)
}

fn eval_model(cfg: &RunConfig, dir: &RunDir, model: &str) -> CliResult<EvalReport> {
    let (vocab, sets, hash) = load_eval(cfg, dir)?;
    let seed = cfg.seed();
    Ok(match model {
        "anchor" | "augment" | "base" => {
            let (m, _) = load_base(&dir.model(model), &hash)?;
            evaluate(&m, &sets, &vocab, model, seed)?
        }
        "lora" => {
            let path = dir.model("lora");
            let ckpt = load_checkpoint(&path)?;
            check_eval_hash(&ckpt, &hash)?;
            let anchor_ref = ckpt.header.anchor.clone().ok_or_else(|| Error::Checkpoint {
                path: path.clone(),
                msg: "missing anchor reference".into(),
            })?;
            verify_base_ref(&anchor_ref)?;
            let (anchor, _) = load_base(&anchor_ref.path, &hash)?;
            let lora = lora_from_checkpoint(&ckpt, &path, anchor)?;
            let mut r = evaluate(&lora, &sets, &vocab, "lora", seed)?;
            r.trainable_params = Some(lora.trainable_params());
            r
        }
        "calm" => {
            let path = dir.model("connector");
            let ckpt = load_checkpoint(&path)?;
            check_eval_hash(&ckpt, &hash)?;
            let (Some(a), Some(b)) = (ckpt.header.anchor.clone(), ckpt.header.augment.clone()) else {
                return Err(Error::Checkpoint {
                    path,
                    msg: "missing base references".into(),
                }
                .into());
            };
            verify_base_ref(&a)?;
            verify_base_ref(&b)?;
            let (anchor, _) = load_base(&a.path, &hash)?;
            let (augment, _) = load_base(&b.path, &hash)?;
            let cm = composed_from_checkpoint(&ckpt, &path, anchor, augment)?;
            let mut r = evaluate(&cm, &sets, &vocab, "calm", seed)?;
            r.trainable_params = Some(cm.trainable_params());
            r
        }
        other => {
            return Err(Error::Config {
                field: "model".into(),
                msg: format!("`{other}` is not one of anchor, augment, lora, calm, all"),
            }
            .into())
        }
    })
}

fn read_report(path: &Path) -> CliResult<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

/// Every seed into `<out>/seed-<n>`, the ablation on the first seed's bases,
/// and the merged comparison at the top level.
fn run_all(cfg: &RunConfig, dir: &RunDir) -> CliResult<()> {
    let mut outcomes = Vec::new();
    for &seed in &cfg.eval.seeds {
        let seed_dir = RunDir::new(dir.root.join(format!("seed-{seed}")));
        outcomes.push(run_seed(cfg, seed, &seed_dir, &mut |m| log(m))?);
    }
    let table = comparison(&outcomes)?;
    let text = table.render();
    dir.write_json("comparison", &table)?;
    write_atomic(&dir.text_report("comparison"), text.as_bytes())?;
    print!("{text}");

    let first = cfg.with_seed(cfg.eval.seeds[0]);
    let seed_dir = RunDir::new(dir.root.join(format!("seed-{}", first.seed())));
    let (vocab, sets, hash) = load_eval(&first, &seed_dir)?;
    let (anchor, _) = load_base(&seed_dir.model("anchor"), &hash)?;
    let (augment, _) = load_base(&seed_dir.model("augment"), &hash)?;
    let ablation = ablate_connection_points(
        &anchor,
        &augment,
        &seed_dir.read_connector_qa(&vocab)?,
        &sets,
        &vocab,
        &first.ablation_points()?,
        first.topology.n_cross_heads,
        &first.train.connector,
        &first.eval.seeds,
        &mut |m| log(m),
    )?;
    let text = ablation.render();
    dir.write_json("ablation", &ablation)?;
    write_atomic(&dir.text_report("ablation"), text.as_bytes())?;
    print!("\n{text}");
    Ok(())
}
