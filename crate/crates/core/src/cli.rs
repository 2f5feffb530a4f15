//! Command-line front end.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, AblationSetup};
use crate::chat::{ChatState, ChatTurn};
use crate::checkpoint;
use crate::data::{
    generate_synthetic_corpus, load_corpus, write_corpus, Split, SyntheticConfig, Vocabulary,
};
use crate::eval::{
    decode_corpus, evaluation_subset, history_token_recall, score_predictions, Beam,
};
use crate::fixtures::tiny_model_gradcheck;
use crate::gradcheck::GradcheckOptions;
use crate::model::Model;
use crate::parallel::{threads_from_env, Workers};
use crate::train::{build_model, preset, train, TrainConfig};
use crate::variant::{VariantRegistry, VARIANT_ORDER};

#[derive(Debug, Parser)]
#[command(
    name = "haht",
    version,
    about = "Multi-session dialogue model with hierarchical history memory"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-session corpus as JSONL.
    GenData(GenDataArgs),
    /// Train one variant and write a checkpoint.
    Train(TrainArgs),
    /// Greedy-decode a corpus and write a metrics report.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every variant over several seeds.
    Ablate(AblateArgs),
    /// Interactive multi-session chat.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n", default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0.8)]
    copy_fraction: f64,
    #[arg(long, default_value_t = 4)]
    max_sessions: usize,
    #[arg(long, default_value_t = 40)]
    value_pool: usize,
    #[arg(long, default_value_t = 2)]
    facts_per_persona: usize,
}

#[derive(Debug, Args, Clone)]
struct TrainingOverrides {
    /// toy or large.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
}

impl TrainingOverrides {
    fn configs(&self) -> anyhow::Result<(crate::config::ModelConfig, TrainConfig)> {
        let (mut m, mut t) = preset(&self.preset, 0)?;
        if let Some(v) = self.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.patience {
            t.patience = v;
        }
        if let Some(v) = self.dropout {
            t.dropout = v;
        }
        if let Some(v) = self.min_count {
            t.min_count = v;
        }
        t.max_grad_norm = self.max_grad_norm.or(t.max_grad_norm);
        m.dropout = t.dropout;
        t.validate()?;
        Ok((m, t))
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch log as JSONL.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the vocabulary as JSON.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainingOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Only the first turn of each session with history.
    #[arg(long)]
    opening_only: bool,
    /// Vocabulary file that must match the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    /// Per-example diagnostics as JSONL.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of variants.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[command(flatten)]
    overrides: TrainingOverrides,
}

#[derive(Debug, Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Print per-step switch weights and copy flags.
    #[arg(long)]
    verbose: bool,
    /// Append each turn as a JSON line.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    max_len: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage error, 2 runtime error.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    let workers = Workers::new(threads_from_env());
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, &workers),
        Command::Eval(a) => eval_cmd(a, &workers),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, &workers),
        Command::Chat(a) => chat_cmd(a),
    }
}

fn load(path: &Path, split: Split) -> anyhow::Result<crate::data::Corpus> {
    load_corpus(path, split).with_context(|| format!("reading {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        examples: a.count,
        value_pool: a.value_pool,
        facts_per_persona: a.facts_per_persona,
        copy_fraction: a.copy_fraction,
        ..SyntheticConfig::default()
    }
    .with_max_sessions(a.max_sessions);
    let corpus = generate_synthetic_corpus(&cfg, a.seed)?;
    write_corpus(&corpus, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} examples to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, workers: &Workers) -> anyhow::Result<()> {
    let registry = VariantRegistry::default();
    let variant = registry.get(&a.variant)?;
    let (mut mcfg, mut tcfg) = a.overrides.configs()?;
    mcfg.seed = a.seed;
    tcfg.seed = a.seed;
    let train_set = load(&a.train, Split::Train)?;
    let valid = load(&a.valid, Split::Valid)?;
    let model = build_model(&train_set, mcfg, variant, tcfg.min_count)?;
    eprintln!(
        "variant {}: {} parameters, vocabulary {}, {} workers",
        model.variant.name(),
        model.params.parameter_count(),
        model.vocab.len(),
        workers.threads()
    );
    let (model, log) = train(model, &train_set, &valid, &tcfg, workers, |e| {
        eprintln!(
            "epoch {:>3}  train {:.4}  valid {:.4}  {:.1}s",
            e.epoch, e.train_loss, e.valid_loss, e.wall_time_secs
        );
    })?;
    checkpoint::save(&model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.log {
        std::fs::write(path, log.to_jsonl())?;
    }
    if let Some(path) = &a.vocab_out {
        model.vocab.save(path)?;
    }
    eprintln!(
        "best epoch {} ({:?}); checkpoint {}",
        log.best_epoch,
        log.stop_reason,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn eval_cmd(a: EvalArgs, workers: &Workers) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    if let Some(path) = &a.vocab {
        let vocab =
            Vocabulary::load(path).with_context(|| format!("reading {}", path.display()))?;
        checkpoint::check_vocabulary(&model, &vocab)?;
    }
    let corpus = load(&a.test, Split::Test)?;
    let subset = evaluation_subset(&corpus, a.opening_only);
    if subset.is_empty() {
        bail!("no examples to evaluate");
    }
    let predictions = match a.beam {
        Some(width) => decode_corpus(
            &Beam {
                model: &model,
                width,
            },
            &subset,
            a.max_len,
            workers,
        )?,
        None => decode_corpus(&model, &subset, a.max_len, workers)?,
    };
    let report = score_predictions(&subset, &predictions, a.opening_only)?;
    std::fs::write(&a.report, report.to_json() + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    if let Some(path) = &a.dump {
        let mut out = BufWriter::new(File::create(path)?);
        for (ex, pred) in subset.examples.iter().zip(&predictions) {
            let prepared = model.prepare(ex)?;
            let record = serde_json::json!({
                "session": ex.session_number(),
                "reference": ex.response.tokens,
                "prediction": pred,
                "encoder": model.encoder_dump(&prepared)?,
                "steps": model.greedy_decode(&prepared, a.max_len)?.steps,
            });
            writeln!(out, "{record}")?;
        }
    }
    let all = report.buckets["all"];
    eprintln!(
        "{} examples: BLEU-2 {:.4}  BLEU-3 {:.4}  ROUGE-L {:.4}",
        all.count, all.bleu2, all.bleu3, all.rouge_l
    );
    if let Some(r) = history_token_recall(&subset, &predictions) {
        eprintln!("history-token recall {r:.4}");
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        max_coords: None,
        seed: a.seed,
    };
    let report = tiny_model_gradcheck(a.seed, &opts)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error,
            a.tolerance
        );
    }
    eprintln!(
        "gradient check passed: max relative error {:.3e}",
        report.max_rel_error
    );
    Ok(())
}

fn ablate_cmd(a: AblateArgs, workers: &Workers) -> anyhow::Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let (mcfg, tcfg) = a.overrides.configs()?;
    let train_set = load(&a.train, Split::Train)?;
    let valid = load(&a.valid, Split::Valid)?;
    let test = load(&a.test, Split::Test)?;
    let setup = AblationSetup {
        train: &train_set,
        valid: &valid,
        test: &test,
        model: mcfg,
        training: tcfg,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        variants: a
            .variants
            .unwrap_or_else(|| VARIANT_ORDER.iter().map(|s| s.to_string()).collect()),
        max_len: a.max_len,
    };
    let report = run_ablation(
        &setup,
        &VariantRegistry::default(),
        workers,
        |name, seed, e| {
            eprintln!(
                "[{name} seed {seed}] epoch {:>3}  valid {:.4}",
                e.epoch, e.valid_loss
            );
        },
    )?;
    std::fs::write(&a.report, report.to_json() + "\n")?;
    print!("{}", report.table());
    Ok(())
}

fn chat_cmd(a: ChatArgs) -> anyhow::Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let log = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    run_repl(
        &model,
        stdin.lock(),
        stdout.lock(),
        a.verbose,
        a.max_len,
        log,
    )
}

fn print_turn(out: &mut impl Write, turn: &ChatTurn, verbose: bool) -> std::io::Result<()> {
    writeln!(out, "assistant: {}", turn.response)?;
    if verbose {
        if turn.switch_bypassed {
            writeln!(
                out,
                "  [switch bypassed: {} history sessions]",
                turn.sessions
            )?;
        }
        for s in &turn.steps {
            match (s.alpha_vg, s.alpha_vh) {
                (Some(g), Some(h)) => writeln!(
                    out,
                    "  {:<12} a_vg={:.3} a_vh={:.3}{}",
                    s.token_text,
                    g,
                    h,
                    if s.copied { " copied" } else { "" }
                )?,
                _ => writeln!(out, "  {:<12} generic", s.token_text)?,
            }
        }
    }
    Ok(())
}

/// The chat loop over arbitrary input and output streams.
pub fn run_repl(
    model: &Model,
    input: impl BufRead,
    mut out: impl Write,
    verbose: bool,
    max_len: usize,
    mut log: Option<impl Write>,
) -> anyhow::Result<()> {
    let mut chat = ChatState::new(model, max_len);
    writeln!(
        out,
        "commands: /end closes the session, /reset forgets everything, /history, /quit"
    )?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/end" => match chat.finalize_session() {
                Ok(()) => writeln!(out, "[session {} stored]", chat.history().len())?,
                Err(e) => writeln!(out, "error: {e}")?,
            },
            "/reset" => {
                chat.reset();
                writeln!(out, "[history cleared]")?;
            }
            "/history" => {
                for (i, s) in chat.history().iter().enumerate() {
                    writeln!(out, "session {}:", i + 1)?;
                    for u in &s.utterances {
                        writeln!(out, "  {}: {}", u.role.as_str(), u.text)?;
                    }
                }
                writeln!(out, "current session: {} utterances", chat.current().len())?;
            }
            _ if text.starts_with('/') => writeln!(out, "unknown command {text}")?,
            _ => {
                let turn = chat.chat_step(text)?;
                print_turn(&mut out, &turn, verbose)?;
                if let Some(log) = log.as_mut() {
                    writeln!(log, "{}", serde_json::to_string(&turn)?)?;
                }
            }
        }
        out.flush()?;
    }
    if let Some(log) = log.as_mut() {
        log.flush()?;
    }
    Ok(())
}
