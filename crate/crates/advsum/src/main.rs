//! `advsum`: the benchmark pipeline as a single command.
//!
//! Subcommands cover the stages end to end: `prepare-data`,
//! `train-surrogate`, `gen-attacks`, `evaluate`, `meta-prompt`, and
//! `report`. Every run assembles one effective configuration (defaults, then
//! `--config FILE`, then `--set KEY=VALUE` overrides, then shorthand flags),
//! writes it as a `.config.toml` sidecar next to each output artifact, and
//! prints one machine-parseable `advsum-summary …` line on success.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags, unknown config
//! keys), 2 on runtime failures.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use advsum::attack::{attack_corpus, load_attack_records, save_attack_records, AttackRecord};
use advsum::config::{Config, ConfigError};
use advsum::corpus::{
    load_dataset, save_dataset, synthesize_corpus, CodeSnippet, LabelSet, Vocabulary,
};
use advsum::demo;
use advsum::harness::{
    emit_report, load_records, run_experiment, save_records, EvalReport, Percent, ReportFormat,
};
use advsum::llmclient::{
    surrogate_fallback, CachingProvider, HttpProvider, MockProvider, Provider,
};
use advsum::prompts::{
    build_meta_ebmp, build_meta_pamp, EBMP_GENERATED_PROMPT, PAMP_GENERATED_PROMPT,
};
use advsum::surrogate::{argmax, load_checkpoint, predict_tokens, save_checkpoint, train, ModelParams};

#[derive(Parser)]
#[command(
    name = "advsum",
    version,
    about = "Adversarial robustness benchmark for code-summarization models",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    globals: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration file; defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set attack.k=5.
    #[arg(long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed (shorthand for --set seed=N).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory for output artifacts and their config sidecars.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Provider name (shorthand for --set provider.name=NAME).
    #[arg(long, global = true, value_name = "NAME")]
    provider: Option<String>,
    /// Response-cache path (shorthand for --set provider.cache=PATH).
    #[arg(long, global = true, value_name = "PATH")]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the snippet corpus: validate an existing dataset or synthesize one.
    PrepareData(PrepareArgs),
    /// Train the surrogate classifier and write its checkpoint.
    TrainSurrogate,
    /// Attack the surrogate's correctly-classified snippets and write the records.
    GenAttacks,
    /// Run an evaluation experiment: passes, records log, and report.
    Evaluate,
    /// Print a meta-prompting request and its stored generated instruction.
    MetaPrompt(MetaArgs),
    /// Re-render a report from a saved records log.
    Report,
}

#[derive(Args)]
struct PrepareArgs {
    /// Validate and normalize this dataset instead of synthesizing one.
    #[arg(long, value_name = "PATH")]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct MetaArgs {
    /// Which request: example-based (ebmp) or perturbation-aware (pamp).
    #[arg(long, value_name = "KIND", default_value = "ebmp")]
    kind: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let config = match assemble_config(&cli.globals) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Defaults, then the config file, then `--set` overrides, then shorthand
/// flags (which therefore win).
fn assemble_config(globals: &GlobalArgs) -> Result<Config, ConfigError> {
    let mut config = match &globals.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    config.apply_overrides(&globals.set)?;
    if let Some(seed) = globals.seed {
        config.seed = seed;
    }
    if let Some(name) = &globals.provider {
        config.provider.name.clone_from(name);
    }
    if let Some(cache) = &globals.cache {
        config.provider.cache = cache.display().to_string();
    }
    Ok(config)
}

fn run(cli: &Cli, config: &Config) -> Result<()> {
    let out = cli.globals.out.as_path();
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    match &cli.command {
        Command::PrepareData(args) => cmd_prepare_data(config, out, args),
        Command::TrainSurrogate => cmd_train_surrogate(config, out),
        Command::GenAttacks => cmd_gen_attacks(config, out),
        Command::Evaluate => cmd_evaluate(config, out),
        Command::MetaPrompt(args) => cmd_meta_prompt(config, out, args),
        Command::Report => cmd_report(config, out),
    }
}

/// Resolves a configured artifact path against the output directory.
fn resolve(out: &Path, configured: &str) -> PathBuf {
    let path = Path::new(configured);
    if path.is_absolute() {
        path.to_owned()
    } else {
        out.join(path)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(())
}

/// Writes `<artifact>.config.toml` holding the effective configuration, so
/// every artifact self-describes the run that produced it.
fn write_effective_config(artifact: &Path, config: &Config) -> Result<()> {
    let mut name = artifact
        .file_name()
        .map(std::ffi::OsStr::to_os_string)
        .unwrap_or_default();
    name.push(".config.toml");
    let sidecar = artifact.with_file_name(name);
    std::fs::write(&sidecar, config.dump())
        .with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

/// Prints the one-line machine-parseable success summary.
fn summary(subcommand: &str, fields: &[(&str, String)]) {
    let mut line = format!("advsum-summary subcommand={subcommand}");
    for (key, value) in fields {
        if value.chars().any(char::is_whitespace) {
            line.push_str(&format!(" {key}=\"{value}\""));
        } else {
            line.push_str(&format!(" {key}={value}"));
        }
    }
    println!("{line}");
}

/// The vocabulary every pipeline stage shares: corpus tokens plus the insert
/// templates' fixed tokens, so checkpoints hash-match across subcommands.
fn standard_vocab(corpus: &[CodeSnippet]) -> Vocabulary {
    Vocabulary::build(corpus, &advsum::attack::vocabulary_extras())
}

/// The surrogate's argmax label for a token stream (unknown tokens dropped).
fn surrogate_label<'a>(
    params: &ModelParams,
    vocab: &Vocabulary,
    labels: &'a LabelSet,
    tokens: &[String],
) -> Option<&'a str> {
    let indices: Vec<usize> = tokens.iter().filter_map(|t| vocab.lookup(t)).collect();
    if indices.is_empty() {
        return None;
    }
    labels.label(argmax(&predict_tokens(params, &indices)))
}

fn load_corpus(config: &Config, out: &Path) -> Result<Vec<CodeSnippet>> {
    let path = resolve(out, &config.data.corpus);
    load_dataset(&path).with_context(|| format!("loading corpus from {}", path.display()))
}

fn cmd_prepare_data(config: &Config, out: &Path, args: &PrepareArgs) -> Result<()> {
    let corpus = match &args.from {
        Some(path) => load_dataset(path)
            .with_context(|| format!("loading dataset from {}", path.display()))?,
        None => synthesize_corpus(config.data.synth_count, config.data.synth_labels, config.seed),
    };
    if corpus.is_empty() {
        bail!("prepared corpus is empty");
    }
    let labels = LabelSet::build(&corpus);
    let target = resolve(out, &config.data.corpus);
    ensure_parent(&target)?;
    save_dataset(&target, &corpus)
        .with_context(|| format!("writing corpus to {}", target.display()))?;
    write_effective_config(&target, config)?;
    summary(
        "prepare-data",
        &[
            ("snippets", corpus.len().to_string()),
            ("labels", labels.len().to_string()),
            ("path", target.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_train_surrogate(config: &Config, out: &Path) -> Result<()> {
    let corpus = load_corpus(config, out)?;
    let vocab = standard_vocab(&corpus);
    let labels = LabelSet::build(&corpus);
    let outcome = train(&corpus, &vocab, &labels, &config.train_config())?;
    let correct = corpus
        .iter()
        .filter(|s| surrogate_label(&outcome.params, &vocab, &labels, &s.tokens) == Some(s.label.as_str()))
        .count();
    let target = resolve(out, &config.surrogate.checkpoint);
    ensure_parent(&target)?;
    save_checkpoint(&target, &outcome.params, &vocab, &labels)?;
    write_effective_config(&target, config)?;
    summary(
        "train-surrogate",
        &[
            ("snippets", corpus.len().to_string()),
            ("vocab", vocab.len().to_string()),
            ("labels", labels.len().to_string()),
            ("train_acc", Percent::new(correct, corpus.len())?.render()),
            ("checkpoint", target.display().to_string()),
        ],
    );
    Ok(())
}

fn load_surrogate(
    config: &Config,
    out: &Path,
    vocab: &Vocabulary,
    labels: &LabelSet,
) -> Result<ModelParams> {
    let path = resolve(out, &config.surrogate.checkpoint);
    load_checkpoint(&path, vocab, labels).with_context(|| {
        format!(
            "loading surrogate checkpoint from {} (run `advsum train-surrogate` first)",
            path.display()
        )
    })
}

/// Attacks the surrogate's correctly-classified subset and returns the
/// records plus how many optimizations failed outright.
fn generate_attacks(
    config: &Config,
    corpus: &[CodeSnippet],
    params: &ModelParams,
    vocab: &Vocabulary,
    labels: &LabelSet,
) -> Result<(Vec<AttackRecord>, usize, usize)> {
    let targets: Vec<CodeSnippet> = corpus
        .iter()
        .filter(|s| surrogate_label(params, vocab, labels, &s.tokens) == Some(s.label.as_str()))
        .cloned()
        .collect();
    if targets.is_empty() {
        bail!("the surrogate classifies no snippet correctly; train it first");
    }
    let items = attack_corpus(params, &targets, vocab, labels, &config.attack_config());
    let mut records = Vec::new();
    let mut failures = 0;
    for item in items {
        match item.outcome {
            Ok(result) => records.push(AttackRecord::from_result(&result)),
            Err(e) => {
                failures += 1;
                eprintln!("warning: attack failed for `{}`: {e}", item.origin_id);
            }
        }
    }
    Ok((records, targets.len(), failures))
}

fn cmd_gen_attacks(config: &Config, out: &Path) -> Result<()> {
    let corpus = load_corpus(config, out)?;
    let vocab = standard_vocab(&corpus);
    let labels = LabelSet::build(&corpus);
    let params = load_surrogate(config, out, &vocab, &labels)?;
    let (records, attacked, failures) = generate_attacks(config, &corpus, &params, &vocab, &labels)?;
    let successes = records.iter().filter(|r| r.success).count();
    let target = resolve(out, &config.attack.records);
    ensure_parent(&target)?;
    save_attack_records(&target, &records)
        .with_context(|| format!("writing attack records to {}", target.display()))?;
    write_effective_config(&target, config)?;
    summary(
        "gen-attacks",
        &[
            ("attacked", attacked.to_string()),
            ("records", records.len().to_string()),
            ("successes", successes.to_string()),
            ("failures", failures.to_string()),
            ("surrogate_asr", Percent::new(successes, attacked)?.render()),
            ("path", target.display().to_string()),
        ],
    );
    Ok(())
}

/// Builds the configured provider, wrapped in a file-backed response cache
/// when `provider.cache` is set.
fn build_provider(config: &Config, corpus: &[CodeSnippet], out: &Path) -> Result<Box<dyn Provider>> {
    let base: Box<dyn Provider> = match config.provider.name.as_str() {
        "mock" => {
            let vocab = standard_vocab(corpus);
            let labels = LabelSet::build(corpus);
            let params = load_surrogate(config, out, &vocab, &labels)
                .context("the mock provider answers with the surrogate")?;
            Box::new(MockProvider::new(
                HashMap::new(),
                surrogate_fallback(params, vocab, labels),
            ))
        }
        "openai" | "http" => Box::new(HttpProvider::new(config.provider_config())?),
        other => bail!("unknown provider `{other}` (mock|openai)"),
    };
    if config.provider.cache.is_empty() {
        return Ok(base);
    }
    let path = resolve(out, &config.provider.cache);
    ensure_parent(&path)?;
    Ok(Box::new(CachingProvider::with_file(base, &path)?))
}

fn cmd_evaluate(config: &Config, out: &Path) -> Result<()> {
    let corpus = load_corpus(config, out)?;
    let attacks_path = resolve(out, &config.attack.records);
    let attacks = if attacks_path.exists() {
        load_attack_records(&attacks_path)
            .with_context(|| format!("loading attack records from {}", attacks_path.display()))?
    } else {
        // No attack file: generate attacks against the surrogate in memory.
        let vocab = standard_vocab(&corpus);
        let labels = LabelSet::build(&corpus);
        let params = load_surrogate(config, out, &vocab, &labels)
            .context("no attack records file; generating attacks needs the checkpoint")?;
        let (records, _, _) = generate_attacks(config, &corpus, &params, &vocab, &labels)?;
        records
    };
    let spec = config.experiment_spec()?;
    let provider = build_provider(config, &corpus, out)?;
    let output = run_experiment(&corpus, &attacks, provider.as_ref(), &spec)?;

    let records_path = resolve(out, &config.eval.records);
    ensure_parent(&records_path)?;
    save_records(&records_path, &output.records)?;
    write_effective_config(&records_path, config)?;
    let format: ReportFormat = config
        .eval
        .report_format
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    print!("{}", emit_report(std::slice::from_ref(&output.report), format));

    let malformed: usize = output
        .report
        .cells
        .iter()
        .map(|c| c.counts.malformed)
        .sum();
    let render = |p: Option<Percent>| p.map_or_else(|| String::from("-"), |p| p.render());
    summary(
        "evaluate",
        &[
            ("model", spec.model_id.clone()),
            ("s", output.report.s_size.to_string()),
            ("sm", output.report.sm_size.to_string()),
            ("acc", render(output.report.accuracy_on_s())),
            (
                "asr",
                render(output.report.asr_for(&advsum::prompts::PromptVariant::Baseline)),
            ),
            ("malformed", malformed.to_string()),
            ("calls", output.call_fingerprints.len().to_string()),
            ("records", records_path.display().to_string()),
        ],
    );
    Ok(())
}

/// Demonstration pairs for the example-based meta request: real
/// (clean, perturbed) pairs when a corpus and attack records exist, the
/// built-in worked example otherwise.
fn meta_pairs(config: &Config, out: &Path) -> Result<Vec<(String, String)>> {
    let corpus_path = resolve(out, &config.data.corpus);
    let attacks_path = resolve(out, &config.attack.records);
    if corpus_path.exists() && attacks_path.exists() {
        let corpus = load_dataset(&corpus_path)?;
        let attacks = load_attack_records(&attacks_path)?;
        let by_id: HashMap<&str, &CodeSnippet> =
            corpus.iter().map(|s| (s.id.as_str(), s)).collect();
        let pairs: Vec<(String, String)> = attacks
            .iter()
            .filter_map(|a| {
                by_id
                    .get(a.origin_id.as_str())
                    .map(|s| (s.render_tokens(), a.perturbed_code.clone()))
            })
            .take(4)
            .collect();
        if !pairs.is_empty() {
            return Ok(pairs);
        }
    }
    Ok(vec![(
        demo::EXAMPLE_CODE.to_owned(),
        demo::EXAMPLE_PERTURBED.to_owned(),
    )])
}

fn cmd_meta_prompt(config: &Config, out: &Path, args: &MetaArgs) -> Result<()> {
    let (request, stored) = match args.kind.as_str() {
        "ebmp" => (build_meta_ebmp(&meta_pairs(config, out)?)?, EBMP_GENERATED_PROMPT),
        "pamp" => (build_meta_pamp(), PAMP_GENERATED_PROMPT),
        other => bail!("unknown meta-prompt kind `{other}` (ebmp|pamp)"),
    };
    println!("# meta-prompting request ({})\n", args.kind);
    println!("{}\n", request.render_transcript());
    println!("# stored generated instruction\n");
    println!("{stored}");
    summary(
        "meta-prompt",
        &[
            ("kind", args.kind.clone()),
            ("request_chars", request.render_transcript().len().to_string()),
            ("instruction_chars", stored.len().to_string()),
        ],
    );
    Ok(())
}

fn cmd_report(config: &Config, out: &Path) -> Result<()> {
    let records_path = resolve(out, &config.eval.records);
    let records = load_records(&records_path)
        .with_context(|| format!("loading records from {}", records_path.display()))?;
    let report = EvalReport::from_records(config.eval.model_id.clone(), &records);
    let format: ReportFormat = config
        .eval
        .report_format
        .parse()
        .map_err(|e: String| anyhow::anyhow!(e))?;
    let rendered = emit_report(std::slice::from_ref(&report), format);
    let extension = match format {
        ReportFormat::Csv => "csv",
        ReportFormat::Table => "txt",
    };
    let target = out.join(format!("report.{extension}"));
    ensure_parent(&target)?;
    std::fs::write(&target, &rendered)
        .with_context(|| format!("writing report to {}", target.display()))?;
    write_effective_config(&target, config)?;
    print!("{rendered}");
    let render = |p: Option<Percent>| p.map_or_else(|| String::from("-"), |p| p.render());
    summary(
        "report",
        &[
            ("model", report.model_id.clone()),
            ("records", records.len().to_string()),
            ("acc", render(report.accuracy_on_s())),
            (
                "asr",
                render(report.asr_for(&advsum::prompts::PromptVariant::Baseline)),
            ),
            ("path", target.display().to_string()),
        ],
    );
    Ok(())
}
