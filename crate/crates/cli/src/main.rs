use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hypsel_core::acoustic_model::{load_model, save_model};
use hypsel_core::corpus::{load_corpus, save_corpus, CorpusSplit, Utterance};
use hypsel_core::decoder::{nbest_decode, run_lengths};
use hypsel_core::experiment::{check_model, initial_model, prepare, prepare_from_split, ArmKind, ExperimentConfig, Prepared};
use hypsel_core::feedback::word_error_rate;
use hypsel_core::report::{emit_report, emit_sweep, pairs_csv, pairs_jsonl, read_pairs_jsonl, rival_rank_comparison, selection_error_sweep, wer_csv, SweepSpec};
use hypsel_core::trainer::{decode_batch, oracle_pair_records, run_campaign, simulated_selector, CampaignOutcome, Selector};
use hypsel_core::{Error, Model, Result};
use hypsel_service::{router, serve, HumanSelector, ServiceConfig, ServiceState};

#[derive(Parser)]
#[command(name = "hypsel", version, about = "Hypothesis-selection reinforcement learning campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the corpus seed and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory. Directory outputs default to `out`;
    /// table outputs go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn out_file(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// Writes `bytes` to `--out`, or to stdout without it.
    fn emit(&self, bytes: &[u8]) -> Result<()> {
        match &self.out {
            Some(path) => {
                create_parent(path)?;
                fs::write(path, bytes)?;
            }
            None => std::io::stdout().write_all(bytes)?,
        }
        Ok(())
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus archives.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Train the supervised initial model.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        /// Corpus archive; generated from the configuration when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Acoustic model files.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
    /// N-best lists of one corpus partition, one line per hypothesis:
    /// utterance id, rank, score, word ids, run-length-encoded alignment.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// `eval`, `labeled`, or `batch<k>` with k counted from 1.
        #[arg(long, default_value = "eval")]
        set: String,
        #[arg(long, default_value_t = 1)]
        nbest: usize,
    },
    /// Word error rates of a hypothesis transcript file against a reference
    /// file. Each line holds an utterance id followed by its words.
    Wer {
        hypotheses: PathBuf,
        references: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Staged campaigns.
    Campaign {
        #[command(subcommand)]
        command: CampaignCommand,
    },
    /// Selected-hypothesis WER as a function of the selection error rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Pair log (JSON lines) to sweep instead of decoding the first batch.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Paired campaigns that differ only in the rival rank.
    RivalCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [5, 10])]
        ranks: Vec<usize>,
        /// Selection error rate of the simulated selector.
        #[arg(long, default_value_t = 0.15)]
        p: f64,
    },
    /// Run the RL arm with answers from the selection service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080", env = "HYPSEL_ADDR")]
        addr: String,
        /// Directory with the UI bundle.
        #[arg(long, env = "HYPSEL_STATIC_DIR")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 120, env = "HYPSEL_LEASE_SECS")]
        lease_secs: u64,
        /// Include reference-based progress in the status endpoint.
        #[arg(long)]
        debug: bool,
        /// Number of stages to run; all batches when absent.
        #[arg(long)]
        stages: Option<usize>,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    Generate {
        #[command(flatten)]
        common: Common,
    },
    Inspect {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    Inspect {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmChoice {
    Rl,
    Unsup,
    Both,
}

#[derive(Subcommand)]
enum CampaignCommand {
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        arm: ArmChoice,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Initial model; trained from the configuration when absent.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            toml::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn prepared(config: &ExperimentConfig, corpus: Option<&Path>) -> Result<Prepared> {
    match corpus {
        Some(path) => prepare_from_split(load_corpus(path)?, config.graph),
        None => prepare(config),
    }
}

fn baseline(config: &ExperimentConfig, prepared: &Prepared, path: Option<&Path>) -> Result<Model> {
    let model = match path {
        Some(p) => load_model(p)?,
        None => initial_model::<f64>(config, prepared)?.model,
    };
    check_model(&model, prepared)?;
    Ok(model)
}

fn write_campaign(out: &Path, outcome: &CampaignOutcome<f64>, arm: &str) -> Result<()> {
    let models = out.join("models").join(arm);
    fs::create_dir_all(&models)?;
    for (k, model) in outcome.models.iter().enumerate() {
        save_model(model.as_ref(), &models.join(format!("RL{k}.bin")))?;
    }
    let pairs = out.join("pairs");
    fs::create_dir_all(&pairs)?;
    for (k, records) in outcome.pairs.iter().enumerate() {
        if !records.is_empty() {
            fs::write(pairs.join(format!("{arm}_stage_{k}.jsonl")), pairs_jsonl(records)?)?;
            fs::write(pairs.join(format!("{arm}_stage_{k}.csv")), pairs_csv(records)?)?;
        }
    }
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    // A closed pipe (`| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn corpus_summary(split: &CorpusSplit) -> serde_json::Value {
    let frames = |u: &[hypsel_core::corpus::Utterance]| u.iter().map(|x| x.frames.len()).sum::<usize>();
    serde_json::json!({
        "seed": split.config.seed,
        "num_states": split.num_states(),
        "feature_dim": split.config.feature_dim,
        "labeled": { "utterances": split.labeled.len(), "frames": frames(&split.labeled) },
        "large_batches": split.large_batches.iter().map(|b| serde_json::json!({
            "utterances": b.len(), "frames": frames(b)
        })).collect::<Vec<_>>(),
        "eval": { "utterances": split.eval_set.len(), "frames": frames(&split.eval_set) },
    })
}

fn partition<'a>(split: &'a CorpusSplit, set: &str) -> Result<&'a [Utterance]> {
    let bad = || Error::config("set", format!("expected eval, labeled or batch<k>, got {set:?}"));
    match set {
        "eval" => Ok(&split.eval_set),
        "labeled" => Ok(&split.labeled),
        _ => {
            let k: usize = set.strip_prefix("batch").and_then(|k| k.parse().ok()).ok_or_else(bad)?;
            k.checked_sub(1)
                .and_then(|i| split.large_batches.get(i))
                .map(Vec::as_slice)
                .ok_or_else(|| Error::config("set", format!("corpus has {} large batches", split.large_batches.len())))
        }
    }
}

/// Reads `id word word ...` lines; blank lines are skipped.
fn read_transcripts(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        if out.insert(id.to_string(), fields.map(str::to_string).collect()).is_some() {
            return Err(Error::Validation(format!("{}:{}: duplicate utterance {id}", path.display(), n + 1)));
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus { command } => match command {
            CorpusCommand::Generate { common } => {
                let config = load_config(&common)?;
                let (split, _) = hypsel_core::corpus::generate_corpus(&config.corpus)?;
                let out = common.out_file("corpus.bin");
                create_parent(&out)?;
                save_corpus(&split, &out)?;
                print_json(&corpus_summary(&split));
            }
            CorpusCommand::Inspect { path, .. } => {
                print_json(&corpus_summary(&load_corpus(&path)?));
            }
        },
        Command::TrainBaseline { common, corpus } => {
            let config = load_config(&common)?;
            let prepared = prepared(&config, corpus.as_deref())?;
            let outcome = initial_model::<f64>(&config, &prepared)?;
            let out = common.out_file("baseline.bin");
            create_parent(&out)?;
            save_model(&outcome.model, &out)?;
            let eval = hypsel_core::trainer::evaluate_model(&outcome.model, &prepared.split.eval_set, &prepared.graph)?;
            print_json(&serde_json::json!({
                "initial_cv_cross_entropy": outcome.initial_cv_cross_entropy,
                "epochs": outcome.epochs,
                "eval_wer": eval,
            }));
        }
        Command::Model {
            command: ModelCommand::Inspect { path, .. },
        } => {
            let model: Model = load_model(&path)?;
            let priors = model.priors();
            print_json(&serde_json::json!({
                "arch": model.arch(),
                "num_parameters": model.num_parameters(),
                "layers": model.layers().iter().map(|l| [l.inputs, l.outputs]).collect::<Vec<_>>(),
                "prior_min": priors.iter().copied().fold(f64::INFINITY, f64::min),
                "prior_max": priors.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }));
        }
        Command::Decode { common, model, corpus, set, nbest } => {
            let config = load_config(&common)?;
            let prepared = prepared(&config, corpus.as_deref())?;
            let model: Model = load_model(&model)?;
            check_model(&model, &prepared)?;
            let utterances = partition(&prepared.split, &set)?;
            let mut out = Vec::new();
            for utt in utterances {
                for hyp in nbest_decode(&model, &prepared.graph, &utt.frames, nbest)? {
                    let words: Vec<String> = hyp.words.iter().map(|w| w.to_string()).collect();
                    let runs: Vec<String> = run_lengths(&hyp.alignment).iter().map(|(s, n)| format!("{s}x{n}")).collect();
                    writeln!(out, "{}\t{}\t{:.6}\t{}\t{}", utt.id, hyp.rank, hyp.score, words.join(" "), runs.join(" "))?;
                }
            }
            common.emit(&out)?;
        }
        Command::Wer { hypotheses, references, common } => {
            let hyps = read_transcripts(&hypotheses)?;
            let refs = read_transcripts(&references)?;
            let mut rows = Vec::with_capacity(refs.len());
            for (id, reference) in &refs {
                let hyp = hyps
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("no hypothesis for utterance {id}")))?;
                rows.push((id.clone(), word_error_rate(hyp, reference)?));
            }
            if let Some(extra) = hyps.keys().find(|id| !refs.contains_key(*id)) {
                return Err(Error::Validation(format!("no reference for utterance {extra}")));
            }
            common.emit(&wer_csv(&rows)?)?;
        }
        Command::Campaign {
            command: CampaignCommand::Run { common, arm, corpus, baseline: base },
        } => {
            let config = load_config(&common)?;
            let prepared = prepared(&config, corpus.as_deref())?;
            let initial = baseline(&config, &prepared, base.as_deref())?;
            let kinds: &[ArmKind] = match arm {
                ArmChoice::Rl => &[ArmKind::Rl],
                ArmChoice::Unsup => &[ArmKind::Unsup],
                ArmChoice::Both => &[ArmKind::Rl, ArmKind::Unsup],
            };
            let mut reports = Vec::new();
            for &kind in kinds {
                let arm = config.arm(kind);
                let outcome = run_campaign(&initial, &prepared.data(), &arm, simulated_selector(&arm).as_mut())?;
                write_campaign(&common.out_dir(), &outcome, &arm.name)?;
                reports.extend(outcome.reports);
            }
            emit_report(&reports, &common.out_dir())?;
            fs::write(
                common.out_dir().join("config.toml"),
                toml::to_string(&config).map_err(|e| Error::Validation(e.to_string()))?,
            )?;
        }
        Command::Sweep { common, corpus, baseline: base, pairs, trials } => {
            let config = load_config(&common)?;
            let records = match pairs {
                Some(path) => read_pairs_jsonl(&fs::read(path)?)?,
                None => {
                    let prepared = prepared(&config, corpus.as_deref())?;
                    let initial = baseline(&config, &prepared, base.as_deref())?;
                    let batch = prepared
                        .split
                        .large_batches
                        .first()
                        .ok_or_else(|| Error::Validation("corpus has no large batch".into()))?;
                    let arm = config.arm(ArmKind::Rl);
                    let decoded = decode_batch(0, &initial, batch, &prepared.graph, &arm, &[Arc::new(initial.clone())])?;
                    oracle_pair_records(&decoded, batch)?
                }
            };
            let spec = SweepSpec { trials, seed: config.seed, ..SweepSpec::default() };
            let table = selection_error_sweep(&records, &spec)?;
            emit_sweep(&table, &common.out_dir())?;
            print_json(&serde_json::json!({ "crossing_p": table.crossing_p, "rows": table.rows }));
        }
        Command::RivalCompare { common, corpus, baseline: base, ranks, p } => {
            let mut config = load_config(&common)?;
            config.selector = hypsel_core::experiment::SelectorSpec::Noisy { p };
            config.validate()?;
            let prepared = prepared(&config, corpus.as_deref())?;
            let initial = baseline(&config, &prepared, base.as_deref())?;
            let cmp = rival_rank_comparison(
                &initial,
                &prepared.data(),
                &config.arm(ArmKind::Unsup),
                &config.arm(ArmKind::Rl),
                &ranks,
            )?;
            emit_report(&cmp.reports(), &common.out_dir())?;
            print_json(&serde_json::json!({
                "all_ranks_match_or_beat_unsup": cmp.all_ranks_match_or_beat_reference(),
                "final_eval_wer": std::iter::once(("unsup".to_string(), cmp.reference.reports.last().map(|r| r.eval_wer.wer)))
                    .chain(cmp.by_rank.iter().map(|(n, o)| (format!("n{n}"), o.reports.last().map(|r| r.eval_wer.wer))))
                    .collect::<BTreeMap<_, _>>(),
            }));
        }
        Command::Serve { common, corpus, baseline: base, addr, static_dir, lease_secs, debug, stages } => {
            let config = load_config(&common)?;
            let mut prepared = prepared(&config, corpus.as_deref())?;
            if let Some(k) = stages {
                prepared.split.large_batches.truncate(k);
            }
            let initial = baseline(&config, &prepared, base.as_deref())?;
            let state = ServiceState::new(ServiceConfig {
                lease: Duration::from_secs(lease_secs),
                debug,
                log_dir: Some(common.out_dir().join("selections")),
                seed: config.seed,
            });
            let runtime = tokio::runtime::Runtime::new()?;
            let listener = runtime.block_on(tokio::net::TcpListener::bind(&addr))?;
            eprintln!("listening on http://{}", listener.local_addr()?);
            let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
            let server = runtime.spawn(serve(listener, router(Arc::clone(&state), static_dir), async {
                let _ = stop_rx.await;
            }));
            let arm = config.arm(ArmKind::Rl);
            let mut selector = HumanSelector { state, timeout: None };
            let result = run_campaign(&initial, &prepared.data(), &arm, &mut selector as &mut dyn Selector);
            let _ = stop_tx.send(());
            runtime
                .block_on(server)
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))??;
            let outcome = result?;
            write_campaign(&common.out_dir(), &outcome, &arm.name)?;
            emit_report(&outcome.reports, &common.out_dir())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::Validation(_) => 2,
                _ => 1,
            })
        }
    }
}
