//! `dln` command-line front end.
//!
//! Every command prints one JSON document on stdout, a short human summary
//! on stderr, and writes `<out>.manifest.json` describing the run.
//!
//! Exit codes: 0 success, 1 internal error, 2 parse error, 3 I/O error,
//! 4 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dln::compile::{compile, count_ops};
use dln::data::{
    extract_basic_features, load_feature_csv, load_sequences, preprocess, SequenceFormat, Split,
    DEFAULT_CATEGORICAL_MAX_UNIQUE,
};
use dln::hpo::{config_stats, history_jsonl, run_search, SearchSpace};
use dln::{balanced_accuracy, DlnModel, Error, ErrorClass, FeatureMatrix, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dln", version, about = "Differentiable logic networks for tabular and time-series features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SeqFormat {
    /// Whitespace-separated, label first.
    Tsv,
    /// Comma-separated, label first.
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Text,
    Dot,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sequence file to a CSV of 14 summary features per sequence.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "tsv")]
        format: SeqFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean, encode and scale a train/test pair of feature CSVs.
    Preprocess {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CATEGORICAL_MAX_UNIQUE)]
        max_unique: usize,
        /// Output prefix: `<out>.train.csv`, `<out>.test.csv`, `<out>.preprocessor.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Random hyperparameter search with cross-validation on the training split.
    Hpo {
        #[arg(long)]
        train: PathBuf,
        /// Base configuration for fields the search does not vary.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output prefix: `<out>.history.jsonl`, `<out>.best.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocess, build, train and save a model.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override in config syntax, e.g. `ste.logic=true`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_CATEGORICAL_MAX_UNIQUE)]
        max_unique: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Balanced accuracy of a saved model on a raw feature CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Where to write the run manifest; defaults to the model path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile a model to rules, a DOT graph and a cost report.
    Compile {
        #[arg(long)]
        model: PathBuf,
        /// Output prefix: `<out>.rules.txt`, `<out>.dot`, `<out>.cost.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the compiled circuit in one format.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    /// Arguments after the program name; replayed verbatim.
    args: Vec<String>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    seed: Option<u64>,
    started_unix: f64,
    finished_unix: f64,
    version: String,
}

struct Outcome {
    report: Value,
    summary: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
    config: Option<PathBuf>,
    overrides: Vec<String>,
    seed: Option<u64>,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> dln::Result<()> {
    fs::write(path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn read(path: &Path) -> dln::Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Config file (TOML, fields of `TrainConfig`) plus `key=value` overrides.
fn load_config(path: Option<&Path>, overrides: &[String]) -> dln::Result<TrainConfig> {
    let mut table = match path {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .map_err(|_| Error::Config(format!("{}: not UTF-8", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        if !o.contains('=') {
            return Err(Error::Config(format!("override {o:?} is not key=value")));
        }
        let piece: toml::Table = o
            .parse()
            .or_else(|_| {
                // Bare strings are not valid TOML values; quote them.
                let (k, v) = o.split_once('=').expect("checked");
                format!("{k} = {:?}", v.trim()).parse()
            })
            .map_err(|e| Error::Config(format!("override {o:?}: {e}")))?;
        merge(&mut table, piece);
    }
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn name_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    }
}

fn load_csv(path: &Path) -> dln::Result<FeatureMatrix> {
    load_feature_csv(path).map_err(name_path(path))
}

fn load_model(path: &Path) -> dln::Result<DlnModel> {
    DlnModel::load(&read(path)?)
}

fn score(model: &DlnModel, raw: &FeatureMatrix) -> dln::Result<f64> {
    let data = match &model.preprocessor {
        Some(p) => p.transform(raw)?,
        None => raw.clone(),
    };
    let pred = model.predict(&data)?;
    balanced_accuracy(&data.labels, &pred)
}

fn csv_bytes(m: &FeatureMatrix) -> dln::Result<Vec<u8>> {
    let mut buf = Vec::new();
    m.write_csv(&mut buf)?;
    Ok(buf)
}

fn run(cmd: Command) -> dln::Result<Outcome> {
    let mut out = Outcome {
        report: Value::Null,
        summary: String::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        manifest: PathBuf::new(),
        config: None,
        overrides: Vec::new(),
        seed: None,
    };
    match cmd {
        Command::Extract { input, format, out: path } => {
            let fmt = match format {
                SeqFormat::Tsv => SequenceFormat::TsvLabelFirst,
                SeqFormat::Csv => SequenceFormat::Delimited,
            };
            let ds = load_sequences(&input, fmt, Split::Train).map_err(name_path(&input))?;
            let m = extract_basic_features(&ds)?;
            write(&path, csv_bytes(&m)?)?;
            out.report = json!({
                "command": "extract",
                "rows": m.num_rows(),
                "columns": m.num_columns(),
                "classes": m.class_names,
                "output": path,
            });
            out.summary = format!("extracted {} x {} features to {}", m.num_rows(), m.num_columns(), path.display());
            out.inputs = vec![input];
            out.manifest = with_suffix(&path, ".manifest.json");
            out.outputs = vec![path];
        }
        Command::Preprocess { train, test, max_unique, out: prefix } => {
            let (tr, te, pre) = preprocess(&load_csv(&train)?, &load_csv(&test)?, max_unique)?;
            let paths = [".train.csv", ".test.csv", ".preprocessor.json"].map(|s| with_suffix(&prefix, s));
            write(&paths[0], csv_bytes(&tr)?)?;
            write(&paths[1], csv_bytes(&te)?)?;
            let mut pj = serde_json::to_vec_pretty(&pre).map_err(|e| Error::Structure(e.to_string()))?;
            pj.push(b'\n');
            write(&paths[2], pj)?;
            out.report = json!({
                "command": "preprocess",
                "train_rows": tr.num_rows(),
                "test_rows": te.num_rows(),
                "columns": tr.columns.iter().map(|c| &c.name).collect::<Vec<_>>(),
            });
            out.summary = format!("{} train rows, {} test rows, {} columns", tr.num_rows(), te.num_rows(), tr.num_columns());
            out.inputs = vec![train, test];
            out.manifest = with_suffix(&prefix, ".manifest.json");
            out.outputs = paths.to_vec();
        }
        Command::Hpo { train, config, trials, seed, workers, out: prefix } => {
            let base = load_config(config.as_deref(), &[])?;
            let raw = load_csv(&train)?;
            let (data, _, _) = preprocess(&raw, &raw, DEFAULT_CATEGORICAL_MAX_UNIQUE)?;
            let space = SearchSpace { base, ..SearchSpace::default() };
            let result = run_search(&space, &data, trials, seed, workers)?;
            let history = with_suffix(&prefix, ".history.jsonl");
            let best = with_suffix(&prefix, ".best.toml");
            write(&history, history_jsonl(&result.records))?;
            let best_toml = toml::to_string(&result.best).map_err(|e| Error::Structure(e.to_string()))?;
            write(&best, best_toml)?;
            let stats = config_stats(&result.records, std::slice::from_ref(&result.best));
            let best_score = result.records[result.best_trial].cv_score;
            out.report = json!({
                "command": "hpo",
                "trials": trials,
                "best_trial": result.best_trial,
                "best_cv_score": best_score.is_finite().then_some(best_score),
                "best_config": result.best,
                "config_stats": stats,
            });
            out.summary = format!(
                "best trial {} with cv balanced accuracy {best_score:.4}\n{}",
                result.best_trial,
                stats.render()
            );
            out.inputs = vec![train];
            out.manifest = with_suffix(&prefix, ".manifest.json");
            out.outputs = vec![history, best];
            out.config = config;
            out.seed = Some(seed);
        }
        Command::Train { train, test, config, overrides, seed, epochs, max_unique, out: path } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let raw_train = load_csv(&train)?;
            let raw_test = load_csv(&test)?;
            let (tr, _, pre) = preprocess(&raw_train, &raw_test, max_unique)?;
            let mut model = DlnModel::build(&cfg, &tr)?;
            let log = model.train(&tr)?;
            model.preprocessor = Some(pre);
            write(&path, model.save()?)?;
            let train_acc = score(&model, &raw_train)?;
            let test_acc = score(&model, &raw_test)?;
            let cost = count_ops(&compile(&model));
            out.report = json!({
                "command": "train",
                "train_balanced_accuracy": train_acc,
                "test_balanced_accuracy": test_acc,
                "total_ops": cost.total_ops,
                "cost": cost,
                "final_loss": log.last().map(|r| r.loss),
                "model": path,
                "config": cfg,
            });
            out.summary = format!(
                "train {train_acc:.4}  test {test_acc:.4}  ops {}  -> {}",
                cost.total_ops,
                path.display()
            );
            out.inputs = vec![train, test];
            out.manifest = with_suffix(&path, ".manifest.json");
            out.outputs = vec![path];
            out.config = config;
            out.overrides = overrides;
            out.seed = Some(cfg.seed);
        }
        Command::Eval { model, test, out: manifest_at } => {
            let m = load_model(&model)?;
            let raw = load_csv(&test)?;
            let acc = score(&m, &raw)?;
            out.report = json!({
                "command": "eval",
                "balanced_accuracy": acc,
                "rows": raw.num_rows(),
            });
            out.summary = format!("balanced accuracy {acc:.4} on {} rows", raw.num_rows());
            out.manifest = with_suffix(manifest_at.as_deref().unwrap_or(&model), ".eval.manifest.json");
            out.inputs = vec![model, test];
        }
        Command::Compile { model, out: prefix } => {
            let circuit = compile(&load_model(&model)?);
            let cost = count_ops(&circuit);
            let paths = [".rules.txt", ".dot", ".cost.json"].map(|s| with_suffix(&prefix, s));
            write(&paths[0], circuit.export_text())?;
            write(&paths[1], circuit.export_dot())?;
            let mut cj = serde_json::to_vec_pretty(&cost).map_err(|e| Error::Structure(e.to_string()))?;
            cj.push(b'\n');
            write(&paths[2], cj)?;
            out.report = json!({
                "command": "compile",
                "total_ops": cost.total_ops,
                "cost": cost,
                "gates": circuit.gates.len(),
                "comparators": circuit.comparators.len(),
            });
            out.summary = format!(
                "{} gates, {} comparators, {} OPs",
                circuit.gates.len(),
                circuit.comparators.len(),
                cost.total_ops
            );
            out.inputs = vec![model];
            out.manifest = with_suffix(&prefix, ".manifest.json");
            out.outputs = paths.to_vec();
        }
        Command::Export { model, format, out: path } => {
            let circuit = compile(&load_model(&model)?);
            let body = match format {
                ExportFormat::Text => circuit.export_text(),
                ExportFormat::Dot => circuit.export_dot(),
                ExportFormat::Json => {
                    let mut s = serde_json::to_string_pretty(&circuit).map_err(|e| Error::Structure(e.to_string()))?;
                    s.push('\n');
                    s
                }
            };
            write(&path, body)?;
            out.report = json!({ "command": "export", "output": path });
            out.summary = format!("wrote {}", path.display());
            out.inputs = vec![model];
            out.manifest = with_suffix(&path, ".manifest.json");
            out.outputs = vec![path];
        }
        Command::Replay { .. } => unreachable!("handled by caller"),
    }
    Ok(out)
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Internal => 1,
        ErrorClass::Parse => 2,
        ErrorClass::Io => 3,
        ErrorClass::Config => 4,
    }
}

fn execute(args: Vec<String>) -> dln::Result<()> {
    let cli = match Cli::try_parse_from(std::iter::once("dln".to_string()).chain(args.iter().cloned())) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string().trim_end().to_string())),
    };
    if let Command::Replay { manifest } = cli.command {
        let text = read(&manifest)?;
        let m: RunManifest = serde_json::from_slice(&text).map_err(|e| Error::Parse {
            offset: 0,
            line: e.line(),
            column: e.column(),
            message: format!("{}: {e}", manifest.display()),
        })?;
        if m.args.first().map(String::as_str) == Some("replay") {
            return Err(Error::Config("a manifest cannot replay another replay".into()));
        }
        return execute(m.args);
    }
    let command = args.first().cloned().unwrap_or_default();
    let started = now();
    let outcome = run(cli.command)?;
    let manifest = RunManifest {
        command,
        args,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        config: outcome.config,
        overrides: outcome.overrides,
        seed: outcome.seed,
        started_unix: started,
        finished_unix: now(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut mj = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Structure(e.to_string()))?;
    mj.push(b'\n');
    write(&outcome.manifest, mj)?;
    println!("{}", outcome.report);
    eprintln!("{}", outcome.summary.trim_end());
    Ok(())
}

fn main() -> ExitCode {
    match execute(std::env::args().skip(1).collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
