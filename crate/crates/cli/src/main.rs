use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use clap::{Parser, Subcommand};
use contralab_core::config::{ExperimentConfig, PRESET_CORPUS};
use contralab_core::engine::{embed_split, Checkpoint};
use contralab_core::eval::export_embeddings;
use contralab_core::experiment::{assess, load_corpus, run_experiment, ExperimentReport};
use contralab_core::synthdata::{generate_corpus, write_corpus, Corpus};
use contralab_core::verify::{run_suite, Suite};
use contralab_core::LabError;

#[derive(Parser)]
#[command(name = "contralab", version, about = "Contrastive image-text training lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Optional config file; only corpus keys are used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `--key value` overrides of config keys.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Train one run and write its run directory.
    Train {
        /// Run directory name under the output root.
        #[arg(long)]
        name: Option<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Re-evaluate a run directory's checkpoint.
    Eval {
        run: PathBuf,
        /// Write eval-split embeddings here.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Run verification suites (grad, dga, gather, mixup, sampler, corrupt, all).
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tidy CSV of metrics across run directories.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lab(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::MissingKey(_) | LabError::Parse { .. } => CliError::Usage(e.to_string()),
            e => CliError::Lab(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lab(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// `--key value` and `--key=value` pairs; dashes in keys become underscores.
fn parse_overrides(args: &[String]) -> CliResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return Err(CliError::Usage(format!("expected `--key value`, got `{a}`")));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("override --{body} has no value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Config errors are the caller's to fix, so they all exit as usage errors.
fn parse_config(text: &str, overrides: &[(String, String)], corpus_only: bool) -> CliResult<ExperimentConfig> {
    let parsed = if corpus_only {
        ExperimentConfig::parse_corpus_only(text, overrides)
    } else {
        ExperimentConfig::parse(text, overrides)
    };
    parsed.map_err(|e| CliError::Usage(e.to_string()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn gen_corpus(out: &Path, config: Option<&Path>, overrides: &[String]) -> CliResult<()> {
    let text = match config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let cfg = parse_config(&text, &parse_overrides(overrides)?, true)?;
    let corpus = generate_corpus(&cfg.corpus_spec(), &cfg.corpus_context())?;
    write_corpus(&corpus, out)?;
    println!(
        "wrote {} train / {} eval samples to {}",
        corpus.train.len(),
        corpus.eval.len(),
        out.display()
    );
    Ok(())
}

fn version_string() -> String {
    let mut v = format!("contralab {}", env!("CARGO_PKG_VERSION"));
    if let Ok(o) = Command::new("git").args(["describe", "--always", "--dirty"]).output() {
        if o.status.success() {
            let d = String::from_utf8_lossy(&o.stdout).trim().to_string();
            if !d.is_empty() {
                write!(v, " ({d})").unwrap();
            }
        }
    }
    v
}

fn run_dir(cfg: &ExperimentConfig, config_path: &Path, name: Option<&str>) -> PathBuf {
    let root = cfg
        .output
        .clone()
        .or_else(|| std::env::var_os("CONTRALAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match name {
        Some(n) => n.to_string(),
        None => {
            let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            format!("{stem}-{}-{}-seed{}", cfg.sampler, cfg.mode, cfg.seed).replace(':', "_")
        }
    };
    root.join(name)
}

fn write_embeddings(params: &contralab_core::encoders::EncoderParams, corpus: &Corpus, path: &Path) -> CliResult<()> {
    let (img, txt) = embed_split(params, &corpus.eval)?;
    let tags: Vec<_> = corpus.eval.iter().map(|s| s.source).collect();
    export_embeddings(&img, &txt, &tags, &tags, path)?;
    Ok(())
}

fn train(config: &Path, overrides: &[String], name: Option<&str>, force: bool) -> CliResult<()> {
    // --name and --force may also follow the config path
    let (mut name, mut force) = (name.map(str::to_string), force);
    let mut rest = Vec::new();
    let mut it = overrides.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--force" => force = true,
            "--name" => name = Some(it.next().ok_or_else(|| CliError::Usage("--name has no value".into()))?.clone()),
            _ => match a.strip_prefix("--name=") {
                Some(n) => name = Some(n.to_string()),
                None => rest.push(a.clone()),
            },
        }
    }
    let cfg = parse_config(&read_text(config)?, &parse_overrides(&rest)?, false)?;
    let name = name.as_deref();
    let dir = run_dir(&cfg, config, name);
    if dir.join("checkpoint.json").exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --force to replace it",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    fs::write(dir.join("version.txt"), version_string() + "\n")?;
    let seeds = serde_json::json!({
        "seed": cfg.seed,
        "corpus_seed": cfg.corpus_seed,
        "corpus": match &cfg.corpus {
            contralab_core::config::CorpusSource::Preset => PRESET_CORPUS.to_string(),
            contralab_core::config::CorpusSource::Directory(d) => d.display().to_string(),
        },
    });
    fs::write(dir.join("seeds.json"), serde_json::to_string_pretty(&seeds)?)?;

    let corpus = load_corpus(&cfg)?;
    let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.jsonl"))?);
    let mut io_err: Option<std::io::Error> = None;
    let started = Instant::now();
    let mut observer = |r: &contralab_core::engine::StepRecord| {
        if io_err.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("step records serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            io_err = Some(e);
        }
    };
    let (outcome, report) = run_experiment(&cfg, &corpus, &mut observer)?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    metrics.flush()?;

    let ckpt = Checkpoint::capture(&outcome.params, Some(&outcome.optimizer));
    fs::write(dir.join("checkpoint.json"), ckpt.to_json()?)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_embeddings(&outcome.params, &corpus, &dir.join("embeddings.csv"))?;
    println!(
        "{}: {} steps in {:.1}s, RSUM {:.2}, tau {:.4}",
        dir.display(),
        report.steps,
        started.elapsed().as_secs_f64(),
        report.retrieval.rsum,
        report.final_tau
    );
    Ok(())
}

fn eval(run: &Path, embeddings: Option<&Path>) -> CliResult<()> {
    let cfg = parse_config(&read_text(&run.join("config.txt"))?, &[], false)?;
    let ckpt = Checkpoint::from_json(&read_text(&run.join("checkpoint.json"))?)?;
    let (params, _) = ckpt.restore()?;
    let corpus = load_corpus(&cfg)?;
    let (retrieval, logp) = assess(&params, &corpus, &cfg)?;
    let out = serde_json::json!({
        "retrieval": retrieval,
        "probe_logp_neg_per_source": logp,
        "tau": params.tau,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if let Some(path) = embeddings {
        write_embeddings(&params, &corpus, path)?;
    }
    Ok(())
}

fn verify(suite: &str, seed: u64) -> CliResult<bool> {
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: LabError| CliError::Usage(e.to_string()))?]
    };
    let mut ok = true;
    for s in suites {
        let started = Instant::now();
        let report = run_suite(s, seed)?;
        for c in &report.checks {
            println!("[{s}] {c}");
        }
        if s == Suite::Dga {
            let worst = report
                .checks
                .iter()
                .filter(|c| c.name.ends_with("gradient rel"))
                .map(|c| c.observed)
                .fold(0.0, f64::max);
            println!("[{s}] max relative gradient difference {worst:.3e}");
        }
        println!(
            "[{s}] {} ({} checks, {:.2}s)",
            if report.passed() { "PASS" } else { "FAIL" },
            report.checks.len(),
            started.elapsed().as_secs_f64()
        );
        ok &= report.passed();
    }
    Ok(ok)
}

fn compare(runs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let mut csv = String::from("run,sampler,mode,seed,metric,value\n");
    for run in runs {
        let cfg = parse_config(&read_text(&run.join("config.txt"))?, &[], false)?;
        let report: ExperimentReport = serde_json::from_str(&read_text(&run.join("report.json"))?)?;
        let name = run.file_name().and_then(|s| s.to_str()).unwrap_or("run");
        let r = &report.retrieval;
        let mut rows: Vec<(String, f64)> = vec![
            ("i2t_r1".into(), r.i2t_r1),
            ("i2t_r5".into(), r.i2t_r5),
            ("i2t_r10".into(), r.i2t_r10),
            ("t2i_r1".into(), r.t2i_r1),
            ("t2i_r5".into(), r.t2i_r5),
            ("t2i_r10".into(), r.t2i_r10),
            ("rsum".into(), r.rsum),
            ("final_tau".into(), report.final_tau),
        ];
        for (src, v) in &report.probe_logp_neg_per_source {
            rows.push((format!("logp_neg_source{src}"), *v));
        }
        for (metric, value) in rows {
            writeln!(csv, "{name},{},{},{},{metric},{value}", cfg.sampler, cfg.mode, cfg.seed).unwrap();
        }
    }
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::GenCorpus { out, config, overrides } => gen_corpus(&out, config.as_deref(), &overrides).map(|_| true),
        Cmd::Train {
            name,
            force,
            config,
            overrides,
        } => train(&config, &overrides, name.as_deref(), force).map(|_| true),
        Cmd::Eval { run, embeddings } => eval(&run, embeddings.as_deref()).map(|_| true),
        Cmd::Verify { suite, seed } => verify(&suite, seed),
        Cmd::Compare { runs, out } => compare(&runs, out.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
