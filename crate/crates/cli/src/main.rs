use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stackformer::export::dump_attention;
use stackformer::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use stackformer::tasks::{
    generate_dataset, parse_length_range, parse_symbols, read_dataset, write_dataset, Split, Task, TaskInstance,
};
use stackformer::train::{evaluate, summary_table, train_loop, training_example, RunConfig, TrainConfig};
use stackformer::verify::{gradcheck_suite, verify_theorems, GRAD_TOLERANCE};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "stackformer", version, about = "Transformers with stack attention on formal transduction tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task dataset as tab-separated lines.
    Gen(GenArgs),
    /// Train one model per seed and write checkpoints, records and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file or a freshly generated test set.
    Eval(EvalArgs),
    /// Run the stack theorem checks or the gradient sweep.
    Verify(VerifyArgs),
    /// Export per-layer stack attention maps and actions for one input.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// RS, SM, MA or SE.
    task: String,
    count: usize,
    /// Input lengths, `LO..HI` (inclusive) or a single length.
    len: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key=value` file; flags given here take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: desk or paper.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    /// none, sincos, relative, rotary or alibi.
    #[arg(long)]
    pe: Option<String>,
    /// on or off.
    #[arg(long)]
    stack: Option<String>,
    /// mlm or alm.
    #[arg(long)]
    mode: Option<String>,
    /// First seed; further runs use consecutive seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Number of seeds to train.
    #[arg(long)]
    seeds: Option<usize>,
    /// Global gradient-norm clip, or `off`.
    #[arg(long)]
    clip: Option<String>,
    /// on or off.
    #[arg(long)]
    loss_on_prefix: Option<String>,
    /// on or off.
    #[arg(long)]
    sample: Option<String>,
    /// Any other setting, e.g. `--set eval_every=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file from `gen`; otherwise a test set is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Lengths of the generated test set (default: the training run's).
    #[arg(long)]
    len: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample autoregressive outputs with this seed instead of greedy decoding.
    #[arg(long)]
    sample_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Check {
    Theorems,
    Gradcheck,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    what: Check,
    /// Random cases (default 1000 for theorems, 20 for gradcheck).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task input `x`, symbols separated by spaces.
    #[arg(long)]
    input: String,
    #[arg(long)]
    out: PathBuf,
}

/// Errors that map to the usage exit code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<Usage>() || matches!(c.downcast_ref::<stackformer::Error>(), Some(stackformer::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::DumpAttention(a) => cmd_dump(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("STACKFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("STACKFORMER_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<ExitCode> {
    let task: Task = a.task.parse()?;
    let lengths = parse_length_range(&a.len)?;
    if *lengths.end() < task.min_len() {
        return Err(usage(format!("{task} needs |x| ≥ {}", task.min_len())));
    }
    let data = generate_dataset(task, &lengths, a.count, a.seed, a.split.into())?;
    let agree = data.iter().filter(|inst| inst.verify().is_ok()).count();
    match &a.out {
        Some(path) => write_dataset(BufWriter::new(fs::File::create(path)?), &data)?,
        None => write_dataset(BufWriter::new(io::stdout().lock()), &data)?,
    }
    eprintln!("{task}: {} instances, oracle agreement {agree}/{}", data.len(), data.len());
    Ok(if agree == data.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Lines of a `key=value` file with comments and blanks removed.
fn config_entries(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key=value, got {raw:?}", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

struct Resolved {
    config: RunConfig,
    seeds: usize,
}

fn resolve(a: &TrainArgs) -> anyhow::Result<Resolved> {
    let mut entries = match &a.config {
        Some(path) => config_entries(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => Vec::new(),
    };
    let flags = [
        ("task", &a.task),
        ("lr", &a.lr),
        ("batch", &a.batch),
        ("steps", &a.steps),
        ("pe", &a.pe),
        ("stack", &a.stack),
        ("mode", &a.mode),
        ("seed", &a.seed),
        ("clip", &a.clip),
        ("loss_on_prefix", &a.loss_on_prefix),
        ("sample", &a.sample),
        ("profile", &a.profile),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            entries.push((k.to_string(), v.clone()));
        }
    }
    if let Some(n) = a.seeds {
        entries.push(("seeds".into(), n.to_string()));
    }
    for s in &a.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    let last = |key: &str| entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let task: Task = last("task")
        .ok_or_else(|| usage("no task given (--task or task= in the config file)"))?
        .parse()?;
    let profile = last("profile").unwrap_or_else(|| "desk".into());
    let mut config = RunConfig {
        model: match profile.as_str() {
            "paper" => ModelConfig::paper(),
            _ => ModelConfig::desk(),
        },
        train: TrainConfig::profile(&profile, task)?,
    };
    let seeds = match last("seeds") {
        Some(v) => v.parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(format!("bad seeds {v:?}")))?,
        None => 1,
    };
    let mut unknown = Vec::new();
    for (k, v) in &entries {
        if matches!(k.as_str(), "profile" | "seeds") {
            continue;
        }
        if !config.set(k, v)? {
            unknown.push(k.clone());
        }
    }
    if !unknown.is_empty() {
        return Err(usage(format!("unknown keys: {}", unknown.join(", "))));
    }
    config.validate()?;
    Ok(Resolved { config, seeds })
}

fn manifest_text(r: &Resolved, out: &Path) -> String {
    format!(
        "# stackformer {VERSION}\n# out={}\n{}seeds={}\n",
        out.display(),
        r.config.to_text(),
        r.seeds
    )
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let resolved = resolve(&a)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("manifest.txt"), manifest_text(&resolved, &a.out))?;
    let base = resolved.config.train.seed;
    let mut records = Vec::new();
    let mut failed = false;
    for seed in base..base + resolved.seeds as u64 {
        let mut cfg = resolved.config.clone();
        cfg.train.seed = seed;
        let dir = a.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let label = format!("{} stack={} seed={seed}", cfg.train.task, if cfg.model.stack { "on" } else { "off" });
        let quiet = a.quiet;
        let outcome = train_loop(&cfg, |p| {
            if !quiet {
                eprintln!(
                    "{label} step {:>7} loss {:>8.4} acc {:.4} ({:.1}s)",
                    p.step, p.train_loss, p.test_accuracy, p.elapsed_secs
                );
            }
        })?;
        let meta = vec![
            ("code_version".to_string(), VERSION.to_string()),
            ("task".to_string(), cfg.train.task.to_string()),
            ("seed".to_string(), seed.to_string()),
            ("test_len".to_string(), cfg.train.to_pairs().into_iter().find(|(k, _)| *k == "test_len").map(|(_, v)| v).unwrap_or_default()),
            ("eval_size".to_string(), cfg.train.eval_size.to_string()),
        ];
        save_checkpoint(&outcome.model, &dir.join("checkpoint.txt"), &meta)?;
        outcome
            .record
            .write_jsonl(BufWriter::new(fs::File::create(dir.join("record.jsonl"))?))?;
        if let Some(d) = &outcome.record.diverged {
            eprintln!("{label} diverged: {d}");
            failed = true;
        }
        records.push(outcome.record);
    }
    let table = summary_table(&records);
    fs::write(a.out.join("summary.tsv"), &table)?;
    print!("{table}");
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn meta<'a>(ck: &'a Checkpoint, key: &str) -> Option<&'a str> {
    ck.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn checkpoint_task(ck: &Checkpoint) -> anyhow::Result<Task> {
    Ok(meta(ck, "task")
        .ok_or_else(|| anyhow!("checkpoint does not record its task"))?
        .parse()?)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data: Vec<TaskInstance> = match &a.data {
        Some(path) => read_dataset(BufReader::new(fs::File::open(path)?))?,
        None => {
            let task = checkpoint_task(&ck)?;
            let len = match (a.len.as_deref(), meta(&ck, "test_len")) {
                (Some(l), _) | (None, Some(l)) => parse_length_range(l)?,
                (None, None) => return Err(usage("no --len given and none recorded in the checkpoint")),
            };
            let count = a
                .count
                .or_else(|| meta(&ck, "eval_size").and_then(|v| v.parse().ok()))
                .unwrap_or(1000);
            let seed = a.seed.or_else(|| meta(&ck, "seed").and_then(|v| v.parse().ok())).unwrap_or(0);
            generate_dataset(task, &len, count, seed, Split::Test)?
        }
    };
    if data.is_empty() {
        bail!("no instances to evaluate");
    }
    let report = evaluate(&ck.model, &data, a.sample_seed)?;
    println!(
        "{}",
        serde_json::json!({ "instances": data.len(), "accuracy": report.accuracy })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let mut out = io::stdout().lock();
    let passed = match a.what {
        Check::Theorems => {
            let sweep = verify_theorems(a.trials.unwrap_or(1000), 50, 100, a.seed)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&sweep)?)?;
            sweep.passed()
        }
        Check::Gradcheck => {
            let cases = gradcheck_suite(a.trials.unwrap_or(20), a.seed)?;
            let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            for c in &cases {
                writeln!(out, "{:<24} checked {:>5} max rel err {:.3e}", c.name, c.checked, c.max_rel_err)?;
            }
            writeln!(out, "overall max rel err {worst:.3e} (tolerance {GRAD_TOLERANCE:e})")?;
            match cases.iter().find(|c| !(c.max_rel_err < GRAD_TOLERANCE)) {
                Some(c) => {
                    writeln!(out, "counterexample: {}", serde_json::to_string(c)?)?;
                    false
                }
                None => true,
            }
        }
    };
    writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_dump(a: DumpArgs) -> anyhow::Result<ExitCode> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let task = checkpoint_task(&ck)?;
    let inst = TaskInstance::from_input(task, parse_symbols(&a.input)).map_err(|e| usage(e.to_string()))?;
    let example = training_example(&ck.model, &inst, false)?;
    for path in dump_attention(&ck.model, &example.tokens, &a.out)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
