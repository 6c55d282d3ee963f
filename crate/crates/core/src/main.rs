use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spanpo::gradcheck::{self, GradcheckConfig};
use spanpo::harness::{compare, train, write_curve_csv, RunConfig, RunManifest, TrainConfig};
use spanpo::policy::write_checkpoint;
use spanpo::reward::wire::{serve, LineBackend};
use spanpo::reward::{
    CompletionInput, ExecutionBackend, FixtureBackend, GoldRecord, ScoreConfig, Scorer, TransportPolicy,
};
use spanpo::segment::{offsets_from_pieces, parse_completion, ParsedCompletion};
use spanpo::{Algo, Error, Grammar, Result, WeightProfile};

#[derive(Parser)]
#[command(name = "spanpo", version, about = "GRPO / GSPO / TS-GRPO toolkit")]
struct Cli {
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the toy task; writes curve.csv, policy.sppc and manifest.json.
    Train(TrainArgs),
    /// Train every configured (algo, seed) pair and write comparison CSVs.
    Compare(CompareArgs),
    /// Score completions against a gold bundle.
    Score(ScoreArgs),
    /// Finite-difference checks of all analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Split completions into answer and reasoning spans.
    Segment(SegmentArgs),
    /// Serve a fixture file over the line protocol on stdin/stdout.
    #[command(hide = true)]
    ServeFixture {
        #[arg(long)]
        fixture: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named training preset (toy, spider, thinkquel).
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(name) = &self.preset {
            cfg.train = TrainConfig { objective: cfg.train.objective, ..TrainConfig::preset(name)? };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    /// Output prefix: writes PREFIX_curves.csv and PREFIX_summary.csv.
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// JSONL of {question_id, text}.
    #[arg(long)]
    completions: PathBuf,
    /// JSONL gold bundle.
    #[arg(long)]
    gold: PathBuf,
    /// JSONL fixture backend.
    #[arg(long, conflicts_with_all = ["backend_cmd", "backend_addr"])]
    fixture: Option<PathBuf>,
    /// Command speaking the line protocol on stdin/stdout.
    #[arg(long, num_args = 1.., allow_hyphen_values = true, conflicts_with = "backend_addr")]
    backend_cmd: Option<Vec<String>>,
    /// host:port speaking the line protocol.
    #[arg(long)]
    backend_addr: Option<String>,
    #[arg(long, default_value = "thinkquel")]
    profile: String,
    #[arg(long, default_value = "plan_sql")]
    grammar: Grammar,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    /// Retries after a transport failure before aborting.
    #[arg(long, default_value_t = 2)]
    retries: u32,
    /// Drop samples whose backend call failed instead of aborting.
    #[arg(long)]
    exclude_on_transport_failure: bool,
    #[arg(long)]
    derive_gold_from_sql: bool,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SegmentArgs {
    /// JSONL of {id, text, token_offsets?}; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "plan_sql")]
    grammar: Grammar,
}

#[derive(Deserialize)]
struct SegmentInput {
    id: String,
    text: String,
    /// Character ranges of each token; one token per character when absent.
    #[serde(default)]
    token_offsets: Option<Vec<(usize, usize)>>,
}

#[derive(Serialize)]
struct SegmentOutput {
    id: String,
    #[serde(flatten)]
    parsed: ParsedCompletion,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(a) = args.algo {
        cfg.train.objective.algo = a;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let task = cfg.task.build()?;
    let run = train(&cfg.train, &cfg.task, &task)?;
    fs::create_dir_all(&args.out)?;
    write_curve_csv(&run.records, BufWriter::new(File::create(args.out.join("curve.csv"))?))?;
    write_checkpoint(&run.params, BufWriter::new(File::create(args.out.join("policy.sppc"))?))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        algo: cfg.train.algo().name().into(),
        train_seed: cfg.train.seed,
        task_seed: cfg.task.seed,
        steps: cfg.train.steps,
        group_size: cfg.train.group_size,
        batch_groups: cfg.train.batch_groups,
        optimizer_updates: run.records.last().map_or(0, |r| r.optimizer_updates),
    };
    fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    if let Some(last) = run.records.last() {
        eprintln!(
            "{}: {} steps, final mean_match {:.4}, mean_total_reward {:.4}",
            cfg.train.algo(),
            cfg.train.steps,
            last.mean_match,
            last.mean_total_reward
        );
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_compare(args: &CompareArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let result = compare(&cfg)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    result.write_curves_csv(BufWriter::new(File::create(with_suffix(&args.out, "_curves.csv"))?))?;
    result.write_summary_csv(BufWriter::new(File::create(with_suffix(&args.out, "_summary.csv"))?))?;
    println!(
        "mean steps to trailing-{} match >= {} (misses count as {}):",
        cfg.compare.window, cfg.compare.threshold, cfg.train.steps
    );
    for (algo, steps) in result.ordering(cfg.train.steps) {
        println!("  {algo:<7} {steps:.1}");
    }
    Ok(())
}

fn run_score(args: &ScoreArgs) -> Result<()> {
    let inputs: Vec<CompletionInput> = read_jsonl(open(&args.completions)?)?;
    let golds: Vec<GoldRecord> = read_jsonl(open(&args.gold)?)?;
    let config = ScoreConfig {
        profile: WeightProfile::from_name(&args.profile)?,
        grammar: args.grammar,
        timeout_ms: args.timeout_ms,
        on_transport_failure: if args.exclude_on_transport_failure {
            TransportPolicy::Exclude
        } else {
            TransportPolicy::Retry(args.retries)
        },
        derive_gold_from_sql: args.derive_gold_from_sql,
    };
    let backend: Box<dyn ExecutionBackend> = if let Some(p) = &args.fixture {
        Box::new(FixtureBackend::load(p)?)
    } else if let Some(cmd) = &args.backend_cmd {
        let (prog, rest) = cmd.split_first().ok_or_else(|| Error::Input("empty --backend-cmd".into()))?;
        Box::new(LineBackend::spawn(Process::new(prog).args(rest))?)
    } else if let Some(addr) = &args.backend_addr {
        Box::new(LineBackend::connect(addr.as_str())?)
    } else {
        return Err(Error::Input("one of --fixture, --backend-cmd or --backend-addr is required".into()));
    };
    let scored = Scorer::new(config, &*backend)?.score_all(&inputs, &golds)?;
    let mut out = output(args.out.as_deref())?;
    for r in &scored {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let cfg = GradcheckConfig { batches: args.batches, seed: args.seed, ..Default::default() };
    let mut ok = true;
    for r in gradcheck::run_all(&cfg)? {
        println!(
            "{:<7} {} batches={} clipped={} resampled={} max_rel_err={:.3e} time={:.2}s",
            r.suite,
            if r.passed { "PASS" } else { "FAIL" },
            r.batches,
            r.batches_with_clipping,
            r.resampled,
            r.max_rel_error,
            r.elapsed.as_secs_f64()
        );
        ok &= r.passed;
    }
    Ok(ok)
}

fn run_segment(args: &SegmentArgs) -> Result<()> {
    let records: Vec<SegmentInput> = match &args.input {
        Some(p) => read_jsonl(open(p)?)?,
        None => read_jsonl(io::stdin().lock())?,
    };
    let mut out = output(None)?;
    for r in records {
        let offsets = match r.token_offsets {
            Some(o) => o,
            None => offsets_from_pieces(&r.text.chars().map(String::from).collect::<Vec<_>>()),
        };
        let parsed = parse_completion(&r.text, &offsets, args.grammar)?;
        serde_json::to_writer(&mut out, &SegmentOutput { id: r.id, parsed })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn dump_config(cmd: Option<&Cmd>) -> Result<()> {
    let cfg = match cmd {
        Some(Cmd::Train(a)) => a.config.load()?,
        Some(Cmd::Compare(a)) => a.config.load()?,
        _ => RunConfig::default(),
    };
    print!("{}", cfg.to_toml());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if cli.dump_config {
        dump_config(cli.command.as_ref())?;
        return Ok(true);
    }
    match cli.command {
        None => Err(Error::Input("no command given (try --help)".into())),
        Some(Cmd::Train(a)) => run_train(&a).map(|_| true),
        Some(Cmd::Compare(a)) => run_compare(&a).map(|_| true),
        Some(Cmd::Score(a)) => run_score(&a).map(|_| true),
        Some(Cmd::Gradcheck(a)) => run_gradcheck(&a),
        Some(Cmd::Segment(a)) => run_segment(&a).map(|_| true),
        Some(Cmd::ServeFixture { fixture }) => {
            let backend = FixtureBackend::load(&fixture)?;
            serve(&backend, io::stdin().lock(), io::stdout().lock()).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("spanpo: {e}");
            ExitCode::from(2)
        }
    }
}
