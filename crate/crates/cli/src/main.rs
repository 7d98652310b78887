mod config;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde::Serialize;

use config::RunConfig;
use dynkv::dynamickv::run_prefill_compression;
use dynkv::harness::{self, CompareDocument, CompareOptions, EvalCase};
use dynkv::toy_model::seeded_prompt;
use dynkv::trace::{self, synth_trace, AttentionTrace, Profile, TraceHeader};
use dynkv::{BudgetReport, Model, PolicyConfig, PolicyKind, FORMAT_VERSION};

#[derive(Parser)]
#[command(name = "dynkv", version, about = "Layer-adaptive KV-cache budgets and baselines")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic or toy-model trace file.
    GenTrace(GenTraceArgs),
    /// Run the DynamicKV allocator on a trace and report per-layer budgets.
    Allocate(AllocateArgs),
    /// Per-layer retention-rate profile of one or more traces (CSV).
    Profile(ProfileArgs),
    /// Prefill a prompt on the toy model, compress, and measure fidelity.
    Simulate(SimulateArgs),
    /// Evaluate several policies over a directory of traces.
    Compare(CompareArgs),
    /// Validate a trace file and print its header.
    Inspect(InspectArgs),
}

#[derive(Args, Default)]
struct PolicyFlags {
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    wt: Option<usize>,
    #[arg(long)]
    ws: Option<usize>,
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    sink: Option<usize>,
    #[arg(long)]
    pyramid_min: Option<usize>,
    /// Size the global top-k with the head count included.
    #[arg(long)]
    topk_heads: Option<bool>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    bytes_per_elem: Option<usize>,
}

#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    model_layers: Option<usize>,
    #[arg(long)]
    model_heads: Option<usize>,
    #[arg(long)]
    model_kv_heads: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    prompt_seed: Option<u64>,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Synthetic profile: uniform, early-heavy, late-heavy, wave, needle-at(p,mass).
    #[arg(long, conflicts_with = "from_model")]
    profile: Option<String>,
    /// Take the trace from the toy model's window attention instead.
    #[arg(long)]
    from_model: bool,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 4096)]
    seq_len: usize,
    #[arg(long)]
    ws: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyFlags,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Trace files; may be repeated.
    #[arg(long)]
    trace: Vec<PathBuf>,
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    per_layer_k: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    policy: PolicyFlags,
    #[command(flatten)]
    model: ModelFlags,
    /// Whitespace-separated token ids; replaces the seeded prompt.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<PolicyKind>>,
    #[command(flatten)]
    policy: PolicyFlags,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Internal(String),
}

impl From<dynkv::Error> for Failure {
    fn from(e: dynkv::Error) -> Self {
        match e {
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e @ (dynkv::Error::InvalidConfig(_)
            | dynkv::Error::InvalidKernel(_)
            | dynkv::Error::UnknownProfile(_)
            | dynkv::Error::InvalidPyramid(_)
            | dynkv::Error::SinkExceedsBudget { .. }
            | dynkv::Error::WindowExceedsSequence { .. }) => Failure::Usage(e.to_string()),
            e => Failure::Internal(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn read_input(path: &Path) -> CliResult<AttentionTrace> {
    let file = File::open(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    debug!("reading {}", path.display());
    trace::read_trace(&mut BufReader::new(file)).map_err(|e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            info!("writing {}", p.display());
            let f = File::create(p).map_err(|e| Failure::Internal(format!("{}: {e}", p.display())))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Internal(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Failure::Internal(e.to_string()))
}

fn trace_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "kvt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Data(format!("no .kvt files in {}", dir.display())));
    }
    Ok(files)
}

impl PolicyFlags {
    fn apply(&self, rc: &mut RunConfig) {
        let p = &mut rc.policy;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(p.policy, self.policy);
        set!(p.wt, self.wt);
        set!(p.ws, self.ws);
        set!(p.r_max, self.rmax);
        set!(p.m, self.m);
        set!(p.pool_kernel, self.kernel);
        set!(p.sink, self.sink);
        set!(p.topk_includes_heads, self.topk_heads);
        if self.pyramid_min.is_some() {
            p.pyramid_min = self.pyramid_min;
        }
        let g = &mut rc.geometry;
        set!(g.n_kv_heads, self.kv_heads);
        set!(g.head_dim, self.head_dim);
        set!(g.bytes_per_elem, self.bytes_per_elem);
    }
}

impl ModelFlags {
    fn apply(&self, rc: &mut RunConfig) {
        let m = &mut rc.model;
        if let Some(v) = self.model_layers {
            m.n_layers = v;
        }
        if let Some(v) = self.model_heads {
            m.n_query_heads = v;
        }
        if let Some(v) = self.model_kv_heads {
            m.n_kv_heads = v;
        }
        if let Some(v) = self.model_seed {
            m.seed = v;
        }
        if let Some(v) = self.prompt_len {
            rc.run.prompt_len = v;
        }
        if let Some(v) = self.prompt_seed {
            rc.run.prompt_seed = v;
        }
    }
}

fn prompt(rc: &RunConfig, tokens: Option<&Path>) -> CliResult<Vec<u32>> {
    let Some(path) = tokens else {
        return Ok(seeded_prompt(rc.run.prompt_len, rc.model.vocab, rc.run.prompt_seed));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| Failure::Data(format!("{}: bad token `{t}`", path.display()))))
        .collect()
}

fn gen_trace(a: GenTraceArgs, mut rc: RunConfig) -> CliResult {
    a.model.apply(&mut rc);
    let ws = a.ws.unwrap_or(rc.policy.ws);
    let t = if a.from_model {
        let model = Model::init_deterministic(rc.model.clone())?;
        let tokens = prompt(&rc, None)?;
        let out = model.prefill(&tokens, ws)?;
        let label = format!("toy-model seed={} prompt_seed={}", rc.model.seed, rc.run.prompt_seed);
        AttentionTrace::from_window_attention(&out.window_attention, label)
    } else {
        let name = a.profile.as_deref().ok_or_else(|| Failure::Usage("need --profile or --from-model".into()))?;
        let profile: Profile = name.parse()?;
        let mut t = synth_trace(a.layers, a.heads, a.seq_len, ws, profile, a.seed)?;
        t.task_label = format!("{profile} seed={}", a.seed);
        t
    };
    let out = a.out.as_deref().or(rc.run.out.as_deref());
    let mut w = output(out)?;
    let n = trace::write_trace(&t, &mut w)?;
    w.flush().map_err(|e| Failure::Internal(e.to_string()))?;
    info!("wrote {n} bytes ({} layers, {} heads, {} positions)", t.n_layers, t.n_heads, t.seq_len);
    Ok(())
}

#[derive(Serialize)]
struct AllocateDocument<'a> {
    format_version: &'static str,
    run_config: &'a RunConfig,
    report: BudgetReport,
}

fn allocate(a: AllocateArgs, mut rc: RunConfig) -> CliResult {
    a.policy.apply(&mut rc);
    rc.policy.policy = PolicyKind::Dynamic;
    if let Some(t) = a.trace {
        rc.run.trace = Some(t);
    }
    if let Some(o) = a.out {
        rc.run.out = Some(o);
    }
    let path = rc.run.trace.clone().ok_or_else(|| Failure::Usage("allocate needs --trace".into()))?;
    let t = read_input(&path)?;
    let outcome = run_prefill_compression(&t, &rc.policy)?;
    let report = BudgetReport::new(&t, &rc.policy, rc.geometry, &outcome);
    write_json(&AllocateDocument { format_version: FORMAT_VERSION, run_config: &rc, report }, rc.run.out.as_deref())
}

fn profile(a: ProfileArgs, mut rc: RunConfig) -> CliResult {
    if let Some(k) = a.per_layer_k {
        rc.run.per_layer_k = k;
    }
    let mut paths = a.trace;
    if paths.is_empty() {
        paths.extend(rc.run.trace.clone());
    }
    if let Some(dir) = a.trace_dir.or(rc.run.trace_dir.clone()) {
        paths.extend(trace_files(&dir)?);
    }
    if paths.is_empty() {
        return Err(Failure::Usage("profile needs --trace or --trace-dir".into()));
    }
    let traces = paths.iter().map(|p| read_input(p)).collect::<CliResult<Vec<_>>>()?;
    let prof = harness::layer_profile(&traces, rc.run.per_layer_k)?;
    let out = a.out.or(rc.run.out.clone());
    prof.write_csv(output(out.as_deref())?)?;
    Ok(())
}

#[derive(Serialize)]
struct SimulateDocument<'a> {
    format_version: &'static str,
    run_config: &'a RunConfig,
    prompt_tokens: usize,
    weights_checksum: String,
    report: harness::EvalReport,
}

fn simulate(a: SimulateArgs, mut rc: RunConfig) -> CliResult {
    a.policy.apply(&mut rc);
    a.model.apply(&mut rc);
    if let Some(s) = a.steps {
        rc.run.fidelity_steps = s;
    }
    let model = Model::init_deterministic(rc.model.clone())?;
    let tokens = prompt(&rc, a.tokens.as_deref())?;
    let out = model.prefill(&tokens, rc.policy.ws)?;
    let case = EvalCase {
        name: "toy-model".into(),
        trace: AttentionTrace::from_window_attention(&out.window_attention, "toy-model"),
        tokens: Some(tokens),
    };
    let opts = CompareOptions { geometry: rc.geometry, fidelity_steps: rc.run.fidelity_steps };
    let report = harness::evaluate(&case, &rc.policy, Some(&model), &opts);
    if let Some(e) = &report.error {
        return Err(Failure::Usage(e.clone()));
    }
    let doc = SimulateDocument {
        format_version: FORMAT_VERSION,
        run_config: &rc,
        prompt_tokens: case.trace.seq_len,
        weights_checksum: format!("{:016x}", model.weights_checksum()),
        report,
    };
    write_json(&doc, a.out.as_deref().or(rc.run.out.as_deref()))
}

fn compare(a: CompareArgs, mut rc: RunConfig) -> CliResult {
    a.policy.apply(&mut rc);
    if let Some(p) = a.policies {
        rc.run.policies = p.iter().map(ToString::to_string).collect();
    }
    if let Some(t) = a.threads {
        rc.run.threads = t;
    }
    let dir = a.trace_dir.or(rc.run.trace_dir.clone()).ok_or_else(|| Failure::Usage("compare needs --trace-dir".into()))?;
    rc.run.trace_dir = Some(dir.clone());
    let kinds = rc.run.policies.iter().map(|p| p.parse::<PolicyKind>()).collect::<Result<Vec<_>, _>>()?;
    let policies: Vec<PolicyConfig> = kinds.iter().map(|&k| rc.policy.with_policy(k)).collect();
    let cases = trace_files(&dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            read_input(&p).map(|trace| EvalCase { name, trace, tokens: None })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let opts = CompareOptions { geometry: rc.geometry, fidelity_steps: rc.run.fidelity_steps };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rc.run.threads)
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))?;
    let reports = pool.install(|| harness::compare_run(&cases, &policies, None, &opts))?;
    for r in reports.iter().filter(|r| r.error.is_some()) {
        log::warn!("{} / {}: {}", r.case, r.policy, r.error.as_deref().unwrap_or_default());
    }
    let out = a.out.or(rc.run.out.clone());
    match a.format {
        Format::Csv => harness::write_reports_csv(&reports, &opts, output(out.as_deref())?)?,
        Format::Json => write_json(
            &CompareDocument { format_version: FORMAT_VERSION, options: opts, reports: &reports },
            out.as_deref(),
        )?,
    }
    Ok(())
}

#[derive(Serialize)]
struct InspectDocument {
    format_version: &'static str,
    file: String,
    bytes: usize,
    header: TraceHeader,
    layer_mass: Vec<f64>,
}

fn inspect(a: InspectArgs) -> CliResult {
    let t = read_input(&a.path)?;
    let layer_mass = (0..t.n_layers)
        .map(|l| t.layer(l).iter().map(|&v| f64::from(v)).sum::<f64>() / t.n_heads as f64)
        .collect();
    let doc = InspectDocument {
        format_version: FORMAT_VERSION,
        file: a.path.display().to_string(),
        bytes: t.encoded_len(),
        header: t.header(),
        layer_mass,
    };
    write_json(&doc, None)
}

fn run(cli: Cli) -> CliResult {
    let rc = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Usage)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenTrace(a) => gen_trace(a, rc),
        Command::Allocate(a) => allocate(a, rc),
        Command::Profile(a) => profile(a, rc),
        Command::Simulate(a) => simulate(a, rc),
        Command::Compare(a) => compare(a, rc),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DYNKV_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(3)
        }
    }
}
