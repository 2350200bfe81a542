use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};
use sphereflow::dynamics::DynamicsKind;
use sphereflow::harness::scenario::Init;
use sphereflow::harness::verify::verify_all;
use sphereflow::harness::{run_scenario, sweep, ExperimentSpec, Scenario, SweepGrid, SweepParameter, VerifySizes};
use sphereflow::thresholds::threshold_set;
use sphereflow::Error;

const EXIT_VERIFY_FAILED: u8 = 2;
const REPORT_FILE: &str = "verification.json";

#[derive(Debug, Parser)]
#[command(name = "sphereflow", version, about = "Multi-head attention dynamics on the sphere")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write its CSV tables and manifest.
    #[command(allow_negative_numbers = true)]
    Simulate {
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run the property suite and write a JSON report.
    Verify(VerifyArgs),
    /// Print c*, beta*, lambda* and lambda_c.
    #[command(allow_negative_numbers = true)]
    Thresholds(ThresholdArgs),
    /// Run a scenario over a grid of one parameter.
    #[command(allow_negative_numbers = true)]
    Sweep {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        spec: SpecArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "SPHEREFLOW_OUT_DIR", default_value = "sphereflow-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SpecArgs {
    /// JSON experiment spec; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Number of heads; defaults to the number of --lambda values when those are given.
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// Head strengths, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    sample_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// flat, sphere, normalized, head-normalized or relu-sphere.
    #[arg(long, alias = "dynamics")]
    kind: Option<DynamicsKind>,
    /// random, equiangular or orthonormal.
    #[arg(long, value_parser = parse_init)]
    init: Option<Init>,
    /// Tables to emit, comma separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    outputs: Option<Vec<String>>,
}

fn parse_init(s: &str) -> Result<Init, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown init '{s}'"))
}

#[derive(Debug, Args)]
struct GridArgs {
    /// d, total-strength, beta or gamma0.
    #[arg(long)]
    parameter: SweepParameter,
    /// Explicit grid values, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["from", "to", "count"])]
    values: Option<Vec<f64>>,
    #[arg(long, requires_all = ["to", "count"])]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random states per randomized check.
    #[arg(long, default_value_t = 100)]
    states: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Judge every check against this tolerance instead of its own.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Directory for the JSON report.
    #[arg(long, env = "SPHEREFLOW_OUT_DIR", default_value = "sphereflow-out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Scalar head strength alpha in M_h = alpha I.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec, Error> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::SpecValidation(vec![format!("config: cannot read {}: {e}", path.display())]))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::SpecValidation(vec![format!("config: {}: {e}", path.display())]))?;
            layers.push(v);
        }
        layers.push(self.overrides());
        ExperimentSpec::from_layers(&layers)
    }

    fn overrides(&self) -> Value {
        let mut p = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                p.insert(k.into(), v);
            }
        };
        put("n", self.n.map(Value::from));
        put("d", self.d.map(Value::from));
        put("heads", self.heads.or(self.lambda.as_ref().map(Vec::len)).map(Value::from));
        put("beta", self.beta.map(Value::from));
        put("lambdas", self.lambda.clone().map(Value::from));
        put("gamma0", self.gamma0.map(Value::from));
        put("dt", self.dt.map(Value::from));
        put("t_end", self.t_end.map(Value::from));
        put("sample_every", self.sample_every.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("dynamics", self.kind.map(|k| json!(k)));
        put("init", self.init.map(|i| json!(i)));
        let mut layer = json!({ "parameters": p });
        if let Some(s) = self.scenario {
            layer["scenario"] = json!(s);
        }
        if let Some(o) = &self.outputs {
            layer["outputs"] = json!(o);
        }
        layer
    }
}

impl GridArgs {
    fn grid(&self) -> SweepGrid {
        match (&self.values, self.from, self.to, self.count) {
            (Some(v), ..) => SweepGrid::new(self.parameter, v.clone()),
            (None, Some(a), Some(b), Some(k)) => SweepGrid::linear(self.parameter, a, b, k),
            _ => SweepGrid::new(self.parameter, Vec::new()),
        }
    }
}

fn print_files(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn simulate(spec: &SpecArgs, out: &OutArgs) -> Result<ExitCode, Error> {
    let spec = spec.resolve()?;
    let result = run_scenario(&spec)?;
    println!("scenario {}", spec.scenario);
    for (k, v) in &result.summary {
        println!("{k} = {v:?}");
    }
    for note in &result.notes {
        println!("note: {note}");
    }
    print_files(&result.write_to(&out.out_dir)?);
    Ok(ExitCode::SUCCESS)
}

fn run_sweep(grid: &GridArgs, spec: &SpecArgs, out: &OutArgs) -> Result<ExitCode, Error> {
    let spec = spec.resolve()?;
    let result = sweep(&spec, &grid.grid())?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "sweep of {} over {} points of {}; {failed} failed",
        spec.scenario,
        result.rows.len(),
        grid.parameter.name()
    );
    for r in &result.rows {
        if let Some(e) = &r.error {
            println!("{} = {}: {e}", grid.parameter.name(), r.value);
        }
    }
    print_files(&result.write_to(&out.out_dir)?);
    Ok(ExitCode::SUCCESS)
}

fn verify(args: &VerifyArgs) -> Result<ExitCode, Error> {
    let sizes = VerifySizes { states: args.states, n: args.n, d: args.d, heads: args.heads };
    let mut report = verify_all(args.seed, sizes)?;
    if let Some(t) = args.tolerance {
        report = report.with_tolerance(t);
    }
    for c in &report.checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        match &c.error {
            Some(e) => println!("{tag} {:<28} error: {e}", c.name),
            None => println!("{tag} {:<28} residual {:.3e} <= {:.1e}", c.name, c.residual, c.tolerance),
        }
    }
    let s = &report.summary;
    println!("{} of {} checks passed", s.passed, s.total);
    if let Some((name, r)) = &s.worst {
        println!("worst: {name} ({r:.3e})");
    }
    fs::create_dir_all(&args.out_dir)?;
    let path = args.out_dir.join(REPORT_FILE);
    fs::write(&path, report.to_json()? + "\n")?;
    print_files(&[path]);
    Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY_FAILED) })
}

fn thresholds(args: &ThresholdArgs) -> Result<ExitCode, Error> {
    let t = threshold_set(args.heads, args.n, args.beta, args.alpha)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&t)?);
        return Ok(ExitCode::SUCCESS);
    }
    println!("H = {}, n = {}, beta = {}, alpha = {}", t.head_count, t.n, t.beta, t.alpha);
    println!("c*      = {:.12}", t.critical_alignment);
    match t.critical_beta {
        Some(b) => println!("beta*   = {b:.12}"),
        None if t.head_count < 2 => println!("beta*   = undefined for a single head"),
        None => println!("beta*   = infeasible (n <= 1/c*^2 = {:.6})", 1.0 / t.critical_alignment.powi(2)),
    }
    println!("lambda* = {:.12}  (lambda* beta = {:.12})", t.optimal_strength, t.optimal_strength * t.beta);
    println!("lambda_c = {:.12}", t.inflection_strength);
    Ok(ExitCode::SUCCESS)
}

fn ensure_writable(dir: &Path) -> Result<(), Error> {
    if dir.exists() && !dir.is_dir() {
        return Err(Error::SpecValidation(vec![format!("out-dir: {} is not a directory", dir.display())]));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate { spec, out } => ensure_writable(&out.out_dir).and_then(|_| simulate(spec, out)),
        Command::Verify(args) => ensure_writable(&args.out_dir).and_then(|_| verify(args)),
        Command::Thresholds(args) => thresholds(args),
        Command::Sweep { grid, spec, out } => ensure_writable(&out.out_dir).and_then(|_| run_sweep(grid, spec, out)),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
