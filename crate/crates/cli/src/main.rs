//! `selective-iv`: selective inference after randomized sisVIVE selection.

mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use selective_iv::grams::Grams;
use selective_iv::inference::InferenceResult;
use selective_iv::pipeline::{self, design_scale, LambdaRow};
use selective_iv::sim::{self, Axis, SimConfig};
use selective_iv::summary::{reconstruct_grams, SummaryData};
use selective_iv::{Error, ErrorClass, IvData, Result};

use settings::{CommonArgs, ConfigFile, Format, LambdaGrid, Settings};

const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "selective-iv", version = VERSION, about = "Selective inference for IV models after randomized sisVIVE selection")]
struct Cli {
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Individual-level analysis of a `Y,D,Z1,...,ZL` CSV.
    Analyze(CommonArgs),
    /// Analysis from per-instrument summary statistics.
    AnalyzeSummary(SummaryArgs),
    /// Randomized selection only.
    Select(SelectArgs),
    /// Replication studies on synthetic data.
    Simulate(SimArgs),
    /// Writes one synthetic dataset (individual-level or summary CSV).
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct SummaryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Effective sample size.
    #[arg(long)]
    neff: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Treat the input as summary statistics.
    #[arg(long)]
    summary: bool,
    #[arg(long)]
    neff: Option<f64>,
}

#[derive(Debug, Args)]
struct DesignArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Number of instruments.
    #[arg(long = "instruments")]
    l: Option<usize>,
    #[arg(long)]
    n_invalid: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma_valid: Option<f64>,
    #[arg(long)]
    gamma_invalid: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl DesignArgs {
    fn resolve(&self, cfg: &ConfigFile) -> Result<SimConfig> {
        let d = SimConfig::default();
        let pick = |flag: Option<f64>, key: &str, default: f64| -> Result<f64> {
            Ok(flag.or(cfg.get(key)?).unwrap_or(default))
        };
        let pick_usize = |flag: Option<usize>, key: &str, default: usize| -> Result<usize> {
            Ok(flag.or(cfg.get(key)?).unwrap_or(default))
        };
        let c = SimConfig {
            n: pick_usize(self.n, "n", d.n)?,
            l: pick_usize(self.l, "instruments", d.l)?,
            n_invalid: pick_usize(self.n_invalid, "n-invalid", d.n_invalid)?,
            beta_star: pick(self.beta, "beta", d.beta_star)?,
            alpha_invalid: pick(self.alpha, "alpha", d.alpha_invalid)?,
            gamma_valid: pick(self.gamma_valid, "gamma-valid", d.gamma_valid)?,
            gamma_invalid: pick(self.gamma_invalid, "gamma-invalid", d.gamma_invalid)?,
            rho: pick(self.rho, "rho", d.rho)?,
            seed: self.seed.or(cfg.get("seed")?).unwrap_or(d.seed),
            ..d
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct SimArgs {
    /// Study: ecdf or coverage.
    #[arg(long)]
    study: Option<String>,
    /// Grid axis: strength (common r) or invalid-ratio.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated grid values.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    statistic: Option<String>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory (tables go to standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the ECDF curves as long-format CSV.
    #[arg(long)]
    plot_data: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    design: DesignArgs,
    /// Replace the instruments by an exactly orthogonal design.
    #[arg(long)]
    orthogonal: bool,
    /// Write summary statistics instead of individual-level data.
    #[arg(long)]
    summary: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let class = e.class();
            let record = json!({"error": {"class": class_name(class), "kind": e.kind(), "message": e.to_string()}});
            println!("{record}");
            ExitCode::from(exit_code(class))
        }
    }
}

fn class_name(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Input => "input",
        ErrorClass::Numerical => "numerical",
        ErrorClass::Sampler => "sampler",
    }
}

fn exit_code(c: ErrorClass) -> u8 {
    match c {
        ErrorClass::Input => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Sampler => 4,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Analyze(args) => {
            let s = args.resolve(&cfg)?;
            let data = IvData::from_csv_path(&s.input)?;
            let grams = Grams::from_data(&data);
            analyze(&s, &grams, 1.0, "analyze", Value::Null)
        }
        Command::AnalyzeSummary(args) => {
            let s = args.common.resolve(&cfg)?;
            let n_eff = neff(args.neff, &cfg)?;
            let data = SummaryData::from_csv_path(&s.input, n_eff)?;
            let gs = reconstruct_grams(&data);
            let grams = gs.to_grams(1.0)?;
            let extra = json!({"n_eff": n_eff, "inconsistent_scale": gs.inconsistent_scale(), "dtd_spread": gs.dtd_spread});
            analyze(&s, &grams, design_scale(&grams), "analyze-summary", extra)
        }
        Command::Select(args) => {
            let s = args.common.resolve(&cfg)?;
            let (grams, kappa) = if args.summary {
                let data = SummaryData::from_csv_path(&s.input, neff(args.neff, &cfg)?)?;
                let g = reconstruct_grams(&data).to_grams(1.0)?;
                let k = design_scale(&g);
                (g, k)
            } else {
                (Grams::from_data(&IvData::from_csv_path(&s.input)?), 1.0)
            };
            let sel = pipeline::select(&grams, &s.pipeline, kappa)?;
            let doc = json!({
                "provenance": provenance(&s, &grams, kappa, "select", Value::Null)?,
                "selection": sel,
            });
            emit_json(s.out.as_deref(), &doc)
        }
        Command::Simulate(args) => simulate(args, &cfg),
        Command::Generate(args) => generate(args, &cfg),
    }
}

fn neff(flag: Option<f64>, cfg: &ConfigFile) -> Result<f64> {
    flag.or(cfg.get("neff")?)
        .ok_or_else(|| Error::InvalidInput("summary input needs an effective sample size (--neff)".into()))
}

fn provenance(s: &Settings, grams: &Grams, kappa: f64, command: &str, extra: Value) -> Result<Value> {
    let p = &s.pipeline;
    let tuning = p.tuning(grams, kappa)?;
    let rand = p.randomization(grams)?;
    let a = &p.analysis;
    Ok(json!({
        "version": VERSION,
        "command": command,
        "input": s.input.display().to_string(),
        "statistic": a.kind.name(),
        "null": a.beta0,
        "level": a.level,
        "tail": a.tail,
        "lambda_nominal": p.lambda,
        "epsilon_nominal": p.epsilon,
        "lambda": tuning.lambda,
        "epsilon": tuning.epsilon,
        "design_scale": kappa,
        "omega_family": rand.family,
        "omega_multiplier": p.omega_multiplier,
        "omega_scale": rand.scale,
        "seed": p.seed,
        "burnin": a.sampler.burnin,
        "samples": a.sampler.samples,
        "shear": a.sampler.shear,
        "extra": extra,
    }))
}

fn analyze(s: &Settings, grams: &Grams, kappa: f64, command: &str, extra: Value) -> Result<()> {
    let prov = provenance(s, grams, kappa, command, extra)?;
    if let Some(grid) = &s.lambda_grid {
        let values = match grid {
            LambdaGrid::Default => None,
            LambdaGrid::Values(v) => Some(v.as_slice()),
        };
        let rows = pipeline::lambda_sensitivity(grams, &s.pipeline, kappa, values)?;
        return match s.format {
            Format::Json => emit_json(s.out.as_deref(), &json!({"provenance": prov, "rows": rows})),
            Format::Csv => emit(s.out.as_deref(), &grid_csv(&rows)?),
        };
    }
    let result = pipeline::analyze_grams(grams, &s.pipeline, kappa)?;
    match s.format {
        Format::Json => emit_json(s.out.as_deref(), &json!({
            "provenance": prov,
            "E": result.selection.set.indices(),
            "signs": result.selection.signs,
            "pvalue": result.pvalue,
            "ci": [result.ci.lower, result.ci.upper],
            "naive_ci": [result.naive.lower, result.naive.upper],
            "result": result,
        })),
        Format::Csv => emit(s.out.as_deref(), &result_csv(&result)?),
    }
}

fn join_indices(v: &[usize]) -> String {
    v.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(";")
}

fn result_csv(r: &InferenceResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "statistic", "beta0", "pvalue", "naive_pvalue", "beta_tsls", "ci_lower", "ci_upper", "naive_lower",
        "naive_upper", "level", "selected", "lambda", "epsilon",
    ])?;
    w.write_record([
        r.statistic.name().to_string(),
        r.beta0.to_string(),
        r.pvalue.to_string(),
        r.naive_pvalue.to_string(),
        r.beta_tsls.to_string(),
        r.ci.lower.to_string(),
        r.ci.upper.to_string(),
        r.naive.lower.to_string(),
        r.naive.upper.to_string(),
        r.ci.level.to_string(),
        join_indices(r.selection.set.indices()),
        r.selection.tuning.lambda.to_string(),
        r.selection.tuning.epsilon.to_string(),
    ])?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn grid_csv(rows: &[LambdaRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "lambda", "n_selected", "selected", "beta_tsls", "cond_lower", "cond_upper", "naive_lower", "naive_upper", "error",
    ])?;
    for r in rows {
        let bound = |f: fn(&selective_iv::inference::SelectiveInterval) -> f64| {
            r.conditional.as_ref().map(f).map(|v| v.to_string()).unwrap_or_default()
        };
        w.write_record([
            r.lambda.to_string(),
            r.selected.len().to_string(),
            join_indices(&r.selected),
            r.beta_tsls.to_string(),
            bound(|c| c.lower),
            bound(|c| c.upper),
            r.naive.lower.to_string(),
            r.naive.upper.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn emit_json(out: Option<&Path>, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    emit(out, s.as_bytes())
}

fn simulate(args: &SimArgs, cfg: &ConfigFile) -> Result<()> {
    let mut design = args.design.resolve(cfg)?;
    design.replications = args.reps.or(cfg.get("reps")?).unwrap_or(design.replications);
    let study: String = args.study.clone().or(cfg.get("study")?).unwrap_or_else(|| "ecdf".into());
    let axis: Axis = match args.axis.clone().or(cfg.get("axis")?) {
        Some(a) => a.parse()?,
        None => Axis::Strength,
    };
    let grid: Vec<f64> = match args.grid.clone().or(cfg.get("grid")?) {
        Some(g) => g
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::InvalidInput(format!("grid: cannot parse `{v}`"))))
            .collect::<Result<_>>()?,
        None => vec![0.25, 1.0, 2.5],
    };
    let common = CommonArgs {
        input: Some(PathBuf::from("-")),
        statistic: args.statistic.clone(),
        level: args.level,
        burnin: args.burnin,
        samples: args.samples,
        seed: Some(design.seed),
        ..Default::default()
    };
    let opts = common.resolve(cfg)?.pipeline;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
    }
    let target = |name: &str| args.out.as_ref().map(|d| d.join(name));
    match study.as_str() {
        "ecdf" => {
            let rows = sim::ecdf_study(&design, &opts, axis, &grid)?;
            let mut buf = Vec::new();
            sim::write_ecdf_csv(&mut buf, &rows)?;
            emit(target("ecdf.csv").as_deref(), &buf)?;
            if args.plot_data {
                let mut buf = Vec::new();
                sim::write_ecdf_curves_csv(&mut buf, &rows)?;
                emit(target("ecdf_curves.csv").as_deref(), &buf)?;
            }
        }
        "coverage" => {
            let rows = sim::coverage_study(&design, &opts, axis, &grid)?;
            let mut buf = Vec::new();
            sim::write_rows_csv(&mut buf, &rows)?;
            emit(target("coverage.csv").as_deref(), &buf)?;
        }
        other => return Err(Error::InvalidInput(format!("unknown study `{other}` (ecdf or coverage)"))),
    }
    Ok(())
}

fn generate(args: &GenerateArgs, cfg: &ConfigFile) -> Result<()> {
    let design = args.design.resolve(cfg)?;
    let mut rng = sim::replication_rng(design.seed, 0);
    let (data, _) = if args.orthogonal {
        sim::generate_orthogonal(&design, &mut rng)?
    } else {
        sim::generate(&design, &mut rng)?
    };
    let mut buf = Vec::new();
    if args.summary {
        SummaryData::from_individual(&data)?.write_csv(&mut buf)?;
    } else {
        data.write_csv(&mut buf)?;
    }
    emit(args.out.as_deref(), &buf)
}
