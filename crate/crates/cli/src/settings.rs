//! Run settings: command-line flags layered over an optional `key = value`
//! config file. Flags win.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use selective_iv::density::DensityKind;
use selective_iv::inference::{AnalysisOptions, Tail};
use selective_iv::sampler::SamplerConfig;
use selective_iv::{Error, Family, PipelineOptions, Result};

/// Flat `key = value` file. Blank lines and `#` comments are ignored; keys
/// use the long flag names (`omega-scale` and `omega_scale` are the same key).
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("config line {}: expected `key = value`", i + 1)))?;
            values.insert(normalize_key(k), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidInput(format!("config key `{key}`: cannot parse `{v}`"))),
        }
    }
}

/// Options shared by the analysis commands.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Input CSV.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Test statistic: tsls-stat, tsls-est or ar.
    #[arg(long)]
    pub statistic: Option<String>,
    /// Null value beta0 for the test.
    #[arg(long = "null", allow_hyphen_values = true)]
    pub null_value: Option<f64>,
    /// Confidence level of the interval.
    #[arg(long)]
    pub level: Option<f64>,
    /// Tail of the p-value: right, left or two-sided.
    #[arg(long)]
    pub tail: Option<String>,
    /// Penalty in standardized-design units (default 2.01 sqrt(n log n)).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ridge term in standardized-design units (default 0.01).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Multiplier on the default randomization scale.
    #[arg(long)]
    pub omega_scale: Option<f64>,
    /// Randomization family: gaussian or laplace.
    #[arg(long)]
    pub omega_family: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Output file (standard output when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output format: json or csv.
    #[arg(long)]
    pub format: Option<String>,
    /// Run over a lambda grid: comma-separated values, or no value for the
    /// default 15-point grid.
    #[arg(long, num_args = 0..=1, default_missing_value = "default")]
    pub lambda_grid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::InvalidInput(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGrid {
    Default,
    Values(Vec<f64>),
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub input: PathBuf,
    pub pipeline: PipelineOptions,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub lambda_grid: Option<LambdaGrid>,
}

fn pick<T: FromStr>(flag: Option<T>, cfg: &ConfigFile, key: &str) -> Result<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => cfg.get(key),
    }
}

fn parse_grid(s: &str) -> Result<LambdaGrid> {
    if s.eq_ignore_ascii_case("default") {
        return Ok(LambdaGrid::Default);
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("lambda grid: cannot parse `{v}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(LambdaGrid::Values)
}

impl CommonArgs {
    pub fn resolve(&self, cfg: &ConfigFile) -> Result<Settings> {
        let input: PathBuf = pick(self.input.clone(), cfg, "input")?
            .ok_or_else(|| Error::InvalidInput("no input file given (--input)".into()))?;
        let kind: DensityKind = match pick(self.statistic.clone(), cfg, "statistic")? {
            Some(s) => s.parse()?,
            None => DensityKind::TslsStat,
        };
        let tail: Tail = match pick(self.tail.clone(), cfg, "tail")? {
            Some(s) => s.parse()?,
            None => Tail::Right,
        };
        let family: Family = match pick(self.omega_family.clone(), cfg, "omega-family")? {
            Some(s) => s.parse()?,
            None => Family::Gaussian,
        };
        let seed = pick(self.seed, cfg, "seed")?.unwrap_or(1);
        let defaults = SamplerConfig::default();
        let sampler = SamplerConfig {
            burnin: pick(self.burnin, cfg, "burnin")?.unwrap_or(defaults.burnin),
            samples: pick(self.samples, cfg, "samples")?.unwrap_or(defaults.samples),
            seed,
            ..defaults
        };
        let pipeline = PipelineOptions {
            lambda: pick(self.lambda, cfg, "lambda")?,
            epsilon: pick(self.epsilon, cfg, "epsilon")?,
            family,
            omega_multiplier: pick(self.omega_scale, cfg, "omega-scale")?.unwrap_or(1.0),
            seed,
            analysis: AnalysisOptions {
                kind,
                beta0: pick(self.null_value, cfg, "null")?.unwrap_or(0.0),
                level: pick(self.level, cfg, "level")?.unwrap_or(0.95),
                tail,
                sampler,
            },
        };
        pipeline.validate()?;
        let format = match pick(self.format.clone(), cfg, "format")? {
            Some(s) => s.parse()?,
            None => Format::Json,
        };
        let lambda_grid = match pick(self.lambda_grid.clone(), cfg, "lambda-grid")? {
            Some(s) => Some(parse_grid(&s)?),
            None => None,
        };
        Ok(Settings {
            input,
            pipeline,
            out: pick(self.out.clone(), cfg, "out")?,
            format,
            lambda_grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_normalizes_keys() {
        let c = ConfigFile::parse("# run\nomega_scale = 2.5\n\nSeed=7 # trailing\n").unwrap();
        assert_eq!(c.get::<f64>("omega-scale").unwrap(), Some(2.5));
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.get::<u64>("burnin").unwrap(), None);
        assert!(ConfigFile::parse("no equals sign").is_err());
    }

    #[test]
    fn flags_override_file() {
        let c = ConfigFile::parse("input = a.csv\nseed = 7\nlevel = 0.9\n").unwrap();
        let args = CommonArgs {
            seed: Some(9),
            ..Default::default()
        };
        let s = args.resolve(&c).unwrap();
        assert_eq!(s.pipeline.seed, 9);
        assert_eq!(s.pipeline.analysis.sampler.seed, 9);
        assert_eq!(s.pipeline.analysis.level, 0.9);
        assert_eq!(s.input, PathBuf::from("a.csv"));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("default").unwrap(), LambdaGrid::Default);
        assert_eq!(parse_grid("1, 2.5").unwrap(), LambdaGrid::Values(vec![1.0, 2.5]));
        assert!(parse_grid("1,x").is_err());
    }

    #[test]
    fn bad_values_are_input_errors() {
        let c = ConfigFile::parse("input = a.csv\nlevel = high\n").unwrap();
        assert!(CommonArgs::default().resolve(&c).is_err());
        let args = CommonArgs {
            input: Some("a.csv".into()),
            statistic: Some("wald".into()),
            ..Default::default()
        };
        assert!(args.resolve(&ConfigFile::default()).is_err());
    }
}
