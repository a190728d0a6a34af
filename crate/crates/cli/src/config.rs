use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ngtype_core::calibrate::Threshold;
use ngtype_core::engine::ScoringConfig;
use ngtype_core::ngramdb::{DEFAULT_K, DEFAULT_PORTFOLIO};
use serde::Deserialize;

pub const CONFIG_ENV: &str = "NGTYPE_CONFIG";

#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// Threshold as written in a config file: a number or `"none"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum TauValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePaths {
    corpus: Option<PathBuf>,
    types: Option<PathBuf>,
    signatures: Option<PathBuf>,
    model_dir: Option<PathBuf>,
    manifests: Option<Vec<PathBuf>>,
    calibration: Option<PathBuf>,
    predictions: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    portfolio: Option<Vec<usize>>,
    k: Option<usize>,
    tau: Option<TauValue>,
    struct_priority: Option<bool>,
    struct_priority_margin: Option<f64>,
    weight_exponent: Option<f64>,
    min_contexts: Option<usize>,
    threads: Option<usize>,
    split: Option<String>,
    #[serde(default)]
    paths: FilePaths,
}

/// Flags shared by every command that reads or writes artifacts.
#[derive(Debug, Default, Clone, Args)]
pub struct ConfigArgs {
    /// n values of the database portfolio, comma separated
    #[arg(long, value_delimiter = ',', global = true)]
    pub portfolio: Option<Vec<usize>>,
    /// candidates kept per context
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// confidence threshold, a number in [0, 1] or `none`
    #[arg(long, global = true)]
    pub tau: Option<Threshold>,
    #[arg(long, global = true)]
    pub struct_priority: Option<bool>,
    #[arg(long, global = true)]
    pub struct_priority_margin: Option<f64>,
    #[arg(long, global = true)]
    pub weight_exponent: Option<f64>,
    #[arg(long, global = true)]
    pub min_contexts: Option<usize>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// corpus split to read input functions from (`all` for every split)
    #[arg(long, global = true)]
    pub split: Option<String>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub types: Option<PathBuf>,
    #[arg(long, global = true)]
    pub signatures: Option<PathBuf>,
    /// directory holding one manifest per bitness
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
    /// ensemble manifest; repeat for several bitnesses
    #[arg(long = "manifest", global = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[arg(short, long, global = true)]
    pub output: Option<PathBuf>,
}

/// Fully resolved settings: flags over file over defaults.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub portfolio: Vec<usize>,
    pub scoring: ScoringConfig,
    pub tau: Threshold,
    pub threads: usize,
    pub split: Option<ngtype_core::corpus::Split>,
    pub corpus: Option<PathBuf>,
    pub types: Option<PathBuf>,
    pub signatures: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub manifests: Vec<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_split(text: &str) -> Result<Option<ngtype_core::corpus::Split>> {
    use ngtype_core::corpus::Split;
    match text.to_ascii_lowercase().as_str() {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "validation" | "valid" => Ok(Some(Split::Validation)),
        "test" => Ok(Some(Split::Test)),
        other => Err(InputError(format!("unknown split `{other}`")).into()),
    }
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, args: &ConfigArgs) -> Result<Self> {
        let (fc, base) = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let fc: FileConfig = toml::from_str(&text)
                    .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
                (fc, path.parent().map(Path::to_path_buf))
            }
            None => (FileConfig::default(), None),
        };
        let rel = |p: Option<PathBuf>| -> Option<PathBuf> {
            p.map(|p| match &base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };

        let file_tau = match fc.tau {
            None => None,
            Some(TauValue::Number(t)) => Some(
                t.to_string()
                    .parse::<Threshold>()
                    .map_err(InputError)?,
            ),
            Some(TauValue::Text(s)) => Some(s.parse::<Threshold>().map_err(InputError)?),
        };
        let defaults = ScoringConfig::default();
        let scoring = ScoringConfig {
            k: args.k.or(fc.k).unwrap_or(DEFAULT_K),
            weight_exponent: args
                .weight_exponent
                .or(fc.weight_exponent)
                .unwrap_or(defaults.weight_exponent),
            struct_priority: args
                .struct_priority
                .or(fc.struct_priority)
                .unwrap_or(defaults.struct_priority),
            struct_priority_margin: args
                .struct_priority_margin
                .or(fc.struct_priority_margin)
                .unwrap_or(defaults.struct_priority_margin),
            min_contexts: args
                .min_contexts
                .or(fc.min_contexts)
                .unwrap_or(defaults.min_contexts),
        };
        scoring
            .validate()
            .map_err(|e| InputError(e.to_string()))?;

        let portfolio = args
            .portfolio
            .clone()
            .or(fc.portfolio)
            .unwrap_or_else(|| DEFAULT_PORTFOLIO.to_vec());
        if portfolio.is_empty() || portfolio[0] == 0 || portfolio.windows(2).any(|w| w[0] >= w[1]) {
            bail!(InputError(format!(
                "portfolio {portfolio:?} must be non-empty, positive and strictly increasing"
            )));
        }
        let threads = args.threads.or(fc.threads).unwrap_or_else(default_threads);
        if threads == 0 {
            bail!(InputError("thread count must be at least 1".into()));
        }
        let split = match args.split.as_deref().or(fc.split.as_deref()) {
            Some(s) => parse_split(s)?,
            None => None,
        };
        let manifests = if args.manifests.is_empty() {
            fc.paths.manifests.unwrap_or_default().into_iter().map(|p| rel(Some(p)).unwrap()).collect()
        } else {
            args.manifests.clone()
        };

        Ok(RunConfig {
            portfolio,
            scoring,
            tau: args.tau.or(file_tau).unwrap_or_default(),
            threads,
            split,
            corpus: args.corpus.clone().or(rel(fc.paths.corpus)),
            types: args.types.clone().or(rel(fc.paths.types)),
            signatures: args.signatures.clone().or(rel(fc.paths.signatures)),
            model_dir: args.model_dir.clone().or(rel(fc.paths.model_dir)),
            manifests,
            calibration: args.calibration.clone().or(rel(fc.paths.calibration)),
            predictions: args.predictions.clone().or(rel(fc.paths.predictions)),
            output: args.output.clone().or(rel(fc.paths.output)),
        })
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| InputError(format!("missing `--{flag}` (or `{}` in the config file)", flag.replace('-', "_"))).into())
    }
}
