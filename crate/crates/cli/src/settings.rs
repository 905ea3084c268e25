//! Flag / config-file settings and their resolution into an effective run
//! configuration.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use neuraldb::eval::Mode;
use neuraldb::kvdb::DEFAULT_GAMMA;
use neuraldb::model::{EditConfig, LayerEditMethod, PrefixSpec};
use neuraldb::solvers::DEFAULT_BETA;
use neuraldb::tensor::DEFAULT_EPS_RANK;
use neuraldb::{Exec, ResidualFitConfig, ToyConfig};

use crate::failure::Failure;

pub const OUT_ENV: &str = "NEURALDB_OUT";
pub const DEFAULT_OUT: &str = "neuraldb-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Neuraldb,
    Memit,
    Alphaedit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Old,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    Preference,
    Top1,
}

impl From<MetricMode> for Mode {
    fn from(m: MetricMode) -> Mode {
        match m {
            MetricMode::Preference => Mode::Preference,
            MetricMode::Top1 => Mode::Top1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CrudOp {
    Stats,
    Insert,
    Update,
    Remove,
}

/// Every setting, as given on the command line or in a TOML file. Keys in
/// the file use the flag names (`model-seed`, not `model_seed`).
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// TOML file with defaults for any of the other flags
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Output directory [default: $NEURALDB_OUT, else ./neuraldb-out]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Seed for synthetic facts, residual fitting and preserved keys [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Cap on worker threads [default: all cores]
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Toy model checkpoint; without it a fresh toy model is built from --model-seed
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,

    /// Seed of the fresh toy model [default: 42]
    #[arg(long)]
    pub model_seed: Option<u64>,

    /// Fact file, one JSON record per line
    #[arg(long, value_name = "FILE", conflicts_with = "synth")]
    pub facts: Option<PathBuf>,

    /// Generate N synthetic facts from the model instead of reading a file
    #[arg(long, value_name = "N")]
    pub synth: Option<usize>,

    /// Editing method [default: neuraldb]
    #[arg(long, value_enum)]
    pub method: Option<Method>,

    /// Retrieval gate threshold (neuraldb) [default: 0.65]
    #[arg(long)]
    pub gamma: Option<f64>,

    /// Preservation weight (memit, alphaedit) [default: 1.0]
    #[arg(long)]
    pub beta: Option<f64>,

    /// Edited layers, comma separated and ascending [default: the middle layer]
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,

    /// Multi-layer scheme when several layers are edited [default: old]
    #[arg(long, value_enum)]
    pub scheme: Option<Scheme>,

    /// Number of synthetic preserved keys (memit, alphaedit) [default: 64]
    #[arg(long)]
    pub preserve: Option<usize>,

    /// Residual optimisation steps per fact [default: 100]
    #[arg(long)]
    pub steps: Option<usize>,

    /// Success criterion of the metrics [default: top1]
    #[arg(long, value_enum)]
    pub mode: Option<MetricMode>,

    /// Database file (query, crud)
    #[arg(long, value_name = "FILE")]
    pub db: Option<PathBuf>,

    /// Maintenance operation (crud) [default: stats]
    #[arg(long, value_enum)]
    pub op: Option<CrudOp>,

    /// Fact ids to remove (crud --op remove)
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<u64>>,

    /// Database sizes to benchmark (bench) [default: 1000,2000,4000]
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,

    /// Key width of benchmark databases [default: 128]
    #[arg(long)]
    pub d1: Option<usize>,

    /// Residual width of benchmark databases [default: 64]
    #[arg(long)]
    pub d2: Option<usize>,

    /// Timed queries per benchmark size [default: 200]
    #[arg(long)]
    pub queries: Option<usize>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Settings { config: $hi.config, $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl Settings {
    /// Reads the `--config` file, if any, and lays the flags over it.
    pub fn with_config_file(self) -> Result<Settings, Failure> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let file: Settings = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("config {}: {}", path.display(), e.message())))?;
        if file.facts.is_some() && file.synth.is_some() {
            return Err(Failure::config("config sets both facts and synth"));
        }
        // the fact source is taken as a whole from the higher layer
        let mut file = file;
        if self.facts.is_some() || self.synth.is_some() {
            file.facts = None;
            file.synth = None;
        }
        Ok(overlay!(
            self, file, out, seed, jobs, model, model_seed, facts, synth, method, gamma, beta, layers, scheme,
            preserve, steps, mode, db, op, ids, sizes, d1, d2, queries
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    BuildDb,
    Edit,
    Query,
    Eval,
    Diagnose,
    Bench,
    Crud,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::BuildDb => "build-db",
            Command::Edit => "edit",
            Command::Query => "query",
            Command::Eval => "eval",
            Command::Diagnose => "diagnose",
            Command::Bench => "bench",
            Command::Crud => "crud",
        }
    }

    fn edits(self) -> bool {
        matches!(self, Command::BuildDb | Command::Edit | Command::Eval | Command::Diagnose)
    }

    fn uses_model(self) -> bool {
        self != Command::Bench
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Toy(ToyConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FactSource {
    File(PathBuf),
    Synth { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EditPlan {
    /// `None` means the model's middle layer, resolved once the model is loaded.
    pub layers: Option<Vec<usize>>,
    pub scheme: Option<Scheme>,
    pub config: EditConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPlan {
    pub sizes: Vec<usize>,
    pub d1: usize,
    pub d2: usize,
    pub queries: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrudPlan {
    pub op: CrudOp,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ids: Vec<u64>,
    pub fit: Option<ResidualFitConfig>,
}

/// The effective configuration of one run. Everything that can influence
/// the outputs is here and is echoed into the manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub facts: Option<FactSource>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub db: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crud: Option<CrudPlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchPlan>,
}

/// Rejects command-line flags that have no effect on `cmd`. Only flags are
/// checked: a shared config file may carry settings for other commands.
pub fn check_flags(cmd: Command, flags: &Settings, method: Option<Method>) -> Result<(), Failure> {
    use Command::*;
    let edits = cmd.edits();
    let method = method.unwrap_or(Method::Neuraldb);
    let linear = method != Method::Neuraldb;
    let applicable = [
        ("model", flags.model.is_some(), cmd.uses_model()),
        ("model-seed", flags.model_seed.is_some(), cmd.uses_model()),
        ("facts", flags.facts.is_some(), edits || matches!(cmd, Query | Crud)),
        ("synth", flags.synth.is_some(), edits || matches!(cmd, Query | Crud)),
        ("method", flags.method.is_some(), edits),
        ("gamma", flags.gamma.is_some(), edits && !linear),
        ("beta", flags.beta.is_some(), edits && linear),
        ("preserve", flags.preserve.is_some(), edits && linear),
        ("layers", flags.layers.is_some(), edits),
        ("scheme", flags.scheme.is_some(), edits),
        ("steps", flags.steps.is_some(), edits || cmd == Crud),
        ("mode", flags.mode.is_some(), cmd == Eval),
        ("db", flags.db.is_some(), matches!(cmd, Query | Crud)),
        ("op", flags.op.is_some(), cmd == Crud),
        ("ids", flags.ids.is_some(), cmd == Crud),
        ("sizes", flags.sizes.is_some(), cmd == Bench),
        ("d1", flags.d1.is_some(), cmd == Bench),
        ("d2", flags.d2.is_some(), cmd == Bench),
        ("queries", flags.queries.is_some(), cmd == Bench),
    ];
    for (name, given, applies) in applicable {
        if given && !applies {
            let target = if edits && matches!(name, "gamma" | "beta" | "preserve") {
                format!("{} --method {}", cmd.name(), format!("{method:?}").to_lowercase())
            } else {
                cmd.name().to_string()
            };
            return Err(Failure::config(format!("--{name} does not apply to {target}")));
        }
    }
    Ok(())
}

fn fit_config(s: &Settings, seed: u64) -> Result<ResidualFitConfig, Failure> {
    let fit = ResidualFitConfig {
        steps: s.steps.unwrap_or(ResidualFitConfig::default().steps),
        seed,
        ..ResidualFitConfig::default()
    };
    fit.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(fit)
}

fn required(path: &Option<PathBuf>, what: &str, cmd: Command) -> Result<PathBuf, Failure> {
    path.clone()
        .ok_or_else(|| Failure::config(format!("{} needs --{what}", cmd.name())))
}

fn check_file(path: &Path, what: &str) -> Result<(), Failure> {
    if !path.is_file() {
        return Err(Failure::config(format!("{what} file {} does not exist", path.display())));
    }
    Ok(())
}

/// Validates the merged settings for `cmd` and fills in defaults. Nothing
/// is read or written besides checking that input files exist.
pub fn resolve(cmd: Command, s: &Settings, env_out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let seed = s.seed.unwrap_or(0);
    let out = s.out.clone().or(env_out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    if s.jobs == Some(0) {
        return Err(Failure::config("--jobs must be >= 1"));
    }

    let model = if cmd.uses_model() {
        Some(match &s.model {
            Some(path) => {
                if s.model_seed.is_some() {
                    return Err(Failure::config("--model-seed conflicts with --model"));
                }
                check_file(path, "model")?;
                ModelSource::Checkpoint(path.clone())
            }
            None => ModelSource::Toy(ToyConfig {
                seed: s.model_seed.unwrap_or(ToyConfig::default().seed),
                ..ToyConfig::default()
            }),
        })
    } else {
        None
    };

    let needs_facts = cmd.edits() || cmd == Command::Query || matches!(s.op, Some(CrudOp::Insert | CrudOp::Update));
    let facts = match (&s.facts, s.synth) {
        (Some(_), Some(_)) => return Err(Failure::config("give exactly one of --facts and --synth")),
        (Some(path), None) => {
            check_file(path, "fact")?;
            Some(FactSource::File(path.clone()))
        }
        (None, Some(0)) => return Err(Failure::config("--synth must be >= 1")),
        (None, Some(count)) => Some(FactSource::Synth { count, seed }),
        (None, None) => None,
    };
    if needs_facts && facts.is_none() {
        return Err(Failure::config(format!("{} needs --facts or --synth", cmd.name())));
    }
    let facts = if needs_facts { facts } else { None };

    let edit = if cmd.edits() {
        let method = s.method.unwrap_or(Method::Neuraldb);
        if cmd == Command::BuildDb && method != Method::Neuraldb {
            return Err(Failure::config("build-db only supports --method neuraldb"));
        }
        if let Some(g) = s.gamma {
            if !(-1.0..=1.0).contains(&g) {
                return Err(Failure::config(format!("--gamma must lie in [-1, 1], got {g}")));
            }
        }
        let beta = s.beta.unwrap_or(DEFAULT_BETA);
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Failure::config(format!("--beta must be positive, got {beta}")));
        }
        let preserve = s.preserve.unwrap_or(64);
        let method = match method {
            Method::Neuraldb => LayerEditMethod::NeuralDb {
                gamma: s.gamma.unwrap_or(DEFAULT_GAMMA),
            },
            Method::Memit => LayerEditMethod::Memit { beta, preserve },
            Method::Alphaedit => LayerEditMethod::AlphaEdit {
                beta,
                preserve,
                eps_rank: DEFAULT_EPS_RANK,
            },
        };
        if let Some(layers) = &s.layers {
            if layers.is_empty() || layers.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Failure::config(format!("--layers must be non-empty and ascending, got {layers:?}")));
            }
            if layers.len() > 1 && matches!(cmd, Command::BuildDb | Command::Diagnose) {
                return Err(Failure::config(format!("{} edits a single layer", cmd.name())));
            }
        }
        let several = s.layers.as_ref().is_some_and(|l| l.len() > 1);
        if s.scheme.is_some() && !several {
            return Err(Failure::config("--scheme needs more than one layer"));
        }
        Some(EditPlan {
            layers: s.layers.clone(),
            scheme: several.then(|| s.scheme.unwrap_or(Scheme::Old)),
            config: EditConfig {
                method,
                fit: fit_config(s, seed)?,
                key_prefixes: PrefixSpec::EXACT,
                preserve_seed: seed,
                exec: Exec::Parallel,
            },
        })
    } else {
        None
    };

    let mode = (cmd == Command::Eval).then(|| s.mode.unwrap_or(MetricMode::Top1).into());

    let db = match cmd {
        Command::Query | Command::Crud => {
            let db = required(&s.db, "db", cmd)?;
            check_file(&db, "database")?;
            Some(db)
        }
        _ => None,
    };

    let crud = if cmd == Command::Crud {
        let op = s.op.unwrap_or(CrudOp::Stats);
        let ids = s.ids.clone().unwrap_or_default();
        if op == CrudOp::Remove && ids.is_empty() {
            return Err(Failure::config("crud --op remove needs --ids"));
        }
        if op != CrudOp::Remove && !ids.is_empty() {
            return Err(Failure::config("--ids only applies to crud --op remove"));
        }
        let fit = matches!(op, CrudOp::Insert | CrudOp::Update)
            .then(|| fit_config(s, seed))
            .transpose()?;
        Some(CrudPlan { op, ids, fit })
    } else {
        None
    };

    let bench = if cmd == Command::Bench {
        let plan = BenchPlan {
            sizes: s.sizes.clone().unwrap_or_else(|| vec![1_000, 2_000, 4_000]),
            d1: s.d1.unwrap_or(128),
            d2: s.d2.unwrap_or(64),
            queries: s.queries.unwrap_or(200),
            seed,
        };
        if plan.sizes.is_empty() || plan.sizes.contains(&0) || plan.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Failure::config(format!("--sizes must be positive and ascending, got {:?}", plan.sizes)));
        }
        if plan.d1 == 0 || plan.d2 == 0 || plan.queries == 0 {
            return Err(Failure::config("--d1, --d2 and --queries must be >= 1"));
        }
        Some(plan)
    } else {
        None
    };

    Ok(RunConfig {
        command: cmd.name(),
        out,
        jobs: s.jobs,
        model,
        facts,
        edit,
        mode,
        db,
        crud,
        bench,
    })
}
