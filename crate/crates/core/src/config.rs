//! Experiment configuration files.
//!
//! TOML with four sections, all optional:
//!
//! ```toml
//! [experiment]
//! paradigm = ["dfl", "fl"]      # scalar or list: dfl | fl | centralized
//! scheme = "balanced"           # scalar or list: balanced | unbalanced | none
//! n_nodes = 16
//! alpha = 0.95                  # scalar or list
//! p = [0.0, 0.5, 0.9]           # scalar or list
//! rounds = 150
//! seeds = [[1, 101], [2, 102]]  # [graph, run] pairs, or plain integers
//!
//! [data]
//! mnist_dir = "data/mnist"
//! subset_fraction = 0.25
//!
//! [train]
//! lr = 0.001
//!
//! [model]
//! preset = "mlp_small"
//! ```
//!
//! Validation reports every problem at once, each tagged with its key.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};

use crate::corruption::CorruptionMode;
use crate::dataset::NUM_CLASSES;
use crate::localtrain::TrainConfig;
use crate::neuralnet::ArchitectureConfig;
use crate::scenario::{CheckpointPlan, Execution, Paradigm, Replicate, Scenario, Scheme};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`: {}", self.key, self.message)
    }
}

fn join_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid override `{0}` (expected section.key=value)")]
    Override(String),
    #[error("invalid configuration:\n{}", join_issues(.0))]
    Invalid(Vec<Issue>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
    }
}

/// One sweep cell: a curve in the output charts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub paradigm: Paradigm,
    pub scheme: Scheme,
    pub alpha: f64,
    pub p: f64,
}

impl Cell {
    /// File-name stem, e.g. `dfl_balanced_a0.95_p0.9`.
    pub fn stem(&self) -> String {
        format!(
            "{}_{}_a{}_p{}",
            self.paradigm, self.scheme, self.alpha, self.p
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub paradigms: Vec<Paradigm>,
    pub schemes: Vec<Scheme>,
    pub n_nodes: usize,
    pub alphas: Vec<f64>,
    pub ps: Vec<f64>,
    pub target_class: u8,
    pub collateral_class: u8,
    pub mode: CorruptionMode,
    pub rounds: usize,
    pub seeds: Vec<Replicate>,
    pub eval_every: usize,
    /// 0 lets the thread pool pick; 1 runs serially.
    pub threads: usize,
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub write_manifests: bool,
    pub data: DataPaths,
    pub subset_fraction: f64,
    pub subset_seed: u64,
    pub train: TrainConfig,
    pub arch: ArchitectureConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            paradigms: vec![Paradigm::Dfl],
            schemes: vec![Scheme::None],
            n_nodes: 50,
            alphas: vec![0.95],
            ps: vec![0.0],
            target_class: 9,
            collateral_class: 4,
            mode: CorruptionMode::PixelInterpolation,
            rounds: 1000,
            seeds: vec![Replicate { graph: 1, run: 1 }],
            eval_every: 1,
            threads: 0,
            checkpoint_every: 0,
            output_dir: PathBuf::from("results"),
            write_manifests: false,
            data: DataPaths::in_dir(Path::new("data/mnist")),
            subset_fraction: 1.0,
            subset_seed: 0,
            train: TrainConfig::default(),
            arch: ArchitectureConfig::compact_cnn(),
        }
    }
}

impl ExperimentConfig {
    /// Sweep cells in declaration order. A `none` scheme contributes a single
    /// uncorrupted cell per paradigm.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &paradigm in &self.paradigms {
            for &scheme in &self.schemes {
                if scheme == Scheme::None {
                    out.push(Cell {
                        paradigm,
                        scheme,
                        alpha: 0.0,
                        p: 0.0,
                    });
                    continue;
                }
                for &alpha in &self.alphas {
                    for &p in &self.ps {
                        out.push(Cell {
                            paradigm,
                            scheme,
                            alpha,
                            p,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn execution(&self) -> Execution {
        if self.threads == 1 {
            Execution::Serial
        } else {
            Execution::Parallel
        }
    }

    pub fn scenario(&self, cell: &Cell, replicate: Replicate) -> Scenario {
        Scenario {
            paradigm: cell.paradigm,
            scheme: cell.scheme,
            n_nodes: self.n_nodes,
            alpha: cell.alpha,
            p: cell.p,
            target_class: self.target_class,
            collateral_class: self.collateral_class,
            mode: self.mode,
            replicate,
            rounds: self.rounds,
            train: self.train,
            arch: self.arch,
            eval_every: self.eval_every,
            execution: self.execution(),
            checkpoints: (self.checkpoint_every > 0).then(|| CheckpointPlan {
                dir: self.output_dir.join("checkpoints").join(cell.stem()),
                every: self.checkpoint_every,
            }),
        }
    }
}

/// Reads, overrides and validates a configuration file.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, overrides).map_err(|e| match e {
        ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(&table)
}

/// `section.key=value`; the value is read as TOML, falling back to a bare string.
fn apply_override(table: &mut Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError::Override(spec.into()))?;
    if section.is_empty() || field.is_empty() || field.contains('.') {
        return Err(ConfigError::Override(spec.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let sect = table
        .entry(section.to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    match sect {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::Override(spec.into())),
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "experiment",
        &[
            "paradigm",
            "scheme",
            "n_nodes",
            "alpha",
            "p",
            "target_class",
            "collateral_class",
            "corruption_mode",
            "rounds",
            "seeds",
            "eval_every",
            "threads",
            "checkpoint_every",
            "output_dir",
            "write_manifests",
        ],
    ),
    (
        "data",
        &[
            "mnist_dir",
            "train_images",
            "train_labels",
            "test_images",
            "test_labels",
            "subset_fraction",
            "subset_seed",
        ],
    ),
    (
        "train",
        &[
            "max_local_epochs",
            "batch_size",
            "lr",
            "momentum",
            "early_stop_patience",
            "val_fraction",
        ],
    ),
    (
        "model",
        &[
            "preset",
            "conv1_channels",
            "conv2_channels",
            "kernel",
            "fc1_units",
            "conv_dropout",
            "fc_dropout",
            "hidden_units",
            "dropout",
        ],
    ),
];

/// Typed reads from one section, recording issues instead of failing.
struct Reader<'a> {
    section: &'a str,
    table: Option<&'a Table>,
    issues: &'a mut Vec<Issue>,
}

impl<'a> Reader<'a> {
    fn key(&self, k: &str) -> String {
        format!("{}.{k}", self.section)
    }

    fn issue(&mut self, k: &str, message: impl Into<String>) {
        let key = self.key(k);
        self.issues.push(Issue {
            key,
            message: message.into(),
        });
    }

    fn raw(&self, k: &str) -> Option<&'a Value> {
        self.table.and_then(|t| t.get(k))
    }

    fn float_of(v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        }
    }

    fn float(&mut self, k: &str, default: f64) -> f64 {
        match self.raw(k) {
            None => default,
            Some(v) => Self::float_of(v).unwrap_or_else(|| {
                self.issue(k, format!("expected a number, got {v}"));
                default
            }),
        }
    }

    fn uint(&mut self, k: &str, default: u64) -> u64 {
        match self.raw(k) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => {
                self.issue(k, format!("expected a non-negative integer, got {v}"));
                default
            }
        }
    }

    fn usize(&mut self, k: &str, default: usize) -> usize {
        self.uint(k, default as u64) as usize
    }

    fn boolean(&mut self, k: &str, default: bool) -> bool {
        match self.raw(k) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.issue(k, format!("expected true or false, got {v}"));
                default
            }
        }
    }

    fn string(&mut self, k: &str) -> Option<&'a str> {
        match self.raw(k) {
            None => None,
            Some(Value::String(s)) => Some(s),
            Some(v) => {
                self.issue(k, format!("expected a string, got {v}"));
                None
            }
        }
    }

    fn keyword<T: std::str::FromStr<Err = String>>(&mut self, k: &str, default: T) -> T {
        match self.string(k).map(str::parse) {
            None => default,
            Some(Ok(v)) => v,
            Some(Err(msg)) => {
                self.issue(k, msg);
                default
            }
        }
    }

    /// A scalar or a non-empty list of scalars, each read by `one`.
    fn list<T>(
        &mut self,
        k: &str,
        default: Vec<T>,
        one: impl Fn(&Value) -> Result<T, String>,
    ) -> Vec<T> {
        let items: Vec<&Value> = match self.raw(k) {
            None => return default,
            Some(Value::Array(a)) => a.iter().collect(),
            Some(v) => vec![v],
        };
        if items.is_empty() {
            self.issue(k, "list must not be empty");
            return default;
        }
        let mut out = Vec::with_capacity(items.len());
        for v in items {
            match one(v) {
                Ok(x) => out.push(x),
                Err(msg) => self.issue(k, msg),
            }
        }
        if out.is_empty() {
            default
        } else {
            out
        }
    }
}

fn keyword_value<T: std::str::FromStr<Err = String>>(v: &Value) -> Result<T, String> {
    match v {
        Value::String(s) => s.parse(),
        other => Err(format!("expected a string, got {other}")),
    }
}

fn seed_value(v: &Value) -> Result<Replicate, String> {
    let as_u64 = |v: &Value| match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        other => Err(format!("seeds must be non-negative integers, got {other}")),
    };
    match v {
        Value::Array(pair) if pair.len() == 2 => Ok(Replicate {
            graph: as_u64(&pair[0])?,
            run: as_u64(&pair[1])?,
        }),
        Value::Array(_) => Err("a seed pair must be [graph_seed, run_seed]".into()),
        other => {
            let s = as_u64(other)?;
            Ok(Replicate { graph: s, run: s })
        }
    }
}

fn from_table(root: &Table) -> Result<ExperimentConfig, ConfigError> {
    let mut issues = Vec::new();
    for (name, value) in root {
        match SECTIONS.iter().find(|(s, _)| s == name) {
            None => issues.push(Issue {
                key: name.clone(),
                message: "unknown section".into(),
            }),
            Some((_, keys)) => match value {
                Value::Table(t) => {
                    for k in t.keys().filter(|k| !keys.contains(&k.as_str())) {
                        issues.push(Issue {
                            key: format!("{name}.{k}"),
                            message: "unknown key".into(),
                        });
                    }
                }
                _ => issues.push(Issue {
                    key: name.clone(),
                    message: "expected a section".into(),
                }),
            },
        }
    }
    let section = |name: &str| root.get(name).and_then(Value::as_table);
    let d = ExperimentConfig::default();
    let mut cfg = d.clone();

    {
        let mut r = Reader {
            section: "experiment",
            table: section("experiment"),
            issues: &mut issues,
        };
        cfg.paradigms = r.list("paradigm", d.paradigms.clone(), keyword_value);
        cfg.schemes = r.list("scheme", d.schemes.clone(), keyword_value);
        cfg.n_nodes = r.usize("n_nodes", d.n_nodes);
        let number =
            |v: &Value| Reader::float_of(v).ok_or_else(|| format!("expected a number, got {v}"));
        cfg.alphas = r.list("alpha", d.alphas.clone(), number);
        cfg.ps = r.list("p", d.ps.clone(), number);
        cfg.target_class = r.uint("target_class", d.target_class as u64).min(255) as u8;
        cfg.collateral_class = r
            .uint("collateral_class", d.collateral_class as u64)
            .min(255) as u8;
        cfg.mode = r.keyword("corruption_mode", d.mode);
        cfg.rounds = r.usize("rounds", d.rounds);
        cfg.seeds = r.list("seeds", d.seeds.clone(), seed_value);
        cfg.eval_every = r.usize("eval_every", d.eval_every);
        cfg.threads = r.usize("threads", d.threads);
        cfg.checkpoint_every = r.usize("checkpoint_every", d.checkpoint_every);
        cfg.output_dir = r
            .string("output_dir")
            .map_or(d.output_dir.clone(), PathBuf::from);
        cfg.write_manifests = r.boolean("write_manifests", d.write_manifests);

        if cfg.n_nodes < 2 {
            r.issue(
                "n_nodes",
                format!("must be at least 2, got {}", cfg.n_nodes),
            );
        }
        for &a in &cfg.alphas {
            if !(0.0..=1.0).contains(&a) {
                r.issue("alpha", format!("must lie in [0, 1], got {a}"));
            }
        }
        for &p in &cfg.ps {
            if !(0.0..=1.0).contains(&p) {
                r.issue("p", format!("must lie in [0, 1], got {p}"));
            }
        }
        if cfg.schemes.iter().all(|&s| s == Scheme::None) && cfg.ps.iter().any(|&p| p != 0.0) {
            r.issue("p", "must be 0 when scheme is none");
        }
        for (k, c) in [
            ("target_class", cfg.target_class),
            ("collateral_class", cfg.collateral_class),
        ] {
            if c as usize >= NUM_CLASSES {
                r.issue(
                    k,
                    format!("must be a class id in 0..{}, got {c}", NUM_CLASSES - 1),
                );
            }
        }
        if cfg.target_class == cfg.collateral_class {
            r.issue("collateral_class", "must differ from target_class");
        }
        if cfg.eval_every == 0 {
            r.issue("eval_every", "must be at least 1");
        }
        let runs: BTreeSet<u64> = cfg.seeds.iter().map(|s| s.run).collect();
        if runs.len() != cfg.seeds.len() {
            r.issue("seeds", "run seeds must be distinct across replicates");
        }
        let paradigms: BTreeSet<_> = cfg.paradigms.iter().collect();
        let schemes: BTreeSet<_> = cfg.schemes.iter().collect();
        if paradigms.len() != cfg.paradigms.len() {
            r.issue("paradigm", "contains duplicates");
        }
        if schemes.len() != cfg.schemes.len() {
            r.issue("scheme", "contains duplicates");
        }
    }

    {
        let mut r = Reader {
            section: "data",
            table: section("data"),
            issues: &mut issues,
        };
        let dir = r
            .string("mnist_dir")
            .map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from);
        let mut paths = DataPaths::in_dir(&dir);
        for (k, slot) in [
            ("train_images", &mut paths.train_images),
            ("train_labels", &mut paths.train_labels),
            ("test_images", &mut paths.test_images),
            ("test_labels", &mut paths.test_labels),
        ] {
            if let Some(p) = r.string(k) {
                *slot = PathBuf::from(p);
            }
        }
        cfg.data = paths;
        cfg.subset_fraction = r.float("subset_fraction", d.subset_fraction);
        cfg.subset_seed = r.uint("subset_seed", d.subset_seed);
        if !(cfg.subset_fraction > 0.0 && cfg.subset_fraction <= 1.0) {
            r.issue(
                "subset_fraction",
                format!("must lie in (0, 1], got {}", cfg.subset_fraction),
            );
        }
    }

    {
        let mut r = Reader {
            section: "train",
            table: section("train"),
            issues: &mut issues,
        };
        let t = d.train;
        cfg.train = TrainConfig {
            max_local_epochs: r.usize("max_local_epochs", t.max_local_epochs),
            batch_size: r.usize("batch_size", t.batch_size),
            lr: r.float("lr", t.lr),
            momentum: r.float("momentum", t.momentum),
            early_stop_patience: r.usize("early_stop_patience", t.early_stop_patience),
            val_fraction: r.float("val_fraction", t.val_fraction),
        };
        for (k, msg) in cfg.train.violations() {
            r.issue(k, msg);
        }
    }

    {
        let mut r = Reader {
            section: "model",
            table: section("model"),
            issues: &mut issues,
        };
        let preset = r.string("preset").unwrap_or("compact_cnn");
        let mut arch = ArchitectureConfig::preset(preset).unwrap_or_else(|| {
            r.issue(
                "preset",
                format!("unknown preset `{preset}` (expected compact_cnn or mlp_small)"),
            );
            d.arch
        });
        let cnn_keys = [
            "conv1_channels",
            "conv2_channels",
            "kernel",
            "fc1_units",
            "conv_dropout",
            "fc_dropout",
        ];
        let mlp_keys = ["hidden_units", "dropout"];
        match &mut arch {
            ArchitectureConfig::Cnn(c) => {
                c.conv1_channels = r.usize("conv1_channels", c.conv1_channels);
                c.conv2_channels = r.usize("conv2_channels", c.conv2_channels);
                c.kernel = r.usize("kernel", c.kernel);
                c.fc1_units = r.usize("fc1_units", c.fc1_units);
                c.conv_dropout = r.float("conv_dropout", c.conv_dropout);
                c.fc_dropout = r.float("fc_dropout", c.fc_dropout);
                let stray: Vec<&str> = mlp_keys
                    .into_iter()
                    .filter(|k| r.raw(k).is_some())
                    .collect();
                for k in stray {
                    r.issue(k, "only applies to mlp presets");
                }
            }
            ArchitectureConfig::Mlp(m) => {
                m.hidden_units = r.usize("hidden_units", m.hidden_units);
                m.dropout = r.float("dropout", m.dropout);
                let stray: Vec<&str> = cnn_keys
                    .into_iter()
                    .filter(|k| r.raw(k).is_some())
                    .collect();
                for k in stray {
                    r.issue(k, "only applies to cnn presets");
                }
            }
        }
        if let Err(e) = arch.validate() {
            r.issue("preset", e.to_string());
        }
        cfg.arch = arch;
    }

    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(issues))
    }
}
