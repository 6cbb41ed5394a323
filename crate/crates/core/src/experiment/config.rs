//! `key = value` configuration with `[section]` headers and `#`/`;` comments.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::federation::{FederationConfig, Method, StepDecay};
use crate::fitness_codec::CodecScheme;
use crate::nn::{Activation, OptimizerCfg};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(line: Option<usize>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: `{}`: {}", self.field, self.message),
            None => write!(f, "`{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

struct Entry {
    key: String,
    value: String,
    line: usize,
    used: Cell<bool>,
}

/// Raw parsed entries, keyed `section.key`.
struct Table {
    entries: Vec<Entry>,
}

impl Table {
    fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let mut section = String::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::new(Some(line), content, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::new(Some(line), name, "unknown section"));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::new(Some(line), content, "expected `key = value`"))?;
            if section.is_empty() {
                return Err(ConfigError::new(Some(line), key.trim(), "key outside of any section"));
            }
            let key = format!("{section}.{}", key.trim());
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(ConfigError::new(
                    Some(line),
                    key,
                    format!("duplicate key (first set on line {})", prev.line),
                ));
            }
            entries.push(Entry {
                key,
                value: value.trim().to_string(),
                line,
                used: Cell::new(false),
            });
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<&Entry> {
        let e = self.entries.iter().find(|e| e.key == key)?;
        e.used.set(true);
        Some(e)
    }

    fn get<T: FromStr>(
        &self,
        key: &str,
        lines: &mut BTreeMap<String, usize>,
    ) -> std::result::Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        lines.insert(key.to_string(), e.line);
        e.value
            .parse::<T>()
            .map(Some)
            .map_err(|err| ConfigError::new(Some(e.line), key, format!("cannot parse `{}`: {err}", e.value)))
    }

    fn unused(&self) -> Option<&Entry> {
        self.entries.iter().find(|e| !e.used.get())
    }
}

const SECTIONS: &[&str] = &["run", "data", "model", "federation", "evofed", "optimizer", "baseline"];

/// Comma-separated hidden layer widths; empty means no hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Widths(Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() || s.trim() == "none" {
            return Ok(Widths(Vec::new()));
        }
        s.split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("`{w}`: {e}")))
            .collect::<std::result::Result<_, _>>()
            .map(Widths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        samples: usize,
        dim: usize,
        classes: usize,
        spread: f64,
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Seeded training subset size; 0 keeps everything.
        subset: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub rounds: u32,
    pub eval_interval: u32,
    pub output: PathBuf,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,

    pub data: DataSource,
    pub classes_per_client: usize,
    pub center: bool,

    pub hidden: Vec<usize>,
    pub activation: Activation,

    pub clients: usize,
    pub participation: f64,
    pub history_depth: usize,

    pub population: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub alpha_decay: StepDecay,
    pub partitions: usize,
    pub codec: CodecScheme,
    pub es_momentum: f64,

    pub optimizer: OptimizerCfg,
    pub lr_decay: StepDecay,

    pub sparse_rate: f64,
    pub quant_bits: u8,

    /// Line each explicitly set key came from.
    lines: BTreeMap<String, usize>,
}

impl Default for ExperimentConfig {
    /// FMNIST-row values for the fitness protocol and its local optimizer,
    /// scaled down to a blob dataset.
    fn default() -> Self {
        Self {
            method: Method::Evofed,
            seed: 0,
            rounds: 300,
            eval_interval: 10,
            output: PathBuf::from("runs/default"),
            threads: 0,
            data: DataSource::Blobs {
                samples: 2000,
                dim: 2,
                classes: 4,
                spread: 0.08,
                test_fraction: 0.2,
            },
            classes_per_client: 2,
            center: false,
            hidden: vec![16],
            activation: Activation::Relu,
            clients: 5,
            participation: 1.0,
            history_depth: 10,
            population: 128,
            sigma: 0.27,
            alpha: 0.5,
            alpha_decay: StepDecay::NONE,
            partitions: 1,
            codec: CodecScheme::Raw32,
            es_momentum: 0.0,
            optimizer: OptimizerCfg {
                learning_rate: 0.0873,
                momentum: 0.9074,
                weight_decay: 0.0152,
                local_steps: 10,
                batch_size: 256,
            },
            lr_decay: StepDecay::NONE,
            sparse_rate: 0.988,
            quant_bits: 8,
            lines: BTreeMap::new(),
        }
    }
}

macro_rules! set {
    ($table:expr, $lines:expr, $key:literal => $target:expr) => {
        if let Some(v) = $table.get($key, $lines)? {
            $target = v;
        }
    };
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let table = Table::parse(text)?;
        let mut cfg = ExperimentConfig::default();
        let lines = &mut BTreeMap::new();

        set!(table, lines, "run.method" => cfg.method);
        set!(table, lines, "run.seed" => cfg.seed);
        set!(table, lines, "run.rounds" => cfg.rounds);
        set!(table, lines, "run.eval_interval" => cfg.eval_interval);
        set!(table, lines, "run.output" => cfg.output);
        set!(table, lines, "run.threads" => cfg.threads);

        let source: Option<String> = table.get("data.source", lines)?;
        match source.as_deref() {
            None | Some("blobs") => {
                let (mut samples, mut dim, mut classes, mut spread, mut test_fraction) = (2000, 2, 4, 0.08, 0.2);
                set!(table, lines, "data.samples" => samples);
                set!(table, lines, "data.dim" => dim);
                set!(table, lines, "data.classes" => classes);
                set!(table, lines, "data.spread" => spread);
                set!(table, lines, "data.test_fraction" => test_fraction);
                cfg.data = DataSource::Blobs {
                    samples,
                    dim,
                    classes,
                    spread,
                    test_fraction,
                };
            }
            Some("idx") => {
                let mut path = |key: &str| -> std::result::Result<PathBuf, ConfigError> {
                    table
                        .get::<PathBuf>(key, lines)?
                        .ok_or_else(|| ConfigError::new(None, key, "required when data.source = idx"))
                };
                let train_images = path("data.train_images")?;
                let train_labels = path("data.train_labels")?;
                let test_images = path("data.test_images")?;
                let test_labels = path("data.test_labels")?;
                let mut subset = 0;
                set!(table, lines, "data.subset" => subset);
                cfg.data = DataSource::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    subset,
                };
            }
            Some(other) => {
                return Err(ConfigError::new(
                    lines.get("data.source").copied(),
                    "data.source",
                    format!("unknown source `{other}` (expected blobs or idx)"),
                ))
            }
        }
        set!(table, lines, "data.classes_per_client" => cfg.classes_per_client);
        set!(table, lines, "data.center" => cfg.center);

        if let Some(Widths(w)) = table.get("model.hidden", lines)? {
            cfg.hidden = w;
        }
        set!(table, lines, "model.activation" => cfg.activation);

        set!(table, lines, "federation.clients" => cfg.clients);
        set!(table, lines, "federation.participation" => cfg.participation);
        set!(table, lines, "federation.history" => cfg.history_depth);

        set!(table, lines, "evofed.population" => cfg.population);
        set!(table, lines, "evofed.sigma" => cfg.sigma);
        set!(table, lines, "evofed.alpha" => cfg.alpha);
        set!(table, lines, "evofed.alpha_decay_every" => cfg.alpha_decay.every);
        set!(table, lines, "evofed.alpha_decay_factor" => cfg.alpha_decay.factor);
        set!(table, lines, "evofed.partitions" => cfg.partitions);
        set!(table, lines, "evofed.codec" => cfg.codec);
        set!(table, lines, "evofed.es_momentum" => cfg.es_momentum);

        set!(table, lines, "optimizer.lr" => cfg.optimizer.learning_rate);
        set!(table, lines, "optimizer.momentum" => cfg.optimizer.momentum);
        set!(table, lines, "optimizer.weight_decay" => cfg.optimizer.weight_decay);
        set!(table, lines, "optimizer.local_steps" => cfg.optimizer.local_steps);
        set!(table, lines, "optimizer.batch_size" => cfg.optimizer.batch_size);
        set!(table, lines, "optimizer.lr_decay_every" => cfg.lr_decay.every);
        set!(table, lines, "optimizer.lr_decay_factor" => cfg.lr_decay.factor);

        set!(table, lines, "baseline.sparse_rate" => cfg.sparse_rate);
        set!(table, lines, "baseline.quant_bits" => cfg.quant_bits);

        if let Some(e) = table.unused() {
            return Err(ConfigError::new(Some(e.line), &e.key, "unknown key"));
        }
        cfg.lines = std::mem::take(lines);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    fn fail(&self, field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::new(self.lines.get(field).copied(), field, message)
    }

    /// Range checks, run before any work starts.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.rounds == 0 {
            return Err(self.fail("run.rounds", "must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(self.fail("run.eval_interval", "must be >= 1"));
        }
        match &self.data {
            DataSource::Blobs {
                samples,
                dim,
                classes,
                spread,
                test_fraction,
            } => {
                if *classes < 2 {
                    return Err(self.fail("data.classes", "must be >= 2"));
                }
                if *dim == 0 {
                    return Err(self.fail("data.dim", "must be >= 1"));
                }
                if *samples < classes * 2 {
                    return Err(self.fail("data.samples", "need at least two samples per class"));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(self.fail("data.spread", "must be >= 0"));
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(self.fail("data.test_fraction", "must be in (0, 1)"));
                }
                if self.classes_per_client == 0 || self.classes_per_client > *classes {
                    return Err(self.fail("data.classes_per_client", format!("must be in [1, {classes}]")));
                }
            }
            DataSource::Idx { .. } => {
                if self.classes_per_client == 0 {
                    return Err(self.fail("data.classes_per_client", "must be >= 1"));
                }
            }
        }
        if self.hidden.contains(&0) {
            return Err(self.fail("model.hidden", "layer widths must be >= 1"));
        }
        if self.clients == 0 {
            return Err(self.fail("federation.clients", "must be >= 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(self.fail("federation.participation", "must be in (0, 1]"));
        }
        if self.population < 2 || !self.population.is_multiple_of(2) || self.population > u16::MAX as usize {
            return Err(self.fail("evofed.population", "must be even, >= 2 and <= 65534"));
        }
        if !positive(self.sigma) {
            return Err(self.fail("evofed.sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(self.fail("evofed.alpha", "must be >= 0"));
        }
        if !positive(self.alpha_decay.factor) {
            return Err(self.fail("evofed.alpha_decay_factor", "must be > 0"));
        }
        if self.partitions == 0 || self.partitions > u16::MAX as usize {
            return Err(self.fail("evofed.partitions", "must be in [1, 65535]"));
        }
        if self.method == Method::PlainEs && self.partitions != 1 {
            return Err(self.fail("evofed.partitions", "plain-es requires 1"));
        }
        if let Err(e) = self.codec.validate(self.population) {
            return Err(self.fail("evofed.codec", e.to_string()));
        }
        if !(0.0..1.0).contains(&self.es_momentum) {
            return Err(self.fail("evofed.es_momentum", "must be in [0, 1)"));
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate.is_finite() && opt.learning_rate >= 0.0) {
            return Err(self.fail("optimizer.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&opt.momentum) {
            return Err(self.fail("optimizer.momentum", "must be in [0, 1)"));
        }
        if !(opt.weight_decay.is_finite() && opt.weight_decay >= 0.0) {
            return Err(self.fail("optimizer.weight_decay", "must be >= 0"));
        }
        if opt.local_steps == 0 {
            return Err(self.fail("optimizer.local_steps", "must be >= 1"));
        }
        if opt.batch_size == 0 {
            return Err(self.fail("optimizer.batch_size", "must be >= 1"));
        }
        if !positive(self.lr_decay.factor) {
            return Err(self.fail("optimizer.lr_decay_factor", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.sparse_rate) {
            return Err(self.fail("baseline.sparse_rate", "must be in [0, 1)"));
        }
        if !(1..=16).contains(&self.quant_bits) {
            return Err(self.fail("baseline.quant_bits", "must be in 1..=16"));
        }
        Ok(())
    }

    /// Checks that need the model size.
    pub fn validate_for_params(&self, param_count: usize) -> std::result::Result<(), ConfigError> {
        if self.partitions > param_count {
            return Err(self.fail(
                "evofed.partitions",
                format!(
                    "{} partitions exceed the {param_count} model parameters",
                    self.partitions
                ),
            ));
        }
        Ok(())
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            method: self.method,
            clients: self.clients,
            rounds: self.rounds,
            participation: self.participation,
            population: self.population,
            sigma: self.sigma,
            alpha: self.alpha,
            alpha_decay: self.alpha_decay,
            es_momentum: self.es_momentum,
            partitions: self.partitions,
            codec: self.codec,
            optimizer: self.optimizer,
            lr_decay: self.lr_decay,
            seed: self.seed,
            eval_interval: self.eval_interval,
            history_depth: self.history_depth,
            sparse_rate: self.sparse_rate,
            quant_bits: self.quant_bits,
        }
    }

    /// Every effective setting as `section.key -> value`.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("run.method", self.method.name().into());
        put("run.seed", self.seed.to_string());
        put("run.rounds", self.rounds.to_string());
        put("run.eval_interval", self.eval_interval.to_string());
        put("run.output", self.output.display().to_string());
        match &self.data {
            DataSource::Blobs {
                samples,
                dim,
                classes,
                spread,
                test_fraction,
            } => {
                put("data.source", "blobs".into());
                put("data.samples", samples.to_string());
                put("data.dim", dim.to_string());
                put("data.classes", classes.to_string());
                put("data.spread", spread.to_string());
                put("data.test_fraction", test_fraction.to_string());
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                subset,
            } => {
                put("data.source", "idx".into());
                put("data.train_images", train_images.display().to_string());
                put("data.train_labels", train_labels.display().to_string());
                put("data.test_images", test_images.display().to_string());
                put("data.test_labels", test_labels.display().to_string());
                put("data.subset", subset.to_string());
            }
        }
        put("data.classes_per_client", self.classes_per_client.to_string());
        put("data.center", self.center.to_string());
        put(
            "model.hidden",
            self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
        );
        put("model.activation", format!("{:?}", self.activation).to_lowercase());
        put("federation.clients", self.clients.to_string());
        put("federation.participation", self.participation.to_string());
        put("federation.history", self.history_depth.to_string());
        put("evofed.population", self.population.to_string());
        put("evofed.sigma", self.sigma.to_string());
        put("evofed.alpha", self.alpha.to_string());
        put("evofed.alpha_decay_every", self.alpha_decay.every.to_string());
        put("evofed.alpha_decay_factor", self.alpha_decay.factor.to_string());
        put("evofed.partitions", self.partitions.to_string());
        put("evofed.codec", self.codec.to_string());
        put("evofed.es_momentum", self.es_momentum.to_string());
        put("optimizer.lr", self.optimizer.learning_rate.to_string());
        put("optimizer.momentum", self.optimizer.momentum.to_string());
        put("optimizer.weight_decay", self.optimizer.weight_decay.to_string());
        put("optimizer.local_steps", self.optimizer.local_steps.to_string());
        put("optimizer.batch_size", self.optimizer.batch_size.to_string());
        put("optimizer.lr_decay_every", self.lr_decay.every.to_string());
        put("optimizer.lr_decay_factor", self.lr_decay.factor.to_string());
        put("baseline.sparse_rate", self.sparse_rate.to_string());
        put("baseline.quant_bits", self.quant_bits.to_string());
        m
    }
}
