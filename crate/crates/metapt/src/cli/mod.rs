//! Command-line orchestration. One TOML config drives eight
//! subcommands; each acquires an exclusive lock on the artifact
//! directory, regenerates the benchmark deterministically from the
//! config, reads hash-verified upstream checkpoints, and writes its own
//! artifacts plus a provenance manifest and a JSONL log. Reruns with an
//! identical config produce byte-identical artifacts.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, unknown
//! keys, invalid values), 3 artifact error (missing, corrupt, locked,
//! or cross-config artifacts and all file I/O), 4 numeric failure.

mod checkpoint;
mod commands;

pub use checkpoint::{
    from_annotator, from_backbone, from_prompt, load_checkpoint, save_checkpoint, to_annotator,
    to_backbone, to_prompt, Checkpoint, CheckpointKind, NamedTensor,
};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatorConfig, SynthSpec};
use crate::downstream::TuneConfig;
use crate::metatrain::{MamlConfig, PptConfig};
use crate::model::{MlmConfig, ModelConfig};
use crate::taskgen::EmbedMethod;
use crate::util::sha256_hex;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Coarse error-to-exit-code mapping; the error enum groups its
/// variants with exactly this table in mind.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::DataLine { .. } | Error::Artifact(_) | Error::Io { .. } => {
            EXIT_ARTIFACT
        }
        Error::Numeric(_) | Error::Shape(_) => EXIT_NUMERIC,
    }
}

/// Pseudo-label pipeline settings: the synthetic world, the annotator,
/// and the confidence filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub synth: SynthSpec,
    pub annotator: AnnotatorConfig,
    /// Minimum annotator confidence for a pseudo label to be kept.
    pub confidence_threshold: f64,
    /// Vocabulary cap for the tokenizer built over the MLM corpus.
    pub tokenizer_vocab: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            synth: SynthSpec::desk_default(),
            annotator: AnnotatorConfig::default(),
            confidence_threshold: 0.95,
            tokenizer_vocab: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStrategy {
    Kmeans,
    Lda,
    Random,
    Label,
}

impl ClusterStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ClusterStrategy::Kmeans => "kmeans",
            ClusterStrategy::Lda => "lda",
            ClusterStrategy::Random => "random",
            ClusterStrategy::Label => "label",
        }
    }
}

/// Task construction settings shared by `cluster` and the ablations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskgenSection {
    pub strategy: ClusterStrategy,
    pub embed: EmbedMethod,
    pub k: usize,
    pub val_fraction: f64,
    pub min_task_size: usize,
    pub kmeans_iters: usize,
    pub lda_iterations: usize,
}

impl Default for TaskgenSection {
    fn default() -> Self {
        TaskgenSection {
            strategy: ClusterStrategy::Kmeans,
            embed: EmbedMethod::MeanPooledBackbone,
            k: 10,
            val_fraction: 0.2,
            min_task_size: 8,
            kmeans_iters: 100,
            lda_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Pt,
    Ppt,
    MetaPt,
    Ft,
}

impl EvalMethod {
    pub fn name(self) -> &'static str {
        match self {
            EvalMethod::Pt => "PT",
            EvalMethod::Ppt => "PPT",
            EvalMethod::MetaPt => "MetaPT",
            EvalMethod::Ft => "FT",
        }
    }

    /// Lenient flag parsing: case-insensitive, separators ignored.
    pub fn parse(s: &str) -> Result<EvalMethod> {
        let folded: String =
            s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        match folded.as_str() {
            "pt" => Ok(EvalMethod::Pt),
            "ppt" => Ok(EvalMethod::Ppt),
            "metapt" => Ok(EvalMethod::MetaPt),
            "ft" => Ok(EvalMethod::Ft),
            _ => Err(Error::config(format!(
                "unknown method {s:?}; expected one of pt, ppt, meta_pt, ft"
            ))),
        }
    }
}

/// Few-shot evaluation matrix settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Few-shot examples per split (n train plus n validation).
    pub shots: usize,
    /// Benchmark seeds; each draws its own few-shot split.
    pub seeds: Vec<u64>,
    /// Downstream dataset names; empty means every generated dataset.
    pub datasets: Vec<String>,
    pub methods: Vec<EvalMethod>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            shots: 40,
            seeds: vec![1, 2, 3, 4, 5],
            datasets: Vec::new(),
            methods: vec![EvalMethod::Pt, EvalMethod::Ppt, EvalMethod::MetaPt, EvalMethod::Ft],
        }
    }
}

/// Sweep grids for the `ablate` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Pre-training pool sizes for the data-size sweep.
    pub sizes: Vec<usize>,
    /// Cluster counts for the cluster-count sweep.
    pub ks: Vec<usize>,
    /// Benchmark seeds shared by all sweeps.
    pub seeds: Vec<u64>,
    /// Downstream dataset name; empty means the first generated one.
    pub dataset: String,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            sizes: vec![1000, 4000, 16000],
            ks: vec![3, 10, 30],
            seeds: vec![1, 2, 3],
            dataset: String::new(),
        }
    }
}

/// The whole experiment in one tree. Every field has a default, unknown
/// keys anywhere are a hard error, and the resolved tree is echoed into
/// each run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Pipeline seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Artifact root; `--artifacts` and `METAPT_ARTIFACTS` override it.
    pub artifact_dir: PathBuf,
    pub model: ModelConfig,
    pub mlm: MlmConfig,
    pub corpus: CorpusSection,
    pub taskgen: TaskgenSection,
    pub maml: MamlConfig,
    pub ppt: PptConfig,
    pub tune: TuneConfig,
    pub full: TuneConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            artifact_dir: PathBuf::from("artifacts"),
            model: ModelConfig::default(),
            mlm: MlmConfig::default(),
            corpus: CorpusSection::default(),
            taskgen: TaskgenSection::default(),
            maml: MamlConfig::default(),
            ppt: PptConfig::default(),
            tune: TuneConfig::default(),
            full: TuneConfig::ft_default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.maml.validate()?;
        self.tune.validate()?;
        self.full.validate()?;
        if !(self.corpus.confidence_threshold > 0.0 && self.corpus.confidence_threshold < 1.0) {
            return Err(Error::config(format!(
                "corpus.confidence_threshold must be in (0, 1), got {}",
                self.corpus.confidence_threshold
            )));
        }
        if self.corpus.tokenizer_vocab < 8 {
            return Err(Error::config("corpus.tokenizer_vocab must be at least 8"));
        }
        if self.taskgen.k == 0 {
            return Err(Error::config("taskgen.k must be positive"));
        }
        if self.eval.shots == 0 {
            return Err(Error::config("eval.shots must be positive"));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds must not be empty"));
        }
        if self.eval.methods.is_empty() {
            return Err(Error::config("eval.methods must not be empty"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config; stamped into checkpoints and
    /// manifests as the producing-config fingerprint.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| Error::config(format!("serializing config: {e}")))?;
        Ok(sha256_hex(&bytes))
    }
}

/// Parses `raw` the way TOML would parse a value on the right-hand side
/// of an assignment; bare words fall back to strings so enum values
/// need no shell-hostile quoting.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = toml::from_str::<toml::Table>(&wrapped) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.trim().to_string())
}

/// Applies one `key.path=value` override to a fully-populated config
/// tree. Only existing keys can be set: the tree was serialized from a
/// complete config, so a missing segment is a typo, the same class of
/// error as an unknown key in the file.
fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut node = &mut *tree;
    for seg in &segments[..segments.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*seg))
            .ok_or_else(|| Error::config(format!("unknown config key {key:?}")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("config key {key:?} does not name a field")))?;
    let last = *segments.last().unwrap();
    if !table.contains_key(last) {
        return Err(Error::config(format!("unknown config key {key:?}")));
    }
    table.insert(last.to_string(), parse_override_value(raw));
    Ok(())
}

/// Loads, overrides, and validates a config. `path = None` starts from
/// all defaults. Overrides are applied to the serialized form of the
/// parsed config, so they see the complete tree and pass back through
/// the same strict deserializer as the file itself.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base: toml::Value = match path {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&raw).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    let cfg: ExperimentConfig = base.try_into().map_err(|e| {
        let place = path.map(|p| format!("{}: ", p.display())).unwrap_or_default();
        Error::config(format!("{place}{e}"))
    })?;
    let cfg = if overrides.is_empty() {
        cfg
    } else {
        let mut tree = toml::Value::try_from(&cfg)
            .map_err(|e| Error::config(format!("serializing config: {e}")))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        tree.try_into().map_err(|e| Error::config(format!("after overrides: {e}")))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Exclusive advisory lock on an artifact directory, held for the life
/// of one subcommand. Creation is atomic, so two concurrent runs
/// against the same root cannot both win.
#[derive(Debug)]
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::artifact(format!(
                    "artifact directory {} is in use by another run; remove {} if that run is gone",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "metapt",
    version,
    about = "Meta-learned prompt tuning at desk scale",
    after_help = "Exit codes: 0 ok, 2 config error, 3 artifact error, 4 numeric failure."
)]
pub struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted-path config override, repeatable, e.g. --set maml.beta=0.01
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Artifact root; beats METAPT_ARTIFACTS and the config setting.
    #[arg(long, global = true, value_name = "DIR")]
    pub artifacts: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the backbone on the masked-language-model corpus.
    PretrainBackbone,
    /// Train the annotator, pseudo-label the open corpus, balance the pool.
    PseudoLabel,
    /// Cluster the pool into auxiliary meta tasks.
    Cluster,
    /// Meta-train a soft prompt over the task set.
    MetaTrain,
    /// Pre-train a soft prompt on the pooled data (no task structure).
    PptTrain,
    /// Few-shot adaptation of one method on one dataset, no test scoring.
    Tune {
        /// One of: pt, ppt, meta_pt, ft.
        #[arg(long)]
        method: String,
        /// Downstream dataset name, e.g. down-tech.
        #[arg(long)]
        dataset: String,
        /// Benchmark seed for the few-shot split.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the method x dataset x seed evaluation matrix.
    Eval,
    /// Run the data-size, cluster-count, and strategy sweeps.
    Ablate,
}

/// Full CLI entry point: parse, dispatch, translate the outcome to an
/// exit code. Panics inside numeric code are caught and mapped to the
/// numeric-failure code so a crash is still a classified failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| commands::dispatch(&cli))) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            eprintln!("error: numeric failure: {msg}");
            EXIT_NUMERIC
        }
    }
}
