//! Command-line front end. [`run`] parses an argument list, executes one
//! subcommand and returns the process exit code: 0 on success, 2 for usage
//! and configuration errors, 1 for runtime failures.
//!
//! Every report is written to `--out`, carries the effective configuration
//! under `config` and a `provenance` block (config hash, seed, input hashes).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::activation::{concept_activations, histogram};
use crate::cbm::{
    classifier_from_container, classifier_to_container, concept_sensitivity_test, encoder_from_container,
    encoder_to_container, explain, linearity_audit, predict, teacher_from_container, teacher_to_container,
    train_classifier, train_concept_encoder, train_teacher, ConceptEncoder, FinalClassifier, TeacherProbe,
    TrainConfig, TrainingHistory,
};
use crate::error::Error;
use crate::goodness::{goodness, refine_entropy_guided, refine_random_baseline, CutoffMode, GoodnessMode};
use crate::nn::accuracy;
use crate::store::{make_synthetic_bundle, Container, EmbeddingBundle, Split, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Keys owned by the run configuration itself; every other key belongs to
/// the training configuration.
const RUN_KEYS: [&str; 9] = ["cutoff", "cutoff_mode", "mode", "steps", "trials", "runs", "k", "bin_width", "range"];
const SYNTHETIC_KEY: &str = "synthetic";

/// Flat JSON configuration shared by all subcommands. Training keys sit at
/// the top level next to the run keys; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run: RunKeys,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunKeys {
    pub cutoff: usize,
    pub cutoff_mode: CutoffMode,
    pub mode: GoodnessMode,
    pub steps: usize,
    pub trials: usize,
    pub runs: usize,
    /// Concepts listed per explanation.
    pub k: usize,
    pub bin_width: f64,
    pub range: [f64; 2],
}

impl Default for RunKeys {
    fn default() -> Self {
        RunKeys {
            cutoff: crate::goodness::DEFAULT_CUTOFF,
            cutoff_mode: CutoffMode::SubsetSoftmax,
            mode: GoodnessMode::TaskAgnostic,
            steps: 70,
            trials: 10,
            runs: 10,
            k: 5,
            bin_width: 0.25,
            range: [-4.0, 4.0],
        }
    }
}

fn config_error(path: String, message: impl Into<String>) -> Error {
    Error::Config {
        path: if path.is_empty() || path == "." { "<root>".into() } else { path },
        message: message.into(),
    }
}

fn typed<T: for<'de> Deserialize<'de>>(value: Value, prefix: &str) -> crate::Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix, inner.as_str()) {
            ("", p) => p.to_string(),
            (pre, "." | "") => pre.to_string(),
            (pre, p) => format!("{pre}.{p}"),
        };
        config_error(path, e.into_inner().to_string())
    })
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> crate::Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| config_error(String::new(), e.to_string()))?;
        let Value::Object(map) = doc else {
            return Err(config_error(String::new(), "configuration must be a JSON object"));
        };
        let (mut run, mut train, mut synthetic) = (Map::new(), Map::new(), None);
        for (key, value) in map {
            if key == SYNTHETIC_KEY {
                synthetic = Some(value);
            } else if RUN_KEYS.contains(&key.as_str()) {
                run.insert(key, value);
            } else {
                train.insert(key, value);
            }
        }
        let cfg = RunConfig {
            train: typed(Value::Object(train), "")?,
            run: typed(Value::Object(run), "")?,
            synthetic: synthetic.map(|v| typed(v, SYNTHETIC_KEY)).transpose()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.train.validate().map_err(|e| config_error(String::new(), e.to_string()))?;
        if let Some(s) = &self.synthetic {
            s.validate().map_err(|e| config_error(SYNTHETIC_KEY.into(), e.to_string()))?;
        }
        let [lo, hi] = self.run.range;
        if !(self.run.bin_width > 0.0) || !(lo < hi) {
            return Err(config_error("bin_width".into(), "need bin_width > 0 and range[0] < range[1]"));
        }
        Ok(())
    }

    /// The effective configuration as one flat JSON object with sorted keys.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for part in [serde_json::to_value(&self.train), serde_json::to_value(&self.run)] {
            if let Ok(Value::Object(m)) = part {
                out.extend(m);
            }
        }
        if let Some(s) = &self.synthetic {
            out.insert(SYNTHETIC_KEY.into(), serde_json::to_value(s).expect("spec serializes"));
        }
        Value::Object(out)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().to_string().as_bytes()))
    }
}

/// Reads and validates a configuration file; errors name the offending key.
pub fn load_config(path: impl AsRef<Path>) -> crate::Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::IoAt { path: path.to_path_buf(), source })?;
    RunConfig::from_json_str(&text)
}

#[derive(Debug, Parser)]
#[command(name = "cbmkit", version, about = "Concept bottleneck toolkit over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bundle (`--mode standard|mixed`, or the config's `synthetic` spec).
    Synth(Common),
    /// Concept-set goodness of a bundle.
    Goodness(Common),
    /// Histogram of normalized concept activations.
    Histogram(Common),
    /// Entropy-guided removal against the random baseline.
    Refine(Common),
    TrainEncoder(Common),
    TrainTeacher(Common),
    TrainClassifier(Common),
    /// Per-split accuracy of a trained model.
    Evaluate(Common),
    /// Top concept contributions for every evaluation row.
    Explain(Common),
    /// Compare the layered model with its composed affine map.
    Audit(Common),
    /// Relevant against irrelevant concepts for non-linear and linear models.
    Sensitivity(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    relevant: Option<PathBuf>,
    #[arg(long)]
    irrelevant: Option<PathBuf>,
    #[arg(long)]
    bin_width: Option<f64>,
    /// `lo,hi`
    #[arg(long, allow_hyphen_values = true)]
    range: Option<String>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn parse_range(s: &str) -> CliResult<[f64; 2]> {
    let bad = || usage(format!("--range expects `lo,hi`, got `{s}`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok([lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?])
}

fn parse_goodness_mode(s: &str) -> CliResult<GoodnessMode> {
    match s {
        "task-agnostic" => Ok(GoodnessMode::TaskAgnostic),
        "task-specific" => Ok(GoodnessMode::TaskSpecific),
        _ => Err(usage(format!("--mode must be task-agnostic or task-specific, got `{s}`"))),
    }
}

/// Config file (or defaults) with command-line flags layered on top.
fn effective_config(a: &Common, goodness_mode: bool) -> CliResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => load_config(p).map_err(|e| match e {
            Error::Config { .. } => usage(e.to_string()),
            other => CliError::Runtime(other),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = a.cutoff {
        cfg.run.cutoff = v;
    }
    if let Some(v) = a.runs {
        cfg.run.runs = v;
    }
    if let Some(v) = a.steps {
        cfg.run.steps = v;
    }
    if let Some(v) = a.trials {
        cfg.run.trials = v;
    }
    if let Some(v) = a.k {
        cfg.run.k = v;
    }
    if let Some(v) = a.bin_width {
        cfg.run.bin_width = v;
    }
    if let Some(r) = &a.range {
        cfg.run.range = parse_range(r)?;
    }
    if goodness_mode {
        if let Some(m) = &a.mode {
            cfg.run.mode = parse_goodness_mode(m)?;
        }
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Hashes of every input file, keyed by role.
#[derive(Default)]
struct Inputs(BTreeMap<String, String>);

impl Inputs {
    fn read(&mut self, role: &str, path: &Path) -> CliResult<Container> {
        let bytes = fs::read(path).map_err(|source| Error::IoAt { path: path.to_path_buf(), source })?;
        self.0.insert(role.into(), hex::encode(Sha256::digest(&bytes)));
        Ok(Container::from_bytes(&bytes)?)
    }

    fn bundle(&mut self, role: &str, path: &Path) -> CliResult<EmbeddingBundle> {
        Ok(EmbeddingBundle::from_container(&self.read(role, path)?)?)
    }

    fn encoder(&mut self, path: &Path) -> CliResult<ConceptEncoder> {
        Ok(encoder_from_container(&self.read("encoder", path)?)?.0)
    }

    fn teacher(&mut self, path: &Path) -> CliResult<TeacherProbe> {
        Ok(teacher_from_container(&self.read("teacher", path)?)?.0)
    }

    fn classifier(&mut self, path: &Path) -> CliResult<FinalClassifier> {
        Ok(classifier_from_container(&self.read("classifier", path)?)?.0)
    }
}

fn provenance(command: &str, cfg: &RunConfig, inputs: &Inputs) -> Value {
    serde_json::json!({
        "tool": "cbmkit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.train.seed,
        "config_sha256": cfg.sha256(),
        "inputs": inputs.0,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Runtime(Error::IoAt { path: path.to_path_buf(), source }))
}

/// Writes `report` with `config` and `provenance` merged in at the top level.
fn write_report(path: &Path, report: impl Serialize, command: &str, cfg: &RunConfig, inputs: &Inputs) -> CliResult<()> {
    let mut doc = match serde_json::to_value(report).map_err(Error::from)? {
        Value::Object(m) => m,
        other => Map::from_iter([("result".to_string(), other)]),
    };
    doc.insert("config".into(), cfg.to_json());
    doc.insert("provenance".into(), provenance(command, cfg, inputs));
    let mut text = serde_json::to_string_pretty(&Value::Object(doc)).map_err(Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Stores provenance in the container attributes and the history as a CSV
/// sidecar next to the checkpoint.
fn write_checkpoint(
    out: &Path,
    mut c: Container,
    history: &TrainingHistory,
    command: &str,
    cfg: &RunConfig,
    inputs: &Inputs,
) -> CliResult<()> {
    c.attrs.insert("provenance".into(), provenance(command, cfg, inputs));
    c.attrs.insert("config".into(), cfg.to_json());
    c.write(out)?;
    let mut csv = Vec::new();
    history.write_csv(&mut csv)?;
    write_file(&out.with_extension("history.csv"), &csv)
}

fn features(bundle: &EmbeddingBundle) -> Array2<f64> {
    bundle.features.mapv(f64::from)
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(&a),
        Command::Goodness(a) => goodness_cmd(&a),
        Command::Histogram(a) => histogram_cmd(&a),
        Command::Refine(a) => refine(&a),
        Command::TrainEncoder(a) => train_encoder_cmd(&a),
        Command::TrainTeacher(a) => train_teacher_cmd(&a),
        Command::TrainClassifier(a) => train_classifier_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Explain(a) => explain_cmd(&a),
        Command::Audit(a) => audit(&a),
        Command::Sensitivity(a) => sensitivity(&a),
    }
}

fn synth(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut spec = match (&cfg.synthetic, a.mode.as_deref()) {
        (Some(s), None) => s.clone(),
        (Some(_), Some(_)) => return Err(usage("give either --mode or a `synthetic` config section, not both")),
        (None, None | Some("standard")) => SyntheticSpec::standard(0),
        (None, Some("mixed")) => SyntheticSpec::mixed(0),
        (None, Some(m)) => return Err(usage(format!("--mode for synth must be standard or mixed, got `{m}`"))),
    };
    if a.seed.is_some() || cfg.synthetic.is_none() {
        spec.seed = cfg.train.seed;
    }
    let bundle = make_synthetic_bundle(&spec)?;
    let mut c = bundle.to_container()?;
    c.attrs.insert("synthetic_spec".into(), serde_json::to_value(&spec).map_err(Error::from)?);
    c.write(&a.out)?;
    Ok(())
}

fn goodness_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, true)?;
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", require(&a.bundle, "bundle")?)?;
    let acts = concept_activations(&bundle, cfg.train.norm_mode, cfg.train.epsilon)?;
    let labels = (cfg.run.mode == GoodnessMode::TaskSpecific).then_some(bundle.labels.as_slice());
    let report = goodness(&acts, labels, cfg.run.cutoff, cfg.run.cutoff_mode)?;
    write_report(&a.out, report, "goodness", &cfg, &inputs)
}

fn histogram_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", require(&a.bundle, "bundle")?)?;
    let acts = concept_activations(&bundle, cfg.train.norm_mode, cfg.train.epsilon)?;
    let [lo, hi] = cfg.run.range;
    let report = histogram(acts.values.iter().copied(), cfg.run.bin_width, (lo, hi))?;
    if a.out.extension().is_some_and(|e| e == "csv") {
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        return write_file(&a.out, &csv);
    }
    write_report(&a.out, report, "histogram", &cfg, &inputs)
}

fn refine(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, true)?;
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", require(&a.bundle, "bundle")?)?;
    let acts = concept_activations(&bundle, cfg.train.norm_mode, cfg.train.epsilon)?;
    let labels = (cfg.run.mode == GoodnessMode::TaskSpecific).then_some(bundle.labels.as_slice());
    let r = &cfg.run;
    let guided = refine_entropy_guided(&acts, labels, r.cutoff, r.steps)?;
    let random = refine_random_baseline(&acts, labels, r.cutoff, r.steps, r.trials, cfg.train.seed)?;
    let report = serde_json::json!({ "entropy_guided": guided, "random": random });
    write_report(&a.out, report, "refine", &cfg, &inputs)
}

fn train_encoder_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", require(&a.bundle, "bundle")?)?;
    let acts = concept_activations(&bundle, cfg.train.norm_mode, cfg.train.epsilon)?;
    let (enc, history) = train_concept_encoder(&bundle, &acts, &cfg.train)?;
    let c = encoder_to_container(&enc, Some(&history))?;
    write_checkpoint(&a.out, c, &history, "train-encoder", &cfg, &inputs)
}

fn train_teacher_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", require(&a.bundle, "bundle")?)?;
    let (t, history) = train_teacher(&bundle, &cfg.train)?;
    let c = teacher_to_container(&t, Some(&history))?;
    write_checkpoint(&a.out, c, &history, "train-teacher", &cfg, &inputs)
}

fn train_classifier_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let (b, e, t) = (require(&a.bundle, "bundle")?, require(&a.encoder, "encoder")?, require(&a.teacher, "teacher")?);
    let mut inputs = Inputs::default();
    let bundle = inputs.bundle("bundle", b)?;
    let enc = inputs.encoder(e)?;
    let teacher = inputs.teacher(t)?;
    let (clf, history) = train_classifier(&enc, &teacher, &bundle, &cfg.train)?;
    let c = classifier_to_container(&clf, Some(&history))?;
    write_checkpoint(&a.out, c, &history, "train-classifier", &cfg, &inputs)
}

#[derive(Serialize)]
struct SplitScore {
    rows: usize,
    accuracy: Option<f64>,
}

fn split_scores(bundle: &EmbeddingBundle, logits: &Array2<f64>) -> BTreeMap<&'static str, SplitScore> {
    [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")]
        .into_iter()
        .map(|(s, name)| {
            let rows = bundle.rows(s);
            let labels: Vec<u32> = rows.iter().map(|&i| bundle.labels[i]).collect();
            let acc = (!rows.is_empty()).then(|| accuracy(logits.select(Axis(0), &rows).view(), &labels));
            (name, SplitScore { rows: rows.len(), accuracy: acc })
        })
        .collect()
}

fn model_inputs(a: &Common, inputs: &mut Inputs) -> CliResult<(EmbeddingBundle, ConceptEncoder, FinalClassifier)> {
    let (b, e, c) = (require(&a.bundle, "bundle")?, require(&a.encoder, "encoder")?, require(&a.classifier, "classifier")?);
    Ok((inputs.bundle("bundle", b)?, inputs.encoder(e)?, inputs.classifier(c)?))
}

fn evaluate(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let (bundle, enc, clf) = model_inputs(a, &mut inputs)?;
    let x = features(&bundle);
    let (logits, _) = predict(&enc, &clf, x.view())?;
    let mut report = serde_json::json!({ "cbm": split_scores(&bundle, &logits) });
    if let Some(t) = &a.teacher {
        let teacher = inputs.teacher(t)?;
        report["teacher"] = serde_json::to_value(split_scores(&bundle, &teacher.logits(x.view())?)).map_err(Error::from)?;
    }
    write_report(&a.out, report, "evaluate", &cfg, &inputs)
}

fn explain_cmd(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let (bundle, enc, clf) = model_inputs(a, &mut inputs)?;
    let mut rows = bundle.rows(Split::Test);
    if rows.is_empty() {
        rows = (0..bundle.num_rows()).collect();
    }
    let x = features(&bundle);
    let explanations = rows
        .iter()
        .map(|&i| {
            let e = explain(&enc, &clf, x.row(i), cfg.run.k)?;
            Ok(serde_json::json!({ "row": i, "label": bundle.labels[i], "explanation": e }))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    write_report(&a.out, serde_json::json!({ "explanations": explanations }), "explain", &cfg, &inputs)
}

fn audit(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let mut inputs = Inputs::default();
    let (bundle, enc, clf) = model_inputs(a, &mut inputs)?;
    let report = linearity_audit(&enc, &clf, features(&bundle).view())?;
    write_report(&a.out, report, "audit", &cfg, &inputs)
}

fn sensitivity(a: &Common) -> CliResult<()> {
    let cfg = effective_config(a, false)?;
    let (r, i) = (require(&a.relevant, "relevant")?, require(&a.irrelevant, "irrelevant")?);
    let mut inputs = Inputs::default();
    let relevant = inputs.bundle("relevant", r)?;
    let irrelevant = inputs.bundle("irrelevant", i)?;
    let report = concept_sensitivity_test(&relevant, &irrelevant, &cfg.train, cfg.run.runs)?;
    write_report(&a.out, report, "sensitivity", &cfg, &inputs)
}
