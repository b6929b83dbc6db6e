//! Config-driven runs: method comparison, pilot sweep and latent export.
//!
//! A run directory holds only deterministic data files plus `run.log`, the
//! one place timestamps are written.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cvae::{CvaeCheckpointMeta, CvaeConfig, CvaeModel, CvaeTrainConfig};
use crate::data::{
    load_csv, ColumnRoles, DataContext, Dataset, MissingPolicy, SensitiveSchema, SplitRatios,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, DEFAULT_THRESHOLD};
use crate::optim::{DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
use crate::pipeline::{fit_stage1, run_method, MethodOutcome, Prepared, Settings, Stage1};
use crate::predictor::{
    Classifier, ClassWeightMode, Method, PredictorCheckpointMeta, PredictorData,
    PredictorTrainConfig,
};
use crate::synth::{self, PilotTable, SynthConfig};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<String>,
    /// Run directory; relative paths are taken from the working directory.
    pub output: PathBuf,
    pub data: DataSection,
    pub split: SplitSection,
    pub cvae: CvaeSection,
    pub predictor: PredictorSection,
    pub metrics: MetricsSection,
    pub pilot: PilotSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            output: PathBuf::from("runs/experiment"),
            data: DataSection::default(),
            split: SplitSection::default(),
            cvae: CvaeSection::default(),
            predictor: PredictorSection::default(),
            metrics: MetricsSection::default(),
            pilot: PilotSection::default(),
        }
    }
}

/// Exactly one source must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synth: Option<SynthConfig>,
    pub csv: Option<CsvSource>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSource {
    /// Relative paths are taken from the config file's directory.
    pub path: PathBuf,
    /// Empty means every column that is neither sensitive nor the label.
    pub features: Vec<String>,
    pub sensitive: Vec<String>,
    pub label: String,
    pub missing: MissingPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let r = SplitRatios::default();
        Self {
            train: r.train,
            validation: r.validation,
            test: r.test,
            seed: 0,
        }
    }
}

impl SplitSection {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            validation: self.validation,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeSection {
    pub latent_dim: usize,
    pub hidden: usize,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub normalize_weights: bool,
}

impl Default for CvaeSection {
    fn default() -> Self {
        let arch = CvaeConfig::default();
        let train = CvaeTrainConfig::default();
        Self {
            latent_dim: arch.latent_dim,
            hidden: arch.hidden,
            samples: train.samples,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            seed: train.seed,
            normalize_weights: true,
        }
    }
}

impl CvaeSection {
    pub fn architecture(&self) -> CvaeConfig {
        CvaeConfig {
            latent_dim: self.latent_dim,
            hidden: self.hidden,
        }
    }

    pub fn training(&self) -> CvaeTrainConfig {
        CvaeTrainConfig {
            samples: self.samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: usize,
    /// Sensitive attribute used for re-weighting and the pilot disparity;
    /// the first attribute when absent.
    pub group_attribute: Option<String>,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let d = PredictorTrainConfig::default();
        Self {
            hidden: d.hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: d.seed,
            patience: d.patience,
            group_attribute: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSection {
    pub gammas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for PilotSection {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 1.0, 2.0],
            seeds: (0..10).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; syntax and type errors carry line context.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads, parses and validates; relative CSV paths are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(e))))?;
        if let Some(csv) = &mut config.data.csv {
            if csv.path.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                csv.path = base.join(&csv.path);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();

        match (&self.data.synth, &self.data.csv) {
            (None, None) => out.push("data: no dataset source; set [data.synth] or [data.csv]".into()),
            (Some(_), Some(_)) => {
                out.push("data: both [data.synth] and [data.csv] are set; keep exactly one".into())
            }
            _ => {}
        }
        if let Some(s) = &self.data.synth {
            out.extend(s.problems().into_iter().map(|p| format!("data.synth.{p}")));
        }
        if let Some(c) = &self.data.csv {
            if c.path.as_os_str().is_empty() {
                out.push("data.csv.path is missing".into());
            }
            if c.sensitive.is_empty() {
                out.push("data.csv.sensitive must name at least one column".into());
            }
            if c.label.is_empty() {
                out.push("data.csv.label is missing".into());
            }
        }

        let r = [self.split.train, self.split.validation, self.split.test];
        for (name, v) in ["train", "validation", "test"].iter().zip(r) {
            if !(v > 0.0 && v < 1.0) {
                out.push(format!("split.{name} must lie in (0, 1), got {v}"));
            }
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(format!(
                "split: train + validation + test must sum to 1, got {sum}"
            ));
        }

        if self.methods.is_empty() {
            out.push("methods: list is empty".into());
        }
        let mut seen = BTreeSet::new();
        for name in &self.methods {
            match name.parse::<Method>() {
                Ok(m) => {
                    if !seen.insert(m) {
                        out.push(format!("methods: `{name}` is listed twice"));
                    }
                }
                Err(e) => out.push(format!("methods: {}", strip_prefix(e))),
            }
        }

        out.extend(self.cvae.architecture_problems());
        out.extend(self.cvae.training().problems());
        out.extend(self.predictor_config(0).problems());

        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            out.push(format!(
                "metrics.threshold must lie in [0, 1], got {}",
                self.metrics.threshold
            ));
        }
        if self.pilot.gammas.is_empty() {
            out.push("pilot.gammas: list is empty".into());
        }
        if self.pilot.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            out.push("pilot.gammas must be finite and >= 0".into());
        }
        if self.pilot.seeds.is_empty() {
            out.push("pilot.seeds: list is empty".into());
        }
        if let (Some(name), Some(s)) = (&self.predictor.group_attribute, &self.data.synth) {
            let valid: Vec<String> = (1..=s.attributes).map(|j| format!("s{j}")).collect();
            if !valid.contains(name) {
                out.push(format!(
                    "predictor.group_attribute `{name}` is not a synthetic attribute ({})",
                    valid.join(", ")
                ));
            }
        }
        if let (Some(name), Some(c)) = (&self.predictor.group_attribute, &self.data.csv) {
            if !c.sensitive.contains(name) {
                out.push(format!(
                    "predictor.group_attribute `{name}` is not listed in data.csv.sensitive"
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Parsed method list; call after [`ExperimentConfig::validate`].
    pub fn method_list(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    fn predictor_config(&self, group_attribute: usize) -> PredictorTrainConfig {
        let p = &self.predictor;
        PredictorTrainConfig {
            hidden: p.hidden,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            weight_decay: p.weight_decay,
            seed: p.seed,
            patience: p.patience,
            class_weights: ClassWeightMode::None,
            group_attribute,
        }
    }

    /// Shared model settings with the group attribute resolved by name.
    pub fn settings(&self, schema: &SensitiveSchema) -> Result<Settings> {
        let group = match &self.predictor.group_attribute {
            None => 0,
            Some(name) => schema
                .attributes()
                .iter()
                .position(|a| &a.name == name)
                .ok_or_else(|| {
                    Error::Config(format!("predictor.group_attribute `{name}` not in the dataset"))
                })?,
        };
        Ok(Settings {
            cvae: self.cvae.architecture(),
            cvae_train: self.cvae.training(),
            normalize_weights: self.cvae.normalize_weights,
            predictor: self.predictor_config(group),
            threshold: self.metrics.threshold,
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.data.synth, &self.data.csv) {
            (Some(s), None) => Ok(synth::generate(s)?.0),
            (None, Some(c)) => {
                let features = if c.features.is_empty() {
                    infer_features(&c.path, &c.sensitive, &c.label)?
                } else {
                    c.features.clone()
                };
                let roles = ColumnRoles {
                    features,
                    sensitive: c.sensitive.clone(),
                    label: c.label.clone(),
                };
                load_csv(&c.path, &roles, c.missing)
            }
            _ => Err(Error::Config("exactly one dataset source is required".into())),
        }
    }
}

impl CvaeSection {
    fn architecture_problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.latent_dim == 0 {
            out.push("cvae.latent_dim must be at least 1".to_string());
        }
        if self.hidden == 0 {
            out.push("cvae.hidden must be at least 1".to_string());
        }
        out
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn infer_features(path: &Path, sensitive: &[String], label: &str) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("{}: {e}", path.display())),
        _ => Error::CsvFormat(e),
    })?;
    Ok(reader
        .headers()?
        .iter()
        .filter(|h| *h != label && !sensitive.iter().any(|s| s == h))
        .map(str::to_string)
        .collect())
}

// ---------------------------------------------------------------------------
// Output helpers

/// Append-only run log; the only file with timestamps.
pub struct RunLog {
    file: fs::File,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn line(&mut self, message: &str) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or_default();
        let _ = writeln!(self.file, "[{now:.3}] {message}");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_string(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `record_id, score, label, <sensitive columns>`.
pub fn scores_csv(record_ids: &[usize], scores: &[f64], dataset: &Dataset) -> Result<String> {
    if record_ids.len() != scores.len() || scores.len() != dataset.len() {
        return Err(Error::shape("scores", &[record_ids.len(), scores.len()], &[dataset.len()]));
    }
    let schema = dataset.schema();
    let mut header = vec!["record_id".to_string(), "score".into(), "label".into()];
    header.extend(schema.attributes().iter().map(|a| a.name.clone()));
    let rows = record_ids
        .iter()
        .zip(scores)
        .zip(dataset.records())
        .map(|((id, score), r)| {
            let mut row = vec![id.to_string(), score.to_string(), r.y.to_string()];
            row.extend(
                r.s.iter()
                    .zip(schema.attributes())
                    .map(|(&c, a)| a.categories[c].clone()),
            );
            row
        });
    csv_string(std::iter::once(header).chain(rows))
}

/// `record_id, z1..zK, <sensitive columns>`.
pub fn latent_csv(record_ids: &[usize], z: &Tensor, dataset: &Dataset) -> Result<String> {
    if z.rank() != 2 || z.rows() != dataset.len() || record_ids.len() != dataset.len() {
        return Err(Error::shape("latent", z.shape(), &[dataset.len()]));
    }
    let schema = dataset.schema();
    let mut header = vec!["record_id".to_string()];
    header.extend((1..=z.cols()).map(|k| format!("z{k}")));
    header.extend(schema.attributes().iter().map(|a| a.name.clone()));
    let rows = record_ids.iter().zip(dataset.records()).enumerate().map(|(i, (id, r))| {
        let mut row = vec![id.to_string()];
        row.extend(z.row(i).iter().map(|v| v.to_string()));
        row.extend(
            r.s.iter()
                .zip(schema.attributes())
                .map(|(&c, a)| a.categories[c].clone()),
        );
        row
    });
    csv_string(std::iter::once(header).chain(rows))
}

// ---------------------------------------------------------------------------
// Compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeColumns {
    pub name: String,
    pub disparity: Option<f64>,
    pub tpr_gap: Option<f64>,
    pub fpr_gap: Option<f64>,
}

/// One method's row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    /// `ok` or `failed`.
    pub status: String,
    pub split_hash: String,
    pub auroc: Option<f64>,
    pub attributes: Vec<AttributeColumns>,
    pub error: Option<String>,
}

impl ResultRow {
    fn ok(method: Method, split_hash: &str, report: &MetricsReport) -> Self {
        Self {
            method: method.name().into(),
            status: "ok".into(),
            split_hash: split_hash.into(),
            auroc: Some(report.auroc),
            attributes: report
                .attributes
                .iter()
                .map(|a| AttributeColumns {
                    name: a.name.clone(),
                    disparity: a.disparity,
                    tpr_gap: a.tpr_gap,
                    fpr_gap: a.fpr_gap,
                })
                .collect(),
            error: None,
        }
    }

    fn failed(method: Method, split_hash: &str, schema: &SensitiveSchema, error: &Error) -> Self {
        Self {
            method: method.name().into(),
            status: "failed".into(),
            split_hash: split_hash.into(),
            auroc: None,
            attributes: schema
                .attributes()
                .iter()
                .map(|a| AttributeColumns {
                    name: a.name.clone(),
                    disparity: None,
                    tpr_gap: None,
                    fpr_gap: None,
                })
                .collect(),
            error: Some(error.to_string()),
        }
    }
}

pub fn results_csv(rows: &[ResultRow], schema: &SensitiveSchema) -> Result<String> {
    let mut header = vec![
        "method".to_string(),
        "status".into(),
        "split_hash".into(),
        "auroc".into(),
    ];
    for a in schema.attributes() {
        header.push(format!("{}.disparity", a.name));
        header.push(format!("{}.tpr_gap", a.name));
        header.push(format!("{}.fpr_gap", a.name));
    }
    header.push("error".into());
    let body = rows.iter().map(|r| {
        let mut row = vec![
            r.method.clone(),
            r.status.clone(),
            r.split_hash.clone(),
            opt(r.auroc),
        ];
        for a in &r.attributes {
            row.extend([opt(a.disparity), opt(a.tpr_gap), opt(a.fpr_gap)]);
        }
        row.push(r.error.clone().unwrap_or_default());
        row
    });
    csv_string(std::iter::once(header).chain(body))
}

/// Plain-text table: one row per method, AUROC then per-attribute gaps.
pub fn results_table(rows: &[ResultRow], schema: &SensitiveSchema) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut header = vec!["method".to_string(), "AUROC".to_string()];
    for a in schema.attributes() {
        header.push(format!("{} disparity", a.name));
        header.push(format!("{} dTPR", a.name));
        header.push(format!("{} dFPR", a.name));
    }
    let mut lines: Vec<Vec<String>> = vec![header];
    for r in rows {
        let mut line = vec![r.method.clone(), fmt(r.auroc)];
        for a in &r.attributes {
            line.extend([fmt(a.disparity), fmt(a.tpr_gap), fmt(a.fpr_gap)]);
        }
        if r.status != "ok" {
            line[1] = "FAILED".into();
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l.get(c).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in lines.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Files written by a run, relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub split_hash: String,
    pub rows: Vec<ResultRow>,
    pub files: Vec<String>,
}

struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        write_file(&self.root.join(rel), contents)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }
}

/// Trains every configured method on one split and writes the run
/// directory. On a method failure the completed rows and a failed row are
/// still written, then the error is returned with the method name.
pub fn run_compare(config: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    config.validate()?;
    let methods = config.method_list()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = RunLog::open(&out.join("run.log"))?;
    log.line(&format!("compare started: methods {}", config.methods.join(", ")));
    let mut dir = RunDir {
        root: out.to_path_buf(),
        files: Vec::new(),
    };
    dir.write("config.toml", &config.to_toml()?)?;

    let dataset = config.load_dataset()?;
    let settings = config.settings(dataset.schema())?;
    let prep = Prepared::new(&dataset, &config.split.ratios(), config.split.seed)?;
    let split_hash = prep.split.fingerprint();
    let context = DataContext {
        roles: dataset.column_roles(),
        schema: dataset.schema().clone(),
        standardizer: prep.standardizer.clone(),
    };
    log.line(&format!(
        "data: {} records, split {}/{}/{}, hash {split_hash}",
        dataset.len(),
        prep.train.len(),
        prep.validation.len(),
        prep.test.len()
    ));

    let mut stage1: Option<Stage1> = None;
    let mut rows = Vec::with_capacity(methods.len());
    let mut failure = None;
    for &method in &methods {
        log.line(&format!("training {method}"));
        let outcome = (|| -> Result<MethodOutcome> {
            if method.needs_latent() && stage1.is_none() {
                let s1 = fit_stage1(&prep, &settings)?;
                let meta = CvaeCheckpointMeta {
                    train: settings.cvae_train.clone(),
                    context: Some(context.clone()),
                    trace: s1.trace.clone(),
                };
                s1.model.save(&dir.path("checkpoints/cvae.json")?, &meta)?;
                let trace = csv_string(
                    std::iter::once(vec!["epoch".to_string(), "weighted_elbo".into()]).chain(
                        s1.trace
                            .iter()
                            .enumerate()
                            .map(|(e, v)| vec![(e + 1).to_string(), v.to_string()]),
                    ),
                )?;
                dir.write("cvae_trace.csv", &trace)?;
                stage1 = Some(s1);
            }
            run_method(method, &prep, stage1.as_ref(), &settings)
        })();
        match outcome {
            Ok(o) => {
                let name = method.name();
                dir.write(&format!("scores/{name}.csv"), &scores_csv(&prep.split.test, &o.test_scores, &prep.test)?)?;
                dir.write(&format!("metrics/{name}.csv"), &o.report.to_csv()?)?;
                dir.write(&format!("metrics/{name}.json"), &o.report.to_json()?)?;
                let mut train_cfg = settings.predictor.clone();
                if method == Method::Reweighting {
                    train_cfg.class_weights = ClassWeightMode::Kamiran;
                }
                let meta = PredictorCheckpointMeta {
                    method,
                    train: train_cfg,
                    context: Some(context.clone()),
                    trace: o.trace.clone(),
                };
                o.classifier.save(&dir.path(&format!("checkpoints/{name}.json"))?, &meta)?;
                log.line(&format!("{method}: test AUROC {:.4}", o.report.auroc));
                rows.push(ResultRow::ok(method, &split_hash, &o.report));
            }
            Err(e) => {
                log.line(&format!("{method} failed: {e}"));
                rows.push(ResultRow::failed(method, &split_hash, dataset.schema(), &e));
                failure = Some((method, e));
                break;
            }
        }
    }

    dir.write("results.csv", &results_csv(&rows, dataset.schema())?)?;
    dir.write("results.json", &serde_json::to_string_pretty(&rows)?)?;
    dir.write("table.txt", &results_table(&rows, dataset.schema()))?;
    let mut files = dir.files.clone();
    files.push("summary.json".into());
    let summary = RunSummary {
        split_hash,
        rows,
        files,
    };
    write_file(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    match failure {
        Some((method, e)) => {
            log.line("compare aborted");
            Err(Error::Method {
                method: method.name().into(),
                source: Box::new(e),
            })
        }
        None => {
            log.line("compare finished");
            Ok(summary)
        }
    }
}

// ---------------------------------------------------------------------------
// Pilot

/// `kind, gamma, seed, auroc, disparity` with `run` rows then `median` rows.
pub fn pilot_csv(table: &PilotTable) -> Result<String> {
    let header = ["kind", "gamma", "seed", "auroc", "disparity"].map(String::from).to_vec();
    let runs = table.runs.iter().map(|r| {
        vec![
            "run".into(),
            r.gamma.to_string(),
            r.seed.to_string(),
            r.auroc.to_string(),
            r.disparity.to_string(),
        ]
    });
    let medians = table.medians.iter().map(|m| {
        vec![
            "median".into(),
            m.gamma.to_string(),
            String::new(),
            m.auroc.to_string(),
            m.disparity.to_string(),
        ]
    });
    csv_string(std::iter::once(header).chain(runs).chain(medians))
}

/// DNN pilot sweep over `config.pilot` on the synthetic source.
pub fn run_pilot(config: &ExperimentConfig, out: &Path) -> Result<PilotTable> {
    config.validate()?;
    let base = config
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("pilot needs a [data.synth] source".into()))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = RunLog::open(&out.join("run.log"))?;
    log.line(&format!(
        "pilot started: {} gammas x {} seeds",
        config.pilot.gammas.len(),
        config.pilot.seeds.len()
    ));
    let (probe, _) = synth::generate(&SynthConfig { records: base.records.min(50), ..base.clone() })?;
    let settings = config.settings(probe.schema())?;
    let table = synth::pilot_sweep(
        base,
        &config.pilot.gammas,
        &config.pilot.seeds,
        &config.split.ratios(),
        &settings,
    )?;
    write_file(&out.join("config.toml"), &config.to_toml()?)?;
    write_file(&out.join("pilot.csv"), &pilot_csv(&table)?)?;
    write_file(&out.join("pilot.json"), &serde_json::to_string_pretty(&table)?)?;
    log.line("pilot finished");
    Ok(table)
}

// ---------------------------------------------------------------------------
// Checkpoint reuse

/// Posterior means for `raw` under a saved CVAE, written as CSV with
/// record ids `0..N`. Returns the latent matrix.
pub fn export_latent(checkpoint: &Path, raw: &Dataset, out: &Path) -> Result<Tensor> {
    let (model, meta) = CvaeModel::load(checkpoint)?;
    let context = meta
        .context
        .ok_or_else(|| Error::Checkpoint("cvae checkpoint has no data context".into()))?;
    let data = context.prepare(raw)?;
    let enc = data.encode();
    if enc.x.cols() != model.features() || enc.s.cols() != model.sensitive() {
        return Err(Error::shape(
            "export-latent",
            &[enc.x.cols(), enc.s.cols()],
            &[model.features(), model.sensitive()],
        ));
    }
    let z = crate::cvae::infer_substitute_confounders(&model, &enc)?;
    let ids: Vec<usize> = (0..data.len()).collect();
    write_file(out, &latent_csv(&ids, &z, &data)?)?;
    Ok(z)
}

/// Scores `raw` with a saved classifier (and CVAE, for latent methods).
pub fn evaluate(
    checkpoint: &Path,
    cvae_checkpoint: Option<&Path>,
    raw: &Dataset,
    threshold: f64,
) -> Result<(Vec<f64>, MetricsReport, Dataset)> {
    let (classifier, meta) = Classifier::load(checkpoint)?;
    let context = meta
        .context
        .ok_or_else(|| Error::Checkpoint("predictor checkpoint has no data context".into()))?;
    let data = context.prepare(raw)?;
    let z = if classifier.uses_latent() {
        let path = cvae_checkpoint.ok_or_else(|| {
            Error::Config(format!("method `{}` needs the CVAE checkpoint", meta.method))
        })?;
        let (cvae, _) = CvaeModel::load(path)?;
        Some(crate::cvae::infer_substitute_confounders(&cvae, &data.encode())?)
    } else {
        None
    };
    let inputs = PredictorData::from_dataset(&data, z)?;
    let scores = classifier.predict(&inputs)?;
    let report = metrics::report(&scores, &data, threshold)?;
    Ok((scores, report, data))
}
