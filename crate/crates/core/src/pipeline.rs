//! End-to-end training of one dataset: split, standardize, fit the CVAE,
//! train each method and score the test split.

use serde::{Deserialize, Serialize};

use crate::cvae::{self, CvaeConfig, CvaeModel, CvaeTrainConfig};
use crate::data::{
    attribute_frequencies, propensity_weights, split_indices, standardize, Dataset, SplitIndices,
    SplitRatios, Standardizer,
};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, DEFAULT_THRESHOLD};
use crate::predictor::{
    ablation_stage1_only, ablation_stage2_only, train_dnn, train_primed, ClassWeightMode,
    Classifier, Method, PredictorData, PredictorTrainConfig, TrainTrace,
};
use crate::tensor::Tensor;

/// Model hyperparameters shared by every method in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub cvae: CvaeConfig,
    pub cvae_train: CvaeTrainConfig,
    /// Divide propensity weights by their mean.
    pub normalize_weights: bool,
    pub predictor: PredictorTrainConfig,
    pub threshold: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            cvae: CvaeConfig::default(),
            cvae_train: CvaeTrainConfig::default(),
            normalize_weights: true,
            predictor: PredictorTrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Standardized splits of one dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub split: SplitIndices,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn new(dataset: &Dataset, ratios: &SplitRatios, seed: u64) -> Result<Self> {
        let split = split_indices(dataset.len(), ratios, seed)?;
        let train = dataset.subset(&split.train)?;
        let validation = dataset.subset(&split.validation)?;
        let test = dataset.subset(&split.test)?;
        let (train, mut rest, standardizer) = standardize(&train, &[&validation, &test])?;
        let test = rest.pop().expect("two");
        let validation = rest.pop().expect("two");
        Ok(Self {
            train,
            validation,
            test,
            split,
            standardizer,
        })
    }
}

/// Trained CVAE and its posterior means on every split.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: CvaeModel,
    pub trace: Vec<f64>,
    pub z_train: Tensor,
    pub z_validation: Tensor,
    pub z_test: Tensor,
}

/// Fits the propensity-weighted CVAE on the training split.
pub fn fit_stage1(prep: &Prepared, settings: &Settings) -> Result<Stage1> {
    let enc = prep.train.encode();
    let freq = attribute_frequencies(&prep.train);
    let weights = propensity_weights(
        &freq,
        prep.train.schema(),
        prep.train.records(),
        settings.normalize_weights,
    )?;
    let init = CvaeModel::init(
        prep.train.num_features(),
        prep.train.schema().encoded_len(),
        &settings.cvae,
        settings.cvae_train.seed,
    );
    let (model, trace) = cvae::train(init, &enc, Some(&weights), &settings.cvae_train)?;
    let infer = |d: &Dataset| cvae::infer_substitute_confounders(&model, &d.encode());
    Ok(Stage1 {
        z_train: infer(&prep.train)?,
        z_validation: infer(&prep.validation)?,
        z_test: infer(&prep.test)?,
        trace,
        model,
    })
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub classifier: Classifier,
    pub trace: TrainTrace,
    pub test_scores: Vec<f64>,
    pub report: MetricsReport,
}

/// Trains `method` on the training split and reports on the test split.
pub fn run_method(
    method: Method,
    prep: &Prepared,
    stage1: Option<&Stage1>,
    settings: &Settings,
) -> Result<MethodOutcome> {
    let latent = |pick: fn(&Stage1) -> &Tensor| -> Result<Option<Tensor>> {
        if method.needs_latent() {
            let s1 = stage1.ok_or_else(|| {
                Error::Data(format!("method `{method}` needs a trained CVAE"))
            })?;
            Ok(Some(pick(s1).clone()))
        } else {
            Ok(None)
        }
    };
    let train = PredictorData::from_dataset(&prep.train, latent(|s| &s.z_train)?)?;
    let val = PredictorData::from_dataset(&prep.validation, latent(|s| &s.z_validation)?)?;
    let test = PredictorData::from_dataset(&prep.test, latent(|s| &s.z_test)?)?;

    let mut cfg = settings.predictor.clone();
    cfg.class_weights = ClassWeightMode::None;
    let (classifier, trace) = match method {
        Method::Primed => train_primed(&train, Some(&val), &cfg)?,
        Method::Dnn => train_dnn(&train, Some(&val), &cfg)?,
        Method::Reweighting => {
            cfg.class_weights = ClassWeightMode::Kamiran;
            train_dnn(&train, Some(&val), &cfg)?
        }
        Method::Stage1 => ablation_stage1_only(&train, Some(&val), &cfg)?,
        Method::Stage2 => ablation_stage2_only(&train, Some(&val), settings.cvae.latent_dim, &cfg)?,
    };
    let test_scores = classifier.predict(&test)?;
    let report = metrics::report(&test_scores, &prep.test, settings.threshold)?;
    Ok(MethodOutcome {
        method,
        classifier,
        trace,
        test_scores,
        report,
    })
}
