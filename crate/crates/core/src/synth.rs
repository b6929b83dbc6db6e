//! Synthetic records from a linear-Gaussian / logistic structural causal
//! model with an unobserved confounder.
//!
//! Per record, with `s_j ~ Bernoulli(π)` independently and `z ~ N(0, I)`:
//!
//! ```text
//! x = A z + η B onehot(s) + ε,            ε ~ N(0, σ² I)
//! y ~ Bernoulli(sigmoid(c_x·x + η c_s·onehot(s) + γ c_z·z + b))
//! ```
//!
//! There is no `S -> Z` edge. `γ` sets how strongly the unobserved `z`
//! drives the outcome; `η` sets how strongly the sensitive attributes shift
//! features and outcome. The intercept `b` is found by bisection so the
//! realized positive rate is as close to one half as the draws allow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::data::{Dataset, Record, SensitiveAttribute, SensitiveSchema, SplitRatios};
use crate::error::{Error, Result};
use crate::metrics::median;
use crate::pipeline::{run_method, Prepared, Settings};
use crate::predictor::Method;
use crate::tensor::Tensor;

pub use crate::data::save_csv;

pub const MAJORITY: &str = "majority";
pub const MINORITY: &str = "minority";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Record count `N`.
    pub records: usize,
    /// Feature dimension `M`.
    pub features: usize,
    /// True confounder dimension.
    pub confounders: usize,
    /// Number of binary sensitive attributes `J`.
    pub attributes: usize,
    /// Probability of the minority category, per attribute.
    pub minority_prob: f64,
    /// Confounding strength `γ` (Z -> Y).
    pub gamma: f64,
    /// Sensitive-effect strength `η` (S -> X and S -> Y).
    pub eta: f64,
    /// Feature noise standard deviation `σ_x`.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            records: 5000,
            features: 20,
            confounders: 4,
            attributes: 1,
            minority_prob: 0.2,
            gamma: 1.0,
            eta: 1.0,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("records", self.records),
            ("features", self.features),
            ("confounders", self.confounders),
            ("attributes", self.attributes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if !(self.minority_prob > 0.0 && self.minority_prob <= 0.5) {
            problems.push(format!("minority_prob must lie in (0, 0.5], got {}", self.minority_prob));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            problems.push(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            problems.push(format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            problems.push(format!("noise_sd must be > 0, got {}", self.noise_sd));
        }
        problems
    }
}

/// Mechanism parameters and latent draws behind a generated dataset.
///
/// `b` and `c_s` are indexed by the dataset's one-hot encoding, whose
/// category order per attribute is first appearance in the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `N × K_true` true confounders.
    pub z: Tensor,
    /// `M × K_true`, Z -> X.
    pub a: Tensor,
    /// `M × J_enc`, S -> X (before `η`).
    pub b: Tensor,
    pub c_x: Vec<f64>,
    /// Before `η`.
    pub c_s: Vec<f64>,
    /// Before `γ`.
    pub c_z: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub intercept: f64,
}

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Draws a dataset; a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let SynthConfig {
        records: n,
        features: m,
        confounders: k,
        attributes: j,
        ..
    } = *config;
    let j_enc = 2 * j;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Coefficients first so they depend on the seed only.
    let a = normals(&mut rng, m * k, 1.0 / (k as f64).sqrt());
    let b = normals(&mut rng, m * j_enc, 1.0 / (j_enc as f64).sqrt());
    let c_x = normals(&mut rng, m, 1.0 / (m as f64).sqrt());
    let c_s = normals(&mut rng, j_enc, 1.0 / (j_enc as f64).sqrt());
    let c_z = normals(&mut rng, k, 1.0 / (k as f64).sqrt());

    let mut minority = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n * k);
    let mut xs = Vec::with_capacity(n);
    let mut base_logits = Vec::with_capacity(n);
    let mut uniforms = Vec::with_capacity(n);
    for _ in 0..n {
        let s: Vec<bool> = (0..j).map(|_| rng.random_bool(config.minority_prob)).collect();
        let z = normals(&mut rng, k, 1.0);
        let eps = normals(&mut rng, m, config.noise_sd);
        let u: f64 = rng.random();

        // canonical one-hot: [majority, minority] per attribute
        let onehot: Vec<f64> = s
            .iter()
            .flat_map(|&bit| if bit { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect();
        let x: Vec<f64> = (0..m)
            .map(|r| {
                let az: f64 = (0..k).map(|c| a[r * k + c] * z[c]).sum();
                let bs: f64 = (0..j_enc).map(|c| b[r * j_enc + c] * onehot[c]).sum();
                az + config.eta * bs + eps[r]
            })
            .collect();
        let logit = x.iter().zip(&c_x).map(|(x, c)| x * c).sum::<f64>()
            + config.eta * onehot.iter().zip(&c_s).map(|(s, c)| s * c).sum::<f64>()
            + config.gamma * z.iter().zip(&c_z).map(|(z, c)| z * c).sum::<f64>();

        minority.push(s);
        zs.extend(z);
        xs.push(x);
        base_logits.push(logit);
        uniforms.push(u);
    }

    let intercept = calibrate_intercept(&base_logits, &uniforms);
    let labels: Vec<u8> = base_logits
        .iter()
        .zip(&uniforms)
        .map(|(&l, &u)| u8::from(u < sigmoid(l + intercept)))
        .collect();

    // Category order = first appearance, so a CSV round trip reproduces
    // the schema exactly.
    let mut orders: Vec<Vec<bool>> = vec![Vec::new(); j];
    for s in &minority {
        for (order, &bit) in orders.iter_mut().zip(s) {
            if !order.contains(&bit) {
                order.push(bit);
            }
        }
    }
    let schema = SensitiveSchema::new(
        orders
            .iter()
            .enumerate()
            .map(|(idx, order)| SensitiveAttribute {
                name: format!("s{}", idx + 1),
                categories: order
                    .iter()
                    .map(|&bit| if bit { MINORITY } else { MAJORITY }.to_string())
                    .collect(),
            })
            .collect(),
    )?;

    // Columns of B and entries of c_s in dataset encoding order. A category
    // that never occurs has no column.
    let mut enc_cols = Vec::new();
    for (attr, order) in orders.iter().enumerate() {
        for &bit in order {
            enc_cols.push(2 * attr + usize::from(bit));
        }
    }
    let b_data: Vec<f64> = (0..m)
        .flat_map(|r| enc_cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| b[r * j_enc + c])
        .collect();

    let records = xs
        .into_iter()
        .zip(&minority)
        .zip(labels)
        .map(|((x, s), y)| Record {
            x,
            s: s.iter()
                .zip(&orders)
                .map(|(bit, order)| order.iter().position(|b| b == bit).expect("seen"))
                .collect(),
            y,
        })
        .collect();
    let feature_names = (1..=m).map(|i| format!("x{i}")).collect();
    let dataset = Dataset::new(feature_names, "y", schema, records)?;

    let truth = GroundTruth {
        z: Tensor::new(vec![n, k], zs)?,
        a: Tensor::new(vec![m, k], a)?,
        b: Tensor::new(vec![m, enc_cols.len()], b_data)?,
        c_x,
        c_s: enc_cols.iter().map(|&c| c_s[c]).collect(),
        c_z,
        gamma: config.gamma,
        eta: config.eta,
        intercept,
    };
    Ok((dataset, truth))
}

/// Bisection on the intercept so that `#{u_i < sigmoid(l_i + b)}` is as
/// close to `n / 2` as possible. The count is non-decreasing in `b`.
fn calibrate_intercept(logits: &[f64], uniforms: &[f64]) -> f64 {
    let positives = |b: f64| {
        logits
            .iter()
            .zip(uniforms)
            .filter(|(&l, &u)| u < sigmoid(l + b))
            .count()
    };
    let target = logits.len() as f64 / 2.0;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let count = positives(mid) as f64;
        let miss = (count - target).abs();
        if miss < best.0 {
            best = (miss, mid);
        }
        if count < target {
            lo = mid;
        } else if count > target {
            hi = mid;
        } else {
            break;
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRun {
    pub gamma: f64,
    pub seed: u64,
    pub auroc: f64,
    pub disparity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotMedian {
    pub gamma: f64,
    pub disparity: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotTable {
    pub runs: Vec<PilotRun>,
    /// One entry per element of the gamma list, in list order.
    pub medians: Vec<PilotMedian>,
}

/// For each `(γ, seed)`: generate with that `γ` and seed, split with the
/// same seed, train the plain DNN (predictor seed = seed) and record test
/// AUROC and the disparity of `settings.predictor.group_attribute`.
pub fn pilot_sweep(
    base: &SynthConfig,
    gammas: &[f64],
    seeds: &[u64],
    ratios: &SplitRatios,
    settings: &Settings,
) -> Result<PilotTable> {
    if gammas.is_empty() {
        return Err(Error::Config("pilot gamma list is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("pilot seed list is empty".into()));
    }
    let grid: Vec<(f64, u64)> = gammas
        .iter()
        .flat_map(|&g| seeds.iter().map(move |&s| (g, s)))
        .collect();
    let attribute = settings.predictor.group_attribute;
    let runs = grid
        .par_iter()
        .map(|&(gamma, seed)| {
            let (dataset, _) = generate(&SynthConfig { gamma, seed, ..base.clone() })?;
            let prep = Prepared::new(&dataset, ratios, seed)?;
            let mut run_settings = settings.clone();
            run_settings.predictor.seed = seed;
            let outcome = run_method(Method::Dnn, &prep, None, &run_settings)?;
            let attr = outcome.report.attributes.get(attribute).ok_or_else(|| {
                Error::Config(format!("group attribute index {attribute} out of range"))
            })?;
            let disparity = attr.disparity.ok_or_else(|| {
                Error::UndefinedMetric(format!(
                    "disparity of `{}` at gamma {gamma}, seed {seed}",
                    attr.name
                ))
            })?;
            Ok(PilotRun {
                gamma,
                seed,
                auroc: outcome.report.auroc,
                disparity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let medians = gammas
        .iter()
        .enumerate()
        .map(|(i, &gamma)| {
            let block = &runs[i * seeds.len()..(i + 1) * seeds.len()];
            PilotMedian {
                gamma,
                disparity: median(block.iter().map(|r| r.disparity).collect()).expect("non-empty"),
                auroc: median(block.iter().map(|r| r.auroc).collect()).expect("non-empty"),
            }
        })
        .collect();
    Ok(PilotTable { runs, medians })
}
