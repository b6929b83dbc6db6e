//! Stage 1: conditional VAE with propensity-weighted ELBO.
//!
//! Encoder `q(z | x, s)`: `[x; s] -> H (tanh) -> 2K`, split into `μ` and a
//! log-variance clamped to `[-10, 10]`. Decoder `p(x | z, s)`:
//! `[z; s] -> H (tanh) -> M`, read as the mean of a unit-variance Gaussian,
//! so the reconstruction term is `-½‖x - x̂‖²` (constant dropped). The prior
//! is `N(0, I_K)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{DataContext, EncodedData, PropensityWeights};
use crate::error::{Error, Result};
use crate::nn::{row_sums, weighted_sum, BoundLinear, BoundMlp, Mlp};
use crate::optim::{AdamW, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    /// Latent dimension `K`.
    pub latent_dim: usize,
    /// Hidden width `H` of encoder and decoder.
    pub hidden: usize,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self { latent_dim: 8, hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeTrainConfig {
    /// Monte Carlo samples `L` per record.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            epochs: 50,
            batch_size: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
        }
    }
}

impl CvaeTrainConfig {
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
        if self.samples == 0 {
            problems.push("cvae.samples must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("cvae.epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("cvae.batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("cvae.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("cvae.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    latent: usize,
}

/// Model parameters registered on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundCvae {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    latent: usize,
}

impl CvaeModel {
    pub fn init(features: usize, sensitive: usize, config: &CvaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.latent_dim;
        Self {
            encoder: Mlp::init(features + sensitive, config.hidden, 2 * k, &mut rng),
            decoder: Mlp::init(k + sensitive, config.hidden, features, &mut rng),
            latent: k,
        }
    }

    /// Builds a model from explicit networks; checks their dimensions agree.
    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let out = encoder.output.outputs();
        if out == 0 || !out.is_multiple_of(2) {
            return Err(Error::Data(format!("encoder output width {out} is not 2K")));
        }
        let k = out / 2;
        let sensitive = decoder.hidden.inputs().checked_sub(k).ok_or_else(|| {
            Error::Data("decoder input narrower than the latent dimension".into())
        })?;
        if encoder.hidden.inputs() != decoder.output.outputs() + sensitive {
            return Err(Error::shape(
                "cvae",
                &[encoder.hidden.inputs()],
                &[decoder.output.outputs() + sensitive],
            ));
        }
        Ok(Self { encoder, decoder, latent: k })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn features(&self) -> usize {
        self.decoder.output.outputs()
    }

    pub fn sensitive(&self) -> usize {
        self.decoder.hidden.inputs() - self.latent
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden.outputs()
    }

    pub fn bind(&self, g: &mut Graph) -> BoundCvae {
        BoundCvae {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
            latent: self.latent,
        }
    }

    /// Encoder then decoder parameters, in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }

    fn check_dims(&self, x: &Tensor, s: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.features() {
            return Err(Error::shape("cvae features", x.shape(), &[x.rows(), self.features()]));
        }
        if s.rank() != 2 || s.cols() != self.sensitive() || s.rows() != x.rows() {
            return Err(Error::shape("cvae sensitive", s.shape(), &[x.rows(), self.sensitive()]));
        }
        Ok(())
    }

    /// Posterior parameters `(μ, logvar)` for one record.
    pub fn encode(&self, x: &[f64], s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, lv) = self.encode_batch(&row(x), &row(s))?;
        Ok((mu.into_data(), lv.into_data()))
    }

    /// Posterior parameters for every row, each `N × K`.
    pub fn encode_batch(&self, x: &Tensor, s: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_dims(x, s)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let (xn, sn) = (g.constant(x.clone()), g.constant(s.clone()));
        let (mu, lv) = bound.encode(&mut g, xn, sn)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Decoder mean `x̂` for one latent vector.
    pub fn decode(&self, z: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent {
            return Err(Error::shape("decode latent", &[z.len()], &[self.latent]));
        }
        if s.len() != self.sensitive() {
            return Err(Error::shape("decode sensitive", &[s.len()], &[self.sensitive()]));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let (zn, sn) = (g.constant(row(z)), g.constant(row(s)));
        let xhat = bound.decode(&mut g, zn, sn)?;
        Ok(g.value(xhat).data().to_vec())
    }

    /// Decoder mean and the reconstruction term `-½‖x - x̂‖²`.
    pub fn reconstruct(&self, x: &[f64], z: &[f64], s: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.features() {
            return Err(Error::shape("reconstruct", &[x.len()], &[self.features()]));
        }
        let xhat = self.decode(z, s)?;
        let ll = gaussian_log_likelihood(x, &xhat);
        Ok((xhat, ll))
    }

    /// Single-record ELBO with `samples` reparameterized draws from `rng`.
    pub fn elbo<R: Rng>(&self, x: &[f64], s: &[f64], samples: usize, rng: &mut R) -> Result<f64> {
        if samples == 0 {
            return Err(Error::Config("ELBO needs at least one sample".into()));
        }
        let noise: Vec<Tensor> = (0..samples).map(|_| standard_normal(rng, 1, self.latent)).collect();
        let (value, _) = self.objective(&row(x), &row(s), None, &noise, false)?;
        Ok(value)
    }

    /// `Σ_i ω_i ELBO_i` over the rows of a batch for fixed noise (one
    /// `B × K` tensor per sample), and optionally its gradient with respect
    /// to every parameter. `None` weights means plain summation.
    pub fn objective(
        &self,
        x: &Tensor,
        s: &Tensor,
        weights: Option<&[f64]>,
        noise: &[Tensor],
        with_gradient: bool,
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_dims(x, s)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let (xn, sn) = (g.constant(x.clone()), g.constant(s.clone()));
        let column = bound.elbo(&mut g, xn, sn, noise)?;
        let total = match weights {
            Some(w) => {
                if w.len() != x.rows() {
                    return Err(Error::shape("weights", &[w.len()], &[x.rows()]));
                }
                weighted_sum(&mut g, column, w)?
            }
            None => g.reduce_sum(column),
        };
        let value = g.value(total).item()?;
        let grads = if with_gradient {
            g.backward(total)?.parameters()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    }

    pub fn save(&self, path: &Path, checkpoint: &CvaeCheckpointMeta) -> Result<()> {
        let doc = CvaeCheckpoint {
            version: CHECKPOINT_VERSION,
            meta: checkpoint.clone(),
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&doc)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CvaeCheckpointMeta)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: CvaeCheckpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported cvae checkpoint version {}",
                doc.version
            )));
        }
        let model = Self::from_parts(doc.model.encoder, doc.model.decoder)?;
        if model.latent != doc.model.latent {
            return Err(Error::Checkpoint("latent dimension disagrees with weights".into()));
        }
        Ok((model, doc.meta))
    }
}

impl BoundCvae {
    /// Rebinds parameter node ids in [`CvaeModel::params`] order.
    pub fn from_ids(ids: &[NodeId], latent: usize) -> Result<Self> {
        if ids.len() != 8 {
            return Err(Error::Data(format!("expected 8 parameter nodes, got {}", ids.len())));
        }
        let lin = |i: usize| BoundLinear { weight: ids[i], bias: ids[i + 1] };
        Ok(Self {
            encoder: BoundMlp { hidden: lin(0), output: lin(2) },
            decoder: BoundMlp { hidden: lin(4), output: lin(6) },
            latent,
        })
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId, s: NodeId) -> Result<(NodeId, NodeId)> {
        let input = g.concat(&[x, s])?;
        let out = self.encoder.forward(g, input)?;
        let mu = g.slice_cols(out, 0, self.latent)?;
        let lv = g.slice_cols(out, self.latent, self.latent)?;
        let lv = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mu, lv))
    }

    pub fn decode(&self, g: &mut Graph, z: NodeId, s: NodeId) -> Result<NodeId> {
        let input = g.concat(&[z, s])?;
        self.decoder.forward(g, input)
    }

    /// Per-row ELBO as a `B × 1` column, averaging the reconstruction term
    /// over the supplied noise draws.
    pub fn elbo(&self, g: &mut Graph, x: NodeId, s: NodeId, noise: &[Tensor]) -> Result<NodeId> {
        if noise.is_empty() {
            return Err(Error::Empty("elbo noise"));
        }
        let (mu, lv) = self.encode(g, x, s)?;
        let mut recon: Option<NodeId> = None;
        for eps in noise {
            let eps = g.constant(eps.clone());
            let z = reparameterize_node(g, mu, lv, eps)?;
            let xhat = self.decode(g, z, s)?;
            let ll = log_likelihood_node(g, x, xhat)?;
            recon = Some(match recon {
                Some(acc) => g.add(acc, ll)?,
                None => ll,
            });
        }
        let recon = g.scale(recon.expect("non-empty"), 1.0 / noise.len() as f64);
        let kl = kl_node(g, mu, lv)?;
        g.sub(recon, kl)
    }
}

/// `z = μ + exp(logvar / 2) ⊙ ε` on graph nodes.
pub fn reparameterize_node(g: &mut Graph, mu: NodeId, logvar: NodeId, eps: NodeId) -> Result<NodeId> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half)?;
    let noise = g.mul(sd, eps)?;
    g.add(mu, noise)
}

/// Row-wise `KL(N(μ, diag exp(logvar)) ‖ N(0, I))` as a `B × 1` column.
pub fn kl_node(g: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let var = g.exp(logvar)?;
    let mu2 = g.mul(mu, mu)?;
    let t = g.add(var, mu2)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0);
    let sums = row_sums(g, t)?;
    Ok(g.scale(sums, 0.5))
}

/// Row-wise `-½‖x - x̂‖²` as a `B × 1` column.
pub fn log_likelihood_node(g: &mut Graph, x: NodeId, xhat: NodeId) -> Result<NodeId> {
    let d = g.sub(x, xhat)?;
    let d2 = g.mul(d, d)?;
    let sums = row_sums(g, d2)?;
    Ok(g.scale(sums, -0.5))
}

pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::shape("reparameterize", &[mu.len(), logvar.len()], &[eps.len()]));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// `½ Σ_k (exp(lv_k) + μ_k² - 1 - lv_k)`.
pub fn kl_to_standard_normal(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

/// `-½‖x - x̂‖²`.
pub fn gaussian_log_likelihood(x: &[f64], xhat: &[f64]) -> f64 {
    -0.5 * x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).expect("sized")
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// Maximizes `Σ_i ω_i ELBO_i` by minibatch AdamW on the negated objective
/// divided by the batch size. Returns the trained model and, per epoch, the
/// weighted objective accumulated over that epoch's batches divided by `N`.
///
/// `None` weights runs the unweighted objective.
pub fn train(
    mut model: CvaeModel,
    data: &EncodedData,
    weights: Option<&PropensityWeights>,
    config: &CvaeTrainConfig,
) -> Result<(CvaeModel, Vec<f64>)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("cvae training set"));
    }
    model.check_dims(&data.x, &data.s)?;
    if let Some(w) = weights {
        if w.values().len() != n {
            return Err(Error::shape("propensity weights", &[w.values().len()], &[n]));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut opt = AdamW::new(&initial, config.learning_rate, config.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let xb = data.x.gather_rows(idx);
            let sb = data.s.gather_rows(idx);
            let noise: Vec<Tensor> = (0..config.samples)
                .map(|_| standard_normal(&mut rng, idx.len(), model.latent))
                .collect();
            let wb: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w.values()[i]).collect());
            let (value, grads) = model.objective(&xb, &sb, wb.as_deref(), &noise, true)?;
            if !value.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFinite {
                    context: "cvae weighted ELBO".into(),
                    epoch: epoch + 1,
                    batch: batch + 1,
                });
            }
            total += value;
            let scale = -1.0 / idx.len() as f64;
            let loss_grads: Vec<Tensor> = grads.iter().map(|t| t.map(|v| v * scale)).collect();
            opt.step(&mut model.params_mut(), &loss_grads)?;
        }
        trace.push(total / n as f64);
    }
    Ok((model, trace))
}

/// Posterior means, `N × K`.
pub fn infer_substitute_confounders(model: &CvaeModel, data: &EncodedData) -> Result<Tensor> {
    Ok(model.encode_batch(&data.x, &data.s)?.0)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights needed to reuse a trained CVAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeCheckpointMeta {
    pub train: CvaeTrainConfig,
    pub context: Option<DataContext>,
    pub trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CvaeCheckpoint {
    version: u32,
    meta: CvaeCheckpointMeta,
    model: CvaeModel,
}
