//! Stage 2: latent-driven attention predictor, plus the DNN, re-weighting
//! and ablation classifiers.
//!
//! The attention predictor computes, per record,
//!
//! ```text
//! w_x = softmax(W_x z)      W_x: M × K
//! w_s = softmax(W_s z)      W_s: J_enc × K
//! ŷ   = sigmoid(MLP([x ⊙ w_x; s ⊙ w_s; z]))
//! ```
//!
//! All classifiers train on mean binary cross-entropy with AdamW and keep
//! the parameters from the epoch with the best validation AUROC.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_slice, Graph, NodeId};
use crate::data::{DataContext, Dataset};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::nn::{weighted_sum, BoundLinear, BoundMlp, Linear, Mlp};
use crate::optim::{AdamW, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Primed,
    Dnn,
    Reweighting,
    Stage1,
    Stage2,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Primed,
        Method::Dnn,
        Method::Reweighting,
        Method::Stage1,
        Method::Stage2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Primed => "primed",
            Method::Dnn => "dnn",
            Method::Reweighting => "reweighting",
            Method::Stage1 => "stage1",
            Method::Stage2 => "stage2",
        }
    }

    /// Whether the method consumes substitute confounders from a CVAE.
    pub fn needs_latent(self) -> bool {
        matches!(self, Method::Primed | Method::Stage1)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeightMode {
    #[default]
    None,
    Kamiran,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTrainConfig {
    /// MLP hidden width.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without validation AUROC improvement before stopping.
    pub patience: usize,
    pub class_weights: ClassWeightMode,
    /// Sensitive attribute index defining the re-weighting groups.
    pub group_attribute: usize,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 50,
            batch_size: 128,
            learning_rate: DEFAULT_LEARNING_RATE,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            patience: 10,
            class_weights: ClassWeightMode::None,
            group_attribute: 0,
        }
    }
}

impl PredictorTrainConfig {
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
        if self.hidden == 0 {
            problems.push("predictor.hidden must be at least 1".to_string());
        }
        if self.epochs == 0 {
            problems.push("predictor.epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("predictor.batch_size must be at least 1".to_string());
        }
        if self.patience == 0 {
            problems.push("predictor.patience must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "predictor.learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!(
                "predictor.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        problems
    }
}

/// Model inputs for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorData {
    /// `N × M` features.
    pub x: Tensor,
    /// `N × J_enc` one-hot sensitive attributes.
    pub s: Tensor,
    /// `N × K` substitute confounders, when available.
    pub z: Option<Tensor>,
    pub y: Vec<u8>,
    /// Category index per record, one vector per sensitive attribute.
    pub groups: Vec<Vec<usize>>,
}

impl PredictorData {
    pub fn from_dataset(dataset: &Dataset, z: Option<Tensor>) -> Result<Self> {
        if let Some(z) = &z {
            if z.rank() != 2 || z.rows() != dataset.len() {
                return Err(Error::shape("latent rows", z.shape(), &[dataset.len()]));
            }
        }
        let enc = dataset.encode();
        Ok(Self {
            x: enc.x,
            s: enc.s,
            z,
            y: dataset.labels(),
            groups: (0..dataset.schema().len()).map(|j| dataset.groups(j)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.gather_rows(idx),
            s: self.s.gather_rows(idx),
            z: self.z.as_ref().map(|z| z.gather_rows(idx)),
        }
    }

    fn all(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            s: self.s.clone(),
            z: self.z.clone(),
        }
    }
}

struct Batch {
    x: Tensor,
    s: Tensor,
    z: Option<Tensor>,
}

/// `softmax(W z)` for a `D × K` matrix.
pub fn attention_weights(w: &Tensor, z: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.cols() != z.len() {
        return Err(Error::shape("attention", w.shape(), &[z.len()]));
    }
    let logits: Vec<f64> = (0..w.rows())
        .map(|r| w.row(r).iter().zip(z).map(|(a, b)| a * b).sum())
        .collect();
    if logits.is_empty() {
        return Err(Error::Empty("attention"));
    }
    Ok(softmax_slice(&logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPredictor {
    /// `M × K`.
    pub w_x: Tensor,
    /// `J_enc × K`.
    pub w_s: Tensor,
    pub mlp: Mlp,
    /// Learned `[x; s] -> K` map standing in for `z` (stage-2-only ablation).
    pub projection: Option<Linear>,
}

impl AttentionPredictor {
    pub fn init<R: Rng>(features: usize, sensitive: usize, latent: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (latent.max(1) as f64).sqrt();
        let mut uniform = |rows: usize| {
            let data = (0..rows * latent).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(vec![rows, latent], data).expect("sized")
        };
        let w_x = uniform(features);
        let w_s = uniform(sensitive);
        Self {
            w_x,
            w_s,
            mlp: Mlp::init(features + sensitive + latent, hidden, 1, rng),
            projection: None,
        }
    }

    /// Stage-2-only variant: `z` is a learned linear projection of `[x; s]`.
    pub fn init_projected<R: Rng>(
        features: usize,
        sensitive: usize,
        latent: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut model = Self::init(features, sensitive, latent, hidden, rng);
        model.projection = Some(Linear::init(features + sensitive, latent, rng));
        model
    }

    pub fn latent_dim(&self) -> usize {
        self.w_x.cols()
    }

    /// Attention-gated inputs and latent, then sigmoid of the MLP logit.
    /// `z` is ignored by the projected variant.
    pub fn predict(&self, x: &[f64], s: &[f64], z: Option<&[f64]>) -> Result<f64> {
        let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec()).expect("sized");
        let batch = Batch {
            x: row(x),
            s: row(s),
            z: z.map(row),
        };
        let logits = Classifier::Attention(self.clone()).logits(&batch)?;
        Ok(sigmoid(logits[0]))
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundAttention {
    w_x: NodeId,
    w_s: NodeId,
    mlp: BoundMlp,
    projection: Option<BoundLinear>,
}

impl BoundAttention {
    fn logits(&self, g: &mut Graph, x: NodeId, s: NodeId, z: Option<NodeId>) -> Result<NodeId> {
        let z = match (self.projection, z) {
            (Some(p), _) => {
                let xs = g.concat(&[x, s])?;
                p.forward(g, xs)?
            }
            (None, Some(z)) => z,
            (None, None) => return Err(Error::Data("attention predictor needs z".into())),
        };
        let wxt = g.transpose(self.w_x)?;
        let ax = g.matmul(z, wxt)?;
        let ax = g.softmax(ax)?;
        let gx = g.mul(x, ax)?;
        let wst = g.transpose(self.w_s)?;
        let as_ = g.matmul(z, wst)?;
        let as_ = g.softmax(as_)?;
        let gs = g.mul(s, as_)?;
        let h = g.concat(&[gx, gs, z])?;
        self.mlp.forward(g, h)
    }
}

/// Any of the trainable classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Classifier {
    Attention(AttentionPredictor),
    /// MLP on `[x; s]`.
    Dnn(Mlp),
    /// Logistic regression on `z`.
    Logistic(Linear),
}

enum Bound {
    Attention(BoundAttention),
    Dnn(BoundMlp),
    Logistic(BoundLinear),
}

impl Classifier {
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Classifier::Attention(a) => {
                let mut out = vec![&a.w_x, &a.w_s];
                out.extend(a.mlp.params());
                if let Some(p) = &a.projection {
                    out.extend(p.params());
                }
                out
            }
            Classifier::Dnn(m) => m.params(),
            Classifier::Logistic(l) => l.params().to_vec(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Classifier::Attention(a) => {
                let mut out = vec![&mut a.w_x, &mut a.w_s];
                out.extend(a.mlp.params_mut());
                if let Some(p) = &mut a.projection {
                    out.extend(p.params_mut());
                }
                out
            }
            Classifier::Dnn(m) => m.params_mut(),
            Classifier::Logistic(l) => l.params_mut().into_iter().collect(),
        }
    }

    pub fn uses_latent(&self) -> bool {
        match self {
            Classifier::Attention(a) => a.projection.is_none(),
            Classifier::Dnn(_) => false,
            Classifier::Logistic(_) => true,
        }
    }

    /// Rebinds parameter node ids given in [`Classifier::params`] order.
    fn bind_ids(&self, ids: &[NodeId]) -> Result<Bound> {
        if ids.len() != self.params().len() {
            return Err(Error::Data(format!(
                "expected {} parameter nodes, got {}",
                self.params().len(),
                ids.len()
            )));
        }
        let lin = |i: usize| BoundLinear { weight: ids[i], bias: ids[i + 1] };
        let mlp = |i: usize| BoundMlp { hidden: lin(i), output: lin(i + 2) };
        Ok(match self {
            Classifier::Attention(a) => Bound::Attention(BoundAttention {
                w_x: ids[0],
                w_s: ids[1],
                mlp: mlp(2),
                projection: a.projection.as_ref().map(|_| lin(6)),
            }),
            Classifier::Dnn(_) => Bound::Dnn(mlp(0)),
            Classifier::Logistic(_) => Bound::Logistic(lin(0)),
        })
    }

    fn check_batch(&self, b: &Batch) -> Result<()> {
        let n = b.x.rows();
        if b.s.rows() != n {
            return Err(Error::shape("predictor rows", b.s.shape(), b.x.shape()));
        }
        if self.uses_latent() {
            let z = b.z.as_ref().ok_or_else(|| Error::Data("classifier needs substitute confounders".into()))?;
            if z.rows() != n {
                return Err(Error::shape("predictor latent rows", z.shape(), b.x.shape()));
            }
        }
        let expect = |t: &Tensor, want: usize, what: &'static str| {
            if t.cols() != want {
                Err(Error::shape(what, t.shape(), &[n, want]))
            } else {
                Ok(())
            }
        };
        match self {
            Classifier::Attention(a) => {
                expect(&b.x, a.w_x.rows(), "predictor features")?;
                expect(&b.s, a.w_s.rows(), "predictor sensitive")?;
                if a.projection.is_none() {
                    expect(b.z.as_ref().expect("checked"), a.w_x.cols(), "predictor latent")?;
                }
            }
            Classifier::Dnn(m) => {
                if b.x.cols() + b.s.cols() != m.hidden.inputs() {
                    return Err(Error::shape("dnn input", &[b.x.cols() + b.s.cols()], &[m.hidden.inputs()]));
                }
            }
            Classifier::Logistic(l) => expect(b.z.as_ref().expect("checked"), l.inputs(), "logistic latent")?,
        }
        Ok(())
    }

    /// `B × 1` logit column.
    fn forward(&self, g: &mut Graph, bound: &Bound, b: &Batch) -> Result<NodeId> {
        self.check_batch(b)?;
        let x = g.constant(b.x.clone());
        let s = g.constant(b.s.clone());
        let z = b.z.as_ref().map(|z| g.constant(z.clone()));
        match bound {
            Bound::Attention(a) => a.logits(g, x, s, z),
            Bound::Dnn(m) => {
                let xs = g.concat(&[x, s])?;
                m.forward(g, xs)
            }
            Bound::Logistic(l) => l.forward(g, z.expect("checked")),
        }
    }

    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let ids: Vec<NodeId> = self.params().into_iter().map(|t| g.parameter(t.clone())).collect();
        self.bind_ids(&ids)
    }

    fn logits(&self, b: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = self.forward(&mut g, &bound, b)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Predicted probabilities for every record.
    pub fn predict(&self, data: &PredictorData) -> Result<Vec<f64>> {
        Ok(self.logits(&data.all())?.into_iter().map(sigmoid).collect())
    }

    /// Mean BCE, optionally per-record weighted, and its parameter gradients.
    pub fn loss(&self, data: &PredictorData, weights: Option<&[f64]>) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let loss = bce_loss(self, &mut g, &bound, &data.all(), &data.y, weights)?;
        let value = g.value(loss).item()?;
        Ok((value, g.backward(loss)?.parameters()))
    }

    pub fn save(&self, path: &Path, meta: &PredictorCheckpointMeta) -> Result<()> {
        let doc = PredictorCheckpoint {
            version: CHECKPOINT_VERSION,
            meta: meta.clone(),
            classifier: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, PredictorCheckpointMeta)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: PredictorCheckpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported predictor checkpoint version {}",
                doc.version
            )));
        }
        Ok((doc.classifier, doc.meta))
    }
}

/// `(1/B) Σ_i w_i (softplus(l_i) - y_i l_i)` as a scalar node.
fn bce_loss(
    model: &Classifier,
    g: &mut Graph,
    bound: &Bound,
    b: &Batch,
    y: &[u8],
    weights: Option<&[f64]>,
) -> Result<NodeId> {
    let logits = model.forward(g, bound, b)?;
    let n = y.len();
    if g.value(logits).rows() != n {
        return Err(Error::shape("labels", &[n], g.value(logits).shape()));
    }
    let yt = g.constant(Tensor::new(vec![n, 1], y.iter().map(|&v| f64::from(v)).collect())?);
    let sp = g.softplus(logits)?;
    let yl = g.mul(yt, logits)?;
    let per = g.sub(sp, yl)?;
    let total = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::shape("sample weights", &[w.len()], &[n]));
            }
            weighted_sum(g, per, w)?
        }
        None => g.reduce_sum(per),
    };
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Gradient check hook: the full BCE loss as a function of parameter nodes.
pub fn bce_loss_from_ids(
    model: &Classifier,
    g: &mut Graph,
    ids: &[NodeId],
    data: &PredictorData,
    weights: Option<&[f64]>,
) -> Result<NodeId> {
    let bound = model.bind_ids(ids)?;
    bce_loss(model, g, &bound, &data.all(), &data.y, weights)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation AUROC per epoch; `None` when undefined.
    pub val_auroc: Vec<Option<f64>>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Minibatch AdamW on mean BCE. With a validation set whose AUROC is
/// defined, stops after `patience` epochs without strict improvement and
/// restores the best parameters; otherwise keeps the last epoch.
pub fn fit(
    model: &mut Classifier,
    train: &PredictorData,
    validation: Option<&PredictorData>,
    weights: Option<&[f64]>,
    config: &PredictorTrainConfig,
) -> Result<TrainTrace> {
    config.validate()?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Empty("predictor training set"));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::shape("sample weights", &[w.len()], &[n]));
        }
    }
    let initial: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let mut opt = AdamW::new(&initial, config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let b = train.gather(idx);
            let y: Vec<u8> = idx.iter().map(|&i| train.y[i]).collect();
            let wb: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w[i]).collect());
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let loss = bce_loss(model, &mut g, &bound, &b, &y, wb.as_deref())?;
            let value = g.value(loss).item()?;
            let grads = g.backward(loss)?.parameters();
            if !value.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFinite {
                    context: "predictor BCE".into(),
                    epoch: epoch + 1,
                    batch: batch + 1,
                });
            }
            sum += value;
            batches += 1;
            opt.step(&mut model.params_mut(), &grads)?;
        }
        trace.train_loss.push(sum / batches as f64);

        let Some(val) = validation else { continue };
        let score = auroc(&model.predict(val)?, &val.y).ok();
        trace.val_auroc.push(score);
        let Some(score) = score else { continue };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.params().into_iter().cloned().collect()));
            trace.best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    match best {
        Some((_, params)) => {
            for (dst, src) in model.params_mut().into_iter().zip(params) {
                *dst = src;
            }
        }
        None => trace.best_epoch = trace.train_loss.len(),
    }
    Ok(trace)
}

fn init_rng(config: &PredictorTrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed)
}

fn latent_dim(data: &PredictorData) -> Result<usize> {
    data.z
        .as_ref()
        .map(|z| z.cols())
        .ok_or_else(|| Error::Data("substitute confounders are missing".into()))
}

/// Full attention predictor on `(x, s, z)`.
pub fn train_primed(
    train: &PredictorData,
    validation: Option<&PredictorData>,
    config: &PredictorTrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    let k = latent_dim(train)?;
    let model = AttentionPredictor::init(train.x.cols(), train.s.cols(), k, config.hidden, &mut init_rng(config));
    train_model(Classifier::Attention(model), train, validation, config)
}

/// Two-layer MLP on `[x; s]`; with [`ClassWeightMode::Kamiran`] each record
/// is weighted by [`kamiran_weights`] over `config.group_attribute`.
pub fn train_dnn(
    train: &PredictorData,
    validation: Option<&PredictorData>,
    config: &PredictorTrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    let inputs = train.x.cols() + train.s.cols();
    let model = Mlp::init(inputs, config.hidden, 1, &mut init_rng(config));
    train_model(Classifier::Dnn(model), train, validation, config)
}

/// Logistic regression on the substitute confounders alone.
pub fn ablation_stage1_only(
    train: &PredictorData,
    validation: Option<&PredictorData>,
    config: &PredictorTrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    let k = latent_dim(train)?;
    let model = Linear::init(k, 1, &mut init_rng(config));
    train_model(Classifier::Logistic(model), train, validation, config)
}

/// Attention predictor with `z` replaced by a learned projection of
/// `[x; s]` to `latent` dimensions.
pub fn ablation_stage2_only(
    train: &PredictorData,
    validation: Option<&PredictorData>,
    latent: usize,
    config: &PredictorTrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    if latent == 0 {
        return Err(Error::Config("stage2 projection dimension must be at least 1".into()));
    }
    let model = AttentionPredictor::init_projected(
        train.x.cols(),
        train.s.cols(),
        latent,
        config.hidden,
        &mut init_rng(config),
    );
    train_model(Classifier::Attention(model), train, validation, config)
}

fn train_model(
    mut model: Classifier,
    train: &PredictorData,
    validation: Option<&PredictorData>,
    config: &PredictorTrainConfig,
) -> Result<(Classifier, TrainTrace)> {
    let weights = match config.class_weights {
        ClassWeightMode::None => None,
        ClassWeightMode::Kamiran => {
            let groups = train.groups.get(config.group_attribute).ok_or_else(|| {
                Error::Config(format!(
                    "group attribute index {} out of range ({} attributes)",
                    config.group_attribute,
                    train.groups.len()
                ))
            })?;
            Some(kamiran_weights(groups, &train.y)?)
        }
    };
    let trace = fit(&mut model, train, validation, weights.as_deref(), config)?;
    Ok((model, trace))
}

/// `P(g) P(y) / P(g, y)` per record from empirical frequencies. Every
/// observed group must contain both labels when both labels occur.
pub fn kamiran_weights(groups: &[usize], labels: &[u8]) -> Result<Vec<f64>> {
    if groups.len() != labels.len() {
        return Err(Error::shape("kamiran", &[groups.len()], &[labels.len()]));
    }
    if groups.is_empty() {
        return Err(Error::Empty("kamiran"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Data(format!("label {y} is not binary")));
    }
    let n_groups = groups.iter().max().expect("non-empty") + 1;
    let mut cell = vec![[0usize; 2]; n_groups];
    let mut label_count = [0usize; 2];
    for (&g, &y) in groups.iter().zip(labels) {
        cell[g][y as usize] += 1;
        label_count[y as usize] += 1;
    }
    for (g, counts) in cell.iter().enumerate() {
        let size = counts[0] + counts[1];
        if size == 0 {
            continue;
        }
        for y in 0..2u8 {
            if label_count[y as usize] > 0 && counts[y as usize] == 0 {
                return Err(Error::EmptyCell { group: g, label: y });
            }
        }
    }
    let n = groups.len() as f64;
    Ok(groups
        .iter()
        .zip(labels)
        .map(|(&g, &y)| {
            let pg = (cell[g][0] + cell[g][1]) as f64 / n;
            let py = label_count[y as usize] as f64 / n;
            let pgy = cell[g][y as usize] as f64 / n;
            pg * py / pgy
        })
        .collect())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorCheckpointMeta {
    pub method: Method,
    pub train: PredictorTrainConfig,
    pub context: Option<DataContext>,
    pub trace: TrainTrace,
}

#[derive(Serialize, Deserialize)]
struct PredictorCheckpoint {
    version: u32,
    meta: PredictorCheckpointMeta,
    classifier: Classifier,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    /// Label depends on `x_0 + z_0`; minority flag is independent.
    fn toy(n: usize, seed: u64, separable: bool) -> PredictorData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, n, 3);
        let z = gaussian(&mut rng, n, 2);
        let mut s = Vec::with_capacity(2 * n);
        let mut groups = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let minority = rng.random_bool(0.3);
            s.extend(if minority { [0.0, 1.0] } else { [1.0, 0.0] });
            groups.push(usize::from(minority));
            let signal = x.row(i)[0] + z.row(i)[0];
            let noisy = if separable { signal } else { signal + rng.sample::<f64, _>(StandardNormal) };
            y.push(u8::from(noisy > 0.0));
        }
        PredictorData {
            x,
            s: Tensor::new(vec![n, 2], s).unwrap(),
            z: Some(z),
            y,
            groups: vec![groups],
        }
    }

    fn fast() -> PredictorTrainConfig {
        PredictorTrainConfig {
            hidden: 8,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn attention_examples() {
        let w0 = Tensor::zeros(&[4, 2]);
        assert_eq!(attention_weights(&w0, &[1.0, -2.0]).unwrap(), vec![0.25; 4]);
        let w = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]).unwrap();
        let third = 1.0 / 3.0;
        for v in attention_weights(&w, &[0.0, 0.0]).unwrap() {
            assert!((v - third).abs() < 1e-15);
        }
        let w = Tensor::matrix(2, 1, vec![3f64.ln(), 0.0]).unwrap();
        let a = attention_weights(&w, &[1.0]).unwrap();
        assert!((a[0] - 0.75).abs() < 1e-15 && (a[1] - 0.25).abs() < 1e-15);
        assert!(attention_weights(&w, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = AttentionPredictor::init(3, 2, 2, 5, &mut rng);
        let (x, s, z) = ([0.5, -1.0, 2.0], [0.0, 1.0], [0.3, -0.2]);
        let p = model.predict(&x, &s, Some(&z)).unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p, model.predict(&x, &s, Some(&z)).unwrap());
        assert!(model.predict(&x[..2], &s, Some(&z)).is_err());
        assert!(model.predict(&x, &s, None).is_err());

        // zero x and s: only z reaches the MLP, so attention weights are irrelevant
        let mut other = model.clone();
        other.w_x = gaussian(&mut rng, 3, 2);
        other.w_s = gaussian(&mut rng, 2, 2);
        let a = model.predict(&[0.0; 3], &[0.0; 2], Some(&z)).unwrap();
        let b = other.predict(&[0.0; 3], &[0.0; 2], Some(&z)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_is_monotone_in_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = AttentionPredictor::init(3, 2, 2, 5, &mut rng);
        let (x, s, z) = ([0.5, -1.0, 2.0], [0.0, 1.0], [0.3, -0.2]);
        let mut last = 0.0;
        for b in [-3.0, -1.0, 0.0, 0.5, 4.0] {
            model.mlp.output.bias = Tensor::vector(vec![b]);
            let p = model.predict(&x, &s, Some(&z)).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let data = toy(7, 3, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w: Vec<f64> = (0..7).map(|_| rng.random_range(0.2..2.0)).collect();
        let models = [
            Classifier::Attention(AttentionPredictor::init(3, 2, 2, 4, &mut rng)),
            Classifier::Attention(AttentionPredictor::init_projected(3, 2, 2, 4, &mut rng)),
            Classifier::Dnn(Mlp::init(5, 4, 1, &mut rng)),
            Classifier::Logistic(Linear::init(2, 1, &mut rng)),
        ];
        for model in &models {
            let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
            for weights in [None, Some(w.as_slice())] {
                let err = grad_check(&params, 1e-6, |g, ids| {
                    bce_loss_from_ids(model, g, ids, &data, weights)
                })
                .unwrap();
                assert!(err < 1e-4, "{err}");
            }
            let (value, grads) = model.loss(&data, None).unwrap();
            assert!(value > 0.0);
            assert_eq!(grads.len(), params.len());
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let data = PredictorData {
            x: Tensor::zeros(&[2, 1]),
            s: Tensor::zeros(&[2, 0]),
            z: Some(Tensor::matrix(2, 1, vec![1.0, -2.0]).unwrap()),
            y: vec![1, 0],
            groups: vec![],
        };
        let model = Classifier::Logistic(Linear {
            weight: Tensor::matrix(1, 1, vec![0.5]).unwrap(),
            bias: Tensor::vector(vec![0.25]),
        });
        let (l1, l2) = (0.75f64, -0.75f64);
        let expect = (-(sigmoid(l1)).ln() - (1.0 - sigmoid(l2)).ln()) / 2.0;
        let (value, _) = model.loss(&data, None).unwrap();
        assert!((value - expect).abs() < 1e-14);
        let scores = model.predict(&data).unwrap();
        assert!((scores[0] - sigmoid(l1)).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (train, val) = (toy(300, 5, false), toy(100, 6, false));
        let cfg = fast();
        let (a, trace) = train_primed(&train, Some(&val), &cfg).unwrap();
        assert!(trace.train_loss.last().unwrap() < &trace.train_loss[0]);
        let (b, again) = train_primed(&train, Some(&val), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(trace, again);
    }

    #[test]
    fn best_validation_parameters_are_restored() {
        let (train, val) = (toy(200, 7, false), toy(80, 8, false));
        let cfg = PredictorTrainConfig { patience: 3, ..fast() };
        let (model, trace) = train_dnn(&train, Some(&val), &cfg).unwrap();
        let best = trace.val_auroc.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let now = auroc(&model.predict(&val).unwrap(), &val.y).unwrap();
        assert_eq!(now, best);
        assert_eq!(trace.val_auroc[trace.best_epoch - 1], Some(best));
        assert!(trace.val_auroc.len() <= cfg.epochs);
        let last_best = trace.best_epoch;
        if trace.val_auroc.len() < cfg.epochs {
            assert_eq!(trace.val_auroc.len(), last_best + cfg.patience);
        }
    }

    #[test]
    fn all_negative_labels_push_scores_down() {
        let mut data = toy(100, 9, false);
        data.y = vec![0; 100];
        let (model, trace) = train_dnn(&data, None, &fast()).unwrap();
        assert_eq!(trace.best_epoch, fast().epochs);
        assert!(model.predict(&data).unwrap().iter().all(|&p| p < 0.5));
    }

    #[test]
    fn dnn_separates_separable_data() {
        let data = toy(400, 10, true);
        let mut data_no_z = data.clone();
        // push the separating signal into x so the DNN can see it
        for i in 0..data.len() {
            let z0 = data.z.as_ref().unwrap().row(i)[0];
            data_no_z.x.data_mut()[i * 3] += z0;
        }
        data_no_z.z = None;
        let cfg = PredictorTrainConfig { epochs: 60, ..fast() };
        let (model, _) = train_dnn(&data_no_z, None, &cfg).unwrap();
        let scores = model.predict(&data_no_z).unwrap();
        assert!(scores.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(auroc(&scores, &data_no_z.y).unwrap() > 0.99);
    }

    #[test]
    fn stage1_without_signal_is_near_chance() {
        let mut data = toy(2000, 11, false);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        data.y.shuffle(&mut rng);
        let mut val = toy(500, 13, false);
        val.y.shuffle(&mut rng);
        let (model, _) = ablation_stage1_only(&data, None, &fast()).unwrap();
        let a = auroc(&model.predict(&val).unwrap(), &val.y).unwrap();
        assert!((a - 0.5).abs() < 0.05, "{a}");
        let (again, _) = ablation_stage1_only(&data, None, &fast()).unwrap();
        assert_eq!(model, again);
    }

    #[test]
    fn stage2_takes_dnn_inputs() {
        let mut data = toy(150, 14, false);
        data.z = None;
        let (model, _) = ablation_stage2_only(&data, None, 4, &fast()).unwrap();
        assert!(!model.uses_latent());
        assert_eq!(model.predict(&data).unwrap().len(), 150);
        let (again, _) = ablation_stage2_only(&data, None, 4, &fast()).unwrap();
        assert_eq!(model, again);
        assert!(train_primed(&data, None, &fast()).is_err());
        assert!(ablation_stage1_only(&data, None, &fast()).is_err());
    }

    #[test]
    fn kamiran_examples() {
        // independent group and label
        let groups = [0, 0, 1, 1];
        let labels = [0, 1, 0, 1];
        assert_eq!(kamiran_weights(&groups, &labels).unwrap(), vec![1.0; 4]);

        // P(g=1)=0.5, P(y=1)=0.5, P(g=1,y=1)=0.4
        let groups = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let labels = [1, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let w = kamiran_weights(&groups, &labels).unwrap();
        assert!((w[0] - 0.625).abs() < 1e-15);

        match kamiran_weights(&[0, 0, 1], &[0, 1, 1]) {
            Err(Error::EmptyCell { group, label }) => assert_eq!((group, label), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(kamiran_weights(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn reweighting_uses_group_attribute() {
        let data = toy(200, 15, false);
        let cfg = PredictorTrainConfig { class_weights: ClassWeightMode::Kamiran, epochs: 3, ..fast() };
        let (rw, _) = train_dnn(&data, None, &cfg).unwrap();
        let (plain, _) = train_dnn(&data, None, &PredictorTrainConfig { epochs: 3, ..fast() }).unwrap();
        assert_ne!(rw, plain);
        let bad = PredictorTrainConfig { group_attribute: 3, ..cfg };
        assert!(matches!(train_dnn(&data, None, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        let err = "svm".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("primed, dnn, reweighting, stage1, stage2"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let data = toy(100, 16, false);
        let (model, trace) = train_primed(&data, Some(&data), &PredictorTrainConfig { epochs: 2, ..fast() }).unwrap();
        let meta = PredictorCheckpointMeta {
            method: Method::Primed,
            train: fast(),
            context: None,
            trace,
        };
        model.save(&path, &meta).unwrap();
        let (back, back_meta) = Classifier::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_meta, meta);
        let bits = |m: &Classifier| -> Vec<u64> {
            m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&model));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn attention_is_a_distribution_and_shift_invariant(
            w in prop::collection::vec(-4.0f64..4.0, 6),
            z in prop::collection::vec(-3.0f64..3.0, 2),
            c in -5.0f64..5.0,
        ) {
            let wt = Tensor::matrix(3, 2, w.clone()).unwrap();
            let a = attention_weights(&wt, &z).unwrap();
            prop_assert!(a.iter().all(|&v| v > 0.0));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let logits: Vec<f64> = (0..3).map(|r| w[2 * r] * z[0] + w[2 * r + 1] * z[1] + c).collect();
            let shifted = softmax_slice(&logits);
            for (p, q) in a.iter().zip(&shifted) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn kamiran_preserves_mass_and_positive_rate(
            cells in prop::collection::vec((0usize..3, 0u8..2), 6..80),
        ) {
            let mut groups: Vec<usize> = cells.iter().map(|c| c.0).collect();
            let mut labels: Vec<u8> = cells.iter().map(|c| c.1).collect();
            // every group gets both labels
            for g in 0..3 {
                groups.extend([g, g]);
                labels.extend([0, 1]);
            }
            let w = kamiran_weights(&groups, &labels).unwrap();
            let n = groups.len() as f64;
            let mass: f64 = w.iter().sum();
            prop_assert!((mass - n).abs() < 1e-9);
            let pos: f64 = w.iter().zip(&labels).filter(|(_, &y)| y == 1).map(|(w, _)| w).sum();
            let rate = labels.iter().filter(|&&y| y == 1).count() as f64 / n;
            prop_assert!((pos / mass - rate).abs() < 1e-9);
        }
    }
}
