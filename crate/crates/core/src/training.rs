//! Episodic meta-training and plain ERM pretraining of the backbone.
//!
//! Both loops run plain SGD, validate every `val_every` steps on a fixed set
//! of validation episodes and hand back the parameters with the best
//! validation accuracy seen.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, BnMode};
use crate::data::{Episode, EpisodeConfig, EpisodeSampler, GridDataset, SplitPart, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_and_ci};
use crate::learners::{Classifier, EpisodeLoss, LabeledEmbeddings, LearnerSpec, LOSS_FLOOR};

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;
const HEAD_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Episodic,
    Erm,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Episodic => "episodic",
            Regime::Erm => "erm",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "episodic" => Ok(Regime::Episodic),
            "erm" => Ok(Regime::Erm),
            other => Err(Error::Config(format!(
                "unknown regime `{other}` (expected episodic or erm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Episodes (episodic) or minibatches (ERM).
    pub steps: usize,
    pub lr: f64,
    /// Training and validation episodes. Training always samples with the
    /// configured shift flag.
    pub episode: EpisodeConfig,
    pub learner: LearnerSpec,
    pub bn: BnMode,
    /// 0 disables validation; the final parameters are returned.
    pub val_every: usize,
    pub val_episodes: usize,
    /// ERM minibatch size.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Episodic,
            steps: 2000,
            lr: 0.01,
            episode: EpisodeConfig::default(),
            learner: LearnerSpec::protonet(),
            bn: BnMode::Conventional,
            val_every: 100,
            val_episodes: 100,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("training needs at least one step".into()));
        }
        // lr = 0 is allowed: it freezes the weights but still runs the loop
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.val_every > 0 && self.val_episodes == 0 {
            return Err(Error::Config("validation needs at least one episode".into()));
        }
        if self.regime == Regime::Erm && self.batch_size < 2 {
            return Err(Error::Config("ERM batch size must be >= 2".into()));
        }
        self.episode.validate()?;
        self.learner.transport.sinkhorn.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 1-based.
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    /// ERM only: accuracy of the linear head on the minibatch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
}

/// One record per executed step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    /// Step and accuracy of the best validation; the earliest wins ties.
    pub fn best(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.records {
            if let Some(v) = r.val_accuracy {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((r.step, v));
                }
            }
        }
        best
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }
}

/// Dispatch on `config.regime`.
pub fn train(
    dataset: &GridDataset,
    split: &SplitSpec,
    backbone: BackboneParams,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainLog)> {
    match config.regime {
        Regime::Episodic => train_episodic(dataset, split, backbone, config),
        Regime::Erm => train_erm(dataset, split, backbone, config),
    }
}

/// Keeps the best validated snapshot.
struct Validator<'a> {
    sampler: Option<EpisodeSampler<'a>>,
    config: &'a TrainConfig,
    seed: u64,
    best: Option<(f64, BackboneParams)>,
}

impl<'a> Validator<'a> {
    fn new(dataset: &'a GridDataset, split: &SplitSpec, config: &'a TrainConfig) -> Result<Self> {
        let sampler = if config.val_every > 0 {
            Some(EpisodeSampler::new(dataset, split, SplitPart::Val, config.episode)?)
        } else {
            None
        };
        Ok(Self {
            sampler,
            config,
            seed: crate::derive_seed(config.seed, VAL_STREAM),
            best: None,
        })
    }

    fn maybe_validate(&mut self, step: usize, params: &BackboneParams) -> Result<Option<f64>> {
        let Some(sampler) = &self.sampler else {
            return Ok(None);
        };
        if !step.is_multiple_of(self.config.val_every) && step != self.config.steps {
            return Ok(None);
        }
        let accs = evaluate(
            params,
            &self.config.learner,
            self.config.bn,
            sampler,
            self.config.val_episodes,
            self.seed,
        )?;
        let acc = mean_and_ci(&accs).0;
        if self.best.as_ref().is_none_or(|(b, _)| acc > *b) {
            self.best = Some((acc, params.clone()));
        }
        Ok(Some(acc))
    }

    fn finish(self, last: BackboneParams) -> BackboneParams {
        self.best.map_or(last, |(_, p)| p)
    }
}

/// One SGD step of the episodic loss on `episode`. Transductive mode runs
/// support and query through the backbone as one batch; conventional mode
/// runs them as two.
pub fn episodic_step(
    params: &mut BackboneParams,
    classifier: &Classifier,
    bn: BnMode,
    episode: &Episode,
    lr: f64,
) -> Result<EpisodeLoss> {
    let n_way = episode.n_way();
    let ns = episode.support_features.nrows();
    let (zs, zq, caches) = match bn {
        BnMode::Transductive => {
            let (z, cache) = params.forward(episode.joint_features().view(), bn, true)?;
            (
                z.slice(s![..ns, ..]).to_owned(),
                z.slice(s![ns.., ..]).to_owned(),
                vec![cache],
            )
        }
        BnMode::Conventional => {
            let (zs, cs) = params.forward(episode.support_features.view(), bn, true)?;
            let (zq, cq) = params.forward(episode.query_features.view(), bn, true)?;
            (zs, zq, vec![cs, cq])
        }
    };
    let support = LabeledEmbeddings::new(zs, episode.support_labels.clone(), n_way)?;
    let out = classifier.loss_and_gradients(&support, zq.view(), &episode.query_labels)?;
    if !out.loss.value.is_finite() {
        return Err(Error::NonFinite(format!("episode loss {}", out.loss.value)));
    }
    let grads = match bn {
        BnMode::Transductive => {
            let g = concatenate(Axis(0), &[out.grad_support.view(), out.grad_query.view()])
                .expect("support and query gradients share a width");
            params.backward(&caches[0], g.view())?
        }
        BnMode::Conventional => {
            let mut g = params.backward(&caches[0], out.grad_support.view())?;
            g.accumulate(&params.backward(&caches[1], out.grad_query.view())?)?;
            g
        }
    };
    params.sgd_step(&grads, lr)?;
    Ok(out.loss)
}

fn diverged(step: usize, loss: f64, err: Error) -> Error {
    log::error!("step {step}: {err}");
    Error::Diverged { step, loss }
}

/// Meta-train on shifted episodes from the train part.
pub fn train_episodic(
    dataset: &GridDataset,
    split: &SplitSpec,
    mut params: BackboneParams,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainLog)> {
    config.validate()?;
    let sampler = EpisodeSampler::new(dataset, split, SplitPart::Train, config.episode)?;
    let mut validator = Validator::new(dataset, split, config)?;
    let classifier = config.learner.for_training();
    let seed = crate::derive_seed(config.seed, TRAIN_STREAM);
    let mut log = TrainLog::default();
    for step in 1..=config.steps {
        let episode = sampler.sample(seed, step as u64 - 1)?;
        let loss = match episodic_step(&mut params, &classifier, config.bn, &episode, config.lr) {
            Ok(l) => l.value,
            Err(e @ Error::NonFinite(_)) => return Err(diverged(step, f64::NAN, e)),
            Err(e) => return Err(e),
        };
        let val_accuracy = validator.maybe_validate(step, &params)?;
        log.records.push(TrainRecord {
            step,
            loss,
            val_accuracy,
            train_accuracy: None,
        });
    }
    Ok((validator.finish(params), log))
}

/// Linear classifier on top of the backbone, used only during ERM.
struct LinearHead {
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl LinearHead {
    fn init(d: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((d, classes), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(classes),
        }
    }
}

/// Standard minibatch cross-entropy over every train-class, train-domain item
/// with a linear head that is thrown away afterwards.
pub fn train_erm(
    dataset: &GridDataset,
    split: &SplitSpec,
    mut params: BackboneParams,
    config: &TrainConfig,
) -> Result<(BackboneParams, TrainLog)> {
    config.validate()?;
    let (x, y) = dataset.gather(&split.classes.train, &split.domains.train)?;
    let n = x.nrows();
    let batch = config.batch_size.min(n);
    if batch < 2 {
        return Err(Error::InsufficientPart {
            part: "train",
            axis: "items",
            available: n,
            needed: 2,
        });
    }
    let n_classes = split.classes.train.len();
    let mut head = LinearHead::init(params.output_dim(), n_classes, crate::derive_seed(config.seed, HEAD_STREAM));
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(config.seed, BATCH_STREAM));
    let mut validator = Validator::new(dataset, split, config)?;
    let mut log = TrainLog::default();
    for step in 1..=config.steps {
        let idx = index::sample(&mut rng, n, batch).into_vec();
        let xb = x.select(Axis(0), &idx);
        let (z, cache) = params.forward(xb.view(), BnMode::Transductive, true)?;
        let mut probs = z.dot(&head.weight) + &head.bias;
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        let mut loss = 0.0;
        let mut hits = 0;
        let mut grad_logits = probs.clone();
        for (j, &i) in idx.iter().enumerate() {
            let label = y[i];
            let row = probs.row(j);
            loss -= row[label].max(LOSS_FLOOR).ln();
            let pred = (0..n_classes).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            if pred == label {
                hits += 1;
            }
            grad_logits[[j, label]] -= 1.0;
        }
        loss /= batch as f64;
        grad_logits /= batch as f64;
        if !loss.is_finite() {
            return Err(diverged(step, loss, Error::NonFinite("ERM loss".into())));
        }
        let grad_w = z.t().dot(&grad_logits);
        let grad_b = grad_logits.sum_axis(Axis(0));
        let grad_z = grad_logits.dot(&head.weight.t());
        let grads = params.backward(&cache, grad_z.view())?;
        match params.sgd_step(&grads, config.lr) {
            Ok(()) => {}
            Err(e @ Error::NonFinite(_)) => return Err(diverged(step, loss, e)),
            Err(e) => return Err(e),
        }
        head.weight.scaled_add(-config.lr, &grad_w);
        head.bias.scaled_add(-config.lr, &grad_b);
        let val_accuracy = validator.maybe_validate(step, &params)?;
        log.records.push(TrainRecord {
            step,
            loss,
            val_accuracy,
            train_accuracy: Some(hits as f64 / batch as f64),
        });
    }
    Ok((validator.finish(params), log))
}
