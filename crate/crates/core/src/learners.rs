//! Few-shot classification heads.
//!
//! Every head maps `(support embeddings, support labels, query embeddings)` to
//! a row-stochastic posterior over the episode's classes. Prototype heads use
//! a softmax over negative distances to class means; the matching head
//! attends over individual support points by cosine similarity. Any head can
//! first move the support set onto the query set with an entropic transport
//! plan (transported prototypes).
//!
//! Gradients are taken with respect to the support and query embeddings so
//! that the caller can push them through the backbone. The transport plan is
//! treated as a constant in the backward pass.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{self, CostMetric, SinkhornConfig, TransportPlan};

/// Probabilities below this are clamped before taking the log.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Embeddings with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != embeddings.nrows() {
            return Err(Error::Dimension {
                what: "label count vs embedding rows",
                expected: embeddings.nrows(),
                got: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            n_classes,
        })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Same labels, new coordinates.
    pub fn with_embeddings(&self, embeddings: Array2<f64>) -> Result<Self> {
        Self::new(embeddings, self.labels.clone(), self.n_classes)
    }

    fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// One center per class.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub centers: Array2<f64>,
}

/// Per-query class probabilities; rows are nonnegative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryPosterior {
    probs: Array2<f64>,
}

impl QueryPosterior {
    /// Wrap a probability matrix, checking rows are distributions within 1e-9.
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (j, row) in probs.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::Input(format!("posterior row {j} has invalid entries")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("posterior row {j} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn n_queries(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Argmax per row; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (k, p) in row.iter().enumerate() {
                    if *p > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Fraction of queries whose prediction equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.n_queries() {
            return Err(Error::Dimension {
                what: "query labels vs posterior rows",
                expected: self.n_queries(),
                got: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Input("accuracy over an empty query set".into()));
        }
        let hits = self
            .predictions()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// When the transport step is part of the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OtUsage {
    /// Plain head everywhere.
    Never,
    /// Plain head during training, transported head at evaluation.
    TestOnly,
    TrainAndTest,
}

impl OtUsage {
    pub const ALL: [OtUsage; 3] = [OtUsage::Never, OtUsage::TestOnly, OtUsage::TrainAndTest];

    pub fn at_train(self) -> bool {
        self == OtUsage::TrainAndTest
    }

    pub fn at_test(self) -> bool {
        self != OtUsage::Never
    }

    /// Flag spelling: `never`, `test`, `train`.
    pub fn flag(self) -> &'static str {
        match self {
            OtUsage::Never => "never",
            OtUsage::TestOnly => "test",
            OtUsage::TrainAndTest => "train",
        }
    }

    /// Ablation-table spelling.
    pub fn label(self) -> &'static str {
        match self {
            OtUsage::Never => "vanilla",
            OtUsage::TestOnly => "ot-tt",
            OtUsage::TrainAndTest => "ot",
        }
    }
}

impl fmt::Display for OtUsage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for OtUsage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "never" => Ok(OtUsage::Never),
            "test" => Ok(OtUsage::TestOnly),
            "train" => Ok(OtUsage::TrainAndTest),
            other => Err(Error::Config(format!(
                "unknown OT usage `{other}` (expected never, test or train)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ProtoNet,
    MatchingNet,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::ProtoNet => "protonet",
            Head::MatchingNet => "matchingnet",
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings of the support-to-query transport step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    pub sinkhorn: SinkhornConfig,
    pub cost: CostMetric,
}

/// A head plus its OT usage, as chosen for one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub head: Head,
    pub ot: OtUsage,
    /// Distance inside the prototype softmax.
    pub distance: CostMetric,
    pub transport: TransportConfig,
}

impl LearnerSpec {
    pub fn new(head: Head, ot: OtUsage) -> Self {
        Self {
            head,
            ot,
            distance: CostMetric::SquaredEuclidean,
            transport: TransportConfig::default(),
        }
    }

    pub fn protonet() -> Self {
        Self::new(Head::ProtoNet, OtUsage::Never)
    }

    pub fn matchingnet() -> Self {
        Self::new(Head::MatchingNet, OtUsage::Never)
    }

    /// Prototype head with transport at train and test time.
    pub fn transported_prototypes() -> Self {
        Self::new(Head::ProtoNet, OtUsage::TrainAndTest)
    }

    pub fn for_training(&self) -> Classifier {
        self.classifier(self.ot.at_train())
    }

    pub fn for_evaluation(&self) -> Classifier {
        self.classifier(self.ot.at_test())
    }

    fn classifier(&self, transport: bool) -> Classifier {
        Classifier {
            head: self.head,
            distance: self.distance,
            transport: transport.then_some(self.transport),
        }
    }
}

/// A concrete head as run on one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classifier {
    pub head: Head,
    pub distance: CostMetric,
    pub transport: Option<TransportConfig>,
}

/// Mean negative log-likelihood of the true labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeLoss {
    pub value: f64,
    /// Queries whose true-class probability fell under [`LOSS_FLOOR`].
    pub floored: usize,
}

/// Posterior, loss and embedding gradients of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub posterior: QueryPosterior,
    pub loss: EpisodeLoss,
    pub grad_support: Array2<f64>,
    pub grad_query: Array2<f64>,
    /// Raw plan when the transport step ran.
    pub plan: Option<TransportPlan>,
}

/// Class means of the support embeddings.
pub fn compute_prototypes(support: &LabeledEmbeddings) -> Result<Prototypes> {
    let counts = support.class_counts();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Input(format!("class {k} has no support instances")));
    }
    let mut centers = Array2::<f64>::zeros((support.n_classes, support.dim()));
    for (row, &y) in support.embeddings.axis_iter(Axis(0)).zip(&support.labels) {
        let mut c = centers.row_mut(y);
        c += &row;
    }
    for (mut c, &n) in centers.axis_iter_mut(Axis(0)).zip(&counts) {
        c /= n as f64;
    }
    Ok(Prototypes { centers })
}

/// Softmax over negative squared distances to the prototypes.
pub fn protonet_posterior(prototypes: &Prototypes, queries: ArrayView2<f64>) -> Result<QueryPosterior> {
    protonet_posterior_with(prototypes, queries, CostMetric::SquaredEuclidean)
}

pub fn protonet_posterior_with(
    prototypes: &Prototypes,
    queries: ArrayView2<f64>,
    metric: CostMetric,
) -> Result<QueryPosterior> {
    let dist = ot::cost_matrix_with(queries, prototypes.centers.view(), metric)?;
    Ok(QueryPosterior {
        probs: softmax_rows(&dist.values().mapv(|d| -d)),
    })
}

/// Cosine attention over every support point, summed per class.
pub fn matchingnet_posterior(support: &LabeledEmbeddings, queries: ArrayView2<f64>) -> Result<QueryPosterior> {
    Ok(MatchingForward::new(support, queries)?.posterior)
}

/// Transport the support onto the queries, then classify with prototypes of
/// the transported support. Returns the raw plan alongside the posterior.
pub fn transported_prototypes_posterior(
    support: &LabeledEmbeddings,
    queries: ArrayView2<f64>,
    config: &SinkhornConfig,
) -> Result<(QueryPosterior, TransportPlan)> {
    let transport = TransportConfig {
        sinkhorn: *config,
        cost: CostMetric::SquaredEuclidean,
    };
    let (moved, plan, _) = transport_support(support, queries, &transport)?;
    let posterior = protonet_posterior(&compute_prototypes(&moved)?, queries)?;
    Ok((posterior, plan))
}

/// Barycentric image of the support under the support-to-query plan.
/// Returns the moved support, the raw plan and the row-normalized plan.
pub fn transport_support(
    support: &LabeledEmbeddings,
    queries: ArrayView2<f64>,
    transport: &TransportConfig,
) -> Result<(LabeledEmbeddings, TransportPlan, Array2<f64>)> {
    if queries.nrows() == 0 {
        return Err(Error::Input("transport needs at least one query".into()));
    }
    let cost = ot::cost_matrix_with(support.embeddings.view(), queries, transport.cost)?;
    let marginals = ot::MarginalWeights::uniform(cost.n_source(), cost.n_target());
    let plan = ot::sinkhorn(&cost, &marginals, &transport.sinkhorn)?;
    if !plan.converged {
        log::warn!(
            "sinkhorn stopped after {} iterations with marginal error {:.3e}",
            plan.iterations,
            plan.feasibility_error
        );
    }
    let normalized = ot::row_normalize(&plan)?;
    let moved = ot::barycentric_map(&normalized, queries)?;
    Ok((support.with_embeddings(moved)?, plan, normalized.values))
}

/// Mean negative log-likelihood, with true-class probabilities clamped at
/// [`LOSS_FLOOR`]. Clamped queries are counted and logged.
pub fn episode_loss(posterior: &QueryPosterior, labels: &[usize]) -> Result<EpisodeLoss> {
    let (loss, _) = loss_and_grad(posterior, labels)?;
    Ok(loss)
}

/// Loss and its gradient with respect to the posterior probabilities.
fn loss_and_grad(posterior: &QueryPosterior, labels: &[usize]) -> Result<(EpisodeLoss, Array2<f64>)> {
    let nq = posterior.n_queries();
    if labels.len() != nq {
        return Err(Error::Dimension {
            what: "query labels vs posterior rows",
            expected: nq,
            got: labels.len(),
        });
    }
    if nq == 0 {
        return Err(Error::Input("loss over an empty query set".into()));
    }
    let k = posterior.n_classes();
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = Array2::<f64>::zeros((nq, k));
    let mut total = 0.0;
    let mut floored = 0;
    for (j, &y) in labels.iter().enumerate() {
        let p = posterior.probs[[j, y]];
        if p < LOSS_FLOOR {
            floored += 1;
            total -= LOSS_FLOOR.ln();
        } else {
            total -= p.ln();
            grad[[j, y]] = -1.0 / (nq as f64 * p);
        }
    }
    if floored > 0 {
        log::warn!("{floored} of {nq} queries had true-class probability below {LOSS_FLOOR:e}");
    }
    Ok((
        EpisodeLoss {
            value: total / nq as f64,
            floored,
        },
        grad,
    ))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Pull a gradient on softmax outputs back to the logits.
fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let inner = (probs * grad_probs).sum_axis(Axis(1));
    let mut out = grad_probs.clone();
    Zip::from(out.rows_mut())
        .and(probs.rows())
        .and(&inner)
        .for_each(|mut g, p, s| {
            g -= *s;
            g *= &p;
        });
    out
}

/// Prototype head with the intermediates needed for its backward pass.
struct PrototypeForward {
    centers: Array2<f64>,
    dist: Array2<f64>,
    probs: Array2<f64>,
}

impl PrototypeForward {
    fn new(support: &LabeledEmbeddings, queries: ArrayView2<f64>, metric: CostMetric) -> Result<Self> {
        let centers = compute_prototypes(support)?.centers;
        let dist = ot::cost_matrix_with(queries, centers.view(), metric)?
            .values()
            .clone();
        let probs = softmax_rows(&dist.mapv(|d| -d));
        Ok(Self { centers, dist, probs })
    }

    /// Gradients with respect to `(support, queries)`.
    fn backward(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
        metric: CostMetric,
        grad_probs: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        // logits are -dist; w_jk = dL/d(dist_jk) scaled to the squared form:
        // d||q-c||^2 = 2(q-c) and d||q-c|| = (q-c)/||q-c||
        let grad_logits = softmax_backward(&self.probs, grad_probs);
        let mut w = grad_logits.mapv(|g| -2.0 * g);
        if metric == CostMetric::Euclidean {
            Zip::from(&mut w).and(&self.dist).for_each(|w, &d| {
                *w = if d > 0.0 { *w / (2.0 * d) } else { 0.0 };
            });
        }
        let row_w = w.sum_axis(Axis(1));
        let col_w = w.sum_axis(Axis(0));
        let mut grad_q = queries.to_owned();
        Zip::from(grad_q.rows_mut())
            .and(&row_w)
            .for_each(|mut q, &s| q *= s);
        grad_q -= &w.dot(&self.centers);
        let mut grad_c = w.t().dot(&queries);
        Zip::from(grad_c.rows_mut())
            .and(self.centers.rows())
            .and(&col_w)
            .for_each(|mut g, c, &s| g.scaled_add(-s, &c));
        grad_c.mapv_inplace(|v| -v);

        let counts = support.class_counts();
        let mut grad_s = Array2::<f64>::zeros(support.embeddings.raw_dim());
        for (mut g, &y) in grad_s.axis_iter_mut(Axis(0)).zip(&support.labels) {
            g.assign(&grad_c.row(y));
            g /= counts[y] as f64;
        }
        (grad_s, grad_q)
    }
}

/// Cosine-attention head with its intermediates.
struct MatchingForward {
    q_unit: Array2<f64>,
    q_norm: Array1<f64>,
    s_unit: Array2<f64>,
    s_norm: Array1<f64>,
    attention: Array2<f64>,
    posterior: QueryPosterior,
}

fn unit_rows(m: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::Input(format!(
            "{what} row {i} has zero norm; cosine similarity is undefined"
        )));
    }
    let mut unit = m.to_owned();
    Zip::from(unit.rows_mut())
        .and(&norms)
        .for_each(|mut r, &n| r /= n);
    Ok((unit, norms))
}

impl MatchingForward {
    fn new(support: &LabeledEmbeddings, queries: ArrayView2<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Input("matching head needs a nonempty support set".into()));
        }
        if queries.ncols() != support.dim() {
            return Err(Error::Dimension {
                what: "query feature dimension",
                expected: support.dim(),
                got: queries.ncols(),
            });
        }
        let (s_unit, s_norm) = unit_rows(support.embeddings.view(), "support")?;
        let (q_unit, q_norm) = unit_rows(queries, "query")?;
        let attention = softmax_rows(&q_unit.dot(&s_unit.t()));
        let mut probs = Array2::<f64>::zeros((queries.nrows(), support.n_classes));
        for (i, &y) in support.labels.iter().enumerate() {
            let mut col = probs.column_mut(y);
            col += &attention.column(i);
        }
        for mut row in probs.axis_iter_mut(Axis(0)) {
            let s = row.sum();
            row /= s;
        }
        Ok(Self {
            q_unit,
            q_norm,
            s_unit,
            s_norm,
            attention,
            posterior: QueryPosterior { probs },
        })
    }

    fn backward(&self, support: &LabeledEmbeddings, grad_probs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        // dL/dA_ji = G_{j, y_i}; the per-row renormalization is the identity
        // on the simplex and contributes nothing
        let mut grad_att = Array2::<f64>::zeros(self.attention.raw_dim());
        for (i, &y) in support.labels.iter().enumerate() {
            grad_att.column_mut(i).assign(&grad_probs.column(y));
        }
        let grad_cos = softmax_backward(&self.attention, &grad_att);
        let grad_q_unit = grad_cos.dot(&self.s_unit);
        let grad_s_unit = grad_cos.t().dot(&self.q_unit);
        (
            unit_backward(&self.s_unit, &self.s_norm, grad_s_unit),
            unit_backward(&self.q_unit, &self.q_norm, grad_q_unit),
        )
    }
}

/// Gradient through `x -> x / ||x||` per row.
fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, mut grad: Array2<f64>) -> Array2<f64> {
    Zip::from(grad.rows_mut())
        .and(unit.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            let along = g.dot(&u);
            g.scaled_add(-along, &u);
            g /= n;
        });
    grad
}

impl Classifier {
    pub fn name(&self) -> String {
        match (self.head, self.transport.is_some()) {
            (Head::ProtoNet, true) => "tp".into(),
            (head, true) => format!("{}+ot", head.name()),
            (head, false) => head.name().into(),
        }
    }

    /// Posterior only; returns the raw plan when the transport step ran.
    pub fn posterior(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
    ) -> Result<(QueryPosterior, Option<TransportPlan>)> {
        let (moved, plan) = self.transported(support, queries)?;
        let head_support = moved.as_ref().map_or(support, |(s, _)| s);
        let posterior = self.head_posterior(head_support, queries)?;
        Ok((posterior, plan))
    }

    /// Forward and backward pass on one episode.
    pub fn loss_and_gradients(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
        query_labels: &[usize],
    ) -> Result<EpisodeOutcome> {
        let (moved, plan) = self.transported(support, queries)?;
        let fixed = moved.as_ref().map(|(_, pi)| pi.view());
        let mut outcome = self.run_with_plan(support, queries, query_labels, fixed)?;
        outcome.plan = plan;
        Ok(outcome)
    }

    /// Like [`loss_and_gradients`](Self::loss_and_gradients) but with a
    /// caller-supplied row-normalized plan (`n_support x n_query`) in place of
    /// solving for one. `None` runs the head on the untransported support.
    pub fn loss_and_gradients_with_plan(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
        query_labels: &[usize],
        plan_normalized: Option<ArrayView2<f64>>,
    ) -> Result<EpisodeOutcome> {
        self.run_with_plan(support, queries, query_labels, plan_normalized)
    }

    #[allow(clippy::type_complexity)]
    fn transported(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
    ) -> Result<(Option<(LabeledEmbeddings, Array2<f64>)>, Option<TransportPlan>)> {
        match &self.transport {
            None => Ok((None, None)),
            Some(t) => {
                let (moved, plan, normalized) = transport_support(support, queries, t)?;
                Ok((Some((moved, normalized)), Some(plan)))
            }
        }
    }

    fn head_posterior(&self, support: &LabeledEmbeddings, queries: ArrayView2<f64>) -> Result<QueryPosterior> {
        match self.head {
            Head::ProtoNet => protonet_posterior_with(&compute_prototypes(support)?, queries, self.distance),
            Head::MatchingNet => matchingnet_posterior(support, queries),
        }
    }

    fn run_with_plan(
        &self,
        support: &LabeledEmbeddings,
        queries: ArrayView2<f64>,
        query_labels: &[usize],
        plan: Option<ArrayView2<f64>>,
    ) -> Result<EpisodeOutcome> {
        let head_support = match plan {
            None => support.clone(),
            Some(pi) => {
                if pi.dim() != (support.len(), queries.nrows()) {
                    return Err(Error::Input(format!(
                        "plan shape {:?} does not match {} support x {} query",
                        pi.dim(),
                        support.len(),
                        queries.nrows()
                    )));
                }
                support.with_embeddings(pi.dot(&queries))?
            }
        };
        let (posterior, grad_head_s, mut grad_q) = match self.head {
            Head::ProtoNet => {
                let fwd = PrototypeForward::new(&head_support, queries, self.distance)?;
                let posterior = QueryPosterior { probs: fwd.probs.clone() };
                let (_, grad_p) = loss_and_grad(&posterior, query_labels)?;
                let (gs, gq) = fwd.backward(&head_support, queries, self.distance, &grad_p);
                (posterior, gs, gq)
            }
            Head::MatchingNet => {
                let fwd = MatchingForward::new(&head_support, queries)?;
                let (_, grad_p) = loss_and_grad(&fwd.posterior, query_labels)?;
                let (gs, gq) = fwd.backward(&head_support, &grad_p);
                (fwd.posterior, gs, gq)
            }
        };
        let loss = episode_loss(&posterior, query_labels)?;
        let grad_support = match plan {
            None => grad_head_s,
            Some(pi) => {
                // moved support is pi Q with pi held fixed
                grad_q += &pi.t().dot(&grad_head_s);
                Array2::zeros(support.embeddings.raw_dim())
            }
        };
        Ok(EpisodeOutcome {
            posterior,
            loss,
            grad_support,
            grad_query: grad_q,
            plan: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
    }

    fn episode(seed: u64, n_way: usize, k_shot: usize, n_query: usize, d: usize) -> (LabeledEmbeddings, Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n_way).flat_map(|k| std::iter::repeat_n(k, k_shot)).collect();
        let s = gaussian(&mut rng, n_way * k_shot, d, 1.0);
        let q = gaussian(&mut rng, n_query * n_way, d, 1.0);
        let ql = (0..n_way).flat_map(|k| std::iter::repeat_n(k, n_query)).collect();
        (LabeledEmbeddings::new(s, labels, n_way).unwrap(), q, ql)
    }

    #[test]
    fn prototypes_one_shot_and_mean() {
        let s = LabeledEmbeddings::new(array![[1.0, 2.0], [3.0, 4.0]], vec![1, 0], 2).unwrap();
        assert_eq!(compute_prototypes(&s).unwrap().centers, array![[3.0, 4.0], [1.0, 2.0]]);
        let s = LabeledEmbeddings::new(array![[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]], vec![0, 0, 1], 2).unwrap();
        assert_eq!(compute_prototypes(&s).unwrap().centers.row(0), array![1.0, 1.0]);
    }

    #[test]
    fn prototypes_ignore_support_order() {
        let (s, _, _) = episode(3, 4, 3, 1, 5);
        let perm: Vec<usize> = (0..s.len()).rev().collect();
        let shuffled = LabeledEmbeddings::new(
            s.embeddings().select(Axis(0), &perm),
            perm.iter().map(|&i| s.labels()[i]).collect(),
            4,
        )
        .unwrap();
        let a = compute_prototypes(&s).unwrap().centers;
        let b = compute_prototypes(&shuffled).unwrap().centers;
        assert!(max_abs_diff(&a, &b) < 1e-15);
    }

    #[test]
    fn prototypes_reject_empty_class() {
        let s = LabeledEmbeddings::new(array![[0.0], [1.0]], vec![0, 0], 2).unwrap();
        assert!(compute_prototypes(&s).is_err());
        assert!(LabeledEmbeddings::new(array![[0.0]], vec![2], 2).is_err());
    }

    #[test]
    fn protonet_confident_and_uniform_cases() {
        let p = Prototypes {
            centers: array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]],
        };
        let post = protonet_posterior(&p, array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(post.predictions(), vec![0]);
        assert!(post.probs()[[0, 0]] > 0.99);
        let p = Prototypes {
            centers: array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
        };
        let post = protonet_posterior(&p, array![[0.0, 0.0]].view()).unwrap();
        for v in post.probs().iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn protonet_two_class_closed_form() {
        let p = Prototypes {
            centers: array![[0.0, 0.0], [2.0, 0.0]],
        };
        for t in [-1.5, -0.3, 0.0, 0.4, 0.9] {
            let x: f64 = 1.0 - t;
            let post = protonet_posterior(&p, array![[x, 0.0]].view()).unwrap();
            let d0 = x * x;
            let d1 = (x - 2.0) * (x - 2.0);
            let expected = 1.0 / (1.0 + (d1 - d0).exp());
            assert!((post.probs()[[0, 1]] - expected).abs() < 1e-14, "t={t}");
        }
    }

    #[test]
    fn unsquared_distance_option() {
        let p = Prototypes {
            centers: array![[0.0, 0.0], [3.0, 4.0]],
        };
        let post = protonet_posterior_with(&p, array![[0.0, 0.0]].view(), CostMetric::Euclidean).unwrap();
        let expected = 1.0 / (1.0 + (-5.0f64).exp());
        assert!((post.probs()[[0, 0]] - expected).abs() < 1e-14);
    }

    #[test]
    fn matching_collinear_wins() {
        let s = LabeledEmbeddings::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], vec![0, 1, 2], 3).unwrap();
        let post = matchingnet_posterior(&s, array![[0.0, 3.0, 0.0]].view()).unwrap();
        assert_eq!(post.predictions(), vec![1]);
    }

    #[test]
    fn matching_duplicate_doubles_mass() {
        let base = LabeledEmbeddings::new(array![[1.0, 0.2], [0.3, 1.0]], vec![0, 1], 2).unwrap();
        let dup = LabeledEmbeddings::new(array![[1.0, 0.2], [0.3, 1.0], [0.3, 1.0]], vec![0, 1, 1], 2).unwrap();
        let q = array![[0.7, 0.5]];
        let a = matchingnet_posterior(&base, q.view()).unwrap();
        let b = matchingnet_posterior(&dup, q.view()).unwrap();
        // unnormalized masses m0, m1 become m0, 2 m1
        let ratio_a = a.probs()[[0, 1]] / a.probs()[[0, 0]];
        let ratio_b = b.probs()[[0, 1]] / b.probs()[[0, 0]];
        assert!((ratio_b - 2.0 * ratio_a).abs() < 1e-12);
    }

    #[test]
    fn matching_matches_naive_attention() {
        let (s, q, _) = episode(11, 5, 5, 3, 6);
        let post = matchingnet_posterior(&s, q.view()).unwrap();
        for j in 0..q.nrows() {
            let qj = q.row(j);
            let mut weights = Vec::new();
            for i in 0..s.len() {
                let si = s.embeddings().row(i);
                let cos = qj.dot(&si) / (qj.dot(&qj).sqrt() * si.dot(&si).sqrt());
                weights.push(cos.exp());
            }
            let total: f64 = weights.iter().sum();
            for k in 0..5 {
                let mass: f64 = (0..s.len()).filter(|&i| s.labels()[i] == k).map(|i| weights[i]).sum();
                assert!((post.probs()[[j, k]] - mass / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_rejects_zero_norm() {
        let s = LabeledEmbeddings::new(array![[0.0, 0.0], [1.0, 0.0]], vec![0, 1], 2).unwrap();
        assert!(matchingnet_posterior(&s, array![[1.0, 1.0]].view()).is_err());
        let s = LabeledEmbeddings::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1], 2).unwrap();
        assert!(matchingnet_posterior(&s, array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn tp_self_coupling_matches_protonet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = gaussian(&mut rng, 5, 4, 1.0);
        let support = LabeledEmbeddings::new(s.clone(), (0..5).collect(), 5).unwrap();
        let (tp, plan) = transported_prototypes_posterior(&support, s.view(), &SinkhornConfig::with_epsilon(1e-3)).unwrap();
        assert!(plan.converged);
        let pn = protonet_posterior(&compute_prototypes(&support).unwrap(), s.view()).unwrap();
        let gap = (tp.probs() - pn.probs()).fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn tp_recovers_translated_queries() {
        // well-separated clusters; queries are the support moved far away
        let centers = array![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for k in 0..3 {
            for _ in 0..4 {
                let noise = gaussian(&mut rng, 1, 2, 0.5);
                pts.push(&centers.row(k) + &noise.row(0));
                labels.push(k);
            }
        }
        let s = ndarray::stack(Axis(0), &pts.iter().map(|p| p.view()).collect::<Vec<_>>()).unwrap();
        let v = array![25.0, -13.0];
        let q = &s + &v;
        let support = LabeledEmbeddings::new(s, labels.clone(), 3).unwrap();
        let (tp, _) = transported_prototypes_posterior(&support, q.view(), &SinkhornConfig::with_epsilon(1e-3)).unwrap();
        assert_eq!(tp.predictions(), labels);
        let pn = protonet_posterior(&compute_prototypes(&support).unwrap(), q.view()).unwrap();
        assert!(pn.accuracy(&labels).unwrap() < 0.5);
    }

    #[test]
    fn tp_single_query_is_uniform() {
        let (s, _, _) = episode(2, 4, 2, 1, 3);
        let q = array![[0.3, -1.0, 2.0]];
        let (post, _) = transported_prototypes_posterior(&s, q.view(), &SinkhornConfig::default()).unwrap();
        for v in post.probs().iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let one_hot = QueryPosterior::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(episode_loss(&one_hot, &[0, 1]).unwrap().value.abs() < 1e-15);
        let uniform = QueryPosterior::new(Array2::from_elem((3, 5), 0.2)).unwrap();
        let l = episode_loss(&uniform, &[0, 3, 4]).unwrap();
        assert!((l.value - 5f64.ln()).abs() < 1e-12);
        assert!((l.value - 1.6094).abs() < 1e-4);
        let floored = episode_loss(&one_hot, &[1, 1]).unwrap();
        assert_eq!(floored.floored, 1);
        assert!((floored.value - (-LOSS_FLOOR.ln()) / 2.0).abs() < 1e-12);
        assert!(episode_loss(&one_hot, &[0, 2]).is_err());
    }

    #[test]
    fn loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let raw = Array2::from_shape_fn((7, 4), |_| rng.random::<f64>() + 0.01);
        let probs = &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1));
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..4)).collect();
        let post = QueryPosterior::new(probs.clone()).unwrap();
        let mut direct = 0.0;
        for (j, y) in labels.iter().enumerate() {
            direct += -probs[[j, *y]].ln();
        }
        assert!((episode_loss(&post, &labels).unwrap().value - direct / 7.0).abs() < 1e-13);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let post = QueryPosterior::new(array![[0.4, 0.4, 0.2], [0.25, 0.25, 0.5]]).unwrap();
        assert_eq!(post.predictions(), vec![0, 2]);
        assert!((post.accuracy(&[1, 2]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ot_usage_parses_flags() {
        for u in OtUsage::ALL {
            assert_eq!(u.flag().parse::<OtUsage>().unwrap(), u);
        }
        assert!("sometimes".parse::<OtUsage>().is_err());
        assert!(!LearnerSpec::new(Head::ProtoNet, OtUsage::TestOnly).for_training().transport.is_some());
        assert!(LearnerSpec::new(Head::ProtoNet, OtUsage::TestOnly).for_evaluation().transport.is_some());
        assert_eq!(LearnerSpec::transported_prototypes().for_training().name(), "tp");
    }

    /// Central differences of the episode loss with respect to every support
    /// and query coordinate, the plan held at `plan`.
    fn numeric_gradients(
        clf: &Classifier,
        s: &LabeledEmbeddings,
        q: &Array2<f64>,
        ql: &[usize],
        plan: Option<ArrayView2<f64>>,
    ) -> (Array2<f64>, Array2<f64>) {
        let h = 1e-5;
        let loss = |s: &LabeledEmbeddings, q: &Array2<f64>| {
            clf.loss_and_gradients_with_plan(s, q.view(), ql, plan).unwrap().loss.value
        };
        let mut gs = Array2::zeros(s.embeddings().raw_dim());
        for idx in ndarray::indices(gs.raw_dim()) {
            let mut plus = s.embeddings().clone();
            plus[idx] += h;
            let mut minus = s.embeddings().clone();
            minus[idx] -= h;
            gs[idx] = (loss(&s.with_embeddings(plus).unwrap(), q) - loss(&s.with_embeddings(minus).unwrap(), q)) / (2.0 * h);
        }
        let mut gq = Array2::zeros(q.raw_dim());
        for idx in ndarray::indices(gq.raw_dim()) {
            let mut plus = q.clone();
            plus[idx] += h;
            let mut minus = q.clone();
            minus[idx] -= h;
            gq[idx] = (loss(s, &plus) - loss(s, &minus)) / (2.0 * h);
        }
        (gs, gq)
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        diff / scale.max(1e-8)
    }

    fn check_head(clf: Classifier, seed: u64) {
        let (s, q, ql) = episode(seed, 3, 2, 2, 4);
        let out = clf.loss_and_gradients(&s, q.view(), &ql).unwrap();
        let plan = clf.transport.as_ref().map(|t| transport_support(&s, q.view(), t).unwrap().2);
        let (ns, nq) = numeric_gradients(&clf, &s, &q, &ql, plan.as_ref().map(|p| p.view()));
        if clf.transport.is_some() {
            assert!(out.grad_support.iter().all(|v| *v == 0.0));
        } else {
            assert!(rel_err(&out.grad_support, &ns) < 1e-6, "{} support {}", clf.name(), rel_err(&out.grad_support, &ns));
        }
        assert!(rel_err(&out.grad_query, &nq) < 1e-6, "{} query {}", clf.name(), rel_err(&out.grad_query, &nq));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4 {
            for head in [Head::ProtoNet, Head::MatchingNet] {
                for ot in [OtUsage::Never, OtUsage::TrainAndTest] {
                    let mut spec = LearnerSpec::new(head, ot);
                    check_head(spec.for_training(), seed);
                    spec.distance = CostMetric::Euclidean;
                    check_head(spec.for_training(), seed);
                }
            }
        }
    }

    fn rotation(theta: f64, d: usize) -> Array2<f64> {
        let mut r = Array2::eye(d);
        r[[0, 0]] = theta.cos();
        r[[0, 1]] = -theta.sin();
        r[[1, 0]] = theta.sin();
        r[[1, 1]] = theta.cos();
        r
    }

    fn all_classifiers() -> Vec<Classifier> {
        let mut out = Vec::new();
        for head in [Head::ProtoNet, Head::MatchingNet] {
            for ot in [OtUsage::Never, OtUsage::TrainAndTest] {
                out.push(LearnerSpec::new(head, ot).for_training());
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn posterior_rows_sum_to_one(seed in 0u64..10_000) {
            let (s, q, _) = episode(seed, 4, 2, 3, 5);
            for clf in all_classifiers() {
                let (post, _) = clf.posterior(&s, q.view()).unwrap();
                for row in post.probs().axis_iter(Axis(0)) {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|p| *p >= 0.0));
                }
            }
        }

        #[test]
        fn protonet_rigid_motion_invariance(seed in 0u64..10_000, theta in 0.0f64..std::f64::consts::TAU, shift in -20.0f64..20.0) {
            let (s, q, _) = episode(seed, 3, 2, 2, 3);
            let r = rotation(theta, 3);
            let v = array![shift, -0.5 * shift, 2.0];
            let moved_s = s.with_embeddings(s.embeddings().dot(&r) + &v).unwrap();
            let moved_q = q.dot(&r) + &v;
            let clf = LearnerSpec::protonet().for_training();
            let (a, _) = clf.posterior(&s, q.view()).unwrap();
            let (b, _) = clf.posterior(&moved_s, moved_q.view()).unwrap();
            prop_assert!(max_abs_diff(a.probs(), b.probs()) < 1e-6);
        }

        #[test]
        fn tp_joint_translation_invariance(seed in 0u64..10_000, shift in -20.0f64..20.0) {
            let (s, q, _) = episode(seed, 3, 2, 2, 3);
            let v = array![shift, 1.0, -shift];
            let moved_s = s.with_embeddings(s.embeddings() + &v).unwrap();
            let clf = LearnerSpec::transported_prototypes().for_training();
            let (a, _) = clf.posterior(&s, q.view()).unwrap();
            let (b, _) = clf.posterior(&moved_s, (&q + &v).view()).unwrap();
            prop_assert!(max_abs_diff(a.probs(), b.probs()) < 1e-6);
        }

        #[test]
        fn class_permutation_equivariance(seed in 0u64..10_000, rot in 1usize..4) {
            let (s, q, _) = episode(seed, 4, 2, 2, 4);
            // relabel class k as (k + rot) mod 4
            let relabeled = LabeledEmbeddings::new(
                s.embeddings().clone(),
                s.labels().iter().map(|y| (y + rot) % 4).collect(),
                4,
            ).unwrap();
            for clf in all_classifiers() {
                let (a, _) = clf.posterior(&s, q.view()).unwrap();
                let (b, _) = clf.posterior(&relabeled, q.view()).unwrap();
                for k in 0..4 {
                    let diff = (&a.probs().column(k) - &b.probs().column((k + rot) % 4)).fold(0.0f64, |m, v| m.max(v.abs()));
                    prop_assert!(diff < 1e-12);
                }
            }
        }
    }
}
