//! Uncertainty put to work: active-learning acquisition and reweighted
//! semi-supervised training.
//!
//! The active-learning loop grows a labeled set by repeatedly training a
//! model, scoring the remaining pool, and querying the widest intervals
//! (with random and degree baselines for comparison). The reweighted trainer
//! periodically refreshes per-node uncertainty during optimization and scales
//! each training node's loss term, so confidently-fit nodes stop dominating
//! the objective. [`outside_receptive_field`] flags nodes whose intervals
//! reflect label noise alone because no training signal can reach them.

use std::time::Instant;

use serde::Serialize;

use crate::derivatives;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::influence::InfluenceConfig;
use crate::jackknife::{IntervalConfig, NodeUncertainty, quantify_all};
use crate::model::{
    self, AdamState, ForwardTrace, GcnParams, TrainConfig, weighted_mean_loss,
};
use crate::seeding::rng_for;

/// Query-loop settings: how many nodes per step, the total budget, and the
/// seed driving the random baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcquisitionConfig {
    pub step_size: usize,
    pub budget: usize,
    pub seed: u64,
    pub initial_labels: Vec<usize>,
}

impl AcquisitionConfig {
    /// Checks the step/budget arithmetic and that the starting labels sit
    /// inside the graph's training pool with enough pool left to query.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if self.step_size == 0 {
            return Err(Error::InvalidConfig("step_size must be at least 1".into()));
        }
        if self.budget < self.step_size || self.budget % self.step_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "budget {} must be a positive multiple of step_size {}",
                self.budget, self.step_size
            )));
        }
        if self.initial_labels.is_empty() {
            return Err(Error::EmptyNodeSet { context: "initial labels" });
        }
        let pool = graph.train_mask();
        for &u in &self.initial_labels {
            if !pool.contains(&u) {
                return Err(Error::InvalidConfig(format!(
                    "initial label {u} is not in the training pool"
                )));
            }
        }
        let unlabeled = pool.len() - self.initial_labels.len();
        if unlabeled < self.budget {
            return Err(Error::PoolTooSmall {
                pool: unlabeled,
                requested: self.budget,
            });
        }
        Ok(())
    }
}

/// How the query loop picks its next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Widest confidence intervals first.
    Jackknife,
    /// Seeded uniform draw.
    Random,
    /// Highest-degree nodes first.
    Degree,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jackknife" => Ok(Strategy::Jackknife),
            "random" => Ok(Strategy::Random),
            "degree" => Ok(Strategy::Degree),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy {other:?}; expected jackknife, random, or degree"
            ))),
        }
    }
}

/// One row of the query-loop record: the model retrained after step `step`
/// had `labels_used` labels and scored `micro_f1_test` on the test mask.
/// Step 0 is the model trained on the initial labels alone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub labels_used: usize,
    pub micro_f1_test: f64,
    pub wall_ms: f64,
    /// Nodes queried at this step; empty for step 0.
    pub selected: Vec<usize>,
}

/// The `b` pool nodes with the largest interval widths, widest first, ties
/// broken toward the smaller node id.
pub fn acquire_top_b(uncertainties: &[NodeUncertainty], b: usize) -> Result<Vec<usize>> {
    if uncertainties.len() < b {
        return Err(Error::PoolTooSmall {
            pool: uncertainties.len(),
            requested: b,
        });
    }
    let mut order: Vec<(f64, usize)> =
        uncertainties.iter().map(|u| (u.width, u.node)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(b).map(|(_, node)| node).collect())
}

fn micro_f1_on_test(graph: &Graph, params: &GcnParams) -> Result<f64> {
    let trace = model::forward(graph, params)?;
    let predicted = model::predict_labels(&trace);
    let test = graph.test_mask();
    let pred_test: Vec<usize> = test.iter().map(|&u| predicted[u]).collect();
    let actual: Vec<usize> = test.iter().map(|&u| graph.label(u)).collect();
    model::micro_f1(&pred_test, &actual)
}

fn node_degrees(graph: &Graph) -> Vec<usize> {
    let mut deg = vec![0usize; graph.num_nodes()];
    for &(a, b) in graph.edges() {
        deg[a] += 1;
        deg[b] += 1;
    }
    deg
}

/// Runs the label-query loop: train on the current labels, pick `step_size`
/// pool nodes by `strategy`, retrain, and record test accuracy, until the
/// budget is spent. Every retrain restarts from the same seeded
/// initialization, so runs are deterministic and strategies differ only in
/// what they query.
pub fn active_learning_run(
    graph: &Graph,
    acq: &AcquisitionConfig,
    train_cfg: &TrainConfig,
    icfg: &InfluenceConfig,
    ccfg: &IntervalConfig,
    strategy: Strategy,
) -> Result<Vec<StepMetrics>> {
    acq.validate(graph)?;
    ccfg.validate()?;
    let mut labeled: Vec<usize> = acq.initial_labels.clone();
    labeled.sort_unstable();
    labeled.dedup();
    let mut unlabeled: Vec<usize> = graph
        .train_mask()
        .iter()
        .copied()
        .filter(|u| !labeled.contains(u))
        .collect();
    let degrees = node_degrees(graph);

    let mut metrics = Vec::with_capacity(acq.budget / acq.step_size + 1);
    let started = Instant::now();
    let mut current = graph.with_masks(
        labeled.clone(),
        graph.val_mask().to_vec(),
        graph.test_mask().to_vec(),
    )?;
    let mut params = model::train(&current, train_cfg)?;
    metrics.push(StepMetrics {
        step: 0,
        labels_used: labeled.len(),
        micro_f1_test: micro_f1_on_test(&current, &params)?,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        selected: Vec::new(),
    });

    let steps = acq.budget / acq.step_size;
    for step in 1..=steps {
        let step_start = Instant::now();
        let selected = match strategy {
            Strategy::Jackknife => {
                let sweep_cfg = icfg.clone().clamped_to(labeled.len());
                let uncertainties =
                    quantify_all(&current, &params, &unlabeled, &sweep_cfg, ccfg)?;
                acquire_top_b(&uncertainties, acq.step_size)?
            }
            Strategy::Random => {
                let mut rng = rng_for(acq.seed, "al-random", step as u64);
                let mut picks: Vec<usize> =
                    rand::seq::index::sample(&mut rng, unlabeled.len(), acq.step_size)
                        .into_iter()
                        .map(|k| unlabeled[k])
                        .collect();
                picks.sort_unstable();
                picks
            }
            Strategy::Degree => {
                let mut order: Vec<usize> = unlabeled.clone();
                order.sort_by(|&a, &b| degrees[b].cmp(&degrees[a]).then(a.cmp(&b)));
                order.truncate(acq.step_size);
                order
            }
        };
        labeled.extend_from_slice(&selected);
        labeled.sort_unstable();
        unlabeled.retain(|u| !selected.contains(u));
        current = graph.with_masks(
            labeled.clone(),
            graph.val_mask().to_vec(),
            graph.test_mask().to_vec(),
        )?;
        params = model::train(&current, train_cfg)?;
        metrics.push(StepMetrics {
            step,
            labels_used: labeled.len(),
            micro_f1_test: micro_f1_on_test(&current, &params)?,
            wall_ms: step_start.elapsed().as_secs_f64() * 1e3,
            selected,
        });
    }
    Ok(metrics)
}

/// Normalizes per-node widths to a unit-Euclidean-norm weight vector. When
/// every width is zero the scores carry no signal, so the fallback is the
/// uniform unit vector (with a logged warning).
pub fn beta_scale(widths: &[f64]) -> Result<Vec<f64>> {
    if widths.is_empty() {
        return Err(Error::EmptyNodeSet { context: "beta scale" });
    }
    if widths.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { context: "beta scale" });
    }
    let norm = widths.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!(
            "all {} widths are zero; falling back to uniform weights",
            widths.len()
        );
        let uniform = 1.0 / (widths.len() as f64).sqrt();
        return Ok(vec![uniform; widths.len()]);
    }
    Ok(widths.iter().map(|w| w.abs() / norm).collect())
}

/// Reweighted-loss settings: the exponent applied to each normalized width
/// and how often the widths are refreshed during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReweightConfig {
    pub tau: f64,
    pub recompute_every: usize,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        ReweightConfig { tau: 2.0, recompute_every: 10 }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "tau must be a nonnegative real, got {}",
                self.tau
            )));
        }
        if self.recompute_every == 0 {
            return Err(Error::InvalidConfig(
                "recompute_every must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over training nodes of `beta_u^tau * CE(u)`; `betas` aligns with the
/// train mask. With `tau = 0` every weight is exactly one, so this equals the
/// unweighted mean loss.
pub fn weighted_loss(
    graph: &Graph,
    trace: &ForwardTrace,
    betas: &[f64],
    tau: f64,
) -> Result<f64> {
    let train = graph.train_mask();
    if betas.len() != train.len() {
        return Err(Error::DimensionMismatch {
            context: "beta weights",
            expected: format!("{}", train.len()),
            found: format!("{}", betas.len()),
        });
    }
    let weights: Vec<f64> = betas.iter().map(|b| b.powf(tau)).collect();
    weighted_mean_loss(graph, trace, train, Some(&weights))
}

/// One epoch of the reweighted training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Whether the uncertainty sweep ran before this epoch's update.
    pub refreshed: bool,
}

/// Parameters plus the per-epoch record of a reweighted training run.
#[derive(Debug, Clone)]
pub struct SslOutcome {
    pub params: GcnParams,
    pub epochs: Vec<SslEpoch>,
}

/// Trains with the uncertainty-weighted loss: a standard seeded loop, except
/// that every `recompute_every` epochs the interval widths of the training
/// nodes are recomputed at the current parameters and turned into weights
/// `beta_u^tau`. Until the first refresh every weight is exactly one, and
/// with `tau = 0` the whole run is identical to plain training.
pub fn ssl_train(
    graph: &Graph,
    train_cfg: &TrainConfig,
    rcfg: &ReweightConfig,
    icfg: &InfluenceConfig,
    ccfg: &IntervalConfig,
) -> Result<SslOutcome> {
    train_cfg.validate()?;
    rcfg.validate()?;
    ccfg.validate()?;
    let train_set: Vec<usize> = graph.train_mask().to_vec();
    if train_set.is_empty() {
        return Err(Error::EmptyNodeSet { context: "reweighted training" });
    }
    let mut params = model::init_params(graph, train_cfg);
    let mut adam = AdamState::new(&params);
    let mut weights = vec![1.0; train_set.len()];
    let mut epochs = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut refreshed = false;
        if rcfg.tau != 0.0 && epoch > 0 && epoch % rcfg.recompute_every == 0 {
            let sweep_cfg = icfg.clone().clamped_to(train_set.len());
            let uncertainties =
                quantify_all(graph, &params, &train_set, &sweep_cfg, ccfg)?;
            let widths: Vec<f64> = uncertainties.iter().map(|u| u.width).collect();
            let betas = beta_scale(&widths)?;
            weights = betas.iter().map(|b| b.powf(rcfg.tau)).collect();
            refreshed = true;
        }
        let trace = model::forward(graph, &params)?;
        let loss = weighted_mean_loss(graph, &trace, &train_set, Some(&weights))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "reweighted training" });
        }
        let grads = derivatives::weight_gradients(
            graph,
            &trace,
            &params,
            &train_set,
            Some(&weights),
        )?;
        adam.step(&mut params, &grads, train_cfg.learning_rate);
        epochs.push(SslEpoch { epoch, loss, refreshed });
    }
    Ok(SslOutcome { params, epochs })
}

/// True when no training node other than `u` lies within `depth` hops of
/// `u`: no label's gradient can reach `u`'s prediction, so `u`'s interval
/// width reflects label noise alone rather than model variability.
pub fn outside_receptive_field(graph: &Graph, u: usize, depth: usize) -> Result<bool> {
    if u >= graph.num_nodes() {
        return Err(Error::NodeOutOfRange { node: u, num_nodes: graph.num_nodes() });
    }
    let train = graph.train_mask();
    let mut visited = vec![false; graph.num_nodes()];
    visited[u] = true;
    let mut frontier = vec![u];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            for (w, _) in graph.a_hat().row(v) {
                if !visited[w] {
                    visited[w] = true;
                    if w != u && train.contains(&w) {
                        return Ok(false);
                    }
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    Ok(true)
}
