//! Graph convolutional network: forward pass, softmax cross-entropy losses,
//! full-batch Adam training, evaluation, and parameter checkpoints.
//!
//! Layer rule: E^(l) = act_l(Â E^(l-1) W^(l)) with ReLU on layers 1..L-1 and
//! the identity on layer L; class probabilities come from a softmax applied to
//! the final embedding row, folded into the loss. The ReLU subgradient at
//! exactly zero is taken as zero.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::derivatives;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seeding::rng_for;

/// Numerical floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Layer weights. `weights[l]` maps layer-l inputs (h_{l-1} columns) to
/// layer-(l+1) outputs, so the network has `weights.len()` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Array2<f64>>,
}

impl GcnParams {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Embedding widths [h_0, h_1, ..., h_L].
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.weights.iter().map(|w| w.nrows()).collect();
        d.push(self.weights.last().map_or(0, |w| w.ncols()));
        d
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    fn check_chain(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (l, pair) in self.weights.windows(2).enumerate() {
            if pair[0].ncols() != pair[1].nrows() {
                return Err(Error::DimensionMismatch {
                    context: "layer chain",
                    expected: format!("layer {} input width {}", l + 2, pair[0].ncols()),
                    found: format!("{}", pair[1].nrows()),
                });
            }
        }
        Ok(())
    }
}

/// Everything the forward pass computes, cached for reuse by gradients,
/// Hessian products, and loss evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// E^(0)..E^(L); E^(0) is the feature matrix.
    pub embeddings: Vec<Array2<f64>>,
    /// Â E^(l-1) for l = 1..L, indexed l-1.
    pub aggregated: Vec<Array2<f64>>,
    /// Activation derivative masks for l = 1..L, indexed l-1; the output
    /// layer's mask is all ones (identity activation).
    pub act_masks: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.aggregated.len()
    }

    /// Final embedding E^(L) (pre-softmax scores).
    pub fn output(&self) -> &Array2<f64> {
        self.embeddings.last().expect("trace has at least one layer")
    }
}

/// Full-batch training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths; the input and output widths come from the graph.
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![16],
            learning_rate: 0.01,
            epochs: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded symmetric-uniform initialization with bound sqrt(6/(fan_in+fan_out))
/// per layer. Identical seeds give bit-identical parameters.
pub fn init_params(graph: &Graph, cfg: &TrainConfig) -> GcnParams {
    let mut dims = vec![graph.feature_dim()];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(graph.num_classes());
    let mut weights = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng_for(cfg.seed, "weight-init", l as u64);
        let mut w = Array2::zeros((fan_in, fan_out));
        for a in 0..fan_in {
            for b in 0..fan_out {
                w[(a, b)] = rng.random_range(-bound..bound);
            }
        }
        weights.push(w);
    }
    GcnParams { weights }
}

/// Run the network over the whole graph, caching embeddings, per-layer
/// aggregates, and activation masks.
pub fn forward(graph: &Graph, params: &GcnParams) -> Result<ForwardTrace> {
    params.check_chain()?;
    if params.weights[0].nrows() != graph.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input",
            expected: format!("{} feature columns", params.weights[0].nrows()),
            found: format!("{}", graph.feature_dim()),
        });
    }
    if params.weights.last().unwrap().ncols() != graph.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "forward output",
            expected: format!("{} classes", params.weights.last().unwrap().ncols()),
            found: format!("{}", graph.num_classes()),
        });
    }
    let num_layers = params.num_layers();
    let mut embeddings = Vec::with_capacity(num_layers + 1);
    let mut aggregated = Vec::with_capacity(num_layers);
    let mut act_masks = Vec::with_capacity(num_layers);
    embeddings.push(graph.features().clone());
    for l in 0..num_layers {
        let agg = graph.a_hat().spmm(&embeddings[l])?;
        let z = agg.dot(&params.weights[l]);
        aggregated.push(agg);
        if l + 1 < num_layers {
            let mask = z.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            embeddings.push(&z * &mask);
            act_masks.push(mask);
        } else {
            act_masks.push(Array2::ones(z.dim()));
            embeddings.push(z);
        }
    }
    if embeddings.last().unwrap().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { context: "forward" });
    }
    Ok(ForwardTrace {
        embeddings,
        aggregated,
        act_masks,
    })
}

/// Numerically stable softmax of one score row.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for every node (softmax over the final embedding rows).
pub fn predict_probs(trace: &ForwardTrace) -> Array2<f64> {
    let scores = trace.output();
    let mut out = Array2::zeros(scores.dim());
    for (i, row) in scores.rows().into_iter().enumerate() {
        let p = softmax(row.as_slice().expect("contiguous row"));
        for (j, v) in p.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// One-hot label vector of length `num_classes`.
pub fn one_hot(label: usize, num_classes: usize) -> Array1<f64> {
    let mut y = Array1::zeros(num_classes);
    y[label] = 1.0;
    y
}

/// Cross-entropy of one node against its label, with the probability floored
/// at [`PROB_FLOOR`] inside the log.
pub fn node_loss(graph: &Graph, trace: &ForwardTrace, node: usize) -> Result<f64> {
    if node >= graph.num_nodes() {
        return Err(Error::NodeOutOfRange {
            node,
            num_nodes: graph.num_nodes(),
        });
    }
    let row = trace.output().row(node);
    let p = softmax(row.as_slice().expect("contiguous row"));
    Ok(-(p[graph.label(node)].max(PROB_FLOOR)).ln())
}

/// Mean cross-entropy over a node set.
pub fn total_loss(graph: &Graph, trace: &ForwardTrace, node_set: &[usize]) -> Result<f64> {
    weighted_mean_loss(graph, trace, node_set, None)
}

/// Mean of w_u * CE(u) over the node set; `weights` aligns with `node_set`
/// and defaults to all ones.
pub fn weighted_mean_loss(
    graph: &Graph,
    trace: &ForwardTrace,
    node_set: &[usize],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if node_set.is_empty() {
        return Err(Error::EmptyNodeSet { context: "loss" });
    }
    if let Some(w) = weights {
        if w.len() != node_set.len() {
            return Err(Error::DimensionMismatch {
                context: "loss weights",
                expected: format!("{}", node_set.len()),
                found: format!("{}", w.len()),
            });
        }
    }
    let mut sum = 0.0;
    for (k, &u) in node_set.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        sum += w * node_loss(graph, trace, u)?;
    }
    Ok(sum / node_set.len() as f64)
}

/// Class prediction per node: argmax probability, smaller class on ties.
pub fn predict_labels(trace: &ForwardTrace) -> Vec<usize> {
    trace
        .output()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Micro-averaged F1 over single-label predictions. With exactly one label
/// per node, micro precision, recall, and F1 all equal plain accuracy.
pub fn micro_f1(predicted: &[usize], actual: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::EmptyNodeSet { context: "micro_f1" });
    }
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            context: "micro_f1",
            expected: format!("{}", actual.len()),
            found: format!("{}", predicted.len()),
        });
    }
    let hits = predicted
        .iter()
        .zip(actual)
        .filter(|(p, a)| p == a)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Adam moment state for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &GcnParams) -> Self {
        AdamState {
            m: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            t: 0,
        }
    }

    /// One full-batch update step.
    pub fn step(&mut self, params: &mut GcnParams, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (l, g) in grads.iter().enumerate() {
            let m = &mut self.m[l];
            let v = &mut self.v[l];
            let w = &mut params.weights[l];
            for ((m_e, v_e), (w_e, g_e)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(w.iter_mut().zip(g.iter()))
            {
                *m_e = ADAM_BETA1 * *m_e + (1.0 - ADAM_BETA1) * g_e;
                *v_e = ADAM_BETA2 * *v_e + (1.0 - ADAM_BETA2) * g_e * g_e;
                let m_hat = *m_e / bc1;
                let v_hat = *v_e / bc2;
                *w_e -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trained parameters plus the per-epoch loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GcnParams,
    pub loss_history: Vec<f64>,
}

/// Train on the graph's train mask with default weighting.
pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<GcnParams> {
    train_on(graph, cfg, graph.train_mask(), None).map(|o| o.params)
}

/// Train on an explicit node set, optionally weighting each node's loss term.
///
/// Weights align with `node_set`; the loss is the mean of w_u * CE(u). The
/// run is bit-deterministic for a fixed seed.
pub fn train_on(
    graph: &Graph,
    cfg: &TrainConfig,
    node_set: &[usize],
    weights: Option<&[f64]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if node_set.is_empty() {
        return Err(Error::EmptyNodeSet { context: "train" });
    }
    let mut params = init_params(graph, cfg);
    let mut adam = AdamState::new(&params);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let trace = forward(graph, &params)?;
        let loss = weighted_mean_loss(graph, &trace, node_set, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "train" });
        }
        loss_history.push(loss);
        let grads = derivatives::weight_gradients(graph, &trace, &params, node_set, weights)?;
        adam.step(&mut params, &grads, cfg.learning_rate);
    }
    Ok(TrainOutcome { params, loss_history })
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    layers: Vec<CheckpointLayer>,
}

/// Write parameters to a JSON checkpoint; round-trips exactly.
pub fn save_checkpoint<P: AsRef<Path>>(params: &GcnParams, path: P) -> Result<()> {
    let file = CheckpointFile {
        layers: params
            .weights
            .iter()
            .map(|w| CheckpointLayer {
                rows: w.nrows(),
                cols: w.ncols(),
                values: w.iter().cloned().collect(),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Read parameters from a JSON checkpoint.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<GcnParams> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    let mut weights = Vec::with_capacity(file.layers.len());
    for layer in file.layers {
        if layer.values.len() != layer.rows * layer.cols {
            return Err(Error::DimensionMismatch {
                context: "checkpoint",
                expected: format!("{} values", layer.rows * layer.cols),
                found: format!("{}", layer.values.len()),
            });
        }
        let w = Array2::from_shape_vec((layer.rows, layer.cols), layer.values)
            .expect("shape checked above");
        weights.push(w);
    }
    let params = GcnParams { weights };
    params.check_chain()?;
    Ok(params)
}
