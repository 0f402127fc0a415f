//! Leave-one-out errors and jackknife+ predictive intervals.
//!
//! The interval machinery has two layers. The scalar core
//! ([`quantile`], [`jackknife_plus_generic`], [`naive_jackknife`]) works on
//! plain slices and is what the synthetic coverage tests exercise. On top of
//! it, [`node_uncertainty`] and [`quantify_all`] score graph nodes: every
//! leave-one-out parameter set from the influence sweep yields a probability
//! matrix, a node is scored by the Euclidean norm of its probability row under
//! each of those models, and the per-record leave-one-out errors widen the
//! band. The gap between the upper and lower quantile is the node's
//! uncertainty width, which is what the active-learning acquisition ranks.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::influence::{InfluenceConfig, InfluenceContext, LooParams};
use crate::model::{self, GcnParams};

/// Coverage settings for interval construction.
///
/// `alpha` is the tail mass cut from each side, so the nominal coverage of a
/// jackknife+ interval is `1 - 2 * alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntervalConfig {
    pub alpha: f64,
}

impl Default for IntervalConfig {
    fn default() -> Self {
        IntervalConfig { alpha: 0.025 }
    }
}

impl IntervalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || self.alpha >= 0.5 {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 0.5), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Confidence interval for one node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeUncertainty {
    pub node: usize,
    pub lower: f64,
    pub upper: f64,
    /// `upper - lower`; nonnegative whenever the record errors are.
    pub width: f64,
}

/// One entry of a leave-one-out sweep: the left-out node, its error under the
/// retrained-by-influence parameters, and those parameters themselves.
#[derive(Debug, Clone)]
pub struct LooRecord {
    pub node: usize,
    pub err: f64,
    pub loo: LooParams,
}

/// The `ceil(q * (n + 1))`-th smallest value, with the index clipped to
/// `[1, n]`.
///
/// This is the finite-sample order-statistic convention used by every
/// interval in this module.
pub fn quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyNodeSet { context: "quantile" });
    }
    if !level.is_finite() || level <= 0.0 || level >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "quantile level must lie in (0, 1), got {level}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "quantile input" });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let raw = (level * (n as f64 + 1.0)).ceil() as usize;
    let index = raw.clamp(1, n);
    Ok(sorted[index - 1])
}

/// Probability rows for every node under the given parameters.
fn prob_rows(graph: &Graph, params: &GcnParams) -> Result<Array2<f64>> {
    let trace = model::forward(graph, params)?;
    Ok(model::predict_probs(&trace))
}

/// Euclidean distance between a one-hot label and a probability row.
fn label_distance(label: usize, row: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (class, p) in row.iter().enumerate() {
        let target = if class == label { 1.0 } else { 0.0 };
        let d = target - p;
        sum += d * d;
    }
    sum.sqrt()
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|p| p * p).sum::<f64>().sqrt()
}

/// Leave-one-out error of a labeled node: the Euclidean norm of the gap
/// between its one-hot label and its probability vector under `loo`.
pub fn loo_error(graph: &Graph, node: usize, loo: &LooParams) -> Result<f64> {
    if node >= graph.num_nodes() {
        return Err(Error::NodeOutOfRange { node, num_nodes: graph.num_nodes() });
    }
    let probs = prob_rows(graph, &loo.params)?;
    Ok(label_distance(graph.label(node), probs.row(node).as_slice().unwrap()))
}

/// Attaches leave-one-out errors to a parameter sweep, one forward pass per
/// record.
pub fn loo_records(graph: &Graph, sweep: Vec<LooParams>) -> Result<Vec<LooRecord>> {
    sweep
        .into_iter()
        .map(|loo| {
            let err = loo_error(graph, loo.node, &loo)?;
            Ok(LooRecord { node: loo.node, err, loo })
        })
        .collect()
}

/// Interval bounds from leave-one-out predictions at a test point and the
/// matching leave-one-out training errors:
/// `(Q_alpha(preds - errs), Q_{1-alpha}(preds + errs))`.
pub fn jackknife_plus_generic(
    loo_preds_at_test: &[f64],
    loo_errs: &[f64],
    alpha: f64,
) -> Result<(f64, f64)> {
    if loo_preds_at_test.len() != loo_errs.len() {
        return Err(Error::DimensionMismatch {
            context: "jackknife records",
            expected: format!("{} errors", loo_preds_at_test.len()),
            found: format!("{}", loo_errs.len()),
        });
    }
    IntervalConfig { alpha }.validate()?;
    let lows: Vec<f64> = loo_preds_at_test
        .iter()
        .zip(loo_errs)
        .map(|(p, e)| p - e)
        .collect();
    let highs: Vec<f64> = loo_preds_at_test
        .iter()
        .zip(loo_errs)
        .map(|(p, e)| p + e)
        .collect();
    Ok((quantile(&lows, alpha)?, quantile(&highs, 1.0 - alpha)?))
}

/// Interval centered on a single point prediction, widened by the
/// leave-one-out test errors:
/// `(Q_alpha(pred - errs), Q_{1-alpha}(pred + errs))`.
pub fn naive_jackknife(
    point_pred: f64,
    loo_test_errs: &[f64],
    alpha: f64,
) -> Result<(f64, f64)> {
    if loo_test_errs.is_empty() {
        return Err(Error::EmptyNodeSet { context: "naive jackknife errors" });
    }
    IntervalConfig { alpha }.validate()?;
    let lows: Vec<f64> = loo_test_errs.iter().map(|e| point_pred - e).collect();
    let highs: Vec<f64> = loo_test_errs.iter().map(|e| point_pred + e).collect();
    Ok((quantile(&lows, alpha)?, quantile(&highs, 1.0 - alpha)?))
}

fn interval_from_scores(
    node: usize,
    scores: &[(f64, f64)],
    config: &IntervalConfig,
) -> Result<NodeUncertainty> {
    if scores.is_empty() {
        return Err(Error::EmptyNodeSet { context: "leave-one-out records" });
    }
    let (values, errs): (Vec<f64>, Vec<f64>) = scores.iter().copied().unzip();
    let (lower, upper) = jackknife_plus_generic(&values, &errs, config.alpha)?;
    Ok(NodeUncertainty { node, lower, upper, width: upper - lower })
}

/// Confidence interval for node `u` from a leave-one-out sweep.
///
/// Each record contributes the Euclidean norm of `u`'s probability row under
/// that record's parameters, minus/plus the record's own error, and the
/// bounds are the `alpha` and `1 - alpha` quantiles of those two sets. When
/// `u` is itself a training node its own record is skipped, so the interval
/// reflects only models that never saw `u`'s label shift.
pub fn node_uncertainty(
    graph: &Graph,
    u: usize,
    loo_set: &[LooRecord],
    config: &IntervalConfig,
) -> Result<NodeUncertainty> {
    config.validate()?;
    if u >= graph.num_nodes() {
        return Err(Error::NodeOutOfRange { node: u, num_nodes: graph.num_nodes() });
    }
    let mut scores = Vec::with_capacity(loo_set.len());
    for record in loo_set {
        if record.node == u {
            continue;
        }
        let probs = prob_rows(graph, &record.loo.params)?;
        let value = row_norm(probs.row(u).as_slice().unwrap());
        scores.push((value, record.err));
    }
    interval_from_scores(u, &scores, config)
}

/// Intervals for every target node from a single leave-one-out sweep.
///
/// Runs the influence sweep over the training set once, computes one
/// probability matrix and error per left-out node, and then assembles every
/// target's interval from those shared matrices. The result for each target
/// is identical to calling [`node_uncertainty`] with the same records.
pub fn quantify_all(
    graph: &Graph,
    params: &GcnParams,
    targets: &[usize],
    iconfig: &InfluenceConfig,
    cconfig: &IntervalConfig,
) -> Result<Vec<NodeUncertainty>> {
    cconfig.validate()?;
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    for &u in targets {
        if u >= graph.num_nodes() {
            return Err(Error::NodeOutOfRange { node: u, num_nodes: graph.num_nodes() });
        }
    }
    let context = InfluenceContext::new(graph, params, iconfig.clone())?;
    let sweep = context.loo_sweep()?;
    let mut records = Vec::with_capacity(sweep.len());
    for loo in sweep {
        let probs = prob_rows(graph, &loo.params)?;
        let err = label_distance(graph.label(loo.node), probs.row(loo.node).as_slice().unwrap());
        records.push((loo.node, err, probs));
    }
    targets
        .iter()
        .map(|&u| {
            let scores: Vec<(f64, f64)> = records
                .iter()
                .filter(|(node, _, _)| *node != u)
                .map(|(_, err, probs)| (row_norm(probs.row(u).as_slice().unwrap()), *err))
                .collect();
            interval_from_scores(u, &scores, cconfig)
        })
        .collect()
}

/// Solver settings echoed into a report header so a run can be reproduced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportMeta {
    pub alpha: f64,
    pub epsilon: f64,
    pub sample_batch: usize,
    pub iterations: usize,
    pub damping: f64,
    pub scale: f64,
    pub seed: u64,
}

/// Writes the uncertainty report: a `#`-prefixed header block with the run
/// settings, a column-name line, then one tab-separated row per node. The
/// final column flags nodes outside every training node's receptive field,
/// whose widths cover only label noise and not model variability.
pub fn write_report<W: std::io::Write>(
    out: &mut W,
    results: &[NodeUncertainty],
    outside_rf: &[bool],
    meta: &ReportMeta,
) -> Result<()> {
    if results.len() != outside_rf.len() {
        return Err(Error::DimensionMismatch {
            context: "report rows",
            expected: format!("{} flags", results.len()),
            found: format!("{}", outside_rf.len()),
        });
    }
    writeln!(out, "# alpha {}", meta.alpha)?;
    writeln!(out, "# epsilon {}", meta.epsilon)?;
    writeln!(out, "# sample_batch {}", meta.sample_batch)?;
    writeln!(out, "# iterations {}", meta.iterations)?;
    writeln!(out, "# damping {}", meta.damping)?;
    writeln!(out, "# scale {}", meta.scale)?;
    writeln!(out, "# seed {}", meta.seed)?;
    writeln!(out, "# node_id\tlower\tupper\twidth\toutside_rf")?;
    for (r, flag) in results.iter().zip(outside_rf) {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.node,
            r.lower,
            r.upper,
            r.width,
            u8::from(*flag)
        )?;
    }
    Ok(())
}
