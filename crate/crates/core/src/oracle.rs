//! Brute-force ground truth: exact leave-one-out retraining, finite
//! differences of loss and gradient, dense damped solves, and wall-clock
//! comparisons. Everything analytic in the library is validated against
//! these routines.

use ndarray::Array2;
use std::time::Instant;

use crate::derivatives::{
    FlatGradient, FlatHessianOperator, FlatLayout, LayerGradient, flatten, grad_wrt_weights,
    materialize_flat_hessian,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::influence::{InfluenceConfig, InfluenceContext};
use crate::model::{GcnParams, TrainConfig, forward, total_loss, train_on};

pub use crate::derivatives::MATERIALIZE_LIMIT;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Absolute floor in relative-error denominators.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of one oracle comparison or measurement.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub worst_coordinate: usize,
    pub spearman_rho: Option<f64>,
    pub speedup: Option<f64>,
    /// (method, milliseconds) pairs.
    pub wall_ms: Vec<(String, f64)>,
}

impl OracleReport {
    fn from_comparison(got: &[f64], want: &[f64]) -> Self {
        let mut max_rel = 0.0;
        let mut sum_rel = 0.0;
        let mut worst = 0;
        for (k, (&g, &w)) in got.iter().zip(want).enumerate() {
            let rel = (g - w).abs() / w.abs().max(REL_FLOOR);
            if rel > max_rel {
                max_rel = rel;
                worst = k;
            }
            sum_rel += rel;
        }
        OracleReport {
            max_rel_err: max_rel,
            mean_rel_err: sum_rel / got.len().max(1) as f64,
            worst_coordinate: worst,
            spearman_rho: None,
            speedup: None,
            wall_ms: Vec::new(),
        }
    }
}

/// Exact leave-one-out parameters: retrain from the identical seeded
/// initialization with `leave_out` dropped from the loss mean. The node stays
/// in the graph, so its features still propagate to neighbors.
pub fn retrain_loo(graph: &Graph, train_cfg: &TrainConfig, leave_out: usize) -> Result<GcnParams> {
    if !graph.train_mask().contains(&leave_out) {
        return Err(Error::InvalidConfig(format!(
            "node {leave_out} is not in the training set"
        )));
    }
    let reduced: Vec<usize> = graph
        .train_mask()
        .iter()
        .copied()
        .filter(|&u| u != leave_out)
        .collect();
    if reduced.is_empty() {
        return Err(Error::EmptyNodeSet {
            context: "retrain_loo",
        });
    }
    Ok(train_on(graph, train_cfg, &reduced, None)?.params)
}

/// Symmetric central difference of a scalar function.
pub(crate) fn central_diff<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    x: f64,
    step: f64,
) -> Result<f64> {
    Ok((f(x + step)? - f(x - step)?) / (2.0 * step))
}

fn validate_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    Ok(())
}

/// Central finite differences of the mean loss over `node_set` with respect
/// to every weight entry.
pub fn fd_gradient(
    graph: &Graph,
    params: &GcnParams,
    node_set: &[usize],
    step: f64,
) -> Result<LayerGradient> {
    validate_step(step)?;
    let mut layers = Vec::with_capacity(params.num_layers());
    for l in 0..params.num_layers() {
        let (rows, cols) = params.weights[l].dim();
        let mut g = Array2::zeros((rows, cols));
        for c in 0..rows {
            for d in 0..cols {
                let base = params.weights[l][(c, d)];
                g[(c, d)] = central_diff(
                    |x| {
                        let mut p = params.clone();
                        p.weights[l][(c, d)] = x;
                        let trace = forward(graph, &p)?;
                        total_loss(graph, &trace, node_set)
                    },
                    base,
                    step,
                )?;
            }
        }
        layers.push(g);
    }
    Ok(LayerGradient { layers })
}

/// Finite-difference Hessian: symmetrized matrix plus the worst asymmetry
/// seen before symmetrization.
#[derive(Debug, Clone)]
pub struct FdHessian {
    pub matrix: Array2<f64>,
    /// max |H − Hᵀ| entry before (H + Hᵀ)/2.
    pub asymmetry: f64,
}

/// Central finite differences of the analytic gradient, symmetrized as
/// (H + Hᵀ)/2. Guarded to P ≤ [`MATERIALIZE_LIMIT`].
pub fn fd_hessian(
    graph: &Graph,
    params: &GcnParams,
    node_set: &[usize],
    step: f64,
) -> Result<FdHessian> {
    validate_step(step)?;
    let layout = FlatLayout::of_params(params);
    let p = layout.total();
    if p > MATERIALIZE_LIMIT {
        return Err(Error::SizeLimit {
            p,
            max: MATERIALIZE_LIMIT,
        });
    }
    let flat_grad = |theta: &GcnParams| -> Result<Vec<f64>> {
        let trace = forward(graph, theta)?;
        Ok(flatten(&grad_wrt_weights(graph, &trace, theta, node_set)?).values)
    };
    let mut h = Array2::zeros((p, p));
    for l in 0..params.num_layers() {
        let (rows, cols) = params.weights[l].dim();
        for c in 0..rows {
            for d in 0..cols {
                let j = layout.index(l, c, d);
                let base = params.weights[l][(c, d)];
                let mut plus = params.clone();
                plus.weights[l][(c, d)] = base + step;
                let mut minus = params.clone();
                minus.weights[l][(c, d)] = base - step;
                let gp = flat_grad(&plus)?;
                let gm = flat_grad(&minus)?;
                for i in 0..p {
                    h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
                }
            }
        }
    }
    let mut asymmetry = 0.0f64;
    for i in 0..p {
        for j in 0..i {
            asymmetry = asymmetry.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    let sym = (&h + &h.t()) / 2.0;
    Ok(FdHessian {
        matrix: sym,
        asymmetry,
    })
}

/// Dense damped solve (H + λI) x = rhs by pivoted LU.
pub(crate) fn solve_damped_dense(h: &Array2<f64>, rhs: &[f64], damping: f64) -> Result<Vec<f64>> {
    let p = h.nrows();
    let mut a = nalgebra::DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            a[(i, j)] = h[(i, j)];
        }
        a[(i, i)] += damping;
    }
    let b = nalgebra::DVector::from_column_slice(rhs);
    a.lu().solve(&b).map(|x| x.as_slice().to_vec()).ok_or(Error::Singular)
}

/// Influence of one training node by explicit dense solve
/// (H + λI)^{-1} ∇_Θ r(node); the oracle for the iterative path.
pub fn direct_influence(
    graph: &Graph,
    params: &GcnParams,
    node: usize,
    damping: f64,
) -> Result<FlatGradient> {
    if !graph.train_mask().contains(&node) {
        return Err(Error::InvalidConfig(format!(
            "node {node} is not in the training set"
        )));
    }
    let trace = forward(graph, params)?;
    let op = FlatHessianOperator::new(graph, &trace, params, graph.train_mask())?;
    let h = materialize_flat_hessian(&op)?;
    let f = flatten(&grad_wrt_weights(graph, &trace, params, &[node])?);
    let values = solve_damped_dense(&h, &f.values, damping)?;
    Ok(FlatGradient {
        layout: f.layout,
        values,
    })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman",
            expected: format!("{}", xs.len()),
            found: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig(
            "spearman needs at least two observations".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean).powi(2);
        dy += (b - mean).powi(2);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::InvalidConfig(
            "spearman undefined for a constant sequence".into(),
        ));
    }
    Ok(num / (dx.sqrt() * dy.sqrt()))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[k]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average of their positions.
        let avg = (k + j + 2) as f64 / 2.0;
        for &idx in &order[k..=j] {
            ranks[idx] = avg;
        }
        k = j + 1;
    }
    ranks
}

/// Compare analytic against finite-difference gradients on one instance.
pub fn gradient_check(
    graph: &Graph,
    params: &GcnParams,
    node_set: &[usize],
    step: f64,
) -> Result<OracleReport> {
    let t0 = Instant::now();
    let trace = forward(graph, params)?;
    let analytic = flatten(&grad_wrt_weights(graph, &trace, params, node_set)?);
    let t_analytic = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let fd = flatten(&fd_gradient(graph, params, node_set, step)?);
    let t_fd = t1.elapsed().as_secs_f64() * 1e3;
    let mut report = OracleReport::from_comparison(&analytic.values, &fd.values);
    report.wall_ms = vec![("analytic".into(), t_analytic), ("fd".into(), t_fd)];
    Ok(report)
}

/// Compare the materialized analytic Hessian against finite differences of
/// the analytic gradient.
pub fn hessian_check(
    graph: &Graph,
    params: &GcnParams,
    node_set: &[usize],
    step: f64,
) -> Result<(OracleReport, f64)> {
    let trace = forward(graph, params)?;
    let t0 = Instant::now();
    let op = FlatHessianOperator::new(graph, &trace, params, node_set)?;
    let analytic = materialize_flat_hessian(&op)?;
    let t_analytic = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let fd = fd_hessian(graph, params, node_set, step)?;
    let t_fd = t1.elapsed().as_secs_f64() * 1e3;
    let got: Vec<f64> = analytic.iter().copied().collect();
    let want: Vec<f64> = fd.matrix.iter().copied().collect();
    let mut report = OracleReport::from_comparison(&got, &want);
    report.wall_ms = vec![("analytic".into(), t_analytic), ("fd".into(), t_fd)];
    Ok((report, fd.asymmetry))
}

/// Compare the iterative inverse-HVP solve against the dense damped solve for
/// one training node's gradient.
pub fn hvp_check(
    graph: &Graph,
    params: &GcnParams,
    node: usize,
    config: &InfluenceConfig,
) -> Result<OracleReport> {
    let t0 = Instant::now();
    let ctx = InfluenceContext::new(graph, params, config.clone())?;
    let iterative = ctx.node_influence(node)?;
    let t_iter = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let dense = direct_influence(graph, params, node, config.damping)?;
    let t_dense = t1.elapsed().as_secs_f64() * 1e3;
    // Relative to the dense solution's norm, coordinate-wise errors are not
    // meaningful for near-zero entries; report against the vector scale.
    let scale = dense
        .values
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(REL_FLOOR);
    let got: Vec<f64> = iterative.values.iter().map(|x| x / scale).collect();
    let want: Vec<f64> = dense.values.iter().map(|x| x / scale).collect();
    let mut report = OracleReport::from_comparison(&got, &want);
    report.wall_ms = vec![("iterative".into(), t_iter), ("dense".into(), t_dense)];
    Ok(report)
}

/// Time a full leave-one-out sweep through the influence approximation
/// against brute-force retraining over the first `n_train` training nodes.
pub fn speedup_benchmark(
    graph: &Graph,
    train_cfg: &TrainConfig,
    icfg: &InfluenceConfig,
    n_train: usize,
) -> Result<OracleReport> {
    let train = graph.train_mask();
    if n_train == 0 || n_train > train.len() {
        return Err(Error::InvalidConfig(format!(
            "n_train {} outside 1..={}",
            n_train,
            train.len()
        )));
    }
    let params = train_on(graph, train_cfg, train, None)?.params;
    let nodes = &train[..n_train];

    let t0 = Instant::now();
    let ctx = InfluenceContext::new(graph, &params, icfg.clone())?;
    for &u in nodes {
        let loo = ctx.loo_for(u)?;
        std::hint::black_box(&loo);
    }
    let influence_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    for &u in nodes {
        let retrained = retrain_loo(graph, train_cfg, u)?;
        std::hint::black_box(&retrained);
    }
    let retrain_ms = t1.elapsed().as_secs_f64() * 1e3;

    Ok(OracleReport {
        max_rel_err: 0.0,
        mean_rel_err: 0.0,
        worst_coordinate: 0,
        spearman_rho: None,
        speedup: Some(retrain_ms / influence_ms.max(1e-9)),
        wall_ms: vec![
            ("influence_sweep".into(), influence_ms),
            ("retrain_sweep".into(), retrain_ms),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synth_sbm;
    use crate::model::init_params;
    use approx::assert_abs_diff_eq;
    

    fn trained(seed_graph: u64, seed_train: u64, epochs: usize) -> (Graph, GcnParams) {
        let g = synth_sbm(2, 5, 0.7, 0.15, 3, seed_graph).unwrap();
        let cfg = TrainConfig {
            hidden_dims: vec![4],
            epochs,
            seed: seed_train,
            ..TrainConfig::default()
        };
        let params = train_on(&g, &cfg, g.train_mask(), None).unwrap().params;
        (g, params)
    }

    #[test]
    fn central_diff_is_exact_on_quadratics() {
        let d = central_diff(|x| Ok(x * x), 3.0, 1e-5).unwrap();
        assert_abs_diff_eq!(d, 6.0, epsilon = 1e-8);
    }

    #[test]
    fn fd_gradient_matches_analytic() {
        let (g, params) = trained(11, 5, 40);
        let trace = forward(&g, &params).unwrap();
        let analytic = flatten(&grad_wrt_weights(&g, &trace, &params, g.train_mask()).unwrap());
        let fd = flatten(&fd_gradient(&g, &params, g.train_mask(), FD_STEP).unwrap());
        for (a, f) in analytic.values.iter().zip(&fd.values) {
            assert!(
                (a - f).abs() <= 1e-5 * f.abs().max(1.0) + 1e-8,
                "analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn dead_relu_region_has_zero_gradient() {
        // Strictly positive features and an all-negative first layer push
        // every pre-activation below zero, killing all ReLU masks.
        let features = Array2::from_shape_fn((6, 2), |(i, j)| 0.2 + 0.1 * (i + j) as f64);
        let g = Graph::new(
            6,
            vec![(0, 1), (1, 2), (3, 4), (4, 5)],
            features,
            vec![0, 0, 0, 1, 1, 1],
            vec![0, 3],
            vec![],
            vec![1, 2, 4, 5],
        )
        .unwrap();
        let mut params = init_params(
            &g,
            &TrainConfig {
                hidden_dims: vec![4],
                seed: 2,
                ..TrainConfig::default()
            },
        );
        params.weights[0].mapv_inplace(|_| -50.0);
        let trace = forward(&g, &params).unwrap();
        assert!(trace.act_masks[0].iter().all(|&m| m == 0.0));
        let analytic = flatten(&grad_wrt_weights(&g, &trace, &params, g.train_mask()).unwrap());
        assert!(analytic.values.iter().all(|&x| x == 0.0));
        let fd = flatten(&fd_gradient(&g, &params, g.train_mask(), FD_STEP).unwrap());
        assert!(fd.values.iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn fd_hessian_matches_materialized_operator() {
        let (g, params) = trained(7, 3, 60);
        let (report, asymmetry) = hessian_check(&g, &params, g.train_mask(), FD_STEP).unwrap();
        assert!(asymmetry < 1e-6, "asymmetry {asymmetry}");
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_coordinate
        );
    }

    #[test]
    fn diagonal_block_of_full_hessian_is_curvature_alone() {
        // The network-composition part of any diagonal layer pair vanishes,
        // so the finite-difference diagonal block must match the assembled
        // operator's curvature contribution.
        let (g, params) = trained(19, 9, 60);
        let trace = forward(&g, &params).unwrap();
        let set = g.train_mask();
        let net = crate::derivatives::hessian_block(&g, &trace, &params, set, 1, 1, 0, 0).unwrap();
        assert!(net.iter().all(|&x| x == 0.0));
        let (report, _) = hessian_check(&g, &params, set, FD_STEP).unwrap();
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn retrain_loo_requires_remaining_nodes() {
        let g = synth_sbm(2, 4, 0.6, 0.2, 3, 5)
            .unwrap()
            .with_masks(vec![0], vec![1], vec![2, 3])
            .unwrap();
        let cfg = TrainConfig {
            hidden_dims: vec![3],
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(
            retrain_loo(&g, &cfg, 0),
            Err(Error::EmptyNodeSet { .. })
        ));
        assert!(retrain_loo(&g, &cfg, 2).is_err());
    }

    #[test]
    fn leaving_out_a_zero_gradient_node_changes_nothing_materially() {
        // An isolated node with all-zero features scores zero on every class,
        // and its gradient contribution is identically zero; dropping it only
        // rescales the loss mean, which Adam almost exactly absorbs.
        let mut features = Array2::zeros((5, 2));
        for i in 0..4 {
            features[(i, 0)] = 1.0 - 0.3 * i as f64;
            features[(i, 1)] = 0.2 * i as f64;
        }
        let g = Graph::new(
            5,
            vec![(0, 1), (1, 2), (2, 3)],
            features,
            vec![0, 0, 1, 1, 0],
            vec![0, 3, 4],
            vec![],
            vec![1, 2],
        )
        .unwrap();
        let cfg = TrainConfig {
            hidden_dims: vec![3],
            epochs: 40,
            ..TrainConfig::default()
        };
        let base = train_on(&g, &cfg, g.train_mask(), None).unwrap().params;
        let loo = retrain_loo(&g, &cfg, 4).unwrap();
        for (a, b) in base.weights.iter().zip(&loo.weights) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn dense_solve_identity_and_zero_cases() {
        let h = Array2::eye(3);
        let x = solve_damped_dense(&h, &[1.0, -2.0, 0.5], 0.0).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[2], 0.5, epsilon = 1e-12);
        let zero = solve_damped_dense(&h, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let singular = Array2::zeros((2, 2));
        assert!(matches!(
            solve_damped_dense(&singular, &[1.0, 1.0], 0.0),
            Err(Error::Singular)
        ));
    }

    #[test]
    fn spearman_handles_monotone_reversed_and_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(
            spearman(&xs, &[10.0, 20.0, 30.0, 40.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        let rho = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(rho > 0.9);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn speedup_benchmark_reports_both_timers() {
        let (g, _) = trained(3, 1, 10);
        let cfg = TrainConfig {
            hidden_dims: vec![4],
            epochs: 10,
            seed: 1,
            ..TrainConfig::default()
        };
        let icfg = InfluenceConfig {
            sample_batch: 4,
            iterations: 10,
            seed: 2,
            ..InfluenceConfig::default()
        };
        let report = speedup_benchmark(&g, &cfg, &icfg, 1).unwrap();
        let ratio = report.speedup.unwrap();
        assert!(ratio >= 0.0);
        assert_eq!(report.wall_ms.len(), 2);
        assert!(speedup_benchmark(&g, &cfg, &icfg, 999).is_err());
    }

    #[test]
    fn fd_rejects_bad_step_and_oversize() {
        let (g, params) = trained(3, 1, 5);
        assert!(fd_gradient(&g, &params, g.train_mask(), 0.0).is_err());
        assert!(fd_gradient(&g, &params, g.train_mask(), -1.0).is_err());
        let wide = synth_sbm(2, 6, 0.5, 0.2, 30, 2).unwrap();
        let big = init_params(
            &wide,
            &TrainConfig {
                hidden_dims: vec![30],
                ..TrainConfig::default()
            },
        );
        assert!(matches!(
            fd_hessian(&wide, &big, wide.train_mask(), 1e-4),
            Err(Error::SizeLimit { .. })
        ));
    }

    #[test]
    fn quadratic_toy_via_graph_free_central_diff() {
        // Cross-check the shared helper against an analytic cubic as well.
        let d = central_diff(|x| Ok(x * x * x), 2.0, 1e-5).unwrap();
        assert!((d - 12.0).abs() < 1e-6);
    }
}
