//! Dense reference implementations used only by tests. Everything here is
//! written against plain dense arrays, independent of the sparse kernels and
//! the cached-trace code paths, so agreement is meaningful.

use ndarray::Array2;

use crate::graph::Graph;
use crate::model::GcnParams;

/// Dense renormalized propagation matrix built directly from the edge list.
pub fn dense_laplacian(graph: &Graph) -> Array2<f64> {
    let n = graph.num_nodes();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        a[(i, i)] = 1.0;
    }
    for &(u, v) in graph.edges() {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = a[(i, j)] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    out
}

/// Dense forward pass: embeddings E^(0)..E^(L), ReLU below the top layer.
pub fn dense_forward(graph: &Graph, params: &GcnParams) -> Vec<Array2<f64>> {
    let a = dense_laplacian(graph);
    let mut embeddings = vec![graph.features().clone()];
    let last = params.weights.len() - 1;
    for (l, w) in params.weights.iter().enumerate() {
        let z = a.dot(embeddings.last().unwrap()).dot(w);
        if l < last {
            embeddings.push(z.mapv(|x| if x > 0.0 { x } else { 0.0 }));
        } else {
            embeddings.push(z);
        }
    }
    embeddings
}

fn dense_softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Mean cross-entropy over a node set, dense path.
pub fn dense_loss(graph: &Graph, params: &GcnParams, node_set: &[usize]) -> f64 {
    let embeddings = dense_forward(graph, params);
    let probs = dense_softmax_rows(embeddings.last().unwrap());
    let mut sum = 0.0;
    for &u in node_set {
        sum += -(probs[(u, graph.label(u))].max(1e-12)).ln();
    }
    sum / node_set.len() as f64
}

/// Per-layer gradient of the mean cross-entropy over a node set, computed by
/// reverse mode over the dense forward pass.
pub fn dense_gradient(graph: &Graph, params: &GcnParams, node_set: &[usize]) -> Vec<Array2<f64>> {
    let a = dense_laplacian(graph);
    let embeddings = dense_forward(graph, params);
    let probs = dense_softmax_rows(embeddings.last().unwrap());
    let n = graph.num_nodes();
    let classes = graph.num_classes();
    let inv = 1.0 / node_set.len() as f64;

    // dL/dE^(L)
    let mut d = Array2::zeros((n, classes));
    for &u in node_set {
        for j in 0..classes {
            let y = if j == graph.label(u) { 1.0 } else { 0.0 };
            d[(u, j)] = (probs[(u, j)] - y) * inv;
        }
    }

    let num_layers = params.weights.len();
    let mut grads = vec![Array2::zeros((0, 0)); num_layers];
    for l in (0..num_layers).rev() {
        // d currently holds dL/dE^(l+1); mask through the activation.
        let masked = if l + 1 < num_layers {
            let mut m = d.clone();
            let z = a.dot(&embeddings[l]).dot(&params.weights[l]);
            for (x, zv) in m.iter_mut().zip(z.iter()) {
                if *zv <= 0.0 {
                    *x = 0.0;
                }
            }
            m
        } else {
            d.clone()
        };
        let agg = a.dot(&embeddings[l]);
        grads[l] = agg.t().dot(&masked);
        if l > 0 {
            d = a.t().dot(&masked).dot(&params.weights[l].t());
        }
    }
    grads
}
