//! Graph container, renormalized adjacency operator, file format, and a
//! seeded stochastic block model generator.
//!
//! A [`Graph`] owns an undirected simple graph (no self-loops, no parallel
//! edges), per-node features and class labels, three disjoint node masks, and
//! the cached renormalized operator Â = D̃^(-1/2) (A + I) D̃^(-1/2) used by
//! every convolution.

use ndarray::Array2;
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::sparse::SparseMatrix;

/// Undirected attributed graph with train/val/test masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    /// Normalized so u < v, sorted lexicographically.
    edges: Vec<(usize, usize)>,
    /// Row u holds the feature vector of node u.
    features: Array2<f64>,
    /// Class index per node, in [0, num_classes).
    labels: Vec<usize>,
    train_mask: Vec<usize>,
    val_mask: Vec<usize>,
    test_mask: Vec<usize>,
    num_classes: usize,
    adjacency: Vec<Vec<usize>>,
    laplacian: SparseMatrix,
}

impl Graph {
    /// Validate raw parts and build the cached operator.
    ///
    /// Edges are interpreted as undirected; a pair listed head-first is
    /// accepted with a warning. Self-loops and duplicates (in either
    /// orientation) are rejected.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f64>,
        labels: Vec<usize>,
        train_mask: Vec<usize>,
        val_mask: Vec<usize>,
        test_mask: Vec<usize>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidConfig("graph must have at least one node".into()));
        }
        let mut normalized = Vec::with_capacity(edges.len());
        let mut reversed = 0usize;
        for &(u, v) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::EdgeOutOfRange { u, v, num_nodes });
            }
            if u == v {
                return Err(Error::SelfLoop { node: u });
            }
            if u > v {
                reversed += 1;
            }
            normalized.push((u.min(v), u.max(v)));
        }
        if reversed > 0 {
            log::warn!("{reversed} edge(s) listed head-first; treating all edges as undirected");
        }
        normalized.sort_unstable();
        for w in normalized.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateEdge { u: w[0].0, v: w[0].1 });
            }
        }

        if features.nrows() != num_nodes {
            return Err(Error::FeatureRows {
                expected: num_nodes,
                found: features.nrows(),
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "features" });
        }
        if labels.len() != num_nodes {
            return Err(Error::LabelCount {
                expected: num_nodes,
                found: labels.len(),
            });
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;

        let masks = [
            ("train", &train_mask),
            ("val", &val_mask),
            ("test", &test_mask),
        ];
        let mut seen = vec![false; num_nodes];
        let mut checked: Vec<Vec<usize>> = Vec::with_capacity(3);
        for (name, mask) in masks {
            let mut m = mask.clone();
            m.sort_unstable();
            for w in m.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::InvalidConfig(format!(
                        "node {} appears twice in the {name} mask",
                        w[0]
                    )));
                }
            }
            for &node in &m {
                if node >= num_nodes {
                    return Err(Error::MaskOutOfRange { node, num_nodes });
                }
                if seen[node] {
                    return Err(Error::MaskOverlap { node });
                }
                seen[node] = true;
            }
            checked.push(m);
        }
        let test_mask = checked.pop().unwrap();
        let val_mask = checked.pop().unwrap();
        let train_mask = checked.pop().unwrap();

        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(u, v) in &normalized {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
        }
        let laplacian = build_renormalized_laplacian(num_nodes, &normalized);

        Ok(Graph {
            num_nodes,
            edges: normalized,
            features,
            labels,
            train_mask,
            val_mask,
            test_mask,
            num_classes,
            adjacency,
            laplacian,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn train_mask(&self) -> &[usize] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[usize] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[usize] {
        &self.test_mask
    }

    /// Adjacency degree, self-loop excluded.
    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// Cached renormalized operator Â.
    pub fn a_hat(&self) -> &SparseMatrix {
        &self.laplacian
    }

    /// Same graph with replacement masks, revalidated.
    pub fn with_masks(
        &self,
        train_mask: Vec<usize>,
        val_mask: Vec<usize>,
        test_mask: Vec<usize>,
    ) -> Result<Graph> {
        Graph::new(
            self.num_nodes,
            self.edges.clone(),
            self.features.clone(),
            self.labels.clone(),
            train_mask,
            val_mask,
            test_mask,
        )
    }
}

/// Renormalized operator Â = D̃^(-1/2) (A + I) D̃^(-1/2) with D̃ the degree
/// matrix of A + I.
///
/// Every off-diagonal value is computed once and mirrored, so Â is symmetric
/// to the last bit.
pub fn build_renormalized_laplacian(num_nodes: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut deg = vec![1.0f64; num_nodes];
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(num_nodes + 2 * edges.len());
    for u in 0..num_nodes {
        triplets.push((u, u, inv_sqrt[u] * inv_sqrt[u]));
    }
    for &(u, v) in edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    SparseMatrix::from_triplets(num_nodes, num_nodes, &triplets)
        .expect("validated edges produce a well-formed operator")
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    train_mask: Vec<usize>,
    val_mask: Vec<usize>,
    test_mask: Vec<usize>,
}

/// Read a graph from its JSON file format and validate it.
pub fn load_graph<P: AsRef<Path>>(path: P) -> Result<Graph> {
    let text = std::fs::read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&text)?;
    let rows = file.features.len();
    let cols = file.features.first().map_or(0, |r| r.len());
    for (i, row) in file.features.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::FeatureWidth {
                row: i,
                expected: cols,
                found: row.len(),
            });
        }
    }
    let mut features = Array2::zeros((rows, cols));
    for (i, row) in file.features.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            features[(i, j)] = x;
        }
    }
    Graph::new(
        file.num_nodes,
        file.edges,
        features,
        file.labels,
        file.train_mask,
        file.val_mask,
        file.test_mask,
    )
}

/// Write a graph to the JSON file format. `load_graph` restores it exactly.
pub fn save_graph<P: AsRef<Path>>(graph: &Graph, path: P) -> Result<()> {
    let file = GraphFile {
        num_nodes: graph.num_nodes,
        edges: graph.edges.clone(),
        features: graph
            .features
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        labels: graph.labels.clone(),
        train_mask: graph.train_mask.clone(),
        val_mask: graph.val_mask.clone(),
        test_mask: graph.test_mask.clone(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Sample a stochastic block model graph.
///
/// Nodes are grouped into `blocks` blocks of `per_block` nodes; an edge joins
/// two nodes with probability `p_in` inside a block and `p_out` across
/// blocks. The label of a node is its block. Features are the one-hot block
/// signal (index block mod `feature_dim`) plus Gaussian noise of scale 0.5.
/// Masks are a stratified split: within each block a seeded shuffle assigns
/// roughly 60% train, 20% val, rest test. Fully deterministic for a fixed
/// seed.
pub fn synth_sbm(
    blocks: usize,
    per_block: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    seed: u64,
) -> Result<Graph> {
    if blocks == 0 || per_block == 0 || feature_dim == 0 {
        return Err(Error::InvalidConfig(
            "blocks, per_block, and feature_dim must be positive".into(),
        ));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!(
                "{name} = {p} is not a probability"
            )));
        }
    }
    let n = blocks * per_block;
    let block_of = |u: usize| u / per_block;

    let mut edge_rng = rng_for(seed, "sbm-edges", 0);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if block_of(u) == block_of(v) { p_in } else { p_out };
            if edge_rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, 0.5).expect("valid scale");
    let mut feat_rng = rng_for(seed, "sbm-features", 0);
    let mut features = Array2::zeros((n, feature_dim));
    for u in 0..n {
        for j in 0..feature_dim {
            features[(u, j)] = noise.sample(&mut feat_rng);
        }
        features[(u, block_of(u) % feature_dim)] += 1.0;
    }

    let labels: Vec<usize> = (0..n).map(block_of).collect();

    let mut mask_rng = rng_for(seed, "sbm-masks", 0);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for b in 0..blocks {
        let mut members: Vec<usize> = (b * per_block..(b + 1) * per_block).collect();
        members.shuffle(&mut mask_rng);
        let n_train = ((per_block as f64) * 0.6).round() as usize;
        let n_val = ((per_block as f64) * 0.2).round() as usize;
        for (i, &node) in members.iter().enumerate() {
            if i < n_train {
                train.push(node);
            } else if i < n_train + n_val {
                val.push(node);
            } else {
                test.push(node);
            }
        }
    }

    Graph::new(n, edges, features, labels, train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path3() -> Graph {
        // 0 - 1 - 2
        Graph::new(
            3,
            vec![(0, 1), (1, 2)],
            Array2::zeros((3, 2)),
            vec![0, 1, 0],
            vec![0],
            vec![1],
            vec![2],
        )
        .unwrap()
    }

    #[test]
    fn laplacian_matches_hand_values_on_path() {
        let g = path3();
        let a = g.a_hat();
        // degrees with self-loops: [2, 3, 2]
        assert_abs_diff_eq!(a.get(0, 1), 1.0 / 6.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(1, 1), 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.get(2, 2), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn laplacian_is_bitwise_symmetric() {
        let g = synth_sbm(3, 10, 0.4, 0.1, 4, 9).unwrap();
        let a = g.a_hat();
        for u in 0..g.num_nodes() {
            for (v, w) in a.row(u) {
                assert_eq!(w.to_bits(), a.get(v, u).to_bits());
            }
        }
    }

    #[test]
    fn two_node_clique_rows_sum_to_one() {
        let g = Graph::new(
            2,
            vec![(0, 1)],
            Array2::zeros((2, 1)),
            vec![0, 1],
            vec![0, 1],
            vec![],
            vec![],
        )
        .unwrap();
        let a = g.a_hat();
        for u in 0..2 {
            for v in 0..2 {
                assert_abs_diff_eq!(a.get(u, v), 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn self_loop_rejected() {
        let err = Graph::new(
            2,
            vec![(0, 0)],
            Array2::zeros((2, 1)),
            vec![0, 0],
            vec![],
            vec![],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SelfLoop { node: 0 }));
    }

    #[test]
    fn reversed_duplicate_rejected() {
        let err = Graph::new(
            3,
            vec![(0, 1), (1, 0)],
            Array2::zeros((3, 1)),
            vec![0, 0, 0],
            vec![],
            vec![],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateEdge { u: 0, v: 1 }));
    }

    #[test]
    fn mask_overlap_rejected() {
        let err = Graph::new(
            3,
            vec![(0, 1)],
            Array2::zeros((3, 1)),
            vec![0, 0, 0],
            vec![0, 1],
            vec![1],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::MaskOverlap { node: 1 }));
    }

    #[test]
    fn edge_out_of_range_rejected() {
        let err = Graph::new(
            2,
            vec![(0, 7)],
            Array2::zeros((2, 1)),
            vec![0, 0],
            vec![],
            vec![],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::EdgeOutOfRange { .. }));
    }

    #[test]
    fn roundtrip_through_file_is_exact() {
        let g = synth_sbm(2, 8, 0.5, 0.1, 3, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn sbm_is_deterministic_and_labeled_by_block() {
        let a = synth_sbm(3, 20, 0.3, 0.05, 8, 5).unwrap();
        let b = synth_sbm(3, 20, 0.3, 0.05, 8, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label(0), 0);
        assert_eq!(a.label(59), 2);
        assert_eq!(a.num_classes(), 3);
    }

    #[test]
    fn sbm_intra_block_edge_count_is_plausible() {
        // 3 blocks of 20 at p_in = 0.3: 570 intra pairs, mean 171, sd ~10.9.
        let g = synth_sbm(3, 20, 0.3, 0.05, 8, 11).unwrap();
        let intra = g
            .edges()
            .iter()
            .filter(|&&(u, v)| u / 20 == v / 20)
            .count() as f64;
        assert!((intra - 171.0).abs() <= 44.0, "intra = {intra}");
    }

    #[test]
    fn sbm_masks_are_stratified() {
        let g = synth_sbm(3, 20, 0.3, 0.05, 8, 5).unwrap();
        assert_eq!(g.train_mask().len(), 36);
        assert_eq!(g.val_mask().len(), 12);
        assert_eq!(g.test_mask().len(), 12);
        for b in 0..3 {
            let in_block = g
                .train_mask()
                .iter()
                .filter(|&&u| u / 20 == b)
                .count();
            assert_eq!(in_block, 12);
        }
    }

    #[test]
    fn with_masks_replaces_and_validates() {
        let g = path3();
        let h = g.with_masks(vec![0, 1], vec![], vec![2]).unwrap();
        assert_eq!(h.train_mask(), &[0, 1]);
        assert!(g.with_masks(vec![0], vec![0], vec![]).is_err());
    }
}
