//! Second derivatives of the training loss.
//!
//! `hessian_block` evaluates the layer-pair blocks of the network
//! composition by case analysis on the layer indices: a zero block on the
//! diagonal pair, a forward seed-and-propagate recursion when the
//! differentiated layer lies below, and a backward recursion from the
//! aggregated gradient field when it lies above.
//!
//! [`FlatHessianOperator`] is the matrix-free product v ↦ H v of the *full*
//! Hessian of the mean loss over a node set: the network-composition part
//! plus the softmax curvature (diag(p) − p pᵀ)/|S| at the output rows. All
//! intermediate fields are stored row-compactly, so the cost of one product
//! scales with the node set's receptive field rather than the whole graph.

use ndarray::Array2;

use super::{FlatLayout, validate_node_set};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardTrace, GcnParams, softmax};
use crate::sparse::SparseMatrix;

/// Dense materialization ceiling on the parameter count.
pub const MATERIALIZE_LIMIT: usize = 512;

/// Row-sparse matrix in compact form: `data` row k is row `support[k]` of a
/// conceptually n-row matrix whose remaining rows are zero. Supports are
/// sorted ascending.
#[derive(Debug, Clone)]
struct Compact {
    support: Vec<usize>,
    data: Array2<f64>,
}

impl Compact {
    fn zeros(support: Vec<usize>, width: usize) -> Self {
        let k = support.len();
        Compact {
            support,
            data: Array2::zeros((k, width)),
        }
    }

    fn width(&self) -> usize {
        self.data.ncols()
    }

    fn pos(&self, row: usize) -> Option<usize> {
        self.support.binary_search(&row).ok()
    }
}

/// out[k, :] = sum over the sparse row support_out[k] of `a` of w * src[u, :].
fn spmm_compact(a: &SparseMatrix, src: &Compact, support_out: &[usize]) -> Compact {
    let mut out = Compact::zeros(support_out.to_vec(), src.width());
    for (k, &r) in support_out.iter().enumerate() {
        for (u, w) in a.row(r) {
            if let Some(p) = src.pos(u) {
                let src_row = src.data.row(p);
                let mut out_row = out.data.row_mut(k);
                out_row.scaled_add(w, &src_row);
            }
        }
    }
    out
}

/// Right-multiply by a dense matrix, keeping the support.
fn dot_dense(c: &Compact, w: &Array2<f64>) -> Compact {
    Compact {
        support: c.support.clone(),
        data: c.data.dot(w),
    }
}

/// Row-restricted product: out[k, :] = base[support[k], :] · w.
fn rows_dot(base: &Array2<f64>, w: &Array2<f64>, support: &[usize]) -> Compact {
    let mut out = Compact::zeros(support.to_vec(), w.ncols());
    for (k, &r) in support.iter().enumerate() {
        out.data.row_mut(k).assign(&base.row(r).dot(w));
    }
    out
}

/// Multiply each stored row elementwise by the matching row of a full mask.
fn mask_rows(c: &Compact, mask: &Array2<f64>) -> Compact {
    let mut data = c.data.clone();
    for (k, &r) in c.support.iter().enumerate() {
        let m = mask.row(r);
        data.row_mut(k).zip_mut_with(&m, |x, &mv| *x *= mv);
    }
    Compact {
        support: c.support.clone(),
        data,
    }
}

/// out += sum_k base[support[k], :]ᵀ ⊗ (field[k, :] ∘ mask[support[k], :])
/// with `base` stored full-size.
fn project_into(out: &mut Array2<f64>, base: &Array2<f64>, field: &Compact, mask: &Array2<f64>) {
    for (k, &r) in field.support.iter().enumerate() {
        let b = base.row(r);
        let f = field.data.row(k);
        let m = mask.row(r);
        for (a_idx, &bv) in b.iter().enumerate() {
            if bv == 0.0 {
                continue;
            }
            let mut out_row = out.row_mut(a_idx);
            for ((o, &fv), &mv) in out_row.iter_mut().zip(f.iter()).zip(m.iter()) {
                *o += bv * fv * mv;
            }
        }
    }
}

/// out += sum_k left[k, :]ᵀ ⊗ (right[k, :] ∘ mask[support[k], :]) for two
/// compacts sharing the same support order.
fn outer_acc(out: &mut Array2<f64>, left: &Compact, right: &Compact, mask: &Array2<f64>) {
    debug_assert_eq!(left.support, right.support);
    for (k, &r) in left.support.iter().enumerate() {
        let lrow = left.data.row(k);
        let rrow = right.data.row(k);
        let m = mask.row(r);
        for (a_idx, &lv) in lrow.iter().enumerate() {
            if lv == 0.0 {
                continue;
            }
            let mut out_row = out.row_mut(a_idx);
            for ((o, &rv), &mv) in out_row.iter_mut().zip(rrow.iter()).zip(m.iter()) {
                *o += lv * rv * mv;
            }
        }
    }
}

fn union_sorted(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Backward gradient fields of the mean loss over one node set, stored
/// compactly, plus the per-node softmax rows.
struct LossFields {
    /// g^(l) = ∂R/∂E^(l) for l = 1..=L, index l-1.
    g: Vec<Compact>,
    /// B^(m) = Â (g^(m) ∘ σ'_m) for m = 2..=L, index m-1; index 0 unused.
    b: Vec<Option<Compact>>,
    /// Softmax rows aligned with `set`.
    probs: Array2<f64>,
    /// Sorted node set.
    set: Vec<usize>,
    inv_s: f64,
}

fn loss_fields(
    graph: &Graph,
    trace: &ForwardTrace,
    params: &GcnParams,
    node_set: &[usize],
    wt: &[Array2<f64>],
) -> Result<LossFields> {
    validate_node_set(graph, node_set, "hessian")?;
    let mut set = node_set.to_vec();
    set.sort_unstable();
    let num_layers = params.num_layers();
    let classes = graph.num_classes();
    let inv_s = 1.0 / set.len() as f64;

    let mut probs = Array2::zeros((set.len(), classes));
    let mut g_out = Compact::zeros(set.clone(), classes);
    for (k, &v) in set.iter().enumerate() {
        let row = trace.output().row(v);
        let p = softmax(row.as_slice().expect("contiguous row"));
        let y = graph.label(v);
        for j in 0..classes {
            probs[(k, j)] = p[j];
            let delta = if j == y { 1.0 } else { 0.0 };
            g_out.data[(k, j)] = (p[j] - delta) * inv_s;
        }
    }

    let a = graph.a_hat();
    let mut g: Vec<Option<Compact>> = vec![None; num_layers];
    let mut b: Vec<Option<Compact>> = vec![None; num_layers];
    g[num_layers - 1] = Some(g_out);
    for m in (2..=num_layers).rev() {
        let masked = mask_rows(g[m - 1].as_ref().unwrap(), &trace.act_masks[m - 1]);
        let sup = a.expand_rows(&masked.support);
        let s = spmm_compact(a, &masked, &sup);
        g[m - 2] = Some(dot_dense(&s, &wt[m - 1]));
        b[m - 1] = Some(s);
    }
    Ok(LossFields {
        g: g.into_iter().map(|x| x.unwrap()).collect(),
        b,
        probs,
        set,
        inv_s,
    })
}

fn transposed_weights(params: &GcnParams) -> Vec<Array2<f64>> {
    params.weights.iter().map(|w| w.t().to_owned()).collect()
}

fn check_trace_shape(trace: &ForwardTrace, params: &GcnParams) -> Result<()> {
    if trace.num_layers() != params.num_layers() {
        return Err(Error::DimensionMismatch {
            context: "hessian trace",
            expected: format!("{} layers", params.num_layers()),
            found: format!("{}", trace.num_layers()),
        });
    }
    Ok(())
}

/// Matrix-free product with the flat Hessian of the mean loss over a node
/// set, closed over a forward trace and its parameters. Materializable for
/// small parameter counts via [`materialize_flat_hessian`].
pub struct FlatHessianOperator<'a> {
    graph: &'a Graph,
    trace: &'a ForwardTrace,
    params: &'a GcnParams,
    layout: FlatLayout,
    wt: Vec<Array2<f64>>,
    fields: LossFields,
    /// Rows at which the forward perturbation field T^(m) is needed,
    /// per layer m = 1..=L, index m-1.
    t_supports: Vec<Vec<usize>>,
}

impl<'a> FlatHessianOperator<'a> {
    pub fn new(
        graph: &'a Graph,
        trace: &'a ForwardTrace,
        params: &'a GcnParams,
        node_set: &[usize],
    ) -> Result<Self> {
        check_trace_shape(trace, params)?;
        let wt = transposed_weights(params);
        let fields = loss_fields(graph, trace, params, node_set, &wt)?;
        let num_layers = params.num_layers();
        let a = graph.a_hat();
        let mut t_supports = vec![Vec::new(); num_layers];
        t_supports[num_layers - 1] = fields.set.clone();
        for m in (1..num_layers).rev() {
            let from_rec = a.expand_rows(&t_supports[m]);
            let from_net = a.expand_rows(&fields.g[m].support);
            t_supports[m - 1] = union_sorted(&from_rec, &from_net);
        }
        Ok(FlatHessianOperator {
            graph,
            trace,
            params,
            layout: FlatLayout::of_params(params),
            wt,
            fields,
            t_supports,
        })
    }

    pub fn layout(&self) -> &FlatLayout {
        &self.layout
    }

    /// Nodes whose mean loss the Hessian differentiates, sorted.
    pub fn node_set(&self) -> &[usize] {
        &self.fields.set
    }

    /// Product H v in the canonical flat layout.
    ///
    /// Forward pass: the perturbation field T^(m) obeys
    /// T^(m) = σ'_m ∘ ((Â T^(m-1)) W^(m) + (Â E^(m-1)) V^(m)), seeded at
    /// T^(0) = 0. Backward pass: the differentiated gradient field C^(m)
    /// obeys C^(m) = Â (C^(m+1) ∘ σ'_{m+1}) (W^(m+1))ᵀ + B^(m+1) (V^(m+1))ᵀ,
    /// seeded at the output with the softmax curvature applied to T^(L).
    /// Block l of the product is
    /// (Â T^(l-1))ᵀ (g^(l) ∘ σ'_l) + (Â E^(l-1))ᵀ (C^(l) ∘ σ'_l).
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let vmats = self.layout.unflatten(v)?;
        let a = self.graph.a_hat();
        let num_layers = self.params.num_layers();
        let classes = self.graph.num_classes();

        let mut t_all: Vec<Compact> = Vec::with_capacity(num_layers);
        for m in 1..=num_layers {
            let sup = &self.t_supports[m - 1];
            let mut tm = rows_dot(&self.trace.aggregated[m - 1], &vmats[m - 1], sup);
            if m >= 2 {
                let at = spmm_compact(a, &t_all[m - 2], sup);
                let atw = dot_dense(&at, &self.params.weights[m - 1]);
                tm.data += &atw.data;
            }
            t_all.push(mask_rows(&tm, &self.trace.act_masks[m - 1]));
        }

        // Curvature seed: rows (diag(p) − p pᵀ) T^(L) / |S| on the node set.
        let t_last = &t_all[num_layers - 1];
        let mut c_cur = Compact::zeros(self.fields.set.clone(), classes);
        for (k, &v_node) in self.fields.set.iter().enumerate() {
            let p = self.fields.probs.row(k);
            let t_row = t_last
                .pos(v_node)
                .map(|pos| t_last.data.row(pos))
                .expect("node set is contained in the T^(L) support");
            let dot: f64 = p.iter().zip(t_row.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..classes {
                c_cur.data[(k, j)] = p[j] * (t_row[j] - dot) * self.fields.inv_s;
            }
        }

        let mut blocks: Vec<Array2<f64>> = self
            .params
            .weights
            .iter()
            .map(|w| Array2::zeros(w.dim()))
            .collect();
        for l in (1..=num_layers).rev() {
            let mask = &self.trace.act_masks[l - 1];
            if l >= 2 {
                let g_l = &self.fields.g[l - 1];
                let at = spmm_compact(a, &t_all[l - 2], &g_l.support);
                outer_acc(&mut blocks[l - 1], &at, g_l, mask);
            }
            project_into(&mut blocks[l - 1], &self.trace.aggregated[l - 1], &c_cur, mask);
            if l >= 2 {
                let masked = mask_rows(&c_cur, mask);
                let b_l = self.fields.b[l - 1]
                    .as_ref()
                    .expect("B field exists for layers 2..=L");
                let sup = union_sorted(&a.expand_rows(&masked.support), &b_l.support);
                let s = spmm_compact(a, &masked, &sup);
                let mut c_next = dot_dense(&s, &self.wt[l - 1]);
                let vt = vmats[l - 1].t();
                for (k, &r) in b_l.support.iter().enumerate() {
                    let pos = c_next.pos(r).expect("union contains the B support");
                    let add = b_l.data.row(k).dot(&vt);
                    let mut row = c_next.data.row_mut(pos);
                    row += &add;
                }
                c_cur = c_next;
            }
        }
        self.layout.flatten_layers(&blocks)
    }
}

/// Flat gradient of the mean loss over a node set, computed with the same
/// row-compact fields the Hessian operator uses. Matches
/// [`super::grad_wrt_weights`] up to summation order.
pub(crate) fn compact_flat_gradient(
    graph: &Graph,
    trace: &ForwardTrace,
    params: &GcnParams,
    node_set: &[usize],
) -> Result<Vec<f64>> {
    check_trace_shape(trace, params)?;
    let wt = transposed_weights(params);
    let fields = loss_fields(graph, trace, params, node_set, &wt)?;
    let layout = FlatLayout::of_params(params);
    let mut blocks: Vec<Array2<f64>> = params
        .weights
        .iter()
        .map(|w| Array2::zeros(w.dim()))
        .collect();
    for l in 1..=params.num_layers() {
        project_into(
            &mut blocks[l - 1],
            &trace.aggregated[l - 1],
            &fields.g[l - 1],
            &trace.act_masks[l - 1],
        );
    }
    layout.flatten_layers(&blocks)
}

/// Network-composition Hessian block ∂²R/∂W^(l) ∂W^(i)[c, d], treating the
/// gradient field at the output as a constant coefficient. Layers `l`, `i`
/// are 1-based; `(c, d)` indexes the entry of W^(i). Returns a matrix shaped
/// like W^(l).
///
/// Cases: i = l gives the zero block. For i < l, the seed
/// T^(i)[:, d] = σ'_i[:, d] ∘ (Â E^(i-1))[:, c] propagates forward through
/// T^(m) = σ'_m ∘ (Â T^(m-1) W^(m)) up to layer l-1 (zero recursion steps
/// when i = l-1), then projects as (Â T^(l-1))ᵀ (∂R/∂E^(l) ∘ σ'_l). For
/// i > l, the seed M^(i-1)[:, c] = (Â (∂R/∂E^(i) ∘ σ'_i))[:, d] propagates
/// backward through M^(m) = Â (M^(m+1) ∘ σ'_{m+1}) (W^(m+1))ᵀ down to layer
/// l (zero steps when i = l+1), then projects as (Â E^(l-1))ᵀ (M^(l) ∘ σ'_l).
pub fn hessian_block(
    graph: &Graph,
    trace: &ForwardTrace,
    params: &GcnParams,
    node_set: &[usize],
    l: usize,
    i: usize,
    c: usize,
    d: usize,
) -> Result<Array2<f64>> {
    check_trace_shape(trace, params)?;
    let num_layers = params.num_layers();
    for (name, layer) in [("l", l), ("i", i)] {
        if layer == 0 || layer > num_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {name} = {layer} outside 1..={num_layers}"
            )));
        }
    }
    let dims = params.dims();
    if c >= dims[i - 1] || d >= dims[i] {
        return Err(Error::InvalidConfig(format!(
            "entry ({c}, {d}) outside W^({i}) of shape {}x{}",
            dims[i - 1],
            dims[i]
        )));
    }
    let block_shape = (dims[l - 1], dims[l]);
    if i == l {
        return Ok(Array2::zeros(block_shape));
    }

    let wt = transposed_weights(params);
    let fields = loss_fields(graph, trace, params, node_set, &wt)?;
    let a = graph.a_hat();
    let n = graph.num_nodes();
    let mut block = Array2::zeros(block_shape);

    if i < l {
        let all: Vec<usize> = (0..n).collect();
        let mut t = Compact::zeros(all.clone(), dims[i]);
        for r in 0..n {
            t.data[(r, d)] = trace.act_masks[i - 1][(r, d)] * trace.aggregated[i - 1][(r, c)];
        }
        for m in i + 1..=l - 1 {
            let at = spmm_compact(a, &t, &all);
            t = mask_rows(&dot_dense(&at, &params.weights[m - 1]), &trace.act_masks[m - 1]);
        }
        let g_l = &fields.g[l - 1];
        let at = spmm_compact(a, &t, &g_l.support);
        outer_acc(&mut block, &at, g_l, &trace.act_masks[l - 1]);
    } else {
        let b_i = fields.b[i - 1]
            .as_ref()
            .expect("B field exists for layers 2..=L");
        let mut m_cur = Compact::zeros(b_i.support.clone(), dims[i - 1]);
        for k in 0..b_i.support.len() {
            m_cur.data[(k, c)] = b_i.data[(k, d)];
        }
        for m in (l..=i - 2).rev() {
            let masked = mask_rows(&m_cur, &trace.act_masks[m]);
            let sup = a.expand_rows(&masked.support);
            m_cur = dot_dense(&spmm_compact(a, &masked, &sup), &wt[m]);
        }
        project_into(&mut block, &trace.aggregated[l - 1], &m_cur, &trace.act_masks[l - 1]);
    }
    Ok(block)
}

/// Dense flat Hessian, columns assembled from basis products. Guarded to
/// P ≤ [`MATERIALIZE_LIMIT`].
pub fn materialize_flat_hessian(op: &FlatHessianOperator) -> Result<Array2<f64>> {
    let p = op.layout().total();
    if p > MATERIALIZE_LIMIT {
        return Err(Error::SizeLimit {
            p,
            max: MATERIALIZE_LIMIT,
        });
    }
    let mut h = Array2::zeros((p, p));
    let mut basis = vec![0.0; p];
    for j in 0..p {
        basis[j] = 1.0;
        let col = op.apply(&basis)?;
        basis[j] = 0.0;
        for (i, x) in col.into_iter().enumerate() {
            h[(i, j)] = x;
        }
    }
    Ok(h)
}
