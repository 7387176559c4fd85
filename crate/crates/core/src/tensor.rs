//! Reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! All values are `f64` matrices. A [`Tape`] records the forward computation;
//! [`Tape::backward`] walks it in reverse and produces gradients for every
//! node and for every registered parameter leaf. Batched data uses the
//! `[batch, dim]` layout; entity sets (e.g. 49 regions per frame) use
//! `[batch * n, dim]` with rows grouped per example.

use ndarray::{s, Array2, ArrayView2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct T(pub(crate) usize);

type BackFn = Box<dyn Fn(&Array2<f64>, &Tape, &mut Grads)>;

struct Node {
    value: Arc<Array2<f64>>,
    /// Parameter slot this leaf mirrors, if any.
    param: Option<usize>,
    back: Option<BackFn>,
}

/// Gradients produced by a backward pass.
pub struct Grads {
    node: Vec<Option<Array2<f64>>>,
    param: Vec<Option<Array2<f64>>>,
}

impl Grads {
    fn accum(&mut self, idx: usize, delta: ArrayView2<f64>) {
        match &mut self.node[idx] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta.to_owned()),
        }
    }

    /// Gradient w.r.t. an arbitrary node, if any path reached it.
    pub fn node(&self, t: T) -> Option<&Array2<f64>> {
        self.node[t.0].as_ref()
    }

    /// Gradient w.r.t. parameter slot `id`, if it participated.
    pub fn param(&self, id: usize) -> Option<&Array2<f64>> {
        self.param[id].as_ref()
    }

    pub fn take_params(self) -> Vec<Option<Array2<f64>>> {
        self.param
    }
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, back: Option<BackFn>) -> T {
        self.nodes.push(Node { value: Arc::new(value), param: None, back });
        T(self.nodes.len() - 1)
    }

    pub fn value(&self, t: T) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    fn arc(&self, t: T) -> Arc<Array2<f64>> {
        Arc::clone(&self.nodes[t.0].value)
    }

    /// Leaf with no gradient.
    pub fn constant(&mut self, v: Array2<f64>) -> T {
        self.push(v, None)
    }

    /// Leaf mirroring parameter slot `id`; gradients accumulate per slot.
    pub fn leaf(&mut self, value: Arc<Array2<f64>>, id: usize) -> T {
        self.nodes.push(Node { value, param: Some(id), back: None });
        T(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted but which is not a parameter
    /// (finite-difference checks on inputs).
    pub fn var(&mut self, v: Array2<f64>) -> T {
        self.push(v, None)
    }

    pub fn matmul(&mut self, a: T, b: T) -> T {
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = va.dot(&*vb);
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, g.dot(&vb.t()).view());
                gr.accum(b.0, va.t().dot(g).view());
            })),
        )
    }

    pub fn add(&mut self, a: T, b: T) -> T {
        let out = &*self.arc(a) + &*self.arc(b);
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, g.view());
                gr.accum(b.0, g.view());
            })),
        )
    }

    /// `a [m,n] + bias [1,n]`, broadcast over rows.
    pub fn add_bias(&mut self, a: T, bias: T) -> T {
        let out = &*self.arc(a) + &*self.arc(bias);
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, g.view());
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                gr.accum(bias.0, gb.view());
            })),
        )
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        let out = &*self.arc(a) - &*self.arc(b);
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, g.view());
                gr.accum(b.0, (-g).view());
            })),
        )
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        let va = self.arc(a);
        let vb = self.arc(b);
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, (g * &*vb).view());
                gr.accum(b.0, (g * &*va).view());
            })),
        )
    }

    pub fn scale(&mut self, a: T, k: f64) -> T {
        let out = &*self.arc(a) * k;
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                gr.accum(a.0, (g * k).view());
            })),
        )
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let out = self.arc(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let t = self.push(out, None);
        let y = self.arc(t);
        self.nodes[t.0].back = Some(Box::new(move |g, _t, gr| {
            gr.accum(a.0, (g * &y.mapv(|v| v * (1.0 - v))).view());
        }));
        t
    }

    pub fn tanh(&mut self, a: T) -> T {
        let out = self.arc(a).mapv(f64::tanh);
        let t = self.push(out, None);
        let y = self.arc(t);
        self.nodes[t.0].back = Some(Box::new(move |g, _t, gr| {
            gr.accum(a.0, (g * &y.mapv(|v| 1.0 - v * v)).view());
        }));
        t
    }

    pub fn relu(&mut self, a: T) -> T {
        let va = self.arc(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let m = va.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                gr.accum(a.0, (g * &m).view());
            })),
        )
    }

    pub fn slice_cols(&mut self, a: T, start: usize, end: usize) -> T {
        let va = self.arc(a);
        let (rows, cols) = va.dim();
        let out = va.slice(s![.., start..end]).to_owned();
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut full = Array2::<f64>::zeros((rows, cols));
                full.slice_mut(s![.., start..end]).assign(g);
                gr.accum(a.0, full.view());
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Array2::<f64>::zeros((rows, total));
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            out.slice_mut(s![.., off..off + w]).assign(self.value(*p));
            off += w;
        }
        let parts = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut off = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    gr.accum(p.0, g.slice(s![.., off..off + w]));
                    off += w;
                }
            })),
        )
    }

    /// Row-major reinterpretation; element count must match.
    pub fn reshape(&mut self, a: T, rows: usize, cols: usize) -> T {
        let va = self.arc(a);
        let (r0, c0) = va.dim();
        assert_eq!(r0 * c0, rows * cols, "reshape element count mismatch");
        let out = (*va)
            .clone()
            .into_shape((rows, cols))
            .expect("reshape of contiguous matrix");
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let back = g.to_owned().into_shape((r0, c0)).expect("reshape backward");
                gr.accum(a.0, back.view());
            })),
        )
    }

    /// Row-wise softmax with an optional 0/1 validity mask (masked entries
    /// get zero weight; each row must have at least one valid entry).
    pub fn softmax_rows(&mut self, a: T, mask: Option<Arc<Array2<f64>>>) -> T {
        let va = self.arc(a);
        let (rows, cols) = va.dim();
        let mut out = Array2::<f64>::zeros((rows, cols));
        for i in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                let valid = mask.as_ref().map_or(true, |m| m[[i, j]] > 0.5);
                if valid && va[[i, j]] > mx {
                    mx = va[[i, j]];
                }
            }
            let mut z = 0.0;
            for j in 0..cols {
                let valid = mask.as_ref().map_or(true, |m| m[[i, j]] > 0.5);
                let e = if valid { (va[[i, j]] - mx).exp() } else { 0.0 };
                out[[i, j]] = e;
                z += e;
            }
            for j in 0..cols {
                out[[i, j]] /= z;
            }
        }
        let t = self.push(out, None);
        let y = self.arc(t);
        self.nodes[t.0].back = Some(Box::new(move |g, _t, gr| {
            let mut d = g * &*y;
            let row_dot = d.sum_axis(Axis(1)).insert_axis(Axis(1));
            d -= &(&row_dot * &*y);
            gr.accum(a.0, d.view());
        }));
        t
    }

    /// Fused softmax + cross-entropy. Returns the weighted sum of per-row
    /// `-log p(target)` as a `[1,1]` node; rows with weight 0 are ignored.
    pub fn softmax_xent(&mut self, logits: T, targets: &[usize], weights: &[f64]) -> T {
        let vl = self.arc(logits);
        let (rows, cols) = vl.dim();
        assert_eq!(rows, targets.len());
        assert_eq!(rows, weights.len());
        let mut probs = Array2::<f64>::zeros((rows, cols));
        let mut loss = 0.0;
        for i in 0..rows {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                mx = mx.max(vl[[i, j]]);
            }
            let mut z = 0.0;
            for j in 0..cols {
                let e = (vl[[i, j]] - mx).exp();
                probs[[i, j]] = e;
                z += e;
            }
            for j in 0..cols {
                probs[[i, j]] /= z;
            }
            if weights[i] != 0.0 {
                loss += weights[i] * -(probs[[i, targets[i]]].max(1e-300)).ln();
            }
        }
        let probs = Arc::new(probs);
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.push(
            Array2::from_elem((1, 1), loss),
            Some(Box::new(move |g, _t, gr| {
                let gs = g[[0, 0]];
                let mut d = Array2::<f64>::zeros((rows, cols));
                for i in 0..rows {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let w = gs * weights[i];
                    for j in 0..cols {
                        d[[i, j]] = w * probs[[i, j]];
                    }
                    d[[i, targets[i]]] -= w;
                }
                gr.accum(logits.0, d.view());
            })),
        )
    }

    /// Row lookup into an embedding table node. Rows for `pad_id` come out
    /// zero and receive no gradient.
    pub fn embed(&mut self, table: T, ids: &[usize], pad_id: Option<usize>) -> T {
        let vt = self.arc(table);
        let (vocab, dim) = vt.dim();
        let mut out = Array2::<f64>::zeros((ids.len(), dim));
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "token id {} out of range {}", id, vocab);
            if Some(id) != pad_id {
                out.row_mut(r).assign(&vt.row(id));
            }
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut d = Array2::<f64>::zeros((vocab, dim));
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) != pad_id {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                }
                gr.accum(table.0, d.view());
            })),
        )
    }

    /// Mean over each group of `n` consecutive rows: `[b*n, d] -> [b, d]`.
    /// An optional mask `[b, n]` restricts the mean to valid rows.
    pub fn mean_pool_groups(&mut self, a: T, n: usize, mask: Option<Arc<Array2<f64>>>) -> T {
        let va = self.arc(a);
        let (rows, d) = va.dim();
        assert_eq!(rows % n, 0);
        let b = rows / n;
        let mut out = Array2::<f64>::zeros((b, d));
        let mut counts = vec![0.0f64; b];
        for e in 0..b {
            for j in 0..n {
                let valid = mask.as_ref().map_or(true, |m| m[[e, j]] > 0.5);
                if valid {
                    let mut row = out.row_mut(e);
                    row += &va.row(e * n + j);
                    counts[e] += 1.0;
                }
            }
            assert!(counts[e] > 0.0, "mean_pool_groups: empty group");
            let mut row = out.row_mut(e);
            row /= counts[e];
        }
        let mask_b = mask.clone();
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut d_in = Array2::<f64>::zeros((rows, d));
                for e in 0..b {
                    for j in 0..n {
                        let valid = mask_b.as_ref().map_or(true, |m| m[[e, j]] > 0.5);
                        if valid {
                            let mut row = d_in.row_mut(e * n + j);
                            row.assign(&g.row(e));
                            row /= counts[e];
                        }
                    }
                }
                gr.accum(a.0, d_in.view());
            })),
        )
    }

    /// Stack `k` per-example tensors `[b, d]` into entity layout `[b*k, d]`
    /// with `out[e*k + j] = parts[j][e]`.
    pub fn interleave_rows(&mut self, parts: &[T]) -> T {
        assert!(!parts.is_empty());
        let k = parts.len();
        let (b, d) = self.value(parts[0]).dim();
        let mut out = Array2::<f64>::zeros((b * k, d));
        for (j, p) in parts.iter().enumerate() {
            let vp = self.value(*p);
            assert_eq!(vp.dim(), (b, d));
            for e in 0..b {
                out.row_mut(e * k + j).assign(&vp.row(e));
            }
        }
        let parts = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                for (j, p) in parts.iter().enumerate() {
                    let mut d_p = Array2::<f64>::zeros((b, d));
                    for e in 0..b {
                        d_p.row_mut(e).assign(&g.row(e * k + j));
                    }
                    gr.accum(p.0, d_p.view());
                }
            })),
        )
    }

    /// Per-example dot products: `s[e,j] = u[e*n + j] . q[e]`.
    pub fn rows_dot_bcast(&mut self, u: T, q: T, n: usize) -> T {
        let vu = self.arc(u);
        let vq = self.arc(q);
        let (rows, d) = vu.dim();
        let b = vq.nrows();
        assert_eq!(rows, b * n);
        assert_eq!(vq.ncols(), d);
        let mut out = Array2::<f64>::zeros((b, n));
        for e in 0..b {
            for j in 0..n {
                out[[e, j]] = vu.row(e * n + j).dot(&vq.row(e));
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut du = Array2::<f64>::zeros((rows, d));
                let mut dq = Array2::<f64>::zeros((b, d));
                for e in 0..b {
                    for j in 0..n {
                        let gv = g[[e, j]];
                        {
                            let mut row = du.row_mut(e * n + j);
                            row.scaled_add(gv, &vq.row(e));
                        }
                        let mut qrow = dq.row_mut(e);
                        qrow.scaled_add(gv, &vu.row(e * n + j));
                    }
                }
                gr.accum(u.0, du.view());
                gr.accum(q.0, dq.view());
            })),
        )
    }

    /// Attention readout: `out[e] = sum_j w[e,j] * ent[e*n + j]`.
    pub fn weighted_pool(&mut self, ent: T, w: T) -> T {
        let ve = self.arc(ent);
        let vw = self.arc(w);
        let (b, n) = vw.dim();
        let (rows, d) = ve.dim();
        assert_eq!(rows, b * n);
        let mut out = Array2::<f64>::zeros((b, d));
        for e in 0..b {
            for j in 0..n {
                let mut row = out.row_mut(e);
                row.scaled_add(vw[[e, j]], &ve.row(e * n + j));
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut de = Array2::<f64>::zeros((rows, d));
                let mut dw = Array2::<f64>::zeros((b, n));
                for e in 0..b {
                    for j in 0..n {
                        {
                            let mut row = de.row_mut(e * n + j);
                            row.scaled_add(vw[[e, j]], &g.row(e));
                        }
                        dw[[e, j]] = ve.row(e * n + j).dot(&g.row(e));
                    }
                }
                gr.accum(ent.0, de.view());
                gr.accum(w.0, dw.view());
            })),
        )
    }

    /// Per-example blend: rows where `mask[e] = 1` come from `on`, rows
    /// where `mask[e] = 0` from `off`.
    pub fn blend_rows(&mut self, on: T, off: T, mask: Arc<Vec<f64>>) -> T {
        let von = self.arc(on);
        let voff = self.arc(off);
        let (b, d) = von.dim();
        assert_eq!(voff.dim(), (b, d));
        assert_eq!(mask.len(), b);
        let mut out = Array2::<f64>::zeros((b, d));
        for e in 0..b {
            let m = mask[e];
            for j in 0..d {
                out[[e, j]] = m * von[[e, j]] + (1.0 - m) * voff[[e, j]];
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let mut don = Array2::<f64>::zeros((b, d));
                let mut doff = Array2::<f64>::zeros((b, d));
                for e in 0..b {
                    let m = mask[e];
                    for j in 0..d {
                        don[[e, j]] = m * g[[e, j]];
                        doff[[e, j]] = (1.0 - m) * g[[e, j]];
                    }
                }
                gr.accum(on.0, don.view());
                gr.accum(off.0, doff.view());
            })),
        )
    }

    /// Sum all entries to a `[1,1]` scalar.
    pub fn sum_all(&mut self, a: T) -> T {
        let va = self.arc(a);
        let (rows, cols) = va.dim();
        let out = Array2::from_elem((1, 1), va.sum());
        self.push(
            out,
            Some(Box::new(move |g, _t, gr| {
                let d = Array2::from_elem((rows, cols), g[[0, 0]]);
                gr.accum(a.0, d.view());
            })),
        )
    }

    /// Backward pass from a `[1,1]` scalar root, keeping per-node gradients
    /// for inspection. `n_params` sizes the per-parameter gradient table.
    pub fn backward(&self, root: T, n_params: usize) -> Grads {
        self.backward_impl(root, n_params, true)
    }

    /// Backward pass that keeps only parameter gradients; node gradients are
    /// dropped as soon as they are consumed (training-sized graphs).
    pub fn backward_params(&self, root: T, n_params: usize) -> Grads {
        self.backward_impl(root, n_params, false)
    }

    fn backward_impl(&self, root: T, n_params: usize, keep_nodes: bool) -> Grads {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads = Grads {
            node: vec![None; self.nodes.len()],
            param: vec![None; n_params],
        };
        grads.node[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads.node[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&g, self, &mut grads);
            }
            if let Some(pid) = self.nodes[i].param {
                match &mut grads.param[pid] {
                    Some(pg) => *pg += &g,
                    slot => *slot = Some(g.clone()),
                }
            }
            if keep_nodes {
                grads.node[i] = Some(g);
            }
        }
        grads
    }
}
