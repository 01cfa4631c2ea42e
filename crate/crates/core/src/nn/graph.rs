//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! The tape records one node per operation. Sequence models lay a batch out
//! as `batch * len` rows, so attention and dynamic convolution are fused ops
//! that know the block structure instead of being composed from slices.

use super::mat::{matmul, Mat, Real};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Block layout shared by the fused sequence ops.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// `batch * key_len` flags; `false` marks padding keys.
    pub key_valid: Vec<bool>,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub kernel: usize,
    pub causal: bool,
    pub dropout: f64,
}

impl ConvSpec {
    pub fn left_pad(&self) -> usize {
        if self.causal {
            self.kernel - 1
        } else {
            self.kernel / 2
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Glu(Var),
    ScaleRows { x: Var, scale: Vec<T> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat<T>, rstd: Vec<T> },
    Embed { table: Var, ids: Vec<u32>, scale: T },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T>, keep: Option<Vec<T>> },
    DynConv { x: Var, w: Var, spec: ConvSpec, probs: Vec<T>, keep: Option<Vec<T>> },
    SmoothedNll { logits: Var, targets: Vec<u32>, pad: u32, eps: f64, lse: Vec<f64> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    replay: Option<Replay<T>>,
}

/// Re-evaluation of an existing tape after a leaf edit: nodes whose inputs are
/// unchanged keep their cached values. ReLUs keep the activation pattern of
/// the original pass, so the replayed function is smooth in the edited leaves.
struct Replay<T> {
    cursor: usize,
    dirty: Vec<bool>,
    saved: Vec<(usize, Node<T>)>,
    leaf_edits: Vec<(usize, usize, T)>,
    crossed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn keep_mask<T: Real, R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let scale = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
        .collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), replay: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Moves a node's value out, leaving an empty matrix behind.
    pub fn take_value(&mut self, v: Var) -> Mat<T> {
        std::mem::take(&mut self.nodes[v.0].value)
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        if let Some(r) = &mut self.replay {
            let k = r.cursor;
            r.cursor += 1;
            r.dirty[k] = true;
            let old = std::mem::replace(&mut self.nodes[k], Node { value, op, needs_grad });
            r.saved.push((k, old));
            return Var(k);
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// During a replay, returns the cached node when none of `inputs` changed.
    fn reuse(&mut self, inputs: &[Var]) -> Option<Var> {
        let r = self.replay.as_mut()?;
        if inputs.iter().any(|v| r.dirty[v.0]) {
            return None;
        }
        r.cursor += 1;
        Some(Var(r.cursor - 1))
    }

    /// Starts re-running the same construction sequence from node `cursor`
    /// with leaf elements overwritten by `edits` (`(leaf, flat index, value)`).
    pub fn begin_replay(&mut self, cursor: usize, edits: &[(Var, usize, T)]) {
        assert!(self.replay.is_none(), "replay already active");
        let mut dirty = vec![false; self.nodes.len()];
        let mut leaf_edits = Vec::new();
        for &(v, i, x) in edits {
            let slot = &mut self.nodes[v.0].value.data[i];
            leaf_edits.push((v.0, i, *slot));
            *slot = x;
            dirty[v.0] = true;
        }
        self.replay = Some(Replay { cursor, dirty, saved: Vec::new(), leaf_edits, crossed: false });
    }

    /// Restores the tape to its state before [`Graph::begin_replay`]. Returns
    /// true when some ReLU input changed which side of zero it was on (the
    /// replay held that unit's original activation).
    pub fn end_replay(&mut self) -> bool {
        let r = self.replay.take().expect("no replay active");
        for (k, old) in r.saved.into_iter().rev() {
            self.nodes[k] = old;
        }
        for (k, i, x) in r.leaf_edits {
            self.nodes[k].value.data[i] = x;
        }
        r.crossed
    }

    pub fn is_replaying(&self) -> bool {
        self.replay.is_some()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        if let Some(v) = self.reuse(&[]) {
            return v;
        }
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        if let Some(v) = self.reuse(&[]) {
            return v;
        }
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        if let Some(v) = self.reuse(&[a, b]) {
            return v;
        }
        let value = matmul(self.value(a), self.value(b), trans_b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        if let Some(v) = self.reuse(&[a, b]) {
            return v;
        }
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        if let Some(v) = self.reuse(&[x, bias]) {
            return v;
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias);
        assert_eq!((1, value.cols), b.shape(), "bias shape mismatch");
        for r in 0..value.rows {
            for (y, &bb) in value.row_mut(r).iter_mut().zip(&b.data) {
                *y = *y + bb;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    /// `x * w + b` with `w` laid out as `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w, false);
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let mut value = self.value(x).clone();
        if let Some(r) = &mut self.replay {
            let active = &self.nodes[r.cursor].value.data;
            for (y, a) in value.data.iter_mut().zip(active) {
                let on = *a > T::zero();
                r.crossed |= on != (*y > T::zero());
                if !on {
                    *y = T::zero();
                }
            }
        } else {
            for y in value.data.iter_mut() {
                if *y < T::zero() {
                    *y = T::zero();
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Gated linear unit: first half of the columns gated by the sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let xv = self.value(x);
        assert!(xv.cols % 2 == 0, "glu needs an even column count");
        let c = xv.cols / 2;
        let mut value = Mat::zeros(xv.rows, c);
        for r in 0..xv.rows {
            let row = xv.row(r);
            for j in 0..c {
                value.data[r * c + j] = T::of(row[j].f64() * sigmoid(row[c + j].f64()));
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Glu(x), ng)
    }

    /// Multiplies row `r` by `scale[r]`; used to zero padded positions.
    pub fn scale_rows(&mut self, x: Var, scale: Vec<T>) -> Var {
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let mut value = self.value(x).clone();
        assert_eq!(scale.len(), value.rows);
        for (r, &s) in scale.iter().enumerate() {
            for y in value.row_mut(r) {
                *y = *y * s;
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::ScaleRows { x, scale }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        if let Some(v) = self.reuse(&[x, gain, bias]) {
            return v;
        }
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut value = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(T::of(rs));
            for j in 0..cols {
                let h = T::of((row[j].f64() - mean) * rs);
                xhat.data[r * cols + j] = h;
                value.data[r * cols + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    pub fn embed(&mut self, table: Var, ids: &[u32], scale: f64) -> Var {
        if let Some(v) = self.reuse(&[table]) {
            return v;
        }
        let t = self.value(table);
        let scale = T::of(scale);
        let mut value = Mat::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < t.rows, "token id {id} outside embedding table");
            for (y, &w) in value.row_mut(i).iter_mut().zip(t.row(id as usize)) {
                *y = w * scale;
            }
        }
        let ng = self.needs(table);
        self.push(value, Op::Embed { table, ids: ids.to_vec(), scale }, ng)
    }

    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        if let Some(v) = self.reuse(&[x]) {
            return v;
        }
        let mut value = self.value(x).clone();
        let mask: Vec<T> = keep_mask(value.data.len(), p, rng);
        for (y, &m) in value.data.iter_mut().zip(&mask) {
            *y = *y * m;
        }
        let ng = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    /// Multi-head scaled dot-product attention over `spec.batch` independent blocks.
    pub fn attention<R: Rng>(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec, rng: &mut R) -> Var {
        if let Some(v) = self.reuse(&[q, k, v]) {
            return v;
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = spec.heads * spec.head_dim;
        assert_eq!(qv.shape(), (spec.batch * spec.query_len, width), "query shape");
        assert_eq!(kv.shape(), (spec.batch * spec.key_len, width), "key shape");
        assert_eq!(vv.shape(), kv.shape(), "value shape");
        assert_eq!(spec.key_valid.len(), spec.batch * spec.key_len);
        let (lq, lk, hd) = (spec.query_len, spec.key_len, spec.head_dim);
        let block = lq * lk;
        let mut probs = vec![T::zero(); spec.batch * spec.heads * block];
        let scale = T::of(1.0 / (hd as f64).sqrt());
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let s = &mut probs[(b * spec.heads + h) * block..][..block];
                T::gemm(
                    lq,
                    hd,
                    lk,
                    scale,
                    &qv.data[b * lq * width + h * hd..],
                    width as isize,
                    1,
                    &kv.data[b * lk * width + h * hd..],
                    1,
                    width as isize,
                    T::zero(),
                    s,
                    lk as isize,
                    1,
                );
                let valid = &spec.key_valid[b * lk..(b + 1) * lk];
                for i in 0..lq {
                    let row = &mut s[i * lk..(i + 1) * lk];
                    softmax_masked(row, |j| valid[j] && !(spec.causal && j > i));
                }
            }
        }
        let keep = (spec.dropout > 0.0).then(|| keep_mask::<T, R>(probs.len(), spec.dropout, rng));
        let applied: Vec<T> = match &keep {
            Some(m) => probs.iter().zip(m).map(|(&p, &m)| p * m).collect(),
            None => probs.clone(),
        };
        let mut value = Mat::zeros(spec.batch * lq, width);
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                T::gemm(
                    lq,
                    lk,
                    hd,
                    T::one(),
                    &applied[(b * spec.heads + h) * block..],
                    lk as isize,
                    1,
                    &vv.data[b * lk * width + h * hd..],
                    width as isize,
                    1,
                    T::zero(),
                    &mut value.data[b * lq * width + h * hd..],
                    width as isize,
                    1,
                );
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::Attention { q, k, v, spec, probs, keep }, ng)
    }

    /// Dynamic convolution: per-position kernels (softmax over the kernel
    /// width) shared by all channels of a head.
    ///
    /// `x` is `[batch*len, channels]`, `w` holds raw kernel logits `[batch*len, heads*kernel]`.
    pub fn dynamic_conv<R: Rng>(&mut self, x: Var, w: Var, spec: ConvSpec, rng: &mut R) -> Var {
        if let Some(v) = self.reuse(&[x, w]) {
            return v;
        }
        let (xv, wv) = (self.value(x), self.value(w));
        let (hk, k) = (spec.heads * spec.kernel, spec.kernel);
        assert_eq!(xv.rows, spec.batch * spec.len, "conv input rows");
        assert_eq!(wv.shape(), (xv.rows, hk), "conv weight shape");
        assert!(xv.cols % spec.heads == 0, "channels must divide into heads");
        let mut probs = wv.data.clone();
        for group in probs.chunks_mut(k) {
            softmax_masked(group, |_| true);
        }
        let keep = (spec.dropout > 0.0).then(|| keep_mask::<T, R>(probs.len(), spec.dropout, rng));
        let applied: Vec<T> = match &keep {
            Some(m) => probs.iter().zip(m).map(|(&p, &m)| p * m).collect(),
            None => probs.clone(),
        };
        let c = xv.cols;
        let per_head = c / spec.heads;
        let pad = spec.left_pad();
        let mut value = Mat::zeros(xv.rows, c);
        for b in 0..spec.batch {
            for t in 0..spec.len {
                let out_row = (b * spec.len + t) * c;
                let wrow = &applied[(b * spec.len + t) * hk..][..hk];
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src < 0 || src >= spec.len as isize {
                        continue;
                    }
                    let in_row = xv.row(b * spec.len + src as usize);
                    for h in 0..spec.heads {
                        let wgt = wrow[h * k + kk];
                        for ch in h * per_head..(h + 1) * per_head {
                            value.data[out_row + ch] = value.data[out_row + ch] + wgt * in_row[ch];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(value, Op::DynConv { x, w, spec, probs, keep }, ng)
    }

    /// Sum over non-pad rows of `(1-eps)*nll(target) + eps*mean_nll(all classes)`.
    /// Returns the `[1,1]` loss node and the number of non-pad targets.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[u32], eps: f64, pad: u32) -> (Var, usize) {
        if let Some(v) = self.reuse(&[logits]) {
            return (v, targets.iter().filter(|&&t| t != pad).count());
        }
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let v = lv.cols as f64;
        let mut total = 0.0;
        let mut count = 0;
        let mut lse = Vec::with_capacity(lv.rows);
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
            let l = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            lse.push(l);
            if t == pad {
                continue;
            }
            let nll = l - row[t as usize].f64();
            let mean_nll = l - row.iter().map(|x| x.f64()).sum::<f64>() / v;
            total += (1.0 - eps) * nll + eps * mean_nll;
            count += 1;
        }
        let ng = self.needs(logits);
        let node = self.push(
            Mat::from_vec(1, 1, vec![T::of(total)]),
            Op::SmoothedNll { logits, targets: targets.to_vec(), pad, eps, lse },
            ng,
        );
        (node, count)
    }

    /// Backpropagates `seed * d(out)` through the tape.
    pub fn backward(&self, out: Var, seed: T) -> Gradients<T> {
        let ov = self.value(out);
        self.backward_from(out, Mat::from_vec(ov.rows, ov.cols, vec![seed; ov.data.len()]))
    }

    /// Backpropagates an arbitrary upstream gradient for `out`.
    pub fn backward_from(&self, out: Var, upstream: Mat<T>) -> Gradients<T> {
        assert_eq!(upstream.shape(), self.value(out).shape(), "upstream gradient shape");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(upstream);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
            }
        }
        Gradients { grads }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Mat<T>>], v: Var) -> Option<&'a mut Mat<T>> {
        if !self.needs(v) {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(r, c)))
    }

    fn backward_node(&self, node: &Node<T>, dy: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_slot(grads, *a) {
                    // da = dy * op(b)^T
                    let (rsb, csb) = if *trans_b { (bv.cols as isize, 1) } else { (1, bv.cols as isize) };
                    T::gemm(
                        dy.rows,
                        dy.cols,
                        av.cols,
                        T::one(),
                        &dy.data,
                        dy.cols as isize,
                        1,
                        &bv.data,
                        rsb,
                        csb,
                        T::one(),
                        &mut da.data,
                        av.cols as isize,
                        1,
                    );
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    if *trans_b {
                        // b is [n, k]: db = dy^T * a
                        T::gemm(
                            dy.cols,
                            dy.rows,
                            av.cols,
                            T::one(),
                            &dy.data,
                            1,
                            dy.cols as isize,
                            &av.data,
                            av.cols as isize,
                            1,
                            T::one(),
                            &mut db.data,
                            bv.cols as isize,
                            1,
                        );
                    } else {
                        // db = a^T * dy
                        T::gemm(
                            av.cols,
                            av.rows,
                            dy.cols,
                            T::one(),
                            &av.data,
                            1,
                            av.cols as isize,
                            &dy.data,
                            dy.cols as isize,
                            1,
                            T::one(),
                            &mut db.data,
                            bv.cols as isize,
                            1,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.grad_slot(grads, *v) {
                        g.add_assign(dy);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    g.add_assign(dy);
                }
                if let Some(g) = self.grad_slot(grads, *bias) {
                    for r in 0..dy.rows {
                        for (acc, &d) in g.data.iter_mut().zip(dy.row(r)) {
                            *acc = *acc + d;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((acc, &d), &y) in g.data.iter_mut().zip(&dy.data).zip(&node.value.data) {
                        if y > T::zero() {
                            *acc = *acc + d;
                        }
                    }
                }
            }
            Op::Glu(x) => {
                let xv = self.value(*x);
                let c = dy.cols;
                if let Some(g) = self.grad_slot(grads, *x) {
                    for r in 0..dy.rows {
                        let row = xv.row(r);
                        for j in 0..c {
                            let a = row[j].f64();
                            let s = sigmoid(row[c + j].f64());
                            let d = dy.data[r * c + j].f64();
                            let ga = &mut g.data[r * 2 * c + j];
                            *ga = *ga + T::of(d * s);
                            let gb = &mut g.data[r * 2 * c + c + j];
                            *gb = *gb + T::of(d * a * s * (1.0 - s));
                        }
                    }
                }
            }
            Op::ScaleRows { x, scale } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for (r, &s) in scale.iter().enumerate() {
                        for (acc, &d) in g.row_mut(r).iter_mut().zip(dy.row(r)) {
                            *acc = *acc + d * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = &self.value(*gain).data;
                let cols = dy.cols;
                if let Some(g) = self.grad_slot(grads, *gain) {
                    for (i, (&d, &h)) in dy.data.iter().zip(&xhat.data).enumerate() {
                        g.data[i % cols] = g.data[i % cols] + d * h;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *bias) {
                    for (i, &d) in dy.data.iter().enumerate() {
                        g.data[i % cols] = g.data[i % cols] + d;
                    }
                }
                if let Some(g) = self.grad_slot(grads, *x) {
                    let n = cols as f64;
                    for r in 0..dy.rows {
                        let (d, h) = (dy.row(r), xhat.row(r));
                        let dh: Vec<f64> = (0..cols).map(|j| d[j].f64() * gv[j].f64()).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b.f64()).sum::<f64>() / n;
                        let rs = rstd[r].f64();
                        for (j, acc) in g.row_mut(r).iter_mut().enumerate() {
                            *acc = *acc + T::of(rs * (dh[j] - mean_dh - h[j].f64() * mean_dh_h));
                        }
                    }
                }
            }
            Op::Embed { table, ids, scale } => {
                if let Some(g) = self.grad_slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        for (acc, &d) in g.row_mut(id as usize).iter_mut().zip(dy.row(i)) {
                            *acc = *acc + d * *scale;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(g) = self.grad_slot(grads, *x) {
                    for ((acc, &d), &m) in g.data.iter_mut().zip(&dy.data).zip(mask) {
                        *acc = *acc + d * m;
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs, keep } => self.attention_backward(*q, *k, *v, spec, probs, keep.as_deref(), dy, grads),
            Op::DynConv { x, w, spec, probs, keep } => self.conv_backward(*x, *w, spec, probs, keep.as_deref(), dy, grads),
            Op::SmoothedNll { logits, targets, pad, eps, lse } => {
                let lv = self.value(*logits);
                let seed = dy.data[0].f64();
                let vocab = lv.cols;
                let uniform = eps / vocab as f64;
                if let Some(g) = self.grad_slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = lv.row(r);
                        let grow = g.row_mut(r);
                        for j in 0..vocab {
                            let p = (row[j].f64() - lse[r]).exp();
                            let mut d = p - uniform;
                            if j == t as usize {
                                d -= 1.0 - eps;
                            }
                            grow[j] = grow[j] + T::of(seed * d);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        keep: Option<&[T]>,
        dy: &Mat<T>,
        grads: &mut [Option<Mat<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = spec.heads * spec.head_dim;
        let (lq, lk, hd) = (spec.query_len, spec.key_len, spec.head_dim);
        let block = lq * lk;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut dq = self.needs(q).then(|| Mat::zeros(qv.rows, width));
        let mut dk = self.needs(k).then(|| Mat::zeros(kv.rows, width));
        let mut dv = self.needs(v).then(|| Mat::zeros(vv.rows, width));
        let mut dp = vec![T::zero(); block];
        let mut applied = vec![T::zero(); block];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let off = (b * spec.heads + h) * block;
                let p = &probs[off..off + block];
                match keep {
                    Some(m) => {
                        for ((a, &pp), &mm) in applied.iter_mut().zip(p).zip(&m[off..off + block]) {
                            *a = pp * mm;
                        }
                    }
                    None => applied.copy_from_slice(p),
                }
                let qo = b * lq * width + h * hd;
                let ko = b * lk * width + h * hd;
                if let Some(dv) = dv.as_mut() {
                    T::gemm(lk, lq, hd, T::one(), &applied, 1, lk as isize, &dy.data[qo..], width as isize, 1, T::one(), &mut dv.data[ko..], width as isize, 1);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                T::gemm(lq, hd, lk, T::one(), &dy.data[qo..], width as isize, 1, &vv.data[ko..], 1, width as isize, T::zero(), &mut dp, lk as isize, 1);
                if let Some(m) = keep {
                    for (d, &mm) in dp.iter_mut().zip(&m[off..off + block]) {
                        *d = *d * mm;
                    }
                }
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a.f64() * b.f64()).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = T::of(pp.f64() * (d.f64() - dot));
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    T::gemm(lq, lk, hd, scale, &dp, lk as isize, 1, &kv.data[ko..], width as isize, 1, T::one(), &mut dq.data[qo..], width as isize, 1);
                }
                if let Some(dk) = dk.as_mut() {
                    T::gemm(lk, lq, hd, scale, &dp, 1, lk as isize, &qv.data[qo..], width as isize, 1, T::one(), &mut dk.data[ko..], width as isize, 1);
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(g), Some(slot)) = (g, self.grad_slot(grads, var)) {
                slot.add_assign(&g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        spec: &ConvSpec,
        probs: &[T],
        keep: Option<&[T]>,
        dy: &Mat<T>,
        grads: &mut [Option<Mat<T>>],
    ) {
        let xv = self.value(x);
        let c = xv.cols;
        let k = spec.kernel;
        let hk = spec.heads * k;
        let per_head = c / spec.heads;
        let pad = spec.left_pad();
        let mut dx = self.needs(x).then(|| Mat::zeros(xv.rows, c));
        let mut dw = self.needs(w).then(|| Mat::zeros(xv.rows, hk));
        for b in 0..spec.batch {
            for t in 0..spec.len {
                let row = b * spec.len + t;
                let dyr = dy.row(row);
                let mut dapplied = vec![0.0f64; hk];
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src < 0 || src >= spec.len as isize {
                        continue;
                    }
                    let srow = b * spec.len + src as usize;
                    let in_row = xv.row(srow);
                    for h in 0..spec.heads {
                        let idx = row * hk + h * k + kk;
                        let wgt = match keep {
                            Some(m) => probs[idx] * m[idx],
                            None => probs[idx],
                        };
                        let mut acc = 0.0;
                        for ch in h * per_head..(h + 1) * per_head {
                            acc += dyr[ch].f64() * in_row[ch].f64();
                            if let Some(dx) = dx.as_mut() {
                                let slot = &mut dx.data[srow * c + ch];
                                *slot = *slot + wgt * dyr[ch];
                            }
                        }
                        dapplied[h * k + kk] = acc;
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for h in 0..spec.heads {
                        let base = row * hk + h * k;
                        let mut dot = 0.0;
                        let mut dp = vec![0.0; k];
                        for kk in 0..k {
                            let m = keep.map_or(1.0, |m| m[base + kk].f64());
                            dp[kk] = dapplied[h * k + kk] * m;
                            dot += dp[kk] * probs[base + kk].f64();
                        }
                        for kk in 0..k {
                            dw.data[base + kk] = T::of(probs[base + kk].f64() * (dp[kk] - dot));
                        }
                    }
                }
            }
        }
        for (var, g) in [(x, dx), (w, dw)] {
            if let (Some(g), Some(slot)) = (g, self.grad_slot(grads, var)) {
                slot.add_assign(&g);
            }
        }
    }
}

/// In-place softmax over the entries where `allowed(j)`; the rest become zero.
pub(crate) fn softmax_masked<T: Real>(row: &mut [T], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, x) in row.iter().enumerate() {
        if allowed(j) {
            max = max.max(x.f64());
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        let e = if allowed(j) { (x.f64() - max).exp() } else { 0.0 };
        sum += e;
        *x = T::of(e);
    }
    for x in row.iter_mut() {
        *x = T::of(x.f64() / sum);
    }
}
