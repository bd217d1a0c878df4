//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value is a row-major matrix (`rows × cols`). Batched sequences are
//! stored as `groups × rows_per_group` stacked rows; images are channels-last
//! (`batch·height·width × channels`), so convolutions become `im2col` followed
//! by a dense product.

use crate::tensor::{cst, gemm, gemm_view, MatView, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel 2-D convolution over channels-last images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Multi-head scaled dot-product attention layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub groups: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// Query `i` sees key `j` only when `j <= i + kv_len - q_len`.
    pub causal: bool,
    /// Keys with `false` are never attended to.
    pub key_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    fn allowed(&self, i: usize, j: usize) -> bool {
        if let Some(mask) = &self.key_mask {
            if !mask[j] {
                return false;
            }
        }
        !self.causal || j + self.q_len <= i + self.kv_len
    }
}

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, T),
    AffineCols { x: Var, gamma: Var, beta: Var },
    AddTiled { x: Var, p: Var },
    Modulate { x: Var, shift: Var, scale: Var },
    MulGroups { x: Var, g: Var },
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu { x: Var, dy: Vec<T> },
    Silu { x: Var, sig: Vec<T> },
    Attention { src: [(Var, usize); 3], spec: AttnSpec, probs: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatGroups { parts: Vec<(Var, usize)>, groups: usize },
    SliceGroups { x: Var, start: usize, per_group: usize },
    GroupMean { x: Var, per_group: usize, mask: Option<Vec<bool>> },
    Im2Col { x: Var, geom: ConvGeom },
    Gather { table: Var, ids: Vec<usize> },
    MulConst { x: Var, c: Vec<T> },
    MaskedMse { pred: Var, target: Vec<T>, weight: Vec<T>, denom: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    g: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.g[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.g[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn acc<T: Scalar>(o: &mut [T], d: &[T]) {
    for (o, d) in o.iter_mut().zip(d) {
        *o += *d;
    }
}

/// `o[r, j] += d[r, j] · w[j]` over rows of width `w.len()`.
fn acc_rows_scaled<T: Scalar>(o: &mut [T], d: &[T], w: &[T]) {
    let n = w.len();
    for (orow, drow) in o.chunks_mut(n).zip(d.chunks(n)) {
        for ((o, d), w) in orow.iter_mut().zip(drow).zip(w) {
            *o += *d * *w;
        }
    }
}

/// `o[j] += Σ_r d[r, j]`.
fn acc_col_sums<T: Scalar>(o: &mut [T], d: &[T]) {
    for drow in d.chunks(o.len()) {
        acc(o, drow);
    }
}

/// `o[j] += Σ_r d[r, j] · x[r, j]`.
fn acc_col_dots<T: Scalar>(o: &mut [T], d: &[T], x: &[T]) {
    let n = o.len();
    for (drow, xrow) in d.chunks(n).zip(x.chunks(n)) {
        for ((o, d), x) in o.iter_mut().zip(drow).zip(xrow) {
            *o += *d * *x;
        }
    }
}

/// Softmax over the entries of `row` where `allowed` is one; the rest become zero.
/// The exponentials run in their own pass so the loop vectorizes.
fn masked_softmax<T: Scalar>(row: &mut [T], allowed: &[T]) {
    let mut mx = T::neg_infinity();
    for (x, ok) in row.iter().zip(allowed) {
        if *ok != T::zero() {
            mx = mx.max(*x);
        }
    }
    if mx == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    for (x, ok) in row.iter_mut().zip(allowed) {
        *x = ((*x - mx) * *ok).exp_fast() * *ok;
    }
    let z: T = row.iter().copied().sum();
    let inv = T::one() / z;
    row.iter_mut().for_each(|x| *x *= inv);
}

pub fn silu_scalar(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor { shape: vec![0], data: vec![] })
    }

    /// `x·w + b` with `x: m×k`, `w: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        assert_eq!(wv.rows(), k, "linear: inner dimensions differ ({} vs {})", k, wv.rows());
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value.data;
            assert_eq!(bv.len(), n, "linear: bias length");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
            gemm(false, false, m, n, k, T::one(), &xv.data, &wv.data, T::one(), &mut out);
        } else {
            gemm(false, false, m, n, k, T::one(), &xv.data, &wv.data, T::zero(), &mut out);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.data.len(), bv.data.len(), "add: shapes {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let shape = av.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|x| *x * s).collect();
        let shape = av.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(a, s), &[a])
    }

    /// Per-column affine map `x·gamma + beta`.
    pub fn affine_cols(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value.data, &self.nodes[beta.0].value.data);
        let n = xv.cols();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut out = xv.data.clone();
        for row in out.chunks_mut(n) {
            for ((o, g), b) in row.iter_mut().zip(g).zip(b) {
                *o = *o * *g + *b;
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, out), Op::AffineCols { x, gamma, beta }, &[x, gamma, beta])
    }

    /// Adds `p: R×n` to every block of `R` consecutive rows of `x`.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let pv = &self.nodes[p.0].value.data;
        assert_eq!(xv.cols(), self.nodes[p.0].value.cols(), "add_tiled: width");
        assert_eq!(xv.data.len() % pv.len(), 0, "add_tiled: rows not a multiple");
        let mut out = xv.data.clone();
        for block in out.chunks_mut(pv.len()) {
            for (o, v) in block.iter_mut().zip(pv) {
                *o += *v;
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, out), Op::AddTiled { x, p }, &[x, p])
    }

    /// Group-wise modulation `x·(1 + scale[g]) + shift[g]`; `shift` and `scale`
    /// are `G×n`, and `x` holds `G` blocks of equal row count.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (sh, sc) = (&self.nodes[shift.0].value, &self.nodes[scale.0].value);
        let n = xv.cols();
        let groups = sh.rows();
        assert_eq!(sh.cols(), n, "modulate: shift width");
        assert_eq!(sc.data.len(), sh.data.len(), "modulate: scale shape");
        assert_eq!(xv.rows() % groups, 0, "modulate: rows not divisible by groups");
        let per = xv.rows() / groups;
        let mut out = xv.data.clone();
        for g in 0..groups {
            let (s, c) = (&sh.data[g * n..(g + 1) * n], &sc.data[g * n..(g + 1) * n]);
            for row in out[g * per * n..(g + 1) * per * n].chunks_mut(n) {
                for ((o, c), s) in row.iter_mut().zip(c).zip(s) {
                    *o = *o * (T::one() + *c) + *s;
                }
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, out), Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    /// Group-wise gating `x·g[group]` with `g: G×n`.
    pub fn mul_groups(&mut self, x: Var, g: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[g.0].value;
        let n = xv.cols();
        let groups = gv.rows();
        assert_eq!(gv.cols(), n, "mul_groups: width");
        assert_eq!(xv.rows() % groups, 0, "mul_groups: rows not divisible by groups");
        let per = xv.rows() / groups;
        let mut out = xv.data.clone();
        for gi in 0..groups {
            let w = &gv.data[gi * n..(gi + 1) * n];
            for row in out[gi * per * n..(gi + 1) * per * n].chunks_mut(n) {
                for (o, w) in row.iter_mut().zip(w) {
                    *o *= *w;
                }
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, out), Op::MulGroups { x, g }, &[x, g])
    }

    /// Row-wise normalisation to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.data.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_n = cst::<T>(1.0 / n as f64);
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + cst(eps)).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (*v - mean) * rs;
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, xhat), Op::LayerNorm { x, rstd }, &[x])
    }

    /// Tanh-approximated GELU, evaluated as `x·σ(2u)` with `u = c(x + a x³)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (c, a) = (cst::<T>(GELU_C), cst::<T>(GELU_A));
        let (two, three) = (cst::<T>(2.0), cst::<T>(3.0));
        let n = xv.data.len();
        let (mut y, mut dy) = (vec![T::zero(); n], vec![T::zero(); n]);
        for ((&v, yo), dyo) in xv.data.iter().zip(&mut y).zip(&mut dy) {
            let v2 = v * v;
            let u = c * (v + a * v2 * v);
            let s = T::one() / (T::one() + (-two * u).exp_fast());
            *yo = v * s;
            *dyo = s + v * s * (T::one() - s) * two * c * (T::one() + three * a * v2);
        }
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, y), Op::Gelu { x, dy }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sig: Vec<T> = xv.data.iter().map(|v| T::one() / (T::one() + (-*v).exp_fast())).collect();
        let data = xv.data.iter().zip(&sig).map(|(v, s)| *v * *s).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::Silu { x, sig }, &[x])
    }

    /// Multi-head attention. `q: G·q_len × d`, `k`, `v: G·kv_len × d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let d = self.nodes[q.0].value.cols();
        self.attention_cols([(q, 0), (k, 0), (v, 0)], d, spec)
    }

    /// Attention whose query, key and value matrices are the `width`-column windows
    /// starting at the given offsets, so a fused projection needs no slicing.
    pub fn attention_cols(&mut self, src: [(Var, usize); 3], width: usize, spec: AttnSpec) -> Var {
        let d = width;
        let [(q, qc), (k, kc), (v, vc)] = src;
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        assert!(qc + d <= qv.cols(), "attention: query window");
        assert!(kc + d <= kv.cols(), "attention: key window");
        assert!(vc + d <= vv.cols(), "attention: value window");
        assert_eq!(d % spec.heads, 0, "attention: width not divisible by heads");
        assert_eq!(qv.rows(), spec.groups * spec.q_len, "attention: query rows");
        assert_eq!(kv.rows(), spec.groups * spec.kv_len, "attention: key rows");
        assert_eq!(vv.rows(), spec.groups * spec.kv_len, "attention: value rows");
        if let Some(m) = &spec.key_mask {
            assert_eq!(m.len(), spec.kv_len, "attention: key mask length");
        }
        let (nq, nk, nv) = (qv.cols(), kv.cols(), vv.cols());
        let dh = d / spec.heads;
        let scale = cst::<T>(1.0 / (dh as f64).sqrt());
        let (tq, tk, heads) = (spec.q_len, spec.kv_len, spec.heads);
        let allowed: Vec<T> =
            (0..tq * tk).map(|ij| if spec.allowed(ij / tk, ij % tk) { T::one() } else { T::zero() }).collect();
        let mut out = vec![T::zero(); spec.groups * tq * d];
        let mut probs = vec![T::zero(); spec.groups * heads * tq * tk];
        for g in 0..spec.groups {
            for h in 0..heads {
                let po = (g * heads + h) * tq * tk;
                let p = &mut probs[po..po + tq * tk];
                gemm_view(
                    tq,
                    tk,
                    dh,
                    scale,
                    &qv.data,
                    MatView::new(g * tq * nq + qc + h * dh, nq, 1),
                    &kv.data,
                    MatView::new(g * tk * nk + kc + h * dh, 1, nk),
                    T::zero(),
                    p,
                    MatView::new(0, tk, 1),
                );
                for (row, ok) in p.chunks_mut(tk).zip(allowed.chunks(tk)) {
                    masked_softmax(row, ok);
                }
                gemm_view(
                    tq,
                    dh,
                    tk,
                    T::one(),
                    &probs[po..po + tq * tk],
                    MatView::new(0, tk, 1),
                    &vv.data,
                    MatView::new(g * tk * nv + vc + h * dh, nv, 1),
                    T::zero(),
                    &mut out,
                    MatView::new(g * tq * d + h * dh, d, 1),
                );
            }
        }
        let value = Tensor::from_vec(&[spec.groups * tq, d], out);
        self.push(value, Op::Attention { src, spec, probs }, &[q, k, v])
    }

    /// Attention probabilities of an attention node, laid out `G×heads×q_len×kv_len`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        assert!(start + width <= n, "slice_cols out of range");
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.data[r * n + start..r * n + start + width]);
        }
        self.push(Tensor::from_vec(&[rows, width], out), Op::SliceCols { x, start }, &[x])
    }

    /// Concatenates per-group row blocks: for each group, the rows of every part in order.
    pub fn concat_groups(&mut self, parts: &[Var], groups: usize) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.cols();
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols(), n, "concat_groups: width mismatch");
            assert_eq!(pv.rows() % groups, 0, "concat_groups: rows not divisible by groups");
            spec.push((p, pv.rows() / groups));
        }
        let total: usize = spec.iter().map(|s| s.1).sum();
        let mut out = Vec::with_capacity(groups * total * n);
        for g in 0..groups {
            for &(p, per) in &spec {
                let pv = &self.nodes[p.0].value.data;
                out.extend_from_slice(&pv[g * per * n..(g + 1) * per * n]);
            }
        }
        self.push(
            Tensor::from_vec(&[groups * total, n], out),
            Op::ConcatGroups { parts: spec, groups },
            parts,
        )
    }

    /// Rows `start..start+len` of every block of `per_group` rows.
    pub fn slice_groups(&mut self, x: Var, per_group: usize, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        assert_eq!(xv.rows() % per_group, 0, "slice_groups: rows not divisible");
        assert!(start + len <= per_group, "slice_groups out of range");
        let groups = xv.rows() / per_group;
        let mut out = Vec::with_capacity(groups * len * n);
        for g in 0..groups {
            let base = (g * per_group + start) * n;
            out.extend_from_slice(&xv.data[base..base + len * n]);
        }
        self.push(
            Tensor::from_vec(&[groups * len, n], out),
            Op::SliceGroups { x, start, per_group },
            &[x],
        )
    }

    /// Mean over the rows of each block, optionally restricted to `mask`ed rows.
    pub fn group_mean(&mut self, x: Var, per_group: usize, mask: Option<Vec<bool>>) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.cols();
        assert_eq!(xv.rows() % per_group, 0, "group_mean: rows not divisible");
        if let Some(m) = &mask {
            assert_eq!(m.len(), per_group, "group_mean: mask length");
        }
        let groups = xv.rows() / per_group;
        let count = mask.as_ref().map_or(per_group, |m| m.iter().filter(|b| **b).count());
        assert!(count > 0, "group_mean: no rows selected");
        let inv = cst::<T>(1.0 / count as f64);
        let mut out = vec![T::zero(); groups * n];
        for g in 0..groups {
            let o = &mut out[g * n..(g + 1) * n];
            for r in 0..per_group {
                if mask.as_ref().is_none_or(|m| m[r]) {
                    acc(o, &xv.data[(g * per_group + r) * n..][..n]);
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        self.push(Tensor::from_vec(&[groups, n], out), Op::GroupMean { x, per_group, mask }, &[x])
    }

    /// Extracts convolution patches from a channels-last image batch.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.cols(), geom.channels, "im2col: channel count");
        assert_eq!(xv.rows(), geom.batch * geom.height * geom.width, "im2col: pixel count");
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = vec![T::zero(); geom.batch * ho * wo * pl];
        let c = geom.channels;
        for_each_run(&geom, |row, col_off, src, taps| {
            let o = &mut out[row * pl + col_off..][..taps * c];
            for (o, v) in o.iter_mut().zip(&xv.data[src * c..][..taps * c]) {
                *o = *v;
            }
        });
        self.push(Tensor::from_vec(&[geom.batch * ho * wo, pl], out), Op::Im2Col { x, geom }, &[x])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let n = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            assert!(i < tv.rows(), "gather: index {i} out of range");
            out.extend_from_slice(&tv.data[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::from_vec(&[ids.len(), n], out),
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.data.len(), c.len(), "mul_const: size");
        let data = xv.data.iter().zip(&c).map(|(a, b)| *a * *b).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::from_vec(&shape, data), Op::MulConst { x, c }, &[x])
    }

    /// Weighted mean squared error `Σ w(p−y)² / Σ w`, accumulated in f64.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<T>, weight: Vec<T>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.data.len(), target.len(), "masked_mse: target size");
        assert_eq!(pv.data.len(), weight.len(), "masked_mse: weight size");
        let denom: f64 = weight.iter().map(|w| w.to_f64_lossy()).sum();
        let mut acc = 0.0f64;
        for ((p, y), w) in pv.data.iter().zip(&target).zip(&weight) {
            let e = p.to_f64_lossy() - y.to_f64_lossy();
            acc += w.to_f64_lossy() * e * e;
        }
        let loss = if denom > 0.0 { acc / denom } else { 0.0 };
        self.push(
            Tensor::from_vec(&[1], vec![cst(loss)]),
            Op::MaskedMse { pred, target, weight, denom },
            &[pred],
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf that needs one.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.nodes[loss.0].value.data.len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads { g: grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.data.len()]))
    }

    fn backprop_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(false, true, m, k, n, T::one(), gy, &wv.data, T::one(), gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(true, false, k, n, m, T::one(), &xv.data, gy, T::one(), gw);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        acc_col_sums(&mut gb[..n], gy);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        acc(g, gy);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.slot(grads, *a) {
                    for (o, d) in g.iter_mut().zip(gy) {
                        *o += *d * *s;
                    }
                }
            }
            Op::AffineCols { x, gamma, beta } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value.data;
                let n = xv.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    acc_rows_scaled(gx, gy, &gv[..n]);
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    acc_col_dots(&mut gg[..n], gy, &xv.data);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    acc_col_sums(&mut gb[..n], gy);
                }
            }
            Op::AddTiled { x, p } => {
                if let Some(gx) = self.slot(grads, *x) {
                    acc(gx, gy);
                }
                if let Some(gp) = self.slot(grads, *p) {
                    acc_col_sums(gp, gy);
                }
            }
            Op::Modulate { x, shift, scale } => {
                let xv = &self.nodes[x.0].value;
                let sc = &self.nodes[scale.0].value;
                let n = xv.cols();
                let groups = sc.rows();
                let per = xv.rows() / groups;
                if let Some(gx) = self.slot(grads, *x) {
                    let mut w = vec![T::zero(); n];
                    for g in 0..groups {
                        for (w, c) in w.iter_mut().zip(&sc.data[g * n..(g + 1) * n]) {
                            *w = T::one() + *c;
                        }
                        let span = g * per * n..(g + 1) * per * n;
                        acc_rows_scaled(&mut gx[span.clone()], &gy[span], &w);
                    }
                }
                if let Some(gs) = self.slot(grads, *shift) {
                    for g in 0..groups {
                        acc_col_sums(&mut gs[g * n..(g + 1) * n], &gy[g * per * n..(g + 1) * per * n]);
                    }
                }
                if let Some(gc) = self.slot(grads, *scale) {
                    for g in 0..groups {
                        let span = g * per * n..(g + 1) * per * n;
                        acc_col_dots(&mut gc[g * n..(g + 1) * n], &gy[span.clone()], &xv.data[span]);
                    }
                }
            }
            Op::MulGroups { x, g } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[g.0].value;
                let n = xv.cols();
                let groups = gv.rows();
                let per = xv.rows() / groups;
                if let Some(gx) = self.slot(grads, *x) {
                    for gi in 0..groups {
                        let span = gi * per * n..(gi + 1) * per * n;
                        acc_rows_scaled(&mut gx[span.clone()], &gy[span], &gv.data[gi * n..(gi + 1) * n]);
                    }
                }
                if let Some(gg) = self.slot(grads, *g) {
                    for gi in 0..groups {
                        let span = gi * per * n..(gi + 1) * per * n;
                        acc_col_dots(&mut gg[gi * n..(gi + 1) * n], &gy[span.clone()], &xv.data[span]);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let xhat = &node.value.data;
                    let n = node.value.cols();
                    let inv_n = cst::<T>(1.0 / n as f64);
                    for r in 0..rstd.len() {
                        let d = &gy[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mean_d = d.iter().copied().sum::<T>() * inv_n;
                        let mean_dx = d.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>() * inv_n;
                        let rs = rstd[r];
                        for ((o, d), xh) in gx[r * n..(r + 1) * n].iter_mut().zip(d).zip(xh) {
                            *o += rs * (*d - mean_d - *xh * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { x, dy } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, d), s) in gx.iter_mut().zip(gy).zip(dy) {
                        *o += *d * *s;
                    }
                }
            }
            Op::Silu { x, sig } => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (((o, d), v), s) in gx.iter_mut().zip(gy).zip(&xv.data).zip(sig) {
                        *o += *d * *s * (T::one() + *v * (T::one() - *s));
                    }
                }
            }
            Op::Attention { src, spec, probs } => {
                self.backprop_attention(*src, node.value.cols(), spec, probs, gy, grads);
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = self.nodes[x.0].value.cols();
                    let w = node.value.cols();
                    for (orow, drow) in gx.chunks_mut(n).zip(gy.chunks(w)) {
                        acc(&mut orow[*start..*start + w], drow);
                    }
                }
            }
            Op::ConcatGroups { parts, groups } => {
                let n = node.value.cols();
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, per) in parts {
                    if let Some(gp) = self.slot(grads, p) {
                        for g in 0..*groups {
                            let src = &gy[(g * total + offset) * n..][..per * n];
                            acc(&mut gp[g * per * n..][..per * n], src);
                        }
                    }
                    offset += per;
                }
            }
            Op::SliceGroups { x, start, per_group } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = node.value.cols();
                    let len = node.value.rows() / (self.nodes[x.0].value.rows() / per_group);
                    for (g, block) in gy.chunks(len * n).enumerate() {
                        acc(&mut gx[(g * per_group + start) * n..][..len * n], block);
                    }
                }
            }
            Op::GroupMean { x, per_group, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = node.value.cols();
                    let count = mask.as_ref().map_or(*per_group, |m| m.iter().filter(|b| **b).count());
                    let inv = cst::<T>(1.0 / count as f64);
                    for (g, drow) in gy.chunks(n).enumerate() {
                        for r in 0..*per_group {
                            if mask.as_ref().is_none_or(|m| m[r]) {
                                for (o, d) in gx[(g * per_group + r) * n..][..n].iter_mut().zip(drow) {
                                    *o += *d * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Im2Col { x, geom } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let pl = geom.patch_len();
                    let c = geom.channels;
                    for_each_run(geom, |row, col_off, src, taps| {
                        let d = &gy[row * pl + col_off..][..taps * c];
                        for (o, v) in gx[src * c..][..taps * c].iter_mut().zip(d) {
                            *o += *v;
                        }
                    });
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let n = node.value.cols();
                    for (&i, drow) in ids.iter().zip(gy.chunks(n)) {
                        acc(&mut gt[i * n..(i + 1) * n], drow);
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, d), m) in gx.iter_mut().zip(gy).zip(c) {
                        *o += *d * *m;
                    }
                }
            }
            Op::MaskedMse { pred, target, weight, denom } => {
                if *denom > 0.0 {
                    let pv = &self.nodes[pred.0].value;
                    if let Some(gp) = self.slot(grads, *pred) {
                        let s = gy[0] * cst(2.0 / denom);
                        for (((o, w), p), t) in gp.iter_mut().zip(weight).zip(&pv.data).zip(target) {
                            *o += s * *w * (*p - *t);
                        }
                    }
                }
            }
        }
    }

    fn backprop_attention(
        &self,
        src: [(Var, usize); 3],
        d: usize,
        spec: &AttnSpec,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [(q, qc), (k, kc), (v, vc)] = src;
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (nq, nk, nv) = (qv.cols(), kv.cols(), vv.cols());
        let dh = d / spec.heads;
        let scale = cst::<T>(1.0 / (dh as f64).sqrt());
        let (tq, tk, heads) = (spec.q_len, spec.kv_len, spec.heads);
        let (need_q, need_k) = (self.nodes[q.0].needs_grad, self.nodes[k.0].needs_grad);
        let rows = MatView::new(0, tk, 1);
        let cols = MatView::new(0, 1, tk);
        let mut ds = vec![T::zero(); tq * tk];
        for g in 0..spec.groups {
            for h in 0..heads {
                let qw = MatView::new(g * tq * nq + qc + h * dh, nq, 1);
                let kw = MatView::new(g * tk * nk + kc + h * dh, nk, 1);
                let vw = MatView::new(g * tk * nv + vc + h * dh, nv, 1);
                let ow = MatView::new(g * tq * d + h * dh, d, 1);
                let p = &probs[(g * heads + h) * tq * tk..][..tq * tk];
                if let Some(gv) = self.slot(grads, v) {
                    gemm_view(tk, dh, tq, T::one(), p, cols, gy, ow, T::one(), gv, vw);
                }
                if !need_q && !need_k {
                    continue;
                }
                let vt = MatView::new(vw.offset, 1, nv);
                gemm_view(tq, tk, dh, T::one(), gy, ow, &vv.data, vt, T::zero(), &mut ds, rows);
                for (drow, prow) in ds.chunks_mut(tk).zip(p.chunks(tk)) {
                    let inner: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                    for (x, pj) in drow.iter_mut().zip(prow) {
                        *x = *pj * (*x - inner) * scale;
                    }
                }
                if let Some(gq) = self.slot(grads, q) {
                    gemm_view(tq, dh, tk, T::one(), &ds, rows, &kv.data, kw, T::one(), gq, qw);
                }
                if let Some(gk) = self.slot(grads, k) {
                    gemm_view(tk, dh, tq, T::one(), &ds, cols, &qv.data, qw, T::one(), gk, kw);
                }
            }
        }
    }
}

/// Calls `f(patch_row, column_offset, first_source_pixel, taps)` for every run of
/// horizontally adjacent in-bounds kernel taps. A run is contiguous in both the
/// source image and the patch row.
fn for_each_run(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let k = geom.kernel;
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (b * ho + oy) * wo + ox;
                let x0 = (ox * geom.stride) as isize - geom.pad as isize;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = (geom.width as isize - x0).clamp(0, k as isize) as usize;
                if kx_lo >= kx_hi {
                    continue;
                }
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    let src = (b * geom.height + iy as usize) * geom.width + (x0 + kx_lo as isize) as usize;
                    f(row, (ky * k + kx_lo) * geom.channels, src, kx_hi - kx_lo);
                }
            }
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds the graph from `inputs`, reduces with a random quadratic and compares
    /// analytic gradients to central differences.
    fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor<f64>], target: Option<&Vec<f64>>| -> (f64, Vec<Vec<f64>>, Vec<f64>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let n = tape.value(out).len();
            let target = target.cloned().unwrap_or_else(|| vec![0.3; n]);
            let loss = tape.masked_mse(out, target.clone(), vec![1.0; n]);
            let grads = tape.backward(loss);
            let gs = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| grads.get(*v).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.len()]))
                .collect();
            (tape.value(loss).data[0], gs, target)
        };
        let target: Vec<f64> = {
            let (_, _, t) = eval(&inputs, None);
            t.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (_, analytic, _) = eval(&inputs, Some(&target));
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data[e] += h;
                let mut minus = inputs.clone();
                minus[ti].data[e] -= h;
                let numeric = (eval(&plus, Some(&target)).0 - eval(&minus, Some(&target)).0) / (2.0 * h);
                let a = analytic[ti][e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {ti} elem {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_grads() {
        let mut r = rng();
        let ins = vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 5]), rand_tensor(&mut r, &[5])];
        check(ins, |t, v| t.linear(v[0], v[1], Some(v[2])));
    }

    #[test]
    fn elementwise_grads() {
        let mut r = rng();
        let ins = vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[3, 4])];
        check(ins.clone(), |t, v| {
            let s = t.add(v[0], v[1]);
            let s = t.scale(s, 0.7);
            let g = t.gelu(s);
            t.silu(g)
        });
        check(ins, |t, v| t.mul_const(v[0], vec![0.5, 1.0, 0.0, 2.0, 1.0, 1.0, 0.0, 1.0, 3.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn norm_and_affine_grads() {
        let mut r = rng();
        let ins = vec![rand_tensor(&mut r, &[3, 6]), rand_tensor(&mut r, &[6]), rand_tensor(&mut r, &[6])];
        check(ins, |t, v| {
            let n = t.layer_norm(v[0], 1e-5);
            t.affine_cols(n, v[1], v[2])
        });
    }

    #[test]
    fn group_ops_grads() {
        let mut r = rng();
        let ins = vec![
            rand_tensor(&mut r, &[6, 4]),
            rand_tensor(&mut r, &[2, 4]),
            rand_tensor(&mut r, &[2, 4]),
            rand_tensor(&mut r, &[3, 4]),
        ];
        check(ins.clone(), |t, v| {
            let m = t.modulate(v[0], v[1], v[2]);
            let g = t.mul_groups(m, v[2]);
            t.add_tiled(g, v[3])
        });
        check(ins.clone(), |t, v| {
            let c = t.concat_groups(&[v[1], v[0], v[2]], 2);
            let s = t.slice_groups(c, 5, 1, 3);
            t.slice_cols(s, 1, 2)
        });
        check(ins, |t, v| t.group_mean(v[0], 3, Some(vec![true, false, true])));
    }

    #[test]
    fn attention_grads() {
        let mut r = rng();
        let ins = vec![rand_tensor(&mut r, &[6, 4]), rand_tensor(&mut r, &[8, 4]), rand_tensor(&mut r, &[8, 4])];
        check(ins.clone(), |t, v| {
            let spec = AttnSpec { groups: 2, q_len: 3, kv_len: 4, heads: 2, causal: false, key_mask: None };
            t.attention(v[0], v[1], v[2], spec)
        });
        check(ins, |t, v| {
            let spec = AttnSpec {
                groups: 2,
                q_len: 3,
                kv_len: 4,
                heads: 2,
                causal: true,
                key_mask: Some(vec![true, false, true, true]),
            };
            t.attention(v[0], v[1], v[2], spec)
        });
    }

    #[test]
    fn fused_window_attention_matches_sliced() {
        let mut r = rng();
        let ins = vec![rand_tensor(&mut r, &[8, 13])];
        let spec = AttnSpec { groups: 2, q_len: 4, kv_len: 4, heads: 2, causal: true, key_mask: None };
        let s2 = spec.clone();
        check(ins.clone(), move |t, v| t.attention_cols([(v[0], 1), (v[0], 5), (v[0], 9)], 4, s2.clone()));
        let mut a = Tape::<f64>::new();
        let x = a.constant(ins[0].clone());
        let fused = a.attention_cols([(x, 1), (x, 5), (x, 9)], 4, spec.clone());
        let (q, k, v) = (a.slice_cols(x, 1, 4), a.slice_cols(x, 5, 4), a.slice_cols(x, 9, 4));
        let sliced = a.attention(q, k, v, spec);
        assert_eq!(a.value(fused).data, a.value(sliced).data);
    }

    #[test]
    fn conv_and_gather_grads() {
        let mut r = rng();
        let geom = ConvGeom { batch: 2, height: 5, width: 4, channels: 2, kernel: 3, stride: 2, pad: 1 };
        let ins = vec![
            rand_tensor(&mut r, &[2 * 5 * 4, 2]),
            rand_tensor(&mut r, &[geom.patch_len(), 3]),
            rand_tensor(&mut r, &[3, 3]),
        ];
        check(ins, move |t, v| {
            let cols = t.im2col(v[0], geom);
            let y = t.linear(cols, v[1], None);
            let e = t.gather(v[2], &[2, 0, 2]);
            let e = t.slice_cols(e, 0, 3);
            let pooled = t.group_mean(y, 6, None);
            let pooled = t.concat_groups(&[pooled, e], 1);
            t.gelu(pooled)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng();
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(&mut r, &[10, 8]));
        let k = tape.constant(rand_tensor(&mut r, &[10, 8]));
        let spec = AttnSpec { groups: 2, q_len: 5, kv_len: 5, heads: 2, causal: true, key_mask: None };
        let o = tape.attention(q, k, k, spec);
        let probs = tape.attention_probs(o).unwrap();
        for row in probs.chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let w = tape.param(Tensor::from_vec(&[2, 1], vec![0.5, -1.0]));
        let y = tape.linear(x, w, None);
        let l = tape.masked_mse(y, vec![0.0], vec![1.0]);
        let g = tape.backward(l);
        assert!(g.get(x).is_none());
        // y = -1.5, dl/dy = -3
        assert_eq!(g.get(w).unwrap(), &[-3.0, -6.0]);
    }
}
