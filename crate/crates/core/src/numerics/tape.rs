//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs to run its adjoint. [`Tape::backward`] walks the nodes in reverse,
//! accumulating gradients for every node that (transitively) depends on a
//! trainable parameter or a differentiable input.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel, stride and padding for the 1-D convolution family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad_left: (kernel - 1) / 2,
            pad_right: kernel / 2,
        }
    }

    pub fn strided(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_left: pad,
            pad_right: pad,
        }
    }

    /// Output length of a forward convolution over `t` frames.
    pub fn conv_out_len(&self, t: usize) -> Option<usize> {
        let padded = t + self.pad_left + self.pad_right;
        if padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    /// Output length of a transposed convolution over `t` frames.
    pub fn transpose_out_len(&self, t: usize) -> Option<usize> {
        let full = (t.checked_sub(1)?) * self.stride + self.kernel;
        full.checked_sub(self.pad_left + self.pad_right)
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Vec<f32>,
        t_in: usize,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu(Var),
    Gelu(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f32),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatSeq(Var, Var),
    SliceSeq {
        x: Var,
        start: usize,
    },
    TimeResample {
        x: Var,
        taps: Vec<(usize, usize, f32)>,
    },
    StraightThrough(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        total_weight: f32,
    },
    L1Mean(Var, Var),
    SqDiffMean(Var, Var),
    WeightedSum(Vec<(Var, f32)>),
    DotConst(Var, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Affine { .. } => "affine",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::Attention { .. } => "attention",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::Embedding { .. } => "embedding",
            Op::ConcatSeq(..) => "concat_seq",
            Op::SliceSeq { .. } => "slice_seq",
            Op::TimeResample { .. } => "time_resample",
            Op::StraightThrough(_) => "straight_through",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::L1Mean(..) => "l1_mean",
            Op::SqDiffMean(..) => "sq_diff_mean",
            Op::WeightedSum(_) => "weighted_sum",
            Op::DotConst(..) => "dot_const",
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    per_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
}

impl Grads {
    /// Gradient with respect to a node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .get(name)
            .and_then(|&i| self.per_node[i].as_ref())
    }

    /// Parameter gradients keyed by name; parameters that never influenced the
    /// loss get a zero tensor of matching shape.
    pub fn into_param_grads(mut self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, idx) in &self.params {
            if let Some(g) = self.per_node[*idx].take() {
                out.insert(name.clone(), g);
            } else if let Some(p) = store.get(name) {
                if store.is_trainable(name) {
                    out.insert(name.clone(), Tensor::zeros(p.shape()));
                }
            }
        }
        out
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
    check_finite: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op finiteness check (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite value produced by {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (gradients are available through [`Grads::wrt`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrow a named parameter from the store. Repeated calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter `{name}`")))?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param,
            needs_grad: store.is_trainable(name),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x · w + b` over the last axis; `w` is `[in, out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(
                "affine",
                format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * dout];
        gemm(
            rows,
            din,
            dout,
            xv.data(),
            din,
            1,
            wv.data(),
            dout,
            1,
            &mut out,
            dout,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape(
                    "affine",
                    format!("bias {:?} for width {dout}", bv.shape()),
                ));
            }
            for r in out.chunks_mut(dout) {
                for (o, &bb) in r.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, needs)
    }

    /// 1-D convolution over `[B, T, Cin]` with weight `[kernel * Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [bsz, t_in, cin] = dims3("conv1d", xv)?;
        if wv.shape().len() != 2 || wv.shape()[0] != spec.kernel * cin {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "weight {:?} for kernel {} and {} input channels",
                    wv.shape(),
                    spec.kernel,
                    cin
                ),
            ));
        }
        let cout = wv.shape()[1];
        let t_out = spec.conv_out_len(t_in).ok_or(Error::InsufficientLength {
            needed: spec.kernel,
            got: t_in + spec.pad_left + spec.pad_right,
        })?;
        let cols = gather_windows(xv.data(), bsz, t_in, cin, t_out, spec);
        let kc = spec.kernel * cin;
        let mut out = vec![0.0; bsz * t_out * cout];
        gemm(
            bsz * t_out,
            kc,
            cout,
            &cols,
            kc,
            1,
            wv.data(),
            cout,
            1,
            &mut out,
            cout,
            false,
        );
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b), cout, "conv1d")?;
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let keep = if self.needs(w) { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[bsz, t_out, cout], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols: keep,
                t_in,
            },
            needs,
        )
    }

    /// Transposed 1-D convolution over `[B, T, Cin]` with weight `[Cin, kernel * Cout]`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [bsz, t_in, cin] = dims3("conv_transpose1d", xv)?;
        if wv.shape().len() != 2 || wv.shape()[0] != cin || wv.shape()[1] % spec.kernel != 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("weight {:?} for {} input channels", wv.shape(), cin),
            ));
        }
        let kcout = wv.shape()[1];
        let cout = kcout / spec.kernel;
        let t_out = spec
            .transpose_out_len(t_in)
            .ok_or(Error::InsufficientLength {
                needed: 1,
                got: t_in,
            })?;
        let mut cols = vec![0.0; bsz * t_in * kcout];
        gemm(
            bsz * t_in,
            cin,
            kcout,
            xv.data(),
            cin,
            1,
            wv.data(),
            kcout,
            1,
            &mut cols,
            kcout,
            false,
        );
        let mut out = vec![0.0; bsz * t_out * cout];
        scatter_windows(&cols, &mut out, bsz, t_out, cout, t_in, spec);
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b), cout, "conv_transpose1d")?;
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::new(&[bsz, t_out, cout], out)?,
            Op::ConvTranspose1d { x, w, b, spec },
            needs,
        )
    }

    /// Bidirectional scaled dot-product attention over `[B, T, D]` projections,
    /// split into `heads` equal slices of the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [bsz, t, d] = dims3("attention", qv)?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; bsz * heads * t * t];
        let mut out = vec![0.0; bsz * t * d];
        for b in 0..bsz {
            for h in 0..heads {
                let off = b * t * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                gemm(
                    t,
                    dh,
                    t,
                    &qv.data()[off..],
                    d,
                    1,
                    &kv.data()[off..],
                    1,
                    d,
                    p,
                    t,
                    false,
                );
                for row in p.chunks_mut(t) {
                    softmax_in_place(row, scale);
                }
                gemm(
                    t,
                    t,
                    dh,
                    p,
                    t,
                    1,
                    &vv.data()[off..],
                    d,
                    1,
                    &mut out[off..],
                    d,
                    false,
                );
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Tensor::new(&[bsz, t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu(v).0);
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (xs, ys) = (xv.shape(), yv.shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", xs, ys),
            ));
        }
        let mut out = xv.clone();
        let n = yv.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(yv.data()) {
                *o += v;
            }
        }
        let needs = self.needs(x) || self.needs(y);
        self.push(out, Op::AddBroadcast(x, y), needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Row lookup into `table` (`[V, D]`). The output has shape `batch_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if batch_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} ids for batch shape {:?}", ids.len(), batch_shape),
            ));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside vocabulary of {vocab}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let mut shape = batch_shape.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Concatenate `[B, Ta, D]` and `[B, Tb, D]` along the sequence axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [ba, ta, da] = dims3("concat_seq", av)?;
        let [bb, tb, db] = dims3("concat_seq", bv)?;
        if ba != bb || da != db {
            return Err(Error::shape(
                "concat_seq",
                format!("{:?} ++ {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..ba {
            out.extend_from_slice(&av.data()[i * ta * da..(i + 1) * ta * da]);
            out.extend_from_slice(&bv.data()[i * tb * db..(i + 1) * tb * db]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(&[ba, ta + tb, da], out)?,
            Op::ConcatSeq(a, b),
            needs,
        )
    }

    /// Frames `start..start+len` of a `[B, T, D]` tensor.
    pub fn slice_seq(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, t, d] = dims3("slice_seq", xv)?;
        if start + len > t {
            return Err(Error::shape(
                "slice_seq",
                format!("frames {start}..{} of {t}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(b * len * d);
        for i in 0..b {
            out.extend_from_slice(&xv.data()[(i * t + start) * d..(i * t + start + len) * d]);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(&[b, len, d], out)?,
            Op::SliceSeq { x, start },
            needs,
        )
    }

    /// Linear interpolation of a `[B, T, C]` tensor to exactly `t_out` frames
    /// (half-pixel centres, clamped at the ends).
    pub fn time_resample(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, t_in, c] = dims3("time_resample", xv)?;
        if t_in == 0 || t_out == 0 {
            return Err(Error::shape("time_resample", "empty sequence"));
        }
        let taps = resample_taps(t_in, t_out);
        let mut out = vec![0.0; b * t_out * c];
        for bi in 0..b {
            for (to, &(i0, i1, w)) in taps.iter().enumerate() {
                let dst = &mut out[(bi * t_out + to) * c..][..c];
                let s0 = &xv.data()[(bi * t_in + i0) * c..][..c];
                let s1 = &xv.data()[(bi * t_in + i1) * c..][..c];
                for j in 0..c {
                    dst[j] = s0[j] * (1.0 - w) + s1[j] * w;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(&[b, t_out, c], out)?,
            Op::TimeResample { x, taps },
            needs,
        )
    }

    /// Forward value `quantized`, backward identity into `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Result<Var> {
        if self.value(z).shape() != quantized.shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.value(z).shape(), quantized.shape()),
            ));
        }
        let needs = self.needs(z);
        self.push(quantized, Op::StraightThrough(z), needs)
    }

    /// Weighted mean of per-row negative log-likelihoods:
    /// `Σ w_i · −log softmax(logits_i)[target_i] / Σ w_i`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = (lv.rows(), lv.last_dim());
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "{n} rows, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidInput(format!(
                "target {bad} outside [0, {k})"
            )));
        }
        let total_weight: f32 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::UndefinedMean(
                "no positions contribute to the cross-entropy".into(),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &mut probs[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            let log_z = max as f64 + sum.ln();
            if weights[i] != 0.0 {
                loss += weights[i] as f64 * (log_z - row[targets[i]] as f64);
            }
            for v in row.iter_mut() {
                *v = ((*v as f64 - log_z).exp()) as f32;
            }
        }
        let value = (loss / total_weight as f64) as f32;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            needs,
        )
    }

    /// Mean absolute difference over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "l1_mean",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        let value = (s / av.len() as f64) as f32;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(value), Op::L1Mean(a, b), needs)
    }

    /// Mean squared difference over all elements.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "sq_diff_mean",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        let value = (s / av.len() as f64) as f32;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(value), Op::SqDiffMean(a, b), needs)
    }

    /// `Σ c_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut value = 0.0f64;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {:?} is not a scalar", t.shape()),
                ));
            }
            value += c as f64 * t.item() as f64;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(
            Tensor::scalar(value as f32),
            Op::WeightedSum(terms.to_vec()),
            needs,
        )
    }

    /// `Σ x ⊙ c` for a constant tensor `c` of the same size.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(Error::shape(
                "dot_const",
                format!("{:?} · {:?}", xv.shape(), c.shape()),
            ));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s as f32), Op::DotConst(x, c), needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(n, v)| (n.clone(), v.0)).collect();
        Ok(Grads {
            per_node: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn node_backward(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(
                        rows,
                        dout,
                        din,
                        gd,
                        dout,
                        1,
                        wv.data(),
                        1,
                        dout,
                        &mut dx,
                        din,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(
                        din,
                        rows,
                        dout,
                        xv.data(),
                        1,
                        din,
                        gd,
                        dout,
                        1,
                        &mut dw,
                        dout,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = column_sums(gd, dout);
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(&shape, db)?);
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols,
                t_in,
            } => {
                let wv = self.value(*w);
                let [bsz, t_out, cout] = dims3("conv1d", g)?;
                let kc = wv.shape()[0];
                let cin = kc / spec.kernel;
                if self.needs(*w) {
                    let mut dw = vec![0.0; kc * cout];
                    gemm(
                        kc,
                        bsz * t_out,
                        cout,
                        cols,
                        1,
                        kc,
                        gd,
                        cout,
                        1,
                        &mut dw,
                        cout,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = column_sums(gd, cout);
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(&shape, db)?);
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; bsz * t_out * kc];
                    gemm(
                        bsz * t_out,
                        cout,
                        kc,
                        gd,
                        cout,
                        1,
                        wv.data(),
                        1,
                        cout,
                        &mut dcols,
                        kc,
                        false,
                    );
                    let mut dx = vec![0.0; bsz * t_in * cin];
                    scatter_windows(&dcols, &mut dx, bsz, *t_in, cin, t_out, *spec);
                    self.accumulate(grads, *x, Tensor::new(&[bsz, *t_in, cin], dx)?);
                }
            }
            Op::ConvTranspose1d { x, w, b, spec } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [bsz, t_in, cin] = dims3("conv_transpose1d", xv)?;
                let [_, t_out, cout] = dims3("conv_transpose1d", g)?;
                let kcout = wv.shape()[1];
                let dcols = gather_windows(gd, bsz, t_out, cout, t_in, *spec);
                if self.needs(*x) {
                    let mut dx = vec![0.0; bsz * t_in * cin];
                    gemm(
                        bsz * t_in,
                        kcout,
                        cin,
                        &dcols,
                        kcout,
                        1,
                        wv.data(),
                        1,
                        kcout,
                        &mut dx,
                        cin,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; cin * kcout];
                    gemm(
                        cin,
                        bsz * t_in,
                        kcout,
                        xv.data(),
                        1,
                        cin,
                        &dcols,
                        kcout,
                        1,
                        &mut dw,
                        kcout,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = column_sums(gd, cout);
                        let shape = self.value(*b).shape().to_vec();
                        self.accumulate(grads, *b, Tensor::new(&shape, db)?);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let [bsz, t, d] = dims3("attention", qv)?;
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let mut dq = vec![0.0; bsz * t * d];
                let mut dk = vec![0.0; bsz * t * d];
                let mut dv = vec![0.0; bsz * t * d];
                let mut dp = vec![0.0; t * t];
                for b in 0..bsz {
                    for h in 0..*heads {
                        let off = b * t * d + h * dh;
                        let p = &probs[(b * heads + h) * t * t..][..t * t];
                        // dV = Pᵀ dO
                        gemm(
                            t,
                            t,
                            dh,
                            p,
                            1,
                            t,
                            &gd[off..],
                            d,
                            1,
                            &mut dv[off..],
                            d,
                            false,
                        );
                        // dP = dO Vᵀ
                        gemm(
                            t,
                            dh,
                            t,
                            &gd[off..],
                            d,
                            1,
                            &vv.data()[off..],
                            1,
                            d,
                            &mut dp,
                            t,
                            false,
                        );
                        for r in 0..t {
                            let prow = &p[r * t..(r + 1) * t];
                            let drow = &mut dp[r * t..(r + 1) * t];
                            let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                                *dv_ = pv * (*dv_ - dot) * scale;
                            }
                        }
                        // dQ = dS K, dK = dSᵀ Q
                        gemm(
                            t,
                            t,
                            dh,
                            &dp,
                            t,
                            1,
                            &kv.data()[off..],
                            d,
                            1,
                            &mut dq[off..],
                            d,
                            false,
                        );
                        gemm(
                            t,
                            t,
                            dh,
                            &dp,
                            1,
                            t,
                            &qv.data()[off..],
                            d,
                            1,
                            &mut dk[off..],
                            d,
                            false,
                        );
                    }
                }
                let shape = qv.shape().to_vec();
                self.accumulate(grads, *q, Tensor::new(&shape, dq)?);
                self.accumulate(grads, *k, Tensor::new(&shape, dk)?);
                self.accumulate(grads, *v, Tensor::new(&shape, dv)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let d = gv.len();
                let rows = rstd.len();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut dbt = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            dbt[j] += gd[r * d + j];
                        }
                    }
                    let gs = gv.shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(&gs, dg)?);
                    let bs = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(&bs, dbt)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv.data()[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f32;
                        m2 /= d as f32;
                        for j in 0..d {
                            let dxh = gd[r * d + j] * gv.data()[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(&shape, dx)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx =
                    Tensor::from_fn(xv.shape(), |j| if xv.data()[j] > 0.0 { gd[j] } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = Tensor::from_fn(xv.shape(), |j| gd[j] * gelu(xv.data()[j]).1);
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(x, y) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*y) {
                    let yv = self.value(*y);
                    let n = yv.len();
                    let mut dy = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (o, &v) in dy.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *y, Tensor::new(yv.shape(), dy)?);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = dt.row_mut(id);
                    for (o, &v) in dst.iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::ConcatSeq(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let [bsz, ta, d] = dims3("concat_seq", av)?;
                let tb = bv.shape()[1];
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..bsz {
                    let base = i * (ta + tb) * d;
                    da.extend_from_slice(&gd[base..base + ta * d]);
                    db.extend_from_slice(&gd[base + ta * d..base + (ta + tb) * d]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::SliceSeq { x, start } => {
                let xv = self.value(*x);
                let [bsz, t, d] = dims3("slice_seq", xv)?;
                let len = g.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                for i in 0..bsz {
                    dx[(i * t + start) * d..(i * t + start + len) * d]
                        .copy_from_slice(&gd[i * len * d..(i + 1) * len * d]);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::TimeResample { x, taps } => {
                let xv = self.value(*x);
                let [bsz, t_in, c] = dims3("time_resample", xv)?;
                let t_out = taps.len();
                let mut dx = vec![0.0; xv.len()];
                for bi in 0..bsz {
                    for (to, &(i0, i1, w)) in taps.iter().enumerate() {
                        let src = &gd[(bi * t_out + to) * c..][..c];
                        for j in 0..c {
                            dx[(bi * t_in + i0) * c + j] += src[j] * (1.0 - w);
                            dx[(bi * t_in + i1) * c + j] += src[j] * w;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::StraightThrough(z) => {
                self.accumulate(grads, *z, g.clone());
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let lv = self.value(*logits);
                let k = lv.last_dim();
                let up = gd[0] / total_weight;
                let mut dl = vec![0.0; lv.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = up * w;
                    for j in 0..k {
                        dl[r * k + j] = s * probs[r * k + j];
                    }
                    dl[r * k + t] -= s;
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), dl)?);
            }
            Op::L1Mean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = gd[0] / av.len() as f32;
                let da = Tensor::from_fn(av.shape(), |j| {
                    let diff = av.data()[j] - bv.data()[j];
                    if diff > 0.0 {
                        s
                    } else if diff < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SqDiffMean(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let s = 2.0 * gd[0] / av.len() as f32;
                let da = Tensor::from_fn(av.shape(), |j| s * (av.data()[j] - bv.data()[j]));
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, Tensor::scalar(gd[0] * c));
                }
            }
            Op::DotConst(x, c) => {
                let shape = self.value(*x).shape().to_vec();
                let dx = Tensor::from_fn(&shape, |j| gd[0] * c.data()[j]);
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

fn dims3(node: &str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[a, b, c] => Ok([a, b, c]),
        s => Err(Error::shape(node, format!("expected [B, T, C], got {s:?}"))),
    }
}

fn add_row_bias(out: &mut [f32], bias: &Tensor, width: usize, node: &str) -> Result<()> {
    if bias.len() != width {
        return Err(Error::shape(
            node,
            format!("bias {:?} for width {width}", bias.shape()),
        ));
    }
    for r in out.chunks_mut(width) {
        for (o, &b) in r.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(())
}

fn column_sums(data: &[f32], width: usize) -> Vec<f32> {
    let mut out = vec![0.0; width];
    for r in data.chunks(width) {
        for (o, &v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

/// Gather windows `src[b, t·stride + j − pad_left, :]` into rows of
/// `[B · t_small, kernel · C]`; out-of-range frames read as zero.
fn gather_windows(
    src: &[f32],
    bsz: usize,
    t_big: usize,
    c: usize,
    t_small: usize,
    spec: ConvSpec,
) -> Vec<f32> {
    let kc = spec.kernel * c;
    let mut cols = vec![0.0; bsz * t_small * kc];
    for b in 0..bsz {
        for t in 0..t_small {
            let row = &mut cols[(b * t_small + t) * kc..][..kc];
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j) as isize - spec.pad_left as isize;
                if pos < 0 || pos as usize >= t_big {
                    continue;
                }
                let s = &src[(b * t_big + pos as usize) * c..][..c];
                row[j * c..(j + 1) * c].copy_from_slice(s);
            }
        }
    }
    cols
}

/// Adjoint of [`gather_windows`]: add each window row back onto `dst`.
fn scatter_windows(
    cols: &[f32],
    dst: &mut [f32],
    bsz: usize,
    t_big: usize,
    c: usize,
    t_small: usize,
    spec: ConvSpec,
) {
    let kc = spec.kernel * c;
    for b in 0..bsz {
        for t in 0..t_small {
            let row = &cols[(b * t_small + t) * kc..][..kc];
            for j in 0..spec.kernel {
                let pos = (t * spec.stride + j) as isize - spec.pad_left as isize;
                if pos < 0 || pos as usize >= t_big {
                    continue;
                }
                let d = &mut dst[(b * t_big + pos as usize) * c..][..c];
                for (o, &v) in d.iter_mut().zip(&row[j * c..(j + 1) * c]) {
                    *o += v;
                }
            }
        }
    }
}

fn resample_taps(t_in: usize, t_out: usize) -> Vec<(usize, usize, f32)> {
    let ratio = t_in as f64 / t_out as f64;
    (0..t_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (t_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(t_in - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Softmax of `row · scale` in place.
pub(crate) fn softmax_in_place(row: &mut [f32], scale: f32) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) * scale;
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}
