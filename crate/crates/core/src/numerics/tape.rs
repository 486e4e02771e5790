//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Every operation appends one node holding its forward value. Gradients are
//! computed by [`Tape::backward`], which walks the nodes in reverse order and
//! returns the gradient of every named parameter leaf. Matrices are 2-D
//! row-major buffers; convolution inputs are `[C, H, W]`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::gemm::gemm;
use crate::numerics::params::{Gradients, ParamSet};
use crate::numerics::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Gemm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        a: Var,
        argmax: Vec<usize>,
    },
    Lstm {
        x: Var,
        h: Var,
        c: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        gates: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Gemm { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::Lstm { .. } => "lstm_cell",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Single-threaded recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    validate: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn two_d(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(format!("{what}: expected a matrix, got shape {shape:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that checks every produced value for NaN/Inf.
    pub fn with_validation() -> Self {
        Self {
            validate: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        if self.validate {
            if let Some(i) = value.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    name: op.name().to_string(),
                    detail: format!("non-finite output {} at index {i}", value[i]),
                });
            }
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// Records an untracked input.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant)
            .expect("tensor values are checked on construction")
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!("constant of shape {shape:?} with {} values", data.len())));
        }
        self.push(shape, data, Op::Constant)
    }

    /// Records a named parameter leaf. Each name is recorded once per tape,
    /// so a tape must only ever see one `ParamSet`.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(name.to_string()))?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn gemm_op(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = two_d(self.shape(a), "matmul lhs")?;
        let (br, bc) = two_d(self.shape(b), "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, 0.0);
        self.push(vec![m, n], out, Op::Gemm { a, b, ta, tb })
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, false, b, false)
    }

    /// `a · bᵀ` (the usual linear-layer layout with `b` as `[out, in]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, false, b, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm_op(a, true, b, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = two_d(self.shape(a), "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} values for {n} columns",
                self.value(row).len()
            )));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a))
    }

    /// Softmax along `axis`, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let out = softmax_along(self.value(a), &shape, axis);
        self.push(shape, out, Op::Softmax { a, axis })
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero parts"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| two_d(self.shape(p), "concat"))
            .collect::<Result<_>>()?;
        match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(Error::dim("concat rows: column counts differ"));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
                self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis })
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(Error::dim("concat cols: row counts differ"));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for (&p, d) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&self.value(p)[r * d.1..(r + 1) * d.1]);
                    }
                }
                self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis })
            }
            _ => Err(Error::dim(format!("concat axis {axis}"))),
        }
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = two_d(self.shape(a), "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::dim(format!("slice {start}..{end} of {cols} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * cols + start..r * cols + end]);
        }
        self.push(vec![rows, w], out, Op::SliceCols { a, start })
    }

    /// Selects rows of a matrix (repeats allowed); embedding lookup.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = two_d(self.shape(a), "gather_rows")?;
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Input(format!("row index {r} out of range for {n} rows")));
        }
        if rows.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&self.value(a)[r * cols..(r + 1) * cols]);
        }
        self.push(vec![rows.len(), cols], out, Op::GatherRows { a, rows: rows.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(format!("reshape {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = two_d(self.shape(a), "transpose")?;
        let out = transpose_buf(self.value(a), r, c);
        self.push(vec![c, r], out, Op::Transpose(a))
    }

    /// Cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel and optional `[C_out]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("conv2d input must be [C,H,W], got {s:?}"))),
        };
        let (c_out, kc, k) = match *self.shape(weight) {
            [o, c, kh, kw] if kh == kw => (o, c, kh),
            ref s => return Err(Error::dim(format!("conv2d kernel must be [O,C,k,k], got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::dim("conv2d bias length differs from output channels"));
            }
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Input(format!(
                "conv2d: {h}x{w} input with padding {pad} is smaller than a {k}x{k} kernel"
            )));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out,
            w_out,
        };
        let cols = im2col(self.value(input), &geom);
        let hw = h_out * w_out;
        let mut out = vec![0.0; c_out * hw];
        gemm(c_out, c_in * k * k, hw, self.value(weight), false, &cols, false, &mut out, 0.0);
        if let Some(b) = bias {
            let bv = self.value(b);
            for (o, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|x| *x += bv[o]);
            }
        }
        self.push(
            vec![c_out, h_out, w_out],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    /// Non-overlapping max pooling over `[C, H, W]` with a `ph × pw` window.
    pub fn max_pool(&mut self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let (c, h, w) = match *self.shape(a) {
            [c, h, w] => (c, h, w),
            ref s => return Err(Error::dim(format!("max_pool input must be [C,H,W], got {s:?}"))),
        };
        if ph == 0 || pw == 0 || h < ph || w < pw {
            return Err(Error::Input(format!("max_pool {ph}x{pw} on a {h}x{w} map")));
        }
        let (ho, wo) = (h / ph, w / pw);
        let x = self.value(a);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..ph {
                        for dj in 0..pw {
                            let idx = ch * h * w + (i * ph + di) * w + j * pw + dj;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.push(vec![c, ho, wo], out, Op::MaxPool { a, argmax })
    }

    /// One LSTM step over a batch of rows. `x: [B, d_in]`, `h, c: [B, d]`,
    /// `w_ih: [4d, d_in]`, `w_hh: [4d, d]`, `b: [4d]`, gate order i, f, g, o.
    /// Returns `[B, 2d]` holding `h'` in the first `d` columns and `c'` in
    /// the rest; split with [`Tape::lstm_cell`].
    fn lstm_fused(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        let (bsz, d_in) = two_d(self.shape(x), "lstm input")?;
        let (hb, d) = two_d(self.shape(h), "lstm hidden")?;
        if hb != bsz || self.shape(c) != self.shape(h) {
            return Err(Error::dim("lstm: batch or state shapes differ"));
        }
        if self.shape(w_ih) != [4 * d, d_in] || self.shape(w_hh) != [4 * d, d] || self.value(b).len() != 4 * d {
            return Err(Error::dim(format!(
                "lstm weights {:?}/{:?}/{:?} do not fit d_in={d_in}, d={d}",
                self.shape(w_ih),
                self.shape(w_hh),
                self.shape(b)
            )));
        }
        let mut gates = vec![0.0; bsz * 4 * d];
        gemm(bsz, d_in, 4 * d, self.value(x), false, self.value(w_ih), true, &mut gates, 0.0);
        gemm(bsz, d, 4 * d, self.value(h), false, self.value(w_hh), true, &mut gates, 1.0);
        let bv = self.value(b);
        let cv = self.value(c);
        let mut out = vec![0.0; bsz * 2 * d];
        for r in 0..bsz {
            let g = &mut gates[r * 4 * d..(r + 1) * 4 * d];
            for (gi, bias) in g.iter_mut().zip(bv) {
                *gi += bias;
            }
            for j in 0..d {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[d + j]);
                let g_g = g[2 * d + j].tanh();
                let o_g = sigmoid(g[3 * d + j]);
                g[j] = i_g;
                g[d + j] = f_g;
                g[2 * d + j] = g_g;
                g[3 * d + j] = o_g;
                let c_new = f_g * cv[r * d + j] + i_g * g_g;
                out[r * 2 * d + j] = o_g * c_new.tanh();
                out[r * 2 * d + d + j] = c_new;
            }
        }
        self.push(
            vec![bsz, 2 * d],
            out,
            Op::Lstm {
                x,
                h,
                c,
                w_ih,
                w_hh,
                b,
                gates,
            },
        )
    }

    /// One LSTM step; returns `(h', c')`, each `[B, d]`.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w_ih: Var, w_hh: Var, b: Var) -> Result<(Var, Var)> {
        let fused = self.lstm_fused(x, h, c, w_ih, w_hh, b)?;
        let d = self.shape(h)[1];
        let h_new = self.slice_cols(fused, 0, d)?;
        let c_new = self.slice_cols(fused, d, 2 * d)?;
        Ok((h_new, c_new))
    }

    /// Mean softmax cross-entropy of `[T, K]` logits against per-row
    /// targets; `None` rows are masked out.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (t, k) = two_d(self.shape(logits), "cross entropy logits")?;
        if targets.len() != t {
            return Err(Error::dim(format!("{} targets for {t} logit rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&y| y >= k) {
            return Err(Error::Input(format!("target class {bad} out of range for {k} classes")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross entropy with every row masked".into()));
        }
        let probs = softmax_along(self.value(logits), &[t, k], 1);
        let loss: f64 = targets
            .iter()
            .enumerate()
            .filter_map(|(r, y)| y.map(|y| -(probs[r * k + y].max(f64::MIN_POSITIVE)).ln()))
            .sum::<f64>()
            / count as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf
    /// recorded on this tape. The tape is left untouched, so calling this
    /// twice yields the same gradients again.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => out.insert(name.clone(), dy),
                Op::Gemm { a, b, ta, tb } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let sa = &self.nodes[a.0].shape;
                    let k = if *ta { sa[0] } else { sa[1] };
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA: op(A) = dY · op(B)ᵀ
                    {
                        let ga = acc(&mut grads, *a, m * k);
                        if *ta {
                            // A stored k×m: dA = op(B) · dYᵀ
                            gemm(k, n, m, bv, *tb, &dy, true, ga, 1.0);
                        } else {
                            gemm(m, n, k, &dy, false, bv, !*tb, ga, 1.0);
                        }
                    }
                    {
                        let gb = acc(&mut grads, *b, k * n);
                        if *tb {
                            // B stored n×k: dB = dYᵀ · op(A)
                            gemm(n, m, k, &dy, true, av, *ta, gb, 1.0);
                        } else {
                            gemm(k, m, n, av, !*ta, &dy, false, gb, 1.0);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy);
                    add_into(acc(&mut grads, *b, dy.len()), &dy);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut grads, *a, dy.len()), &dy);
                    let n = node.shape[1];
                    let gr = acc(&mut grads, *row, n);
                    for chunk in dy.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let ga = acc(&mut grads, *a, dy.len());
                        for i in 0..dy.len() {
                            ga[i] += dy[i] * bv[i];
                        }
                    }
                    let gb = acc(&mut grads, *b, dy.len());
                    for i in 0..dy.len() {
                        gb[i] += dy[i] * av[i];
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * s;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, dy.len());
                    for i in 0..dy.len() {
                        if x[i] > 0.0 {
                            ga[i] += dy[i];
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    let y = &node.value;
                    let (outer, len, inner) = axis_split(&node.shape, *axis);
                    let ga = acc(&mut grads, *a, dy.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |kk: usize| o * len * inner + kk * inner + i;
                            let dot: f64 = (0..len).map(|kk| dy[at(kk)] * y[at(kk)]).sum();
                            for kk in 0..len {
                                ga[at(kk)] += y[at(kk)] * (dy[at(kk)] - dot);
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let cols = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = (self.nodes[p.0].shape[0], self.nodes[p.0].shape[1]);
                        let gp = acc(&mut grads, *p, pr * pc);
                        if *axis == 0 {
                            add_into(gp, &dy[offset * cols..(offset + pr) * cols]);
                            offset += pr;
                        } else {
                            for r in 0..pr {
                                add_into(&mut gp[r * pc..(r + 1) * pc], &dy[r * cols + offset..r * cols + offset + pc]);
                            }
                            offset += pc;
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, w) = (node.shape[0], node.shape[1]);
                    let cols = self.nodes[a.0].shape[1];
                    let ga = acc(&mut grads, *a, rows * cols);
                    for r in 0..rows {
                        add_into(&mut ga[r * cols + start..r * cols + start + w], &dy[r * w..(r + 1) * w]);
                    }
                }
                Op::GatherRows { a, rows } => {
                    let cols = node.shape[1];
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, n);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * cols..(r + 1) * cols], &dy[i * cols..(i + 1) * cols]);
                    }
                }
                Op::Reshape(a) => add_into(acc(&mut grads, *a, dy.len()), &dy),
                Op::Transpose(a) => {
                    // node is c×r; dy transposed back to r×c
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let t = transpose_buf(&dy, c, r);
                    add_into(acc(&mut grads, *a, dy.len()), &t);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let hw = geom.h_out * geom.w_out;
                    let ckk = geom.c_in * geom.k * geom.k;
                    gemm(
                        geom.c_out,
                        hw,
                        ckk,
                        &dy,
                        false,
                        cols,
                        true,
                        acc(&mut grads, *weight, geom.c_out * ckk),
                        1.0,
                    );
                    if let Some(b) = bias {
                        let gb = acc(&mut grads, *b, geom.c_out);
                        for (o, chunk) in dy.chunks(hw).enumerate() {
                            gb[o] += chunk.iter().sum::<f64>();
                        }
                    }
                    let mut dcols = vec![0.0; ckk * hw];
                    gemm(ckk, geom.c_out, hw, &self.nodes[weight.0].value, true, &dy, false, &mut dcols, 0.0);
                    col2im_add(&dcols, geom, acc(&mut grads, *input, geom.c_in * geom.h * geom.w));
                }
                Op::MaxPool { a, argmax } => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, n);
                    for (g, &src) in dy.iter().zip(argmax) {
                        ga[src] += g;
                    }
                }
                Op::Lstm {
                    x,
                    h,
                    c,
                    w_ih,
                    w_hh,
                    b,
                    gates,
                } => {
                    let bsz = node.shape[0];
                    let d = node.shape[1] / 2;
                    let d_in = self.nodes[x.0].shape[1];
                    let c_prev = &self.nodes[c.0].value;
                    let mut dgates = vec![0.0; bsz * 4 * d];
                    {
                        let gc = acc(&mut grads, *c, bsz * d);
                        for r in 0..bsz {
                            let g = &gates[r * 4 * d..(r + 1) * 4 * d];
                            let dg = &mut dgates[r * 4 * d..(r + 1) * 4 * d];
                            for j in 0..d {
                                let (ig, fg, gg, og) = (g[j], g[d + j], g[2 * d + j], g[3 * d + j]);
                                let c_new = node.value[r * 2 * d + d + j];
                                let tc = c_new.tanh();
                                let dh = dy[r * 2 * d + j];
                                let dc = dy[r * 2 * d + d + j] + dh * og * (1.0 - tc * tc);
                                dg[j] = dc * gg * ig * (1.0 - ig);
                                dg[d + j] = dc * c_prev[r * d + j] * fg * (1.0 - fg);
                                dg[2 * d + j] = dc * ig * (1.0 - gg * gg);
                                dg[3 * d + j] = dh * tc * og * (1.0 - og);
                                gc[r * d + j] += dc * fg;
                            }
                        }
                    }
                    let xv = &self.nodes[x.0].value;
                    let hv = &self.nodes[h.0].value;
                    gemm(4 * d, bsz, d_in, &dgates, true, xv, false, acc(&mut grads, *w_ih, 4 * d * d_in), 1.0);
                    gemm(4 * d, bsz, d, &dgates, true, hv, false, acc(&mut grads, *w_hh, 4 * d * d), 1.0);
                    {
                        let gb = acc(&mut grads, *b, 4 * d);
                        for chunk in dgates.chunks(4 * d) {
                            add_into(gb, chunk);
                        }
                    }
                    let wih = &self.nodes[w_ih.0].value;
                    let whh = &self.nodes[w_hh.0].value;
                    gemm(bsz, 4 * d, d_in, &dgates, false, wih, false, acc(&mut grads, *x, bsz * d_in), 1.0);
                    gemm(bsz, 4 * d, d, &dgates, false, whh, false, acc(&mut grads, *h, bsz * d), 1.0);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let k = self.nodes[logits.0].shape[1];
                    let scale = dy[0] / *count as f64;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, y) in targets.iter().enumerate() {
                        if let Some(y) = y {
                            for kk in 0..k {
                                let onehot = if kk == *y { 1.0 } else { 0.0 };
                                gl[r * k + kk] += scale * (probs[r * k + kk] - onehot);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, n);
                    ga.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and accumulates the result into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let g = self.backward(loss)?;
        params.accumulate(&g)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |kk: usize| o * len * inner + kk * inner + i;
            let max = (0..len).map(|kk| x[at(kk)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for kk in 0..len {
                let e = (x[at(kk)] - max).exp();
                out[at(kk)] = e;
                total += e;
            }
            for kk in 0..len {
                out[at(kk)] /= total;
            }
        }
    }
    out
}

fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * hw];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dst[oi * g.w_out + oj] = x[c * g.h * g.w + ii as usize * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..g.h_out {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dx[c * g.h * g.w + ii as usize * g.w + jj as usize] += src[oi * g.w_out + oj];
                    }
                }
            }
        }
    }
}
