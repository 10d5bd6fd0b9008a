//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Graph`] records every operation as a node appended to a `Vec`;
//! operations can only reference nodes created earlier, so the reverse of
//! the tape order is already a valid topological order for the backward
//! sweep. [`Var`] is a copyable handle (an index) into the tape.
//!
//! Gradients are accumulated by summation: when a node feeds several
//! consumers, each consumer adds its contribution. Nodes that cannot
//! influence any trainable leaf carry `needs_grad = false` and are skipped
//! entirely during the backward sweep.
//!
//! Numeric contracts: callers must feed finite inputs (checked at
//! [`Graph::input`]), and guard domains themselves where an operation has
//! one (`div` by zero, `ln` of non-positives — pair with [`Graph::clamp`]).
//! Training loops check the final loss for finiteness and surface
//! [`Error::NonFinite`] instead of propagating NaN silently.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// `sqrt(2 / pi)`, used by the tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Variance floor inside layer and instance normalization.
const NORM_EPS: f64 = 1e-5;

/// Recorded operation. Variants hold the handles of their inputs; any
/// extra payload is small enough to clone during the backward sweep.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    /// `x + r` with `x: [m, n]`, `r: [1, n]` broadcast over rows.
    AddRow(Var, Var),
    /// `x[i, j] * s[i]` with `x: [m, n]`, `s: [m, 1]`.
    ScaleRows(Var, Var),
    ScalarMul(Var, f64),
    ScalarAdd(Var),
    Neg(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Ln(Var),
    Abs(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    InstanceNorm { x: Var, gain: Var, bias: Var },
    Conv3x3 { x: Var, weight: Var, bias: Var },
    Embed { weight: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, end: usize },
    Reshape(Var),
    RowMean(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of operations plus the values and gradients at every node.
pub struct Graph {
    nodes: Vec<Node>,
    /// Parameters staged into this graph, by name, in staging order.
    staged: IndexMap<String, Var>,
    /// Set once [`Graph::backward`] has run; a second sweep would
    /// double-count gradients, so it is rejected.
    swept: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An empty tape.
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256), staged: IndexMap::new(), swept: false }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Stages external data as a non-trainable leaf. Rejects non-finite
    /// entries so that NaNs cannot enter the tape silently.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Input("graph input contains non-finite values".into()));
        }
        Ok(self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false))
    }

    /// Stages trusted internal data (masks, targets, constants built by
    /// this crate) as a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        debug_assert!(t.is_finite(), "constant() fed non-finite data");
        let Tensor { shape, data } = t;
        self.push(data, shape, Op::Leaf, false)
    }

    /// A `[1, 1]` constant.
    pub fn scalar(&mut self, v: f64) -> Var {
        debug_assert!(v.is_finite(), "scalar() fed non-finite value");
        self.push(vec![v], vec![1, 1], Op::Leaf, false)
    }

    /// Stages data as a gradient-tracked leaf that is not a named
    /// parameter. Used by tests and probes that differentiate with
    /// respect to an input.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::Input("graph leaf contains non-finite values".into()));
        }
        Ok(self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true))
    }

    /// Stages the named parameter from `store`, or returns the existing
    /// handle if it was staged before — each parameter appears in the
    /// tape at most once, so gradient accumulation across reuses is
    /// automatic.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.staged.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.data().to_vec(), p.value.shape().to_vec(), Op::Leaf, true);
        self.staged.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names and handles of all staged parameters, in staging order.
    pub fn staged_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.staged.iter().map(|(n, &v)| (n.as_str(), v))
    }

    /// Value buffer at `v`.
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Shape at `v`.
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1, "item() on non-scalar node");
        self.nodes[v.0].data[0]
    }

    /// Copies the value at `v` out as a [`Tensor`].
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("node shape/data consistent")
    }

    /// Gradient buffer at `v`, if the backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        debug_assert_eq!(s.len(), 2);
        (s[0], s[1])
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::Contract(format!("{op}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ----- binary operations -------------------------------------------

    /// Matrix product `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.require_2d("matmul", a)?;
        let (kb, n) = self.require_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), needs))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("transpose", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![n, m], Op::Transpose(a), needs))
    }

    fn ewise(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: opname,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, op, needs))
    }

    /// Element-wise sum of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Element-wise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise quotient `a / b`. The caller guarantees `b` is
    /// bounded away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Element-wise minimum. At ties the gradient flows to `a`.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("min_elem", a, b, f64::min, Op::MinElem(a, b))
    }

    /// Element-wise maximum. At ties the gradient flows to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise("max_elem", a, b, f64::max, Op::MaxElem(a, b))
    }

    /// Adds a `[1, n]` row vector to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.require_2d("add_row", x)?;
        let (rm, rn) = self.require_2d("add_row", row)?;
        if rm != 1 || rn != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let mut out = self.nodes[x.0].data.clone();
        let r = &self.nodes[row.0].data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(out, vec![m, n], Op::AddRow(x, row), needs))
    }

    /// Scales row `i` of a `[m, n]` matrix by entry `i` of a `[m, 1]`
    /// column vector.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.require_2d("scale_rows", x)?;
        let (sm, sn) = self.require_2d("scale_rows", s)?;
        if sm != m || sn != 1 {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[s.0].shape.clone(),
            });
        }
        let mut out = self.nodes[x.0].data.clone();
        let sv = &self.nodes[s.0].data;
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= sv[i];
            }
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(out, vec![m, n], Op::ScaleRows(x, s), needs))
    }

    // ----- unary operations --------------------------------------------

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a);
        self.push(out, shape, op, needs)
    }

    /// Multiplies every element by the constant `c`.
    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::ScalarMul(a, c))
    }

    /// Adds the constant `c` to every element.
    pub fn scalar_add(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::ScalarAdd(a))
    }

    /// Element-wise negation.
    pub fn neg(&mut self, a: Var) -> Var {
        self.map(a, |x| -x, Op::Neg(a))
    }

    /// Rectified linear unit.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    /// Logistic sigmoid, computed in the numerically stable split form.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Natural logarithm. The caller guarantees strictly positive inputs;
    /// pair with [`Graph::clamp`] when the input can reach zero.
    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    /// Element-wise absolute value. The subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// Element-wise power with a constant exponent. For non-integer `p`
    /// the caller guarantees non-negative inputs.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        self.map(a, |x| x.powf(p), Op::PowConst(a, p))
    }

    /// Clamps into `[lo, hi]`. Gradient passes through strictly inside
    /// the interval and is zero outside and at the boundary.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        debug_assert!(lo < hi);
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ----- structured operations ---------------------------------------

    /// Row-wise softmax of a matrix, computed with the max-shift for
    /// numerical stability.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("softmax_rows", a)?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![m, n], Op::SoftmaxRows(a), needs))
    }

    /// Layer normalization over the last dimension of a `[m, n]` matrix
    /// with per-column gain and bias (`[1, n]` each): every row is
    /// standardized to zero mean and unit variance (population variance,
    /// floored at `1e-5`) and then rescaled.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.require_2d("layer_norm", x)?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "layer_norm: normalized dimension must be >= 2, got {n}"
            )));
        }
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let (vm, vn) = self.require_2d("layer_norm", v)?;
            if vm != 1 || vn != n {
                return Err(Error::Contract(format!(
                    "layer_norm: {what} must be [1, {n}], got {:?}",
                    self.nodes[v.0].shape
                )));
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let (mean, inv_std) = row_moments(row);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, vec![m, n], Op::LayerNorm { x, gain, bias }, needs))
    }

    /// Instance normalization of a `[c, h, w]` feature map: each channel
    /// is standardized over its `h * w` positions and rescaled by a
    /// per-channel gain and bias (`[1, c]` each).
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Contract(format!(
                "instance_norm: expected [c, h, w], got shape {s:?}"
            )));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        if hw < 2 {
            return Err(Error::Contract(format!(
                "instance_norm: spatial size must be >= 2, got {hw}"
            )));
        }
        for (v, what) in [(gain, "gain"), (bias, "bias")] {
            let (vm, vn) = self.require_2d("instance_norm", v)?;
            if vm != 1 || vn != c {
                return Err(Error::Contract(format!(
                    "instance_norm: {what} must be [1, {c}], got {:?}",
                    self.nodes[v.0].shape
                )));
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            let (mean, inv_std) = row_moments(plane);
            let oplane = &mut out[ch * hw..(ch + 1) * hw];
            for j in 0..hw {
                oplane[j] = g[ch] * ((plane[j] - mean) * inv_std) + b[ch];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, s, Op::InstanceNorm { x, gain, bias }, needs))
    }

    /// 3x3 convolution with zero padding and stride 1 over a `[c_in, h, w]`
    /// map: `weight` is `[c_out, c_in, 3, 3]`, `bias` is `[1, c_out]`,
    /// output is `[c_out, h, w]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[weight.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Contract(format!("conv3x3: input must be [c, h, w], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[0] {
            return Err(Error::Shape { op: "conv3x3", lhs: xs, rhs: ws });
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let cout = ws[0];
        let (bm, bn) = self.require_2d("conv3x3", bias)?;
        if bm != 1 || bn != cout {
            return Err(Error::Contract(format!(
                "conv3x3: bias must be [1, {cout}], got {:?}",
                self.nodes[bias.0].shape
            )));
        }
        let src = &self.nodes[x.0].data;
        let wt = &self.nodes[weight.0].data;
        let bs = &self.nodes[bias.0].data;
        let mut out = vec![0.0; cout * h * w];
        conv3x3_forward(src, wt, bs, cin, cout, h, w, &mut out);
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, vec![cout, h, w], Op::Conv3x3 { x, weight, bias }, needs))
    }

    /// Gathers rows of an embedding table: `weight` is `[v, d]`, output
    /// row `i` is `weight[ids[i], :]`.
    pub fn embed(&mut self, weight: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.require_2d("embed", weight)?;
        if ids.is_empty() {
            return Err(Error::Contract("embed: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("embed: id {bad} out of range for table of {v}")));
        }
        let src = &self.nodes[weight.0].data;
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(weight);
        Ok(self.push(out, vec![ids.len(), d], Op::Embed { weight, ids: ids.to_vec() }, needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty part list".into()));
        }
        let (_, n) = self.require_2d("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.require_2d("concat_rows", p)?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![rows, n], Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Copies the row range `start..end` out of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.require_2d("slice_rows", x)?;
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "slice_rows: range {start}..{end} invalid for {m} rows"
            )));
        }
        let out = self.nodes[x.0].data[start * n..end * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(out, vec![end - start, n], Op::SliceRows { x, start, end }, needs))
    }

    /// Reinterprets the buffer under a new shape with the same element
    /// count. Used to move between matrix and `[c, h, w]` layouts.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.nodes[x.0].data.len() {
            return Err(Error::Contract(format!(
                "reshape: cannot view {} elements as {shape:?}",
                self.nodes[x.0].data.len()
            )));
        }
        let out = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), needs))
    }

    /// Mean over each row of a `[m, n]` matrix, producing `[m, 1]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.require_2d("row_mean", x)?;
        let src = &self.nodes[x.0].data;
        let out: Vec<f64> =
            (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let needs = self.needs(x);
        Ok(self.push(out, vec![m, 1], Op::RowMean(x), needs))
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![s], vec![1, 1], Op::Sum(x), needs)
    }

    /// Mean of all elements, as a `[1, 1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        self.push(vec![s / n as f64], vec![1, 1], Op::Mean(x), needs)
    }

    // ----- backward ------------------------------------------------------

    /// Runs the backward sweep from a scalar loss, filling gradient
    /// buffers at every gradient-tracked node. May be called once per
    /// graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.swept {
            return Err(Error::Contract(
                "backward called twice on the same graph; gradients would double-count".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.swept = true;
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any tracked leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let contribs = self.backward_op(i);
            for (parent, contrib) in contribs {
                self.accumulate(parent, &contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Computes this node's gradient contributions to each of its
    /// parents. Contributions are returned rather than written in place
    /// so that a parent appearing twice (e.g. `mul(x, x)`) accumulates
    /// correctly.
    fn backward_op(&self, i: usize) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_deref().expect("caller checked grad presence");
        let y = &node.data;
        let dat = |v: Var| -> &[f64] { &self.nodes[v.0].data };
        match node.op.clone() {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                let (av, bv) = (dat(a), dat(b));
                // dA = G . B^T
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + kk] = acc;
                    }
                }
                // dB = A^T . G
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = av[i * k + kk];
                        if aik != 0.0 {
                            let dbrow = &mut db[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dbrow[j] += aik * grow[j];
                            }
                        }
                    }
                }
                vec![(a, da), (b, db)]
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(a);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                vec![(a, da)]
            }
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(dat(b)).map(|(&gi, &bi)| gi * bi).collect();
                let db = g.iter().zip(dat(a)).map(|(&gi, &ai)| gi * ai).collect();
                vec![(a, da), (b, db)]
            }
            Op::Div(a, b) => {
                let bv = dat(b);
                let da = g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect();
                let db = g
                    .iter()
                    .zip(y)
                    .zip(bv)
                    .map(|((&gi, &yi), &bi)| -gi * yi / bi)
                    .collect();
                vec![(a, da), (b, db)]
            }
            Op::MinElem(a, b) => {
                let (av, bv) = (dat(a), dat(b));
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gi)| if av[j] <= bv[j] { gi } else { 0.0 })
                    .collect();
                let db = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gi)| if bv[j] < av[j] { gi } else { 0.0 })
                    .collect();
                vec![(a, da), (b, db)]
            }
            Op::MaxElem(a, b) => {
                let (av, bv) = (dat(a), dat(b));
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gi)| if av[j] >= bv[j] { gi } else { 0.0 })
                    .collect();
                let db = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gi)| if bv[j] > av[j] { gi } else { 0.0 })
                    .collect();
                vec![(a, da), (b, db)]
            }
            Op::AddRow(x, row) => {
                let (m, n) = self.dims2(x);
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
                vec![(x, g.to_vec()), (row, dr)]
            }
            Op::ScaleRows(x, s) => {
                let (m, n) = self.dims2(x);
                let (xv, sv) = (dat(x), dat(s));
                let mut dx = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] * sv[i];
                        acc += g[i * n + j] * xv[i * n + j];
                    }
                    ds[i] = acc;
                }
                vec![(x, dx), (s, ds)]
            }
            Op::ScalarMul(a, c) => vec![(a, g.iter().map(|&gi| gi * c).collect())],
            Op::ScalarAdd(a) => vec![(a, g.to_vec())],
            Op::Neg(a) => vec![(a, g.iter().map(|&gi| -gi).collect())],
            Op::Relu(a) => {
                let av = dat(a);
                vec![(a, g.iter().enumerate().map(|(j, &gi)| if av[j] > 0.0 { gi } else { 0.0 }).collect())]
            }
            Op::Gelu(a) => {
                let av = dat(a);
                vec![(a, g.iter().enumerate().map(|(j, &gi)| gi * gelu_deriv(av[j])).collect())]
            }
            Op::Sigmoid(a) => {
                vec![(a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi)).collect())]
            }
            Op::Ln(a) => {
                let av = dat(a);
                vec![(a, g.iter().enumerate().map(|(j, &gi)| gi / av[j]).collect())]
            }
            Op::Abs(a) => {
                let av = dat(a);
                vec![(a, g.iter().enumerate().map(|(j, &gi)| gi * sign(av[j])).collect())]
            }
            Op::PowConst(a, p) => {
                let av = dat(a);
                vec![(
                    a,
                    g.iter()
                        .enumerate()
                        .map(|(j, &gi)| gi * p * av[j].powf(p - 1.0))
                        .collect(),
                )]
            }
            Op::Clamp(a, lo, hi) => {
                let av = dat(a);
                vec![(
                    a,
                    g.iter()
                        .enumerate()
                        .map(|(j, &gi)| if av[j] > lo && av[j] < hi { gi } else { 0.0 })
                        .collect(),
                )]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.dims2(a);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    let dr = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(a, dx)]
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = self.dims2(x);
                let (xv, gv) = (dat(x), dat(gain));
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let (mean, inv_std) = row_moments(row);
                    // dxhat_j = g_j * gain_j; dx = (dxhat - mean(dxhat)
                    //   - xhat * mean(dxhat . xhat)) * inv_std
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[j] += grow[j] * xh;
                        dbias[j] += grow[j];
                    }
                    let mean_dxh = sum_dxh / n as f64;
                    let mean_dxh_xh = sum_dxh_xh / n as f64;
                    let drow = &mut dx[i * n..(i + 1) * n];
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        drow[j] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std;
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            }
            Op::InstanceNorm { x, gain, bias } => {
                let s = &self.nodes[x.0].shape;
                let (c, hw) = (s[0], s[1] * s[2]);
                let (xv, gv) = (dat(x), dat(gain));
                let mut dx = vec![0.0; c * hw];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for ch in 0..c {
                    let plane = &xv[ch * hw..(ch + 1) * hw];
                    let gplane = &g[ch * hw..(ch + 1) * hw];
                    let (mean, inv_std) = row_moments(plane);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..hw {
                        let xh = (plane[j] - mean) * inv_std;
                        let dxh = gplane[j] * gv[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[ch] += gplane[j] * xh;
                        dbias[ch] += gplane[j];
                    }
                    let mean_dxh = sum_dxh / hw as f64;
                    let mean_dxh_xh = sum_dxh_xh / hw as f64;
                    let dplane = &mut dx[ch * hw..(ch + 1) * hw];
                    for j in 0..hw {
                        let xh = (plane[j] - mean) * inv_std;
                        let dxh = gplane[j] * gv[ch];
                        dplane[j] = (dxh - mean_dxh - xh * mean_dxh_xh) * inv_std;
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            }
            Op::Conv3x3 { x, weight, bias } => {
                let xs = &self.nodes[x.0].shape;
                let (cin, h, w) = (xs[0], xs[1], xs[2]);
                let cout = self.nodes[weight.0].shape[0];
                let (xv, wv) = (dat(x), dat(weight));
                let mut dx = vec![0.0; cin * h * w];
                let mut dw = vec![0.0; cout * cin * 9];
                let mut db = vec![0.0; cout];
                for o in 0..cout {
                    for i in 0..h {
                        for j in 0..w {
                            let go = g[(o * h + i) * w + j];
                            if go == 0.0 {
                                continue;
                            }
                            db[o] += go;
                            for c in 0..cin {
                                let wbase = ((o * cin) + c) * 9;
                                for u in 0..3usize {
                                    let ii = i as isize + u as isize - 1;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for v in 0..3usize {
                                        let jj = j as isize + v as isize - 1;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        let xi = (c * h + ii as usize) * w + jj as usize;
                                        dw[wbase + u * 3 + v] += go * xv[xi];
                                        dx[xi] += go * wv[wbase + u * 3 + v];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(x, dx), (weight, dw), (bias, db)]
            }
            Op::Embed { weight, ids } => {
                let (v, d) = self.dims2(weight);
                let mut dw = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    let grow = &g[i * d..(i + 1) * d];
                    let wrow = &mut dw[id * d..(id + 1) * d];
                    for j in 0..d {
                        wrow[j] += grow[j];
                    }
                }
                vec![(weight, dw)]
            }
            Op::ConcatRows(parts) => {
                let n = self.dims2(parts[0]).1;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let rows = self.dims2(p).0;
                    out.push((p, g[offset * n..(offset + rows) * n].to_vec()));
                    offset += rows;
                }
                out
            }
            Op::SliceRows { x, start, end } => {
                let (m, n) = self.dims2(x);
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(g);
                vec![(x, dx)]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::RowMean(x) => {
                let (m, n) = self.dims2(x);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g[i] / n as f64;
                    for j in 0..n {
                        dx[i * n + j] = gi;
                    }
                }
                vec![(x, dx)]
            }
            Op::Sum(x) => {
                let len = self.nodes[x.0].data.len();
                vec![(x, vec![g[0]; len])]
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].data.len();
                vec![(x, vec![g[0] / len as f64; len])]
            }
        }
    }
}

/// Mean and inverse standard deviation (with the `1e-5` variance floor)
/// of one normalization group.
fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU under the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `out += a @ b` for row-major buffers (`out` must start zeroed).
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    out: &mut [f64],
) {
    for o in 0..cout {
        let oplane = &mut out[o * h * wd..(o + 1) * h * wd];
        oplane.fill(b[o]);
        for c in 0..cin {
            let xplane = &x[c * h * wd..(c + 1) * h * wd];
            let wbase = ((o * cin) + c) * 9;
            for u in 0..3usize {
                for v in 0..3usize {
                    let wv = w[wbase + u * 3 + v];
                    if wv == 0.0 {
                        continue;
                    }
                    let di = u as isize - 1;
                    let dj = v as isize - 1;
                    let i0 = (-di).max(0) as usize;
                    let i1 = (h as isize - di).min(h as isize) as usize;
                    for i in i0..i1 {
                        let si = (i as isize + di) as usize;
                        let j0 = (-dj).max(0) as usize;
                        let j1 = (wd as isize - dj).min(wd as isize) as usize;
                        let orow = &mut oplane[i * wd..(i + 1) * wd];
                        let xrow = &xplane[si * wd..(si + 1) * wd];
                        for j in j0..j1 {
                            orow[j] += wv * xrow[(j as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    }
}
