use std::borrow::Cow;
use std::sync::Arc;

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, softplus};
use super::{rng, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast onto the left shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaskedMean {
        x: Var,
        axis: usize,
        mask: Vec<f64>,
        counts: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Vec<f64>,
        drop: Option<Vec<f64>>,
    },
    CgConv(Box<CgConvSaved>),
}

#[derive(Debug)]
struct CgConvSaved {
    h: Var,
    edges: Var,
    w_f: Var,
    b_f: Var,
    w_s: Var,
    b_s: Var,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    gate: Vec<f64>,
    filt: Vec<f64>,
    filt_slope: Vec<f64>,
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the insertion order is a valid
/// topological order and backward is a single reverse sweep.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    training: bool,
    seed: u64,
    dropout_ops: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols, cols)
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: None,
            param_vars: Vec::new(),
            training: false,
            seed: 0,
            dropout_ops: 0,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        let mut tape = Self::new();
        tape.params = Some(store);
        tape.param_vars = vec![None; store.len()];
        tape
    }

    /// Enable train mode; dropout masks are keyed by `seed` and op order.
    pub fn set_training(&mut self, training: bool, seed: u64) {
        self.training = training;
        self.seed = seed;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).unwrap()
    }

    /// Record a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// Borrow a parameter from the attached store; repeated calls share a node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: Cow::Borrowed(p.tensor.data()),
            op: Op::Param(id),
            requires_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// a * b^T
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "matmul_t",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = dims2(self.shape(a));
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(vec![c, r], out, Op::Transpose(a), rg)
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (r, c) = dims2(sa);
        let (rb, cb) = dims2(sb);
        let nb: usize = sb.iter().product();
        if sa == sb || (rb, cb) == (r, c) && nb == r * c {
            Ok(Bcast::Same)
        } else if nb == 1 {
            Ok(Bcast::Scalar)
        } else if rb == 1 && cb == c {
            Ok(Bcast::Row)
        } else if cb == 1 && rb == r {
            Ok(Bcast::Col)
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let (_, c) = dims2(self.shape(a));
        let av = self.value(a);
        let bv = self.value(b);
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Row => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % c]))
                .collect(),
            Bcast::Col => av
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i / c]))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Binary(kind, a, b, bc), rg))
    }

    /// Elementwise `a + b`, with `b` broadcast as a row, column, or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f = |x: f64| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    fn next_dropout_key(&mut self) -> u64 {
        let k = self.dropout_ops;
        self.dropout_ops += 1;
        k
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let key = self.next_dropout_key();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len() as u64)
            .map(|i| {
                if rng::uniform(self.seed, key, i) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Dropout(a, mask), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax_rows(a, None)
            .expect("unmasked softmax cannot be degenerate")
    }

    /// Row softmax where masked-out columns (mask == false) get weight exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::Dimension {
                    op: "masked_softmax_rows",
                    lhs: self.shape(a).to_vec(),
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::DegenerateMask);
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(&x[i * c..(i + 1) * c], mask, 1.0, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Normalise over the last dimension, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = dims2(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; r * d];
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Sum a 2-D value over `axis` (0 = over rows, 1 = over columns).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(a, axis)?;
        let v = self.value(a);
        let out = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                axpy(1.0, &v[i * c..(i + 1) * c], &mut out);
            }
            out
        } else {
            (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect()
        };
        let rg = self.rg(a);
        let shape = vec![if axis == 0 { c } else { r }];
        Ok(self.push(shape, out, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(a, axis)?;
        let mask = vec![1.0; if axis == 0 { r } else { c }];
        self.masked_mean_impl(a, axis, mask)
    }

    /// Mean over `axis` counting only positions where `mask` is set.
    ///
    /// `mask` runs along the reduced axis. A 1-D input is treated as a
    /// single row, so `axis` must then be 1.
    pub fn masked_mean(&mut self, a: Var, axis: usize, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.check_axis(a, axis)?;
        let expect = if axis == 0 { r } else { c };
        if mask.len() != expect {
            return Err(Error::Dimension {
                op: "masked_mean",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::DegenerateMask);
        }
        let mask = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        self.masked_mean_impl(a, axis, mask)
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<(usize, usize)> {
        if axis > 1 || self.shape(a).len() > 2 {
            return Err(Error::Dimension {
                op: "reduce_axis",
                lhs: self.shape(a).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(dims2(self.shape(a)))
    }

    fn masked_mean_impl(&mut self, a: Var, axis: usize, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        let v = self.value(a);
        let count: f64 = mask.iter().sum();
        let out: Vec<f64> = if axis == 0 {
            let mut out = vec![0.0; c];
            for i in 0..r {
                if mask[i] != 0.0 {
                    axpy(1.0, &v[i * c..(i + 1) * c], &mut out);
                }
            }
            out.iter_mut().for_each(|x| *x /= count);
            out
        } else {
            (0..r)
                .map(|i| {
                    v[i * c..(i + 1) * c]
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &m)| m != 0.0)
                        .map(|(x, _)| x)
                        .sum::<f64>()
                        / count
                })
                .collect()
        };
        let rg = self.rg(a);
        let shape = vec![out.len()];
        Ok(self.push(
            shape,
            out,
            Op::MaskedMean {
                x: a,
                axis,
                mask,
                counts: vec![count],
            },
            rg,
        ))
    }

    /// Select rows by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Sum row `e` of `a` into output row `idx[e]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        if idx.len() != r || idx.iter().any(|&i| i >= n) {
            return Err(Error::Dimension {
                op: "scatter_add_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![idx.len(), n],
            });
        }
        let v = self.value(a);
        let mut out = vec![0.0; n * c];
        for (e, &i) in idx.iter().enumerate() {
            axpy(1.0, &v[e * c..(e + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c], out, Op::ScatterAddRows(a, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = dims2(self.shape(parts[0])).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p));
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let shape = if self.shape(parts[0]).len() == 1 {
            vec![total]
        } else {
            vec![r, total]
        };
        Ok(self.push(shape, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stack 2-D blocks (or 1-D rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = dims2(self.shape(parts[0])).1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p));
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        if start >= end || end > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, end - start], out, Op::SliceCols(a, start, end), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a));
        if start >= end || end > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![end - start, c], out, Op::SliceRows(a, start, end), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Multi-head scaled dot-product attention core.
    ///
    /// `q` is `n_q x d`, `k` and `v` are `n_k x d`; head `i` uses columns
    /// `[i*d/h, (i+1)*d/h)`. Returns the `n_q x d` concatenation of head
    /// outputs. Keys with `key_mask[j] == false` receive weight exactly 0.
    /// In train mode `dropout` is applied to the attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<Var> {
        let (nq, d) = dims2(self.shape(q));
        let (nk, dk) = dims2(self.shape(k));
        let (nv, dv) = dims2(self.shape(v));
        if d != dk || d != dv || nk != nv || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if let Some(m) = key_mask {
            if m.len() != nk {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: vec![nk],
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::DegenerateMask);
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let drop_key = (self.training && dropout > 0.0).then(|| self.next_dropout_key());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));

        let mut weights = vec![0.0; heads * nq * nk];
        let mut drop = drop_key.map(|_| vec![0.0; heads * nq * nk]);
        let mut out = vec![0.0; nq * d];
        let mut logits = vec![0.0; nk];
        let keep = 1.0 / (1.0 - dropout);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let qi = &qv[i * d + cols.start..i * d + cols.end];
                for j in 0..nk {
                    logits[j] = dot(qi, &kv[j * d + cols.start..j * d + cols.end]);
                }
                let base = (h * nq + i) * nk;
                let w = &mut weights[base..base + nk];
                softmax_row(&logits, key_mask, scale, w);
                let out_row = &mut out[i * d + cols.start..i * d + cols.end];
                for j in 0..nk {
                    let mut a = w[j];
                    if let (Some(dm), Some(key)) = (drop.as_mut(), drop_key) {
                        let m = if rng::uniform(self.seed, key, (base + j) as u64) < dropout {
                            0.0
                        } else {
                            keep
                        };
                        dm[base + j] = m;
                        a *= m;
                    }
                    if a != 0.0 {
                        axpy(a, &vv[j * d + cols.start..j * d + cols.end], out_row);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
                drop,
            },
            rg,
        ))
    }

    /// Pre-dropout attention weights (`heads x n_q x n_k`) of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Residual gated graph convolution over directed edges.
    ///
    /// For each edge `e = (i -> j)` with features `f_e`, the message is
    /// `sigmoid(z W_f + b_f) * softplus(z W_s + b_s)` where
    /// `z = [h_i; h_j; f_e]`; messages are summed into atom `i` and added
    /// to `h`. Weights have `2*d + d_edge` rows and `d` columns.
    #[allow(clippy::too_many_arguments)]
    pub fn cg_conv(
        &mut self,
        h: Var,
        edges: Var,
        src: &Arc<[usize]>,
        dst: &Arc<[usize]>,
        w_f: Var,
        b_f: Var,
        w_s: Var,
        b_s: Var,
    ) -> Result<Var> {
        let (n, d) = dims2(self.shape(h));
        let (ne, de) = if src.is_empty() {
            (0, self.shape(edges).last().copied().unwrap_or(0))
        } else {
            dims2(self.shape(edges))
        };
        let width = 2 * d + de;
        for w in [w_f, w_s] {
            if self.shape(w) != [width, d] {
                return Err(Error::Dimension {
                    op: "cg_conv",
                    lhs: vec![width, d],
                    rhs: self.shape(w).to_vec(),
                });
            }
        }
        if self.value(b_f).len() != d || self.value(b_s).len() != d || src.len() != dst.len() {
            return Err(Error::Dimension {
                op: "cg_conv",
                lhs: vec![d],
                rhs: self.shape(b_f).to_vec(),
            });
        }
        if src.len() != ne || src.iter().chain(dst.iter()).any(|&i| i >= n) {
            return Err(Error::Dimension {
                op: "cg_conv",
                lhs: vec![n, ne],
                rhs: vec![src.len()],
            });
        }
        let hv = self.value(h);
        let mut out = hv.to_vec();
        let mut gate = vec![0.0; ne * d];
        let mut filt = vec![0.0; ne * d];
        let mut filt_slope = vec![0.0; ne * d];
        if ne > 0 {
            let ev = self.value(edges);
            let pre_f = edge_preactivation(hv, ev, self.value(w_f), self.value(b_f), src, dst, n, d, de);
            let pre_s = edge_preactivation(hv, ev, self.value(w_s), self.value(b_s), src, dst, n, d, de);
            for idx in 0..ne * d {
                gate[idx] = sigmoid(pre_f[idx]);
                filt[idx] = softplus(pre_s[idx]);
                filt_slope[idx] = sigmoid(pre_s[idx]);
            }
            for e in 0..ne {
                let i = src[e];
                let row = &mut out[i * d..(i + 1) * d];
                for c in 0..d {
                    row[c] += gate[e * d + c] * filt[e * d + c];
                }
            }
        }
        let rg = [h, edges, w_f, b_f, w_s, b_s].iter().any(|&x| self.rg(x));
        Ok(self.push(
            vec![n, d],
            out,
            Op::CgConv(Box::new(CgConvSaved {
                h,
                edges,
                w_f,
                b_f,
                w_s,
                b_s,
                src: src.clone(),
                dst: dst.clone(),
                gate,
                filt,
                filt_slope,
            })),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward sweep, returning gradients of every attached parameter reached.
    /// Consumes the tape so the parameter store can be mutated afterwards.
    pub fn backward_params(self, loss: Var) -> Result<ParamGrads> {
        let grads = self.backward(loss)?;
        Ok(self.param_grads(&grads))
    }

    pub fn param_grads(&self, grads: &Gradients) -> ParamGrads {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                if node.requires_grad {
                    out.push((*id, g.clone()));
                }
            }
        }
        ParamGrads(out)
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).0;
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b, bc) => self.backward_binary(*kind, *a, *b, *bc, g, grads),
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        let dydx = match kind {
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                        };
                        ga[i] += g[i] * dydx;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = dims2(&node.shape);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, d) = dims2(&node.shape);
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for i in 0..r {
                        axpy(1.0, &g[i * d..(i + 1) * d], gb);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gv[j];
                        }
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for j in 0..d {
                            gx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = dims2(self.shape(*a));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::MaskedMean {
                x,
                axis,
                mask,
                counts,
            } => {
                let (r, c) = dims2(self.shape(*x));
                let inv = 1.0 / counts[0];
                if let Some(ga) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            let (m, gg) = if *axis == 0 {
                                (mask[i], g[j])
                            } else {
                                (mask[j], g[i])
                            };
                            ga[i * c + j] += m * gg * inv;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = dims2(&node.shape).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (e, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[e * c..(e + 1) * c], &mut ga[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                let c = dims2(&node.shape).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for (e, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[i * c..(i + 1) * c], &mut ga[e * c..(e + 1) * c]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            axpy(
                                1.0,
                                &g[i * total + offset..i * total + offset + w],
                                &mut gp[i * w..(i + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        axpy(1.0, &g[offset..offset + n], gp);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = dims2(self.shape(*a));
                let w = end - start;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        axpy(1.0, &g[i * w..(i + 1) * w], &mut ga[i * c + start..i * c + end]);
                    }
                }
            }
            Op::SliceRows(a, start, end) => {
                let c = dims2(self.shape(*a)).1;
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, &mut ga[start * c..end * c]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    axpy(1.0, g, ga);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
                drop,
            } => self.backward_attention(*q, *k, *v, *heads, weights, drop.as_deref(), g, grads),
            Op::CgConv(saved) => self.backward_cg_conv(saved, g, grads),
        }
    }

    fn backward_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        bc: Bcast,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, c) = dims2(self.shape(a));
        let av = self.value(a);
        let bv = self.value(b);
        let bidx = |i: usize| match bc {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row => i % c,
            Bcast::Col => i / c,
        };
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..ga.len() {
                ga[i] += match kind {
                    Binary::Add | Binary::Sub => g[i],
                    Binary::Mul => g[i] * bv[bidx(i)],
                    Binary::Div => g[i] / bv[bidx(i)],
                };
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for i in 0..g.len() {
                let y = bv[bidx(i)];
                gb[bidx(i)] += match kind {
                    Binary::Add => g[i],
                    Binary::Sub => -g[i],
                    Binary::Mul => g[i] * av[i],
                    Binary::Div => -g[i] * av[i] / (y * y),
                };
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: &[f64],
        drop: Option<&[f64]>,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = dims2(self.shape(q));
        let nk = dims2(self.shape(k)).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut da = vec![0.0; nk];
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            for i in 0..nq {
                let base = (h * nq + i) * nk;
                let w = &weights[base..base + nk];
                let gi = &g[i * d + c0..i * d + c1];
                for j in 0..nk {
                    let m = drop.map_or(1.0, |dm| dm[base + j]);
                    let a_eff = w[j] * m;
                    if a_eff != 0.0 {
                        axpy(a_eff, gi, &mut dv[j * d + c0..j * d + c1]);
                    }
                    da[j] = if w[j] == 0.0 || m == 0.0 {
                        0.0
                    } else {
                        dot(gi, &vv[j * d + c0..j * d + c1]) * m
                    };
                }
                let s = dot(w, &da);
                for j in 0..nk {
                    let ds = w[j] * (da[j] - s) * scale;
                    if ds != 0.0 {
                        axpy(ds, &kv[j * d + c0..j * d + c1], &mut dq[i * d + c0..i * d + c1]);
                        axpy(ds, &qv[i * d + c0..i * d + c1], &mut dk[j * d + c0..j * d + c1]);
                    }
                }
            }
        }
        for (var, gv) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.acc(grads, var) {
                axpy(1.0, &gv, acc);
            }
        }
    }

    fn backward_cg_conv(&self, s: &CgConvSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = dims2(self.shape(s.h));
        let ne = s.src.len();
        if let Some(gh) = self.acc(grads, s.h) {
            axpy(1.0, g, gh);
        }
        if ne == 0 {
            return;
        }
        let de = dims2(self.shape(s.edges)).1;
        let mut dpf = vec![0.0; ne * d];
        let mut dps = vec![0.0; ne * d];
        for e in 0..ne {
            let gi = &g[s.src[e] * d..(s.src[e] + 1) * d];
            for c in 0..d {
                let idx = e * d + c;
                let gate = s.gate[idx];
                dpf[idx] = gi[c] * s.filt[idx] * gate * (1.0 - gate);
                dps[idx] = gi[c] * gate * s.filt_slope[idx];
            }
        }
        let hv = self.value(s.h);
        let ev = self.value(s.edges);
        for (dpre, w, b) in [(&dpf, s.w_f, s.b_f), (&dps, s.w_s, s.b_s)] {
            let mut by_src = vec![0.0; n * d];
            let mut by_dst = vec![0.0; n * d];
            for e in 0..ne {
                axpy(1.0, &dpre[e * d..(e + 1) * d], &mut by_src[s.src[e] * d..(s.src[e] + 1) * d]);
                axpy(1.0, &dpre[e * d..(e + 1) * d], &mut by_dst[s.dst[e] * d..(s.dst[e] + 1) * d]);
            }
            if let Some(gb) = self.acc(grads, b) {
                for e in 0..ne {
                    axpy(1.0, &dpre[e * d..(e + 1) * d], gb);
                }
            }
            let wv = self.value(w);
            let (w_self, rest) = wv.split_at(d * d);
            let (w_nbr, w_edge) = rest.split_at(d * d);
            if let Some(gw) = self.acc(grads, w) {
                let (g_self, rest) = gw.split_at_mut(d * d);
                let (g_nbr, g_edge) = rest.split_at_mut(d * d);
                matmul_tn_acc(hv, &by_src, g_self, n, d, d);
                matmul_tn_acc(hv, &by_dst, g_nbr, n, d, d);
                matmul_tn_acc(ev, dpre, g_edge, ne, de, d);
            }
            if let Some(gh) = self.acc(grads, s.h) {
                matmul_nt_acc(&by_src, w_self, gh, n, d, d);
                matmul_nt_acc(&by_dst, w_nbr, gh, n, d, d);
            }
            if let Some(ge) = self.acc(grads, s.edges) {
                matmul_nt_acc(dpre, w_edge, ge, ne, d, de);
            }
        }
    }
}

/// Pre-activation `z W + b` for every edge, using the row blocks of `W`
/// for the receiving atom, the neighbour, and the edge features.
#[allow(clippy::too_many_arguments)]
fn edge_preactivation(
    h: &[f64],
    edges: &[f64],
    w: &[f64],
    b: &[f64],
    src: &[usize],
    dst: &[usize],
    n: usize,
    d: usize,
    de: usize,
) -> Vec<f64> {
    let ne = src.len();
    let (w_self, rest) = w.split_at(d * d);
    let (w_nbr, w_edge) = rest.split_at(d * d);
    let mut hs = vec![0.0; n * d];
    let mut hn = vec![0.0; n * d];
    matmul_acc(h, w_self, &mut hs, n, d, d);
    matmul_acc(h, w_nbr, &mut hn, n, d, d);
    let mut pre = vec![0.0; ne * d];
    matmul_acc(edges, w_edge, &mut pre, ne, de, d);
    for e in 0..ne {
        let row = &mut pre[e * d..(e + 1) * d];
        let (si, di) = (src[e] * d, dst[e] * d);
        for c in 0..d {
            row[c] += hs[si + c] + hn[di + c] + b[c];
        }
    }
    pre
}

/// Softmax of `scale * logits` over unmasked entries; masked entries get 0.
fn softmax_row(logits: &[f64], mask: Option<&[bool]>, scale: f64, out: &mut [f64]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in logits.iter().enumerate() {
        if keep(j) && x * scale > max {
            max = x * scale;
        }
    }
    let mut sum = 0.0;
    for (j, &x) in logits.iter().enumerate() {
        out[j] = if keep(j) {
            let e = (x * scale - max).exp();
            sum += e;
            e
        } else {
            0.0
        };
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|w| *w *= inv);
}

/// Gradients for every node of a tape, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Sparse list of parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads(Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.0.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.iter().find(|e| e.0 == id).map(|e| e.1.as_slice())
    }

    /// Elementwise sum, reduced in slice order.
    pub fn sum(parts: &[ParamGrads]) -> ParamGrads {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for p in parts {
            for (id, g) in p.iter() {
                match out.iter_mut().find(|e| e.0 == id) {
                    Some(e) => e.1.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => out.push((id, g.to_vec())),
                }
            }
        }
        ParamGrads(out)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
