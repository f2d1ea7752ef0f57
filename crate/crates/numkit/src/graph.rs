//! Eager reverse-mode tape.
//!
//! Every op computes its value when it is recorded, so "forward" is simply the
//! sequence of calls that builds the graph. [`Graph::backward`] replays the
//! tape in reverse and returns gradients for every parameter that was pulled
//! into the graph through [`Graph::param`].
//!
//! All arrays are row-major. Matrix-shaped ops treat the last axis as columns
//! and everything before it as rows.

use std::collections::BTreeMap;

use crate::array::RealArray;
use crate::error::{shape_err, NumError, Result};
use crate::params::{GradientRecord, ParamSet};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

/// Names of the differentiable ops, used for the checkpoint op-set hash.
pub const OP_SET: &[&str] = &[
    "affine",
    "embedding",
    "causal_attention",
    "layer_norm",
    "softmax",
    "log_softmax",
    "mse",
    "clip",
    "min",
    "exp",
    "log",
    "log_sigmoid",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "offset",
    "select",
    "rows",
    "reshape",
    "sum",
    "mean",
    "row_sum",
    "detach",
];

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Detach,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Min(Var, Var),
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: RealArray,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        finite(op_name, &data)?;
        self.nodes.push(Node {
            value: RealArray::from_parts(shape, data),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(NumError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &RealArray {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&RealArray> {
        Ok(&self.node(v)?.value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, a: RealArray) -> Var {
        self.nodes.push(Node {
            value: a,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(RealArray::vector(data)?))
    }

    /// Pulls a named parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = params.require(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `x` that blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let a = self.node(x)?.value.clone();
        self.nodes.push(Node {
            value: a,
            op: Op::Detach,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x · w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let wa = &self.node(w)?.value;
        if wa.shape().len() != 2 || xa.cols() != wa.shape()[0] {
            return Err(shape_err(
                "affine",
                format!("x {:?} · w {:?}", xa.shape(), wa.shape()),
            ));
        }
        let (n, din, dout) = (xa.rows(), wa.shape()[0], wa.shape()[1]);
        let mut y = vec![0.0; n * dout];
        if let Some(b) = b {
            let ba = &self.node(b)?.value;
            if ba.len() != dout {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} for out {dout}", ba.shape()),
                ));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(ba.data());
            }
        }
        let (xd, wd) = (xa.data(), wa.data());
        for i in 0..n {
            let yr = &mut y[i * dout..(i + 1) * dout];
            for k in 0..din {
                let xv = xd[i * din + k];
                if xv == 0.0 {
                    continue;
                }
                let wr = &wd[k * dout..(k + 1) * dout];
                for (o, wv) in yr.iter_mut().zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let mut shape = xa.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        self.push("affine", shape, y, Op::Affine { x, w, b })
    }

    /// Row lookup into `table: [vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.node(table)?.value;
        if t.shape().len() != 2 {
            return Err(shape_err("embedding", format!("table {:?}", t.shape())));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(shape_err(
                    "embedding",
                    format!("id {id} out of range {rows}"),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        self.push(
            "embedding",
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    /// `q`, `k`, `v` are `[n, d]`; heads split the column axis.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qa, ka, va) = (
            &self.node(q)?.value,
            &self.node(k)?.value,
            &self.node(v)?.value,
        );
        if qa.shape().len() != 2 || qa.shape() != ka.shape() || qa.shape() != va.shape() {
            return Err(shape_err(
                "causal_attention",
                format!("q {:?} k {:?} v {:?}", qa.shape(), ka.shape(), va.shape()),
            ));
        }
        let (n, d) = (qa.shape()[0], qa.shape()[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("dim {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qa.data(), ka.data(), va.data());
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for pj in p[..=i].iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in p[..=i].iter_mut() {
                    *pj /= z;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += p[j] * x;
                    }
                }
            }
        }
        self.push(
            "causal_attention",
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Per-row layer normalization with learned gain and bias over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let (ga, ba) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let c = xa.cols();
        if ga.len() != c || ba.len() != c {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    xa.shape(),
                    ga.shape(),
                    ba.shape()
                ),
            ));
        }
        let rows = xa.rows();
        let mut xhat = vec![0.0; xa.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xa.len()];
        for r in 0..rows {
            let xr = xa.row(r);
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (xr[j] - mean) * is;
                xhat[r * c + j] = xh;
                y[r * c + j] = ga.data()[j] * xh + ba.data()[j];
            }
        }
        let shape = xa.shape().to_vec();
        self.push(
            "layer_norm",
            shape,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let c = xa.cols();
        let mut y = xa.data().to_vec();
        for row in y.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let shape = xa.shape().to_vec();
        self.push("softmax", shape, y, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let c = xa.cols();
        let mut y = xa.data().to_vec();
        for row in y.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = xa.shape().to_vec();
        self.push("log_softmax", shape, y, Op::LogSoftmax(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(&RealArray, &RealArray)> {
        let (aa, ba) = (&self.node(a)?.value, &self.node(b)?.value);
        if aa.shape() != ba.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", aa.shape(), ba.shape()),
            ));
        }
        Ok((aa, ba))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (aa, ba) = self.same_shape(name, a, b)?;
        let y: Vec<f64> = aa
            .data()
            .iter()
            .zip(ba.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = aa.shape().to_vec();
        self.push(name, shape, y, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let aa = &self.node(a)?.value;
        let y: Vec<f64> = aa.data().iter().map(|x| f(*x)).collect();
        let shape = aa.shape().to_vec();
        self.push(name, shape, y, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum. Ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min", a, b, f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// `log σ(x)`, evaluated stably for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(NumError::Invalid(format!("clip bounds {lo} > {hi}")));
        }
        self.unary("clip", a, |x| x.clamp(lo, hi), Op::Clip { x: a, lo, hi })
    }

    /// Picks `x[i, idx[i]]` from a `[n, c]` array, producing `[n]`.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let (n, c) = (xa.rows(), xa.cols());
        if idx.len() != n {
            return Err(shape_err(
                "select",
                format!("{} indices for {n} rows", idx.len()),
            ));
        }
        let mut y = Vec::with_capacity(n);
        for (r, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(shape_err("select", format!("column {j} out of range {c}")));
            }
            y.push(xa.data()[r * c + j]);
        }
        self.push(
            "select",
            vec![n],
            y,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Slice `len` entries of the leading axis starting at `start`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let lead = xa.shape()[0];
        if len == 0 || start + len > lead {
            return Err(shape_err(
                "rows",
                format!("[{start}, {}) of {lead}", start + len),
            ));
        }
        let inner = xa.len() / lead;
        let y = xa.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xa.shape().to_vec();
        shape[0] = len;
        self.push("rows", shape, y, Op::Rows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xa = &self.node(x)?.value;
        if shape.iter().product::<usize>() != xa.len() || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", xa.shape()),
            ));
        }
        let y = xa.data().to_vec();
        self.push("reshape", shape.to_vec(), y, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let s = xa.data().iter().sum::<f64>() / xa.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    /// Sum over the last axis: `[n, c] -> [n]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let xa = &self.node(x)?.value;
        let c = xa.cols();
        let y: Vec<f64> = xa.data().chunks(c).map(|r| r.iter().sum()).collect();
        let n = y.len();
        self.push("row_sum", vec![n], y, Op::RowSum(x))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (aa, ba) = self.same_shape("mse", a, b)?;
        let n = aa.len() as f64;
        let s = aa
            .data()
            .iter()
            .zip(ba.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push("mse", vec![1], vec![s], Op::Mse(a, b))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every parameter
    /// pulled into this graph.
    pub fn backward(&self, loss: Var) -> Result<GradientRecord> {
        let ln = self.node(loss)?;
        if !ln.value.is_scalar() {
            return Err(NumError::NotScalar(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param = node.op {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(node, &gy, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if v.0 > loss.0 {
                continue;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            finite("backward", &g)?;
            out.insert(name.clone(), RealArray::from_parts(shape, g));
        }
        Ok(GradientRecord::from_map(self.scalar(loss), out))
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(g);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Affine { x, w, b } => {
                let (xa, wa) = (val(*x), val(*w));
                let (n, din, dout) = (xa.rows(), wa.shape()[0], wa.shape()[1]);
                let (xd, wd) = (xa.data(), wa.data());
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let gyr = &gy[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let wr = &wd[k * dout..(k + 1) * dout];
                            gx[i * din + k] += gyr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..n {
                        let gyr = &gy[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let xv = xd[i * din + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, g) in gw[k * dout..(k + 1) * dout].iter_mut().zip(gyr) {
                                *o += xv * g;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in gy.chunks(dout) {
                            for (o, g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let dim = val(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&gy[r * dim..(r + 1) * dim])
                        {
                            *o += g;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qa, ka, va) = (val(*q), val(*k), val(*v));
                let (n, d) = (qa.shape()[0], qa.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (qa.data(), ka.data(), va.data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut dp = vec![0.0; n];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let gyi = &gy[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..=i {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            dp[j] = gyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            dot += p[j] * dp[j];
                            for (o, g) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gyi) {
                                *o += p[j] * g;
                            }
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[i * d + off + c] += ds * kd[j * d + off + c];
                                gk[j * d + off + c] += ds * qd[i * d + off + c];
                            }
                        }
                    }
                }
                acc(*q, &mut |g| {
                    g.iter_mut().zip(&gq).for_each(|(o, x)| *o += x)
                });
                acc(*k, &mut |g| {
                    g.iter_mut().zip(&gk).for_each(|(o, x)| *o += x)
                });
                acc(*v, &mut |g| {
                    g.iter_mut().zip(&gv).for_each(|(o, x)| *o += x)
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*x).cols();
                let gd = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (r, row) in gy.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += row[j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for row in gy.chunks(c) {
                        for j in 0..c {
                            gb[j] += row[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let cf = c as f64;
                    for (r, row) in gy.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let d = row[j] * gd[j];
                            s1 += d;
                            s2 += d * xh[j];
                        }
                        for j in 0..c {
                            let d = row[j] * gd[j];
                            gx[r * c + j] += inv_std[r] / cf * (cf * d - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks(c).zip(gy.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks(c).zip(gy.chunks(c)).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(o, x)| *o += x));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(o, x)| *o += x));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bd[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(o, x)| *o += c * x)
            }),
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(o, x)| *o += x))
            }
            Op::Relu(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if ad[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / ad[i];
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let ad = val(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        // d/dx log σ(x) = σ(-x)
                        g[i] += gy[i] * sigmoid(-ad[i]);
                    }
                });
            }
            Op::Min(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if ad[i] <= bd[i] {
                            g[i] += gy[i];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        if ad[i] > bd[i] {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Clip { x, lo, hi } => {
                let xd = val(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Select { x, idx } => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (r, &j) in idx.iter().enumerate() {
                        g[r * c + j] += gy[r];
                    }
                });
            }
            Op::Rows { x, start } => {
                let xa = val(*x);
                let inner = xa.len() / xa.shape()[0];
                acc(*x, &mut |g| {
                    for (o, v) in g[start * inner..start * inner + gy.len()]
                        .iter_mut()
                        .zip(gy)
                    {
                        *o += v;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += gy[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += gy[0] / n));
            }
            Op::RowSum(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |g| {
                    for (r, row) in g.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|o| *o += gy[r]);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let n = ad.len() as f64;
                let diff: Vec<f64> = ad
                    .iter()
                    .zip(bd)
                    .map(|(x, y)| 2.0 * (x - y) / n * gy[0])
                    .collect();
                acc(*a, &mut |g| {
                    g.iter_mut().zip(&diff).for_each(|(o, d)| *o += d)
                });
                acc(*b, &mut |g| {
                    g.iter_mut().zip(&diff).for_each(|(o, d)| *o -= d)
                });
            }
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + xs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, RealArray)]) -> ParamSet {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(RealArray::vector(vec![0.0, 0.0]).unwrap());
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_affine_gives_zero_output() {
        let mut g = Graph::new();
        let p = params(&[
            ("w", RealArray::zeros(&[3, 2])),
            ("b", RealArray::zeros(&[2])),
        ]);
        let x = g.constant(RealArray::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 7.0, -1.0]).unwrap());
        let (w, b) = (g.param(&p, "w").unwrap(), g.param(&p, "b").unwrap());
        let y = g.affine(x, w, Some(b)).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn square_gradient() {
        let p = params(&[("p", RealArray::scalar(3.0))]);
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().item(), 6.0);
        assert_eq!(grads.loss, 9.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = params(&[("p", RealArray::scalar(3.0))]);
        let mut g = Graph::new();
        let v = g.param(&p, "p").unwrap();
        let d = g.detach(v).unwrap();
        let l = g.sum(d).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::new();
        let x = g.constant(RealArray::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(NumError::NotScalar(_))));
        assert!(matches!(
            g.backward(Var(99)),
            Err(NumError::UnknownNode(99))
        ));
    }

    #[test]
    fn non_finite_results_abort() {
        let mut g = Graph::new();
        let x = g.constant(RealArray::vector(vec![-1.0]).unwrap());
        assert!(matches!(g.log(x), Err(NumError::NonFinite { op: "log" })));
        let big = g.constant(RealArray::vector(vec![1000.0]).unwrap());
        assert!(matches!(g.exp(big), Err(NumError::NonFinite { op: "exp" })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(RealArray::vector(vec![1.0, 2.0]).unwrap());
        let b = g.constant(RealArray::vector(vec![1.0]).unwrap());
        assert!(matches!(
            g.add(a, b),
            Err(NumError::Shape { op: "add", .. })
        ));
        let m = g.constant(RealArray::zeros(&[2, 3]));
        let w = g.constant(RealArray::zeros(&[2, 3]));
        assert!(g.affine(m, w, None).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(40.0) < 0.0 && log_sigmoid(40.0) > -1e-17);
    }

    #[test]
    fn causal_attention_first_row_copies_first_value() {
        let mut g = Graph::new();
        let q = g.constant(RealArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(RealArray::matrix(2, 2, vec![0.5, -1.0, 2.0, 1.0]).unwrap());
        let v = g.constant(RealArray::matrix(2, 2, vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let o = g.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(o).row(0), &[7.0, 8.0]);
    }
}
