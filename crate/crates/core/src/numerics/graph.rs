//! Define-by-run tape with reverse-mode gradients.
//!
//! Every operation evaluates eagerly and appends a node, so node order is a
//! topological order and the tape is acyclic by construction.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, NormGeom};
use super::{NumericsError, ParamId, ParamStore, Tensor};
use crate::scalar::{gemm, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Norms below this make a cosine degenerate (defined as 0, no gradient).
pub const COSINE_EPS: f64 = 1e-12;

/// Deliberate backward corruption, used to prove the gradient checker bites.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv2dWeightGrad,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        mean: bool,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    IndexSelect {
        x: Var,
        indices: Vec<usize>,
        row: usize,
    },
    Reshape(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    L2Norm(Var),
    Dot(Var, Var),
    Cosine {
        u: Var,
        v: Var,
        norms: Vec<(T, T)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { mean: false, .. } => "sum_axis",
            Op::SumAxis { mean: true, .. } => "mean_axis",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Reshape(_) => "reshape",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::L2Norm(_) => "l2_norm",
            Op::Dot(..) => "dot",
            Op::Cosine { .. } => "cosine",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    /// One gradient per parameter of `store`, zero-filled for parameters the
    /// loss does not depend on.
    pub fn dense(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.params
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    degenerate_cosines: usize,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    // log σ(x) = min(x, 0) - ln(1 + e^{-|x|})
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            degenerate_cosines: 0,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of cosine rows that hit a near-zero norm so far.
    pub fn degenerate_cosines(&self) -> usize {
        self.degenerate_cosines
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter from `store`; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn elementwise(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, NumericsError> {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, NumericsError> {
        self.elementwise(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.elementwise(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.elementwise(x, sigmoid, Op::Sigmoid(x))
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.elementwise(x, log_sigmoid, Op::LogSigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.elementwise(x, |v| v.ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.elementwise(x, |v| v.exp(), Op::Exp(x))
    }

    /// `x [n, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let bad_bias = b.is_some_and(|b| self.shape(b) != [ws[0]]);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bad_bias {
            let mut shapes = vec![xs, ws];
            if let Some(b) = b {
                shapes.push(self.shape(b));
            }
            return Err(shape_err("linear", &shapes));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(n, d_in, d_out, self.value(x).data(), false, self.value(w).data(), true, T::one(), &mut out);
        let value = Tensor::new(vec![n, d_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// 2-d convolution over NCHW input with OIHW weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, NumericsError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad_bias = b.is_some_and(|b| self.shape(b) != [ws[0]]);
        let ok = xs.len() == 4
            && ws.len() == 4
            && xs[1] == ws[1]
            && stride > 0
            && xs[2] + 2 * pad >= ws[2]
            && xs[3] + 2 * pad >= ws[3]
            && !bad_bias;
        if !ok {
            let mut shapes = vec![xs.as_slice(), ws.as_slice()];
            if let Some(b) = b {
                shapes.push(self.shape(b));
            }
            return Err(shape_err("conv2d", &shapes));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ok = xs.len() >= 2
            && groups > 0
            && xs[1].is_multiple_of(groups)
            && self.shape(gamma) == [xs[1]]
            && self.shape(beta) == [xs[1]];
        if !ok {
            return Err(shape_err("group_norm", &[&xs, self.shape(gamma), self.shape(beta)]));
        }
        let geom = NormGeom {
            batch: xs[0],
            channels: xs[1],
            spatial: xs[2..].iter().product(),
            groups,
        };
        let (y, mean, rstd) = kernels::group_norm_forward(
            &geom,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(xs, y)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                geom,
                mean,
                rstd,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(shape_err(if mean { "mean_axis" } else { "sum_axis" }, &[&xs]));
        }
        let outer: usize = xs[..axis].iter().product();
        let n = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(n).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape: Vec<usize> = xs[..axis].iter().chain(&xs[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis {
                x,
                outer,
                n,
                inner,
                mean,
            },
            rg,
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.reduce_axis(x, axis, true)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
        let first = shapes.first().ok_or_else(|| shape_err("concat", &[]))?;
        let compatible = axis < first.len()
            && shapes.iter().all(|s| {
                s.len() == first.len() && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b)
            });
        if !compatible {
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            return Err(shape_err("concat", &refs));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let rg = self.rg(inputs);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        )
    }

    /// Gathers rows along axis 0; indices may repeat.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= xs[0]) {
            return Err(shape_err("index_select", &[&xs, &[indices.len()]]));
        }
        let row: usize = xs[1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&data[i * row..(i + 1) * row]);
        }
        let mut shape = xs;
        shape[0] = indices.len();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
                row,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    fn pool(&mut self, x: Var, k: usize, max: bool) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let name = if max { "max_pool" } else { "avg_pool" };
        if xs.len() != 4 || k == 0 || !xs[2].is_multiple_of(k) || !xs[3].is_multiple_of(k) {
            return Err(shape_err(name, &[&xs, &[k]]));
        }
        let (out, argmax) = kernels::pool_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], k, max);
        let value = Tensor::new(vec![xs[0], xs[1], xs[2] / k, xs[3] / k], out)?;
        let op = if max { Op::MaxPool { x, argmax } } else { Op::AvgPool { x, k } };
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        self.pool(x, k, false)
    }

    /// Non-overlapping `k x k` max pooling; ties go to the first element.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        self.pool(x, k, true)
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", &[&xs]));
        }
        let flat = self.reshape(x, &[xs[0], xs[1], xs[2] * xs[3]])?;
        self.mean_axis(flat, 2)
    }

    fn rows(&self, x: Var) -> (usize, usize, Vec<usize>) {
        let xs = self.shape(x);
        let d = *xs.last().unwrap();
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        (xs.iter().product::<usize>() / d, d, out_shape)
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (n, d, shape) = self.rows(x);
        let data = self.value(x).data();
        let out = (0..n)
            .map(|r| data[r * d..(r + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out)?, Op::L2Norm(x), rg)
    }

    /// Row-wise inner product along the last axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, "dot")?;
        let (n, d, shape) = self.rows(a);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|r| (0..d).map(|i| ad[r * d + i] * bd[r * d + i]).sum::<T>())
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Dot(a, b), rg)
    }

    /// Row-wise cosine similarity along the last axis. Rows where either norm
    /// is below [`COSINE_EPS`] yield 0 with zero gradient and are counted in
    /// [`Graph::degenerate_cosines`].
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var, NumericsError> {
        self.binary(u, v, "cosine")?;
        let (n, d, shape) = self.rows(u);
        let eps = T::from_f64_lossy(COSINE_EPS);
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        let mut degenerate = 0;
        for r in 0..n {
            let (ur, vr) = (&ud[r * d..(r + 1) * d], &vd[r * d..(r + 1) * d]);
            let nu = ur.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nv = vr.iter().map(|&x| x * x).sum::<T>().sqrt();
            if nu < eps || nv < eps {
                degenerate += 1;
                out.push(T::zero());
                norms.push((T::zero(), T::zero()));
            } else {
                let dot = ur.iter().zip(vr).map(|(&a, &b)| a * b).sum::<T>();
                out.push(dot / (nu * nv));
                norms.push((nu, nv));
            }
        }
        self.degenerate_cosines += degenerate;
        let rg = self.rg(&[u, v]);
        self.push(Tensor::new(shape, out)?, Op::Cosine { u, v, norms }, rg)
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::NoForward);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                op => self.propagate(op, &node.value, g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape");
        self.accumulate(grads, v, t);
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumericsError> {
        let val = |v: Var| self.value(v).data();
        let gd = g.data();
        match *op {
            Op::Input | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, b, g.map(|v| -v));
                self.accumulate(grads, a, g);
            }
            Op::Mul(a, b) => {
                self.accumulate_data(grads, a, zip_map(gd, val(b), |x, y| x * y));
                self.accumulate_data(grads, b, zip_map(gd, val(a), |x, y| x * y));
            }
            Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            Op::Relu(x) => {
                let d = zip_map(gd, val(x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate_data(grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(gd, out.data(), |gv, s| gv * s * (T::one() - s));
                self.accumulate_data(grads, x, d);
            }
            Op::LogSigmoid(x) => {
                let d = zip_map(gd, val(x), |gv, xv| gv * sigmoid(-xv));
                self.accumulate_data(grads, x, d);
            }
            Op::Log(x) => self.accumulate_data(grads, x, zip_map(gd, val(x), |gv, xv| gv / xv)),
            Op::Exp(x) => self.accumulate_data(grads, x, zip_map(gd, out.data(), |gv, e| gv * e)),
            Op::Linear { x, w, b } => {
                let (n, d_in) = (self.shape(x)[0], self.shape(x)[1]);
                let d_out = self.shape(w)[0];
                if self.requires_grad(x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    gemm(n, d_out, d_in, gd, false, val(w), false, T::zero(), &mut dx);
                    self.accumulate_data(grads, x, dx);
                }
                if self.requires_grad(w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    gemm(d_out, n, d_in, gd, true, val(x), false, T::zero(), &mut dw);
                    self.accumulate_data(grads, w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); d_out];
                    for row in gd.chunks(d_out) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate_data(grads, b, db);
                }
            }
            Op::Conv2d { x, w, b, ref geom } => {
                let (dx, mut dw, db) = kernels::conv2d_backward(geom, val(x), val(w), gd, self.requires_grad(x));
                if self.fault == Some(Fault::Conv2dWeightGrad) {
                    dw.iter_mut().for_each(|v| *v *= T::from_f64_lossy(1.5));
                }
                if let Some(dx) = dx {
                    self.accumulate_data(grads, x, dx);
                }
                self.accumulate_data(grads, w, dw);
                if let Some(b) = b {
                    self.accumulate_data(grads, b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                ref geom,
                ref mean,
                ref rstd,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(geom, val(x), val(gamma), mean, rstd, gd);
                self.accumulate_data(grads, x, dx);
                self.accumulate_data(grads, gamma, dgamma);
                self.accumulate_data(grads, beta, dbeta);
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, x, Tensor::full(self.shape(x), s));
            }
            Op::Mean(x) => {
                let s = gd[0] / T::from_usize(self.value(x).numel()).unwrap();
                self.accumulate(grads, x, Tensor::full(self.shape(x), s));
            }
            Op::SumAxis {
                x,
                outer,
                n,
                inner,
                mean,
            } => {
                let scale = if mean { T::one() / T::from_usize(n).unwrap() } else { T::one() };
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for i in 0..n {
                        for (d, &s) in dx[(o * n + i) * inner..(o * n + i + 1) * inner].iter_mut().zip(src) {
                            *d = s * scale;
                        }
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::Concat {
                ref inputs,
                outer,
                ref widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        self.accumulate_data(grads, v, d);
                    }
                    offset += w;
                }
            }
            Op::IndexSelect { x, ref indices, row } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &s) in dx[i * row..(i + 1) * row].iter_mut().zip(&gd[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, x, g.reshaped(self.shape(x))?),
            Op::AvgPool { x, k } => {
                let xs = self.shape(x);
                let dx = kernels::avg_pool_backward(gd, xs[0] * xs[1], xs[2], xs[3], k);
                self.accumulate_data(grads, x, dx);
            }
            Op::MaxPool { x, ref argmax } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (&i, &s) in argmax.iter().zip(gd) {
                    dx[i] += s;
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::L2Norm(x) => {
                let xd = val(x);
                let d = *self.shape(x).last().unwrap();
                let mut dx = vec![T::zero(); xd.len()];
                for (r, (&gv, &nrm)) in gd.iter().zip(out.data()).enumerate() {
                    if nrm > T::zero() {
                        for i in r * d..(r + 1) * d {
                            dx[i] = gv * xd[i] / nrm;
                        }
                    }
                }
                self.accumulate_data(grads, x, dx);
            }
            Op::Dot(a, b) => {
                let d = *self.shape(a).last().unwrap();
                let (ad, bd) = (val(a), val(b));
                let mut da = vec![T::zero(); ad.len()];
                let mut db = vec![T::zero(); bd.len()];
                for (r, &gv) in gd.iter().enumerate() {
                    for i in r * d..(r + 1) * d {
                        da[i] = gv * bd[i];
                        db[i] = gv * ad[i];
                    }
                }
                self.accumulate_data(grads, a, da);
                self.accumulate_data(grads, b, db);
            }
            Op::Cosine { u, v, ref norms } => {
                let d = *self.shape(u).last().unwrap();
                let (ud, vd) = (val(u), val(v));
                let mut du = vec![T::zero(); ud.len()];
                let mut dv = vec![T::zero(); vd.len()];
                for (r, ((&gv, &c), &(nu, nv))) in gd.iter().zip(out.data()).zip(norms).enumerate() {
                    if nu == T::zero() {
                        continue;
                    }
                    let inv = T::one() / (nu * nv);
                    for i in r * d..(r + 1) * d {
                        du[i] = gv * (vd[i] * inv - c * ud[i] / (nu * nu));
                        dv[i] = gv * (ud[i] * inv - c * vd[i] / (nv * nv));
                    }
                }
                self.accumulate_data(grads, u, du);
                self.accumulate_data(grads, v, dv);
            }
        }
        Ok(())
    }
}
