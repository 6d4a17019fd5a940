//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation eagerly: values are computed on the
//! spot and the op is appended to the tape. [`Graph::backward`] walks the tape
//! in reverse, so node ids double as a topological order.
//!
//! There is no broadcasting. Every binary op requires identical shapes;
//! use [`Graph::expand_rows`] or [`Graph::reshape`] explicitly.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::tensor::{ParamSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LayerNormRows { src: usize, inv_std: Vec<f64> },
    SumAll(usize),
    SumSq(usize),
    MeanRows(usize),
    /// out[i] = src[index[i]], or 0 where the index is `None`.
    Gather { src: usize, index: Vec<Option<usize>> },
    Concat(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<(bool, String), Var>>,
    params: RefCell<Vec<(usize, String)>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// a[m,n] · b[k,n]ᵀ
fn mm_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// a[m,k]ᵀ · b[m,n]
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone()).expect("node shape")
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_cols(&self.nodes.borrow()[v.0].shape).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(&self.nodes.borrow()[v.0].shape).1
    }

    /// Leaf tracking gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Leaf that always tracks gradients.
    pub fn variable(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(&Tensor::zeros(shape))
    }

    /// Bind a trainable parameter. Repeated binds of the same name share one node.
    pub fn param(&self, ps: &ParamSet, name: &str) -> Result<Var> {
        let key = (true, name.to_string());
        if let Some(v) = self.bound.borrow().get(&key) {
            return Ok(*v);
        }
        let v = self.variable(ps.get(name)?);
        self.params.borrow_mut().push((v.0, name.to_string()));
        self.bound.borrow_mut().insert(key, v);
        Ok(v)
    }

    /// Bind a parameter as a constant: no gradient ever reaches it.
    pub fn frozen(&self, ps: &ParamSet, name: &str) -> Result<Var> {
        let key = (false, name.to_string());
        if let Some(v) = self.bound.borrow().get(&key) {
            return Ok(*v);
        }
        let v = self.constant(ps.get(name)?);
        self.bound.borrow_mut().insert(key, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa.clone())
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let shape = self.same_shape(op, a, b)?;
        let nodes = self.nodes.borrow();
        let value = nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((shape, value))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes.borrow();
        (
            nodes[a.0].shape.clone(),
            nodes[a.0].value.iter().map(|x| f(*x)).collect(),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let value = {
            let nodes = self.nodes.borrow();
            mm(&nodes[a.0].value, &nodes[b.0].value, sa[0], sa[1], sb[1])
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![sa[0], sb[1]], value, Op::MatMul(a.0, b.0), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, value) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Mul(a.0, b.0), rg))
    }

    /// Sum of any number of same-shaped operands.
    pub fn sum_of(&self, parts: &[Var]) -> Result<Var> {
        let (first, rest) = parts
            .split_first()
            .ok_or(Error::EmptySequence("sum_of"))?;
        rest.iter().try_fold(*first, |acc, v| self.add(acc, *v))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (shape, value) = self.unary(a, |x| x * c);
        self.push(shape, value, Op::Scale(a.0, c), self.rg(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let (shape, value) = self.unary(a, |x| x + c);
        self.push(shape, value, Op::AddScalar(a.0), self.rg(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let (shape, value) = self.unary(a, f64::tanh);
        self.push(shape, value, Op::Tanh(a.0), self.rg(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let (shape, value) = self.unary(a, sigmoid);
        self.push(shape, value, Op::Sigmoid(a.0), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let (shape, value) = self.unary(a, f64::exp);
        self.push(shape, value, Op::Exp(a.0), self.rg(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let (shape, value) = self.unary(a, f64::ln);
        self.push(shape, value, Op::Log(a.0), self.rg(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (shape, value) = self.unary(a, |x| x.clamp(lo, hi));
        self.push(shape, value, Op::Clamp(a.0, lo, hi), self.rg(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let (r, c) = rows_cols(&shape);
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
            }
            out
        };
        self.push(shape, value, Op::SoftmaxRows(a.0), self.rg(a))
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine terms.
    pub fn layernorm_rows(&self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a);
        let (r, c) = rows_cols(&shape);
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = vec![0.0; r * c];
            let mut inv = vec![0.0; r];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv[i] = is;
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * is;
                }
            }
            (out, inv)
        };
        self.push(
            shape,
            value,
            Op::LayerNormRows { src: a.0, inv_std },
            self.rg(a),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(a.0), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.iter().map(|x| x * x).sum();
        self.push(vec![1], vec![s], Op::SumSq(a.0), self.rg(a))
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let (r, c) = rows_cols(&self.shape(a));
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += x[i * c + j];
                }
            }
            out.iter_mut().for_each(|v| *v /= r as f64);
            out
        };
        self.push(vec![1, c], value, Op::MeanRows(a.0), self.rg(a))
    }

    fn gather(&self, a: Var, shape: Vec<usize>, index: Vec<Option<usize>>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            index.iter().map(|i| i.map_or(0.0, |i| x[i])).collect()
        };
        self.push(shape, value, Op::Gather { src: a.0, index }, self.rg(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a);
        let n: usize = old.iter().product();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(Error::shape("reshape", &old, shape));
        }
        Ok(self.gather(a, shape.to_vec(), (0..n).map(Some).collect()))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let index = (0..c)
            .flat_map(|j| (0..r).map(move |i| Some(i * c + j)))
            .collect();
        Ok(self.gather(a, vec![c, r], index))
    }

    /// Repeat a `[1, c]` (or `[c]`) row `n` times: `[n, c]`.
    pub fn expand_rows(&self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a);
        let (r, c) = rows_cols(&s);
        if r != 1 || n == 0 {
            return Err(Error::shape("expand_rows", &s, &[n, c]));
        }
        let index = (0..n).flat_map(|_| (0..c).map(Some)).collect();
        Ok(self.gather(a, vec![n, c], index))
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        let (r, c) = rows_cols(&s);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &s, &[start, end]));
        }
        let index = (start * c..end * c).map(Some).collect();
        Ok(self.gather(a, vec![end - start, c], index))
    }

    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let (r, c) = rows_cols(&s);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("gather_rows", &s, rows));
        }
        let index = rows
            .iter()
            .flat_map(|&i| (0..c).map(move |j| Some(i * c + j)))
            .collect();
        Ok(self.gather(a, vec![rows.len(), c], index))
    }

    /// Entries at the given flat (row-major) offsets, as a `[1, n]` row.
    pub fn pick(&self, a: Var, offsets: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let n: usize = s.iter().product();
        if offsets.is_empty() || offsets.iter().any(|&i| i >= n) {
            return Err(Error::shape("pick", &s, offsets));
        }
        Ok(self.gather(a, vec![1, offsets.len()], offsets.iter().map(|&i| Some(i)).collect()))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        let (r, c) = rows_cols(&s);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &s, &[start, end]));
        }
        let w = end - start;
        let index = (0..r)
            .flat_map(|i| (start..end).map(move |j| Some(i * c + j)))
            .collect();
        Ok(self.gather(a, vec![r, w], index))
    }

    /// Zero-pad or truncate the column count to `width`.
    pub fn fit_cols(&self, a: Var, width: usize) -> Result<Var> {
        let s = self.shape(a);
        let (r, c) = rows_cols(&s);
        if width == 0 {
            return Err(Error::shape("fit_cols", &s, &[width]));
        }
        let index = (0..r)
            .flat_map(|i| (0..width).map(move |j| (j < c).then_some(i * c + j)))
            .collect();
        Ok(self.gather(a, vec![r, width], index))
    }

    fn concat_flat(&self, parts: &[Var], shape: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            parts
                .iter()
                .flat_map(|p| nodes[p.0].value.iter().cloned())
                .collect()
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(shape, value, Op::Concat(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_rows"))?;
        let c = self.cols(*first);
        let mut r = 0;
        for p in parts {
            let s = self.shape(*p);
            let (pr, pc) = rows_cols(&s);
            if pc != c {
                return Err(Error::shape("concat_rows", &[c], &s));
            }
            r += pr;
        }
        Ok(self.concat_flat(parts, vec![r, c]))
    }

    /// Place matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let r = self.rows(*first);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let (pr, pc) = rows_cols(&s);
            if pr != r {
                return Err(Error::shape("concat_cols", &[r], &s));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let flat = self.concat_flat(parts, vec![r * total]);
        let mut offsets = Vec::with_capacity(widths.len());
        let mut off = 0;
        for w in &widths {
            offsets.push(off);
            off += r * w;
        }
        let mut index = Vec::with_capacity(r * total);
        for i in 0..r {
            for (w, o) in widths.iter().zip(&offsets) {
                index.extend((0..*w).map(|j| Some(o + i * w + j)));
            }
        }
        Ok(self.gather(flat, vec![r, total], index))
    }

    /// Patch extraction over a `[h*w, channels]` grid (row-major positions)
    /// with a `kh × kw` window. Output `[oh*ow, kh*kw*channels]`, zero padded.
    fn im2col(
        &self,
        x: Var,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Result<(Var, usize, usize)> {
        let s = self.shape(x);
        let (r, ch) = rows_cols(&s);
        if r != h * w || kh * kw == 0 || sh * sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape("im2col", &s, &[h, w, kh, kw]));
        }
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let mut index = Vec::with_capacity(oh * ow * kh * kw * ch);
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for c in 0..ch {
                            index.push(inside.then(|| (iy as usize * w + ix as usize) * ch + c));
                        }
                    }
                }
            }
        }
        Ok((self.gather(x, vec![oh * ow, kh * kw * ch], index), oh, ow))
    }

    /// 2-D convolution over a `[h*w, c_in]` grid with a square kernel.
    /// `weight` is `[k*k*c_in, c_out]`, `bias` is `[1, c_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &self,
        x: Var,
        (h, w): (usize, usize),
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, usize, usize)> {
        let (cols, oh, ow) = self.im2col(x, (h, w), (kernel, kernel), (stride, stride), (pad, pad))?;
        let y = self.matmul(cols, weight)?;
        let b = self.expand_rows(bias, oh * ow)?;
        Ok((self.add(y, b)?, oh, ow))
    }

    /// 1-D convolution over a `[len, c_in]` sequence; `weight` is `[k*c_in, c_out]`.
    pub fn conv1d(
        &self,
        x: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let len = self.rows(x);
        let (cols, oh, _) = self.im2col(x, (len, 1), (kernel, 1), (stride, 1), (pad, 0))?;
        let y = self.matmul(cols, weight)?;
        let b = self.expand_rows(bias, oh)?;
        self.add(y, b)
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// `log Σ exp(x)` over all entries, shifted by the (constant) max.
    pub fn logsumexp(&self, a: Var) -> Var {
        let m = self.nodes.borrow()[a.0]
            .value
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.add_scalar(a, -m);
        let e = self.exp(shifted);
        let s = self.sum(e);
        let l = self.log(s);
        self.add_scalar(l, m)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if nodes[*a].requires_grad {
                        let ga = mm_bt(&gout, &nodes[*b].value, m, nn, k);
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = mm_at(&nodes[*a].value, &gout, m, k, nn);
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let ga = gout.iter().zip(&nodes[*b].value).map(|(g, y)| g * y).collect();
                    let gb = gout.iter().zip(&nodes[*a].value).map(|(g, x)| g * x).collect();
                    acc(&mut grads, &nodes, *a, ga);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &nodes, *a, gout.iter().map(|g| g * c).collect());
                }
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, gout),
                Op::Tanh(a) => {
                    let g = gout.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = gout.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Exp(a) => {
                    let g = gout.iter().zip(&node.value).map(|(g, y)| g * y).collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Log(a) => {
                    let g = gout.iter().zip(&nodes[*a].value).map(|(g, x)| g / x).collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let g = gout
                        .iter()
                        .zip(&nodes[*a].value)
                        .map(|(g, x)| if x < lo || x > hi { 0.0 } else { *g })
                        .collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = rows_cols(&node.shape);
                    let y = &node.value;
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| gout[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            g[i * c + j] = y[i * c + j] * (gout[i * c + j] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::LayerNormRows { src, inv_std } => {
                    let (r, c) = rows_cols(&node.shape);
                    let y = &node.value;
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        let gy = &gout[i * c..(i + 1) * c];
                        let yy = &y[i * c..(i + 1) * c];
                        let mean_g = gy.iter().sum::<f64>() / c as f64;
                        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            g[i * c + j] = inv_std[i] * (gy[j] - mean_g - yy[j] * mean_gy);
                        }
                    }
                    acc(&mut grads, &nodes, *src, g);
                }
                Op::SumAll(a) => {
                    let len = nodes[*a].value.len();
                    acc(&mut grads, &nodes, *a, vec![gout[0]; len]);
                }
                Op::SumSq(a) => {
                    let g = nodes[*a].value.iter().map(|x| 2.0 * x * gout[0]).collect();
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::MeanRows(a) => {
                    let (r, c) = rows_cols(&nodes[*a].shape);
                    let mut g = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] = gout[j] / r as f64;
                        }
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Gather { src, index } => {
                    let mut g = vec![0.0; nodes[*src].value.len()];
                    for (o, i) in index.iter().enumerate() {
                        if let Some(i) = i {
                            g[*i] += gout[o];
                        }
                    }
                    acc(&mut grads, &nodes, *src, g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[*p].value.len();
                        acc(&mut grads, &nodes, *p, gout[off..off + len].to_vec());
                        off += len;
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }

    /// Backward pass that adds parameter gradients into `ps`.
    pub fn backward_into(&self, loss: Var, ps: &mut ParamSet) -> Result<()> {
        self.backward(loss)?.accumulate_into(ps)
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, String)>,
}

impl Gradients {
    /// Gradient of a leaf node.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(_, n)| n == name)
            .and_then(|(id, _)| self.grads[*id].as_deref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(_, n)| n.as_str())
    }

    pub fn accumulate_into(&self, ps: &mut ParamSet) -> Result<()> {
        for (id, name) in &self.params {
            if let Some(g) = &self.grads[*id] {
                ps.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
