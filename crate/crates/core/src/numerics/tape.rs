//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive in creation order, so node indices are
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.

use std::rc::Rc;

use super::tensor::{gemm, Mask, Real, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;
const NORMALIZE_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    WeightedSum(Var, Rc<[T]>),
    MeanRows(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    NormalizeGroups {
        x: Var,
        group: usize,
        inv: Vec<T>,
    },
    RotatePairs {
        x: Var,
        cos: Rc<[T]>,
        sin: Rc<[T]>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: Var,
        heads: usize,
        probs: Vec<T>,
        raw: Vec<T>,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    ConcatRows(Vec<Var>),
    RowNorms(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Sentinel in a gather index that produces a zero.
pub const GATHER_ZERO: usize = usize::MAX;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node is unreachable from the loss or detached.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Numerically stable softmax over one axis of `data` laid out as
/// `[outer, len, inner]`.
fn softmax_into<T: Real>(data: &[T], out: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (data[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax of a plain tensor along `axis`, outside any tape.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x.data(), &mut out, outer, len, inner);
    Tensor::new(x.shape().to_vec(), out)
}

/// Plain matrix product outside any tape.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions {k} and {k2} differ"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        (m, k, n),
        T::one(),
        a.data(),
        View::row_major(0, k),
        b.data(),
        View::row_major(0, n),
        T::zero(),
        &mut out,
        View::row_major(0, n),
    );
    Tensor::new(vec![m, n], out)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("map keeps shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `a[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(bias);
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::Shape(format!(
                "add_row: bias of {} elements for {n} columns",
                tb.len()
            )));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    fn scalar_of(&self, s: Var, what: &str) -> Result<T> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(Error::Shape(format!(
                "{what}: expected a scalar, got {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    /// `a * s` for a scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "mul_scalar")?;
        let out = self.map(a, |x| x * c);
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    /// `a / s` for a scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s, "div_scalar")?;
        let out = self.map(a, |x| x / c);
        Ok(self.push(out, Op::DivScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, T::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Contract("log of non-positive value".into()));
        }
        let out = self.map(a, T::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `sum_i w[i] * a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, w: Rc<[T]>) -> Result<Var> {
        let ta = self.value(a);
        if ta.len() != w.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} elements",
                w.len(),
                ta.len()
            )));
        }
        let s = ta.data().iter().zip(w.iter()).map(|(&x, &wi)| x * wi).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), &[a]))
    }

    /// Column means of a matrix, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(a), "mean_rows")?;
        let ta = self.value(a);
        let mut out = vec![T::zero(); n];
        for row in ta.data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(a), &[a]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let out = softmax(self.value(x), axis)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != n || tb.len() != n {
            return Err(Error::Shape(format!(
                "layer_norm: affine params of {}/{} for width {n}",
                tg.len(),
                tb.len()
            )));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        let inv_n = T::one() / T::of(n as f64);
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales every contiguous group of `group` columns in each row to unit
    /// L2 norm.
    pub fn normalize_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        if group == 0 || !tx.cols().is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "normalize_groups: width {} not divisible by {group}",
                tx.cols()
            )));
        }
        let mut inv = Vec::with_capacity(tx.len() / group);
        let mut out = tx.data().to_vec();
        for chunk in out.chunks_mut(group) {
            let ss: T = chunk.iter().map(|&v| v * v).sum();
            let i = T::one() / (ss + T::of(NORMALIZE_EPS)).sqrt();
            chunk.iter_mut().for_each(|v| *v *= i);
            inv.push(i);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::NormalizeGroups { x, group, inv }, &[x]))
    }

    /// Rotates consecutive feature pairs of every head by per-row angles.
    /// `cos`/`sin` are `[rows, head_dim / 2]`, shared across heads.
    pub fn rotate_pairs(
        &mut self,
        x: Var,
        cos: Rc<[T]>,
        sin: Rc<[T]>,
        head_dim: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = matrix_dims(tx, "rotate_pairs")?;
        if !head_dim.is_multiple_of(2) || cols % head_dim != 0 {
            return Err(Error::Shape(format!(
                "rotate_pairs: head dim {head_dim} incompatible with width {cols}"
            )));
        }
        let half = head_dim / 2;
        if cos.len() != rows * half || sin.len() != rows * half {
            return Err(Error::Shape("rotate_pairs: angle table size".into()));
        }
        let mut out = tx.data().to_vec();
        for r in 0..rows {
            for h in 0..cols / head_dim {
                for j in 0..half {
                    let (c, s) = (cos[r * half + j], sin[r * half + j]);
                    let i0 = r * cols + h * head_dim + 2 * j;
                    let (x0, x1) = (out[i0], out[i0 + 1]);
                    out[i0] = x0 * c - x1 * s;
                    out[i0 + 1] = x0 * s + x1 * c;
                }
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            out,
            Op::RotatePairs {
                x,
                cos,
                sin,
                head_dim,
            },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [n, C]`, `k, v: [m, C]`, `scale` a scalar node multiplying the
    /// logits, `mask: [n, m]` of allowed pairs. A row with no allowed entry
    /// yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: Var,
        heads: usize,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let tau = self.scalar_of(scale, "attention scale")?;
        let (n, c) = matrix_dims(self.value(q), "attention q")?;
        let (m, ck) = matrix_dims(self.value(k), "attention k")?;
        let (mv, cv) = matrix_dims(self.value(v), "attention v")?;
        if ck != c || cv != c || mv != m {
            return Err(Error::Shape(format!(
                "attention: q [{n},{c}] k [{m},{ck}] v [{mv},{cv}]"
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads for width {c}")));
        }
        if let Some(mk) = mask {
            if mk.rows != n || mk.cols != m {
                return Err(Error::Shape(format!(
                    "attention mask [{},{}] for logits [{n},{m}]",
                    mk.rows, mk.cols
                )));
            }
        }
        let d = c / heads;
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut raw = vec![T::zero(); heads * n * m];
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * c];
        for h in 0..heads {
            let off = h * n * m;
            gemm(
                (n, d, m),
                T::one(),
                qd,
                View::row_major(h * d, c),
                kd,
                View::transposed(h * d, c),
                T::zero(),
                &mut raw,
                View::row_major(off, m),
            );
            for i in 0..n {
                let row = &raw[off + i * m..off + (i + 1) * m];
                let p = &mut probs[off + i * m..off + (i + 1) * m];
                let allowed = |j: usize| mask.is_none_or(|mk| mk.allows(i, j));
                let mut max = T::neg_infinity();
                for j in 0..m {
                    if allowed(j) {
                        max = max.max(tau * row[j]);
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut sum = T::zero();
                for j in 0..m {
                    if allowed(j) {
                        let e = (tau * row[j] - max).exp();
                        p[j] = e;
                        sum += e;
                    }
                }
                let inv = T::one() / sum;
                p.iter_mut().for_each(|x| *x *= inv);
            }
            gemm(
                (n, m, d),
                T::one(),
                &probs,
                View::row_major(off, m),
                vd,
                View::row_major(h * d, c),
                T::zero(),
                &mut out,
                View::row_major(h * d, c),
            );
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                heads,
                probs,
                raw,
            },
            &[q, k, v, scale],
        ))
    }

    /// `out[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i >= tx.len())
        {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range {}",
                tx.len()
            )));
        }
        let data = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    T::zero()
                } else {
                    tx.data()[i]
                }
            })
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(x), "slice_rows")?;
        if start >= end || end > rows {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} of {rows}"
            )));
        }
        let index: Rc<[usize]> = (start * cols..end * cols).collect();
        self.gather(x, index, &[end - start, cols])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(x), "slice_cols")?;
        if start >= end || end > cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} of {cols}"
            )));
        }
        let index: Rc<[usize]> = (0..rows)
            .flat_map(|r| (start..end).map(move |c| r * cols + c))
            .collect();
        self.gather(x, index, &[rows, end - start])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let cols = matrix_dims(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::Shape(format!("concat_rows: {c} vs {cols} columns")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Per-row Euclidean norms, `[m, n] -> [m]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (_, n) = matrix_dims(self.value(x), "row_norms")?;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect::<Vec<_>>();
        let out = Tensor::new(vec![data.len()], data)?;
        Ok(self.push(out, Op::RowNorms(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                acc(*a, &mut |da| {
                    gemm(
                        (m, n, k),
                        T::one(),
                        g,
                        View::row_major(0, n),
                        val(*b),
                        View::transposed(0, n),
                        T::one(),
                        da,
                        View::row_major(0, k),
                    )
                });
                acc(*b, &mut |db| {
                    gemm(
                        (k, m, n),
                        T::one(),
                        val(*a),
                        View::transposed(0, k),
                        g,
                        View::row_major(0, n),
                        T::one(),
                        db,
                        View::row_major(0, n),
                    )
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, &x), &y) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &x), &y) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |da| add_into(da, g));
                let n = self.value(*bias).len();
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::MulScalar(a, s) => {
                let c = val(*s)[0];
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c));
                acc(*s, &mut |ds| {
                    ds[0] += g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum::<T>()
                });
            }
            Op::DivScalar(a, s) => {
                let c = val(*s)[0];
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += x / c));
                acc(*s, &mut |ds| {
                    let dot: T = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum();
                    ds[0] -= dot / (c * c);
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |da| {
                    for ((d, &x), &e) in da.iter_mut().zip(g).zip(y) {
                        *d += x * e;
                    }
                });
            }
            Op::Log(a) => acc(*a, &mut |da| {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(val(*a)) {
                    *d += x / y;
                }
            }),
            Op::Gelu(a) => acc(*a, &mut |da| {
                for ((d, &x), &y) in da.iter_mut().zip(g).zip(val(*a)) {
                    *d += x * gelu_grad(y);
                }
            }),
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::WeightedSum(a, w) => acc(*a, &mut |da| {
                for (d, &wi) in da.iter_mut().zip(w.iter()) {
                    *d += g[0] * wi;
                }
            }),
            Op::MeanRows(a) => {
                let n = g.len();
                let m = self.value(*a).rows();
                let inv = T::one() / T::of(m as f64);
                acc(*a, &mut |da| {
                    for row in da.chunks_mut(n) {
                        for (d, &x) in row.iter_mut().zip(g) {
                            *d += x * inv;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gm = val(*gamma);
                acc(*gamma, &mut |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let inv_n = T::one() / T::of(n as f64);
                    for (r, ((dxr, grow), hrow)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gm[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gm[j];
                            dxr[j] += rstd[r] * (dh - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::NormalizeGroups { x, group, inv } => {
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for (gi, ((dxc, gc), yc)) in dx
                        .chunks_mut(*group)
                        .zip(g.chunks(*group))
                        .zip(y.chunks(*group))
                        .enumerate()
                    {
                        let dot: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                        for j in 0..*group {
                            dxc[j] += inv[gi] * (gc[j] - yc[j] * dot);
                        }
                    }
                });
            }
            Op::RotatePairs {
                x,
                cos,
                sin,
                head_dim,
            } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let half = head_dim / 2;
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        for h in 0..cols / head_dim {
                            for j in 0..half {
                                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                                let i0 = r * cols + h * head_dim + 2 * j;
                                let (g0, g1) = (g[i0], g[i0 + 1]);
                                dx[i0] += g0 * c + g1 * s;
                                dx[i0 + 1] += g1 * c - g0 * s;
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                heads,
                probs,
                raw,
            } => self.attention_backward(
                [*q, *k, *v, *scale],
                *heads,
                probs,
                raw,
                g,
                &mut acc,
            ),
            Op::Gather { x, index } => acc(*x, &mut |dx| {
                for (&i, &gi) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i] += gi;
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::RowNorms(x) => {
                let n = self.value(*x).cols();
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for (r, (dxr, xr)) in dx.chunks_mut(n).zip(val(*x).chunks(n)).enumerate() {
                        if y[r] > T::zero() {
                            let f = g[r] / y[r];
                            for (d, &xv) in dxr.iter_mut().zip(xr) {
                                *d += f * xv;
                            }
                        }
                    }
                });
            }
        }
    }

    fn attention_backward(
        &self,
        [q, k, v, scale]: [Var; 4],
        heads: usize,
        probs: &[T],
        raw: &[T],
        g: &[T],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [T])),
    ) {
        let (n, c) = (self.value(q).rows(), self.value(q).cols());
        let m = self.value(k).rows();
        let d = c / heads;
        let tau = self.value(scale).data()[0];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        // dS per head, shared by the q, k and scale gradients.
        let mut ds = vec![T::zero(); heads * n * m];
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let off = h * n * m;
            gemm(
                (n, d, m),
                T::one(),
                g,
                View::row_major(h * d, c),
                vd,
                View::transposed(h * d, c),
                T::zero(),
                &mut dp,
                View::row_major(0, m),
            );
            for i in 0..n {
                let p = &probs[off + i * m..off + (i + 1) * m];
                let dpr = &dp[i * m..(i + 1) * m];
                let dot: T = p.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                for j in 0..m {
                    ds[off + i * m + j] = p[j] * (dpr[j] - dot);
                }
            }
        }
        acc(v, &mut |dv| {
            for h in 0..heads {
                gemm(
                    (m, n, d),
                    T::one(),
                    probs,
                    View::transposed(h * n * m, m),
                    g,
                    View::row_major(h * d, c),
                    T::one(),
                    dv,
                    View::row_major(h * d, c),
                );
            }
        });
        acc(scale, &mut |dtau| {
            dtau[0] += ds.iter().zip(raw).map(|(&a, &b)| a * b).sum::<T>();
        });
        acc(q, &mut |dq| {
            for h in 0..heads {
                gemm(
                    (n, m, d),
                    tau,
                    &ds,
                    View::row_major(h * n * m, m),
                    kd,
                    View::row_major(h * d, c),
                    T::one(),
                    dq,
                    View::row_major(h * d, c),
                );
            }
        });
        acc(k, &mut |dk| {
            for h in 0..heads {
                gemm(
                    (m, n, d),
                    tau,
                    &ds,
                    View::transposed(h * n * m, m),
                    qd,
                    View::row_major(h * d, c),
                    T::one(),
                    dk,
                    View::row_major(h * d, c),
                );
            }
        });
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
