//! Dense f64 tensors with a reverse-mode tape.
//!
//! Tensors are plain values; differentiable programs are recorded on a
//! [`Tape`], one per training step. All public operations reject non-finite
//! results so NaN/Inf never propagates silently.

use crate::error::{Error, Result};
use rand::distributions::Uniform;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Param(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![x],
        }
    }

    /// 1×n row vector.
    pub fn vector(vals: &[f64]) -> Self {
        Tensor {
            shape: vec![1, vals.len()],
            data: vals.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Param("from_rows: no rows".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        // a plain sum is finite iff every term is, at any magnitude this
        // library produces, and it vectorizes where a per-element
        // is_finite test does not
        self.data.iter().sum::<f64>().is_finite()
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {ctx}")))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// value-level linear algebra used by forward ops and backward closures

pub fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(b.rows(), k);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a · bᵀ
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    debug_assert_eq!(b.cols(), k);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            out.data[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ · b
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(b.rows(), k);
    let mut out = Tensor::zeros(m, n);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Deterministic, named-stream random generator. Identical (seed, label)
/// pairs reproduce identical sample streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(splitmix64(seed)))
    }

    /// Independent substream keyed by a label, so adding or removing one
    /// component's draws does not shift another's.
    pub fn named(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in label.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        Rng(ChaCha8Rng::seed_from_u64(splitmix64(seed ^ h)))
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).unwrap().sample(&mut self.0)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.sample(Uniform::new(lo, hi))
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.0.gen_bool(p)
    }

    pub fn normal_tensor(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Tensor {
        let dist = Normal::new(mean, std).unwrap();
        Tensor {
            shape: vec![rows, cols],
            data: (0..rows * cols).map(|_| dist.sample(&mut self.0)).collect(),
        }
    }

    pub fn uniform_tensor(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        let dist = Uniform::new(lo, hi);
        Tensor {
            shape: vec![rows, cols],
            data: (0..rows * cols).map(|_| self.0.sample(dist)).collect(),
        }
    }

    /// Uniform sample of `n` distinct indices from 0..len, order-stable in
    /// the stream (partial Fisher-Yates).
    pub fn choose_indices(&mut self, len: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = i + self.0.gen_range(0..len - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }

    pub fn shuffled(&mut self, len: usize) -> Vec<usize> {
        self.choose_indices(len, len)
    }
}

/// Seeded orthogonal initialization: QR-style orthonormalization of a
/// Gaussian matrix with sign correction. The smaller-dimension Gram matrix
/// is the identity.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Param("orthogonal_init: zero dimension".into()));
    }
    let transposed = rows > cols;
    let (r, c) = if transposed { (cols, rows) } else { (rows, cols) };
    // r <= c: orthonormalize r rows of length c
    let g = rng.normal_tensor(if transposed { rows } else { r }, if transposed { cols } else { c }, 0.0, 1.0);
    let g = if transposed { g.transpose() } else { g };
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        let mut v: Vec<f64> = g.row(i).to_vec();
        // two passes of modified Gram-Schmidt for numerical safety
        for _ in 0..2 {
            for prev in q.iter() {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("orthogonal_init: rank deficiency".into()));
        }
        // sign correction: make the first significant entry of the original
        // direction positive, so the factorization is deterministic
        let sign = {
            let dot: f64 = v.iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                -1.0
            } else {
                1.0
            }
        };
        for x in v.iter_mut() {
            *x *= sign / norm;
        }
        q.push(v);
    }
    let thin = Tensor::from_rows(&q)?;
    Ok(if transposed { thin.transpose() } else { thin })
}

pub type Var = usize;

type GradFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
    /// Set when this node is a contiguous row slice of `parents[0]`
    /// starting at the given row. The backward pass then adds the gradient
    /// into the parent's buffer in place, proportional to the slice size
    /// rather than the parent size.
    row_slice: Option<usize>,
}

/// Reverse-mode tape. One per training step; never shared across threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape handle after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, grad_fn: Option<GradFn>) -> Result<Var> {
        value.check_finite("tape op")?;
        let requires_grad =
            grad_fn.is_some() && parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            grad_fn: if requires_grad { grad_fn } else { None },
            requires_grad,
            row_slice: None,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Tracked leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            requires_grad: true,
            row_slice: None,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Untracked constant (frozen weights, data).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        self.nodes.push(Node {
            value,
            parents: vec![],
            grad_fn: None,
            requires_grad: false,
            row_slice: None,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = ew(va, vb, |x, y| x + y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "sub: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = ew(va, vb, |x, y| x - y);
        self.push(
            out,
            vec![a, b],
            Some(Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.map(|x| -x)),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = ew(va, vb, |x, y| x * y);
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| ew(g, &cb, |x, y| x * y)),
                    need[1].then(|| ew(g, &ca, |x, y| x * y)),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "div: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        if vb.data().iter().any(|x| x.abs() < 1e-300) {
            return Err(Error::Numeric("div: divisor too close to zero".into()));
        }
        let out = ew(va, vb, |x, y| x / y);
        let (ca, cb) = (va.clone(), vb.clone());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| ew(g, &cb, |x, y| x / y)),
                    need[1].then(|| {
                        let mut t = ew(g, &ca, |x, y| x * y);
                        for (x, y) in t.data_mut().iter_mut().zip(cb.data()) {
                            *x = -*x / (y * y);
                        }
                        t
                    }),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a].value.map(|x| c * x);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| vec![need[0].then(|| g.map(|x| c * x))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a].value.map(|x| x + c);
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, need| vec![need[0].then(|| g.clone())])),
        )
    }

    /// mat [n×d] + row [1×d] broadcast over rows.
    pub fn add_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (&self.nodes[mat].value, &self.nodes[row].value);
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                vm.shape(),
                vr.shape()
            )));
        }
        let (n, d) = (vm.rows(), vm.cols());
        let mut out = vm.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] += vr.data()[j];
            }
        }
        self.push(
            out,
            vec![mat, row],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| {
                        let mut r = Tensor::zeros(1, d);
                        for i in 0..g.rows() {
                            for j in 0..d {
                                r.data_mut()[j] += g.at(i, j);
                            }
                        }
                        r
                    }),
                ]
            })),
        )
    }

    /// vec [1×k] − scalar [1×1] broadcast.
    pub fn sub_scalar_var(&mut self, vec: Var, s: Var) -> Result<Var> {
        let (vv, vs) = (&self.nodes[vec].value, &self.nodes[s].value);
        if vs.len() != 1 {
            return Err(Error::Shape("sub_scalar_var: rhs not scalar".into()));
        }
        let sv = vs.item();
        let out = vv.map(|x| x - sv);
        self.push(
            out,
            vec![vec, s],
            Some(Box::new(|g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| Tensor::scalar(-g.data().iter().sum::<f64>())),
                ]
            })),
        )
    }

    /// mat scaled by a tape scalar.
    pub fn scale_by(&mut self, mat: Var, s: Var) -> Result<Var> {
        let (vm, vs) = (&self.nodes[mat].value, &self.nodes[s].value);
        if vs.len() != 1 {
            return Err(Error::Shape("scale_by: scalar expected".into()));
        }
        let sv = vs.item();
        let out = vm.map(|x| sv * x);
        let cm = vm.clone();
        self.push(
            out,
            vec![mat, s],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.map(|x| sv * x)),
                    need[1].then(|| {
                        Tensor::scalar(g.data().iter().zip(cm.data()).map(|(a, b)| a * b).sum())
                    }),
                ]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.cols() != vb.rows() {
            return Err(Error::Shape(format!(
                "matmul: {:?} × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = matmul_nn(va, vb);
        // each operand is only needed to form the other's gradient; B is
        // stored transposed so dA = g · Bᵀ runs on the row-streaming kernel
        // (same addition order per output element, so results are unchanged)
        let ca = self.nodes[b].requires_grad.then(|| va.clone());
        let cbt = self.nodes[a].requires_grad.then(|| vb.transpose());
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| matmul_nn(g, cbt.as_ref().unwrap())),
                    need[1].then(|| matmul_tn(ca.as_ref().unwrap(), g)),
                ]
            })),
        )
    }

    pub fn transpose_var(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a].value.transpose();
        self.push(
            out,
            vec![a],
            Some(Box::new(|g, need| vec![need[0].then(|| g.transpose())])),
        )
    }

    /// Row-wise softmax of x/temperature.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let va = &self.nodes[a].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = va.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] / temperature - m).exp();
                out.data_mut()[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out.data_mut()[i * d + j] /= sum;
            }
        }
        let y = out.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let (n, d) = (y.rows(), y.cols());
                    let mut dx = Tensor::zeros(n, d);
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx.data_mut()[i * d + j] = yr[j] * (gr[j] - dot) / temperature;
                        }
                    }
                    dx
                })]
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        let va = &self.nodes[a].value;
        let mut out = Tensor::zeros(va.rows(), va.cols());
        // tanh is the expensive part; cache it for the backward pass
        let mut tanh_u = Tensor::zeros(va.rows(), va.cols());
        for (k, &x) in va.data().iter().enumerate() {
            let t = (C * (x + 0.044715 * x * x * x)).tanh();
            tanh_u.data_mut()[k] = t;
            out.data_mut()[k] = 0.5 * x * (1.0 + t);
        }
        let cx = va.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut dx = g.clone();
                    for ((d, &x), &t) in dx.data_mut().iter_mut().zip(cx.data()).zip(tanh_u.data())
                    {
                        *d *= 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
                    }
                    dx
                })]
            })),
        )
    }

    /// Per-row layer norm with learnable gain/bias rows [1×d].
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (
            &self.nodes[x].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        let (n, d) = (vx.rows(), vx.cols());
        if vg.shape() != [1, d] || vb.shape() != [1, d] {
            return Err(Error::Shape("layer_norm_rows: gain/bias shape".into()));
        }
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.data_mut()[i * d + j] = h;
                out.data_mut()[i * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let cg = vg.clone();
        self.push(
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g, need| {
                let (n, d) = (xhat.rows(), xhat.cols());
                let dx = need[0].then(|| {
                    let mut dx = Tensor::zeros(n, d);
                    for i in 0..n {
                        let hr = xhat.row(i);
                        let gr = g.row(i);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gg = gr[j] * cg.data()[j];
                            m1 += gg;
                            m2 += gg * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gg = gr[j] * cg.data()[j];
                            dx.data_mut()[i * d + j] = inv_std[i] * (gg - m1 - hr[j] * m2);
                        }
                    }
                    dx
                });
                let dg = need[1].then(|| {
                    let mut dg = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            dg.data_mut()[j] += g.at(i, j) * xhat.at(i, j);
                        }
                    }
                    dg
                });
                let db = need[2].then(|| {
                    let mut db = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            db.data_mut()[j] += g.at(i, j);
                        }
                    }
                    db
                });
                vec![dx, dg, db]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: empty".into()));
        }
        let d = self.nodes[parts[0]].value.cols();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.cols() != d {
                return Err(Error::Shape("concat_rows: column mismatch".into()));
            }
            sizes.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let total: usize = sizes.iter().sum();
        let out = Tensor::new(vec![total, d], data)?;
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, need| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for (i, &r) in sizes.iter().enumerate() {
                    grads.push(need[i].then(|| {
                        Tensor::new(vec![r, d], g.data()[start * d..(start + r) * d].to_vec())
                            .unwrap()
                    }));
                    start += r;
                }
                grads
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a].value;
        let (n, d) = (va.rows(), va.cols());
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice_rows: {start}..{end} of {n}")));
        }
        let out = Tensor::new(vec![end - start, d], va.data()[start * d..end * d].to_vec())?;
        out.check_finite("tape op")?;
        let requires_grad = self.nodes[a].requires_grad;
        self.nodes.push(Node {
            value: out,
            parents: vec![a],
            grad_fn: None,
            requires_grad,
            row_slice: Some(start),
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a].value;
        let (n, d) = (va.rows(), va.cols());
        if start >= end || end > d {
            return Err(Error::Shape(format!("slice_cols: {start}..{end} of {d}")));
        }
        let w = end - start;
        let mut out = Tensor::zeros(n, w);
        for i in 0..n {
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&va.row(i)[start..end]);
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut full = Tensor::zeros(n, d);
                    for i in 0..n {
                        full.data_mut()[i * d + start..i * d + end].copy_from_slice(g.row(i));
                    }
                    full
                })]
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: empty".into()));
        }
        let n = self.nodes[parts[0]].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.rows() != n {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(n, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p].value;
            for i in 0..n {
                out.data_mut()[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, need| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(need[i].then(|| {
                        let mut part = Tensor::zeros(n, w);
                        for r in 0..n {
                            part.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        part
                    }));
                    off += w;
                }
                grads
            })),
        )
    }

    /// Elementwise power with real exponent; inputs must be positive when
    /// the exponent is non-integer.
    pub fn pow_elem(&mut self, a: Var, p: f64) -> Result<Var> {
        let va = &self.nodes[a].value;
        if p.fract() != 0.0 && va.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric(
                "pow_elem: non-positive base with fractional exponent".into(),
            ));
        }
        let out = va.map(|x| x.powf(p));
        let cx = va.clone();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| ew(g, &cx, |gi, xi| gi * p * xi.powf(p - 1.0)))]
            })),
        )
    }

    /// mat [n×d] ⊙ row [1×d] broadcast over rows.
    pub fn mul_row(&mut self, mat: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (&self.nodes[mat].value, &self.nodes[row].value);
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(Error::Shape(format!(
                "mul_row: {:?} ⊙ {:?}",
                vm.shape(),
                vr.shape()
            )));
        }
        let (n, d) = (vm.rows(), vm.cols());
        let mut out = vm.clone();
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] *= vr.data()[j];
            }
        }
        let (cm, cr) = (vm.clone(), vr.clone());
        self.push(
            out,
            vec![mat, row],
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| {
                        let mut dm = g.clone();
                        for i in 0..n {
                            for j in 0..d {
                                dm.data_mut()[i * d + j] *= cr.data()[j];
                            }
                        }
                        dm
                    }),
                    need[1].then(|| {
                        let mut dr = Tensor::zeros(1, d);
                        for i in 0..n {
                            for j in 0..d {
                                dr.data_mut()[j] += g.at(i, j) * cm.at(i, j);
                            }
                        }
                        dr
                    }),
                ]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = &self.nodes[a].value;
        let old = va.shape().to_vec();
        let out = va.reshape(shape)?;
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| g.reshape(old.clone()).unwrap())]
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a].value;
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.data().iter().sum());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let gv = g.item();
                    Tensor::new(shape.clone(), vec![gv; shape.iter().product()]).unwrap()
                })]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a].value.len();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Element of a row vector as a tape scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = &self.nodes[a].value;
        if va.rows() != 1 || i >= va.cols() {
            return Err(Error::Shape(format!(
                "index: {i} out of [1×{}]",
                va.cols()
            )));
        }
        let k = va.cols();
        let out = Tensor::scalar(va.data()[i]);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let mut t = Tensor::zeros(1, k);
                    t.data_mut()[i] = g.item();
                    t
                })]
            })),
        )
    }

    /// Identity in value; gradient passes only when `pass_grad` is set
    /// (stop-gradient gate).
    pub fn gate(&mut self, a: Var, pass_grad: bool) -> Result<Var> {
        let out = self.nodes[a].value.clone();
        let shape = out.shape().to_vec();
        if pass_grad {
            self.push(
                out,
                vec![a],
                Some(Box::new(|g, need| vec![need[0].then(|| g.clone())])),
            )
        } else {
            self.push(
                out,
                vec![a],
                Some(Box::new(move |_, need| {
                    vec![need[0].then(|| {
                        Tensor::new(shape.clone(), vec![0.0; shape.iter().product()]).unwrap()
                    })]
                })),
            )
        }
    }

    /// Mean cross-entropy over logit rows [b×C] with integer labels.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = &self.nodes[logits].value;
        let (b, c) = (vl.rows(), vl.cols());
        if labels.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy: {b} rows, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} >= {c} classes")));
        }
        let mut probs = Tensor::zeros(b, c);
        let mut loss = 0.0;
        for i in 0..b {
            let row = vl.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs.data_mut()[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs.data_mut()[i * c + j] /= sum;
            }
            loss -= (probs.at(i, labels[i])).ln();
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| {
                    let gv = g.item();
                    let mut dl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        dl.data_mut()[i * c + l] -= 1.0;
                    }
                    dl.map(|x| x * gv / b as f64)
                })]
            })),
        )
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if let Some(start) = node.row_slice {
                if !node.requires_grad {
                    continue;
                }
                let Some(g) = grads[id].take() else {
                    continue;
                };
                g.check_finite("backward")?;
                let p = node.parents[0];
                let pv = &self.nodes[p].value;
                let (pn, pd) = (pv.rows(), pv.cols());
                let acc = grads[p].get_or_insert_with(|| Tensor::zeros(pn, pd));
                let dst = &mut acc.data_mut()[start * pd..start * pd + g.len()];
                for (a, b) in dst.iter_mut().zip(g.data()) {
                    *a += b;
                }
                grads[id] = Some(g);
                continue;
            }
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let need: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = grad_fn(&g, &need);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                pg.check_finite("backward")?;
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Max relative error between analytic gradients and central finite
/// differences of `f` at `params`. Entries of `analytic` that are `None`
/// mark frozen parameters and are skipped.
pub fn grad_check(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    analytic: &[Option<Tensor>],
    h: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Contract("grad_check: length mismatch".into()));
    }
    let mut point: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        if grad.shape() != params[pi].shape() {
            return Err(Error::Contract("grad_check: gradient shape mismatch".into()));
        }
        for ci in 0..params[pi].len() {
            let orig = point[pi].data()[ci];
            point[pi].data_mut()[ci] = orig + h;
            let fp = f(&point)?;
            point[pi].data_mut()[ci] = orig - h;
            let fm = f(&point)?;
            point[pi].data_mut()[ci] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Numeric("grad_check: non-finite evaluation".into()));
            }
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad.data()[ci] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
