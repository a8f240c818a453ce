//! Tape-based reverse-mode differentiation over a fixed op vocabulary.
//!
//! Every op appends one node holding its forward value and the record
//! needed for its backward rule. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into every node that transitively
//! depends on a leaf.
//!
//! Shape misuse of an individual op is a programming error and panics;
//! user-facing shape validation happens at the model boundary.

use super::array::Array;
use super::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over an `(h*w) x c` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Pad by repeating edge pixels instead of zeros.
    pub replicate: bool,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    /// Input pixel read by output `(oy, ox)` at tap `(ky, kx)`, if any.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        let (h, w) = (self.in_h as isize, self.in_w as isize);
        if self.replicate {
            Some((iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1)) as usize)
        } else if iy < 0 || iy >= h || ix < 0 || ix >= w {
            None
        } else {
            Some((iy * w + ix) as usize)
        }
    }

    /// Unfold the input into one row per output location.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow, k, cin) = (self.out_h(), self.out_w(), self.kernel, self.cin);
        let plen = self.patch_len();
        let mut cols = vec![T::zero(); oh * ow * plen];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(p) = self.source(oy, ox, ky, kx) {
                            let src = p * cin;
                            let dst = (ky * k + kx) * cin;
                            row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::im2col`].
    pub fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (oh, ow, k, cin) = (self.out_h(), self.out_w(), self.kernel, self.cin);
        let plen = self.patch_len();
        let mut x = vec![T::zero(); self.in_h * self.in_w * cin];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &cols[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(p) = self.source(oy, ox, ky, kx) {
                            let dst = p * cin;
                            let src = (ky * k + kx) * cin;
                            for c in 0..cin {
                                x[dst + c] = x[dst + c] + row[src + c];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Separable bilinear resampling plan (half-pixel centers, edge clamped).
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0, "empty resize");
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            ys: axis_taps(in_h, out_h),
            xs: axis_taps(in_w, out_w),
        }
    }

    pub fn apply<T: Real>(&self, x: &[T], channels: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.out_h * self.out_w * channels];
        for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let dst = (oy * self.out_w + ox) * channels;
                for &(iy, ix, w) in &taps {
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::lit(w);
                    let src = (iy * self.in_w + ix) * channels;
                    for c in 0..channels {
                        out[dst + c] = out[dst + c] + w * x[src + c];
                    }
                }
            }
        }
        out
    }

    pub fn adjoint<T: Real>(&self, dy: &[T], channels: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); self.in_h * self.in_w * channels];
        for (oy, &(y0, y1, fy)) in self.ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in self.xs.iter().enumerate() {
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let src = (oy * self.out_w + ox) * channels;
                for &(iy, ix, w) in &taps {
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::lit(w);
                    let dst = (iy * self.in_w + ix) * channels;
                    for c in 0..channels {
                        dx[dst + c] = dx[dst + c] + w * dy[src + c];
                    }
                }
            }
        }
        dx
    }
}

enum Op<T> {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    MulConst(Var, Array<T>),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: T, hi: T },
    SumAll(Var),
    MeanAll(Var),
    ColSum(Var),
    NormalizeRows { x: Var, norms: Vec<T>, eps: T },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    SegmentMean { x: Var, labels: Vec<usize>, counts: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Resize { x: Var, plan: ResizePlan },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Single-threaded recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows<T: Real>(m: &Array<T>) -> Array<T> {
    let mut out = m.clone();
    let c = m.cols();
    for r in 0..m.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Row-wise layer normalization; returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &Array<T>, gain: &Array<T>, bias: &Array<T>, eps: T) -> (Array<T>, Vec<T>, Vec<T>) {
    let (n, d) = (x.rows(), x.cols());
    assert_eq!(gain.len(), d, "layer_norm gain length");
    assert_eq!(bias.len(), d, "layer_norm bias length");
    let dt = T::from_usize(d).unwrap();
    let mut y = Array::zeros(&[n, d]);
    let mut xhat = vec![T::zero(); n * d];
    let mut rstd = vec![T::zero(); n];
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y.data_mut()[r * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    (y, xhat, rstd)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Array<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// Differentiable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.derived(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.derived(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.derived(v, Op::Mul(a, b), &[a, b])
    }

    /// `x[n x d] + v[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Var {
        let d = self.value(x).cols();
        assert_eq!(self.value(v).len(), d, "add_row vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(&vv) {
                *o = *o + b;
            }
        }
        self.derived(out, Op::AddRow(x, v), &[x, v])
    }

    /// `x[n x d] * v[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Var {
        let d = self.value(x).cols();
        assert_eq!(self.value(v).len(), d, "mul_row vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &g) in row.iter_mut().zip(&vv) {
                *o = *o * g;
            }
        }
        self.derived(out, Op::MulRow(x, v), &[x, v])
    }

    /// `x[n x d] / v[n]`, each row divided by its own scalar.
    pub fn div_col(&mut self, x: Var, v: Var) -> Var {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(v).len(), n, "div_col vector length");
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (row, &s) in out.data_mut().chunks_mut(d).zip(&vv) {
            for o in row.iter_mut() {
                *o = *o / s;
            }
        }
        self.derived(out, Op::DivCol(x, v), &[x, v])
    }

    /// Elementwise product with a constant array (e.g. a validity mask).
    pub fn mul_const(&mut self, x: Var, c: Array<T>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "mul_const length");
        let v = self.value(x).zip_map(&c, |a, b| a * b);
        self.derived(v, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.derived(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a + s);
        self.derived(v, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = self
            .value(a)
            .matmul_t(ta, self.value(b), tb)
            .unwrap_or_else(|e| panic!("{e}"));
        self.derived(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.derived(v, Op::Transpose(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.derived(v, Op::SoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (y, xhat, rstd) = layer_norm(self.value(x), self.value(gain), self.value(bias), eps);
        self.derived(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.derived(v, Op::Gelu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.derived(v, Op::Softplus(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.derived(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.ln());
        self.derived(v, Op::Log(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * a);
        self.derived(v, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.sqrt());
        self.derived(v, Op::Sqrt(x), &[x])
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.derived(v, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).sum());
        self.derived(v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let v = Array::scalar(self.value(x).sum() / n);
        self.derived(v, Op::MeanAll(x), &[x])
    }

    /// Column sums of an `n x d` array, as a length-`d` vector.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut s = vec![T::zero(); d];
        for row in xv.data().chunks(d) {
            for (a, &b) in s.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
        let v = Array::from_vec(&[d], s).unwrap();
        self.derived(v, Op::ColSum(x), &[x])
    }

    /// Scale each row to unit L2 norm, with the norm floored at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for v in row.iter_mut() {
                *v = *v / n;
            }
        }
        self.derived(out, Op::NormalizeRows { x, norms, eps }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let v = Array::from_vec(&[idx.len(), d], data).unwrap();
        self.derived(v, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), d, "concat_rows widths");
            n += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Array::from_vec(&[n, d], data).unwrap();
        self.derived(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), n, "concat_cols heights");
                data.extend_from_slice(pv.row(r));
            }
        }
        let v = Array::from_vec(&[n, total], data).unwrap();
        self.derived(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        assert!(start <= end && end <= xv.rows(), "slice_rows range");
        let v = Array::from_vec(&[end - start, d], xv.data()[start * d..end * d].to_vec()).unwrap();
        self.derived(v, Op::SliceRows(x, start, end), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert!(start <= end && end <= d, "slice_cols range");
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let v = Array::from_vec(&[n, end - start], data).unwrap();
        self.derived(v, Op::SliceCols(x, start, end), &[x])
    }

    /// Per-segment mean of the rows of `x` grouped by `labels`.
    ///
    /// A segment with no rows receives the mean over all rows.
    pub fn segment_mean(&mut self, x: Var, labels: &[usize], n_segments: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        assert_eq!(labels.len(), rows, "segment_mean label count");
        let mut counts = vec![0usize; n_segments];
        let mut sums = vec![T::zero(); n_segments * d];
        let mut total = vec![T::zero(); d];
        for (r, &l) in labels.iter().enumerate() {
            assert!(l < n_segments, "segment label out of range");
            counts[l] += 1;
            for j in 0..d {
                let v = xv.data()[r * d + j];
                sums[l * d + j] = sums[l * d + j] + v;
                total[j] = total[j] + v;
            }
        }
        let all = T::from_usize(rows.max(1)).unwrap();
        for s in 0..n_segments {
            for j in 0..d {
                sums[s * d + j] = if counts[s] > 0 {
                    sums[s * d + j] / T::from_usize(counts[s]).unwrap()
                } else {
                    total[j] / all
                };
            }
        }
        let v = Array::from_vec(&[n_segments, d], sums).unwrap();
        self.derived(
            v,
            Op::SegmentMean {
                x,
                labels: labels.to_vec(),
                counts,
            },
            &[x],
        )
    }

    /// Convolution of an `(in_h*in_w) x cin` map with `weight` of shape
    /// `(k*k*cin) x cout`, laid out `(ky, kx, cin)` along rows.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), geom.in_h * geom.in_w, "conv2d input rows");
        assert_eq!(xv.cols(), geom.cin, "conv2d input channels");
        let wv = self.value(w);
        assert_eq!(wv.shape(), &[geom.patch_len(), geom.cout], "conv2d weight shape");
        let cols = geom.im2col(xv.data());
        let m = geom.out_h() * geom.out_w();
        let mut out = vec![T::zero(); m * geom.cout];
        T::gemm(m, geom.patch_len(), geom.cout, &cols, false, wv.data(), false, &mut out, T::zero());
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), geom.cout, "conv2d bias length");
            for row in out.chunks_mut(geom.cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        let v = Array::from_vec(&[m, geom.cout], out).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.derived(v, Op::Conv2d { x, w, b, geom, cols }, &parents)
    }

    /// Bilinear resampling of an `(h*w) x c` map.
    pub fn resize(&mut self, x: Var, plan: ResizePlan) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), plan.in_h * plan.in_w, "resize input rows");
        let c = xv.cols();
        let v = Array::from_vec(&[plan.out_h * plan.out_w, c], plan.apply(xv.data(), c)).unwrap();
        self.derived(v, Op::Resize { x, plan }, &[x])
    }

    /// Reverse sweep from `out`, seeded with ones.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array::full(self.value(out).shape(), T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(if g.shape() == shape { g } else { g.reshape(shape).unwrap() });
            }
        }
    }

    fn backprop_node(&self, i: usize, gy: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.acc(grads, *a, gy.zip_map(bv, |g, x| g * x));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, gy.zip_map(av, |g, x| g * x));
                }
            }
            Op::AddRow(x, v) => {
                self.acc(grads, *x, gy.clone());
                if self.requires_grad(*v) {
                    let d = gy.cols();
                    let mut s = vec![T::zero(); d];
                    for row in gy.data().chunks(d) {
                        for (a, &g) in s.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    self.acc(grads, *v, Array::from_vec(self.value(*v).shape(), s).unwrap());
                }
            }
            Op::MulRow(x, v) => {
                let d = gy.cols();
                let vv = self.value(*v).data();
                if self.requires_grad(*x) {
                    let mut gx = gy.clone();
                    for row in gx.data_mut().chunks_mut(d) {
                        for (g, &s) in row.iter_mut().zip(vv) {
                            *g = *g * s;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*v) {
                    let xv = self.value(*x).data();
                    let mut s = vec![T::zero(); d];
                    for (grow, xrow) in gy.data().chunks(d).zip(xv.chunks(d)) {
                        for j in 0..d {
                            s[j] = s[j] + grow[j] * xrow[j];
                        }
                    }
                    self.acc(grads, *v, Array::from_vec(self.value(*v).shape(), s).unwrap());
                }
            }
            Op::DivCol(x, v) => {
                let d = gy.cols();
                let vv = self.value(*v).data();
                if self.requires_grad(*x) {
                    let mut gx = gy.clone();
                    for (row, &s) in gx.data_mut().chunks_mut(d).zip(vv) {
                        for g in row.iter_mut() {
                            *g = *g / s;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.requires_grad(*v) {
                    // y = x / v  =>  dv = -sum_j g_j * y_j / v
                    let gv: Vec<T> = gy
                        .data()
                        .chunks(d)
                        .zip(y.data().chunks(d))
                        .zip(vv)
                        .map(|((grow, yrow), &s)| {
                            -grow.iter().zip(yrow).map(|(&g, &yy)| g * yy).sum::<T>() / s
                        })
                        .collect();
                    self.acc(grads, *v, Array::from_vec(self.value(*v).shape(), gv).unwrap());
                }
            }
            Op::MulConst(x, c) => {
                self.acc(grads, *x, gy.zip_map(c, |g, m| g * m));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, gy.map(|g| g * s));
            }
            Op::AddScalar(x) => self.acc(grads, *x, gy.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ta, tb) = (*ta, *tb);
                if self.requires_grad(*a) {
                    let ga = if ta {
                        bv.matmul_t(tb, gy, true)
                    } else {
                        gy.matmul_t(false, bv, !tb)
                    };
                    self.acc(grads, *a, ga.unwrap());
                }
                if self.requires_grad(*b) {
                    let gb = if tb {
                        gy.matmul_t(true, av, ta)
                    } else {
                        av.matmul_t(!ta, gy, false)
                    };
                    self.acc(grads, *b, gb.unwrap());
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, gy.transpose()),
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut gx = gy.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in grow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = gy.cols();
                let dt = T::from_usize(d).unwrap();
                let g = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); gy.len()];
                    for r in 0..gy.rows() {
                        let grow = &gy.data()[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * g[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hrow[j];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for j in 0..d {
                            let dh = grow[j] * g[j];
                            gx[r * d + j] = rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                    self.acc(grads, *x, Array::from_vec(gy.shape(), gx).unwrap());
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for (grow, hrow) in gy.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                            db[j] = db[j] + grow[j];
                        }
                    }
                    self.acc(grads, *gain, Array::from_vec(self.value(*gain).shape(), dg).unwrap());
                    self.acc(grads, *bias, Array::from_vec(self.value(*bias).shape(), db).unwrap());
                }
            }
            Op::Gelu(x) => {
                let gx = gy.zip_map(self.value(*x), |g, a| g * gelu_grad(a));
                self.acc(grads, *x, gx);
            }
            Op::Softplus(x) => {
                let gx = gy.zip_map(self.value(*x), |g, a| g * sigmoid(a));
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, gy.zip_map(y, |g, e| g * e)),
            Op::Log(x) => {
                let gx = gy.zip_map(self.value(*x), |g, a| g / a);
                self.acc(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = gy.zip_map(self.value(*x), |g, a| two * g * a);
                self.acc(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let half = T::lit(0.5);
                self.acc(grads, *x, gy.zip_map(y, |g, s| half * g / s));
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let gx = gy.zip_map(self.value(*x), |g, a| {
                    if a >= lo && a <= hi {
                        g
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let g = gy.data()[0];
                self.acc(grads, *x, Array::full(self.value(*x).shape(), g));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let g = gy.data()[0] / T::from_usize(xv.len()).unwrap();
                self.acc(grads, *x, Array::full(xv.shape(), g));
            }
            Op::ColSum(x) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = Array::zeros(xv.shape());
                for row in gx.data_mut().chunks_mut(d) {
                    row.copy_from_slice(gy.data());
                }
                self.acc(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms, eps } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = gy.clone();
                for (r, grow) in gx.data_mut().chunks_mut(d).enumerate() {
                    let n = norms[r];
                    let yrow = y.row(r);
                    let raw: T = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    if raw < *eps {
                        // norm is floored: y = x / eps is linear in x
                        for g in grow.iter_mut() {
                            *g = *g / n;
                        }
                    } else {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &v)| g * v).sum();
                        for (g, &v) in grow.iter_mut().zip(yrow) {
                            *g = (*g - v * dot) / n;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = Array::zeros(xv.shape());
                for (k, &r) in idx.iter().enumerate() {
                    let src = &gy.data()[k * d..(k + 1) * d];
                    let dst = gx.row_mut(r);
                    for (a, &b) in dst.iter_mut().zip(src) {
                        *a = *a + b;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let d = gy.cols();
                let mut at = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).rows();
                    if self.requires_grad(p) {
                        let g = Array::from_vec(&shape, gy.data()[at * d..(at + n) * d].to_vec()).unwrap();
                        self.acc(grads, p, g);
                    }
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let n = gy.rows();
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(n * w);
                        for r in 0..n {
                            data.extend_from_slice(&gy.row(r)[at..at + w]);
                        }
                        self.acc(grads, p, Array::from_vec(self.value(p).shape(), data).unwrap());
                    }
                    at += w;
                }
            }
            Op::SliceRows(x, start, _end) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = Array::zeros(xv.shape());
                gx.data_mut()[start * d..start * d + gy.len()].copy_from_slice(gy.data());
                self.acc(grads, *x, gx);
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let mut gx = Array::zeros(xv.shape());
                for r in 0..xv.rows() {
                    gx.row_mut(r)[*start..*end].copy_from_slice(gy.row(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::SegmentMean { x, labels, counts } => {
                let xv = self.value(*x);
                let (rows, d) = (xv.rows(), xv.cols());
                let all = T::from_usize(rows.max(1)).unwrap();
                // contribution of empty segments is shared by every row
                let mut shared = vec![T::zero(); d];
                for (s, &c) in counts.iter().enumerate() {
                    if c == 0 {
                        for j in 0..d {
                            shared[j] = shared[j] + gy.data()[s * d + j] / all;
                        }
                    }
                }
                let mut gx = Array::zeros(xv.shape());
                for (r, &l) in labels.iter().enumerate() {
                    let c = T::from_usize(counts[l]).unwrap();
                    let row = gx.row_mut(r);
                    for j in 0..d {
                        row[j] = gy.data()[l * d + j] / c + shared[j];
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let m = geom.out_h() * geom.out_w();
                let plen = geom.patch_len();
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); plen * geom.cout];
                    T::gemm(plen, m, geom.cout, cols, true, gy.data(), false, &mut gw, T::zero());
                    self.acc(grads, *w, Array::from_vec(&[plen, geom.cout], gw).unwrap());
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut gb = vec![T::zero(); geom.cout];
                        for row in gy.data().chunks(geom.cout) {
                            for (a, &g) in gb.iter_mut().zip(row) {
                                *a = *a + g;
                            }
                        }
                        self.acc(grads, *b, Array::from_vec(self.value(*b).shape(), gb).unwrap());
                    }
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![T::zero(); m * plen];
                    T::gemm(m, geom.cout, plen, gy.data(), false, self.value(*w).data(), true, &mut gcols, T::zero());
                    let gx = geom.col2im(&gcols);
                    self.acc(grads, *x, Array::from_vec(self.value(*x).shape(), gx).unwrap());
                }
            }
            Op::Resize { x, plan } => {
                let c = gy.cols();
                let gx = plan.adjoint(gy.data(), c);
                self.acc(grads, *x, Array::from_vec(self.value(*x).shape(), gx).unwrap());
            }
        }
    }
}
