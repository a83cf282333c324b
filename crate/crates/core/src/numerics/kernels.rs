use super::graph::{Graph, Var};
use super::{NumericsError, Result, Tensor};

const NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d(Box<ConvSaved>),
    Upsample2x { x: Var },
    AvgPool { x: Var },
    Softmax { x: Var, axis: usize },
    Silu { x: Var },
    Relu { x: Var },
    GroupNorm(Box<NormSaved>),
    Embedding { table: Var, ids: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Mean { x: Var },
}

pub(crate) struct ConvSaved {
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
}

pub(crate) struct NormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d(s) => {
                let mut v = vec![s.x, s.w];
                v.extend(s.b);
                v
            }
            Op::GroupNorm(s) => vec![s.x, s.gamma, s.beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Upsample2x { x }
            | Op::AvgPool { x }
            | Op::Softmax { x, .. }
            | Op::Silu { x }
            | Op::Relu { x }
            | Op::Narrow { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![*x],
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of logical shape m×k and
/// `op(b)` of logical shape k×n. A transposed operand is stored in the other
/// orientation (k×m for a, n×k for b).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly m*k, k*n and m*n elements of
    // the slices, whose lengths are checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed against `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let last = rank - 1;
    let inner = out[last];
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, ia + j * sa[last], ib + j * sb[last]);
        }
        o += inner;
        if o >= total {
            break;
        }
        // odometer over the leading axes
        let mut d = last;
        loop {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// (outer, axis length, inner) factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let plane = ho * wo;
    let mut cols = vec![0.0; c * k * k * plane];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let d = &mut dst[oy * wo + lo..oy * wo + hi];
                    let first = lo * stride + kx - pad;
                    if stride == 1 {
                        d.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src[first + j * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` lies in `0..w`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w + lo * stride + kx - pad;
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, v) in dx[base..base + (hi - lo)].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dx[base + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Graph<'p> {
    fn mismatch(kernel: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
        NumericsError::ShapeMismatch { kernel, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    /// Matrix product of rank-2 tensors, optionally transposing either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, 0.0);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution of a single C×H×W map with O×C×k×k weights and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(Self::mismatch("conv2d", &sx, &sw));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Self::mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Self::mismatch("conv2d(bias)", &sw, self.shape(b)));
            }
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let plane = ho * wo;
        let cols = im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo);
        let mut out = vec![0.0; o * plane];
        if let Some(b) = b {
            for (oc, bv) in self.value(b).data().iter().enumerate() {
                out[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v = *bv);
            }
        }
        gemm(o, c * k * k, plane, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let cols = if self.grad_enabled() { cols } else { Vec::new() };
        let saved = ConvSaved { x, w, b, stride, pad, cols };
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("conv2d", Tensor::new(vec![o, ho, wo], out)?, Op::Conv2d(Box::new(saved)), &parents)
    }

    /// Nearest-neighbour ×2 upsampling of a C×H×W map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NumericsError::Shape(format!("upsample2x: expected C×H×W, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ci * 2 * h + y) * 2 * w + xx] = xd[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push("upsample2x", Tensor::new(vec![c, 2 * h, 2 * w], out)?, Op::Upsample2x { x }, &[x])
    }

    /// Adaptive average pool of a C×H×W map to 1×1, returned as a length-C vector.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NumericsError::Shape(format!("avg_pool: expected C×H×W, got {s:?}")));
        }
        let hw = s[1] * s[2];
        let out: Vec<f64> = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        self.push("avg_pool", Tensor::new(vec![s[0]], out)?, Op::AvgPool { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(NumericsError::Shape(format!("softmax: axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        self.push("softmax", Tensor::new(s, out)?, Op::Softmax { x, axis }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("silu", t, Op::Silu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("relu", t, Op::Relu { x }, &[x])
    }

    /// Group normalization of a C×H×W map with per-channel affine parameters.
    /// `groups == C` gives instance normalization.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || groups == 0 || !s[0].is_multiple_of(groups) {
            return Err(NumericsError::Shape(format!("group_norm: {groups} groups do not divide {s:?}")));
        }
        let c = s[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Self::mismatch("group_norm", &s, self.shape(gamma)));
        }
        let hw = s[1] * s[2];
        let per = c / groups * hw;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; xd.len()];
        for g in 0..groups {
            let span = g * per..(g + 1) * per;
            let mean = xd[span.clone()].iter().sum::<f64>() / per as f64;
            let var = xd[span.clone()].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[g] = is;
            for i in span {
                let ch = i / hw;
                xhat[i] = (xd[i] - mean) * is;
                out[i] = xhat[i] * gd[ch] + bd[ch];
            }
        }
        let saved = NormSaved { x, gamma, beta, groups, xhat, inv_std };
        self.push("group_norm", Tensor::new(s, out)?, Op::GroupNorm(Box::new(saved)), &[x, gamma, beta])
    }

    /// Rows of a V×D table selected by `ids`, as n×D.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("embedding: table must be V×D, got {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(NumericsError::Shape(format!("embedding: id {bad} out of table with {} rows", s[0])));
        }
        let d = s[1];
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        self.push("embedding", Tensor::new(vec![ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    fn binary(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Self::mismatch(kernel, &sa, &sb))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let out = if sa == sb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; n];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
            out
        };
        Ok((Tensor::new(out_shape.clone(), out)?, out_shape))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|p| self.shape(*p).to_vec())
            .ok_or_else(|| NumericsError::Shape("concat: no inputs".into()))?;
        if axis >= first.len() {
            return Err(NumericsError::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(NumericsError::Shape(format!("narrow: [{start}, {}) along axis {axis} of {s:?}", start + len)));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("narrow", Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("transpose: expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push("scale", t, Op::Scale { x, c }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.sum() / t.numel().max(1) as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Linear layer on rows: `x` n×in, `w` in×out, `b` out.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}

/// Applies the backward rule of node `v` given its upstream gradient `g`.
pub(crate) fn backward_node(graph: &Graph<'_>, v: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &graph.nodes[v.0];
    let out = graph.value(v);
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let sa = graph.shape(a);
            let k = if ta { sa[0] } else { sa[1] };
            let (ad, bd) = (graph.value(a).data(), graph.value(b).data());
            if let Some(ga) = graph.grad_buf(grads, a) {
                if ta {
                    gemm(k, n, m, bd, tb, g, true, ga, 1.0);
                } else {
                    gemm(m, n, k, g, false, bd, !tb, ga, 1.0);
                }
            }
            if let Some(gb) = graph.grad_buf(grads, b) {
                if tb {
                    gemm(n, m, k, g, true, ad, ta, gb, 1.0);
                } else {
                    gemm(k, m, n, ad, !ta, g, false, gb, 1.0);
                }
            }
        }
        Op::Conv2d(s) => {
            let sx = graph.shape(s.x);
            let (c, h, w) = (sx[0], sx[1], sx[2]);
            let sw = graph.shape(s.w);
            let (o, k) = (sw[0], sw[2]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let plane = ho * wo;
            if let Some(gw) = graph.grad_buf(grads, s.w) {
                gemm(o, plane, c * k * k, g, false, &s.cols, true, gw, 1.0);
            }
            if let Some(b) = s.b {
                if let Some(gb) = graph.grad_buf(grads, b) {
                    for (oc, gbv) in gb.iter_mut().enumerate() {
                        *gbv += g[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
            if graph.requires_grad(s.x) {
                let mut dcols = vec![0.0; c * k * k * plane];
                gemm(c * k * k, o, plane, graph.value(s.w).data(), true, g, false, &mut dcols, 0.0);
                if let Some(gx) = graph.grad_buf(grads, s.x) {
                    col2im(&dcols, gx, c, h, w, k, s.stride, s.pad, ho, wo);
                }
            }
        }
        Op::Upsample2x { x } => {
            let s = graph.shape(*x);
            let (c, h, w) = (s[0], s[1], s[2]);
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[(ci * h + y / 2) * w + xx / 2] += g[(ci * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
        }
        Op::AvgPool { x } => {
            let s = graph.shape(*x);
            let hw = s[1] * s[2];
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for (i, gv) in gx.iter_mut().enumerate() {
                    *gv += g[i / hw] / hw as f64;
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Silu { x } => {
            let xd = graph.value(*x).data();
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for ((gv, &xv), &gi) in gx.iter_mut().zip(xd).zip(g) {
                    let s = sigmoid(xv);
                    *gv += gi * s * (1.0 + xv * (1.0 - s));
                }
            }
        }
        Op::Relu { x } => {
            let xd = graph.value(*x).data();
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for ((gv, &xv), &gi) in gx.iter_mut().zip(xd).zip(g) {
                    if xv > 0.0 {
                        *gv += gi;
                    }
                }
            }
        }
        Op::GroupNorm(s) => {
            let shape = graph.shape(s.x);
            let hw = shape[1] * shape[2];
            let per = shape[0] / s.groups * hw;
            let gamma = graph.value(s.gamma).data();
            if let Some(gg) = graph.grad_buf(grads, s.gamma) {
                for (i, (&gi, &xh)) in g.iter().zip(&s.xhat).enumerate() {
                    gg[i / hw] += gi * xh;
                }
            }
            if let Some(gb) = graph.grad_buf(grads, s.beta) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[i / hw] += gi;
                }
            }
            if let Some(gx) = graph.grad_buf(grads, s.x) {
                for grp in 0..s.groups {
                    let span = grp * per..(grp + 1) * per;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in span.clone() {
                        let d = g[i] * gamma[i / hw];
                        sum_d += d;
                        sum_dx += d * s.xhat[i];
                    }
                    let nf = per as f64;
                    let is = s.inv_std[grp];
                    for i in span {
                        let d = g[i] * gamma[i / hw];
                        gx[i] += is / nf * (nf * d - sum_d - s.xhat[i] * sum_dx);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = graph.shape(*table)[1];
            if let Some(gt) = graph.grad_buf(grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            reduce_into(graph, grads, *a, out.shape(), |o, _| g[o]);
            reduce_into(graph, grads, *b, out.shape(), |o, _| sign * g[o]);
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let shape = out.shape();
            let (sa, sb) = (graph.shape(a).to_vec(), graph.shape(b).to_vec());
            let (ta, tb) = (broadcast_strides(&sa, shape), broadcast_strides(&sb, shape));
            let (ad, bd) = (graph.value(a).data(), graph.value(b).data());
            if let Some(ga) = graph.grad_buf(grads, a) {
                if sa == sb {
                    ga.iter_mut().zip(g).zip(bd).for_each(|((d, gi), bv)| *d += gi * bv);
                } else {
                    for_each_broadcast(shape, &ta, &tb, |o, ia, ib| ga[ia] += g[o] * bd[ib]);
                }
            }
            if let Some(gb) = graph.grad_buf(grads, b) {
                if sa == sb {
                    gb.iter_mut().zip(g).zip(ad).for_each(|((d, gi), av)| *d += gi * av);
                } else {
                    for_each_broadcast(shape, &ta, &tb, |o, ia, ib| gb[ib] += g[o] * ad[ia]);
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = graph.shape(*p)[*axis];
                if let Some(gp) = graph.grad_buf(grads, *p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            gp[dst + j] += g[src + j];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, full, inner) = split_axis(graph.shape(*x), *axis);
            let len = out.shape()[*axis];
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    for j in 0..len * inner {
                        gx[dst + j] += g[o * len * inner + j];
                    }
                }
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (graph.shape(*x)[0], graph.shape(*x)[1]);
            if let Some(gx) = graph.grad_buf(grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = graph.grad_buf(grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = graph.grad_buf(grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = graph.grad_buf(grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { x } => {
            if let Some(gx) = graph.grad_buf(grads, *x) {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
    }
}

/// Sums an output-shaped gradient down onto a (possibly broadcast) operand.
fn reduce_into(
    graph: &Graph<'_>,
    grads: &mut [Option<Vec<f64>>],
    operand: Var,
    out_shape: &[usize],
    g: impl Fn(usize, usize) -> f64,
) {
    let s = graph.shape(operand).to_vec();
    let Some(buf) = graph.grad_buf(grads, operand) else { return };
    if s == out_shape {
        for (i, d) in buf.iter_mut().enumerate() {
            *d += g(i, i);
        }
    } else {
        let st = broadcast_strides(&s, out_shape);
        let zero = vec![0; out_shape.len()];
        for_each_broadcast(out_shape, &st, &zero, |o, ia, _| buf[ia] += g(o, ia));
    }
}
