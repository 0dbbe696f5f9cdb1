//! Forward and backward kernels of the differentiable operator set.
//!
//! Backward kernels accumulate into their gradient outputs.

use super::{matmul, Scalar};
use crate::error::{Error, Result};

/// Shape bookkeeping of a zero-padded 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub dims: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: [usize; 5], w: &[usize], stride: usize) -> Result<Self> {
        let [n, dx, dy, dz, cin] = x;
        let [k, k1, k2, wcin, cout] = <[usize; 5]>::try_from(w)
            .map_err(|_| Error::shape(format!("conv weight must be 5D, got {w:?}")))?;
        if k != k1 || k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!("conv kernel must be odd and cubic, got {w:?}")));
        }
        if wcin != cin {
            return Err(Error::shape(format!("conv expects {wcin} input channels, got {cin}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::shape(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let dims = [dx, dy, dz];
        if dims.iter().any(|&d| d % stride != 0) {
            return Err(Error::shape(format!("dims {dims:?} not divisible by stride {stride}")));
        }
        Ok(ConvGeom {
            n,
            dims,
            cin,
            cout,
            k,
            stride,
            out: dims.map(|d| d / stride),
        })
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn cols(&self) -> usize {
        self.k * self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn in_slab(&self) -> usize {
        self.dims[1] * self.dims[2] * self.cin
    }

    fn out_rows(&self) -> usize {
        self.out[1] * self.out[2]
    }

    pub fn out_len(&self) -> usize {
        self.n * self.out[0] * self.out_rows() * self.cout
    }

    /// Calls `f(row, col_offset, input_offset)` for each in-bounds tap of output slab `ox`.
    fn for_each_tap(&self, ox: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, pad) = (self.k, self.stride as isize, self.pad());
        let [_, ny, nz] = self.dims.map(|d| d as isize);
        for dx in 0..k {
            let ix = ox as isize * s + dx as isize - pad;
            if ix < 0 || ix >= self.dims[0] as isize {
                continue;
            }
            for oy in 0..self.out[1] {
                for dy in 0..k {
                    let iy = oy as isize * s + dy as isize - pad;
                    if iy < 0 || iy >= ny {
                        continue;
                    }
                    for oz in 0..self.out[2] {
                        let row = oy * self.out[2] + oz;
                        for dz in 0..k {
                            let iz = oz as isize * s + dz as isize - pad;
                            if iz < 0 || iz >= nz {
                                continue;
                            }
                            let tap = (dx * k + dy) * k + dz;
                            let src = ((ix * ny + iy) * nz + iz) as usize * self.cin;
                            f(row, tap * self.cin, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], ox: usize, patches: &mut [T]) {
        patches.fill(T::zero());
        let (cols, cin) = (self.cols(), self.cin);
        self.for_each_tap(ox, |row, col, src| {
            patches[row * cols + col..row * cols + col + cin].copy_from_slice(&x[src..src + cin]);
        });
    }

    fn col2im<T: Scalar>(&self, patches: &[T], ox: usize, dx: &mut [T]) {
        let (cols, cin) = (self.cols(), self.cin);
        self.for_each_tap(ox, |row, col, src| {
            for (d, &p) in dx[src..src + cin].iter_mut().zip(&patches[row * cols + col..]) {
                *d += p;
            }
        });
    }
}

/// `y = conv(x, w) + b` with weights `[k, k, k, Cin, Cout]`.
pub fn conv3d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let rows = g.out_rows();
    let slab_out = rows * g.cout;
    let mut y = vec![T::zero(); g.out_len()];
    for chunk in y.chunks_exact_mut(g.cout) {
        chunk.copy_from_slice(b);
    }
    let mut patches = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * g.cols()] };
    for n in 0..g.n {
        let xn = &x[n * g.dims[0] * g.in_slab()..(n + 1) * g.dims[0] * g.in_slab()];
        for ox in 0..g.out[0] {
            let ys = &mut y[(n * g.out[0] + ox) * slab_out..][..slab_out];
            let a = if g.is_pointwise() {
                &xn[ox * g.in_slab()..(ox + 1) * g.in_slab()]
            } else {
                g.im2col(xn, ox, &mut patches);
                &patches[..]
            };
            matmul(rows, g.cols(), g.cout, a, false, w, false, T::one(), ys);
        }
    }
    y
}

/// Accumulates the convolution gradients for upstream gradient `dy`.
pub fn conv3d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        for chunk in dy.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(chunk) {
                *d += v;
            }
        }
    }
    let rows = g.out_rows();
    let slab_out = rows * g.cout;
    let cols = g.cols();
    let mut patches = vec![T::zero(); rows * cols];
    let mut dw = dw;
    for n in 0..g.n {
        let span = g.dims[0] * g.in_slab();
        let xn = &x[n * span..(n + 1) * span];
        for ox in 0..g.out[0] {
            let dys = &dy[(n * g.out[0] + ox) * slab_out..][..slab_out];
            if let Some(dw) = dw.as_deref_mut() {
                let a = if g.is_pointwise() {
                    &xn[ox * g.in_slab()..(ox + 1) * g.in_slab()]
                } else {
                    g.im2col(xn, ox, &mut patches);
                    &patches[..]
                };
                matmul(cols, rows, g.cout, a, true, dys, false, T::one(), dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxn = &mut dx[n * span..(n + 1) * span];
                if g.is_pointwise() {
                    let dst = &mut dxn[ox * g.in_slab()..(ox + 1) * g.in_slab()];
                    matmul(rows, g.cout, cols, dys, false, w, true, T::one(), dst);
                } else {
                    matmul(rows, g.cout, cols, dys, false, w, true, T::zero(), &mut patches);
                    g.col2im(&patches, ox, dxn);
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by 2 along each spatial axis.
pub fn upsample2_forward<T: Scalar>(x: &[T], s: [usize; 5]) -> Vec<T> {
    let [n, dx, dy, dz, c] = s;
    let mut y = vec![T::zero(); x.len() * 8];
    let (oy, oz) = (2 * dy, 2 * dz);
    for b in 0..n {
        for i in 0..2 * dx {
            for j in 0..oy {
                for k in 0..oz {
                    let src = (((b * dx + i / 2) * dy + j / 2) * dz + k / 2) * c;
                    let dst = (((b * 2 * dx + i) * oy + j) * oz + k) * c;
                    y[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], s: [usize; 5], dx_out: &mut [T]) {
    let [n, dx, dyy, dz, c] = s;
    let (oy, oz) = (2 * dyy, 2 * dz);
    for b in 0..n {
        for i in 0..2 * dx {
            for j in 0..oy {
                for k in 0..oz {
                    let dst = (((b * dx + i / 2) * dyy + j / 2) * dz + k / 2) * c;
                    let src = (((b * 2 * dx + i) * oy + j) * oz + k) * c;
                    for ch in 0..c {
                        dx_out[dst + ch] += dy[src + ch];
                    }
                }
            }
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-group statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[N, S, C]` with `groups` channel groups and affine `gamma`, `beta`.
pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, GroupStats<T>) {
    let per = x.len() / n;
    let spatial = per / c;
    let cg = c / groups;
    let count = T::c((spatial * cg) as f64);
    let eps = T::c(GROUP_NORM_EPS);
    let mut mean = vec![T::zero(); n * groups];
    let mut rstd = vec![T::zero(); n * groups];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        let xb = &x[b * per..(b + 1) * per];
        let mut sum = vec![T::zero(); groups];
        for v in xb.chunks_exact(c) {
            for (ch, &val) in v.iter().enumerate() {
                sum[ch / cg] += val;
            }
        }
        let mu: Vec<T> = sum.iter().map(|&s| s / count).collect();
        let mut var = vec![T::zero(); groups];
        for v in xb.chunks_exact(c) {
            for (ch, &val) in v.iter().enumerate() {
                let d = val - mu[ch / cg];
                var[ch / cg] += d * d;
            }
        }
        let rs: Vec<T> = var.iter().map(|&v| T::one() / (v / count + eps).sqrt()).collect();
        for (v, out) in xb.chunks_exact(c).zip(y[b * per..(b + 1) * per].chunks_exact_mut(c)) {
            for ch in 0..c {
                let g = ch / cg;
                out[ch] = (v[ch] - mu[g]) * rs[g] * gamma[ch] + beta[ch];
            }
        }
        mean[b * groups..(b + 1) * groups].copy_from_slice(&mu);
        rstd[b * groups..(b + 1) * groups].copy_from_slice(&rs);
    }
    (y, GroupStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let per = x.len() / n;
    let spatial = per / c;
    let cg = c / groups;
    let count = T::c((spatial * cg) as f64);
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = dx;
    for b in 0..n {
        let xb = &x[b * per..(b + 1) * per];
        let db = &dy[b * per..(b + 1) * per];
        let mu = &stats.mean[b * groups..(b + 1) * groups];
        let rs = &stats.rstd[b * groups..(b + 1) * groups];
        let mut sum_dh = vec![T::zero(); groups];
        let mut sum_dh_h = vec![T::zero(); groups];
        for (v, d) in xb.chunks_exact(c).zip(db.chunks_exact(c)) {
            for ch in 0..c {
                let g = ch / cg;
                let h = (v[ch] - mu[g]) * rs[g];
                let dh = d[ch] * gamma[ch];
                sum_dh[g] += dh;
                sum_dh_h[g] += dh * h;
                if let Some(dg) = dgamma.as_deref_mut() {
                    dg[ch] += d[ch] * h;
                }
                if let Some(dbt) = dbeta.as_deref_mut() {
                    dbt[ch] += d[ch];
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * per..(b + 1) * per];
            for ((v, d), o) in xb.chunks_exact(c).zip(db.chunks_exact(c)).zip(dxb.chunks_exact_mut(c)) {
                for ch in 0..c {
                    let g = ch / cg;
                    let h = (v[ch] - mu[g]) * rs[g];
                    let dh = d[ch] * gamma[ch];
                    o[ch] += rs[g] * (dh - (sum_dh[g] + h * sum_dh_h[g]) / count);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((o, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
        let s = sigmoid(v);
        *o += d * s * (T::one() + v * (T::one() - s));
    }
}

/// `y[n, s, c] = x[n, s, c] * (1 + scale[n, c]) + shift[n, c]`.
pub fn film_forward<T: Scalar>(x: &[T], n: usize, c: usize, scale: &[T], shift: &[T]) -> Vec<T> {
    let per = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        let (sc, sh) = (&scale[b * c..(b + 1) * c], &shift[b * c..(b + 1) * c]);
        for (v, o) in x[b * per..(b + 1) * per]
            .chunks_exact(c)
            .zip(y[b * per..(b + 1) * per].chunks_exact_mut(c))
        {
            for ch in 0..c {
                o[ch] = v[ch] * (T::one() + sc[ch]) + sh[ch];
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn film_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    c: usize,
    scale: &[T],
    dx: Option<&mut [T]>,
    dscale: Option<&mut [T]>,
    dshift: Option<&mut [T]>,
) {
    let per = x.len() / n;
    let (mut dx, mut dscale, mut dshift) = (dx, dscale, dshift);
    for b in 0..n {
        let sc = &scale[b * c..(b + 1) * c];
        for (i, (v, d)) in x[b * per..(b + 1) * per]
            .chunks_exact(c)
            .zip(dy[b * per..(b + 1) * per].chunks_exact(c))
            .enumerate()
        {
            for ch in 0..c {
                if let Some(dx) = dx.as_deref_mut() {
                    dx[b * per + i * c + ch] += d[ch] * (T::one() + sc[ch]);
                }
                if let Some(ds) = dscale.as_deref_mut() {
                    ds[b * c + ch] += d[ch] * v[ch];
                }
                if let Some(dh) = dshift.as_deref_mut() {
                    dh[b * c + ch] += d[ch];
                }
            }
        }
    }
}

/// Single-head softmax attention over `[N, P, C]`; returns the output and the attention weights.
pub fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], n: usize, p: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(c as f64).sqrt();
    let mut a = vec![T::zero(); n * p * p];
    let mut out = vec![T::zero(); n * p * c];
    for b in 0..n {
        let (qb, kb, vb) = (&q[b * p * c..][..p * c], &k[b * p * c..][..p * c], &v[b * p * c..][..p * c]);
        let ab = &mut a[b * p * p..][..p * p];
        matmul(p, c, p, qb, false, kb, true, T::zero(), ab);
        for row in ab.chunks_exact_mut(p) {
            let m = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s * scale));
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - m).exp();
                z += *s;
            }
            for s in row.iter_mut() {
                *s = *s / z;
            }
        }
        matmul(p, p, c, ab, false, vb, false, T::zero(), &mut out[b * p * c..][..p * c]);
    }
    (out, a)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    a: &[T],
    dout: &[T],
    n: usize,
    p: usize,
    c: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let scale = T::one() / T::c(c as f64).sqrt();
    let mut da = vec![T::zero(); p * p];
    for b in 0..n {
        let o = b * p * c;
        let ab = &a[b * p * p..][..p * p];
        let dob = &dout[o..o + p * c];
        matmul(p, p, c, ab, true, dob, false, T::one(), &mut dv[o..o + p * c]);
        matmul(p, c, p, dob, false, &v[o..o + p * c], true, T::zero(), &mut da);
        for (drow, arow) in da.chunks_exact_mut(p).zip(ab.chunks_exact(p)) {
            let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
            for (d, &a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - dot) * scale;
            }
        }
        matmul(p, p, c, &da, false, &k[o..o + p * c], false, T::one(), &mut dq[o..o + p * c]);
        matmul(p, p, c, &da, true, &q[o..o + p * c], false, T::one(), &mut dk[o..o + p * c]);
    }
}
