use super::kernels::{self, ConvGeom, GroupStats};
use super::{matmul, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle of a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2 { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<T> },
    Silu { x: Var },
    Film { x: Var, scale: Var, shift: Var },
    Attention { q: Var, k: Var, v: Var, weights: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Concat { a: Var, b: Var },
    MeanPool { x: Var },
    Broadcast { x: Var },
    MaskedMse { x: Var, target: Vec<T>, mask: Vec<T>, denom: T },
    Opaque { name: String },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation so that gradients can be pulled back through it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the leaves that asked for them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when `v` does not influence the loss.
    pub fn get_or_zero(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.val(x).dims5()?, &self.val(w).shape, stride)?;
        if self.val(b).len() != geom.cout {
            return Err(Error::shape("conv bias length must equal output channels"));
        }
        let y = kernels::conv3d_forward(&geom, &self.val(x).data, &self.val(w).data, &self.val(b).data);
        let [n, ox, oy, oz] = [geom.n, geom.out[0], geom.out[1], geom.out[2]];
        let t = Tensor::new(vec![n, ox, oy, oz, geom.cout], y)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).dims5()?;
        let y = kernels::upsample2_forward(&self.val(x).data, s);
        let t = Tensor::new(vec![s[0], 2 * s[1], 2 * s[2], 2 * s[3], s[4]], y)?;
        Ok(self.push(t, Op::Upsample2 { x }, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = &self.val(x).shape;
        let (n, c) = (xs[0], *xs.last().unwrap());
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.val(gamma).len() != c || self.val(beta).len() != c {
            return Err(Error::shape("group norm affine length must equal channels"));
        }
        let (y, stats) = kernels::group_norm_forward(
            &self.val(x).data,
            n,
            c,
            groups,
            &self.val(gamma).data,
            &self.val(beta).data,
        );
        let t = Tensor::new(xs.clone(), y)?;
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = Tensor {
            shape: self.val(x).shape.clone(),
            data: kernels::silu_forward(&self.val(x).data),
        };
        self.push(t, Op::Silu { x }, &[x])
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = &self.val(x).shape;
        let (n, c) = (xs[0], *xs.last().unwrap());
        let want = vec![n, c];
        if self.val(scale).shape != want || self.val(shift).shape != want {
            return Err(Error::shape(format!(
                "film scale/shift must be {want:?}, got {:?} and {:?}",
                self.val(scale).shape,
                self.val(shift).shape
            )));
        }
        let y = kernels::film_forward(&self.val(x).data, n, c, &self.val(scale).data, &self.val(shift).data);
        let t = Tensor::new(xs.clone(), y)?;
        Ok(self.push(t, Op::Film { x, scale, shift }, &[x, scale, shift]))
    }

    /// Softmax attention across all spatial positions of each sample.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        same_shape(self.val(q), self.val(k), "attention q/k")?;
        same_shape(self.val(q), self.val(v), "attention q/v")?;
        let s = &self.val(q).shape;
        let (n, c) = (s[0], *s.last().unwrap());
        let p = self.val(q).len() / (n * c);
        let (out, weights) =
            kernels::attention_forward(&self.val(q).data, &self.val(k).data, &self.val(v).data, n, p, c);
        let t = Tensor::new(s.clone(), out)?;
        Ok(self.push(t, Op::Attention { q, k, v, weights }, &[q, k, v]))
    }

    /// `[N, Cin] x [Cin, Cout] + [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (&self.val(x).shape, &self.val(w).shape);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.val(b).len() != ws[1] {
            return Err(Error::shape(format!("linear {xs:?} x {ws:?}")));
        }
        let (n, cin, cout) = (xs[0], ws[0], ws[1]);
        let mut y: Vec<T> = (0..n).flat_map(|_| self.val(b).data.iter().copied()).collect();
        matmul(n, cin, cout, &self.val(x).data, false, &self.val(w).data, false, T::one(), &mut y);
        let t = Tensor::new(vec![n, cout], y)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "add")?;
        let data = self.val(a).data.iter().zip(&self.val(b).data).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.val(a).shape.clone(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "mul")?;
        let data = self.val(a).data.iter().zip(&self.val(b).data).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.val(a).shape.clone(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = Tensor {
            shape: self.val(x).shape.clone(),
            data: self.val(x).data.iter().map(|&v| v * c).collect(),
        };
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.val(a).shape, &self.val(b).shape);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (self.val(a).channels(), self.val(b).channels());
        let mut data = Vec::with_capacity(self.val(a).len() + self.val(b).len());
        for (x, y) in self.val(a).data.chunks_exact(ca).zip(self.val(b).data.chunks_exact(cb)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Mean over all spatial positions: `[N, ..., C] -> [N, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let xv = self.val(x);
        let (n, c) = (xv.shape[0], xv.channels());
        let per = xv.len() / n;
        let count = T::c((per / c) as f64);
        let mut data = vec![T::zero(); n * c];
        for b in 0..n {
            for v in xv.data[b * per..(b + 1) * per].chunks_exact(c) {
                acc(&mut data[b * c..(b + 1) * c], v);
            }
        }
        data.iter_mut().for_each(|v| *v = *v / count);
        self.push(Tensor { shape: vec![n, c], data }, Op::MeanPool { x }, &[x])
    }

    /// Tiles `[N, C]` over spatial `dims`, giving `[N, X, Y, Z, C]`.
    pub fn broadcast(&mut self, x: Var, dims: [usize; 3]) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape.len() != 2 {
            return Err(Error::shape("broadcast expects [N, C]"));
        }
        let (n, c) = (xv.shape[0], xv.shape[1]);
        let per = dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * per * c);
        for b in 0..n {
            for _ in 0..per {
                data.extend_from_slice(&xv.data[b * c..(b + 1) * c]);
            }
        }
        let t = Tensor::new(vec![n, dims[0], dims[1], dims[2], c], data)?;
        Ok(self.push(t, Op::Broadcast { x }, &[x]))
    }

    /// `sum(mask * (x - target)^2) / denom` as a one-element tensor.
    pub fn masked_mse(&mut self, x: Var, target: Tensor<T>, mask: Tensor<T>, denom: T) -> Result<Var> {
        same_shape(self.val(x), &target, "loss target")?;
        same_shape(self.val(x), &mask, "loss mask")?;
        if !(denom > T::zero()) {
            return Err(Error::param("loss normalizer must be positive"));
        }
        let s: T = self
            .val(x)
            .data
            .iter()
            .zip(&target.data)
            .zip(&mask.data)
            .map(|((&p, &t), &m)| m * (p - t) * (p - t))
            .sum();
        let op = Op::MaskedMse {
            x,
            target: target.data,
            mask: mask.data,
            denom,
        };
        Ok(self.push(Tensor::scalar(s / denom), op, &[x]))
    }

    /// Records a value computed outside the differentiable operator set.
    pub fn opaque(&mut self, name: &str, value: Tensor<T>, inputs: &[Var]) -> Var {
        self.push(value, Op::Opaque { name: name.to_string() }, inputs)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape.clone(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(&node.op, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape.clone()));
        }
        slot.as_mut().map(|t| t.data.as_mut_slice())
    }

    /// Two distinct gradient buffers at once.
    fn grad_pair<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        a: Var,
        b: Var,
    ) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
        debug_assert_ne!(a, b);
        self.grad_buf(grads, a);
        self.grad_buf(grads, b);
        let (lo, hi, swap) = if a.0 < b.0 { (a, b, false) } else { (b, a, true) };
        let (left, right) = grads.split_at_mut(hi.0);
        let l = if self.nodes[lo.0].needs_grad {
            left[lo.0].as_mut().map(|t| t.data.as_mut_slice())
        } else {
            None
        };
        let h = if self.nodes[hi.0].needs_grad {
            right[0].as_mut().map(|t| t.data.as_mut_slice())
        } else {
            None
        };
        if swap {
            (h, l)
        } else {
            (l, h)
        }
    }

    fn grad_triple<'a>(
        &self,
        grads: &'a mut [Option<Tensor<T>>],
        vars: [Var; 3],
    ) -> Result<[Option<&'a mut [T]>; 3]> {
        if vars[0] == vars[1] || vars[0] == vars[2] || vars[1] == vars[2] {
            return Err(Error::UnsupportedOp("operator applied to aliased inputs".into()));
        }
        for v in vars {
            self.grad_buf(grads, v);
        }
        let mut out: [Option<&'a mut [T]>; 3] = [None, None, None];
        let mut rest: &'a mut [Option<Tensor<T>>] = grads;
        let mut order: Vec<(usize, usize)> = vars.iter().enumerate().map(|(k, v)| (v.0, k)).collect();
        order.sort();
        let mut base = 0;
        for (idx, k) in order {
            let (_, tail) = std::mem::take(&mut rest).split_at_mut(idx - base);
            let (head, tail) = tail.split_first_mut().unwrap();
            if self.nodes[idx].needs_grad {
                out[k] = head.as_mut().map(|t| t.data.as_mut_slice());
            }
            rest = tail;
            base = idx + 1;
        }
        Ok(out)
    }

    fn pull_back(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = &g.data;
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let [dx, dw, db] = self.grad_triple(grads, [*x, *w, *b])?;
                kernels::conv3d_backward(geom, &self.val(*x).data, &self.val(*w).data, gd, dx, dw, db);
            }
            Op::Upsample2 { x } => {
                let s = self.val(*x).dims5()?;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    kernels::upsample2_backward(gd, s, dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = self.val(*x);
                let (n, c) = (xv.shape[0], xv.channels());
                let gamma_v = self.val(*gamma).data.clone();
                let [dx, dg, db] = self.grad_triple(grads, [*x, *gamma, *beta])?;
                kernels::group_norm_backward(&xv.data, gd, n, c, *groups, &gamma_v, stats, dx, dg, db);
            }
            Op::Silu { x } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    kernels::silu_backward(&self.val(*x).data, gd, dx);
                }
            }
            Op::Film { x, scale, shift } => {
                let xv = self.val(*x);
                let (n, c) = (xv.shape[0], xv.channels());
                let sc = self.val(*scale).data.clone();
                let [dx, ds, dh] = self.grad_triple(grads, [*x, *scale, *shift])?;
                kernels::film_backward(&xv.data, gd, n, c, &sc, dx, ds, dh);
            }
            Op::Attention { q, k, v, weights } => {
                let qv = self.val(*q);
                let (n, c) = (qv.shape[0], qv.channels());
                let p = qv.len() / (n * c);
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); qv.len()];
                let mut dv = vec![T::zero(); qv.len()];
                kernels::attention_backward(
                    &qv.data,
                    &self.val(*k).data,
                    &self.val(*v).data,
                    weights,
                    gd,
                    n,
                    p,
                    c,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = self.grad_buf(grads, var) {
                        acc(buf, &d);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, cin) = (self.val(*x).shape[0], self.val(*x).shape[1]);
                let cout = self.val(*w).shape[1];
                let [dx, dw, db] = self.grad_triple(grads, [*x, *w, *b])?;
                if let Some(dx) = dx {
                    matmul(n, cout, cin, gd, false, &self.val(*w).data, true, T::one(), dx);
                }
                if let Some(dw) = dw {
                    matmul(cin, n, cout, &self.val(*x).data, true, gd, false, T::one(), dw);
                }
                if let Some(db) = db {
                    for row in gd.chunks_exact(cout) {
                        acc(db, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if a == b {
                    if let Some(d) = self.grad_buf(grads, *a) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g + g);
                    }
                } else {
                    let (da, db) = self.grad_pair(grads, *a, *b);
                    if let Some(da) = da {
                        acc(da, gd);
                    }
                    if let Some(db) = db {
                        acc(db, gd);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a).data.clone(), self.val(*b).data.clone());
                if a == b {
                    if let Some(d) = self.grad_buf(grads, *a) {
                        for i in 0..d.len() {
                            d[i] += T::c(2.0) * gd[i] * av[i];
                        }
                    }
                } else {
                    let (da, db) = self.grad_pair(grads, *a, *b);
                    if let Some(da) = da {
                        for i in 0..da.len() {
                            da[i] += gd[i] * bv[i];
                        }
                    }
                    if let Some(db) = db {
                        for i in 0..db.len() {
                            db[i] += gd[i] * av[i];
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.grad_buf(grads, *x) {
                    dx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *c);
                }
            }
            Op::Concat { a, b } => {
                let (ca, cb) = (self.val(*a).channels(), self.val(*b).channels());
                let cc = ca + cb;
                if a == b {
                    return Err(Error::UnsupportedOp("concat of a value with itself".into()));
                }
                let (da, db) = self.grad_pair(grads, *a, *b);
                if let Some(da) = da {
                    for (d, row) in da.chunks_exact_mut(ca).zip(gd.chunks_exact(cc)) {
                        acc(d, &row[..ca]);
                    }
                }
                if let Some(db) = db {
                    for (d, row) in db.chunks_exact_mut(cb).zip(gd.chunks_exact(cc)) {
                        acc(d, &row[ca..]);
                    }
                }
            }
            Op::MeanPool { x } => {
                let xv = self.val(*x);
                let (n, c) = (xv.shape[0], xv.channels());
                let per = xv.len() / n;
                let count = T::c((per / c) as f64);
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for b in 0..n {
                        let gb: Vec<T> = gd[b * c..(b + 1) * c].iter().map(|&v| v / count).collect();
                        for row in dx[b * per..(b + 1) * per].chunks_exact_mut(c) {
                            acc(row, &gb);
                        }
                    }
                }
            }
            Op::Broadcast { x } => {
                let (n, c) = (self.val(*x).shape[0], self.val(*x).shape[1]);
                let per = gd.len() / n;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for b in 0..n {
                        for row in gd[b * per..(b + 1) * per].chunks_exact(c) {
                            acc(&mut dx[b * c..(b + 1) * c], row);
                        }
                    }
                }
            }
            Op::MaskedMse { x, target, mask, denom } => {
                let scale = gd[0] * T::c(2.0) / *denom;
                let xv = &self.val(*x).data;
                if let Some(dx) = self.grad_buf(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += scale * mask[i] * (xv[i] - target[i]);
                    }
                }
            }
            Op::Opaque { name } => return Err(Error::UnsupportedOp(name.clone())),
        }
        Ok(())
    }
}
