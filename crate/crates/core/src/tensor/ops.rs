//! Element-wise, shape and reduction operators.

use super::tape::BackwardCtx;
use super::{s, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Point-wise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// `max(0, tanh(x))`: maps the background to exactly zero, range `[0, 1)`.
    TruncatedTanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            // Capped at the largest value below one so the range stays
            // half-open even where tanh rounds to 1.
            Activation::TruncatedTanh => x
                .tanh()
                .max(T::zero())
                .min(T::one() - T::epsilon() / s(2.0)),
        }
    }

    /// Which smooth piece `x` falls on.
    fn piece<T: Scalar>(self, x: T, y: T) -> u32 {
        match self {
            Activation::Relu => (x > T::zero()) as u32,
            Activation::TruncatedTanh => (x > T::zero()) as u32 + (y == T::one() - T::epsilon() / s(2.0)) as u32 * 2,
            Activation::Tanh | Activation::Sigmoid => 0,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::TruncatedTanh => {
                if x > T::zero() {
                    T::one() - y * y
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| kind.apply(v));
        if self.is_tracking_branches() {
            let codes: Vec<u32> = self.value(x).data().iter().zip(y.data()).map(|(&a, &b)| kind.piece(a, b)).collect();
            self.note_branches(codes);
        }
        self.push(
            "activation",
            y,
            &[x],
            Box::new(move |c: &BackwardCtx<'_, T>| {
                let mut g = c.grad.clone();
                for ((gi, &xi), &yi) in g
                    .data_mut()
                    .iter_mut()
                    .zip(c.inputs[0].data())
                    .zip(c.output.data())
                {
                    *gi *= kind.derivative(xi, yi);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn truncated_tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::TruncatedTanh, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * v);
        self.push(
            "square",
            y,
            &[x],
            Box::new(|c| {
                let two = s::<T>(2.0);
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| g * two * x))]
            }),
        )
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.abs());
        if self.is_tracking_branches() {
            let codes: Vec<u32> = self.value(x).data().iter().map(|&v| (v > T::zero()) as u32).collect();
            self.note_branches(codes);
        }
        self.push(
            "abs",
            y,
            &[x],
            Box::new(|c| {
                vec![Some(c.grad.zip_map(c.inputs[0], |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(T, T) -> T,
        df: fn(T, T, T) -> (T, T),
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let y = va.zip_map(vb, f);
        self.push(
            op,
            y,
            &[a, b],
            Box::new(move |c| {
                let n = c.grad.numel();
                let mut ga = Vec::with_capacity(if c.needs[0] { n } else { 0 });
                let mut gb = Vec::with_capacity(if c.needs[1] { n } else { 0 });
                for ((&g, &x), &y) in c
                    .grad
                    .data()
                    .iter()
                    .zip(c.inputs[0].data())
                    .zip(c.inputs[1].data())
                {
                    let (da, db) = df(g, x, y);
                    if c.needs[0] {
                        ga.push(da);
                    }
                    if c.needs[1] {
                        gb.push(db);
                    }
                }
                let shape = c.grad.shape();
                vec![
                    c.needs[0].then(|| Tensor::new(shape, ga).unwrap()),
                    c.needs[1].then(|| Tensor::new(shape, gb).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push(
            "scale",
            y,
            &[x],
            Box::new(move |c| vec![Some(c.grad.map(|g| g * factor))]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        let y = self.value(x).map(|v| v + offset);
        self.push("add_scalar", y, &[x], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            y,
            &[x],
            Box::new(|c| vec![Some(Tensor::full(c.inputs[0].shape(), c.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let total = self.sum(x)?;
        self.scale(total, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (outer_shape, d) = split_last("sum_last", v.shape())?;
        let data: Vec<T> = v
            .data()
            .chunks(d)
            .map(|row| row.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let y = Tensor::new(&outer_shape, data)?;
        self.push(
            "sum_last",
            y,
            &[x],
            Box::new(move |c| {
                let mut g = Vec::with_capacity(c.inputs[0].numel());
                for &gi in c.grad.data() {
                    g.extend(std::iter::repeat_n(gi, d));
                }
                vec![Some(Tensor::new(c.inputs[0].shape(), g).unwrap())]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            y,
            &[x],
            Box::new(|c| vec![Some(c.grad.clone().reshape(c.inputs[0].shape()).unwrap())]),
        )
    }

    /// Rows `[start, start + len)` of the leading axis.
    pub fn slice_outer(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_outer(start, len)?;
        self.push(
            "slice_outer",
            y,
            &[x],
            Box::new(move |c| {
                let src = c.inputs[0];
                let inner = src.numel() / src.shape()[0].max(1);
                let mut g = Tensor::zeros(src.shape());
                g.data_mut()[start * inner..(start + len) * inner].copy_from_slice(c.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat_outer(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_outer(&values)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.numel()).collect();
        self.push(
            "concat_outer",
            y,
            parts,
            Box::new(move |c| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&c.inputs)
                    .zip(&c.needs)
                    .map(|((&n, inp), &need)| {
                        let part = &c.grad.data()[off..off + n];
                        off += n;
                        need.then(|| Tensor::new(inp.shape(), part.to_vec()).unwrap())
                    })
                    .collect()
            }),
        )
    }

    /// Concatenates `N×C_i×…` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(TensorError::Shape {
                op: "concat_channels",
                detail: format!("rank {} < 2", first.len()),
            });
        }
        let n = first[0];
        let spatial: usize = first[2..].iter().product();
        let mut channels = Vec::new();
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != first.len() || sh[0] != n || sh[2..] != first[2..] {
                return Err(shape_err("concat_channels", sh, &first));
            }
            channels.push(sh[1]);
        }
        let total_c: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total_c * spatial);
        for b in 0..n {
            for (&p, &ch) in parts.iter().zip(&channels) {
                let block = ch * spatial;
                out.extend_from_slice(&self.value(p).data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let y = Tensor::new(&shape, out)?;
        self.push(
            "concat_channels",
            y,
            parts,
            Box::new(move |c| {
                let mut grads: Vec<Vec<T>> = channels
                    .iter()
                    .map(|&ch| Vec::with_capacity(n * ch * spatial))
                    .collect();
                let g = c.grad.data();
                let mut off = 0;
                for _ in 0..n {
                    for (gi, &ch) in grads.iter_mut().zip(&channels) {
                        let block = ch * spatial;
                        gi.extend_from_slice(&g[off..off + block]);
                        off += block;
                    }
                }
                grads
                    .into_iter()
                    .zip(&c.inputs)
                    .zip(&c.needs)
                    .map(|((gi, inp), &need)| need.then(|| Tensor::new(inp.shape(), gi).unwrap()))
                    .collect()
            }),
        )
    }

    /// `x[n, c, …] * mask[n, 0, …]`: one spatial map broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (vx, vm) = (self.value(x), self.value(mask));
        let (xs, ms) = (vx.shape().to_vec(), vm.shape().to_vec());
        if xs.len() < 2 || ms.len() != xs.len() || ms[0] != xs[0] || ms[1] != 1 || ms[2..] != xs[2..] {
            return Err(shape_err("mul_channel_broadcast", &xs, &ms));
        }
        let (n, ch) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let mut out = vx.data().to_vec();
        for b in 0..n {
            let m = &vm.data()[b * spatial..(b + 1) * spatial];
            for c in 0..ch {
                let o = (b * ch + c) * spatial;
                for (v, &mv) in out[o..o + spatial].iter_mut().zip(m) {
                    *v *= mv;
                }
            }
        }
        let y = Tensor::new(&xs, out)?;
        self.push(
            "mul_channel_broadcast",
            y,
            &[x, mask],
            Box::new(move |c| {
                let (vx, vm, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let gx = c.needs[0].then(|| {
                    let mut gx = g.to_vec();
                    for b in 0..n {
                        let m = &vm[b * spatial..(b + 1) * spatial];
                        for ci in 0..ch {
                            let o = (b * ch + ci) * spatial;
                            for (v, &mv) in gx[o..o + spatial].iter_mut().zip(m) {
                                *v *= mv;
                            }
                        }
                    }
                    Tensor::new(c.inputs[0].shape(), gx).unwrap()
                });
                let gm = c.needs[1].then(|| {
                    let mut gm = vec![T::zero(); n * spatial];
                    for b in 0..n {
                        for ci in 0..ch {
                            let o = (b * ch + ci) * spatial;
                            for (k, acc) in gm[b * spatial..(b + 1) * spatial].iter_mut().enumerate() {
                                *acc += g[o + k] * vx[o + k];
                            }
                        }
                    }
                    Tensor::new(c.inputs[1].shape(), gm).unwrap()
                });
                vec![gx, gm]
            }),
        )
    }

    /// Affine map `x · Wᵀ + b` for `x: N×F`, `W: O×F`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 2 || vw.rank() != 2 || vx.shape()[1] != vw.shape()[1] || vb.shape() != [vw.shape()[0]] {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            });
        }
        let (n, f, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(vb.data());
        }
        T::gemm(
            n, f, o, T::one(), vx.data(), f as isize, 1, vw.data(), 1, f as isize, T::one(), &mut out,
            o as isize, 1,
        );
        let y = Tensor::new(&[n, o], out)?;
        self.push(
            "linear",
            y,
            &[x, w, b],
            Box::new(move |c| {
                let (vx, vw, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
                let gx = c.needs[0].then(|| {
                    let mut gx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), g, o as isize, 1, vw, f as isize, 1, T::zero(), &mut gx, f as isize, 1);
                    Tensor::new(&[n, f], gx).unwrap()
                });
                let gw = c.needs[1].then(|| {
                    let mut gw = vec![T::zero(); o * f];
                    T::gemm(o, n, f, T::one(), g, 1, o as isize, vx, f as isize, 1, T::zero(), &mut gw, f as isize, 1);
                    Tensor::new(&[o, f], gw).unwrap()
                });
                let gb = c.needs[2].then(|| {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[o], gb).unwrap()
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated in logit space: `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(shape_err("bce_with_logits", z.shape(), target.shape()));
        }
        let count = T::from_usize(z.numel().max(1)).unwrap();
        let total = z
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&z, &y)| {
                acc + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
            });
        let target = target.clone();
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / count),
            &[logits],
            Box::new(move |c| {
                let g = c.grad.item() / count;
                vec![Some(c.inputs[0].zip_map(&target, |z, y| g * (sigmoid(z) - y)))]
            }),
        )
    }
}

pub(crate) fn split_last(op: &'static str, shape: &[usize]) -> Result<(Vec<usize>, usize)> {
    match shape.split_last() {
        Some((&d, rest)) if d > 0 => Ok((rest.to_vec(), d)),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("needs a non-empty last axis, got {shape:?}"),
        }),
    }
}
