//! Vector-valued operators: squash, capsule transforms, routing pieces and
//! normalised similarity.

use super::ops::split_last;
use super::{s, Result, Scalar, Tape, Tensor, TensorError, Var};

const NORM_FLOOR: f64 = 1e-12;

fn dims(op: &'static str, shape: &[usize], rank: usize) -> Result<Vec<usize>> {
    if shape.len() != rank {
        return Err(TensorError::Shape {
            op,
            detail: format!("expected rank {rank}, got {shape:?}"),
        });
    }
    Ok(shape.to_vec())
}

impl<T: Scalar> Tape<T> {
    /// `v = (‖s‖² / (1 + ‖s‖²)) · s / ‖s‖` along the last axis; `v = 0` at `s = 0`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let (_, d) = split_last("squash", self.shape(x))?;
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(d) {
            let n2 = row.iter().fold(T::zero(), |a, &v| a + v * v);
            // n / (1 + n²) multiplies s directly.
            let factor = n2.sqrt() / (T::one() + n2);
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        self.push(
            "squash",
            y,
            &[x],
            Box::new(move |ctx| {
                let floor = s::<T>(NORM_FLOOR);
                let mut g = ctx.grad.clone();
                for (grow, srow) in g.data_mut().chunks_mut(d).zip(ctx.inputs[0].data().chunks(d)) {
                    let n2 = srow.iter().fold(T::zero(), |a, &v| a + v * v);
                    let n = n2.sqrt();
                    if n < floor {
                        grow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let one_p = T::one() + n2;
                    let factor = n / one_p;
                    // d(factor)/dn divided by n
                    let dfac = (T::one() - n2) / (one_p * one_p) / n;
                    let dot = grow.iter().zip(srow).fold(T::zero(), |a, (&gv, &sv)| a + gv * sv);
                    for (gv, &sv) in grow.iter_mut().zip(srow) {
                        *gv = factor * *gv + dfac * dot * sv;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Euclidean norm along the last axis (gradient 0 at the origin).
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let (outer, d) = split_last("norm_last", self.shape(x))?;
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let y = Tensor::new(&outer, data)?;
        self.push(
            "norm_last",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.inputs[0].clone();
                for ((row, &n), &go) in g
                    .data_mut()
                    .chunks_mut(d)
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                {
                    let scale = if n > T::zero() { go / n } else { T::zero() };
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(g)]
            }),
        )
    }

    /// `x / ‖x‖₂` along the last axis; rejects rows with norm ≤ 1e-12.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, d) = split_last("l2_normalize", self.shape(x))?;
        let floor = s::<T>(NORM_FLOOR);
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(d) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if !(n > floor) {
                return Err(TensorError::DegenerateVector { op: "l2_normalize" });
            }
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        self.push(
            "l2_normalize",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for ((grow, yrow), xrow) in g
                    .data_mut()
                    .chunks_mut(d)
                    .zip(ctx.output.data().chunks(d))
                    .zip(ctx.inputs[0].data().chunks(d))
                {
                    let n = xrow.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = (*gv - yv * dot) / n;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Row-wise dot product along the last axis.
    pub fn dot_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_last(p)
    }

    /// Cosine similarity along the last axis, in `[−1, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a)?;
        let nb = self.l2_normalize(b)?;
        self.dot_last(na, nb)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let (_, d) = split_last("softmax_last", self.shape(x))?;
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        self.push(
            "softmax_last",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(d).zip(ctx.output.data().chunks(d)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Per-capsule predictions `û[b, i, k] = W[i, k] · u[b, i]`.
    ///
    /// `u: B×N×d_u`, `w: N×K×d_v×d_u` → `B×N×K×d_v`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let us = dims("capsule_predict", self.shape(u), 3)?;
        let ws = dims("capsule_predict", self.shape(w), 4)?;
        let (b, n, du) = (us[0], us[1], us[2]);
        let (k, dv) = (ws[1], ws[2]);
        if ws[0] != n || ws[3] != du {
            return Err(TensorError::Shape {
                op: "capsule_predict",
                detail: format!("u {us:?} vs W {ws:?}"),
            });
        }
        let kd = k * dv;
        let uv = self.value(u).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); b * n * kd];
        for i in 0..n {
            // [kd × du] · [du × B] → out[b, i, :] (column stride n·kd)
            T::gemm(
                kd, du, b, T::one(), &wv[i * kd * du..], du as isize, 1, &uv[i * du..], 1,
                (n * du) as isize, T::zero(), &mut out[i * kd..], 1, (n * kd) as isize,
            );
        }
        let y = Tensor::new(&[b, n, k, dv], out)?;
        self.push(
            "capsule_predict",
            y,
            &[u, w],
            Box::new(move |ctx| {
                let uv = ctx.inputs[0].data();
                let wv = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let gu = ctx.needs[0].then(|| {
                    let mut gu = vec![T::zero(); b * n * du];
                    for i in 0..n {
                        // Wᵢᵀ [du × kd] · gᵢ [kd × B]
                        T::gemm(
                            du, kd, b, T::one(), &wv[i * kd * du..], 1, du as isize, &g[i * kd..], 1,
                            (n * kd) as isize, T::zero(), &mut gu[i * du..], 1, (n * du) as isize,
                        );
                    }
                    Tensor::new(ctx.inputs[0].shape(), gu).unwrap()
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![T::zero(); n * kd * du];
                    for i in 0..n {
                        // gᵢ [kd × B] · uᵢᵀ [B × du]
                        T::gemm(
                            kd, b, du, T::one(), &g[i * kd..], 1, (n * kd) as isize, &uv[i * du..],
                            (n * du) as isize, 1, T::zero(), &mut gw[i * kd * du..], du as isize, 1,
                        );
                    }
                    Tensor::new(ctx.inputs[1].shape(), gw).unwrap()
                });
                vec![gu, gw]
            }),
        )
    }

    /// `s[b, k] = Σᵢ c[b, i, k] · û[b, i, k]` for `c: B×N×K`, `û: B×N×K×D`.
    pub fn route_sum(&mut self, coupling: Var, uhat: Var) -> Result<Var> {
        let cs = dims("route_sum", self.shape(coupling), 3)?;
        let hs = dims("route_sum", self.shape(uhat), 4)?;
        if cs[..] != hs[..3] {
            return Err(TensorError::Shape {
                op: "route_sum",
                detail: format!("c {cs:?} vs û {hs:?}"),
            });
        }
        let (b, n, k, d) = (hs[0], hs[1], hs[2], hs[3]);
        let cv = self.value(coupling).data();
        let hv = self.value(uhat).data();
        let mut out = vec![T::zero(); b * k * d];
        for bi in 0..b {
            for i in 0..n {
                for kk in 0..k {
                    let c = cv[(bi * n + i) * k + kk];
                    let src = &hv[((bi * n + i) * k + kk) * d..][..d];
                    let dst = &mut out[(bi * k + kk) * d..][..d];
                    for (o, &h) in dst.iter_mut().zip(src) {
                        *o += c * h;
                    }
                }
            }
        }
        let y = Tensor::new(&[b, k, d], out)?;
        self.push(
            "route_sum",
            y,
            &[coupling, uhat],
            Box::new(move |ctx| {
                let cv = ctx.inputs[0].data();
                let hv = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gc = ctx.needs[0].then(|| vec![T::zero(); b * n * k]);
                let mut gh = ctx.needs[1].then(|| vec![T::zero(); b * n * k * d]);
                for bi in 0..b {
                    for i in 0..n {
                        for kk in 0..k {
                            let ci = (bi * n + i) * k + kk;
                            let gs = &g[(bi * k + kk) * d..][..d];
                            if let Some(gc) = gc.as_mut() {
                                let h = &hv[ci * d..][..d];
                                gc[ci] = gs.iter().zip(h).fold(T::zero(), |a, (&x, &y)| a + x * y);
                            }
                            if let Some(gh) = gh.as_mut() {
                                let c = cv[ci];
                                for (o, &x) in gh[ci * d..][..d].iter_mut().zip(gs) {
                                    *o = c * x;
                                }
                            }
                        }
                    }
                }
                vec![
                    gc.map(|v| Tensor::new(ctx.inputs[0].shape(), v).unwrap()),
                    gh.map(|v| Tensor::new(ctx.inputs[1].shape(), v).unwrap()),
                ]
            }),
        )
    }

    /// Routing agreement `a[b, i, k] = û[b, i, k] · v[b, k]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let hs = dims("agreement", self.shape(uhat), 4)?;
        let vs = dims("agreement", self.shape(v), 3)?;
        let (b, n, k, d) = (hs[0], hs[1], hs[2], hs[3]);
        if vs != [b, k, d] {
            return Err(TensorError::Shape {
                op: "agreement",
                detail: format!("û {hs:?} vs v {vs:?}"),
            });
        }
        let hv = self.value(uhat).data();
        let vv = self.value(v).data();
        let mut out = Vec::with_capacity(b * n * k);
        for bi in 0..b {
            for i in 0..n {
                for kk in 0..k {
                    let h = &hv[((bi * n + i) * k + kk) * d..][..d];
                    let vk = &vv[(bi * k + kk) * d..][..d];
                    out.push(h.iter().zip(vk).fold(T::zero(), |a, (&x, &y)| a + x * y));
                }
            }
        }
        let y = Tensor::new(&[b, n, k], out)?;
        self.push(
            "agreement",
            y,
            &[uhat, v],
            Box::new(move |ctx| {
                let hv = ctx.inputs[0].data();
                let vv = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gh = ctx.needs[0].then(|| vec![T::zero(); b * n * k * d]);
                let mut gv = ctx.needs[1].then(|| vec![T::zero(); b * k * d]);
                for bi in 0..b {
                    for i in 0..n {
                        for kk in 0..k {
                            let ai = (bi * n + i) * k + kk;
                            let ga = g[ai];
                            if let Some(gh) = gh.as_mut() {
                                let vk = &vv[(bi * k + kk) * d..][..d];
                                for (o, &x) in gh[ai * d..][..d].iter_mut().zip(vk) {
                                    *o = ga * x;
                                }
                            }
                            if let Some(gv) = gv.as_mut() {
                                let h = &hv[ai * d..][..d];
                                for (o, &x) in gv[(bi * k + kk) * d..][..d].iter_mut().zip(h) {
                                    *o += ga * x;
                                }
                            }
                        }
                    }
                }
                vec![
                    gh.map(|v| Tensor::new(ctx.inputs[0].shape(), v).unwrap()),
                    gv.map(|v| Tensor::new(ctx.inputs[1].shape(), v).unwrap()),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squash_once(v: &[f64]) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[v.len()], v).unwrap());
        let y = tape.squash(x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash_once(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = squash_once(&[1.0, 0.0, 0.0]);
        assert!((v[0] - 0.5).abs() < 1e-15);
        let v = squash_once(&[3.0, 4.0]);
        assert!((v[0] - 25.0 / 26.0 * 0.6).abs() < 1e-15);
        assert!((v[1] - 25.0 / 26.0 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let neg = tape.scale(b, -1.0).unwrap();
        let ab = tape.cosine(a, b).unwrap();
        let bb = tape.cosine(b, b).unwrap();
        let bn = tape.cosine(b, neg).unwrap();
        assert!((tape.value(ab).item() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((tape.value(bb).item() - 1.0).abs() < 1e-15);
        assert!((tape.value(bn).item() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.l2_normalize(z), Err(TensorError::DegenerateVector { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1e3, 0.0, 1e3]).unwrap());
        let y = tape.softmax_last(x).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn capsule_predict_matches_matrix_vector_products() {
        // B = 2, N = 2, K = 2, d_u = 2, d_v = 3
        let u: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let w: Vec<f64> = (0..24).map(|v| (v as f64) * 0.5 - 4.0).collect();
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(Tensor::from_f64(&[2, 2, 2], &u).unwrap());
        let wv = tape.constant(Tensor::from_f64(&[2, 2, 3, 2], &w).unwrap());
        let y = tape.capsule_predict(uv, wv).unwrap();
        let out = tape.value(y).data();
        for b in 0..2 {
            for i in 0..2 {
                for k in 0..2 {
                    for j in 0..3 {
                        let mut acc = 0.0;
                        for d in 0..2 {
                            acc += w[((i * 2 + k) * 3 + j) * 2 + d] * u[(b * 2 + i) * 2 + d];
                        }
                        assert_eq!(out[((b * 2 + i) * 2 + k) * 3 + j], acc);
                    }
                }
            }
        }
    }
}
