//! Spatial operators on `N×C×H×W` tensors.

use std::ops::Range;

use super::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Target size of one im2col tile, in elements.
const TILE_ELEMS: usize = 1 << 16;

/// Reflect-without-repeating-the-edge index: `-1 → 1`, `len → len − 2`.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut i = i.rem_euclid(period);
    if i >= len {
        i = period - i;
    }
    i as usize
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(TensorError::Shape {
            op,
            detail: format!("expected N×C×H×W, got {shape:?}"),
        }),
    }
}

/// Index maps for one padded, strided k×k window sweep. `ymap[ky][oy]` and
/// `xmap[kx][ox]` are reflected source coordinates; for stride 1,
/// `interior[kx]` is the output column range that needs no reflection.
struct Im2ColPlan {
    k: usize,
    w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    ymap: Vec<Vec<usize>>,
    xmap: Vec<Vec<usize>>,
    interior: Vec<(usize, usize)>,
}

impl Im2ColPlan {
    fn new(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        let map = |len: usize, out: usize, kk: usize| -> Vec<usize> {
            (0..out)
                .map(|o| reflect_index((o * stride + kk) as isize - pad as isize, len))
                .collect()
        };
        let ymap = (0..k).map(|ky| map(h, out_h, ky)).collect();
        let xmap = (0..k).map(|kx| map(w, out_w, kx)).collect();
        let interior = (0..k)
            .map(|kx| {
                let lo = pad.saturating_sub(kx).min(out_w);
                let hi = (w + pad - kx).min(out_w).max(lo);
                (lo, hi)
            })
            .collect();
        Self {
            k,
            w,
            stride,
            pad,
            out_h,
            out_w,
            ymap,
            xmap,
            interior,
        }
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output rows per im2col tile, sized so one tile of columns stays cache
    /// resident.
    fn tile_rows(&self, channels: usize) -> usize {
        let per_row = channels * self.k * self.k * self.out_w;
        (TILE_ELEMS / per_row.max(1)).clamp(1, self.out_h)
    }

    /// Columns of output rows `rows`:
    /// `(column offset, plane offset)` of each output row in `rows` for
    /// kernel row `ky`.
    #[inline]
    fn row_offsets(&self, ky: usize, rows: Range<usize>) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.ymap[ky][rows]
            .iter()
            .enumerate()
            .map(move |(r, &iy)| (r * self.out_w, iy * self.w))
    }

    /// `cols[(c·k² + ky·k + kx)·len + o] = image[c, src(rows.start·out_w + o)]`.
    fn gather<T: Scalar>(&self, image: &[T], channels: usize, hw: usize, rows: Range<usize>, cols: &mut [T]) {
        let kk = self.k * self.k;
        let out_hw = rows.len() * self.out_w;
        for c in 0..channels {
            let plane = &image[c * hw..(c + 1) * hw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let kidx = c * kk + ky * self.k + kx;
                    let dst = &mut cols[kidx * out_hw..(kidx + 1) * out_hw];
                    let xmap = &self.xmap[kx];
                    let (lo, hi) = self.interior[kx];
                    for (d0, s0) in self.row_offsets(ky, rows.clone()) {
                        let drow = &mut dst[d0..d0 + self.out_w];
                        let srow = &plane[s0..s0 + self.w];
                        if self.stride == 1 {
                            let off = kx as isize - self.pad as isize;
                            let (a, b) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                            drow[lo..hi].copy_from_slice(&srow[a..b]);
                            for ox in (0..lo).chain(hi..self.out_w) {
                                drow[ox] = srow[xmap[ox]];
                            }
                        } else {
                            for (d, &ix) in drow.iter_mut().zip(xmap) {
                                *d = srow[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::gather`]: scatter-adds columns back into the image.
    fn scatter<T: Scalar>(&self, cols: &[T], channels: usize, hw: usize, rows: Range<usize>, image: &mut [T]) {
        let kk = self.k * self.k;
        let out_hw = rows.len() * self.out_w;
        for c in 0..channels {
            let plane = &mut image[c * hw..(c + 1) * hw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let kidx = c * kk + ky * self.k + kx;
                    let src = &cols[kidx * out_hw..(kidx + 1) * out_hw];
                    let xmap = &self.xmap[kx];
                    let (lo, hi) = self.interior[kx];
                    for (d0, s0) in self.row_offsets(ky, rows.clone()) {
                        let crow = &src[d0..d0 + self.out_w];
                        let prow = &mut plane[s0..s0 + self.w];
                        if self.stride == 1 {
                            let off = kx as isize - self.pad as isize;
                            let a = (lo as isize + off) as usize;
                            for (p, &g) in prow[a..a + (hi - lo)].iter_mut().zip(&crow[lo..hi]) {
                                *p += g;
                            }
                            for ox in (0..lo).chain(hi..self.out_w) {
                                prow[xmap[ox]] += crow[ox];
                            }
                        } else {
                            for (&g, &ix) in crow.iter().zip(xmap) {
                                prow[ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation with reflection padding of `(k − 1) / 2` per side.
    ///
    /// `input: N×C_in×H×W`, `kernel: C_out×C_in×k×k`, `bias: C_out`.
    pub fn conv2d_mirror(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let [n, c_in, h, w] = dims4("conv2d_mirror", self.shape(input))?;
        let [c_out, kc, k, k2] = dims4("conv2d_mirror", self.shape(kernel))?;
        if kc != c_in || k != k2 || self.shape(bias) != [c_out] {
            return Err(TensorError::Shape {
                op: "conv2d_mirror",
                detail: format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(kernel),
                    self.shape(bias)
                ),
            });
        }
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel {
                op: "conv2d_mirror",
                k,
            });
        }
        let pad = (k - 1) / 2;
        if stride == 0 || h < pad + 1 || w < pad + 1 {
            return Err(TensorError::Shape {
                op: "conv2d_mirror",
                detail: format!("stride {stride}, {h}×{w} image too small for k = {k}"),
            });
        }
        let plan = Im2ColPlan::new(h, w, k, stride);
        let (hw, out_hw, ckk) = (h * w, plan.out_hw(), c_in * k * k);
        let pointwise = k == 1 && stride == 1;

        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * c_out * out_hw];
        let tile = plan.tile_rows(c_in);
        let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * tile * plan.out_w }];
        for s in 0..n {
            let img = &x[s * c_in * hw..(s + 1) * c_in * hw];
            let dst = &mut out[s * c_out * out_hw..(s + 1) * c_out * out_hw];
            for (co, row) in dst.chunks_mut(out_hw).enumerate() {
                row.fill(b[co]);
            }
            if pointwise {
                T::gemm(
                    c_out, ckk, out_hw, T::one(), wt, ckk as isize, 1, img, out_hw as isize, 1,
                    T::one(), dst, out_hw as isize, 1,
                );
                continue;
            }
            for r0 in (0..plan.out_h).step_by(tile) {
                let rows = r0..(r0 + tile).min(plan.out_h);
                let len = rows.len() * plan.out_w;
                let cols = &mut cols[..ckk * len];
                plan.gather(img, c_in, hw, rows, cols);
                T::gemm(
                    c_out, ckk, len, T::one(), wt, ckk as isize, 1, cols, len as isize, 1,
                    T::one(), &mut dst[r0 * plan.out_w..], out_hw as isize, 1,
                );
            }
        }
        let y = Tensor::new(&[n, c_out, plan.out_h, plan.out_w], out)?;
        self.push(
            "conv2d_mirror",
            y,
            &[input, kernel, bias],
            Box::new(move |ctx| {
                let x = ctx.inputs[0].data();
                let wt = ctx.inputs[1].data();
                let g = ctx.grad.data();
                let mut gx = ctx.needs[0].then(|| vec![T::zero(); n * c_in * hw]);
                let mut gw = ctx.needs[1].then(|| vec![T::zero(); c_out * ckk]);
                let mut gb = ctx.needs[2].then(|| vec![T::zero(); c_out]);
                let tile = plan.tile_rows(c_in);
                let tile_len = if pointwise { 0 } else { ckk * tile * plan.out_w };
                let mut cols = vec![T::zero(); if gw.is_some() { tile_len } else { 0 }];
                let mut dcols = vec![T::zero(); if gx.is_some() { tile_len } else { 0 }];
                for s in 0..n {
                    let gs = &g[s * c_out * out_hw..(s + 1) * c_out * out_hw];
                    if let Some(gb) = gb.as_mut() {
                        for (co, row) in gs.chunks(out_hw).enumerate() {
                            gb[co] += row.iter().fold(T::zero(), |a, &v| a + v);
                        }
                    }
                    let img = &x[s * c_in * hw..(s + 1) * c_in * hw];
                    if pointwise {
                        if let Some(gw) = gw.as_mut() {
                            T::gemm(
                                c_out, out_hw, ckk, T::one(), gs, out_hw as isize, 1, img, 1,
                                out_hw as isize, T::one(), gw, ckk as isize, 1,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            T::gemm(
                                ckk, c_out, out_hw, T::one(), wt, 1, ckk as isize, gs,
                                out_hw as isize, 1, T::one(), &mut gx[s * c_in * hw..(s + 1) * c_in * hw],
                                out_hw as isize, 1,
                            );
                        }
                        continue;
                    }
                    for r0 in (0..plan.out_h).step_by(tile) {
                        let rows = r0..(r0 + tile).min(plan.out_h);
                        let len = rows.len() * plan.out_w;
                        let gt = &gs[r0 * plan.out_w..];
                        if let Some(gw) = gw.as_mut() {
                            let cols = &mut cols[..ckk * len];
                            plan.gather(img, c_in, hw, rows.clone(), cols);
                            // gW += gOut · colsᵀ
                            T::gemm(
                                c_out, len, ckk, T::one(), gt, out_hw as isize, 1, cols, 1,
                                len as isize, T::one(), gw, ckk as isize, 1,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            // dcols = Wᵀ · gOut, folded back through the reflection maps.
                            let dcols = &mut dcols[..ckk * len];
                            T::gemm(
                                ckk, c_out, len, T::one(), wt, 1, ckk as isize, gt,
                                out_hw as isize, 1, T::zero(), dcols, len as isize, 1,
                            );
                            plan.scatter(dcols, c_in, hw, rows, &mut gx[s * c_in * hw..(s + 1) * c_in * hw]);
                        }
                    }
                }
                vec![
                    gx.map(|v| Tensor::new(ctx.inputs[0].shape(), v).unwrap()),
                    gw.map(|v| Tensor::new(ctx.inputs[1].shape(), v).unwrap()),
                    gb.map(|v| Tensor::new(ctx.inputs[2].shape(), v).unwrap()),
                ]
            }),
        )
    }

    /// Non-overlapping max pooling; ties resolve to the first row-major index.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("max_pool2d", self.shape(x))?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(TensorError::Shape {
                op: "max_pool2d",
                detail: format!("{h}×{w} not divisible by window {window}"),
            });
        }
        let (oh, ow) = (h / window, w / window);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = base + (oy * window + dy) * w + ox * window + dx;
                            if v[i] > v[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let y = Tensor::new(&[n, c, oh, ow], out)?;
        self.note_branches(argmax.iter().copied());
        self.push(
            "max_pool2d",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let gd = g.data_mut();
                for (&src, &gv) in argmax.iter().zip(ctx.grad.data()) {
                    gd[src as usize] += gv;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Nearest-neighbour resize: output pixel `o` reads input `⌊o · in / out⌋`.
    pub fn resize_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("resize_nearest", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Shape {
                op: "resize_nearest",
                detail: "empty output".into(),
            });
        }
        let rows: Vec<usize> = (0..out_h).map(|o| o * h / out_h).collect();
        let cols: Vec<usize> = (0..out_w).map(|o| o * w / out_w).collect();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let base = plane * h * w;
            for &r in &rows {
                for &cc in &cols {
                    out.push(v[base + r * w + cc]);
                }
            }
        }
        let y = Tensor::new(&[n, c, out_h, out_w], out)?;
        self.push(
            "resize_nearest",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let gd = g.data_mut();
                let go = ctx.grad.data();
                let mut k = 0;
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for &r in &rows {
                        for &cc in &cols {
                            gd[base + r * w + cc] += go[k];
                            k += 1;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor; gradients are
    /// summed over each replicated block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [_, _, h, w] = dims4("upsample_nearest", self.shape(x))?;
        self.resize_nearest(x, h * factor, w * factor)
    }

    /// Regroups `N×C×H×W` feature maps into `N×(C/d·H·W)×d` capsules: the
    /// vector of capsule `(g, y, x)` is channels `g·d .. g·d + d` at `(y, x)`.
    pub fn to_capsules(&mut self, x: Var, dim: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("to_capsules", self.shape(x))?;
        if dim == 0 || c % dim != 0 {
            return Err(TensorError::Shape {
                op: "to_capsules",
                detail: format!("{c} channels not divisible by capsule dim {dim}"),
            });
        }
        let groups = c / dim;
        let hw = h * w;
        let caps = groups * hw;
        // perm[dst] = src within one sample
        let mut perm = vec![0u32; c * hw];
        for g in 0..groups {
            for p in 0..hw {
                for d in 0..dim {
                    perm[(g * hw + p) * dim + d] = ((g * dim + d) * hw + p) as u32;
                }
            }
        }
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(v.len());
        for s in 0..n {
            let base = s * c * hw;
            out.extend(perm.iter().map(|&i| v[base + i as usize]));
        }
        let y = Tensor::new(&[n, caps, dim], out)?;
        self.push(
            "to_capsules",
            y,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let gd = g.data_mut();
                let go = ctx.grad.data();
                for s in 0..n {
                    let base = s * c * hw;
                    for (k, &i) in perm.iter().enumerate() {
                        gd[base + i as usize] = go[base + k];
                    }
                }
                vec![Some(g)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn reflect_without_repeating_edge() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(-2, 4), 2);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(5, 4), 1);
        assert_eq!(reflect_index(2, 4), 2);
    }

    /// Direct nested-loop cross-correlation over an explicitly padded image.
    fn conv_oracle(x: &[f64], h: usize, w: usize, kern: &[f64], k: usize, bias: f64, stride: usize) -> Vec<f64> {
        let pad = (k - 1) / 2;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut padded = vec![0.0; ph * pw];
        for y in 0..ph {
            for xx in 0..pw {
                let sy = reflect_index(y as isize - pad as isize, h);
                let sx = reflect_index(xx as isize - pad as isize, w);
                padded[y * pw + xx] = x[sy * w + sx];
            }
        }
        let oh = (ph - k) / stride + 1;
        let ow = (pw - k) / stride + 1;
        let mut out = vec![];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += kern[ky * k + kx] * padded[(oy * stride + ky) * pw + ox * stride + kx];
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 4, 4], &data).unwrap());
        let k = tape.param(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.param(Tensor::zeros(&[1]));
        let y = tape.conv2d_mirror(x, k, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_constant_image_has_no_edge_artifacts() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 6, 5], 0.7));
        let kern = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9];
        let sum: f64 = kern.iter().sum();
        let k = tape.param(Tensor::from_f64(&[1, 1, 3, 3], &kern).unwrap());
        let b = tape.param(Tensor::full(&[1], 0.25));
        let y = tape.conv2d_mirror(x, k, b, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - (0.7 * sum + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let kern = [1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 0.25, 1.5, -0.75];
        for stride in [1, 2] {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::from_f64(&[1, 1, 4, 4], &ramp).unwrap());
            let k = tape.param(Tensor::from_f64(&[1, 1, 3, 3], &kern).unwrap());
            let b = tape.param(Tensor::full(&[1], 0.5));
            let y = tape.conv2d_mirror(x, k, b, stride).unwrap();
            let expected = conv_oracle(&ramp, 4, 4, &kern, 3, 0.5, stride);
            assert_eq!(tape.value(y).data(), &expected[..]);
        }
    }

    fn check_multichannel(c_in: usize, c_out: usize, h: usize, w: usize, k: usize, stride: usize) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2 * c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kern: Vec<f64> = (0..c_out * c_in * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::from_f64(&[2, c_in, h, w], &x).unwrap());
        let kv = tape.param(Tensor::from_f64(&[c_out, c_in, k, k], &kern).unwrap());
        let bv = tape.param(Tensor::from_f64(&[c_out], &bias).unwrap());
        let y = tape.conv2d_mirror(xv, kv, bv, stride).unwrap();
        let out = tape.value(y).data();
        let plane_out = out.len() / (2 * c_out);
        for s in 0..2 {
            for co in 0..c_out {
                let mut acc = vec![bias[co]; plane_out];
                for ci in 0..c_in {
                    let plane = &x[(s * c_in + ci) * h * w..(s * c_in + ci + 1) * h * w];
                    let kk = &kern[(co * c_in + ci) * k * k..(co * c_in + ci + 1) * k * k];
                    for (a, v) in acc.iter_mut().zip(conv_oracle(plane, h, w, kk, k, 0.0, stride)) {
                        *a += v;
                    }
                }
                let got = &out[(s * c_out + co) * plane_out..(s * c_out + co + 1) * plane_out];
                for (a, b) in acc.iter().zip(got) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conv_multichannel_matches_oracle() {
        check_multichannel(3, 2, 5, 6, 3, 1);
        check_multichannel(2, 3, 7, 6, 5, 2);
    }

    #[test]
    fn conv_tiled_columns_match_oracle() {
        // Wide inputs split the im2col buffer into several row tiles.
        check_multichannel(300, 2, 10, 9, 3, 1);
        check_multichannel(300, 2, 11, 9, 3, 2);
        check_multichannel(120, 2, 9, 12, 5, 1);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.param(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.param(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d_mirror(x, k, b, 1), Err(TensorError::Shape { .. })));
        let k = tape.param(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(tape.conv2d_mirror(x, k, b, 1), Err(TensorError::EvenKernel { .. })));
    }

    #[test]
    fn pooling_and_upsampling() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 0.3));
        let p = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 2, 2]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.3));

        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let y = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &data).unwrap());
        let up = tape.upsample_nearest(y, 2).unwrap();
        let back = tape.max_pool2d(up, 2).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);

        let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(tape.max_pool2d(odd, 2).is_err());
    }

    #[test]
    fn capsule_regrouping() {
        let mut tape = Tape::<f64>::new();
        // 4 channels, 1×2 spatial, capsule dim 2 → 2 groups × 2 positions.
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 4, 1, 2], &data).unwrap());
        let u = tape.to_capsules(x, 2).unwrap();
        assert_eq!(tape.shape(u), &[1, 4, 2]);
        assert_eq!(tape.value(u).data(), &[0., 2., 1., 3., 4., 6., 5., 7.]);
    }
}
