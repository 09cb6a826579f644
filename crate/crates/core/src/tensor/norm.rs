use super::{s, Result, Scalar, Tape, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Borrowed running mean / variance of one batch-norm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut [T],
    pub var: &'a mut [T],
}

impl<T: Scalar> Tape<T> {
    /// Per-channel batch normalization over axis 1 of an `N×C×…` tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        stats: RunningStats<'_, T>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: format!("rank {} < 2", shape.len()),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(TensorError::Shape {
                op: "batch_norm",
                detail: format!("{c} channels vs gamma {:?}", self.shape(gamma)),
            });
        }
        if mode == BatchNormMode::Train && n < 2 {
            return Err(TensorError::BatchTooSmall(n));
        }
        let count = n * spatial;
        let count_t = T::from_usize(count).unwrap();
        let eps = s::<T>(BN_EPS);
        let xv = self.value(x).data();

        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        match mode {
            BatchNormMode::Train => {
                let momentum = s::<T>(BN_MOMENTUM);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * spatial;
                        acc = xv[o..o + spatial].iter().fold(acc, |a, &v| a + v);
                    }
                    let mu = acc / count_t;
                    let mut sq = T::zero();
                    for b in 0..n {
                        let o = (b * c + ch) * spatial;
                        sq = xv[o..o + spatial].iter().fold(sq, |a, &v| a + (v - mu) * (v - mu));
                    }
                    let var = sq / count_t;
                    mean[ch] = mu;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = sq / T::from_usize(count - 1).unwrap();
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mu;
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                }
            }
            BatchNormMode::Eval => {
                for ch in 0..c {
                    mean[ch] = stats.mean[ch];
                    inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
                }
            }
        }

        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * spatial;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                out.extend(xv[o..o + spatial].iter().map(|&v| ga * (v - mu) * is + be));
            }
        }
        let y = Tensor::new(&shape, out)?;
        self.push(
            "batch_norm",
            y,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let xv = ctx.inputs[0].data();
                let ga = ctx.inputs[1].data();
                let gy = ctx.grad.data();
                // Per-channel Σ dy and Σ dy·x̂.
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * spatial;
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        for k in o..o + spatial {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * (xv[k] - mu) * is;
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); xv.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * spatial;
                            let (mu, is) = (mean[ch], inv_std[ch]);
                            let scale = ga[ch] * is;
                            match mode {
                                BatchNormMode::Train => {
                                    let mdy = sum_dy[ch] / count_t;
                                    let mdyx = sum_dy_xhat[ch] / count_t;
                                    for k in o..o + spatial {
                                        let xhat = (xv[k] - mu) * is;
                                        gx[k] = scale * (gy[k] - mdy - xhat * mdyx);
                                    }
                                }
                                BatchNormMode::Eval => {
                                    for k in o..o + spatial {
                                        gx[k] = scale * gy[k];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::new(ctx.inputs[0].shape(), gx).unwrap()
                });
                vec![
                    gx,
                    ctx.needs[1].then(|| Tensor::new(&[c], sum_dy_xhat.clone()).unwrap()),
                    ctx.needs[2].then(|| Tensor::new(&[c], sum_dy.clone()).unwrap()),
                ]
            }),
        )
    }
}
