//! The network graph: a U-shaped encoder producing multi-scale features and a
//! soft target mask, a segmentation decoder, primary and digit capsules with
//! dynamic routing, and the projector/predictor alignment heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::checkpoint::{self, CheckpointError, NamedTensor};
use crate::tensor::{BatchNormMode, Result, RunningStats, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Encoder widths of the three stages.
    pub channels: [usize; 3],
    /// Decoder widths of the two upsampling stages.
    pub decoder_channels: [usize; 2],
    pub primary_channels: usize,
    pub capsule_dim: usize,
    pub digit_dim: usize,
    pub align_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub routing_iters: usize,
    /// Initial bias of the mask head. Small and positive: the mask starts
    /// nearly closed but off the flat side of the truncation.
    pub mask_bias_init: f64,
    /// Standard deviation of the mask-head weights, relative to
    /// `1/sqrt(channels)`. Zero starts the mask spatially uniform; random
    /// weights tend to close it on bright targets before training can act.
    pub mask_init_scale: f64,
    /// Standard deviation of the digit-capsule transformation matrices.
    pub route_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 10,
            channels: [16, 32, 64],
            decoder_channels: [16, 8],
            primary_channels: 64,
            capsule_dim: 8,
            digit_dim: 16,
            align_dim: 64,
            projector_hidden: 128,
            predictor_hidden: 32,
            routing_iters: 3,
            mask_bias_init: 0.1,
            mask_init_scale: 0.0,
            route_init_std: 0.05,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ModelConfigError(pub String);

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), ModelConfigError> {
        let err = |m: String| Err(ModelConfigError(m));
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return err(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.num_classes < 1 {
            return err("num_classes must be at least 1".into());
        }
        if self.channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return err("channel widths must be positive".into());
        }
        if self.capsule_dim == 0 || self.primary_channels % self.capsule_dim != 0 {
            return err(format!(
                "primary_channels {} must be a multiple of capsule_dim {}",
                self.primary_channels, self.capsule_dim
            ));
        }
        if self.digit_dim == 0 || self.align_dim == 0 || self.projector_hidden == 0 || self.predictor_hidden == 0 {
            return err("head widths must be positive".into());
        }
        if self.routing_iters < 1 {
            return err("routing_iters must be at least 1".into());
        }
        if !(self.route_init_std > 0.0) || !self.mask_bias_init.is_finite() || !(self.mask_init_scale >= 0.0) {
            return err("initialisation constants must be finite and positive".into());
        }
        Ok(())
    }

    /// Spatial size of the masked feature maps (H / 4).
    pub fn mid_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn concat_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Number of primary capsules.
    pub fn num_primary(&self) -> usize {
        let g = self.mid_size() / 2;
        self.primary_channels / self.capsule_dim * g * g
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: ConvIdx,
    bn: BnIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: [[ConvBn; 2]; 3],
    mask: ConvIdx,
    dec_reduce: ConvBn,
    dec: [ConvBn; 2],
    dec_out: ConvIdx,
    primary: ConvIdx,
    route: usize,
    proj1: ConvIdx,
    proj_bn: BnIdx,
    proj2: ConvIdx,
    pred1: ConvIdx,
    pred_bn: BnIdx,
    pred2: ConvIdx,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He(usize),
    Normal(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

/// Parameter and buffer declarations of one configuration.
#[derive(Debug, Clone, Default)]
struct Builder {
    params: Vec<TensorSpec>,
    buffers: Vec<TensorSpec>,
}

impl Builder {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        self.params.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        self.buffers.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.buffers.len() - 1
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvIdx {
        ConvIdx {
            w: self.param(&format!("{name}.w"), &[c_out, c_in, k, k], Init::He(c_in * k * k)),
            b: self.param(&format!("{name}.b"), &[c_out], Init::Const(0.0)),
        }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> ConvIdx {
        ConvIdx {
            w: self.param(&format!("{name}.w"), &[out, inp], Init::He(inp)),
            b: self.param(&format!("{name}.b"), &[out], Init::Const(0.0)),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.param(&format!("{name}.gamma"), &[c], Init::Const(1.0)),
            beta: self.param(&format!("{name}.beta"), &[c], Init::Const(0.0)),
            mean: self.buffer(&format!("{name}.running_mean"), &[c], Init::Const(0.0)),
            var: self.buffer(&format!("{name}.running_var"), &[c], Init::Const(1.0)),
        }
    }

    fn conv_bn(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), c_out, c_in, k),
            bn: self.bn(&format!("{name}.bn"), c_out),
        }
    }
}

/// What a forward pass computes besides the classification path.
#[derive(Debug, Clone)]
pub struct ForwardOptions<T> {
    pub mode: BatchNormMode,
    pub decoder: bool,
    pub simsiam: bool,
    /// Multiplied into the mask (`N×1×h×w`); zeros force the mask closed.
    pub mask_gate: Option<Tensor<T>>,
}

impl<T> ForwardOptions<T> {
    pub fn train() -> Self {
        Self {
            mode: BatchNormMode::Train,
            decoder: true,
            simsiam: true,
            mask_gate: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: BatchNormMode::Eval,
            decoder: false,
            simsiam: false,
            mask_gate: None,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Concatenated multi-scale features, `B×C×h×w`.
    pub z_c: Var,
    /// Soft target mask in `[0, 1)`, `B×1×h×w`.
    pub z_m: Var,
    pub masked: Var,
    /// Pre-sigmoid segmentation map, `B×1×H×W`.
    pub seg_logits: Option<Var>,
    /// Primary capsules, `B×N×d_u`.
    pub u: Var,
    /// Digit capsules, `B×K×d_v`.
    pub v: Var,
    /// Routing coefficients of every iteration, each `B×N×K`.
    pub couplings: Vec<Var>,
    /// Projection, `B×d_a`.
    pub m: Option<Var>,
    /// Prediction, `B×d_a`.
    pub n: Option<Var>,
}

/// Architecture: configuration plus the parameter layout it implies.
#[derive(Debug, Clone)]
pub struct Architecture {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<TensorSpec>,
    buffers: Vec<TensorSpec>,
}

impl Architecture {
    pub fn new(cfg: ModelConfig) -> std::result::Result<Self, ModelConfigError> {
        cfg.validate()?;
        let mut b = Builder::default();
        let [c1, c2, c3] = cfg.channels;
        let enc = [
            [b.conv_bn("enc.s1.0", c1, 1, 3), b.conv_bn("enc.s1.1", c1, c1, 3)],
            [b.conv_bn("enc.s2.0", c2, c1, 3), b.conv_bn("enc.s2.1", c2, c2, 3)],
            [b.conv_bn("enc.s3.0", c3, c2, 3), b.conv_bn("enc.s3.1", c3, c3, 3)],
        ];
        let cc = cfg.concat_channels();
        let mask = ConvIdx {
            w: b.param("mask.w", &[1, cc, 1, 1], Init::Normal(cfg.mask_init_scale * (1.0 / cc as f64).sqrt())),
            b: b.param("mask.b", &[1], Init::Const(cfg.mask_bias_init)),
        };
        let [d1, d2] = cfg.decoder_channels;
        let dec_reduce = b.conv_bn("dec.reduce", d1, cc, 1);
        let dec = [b.conv_bn("dec.up1", d1, d1 + c2, 3), b.conv_bn("dec.up2", d2, d1 + c1, 3)];
        let dec_out = b.conv("dec.out", 1, d2, 1);
        let primary = b.conv("primary", cfg.primary_channels, cc, 3);
        let n_caps = cfg.num_primary();
        let route = b.param(
            "digit.w",
            &[n_caps, cfg.num_classes, cfg.digit_dim, cfg.capsule_dim],
            Init::Normal(cfg.route_init_std),
        );
        let flat = n_caps * cfg.capsule_dim;
        let proj1 = b.linear("proj.fc1", cfg.projector_hidden, flat);
        let proj_bn = b.bn("proj.bn", cfg.projector_hidden);
        let proj2 = b.linear("proj.fc2", cfg.align_dim, cfg.projector_hidden);
        let pred1 = b.linear("pred.fc1", cfg.predictor_hidden, cfg.align_dim);
        let pred_bn = b.bn("pred.bn", cfg.predictor_hidden);
        let pred2 = b.linear("pred.fc2", cfg.align_dim, cfg.predictor_hidden);
        Ok(Self {
            cfg,
            layout: Layout {
                enc,
                mask,
                dec_reduce,
                dec,
                dec_out,
                primary,
                route,
                proj1,
                proj_bn,
                proj2,
                pred1,
                pred_bn,
                pred2,
            },
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> &[TensorSpec] {
        &self.params
    }

    pub fn buffer_specs(&self) -> &[TensorSpec] {
        &self.buffers
    }

    /// Indices of parameters belonging to a name prefix, e.g. `"proj."`.
    pub fn params_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, s)| s.name.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|s| s.name == name)
    }

    fn conv_bn_relu<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        buffers: &mut [Tensor<T>],
        x: Var,
        l: ConvBn,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let y = tape.conv2d_mirror(x, p[l.conv.w], p[l.conv.b], 1)?;
        let y = self.batch_norm(tape, p, buffers, y, l.bn, mode)?;
        tape.relu(y)
    }

    fn batch_norm<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        buffers: &mut [Tensor<T>],
        x: Var,
        l: BnIdx,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let (mean, var) = two_mut(buffers, l.mean, l.var);
        tape.batch_norm(
            x,
            p[l.gamma],
            p[l.beta],
            mode,
            RunningStats {
                mean: mean.data_mut(),
                var: var.data_mut(),
            },
        )
    }

    /// Runs the network on a `B×1×H×W` batch. `params` are the tape handles
    /// of [`HdaNet::params`] in declaration order.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        buffers: &mut [Tensor<T>],
        x: Var,
        opts: &ForwardOptions<T>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let l = &self.layout;
        let p = params;
        let size = cfg.image_size;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != size || xs[3] != size {
            return Err(TensorError::Shape {
                op: "encoder",
                detail: format!("expected B×1×{size}×{size}, got {xs:?}"),
            });
        }
        let batch = xs[0];
        let mode = opts.mode;
        let mid = cfg.mid_size();

        let mut skips = Vec::with_capacity(3);
        let mut pooled = Vec::with_capacity(3);
        let mut h = x;
        for stage in &l.enc {
            h = self.conv_bn_relu(tape, p, buffers, h, stage[0], mode)?;
            h = self.conv_bn_relu(tape, p, buffers, h, stage[1], mode)?;
            skips.push(h);
            h = tape.max_pool2d(h, 2)?;
            pooled.push(h);
        }
        let resized = pooled
            .iter()
            .map(|&v| tape.resize_nearest(v, mid, mid))
            .collect::<Result<Vec<_>>>()?;
        let z_c = tape.concat_channels(&resized)?;

        let mask_pre = tape.conv2d_mirror(z_c, p[l.mask.w], p[l.mask.b], 1)?;
        let mut z_m = tape.truncated_tanh(mask_pre)?;
        if let Some(gate) = &opts.mask_gate {
            if gate.shape() != [batch, 1, mid, mid] {
                return Err(TensorError::Shape {
                    op: "mask_gate",
                    detail: format!("{:?}", gate.shape()),
                });
            }
            let g = tape.constant(gate.clone());
            z_m = tape.mul(z_m, g)?;
        }
        let masked = tape.mul_channel_broadcast(z_c, z_m)?;

        let seg_logits = if opts.decoder {
            // A 1×1 channel reduction keeps the full-resolution stages cheap.
            let a = self.conv_bn_relu(tape, p, buffers, masked, l.dec_reduce, mode)?;
            let a = tape.upsample_nearest(a, 2)?;
            let a = tape.concat_channels(&[a, skips[1]])?;
            let a = self.conv_bn_relu(tape, p, buffers, a, l.dec[0], mode)?;
            let b = tape.upsample_nearest(a, 2)?;
            let b = tape.concat_channels(&[b, skips[0]])?;
            let b = self.conv_bn_relu(tape, p, buffers, b, l.dec[1], mode)?;
            Some(tape.conv2d_mirror(b, p[l.dec_out.w], p[l.dec_out.b], 1)?)
        } else {
            None
        };

        let prim = tape.conv2d_mirror(masked, p[l.primary.w], p[l.primary.b], 2)?;
        let caps = tape.to_capsules(prim, cfg.capsule_dim)?;
        let u = tape.squash(caps)?;

        let (v, couplings) = digit_capsules(tape, u, p[l.route], cfg.routing_iters)?;

        let (m, n) = if opts.simsiam {
            let flat = tape.reshape(u, &[batch, cfg.num_primary() * cfg.capsule_dim])?;
            let m = self.projector(tape, p, buffers, flat, mode)?;
            let n = self.predictor(tape, p, buffers, m, mode)?;
            (Some(m), Some(n))
        } else {
            (None, None)
        };

        Ok(ForwardOutput {
            z_c,
            z_m,
            masked,
            seg_logits,
            u,
            v,
            couplings,
            m,
            n,
        })
    }

    /// `linear → BN → ReLU → linear` on flattened primary capsules.
    pub fn projector<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        buffers: &mut [Tensor<T>],
        flat: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let l = &self.layout;
        let h = tape.linear(flat, p[l.proj1.w], p[l.proj1.b])?;
        let h = self.batch_norm(tape, p, buffers, h, l.proj_bn, mode)?;
        let h = tape.relu(h)?;
        tape.linear(h, p[l.proj2.w], p[l.proj2.b])
    }

    /// Bottleneck `linear → BN → ReLU → linear` applied to a projection.
    pub fn predictor<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        buffers: &mut [Tensor<T>],
        m: Var,
        mode: BatchNormMode,
    ) -> Result<Var> {
        let l = &self.layout;
        let h = tape.linear(m, p[l.pred1.w], p[l.pred1.b])?;
        let h = self.batch_norm(tape, p, buffers, h, l.pred_bn, mode)?;
        let h = tape.relu(h)?;
        tape.linear(h, p[l.pred2.w], p[l.pred2.b])
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Dynamic routing by agreement.
///
/// `û = W·u`, logits start at zero; each iteration computes
/// `c = softmax_k(b)`, `s_k = Σᵢ cᵢₖ ûₖ|ᵢ`, `v = squash(s)` and, except after
/// the last iteration, `bᵢₖ += ûₖ|ᵢ · vₖ`.
pub fn digit_capsules<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    route_w: Var,
    iters: usize,
) -> Result<(Var, Vec<Var>)> {
    if iters < 1 {
        return Err(TensorError::Invalid("routing needs at least one iteration".into()));
    }
    let uhat = tape.capsule_predict(u, route_w)?;
    let sh = tape.shape(uhat).to_vec();
    let mut logits = tape.constant(Tensor::zeros(&sh[..3]));
    let mut couplings = Vec::with_capacity(iters);
    let mut v = None;
    for it in 0..iters {
        let c = tape.softmax_last(logits)?;
        couplings.push(c);
        let s = tape.route_sum(c, uhat)?;
        let vk = tape.squash(s)?;
        if it + 1 < iters {
            let a = tape.agreement(uhat, vk)?;
            logits = tape.add(logits, a)?;
        }
        v = Some(vk);
    }
    Ok((v.unwrap(), couplings))
}

/// A network with its parameters and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct HdaNet<T> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> HdaNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> std::result::Result<Self, ModelConfigError> {
        let arch = Architecture::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = |spec: &TensorSpec, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let n: usize = spec.shape.iter().product();
            let std = match spec.init {
                Init::Const(c) => return Tensor::full(&spec.shape, T::from_f64_lossy(c)),
                Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
                Init::Normal(s) => s,
            };
            let dist = Normal::new(0.0, std).unwrap();
            let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
            Tensor::new(&spec.shape, data).unwrap()
        };
        let params = arch.params.iter().map(|s| init(s, &mut rng)).collect();
        let buffers = arch.buffers.iter().map(|s| init(s, &mut rng)).collect();
        Ok(Self { arch, params, buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        params: &[Var],
        x: Var,
        opts: &ForwardOptions<T>,
    ) -> Result<ForwardOutput> {
        self.arch.forward(tape, params, &mut self.buffers, x, opts)
    }

    /// Inference on a batch of images (`B×1×H×W`): digit-capsule norms `B×K`.
    pub fn class_scores(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(images.clone());
        let mut buffers = self.buffers.clone();
        let out = self
            .arch
            .forward(&mut tape, &params, &mut buffers, x, &ForwardOptions::eval())?;
        let norms = tape.norm_last(out.v)?;
        Ok(tape.value(norms).clone())
    }

    /// `argmax_k ‖v_k‖` per image, first index on ties.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let scores = self.class_scores(images)?;
        Ok(argmax_rows(scores.data(), self.config().num_classes))
    }

    pub fn cast<U: Scalar>(&self) -> HdaNet<U> {
        HdaNet {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            buffers: self.buffers.iter().map(|b| b.cast()).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|t| t.all_finite())
    }
}

pub fn argmax_rows<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

impl HdaNet<f32> {
    /// Parameters followed by running statistics, in declaration order.
    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.arch
            .params
            .iter()
            .zip(&self.params)
            .chain(self.arch.buffers.iter().zip(&self.buffers))
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect()
    }

    pub fn save(&self, path: &std::path::Path) -> std::result::Result<(), CheckpointError> {
        checkpoint::save(path, &self.named_tensors())
    }

    /// Loads weights saved from a network with the same configuration.
    pub fn load(cfg: ModelConfig, path: &std::path::Path) -> std::result::Result<Self, CheckpointError> {
        let entries = checkpoint::load(path)?;
        Self::from_named(cfg, entries)
    }

    pub fn from_named(
        cfg: ModelConfig,
        entries: Vec<NamedTensor>,
    ) -> std::result::Result<Self, CheckpointError> {
        let arch = Architecture::new(cfg).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let specs: Vec<&TensorSpec> = arch.params.iter().chain(&arch.buffers).collect();
        if specs.len() != entries.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} tensors, found {}",
                specs.len(),
                entries.len()
            )));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (spec, (name, t)) in specs.iter().zip(entries) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "expected {} {:?}, found {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        let buffers = tensors.split_off(arch.params.len());
        Ok(Self {
            arch,
            params: tensors,
            buffers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            num_classes: 3,
            channels: [2, 3, 4],
            decoder_channels: [3, 2],
            primary_channels: 8,
            capsule_dim: 4,
            digit_dim: 5,
            align_dim: 6,
            projector_hidden: 7,
            predictor_hidden: 3,
            ..Default::default()
        }
    }

    #[test]
    fn default_primary_capsule_count() {
        // H = 64 → h = 16 → 8×8 after the stride-2 conv, 64 / 8 capsule types.
        assert_eq!(ModelConfig::default().num_primary(), 512);
        assert_eq!(ModelConfig::default().concat_channels(), 112);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            routing_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            image_size: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let mut net = HdaNet::<f64>::new(tiny(), 1).unwrap();
        let mut tape = Tape::new();
        let p = net.bind(&mut tape);
        let img: Vec<f64> = (0..2 * 256).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 1, 16, 16], &img).unwrap());
        let out = net.forward(&mut tape, &p, x, &ForwardOptions::train()).unwrap();
        assert_eq!(tape.shape(out.z_c), &[2, 9, 4, 4]);
        assert_eq!(tape.shape(out.z_m), &[2, 1, 4, 4]);
        assert_eq!(tape.shape(out.seg_logits.unwrap()), &[2, 1, 16, 16]);
        assert_eq!(tape.shape(out.u), &[2, 8, 4]);
        assert_eq!(tape.shape(out.v), &[2, 3, 5]);
        assert_eq!(tape.shape(out.m.unwrap()), &[2, 6]);
        assert_eq!(tape.shape(out.n.unwrap()), &[2, 6]);
        assert!(tape.value(out.z_m).data().iter().all(|&v| (0.0..1.0).contains(&v)));
        for caps in [out.u, out.v] {
            let d = *tape.shape(caps).last().unwrap();
            for row in tape.value(caps).data().chunks(d) {
                assert!(row.iter().map(|x| x * x).sum::<f64>().sqrt() < 1.0);
            }
        }
        for &c in &out.couplings {
            for row in tape.value(c).data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_names_follow_layout() {
        let net = HdaNet::<f32>::new(tiny(), 0).unwrap();
        let named = net.named_tensors();
        assert_eq!(named[0].0, "enc.s1.0.conv.w");
        assert!(named.iter().any(|(n, _)| n == "proj.bn.running_var"));
        let back = HdaNet::from_named(tiny(), named.clone()).unwrap();
        assert_eq!(back.named_tensors(), named);
        let mut wrong = named;
        wrong.pop();
        assert!(HdaNet::from_named(tiny(), wrong).is_err());
    }
}
