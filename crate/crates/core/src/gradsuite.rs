//! Finite-difference checks of every differentiable operator, every loss
//! term and the assembled objective, all in 64-bit on random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, LossConfig, LossParts};
use crate::model;
use crate::pipeline;
use crate::tensor::gradcheck::{self, GradCheckReport};
use crate::tensor::{BatchNormMode, Result, RunningStats, Tape, Tensor, Var};

pub const STEP: f64 = 1e-3;
pub const OPERATOR_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.checked > 0 && self.report.passes(self.tolerance)
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    tolerance: f64,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Reduces any output to a scalar with fixed, uneven weights so that every
/// output element contributes a distinct amount.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (0.37 * i as f64 + 0.1).cos()).collect();
    let w = tape.constant(Tensor::from_f64(&shape, &w)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn op(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        tolerance: OPERATOR_TOL,
        inputs,
        build: Box::new(move |t, v| {
            let y = f(t, v)?;
            project(t, y)
        }),
    }
}

fn loss(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        tolerance: LOSS_TOL,
        inputs,
        build: Box::new(f),
    }
}

fn operator_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let mut u = |shape: &[usize]| uniform(r, shape, -1.0, 1.0);
    let bn_stats = (vec![0.1, -0.2, 0.05], vec![0.8, 1.3, 0.6]);
    let target = Tensor::from_f64(&[2, 1, 3, 3], &(0..18).map(|i| (i % 5) as f64 / 4.0).collect::<Vec<_>>()).unwrap();
    vec![
        op("relu", vec![u(&[3, 4])], |t, v| t.relu(v[0])),
        op("tanh", vec![u(&[3, 4])], |t, v| t.tanh(v[0])),
        op("sigmoid", vec![u(&[3, 4])], |t, v| t.sigmoid(v[0])),
        op("truncated_tanh", vec![u(&[3, 4])], |t, v| t.truncated_tanh(v[0])),
        op("square", vec![u(&[3, 4])], |t, v| t.square(v[0])),
        op("abs", vec![u(&[3, 4])], |t, v| t.abs(v[0])),
        op("add", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.add(v[0], v[1])),
        op("sub", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.sub(v[0], v[1])),
        op("mul", vec![u(&[2, 3]), u(&[2, 3])], |t, v| t.mul(v[0], v[1])),
        op("scale", vec![u(&[5])], |t, v| t.scale(v[0], 1.7)),
        op("add_scalar", vec![u(&[5])], |t, v| t.add_scalar(v[0], -0.4)),
        op("sum", vec![u(&[2, 3])], |t, v| t.sum(v[0])),
        op("mean", vec![u(&[2, 3])], |t, v| t.mean(v[0])),
        op("sum_last", vec![u(&[2, 3, 4])], |t, v| t.sum_last(v[0])),
        op("reshape", vec![u(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        op("slice_outer", vec![u(&[4, 3])], |t, v| t.slice_outer(v[0], 1, 2)),
        op("concat_outer", vec![u(&[2, 3]), u(&[1, 3])], |t, v| t.concat_outer(&[v[0], v[1]])),
        op("concat_channels", vec![u(&[2, 2, 3, 3]), u(&[2, 1, 3, 3])], |t, v| {
            t.concat_channels(&[v[0], v[1]])
        }),
        op("mul_channel_broadcast", vec![u(&[2, 3, 4, 4]), u(&[2, 1, 4, 4])], |t, v| {
            t.mul_channel_broadcast(v[0], v[1])
        }),
        op("linear", vec![u(&[3, 5]), u(&[4, 5]), u(&[4])], |t, v| t.linear(v[0], v[1], v[2])),
        op("bce_with_logits_mean", vec![u(&[2, 1, 3, 3])], move |t, v| {
            t.bce_with_logits_mean(v[0], &target)
        }),
        op("conv2d_mirror", vec![u(&[2, 2, 5, 5]), u(&[3, 2, 3, 3]), u(&[3])], |t, v| {
            t.conv2d_mirror(v[0], v[1], v[2], 1)
        }),
        op("conv2d_mirror_stride2", vec![u(&[2, 2, 6, 6]), u(&[3, 2, 3, 3]), u(&[3])], |t, v| {
            t.conv2d_mirror(v[0], v[1], v[2], 2)
        }),
        op("conv2d_mirror_1x1", vec![u(&[2, 3, 4, 4]), u(&[2, 3, 1, 1]), u(&[2])], |t, v| {
            t.conv2d_mirror(v[0], v[1], v[2], 1)
        }),
        op("max_pool2d", vec![u(&[2, 2, 4, 4])], |t, v| t.max_pool2d(v[0], 2)),
        op("resize_nearest", vec![u(&[1, 2, 3, 3])], |t, v| t.resize_nearest(v[0], 5, 5)),
        op("upsample_nearest", vec![u(&[1, 2, 3, 3])], |t, v| t.upsample_nearest(v[0], 2)),
        op("to_capsules", vec![u(&[2, 8, 2, 2])], |t, v| t.to_capsules(v[0], 4)),
        op("batch_norm_train", vec![u(&[4, 3, 2, 2]), u(&[3]), u(&[3])], |t, v| {
            let (mut m, mut s) = (vec![0.0; 3], vec![1.0; 3]);
            let stats = RunningStats { mean: &mut m, var: &mut s };
            t.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, stats)
        }),
        op("batch_norm_eval", vec![u(&[4, 3, 2, 2]), u(&[3]), u(&[3])], move |t, v| {
            let (mut m, mut s) = bn_stats.clone();
            let stats = RunningStats { mean: &mut m, var: &mut s };
            t.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval, stats)
        }),
        op("squash", vec![u(&[3, 4])], |t, v| t.squash(v[0])),
        op("norm_last", vec![u(&[3, 4])], |t, v| t.norm_last(v[0])),
        op("l2_normalize", vec![u(&[3, 4])], |t, v| t.l2_normalize(v[0])),
        op("dot_last", vec![u(&[3, 4]), u(&[3, 4])], |t, v| t.dot_last(v[0], v[1])),
        op("cosine", vec![u(&[3, 4]), u(&[3, 4])], |t, v| t.cosine(v[0], v[1])),
        op("softmax_last", vec![u(&[3, 4])], |t, v| t.softmax_last(v[0])),
        op("capsule_predict", vec![u(&[2, 3, 4]), u(&[3, 2, 5, 4])], |t, v| {
            t.capsule_predict(v[0], v[1])
        }),
        op("route_sum", vec![u(&[2, 3, 2]), u(&[2, 3, 2, 5])], |t, v| t.route_sum(v[0], v[1])),
        op("agreement", vec![u(&[2, 3, 2, 5]), u(&[2, 2, 5])], |t, v| t.agreement(v[0], v[1])),
        op("dynamic_routing", vec![u(&[2, 6, 4]), u(&[6, 3, 5, 4])], |t, v| {
            let u = t.squash(v[0])?;
            Ok(model::digit_capsules(t, u, v[1], 3)?.0)
        }),
    ]
}

fn loss_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let cfg = LossConfig::default();
    // Capsule outputs with norms spread across both margins.
    let caps = |r: &mut ChaCha8Rng| uniform(r, &[3, 4, 5], -0.6, 0.6);
    let labels = [0usize, 3, 1];
    let seg_t: Vec<Tensor<f64>> = (0..2).map(|_| uniform(r, &[2, 1, 4, 4], 0.0, 1.0)).collect();
    let (t1, t2) = (seg_t[0].clone(), seg_t[1].clone());
    let (t1b, t2b) = (t1.clone(), t2.clone());
    let c1 = cfg.clone();
    let c2 = cfg.clone();
    let c3 = cfg.clone();
    vec![
        loss("margin_loss", vec![caps(r)], move |t, v| losses::margin_loss(t, v[0], &labels, &c1)),
        loss("classification_loss", vec![caps(r), caps(r)], move |t, v| {
            losses::classification_loss(t, v[0], v[1], &labels, &c2)
        }),
        loss("contrastive_distance", vec![uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[3, 6], -1.0, 1.0)], |t, v| {
            let d = losses::contrastive_distance(t, v[0], v[1])?;
            t.mean(d)
        }),
        loss(
            "contrastive_loss",
            (0..4).map(|_| uniform(r, &[3, 6], -1.0, 1.0)).collect(),
            |t, v| losses::contrastive_loss(t, v[0], v[1], v[2], v[3]),
        ),
        loss(
            "segmentation_loss",
            vec![uniform(r, &[2, 1, 4, 4], -2.0, 2.0), uniform(r, &[2, 1, 4, 4], -2.0, 2.0)],
            move |t, v| losses::segmentation_loss(t, v[0], v[1], &t1, &t2),
        ),
        loss(
            "sparse_loss",
            vec![uniform(r, &[2, 1, 3, 3], 0.05, 0.95), uniform(r, &[2, 1, 3, 3], 0.05, 0.95)],
            |t, v| losses::sparse_loss(t, v[0], v[1]),
        ),
        loss(
            "total_loss",
            vec![
                caps(r),
                caps(r),
                uniform(r, &[3, 6], -1.0, 1.0),
                uniform(r, &[3, 6], -1.0, 1.0),
                uniform(r, &[3, 6], -1.0, 1.0),
                uniform(r, &[3, 6], -1.0, 1.0),
                uniform(r, &[3, 1, 4, 4], -2.0, 2.0),
                uniform(r, &[3, 1, 4, 4], -2.0, 2.0),
                uniform(r, &[3, 1, 3, 3], 0.05, 0.95),
                uniform(r, &[3, 1, 3, 3], 0.05, 0.95),
            ],
            move |t, v| {
                let pad = |x: &Tensor<f64>| Tensor::concat_outer(&[x, &x.slice_outer(0, 1).unwrap()]).unwrap();
                let parts = LossParts {
                    l_cls: losses::classification_loss(t, v[0], v[1], &labels, &c3)?,
                    l_con: Some(losses::contrastive_loss(t, v[2], v[3], v[4], v[5])?),
                    l_seg: Some(losses::segmentation_loss(t, v[6], v[7], &pad(&t1b), &pad(&t2b))?),
                    l_spa: losses::sparse_loss(t, v[8], v[9])?,
                };
                Ok(losses::total_loss(t, parts, &c3)?.0)
            },
        ),
    ]
}

fn run(cases: Vec<Case>) -> Result<Vec<SuiteEntry>> {
    cases
        .into_iter()
        .map(|c| {
            let report = gradcheck::check(&c.inputs, STEP, None, c.build)?;
            Ok(SuiteEntry {
                name: c.name,
                tolerance: c.tolerance,
                report,
            })
        })
        .collect()
}

pub fn operator_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    run(operator_cases(&mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn loss_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    run(loss_cases(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Operators, loss terms and the full-model objective on a 2-image batch.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = operator_suite(seed)?;
    out.extend(loss_suite(seed)?);
    out.push(SuiteEntry {
        name: "full_model",
        tolerance: LOSS_TOL,
        report: pipeline::full_model_gradcheck(seed, STEP, &LossConfig::default())?,
    });
    Ok(out)
}
