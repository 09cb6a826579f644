//! Classification, contrastive, segmentation and sparsity losses and their
//! weighted sum.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Segmentation weight α.
    pub alpha: f64,
    /// Sparsity weight β.
    pub beta: f64,
    /// Weight of the contrastive term; 1 in the full model, 0 disables
    /// alignment for the ablation baseline.
    pub contrastive_weight: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// Down-weighting η of the absent-class term.
    pub absent_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
            contrastive_weight: 1.0,
            margin_pos: 0.9,
            margin_neg: 0.1,
            absent_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let w = [self.alpha, self.beta, self.contrastive_weight, self.absent_weight];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("loss weights must be finite and non-negative".into());
        }
        if !(0.0 <= self.margin_neg && self.margin_neg < self.margin_pos && self.margin_pos <= 1.0) {
            return Err(format!(
                "margins must satisfy 0 <= margin_neg < margin_pos <= 1, got {} / {}",
                self.margin_neg, self.margin_pos
            ));
        }
        Ok(())
    }
}

/// Per-batch loss components (batch means) and the weights that combined them.
/// A component whose branch was not run (zero weight) is NaN.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_con: f64,
    pub l_seg: f64,
    pub l_spa: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub contrastive_weight: f64,
}

impl LossBreakdown {
    /// `l_cls + γ·l_con + α·l_seg + β·l_spa` recomputed from the parts.
    pub fn recombined(&self) -> f64 {
        let term = |w: f64, v: f64| if w == 0.0 { 0.0 } else { w * v };
        self.l_cls + term(self.contrastive_weight, self.l_con) + term(self.alpha, self.l_seg) + term(self.beta, self.l_spa)
    }
}

/// One-hot targets `B×K`.
fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(TensorError::Invalid(format!("label {y} out of range for {k} classes")));
        }
        t.data_mut()[b * k + y] = T::one();
    }
    Ok(t)
}

/// Margin loss on digit capsules `v: B×K×d_v`, averaged over the batch:
/// `Σ_k T_k·max(0, m⁺ − ‖v_k‖)² + η·(1 − T_k)·max(0, ‖v_k‖ − m⁻)²`.
pub fn margin_loss<T: Scalar>(tape: &mut Tape<T>, v: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(TensorError::Shape {
            op: "margin_loss",
            detail: format!("v {shape:?} for {} labels", labels.len()),
        });
    }
    let (b, k) = (shape[0], shape[1]);
    let present = one_hot::<T>(labels, k)?;
    let absent = present.map(|t| T::from_f64_lossy(cfg.absent_weight) * (T::one() - t));

    let norms = tape.norm_last(v)?;
    let neg = tape.scale(norms, -T::one())?;
    let pos_gap = tape.add_scalar(neg, T::from_f64_lossy(cfg.margin_pos))?;
    let pos_gap = tape.relu(pos_gap)?;
    let pos_sq = tape.square(pos_gap)?;
    let present = tape.constant(present);
    let pos = tape.mul(pos_sq, present)?;

    let neg_gap = tape.add_scalar(norms, T::from_f64_lossy(-cfg.margin_neg))?;
    let neg_gap = tape.relu(neg_gap)?;
    let neg_sq = tape.square(neg_gap)?;
    let absent = tape.constant(absent);
    let neg = tape.mul(neg_sq, absent)?;

    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, T::one() / T::from_usize(b).unwrap())
}

/// `l_cls = margin(v₁) + margin(v₂)`.
pub fn classification_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v1: Var,
    v2: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let a = margin_loss(tape, v1, labels, cfg)?;
    let b = margin_loss(tape, v2, labels, cfg)?;
    tape.add(a, b)
}

/// Row-wise negative cosine distance `D(m, n) = ½ − ½·cos(m, n)`, shape `B`.
pub fn contrastive_distance<T: Scalar>(tape: &mut Tape<T>, m: Var, n: Var) -> Result<Var> {
    let c = tape.cosine(m, n)?;
    let half = T::from_f64_lossy(0.5);
    let c = tape.scale(c, -half)?;
    tape.add_scalar(c, half)
}

/// Symmetrised loss `D(sg m₁, n₂) + D(sg m₂, n₁)`, averaged over the batch.
/// Gradients reach the projections only through the predictions.
pub fn contrastive_loss<T: Scalar>(tape: &mut Tape<T>, m1: Var, n1: Var, m2: Var, n2: Var) -> Result<Var> {
    let sm1 = tape.stop_gradient(m1);
    let sm2 = tape.stop_gradient(m2);
    let d12 = contrastive_distance(tape, sm1, n2)?;
    let d21 = contrastive_distance(tape, sm2, n1)?;
    let d = tape.add(d12, d21)?;
    tape.mean(d)
}

/// Pixel-mean binary cross-entropy of each view's logits against its
/// target, summed over the two views.
pub fn segmentation_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits1: Var,
    logits2: Var,
    target1: &Tensor<T>,
    target2: &Tensor<T>,
) -> Result<Var> {
    let a = tape.bce_with_logits_mean(logits1, target1)?;
    let b = tape.bce_with_logits_mean(logits2, target2)?;
    tape.add(a, b)
}

/// `mean|z_m,1| + mean|z_m,2|`.
pub fn sparse_loss<T: Scalar>(tape: &mut Tape<T>, z1: Var, z2: Var) -> Result<Var> {
    let a = tape.abs(z1)?;
    let a = tape.mean(a)?;
    let b = tape.abs(z2)?;
    let b = tape.mean(b)?;
    tape.add(a, b)
}

/// Tape handles of the four components. The contrastive and segmentation
/// terms need the SimSiam heads and the decoder; they may be left out when
/// their weight is zero.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub l_cls: Var,
    pub l_con: Option<Var>,
    pub l_seg: Option<Var>,
    pub l_spa: Var,
}

/// `total = l_cls + γ·l_con + α·l_seg + β·l_spa`. A zero weight leaves its
/// term out of the graph entirely, so it contributes no gradient at all.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, parts: LossParts, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let mut total = parts.l_cls;
    for (name, term, w) in [
        ("l_con", parts.l_con, cfg.contrastive_weight),
        ("l_seg", parts.l_seg, cfg.alpha),
        ("l_spa", Some(parts.l_spa), cfg.beta),
    ] {
        if w != 0.0 {
            let term = term.ok_or_else(|| TensorError::Invalid(format!("{name} has weight {w} but was not computed")))?;
            let t = tape.scale(term, T::from_f64_lossy(w))?;
            total = tape.add(total, t)?;
        }
    }
    let val = |v: Option<Var>| v.map_or(f64::NAN, |v| tape.value(v).item().as_f64());
    let breakdown = LossBreakdown {
        l_cls: val(Some(parts.l_cls)),
        l_con: val(parts.l_con),
        l_seg: val(parts.l_seg),
        l_spa: val(Some(parts.l_spa)),
        total: val(Some(total)),
        alpha: cfg.alpha,
        beta: cfg.beta,
        contrastive_weight: cfg.contrastive_weight,
    };
    Ok((total, breakdown))
}
