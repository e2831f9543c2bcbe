//! Background-aware segmentation losses.
//!
//! Both losses take pixel logits laid out `[B, C, H, W]`, average over the
//! pixels that are scored (an empty set yields loss 0) and attach their
//! closed-form gradient to the graph.

use crate::data::IGNORE;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Graph, Tensor, Var};

fn pixel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::dim(op, shape, &[0, 0, 0, 0]));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

/// Cross-entropy in which background absorbs the old classes.
///
/// For a pixel labelled background the probability credited is
/// `q(0) + Σ_{c∈old} q(c)`; other labels are scored as usual and `255`
/// pixels are skipped. With `old_classes` empty this is plain pixel-wise
/// cross-entropy.
pub fn task_ce_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[u8], old_classes: &[usize]) -> Result<Var> {
    let (batch, classes, hw) = pixel_layout(g.shape(logits), "task_ce_loss")?;
    if labels.len() != batch * hw {
        return Err(Error::dim("task_ce_loss", g.shape(logits), &[labels.len()]));
    }
    if let Some(&c) = old_classes.iter().find(|&&c| c == 0 || c >= classes) {
        return Err(Error::Contract(format!("old class {c} is not a foreground channel of {classes}")));
    }
    let mut in_bg_group = vec![false; classes];
    in_bg_group[0] = true;
    for &c in old_classes {
        in_bg_group[c] = true;
    }

    let x = g.value(logits);
    let mut grad = vec![S::zero(); x.len()];
    let mut total = S::zero();
    let mut count = 0usize;
    let mut row = vec![S::zero(); classes];
    for b in 0..batch {
        for p in 0..hw {
            let label = labels[b * hw + p];
            if label == IGNORE {
                continue;
            }
            if label as usize >= classes {
                return Err(Error::Data(format!("label {label} exceeds {classes} logit channels")));
            }
            for (c, r) in row.iter_mut().enumerate() {
                *r = x[(b * classes + c) * hw + p];
            }
            let lse = log_sum_exp(row.iter().copied());
            count += 1;
            if label == 0 && !old_classes.is_empty() {
                let lse_bg = log_sum_exp(row.iter().zip(&in_bg_group).filter(|(_, &m)| m).map(|(&v, _)| v));
                total -= lse_bg - lse;
                for c in 0..classes {
                    let q = (row[c] - lse).exp();
                    let target = if in_bg_group[c] { (row[c] - lse_bg).exp() } else { S::zero() };
                    grad[(b * classes + c) * hw + p] = q - target;
                }
            } else {
                let y = label as usize;
                total -= row[y] - lse;
                for c in 0..classes {
                    let q = (row[c] - lse).exp();
                    let target = if c == y { S::one() } else { S::zero() };
                    grad[(b * classes + c) * hw + p] = q - target;
                }
            }
        }
    }
    finish(g, logits, total, grad, count)
}

/// Distillation from a teacher that knows fewer classes.
///
/// The teacher distribution `p` over `{0} ∪ old` is a temperature softmax
/// of `teacher_logits`. The student's temperature softmax `q` is folded so
/// that `q̂(0) = q(0) + Σ_{c∈new} q(c)` and `q̂(c) = q(c)` for old classes;
/// the loss is the mean of `−Σ p·log q̂` over pixels where `valid` is true
/// (all pixels when `valid` is `None`). Channels are aligned by class id:
/// teacher channel `c` and student channel `c` are the same class, and the
/// new classes occupy the student's extra channels.
pub fn unbiased_kd_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: Var,
    teacher_logits: &Tensor<S>,
    new_classes: &[usize],
    temperature: f64,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let (batch, cs, hw) = pixel_layout(g.shape(student), "unbiased_kd_loss")?;
    let (tb, ct, thw) = pixel_layout(teacher_logits.shape(), "unbiased_kd_loss")?;
    if tb != batch || thw != hw || cs != ct + new_classes.len() {
        return Err(Error::dim("unbiased_kd_loss", g.shape(student), teacher_logits.shape()));
    }
    let mut is_new = vec![false; cs];
    for &c in new_classes {
        if c < ct || c >= cs || is_new[c] {
            return Err(Error::dim("unbiased_kd_loss", &[c], &[ct, cs]));
        }
        is_new[c] = true;
    }
    if let Some(v) = valid {
        if v.len() != batch * hw {
            return Err(Error::dim("unbiased_kd_loss", g.shape(student), &[v.len()]));
        }
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let inv_t = S::of(1.0 / temperature);
    let mut in_bg_group = is_new;
    in_bg_group[0] = true;

    let x = g.value(student);
    let t = teacher_logits.data();
    let mut grad = vec![S::zero(); x.len()];
    let mut total = S::zero();
    let mut count = 0usize;
    let mut z = vec![S::zero(); cs];
    let mut tz = vec![S::zero(); ct];
    for b in 0..batch {
        for px in 0..hw {
            if valid.is_some_and(|v| !v[b * hw + px]) {
                continue;
            }
            count += 1;
            for (c, v) in tz.iter_mut().enumerate() {
                *v = t[(b * ct + c) * hw + px] * inv_t;
            }
            let t_lse = log_sum_exp(tz.iter().copied());
            for (c, v) in z.iter_mut().enumerate() {
                *v = x[(b * cs + c) * hw + px] * inv_t;
            }
            let lse = log_sum_exp(z.iter().copied());
            let lse_bg = log_sum_exp(z.iter().zip(&in_bg_group).filter(|(_, &m)| m).map(|(&v, _)| v));
            let p0 = (tz[0] - t_lse).exp();
            total -= p0 * (lse_bg - lse);
            for c in 1..ct {
                let p = (tz[c] - t_lse).exp();
                total -= p * (z[c] - lse);
            }
            for c in 0..cs {
                let q = (z[c] - lse).exp();
                let target = if in_bg_group[c] {
                    p0 * (z[c] - lse_bg).exp()
                } else {
                    (tz[c] - t_lse).exp()
                };
                grad[(b * cs + c) * hw + px] = (q - target) * inv_t;
            }
        }
    }
    finish(g, student, total, grad, count)
}

fn finish<S: Scalar>(g: &mut Graph<S>, input: Var, total: S, mut grad: Vec<S>, count: usize) -> Result<Var> {
    if count == 0 {
        return g.precomputed_scalar(input, S::zero(), grad);
    }
    let inv = S::of(1.0 / count as f64);
    grad.iter_mut().for_each(|v| *v *= inv);
    let value = total * inv;
    if !value.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    g.precomputed_scalar(input, value, grad)
}
