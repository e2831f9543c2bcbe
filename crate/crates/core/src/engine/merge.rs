use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::scalar::Scalar;
use crate::tensor::kernels::softmax_row;
use crate::tensor::Tensor;

/// Combines the outputs of independently trained task modules.
///
/// Each input is `[B, C_i, H, W]` with channel 0 as background. The merged
/// pixel distribution is a softmax over one background channel (the mean of
/// the tasks' background logits) followed by every task's foreground
/// channels in task order; the result is the per-pixel arg-max in that
/// merged class space, so task `i`'s channel `c` maps to
/// `1 + Σ_{j<i} (C_j − 1) + (c − 1)`.
pub fn merge_task_predictions<S: Scalar>(per_task_logits: &[Tensor<S>]) -> Result<Vec<u8>> {
    let first = per_task_logits
        .first()
        .ok_or_else(|| Error::Contract("merge_task_predictions needs at least one task".into()))?;
    let s0 = first.shape();
    if s0.len() != 4 {
        return Err(Error::dim("merge_task_predictions", s0, &[0, 0, 0, 0]));
    }
    let (batch, hw) = (s0[0], s0[2] * s0[3]);
    for t in per_task_logits {
        let s = t.shape();
        if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[1] == 0 {
            return Err(Error::dim("merge_task_predictions", s, s0));
        }
    }
    let width = 1 + per_task_logits.iter().map(|t| t.shape()[1] - 1).sum::<usize>();
    if width > 256 {
        return Err(Error::Contract(format!("{width} merged classes do not fit 8-bit labels")));
    }
    let inv_tasks = S::of(1.0 / per_task_logits.len() as f64);
    let mut row = vec![S::zero(); width];
    let mut probs = vec![S::zero(); width];
    let mut out = Vec::with_capacity(batch * hw);
    for b in 0..batch {
        for p in 0..hw {
            row[0] = S::zero();
            let mut k = 1;
            for t in per_task_logits {
                let c = t.shape()[1];
                let d = t.data();
                row[0] += d[(b * c) * hw + p] * inv_tasks;
                for ch in 1..c {
                    row[k] = d[(b * c + ch) * hw + p];
                    k += 1;
                }
            }
            softmax_row(&row, &mut probs);
            out.push(argmax(&probs) as u8);
        }
    }
    Ok(out)
}

/// Fraction of pixels with `mask` set where `pred` differs from `truth`.
/// Returns `None` when the mask selects nothing.
pub fn disagreement_rate(pred: &[u8], truth: &[u8], mask: &[bool]) -> Option<f64> {
    let (mut n, mut wrong) = (0usize, 0usize);
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            n += 1;
            wrong += usize::from(p != t);
        }
    }
    (n > 0).then(|| wrong as f64 / n as f64)
}
