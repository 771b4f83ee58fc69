//! Self-distillation cross-entropy, EMA teacher update and centering.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

fn softmax(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn log_softmax(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.into_iter().map(|x| x - lse).collect()
}

/// Centered, sharpened teacher distribution `softmax((t − c)/τ_t)`.
pub fn teacher_probs(teacher_logits: &[f64], center: &[f64], teacher_temp: f64) -> Vec<f64> {
    softmax(
        teacher_logits
            .iter()
            .zip(center)
            .map(|(t, c)| (t - c) / teacher_temp),
    )
}

/// Row-wise [`teacher_probs`] over a logit matrix.
pub fn teacher_probs_rows(logits: &Array2<f64>, center: &[f64], teacher_temp: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.dim());
    for (mut o, r) in out.rows_mut().into_iter().zip(logits.rows()) {
        let p = teacher_probs(r.as_slice().expect("contiguous"), center, teacher_temp);
        o.assign(&ndarray::ArrayView1::from(&p));
    }
    out
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `H(p_t, p_s) = −Σ_k p_t,k · log p_s,k` with `p_s = softmax(s/τ_s)` and the
/// centered teacher distribution.
pub fn distill_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    student_temp: f64,
    teacher_temp: f64,
    center: &[f64],
) -> Result<f64> {
    if student_logits.len() != teacher_logits.len() || center.len() != teacher_logits.len() {
        return Err(Error::shape(format!(
            "logit dims differ: student {}, teacher {}, center {}",
            student_logits.len(),
            teacher_logits.len(),
            center.len()
        )));
    }
    if !(student_temp > 0.0 && teacher_temp > 0.0) {
        return Err(Error::invalid("temperatures must be positive"));
    }
    if student_logits
        .iter()
        .chain(teacher_logits)
        .chain(center)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("distillation logits".into()));
    }
    let pt = teacher_probs(teacher_logits, center, teacher_temp);
    let ls = log_softmax(student_logits.iter().map(|s| s / student_temp));
    Ok(-pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>())
}

/// Sum over rows of the cross-entropy between constant target distributions
/// and `softmax(student/τ_s)`, as a `1×1` node.
pub fn distill_on_tape(tape: &mut Tape, student_logits: Var, targets: Array2<f64>, student_temp: f64) -> Var {
    let s = tape.scale(student_logits, 1.0 / student_temp);
    let ls = tape.log_softmax(s);
    let weighted = tape.mul_const(ls, targets);
    let total = tape.sum(weighted);
    tape.scale(total, -1.0)
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for every parameter.
pub fn ema_update(
    teacher: &BTreeMap<String, Array2<f64>>,
    student: &BTreeMap<String, Array2<f64>>,
    m: f64,
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, m)?;
    Ok(out)
}

pub fn ema_update_in_place(
    teacher: &mut BTreeMap<String, Array2<f64>>,
    student: &BTreeMap<String, Array2<f64>>,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("EMA momentum {m} outside [0, 1]")));
    }
    if teacher.len() != student.len() {
        return Err(Error::shape("teacher and student have different parameter sets"));
    }
    for (name, s) in student {
        let t = teacher
            .get(name)
            .ok_or_else(|| Error::shape(format!("teacher lacks {name}")))?;
        if t.dim() != s.dim() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", t.dim(), s.dim())));
        }
    }
    for (name, s) in student {
        let t = teacher.get_mut(name).expect("checked");
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            t.assign(s);
            continue;
        }
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = m * *t + (1.0 - m) * s);
    }
    Ok(())
}

/// `c ← m_c·c + (1 − m_c)·mean(rows)`.
pub fn update_center(center: &[f64], teacher_batch_logits: &Array2<f64>, m_c: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&m_c) {
        return Err(Error::invalid(format!("center momentum {m_c} outside [0, 1]")));
    }
    if teacher_batch_logits.nrows() == 0 {
        return Err(Error::invalid("empty teacher batch"));
    }
    if teacher_batch_logits.ncols() != center.len() {
        return Err(Error::shape("center and logits dims differ"));
    }
    let mean = teacher_batch_logits.mean_axis(Axis(0)).expect("non-empty");
    Ok(center
        .iter()
        .zip(mean.iter())
        .map(|(c, b)| m_c * c + (1.0 - m_c) * b)
        .collect())
}
