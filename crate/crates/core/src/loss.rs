//! Loss family. Classification kinds (`CrossEntropy*`, `Entropy`, `Kl`, `Js`)
//! read the outputs as logits and apply a softmax; the regression kinds
//! compare raw outputs with target vectors. Per-sample losses are summed over
//! output dimensions and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, dot, Matrix};
use crate::{Error, Result};

/// Transition point of the smooth-L1 (Huber) loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Tolerance for "this row is a probability distribution".
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropyHard,
    CrossEntropySoft,
    Entropy,
    Kl,
    Js,
    L1,
    L2,
    SmoothL1,
    Cosine,
}

impl LossKind {
    pub const ALL: [LossKind; 9] = [
        LossKind::CrossEntropyHard,
        LossKind::CrossEntropySoft,
        LossKind::Entropy,
        LossKind::Kl,
        LossKind::Js,
        LossKind::L1,
        LossKind::L2,
        LossKind::SmoothL1,
        LossKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropyHard => "cross_entropy_hard",
            LossKind::CrossEntropySoft => "cross_entropy_soft",
            LossKind::Entropy => "entropy",
            LossKind::Kl => "kl",
            LossKind::Js => "js",
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::SmoothL1 => "smooth_l1",
            LossKind::Cosine => "cosine",
        }
    }

    /// Whether the outputs are logits pushed through a softmax.
    pub fn uses_softmax(self) -> bool {
        matches!(
            self,
            LossKind::CrossEntropyHard
                | LossKind::CrossEntropySoft
                | LossKind::Entropy
                | LossKind::Kl
                | LossKind::Js
        )
    }

    /// Convex in the model output. Cosine, Jensen-Shannon and entropy are not.
    pub fn is_convex_in_output(self) -> bool {
        !matches!(self, LossKind::Cosine | LossKind::Js | LossKind::Entropy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    None,
    Labels(Vec<usize>),
    Distributions(Matrix),
    Vectors(Matrix),
}

impl Target {
    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            Target::None => None,
            Target::Labels(l) => Some(l.len()),
            Target::Distributions(m) | Target::Vectors(m) => Some(m.rows()),
        }
    }

    /// Subset of samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Target {
        match self {
            Target::None => Target::None,
            Target::Labels(l) => Target::Labels(indices.iter().map(|&i| l[i]).collect()),
            Target::Distributions(m) => Target::Distributions(m.select_rows(indices)),
            Target::Vectors(m) => Target::Vectors(m.select_rows(indices)),
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Argmax label and top-1 softmax probability for every row of `logits`.
pub fn top1(logits: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let probs = softmax(logits);
    probs
        .iter_rows()
        .map(|row| {
            let i = argmax(row);
            (i, row[i])
        })
        .unzip()
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

pub fn loss_eval(outputs: &Matrix, target: &Target, kind: LossKind) -> Result<f64> {
    Ok(per_sample(outputs, target, kind)?.iter().sum::<f64>() / outputs.rows() as f64)
}

/// Per-sample losses, before the batch mean.
pub fn per_sample(outputs: &Matrix, target: &Target, kind: LossKind) -> Result<Vec<f64>> {
    check(outputs, target, kind)?;
    let rows = 0..outputs.rows();
    let values = match (kind, target) {
        (LossKind::Entropy, Target::None) => softmax(outputs)
            .iter_rows()
            .map(|q| -q.iter().map(|&p| xlogy(p, p)).sum::<f64>())
            .collect(),
        (LossKind::CrossEntropyHard, Target::Labels(labels)) => rows
            .map(|r| -log_softmax(outputs.row(r))[labels[r]])
            .collect(),
        (LossKind::CrossEntropySoft, Target::Distributions(p)) => rows
            .map(|r| {
                let lq = log_softmax(outputs.row(r));
                -p.row(r)
                    .iter()
                    .zip(&lq)
                    .map(|(&pi, &l)| if pi == 0.0 { 0.0 } else { pi * l })
                    .sum::<f64>()
            })
            .collect(),
        (LossKind::Kl, Target::Distributions(p)) => rows
            .map(|r| {
                let lq = log_softmax(outputs.row(r));
                p.row(r)
                    .iter()
                    .zip(&lq)
                    .map(|(&pi, &l)| if pi == 0.0 { 0.0 } else { pi * (pi.ln() - l) })
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect(),
        (LossKind::Js, Target::Distributions(p)) => {
            let q = softmax(outputs);
            rows.map(|r| js_divergence(p.row(r), q.row(r))).collect()
        }
        (LossKind::L1, Target::Vectors(t)) => rows
            .map(|r| diffs(outputs.row(r), t.row(r)).map(f64::abs).sum())
            .collect(),
        (LossKind::L2, Target::Vectors(t)) => rows
            .map(|r| diffs(outputs.row(r), t.row(r)).map(|d| d * d).sum())
            .collect(),
        (LossKind::SmoothL1, Target::Vectors(t)) => rows
            .map(|r| diffs(outputs.row(r), t.row(r)).map(huber).sum())
            .collect(),
        (LossKind::Cosine, Target::Vectors(t)) => rows
            .map(|r| 1.0 - cosine(outputs.row(r), t.row(r)))
            .collect(),
        _ => unreachable!("arity checked"),
    };
    Ok(values)
}

/// Loss value and its gradient with respect to `outputs`.
pub fn loss_with_grad(outputs: &Matrix, target: &Target, kind: LossKind) -> Result<(f64, Matrix)> {
    let value = loss_eval(outputs, target, kind)?;
    let n = outputs.rows() as f64;
    let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
    let q = if kind.uses_softmax() {
        softmax(outputs)
    } else {
        Matrix::zeros(0, 0)
    };
    for r in 0..outputs.rows() {
        let g = grad.row_mut(r);
        match (kind, target) {
            (LossKind::CrossEntropyHard, Target::Labels(labels)) => {
                g.copy_from_slice(q.row(r));
                g[labels[r]] -= 1.0;
            }
            (LossKind::CrossEntropySoft | LossKind::Kl, Target::Distributions(p)) => {
                // −Σ p log q has gradient q Σp − p; rows of p are normalized.
                for ((gi, &qi), &pi) in g.iter_mut().zip(q.row(r)).zip(p.row(r)) {
                    *gi = qi - pi;
                }
            }
            (LossKind::Entropy, Target::None) => {
                let qr = q.row(r);
                let h: f64 = -qr.iter().map(|&p| xlogy(p, p)).sum::<f64>();
                for (gi, &qi) in g.iter_mut().zip(qr) {
                    *gi = if qi == 0.0 { 0.0 } else { -qi * (qi.ln() + h) };
                }
            }
            (LossKind::Js, Target::Distributions(p)) => {
                // ∂JS/∂q_i = ½ ln(q_i / m_i), then through the softmax Jacobian.
                let qr = q.row(r);
                let dq: Vec<f64> = qr
                    .iter()
                    .zip(p.row(r))
                    .map(|(&qi, &pi)| {
                        if qi == 0.0 {
                            0.0
                        } else {
                            0.5 * (qi / (0.5 * (pi + qi))).ln()
                        }
                    })
                    .collect();
                let mean = dot(qr, &dq);
                for ((gi, &qi), &di) in g.iter_mut().zip(qr).zip(&dq) {
                    *gi = qi * (di - mean);
                }
            }
            (LossKind::L1, Target::Vectors(t)) => {
                for ((gi, &o), &ti) in g.iter_mut().zip(outputs.row(r)).zip(t.row(r)) {
                    *gi = sign(o - ti);
                }
            }
            (LossKind::L2, Target::Vectors(t)) => {
                for ((gi, &o), &ti) in g.iter_mut().zip(outputs.row(r)).zip(t.row(r)) {
                    *gi = 2.0 * (o - ti);
                }
            }
            (LossKind::SmoothL1, Target::Vectors(t)) => {
                for ((gi, &o), &ti) in g.iter_mut().zip(outputs.row(r)).zip(t.row(r)) {
                    let d = o - ti;
                    *gi = if d.abs() < SMOOTH_L1_BETA {
                        d / SMOOTH_L1_BETA
                    } else {
                        sign(d)
                    };
                }
            }
            (LossKind::Cosine, Target::Vectors(t)) => {
                let o = outputs.row(r);
                let t = t.row(r);
                let no = dot(o, o).sqrt();
                let nt = dot(t, t).sqrt();
                if no > 0.0 && nt > 0.0 {
                    let c = dot(o, t) / (no * nt);
                    for ((gi, &oi), &ti) in g.iter_mut().zip(o).zip(t) {
                        *gi = -(ti / (no * nt) - c * oi / (no * no));
                    }
                }
            }
            _ => unreachable!("arity checked"),
        }
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((value, grad))
}

fn check(outputs: &Matrix, target: &Target, kind: LossKind) -> Result<()> {
    if outputs.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if !outputs.is_finite() {
        return Err(Error::invalid("non-finite model outputs"));
    }
    let arity_ok = matches!(
        (kind, target),
        (LossKind::Entropy, Target::None)
            | (LossKind::CrossEntropyHard, Target::Labels(_))
            | (
                LossKind::CrossEntropySoft | LossKind::Kl | LossKind::Js,
                Target::Distributions(_)
            )
            | (
                LossKind::L1 | LossKind::L2 | LossKind::SmoothL1 | LossKind::Cosine,
                Target::Vectors(_)
            )
    );
    if !arity_ok {
        return Err(Error::invalid(format!(
            "{} does not accept this target kind",
            kind.name()
        )));
    }
    if let Some(n) = target.len() {
        if n != outputs.rows() {
            return Err(Error::shape(format!(
                "{} outputs but {n} targets",
                outputs.rows()
            )));
        }
    }
    match target {
        Target::Labels(labels) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= outputs.cols()) {
                return Err(Error::shape(format!(
                    "label {bad} out of range for {} classes",
                    outputs.cols()
                )));
            }
        }
        Target::Distributions(p) => {
            if p.cols() != outputs.cols() {
                return Err(Error::shape(format!(
                    "{} classes in outputs but {} in targets",
                    outputs.cols(),
                    p.cols()
                )));
            }
            for row in p.iter_rows() {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&v| !(0.0..=1.0).contains(&v))
                    || (s - 1.0).abs() > NORMALIZATION_TOL
                {
                    return Err(Error::invalid(
                        "target rows must be probability distributions",
                    ));
                }
            }
        }
        Target::Vectors(t) => {
            if t.cols() != outputs.cols() {
                return Err(Error::shape(format!(
                    "{} output dims but {} target dims",
                    outputs.cols(),
                    t.cols()
                )));
            }
            if !t.is_finite() {
                return Err(Error::invalid("non-finite targets"));
            }
        }
        Target::None => {}
    }
    Ok(())
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_pm += pi * (pi / m).ln();
        }
        if qi > 0.0 {
            kl_qm += qi * (qi / m).ln();
        }
    }
    (0.5 * kl_pm + 0.5 * kl_qm).max(0.0)
}

fn diffs<'a>(a: &'a [f64], b: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    a.iter().zip(b).map(|(x, y)| x - y)
}

fn huber(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        d.abs() - 0.5 * SMOOTH_L1_BETA
    }
}

/// Subgradient convention: sign(0) = 0.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}
