//! Local training objectives: cross-entropy, feature distillation against visual
//! anchors, InfoNCE against class text anchors, and the FedProx proximal term.
//!
//! Every loss comes in two flavours: a value-only function and a `*_grad`
//! variant returning the gradient w.r.t. its first tensor argument. All losses
//! are means over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{ModelOutput, Tensor};

fn default_lambda_kd() -> f64 {
    1.0
}
fn default_lambda_con() -> f64 {
    0.01
}
fn default_tau() -> f64 {
    0.05
}
fn default_kd_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda_kd")]
    pub lambda_kd: f64,
    #[serde(default = "default_lambda_con")]
    pub lambda_con: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Proximal coefficient, used only by the FedProx baseline.
    #[serde(default)]
    pub mu_prox: f64,
    /// Softmax temperature of the distillation term. Experimental; 1 reproduces
    /// the plain KL between feature softmaxes.
    #[serde(default = "default_kd_temperature")]
    pub kd_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: default_lambda_kd(),
            lambda_con: default_lambda_con(),
            tau: default_tau(),
            mu_prox: 0.0,
            kd_temperature: default_kd_temperature(),
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        Self {
            lambda_kd: 0.0,
            lambda_con: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda_kd, self.lambda_con, self.tau, self.mu_prox, self.kd_temperature]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return invalid("loss weights must be finite");
        }
        if self.lambda_kd < 0.0 || self.lambda_con < 0.0 || self.mu_prox < 0.0 {
            return invalid("loss weights must be non-negative");
        }
        if self.tau <= 0.0 {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        if self.kd_temperature <= 0.0 {
            return invalid("kd_temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.kd.is_finite() && self.con.is_finite() && self.total.is_finite()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return invalid(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if batch == 0 {
        return invalid("empty batch");
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return invalid(format!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(logits, labels).map(|(v, _)| v)
}

pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = logits.batch();
    let c = logits.sample_len();
    check_labels(labels, b, c)?;
    let mut grad = Tensor::zeros(logits.shape);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax(logits.row(i));
        total -= ls[y];
        let g = &mut grad.data[i * c..(i + 1) * c];
        for (j, l) in ls.iter().enumerate() {
            g[j] = (l.exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.batch() != b.batch() || a.sample_len() != b.sample_len() {
        return invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.batch(),
            a.sample_len(),
            b.batch(),
            b.sample_len()
        ));
    }
    if a.batch() == 0 {
        return invalid("empty batch");
    }
    if !a.is_finite() || !b.is_finite() {
        return invalid("non-finite features");
    }
    Ok(())
}

/// Mean over rows of `KL(softmax(teacher_i) || softmax(student_i))` at temperature 1.
pub fn kd_loss(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    kd_loss_grad(teacher, student, 1.0).map(|(v, _)| v)
}

/// Distillation loss at softmax temperature `temperature` and its gradient w.r.t. `student`.
pub fn kd_loss_grad(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    check_pair(teacher, student)?;
    if temperature <= 0.0 {
        return invalid("kd temperature must be positive");
    }
    let b = teacher.batch();
    let d = teacher.sample_len();
    let mut grad = Tensor::zeros(student.shape);
    let mut total = 0.0;
    for i in 0..b {
        let zt: Vec<f64> = teacher.row(i).iter().map(|v| v / temperature).collect();
        let zs: Vec<f64> = student.row(i).iter().map(|v| v / temperature).collect();
        let lp = log_softmax(&zt);
        let lq = log_softmax(&zs);
        let mut kl = 0.0;
        let g = &mut grad.data[i * d..(i + 1) * d];
        for j in 0..d {
            let p = lp[j].exp();
            if p > 0.0 {
                kl += p * (lp[j] - lq[j]);
            }
            g[j] = (lq[j].exp() - p) / (temperature * b as f64);
        }
        total += kl;
    }
    Ok((total / b as f64, grad))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean InfoNCE of each feature against its class text anchor, with all other
/// class anchors as negatives and cosine similarity scaled by `1 / tau`.
pub fn contrastive_loss(features: &Tensor, text: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    contrastive_loss_grad(features, text, labels, tau).map(|(v, _)| v)
}

pub fn contrastive_loss_grad(features: &Tensor, text: &Tensor, labels: &[usize], tau: f64) -> Result<(f64, Tensor)> {
    if !(tau > 0.0) {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let b = features.batch();
    let d = features.sample_len();
    let c = text.batch();
    if text.sample_len() != d {
        return invalid(format!("text anchors have dim {}, features have dim {d}", text.sample_len()));
    }
    check_labels(labels, b, c)?;
    let text_norms: Vec<f64> = (0..c).map(|j| norm(text.row(j))).collect();
    let mut grad = Tensor::zeros(features.shape);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let f = features.row(i);
        let fnorm = norm(f).max(1e-12);
        let cos: Vec<f64> = (0..c)
            .map(|j| {
                let dot: f64 = f.iter().zip(text.row(j)).map(|(a, b)| a * b).sum();
                dot / (fnorm * text_norms[j].max(1e-12))
            })
            .collect();
        let scaled: Vec<f64> = cos.iter().map(|s| s / tau).collect();
        let ls = log_softmax(&scaled);
        total -= ls[y];
        let g = &mut grad.data[i * d..(i + 1) * d];
        for j in 0..c {
            let coeff = (ls[j].exp() - if j == y { 1.0 } else { 0.0 }) / (tau * b as f64);
            if coeff == 0.0 {
                continue;
            }
            let t = text.row(j);
            let tn = text_norms[j].max(1e-12);
            for k in 0..d {
                g[k] += coeff * (t[k] / (fnorm * tn) - cos[j] * f[k] / (fnorm * fnorm));
            }
        }
    }
    Ok((total / b as f64, grad))
}

/// `(mu / 2) * ||local - global||^2`.
pub fn prox_term(local: &[f64], global: &[f64], mu: f64) -> Result<f64> {
    if local.len() != global.len() {
        return invalid(format!("vector lengths differ: {} vs {}", local.len(), global.len()));
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    Ok(0.5 * mu * local.iter().zip(global).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

/// Adds the proximal gradient `mu * (local - global)` into `grad`.
pub fn prox_grad_into(local: &[f64], global: &[f64], mu: f64, grad: &mut [f64]) -> Result<()> {
    if local.len() != global.len() || grad.len() != local.len() {
        return invalid("vector lengths differ");
    }
    if mu != 0.0 {
        for ((g, a), b) in grad.iter_mut().zip(local).zip(global) {
            *g += mu * (a - b);
        }
    }
    Ok(())
}

/// Semantic anchors matched to the rows of a batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct Anchors<'a> {
    /// Visual anchors, one row per batch sample.
    pub visual: Option<&'a Tensor>,
    /// Text anchors, one row per class.
    pub text: Option<&'a Tensor>,
}

/// Loss gradients w.r.t. the two model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: Tensor,
    pub features: Tensor,
}

/// `ce + lambda_kd * kd + lambda_con * con`. Terms whose weight is zero are not
/// evaluated and report 0.
pub fn total_loss(out: &ModelOutput, anchors: Anchors<'_>, labels: &[usize], weights: &LossWeights) -> Result<LossBreakdown> {
    total_loss_grad(out, anchors, labels, weights).map(|(b, _)| b)
}

pub fn total_loss_grad(
    out: &ModelOutput,
    anchors: Anchors<'_>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads)> {
    weights.validate()?;
    let (ce, grad_logits) = cross_entropy_grad(&out.logits, labels)?;
    let mut grad_features = Tensor::zeros(out.features.shape);
    let mut kd = 0.0;
    let mut con = 0.0;
    if weights.lambda_kd != 0.0 {
        let visual = anchors
            .visual
            .ok_or_else(|| crate::error::Error::State("distillation needs visual anchors".into()))?;
        let (v, g) = kd_loss_grad(visual, &out.features, weights.kd_temperature)?;
        kd = v;
        for (a, b) in grad_features.data.iter_mut().zip(&g.data) {
            *a += weights.lambda_kd * b;
        }
    }
    if weights.lambda_con != 0.0 {
        let text = anchors
            .text
            .ok_or_else(|| crate::error::Error::State("contrastive loss needs text anchors".into()))?;
        let (v, g) = contrastive_loss_grad(&out.features, text, labels, weights.tau)?;
        con = v;
        for (a, b) in grad_features.data.iter_mut().zip(&g.data) {
            *a += weights.lambda_con * b;
        }
    }
    let total = ce + weights.lambda_kd * kd + weights.lambda_con * con;
    Ok((
        LossBreakdown { ce, kd, con, total },
        OutputGrads {
            logits: grad_logits,
            features: grad_features,
        },
    ))
}
