//! Supervised losses on pseudo labels and the confidence-masked
//! cross-entropy used for student/teacher training.
//!
//! The probability-domain functions (`cross_entropy`, `focal_loss`, ...)
//! evaluate each loss directly from its definition. Training goes through
//! [`loss_sum_and_grad`], which works on logits and returns the analytic
//! gradient alongside the value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::ProbMap;
use crate::volume::LabelMap;

/// Lower bound applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    OneHotPseudo,
    OneHotTeacher,
    Smoothed,
    Bootstrapped,
}

/// Per-pixel target probabilities, `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub values: Vec<f64>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub source: TargetSource,
}

impl TargetDistribution {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.pixels() + i]
    }

    /// Class with the largest target mass at each pixel (lowest index on ties).
    pub fn argmax(&self) -> Vec<u8> {
        let m = self.pixels();
        (0..m)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.values[k * m + i] > self.values[best * m + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

fn check_shapes(p: &ProbMap, q: &TargetDistribution) -> Result<()> {
    if (p.classes, p.height, p.width) != (q.classes, q.height, q.width) {
        return Err(Error::Shape(format!(
            "probabilities are {}x{}x{}, targets are {}x{}x{}",
            p.classes, p.height, p.width, q.classes, q.height, q.width
        )));
    }
    Ok(())
}

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

pub fn one_hot(labels: &LabelMap, k: usize) -> Result<TargetDistribution> {
    one_hot_from(labels, k, TargetSource::OneHotPseudo)
}

pub fn one_hot_from(labels: &LabelMap, k: usize, source: TargetSource) -> Result<TargetDistribution> {
    let m = labels.height * labels.width;
    let mut values = vec![0.0; k * m];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l as usize >= k {
            return Err(Error::InvalidArgument(format!(
                "label {l} at (row {}, col {}) is out of range for {k} classes",
                i / labels.width,
                i % labels.width
            )));
        }
        values[l as usize * m + i] = 1.0;
    }
    Ok(TargetDistribution {
        values,
        classes: k,
        height: labels.height,
        width: labels.width,
        source,
    })
}

/// Mean over pixels of `-sum_k q log p`.
pub fn cross_entropy(p: &ProbMap, q: &TargetDistribution) -> Result<f64> {
    check_shapes(p, q)?;
    let m = p.pixels();
    let total: f64 = (0..m)
        .map(|i| {
            -(0..p.classes)
                .map(|k| q.get(k, i) * clamped_ln(p.get(k, i)))
                .sum::<f64>()
        })
        .sum();
    Ok(total / m as f64)
}

/// `(1 - eps) q + eps / K`.
pub fn label_smoothing(q: &TargetDistribution, eps: f64) -> Result<TargetDistribution> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "smoothing must lie in [0, 1), got {eps}"
        )));
    }
    let k = q.classes as f64;
    Ok(TargetDistribution {
        values: q.values.iter().map(|v| (1.0 - eps) * v + eps / k).collect(),
        source: TargetSource::Smoothed,
        ..q.clone()
    })
}

/// Soft bootstrapping: `beta q + (1 - beta) p`.
pub fn bootstrap_targets(q: &TargetDistribution, p: &ProbMap, beta: f64) -> Result<TargetDistribution> {
    check_shapes(p, q)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "bootstrap beta must lie in [0, 1], got {beta}"
        )));
    }
    Ok(TargetDistribution {
        values: q
            .values
            .iter()
            .zip(&p.values)
            .map(|(a, b)| beta * a + (1.0 - beta) * b)
            .collect(),
        source: TargetSource::Bootstrapped,
        ..q.clone()
    })
}

/// Probability assigned to the target class at each pixel.
fn true_class_probs(p: &ProbMap, q: &TargetDistribution) -> Result<Vec<f64>> {
    check_shapes(p, q)?;
    Ok(q.argmax()
        .iter()
        .enumerate()
        .map(|(i, &t)| p.get(t as usize, i))
        .collect())
}

pub fn focal_loss(p: &ProbMap, q: &TargetDistribution, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let pt = true_class_probs(p, q)?;
    Ok(pt.iter().map(|&u| -(1.0 - u).powf(gamma) * clamped_ln(u)).sum::<f64>() / pt.len() as f64)
}

pub fn generalized_ce(p: &ProbMap, q: &TargetDistribution, r: f64) -> Result<f64> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "GCE exponent must lie in (0, 1], got {r}"
        )));
    }
    let pt = true_class_probs(p, q)?;
    Ok(pt.iter().map(|&u| (1.0 - u.powf(r)) / r).sum::<f64>() / pt.len() as f64)
}

/// `alpha CE(q, p) + beta RCE(p, q)`, where the reverse term uses `log_zero`
/// in place of `log 0`.
pub fn symmetric_ce(p: &ProbMap, q: &TargetDistribution, alpha: f64, beta: f64, log_zero: f64) -> Result<f64> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidArgument("SCE weights must be non-negative".into()));
    }
    let ce = cross_entropy(p, q)?;
    let m = p.pixels();
    let rce: f64 = (0..m)
        .map(|i| {
            -(0..p.classes)
                .map(|k| {
                    let qk = q.get(k, i);
                    let log_q = if qk > 0.0 { qk.ln() } else { log_zero };
                    p.get(k, i) * log_q
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / m as f64;
    Ok(alpha * ce + beta * rce)
}

/// Result of a masked reduction; no pixel passing the mask is a defined outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskedLoss {
    Value(f64),
    EmptyMask,
}

impl MaskedLoss {
    /// Loss contribution, zero for an empty mask.
    pub fn contribution(self) -> f64 {
        match self {
            MaskedLoss::Value(v) => v,
            MaskedLoss::EmptyMask => 0.0,
        }
    }
}

/// Cross-entropy over the pixels selected by `mask`, normalized by their count.
pub fn masked_cross_entropy(p: &ProbMap, q: &TargetDistribution, mask: &[bool]) -> Result<MaskedLoss> {
    check_shapes(p, q)?;
    let m = p.pixels();
    if mask.len() != m {
        return Err(Error::Shape(format!("mask has {} entries for {m} pixels", mask.len())));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok(MaskedLoss::EmptyMask);
    }
    let total: f64 = (0..m)
        .filter(|&i| mask[i])
        .map(|i| {
            -(0..p.classes)
                .map(|k| q.get(k, i) * clamped_ln(p.get(k, i)))
                .sum::<f64>()
        })
        .sum();
    Ok(MaskedLoss::Value(total / count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    LabelSmoothing,
    Bootstrapping,
    Focal,
    GeneralizedCe,
    SymmetricCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub epsilon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r: f64,
    pub sce_alpha: f64,
    pub sce_beta: f64,
    pub sce_log_zero: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            beta: 0.95,
            gamma: 2.0,
            r: 0.7,
            sce_alpha: 0.1,
            sce_beta: 1.0,
            sce_log_zero: -4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub name: LossName,
    #[serde(default)]
    pub params: LossParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::cross_entropy()
    }
}

impl LossConfig {
    pub fn cross_entropy() -> Self {
        Self {
            name: LossName::CrossEntropy,
            params: LossParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let ok = match self.name {
            LossName::CrossEntropy => true,
            LossName::LabelSmoothing => (0.0..1.0).contains(&p.epsilon),
            LossName::Bootstrapping => (0.0..=1.0).contains(&p.beta),
            LossName::Focal => p.gamma >= 0.0,
            LossName::GeneralizedCe => p.r > 0.0 && p.r <= 1.0,
            LossName::SymmetricCe => p.sce_alpha >= 0.0 && p.sce_beta >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid parameters for loss {:?}: {p:?}",
                self.name
            )))
        }
    }

    /// Loss at one pixel with logits `z` and target class `t`; writes the
    /// gradient with respect to `z` into `grad` (overwriting it).
    pub fn pixel(&self, z: &[f64], t: usize, grad: &mut [f64]) -> f64 {
        let k = z.len();
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        let mut p = [0.0f64; 256];
        let mut lc = [0.0f64; 256];
        let mut live = [false; 256];
        for j in 0..k {
            let lp = z[j] - lse;
            p[j] = lp.exp();
            live[j] = lp > LOG_FLOOR.ln();
            lc[j] = if live[j] { lp } else { LOG_FLOOR.ln() };
        }
        let u = p[t];
        let one_minus_u: f64 = (0..k).filter(|&j| j != t).map(|j| p[j]).sum();
        let live_t = if live[t] { 1.0 } else { 0.0 };
        let prm = &self.params;

        // grad of -sum_k q_k lc_k for a fixed soft target q.
        let soft_ce = |q: &dyn Fn(usize) -> f64, grad: &mut [f64]| -> f64 {
            let mut value = 0.0;
            let mut s = 0.0;
            for j in 0..k {
                value -= q(j) * lc[j];
                if live[j] {
                    s += q(j);
                }
            }
            for j in 0..k {
                let own = if live[j] { q(j) } else { 0.0 };
                grad[j] = p[j] * s - own;
            }
            value
        };
        // grad of a function of p_t with d(loss)/d(p_t) * p_t = g.
        let through_pt = |g: f64, grad: &mut [f64]| {
            for j in 0..k {
                let delta = if j == t { 1.0 } else { 0.0 };
                grad[j] = g * (delta - p[j]);
            }
        };

        match self.name {
            LossName::CrossEntropy => soft_ce(&|j| if j == t { 1.0 } else { 0.0 }, grad),
            LossName::LabelSmoothing => {
                let eps = prm.epsilon;
                soft_ce(&|j| (1.0 - eps) * if j == t { 1.0 } else { 0.0 } + eps / k as f64, grad)
            }
            LossName::Bootstrapping => {
                let beta = prm.beta;
                let ce = soft_ce(&|j| if j == t { 1.0 } else { 0.0 }, grad);
                // -sum_k p_k lc_k, differentiated through p as well.
                let ent: f64 = -(0..k).map(|j| p[j] * lc[j]).sum::<f64>();
                let mean_lc: f64 = (0..k).map(|j| p[j] * lc[j]).sum();
                let mean_live: f64 = (0..k).filter(|&j| live[j]).map(|j| p[j]).sum();
                for j in 0..k {
                    let d_ent =
                        -(p[j] * lc[j] - p[j] * mean_lc) - ((if live[j] { p[j] } else { 0.0 }) - p[j] * mean_live);
                    grad[j] = beta * grad[j] + (1.0 - beta) * d_ent;
                }
                beta * ce + (1.0 - beta) * ent
            }
            LossName::Focal => {
                let gamma = prm.gamma;
                let lt = lc[t];
                let value = -one_minus_u.powf(gamma) * lt;
                let first = if gamma == 0.0 || one_minus_u == 0.0 {
                    0.0
                } else {
                    gamma * one_minus_u.powf(gamma - 1.0) * u * lt
                };
                through_pt(first - one_minus_u.powf(gamma) * live_t, grad);
                value
            }
            LossName::GeneralizedCe => {
                let r = prm.r;
                let ur = u.powf(r);
                through_pt(-ur, grad);
                (1.0 - ur) / r
            }
            LossName::SymmetricCe => {
                let (alpha, beta, a) = (prm.sce_alpha, prm.sce_beta, prm.sce_log_zero);
                let ce = soft_ce(&|j| if j == t { 1.0 } else { 0.0 }, grad);
                for j in 0..k {
                    let delta = if j == t { 1.0 } else { 0.0 };
                    grad[j] = alpha * grad[j] + beta * a * u * (delta - p[j]);
                }
                alpha * ce - beta * a * one_minus_u
            }
        }
    }
}

/// Unnormalized loss sum over selected pixels of one `(K, M)` logit block,
/// with its (equally unnormalized) gradient and the number of pixels counted.
pub fn loss_sum_and_grad(
    cfg: &LossConfig,
    logits: &[f32],
    classes: usize,
    targets: &[u8],
    mask: Option<&[bool]>,
) -> (f64, Vec<f64>, usize) {
    let m = targets.len();
    assert_eq!(logits.len(), classes * m);
    assert!(classes <= 256);
    let mut grad = vec![0.0; classes * m];
    let mut z = vec![0.0; classes];
    let mut g = vec![0.0; classes];
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..m {
        if let Some(mask) = mask {
            if !mask[i] {
                continue;
            }
        }
        for k in 0..classes {
            z[k] = logits[k * m + i] as f64;
        }
        total += cfg.pixel(&z, targets[i] as usize, &mut g);
        for k in 0..classes {
            grad[k * m + i] = g[k];
        }
        count += 1;
    }
    (total, grad, count)
}
