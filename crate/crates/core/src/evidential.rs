//! Dirichlet-opinion math: evidence to opinion, the evidential loss terms
//! and their analytic gradients with respect to evidence.
//!
//! For evidence `e` over `K` classes the Dirichlet parameters are
//! `α = e + 1`, the strength is `S = Σα`, belief masses are `b = e / S` and
//! the uncertainty is `u = K / S`, so that `u + Σb = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};

/// Non-negative per-class evidence for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector(Vec<f64>);

impl EvidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!("evidence needs K >= 2 classes, got {}", values.len())));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("evidence must be finite and >= 0, got {bad}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![0.0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.0.iter().map(|e| e + 1.0).collect()
    }
}

/// Subjective opinion equivalent to `Dirichlet(alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub expected_prob: Vec<f64>,
}

impl DirichletOpinion {
    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// Index of the largest `alpha`; the lowest index wins exact ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &a) in self.alpha.iter().enumerate().skip(1) {
            if a > self.alpha[best] {
                best = k;
            }
        }
        best
    }
}

/// A one-hot ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotLabel {
    class_index: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class_index: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Domain(format!("labels need K >= 2 classes, got {num_classes}")));
        }
        if class_index >= num_classes {
            return Err(Error::Domain(format!("class {class_index} outside [0, {num_classes})")));
        }
        Ok(Self { class_index, num_classes })
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn component(&self, k: usize) -> f64 {
        if k == self.class_index {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.num_classes).map(|k| self.component(k)).collect()
    }
}

/// Loss terms of a sample or batch; `total = mse_term + lambda * kl_term`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_term: f64,
    pub kl_term: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse_term: f64, kl_term: f64, lambda: f64) -> Self {
        Self { mse_term, kl_term, lambda, total: mse_term + lambda * kl_term }
    }

    pub fn is_finite(&self) -> bool {
        self.mse_term.is_finite() && self.kl_term.is_finite() && self.total.is_finite()
    }
}

pub fn opinion_from_evidence(e: &EvidenceVector) -> DirichletOpinion {
    opinion_from_alpha(e.alpha())
}

pub(crate) fn opinion_from_alpha(alpha: Vec<f64>) -> DirichletOpinion {
    let k = alpha.len() as f64;
    let strength: f64 = alpha.iter().sum();
    let belief = alpha.iter().map(|a| (a - 1.0) / strength).collect();
    let expected_prob = alpha.iter().map(|a| a / strength).collect();
    DirichletOpinion { strength, belief, uncertainty: k / strength, expected_prob, alpha }
}

fn ln_multinomial_beta(alpha: &[f64]) -> f64 {
    let s: f64 = alpha.iter().sum();
    alpha.iter().map(|&a| ln_gamma_unchecked(a)).sum::<f64>() - ln_gamma_unchecked(s)
}

/// Log density of `Dirichlet(alpha)` at an interior simplex point `p`.
pub fn dirichlet_log_density(p: &[f64], alpha: &[f64]) -> Result<f64> {
    if p.len() != alpha.len() {
        return Err(Error::Dimension { expected: alpha.len(), got: p.len() });
    }
    if p.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("density needs p strictly inside the simplex".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("p sums to {total}, not 1")));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Domain("Dirichlet parameters must be > 0".into()));
    }
    let kernel: f64 = p.iter().zip(alpha).map(|(pk, ak)| (ak - 1.0) * pk.ln()).sum();
    Ok(kernel - ln_multinomial_beta(alpha))
}

/// Expected squared error `E‖y − p‖²` under `p ~ Dir(alpha)`, written as
/// squared bias plus variance.
pub fn evidential_mse_loss(alpha: &[f64], y: &OneHotLabel) -> f64 {
    let s: f64 = alpha.iter().sum();
    alpha
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let p = a / s;
            let err = y.component(j) - p;
            err * err + p * (1.0 - p) / (s + 1.0)
        })
        .sum()
}

/// Replaces the true class's parameter with 1, keeping only misleading
/// evidence.
pub fn remove_non_misleading(alpha: &[f64], y: &OneHotLabel) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let yk = y.component(k);
            yk + (1.0 - yk) * a
        })
        .collect()
}

/// `KL(Dir(alpha_tilde) ‖ Dir(1, …, 1))`.
pub fn kl_to_uniform(alpha_tilde: &[f64]) -> f64 {
    let k = alpha_tilde.len() as f64;
    let s: f64 = alpha_tilde.iter().sum();
    let psi_s = digamma_unchecked(s);
    let mut kl = ln_gamma_unchecked(s) - ln_gamma_unchecked(k);
    for &a in alpha_tilde {
        kl -= ln_gamma_unchecked(a);
        // Exact zero for a == 1 keeps the all-ones case at exactly 0.
        if a != 1.0 {
            kl += (a - 1.0) * (digamma_unchecked(a) - psi_s);
        }
    }
    kl.max(0.0)
}

/// KL weight `min(1, t / 10)` for the 1-based epoch `t`.
pub fn annealing_coefficient(t: u32) -> Result<f64> {
    if t < 1 {
        return Err(Error::Domain("epoch index is 1-based".into()));
    }
    Ok((f64::from(t) / 10.0).min(1.0))
}

fn check_batch(batch: &[(EvidenceVector, OneHotLabel)]) -> Result<usize> {
    let (first, _) = batch.first().ok_or(Error::Empty("loss batch"))?;
    let k = first.num_classes();
    for (e, y) in batch {
        if e.num_classes() != k {
            return Err(Error::Dimension { expected: k, got: e.num_classes() });
        }
        if y.num_classes() != k {
            return Err(Error::Dimension { expected: k, got: y.num_classes() });
        }
    }
    Ok(k)
}

/// Loss terms for one sample given its Dirichlet parameters.
pub fn sample_loss(alpha: &[f64], y: &OneHotLabel, lambda: f64) -> LossBreakdown {
    let mse = evidential_mse_loss(alpha, y);
    let kl = kl_to_uniform(&remove_non_misleading(alpha, y));
    LossBreakdown::new(mse, kl, lambda)
}

/// Batch loss, summed over samples in index order.
pub fn total_loss(batch: &[(EvidenceVector, OneHotLabel)], t: u32) -> Result<LossBreakdown> {
    check_batch(batch)?;
    let lambda = annealing_coefficient(t)?;
    let (mut mse, mut kl) = (0.0, 0.0);
    for (e, y) in batch {
        let s = sample_loss(&e.alpha(), y, lambda);
        mse += s.mse_term;
        kl += s.kl_term;
    }
    Ok(LossBreakdown::new(mse, kl, lambda))
}

/// Gradient of [`sample_loss`] with respect to `alpha` (equivalently, the
/// evidence), written into `grad`.
pub fn sample_loss_gradient(alpha: &[f64], y: &OneHotLabel, lambda: f64, grad: &mut [f64]) {
    let k = alpha.len();
    debug_assert_eq!(grad.len(), k);
    let s: f64 = alpha.iter().sum();
    let s1 = s + 1.0;

    // MSE: L = Σ (y_j - p_j)² + p_j (1 - p_j) / (S + 1), p_j = α_j / S.
    // dL/dα_k = (a_k - Σ_j a_j p_j) / S - V / (S + 1)², with
    // a_j = ∂L/∂p_j = -2 (y_j - p_j) + (1 - 2 p_j) / (S + 1), V = Σ p_j (1 - p_j).
    let mut weighted = 0.0;
    let mut variance = 0.0;
    for j in 0..k {
        let p = alpha[j] / s;
        let a = -2.0 * (y.component(j) - p) + (1.0 - 2.0 * p) / s1;
        grad[j] = a;
        weighted += a * p;
        variance += p * (1.0 - p);
    }
    let shift = variance / (s1 * s1);
    for g in grad.iter_mut() {
        *g = (*g - weighted) / s - shift;
    }

    if lambda == 0.0 {
        return;
    }
    // KL: dKL/dα̃_k = (α̃_k - 1) ψ₁(α̃_k) - (S̃ - K) ψ₁(S̃); the true class has
    // α̃ = 1 regardless of α, so its entry carries no KL gradient.
    let tilde = remove_non_misleading(alpha, y);
    let s_tilde: f64 = tilde.iter().sum();
    let common = (s_tilde - k as f64) * trigamma_unchecked(s_tilde);
    for j in 0..k {
        if j == y.class_index() {
            continue;
        }
        let a = tilde[j];
        let own = if a == 1.0 { 0.0 } else { (a - 1.0) * trigamma_unchecked(a) };
        grad[j] += lambda * (own - common);
    }
}

/// Per-sample gradients of [`total_loss`] with respect to evidence.
pub fn total_loss_gradient(batch: &[(EvidenceVector, OneHotLabel)], t: u32) -> Result<Vec<Vec<f64>>> {
    let k = check_batch(batch)?;
    let lambda = annealing_coefficient(t)?;
    Ok(batch
        .iter()
        .map(|(e, y)| {
            let mut g = vec![0.0; k];
            sample_loss_gradient(&e.alpha(), y, lambda, &mut g);
            g
        })
        .collect())
}
