//! Training stages: contrastive pre-training of the encoder, evidential
//! fine-tuning, and optional distillation into a student network.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::LossBreakdown;
use crate::network::{train_epoch, Labeled, ModelState, ParamGroup, TrainHyper};
use crate::seed::{self, standard_normal, EngineRng};

/// Which data the encoder is pre-trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Same distribution as fine-tuning.
    Indomain,
    /// A different synthetic distribution over the same input space.
    Outdomain,
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indomain" => Ok(Self::Indomain),
            "outdomain" => Ok(Self::Outdomain),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

/// Vector-data augmentation: Gaussian noise scaled by each feature's
/// standard deviation, then random feature dropout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub noise_sigma: f64,
    pub feature_dropout_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.1, feature_dropout_prob: 0.1, seed: 0 }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.feature_dropout_prob) {
            return Err(Error::Config("feature_dropout_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn augment(x: &[f64], feature_std: &[f64], aug: &AugmentationConfig, rng: &mut impl Rng) -> Vec<f64> {
    x.iter()
        .zip(feature_std)
        .map(|(&v, &s)| {
            let noisy = if aug.noise_sigma > 0.0 {
                v + aug.noise_sigma * s * standard_normal(rng)
            } else {
                v
            };
            if aug.feature_dropout_prob > 0.0 && rng.random::<f64>() < aug.feature_dropout_prob {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub domain: Domain,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { temperature: 0.5, epochs: 20, batch_size: 256, domain: Domain::Outdomain }
    }
}

/// NT-Xent value, per-anchor terms and gradient for one batch of views.
#[derive(Debug, Clone)]
pub struct NtXent {
    pub per_anchor: Vec<f64>,
    pub mean: f64,
    /// Gradient of `mean` with respect to each view's projection.
    pub grad: Vec<Vec<f64>>,
}

/// Normalized-temperature cross-entropy over `2B` views, where views `i`
/// and `i + B` are the positive pair. Anchor `i` contributes
/// `-ln[exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ)]` with cosine similarities `s`.
pub fn nt_xent(views: &[Vec<f64>], temperature: f64) -> Result<NtXent> {
    let m = views.len();
    if m < 4 || m % 2 != 0 {
        return Err(Error::Config(format!("NT-Xent needs an even number >= 4 of views, got {m}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    let b = m / 2;
    let norms: Vec<f64> = views.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect();
    let unit: Vec<Vec<f64>> = views.iter().zip(&norms).map(|(z, n)| z.iter().map(|v| v / n).collect()).collect();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let sim: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| dot(&unit[i], &unit[j])).collect()).collect();

    // coef[i][j] = d(loss_i)/d(s_ij)
    let mut coef = vec![vec![0.0; m]; m];
    let mut per_anchor = Vec::with_capacity(m);
    for i in 0..m {
        let pos = (i + b) % m;
        let logits: Vec<f64> = (0..m).map(|k| sim[i][k] / temperature).collect();
        let max = (0..m).filter(|&k| k != i).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (logits[k] - max).exp()).sum();
        per_anchor.push(max + denom.ln() - logits[pos]);
        for k in (0..m).filter(|&k| k != i) {
            coef[i][k] = (logits[k] - max).exp() / denom / temperature;
        }
        coef[i][pos] -= 1.0 / temperature;
    }
    let mean = per_anchor.iter().sum::<f64>() / m as f64;

    let scale = 1.0 / m as f64;
    let grad = (0..m)
        .map(|i| {
            let mut d_unit = vec![0.0; unit[i].len()];
            for j in 0..m {
                let c = (coef[i][j] + coef[j][i]) * scale;
                if c != 0.0 {
                    d_unit.iter_mut().zip(&unit[j]).for_each(|(d, u)| *d += c * u);
                }
            }
            // through z / |z|
            let radial = dot(&d_unit, &unit[i]);
            d_unit.iter().zip(&unit[i]).map(|(d, u)| (d - radial * u) / norms[i]).collect()
        })
        .collect();
    Ok(NtXent { per_anchor, mean, grad })
}

/// Views are processed in fixed-size chunks whose partial gradients are
/// summed in chunk order, so results do not depend on thread count.
const GRAD_CHUNK: usize = 32;

fn contrastive_step(model: &ModelState, views: &[Vec<f64>], temperature: f64) -> Result<(f64, Vec<f64>)> {
    let traces = views.par_iter().map(|v| model.trace(v)).collect::<Result<Vec<_>>>()?;
    let projections: Vec<_> = traces.par_iter().map(|t| model.project(t.embedding())).collect();
    let outputs: Vec<Vec<f64>> = projections.iter().map(|p| p.output.clone()).collect();
    let loss = nt_xent(&outputs, temperature)?;
    let n = model.num_params();
    let partials: Vec<Vec<f64>> = (0..views.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut g = vec![0.0; n];
            for &i in idx {
                let d_emb = model.backward_projection(traces[i].embedding(), &projections[i], &loss.grad[i], &mut g);
                model.backward_encoder(&traces[i], d_emb, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; n];
    for p in partials {
        grad.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    Ok((loss.mean, grad))
}

/// Contrastive pre-training of the encoder and projection head; the
/// evidence head is left untouched. Returns the mean loss of each epoch.
pub fn pretrain_contrastive(
    model: &mut ModelState,
    xs: &[&[f64]],
    cfg: &PretrainConfig,
    aug: &AugmentationConfig,
    hyper: &TrainHyper,
) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::Config("contrastive pre-training needs at least 2 samples".into()));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("contrastive batch size must be >= 2".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    aug.validate()?;
    let dim = model.config().input_dim;
    if let Some(bad) = xs.iter().find(|x| x.len() != dim) {
        return Err(Error::Dimension { expected: dim, got: bad.len() });
    }
    let feature_std = column_std(xs);

    let mut history = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(aug.seed, "pretrain", u64::from(epoch));
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut views: Vec<Vec<f64>> = chunk.iter().map(|&i| augment(xs[i], &feature_std, aug, &mut rng)).collect();
            views.extend(chunk.iter().map(|&i| augment(xs[i], &feature_std, aug, &mut rng)).collect::<Vec<_>>());
            let (loss, grad) = contrastive_step(model, &views, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("contrastive loss at epoch {}", epoch + 1)));
            }
            if hyper.learning_rate != 0.0 {
                model.adam_step(&grad, 1.0, &[ParamGroup::Encoder, ParamGroup::Projection], hyper)?;
            }
            total += loss;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}

fn column_std(xs: &[&[f64]]) -> Vec<f64> {
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        mean.iter_mut().zip(*x).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; dim];
    for x in xs {
        var.iter_mut().zip(*x).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    var.into_iter().map(f64::sqrt).collect()
}

/// Runs `epochs` evidential epochs with annealing indices
/// `anneal_start_t, anneal_start_t + 1, ...`; returns each epoch's loss.
pub fn finetune_evidential(
    model: &mut ModelState,
    labeled: &[Labeled<'_>],
    epochs: u32,
    anneal_start_t: u32,
    hyper: &TrainHyper,
    rng: &mut EngineRng,
) -> Result<Vec<LossBreakdown>> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled subset"));
    }
    if anneal_start_t < 1 {
        return Err(Error::Config("annealing index is 1-based".into()));
    }
    (0..epochs).map(|e| train_epoch(model, labeled, anneal_start_t + e, hyper, rng)).collect()
}

/// Expected class probabilities `α / S` of the model on `x`.
pub fn expected_probabilities(model: &ModelState, x: &[f64]) -> Result<Vec<f64>> {
    let t = model.trace(x)?;
    let s: f64 = t.evidence.iter().map(|e| e + 1.0).sum();
    Ok(t.evidence.iter().map(|e| (e + 1.0) / s).collect())
}

/// Soft-label distillation: the student minimizes the mean cross-entropy
/// `-Σ q_k ln p̂_k` between the teacher's expected probabilities `q` and its
/// own `p̂`. Returns the mean loss of each epoch.
pub fn distill(
    teacher: &ModelState,
    student: &mut ModelState,
    xs: &[&[f64]],
    epochs: u32,
    hyper: &TrainHyper,
    rng: &mut EngineRng,
) -> Result<Vec<f64>> {
    let k = teacher.config().num_classes;
    if student.config().num_classes != k {
        return Err(Error::Config(format!(
            "teacher has {k} classes but student has {}",
            student.config().num_classes
        )));
    }
    if xs.is_empty() {
        return Err(Error::Empty("distillation inputs"));
    }
    let targets = xs.par_iter().map(|x| expected_probabilities(teacher, x)).collect::<Result<Vec<_>>>()?;

    let mut history = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let mut grad = vec![0.0; student.num_params()];
            for &i in chunk {
                let trace = student.trace(xs[i])?;
                let alpha: Vec<f64> = trace.evidence.iter().map(|e| e + 1.0).collect();
                let s: f64 = alpha.iter().sum();
                let q = &targets[i];
                total -= q.iter().zip(&alpha).map(|(qk, a)| qk * (a / s).ln()).sum::<f64>();
                if hyper.learning_rate != 0.0 {
                    // d/dα_j of -Σ q_k (ln α_k - ln S), with Σ q = 1
                    let d_e: Vec<f64> = q.iter().zip(&alpha).map(|(qk, a)| 1.0 / s - qk / a).collect();
                    student.backward_evidence(&trace, &d_e, &mut grad);
                }
            }
            if hyper.learning_rate != 0.0 {
                student.adam_step(&grad, 1.0 / chunk.len() as f64, &[ParamGroup::Encoder, ParamGroup::EvidenceHead], hyper)?;
            }
        }
        let mean = total / xs.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("distillation loss".into()));
        }
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_model, EvidenceActivation, NetworkConfig};
    use crate::numerics::finite_difference_gradient;

    fn cfg(seed: u64) -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            hidden_dims: vec![8],
            embedding_dim: 5,
            projection_dim: 4,
            num_classes: 2,
            evidence_activation: EvidenceActivation::Softplus,
            seed,
        }
    }

    fn views(seed_: u64, m: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(seed_, "views", 0);
        (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn nt_xent_high_temperature_limit() {
        let v = views(1, 8, 4);
        let l = nt_xent(&v, 1e9).unwrap();
        for a in l.per_anchor {
            assert!((a - (7.0f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn nt_xent_gradient_matches_finite_differences() {
        let v = views(2, 6, 3);
        let l = nt_xent(&v, 0.5).unwrap();
        let flat: Vec<f64> = v.concat();
        let fd = finite_difference_gradient(
            |p| nt_xent(&p.chunks(3).map(<[f64]>::to_vec).collect::<Vec<_>>(), 0.5).unwrap().mean,
            &flat,
            1e-6,
        )
        .unwrap();
        for (a, n) in l.grad.concat().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn nt_xent_is_permutation_equivariant() {
        let v = views(3, 10, 4);
        let base = nt_xent(&v, 0.3).unwrap();
        // permute pair order, keeping each pair intact
        let b = 5;
        let perm = [3, 0, 4, 1, 2];
        let mut pv = Vec::new();
        for &p in &perm {
            pv.push(v[p].clone());
        }
        for &p in &perm {
            pv.push(v[p + b].clone());
        }
        let permuted = nt_xent(&pv, 0.3).unwrap();
        assert!((base.mean - permuted.mean).abs() < 1e-10);
        for (i, &p) in perm.iter().enumerate() {
            assert!((permuted.per_anchor[i] - base.per_anchor[p]).abs() < 1e-10);
        }
        assert!(nt_xent(&v[..2], 0.5).is_err());
        assert!(nt_xent(&v, 0.0).is_err());
    }

    #[test]
    fn identity_augmentation_gives_unit_positive_similarity() {
        let aug = AugmentationConfig { noise_sigma: 0.0, feature_dropout_prob: 0.0, seed: 0 };
        let mut rng = seed::rng(0, "aug", 0);
        let x = [0.5, -2.0, 3.0];
        let a = augment(&x, &[1.0; 3], &aug, &mut rng);
        let b = augment(&x, &[1.0; 3], &aug, &mut rng);
        assert_eq!(a, b);
        let mut v = vec![a, vec![1.0, 0.0, 0.0]];
        v.push(b);
        v.push(vec![1.0, 0.0, 0.0]);
        let l = nt_xent(&v, 1e9).unwrap();
        assert!(l.per_anchor.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn pretraining_reduces_loss_and_leaves_head() {
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![-5.0, 4.0, 3.0]];
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut m = init_model(&cfg(4)).unwrap();
        let before = m.clone();
        let pc = PretrainConfig { temperature: 0.5, epochs: 60, batch_size: 2, domain: Domain::Indomain };
        let aug = AugmentationConfig { noise_sigma: 0.0, feature_dropout_prob: 0.0, seed: 1 };
        let hist = pretrain_contrastive(&mut m, &refs, &pc, &aug, &TrainHyper { learning_rate: 1e-2, ..TrainHyper::default() }).unwrap();
        assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
        let head = m.group_range(ParamGroup::EvidenceHead);
        assert_eq!(&m.params()[head.clone()], &before.params()[head]);
        assert_ne!(m.params(), before.params());

        assert!(pretrain_contrastive(&mut m, &refs[..1], &pc, &aug, &TrainHyper::default()).is_err());
        let small = PretrainConfig { batch_size: 1, ..pc };
        assert!(pretrain_contrastive(&mut m, &refs, &small, &aug, &TrainHyper::default()).is_err());
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let mut m = init_model(&cfg(1)).unwrap();
        let before = m.clone();
        let x = [1.0, 2.0, 3.0];
        let data = vec![(&x[..], crate::evidential::OneHotLabel::new(0, 2).unwrap())];
        let losses = finetune_evidential(&mut m, &data, 0, 1, &TrainHyper::default(), &mut seed::rng(0, "s", 0)).unwrap();
        assert!(losses.is_empty());
        assert_eq!(m, before);
        assert!(finetune_evidential(&mut m, &[], 1, 1, &TrainHyper::default(), &mut seed::rng(0, "s", 0)).is_err());
    }

    #[test]
    fn annealing_reaches_full_weight_on_tenth_epoch() {
        let mut m = init_model(&cfg(1)).unwrap();
        let x = [1.0, 2.0, 3.0];
        let data = vec![(&x[..], crate::evidential::OneHotLabel::new(0, 2).unwrap())];
        let losses = finetune_evidential(&mut m, &data, 10, 1, &TrainHyper::default(), &mut seed::rng(0, "s", 0)).unwrap();
        assert_eq!(losses[0].lambda, 0.1);
        assert_eq!(losses[9].lambda, 1.0);
    }

    #[test]
    fn distill_with_zero_learning_rate_is_identity() {
        let teacher = init_model(&cfg(7)).unwrap();
        let mut student = teacher.clone();
        let xs = views(5, 20, 3);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let hyper = TrainHyper { learning_rate: 0.0, ..TrainHyper::default() };
        distill(&teacher, &mut student, &refs, 1, &hyper, &mut seed::rng(0, "d", 0)).unwrap();
        assert_eq!(student, teacher);

        let mut other = init_model(&NetworkConfig { num_classes: 3, ..cfg(1) }).unwrap();
        assert!(distill(&teacher, &mut other, &refs, 1, &hyper, &mut seed::rng(0, "d", 0)).is_err());
    }

    #[test]
    fn uniform_teacher_pulls_student_to_uniform() {
        let mut teacher = init_model(&cfg(7)).unwrap();
        let n = teacher.num_params();
        // Softplus of a large negative bias gives (numerically) zero evidence.
        let mut p = vec![0.0; n];
        let head = teacher.group_range(ParamGroup::EvidenceHead);
        p[head.end - 2] = -800.0;
        p[head.end - 1] = -800.0;
        teacher.set_params(p).unwrap();
        let xs = views(6, 64, 3);
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let mut student = init_model(&cfg(8)).unwrap();
        let spread = |m: &ModelState| -> f64 {
            refs.iter().map(|x| {
                let p = expected_probabilities(m, x).unwrap();
                (p[0] - 0.5).abs()
            }).sum::<f64>()
        };
        let before = spread(&student);
        distill(&teacher, &mut student, &refs, 30, &TrainHyper { learning_rate: 1e-2, batch_size: 16, ..TrainHyper::default() }, &mut seed::rng(0, "d", 0)).unwrap();
        assert!(spread(&student) < before * 0.5, "{} -> {}", before, spread(&student));
    }
}
