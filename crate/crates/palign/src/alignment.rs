//! Prompt alignment: recalculate posteriors over the candidate set, mix the
//! learnable and handcrafted predictions under a ramped schedule, and match
//! the model to the mixed target with a cross-entropy term.

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::numerics::{self, floor_clamp, ln_floor, Dist};
use crate::objectives::LossValue;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Cap of the mixing schedule (maximum weight of the learnable branch).
    pub lambda: f64,
    /// Epochs until the schedule reaches its cap.
    pub t_prime: usize,
    /// Weight of the alignment loss in the total loss.
    pub beta: f64,
    /// Pin α to a constant instead of the ramp (ablation switch).
    pub alpha_fixed: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            lambda: 0.5,
            t_prime: 25,
            beta: 1.0,
            alpha_fixed: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "align.lambda {} outside [0,1]",
                self.lambda
            )));
        }
        if self.t_prime < 1 {
            return Err(Error::Config("align.t_prime must be ≥ 1".into()));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config(format!("align.beta {} must be ≥ 0", self.beta)));
        }
        if let Some(a) = self.alpha_fixed {
            if !(0.0..=1.0).contains(&a) || !a.is_finite() {
                return Err(Error::Config(format!(
                    "align.alpha_fixed {a} outside [0,1]"
                )));
            }
        }
        Ok(())
    }

    /// Mixing coefficient for an epoch: the fixed override when set,
    /// otherwise the ramp min(t·λ/T′, λ).
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        self.alpha_fixed.unwrap_or_else(|| alpha_schedule(epoch, self))
    }
}

/// Probability vector supported on a candidate set: zero off the set,
/// summing to 1 over it.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPosterior {
    support: Vec<usize>,
    values: Vec<f64>,
}

impl MixedPosterior {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }
}

/// pᵢ = fᵢ/Σ_{j∈Y} f_j on Y, zero elsewhere; uniform over Y when the
/// candidate mass underflows (counted in `floor_hits`). The result is a
/// constructed target: no gradient flows through it.
pub fn restrict_posterior(f: &Dist, set: &CandidateSet, floor_hits: &mut u64) -> MixedPosterior {
    let mut values = vec![0.0; f.len()];
    let mass: f64 = set.members().iter().map(|&l| f[l]).sum();
    if mass < numerics::PROB_FLOOR {
        *floor_hits += 1;
        let u = 1.0 / set.len() as f64;
        for &l in set.members() {
            values[l] = u;
        }
    } else {
        for &l in set.members() {
            values[l] = f[l] / mass;
        }
    }
    MixedPosterior {
        support: set.members().to_vec(),
        values,
    }
}

/// α(t) = min(t·λ/T′, λ): zero at t=0, linear ramp, capped at λ from T′ on.
pub fn alpha_schedule(t: usize, cfg: &AlignConfig) -> f64 {
    (t as f64 * cfg.lambda / cfg.t_prime as f64).min(cfg.lambda)
}

/// p̃ = α·p_s + (1−α)·p_h. Both inputs must be restricted to the same
/// candidate set; the output is fully detached.
pub fn mix_posteriors(
    p_s: &MixedPosterior,
    p_h: &MixedPosterior,
    alpha: f64,
) -> Result<MixedPosterior> {
    if p_s.support != p_h.support || p_s.values.len() != p_h.values.len() {
        return Err(Error::Support(
            "mixed posteriors restricted to different candidate sets".into(),
        ));
    }
    let values = p_s
        .values
        .iter()
        .zip(&p_h.values)
        .map(|(s, h)| alpha * s + (1.0 - alpha) * h)
        .collect();
    Ok(MixedPosterior {
        support: p_s.support.clone(),
        values,
    })
}

/// Mean over the batch of −Σᵢ p̃ᵢ·log fᵢ; gradient flows only through f.
pub fn align_loss(p_tilde: &[MixedPosterior], f: &[Dist]) -> LossValue {
    let b = f.len();
    let c = f[0].len();
    let bf = b as f64;
    let mut scalar = 0.0;
    let mut grad = vec![vec![0.0; c]; b];
    let mut floor_hits = 0;
    for (i, (target, dist)) in p_tilde.iter().zip(f).enumerate() {
        for &label in target.support() {
            let w = target.values[label];
            if w == 0.0 {
                continue;
            }
            scalar -= w * ln_floor(dist[label], &mut floor_hits) / bf;
            grad[i][label] -= w / (bf * floor_clamp(dist[label]));
        }
    }
    LossValue {
        scalar,
        grad_wrt_probs: grad,
        floor_hits,
    }
}

/// L_total = L_PLL + β·L_align with gradients summed accordingly.
pub fn total_loss(pll: &LossValue, align: &LossValue, beta: f64) -> LossValue {
    debug_assert_eq!(pll.grad_wrt_probs.len(), align.grad_wrt_probs.len());
    let grad = pll
        .grad_wrt_probs
        .iter()
        .zip(&align.grad_wrt_probs)
        .map(|(p, a)| p.iter().zip(a).map(|(x, y)| x + beta * y).collect())
        .collect();
    LossValue {
        scalar: pll.scalar + beta * align.scalar,
        grad_wrt_probs: grad,
        floor_hits: pll.floor_hits + align.floor_hits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{ce_loss, proden_loss, ConfidenceMatrix};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(v: Vec<f64>) -> Dist {
        Dist::new(v).unwrap()
    }

    fn set(members: &[usize]) -> CandidateSet {
        CandidateSet::new(members.to_vec()).unwrap()
    }

    #[test]
    fn restrict_examples() {
        let mut hits = 0;
        // full support is the identity
        let f = dist(vec![0.2, 0.3, 0.5]);
        let p = restrict_posterior(&f, &set(&[0, 1, 2]), &mut hits);
        for i in 0..3 {
            assert_abs_diff_eq!(p.values()[i], f[i], epsilon = 1e-12);
        }

        // hand normalization over {0,2}
        let p = restrict_posterior(&f, &set(&[0, 2]), &mut hits);
        assert_abs_diff_eq!(p.values()[0], 2.0 / 7.0, epsilon = 1e-12);
        assert_eq!(p.values()[1], 0.0);
        assert_abs_diff_eq!(p.values()[2], 5.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.values()[0], 0.2857142857, epsilon = 1e-9);
        assert_abs_diff_eq!(p.values()[2], 0.7142857143, epsilon = 1e-9);

        // singleton forces one-hot
        let p = restrict_posterior(&f, &set(&[1]), &mut hits);
        assert_eq!(p.values(), &[0.0, 1.0, 0.0]);
        assert_eq!(hits, 0);
    }

    #[test]
    fn alpha_schedule_examples() {
        let cfg = AlignConfig::default();
        assert_eq!(alpha_schedule(0, &cfg), 0.0);
        assert_abs_diff_eq!(alpha_schedule(12, &cfg), 0.24, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha_schedule(25, &cfg), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha_schedule(40, &cfg), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn alpha_fixed_overrides_ramp() {
        let cfg = AlignConfig {
            alpha_fixed: Some(1.0),
            ..AlignConfig::default()
        };
        assert_eq!(cfg.alpha_at(0), 1.0);
        assert_eq!(cfg.alpha_at(100), 1.0);
        let dynamic = AlignConfig::default();
        assert_eq!(dynamic.alpha_at(0), 0.0);
    }

    #[test]
    fn mix_examples() {
        let mut hits = 0;
        let y = set(&[0, 1]);
        let p_s = restrict_posterior(&dist(vec![1.0, 0.0]), &y, &mut hits);
        let p_h = restrict_posterior(&dist(vec![0.0, 1.0]), &y, &mut hits);

        let m = mix_posteriors(&p_s, &p_h, 0.0).unwrap();
        assert_eq!(m.values(), p_h.values());
        let m = mix_posteriors(&p_s, &p_h, 1.0).unwrap();
        assert_eq!(m.values(), p_s.values());
        let m = mix_posteriors(&p_s, &p_h, 0.5).unwrap();
        assert_eq!(m.values(), &[0.5, 0.5]);
    }

    #[test]
    fn mix_rejects_support_mismatch() {
        let mut hits = 0;
        let f = dist(vec![0.5, 0.3, 0.2]);
        let a = restrict_posterior(&f, &set(&[0, 1]), &mut hits);
        let b = restrict_posterior(&f, &set(&[0, 2]), &mut hits);
        assert!(matches!(mix_posteriors(&a, &b, 0.5), Err(Error::Support(_))));
    }

    #[test]
    fn align_loss_examples() {
        let mut hits = 0;
        // one-hot target → plain −log f_j
        let f = dist(vec![0.7, 0.2, 0.1]);
        let p = restrict_posterior(&f, &set(&[1]), &mut hits);
        let lv = align_loss(&[p], &[f.clone()]);
        assert_abs_diff_eq!(lv.scalar, -(0.2f64.ln()), epsilon = 1e-12);

        // uniform model output → ln C for any target
        let u = dist(vec![0.25; 4]);
        let p = restrict_posterior(&dist(vec![0.5, 0.25, 0.2, 0.05]), &set(&[0, 3]), &mut hits);
        let lv = align_loss(&[p], &[u]);
        assert_abs_diff_eq!(lv.scalar, 4f64.ln(), epsilon = 1e-12);

        // hand evaluation of a half/half target
        let y = set(&[0, 1]);
        let p = restrict_posterior(&dist(vec![0.5, 0.5, 0.0]), &y, &mut hits);
        let lv = align_loss(&[p], &[f]);
        let expect = -(0.5 * 0.7f64.ln() + 0.5 * 0.2f64.ln());
        assert_abs_diff_eq!(lv.scalar, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(lv.scalar, 0.9830564281, epsilon = 1e-9);
    }

    #[test]
    fn align_loss_attains_entropy_bound() {
        let mut hits = 0;
        let f = dist(vec![0.6, 0.4, 0.0]);
        let p = restrict_posterior(&f, &set(&[0, 1]), &mut hits);
        let lv = align_loss(&[p.clone()], &[f]);
        let entropy = -(0.6 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        assert_abs_diff_eq!(lv.scalar, entropy, epsilon = 1e-9);

        // any other f on the same support is strictly worse
        let other = dist(vec![0.3, 0.7, 0.0]);
        let lv2 = align_loss(&[p], &[other]);
        assert!(lv2.scalar > entropy + 1e-6);
    }

    #[test]
    fn total_loss_examples() {
        let pll = LossValue {
            scalar: 0.3,
            grad_wrt_probs: vec![vec![1.0, -2.0]],
            floor_hits: 0,
        };
        let al = LossValue {
            scalar: 0.2,
            grad_wrt_probs: vec![vec![0.5, 4.0]],
            floor_hits: 1,
        };
        let t = total_loss(&pll, &al, 1.0);
        assert_abs_diff_eq!(t.scalar, 0.5, epsilon = 1e-12);
        assert_eq!(t.grad_wrt_probs[0], vec![1.5, 2.0]);
        assert_eq!(t.floor_hits, 1);

        // β=0 keeps the objective untouched
        let t0 = total_loss(&pll, &al, 0.0);
        assert_eq!(t0.scalar, pll.scalar);
        assert_eq!(t0.grad_wrt_probs, pll.grad_wrt_probs);
    }

    #[test]
    fn singleton_alignment_doubles_ce() {
        // With |Y| = 1 the mixed target is forcibly one-hot, so
        // proden + β·align = (1+β)·CE.
        let f = vec![dist(vec![0.6, 0.3, 0.1])];
        let sets = vec![set(&[2])];
        let (conf, _) = ConfidenceMatrix::init_from_outputs(&f, &sets);
        let pll = proden_loss(&conf, &f, &[0]);
        let mut hits = 0;
        let p_s = restrict_posterior(&f[0], &sets[0], &mut hits);
        let p_h = restrict_posterior(&dist(vec![0.1, 0.1, 0.8]), &sets[0], &mut hits);
        let p = mix_posteriors(&p_s, &p_h, 0.3).unwrap();
        let al = align_loss(&[p], &f);
        let beta = 1.0;
        let tot = total_loss(&pll, &al, beta);
        let ce = ce_loss(&f, &[2]).scalar;
        assert_abs_diff_eq!(tot.scalar, (1.0 + beta) * ce, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn restrict_is_stochastic_on_support(
            seed in any::<u64>(),
            c in 2usize..8,
        ) {
            let mut rng = crate::numerics::RngState::new(seed);
            let logits: Vec<f64> = (0..c).map(|_| 2.0 * rng.normal()).collect();
            let f = crate::numerics::softmax(&logits, 1.0).unwrap();
            let mut members: Vec<usize> = (0..c).filter(|_| rng.uniform() < 0.5).collect();
            if members.is_empty() {
                members.push(0);
            }
            let y = CandidateSet::new(members).unwrap();
            let mut hits = 0;
            let p = restrict_posterior(&f, &y, &mut hits);
            let sum: f64 = y.members().iter().map(|&l| p.values()[l]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            for label in 0..c {
                if !y.contains(label) {
                    prop_assert_eq!(p.values()[label], 0.0);
                } else {
                    prop_assert!(p.values()[label] >= 0.0);
                }
            }
        }

        #[test]
        fn alpha_schedule_shape(t in 0usize..200, lam in 0.0f64..=1.0, tp in 1usize..60) {
            let cfg = AlignConfig { lambda: lam, t_prime: tp, beta: 1.0, alpha_fixed: None };
            let a = alpha_schedule(t, &cfg);
            prop_assert!((0.0..=lam + 1e-15).contains(&a));
            prop_assert!(alpha_schedule(t + 1, &cfg) >= a);
            if t >= tp {
                prop_assert!((a - lam).abs() <= 1e-12);
            }
        }

        #[test]
        fn mixing_stays_stochastic(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = crate::numerics::RngState::new(seed);
            let c = 6;
            let sample = |rng: &mut crate::numerics::RngState| {
                let logits: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
                crate::numerics::softmax(&logits, 1.0).unwrap()
            };
            let f = sample(&mut rng);
            let g = sample(&mut rng);
            let mut members: Vec<usize> = (0..c).filter(|_| rng.uniform() < 0.5).collect();
            if members.is_empty() {
                members.push(3);
            }
            let y = CandidateSet::new(members).unwrap();
            let mut hits = 0;
            let p_s = restrict_posterior(&f, &y, &mut hits);
            let p_h = restrict_posterior(&g, &y, &mut hits);
            let m = mix_posteriors(&p_s, &p_h, alpha).unwrap();
            let sum: f64 = m.values().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            for label in 0..c {
                if !y.contains(label) {
                    prop_assert_eq!(m.values()[label], 0.0);
                }
            }
        }
    }
}
