//! A small discrete policy whose expected reward can be differentiated
//! exactly, used to check the sampled log-likelihood-ratio estimator.

use rand::Rng;

use crate::error::{Error, Result};

/// Softmax over `K` actions with logits `features[k] . theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerablePolicy {
    pub theta: Vec<f64>,
    /// One feature vector per action, each of length `theta.len()`.
    pub features: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
}

impl EnumerablePolicy {
    pub fn new(theta: Vec<f64>, features: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        if features.is_empty() || features.len() != rewards.len() {
            return Err(Error::Validation("need one reward per action and at least one action".into()));
        }
        if features.iter().any(|f| f.len() != theta.len()) {
            return Err(Error::Validation("feature length differs from parameter length".into()));
        }
        Ok(EnumerablePolicy { theta, features, rewards })
    }

    pub fn num_actions(&self) -> usize {
        self.rewards.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let logits: Vec<f64> = self
            .features
            .iter()
            .map(|f| f.iter().zip(&self.theta).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Gradient of `log pi(action)`: `phi(action) - E_pi[phi]`.
    pub fn grad_log_prob(&self, action: usize, probs: &[f64]) -> Vec<f64> {
        let mut g = self.features[action].clone();
        for (p, f) in probs.iter().zip(&self.features) {
            for (gi, fi) in g.iter_mut().zip(f) {
                *gi -= p * fi;
            }
        }
        g
    }

    pub fn expected_reward(&self) -> f64 {
        self.probabilities().iter().zip(&self.rewards).map(|(p, r)| p * r).sum()
    }

    /// Gradient of the expected reward by summing over every action.
    pub fn exact_gradient(&self) -> Vec<f64> {
        let probs = self.probabilities();
        let mut out = vec![0.0; self.theta.len()];
        for k in 0..self.num_actions() {
            let g = self.grad_log_prob(k, &probs);
            for (o, gi) in out.iter_mut().zip(g) {
                *o += probs[k] * self.rewards[k] * gi;
            }
        }
        out
    }

    /// Sample mean of `r(a) * grad log pi(a)` over `samples` draws, with the
    /// per-coordinate standard error of that mean.
    pub fn estimate_gradient(&self, samples: usize, rng: &mut impl Rng) -> Result<GradientEstimate> {
        if samples < 2 {
            return Err(Error::Validation("need at least two samples".into()));
        }
        let probs = self.probabilities();
        let grads: Vec<Vec<f64>> = (0..self.num_actions()).map(|k| self.grad_log_prob(k, &probs)).collect();
        let d = self.theta.len();
        let (mut sum, mut sum_sq) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..samples {
            let k = sample_index(&probs, rng);
            for i in 0..d {
                let x = self.rewards[k] * grads[k][i];
                sum[i] += x;
                sum_sq[i] += x * x;
            }
        }
        let n = samples as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let standard_error = (0..d)
            .map(|i| {
                let var = (sum_sq[i] - n * mean[i] * mean[i]) / (n - 1.0);
                (var.max(0.0) / n).sqrt()
            })
            .collect();
        Ok(GradientEstimate { mean, standard_error })
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_policy_gradient_is_reward_weighted_feature_deviation() {
        let p = EnumerablePolicy::new(vec![0.0], vec![vec![1.0], vec![-1.0]], vec![1.0, 0.0]).unwrap();
        assert_eq!(p.probabilities(), vec![0.5, 0.5]);
        // d/dθ sigmoid(2θ) at 0 = 0.5
        assert!((p.exact_gradient()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn estimate_close_to_exact() {
        let p = EnumerablePolicy::new(
            vec![0.3, -0.2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![1.0, 0.0, 1.0],
        )
        .unwrap();
        let est = p.estimate_gradient(50_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for ((m, se), e) in est.mean.iter().zip(&est.standard_error).zip(p.exact_gradient()) {
            assert!((m - e).abs() < 4.0 * se, "{m} {e} {se}");
        }
    }
}
