use alloc::vec::Vec;

use crate::math;

/// Softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| math::exp((z - max) / temperature))
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let lse = math::ln(scaled.iter().map(|&s| math::exp(s)).sum());
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits, 1.0);
    let mut grad: Vec<f64> = logp.iter().map(|&l| math::exp(l)).collect();
    grad[label] -= 1.0;
    (-logp[label], grad)
}

/// `KL(softmax(target/T) ‖ softmax(student/T))` with its gradient w.r.t. the
/// student logits.
pub fn kl_to_target(
    target_logits: &[f64],
    student_logits: &[f64],
    temperature: f64,
) -> (f64, Vec<f64>) {
    let p = softmax(target_logits, temperature);
    let logp = log_softmax(target_logits, temperature);
    let logq = log_softmax(student_logits, temperature);
    let kl = p
        .iter()
        .zip(logp.iter().zip(&logq))
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, (&lp, &lq))| pi * (lp - lq))
        .sum::<f64>();
    let grad = logq
        .iter()
        .zip(&p)
        .map(|(&lq, &pi)| (math::exp(lq) - pi) / temperature)
        .collect();
    (kl.max(0.0), grad)
}

/// Binary cross-entropy on a logit, with d/dlogit.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    // log(1 + e^z) computed stably
    let softplus = if logit > 0.0 {
        logit + math::ln(1.0 + math::exp(-logit))
    } else {
        math::ln(1.0 + math::exp(logit))
    };
    (softplus - target * logit, math::sigmoid(logit) - target)
}

/// Shannon entropy in nats; zero-probability terms contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * math::ln(x))
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_known_pair() {
        let (kl, _) = kl_to_target(&[math::ln(3.0), 0.0], &[0.0, 0.0], 1.0);
        let expected = 0.75 * math::ln(1.5) + 0.25 * math::ln(0.5);
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - math::ln(4.0)).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0], 0.7);
        let b = softmax(&[11.0, 12.0, 13.0], 0.7);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let (l, g) = bce_with_logit(0.3, 1.0);
        let p = math::sigmoid(0.3);
        assert!((l + math::ln(p)).abs() < 1e-12);
        assert!((g - (p - 1.0)).abs() < 1e-12);
    }
}
