//! Central finite-difference gradient checking.
//!
//! Derivatives are estimated with the fourth-order central stencil
//! `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, which allows a step large
//! enough to keep cancellation noise well below the tolerances used in tests.

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between `analytic` and a central-difference gradient of `f` at `x`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, analytic, eps, &all)
}

/// [`grad_check`] restricted to the coordinates in `coords`.
pub fn grad_check_at<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64, coords: &[usize]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for &i in coords {
        let orig = probe[i];
        let mut at = |k: f64| {
            probe[i] = orig + k * eps;
            f(&probe)
        };
        // paired differences so a locally constant f gives exactly zero
        let (m2, m1, p1, p2) = (at(-2.0), at(-1.0), at(1.0), at(2.0));
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
        probe[i] = orig;
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{sigmoid, Linear, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_slope_at_zero() {
        let analytic = sigmoid(0.0_f64) * (1.0 - sigmoid(0.0_f64));
        assert_eq!(analytic, 0.25);
        let numeric = (sigmoid(1e-5_f64) - sigmoid(-1e-5_f64)) / 2e-5;
        assert!((analytic - numeric).abs() < 1e-8);
        assert!(grad_check(|v| sigmoid(v[0]), &[0.0], &[0.25], 1e-5) < 1e-8);
    }

    #[test]
    fn linear_layer_is_exact_up_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = Linear::<f64>::new(6, 4, &mut rng);
        let x = Tensor::<f64>::uniform(&[6], 1.0, &mut rng);
        let r = [0.3, -1.2, 0.7, 2.0];
        let loss = |l: &Linear<f64>, x: &[f64]| -> f64 { l.forward(x).iter().zip(&r).map(|(a, b)| a * b).sum() };
        let mut g = crate::nn::Module::zeros_like(&lin);
        let dx = lin.backward(x.data(), &r, &mut g);
        assert!(grad_check(|v| loss(&lin, v), x.data(), &dx, 1e-5) <= 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        assert!(grad_check(|v| v[0] * v[0], &[1.0], &[3.0], 1e-5) > 0.1);
    }
}
