use crate::nn::{sigmoid, softplus};
use crate::scalar::Scalar;
use crate::trace::Segment;

use super::LossConfig;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Focal loss `−α_t (1 − p_t)^γ ln p_t` of one sigmoid score.
pub fn focal_loss<T: Scalar>(p: T, positive: bool, cfg: &LossConfig) -> T {
    let eps = T::of(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    let (pt, at) = if positive {
        (p, T::of(cfg.alpha))
    } else {
        (T::one() - p, T::of(1.0 - cfg.alpha))
    };
    -at * (T::one() - pt).powf(T::of(cfg.gamma)) * pt.ln()
}

/// Focal loss of `σ(z)` and its derivative with respect to the logit `z`.
///
/// The logs are taken in logit space (`ln p = −softplus(−z)`), so a saturated
/// score keeps a useful gradient instead of hitting the probability clamp.
pub fn focal_loss_logit<T: Scalar>(z: T, positive: bool, cfg: &LossConfig) -> (T, T) {
    let gamma = T::of(cfg.gamma);
    // orient so that `p` is the probability of the target outcome
    let (z, a) = if positive {
        (z, T::of(cfg.alpha))
    } else {
        (-z, T::of(1.0 - cfg.alpha))
    };
    let p = sigmoid(z);
    let q = sigmoid(-z);
    let ln_p = -softplus(-z);
    let loss = -a * q.powf(gamma) * ln_p;
    // d/dz of −α (1−p)^γ ln p, using dp/dz = p q
    let grad = a * (gamma * q.powf(gamma) * p * ln_p - q.powf(gamma + T::one()));
    (loss, if positive { grad } else { -grad })
}

/// `1 − IoUT(proposal, gt)` with its gradient `(∂/∂c, ∂/∂l)` in the proposal's
/// center and length.
pub fn reg_loss_grad<T: Scalar>(proposal: &Segment<T>, gt: &Segment<T>) -> (T, T, T) {
    let half = T::of(0.5);
    let (ps, pe) = proposal.bounds();
    let (gs, ge) = gt.bounds();
    let inter = pe.min(ge) - ps.max(gs);
    if !(inter > T::zero()) {
        return (T::one(), T::zero(), T::zero());
    }
    let union = proposal.l + gt.l - inter;
    let iou = inter / union;
    let u2 = union * union;
    let d_iou_d_inter = (union + inter) / u2;
    let end_inside = if pe < ge { T::one() } else { T::zero() };
    let start_inside = if ps > gs { T::one() } else { T::zero() };
    let d_inter_dc = end_inside - start_inside;
    let d_inter_dl = (end_inside + start_inside) * half;
    let d_iou_dc = d_iou_d_inter * d_inter_dc;
    let d_iou_dl = d_iou_d_inter * d_inter_dl - inter / u2;
    (T::one() - iou, -d_iou_dc, -d_iou_dl)
}

/// IoUT regression loss `1 − IoUT`.
pub fn reg_loss<T: Scalar>(proposal: &Segment<T>, gt: &Segment<T>) -> T {
    reg_loss_grad(proposal, gt).0
}
