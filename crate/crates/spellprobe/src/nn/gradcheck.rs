//! Finite-difference verification of the hand-written backward pass.
//!
//! Central differences over every parameter slot, compared against the
//! analytic gradient with relative error |a−n| / max(1e-8, |a|+|n|).
//! Everything runs in f64 on the production code path, so the check is a
//! real statement about the training gradients and not about a shadow
//! implementation.

use super::batch::PackedBatch;
use super::stack::Stack;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Tensor name and flat index within it where the worst error lives.
    pub worst: Option<(String, usize)>,
}

pub fn grad_check(stack: &mut Stack, batch: &PackedBatch, eps: f64) -> GradCheckReport {
    stack.store.zero_grad();
    let _ = stack.loss_and_grads(batch, None);
    let analytic = stack.store.grad.clone();

    let mut report = GradCheckReport {
        n_checked: analytic.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for i in 0..analytic.len() {
        let orig = stack.store.data[i];
        stack.store.data[i] = orig + eps;
        let plus = {
            let fwd = stack.forward(batch, None);
            stack.loss(batch, &fwd)
        };
        stack.store.data[i] = orig - eps;
        let minus = {
            let fwd = stack.forward(batch, None);
            stack.loss(batch, &fwd)
        };
        stack.store.data[i] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / f64::max(1e-8, analytic[i].abs() + numeric.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            let spec = stack
                .store
                .specs()
                .iter()
                .find(|s| i >= s.offset && i < s.offset + s.len)
                .expect("index inside some tensor");
            report.worst = Some((spec.name.clone(), i - spec.offset));
        }
    }
    report
}
