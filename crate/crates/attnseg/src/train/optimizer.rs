use crate::model::params::ParamGroup;
use crate::real::Real;

/// Cosine learning-rate decay from the base rate to zero over the total step
/// count, with no warmup.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let t = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay. Decay is applied only to projection
/// matrices (ParamGroup::Weight); biases, norms, tokens and gate logits are
/// not decayed. Moment vectors are flat and follow the canonical parameter
/// traversal order.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub(crate) m: Vec<F>,
    pub(crate) v: Vec<F>,
    pub(crate) step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the GateLogit group only.
    pub gate_lr_mult: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(total_len: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![F::zero(); total_len],
            v: vec![F::zero(); total_len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            gate_lr_mult: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the full parameter list. `params` and `grads` must
    /// traverse the same tensors in the same order as when the optimizer was
    /// created.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(ParamGroup, &mut [F])],
        grads: &[(ParamGroup, &[F])],
    ) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient field count mismatch");
        self.step += 1;
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let eps = F::of(self.eps);
        let bc1 = F::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::of(1.0 - self.beta2.powi(self.step as i32));
        let mut offset = 0usize;
        for ((group, p), (ggroup, g)) in params.iter_mut().zip(grads.iter()) {
            assert_eq!(*group, *ggroup, "parameter/gradient group mismatch");
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            let lr_f = if *group == ParamGroup::GateLogit {
                F::of(lr * self.gate_lr_mult)
            } else {
                F::of(lr)
            };
            let decay = if *group == ParamGroup::Weight {
                F::of(self.weight_decay)
            } else {
                F::zero()
            };
            for (i, (pv, &gv)) in p.iter_mut().zip(g.iter()).enumerate() {
                let j = offset + i;
                self.m[j] = b1 * self.m[j] + (F::one() - b1) * gv;
                self.v[j] = b2 * self.v[j] + (F::one() - b2) * gv * gv;
                let mhat = self.m[j] / bc1;
                let vhat = self.v[j] / bc2;
                *pv = *pv - lr_f * (mhat / (vhat.sqrt() + eps) + decay * *pv);
            }
            offset += p.len();
        }
        assert_eq!(offset, self.m.len(), "optimizer state length mismatch");
    }
}
