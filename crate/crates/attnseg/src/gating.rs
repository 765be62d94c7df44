//! Stochastic per-head attention gates with a hard-concrete relaxation of L0.
//!
//! Each head h in layer l owns a learnable logit `log_alpha[l][h]`. During
//! training a gate is sampled by stretching a binary-concrete variable and
//! clamping to [0, 1], which puts point mass on exactly 0 and exactly 1 while
//! staying differentiable in between. The expected number of non-zero gates
//! has a closed form used as the sparsity penalty.

use ndarray::Array2;
use rand::Rng;

use crate::config::GateConfig;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct GateParams<F> {
    /// (num_layers, num_heads) gate logits.
    pub log_alpha: Array2<F>,
    pub beta: F,
    pub gamma: F,
    pub zeta: F,
}

impl<F: Real> GateParams<F> {
    pub fn new(num_layers: usize, num_heads: usize, cfg: &GateConfig) -> Self {
        GateParams {
            log_alpha: Array2::from_elem((num_layers, num_heads), F::of(cfg.log_alpha_init)),
            beta: F::of(cfg.beta),
            gamma: F::of(cfg.gamma),
            zeta: F::of(cfg.zeta),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.log_alpha.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.log_alpha.ncols()
    }

    /// beta * ln(-gamma / zeta), the shift inside the expected-L0 sigmoid.
    fn l0_shift(&self) -> F {
        self.beta * (-self.gamma / self.zeta).ln()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    // Split on sign so the exponential never overflows.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// One sampled gate: the clamped value plus the intermediates needed for the
/// pathwise derivative.
#[derive(Debug, Clone, Copy)]
pub struct GateDraw<F> {
    /// g = clamp(stretched, 0, 1).
    pub gate: F,
    /// s = sigmoid((logit(u) + log_alpha) / beta).
    pub sigmoid: F,
    /// stretched = s * (zeta - gamma) + gamma.
    pub stretched: F,
}

/// Transforms a uniform draw u in (0, 1) into a hard-concrete gate.
pub fn gate_from_uniform<F: Real>(u: F, log_alpha: F, beta: F, gamma: F, zeta: F) -> GateDraw<F> {
    let logit_u = u.ln() - (F::one() - u).ln();
    let s = sigmoid((logit_u + log_alpha) / beta);
    let stretched = s * (zeta - gamma) + gamma;
    let gate = stretched.max(F::zero()).min(F::one());
    GateDraw { gate, sigmoid: s, stretched }
}

/// All gates for one optimizer step, with cached intermediates.
#[derive(Debug, Clone)]
pub struct GateSample<F> {
    pub gates: Array2<F>,
    sigmoids: Array2<F>,
    stretched: Array2<F>,
}

/// Builds all gates from pre-drawn uniforms, (num_layers, num_heads). Keeping
/// the uniforms explicit lets the same noise be replayed under perturbed
/// logits, which is what makes the training objective finite-differentiable.
pub fn gates_from_uniforms<F: Real>(params: &GateParams<F>, uniforms: &Array2<F>) -> GateSample<F> {
    assert_eq!(uniforms.raw_dim(), params.log_alpha.raw_dim());
    let shape = params.log_alpha.raw_dim();
    let mut gates = Array2::zeros(shape);
    let mut sigmoids = Array2::zeros(shape);
    let mut stretched = Array2::zeros(shape);
    for ((pos, &u), &la) in uniforms.indexed_iter().zip(params.log_alpha.iter()) {
        let draw = gate_from_uniform(u, la, params.beta, params.gamma, params.zeta);
        gates[pos] = draw.gate;
        sigmoids[pos] = draw.sigmoid;
        stretched[pos] = draw.stretched;
    }
    GateSample { gates, sigmoids, stretched }
}

/// Draws one uniform per (layer, head) in row-major order.
pub fn draw_gate_uniforms<F: Real, R: Rng + ?Sized>(
    shape: (usize, usize),
    rng: &mut R,
) -> Array2<F> {
    let flat: Vec<F> = (0..shape.0 * shape.1).map(|_| F::unit_open(rng)).collect();
    Array2::from_shape_vec(shape, flat).unwrap()
}

/// Samples one gate per (layer, head), drawing uniforms in row-major order so
/// the RNG stream is reproducible.
pub fn sample_gates<F: Real, R: Rng + ?Sized>(params: &GateParams<F>, rng: &mut R) -> GateSample<F> {
    let uniforms = draw_gate_uniforms(params.log_alpha.dim(), rng);
    gates_from_uniforms(params, &uniforms)
}

/// Deterministic gates for evaluation: clamp(sigmoid(log_alpha) * (zeta -
/// gamma) + gamma, 0, 1).
pub fn eval_gates<F: Real>(params: &GateParams<F>) -> Array2<F> {
    params.log_alpha.mapv(|la| {
        (sigmoid(la) * (params.zeta - params.gamma) + params.gamma)
            .max(F::zero())
            .min(F::one())
    })
}

/// Per-gate probability of being non-zero: sigmoid(log_alpha - beta *
/// ln(-gamma / zeta)).
pub fn p_nonzero<F: Real>(params: &GateParams<F>) -> Array2<F> {
    let shift = params.l0_shift();
    params.log_alpha.mapv(|la| sigmoid(la - shift))
}

/// Expected number of non-zero gates, the L0 surrogate penalty.
pub fn expected_l0<F: Real>(params: &GateParams<F>) -> F {
    p_nonzero(params).sum()
}

/// d expected_l0 / d log_alpha, elementwise q * (1 - q).
pub fn expected_l0_grad<F: Real>(params: &GateParams<F>) -> Array2<F> {
    p_nonzero(params).mapv(|q| q * (F::one() - q))
}

/// Total training objective: classification loss plus lambda times the
/// expected-L0 penalty.
pub fn total_loss<F: Real>(cls_loss: F, l0: F, lambda: F) -> F {
    cls_loss + lambda * l0
}

/// Backpropagates a gradient w.r.t. the sampled gates into log_alpha. The
/// clamp blocks the pathwise derivative outside (0, 1); inside, dg/dlog_alpha
/// = (zeta - gamma) * s * (1 - s) / beta.
pub fn gate_grad_to_log_alpha<F: Real>(
    params: &GateParams<F>,
    sample: &GateSample<F>,
    dgates: &Array2<F>,
) -> Array2<F> {
    let scale = (params.zeta - params.gamma) / params.beta;
    let mut out = Array2::zeros(params.log_alpha.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(dgates)
        .and(&sample.sigmoids)
        .and(&sample.stretched)
        .for_each(|o, &dg, &s, &t| {
            if t > F::zero() && t < F::one() {
                *o = dg * scale * s * (F::one() - s);
            }
        });
    out
}

/// Keep mask after pruning: 1 where P(gate != 0) >= threshold, else 0.
pub fn prune_heads<F: Real>(params: &GateParams<F>, threshold: f64) -> Array2<u8> {
    p_nonzero(params).mapv(|q| u8::from(q.as_f64() >= threshold))
}

/// Fraction of heads whose P(gate != 0) falls below the prune threshold.
pub fn fraction_prunable<F: Real>(params: &GateParams<F>, threshold: f64) -> f64 {
    let q = p_nonzero(params);
    let below = q.iter().filter(|v| v.as_f64() < threshold).count();
    below as f64 / q.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;

    fn params(log_alpha: f64, layers: usize, heads: usize) -> GateParams<f64> {
        GateParams::new(
            layers,
            heads,
            &GateConfig { log_alpha_init: log_alpha, ..GateConfig::default() },
        )
    }

    // Closed-form reference values computed independently from
    // q = sigmoid(log_alpha - beta * ln(-gamma/zeta)) with beta = 2/3,
    // gamma = -0.1, zeta = 1.1 (so beta * ln(-gamma/zeta) = -1.5985968485).
    const Q_AT_MINUS_2: f64 = 0.40097526440092285;
    const Q_AT_0: f64 = 0.8318221839916905;
    const Q_AT_2: f64 = 0.973366655261484;

    #[test]
    fn expected_l0_matches_closed_form() {
        assert_relative_eq!(expected_l0(&params(-2.0, 1, 1)), Q_AT_MINUS_2, max_relative = 1e-12);
        assert_relative_eq!(expected_l0(&params(0.0, 1, 1)), Q_AT_0, max_relative = 1e-12);
        assert_relative_eq!(expected_l0(&params(2.0, 1, 1)), Q_AT_2, max_relative = 1e-12);
        // A 4x4 grid at init 0 sums to 16 * q(0) = 13.309154943867048.
        assert_relative_eq!(expected_l0(&params(0.0, 4, 4)), 13.309154943867048, max_relative = 1e-12);
    }

    #[test]
    fn eval_gate_values() {
        let g = eval_gates(&params(2.0, 2, 3));
        for &v in g.iter() {
            assert_relative_eq!(v, 0.956956493573459, max_relative = 1e-12);
        }
        let g0 = eval_gates(&params(0.0, 1, 1));
        assert_relative_eq!(g0[(0, 0)], 0.5, max_relative = 1e-12);
        // Strongly negative logits clamp to exactly zero.
        let gneg = eval_gates(&params(-40.0, 1, 1));
        assert_eq!(gneg[(0, 0)], 0.0);
        // Strongly positive logits clamp to exactly one.
        let gpos = eval_gates(&params(40.0, 1, 1));
        assert_eq!(gpos[(0, 0)], 1.0);
    }

    #[test]
    fn gate_from_uniform_hand_traces() {
        let (b, g, z) = (2.0 / 3.0, -0.1, 1.1);
        // u = 0.5, log_alpha = 0: logit is 0, s = 0.5, stretched = 0.5.
        let d = gate_from_uniform(0.5, 0.0, b, g, z);
        assert_relative_eq!(d.gate, 0.5, max_relative = 1e-12);
        // u = 0.3, log_alpha = 2: interior value.
        let d = gate_from_uniform(0.3, 2.0, b, g, z);
        assert_relative_eq!(d.sigmoid, 0.8492912752933313, max_relative = 1e-12);
        assert_relative_eq!(d.gate, 0.9191495303519978, max_relative = 1e-12);
        // u = 0.9, log_alpha = 0: s = 27/28, stretched > 1 so the gate clamps.
        let d = gate_from_uniform(0.9, 0.0, b, g, z);
        assert_relative_eq!(d.sigmoid, 27.0 / 28.0, max_relative = 1e-12);
        assert_eq!(d.gate, 1.0);
        // u = 0.1, log_alpha = 0: s = 1/28, stretched < 0 so the gate clamps.
        let d = gate_from_uniform(0.1, 0.0, b, g, z);
        assert_relative_eq!(d.sigmoid, 1.0 / 28.0, max_relative = 1e-12);
        assert_eq!(d.gate, 0.0);
    }

    #[test]
    fn sampled_gates_stay_in_unit_interval_and_hit_endpoints() {
        // Empirical endpoint mass over 10^6 draws must match
        // P(g = 0) = sigmoid(-log_alpha + beta * ln(-gamma/zeta)) = 1 - q
        // within 0.01 (about 20 standard errors).
        for (la, q) in [(-2.0, Q_AT_MINUS_2), (0.0, Q_AT_0), (2.0, Q_AT_2)] {
            let p = params(la, 1, 1);
            let mut rng = stream_rng(555, "gate-mc", la.to_bits());
            let n = 1_000_000usize;
            let mut zeros = 0usize;
            let mut ones = 0usize;
            for _ in 0..n {
                let s = sample_gates(&p, &mut rng);
                let g = s.gates[(0, 0)];
                assert!((0.0..=1.0).contains(&g), "gate {g} outside [0, 1]");
                if g == 0.0 {
                    zeros += 1;
                }
                if g == 1.0 {
                    ones += 1;
                }
            }
            let p0 = zeros as f64 / n as f64;
            let expect0 = 1.0 - q;
            assert!(
                (p0 - expect0).abs() < 0.01,
                "P(g=0) at log_alpha={la}: got {p0}, expected {expect0}"
            );
            assert!(ones > 0, "clamp should produce exact ones at log_alpha={la}");
        }
    }

    #[test]
    fn l0_gradient_matches_finite_differences() {
        // Deterministic closed form: central differences at h = 1e-6 should
        // agree to 1e-4 relative error across 100 random logit settings.
        let mut rng = stream_rng(77, "l0-fd", 0);
        for _ in 0..100 {
            let mut p = params(0.0, 2, 3);
            for v in p.log_alpha.iter_mut() {
                *v = (f64::unit_open(&mut rng) - 0.5) * 8.0;
            }
            let analytic = expected_l0_grad(&p);
            let h = 1e-6;
            for idx in 0..p.log_alpha.len() {
                let (l, hd) = (idx / 3, idx % 3);
                let orig = p.log_alpha[(l, hd)];
                p.log_alpha[(l, hd)] = orig + h;
                let up = expected_l0(&p);
                p.log_alpha[(l, hd)] = orig - h;
                let down = expected_l0(&p);
                p.log_alpha[(l, hd)] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[(l, hd)];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    ((fd - a) / denom).abs() < 1e-4,
                    "l0 grad mismatch at log_alpha={orig}: fd={fd}, analytic={a}"
                );
            }
        }
    }

    #[test]
    fn clamp_blocks_pathwise_gradient() {
        let p = params(0.0, 1, 3);
        let (b, g, z) = (2.0 / 3.0, -0.1, 1.1);
        // One draw per regime: clamped at 0, interior, clamped at 1.
        let draws = [
            gate_from_uniform(0.05, 0.0, b, g, z),
            gate_from_uniform(0.5, 0.0, b, g, z),
            gate_from_uniform(0.95, 0.0, b, g, z),
        ];
        let gates = Array2::from_shape_vec((1, 3), draws.iter().map(|d| d.gate).collect()).unwrap();
        let sigmoids =
            Array2::from_shape_vec((1, 3), draws.iter().map(|d| d.sigmoid).collect()).unwrap();
        let stretched =
            Array2::from_shape_vec((1, 3), draws.iter().map(|d| d.stretched).collect()).unwrap();
        let sample = GateSample { gates, sigmoids, stretched };
        let dgates = Array2::from_elem((1, 3), 1.0);
        let grad = gate_grad_to_log_alpha(&p, &sample, &dgates);
        assert_eq!(grad[(0, 0)], 0.0);
        assert_eq!(grad[(0, 2)], 0.0);
        let s = draws[1].sigmoid;
        assert_relative_eq!(grad[(0, 1)], (z - g) / b * s * (1.0 - s), max_relative = 1e-12);
    }

    #[test]
    fn pruning_thresholds_on_p_nonzero() {
        let mut p = params(0.0, 2, 2);
        // q crosses 0.05 at log_alpha = -ln(19) + beta*ln(-gamma/zeta)
        // = -2.944439 - 1.598597 = -4.543036.
        p.log_alpha[(0, 0)] = -6.0; // q well below 0.05
        p.log_alpha[(1, 1)] = -4.0; // q above 0.05
        let keep = prune_heads(&p, 0.05);
        assert_eq!(keep[(0, 0)], 0);
        assert_eq!(keep[(0, 1)], 1);
        assert_eq!(keep[(1, 0)], 1);
        assert_eq!(keep[(1, 1)], 1);
        assert_relative_eq!(fraction_prunable(&p, 0.05), 0.25, max_relative = 1e-12);
    }

    #[test]
    fn sampling_is_reproducible() {
        let p = params(0.5, 3, 4);
        let a = sample_gates(&p, &mut stream_rng(1, "g", 0)).gates;
        let b = sample_gates(&p, &mut stream_rng(1, "g", 0)).gates;
        assert_eq!(a, b);
    }
}
