use ndarray::Array1;

use crate::masking::LabelSet;
use crate::real::Real;

/// Multi-hot target vector for a label set.
pub fn targets_from_labels<F: Real>(labels: &LabelSet, num_classes: usize) -> Array1<F> {
    Array1::from_shape_fn(num_classes, |c| if labels.contains(c) { F::one() } else { F::zero() })
}

/// Numerically stable binary cross entropy with logits, averaged over
/// classes. Per class: max(z, 0) - z t + ln(1 + exp(-|z|)); gradient
/// (sigmoid(z) - t) / C.
pub fn bce_with_logits<F: Real>(logits: &Array1<F>, targets: &Array1<F>) -> (F, Array1<F>) {
    assert_eq!(logits.len(), targets.len());
    let c = F::of(logits.len() as f64);
    let mut loss = F::zero();
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, &t)) in logits.iter().zip(targets.iter()).enumerate() {
        loss = loss + z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        let sig = if z >= F::zero() {
            F::one() / (F::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (F::one() + e)
        };
        grad[i] = (sig - t) / c;
    }
    (loss / c, grad)
}

/// BCE averaged over the classes NOT selected by `exclude`; excluded classes
/// contribute neither loss nor gradient. All classes excluded gives zero.
pub fn bce_with_logits_excluding<F: Real>(
    logits: &Array1<F>,
    targets: &Array1<F>,
    exclude: &crate::masking::MaskVector,
) -> (F, Array1<F>) {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), exclude.len());
    let kept = logits.len() - exclude.count_masked();
    let mut grad = Array1::zeros(logits.len());
    if kept == 0 {
        return (F::zero(), grad);
    }
    let denom = F::of(kept as f64);
    let mut loss = F::zero();
    for (i, (&z, &t)) in logits.iter().zip(targets.iter()).enumerate() {
        if exclude.is_masked(i) {
            continue;
        }
        loss = loss + z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        let sig = if z >= F::zero() {
            F::one() / (F::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (F::one() + e)
        };
        grad[i] = (sig - t) / denom;
    }
    (loss / denom, grad)
}
