use ndarray::Array2;
use rand::Rng;

use crate::real::Real;

/// Sorted, deduplicated set of class indices present in an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    classes: Vec<usize>,
}

impl LabelSet {
    pub fn new(classes: impl IntoIterator<Item = usize>) -> Self {
        let mut classes: Vec<usize> = classes.into_iter().collect();
        classes.sort_unstable();
        classes.dedup();
        LabelSet { classes }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.classes
    }

    pub fn max_class(&self) -> Option<usize> {
        self.classes.last().copied()
    }
}

/// Per-class binary mask; true means the class token's output embedding is
/// zeroed for this step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    masked: Vec<bool>,
}

impl MaskVector {
    /// All-zeros mask, used at evaluation time.
    pub fn none(num_classes: usize) -> Self {
        MaskVector { masked: vec![false; num_classes] }
    }

    pub fn from_flags(masked: Vec<bool>) -> Self {
        MaskVector { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, class: usize) -> bool {
        self.masked[class]
    }

    pub fn count_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn any(&self) -> bool {
        self.masked.iter().any(|&m| m)
    }
}

/// Draws the training-time mask: each class token whose class is absent from
/// `labels` is masked independently with probability `ratio`; label tokens
/// are never masked. One uniform draw is consumed per eligible class
/// regardless of `ratio`, so RNG streams stay aligned across ratio settings.
pub fn sample_mask<R: Rng + ?Sized>(
    labels: &LabelSet,
    num_classes: usize,
    ratio: f64,
    rng: &mut R,
) -> MaskVector {
    let mut masked = vec![false; num_classes];
    for (class, flag) in masked.iter_mut().enumerate() {
        if !labels.contains(class) {
            let u: f64 = rng.gen();
            *flag = u < ratio;
        }
    }
    MaskVector { masked }
}

/// Zeroes the rows of the class-token output embeddings selected by the mask:
/// row i becomes z_i * (1 - m_i). Embeddings are (num_classes, embed_dim).
pub fn apply_output_mask<F: Real>(cls_embeddings: &mut Array2<F>, mask: &MaskVector) {
    assert_eq!(
        cls_embeddings.nrows(),
        mask.len(),
        "mask length must match class token count"
    );
    for (class, mut row) in cls_embeddings.rows_mut().into_iter().enumerate() {
        if mask.is_masked(class) {
            row.fill(F::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn label_set_sorts_and_dedups() {
        let labels = LabelSet::new([2, 0, 2, 1]);
        assert_eq!(labels.as_slice(), &[0, 1, 2]);
        assert!(labels.contains(1));
        assert!(!labels.contains(3));
    }

    #[test]
    fn ratio_zero_masks_nothing_ratio_one_masks_all_non_labels() {
        let labels = LabelSet::new([1, 3]);
        let mut rng = stream_rng(0, "mask-test", 0);
        let none = sample_mask(&labels, 5, 0.0, &mut rng);
        assert_eq!(none.count_masked(), 0);
        let all = sample_mask(&labels, 5, 1.0, &mut rng);
        assert_eq!(all.count_masked(), 3);
        for class in 0..5 {
            assert_eq!(all.is_masked(class), !labels.contains(class));
        }
    }

    #[test]
    fn same_seed_reproduces_mask() {
        let labels = LabelSet::new([0]);
        let a = sample_mask(&labels, 8, 0.5, &mut stream_rng(9, "mask", 4));
        let b = sample_mask(&labels, 8, 0.5, &mut stream_rng(9, "mask", 4));
        assert_eq!(a, b);
    }

    #[test]
    fn masked_fraction_matches_ratio_monte_carlo() {
        // 10_000 draws over 9 eligible classes at ratio 0.5: the sample mean
        // has standard error ~0.0017, so [0.48, 0.52] is a >10 sigma band.
        let labels = LabelSet::new([0]);
        let mut rng = stream_rng(123, "mask-mc", 0);
        let mut masked = 0usize;
        let draws = 10_000usize;
        for _ in 0..draws {
            masked += sample_mask(&labels, 10, 0.5, &mut rng).count_masked();
        }
        let mean = masked as f64 / (draws * 9) as f64;
        assert!((0.48..=0.52).contains(&mean), "masked fraction {mean} outside [0.48, 0.52]");
    }

    #[test]
    fn apply_zeroes_only_masked_rows() {
        let mut emb = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 + 1.0);
        let original = emb.clone();
        let mask = MaskVector::from_flags(vec![false, true, false]);
        apply_output_mask(&mut emb, &mask);
        assert_eq!(emb.row(0), original.row(0));
        assert!(emb.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(emb.row(2), original.row(2));
    }

    proptest! {
        #[test]
        fn labels_are_never_masked(
            seed in 0u64..1000,
            ratio in 0.0f64..=1.0,
            num_classes in 1usize..12,
            label_bits in 0u32..4096,
        ) {
            let labels = LabelSet::new(
                (0..num_classes).filter(|c| label_bits >> c & 1 == 1),
            );
            let mask = sample_mask(&labels, num_classes, ratio, &mut stream_rng(seed, "prop", 0));
            for class in labels.iter() {
                prop_assert!(!mask.is_masked(class));
            }
        }
    }
}
