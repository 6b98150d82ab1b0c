use crate::{Error, Result};

/// Published CIFAR-100 fine-to-superclass table, indexed by fine label.
const FINE_TO_COARSE: [u8; 100] = [
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3, //
    3, 14, 9, 18, 7, 11, 3, 9, 7, 11, //
    6, 11, 5, 10, 7, 6, 13, 15, 3, 15, //
    0, 11, 1, 10, 12, 14, 16, 9, 11, 5, //
    5, 19, 8, 8, 15, 13, 14, 17, 18, 10, //
    16, 4, 17, 4, 2, 0, 17, 4, 18, 17, //
    10, 3, 2, 12, 12, 16, 12, 1, 9, 19, //
    2, 10, 0, 1, 16, 12, 9, 13, 15, 13, //
    16, 19, 2, 4, 6, 19, 5, 5, 8, 19, //
    18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
];

pub const COARSE_CLASSES: usize = 20;

/// Maps a CIFAR-100 fine label to its superclass in `[0, 20)`.
pub fn coarse_label_map(fine_label: u16) -> Result<u16> {
    FINE_TO_COARSE
        .get(usize::from(fine_label))
        .map(|&c| u16::from(c))
        .ok_or_else(|| Error::Contract(format!("CIFAR-100 fine label {fine_label} not in [0, 100)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_superclass_has_exactly_five_fine_classes() {
        let mut counts = [0usize; COARSE_CLASSES];
        for fine in 0..100u16 {
            counts[usize::from(coarse_label_map(fine).unwrap())] += 1;
        }
        assert_eq!(counts, [5; COARSE_CLASSES]);
    }

    #[test]
    fn known_entries() {
        // apple -> fruit_and_vegetables, aquarium_fish -> fish, willow_tree -> trees
        assert_eq!(coarse_label_map(0).unwrap(), 4);
        assert_eq!(coarse_label_map(1).unwrap(), 1);
        assert_eq!(coarse_label_map(96).unwrap(), 17);
    }

    #[test]
    fn deterministic_and_rejects_out_of_range() {
        assert_eq!(coarse_label_map(42).unwrap(), coarse_label_map(42).unwrap());
        assert!(matches!(coarse_label_map(100), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_train_histogram_over_500_per_fine_class() {
        // The CIFAR-100 train split has 500 images per fine class.
        let mut hist = [0usize; COARSE_CLASSES];
        for fine in 0..100u16 {
            hist[usize::from(coarse_label_map(fine).unwrap())] += 500;
        }
        assert!(hist.iter().all(|&h| h == 2_500));
    }
}
