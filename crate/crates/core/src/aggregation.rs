//! Pair construction over a batch of encoder outputs.
//!
//! Row layout of a batch with `M` images, `K` augmentations and `N` patches:
//! rows `a*M + i` hold augmentation `a` of image `i`, followed by rows
//! `K*M + i*N + p` holding patch `p` of image `i`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::patching::{relative_distance, PatchSpec};
use crate::{Error, Result};

/// Where a representation row came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    ImageView { image_index: usize, aug_index: usize },
    Patch { image_index: usize, patch_index: usize, spec: PatchSpec },
}

impl Provenance {
    pub fn image_index(&self) -> usize {
        match *self {
            Provenance::ImageView { image_index, .. } | Provenance::Patch { image_index, .. } => image_index,
        }
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, Provenance::Patch { .. })
    }
}

/// Row tags of one batch in the canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLayout {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub tags: Vec<Provenance>,
}

impl BatchLayout {
    /// `patches[i]` lists the `n` patch specs of image `i`.
    pub fn new(m: usize, k: usize, patches: &[Vec<PatchSpec>]) -> Result<Self> {
        if patches.len() != m {
            return Err(Error::Contract(format!("{} patch lists for {m} images", patches.len())));
        }
        let n = patches.first().map_or(0, Vec::len);
        if patches.iter().any(|p| p.len() != n) {
            return Err(Error::Contract("images carry different patch counts".into()));
        }
        let mut tags = Vec::with_capacity(representation_count(m, k, n));
        for aug_index in 0..k {
            for image_index in 0..m {
                tags.push(Provenance::ImageView { image_index, aug_index });
            }
        }
        for (image_index, specs) in patches.iter().enumerate() {
            for (patch_index, spec) in specs.iter().enumerate() {
                tags.push(Provenance::Patch {
                    image_index,
                    patch_index,
                    spec: *spec,
                });
            }
        }
        Ok(Self { m, k, n, tags })
    }

    /// Layout with image views only.
    pub fn images_only(m: usize, k: usize) -> Self {
        Self::new(m, k, &vec![Vec::new(); m]).expect("uniform empty patch lists")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Checks the canonical ordering and `P = K*M + M*N`.
    pub fn validate(&self) -> Result<()> {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.tags.len() != representation_count(m, k, n) {
            return Err(Error::Contract(format!(
                "{} rows, expected K*M + M*N = {}",
                self.tags.len(),
                representation_count(m, k, n)
            )));
        }
        for (row, tag) in self.tags.iter().enumerate() {
            let ok = match *tag {
                Provenance::ImageView { image_index, aug_index } => row < k * m && row == aug_index * m + image_index,
                Provenance::Patch {
                    image_index,
                    patch_index,
                    spec,
                } => row == k * m + image_index * n + patch_index && spec.image_index == image_index,
            };
            if !ok {
                return Err(Error::Contract(format!("row {row} tagged {tag:?} is out of canonical order")));
            }
        }
        Ok(())
    }
}

/// `K*M + M*N`.
pub fn representation_count(m: usize, k: usize, n: usize) -> usize {
    k * m + m * n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    ImagePos,
    ImageNeg,
    Patch,
}

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            PairKind::ImagePos => "image_pos",
            PairKind::ImageNeg => "image_neg",
            PairKind::Patch => "patch",
        }
    }
}

/// One labeled pair of row indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub left: usize,
    pub right: usize,
    pub class_target: f64,
    pub distance_target: (f64, f64),
    pub kind: PairKind,
}

/// All pairs of one batch: image pairs first, then patch pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub rows: Vec<PairRow>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, kind: PairKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    /// Pair table as CSV (`left,right,kind,class,tx,ty`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("left,right,kind,class_target,tx,ty\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.left,
                r.right,
                r.kind.name(),
                r.class_target,
                r.distance_target.0,
                r.distance_target.1
            ));
        }
        out
    }
}

/// Positive and negative full-image pairs.
///
/// For every augmentation pair `a < b`, row block `a` is paired with row block
/// `b` image-by-image (positives); the negatives pair image `i` of block `a`
/// with image `(i + shift) mod M` of block `b`, where `shift` cycles through
/// `1..M`. All positives are emitted before all negatives.
pub fn aggregate_image_pairs(layout: &BatchLayout) -> Result<Vec<PairRow>> {
    let (m, k) = (layout.m, layout.k);
    if k < 2 {
        return Err(Error::Config(format!("K = {k}: at least two augmentations are needed for positive pairs")));
    }
    let mut pos = Vec::with_capacity(m * k * (k - 1) / 2);
    let mut neg = Vec::with_capacity(m * k * (k - 1) / 2);
    let mut shift = 1;
    for a in 0..k {
        for b in a + 1..k {
            for i in 0..m {
                pos.push(PairRow {
                    left: a * m + i,
                    right: b * m + i,
                    class_target: 1.0,
                    distance_target: (0.0, 0.0),
                    kind: PairKind::ImagePos,
                });
                neg.push(PairRow {
                    left: a * m + i,
                    right: b * m + (i + shift) % m,
                    class_target: 0.0,
                    distance_target: (1.0, 1.0),
                    kind: PairKind::ImageNeg,
                });
            }
            shift += 1;
            if shift >= m {
                shift = 1;
            }
        }
    }
    pos.extend(neg);
    Ok(pos)
}

/// Unordered positive pairs `(p, q)`, `p < q`, of patches from the same image,
/// targeting `relative_distance(p, q)`.
pub fn aggregate_patch_pairs(layout: &BatchLayout) -> Vec<PairRow> {
    let (m, k, n) = (layout.m, layout.k, layout.n);
    if n < 2 {
        return Vec::new();
    }
    let base = k * m;
    let mut rows = Vec::with_capacity(m * (n * n - n) / 2);
    for i in 0..m {
        for p in 0..n {
            for q in p + 1..n {
                let (l, r) = (base + i * n + p, base + i * n + q);
                let (Provenance::Patch { spec: a, .. }, Provenance::Patch { spec: b, .. }) = (layout.tags[l], layout.tags[r])
                else {
                    unreachable!("validated layout has patch rows after image rows")
                };
                rows.push(PairRow {
                    left: l,
                    right: r,
                    class_target: 1.0,
                    distance_target: relative_distance(&a, &b),
                    kind: PairKind::Patch,
                });
            }
        }
    }
    rows
}

/// Image pairs followed by patch pairs.
pub fn aggregate(layout: &BatchLayout) -> Result<PairBatch> {
    layout.validate()?;
    let mut rows = aggregate_image_pairs(layout)?;
    rows.extend(aggregate_patch_pairs(layout));
    Ok(PairBatch { rows })
}

/// `M(K^2 - K) + M(N^2 - N)/2`.
pub fn total_pair_count(m: usize, k: usize, n: usize) -> usize {
    m * (k * k - k) + m * (n * n).saturating_sub(n) / 2
}

/// Formula, brute-force enumeration and emitted counts for one `(M, K, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVerification {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub formula: usize,
    pub enumerated: usize,
    pub emitted: usize,
    pub enumerated_patch: usize,
    pub emitted_patch: usize,
    pub sets_match: bool,
}

impl PairVerification {
    pub fn ok(&self) -> bool {
        self.formula == self.enumerated && self.enumerated == self.emitted && self.sets_match
    }
}

/// Brute-force oracle: scans every row pair of a synthetic layout, collects
/// same-image view pairs across augmentations (each owed one negative) and
/// same-image patch pairs, then compares with the aggregation output.
pub fn verify_pairs(m: usize, k: usize, n: usize) -> Result<PairVerification> {
    use crate::patching::{ImageGeometry, PatchSpec};
    let g = ImageGeometry::square(64);
    let patches: Vec<Vec<PatchSpec>> = (0..m)
        .map(|i| (0..n).map(|p| PatchSpec::from_pixels(g, p % 41, (p * 7) % 41, 16, i)).collect())
        .collect();
    let layout = BatchLayout::new(m, k, &patches)?;
    let batch = aggregate(&layout)?;

    let mut positives = BTreeSet::new();
    let mut patch_pairs = BTreeSet::new();
    for r1 in 0..layout.len() {
        for r2 in r1 + 1..layout.len() {
            match (layout.tags[r1], layout.tags[r2]) {
                (
                    Provenance::ImageView {
                        image_index: i1,
                        aug_index: a1,
                    },
                    Provenance::ImageView {
                        image_index: i2,
                        aug_index: a2,
                    },
                ) if i1 == i2 && a1 != a2 => {
                    positives.insert((r1, r2));
                }
                (Provenance::Patch { image_index: i1, .. }, Provenance::Patch { image_index: i2, .. }) if i1 == i2 => {
                    patch_pairs.insert((r1, r2));
                }
                _ => {}
            }
        }
    }
    let emitted_pos: BTreeSet<_> = batch
        .rows
        .iter()
        .filter(|r| r.kind == PairKind::ImagePos)
        .map(|r| (r.left, r.right))
        .collect();
    let emitted_patch: BTreeSet<_> = batch
        .rows
        .iter()
        .filter(|r| r.kind == PairKind::Patch)
        .map(|r| (r.left, r.right))
        .collect();
    let negs_ok = batch.rows.iter().filter(|r| r.kind == PairKind::ImageNeg).all(|r| {
        let (l, rr) = (layout.tags[r.left], layout.tags[r.right]);
        matches!((l, rr), (
            Provenance::ImageView { aug_index: a1, image_index: i1 },
            Provenance::ImageView { aug_index: a2, image_index: i2 },
        ) if a1 < a2 && (m == 1 || i1 != i2))
    });
    let sets_match = emitted_pos == positives
        && emitted_patch == patch_pairs
        && batch.count(PairKind::ImageNeg) == positives.len()
        && negs_ok;
    Ok(PairVerification {
        m,
        k,
        n,
        formula: total_pair_count(m, k, n),
        enumerated: 2 * positives.len() + patch_pairs.len(),
        emitted: batch.len(),
        enumerated_patch: patch_pairs.len(),
        emitted_patch: batch.count(PairKind::Patch),
        sets_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        let v = verify_pairs(64, 4, 3).unwrap();
        assert_eq!((v.formula, v.enumerated, v.emitted, v.emitted_patch), (960, 960, 960, 192));
        assert!(v.ok());
        assert_eq!(total_pair_count(64, 4, 2), 832);
        assert_eq!(total_pair_count(4, 2, 0), 8);
        assert_eq!(verify_pairs(64, 4, 0).unwrap().emitted, 768);
    }

    #[test]
    fn single_image_wraps_onto_itself() {
        let layout = BatchLayout::images_only(1, 2);
        let rows = aggregate_image_pairs(&layout).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[1].left, rows[1].right), (0, 1));
        assert_eq!(rows[1].kind, PairKind::ImageNeg);
    }

    #[test]
    fn k_below_two_is_a_config_error() {
        assert!(matches!(aggregate_image_pairs(&BatchLayout::images_only(2, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn patch_pair_counts() {
        assert_eq!(verify_pairs(1, 2, 2).unwrap().emitted_patch, 1);
        assert_eq!(verify_pairs(3, 2, 1).unwrap().emitted_patch, 0);
    }

    #[test]
    fn negative_shift_cycles() {
        let layout = BatchLayout::images_only(4, 3);
        let rows = aggregate_image_pairs(&layout).unwrap();
        let neg: Vec<_> = rows.iter().filter(|r| r.kind == PairKind::ImageNeg).collect();
        // Augmentation pairs (0,1), (0,2), (1,2) use shifts 1, 2, 3.
        assert_eq!(neg[0].right, 4 + 1);
        assert_eq!(neg[4].right, 8 + 2);
        assert_eq!(neg[8].right, 8 + 3);
    }

    #[test]
    fn out_of_order_layout_is_rejected() {
        let mut layout = BatchLayout::images_only(2, 2);
        layout.tags.swap(0, 1);
        assert!(aggregate(&layout).is_err());
    }
}
