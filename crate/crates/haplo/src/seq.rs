//! Mixed multimodal sequences and the attention mask compiled from them.
//!
//! The masking rule: position `i` may attend to position `j` iff `j <= i`
//! (causal, covering text and cross-image pairs) or `i` and `j` lie in the
//! same image segment (bidirectional within one image). Text-only
//! sequences therefore reduce to the standard causal mask.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// Shape-level description of one input segment, before any embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentSpec {
    /// `len` text tokens.
    Text { len: usize },
    /// One image occupying `tokens` patch embeddings.
    Image { tokens: usize },
}

impl SegmentSpec {
    pub fn text(len: usize) -> Self {
        SegmentSpec::Text { len }
    }

    pub fn image(tokens: usize) -> Self {
        SegmentSpec::Image { tokens }
    }

    pub fn len(&self) -> usize {
        match *self {
            SegmentSpec::Text { len } => len,
            SegmentSpec::Image { tokens } => tokens,
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            SegmentSpec::Text { .. } => Modality::Text,
            SegmentSpec::Image { .. } => Modality::Image,
        }
    }
}

/// Parses a compact segment layout like `t3,i4,t2,i4`.
pub fn parse_segment_spec(s: &str) -> Result<Vec<SegmentSpec>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let (kind, num) = part.split_at(1.min(part.len()));
        let len: usize = num
            .parse()
            .map_err(|_| Error::Config(format!("bad segment spec element {part:?}")))?;
        match kind {
            "t" => out.push(SegmentSpec::text(len)),
            "i" => out.push(SegmentSpec::image(len)),
            _ => return Err(Error::Config(format!("bad segment kind in {part:?}"))),
        }
    }
    Ok(out)
}

/// One contiguous segment inside an assembled sequence.
#[derive(Clone, Debug)]
pub struct Segment {
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
    /// 0-based index among image segments, left to right. None for text.
    pub image_ordinal: Option<usize>,
}

/// Ordered token stream with modality span annotations.
#[derive(Clone, Debug)]
pub struct MultiModalSequence {
    segments: Vec<Segment>,
    len: usize,
}

impl MultiModalSequence {
    /// Concatenates segments in input order, assigning image ordinals left
    /// to right. Zero-length segments are dropped.
    pub fn assemble(specs: &[SegmentSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut segments = Vec::new();
        let mut offset = 0usize;
        let mut next_image = 0usize;
        for spec in specs {
            let len = spec.len();
            if len == 0 {
                continue;
            }
            let image_ordinal = match spec.modality() {
                Modality::Image => {
                    let o = next_image;
                    next_image += 1;
                    Some(o)
                }
                Modality::Text => None,
            };
            segments.push(Segment {
                modality: spec.modality(),
                start: offset,
                end: offset + len,
                image_ordinal,
            });
            offset += len;
        }
        if offset == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(MultiModalSequence {
            segments,
            len: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_images(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.modality == Modality::Image)
            .count()
    }

    pub fn segment_of(&self, pos: usize) -> &Segment {
        self.segments
            .iter()
            .find(|s| pos >= s.start && pos < s.end)
            .expect("position inside sequence")
    }

    pub fn modality_of(&self, pos: usize) -> Modality {
        self.segment_of(pos).modality
    }

    /// Image ordinal of a position, if it lies inside an image segment.
    pub fn image_ordinal_of(&self, pos: usize) -> Option<usize> {
        self.segment_of(pos).image_ordinal
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.positions_of(Modality::Text)
    }

    pub fn image_positions(&self) -> Vec<usize> {
        self.positions_of(Modality::Image)
    }

    fn positions_of(&self, m: Modality) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.modality == m)
            .flat_map(|s| s.start..s.end)
            .collect()
    }

    /// RoPE indices: one shared arithmetic index stream across modalities.
    pub fn rope_indices(&self) -> Vec<usize> {
        (0..self.len).collect()
    }

    /// True iff `i` and `j` belong to the same image segment.
    pub fn same_image(&self, i: usize, j: usize) -> bool {
        let si = self.segment_of(i);
        si.modality == Modality::Image && j >= si.start && j < si.end
    }

    /// Compiles the mixed attention mask for this sequence.
    pub fn build_mask(&self) -> AttentionMask {
        let n = self.len;
        let mut allow = vec![false; n * n];
        for seg in &self.segments {
            for i in seg.start..seg.end {
                let row_end = match seg.modality {
                    Modality::Text => i + 1,
                    Modality::Image => seg.end.max(i + 1),
                };
                for j in 0..row_end.min(n) {
                    allow[i * n + j] = true;
                }
            }
        }
        AttentionMask { n, allow }
    }

    /// Block-descriptor form of the mask: one descriptor per segment, each
    /// covering a contiguous row range whose allowed columns are a prefix
    /// (full rectangle for image rows, per-row triangle for text rows).
    pub fn mask_blocks(&self) -> Vec<MaskBlock> {
        self.segments
            .iter()
            .map(|seg| MaskBlock {
                row_start: seg.start,
                row_end: seg.end,
                col_end: match seg.modality {
                    Modality::Text => 0, // per-row: i + 1
                    Modality::Image => seg.end,
                },
                causal_within: seg.modality == Modality::Text,
            })
            .collect()
    }
}

/// Allowed-attention rectangle for a contiguous row range. For
/// `causal_within` blocks the allowed columns of row `i` are `0..=i`;
/// otherwise they are `0..col_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBlock {
    pub row_start: usize,
    pub row_end: usize,
    pub col_end: usize,
    pub causal_within: bool,
}

impl MaskBlock {
    pub fn cols_for_row(&self, i: usize) -> std::ops::Range<usize> {
        if self.causal_within {
            0..i + 1
        } else {
            0..self.col_end
        }
    }
}

/// Dense per-layer attend/ignore matrix. `allowed(i, j)` says whether
/// position `i` may attend to position `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n + j]
    }

    /// Additive bias tensor `[n, n]`: 0 where allowed, a large negative
    /// constant (softmax-underflows to exactly 0) where masked.
    pub fn bias_tensor<E: Element>(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .allow
            .iter()
            .map(|&a| if a { E::zero() } else { E::mask_bias() })
            .collect();
        Tensor::from_vec(vec![self.n, self.n], data).expect("mask shape")
    }

    /// 0/1 grid rendering, one row per line.
    pub fn grid_string(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }
}

/// The closed-form masking predicate; kept separate from the compiled mask
/// so the two can be checked against each other.
pub fn mask_predicate(seq: &MultiModalSequence, i: usize, j: usize) -> bool {
    j <= i || seq.same_image(i, j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(specs: &[SegmentSpec]) -> MultiModalSequence {
        MultiModalSequence::assemble(specs).unwrap()
    }

    #[test]
    fn assemble_pure_text() {
        let s = seq(&[SegmentSpec::text(3)]);
        assert_eq!(s.len(), 3);
        assert!(s.text_positions() == vec![0, 1, 2]);
        assert_eq!(s.num_images(), 0);
    }

    #[test]
    fn assemble_image_then_text() {
        let s = seq(&[SegmentSpec::image(4), SegmentSpec::text(2)]);
        assert_eq!(s.len(), 6);
        for p in 0..4 {
            assert_eq!(s.image_ordinal_of(p), Some(0));
        }
        assert_eq!(s.modality_of(4), Modality::Text);
    }

    #[test]
    fn assemble_multi_image_ordinals() {
        let s = seq(&[
            SegmentSpec::text(2),
            SegmentSpec::image(4),
            SegmentSpec::text(1),
            SegmentSpec::image(4),
        ]);
        assert_eq!(s.len(), 11);
        for p in 2..6 {
            assert_eq!(s.image_ordinal_of(p), Some(0), "position {p}");
        }
        for p in 7..11 {
            assert_eq!(s.image_ordinal_of(p), Some(1), "position {p}");
        }
        assert_eq!(s.image_ordinal_of(6), None);
    }

    #[test]
    fn assemble_rejects_empty() {
        assert!(matches!(
            MultiModalSequence::assemble(&[]),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            MultiModalSequence::assemble(&[SegmentSpec::text(0)]),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn text_only_mask_is_standard_causal() {
        let s = seq(&[SegmentSpec::text(4)]);
        let m = s.build_mask();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), j <= i);
            }
        }
    }

    #[test]
    fn single_image_mask_is_all_true() {
        let s = seq(&[SegmentSpec::image(4)]);
        let m = s.build_mask();
        for i in 0..4 {
            for j in 0..4 {
                assert!(m.allowed(i, j));
            }
        }
    }

    #[test]
    fn mixed_mask_matches_exhaustive_rule() {
        // [text(1), image(2), text(1), image(2)]: all 36 pairs
        let s = seq(&[
            SegmentSpec::text(1),
            SegmentSpec::image(2),
            SegmentSpec::text(1),
            SegmentSpec::image(2),
        ]);
        let m = s.build_mask();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.allowed(i, j), mask_predicate(&s, i, j), "({i},{j})");
            }
        }
        // spot checks from the rule
        assert!(m.allowed(1, 2)); // same image, future
        assert!(!m.allowed(1, 4)); // later image
        assert!(m.allowed(5, 4)); // same second image
        assert!(m.allowed(3, 1)); // text attends past image
    }

    #[test]
    fn diagonal_always_allowed() {
        let s = seq(&[
            SegmentSpec::image(3),
            SegmentSpec::text(2),
            SegmentSpec::image(1),
        ]);
        let m = s.build_mask();
        for i in 0..s.len() {
            assert!(m.allowed(i, i));
        }
    }

    #[test]
    fn rope_indices_are_arithmetic() {
        let s = seq(&[SegmentSpec::text(5)]);
        assert_eq!(s.rope_indices(), vec![0, 1, 2, 3, 4]);
        let s = seq(&[
            SegmentSpec::image(4),
            SegmentSpec::text(3),
            SegmentSpec::image(2),
        ]);
        assert_eq!(s.rope_indices(), (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn blocks_agree_with_dense_mask() {
        let s = seq(&[
            SegmentSpec::text(2),
            SegmentSpec::image(3),
            SegmentSpec::text(2),
            SegmentSpec::image(2),
            SegmentSpec::text(1),
        ]);
        let m = s.build_mask();
        let blocks = s.mask_blocks();
        let mut covered = vec![false; s.len()];
        for b in &blocks {
            for i in b.row_start..b.row_end {
                assert!(!covered[i]);
                covered[i] = true;
                let cols = b.cols_for_row(i);
                for j in 0..s.len() {
                    assert_eq!(cols.contains(&j), m.allowed(i, j), "({i},{j})");
                }
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn appending_segments_never_changes_existing_rows() {
        let prefix = [
            SegmentSpec::text(2),
            SegmentSpec::image(3),
            SegmentSpec::text(2),
        ];
        let s1 = seq(&prefix);
        let mut extended = prefix.to_vec();
        extended.push(SegmentSpec::image(4));
        extended.push(SegmentSpec::text(3));
        let s2 = seq(&extended);
        let (m1, m2) = (s1.build_mask(), s2.build_mask());
        for i in 0..s1.len() {
            for j in 0..s1.len() {
                assert_eq!(m1.allowed(i, j), m2.allowed(i, j));
            }
            // and nothing in the prefix rows reaches appended columns
            for j in s1.len()..s2.len() {
                assert!(!m2.allowed(i, j));
            }
        }
    }

    #[test]
    fn parse_segment_spec_roundtrip() {
        let specs = parse_segment_spec("t3,i4,t2,i4").unwrap();
        assert_eq!(
            specs,
            vec![
                SegmentSpec::text(3),
                SegmentSpec::image(4),
                SegmentSpec::text(2),
                SegmentSpec::image(4),
            ]
        );
        assert!(parse_segment_spec("x3").is_err());
        assert!(parse_segment_spec("t").is_err());
    }

    proptest! {
        // random layouts with <=3 images and L<=32 against the closed form
        #[test]
        fn mask_equals_predicate_on_random_layouts(
            layout in proptest::collection::vec((0usize..=1, 1usize..=5), 1..7)
        ) {
            let mut specs = Vec::new();
            let mut images = 0;
            for (kind, len) in layout {
                if kind == 1 && images < 3 {
                    specs.push(SegmentSpec::image(len));
                    images += 1;
                } else {
                    specs.push(SegmentSpec::text(len));
                }
            }
            let s = MultiModalSequence::assemble(&specs).unwrap();
            prop_assert!(s.len() <= 32);
            let m = s.build_mask();
            for i in 0..s.len() {
                for j in 0..s.len() {
                    prop_assert_eq!(m.allowed(i, j), mask_predicate(&s, i, j));
                }
            }
        }
    }
}
