//! Fixed residue and secondary-structure alphabets.
//!
//! Token order is load-bearing: every one-hot column, bigram token and
//! confusion-matrix axis across the suite indexes into these tables.

/// Number of residue tokens (20 standard + `X` + `noSeq`).
pub const RESIDUE_VOCAB_SIZE: usize = 22;
/// Number of label tokens (8 DSSP classes + `noSeq`).
pub const LABEL_VOCAB_SIZE: usize = 9;
/// Number of real (non-padding) secondary-structure classes.
pub const NUM_CLASSES: usize = 8;
/// Index of the residue padding token.
pub const RESIDUE_NOSEQ: usize = 21;
/// Index of the non-standard residue token `X`.
pub const RESIDUE_X: usize = 20;
/// Index of the label padding token.
pub const LABEL_NOSEQ: usize = 8;
/// Every protein is padded to this many positions.
pub const MAX_LEN: usize = 700;

const RESIDUE_TOKENS: [&str; RESIDUE_VOCAB_SIZE] = [
    "A", "C", "E", "D", "G", "F", "I", "H", "K", "M", "L", "N", "Q", "P", "S", "R", "T", "W",
    "V", "Y", "X", "noSeq",
];

const LABEL_TOKENS: [&str; LABEL_VOCAB_SIZE] = ["L", "B", "E", "G", "I", "H", "S", "T", "noSeq"];

/// The 22-symbol residue alphabet in container column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidueVocab;

impl ResidueVocab {
    pub fn tokens() -> &'static [&'static str; RESIDUE_VOCAB_SIZE] {
        &RESIDUE_TOKENS
    }

    /// Single-character symbol for a token index. Padding has no character.
    pub fn symbol(index: usize) -> Option<char> {
        if index < RESIDUE_NOSEQ {
            RESIDUE_TOKENS[index].chars().next()
        } else {
            None
        }
    }

    pub fn index_of(symbol: char) -> Option<usize> {
        RESIDUE_TOKENS[..RESIDUE_NOSEQ]
            .iter()
            .position(|t| t.chars().next() == Some(symbol))
    }
}

/// The 9-symbol label alphabet (8 DSSP classes + padding) in container column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelVocab;

impl LabelVocab {
    pub fn tokens() -> &'static [&'static str; LABEL_VOCAB_SIZE] {
        &LABEL_TOKENS
    }

    pub fn symbol(index: usize) -> Option<char> {
        if index < LABEL_NOSEQ {
            LABEL_TOKENS[index].chars().next()
        } else {
            None
        }
    }

    pub fn index_of(symbol: char) -> Option<usize> {
        LABEL_TOKENS[..LABEL_NOSEQ]
            .iter()
            .position(|t| t.chars().next() == Some(symbol))
    }

    /// Names of the 8 real classes, in matrix axis order.
    pub fn class_names() -> [&'static str; NUM_CLASSES] {
        ["L", "B", "E", "G", "I", "H", "S", "T"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residue_vocab_has_22_tokens_with_fixed_pads() {
        assert_eq!(ResidueVocab::tokens().len(), 22);
        assert_eq!(ResidueVocab::tokens()[RESIDUE_X], "X");
        assert_eq!(ResidueVocab::tokens()[RESIDUE_NOSEQ], "noSeq");
        assert_eq!(ResidueVocab::index_of('A'), Some(0));
        assert_eq!(ResidueVocab::index_of('C'), Some(1));
        assert_eq!(ResidueVocab::index_of('Y'), Some(19));
        assert_eq!(ResidueVocab::index_of('X'), Some(20));
        assert_eq!(ResidueVocab::symbol(RESIDUE_NOSEQ), None);
    }

    #[test]
    fn label_vocab_is_dssp_plus_pad() {
        assert_eq!(LabelVocab::tokens(), &["L", "B", "E", "G", "I", "H", "S", "T", "noSeq"]);
        assert_eq!(LabelVocab::index_of('H'), Some(5));
        assert_eq!(LabelVocab::index_of('T'), Some(7));
        assert_eq!(LabelVocab::symbol(LABEL_NOSEQ), None);
    }

    #[test]
    fn vocab_round_trips_symbols() {
        for i in 0..RESIDUE_NOSEQ {
            let c = ResidueVocab::symbol(i).unwrap();
            assert_eq!(ResidueVocab::index_of(c), Some(i));
        }
        for i in 0..LABEL_NOSEQ {
            let c = LabelVocab::symbol(i).unwrap();
            assert_eq!(LabelVocab::index_of(c), Some(i));
        }
    }
}
