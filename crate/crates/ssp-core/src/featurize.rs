//! Deterministic model-input encodings: the 46-feature residue vector,
//! bigram token streams, and directional window-mix features.

use ndarray::{Array2, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{ProteinRecord, RawLayout};
use crate::vocab::{MAX_LEN, RESIDUE_NOSEQ, RESIDUE_VOCAB_SIZE};

/// Width of the per-residue feature vector: one-hot + profile + terminal flags.
pub const FEATURE_DIM: usize = 46;
/// Bigram vocabulary size, ordered pairs over the 22-token alphabet.
pub const BIGRAM_VOCAB_SIZE: usize = RESIDUE_VOCAB_SIZE * RESIDUE_VOCAB_SIZE;
/// The bigram token carried by every fully padded pair.
pub const BIGRAM_PAD: u32 = (RESIDUE_NOSEQ * RESIDUE_VOCAB_SIZE + RESIDUE_NOSEQ) as u32;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("config error: {0}")]
    Config(String),
}

/// Batched 46-feature encoding. Columns `[0,22)` one-hot, `[22,44)` profile,
/// `[44,46)` terminal flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Array3<f32>,
    pub mask: Array2<u8>,
}

/// Batched bigram tokens, `t(i) = 22 * residues[i] + residues[i+1]`, where the
/// final real position and all padding pair with `noSeq`.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramStream {
    pub tokens: Array2<u32>,
}

/// Decayed one-hot mixtures of strictly-preceding and strictly-following
/// residues. Rows are convex combinations; empty-context rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowMixFeatures {
    pub preceding: Array3<f32>,
    pub following: Array3<f32>,
}

pub fn encode_features(records: &[ProteinRecord]) -> FeatureTensor {
    let n = records.len();
    let mut values = Array3::<f32>::zeros((n, MAX_LEN, FEATURE_DIM));
    let mut mask = Array2::<u8>::zeros((n, MAX_LEN));
    for (r, rec) in records.iter().enumerate() {
        for i in 0..MAX_LEN {
            values[(r, i, rec.residues[i] as usize)] = 1.0;
            for c in 0..RESIDUE_VOCAB_SIZE {
                values[(r, i, RESIDUE_VOCAB_SIZE + c)] = rec.profile[i * RESIDUE_VOCAB_SIZE + c];
            }
            values[(r, i, 44)] = rec.terminal_flags[i * 2] as f32;
            values[(r, i, 45)] = rec.terminal_flags[i * 2 + 1] as f32;
            mask[(r, i)] = rec.mask[i];
        }
    }
    FeatureTensor { values, mask }
}

pub fn make_bigrams(records: &[ProteinRecord]) -> BigramStream {
    let n = records.len();
    let mut tokens = Array2::<u32>::zeros((n, MAX_LEN));
    for (r, rec) in records.iter().enumerate() {
        for i in 0..MAX_LEN {
            let here = rec.residues[i] as u32;
            let next = if i + 1 < MAX_LEN {
                rec.residues[i + 1] as u32
            } else {
                RESIDUE_NOSEQ as u32
            };
            tokens[(r, i)] = here * RESIDUE_VOCAB_SIZE as u32 + next;
        }
    }
    BigramStream { tokens }
}

/// Exponentially decayed context mixtures with weight `decay^k` at distance
/// `k`, normalized to the simplex wherever the context is non-empty.
pub fn window_mix(
    records: &[ProteinRecord],
    decay: f64,
) -> Result<WindowMixFeatures, FeatureError> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(FeatureError::Config(format!(
            "window-mix decay must lie in (0, 1], got {decay}"
        )));
    }
    let n = records.len();
    let mut preceding = Array3::<f32>::zeros((n, MAX_LEN, RESIDUE_VOCAB_SIZE));
    let mut following = Array3::<f32>::zeros((n, MAX_LEN, RESIDUE_VOCAB_SIZE));
    let mut weighted = vec![0.0f64; RESIDUE_VOCAB_SIZE];
    for (r, rec) in records.iter().enumerate() {
        // Forward scan: w(i+1) = decay * (w(i) + onehot(r_i)).
        weighted.iter_mut().for_each(|v| *v = 0.0);
        let mut norm = 0.0f64;
        for i in 0..rec.length {
            if norm > 0.0 {
                for c in 0..RESIDUE_VOCAB_SIZE {
                    preceding[(r, i, c)] = (weighted[c] / norm) as f32;
                }
            }
            weighted[rec.residues[i] as usize] += 1.0;
            norm += 1.0;
            weighted.iter_mut().for_each(|v| *v *= decay);
            norm *= decay;
        }
        // Mirror scan for the following context.
        weighted.iter_mut().for_each(|v| *v = 0.0);
        norm = 0.0;
        for i in (0..rec.length).rev() {
            if norm > 0.0 {
                for c in 0..RESIDUE_VOCAB_SIZE {
                    following[(r, i, c)] = (weighted[c] / norm) as f32;
                }
            }
            weighted[rec.residues[i] as usize] += 1.0;
            norm += 1.0;
            weighted.iter_mut().for_each(|v| *v *= decay);
            norm *= decay;
        }
    }
    Ok(WindowMixFeatures {
        preceding,
        following,
    })
}

/// Cache key binding an encoding to its layout, decay and source data, for
/// content-addressed preprocessing files.
pub fn encoding_cache_key(layout: &RawLayout, decay: f64, dataset_sha256: &str) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        layout: &'a RawLayout,
        decay: f64,
        dataset_sha256: &'a str,
    }
    let bytes = serde_json::to_vec(&Key {
        layout,
        decay,
        dataset_sha256,
    })
    .expect("layout serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_sequence;
    use crate::synth::record_from_tokens;
    use crate::vocab::ResidueVocab;
    use proptest::prelude::*;

    fn rec(seq: &str) -> ProteinRecord {
        let residues: Vec<u8> = seq
            .chars()
            .map(|c| ResidueVocab::index_of(c).unwrap() as u8)
            .collect();
        let labels = vec![0u8; residues.len()];
        record_from_tokens("t", &residues, &labels)
    }

    #[test]
    fn encode_features_masks_and_onehots() {
        let records = vec![rec("ACD")];
        let ft = encode_features(&records);
        assert_eq!(ft.values.shape(), &[1, MAX_LEN, FEATURE_DIM]);
        assert_eq!(ft.mask.iter().map(|&m| m as usize).sum::<usize>(), 3);
        let mut non_pad_rows = 0;
        for i in 0..MAX_LEN {
            let onehot: Vec<f32> = (0..RESIDUE_VOCAB_SIZE).map(|c| ft.values[(0, i, c)]).collect();
            assert_eq!(onehot.iter().sum::<f32>(), 1.0);
            if onehot[RESIDUE_NOSEQ] == 0.0 {
                non_pad_rows += 1;
            }
        }
        assert_eq!(non_pad_rows, 3);
    }

    #[test]
    fn terminal_flag_columns_mark_chain_ends_only() {
        let records = vec![rec("ACDEF")];
        let ft = encode_features(&records);
        for i in 0..MAX_LEN {
            assert_eq!(ft.values[(0, i, 44)], if i == 0 { 1.0 } else { 0.0 });
            assert_eq!(ft.values[(0, i, 45)], if i == 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn bigram_hand_computed_example() {
        // "AC": tokens [22*0+1, 22*1+21] = [1, 43].
        let records = vec![rec("AC")];
        let bg = make_bigrams(&records);
        assert_eq!(bg.tokens[(0, 0)], 1);
        assert_eq!(bg.tokens[(0, 1)], 43);
        // Every padded position pairs noSeq with noSeq.
        for i in 2..MAX_LEN {
            assert_eq!(bg.tokens[(0, i)], BIGRAM_PAD);
        }
        assert_eq!(BIGRAM_PAD, 483);
    }

    #[test]
    fn window_mix_rejects_bad_decay() {
        let records = vec![rec("AC")];
        assert!(window_mix(&records, 0.0).is_err());
        assert!(window_mix(&records, 1.2).is_err());
        assert!(window_mix(&records, -0.5).is_err());
        assert!(window_mix(&records, 1.0).is_ok());
    }

    #[test]
    fn window_mix_hand_evaluated_examples() {
        // Position 0 has no preceding context.
        let wm = window_mix(&[rec("ACD")], 0.5).unwrap();
        for c in 0..RESIDUE_VOCAB_SIZE {
            assert_eq!(wm.preceding[(0, 0, c)], 0.0);
        }
        // decay = 1, "AAA", position 2: uniform average of identical one-hots.
        let wm = window_mix(&[rec("AAA")], 1.0).unwrap();
        for c in 0..RESIDUE_VOCAB_SIZE {
            let expect = if c == 0 { 1.0 } else { 0.0 };
            assert!((wm.preceding[(0, 2, c)] - expect).abs() < 1e-6);
        }
        // decay = 0.5, "AC", position 1: preceding = onehot(A), following = zeros.
        let wm = window_mix(&[rec("AC")], 0.5).unwrap();
        for c in 0..RESIDUE_VOCAB_SIZE {
            let expect = if c == 0 { 1.0 } else { 0.0 };
            assert!((wm.preceding[(0, 1, c)] - expect).abs() < 1e-6);
            assert_eq!(wm.following[(0, 1, c)], 0.0);
        }
        // Two-term check at position 2 of "ACD": weights 0.5 on C, 0.25 on A.
        let wm = window_mix(&[rec("ACD")], 0.5).unwrap();
        let a = wm.preceding[(0, 2, 0)];
        let c_ = wm.preceding[(0, 2, 1)];
        assert!((a - 1.0 / 3.0).abs() < 1e-6, "A weight {a}");
        assert!((c_ - 2.0 / 3.0).abs() < 1e-6, "C weight {c_}");
    }

    #[test]
    fn cache_key_tracks_inputs() {
        let layout = RawLayout::default();
        let k1 = encoding_cache_key(&layout, 0.5, "abc");
        let k2 = encoding_cache_key(&layout, 0.5, "abc");
        let k3 = encoding_cache_key(&layout, 0.25, "abc");
        let k4 = encoding_cache_key(&layout, 0.5, "abd");
        assert_eq!(k1, k2);
        assert_ne!(k1, k3);
        assert_ne!(k1, k4);
    }

    fn arb_tokens() -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..RESIDUE_NOSEQ as u8, 1..30)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn onehot_columns_invert_decode_sequence(tokens in arb_tokens()) {
            let record = record_from_tokens("p", &tokens, &vec![0u8; tokens.len()]);
            let ft = encode_features(std::slice::from_ref(&record));
            let decoded = decode_sequence(&record);
            for (i, ch) in decoded.chars().enumerate() {
                let col = (0..RESIDUE_VOCAB_SIZE)
                    .position(|c| ft.values[(0, i, c)] == 1.0)
                    .unwrap();
                prop_assert_eq!(ResidueVocab::symbol(col).unwrap(), ch);
            }
        }

        #[test]
        fn bigrams_are_a_bijection_on_pairs(tokens in arb_tokens()) {
            let record = record_from_tokens("p", &tokens, &vec![0u8; tokens.len()]);
            let bg = make_bigrams(std::slice::from_ref(&record));
            for i in 0..MAX_LEN {
                let t = bg.tokens[(0, i)];
                prop_assert!(t < BIGRAM_VOCAB_SIZE as u32);
                let here = (t / RESIDUE_VOCAB_SIZE as u32) as u8;
                let next = (t % RESIDUE_VOCAB_SIZE as u32) as u8;
                prop_assert_eq!(here, record.residues[i]);
                let expect_next = if i + 1 < MAX_LEN {
                    record.residues[i + 1]
                } else {
                    RESIDUE_NOSEQ as u8
                };
                prop_assert_eq!(next, expect_next);
            }
        }

        #[test]
        fn window_mix_rows_are_convex_or_zero(tokens in arb_tokens(), decay in 0.05f64..1.0) {
            let record = record_from_tokens("p", &tokens, &vec![0u8; tokens.len()]);
            let wm = window_mix(std::slice::from_ref(&record), decay).unwrap();
            for dir in [&wm.preceding, &wm.following] {
                for i in 0..MAX_LEN {
                    let row: Vec<f32> = (0..RESIDUE_VOCAB_SIZE).map(|c| dir[(0, i, c)]).collect();
                    let sum: f32 = row.iter().sum();
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((sum - 1.0).abs() < 1e-5 || sum == 0.0, "row sum {}", sum);
                    if i >= record.length {
                        prop_assert_eq!(sum, 0.0);
                    }
                }
            }
        }

        #[test]
        fn window_mix_is_causal(tokens in arb_tokens(), j in 0usize..30, decay in 0.1f64..=1.0) {
            prop_assume!(j < tokens.len());
            let labels = vec![0u8; tokens.len()];
            let base = record_from_tokens("p", &tokens, &labels);
            let mut perturbed_tokens = tokens.clone();
            perturbed_tokens[j] = (perturbed_tokens[j] + 1) % RESIDUE_NOSEQ as u8;
            let perturbed = record_from_tokens("p", &perturbed_tokens, &labels);

            let a = window_mix(std::slice::from_ref(&base), decay).unwrap();
            let b = window_mix(std::slice::from_ref(&perturbed), decay).unwrap();
            for i in 0..tokens.len() {
                let pre_same = (0..RESIDUE_VOCAB_SIZE)
                    .all(|c| a.preceding[(0, i, c)] == b.preceding[(0, i, c)]);
                let fol_same = (0..RESIDUE_VOCAB_SIZE)
                    .all(|c| a.following[(0, i, c)] == b.following[(0, i, c)]);
                if i <= j {
                    prop_assert!(pre_same, "preceding[{i}] changed by perturbing {j}");
                }
                if i >= j {
                    prop_assert!(fol_same, "following[{i}] changed by perturbing {j}");
                }
            }
        }
    }
}
