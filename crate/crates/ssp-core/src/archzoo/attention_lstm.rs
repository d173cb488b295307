//! Model A: a bidirectional LSTM feeding a chain of four unidirectional
//! LSTMs, each seeded with its predecessor's final state, with unscaled
//! dot-product attention applied to every ordered pair of layer outputs.
//! No convolutions anywhere.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, Head};
use crate::featurize::BIGRAM_VOCAB_SIZE;
use crate::nn::layers::{BiLstm, Embedding, Lstm};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::RESIDUE_VOCAB_SIZE;

pub(super) struct AttentionLstm {
    embed: Embedding,
    bi: BiLstm,
    chain: Vec<Lstm>,
    head: Head,
}

impl AttentionLstm {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let width = 2 * cfg.attn_bi_units; // concat of both directions
        assert_eq!(
            width, cfg.attn_uni_units,
            "chained LSTM width must equal the bidirectional concat width"
        );
        let embed = Embedding::new(store, "embed", BIGRAM_VOCAB_SIZE, cfg.embedding_dim, rng);
        let input = cfg.embedding_dim + RESIDUE_VOCAB_SIZE;
        let bi = BiLstm::new(store, "bilstm", input, cfg.attn_bi_units, rng);
        let chain = (0..cfg.attn_uni_layers)
            .map(|i| Lstm::new(store, &format!("lstm{i}"), width, cfg.attn_uni_units, rng))
            .collect();
        let head = Head::new(store, "head", cfg.attn_uni_units, cfg, rng);
        AttentionLstm {
            embed,
            bi,
            chain,
            head,
        }
    }

    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        inputs: &mut Vec<Var>,
    ) -> Var {
        let emb = self.embed.forward(tape, store, &batch.bigram_tokens);
        let profile = tape.constant3(
            batch
                .features
                .slice(ndarray::s![.., .., RESIDUE_VOCAB_SIZE..2 * RESIDUE_VOCAB_SIZE])
                .to_owned(),
        );
        inputs.push(profile);
        let x = tape.concat_last(&[emb, profile]);

        let bi = self.bi.forward(tape, store, x, &batch.mask);
        let mut layer_outputs = vec![bi.seq];
        let mut state = (bi.last_h, bi.last_c.unwrap());
        let mut seq = bi.seq;
        for cell in &self.chain {
            let out = cell.forward(tape, store, seq, &batch.mask, false, Some(state));
            seq = out.seq;
            state = (out.last_h, out.last_c.unwrap());
            layer_outputs.push(seq);
        }

        // Attention over each ordered (earlier -> later) layer pair: later
        // outputs query, earlier outputs act as keys and values.
        let mut context: Option<Var> = None;
        for later in 1..layer_outputs.len() {
            for earlier in 0..later {
                let ctx = tape.attention(
                    layer_outputs[later],
                    layer_outputs[earlier],
                    layer_outputs[earlier],
                    &batch.mask,
                );
                context = Some(match context {
                    Some(acc) => tape.add(acc, ctx),
                    None => ctx,
                });
            }
        }
        let context = context.expect("at least one layer pair");
        self.head.forward(tape, store, context)
    }
}

/// 5 recurrent layers yield C(5,2) = 10 ordered pairs.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::archzoo::{ModelHandle, ModelId};

    #[test]
    fn pair_count_is_ten_for_five_layers() {
        let cfg = ArchConfig::reduced(ModelId::AttentionLstm, 1);
        let layers = cfg.attn_uni_layers + 1;
        let pairs = layers * (layers - 1) / 2;
        assert_eq!(pairs, 10);
    }

    #[test]
    fn builder_rejects_mismatched_widths() {
        let cfg = ArchConfig {
            attn_bi_units: 10,
            attn_uni_units: 21,
            ..ArchConfig::reduced(ModelId::AttentionLstm, 1)
        };
        let result = std::panic::catch_unwind(|| ModelHandle::build(cfg));
        assert!(result.is_err());
    }
}
