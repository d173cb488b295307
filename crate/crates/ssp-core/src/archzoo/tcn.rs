//! Model D: two bigram embeddings each concatenated with profiles feed a
//! dense branch and a stacked bidirectional-GRU branch; the merged branches
//! pass through a dense layer and a non-causal dilated-convolution residual
//! stack with dilations doubling per block.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, SoftmaxOut};
use crate::featurize::BIGRAM_VOCAB_SIZE;
use crate::nn::layers::{BiGru, Conv1d, Dense, Embedding};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::RESIDUE_VOCAB_SIZE;

struct TcnBlock {
    conv1: Conv1d,
    conv2: Conv1d,
}

/// The dilated residual stack on its own: channels are preserved, so with
/// all-zero convolution weights every block is the identity map.
pub struct TcnStack {
    blocks: Vec<TcnBlock>,
    dropout: f64,
}

impl TcnStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        blocks: usize,
        kernel: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let dilation = 1 << i;
                TcnBlock {
                    conv1: Conv1d::new(
                        store,
                        &format!("{name}.b{i}.conv1"),
                        kernel,
                        channels,
                        channels,
                        dilation,
                        rng,
                    ),
                    conv2: Conv1d::new(
                        store,
                        &format!("{name}.b{i}.conv2"),
                        kernel,
                        channels,
                        channels,
                        dilation,
                        rng,
                    ),
                }
            })
            .collect();
        TcnStack { blocks, dropout }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for block in &self.blocks {
            let c = block.conv1.forward(tape, store, h);
            let c = tape.relu(c);
            let c = tape.dropout(c, self.dropout);
            let c = block.conv2.forward(tape, store, c);
            let c = tape.relu(c);
            let c = tape.dropout(c, self.dropout);
            h = tape.add(h, c);
        }
        h
    }

    /// Positions reachable on each side of an output: two convolutions per
    /// block, each spanning `(k/2) * dilation`.
    pub fn halfwidth(blocks: usize, kernel: usize) -> usize {
        (0..blocks).map(|i| 2 * (kernel / 2) * (1 << i)).sum()
    }
}

pub(super) struct Tcn {
    embed_dense: Embedding,
    embed_rec: Embedding,
    branch_dense: Dense,
    branch_grus: Vec<BiGru>,
    merge: Dense,
    stack: TcnStack,
    out: SoftmaxOut,
    dropout: f64,
}

impl Tcn {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed_dense = Embedding::new(store, "embed_dense", BIGRAM_VOCAB_SIZE, cfg.embedding_dim, rng);
        let embed_rec = Embedding::new(store, "embed_rec", BIGRAM_VOCAB_SIZE, cfg.embedding_dim, rng);
        let input = cfg.embedding_dim + RESIDUE_VOCAB_SIZE;
        let branch_dense = Dense::new(store, "branch_dense", input, cfg.tcn_dense, rng);
        let mut branch_grus = Vec::with_capacity(cfg.tcn_gru_layers);
        let mut cin = input;
        for i in 0..cfg.tcn_gru_layers {
            branch_grus.push(BiGru::new(store, &format!("branch_gru{i}"), cin, cfg.tcn_gru_units, rng));
            cin = 2 * cfg.tcn_gru_units;
        }
        let merged = cfg.tcn_dense + 2 * cfg.tcn_gru_units;
        let merge = Dense::new(store, "merge", merged, cfg.tcn_filters, rng);
        let stack = TcnStack::new(
            store,
            "tcn",
            cfg.tcn_filters,
            cfg.tcn_blocks,
            cfg.tcn_kernel,
            cfg.dropout,
            rng,
        );
        let out = SoftmaxOut::new(store, "out", cfg.tcn_filters, rng);
        Tcn {
            embed_dense,
            embed_rec,
            branch_dense,
            branch_grus,
            merge,
            stack,
            out,
            dropout: cfg.dropout,
        }
    }

    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        inputs: &mut Vec<Var>,
    ) -> Var {
        let profile = tape.constant3(
            batch
                .features
                .slice(ndarray::s![.., .., RESIDUE_VOCAB_SIZE..2 * RESIDUE_VOCAB_SIZE])
                .to_owned(),
        );
        inputs.push(profile);

        let e1 = self.embed_dense.forward(tape, store, &batch.bigram_tokens);
        let x1 = tape.concat_last(&[e1, profile]);
        let d = self.branch_dense.forward(tape, store, x1);
        let d = tape.relu(d);
        let d = tape.dropout(d, self.dropout);

        let e2 = self.embed_rec.forward(tape, store, &batch.bigram_tokens);
        let mut r = tape.concat_last(&[e2, profile]);
        for gru in &self.branch_grus {
            r = gru.forward(tape, store, r, &batch.mask).seq;
        }

        let merged = tape.concat_last(&[d, r]);
        let m = self.merge.forward(tape, store, merged);
        let m = tape.relu(m);
        let m = tape.dropout(m, self.dropout);
        let t = self.stack.forward(tape, store, m);
        self.out.forward(tape, store, t)
    }

    pub(super) fn pad_halfwidth(&self, cfg: &ArchConfig) -> usize {
        TcnStack::halfwidth(cfg.tcn_blocks, cfg.tcn_kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    #[test]
    fn zeroed_stack_is_the_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let stack = TcnStack::new(&mut store, "t", 4, 3, 3, 0.0, &mut rng);
        for (_, idx) in (0..store.len()).enumerate() {
            store.entry_mut(idx).value.fill(0.0);
        }
        let x = Array3::from_shape_fn((2, 8, 4), |(b, t, c)| (b + t + c) as f64 * 0.1);
        let mut tape = Tape::inference();
        let xv = tape.constant3(x.clone());
        let y = stack.forward(&mut tape, &store, xv);
        assert_eq!(tape.value(y), tape.value(xv));
    }

    #[test]
    fn halfwidth_matches_dilation_sum() {
        // kernel 3, blocks at dilations 1..32: 2 * 63 taps per side.
        assert_eq!(TcnStack::halfwidth(6, 3), 126);
    }
}
