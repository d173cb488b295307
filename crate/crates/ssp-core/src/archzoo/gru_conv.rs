//! Model C: one-hot, residue embedding and profile through multi-scale
//! convolutions (kernels 3, 5, 7), a cascade of three further convolutions
//! each with ReLU, batch normalization and 0.5 dropout, then one wide
//! bidirectional GRU whose recurrent kernels carry an L2 penalty, and a
//! two-layer fully-connected head.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, Head};
use crate::nn::layers::{BatchNorm, BiGru, Conv1d, Embedding};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::RESIDUE_VOCAB_SIZE;

struct CascadeStage {
    conv: Conv1d,
    norm: BatchNorm,
}

pub(super) struct GruConv {
    embed: Embedding,
    multiscale: Vec<Conv1d>,
    cascade: Vec<CascadeStage>,
    gru: BiGru,
    head: Head,
    cascade_dropout: f64,
    recurrent_l2: f64,
}

impl GruConv {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed = Embedding::new(store, "embed", RESIDUE_VOCAB_SIZE, cfg.embedding_dim, rng);
        let input = 2 * RESIDUE_VOCAB_SIZE + cfg.embedding_dim;
        let multiscale = cfg
            .multiscale_kernels
            .iter()
            .map(|&k| {
                Conv1d::new(
                    store,
                    &format!("ms_k{k}"),
                    k,
                    input,
                    cfg.multiscale_filters,
                    1,
                    rng,
                )
            })
            .collect::<Vec<_>>();
        let mut cin = cfg.multiscale_filters * cfg.multiscale_kernels.len();
        let cascade = (0..cfg.cascade_convs)
            .map(|i| {
                let stage = CascadeStage {
                    conv: Conv1d::new(
                        store,
                        &format!("cascade{i}.conv"),
                        cfg.cascade_kernel,
                        cin,
                        cfg.cascade_filters,
                        1,
                        rng,
                    ),
                    norm: BatchNorm::new(store, &format!("cascade{i}.bn"), cfg.cascade_filters),
                };
                cin = cfg.cascade_filters;
                stage
            })
            .collect();
        let gru = BiGru::new(store, "bigru", cfg.cascade_filters, cfg.gru_conv_units, rng);
        let head = Head::new(store, "head", 2 * cfg.gru_conv_units, cfg, rng);
        GruConv {
            embed,
            multiscale,
            cascade,
            gru,
            head,
            cascade_dropout: cfg.cascade_dropout,
            recurrent_l2: cfg.recurrent_l2,
        }
    }

    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        inputs: &mut Vec<Var>,
    ) -> Var {
        let onehot = tape.constant3(
            batch
                .features
                .slice(ndarray::s![.., .., ..RESIDUE_VOCAB_SIZE])
                .to_owned(),
        );
        let profile = tape.constant3(
            batch
                .features
                .slice(ndarray::s![.., .., RESIDUE_VOCAB_SIZE..2 * RESIDUE_VOCAB_SIZE])
                .to_owned(),
        );
        inputs.push(onehot);
        inputs.push(profile);
        let emb = self.embed.forward(tape, store, &batch.residue_tokens);
        let x = tape.concat_last(&[onehot, emb, profile]);

        let scales: Vec<Var> = self
            .multiscale
            .iter()
            .map(|conv| {
                let h = conv.forward(tape, store, x);
                tape.relu(h)
            })
            .collect();
        let mut h = tape.concat_last(&scales);
        for stage in &self.cascade {
            let c = stage.conv.forward(tape, store, h);
            let c = tape.relu(c);
            let c = stage.norm.forward(tape, store, c);
            h = tape.dropout(c, self.cascade_dropout);
        }
        let rec = self.gru.forward(tape, store, h, &batch.mask);
        self.head.forward(tape, store, rec.seq)
    }

    /// L2 penalty over both directions' recurrent kernels; zero coefficient
    /// reproduces the unregularized loss exactly.
    pub(super) fn recurrent_penalty(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let wf = tape.param(store, self.gru.fw.recurrent_kernel());
        let wb = tape.param(store, self.gru.bw.recurrent_kernel());
        let sf = tape.sum_squares(wf);
        let sb = tape.sum_squares(wb);
        let total = tape.add_scalar(sf, sb);
        tape.scale(total, self.recurrent_l2)
    }

    pub(super) fn pad_halfwidth(&self, cfg: &ArchConfig) -> usize {
        let ms = cfg.multiscale_kernels.iter().map(|k| k / 2).max().unwrap_or(0);
        ms + cfg.cascade_convs * (cfg.cascade_kernel / 2)
    }
}
