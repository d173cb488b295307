//! Model E: directional window-mix features, the current one-hot and the
//! profile (88 channels) pass a sparsity-removing dense layer, three
//! parallel convolutions (kernels 3, 7, 11) with batch normalization, three
//! stacked bidirectional GRUs, and a head over the GRU and convolution
//! outputs concatenated together.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, Head};
use crate::nn::layers::{BatchNorm, BiGru, Conv1d, Dense};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::RESIDUE_VOCAB_SIZE;

pub(super) struct BigruWindowMix {
    dense_in: Dense,
    convs: Vec<(Conv1d, BatchNorm)>,
    grus: Vec<BiGru>,
    head: Head,
}

impl BigruWindowMix {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = 4 * RESIDUE_VOCAB_SIZE; // pre-mix, fol-mix, one-hot, profile
        let dense_in = Dense::new(store, "dense_in", input, cfg.mix_dense, rng);
        let convs = cfg
            .mix_kernels
            .iter()
            .map(|&k| {
                (
                    Conv1d::new(store, &format!("conv_k{k}"), k, cfg.mix_dense, cfg.mix_filters, 1, rng),
                    BatchNorm::new(store, &format!("bn_k{k}"), cfg.mix_filters),
                )
            })
            .collect::<Vec<_>>();
        let conv_width = cfg.mix_filters * cfg.mix_kernels.len();
        let mut grus = Vec::with_capacity(cfg.mix_gru_layers);
        let mut cin = conv_width;
        for i in 0..cfg.mix_gru_layers {
            grus.push(BiGru::new(store, &format!("gru{i}"), cin, cfg.mix_gru_units, rng));
            cin = 2 * cfg.mix_gru_units;
        }
        let head_in = cfg.mix_gru_layers * 2 * cfg.mix_gru_units + conv_width;
        let head = Head::new(store, "head", head_in, cfg, rng);
        BigruWindowMix {
            dense_in,
            convs,
            grus,
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
        let pre = tape.constant3(batch.window_pre.clone());
        let fol = tape.constant3(batch.window_fol.clone());
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
        inputs.extend([pre, fol, onehot, profile]);
        let x = tape.concat_last(&[pre, fol, onehot, profile]);

        let h = self.dense_in.forward(tape, store, x);
        let h = tape.relu(h);
        let conv_outs: Vec<Var> = self
            .convs
            .iter()
            .map(|(conv, norm)| {
                let c = conv.forward(tape, store, h);
                norm.forward(tape, store, c)
            })
            .collect();
        let conv_cat = tape.concat_last(&conv_outs);

        let mut gru_outs = Vec::with_capacity(self.grus.len());
        let mut seq = conv_cat;
        for gru in &self.grus {
            seq = gru.forward(tape, store, seq, &batch.mask).seq;
            gru_outs.push(seq);
        }
        gru_outs.push(conv_cat);
        let merged = tape.concat_last(&gru_outs);
        self.head.forward(tape, store, merged)
    }

    pub(super) fn pad_halfwidth(&self, cfg: &ArchConfig) -> usize {
        cfg.mix_kernels.iter().map(|k| k / 2).max().unwrap_or(0)
    }
}
