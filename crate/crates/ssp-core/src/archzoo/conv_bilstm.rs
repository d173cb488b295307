//! Model F: skip connections around two rounds of paired convolutions
//! (kernels 11 and 7, then 5 and 3), each round concatenated with what came
//! before, closed by a bidirectional LSTM and a position-wise softmax.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, SoftmaxOut};
use crate::featurize::FEATURE_DIM;
use crate::nn::layers::{BiLstm, Conv1d};
use crate::nn::{ParamStore, Tape, Var};

pub(super) struct ConvBilstm {
    first: Vec<Conv1d>,
    second: Vec<Conv1d>,
    lstm: BiLstm,
    out: SoftmaxOut,
}

impl ConvBilstm {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = FEATURE_DIM;
        let first: Vec<Conv1d> = cfg
            .skip_kernels_first
            .iter()
            .map(|&k| Conv1d::new(store, &format!("first_k{k}"), k, input, cfg.skip_filters, 1, rng))
            .collect();
        let cat1 = input + cfg.skip_filters * first.len();
        let second: Vec<Conv1d> = cfg
            .skip_kernels_second
            .iter()
            .map(|&k| Conv1d::new(store, &format!("second_k{k}"), k, cat1, cfg.skip_filters, 1, rng))
            .collect();
        let cat2 = cat1 + cfg.skip_filters * second.len();
        let lstm = BiLstm::new(store, "bilstm", cat2, cfg.bilstm_units_per_dir, rng);
        let out = SoftmaxOut::new(store, "out", 2 * cfg.bilstm_units_per_dir, rng);
        ConvBilstm {
            first,
            second,
            lstm,
            out,
        }
    }

    pub(super) fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        inputs: &mut Vec<Var>,
    ) -> Var {
        let x = tape.constant3(batch.features.clone());
        inputs.push(x);

        let mut parts = vec![x];
        for conv in &self.first {
            let c = conv.forward(tape, store, x);
            parts.push(tape.relu(c));
        }
        let cat1 = tape.concat_last(&parts);

        let mut parts2 = vec![cat1];
        for conv in &self.second {
            let c = conv.forward(tape, store, cat1);
            parts2.push(tape.relu(c));
        }
        let cat2 = tape.concat_last(&parts2);

        let rec = self.lstm.forward(tape, store, cat2, &batch.mask);
        self.out.forward(tape, store, rec.seq)
    }

    pub(super) fn pad_halfwidth(&self, cfg: &ArchConfig) -> usize {
        let first = cfg.skip_kernels_first.iter().map(|k| k / 2).max().unwrap_or(0);
        let second = cfg.skip_kernels_second.iter().map(|k| k / 2).max().unwrap_or(0);
        first + second
    }
}
