//! Model B: a one-dimensional U-Net over embedded residues concatenated
//! with profiles. Convolution blocks carry batch normalization and dropout;
//! the sequence is zero-padded to a pooling-friendly length internally and
//! cropped back, so callers always see 700 positions.

use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, Batch, SoftmaxOut};
use crate::nn::layers::{BatchNorm, Conv1d, Embedding};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::{MAX_LEN, RESIDUE_VOCAB_SIZE};

pub(super) fn pad_to_multiple(len: usize, multiple: usize) -> usize {
    len.div_ceil(multiple) * multiple
}

struct ConvBlock {
    conv: Conv1d,
    norm: BatchNorm,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv1d::new(store, &format!("{name}.conv"), kernel, cin, cout, 1, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.conv.forward(tape, store, x);
        let h = self.norm.forward(tape, store, h);
        let h = tape.relu(h);
        tape.dropout(h, dropout)
    }
}

struct Level {
    a: ConvBlock,
    b: ConvBlock,
}

impl Level {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Level {
            a: ConvBlock::new(store, &format!("{name}.a"), kernel, cin, cout, rng),
            b: ConvBlock::new(store, &format!("{name}.b"), kernel, cout, cout, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.a.forward(tape, store, x, dropout);
        self.b.forward(tape, store, h, dropout)
    }
}

pub(super) struct Unet {
    embed: Embedding,
    encoder: Vec<Level>,
    bottom: Level,
    up_convs: Vec<ConvBlock>,
    decoder: Vec<Level>,
    out: SoftmaxOut,
    depth: usize,
    dropout: f64,
}

impl Unet {
    pub(super) fn new(store: &mut ParamStore, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed = Embedding::new(store, "embed", RESIDUE_VOCAB_SIZE, cfg.embedding_dim, rng);
        let input = cfg.embedding_dim + RESIDUE_VOCAB_SIZE;
        let k = cfg.unet_kernel;
        let base = cfg.unet_base_filters;
        let depth = cfg.unet_depth;

        let mut encoder = Vec::with_capacity(depth);
        let mut cin = input;
        for d in 0..depth {
            let cout = base << d;
            encoder.push(Level::new(store, &format!("enc{d}"), k, cin, cout, rng));
            cin = cout;
        }
        let bottom = Level::new(store, "bottom", k, cin, base << depth, rng);

        let mut up_convs = Vec::with_capacity(depth);
        let mut decoder = Vec::with_capacity(depth);
        for d in (0..depth).rev() {
            let skip = base << d;
            let above = base << (d + 1);
            up_convs.push(ConvBlock::new(store, &format!("up{d}"), k, above, skip, rng));
            decoder.push(Level::new(
                store,
                &format!("dec{d}"),
                k,
                2 * skip,
                skip,
                rng,
            ));
        }
        let out = SoftmaxOut::new(store, "out", base, rng);
        Unet {
            embed,
            encoder,
            bottom,
            up_convs,
            decoder,
            out,
            depth,
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
        let dropout = self.dropout;
        let emb = self.embed.forward(tape, store, &batch.residue_tokens);
        let profile = tape.constant3(
            batch
                .features
                .slice(ndarray::s![.., .., RESIDUE_VOCAB_SIZE..2 * RESIDUE_VOCAB_SIZE])
                .to_owned(),
        );
        inputs.push(profile);
        let x = tape.concat_last(&[emb, profile]);

        let t = MAX_LEN;
        let padded = pad_to_multiple(t, 1 << self.depth);
        let mut h = tape.pad_time(x, 0, padded - t);

        let mut skips = Vec::with_capacity(self.depth);
        for level in &self.encoder {
            let f = level.forward(tape, store, h, dropout);
            skips.push(f);
            h = tape.maxpool2(f);
        }
        h = self.bottom.forward(tape, store, h, dropout);
        for (i, (up, level)) in self.up_convs.iter().zip(&self.decoder).enumerate() {
            let skip = skips[self.depth - 1 - i];
            let u = tape.upsample2(h);
            let u = up.forward(tape, store, u, dropout);
            let cat = tape.concat_last(&[u, skip]);
            h = level.forward(tape, store, cat, dropout);
        }
        let cropped = tape.crop_time(h, 0, t);
        self.out.forward(tape, store, cropped)
    }
}
