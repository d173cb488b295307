//! The model zoo: six sequence-labeling architectures mapping encoded
//! residues to per-position 9-class probability distributions.
//!
//! Every model shares one contract: given a batch over 700 padded positions
//! it emits `(B, 700, 9)` probabilities with simplex rows, is deterministic
//! in inference mode, and never lets padding content influence real
//! positions through a recurrence (convolutions leak only within their
//! receptive field; see `conv_pad_halfwidth`).

mod attention_lstm;
mod bigru_mix;
mod conv_bilstm;
mod gru_conv;
mod tcn;
mod unet;

pub use tcn::TcnStack;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ProteinRecord;
use crate::featurize::{encode_features, make_bigrams, window_mix, FEATURE_DIM};
use crate::nn::{ParamStore, Tape, Var};
use crate::vocab::{LABEL_VOCAB_SIZE, MAX_LEN, RESIDUE_VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("model config error: {0}")]
    Config(String),
}

/// The six architectures, keyed by their single-letter ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    /// A: bidirectional-plus-chained LSTMs with pairwise attention, no convolutions.
    AttentionLstm,
    /// B: one-dimensional U-Net over embedded residues and profiles.
    Unet,
    /// C: multi-scale convolutions cascading into a wide bidirectional GRU.
    GruConv,
    /// D: bigram embeddings, recurrent and dense branches, dilated residual stack.
    Tcn,
    /// E: window-mix features through parallel convolutions and stacked GRUs.
    BigruWindowMix,
    /// F: skip-concatenated convolution pairs into a bidirectional LSTM.
    ConvBilstm,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::AttentionLstm,
        ModelId::Unet,
        ModelId::GruConv,
        ModelId::Tcn,
        ModelId::BigruWindowMix,
        ModelId::ConvBilstm,
    ];

    pub fn letter(&self) -> char {
        match self {
            ModelId::AttentionLstm => 'A',
            ModelId::Unet => 'B',
            ModelId::GruConv => 'C',
            ModelId::Tcn => 'D',
            ModelId::BigruWindowMix => 'E',
            ModelId::ConvBilstm => 'F',
        }
    }

    pub fn slug(&self) -> &'static str {
        match self {
            ModelId::AttentionLstm => "attention-lstm",
            ModelId::Unet => "unet",
            ModelId::GruConv => "gru-conv",
            ModelId::Tcn => "tcn",
            ModelId::BigruWindowMix => "bigru-windowmix",
            ModelId::ConvBilstm => "conv-bilstm",
        }
    }
}

impl std::str::FromStr for ModelId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "attention-lstm" => Ok(ModelId::AttentionLstm),
            "b" | "unet" => Ok(ModelId::Unet),
            "c" | "gru-conv" => Ok(ModelId::GruConv),
            "d" | "tcn" => Ok(ModelId::Tcn),
            "e" | "bigru-windowmix" => Ok(ModelId::BigruWindowMix),
            "f" | "conv-bilstm" => Ok(ModelId::ConvBilstm),
            other => Err(format!(
                "unknown model '{other}' (expected A-F or a model slug)"
            )),
        }
    }
}

impl std::fmt::Display for ModelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.letter(), self.slug())
    }
}

/// Structural constants for one architecture. Defaults are the published
/// values where stated; the remainder are declared here and recorded in
/// every run manifest via [`ArchConfig::departures`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub model_id: ModelId,
    pub embedding_dim: usize,
    /// Default dropout wherever a rate is not individually stated.
    pub dropout: f64,
    pub seed: u64,

    // A: attention LSTM.
    pub attn_bi_units: usize,
    pub attn_uni_units: usize,
    pub attn_uni_layers: usize,

    // B: U-Net.
    pub unet_depth: usize,
    pub unet_base_filters: usize,
    pub unet_kernel: usize,

    // C: GRU over cascading convolutions.
    pub multiscale_kernels: Vec<usize>,
    pub multiscale_filters: usize,
    pub cascade_convs: usize,
    pub cascade_kernel: usize,
    pub cascade_filters: usize,
    pub cascade_dropout: f64,
    pub gru_conv_units: usize,
    pub recurrent_l2: f64,

    // D: TCN.
    pub tcn_blocks: usize,
    pub tcn_kernel: usize,
    pub tcn_filters: usize,
    pub tcn_dense: usize,
    pub tcn_gru_units: usize,
    pub tcn_gru_layers: usize,

    // E: window-mix GRUs.
    pub mix_dense: usize,
    pub mix_kernels: Vec<usize>,
    pub mix_filters: usize,
    pub mix_gru_units: usize,
    pub mix_gru_layers: usize,
    pub mix_decay: f64,

    // F: skip-concatenated convolutions.
    pub skip_kernels_first: Vec<usize>,
    pub skip_kernels_second: Vec<usize>,
    pub skip_filters: usize,
    pub bilstm_units_per_dir: usize,

    // Shared fully-connected head where a model uses one.
    pub fc1: usize,
    pub fc2: usize,
}

impl ArchConfig {
    /// The published structural constants for one model.
    pub fn paper(model_id: ModelId, seed: u64) -> Self {
        ArchConfig {
            model_id,
            embedding_dim: 128,
            dropout: 0.4,
            seed,
            attn_bi_units: 75,
            attn_uni_units: 150,
            attn_uni_layers: 4,
            unet_depth: 4,
            unet_base_filters: 64,
            unet_kernel: 3,
            multiscale_kernels: vec![3, 5, 7],
            multiscale_filters: 64,
            cascade_convs: 3,
            cascade_kernel: 3,
            cascade_filters: 64,
            cascade_dropout: 0.5,
            gru_conv_units: 256,
            recurrent_l2: 1e-4,
            tcn_blocks: 6,
            tcn_kernel: 3,
            tcn_filters: 128,
            tcn_dense: 128,
            tcn_gru_units: 64,
            tcn_gru_layers: 2,
            mix_dense: 128,
            mix_kernels: vec![3, 7, 11],
            mix_filters: 64,
            mix_gru_units: 32,
            mix_gru_layers: 3,
            mix_decay: 0.5,
            skip_kernels_first: vec![11, 7],
            skip_kernels_second: vec![5, 3],
            skip_filters: 64,
            bilstm_units_per_dir: 64,
            fc1: 128,
            fc2: 64,
        }
    }

    /// Desk-scale widths for CPU smoke runs; kernel sizes, depths and layer
    /// counts stay structural, only unit counts shrink.
    pub fn reduced(model_id: ModelId, seed: u64) -> Self {
        ArchConfig {
            embedding_dim: 16,
            attn_bi_units: 6,
            attn_uni_units: 12,
            unet_base_filters: 8,
            multiscale_filters: 12,
            cascade_filters: 12,
            gru_conv_units: 24,
            tcn_filters: 24,
            tcn_dense: 24,
            tcn_gru_units: 12,
            mix_dense: 32,
            mix_filters: 12,
            mix_gru_units: 10,
            skip_filters: 12,
            bilstm_units_per_dir: 16,
            fc1: 32,
            fc2: 16,
            ..ArchConfig::paper(model_id, seed)
        }
    }

    /// Field-by-field differences from the published defaults, for manifests.
    pub fn departures(&self) -> Vec<String> {
        let baseline = ArchConfig::paper(self.model_id, self.seed);
        let this = serde_json::to_value(self).expect("config serializes");
        let base = serde_json::to_value(&baseline).expect("config serializes");
        let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (this, base) else {
            unreachable!("configs serialize to objects");
        };
        a.into_iter()
            .filter_map(|(key, val)| {
                let bv = &b[&key];
                (&val != bv).then(|| format!("{key}: {val} (default {bv})"))
            })
            .collect()
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.mix_decay > 0.0 && self.mix_decay <= 1.0) {
            return Err(ModelError::Config(format!(
                "window-mix decay {} outside (0, 1]",
                self.mix_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.cascade_dropout) {
            return Err(ModelError::Config("dropout rates must lie in [0, 1)".into()));
        }
        if self.unet_depth == 0 || self.unet_depth > 6 {
            return Err(ModelError::Config("u-net depth must be in [1, 6]".into()));
        }
        Ok(())
    }
}

/// Which encoding families a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSignature {
    pub feature_tensor: bool,
    pub bigram_stream: bool,
    pub window_mix: bool,
}

/// One batch of encoded records, ready for any model in the zoo.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 700, 46)`: one-hot, profile, terminal flags.
    pub features: Array3<f64>,
    /// `(B, 700)` residue token ids for embedding layers.
    pub residue_tokens: Array2<usize>,
    /// `(B, 700)` bigram token ids.
    pub bigram_tokens: Array2<usize>,
    /// `(B, 700, 22)` decayed one-hot mix of preceding residues.
    pub window_pre: Array3<f64>,
    /// `(B, 700, 22)` decayed one-hot mix of following residues.
    pub window_fol: Array3<f64>,
    /// `(B, 700)` 1.0 at real positions.
    pub mask: Array2<f64>,
    /// `(B, 700)` label ids, `LABEL_NOSEQ` at padding.
    pub labels: Array2<usize>,
}

impl Batch {
    pub fn from_records(records: &[&ProteinRecord], mix_decay: f64) -> Batch {
        let owned: Vec<ProteinRecord> = records.iter().map(|r| (*r).clone()).collect();
        let ft = encode_features(&owned);
        let bg = make_bigrams(&owned);
        let wm = window_mix(&owned, mix_decay).expect("decay validated by ArchConfig");
        let b = owned.len();
        let features = ft.values.mapv(|v| v as f64);
        let mask = Array2::from_shape_fn((b, MAX_LEN), |(r, t)| ft.mask[(r, t)] as f64);
        let residue_tokens =
            Array2::from_shape_fn((b, MAX_LEN), |(r, t)| owned[r].residues[t] as usize);
        let bigram_tokens =
            Array2::from_shape_fn((b, MAX_LEN), |(r, t)| bg.tokens[(r, t)] as usize);
        let labels = Array2::from_shape_fn((b, MAX_LEN), |(r, t)| owned[r].labels[t] as usize);
        Batch {
            features,
            residue_tokens,
            bigram_tokens,
            window_pre: wm.preceding.mapv(|v| v as f64),
            window_fol: wm.following.mapv(|v| v as f64),
            mask,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), ModelError> {
        let b = self.len();
        let t = self.features.shape()[1];
        if self.features.shape() != [b, t, FEATURE_DIM] {
            return Err(ModelError::Shape(format!(
                "features shape {:?} does not match (B, {t}, {FEATURE_DIM})",
                self.features.shape()
            )));
        }
        for (name, shape) in [
            ("residue_tokens", self.residue_tokens.shape()),
            ("bigram_tokens", self.bigram_tokens.shape()),
            ("mask", self.mask.shape()),
            ("labels", self.labels.shape()),
        ] {
            if shape != [b, t] {
                return Err(ModelError::Shape(format!(
                    "{name} shape {shape:?} does not match features batch ({b}, {t})"
                )));
            }
        }
        for (name, shape) in [
            ("window_pre", self.window_pre.shape()),
            ("window_fol", self.window_fol.shape()),
        ] {
            if shape != [b, t, RESIDUE_VOCAB_SIZE] {
                return Err(ModelError::Shape(format!(
                    "{name} shape {shape:?} does not match ({b}, {t}, {RESIDUE_VOCAB_SIZE})"
                )));
            }
        }
        Ok(())
    }
}

enum Arch {
    A(attention_lstm::AttentionLstm),
    B(unet::Unet),
    C(gru_conv::GruConv),
    D(tcn::Tcn),
    E(bigru_mix::BigruWindowMix),
    F(conv_bilstm::ConvBilstm),
}

/// A constructed model: its parameters plus the graph builder.
pub struct ModelHandle {
    pub config: ArchConfig,
    pub store: ParamStore,
    arch: Arch,
}

impl ModelHandle {
    pub fn build(config: ArchConfig) -> Result<ModelHandle, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let arch = match config.model_id {
            ModelId::AttentionLstm => Arch::A(attention_lstm::AttentionLstm::new(
                &mut store, &config, &mut rng,
            )),
            ModelId::Unet => Arch::B(unet::Unet::new(&mut store, &config, &mut rng)),
            ModelId::GruConv => Arch::C(gru_conv::GruConv::new(&mut store, &config, &mut rng)),
            ModelId::Tcn => Arch::D(tcn::Tcn::new(&mut store, &config, &mut rng)),
            ModelId::BigruWindowMix => Arch::E(bigru_mix::BigruWindowMix::new(
                &mut store, &config, &mut rng,
            )),
            ModelId::ConvBilstm => Arch::F(conv_bilstm::ConvBilstm::new(
                &mut store, &config, &mut rng,
            )),
        };
        Ok(ModelHandle {
            config,
            store,
            arch,
        })
    }

    pub fn input_signature(&self) -> InputSignature {
        match self.arch {
            Arch::A(_) => InputSignature {
                feature_tensor: true,
                bigram_stream: true,
                window_mix: false,
            },
            Arch::B(_) | Arch::C(_) | Arch::F(_) => InputSignature {
                feature_tensor: true,
                bigram_stream: false,
                window_mix: false,
            },
            Arch::D(_) => InputSignature {
                feature_tensor: true,
                bigram_stream: true,
                window_mix: false,
            },
            Arch::E(_) => InputSignature {
                feature_tensor: true,
                bigram_stream: false,
                window_mix: true,
            },
        }
    }

    /// Builds the forward graph onto `tape`, returning `(B, T, 9)`
    /// probabilities. `inputs` collects the constant nodes fed into the
    /// graph so probes can differentiate with respect to them.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        inputs: &mut Vec<Var>,
    ) -> Result<Var, ModelError> {
        batch.validate()?;
        let probs = match &self.arch {
            Arch::A(m) => m.forward(tape, &self.store, batch, inputs),
            Arch::B(m) => m.forward(tape, &self.store, batch, inputs),
            Arch::C(m) => m.forward(tape, &self.store, batch, inputs),
            Arch::D(m) => m.forward(tape, &self.store, batch, inputs),
            Arch::E(m) => m.forward(tape, &self.store, batch, inputs),
            Arch::F(m) => m.forward(tape, &self.store, batch, inputs),
        };
        let shape = tape.value(probs).shape().to_vec();
        debug_assert_eq!(shape, vec![batch.len(), MAX_LEN, LABEL_VOCAB_SIZE]);
        Ok(probs)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var, ModelError> {
        let mut inputs = Vec::new();
        self.forward_traced(tape, batch, &mut inputs)
    }

    /// Model-specific additive loss penalty (the recurrent L2 of model C).
    pub fn penalty(&self, tape: &mut Tape) -> Option<Var> {
        match &self.arch {
            Arch::C(m) => Some(m.recurrent_penalty(tape, &self.store)),
            _ => None,
        }
    }

    /// Inference-mode probabilities as an `(B, 700, 9)` f32 tensor.
    pub fn predict(&self, batch: &Batch) -> Result<Array3<f32>, ModelError> {
        let mut tape = Tape::inference();
        let probs = self.forward(&mut tape, batch)?;
        let v = tape
            .value(probs)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("probs are 3-d");
        Ok(v.mapv(|x| x as f32))
    }

    /// Runs inference over a record list in fixed-size batches.
    pub fn predict_dataset(
        &self,
        records: &[ProteinRecord],
        batch_size: usize,
    ) -> Result<Array3<f32>, ModelError> {
        assert!(batch_size > 0);
        let mut out = Array3::<f32>::zeros((records.len(), MAX_LEN, LABEL_VOCAB_SIZE));
        for (chunk_idx, chunk) in records.chunks(batch_size).enumerate() {
            let refs: Vec<&ProteinRecord> = chunk.iter().collect();
            let batch = Batch::from_records(&refs, self.config.mix_decay);
            let probs = self.predict(&batch)?;
            let start = chunk_idx * batch_size;
            out.slice_mut(ndarray::s![start..start + chunk.len(), .., ..])
                .assign(&probs);
        }
        Ok(out)
    }

    /// Library-agnostic structural identity: every named tensor and its shape.
    pub fn layer_list(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .entries()
            .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec()))
            .collect()
    }

    /// Half-width of the widest convolutional path from padding into real
    /// positions. Recurrences are mask-gated so convolutions are the only
    /// way padding content can reach a real position.
    pub fn conv_pad_halfwidth(&self) -> usize {
        let cfg = &self.config;
        match &self.arch {
            Arch::A(_) => 0,
            Arch::B(_) => {
                // Each level-d convolution spans (k/2) * 2^d positions; the
                // pad/crop to a pooling-friendly length adds its shift.
                let k_half = cfg.unet_kernel / 2;
                let enc: usize = (0..cfg.unet_depth).map(|d| 2 * k_half << d).sum();
                let bottom = 2 * k_half << cfg.unet_depth;
                let dec: usize = (0..cfg.unet_depth).map(|d| 3 * k_half << d).sum();
                let align = unet::pad_to_multiple(MAX_LEN, 1 << cfg.unet_depth) - MAX_LEN;
                enc + bottom + dec + align
            }
            Arch::C(m) => m.pad_halfwidth(cfg),
            Arch::D(m) => m.pad_halfwidth(cfg),
            Arch::E(m) => m.pad_halfwidth(cfg),
            Arch::F(m) => m.pad_halfwidth(cfg),
        }
    }
}

/// Builds model A; the config's `model_id` must agree.
pub fn build_attention_lstm(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::AttentionLstm)?;
    ModelHandle::build(cfg)
}

pub fn build_unet(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::Unet)?;
    ModelHandle::build(cfg)
}

pub fn build_gru_conv(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::GruConv)?;
    ModelHandle::build(cfg)
}

pub fn build_tcn(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::Tcn)?;
    ModelHandle::build(cfg)
}

pub fn build_bigru_windowmix(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::BigruWindowMix)?;
    ModelHandle::build(cfg)
}

pub fn build_conv_bilstm(cfg: ArchConfig) -> Result<ModelHandle, ModelError> {
    expect_id(&cfg, ModelId::ConvBilstm)?;
    ModelHandle::build(cfg)
}

fn expect_id(cfg: &ArchConfig, want: ModelId) -> Result<(), ModelError> {
    if cfg.model_id != want {
        return Err(ModelError::Config(format!(
            "builder for {want} got a config for {}",
            cfg.model_id
        )));
    }
    Ok(())
}

/// Shared fully-connected classification head: fc1-relu, fc2-relu, softmax.
struct Head {
    fc1: crate::nn::layers::Dense,
    fc2: crate::nn::layers::Dense,
    out: crate::nn::layers::Dense,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, input: usize, cfg: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        use crate::nn::layers::Dense;
        Head {
            fc1: Dense::new(store, &format!("{name}.fc1"), input, cfg.fc1, rng),
            fc2: Dense::new(store, &format!("{name}.fc2"), cfg.fc1, cfg.fc2, rng),
            out: Dense::new(store, &format!("{name}.out"), cfg.fc2, LABEL_VOCAB_SIZE, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, store, h);
        let h = tape.relu(h);
        let logits = self.out.forward(tape, store, h);
        tape.softmax_last(logits)
    }
}

/// Direct softmax output layer for models without a stated head.
struct SoftmaxOut {
    out: crate::nn::layers::Dense,
}

impl SoftmaxOut {
    fn new(store: &mut ParamStore, name: &str, input: usize, rng: &mut ChaCha8Rng) -> Self {
        SoftmaxOut {
            out: crate::nn::layers::Dense::new(store, name, input, LABEL_VOCAB_SIZE, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let logits = self.out.forward(tape, store, x);
        tape.softmax_last(logits)
    }
}
