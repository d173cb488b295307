// quick manual probe: forward each model once at reduced widths
use ssp_core::archzoo::{ArchConfig, Batch, ModelHandle, ModelId};
use ssp_core::synth::smoke_corpus;
use ssp_core::nn::Tape;
use std::time::Instant;

fn main() {
    let records = smoke_corpus(2, 11);
    let refs: Vec<_> = records.iter().collect();
    for id in ModelId::ALL {
        let cfg = ArchConfig::reduced(id, 42);
        let batch = Batch::from_records(&refs, cfg.mix_decay);
        let start = Instant::now();
        let model = ModelHandle::build(cfg).unwrap();
        let built = start.elapsed();
        let start = Instant::now();
        let mut tape = Tape::inference();
        let probs = model.forward(&mut tape, &batch).unwrap();
        let fwd = start.elapsed();
        let v = tape.value(probs);
        let shape = v.shape().to_vec();
        // simplex check
        let mut worst: f64 = 0.0;
        for b in 0..shape[0] { for t in 0..shape[1] {
            let s: f64 = (0..shape[2]).map(|c| v[[b,t,c]]).sum();
            worst = worst.max((s - 1.0).abs());
        }}
        println!("{id}: shape {shape:?} worst-row-sum-err {worst:.2e} build {built:?} fwd {fwd:?} params {}", model.store.trainable_scalars());
    }
}
