//! Central-difference verification of backpropagated gradients.
//!
//! The numerical side rebuilds the forward pass from scratch for every
//! probe, so it is independent of the tape's backward implementation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backpropagated gradients against central differences on
/// `samples` randomly chosen trainable scalars.
///
/// `build` must construct the full forward pass from the store and return
/// the tape plus the loss node; it is called once for the analytic pass and
/// twice per probe for the numerical one.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    samples: usize,
    seed: u64,
    eps: f64,
    mut build: F,
) -> Vec<GradProbe>
where
    F: FnMut(&ParamStore) -> (Tape, Var),
{
    store.zero_grads();
    let (mut tape, loss) = build(store);
    tape.backward(loss, store);

    let trainable: Vec<ParamId> = store
        .entries()
        .filter(|(_, e)| e.trainable)
        .map(|(id, _)| id)
        .collect();
    assert!(!trainable.is_empty(), "no trainable parameters to probe");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(samples);
    for _ in 0..samples {
        let id = trainable[rng.gen_range(0..trainable.len())];
        let flat = rng.gen_range(0..store.value(id).len());
        let analytic = store.flat_grad(id, flat);

        store.perturb(id, flat, eps);
        let (tape_up, loss_up) = build(store);
        let up = tape_up.scalar(loss_up);
        store.perturb(id, flat, -2.0 * eps);
        let (tape_down, loss_down) = build(store);
        let down = tape_down.scalar(loss_down);
        store.perturb(id, flat, eps);

        let numeric = (up - down) / (2.0 * eps);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        probes.push(GradProbe {
            param: store.entry(id.0).name.clone(),
            flat_index: flat,
            analytic,
            numeric,
            rel_error,
        });
    }
    probes
}
