//! Stochastic optimizers over a [`ParamStore`], with the update rules the
//! reference deep-learning stack applies for the same settings.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ParamStore;

const EPS: f64 = 1e-7;
const RMS_RHO: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    RmsProp,
    Adam,
    Nadam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            "nadam" => Ok(OptimizerKind::Nadam),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Nadam => "nadam",
        };
        f.write_str(s)
    }
}

struct Slot {
    first: ArrayD<f64>,
    second: ArrayD<f64>,
}

pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Option<Slot>>,
    step_count: u64,
    /// Nadam momentum-schedule product.
    m_schedule: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let slots = store
            .entries()
            .map(|(_, e)| {
                e.trainable.then(|| Slot {
                    first: ArrayD::zeros(e.value.raw_dim()),
                    second: ArrayD::zeros(e.value.raw_dim()),
                })
            })
            .collect();
        Optimizer {
            kind,
            slots,
            step_count: 0,
            m_schedule: 1.0,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        // Nadam momentum schedule (Dozat): mu_t = b1 * (1 - 0.5 * 0.96^(t/250)).
        let mu_t = BETA1 * (1.0 - 0.5 * 0.96f64.powf(t * 0.004));
        let mu_next = BETA1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * 0.004));
        let m_schedule_new = self.m_schedule * mu_t;
        let m_schedule_next = m_schedule_new * mu_next;

        for (idx, slot) in self.slots.iter_mut().enumerate() {
            let Some(slot) = slot else { continue };
            let entry = store.entry_mut(idx);
            let grad = &entry.grad;
            match self.kind {
                OptimizerKind::RmsProp => {
                    azip(&mut slot.second, grad, |acc, g| {
                        *acc = RMS_RHO * *acc + (1.0 - RMS_RHO) * g * g;
                    });
                    azip3(&mut entry.value, grad, &slot.second, |p, g, acc| {
                        *p -= lr * g / (acc.sqrt() + EPS);
                    });
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - BETA1.powf(t);
                    let bc2 = 1.0 - BETA2.powf(t);
                    azip(&mut slot.first, grad, |m, g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                    });
                    azip(&mut slot.second, grad, |v, g| {
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    });
                    azip3(&mut entry.value, &slot.first, &slot.second, |p, m, v| {
                        let m_hat = m / bc1;
                        let v_hat = v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
                    });
                }
                OptimizerKind::Nadam => {
                    let bc2 = 1.0 - BETA2.powf(t);
                    azip(&mut slot.first, grad, |m, g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                    });
                    azip(&mut slot.second, grad, |v, g| {
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    });
                    let first = &slot.first;
                    let second = &slot.second;
                    let value = &mut entry.value;
                    let gslice = grad.as_slice().expect("standard layout");
                    let mslice = first.as_slice().unwrap();
                    let vslice = second.as_slice().unwrap();
                    let pslice = value.as_slice_mut().unwrap();
                    for i in 0..pslice.len() {
                        let g_prime = gslice[i] / (1.0 - m_schedule_new);
                        let m_prime = mslice[i] / (1.0 - m_schedule_next);
                        let v_prime = vslice[i] / bc2;
                        let m_bar = (1.0 - mu_t) * g_prime + mu_next * m_prime;
                        pslice[i] -= lr * m_bar / (v_prime.sqrt() + EPS);
                    }
                }
            }
        }
        if matches!(self.kind, OptimizerKind::Nadam) {
            self.m_schedule = m_schedule_new;
        }
        store.zero_grads();
    }
}

fn azip(acc: &mut ArrayD<f64>, src: &ArrayD<f64>, f: impl Fn(&mut f64, f64)) {
    let a = acc.as_slice_mut().expect("standard layout");
    let s = src.as_slice().expect("standard layout");
    for (x, &y) in a.iter_mut().zip(s) {
        f(x, y);
    }
}

fn azip3(
    out: &mut ArrayD<f64>,
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: impl Fn(&mut f64, f64, f64),
) {
    let o = out.as_slice_mut().expect("standard layout");
    let av = a.as_slice().expect("standard layout");
    let bv = b.as_slice().expect("standard layout");
    for i in 0..o.len() {
        f(&mut o[i], av[i], bv[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Minimizes (p - 3)^2 with each optimizer; all must converge.
    #[test]
    fn optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::RmsProp, OptimizerKind::Adam, OptimizerKind::Nadam] {
            let mut store = ParamStore::new();
            let id = store.add("p", ArrayD::zeros(IxDyn(&[1])), true);
            let mut opt = Optimizer::new(kind, &store);
            for _ in 0..600 {
                let p = store.value(id).as_slice().unwrap()[0];
                let g = 2.0 * (p - 3.0);
                store.entry_mut(id.0).grad.fill(g);
                opt.step(&mut store, 0.05);
            }
            let p = store.value(id).as_slice().unwrap()[0];
            assert!((p - 3.0).abs() < 0.05, "{kind} ended at {p}");
        }
    }

    #[test]
    fn non_trainable_buffers_are_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", ArrayD::zeros(IxDyn(&[2])), true);
        let buf = store.add("buf", ArrayD::ones(IxDyn(&[2])), false);
        let mut opt = Optimizer::new(OptimizerKind::Adam, &store);
        store.entry_mut(w.0).grad.fill(1.0);
        store.entry_mut(buf.0).grad.fill(1.0);
        opt.step(&mut store, 0.1);
        assert_eq!(store.value(buf).as_slice().unwrap(), &[1.0, 1.0]);
        assert_ne!(store.value(w).as_slice().unwrap(), &[0.0, 0.0]);
    }
}
