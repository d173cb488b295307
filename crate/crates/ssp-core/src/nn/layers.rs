//! Layer building blocks over the tape: affine maps, convolutions,
//! embeddings, batch normalization, and masked recurrent cells.
//!
//! Recurrent cells gate their state with the batch mask so padded positions
//! carry the previous state through unchanged; content written into padding
//! can then never reach a real position through the recurrence.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};

/// Glorot-uniform kernel init, the Keras default for dense and conv kernels.
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            glorot(rng, &[fan_in, fan_out], fan_in, fan_out),
            true,
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])), true);
        Dense { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul_last(x, w);
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            glorot(rng, &[kernel, cin, cout], kernel * cin, cout),
            true,
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])), true);
        Conv1d { w, b, dilation }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b, self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let table = store.add(&format!("{name}.table"), uniform(rng, &[vocab, dim], 0.05), true);
        Embedding { table }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &Array2<usize>) -> Var {
        tape.embedding(store, self.table, tokens)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])), true),
            beta: store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])), true),
            running_mean: store.add(
                &format!("{name}.running_mean"),
                ArrayD::zeros(IxDyn(&[channels])),
                false,
            ),
            running_var: store.add(
                &format!("{name}.running_var"),
                ArrayD::ones(IxDyn(&[channels])),
                false,
            ),
            momentum: 0.99,
            eps: 1e-3,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        tape.batch_norm(
            store,
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.momentum,
            self.eps,
        )
    }
}

/// Sequence output plus final states of one recurrent direction.
pub struct RecurrentOut {
    pub seq: Var,
    pub last_h: Var,
    pub last_c: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = store.add(
            &format!("{name}.wx"),
            glorot(rng, &[input, 4 * hidden], input, 4 * hidden),
            true,
        );
        let wh = store.add(
            &format!("{name}.wh"),
            glorot(rng, &[hidden, 4 * hidden], hidden, 4 * hidden),
            true,
        );
        // Unit forget-gate bias.
        let mut bias = Array1::<f64>::zeros(4 * hidden);
        bias.slice_mut(ndarray::s![hidden..2 * hidden]).fill(1.0);
        let b = store.add(&format!("{name}.b"), bias.into_dyn(), true);
        Lstm { wx, wh, b, hidden }
    }

    /// Runs the cell over `(B, T, Cin)`, in reverse time when asked.
    /// `init` supplies `(h0, c0)`; zeros otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Array2<f64>,
        reverse: bool,
        init: Option<(Var, Var)>,
    ) -> RecurrentOut {
        let h = self.hidden;
        let (batch, steps) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let b = tape.param(store, self.b);
        let xp = tape.matmul_last(x, wx);
        let xp = tape.add_bias(xp, b);

        let (mut hv, mut cv) = match init {
            Some((h0, c0)) => (h0, c0),
            None => {
                let z = tape.constant(ArrayD::zeros(IxDyn(&[batch, h])));
                (z, z)
            }
        };
        let mut outputs = vec![hv; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_time(xp, t);
            let hp = tape.matmul_last(hv, wh);
            let gates = tape.add(xt, hp);
            let i_g = tape.slice_last(gates, 0, h);
            let f_g = tape.slice_last(gates, h, h);
            let g_g = tape.slice_last(gates, 2 * h, h);
            let o_g = tape.slice_last(gates, 3 * h, h);
            let i_g = tape.sigmoid(i_g);
            let f_g = tape.sigmoid(f_g);
            let g_g = tape.tanh(g_g);
            let o_g = tape.sigmoid(o_g);
            let fc = tape.mul(f_g, cv);
            let ig = tape.mul(i_g, g_g);
            let c_new = tape.add(fc, ig);
            let c_act = tape.tanh(c_new);
            let h_new = tape.mul(o_g, c_act);
            let mcol = mask.column(t).to_owned();
            cv = tape.mask_mix(c_new, cv, &mcol);
            hv = tape.mask_mix(h_new, hv, &mcol);
            outputs[t] = hv;
        }
        let seq = tape.stack_time(&outputs);
        RecurrentOut {
            seq,
            last_h: hv,
            last_c: Some(cv),
        }
    }
}

/// Gated recurrent unit in the reset-after form used by fused GPU kernels:
/// the reset gate scales the already-projected recurrent term.
#[derive(Debug, Clone)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Gru {
            wx: store.add(
                &format!("{name}.wx"),
                glorot(rng, &[input, 3 * hidden], input, 3 * hidden),
                true,
            ),
            wh: store.add(
                &format!("{name}.wh"),
                glorot(rng, &[hidden, 3 * hidden], hidden, 3 * hidden),
                true,
            ),
            bx: store.add(&format!("{name}.bx"), ArrayD::zeros(IxDyn(&[3 * hidden])), true),
            bh: store.add(&format!("{name}.bh"), ArrayD::zeros(IxDyn(&[3 * hidden])), true),
            hidden,
        }
    }

    /// Recurrent kernel, the target of the recurrent L2 penalty.
    pub fn recurrent_kernel(&self) -> ParamId {
        self.wh
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: &Array2<f64>,
        reverse: bool,
        init: Option<Var>,
    ) -> RecurrentOut {
        let h = self.hidden;
        let (batch, steps) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
        let wx = tape.param(store, self.wx);
        let wh = tape.param(store, self.wh);
        let bx = tape.param(store, self.bx);
        let bh = tape.param(store, self.bh);
        let xp = tape.matmul_last(x, wx);
        let xp = tape.add_bias(xp, bx);

        let mut hv = match init {
            Some(h0) => h0,
            None => tape.constant(ArrayD::zeros(IxDyn(&[batch, h]))),
        };
        let ones = tape.constant(ArrayD::ones(IxDyn(&[batch, h])));
        let mut outputs = vec![hv; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_time(xp, t);
            let hp = tape.matmul_last(hv, wh);
            let hp = tape.add_bias(hp, bh);
            let xz = tape.slice_last(xt, 0, h);
            let xr = tape.slice_last(xt, h, h);
            let xn = tape.slice_last(xt, 2 * h, h);
            let hz = tape.slice_last(hp, 0, h);
            let hr = tape.slice_last(hp, h, h);
            let hn = tape.slice_last(hp, 2 * h, h);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, hn);
            let n = tape.add(xn, rh);
            let n = tape.tanh(n);
            // h' = (1 - z) .* n + z .* h
            let neg_z = tape.scale(z, -1.0);
            let one_minus_z = tape.add(ones, neg_z);
            let zn = tape.mul(one_minus_z, n);
            let zh = tape.mul(z, hv);
            let h_new = tape.add(zn, zh);
            let mcol = mask.column(t).to_owned();
            hv = tape.mask_mix(h_new, hv, &mcol);
            outputs[t] = hv;
        }
        let seq = tape.stack_time(&outputs);
        RecurrentOut {
            seq,
            last_h: hv,
            last_c: None,
        }
    }
}

/// Both directions of an LSTM with concatenated outputs and final states.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fw: Lstm,
    pub bw: Lstm,
}

pub struct BiOut {
    pub seq: Var,
    pub last_h: Var,
    pub last_c: Option<Var>,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden_per_dir: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiLstm {
            fw: Lstm::new(store, &format!("{name}.fw"), input, hidden_per_dir, rng),
            bw: Lstm::new(store, &format!("{name}.bw"), input, hidden_per_dir, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &Array2<f64>) -> BiOut {
        let f = self.fw.forward(tape, store, x, mask, false, None);
        let b = self.bw.forward(tape, store, x, mask, true, None);
        let seq = tape.concat_last(&[f.seq, b.seq]);
        let last_h = tape.concat_last(&[f.last_h, b.last_h]);
        let last_c = tape.concat_last(&[f.last_c.unwrap(), b.last_c.unwrap()]);
        BiOut {
            seq,
            last_h,
            last_c: Some(last_c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiGru {
    pub fw: Gru,
    pub bw: Gru,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden_per_dir: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiGru {
            fw: Gru::new(store, &format!("{name}.fw"), input, hidden_per_dir, rng),
            bw: Gru::new(store, &format!("{name}.bw"), input, hidden_per_dir, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mask: &Array2<f64>) -> BiOut {
        let f = self.fw.forward(tape, store, x, mask, false, None);
        let b = self.bw.forward(tape, store, x, mask, true, None);
        let seq = tape.concat_last(&[f.seq, b.seq]);
        let last_h = tape.concat_last(&[f.last_h, b.last_h]);
        BiOut {
            seq,
            last_h,
            last_c: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn run_lstm(mask: &Array2<f64>, x: &Array3<f64>, reverse: bool) -> (ArrayD<f64>, ArrayD<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cell = Lstm::new(&mut store, "l", 2, 3, &mut rng);
        let mut tape = Tape::inference();
        let xv = tape.constant3(x.clone());
        let out = cell.forward(&mut tape, &store, xv, mask, reverse, None);
        (
            tape.value(out.seq).clone(),
            tape.value(out.last_h).clone(),
        )
    }

    #[test]
    fn masked_lstm_freezes_state_over_padding() {
        // Two real steps then two padded ones; the padded input content is
        // garbage and must not reach the state.
        let mask = ndarray::arr2(&[[1.0, 1.0, 0.0, 0.0]]);
        let mut x = Array3::from_elem((1, 4, 2), 0.3);
        x.slice_mut(ndarray::s![.., 2.., ..]).fill(9.9);
        let (seq_a, last_a) = run_lstm(&mask, &x, false);
        x.slice_mut(ndarray::s![.., 2.., ..]).fill(-7.7);
        let (seq_b, last_b) = run_lstm(&mask, &x, false);
        assert_eq!(last_a, last_b);
        // Sequence outputs at real positions match too.
        for t in 0..2 {
            for c in 0..3 {
                assert_eq!(seq_a[[0, t, c]], seq_b[[0, t, c]]);
            }
        }
        // And the frozen state equals the state at the last real position.
        for c in 0..3 {
            assert_eq!(last_a[[0, c]], seq_a[[0, 1, c]]);
        }
    }

    #[test]
    fn reverse_lstm_ignores_padding_suffix() {
        let mask = ndarray::arr2(&[[1.0, 1.0, 1.0, 0.0]]);
        let mut x = Array3::from_elem((1, 4, 2), 0.5);
        x.slice_mut(ndarray::s![.., 3.., ..]).fill(123.0);
        let (seq_a, _) = run_lstm(&mask, &x, true);
        x.slice_mut(ndarray::s![.., 3.., ..]).fill(-55.0);
        let (seq_b, _) = run_lstm(&mask, &x, true);
        for t in 0..3 {
            for c in 0..3 {
                assert_eq!(seq_a[[0, t, c]], seq_b[[0, t, c]]);
            }
        }
    }

    #[test]
    fn gru_state_stays_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = Gru::new(&mut store, "g", 2, 4, &mut rng);
        let mask = Array2::ones((2, 6));
        let x = Array3::from_shape_fn((2, 6, 2), |(b, t, c)| (b + t + c) as f64 * 0.1);
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::inference();
            let xv = tape.constant3(x.clone());
            let out = cell.forward(&mut tape, &store, xv, &mask, false, None);
            outs.push(tape.value(out.seq).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert!(outs[0].iter().all(|v| v.abs() <= 1.0));
    }
}
