use crate::nn::params::{Bound, ParamId, ParameterStore};
use crate::nn::tape::{Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

/// `y = W x + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
    input: usize,
    output: usize,
}

impl Dense {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: store.uniform(&format!("{name}.w"), output, input, input),
            b: store.uniform(&format!("{name}.b"), output, 1, input),
            input,
            output,
        }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        assert_eq!(tape.width(x), self.input, "dense input width");
        let wx = tape.matvec(p.var(self.w), x);
        tape.add(wx, p.var(self.b))
    }
}

/// Gated recurrent unit with separate input and recurrent biases:
///
/// ```text
/// r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: store.uniform(&format!("{name}.w_ih"), 3 * hidden, input, hidden),
            w_hh: store.uniform(&format!("{name}.w_hh"), 3 * hidden, hidden, hidden),
            b_ih: store.uniform(&format!("{name}.b_ih"), 3 * hidden, 1, hidden),
            b_hh: store.uniform(&format!("{name}.b_hh"), 3 * hidden, 1, hidden),
            input,
            hidden,
        }
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Var {
        assert_eq!(tape.width(x), self.input, "gru input width");
        assert_eq!(tape.width(h), self.hidden, "gru hidden width");
        let hd = self.hidden;
        let gi = tape.matvec(p.var(self.w_ih), x);
        let gi = tape.add(gi, p.var(self.b_ih));
        let gh = tape.matvec(p.var(self.w_hh), h);
        let gh = tape.add(gh, p.var(self.b_hh));
        let rz_i = tape.slice(gi, 0, 2 * hd);
        let rz_h = tape.slice(gh, 0, 2 * hd);
        let rz = tape.add(rz_i, rz_h);
        let rz = tape.sigmoid(rz);
        let r = tape.slice(rz, 0, hd);
        let z = tape.slice(rz, hd, hd);
        let n_i = tape.slice(gi, 2 * hd, hd);
        let n_h = tape.slice(gh, 2 * hd, hd);
        let rn = tape.mul(r, n_h);
        let n = tape.add(n_i, rn);
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Runs the cell over `xs` from `h0` and returns the final state.
    pub fn run(&self, tape: &mut Tape, p: &Bound, xs: &[Var], h0: Var) -> Var {
        xs.iter().fold(h0, |h, x| self.step(tape, p, *x, h))
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
    width: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.constant(&format!("{name}.gain"), width, 1, 1.0),
            bias: store.constant(&format!("{name}.bias"), width, 1, 0.0),
            width,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        assert_eq!(tape.width(x), self.width, "layer norm width");
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.mul(n, p.var(self.gain));
        tape.add(g, p.var(self.bias))
    }
}

/// Stack of `Dense -> LayerNorm -> LeakyReLU` blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    blocks: Vec<(Dense, LayerNorm)>,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, depth: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let inp = if i == 0 { input } else { hidden };
                (
                    Dense::new(store, &format!("{name}.{i}"), inp, hidden),
                    LayerNorm::new(store, &format!("{name}.{i}.ln"), hidden),
                )
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        self.blocks.iter().fold(x, |h, (d, ln)| {
            let y = d.forward(tape, p, h);
            let y = ln.forward(tape, p, y);
            tape.leaky_relu(y, LEAKY_SLOPE)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_gru(input: usize, hidden: usize) -> (ParameterStore, GruCell) {
        let mut s = ParameterStore::new(0);
        let cell = GruCell::new(&mut s, "g", input, hidden);
        for p in s.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        (s, cell)
    }

    #[test]
    fn gru_at_zero_parameters_halves_state() {
        let (s, cell) = zero_gru(2, 3);
        let mut t = Tape::new();
        let p = s.bind(&mut t, false);
        let x = t.constant(vec![0.7, -0.2]);
        let h = t.constant(vec![0.4, -1.0, 2.0]);
        let out = cell.step(&mut t, &p, x, h);
        assert_eq!(t.value(out), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn gru_length_one_sequence_is_one_step() {
        let mut s = ParameterStore::new(5);
        let cell = GruCell::new(&mut s, "g", 1, 4);
        let mut t = Tape::new();
        let p = s.bind(&mut t, false);
        let x = t.constant(vec![0.3]);
        let h = t.constant(vec![0.0; 4]);
        let a = cell.step(&mut t, &p, x, h);
        let b = cell.run(&mut t, &p, &[x], h);
        assert_eq!(t.value(a), t.value(b));
    }

    fn fd_params(store: &ParameterStore, f: &dyn Fn(&ParameterStore) -> (f64, Vec<f64>), tol: f64) {
        let (_, an) = f(store);
        let eps = 1e-5;
        let mut k = 0;
        for (pi, p) in store.params().iter().enumerate() {
            for j in 0..p.value.len() {
                let mut sp = store.clone();
                sp.params_mut()[pi].value[j] += eps;
                let mut sm = store.clone();
                sm.params_mut()[pi].value[j] -= eps;
                let fd = (f(&sp).0 - f(&sm).0) / (2.0 * eps);
                let err = (fd - an[k]).abs() / fd.abs().max(an[k].abs()).max(1e-3);
                assert!(err <= tol, "{}[{j}]: fd {fd} vs {}", p.name, an[k]);
                k += 1;
            }
        }
    }

    /// Scalar readout `s . layer(x)` and its analytic gradient over all parameters.
    fn readout(store: &ParameterStore, build: &dyn Fn(&mut Tape, &Bound) -> Var) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let p = store.bind(&mut t, true);
        let y = build(&mut t, &p);
        let s: Vec<f64> = (0..t.width(y)).map(|i| ((i % 3) as f64 - 1.0) * 0.7 + 0.2).collect();
        let val = t.value(y).iter().zip(&s).map(|(a, b)| a * b).sum();
        let g = t.backward(&[(y, &s)]);
        let mut tmp = store.clone();
        tmp.zero_grad();
        tmp.accumulate(&p, &g);
        (val, tmp.params().iter().flat_map(|q| q.grad.clone()).collect())
    }

    #[test]
    fn gru_parameter_gradients_match_fd() {
        let mut s = ParameterStore::new(9);
        let cell = GruCell::new(&mut s, "g", 2, 3);
        let f = |st: &ParameterStore| {
            readout(st, &|t, p| {
                let xs: Vec<Var> = (0..3).map(|i| t.constant(vec![0.5 - i as f64, 0.25 * i as f64])).collect();
                let h0 = t.constant(vec![0.1, -0.2, 0.3]);
                cell.run(t, p, &xs, h0)
            })
        };
        fd_params(&s, &f, 1e-4);
    }

    #[test]
    fn mlp_and_layer_norm_gradients_match_fd() {
        let mut s = ParameterStore::new(4);
        let mlp = Mlp::new(&mut s, "m", 3, 5, 3);
        for p in s.params_mut() {
            // Move the norm gains and biases away from their identity init.
            if p.name.contains(".ln.") {
                p.value.iter_mut().enumerate().for_each(|(i, v)| *v += 0.1 * i as f64);
            }
        }
        let f = |st: &ParameterStore| {
            readout(st, &|t, p| {
                let x = t.constant(vec![0.4, -0.9, 1.3]);
                mlp.forward(t, p, x)
            })
        };
        fd_params(&s, &f, 1e-4);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut s = ParameterStore::new(0);
        let ln = LayerNorm::new(&mut s, "ln", 4);
        let mut t = Tape::new();
        let p = s.bind(&mut t, false);
        let x = t.constant(vec![1.0, 2.0, 3.0, 6.0]);
        let y = ln.forward(&mut t, &p, x);
        let v = t.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
