//! The sequence-to-sequence forecaster and the latent-code proposal networks.

use crate::error::{Error, Result};
use crate::nn::layers::{Dense, GruCell, Mlp};
use crate::nn::params::{Bound, ParameterStore};
use crate::nn::tape::{Tape, Var};
use crate::trajectory::Trajectory;

/// Architecture of a [`Forecaster`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecasterSpec {
    pub channels: usize,
    pub hidden: usize,
    /// Latent code width appended to the encoder state.
    pub k: usize,
    /// Number of decoded steps.
    pub horizon: usize,
}

/// GRU encoder, a `tanh(Dense(h ++ z))` bridge to the decoder state, and an
/// autoregressive GRU decoder whose first input is the last observed point.
#[derive(Clone, Debug)]
pub struct Forecaster {
    spec: ForecasterSpec,
    store: ParameterStore,
    enc: GruCell,
    bridge: Dense,
    dec: GruCell,
    head: Dense,
}

/// Decoder outputs are time-major (`t * channels + c`); trajectories are channel-major.
pub fn time_major_to_trajectory(v: &[f64], channels: usize) -> Result<Trajectory> {
    let len = v.len() / channels;
    let mut out = vec![0.0; v.len()];
    for t in 0..len {
        for c in 0..channels {
            out[c * len + t] = v[t * channels + c];
        }
    }
    Trajectory::new(channels, out)
}

/// Inverse layout map of [`time_major_to_trajectory`] for gradients.
pub fn to_time_major(g: &[f64], channels: usize) -> Vec<f64> {
    let len = g.len() / channels;
    let mut out = vec![0.0; g.len()];
    for c in 0..channels {
        for t in 0..len {
            out[t * channels + c] = g[c * len + t];
        }
    }
    out
}

impl Forecaster {
    pub fn new(spec: ForecasterSpec, seed: u64) -> Self {
        let mut store = ParameterStore::new(seed);
        let enc = GruCell::new(&mut store, "enc", spec.channels, spec.hidden);
        let bridge = Dense::new(&mut store, "bridge", spec.hidden + spec.k, spec.hidden);
        let dec = GruCell::new(&mut store, "dec", spec.channels, spec.hidden);
        let head = Dense::new(&mut store, "head", spec.hidden, spec.channels);
        Self {
            spec,
            store,
            enc,
            bridge,
            dec,
            head,
        }
    }

    pub fn spec(&self) -> ForecasterSpec {
        self.spec
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    fn check_input(&self, x: &Trajectory) -> Result<()> {
        if x.channels() != self.spec.channels || x.is_empty() {
            return Err(Error::Config(format!(
                "forecaster expects {} channels, input has {} channels and {} steps",
                self.spec.channels,
                x.channels(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Final encoder state.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: &Trajectory) -> Result<Var> {
        self.check_input(x)?;
        let xs: Vec<Var> = (0..x.len()).map(|t| tape.constant(x.point(t))).collect();
        let h0 = tape.constant(vec![0.0; self.spec.hidden]);
        Ok(self.enc.run(tape, p, &xs, h0))
    }

    /// Decodes `horizon` steps from `h ++ z`; returns the time-major output.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, h: Var, z: Var, last: Var) -> Result<Var> {
        if tape.width(z) != self.spec.k {
            return Err(Error::Config(format!(
                "latent code has width {}, expected k = {}",
                tape.width(z),
                self.spec.k
            )));
        }
        let hz = tape.concat(&[h, z]);
        let s = self.bridge.forward(tape, p, hz);
        let mut state = tape.tanh(s);
        let mut input = last;
        let mut outs = Vec::with_capacity(self.spec.horizon);
        for _ in 0..self.spec.horizon {
            state = self.dec.step(tape, p, input, state);
            let y = self.head.forward(tape, p, state);
            outs.push(y);
            input = y;
        }
        Ok(tape.concat(&outs))
    }

    pub fn last_point(&self, tape: &mut Tape, x: &Trajectory) -> Var {
        tape.constant(x.point(x.len() - 1))
    }

    /// `decode(encode(x), z)` on the tape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Trajectory, z: Var) -> Result<Var> {
        let h = self.encode(tape, p, x)?;
        let last = self.last_point(tape, x);
        self.decode(tape, p, h, z, last)
    }

    /// Forecasts for each latent code, sharing one encoder pass.
    pub fn predict_many(&self, x: &Trajectory, zs: &[Vec<f64>]) -> Result<Vec<Trajectory>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let h = self.encode(&mut tape, &p, x)?;
        let last = self.last_point(&mut tape, x);
        zs.iter()
            .map(|z| {
                let zv = tape.constant(z.clone());
                let y = self.decode(&mut tape, &p, h, zv, last)?;
                time_major_to_trajectory(tape.value(y), self.spec.channels)
            })
            .collect()
    }

    pub fn predict(&self, x: &Trajectory, z: &[f64]) -> Result<Trajectory> {
        Ok(self.predict_many(x, &[z.to_vec()])?.remove(0))
    }

    /// The deterministic prediction path, `z = 0_k`.
    pub fn predict_deterministic(&self, x: &Trajectory) -> Result<Trajectory> {
        self.predict(x, &vec![0.0; self.spec.k])
    }
}

/// Architecture of a [`ProposalNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProposalSpec {
    pub channels: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    /// Width of one emitted code (k / 2).
    pub code_dim: usize,
    /// Number of codes emitted per input.
    pub count: usize,
    /// Width of the conditioning code; 0 for an unconditioned network.
    pub condition_dim: usize,
}

pub const PROPOSAL_DEPTH: usize = 3;

/// GRU encoder, optional concatenated condition, three perceptron blocks and a
/// linear layer emitting `count * code_dim` values.
#[derive(Clone, Debug)]
pub struct ProposalNet {
    spec: ProposalSpec,
    store: ParameterStore,
    enc: GruCell,
    mlp: Mlp,
    out: Dense,
}

impl ProposalNet {
    pub fn new(spec: ProposalSpec, seed: u64) -> Self {
        let mut store = ParameterStore::new(seed);
        let enc = GruCell::new(&mut store, "enc", spec.channels, spec.hidden);
        let mlp = Mlp::new(
            &mut store,
            "mlp",
            spec.hidden + spec.condition_dim,
            spec.mlp_hidden,
            PROPOSAL_DEPTH,
        );
        let out = Dense::new(&mut store, "out", spec.mlp_hidden, spec.count * spec.code_dim);
        Self {
            spec,
            store,
            enc,
            mlp,
            out,
        }
    }

    pub fn spec(&self) -> ProposalSpec {
        self.spec
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// All codes, concatenated; code `i` occupies `[i * code_dim, (i + 1) * code_dim)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Trajectory, condition: Option<Var>) -> Result<Var> {
        if x.channels() != self.spec.channels || x.is_empty() {
            return Err(Error::Config(format!(
                "proposal network expects {} channels, got {}",
                self.spec.channels,
                x.channels()
            )));
        }
        let xs: Vec<Var> = (0..x.len()).map(|t| tape.constant(x.point(t))).collect();
        let h0 = tape.constant(vec![0.0; self.spec.hidden]);
        let h = self.enc.run(tape, p, &xs, h0);
        let feat = match (condition, self.spec.condition_dim) {
            (None, 0) => h,
            (Some(c), d) if d > 0 && tape.width(c) == d => tape.concat(&[h, c]),
            (c, d) => {
                return Err(Error::Config(format!(
                    "condition width {:?} does not match expected {d}",
                    c.map(|v| tape.width(v))
                )))
            }
        };
        let f = self.mlp.forward(tape, p, feat);
        Ok(self.out.forward(tape, p, f))
    }

    /// Codes as separate vectors, evaluated off-tape.
    pub fn codes(&self, x: &Trajectory, condition: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let c = condition.map(|c| tape.constant(c.to_vec()));
        let out = self.forward(&mut tape, &p, x, c)?;
        Ok(tape
            .value(out)
            .chunks_exact(self.spec.code_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }
}
