//! Named parameter arrays, their gradient buffers, and the text checkpoint format.
//!
//! Checkpoint layout (line-oriented, UTF-8):
//!
//! ```text
//! stripe-checkpoint 1
//! seed <u64>
//! params <count>
//! param <name> <rows> <cols>
//! <rows * cols whitespace-separated values>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float rendering, so loading reproduces
//! every parameter bit for bit.

use rand::Rng;

use crate::error::{parse_err, Error, Result};
use crate::nn::tape::{Grads, Tape, Var};
use crate::rng::stream;

pub const CHECKPOINT_MAGIC: &str = "stripe-checkpoint 1";

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    params: Vec<Param>,
}

/// Tape handles for every parameter of one store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn insert(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            grad: vec![0.0; value.len()],
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a `rows x cols` parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// The draw depends only on the store seed, the parameter name and its shape.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = stream(self.seed, &format!("init/{name}/{rows}x{cols}"));
        let value = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, rows, cols, value)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, fill: f64) -> ParamId {
        self.insert(name, rows, cols, vec![fill; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Copies every parameter onto the tape; `trainable` controls whether
    /// gradients flow into them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.matrix(p.value.clone(), p.cols, trainable))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape adjoints of the bound parameters into the gradient buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                for (d, s) in p.grad.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC}\nseed {}\nparams {}\n", self.seed, self.params.len());
        for p in &self.params {
            out.push_str(&format!("param {} {} {}\n", p.name, p.rows, p.cols));
            let vals: Vec<String> = p.value.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| parse_err(0, format!("unexpected end of checkpoint, expected {what}")))
        };
        let (ln, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(parse_err(ln, format!("expected '{CHECKPOINT_MAGIC}'")));
        }
        let (ln, seed_line) = next("seed")?;
        let seed = seed_line
            .strip_prefix("seed ")
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| parse_err(ln, "expected 'seed <u64>'"))?;
        let (ln, count_line) = next("param count")?;
        let count = count_line
            .strip_prefix("params ")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| parse_err(ln, "expected 'params <count>'"))?;
        let mut store = Self::new(seed);
        for _ in 0..count {
            let (ln, head) = next("param header")?;
            let fields: Vec<&str> = head.split_whitespace().collect();
            if fields.len() != 4 || fields[0] != "param" {
                return Err(parse_err(ln, "expected 'param <name> <rows> <cols>'"));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|_| parse_err(ln, format!("bad dimension '{s}'")));
            let (rows, cols) = (dim(fields[2])?, dim(fields[3])?);
            let size = rows
                .checked_mul(cols)
                .filter(|n| *n > 0 && *n <= 1 << 26)
                .ok_or_else(|| parse_err(ln, "parameter shape out of range"))?;
            if store.by_name(fields[1]).is_some() {
                return Err(parse_err(ln, format!("duplicate parameter '{}'", fields[1])));
            }
            let (ln, body) = next("parameter values")?;
            let value = body
                .split_whitespace()
                .map(|s| match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(parse_err(ln, format!("bad value '{s}'"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            if value.len() != size {
                return Err(parse_err(ln, format!("expected {size} values, got {}", value.len())));
            }
            store.insert(fields[1], rows, cols, value);
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(parse_err(ln, format!("trailing content '{extra}'")));
        }
        Ok(store)
    }

    /// Replaces values with those of `other`, which must have the same names and shapes.
    pub fn load_values(&mut self, other: &ParameterStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (p, q) in self.params.iter().zip(&other.params) {
            if p.name != q.name || p.rows != q.rows || p.cols != q.cols {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {}x{} does not match {} {}x{}",
                    q.name, q.rows, q.cols, p.name, p.rows, p.cols
                )));
            }
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value.clone_from(&q.value);
        }
        self.seed = other.seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new(11);
        s.uniform("w", 3, 4, 4);
        s.constant("g", 3, 1, 1.0);
        s
    }

    #[test]
    fn init_is_pure_and_bounded() {
        let a = sample_store();
        let b = sample_store();
        assert_eq!(a, b);
        assert!(a.params()[0].value.iter().all(|v| v.abs() <= 0.5));
        let mut c = ParameterStore::new(12);
        c.uniform("w", 3, 4, 4);
        assert_ne!(a.params()[0].value, c.params()[0].value);
        for p in a.params() {
            assert_eq!(p.value.len(), p.grad.len());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut s = sample_store();
        s.get_mut(ParamId(0)).value[0] = 0.1 + 0.2;
        let back = ParameterStore::from_checkpoint(&s.to_checkpoint()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn checkpoint_errors_carry_lines() {
        let good = sample_store().to_checkpoint();
        assert!(matches!(
            ParameterStore::from_checkpoint("nope"),
            Err(Error::Parse { line: 1, .. })
        ));
        let bad = good.replacen("param w 3 4", "param w 3 5", 1);
        assert!(matches!(ParameterStore::from_checkpoint(&bad), Err(Error::Parse { line: 5, .. })));
        let trunc: String = good.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(ParameterStore::from_checkpoint(&trunc).is_err());
        let nan = good.replacen("param g 3 1\n1.0", "param g 3 1\nNaN", 1);
        assert!(ParameterStore::from_checkpoint(&nan).is_err());
    }

    #[test]
    fn load_values_checks_architecture() {
        let mut a = sample_store();
        let mut other = ParameterStore::new(3);
        other.uniform("w", 3, 4, 4);
        assert!(a.load_values(&other).is_err());
        let mut b = ParameterStore::new(99);
        b.uniform("w", 3, 4, 4);
        b.constant("g", 3, 1, 2.0);
        a.load_values(&b).unwrap();
        assert_eq!(a.params()[1].value, vec![2.0; 3]);
    }

    #[test]
    fn clip_bounds_norm() {
        let mut s = sample_store();
        s.params_mut()[0].grad.iter_mut().for_each(|g| *g = 3.0);
        s.clip_grad_norm(1.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
