//! Reverse-mode automatic differentiation over dense vectors.
//!
//! A [`Tape`] records one forward pass. Each node stores its value; `backward`
//! walks the nodes in exact reverse of recording order and returns the adjoint of
//! every node that depends on a differentiable leaf. Losses whose gradients are
//! computed outside the tape (the alignment DPs and the DPP loss) enter as seeds:
//! `backward(&[(output, d_loss / d_output)])`.

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `w` is `rows x cols` (row-major), `x` has `cols` entries.
    MatVec(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    Concat(Vec<usize>),
    Slice(usize, usize),
    /// Normalization without affine part; the node value is the normalized output.
    LayerNorm(usize, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    cols: usize,
    needs_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`]. Nodes that do not depend on a
/// differentiable leaf have no entry.
#[derive(Debug)]
pub struct Grads {
    g: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        let g = &self.g[v.0];
        (!g.is_empty()).then_some(g.as_slice())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op: Op, value: Vec<f64>, cols: usize, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            cols,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].needs_grad
    }

    /// Non-differentiable input vector.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, 1, false)
    }

    /// Differentiable input vector.
    pub fn variable(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, 1, true)
    }

    /// Leaf holding a row-major `rows x cols` matrix (or a vector when `cols == 1`).
    pub fn matrix(&mut self, value: Vec<f64>, cols: usize, trainable: bool) -> Var {
        assert!(cols > 0 && value.len().is_multiple_of(cols), "matrix leaf shape");
        self.push(Op::Leaf, value, cols, trainable)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn width(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (wn, xn) = (&self.nodes[w.0], &self.nodes[x.0]);
        let cols = wn.cols;
        assert_eq!(cols, xn.value.len(), "matvec width mismatch");
        let out: Vec<f64> = wn
            .value
            .chunks_exact(cols)
            .map(|row| row.iter().zip(&xn.value).map(|(a, b)| a * b).sum())
            .collect();
        let ng = wn.needs_grad || xn.needs_grad;
        self.push(Op::MatVec(w.0, x.0), out, 1, ng)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (an, bn) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(an.len(), bn.len(), "elementwise width mismatch");
        let out = an.iter().zip(bn).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(op, out, 1, ng)
    }

    fn map_op(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let ng = self.needs(a.0);
        self.push(op, out, 1, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map_op(a, Op::Scale(a.0, s), |x| s * x)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map_op(a, Op::OneMinus(a.0), |x| 1.0 - x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map_op(a, Op::LeakyRelu(a.0, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::with_capacity(parts.iter().map(|p| self.width(*p)).sum());
        let mut ng = false;
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
            ng |= self.needs(p.0);
        }
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), out, 1, ng)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = &self.nodes[a.0].value;
        assert!(start + len <= src.len(), "slice out of range");
        let out = src[start..start + len].to_vec();
        let ng = self.needs(a.0);
        self.push(Op::Slice(a.0, start), out, 1, ng)
    }

    /// `(x - mean) / sqrt(var + eps)` over the whole vector.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let out = x.iter().map(|v| (v - mean) * inv_std).collect();
        let ng = self.needs(a.0);
        self.push(Op::LayerNorm(a.0, inv_std), out, 1, ng)
    }

    /// Backpropagates the given output adjoints through the whole tape.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Grads {
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        for (v, seed) in seeds {
            let n = &self.nodes[v.0];
            assert_eq!(n.value.len(), seed.len(), "seed width mismatch");
            if !n.needs_grad {
                continue;
            }
            accumulate(&mut g[v.0], seed);
        }
        for idx in (0..self.nodes.len()).rev() {
            if g[idx].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatVec(w, x) => {
                    let (wn, xn) = (&self.nodes[*w], &self.nodes[*x]);
                    let cols = wn.cols;
                    if wn.needs_grad {
                        let gw = slot(&mut g[*w], wn.value.len());
                        for (r, gr) in gi.iter().enumerate() {
                            if *gr != 0.0 {
                                for (dst, xv) in gw[r * cols..(r + 1) * cols].iter_mut().zip(&xn.value) {
                                    *dst += gr * xv;
                                }
                            }
                        }
                    }
                    if xn.needs_grad {
                        let gx = slot(&mut g[*x], cols);
                        for (row, gr) in wn.value.chunks_exact(cols).zip(&gi) {
                            for (dst, wv) in gx.iter_mut().zip(row) {
                                *dst += gr * wv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &t in [a, b] {
                        if self.needs(t) {
                            accumulate(&mut g[t], &gi);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut g[*a], &gi);
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut g[*b], gi.len());
                        for (d, v) in gb.iter_mut().zip(&gi) {
                            *d -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (t, other) in [(*a, *b), (*b, *a)] {
                        if self.needs(t) {
                            let ov = &self.nodes[other].value;
                            let gt = slot(&mut g[t], gi.len());
                            for ((d, v), o) in gt.iter_mut().zip(&gi).zip(ov) {
                                *d += v * o;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut g[*a], gi.len());
                    for (d, v) in ga.iter_mut().zip(&gi) {
                        *d += s * v;
                    }
                }
                Op::OneMinus(a) => {
                    let ga = slot(&mut g[*a], gi.len());
                    for (d, v) in ga.iter_mut().zip(&gi) {
                        *d -= v;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = slot(&mut g[*a], gi.len());
                    for ((d, v), y) in ga.iter_mut().zip(&gi).zip(&node.value) {
                        *d += v * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = slot(&mut g[*a], gi.len());
                    for ((d, v), y) in ga.iter_mut().zip(&gi).zip(&node.value) {
                        *d += v * (1.0 - y * y);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xs = &self.nodes[*a].value;
                    let ga = slot(&mut g[*a], gi.len());
                    for ((d, v), x) in ga.iter_mut().zip(&gi).zip(xs) {
                        *d += if *x > 0.0 { *v } else { slope * v };
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.len();
                        if self.needs(p) {
                            accumulate(&mut g[p], &gi[off..off + w]);
                        }
                        off += w;
                    }
                }
                Op::Slice(a, start) => {
                    let w = self.nodes[*a].value.len();
                    let ga = slot(&mut g[*a], w);
                    for (d, v) in ga[*start..*start + gi.len()].iter_mut().zip(&gi) {
                        *d += v;
                    }
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.len() as f64;
                    let mean_g = gi.iter().sum::<f64>() / n;
                    let mean_gy = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    let ga = slot(&mut g[*a], gi.len());
                    for ((d, v), yv) in ga.iter_mut().zip(&gi).zip(y) {
                        *d += inv_std * (v - mean_g - yv * mean_gy);
                    }
                }
            }
            g[idx] = gi;
        }
        Grads { g }
    }
}

fn slot(g: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if g.is_empty() {
        g.resize(len, 0.0);
    }
    g
}

fn accumulate(g: &mut Vec<f64>, src: &[f64]) {
    if g.is_empty() {
        g.extend_from_slice(src);
    } else {
        for (d, v) in g.iter_mut().zip(src) {
            *d += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central differences of `sum(seed * f(x))` for a tape-recorded `f`.
    fn check_op(x0: &[f64], seed: &[f64], f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.variable(x0.to_vec());
        let y = f(&mut tape, x);
        let g = tape.backward(&[(y, seed)]);
        let an = g.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x0.len()]);
        let eval = |xv: Vec<f64>| {
            let mut t = Tape::new();
            let x = t.variable(xv);
            let y = f(&mut t, x);
            t.value(y).iter().zip(seed).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut p = x0.to_vec();
            p[i] += eps;
            let mut m = x0.to_vec();
            m[i] -= eps;
            let fd = (eval(p) - eval(m)) / (2.0 * eps);
            let err = (fd - an[i]).abs() / fd.abs().max(an[i].abs()).max(1.0);
            assert!(err <= 1e-4, "entry {i}: fd {fd} vs {}", an[i]);
        }
    }

    fn vecs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn elementwise_ops_match_fd((x, s) in vecs(6)) {
            check_op(&x, &s, |t, v| t.sigmoid(v));
            check_op(&x, &s, |t, v| t.tanh(v));
            check_op(&x, &s, |t, v| t.leaky_relu(v, 0.01));
            check_op(&x, &s, |t, v| t.one_minus(v));
            check_op(&x, &s, |t, v| t.scale(v, -1.7));
            check_op(&x, &s, |t, v| t.mul(v, v));
            check_op(&x, &s, |t, v| { let a = t.tanh(v); t.sub(v, a) });
            check_op(&x, &s, |t, v| { let a = t.sigmoid(v); t.add(a, v) });
            check_op(&x, &s, |t, v| t.layer_norm(v, 1e-5));
        }

        #[test]
        fn structural_ops_match_fd((x, s) in vecs(6)) {
            check_op(&x, &s, |t, v| {
                let a = t.slice(v, 1, 3);
                let b = t.slice(v, 0, 3);
                t.concat(&[b, a])
            });
            let w: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
            check_op(&x, &s, |t, v| {
                let wm = t.matrix(w.clone(), 6, false);
                t.matvec(wm, v)
            });
        }

        #[test]
        fn matrix_leaf_matches_fd(w in prop::collection::vec(-1.0f64..1.0, 12), s in prop::collection::vec(-1.0f64..1.0, 4)) {
            let x = vec![0.3, -1.2, 0.8];
            let f = |wv: &[f64]| {
                let mut t = Tape::new();
                let wm = t.matrix(wv.to_vec(), 3, true);
                let xv = t.constant(x.clone());
                let y = t.matvec(wm, xv);
                let y = t.tanh(y);
                (t, wm, y)
            };
            let (t, wm, y) = f(&w);
            let g = t.backward(&[(y, &s)]);
            let an = g.get(wm).unwrap().to_vec();
            let eval = |wv: &[f64]| {
                let (t, _, y) = f(wv);
                t.value(y).iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
            };
            for i in 0..w.len() {
                let mut p = w.clone();
                p[i] += 1e-5;
                let mut m = w.clone();
                m[i] -= 1e-5;
                let fd = (eval(&p) - eval(&m)) / 2e-5;
                prop_assert!((fd - an[i]).abs() <= 1e-4 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn matrix_gradient_is_outer_product() {
        let mut t = Tape::new();
        let w = t.matrix(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, true);
        let x = t.constant(vec![0.5, -1.0, 2.0]);
        let y = t.matvec(w, x);
        assert_eq!(t.value(y), &[4.5, 9.0]);
        let g = t.backward(&[(y, &[1.0, -2.0])]);
        assert_eq!(g.get(w).unwrap(), &[0.5, -1.0, 2.0, -1.0, 2.0, -4.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn linear_composition_is_exact() {
        // y = 3 * (A x) - (B x) + x; dy/dx^T s = (3A - B + I)^T s exactly.
        let a = vec![1.0, 2.0, 0.0, -1.0];
        let b = vec![0.5, 0.0, 1.5, 2.0];
        let mut t = Tape::new();
        let x = t.variable(vec![0.3, -0.7]);
        let am = t.matrix(a.clone(), 2, false);
        let bm = t.matrix(b.clone(), 2, false);
        let ax = t.matvec(am, x);
        let ax3 = t.scale(ax, 3.0);
        let bx = t.matvec(bm, x);
        let d = t.sub(ax3, bx);
        let y = t.add(d, x);
        let s = [2.0, -1.0];
        let g = t.backward(&[(y, &s)]);
        let want = [
            (3.0 * a[0] - b[0] + 1.0) * s[0] + (3.0 * a[2] - b[2]) * s[1],
            (3.0 * a[1] - b[1]) * s[0] + (3.0 * a[3] - b[3] + 1.0) * s[1],
        ];
        assert_eq!(g.get(x).unwrap(), &want);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(vec![1.0, 2.0]);
        let y = t.tanh(c);
        let g = t.backward(&[(y, &[1.0, 1.0])]);
        assert!(g.get(c).is_none() && g.get(y).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        let mut t = Tape::new();
        let x = t.variable(vec![2.0]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(&[(z, &[1.0])]);
        assert_eq!(g.get(x).unwrap(), &[5.0]);
    }
}
