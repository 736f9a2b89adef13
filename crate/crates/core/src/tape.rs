//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A Wengert list over f64 scalars: every operation records its parents and
//! the local partial derivatives at forward time, and `backward` runs one
//! reverse sweep accumulating adjoints. Variables are plain `u32` indices
//! into the tape, so model code threads a `&mut Tape` explicitly instead of
//! paying Rc/RefCell overhead per node.
//!
//! The arithmetic helpers (`dot_consts`, `sum`, `softmax`) accumulate left to
//! right in the same order as the value-path code in the rest of the crate,
//! which keeps recorded forward values bit-identical to unrecorded ones.

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
    arity: u8,
}

const LEAF: Node = Node {
    parents: [0, 0],
    partials: [0.0, 0.0],
    arity: 0,
};

/// The recording tape. `clear` keeps capacity so a training loop reuses the
/// same allocations across steps.
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            vals: Vec::with_capacity(n),
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.vals.clear();
        self.nodes.clear();
    }

    #[inline]
    pub fn value(&self, x: Var) -> f64 {
        self.vals[x.index()]
    }

    /// A differentiable input (parameter) node.
    pub fn leaf(&mut self, v: f64) -> Var {
        self.vals.push(v);
        self.nodes.push(LEAF);
        Var(self.nodes.len() as u32 - 1)
    }

    /// A node with zero gradient; same layout as a leaf.
    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(v)
    }

    #[inline]
    fn push(&mut self, v: f64, parents: [u32; 2], partials: [f64; 2], arity: u8) -> Var {
        self.vals.push(v);
        self.nodes.push(Node {
            parents,
            partials,
            arity,
        });
        Var(self.nodes.len() as u32 - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(v, [a.0, b.0], [1.0, 1.0], 2)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(v, [a.0, b.0], [1.0, -1.0], 2)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.vals[a.index()], self.vals[b.index()]);
        self.push(av * bv, [a.0, b.0], [bv, av], 2)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.vals[a.index()], self.vals[b.index()]);
        self.push(av / bv, [a.0, b.0], [1.0 / bv, -av / (bv * bv)], 2)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.index()];
        self.push(v, [a.0, 0], [-1.0, 0.0], 1)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.index()] + c;
        self.push(v, [a.0, 0], [1.0, 0.0], 1)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.vals[a.index()] * c;
        self.push(v, [a.0, 0], [c, 0.0], 1)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].exp();
        self.push(v, [a.0, 0], [v, 0.0], 1)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let av = self.vals[a.index()];
        self.push(av.ln(), [a.0, 0], [1.0 / av, 0.0], 1)
    }

    /// x * sigmoid(x), with d/dx = s(x) (1 + x (1 - s(x))).
    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.vals[a.index()];
        let s = 1.0 / (1.0 + (-x).exp());
        self.push(x * s, [a.0, 0], [s * (1.0 + x * (1.0 - s)), 0.0], 1)
    }

    /// Dot product of variables against constant coefficients, accumulated
    /// left to right starting from the first product.
    pub fn dot_consts(&mut self, vars: &[Var], coeffs: &[f64]) -> Var {
        debug_assert_eq!(vars.len(), coeffs.len());
        let mut acc = self.mul_const(vars[0], coeffs[0]);
        for (v, &c) in vars[1..].iter().zip(&coeffs[1..]) {
            let term = self.mul_const(*v, c);
            acc = self.add(acc, term);
        }
        acc
    }

    /// Dot product of two variable slices.
    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = self.mul(a[0], b[0]);
        for (x, y) in a[1..].iter().zip(&b[1..]) {
            let term = self.mul(*x, *y);
            acc = self.add(acc, term);
        }
        acc
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Numerically stable softmax over a slice of logit variables. The row
    /// maximum is subtracted as a detached constant; softmax is shift
    /// invariant, so the gradient is unchanged.
    pub fn softmax(&mut self, logits: &[Var]) -> Vec<Var> {
        let max = logits
            .iter()
            .map(|&l| self.value(l))
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<Var> = logits
            .iter()
            .map(|&l| {
                let shifted = self.add_const(l, -max);
                self.exp(shifted)
            })
            .collect();
        let total = self.sum(&exps);
        exps.into_iter().map(|e| self.div(e, total)).collect()
    }

    /// Reverse sweep from `root`. Returns the adjoint of every node; callers
    /// read the entries of their leaf variables.
    pub fn backward(&self, root: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[root.index()] = 1.0;
        for id in (0..self.nodes.len()).rev() {
            let a = adj[id];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[id];
            for j in 0..node.arity as usize {
                adj[node.parents[j] as usize] += a * node.partials[j];
            }
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        // f(x) = x^2 at x = 3: f' = 6.
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let y = t.mul(x, x);
        assert_eq!(t.value(y), 9.0);
        let adj = t.backward(y);
        assert_eq!(adj[x.index()], 6.0);
    }

    #[test]
    fn quotient_and_chain() {
        // f(x) = (x + 1) / (x + 2) at x = 3: f = 0.8, f' = 1/25.
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let num = t.add_const(x, 1.0);
        let den = t.add_const(x, 2.0);
        let y = t.div(num, den);
        assert!((t.value(y) - 0.8).abs() < 1e-15);
        let adj = t.backward(y);
        assert!((adj[x.index()] - 0.04).abs() < 1e-12);
    }

    #[test]
    fn exp_ln_roundtrip_gradient() {
        // f(x) = ln(exp(x)) = x: gradient 1 everywhere.
        let mut t = Tape::new();
        let x = t.leaf(1.7);
        let e = t.exp(x);
        let y = t.ln(e);
        let adj = t.backward(y);
        assert!((adj[x.index()] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silu_matches_finite_difference() {
        let h = 1e-6;
        for &x0 in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let mut t = Tape::new();
            let x = t.leaf(x0);
            let y = t.silu(x);
            let adj = t.backward(y);
            let f = |v: f64| v / (1.0 + (-v).exp());
            let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
            assert!(
                (adj[x.index()] - fd).abs() < 1e-6,
                "silu'({}) = {} vs fd {}",
                x0,
                adj[x.index()],
                fd
            );
        }
    }

    #[test]
    fn softmax_gradient_matches_closed_form() {
        // d p_i / d l_j = p_i (delta_ij - p_j); check via a weighted sum.
        let logits = [0.3, -1.2, 2.0];
        let weights = [0.5, -0.25, 1.5];
        let mut t = Tape::new();
        let ls: Vec<Var> = logits.iter().map(|&l| t.leaf(l)).collect();
        let ps = t.softmax(&ls);
        let mut loss = t.mul_const(ps[0], weights[0]);
        for i in 1..3 {
            let term = t.mul_const(ps[i], weights[i]);
            loss = t.add(loss, term);
        }
        let adj = t.backward(loss);

        let p: Vec<f64> = ps.iter().map(|&v| t.value(v)).collect();
        let wp: f64 = weights.iter().zip(&p).map(|(w, q)| w * q).sum();
        for j in 0..3 {
            let expected = p[j] * (weights[j] - wp);
            assert!(
                (adj[ls[j].index()] - expected).abs() < 1e-12,
                "softmax grad {} vs {}",
                adj[ls[j].index()],
                expected
            );
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = x*x + x at 3: f' = 7.
        let mut t = Tape::new();
        let x = t.leaf(3.0);
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let adj = t.backward(y);
        assert_eq!(adj[x.index()], 7.0);
    }

    #[test]
    fn clear_reuses_tape() {
        let mut t = Tape::new();
        let x = t.leaf(2.0);
        let _ = t.mul(x, x);
        t.clear();
        assert!(t.is_empty());
        let y = t.leaf(5.0);
        let z = t.mul_const(y, 3.0);
        assert_eq!(t.value(z), 15.0);
    }
}
