//! Reverse-mode differentiation over vector-valued primitives.
//!
//! A [`Graph`] is a tape rebuilt for every evaluation. Each node stores its
//! primal value, computed by the same kernels the plain code paths use, so
//! taping never changes a result. The reverse sweep visits nodes in reverse
//! creation order, which is a topological order by construction.
//!
//! Shape mistakes do not panic: the first one poisons the graph and is
//! returned by [`evaluate_with_gradient`] or [`vjp`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape, TwoScaleCoeffs};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Axpy(Var, Var, f64),
    Rk4(Var, [Var; 4], f64),
    Tanh(Var),
    Poly(Var, Arc<[f64]>),
    L96(Var, usize),
    TwoScale(Var, Arc<TwoScaleCoeffs>),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        shape: ConvShape,
    },
    Slice(Var, usize),
    Concat(Vec<Var>),
    SumSquares(Var),
    Sum(Var),
    MatVec {
        x: Var,
        matrix: Arc<[f64]>,
        rows: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Tape of primitive operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<(String, Var)>,
    error: Option<Error>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// First shape error raised while building, if any.
    pub fn error(&self) -> Option<&Error> {
        self.error.as_ref()
    }

    fn push(&mut self, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn fail(&mut self, msg: String) -> Var {
        if self.error.is_none() {
            self.error = Some(Error::Shape(msg));
        }
        self.push(Vec::new(), Op::Leaf, false)
    }

    fn same_len(&mut self, what: &str, a: Var, b: Var) -> bool {
        let (la, lb) = (self.dim(a), self.dim(b));
        if la != lb {
            self.fail(format!("{what}: operand lengths {la} and {lb} differ"));
            false
        } else {
            true
        }
    }

    /// Differentiable named input.
    pub fn input(&mut self, name: &str, values: &[f64]) -> Var {
        let v = self.push(values.to_vec(), Op::Leaf, true);
        self.inputs.push((name.to_string(), v));
        v
    }

    /// Constant: never receives a gradient.
    pub fn constant(&mut self, values: &[f64]) -> Var {
        self.push(values.to_vec(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        if !self.same_len("add", a, b) {
            return Var(self.nodes.len() - 1);
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        if !self.same_len("sub", a, b) {
            return Var(self.nodes.len() - 1);
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        if !self.same_len("mul", a, b) {
            return Var(self.nodes.len() - 1);
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| s * x).collect();
        let t = self.tracked(&[a]);
        self.push(value, Op::Scale(a, s), t)
    }

    /// `base + h * dir`, via [`kernels::axpy`].
    pub fn axpy(&mut self, base: Var, dir: Var, h: f64) -> Var {
        if !self.same_len("axpy", base, dir) {
            return Var(self.nodes.len() - 1);
        }
        let mut value = vec![0.0; self.dim(base)];
        kernels::axpy(self.value(base), self.value(dir), h, &mut value);
        let t = self.tracked(&[base, dir]);
        self.push(value, Op::Axpy(base, dir, h), t)
    }

    /// RK4 stage combination, via [`kernels::rk4_combine`].
    pub fn rk4_combine(&mut self, base: Var, k: [Var; 4], dt: f64) -> Var {
        for kk in k {
            if !self.same_len("rk4_combine", base, kk) {
                return Var(self.nodes.len() - 1);
            }
        }
        let mut value = vec![0.0; self.dim(base)];
        kernels::rk4_combine(
            self.value(base),
            [self.value(k[0]), self.value(k[1]), self.value(k[2]), self.value(k[3])],
            dt,
            &mut value,
        );
        let t = self.tracked(&[base, k[0], k[1], k[2], k[3]]);
        self.push(value, Op::Rk4(base, k, dt), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| kernels::tanh(x)).collect();
        let t = self.tracked(&[a]);
        self.push(value, Op::Tanh(a), t)
    }

    /// Elementwise polynomial with fixed coefficients (constant first).
    pub fn poly(&mut self, a: Var, coeffs: &[f64]) -> Var {
        let value = self.value(a).iter().map(|&x| kernels::poly(coeffs, x)).collect();
        let t = self.tracked(&[a]);
        self.push(value, Op::Poly(a, coeffs.into()), t)
    }

    /// Lorenz-96 tendency on consecutive rings of length `n`.
    pub fn l96(&mut self, a: Var, n: usize, forcing: f64) -> Var {
        let len = self.dim(a);
        if n < 4 || !len.is_multiple_of(n) {
            return self.fail(format!("l96: length {len} is not a multiple of ring size {n}"));
        }
        let mut value = vec![0.0; len];
        kernels::l96(self.value(a), n, forcing, &mut value);
        let t = self.tracked(&[a]);
        self.push(value, Op::L96(a, n), t)
    }

    /// Two-scale tendency on `[x; u]`.
    pub fn two_scale(&mut self, a: Var, coeffs: &Arc<TwoScaleCoeffs>) -> Var {
        let len = self.dim(a);
        if len != coeffs.dim() {
            return self.fail(format!("two_scale: length {len}, expected {}", coeffs.dim()));
        }
        let mut value = vec![0.0; len];
        kernels::two_scale(coeffs, self.value(a), &mut value);
        let t = self.tracked(&[a]);
        self.push(value, Op::TwoScale(a, Arc::clone(coeffs)), t)
    }

    /// Periodic convolution, via [`kernels::conv_forward`].
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, shape: ConvShape) -> Var {
        let (li, lw, lb) = (self.dim(input), self.dim(weight), self.dim(bias));
        if li != shape.input_len() || lw != shape.weight_len() || lb != shape.cout {
            return self.fail(format!(
                "conv: got input/weight/bias lengths {li}/{lw}/{lb} for {shape:?}"
            ));
        }
        if shape.window == 0 || shape.window > shape.n {
            return self.fail(format!("conv: window {} invalid for ring {}", shape.window, shape.n));
        }
        let mut value = vec![0.0; shape.output_len()];
        kernels::conv_forward(
            shape,
            self.value(input),
            self.value(weight),
            self.value(bias),
            &mut value,
        );
        let t = self.tracked(&[input, weight, bias]);
        self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                shape,
            },
            t,
        )
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let n = self.dim(a);
        if start + len > n {
            return self.fail(format!("slice: {start}..{} out of range {n}", start + len));
        }
        let value = self.value(a)[start..start + len].to_vec();
        let t = self.tracked(&[a]);
        self.push(value, Op::Slice(a, start), t)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::with_capacity(parts.iter().map(|p| self.dim(*p)).sum());
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        let t = self.tracked(parts);
        self.push(value, Op::Concat(parts.to_vec()), t)
    }

    /// `sum_i a_i^2` as a length-1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let t = self.tracked(&[a]);
        self.push(vec![s], Op::SumSquares(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let t = self.tracked(&[a]);
        self.push(vec![s], Op::Sum(a), t)
    }

    /// Dense row-major `matrix * x`.
    pub fn matvec(&mut self, matrix: &[f64], rows: usize, x: Var) -> Var {
        let cols = self.dim(x);
        if rows * cols != matrix.len() {
            return self.fail(format!(
                "matvec: matrix of {} entries is not {rows}x{cols}",
                matrix.len()
            ));
        }
        let xv = self.value(x);
        let value = matrix
            .chunks_exact(cols.max(1))
            .take(rows)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        let t = self.tracked(&[x]);
        self.push(
            value,
            Op::MatVec {
                x,
                matrix: matrix.into(),
                rows,
            },
            t,
        )
    }

    /// Reverse sweep from `output` seeded with `cotangent`. Returns the
    /// gradient of every node, `None` where no gradient flows.
    fn backward(&self, output: Var, cotangent: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(cotangent.to_vec());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulator for a parent, allocated lazily; None when untracked.
        fn acc<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f64>>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].tracked {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = acc(nodes, grads, v) {
                        add_into(ga, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g, 1.0);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    add_into(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g, *s);
                }
            }
            Op::Axpy(base, dir, h) => {
                if let Some(gb) = acc(nodes, grads, *base) {
                    add_into(gb, g, 1.0);
                }
                if let Some(gd) = acc(nodes, grads, *dir) {
                    add_into(gd, g, *h);
                }
            }
            Op::Rk4(base, k, dt) => {
                if let Some(gb) = acc(nodes, grads, *base) {
                    add_into(gb, g, 1.0);
                }
                let w = dt / 6.0;
                for (j, kk) in k.iter().enumerate() {
                    let c = if j == 1 || j == 2 { 2.0 * w } else { w };
                    if let Some(gk) = acc(nodes, grads, *kk) {
                        add_into(gk, g, c);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Poly(a, coeffs) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, gi), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gi * kernels::poly_derivative(coeffs, x);
                    }
                }
            }
            Op::L96(a, n) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    kernels::l96_adjoint(av, *n, g, ga);
                }
            }
            Op::TwoScale(a, coeffs) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    kernels::two_scale_adjoint(coeffs, av, g, ga);
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                shape,
            } => {
                let iv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                // Distinct nodes, so the three buffers can be taken out and
                // handed to the kernel together.
                let mut gin = acc(nodes, grads, *input).map(std::mem::take);
                let mut gw = acc(nodes, grads, *weight).map(std::mem::take);
                let mut gb = acc(nodes, grads, *bias).map(std::mem::take);
                kernels::conv_adjoint(
                    *shape,
                    iv,
                    wv,
                    g,
                    gin.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(*input, gin), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(&mut ga[*start..*start + g.len()], g, 1.0);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = acc(nodes, grads, *p) {
                        add_into(gp, &g[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::SumSquares(a) => {
                let av = &nodes[a.0].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    let s = 2.0 * g[0];
                    for (o, x) in ga.iter_mut().zip(av) {
                        *o += s * x;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::MatVec { x, matrix, rows } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let cols = gx.len();
                    for (r, gi) in g.iter().enumerate().take(*rows) {
                        for (o, m) in gx.iter_mut().zip(&matrix[r * cols..(r + 1) * cols]) {
                            *o += gi * m;
                        }
                    }
                }
            }
        }
    }

    fn named_grads(&self, grads: &mut [Option<Vec<f64>>]) -> BTreeMap<String, Vec<f64>> {
        self.inputs
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0].take().unwrap_or_else(|| vec![0.0; self.dim(*v)]);
                (name.clone(), g)
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    if s == 1.0 {
        for (d, v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    } else {
        for (d, v) in dst.iter_mut().zip(src) {
            *d += s * v;
        }
    }
}

/// Scalar objective value with gradients per named input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
    /// True when the value or any gradient entry is NaN or infinite.
    pub nonfinite: bool,
}

impl GradientResult {
    pub fn grad(&self, name: &str) -> &[f64] {
        &self.grads[name]
    }
}

/// Output of a program together with its vector-Jacobian product.
#[derive(Debug, Clone, PartialEq)]
pub struct VjpResult {
    pub output: Vec<f64>,
    pub grads: BTreeMap<String, Vec<f64>>,
}

fn build<F>(inputs: &[(&str, &[f64])], program: F) -> (Graph, Var)
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(name, v)| g.input(name, v)).collect();
    let out = program(&mut g, &vars);
    (g, out)
}

/// Runs `program` on a fresh tape and returns its scalar value and the
/// gradient with respect to each named input. The program receives the
/// input handles in the order given.
pub fn evaluate_with_gradient<F>(inputs: &[(&str, &[f64])], program: F) -> Result<GradientResult>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let (g, out) = build(inputs, program);
    if let Some(e) = g.error {
        return Err(e);
    }
    if g.dim(out) != 1 {
        return Err(Error::Shape(format!(
            "objective must be scalar, got length {}",
            g.dim(out)
        )));
    }
    let value = g.value(out)[0];
    let mut grads = g.backward(out, &[1.0]);
    let grads = g.named_grads(&mut grads);
    let nonfinite = !value.is_finite() || grads.values().flatten().any(|v| !v.is_finite());
    Ok(GradientResult {
        value,
        grads,
        nonfinite,
    })
}

/// Vector-Jacobian product `J^T cotangent` of `program` at `inputs`.
pub fn vjp<F>(inputs: &[(&str, &[f64])], cotangent: &[f64], program: F) -> Result<VjpResult>
where
    F: FnOnce(&mut Graph, &[Var]) -> Var,
{
    let (g, out) = build(inputs, program);
    if let Some(e) = g.error {
        return Err(e);
    }
    if g.dim(out) != cotangent.len() {
        return Err(Error::Shape(format!(
            "cotangent length {} does not match output length {}",
            cotangent.len(),
            g.dim(out)
        )));
    }
    let mut grads = g.backward(out, cotangent);
    Ok(VjpResult {
        output: g.value(out).to_vec(),
        grads: g.named_grads(&mut grads),
    })
}

/// One taped RK4 step with tendency `f`, staged exactly like
/// [`crate::dynamics::Rk4::step`].
pub fn rk4_step_graph<F>(g: &mut Graph, x: Var, dt: f64, mut f: F) -> Var
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let half = 0.5 * dt;
    let k1 = f(g, x);
    let s = g.axpy(x, k1, half);
    let k2 = f(g, s);
    let s = g.axpy(x, k2, half);
    let k3 = f(g, s);
    let s = g.axpy(x, k3, dt);
    let k4 = f(g, s);
    g.rk4_combine(x, [k1, k2, k3, k4], dt)
}

/// Central finite-difference gradient of a scalar function.
pub fn central_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + step;
            let up = f(&xp);
            xp[i] = orig - step;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `max_i |ad_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn max_relative_error(ad: &[f64], fd: &[f64]) -> f64 {
    ad.iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / (f.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn tanh_sum_at_zero_has_unit_gradient() {
        let x = vec![0.0; 5];
        let r = evaluate_with_gradient(&[("x", &x)], |g, v| {
            let t = g.tanh(v[0]);
            g.sum(t)
        })
        .unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad("x"), &[1.0; 5]);
    }

    #[test]
    fn half_squared_distance() {
        let x = [1.0, -2.0, 0.5];
        let y = [0.5, 1.0, 0.5];
        let r = evaluate_with_gradient(&[("x", &x)], |g, v| {
            let c = g.constant(&y);
            let d = g.sub(v[0], c);
            let s = g.sum_squares(d);
            g.scale(s, 0.5)
        })
        .unwrap();
        assert_eq!(r.grad("x"), &[0.5, -3.0, 0.0]);
        assert_eq!(r.value, 0.5 * (0.25 + 9.0));
    }

    #[test]
    fn identity_vjp_returns_cotangent() {
        let x = [3.0, 4.0];
        let r = vjp(&[("x", &x)], &[0.25, -1.5], |_, v| v[0]).unwrap();
        assert_eq!(r.grads["x"], vec![0.25, -1.5]);
        assert_eq!(r.output, x.to_vec());
    }

    #[test]
    fn matvec_vjp_is_explicit_transpose() {
        let a = [
            1.0, 2.0, 0.0, -1.0, //
            0.5, 0.0, 3.0, 1.0, //
            -2.0, 1.0, 1.0, 0.0, //
            0.0, 4.0, -0.5, 2.0,
        ];
        let x = [0.3, -0.7, 1.1, 2.0];
        let w = [1.0, -2.0, 0.5, 3.0];
        let r = vjp(&[("x", &x)], &w, |g, v| g.matvec(&a, 4, v[0])).unwrap();
        let expect: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|i| a[i * 4 + j] * w[i]).sum())
            .collect();
        assert_eq!(r.grads["x"], expect);
    }

    #[test]
    fn chain_rule_composes_vjps() {
        // f(y) = tanh(y) * y, g(x) = l96(x)
        let mut rng = seed::rng_from(3);
        let x = random_vec(&mut rng, 8);
        let w = random_vec(&mut rng, 8);
        let whole = vjp(&[("x", &x)], &w, |g, v| {
            let y = g.l96(v[0], 8, 8.0);
            let t = g.tanh(y);
            g.mul(t, y)
        })
        .unwrap();
        let inner = vjp(&[("x", &x)], &w, |g, v| g.l96(v[0], 8, 8.0)).unwrap();
        let outer = vjp(&[("y", &inner.output)], &w, |g, v| {
            let t = g.tanh(v[0]);
            g.mul(t, v[0])
        })
        .unwrap();
        let chained = vjp(&[("x", &x)], &outer.grads["y"], |g, v| g.l96(v[0], 8, 8.0)).unwrap();
        for (a, b) in whole.grads["x"].iter().zip(&chained.grads["x"]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_program_has_zero_gradient() {
        let x = [1.0, 2.0];
        let r = evaluate_with_gradient(&[("x", &x)], |g, _| {
            let c = g.constant(&[3.0, 4.0]);
            g.sum_squares(c)
        })
        .unwrap();
        assert_eq!(r.value, 25.0);
        assert_eq!(r.grad("x"), &[0.0, 0.0]);
        assert!(!r.nonfinite);
    }

    #[test]
    fn shape_errors_are_reported() {
        let x = [1.0, 2.0];
        let y = [1.0, 2.0, 3.0];
        let e = evaluate_with_gradient(&[("x", &x), ("y", &y)], |g, v| {
            let s = g.add(v[0], v[1]);
            g.sum(s)
        });
        assert!(matches!(e, Err(Error::Shape(_))));
        let e = vjp(&[("x", &x)], &[1.0], |_, v| v[0]);
        assert!(matches!(e, Err(Error::Shape(_))));
        let e = evaluate_with_gradient(&[("x", &x)], |_, v| v[0]);
        assert!(matches!(e, Err(Error::Shape(_))));
    }

    #[test]
    fn nonfinite_is_flagged_not_fatal() {
        let x = [f64::MAX, 1.0];
        let r = evaluate_with_gradient(&[("x", &x)], |g, v| g.sum_squares(v[0])).unwrap();
        assert!(r.nonfinite);
    }

    #[test]
    fn rk4_tape_matches_plain_step_bitwise() {
        use crate::dynamics::{rk4_step, L96};
        let mut rng = seed::rng_from(9);
        let x: Vec<f64> = random_vec(&mut rng, 36).iter().map(|v| 8.0 + 3.0 * v).collect();
        let plain = rk4_step(&L96 { n: 36, forcing: 8.0 }, &x, 0.05);
        let r = vjp(&[("x", &x)], &[0.0; 36], |g, v| {
            rk4_step_graph(g, v[0], 0.05, |g, s| g.l96(s, 36, 8.0))
        })
        .unwrap();
        assert_eq!(r.output, plain);
    }

    fn check_fd<F>(x: &[f64], program: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let r = evaluate_with_gradient(&[("x", x)], |g, v| program(g, v[0])).unwrap();
        let f = |p: &[f64]| {
            evaluate_with_gradient(&[("x", p)], |g, v| program(g, v[0]))
                .unwrap()
                .value
        };
        let fd = central_difference(f, x, 1e-5);
        let err = max_relative_error(r.grad("x"), &fd);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = seed::rng_from(21);
        let x = random_vec(&mut rng, 12);
        check_fd(&x, |g, v| {
            let t = g.tanh(v);
            let p = g.poly(t, &[0.1, -0.5, 0.3, 0.2, -0.05]);
            let m = g.mul(p, v);
            g.sum_squares(m)
        });
        let coeffs = Arc::new(TwoScaleCoeffs::new(4, 3, 10.0, 1.0, 10.0, 10.0));
        let x = random_vec(&mut rng, 16);
        check_fd(&x, |g, v| {
            let f = g.two_scale(v, &coeffs);
            let s = g.slice(f, 2, 9);
            let c = g.concat(&[s, v]);
            g.sum_squares(c)
        });
        let x = random_vec(&mut rng, 2 * 8 + 2 * 3 * 3 + 2);
        check_fd(&x, |g, v| {
            let shape = ConvShape {
                batch: 1,
                cin: 2,
                cout: 2,
                n: 8,
                window: 3,
            };
            let input = g.slice(v, 0, 16);
            let w = g.slice(v, 16, 12);
            let b = g.slice(v, 28, 2);
            let y = g.conv(input, w, b, shape);
            let t = g.tanh(y);
            g.sum_squares(t)
        });
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gradient_is_linear_in_objective(a in -3.0..3.0f64, b in -3.0..3.0f64, s in 0u64..1000) {
            let mut rng = seed::rng_from(s);
            let x = random_vec(&mut rng, 8);
            let f = |g: &mut Graph, v: Var| { let y = g.l96(v, 8, 8.0); g.sum_squares(y) };
            let h = |g: &mut Graph, v: Var| { let y = g.tanh(v); g.sum(y) };
            let both = evaluate_with_gradient(&[("x", &x)], |g, v| {
                let fa = f(g, v[0]);
                let hb = h(g, v[0]);
                let fa = g.scale(fa, a);
                let hb = g.scale(hb, b);
                g.add(fa, hb)
            }).unwrap();
            let gf = evaluate_with_gradient(&[("x", &x)], |g, v| f(g, v[0])).unwrap();
            let gh = evaluate_with_gradient(&[("x", &x)], |g, v| h(g, v[0])).unwrap();
            for i in 0..8 {
                let lin = a * gf.grad("x")[i] + b * gh.grad("x")[i];
                prop_assert!((both.grad("x")[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
            }
        }
    }
}
