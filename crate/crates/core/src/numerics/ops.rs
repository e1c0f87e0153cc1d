//! Elementwise, reduction, matrix and row-manipulation ops.
//!
//! Shapes must match exactly. The only implicit broadcast is a one-element
//! operand against a full tensor.

use super::element::{gemm, Element, Mat};
use super::graph::{Graph, Var};
use super::tensor::Shape;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<E: Element> Graph<'_, E> {
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        // Put a one-element operand (if any) on the right.
        let (a, b, swapped) = if na == nb || nb == 1 {
            (a, b, false)
        } else if na == 1 {
            (b, a, true)
        } else {
            return Err(Error::shape(
                name,
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        };
        if na == nb && self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        let scalar_rhs = self.value(b).len() == 1 && self.value(a).len() != 1;
        let av = self.value(a);
        let bv = self.value(b);
        let bi = |i: usize| if scalar_rhs { bv[0] } else { bv[i] };
        let value: Vec<E> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bi(i);
                match (op, swapped) {
                    (Binary::Add, _) => x + y,
                    (Binary::Sub, false) => x - y,
                    (Binary::Sub, true) => y - x,
                    (Binary::Mul, _) => x * y,
                }
            })
            .collect();
        let shape = self.shape(a).clone();
        Ok(self.push_op(shape, value, &[a, b], move |ctx, grads| {
            let g = ctx.gout;
            // Sign of each side under (possibly swapped) subtraction.
            let (sa, sb) = match (op, swapped) {
                (Binary::Sub, false) => (E::one(), -E::one()),
                (Binary::Sub, true) => (-E::one(), E::one()),
                _ => (E::one(), E::one()),
            };
            if grads.wants(a) {
                let bv = ctx.val(b);
                let ga = grads.slot(a).expect("wanted");
                for (i, d) in ga.iter_mut().enumerate() {
                    let local = match op {
                        Binary::Mul => {
                            if scalar_rhs {
                                bv[0]
                            } else {
                                bv[i]
                            }
                        }
                        _ => sa,
                    };
                    *d = *d + g[i] * local;
                }
            }
            if grads.wants(b) {
                let av = ctx.val(a);
                let gb = grads.slot(b).expect("wanted");
                if scalar_rhs {
                    let mut acc = E::zero();
                    for (i, &gi) in g.iter().enumerate() {
                        acc = acc
                            + gi * match op {
                                Binary::Mul => av[i],
                                _ => sb,
                            };
                    }
                    gb[0] = gb[0] + acc;
                } else {
                    for (i, d) in gb.iter_mut().enumerate() {
                        *d = *d
                            + g[i]
                                * match op {
                                    Binary::Mul => av[i],
                                    _ => sb,
                                };
                    }
                }
            }
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var {
        let value: Vec<E> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).clone();
        self.push_op(shape, value, &[a], move |ctx, grads| {
            let x = ctx.val(a);
            let y = ctx.out;
            let g = ctx.gout;
            if let Some(ga) = grads.slot(a) {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * df(x[i], y[i]);
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = E::of(c);
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = E::of(c);
        self.unary(a, move |x| x + c, |_, _| E::one())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let two = E::of(2.0);
        self.unary(a, |x| x * x, move |x, _| two * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (E::one() - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| E::one() - y * y)
    }

    /// x·sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * sigmoid(x),
            |x, y| {
                let s = sigmoid(x);
                s + y * (E::one() - s)
            },
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = E::of(slope);
        self.unary(
            a,
            move |x| if x >= E::zero() { x } else { x * s },
            move |x, _| if x >= E::zero() { E::one() } else { s },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().copied().sum();
        self.push_op(Shape(vec![]), vec![total], &[a], move |ctx, grads| {
            let g = ctx.gout[0];
            if let Some(ga) = grads.slot(a) {
                for d in ga.iter_mut() {
                    *d = *d + g;
                }
            }
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape.numel() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        Ok(self.push_op(shape, value, &[a], move |ctx, grads| {
            grads.add(a, ctx.gout);
        }))
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        if self.shape(a).rank() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {}", self.shape(a))));
        }
        Ok(self.shape(a).as_matrix())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{} × {}", self.shape(a), self.shape(b)),
            ));
        }
        let mut value = vec![E::zero(); m * n];
        gemm(
            Mat::new(self.value(a), m, k),
            Mat::new(self.value(b), k, n),
            &mut value,
            E::zero(),
        );
        Ok(self.push_op(Shape(vec![m, n]), value, &[a, b], move |ctx, grads| {
            let g = Mat::new(ctx.gout, m, n);
            if let Some(ga) = grads.slot(a) {
                gemm(g, Mat::new(ctx.val(b), k, n).t(), ga, E::one());
            }
            if let Some(gb) = grads.slot(b) {
                gemm(Mat::new(ctx.val(a), m, k).t(), g, gb, E::one());
            }
        }))
    }

    /// `x·wᵀ + b` for x (N, in), w (out, in), b (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, fin) = self.matrix_dims("linear", x)?;
        let (fout, fin2) = self.matrix_dims("linear", w)?;
        if fin != fin2 {
            return Err(Error::shape(
                "linear",
                format!("input {} vs weight {}", self.shape(x), self.shape(w)),
            ));
        }
        let mut value = vec![E::zero(); rows * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != fout {
                return Err(Error::shape(
                    "linear",
                    format!("bias {} vs {fout} outputs", self.shape(b)),
                ));
            }
            for r in value.chunks_mut(fout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(
            Mat::new(self.value(x), rows, fin),
            Mat::new(self.value(w), fout, fin).t(),
            &mut value,
            E::one(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push_op(Shape(vec![rows, fout]), value, &inputs, move |ctx, grads| {
            let g = Mat::new(ctx.gout, rows, fout);
            if let Some(gx) = grads.slot(x) {
                gemm(g, Mat::new(ctx.val(w), fout, fin), gx, E::one());
            }
            if let Some(gw) = grads.slot(w) {
                gemm(g.t(), Mat::new(ctx.val(x), rows, fin), gw, E::one());
            }
            if let Some(b) = b {
                if let Some(gb) = grads.slot(b) {
                    for r in ctx.gout.chunks(fout) {
                        for (d, &v) in gb.iter_mut().zip(r) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let av = self.value(a);
        let mut value = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push_op(Shape(vec![n, m]), value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = ga[i * n + j] + ctx.gout[j * m + i];
                    }
                }
            }
        }))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.matrix_dims("concat_rows", parts[0])?.1;
        let mut value = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            let (_, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns vs {cols}", c),
                ));
            }
            offsets.push(value.len());
            value.extend_from_slice(self.value(p));
        }
        let rows = value.len() / cols;
        let parts = parts.to_vec();
        Ok(self.push_op(Shape(vec![rows, cols]), value, &parts.clone(), move |ctx, grads| {
            for (&p, &off) in parts.iter().zip(&offsets) {
                let n = ctx.val(p).len();
                grads.add(p, &ctx.gout[off..off + n]);
            }
        }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {}", self.shape(a)),
            ));
        }
        let value = self.value(a)[start * cols..end * cols].to_vec();
        Ok(self.push_op(Shape(vec![end - start, cols]), value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (d, &v) in ga[start * cols..end * cols].iter_mut().zip(ctx.gout) {
                    *d = *d + v;
                }
            }
        }))
    }

    /// Row gather; repeated indices are allowed and scatter-add on backward.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", self.shape(a)),
            ));
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        let idx = idx.to_vec();
        Ok(self.push_op(Shape(vec![idx.len(), cols]), value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[i * cols + c] = ga[i * cols + c] + ctx.gout[r * cols + c];
                    }
                }
            }
        }))
    }

    /// Mean over rows: (N, D) → (1, D).
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("mean_rows", a)?;
        let av = self.value(a);
        let inv = E::of(1.0 / rows as f64);
        let mut value = vec![E::zero(); cols];
        for r in av.chunks(cols) {
            for (d, &v) in value.iter_mut().zip(r) {
                *d = *d + v;
            }
        }
        for v in &mut value {
            *v = *v * inv;
        }
        Ok(self.push_op(Shape(vec![1, cols]), value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for r in ga.chunks_mut(cols) {
                    for (d, &v) in r.iter_mut().zip(ctx.gout) {
                        *d = *d + v * inv;
                    }
                }
            }
        }))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a).as_matrix();
        let mut value = self.value(a).to_vec();
        for r in value.chunks_mut(cols) {
            softmax_in_place(r);
        }
        let shape = self.shape(a).clone();
        debug_assert_eq!(rows * cols, value.len());
        self.push_op(shape, value, &[a], move |ctx, grads| {
            if let Some(ga) = grads.slot(a) {
                for ((y, g), d) in ctx
                    .out
                    .chunks(cols)
                    .zip(ctx.gout.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: E = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[j] = d[j] + y[j] * (g[j] - dot);
                    }
                }
            }
        })
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{n} logits vs {} targets", targets.len()),
            ));
        }
        let t: Vec<E> = targets.iter().map(|&v| E::of(v)).collect();
        let inv = E::of(1.0 / n as f64);
        let loss: E = self
            .value(logits)
            .iter()
            .zip(&t)
            .map(|(&x, &y)| {
                // max(x,0) - x·y + log(1 + e^{-|x|})
                x.max(E::zero()) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum::<E>()
            * inv;
        Ok(self.push_op(Shape(vec![]), vec![loss], &[logits], move |ctx, grads| {
            let g = ctx.gout[0] * inv;
            let x = ctx.val(logits);
            if let Some(gl) = grads.slot(logits) {
                for i in 0..gl.len() {
                    gl[i] = gl[i] + g * (sigmoid(x[i]) - t[i]);
                }
            }
        }))
    }
}

pub(crate) fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub(crate) fn softmax_in_place<E: Element>(r: &mut [E]) {
    let m = r.iter().copied().fold(E::neg_infinity(), E::max);
    let mut s = E::zero();
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in r.iter_mut() {
        *v = *v / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn leaf(g: &mut Graph<'_, f64>, shape: &[usize], v: &[f64]) -> Var {
        g.input(&Tensor::from_f64(shape, v).unwrap().with_grad())
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = leaf(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 1], &[5.0, 6.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_identity_and_shape_law() {
        let mut g = Graph::<f64>::new();
        let eye = leaf(&mut g, &[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = leaf(&mut g, &[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
        let x = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let y = leaf(&mut g, &[3, 4], &[0.0; 12]);
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.dims(z), &[2, 4]);
    }

    #[test]
    fn matmul_mismatch_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let y = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let msg = g.matmul(x, y).unwrap_err().to_string();
        assert!(msg.contains("(2×3) × (2×3)"), "{msg}");
    }

    #[test]
    fn no_silent_broadcast() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[2, 3], &[0.0; 6]);
        let y = leaf(&mut g, &[3], &[0.0; 3]);
        assert!(g.add(x, y).is_err());
        let s = leaf(&mut g, &[], &[2.0]);
        let z = g.mul(s, x).unwrap();
        assert_eq!(g.dims(z), &[2, 3]);
    }

    #[test]
    fn leaky_relu_and_softmax_basics() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[1], &[-1.0]);
        let y = g.leaky_relu(x, 0.01);
        assert_eq!(g.value(y), &[-0.01]);
        let c = leaf(&mut g, &[1, 5], &[3.0; 5]);
        let s = g.softmax_rows(c);
        for &v in g.value(s) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut g = Graph::<f64>::new();
        let x = leaf(&mut g, &[3], &[0.3, -2.0, 5.0]);
        let l = g.bce_with_logits(x, &[1.0, 0.0, 0.0]).unwrap();
        let p = |v: f64| 1.0 / (1.0 + (-v).exp());
        let want = -((p(0.3)).ln() + (1.0 - p(-2.0)).ln() + (1.0 - p(5.0)).ln()) / 3.0;
        assert!((g.scalar(l) - want).abs() < 1e-12);
    }
}
