use super::element::{gemm, Element, Mat};
use super::graph::{Graph, Var};
use super::ops::softmax_in_place;
use super::tensor::Shape;
use crate::error::{Error, Result};

fn head_cols<E: Element>(x: &[E], n: usize, d: usize, h: usize, dh: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(n * dh);
    for r in 0..n {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn add_head_cols<E: Element>(dst: &mut [E], src: &[E], n: usize, d: usize, h: usize, dh: usize) {
    for r in 0..n {
        for j in 0..dh {
            let i = r * d + h * dh + j;
            dst[i] = dst[i] + src[r * dh + j];
        }
    }
}

impl<E: Element> Graph<'_, E> {
    /// Bidirectional multi-head scaled dot-product attention over sequence-major
    /// (N, D) inputs. Heads split D into equal contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).clone();
        if shape.rank() != 2 || self.shape(k) != &shape || self.shape(v) != &shape {
            return Err(Error::shape(
                "attention",
                format!("q {} k {} v {} must be equal (N, D)", shape, self.shape(k), self.shape(v)),
            ));
        }
        let (n, d) = shape.as_matrix();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = E::of(1.0 / (dh as f64).sqrt());
        let mut out = vec![E::zero(); n * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_cols(self.value(q), n, d, h, dh);
            let kh = head_cols(self.value(k), n, d, h, dh);
            let vh = head_cols(self.value(v), n, d, h, dh);
            let mut s = vec![E::zero(); n * n];
            gemm(Mat::new(&qh, n, dh), Mat::new(&kh, n, dh).t(), &mut s, E::zero());
            for r in s.chunks_mut(n) {
                for x in r.iter_mut() {
                    *x = *x * scale;
                }
                softmax_in_place(r);
            }
            let mut oh = vec![E::zero(); n * dh];
            gemm(Mat::new(&s, n, n), Mat::new(&vh, n, dh), &mut oh, E::zero());
            add_head_cols(&mut out, &oh, n, d, h, dh);
            probs.push(s);
        }
        if !self.grad_enabled() {
            probs.clear();
        }
        Ok(self.push_op(Shape(vec![n, d]), out, &[q, k, v], move |ctx, grads| {
            let mut dq = vec![E::zero(); n * d];
            let mut dk = vec![E::zero(); n * d];
            let mut dv = vec![E::zero(); n * d];
            for (h, p) in probs.iter().enumerate() {
                let qh = head_cols(ctx.val(q), n, d, h, dh);
                let kh = head_cols(ctx.val(k), n, d, h, dh);
                let vh = head_cols(ctx.val(v), n, d, h, dh);
                let go = head_cols(ctx.gout, n, d, h, dh);
                let mut dvh = vec![E::zero(); n * dh];
                gemm(Mat::new(p, n, n).t(), Mat::new(&go, n, dh), &mut dvh, E::zero());
                add_head_cols(&mut dv, &dvh, n, d, h, dh);
                let mut dp = vec![E::zero(); n * n];
                gemm(Mat::new(&go, n, dh), Mat::new(&vh, n, dh).t(), &mut dp, E::zero());
                for (pr, dr) in p.chunks(n).zip(dp.chunks_mut(n)) {
                    let dot: E = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let mut dqh = vec![E::zero(); n * dh];
                gemm(Mat::new(&dp, n, n), Mat::new(&kh, n, dh), &mut dqh, E::zero());
                add_head_cols(&mut dq, &dqh, n, d, h, dh);
                let mut dkh = vec![E::zero(); n * dh];
                gemm(Mat::new(&dp, n, n).t(), Mat::new(&qh, n, dh), &mut dkh, E::zero());
                add_head_cols(&mut dk, &dkh, n, d, h, dh);
            }
            grads.add(q, &dq);
            grads.add(k, &dk);
            grads.add(v, &dv);
        }))
    }
}
