use super::element::Element;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// How an element maps onto its affine parameter.
#[derive(Clone, Copy)]
enum AffineIndex {
    /// Column within a row (layer norm).
    Column(usize),
    /// Channel of a (C, S) layout (group norm).
    Channel(usize),
}

impl AffineIndex {
    fn of(self, i: usize) -> usize {
        match self {
            AffineIndex::Column(cols) => i % cols,
            AffineIndex::Channel(s) => i / s,
        }
    }
}

fn segment_stats<E: Element>(seg: &[E], eps: E) -> (E, E) {
    let n = E::of(seg.len() as f64);
    let mean = seg.iter().copied().sum::<E>() / n;
    let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
    (mean, E::one() / (var + eps).sqrt())
}

impl<E: Element> Graph<'_, E> {
    fn normalize(
        &mut self,
        x: Var,
        seg_len: usize,
        idx: AffineIndex,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let eps = E::of(eps);
        let xv = self.value(x);
        let mut value = vec![E::zero(); xv.len()];
        {
            let gv = self.value(gamma);
            let bv = self.value(beta);
            for (s, (src, dst)) in xv.chunks(seg_len).zip(value.chunks_mut(seg_len)).enumerate() {
                let (mean, inv) = segment_stats(src, eps);
                for (j, (&v, d)) in src.iter().zip(dst.iter_mut()).enumerate() {
                    let a = idx.of(s * seg_len + j);
                    *d = (v - mean) * inv * gv[a] + bv[a];
                }
            }
        }
        let shape = self.shape(x).clone();
        Ok(self.push_op(shape, value, &[x, gamma, beta], move |ctx, grads| {
            let xv = ctx.val(x);
            let gv = ctx.val(gamma);
            let g = ctx.gout;
            let n = E::of(seg_len as f64);
            let mut dgamma = vec![E::zero(); gv.len()];
            let mut dbeta = vec![E::zero(); gv.len()];
            let mut dx = if grads.wants(x) {
                Some(vec![E::zero(); xv.len()])
            } else {
                None
            };
            let mut xhat = vec![E::zero(); seg_len];
            let mut dxhat = vec![E::zero(); seg_len];
            for s in 0..xv.len() / seg_len {
                let off = s * seg_len;
                let src = &xv[off..off + seg_len];
                let (mean, inv) = segment_stats(src, eps);
                let mut sum_d = E::zero();
                let mut sum_dx = E::zero();
                for j in 0..seg_len {
                    let a = idx.of(off + j);
                    xhat[j] = (src[j] - mean) * inv;
                    dgamma[a] = dgamma[a] + g[off + j] * xhat[j];
                    dbeta[a] = dbeta[a] + g[off + j];
                    dxhat[j] = g[off + j] * gv[a];
                    sum_d = sum_d + dxhat[j];
                    sum_dx = sum_dx + dxhat[j] * xhat[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let md = sum_d / n;
                    let mdx = sum_dx / n;
                    for j in 0..seg_len {
                        dx[off + j] = inv * (dxhat[j] - md - xhat[j] * mdx);
                    }
                }
            }
            if let Some(dx) = dx {
                grads.add(x, &dx);
            }
            grads.add(gamma, &dgamma);
            grads.add(beta, &dbeta);
        }))
    }

    /// Per-row normalization of (N, D) followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (_, cols) = self.shape(x).as_matrix();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("input {} vs affine {} / {}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        self.normalize(x, cols, AffineIndex::Column(cols), gamma, beta, eps)
    }

    /// Group normalization of a channel-first tensor (C, ...) with a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let c = dims[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "group_norm",
                format!("input {} vs affine {} / {}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let spatial: usize = dims[1..].iter().product();
        let seg = spatial * (c / groups);
        self.normalize(x, seg, AffineIndex::Channel(spatial), gamma, beta, eps)
    }
}
