//! Parameterized layers built on the autograd graph.

use crate::numerics::{Element, Graph, ParamGrads, ParamId, ParamStore, Rng, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Linear {
            w: store.add_fan_in(format!("{name}.weight"), [fan_out, fan_in], fan_in, rng),
            b: store.add_const(format!("{name}.bias"), [fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    /// Zero-initialized layer; used for residual output projections.
    pub fn zeros<E: Element>(store: &mut ParamStore<E>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add_const(format!("{name}.weight"), [fan_out, fan_in], 0.0),
            b: store.add_const(format!("{name}.bias"), [fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.weight"), [dim], 1.0),
            beta: store.add_const(format!("{name}.bias"), [dim], 0.0),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    /// Group count is `min(8, channels)`, reduced until it divides `channels`.
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Self {
        let mut groups = channels.min(8);
        while channels % groups != 0 {
            groups -= 1;
        }
        GroupNorm {
            gamma: store.add_const(format!("{name}.weight"), [channels], 1.0),
            beta: store.add_const(format!("{name}.bias"), [channels], 0.0),
            groups,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, self.groups, gamma, beta, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    w: ParamId,
    b: ParamId,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3d {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        Conv3d {
            w: store.add_fan_in(
                format!("{name}.weight"),
                [cout, cin, kernel[0], kernel[1], kernel[2]],
                fan_in,
                rng,
            ),
            b: store.add_const(format!("{name}.bias"), [cout], 0.0),
            stride,
            pad: kernel.map(|k| k / 2),
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Pre-norm transformer block: bidirectional self-attention then a SiLU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), width, width * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), width * mlp_ratio, width, rng),
            heads,
        }
    }

    pub fn forward<E: Element>(&self, g: &mut Graph<'_, E>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let q = self.q.forward(g, h)?;
        let k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        let a = g.attention(q, k, v, self.heads)?;
        let a = self.out.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Learned lookup table of row vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
}

impl Embedding {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding {
            table: store.add_normal(format!("{name}.table"), [rows, dim], 0.02, rng),
        }
    }

    pub fn lookup<E: Element>(&self, g: &mut Graph<'_, E>, idx: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, idx)
    }
}

/// Builds one graph per sample, backpropagates each sample loss and sums
/// losses and gradients in index order. Samples may run on the rayon pool;
/// the fixed reduction order keeps totals bit-identical for any thread count.
pub fn sample_grads<E, F>(store: &ParamStore<E>, n: usize, f: F) -> Result<(f64, ParamGrads<E>)>
where
    E: Element,
    F: Fn(usize, &mut Graph<'_, E>) -> Result<Var> + Sync,
{
    use rayon::prelude::*;
    let parts: Vec<(f64, ParamGrads<E>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::with_params(store);
            let loss = f(i, &mut g)?;
            let lv = g.scalar(loss).f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite { what: format!("loss of sample {i}") });
            }
            g.backward(loss)?;
            Ok((lv, g.param_grads()))
        })
        .collect::<Result<_>>()?;
    let mut total = ParamGrads::empty(store.len());
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}
