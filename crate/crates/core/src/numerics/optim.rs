use super::element::Element;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 8e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay. Decay is
/// applied to weight matrices and kernels (rank ≥ 2) only.
#[derive(Clone, Debug)]
pub struct AdamW<E> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(store: &ParamStore<E>, config: AdamWConfig) -> Self {
        let zeros = |_| Vec::new();
        AdamW {
            config,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(zeros).collect(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// clears them. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = &store.get(id).grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of parameter `{}`", store.name(id)),
                    });
                }
            }
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = store
                    .ids()
                    .filter_map(|id| store.get(id).grad.as_ref())
                    .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1e, b2e) = (E::of(b1), E::of(b2));
        let (lr_e, eps_e, clip_e) = (E::of(lr), E::of(eps), E::of(clip));
        let (bc1e, bc2e) = (E::of(bc1), E::of(bc2));
        for id in store.ids() {
            let i = id.index();
            let t = store.get_mut(id);
            let Some(g) = t.grad.take() else { continue };
            let decay = if t.dims().len() >= 2 {
                E::of(1.0 - lr * weight_decay)
            } else {
                E::one()
            };
            let n = g.len();
            if self.m[i].len() != n {
                self.m[i] = vec![E::zero(); n];
                self.v[i] = vec![E::zero(); n];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip_e;
                m[j] = b1e * m[j] + (E::one() - b1e) * gj;
                v[j] = b2e * v[j] + (E::one() - b2e) * gj * gj;
                let mhat = m[j] / bc1e;
                let vhat = v[j] / bc2e;
                *p = *p * decay - lr_e * mhat / (vhat.sqrt() + eps_e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with(v: f64, shape: &[usize]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n: usize = shape.iter().product();
        s.add("p", Tensor::from_f64(shape, &vec![v; n]).unwrap());
        s
    }

    #[test]
    fn zero_grad_leaves_parameter_unchanged() {
        let mut s = store_with(1.5, &[2]);
        let mut opt = AdamW::new(&s, AdamWConfig { lr: 0.1, ..Default::default() });
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[1.5, 1.5]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn single_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps) ≈ lr.
        let mut s = store_with(1.0, &[1]);
        let mut opt = AdamW::new(&s, AdamWConfig { lr: 0.1, ..Default::default() });
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        opt.step(&mut s).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - want).abs() < 1e-15);
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store_with(1.0, &[1]);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[f64::NAN]);
        let err = opt.step(&mut s).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = store_with(2.0, &[1, 1]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(&s, cfg);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0]);
        opt.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn generative_default_learning_rate() {
        assert_eq!(AdamWConfig::default().lr, 8e-4);
    }
}
