//! Test support: central finite-difference gradient oracle and the catalogue
//! of differentiable ops it is run against. Only compiled with the `testing`
//! feature.

use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::Result;

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-6)
}

fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Max relative error between analytic input gradients of `f` and central
/// differences with step `h`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(&t.clone().with_grad()))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new().no_grad();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t)).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.scalar(l))
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let num = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], num));
        }
    }
    Ok(worst)
}

/// Same as [`check_inputs`] but differentiates with respect to every
/// parameter of `store`. At most `max_per_param` elements of each parameter
/// are probed, spread evenly across the tensor. The zero floor grows with the
/// loss, since central-difference roundoff scales with |loss| / h.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, h: f64, max_per_param: usize) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let floor = 1e-6 * g.scalar(loss).abs().max(1.0);
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = (n / max_per_param.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |g| g[j]);
            let mut s = store.clone();
            s.get_mut(id).data_mut()[j] += h;
            let plus = {
                let mut g = Graph::with_params(&s).no_grad();
                let l = f(&mut g)?;
                g.scalar(l)
            };
            s.get_mut(id).data_mut()[j] -= 2.0 * h;
            let minus = {
                let mut g = Graph::with_params(&s).no_grad();
                let l = f(&mut g)?;
                g.scalar(l)
            };
            worst = worst.max(rel_err_floor(analytic, (plus - minus) / (2.0 * h), floor));
        }
    }
    Ok(worst)
}

type CaseFn = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

/// One differentiable op under test: its inputs and a scalar-valued probe.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CaseFn,
}

impl OpCase {
    pub fn max_rel_err(&self, h: f64) -> Result<f64> {
        check_inputs(&self.inputs, &self.f, h)
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal() * scale).collect();
    Tensor::from_f64(shape, &data).expect("shape matches")
}

/// Contracts `y` with fixed random weights so every output element matters.
fn probe(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let n = g.value(y).len();
    let w: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let shape = g.shape(y).clone();
    let wv = g.constant_f64(shape, &w)?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

macro_rules! case {
    ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {
        OpCase {
            name: $name,
            inputs: vec![$($t),*],
            f: Box::new(move |$g: &mut Graph<'_, f64>, $v: &[Var]| {
                let y = $body;
                probe($g, y, 99)
            }),
        }
    };
}

/// Every differentiable op of the substrate, with random 64-bit inputs.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = Rng::new(seed);
    let r = &mut r;
    // Inputs kept away from the leaky-relu kink.
    let mut away = rand_tensor(r, &[3, 4], 1.0);
    for v in away.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.3f64.copysign(*v);
        }
    }
    vec![
        case!("add", [rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0)], |g, v| g.add(v[0], v[1])?),
        case!("sub", [rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0)], |g, v| g.sub(v[0], v[1])?),
        case!("mul", [rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[3, 4], 1.0)], |g, v| g.mul(v[0], v[1])?),
        case!("mul_scalar_broadcast", [rand_tensor(r, &[], 1.0), rand_tensor(r, &[3, 4], 1.0)], |g, v| g.mul(v[0], v[1])?),
        case!("sub_scalar_broadcast", [rand_tensor(r, &[], 1.0), rand_tensor(r, &[5], 1.0)], |g, v| g.sub(v[0], v[1])?),
        case!("scale", [rand_tensor(r, &[6], 1.0)], |g, v| g.scale(v[0], -1.7)),
        case!("add_scalar", [rand_tensor(r, &[6], 1.0)], |g, v| g.add_scalar(v[0], 0.3)),
        case!("exp", [rand_tensor(r, &[6], 1.0)], |g, v| g.exp(v[0])),
        case!("square", [rand_tensor(r, &[6], 1.0)], |g, v| g.square(v[0])),
        case!("sigmoid", [rand_tensor(r, &[6], 2.0)], |g, v| g.sigmoid(v[0])),
        case!("tanh", [rand_tensor(r, &[6], 1.0)], |g, v| g.tanh(v[0])),
        case!("silu", [rand_tensor(r, &[6], 2.0)], |g, v| g.silu(v[0])),
        case!("leaky_relu", [away], |g, v| g.leaky_relu(v[0], 0.01)),
        case!("sum", [rand_tensor(r, &[2, 3], 1.0)], |g, v| g.sum(v[0])),
        case!("mean", [rand_tensor(r, &[2, 3], 1.0)], |g, v| g.mean(v[0])),
        case!("mse", [rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[2, 3], 1.0)], |g, v| g.mse(v[0], v[1])?),
        case!("reshape", [rand_tensor(r, &[2, 6], 1.0)], |g, v| g.reshape(v[0], [3, 4])?),
        case!("matmul", [rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4, 2], 1.0)], |g, v| g.matmul(v[0], v[1])?),
        case!("linear", [rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[5, 4], 1.0), rand_tensor(r, &[5], 1.0)],
            |g, v| g.linear(v[0], v[1], Some(v[2]))?),
        case!("transpose", [rand_tensor(r, &[3, 4], 1.0)], |g, v| g.transpose(v[0])?),
        case!("concat_rows", [rand_tensor(r, &[2, 3], 1.0), rand_tensor(r, &[1, 3], 1.0)], |g, v| g.concat_rows(&[v[0], v[1]])?),
        case!("slice_rows", [rand_tensor(r, &[4, 3], 1.0)], |g, v| g.slice_rows(v[0], 1, 3)?),
        case!("gather_rows", [rand_tensor(r, &[4, 3], 1.0)], |g, v| g.gather_rows(v[0], &[3, 0, 3, 1])?),
        case!("mean_rows", [rand_tensor(r, &[4, 3], 1.0)], |g, v| g.mean_rows(v[0])?),
        case!("softmax_rows", [rand_tensor(r, &[3, 5], 1.0)], |g, v| g.softmax_rows(v[0])),
        OpCase {
            name: "bce_with_logits",
            inputs: vec![rand_tensor(r, &[6], 2.0)],
            f: Box::new(|g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
        },
        case!("layer_norm", [rand_tensor(r, &[3, 5], 1.0), rand_tensor(r, &[5], 1.0), rand_tensor(r, &[5], 1.0)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)?),
        case!("group_norm", [rand_tensor(r, &[4, 2, 3, 2], 1.0), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[4], 1.0)],
            |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5)?),
        case!("conv3d", [rand_tensor(r, &[2, 3, 5, 4], 1.0), rand_tensor(r, &[3, 2, 3, 3, 3], 0.5), rand_tensor(r, &[3], 1.0)],
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1])?),
        case!("conv3d_temporal_stride", [rand_tensor(r, &[1, 4, 3, 3], 1.0), rand_tensor(r, &[2, 1, 3, 1, 2], 0.5)],
            |g, v| g.conv3d(v[0], v[1], None, [2, 1, 1], [1, 0, 1])?),
        case!("upsample_nearest3d", [rand_tensor(r, &[2, 2, 2, 3], 1.0)], |g, v| g.upsample_nearest3d(v[0], [2, 2, 1])?),
        case!("attention", [rand_tensor(r, &[4, 8], 1.0), rand_tensor(r, &[4, 8], 1.0), rand_tensor(r, &[4, 8], 1.0)],
            |g, v| g.attention(v[0], v[1], v[2], 2)?),
        OpCase {
            name: "composite",
            inputs: vec![rand_tensor(r, &[3, 4], 1.0), rand_tensor(r, &[4, 4], 0.5), rand_tensor(r, &[4], 1.0), rand_tensor(r, &[4], 1.0)],
            f: Box::new(|g, v| {
                let h = g.linear(v[0], v[1], None)?;
                let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
                let h = g.silu(h);
                let a = g.attention(h, h, h, 2)?;
                let s = g.softmax_rows(a);
                let m = g.mean_rows(s)?;
                let e = g.exp(m);
                probe(g, e, 7)
            }),
        },
    ]
}
