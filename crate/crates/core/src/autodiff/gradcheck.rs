use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Coordinates probed per tensor.
const MAX_COORDS: usize = 24;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        sample(rng, len, MAX_COORDS).into_vec()
    }
}

/// Projects the output on fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Max relative error between analytic and central-difference gradients of
/// `f` with respect to each input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new(false, seed);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = scalarize(&mut g, out, seed)?;
        let value = g.value(loss).data()[0];
        let mut gs = Vec::new();
        if grads {
            g.backward(loss)?;
            gs = vars.iter().map(|&v| g.grad(v).expect("inputs are tracked")).collect();
        }
        Ok((value, gs))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for ti in 0..xs.len() {
        for c in coords(xs[ti].numel(), &mut rng) {
            let orig = xs[ti].data()[c];
            xs[ti].data_mut()[c] = orig + eps;
            let (fp, _) = eval(&xs, false)?;
            xs[ti].data_mut()[c] = orig - eps;
            let (fm, _) = eval(&xs, false)?;
            xs[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[ti].data()[c], numeric));
        }
    }
    Ok(worst)
}

/// As [`grad_check`] but differentiates with respect to every parameter
/// in `store` that `f` loads.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>, grads: bool| -> Result<(f64, ParamStore<f64>)> {
        let mut g = Graph::new(false, seed);
        let out = f(&mut g, st)?;
        let loss = scalarize(&mut g, out, seed)?;
        let value = g.value(loss).data()[0];
        let mut acc = st.clone();
        acc.zero_grad();
        if grads {
            g.backward(loss)?;
            g.accumulate_into(&mut acc, 1.0)?;
        }
        Ok((value, acc))
    };
    let (_, analytic) = eval(store, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut st = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let Some(ga) = analytic.grad(&name)?.map(<[f64]>::to_vec) else {
            continue;
        };
        for c in coords(ga.len(), &mut rng) {
            let orig = st.value(&name)?.data()[c];
            st.value_mut(&name)?.data_mut()[c] = orig + eps;
            let (fp, _) = eval(&st, false)?;
            st.value_mut(&name)?.data_mut()[c] = orig - eps;
            let (fm, _) = eval(&st, false)?;
            st.value_mut(&name)?.data_mut()[c] = orig;
            worst = worst.max(rel_err(ga[c], (fp - fm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
