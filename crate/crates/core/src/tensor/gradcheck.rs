//! Central finite-difference gradient checking.

use rand::Rng as _;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::rng::{self, Rng};

const REL_FLOOR: f64 = 1e-8;

/// Compares recorded gradients of a scalar function against central finite
/// differences and returns the largest relative error
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    gradient_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        Execution::Sequential,
    )
}

/// Multi-input variant of [`gradient_check`]. Every input is treated as a
/// trainable leaf; perturbations are evaluated with `exec`.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], eps: f64, exec: Execution) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().requiring_grad())
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    g.item(out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&leaves)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };

    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(t, leaf)| (0..leaf.numel()).map(move |i| (t, i)))
        .collect();

    let errors = parallel::map(exec, &coords, |&(t, i)| -> Result<f64> {
        let mut work = leaves.clone();
        let x0 = work[t].data()[i];
        work[t].data_mut()[i] = x0 + eps;
        let plus = eval(&work)?;
        work[t].data_mut()[i] = x0 - eps;
        let minus = eval(&work)?;
        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic[t][i];
        Ok((ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR))
    });

    errors
        .into_iter()
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
}

/// One registered check: builds a random instance of an op from a seed,
/// contracts it to a scalar with random weights, and returns the max relative error.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub run: fn(u64, f64) -> Result<f64>,
}

impl std::fmt::Debug for OpCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpCheck").field("name", &self.name).finish()
    }
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

/// `sum(y ⊙ w)` for a random constant `w` shaped like `y`.
fn contract(g: &mut Graph, y: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let w = g.constant(Tensor::new(shape, uniform(rng, n, -1.0, 1.0))?);
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

fn check_unary(
    seed: u64,
    eps: f64,
    shape: &[usize],
    sample: fn(&mut Rng, usize) -> Vec<f64>,
    op: fn(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let mut rng = rng::stream(seed, "gradcheck.unary");
    let n = shape.iter().product();
    let x = Tensor::new(shape.to_vec(), sample(&mut rng, n))?;
    let weights_seed = rng.random::<u64>();
    gradient_check(
        move |g, v| {
            let y = op(g, v)?;
            contract(g, y, &mut rng::stream(weights_seed, "gradcheck.w"))
        },
        &x,
        eps,
    )
}

fn check_binary(
    seed: u64,
    eps: f64,
    shapes: (&[usize], &[usize]),
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut rng = rng::stream(seed, "gradcheck.binary");
    let a = Tensor::new(shapes.0.to_vec(), {
        let n = shapes.0.iter().product();
        uniform(&mut rng, n, -1.5, 1.5)
    })?;
    let b = Tensor::new(shapes.1.to_vec(), {
        let n = shapes.1.iter().product();
        uniform(&mut rng, n, -1.5, 1.5)
    })?;
    let weights_seed = rng.random::<u64>();
    gradient_check_many(
        move |g, v| {
            let y = op(g, v[0], v[1])?;
            contract(g, y, &mut rng::stream(weights_seed, "gradcheck.w"))
        },
        &[a, b],
        eps,
        Execution::Sequential,
    )
}

fn signed(rng: &mut Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, -1.5, 1.5)
}

fn positive(rng: &mut Rng, n: usize) -> Vec<f64> {
    uniform(rng, n, 0.2, 3.0)
}

/// Every differentiable op with a randomized check. Names match
/// [`super::DIFFERENTIABLE_OPS`].
pub fn op_suite() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "add", run: |s, e| check_binary(s, e, (&[3, 2], &[3, 2]), |g, a, b| g.add(a, b)) },
        OpCheck { name: "sub", run: |s, e| check_binary(s, e, (&[4], &[]), |g, a, b| g.sub(a, b)) },
        OpCheck { name: "mul", run: |s, e| check_binary(s, e, (&[2, 3], &[2, 3]), |g, a, b| g.mul(a, b)) },
        OpCheck { name: "scale", run: |s, e| check_unary(s, e, &[5], signed, |g, x| Ok(g.scale(x, -2.5))) },
        OpCheck { name: "add_scalar", run: |s, e| check_unary(s, e, &[5], signed, |g, x| Ok(g.add_scalar(x, 0.7))) },
        OpCheck { name: "exp", run: |s, e| check_unary(s, e, &[2, 3], signed, |g, x| Ok(g.exp(x))) },
        OpCheck { name: "log", run: |s, e| check_unary(s, e, &[6], positive, |g, x| Ok(g.log(x))) },
        OpCheck { name: "tanh", run: |s, e| check_unary(s, e, &[6], signed, |g, x| Ok(g.tanh(x))) },
        OpCheck { name: "relu", run: |s, e| check_unary(s, e, &[6], away_from_zero, |g, x| Ok(g.relu(x))) },
        OpCheck {
            name: "clamp",
            // interval edges at ±1.1 stay clear of the sampled magnitudes' grid
            run: |s, e| check_unary(s, e, &[6], |r, n| {
                away_from_zero(r, n).into_iter().map(|v| if (v.abs() - 1.1).abs() < 0.05 { v * 1.2 } else { v }).collect()
            }, |g, x| Ok(g.clamp(x, -1.1, 1.1))),
        },
        OpCheck { name: "matmul", run: |s, e| check_binary(s, e, (&[3, 4], &[4, 2]), |g, a, b| g.matmul(a, b)) },
        OpCheck { name: "bias_add", run: |s, e| check_binary(s, e, (&[3, 4], &[4]), |g, a, b| g.bias_add(a, b)) },
        OpCheck { name: "reshape", run: |s, e| check_unary(s, e, &[2, 3], signed, |g, x| g.reshape(x, &[3, 2])) },
        OpCheck { name: "sum", run: |s, e| check_unary(s, e, &[3, 4], signed, |g, x| g.sum(x, Some(1))) },
        OpCheck { name: "mean", run: |s, e| check_unary(s, e, &[3, 4], signed, |g, x| g.mean(x, Some(0))) },
        OpCheck { name: "softmax", run: |s, e| check_unary(s, e, &[3, 4], signed, |g, x| g.softmax(x, 1)) },
        OpCheck { name: "cosine_similarity", run: |s, e| check_binary(s, e, (&[4], &[4]), |g, a, b| g.cosine_similarity(a, b)) },
        OpCheck { name: "cosine_matrix", run: |s, e| check_binary(s, e, (&[3, 2], &[4, 2]), |g, a, b| g.cosine_matrix(a, b)) },
    ]
}
