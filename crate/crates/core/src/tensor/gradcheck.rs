//! Central finite-difference checks of the autodiff tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{concat, embedding_lookup, no_grad, ParamStore, Tensor};
use crate::error::Result;

/// Step used by every check.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error denominators are floored here so that near-zero
/// gradients are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }

    /// Worst case over several reports of the same check.
    pub fn merge(name: &str, reports: &[GradcheckReport]) -> GradcheckReport {
        GradcheckReport {
            name: name.to_string(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, |a, b| if b.is_nan() { b } else { a.max(b) }),
            coords_checked: reports.iter().map(|r| r.coords_checked).sum(),
            tolerance: reports.iter().map(|r| r.tolerance).fold(f64::INFINITY, f64::min),
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `eval` around `base`
/// at the given coordinates; returns the largest relative error.
pub fn compare_fd(
    analytic: &[f64],
    base: &[f64],
    coords: &[usize],
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut probe = base.to_vec();
    for &c in coords {
        probe[c] = base[c] + FD_STEP;
        let plus = eval(&probe)?;
        probe[c] = base[c] - FD_STEP;
        let minus = eval(&probe)?;
        probe[c] = base[c];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let e = rel_err(analytic[c], numeric);
        if e.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Up to `max` distinct coordinates of an `n`-element input.
pub fn sample_coords(n: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, max).into_vec()
}

/// Checks the gradient of `sum(w * f(inputs))` for a fixed random `w`
/// against central differences, for every input.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor], f: F, tolerance: f64, seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let out = f(&leaves)?;
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::new(weights.clone(), out.shape())?;
    out.mul(&w)?.sum_all().backward()?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let coords = sample_coords(leaf.numel(), 24, &mut rng);
        checked += coords.len();
        let e = compare_fd(&analytic, leaf.data(), &coords, |probe| {
            let mut vals: Vec<Tensor> = leaves.iter().map(Tensor::detach).collect();
            vals[i] = Tensor::new(probe.to_vec(), leaf.shape())?;
            let o = no_grad(|| f(&vals))?;
            Ok(o.data().iter().zip(&weights).map(|(a, b)| a * b).sum())
        })?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked: checked,
        tolerance,
    })
}

/// Like [`gradcheck`], but differentiates with respect to every trainable
/// parameter of `store` (up to `max_coords` coordinates each).
pub fn gradcheck_params<F>(name: &str, store: &ParamStore, f: F, tolerance: f64, seed: u64, max_coords: usize) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = store.clone();
    store.zero_grads();
    let out = f(&store)?;
    let weights: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    out.mul(&Tensor::new(weights.clone(), out.shape())?)?.sum_all().backward()?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let base = store.get(id).to_vec();
        let analytic = store.get(id).grad().unwrap_or_else(|| vec![0.0; base.len()]);
        let coords = sample_coords(base.len(), max_coords, &mut rng);
        checked += coords.len();
        let mut probe_store = store.clone();
        let e = compare_fd(&analytic, &base, &coords, |probe| {
            probe_store.set_data(id, probe.to_vec())?;
            let o = no_grad(|| f(&probe_store))?;
            Ok(o.data().iter().zip(&weights).map(|(a, b)| a * b).sum())
        })?;
        worst = if e.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked: checked,
        tolerance,
    })
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("valid shape")
}

type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradcheckReport>>);

/// Finite-difference check of every tensor op at `points` random inputs.
pub fn op_suite(points: usize, seed: u64, tolerance: f64) -> Result<Vec<GradcheckReport>> {
    let cases: Vec<OpCase> = vec![
        ("matmul", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[4, 2], -1.0, 1.0);
            gradcheck("matmul", &[a, b], |x| x[0].matmul(&x[1]), tolerance, r.random())
        })),
        ("matmul_batched", Box::new(move |r| {
            let a = rand_tensor(r, &[2, 3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[2, 4, 2], -1.0, 1.0);
            let c = rand_tensor(r, &[4, 3], -1.0, 1.0);
            gradcheck("matmul_batched", &[a, b, c], |x| {
                let y = x[0].matmul(&x[1])?;
                let z = x[0].matmul(&x[2])?;
                Ok(concat(&[y, z], 2)?)
            }, tolerance, r.random())
        })),
        ("matmul_shared_left", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[2, 4, 2], -1.0, 1.0);
            gradcheck("matmul_shared_left", &[a, b], |x| x[0].matmul(&x[1]), tolerance, r.random())
        })),
        ("add_broadcast", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[4], -1.0, 1.0);
            gradcheck("add_broadcast", &[a, b], |x| x[0].add(&x[1]), tolerance, r.random())
        })),
        ("mul_broadcast", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[4], -1.0, 1.0);
            let s = rand_tensor(r, &[], -1.0, 1.0);
            gradcheck("mul_broadcast", &[a, b, s], |x| x[0].mul(&x[1])?.mul(&x[2]), tolerance, r.random())
        })),
        ("softmax", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 5], -2.0, 2.0);
            gradcheck("softmax", &[a], |x| x[0].softmax(1), tolerance, r.random())
        })),
        ("softmax_axis0", Box::new(move |r| {
            let a = rand_tensor(r, &[4, 3], -2.0, 2.0);
            gradcheck("softmax_axis0", &[a], |x| x[0].softmax(0), tolerance, r.random())
        })),
        ("log_softmax", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 5], -2.0, 2.0);
            gradcheck("log_softmax", &[a], |x| x[0].log_softmax(1), tolerance, r.random())
        })),
        ("logsumexp", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 5], -2.0, 2.0);
            gradcheck("logsumexp", &[a], |x| x[0].logsumexp(1), tolerance, r.random())
        })),
        ("layer_norm", Box::new(move |r| {
            let a = rand_tensor(r, &[4, 8], -2.0, 2.0);
            let g = rand_tensor(r, &[8], 0.5, 1.5);
            let b = rand_tensor(r, &[8], -0.5, 0.5);
            gradcheck("layer_norm", &[a, g, b], |x| x[0].layer_norm(&x[1], &x[2], 1e-5), tolerance, r.random())
        })),
        ("gelu", Box::new(move |r| {
            let a = rand_tensor(r, &[10], -3.0, 3.0);
            gradcheck("gelu", &[a], |x| Ok(x[0].gelu()), tolerance, r.random())
        })),
        ("scale", Box::new(move |r| {
            let a = rand_tensor(r, &[6], -1.0, 1.0);
            gradcheck("scale", &[a], |x| Ok(x[0].scale(-2.5).add_scalar(1.0)), tolerance, r.random())
        })),
        ("mean_axis", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4, 2], -1.0, 1.0);
            gradcheck("mean_axis", &[a], |x| x[0].mean_axis(1), tolerance, r.random())
        })),
        ("sum_axis", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            gradcheck("sum_axis", &[a], |x| x[0].sum_axis(0), tolerance, r.random())
        })),
        ("embedding_lookup", Box::new(move |r| {
            let table = rand_tensor(r, &[5, 3], -1.0, 1.0);
            let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            gradcheck("embedding_lookup", &[table], move |x| embedding_lookup(&x[0], &ids), tolerance, r.random())
        })),
        ("reshape_permute", Box::new(move |r| {
            let a = rand_tensor(r, &[2, 3, 4], -1.0, 1.0);
            gradcheck("reshape_permute", &[a], |x| x[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose(0, 1), tolerance, r.random())
        })),
        ("index_select_concat", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[3, 2], -1.0, 1.0);
            gradcheck("index_select_concat", &[a, b], |x| concat(&[x[0].index_select(1, &[3, 0, 0])?, x[1].clone()], 1), tolerance, r.random())
        })),
        ("l2_normalize", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            gradcheck("l2_normalize", &[a], |x| x[0].l2_normalize(), tolerance, r.random())
        })),
        ("exp_ln", Box::new(move |r| {
            let a = rand_tensor(r, &[5], 0.2, 2.0);
            gradcheck("exp_ln", &[a], |x| Ok(x[0].ln().exp().ln()), tolerance, r.random())
        })),
        ("sigmoid_softplus", Box::new(move |r| {
            let a = rand_tensor(r, &[6], -4.0, 4.0);
            gradcheck("sigmoid_softplus", &[a], |x| x[0].sigmoid().add(&x[0].softplus()), tolerance, r.random())
        })),
        ("composite", Box::new(move |r| {
            let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
            let b = rand_tensor(r, &[4, 5], -1.0, 1.0);
            gradcheck("composite", &[a, b], |x| x[0].matmul(&x[1])?.softmax(1)?.mean_axis(0), tolerance, r.random())
        })),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(cases.len());
    for (name, case) in &cases {
        let runs = (0..points).map(|_| case(&mut rng)).collect::<Result<Vec<_>>>()?;
        reports.push(GradcheckReport::merge(name, &runs));
    }
    Ok(reports)
}
