//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor for the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(errors: impl IntoIterator<Item = f64>, tolerance: f64) -> Self {
        let mut checked = 0;
        let mut max_rel_error: f64 = 0.0;
        for e in errors {
            checked += 1;
            max_rel_error = max_rel_error.max(e);
        }
        GradCheckReport { max_rel_error, checked, tolerance, passed: max_rel_error < tolerance }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Compares d f/d x from the tape against central differences at every
/// element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    scalar(&g, y)?;
    let grads = g.backward(y)?;
    let zero = vec![0.0; x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zero).to_vec();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        scalar(&g, y)
    };
    let mut errors = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        errors.push(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport::new(errors, tol))
}

/// Checks parameter gradients of a scalar function built on `store`.
/// With `coords = Some(k)`, only `k` randomly chosen elements of each
/// parameter are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    ids: &[ParamId],
    coords: Option<usize>,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::with_params(store);
    let y = f(&mut g)?;
    scalar(&g, y)?;
    let grads = g.backward(y)?;
    let analytic: std::collections::HashMap<ParamId, Vec<f64>> =
        grads.params().map(|(id, g)| (id, g.to_vec())).collect();
    drop(g);

    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &id in ids {
        let n = work.value(id).numel();
        let picks: Vec<usize> = match coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let zero = vec![0.0; n];
        let a = analytic.get(&id).unwrap_or(&zero);
        let mut errors = Vec::new();
        for &i in &picks {
            let orig = work.value(id).data()[i];
            let mut eval = |delta: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = orig + delta;
                let mut g = Graph::with_params(&work);
                let y = f(&mut g)?;
                scalar(&g, y)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            work.get_mut(id).value.data_mut()[i] = orig;
            errors.push(relative_error(a[i], numeric));
        }
        out.push((store.get(id).name.clone(), GradCheckReport::new(errors, tol)));
    }
    Ok(out)
}

/// Per-component finite-difference suites used by `uxmil gradcheck` and the
/// test suite.
pub mod suite {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{grad_check, grad_check_params, GradCheckReport};
    use crate::autograd::{Graph, Var};
    use crate::error::Result;
    use crate::model::{loss, Modality, ModelConfig, ModelInput, UxModel};
    use crate::nn::LAYER_NORM_EPS;
    use crate::tensor::Tensor;

    pub const OPS_TOLERANCE: f64 = 1e-4;
    pub const MODEL_TOLERANCE: f64 = 1e-3;
    const STEP: f64 = 1e-6;

    pub type Entry = (String, GradCheckReport);

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    }

    /// `Σ y ⊙ w` for a fixed random `w`, so every output element matters.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(randn(&mut rng, &shape));
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    fn wrong_square(x: f64) -> f64 {
        x * x
    }

    /// Derivative of `x²` with a deliberate error.
    fn wrong_square_derivative(x: f64) -> f64 {
        2.0 * x + 0.5
    }

    /// Every differentiable op, each input checked separately.
    pub fn ops_suite(seed: u64, inject_fault: bool) -> Result<Vec<Entry>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<Entry> = Vec::new();
        let tol = OPS_TOLERANCE;
        let mut check = |name: &str, f: &dyn Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor| -> Result<()> {
            let r = grad_check(|g, v| f(g, v), x, STEP, tol)?;
            out.push((name.to_string(), r));
            Ok(())
        };

        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 5]);
        check("matmul.lhs", &|g, x| { let c = g.constant(b.clone()); let y = g.matmul(x, c)?; probe(g, y, 1) }, &a)?;
        check("matmul.rhs", &|g, x| { let c = g.constant(a.clone()); let y = g.matmul(c, x)?; probe(g, y, 2) }, &b)?;

        let u = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[3, 4]);
        check("add", &|g, x| { let c = g.constant(w.clone()); let y = g.add(x, c)?; probe(g, y, 3) }, &u)?;
        check("mul", &|g, x| { let c = g.constant(w.clone()); let y = g.mul(x, c)?; probe(g, y, 4) }, &u)?;
        check("scale", &|g, x| { let y = g.scale(x, -1.7)?; probe(g, y, 5) }, &u)?;
        let bias = randn(&mut rng, &[4]);
        check("add_bias.input", &|g, x| { let c = g.constant(bias.clone()); let y = g.add_bias(x, c)?; probe(g, y, 6) }, &u)?;
        check("add_bias.bias", &|g, x| { let c = g.constant(u.clone()); let y = g.add_bias(c, x)?; probe(g, y, 7) }, &bias)?;

        let k = away_from_zero(&mut rng, &[3, 4]);
        check("relu", &|g, x| { let y = g.relu(x)?; probe(g, y, 8) }, &k)?;
        check("gelu", &|g, x| { let y = g.gelu(x)?; probe(g, y, 9) }, &u)?;
        let s = Tensor::from_fn(&[2, 3, 4], |_| rng.gen_range(-2.0..2.0));
        for axis in 0..3 {
            check(&format!("softmax.axis{axis}"), &|g, x| { let y = g.softmax(x, axis)?; probe(g, y, 10 + axis as u64) }, &s)?;
        }

        let gamma = randn(&mut rng, &[4]);
        let beta = randn(&mut rng, &[4]);
        check("layer_norm.input", &|g, x| {
            let (gm, bt) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(x, gm, bt, LAYER_NORM_EPS)?;
            probe(g, y, 13)
        }, &u)?;
        check("layer_norm.gamma", &|g, x| {
            let (inp, bt) = (g.constant(u.clone()), g.constant(beta.clone()));
            let y = g.layer_norm(inp, x, bt, LAYER_NORM_EPS)?;
            probe(g, y, 14)
        }, &gamma)?;
        check("layer_norm.beta", &|g, x| {
            let (inp, gm) = (g.constant(u.clone()), g.constant(gamma.clone()));
            let y = g.layer_norm(inp, gm, x, LAYER_NORM_EPS)?;
            probe(g, y, 15)
        }, &beta)?;

        let img = randn(&mut rng, &[2, 2, 5, 5]);
        let kern = randn(&mut rng, &[3, 2, 3, 3]);
        let kb = randn(&mut rng, &[3]);
        for (stride, pad) in [(1, 1), (2, 0)] {
            let tag = format!("s{stride}p{pad}");
            check(&format!("conv2d.{tag}.input"), &|g, x| {
                let (kk, bb) = (g.constant(kern.clone()), g.constant(kb.clone()));
                let y = g.conv2d(x, kk, bb, stride, pad)?;
                probe(g, y, 16)
            }, &img)?;
            check(&format!("conv2d.{tag}.kernel"), &|g, x| {
                let (ii, bb) = (g.constant(img.clone()), g.constant(kb.clone()));
                let y = g.conv2d(ii, x, bb, stride, pad)?;
                probe(g, y, 17)
            }, &kern)?;
            check(&format!("conv2d.{tag}.bias"), &|g, x| {
                let (ii, kk) = (g.constant(img.clone()), g.constant(kern.clone()));
                let y = g.conv2d(ii, kk, x, stride, pad)?;
                probe(g, y, 18)
            }, &kb)?;
        }
        let pool_in = randn(&mut rng, &[2, 2, 4, 6]);
        check("avg_pool2", &|g, x| { let y = g.avg_pool2(x)?; probe(g, y, 19) }, &pool_in)?;
        check("global_avg_pool", &|g, x| { let y = g.global_avg_pool(x)?; probe(g, y, 20) }, &pool_in)?;

        let q = randn(&mut rng, &[5, 8]);
        let kk = randn(&mut rng, &[5, 8]);
        let v = randn(&mut rng, &[5, 8]);
        check("attention.q", &|g, x| { let (k, vv) = (g.constant(kk.clone()), g.constant(v.clone())); let y = g.attention(x, k, vv, 2)?; probe(g, y, 21) }, &q)?;
        check("attention.k", &|g, x| { let (qq, vv) = (g.constant(q.clone()), g.constant(v.clone())); let y = g.attention(qq, x, vv, 2)?; probe(g, y, 22) }, &kk)?;
        check("attention.v", &|g, x| { let (qq, k) = (g.constant(q.clone()), g.constant(kk.clone())); let y = g.attention(qq, k, x, 2)?; probe(g, y, 23) }, &v)?;

        check("concat0", &|g, x| { let c = g.constant(w.clone()); let y = g.concat0(&[c, x, c])?; probe(g, y, 24) }, &u)?;
        check("stack", &|g, x| { let c = g.constant(w.clone()); let y = g.stack(&[x, c, x])?; probe(g, y, 25) }, &u)?;
        check("slice0", &|g, x| { let y = g.slice0(x, 1, 2)?; probe(g, y, 26) }, &u)?;
        check("row", &|g, x| { let y = g.row(x, 2)?; probe(g, y, 27) }, &u)?;
        check("reshape", &|g, x| { let y = g.reshape(x, &[2, 6])?; probe(g, y, 28) }, &u)?;
        check("sum", &|g, x| g.sum(x), &u)?;
        let logits = Tensor::from_fn(&[3, 7], |_| rng.gen_range(-2.0..2.0));
        check("cross_entropy", &|g, x| g.cross_entropy(x, &[0, 6, 3]), &logits)?;
        if inject_fault {
            check("fault.square", &|g, x| { let y = g.pointwise(x, wrong_square, wrong_square_derivative)?; probe(g, y, 29) }, &u)?;
        }
        Ok(out)
    }

    /// Random toy-scale input for `cfg`.
    pub fn toy_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelInput {
        let a = &cfg.audio;
        let v = &cfg.vision;
        ModelInput {
            patches: Some(randn(rng, &[a.num_patches, a.patch_height, a.patch_width])),
            clips: Some(randn(rng, &[v.num_clips, v.frames_per_clip, v.frame_size, v.frame_size])),
        }
    }

    /// Loss gradients of every parameter tensor of the multimodal toy model,
    /// on `coords` sampled elements each.
    pub fn model_suite(seed: u64, coords: usize) -> Result<Vec<Entry>> {
        let cfg = ModelConfig::toy(Modality::Multimodal);
        let model = UxModel::new(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let input = toy_input(&cfg, &mut rng);
        let label = rng.gen_range(1..=7u8);
        let ids: Vec<_> = model.params.ids().collect();
        grad_check_params(
            &model.params,
            |g| {
                let out = model.arch.forward(g, &input)?;
                let logits = g.reshape(out.logits, &[1, 7])?;
                loss(g, logits, &[label])
            },
            &ids,
            Some(coords),
            STEP,
            MODEL_TOLERANCE,
            seed,
        )
    }
}
