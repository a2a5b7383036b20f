//! Registry of gradient checks: every differentiable graph op, plus the full
//! encode-render-loss pipeline with respect to model parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, DatasetConfig};
use crate::losses::LossWeights;
use crate::masking::PatchMask;
use crate::model::{MaskedLrm, ModelConfig};
use crate::tensor::{grad_check, Graph, Tensor, Var};
use crate::training::{item_loss_and_grads, sample_batch, stream_rng, BatchItem, StageSettings, TrainConfig};
use crate::volren::{RenderOptions, Sampling};
use crate::Result;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
const OP_STEP: f64 = 1e-5;
const PIPELINE_STEP: f64 = 1e-3;
/// Entries probed per parameter tensor in the pipeline check.
const PROBES: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    input: Tensor<f64>,
    f: OpFn,
}

/// Contract a tensor to a scalar with fixed pseudo-random weights, so every output entry matters.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn case(name: &'static str, input: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        input,
        f: Box::new(move |g, x| {
            let y = f(g, x)?;
            contract(g, y, 99)
        }),
    }
}

fn binary_cases(out: &mut Vec<OpCase>) {
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&'static str, &'static str, Bin); 4] = [
        ("add.lhs", "add.rhs_broadcast", |g, a, b| g.add(a, b)),
        ("sub.lhs", "sub.rhs_broadcast", |g, a, b| g.sub(a, b)),
        ("mul.lhs", "mul.rhs_broadcast", |g, a, b| g.mul(a, b)),
        ("div.lhs", "div.rhs_broadcast", |g, a, b| g.div(a, b)),
    ];
    for (lhs, rhs, op) in ops {
        let other = rand_t(&[4], 0.5, 1.5, 2);
        out.push(case(lhs, rand_t(&[3, 4], -1.0, 1.0, 1), move |g, x| {
            let b = g.constant(other.clone());
            op(g, x, b)
        }));
        let base = rand_t(&[3, 4], -1.0, 1.0, 3);
        out.push(case(rhs, rand_t(&[4], 0.5, 1.5, 4), move |g, x| {
            let a = g.constant(base.clone());
            op(g, a, x)
        }));
    }
}

fn op_cases() -> Vec<OpCase> {
    let mut v = Vec::new();
    binary_cases(&mut v);
    let x34 = || rand_t(&[3, 4], -1.5, 1.5, 5);
    v.push(case("neg", x34(), |g, x| Ok(g.neg(x))));
    v.push(case("scale", x34(), |g, x| Ok(g.scale(x, -2.5))));
    v.push(case("add_scalar", x34(), |g, x| Ok(g.add_scalar(x, 0.7))));
    v.push(case("rsub_scalar", x34(), |g, x| Ok(g.rsub_scalar(1.0, x))));
    v.push(case("square", x34(), |g, x| Ok(g.square(x))));
    v.push(case("exp", x34(), |g, x| Ok(g.exp(x))));
    v.push(case("log", rand_t(&[3, 4], 0.2, 2.0, 6), |g, x| Ok(g.log(x))));
    v.push(case("sqrt", rand_t(&[3, 4], 0.2, 2.0, 7), |g, x| Ok(g.sqrt(x))));
    v.push(case("sigmoid", x34(), |g, x| Ok(g.sigmoid(x))));
    v.push(case("softplus", x34(), |g, x| Ok(g.softplus(x))));
    v.push(case("gelu", x34(), |g, x| Ok(g.gelu(x))));
    v.push(case("gelu_prime", x34(), |g, x| Ok(g.gelu_prime(x))));
    v.push(case(
        "clamp_min",
        Tensor::from_f64(&[6], &[-1.0, -0.4, -0.25, 0.1, 0.6, 1.3]).expect("shape"),
        |g, x| Ok(g.clamp_min(x, -0.3)),
    ));
    let b = rand_t(&[4, 5], -1.0, 1.0, 8);
    v.push(case("matmul.lhs", x34(), move |g, x| {
        let bb = g.constant(b.clone());
        g.matmul(x, bb)
    }));
    let a = rand_t(&[2, 3, 4], -1.0, 1.0, 9);
    v.push(case("matmul.batched_rhs", rand_t(&[2, 4, 2], -1.0, 1.0, 10), move |g, x| {
        let aa = g.constant(a.clone());
        g.matmul(aa, x)
    }));
    v.push(case("reshape", x34(), |g, x| g.reshape(x, &[2, 6])));
    v.push(case("permute", rand_t(&[2, 3, 4], -1.0, 1.0, 11), |g, x| g.permute(x, &[2, 0, 1])));
    v.push(case("transpose", x34(), |g, x| g.transpose(x)));
    let c = rand_t(&[3, 2], -1.0, 1.0, 12);
    v.push(case("concat", x34(), move |g, x| {
        let cc = g.constant(c.clone());
        g.concat(&[x, cc, x], 1)
    }));
    v.push(case("slice", x34(), |g, x| g.slice(x, 1, 1, 3)));
    v.push(case("expand", rand_t(&[3, 1], -1.0, 1.0, 13), |g, x| g.expand(x, &[3, 5])));
    v.push(case("sum", x34(), |g, x| Ok(g.sum(x))));
    v.push(case("mean", x34(), |g, x| Ok(g.mean(x))));
    v.push(case("sum_axis", rand_t(&[2, 3, 4], -1.0, 1.0, 14), |g, x| g.sum_axis(x, 1)));
    v.push(case("max_axis", rand_t(&[3, 4], -1.0, 1.0, 15), |g, x| g.max_axis(x, 1)));
    v.push(case("softmax", x34(), |g, x| Ok(g.softmax(x))));
    v.push(case("layer_norm", rand_t(&[3, 6], -1.0, 1.0, 16), |g, x| Ok(g.layer_norm(x, 1e-5))));
    let row = rand_t(&[4], -1.0, 1.0, 17);
    v.push(case("row_where.rows", x34(), move |g, x| {
        let r = g.constant(row.clone());
        g.row_where(&[true, false, true], x, r)
    }));
    let base = x34();
    v.push(case("row_where.replacement", rand_t(&[4], -1.0, 1.0, 18), move |g, x| {
        let a = g.constant(base.clone());
        g.row_where(&[false, true, true], a, x)
    }));
    v.push(case("scatter_rows", x34(), |g, x| g.scatter_rows(x, &[4, 0, 2], 5)));
    v.push(case("cumsum_exclusive", x34(), |g, x| Ok(g.cumsum_exclusive(x))));
    let mut r = ChaCha8Rng::seed_from_u64(19);
    let pts: Vec<f64> = (0..15).map(|_| r.gen_range(-0.95..0.95)).collect();
    let planes = || rand_t(&[3, 5, 5, 2], -1.0, 1.0, 20);
    let p1 = pts.clone();
    v.push(case("triplane_sample", planes(), move |g, x| g.triplane_sample(x, &p1)));
    for axis in 0..3 {
        let p = pts.clone();
        let name = ["triplane_sample_deriv.x", "triplane_sample_deriv.y", "triplane_sample_deriv.z"][axis];
        v.push(case(name, planes(), move |g, x| g.triplane_sample_deriv(x, &p, axis)));
    }
    v.push(case(
        "sdf_density.sdf",
        Tensor::from_f64(&[6], &[-0.3, -0.05, -0.01, 0.02, 0.08, 0.4]).expect("shape"),
        |g, x| {
            let beta = g.constant(Tensor::full(&[1], 0.1));
            g.sdf_density(x, beta)
        },
    ));
    let sdf = Tensor::from_f64(&[6], &[-0.3, -0.05, -0.01, 0.02, 0.08, 0.4]).expect("shape");
    v.push(case("sdf_density.beta", Tensor::full(&[1], 0.1), move |g, x| {
        let s = g.constant(sdf.clone());
        g.sdf_density(s, x)
    }));
    let (k, val) = (rand_t(&[5, 4], -1.0, 1.0, 21), rand_t(&[5, 4], -1.0, 1.0, 22));
    v.push(case("attention.q", rand_t(&[3, 4], -1.0, 1.0, 23), move |g, x| {
        let (kk, vv) = (g.constant(k.clone()), g.constant(val.clone()));
        g.attention(x, kk, vv, 2)
    }));
    let (q, val) = (rand_t(&[3, 4], -1.0, 1.0, 24), rand_t(&[5, 4], -1.0, 1.0, 25));
    v.push(case("attention.k", rand_t(&[5, 4], -1.0, 1.0, 26), move |g, x| {
        let (qq, vv) = (g.constant(q.clone()), g.constant(val.clone()));
        g.attention(qq, x, vv, 2)
    }));
    let (q, k) = (rand_t(&[3, 4], -1.0, 1.0, 27), rand_t(&[5, 4], -1.0, 1.0, 28));
    v.push(case("attention.v", rand_t(&[5, 4], -1.0, 1.0, 29), move |g, x| {
        let (qq, kk) = (g.constant(q.clone()), g.constant(k.clone()));
        g.attention(qq, kk, x, 2)
    }));
    v
}

pub fn op_checks() -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|c| {
            Ok(CheckResult {
                name: format!("op.{}", c.name),
                error: grad_check(&c.f, &c.input, OP_STEP)?,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// A tiny f64 model with non-trivial weights and one training item exercising every loss term
/// and at least one fully masked input view.
pub fn pipeline_fixture(seed: u64) -> Result<(MaskedLrm<f64>, BatchItem, RenderOptions, LossWeights)> {
    let mcfg = ModelConfig::tiny();
    let mut model = MaskedLrm::<f64>::new(mcfg.clone(), &mut stream_rng(seed, 0))?;
    model.randomize_params(0.5, &mut stream_rng(seed, 1));
    let res = mcfg.image_res;
    let dcfg = DatasetConfig {
        n_scenes: 1,
        n_views: 6,
        n_heldout: 0,
        resolution: res,
        ..Default::default()
    };
    let mut ds = Dataset::generate(&dcfg, seed)?;
    let weights = LossWeights {
        w_d: 1.0,
        ..LossWeights::stage2()
    };
    let tcfg = TrainConfig {
        stage1: StageSettings {
            out_res: res,
            samples_per_ray: 6,
            weights,
            ..StageSettings::stage1()
        },
        crop_size: res,
        n_input_min: 2,
        n_input_max: 2,
        n_supervision: 1,
        ..Default::default()
    };
    ds.prepare_resolution(res);
    let mut batch = sample_batch(&ds, &[0], &mut stream_rng(seed, 2), &tcfg, &mcfg)?;
    let mut item = batch.items.remove(0);
    item.masks[0] = PatchMask::full(res, res, mcfg.patch_size)?;
    let opts = RenderOptions {
        n_samples: 6,
        sampling: Sampling::Midpoint,
        normals: true,
        depth: true,
    };
    Ok((model, item, opts, weights))
}

fn item_loss(model: &MaskedLrm<f64>, item: &BatchItem, opts: &RenderOptions, w: &LossWeights) -> Result<f64> {
    let r = item_loss_and_grads(model, item, opts, w, 1.0)?;
    Ok(r.reports.iter().map(|r| r.total).sum())
}

/// Finite-difference check of parameter gradients through encode, render and loss, probing
/// up to `PROBES` evenly spaced entries of each named parameter (all parameters if `names` is empty).
pub fn pipeline_checks(seed: u64, names: &[&str]) -> Result<Vec<CheckResult>> {
    let (mut model, item, opts, w) = pipeline_fixture(seed)?;
    let analytic = item_loss_and_grads(&model, &item, &opts, &w, 1.0)?.grads;
    let ids: Vec<_> = model.params.ids().collect();
    let mut out = Vec::new();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.params.iter().nth(k).expect("param").name.clone();
        if !names.is_empty() && !names.contains(&name.as_str()) {
            continue;
        }
        let len = model.params.get(id).len();
        let stride = len.div_ceil(PROBES).max(1);
        let (mut a, mut c) = (Vec::new(), Vec::new());
        for i in (0..len).step_by(stride) {
            let orig = model.params.get(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                model.params.get_mut(id).data_mut()[i] = orig + h;
                let fp = item_loss(&model, &item, &opts, &w)?;
                model.params.get_mut(id).data_mut()[i] = orig - h;
                let fm = item_loss(&model, &item, &opts, &w)?;
                model.params.get_mut(id).data_mut()[i] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            // Richardson extrapolation cancels the second-order truncation term.
            let coarse = central(2.0 * PIPELINE_STEP)?;
            let fine = central(PIPELINE_STEP)?;
            a.push(analytic[k][i]);
            c.push((4.0 * fine - coarse) / 3.0);
        }
        out.push(CheckResult {
            name: format!("pipeline.{name}"),
            error: crate::tensor::relative_error(&a, &c),
            tolerance: PIPELINE_TOLERANCE,
        });
    }
    Ok(out)
}

/// Parameters probed by default: the mask token, the learned triplane tokens and the patch embedding.
pub const PIPELINE_PARAMS: [&str; 4] = ["mask_token", "triplane_tokens", "embed.rgb.w", "embed.plucker.w"];

pub fn all_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut v = op_checks()?;
    v.extend(pipeline_checks(seed, &PIPELINE_PARAMS)?);
    Ok(v)
}

pub fn format_results(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "{:<40} rel_err {:.3e}  tol {:.0e}  {}\n",
                r.name,
                r.error,
                r.tolerance,
                if r.passed() { "ok" } else { "FAIL" }
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let r = op_checks().unwrap();
        let bad: Vec<_> = r.iter().filter(|c| !c.passed()).collect();
        assert!(bad.is_empty(), "{}", format_results(&r));
        assert!(r.len() > 40);
    }

    #[test]
    fn pipeline_all_params_pass() {
        let r = pipeline_checks(1, &[]).unwrap();
        println!("{}", format_results(&r));
        assert!(r.iter().all(|c| c.passed()), "{}", format_results(&r));
    }

    #[test]
    fn pipeline_default_params_pass() {
        let r = pipeline_checks(0, &PIPELINE_PARAMS).unwrap();
        assert_eq!(r.len(), PIPELINE_PARAMS.len(), "{}", format_results(&r));
        assert!(r.iter().all(|c| c.passed()), "{}", format_results(&r));
    }
}
