//! Differentiable SDF volume rendering along camera rays.

use rand::Rng;

use crate::geometry::{unit_cube_interval, Camera, Vec3};
use crate::grid::{Grid, Rect, Rgb};
use crate::model::FieldDecoder;
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Density `alpha * Psi_beta(-s)` with `alpha = 1 / beta`.
pub fn sdf_to_density(s: f64, beta: f64) -> f64 {
    crate::tensor::laplace_density(s, beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// One uniform jitter per stratum.
    Stratified,
    /// Stratum midpoints (deterministic).
    Midpoint,
}

/// Sample positions in `[t_near, t_far]`, one per equal-width stratum.
pub fn sample_depths<R: Rng + ?Sized>(t_near: f64, t_far: f64, n: usize, sampling: Sampling, rng: &mut R) -> Result<Vec<f64>> {
    if !(t_near < t_far) || n < 2 {
        return Err(Error::invalid(format!("degenerate ray interval [{t_near}, {t_far}] with {n} samples")));
    }
    let step = (t_far - t_near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = match sampling {
                Sampling::Stratified => rng.gen_range(0.0..1.0),
                Sampling::Midpoint => 0.5,
            };
            t_near + (i as f64 + u) * step
        })
        .collect())
}

/// `delta_i = t_{i+1} - t_i`, last `t_far - t_n`.
pub fn deltas(ts: &[f64], t_far: f64) -> Vec<f64> {
    let n = ts.len();
    (0..n)
        .map(|i| if i + 1 < n { ts[i + 1] - ts[i] } else { t_far - ts[i] })
        .collect()
}

/// Quadrature weights `T_i (1 - exp(-sigma_i delta_i))` for `sigma`, `delta` of shape `[rays, n]`,
/// evaluated as `T_i - T_{i+1}`, together with the opacity `1 - T_{n+1}` (`[rays]`).
pub fn weights<T: Scalar>(g: &mut Graph<T>, sigma: Var, delta: Var) -> Result<(Var, Var)> {
    let tau = g.mul(sigma, delta)?;
    let acc = g.cumsum_exclusive(tau);
    let neg = g.neg(acc);
    let trans = g.exp(neg);
    let incl = g.add(acc, tau)?;
    let neg = g.neg(incl);
    let next = g.exp(neg);
    let w = g.sub(trans, next)?;
    let total = g.sum_axis(tau, 1)?;
    let neg = g.neg(total);
    let t_end = g.exp(neg);
    let opacity = g.rsub_scalar(T::one(), t_end);
    Ok((w, opacity))
}

/// `sum_i w_i v_i` for weights `[rays, n]` and values `[rays * n, k]`, giving `[rays, k]`.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, w: Var, values: Var) -> Result<Var> {
    let (r, n) = (g.shape(w)[0], g.shape(w)[1]);
    let k = g.shape(values)[1];
    let v = g.reshape(values, &[r, n, k])?;
    let v = g.permute(v, &[2, 0, 1])?;
    let p = g.mul(v, w)?;
    let s = g.sum_axis(p, 2)?;
    g.transpose(s)
}

/// Per-sample unit normals `g / max(|g|, 1e-8)` for gradients `[n, 3]`.
pub fn normalize_rows<T: Scalar>(g: &mut Graph<T>, grad: Var) -> Result<Var> {
    let n = g.shape(grad)[0];
    let sq = g.square(grad);
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.clamp_min(ss, T::c(1e-16));
    let len = g.sqrt(ss);
    let len = g.reshape(len, &[n, 1])?;
    let len = g.expand(len, &[n, 3])?;
    g.div(grad, len)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub n_samples: usize,
    pub sampling: Sampling,
    pub normals: bool,
    pub depth: bool,
}

impl RenderOptions {
    pub fn eval(n_samples: usize) -> Self {
        RenderOptions {
            n_samples,
            sampling: Sampling::Midpoint,
            normals: true,
            depth: true,
        }
    }
}

/// Rendered pixels in graph form; rays that miss the cube carry background values.
#[derive(Clone, Copy, Debug)]
pub struct PredView {
    pub height: usize,
    pub width: usize,
    /// `[h*w, 3]` composited over white
    pub rgb: Var,
    /// `[h*w]`
    pub opacity: Var,
    /// `[h*w, 3]` opacity-weighted unit normals
    pub normal: Option<Var>,
    /// `[h*w]` expected depth `sum w t / max(sum w, eps)`
    pub depth: Option<Var>,
}

const DEPTH_EPS: f64 = 1e-6;

/// Render explicit rays (origin, unit direction) through the decoded field.
pub fn render_rays<T: Scalar, F: FieldDecoder<T>, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    field: &F,
    planes: Var,
    rays: &[(Vec3, Vec3)],
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
    let total = rays.len();
    let n = opts.n_samples;
    let mut hit = Vec::new();
    let mut pts = Vec::new();
    let mut dl = Vec::new();
    let mut tv = Vec::new();
    for (i, (o, d)) in rays.iter().enumerate() {
        let Some((t0, t1)) = unit_cube_interval(o, d) else { continue };
        if t1 - t0 < 1e-9 {
            continue;
        }
        let ts = sample_depths(t0, t1, n, opts.sampling, rng)?;
        for &t in &ts {
            let p = o + d * t;
            pts.extend([T::c(p.x), T::c(p.y), T::c(p.z)]);
        }
        dl.extend(deltas(&ts, t1).into_iter().map(T::c));
        tv.extend(ts.into_iter().map(T::c));
        hit.push(i);
    }
    let nh = hit.len();
    if nh == 0 {
        let rgb = g.constant(Tensor::full(&[total, 3], T::one()));
        let op = g.constant(Tensor::zeros(&[total]));
        let nm = opts.normals.then(|| g.constant(Tensor::zeros(&[total, 3])));
        let dp = opts.depth.then(|| g.constant(Tensor::zeros(&[total])));
        return Ok((rgb, op, nm, dp));
    }
    let out = field.decode(g, planes, &pts, opts.normals)?;
    let beta = field.beta(g);
    let sdf = g.reshape(out.sdf, &[nh, n])?;
    let sigma = g.sdf_density(sdf, beta)?;
    let delta = g.constant(Tensor::from_vec(&[nh, n], dl)?);
    let (w, op) = weights(g, sigma, delta)?;

    let rgb = weighted_sum(g, w, out.rgb)?;
    let rgb = g.scatter_rows(rgb, &hit, total)?;
    let op = g.scatter_rows(op, &hit, total)?;
    let op_e = g.reshape(op, &[total, 1])?;
    let op_e = g.expand(op_e, &[total, 3])?;
    let bg = g.rsub_scalar(T::one(), op_e);
    let rgb = g.add(rgb, bg)?;

    let normal = match out.grad {
        Some(gr) => {
            let nrm = normalize_rows(g, gr)?;
            let nm = weighted_sum(g, w, nrm)?;
            Some(g.scatter_rows(nm, &hit, total)?)
        }
        None => None,
    };
    let depth = if opts.depth {
        let t = g.constant(Tensor::from_vec(&[nh, n], tv)?);
        let wt = g.mul(w, t)?;
        let num = g.sum_axis(wt, 1)?;
        let den = g.sum_axis(w, 1)?;
        let den = g.clamp_min(den, T::c(DEPTH_EPS));
        let d = g.div(num, den)?;
        Some(g.scatter_rows(d, &hit, total)?)
    } else {
        None
    };
    Ok((rgb, op, normal, depth))
}

/// Pixel-center rays of `rect`, row-major.
pub fn crop_rays(camera: &Camera, rect: &Rect) -> Result<Vec<(Vec3, Vec3)>> {
    rect.check_inside(camera.height, camera.width)?;
    let mut rays = Vec::with_capacity(rect.height * rect.width);
    for r in rect.row..rect.row + rect.height {
        for c in rect.col..rect.col + rect.width {
            rays.push(camera.pixel_ray(r, c));
        }
    }
    Ok(rays)
}

pub fn render_view<T: Scalar, F: FieldDecoder<T>, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    field: &F,
    planes: Var,
    camera: &Camera,
    rect: &Rect,
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<PredView> {
    let rays = crop_rays(camera, rect)?;
    let (rgb, opacity, normal, depth) = render_rays(g, field, planes, &rays, opts, rng)?;
    Ok(PredView {
        height: rect.height,
        width: rect.width,
        rgb,
        opacity,
        normal,
        depth,
    })
}

/// Plain rendered images (no graph retained).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub rgb: Grid<Rgb>,
    pub opacity: Grid<f64>,
    pub normal: Grid<Rgb>,
    pub depth: Grid<f64>,
}

/// Deterministic full-frame render evaluated in chunks of rows to bound memory.
pub fn render_image<T: Scalar, F: FieldDecoder<T>>(
    field: &F,
    planes: &Tensor<T>,
    camera: &Camera,
    n_samples: usize,
    rows_per_chunk: usize,
) -> Result<RenderedImage> {
    let (h, w) = (camera.height, camera.width);
    let mut rgb = Vec::with_capacity(h * w);
    let mut opacity = Vec::with_capacity(h * w);
    let mut normal = Vec::with_capacity(h * w);
    let mut depth = Vec::with_capacity(h * w);
    let opts = RenderOptions::eval(n_samples);
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let step = rows_per_chunk.max(1);
    for r0 in (0..h).step_by(step) {
        let rect = Rect {
            row: r0,
            col: 0,
            height: step.min(h - r0),
            width: w,
        };
        let mut g = Graph::new();
        let p = g.constant(planes.clone());
        let v = render_view(&mut g, field, p, camera, &rect, &opts, &mut rng)?;
        let c = g.value(v.rgb).to_f64();
        rgb.extend(c.chunks(3).map(|x| [x[0], x[1], x[2]]));
        opacity.extend(g.value(v.opacity).to_f64());
        let nm = g.value(v.normal.expect("normals requested")).to_f64();
        normal.extend(nm.chunks(3).map(|x| [x[0], x[1], x[2]]));
        depth.extend(g.value(v.depth.expect("depth requested")).to_f64());
    }
    Ok(RenderedImage {
        rgb: Grid::from_vec(h, w, rgb)?,
        opacity: Grid::from_vec(h, w, opacity)?,
        normal: Grid::from_vec(h, w, normal)?,
        depth: Grid::from_vec(h, w, depth)?,
    })
}

/// Unit SDF gradient at `p`, analytic or by central differences (step `h`).
pub fn estimate_normal<T: Scalar, F: FieldDecoder<T>>(field: &F, planes: &Tensor<T>, p: &Vec3, central_step: Option<f64>) -> Result<Vec3> {
    let mut g = Graph::new();
    let pl = g.constant(planes.clone());
    let grad = match central_step {
        None => {
            let out = field.decode(&mut g, pl, &[T::c(p.x), T::c(p.y), T::c(p.z)], true)?;
            let v = g.value(out.grad.expect("gradient requested")).to_f64();
            Vec3::new(v[0], v[1], v[2])
        }
        Some(h) => {
            let mut pts = Vec::with_capacity(18);
            for a in 0..3 {
                for s in [1.0, -1.0] {
                    let mut q = *p;
                    q[a] += s * h;
                    pts.extend([T::c(q.x), T::c(q.y), T::c(q.z)]);
                }
            }
            let out = field.decode(&mut g, pl, &pts, false)?;
            let v = g.value(out.sdf).to_f64();
            Vec3::new(v[0] - v[1], v[2] - v[3], v[4] - v[5]) / (2.0 * h)
        }
    };
    Ok(grad / grad.norm().max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FieldOutput, Model64, ModelConfig};
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Field with constant SDF and color, for closed-form checks.
    struct ConstField {
        sdf: f64,
        color: [f64; 3],
        beta: f64,
    }

    impl FieldDecoder<f64> for ConstField {
        fn decode(&self, g: &mut Graph<f64>, _planes: Var, points: &[f64], with_grad: bool) -> Result<FieldOutput> {
            let n = points.len() / 3;
            let sdf = g.constant(Tensor::full(&[n, 1], self.sdf));
            let rgb = g.constant(Tensor::from_vec(&[n, 3], (0..n).flat_map(|_| self.color).collect())?);
            let grad = with_grad.then(|| g.constant(Tensor::from_vec(&[n, 3], (0..n).flat_map(|_| [0.0, 0.0, 2.0]).collect()).unwrap()));
            Ok(FieldOutput { sdf, rgb, grad })
        }

        fn beta(&self, g: &mut Graph<f64>) -> Var {
            g.constant(Tensor::full(&[1], self.beta))
        }
    }

    fn composite_with_opacity(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, f64) {
        let mut g = Graph::new();
        let n = sigma.len();
        let s = g.constant(Tensor::from_vec(&[1, n], sigma.to_vec()).unwrap());
        let d = g.constant(Tensor::from_vec(&[1, n], delta.to_vec()).unwrap());
        let (w, op) = weights(&mut g, s, d).unwrap();
        (g.value(w).data().to_vec(), g.scalar_value(op))
    }

    fn composite_const(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
        composite_with_opacity(sigma, delta).0
    }

    #[test]
    fn density_values() {
        let beta = 0.1;
        assert!((sdf_to_density(0.0, beta) - 0.5 / beta).abs() < 1e-12);
        let tail = sdf_to_density(10.0 * beta, beta);
        assert!((tail - 0.5 * (-10.0f64).exp() / beta).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let s = -1.0 + 2.0 * i as f64 / 999.0;
            let v = sdf_to_density(s, beta);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn zero_density_renders_nothing() {
        let w = composite_const(&[0.0; 8], &[0.1; 8]);
        assert!(w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn homogeneous_medium_closed_form() {
        for sigma in [0.3, 2.0, 50.0] {
            let ts = sample_depths(0.5, 2.5, 16, Sampling::Midpoint, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let d = deltas(&ts, 2.5);
            let w = composite_const(&[sigma; 16], &d);
            let op: f64 = w.iter().sum();
            let l = 2.5 - ts[0];
            assert!((op - (1.0 - (-sigma * l).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_density_samples_do_not_change_result() {
        let sigma = [0.0, 3.0, 0.0, 1.5, 0.7];
        let ts = [0.1, 0.3, 0.5, 0.6, 0.9];
        let t_far = 1.2;
        let base = composite_const(&sigma, &deltas(&ts, t_far));
        let acc = |w: &[f64], c: &[f64]| -> (f64, f64) { (w.iter().zip(c).map(|(a, b)| a * b).sum(), w.iter().sum()) };
        let colors = [0.2, 0.9, 0.4, 0.1, 0.6];
        // split the zero-density segment [0.5, 0.6)
        let s2 = [0.0, 3.0, 0.0, 0.0, 1.5, 0.7];
        let t2 = [0.1, 0.3, 0.5, 0.55, 0.6, 0.9];
        let c2 = [0.2, 0.9, 0.4, 0.33, 0.1, 0.6];
        let split = composite_const(&s2, &deltas(&t2, t_far));
        // prepend an empty sample in front
        let s3 = [0.0, 0.0, 3.0, 0.0, 1.5, 0.7];
        let t3 = [0.0, 0.1, 0.3, 0.5, 0.6, 0.9];
        let c3 = [0.77, 0.2, 0.9, 0.4, 0.1, 0.6];
        let pre = composite_const(&s3, &deltas(&t3, t_far));
        let (r0, o0) = acc(&base, &colors);
        for (w, c) in [(&split, &c2), (&pre, &c3)] {
            let (r, o) = acc(w, c);
            assert!((r - r0).abs() < 1e-7 && (o - o0).abs() < 1e-7);
        }
    }

    #[test]
    fn weight_sum_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.2)).collect();
            let (w, op) = composite_with_opacity(&s, &d);
            assert!((0.0..=1.0).contains(&op));
            assert!(w.iter().all(|&x| x >= 0.0));
            // the weights telescope to the opacity up to rounding
            assert!((w.iter().sum::<f64>() - op).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_renders_opacity_times_color() {
        let field = ConstField {
            sdf: -0.05,
            color: [0.3, 0.6, 0.9],
            beta: 0.1,
        };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.2), Vec3::zeros(), Vec3::y(), 0.6, 4, 4).unwrap();
        let mut g = Graph::new();
        let planes = g.constant(Tensor::zeros(&[1]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = render_view(&mut g, &field, planes, &cam, &Rect::full(4, 4), &RenderOptions::eval(32), &mut rng).unwrap();
        let rgb = g.value(v.rgb).data().to_vec();
        let op = g.value(v.opacity).data().to_vec();
        let nm = g.value(v.normal.unwrap()).data().to_vec();
        let sigma = sdf_to_density(-0.05, 0.1);
        for i in 0..16 {
            let (o, d) = cam.pixel_ray(i / 4, i % 4);
            let (t0, t1) = unit_cube_interval(&o, &d).unwrap();
            let ts = sample_depths(t0, t1, 32, Sampling::Midpoint, &mut rng).unwrap();
            let expect = 1.0 - (-sigma * (t1 - ts[0])).exp();
            assert!((op[i] - expect).abs() < 1e-6);
            for c in 0..3 {
                // composited over white: op * c + (1 - op)
                let raw = rgb[i * 3 + c] - (1.0 - op[i]);
                assert!((raw - op[i] * field.color[c]).abs() < 1e-12);
            }
            assert!((nm[i * 3 + 2] - op[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_rays_get_background() {
        let field = ConstField {
            sdf: -1.0,
            color: [0.0; 3],
            beta: 0.1,
        };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 5.0, 3.0), Vec3::z(), 0.3, 2, 2).unwrap();
        let mut g = Graph::new();
        let planes = g.constant(Tensor::zeros(&[1]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = render_view(&mut g, &field, planes, &cam, &Rect::full(2, 2), &RenderOptions::eval(8), &mut rng).unwrap();
        assert!(g.value(v.rgb).data().iter().all(|&x| x == 1.0));
        assert!(g.value(v.opacity).data().iter().all(|&x| x == 0.0));
        assert!(g.value(v.normal.unwrap()).data().iter().all(|&x| x == 0.0));
    }

    fn small_model() -> Model64 {
        Model64::new(
            ModelConfig {
                image_res: 16,
                patch_size: 8,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                plane_res: 8,
                plane_channels: 2,
                decoder_hidden: 8,
                sdf_bias_init: 0.6,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap()
    }

    #[test]
    fn crop_matches_full_render() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let planes = Tensor::uniform(&[3, 8, 8, 2], -1.0, 1.0, &mut rng);
        let cam = Camera::look_at(Vec3::new(0.4, 0.3, 2.2), Vec3::zeros(), Vec3::y(), 0.8, 8, 8).unwrap();
        let full = render_image(&m, &planes, &cam, 16, 3).unwrap();
        let mut g = Graph::new();
        let p = g.constant(planes.clone());
        let rect = Rect {
            row: 2,
            col: 3,
            height: 4,
            width: 5,
        };
        let v = render_view(&mut g, &m, p, &cam, &rect, &RenderOptions::eval(16), &mut rng).unwrap();
        let rgb = g.value(v.rgb).data();
        let op = g.value(v.opacity).data();
        for r in 0..4 {
            for c in 0..5 {
                let k = r * 5 + c;
                assert_eq!(*full.opacity.get(r + 2, c + 3), op[k]);
                assert_eq!(full.rgb.get(r + 2, c + 3)[1], rgb[k * 3 + 1]);
            }
        }
        assert_eq!(full.rgb.height, 8);
        assert!(render_view(&mut g, &m, p, &cam, &Rect { row: 6, col: 0, height: 4, width: 2 }, &RenderOptions::eval(4), &mut rng).is_err());
    }

    #[test]
    fn empty_field_is_transparent() {
        let m = small_model();
        let planes = Tensor::zeros(&[3, 8, 8, 2]);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 2.2), Vec3::zeros(), Vec3::y(), 0.8, 6, 6).unwrap();
        let img = render_image(&m, &planes, &cam, 32, 6).unwrap();
        // sdf = bias 0.6 everywhere with zero planes -> density ~ 5 e^-6
        assert!(img.opacity.data.iter().all(|&o| o < 0.05), "{:?}", img.opacity.data);
    }

    #[test]
    fn normal_estimators_agree() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let planes = Tensor::uniform(&[3, 8, 8, 2], -1.0, 1.0, &mut rng);
        for _ in 0..5 {
            let p = Vec3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            let a = estimate_normal(&m, &planes, &p, None).unwrap();
            let c = estimate_normal(&m, &planes, &p, Some(1e-5)).unwrap();
            assert!((a.norm() - 1.0).abs() < 1e-6);
            assert!((a - c).norm() < 1e-3 * (1.0 + c.norm()), "{a:?} vs {c:?}");
        }
    }

    #[test]
    fn pixel_gradients_wrt_planes() {
        let mut m = small_model();
        m.randomize_params(0.5, &mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let planes = Tensor::uniform(&[3, 8, 8, 2], -0.5, 0.5, &mut rng);
        let cam = Camera::look_at(Vec3::new(0.3, 0.2, 2.2), Vec3::zeros(), Vec3::y(), 0.5, 2, 2).unwrap();
        let rays = crop_rays(&cam, &Rect::full(2, 2)).unwrap();
        let opts = RenderOptions {
            n_samples: 8,
            sampling: Sampling::Midpoint,
            normals: true,
            depth: true,
        };
        let err = grad_check(
            |g, p| {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let (rgb, op, nm, dp) = render_rays(g, &m, p, &rays, &opts, &mut r)?;
                let a = g.sum(rgb);
                let b = g.sum(op);
                let nm = g.square(nm.unwrap());
                let c = g.sum(nm);
                let d = g.sum(dp.unwrap());
                let ab = g.add(a, b)?;
                let cd = g.add(c, d)?;
                g.add(ab, cd)
            },
            &planes,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
