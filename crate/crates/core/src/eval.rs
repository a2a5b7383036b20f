//! Image metrics and held-out novel-view evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SceneData};
use crate::edit::{camera_in_frame, masks_for_box, reconstruct, PosedView};
use crate::geometry::{Mat3, Vec3};
use crate::grid::{Grid, Rgb};
use crate::masking::view_mask_from_depth;
use crate::model::{CondMode, MaskedLrm};
use crate::scene::{FamilyConfig, GtView};
use crate::tensor::Scalar;
use crate::training::stream_rng;
use crate::volren::render_image;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn check_same<A: Clone, B>(a: &Grid<A>, b: &Grid<B>, op: &'static str) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Grid<Rgb>, b: &Grid<Rgb>) -> Result<f64> {
    check_same(a, b, "psnr")?;
    Ok(masked_psnr(a, b, None)?.expect("unmasked psnr over a non-empty image"))
}

/// PSNR over pixels where `mask` is set (all pixels when `None`); `None` if no pixel qualifies.
pub fn masked_psnr(a: &Grid<Rgb>, b: &Grid<Rgb>, mask: Option<&Grid<bool>>) -> Result<Option<f64>> {
    check_same(a, b, "psnr")?;
    if let Some(m) = mask {
        check_same(a, m, "psnr mask")?;
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (p, q)) in a.data.iter().zip(&b.data).enumerate() {
        if mask.is_none_or(|m| m.data[i]) {
            sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    Ok((n > 0).then(|| psnr_from_mse(sum / n as f64)))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn gray(img: &Grid<Rgb>) -> Grid<f64> {
    img.map(|p| (p[0] + p[1] + p[2]) / 3.0)
}

/// Local SSIM over every valid window, indexed by the window's top-left pixel; the window
/// centre sits `SSIM_WINDOW / 2` pixels further in.
pub fn ssim_map(a: &Grid<Rgb>, b: &Grid<Rgb>) -> Result<Grid<f64>> {
    check_same(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let (x, y) = (gray(a), gray(b));
    let w = gaussian_window();
    let (c1, c2) = ((K1 * 1.0).powi(2), (K2 * 1.0).powi(2));
    let (oh, ow) = (a.height - SSIM_WINDOW + 1, a.width - SSIM_WINDOW + 1);
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, wi) in w.iter().enumerate() {
                for (j, wj) in w.iter().enumerate() {
                    let k = wi * wj;
                    let (p, q) = (*x.get(r + i, c + j), *y.get(r + i, c + j));
                    mx += k * p;
                    my += k * q;
                    xx += k * p * p;
                    yy += k * q * q;
                    xy += k * p * q;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            out.push(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    Grid::from_vec(oh, ow, out)
}

pub fn ssim(a: &Grid<Rgb>, b: &Grid<Rgb>) -> Result<f64> {
    Ok(masked_ssim(a, b, None)?.expect("at least one window"))
}

/// Mean local SSIM over windows whose centre pixel is in `mask`.
pub fn masked_ssim(a: &Grid<Rgb>, b: &Grid<Rgb>, mask: Option<&Grid<bool>>) -> Result<Option<f64>> {
    let m = ssim_map(a, b)?;
    if let Some(mk) = mask {
        check_same(a, mk, "ssim mask")?;
    }
    let h = SSIM_WINDOW / 2;
    let (mut s, mut n) = (0.0, 0usize);
    for r in 0..m.height {
        for c in 0..m.width {
            if mask.is_none_or(|mk| *mk.get(r + h, c + h)) {
                s += m.get(r, c);
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

/// Metrics of one rendered view. Region variants are `None` when the region is empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub scene: usize,
    pub view: usize,
    pub n_inputs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: Option<f64>,
    pub psnr_unmasked: Option<f64>,
    pub ssim_masked: Option<f64>,
    pub ssim_unmasked: Option<f64>,
    /// MSE of unit normals over the GT silhouette, in the field frame.
    pub normal_mse: Option<f64>,
    /// Opacity IoU against the GT silhouette inside the masked region.
    pub masked_iou: Option<f64>,
}

/// Compare a rendered view against its ground truth. `region` marks masked pixels.
pub fn view_metrics(
    pred_rgb: &Grid<Rgb>,
    pred_normal: Option<&Grid<Rgb>>,
    pred_opacity: Option<&Grid<f64>>,
    gt: &GtView,
    gt_rotation: &Mat3,
    region: Option<&Grid<bool>>,
) -> Result<ViewMetrics> {
    let unmasked = region.map(|r| r.map(|&v| !v));
    let normal_mse = match pred_normal {
        Some(pn) => {
            check_same(pn, &gt.normal, "normal")?;
            let (mut s, mut n) = (0.0, 0usize);
            for i in 0..pn.data.len() {
                if gt.silhouette.data[i] {
                    let g = gt.normal.data[i];
                    let g = gt_rotation * Vec3::new(g[0], g[1], g[2]);
                    s += (0..3).map(|c| (pn.data[i][c] - g[c]).powi(2)).sum::<f64>();
                    n += 3;
                }
            }
            (n > 0).then(|| s / n as f64)
        }
        None => None,
    };
    let masked_iou = match (pred_opacity, region) {
        (Some(op), Some(r)) => binary_iou(&op.map(|&o| o > 0.5), &gt.silhouette, Some(r))?,
        _ => None,
    };
    Ok(ViewMetrics {
        psnr: psnr(pred_rgb, &gt.rgb)?,
        ssim: ssim(pred_rgb, &gt.rgb)?,
        psnr_masked: match region {
            Some(r) => masked_psnr(pred_rgb, &gt.rgb, Some(r))?,
            None => None,
        },
        psnr_unmasked: masked_psnr(pred_rgb, &gt.rgb, unmasked.as_ref())?,
        ssim_masked: match region {
            Some(r) => masked_ssim(pred_rgb, &gt.rgb, Some(r))?,
            None => None,
        },
        ssim_unmasked: masked_ssim(pred_rgb, &gt.rgb, unmasked.as_ref())?,
        normal_mse,
        masked_iou,
        ..Default::default()
    })
}

/// Intersection over union of two binary images, restricted to `within`; `None` if the union is empty.
pub fn binary_iou(a: &Grid<bool>, b: &Grid<bool>, within: Option<&Grid<bool>>) -> Result<Option<f64>> {
    check_same(a, b, "iou")?;
    let (mut i, mut u) = (0usize, 0usize);
    for k in 0..a.data.len() {
        if within.is_none_or(|w| w.data[k]) {
            i += (a.data[k] && b.data[k]) as usize;
            u += (a.data[k] || b.data[k]) as usize;
        }
    }
    Ok((u > 0).then(|| i as f64 / u as f64))
}

/// Which occluder corrupts the non-conditional inputs during evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMasking {
    #[default]
    None,
    /// Random box per scene, drawn like at training time.
    RandomBox { occluder: crate::geometry::OccluderConfig },
    /// The attachment region of a two-part family.
    EditRegion { family: FamilyConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Input-view counts to evaluate, one setting each.
    pub input_settings: Vec<usize>,
    pub cond_view: usize,
    pub samples_per_ray: usize,
    pub masking: EvalMasking,
    pub cond_mode: CondMode,
    pub seed: u64,
    /// Restrict to the first scenes.
    pub max_scenes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            input_settings: vec![3, 4],
            cond_view: 0,
            samples_per_ray: 64,
            masking: EvalMasking::None,
            cond_mode: CondMode::Clean,
            seed: 0,
            max_scenes: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub n_inputs: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_masked: Option<f64>,
    pub psnr_unmasked: Option<f64>,
    pub ssim_masked: Option<f64>,
    pub ssim_unmasked: Option<f64>,
    pub normal_mse: Option<f64>,
    pub masked_iou: Option<f64>,
    pub views: Vec<ViewMetrics>,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl SettingReport {
    pub fn from_views(n_inputs: usize, views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        SettingReport {
            n_inputs,
            psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            psnr_masked: mean_of(views.iter().map(|v| v.psnr_masked)),
            psnr_unmasked: mean_of(views.iter().map(|v| v.psnr_unmasked)),
            ssim_masked: mean_of(views.iter().map(|v| v.ssim_masked)),
            ssim_unmasked: mean_of(views.iter().map(|v| v.ssim_unmasked)),
            normal_mse: mean_of(views.iter().map(|v| v.normal_mse)),
            masked_iou: mean_of(views.iter().map(|v| v.masked_iou)),
            views,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: Vec<SettingReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>9} {:>7} {:>11} {:>13} {:>11} {:>13} {:>10} {:>10}",
            "inputs", "psnr", "ssim", "psnr_mask", "psnr_unmask", "ssim_mask", "ssim_unmask", "normal_mse", "iou_mask"
        );
        for r in &self.settings {
            let _ = writeln!(
                s,
                "{:>7} {:>9.4} {:>7.4} {:>11} {:>13} {:>11} {:>13} {:>10} {:>10}",
                r.n_inputs,
                r.psnr,
                r.ssim,
                opt(r.psnr_masked),
                opt(r.psnr_unmasked),
                opt(r.ssim_masked),
                opt(r.ssim_unmasked),
                opt(r.normal_mse),
                opt(r.masked_iou)
            );
        }
        s
    }

    /// One row per view plus one `mean` row per setting.
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "n_inputs,scene,view,psnr,ssim,psnr_masked,psnr_unmasked,ssim_masked,ssim_unmasked,normal_mse,masked_iou\n",
        );
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.settings {
            for v in &r.views {
                let _ = writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
                    r.n_inputs,
                    v.scene,
                    v.view,
                    v.psnr,
                    v.ssim,
                    f(v.psnr_masked),
                    f(v.psnr_unmasked),
                    f(v.ssim_masked),
                    f(v.ssim_unmasked),
                    f(v.normal_mse),
                    f(v.masked_iou)
                );
            }
            let _ = writeln!(
                s,
                "{},mean,mean,{:.6},{:.6},{},{},{},{},{},{}",
                r.n_inputs,
                r.psnr,
                r.ssim,
                f(r.psnr_masked),
                f(r.psnr_unmasked),
                f(r.ssim_masked),
                f(r.ssim_unmasked),
                f(r.normal_mse),
                f(r.masked_iou)
            );
        }
        s
    }
}

const POSE_EPS: f64 = 1e-9;

/// Input views for a setting: the conditional view plus the next `n` training views.
pub fn eval_input_views(cond: usize, n: usize, n_train: usize) -> Result<Vec<usize>> {
    if cond >= n_train || n + 1 > n_train {
        return Err(Error::invalid(format!(
            "{n} inputs plus a conditional view need {} training views, dataset has {n_train}",
            n + 1
        )));
    }
    Ok(std::iter::once(cond)
        .chain((0..n_train).filter(|&v| v != cond).take(n))
        .collect())
}

/// Reject held-out poses that coincide with any input pose.
pub fn check_pose_overlap(data: &SceneData, inputs: &[usize], heldout: &[usize]) -> Result<()> {
    for &h in heldout {
        for &i in inputs {
            if h == i || (data.cameras[h].cam_to_world - data.cameras[i].cam_to_world).abs().max() < POSE_EPS {
                return Err(Error::invalid(format!("pose overlap: held-out view {h} coincides with input view {i}")));
            }
        }
    }
    Ok(())
}

fn scene_occluder(cfg: &EvalConfig, data: &SceneData, scene: usize) -> Result<Option<crate::geometry::BoxOccluder>> {
    Ok(match &cfg.masking {
        EvalMasking::None => None,
        EvalMasking::RandomBox { occluder } => {
            let mut rng = stream_rng(cfg.seed, scene as u64);
            Some(crate::geometry::sample_box_occluder(&mut rng, &data.scene.bounding_box(), occluder)?)
        }
        EvalMasking::EditRegion { family } => Some(family.edit_region()),
    })
}

/// Reconstruct each scene from its inputs and score renders of the held-out poses.
pub fn eval_run<T: Scalar>(model: &MaskedLrm<T>, dataset: &mut Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let res = model.config.image_res;
    dataset.prepare_resolution(res);
    let n_train = dataset.config.n_views;
    let heldout: Vec<usize> = dataset.heldout_views().collect();
    if heldout.is_empty() {
        return Err(Error::invalid("dataset has no held-out views"));
    }
    let n_scenes = cfg.max_scenes.map_or(dataset.len(), |m| m.min(dataset.len()));
    let mut settings = Vec::with_capacity(cfg.input_settings.len());
    for &n_in in &cfg.input_settings {
        let inputs = eval_input_views(cfg.cond_view, n_in, n_train)?;
        let mut views = Vec::new();
        for s in 0..n_scenes {
            let data = &dataset.scenes[s];
            check_pose_overlap(data, &inputs, &heldout)?;
            let posed = posed_at(data, &inputs, res)?;
            let occ = scene_occluder(cfg, data, s)?;
            let masks = masks_for_box(&posed, 0, occ.as_ref(), model.config.patch_size)?;
            let rec = reconstruct(model, &posed, 0, &masks, None, cfg.cond_mode)?;
            let rot: Mat3 = rec.canonical.fixed_view::<3, 3>(0, 0).into_owned();
            for &h in &heldout {
                let cam = data.cameras[h].with_resolution(res, res);
                let gt = data.view_at(h, res)?;
                let img = render_image(model, &rec.planes, &camera_in_frame(&cam, &rec.canonical), cfg.samples_per_ray, 8)?;
                let region = match &occ {
                    Some(b) => Some(view_mask_from_depth(&gt.depth, b, &cam, model.config.patch_size)?.to_pixels()),
                    None => None,
                };
                let mut m = view_metrics(&img.rgb, Some(&img.normal), Some(&img.opacity), gt, &rot, region.as_ref())?;
                m.scene = s;
                m.view = h;
                m.n_inputs = n_in;
                views.push(m);
            }
        }
        settings.push(SettingReport::from_views(n_in, views));
    }
    Ok(EvalReport { settings })
}

/// Views `idx` of a scene at resolution `res`, with depth, in the given order.
pub fn posed_at(data: &SceneData, idx: &[usize], res: usize) -> Result<Vec<PosedView>> {
    idx.iter()
        .map(|&k| {
            let v = data.view_at(k, res)?;
            Ok(PosedView {
                camera: data.cameras[k].with_resolution(res, res),
                rgb: v.rgb.clone(),
                depth: Some(v.depth.clone()),
            })
        })
        .collect()
}
