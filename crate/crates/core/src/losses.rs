//! Reconstruction, perceptual and depth losses over rendered crops.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::volren::PredView;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_i: f64,
    pub w_n: f64,
    pub w_m: f64,
    pub w_p: f64,
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::stage1()
    }
}

impl LossWeights {
    pub fn stage1() -> Self {
        LossWeights {
            w_i: 1.0,
            w_n: 0.0,
            w_m: 1.0,
            w_p: 1.0,
            w_d: 0.0,
        }
    }

    pub fn stage2() -> Self {
        LossWeights {
            w_n: 1.0,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.w_i, self.w_n, self.w_m, self.w_p, self.w_d].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon_rgb: f64,
    pub recon_normal: f64,
    pub recon_mask: f64,
    pub perceptual: f64,
    pub depth: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.w_i * self.recon_rgb + w.w_n * self.recon_normal + w.w_m * self.recon_mask + w.w_p * self.perceptual + w.w_d * self.depth
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.total += r.total / n;
            m.recon_rgb += r.recon_rgb / n;
            m.recon_normal += r.recon_normal / n;
            m.recon_mask += r.recon_mask / n;
            m.perceptual += r.perceptual / n;
            m.depth += r.depth / n;
        }
        m
    }
}

/// Ground truth over a crop. `normal` is expressed in the field's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCrop {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub normal: Vec<f64>,
    pub silhouette: Vec<bool>,
    /// Distance along the ray, `+inf` off the silhouette.
    pub depth: Vec<f64>,
}

impl TargetCrop {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn check(&self, pred: &PredView) -> Result<()> {
        let n = self.pixels();
        if (pred.height, pred.width) != (self.height, self.width)
            || self.rgb.len() != n * 3
            || self.normal.len() != n * 3
            || self.silhouette.len() != n
            || self.depth.len() != n
        {
            return Err(Error::shape("loss", &[pred.height, pred.width], &[self.height, self.width]));
        }
        Ok(())
    }
}

fn consts<T: Scalar>(g: &mut Graph<T>, shape: &[usize], v: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::from_f64(shape, v)?))
}

fn mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean of `(a - b)^2 * m` over entries with `m = 1`, `0` if none.
fn masked_mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, m: &[f64]) -> Result<Option<Var>> {
    let count: f64 = m.iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    let shape = g.shape(a).to_vec();
    let mv = consts(g, &shape, m)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let sq = g.mul(sq, mv)?;
    let s = g.sum(sq);
    Ok(Some(g.scale(s, T::c(1.0 / count))))
}

/// Average-pool `[h, w, c]` by factor `f`.
pub fn avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize, c: usize, f: usize) -> Result<Var> {
    if f == 1 {
        return Ok(x);
    }
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::invalid(format!("pool factor {f} does not divide {h}x{w}")));
    }
    let x = g.reshape(x, &[h / f, f, w / f, f, c])?;
    let x = g.permute(x, &[0, 2, 4, 1, 3])?;
    let x = g.reshape(x, &[h / f, w / f, c, f * f])?;
    let s = g.sum_axis(x, 3)?;
    Ok(g.scale(s, T::c(1.0 / (f * f) as f64)))
}

pub const PYRAMID: [usize; 3] = [1, 2, 4];

/// Mean over pyramid levels (factors 1, 2, 4) of the per-level MSE.
pub fn perceptual_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var, h: usize, w: usize) -> Result<Var> {
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("perceptual loss needs at least 8x8, got {h}x{w}")));
    }
    if g.value(pred).len() != h * w * 3 || g.value(gt).len() != h * w * 3 {
        return Err(Error::shape("perceptual_loss", g.shape(pred), g.shape(gt)));
    }
    let p = g.reshape(pred, &[h, w, 3])?;
    let t = g.reshape(gt, &[h, w, 3])?;
    let mut terms = Vec::with_capacity(PYRAMID.len());
    for f in PYRAMID {
        let a = avg_pool(g, p, h, w, 3, f)?;
        let b = avg_pool(g, t, h, w, 3, f)?;
        let m = mse(g, a, b)?;
        terms.push(g.reshape(m, &[1])?);
    }
    let all = g.concat(&terms, 0)?;
    Ok(g.mean(all))
}

/// Depth MSE over silhouette pixels.
pub fn depth_loss<T: Scalar>(g: &mut Graph<T>, pred_depth: Var, gt_depth: &[f64], silhouette: &[bool]) -> Result<Var> {
    let n = g.value(pred_depth).len();
    if gt_depth.len() != n || silhouette.len() != n {
        return Err(Error::shape("depth_loss", &[n], &[gt_depth.len(), silhouette.len()]));
    }
    let m: Vec<f64> = silhouette.iter().map(|&s| s as u8 as f64).collect();
    let gd: Vec<f64> = gt_depth.iter().zip(silhouette).map(|(&d, &s)| if s { d } else { 0.0 }).collect();
    let shape = g.shape(pred_depth).to_vec();
    let gv = consts(g, &shape, &gd)?;
    match masked_mse(g, pred_depth, gv, &m)? {
        Some(v) => Ok(v),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

/// Loss terms as graph nodes, for backpropagation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon_rgb: Var,
    pub recon_mask: Var,
    pub recon_normal: Option<Var>,
    pub perceptual: Option<Var>,
    pub depth: Option<Var>,
}

/// Weighted reconstruction loss. Terms with zero weight are still reported when their inputs exist.
pub fn recon_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: &PredView,
    target: &TargetCrop,
    w: &LossWeights,
) -> Result<(LossVars, LossReport)> {
    target.check(pred)?;
    let n = target.pixels();
    let gt_rgb = consts(g, &[n, 3], &target.rgb)?;
    let recon_rgb = mse(g, pred.rgb, gt_rgb)?;
    let sil: Vec<f64> = target.silhouette.iter().map(|&s| s as u8 as f64).collect();
    let gt_m = consts(g, &[n], &sil)?;
    let recon_mask = mse(g, pred.opacity, gt_m)?;

    let recon_normal = match pred.normal {
        Some(nm) => {
            let gt_n = consts(g, &[n, 3], &target.normal)?;
            let m3: Vec<f64> = sil.iter().flat_map(|&s| [s; 3]).collect();
            Some(match masked_mse(g, nm, gt_n, &m3)? {
                Some(v) => v,
                None => g.constant(Tensor::scalar(T::zero())),
            })
        }
        None => None,
    };
    let perceptual = if w.w_p > 0.0 {
        Some(perceptual_loss(g, pred.rgb, gt_rgb, target.height, target.width)?)
    } else {
        None
    };
    let depth = match pred.depth {
        Some(d) => Some(depth_loss(g, d, &target.depth, &target.silhouette)?),
        None => None,
    };
    let mut total = g.scale(recon_rgb, T::c(w.w_i));
    let mut add = |g: &mut Graph<T>, v: Option<Var>, wt: f64| -> Result<()> {
        if let (Some(v), true) = (v, wt > 0.0) {
            let s = g.scale(v, T::c(wt));
            total = g.add(total, s)?;
        }
        Ok(())
    };
    add(g, Some(recon_mask), w.w_m)?;
    add(g, recon_normal, w.w_n)?;
    add(g, perceptual, w.w_p)?;
    add(g, depth, w.w_d)?;
    let val = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.scalar_value(v).f64());
    let report = LossReport {
        total: g.scalar_value(total).f64(),
        recon_rgb: val(g, Some(recon_rgb)),
        recon_normal: val(g, recon_normal),
        recon_mask: val(g, Some(recon_mask)),
        perceptual: val(g, perceptual),
        depth: val(g, depth),
    };
    Ok((
        LossVars {
            total,
            recon_rgb,
            recon_mask,
            recon_normal,
            perceptual,
            depth,
        },
        report,
    ))
}

/// Append-only plain-text log, one line per step.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# iter total recon_rgb recon_normal recon_mask perceptual depth lr")?;
        Ok(MetricsLog { file })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
        Ok(MetricsLog { file })
    }

    pub fn log(&mut self, iter: usize, r: &LossReport, lr: f64) -> Result<()> {
        writeln!(
            self.file,
            "{iter} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.6e}",
            r.total, r.recon_rgb, r.recon_normal, r.recon_mask, r.perceptual, r.depth, lr
        )?;
        Ok(())
    }
}

/// Parse a metrics log back into `(iter, report)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, LossReport)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() < 7 {
            return Err(Error::Parse(format!("metrics line '{line}'")));
        }
        let f = |i: usize| v[i].parse::<f64>().map_err(|e| Error::Parse(format!("'{}': {e}", v[i])));
        out.push((
            v[0].parse().map_err(|e| Error::Parse(format!("'{}': {e}", v[0])))?,
            LossReport {
                total: f(1)?,
                recon_rgb: f(2)?,
                recon_normal: f(3)?,
                recon_mask: f(4)?,
                perceptual: f(5)?,
                depth: f(6)?,
            },
        ));
    }
    Ok(out)
}
