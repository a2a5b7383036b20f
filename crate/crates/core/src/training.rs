//! Batch sampling, learning-rate schedule, AdamW and the staged training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::geometry::{
    canonical_cameras, canonical_transform, sample_box_occluder, plucker_rays, Aabb, BoxOccluder, Camera, Mat3, Mat4,
    OccluderConfig, CANONICAL_DISTANCE,
};
use crate::grid::Rect;
use crate::losses::{recon_loss, LossReport, LossWeights, MetricsLog, TargetCrop};
use crate::masking::{build_view_masks_from_depths, uniform_random_mask, PatchMask};
use crate::model::{CondMode, MaskedLrm, ModelConfig, ViewInput};
use crate::scene::{GtView, SCENE_RADIUS};
use crate::tensor::{Checkpoint, Graph, OptimState, Scalar, Tensor};
use crate::volren::{render_view, RenderOptions, Sampling};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    #[default]
    Box,
    Uniform,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub mode: MaskingMode,
    /// Fraction of patches masked in uniform mode.
    pub uniform_ratio: f64,
    pub occluder: OccluderConfig,
    /// Redraw the occluder when it hides more than `heavy_threshold` of the shape pixels.
    pub resample_heavy: bool,
    pub heavy_threshold: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mode: MaskingMode::Box,
            uniform_ratio: 0.25,
            occluder: OccluderConfig::default(),
            resample_heavy: false,
            heavy_threshold: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSettings {
    pub out_res: usize,
    pub samples_per_ray: usize,
    pub peak_lr: f64,
    pub warmup_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
}

impl StageSettings {
    pub fn stage1() -> Self {
        StageSettings {
            out_res: 48,
            samples_per_ray: 32,
            peak_lr: 4e-4,
            warmup_iters: 50,
            epochs: 30,
            batch_size: 2,
            weights: LossWeights::stage1(),
        }
    }

    pub fn stage2() -> Self {
        StageSettings {
            out_res: 64,
            samples_per_ray: 64,
            peak_lr: 5e-6,
            warmup_iters: 50,
            epochs: 20,
            batch_size: 2,
            weights: LossWeights::stage2(),
        }
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub stage1: StageSettings,
    pub stage2: StageSettings,
    pub crop_size: usize,
    pub n_input_min: usize,
    pub n_input_max: usize,
    pub n_supervision: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub masking: MaskingConfig,
    /// Always use this training view as the conditional view.
    pub fixed_cond_view: Option<usize>,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    /// Checkpoints and metrics go here; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Parameters to start from; required for stage 2.
    pub init_from: Option<PathBuf>,
    /// Continue a run, including optimizer state and iteration.
    pub resume: Option<PathBuf>,
    /// Run batch items in parallel. Results are identical either way.
    pub parallel: bool,
    /// Stop after this many iterations in total, regardless of epochs.
    pub max_iters: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            stage1: StageSettings::stage1(),
            stage2: StageSettings::stage2(),
            crop_size: 32,
            n_input_min: 3,
            n_input_max: 4,
            n_supervision: 2,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            masking: MaskingConfig::default(),
            fixed_cond_view: None,
            checkpoint_every: 1,
            out_dir: None,
            init_from: None,
            resume: None,
            parallel: false,
            max_iters: None,
        }
    }
}

impl TrainConfig {
    pub fn settings(&self) -> &StageSettings {
        if self.stage == 2 {
            &self.stage2
        } else {
            &self.stage1
        }
    }

    pub fn settings_mut(&mut self) -> &mut StageSettings {
        if self.stage == 2 {
            &mut self.stage2
        } else {
            &mut self.stage1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        let s = self.settings();
        s.weights.validate()?;
        if self.n_input_min == 0 || self.n_input_min > self.n_input_max {
            return bad(format!("input view range [{}, {}] invalid", self.n_input_min, self.n_input_max));
        }
        if self.crop_size == 0 || self.crop_size > s.out_res {
            return bad(format!("crop {} does not fit output resolution {}", self.crop_size, s.out_res));
        }
        if s.batch_size == 0 || s.samples_per_ray == 0 || self.n_supervision == 0 {
            return bad("batch_size, samples_per_ray and n_supervision must be positive".into());
        }
        if !(s.peak_lr >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("peak_lr must be nonnegative and grad_clip positive".into());
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, n_shapes: usize) -> usize {
        n_shapes.div_ceil(self.settings().batch_size)
    }

    /// Length of the schedule; `max_iters` may stop a run earlier without changing it.
    pub fn total_iters(&self, n_shapes: usize) -> usize {
        self.settings().epochs * self.iters_per_epoch(n_shapes)
    }
}

/// Everything a training run reads from its TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound {
                what: "config",
                path: path.to_path_buf(),
            });
        }
        toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// RNG for an independent stream of a run (`stream` distinguishes epochs, batches, ...).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const SHUFFLE_STREAM: u64 = 1 << 40;

/// Linear warmup to the peak, then cosine decay reaching 0 at `total_iters - 1`.
pub fn lr_schedule(iter: usize, peak: f64, warmup: usize, total_iters: usize) -> f64 {
    if iter < warmup {
        return peak * iter as f64 / warmup as f64;
    }
    let span = total_iters.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return peak;
    }
    let progress = ((iter - warmup) as f64 / span as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Model input for a rendered view seen from `camera` (the frame the Plücker rays live in).
pub fn view_input(gt: &GtView, camera: &Camera) -> Result<ViewInput> {
    if (gt.height(), gt.width()) != (camera.height, camera.width) {
        return Err(Error::shape(
            "view_input",
            &[gt.height(), gt.width()],
            &[camera.height, camera.width],
        ));
    }
    let rgb = crate::grid::flatten3(&gt.rgb);
    ViewInput::new(camera.height, camera.width, rgb, plucker_rays(camera).channels())
}

/// Crop of `gt` with normals rotated into the field frame by `rotation`.
pub fn target_crop(gt: &GtView, rect: &Rect, rotation: &Mat3) -> Result<TargetCrop> {
    rect.check_inside(gt.height(), gt.width())?;
    let n = rect.height * rect.width;
    let (mut rgb, mut normal) = (Vec::with_capacity(3 * n), Vec::with_capacity(3 * n));
    let (mut silhouette, mut depth) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for r in rect.row..rect.row + rect.height {
        for c in rect.col..rect.col + rect.width {
            rgb.extend(gt.rgb.get(r, c));
            let s = *gt.silhouette.get(r, c);
            let nw = gt.normal.get(r, c);
            let nc = if s {
                rotation * crate::geometry::Vec3::new(nw[0], nw[1], nw[2])
            } else {
                crate::geometry::Vec3::zeros()
            };
            normal.extend([nc.x, nc.y, nc.z]);
            silhouette.push(s);
            depth.push(if s { *gt.depth.get(r, c) } else { f64::INFINITY });
        }
    }
    Ok(TargetCrop {
        height: rect.height,
        width: rect.width,
        rgb,
        normal,
        silhouette,
        depth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Supervision {
    pub view: usize,
    /// Canonical-frame camera at the output resolution.
    pub camera: Camera,
    pub rect: Rect,
    pub target: TargetCrop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub scene: usize,
    pub cond_view: usize,
    pub input_views: Vec<usize>,
    pub cond: ViewInput,
    pub inputs: Vec<ViewInput>,
    pub masks: Vec<PatchMask>,
    /// World-frame occluder in box mode.
    pub occluder: Option<BoxOccluder>,
    /// World to canonical frame.
    pub canonical: Mat4,
    pub supervision: Vec<Supervision>,
    /// Seeds the stratified depth samples of this item.
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n_inputs: usize,
    pub items: Vec<BatchItem>,
}

/// Assemble one batch over `scenes`. Resolutions `model.image_res` and the stage's output
/// resolution must already be prepared on the dataset.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    scenes: &[usize],
    rng: &mut R,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<Batch> {
    let n_views = dataset.config.n_views;
    let need = cfg.n_input_max + cfg.n_supervision + 1;
    if n_views < need {
        return Err(Error::invalid(format!(
            "insufficient views: dataset has {n_views} training views per shape, need {need}"
        )));
    }
    if let Some(c) = cfg.fixed_cond_view.filter(|&c| c >= n_views) {
        return Err(Error::IndexOutOfRange { index: c, len: n_views });
    }
    let n_inputs = rng.gen_range(cfg.n_input_min..=cfg.n_input_max);
    let items = scenes
        .iter()
        .map(|&s| sample_item(dataset, s, n_inputs, rng, cfg, model))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { n_inputs, items })
}

fn sample_item<R: Rng + ?Sized>(
    dataset: &Dataset,
    s: usize,
    n_inputs: usize,
    rng: &mut R,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<BatchItem> {
    let data = dataset.scenes.get(s).ok_or(Error::IndexOutOfRange {
        index: s,
        len: dataset.len(),
    })?;
    let n_views = dataset.config.n_views;
    let (res, p) = (model.image_res, model.patch_size);
    let cond_view = cfg.fixed_cond_view.unwrap_or_else(|| rng.gen_range(0..n_views));
    let others: Vec<usize> = (0..n_views).filter(|&v| v != cond_view).collect();
    let input_views: Vec<usize> = others.choose_multiple(rng, n_inputs).copied().collect();

    let world: Vec<Camera> = data.cameras.iter().map(|c| c.with_resolution(res, res)).collect();
    let canon = canonical_cameras(&world, cond_view, CANONICAL_DISTANCE)?;
    let canonical = canonical_transform(&world[cond_view], CANONICAL_DISTANCE);
    let rot: Mat3 = canonical.fixed_view::<3, 3>(0, 0).into_owned();

    let cond = view_input(data.view_at(cond_view, res)?, &canon[cond_view])?;
    let inputs = input_views
        .iter()
        .map(|&v| view_input(data.view_at(v, res)?, &canon[v]))
        .collect::<Result<Vec<_>>>()?;

    let m = &cfg.masking;
    let (masks, occluder) = match m.mode {
        MaskingMode::None => (
            input_views
                .iter()
                .map(|_| PatchMask::empty(res, res, p))
                .collect::<Result<Vec<_>>>()?,
            None,
        ),
        MaskingMode::Uniform => (
            input_views
                .iter()
                .map(|_| uniform_random_mask(rng, res / p, res / p, p, m.uniform_ratio))
                .collect::<Result<Vec<_>>>()?,
            None,
        ),
        MaskingMode::Box => {
            let bounds = if m.occluder.free_placement {
                Aabb::cube(SCENE_RADIUS)
            } else {
                data.scene.bounding_box()
            };
            let depths: Vec<_> = input_views
                .iter()
                .map(|&v| data.view_at(v, res).map(|g| &g.depth))
                .collect::<Result<Vec<_>>>()?;
            let cams: Vec<Camera> = input_views.iter().map(|&v| world[v].clone()).collect();
            let mut attempt = 0;
            loop {
                let occ = sample_box_occluder(rng, &bounds, &m.occluder)?;
                let masks = build_view_masks_from_depths(&depths, &occ, &cams, p)?;
                attempt += 1;
                if !m.resample_heavy || attempt >= 16 || masked_shape_fraction(&depths, &masks) <= m.heavy_threshold {
                    break (masks, Some(occ));
                }
            }
        }
    };

    let out_res = cfg.settings().out_res;
    let crop = cfg.crop_size;
    let sup_views: Vec<usize> = rand::seq::index::sample(rng, n_views, cfg.n_supervision).into_vec();
    let mut supervision = Vec::with_capacity(sup_views.len());
    for v in sup_views {
        let rect = Rect {
            row: rng.gen_range(0..=out_res - crop),
            col: rng.gen_range(0..=out_res - crop),
            height: crop,
            width: crop,
        };
        let target = target_crop(data.view_at(v, out_res)?, &rect, &rot)?;
        supervision.push(Supervision {
            view: v,
            camera: canon[v].with_resolution(out_res, out_res),
            rect,
            target,
        });
    }
    Ok(BatchItem {
        scene: s,
        cond_view,
        input_views,
        cond,
        inputs,
        masks,
        occluder,
        canonical,
        supervision,
        render_seed: rng.gen(),
    })
}

/// Fraction of shape pixels (over all views) covered by masked patches.
fn masked_shape_fraction(depths: &[&crate::grid::Grid<f64>], masks: &[PatchMask]) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for (d, m) in depths.iter().zip(masks) {
        for r in 0..d.height {
            for c in 0..d.width {
                if d.get(r, c).is_finite() {
                    n += 1;
                    k += m.at_pixel(r, c) as usize;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Loss of one item, scaled by `scale`, with parameter gradients in store order.
pub struct ItemResult<T> {
    pub reports: Vec<LossReport>,
    pub grads: Vec<Vec<T>>,
}

pub fn item_loss_and_grads<T: Scalar>(
    model: &MaskedLrm<T>,
    item: &BatchItem,
    opts: &RenderOptions,
    weights: &LossWeights,
    scale: f64,
) -> Result<ItemResult<T>> {
    let mut g = Graph::new();
    let views: Vec<(&ViewInput, &PatchMask)> = item.inputs.iter().zip(&item.masks).collect();
    let enc = model.encode(&mut g, &item.cond, &views, CondMode::Clean)?;
    let mut rng = ChaCha8Rng::seed_from_u64(item.render_seed);
    let mut total = None;
    let mut reports = Vec::with_capacity(item.supervision.len());
    for sup in &item.supervision {
        let pred = render_view(&mut g, model, enc.planes, &sup.camera, &sup.rect, opts, &mut rng)?;
        let (vars, report) = recon_loss(&mut g, &pred, &sup.target, weights)?;
        reports.push(report);
        total = Some(match total {
            None => vars.total,
            Some(t) => g.add(t, vars.total)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("batch item without supervision"))?;
    let loss = g.scale(total, T::c(scale));
    let grads = g.backward(loss)?;
    let out = model
        .params
        .ids()
        .map(|id| match grads.param(id) {
            Some(gr) => gr.to_vec(),
            None => vec![T::zero(); model.params.get(id).len()],
        })
        .collect();
    Ok(ItemResult { reports, grads: out })
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only (not biases, norms or scalars).
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &crate::ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            state: OptimState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    pub fn with_state(params: &crate::ParamStore<T>, cfg: &TrainConfig, state: OptimState<T>) -> Result<Self> {
        let ok = state.m.len() == params.len()
            && params
                .iter()
                .zip(state.m.iter().zip(&state.v))
                .all(|(p, (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
        if !ok {
            return Err(Error::ConfigMismatch("optimizer state does not match parameters".into()));
        }
        let mut opt = Self::new(params, cfg);
        opt.state = state;
        Ok(opt)
    }

    pub fn step(&mut self, params: &mut crate::ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.state.step += 1;
        let t = self.state.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.state.m[i].data_mut(), self.state.v[i].data_mut());
            for ((w, g), (mi, vi)) in p.data_mut().iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                let gf = g.f64();
                let mf = b1 * mi.f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.f64() + (1.0 - b2) * gf * gf;
                *mi = T::c(mf);
                *vi = T::c(vf);
                let upd = (mf / c1) / ((vf / c2).sqrt() + self.eps);
                let wf = w.f64();
                *w = T::c(wf - lr * (upd + decay * wf));
            }
        }
    }
}

/// Scale `grads` in place to global L2 norm at most `max_norm`; returns the original norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= s;
        }
    }
    norm
}

/// Model and optimizer state for a stage: fresh, from `init_from`, or resumed.
pub fn init_model<T: Scalar>(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<(MaskedLrm<T>, AdamW<T>)> {
    if let Some(path) = &cfg.resume {
        let (model, state) = MaskedLrm::<T>::load(path)?;
        let opt = match state {
            Some(s) => AdamW::with_state(&model.params, cfg, s)?,
            None => AdamW::new(&model.params, cfg),
        };
        return Ok((model, opt));
    }
    let model = match &cfg.init_from {
        Some(path) => MaskedLrm::<T>::load(path)?.0,
        None if cfg.stage == 2 => {
            return Err(Error::NotFound {
                what: "checkpoint",
                path: PathBuf::from("<stage 2 requires init_from>"),
            })
        }
        None => MaskedLrm::new(model_cfg.clone(), &mut stream_rng(cfg.seed, 0))?,
    };
    let opt = AdamW::new(&model.params, cfg);
    Ok((model, opt))
}

pub struct TrainOutcome<T: Scalar> {
    pub model: MaskedLrm<T>,
    pub optimizer: AdamW<T>,
    /// Mean report per step.
    pub history: Vec<LossReport>,
    pub last_checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_NAME: &str = "last.ckpt";

/// Run the configured stage from the optimizer's current iteration to the end of the schedule.
pub fn train_stage<T: Scalar>(
    cfg: &TrainConfig,
    mut model: MaskedLrm<T>,
    mut opt: AdamW<T>,
    dataset: &mut Dataset,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let st = cfg.settings().clone();
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    dataset.prepare_resolution(model.config.image_res);
    dataset.prepare_resolution(st.out_res);
    let n = dataset.len();
    let per_epoch = cfg.iters_per_epoch(n);
    let total = cfg.total_iters(n);
    let stop = cfg.max_iters.map_or(total, |m| m.min(total));
    let opts = RenderOptions {
        n_samples: st.samples_per_ray,
        sampling: Sampling::Stratified,
        normals: st.weights.w_n > 0.0,
        depth: st.weights.w_d > 0.0,
    };
    let mut log = match &cfg.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.txt");
            Some(if cfg.resume.is_some() && path.exists() {
                MetricsLog::append(&path)?
            } else {
                MetricsLog::create(&path)?
            })
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut last_checkpoint = None;
    let mut iter = opt.state.step as usize;
    while iter < stop {
        let epoch = iter / per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        let b = iter % per_epoch;
        let chunk = &order[b * st.batch_size..((b + 1) * st.batch_size).min(n)];
        let batch = sample_batch(dataset, chunk, &mut stream_rng(cfg.seed, 1 + iter as u64), cfg, &model.config)?;
        let n_crops: usize = batch.items.iter().map(|it| it.supervision.len()).sum();
        let scale = 1.0 / n_crops as f64;
        let results: Vec<ItemResult<T>> = if cfg.parallel {
            use rayon::prelude::*;
            batch
                .items
                .par_iter()
                .map(|it| item_loss_and_grads(&model, it, &opts, &st.weights, scale))
                .collect::<Result<_>>()?
        } else {
            batch
                .items
                .iter()
                .map(|it| item_loss_and_grads(&model, it, &opts, &st.weights, scale))
                .collect::<Result<_>>()?
        };
        let reports: Vec<LossReport> = results.iter().flat_map(|r| r.reports.iter().copied()).collect();
        let report = LossReport::mean(&reports);
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (a, b) in grads.iter_mut().zip(&r.grads) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
        }
        let finite = report.total.is_finite() && grads.iter().flatten().all(|v| v.f64().is_finite());
        if !finite {
            let dump = match &cfg.out_dir {
                Some(dir) => {
                    let path = dir.join("nonfinite_dump.ckpt");
                    model.to_checkpoint(Some(opt.state.clone()))?.save(&path)?;
                    let scenes: Vec<usize> = batch.items.iter().map(|it| it.scene).collect();
                    std::fs::write(
                        dir.join("nonfinite_dump.txt"),
                        format!("iter {iter}\nscenes {scenes:?}\nreport {report:?}\n"),
                    )?;
                    format!(", state dumped to {}", path.display())
                }
                None => String::new(),
            };
            return Err(Error::NonFinite(format!(
                "loss {} at iteration {iter}{dump}",
                report.total
            )));
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_schedule(iter, st.peak_lr, st.warmup_iters, total);
        opt.step(&mut model.params, &grads, lr);
        if let Some(log) = &mut log {
            log.log(iter, &report, lr)?;
        }
        history.push(report);
        iter += 1;
        let epoch_done = iter.is_multiple_of(per_epoch);
        if let Some(dir) = &cfg.out_dir {
            let due = epoch_done && (iter / per_epoch).is_multiple_of(cfg.checkpoint_every.max(1));
            if due || iter == stop {
                last_checkpoint = Some(save_checkpoint(dir, &model, &opt)?);
            }
        }
    }
    if let (Some(dir), None) = (&cfg.out_dir, &last_checkpoint) {
        last_checkpoint = Some(save_checkpoint(dir, &model, &opt)?);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        history,
        last_checkpoint,
    })
}

fn save_checkpoint<T: Scalar>(dir: &Path, model: &MaskedLrm<T>, opt: &AdamW<T>) -> Result<PathBuf> {
    let path = dir.join(CHECKPOINT_NAME);
    model.to_checkpoint(Some(opt.state.clone()))?.save(&path)?;
    Ok(path)
}

/// Checkpoint of the current parameters and optimizer state.
pub fn checkpoint_of<T: Scalar>(model: &MaskedLrm<T>, opt: &AdamW<T>) -> Result<Checkpoint<T>> {
    model.to_checkpoint(Some(opt.state.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_res: 16,
            patch_size: 4,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            plane_res: 8,
            plane_channels: 4,
            decoder_hidden: 8,
            ..Default::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        let mut c = TrainConfig {
            crop_size: 8,
            n_input_min: 2,
            n_input_max: 3,
            ..Default::default()
        };
        c.stage1 = StageSettings {
            out_res: 16,
            samples_per_ray: 8,
            epochs: 2,
            warmup_iters: 1,
            ..StageSettings::stage1()
        };
        c
    }

    fn tiny_data() -> Dataset {
        let cfg = DatasetConfig {
            n_scenes: 3,
            n_views: 6,
            n_heldout: 1,
            resolution: 16,
            ..Default::default()
        };
        Dataset::generate(&cfg, 5).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let (peak, warm, total) = (4e-4, 10, 100);
        assert_eq!(lr_schedule(0, peak, warm, total), 0.0);
        assert!((lr_schedule(warm, peak, warm, total) - peak).abs() < 1e-18);
        assert!((lr_schedule(5, peak, warm, total) - peak / 2.0).abs() < 1e-18);
        assert!(lr_schedule(total - 1, peak, warm, total) < 1e-3 * peak);
        let mut prev = f64::INFINITY;
        for i in warm..total {
            let lr = lr_schedule(i, peak, warm, total);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn batch_respects_view_counts_and_modes() {
        let mut ds = tiny_data();
        ds.prepare_resolution(16);
        let mut cfg = tiny_train();
        cfg.n_input_min = 3;
        cfg.n_input_max = 3;
        let m = tiny_model();
        for seed in 0..5 {
            let b = sample_batch(&ds, &[0, 1], &mut stream_rng(seed, 0), &cfg, &m).unwrap();
            assert_eq!(b.n_inputs, 3);
            for it in &b.items {
                assert_eq!(it.inputs.len(), 3);
                assert!(!it.input_views.contains(&it.cond_view));
                assert_eq!(it.supervision.len(), 2);
            }
        }
        cfg.masking.mode = MaskingMode::None;
        let b = sample_batch(&ds, &[2], &mut stream_rng(1, 0), &cfg, &m).unwrap();
        assert!(b.items[0].masks.iter().all(|m| m.count() == 0));
        cfg.masking.mode = MaskingMode::Uniform;
        let b = sample_batch(&ds, &[2], &mut stream_rng(1, 0), &cfg, &m).unwrap();
        assert!(b.items[0].masks.iter().all(|m| m.count() == 4));

        cfg.n_supervision = 2;
        assert!(sample_batch(&ds, &[0], &mut stream_rng(1, 0), &cfg, &m).is_ok());
        cfg.n_supervision = 3;
        assert!(matches!(
            sample_batch(&ds, &[0], &mut stream_rng(1, 0), &cfg, &m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn batch_is_deterministic_and_count_is_per_batch() {
        let mut ds = tiny_data();
        ds.prepare_resolution(16);
        let cfg = tiny_train();
        let m = tiny_model();
        let a = sample_batch(&ds, &[0, 1, 2], &mut stream_rng(9, 3), &cfg, &m).unwrap();
        let b = sample_batch(&ds, &[0, 1, 2], &mut stream_rng(9, 3), &cfg, &m).unwrap();
        assert_eq!(a, b);
        assert!(a.items.iter().all(|it| it.inputs.len() == a.n_inputs));
    }

    #[test]
    fn target_normals_follow_canonical_rotation() {
        let mut ds = tiny_data();
        ds.prepare_resolution(16);
        let m = tiny_model();
        let b = sample_batch(&ds, &[0], &mut stream_rng(2, 0), &tiny_train(), &m).unwrap();
        let it = &b.items[0];
        let rot: Mat3 = it.canonical.fixed_view::<3, 3>(0, 0).into_owned();
        let sup = &it.supervision[0];
        let gt = ds.scenes[0].view_at(sup.view, 16).unwrap();
        for (i, &s) in sup.target.silhouette.iter().enumerate() {
            let (r, c) = (sup.rect.row + i / 8, sup.rect.col + i % 8);
            assert_eq!(s, *gt.silhouette.get(r, c));
            if s {
                let nw = gt.normal.get(r, c);
                let expect = rot * crate::geometry::Vec3::new(nw[0], nw[1], nw[2]);
                for k in 0..3 {
                    assert!((sup.target.normal[3 * i + k] - expect[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        let mut store = crate::ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap());
        store.add("b", Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap());
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[vec![3.0, -0.1], vec![1e-3, 0.0]], 0.01);
        let w = store.get(store.find("w").unwrap()).data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[1] + 0.99).abs() < 1e-6);
        let b = store.get(store.find("b").unwrap()).data();
        assert!((b[0] - 0.49).abs() < 1e-6 && b[1] == 0.5);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn zero_epochs_checkpoint_equals_init() {
        let mut ds = tiny_data();
        let mut cfg = tiny_train();
        cfg.stage1.epochs = 0;
        let dir = tempfile::tempdir().unwrap();
        cfg.out_dir = Some(dir.path().to_path_buf());
        let (model, opt) = init_model::<f32>(&cfg, &tiny_model()).unwrap();
        let init = model.params.clone();
        let out = train_stage(&cfg, model, opt, &mut ds).unwrap();
        let (back, _) = MaskedLrm::<f32>::load(&out.last_checkpoint.unwrap()).unwrap();
        assert_eq!(back.params, init);
    }

    #[test]
    fn stage2_requires_checkpoint() {
        let cfg = TrainConfig {
            stage: 2,
            ..tiny_train()
        };
        assert!(matches!(
            init_model::<f32>(&cfg, &tiny_model()),
            Err(Error::NotFound { what: "checkpoint", .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_train();
        let run = |cfg: &TrainConfig| {
            let mut ds = tiny_data();
            let (model, opt) = init_model::<f32>(cfg, &tiny_model()).unwrap();
            train_stage(cfg, model, opt, &mut ds).unwrap()
        };
        let a = run(&cfg);
        let b = run(&TrainConfig { parallel: true, ..cfg.clone() });
        assert_eq!(a.history.len(), 4);
        assert_eq!(
            checkpoint_of(&a.model, &a.optimizer).unwrap().to_bytes(),
            checkpoint_of(&b.model, &b.optimizer).unwrap().to_bytes()
        );
        assert!(a.history.iter().all(|r| r.total.is_finite() && r.recon_normal == 0.0));

        // stop after 3 iterations, resume, and compare with the uninterrupted run
        let dir = tempfile::tempdir().unwrap();
        let part = TrainConfig {
            max_iters: Some(3),
            out_dir: Some(dir.path().to_path_buf()),
            ..cfg.clone()
        };
        let p = run(&part);
        let resumed = TrainConfig {
            resume: p.last_checkpoint,
            ..cfg.clone()
        };
        let r = run(&resumed);
        assert_eq!(r.history.len(), 1);
        assert_eq!(r.model.params, a.model.params);
        let lines = crate::losses::read_metrics(&dir.path().join("metrics.txt")).unwrap();
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn stage1_ignores_normal_parameters() {
        // with w_N = 0 and no normal rendering, the loss is the w_N = 0 objective exactly
        let mut ds = tiny_data();
        ds.prepare_resolution(16);
        let cfg = tiny_train();
        let m = tiny_model();
        let model = MaskedLrm::<f64>::new(m.clone(), &mut stream_rng(0, 0)).unwrap();
        let b = sample_batch(&ds, &[0], &mut stream_rng(0, 1), &cfg, &m).unwrap();
        let w0 = cfg.stage1.weights;
        let plain = RenderOptions {
            n_samples: 8,
            sampling: Sampling::Stratified,
            normals: false,
            depth: false,
        };
        let with_normals = RenderOptions { normals: true, ..plain };
        let a = item_loss_and_grads(&model, &b.items[0], &plain, &w0, 0.5).unwrap();
        let c = item_loss_and_grads(&model, &b.items[0], &with_normals, &w0, 0.5).unwrap();
        assert_eq!(a.grads, c.grads);
        assert!(c.reports[0].recon_normal > 0.0);
    }
}
