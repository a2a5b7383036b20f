//! Single-forward-pass reconstruction and box-region editing.

use std::path::Path;

use crate::dataset::{load_scene, SceneData};
use crate::extraction::{colorize, evaluate_sdf_grid, marching_cubes, Mesh};
use crate::geometry::{canonical_transform, BoxOccluder, Camera, Mat4, CANONICAL_DISTANCE};
use crate::grid::{Grid, Rgb};
use crate::masking::{occluded_pixels, occluder_depth, pixels_to_patch_mask, view_mask_from_depth, PatchMask};
use crate::model::{CondMode, MaskedLrm, ViewInput};
use crate::scene::{render_ground_truth, Primitive, TwoPartScene};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::training::view_input;
use crate::volren::{render_image, RenderedImage};
use crate::{Error, Result};

/// A posed RGB image, optionally with its shape depth (distance along pixel rays).
#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub camera: Camera,
    pub rgb: Grid<Rgb>,
    pub depth: Option<Grid<f64>>,
}

impl PosedView {
    pub fn from_scene(data: &SceneData, views: impl IntoIterator<Item = usize>) -> Result<Vec<PosedView>> {
        views
            .into_iter()
            .map(|k| {
                let v = data.views.get(k).ok_or(Error::IndexOutOfRange {
                    index: k,
                    len: data.views.len(),
                })?;
                Ok(PosedView {
                    camera: data.cameras[k].clone(),
                    rgb: v.rgb.clone(),
                    depth: Some(v.depth.clone()),
                })
            })
            .collect()
    }
}

/// Camera expressed in the frame defined by the world-to-frame transform `m`.
pub fn camera_in_frame(camera: &Camera, m: &Mat4) -> Camera {
    Camera {
        cam_to_world: m * camera.cam_to_world,
        ..camera.clone()
    }
}

/// Triplanes from one forward pass, with the world-to-canonical transform they live in.
#[derive(Clone, Debug)]
pub struct Reconstruction<T: Scalar> {
    pub planes: Tensor<T>,
    pub canonical: Mat4,
}

impl<T: Scalar> Reconstruction<T> {
    /// Full-frame render of a world-space camera.
    pub fn render(&self, model: &MaskedLrm<T>, camera: &Camera, n_samples: usize) -> Result<RenderedImage> {
        render_image(model, &self.planes, &camera_in_frame(camera, &self.canonical), n_samples, 8)
    }

    /// Mesh in world coordinates.
    pub fn mesh(&self, model: &MaskedLrm<T>, res: usize, colors: bool) -> Result<Mesh> {
        let grid = evaluate_sdf_grid(model, &self.planes, res)?;
        let mut mesh = marching_cubes(&grid, 0.0);
        if colors {
            colorize(&mut mesh, model, &self.planes)?;
        }
        let inv = crate::geometry::rigid_inverse(&self.canonical);
        for v in &mut mesh.vertices {
            *v = crate::geometry::transform_point(&inv, v);
        }
        Ok(mesh)
    }
}

/// Masks, in the order of `views`, that `occluder` (world frame) induces; the conditional
/// view always gets an empty mask. Views without depth treat every box pixel as occluded.
pub fn masks_for_box(views: &[PosedView], cond: usize, occluder: Option<&BoxOccluder>, patch: usize) -> Result<Vec<PatchMask>> {
    views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let (h, w) = (v.camera.height, v.camera.width);
            match occluder {
                Some(b) if k != cond => match &v.depth {
                    Some(d) => view_mask_from_depth(d, b, &v.camera, patch),
                    None => {
                        let far = Grid::filled(h, w, f64::INFINITY);
                        pixels_to_patch_mask(&occluded_pixels(&far, &occluder_depth(b, &v.camera))?, patch)
                    }
                },
                _ => PatchMask::empty(h, w, patch),
            }
        })
        .collect()
}

/// Encode posed views with the view at `cond` on the conditional branch. `masks` are indexed
/// like `views`; the conditional entry is ignored. `cond_rgb` replaces the conditional image.
pub fn reconstruct<T: Scalar>(
    model: &MaskedLrm<T>,
    views: &[PosedView],
    cond: usize,
    masks: &[PatchMask],
    cond_rgb: Option<&Grid<Rgb>>,
    mode: CondMode,
) -> Result<Reconstruction<T>> {
    let res = model.config.image_res;
    let cv = views.get(cond).ok_or(Error::IndexOutOfRange {
        index: cond,
        len: views.len(),
    })?;
    if masks.len() != views.len() {
        return Err(Error::shape("reconstruct masks", &[masks.len()], &[views.len()]));
    }
    for v in views {
        if (v.camera.height, v.camera.width) != (res, res) || (v.rgb.height, v.rgb.width) != (res, res) {
            return Err(Error::ConfigMismatch(format!(
                "views must be {res}x{res} to match the checkpoint, got {}x{}",
                v.rgb.height, v.rgb.width
            )));
        }
    }
    let canonical = canonical_transform(&cv.camera, CANONICAL_DISTANCE);
    let input = |rgb: &Grid<Rgb>, cam: &Camera| -> Result<ViewInput> {
        let gt = crate::scene::GtView {
            rgb: rgb.clone(),
            depth: Grid::filled(res, res, f64::INFINITY),
            normal: Grid::filled(res, res, [0.0; 3]),
            silhouette: Grid::filled(res, res, false),
        };
        view_input(&gt, &camera_in_frame(cam, &canonical))
    };
    let cond_img = cond_rgb.unwrap_or(&cv.rgb);
    if !cond_img.same_size(&cv.rgb) {
        return Err(Error::ConfigMismatch(format!(
            "edited conditional image is {}x{}, views are {res}x{res}",
            cond_img.height, cond_img.width
        )));
    }
    let cond_in = input(cond_img, &cv.camera)?;
    let mut inputs = Vec::with_capacity(views.len() - 1);
    let mut mks = Vec::with_capacity(views.len() - 1);
    for (k, v) in views.iter().enumerate() {
        if k != cond {
            inputs.push(input(&v.rgb, &v.camera)?);
            mks.push(&masks[k]);
        }
    }
    let pairs: Vec<(&ViewInput, &PatchMask)> = inputs.iter().zip(mks).collect();
    let mut g = Graph::new();
    let enc = model.encode(&mut g, &cond_in, &pairs, mode)?;
    Ok(Reconstruction {
        planes: g.value(enc.planes).clone(),
        canonical,
    })
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub views: Vec<PosedView>,
    pub cond_view: usize,
    pub edited_cond: Grid<Rgb>,
    /// World-frame region to regenerate; `None` reconstructs without masking.
    pub edit_box: Option<BoxOccluder>,
}

pub struct EditResult<T: Scalar> {
    pub reconstruction: Reconstruction<T>,
    /// Masks fed to the model, indexed like the request's views.
    pub masks: Vec<PatchMask>,
}

pub fn edit<T: Scalar>(model: &MaskedLrm<T>, req: &EditRequest) -> Result<EditResult<T>> {
    let cond = req.views.get(req.cond_view).ok_or(Error::IndexOutOfRange {
        index: req.cond_view,
        len: req.views.len(),
    })?;
    if let Some(b) = &req.edit_box {
        let canon = canonical_transform(&cond.camera, CANONICAL_DISTANCE);
        if !b.transformed(&canon).inside_unit_cube() {
            return Err(Error::invalid("edit box lies outside [-1, 1]^3"));
        }
        let in_view = occluder_depth(b, &cond.camera).data.iter().any(|d| d.is_finite());
        if !in_view {
            return Err(Error::invalid("edit box is not visible from the conditional view"));
        }
    }
    let masks = masks_for_box(&req.views, req.cond_view, req.edit_box.as_ref(), model.config.patch_size)?;
    let reconstruction = reconstruct(model, &req.views, req.cond_view, &masks, Some(&req.edited_cond), CondMode::Clean)?;
    Ok(EditResult { reconstruction, masks })
}

/// `donor` inside `region`, `base` elsewhere.
pub fn composite_images(base: &Grid<Rgb>, donor: &Grid<Rgb>, region: &Grid<bool>) -> Result<Grid<Rgb>> {
    if !base.same_size(donor) || !base.same_size(region) {
        return Err(Error::shape(
            "composite",
            &[base.height, base.width],
            &[donor.height, donor.width],
        ));
    }
    let data = base
        .data
        .iter()
        .zip(&donor.data)
        .zip(&region.data)
        .map(|((b, d), &m)| if m { *d } else { *b })
        .collect();
    Grid::from_vec(base.height, base.width, data)
}

/// Conditional image with the attachment swapped for `donor`: the donor scene's render inside
/// the box's image footprint, the source image elsewhere.
pub fn composite_donor(source: &Grid<Rgb>, parts: &TwoPartScene, donor: &Primitive, camera: &Camera, region: &BoxOccluder) -> Result<Grid<Rgb>> {
    let donor_view = render_ground_truth(&parts.with_attachment(donor.clone()).scene(), camera);
    let footprint = occluder_depth(region, camera).map(|d| d.is_finite());
    composite_images(source, &donor_view.rgb, &footprint)
}

/// Views of a dataset scene folder.
pub fn load_posed_views(dir: &Path) -> Result<Vec<PosedView>> {
    let data = load_scene(dir)?;
    let n = data.views.len();
    PosedView::from_scene(&data, 0..n)
}
