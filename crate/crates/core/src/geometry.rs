//! Pinhole cameras, Plücker ray grids, relative poses and box occluders.
//!
//! Cameras follow the usual graphics convention: the camera looks down its
//! local −z axis with +y up and +x to the right. Depths are distances along
//! the unit ray direction, not z-buffer values.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Distance from the conditional camera to the origin of the canonical frame.
pub const CANONICAL_DISTANCE: f64 = 2.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub cam_to_world: Mat4,
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

fn rigid_error(m: &Mat4) -> Option<String> {
    let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Mat3::identity()).norm();
    if ortho >= 1e-6 {
        return Some(format!("rotation not orthonormal (|RᵀR - I| = {ortho:e})"));
    }
    if r.determinant() <= 0.0 {
        return Some("rotation has negative determinant".into());
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom - Matrix4::<f64>::identity().fixed_view::<1, 4>(3, 0)).norm() > 1e-9 {
        return Some("last row of transform must be (0, 0, 0, 1)".into());
    }
    None
}

impl Camera {
    pub fn new(cam_to_world: Mat4, fov_y: f64, height: usize, width: usize, near: f64, far: f64) -> Result<Self> {
        if let Some(msg) = rigid_error(&cam_to_world) {
            return Err(Error::invalid(msg));
        }
        if !(near < far) || !(fov_y > 0.0 && fov_y < std::f64::consts::PI) || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "bad intrinsics: fov {fov_y}, {height}x{width}, near {near}, far {far}"
            )));
        }
        Ok(Camera {
            cam_to_world,
            fov_y,
            height,
            width,
            near,
            far,
        })
    }

    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, height: usize, width: usize) -> Result<Self> {
        let back = (eye - target).normalize();
        let mut right = up.cross(&back);
        if right.norm() < 1e-9 {
            right = Vec3::new(0.0, 0.0, 1.0).cross(&back);
        }
        let right = right.normalize();
        let true_up = back.cross(&right);
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 1>(0, 0).copy_from(&right);
        m.fixed_view_mut::<3, 1>(0, 1).copy_from(&true_up);
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&back);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye);
        Camera::new(m, fov_y, height, width, 0.1, 10.0)
    }

    pub fn rotation(&self) -> Mat3 {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vec3 {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn world_to_cam(&self) -> Mat4 {
        rigid_inverse(&self.cam_to_world)
    }

    pub fn with_resolution(&self, height: usize, width: usize) -> Camera {
        Camera {
            height,
            width,
            ..self.clone()
        }
    }

    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if patch == 0 || !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::invalid(format!(
                "camera resolution {}x{} not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Unit world-space direction through the continuous pixel coordinate (row, col).
    pub fn direction_at(&self, row: f64, col: f64) -> Vec3 {
        let t = (self.fov_y * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = (col / self.width as f64) * 2.0 - 1.0;
        let v = 1.0 - (row / self.height as f64) * 2.0;
        let d = Vec3::new(u * t * aspect, v * t, -1.0);
        (self.rotation() * d).normalize()
    }

    /// Origin and unit direction of the ray through the center of pixel (row, col).
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        (self.origin(), self.direction_at(row as f64 + 0.5, col as f64 + 0.5))
    }

    /// Continuous pixel coordinate (row, col) of a world point and its distance from
    /// the camera center, or `None` when it is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let w2c = self.world_to_cam();
        let pc = (w2c * Vector4::new(p.x, p.y, p.z, 1.0)).xyz();
        if pc.z >= 0.0 {
            return None;
        }
        let t = (self.fov_y * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = pc.x / (-pc.z * t * aspect);
        let v = pc.y / (-pc.z * t);
        let col = (u + 1.0) * 0.5 * self.width as f64;
        let row = (1.0 - v) * 0.5 * self.height as f64;
        Some((row, col, pc.norm()))
    }
}

pub fn rigid_inverse(m: &Mat4) -> Mat4 {
    let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into_owned();
    let rt = r.transpose();
    let mut out = Mat4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rt * t));
    out
}

pub fn transform_point(m: &Mat4, p: &Vec3) -> Vec3 {
    (m * Vector4::new(p.x, p.y, p.z, 1.0)).xyz()
}

pub fn transform_dir(m: &Mat4, d: &Vec3) -> Vec3 {
    m.fixed_view::<3, 3>(0, 0) * d
}

/// Express every camera relative to the camera at `cond_index`, whose pose becomes the identity.
pub fn relative_pose(cameras: &[Camera], cond_index: usize) -> Result<Vec<Camera>> {
    let cond = cameras.get(cond_index).ok_or(Error::IndexOutOfRange {
        index: cond_index,
        len: cameras.len(),
    })?;
    let w2c = cond.world_to_cam();
    Ok(cameras
        .iter()
        .map(|c| Camera {
            cam_to_world: orthonormalize(&(w2c * c.cam_to_world)),
            ..c.clone()
        })
        .collect())
}

/// World-to-canonical transform: relative to the conditional camera, then shifted so
/// the conditional camera sits at `(0, 0, distance)` looking at the origin.
pub fn canonical_transform(cond: &Camera, distance: f64) -> Mat4 {
    Mat4::new_translation(&Vec3::new(0.0, 0.0, distance)) * cond.world_to_cam()
}

/// [`relative_pose`] followed by the fixed shift that puts the scene back inside the unit cube.
pub fn canonical_cameras(cameras: &[Camera], cond_index: usize, distance: f64) -> Result<Vec<Camera>> {
    let shift = Mat4::new_translation(&Vec3::new(0.0, 0.0, distance));
    Ok(relative_pose(cameras, cond_index)?
        .into_iter()
        .map(|c| Camera {
            cam_to_world: shift * c.cam_to_world,
            ..c
        })
        .collect())
}

fn orthonormalize(m: &Mat4) -> Mat4 {
    let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    // Gram-Schmidt keeps already-orthonormal input unchanged up to roundoff
    let x = r.column(0).normalize();
    let y = (r.column(1) - x * x.dot(&r.column(1))).normalize();
    let z = x.cross(&y);
    let mut out = *m;
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::from_columns(&[x, y, z]));
    out
}

/// Per-pixel Plücker coordinates `(d, o × d)` in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct RayGrid {
    pub height: usize,
    pub width: usize,
    pub directions: Vec<Vec3>,
    pub moments: Vec<Vec3>,
}

impl RayGrid {
    /// Interleaved `H×W×6` channels `(dx, dy, dz, mx, my, mz)`.
    pub fn channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.directions.len() * 6);
        for (d, m) in self.directions.iter().zip(&self.moments) {
            out.extend([d.x, d.y, d.z, m.x, m.y, m.z]);
        }
        out
    }
}

pub fn plucker_rays(camera: &Camera) -> RayGrid {
    let o = camera.origin();
    let mut directions = Vec::with_capacity(camera.height * camera.width);
    let mut moments = Vec::with_capacity(camera.height * camera.width);
    for r in 0..camera.height {
        for c in 0..camera.width {
            let d = camera.direction_at(r as f64 + 0.5, c as f64 + 0.5);
            directions.push(d);
            moments.push(o.cross(&d));
        }
    }
    RayGrid {
        height: camera.height,
        width: camera.width,
        directions,
        moments,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::invalid(format!("empty bounds {min:?}..{max:?}")));
        }
        Ok(Aabb { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Aabb {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }
}

/// Slab intersection of a ray with an axis-aligned box: `(t_enter, t_exit)`, possibly negative.
pub fn ray_aabb(origin: &Vec3, dir: &Vec3, min: &Vec3, max: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-300 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut a, mut b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Near/far of a ray inside `[-1, 1]^3`, clipped to nonnegative t.
pub fn unit_cube_interval(origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
    let (t0, t1) = ray_aabb(origin, dir, &Vec3::repeat(-1.0), &Vec3::repeat(1.0))?;
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxOccluder {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub rotation: Mat3,
}

impl BoxOccluder {
    pub fn new(center: Vec3, half_extents: Vec3, rotation: Mat3) -> Result<Self> {
        if half_extents.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::invalid(format!("half extents must be positive: {half_extents:?}")));
        }
        if (rotation.transpose() * rotation - Mat3::identity()).norm() > 1e-6 {
            return Err(Error::invalid("occluder rotation not orthonormal"));
        }
        Ok(BoxOccluder {
            center,
            half_extents,
            rotation,
        })
    }

    pub fn axis_aligned(center: Vec3, half_extents: Vec3) -> Result<Self> {
        Self::new(center, half_extents, Mat3::identity())
    }

    /// Parse `cx,cy,cz,hx,hy,hz`.
    pub fn parse(spec: &str) -> Result<Self> {
        let v: Vec<f64> = spec
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("box '{spec}': {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 6 {
            return Err(Error::Parse(format!("box needs 6 numbers, got {}", v.len())));
        }
        Self::axis_aligned(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i])
    }

    pub fn inflated(&self, by: f64) -> BoxOccluder {
        BoxOccluder {
            half_extents: self.half_extents.add_scalar(by),
            ..self.clone()
        }
    }

    /// Transform into another frame by a rigid transform.
    pub fn transformed(&self, m: &Mat4) -> BoxOccluder {
        let r: Mat3 = m.fixed_view::<3, 3>(0, 0).into_owned();
        BoxOccluder {
            center: transform_point(m, &self.center),
            half_extents: self.half_extents,
            rotation: r * self.rotation,
        }
    }

    /// Whether the box lies entirely inside `[-1, 1]^3`.
    pub fn inside_unit_cube(&self) -> bool {
        let mut ok = true;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let c = self.center
                        + self.rotation * Vec3::new(sx, sy, sz).component_mul(&self.half_extents);
                    ok &= c.iter().all(|v| v.abs() <= 1.0 + 1e-12);
                }
            }
        }
        ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OccluderRotation {
    #[default]
    AxisAligned,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccluderConfig {
    pub len_min: f64,
    pub len_max: f64,
    pub rotation: OccluderRotation,
    /// Sample the center anywhere in the scene domain instead of inside the shape's bounding box.
    pub free_placement: bool,
}

impl Default for OccluderConfig {
    fn default() -> Self {
        OccluderConfig {
            len_min: 0.2,
            len_max: 0.8,
            rotation: OccluderRotation::AxisAligned,
            free_placement: false,
        }
    }
}

/// Box with i.i.d. uniform side lengths and a center uniform in `bounds`.
pub fn sample_box_occluder<R: Rng + ?Sized>(rng: &mut R, bounds: &Aabb, cfg: &OccluderConfig) -> Result<BoxOccluder> {
    if !(cfg.len_min > 0.0) || cfg.len_min > cfg.len_max {
        return Err(Error::invalid(format!(
            "occluder side range [{}, {}] invalid",
            cfg.len_min, cfg.len_max
        )));
    }
    let side = |rng: &mut R| {
        if cfg.len_min == cfg.len_max {
            cfg.len_min
        } else {
            rng.gen_range(cfg.len_min..cfg.len_max)
        }
    };
    let half = Vec3::new(side(rng), side(rng), side(rng)) * 0.5;
    let coord = |rng: &mut R, i: usize| {
        if bounds.min[i] == bounds.max[i] {
            bounds.min[i]
        } else {
            rng.gen_range(bounds.min[i]..bounds.max[i])
        }
    };
    let center = Vec3::new(coord(rng, 0), coord(rng, 1), coord(rng, 2));
    let rotation = match cfg.rotation {
        OccluderRotation::AxisAligned => Mat3::identity(),
        OccluderRotation::Uniform => {
            let n = nalgebra::Quaternion::new(
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            );
            UnitQuaternion::from_quaternion(n).to_rotation_matrix().into_inner()
        }
    };
    BoxOccluder::new(center, half, rotation)
}

/// Smallest nonnegative t at which the ray meets the box surface.
pub fn ray_box_depth(origin: &Vec3, direction: &Vec3, b: &BoxOccluder) -> Option<f64> {
    let rt = b.rotation.transpose();
    let o = rt * (origin - b.center);
    let d = rt * direction;
    let (t0, t1) = ray_aabb(&o, &d, &(-b.half_extents), &b.half_extents)?;
    if t0 >= 0.0 {
        Some(t0)
    } else if t1 >= 0.0 {
        Some(t1)
    } else {
        None
    }
}

/// Plain-text camera records: a transform line (top three rows of cam-to-world) then
/// `fov_y height width near far`, blocks separated by blank lines.
pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut out = String::new();
    for (i, c) in cameras.iter().enumerate() {
        out.push_str(&format!("# camera {i}\n"));
        let m = &c.cam_to_world;
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |col| (r, col)))
            .map(|(r, col)| format!("{}", m[(r, col)]))
            .collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
        out.push_str(&format!("{} {} {} {} {}\n\n", c.fov_y, c.height, c.width, c.near, c.far));
    }
    out
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if !lines.len().is_multiple_of(2) {
        return Err(Error::Parse("camera file has an incomplete record".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("camera value '{s}': {e}")));
    lines
        .chunks(2)
        .map(|rec| {
            let t: Vec<f64> = rec[0].split_whitespace().map(num).collect::<Result<_>>()?;
            let k: Vec<&str> = rec[1].split_whitespace().collect();
            if t.len() != 12 || k.len() != 5 {
                return Err(Error::Parse(format!("bad camera record: {rec:?}")));
            }
            let mut m = Mat4::identity();
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] = t[r * 4 + c];
                }
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("resolution '{s}': {e}")));
            Camera::new(m, num(k[0])?, dim(k[1])?, dim(k[2])?, num(k[3])?, num(k[4])?)
        })
        .collect()
}

/// Cameras at `radius` looking at the origin: azimuth uniform, elevation area-uniform
/// within `[-max_elev, max_elev]`.
pub fn sample_orbit_cameras<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    radius: f64,
    max_elev: f64,
    fov_y: f64,
    res: usize,
) -> Result<Vec<Camera>> {
    let s = max_elev.sin();
    (0..n)
        .map(|_| {
            let az = rng.gen_range(0.0..std::f64::consts::TAU);
            let elev = rng.gen_range(-s..s).asin();
            orbit_camera(az, elev, radius, fov_y, res)
        })
        .collect()
}

pub fn orbit_camera(azimuth: f64, elevation: f64, radius: f64, fov_y: f64, res: usize) -> Result<Camera> {
    let eye = Vec3::new(
        radius * elevation.cos() * azimuth.sin(),
        radius * elevation.sin(),
        radius * elevation.cos() * azimuth.cos(),
    );
    Camera::look_at(eye, Vec3::zeros(), Vec3::y(), fov_y, res, res)
}
