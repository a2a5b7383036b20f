//! Analytic signed-distance scenes and their sphere-traced ground-truth views.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, BoxOccluder, Camera, Mat3, Vec3};
use crate::grid::{Grid, Rgb};
use crate::{Error, Result};

/// Every scene fits in this sphere around the origin.
pub const SCENE_RADIUS: f64 = 0.9;

const TRACE_EPS: f64 = 1e-5;
const TRACE_STEPS: usize = 256;
const NORMAL_STEP: f64 = 1e-4;
const AMBIENT: f64 = 0.35;

/// Fixed world-space light direction (unit).
pub fn light_dir() -> Vec3 {
    Vec3::new(0.35, 0.8, 0.5).normalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Sphere,
    Box,
    Torus,
    Capsule,
}

impl PrimitiveKind {
    fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Box => "box",
            PrimitiveKind::Torus => "torus",
            PrimitiveKind::Capsule => "capsule",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
    /// Ring in the local xz plane.
    Torus { major: f64, minor: f64 },
    /// Segment along the local y axis.
    Capsule { half_height: f64, radius: f64 },
}

impl Shape {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Shape::Sphere { .. } => PrimitiveKind::Sphere,
            Shape::Box { .. } => PrimitiveKind::Box,
            Shape::Torus { .. } => PrimitiveKind::Torus,
            Shape::Capsule { .. } => PrimitiveKind::Capsule,
        }
    }

    fn dims(&self) -> Vec<f64> {
        match self {
            Shape::Sphere { radius } => vec![*radius],
            Shape::Box { half } => vec![half.x, half.y, half.z],
            Shape::Torus { major, minor } => vec![*major, *minor],
            Shape::Capsule { half_height, radius } => vec![*half_height, *radius],
        }
    }

    fn from_dims(kind: PrimitiveKind, d: &[f64]) -> Result<Shape> {
        let need = match kind {
            PrimitiveKind::Sphere => 1,
            PrimitiveKind::Box => 3,
            _ => 2,
        };
        if d.len() != need {
            return Err(Error::Parse(format!("{} needs {need} dimensions", kind.name())));
        }
        Ok(match kind {
            PrimitiveKind::Sphere => Shape::Sphere { radius: d[0] },
            PrimitiveKind::Box => Shape::Box {
                half: Vec3::new(d[0], d[1], d[2]),
            },
            PrimitiveKind::Torus => Shape::Torus {
                major: d[0],
                minor: d[1],
            },
            PrimitiveKind::Capsule => Shape::Capsule {
                half_height: d[0],
                radius: d[1],
            },
        })
    }

    fn local_sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Box { half } => {
                let q = p.abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Shape::Torus { major, minor } => {
                let ring = (p.x * p.x + p.z * p.z).sqrt() - major;
                (ring * ring + p.y * p.y).sqrt() - minor
            }
            Shape::Capsule { half_height, radius } => {
                let y = p.y - p.y.clamp(-half_height, *half_height);
                (p.x * p.x + y * y + p.z * p.z).sqrt() - radius
            }
        }
    }

    fn extent(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half } => half.norm(),
            Shape::Torus { major, minor } => major + minor,
            Shape::Capsule { half_height, radius } => half_height + radius,
        }
    }

    fn scaled(&self, s: f64) -> Shape {
        Shape::from_dims(self.kind(), &self.dims().iter().map(|d| d * s).collect::<Vec<_>>()).expect("same arity")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub color: Rgb,
}

impl Primitive {
    pub fn new(shape: Shape, rotation: Mat3, translation: Vec3, color: Rgb) -> Result<Self> {
        if shape.dims().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::invalid(format!("primitive dimensions must be positive: {shape:?}")));
        }
        if color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid(format!("color out of range: {color:?}")));
        }
        if (rotation.transpose() * rotation - Mat3::identity()).norm() > 1e-6 {
            return Err(Error::invalid("primitive rotation not orthonormal"));
        }
        Ok(Primitive {
            shape,
            rotation,
            translation,
            color,
        })
    }

    pub fn sphere(center: Vec3, radius: f64, color: Rgb) -> Result<Self> {
        Self::new(Shape::Sphere { radius }, Mat3::identity(), center, color)
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        self.shape.local_sdf(&(self.rotation.transpose() * (p - self.translation)))
    }

    pub fn bounding_radius(&self) -> f64 {
        self.translation.norm() + self.shape.extent()
    }

    fn scaled(&self, s: f64) -> Primitive {
        Primitive {
            shape: self.shape.scaled(s),
            translation: self.translation * s,
            ..self.clone()
        }
    }
}

/// Union of primitives; color comes from the nearest primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSdf {
    pub primitives: Vec<Primitive>,
}

impl SceneSdf {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        Ok(SceneSdf { primitives })
    }

    pub fn eval_sdf(&self, p: &Vec3) -> f64 {
        self.nearest(p).0
    }

    /// (distance, index) of the closest primitive.
    pub fn nearest(&self, p: &Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.primitives.iter().enumerate() {
            let d = prim.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn bounding_radius(&self) -> f64 {
        self.primitives.iter().map(Primitive::bounding_radius).fold(0.0, f64::max)
    }

    /// Conservative axis-aligned bounds from per-primitive bounding spheres.
    pub fn bounding_box(&self) -> Aabb {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.primitives {
            let e = p.shape.extent();
            min = min.inf(&p.translation.add_scalar(-e));
            max = max.sup(&p.translation.add_scalar(e));
        }
        Aabb { min, max }
    }

    pub fn color_at(&self, p: &Vec3) -> Rgb {
        self.primitives[self.nearest(p).1].color
    }

    pub fn gradient(&self, p: &Vec3, h: f64) -> Vec3 {
        let f = |q: Vec3| self.eval_sdf(&q);
        Vec3::new(
            f(p + Vec3::x() * h) - f(p - Vec3::x() * h),
            f(p + Vec3::y() * h) - f(p - Vec3::y() * h),
            f(p + Vec3::z() * h) - f(p - Vec3::z() * h),
        ) / (2.0 * h)
    }

    fn rescaled_to_fit(mut self) -> Self {
        let r = self.bounding_radius();
        if r > SCENE_RADIUS {
            let s = SCENE_RADIUS / r;
            self.primitives = self.primitives.iter().map(|p| p.scaled(s)).collect();
        }
        self
    }

    /// Sphere tracing from the ray origin; returns the hit distance.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        // restrict to the sphere that bounds every scene
        let b = origin.dot(dir);
        let c = origin.norm_squared() - 1.0;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let (t_in, t_out) = ((-b - sq).max(0.0), -b + sq);
        if t_out < 0.0 {
            return None;
        }
        let mut t = t_in;
        for _ in 0..TRACE_STEPS {
            let d = self.eval_sdf(&(origin + t * dir));
            if d.abs() < TRACE_EPS {
                return Some(t);
            }
            t += d;
            if t > t_out {
                return None;
            }
        }
        None
    }

    /// Plain-text primitive list, one primitive per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# kind dims... rot r00..r22 pos x y z color r g b\n");
        for p in &self.primitives {
            let dims: Vec<String> = p.shape.dims().iter().map(|d| d.to_string()).collect();
            let rot: Vec<String> = (0..3)
                .flat_map(|r| (0..3).map(move |c| (r, c)))
                .map(|(r, c)| p.rotation[(r, c)].to_string())
                .collect();
            out.push_str(&format!(
                "{} {} rot {} pos {} {} {} color {} {} {}\n",
                p.shape.kind().name(),
                dims.join(" "),
                rot.join(" "),
                p.translation.x,
                p.translation.y,
                p.translation.z,
                p.color[0],
                p.color[1],
                p.color[2]
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut prims = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let tok: Vec<&str> = line.split_whitespace().collect();
            let kind = match tok[0] {
                "sphere" => PrimitiveKind::Sphere,
                "box" => PrimitiveKind::Box,
                "torus" => PrimitiveKind::Torus,
                "capsule" => PrimitiveKind::Capsule,
                other => return Err(Error::Parse(format!("unknown primitive '{other}'"))),
            };
            let pos = |key: &str| {
                tok.iter()
                    .position(|t| *t == key)
                    .ok_or_else(|| Error::Parse(format!("missing '{key}' in '{line}'")))
            };
            let (i_rot, i_pos, i_col) = (pos("rot")?, pos("pos")?, pos("color")?);
            let nums = |a: usize, b: usize| -> Result<Vec<f64>> {
                tok.get(a..b)
                    .ok_or_else(|| Error::Parse(format!("truncated line '{line}'")))?
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
                    .collect()
            };
            let dims = nums(1, i_rot)?;
            let rot = nums(i_rot + 1, i_pos)?;
            let p = nums(i_pos + 1, i_col)?;
            let c = nums(i_col + 1, tok.len())?;
            if rot.len() != 9 || p.len() != 3 || c.len() != 3 {
                return Err(Error::Parse(format!("bad primitive line '{line}'")));
            }
            prims.push(Primitive::new(
                Shape::from_dims(kind, &dims)?,
                Mat3::from_row_slice(&rot),
                Vec3::new(p[0], p[1], p[2]),
                [c[0], c[1], c[2]],
            )?);
        }
        SceneSdf::new(prims)
    }
}

/// Ground-truth renders of one camera (normals in world space, white background).
#[derive(Clone, Debug, PartialEq)]
pub struct GtView {
    pub rgb: Grid<Rgb>,
    pub depth: Grid<f64>,
    pub normal: Grid<Rgb>,
    pub silhouette: Grid<bool>,
}

impl GtView {
    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    /// Silhouette must match finite depth and carry unit normals.
    pub fn check_consistency(&self) -> Result<()> {
        for i in 0..self.depth.data.len() {
            let hit = self.depth.data[i].is_finite();
            if hit != self.silhouette.data[i] {
                return Err(Error::invalid(format!("silhouette/depth mismatch at pixel {i}")));
            }
            let n = self.normal.data[i];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if hit && (len - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("non-unit normal at pixel {i}")));
            }
        }
        Ok(())
    }
}

fn shade(albedo: Rgb, normal: &Vec3) -> Rgb {
    let lambert = normal.dot(&light_dir()).max(0.0);
    let s = AMBIENT + (1.0 - AMBIENT) * lambert;
    [albedo[0] * s, albedo[1] * s, albedo[2] * s]
}

pub fn render_ground_truth(scene: &SceneSdf, camera: &Camera) -> GtView {
    let (h, w) = (camera.height, camera.width);
    let rows: Vec<Vec<(Rgb, f64, Rgb, bool)>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    let (o, d) = camera.pixel_ray(r, c);
                    match scene.trace(&o, &d) {
                        Some(t) => {
                            let p = o + t * d;
                            let n = scene.gradient(&p, NORMAL_STEP).normalize();
                            let rgb = shade(scene.color_at(&p), &n);
                            (rgb, t, [n.x, n.y, n.z], true)
                        }
                        None => ([1.0; 3], f64::INFINITY, [0.0; 3], false),
                    }
                })
                .collect()
        })
        .collect();
    let px: Vec<_> = rows.into_iter().flatten().collect();
    GtView {
        rgb: Grid::from_vec(h, w, px.iter().map(|p| p.0).collect()).expect("size"),
        depth: Grid::from_vec(h, w, px.iter().map(|p| p.1).collect()).expect("size"),
        normal: Grid::from_vec(h, w, px.iter().map(|p| p.2).collect()).expect("size"),
        silhouette: Grid::from_vec(h, w, px.iter().map(|p| p.3).collect()).expect("size"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub kinds: Vec<PrimitiveKind>,
    pub size_min: f64,
    pub size_max: f64,
    /// Primitive centers are drawn inside this radius.
    pub spread: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_min: 1,
            n_max: 3,
            kinds: vec![
                PrimitiveKind::Sphere,
                PrimitiveKind::Box,
                PrimitiveKind::Torus,
                PrimitiveKind::Capsule,
            ],
            size_min: 0.15,
            size_max: 0.4,
            spread: 0.35,
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)]
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ) + Vec3::new(0.0, 1e-3, 0.0));
    nalgebra::Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::TAU)).into_inner()
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, kind: PrimitiveKind, lo: f64, hi: f64) -> Shape {
    let mut s = || if lo == hi { lo } else { rng.gen_range(lo..hi) };
    match kind {
        PrimitiveKind::Sphere => Shape::Sphere { radius: s() },
        PrimitiveKind::Box => Shape::Box {
            half: Vec3::new(s(), s(), s()) * 0.75,
        },
        PrimitiveKind::Torus => {
            let major = s();
            Shape::Torus {
                major,
                minor: major * 0.35,
            }
        }
        PrimitiveKind::Capsule => {
            let r = s() * 0.5;
            Shape::Capsule {
                half_height: s() * 0.6,
                radius: r,
            }
        }
    }
}

pub fn generate_random_scene<R: Rng + ?Sized>(rng: &mut R, spec: &SceneSpec) -> Result<SceneSdf> {
    if spec.kinds.is_empty() {
        return Err(Error::invalid("scene spec has no primitive kinds"));
    }
    if spec.n_min == 0 || spec.n_min > spec.n_max {
        return Err(Error::invalid(format!("primitive count range [{}, {}]", spec.n_min, spec.n_max)));
    }
    if !(spec.size_min > 0.0) || spec.size_min > spec.size_max || spec.spread < 0.0 {
        return Err(Error::invalid(format!("size range [{}, {}]", spec.size_min, spec.size_max)));
    }
    let n = rng.gen_range(spec.n_min..=spec.n_max);
    let mut prims = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = *spec.kinds.choose(rng).expect("nonempty");
        let shape = random_shape(rng, kind, spec.size_min, spec.size_max);
        let center = loop {
            let c = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if c.norm() <= 1.0 {
                break c * spec.spread;
            }
        };
        let rotation = random_rotation(rng);
        prims.push(Primitive::new(shape, rotation, center, random_color(rng))?);
    }
    Ok(SceneSdf::new(prims)?.rescaled_to_fit())
}

/// Body-plus-attachment family used for inpainting and editing experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub body_radius: (f64, f64),
    pub attachment_kinds: Vec<PrimitiveKind>,
    pub attachment_size: (f64, f64),
    pub lateral_offset: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            body_radius: (0.36, 0.46),
            attachment_kinds: vec![PrimitiveKind::Sphere, PrimitiveKind::Box, PrimitiveKind::Capsule],
            attachment_size: (0.14, 0.2),
            lateral_offset: 0.12,
        }
    }
}

impl FamilyConfig {
    /// World-space box enclosing every attachment this family can produce.
    pub fn edit_region(&self) -> BoxOccluder {
        let s = self.attachment_size.1;
        let lat = self.lateral_offset + s + 0.03;
        let y_lo = self.body_radius.0 - 0.4 * s - 0.03;
        let y_hi = self.body_radius.1 + 1.6 * s + 0.03;
        BoxOccluder::axis_aligned(
            Vec3::new(0.0, 0.5 * (y_lo + y_hi), 0.0),
            Vec3::new(lat, 0.5 * (y_hi - y_lo), lat),
        )
        .expect("positive extents")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPartScene {
    pub body: Primitive,
    pub attachment: Primitive,
}

impl TwoPartScene {
    pub fn scene(&self) -> SceneSdf {
        SceneSdf {
            primitives: vec![self.body.clone(), self.attachment.clone()],
        }
    }

    pub fn with_attachment(&self, attachment: Primitive) -> TwoPartScene {
        TwoPartScene {
            body: self.body.clone(),
            attachment,
        }
    }
}

pub fn sample_attachment<R: Rng + ?Sized>(rng: &mut R, cfg: &FamilyConfig, body_radius: f64) -> Result<Primitive> {
    let kind = *cfg
        .attachment_kinds
        .choose(rng)
        .ok_or_else(|| Error::invalid("family has no attachment kinds"))?;
    let (lo, hi) = cfg.attachment_size;
    let s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let shape = match kind {
        PrimitiveKind::Sphere => Shape::Sphere { radius: s },
        PrimitiveKind::Box => Shape::Box {
            half: Vec3::new(s * 0.8, s, s * 0.8),
        },
        PrimitiveKind::Torus => Shape::Torus {
            major: s * 0.7,
            minor: s * 0.3,
        },
        PrimitiveKind::Capsule => Shape::Capsule {
            half_height: s * 0.6,
            radius: s * 0.45,
        },
    };
    let l = cfg.lateral_offset;
    let (dx, dz) = if l > 0.0 {
        (rng.gen_range(-l..l), rng.gen_range(-l..l))
    } else {
        (0.0, 0.0)
    };
    let center = Vec3::new(dx, body_radius + 0.6 * s, dz);
    Primitive::new(shape, Mat3::identity(), center, random_color(rng))
}

pub fn sample_two_part<R: Rng + ?Sized>(rng: &mut R, cfg: &FamilyConfig) -> Result<TwoPartScene> {
    let (lo, hi) = cfg.body_radius;
    if !(lo > 0.0) || lo > hi {
        return Err(Error::invalid("body radius range invalid"));
    }
    let r = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let body = Primitive::sphere(Vec3::zeros(), r, random_color(rng))?;
    let attachment = sample_attachment(rng, cfg, r)?;
    let s = TwoPartScene { body, attachment };
    if s.scene().bounding_radius() > SCENE_RADIUS {
        return Err(Error::invalid("family parameters exceed the scene radius"));
    }
    Ok(s)
}
