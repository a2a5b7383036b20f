//! Per-view patch masks derived from a 3D box occluder.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::geometry::{ray_box_depth, BoxOccluder, Camera};
use crate::grid::Grid;
use crate::scene::SceneSdf;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub flags: Vec<bool>,
}

impl PatchMask {
    pub fn empty(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        check_divisible(height, width, patch_size)?;
        let (rows, cols) = (height / patch_size, width / patch_size);
        Ok(PatchMask {
            rows,
            cols,
            patch_size,
            flags: vec![false; rows * cols],
        })
    }

    pub fn full(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        let mut m = Self::empty(height, width, patch_size)?;
        m.flags.iter_mut().for_each(|f| *f = true);
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.cols + col]
    }

    /// Flag of the patch containing pixel (row, col).
    pub fn at_pixel(&self, row: usize, col: usize) -> bool {
        self.get(row / self.patch_size, col / self.patch_size)
    }

    pub fn union(&self, other: &PatchMask) -> Result<PatchMask> {
        if (self.rows, self.cols, self.patch_size) != (other.rows, other.cols, other.patch_size) {
            return Err(Error::shape("mask union", &[self.rows, self.cols], &[other.rows, other.cols]));
        }
        Ok(PatchMask {
            flags: self.flags.iter().zip(&other.flags).map(|(a, b)| *a || *b).collect(),
            ..self.clone()
        })
    }

    /// Expand to per-pixel booleans.
    pub fn to_pixels(&self) -> Grid<bool> {
        let (h, w) = (self.rows * self.patch_size, self.cols * self.patch_size);
        let data = (0..h * w).map(|i| self.at_pixel(i / w, i % w)).collect();
        Grid { height: h, width: w, data }
    }

    /// One line of '0'/'1' in row-major patch order.
    pub fn to_line(&self) -> String {
        self.flags.iter().map(|&f| if f { '1' } else { '0' }).collect()
    }

    pub fn from_line(line: &str, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        let mut m = Self::empty(height, width, patch_size)?;
        let line = line.trim();
        if line.chars().count() != m.len() {
            return Err(Error::Parse(format!(
                "mask line has {} entries, expected {}",
                line.chars().count(),
                m.len()
            )));
        }
        for (f, ch) in m.flags.iter_mut().zip(line.chars()) {
            *f = match ch {
                '0' => false,
                '1' => true,
                other => return Err(Error::Parse(format!("mask character '{other}'"))),
            };
        }
        Ok(m)
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::invalid(format!("patch size {patch} does not divide {height}x{width}")));
    }
    Ok(())
}

/// Mask file: one line per view.
pub fn format_masks(masks: &[PatchMask]) -> String {
    masks.iter().map(|m| m.to_line() + "\n").collect()
}

pub fn parse_masks(text: &str, height: usize, width: usize, patch_size: usize) -> Result<Vec<PatchMask>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| PatchMask::from_line(l, height, width, patch_size))
        .collect()
}

pub fn occluded_pixels(shape_depth: &Grid<f64>, occluder_depth: &Grid<f64>) -> Result<Grid<bool>> {
    if !shape_depth.same_size(occluder_depth) {
        return Err(Error::shape(
            "occluded_pixels",
            &[shape_depth.height, shape_depth.width],
            &[occluder_depth.height, occluder_depth.width],
        ));
    }
    Ok(Grid {
        height: shape_depth.height,
        width: shape_depth.width,
        data: shape_depth
            .data
            .iter()
            .zip(&occluder_depth.data)
            .map(|(&s, &o)| o.is_finite() && o < s)
            .collect(),
    })
}

pub fn pixels_to_patch_mask(occluded: &Grid<bool>, patch_size: usize) -> Result<PatchMask> {
    let mut m = PatchMask::empty(occluded.height, occluded.width, patch_size)?;
    for r in 0..occluded.height {
        for c in 0..occluded.width {
            if *occluded.get(r, c) {
                m.flags[(r / patch_size) * m.cols + c / patch_size] = true;
            }
        }
    }
    Ok(m)
}

/// Per-pixel distance to the occluder (0 when the camera sits inside it, +inf on miss).
pub fn occluder_depth(occluder: &BoxOccluder, camera: &Camera) -> Grid<f64> {
    let inside = occluder.contains(&camera.origin());
    let (h, w) = (camera.height, camera.width);
    let data = (0..h * w)
        .map(|i| {
            if inside {
                return 0.0;
            }
            let (o, d) = camera.pixel_ray(i / w, i % w);
            ray_box_depth(&o, &d, occluder).unwrap_or(f64::INFINITY)
        })
        .collect();
    Grid { height: h, width: w, data }
}

/// Shape depth by sphere tracing (+inf on miss).
pub fn shape_depth(scene: &SceneSdf, camera: &Camera) -> Grid<f64> {
    let (h, w) = (camera.height, camera.width);
    let data = (0..h * w)
        .map(|i| {
            let (o, d) = camera.pixel_ray(i / w, i % w);
            scene.trace(&o, &d).unwrap_or(f64::INFINITY)
        })
        .collect();
    Grid { height: h, width: w, data }
}

pub fn view_mask_from_depth(
    depth: &Grid<f64>,
    occluder: &BoxOccluder,
    camera: &Camera,
    patch_size: usize,
) -> Result<PatchMask> {
    let occ = occluded_pixels(depth, &occluder_depth(occluder, camera))?;
    pixels_to_patch_mask(&occ, patch_size)
}

/// Masks for the given (non-conditional) cameras.
pub fn build_view_masks(
    scene: &SceneSdf,
    occluder: &BoxOccluder,
    cameras: &[Camera],
    patch_size: usize,
) -> Result<Vec<PatchMask>> {
    cameras
        .par_iter()
        .map(|cam| view_mask_from_depth(&shape_depth(scene, cam), occluder, cam, patch_size))
        .collect()
}

/// Same as [`build_view_masks`] with precomputed shape depths.
pub fn build_view_masks_from_depths(
    depths: &[&Grid<f64>],
    occluder: &BoxOccluder,
    cameras: &[Camera],
    patch_size: usize,
) -> Result<Vec<PatchMask>> {
    if depths.len() != cameras.len() {
        return Err(Error::shape("build_view_masks", &[depths.len()], &[cameras.len()]));
    }
    depths
        .iter()
        .zip(cameras)
        .map(|(d, cam)| view_mask_from_depth(d, occluder, cam, patch_size))
        .collect()
}

/// Fraction of shape pixels (finite depth) that are occluded.
pub fn occluded_shape_fraction(depth: &Grid<f64>, occluded: &Grid<bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for (d, &o) in depth.data.iter().zip(&occluded.data) {
        if d.is_finite() {
            n += 1;
            k += o as usize;
        }
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Exactly `floor(ratio * rows * cols)` patches, drawn without replacement.
pub fn uniform_random_mask<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    patch_size: usize,
    ratio: f64,
) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = rows * cols;
    let k = (ratio * n as f64).floor() as usize;
    let mut m = PatchMask {
        rows,
        cols,
        patch_size,
        flags: vec![false; n],
    };
    for i in sample(rng, n, k) {
        m.flags[i] = true;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_box_occluder, sample_orbit_cameras, Aabb, OccluderConfig, Vec3};
    use crate::scene::Primitive;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_spheres() -> SceneSdf {
        SceneSdf::new(vec![
            Primitive::sphere(Vec3::new(0.25, 0.0, 0.0), 0.3, [0.8, 0.1, 0.1]).unwrap(),
            Primitive::sphere(Vec3::new(-0.3, 0.1, 0.1), 0.25, [0.1, 0.8, 0.1]).unwrap(),
        ])
        .unwrap()
    }

    fn grid(h: usize, w: usize, v: Vec<f64>) -> Grid<f64> {
        Grid::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn occluder_behind_shape_is_not_occluding() {
        let shape = grid(2, 2, vec![1.0; 4]);
        let occ = grid(2, 2, vec![2.0, 1.5, 1.0, f64::INFINITY]);
        assert!(occluded_pixels(&shape, &occ).unwrap().data.iter().all(|&b| !b));
    }

    #[test]
    fn occluder_over_background_counts() {
        let shape = grid(1, 2, vec![f64::INFINITY, 1.0]);
        let occ = grid(1, 2, vec![3.0, f64::INFINITY]);
        assert_eq!(occluded_pixels(&shape, &occ).unwrap().data, vec![true, false]);
        assert!(occluded_pixels(&shape, &grid(2, 1, vec![0.0; 2])).is_err());
    }

    #[test]
    fn pooling_cases() {
        let g = Grid::filled(8, 8, false);
        assert_eq!(pixels_to_patch_mask(&g, 4).unwrap().count(), 0);
        let mut g1 = g.clone();
        g1.set(5, 2, true);
        let m = pixels_to_patch_mask(&g1, 4).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 0));
        assert!(pixels_to_patch_mask(&g, 3).is_err());
    }

    #[test]
    fn pooling_matches_naive_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Grid::from_vec(12, 8, (0..96).map(|_| rng.gen_bool(0.05)).collect()).unwrap();
        let m = pixels_to_patch_mask(&g, 4).unwrap();
        for pr in 0..3 {
            for pc in 0..2 {
                let mut any = false;
                for r in 0..4 {
                    for c in 0..4 {
                        any |= *g.get(pr * 4 + r, pc * 4 + c);
                    }
                }
                assert_eq!(m.get(pr, pc), any);
            }
        }
    }

    #[test]
    fn random_box_matches_brute_force_oracle() {
        let scene = two_spheres();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let occ = sample_box_occluder(&mut rng, &scene.bounding_box(), &OccluderConfig::default()).unwrap();
        let cams = sample_orbit_cameras(&mut rng, 3, 2.2, 1.0, 0.8, 16).unwrap();
        let masks = build_view_masks(&scene, &occ, &cams, 4).unwrap();
        for (cam, mask) in cams.iter().zip(&masks) {
            // independent oracle: slab test against each face plane in world space
            let mut pix = Grid::filled(16, 16, false);
            for r in 0..16 {
                for c in 0..16 {
                    let (o, d) = cam.pixel_ray(r, c);
                    let od = face_plane_depth(&o, &d, &occ);
                    let sd = scene.trace(&o, &d).unwrap_or(f64::INFINITY);
                    pix.set(r, c, od.is_some_and(|t| t < sd));
                }
            }
            assert_eq!(*mask, pixels_to_patch_mask(&pix, 4).unwrap());
        }
    }

    fn face_plane_depth(o: &Vec3, d: &Vec3, b: &BoxOccluder) -> Option<f64> {
        let mut best: Option<f64> = None;
        for axis in 0..3 {
            let n = b.rotation.column(axis).into_owned();
            for sign in [-1.0, 1.0] {
                let p0 = b.center + n * sign * b.half_extents[axis];
                let denom = n.dot(d);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let t = n.dot(&(p0 - o)) / denom;
                if t < 0.0 {
                    continue;
                }
                let hit = o + d * t;
                let local = b.rotation.transpose() * (hit - b.center);
                let inside = (0..3).all(|k| k == axis || local[k].abs() <= b.half_extents[k] + 1e-12);
                if inside && best.is_none_or(|bt| t < bt) {
                    best = Some(t);
                }
            }
        }
        best
    }

    #[test]
    fn far_away_occluder_gives_empty_masks() {
        let scene = two_spheres();
        let occ = BoxOccluder::axis_aligned(Vec3::new(0.0, 50.0, 0.0), Vec3::repeat(0.1)).unwrap();
        let cams = sample_orbit_cameras(&mut ChaCha8Rng::seed_from_u64(0), 3, 2.2, 0.3, 0.8, 16).unwrap();
        for m in build_view_masks(&scene, &occ, &cams, 4).unwrap() {
            assert_eq!(m.count(), 0);
        }
    }

    #[test]
    fn enclosing_occluder_masks_silhouette() {
        let scene = two_spheres();
        let occ = BoxOccluder::axis_aligned(Vec3::zeros(), Vec3::repeat(0.9)).unwrap();
        let cams = sample_orbit_cameras(&mut ChaCha8Rng::seed_from_u64(1), 3, 2.2, 1.0, 0.8, 16).unwrap();
        let masks = build_view_masks(&scene, &occ, &cams, 4).unwrap();
        for (cam, m) in cams.iter().zip(&masks) {
            let depth = shape_depth(&scene, cam);
            for r in 0..16 {
                for c in 0..16 {
                    if depth.get(r, c).is_finite() {
                        assert!(m.at_pixel(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn interior_points_project_into_flagged_patches() {
        let scene = two_spheres();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let occ = sample_box_occluder(&mut rng, &scene.bounding_box(), &OccluderConfig::default()).unwrap();
            let cams = sample_orbit_cameras(&mut rng, 2, 2.2, 1.0, 0.8, 32).unwrap();
            let masks = build_view_masks(&scene, &occ, &cams, 8).unwrap();
            for (cam, m) in cams.iter().zip(&masks) {
                let depth = shape_depth(&scene, cam);
                for _ in 0..300 {
                    let (r, c) = (rng.gen_range(0..32), rng.gen_range(0..32));
                    let (o, d) = cam.pixel_ray(r, c);
                    let rt = occ.rotation.transpose();
                    let Some((t0, t1)) = crate::geometry::ray_aabb(
                        &(rt * (o - occ.center)),
                        &(rt * d),
                        &(-occ.half_extents),
                        &occ.half_extents,
                    ) else {
                        continue;
                    };
                    let t = rng.gen_range(t0.max(0.0)..t1.max(1e-9));
                    let p = o + d * t;
                    if occ.contains(&p) && t < *depth.get(r, c) {
                        assert!(m.at_pixel(r, c), "interior point {p:?} not flagged");
                    }
                }
            }
        }
    }

    #[test]
    fn growing_occluder_never_unflags() {
        let scene = two_spheres();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let occ = sample_box_occluder(&mut rng, &scene.bounding_box(), &OccluderConfig::default()).unwrap();
        let cams = sample_orbit_cameras(&mut rng, 3, 2.2, 1.0, 0.8, 16).unwrap();
        let small = build_view_masks(&scene, &occ, &cams, 4).unwrap();
        let big = build_view_masks(&scene, &occ.inflated(0.1), &cams, 4).unwrap();
        for (s, b) in small.iter().zip(&big) {
            assert!(s.flags.iter().zip(&b.flags).all(|(s, b)| !s || *b));
        }
    }

    #[test]
    fn uniform_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(uniform_random_mask(&mut rng, 8, 8, 4, 0.0).unwrap().count(), 0);
        assert_eq!(uniform_random_mask(&mut rng, 8, 8, 4, 1.0).unwrap().count(), 64);
        assert_eq!(uniform_random_mask(&mut rng, 8, 8, 4, 0.25).unwrap().count(), 16);
        assert!(uniform_random_mask(&mut rng, 8, 8, 4, 1.5).is_err());
    }

    #[test]
    fn mask_line_roundtrip() {
        let m = uniform_random_mask(&mut ChaCha8Rng::seed_from_u64(2), 4, 4, 8, 0.5).unwrap();
        let text = format_masks(&[m.clone(), m.clone()]);
        let back = parse_masks(&text, 32, 32, 8).unwrap();
        assert_eq!(back, vec![m.clone(), m]);
        assert!(PatchMask::from_line("012", 8, 8, 4).is_err());
    }

    #[test]
    fn occlusion_fraction() {
        let depth = grid(1, 4, vec![1.0, 1.0, f64::INFINITY, 1.0]);
        let occ = Grid::from_vec(1, 4, vec![true, false, true, false]).unwrap();
        assert!((occluded_shape_fraction(&depth, &occ) - 1.0 / 3.0).abs() < 1e-15);
        let _ = Aabb::cube(1.0);
    }
}
