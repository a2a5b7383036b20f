//! Synthetic multi-view datasets and their on-disk layout.
//!
//! Each scene folder holds `scene.txt`, `cams.txt` and per view `rgb_k.png`,
//! `depth_k.f32`, `normal_k.f32` (little-endian `f32`, row-major) and `sil_k.png`.
//! The first `n_views` cameras are training poses; the following `n_heldout` are
//! reserved for evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{format_cameras, parse_cameras, sample_orbit_cameras, Camera, CANONICAL_DISTANCE};
use crate::grid::Grid;
use crate::scene::{
    generate_random_scene, render_ground_truth, sample_two_part, FamilyConfig, GtView, SceneSdf, SceneSpec, TwoPartScene,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SceneSource {
    Random(SceneSpec),
    TwoPart(FamilyConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub n_views: usize,
    pub n_heldout: usize,
    pub resolution: usize,
    pub radius: f64,
    /// Maximum camera elevation in degrees.
    pub max_elevation_deg: f64,
    pub fov_deg: f64,
    pub source: SceneSource,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_scenes: 4,
            n_views: 12,
            n_heldout: 10,
            resolution: 64,
            radius: CANONICAL_DISTANCE,
            max_elevation_deg: 60.0,
            fov_deg: 50.0,
            source: SceneSource::Random(SceneSpec::default()),
        }
    }
}

impl DatasetConfig {
    pub fn total_views(&self) -> usize {
        self.n_views + self.n_heldout
    }

    pub fn cameras<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Camera>> {
        sample_orbit_cameras(
            rng,
            self.total_views(),
            self.radius,
            self.max_elevation_deg.to_radians(),
            self.fov_deg.to_radians(),
            self.resolution,
        )
    }
}

/// Round to what the on-disk encoding stores, so in-memory and reloaded data agree exactly.
fn quantize(view: GtView) -> GtView {
    let q8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    let q32 = |v: f64| v as f32 as f64;
    GtView {
        rgb: view.rgb.map(|p| [q8(p[0]), q8(p[1]), q8(p[2])]),
        depth: view.depth.map(|&d| q32(d)),
        normal: view.normal.map(|p| [q32(p[0]), q32(p[1]), q32(p[2])]),
        silhouette: view.silhouette,
    }
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub scene: SceneSdf,
    /// Present for the two-part family.
    pub parts: Option<TwoPartScene>,
    pub cameras: Vec<Camera>,
    pub views: Vec<GtView>,
    /// Views re-rendered at other resolutions.
    extra: BTreeMap<usize, Vec<GtView>>,
}

impl SceneData {
    pub fn render(scene: SceneSdf, parts: Option<TwoPartScene>, cameras: Vec<Camera>) -> Self {
        let views = cameras.iter().map(|c| quantize(render_ground_truth(&scene, c))).collect();
        SceneData {
            scene,
            parts,
            cameras,
            views,
            extra: BTreeMap::new(),
        }
    }

    pub fn resolution(&self) -> usize {
        self.cameras[0].height
    }

    /// Render every view at `res` (no-op when already available).
    pub fn prepare_resolution(&mut self, res: usize) {
        if res == self.resolution() || self.extra.contains_key(&res) {
            return;
        }
        let views = self
            .cameras
            .iter()
            .map(|c| quantize(render_ground_truth(&self.scene, &c.with_resolution(res, res))))
            .collect();
        self.extra.insert(res, views);
    }

    /// Ground truth of view `k` at `res`; requires [`SceneData::prepare_resolution`].
    pub fn view_at(&self, k: usize, res: usize) -> Result<&GtView> {
        let views = if res == self.resolution() {
            &self.views
        } else {
            self.extra
                .get(&res)
                .ok_or_else(|| Error::invalid(format!("resolution {res} not prepared")))?
        };
        views.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: views.len(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneData>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig, seed: u64) -> Result<Self> {
        if config.n_scenes == 0 || config.n_views == 0 {
            return Err(Error::invalid("dataset needs at least one scene and one view"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scenes = Vec::with_capacity(config.n_scenes);
        for _ in 0..config.n_scenes {
            let (scene, parts) = match &config.source {
                SceneSource::Random(spec) => (generate_random_scene(&mut rng, spec)?, None),
                SceneSource::TwoPart(fam) => {
                    let p = sample_two_part(&mut rng, fam)?;
                    (p.scene(), Some(p))
                }
            };
            let cameras = config.cameras(&mut rng)?;
            scenes.push(SceneData::render(scene, parts, cameras));
        }
        Ok(Dataset {
            config: config.clone(),
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn train_views(&self) -> std::ops::Range<usize> {
        0..self.config.n_views
    }

    pub fn heldout_views(&self) -> std::ops::Range<usize> {
        self.config.n_views..self.config.total_views()
    }

    pub fn prepare_resolution(&mut self, res: usize) {
        for s in &mut self.scenes {
            s.prepare_resolution(res);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("dataset.toml"), cfg)?;
        for (i, s) in self.scenes.iter().enumerate() {
            save_scene(&scene_dir(dir, i), s)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("dataset.toml");
        if !cfg_path.exists() {
            return Err(Error::NotFound {
                what: "dataset",
                path: cfg_path,
            });
        }
        let config: DatasetConfig =
            toml::from_str(&fs::read_to_string(&cfg_path)?).map_err(|e| Error::Parse(e.to_string()))?;
        let mut scenes = Vec::with_capacity(config.n_scenes);
        for i in 0..config.n_scenes {
            scenes.push(load_scene(&scene_dir(dir, i))?);
        }
        Ok(Dataset { config, scenes })
    }
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:04}"))
}

pub fn save_scene(dir: &Path, s: &SceneData) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scene.txt"), s.scene.to_text())?;
    fs::write(dir.join("cams.txt"), format_cameras(&s.cameras))?;
    for (k, v) in s.views.iter().enumerate() {
        save_view(dir, k, v)?;
    }
    Ok(())
}

pub fn save_view(dir: &Path, k: usize, v: &GtView) -> Result<()> {
    write_rgb_png(&dir.join(format!("rgb_{k}.png")), &v.rgb)?;
    write_f32(&dir.join(format!("depth_{k}.f32")), v.depth.data.iter().copied())?;
    write_f32(&dir.join(format!("normal_{k}.f32")), v.normal.data.iter().flat_map(|p| p.iter().copied()))?;
    let sil = image::GrayImage::from_fn(v.width() as u32, v.height() as u32, |x, y| {
        image::Luma([if *v.silhouette.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    sil.save(dir.join(format!("sil_{k}.png")))?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::NotFound { what: "scene file", path: p });
        }
        Ok(fs::read_to_string(p)?)
    };
    let scene = SceneSdf::from_text(&read("scene.txt")?)?;
    let cameras = parse_cameras(&read("cams.txt")?)?;
    let mut views = Vec::with_capacity(cameras.len());
    for (k, cam) in cameras.iter().enumerate() {
        views.push(load_view(dir, k, cam.height, cam.width)?);
    }
    let parts = (scene.primitives.len() == 2).then(|| TwoPartScene {
        body: scene.primitives[0].clone(),
        attachment: scene.primitives[1].clone(),
    });
    Ok(SceneData {
        scene,
        parts,
        cameras,
        views,
        extra: BTreeMap::new(),
    })
}

pub fn load_view(dir: &Path, k: usize, h: usize, w: usize) -> Result<GtView> {
    let rgb = read_rgb_png(&dir.join(format!("rgb_{k}.png")))?;
    if (rgb.height, rgb.width) != (h, w) {
        return Err(Error::shape("rgb image", &[rgb.height, rgb.width], &[h, w]));
    }
    let depth = read_f32(&dir.join(format!("depth_{k}.f32")))?;
    let normal = read_f32(&dir.join(format!("normal_{k}.f32")))?;
    let sil = image::open(dir.join(format!("sil_{k}.png")))?.to_luma8();
    if depth.len() != h * w || normal.len() != h * w * 3 || sil.width() as usize != w || sil.height() as usize != h {
        return Err(Error::shape("view files", &[h, w], &[depth.len(), normal.len()]));
    }
    Ok(GtView {
        rgb,
        depth: Grid::from_vec(h, w, depth)?,
        normal: crate::grid::unflatten3(h, w, &normal)?,
        silhouette: Grid::from_vec(h, w, sil.pixels().map(|p| p.0[0] > 127).collect())?,
    })
}

pub fn write_rgb_png(path: &Path, rgb: &Grid<[f64; 3]>) -> Result<()> {
    let img = image::RgbImage::from_fn(rgb.width as u32, rgb.height as u32, |x, y| {
        let p = rgb.get(y as usize, x as usize);
        image::Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    });
    img.save(path)?;
    Ok(())
}

pub fn write_gray_png(path: &Path, g: &Grid<f64>) -> Result<()> {
    let img = image::GrayImage::from_fn(g.width as u32, g.height as u32, |x, y| {
        image::Luma([to_u8(*g.get(y as usize, x as usize))])
    });
    img.save(path)?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb_png(path: &Path) -> Result<Grid<[f64; 3]>> {
    if !path.exists() {
        return Err(Error::NotFound {
            what: "image",
            path: path.to_path_buf(),
        });
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(h, w, data)
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!("{} is not a whole number of f32 values", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
