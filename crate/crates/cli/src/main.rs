use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mlrm::dataset::{load_scene, read_rgb_png, write_gray_png, write_rgb_png, Dataset, DatasetConfig};
use mlrm::diagnostics::{all_checks, format_results, op_checks};
use mlrm::edit::{composite_donor, edit, reconstruct, EditRequest, PosedView, Reconstruction};
use mlrm::eval::{eval_run, posed_at, EvalConfig};
use mlrm::extraction::export_obj;
use mlrm::geometry::BoxOccluder;
use mlrm::masking::PatchMask;
use mlrm::model::{CondMode, MaskedLrm};
use mlrm::training::{init_model, train_stage, RunConfig};
use mlrm::{Error, Result};

type Model = MaskedLrm<f32>;

#[derive(Parser)]
#[command(name = "mlrm", about = "Masked triplane reconstruction and 3D editing")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// RNG seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config for the subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic datasets
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train stage 1 or 2 from a run config
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct a scene folder and write renders and a mesh
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        views: PathBuf,
        #[arg(long, default_value_t = 0)]
        cond: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a boxed region from an edited conditional image
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        views: PathBuf,
        #[arg(long, default_value_t = 0)]
        cond: usize,
        /// Edited conditional image (PNG)
        #[arg(long)]
        image: PathBuf,
        /// World-frame box cx,cy,cz,hx,hy,hz
        #[arg(long, value_name = "BOX")]
        r#box: Option<String>,
        /// Per-view patch masks, one line of 0/1 per view, overriding --box
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract a mesh
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        views: PathBuf,
        #[arg(long, default_value_t = 0)]
        cond: usize,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Novel-view metrics on held-out poses
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for report.txt and report.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        /// Include the end-to-end pipeline check
        #[arg(long)]
        all: bool,
    },
    /// Paste a donor scene's attachment into a view, to make edit inputs
    Composite {
        #[arg(long)]
        views: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long, default_value_t = 0)]
        cond: usize,
        #[arg(long, value_name = "BOX")]
        r#box: String,
        #[arg(long)]
        res: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Gen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by the reconstruct/edit/extract subcommands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RenderConfig {
    samples_per_ray: usize,
    mesh_res: usize,
    mesh_colors: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            mesh_res: 64,
            mesh_colors: true,
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) if !p.is_file() => Err(Error::NotFound {
            what: "config",
            path: p.to_path_buf(),
        }),
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Parse(format!("{}: {e}", p.display()))),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(Model::load(path)?.0)
}

/// Views of a scene folder at the model's resolution.
fn views_for(model: &Model, dir: &Path) -> Result<Vec<PosedView>> {
    let mut data = load_scene(dir)?;
    let res = model.config.image_res;
    data.prepare_resolution(res);
    posed_at(&data, &(0..data.views.len()).collect::<Vec<_>>(), res)
}

fn write_outputs(model: &Model, rec: &Reconstruction<f32>, views: &[PosedView], rc: &RenderConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for (k, v) in views.iter().enumerate() {
        let img = rec.render(model, &v.camera, rc.samples_per_ray)?;
        write_rgb_png(&out.join(format!("render_{k}.png")), &img.rgb)?;
        write_gray_png(&out.join(format!("opacity_{k}.png")), &img.opacity)?;
        let n = img.normal.map(|p| [0.5 * (p[0] + 1.0), 0.5 * (p[1] + 1.0), 0.5 * (p[2] + 1.0)]);
        write_rgb_png(&out.join(format!("normal_{k}.png")), &n)?;
    }
    export_obj(&rec.mesh(model, rc.mesh_res, rc.mesh_colors)?, &out.join("mesh.obj"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg_path = cli.common.config.as_deref();
    match cli.cmd {
        Cmd::Dataset { cmd: DatasetCmd::Gen { n, out } } => {
            let mut cfg: DatasetConfig = read_toml(cfg_path)?;
            if let Some(n) = n {
                cfg.n_scenes = n;
            }
            let ds = Dataset::generate(&cfg, cli.common.seed.unwrap_or(0))?;
            ds.save(&out)?;
            println!("wrote {} scenes to {}", ds.len(), out.display());
        }
        Cmd::Train { stage, resume } => {
            let path = cfg_path.ok_or_else(|| Error::InvalidArgument("train requires --config".into()))?;
            let mut rc = RunConfig::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let rel = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
            rc.train.stage = stage;
            if let Some(s) = cli.common.seed {
                rc.train.seed = s;
            }
            rc.train.resume = resume.or(rc.train.resume.map(|p| rel(&p)));
            rc.train.init_from = rc.train.init_from.map(|p| rel(&p));
            rc.train.out_dir = Some(rel(&rc.train.out_dir.clone().unwrap_or_else(|| PathBuf::from(format!("runs/stage{stage}")))));
            let mut ds = Dataset::load(&rel(&rc.dataset))?;
            let (model, opt) = init_model::<f32>(&rc.train, &rc.model)?;
            let outcome = train_stage(&rc.train, model, opt, &mut ds)?;
            if let Some(last) = outcome.history.last() {
                println!("final loss {:.6}", last.total);
            }
            if let Some(p) = outcome.last_checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Cmd::Reconstruct { ckpt, views, cond, out } => {
            let rc: RenderConfig = read_toml(cfg_path)?;
            let model = load_model(&ckpt)?;
            let views = views_for(&model, &views)?;
            let masks = views
                .iter()
                .map(|v| PatchMask::empty(v.rgb.height, v.rgb.width, model.config.patch_size))
                .collect::<Result<Vec<_>>>()?;
            let rec = reconstruct(&model, &views, cond, &masks, None, CondMode::Clean)?;
            write_outputs(&model, &rec, &views, &rc, &out)?;
        }
        Cmd::Edit { ckpt, views, cond, image, r#box, masks, out } => {
            let rc: RenderConfig = read_toml(cfg_path)?;
            let model = load_model(&ckpt)?;
            let views = views_for(&model, &views)?;
            let edited = read_rgb_png(&image)?;
            let rec = match masks {
                Some(mp) => {
                    let p = model.config.patch_size;
                    let (h, w) = (edited.height, edited.width);
                    let m = mlrm::masking::parse_masks(&std::fs::read_to_string(&mp)?, h, w, p)?;
                    if m.len() != views.len() {
                        return Err(Error::InvalidArgument(format!("{} masks for {} views", m.len(), views.len())));
                    }
                    reconstruct(&model, &views, cond, &m, Some(&edited), CondMode::Clean)?
                }
                None => {
                    let edit_box = r#box.as_deref().map(BoxOccluder::parse).transpose()?;
                    let req = EditRequest {
                        views: views.clone(),
                        cond_view: cond,
                        edited_cond: edited,
                        edit_box,
                    };
                    let res = edit(&model, &req)?;
                    std::fs::create_dir_all(&out)?;
                    std::fs::write(out.join("masks.txt"), mlrm::masking::format_masks(&res.masks))?;
                    res.reconstruction
                }
            };
            write_outputs(&model, &rec, &views, &rc, &out)?;
        }
        Cmd::Extract { ckpt, views, cond, res, out } => {
            let rc: RenderConfig = read_toml(cfg_path)?;
            let model = load_model(&ckpt)?;
            let views = views_for(&model, &views)?;
            let masks = views
                .iter()
                .map(|v| PatchMask::empty(v.rgb.height, v.rgb.width, model.config.patch_size))
                .collect::<Result<Vec<_>>>()?;
            let rec = reconstruct(&model, &views, cond, &masks, None, CondMode::Clean)?;
            let mesh = rec.mesh(&model, res.unwrap_or(rc.mesh_res), rc.mesh_colors)?;
            export_obj(&mesh, &out)?;
            println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
        }
        Cmd::Eval { ckpt, dataset, out } => {
            let mut cfg: EvalConfig = read_toml(cfg_path)?;
            if let Some(s) = cli.common.seed {
                cfg.seed = s;
            }
            let model = load_model(&ckpt)?;
            let mut ds = Dataset::load(&dataset)?;
            let report = eval_run(&model, &mut ds, &cfg)?;
            print!("{}", report.table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.txt"), report.table())?;
                std::fs::write(dir.join("report.csv"), report.csv())?;
            }
        }
        Cmd::Gradcheck { all } => {
            let results = if all { all_checks(cli.common.seed.unwrap_or(0))? } else { op_checks()? };
            print!("{}", format_results(&results));
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} gradient checks above tolerance")));
            }
        }
        Cmd::Composite { views, donor, cond, r#box, res, out } => {
            let mut src = load_scene(&views)?;
            let donor = load_scene(&donor)?;
            let parts = src.parts.clone().ok_or_else(|| Error::InvalidArgument("source scene is not two-part".into()))?;
            let donor_parts = donor.parts.ok_or_else(|| Error::InvalidArgument("donor scene is not two-part".into()))?;
            let res = res.unwrap_or(src.resolution());
            src.prepare_resolution(res);
            let cam = src
                .cameras
                .get(cond)
                .ok_or(Error::IndexOutOfRange {
                    index: cond,
                    len: src.cameras.len(),
                })?
                .with_resolution(res, res);
            let region = BoxOccluder::parse(&r#box)?;
            let img = composite_donor(&src.view_at(cond, res)?.rgb, &parts, &donor_parts.attachment, &cam, &region)?;
            write_rgb_png(&out, &img)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotFound { what: "checkpoint", .. } => 2,
        _ => 1,
    }
}

fn reason(e: &Error) -> String {
    match e {
        Error::NotFound { what: "checkpoint", path } => format!("checkpoint not found: {}", path.display()),
        e => e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", reason(&e).replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
