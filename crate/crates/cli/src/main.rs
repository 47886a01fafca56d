use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use avatarfield::autograd::fit::{fit, TrainConfig};
use avatarfield::autograd::gradcheck::{gradcheck, GradcheckConfig};
use avatarfield::body::capsule::BodyDescription;
use avatarfield::body::Pose;
use avatarfield::field::{checkpoint, FieldParams};
use avatarfield::renderer::io::{write_pfm, write_png};
use avatarfield::renderer::{render_frame, RenderedFrame};
use avatarfield::scene::eval::evaluate_views;
use avatarfield::scene::mesh::extract_field_mesh;
use avatarfield::scene::{unseen_pose, Dataset, PoseSpec, Scene, SceneConfig};
use avatarfield::{Camera, Error};
use clap::{Args, Parser, Subcommand};

/// Articulated SDF avatars: synthetic scenes, fitting, rendering and
/// evaluation.
#[derive(Parser)]
#[command(name = "avatarfield", version)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "AVATARFIELD_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the template body as OBJ, its description as TOML and a
    /// turntable preview strip.
    MakeBody {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the body seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the ground-truth avatar from every camera of every pose.
    MakeDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Fit a field to the training views of a dataset.
    Fit {
        #[command(flatten)]
        data: DataArg,
        /// Field and optimizer settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the checkpoint and the loss log.
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a fitted avatar from a rig camera, at any pose.
    Render {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG path; the depth map goes next to it as PFM.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pose: PoseArg,
        /// Rig camera index.
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare renders of a fitted avatar with the held-out views.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// A checkpoint, or omitted to score the dataset against itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: PathBuf,
        /// Evaluate at a different pose, with fresh ground truth from the
        /// dataset's scene.
        #[command(flatten)]
        pose: PoseArg,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reverse-mode gradients against finite differences on a tiny scene.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Zero level set of a fitted avatar at a pose, as OBJ.
    ExportMesh {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pose: PoseArg,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `make-dataset`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PoseArg {
    /// A dataset pose index, `unseen`, or a TOML/JSON pose spec file.
    #[arg(long)]
    pose: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 configuration, 3 I/O, 4 numerical failure, 5 corrupt file, 1 other.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config { .. } | Error::Dimension(_) | Error::InvalidWeights(_) | Error::Empty(_) => 2,
                Error::Io(_) => 3,
                Error::Numerical(_) | Error::SingularBlend { .. } => 4,
                Error::Format(_) => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::MakeBody { config, out, seed } => make_body(config.as_deref(), &out, seed),
        Command::MakeDataset { config, out, seed, resolution } => {
            let mut cfg = scene_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.body.seed = s;
            }
            if let Some(r) = resolution {
                cfg.render.resolution = r;
            }
            let data = cfg.build()?.generate()?;
            data.write(&out)?;
            println!("wrote {} views to {}", data.len(), out.display());
            Ok(())
        }
        Command::Fit { data, config, out, checkpoint: init, steps, seed } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            if let Some(n) = steps {
                cfg.fit.iterations = n;
            }
            if let Some(s) = seed {
                cfg.fit.seed = s;
            }
            let (dataset, scene) = open_dataset(&data.data)?;
            let params = match init {
                Some(p) => checkpoint::load(&p)?,
                None => FieldParams::init(&cfg.field, &scene.body, cfg.fit.seed)?,
            };
            let result = fit(&cfg.fit, &dataset.fit_data(scene.body.clone(), scene.shape.clone()), params)?;
            fs::create_dir_all(&out)?;
            checkpoint::save(&result.params, &out.join("checkpoint.bin"))?;
            fs::write(out.join("loss_log.jsonl"), result.log_lines())?;
            fs::write(out.join("train_config.toml"), toml::to_string(&cfg)?)?;
            if let Some(last) = result.log.last() {
                println!("final loss {:.6e} after {} iterations", last.total, result.log.len());
            }
            Ok(())
        }
        Command::Render { data, checkpoint: ck, out, pose, camera, resolution, steps } => {
            let (dataset, mut scene) = open_dataset(&data.data)?;
            let params = checkpoint::load(&ck)?;
            let pose = resolve_pose(pose.pose.as_deref(), &dataset, &scene)?;
            if resolution.is_some() || steps.is_some() {
                let mut cfg = scene.config.clone();
                cfg.render.resolution = resolution.unwrap_or(cfg.render.resolution);
                cfg.render.n_steps = steps.unwrap_or(cfg.render.n_steps);
                scene = cfg.build()?;
            }
            let cam = rig_camera(&scene, camera)?;
            let frame = render_frame(&params, &scene.posed(&pose)?, &cam, &scene.config.render.settings())?;
            check_finite(&frame)?;
            write_png(&out, &frame)?;
            write_pfm(&out.with_extension("pfm"), frame.width, frame.height, &frame.depth)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval { data, checkpoint: ck, out, pose, steps } => {
            let (dataset, mut scene) = open_dataset(&data.data)?;
            if let Some(n) = steps {
                scene.config.render.n_steps = n;
            }
            let params = ck.as_deref().map(checkpoint::load).transpose()?;
            // A pose given explicitly gets fresh ground truth over the
            // held-out cameras.
            let reference = match pose.pose.as_deref() {
                Some(spec) => {
                    let p = resolve_pose(Some(spec), &dataset, &scene)?;
                    let mut cfg = scene.config.clone();
                    cfg.poses = vec![PoseSpec::Explicit { pose: p }];
                    cfg.build()?.generate()?
                }
                None => dataset,
            };
            let held = reference.split(true);
            let indices = if held.is_empty() { (0..reference.len()).collect() } else { held };
            let settings = scene.config.render.settings();
            let report = evaluate_views(&reference, &indices, |i| match &params {
                Some(p) => {
                    let v = &reference.manifest.views[i];
                    render_frame(p, &scene.posed(&reference.manifest.poses[v.pose])?, &v.camera, &settings)
                }
                None => Ok(reference.frames[i].clone()),
            })?;
            fs::write(&out, report.to_json()?)?;
            println!(
                "psnr {:.2} dB, depth mse {:.3e}, warp mse {:.3e}, silhouette iou {:.4}",
                report.psnr, report.depth_mse, report.warp_mse, report.silhouette_iou
            );
            Ok(())
        }
        Command::Gradcheck { config, out, seed } => {
            let mut cfg = match config {
                Some(p) => toml::from_str::<GradcheckConfig>(&fs::read_to_string(&p)?).map_err(Error::from)?,
                None => GradcheckConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = gradcheck(&cfg)?;
            for t in &report.tensors {
                println!("{:<16} {:>6} max rel {:.3e} {}", t.name, t.count, t.max_rel, if t.pass { "ok" } else { "FAIL" });
            }
            if let Some(p) = out {
                fs::write(p, serde_json::to_string_pretty(&report)?)?;
            }
            if !report.pass {
                bail!("gradient check failed: worst relative error {:.3e}", report.max_rel());
            }
            Ok(())
        }
        Command::ExportMesh { data, checkpoint: ck, out, pose, resolution } => {
            let (dataset, scene) = open_dataset(&data.data)?;
            let params = checkpoint::load(&ck)?;
            let pose = resolve_pose(pose.pose.as_deref(), &dataset, &scene)?;
            let (mesh, _) = extract_field_mesh(&params, &scene.posed(&pose)?, resolution)?;
            if mesh.faces.is_empty() {
                eprintln!("warning: the zero level set is empty; writing an empty mesh");
            }
            mesh.write_obj(&out)?;
            println!("wrote {} vertices, {} faces to {}", mesh.vertices.len(), mesh.faces.len(), out.display());
            Ok(())
        }
    }
}

fn scene_config(path: Option<&Path>) -> anyhow::Result<SceneConfig> {
    Ok(match path {
        Some(p) => SceneConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SceneConfig::default(),
    })
}

fn open_dataset(dir: &Path) -> anyhow::Result<(Dataset, Scene)> {
    let dataset = Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let scene = dataset.manifest.scene.build()?;
    Ok((dataset, scene))
}

fn rig_camera(scene: &Scene, index: usize) -> anyhow::Result<Camera> {
    match scene.cameras.get(index) {
        Some(c) => Ok(c.clone()),
        None => Err(Error::config("camera", format!("index {index} outside a rig of {}", scene.cameras.len())).into()),
    }
}

fn resolve_pose(spec: Option<&str>, dataset: &Dataset, scene: &Scene) -> anyhow::Result<Pose> {
    let poses = &dataset.manifest.poses;
    let Some(spec) = spec else {
        return Ok(poses[0].clone());
    };
    if spec == "unseen" {
        return Ok(unseen_pose().resolve(&scene.body)?);
    }
    if let Ok(i) = spec.parse::<usize>() {
        return poses
            .get(i)
            .cloned()
            .ok_or_else(|| Error::config("pose", format!("index {i} outside {} dataset poses", poses.len())).into());
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).with_context(|| format!("reading pose {spec}"))?;
    let parsed: PoseSpec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::config("pose", e.to_string()))?
    } else {
        toml::from_str(&text).map_err(Error::from)?
    };
    Ok(parsed.resolve(&scene.body)?)
}

fn check_finite(frame: &RenderedFrame) -> anyhow::Result<()> {
    if frame.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite pixels in the render".into()).into())
    }
}

fn make_body(config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = scene_config(config)?;
    if let Some(s) = seed {
        cfg.body.seed = s;
    }
    let scene = cfg.build()?;
    fs::create_dir_all(out)?;
    scene.body.mesh.write_obj(&out.join("body.obj"))?;
    BodyDescription::of(&scene.body).write(&out.join("body.toml"))?;

    // Eight views around the rest pose, side by side.
    const VIEWS: usize = 8;
    let pose = Pose::identity(scene.body.joint_count());
    let r = cfg.render.resolution;
    let target = scene.body.mesh.bounds().center();
    let mut strip = RenderedFrame::background(VIEWS * r, r);
    for k in 0..VIEWS {
        let az = std::f64::consts::TAU * k as f64 / VIEWS as f64;
        let cam = Camera::orbit(target, cfg.rig.radius, az, cfg.rig.elevation, cfg.rig.fov_y, r, r)?;
        let f = scene.render(&pose, &cam)?;
        for y in 0..r {
            for x in 0..r {
                let (src, dst) = (y * r + x, y * VIEWS * r + k * r + x);
                strip.color[dst] = f.color[src];
                strip.depth[dst] = f.depth[src];
                strip.transmittance[dst] = f.transmittance[src];
            }
        }
    }
    write_png(&out.join("turntable.png"), &strip)?;
    println!(
        "wrote body with {} vertices, {} faces to {}",
        scene.body.mesh.vertices.len(),
        scene.body.mesh.faces.len(),
        out.display()
    );
    Ok(())
}
