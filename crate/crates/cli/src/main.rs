//! `headsplat` command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use headsplat::avatar::Avatar;
use headsplat::dataset::{load_records, save_records};
use headsplat::imaging::{ColorImage, MaskImage};
use headsplat::io::{
    read_png_mask, read_png_rgb, write_pfm, write_png_gray, write_png_mask, write_png_rgb,
};
use headsplat::optim::{
    depth_mae, edit_texture, psnr, ssim, swap_hair, train_face, train_hair, train_joint,
    FrameRecord, StageLog, TrainConfig,
};
use headsplat::splat::DepthMode;
use headsplat::synthetic::{blank_avatar, generate, SyntheticConfig};

#[derive(Parser)]
#[command(
    name = "headsplat",
    version,
    about = "Hybrid mesh + Gaussian head avatars"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlendMode {
    /// Occlusion test against the first sufficiently opaque Gaussian.
    Nearz,
    /// Occlusion test against the alpha-weighted accumulated depth.
    Gsdepth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration (training config, or fixture config for gen-synthetic).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Iteration count of the stage being run.
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated view indices to use.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    blend_mode: Option<BlendMode>,
    #[arg(long, value_enum)]
    early_stop: Option<Switch>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a ground-truth avatar, a blank starting avatar and rendered frames.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render frames of an avatar at the cameras and parameters of a frame set.
    Render {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frame index to render (all frames when omitted).
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write depth, alpha and blend buffers.
        #[arg(long)]
        dump_buffers: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: textures, pixel decoder and displacement.
    TrainFace(TrainArgs),
    /// Stage 2: canonical Gaussian hair.
    TrainHair(TrainArgs),
    /// Stage 3: deformation field and textures over the sequence.
    TrainJoint {
        #[command(flatten)]
        train: TrainArgs,
        /// Frame excluded from training.
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Put the hair of one avatar on the head of another.
    SwapHair {
        #[arg(long)]
        face: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the diffuse texture to a painted view.
    EditTexture {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Painted image (PNG) seen from `--frame`/`--view`.
        #[arg(long)]
        painted: PathBuf,
        /// Paint mask (PNG, white = painted).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-record PSNR/SSIM/depth-MAE table as CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Render this avatar and compare it with the frame set.
        #[arg(long, conflicts_with = "renders")]
        avatar: Option<PathBuf>,
        /// Compare PNGs named like the frame set's images instead.
        #[arg(long)]
        renders: Option<PathBuf>,
        /// CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the occlusion mask, its blur and the hair alpha of one view.
    DumpBlendMaps {
        #[arg(long)]
        avatar: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long)]
    avatar: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

/// Removes an output path on drop unless committed; existing paths are left alone.
struct OutputGuard {
    path: PathBuf,
    fresh: bool,
    committed: bool,
}

impl OutputGuard {
    fn new(path: &Path) -> Self {
        OutputGuard {
            path: path.to_path_buf(),
            fresh: !path.exists(),
            committed: false,
        }
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed || !self.fresh || !self.path.exists() {
            return;
        }
        let r = if self.path.is_dir() {
            fs::remove_dir_all(&self.path)
        } else {
            fs::remove_file(&self.path)
        };
        if let Err(e) = r {
            eprintln!(
                "warning: could not remove partial output {}: {e}",
                self.path.display()
            );
        }
    }
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::from_toml(
            &fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_render_flags(avatar: &mut Avatar, c: &Common) {
    if let Some(m) = c.blend_mode {
        avatar.settings.splat.depth_mode = match m {
            BlendMode::Nearz => DepthMode::NearZ,
            BlendMode::Gsdepth => DepthMode::Accumulated,
        };
    }
    if let Some(s) = c.early_stop {
        avatar.settings.splat.early_stop = matches!(s, Switch::On);
    }
}

fn load_avatar(dir: &Path, c: &Common) -> Result<Avatar> {
    let mut a = Avatar::load(dir).with_context(|| format!("loading avatar {}", dir.display()))?;
    apply_render_flags(&mut a, c);
    Ok(a)
}

fn load_data(dir: &Path, c: &Common) -> Result<Vec<FrameRecord>> {
    let mut recs =
        load_records(dir).with_context(|| format!("loading frame set {}", dir.display()))?;
    if let Some(v) = &c.views {
        recs.retain(|r| v.contains(&r.view));
    }
    if recs.is_empty() {
        bail!("no frames selected from {}", dir.display());
    }
    Ok(recs)
}

fn find(recs: &[FrameRecord], frame: usize, view: usize) -> Result<&FrameRecord> {
    recs.iter()
        .find(|r| r.frame == frame && r.view == view)
        .ok_or_else(|| anyhow!("frame {frame} view {view} is not in the frame set"))
}

fn stem(r: &FrameRecord) -> String {
    format!("f{:04}_v{:02}", r.frame, r.view)
}

fn write_log(path: &Path, log: &StageLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&log.columns)?;
    for row in &log.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn gen_synthetic(out: &Path, c: &Common) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => toml::from_str::<SyntheticConfig>(&fs::read_to_string(p)?)
            .context("parsing fixture config")?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut scene = generate(&cfg)?;
    apply_render_flags(&mut scene.avatar, c);
    if let Some(v) = &c.views {
        scene.records.retain(|r| v.contains(&r.view));
    }
    scene.avatar.save(&out.join("gt"), None)?;
    blank_avatar(&scene.avatar, &cfg.texture, cfg.seed)?.save(&out.join("init"), None)?;
    save_records(&out.join("frames"), &scene.records)?;
    fs::write(out.join("synthetic.toml"), toml::to_string(&cfg)?)?;
    Ok(())
}

fn render(
    avatar: &Path,
    data: &Path,
    frame: Option<usize>,
    out: &Path,
    dump: bool,
    c: &Common,
) -> Result<()> {
    let a = load_avatar(avatar, c)?;
    let recs = load_data(data, c)?;
    let rig = a.rig()?;
    fs::create_dir_all(out)?;
    let mut n = 0;
    for r in recs.iter().filter(|r| frame.is_none_or(|f| r.frame == f)) {
        let f = a.render_frame(&rig, &r.params, &r.camera)?;
        let s = stem(r);
        write_png_rgb(&out.join(format!("{s}.png")), &f.image)?;
        if dump {
            write_png_rgb(&out.join(format!("{s}_head.png")), &f.head.face.image)?;
            write_pfm(
                &out.join(format!("{s}_mesh_depth.pfm")),
                &f.head.raster.depth,
            )?;
            write_png_mask(
                &out.join(format!("{s}_coverage.png")),
                &f.head.raster.coverage(),
            )?;
            if let Some(h) = &f.hair {
                let b = &h.splat.buffers;
                write_png_gray(&out.join(format!("{s}_hair_alpha.png")), &b.alpha)?;
                write_pfm(&out.join(format!("{s}_nearz.pfm")), &b.nearz)?;
                write_pfm(&out.join(format!("{s}_accum_depth.pfm")), &b.accum_depth)?;
                write_png_mask(&out.join(format!("{s}_occlusion.png")), &h.maps.occlusion)?;
                write_png_gray(
                    &out.join(format!("{s}_blend_alpha.png")),
                    &h.maps.hair_alpha,
                )?;
            }
        }
        n += 1;
    }
    if n == 0 {
        bail!("no frames matched");
    }
    Ok(())
}

enum Stage {
    Face,
    Hair,
    Joint(Option<usize>),
}

fn train(args: &TrainArgs, stage: Stage) -> Result<()> {
    let c = &args.common;
    let mut cfg = train_config(c)?;
    let mut a = load_avatar(&args.avatar, c)?;
    let recs = load_data(&args.data, c)?;
    let refs: Vec<&FrameRecord> = recs.iter().collect();
    let log = match stage {
        Stage::Face => {
            if let Some(i) = c.iters {
                cfg.face.iters = i;
            }
            train_face(&mut a, &refs, &cfg)?
        }
        Stage::Hair => {
            if let Some(i) = c.iters {
                cfg.hair.iters = i;
            }
            train_hair(&mut a, &refs, &cfg)?
        }
        Stage::Joint(held_out) => {
            if let Some(i) = c.iters {
                cfg.joint.iters = i;
            }
            if held_out.is_some() {
                cfg.joint.held_out = held_out;
            }
            train_joint(&mut a, &refs, &cfg)?
        }
    };
    a.save(&args.out, Some(&cfg.to_toml()))?;
    write_log(&args.out.join("log.csv"), &log)
}

#[allow(clippy::too_many_arguments)]
fn edit(
    avatar: &Path,
    data: &Path,
    painted: &Path,
    mask: &Path,
    frame: usize,
    view: usize,
    out: &Path,
    c: &Common,
) -> Result<()> {
    let mut cfg = train_config(c)?;
    if let Some(i) = c.iters {
        cfg.edit.iters = i;
    }
    let mut a = load_avatar(avatar, c)?;
    let recs = load_data(data, c)?;
    let target = find(&recs, frame, view)?;
    let others: Vec<_> = recs
        .iter()
        .filter(|r| r.frame == frame && r.view != view)
        .map(|r| (r.camera.clone(), r.params.clone()))
        .collect();
    let img = read_png_rgb(painted)?;
    let m = read_png_mask(mask)?;
    let report = edit_texture(
        &mut a,
        &img,
        &m,
        &target.camera,
        &target.params,
        &others,
        &cfg.edit,
    )?;
    a.save(out, Some(&cfg.to_toml()))?;
    let log = StageLog {
        columns: vec!["iter".into(), "loss".into()],
        rows: report
            .losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i as f64, *l])
            .collect(),
    };
    write_log(&out.join("log.csv"), &log)
}

fn eval(
    data: &Path,
    avatar: Option<&Path>,
    renders: Option<&Path>,
    out: &Path,
    c: &Common,
) -> Result<()> {
    let recs = load_data(data, c)?;
    let a = avatar.map(|p| load_avatar(p, c)).transpose()?;
    let rig = a.as_ref().map(|a| a.rig()).transpose()?;
    if a.is_none() && renders.is_none() {
        bail!("eval needs --avatar or --renders");
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record([
        "frame",
        "view",
        "psnr",
        "ssim",
        "face_psnr",
        "face_ssim",
        "depth_mae",
    ])?;
    let mut sums = [0.0; 5];
    let mut counts = [0usize; 5];
    for r in &recs {
        let (image, depth): (ColorImage, Option<_>) = match (&a, &rig) {
            (Some(a), Some(rig)) => {
                let f = a.render_frame(rig, &r.params, &r.camera)?;
                (f.image, Some(f.head.raster.depth))
            }
            _ => {
                let p = renders.expect("checked").join(format!("{}.png", stem(r)));
                (
                    read_png_rgb(&p).with_context(|| format!("reading {}", p.display()))?,
                    None,
                )
            }
        };
        if image.dims() != r.image.dims() {
            bail!("render of {} has the wrong size", stem(r));
        }
        let face: MaskImage = r.face_mask();
        let vals = [
            Some(psnr(&r.image, &image, None)?),
            Some(ssim(&r.image, &image, None)?),
            if face.count() > 0 {
                Some(psnr(&r.image, &image, Some(&face))?)
            } else {
                None
            },
            if face.count() > 0 {
                Some(ssim(&r.image, &image, Some(&face))?)
            } else {
                None
            },
            match (&r.depth, &depth) {
                (Some(t), Some(d)) => depth_mae(t, d, &face),
                _ => None,
            },
        ];
        let mut row = vec![r.frame.to_string(), r.view.to_string()];
        for (k, v) in vals.iter().enumerate() {
            row.push(v.map_or(String::new(), |x| x.to_string()));
            if let Some(x) = v {
                sums[k] += x;
                counts[k] += 1;
            }
        }
        w.write_record(&row)?;
    }
    let mut row = vec!["mean".to_string(), String::new()];
    row.extend((0..5).map(|k| {
        if counts[k] > 0 {
            (sums[k] / counts[k] as f64).to_string()
        } else {
            String::new()
        }
    }));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

fn dump_blend_maps(
    avatar: &Path,
    data: &Path,
    frame: usize,
    view: usize,
    out: &Path,
    c: &Common,
) -> Result<()> {
    let a = load_avatar(avatar, c)?;
    let recs = load_data(data, c)?;
    let r = find(&recs, frame, view)?;
    let f = a.render_frame(&a.rig()?, &r.params, &r.camera)?;
    let h = f.hair.ok_or_else(|| anyhow!("avatar has no hair"))?;
    fs::create_dir_all(out)?;
    write_png_mask(&out.join("occlusion.png"), &h.maps.occlusion)?;
    write_png_gray(&out.join("occlusion_blurred.png"), &h.maps.soft)?;
    write_png_gray(&out.join("hair_alpha.png"), &h.maps.hair_alpha)?;
    write_pfm(&out.join("occlusion_blurred.pfm"), &h.maps.soft)?;
    write_pfm(&out.join("hair_alpha.pfm"), &h.maps.hair_alpha)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { out, common } => {
            let g = OutputGuard::new(&out);
            gen_synthetic(&out, &common)?;
            g.commit();
        }
        Command::Render {
            avatar,
            data,
            frame,
            out,
            dump_buffers,
            common,
        } => {
            let g = OutputGuard::new(&out);
            render(&avatar, &data, frame, &out, dump_buffers, &common)?;
            g.commit();
        }
        Command::TrainFace(args) => {
            let g = OutputGuard::new(&args.out);
            train(&args, Stage::Face)?;
            g.commit();
        }
        Command::TrainHair(args) => {
            let g = OutputGuard::new(&args.out);
            train(&args, Stage::Hair)?;
            g.commit();
        }
        Command::TrainJoint {
            train: args,
            held_out,
        } => {
            let g = OutputGuard::new(&args.out);
            train(&args, Stage::Joint(held_out))?;
            g.commit();
        }
        Command::SwapHair {
            face,
            donor,
            out,
            common,
        } => {
            let g = OutputGuard::new(&out);
            let (a, fit) = swap_hair(
                &load_avatar(&face, &common)?,
                &load_avatar(&donor, &common)?,
            )?;
            a.save(&out, None)?;
            log::info!(
                "hair alignment scale {:.6}, residual {:.3e}",
                fit.transform.scale,
                fit.residual
            );
            g.commit();
        }
        Command::EditTexture {
            avatar,
            data,
            painted,
            mask,
            frame,
            view,
            out,
            common,
        } => {
            let g = OutputGuard::new(&out);
            edit(&avatar, &data, &painted, &mask, frame, view, &out, &common)?;
            g.commit();
        }
        Command::Eval {
            data,
            avatar,
            renders,
            out,
            common,
        } => {
            let g = OutputGuard::new(&out);
            eval(&data, avatar.as_deref(), renders.as_deref(), &out, &common)?;
            g.commit();
        }
        Command::DumpBlendMaps {
            avatar,
            data,
            frame,
            view,
            out,
            common,
        } => {
            let g = OutputGuard::new(&out);
            dump_blend_maps(&avatar, &data, frame, view, &out, &common)?;
            g.commit();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
