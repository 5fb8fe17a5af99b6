use std::error::Error;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use hvslam::pipeline::ate::evaluate_ate;
use hvslam::pipeline::config::SlamConfig;
use hvslam::pipeline::dataset::{png_io, read_text, read_trajectory, write_trajectory, DatasetSequence};
use hvslam::pipeline::mesh::extract_mesh;
use hvslam::pipeline::model::Model;
use hvslam::pipeline::slam::run_slam_with_progress;
use hvslam::pipeline::synth::{generate, ScenePreset, SynthSpec, TrajectoryKind};
use hvslam::render::render_image;
use hvslam::window::WindowMode;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "hvslam", version, about = "RGB-D SLAM on a sparse hybrid voxel map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Render a synthetic RGB-D sequence with ground truth.
    Synth(SynthArgs),
    /// Track and map a dataset; writes the trajectory and a model file.
    Run(RunArgs),
    /// Extract a coloured triangle mesh (ASCII PLY) from a model file.
    Mesh(MeshArgs),
    /// Report the absolute trajectory error against ground truth.
    Eval(EvalArgs),
    /// Re-render one frame of a dataset from a model file.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "room")]
    scene: ScenePreset,
    #[arg(long, default_value = "arc")]
    trajectory: TrajectoryKind,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
    /// Depth noise standard deviation in meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory.
    #[arg(long, required_unless_present = "dump_config")]
    dataset: Option<PathBuf>,
    /// TOML config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration (every field) and exit.
    #[arg(long)]
    dump_config: bool,
    /// Estimated trajectory output (TUM format).
    #[arg(long, default_value = "traj.txt")]
    traj: PathBuf,
    /// Model output (map snapshot, decoder, render settings).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use only the first N frames.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    early_end: bool,
    /// standard, loop-rand or random.
    #[arg(long)]
    window_mode: Option<WindowMode>,
    /// Drop the fused SDF prior (decoder-only geometry).
    #[arg(long)]
    no_prior: bool,
    #[arg(long)]
    iters_track: Option<usize>,
    #[arg(long)]
    iters_map: Option<usize>,
    #[arg(long)]
    iters_first_map: Option<usize>,
    #[arg(long)]
    lr_pose: Option<f64>,
    #[arg(long)]
    lr_feature: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
    #[arg(long)]
    rays_track: Option<usize>,
    #[arg(long)]
    rays_map: Option<usize>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    keyframe_interval: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut SlamConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        cfg.optim.early_end |= self.early_end;
        if self.no_prior {
            cfg.disable_prior();
        }
        let o = &mut cfg.optim;
        set(&mut cfg.window.mode, self.window_mode);
        set(&mut o.iters_track, self.iters_track);
        set(&mut o.iters_map, self.iters_map);
        set(&mut o.iters_first_map, self.iters_first_map);
        set(&mut o.lr_pose, self.lr_pose);
        set(&mut o.lr_feature, self.lr_feature);
        set(&mut o.lr_decoder, self.lr_decoder);
        set(&mut o.rays_track, self.rays_track);
        set(&mut o.rays_map, self.rays_map);
        set(&mut cfg.map.voxel_size, self.voxel_size);
        set(&mut cfg.map.feature_dim, self.feature_dim);
        set(&mut cfg.window.size, self.window_size);
        set(&mut cfg.window.keyframe_interval, self.keyframe_interval);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "mesh.ply")]
    out: PathBuf,
    /// Marching-cubes cell size in meters.
    #[arg(long, default_value_t = 0.02)]
    resolution: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    est: PathBuf,
    /// Ground truth (TUM format).
    #[arg(long)]
    gt: PathBuf,
    /// Also print the per-pose errors.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset providing intrinsics and, without `--traj`, the pose.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Take the pose from this trajectory instead of the ground truth.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long, default_value = "render_rgb.png")]
    out_color: PathBuf,
    #[arg(long, default_value = "render_depth.png")]
    out_depth: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Mesh(a) => mesh(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        scene: a.scene,
        trajectory: a.trajectory,
        frames: a.frames,
        width: a.width,
        height: a.height,
        depth_noise: a.noise,
        seed: a.seed,
    };
    let seq = generate(&spec)?;
    seq.save(&a.out)?;
    println!("wrote {} frames to {}", seq.len(), a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SlamConfig::from_toml(&read_text(p)?)?,
        None => SlamConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = a.dataset.expect("required unless dumping the config");
    let mut seq = DatasetSequence::load(&dir)?;
    if let Some(n) = a.limit {
        seq = seq.subsample(n, 1);
    }
    let start = Instant::now();
    let quiet = a.quiet;
    let out = run_slam_with_progress(&seq, &cfg, &mut |i, n| {
        if !quiet && (i % 10 == 0 || i + 1 == n) {
            eprintln!("frame {}/{n} ({:.1} s)", i + 1, start.elapsed().as_secs_f64());
        }
    })?;
    write_trajectory(&a.traj, &out.trajectory)?;
    println!("trajectory: {}", a.traj.display());
    if let Some(p) = &a.model {
        Model { map: out.map.clone(), decoder: out.decoder.clone(), render: cfg.render }.save(p)?;
        println!("model: {}", p.display());
    }
    let s = &out.stats;
    println!(
        "frames {} | leaves {} | mapping iterations {} over {} frames | tracking lost {} | {:.1} s",
        seq.len(),
        out.map.num_leaves(),
        s.mapping_iterations,
        s.mapped_frames,
        s.tracking_lost.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(gt) = &seq.ground_truth {
        println!("ATE RMSE {:.3} cm", evaluate_ate(&out.trajectory, gt)?.rmse_cm());
    }
    Ok(())
}

fn mesh(a: MeshArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let mesh = extract_mesh(&model.map, &model.decoder, a.resolution, &model.render)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    mesh.write_ply(&mut w)?;
    w.flush()?;
    println!("{} vertices, {} faces -> {}", mesh.vertices.len(), mesh.faces.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate_ate(&read_trajectory(&a.est)?, &read_trajectory(&a.gt)?)?;
    if a.verbose {
        for (i, e) in report.errors.iter().enumerate() {
            println!("{i} {:.6}", e);
        }
    }
    let max = report.errors.iter().cloned().fold(0.0, f64::max);
    println!("poses {} | ATE RMSE {:.3} cm | max {:.3} cm", report.errors.len(), report.rmse_cm(), max * 100.0);
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let seq = DatasetSequence::load(&a.dataset)?;
    let traj = match &a.traj {
        Some(p) => read_trajectory(p)?,
        None => seq.ground_truth.clone().ok_or("dataset has no gt_traj.txt; pass --traj")?,
    };
    let (_, pose) = *traj.get(a.frame).ok_or_else(|| format!("trajectory has no frame {}", a.frame))?;
    let (color, depth) = render_image(&model.map, &model.decoder, &pose, &seq.intrinsics, &model.render);
    png_io::write_color(&a.out_color, &color)?;
    png_io::write_depth(&a.out_depth, &depth, seq.intrinsics.depth_scale)?;
    if let Ok(f) = seq.frame(a.frame) {
        let (mut sum, mut n) = (0.0, 0usize);
        for (r, o) in depth.data().iter().zip(f.depth.data()) {
            if *r > 0.0 && *o > 0.0 {
                sum += (*r as f64 - *o as f64).abs();
                n += 1;
            }
        }
        if n > 0 {
            println!("mean |depth error| {:.2} cm over {n} pixels", 100.0 * sum / n as f64);
        }
    }
    println!("wrote {} and {}", a.out_color.display(), a.out_depth.display());
    Ok(())
}
