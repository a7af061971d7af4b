//! `crfnet`: synthetic data generation, radar overlay inspection, training,
//! evaluation and detection rendering.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 IO
//! error, 4 numeric divergence during training.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use image::RgbImage;
use log::info;

use crfnet::crf_net::{detect, AnchorSet, CrfNet, DetectionSet};
use crfnet::dataset::{generate_dataset, load_scenes, split_dataset, write_dataset, Scene, SCENE_FILE};
use crfnet::evaluation::evaluate;
use crfnet::radar::ChannelSpec;
use crfnet::render::{draw_detections, side_by_side, visualize_scene};
use crfnet::training::{prepare_sample, prepare_samples, train, Filters, Mode};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Divergence(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Divergence(m) | Failure::Other(m) => m,
        }
    }
}

impl From<crfnet::Error> for Failure {
    fn from(e: crfnet::Error) -> Self {
        use crfnet::Error as E;
        use crfnet_nn::NnError as N;
        let m = e.to_string();
        match e {
            E::Config(_) | E::Shape { .. } | E::Geometry(_) => Failure::Config(m),
            E::Io { .. } | E::Json { .. } | E::Image { .. } | E::Scene { .. } => Failure::Io(m),
            E::Divergence { .. } | E::Nn(N::NonFinite { .. }) => Failure::Divergence(m),
            E::Nn(N::Io(_) | N::Checkpoint(_)) => Failure::Io(m),
            E::Nn(_) => Failure::Other(m),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    [Mode::Fusion, Mode::ImageOnly, Mode::Nrm]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("expected one of fusion, image_only, nrm; got {s:?}"))
}

fn parse_filters(s: &str) -> Result<Filters, String> {
    [Filters::None, Filters::Af, Filters::AfGrf]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| format!("expected one of none, af, af_grf; got {s:?}"))
}

#[derive(Parser)]
#[command(name = "crfnet", version, about = "Camera and radar fusion object detection")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// fusion, image_only or nrm.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// none, af or af_grf.
    #[arg(long, global = true, value_parser = parse_filters)]
    filters: Option<Filters>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// A dataset root or a single scene directory.
    #[arg(long, global = true)]
    scenes: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with a manifest.
    SynthGen {
        /// Number of scenes; overrides `num_scenes`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Render accumulated radar over the camera image of each scene.
    Visualize,
    /// Train on the training split; writes checkpoints, loss logs and a validation report.
    Train,
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Zero the camera channels before inference.
        #[arg(long)]
        blackout: bool,
    },
    /// Draw detections of a checkpoint; with `--baseline`, renders both side by side.
    Detect {
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Config(format!("--{flag} is required for this command")))
}

fn mode_of(spec: &Option<ChannelSpec>) -> Mode {
    match spec {
        None => Mode::ImageOnly,
        Some(s) if *s == ChannelSpec::existence_only() => Mode::Nrm,
        Some(_) => Mode::Fusion,
    }
}

/// Scenes under `path`, which is either one scene directory or a dataset root.
fn read_scenes(path: &Path) -> Result<Vec<Scene>, Failure> {
    let scenes = if path.join(SCENE_FILE).is_file() {
        vec![Scene::load(path)?]
    } else {
        load_scenes(path)?
    };
    if scenes.is_empty() {
        return Err(Failure::Io(format!("{}: no scenes found", path.display())));
    }
    Ok(scenes)
}

fn check_sizes(scenes: &[Scene], input_size: [usize; 2]) -> Result<(), Failure> {
    let [h, w] = input_size;
    match scenes.iter().find(|s| s.image_size() != (h, w)) {
        Some(s) => {
            let (sh, sw) = s.image_size();
            Err(Failure::Config(format!("scene {} is {sh}×{sw} but the network input is {h}×{w}", s.scene_id)))
        }
        None => Ok(()),
    }
}

fn load_net(path: &Path, rc: &mut RunConfig, explicit_mode: Option<Mode>) -> Result<CrfNet<f32>, Failure> {
    let net = CrfNet::<f32>::load(path)?;
    let mode = mode_of(&net.config().radar);
    if let Some(m) = explicit_mode.filter(|&m| m != mode) {
        return Err(Failure::Config(format!("--mode {} does not match checkpoint {} ({})", m.name(), path.display(), mode.name())));
    }
    rc.mode = mode;
    rc.network = net.config().clone();
    Ok(net)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), Failure> {
    img.save(path).map_err(|e| io_err(path, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let mut rc = base.resolve(Overrides {
        seed: cli.seed,
        mode: cli.mode,
        filters: cli.filters,
    })?;
    let out = required(&cli.out, "out")?;
    match cli.command {
        Command::SynthGen { count } => {
            if let Some(n) = count {
                rc.num_scenes = n;
            }
            rc = rc.resolve(Overrides::default())?;
            rc.write(out)?;
            let t = Instant::now();
            let (scenes, manifest) = generate_dataset(&rc.synth, rc.num_scenes, rc.seed)?;
            write_dataset(out, &scenes, &manifest)?;
            info!("generated {} scenes in {:.2?}", scenes.len(), t.elapsed());
        }
        Command::Visualize => {
            let scenes = read_scenes(required(&cli.scenes, "scenes")?)?;
            rc.write(out)?;
            for s in &scenes {
                let t = Instant::now();
                let img = visualize_scene(s, rc.filters);
                save_png(&img, &out.join(format!("{}.png", s.scene_id)))?;
                info!("{}: rendered in {:.2?}", s.scene_id, t.elapsed());
            }
        }
        Command::Train => {
            let scenes = read_scenes(required(&cli.scenes, "scenes")?)?;
            check_sizes(&scenes, rc.network.input_size)?;
            rc.write(out)?;
            let t = Instant::now();
            let split = split_dataset(scenes, rc.split, rc.seed)?;
            let train_set = prepare_samples(&split.train, rc.filters, rc.mode)?;
            let val_set = prepare_samples(&split.val, rc.filters, rc.mode)?;
            info!(
                "preprocessed {} training and {} validation scenes in {:.2?}",
                train_set.len(),
                val_set.len(),
                t.elapsed()
            );
            let mut net = CrfNet::<f32>::new(rc.network.clone(), rc.seed)?;
            let t = Instant::now();
            let report = train(&mut net, &train_set, &val_set, &rc.train, Some(out))?;
            info!("trained {} epochs in {:.2?}, kept epoch {}", report.epochs.len(), t.elapsed(), report.best_epoch);
            if !val_set.is_empty() {
                let r = evaluate(&net, &val_set, rc.mode, rc.filters, false, &rc.inference)?;
                r.write(&out.join("eval-val"))?;
                info!("validation weighted mAP {:.4}", r.weighted_map);
            }
        }
        Command::Eval { split, blackout } => {
            let net = load_net(required(&cli.checkpoint, "checkpoint")?, &mut rc, cli.mode)?;
            let scenes = read_scenes(required(&cli.scenes, "scenes")?)?;
            check_sizes(&scenes, rc.network.input_size)?;
            rc.write(out)?;
            let parts = split_dataset(scenes, rc.split, rc.seed)?;
            let chosen = match split {
                SplitName::Train => parts.train,
                SplitName::Val => parts.val,
                SplitName::Test => parts.test,
                SplitName::All => [parts.train, parts.val, parts.test].concat(),
            };
            let t = Instant::now();
            let samples = prepare_samples(&chosen, rc.filters, rc.mode)?;
            info!("preprocessed {} scenes in {:.2?}", samples.len(), t.elapsed());
            let t = Instant::now();
            let report = evaluate(&net, &samples, rc.mode, rc.filters, blackout, &rc.inference)?;
            let per_image = t.elapsed() / samples.len().max(1) as u32;
            info!("inference {per_image:.2?} per image");
            report.write(out)?;
            print!("{}", report.table());
        }
        Command::Detect { baseline } => {
            let net = load_net(required(&cli.checkpoint, "checkpoint")?, &mut rc, cli.mode)?;
            let base = match &baseline {
                Some(p) => {
                    let b = CrfNet::<f32>::load(p)?;
                    if b.config().input_size != net.config().input_size {
                        let ([bh, bw], [h, w]) = (b.config().input_size, net.config().input_size);
                        return Err(Failure::Config(format!("baseline input {bh}×{bw} differs from checkpoint input {h}×{w}")));
                    }
                    Some(b)
                }
                None => None,
            };
            let scenes = read_scenes(required(&cli.scenes, "scenes")?)?;
            check_sizes(&scenes, rc.network.input_size)?;
            rc.write(out)?;
            let anchors = AnchorSet::new(net.config());
            let run_one = |n: &CrfNet<f32>, s: &Scene| -> Result<DetectionSet, Failure> {
                let t = Instant::now();
                let sample = prepare_sample(s, rc.filters, mode_of(&n.config().radar))?;
                let prep = t.elapsed();
                let t = Instant::now();
                let dets = detect(n, &sample.input, &anchors, &rc.inference)?;
                info!("{}: preprocessing {prep:.2?}, inference {:.2?}", s.scene_id, t.elapsed());
                Ok(dets)
            };
            for s in &scenes {
                let dets = run_one(&net, s)?;
                write_json(&dets, &out.join(format!("{}.json", s.scene_id)))?;
                let mut img = draw_detections(&s.image, &dets.detections);
                if let Some(b) = &base {
                    let bd = run_one(b, s)?;
                    write_json(&bd, &out.join(format!("{}.baseline.json", s.scene_id)))?;
                    img = side_by_side(&draw_detections(&s.image, &bd.detections), &img);
                }
                save_png(&img, &out.join(format!("{}.png", s.scene_id)))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
