//! Command-line front end. Every stage reads and writes user-named files;
//! settings come from a profile, then an optional TOML file with the same
//! keys as [`RunConfig`], then flags.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{EtpError, Result};
use crate::evaluation::map_at;
use crate::io::checkpoint::{ln_from_checkpoint, load_checkpoint, rn_from_checkpoint, save_checkpoint, ModelKind};
use crate::io::documents::{load_annotations, load_items, save_items, write_json, VideoItems};
use crate::io::synth::{read_dataset, synth_generate, write_dataset, SynthConfig, VideoData};
use crate::pipeline::{
    ln_training_pools, localize, propose, refine_items, rn_training_pools, run_pipeline, split, train_localization,
    train_refinement, write_outcome, PipelineConfig, Profile,
};

/// Everything a run can be configured with. The TOML config file uses these
/// keys: pipeline fields at the top level and generator fields under `[synth]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        Self {
            pipeline: PipelineConfig::profile(profile),
            synth: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.validate()
    }

    /// Overlays the keys present in `text` onto `self`. Keys that name no
    /// setting are rejected.
    pub fn merge_toml(&self, text: &str, path: &Path) -> Result<Self> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| EtpError::format(path, e.to_string()))?;
        let mut base =
            toml::Table::try_from(self).map_err(|e| EtpError::format(path, format!("cannot represent config: {e}")))?;
        merge_tables(&mut base, &overlay);
        let merged: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| EtpError::format(path, e.to_string()))?;
        let check = toml::Table::try_from(&merged)
            .map_err(|e| EtpError::format(path, format!("cannot represent config: {e}")))?;
        if let Some(key) = first_unknown_key(&overlay, &check, "") {
            return Err(EtpError::format(path, format!("unknown config key `{key}`")));
        }
        Ok(merged)
    }
}

fn merge_tables(base: &mut toml::Table, overlay: &toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

fn first_unknown_key(overlay: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in overlay {
        let here = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (known.get(key), value) {
            (None, _) => return Some(here),
            (Some(toml::Value::Table(k)), toml::Value::Table(o)) => {
                if let Some(found) = first_unknown_key(o, k, &here) {
                    return Some(found);
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(Debug, Parser)]
#[command(
    name = "etp",
    version,
    about = "Temporal action localization from per-frame features and actionness scores",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base settings: `desk` trains small networks for at most 2K iterations.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Grow actionness proposals from class-score tracks.
    Actionness(ActionnessArgs),
    /// Train the boundary refinement network.
    TrainRn(TrainArgs),
    /// Refine proposals with a trained refinement network.
    Refine(ApplyArgs),
    /// Train the localization network.
    TrainLn(TrainArgs),
    /// Classify, score and adjust proposals into detections.
    Localize(ApplyArgs),
    /// Report per-class AP and mAP over IoU thresholds.
    Evaluate(EvaluateArgs),
    /// Run every stage end to end on a dataset directory.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed for every random draw.
    #[arg(long)]
    seed: u64,
    /// Number of videos.
    #[arg(long)]
    videos: Option<usize>,
    /// Frames per video.
    #[arg(long)]
    frames: Option<usize>,
    /// Number of action classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Score noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Feature signal-to-noise ratio.
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory with annotations.json, features/ and scores/.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Videos to process; train and test follow `train_fraction`.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Debug, Args, Default)]
struct ActionnessFlags {
    /// Score threshold for seed frames.
    #[arg(long)]
    threshold: Option<f64>,
    /// Components must be longer than this many frames.
    #[arg(long)]
    min_len: Option<usize>,
    /// Components must be shorter than this many frames.
    #[arg(long)]
    max_len: Option<usize>,
    /// Gaussian smoothing width of the average track, in frames.
    #[arg(long)]
    smooth_sigma: Option<f64>,
    /// NMS threshold over pooled proposals.
    #[arg(long)]
    nms: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct UnitFlags {
    /// Frames per unit.
    #[arg(long)]
    unit_len: Option<usize>,
    /// Unit grid stride in frames.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// SGD iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Proposals per iteration.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum.
    #[arg(long)]
    momentum: Option<f64>,
    /// Learning-rate decay factor.
    #[arg(long)]
    decay: Option<f64>,
    /// Iterations between decays.
    #[arg(long)]
    decay_every: Option<usize>,
    /// Completeness loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Regression loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// GRU hidden size.
    #[arg(long)]
    hidden: Option<usize>,
    /// Stacked GRU layers per direction.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Debug, Args)]
struct ActionnessArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    actionness: ActionnessFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "FILE")]
    proposals: PathBuf,
    /// Checkpoint to write.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Seed for initialization and sampling.
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    units: UnitFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "FILE")]
    proposals: PathBuf,
    /// Checkpoint to apply.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    units: UnitFlags,
    /// Per-class NMS threshold on detections.
    #[arg(long)]
    nms: Option<f64>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    detections: PathBuf,
    #[arg(long, value_name = "FILE")]
    annotations: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    iou: Option<Vec<f64>>,
    /// Groundtruth videos to score against.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Also write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Dataset directory with annotations.json, features/ and scores/.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Directory for every artifact of the run.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed for both networks; the localization network uses seed + 1.
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    actionness: ActionnessFlags,
    #[command(flatten)]
    units: UnitFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    iou: Option<Vec<f64>>,
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ActionnessFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let a = &mut cfg.actionness;
        set(&mut a.threshold, self.threshold);
        set(&mut a.min_len, self.min_len);
        set(&mut a.max_len, self.max_len);
        set(&mut a.smooth_sigma, self.smooth_sigma);
        set(&mut a.nms_threshold, self.nms);
    }
}

impl UnitFlags {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.units.unit_len, self.unit_len);
        set(&mut cfg.units.stride, self.stride);
    }
}

impl TrainFlags {
    fn apply_rn(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.rn_train;
        set(&mut t.iterations, self.iterations);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.momentum, self.momentum);
        set(&mut t.schedule.base, self.lr);
        set(&mut t.schedule.decay, self.decay);
        set(&mut t.schedule.every, self.decay_every);
        set(&mut cfg.rn_hidden, self.hidden);
        set(&mut cfg.rn_depth, self.depth);
    }

    fn apply_ln(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.ln_train;
        set(&mut t.iterations, self.iterations);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.momentum, self.momentum);
        set(&mut t.schedule.base, self.lr);
        set(&mut t.schedule.decay, self.decay);
        set(&mut t.schedule.every, self.decay_every);
        set(&mut t.weights.alpha, self.alpha);
        set(&mut t.weights.beta, self.beta);
    }

    fn reject_unused(&self, flags: &[(&str, bool)]) -> Result<()> {
        match flags.iter().find(|(_, present)| *present) {
            Some((name, _)) => Err(EtpError::invalid(format!("--{name} does not apply to this subcommand"))),
            None => Ok(()),
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let profile = match cli.profile {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    };
    let base = RunConfig::profile(profile);
    match &cli.config {
        None => Ok(base),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| EtpError::io(path, e))?;
            base.merge_toml(&text, path)
        }
    }
}

fn select<'a>(videos: &'a [VideoData], which: SplitArg, cfg: &PipelineConfig) -> Result<&'a [VideoData]> {
    Ok(match which {
        SplitArg::All => videos,
        SplitArg::Train => &videos[split(videos.len(), cfg.train_fraction)?.0],
        SplitArg::Test => &videos[split(videos.len(), cfg.train_fraction)?.1],
    })
}

/// Proposal entries aligned with `videos`; every video needs an entry.
fn aligned_items(videos: &[VideoData], path: &Path, classes: &[String]) -> Result<Vec<VideoItems>> {
    let mut by_id: HashMap<String, VideoItems> = load_items(path, classes)?
        .into_iter()
        .map(|v| (v.video_id.clone(), v))
        .collect();
    videos
        .iter()
        .map(|v| {
            by_id
                .remove(&v.annotation.video_id)
                .ok_or_else(|| EtpError::format(path, format!("no entry for video `{}`", v.annotation.video_id)))
        })
        .collect()
}

fn load_data(args: &DataArgs, default_split: SplitArg, cfg: &PipelineConfig) -> Result<(Vec<VideoData>, Vec<String>)> {
    let videos = read_dataset(&args.data)?;
    let classes = videos
        .first()
        .map(|v| v.annotation.classes.clone())
        .ok_or_else(|| EtpError::invalid("dataset has no videos"))?;
    let chosen = select(&videos, args.split.unwrap_or(default_split), cfg)?.to_vec();
    Ok((chosen, classes))
}

fn execute(cli: Cli) -> Result<()> {
    let mut run = base_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            let s = &mut run.synth;
            s.seed = a.seed;
            set(&mut s.num_videos, a.videos);
            set(&mut s.num_frames, a.frames);
            set(&mut s.num_classes, a.classes);
            set(&mut s.feature_dim, a.dim);
            set(&mut s.score_noise, a.noise);
            set(&mut s.feature_snr, a.snr);
            run.validate()?;
            let videos = synth_generate(&run.synth)?;
            write_dataset(&a.out, &videos)?;
            info!("wrote {} videos to {}", videos.len(), a.out.display());
        }
        Command::Actionness(a) => {
            a.actionness.apply(&mut run.pipeline);
            run.validate()?;
            let cfg = &run.pipeline;
            let (videos, classes) = load_data(&a.data, SplitArg::All, cfg)?;
            let items: Vec<VideoItems> = videos.iter().map(|v| propose(v, &cfg.actionness)).collect();
            save_items(&a.out, &items, &classes)?;
        }
        Command::TrainRn(a) => {
            a.train
                .reject_unused(&[("alpha", a.train.alpha.is_some()), ("beta", a.train.beta.is_some())])?;
            a.units.apply(&mut run.pipeline);
            a.train.apply_rn(&mut run.pipeline);
            run.pipeline = run.pipeline.with_seed(a.seed);
            run.validate()?;
            let cfg = &run.pipeline;
            let (videos, classes) = load_data(&a.data, SplitArg::Train, cfg)?;
            let props = aligned_items(&videos, &a.proposals, &classes)?;
            let refs: Vec<&VideoData> = videos.iter().collect();
            let pools = rn_training_pools(&refs, &props, cfg);
            let (model, _) = train_refinement(&refs, &pools, cfg)?;
            save_checkpoint(&a.out, ModelKind::Refinement, &model)?;
        }
        Command::Refine(a) => {
            if a.nms.is_some() {
                return Err(EtpError::invalid("--nms does not apply to refine"));
            }
            a.units.apply(&mut run.pipeline);
            run.validate()?;
            let cfg = &run.pipeline;
            let model = rn_from_checkpoint(&load_checkpoint(&a.model)?)?;
            let (videos, classes) = load_data(&a.data, SplitArg::All, cfg)?;
            let props = aligned_items(&videos, &a.proposals, &classes)?;
            let refined = videos
                .iter()
                .zip(&props)
                .map(|(v, p)| refine_items(&model, v, p, &cfg.units))
                .collect::<Result<Vec<_>>>()?;
            save_items(&a.out, &refined, &classes)?;
        }
        Command::TrainLn(a) => {
            a.train
                .reject_unused(&[("hidden", a.train.hidden.is_some()), ("depth", a.train.depth.is_some())])?;
            a.units.apply(&mut run.pipeline);
            a.train.apply_ln(&mut run.pipeline);
            run.pipeline = run.pipeline.with_seed(a.seed);
            run.validate()?;
            let cfg = &run.pipeline;
            let (videos, classes) = load_data(&a.data, SplitArg::Train, cfg)?;
            let props = aligned_items(&videos, &a.proposals, &classes)?;
            let refs: Vec<&VideoData> = videos.iter().collect();
            let pools = ln_training_pools(&refs, &props, cfg);
            let (model, _) = train_localization(&refs, &pools, classes.len(), cfg)?;
            save_checkpoint(&a.out, ModelKind::Localization, &model)?;
        }
        Command::Localize(a) => {
            a.units.apply(&mut run.pipeline);
            set(&mut run.pipeline.detect_nms, a.nms);
            run.validate()?;
            let cfg = &run.pipeline;
            let model = ln_from_checkpoint(&load_checkpoint(&a.model)?)?;
            let (videos, classes) = load_data(&a.data, SplitArg::All, cfg)?;
            if model.num_classes() != classes.len() {
                return Err(EtpError::invalid(format!(
                    "model predicts {} classes, dataset has {}",
                    model.num_classes(),
                    classes.len()
                )));
            }
            let props = aligned_items(&videos, &a.proposals, &classes)?;
            let dets = videos
                .iter()
                .zip(&props)
                .map(|(v, p)| {
                    let d = localize(&model, v, &p.intervals(), &cfg.units, cfg.detect_nms)?;
                    Ok(VideoItems::from_detections(&v.annotation.video_id, &d))
                })
                .collect::<Result<Vec<_>>>()?;
            save_items(&a.out, &dets, &classes)?;
        }
        Command::Evaluate(a) => {
            if let Some(iou) = a.iou {
                run.pipeline.thresholds = iou;
            }
            run.validate()?;
            let cfg = &run.pipeline;
            let annotations = load_annotations(&a.annotations)?;
            let classes = crate::io::documents::class_vocabulary(&annotations)?;
            let chosen = match a.split.unwrap_or(SplitArg::All) {
                SplitArg::All => &annotations[..],
                SplitArg::Train => &annotations[split(annotations.len(), cfg.train_fraction)?.0],
                SplitArg::Test => &annotations[split(annotations.len(), cfg.train_fraction)?.1],
            };
            let gts: Vec<_> = chosen.iter().map(|v| v.ground_truth()).collect();
            let dets = load_items(&a.detections, &classes)?
                .iter()
                .map(VideoItems::detections)
                .collect::<Result<Vec<_>>>()?;
            let report = map_at(&dets, &gts, &classes, &cfg.thresholds)?;
            print!("{}", report.table());
            if let Some(out) = a.out {
                write_json(&out, &report)?;
            }
        }
        Command::Pipeline(a) => {
            a.actionness.apply(&mut run.pipeline);
            a.units.apply(&mut run.pipeline);
            a.train.apply_rn(&mut run.pipeline);
            a.train.apply_ln(&mut run.pipeline);
            if let Some(iou) = a.iou {
                run.pipeline.thresholds = iou;
            }
            run.pipeline = run.pipeline.with_seed(a.seed);
            run.validate()?;
            let videos = read_dataset(&a.data)?;
            let classes = crate::io::documents::class_vocabulary(
                &videos.iter().map(|v| v.annotation.clone()).collect::<Vec<_>>(),
            )?;
            let outcome = run_pipeline(&videos, &classes, &run.pipeline)?;
            write_outcome(&a.out, &outcome, &classes)?;
            print!("{}", outcome.report.table());
            println!(
                "boundary error: raw {:.3}, refined {:.3}",
                outcome.summary.raw_boundary_error, outcome.summary.refined_boundary_error
            );
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the chosen subcommand.
/// Returns 0 on success, 1 for usage and input errors, 2 for internal errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return 2;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
    }
}
