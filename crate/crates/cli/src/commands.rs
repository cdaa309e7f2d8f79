//! Implementations of the `touchwalker` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use touchwalker::eval::{self, EvalReport, MetricSums};
use touchwalker::motion::bvh::{parse_bvh, write_bvh, write_skeleton_bvh};
use touchwalker::motion::dataset::build_dataset;
use touchwalker::motion::{load_dataset, serialize_dataset, ClipTag, ContactThresholds, MotionClip};
use touchwalker::network::{load_checkpoint, Model, ModelConfig};
use touchwalker::par::{self, Execution};
use touchwalker::runtime::{extract_trace, replay, EngineConfig, Terrain};
use touchwalker::skeleton::Skeleton;
use touchwalker::synth::{self, WalkParams};
use touchwalker::training::{initial_model, train_to_dir, LossWeights, SamplingMode, TrainConfig};

use crate::server::{ServeConfig, Server};

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Path of the skeleton companion written next to a dataset file.
pub fn skeleton_companion(dataset: &Path) -> PathBuf {
    let mut name = dataset.as_os_str().to_owned();
    name.push(".skeleton.bvh");
    PathBuf::from(name)
}

/// BVH files given directly or found (non-recursively) in directories,
/// sorted by path.
pub fn collect_bvh(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in fs::read_dir(p).with_context(|| format!("reading {}", p.display()))? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bvh")) {
                    out.push(path);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_clip(path: &Path) -> Result<MotionClip> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(parse_bvh(&name, &text)?)
}

fn subject_matches(path: &Path, subject: Option<u32>) -> bool {
    subject.is_none() || ClipTag::from_file_name(&path.to_string_lossy()).subject == subject
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// directory of BVH files
    pub bvh_dir: PathBuf,
    /// output dataset file
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// contact height threshold in meters
    #[arg(long, default_value_t = 0.1)]
    pub height_threshold: f64,
    /// contact speed threshold in m/s
    #[arg(long, default_value_t = 0.24)]
    pub speed_threshold: f64,
    /// resample clips to this rate first
    #[arg(long)]
    pub frame_rate: Option<f64>,
    /// leave out clips of this subject (the held-out test split)
    #[arg(long)]
    pub exclude_subject: Option<u32>,
    #[arg(long)]
    pub sequential: bool,
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let files: Vec<PathBuf> = collect_bvh(std::slice::from_ref(&a.bvh_dir))?
        .into_iter()
        .filter(|p| a.exclude_subject.is_none() || !subject_matches(p, a.exclude_subject))
        .collect();
    if files.is_empty() {
        bail!("no BVH files in {}", a.bvh_dir.display());
    }
    let thresholds = ContactThresholds {
        height: a.height_threshold,
        speed: a.speed_threshold,
    };
    let exec = execution(a.sequential);
    let loaded = par::map(exec, &files, |p| -> Result<MotionClip> {
        let clip = load_clip(p)?;
        let clip = match a.frame_rate {
            Some(r) => clip.resample(r)?,
            None => clip,
        };
        Ok(clip.with_thresholds(thresholds))
    });
    let mut clips = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in files.iter().zip(loaded) {
        match r {
            Ok(c) => clips.push(c),
            Err(e) => failures.push(format!("{}: {e:#}", p.display())),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("error: {f}");
        }
        bail!("{} of {} BVH files could not be read", failures.len(), files.len());
    }
    let dataset = build_dataset(&clips, a.k, exec)?;
    let mut themes: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for c in &clips {
        let e = themes.entry(ClipTag::from_file_name(&c.name).theme).or_default();
        e.0 += 1;
        e.1 += c.len();
        e.2 += c.len().saturating_sub(a.k + 1);
    }
    for (theme, (n, frames, samples)) in &themes {
        println!("theme {theme}: {n} clips, {frames} frames, {samples} samples");
    }
    serialize_dataset(&dataset, &a.out)?;
    let skeleton_path = skeleton_companion(&a.out);
    fs::write(&skeleton_path, write_skeleton_bvh(clips[0].skeleton()))
        .with_context(|| format!("writing {}", skeleton_path.display()))?;
    println!(
        "wrote {} samples (k = {}, J = {}) to {}",
        dataset.len(),
        a.k,
        dataset.layout.joints,
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// k = 5, K = 8, recurrent width 32, expert width 128
    Full,
    /// k = 2, K = 2, recurrent width 16, expert width 32
    Small,
    /// k = 2, K = 2, every width 4
    Tiny,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub model: Preset,
    /// history length; must match the dataset
    #[arg(long)]
    pub k: Option<usize>,
    /// number of experts
    #[arg(long)]
    pub experts: Option<usize>,
    /// predict root motion with PoseNet only
    #[arg(long)]
    pub no_transnet: bool,
    /// replace GRUs with feedforward stacks of similar size
    #[arg(long)]
    pub no_gru: bool,
}

impl ModelArgs {
    pub fn config(&self, joints: usize) -> ModelConfig {
        let mut c = match self.model {
            Preset::Full => ModelConfig::full(joints),
            Preset::Small => ModelConfig::small(joints),
            Preset::Tiny => ModelConfig::tiny(joints),
        };
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(e) = self.experts {
            c.experts = e;
        }
        c.use_transnet &= !self.no_transnet;
        c.recurrent &= !self.no_gru;
        c
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 2.5e-3)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, env = "TOUCHWALKER_SEED", default_value_t = 0)]
    pub seed: u64,
    /// w1..w5 for L_rec, L_FK, L_dir, L_ct, L_ct_trans
    #[arg(long, default_value = "1,1,1,0.5,0.5")]
    pub loss_weights: String,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// 0 disables periodic checkpoints
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// halve the learning rate this many times at evenly spaced steps
    #[arg(long, default_value_t = 0)]
    pub lr_halvings: usize,
    /// probability of training on a free-running history instead of the
    /// ground truth; 0 is pure teacher forcing
    #[arg(long, default_value_t = 0.0)]
    pub rollout_probability: f64,
    #[arg(long, default_value_t = 4)]
    pub rollout_horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub rollout_warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub rollout_ramp: usize,
    #[arg(long)]
    pub sequential: bool,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let sampling = if self.rollout_probability > 0.0 {
            SamplingMode::Scheduled {
                probability: self.rollout_probability,
                horizon: self.rollout_horizon,
                warmup: self.rollout_warmup,
                ramp: self.rollout_ramp,
            }
        } else {
            SamplingMode::TeacherForcing
        };
        let c = TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            weights: LossWeights::parse(&self.loss_weights)?,
            sampling,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            lr_halvings: self.lr_halvings,
            execution: execution(self.sequential),
        };
        c.validate()?;
        Ok(c)
    }
}

pub fn describe(c: &TrainConfig) -> String {
    let w = c.weights.as_array().map(|v| v.to_string()).join(",");
    format!(
        "lr={:e} wd={:e} batch={} steps={} seed={} loss_weights={w}",
        c.learning_rate, c.weight_decay, c.batch_size, c.steps, c.seed
    )
}

#[derive(Debug, Args)]
pub struct TrainCommand {
    /// dataset written by `preprocess`
    pub dataset: PathBuf,
    #[arg(long, default_value = "run")]
    pub out_dir: PathBuf,
    /// skeleton BVH; defaults to the dataset's companion file
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn load_skeleton(dataset: &Path, explicit: Option<&Path>) -> Result<Skeleton> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| skeleton_companion(dataset));
    Ok(load_clip(&path)
        .with_context(|| format!("loading skeleton from {}", path.display()))?
        .skeleton()
        .clone())
}

pub fn train(a: &TrainCommand) -> Result<()> {
    let config = a.train.config()?;
    println!("{}", describe(&config));
    let dataset = load_dataset(&a.dataset)?;
    let skeleton = load_skeleton(&a.dataset, a.skeleton.as_deref())?;
    let model_config = a.model.config(skeleton.joint_count());
    let model = initial_model(&dataset, model_config, skeleton, config.seed)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let out = train_to_dir(&dataset, model, config, &a.out_dir)?;
    if let Some(last) = out.records.last() {
        println!("step {}: {}", last.step, last.csv_row());
    }
    println!("checkpoint {}", out.checkpoint.display());
    println!("losses {}", out.loss_csv.display());
    Ok(())
}

fn engine_config(smoothing: Option<f64>) -> EngineConfig {
    EngineConfig {
        smoothing,
        ..EngineConfig::evaluation()
    }
}

fn check_skeleton(model: &Model, clip: &MotionClip) -> Result<()> {
    if model.skeleton != *clip.skeleton() {
        bail!(
            "skeleton mismatch: clip '{}' ({} joints) does not use the checkpoint's skeleton ({} joints)",
            clip.name,
            clip.skeleton().joint_count(),
            model.skeleton.joint_count()
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// checkpoint, optionally labelled as PATH=LABEL; repeatable
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<String>,
    /// BVH files or directories of test clips
    #[arg(long, required = true, num_args = 1..)]
    pub clips: Vec<PathBuf>,
    /// evaluate only clips of this subject
    #[arg(long)]
    pub test_subject: Option<u32>,
    /// report CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// output smoothing factor during replay; off by default
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub sequential: bool,
}

pub fn load_test_clips(paths: &[PathBuf], subject: Option<u32>) -> Result<Vec<MotionClip>> {
    let files: Vec<PathBuf> = collect_bvh(paths)?
        .into_iter()
        .filter(|p| subject_matches(p, subject))
        .collect();
    if files.is_empty() {
        bail!("no BVH test clips selected");
    }
    files.iter().map(|p| load_clip(p)).collect()
}

pub fn eval(a: &EvalArgs) -> Result<Vec<EvalReport>> {
    let clips = load_test_clips(&a.clips, a.test_subject)?;
    let mut reports = Vec::new();
    for entry in &a.checkpoints {
        let (path, label) = match entry.split_once('=') {
            Some((p, l)) => (PathBuf::from(p), l.to_string()),
            None => {
                let p = PathBuf::from(entry);
                let l = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (p, l)
            }
        };
        let model = load_checkpoint(&path, None).with_context(|| format!("loading {}", path.display()))?;
        for c in &clips {
            check_skeleton(&model, c)?;
        }
        let report = eval::evaluate(
            Arc::new(model),
            &clips,
            &label,
            engine_config(a.smoothing),
            execution(a.sequential),
        )?;
        reports.push(report);
    }
    println!("{}", eval::REPORT_CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_row());
    }
    if let Some(out) = &a.out {
        eval::write_report_csv(&reports, out)?;
    }
    Ok(reports)
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// training dataset written by `preprocess`
    pub dataset: PathBuf,
    /// BVH files or directories of test clips
    #[arg(long, required = true, num_args = 1..)]
    pub clips: Vec<PathBuf>,
    #[arg(long)]
    pub test_subject: Option<u32>,
    #[arg(long)]
    pub skeleton: Option<PathBuf>,
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let config = a.train.config()?;
    println!("{}", describe(&config));
    let dataset = load_dataset(&a.dataset)?;
    let skeleton = load_skeleton(&a.dataset, a.skeleton.as_deref())?;
    let clips = load_test_clips(&a.clips, a.test_subject)?;
    if let Some(c) = clips.iter().find(|c| c.skeleton() != &skeleton) {
        bail!("skeleton mismatch: test clip '{}' differs from the training skeleton", c.name);
    }
    let variants = eval::ablation_variants(a.model.config(skeleton.joint_count()), config.weights);
    let reports = eval::run_ablation(&dataset, &clips, &variants, &config, EngineConfig::evaluation())?;
    println!("{}", eval::REPORT_CSV_HEADER);
    for r in &reports {
        println!("{}", r.csv_row());
    }
    eval::write_report_csv(&reports, &a.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// source BVH clip providing the contact and facing inputs
    #[arg(long)]
    pub clip: PathBuf,
    /// generated BVH
    #[arg(long)]
    pub out: PathBuf,
    /// terrain JSON
    #[arg(long)]
    pub terrain: Option<PathBuf>,
    #[arg(long)]
    pub smoothing: Option<f64>,
}

pub fn replay_clip(a: &ReplayArgs) -> Result<MetricSums> {
    let model = load_checkpoint(&a.checkpoint, None).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let clip = load_clip(&a.clip)?;
    check_skeleton(&model, &clip)?;
    let terrain = a.terrain.as_deref().map(Terrain::load).transpose()?;
    let trace = extract_trace(&clip);
    let rollout = replay(Arc::new(model), &clip, &trace, engine_config(a.smoothing), terrain)?;
    fs::write(&a.out, write_bvh(&rollout.clip)).with_context(|| format!("writing {}", a.out.display()))?;
    let sums = MetricSums::compute(&rollout.clip, &clip, &trace, rollout.first_generated..clip.len())?;
    let show = |p: eval::Pooled| eval::Metric(p.mean().map(|v| v * 100.0));
    println!(
        "frames {} FCPE_cm {} FCTE_pct {} MPJPE_cm {} FS_cm {}",
        clip.len().saturating_sub(rollout.first_generated),
        show(sums.fcpe),
        show(sums.fcte),
        show(sums.mpjpe),
        show(sums.fs)
    );
    Ok(sums)
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub terrain: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = crate::server::DEFAULT_PORT)]
    pub port: u16,
    /// directory of UI assets served over plain HTTP
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// meters per touch-region side
    #[arg(long, default_value_t = 1.5)]
    pub region_scale: f64,
    #[arg(long, default_value_t = 0.7)]
    pub smoothing: f64,
    #[arg(long)]
    pub no_smoothing: bool,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint, None).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let terrain = a.terrain.as_deref().map(Terrain::load).transpose()?;
    if let Some(dir) = &a.ui_dir {
        if !dir.is_dir() {
            bail!("UI directory {} does not exist", dir.display());
        }
    }
    let engine = EngineConfig {
        region_scale: a.region_scale,
        smoothing: (!a.no_smoothing).then_some(a.smoothing),
        ..EngineConfig::default()
    };
    let server = Server::bind(
        (a.host.as_str(), a.port),
        ServeConfig {
            model: Arc::new(model),
            engine,
            terrain,
            ui_dir: a.ui_dir.clone(),
        },
    )?;
    println!("listening on {}", server.local_addr()?);
    server.run()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// output BVH
    pub out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub seconds: f64,
    /// m/s
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// rad/s
    #[arg(long, default_value_t = 0.0)]
    pub turn_rate: f64,
    /// stride period in seconds
    #[arg(long, default_value_t = 1.0)]
    pub period: f64,
    /// use the 22-joint humanoid instead of the 8-joint biped
    #[arg(long)]
    pub humanoid: bool,
}

pub fn synth_walk(a: &SynthArgs) -> Result<()> {
    let params = WalkParams {
        duration: a.seconds,
        speed: a.speed,
        turn_rate: a.turn_rate,
        period: a.period,
        ..WalkParams::default()
    };
    let clip = if a.humanoid {
        synth::walk_cycle_on(&synth::humanoid_skeleton(), &params)
    } else {
        synth::walk_cycle(&params)
    };
    fs::write(&a.out, write_bvh(&clip)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} frames to {}", clip.len(), a.out.display());
    Ok(())
}
