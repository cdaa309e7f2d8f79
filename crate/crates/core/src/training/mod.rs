//! Teacher-forced training: batch gradients, AdamW and the training loop.

pub mod losses;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use losses::{
    loss_contact, loss_contact_transform, loss_dir, loss_fk, loss_rec, record_losses, sample_losses, total_loss,
    LossTargets, LossTerms, LossVars, LossWeights,
};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::motion::features::{decode_target, AvatarState, FeatureLayout, TrainingSample};
use crate::motion::{compute_normalization, Dataset};
use crate::network::{save_checkpoint, Model, ModelConfig};
use crate::par::{self, Execution};
use crate::skeleton::Skeleton;

/// Samples per gradient chunk. Fixed so that the summation order, and with
/// it every bit of the result, is independent of the thread count.
pub const GRADIENT_CHUNK: usize = 32;
const GRADIENT_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    /// Ground-truth histories only.
    TeacherForcing,
    /// With a probability that ramps linearly from 0 after `warmup` steps to
    /// `probability` at `warmup + ramp`, a sample's history is replaced by a
    /// free-running rollout of the current model over up to `horizon`
    /// preceding frames. Targets stay ground truth.
    Scheduled {
        probability: f64,
        horizon: usize,
        warmup: usize,
        ramp: usize,
    },
}

impl SamplingMode {
    /// Swap probability at `step`.
    pub fn probability_at(&self, step: usize) -> f64 {
        match *self {
            SamplingMode::TeacherForcing => 0.0,
            SamplingMode::Scheduled {
                probability,
                warmup,
                ramp,
                ..
            } => {
                if step < warmup {
                    0.0
                } else if ramp == 0 {
                    probability
                } else {
                    probability * ((step - warmup) as f64 / ramp as f64).min(1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub sampling: SamplingMode,
    /// loss terms are averaged over this many steps per log record
    pub log_every: usize,
    /// 0 disables periodic checkpoints
    pub checkpoint_every: usize,
    /// the learning rate is halved this many times at evenly spaced steps;
    /// 0 keeps it constant
    pub lr_halvings: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 2.5e-3,
            batch_size: 256,
            steps: 10_000,
            seed: 0,
            weights: LossWeights::default(),
            sampling: SamplingMode::TeacherForcing,
            log_every: 10,
            checkpoint_every: 0,
            lr_halvings: 0,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Step size used at `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let stage = (step * (self.lr_halvings + 1)) / self.steps.max(1);
        self.learning_rate * 0.5f64.powi(stage.min(self.lr_halvings) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch size and log interval must be at least 1".into()));
        }
        if let SamplingMode::Scheduled {
            probability, horizon, ..
        } = self.sampling
        {
            if !(0.0..=1.0).contains(&probability) {
                return Err(Error::Config(format!("sampling probability {probability} outside [0, 1]")));
            }
            if horizon == 0 {
                return Err(Error::Config("rollout horizon must be at least 1".into()));
            }
        }
        LossWeights::from_array(self.weights.as_array()).map(|_| ())
    }
}

/// AdamW with decoupled weight decay: `θ ← θ(1 − lr·wd)` followed by the
/// bias-corrected Adam update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(shapes: &[Vec<f64>], lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() || params[i].len() != g.len() {
                return Err(Error::Shape(format!("tensor {i} changed size")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step: self.t as usize,
                    message: format!("gradient of tensor {i}, element {j} is {}", g[j]),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// A sample ready for the loss graph.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: Vec<f64>,
    pub targets: LossTargets,
}

impl PreparedSample {
    pub fn new(model: &Model, sample: &TrainingSample) -> Result<Self> {
        Ok(PreparedSample {
            input: model.normalize_input(&sample.input)?,
            targets: LossTargets::new(&model.layout(), &model.normalization, sample),
        })
    }
}

/// Mean loss terms and mean parameter gradients of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub terms: LossTerms,
    pub total: f64,
    pub grads: Vec<Vec<f64>>,
}

struct Partial {
    terms: [f64; 5],
    total: f64,
    grads: Vec<Vec<f64>>,
}

fn chunk_gradient(model: &Model, batch: &[&PreparedSample], weights: &LossWeights) -> Partial {
    let layout = model.layout();
    let mut grads = model.params.zeros_like();
    let mut terms = [0.0; 5];
    let mut total = 0.0;
    for s in batch {
        let mut tape = Tape::new(&model.params.data);
        let x = tape.input(s.input.clone());
        let f = model.forward(&mut tape, x);
        let vars = record_losses(
            &mut tape,
            &layout,
            &model.skeleton,
            &model.normalization,
            f.output,
            &s.targets,
            weights,
        );
        for (acc, t) in terms.iter_mut().zip(vars.terms(&tape).as_array()) {
            *acc += t;
        }
        total += tape.scalar(vars.total);
        tape.backward(vars.total, &mut grads);
    }
    Partial { terms, total, grads }
}

/// Gradient of the mean weighted loss over `batch`. Chunks of
/// [`GRADIENT_CHUNK`] samples are reduced in order, so both execution modes
/// produce the same bits.
pub fn batch_gradient(
    model: &Model,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    exec: Execution,
) -> BatchGradient {
    let init = Partial {
        terms: [0.0; 5],
        total: 0.0,
        grads: model.params.zeros_like(),
    };
    let sum = par::map_fold_chunks(
        exec,
        batch,
        GRADIENT_CHUNK,
        GRADIENT_WINDOW,
        |c| chunk_gradient(model, c, weights),
        init,
        |mut acc, p| {
            for (a, t) in acc.terms.iter_mut().zip(p.terms) {
                *a += t;
            }
            acc.total += p.total;
            for (a, g) in acc.grads.iter_mut().zip(&p.grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            acc
        },
    );
    let inv = 1.0 / batch.len().max(1) as f64;
    BatchGradient {
        terms: LossTerms::from_array(sum.terms.map(|t| t * inv)),
        total: sum.total * inv,
        grads: sum
            .grads
            .into_iter()
            .map(|g| g.into_iter().map(|x| x * inv).collect())
            .collect(),
    }
}

/// Mean loss terms of a sample set without gradients.
pub fn evaluate_losses(model: &Model, samples: &[PreparedSample], weights: &LossWeights, exec: Execution) -> LossTerms {
    let layout = model.layout();
    let per = par::map(exec, samples, |s| {
        let mut tape = Tape::new(&model.params.data);
        let x = tape.input(s.input.clone());
        let f = model.forward(&mut tape, x);
        let vars = record_losses(
            &mut tape,
            &layout,
            &model.skeleton,
            &model.normalization,
            f.output,
            &s.targets,
            weights,
        );
        vars.terms(&tape).as_array()
    });
    let mut sum = [0.0; 5];
    for p in &per {
        for (a, t) in sum.iter_mut().zip(p) {
            *a += t;
        }
    }
    let inv = 1.0 / samples.len().max(1) as f64;
    LossTerms::from_array(sum.map(|t| t * inv))
}

/// Builds the initial model for a dataset: normalization statistics come
/// from the training samples, weights from `seed`.
pub fn initial_model(dataset: &Dataset, config: ModelConfig, skeleton: Skeleton, seed: u64) -> Result<Model> {
    if dataset.layout.k != config.k {
        return Err(Error::Config(format!(
            "dataset was built with k = {} but the model uses k = {}",
            dataset.layout.k, config.k
        )));
    }
    if dataset.layout.joints != config.joints {
        return Err(Error::Shape(format!(
            "dataset has {} joints, model has {}",
            dataset.layout.joints, config.joints
        )));
    }
    let norm = compute_normalization(&dataset.samples)?;
    Model::new(config, skeleton, norm, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub wall_ms: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,L_rec,L_FK,L_dir,L_ct,L_ct_trans,total,wall_ms";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.step, t.rec, t.fk, t.dir, t.ct, t.ct_trans, self.total, self.wall_ms
        )
    }
}

/// When sample `i` directly follows sample `i − 1` of the same clip, the
/// predecessor's index and the frame `{t}` expressed in `{t−1}`.
fn predecessor_links(layout: &FeatureLayout, samples: &[TrainingSample]) -> Vec<Option<(usize, crate::geometry::AvatarFrame)>> {
    const TOL: f64 = 1e-4;
    let k = layout.k;
    let mut links = vec![None; samples.len()];
    if k == 0 {
        return links;
    }
    for i in 1..samples.len() {
        let (prev, cur) = (&samples[i - 1], &samples[i]);
        let r = &prev.target[layout.target_root()];
        let f = &prev.input[layout.facing()];
        let frame = crate::geometry::AvatarFrame::new(Vec2::new(r[0], r[1]), f[0].atan2(f[1]));
        let prev_root = &prev.input[layout.root(k)];
        let mapped = frame.point_xz_to_local([prev_root[0], prev_root[1]]);
        let seen = &cur.input[layout.root(k - 1)];
        let same_history = prev.input[layout.state(k)]
            .iter()
            .zip(&cur.input[layout.state(k - 1)])
            .all(|(a, b)| a.is_finite() && b.is_finite());
        if same_history && (mapped[0] - seen[0]).abs() < TOL && (mapped[1] - seen[1]).abs() < TOL {
            links[i] = Some((i - 1, frame));
        }
    }
    links
}

/// Input of sample `i` with its history generated by rolling `predict` (raw
/// input to raw target) forward from the ground truth up to `depth` linked
/// frames earlier. Foot and facing inputs are kept; history poses and root
/// positions are shifted and re-expressed through the ground-truth frame
/// links. `None` when `i` has no predecessor.
pub fn rollout_input(
    layout: &FeatureLayout,
    skeleton: &Skeleton,
    samples: &[TrainingSample],
    links: &[Option<(usize, crate::geometry::AvatarFrame)>],
    i: usize,
    depth: usize,
    predict: impl Fn(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<Option<Vec<f64>>> {
    let mut chain = vec![i];
    while chain.len() <= depth {
        match links.get(*chain.last().expect("chain is never empty")).copied().flatten() {
            Some((prev, _)) => chain.push(prev),
            None => break,
        }
    }
    if chain.len() == 1 {
        return Ok(None);
    }
    chain.reverse();
    let (k, joints) = (layout.k, layout.joints);
    let mut x = samples[chain[0]].input.clone();
    for w in chain.windows(2) {
        let (prev, next) = (w[0], w[1]);
        let (_, frame) = links[next].expect("chain follows links");
        let decoded = decode_target(skeleton, layout, &predict(prev, &x)?)?;
        let mut y = samples[next].input.clone();
        let mut flat = Vec::with_capacity(layout.state_dim());
        for slot in 0..=k {
            let (state, root) = if slot < k {
                let r = &x[layout.root(slot + 1)];
                (AvatarState::from_slice(&x[layout.state(slot + 1)], joints), [r[0], r[1]])
            } else {
                (decoded.state.clone(), decoded.root)
            };
            flat.clear();
            state.in_frame(&frame)?.write_into(&mut flat);
            y[layout.state(slot)].copy_from_slice(&flat);
            y[layout.root(slot)].copy_from_slice(&frame.point_xz_to_local(root));
        }
        x = y;
    }
    Ok(Some(x))
}

/// Owns the model, optimizer and data order of one training run.
pub struct Trainer<'d> {
    pub model: Model,
    pub config: TrainConfig,
    dataset: &'d Dataset,
    prepared: Vec<PreparedSample>,
    links: Vec<Option<(usize, crate::geometry::AvatarFrame)>>,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d Dataset, model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.len() == 0 {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if dataset.layout != model.layout() {
            return Err(Error::Config(format!(
                "dataset layout (k = {}, J = {}) does not match the model (k = {}, J = {})",
                dataset.layout.k, dataset.layout.joints, model.config.k, model.config.joints
            )));
        }
        let prepared = dataset
            .samples
            .iter()
            .map(|s| PreparedSample::new(&model, s))
            .collect::<Result<Vec<_>>>()?;
        let links = match config.sampling {
            SamplingMode::TeacherForcing => Vec::new(),
            SamplingMode::Scheduled { .. } => predecessor_links(&dataset.layout, &dataset.samples),
        };
        let optimizer = AdamW::new(&model.params.data, config.learning_rate, config.weight_decay);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            dataset,
            prepared,
            links,
            optimizer,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn batch_size(&self) -> usize {
        self.config.batch_size.min(self.prepared.len())
    }

    /// Next batch of sample indices; epochs are ⌈N/B⌉ batches of a fresh
    /// permutation, the last one possibly short.
    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.prepared.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size()).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// One optimizer step. Returns the batch-mean loss terms.
    pub fn step(&mut self) -> Result<BatchGradient> {
        let batch = self.next_batch();
        let mut swapped = Vec::new();
        if let SamplingMode::Scheduled { horizon, .. } = self.config.sampling {
            let p = self.config.sampling.probability_at(self.step);
            let mut jobs = Vec::new();
            for &i in &batch {
                if self.rng.gen::<f64>() < p {
                    jobs.push((i, self.rng.gen_range(1..=horizon)));
                }
            }
            let (model, samples, links) = (&self.model, &self.dataset.samples, &self.links);
            let layout = model.layout();
            let results = par::map(self.config.execution, &jobs, |&(i, depth)| {
                let input = rollout_input(&layout, &model.skeleton, samples, links, i, depth, |_, x| {
                    model.predict(x).map(|p| p.target)
                })?;
                input.map(|x| model.normalize_input(&x)).transpose()
            });
            for (&(i, _), r) in jobs.iter().zip(results) {
                if let Some(input) = r? {
                    swapped.push((
                        i,
                        PreparedSample {
                            input,
                            targets: self.prepared[i].targets.clone(),
                        },
                    ));
                }
            }
        }
        let refs: Vec<&PreparedSample> = batch
            .iter()
            .map(|&i| match swapped.iter().find(|(j, _)| *j == i) {
                Some((_, s)) => s,
                None => &self.prepared[i],
            })
            .collect();
        let g = batch_gradient(&self.model, &refs, &self.config.weights, self.config.execution);
        if !g.total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                message: format!("loss is {}", g.total),
            });
        }
        self.optimizer.lr = self.config.learning_rate_at(self.step);
        self.optimizer.step(&mut self.model.params.data, &g.grads).map_err(|e| match e {
            Error::Diverged { message, .. } => Error::Diverged {
                step: self.step,
                message,
            },
            other => other,
        })?;
        self.step += 1;
        Ok(g)
    }

    /// Runs `config.steps` steps, reporting a record every `log_every` steps.
    /// On divergence the model is left at its last good parameters.
    pub fn run(&mut self, mut on_log: impl FnMut(&LogRecord, &Model) -> Result<()>) -> Result<Vec<LogRecord>> {
        let start = Instant::now();
        let mut acc = [0.0; 5];
        let mut acc_total = 0.0;
        let mut n = 0usize;
        let mut records = Vec::new();
        while self.step < self.config.steps {
            let last_good = self.model.params.data.clone();
            let g = match self.step() {
                Ok(g) => g,
                Err(e) => {
                    self.model.params.data = last_good;
                    return Err(e);
                }
            };
            for (a, t) in acc.iter_mut().zip(g.terms.as_array()) {
                *a += t;
            }
            acc_total += g.total;
            n += 1;
            if n == self.config.log_every || self.step == self.config.steps {
                let inv = 1.0 / n as f64;
                let record = LogRecord {
                    step: self.step,
                    terms: LossTerms::from_array(acc.map(|t| t * inv)),
                    total: acc_total * inv,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                on_log(&record, &self.model)?;
                records.push(record);
                acc = [0.0; 5];
                acc_total = 0.0;
                n = 0;
            }
        }
        Ok(records)
    }
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub records: Vec<LogRecord>,
}

/// Trains and writes `losses.csv`, periodic `checkpoint_<step>.twck` files
/// and the final `model.twck` into `dir`. On divergence the last good
/// parameters are saved as `last_good.twck` before the error is returned.
pub fn train_to_dir(dataset: &Dataset, model: Model, config: TrainConfig, dir: &Path) -> Result<TrainOutputs> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loss_csv = dir.join("losses.csv");
    let mut csv = fs::File::create(&loss_csv).map_err(|e| Error::io(&loss_csv, e))?;
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&loss_csv, e))?;
    let every = config.checkpoint_every;
    let mut trainer = Trainer::new(dataset, model, config)?;
    let result = trainer.run(|r, model| {
        writeln!(csv, "{}", r.csv_row()).map_err(|e| Error::io(&loss_csv, e))?;
        log::info!("step {} total {:.6e} rec {:.4e}", r.step, r.total, r.terms.rec);
        if every > 0 && r.step % every == 0 {
            save_checkpoint(model, &dir.join(format!("checkpoint_{}.twck", r.step)))?;
        }
        Ok(())
    });
    csv.flush().map_err(|e| Error::io(&loss_csv, e))?;
    match result {
        Ok(records) => {
            let checkpoint = dir.join("model.twck");
            save_checkpoint(&trainer.model, &checkpoint)?;
            Ok(TrainOutputs {
                checkpoint,
                loss_csv,
                records,
            })
        }
        Err(e) => {
            let path = dir.join("last_good.twck");
            save_checkpoint(&trainer.model, &path)?;
            log::error!("training stopped: {e}; last good parameters in {}", path.display());
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::build_samples;
    use crate::synth::{self, WalkParams};

    fn setup(k: usize) -> (Dataset, Model) {
        let clip = synth::walk_cycle(&WalkParams::default());
        let config = ModelConfig { k, ..ModelConfig::tiny(clip.skeleton().joint_count()) };
        let ds = Dataset::new(config.layout(), build_samples(&clip, k));
        let model = initial_model(&ds, config, clip.skeleton().clone(), 5).unwrap();
        (ds, model)
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![vec![1.0, -2.0]];
        let mut opt = AdamW::new(&p, 0.1, 0.0);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![vec![1.0, -2.0]]);

        let mut opt = AdamW::new(&p, 0.1, 0.0);
        opt.step(&mut p, &[vec![1.0, 1.0]]).unwrap();
        assert!((p[0][0] - 0.9).abs() < 1e-7 && (p[0][1] + 2.1).abs() < 1e-7);

        let mut q = vec![vec![2.0]];
        let mut opt = AdamW::new(&q, 0.1, 0.5);
        opt.step(&mut q, &[vec![0.0]]).unwrap();
        assert!((q[0][0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);

        let err = opt.step(&mut q, &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn sequential_and_parallel_gradients_are_identical() {
        let (ds, model) = setup(2);
        let prepared: Vec<PreparedSample> = ds.samples.iter().map(|s| PreparedSample::new(&model, s).unwrap()).collect();
        let refs: Vec<&PreparedSample> = prepared.iter().collect();
        let w = LossWeights::default();
        let a = batch_gradient(&model, &refs, &w, Execution::Sequential);
        let b = batch_gradient(&model, &refs, &w, Execution::Parallel);
        assert_eq!(a, b);
        let e = evaluate_losses(&model, &prepared, &w, Execution::Sequential);
        for (x, y) in e.as_array().iter().zip(a.terms.as_array()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn k_mismatch_is_refused() {
        let (ds, model) = setup(2);
        let other = ModelConfig { k: 3, ..model.config };
        assert!(matches!(initial_model(&ds, other, model.skeleton.clone(), 0), Err(Error::Config(_))));
        let m3 = setup(3).1;
        assert!(Trainer::new(&ds, m3, TrainConfig::default()).is_err());
    }

    #[test]
    fn epochs_cover_every_sample_once() {
        let (ds, model) = setup(2);
        let config = TrainConfig {
            batch_size: 7,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&ds, model, config).unwrap();
        let n = ds.len();
        let mut seen = Vec::new();
        for _ in 0..n.div_ceil(7) {
            seen.extend(t.next_batch());
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn short_run_lowers_the_loss_and_is_deterministic() {
        let (ds, model) = setup(2);
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 40,
            log_every: 10,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let a = train_to_dir(&ds, model.clone(), config.clone(), &dir.path().join("a")).unwrap();
        let b = train_to_dir(&ds, model, config, &dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&a.checkpoint).unwrap(), fs::read(&b.checkpoint).unwrap());
        assert_eq!(a.records.len(), 4);
        assert!(a.records[3].total < a.records[0].total);
        let csv = fs::read_to_string(&a.loss_csv).unwrap();
        assert_eq!(csv.lines().next().unwrap(), LOSS_CSV_HEADER);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn scheduled_sampling_links_consecutive_frames() {
        let (ds, model) = setup(2);
        let links = predecessor_links(&ds.layout, &ds.samples);
        assert!(links[0].is_none());
        assert!(links[1..].iter().all(Option::is_some));
        let mut both = ds.samples.clone();
        both.extend(ds.samples.clone());
        let links = predecessor_links(&ds.layout, &both);
        assert!(links[ds.len()].is_none());

        let config = TrainConfig {
            sampling: SamplingMode::Scheduled {
                probability: 1.0,
                horizon: 4,
                warmup: 1,
                ramp: 0,
            },
            batch_size: 8,
            steps: 3,
            log_every: 1,
            ..TrainConfig::default()
        };
        assert_eq!(config.sampling.probability_at(0), 0.0);
        assert_eq!(config.sampling.probability_at(1), 1.0);
        let mut t = Trainer::new(&ds, model, config).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.steps_done(), 3);
    }

    #[test]
    fn learning_rate_halves_in_even_stages() {
        let c = TrainConfig {
            learning_rate: 1.0,
            steps: 100,
            lr_halvings: 3,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = [0, 24, 25, 50, 75, 99].iter().map(|&s| c.learning_rate_at(s)).collect();
        assert_eq!(lrs, [1.0, 1.0, 0.5, 0.25, 0.125, 0.125]);
        assert_eq!(TrainConfig::default().learning_rate_at(9999), 1e-4);
    }

    #[test]
    fn sampling_probability_ramps() {
        let s = SamplingMode::Scheduled {
            probability: 0.8,
            horizon: 1,
            warmup: 10,
            ramp: 20,
        };
        assert_eq!(s.probability_at(9), 0.0);
        assert_eq!(s.probability_at(20), 0.4);
        assert_eq!(s.probability_at(100), 0.8);
        assert_eq!(SamplingMode::TeacherForcing.probability_at(100), 0.0);
    }

    #[test]
    fn rolling_out_ground_truth_reproduces_the_history() {
        let (ds, _) = setup(2);
        let layout = ds.layout;
        let links = predecessor_links(&layout, &ds.samples);
        let clip = synth::walk_cycle(&WalkParams::default());
        let oracle = |m: usize, _: &[f64]| Ok(ds.samples[m].target.clone());
        for (i, depth) in [(3usize, 1usize), (10, 4), (30, 30)] {
            let x = rollout_input(&layout, clip.skeleton(), &ds.samples, &links, i, depth, oracle)
                .unwrap()
                .unwrap();
            for (a, b) in x.iter().zip(&ds.samples[i].input) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        assert!(rollout_input(&layout, clip.skeleton(), &ds.samples, &links, 0, 3, oracle)
            .unwrap()
            .is_none());
    }
}
