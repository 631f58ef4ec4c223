//! Two-stage optimization: paired pretraining on synthetic triplets, then
//! unpaired adversarial fine-tuning on real images.
//!
//! Every random draw is derived from `(seed, stage, iteration)`, so a run's
//! RNG state is fully described by its seed and iteration counter and a
//! resumed run replays the uninterrupted one exactly.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::{Augment, Batch, ImageSet};
use crate::error::{Error, Result};
use crate::network::checkpoint::{CheckpointFile, WEIGHTS_GROUP};
use crate::network::{nhwc_to_nchw, Graph, Model, NetworkConfig, Weights};
use crate::objectives::{
    loss_adversarial_d, loss_adversarial_d_grad, loss_adversarial_g, loss_adversarial_g_grad, quadratic_loss,
    quadratic_loss_grad, stage_total, GeneratorVariant, LossComponents, LossValue, Stage, StageObjective,
};
use crate::seed::derive_seed;

/// Piecewise-constant learning rate: `(first_iteration, rate)` pairs with
/// strictly increasing breakpoints starting at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(u64, f64)>);

impl Default for LrSchedule {
    fn default() -> Self {
        Self(vec![(0, 1e-3), (70_000, 1e-4)])
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self(vec![(0, lr)])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.first().map(|p| p.0) != Some(0) {
            return Err(Error::InvalidParameter("learning-rate schedule must start at iteration 0".into()));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidParameter("schedule breakpoints must increase".into()));
        }
        if self.0.iter().any(|p| !(p.1.is_finite() && p.1 > 0.0)) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// Rate in effect at `iteration` (right-continuous steps).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.0.iter().rev().find(|(start, _)| *start <= iteration).map(|p| p.1).unwrap_or(self.0[0].1)
    }
}

/// Which real images the discriminator treats as "real".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealPool {
    #[default]
    Clean,
    CleanAndRainy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    pub patch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub max_iter: u64,
    pub finetune_iter: u64,
    pub finetune_lr: f64,
    pub d_steps_per_g: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints (a final one is still written).
    pub checkpoint_every: u64,
    pub augment_flip: bool,
    pub pretrain_objective: StageObjective,
    pub finetune_objective: StageObjective,
    pub generator_variant: GeneratorVariant,
    pub finetune_encoder: bool,
    pub real_pool: RealPool,
    pub loss_tail: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            patch: 224,
            momentum: 0.9,
            weight_decay: 1e-6,
            lr_schedule: LrSchedule::default(),
            max_iter: 100_000,
            finetune_iter: 10_000,
            finetune_lr: 1e-4,
            d_steps_per_g: 1,
            seed: 0,
            checkpoint_every: 5_000,
            augment_flip: false,
            pretrain_objective: StageObjective::pretrain(),
            finetune_objective: StageObjective::finetune(),
            generator_variant: GeneratorVariant::NonSaturating,
            finetune_encoder: true,
            real_pool: RealPool::Clean,
            loss_tail: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr_schedule.validate()?;
        if self.batch == 0 || self.d_steps_per_g == 0 {
            return Err(Error::InvalidParameter("batch and d_steps_per_g must be at least 1".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(32) {
            return Err(Error::InvalidParameter(format!("patch {} is not a multiple of 32", self.patch)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter("momentum must be in [0, 1), weight_decay >= 0".into()));
        }
        if !(self.finetune_lr.is_finite() && self.finetune_lr > 0.0) {
            return Err(Error::InvalidParameter("finetune_lr must be positive".into()));
        }
        if self.pretrain_objective.stage != Stage::Pretrain || self.finetune_objective.stage != Stage::Finetune {
            return Err(Error::StageInvariant("objective stages are swapped".into()));
        }
        self.pretrain_objective.validate()?;
        self.finetune_objective.validate()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// SGD with momentum, `v ← μv − lr(g + λw)`, `w ← w + v`. Weight decay is
/// applied to convolution kernels only, never to biases.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay }
    }

    /// Updates every layer in `grads` accepted by `trainable`.
    pub fn step(
        &self,
        weights: &mut Weights,
        velocity: &mut Weights,
        grads: &Weights,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (name, g) in grads.iter() {
            if !trainable(name) {
                continue;
            }
            let (Some(p), Some(v)) = (weights.get_mut(name), velocity.get_mut(name)) else {
                continue;
            };
            Zip::from(&mut p.weight).and(&mut v.weight).and(&g.weight).for_each(|w, v, &g| {
                *v = mu * *v - lr * (g + wd * *w);
                *w += *v;
            });
            Zip::from(&mut p.bias).and(&mut v.bias).and(&g.bias).for_each(|b, v, &g| {
                *v = mu * *v - lr * g;
                *b += *v;
            });
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub stage: Stage,
    pub lr: f64,
    pub components: std::collections::BTreeMap<String, f64>,
    pub weights: crate::objectives::LossWeights,
    pub total: f64,
    pub ms_per_iter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator_accuracy: Option<f64>,
}

impl LogRecord {
    /// Recomputes `Σ weight·component`.
    pub fn replay_total(&self) -> f64 {
        self.components.iter().map(|(k, v)| self.weights.get(k).unwrap_or(f64::NAN) * v).sum()
    }
}

/// Append-only JSON-lines training log.
pub struct TrainLog {
    out: Box<dyn Write + Send>,
}

impl TrainLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(BufWriter::new(file))))
    }

    pub fn log_iteration(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::other)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::ManifestParse { line: i + 1, reason: e.to_string() }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Iterations completed in `stage`.
    pub iteration: u64,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub loss_tail: Vec<LossValue>,
    /// Consecutive fine-tune iterations with discriminator accuracy above 0.95.
    #[serde(default)]
    pub confident_streak: u64,
}

pub const MOMENTUM_G: &str = "momentum_g";
pub const MOMENTUM_D: &str = "momentum_d";

/// Full resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub momentum_g: Weights,
    pub momentum_d: Weights,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = CheckpointFile::from_model(&self.model);
        file.groups.insert(MOMENTUM_G.into(), self.momentum_g.clone());
        file.groups.insert(MOMENTUM_D.into(), self.momentum_d.clone());
        file.state = serde_json::to_value(&self.state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = CheckpointFile::read(path)?;
        let state: TrainState = serde_json::from_value(file.state.clone())
            .map_err(|e| Error::Checkpoint(format!("not a training checkpoint: {e}")))?;
        let weights = file.groups.remove(WEIGHTS_GROUP).ok_or_else(|| Error::Checkpoint("no weights".into()))?;
        let take =
            |file: &mut CheckpointFile, name: &str| file.groups.remove(name).unwrap_or_else(|| weights.zeros_like());
        let momentum_g = take(&mut file, MOMENTUM_G);
        let momentum_d = take(&mut file, MOMENTUM_D);
        let model = Model::new(file.network, weights)?;
        Ok(Self { model, momentum_g, momentum_d, state })
    }
}

/// What one optimization step reports back to [`Trainer::run_stage`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossValue,
    pub discriminator_loss: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
}

pub const MODE_COLLAPSE_STREAK: u64 = 500;

fn is_generator_layer(name: &str, finetune_encoder: bool) -> bool {
    name.starts_with("dec_b") || name.starts_with("comp.") || (finetune_encoder && name.starts_with("enc"))
}

fn is_discriminator_layer(name: &str) -> bool {
    name.starts_with("disc.")
}

/// Drives both training stages, optionally writing checkpoints and a log.
pub struct Trainer {
    pub cfg: TrainConfig,
    out_dir: Option<PathBuf>,
    log: Option<TrainLog>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, out_dir: None, log: None, last_checkpoint: None })
    }

    /// Writes checkpoints into `dir` and appends the log to `dir/train_log.jsonl`.
    pub fn with_output_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        self.log = Some(TrainLog::append_to(&dir.join("train_log.jsonl"))?);
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn with_log(mut self, log: TrainLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    pub fn fresh_checkpoint(&self, net_cfg: &NetworkConfig) -> Result<Checkpoint> {
        let model = Model::init(net_cfg.clone())?;
        Ok(Checkpoint {
            momentum_g: model.weights.zeros_like(),
            momentum_d: model.weights.zeros_like(),
            model,
            state: TrainState {
                stage: Stage::Pretrain,
                iteration: 0,
                seed: self.cfg.seed,
                config_hash: self.cfg.hash(),
                config: self.cfg.clone(),
                loss_tail: Vec::new(),
                confident_streak: 0,
            },
        })
    }

    /// Pretrains a freshly initialized model for `max_iter` iterations.
    pub fn pretrain(&mut self, paired: &ImageSet, net_cfg: &NetworkConfig) -> Result<Checkpoint> {
        let ckpt = self.fresh_checkpoint(net_cfg)?;
        self.resume_pretrain(ckpt, paired)
    }

    /// Continues pretraining from `ckpt` up to `max_iter`.
    pub fn resume_pretrain(&mut self, ckpt: Checkpoint, paired: &ImageSet) -> Result<Checkpoint> {
        if ckpt.state.stage != Stage::Pretrain {
            return Err(Error::Checkpoint("checkpoint is not from pretraining".into()));
        }
        if paired.is_empty() {
            return Err(Error::InvalidParameter("paired dataset is empty".into()));
        }
        if paired.kind != crate::datastore::DatasetKind::PairedTriplets {
            return Err(Error::InvalidParameter("pretraining needs paired triplets".into()));
        }
        self.check_patch(&ckpt.model.config)?;
        let cfg = self.cfg.clone();
        let sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let augment = Augment { horizontal_flip: cfg.augment_flip };
        self.run_stage(ckpt, |ckpt, iter, lr| {
            let batch = paired.sample_batch(cfg.batch, cfg.patch, derive_seed(cfg.seed, iter), augment)?;
            let (loss, grads) = pretrain_step(&ckpt.model, &batch, &cfg.pretrain_objective)?;
            if loss.total.is_finite() {
                sgd.step(&mut ckpt.model.weights, &mut ckpt.momentum_g, &grads, lr, |_| true);
            }
            Ok(StepReport { loss, discriminator_loss: None, discriminator_accuracy: None })
        })
    }

    /// Adversarially fine-tunes the background branch of a pretrained model.
    ///
    /// Each iteration takes `d_steps_per_g` discriminator steps on real
    /// images versus derained real rainy crops, then one generator step on
    /// `λ_adv·L_adv + λ_O·L_O`. The rain decoder and discriminator are frozen
    /// during the generator step.
    pub fn finetune(
        &mut self,
        mut ckpt: Checkpoint,
        real_rainy: &ImageSet,
        real_clean: &ImageSet,
    ) -> Result<Checkpoint> {
        if real_rainy.is_empty() || real_clean.is_empty() {
            return Err(Error::InvalidParameter("fine-tuning needs non-empty rainy and clean sets".into()));
        }
        self.check_patch(&ckpt.model.config)?;
        if ckpt.state.stage == Stage::Pretrain {
            ckpt.state = TrainState {
                stage: Stage::Finetune,
                iteration: 0,
                seed: self.cfg.seed,
                config_hash: self.cfg.hash(),
                config: self.cfg.clone(),
                loss_tail: Vec::new(),
                confident_streak: 0,
            };
            ckpt.momentum_g = ckpt.model.weights.zeros_like();
            ckpt.momentum_d = ckpt.model.weights.zeros_like();
        }
        let cfg = self.cfg.clone();
        let sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let augment = Augment { horizontal_flip: cfg.augment_flip };
        let stage_seed = derive_seed(cfg.seed, 0xF1E7);
        let patches = |set: &ImageSet, seed: u64| -> Result<Array4<f32>> {
            let b = set.sample_batch(cfg.batch, cfg.patch, seed, augment)?;
            Ok(nhwc_to_nchw(&b.rainy.or(b.background).expect("real batch has one role")))
        };

        self.run_stage(ckpt, |ckpt, iter, lr| {
            let iter_seed = derive_seed(stage_seed, iter);
            let mut d_loss = 0.0;
            let mut d_acc = 0.0;
            for k in 0..cfg.d_steps_per_g {
                let seed = derive_seed(iter_seed, k as u64);
                let rainy = patches(real_rainy, derive_seed(seed, 1))?;
                let real_seed = derive_seed(seed, 2);
                let real = match cfg.real_pool {
                    RealPool::Clean => patches(real_clean, real_seed)?,
                    RealPool::CleanAndRainy => {
                        let total = (real_clean.len() + real_rainy.len()) as u64;
                        let from_rainy = derive_seed(seed, 3) % total >= real_clean.len() as u64;
                        patches(if from_rainy { real_rainy } else { real_clean }, real_seed)?
                    }
                };
                let fake = background_only(&ckpt.model, rainy)?;
                let (loss, acc, grads) = discriminator_step(&ckpt.model, real, fake)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { iteration: iter, last_checkpoint: None });
                }
                sgd.step(&mut ckpt.model.weights, &mut ckpt.momentum_d, &grads, lr, is_discriminator_layer);
                d_loss += loss / cfg.d_steps_per_g as f64;
                d_acc += acc / cfg.d_steps_per_g as f64;
            }

            let rainy = patches(real_rainy, derive_seed(iter_seed, 0x6E))?;
            let (loss, grads) = generator_step(&ckpt.model, rainy, &cfg.finetune_objective, cfg.generator_variant)?;
            if loss.total.is_finite() {
                let trainable = |n: &str| is_generator_layer(n, cfg.finetune_encoder);
                sgd.step(&mut ckpt.model.weights, &mut ckpt.momentum_g, &grads, lr, trainable);
            }

            ckpt.state.confident_streak = if d_acc > 0.95 { ckpt.state.confident_streak + 1 } else { 0 };
            if ckpt.state.confident_streak == MODE_COLLAPSE_STREAK {
                log::warn!(
                    "discriminator accuracy above 0.95 for {MODE_COLLAPSE_STREAK} consecutive iterations \
                     (iteration {iter}); the generator may be collapsing"
                );
            }
            Ok(StepReport { loss, discriminator_loss: Some(d_loss), discriminator_accuracy: Some(d_acc) })
        })
    }

    /// The iteration loop shared by both stages: runs `step` until the stage's
    /// iteration budget is reached, then handles the learning rate, logging,
    /// loss tail, non-finite aborts and checkpoints. `step` receives the
    /// checkpoint, the iteration index and the learning rate.
    pub fn run_stage<F>(&mut self, mut ckpt: Checkpoint, mut step: F) -> Result<Checkpoint>
    where
        F: FnMut(&mut Checkpoint, u64, f64) -> Result<StepReport>,
    {
        let stage = ckpt.state.stage;
        let (end, weights) = match stage {
            Stage::Pretrain => (self.cfg.max_iter, self.cfg.pretrain_objective.weights),
            Stage::Finetune => (self.cfg.finetune_iter, self.cfg.finetune_objective.weights),
        };
        while ckpt.state.iteration < end {
            let iter = ckpt.state.iteration;
            let lr = match stage {
                Stage::Pretrain => self.cfg.lr_schedule.lr_at(iter),
                Stage::Finetune => self.cfg.finetune_lr,
            };
            let started = Instant::now();
            let report = match step(&mut ckpt, iter, lr) {
                Err(Error::NonFiniteLoss { .. }) => return Err(self.abort(iter)),
                other => other?,
            };
            if !report.loss.total.is_finite() || !ckpt.model.weights.is_finite() {
                return Err(self.abort(iter));
            }
            ckpt.state.iteration += 1;
            self.push_tail(&mut ckpt.state, &report.loss);
            let record = LogRecord {
                iter,
                stage,
                lr,
                components: report.loss.components,
                weights,
                total: report.loss.total,
                ms_per_iter: started.elapsed().as_secs_f64() * 1e3,
                discriminator_loss: report.discriminator_loss,
                discriminator_accuracy: report.discriminator_accuracy,
            };
            if let Some(log) = self.log.as_mut() {
                log.log_iteration(&record)?;
            }
            self.maybe_checkpoint(&ckpt, false)?;
        }
        self.maybe_checkpoint(&ckpt, true)?;
        Ok(ckpt)
    }

    fn check_patch(&self, net: &NetworkConfig) -> Result<()> {
        if net.patch != self.cfg.patch {
            return Err(Error::InvalidParameter(format!(
                "training patch {} differs from network patch {}",
                self.cfg.patch, net.patch
            )));
        }
        Ok(())
    }

    fn push_tail(&self, state: &mut TrainState, loss: &LossValue) {
        state.loss_tail.push(loss.clone());
        let excess = state.loss_tail.len().saturating_sub(self.cfg.loss_tail);
        state.loss_tail.drain(..excess);
    }

    fn abort(&mut self, iteration: u64) -> Error {
        if let Some(log) = self.log.as_mut() {
            let _ = log.flush();
        }
        Error::NonFiniteLoss { iteration, last_checkpoint: self.last_checkpoint.clone() }
    }

    fn maybe_checkpoint(&mut self, ckpt: &Checkpoint, last: bool) -> Result<()> {
        let due = self.cfg.checkpoint_every > 0 && ckpt.state.iteration.is_multiple_of(self.cfg.checkpoint_every);
        if !(due || last) {
            return Ok(());
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        if let Some(dir) = &self.out_dir {
            let stage = match ckpt.state.stage {
                Stage::Pretrain => "pretrain",
                Stage::Finetune => "finetune",
            };
            let path = if last {
                dir.join(format!("{stage}_final.ckpt"))
            } else {
                dir.join(format!("{stage}_{:07}.ckpt", ckpt.state.iteration))
            };
            ckpt.save(&path)?;
            self.last_checkpoint = Some(path);
        }
        Ok(())
    }
}

/// Pretraining objective over one paired batch and its parameter gradients.
pub fn pretrain_step(model: &Model, batch: &Batch, objective: &StageObjective) -> Result<(LossValue, Weights)> {
    let paired = |t: &Option<Array4<f32>>| {
        t.as_ref().map(nhwc_to_nchw).ok_or_else(|| Error::InvalidParameter("batch is not paired".into()))
    };
    let (rainy, background, rain) = (paired(&batch.rainy)?, paired(&batch.background)?, paired(&batch.rain)?);
    let reduction = objective.reduction;
    let mut g = Graph::new(&model.weights);
    let v = model.build_full(&mut g, rainy.clone())?;
    let comps = LossComponents {
        background: Some(quadratic_loss(g.value(v.background).view(), background.view(), reduction)? as f64),
        rain: Some(quadratic_loss(g.value(v.rain).view(), rain.view(), reduction)? as f64),
        reconstruction: Some(quadratic_loss(g.value(v.recomposed).view(), rainy.view(), reduction)? as f64),
        adversarial: None,
    };
    let loss = stage_total(objective, &comps)?;
    let w = objective.weights;
    let mut seeds = Vec::new();
    for (var, target, weight) in
        [(v.background, &background, w.background), (v.rain, &rain, w.rain), (v.recomposed, &rainy, w.reconstruction)]
    {
        if weight != 0.0 {
            let grad = quadratic_loss_grad(g.value(var).view(), target.view(), reduction)?;
            seeds.push((var, grad * weight as f32));
        }
    }
    let grads = if seeds.is_empty() { Weights::default() } else { g.backward(seeds).params };
    Ok((loss, grads))
}

/// `f_b(rainy)` without recording gradients.
fn background_only(model: &Model, rainy: Array4<f32>) -> Result<Array4<f32>> {
    let mut g = Graph::new(&model.weights);
    let x = g.input(rainy, false);
    let enc = model.build_encoder(&mut g, x)?;
    let (b, _) = model.build_background_decoder(&mut g, &enc)?;
    Ok(g.into_value(b))
}

/// Discriminator loss, accuracy and parameter gradients for one real/fake pair
/// of NCHW batches.
pub fn discriminator_step(model: &Model, real: Array4<f32>, fake: Array4<f32>) -> Result<(f64, f64, Weights)> {
    let mut g = Graph::new(&model.weights);
    let real_in = g.input(real, false);
    let fake_in = g.input(fake, false);
    let d_real = model.build_discriminator(&mut g, real_in)?;
    let d_fake = model.build_discriminator(&mut g, fake_in)?;
    let (pr, pf) = (g.value(d_real), g.value(d_fake));
    let loss = loss_adversarial_d(pr.view(), pf.view())? as f64;
    let correct = pr.iter().filter(|&&p| p > 0.5).count() + pf.iter().filter(|&&p| p < 0.5).count();
    let accuracy = correct as f64 / (pr.len() + pf.len()) as f64;
    let (gr, gf) = loss_adversarial_d_grad(pr.view(), pf.view())?;
    let grads = g.backward(vec![(d_real, gr), (d_fake, gf)]).params;
    Ok((loss, accuracy, grads))
}

/// Generator objective `λ_adv·L_adv(D(f_b(O))) + λ_O·L_O` and its parameter
/// gradients. Discriminator gradients are computed only to reach its input.
pub fn generator_step(
    model: &Model,
    rainy: Array4<f32>,
    objective: &StageObjective,
    variant: GeneratorVariant,
) -> Result<(LossValue, Weights)> {
    let w = objective.weights;
    let mut g = Graph::new(&model.weights);
    let v = model.build_full(&mut g, rainy.clone())?;
    let reconstruction = quadratic_loss(g.value(v.recomposed).view(), rainy.view(), objective.reduction)? as f64;

    let mut dg = Graph::new(&model.weights);
    let fake_in = dg.input(g.value(v.background).clone(), true);
    let d_fake = model.build_discriminator(&mut dg, fake_in)?;
    let pf = dg.value(d_fake);
    let adversarial = loss_adversarial_g(pf.view(), variant)? as f64;

    let comps = LossComponents {
        background: None,
        rain: None,
        reconstruction: Some(reconstruction),
        adversarial: Some(adversarial),
    };
    let loss = stage_total(objective, &comps)?;

    let mut seeds = Vec::new();
    if w.adversarial != 0.0 {
        let gp = loss_adversarial_g_grad(pf.view(), variant)?;
        let mut dgrads = dg.backward(vec![(d_fake, gp)]);
        let d_background = dgrads.take_input(fake_in).expect("input gradient requested");
        seeds.push((v.background, d_background * w.adversarial as f32));
    }
    if w.reconstruction != 0.0 {
        let grad = quadratic_loss_grad(g.value(v.recomposed).view(), rainy.view(), objective.reduction)?;
        seeds.push((v.recomposed, grad * w.reconstruction as f32));
    }
    let grads = if seeds.is_empty() { Weights::default() } else { g.backward(seeds).params };
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_breakpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-3);
        assert_eq!(s.lr_at(69_999), 1e-3);
        assert_eq!(s.lr_at(70_000), 1e-4);
        assert_eq!(s.lr_at(99_999), 1e-4);
        assert!(LrSchedule(vec![(0, 1e-3), (0, 1e-4)]).validate().is_err());
        assert!(LrSchedule(vec![(5, 1e-3)]).validate().is_err());
        assert!(LrSchedule(vec![(0, -1.0)]).validate().is_err());
    }

    #[test]
    fn default_config_values() {
        let c = TrainConfig::default();
        assert_eq!((c.batch, c.patch, c.max_iter), (8, 224, 100_000));
        assert_eq!((c.momentum, c.weight_decay), (0.9, 1e-6));
        c.validate().unwrap();
        assert_eq!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn sgd_skips_bias_decay() {
        let cfg = NetworkConfig {
            patch: 32,
            encoder_channels: [1, 1, 1, 1, 1],
            composition_channels: vec![1],
            discriminator_channels: [1, 1, 1, 1],
            ..Default::default()
        };
        let mut w = Weights::init(&cfg);
        for (_, p) in w.iter_mut() {
            p.bias.fill(1.0);
        }
        let before = w.clone();
        let zero = w.zeros_like();
        let mut velocity = w.zeros_like();
        Sgd::new(0.9, 0.5).step(&mut w, &mut velocity, &zero, 0.1, |_| true);
        let (name, p) = w.iter().next().unwrap();
        let old = before.get(name).unwrap();
        assert_eq!(p.bias, old.bias);
        let expect = old.weight.mapv(|x| x - 0.1 * 0.5 * x);
        assert!(p.weight.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() < 1e-7));
    }
}
