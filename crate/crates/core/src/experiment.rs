//! Config-driven experiment runs: teacher pretraining, baseline/CSG
//! training, evaluation, diversity diagnostics and ablation sweeps.
//!
//! Every run is a pure function of its config. Metric files carry no
//! timestamps, so reruns reproduce them byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentPolicy;
use crate::data::{mix_seed, Batch, Domain, ShapesSpec, Split, SplitData};
use crate::diagnostics::{self, DiversityReport};
use crate::error::{CsgError, Result};
use crate::losses::{self, multi_layer_nce, NceConfig, NceMode};
use crate::nn::{
    Architecture, Binder, CsgModel, EmbedOptions, EmbeddingQueue, NegativeSource, Network, Sgd, SgdConfig, TaskKind,
};
use crate::pooling::{self, PoolingKind};
use crate::tensor::{Graph, Tensor};

/// Attention weights must sum to one within this on every training step.
pub const ATTENTION_SUM_TOL: f64 = 1e-10;

/// Pretrained teachers below this held-out accuracy are flagged.
pub const TEACHER_TARGET_ACCURACY: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    pub proj_dim: usize,
    pub ema_momentum: f64,
    /// Pooling in front of the classifier (the contrastive branch uses `pooling`).
    pub task_pool: PoolingKind,
    pub negatives: NegativeSource,
    /// Capacity of the FIFO of past teacher embeddings; 0 disables it.
    pub queue_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [8, 16, 32, 32],
            proj_dim: 32,
            ema_momentum: 0.99,
            task_pool: PoolingKind::Gap,
            negatives: NegativeSource::Teacher,
            queue_capacity: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Size of the real-proxy training split; `None` uses `dataset.train_count`.
    pub train_count: Option<usize>,
    pub optimizer: SgdConfig,
    pub augment: AugmentPolicy,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            train_count: Some(2048),
            optimizer: SgdConfig {
                lr: 0.03,
                ..SgdConfig::default()
            },
            augment: AugmentPolicy {
                magnitude: 4,
                ..AugmentPolicy::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Seeded subsample size for the energies.
    pub samples: usize,
    /// `(n_lon, n_lat)`.
    pub grid: (usize, usize),
    /// Number of images whose attention-ratio maps are exported.
    pub attention_exports: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            grid: diagnostics::DEFAULT_GRID,
            attention_exports: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub dataset: ShapesSpec,
    pub model: ModelConfig,
    pub nce: NceConfig,
    /// Pooling inside the contrastive branch.
    pub pooling: PoolingKind,
    pub augment: AugmentPolicy,
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub pretrain: PretrainConfig,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Save the student after every epoch (the last good one survives an abort).
    pub checkpoint_every_epoch: bool,
    pub diagnose: DiagnoseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::Classify)
    }
}

impl ExperimentConfig {
    /// Defaults for a task; dense runs get dense NCE on a 4x4 grid and λ = 5.
    pub fn for_task(task: TaskKind) -> Self {
        let dense = task == TaskKind::Dense;
        Self {
            task,
            dataset: ShapesSpec {
                dense,
                ..ShapesSpec::default()
            },
            model: ModelConfig::default(),
            nce: NceConfig {
                lambda: if dense { 5.0 } else { 0.1 },
                grid: if dense { (4, 4) } else { (8, 8) },
                mode: if dense { NceMode::Dense } else { NceMode::Image },
                ..NceConfig::default()
            },
            pooling: PoolingKind::Apool,
            augment: AugmentPolicy::default(),
            optimizer: SgdConfig::default(),
            epochs: 20,
            batch_size: 16,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            pretrain: PretrainConfig::default(),
            teacher_checkpoint: None,
            checkpoint_every_epoch: true,
            diagnose: DiagnoseConfig::default(),
        }
    }

    /// The vanilla synthetic-training baseline for this config.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.nce.lambda = 0.0;
        cfg.augment.magnitude = 0;
        cfg.pooling = PoolingKind::Gap;
        cfg
    }

    pub fn is_baseline(&self) -> bool {
        self.nce.lambda == 0.0 && self.augment.magnitude == 0 && self.pooling == PoolingKind::Gap
    }

    /// Parse JSON, filling unspecified fields with the defaults of its task.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| CsgError::Config(e.to_string()))?;
        let task = match user.get("task") {
            Some(t) => serde_json::from_value(t.clone()).map_err(|e| CsgError::Config(format!("task: {}", e)))?,
            None => TaskKind::Classify,
        };
        let mut merged = serde_json::to_value(Self::for_task(task))?;
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| CsgError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CsgError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.nce.validate()?;
        self.dataset.validate()?;
        self.augment.validate()?;
        self.pretrain.augment.validate()?;
        self.architecture().validate()?;
        if self.batch_size == 0 {
            return Err(CsgError::Config("batch_size must be positive".into()));
        }
        if self.dataset.dense != (self.task == TaskKind::Dense) {
            return Err(CsgError::Config("dataset.dense must match the task".into()));
        }
        if (self.nce.mode == NceMode::Dense) != (self.task == TaskKind::Dense) {
            return Err(CsgError::Config("nce.mode must be dense exactly for the dense task".into()));
        }
        if !(0.0..=1.0).contains(&self.model.ema_momentum) {
            return Err(CsgError::Config(format!("ema_momentum {} outside [0, 1]", self.model.ema_momentum)));
        }
        if self.model.proj_dim == 0 {
            return Err(CsgError::Config("proj_dim must be positive".into()));
        }
        for o in [&self.optimizer, &self.pretrain.optimizer] {
            if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.momentum)) {
                return Err(CsgError::Config(format!("invalid optimizer {:?}", o)));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            in_channels: 3,
            channels: self.model.channels,
            task: self.task,
            n_outputs: match self.task {
                TaskKind::Classify => self.dataset.n_classes,
                TaskKind::Dense => self.dataset.n_classes + 1,
            },
        }
    }

    fn stream(&self, tag: u64) -> u64 {
        mix_seed(&[self.seed, tag])
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: String,
    /// `accuracy` or `miou`.
    pub metric: String,
    pub value: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_iou: Option<Vec<f64>>,
}

/// Mean IoU over the classes that occur in the labels or predictions.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[t] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes)
        .map(|c| if union[c] == 0 { f64::NAN } else { inter[c] as f64 / union[c] as f64 })
        .collect();
    let present: Vec<f64> = ious.iter().copied().filter(|v| !v.is_nan()).collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (mean, ious.into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect())
}

const EVAL_CHUNK: usize = 64;

pub fn split_name(domain: Domain, split: Split) -> String {
    let d = match domain {
        Domain::SyntheticFlat => "synthetic",
        Domain::RealProxy => "realproxy",
    };
    let s = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    format!("{}-{}", d, s)
}

/// Parse `synthetic-test`, `realproxy-train` and so on.
pub fn parse_split(name: &str) -> Result<(Domain, Split)> {
    let (d, s) = name
        .split_once('-')
        .ok_or_else(|| CsgError::Config(format!("split `{}` is not <domain>-<split>", name)))?;
    let domain = match d {
        "synthetic" => Domain::SyntheticFlat,
        "realproxy" => Domain::RealProxy,
        _ => return Err(CsgError::Config(format!("unknown domain `{}`", d))),
    };
    let split = match s {
        "train" => Split::Train,
        "test" => Split::Test,
        _ => return Err(CsgError::Config(format!("unknown split `{}`", s))),
    };
    Ok((domain, split))
}

pub fn evaluate(net: &Network, data: &SplitData, name: &str) -> Result<EvalMetrics> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let b = data.batch(chunk)?;
        pred.extend(net.predict(&b.images)?);
        match net.arch.task {
            TaskKind::Classify => truth.extend(&b.labels),
            TaskKind::Dense => truth.extend(
                b.masks
                    .ok_or_else(|| CsgError::Contract("dense evaluation needs masks".into()))?,
            ),
        }
    }
    Ok(match net.arch.task {
        TaskKind::Classify => {
            let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
            EvalMetrics {
                split: name.to_string(),
                metric: "accuracy".into(),
                value: correct as f64 / truth.len().max(1) as f64,
                n: truth.len(),
                per_class_iou: None,
            }
        }
        TaskKind::Dense => {
            let (m, per) = mean_iou(&pred, &truth, net.arch.n_outputs);
            EvalMetrics {
                split: name.to_string(),
                metric: "miou".into(),
                value: m,
                n: data.len(),
                per_class_iou: Some(per),
            }
        }
    })
}

/// Task loss of a batch on the tape.
fn task_loss(g: &mut Graph, task: TaskKind, logits: crate::tensor::Var, batch: &Batch) -> Result<crate::tensor::Var> {
    match task {
        TaskKind::Classify => losses::cross_entropy(g, logits, &batch.labels),
        TaskKind::Dense => {
            let masks = batch
                .masks
                .as_ref()
                .ok_or_else(|| CsgError::Contract("dense training needs masks".into()))?;
            losses::pixel_cross_entropy(g, logits, masks, None)
        }
    }
}

fn running_metric(task: TaskKind, logits: &Tensor, batch: &Batch) -> (usize, usize) {
    let pred = crate::nn::argmax_classes(logits);
    let truth: &[usize] = match task {
        TaskKind::Classify => &batch.labels,
        TaskKind::Dense => batch.masks.as_deref().unwrap_or(&[]),
    };
    (pred.iter().zip(truth).filter(|(p, t)| p == t).count(), truth.len())
}

/// Augment a batch in place; returns per-image spatial-warp flags.
fn augment_batch(policy: &AugmentPolicy, batch: &mut Batch, epoch: usize) -> Result<Vec<bool>> {
    if policy.magnitude == 0 {
        return Ok(vec![false; batch.indices.len()]);
    }
    let per = batch.images.numel() / batch.indices.len().max(1);
    let shape = batch.images.shape()[1..].to_vec();
    let mut warped = Vec::with_capacity(batch.indices.len());
    for (k, &idx) in batch.indices.iter().enumerate() {
        let plan = policy.plan(epoch as u64, idx as u64);
        let img = Tensor::new(shape.clone(), batch.images.data()[k * per..(k + 1) * per].to_vec())?;
        let out = plan.apply(&img)?;
        batch.images.data_mut()[k * per..(k + 1) * per].copy_from_slice(out.data());
        warped.push(plan.spatially_warping());
    }
    Ok(warped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub epochs: Vec<PretrainEpoch>,
    pub heldout: EvalMetrics,
    pub below_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub task_loss: f64,
    pub train_metric: f64,
}

/// Train backbone and task head on the real-proxy training split.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(Network, PretrainMetrics)> {
    cfg.validate()?;
    let arch = cfg.architecture();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream(1));
    let mut net = Network::new(&arch, cfg.model.task_pool, &mut rng);
    let spec = cfg.dataset.with_domain(Domain::RealProxy);
    let train = SplitData::render(
        &ShapesSpec {
            train_count: cfg.pretrain.train_count.unwrap_or(spec.train_count),
            ..spec.clone()
        },
        Split::Train,
    )?;
    let test = SplitData::render(&spec, Split::Test)?;
    let policy = AugmentPolicy {
        seed: mix_seed(&[cfg.pretrain.augment.seed, cfg.seed, 3]),
        ..cfg.pretrain.augment.clone()
    };
    let mut opt = Sgd::new(cfg.pretrain.optimizer);
    let mut epochs = Vec::new();
    for epoch in 0..cfg.pretrain.epochs {
        let (mut loss_sum, mut batches, mut hit, mut seen) = (0.0, 0usize, 0usize, 0usize);
        for idx in train.batches(cfg.batch_size, cfg.stream(2), epoch) {
            let mut batch = train.batch(&idx)?;
            augment_batch(&policy, &mut batch, epoch)?;
            let mut g = Graph::new();
            let mut bind = Binder::new();
            let x = g.constant(batch.images.clone());
            let (_, logits) = net.forward_var(&mut g, &mut bind, x)?;
            let loss = task_loss(&mut g, arch.task, logits, &batch)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(CsgError::NumericDomain(format!("pretrain loss is {} at epoch {}", value, epoch)));
            }
            let (h, s) = running_metric(arch.task, g.value(logits), &batch);
            hit += h;
            seen += s;
            g.backward(loss)?;
            opt.step(&mut net, &bind.gradients(&g))?;
            loss_sum += value;
            batches += 1;
        }
        let e = PretrainEpoch {
            epoch,
            task_loss: loss_sum / batches.max(1) as f64,
            train_metric: hit as f64 / seen.max(1) as f64,
        };
        log::info!("pretrain epoch {} loss {:.4} train {:.3}", e.epoch, e.task_loss, e.train_metric);
        epochs.push(e);
    }
    let heldout = evaluate(&net, &test, &split_name(Domain::RealProxy, Split::Test))?;
    let below_target = arch.task == TaskKind::Classify && heldout.value < TEACHER_TARGET_ACCURACY;
    if below_target {
        log::warn!(
            "teacher accuracy {:.3} is below the {:.2} target; continuing",
            heldout.value,
            TEACHER_TARGET_ACCURACY
        );
    }
    Ok((
        net,
        PretrainMetrics {
            epochs,
            heldout,
            below_target,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    /// Mean InfoNCE per layer group; logged even when λ = 0.
    pub nce_loss: BTreeMap<usize, f64>,
    pub nce_total: f64,
    /// Accuracy (or pixel accuracy) on the augmented training batches.
    pub source_train_metric: f64,
    pub negative_attention: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub baseline: bool,
    pub lambda: f64,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Attention maps whose sum was checked in-loop.
    pub attention_checks: usize,
    pub negative_attention: usize,
    pub source: EvalMetrics,
    pub target: EvalMetrics,
}

/// Mutable state of one CSG training run.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: CsgModel,
    pub opt: Sgd,
    pub queue: Option<EmbeddingQueue>,
    policy: AugmentPolicy,
    pub steps: usize,
    pub attention_checks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub task_loss: f64,
    pub nce: BTreeMap<usize, f64>,
    pub nce_total: f64,
    pub hits: usize,
    pub seen: usize,
    pub negative_attention: usize,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, teacher: &Network) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture();
        if teacher.arch.channels != arch.channels || teacher.arch.in_channels != arch.in_channels {
            return Err(CsgError::Config(format!(
                "teacher channels {:?} do not match model channels {:?}",
                teacher.arch.channels, arch.channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream(5));
        let model = CsgModel::new(
            &teacher.backbone,
            &arch,
            cfg.model.task_pool,
            &cfg.nce.layers,
            cfg.model.proj_dim,
            cfg.model.ema_momentum,
            &mut rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            opt: Sgd::new(cfg.optimizer),
            queue: (cfg.model.queue_capacity > 0).then(|| EmbeddingQueue::new(cfg.model.queue_capacity)),
            policy: AugmentPolicy {
                seed: mix_seed(&[cfg.augment.seed, cfg.seed, 3]),
                ..cfg.augment.clone()
            },
            steps: 0,
            attention_checks: 0,
        })
    }

    /// Augment, embed, combine task and contrastive losses, update, EMA.
    pub fn step(&mut self, mut batch: Batch, epoch: usize) -> Result<StepOutcome> {
        let cfg = &self.cfg;
        let warped = augment_batch(&self.policy, &mut batch, epoch)?;
        let opts = EmbedOptions {
            layers: cfg.nce.layers.clone(),
            pooling: cfg.pooling,
            negatives: cfg.model.negatives,
            warped,
            dense_grid: (cfg.nce.mode == NceMode::Dense).then_some(cfg.nce.grid),
            cross_cell: cfg.nce.cross_cell_negatives,
        };
        let mut g = Graph::new();
        let mut bind = Binder::new();
        let emb = self
            .model
            .forward_embeddings(&mut g, &mut bind, &batch.images, None, self.queue.as_ref(), &opts)?;
        let hw = (batch.images.shape()[2], batch.images.shape()[3]);
        let logits = self.model.student.head_logits_var(&mut g, &mut bind, emb.student_maps[3], hw)?;
        let task = task_loss(&mut g, cfg.task, logits, &batch)?;
        let (nce, per_layer) = multi_layer_nce(&mut g, &emb.batch, &cfg.nce)?;

        let mut negative_attention = 0;
        for a in &emb.attention {
            let total = a.total();
            if (total - 1.0).abs() > ATTENTION_SUM_TOL {
                return Err(CsgError::Contract(format!(
                    "attention weights sum to {} at step {}",
                    total, self.steps
                )));
            }
            negative_attention += a.negative_count();
        }
        self.attention_checks += emb.attention.len();

        let task_value = g.value(task).item()?;
        let nce_value = g.value(nce).item()?;
        let loss = if cfg.nce.lambda > 0.0 {
            losses::total_loss(&mut g, task, nce, cfg.nce.lambda)?
        } else {
            if !task_value.is_finite() {
                return Err(CsgError::NumericDomain(format!("task loss is {}", task_value)));
            }
            task
        };
        let (hits, seen) = running_metric(cfg.task, g.value(logits), &batch);
        g.backward(loss)?;
        self.opt.step(&mut self.model, &bind.gradients(&g))?;
        self.model.ema_update();
        if let Some(q) = self.queue.as_mut() {
            for (l, z) in &emb.teacher_embeddings {
                q.push(*l, z);
            }
        }
        self.steps += 1;
        Ok(StepOutcome {
            task_loss: task_value,
            nce: per_layer,
            nce_total: nce_value,
            hits,
            seen,
            negative_attention,
        })
    }
}

/// Everything a finished training run produced.
pub struct TrainOutcome {
    pub model: CsgModel,
    pub metrics: TrainMetrics,
}

/// Train a student against `teacher` on the synthetic split, evaluate on
/// both domains and write artifacts under `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig, teacher: &Network) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, teacher)?;
    let spec = cfg.dataset.with_domain(Domain::SyntheticFlat);
    let train_data = SplitData::render(&spec, Split::Train)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json()?)?;

    let mut epochs = Vec::new();
    let mut negative_total = 0;
    for epoch in 0..cfg.epochs {
        let mut task_sum = 0.0;
        let mut nce_sum: BTreeMap<usize, f64> = BTreeMap::new();
        let mut nce_total = 0.0;
        let (mut hits, mut seen, mut negative, mut batches) = (0, 0, 0, 0usize);
        for idx in train_data.batches(cfg.batch_size, cfg.stream(2), epoch) {
            let r = trainer.step(train_data.batch(&idx)?, epoch)?;
            if trainer.steps == 1 {
                log::info!(
                    "initial task loss {:.4}, weighted contrastive loss {:.4} (lambda {})",
                    r.task_loss,
                    cfg.nce.lambda * r.nce_total,
                    cfg.nce.lambda
                );
            }
            task_sum += r.task_loss;
            nce_total += r.nce_total;
            for (l, v) in r.nce {
                *nce_sum.entry(l).or_default() += v;
            }
            hits += r.hits;
            seen += r.seen;
            negative += r.negative_attention;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let log_entry = EpochLog {
            epoch,
            task_loss: task_sum / nb,
            nce_loss: nce_sum.into_iter().map(|(l, v)| (l, v / nb)).collect(),
            nce_total: nce_total / nb,
            source_train_metric: hits as f64 / seen.max(1) as f64,
            negative_attention: negative,
        };
        log::info!(
            "epoch {} task {:.4} nce {:.4} train {:.3}",
            epoch,
            log_entry.task_loss,
            log_entry.nce_total,
            log_entry.source_train_metric
        );
        negative_total += negative;
        epochs.push(log_entry);
        if cfg.checkpoint_every_epoch {
            trainer.model.save(&out.join("checkpoint"))?;
        }
    }
    if !cfg.checkpoint_every_epoch || cfg.epochs == 0 {
        trainer.model.save(&out.join("checkpoint"))?;
    }

    let student = &trainer.model.student;
    let source_test = SplitData::render(&spec, Split::Test)?;
    let target_spec = cfg.dataset.with_domain(Domain::RealProxy);
    let target_test = SplitData::render(&target_spec, Split::Test)?;
    let metrics = TrainMetrics {
        baseline: cfg.is_baseline(),
        lambda: cfg.nce.lambda,
        epochs,
        steps: trainer.steps,
        attention_checks: trainer.attention_checks,
        negative_attention: negative_total,
        source: evaluate(student, &source_test, &split_name(Domain::SyntheticFlat, Split::Test))?,
        target: evaluate(student, &target_test, &split_name(Domain::RealProxy, Split::Test))?,
    };
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    write_embeddings_csv(student, &target_test, &out.join("embeddings_realproxy_test.csv"))?;
    Ok(TrainOutcome {
        model: trainer.model,
        metrics,
    })
}

/// GAP features of the final stage, `N x C`.
pub fn gap_features(backbone: &crate::nn::Backbone, data: &SplitData, indices: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut c = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let b = data.batch(chunk)?;
        let last = backbone.forward(&b.images)?.swap_remove(3);
        let f = last.mean_axes(&[2, 3])?;
        c = f.shape()[1];
        rows.extend_from_slice(f.data());
    }
    Tensor::new(vec![indices.len(), c], rows)
}

/// Patch-pooled cells of the final stage, `(N * r * s) x C`.
pub fn patch_features(
    backbone: &crate::nn::Backbone,
    data: &SplitData,
    indices: &[usize],
    grid: (usize, usize),
) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut c = 0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let b = data.batch(chunk)?;
        let last = backbone.forward(&b.images)?.swap_remove(3);
        let cells = pooling::patch_pool_batch(&last, grid)?;
        c = cells.shape()[1];
        rows.extend_from_slice(cells.data());
    }
    Tensor::new(vec![rows.len() / c.max(1), c], rows)
}

fn write_embeddings_csv(net: &Network, data: &SplitData, path: &Path) -> Result<()> {
    let all: Vec<usize> = (0..data.len()).collect();
    let f = gap_features(&net.backbone, data, &all)?;
    let c = f.shape()[1];
    let mut s = String::from("label");
    for j in 0..c {
        let _ = write!(s, ",f{}", j);
    }
    s.push('\n');
    for (i, row) in f.data().chunks(c).enumerate() {
        let _ = write!(s, "{}", data.samples[i].label);
        for v in row {
            let _ = write!(s, ",{}", v);
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Diversity of a network's features on a split.
///
/// Classification uses final-stage GAP features of a seeded subsample of
/// images; the dense task uses patch-pooled cells of the same images with
/// the configured grid, subsampled to the same count.
pub fn diagnose(net: &Network, cfg: &ExperimentConfig, domain: Domain, split: Split) -> Result<DiversityReport> {
    let spec = cfg.dataset.with_domain(domain);
    let data = SplitData::render(&spec, split)?;
    diagnose_data(net, cfg, &data)
}

pub fn diagnose_data(net: &Network, cfg: &ExperimentConfig, data: &SplitData) -> Result<DiversityReport> {
    let features = feature_sample(net, cfg, data, cfg.diagnose.samples)?;
    diagnostics::diversity_report(&features, cfg.diagnose.grid)
}

/// The rows the diagnostics run on, subsampled to at most `samples`.
pub fn feature_sample(net: &Network, cfg: &ExperimentConfig, data: &SplitData, samples: usize) -> Result<Tensor> {
    let seed = cfg.stream(4);
    match net.arch.task {
        TaskKind::Classify => gap_features(&net.backbone, data, &diagnostics::subsample(data.len(), samples, seed)),
        TaskKind::Dense => {
            let cells = cfg.nce.grid.0 * cfg.nce.grid.1;
            let images = diagnostics::subsample(data.len(), samples.div_ceil(cells).max(2), seed);
            let all = patch_features(&net.backbone, data, &images, cfg.nce.grid)?;
            let keep = diagnostics::subsample(all.shape()[0], samples, mix_seed(&[seed, 1]));
            let c = all.shape()[1];
            let rows: Vec<f64> = keep.iter().flat_map(|&r| all.data()[r * c..(r + 1) * c].to_vec()).collect();
            Tensor::new(vec![keep.len(), c], rows)
        }
    }
}

/// Write A-pool attention-ratio maps of the first images of a split.
pub fn export_attention(net: &Network, data: &SplitData, split: &str, layers: &[usize], count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let n = count.min(data.len());
    if n == 0 {
        return Ok(paths);
    }
    let idx: Vec<usize> = (0..n).collect();
    let b = data.batch(&idx)?;
    let maps = net.backbone.forward(&b.images)?;
    for &l in layers {
        let (_, attn) = pooling::apool_batch(&maps[l - 1], None)?;
        for (i, a) in attn.iter().enumerate() {
            paths.push(a.export_ratio(dir, split, i, l)?);
        }
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    M,
    G,
    Pooling,
    Lambda,
}

impl FromStr for SweepAxis {
    type Err = CsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m" | "magnitude" => Ok(Self::M),
            "g" | "layers" => Ok(Self::G),
            "pooling" => Ok(Self::Pooling),
            "lambda" | "λ" => Ok(Self::Lambda),
            _ => Err(CsgError::Config(format!("unknown sweep axis `{}`", s))),
        }
    }
}

impl SweepAxis {
    /// Set this axis of `cfg` to `value`. Layer sets are written `3+4`.
    pub fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| CsgError::Config(format!("bad {:?} value `{}`: {}", self, value, e));
        match self {
            SweepAxis::M => cfg.augment.magnitude = value.trim().parse().map_err(|e| bad(&e))?,
            SweepAxis::G => {
                cfg.nce.layers = value
                    .split('+')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(&e))?
            }
            SweepAxis::Pooling => {
                cfg.pooling = serde_json::from_value(Value::String(value.trim().to_string())).map_err(|e| bad(&e))?
            }
            SweepAxis::Lambda => cfg.nce.lambda = value.trim().parse().map_err(|e| bad(&e))?,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub e0: Option<f64>,
    pub status: String,
}

pub const SWEEP_COLUMNS: &str = "value,source_acc,target_acc,e0,status";

/// Run one training per value (plus the λ = 0 baseline row) with a shared seed.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], teacher: &Network) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CsgError::Config("sweep needs at least one value".into()));
    }
    let mut runs: Vec<(String, Result<ExperimentConfig>)> = vec![("baseline".into(), Ok(base.baseline()))];
    for v in values {
        let mut cfg = base.clone();
        runs.push((v.clone(), axis.apply(&mut cfg, v).map(|_| cfg)));
    }
    let target = SplitData::render(&base.dataset.with_domain(Domain::RealProxy), Split::Test)?;
    let mut rows = Vec::new();
    for (value, cfg) in runs {
        let outcome = cfg.and_then(|mut cfg| {
            cfg.output_dir = base.output_dir.join(format!("{:?}_{}", axis, value).to_lowercase().replace('+', "-"));
            let t = train(&cfg, teacher)?;
            let report = diagnose_data(&t.model.student, &cfg, &target)?;
            Ok((t.metrics, report.energies[&0]))
        });
        rows.push(match outcome {
            Ok((m, e0)) => SweepRow {
                value,
                source_acc: Some(m.source.value),
                target_acc: Some(m.target.value),
                e0: Some(e0),
                status: "ok".into(),
            },
            Err(e) => {
                log::error!("sweep value {} failed: {}", value, e);
                SweepRow {
                    value,
                    source_acc: None,
                    target_acc: None,
                    e0: None,
                    status: format!("error: {}", e).replace([',', '\n'], ";"),
                }
            }
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = format!("{}\n", SWEEP_COLUMNS);
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.value, fmt(r.source_acc), fmt(r.target_acc), fmt(r.e0), r.status);
    }
    s
}

/// Entry points shared by the CLI; each writes its artifacts under the
/// config's output directory.
pub mod commands {
    use super::*;

    pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
        let (net, metrics) = pretrain(cfg)?;
        let out = &cfg.output_dir;
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("config.json"), cfg.to_json()?)?;
        let ckpt = out.join("teacher");
        net.save(&ckpt)?;
        std::fs::write(out.join("pretrain_metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
        Ok(ckpt)
    }

    fn teacher(cfg: &ExperimentConfig) -> Result<Network> {
        let path = cfg
            .teacher_checkpoint
            .as_ref()
            .ok_or_else(|| CsgError::Config("teacher_checkpoint is required".into()))?;
        Network::load(path)
    }

    pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainMetrics> {
        Ok(train(cfg, &teacher(cfg)?)?.metrics)
    }

    pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, split: &str) -> Result<EvalMetrics> {
        let (domain, sp) = parse_split(split)?;
        let net = Network::load(checkpoint)?;
        let data = SplitData::render(&cfg.dataset.with_domain(domain), sp)?;
        let m = evaluate(&net, &data, split)?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        std::fs::write(
            cfg.output_dir.join(format!("eval_{}.json", split)),
            serde_json::to_string_pretty(&m)?,
        )?;
        Ok(m)
    }

    pub fn cmd_diagnose(cfg: &ExperimentConfig, checkpoint: &Path, split: &str) -> Result<DiversityReport> {
        let (domain, sp) = parse_split(split)?;
        let net = Network::load(checkpoint)?;
        let data = SplitData::render(&cfg.dataset.with_domain(domain), sp)?;
        let report = diagnose_data(&net, cfg, &data)?;
        let out = cfg.output_dir.join("diagnostics");
        diagnostics::write_report(&report, &out, &format!("diversity_{}", split))?;
        export_attention(&net, &data, split, &cfg.nce.layers, cfg.diagnose.attention_exports, &out.join("attention"))?;
        Ok(report)
    }

    pub fn cmd_sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
        let rows = sweep(cfg, axis, values, &teacher(cfg)?)?;
        std::fs::create_dir_all(&cfg.output_dir)?;
        std::fs::write(cfg.output_dir.join(format!("sweep_{:?}.csv", axis).to_lowercase()), sweep_csv(&rows))?;
        Ok(rows)
    }
}
