//! Model assembly: staged conv backbone, projection heads with EMA shadows,
//! the frozen teacher and the task heads.
//!
//! Parameters live in plain [`Tensor`]s. A training step binds them into a
//! fresh [`Graph`] through a [`Binder`], which remembers the name of every
//! bound parameter so gradients can be routed back to the optimizer. Frozen
//! parts (teacher, shadow heads) are only ever evaluated with the pure
//! tensor forward and never enter a graph.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, CsgError, Result};
use crate::losses::{dense_negative_rows, in_batch_negative_rows, ContrastiveBatch, LayerEmbeddings};
use crate::pooling::{self, AttentionMap, PoolingKind};
use crate::tensor::{io, Graph, Tensor, Var};

pub const KERNEL: usize = 3;
pub const STRIDES: [usize; 4] = [1, 2, 2, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classify,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: [usize; 4],
    pub task: TaskKind,
    /// Classes for `classify`; classes plus background for `dense`.
    pub n_outputs: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: [16, 32, 64, 64],
            task: TaskKind::Classify,
            n_outputs: 4,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.contains(&0) || self.n_outputs < 2 {
            return Err(CsgError::Config(format!("degenerate architecture {:?}", self)));
        }
        Ok(())
    }

    pub fn stage_specs(&self) -> Vec<StageSpec> {
        (0..4)
            .map(|i| StageSpec {
                in_channels: if i == 0 { self.in_channels } else { self.channels[i - 1] },
                out_channels: self.channels[i],
                kernel: KERNEL,
                stride: STRIDES[i],
                padding: KERNEL / 2,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Visitor access to named parameters.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

impl Params for BTreeMap<String, Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.iter().for_each(|(k, v)| f(k, v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.iter_mut().for_each(|(k, v)| f(k, v));
    }
}

/// Maps parameter names to their graph leaves for one step.
#[derive(Debug, Default)]
pub struct Binder {
    vars: BTreeMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for `name`, created on first use.
    pub fn bind(&mut self, g: &mut Graph, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = g.param(value.clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t)))
            .collect()
    }
}

fn add_rows(mut x: Tensor, bias: &Tensor) -> Tensor {
    let f = bias.numel();
    for row in x.data_mut().chunks_mut(f) {
        row.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    /// `C_out x C_in x k x k`.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvStage {
    fn new<R: Rng + ?Sized>(spec: &StageSpec, rng: &mut R) -> Self {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        Self {
            kernel: Tensor::random_normal(
                &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
                (2.0 / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Tensor::zeros(&[spec.out_channels]),
            stride: spec.stride,
            padding: spec.padding,
        }
    }
}

/// Subtracted from every input pixel before the first stage.
pub const INPUT_CENTER: f64 = 0.5;

/// Four conv → relu stages; every stage output is a layer group.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: Vec<ConvStage>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        Self {
            stages: arch.stage_specs().iter().map(|s| ConvStage::new(s, rng)).collect(),
        }
    }

    /// Feature maps of all stages; never records anything.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut h = x.map(|v| v - INPUT_CENTER);
        for s in &self.stages {
            h = h.conv2d(&s.kernel, Some(&s.bias), s.stride, s.padding)?.relu();
            maps.push(h.clone());
        }
        Ok(maps)
    }

    pub fn forward_var(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut h = g.add_scalar(x, -INPUT_CENTER);
        for (i, s) in self.stages.iter().enumerate() {
            let k = bind.bind(g, &format!("{}.stage{}.kernel", prefix, i + 1), &s.kernel);
            let b = bind.bind(g, &format!("{}.stage{}.bias", prefix, i + 1), &s.bias);
            let z = g.conv2d(h, k, Some(b), s.stride, s.padding)?;
            h = g.relu(z);
            maps.push(h);
        }
        Ok(maps)
    }

    pub fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("{}.stage{}.kernel", prefix, i + 1), &s.kernel);
            f(&format!("{}.stage{}.bias", prefix, i + 1), &s.bias);
        }
    }

    pub fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("{}.stage{}.kernel", prefix, i + 1), &mut s.kernel);
            f(&format!("{}.stage{}.bias", prefix, i + 1), &mut s.bias);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`, applied as `x · W`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::random_normal(&[input, output], (gain / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::eye(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(add_rows(x.matmul(&self.weight)?, &self.bias))
    }

    pub fn forward_var(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let w = bind.bind(g, &format!("{}.weight", prefix), &self.weight);
        let b = bind.bind(g, &format!("{}.bias", prefix), &self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

/// Linear → ReLU → Linear into the contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(input, input, 2.0, rng),
            fc2: Linear::new(input, output, 1.0, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            fc1: Linear::identity(dim),
            fc2: Linear::identity(dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }

    pub fn forward_var(&self, g: &mut Graph, bind: &mut Binder, prefix: &str, x: Var) -> Result<Var> {
        let h = self.fc1.forward_var(g, bind, &format!("{}.fc1", prefix), x)?;
        let h = g.relu(h);
        self.fc2.forward_var(g, bind, &format!("{}.fc2", prefix), h)
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("fc1.weight", &self.fc1.weight),
            ("fc1.bias", &self.fc1.bias),
            ("fc2.weight", &self.fc2.weight),
            ("fc2.bias", &self.fc2.bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("fc1.weight", &mut self.fc1.weight),
            ("fc1.bias", &mut self.fc1.bias),
            ("fc2.weight", &mut self.fc2.weight),
            ("fc2.bias", &mut self.fc2.bias),
        ]
    }
}

/// Backbone plus task head: the trainable student, or a pretrained teacher
/// together with the head it was pretrained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub backbone: Backbone,
    /// Classifier `C_4 x K` or dense `K x C_4 x 1 x 1` kernel.
    pub task_weight: Tensor,
    pub task_bias: Tensor,
    /// Pooling in front of the classifier.
    pub task_pool: PoolingKind,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, task_pool: PoolingKind, rng: &mut R) -> Self {
        let backbone = Backbone::new(arch, rng);
        let (task_weight, task_bias) = Self::fresh_task_head(arch, rng);
        Self {
            arch: arch.clone(),
            backbone,
            task_weight,
            task_bias,
            task_pool,
        }
    }

    fn fresh_task_head<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> (Tensor, Tensor) {
        let c = arch.channels[3];
        let k = arch.n_outputs;
        let std = (1.0 / c as f64).sqrt();
        let w = match arch.task {
            TaskKind::Classify => Tensor::random_normal(&[c, k], std, rng),
            TaskKind::Dense => Tensor::random_normal(&[k, c, 1, 1], std, rng),
        };
        (w, Tensor::zeros(&[k]))
    }

    /// Replace the task head with a freshly initialised one for `arch`.
    pub fn reset_task_head<R: Rng + ?Sized>(&mut self, arch: &Architecture, rng: &mut R) -> Result<()> {
        if arch.channels != self.arch.channels || arch.in_channels != self.arch.in_channels {
            return dim_err(format!("backbone {:?} cannot take head for {:?}", self.arch, arch));
        }
        let (w, b) = Self::fresh_task_head(arch, rng);
        self.task_weight = w;
        self.task_bias = b;
        self.arch = arch.clone();
        Ok(())
    }

    /// Task logits from the last feature map: `N x K` or `N x K x H x W`.
    pub fn head_logits(&self, last: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
        match self.arch.task {
            TaskKind::Classify => {
                let pooled = match self.task_pool {
                    PoolingKind::Gap => last.mean_axes(&[2, 3])?,
                    PoolingKind::Apool => pooling::apool_batch(last, None)?.0,
                };
                Ok(add_rows(pooled.matmul(&self.task_weight)?, &self.task_bias))
            }
            TaskKind::Dense => {
                let z = last.conv2d(&self.task_weight, Some(&self.task_bias), 1, 0)?;
                z.upsample_nearest(upsample_factor(last, input_hw)?)
            }
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let maps = self.backbone.forward(x)?;
        self.head_logits(&maps[3], spatial(x)?)
    }

    pub fn head_logits_var(&self, g: &mut Graph, bind: &mut Binder, last: Var, input_hw: (usize, usize)) -> Result<Var> {
        let w = bind.bind(g, "task.weight", &self.task_weight);
        let b = bind.bind(g, "task.bias", &self.task_bias);
        match self.arch.task {
            TaskKind::Classify => {
                let pooled = match self.task_pool {
                    PoolingKind::Gap => pooling::gap_var(g, last)?,
                    PoolingKind::Apool => pooling::apool_var(g, last, None)?.0,
                };
                let y = g.matmul(pooled, w)?;
                g.add_row_bias(y, b)
            }
            TaskKind::Dense => {
                let factor = upsample_factor(g.value(last), input_hw)?;
                let z = g.conv2d(last, w, Some(b), 1, 0)?;
                g.upsample_nearest(z, factor)
            }
        }
    }

    /// Stage maps and task logits on the tape.
    pub fn forward_var(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<(Vec<Var>, Var)> {
        let hw = spatial(g.value(x))?;
        let maps = self.backbone.forward_var(g, bind, "backbone", x)?;
        let logits = self.head_logits_var(g, bind, maps[3], hw)?;
        Ok((maps, logits))
    }

    /// Argmax class per image (classify) or per pixel (dense, image-major).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_classes(&self.logits(x)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_checkpoint(dir, self, self.manifest(CheckpointKind::Network, Vec::new(), 0, None))
    }

    /// Load the network part of a network or CSG checkpoint.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::new(&manifest.arch, manifest.task_pool, &mut rng);
        fill_from_dir(dir, &mut net)?;
        Ok(net)
    }

    fn manifest(&self, kind: CheckpointKind, layers: Vec<usize>, proj_dim: usize, m: Option<f64>) -> Manifest {
        Manifest {
            kind,
            arch: self.arch.clone(),
            stages: self.arch.stage_specs(),
            task_pool: self.task_pool,
            layers,
            proj_dim,
            ema_momentum: m,
            tensors: Vec::new(),
        }
    }
}

impl Params for Network {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit_prefixed("backbone", f);
        f("task.weight", &self.task_weight);
        f("task.bias", &self.task_bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_prefixed_mut("backbone", f);
        f("task.weight", &mut self.task_weight);
        f("task.bias", &mut self.task_bias);
    }
}

fn spatial(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [_, _, h, w] => Ok((*h, *w)),
        s => dim_err(format!("expected N x C x H x W input, got {:?}", s)),
    }
}

fn upsample_factor(last: &Tensor, (h, w): (usize, usize)) -> Result<usize> {
    let (lh, lw) = spatial(last)?;
    if h % lh != 0 || w % lw != 0 || h / lh != w / lw {
        return dim_err(format!("cannot upsample {}x{} to {}x{}", lh, lw, h, w));
    }
    Ok(h / lh)
}

/// Argmax over axis 1 of `N x K` or `N x K x H x W` logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (n, k) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(i * k + c) * plane + p] > d[(i * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Where the negatives of the contrastive embeddings are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    /// Frozen teacher with shadow heads.
    #[default]
    Teacher,
    /// Student backbone with trainable heads.
    Student,
}

/// FIFO of past teacher embeddings used as extra negatives.
#[derive(Debug, Clone)]
pub struct EmbeddingQueue {
    capacity: usize,
    rows: BTreeMap<usize, VecDeque<Vec<f64>>>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: BTreeMap::new(),
        }
    }

    pub fn len(&self, layer: usize) -> usize {
        self.rows.get(&layer).map_or(0, VecDeque::len)
    }

    pub fn push(&mut self, layer: usize, embeddings: &Tensor) {
        let c = *embeddings.shape().last().unwrap_or(&0);
        if c == 0 || self.capacity == 0 {
            return;
        }
        let q = self.rows.entry(layer).or_default();
        for row in embeddings.data().chunks(c) {
            if q.len() == self.capacity {
                q.pop_front();
            }
            q.push_back(row.to_vec());
        }
    }

    pub fn snapshot(&self, layer: usize) -> Option<Tensor> {
        let q = self.rows.get(&layer).filter(|q| !q.is_empty())?;
        let c = q[0].len();
        Tensor::new(vec![q.len(), c], q.iter().flatten().copied().collect()).ok()
    }
}

#[derive(Debug, Clone)]
pub struct EmbedOptions {
    pub layers: Vec<usize>,
    pub pooling: PoolingKind,
    pub negatives: NegativeSource,
    /// Per anchor: whether a spatial augmentation was applied. The teacher's
    /// A-pool then takes its attention from the student map.
    pub warped: Vec<bool>,
    /// Dense mode: pool an `r x s` grid of cells instead of whole maps.
    pub dense_grid: Option<(usize, usize)>,
    pub cross_cell: bool,
}

impl EmbedOptions {
    pub fn image(layers: &[usize], pooling: PoolingKind) -> Self {
        Self {
            layers: layers.to_vec(),
            pooling,
            negatives: NegativeSource::Teacher,
            warped: Vec::new(),
            dense_grid: None,
            cross_cell: false,
        }
    }
}

/// Output of [`CsgModel::forward_embeddings`].
#[derive(Debug)]
pub struct Embedded {
    pub batch: ContrastiveBatch,
    /// Student stage maps of the anchors, reusable for the task head.
    pub student_maps: Vec<Var>,
    /// Teacher embeddings of the anchors per layer (the positives).
    pub teacher_embeddings: BTreeMap<usize, Tensor>,
    /// A-pool maps of both paths, student first.
    pub attention: Vec<AttentionMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsgModel {
    pub student: Network,
    pub teacher: Backbone,
    pub heads: BTreeMap<usize, ProjectionHead>,
    pub shadow_heads: BTreeMap<usize, ProjectionHead>,
    pub ema_momentum: f64,
    pub proj_dim: usize,
}

impl CsgModel {
    /// Student initialised from the teacher snapshot with a new task head;
    /// projection heads for `layers` with shadows equal to them.
    pub fn new<R: Rng + ?Sized>(
        teacher: &Backbone,
        arch: &Architecture,
        task_pool: PoolingKind,
        layers: &[usize],
        proj_dim: usize,
        ema_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_momentum) {
            return Err(CsgError::Config(format!("ema momentum {} outside [0, 1]", ema_momentum)));
        }
        let specs = arch.stage_specs();
        for (s, spec) in teacher.stages.iter().zip(&specs) {
            if s.kernel.shape() != [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel] {
                return dim_err(format!("teacher stage {:?} does not match {:?}", s.kernel.shape(), spec));
            }
        }
        let (task_weight, task_bias) = Network::fresh_task_head(arch, rng);
        let student = Network {
            arch: arch.clone(),
            backbone: teacher.clone(),
            task_weight,
            task_bias,
            task_pool,
        };
        let mut heads = BTreeMap::new();
        for &l in layers {
            if !(1..=4).contains(&l) {
                return contract_err(format!("layer group {} outside 1..=4", l));
            }
            heads.insert(l, ProjectionHead::new(arch.channels[l - 1], proj_dim, rng));
        }
        Ok(Self {
            student,
            teacher: teacher.clone(),
            shadow_heads: heads.clone(),
            heads,
            ema_momentum,
            proj_dim,
        })
    }

    pub fn layers(&self) -> Vec<usize> {
        self.heads.keys().copied().collect()
    }

    /// `shadow ← m·shadow + (1−m)·head` for every head parameter.
    pub fn ema_update(&mut self) {
        let m = self.ema_momentum;
        for (l, shadow) in self.shadow_heads.iter_mut() {
            let Some(head) = self.heads.get(l) else { continue };
            for ((_, s), (_, h)) in shadow.tensors_mut().into_iter().zip(head.tensors()) {
                s.data_mut()
                    .iter_mut()
                    .zip(h.data())
                    .for_each(|(sv, hv)| *sv = m * *sv + (1.0 - m) * hv);
            }
        }
    }

    /// Contrastive embeddings for a batch of (already augmented) anchors.
    ///
    /// Anchors go through the student and `h`; positives are the teacher
    /// with the shadow head on the same images. With `negatives = None` the
    /// other images of the batch (plus queued rows) are the negatives,
    /// otherwise every anchor is contrasted against the given images.
    pub fn forward_embeddings(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        anchors: &Tensor,
        negatives: Option<&Tensor>,
        queue: Option<&EmbeddingQueue>,
        opts: &EmbedOptions,
    ) -> Result<Embedded> {
        if opts.layers.is_empty() {
            return contract_err("no layer groups requested");
        }
        let n = *anchors.shape().first().unwrap_or(&0);
        if let Some(neg) = negatives {
            if neg.shape().len() != 4 || neg.shape()[1..] != anchors.shape()[1..] {
                return dim_err(format!("negatives {:?} vs anchors {:?}", neg.shape(), anchors.shape()));
            }
        }
        let x = g.constant(anchors.clone());
        let student_maps = self.student.backbone.forward_var(g, bind, "backbone", x)?;
        let teacher_maps = self.teacher.forward(anchors)?;
        let neg_teacher = match (negatives, opts.negatives) {
            (Some(neg), NegativeSource::Teacher) => Some(self.teacher.forward(neg)?),
            _ => None,
        };
        let neg_student = match (negatives, opts.negatives) {
            (Some(neg), NegativeSource::Student) => {
                let xn = g.constant(neg.clone());
                Some(self.student.backbone.forward_var(g, bind, "backbone", xn)?)
            }
            _ => None,
        };

        let mut batch = ContrastiveBatch::default();
        let mut teacher_embeddings = BTreeMap::new();
        let mut attention = Vec::new();
        for &l in &opts.layers {
            let (head, shadow) = match (self.heads.get(&l), self.shadow_heads.get(&l)) {
                (Some(h), Some(s)) => (h, s),
                _ => return contract_err(format!("model has no projection head for layer {}", l)),
            };
            let prefix = format!("head{}", l);
            let s_map = student_maps[l - 1];
            let t_map = &teacher_maps[l - 1];

            let (s_pooled, mut s_attn) = self.pool_var(g, s_map, opts)?;
            attention.append(&mut s_attn);
            let warped_source = self.teacher_attention_source(g.value(s_map), t_map, opts)?;
            let (t_pooled, mut t_attn) = pool_tensor(t_map, warped_source.as_ref(), opts)?;
            attention.append(&mut t_attn);

            let za = head.forward_var(g, bind, &prefix, s_pooled)?;
            let za = g.l2_normalize(za);
            let zp = shadow.forward(&t_pooled)?.l2_normalize();
            teacher_embeddings.insert(l, zp.clone());
            let positives = g.constant(zp);
            let cells = g.value(za).shape()[0] / n.max(1);

            let (bank, mut rows) = match negatives {
                None => {
                    let bank = match opts.negatives {
                        NegativeSource::Teacher => positives,
                        NegativeSource::Student => za,
                    };
                    let rows = match opts.dense_grid {
                        Some(_) => dense_negative_rows(n, cells, opts.cross_cell),
                        None => in_batch_negative_rows(n, 0),
                    };
                    (bank, rows)
                }
                Some(neg) => {
                    let k = neg.shape()[0];
                    let bank = if let Some(maps) = &neg_teacher {
                        let (p, mut a) = pool_tensor(&maps[l - 1], None, opts)?;
                        attention.append(&mut a);
                        g.constant(shadow.forward(&p)?.l2_normalize())
                    } else if let Some(maps) = &neg_student {
                        let (p, mut a) = self.pool_var(g, maps[l - 1], opts)?;
                        attention.append(&mut a);
                        let z = head.forward_var(g, bind, &prefix, p)?;
                        g.l2_normalize(z)
                    } else {
                        positives
                    };
                    let rows = (0..n * cells)
                        .map(|r| (0..k).map(|j| j * cells + r % cells).collect())
                        .collect();
                    (bank, rows)
                }
            };

            let queued = if opts.dense_grid.is_none() && opts.negatives == NegativeSource::Teacher {
                queue.and_then(|q| q.snapshot(l))
            } else {
                None
            };
            let negatives_var = match queued {
                Some(extra) if extra.shape()[1] == self.proj_dim => {
                    let offset = g.value(bank).shape()[0];
                    let q = extra.shape()[0];
                    rows.iter_mut().for_each(|r| r.extend(offset..offset + q));
                    let extra = g.constant(extra);
                    g.concat_rows(&[bank, extra])?
                }
                _ => bank,
            };
            batch.layers.insert(
                l,
                LayerEmbeddings {
                    anchors: za,
                    positives,
                    negatives: negatives_var,
                    negative_rows: rows,
                },
            );
        }
        Ok(Embedded {
            batch,
            student_maps,
            teacher_embeddings,
            attention,
        })
    }

    fn pool_var(&self, g: &mut Graph, map: Var, opts: &EmbedOptions) -> Result<(Var, Vec<AttentionMap>)> {
        match (opts.dense_grid, opts.pooling) {
            (Some(grid), _) => Ok((pooling::patch_pool_var(g, map, grid)?, Vec::new())),
            (None, PoolingKind::Gap) => Ok((pooling::gap_var(g, map)?, Vec::new())),
            (None, PoolingKind::Apool) => pooling::apool_var(g, map, None),
        }
    }

    /// Attention source for the teacher A-pool: the (detached) student map
    /// for warped anchors, the teacher's own map otherwise.
    fn teacher_attention_source(&self, student: &Tensor, teacher: &Tensor, opts: &EmbedOptions) -> Result<Option<Tensor>> {
        if opts.dense_grid.is_some() || opts.pooling != PoolingKind::Apool || !opts.warped.iter().any(|&w| w) {
            return Ok(None);
        }
        if student.shape() != teacher.shape() {
            return dim_err("student and teacher maps differ in shape");
        }
        let per = teacher.numel() / teacher.shape()[0];
        let mut src = teacher.clone();
        for (i, &w) in opts.warped.iter().enumerate() {
            if w {
                src.data_mut()[i * per..(i + 1) * per].copy_from_slice(&student.data()[i * per..(i + 1) * per]);
            }
        }
        Ok(Some(src))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.student.manifest(
            CheckpointKind::Csg,
            self.layers(),
            self.proj_dim,
            Some(self.ema_momentum),
        );
        write_checkpoint(dir, &CheckpointView(self), manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != CheckpointKind::Csg {
            return Err(CsgError::Format {
                path: dir.join(MANIFEST),
                reason: "not a CSG checkpoint".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = Backbone::new(&manifest.arch, &mut rng);
        let mut model = CsgModel::new(
            &teacher,
            &manifest.arch,
            manifest.task_pool,
            &manifest.layers,
            manifest.proj_dim,
            manifest.ema_momentum.unwrap_or(0.99),
            &mut rng,
        )?;
        fill_from_dir(dir, &mut CheckpointViewMut(&mut model))?;
        Ok(model)
    }
}

fn pool_tensor(map: &Tensor, source: Option<&Tensor>, opts: &EmbedOptions) -> Result<(Tensor, Vec<AttentionMap>)> {
    match (opts.dense_grid, opts.pooling) {
        (Some(grid), _) => Ok((pooling::patch_pool_batch(map, grid)?, Vec::new())),
        (None, PoolingKind::Gap) => Ok((map.mean_axes(&[2, 3])?, Vec::new())),
        (None, PoolingKind::Apool) => pooling::apool_batch(map, source),
    }
}

/// Trainable parameters only: student network and projection heads.
impl Params for CsgModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.student.visit(f);
        for (l, h) in &self.heads {
            for (name, t) in h.tensors() {
                f(&format!("head{}.{}", l, name), t);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.student.visit_mut(f);
        for (l, h) in self.heads.iter_mut() {
            for (name, t) in h.tensors_mut() {
                f(&format!("head{}.{}", l, name), t);
            }
        }
    }
}

/// Every tensor of a CSG model, frozen parts included.
struct CheckpointView<'a>(&'a CsgModel);
struct CheckpointViewMut<'a>(&'a mut CsgModel);

impl Params for CheckpointView<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.0.visit(f);
        self.0.teacher.visit_prefixed("teacher", f);
        for (l, h) in &self.0.shadow_heads {
            for (name, t) in h.tensors() {
                f(&format!("shadow{}.{}", l, name), t);
            }
        }
    }

    fn visit_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

impl Params for CheckpointViewMut<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        CheckpointView(self.0).visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.0.visit_mut(f);
        self.0.teacher.visit_prefixed_mut("teacher", f);
        for (l, h) in self.0.shadow_heads.iter_mut() {
            for (name, t) in h.tensors_mut() {
                f(&format!("shadow{}.{}", l, name), t);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Network,
    Csg,
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: CheckpointKind,
    pub arch: Architecture,
    pub stages: Vec<StageSpec>,
    pub task_pool: PoolingKind,
    pub layers: Vec<usize>,
    pub proj_dim: usize,
    pub ema_momentum: Option<f64>,
    pub tensors: Vec<String>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CsgError::Format {
        path,
        reason: e.to_string(),
    })
}

fn write_checkpoint(dir: &Path, params: &dyn Params, mut manifest: Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut failure = None;
    params.visit(&mut |name, t| {
        if failure.is_none() {
            if let Err(e) = io::save(t, &dir.join(format!("{}.csgt", name))) {
                failure = Some(e);
            }
            manifest.tensors.push(name.to_string());
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn fill_from_dir(dir: &Path, params: &mut dyn Params) -> Result<()> {
    let mut failure = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let path = dir.join(format!("{}.csgt", name));
        match io::load(&path) {
            Ok(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Ok(loaded) => {
                failure = Some(CsgError::Format {
                    path,
                    reason: format!("shape {:?}, expected {:?}", loaded.shape(), t.shape()),
                })
            }
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

/// Momentum SGD with the L2 term folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }

    /// Update every parameter that has an entry in `grads`.
    ///
    /// All gradients are checked before anything is written, so a
    /// non-finite gradient leaves the parameters untouched.
    pub fn step(&mut self, params: &mut dyn Params, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(CsgError::NonFinite { name: name.clone() });
        }
        let SgdConfig {
            lr,
            weight_decay,
            momentum,
        } = self.cfg;
        let velocity = &mut self.velocity;
        let mut failure = None;
        params.visit_mut(&mut |name, p| {
            let Some(grad) = grads.get(name) else { return };
            if grad.shape() != p.shape() {
                failure.get_or_insert(CsgError::Dimension(format!(
                    "gradient {:?} for parameter `{}` of {:?}",
                    grad.shape(),
                    name,
                    p.shape()
                )));
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                let step = gv + weight_decay * *pv;
                *vv = momentum * *vv + step;
                *pv -= lr * *vv;
            }
        });
        failure.map_or(Ok(()), Err)
    }
}
