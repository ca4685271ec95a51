//! InfoNCE (image-level, multi-layer, dense) and the supervised task losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, CsgError, Result};
use crate::tensor::{Backward, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NceMode {
    Image,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NceConfig {
    pub temperature: f64,
    pub lambda: f64,
    /// Layer groups (1-based backbone stages) that receive the loss.
    pub layers: Vec<usize>,
    /// Dense patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    pub mode: NceMode,
    /// Dense mode: also contrast each cell against the other cells of its own image.
    pub cross_cell_negatives: bool,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda: 0.1,
            layers: vec![3, 4],
            grid: (8, 8),
            mode: NceMode::Image,
            cross_cell_negatives: false,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CsgError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(CsgError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.grid.0 * self.grid.1 == 0 {
            return Err(CsgError::Config(format!("dense grid {:?} has no cells", self.grid)));
        }
        if self.layers.is_empty() || self.layers.iter().any(|l| !(1..=4).contains(l)) {
            return Err(CsgError::Config(format!("layers {:?} must be a nonempty subset of 1..=4", self.layers)));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(CsgError::Config(format!("duplicate layers in {:?}", self.layers)));
        }
        Ok(())
    }
}

/// Embeddings for one layer group.
///
/// Row `i` of `anchors` is contrasted against row `i` of `positives` and
/// the rows of `negatives` listed in `negative_rows[i]`. All rows are
/// expected to be unit length.
#[derive(Debug, Clone)]
pub struct LayerEmbeddings {
    pub anchors: Var,
    pub positives: Var,
    pub negatives: Var,
    pub negative_rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default)]
pub struct ContrastiveBatch {
    pub layers: BTreeMap<usize, LayerEmbeddings>,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        contract_err(format!("temperature must be positive, got {}", tau))
    }
}

/// Stable `log(sum(exp(x)))` and the softmax of `x`.
fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    (m + total.ln(), exps.into_iter().map(|e| e / total).collect())
}

struct ContrastiveRule {
    tau: f64,
    rows: Vec<Vec<usize>>,
}

impl ContrastiveRule {
    fn logits(&self, a: &[f64], p: &[f64], n: &[f64], c: usize, i: usize) -> Vec<f64> {
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
        let ai = &a[i * c..(i + 1) * c];
        std::iter::once(dot(ai, &p[i * c..(i + 1) * c]))
            .chain(self.rows[i].iter().map(|&j| dot(ai, &n[j * c..(j + 1) * c])))
            .map(|d| d / self.tau)
            .collect()
    }

    fn forward(&self, a: &Tensor, p: &Tensor, n: &Tensor) -> f64 {
        let c = a.shape()[1];
        let rows = self.rows.len();
        let total: f64 = (0..rows)
            .map(|i| {
                let l = self.logits(a.data(), p.data(), n.data(), c, i);
                let (lse, _) = log_softmax_parts(&l);
                lse - l[0]
            })
            .sum();
        total / rows as f64
    }
}

impl Backward for ContrastiveRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, p, n) = (inputs[0], inputs[1], inputs[2]);
        let c = a.shape()[1];
        let rows = self.rows.len();
        let scale = grad_out[0] / rows as f64 / self.tau;
        let mut ga = vec![0.0; a.numel()];
        let mut gp = vec![0.0; p.numel()];
        let mut gn = vec![0.0; n.numel()];
        for i in 0..rows {
            let l = self.logits(a.data(), p.data(), n.data(), c, i);
            let (_, prob) = log_softmax_parts(&l);
            // d loss / d logit_k = prob_k - [k == 0]
            let ai = &a.data()[i * c..(i + 1) * c];
            let w0 = (prob[0] - 1.0) * scale;
            for d in 0..c {
                ga[i * c + d] += w0 * p.data()[i * c + d];
                gp[i * c + d] += w0 * ai[d];
            }
            for (k, &j) in self.rows[i].iter().enumerate() {
                let w = prob[k + 1] * scale;
                for d in 0..c {
                    ga[i * c + d] += w * n.data()[j * c + d];
                    gn[j * c + d] += w * ai[d];
                }
            }
        }
        vec![Some(ga), Some(gp), Some(gn)]
    }
}

/// Mean InfoNCE over anchor rows, evaluated with max-subtracted log-sum-exp:
///
/// `-log( e^{a.p/t} / (e^{a.p/t} + sum_k e^{a.n_k/t}) )`
pub fn info_nce_rows(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    negatives: Var,
    negative_rows: &[Vec<usize>],
    tau: f64,
) -> Result<Var> {
    check_temperature(tau)?;
    let (a, p, n) = (g.value(anchors), g.value(positives), g.value(negatives));
    if a.rank() != 2 || p.shape() != a.shape() {
        return dim_err(format!("anchors {:?} vs positives {:?}", a.shape(), p.shape()));
    }
    if n.rank() != 2 || n.shape()[1] != a.shape()[1] {
        return dim_err(format!("negatives {:?} vs anchors {:?}", n.shape(), a.shape()));
    }
    if negative_rows.len() != a.shape()[0] {
        return contract_err(format!("{} negative lists for {} anchors", negative_rows.len(), a.shape()[0]));
    }
    if negative_rows.is_empty() {
        return contract_err("contrastive loss over zero anchors");
    }
    let bound = n.shape()[0];
    if negative_rows.iter().flatten().any(|&j| j >= bound) {
        return dim_err(format!("negative row index beyond {} rows", bound));
    }
    let rule = ContrastiveRule {
        tau,
        rows: negative_rows.to_vec(),
    };
    let value = rule.forward(a, p, n);
    Ok(g.custom(&[anchors, positives, negatives], Tensor::scalar(value), Box::new(rule)))
}

fn as_row(g: &mut Graph, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, &[1, n])
}

/// InfoNCE for one anchor against one positive and `K` negatives
/// (`negatives` is `K x c`, or `None` for `K = 0`).
pub fn info_nce(g: &mut Graph, anchor: Var, positive: Var, negatives: Option<Var>, tau: f64) -> Result<Var> {
    let a = as_row(g, anchor)?;
    let p = as_row(g, positive)?;
    if g.value(a).shape() != g.value(p).shape() {
        return dim_err("anchor and positive differ in dimension");
    }
    let (n, k) = match negatives {
        Some(n) => (n, g.value(n).shape()[0]),
        None => (p, 0),
    };
    info_nce_rows(g, a, p, n, &[(0..k).collect()], tau)
}

/// Unweighted sum of per-layer InfoNCE over the configured layer groups.
pub fn multi_layer_nce(g: &mut Graph, batch: &ContrastiveBatch, cfg: &NceConfig) -> Result<(Var, BTreeMap<usize, f64>)> {
    let mut per_layer = BTreeMap::new();
    let mut total: Option<Var> = None;
    for &l in &cfg.layers {
        let e = batch
            .layers
            .get(&l)
            .ok_or_else(|| CsgError::Contract(format!("batch has no embeddings for layer {}", l)))?;
        let loss = info_nce_rows(g, e.anchors, e.positives, e.negatives, &e.negative_rows, cfg.temperature)?;
        per_layer.insert(l, g.value(loss).item()?);
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or_else(|| CsgError::Contract("empty layer set".into()))?;
    Ok((total, per_layer))
}

/// Negative lists for dense contrast over a batch of `images` with `cells`
/// cells each, laid out image-major. Cell `(b, i)` is contrasted against
/// `(b', i)` for every other image `b'` and, with `cross_cell`, against
/// `(b, i')` for every other cell `i'` of its own image.
pub fn dense_negative_rows(images: usize, cells: usize, cross_cell: bool) -> Vec<Vec<usize>> {
    let mut rows = Vec::with_capacity(images * cells);
    for b in 0..images {
        for i in 0..cells {
            let mut r: Vec<usize> = (0..images).filter(|&o| o != b).map(|o| o * cells + i).collect();
            if cross_cell {
                r.extend((0..cells).filter(|&o| o != i).map(|o| b * cells + o));
            }
            rows.push(r);
        }
    }
    rows
}

/// In-batch negatives: every row except the anchor's own.
pub fn in_batch_negative_rows(batch: usize, extra: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| (0..batch + extra).filter(|&j| j != i).collect())
        .collect()
}

/// Dense InfoNCE for one image: mean over cells of per-cell InfoNCE.
///
/// Each argument holds already embedded, normalised cells (`N_l x c`). The
/// negatives of cell `i` are cell `i` of every negative map, plus the other
/// positive cells of the same image when `cross_cell` is set.
pub fn dense_nce(
    g: &mut Graph,
    anchor_cells: Var,
    positive_cells: Var,
    negative_cells: &[Var],
    cross_cell: bool,
    tau: f64,
) -> Result<Var> {
    let shape = g.value(anchor_cells).shape().to_vec();
    if shape.len() != 2 || g.value(positive_cells).shape() != &shape[..] {
        return dim_err("anchor and positive cells must share an N_l x c shape");
    }
    for &n in negative_cells {
        if g.value(n).shape() != &shape[..] {
            return dim_err(format!("negative cells {:?} vs {:?}", g.value(n).shape(), shape));
        }
    }
    let cells = shape[0];
    let k = negative_cells.len();
    let mut bank: Vec<Var> = negative_cells.to_vec();
    if cross_cell {
        bank.push(positive_cells);
    }
    let rows: Vec<Vec<usize>> = (0..cells)
        .map(|i| {
            let mut r: Vec<usize> = (0..k).map(|m| m * cells + i).collect();
            if cross_cell {
                r.extend((0..cells).filter(|&o| o != i).map(|o| k * cells + o));
            }
            r
        })
        .collect();
    let negatives = if bank.is_empty() { positive_cells } else { g.concat_rows(&bank)? };
    info_nce_rows(g, anchor_cells, positive_cells, negatives, &rows, tau)
}

/// `task + lambda * nce`.
pub fn total_loss(g: &mut Graph, task: Var, nce: Var, lambda: f64) -> Result<Var> {
    for (name, v) in [("task loss", task), ("nce loss", nce)] {
        let x = g.value(v).item()?;
        if !x.is_finite() {
            return Err(CsgError::NumericDomain(format!("{} is {}", name, x)));
        }
    }
    if !lambda.is_finite() {
        return Err(CsgError::NumericDomain(format!("lambda is {}", lambda)));
    }
    let weighted = g.scale(nce, lambda);
    g.add(task, weighted)
}

struct CrossEntropyRule {
    /// Per sample: softmax probabilities and target (None when ignored).
    classes: usize,
    targets: Vec<Option<usize>>,
    /// Spatial positions per image (1 for plain classification).
    positions: usize,
}

impl CrossEntropyRule {
    fn column(&self, logits: &[f64], s: usize) -> Vec<f64> {
        let (img, pos) = (s / self.positions, s % self.positions);
        (0..self.classes)
            .map(|k| logits[(img * self.classes + k) * self.positions + pos])
            .collect()
    }

    fn valid(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    fn forward(&self, logits: &[f64]) -> f64 {
        let valid = self.valid();
        if valid == 0 {
            return 0.0;
        }
        let total: f64 = self
            .targets
            .iter()
            .enumerate()
            .filter_map(|(s, t)| t.map(|t| (s, t)))
            .map(|(s, t)| {
                let col = self.column(logits, s);
                let (lse, _) = log_softmax_parts(&col);
                lse - col[t]
            })
            .sum();
        total / valid as f64
    }
}

impl Backward for CrossEntropyRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let logits = inputs[0].data();
        let mut gl = vec![0.0; logits.len()];
        let valid = self.valid();
        if valid > 0 {
            let scale = grad_out[0] / valid as f64;
            for (s, t) in self.targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let (_, prob) = log_softmax_parts(&self.column(logits, s));
                let (img, pos) = (s / self.positions, s % self.positions);
                for (k, p) in prob.iter().enumerate() {
                    let target = if k == t { 1.0 } else { 0.0 };
                    gl[(img * self.classes + k) * self.positions + pos] += (p - target) * scale;
                }
            }
        }
        vec![Some(gl)]
    }
}

/// Mean `-log softmax(logits)[label]` over the rows of an `N x K` matrix.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = match g.value(logits).shape() {
        [n, k] => (*n, *k),
        s => return dim_err(format!("logits must be N x K, got {:?}", s)),
    };
    if labels.len() != n {
        return dim_err(format!("{} labels for {} rows", labels.len(), n));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return contract_err(format!("label {} out of range for {} classes", bad, k));
    }
    let rule = CrossEntropyRule {
        classes: k,
        targets: labels.iter().map(|&l| Some(l)).collect(),
        positions: 1,
    };
    let value = rule.forward(g.value(logits).data());
    Ok(g.custom(&[logits], Tensor::scalar(value), Box::new(rule)))
}

/// Per-pixel cross-entropy over `N x K x H x W` logits and `N x H x W`
/// labels, averaged over pixels whose label is not `ignore_index`.
pub fn pixel_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], ignore_index: Option<usize>) -> Result<Var> {
    let (n, k, h, w) = match g.value(logits).shape() {
        [n, k, h, w] => (*n, *k, *h, *w),
        s => return dim_err(format!("logit map must be N x K x H x W, got {:?}", s)),
    };
    if labels.len() != n * h * w {
        return dim_err(format!("{} labels for {} pixels", labels.len(), n * h * w));
    }
    let mut targets = Vec::with_capacity(labels.len());
    for &l in labels {
        if Some(l) == ignore_index {
            targets.push(None);
        } else if l >= k {
            return contract_err(format!("label {} out of range for {} classes", l, k));
        } else {
            targets.push(Some(l));
        }
    }
    let rule = CrossEntropyRule {
        classes: k,
        targets,
        positions: h * w,
    };
    let value = rule.forward(g.value(logits).data());
    Ok(g.custom(&[logits], Tensor::scalar(value), Box::new(rule)))
}
