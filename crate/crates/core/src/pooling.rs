//! Spatial pooling: global average pooling, attention pooling (A-pool) and
//! grid patch pooling.
//!
//! A-pool weights every position by the inner product of its feature
//! vector with the global average vector, normalised to sum to one:
//!
//! ```text
//! a_ij = <v_:ij, mean(v)> / sum_kl <v_:kl, mean(v)>
//! out_c = sum_ij v_cij * a_ij
//! ```
//!
//! The weights can come from a second map (`source`); the teacher path uses
//! the student's map when the input was spatially warped. Raw inner products
//! are kept, so individual weights may be negative; only a near-zero
//! denominator switches to uniform weights.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{io, Backward, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    #[default]
    Gap,
    Apool,
}

/// Denominators below this magnitude fall back to uniform attention.
pub const ATTENTION_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `h x w` weights summing to one.
    pub weights: Tensor,
    /// Set when the denominator was degenerate and uniform weights were used.
    pub fallback: bool,
}

impl AttentionMap {
    /// Attention relative to uniform pooling, `a * h * w`.
    pub fn ratio(&self) -> Tensor {
        let uniform = 1.0 / self.weights.numel() as f64;
        self.weights.map(|a| a / uniform)
    }

    pub fn total(&self) -> f64 {
        self.weights.sum_all()
    }

    pub fn negative_count(&self) -> usize {
        self.weights.data().iter().filter(|&&a| a < 0.0).count()
    }

    /// Write the ratio map as `attn_<split>_<index>_<layer>.csv` under `dir`.
    pub fn export_ratio(&self, dir: &Path, split: &str, index: usize, layer: usize) -> Result<PathBuf> {
        let path = dir.join(format!("attn_{}_{}_{}.csv", split, index, layer));
        io::save_csv(&self.ratio(), &path)?;
        Ok(path)
    }
}

fn map_dims(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((1, *c, *h, *w)),
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => dim_err(format!("feature map must be CxHxW or NxCxHxW, got {:?}", s)),
    }
}

/// Global average pooling of one `C x h x w` map.
pub fn gap(v: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = map_dims(v)?;
    if n != 1 || v.rank() != 3 {
        return dim_err("gap expects a single C x h x w map");
    }
    let hw = (h * w) as f64;
    Ok(Tensor::from_vec(
        v.data().chunks(h * w).take(c).map(|ch| ch.iter().sum::<f64>() / hw).collect(),
    ))
}

/// Per-image pieces of an A-pool evaluation.
struct APoolImage {
    pooled: Vec<f64>,
    weights: Vec<f64>,
    source_mean: Vec<f64>,
    denom: f64,
    fallback: bool,
}

fn apool_image(v: &[f64], src: &[f64], c: usize, hw: usize) -> APoolImage {
    let source_mean: Vec<f64> = (0..c).map(|ch| src[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let mut scores = vec![0.0; hw];
    for (ch, &m) in source_mean.iter().enumerate() {
        for (s, &x) in scores.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            *s += x * m;
        }
    }
    let denom: f64 = scores.iter().sum();
    let fallback = denom.abs() < ATTENTION_FALLBACK;
    let flat = scores.iter().all(|&s| s == scores[0]);
    let weights: Vec<f64> = if fallback || flat {
        vec![1.0 / hw as f64; hw]
    } else {
        scores.iter().map(|s| s / denom).collect()
    };
    let pooled = (0..c)
        .map(|ch| v[ch * hw..(ch + 1) * hw].iter().zip(&weights).map(|(x, a)| x * a).sum())
        .collect();
    APoolImage {
        pooled,
        weights,
        source_mean,
        denom,
        fallback,
    }
}

/// A-pool of one `C x h x w` map; weights come from `source` (defaults to `v`).
pub fn apool(v: &Tensor, source: Option<&Tensor>) -> Result<(Tensor, AttentionMap)> {
    let (pooled, maps) = apool_batch(v, source)?;
    let map = maps.into_iter().next().expect("one image");
    Ok((pooled.reshape(&[pooled.numel()])?, map))
}

/// A-pool over a batch (`N x C x h x w` -> `N x C`) or a single map (-> `C`).
pub fn apool_batch(v: &Tensor, source: Option<&Tensor>) -> Result<(Tensor, Vec<AttentionMap>)> {
    let (n, c, h, w) = map_dims(v)?;
    let src = source.unwrap_or(v);
    if src.shape() != v.shape() {
        return dim_err(format!("attention source {:?} vs map {:?}", src.shape(), v.shape()));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut maps = Vec::with_capacity(n);
    for i in 0..n {
        let span = i * c * hw..(i + 1) * c * hw;
        let r = apool_image(&v.data()[span.clone()], &src.data()[span], c, hw);
        out.extend_from_slice(&r.pooled);
        maps.push(AttentionMap {
            weights: Tensor::new(vec![h, w], r.weights)?,
            fallback: r.fallback,
        });
    }
    let shape = if v.rank() == 3 { vec![c] } else { vec![n, c] };
    Ok((Tensor::new(shape, out)?, maps))
}

/// Partition bounds along one axis: `parts` near-equal spans with the
/// remainder added to the last span.
fn spans(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    (0..parts)
        .map(|p| {
            let start = p * base;
            let end = if p + 1 == parts { len } else { start + base };
            (start, end)
        })
        .collect()
}

fn check_grid(h: usize, w: usize, grid: (usize, usize)) -> Result<()> {
    let (r, s) = grid;
    if r * s == 0 {
        return contract_err(format!("patch grid {:?} has no cells", grid));
    }
    if r > h || s > w {
        return contract_err(format!("patch grid {:?} larger than {}x{} map", grid, h, w));
    }
    Ok(())
}

fn patch_pool_raw(v: &Tensor, grid: (usize, usize)) -> Result<(Tensor, usize)> {
    let (n, c, h, w) = map_dims(v)?;
    check_grid(h, w, grid)?;
    let (rows, cols) = (spans(h, grid.0), spans(w, grid.1));
    let cells = grid.0 * grid.1;
    let mut out = Vec::with_capacity(n * cells * c);
    for i in 0..n {
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..c {
                    let base = (i * c + ch) * h * w;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += v.data()[base + y * w + x0..base + y * w + x1].iter().sum::<f64>();
                    }
                    out.push(acc / count);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n * cells, c], out)?, cells))
}

/// GAP over each cell of an `r x s` grid, row-major; one `C`-vector per cell.
pub fn patch_pool(v: &Tensor, grid: (usize, usize)) -> Result<Vec<Tensor>> {
    if v.rank() != 3 {
        return dim_err("patch_pool expects a single C x h x w map");
    }
    let (cells, _) = patch_pool_raw(v, grid)?;
    (0..cells.shape()[0]).map(|r| cells.index_outer(r)).collect()
}

/// Patch pooling over a batch: `N x C x h x w` -> `(N * r * s) x C`.
pub fn patch_pool_batch(v: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    Ok(patch_pool_raw(v, grid)?.0)
}

/// Tape version of GAP: `N x C x h x w` -> `N x C` (or `C x h x w` -> `C`).
pub fn gap_var(g: &mut Graph, v: Var) -> Result<Var> {
    let rank = g.value(v).rank();
    map_dims(g.value(v))?;
    g.mean_axes(v, &[rank - 2, rank - 1])
}

struct APoolRule {
    same_source: bool,
}

impl Backward for APoolRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let v = inputs[0];
        let src = if self.same_source { v } else { inputs[1] };
        let (n, c, h, w) = map_dims(v).expect("validated in forward");
        let hw = h * w;
        let mut gv = vec![0.0; v.numel()];
        let mut gs = vec![0.0; v.numel()];
        for i in 0..n {
            let span = i * c * hw..(i + 1) * c * hw;
            let (vi, si) = (&v.data()[span.clone()], &src.data()[span.clone()]);
            let r = apool_image(vi, si, c, hw);
            let go = &grad_out[i * c..(i + 1) * c];
            // value path
            let mut d_weights = vec![0.0; hw];
            for ch in 0..c {
                let row = ch * hw;
                for p in 0..hw {
                    gv[span.start + row + p] += go[ch] * r.weights[p];
                    d_weights[p] += go[ch] * vi[row + p];
                }
            }
            if r.fallback {
                continue;
            }
            // attention path: a = score / denom
            let weighted: f64 = d_weights.iter().zip(&r.weights).map(|(d, a)| d * a).sum();
            let d_scores: Vec<f64> = d_weights.iter().map(|d| (d - weighted) / r.denom).collect();
            // score_p = <src_p, mean>
            let mut d_mean = vec![0.0; c];
            for ch in 0..c {
                let row = ch * hw;
                for p in 0..hw {
                    gs[span.start + row + p] += d_scores[p] * r.source_mean[ch];
                    d_mean[ch] += d_scores[p] * si[row + p];
                }
            }
            for ch in 0..c {
                let share = d_mean[ch] / hw as f64;
                gs[span.start + ch * hw..span.start + (ch + 1) * hw]
                    .iter_mut()
                    .for_each(|x| *x += share);
            }
        }
        if self.same_source {
            gv.iter_mut().zip(&gs).for_each(|(a, b)| *a += b);
            vec![Some(gv)]
        } else {
            vec![Some(gv), Some(gs)]
        }
    }
}

/// Tape version of A-pool. Gradients flow through both the pooled values and
/// the attention weights; `source` (when given) receives the attention part.
pub fn apool_var(g: &mut Graph, v: Var, source: Option<Var>) -> Result<(Var, Vec<AttentionMap>)> {
    let src = source.filter(|&s| s != v);
    let (pooled, maps) = apool_batch(g.value(v), src.map(|s| g.value(s)))?;
    let inputs: Vec<Var> = std::iter::once(v).chain(src).collect();
    let out = g.custom(
        &inputs,
        pooled,
        Box::new(APoolRule {
            same_source: src.is_none(),
        }),
    );
    Ok((out, maps))
}

struct PatchPoolRule {
    grid: (usize, usize),
}

impl Backward for PatchPoolRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let v = inputs[0];
        let (n, c, h, w) = map_dims(v).expect("validated in forward");
        let (rows, cols) = (spans(h, self.grid.0), spans(w, self.grid.1));
        let mut gv = vec![0.0; v.numel()];
        let mut k = 0;
        for i in 0..n {
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    for ch in 0..c {
                        let share = grad_out[k * c + ch] / count;
                        let base = (i * c + ch) * h * w;
                        for y in y0..y1 {
                            gv[base + y * w + x0..base + y * w + x1].iter_mut().for_each(|x| *x += share);
                        }
                    }
                    k += 1;
                }
            }
        }
        vec![Some(gv)]
    }
}

/// Tape version of patch pooling: `N x C x h x w` -> `(N * r * s) x C`,
/// image-major then row-major cells.
pub fn patch_pool_var(g: &mut Graph, v: Var, grid: (usize, usize)) -> Result<Var> {
    let (cells, _) = patch_pool_raw(g.value(v), grid)?;
    Ok(g.custom(&[v], cells, Box::new(PatchPoolRule { grid })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn gap_examples() {
        let v = Tensor::full(&[3, 2, 2], 3.0);
        assert_eq!(gap(&v).unwrap().data(), &[3.0, 3.0, 3.0]);
        let v = map(1, 2, 2, vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(gap(&v).unwrap().data(), &[4.0]);
    }

    #[test]
    fn apool_hand_computed() {
        let v = map(1, 2, 2, vec![1.0, 3.0, 1.0, 3.0]);
        let (pooled, att) = apool(&v, None).unwrap();
        assert_eq!(att.weights.data(), &[0.125, 0.375, 0.125, 0.375]);
        assert_eq!(pooled.data(), &[2.5]);
        assert!(!att.fallback);
    }

    #[test]
    fn apool_constant_map_matches_gap() {
        let v = Tensor::full(&[4, 3, 3], -1.7);
        let (pooled, att) = apool(&v, None).unwrap();
        assert!(pooled.max_abs_diff(&gap(&v).unwrap()) < 1e-12);
        assert!(att.ratio().data().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn apool_zero_map_falls_back() {
        let v = Tensor::zeros(&[2, 3, 3]);
        let (pooled, att) = apool(&v, None).unwrap();
        assert!(att.fallback);
        assert_eq!(pooled.data(), &[0.0, 0.0]);
        assert!((att.total() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn apool_external_source() {
        // weights from a source concentrated on one pixel
        let v = map(1, 1, 2, vec![10.0, 20.0]);
        let src = map(1, 1, 2, vec![0.0, 1.0]);
        let (pooled, att) = apool(&v, Some(&src)).unwrap();
        assert_eq!(att.weights.data(), &[0.0, 1.0]);
        assert_eq!(pooled.data(), &[20.0]);
        assert!(apool(&v, Some(&Tensor::zeros(&[1, 2, 1]))).is_err());
    }

    #[test]
    fn negative_attention_is_counted() {
        let v = map(1, 1, 3, vec![-1.0, 2.0, 2.0]);
        let (_, att) = apool(&v, None).unwrap();
        assert_eq!(att.negative_count(), 1);
        assert!((att.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn patch_pool_examples() {
        let rows: Vec<f64> = (0..4).flat_map(|r| std::iter::repeat_n(r as f64, 4)).collect();
        let v = map(1, 4, 4, rows);
        let cells: Vec<f64> = patch_pool(&v, (2, 2)).unwrap().iter().map(|t| t.data()[0]).collect();
        assert_eq!(cells, vec![0.5, 0.5, 2.5, 2.5]);

        let whole = patch_pool(&v, (1, 1)).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0], gap(&v).unwrap());

        assert!(matches!(patch_pool(&v, (0, 2)), Err(crate::CsgError::Contract(_))));
        assert!(patch_pool(&v, (5, 1)).is_err());
    }

    #[test]
    fn patch_pool_identity_partition_rebuilds_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::random_normal(&[3, 4, 5], 1.0, &mut rng);
        let cells = patch_pool(&v, (4, 5)).unwrap();
        assert_eq!(cells.len(), 20);
        for (p, cell) in cells.iter().enumerate() {
            for ch in 0..3 {
                assert_eq!(cell.data()[ch], v.data()[ch * 20 + p]);
            }
        }
    }

    #[test]
    fn uneven_grid_gives_remainder_to_last_cell() {
        assert_eq!(spans(5, 2), vec![(0, 2), (2, 5)]);
        assert_eq!(spans(8, 8).len(), 8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..4 {
            let v = Tensor::random_uniform(&[2, 3, 3, 3], 0.1, 1.0, &mut rng);
            let w = Tensor::random_normal(&[2, 3], 1.0, &mut rng);
            let r = gradcheck::check(&[v.clone(), w.clone()], 1e-5, |g, x| {
                let (p, _) = apool_var(g, x[0], None)?;
                let m = g.mul(p, x[1])?;
                Ok(g.sum_all(m))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "apool {:?}", r);

            let s = Tensor::random_uniform(&[2, 3, 3, 3], 0.1, 1.0, &mut rng);
            let r = gradcheck::check(&[v.clone(), s, w.clone()], 1e-5, |g, x| {
                let (p, _) = apool_var(g, x[0], Some(x[1]))?;
                let m = g.mul(p, x[2])?;
                Ok(g.sum_all(m))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "apool with source {:?}", r);

            let cw = Tensor::random_normal(&[8, 3], 1.0, &mut rng);
            let r = gradcheck::check(&[v.clone(), cw], 1e-5, |g, x| {
                let p = patch_pool_var(g, x[0], (2, 2))?;
                let m = g.mul(p, x[1])?;
                Ok(g.sum_all(m))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "patch pool {:?}", r);

            let r = gradcheck::check(&[v, w], 1e-5, |g, x| {
                let p = gap_var(g, x[0])?;
                let m = g.mul(p, x[1])?;
                Ok(g.sum_all(m))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-6, "gap {:?}", r);
        }
    }
}
