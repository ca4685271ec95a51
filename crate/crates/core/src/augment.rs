//! RandAugment-style augmentation driven by one global magnitude `M`.
//!
//! Op parameters at magnitude `M` (with `level = M / 30`, `u` a per-draw
//! uniform value fixed before `M` is applied):
//!
//! | op             | parameter                                   |
//! |----------------|---------------------------------------------|
//! | identity       | none                                        |
//! | hflip          | mirror columns (any `M > 0`)                |
//! | translate      | shift `round(12 * level * u)` px per axis   |
//! | rotate         | angle `60 deg * level * u`, nearest sample  |
//! | brightness     | multiply by `1 + 0.9 * level * u`           |
//! | contrast       | scale around the mean by `1 + 0.9 * level * u` |
//! | color-jitter   | per-channel gain `1 + 0.9 * level * u_c`    |
//! | cutout         | gray square of side `round(24 * level)` px  |
//! | gaussian-noise | additive noise with `sigma = 0.5 * level`   |
//!
//! Vacated pixels from translate/rotate are filled with 0.5. Output is
//! clamped to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::error::{dim_err, CsgError, Result};
use crate::tensor::Tensor;

pub const MAX_MAGNITUDE: u32 = 30;
const FILL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugOp {
    Identity,
    HFlip,
    Translate,
    Rotate,
    Brightness,
    Contrast,
    ColorJitter,
    Cutout,
    GaussianNoise,
}

impl AugOp {
    pub const ALL: [AugOp; 9] = [
        AugOp::Identity,
        AugOp::HFlip,
        AugOp::Translate,
        AugOp::Rotate,
        AugOp::Brightness,
        AugOp::Contrast,
        AugOp::ColorJitter,
        AugOp::Cutout,
        AugOp::GaussianNoise,
    ];

    pub fn is_spatial(self) -> bool {
        matches!(self, AugOp::HFlip | AugOp::Translate | AugOp::Rotate | AugOp::Cutout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub magnitude: u32,
    pub n_ops: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            magnitude: 6,
            n_ops: 2,
            seed: 0,
        }
    }
}

/// One sampled op with its magnitude-free random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OpDraw {
    pub op: AugOp,
    /// Uniform values in `[-1, 1]`.
    pub u: [f64; 3],
    /// Uniform values in `[0, 1)` for placement.
    pub pos: [f64; 2],
    pub noise_seed: u64,
}

/// The concrete transform for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub level: f64,
    pub draws: Vec<OpDraw>,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude > MAX_MAGNITUDE {
            return Err(CsgError::Config(format!(
                "augment magnitude {} exceeds {}",
                self.magnitude, MAX_MAGNITUDE
            )));
        }
        Ok(())
    }

    pub fn level(&self) -> f64 {
        self.magnitude.min(MAX_MAGNITUDE) as f64 / MAX_MAGNITUDE as f64
    }

    /// Ops for image `index` in stream `stream` (e.g. an epoch counter).
    ///
    /// The draws depend only on the seed, stream and index, never on `M`.
    pub fn plan(&self, stream: u64, index: u64) -> AugmentPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, stream, index, 0x4155]));
        let draws = (0..self.n_ops)
            .map(|_| OpDraw {
                op: AugOp::ALL[rng.random_range(0..AugOp::ALL.len())],
                u: [
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ],
                pos: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                noise_seed: rng.random(),
            })
            .collect();
        AugmentPlan {
            level: self.level(),
            draws,
        }
    }

    pub fn apply(&self, image: &Tensor, stream: u64, index: u64) -> Result<Tensor> {
        self.plan(stream, index).apply(image)
    }
}

impl AugmentPlan {
    pub fn ops(&self) -> Vec<AugOp> {
        self.draws.iter().map(|d| d.op).collect()
    }

    /// True iff some sampled op moves pixels and the plan is not the identity.
    pub fn spatially_warping(&self) -> bool {
        self.level > 0.0 && self.draws.iter().any(|d| d.op.is_spatial())
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        if image.rank() != 3 {
            return dim_err(format!("augment expects C x H x W, got {:?}", image.shape()));
        }
        if self.level == 0.0 {
            return Ok(image.clone());
        }
        let mut out = image.clone();
        for d in &self.draws {
            out = apply_op(&out, d, self.level);
        }
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// Mirror columns.
pub fn hflip(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                dst[row + x] = src[row + w - 1 - x];
            }
        }
    }
    out
}

/// Resample with an inverse map `(x, y) -> source (x, y)`, nearest neighbour.
fn warp(img: &Tensor, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = dims(img);
    let src = img.data();
    let mut out = img.clone();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            let (sx, sy) = (sx.round(), sy.round());
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            for ch in 0..c {
                dst[(ch * h + y) * w + x] = if inside {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    FILL
                };
            }
        }
    }
    out
}

fn apply_op(img: &Tensor, d: &OpDraw, level: f64) -> Tensor {
    let (c, h, w) = dims(img);
    match d.op {
        AugOp::Identity => img.clone(),
        AugOp::HFlip => hflip(img),
        AugOp::Translate => {
            let dx = (12.0 * level * d.u[0]).round();
            let dy = (12.0 * level * d.u[1]).round();
            warp(img, |x, y| (x - dx, y - dy))
        }
        AugOp::Rotate => {
            let theta = (60.0f64).to_radians() * level * d.u[0];
            let (s, co) = theta.sin_cos();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            warp(img, |x, y| {
                let (px, py) = (x - cx, y - cy);
                (co * px + s * py + cx, -s * px + co * py + cy)
            })
        }
        AugOp::Brightness => img.scale(1.0 + 0.9 * level * d.u[0]),
        AugOp::Contrast => {
            let mean = img.mean_all();
            let f = 1.0 + 0.9 * level * d.u[0];
            img.map(|v| mean + (v - mean) * f)
        }
        AugOp::ColorJitter => {
            let plane = h * w;
            let mut out = img.clone();
            for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let f = 1.0 + 0.9 * level * d.u[ch % 3];
                chunk.iter_mut().for_each(|v| *v *= f);
            }
            out
        }
        AugOp::Cutout => {
            let side = (24.0 * level).round() as usize;
            let mut out = img.clone();
            if side == 0 {
                return out;
            }
            let x0 = (d.pos[0] * w as f64) as usize;
            let y0 = (d.pos[1] * h as f64) as usize;
            let (xa, xb) = (x0.saturating_sub(side / 2), (x0 + side.div_ceil(2)).min(w));
            let (ya, yb) = (y0.saturating_sub(side / 2), (y0 + side.div_ceil(2)).min(h));
            let dst = out.data_mut();
            for ch in 0..c {
                for y in ya..yb {
                    for x in xa..xb {
                        dst[(ch * h + y) * w + x] = FILL;
                    }
                }
            }
            out
        }
        AugOp::GaussianNoise => {
            let sigma = 0.5 * level;
            let mut rng = ChaCha8Rng::seed_from_u64(d.noise_seed);
            let mut out = img.clone();
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
            out
        }
    }
}
