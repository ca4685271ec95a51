//! Procedural two-domain shapes benchmark.
//!
//! `SyntheticFlat` images are flat renders: one solid shape on a solid
//! background, no noise, with the shape colour usually drawn from a
//! per-class palette (the renderer's "material"). `RealProxy` images draw
//! the same shape classes with textured backgrounds, shading, per-sample
//! colour jitter, pixel noise and wider scale/position ranges.
//!
//! Every sample is a pure function of `(spec, split, index)`.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, CsgError, Result};
use crate::tensor::{io, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

/// Palette used by the flat renderer; index = class id.
const CLASS_COLORS: [[f64; 3]; 4] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.25], [0.2, 0.3, 0.95], [0.95, 0.85, 0.15]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    SyntheticFlat,
    RealProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub domain: Domain,
    pub train_count: usize,
    pub test_count: usize,
    /// Emit per-pixel masks alongside labels.
    pub dense: bool,
    /// Probability that a flat render uses its class palette colour.
    pub palette_bias: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            image_size: 32,
            domain: Domain::SyntheticFlat,
            train_count: 512,
            test_count: 512,
            dense: false,
            palette_bias: 0.9,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    pub fn with_domain(&self, domain: Domain) -> Self {
        Self {
            domain,
            ..self.clone()
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        }
    }

    /// Mask id used for pixels outside the shape.
    pub fn background_id(&self) -> usize {
        self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=CLASS_NAMES.len()).contains(&self.n_classes) {
            return Err(CsgError::Config(format!("n_classes must be in 1..=4, got {}", self.n_classes)));
        }
        if self.image_size < 8 {
            return Err(CsgError::Config(format!("image_size {} is too small", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.palette_bias) {
            return Err(CsgError::Config(format!("palette_bias {} outside [0, 1]", self.palette_bias)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Row-major `H x W` class ids; present for the dense variant.
    pub mask: Option<Vec<usize>>,
}

/// splitmix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Analytic outline of a rendered shape in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeGeometry {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
}

impl ShapeGeometry {
    /// Whether the point `(x, y)` lies inside the closed shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        // local frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let r = self.radius;
        match self.class {
            0 => dx * dx + dy * dy <= r * r,
            1 => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            2 => (0..3).all(|k| {
                let a = PI / 2.0 + k as f64 * 2.0 * PI / 3.0;
                u * a.cos() + v * a.sin() <= 0.5 * r
            }),
            _ => {
                let arm = 0.32 * r;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
        }
    }

    /// Pixel-centre rasterisation: `true` where the pixel belongs to the shape.
    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        (0..size * size)
            .map(|p| self.contains((p % size) as f64 + 0.5, (p / size) as f64 + 0.5))
            .collect()
    }
}

fn stream(spec: &ShapesSpec, split: Split, index: usize) -> ChaCha8Rng {
    let domain = match spec.domain {
        Domain::SyntheticFlat => 1,
        Domain::RealProxy => 2,
    };
    let split = match split {
        Split::Train => 11,
        Split::Test => 13,
    };
    ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, domain, split, index as u64]))
}

/// Class id for a sample index; classes cycle so every split is balanced.
pub fn label_of(spec: &ShapesSpec, index: usize) -> usize {
    index % spec.n_classes
}

fn geometry(spec: &ShapesSpec, label: usize, rng: &mut ChaCha8Rng) -> ShapeGeometry {
    let size = spec.image_size as f64;
    let (lo, hi) = match spec.domain {
        Domain::SyntheticFlat => (0.24, 0.34),
        Domain::RealProxy => (0.2, 0.4),
    };
    let radius = size * rng.random_range(lo..hi);
    let margin = radius * 0.9;
    ShapeGeometry {
        class: label,
        cx: rng.random_range(margin..size - margin),
        cy: rng.random_range(margin..size - margin),
        radius,
        angle: rng.random_range(0.0..2.0 * PI),
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// A colour whose luminance differs from `other` by at least `gap`.
fn contrasting_color(rng: &mut ChaCha8Rng, other: &[f64; 3], gap: f64) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        if (luminance(&c) - luminance(other)).abs() >= gap {
            return c;
        }
    }
}

/// Render sample `index` of `split`.
pub fn generate(spec: &ShapesSpec, split: Split, index: usize) -> Result<Sample> {
    if index >= spec.count(split) {
        return contract_err(format!("index {} beyond {:?} split of {}", index, split, spec.count(split)));
    }
    let mut rng = stream(spec, split, index);
    let label = label_of(spec, index);
    let geom = geometry(spec, label, &mut rng);
    let size = spec.image_size;
    let inside = geom.rasterize(size);
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];

    match spec.domain {
        Domain::SyntheticFlat => {
            let background = [rng.random_range(0.25..0.75); 3];
            let fill = if rng.random_bool(spec.palette_bias) {
                CLASS_COLORS[label]
            } else {
                contrasting_color(&mut rng, &background, 0.2)
            };
            for p in 0..plane {
                let c = if inside[p] { &fill } else { &background };
                for ch in 0..3 {
                    img[ch * plane + p] = c[ch];
                }
            }
        }
        Domain::RealProxy => {
            let base = random_color(&mut rng);
            // two oriented gratings plus a colour tint form the background texture
            let gratings: Vec<(f64, f64, f64, f64)> = (0..2)
                .map(|_| {
                    let theta = rng.random_range(0.0..PI);
                    let freq = rng.random_range(0.2..0.9);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let amp = rng.random_range(0.08..0.2);
                    (theta, freq, phase, amp)
                })
                .collect();
            let tint = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let fill = contrasting_color(&mut rng, &base, 0.25);
            let jitter = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
            let light = rng.random_range(0.0..2.0 * PI);
            let light_strength = rng.random_range(0.0..0.25);
            let noise = Normal::new(0.0, 0.05).expect("valid sigma");
            for p in 0..plane {
                let (x, y) = ((p % size) as f64, (p / size) as f64);
                for ch in 0..3 {
                    let v = if inside[p] {
                        let shade = light_strength * (((x - geom.cx) * light.cos() + (y - geom.cy) * light.sin()) / geom.radius);
                        fill[ch] * jitter[ch] + shade
                    } else {
                        let tex: f64 = gratings
                            .iter()
                            .map(|&(t, f, ph, a)| a * ((x * t.cos() + y * t.sin()) * f + ph).sin())
                            .sum();
                        base[ch] + tint[ch] + tex
                    };
                    img[ch * plane + p] = v;
                }
            }
            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let mask = spec.dense.then(|| {
        inside
            .iter()
            .map(|&i| if i { label } else { spec.background_id() })
            .collect()
    });
    Ok(Sample {
        image: Tensor::new(vec![3, size, size], img)?,
        label,
        mask,
    })
}

/// Geometry that `generate` used for a sample (for rasterisation checks).
pub fn geometry_of(spec: &ShapesSpec, split: Split, index: usize) -> ShapeGeometry {
    let mut rng = stream(spec, split, index);
    geometry(spec, label_of(spec, index), &mut rng)
}

/// A stacked batch of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `N x 3 x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `N * H * W` mask ids, image-major.
    pub masks: Option<Vec<usize>>,
}

pub fn collate(samples: &[Sample], indices: Vec<usize>) -> Result<Batch> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks = if samples.iter().all(|s| s.mask.is_some()) && !samples.is_empty() {
        Some(samples.iter().flat_map(|s| s.mask.clone().unwrap_or_default()).collect())
    } else {
        None
    };
    Ok(Batch {
        indices,
        images: Tensor::stack(&images)?,
        labels: samples.iter().map(|s| s.label).collect(),
        masks,
    })
}

/// Index order for one epoch: a deterministic shuffle keyed by `(seed, epoch)`.
pub fn epoch_order(count: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[shuffle_seed, epoch as u64, 0x5348]));
    order.shuffle(&mut rng);
    order
}

/// Split an epoch order into batches; the final short batch is kept.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Pre-rendered split held in memory.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub samples: Vec<Sample>,
}

impl SplitData {
    pub fn render(spec: &ShapesSpec, split: Split) -> Result<Self> {
        let samples = (0..spec.count(split))
            .map(|i| generate(spec, split, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        collate(&picked, indices.to_vec())
    }

    /// Epoch batches in shuffled order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        batch_indices(&epoch_order(self.len(), shuffle_seed, epoch), batch_size)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheIndex {
    spec: ShapesSpec,
    split: Split,
    count: usize,
    images: String,
    labels: String,
    masks: Option<String>,
}

/// Write a split as tensor files plus a JSON index under `dir`.
pub fn write_cache(spec: &ShapesSpec, split: Split, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let data = SplitData::render(spec, split)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&all)?;
    let tag = format!("{:?}_{:?}", spec.domain, split).to_lowercase();
    let images = format!("{}_images.csgt", tag);
    let labels = format!("{}_labels.csgt", tag);
    io::save(&batch.images, &dir.join(&images))?;
    io::save(
        &Tensor::from_vec(batch.labels.iter().map(|&l| l as f64).collect()),
        &dir.join(&labels),
    )?;
    let masks = match &batch.masks {
        Some(m) => {
            let name = format!("{}_masks.csgt", tag);
            let s = spec.image_size;
            let t = Tensor::new(vec![data.len(), s, s], m.iter().map(|&v| v as f64).collect())?;
            io::save(&t, &dir.join(&name))?;
            Some(name)
        }
        None => None,
    };
    let index = CacheIndex {
        spec: spec.clone(),
        split,
        count: data.len(),
        images,
        labels,
        masks,
    };
    std::fs::write(dir.join(format!("{}_index.json", tag)), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

/// Load a split written by [`write_cache`].
pub fn read_cache(spec: &ShapesSpec, split: Split, dir: &Path) -> Result<SplitData> {
    let tag = format!("{:?}_{:?}", spec.domain, split).to_lowercase();
    let index_path = dir.join(format!("{}_index.json", tag));
    let index: CacheIndex = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
    if index.spec != *spec || index.split != split {
        return Err(CsgError::Format {
            path: index_path,
            reason: "cache was written for a different dataset spec".into(),
        });
    }
    let images = io::load(&dir.join(&index.images))?;
    let labels = io::load(&dir.join(&index.labels))?;
    let masks = index.masks.as_ref().map(|m| io::load(&dir.join(m))).transpose()?;
    let plane = spec.image_size * spec.image_size;
    let samples = (0..index.count)
        .map(|i| {
            Ok(Sample {
                image: images.index_outer(i)?,
                label: labels.data()[i] as usize,
                mask: masks
                    .as_ref()
                    .map(|m| m.data()[i * plane..(i + 1) * plane].iter().map(|&v| v as usize).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitData { samples })
}
