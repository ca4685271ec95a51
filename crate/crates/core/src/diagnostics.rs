//! Feature-diversity diagnostics: hyperspherical energy and a KDE density
//! grid over the unit sphere.
//!
//! Energies are ordered-pair sums over l2-normalised rows:
//! `E_0 = sum_{i != j} log(1 / |v_i - v_j|)` and `E_s = sum_{i != j} |v_i - v_j|^-s`.
//! Lower energy means the vectors are spread more evenly.
//!
//! For the density grid, features are projected to 3-D by PCA (power
//! iteration with deflation), pushed onto the sphere, and smoothed with a
//! Euclidean Gaussian kernel whose bandwidth follows Scott's rule.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, CsgError, Result};
use crate::tensor::{io, Tensor};

/// Pair distances below this are clamped.
pub const MIN_DISTANCE: f64 = 1e-12;
pub const POWER_ITERATIONS: usize = 200;
pub const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub value: f64,
    /// Ordered pairs whose distance was clamped to `MIN_DISTANCE`.
    pub clamped_pairs: usize,
}

impl Energy {
    pub fn degenerate(&self) -> bool {
        self.clamped_pairs > 0
    }
}

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        s => dim_err(format!("expected an N x C matrix, got {:?}", s)),
    }
}

/// Hyperspherical energy of the rows of `x` for `s` in `{0, 1, 2}`.
pub fn hse(x: &Tensor, s: u32) -> Result<Energy> {
    if s > 2 {
        return contract_err(format!("energy order {} not in {{0, 1, 2}}", s));
    }
    Ok(hse_all(x)?[s as usize])
}

/// `E_0`, `E_1`, `E_2` in one pass.
pub fn hse_all(x: &Tensor) -> Result<[Energy; 3]> {
    let (n, c) = rows(x)?;
    if n < 2 {
        return contract_err(format!("hyperspherical energy needs at least 2 vectors, got {}", n));
    }
    let v = x.l2_normalize();
    let d = v.data();
    let mut sums = [0.0f64; 3];
    let mut clamped = 0;
    for i in 0..n {
        let vi = &d[i * c..(i + 1) * c];
        for j in 0..n {
            if i == j {
                continue;
            }
            let vj = &d[j * c..(j + 1) * c];
            let mut dist = vi.iter().zip(vj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist < MIN_DISTANCE {
                dist = MIN_DISTANCE;
                clamped += 1;
            }
            sums[0] -= dist.ln();
            sums[1] += 1.0 / dist;
            sums[2] += 1.0 / (dist * dist);
        }
    }
    if clamped > 0 {
        log::warn!("{} ordered pairs closer than {:e}; distances clamped", clamped, MIN_DISTANCE);
    }
    Ok(sums.map(|value| Energy {
        value,
        clamped_pairs: clamped,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `N x 3` points on the unit sphere.
    pub points: Tensor,
    /// `3 x C` principal directions.
    pub components: Tensor,
    pub eigenvalues: [f64; 3],
    /// Share of the total variance captured by the three components.
    pub variance_ratio: f64,
    /// Covariance rank below three; missing directions were completed arbitrarily.
    pub degenerate: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Top eigenpairs of a symmetric `c x c` matrix by power iteration with
/// deflation. Returns the pairs found and whether the spectrum ran out.
fn top_eigen(cov: &[f64], c: usize, k: usize) -> (Vec<(f64, Vec<f64>)>, bool) {
    let scale = (0..c).map(|i| cov[i * c + i]).sum::<f64>().max(0.0);
    let mut a = cov.to_vec();
    let mut found: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut degenerate = false;
    for comp in 0..k {
        let basis: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        // deterministic start with no special alignment
        let mut v: Vec<f64> = (0..c).map(|j| 1.0 + ((j * 7 + comp * 3) % 11) as f64 / 11.0).collect();
        orthogonalize(&mut v, &basis);
        normalize_in_place(&mut v);
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let mut w: Vec<f64> = (0..c).map(|i| dot(&a[i * c..(i + 1) * c], &v)).collect();
            orthogonalize(&mut w, &basis);
            let norm = normalize_in_place(&mut w);
            if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                lambda = 0.0;
                break;
            }
            let next = (0..c).map(|i| dot(&a[i * c..(i + 1) * c], &w)).collect::<Vec<_>>();
            lambda = dot(&w, &next);
            let delta = w.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            v = w;
            if delta <= POWER_TOL {
                break;
            }
        }
        if lambda <= 1e-12 * scale || scale == 0.0 {
            degenerate = true;
            break;
        }
        for i in 0..c {
            for j in 0..c {
                a[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        found.push((lambda, v));
    }
    (found, degenerate)
}

/// Project rows onto the top-3 principal directions and normalise onto S².
pub fn project_to_sphere(x: &Tensor) -> Result<Projection> {
    let (n, c) = rows(x)?;
    if n < 3 || c < 3 {
        return contract_err(format!("projection needs N >= 3 and C >= 3, got {} x {}", n, c));
    }
    let d = x.data();
    let mean: Vec<f64> = (0..c).map(|j| (0..n).map(|i| d[i * c + j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<f64> = (0..n * c).map(|k| d[k] - mean[k % c]).collect();
    let mut cov = vec![0.0; c * c];
    for row in centered.chunks(c) {
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64);
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();

    let (mut pairs, degenerate) = top_eigen(&cov, c, 3);
    if degenerate {
        log::warn!("covariance rank below 3; completing the projection basis");
        let mut e = 0;
        while pairs.len() < 3 {
            let basis: Vec<Vec<f64>> = pairs.iter().map(|(_, v)| v.clone()).collect();
            let mut v = vec![0.0; c];
            v[e] = 1.0;
            e += 1;
            orthogonalize(&mut v, &basis);
            if normalize_in_place(&mut v) > 1e-6 {
                pairs.push((0.0, v));
            }
        }
    }
    let components: Vec<f64> = pairs.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let mut points = Vec::with_capacity(n * 3);
    for row in centered.chunks(c) {
        points.extend(pairs.iter().map(|(_, v)| dot(row, v)));
    }
    let eigenvalues = [pairs[0].0, pairs[1].0, pairs[2].0];
    Ok(Projection {
        points: Tensor::new(vec![n, 3], points)?.l2_normalize(),
        components: Tensor::new(vec![3, c], components)?,
        eigenvalues,
        variance_ratio: if trace > 0.0 { eigenvalues.iter().sum::<f64>() / trace } else { 0.0 },
        degenerate,
    })
}

/// Scott's rule with intrinsic dimension 2: `N^(-1/6) * sigma_bar`.
pub fn scott_bandwidth(n: usize, sigma_bar: f64) -> f64 {
    (n as f64).powf(-1.0 / 6.0) * sigma_bar
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub n_lon: usize,
    pub n_lat: usize,
    /// Row-major `n_lat x n_lon`, latitude ascending from the south pole.
    pub density: Vec<f64>,
    /// Bandwidth used for smoothing.
    pub bandwidth: f64,
    /// Mean marginal standard deviation of the points.
    pub sigma_bar: f64,
    /// Set when the Scott value fell below the grid resolution and was raised.
    pub bandwidth_floored: bool,
}

/// Cell centre (lon, lat) in radians.
pub fn cell_center(n_lon: usize, n_lat: usize, row: usize, col: usize) -> (f64, f64) {
    (
        -PI + (col as f64 + 0.5) * 2.0 * PI / n_lon as f64,
        -PI / 2.0 + (row as f64 + 0.5) * PI / n_lat as f64,
    )
}

/// Exact area of a cell in latitude row `row`.
pub fn cell_area(n_lon: usize, n_lat: usize, row: usize) -> f64 {
    let lo = -PI / 2.0 + row as f64 * PI / n_lat as f64;
    let hi = lo + PI / n_lat as f64;
    2.0 * PI / n_lon as f64 * (hi.sin() - lo.sin())
}

pub fn unit_vector(lon: f64, lat: f64) -> [f64; 3] {
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

impl KdeGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.density[row * self.n_lon + col]
    }

    /// `sum density * area`; 1 after normalisation.
    pub fn area_weighted_sum(&self) -> f64 {
        (0..self.n_lat)
            .map(|r| cell_area(self.n_lon, self.n_lat, r) * self.density[r * self.n_lon..(r + 1) * self.n_lon].iter().sum::<f64>())
            .sum()
    }

    /// `(row, col)` of the largest density value.
    pub fn argmax(&self) -> (usize, usize) {
        let k = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (k / self.n_lon, k % self.n_lon)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_lat, self.n_lon], self.density.clone()).expect("grid dims")
    }
}

/// Gaussian KDE of points on S² evaluated at grid cell centres.
pub fn kde_density(points: &Tensor, grid: (usize, usize)) -> Result<KdeGrid> {
    let (n, c) = rows(points)?;
    if c != 3 {
        return dim_err(format!("KDE expects N x 3 points, got {:?}", points.shape()));
    }
    if n < 2 {
        return contract_err(format!("KDE needs at least 2 points, got {}", n));
    }
    let (n_lon, n_lat) = grid;
    if n_lon == 0 || n_lat == 0 {
        return contract_err(format!("empty KDE grid {:?}", grid));
    }
    let d = points.data();
    let sigma_bar = (0..3)
        .map(|j| {
            let mean = (0..n).map(|i| d[i * 3 + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (d[i * 3 + j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt()
        })
        .sum::<f64>()
        / 3.0;
    let scott = scott_bandwidth(n, sigma_bar);
    let floor = 0.5 * PI / n_lat as f64;
    let h = scott.max(floor);
    let norm = 1.0 / (n as f64 * (2.0 * PI).powf(1.5) * h.powi(3));
    let mut density = Vec::with_capacity(n_lon * n_lat);
    for row in 0..n_lat {
        for col in 0..n_lon {
            let (lon, lat) = cell_center(n_lon, n_lat, row, col);
            let gpt = unit_vector(lon, lat);
            let s: f64 = d
                .chunks(3)
                .map(|p| {
                    let sq = (gpt[0] - p[0]).powi(2) + (gpt[1] - p[1]).powi(2) + (gpt[2] - p[2]).powi(2);
                    (-sq / (2.0 * h * h)).exp()
                })
                .sum();
            density.push(norm * s);
        }
    }
    let mut out = KdeGrid {
        n_lon,
        n_lat,
        density,
        bandwidth: h,
        sigma_bar,
        bandwidth_floored: h > scott,
    };
    let total = out.area_weighted_sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(CsgError::NumericDomain(format!("KDE mass {} cannot be normalised", total)));
    }
    out.density.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n: usize,
    /// Keyed by `s`.
    pub energies: BTreeMap<u32, f64>,
    pub clamped_pairs: usize,
    /// How features were mapped to the sphere.
    pub projection: String,
    pub projection_degenerate: bool,
    pub variance_ratio: f64,
    pub bandwidth: f64,
    pub kde: KdeGrid,
}

pub const DEFAULT_GRID: (usize, usize) = (36, 18);

/// Energies plus the sphere density of the rows of `features`.
pub fn diversity_report(features: &Tensor, grid: (usize, usize)) -> Result<DiversityReport> {
    let e = hse_all(features)?;
    let proj = project_to_sphere(features)?;
    let kde = kde_density(&proj.points, grid)?;
    Ok(DiversityReport {
        n: features.shape()[0],
        energies: (0..3).map(|s| (s as u32, e[s].value)).collect(),
        clamped_pairs: e[0].clamped_pairs,
        projection: "pca3-then-normalize".into(),
        projection_degenerate: proj.degenerate,
        variance_ratio: proj.variance_ratio,
        bandwidth: kde.bandwidth,
        kde,
    })
}

/// Write `<stem>.json` and `<stem>_kde.csv` (rows = latitude).
pub fn write_report(report: &DiversityReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{}.json", stem)), serde_json::to_string_pretty(report)?)?;
    io::save_csv(&report.kde.as_tensor(), &dir.join(format!("{}_kde.csv", stem)))
}

/// Sorted seeded subsample of `k` indices out of `n` (all of them if `k >= n`).
pub fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector, SymmetricEigen};
    use proptest::prelude::*;

    fn random_rows(n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::random_normal(&[n, c], 1.0, &mut rng)
    }

    fn naive_energy(x: &Tensor, s: u32) -> f64 {
        let c = x.shape()[1];
        let vs: Vec<DVector<f64>> = x
            .data()
            .chunks(c)
            .map(|r| DVector::from_column_slice(r).normalize())
            .collect();
        let mut total = 0.0;
        for (i, a) in vs.iter().enumerate() {
            for (j, b) in vs.iter().enumerate() {
                if i != j {
                    let d = (a - b).norm();
                    total += if s == 0 { (1.0 / d).ln() } else { d.powi(-(s as i32)) };
                }
            }
        }
        total
    }

    #[test]
    fn antipodal_pair() {
        let x = Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_relative_eq!(hse(&x, 0).unwrap().value, 2.0 * 0.5f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(hse(&x, 0).unwrap().value, -1.386294, epsilon = 1e-6);
        assert_eq!(hse(&x, 1).unwrap().value, 1.0);
        assert_eq!(hse(&x, 2).unwrap().value, 0.5);
    }

    #[test]
    fn duplicates_are_clamped_and_flagged() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let e = hse(&x, 1).unwrap();
        assert!(e.degenerate());
        assert_eq!(e.clamped_pairs, 2);
        assert_eq!(e.value, 2e12);
        assert!(hse(&Tensor::zeros(&[1, 3]), 0).is_err());
        assert!(hse(&random_rows(3, 3, 0), 3).is_err());
    }

    #[test]
    fn energy_matches_brute_force() {
        for (n, seed) in [(5, 1), (16, 2), (9, 3)] {
            let x = random_rows(n, 6, seed);
            for s in 0..3 {
                assert!((hse(&x, s).unwrap().value - naive_energy(&x, s)).abs() < 1e-12);
            }
        }
    }

    fn random_orthogonal(c: usize, seed: u64) -> DMatrix<f64> {
        let t = random_rows(c, c, seed);
        DMatrix::from_row_slice(c, c, t.data()).qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn energy_is_rotation_and_permutation_invariant(seed in 0u64..10_000, n in 3usize..12) {
            let c = 5;
            let x = random_rows(n, c, seed);
            let q = random_orthogonal(c, seed + 1);
            let m = DMatrix::from_row_slice(n, c, x.data()) * q;
            let rotated = Tensor::new(vec![n, c], m.transpose().as_slice().to_vec()).unwrap();
            let mut perm: Vec<f64> = Vec::new();
            for i in (0..n).rev() {
                perm.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            let permuted = Tensor::new(vec![n, c], perm).unwrap();
            for s in 0..3 {
                let base = hse(&x, s).unwrap().value;
                prop_assert!((hse(&rotated, s).unwrap().value - base).abs() < 1e-9);
                prop_assert!((hse(&permuted, s).unwrap().value - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn collapsing_a_point_raises_energy() {
        for seed in 0..5 {
            let x = random_rows(10, 4, 100 + seed);
            let before: Vec<f64> = (0..3).map(|s| hse(&x, s).unwrap().value).collect();
            let mut collapsed = x.clone();
            let copy = x.data()[4..8].to_vec();
            collapsed.data_mut()[0..4].copy_from_slice(&copy);
            for s in 0..3 {
                assert!(hse(&collapsed, s as u32).unwrap().value > before[s]);
            }
        }
    }

    #[test]
    fn projection_is_fixed_point_on_aligned_unit_vectors() {
        let mut pts = Vec::new();
        for (axis, reps) in [(0, 3), (1, 2), (2, 1)] {
            for _ in 0..reps {
                for sign in [1.0, -1.0] {
                    let mut p = [0.0; 3];
                    p[axis] = sign;
                    pts.extend_from_slice(&p);
                }
            }
        }
        let x = Tensor::new(vec![pts.len() / 3, 3], pts).unwrap();
        let p = project_to_sphere(&x).unwrap();
        assert!(!p.degenerate);
        for k in 0..3 {
            let sign = p.components.data()[k * 3 + k].signum();
            for i in 0..x.shape()[0] {
                assert!((p.points.data()[i * 3 + k] * sign - x.data()[i * 3 + k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_points_are_degenerate() {
        let x = Tensor::new(vec![4, 3], [0.2, 0.3, 0.9].repeat(4)).unwrap();
        let p = project_to_sphere(&x).unwrap();
        assert!(p.degenerate);
        let comps = DMatrix::from_row_slice(3, 3, p.components.data());
        assert!((comps.clone() * comps.transpose() - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn variance_ratio_matches_dense_eigensolver() {
        let (n, c) = (200, 16);
        let mut x = random_rows(n, c, 7);
        // anisotropic spectrum with well separated top values
        for row in x.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= 1.0 / (1.0 + j as f64 * 0.6);
            }
        }
        let p = project_to_sphere(&x).unwrap();
        let m = DMatrix::from_row_slice(n, c, x.data());
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(n, c, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov.clone()).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let ratio = eig[..3].iter().sum::<f64>() / cov.trace();
        assert!((p.variance_ratio - ratio).abs() < 1e-6, "{} vs {}", p.variance_ratio, ratio);
        for k in 0..3 {
            assert!((p.eigenvalues[k] - eig[k]).abs() < 1e-6 * eig[0]);
        }
        for row in p.points.data().chunks(3) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scott_bandwidth_formula() {
        assert!((scott_bandwidth(100, 1.0) - 0.46416).abs() < 1e-5);
        assert!((scott_bandwidth(100, 1.0) - 100f64.powf(-1.0 / 6.0)).abs() < 1e-15);
    }

    fn fibonacci_sphere(n: usize) -> Tensor {
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut pts = Vec::with_capacity(n * 3);
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            pts.extend_from_slice(&[r * phi.cos(), r * phi.sin(), z]);
        }
        Tensor::new(vec![n, 3], pts).unwrap()
    }

    #[test]
    fn uniform_sample_gives_flat_density() {
        let kde = kde_density(&fibonacci_sphere(500), DEFAULT_GRID).unwrap();
        assert!((kde.area_weighted_sum() - 1.0).abs() < 1e-12);
        let mean = kde.density.iter().sum::<f64>() / kde.density.len() as f64;
        let sd = (kde.density.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / kde.density.len() as f64).sqrt();
        assert!(sd / mean < 0.2, "cv {}", sd / mean);
        assert!(kde.density.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cluster_sets_the_mode() {
        let (lon, lat) = cell_center(36, 18, 12, 7);
        let centre = unit_vector(lon, lat);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let jitter = Tensor::random_normal(&[50, 3], 1e-3, &mut rng);
        let pts: Vec<f64> = jitter.data().iter().enumerate().map(|(k, j)| centre[k % 3] + j).collect();
        let x = Tensor::new(vec![50, 3], pts).unwrap().l2_normalize();
        let kde = kde_density(&x, (36, 18)).unwrap();
        assert_eq!(kde.argmax(), (12, 7));
        assert!(kde.bandwidth_floored);
    }

    #[test]
    fn report_has_three_energies_and_writes_files() {
        let x = random_rows(40, 8, 9);
        let r = diversity_report(&x, (12, 6)).unwrap();
        assert_eq!(r.energies.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!((r.kde.area_weighted_sum() - 1.0).abs() < 0.02);
        let dir = tempfile::tempdir().unwrap();
        write_report(&r, dir.path(), "diversity").unwrap();
        let back: DiversityReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("diversity.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("diversity_kde.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(subsample(10, 4, 1), subsample(10, 4, 1));
        assert_eq!(subsample(3, 4, 1), vec![0, 1, 2]);
    }
}
