//! Distribution-level realism statistics: TTC histograms and JSD,
//! trajectory features, clustering, Fréchet distance and entropy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::min_ego_ttc;
use crate::diffusion::rng_for;
use crate::engine::SimulationLog;
use crate::error::{Error, Result};
use crate::scene::{mean_abs_curvature, path_length, Trajectory};

/// Equal-width histogram; `edges` has one more entry than `counts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::invalid("histogram needs bins > 0 and hi > lo"));
        }
        let w = (hi - lo) / bins as f64;
        Ok(Self {
            edges: (0..=bins).map(|i| lo + w * i as f64).collect(),
            counts: vec![0; bins],
        })
    }

    /// Values outside [lo, hi] are ignored; `hi` itself lands in the last bin.
    pub fn add(&mut self, v: f64) {
        let (lo, hi) = (self.edges[0], *self.edges.last().expect("edges"));
        if !(v >= lo && v <= hi) {
            return;
        }
        let bins = self.counts.len();
        let i = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        self.counts[i.min(bins - 1)] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::invalid("histograms use different bins"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

fn normalize(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(
            "distribution entries must be finite and nonnegative",
        ));
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 {
        return Err(Error::EmptyDistribution);
    }
    Ok(p.iter().map(|v| v / s).collect())
}

/// Jensen–Shannon divergence with base-2 logs, in [0, 1]. Inputs are
/// normalized first.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("distributions have different lengths"));
    }
    let (p, q) = (normalize(p)?, normalize(q)?);
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).log2() } else { 0.0 };
    let total: f64 = p
        .iter()
        .zip(&q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (term(a, m) + term(b, m))
        })
        .sum();
    Ok(total.clamp(0.0, 1.0))
}

/// Per evaluated tick, the smallest finite ego TTC, binned over
/// [0, horizon].
pub fn ttc_histogram(
    log: &SimulationLog,
    bins: usize,
    horizon: f64,
    dt_fine: f64,
) -> Result<Histogram> {
    let mut h = Histogram::new(0.0, horizon, bins)?;
    for t in log.ticks.iter().filter(|t| t.tick >= log.history_ticks) {
        if let Some(v) = min_ego_ttc(&t.states, &log.ego_id, horizon, dt_fine) {
            h.add(v);
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFeature {
    /// Endpoint displacement in the start-heading frame, m.
    pub end_dx: f64,
    pub end_dy: f64,
    /// m
    pub path_length: f64,
    /// 1/m
    pub mean_abs_curvature: f64,
    /// m/s
    pub mean_speed: f64,
}

impl TrajectoryFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.end_dx,
            self.end_dy,
            self.path_length,
            self.mean_abs_curvature,
            self.mean_speed,
        ]
    }
}

pub fn trajectory_features(traj: &Trajectory) -> Result<TrajectoryFeature> {
    let n = traj.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let first = traj.first();
    let d = traj.last().position() - first.position();
    let local = d.rotate(-first.heading());
    let length = path_length(traj)?;
    Ok(TrajectoryFeature {
        end_dx: local.x,
        end_dy: local.y,
        path_length: length,
        mean_abs_curvature: mean_abs_curvature(traj)?,
        mean_speed: length / ((n - 1) as f64 * traj.tick_period),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    /// Centroids in the original feature units.
    pub centroids: Vec<Vec<f64>>,
    /// Clusters that ended up with no members.
    pub empty: Vec<bool>,
}

impl Clustering {
    pub fn occupancy(&self) -> Vec<usize> {
        let mut counts = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            counts[a] += 1;
        }
        counts
    }
}

fn check_rect(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0
        || features
            .iter()
            .any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::invalid(
            "features must be finite, nonempty and of equal length",
        ));
    }
    Ok(dim)
}

/// Per-dimension mean and std; a std below 1e-12 is replaced by 1.
fn moments(features: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|d| features.iter().map(|f| f[d]).sum::<f64>() / n)
        .collect();
    let std = (0..dim)
        .map(|d| {
            let var = features
                .iter()
                .map(|f| (f[d] - mean[d]).powi(2))
                .sum::<f64>()
                / n;
            let s = var.sqrt();
            if s < 1e-12 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means on z-normalized features with seeded farthest-point starts.
/// The result is independent of the order of `features`.
/// Runs at most 100 Lloyd iterations, stopping once no centroid moves by
/// 1e-6 or more.
pub fn cluster_features(features: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if features.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: features.len(),
        });
    }
    let dim = check_rect(features)?;
    // work in a canonical order so the result does not depend on input order
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        features[a]
            .iter()
            .zip(&features[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| features[i].clone()).collect();
    let (mean, std) = moments(&sorted, dim);
    let z: Vec<Vec<f64>> = sorted
        .iter()
        .map(|f| (0..dim).map(|d| (f[d] - mean[d]) / std[d]).collect())
        .collect();

    let mut rng = rng_for(seed, 21);
    let mut centers = vec![z[rng.random_range(0..z.len())].clone()];
    let mut empty = vec![false; k];
    let mut min_d: Vec<f64> = z.iter().map(|p| sq_dist(p, &centers[0])).collect();
    for c in 1..k {
        let (idx, far) =
            min_d.iter().enumerate().fold(
                (0, -1.0),
                |best, (i, &d)| if d > best.1 { (i, d) } else { best },
            );
        if far <= 0.0 {
            // every point coincides with a chosen center
            centers.push(centers[0].clone());
            empty[c] = true;
            continue;
        }
        centers.push(z[idx].clone());
        for (m, p) in min_d.iter_mut().zip(&z) {
            *m = m.min(sq_dist(p, &centers[c]));
        }
    }

    let assign = |centers: &[Vec<f64>], empty: &[bool]| -> Vec<usize> {
        z.iter()
            .map(|p| {
                let mut best = (f64::INFINITY, 0);
                for (c, ctr) in centers.iter().enumerate() {
                    if empty[c] {
                        continue;
                    }
                    let d = sq_dist(p, ctr);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            })
            .collect()
    };
    let mut assignments = assign(&centers, &empty);
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in z.iter().zip(&assignments) {
            counts[a] += 1;
            for d in 0..dim {
                sums[a][d] += p[d];
            }
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                empty[c] = true;
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sq_dist(&next, &centers[c]).sqrt());
            centers[c] = next;
        }
        assignments = assign(&centers, &empty);
        if moved < 1e-6 {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let mut unsorted = vec![0; assignments.len()];
    for (pos, &i) in order.iter().enumerate() {
        unsorted[i] = assignments[pos];
    }
    let centroids = centers
        .iter()
        .map(|c| (0..dim).map(|d| c[d] * std[d] + mean[d]).collect())
        .collect();
    Ok(Clustering {
        assignments: unsorted,
        centroids,
        empty: counts.iter().map(|&n| n == 0).collect(),
    })
}

fn mean_cov(x: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mu = DVector::from_iterator(
        dim,
        (0..dim).map(|d| x.iter().map(|f| f[d]).sum::<f64>() / n as f64),
    );
    let mut cov = DMatrix::zeros(dim, dim);
    for f in x {
        let c = DVector::from_iterator(dim, (0..dim).map(|d| f[d] - mu[d]));
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Eigenvalues of a symmetric matrix after symmetrizing; values below
/// `-tol` are an error, the rest are clamped at zero.
fn psd_eigen(m: &DMatrix<f64>, tol: f64) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for v in e.eigenvalues.iter_mut() {
        if *v < -tol {
            return Err(Error::NonPsdProduct(*v));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

/// Fréchet distance between Gaussians fitted to the two feature sets,
/// after normalizing both by the reference set's per-dimension mean and
/// std. Covariances use the n − 1 denominator.
pub fn cluster_traj_fid(features_sim: &[Vec<f64>], features_ref: &[Vec<f64>]) -> Result<f64> {
    for set in [features_sim, features_ref] {
        if set.len() < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: set.len(),
            });
        }
    }
    let dim = check_rect(features_ref)?;
    if check_rect(features_sim)? != dim {
        return Err(Error::invalid("feature dimensions differ"));
    }
    let (mean, std) = moments(features_ref, dim);
    let norm = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        set.iter()
            .map(|f| (0..dim).map(|d| (f[d] - mean[d]) / std[d]).collect())
            .collect()
    };
    let (mu1, s1) = mean_cov(&norm(features_sim), dim);
    let (mu2, s2) = mean_cov(&norm(features_ref), dim);
    // tr((Σ1 Σ2)^½) = tr((√Σ1 Σ2 √Σ1)^½), and the inner product is symmetric PSD
    let e1 = psd_eigen(&s1, 1e-8)?;
    let sqrt_s1 = &e1.eigenvectors
        * DMatrix::from_diagonal(&e1.eigenvalues.map(f64::sqrt))
        * e1.eigenvectors.transpose();
    let inner = &sqrt_s1 * &s2 * &sqrt_s1;
    let e = psd_eigen(&inner, 1e-8)?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let fid = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

/// Shannon entropy of the occupancy `counts`, divided by ln K.
pub fn normalized_entropy(counts: &[usize], k: usize) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyDistribution);
    }
    if k <= 1 {
        return Ok(0.0);
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Normalized entropy of the cluster occupancy of `features` over K
/// clusters.
pub fn diversity_entropy(features: &[Vec<f64>], k: usize, seed: u64) -> Result<f64> {
    let c = cluster_features(features, k, seed)?;
    normalized_entropy(&c.occupancy(), k)
}
