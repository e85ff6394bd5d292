//! TSP instance generation, exact and heuristic labeling, and tour metrics.

mod dataset;
mod tsplib;

pub use dataset::{
    generate_labeled, instance_seed, read_dataset, write_dataset, DatasetHeader, DatasetReader,
    LabelKind,
};
pub use tsplib::{parse_tsplib, tsplib_edge, tsplib_tour_cost};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("instance too small: n={0}, need n >= {1}")]
    TooSmall(usize, usize),
    #[error("held-karp limited to n <= {MAX_HELD_KARP_N}, got {0}")]
    TooLargeExact(usize),
    #[error("order is not a permutation of 0..{0}")]
    InvalidPermutation(usize),
    #[error("reference cost must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("tsplib parse error: {0}")]
    Tsplib(String),
    #[error("dataset format error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest n for which the bitmask DP fits desk memory (~34M states).
pub const MAX_HELD_KARP_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Uniform,
    Explosion,
    Implosion,
    Cluster,
}

impl std::str::FromStr for DistributionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "explosion" => Ok(Self::Explosion),
            "implosion" => Ok(Self::Implosion),
            "cluster" => Ok(Self::Cluster),
            other => Err(format!("unknown distribution kind: {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Source {
    Generated { kind: DistributionKind, seed: u64 },
    Tsplib { name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TspInstance {
    /// Coordinates in the unit square (model input space).
    pub coords: Vec<[f64; 2]>,
    /// Original-scale coordinates for TSPLIB instances; generated instances
    /// are already in the unit square.
    pub raw_coords: Option<Vec<[f64; 2]>>,
    pub ref_tour: Option<Vec<u32>>,
    pub ref_cost: Option<f64>,
    pub source: Source,
}

impl TspInstance {
    pub fn n(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tour {
    pub order: Vec<u32>,
    pub cost: f64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn check_permutation(n: usize, order: &[u32]) -> Result<(), InstanceError> {
    if order.len() != n {
        return Err(InstanceError::InvalidPermutation(n));
    }
    let mut seen = vec![false; n];
    for &i in order {
        let i = i as usize;
        if i >= n || seen[i] {
            return Err(InstanceError::InvalidPermutation(n));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Closed-cycle Euclidean length of `order` over the instance coordinates.
pub fn tour_cost(instance: &TspInstance, order: &[u32]) -> Result<f64, InstanceError> {
    let n = instance.n();
    check_permutation(n, order)?;
    let c = &instance.coords;
    let mut total = 0.0;
    for k in 0..n {
        let a = c[order[k] as usize];
        let b = c[order[(k + 1) % n] as usize];
        total += dist(a, b);
    }
    Ok(total)
}

/// Optimality gap in percent: `100 * (cost - ref_cost) / ref_cost`.
pub fn gap(cost: f64, ref_cost: f64) -> Result<f64, InstanceError> {
    if ref_cost <= 0.0 {
        return Err(InstanceError::NonPositiveReference(ref_cost));
    }
    Ok(100.0 * (cost - ref_cost) / ref_cost)
}

/// Deterministic per-(kind, n, seed) instance generation.
///
/// The explosion/implosion/cluster parameters below are fixed constants of
/// this artifact; they are documented substitutes, not reconstructions of any
/// published generator.
pub fn generate(
    kind: DistributionKind,
    n: usize,
    seed: u64,
) -> Result<TspInstance, InstanceError> {
    if n < 4 {
        return Err(InstanceError::TooSmall(n, 4));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = match kind {
        DistributionKind::Uniform => uniform_points(&mut rng, n),
        DistributionKind::Explosion => {
            let center = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let radius = rng.gen_range(0.1..0.3);
            let mut pts = uniform_points(&mut rng, n);
            for p in pts.iter_mut() {
                let d = dist(*p, center);
                if d < radius {
                    let noise = rng.gen_range(0.0..0.05);
                    let (dx, dy) = if d > 1e-12 {
                        ((p[0] - center[0]) / d, (p[1] - center[1]) / d)
                    } else {
                        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                        (theta.cos(), theta.sin())
                    };
                    p[0] = center[0] + dx * (radius + noise);
                    p[1] = center[1] + dy * (radius + noise);
                }
                clip_unit(p);
            }
            pts
        }
        DistributionKind::Implosion => {
            let center = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let radius = rng.gen_range(0.1..0.3);
            let factor = rng.gen_range(0.1..0.5);
            let mut pts = uniform_points(&mut rng, n);
            for p in pts.iter_mut() {
                if dist(*p, center) < radius {
                    p[0] = center[0] + (p[0] - center[0]) * factor;
                    p[1] = center[1] + (p[1] - center[1]) * factor;
                }
                clip_unit(p);
            }
            pts
        }
        DistributionKind::Cluster => {
            let k = rng.gen_range(3..=8usize);
            let centers: Vec<[f64; 2]> = (0..k)
                .map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)])
                .collect();
            (0..n)
                .map(|_| {
                    let c = centers[rng.gen_range(0..k)];
                    let mut p = [c[0] + 0.05 * gaussian(&mut rng), c[1] + 0.05 * gaussian(&mut rng)];
                    clip_unit(&mut p);
                    p
                })
                .collect()
        }
    };
    Ok(TspInstance {
        coords,
        raw_coords: None,
        ref_tour: None,
        ref_cost: None,
        source: Source::Generated { kind, seed },
    })
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect()
}

fn clip_unit(p: &mut [f64; 2]) {
    p[0] = p[0].clamp(0.0, 1.0);
    p[1] = p[1].clamp(0.0, 1.0);
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Provably optimal tour via bitmask dynamic programming, O(2^n * n^2).
pub fn held_karp(instance: &TspInstance) -> Result<Tour, InstanceError> {
    let n = instance.n();
    if n > MAX_HELD_KARP_N {
        return Err(InstanceError::TooLargeExact(n));
    }
    if n < 2 {
        return Err(InstanceError::TooSmall(n, 2));
    }
    let c = &instance.coords;
    let full = 1usize << (n - 1); // subsets of nodes 1..n, relative to start 0
    let mut dp = vec![f64::INFINITY; full * (n - 1)];
    let mut parent = vec![u8::MAX; full * (n - 1)];
    for j in 0..n - 1 {
        dp[(1 << j) * (n - 1) + j] = dist(c[0], c[j + 1]);
    }
    for mask in 1..full {
        for j in 0..n - 1 {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cur = dp[mask * (n - 1) + j];
            if !cur.is_finite() {
                continue;
            }
            for k in 0..n - 1 {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next_mask = mask | (1 << k);
                let cand = cur + dist(c[j + 1], c[k + 1]);
                let slot = next_mask * (n - 1) + k;
                if cand < dp[slot] {
                    dp[slot] = cand;
                    parent[slot] = j as u8;
                }
            }
        }
    }
    let last_mask = full - 1;
    let (mut best_j, mut best) = (0, f64::INFINITY);
    for j in 0..n - 1 {
        let cand = dp[last_mask * (n - 1) + j] + dist(c[j + 1], c[0]);
        if cand < best {
            best = cand;
            best_j = j;
        }
    }
    let mut order = vec![0u32; n];
    let mut mask = last_mask;
    let mut j = best_j;
    for pos in (1..n).rev() {
        order[pos] = (j + 1) as u32;
        let pj = parent[mask * (n - 1) + j];
        mask &= !(1 << j);
        if pj == u8::MAX {
            break;
        }
        j = pj as usize;
    }
    let cost = tour_cost(instance, &order)?;
    Ok(Tour { order, cost })
}

/// Exhaustive permutation search; test oracle for small n.
pub fn brute_force(instance: &TspInstance) -> Result<Tour, InstanceError> {
    let n = instance.n();
    if n > 10 {
        return Err(InstanceError::TooLargeExact(n));
    }
    let mut rest: Vec<u32> = (1..n as u32).collect();
    let mut best_order = Vec::new();
    let mut best = f64::INFINITY;
    permute(&mut rest, 0, &mut |perm| {
        let mut order = Vec::with_capacity(n);
        order.push(0u32);
        order.extend_from_slice(perm);
        let cost = tour_cost(instance, &order).expect("valid permutation");
        if cost < best {
            best = cost;
            best_order = order;
        }
    });
    Ok(Tour { order: best_order, cost: best })
}

fn permute(items: &mut [u32], k: usize, visit: &mut impl FnMut(&[u32])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, visit);
        items.swap(k, i);
    }
}

/// Nearest-neighbor construction followed by 2-opt to local optimality.
pub fn nn_two_opt(instance: &TspInstance, seed: u64) -> Result<Tour, InstanceError> {
    if instance.n() < 4 {
        return Err(InstanceError::TooSmall(instance.n(), 4));
    }
    let order = nearest_neighbor(instance, seed);
    let order = two_opt(instance, order);
    let cost = tour_cost(instance, &order)?;
    Ok(Tour { order, cost })
}

/// Nearest-neighbor tour; the seed picks the start node.
pub fn nearest_neighbor(instance: &TspInstance, seed: u64) -> Vec<u32> {
    let n = instance.n();
    let c = &instance.coords;
    let start = (seed % n as u64) as usize;
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    visited[cur] = true;
    order.push(cur as u32);
    for _ in 1..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if !visited[j] {
                let d = dist(c[cur], c[j]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
        }
        visited[best] = true;
        order.push(best as u32);
        cur = best;
    }
    order
}

fn two_opt(instance: &TspInstance, mut order: Vec<u32>) -> Vec<u32> {
    let n = order.len();
    let c = &instance.coords;
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n - 1 {
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue; // same edge pair
                }
                let a = c[order[i] as usize];
                let b = c[order[i + 1] as usize];
                let d = c[order[j] as usize];
                let e = c[order[(j + 1) % n] as usize];
                let delta = dist(a, d) + dist(b, e) - dist(a, b) - dist(d, e);
                if delta < -1e-12 {
                    order[i + 1..=j].reverse();
                    improved = true;
                }
            }
        }
    }
    order
}
