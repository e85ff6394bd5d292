//! Diagnostics over trained models: evaluation reports, long-sightedness
//! (optimal-next-node success rate by distance rank), embedding cosine maps,
//! 2D PCA, and byte-stable CSV/JSON/SVG emission.

use crate::autodiff::Tape;
use crate::decoding::{beam_decode, greedy_decode, rrc, DecodeError, RrcConfig};
use crate::instances::{gap, InstanceError, TspInstance};
use crate::model::{forward, forward_on_tape, BoundParams, ConstructionState, ModelParams};
use crate::scaling::DecodeStrategy;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("instance {0} has no reference tour/cost")]
    Unlabeled(usize),
    #[error("zero-norm embedding row {0}")]
    ZeroNorm(usize),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("power iteration did not converge")]
    NoConvergence,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceEval {
    pub index: usize,
    pub order: Vec<u32>,
    pub cost: f64,
    pub ref_cost: f64,
    pub gap_percent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_gap_percent: f64,
    pub wall_seconds: f64,
}

/// Decodes every labeled instance and reports per-instance and mean gaps.
/// Parallel across instances; output order (and all numbers) independent of
/// thread count. Wall time is the only nondeterministic field and is kept out
/// of the per-instance rows.
pub fn evaluate(
    params: &ModelParams,
    instances: &[TspInstance],
    decode: DecodeStrategy,
    n_train: usize,
    seed: u64,
) -> Result<(Vec<InstanceEval>, EvalSummary), AnalysisError> {
    let t0 = std::time::Instant::now();
    let evals: Result<Vec<InstanceEval>, AnalysisError> = instances
        .par_iter()
        .enumerate()
        .map(|(index, inst)| {
            let ref_cost = inst.ref_cost.ok_or(AnalysisError::Unlabeled(index))?;
            let tour = match decode {
                DecodeStrategy::Greedy => greedy_decode(params, inst, n_train)?,
                DecodeStrategy::Beam(b) => beam_decode(params, inst, b, n_train)?,
                DecodeStrategy::Rrc(iters) => {
                    let initial = greedy_decode(params, inst, n_train)?;
                    let cfg = RrcConfig::new(
                        iters,
                        crate::instances::instance_seed(seed, index as u64),
                    );
                    rrc(params, inst, &initial, &cfg, n_train)?
                }
            };
            let g = gap(tour.cost, ref_cost)?;
            Ok(InstanceEval {
                index,
                order: tour.order,
                cost: tour.cost,
                ref_cost,
                gap_percent: g,
            })
        })
        .collect();
    let evals = evals?;
    let mean = evals.iter().map(|e| e.gap_percent).sum::<f64>() / evals.len().max(1) as f64;
    let summary = EvalSummary {
        count: evals.len(),
        mean_gap_percent: mean,
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((evals, summary))
}

/// Tours CSV: deterministic columns only (wall time lives in the summary).
pub fn tours_to_csv(evals: &[InstanceEval]) -> String {
    let mut out = String::from("instance,permutation,cost,gap_percent\n");
    for e in evals {
        let perm: Vec<String> = e.order.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.index,
            perm.join(" "),
            e.cost,
            e.gap_percent
        ));
    }
    out
}

/// Next-node policy under study.
pub enum Policy<'a> {
    /// Greedy argmax of the trained model.
    Model(&'a ModelParams, usize),
    /// Always picks the true next node (upper bound).
    Oracle,
    /// Always picks the nearest available node (rank-1 baseline).
    NearestAvailable,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankBucket {
    pub rank: usize,
    pub attempts: u64,
    pub successes: u64,
}

impl RankBucket {
    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

/// Per-rank success buckets 1..=K plus one pooled bucket for ranks > K.
#[derive(Debug, Clone, Serialize)]
pub struct LongSightReport {
    pub k: usize,
    pub buckets: Vec<RankBucket>,
    pub tail: RankBucket,
}

impl LongSightReport {
    pub fn total_attempts(&self) -> u64 {
        self.buckets.iter().map(|b| b.attempts).sum::<u64>() + self.tail.attempts
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,attempts,successes,rate\n");
        for b in &self.buckets {
            out.push_str(&format!("{},{},{},{}\n", b.rank, b.attempts, b.successes, b.rate()));
        }
        out.push_str(&format!(
            ">{},{},{},{}\n",
            self.k,
            self.tail.attempts,
            self.tail.successes,
            self.tail.rate()
        ));
        out
    }

    /// Mean success rate over buckets with rank > `min_rank` (tail included).
    pub fn mean_rate_above(&self, min_rank: usize) -> f64 {
        let mut attempts = 0u64;
        let mut successes = 0u64;
        for b in self.buckets.iter().filter(|b| b.rank > min_rank) {
            attempts += b.attempts;
            successes += b.successes;
        }
        attempts += self.tail.attempts;
        successes += self.tail.successes;
        if attempts == 0 {
            0.0
        } else {
            successes as f64 / attempts as f64
        }
    }
}

fn dist(instance: &TspInstance, a: usize, b: usize) -> f64 {
    let pa = instance.coords[a];
    let pb = instance.coords[b];
    ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
}

/// Walks each reference tour and buckets "did the policy pick the true next
/// node" by that node's Euclidean-distance rank among available nodes
/// (distance ties broken toward the lower node id).
pub fn long_sightedness(
    policy: &Policy<'_>,
    instances: &[TspInstance],
    k: usize,
) -> Result<LongSightReport, AnalysisError> {
    let mut buckets: Vec<RankBucket> =
        (1..=k).map(|rank| RankBucket { rank, attempts: 0, successes: 0 }).collect();
    let mut tail = RankBucket { rank: k + 1, attempts: 0, successes: 0 };
    for (index, inst) in instances.iter().enumerate() {
        let tour = inst.ref_tour.as_ref().ok_or(AnalysisError::Unlabeled(index))?;
        let n = tour.len();
        let mut state = ConstructionState::initial(n, tour[0] as usize);
        for t in 0..n - 1 {
            let optimal = tour[t + 1] as usize;
            // rank among available by (distance, node id)
            let mut avail: Vec<usize> = state.available();
            let cur = state.current;
            avail.sort_by(|&a, &b| {
                dist(inst, cur, a)
                    .partial_cmp(&dist(inst, cur, b))
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let rank = avail.iter().position(|&v| v == optimal).unwrap() + 1;
            let pick = match policy {
                Policy::Oracle => optimal,
                Policy::NearestAvailable => avail[0],
                Policy::Model(params, n_train) => {
                    let probs = forward(params, inst, &state, *n_train, n)?;
                    let mut best = usize::MAX;
                    let mut best_p = f64::NEG_INFINITY;
                    for (node, &p) in probs.iter().enumerate() {
                        if !state.visited[node] && p > best_p {
                            best_p = p;
                            best = node;
                        }
                    }
                    best
                }
            };
            let bucket =
                if rank <= k { &mut buckets[rank - 1] } else { &mut tail };
            bucket.attempts += 1;
            if pick == optimal {
                bucket.successes += 1;
            }
            state.visit(optimal); // continue along the reference tour
        }
    }
    Ok(LongSightReport { k, buckets, tail })
}

/// Final-decoder-layer embeddings of the available nodes at one construction
/// step, ordered by appearance in the reference tour, with the true next node
/// tagged.
#[derive(Debug, Clone)]
pub struct EmbeddingSnapshot {
    pub step: usize,
    /// node id per row, "sorted according to the optimal solution"
    pub nodes: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub optimal_next: usize,
}

/// Walks the reference tour and captures one snapshot per decision step.
pub fn embedding_snapshots(
    params: &ModelParams,
    instance: &TspInstance,
    n_train: usize,
) -> Result<Vec<EmbeddingSnapshot>, AnalysisError> {
    let tour = instance.ref_tour.as_ref().ok_or(AnalysisError::Unlabeled(0))?;
    let n = tour.len();
    let width = params.config.width;
    let mut state = ConstructionState::initial(n, tour[0] as usize);
    let mut snaps = Vec::with_capacity(n - 1);
    for t in 0..n - 1 {
        let mut tape = Tape::new();
        let bound = BoundParams::load(&mut tape, params, false);
        let out = forward_on_tape(&mut tape, &bound, instance, &state, n_train, n)?;
        let hidden = tape.values(out.hidden);
        // available rows occupy slots 1..=a; re-order by tour position
        let mut nodes: Vec<usize> = out.avail.clone();
        nodes.sort_by_key(|&node| tour.iter().position(|&v| v as usize == node).unwrap());
        let rows = nodes
            .iter()
            .map(|&node| {
                let slot = out.avail.iter().position(|&v| v == node).unwrap() + 1;
                hidden[slot * width..(slot + 1) * width].to_vec()
            })
            .collect();
        snaps.push(EmbeddingSnapshot {
            step: t,
            nodes,
            rows,
            optimal_next: tour[t + 1] as usize,
        });
        state.visit(tour[t + 1] as usize);
    }
    Ok(snaps)
}

/// Pairwise cosine similarity; exact unit diagonal, exact symmetry.
pub fn cosine_map(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n = rows.len();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(AnalysisError::ZeroNorm(i));
    }
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        c[i][i] = 1.0;
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let v = dot / (norms[i] * norms[j]);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    Ok(c)
}

pub fn matrix_to_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in m {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Top-2 PCA via power iteration with deflation; returns the projection and
/// the two leading eigenvalues of the covariance (descending). Eigenvector
/// sign convention: first nonzero coordinate positive.
pub fn pca2d(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2]), AnalysisError> {
    let n = rows.len();
    if n < 3 {
        return Err(AnalysisError::TooFewRows { need: 3, got: n });
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    // covariance (d x d), population normalization
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for row in cov.iter_mut() {
        row.iter_mut().for_each(|v| *v /= n as f64);
    }

    let mut vecs = Vec::with_capacity(2);
    let mut vals = [0.0; 2];
    for comp in 0..2 {
        let (v, lambda) = power_iterate(&cov, &vecs)?;
        vals[comp] = lambda;
        vecs.push(v);
    }
    let proj = centered
        .iter()
        .map(|r| {
            let p0: f64 = r.iter().zip(&vecs[0]).map(|(a, b)| a * b).sum();
            let p1: f64 = r.iter().zip(&vecs[1]).map(|(a, b)| a * b).sum();
            [p0, p1]
        })
        .collect();
    Ok((proj, vals))
}

/// Dominant eigenpair of `m` orthogonal to `deflate`, to tolerance 1e-10.
fn power_iterate(
    m: &[Vec<f64>],
    deflate: &[Vec<f64>],
) -> Result<(Vec<f64>, f64), AnalysisError> {
    let d = m.len();
    // deterministic start vector, reorthogonalized
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let orth = |v: &mut Vec<f64>| {
        for u in deflate {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
    };
    orth(&mut v);
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            next[i] = m[i].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        orth(&mut next);
        let norm = normalize(&mut next);
        let delta: f64 =
            next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flipped: f64 =
            next.iter().zip(&v).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        v = next;
        lambda = norm;
        if delta < 1e-10 || flipped < 1e-10 {
            // sign convention: first nonzero coordinate positive
            if let Some(first) = v.iter().find(|&&x| x != 0.0) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            return Ok((v, lambda));
        }
    }
    let _ = lambda;
    Err(AnalysisError::NoConvergence)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// One plotted series: scatter markers, optionally connected by a polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub line: bool,
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal deterministic SVG scatter/line plot with optional log axes; no
/// external plotting dependency so snapshots are byte-stable.
pub fn render_svg(series: &[Series], log_x: bool, log_y: bool) -> String {
    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x0 = x0.min(tx(x));
            x1 = x1.max(tx(x));
            y0 = y0.min(ty(y));
            y1 = y1.max(ty(y));
        }
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (tx(x) - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - (ty(y) - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        SVG_W - 2.0 * MARGIN,
        SVG_H - 2.0 * MARGIN
    ));
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.line && s.points.len() > 1 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.4},{:.4}", px(x), py(y)))
                .collect();
            out.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        for &(x, y) in &s.points {
            out.push_str(&format!(
                "  <circle cx=\"{:.4}\" cy=\"{:.4}\" r=\"3\" fill=\"{color}\"/>\n",
                px(x),
                py(y)
            ));
        }
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{:.4}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            SVG_W - MARGIN + 4.0,
            MARGIN + 14.0 * si as f64,
            xml_escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Serializes any report type to pretty JSON (byte-stable: serde_json field
/// order follows the struct definition).
pub fn to_json<T: Serialize>(report: &T) -> String {
    serde_json::to_string_pretty(report).expect("report serialization cannot fail")
}
