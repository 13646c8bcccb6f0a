//! Latent-space evaluation: cross-modal distance statistics, retrieval
//! accuracy, pairwise rank accuracy, mutual-nearest-neighbor agreement,
//! rigid-perturbation robustness, cluster purity against region labels, and
//! a deterministic 2-D PCA export.
//!
//! Every function here is a pure read of already-encoded token matrices;
//! reports carry plain numbers ready for JSON/CSV serialization.

use crate::autodiff::{cosine_distance_values, Mat};
use crate::error::{Error, Result};
use crate::model::{patchify, Model};
use crate::rng;
use crate::synthdata::{apply_rigid, sample_rigid, InstanceData, PerturbLevel};
use crate::topology::{brute_force_mnn_oracle, mutual_nearest_matches};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

const TAG_SWEEP: u64 = 31;
const TAG_KMEANS: u64 = 32;
const TAG_NULL: u64 = 33;

/// Lloyd iterations after k-means++ seeding; fixed so purity is a pure
/// function of (tokens, labels, seed).
const KMEANS_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
}

fn summarize(xs: &[f64]) -> SummaryStat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    SummaryStat { mean, std: var.sqrt() }
}

/// Same-instance cross-modal alignment quality under the identity
/// correspondence. Percentages are in [0, 100]; gaps are exact differences
/// of the reported means.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentReport {
    pub token_count: usize,
    pub pos_cos_dist: SummaryStat,
    pub neg_cos_dist: SummaryStat,
    pub hard_neg_cos_dist: SummaryStat,
    pub neg_pos_gap: f64,
    pub hard_neg_pos_gap: f64,
    pub top1_retrieval: f64,
    pub top5_retrieval: f64,
    pub pairwise_rank_acc: f64,
    pub mnn_selected_ratio: f64,
}

/// Keeps rows flagged true; `None` keeps everything.
fn filter_rows(m: &Mat, mask: Option<&[bool]>) -> Result<Mat> {
    let Some(mask) = mask else {
        return Ok(m.clone());
    };
    if mask.len() != m.rows {
        return Err(Error::ShapeMismatch(format!(
            "mask length {} vs {} rows",
            mask.len(),
            m.rows
        )));
    }
    let mut data = Vec::new();
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            data.extend_from_slice(m.row(i));
        }
    }
    Ok(Mat::new(data.len() / m.cols, m.cols, data))
}

/// All alignment statistics for one registered cross-modal pair. Row k of
/// `za` corresponds to row k of `zb`; the optional mask drops token rows
/// from both sides before anything is measured.
pub fn alignment_metrics(za: &Mat, zb: &Mat, mask: Option<&[bool]>) -> Result<AlignmentReport> {
    if za.rows != zb.rows || za.cols != zb.cols {
        return Err(Error::ShapeMismatch(format!(
            "feature matrices [{}x{}] vs [{}x{}]",
            za.rows, za.cols, zb.rows, zb.cols
        )));
    }
    let a = filter_rows(za, mask)?;
    let b = filter_rows(zb, mask)?;
    let k = a.rows;
    if k < 2 {
        return Err(Error::TooFewTokens { have: k, need: 2, context: "alignment metrics" });
    }
    let d = cosine_distance_values(&a, &b)?;

    let mut pos = Vec::with_capacity(k);
    let mut neg = Vec::with_capacity(k * (k - 1));
    let mut hard = Vec::with_capacity(k);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut rank_wins = 0usize;
    for i in 0..k {
        let dp = d.get(i, i);
        pos.push(dp);
        let mut best = f64::INFINITY;
        // rank of the true correspondent among all candidates, ties broken
        // toward the lower column index
        let mut rank = 0usize;
        for j in 0..k {
            if j == i {
                continue;
            }
            let v = d.get(i, j);
            neg.push(v);
            if v < best {
                best = v;
            }
            if v < dp || (v == dp && j < i) {
                rank += 1;
            }
            // a rank win requires strictly smaller positive distance; exact
            // ties are not wins
            if dp < v {
                rank_wins += 1;
            }
        }
        hard.push(best);
        if rank == 0 {
            top1 += 1;
        }
        if rank < 5 {
            top5 += 1;
        }
    }

    let matches = mutual_nearest_matches(&d);
    let selected = matches.pairs.iter().filter(|(a, b)| a == b).count();

    let pos_s = summarize(&pos);
    let neg_s = summarize(&neg);
    let hard_s = summarize(&hard);
    let pct = |num: usize, den: usize| 100.0 * num as f64 / den as f64;
    Ok(AlignmentReport {
        token_count: k,
        neg_pos_gap: neg_s.mean - pos_s.mean,
        hard_neg_pos_gap: hard_s.mean - pos_s.mean,
        pos_cos_dist: pos_s,
        neg_cos_dist: neg_s,
        hard_neg_cos_dist: hard_s,
        top1_retrieval: pct(top1, k),
        top5_retrieval: pct(top5, k),
        pairwise_rank_acc: pct(rank_wins, k * (k - 1)),
        mnn_selected_ratio: pct(selected, k),
    })
}

/// Independent re-derivation of [`alignment_metrics`] from first principles:
/// inline cosine distances, counting-based ranks, quadratic-scan mutual
/// nearest neighbors. Slow and only for cross-checking.
pub fn brute_force_alignment_oracle(
    za: &Mat,
    zb: &Mat,
    mask: Option<&[bool]>,
) -> Result<AlignmentReport> {
    let a = filter_rows(za, mask)?;
    let b = filter_rows(zb, mask)?;
    let k = a.rows;
    if k < 2 {
        return Err(Error::TooFewTokens { have: k, need: 2, context: "alignment oracle" });
    }
    let cos_d = |u: &[f64], v: &[f64]| -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
    };
    let mut d = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            d.set(i, j, cos_d(a.row(i), b.row(j)));
        }
    }

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut hard = Vec::new();
    let (mut top1, mut top5, mut wins) = (0usize, 0usize, 0usize);
    for i in 0..k {
        pos.push(d.get(i, i));
        let mut row_negs: Vec<(f64, usize)> = (0..k)
            .filter(|&j| j != i)
            .map(|j| (d.get(i, j), j))
            .collect();
        for &(v, _) in &row_negs {
            neg.push(v);
            if d.get(i, i) < v {
                wins += 1;
            }
        }
        row_negs.sort_by(|x, y| x.partial_cmp(y).unwrap());
        hard.push(row_negs[0].0);
        let better = row_negs
            .iter()
            .filter(|&&(v, j)| v < d.get(i, i) || (v == d.get(i, i) && j < i))
            .count();
        if better == 0 {
            top1 += 1;
        }
        if better < 5 {
            top5 += 1;
        }
    }

    let matches = brute_force_mnn_oracle(&d);
    let selected = matches.pairs.iter().filter(|(x, y)| x == y).count();

    let pos_s = summarize(&pos);
    let neg_s = summarize(&neg);
    let hard_s = summarize(&hard);
    Ok(AlignmentReport {
        token_count: k,
        neg_pos_gap: neg_s.mean - pos_s.mean,
        hard_neg_pos_gap: hard_s.mean - pos_s.mean,
        pos_cos_dist: pos_s,
        neg_cos_dist: neg_s,
        hard_neg_cos_dist: hard_s,
        top1_retrieval: 100.0 * top1 as f64 / k as f64,
        top5_retrieval: 100.0 * top5 as f64 / k as f64,
        pairwise_rank_acc: 100.0 * wins as f64 / (k * (k - 1)) as f64,
        mnn_selected_ratio: 100.0 * selected as f64 / k as f64,
    })
}

/// One severity level of the rigid-error sweep.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub level: String,
    pub pos_cos_dist: f64,
    pub top1_retrieval: f64,
    pub mnn_selected_ratio: f64,
}

/// Re-encodes one modality of an instance under increasingly severe rigid
/// motion while the other stays fixed, reporting alignment per level. The
/// clean level applies the identity motion, so its row reproduces the
/// unperturbed metrics exactly.
pub fn robustness_sweep(
    model: &Model,
    inst: &InstanceData,
    modality_pair: (usize, usize),
    levels: &[PerturbLevel],
    seed: u64,
    mask: Option<&[bool]>,
) -> Result<Vec<RobustnessRow>> {
    let (ma, mb) = modality_pair;
    let (va, vb) = match (inst.volumes.get(ma), inst.volumes.get(mb)) {
        (Some(va), Some(vb)) => (va, vb),
        _ => {
            return Err(Error::Config(format!(
                "modality pair ({ma}, {mb}) out of range for instance with {} modalities",
                inst.volumes.len()
            )))
        }
    };
    let za = model.encode_values(&patchify(va, &model.grid)?)?;
    let mut rows = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let p = sample_rigid(level, rng::mix(&[seed, TAG_SWEEP, i as u64]));
        let moved = apply_rigid(vb, &p);
        let zb = model.encode_values(&patchify(&moved, &model.grid)?)?;
        let r = alignment_metrics(&za, &zb, mask)?;
        rows.push(RobustnessRow {
            level: level.name().to_string(),
            pos_cos_dist: r.pos_cos_dist.mean,
            top1_retrieval: r.top1_retrieval,
            mnn_selected_ratio: r.mnn_selected_ratio,
        });
    }
    Ok(rows)
}

/// How well token features cluster into their anatomical regions: seeded
/// k-means++ then fixed Lloyd iterations, scored as the fraction of tokens
/// whose cluster's majority region is their own.
pub fn anatomy_cluster_purity(tokens: &Mat, labels: &[u16], k_clusters: usize, seed: u64) -> Result<f64> {
    if labels.len() != tokens.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels vs {} token rows",
            labels.len(),
            tokens.rows
        )));
    }
    let mut distinct: Vec<u16> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if k_clusters != distinct.len() {
        return Err(Error::Config(format!(
            "k_clusters {} must equal the distinct label count {}",
            k_clusters,
            distinct.len()
        )));
    }
    let assignment = kmeans(tokens, k_clusters, seed)?;
    let mut counts = vec![std::collections::BTreeMap::<u16, usize>::new(); k_clusters];
    for (row, &c) in assignment.iter().enumerate() {
        *counts[c].entry(labels[row]).or_insert(0) += 1;
    }
    let agree: usize = counts
        .iter()
        .map(|m| m.values().max().copied().unwrap_or(0))
        .sum();
    Ok(agree as f64 / tokens.rows as f64)
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// k-means++ seeding plus [`KMEANS_ITERS`] Lloyd iterations. Requires at
/// least `k` distinct rows; empty clusters keep their previous center.
fn kmeans(tokens: &Mat, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = tokens.rows;
    let mut unique: Vec<&[f64]> = (0..n).map(|i| tokens.row(i)).collect();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unique.dedup();
    if unique.len() < k {
        return Err(Error::TooFewTokens { have: unique.len(), need: k, context: "k-means" });
    }

    let mut rng = rng::stream(&[seed, TAG_KMEANS]);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(tokens.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(tokens.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            // D^2 weighting
            let mut t = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = tokens.row(next).to_vec();
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(tokens.row(i), &c));
        }
        centers.push(c);
    }

    let f = tokens.cols;
    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let row = tokens.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let dd = sq_dist(row, center);
                if dd < best.0 {
                    best = (dd, c);
                }
            }
            *slot = best.1;
        }
        let mut sums = vec![vec![0.0; f]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(tokens.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(assignment)
}

/// Null distribution of purity for a given label multiset: isotropic
/// Gaussian tokens carry no region signal, so their purity is pure
/// small-sample bias. `upper` is the max over trials.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NullBand {
    pub mean: f64,
    pub upper: f64,
    pub trials: usize,
}

pub fn purity_null_band(
    labels: &[u16],
    k_clusters: usize,
    feature_dim: usize,
    trials: usize,
    seed: u64,
) -> Result<NullBand> {
    if trials == 0 {
        return Err(Error::Config("null band needs at least one trial".into()));
    }
    let n = labels.len();
    let mut sum = 0.0;
    let mut upper = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut rng = rng::stream(&[seed, TAG_NULL, t as u64]);
        let data: Vec<f64> = (0..n * feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        let tokens = Mat::new(n, feature_dim, data);
        let p = anatomy_cluster_purity(&tokens, labels, k_clusters, rng::mix(&[seed, TAG_NULL, t as u64, 1]))?;
        sum += p;
        upper = upper.max(p);
    }
    Ok(NullBand { mean: sum / trials as f64, upper, trials })
}

/// Fraction of mutual-nearest-neighbor matches between two token sets whose
/// region labels agree. The sets may come from different instances; rows
/// need no correspondence.
pub fn mnn_region_agreement(
    za: &Mat,
    zb: &Mat,
    labels_a: &[u16],
    labels_b: &[u16],
    masks: (Option<&[bool]>, Option<&[bool]>),
) -> Result<f64> {
    if labels_a.len() != za.rows || labels_b.len() != zb.rows {
        return Err(Error::ShapeMismatch("label/token row mismatch".into()));
    }
    let a = filter_rows(za, masks.0)?;
    let b = filter_rows(zb, masks.1)?;
    let la = filter_labels(labels_a, masks.0);
    let lb = filter_labels(labels_b, masks.1);
    if a.rows == 0 || b.rows == 0 {
        return Err(Error::TooFewTokens { have: 0, need: 1, context: "region agreement" });
    }
    let d = cosine_distance_values(&a, &b)?;
    let matches = mutual_nearest_matches(&d);
    let agree = matches
        .pairs
        .iter()
        .filter(|&&(i, j)| la[i] == lb[j])
        .count();
    Ok(agree as f64 / matches.pairs.len() as f64)
}

fn filter_labels(labels: &[u16], mask: Option<&[bool]>) -> Vec<u16> {
    match mask {
        None => labels.to_vec(),
        Some(m) => labels
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&l, _)| l)
            .collect(),
    }
}

/// Eigenvalues (descending) and matching unit eigenvectors (columns) of the
/// population covariance of the token rows.
pub fn pca_eigen(tokens: &Mat) -> Result<(Vec<f64>, Mat)> {
    let (k, f) = (tokens.rows, tokens.cols);
    if k < 2 {
        return Err(Error::TooFewTokens { have: k, need: 2, context: "PCA" });
    }
    let mut mean = vec![0.0; f];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(f, f);
    for i in 0..k {
        let row = tokens.row(i);
        for a in 0..f {
            let da = row[a] - mean[a];
            for b in a..f {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..f {
        for b in a..f {
            let v = cov[(a, b)] / k as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let total_var: f64 = (0..f).map(|i| cov[(i, i)]).sum();
    if total_var <= 0.0 {
        return Err(Error::Data("PCA input has zero variance".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Mat::zeros(f, f);
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        // sign convention: the largest-magnitude component points positive
        let lead = (0..f).max_by(|&a, &b| v[a].abs().partial_cmp(&v[b].abs()).unwrap()).unwrap();
        let s = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..f {
            vecs.set(r, col, s * v[r]);
        }
    }
    Ok((values, vecs))
}

/// Mean-centered projection of tokens onto the top `dims` principal
/// directions.
pub fn pca_project(tokens: &Mat, dims: usize) -> Result<Mat> {
    let (k, f) = (tokens.rows, tokens.cols);
    if dims == 0 || dims > f {
        return Err(Error::Config(format!("PCA dims {dims} out of range for {f} features")));
    }
    let (_, vecs) = pca_eigen(tokens)?;
    let mut mean = vec![0.0; f];
    for i in 0..k {
        for (m, v) in mean.iter_mut().zip(tokens.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let mut out = Mat::zeros(k, dims);
    for i in 0..k {
        let row = tokens.row(i);
        for d in 0..dims {
            let mut acc = 0.0;
            for a in 0..f {
                acc += (row[a] - mean[a]) * vecs.get(a, d);
            }
            out.set(i, d, acc);
        }
    }
    Ok(out)
}
