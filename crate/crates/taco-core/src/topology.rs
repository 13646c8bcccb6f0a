//! Neighborhood topology over token distance matrices.
//!
//! Everything here runs on detached distances: which tokens count as
//! neighbors, which are fair negatives, which cross-volume pairs are mutual
//! nearest neighbors, and how those selections assemble into triplets. No
//! gradients flow through selection.
//!
//! All argmins and sorts break ties by lowest index, so results are total
//! functions of the input values.

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use rand::Rng;

/// Per-anchor neighborhood structure from one self-distance matrix.
///
/// For each anchor: the `omega` nearest off-diagonal tokens, one buffer
/// token excluded from both sides, and the remainder as the negative pool.
#[derive(Debug, Clone)]
pub struct NeighborSets {
    pub omega: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub buffer: Vec<usize>,
    pub negative_pool: Vec<Vec<usize>>,
}

/// Pseudo-correspondences between two token sets: a partial injection
/// `source index -> target index`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchSet {
    /// Identity matching over `k` tokens.
    pub fn identity(k: usize) -> Self {
        MatchSet {
            pairs: (0..k).map(|i| (i, i)).collect(),
        }
    }

    /// Lookup table `source -> Some(target)`, sized for `k` sources.
    pub fn as_map(&self, k: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; k];
        for &(a, b) in &self.pairs {
            map[a] = Some(b);
        }
        map
    }
}

/// Token index map between two aligned voxel grids.
#[derive(Debug, Clone, Copy)]
pub enum Correspondence {
    Identity,
}

impl Correspondence {
    #[inline]
    pub fn map(&self, idx: usize) -> usize {
        match self {
            Correspondence::Identity => idx,
        }
    }
}

/// Anchor/positive/negative index triples into one target token set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub triples: Vec<(usize, usize, usize)>,
}

/// Ranks every off-diagonal entry of a square distance matrix per row and
/// splits it into neighbors (the `omega` closest), one buffer index, and the
/// negative pool (everything further out).
///
/// Requires `k >= omega + 3` so the pool is never empty.
pub fn topk_neighbors(d: &Mat, omega: usize) -> Result<NeighborSets> {
    if d.rows != d.cols {
        return Err(Error::ShapeMismatch(format!(
            "topk_neighbors: square matrix required, got {}x{}",
            d.rows, d.cols
        )));
    }
    let k = d.rows;
    if omega == 0 {
        return Err(Error::Config("omega must be at least 1".into()));
    }
    if k < omega + 3 {
        return Err(Error::TooFewTokens {
            have: k,
            need: omega + 3,
            context: "omega neighbors + buffer + nonempty negative pool",
        });
    }
    if !d.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }

    let mut neighbors = Vec::with_capacity(k);
    let mut buffer = Vec::with_capacity(k);
    let mut negative_pool = Vec::with_capacity(k);
    let mut order: Vec<usize> = Vec::with_capacity(k - 1);
    for a in 0..k {
        let row = d.row(a);
        order.clear();
        order.extend((0..k).filter(|&j| j != a));
        order.sort_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
        neighbors.push(order[..omega].to_vec());
        buffer.push(order[omega]);
        negative_pool.push(order[omega + 1..].to_vec());
    }
    Ok(NeighborSets {
        omega,
        neighbors,
        buffer,
        negative_pool,
    })
}

/// Draws `omega` negatives per anchor from its pool, rank-aligned with the
/// anchor's neighbors. Uniform without replacement when the pool is large
/// enough, with replacement otherwise. One seeded stream, anchors in order.
pub fn sample_negatives(sets: &NeighborSets, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = crate::rng::stream(&[seed]);
    let omega = sets.omega;
    sets.negative_pool
        .iter()
        .map(|pool| {
            if pool.len() >= omega {
                let mut scratch = pool.clone();
                for i in 0..omega {
                    let j = rng.random_range(i..scratch.len());
                    scratch.swap(i, j);
                }
                scratch.truncate(omega);
                scratch
            } else {
                (0..omega).map(|_| pool[rng.random_range(0..pool.len())]).collect()
            }
        })
        .collect()
}

/// Mutual nearest neighbors of a cross-distance matrix: pairs `(a, b)` where
/// `b` is the argmin of row `a` and `a` is the argmin of column `b`.
pub fn mutual_nearest_matches(d: &Mat) -> MatchSet {
    let row_min: Vec<usize> = (0..d.rows).map(|a| argmin(d.row(a))).collect();
    let mut col_min = Vec::with_capacity(d.cols);
    for b in 0..d.cols {
        let mut best = 0;
        for a in 1..d.rows {
            if d.get(a, b) < d.get(best, b) {
                best = a;
            }
        }
        col_min.push(best);
    }
    let pairs = (0..d.rows)
        .filter(|&a| col_min[row_min[a]] == a)
        .map(|a| (a, row_min[a]))
        .collect();
    MatchSet { pairs }
}

fn argmin(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v < row[best] {
            best = j;
        }
    }
    best
}

/// Quadratic-scan reference for [`mutual_nearest_matches`]: a pair is kept
/// iff its entry is the tie-lowest-index minimum of both its row and its
/// column. Kept as an independent oracle, not called by the training path.
pub fn brute_force_mnn_oracle(d: &Mat) -> MatchSet {
    let mut pairs = Vec::new();
    for a in 0..d.rows {
        for b in 0..d.cols {
            let v = d.get(a, b);
            let row_best = (0..d.cols).all(|c| v < d.get(a, c) || (v == d.get(a, c) && b <= c));
            let col_best = (0..d.rows).all(|r| v < d.get(r, b) || (v == d.get(r, b) && a <= r));
            if row_best && col_best {
                pairs.push((a, b));
            }
        }
    }
    MatchSet { pairs }
}

/// Triples for the aligned-modality case: anchor, its rank-r neighbor, and
/// the rank-r negative, all pushed through the grid correspondence.
pub fn build_intra_triplets(
    sets: &NeighborSets,
    negatives: &[Vec<usize>],
    corr: &Correspondence,
) -> TripletSet {
    let mut triples = Vec::with_capacity(sets.neighbors.len() * sets.omega);
    for (a, (nbrs, negs)) in sets.neighbors.iter().zip(negatives).enumerate() {
        for (&p, &n) in nbrs.iter().zip(negs) {
            triples.push((corr.map(a), corr.map(p), corr.map(n)));
        }
    }
    TripletSet { triples }
}

/// Triples for the cross-volume case: source-side neighborhood structure
/// pushed through a partial match map. A rank survives only if the anchor,
/// its neighbor, and its negative are all matched.
pub fn build_inter_triplets(
    sets: &NeighborSets,
    negatives: &[Vec<usize>],
    matches: &MatchSet,
) -> TripletSet {
    let map = matches.as_map(sets.neighbors.len());
    let mut triples = Vec::new();
    for &(a, a_t) in &matches.pairs {
        for (&p, &n) in sets.neighbors[a].iter().zip(&negatives[a]) {
            if let (Some(p_t), Some(n_t)) = (map[p], map[n]) {
                triples.push((a_t, p_t, n_t));
            }
        }
    }
    TripletSet { triples }
}
