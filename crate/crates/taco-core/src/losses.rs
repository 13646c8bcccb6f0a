//! Training objectives: reconstruction, aligned-modality neighborhood
//! ranking, and cross-volume pseudo-correspondence ranking.
//!
//! Selection (neighborhoods, negatives, mutual matches) always runs on
//! detached feature values; gradients flow only through the triplet
//! distances evaluated on the live target features. Negative draws are
//! seeded per (instance, modality pair), never per batch position, so batch
//! order cannot change any loss value.

use crate::autodiff::{cosine_distance_values, Tape, TensorRef};
use crate::error::{Error, Result};
use crate::rng;
use crate::topology::{
    build_inter_triplets, build_intra_triplets, mutual_nearest_matches, sample_negatives,
    topk_neighbors, Correspondence, MatchSet, TripletSet,
};

/// Seed domain tags; intra and inter draws must never share a stream.
const NEG_INTRA: u64 = 1;
const NEG_INTER: u64 = 2;

/// One instance's token features on a shared tape, one `[K x F]` tensor per
/// modality. `instance` is the stable cohort id, not the batch position.
pub struct InstanceFeatures {
    pub instance: u64,
    pub tokens: Vec<TensorRef>,
}

/// One directed cross-instance comparison, by batch position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterPairing {
    pub src: usize,
    pub src_modality: usize,
    pub tgt: usize,
    pub tgt_modality: usize,
}

/// Triple counts for one directional term.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermStats {
    pub triples: usize,
    pub active: usize,
}

/// Aggregated counts across a loss's directional terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub terms: usize,
    pub triples: usize,
    pub active: usize,
}

impl LossStats {
    fn absorb(&mut self, t: TermStats) {
        self.terms += 1;
        self.triples += t.triples;
        self.active += t.active;
    }
}

/// Per-step scalar summary written to the loss log.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub l_uni: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
    pub intra_triples: usize,
    pub inter_triples: usize,
    /// Fraction of all triples with a positive hinge.
    pub active_fraction: f64,
}

/// Mean squared voxel error between a decoded token matrix and its target.
pub fn reconstruction_loss(tape: &mut Tape, decoded: TensorRef, target: TensorRef) -> Result<TensorRef> {
    tape.mse(decoded, target)
}

/// Mean hinge over a triplet set, distances taken on the live `target`
/// features: `mean(max(0, d(a, p) - d(a, n) + delta))`. An empty set is a
/// constant zero.
pub fn triplet_hinge_mean(
    tape: &mut Tape,
    target: TensorRef,
    triples: &TripletSet,
    delta: f64,
) -> Result<(TensorRef, TermStats)> {
    if triples.triples.is_empty() {
        return Ok((tape.scalar(0.0), TermStats::default()));
    }
    let pos_pairs: Vec<(usize, usize)> = triples.triples.iter().map(|&(a, p, _)| (a, p)).collect();
    let neg_pairs: Vec<(usize, usize)> = triples.triples.iter().map(|&(a, _, n)| (a, n)).collect();
    let d_pos = tape.cosine_pair_distances(target, &pos_pairs)?;
    let d_neg = tape.cosine_pair_distances(target, &neg_pairs)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, delta);
    let hinged = tape.hinge(shifted);
    let active = tape.values(hinged).iter().filter(|&&v| v > 0.0).count();
    let loss = tape.mean(hinged);
    Ok((
        loss,
        TermStats {
            triples: triples.triples.len(),
            active,
        },
    ))
}

/// One directional aligned-modality term: neighborhoods and negatives from
/// the detached `src` features, hinge evaluated on live `tgt` features under
/// the identity grid correspondence.
pub fn intra_term(
    tape: &mut Tape,
    src: TensorRef,
    tgt: TensorRef,
    omega: usize,
    delta: f64,
    neg_seed: u64,
) -> Result<(TensorRef, TermStats)> {
    let d_src = cosine_distance_values(&tape.values_mat(src), &tape.values_mat(src))?;
    let sets = topk_neighbors(&d_src, omega)?;
    let negs = sample_negatives(&sets, neg_seed);
    let triples = build_intra_triplets(&sets, &negs, &Correspondence::Identity);
    triplet_hinge_mean(tape, tgt, &triples, delta)
}

/// One directional cross-volume term with the match set supplied by the
/// caller. [`inter_loss`] derives matches mutually; tests may force them.
pub fn inter_term(
    tape: &mut Tape,
    src: TensorRef,
    tgt: TensorRef,
    matches: &MatchSet,
    omega: usize,
    delta: f64,
    neg_seed: u64,
) -> Result<(TensorRef, TermStats)> {
    let d_src = cosine_distance_values(&tape.values_mat(src), &tape.values_mat(src))?;
    let sets = topk_neighbors(&d_src, omega)?;
    let negs = sample_negatives(&sets, neg_seed);
    let triples = build_inter_triplets(&sets, &negs, matches);
    triplet_hinge_mean(tape, tgt, &triples, delta)
}

/// Aligned-modality ranking loss: mean over all ordered modality pairs of
/// all batch instances. Instances with fewer than two modalities are skipped
/// with a warning; if everything is skipped the loss is a constant zero.
pub fn intra_loss(
    tape: &mut Tape,
    batch: &[InstanceFeatures],
    omega: usize,
    delta: f64,
    seed: u64,
) -> Result<(TensorRef, LossStats)> {
    let mut terms = Vec::new();
    let mut stats = LossStats::default();
    for inst in batch {
        let m = inst.tokens.len();
        if m < 2 {
            log::warn!(
                "instance {} has {} modality(ies); skipping aligned-modality term",
                inst.instance,
                m
            );
            continue;
        }
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let neg_seed = rng::mix(&[seed, NEG_INTRA, inst.instance, i as u64, j as u64]);
                let (term, ts) =
                    intra_term(tape, inst.tokens[i], inst.tokens[j], omega, delta, neg_seed)?;
                terms.push(term);
                stats.absorb(ts);
            }
        }
    }
    Ok((mean_of_terms(tape, &terms), stats))
}

/// Cross-volume pseudo-correspondence loss over explicit directed pairings.
/// Matches come from mutual nearest neighbors on detached features; pairings
/// whose triples all collapse contribute zero terms. Empty-in, zero-out.
pub fn inter_loss(
    tape: &mut Tape,
    batch: &[InstanceFeatures],
    pairings: &[InterPairing],
    omega: usize,
    delta: f64,
    seed: u64,
) -> Result<(TensorRef, LossStats)> {
    let mut terms = Vec::new();
    let mut stats = LossStats::default();
    for p in pairings {
        let src_inst = batch.get(p.src).ok_or_else(|| bad_pairing(p, batch.len()))?;
        let tgt_inst = batch.get(p.tgt).ok_or_else(|| bad_pairing(p, batch.len()))?;
        let (&src, &tgt) = match (
            src_inst.tokens.get(p.src_modality),
            tgt_inst.tokens.get(p.tgt_modality),
        ) {
            (Some(s), Some(t)) => (s, t),
            _ => return Err(bad_pairing(p, batch.len())),
        };
        let d_cross =
            cosine_distance_values(&tape.values_mat(src), &tape.values_mat(tgt))?;
        let matches = mutual_nearest_matches(&d_cross);
        let neg_seed = rng::mix(&[
            seed,
            NEG_INTER,
            src_inst.instance,
            p.src_modality as u64,
            tgt_inst.instance,
            p.tgt_modality as u64,
        ]);
        let (term, ts) = inter_term(tape, src, tgt, &matches, omega, delta, neg_seed)?;
        terms.push(term);
        stats.absorb(ts);
    }
    Ok((mean_of_terms(tape, &terms), stats))
}

fn bad_pairing(p: &InterPairing, batch: usize) -> Error {
    Error::Config(format!(
        "pairing {p:?} out of range for batch of {batch} instances"
    ))
}

fn mean_of_terms(tape: &mut Tape, terms: &[TensorRef]) -> TensorRef {
    match terms {
        [] => tape.scalar(0.0),
        [one] => *one,
        [first, rest @ ..] => {
            let mut acc = *first;
            for t in rest {
                acc = tape.add(acc, *t).expect("loss terms are scalars");
            }
            tape.scale(acc, 1.0 / terms.len() as f64)
        }
    }
}

/// Plain unweighted sum of the three objectives. All refs must live on the
/// same tape.
pub fn total_loss(tape: &mut Tape, uni: TensorRef, intra: TensorRef, inter: TensorRef) -> Result<TensorRef> {
    let partial = tape.add(uni, intra)?;
    tape.add(partial, inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;
    use rand::Rng;

    fn random_tokens(rng: &mut impl Rng, k: usize, f: usize) -> Vec<f64> {
        (0..k * f).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn stage(tape: &mut Tape, vals: &[f64], k: usize, f: usize) -> TensorRef {
        tape.leaf(vals.to_vec(), [k, f], true).unwrap()
    }

    #[test]
    fn hinge_mean_against_manual_enumeration() {
        let mut rng = crate::rng::stream(&[61]);
        for _ in 0..50 {
            let (k, f, delta) = (7, 3, 0.3);
            let vals = random_tokens(&mut rng, k, f);
            let triples = TripletSet {
                triples: vec![(0, 2, 5), (1, 3, 6), (4, 0, 2), (6, 5, 1)],
            };
            let mut tape = Tape::new();
            let z = stage(&mut tape, &vals, k, f);
            let (loss, stats) = triplet_hinge_mean(&mut tape, z, &triples, delta).unwrap();

            let zm = Mat::new(k, f, vals.clone());
            let d = cosine_distance_values(&zm, &zm).unwrap();
            let mut expect = 0.0;
            let mut active = 0;
            for &(a, p, n) in &triples.triples {
                let h = (d.get(a, p) - d.get(a, n) + delta).max(0.0);
                if h > 0.0 {
                    active += 1;
                }
                expect += h;
            }
            expect /= triples.triples.len() as f64;
            assert!((tape.value_scalar(loss) - expect).abs() < 1e-12);
            assert_eq!(stats.active, active);
            assert_eq!(stats.triples, 4);
        }
    }

    #[test]
    fn empty_triplet_set_is_constant_zero() {
        let mut tape = Tape::new();
        let z = stage(&mut tape, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], 3, 2);
        let (loss, stats) = triplet_hinge_mean(&mut tape, z, &TripletSet { triples: vec![] }, 0.3).unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
        assert_eq!(stats.triples, 0);
    }

    #[test]
    fn inter_term_with_identity_matches_equals_intra_term() {
        let mut rng = crate::rng::stream(&[67]);
        for trial in 0..50u64 {
            let (k, f) = (rng.random_range(6..12), 4);
            let src_vals = random_tokens(&mut rng, k, f);
            let tgt_vals = random_tokens(&mut rng, k, f);

            let mut t1 = Tape::new();
            let s1 = stage(&mut t1, &src_vals, k, f);
            let g1 = stage(&mut t1, &tgt_vals, k, f);
            let (a, _) = intra_term(&mut t1, s1, g1, 2, 0.3, 900 + trial).unwrap();

            let mut t2 = Tape::new();
            let s2 = stage(&mut t2, &src_vals, k, f);
            let g2 = stage(&mut t2, &tgt_vals, k, f);
            let (b, _) =
                inter_term(&mut t2, s2, g2, &MatchSet::identity(k), 2, 0.3, 900 + trial).unwrap();

            let (va, vb) = (t1.value_scalar(a), t2.value_scalar(b));
            assert!((va - vb).abs() < 1e-12, "{va} vs {vb}");
        }
    }

    #[test]
    fn inter_loss_with_no_complete_triples_is_exactly_zero() {
        // all target rows identical: the only mutual pair is (0, 0), and
        // anchor 0's neighborhood is entirely unmatched
        let mut tape = Tape::new();
        let src = stage(
            &mut tape,
            &[
                1.0, 0.0, 0.0, //
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                -1.0, 0.3, 0.0, //
                0.2, -1.0, 0.4,
            ],
            5,
            3,
        );
        let tgt_vals: Vec<f64> = std::iter::repeat([1.0, 0.0, 0.0]).take(5).flatten().collect();
        let tgt = stage(&mut tape, &tgt_vals, 5, 3);
        let batch = vec![
            InstanceFeatures { instance: 0, tokens: vec![src] },
            InstanceFeatures { instance: 1, tokens: vec![tgt] },
        ];
        let pairing = InterPairing { src: 0, src_modality: 0, tgt: 1, tgt_modality: 0 };
        let (loss, stats) = inter_loss(&mut tape, &batch, &[pairing], 2, 0.3, 5).unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
        assert_eq!(stats.triples, 0);
        assert_eq!(stats.terms, 1);
    }

    #[test]
    fn losses_are_invariant_to_feature_scale() {
        let mut rng = crate::rng::stream(&[71]);
        let (k, f) = (9, 4);
        let a0 = random_tokens(&mut rng, k, f);
        let a1 = random_tokens(&mut rng, k, f);
        let b0 = random_tokens(&mut rng, k, f);
        let b1 = random_tokens(&mut rng, k, f);

        let eval = |c: f64| -> (f64, f64) {
            let mut tape = Tape::new();
            let scale = |v: &[f64]| v.iter().map(|x| x * c).collect::<Vec<_>>();
            let batch = vec![
                InstanceFeatures {
                    instance: 10,
                    tokens: vec![
                        stage(&mut tape, &scale(&a0), k, f),
                        stage(&mut tape, &scale(&a1), k, f),
                    ],
                },
                InstanceFeatures {
                    instance: 11,
                    tokens: vec![
                        stage(&mut tape, &scale(&b0), k, f),
                        stage(&mut tape, &scale(&b1), k, f),
                    ],
                },
            ];
            let (intra, _) = intra_loss(&mut tape, &batch, 3, 0.3, 42).unwrap();
            let pairings = [
                InterPairing { src: 0, src_modality: 0, tgt: 1, tgt_modality: 1 },
                InterPairing { src: 1, src_modality: 1, tgt: 0, tgt_modality: 0 },
            ];
            let (inter, _) = inter_loss(&mut tape, &batch, &pairings, 3, 0.3, 42).unwrap();
            (tape.value_scalar(intra), tape.value_scalar(inter))
        };

        let base = eval(1.0);
        for c in [0.1, 10.0] {
            let scaled = eval(c);
            assert!((base.0 - scaled.0).abs() < 1e-10, "intra at scale {c}");
            assert!((base.1 - scaled.1).abs() < 1e-10, "inter at scale {c}");
        }
    }

    #[test]
    fn losses_are_invariant_to_batch_order() {
        let mut rng = crate::rng::stream(&[73]);
        let (k, f) = (8, 4);
        let feats: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..2).map(|_| random_tokens(&mut rng, k, f)).collect())
            .collect();

        let eval = |order: &[usize]| -> (f64, f64) {
            let mut tape = Tape::new();
            let batch: Vec<InstanceFeatures> = order
                .iter()
                .map(|&h| InstanceFeatures {
                    instance: h as u64,
                    tokens: feats[h].iter().map(|v| stage(&mut tape, v, k, f)).collect(),
                })
                .collect();
            let (intra, _) = intra_loss(&mut tape, &batch, 2, 0.3, 7).unwrap();
            // pair instance 0 -> 1 in both layouts, by position
            let pos_of = |h: usize| order.iter().position(|&x| x == h).unwrap();
            let pairings = [InterPairing {
                src: pos_of(0),
                src_modality: 0,
                tgt: pos_of(1),
                tgt_modality: 1,
            }];
            let (inter, _) = inter_loss(&mut tape, &batch, &pairings, 2, 0.3, 7).unwrap();
            (tape.value_scalar(intra), tape.value_scalar(inter))
        };

        let forward = eval(&[0, 1, 2]);
        let shuffled = eval(&[2, 0, 1]);
        assert!((forward.0 - shuffled.0).abs() < 1e-12);
        assert!((forward.1 - shuffled.1).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_component_sum() {
        let mut tape = Tape::new();
        let u = tape.scalar(0.125);
        let a = tape.scalar(0.0625);
        let e = tape.scalar(0.03125);
        let t = total_loss(&mut tape, u, a, e).unwrap();
        assert_eq!(tape.value_scalar(t), 0.125 + 0.0625 + 0.03125);
    }

    #[test]
    fn intra_loss_gradients_pass_fd() {
        // gradient wrt the live target features; selection is frozen by the
        // detached source side
        let mut rng = crate::rng::stream(&[79]);
        let (k, f) = (8, 4);
        let src_vals = random_tokens(&mut rng, k, f);
        let tgt_vals = random_tokens(&mut rng, k, f);

        let run = |tgt: &[f64]| {
            let mut tape = Tape::new();
            let s = tape.leaf(src_vals.clone(), [k, f], false).unwrap();
            let t = tape.leaf(tgt.to_vec(), [k, f], true).unwrap();
            let (loss, _) = intra_term(&mut tape, s, t, 2, 0.3, 3).unwrap();
            (tape, t, loss)
        };
        let (mut tape, t, loss) = run(&tgt_vals);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(t).unwrap().to_vec();
        let report = crate::gradcheck::check(
            &tgt_vals,
            |probe| {
                let (tape, _, loss) = run(probe);
                tape.value_scalar(loss)
            },
            &analytic,
            &crate::gradcheck::GradCheckConfig::default(),
        );
        assert!(report.pass, "max rel err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn single_modality_instances_are_skipped() {
        let mut rng = crate::rng::stream(&[83]);
        let vals = random_tokens(&mut rng, 8, 4);
        let mut tape = Tape::new();
        let z = stage(&mut tape, &vals, 8, 4);
        let batch = vec![InstanceFeatures { instance: 0, tokens: vec![z] }];
        let (loss, stats) = intra_loss(&mut tape, &batch, 2, 0.3, 1).unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
        assert_eq!(stats.terms, 0);
    }
}
