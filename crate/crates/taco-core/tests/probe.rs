//! Temporary diagnostic, not part of the suite.

use taco_core::autodiff::Mat;
use taco_core::metrics::{
    alignment_metrics, anatomy_cluster_purity, mnn_region_agreement, purity_null_band,
};
use taco_core::model::{load_checkpoint, save_checkpoint, Model, PatchGrid};
use taco_core::synthdata::{
    generate_cohort, token_region_labels, tokens_of, AnatomyTemplate, CohortSpec, InstanceData,
};
use taco_core::trainer::{train, TrainConfig};

#[test]
#[ignore]
fn adjacency_stress_and_token_census() {
    let grid = PatchGrid::new([32, 32, 32], [4, 4, 4]).unwrap();
    for seed in [5u64, 7, 8, 11, 42, 99] {
        let spec = CohortSpec {
            instances: 16,
            modalities: 2,
            seed,
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&AnatomyTemplate::six_region(), &spec).unwrap();
        let mut fg_counts = Vec::new();
        let mut k_per_inst = Vec::new();
        let mut region_tokens = vec![0usize; 7];
        for inst in &cohort {
            let region = token_region_labels(&inst.labels, &grid).unwrap();
            let fg = region.iter().filter(|&&l| l != 0).count();
            let mut d: Vec<u16> = region.iter().copied().filter(|&l| l != 0).collect();
            for &l in &d {
                region_tokens[l as usize] += 1;
            }
            d.sort_unstable();
            d.dedup();
            fg_counts.push(fg);
            k_per_inst.push(d.len());
        }
        println!(
            "seed {seed}: 16 ok, fg tokens min {} max {}, distinct regions min {} max {}, per-region {:?}",
            fg_counts.iter().min().unwrap(),
            fg_counts.iter().max().unwrap(),
            k_per_inst.iter().min().unwrap(),
            k_per_inst.iter().max().unwrap(),
            &region_tokens[1..]
        );
    }
}

/// Candidate layout: one nested pair plus two touching pairs, every body a
/// different size, anisotropy, and sub-patch phase so no two regions share a
/// pattern family.
fn candidate_v4() -> AnatomyTemplate {
    AnatomyTemplate {
        center: [0.5, 0.5, 0.5],
        bodies: vec![
            ([-0.196875, -0.184375, -0.178125], [0.221875, 0.215625, 0.2125]), // 1 host
            ([-0.190625, -0.178125, -0.184375], [0.1375, 0.1359375, 0.134375]), // 2 core in 1
            ([0.203125, 0.234375, -0.203125], [0.203125, 0.14375, 0.140625]),  // 3 prolate-x
            ([0.21875, -0.090625, -0.19375], [0.140625, 0.2, 0.1375]),         // 4 prolate-y, touches 3
            ([-0.1875, 0.25, 0.203125], [0.18125, 0.140625, 0.175]),           // 5 prolate-xz
            ([0.121875, 0.25, 0.203125], [0.153125, 0.1515625, 0.15]),         // 6 sphere, touches 5
        ],
        adjacency: vec![(0, 1), (0, 3), (0, 4), (0, 5), (0, 6), (1, 2), (3, 4), (5, 6)],
    }
}

/// Compact like the shipped layout, but no two regions share size,
/// anisotropy, or sub-patch phase, and the touching pairs meet along
/// different axes.
fn candidate_v5() -> AnatomyTemplate {
    AnatomyTemplate {
        center: [0.5, 0.5, 0.5],
        bodies: vec![
            ([-0.19375, -0.18125, -0.15625], [0.2125, 0.2109375, 0.2109375]), // 1 host
            ([-0.1875, -0.1765625, -0.1609375], [0.1359375, 0.134375, 0.134375]), // 2 core in 1
            ([0.24375, 0.21875, -0.209375], [0.184375, 0.14375, 0.1375]),     // 3 prolate-x
            ([0.2125, -0.075, -0.16875], [0.153125, 0.16875, 0.1359375]),     // 4 prolate-y, touches 3
            ([-0.2125, 0.2625, 0.184375], [0.1375, 0.140625, 0.175]),         // 5 prolate-z
            ([0.071875, 0.246875, 0.196875], [0.1609375, 0.1578125, 0.1546875]), // 6 sphere, touches 5
        ],
        adjacency: vec![(0, 1), (0, 3), (0, 4), (0, 5), (0, 6), (1, 2), (3, 4), (5, 6)],
    }
}

/// The shipped lobe and core with satellites decorrelated in axis ratios,
/// sizes, and sub-patch phases; pairs touch along x and z respectively.
fn candidate_v6() -> AnatomyTemplate {
    AnatomyTemplate {
        center: [0.5, 0.5, 0.5],
        bodies: vec![
            ([-0.205, -0.065, -0.02], [0.205, 0.2, 0.195]),                  // 1 lobe
            ([-0.205, -0.065, -0.02], [0.135, 0.13, 0.125]),                 // 2 core in 1
            ([0.040625, 0.265625, 0.14375], [0.153125, 0.128125, 0.125]),    // 3 prolate-x
            ([0.296875, 0.278125, 0.128125], [0.125, 0.140625, 0.1296875]),  // 4 prolate-y, touches 3
            ([0.2125, -0.25, -0.2], [0.128125, 0.134375, 0.1515625]),        // 5 prolate-z
            ([0.203125, -0.240625, 0.065625], [0.1234375, 0.1421875, 0.1328125]), // 6 oblate-x, touches 5
        ],
        adjacency: vec![(0, 1), (0, 3), (0, 4), (0, 5), (0, 6), (1, 2), (3, 4), (5, 6)],
    }
}

/// Sparse layout: satellites and core sit at patch-centered phases with
/// semi-axes ~3.3-3.6 voxels, so each owns a single dominant token per
/// volume and the pooled set is a handful of tight trained orbits that
/// k-means can separate.
fn candidate_v7() -> AnatomyTemplate {
    AnatomyTemplate {
        center: [0.5, 0.5, 0.5],
        bodies: vec![
            ([-0.1875, -0.0625, -0.0625], [0.184375, 0.1796875, 0.178125]),  // 1 host
            ([-0.18125, -0.0625, -0.065625], [0.1078125, 0.10625, 0.1046875]), // 2 core in 1
            ([0.175, 0.3125, 0.0625], [0.1109375, 0.103125, 0.103125]),      // 3 prolate-x
            ([0.315625, 0.16875, 0.0625], [0.1046875, 0.109375, 0.103125]),  // 4 prolate-y, touches 3
            ([0.1875, -0.190625, -0.1875], [0.103125, 0.1078125, 0.1125]),   // 5 prolate-z
            ([0.1875, -0.04375, -0.040625], [0.1109375, 0.109375, 0.1015625]), // 6 oblate-z, touches 5
        ],
        adjacency: vec![(0, 1), (0, 3), (0, 4), (0, 5), (0, 6), (1, 2), (3, 4), (5, 6)],
    }
}

/// Train-free design loop: raw-voxel k-means purity pooled within one
/// modality approximates the ceiling the trained-aligned geometry can
/// inherit; the two-modality pool approximates the untrained arm; the clone
/// census bounds top-1 retrieval; raw cross-instance MNN agreement proxies
/// the region fidelity of the pseudo-correspondence pulls.
#[test]
#[ignore]
fn pattern_geometry_probe() {
    let grid = PatchGrid::new([32, 32, 32], [4, 4, 4]).unwrap();
    for (name, template) in [
        ("v3", AnatomyTemplate::six_region()),
        ("v4", candidate_v4()),
        ("v5", candidate_v5()),
        ("v6", candidate_v6()),
        ("v7", candidate_v7()),
    ] {
        for seed in [7u64, 11, 42] {
            let spec = CohortSpec {
                instances: 4,
                modalities: 2,
                seed,
                ..CohortSpec::default()
            };
            let cohort = match generate_cohort(&template, &spec) {
                Ok(c) => c,
                Err(e) => {
                    println!("[{name} s{seed}] generation failed: {e}");
                    continue;
                }
            };
            let mut pool1 = Vec::new();
            let mut labels1 = Vec::new();
            let mut pool2 = Vec::new();
            let mut labels2 = Vec::new();
            let mut per_region = vec![0usize; 7];
            let mut k_min = usize::MAX;
            for inst in &cohort {
                let region = token_region_labels(&inst.labels, &grid).unwrap();
                let mut distinct: Vec<u16> =
                    region.iter().copied().filter(|&l| l != 0).collect();
                distinct.sort_unstable();
                distinct.dedup();
                k_min = k_min.min(distinct.len());
                for mod_i in 0..2 {
                    let toks = tokens_of(&inst.volumes[mod_i], &grid).unwrap();
                    for (t, &r) in region.iter().enumerate() {
                        if r != 0 {
                            if mod_i == 0 {
                                pool1.extend_from_slice(toks.row(t));
                                labels1.push(r);
                                per_region[r as usize] += 1;
                            }
                            pool2.extend_from_slice(toks.row(t));
                            labels2.push(r);
                        }
                    }
                }
            }
            let m1 = Mat::new(labels1.len(), 64, pool1);
            let m2 = Mat::new(labels2.len(), 64, pool2);
            let p1 = anatomy_cluster_purity(&m1, &labels1, 6, 4008).unwrap();
            let p2 = anatomy_cluster_purity(&m2, &labels2, 6, 4008).unwrap();
            let null = purity_null_band(&labels2, 6, 32, 100, 4009).unwrap();
            let max_share =
                *per_region[1..].iter().max().unwrap() as f64 / labels1.len() as f64;
            println!(
                "[{name} s{seed}] k_min {k_min} fg/vol {} per-region {:?} max-share {max_share:.2} | raw purity 1-mod {p1:.3} 2-mod {p2:.3} null-up {:.3}",
                labels1.len() / 4,
                &per_region[1..],
                null.upper
            );

            // clone census on a near-noiseless cohort: pairs of fg tokens in
            // the same volume below the separability floor
            let clean = generate_cohort(
                &template,
                &CohortSpec { noise_sigma: 1e-6, ..spec },
            )
            .unwrap();
            let mut close = [0usize; 2];
            let mut fg_total = 0usize;
            for inst in &clean {
                let region = token_region_labels(&inst.labels, &grid).unwrap();
                let toks = tokens_of(&inst.volumes[0], &grid).unwrap();
                let fg: Vec<usize> =
                    (0..region.len()).filter(|&t| region[t] != 0).collect();
                fg_total += fg.len();
                for (ai, &a) in fg.iter().enumerate() {
                    let mut best = f64::INFINITY;
                    for (bi, &b) in fg.iter().enumerate() {
                        if ai != bi {
                            let d = toks
                                .row(a)
                                .iter()
                                .zip(toks.row(b))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                                .sqrt();
                            best = best.min(d);
                        }
                    }
                    if best < 0.2 {
                        close[0] += 1;
                    }
                    if best < 0.5 {
                        close[1] += 1;
                    }
                }
            }
            println!(
                "[{name} s{seed}] clones: {} of {} fg below 0.2, {} below 0.5",
                close[0], fg_total, close[1]
            );

            let masks: Vec<Vec<bool>> = cohort
                .iter()
                .map(|inst| {
                    token_region_labels(&inst.labels, &grid)
                        .unwrap()
                        .iter()
                        .map(|&l| l != 0)
                        .collect()
                })
                .collect();
            let full_labels: Vec<Vec<u16>> = cohort
                .iter()
                .map(|inst| token_region_labels(&inst.labels, &grid).unwrap())
                .collect();
            let raw: Vec<Mat> = cohort
                .iter()
                .map(|inst| tokens_of(&inst.volumes[0], &grid).unwrap())
                .collect();
            let mut agree = Vec::new();
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        agree.push(
                            mnn_region_agreement(
                                &raw[i],
                                &raw[j],
                                &full_labels[i],
                                &full_labels[j],
                                (Some(&masks[i]), Some(&masks[j])),
                            )
                            .unwrap(),
                        );
                    }
                }
            }
            println!(
                "[{name} s{seed}] raw cross-instance agreement {:.3}",
                agree.iter().sum::<f64>() / agree.len() as f64
            );

            // omega-NN region purity on raw cosine geometry: the fraction of
            // each fg anchor's 5 nearest tokens (over all 512) that share its
            // region, and the fraction that are background
            let mut same = 0usize;
            let mut bg = 0usize;
            let mut total = 0usize;
            for inst in &cohort {
                let region = token_region_labels(&inst.labels, &grid).unwrap();
                for mod_i in 0..2 {
                    let toks = tokens_of(&inst.volumes[mod_i], &grid).unwrap();
                    let norms: Vec<f64> = (0..toks.rows)
                        .map(|t| toks.row(t).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
                        .collect();
                    for a in 0..toks.rows {
                        if region[a] == 0 {
                            continue;
                        }
                        let ra = toks.row(a);
                        let mut d: Vec<(f64, usize)> = (0..toks.rows)
                            .filter(|&b| b != a)
                            .map(|b| {
                                let dot: f64 =
                                    ra.iter().zip(toks.row(b)).map(|(x, y)| x * y).sum();
                                (1.0 - dot / (norms[a] * norms[b]), b)
                            })
                            .collect();
                        d.sort_by(|x, y| x.0.total_cmp(&y.0));
                        for &(_, b) in &d[..5] {
                            total += 1;
                            if region[b] == region[a] {
                                same += 1;
                            } else if region[b] == 0 {
                                bg += 1;
                            }
                        }
                    }
                }
            }
            println!(
                "[{name} s{seed}] nn purity {:.3} (bg fraction {:.3})",
                same as f64 / total as f64,
                bg as f64 / total as f64
            );
        }
    }
}

fn unit_rows(m: &Mat) -> Mat {
    let mut data = Vec::with_capacity(m.rows * m.cols);
    for i in 0..m.rows {
        let r = m.row(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(r.iter().map(|v| v / n));
    }
    Mat::new(m.rows, m.cols, data)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains on cohort[..8] (or loads a cached checkpoint), then prints loss
/// trend, purity arms in raw and unit-norm geometry, cosine structure by
/// (region, modality) relation, held-out alignment, and cross-instance
/// agreement for trained and untrained encoders.
fn report(tag: &str, cohort: &[InstanceData], config: &TrainConfig) {
    let grid = PatchGrid::new(config.volume_shape, config.patch).unwrap();
    let ckpt = std::path::PathBuf::from(format!("/tmp/probe_{tag}.ckpt"));
    let model = if ckpt.exists() {
        println!("[{tag}] loading cached {}", ckpt.display());
        load_checkpoint(&ckpt).unwrap()
    } else {
        let start = std::time::Instant::now();
        let outcome = train(&cohort[..8], config).unwrap();
        assert!(outcome.aborted.is_none(), "{:?}", outcome.aborted);
        let secs = start.elapsed().as_secs_f64();
        let avg = |r: &[taco_core::trainer::StepRecord], f: &dyn Fn(&taco_core::trainer::StepRecord) -> f64| {
            r.iter().map(f).sum::<f64>() / r.len() as f64
        };
        let h = &outcome.history[..100.min(outcome.history.len())];
        let t = &outcome.history[outcome.history.len().saturating_sub(100)..];
        println!(
            "[{tag}] train {secs:.0}s  uni {:.4}->{:.4}  intra {:.4}->{:.4}  inter {:.4}->{:.4}",
            avg(h, &|s| s.l_uni),
            avg(t, &|s| s.l_uni),
            avg(h, &|s| s.l_intra),
            avg(t, &|s| s.l_intra),
            avg(h, &|s| s.l_inter),
            avg(t, &|s| s.l_inter),
        );
        save_checkpoint(&ckpt, &outcome.model).unwrap();
        outcome.model
    };

    let untrained =
        Model::init(grid, config.feature_dim, config.depth, config.mixing, config.seed).unwrap();
    let held = &cohort[8..];

    // criterion-8 pool: 4 held-out x mods 0,1, foreground only; tags carry
    // (region, modality) per pooled row
    let pool = |m: &Model| -> (Mat, Vec<u16>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut mods = Vec::new();
        for inst in held {
            let region = token_region_labels(&inst.labels, &grid).unwrap();
            for mod_i in 0..2 {
                let z = m.encode_values(&tokens_of(&inst.volumes[mod_i], &grid).unwrap()).unwrap();
                for (i, &r) in region.iter().enumerate() {
                    if r != 0 {
                        rows.extend_from_slice(z.row(i));
                        labels.push(r);
                        mods.push(mod_i);
                    }
                }
            }
        }
        (Mat::new(labels.len(), config.feature_dim, rows), labels, mods)
    };
    let (zt, labels, mods) = pool(&model);
    let (zu, _, _) = pool(&untrained);
    let k = {
        let mut d = labels.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    let mut per_region = vec![0usize; 7];
    for &l in &labels {
        per_region[l as usize] += 1;
    }
    println!("[{tag}] pool {} tokens, per-region {:?}", labels.len(), &per_region[1..]);

    let null = purity_null_band(&labels, k, config.feature_dim, 200, 4009).unwrap();
    for (geom, a, b) in [("raw", &zt, &zu), ("unit", &unit_rows(&zt), &unit_rows(&zu))] {
        let pt = anatomy_cluster_purity(a, &labels, k, 4008).unwrap();
        let pu = anatomy_cluster_purity(b, &labels, k, 4008).unwrap();
        println!(
            "[{tag}] {geom} purity trained {pt:.4} untrained {pu:.4} null mean {:.4} upper {:.4}",
            null.mean, null.upper
        );
    }

    // cosine structure: mean cos by (same/diff region) x (same/cross modality)
    for (name, z) in [("trained", &zt), ("untrained", &zu)] {
        let zn = unit_rows(z);
        let mut sums = [[0.0f64; 2]; 2];
        let mut cnts = [[0usize; 2]; 2];
        for i in 0..zn.rows {
            for j in i + 1..zn.rows {
                let sr = (labels[i] == labels[j]) as usize;
                let sm = (mods[i] == mods[j]) as usize;
                sums[sr][sm] += cos(zn.row(i), zn.row(j));
                cnts[sr][sm] += 1;
            }
        }
        let norms: Vec<f64> = (0..z.rows)
            .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let (nmin, nmax) = (
            norms.iter().cloned().fold(f64::INFINITY, f64::min),
            norms.iter().cloned().fold(0.0f64, f64::max),
        );
        println!(
            "[{tag}] {name} cos: same-reg x-mod {:.3} | same-reg same-mod {:.3} | diff-reg x-mod {:.3} | diff-reg same-mod {:.3} | row norm {:.2}..{:.2}",
            sums[1][0] / cnts[1][0] as f64,
            sums[1][1] / cnts[1][1] as f64,
            sums[0][0] / cnts[0][0] as f64,
            sums[0][1] / cnts[0][1] as f64,
            nmin, nmax
        );
    }

    // held-out alignment + cross-instance agreement per model
    for (name, m) in [("trained", &model), ("untrained", &untrained)] {
        let enc: Vec<Vec<Mat>> = held
            .iter()
            .map(|inst| {
                (0..3)
                    .map(|mi| {
                        m.encode_values(&tokens_of(&inst.volumes[mi], &grid).unwrap()).unwrap()
                    })
                    .collect()
            })
            .collect();
        let masks: Vec<Vec<bool>> = held
            .iter()
            .map(|inst| {
                token_region_labels(&inst.labels, &grid)
                    .unwrap()
                    .iter()
                    .map(|&l| l != 0)
                    .collect()
            })
            .collect();
        let full_labels: Vec<Vec<u16>> = held
            .iter()
            .map(|inst| token_region_labels(&inst.labels, &grid).unwrap())
            .collect();

        let mut top1 = Vec::new();
        let mut gap = Vec::new();
        let mut rank = Vec::new();
        let mut mnn = Vec::new();
        for (i, per_mod) in enc.iter().enumerate() {
            for a in 0..3 {
                for b in a + 1..3 {
                    let r = alignment_metrics(&per_mod[a], &per_mod[b], Some(&masks[i])).unwrap();
                    top1.push(r.top1_retrieval);
                    gap.push(r.neg_pos_gap);
                    rank.push(r.pairwise_rank_acc);
                    mnn.push(r.mnn_selected_ratio);
                }
            }
        }
        let mut agree = Vec::new();
        for i in 0..held.len() {
            for j in 0..held.len() {
                if i != j {
                    agree.push(
                        mnn_region_agreement(
                            &enc[i][0],
                            &enc[j][1],
                            &full_labels[i],
                            &full_labels[j],
                            (Some(&masks[i]), Some(&masks[j])),
                        )
                        .unwrap(),
                    );
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "[{tag}] {name}: top1 {:.2} gap {:.4} rank {:.2} mnn {:.2} cross-inst-agree {:.4}",
            mean(&top1),
            mean(&gap),
            mean(&rank),
            mean(&mnn),
            mean(&agree)
        );
    }
}

#[test]
#[ignore]
fn default_design_probe() {
    let spec = CohortSpec {
        instances: 12,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&AnatomyTemplate::six_region(), &spec).unwrap();
    report("v3", &cohort, &TrainConfig::default());
}

#[test]
#[ignore]
fn ablation_probe() {
    let spec = CohortSpec {
        instances: 12,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&AnatomyTemplate::six_region(), &spec).unwrap();
    let grid = PatchGrid::new([32, 32, 32], [4, 4, 4]).unwrap();
    let held = &cohort[8..];

    let run = |name: &str, use_intra: bool, use_inter: bool| -> Model {
        let ckpt = std::path::PathBuf::from(format!("/tmp/probe_ablate_{name}.ckpt"));
        if ckpt.exists() {
            return load_checkpoint(&ckpt).unwrap();
        }
        let config = TrainConfig {
            iterations: 600,
            use_intra,
            use_inter,
            ..TrainConfig::default()
        };
        let m = train(&cohort[..8], &config).unwrap().model;
        save_checkpoint(&ckpt, &m).unwrap();
        m
    };
    let models = [
        ("uni", run("uni", false, false)),
        ("uni+intra", run("ui", true, false)),
        ("all", run("all", true, true)),
    ];

    for (name, m) in &models {
        let mut top1 = Vec::new();
        let mut agree = Vec::new();
        let enc: Vec<Vec<Mat>> = held
            .iter()
            .map(|inst| {
                (0..3)
                    .map(|mi| {
                        m.encode_values(&tokens_of(&inst.volumes[mi], &grid).unwrap()).unwrap()
                    })
                    .collect()
            })
            .collect();
        let masks: Vec<Vec<bool>> = held
            .iter()
            .map(|inst| {
                token_region_labels(&inst.labels, &grid)
                    .unwrap()
                    .iter()
                    .map(|&l| l != 0)
                    .collect()
            })
            .collect();
        let full_labels: Vec<Vec<u16>> = held
            .iter()
            .map(|inst| token_region_labels(&inst.labels, &grid).unwrap())
            .collect();
        for (i, per_mod) in enc.iter().enumerate() {
            for a in 0..3 {
                for b in a + 1..3 {
                    top1.push(
                        alignment_metrics(&per_mod[a], &per_mod[b], Some(&masks[i]))
                            .unwrap()
                            .top1_retrieval,
                    );
                }
            }
        }
        for i in 0..held.len() {
            for j in 0..held.len() {
                if i != j {
                    agree.push(
                        mnn_region_agreement(
                            &enc[i][0],
                            &enc[j][1],
                            &full_labels[i],
                            &full_labels[j],
                            (Some(&masks[i]), Some(&masks[j])),
                        )
                        .unwrap(),
                    );
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("[ablate] {name}: top1 {:.2} cross-inst-agree {:.4}", mean(&top1), mean(&agree));
    }
}
