//! Command-line entry point. Five verbs cover the full workflow: generate a
//! synthetic cohort, pretrain, evaluate alignment and purity, sweep rigid
//! perturbations, and export 2-D embeddings.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, missing required paths),
//! 2 runtime failure (bad data, corrupt checkpoint, training abort). Every
//! verb prints its resolved configuration before doing any work, and every
//! verb is deterministic: identical inputs and seeds rewrite identical bytes.

use crate::error::{Error, Result};
use crate::autodiff::Mat;
use crate::metrics::{
    alignment_metrics, anatomy_cluster_purity, pca_project, robustness_sweep, AlignmentReport,
    RobustnessRow, SummaryStat,
};
use crate::model::{load_checkpoint, patchify, Model};
use crate::synthdata::{
    generate_cohort, load_cohort, save_cohort, token_region_labels, AnatomyTemplate, CohortSpec,
    InstanceData, PerturbLevel,
};
use crate::trainer::{train, TrainConfig};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Seed fallback order: `--seed`, then `TACO_SEED`, then the built-in
/// default.
pub const SEED_ENV: &str = "TACO_SEED";

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "taco",
    version,
    about = "Topology-aware consistency pretraining on synthetic multi-modal volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal cohort with region labels
    GenData {
        /// Output cohort directory
        #[arg(long)]
        out: PathBuf,
        /// Number of instances [default: 8]
        #[arg(long)]
        instances: Option<usize>,
        /// Modalities per instance [default: 3]
        #[arg(long)]
        modalities: Option<usize>,
        /// Volume shape as ZxYxX [default: 32x32x32]
        #[arg(long)]
        shape: Option<String>,
        /// Gaussian intensity noise sigma [default: 0.05]
        #[arg(long)]
        noise: Option<f64>,
        /// Generation seed [default: 7, env TACO_SEED]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the shared encoder on a generated cohort
    Pretrain {
        /// Flat key = value config file; flags override its values
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort directory from gen-data
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the loss CSV
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training iterations [default: 2000]
        #[arg(long)]
        iters: Option<usize>,
        /// Neighborhood size for ranking triplets [default: 5]
        #[arg(long)]
        omega: Option<usize>,
        /// Triplet margin [default: 0.3]
        #[arg(long)]
        delta: Option<f64>,
        /// Training seed [default: 7, env TACO_SEED]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate cross-modal alignment and anatomy cluster purity
    Eval {
        /// Trained checkpoint path
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory to evaluate on
        #[arg(long)]
        data: PathBuf,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        report: Option<PathBuf>,
        /// Restrict metrics to foreground tokens (region label > 0)
        #[arg(long)]
        foreground: bool,
        /// Pool tokens across instances instead of per-instance averaging
        #[arg(long)]
        pooled: bool,
        /// Seed for the purity clustering [default: 7, env TACO_SEED]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-evaluate alignment while one modality undergoes rigid errors
    PerturbEval {
        /// Trained checkpoint path
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory to evaluate on
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated severity levels [default: clean,mild,moderate,strong]
        #[arg(long)]
        levels: Option<String>,
        /// Report file path; format chosen by --format
        #[arg(long)]
        report: Option<PathBuf>,
        /// Report file format: json or csv [default: json]
        #[arg(long)]
        format: Option<String>,
        /// Restrict metrics to foreground tokens (region label > 0)
        #[arg(long)]
        foreground: bool,
        /// Perturbation seed [default: 7, env TACO_SEED]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export per-token 2-D PCA embeddings with region labels
    ExportEmbeddings {
        /// Trained checkpoint path
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory to embed
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses argv, dispatches, and maps failures to the exit-code contract.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData { out, instances, modalities, shape, noise, seed } => {
            gen_data(out, instances, modalities, shape, noise, seed)
        }
        Command::Pretrain { config, data, out, iters, omega, delta, seed } => {
            pretrain(config, data, out, iters, omega, delta, seed)
        }
        Command::Eval { checkpoint, data, report, foreground, pooled, seed } => {
            eval(checkpoint, data, report, foreground, pooled, seed)
        }
        Command::PerturbEval { checkpoint, data, levels, report, format, foreground, seed } => {
            perturb_eval(checkpoint, data, levels, report, format, foreground, seed)
        }
        Command::ExportEmbeddings { checkpoint, data, out } => {
            export_embeddings(checkpoint, data, out)
        }
    }
}

fn resolve_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<_> = s.split('x').collect();
    let parse = |p: &str| p.trim().parse::<usize>().ok();
    match parts.as_slice() {
        [a, b, c] => match (parse(a), parse(b), parse(c)) {
            (Some(a), Some(b), Some(c)) if a * b * c > 0 => Ok([a, b, c]),
            _ => Err(Error::Config(format!("bad shape {s:?}, expected ZxYxX"))),
        },
        _ => Err(Error::Config(format!("bad shape {s:?}, expected ZxYxX"))),
    }
}

fn print_config(verb: &str, lines: &[(&str, String)]) {
    println!("[{verb}] resolved configuration:");
    for (k, v) in lines {
        println!("  {k} = {v}");
    }
}

// ---- gen-data --------------------------------------------------------------

fn gen_data(
    out: PathBuf,
    instances: Option<usize>,
    modalities: Option<usize>,
    shape: Option<String>,
    noise: Option<f64>,
    seed: Option<u64>,
) -> CliResult {
    let defaults = CohortSpec::default();
    let spec = CohortSpec {
        instances: instances.unwrap_or(defaults.instances),
        modalities: modalities.unwrap_or(defaults.modalities),
        shape: match shape {
            Some(s) => parse_shape(&s)?,
            None => defaults.shape,
        },
        noise_sigma: noise.unwrap_or(defaults.noise_sigma),
        seed: resolve_seed(seed, defaults.seed)?,
    };
    print_config(
        "gen-data",
        &[
            ("out", out.display().to_string()),
            ("instances", spec.instances.to_string()),
            ("modalities", spec.modalities.to_string()),
            ("shape", format!("{}x{}x{}", spec.shape[0], spec.shape[1], spec.shape[2])),
            ("noise", spec.noise_sigma.to_string()),
            ("seed", spec.seed.to_string()),
        ],
    );
    let cohort = generate_cohort(&AnatomyTemplate::six_region(), &spec)?;
    save_cohort(&out, &cohort, &spec)?;
    println!(
        "wrote {} instances x {} modalities to {}",
        spec.instances,
        spec.modalities,
        out.display()
    );
    Ok(())
}

// ---- pretrain --------------------------------------------------------------

fn pretrain(
    config_path: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    iters: Option<usize>,
    omega: Option<usize>,
    delta: Option<f64>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &config_path {
        cfg.load_file(path)?;
    }
    if let Some(d) = data {
        cfg.data = Some(d);
    }
    if let Some(o) = out {
        cfg.out = Some(o);
    }
    if let Some(i) = iters {
        cfg.iterations = i;
    }
    if let Some(w) = omega {
        cfg.omega = w;
    }
    if let Some(d) = delta {
        cfg.delta = d;
    }
    match seed {
        Some(s) => cfg.seed = s,
        None => {
            if let Ok(v) = std::env::var(SEED_ENV) {
                cfg.seed = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?;
            }
        }
    }
    let data_dir = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("pretrain needs --data (or data= in --config)".into()))?;
    if cfg.out.is_none() {
        return Err(Failure::Usage("pretrain needs --out (or out= in --config)".into()));
    }
    cfg.validate()?;

    println!("[pretrain] resolved configuration:");
    print!("{}", indent(&cfg.render()));

    let (cohort, spec) = load_cohort(&data_dir)?;
    if spec.shape != cfg.volume_shape {
        return Err(Failure::Runtime(Error::Config(format!(
            "cohort shape {:?} does not match configured volume_shape {:?}",
            spec.shape, cfg.volume_shape
        ))));
    }
    let outcome = train(&cohort, &cfg)?;
    if let Some(diag) = &outcome.aborted {
        return Err(Failure::Runtime(Error::NonFinite(format!(
            "{diag}; last-good checkpoint retained"
        ))));
    }
    let out_dir = cfg.out.as_ref().unwrap();
    println!(
        "trained {} steps; final loss {}; artifacts in {}",
        outcome.history.len(),
        outcome.history.last().map(|r| r.l_total).unwrap_or(f64::NAN),
        out_dir.display()
    );
    Ok(())
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("  {l}\n")).collect()
}

// ---- eval ------------------------------------------------------------------

#[derive(Serialize)]
struct PairReport {
    instance: Option<u64>,
    modality_a: usize,
    modality_b: usize,
    metrics: AlignmentReport,
}

#[derive(Serialize)]
struct AggregateStats {
    pos_cos_dist: SummaryStat,
    neg_cos_dist: SummaryStat,
    hard_neg_cos_dist: SummaryStat,
    neg_pos_gap: SummaryStat,
    top1_retrieval: SummaryStat,
    top5_retrieval: SummaryStat,
    pairwise_rank_acc: SummaryStat,
    mnn_selected_ratio: SummaryStat,
}

#[derive(Serialize)]
struct PurityReport {
    k_clusters: usize,
    token_count: usize,
    seed: u64,
    purity: f64,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    data: String,
    foreground_only: bool,
    pooled: bool,
    instances: usize,
    modalities: usize,
    reports: Vec<PairReport>,
    aggregate: AggregateStats,
    anatomy_purity: PurityReport,
}

struct EncodedCohort {
    /// features[i][m] is the token matrix of instance i, modality m
    features: Vec<Vec<Mat>>,
    /// labels[i] is the per-token region label of instance i
    labels: Vec<Vec<u16>>,
    masks: Option<Vec<Vec<bool>>>,
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)
}

fn encode_cohort(model: &Model, cohort: &[InstanceData], foreground: bool) -> Result<EncodedCohort> {
    let grid = model.grid;
    let mut features = Vec::with_capacity(cohort.len());
    let mut labels = Vec::with_capacity(cohort.len());
    for inst in cohort {
        let mut per_mod = Vec::with_capacity(inst.volumes.len());
        for vol in &inst.volumes {
            per_mod.push(model.encode_values(&patchify(vol, &grid)?)?);
        }
        features.push(per_mod);
        labels.push(token_region_labels(&inst.labels, &grid)?);
    }
    let masks = foreground.then(|| {
        labels
            .iter()
            .map(|ls| ls.iter().map(|&l| l != 0).collect())
            .collect()
    });
    Ok(EncodedCohort { features, labels, masks })
}

fn aggregate(reports: &[PairReport]) -> AggregateStats {
    let collect = |f: &dyn Fn(&AlignmentReport) -> f64| {
        let xs: Vec<f64> = reports.iter().map(|r| f(&r.metrics)).collect();
        summarize_slice(&xs)
    };
    AggregateStats {
        pos_cos_dist: collect(&|m| m.pos_cos_dist.mean),
        neg_cos_dist: collect(&|m| m.neg_cos_dist.mean),
        hard_neg_cos_dist: collect(&|m| m.hard_neg_cos_dist.mean),
        neg_pos_gap: collect(&|m| m.neg_pos_gap),
        top1_retrieval: collect(&|m| m.top1_retrieval),
        top5_retrieval: collect(&|m| m.top5_retrieval),
        pairwise_rank_acc: collect(&|m| m.pairwise_rank_acc),
        mnn_selected_ratio: collect(&|m| m.mnn_selected_ratio),
    }
}

fn summarize_slice(xs: &[f64]) -> SummaryStat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    SummaryStat { mean, std: var.sqrt() }
}

fn concat_rows(mats: &[&Mat]) -> Mat {
    let cols = mats[0].cols;
    let mut data = Vec::new();
    for m in mats {
        data.extend_from_slice(&m.data);
    }
    Mat::new(data.len() / cols, cols, data)
}

fn eval(
    checkpoint: PathBuf,
    data: PathBuf,
    report: Option<PathBuf>,
    foreground: bool,
    pooled: bool,
    seed: Option<u64>,
) -> CliResult {
    let seed = resolve_seed(seed, 7)?;
    print_config(
        "eval",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data", data.display().to_string()),
            ("report", report.as_ref().map_or("<stdout>".into(), |p| p.display().to_string())),
            ("foreground", foreground.to_string()),
            ("pooled", pooled.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let model = load_model(&checkpoint)?;
    let (cohort, _) = load_cohort(&data)?;
    check_cohort_shape(&model, &cohort)?;
    let modalities = cohort.first().map_or(0, |i| i.volumes.len());
    if modalities < 2 {
        return Err(Failure::Runtime(Error::Data(
            "evaluation needs at least two modalities".into(),
        )));
    }
    let enc = encode_cohort(&model, &cohort, foreground)?;

    let mut reports = Vec::new();
    for a in 0..modalities {
        for b in a + 1..modalities {
            if pooled {
                let za = concat_rows(&enc.features.iter().map(|f| &f[a]).collect::<Vec<_>>());
                let zb = concat_rows(&enc.features.iter().map(|f| &f[b]).collect::<Vec<_>>());
                let mask: Option<Vec<bool>> =
                    enc.masks.as_ref().map(|ms| ms.iter().flatten().copied().collect());
                let metrics = alignment_metrics(&za, &zb, mask.as_deref())?;
                reports.push(PairReport { instance: None, modality_a: a, modality_b: b, metrics });
            } else {
                for (i, inst) in cohort.iter().enumerate() {
                    let mask = enc.masks.as_ref().map(|ms| ms[i].as_slice());
                    let metrics = alignment_metrics(&enc.features[i][a], &enc.features[i][b], mask)?;
                    reports.push(PairReport {
                        instance: Some(inst.id),
                        modality_a: a,
                        modality_b: b,
                        metrics,
                    });
                }
            }
        }
    }

    // purity over all tokens of all instances and modalities
    let all: Vec<&Mat> = enc.features.iter().flatten().collect();
    let tokens = concat_rows(&all);
    let mut tok_labels = Vec::with_capacity(tokens.rows);
    let mut keep = Vec::with_capacity(tokens.rows);
    for (i, per_mod) in enc.features.iter().enumerate() {
        for _ in per_mod {
            tok_labels.extend_from_slice(&enc.labels[i]);
            match &enc.masks {
                Some(ms) => keep.extend_from_slice(&ms[i]),
                None => keep.extend(std::iter::repeat_n(true, enc.labels[i].len())),
            }
        }
    }
    let kept_tokens = filter_mat(&tokens, &keep);
    let kept_labels: Vec<u16> = tok_labels
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(&l, _)| l)
        .collect();
    let mut distinct = kept_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let purity = anatomy_cluster_purity(&kept_tokens, &kept_labels, distinct.len(), seed)?;

    let out = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        data: data.display().to_string(),
        foreground_only: foreground,
        pooled,
        instances: cohort.len(),
        modalities,
        aggregate: aggregate(&reports),
        reports,
        anatomy_purity: PurityReport {
            k_clusters: distinct.len(),
            token_count: kept_tokens.rows,
            seed,
            purity,
        },
    };
    let json = to_json(&out)?;
    write_or_print(report.as_deref(), &json)?;
    Ok(())
}

fn check_cohort_shape(model: &Model, cohort: &[InstanceData]) -> Result<()> {
    for inst in cohort {
        for v in &inst.volumes {
            if v.shape != model.grid.volume_shape {
                return Err(Error::Data(format!(
                    "instance {} volume shape {:?} does not match checkpoint grid {:?}",
                    inst.id, v.shape, model.grid.volume_shape
                )));
            }
        }
    }
    Ok(())
}

fn filter_mat(m: &Mat, keep: &[bool]) -> Mat {
    let mut data = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            data.extend_from_slice(m.row(i));
        }
    }
    Mat::new(data.len() / m.cols, m.cols, data)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Data(format!("report serialization: {e}")))
}

fn write_or_print(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            f.write_all(content.as_bytes()).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

// ---- perturb-eval ----------------------------------------------------------

#[derive(Serialize)]
struct SweepReport {
    checkpoint: String,
    data: String,
    foreground_only: bool,
    seed: u64,
    instances: usize,
    modality_pair: [usize; 2],
    rows: Vec<RobustnessRow>,
}

fn perturb_eval(
    checkpoint: PathBuf,
    data: PathBuf,
    levels: Option<String>,
    report: Option<PathBuf>,
    format: Option<String>,
    foreground: bool,
    seed: Option<u64>,
) -> CliResult {
    let seed = resolve_seed(seed, 7)?;
    let level_spec = levels.unwrap_or_else(|| "clean,mild,moderate,strong".into());
    let levels: Vec<PerturbLevel> = level_spec
        .split(',')
        .map(|s| PerturbLevel::parse(s.trim()))
        .collect::<Result<_>>()?;
    if levels.is_empty() {
        return Err(Failure::Usage("--levels needs at least one level".into()));
    }
    let format = format.unwrap_or_else(|| "json".into());
    if format != "json" && format != "csv" {
        return Err(Failure::Usage(format!("--format {format:?} is neither json nor csv")));
    }
    print_config(
        "perturb-eval",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data", data.display().to_string()),
            ("levels", level_spec.clone()),
            ("report", report.as_ref().map_or("<stdout>".into(), |p| p.display().to_string())),
            ("format", format.clone()),
            ("foreground", foreground.to_string()),
            ("seed", seed.to_string()),
        ],
    );

    let model = load_model(&checkpoint)?;
    let (cohort, _) = load_cohort(&data)?;
    check_cohort_shape(&model, &cohort)?;
    if cohort.first().map_or(0, |i| i.volumes.len()) < 2 {
        return Err(Failure::Runtime(Error::Data(
            "perturbation sweep needs at least two modalities".into(),
        )));
    }

    // sweep each instance with its own stream, then average per level
    let grid = model.grid;
    let mut acc: Vec<RobustnessRow> = levels
        .iter()
        .map(|l| RobustnessRow {
            level: l.name().to_string(),
            pos_cos_dist: 0.0,
            top1_retrieval: 0.0,
            mnn_selected_ratio: 0.0,
        })
        .collect();
    for inst in &cohort {
        let mask: Option<Vec<bool>> = if foreground {
            let ls = token_region_labels(&inst.labels, &grid)?;
            Some(ls.iter().map(|&l| l != 0).collect())
        } else {
            None
        };
        let rows = robustness_sweep(
            &model,
            inst,
            (0, 1),
            &levels,
            crate::rng::mix(&[seed, inst.id]),
            mask.as_deref(),
        )?;
        for (a, r) in acc.iter_mut().zip(&rows) {
            a.pos_cos_dist += r.pos_cos_dist;
            a.top1_retrieval += r.top1_retrieval;
            a.mnn_selected_ratio += r.mnn_selected_ratio;
        }
    }
    let n = cohort.len() as f64;
    for a in &mut acc {
        a.pos_cos_dist /= n;
        a.top1_retrieval /= n;
        a.mnn_selected_ratio /= n;
    }

    println!("level,pos_cos_dist,top1_retrieval,mnn_selected_ratio");
    for r in &acc {
        println!("{},{},{},{}", r.level, r.pos_cos_dist, r.top1_retrieval, r.mnn_selected_ratio);
    }

    let content = if format == "csv" {
        let mut s = String::from("level,pos_cos_dist,top1_retrieval,mnn_selected_ratio\n");
        for r in &acc {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.level, r.pos_cos_dist, r.top1_retrieval, r.mnn_selected_ratio
            ));
        }
        s
    } else {
        to_json(&SweepReport {
            checkpoint: checkpoint.display().to_string(),
            data: data.display().to_string(),
            foreground_only: foreground,
            seed,
            instances: cohort.len(),
            modality_pair: [0, 1],
            rows: acc,
        })?
    };
    if let Some(p) = &report {
        write_or_print(Some(p), &content)?;
    }
    Ok(())
}

// ---- export-embeddings -----------------------------------------------------

fn export_embeddings(checkpoint: PathBuf, data: PathBuf, out: PathBuf) -> CliResult {
    print_config(
        "export-embeddings",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
        ],
    );
    let model = load_model(&checkpoint)?;
    let (cohort, _) = load_cohort(&data)?;
    check_cohort_shape(&model, &cohort)?;
    let enc = encode_cohort(&model, &cohort, false)?;

    let all: Vec<&Mat> = enc.features.iter().flatten().collect();
    let tokens = concat_rows(&all);
    let proj = pca_project(&tokens, 2)?;

    let mut csv = String::from("token_id,region_label,modality,pc1,pc2\n");
    let mut token_id = 0usize;
    let mut row = 0usize;
    for (i, per_mod) in enc.features.iter().enumerate() {
        for (m, feat) in per_mod.iter().enumerate() {
            for t in 0..feat.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    token_id,
                    enc.labels[i][t],
                    m,
                    proj.get(row, 0),
                    proj.get(row, 1)
                ));
                token_id += 1;
                row += 1;
            }
        }
    }
    write_or_print(Some(&out), &csv)?;
    println!("wrote {token_id} embeddings to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing_accepts_dims_and_rejects_junk() {
        assert_eq!(parse_shape("32x32x32").unwrap(), [32, 32, 32]);
        assert_eq!(parse_shape("8x4x2").unwrap(), [8, 4, 2]);
        assert!(parse_shape("32x32").is_err());
        assert!(parse_shape("axbxc").is_err());
        assert!(parse_shape("0x4x4").is_err());
    }

    #[test]
    fn help_and_bad_flags_follow_exit_contract() {
        assert_eq!(run(["taco", "--help"]), 0);
        assert_eq!(run(["taco", "gen-data", "--help"]), 0);
        assert_eq!(run(["taco", "no-such-verb"]), 1);
        assert_eq!(run(["taco", "gen-data", "--bogus-flag", "1"]), 1);
        // missing required --out
        assert_eq!(run(["taco", "gen-data"]), 1);
    }

    #[test]
    fn runtime_failures_exit_two() {
        // nonexistent checkpoint path
        assert_eq!(
            run(["taco", "eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent"]),
            2
        );
    }
}
