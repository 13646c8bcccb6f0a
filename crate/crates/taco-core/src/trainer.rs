//! Optimization loop: AdamW with decoupled weight decay, linear warmup into
//! cosine annealing, instance batching, checkpointing, and a CSV loss log.
//!
//! A run is fully determined by (cohort bytes, config): batches, negative
//! draws, and pair modality choices all derive from seeded streams keyed by
//! step, so two runs with the same inputs produce byte-identical artifacts.

use crate::error::{Error, Result};
use crate::losses::{self, InstanceFeatures, InterPairing};
use crate::model::{self, Model, PatchGrid};
use crate::rng;
use crate::synthdata::InstanceData;
use crate::autodiff::{Mat, Tape};
use rand::Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

const TAG_BATCH: u64 = 22;
const TAG_STEP: u64 = 23;
const TAG_PAIR: u64 = 24;

pub const LOSS_CSV_HEADER: &str = "step,l_uni,l_intra,l_inter,l_total,lr";

/// Everything a training run needs. Paths are optional so library callers
/// can train entirely in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub volume_shape: [usize; 3],
    pub patch: [usize; 3],
    pub feature_dim: usize,
    pub depth: usize,
    pub mixing: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_instances: usize,
    pub omega: usize,
    pub delta: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub use_intra: bool,
    pub use_inter: bool,
    /// Round-robin with one sampled modality pair per instance by default;
    /// true enumerates every ordered instance and modality combination.
    pub enumerate_pairs: bool,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            volume_shape: [32, 32, 32],
            patch: [4, 4, 4],
            feature_dim: 32,
            depth: 3,
            mixing: true,
            learning_rate: 3e-4,
            weight_decay: 1e-5,
            iterations: 2000,
            batch_instances: 2,
            omega: 5,
            delta: 0.3,
            warmup_fraction: 0.1,
            seed: 7,
            use_intra: true,
            use_inter: true,
            enumerate_pairs: false,
            checkpoint_every: 0,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be positive", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} must be in [0,1)", self.warmup_fraction)));
        }
        if self.omega < 1 {
            return Err(Error::Config("omega must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        if self.batch_instances < 1 {
            return Err(Error::Config("batch_instances must be at least 1".into()));
        }
        PatchGrid::new(self.volume_shape, self.patch)?;
        Ok(())
    }

    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "volume_shape" => self.volume_shape = parse_dims(value).ok_or_else(|| bad(key))?,
            "patch" => self.patch = parse_dims(value).ok_or_else(|| bad(key))?,
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad(key))?,
            "depth" => self.depth = value.parse().map_err(|_| bad(key))?,
            "mixing" => self.mixing = parse_bool(value).ok_or_else(|| bad(key))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad(key))?,
            "batch_instances" => self.batch_instances = value.parse().map_err(|_| bad(key))?,
            "omega" => self.omega = value.parse().map_err(|_| bad(key))?,
            "delta" => self.delta = value.parse().map_err(|_| bad(key))?,
            "warmup_fraction" => self.warmup_fraction = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "use_intra" => self.use_intra = parse_bool(value).ok_or_else(|| bad(key))?,
            "use_inter" => self.use_inter = parse_bool(value).ok_or_else(|| bad(key))?,
            "enumerate_pairs" => self.enumerate_pairs = parse_bool(value).ok_or_else(|| bad(key))?,
            "checkpoint_every" => self.checkpoint_every = value.parse().map_err(|_| bad(key))?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Loads a flat `key = value` file; `#` starts a comment, blanks skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    /// The resolved settings, one `key = value` per line in a fixed order.
    pub fn render(&self) -> String {
        let dims = |d: [usize; 3]| format!("{}x{}x{}", d[0], d[1], d[2]);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("volume_shape", dims(self.volume_shape));
        kv("patch", dims(self.patch));
        kv("feature_dim", self.feature_dim.to_string());
        kv("depth", self.depth.to_string());
        kv("mixing", self.mixing.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("iterations", self.iterations.to_string());
        kv("batch_instances", self.batch_instances.to_string());
        kv("omega", self.omega.to_string());
        kv("delta", self.delta.to_string());
        kv("warmup_fraction", self.warmup_fraction.to_string());
        kv("seed", self.seed.to_string());
        kv("use_intra", self.use_intra.to_string());
        kv("use_inter", self.use_inter.to_string());
        kv("enumerate_pairs", self.enumerate_pairs.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        if let Some(p) = &self.data {
            kv("data", p.display().to_string());
        }
        if let Some(p) = &self.out {
            kv("out", p.display().to_string());
        }
        s
    }
}

fn parse_dims(s: &str) -> Option<[usize; 3]> {
    let mut it = s.split('x').map(|p| p.trim().parse::<usize>().ok());
    let out = [it.next()??, it.next()??, it.next()??];
    it.next().is_none().then_some(out)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

/// Per-parameter AdamW moments, block-parallel to [`Model::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One decoupled-weight-decay Adam update. The decay term uses the pre-step
/// weights and never passes through the moments. Any non-finite gradient
/// aborts before any state is touched.
pub fn adamw_step(
    params: &mut [&mut Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr_t: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} param blocks, {} grad blocks, {} moment blocks",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() {
            return Err(Error::ShapeMismatch(format!("grad block {i} length")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {i} element {j}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, block) in params.iter_mut().enumerate() {
        for (j, w) in block.iter_mut().enumerate() {
            let g = grads[i][j];
            let m = b1 * state.m[i][j] + (1.0 - b1) * g;
            let v = b2 * state.v[i][j] + (1.0 - b2) * g * g;
            state.m[i][j] = m;
            state.v[i][j] = v;
            let update = (m / c1) / ((v / c2).sqrt() + eps);
            *w -= lr_t * (weight_decay * *w + update);
        }
    }
    Ok(())
}

/// Linear warmup from zero, then cosine annealing to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = (total as f64 * warmup_fraction).floor() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_uni: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_uni, self.l_intra, self.l_inter, self.l_total, self.lr
        )
    }
}

/// Final model plus the full loss log. `aborted` carries the diagnostic when
/// a non-finite loss or gradient stopped the run; the model then holds the
/// last parameters that produced a finite step.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
    pub aborted: Option<String>,
}

pub fn render_loss_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Distinct batch positions drawn without replacement, in draw order.
fn sample_batch(n: usize, take: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(&[seed]);
    for i in 0..take {
        let j = i + rng.random_range(0..n - i);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Directed cross-instance pairings for one step. Round-robin sends each
/// batch position to its successor with one sampled modality per side; the
/// enumerated variant emits every ordered instance pair and modality combo.
fn step_pairings(batch: usize, modalities: usize, enumerate: bool, seed: u64) -> Vec<InterPairing> {
    let mut out = Vec::new();
    if enumerate {
        for src in 0..batch {
            for tgt in 0..batch {
                if src == tgt {
                    continue;
                }
                for sm in 0..modalities {
                    for tm in 0..modalities {
                        out.push(InterPairing { src, src_modality: sm, tgt, tgt_modality: tm });
                    }
                }
            }
        }
    } else {
        let mut rng = rng::stream(&[seed, TAG_PAIR]);
        for src in 0..batch {
            let tgt = (src + 1) % batch;
            out.push(InterPairing {
                src,
                src_modality: rng.random_range(0..modalities),
                tgt,
                tgt_modality: rng.random_range(0..modalities),
            });
        }
    }
    out
}

/// Runs the full loop over an in-memory cohort. When `config.out` is set,
/// checkpoints and the loss CSV are written there as the run progresses.
pub fn train(cohort: &[InstanceData], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if cohort.is_empty() {
        return Err(Error::Data("empty cohort".into()));
    }
    if config.batch_instances > cohort.len() {
        return Err(Error::Config(format!(
            "batch_instances {} exceeds cohort size {}",
            config.batch_instances,
            cohort.len()
        )));
    }
    let modalities = cohort[0].volumes.len();
    if modalities == 0 {
        return Err(Error::Data("cohort instances carry no modalities".into()));
    }
    for inst in cohort {
        if inst.volumes.len() != modalities {
            return Err(Error::Data(format!("instance {} modality count differs", inst.id)));
        }
        for v in &inst.volumes {
            if v.shape != config.volume_shape {
                return Err(Error::Data(format!(
                    "instance {} volume shape {:?} does not match config {:?}",
                    inst.id, v.shape, config.volume_shape
                )));
            }
        }
    }

    let grid = PatchGrid::new(config.volume_shape, config.patch)?;
    let mut model = Model::init(grid, config.feature_dim, config.depth, config.mixing, config.seed)?;
    let mut state = OptimizerState::new(&model);

    // Token matrices are fixed inputs; build them once.
    let tokens: Vec<Vec<Mat>> = cohort
        .iter()
        .map(|inst| {
            inst.volumes
                .iter()
                .map(|v| model::patchify(v, &grid))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut history: Vec<StepRecord> = Vec::with_capacity(config.iterations);
    let mut aborted = None;

    for step in 0..config.iterations {
        // A non-finite loss or gradient anywhere in the step leaves the
        // model at its last finite parameters; other errors are caller bugs.
        match run_step(&mut model, &mut state, &tokens, cohort, config, step) {
            Ok(record) => history.push(record),
            Err(Error::NonFinite(what)) => {
                aborted = Some(format!("aborted at step {step}: non-finite {what}"));
                break;
            }
            Err(e) => return Err(e),
        }

        if let Some(dir) = &config.out {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("ckpt_{:06}.ckpt", step + 1));
                model::save_checkpoint(&path, &model)?;
            }
        }
    }

    if let Some(dir) = &config.out {
        model::save_checkpoint(&dir.join("model_final.ckpt"), &model)?;
        let csv_path = dir.join("loss.csv");
        let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        f.write_all(render_loss_csv(&history).as_bytes())
            .map_err(|e| Error::io(&csv_path, e))?;
    }

    Ok(TrainOutcome { model, history, aborted })
}

fn run_step(
    model: &mut Model,
    state: &mut OptimizerState,
    tokens: &[Vec<Mat>],
    cohort: &[InstanceData],
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let modalities = cohort[0].volumes.len();
    let lr_t = lr_schedule(step, config.iterations, config.learning_rate, config.warmup_fraction);
    let picks = sample_batch(
        cohort.len(),
        config.batch_instances,
        rng::mix(&[config.seed, TAG_BATCH, step as u64]),
    );
    let step_seed = rng::mix(&[config.seed, TAG_STEP, step as u64]);

    let mut tape = Tape::new();
    let staged = model.stage(&mut tape, true)?;

    let mut uni_terms = Vec::new();
    let mut batch_feats = Vec::with_capacity(picks.len());
    for &h in &picks {
        let mut feats = Vec::with_capacity(modalities);
        for m in 0..modalities {
            let mat = &tokens[h][m];
            let x = tape.leaf(mat.data.clone(), [mat.rows, mat.cols], false)?;
            let z = staged.encode(&mut tape, x)?;
            let y = staged.decode(&mut tape, z)?;
            uni_terms.push(losses::reconstruction_loss(&mut tape, y, x)?);
            feats.push(z);
        }
        batch_feats.push(InstanceFeatures { instance: cohort[h].id, tokens: feats });
    }
    let l_uni = mean_scalars(&mut tape, &uni_terms);

    let (l_intra, _) = if config.use_intra {
        losses::intra_loss(&mut tape, &batch_feats, config.omega, config.delta, step_seed)?
    } else {
        (tape.scalar(0.0), Default::default())
    };
    let (l_inter, _) = if config.use_inter {
        let pairings = step_pairings(picks.len(), modalities, config.enumerate_pairs, step_seed);
        losses::inter_loss(&mut tape, &batch_feats, &pairings, config.omega, config.delta, step_seed)?
    } else {
        (tape.scalar(0.0), Default::default())
    };
    let l_total = losses::total_loss(&mut tape, l_uni, l_intra, l_inter)?;

    let record = StepRecord {
        step: step as u64,
        l_uni: tape.value_scalar(l_uni),
        l_intra: tape.value_scalar(l_intra),
        l_inter: tape.value_scalar(l_inter),
        l_total: tape.value_scalar(l_total),
        lr: lr_t,
    };
    if !record.l_total.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", record.l_total)));
    }

    tape.backward(l_total)?;
    let grads: Vec<Vec<f64>> = staged
        .param_refs()
        .iter()
        .map(|&r| {
            tape.grad(r)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Backward("parameter missing its gradient".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    adamw_step(
        &mut model.blocks_mut(),
        &grads,
        state,
        lr_t,
        config.weight_decay,
        ADAM_BETAS,
        ADAM_EPS,
    )?;
    model.step = step as u64 + 1;
    Ok(record)
}

fn mean_scalars(tape: &mut Tape, terms: &[crate::autodiff::TensorRef]) -> crate::autodiff::TensorRef {
    match terms {
        [] => tape.scalar(0.0),
        [one] => *one,
        [first, rest @ ..] => {
            let mut acc = *first;
            for t in rest {
                acc = tape.add(acc, *t).expect("scalar terms");
            }
            tape.scale(acc, 1.0 / terms.len() as f64)
        }
    }
}
