//! Token-wise MLP autoencoder over non-overlapping 3D patches.
//!
//! A volume becomes a `[K x patch_len]` token matrix (z-major token order,
//! z-major voxels within each patch; the round trip is lossless). A shared
//! MLP encodes every token to `feature_dim`; an optional mixing step appends
//! the token-mean feature before the final encoder layer so tokens can see
//! volume-level context. The decoder mirrors back to patch voxels. One
//! parameter set serves all modalities.

use crate::autodiff::{Mat, Tape, TensorRef};
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::Volume;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

const TAG_INIT: u64 = 21;
const CHECKPOINT_MAGIC: &[u8; 8] = b"TACOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Partition of a volume into non-overlapping patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub volume_shape: [usize; 3],
    pub patch: [usize; 3],
}

impl PatchGrid {
    /// Patch dims must tile the volume exactly.
    pub fn new(volume_shape: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || volume_shape[a] == 0 || volume_shape[a] % patch[a] != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "patch {patch:?} does not tile volume {volume_shape:?}"
                )));
            }
        }
        Ok(PatchGrid { volume_shape, patch })
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        [
            self.volume_shape[0] / self.patch[0],
            self.volume_shape[1] / self.patch[1],
            self.volume_shape[2] / self.patch[2],
        ]
    }

    pub fn token_count(&self) -> usize {
        let g = self.grid_shape();
        g[0] * g[1] * g[2]
    }

    pub fn patch_len(&self) -> usize {
        self.patch[0] * self.patch[1] * self.patch[2]
    }
}

/// Volume to `[K x patch_len]` tokens. Token t covers patch-grid coordinate
/// (tz, ty, tx) in z-major order; element e is voxel (dz, dy, dx) of that
/// patch, also z-major.
pub fn patchify(vol: &Volume, grid: &PatchGrid) -> Result<Mat> {
    if vol.shape != grid.volume_shape {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs grid {:?}",
            vol.shape, grid.volume_shape
        )));
    }
    let [_, ny, nx] = vol.shape;
    let [pz, py, px] = grid.patch;
    let [gz, gy, gx] = grid.grid_shape();
    let mut data = Vec::with_capacity(grid.token_count() * grid.patch_len());
    for tz in 0..gz {
        for ty in 0..gy {
            for tx in 0..gx {
                for dz in 0..pz {
                    for dy in 0..py {
                        for dx in 0..px {
                            let z = tz * pz + dz;
                            let y = ty * py + dy;
                            let x = tx * px + dx;
                            data.push(vol.data[(z * ny + y) * nx + x]);
                        }
                    }
                }
            }
        }
    }
    Ok(Mat::new(grid.token_count(), grid.patch_len(), data))
}

/// Exact inverse of [`patchify`].
pub fn depatchify(tokens: &Mat, grid: &PatchGrid) -> Result<Volume> {
    if tokens.rows != grid.token_count() || tokens.cols != grid.patch_len() {
        return Err(Error::ShapeMismatch(format!(
            "tokens [{}x{}] vs grid K={} P={}",
            tokens.rows,
            tokens.cols,
            grid.token_count(),
            grid.patch_len()
        )));
    }
    let [_, ny, nx] = grid.volume_shape;
    let [pz, py, px] = grid.patch;
    let [gz, gy, gx] = grid.grid_shape();
    let mut vol = Volume::zeros(grid.volume_shape);
    let mut src = tokens.data.iter();
    for tz in 0..gz {
        for ty in 0..gy {
            for tx in 0..gx {
                for dz in 0..pz {
                    for dy in 0..py {
                        for dx in 0..px {
                            let z = tz * pz + dz;
                            let y = ty * py + dy;
                            let x = tx * px + dx;
                            vol.data[(z * ny + y) * nx + x] = *src.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    Ok(vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub patch_len: usize,
    pub feature_dim: usize,
    pub depth: usize,
    pub mixing: bool,
}

/// One affine block; weights are `[in_dim x out_dim]`, bias `[1 x out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Layer {
            in_dim,
            out_dim,
            w: (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
            b: (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }
}

/// The full autoencoder plus the grid it tokenizes, its init seed, and the
/// number of optimizer steps applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub grid: PatchGrid,
    pub config: EncoderConfig,
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    pub seed: u64,
    pub step: u64,
}

impl Model {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` init, one stream per
    /// layer so layer counts don't shift each other's draws.
    pub fn init(grid: PatchGrid, feature_dim: usize, depth: usize, mixing: bool, seed: u64) -> Result<Self> {
        if feature_dim == 0 || depth == 0 {
            return Err(Error::Config("feature_dim and depth must be positive".into()));
        }
        if mixing && depth < 2 {
            return Err(Error::Config("mixing needs at least two encoder layers".into()));
        }
        let p = grid.patch_len();
        let f = feature_dim;
        let config = EncoderConfig {
            patch_len: p,
            feature_dim: f,
            depth,
            mixing,
        };
        let mut layer_idx = 0u64;
        let mut next = |in_dim: usize, out_dim: usize| {
            let mut r = rng::stream(&[seed, TAG_INIT, layer_idx]);
            layer_idx += 1;
            Layer::init(in_dim, out_dim, &mut r)
        };
        let mut encoder = Vec::with_capacity(depth);
        for l in 0..depth {
            let in_dim = match l {
                0 => p,
                _ if l == depth - 1 && mixing => 2 * f,
                _ => f,
            };
            let out_dim = f;
            encoder.push(next(in_dim, out_dim));
        }
        let mut decoder = Vec::with_capacity(depth);
        for l in 0..depth {
            let out_dim = if l == depth - 1 { p } else { f };
            decoder.push(next(f, out_dim));
        }
        Ok(Model {
            grid,
            config,
            encoder,
            decoder,
            seed,
            step: 0,
        })
    }

    /// Parameter blocks in canonical order: encoder then decoder, each layer
    /// contributing weights then bias.
    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.decoder) {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Puts all parameters on a tape, as gradient leaves when `trainable`.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Result<StagedModel> {
        let mut stage_layers = |layers: &[Layer]| -> Result<Vec<(TensorRef, TensorRef)>> {
            layers
                .iter()
                .map(|l| {
                    let w = tape.leaf(l.w.clone(), [l.in_dim, l.out_dim], trainable)?;
                    let b = tape.leaf(l.b.clone(), [1, l.out_dim], trainable)?;
                    Ok((w, b))
                })
                .collect()
        };
        Ok(StagedModel {
            config: self.config,
            encoder: stage_layers(&self.encoder)?,
            decoder: stage_layers(&self.decoder)?,
        })
    }

    /// Forward encode without keeping a graph around.
    pub fn encode_values(&self, tokens: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let x = tape.leaf(tokens.data.clone(), [tokens.rows, tokens.cols], false)?;
        let z = staged.encode(&mut tape, x)?;
        Ok(tape.values_mat(z))
    }

    /// Full round trip back to a volume, for reconstruction inspection.
    pub fn reconstruct(&self, vol: &Volume) -> Result<Volume> {
        let tokens = patchify(vol, &self.grid)?;
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false)?;
        let x = tape.leaf(tokens.data.clone(), [tokens.rows, tokens.cols], false)?;
        let z = staged.encode(&mut tape, x)?;
        let y = staged.decode(&mut tape, z)?;
        depatchify(&tape.values_mat(y), &self.grid)
    }
}

/// A model's parameters as tape tensors, ready to run.
pub struct StagedModel {
    pub config: EncoderConfig,
    pub encoder: Vec<(TensorRef, TensorRef)>,
    pub decoder: Vec<(TensorRef, TensorRef)>,
}

impl StagedModel {
    /// `[K x patch_len]` tokens to `[K x feature_dim]` features. Hidden
    /// layers are tanh; the final layer is linear, with the token-mean
    /// feature appended to its input when mixing is on.
    pub fn encode(&self, tape: &mut Tape, tokens: TensorRef) -> Result<TensorRef> {
        let depth = self.encoder.len();
        let mut h = tokens;
        for (l, &(w, b)) in self.encoder.iter().enumerate() {
            if l == depth - 1 && self.config.mixing {
                h = tape.append_row_mean(h);
            }
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if l < depth - 1 {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Features back to `[K x patch_len]` voxel predictions; linear output.
    pub fn decode(&self, tape: &mut Tape, features: TensorRef) -> Result<TensorRef> {
        let depth = self.decoder.len();
        let mut h = features;
        for (l, &(w, b)) in self.decoder.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if l < depth - 1 {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Leaf refs in the same order as [`Model::blocks`].
    pub fn param_refs(&self) -> Vec<TensorRef> {
        let mut out = Vec::new();
        for &(w, b) in self.encoder.iter().chain(&self.decoder) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

// ---- checkpoint format ---------------------------------------------------
//
// magic "TACOCKPT", u32 version, volume shape + patch (u32 x 6),
// feature_dim, depth (u32 x 2), mixing (u8), seed, step (u64 x 2),
// block count (u32), per-block dims (u32 rows, u32 cols), then all
// parameters as contiguous little-endian f64 in block order.

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut bytes, CHECKPOINT_VERSION);
    for v in model.grid.volume_shape.iter().chain(&model.grid.patch) {
        push_u32(&mut bytes, *v as u32);
    }
    push_u32(&mut bytes, model.config.feature_dim as u32);
    push_u32(&mut bytes, model.config.depth as u32);
    bytes.push(model.config.mixing as u8);
    bytes.extend_from_slice(&model.seed.to_le_bytes());
    bytes.extend_from_slice(&model.step.to_le_bytes());
    let blocks = model.blocks();
    push_u32(&mut bytes, blocks.len() as u32);
    let dims: Vec<(usize, usize)> = model
        .encoder
        .iter()
        .chain(&model.decoder)
        .flat_map(|l| [(l.in_dim, l.out_dim), (1, l.out_dim)])
        .collect();
    for (r, c) in &dims {
        push_u32(&mut bytes, *r as u32);
        push_u32(&mut bytes, *c as u32);
    }
    for block in blocks {
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { bytes: &bytes, at: 0, path };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let volume_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let patch = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let grid = PatchGrid::new(volume_shape, patch)?;
    let feature_dim = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let mixing = r.take(1)?[0] != 0;
    let seed = r.u64()?;
    let step = r.u64()?;
    let n_blocks = r.u32()? as usize;
    if n_blocks != depth * 4 {
        return Err(Error::Checkpoint(format!(
            "{}: {n_blocks} blocks for depth {depth}",
            path.display()
        )));
    }
    let mut dims = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        dims.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut template = Model::init(grid, feature_dim, depth, mixing, seed)?;
    {
        let expect: Vec<(usize, usize)> = template
            .encoder
            .iter()
            .chain(&template.decoder)
            .flat_map(|l| [(l.in_dim, l.out_dim), (1, l.out_dim)])
            .collect();
        if dims != expect {
            return Err(Error::Checkpoint(format!(
                "{}: block dims {dims:?} do not match config",
                path.display()
            )));
        }
        for block in template.blocks_mut() {
            for v in block.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.at
        )));
    }
    template.step = step;
    Ok(template)
}

fn push_u32(bytes: &mut Vec<u8>, v: u32) {
    bytes.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated", self.path.display())));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
