//! Synthetic multi-modal cohorts with known region structure.
//!
//! One template defines six compact regions (a lobe with a nested core
//! plus two touching satellite pairs) whose adjacency never changes. Each
//! instance gets a private smooth warp of that template; each modality
//! renders the same warped labels through its own monotone
//! region-to-intensity transfer plus seeded noise. The transfers share
//! only the region ordering and land in disjoint intensity bands, so raw
//! values never match across modalities and the anatomy is the sole
//! cross-modal constant. Because every modality of an instance shares one
//! label field, token correspondence across modalities is the identity.
//!
//! Voxel order is z-major everywhere: index = (z * ny + y) * nx + x.

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::PatchGrid;
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const TAG_WARP: u64 = 11;
const TAG_TRANSFER: u64 = 12;
const TAG_NOISE: u64 = 13;
const TAG_RIGID: u64 = 14;

/// Dense scalar field, values in `[0, 1]`, stored at f32 precision so that
/// in-memory cohorts and disk round trips are bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Region id per voxel, same raster order as [`Volume`]. Label 0 is
/// background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub shape: [usize; 3],
    pub data: Vec<u16>,
}

/// Sidecar metadata stored next to each volume file.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub voxel_order: String,
    pub modality: usize,
    pub instance: u64,
    pub seed: u64,
}

/// Six-region phantom: compact ellipsoids in fixed relative placement.
/// Two mirrored lobes each nest a core, and two satellite blobs sit apart
/// from them. A voxel takes the last ellipsoid that contains it, so cores
/// override their enclosing lobes. Compactness plus 2+ voxel clearances
/// at 32^3 keep the adjacency table an invariant of the cohort under the
/// configured warps.
#[derive(Debug, Clone)]
pub struct AnatomyTemplate {
    pub center: [f64; 3],
    /// (offset from cube center, semi-axes) per region, unit-cube units.
    /// Region k is `bodies[k - 1]`; later entries are nested deeper.
    pub bodies: Vec<([f64; 3], [f64; 3])>,
    /// Canonical unordered adjacency pairs over labels 0..=regions.
    pub adjacency: Vec<(u16, u16)>,
}

impl AnatomyTemplate {
    /// The default desk-scale phantom: a lobe with a nested core plus two
    /// touching satellite pairs. Every structure stays compact (a few
    /// tokens across at 32^3) so region identity dominates each token's
    /// appearance; gaps between groups, the lobe-around-core margin, and
    /// the pair contact depths all stay near or above 2 voxels at 32^3.
    pub fn six_region() -> Self {
        let bodies = vec![
            ([-0.205, -0.065, -0.02], [0.205, 0.200, 0.195]), // 1 lobe
            ([-0.205, -0.065, -0.02], [0.135, 0.130, 0.125]), // 2 core, inside 1
            ([0.06, 0.26, 0.13], [0.135, 0.130, 0.125]),      // 3 anterior pair, outer
            ([0.27, 0.26, 0.13], [0.130, 0.126, 0.122]),      // 4 anterior pair, inner
            ([0.17, -0.255, -0.24], [0.128, 0.133, 0.124]),   // 5 inferior pair, outer
            ([0.17, -0.045, -0.24], [0.124, 0.129, 0.121]),   // 6 inferior pair, inner
        ];
        AnatomyTemplate {
            center: [0.5, 0.5, 0.5],
            bodies,
            adjacency: vec![(0, 1), (0, 3), (0, 4), (0, 5), (0, 6), (1, 2), (3, 4), (5, 6)],
        }
    }

    /// Number of foreground regions.
    pub fn regions(&self) -> u16 {
        self.bodies.len() as u16
    }

    /// Label at template coordinate `w` (x, y, z order, cube units).
    fn label_at(&self, w: [f64; 3]) -> u16 {
        let mut label = 0u16;
        for (k, (off, semi)) in self.bodies.iter().enumerate() {
            let mut q = 0.0;
            for a in 0..3 {
                let d = (w[a] - self.center[a] - off[a]) / semi[a];
                q += d * d;
            }
            if q <= 1.0 {
                label = k as u16 + 1;
            }
        }
        label
    }
}

/// Smooth per-instance deformation: a small affine about the cube center
/// plus one low-frequency sine per axis.
#[derive(Debug, Clone)]
struct Warp {
    affine: [[f64; 3]; 3],
    translation: [f64; 3],
    sine_amp: [f64; 3],
    sine_freq: [f64; 3],
    sine_phase: [f64; 3],
}

impl Warp {
    fn sample(seed: u64, instance: u64) -> Self {
        let mut rng = rng::stream(&[seed, TAG_WARP, instance]);
        let mut affine = [[0.0; 3]; 3];
        for (i, row) in affine.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let base = if i == j { 1.0 } else { 0.0 };
                *v = base + rng.random_range(-0.025..0.025);
            }
        }
        Warp {
            affine,
            translation: std::array::from_fn(|_| rng.random_range(-0.0125..0.0125)),
            sine_amp: std::array::from_fn(|_| rng.random_range(-0.01..0.01)),
            sine_freq: std::array::from_fn(|_| rng.random_range(1.0..2.0)),
            sine_phase: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    /// Template coordinate looked up for instance coordinate `q`.
    fn apply(&self, q: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let mut w = [0.0; 3];
        for i in 0..3 {
            let mut acc = center[i] + self.translation[i];
            for j in 0..3 {
                acc += self.affine[i][j] * (q[j] - center[j]);
            }
            // displacement along axis i driven by the next axis over
            let drive = q[(i + 1) % 3];
            acc += self.sine_amp[i]
                * (std::f64::consts::TAU * (self.sine_freq[i] * drive) + self.sine_phase[i]).sin();
            w[i] = acc;
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct CohortSpec {
    pub instances: usize,
    pub modalities: usize,
    pub shape: [usize; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            instances: 8,
            modalities: 3,
            shape: [32, 32, 32],
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

/// One subject: a shared label field and one rendered volume per modality.
#[derive(Debug, Clone)]
pub struct InstanceData {
    pub id: u64,
    pub labels: LabelVolume,
    pub volumes: Vec<Volume>,
}

/// Per-modality region-to-intensity levels: one monotone transfer per
/// modality. All modalities render regions in the same order (level
/// increases with region index), but each modality maps them into its own
/// disjoint intensity band with private jitter, so intensity histograms
/// never overlap across the three default modalities and no raw-intensity
/// rule can relate them beyond the shared ordering. Background is always 0.
pub fn intensity_levels(seed: u64, modality: usize, regions: u16) -> Vec<f64> {
    let mut rng = rng::stream(&[seed, TAG_TRANSFER, modality as u64]);
    let band = 0.25;
    let base = 0.2 + band * (modality % 3) as f64;
    let mut levels = vec![0.0];
    levels.extend((0..regions).map(|r| {
        let u: f64 = rng.random_range(0.3..0.7);
        base + band * (r as f64 + u) / regions as f64
    }));
    levels
}

/// Generates a full cohort. Every instance's warped labels must reproduce
/// the template adjacency; a violation aborts generation.
pub fn generate_cohort(template: &AnatomyTemplate, spec: &CohortSpec) -> Result<Vec<InstanceData>> {
    if spec.instances == 0 || spec.modalities == 0 {
        return Err(Error::Config("cohort needs at least one instance and one modality".into()));
    }
    let levels: Vec<Vec<f64>> = (0..spec.modalities)
        .map(|m| intensity_levels(spec.seed, m, template.regions()))
        .collect();
    let mut out = Vec::with_capacity(spec.instances);
    for id in 0..spec.instances as u64 {
        let labels = rasterize_labels(template, spec, id)?;
        let mut volumes = Vec::with_capacity(spec.modalities);
        for (m, lv) in levels.iter().enumerate() {
            let mut noise = rng::stream(&[spec.seed, TAG_NOISE, id, m as u64]);
            let data: Vec<f64> = labels
                .data
                .iter()
                .map(|&r| {
                    let n: f64 = noise.sample(StandardNormal);
                    let v = (lv[r as usize] + spec.noise_sigma * n).clamp(0.0, 1.0);
                    (v as f32) as f64
                })
                .collect();
            volumes.push(Volume { shape: spec.shape, data });
        }
        out.push(InstanceData { id, labels, volumes });
    }
    Ok(out)
}

fn rasterize_labels(template: &AnatomyTemplate, spec: &CohortSpec, id: u64) -> Result<LabelVolume> {
    let warp = Warp::sample(spec.seed, id);
    let [nz, ny, nx] = spec.shape;
    let mut data = Vec::with_capacity(nz * ny * nx);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [
                    (x as f64 + 0.5) / nx as f64,
                    (y as f64 + 0.5) / ny as f64,
                    (z as f64 + 0.5) / nz as f64,
                ];
                data.push(template.label_at(warp.apply(q, template.center)));
            }
        }
    }
    let labels = LabelVolume { shape: spec.shape, data };
    let found = adjacency_table(&labels);
    let mut expect = template.adjacency.clone();
    expect.sort_unstable();
    if found != expect {
        return Err(Error::Data(format!(
            "instance {id}: warped adjacency {found:?} differs from template {expect:?}"
        )));
    }
    Ok(labels)
}

/// Unordered label adjacency under 6-connectivity.
pub fn adjacency_table(labels: &LabelVolume) -> Vec<(u16, u16)> {
    let [nz, ny, nx] = labels.shape;
    let mut pairs = std::collections::BTreeSet::new();
    let at = |z: usize, y: usize, x: usize| labels.data[(z * ny + y) * nx + x];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = at(z, y, x);
                if x + 1 < nx {
                    let b = at(z, y, x + 1);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if y + 1 < ny {
                    let b = at(z, y + 1, x);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                if z + 1 < nz {
                    let b = at(z + 1, y, x);
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Majority region label per token, ties to the lowest label.
pub fn token_region_labels(labels: &LabelVolume, grid: &PatchGrid) -> Result<Vec<u16>> {
    if labels.shape != grid.volume_shape {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs grid {:?}",
            labels.shape, grid.volume_shape
        )));
    }
    let [_, ny, nx] = labels.shape;
    let [pz, py, px] = grid.patch;
    let [gz, gy, gx] = grid.grid_shape();
    let mut out = Vec::with_capacity(grid.token_count());
    for tz in 0..gz {
        for ty in 0..gy {
            for tx in 0..gx {
                let mut counts = std::collections::BTreeMap::new();
                for dz in 0..pz {
                    for dy in 0..py {
                        for dx in 0..px {
                            let z = tz * pz + dz;
                            let y = ty * py + dy;
                            let x = tx * px + dx;
                            *counts.entry(labels.data[(z * ny + y) * nx + x]).or_insert(0usize) += 1;
                        }
                    }
                }
                // BTreeMap iterates ascending, so the first max is the lowest label
                let best = counts.values().max().copied().unwrap();
                let label = counts.iter().find(|&(_, &c)| c == best).map(|(&l, _)| l).unwrap();
                out.push(label);
            }
        }
    }
    Ok(out)
}

/// Rigid perturbation severity. Bounds are (voxels, degrees) per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbLevel {
    Clean,
    Mild,
    Moderate,
    Strong,
}

impl PerturbLevel {
    pub const ALL: [PerturbLevel; 4] = [
        PerturbLevel::Clean,
        PerturbLevel::Mild,
        PerturbLevel::Moderate,
        PerturbLevel::Strong,
    ];

    pub fn bounds(self) -> (f64, f64) {
        match self {
            PerturbLevel::Clean => (0.0, 0.0),
            PerturbLevel::Mild => (2.0, 2.0),
            PerturbLevel::Moderate => (4.0, 5.0),
            PerturbLevel::Strong => (8.0, 10.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbLevel::Clean => "clean",
            PerturbLevel::Mild => "mild",
            PerturbLevel::Moderate => "moderate",
            PerturbLevel::Strong => "strong",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(PerturbLevel::Clean),
            "mild" => Ok(PerturbLevel::Mild),
            "moderate" => Ok(PerturbLevel::Moderate),
            "strong" => Ok(PerturbLevel::Strong),
            other => Err(Error::Config(format!(
                "unknown perturbation level '{other}' (clean|mild|moderate|strong)"
            ))),
        }
    }
}

/// Rigid motion in voxel units about the volume center; rotation is
/// intrinsic x-y-z Euler, radians.
#[derive(Debug, Clone, Copy)]
pub struct RigidPerturbation {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl RigidPerturbation {
    pub fn identity() -> Self {
        RigidPerturbation {
            translation: [0.0; 3],
            rotation: [0.0; 3],
        }
    }
}

/// Uniform draw within the level's bounds, per component.
pub fn sample_rigid(level: PerturbLevel, seed: u64) -> RigidPerturbation {
    if level == PerturbLevel::Clean {
        return RigidPerturbation::identity();
    }
    let (t_max, r_deg) = level.bounds();
    let r_max = r_deg.to_radians();
    let mut rng = rng::stream(&[seed, TAG_RIGID, level as u64]);
    RigidPerturbation {
        translation: std::array::from_fn(|_| rng.random_range(-t_max..t_max)),
        rotation: std::array::from_fn(|_| rng.random_range(-r_max..r_max)),
    }
}

/// Resamples a volume under the rigid motion with trilinear interpolation,
/// zero-filling samples that fall outside. The identity motion reproduces
/// the input bit-exactly.
pub fn apply_rigid(vol: &Volume, p: &RigidPerturbation) -> Volume {
    let [nz, ny, nx] = vol.shape;
    let c = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let (sx, cx) = p.rotation[0].sin_cos();
    let (sy, cy) = p.rotation[1].sin_cos();
    let (sz, cz) = p.rotation[2].sin_cos();
    // R = Rz(cz) Ry(cy) Rx(cx); we sample with the inverse (transpose)
    let r = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ];
    let mut out = Volume::zeros(vol.shape);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                // output coord relative to center, translation removed
                let o = [
                    x as f64 - c[0] - p.translation[0],
                    y as f64 - c[1] - p.translation[1],
                    z as f64 - c[2] - p.translation[2],
                ];
                // inverse rotation: R^T o
                let src = [
                    r[0][0] * o[0] + r[1][0] * o[1] + r[2][0] * o[2] + c[0],
                    r[0][1] * o[0] + r[1][1] * o[1] + r[2][1] * o[2] + c[1],
                    r[0][2] * o[0] + r[1][2] * o[1] + r[2][2] * o[2] + c[2],
                ];
                out.data[(z * ny + y) * nx + x] = trilinear(vol, src);
            }
        }
    }
    out
}

fn trilinear(vol: &Volume, src: [f64; 3]) -> f64 {
    let [nz, ny, nx] = vol.shape;
    let x0 = src[0].floor();
    let y0 = src[1].floor();
    let z0 = src[2].floor();
    let (fx, fy, fz) = (src[0] - x0, src[1] - y0, src[2] - z0);
    let mut acc = 0.0;
    for (dz, wz) in [(0i64, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                let (xi, yi, zi) = (x0 as i64 + dx, y0 as i64 + dy, z0 as i64 + dz);
                if xi < 0 || yi < 0 || zi < 0 || xi >= nx as i64 || yi >= ny as i64 || zi >= nz as i64 {
                    continue; // zero fill
                }
                acc += w * vol.data[((zi as usize) * ny + yi as usize) * nx + xi as usize];
            }
        }
    }
    acc
}

// ---- file formats -------------------------------------------------------
//
// volume: raw little-endian f32, z-major, plus "<name>.meta" text sidecar
// labels: raw little-endian u16, same raster, same sidecar scheme
// cohort: one directory per instance under a root with a cohort.meta

pub fn write_volume(path: &Path, vol: &Volume, meta: &VolumeMeta) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)?;
    let sidecar = format!(
        "shape = {} {} {}\nvoxel_order = z-major\nmodality = {}\ninstance = {}\nseed = {}\n",
        meta.shape[0], meta.shape[1], meta.shape[2], meta.modality, meta.instance, meta.seed
    );
    write_file(&meta_path(path), sidecar.as_bytes())
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeMeta)> {
    let meta = read_meta(&meta_path(path))?;
    let bytes = read_file(path)?;
    let n = meta.shape[0] * meta.shape[1] * meta.shape[2];
    if bytes.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes for shape {:?}",
            path.display(),
            bytes.len(),
            meta.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((
        Volume {
            shape: meta.shape,
            data,
        },
        meta,
    ))
}

pub fn write_labels(path: &Path, labels: &LabelVolume, instance: u64, seed: u64) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.data.len() * 2);
    for &v in &labels.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)?;
    let sidecar = format!(
        "shape = {} {} {}\nvoxel_order = z-major\nmodality = labels\ninstance = {}\nseed = {}\n",
        labels.shape[0], labels.shape[1], labels.shape[2], instance, seed
    );
    write_file(&meta_path(path), sidecar.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let meta_text = read_text(&meta_path(path))?;
    let shape = parse_shape(&meta_text, path)?;
    let bytes = read_file(path)?;
    let n = shape[0] * shape[1] * shape[2];
    if bytes.len() != n * 2 {
        return Err(Error::Data(format!(
            "{}: {} bytes for shape {shape:?}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok(LabelVolume { shape, data })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta");
    PathBuf::from(os)
}

fn read_meta(path: &Path) -> Result<VolumeMeta> {
    let text = read_text(path)?;
    let mut meta = VolumeMeta {
        shape: [0; 3],
        voxel_order: String::new(),
        modality: 0,
        instance: 0,
        seed: 0,
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "shape" => meta.shape = parse_shape_value(value, path)?,
            "voxel_order" => meta.voxel_order = value.to_string(),
            "modality" if value != "labels" => {
                meta.modality = value.parse().map_err(|_| bad_meta(path, line))?
            }
            "instance" => meta.instance = value.parse().map_err(|_| bad_meta(path, line))?,
            "seed" => meta.seed = value.parse().map_err(|_| bad_meta(path, line))?,
            _ => {}
        }
    }
    if meta.shape.contains(&0) {
        return Err(Error::Data(format!("{}: missing shape", path.display())));
    }
    Ok(meta)
}

fn parse_shape(text: &str, path: &Path) -> Result<[usize; 3]> {
    for line in text.lines() {
        if let Some((key, value)) = line.split_once('=') {
            if key.trim() == "shape" {
                return parse_shape_value(value.trim(), path);
            }
        }
    }
    Err(Error::Data(format!("{}: missing shape", path.display())))
}

fn parse_shape_value(value: &str, path: &Path) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| bad_meta(path, value)))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(bad_meta(path, value));
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn bad_meta(path: &Path, line: &str) -> Error {
    Error::Data(format!("{}: unparseable metadata '{line}'", path.display()))
}

pub fn save_cohort(dir: &Path, cohort: &[InstanceData], spec: &CohortSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head = format!(
        "instances = {}\nmodalities = {}\nshape = {} {} {}\nnoise_sigma = {}\nseed = {}\n",
        cohort.len(),
        spec.modalities,
        spec.shape[0],
        spec.shape[1],
        spec.shape[2],
        spec.noise_sigma,
        spec.seed
    );
    write_file(&dir.join("cohort.meta"), head.as_bytes())?;
    for inst in cohort {
        let idir = dir.join(format!("inst_{:03}", inst.id));
        std::fs::create_dir_all(&idir).map_err(|e| Error::io(&idir, e))?;
        write_labels(&idir.join("labels.u16"), &inst.labels, inst.id, spec.seed)?;
        for (m, vol) in inst.volumes.iter().enumerate() {
            let meta = VolumeMeta {
                shape: vol.shape,
                voxel_order: "z-major".into(),
                modality: m,
                instance: inst.id,
                seed: spec.seed,
            };
            write_volume(&idir.join(format!("m{m}.f32")), vol, &meta)?;
        }
    }
    Ok(())
}

pub fn load_cohort(dir: &Path) -> Result<(Vec<InstanceData>, CohortSpec)> {
    let head = read_text(&dir.join("cohort.meta"))?;
    let mut spec = CohortSpec {
        instances: 0,
        modalities: 0,
        shape: [0; 3],
        noise_sigma: 0.0,
        seed: 0,
    };
    for line in head.lines() {
        let Some((key, value)) = line.split_once('=') else { continue };
        let (key, value) = (key.trim(), value.trim());
        let path = dir.join("cohort.meta");
        match key {
            "instances" => spec.instances = value.parse().map_err(|_| bad_meta(&path, line))?,
            "modalities" => spec.modalities = value.parse().map_err(|_| bad_meta(&path, line))?,
            "shape" => spec.shape = parse_shape_value(value, &path)?,
            "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad_meta(&path, line))?,
            "seed" => spec.seed = value.parse().map_err(|_| bad_meta(&path, line))?,
            _ => {}
        }
    }
    if spec.instances == 0 || spec.modalities == 0 {
        return Err(Error::Data(format!("{}: incomplete cohort.meta", dir.display())));
    }
    let mut cohort = Vec::with_capacity(spec.instances);
    for id in 0..spec.instances as u64 {
        let idir = dir.join(format!("inst_{id:03}"));
        let labels = read_labels(&idir.join("labels.u16"))?;
        let volumes = (0..spec.modalities)
            .map(|m| read_volume(&idir.join(format!("m{m}.f32"))).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        cohort.push(InstanceData { id, labels, volumes });
    }
    Ok((cohort, spec))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::Data(format!("{}: not utf-8", path.display())))
}

/// Tokens of one volume as a `[K x patch_len]` matrix via the grid.
pub fn tokens_of(vol: &Volume, grid: &PatchGrid) -> Result<Mat> {
    crate::model::patchify(vol, grid)
}
