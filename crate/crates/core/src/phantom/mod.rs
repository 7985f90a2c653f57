//! Synthetic abdominal-style phantoms: a small perturbed ellipsoid target in
//! a textured background with bright distractor blobs and Gaussian noise.
//!
//! Intensities are generated on a HU-like scale and windowed into `[0, 1]`
//! exactly as real scans would be. Every case is a pure function of the spec
//! and its case seed.

pub mod vol3;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::boxes::bbox_from_mask;
use crate::cascade::CaseRecord;
use crate::config::{format_list, parse_list, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::volgrid::{clip_rescale, Dims, LabelMap, Volume};

/// Rejection-sampling budget for one target shape.
const MAX_SHAPE_ATTEMPTS: usize = 500;
const MAX_DISTRACTOR_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f32; 3],
    /// Accepted range of target voxels / total voxels.
    pub target_fraction: [f64; 2],
    /// Per-axis ellipsoid radius range, voxels.
    pub radius: [f64; 2],
    /// Target centre range as a fraction of each axis.
    pub center_region: [f64; 2],
    /// Relative amplitude of the low-frequency boundary perturbation.
    pub perturbation: f64,
    pub distractor_count: usize,
    pub distractor_radius: [f64; 2],
    pub distractor_hu: f64,
    pub background_hu: f64,
    /// Amplitude of the smooth background texture.
    pub texture_hu: f64,
    pub target_hu: f64,
    pub noise_sigma: f64,
    /// Intensity window mapped onto `[0, 1]`.
    pub window: [f64; 2],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: Dims::cube(64),
            spacing: [1.0; 3],
            target_fraction: [0.005, 0.02],
            radius: [6.0, 13.0],
            center_region: [0.3, 0.7],
            perturbation: 0.15,
            distractor_count: 3,
            distractor_radius: [3.0, 6.0],
            distractor_hu: 200.0,
            background_hu: 20.0,
            texture_hu: 15.0,
            target_hu: 110.0,
            noise_sigma: 12.0,
            window: [-100.0, 240.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !self.dims.is_positive() {
            return bad("dims must be positive");
        }
        if !ordered(self.target_fraction) || self.target_fraction[0] < 0.0 || self.target_fraction[1] > 1.0 {
            return bad("target_fraction must be an ordered range in [0, 1]");
        }
        if !ordered(self.radius) || self.radius[0] < 2.0 {
            return bad("radius must be an ordered range with minimum >= 2");
        }
        if !ordered(self.center_region) || self.center_region[0] < 0.0 || self.center_region[1] > 1.0 {
            return bad("center_region must be an ordered range in [0, 1]");
        }
        if !ordered(self.distractor_radius) || self.distractor_radius[0] < 1.0 {
            return bad("distractor_radius must be an ordered range with minimum >= 1");
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return bad("perturbation must be in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !(self.texture_hu >= 0.0) {
            return bad("noise_sigma and texture_hu must be non-negative");
        }
        if !(self.window[0] < self.window[1]) {
            return bad("window must satisfy lo < hi");
        }
        Ok(())
    }

    /// Apply one `phantom.*` key. Returns `false` for keys outside this
    /// namespace.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("phantom.") else {
            return Ok(false);
        };
        match field {
            "dims" => self.dims = parse_list::<usize, 3>(key, value)?.into(),
            "spacing" => self.spacing = parse_list(key, value)?,
            "target_fraction" => self.target_fraction = parse_list(key, value)?,
            "radius" => self.radius = parse_list(key, value)?,
            "center_region" => self.center_region = parse_list(key, value)?,
            "perturbation" => self.perturbation = parse_value(key, value)?,
            "distractor_count" => self.distractor_count = parse_value(key, value)?,
            "distractor_radius" => self.distractor_radius = parse_list(key, value)?,
            "distractor_hu" => self.distractor_hu = parse_value(key, value)?,
            "background_hu" => self.background_hu = parse_value(key, value)?,
            "texture_hu" => self.texture_hu = parse_value(key, value)?,
            "target_hu" => self.target_hu = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "window" => self.window = parse_list(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(true)
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("phantom.dims", format_list(&self.dims.to_array()));
        kv.set("phantom.spacing", format_list(&self.spacing));
        kv.set("phantom.target_fraction", format_list(&self.target_fraction));
        kv.set("phantom.radius", format_list(&self.radius));
        kv.set("phantom.center_region", format_list(&self.center_region));
        kv.set("phantom.perturbation", self.perturbation);
        kv.set("phantom.distractor_count", self.distractor_count);
        kv.set("phantom.distractor_radius", format_list(&self.distractor_radius));
        kv.set("phantom.distractor_hu", self.distractor_hu);
        kv.set("phantom.background_hu", self.background_hu);
        kv.set("phantom.texture_hu", self.texture_hu);
        kv.set("phantom.target_hu", self.target_hu);
        kv.set("phantom.noise_sigma", self.noise_sigma);
        kv.set("phantom.window", format_list(&self.window));
        kv.set("phantom.seed", self.seed);
        kv
    }

    /// SHA-256 of the canonical config text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_config().to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = dot(v, v).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Rows of the rotation matrix of a uniformly random unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> [Vec3; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|c| c / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Sum of three plane waves, each with a random direction, integer
/// frequency and phase; normalized to `[-1, 1]`.
struct Waves([(Vec3, f64); 3]);

impl Waves {
    fn sample(rng: &mut impl Rng, scale: f64) -> Self {
        Waves([0; 3].map(|_| {
            let f = rng.gen_range(1..=3) as f64;
            let dir = unit_vector(rng).map(|c| c * f * scale);
            (dir, rng.gen_range(0.0..2.0 * PI))
        }))
    }

    fn eval(&self, p: Vec3) -> f64 {
        self.0.iter().map(|(k, phase)| (dot(*k, p) + phase).sin()).sum::<f64>() / 3.0
    }
}

struct Target {
    center: Vec3,
    radii: Vec3,
    rotation: [Vec3; 3],
    boundary: Waves,
    amplitude: f64,
}

impl Target {
    fn contains(&self, p: Vec3) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let local = self.rotation.map(|row| dot(row, d));
        let q = [local[0] / self.radii[0], local[1] / self.radii[1], local[2] / self.radii[2]];
        let r = dot(q, q).sqrt();
        if r < 1e-12 {
            return true;
        }
        r <= 1.0 + self.amplitude * self.boundary.eval(q.map(|c| c / r))
    }

    fn reach(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max) * (1.0 + self.amplitude)
    }

    fn rasterize(&self, dims: Dims) -> LabelMap {
        let mut m = LabelMap::zeros(dims);
        let reach = self.reach().ceil() as isize + 1;
        let span = |axis: usize, len: usize| {
            let c = self.center[axis].round() as isize;
            (c - reach).max(0) as usize..((c + reach + 1).max(0) as usize).min(len)
        };
        for z in span(2, dims.d) {
            for y in span(1, dims.h) {
                for x in span(0, dims.w) {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        m.set(x, y, z, 1);
                    }
                }
            }
        }
        m
    }
}

fn case_rng(spec: &PhantomSpec, case_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(case_seed);
    rng
}

pub fn case_id(case_seed: u64) -> String {
    format!("case{case_seed:03}")
}

/// Draw target shapes until one lands inside the configured volume fraction
/// with at least one background voxel between it and every face.
fn sample_target(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<(Target, LabelMap)> {
    let dims = spec.dims;
    let total = dims.voxel_count() as f64;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let lens = dims.to_array();
        let center = [0, 1, 2].map(|a| rng.gen_range(spec.center_region[0]..=spec.center_region[1]) * (lens[a] - 1) as f64);
        let radii = [0; 3].map(|_| rng.gen_range(spec.radius[0]..=spec.radius[1]));
        let rotation = random_rotation(rng);
        let boundary = Waves::sample(rng, 1.0);
        let t = Target {
            center,
            radii,
            rotation,
            boundary,
            amplitude: spec.perturbation,
        };
        let mask = t.rasterize(dims);
        let frac = mask.count() as f64 / total;
        if frac < spec.target_fraction[0] || frac > spec.target_fraction[1] {
            continue;
        }
        let Some(b) = bbox_from_mask(&mask) else { continue };
        if (0..3).all(|a| b.min[a] >= 1 && b.max[a] + 2 <= lens[a]) {
            return Ok((t, mask));
        }
    }
    Err(Error::Config(format!(
        "phantom: no target within fraction {:?} after {MAX_SHAPE_ATTEMPTS} draws",
        spec.target_fraction
    )))
}

/// Generate one case. The mask is exactly the target's voxels.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<CaseRecord> {
    spec.validate()?;
    let dims = spec.dims;
    let mut rng = case_rng(spec, case_seed);
    let (target, mask) = sample_target(spec, &mut rng)?;

    // distractors keep clear of the target's bounding sphere
    let lens = dims.to_array();
    let mut blobs: Vec<(Vec3, f64)> = Vec::with_capacity(spec.distractor_count);
    for _ in 0..spec.distractor_count {
        for _ in 0..MAX_DISTRACTOR_ATTEMPTS {
            let r = rng.gen_range(spec.distractor_radius[0]..=spec.distractor_radius[1]);
            let c = [0, 1, 2].map(|a| rng.gen_range(0.0..=(lens[a] - 1) as f64));
            let d = [0, 1, 2].map(|a| c[a] - target.center[a]);
            if dot(d, d).sqrt() > target.reach() + r + 2.0 {
                blobs.push((c, r));
                break;
            }
        }
    }

    let texture = Waves::sample(&mut rng, 2.0 * PI / lens.iter().copied().max().unwrap_or(1) as f64);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(format!("phantom: {e}")))?;
    let mut hu = Vec::with_capacity(dims.voxel_count());
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let p = [x as f64, y as f64, z as f64];
                let base = if mask.get(x, y, z) == 1 {
                    spec.target_hu
                } else if blobs.iter().any(|(c, r)| {
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    dot(d, d) <= r * r
                }) {
                    spec.distractor_hu
                } else {
                    spec.background_hu
                };
                let mut v = base + spec.texture_hu * texture.eval(p);
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                hu.push(v as f32);
            }
        }
    }
    let raw = Volume::new(dims, spec.spacing, hu)?;
    let volume = clip_rescale(&raw, spec.window[0], spec.window[1])?;
    Ok(CaseRecord {
        id: case_id(case_seed),
        volume,
        mask,
        fold: 0,
    })
}

/// Cases `0..n`, generated in parallel; output order is by case seed.
pub fn generate_cases(spec: &PhantomSpec, n: usize) -> Result<Vec<CaseRecord>> {
    (0..n as u64).into_par_iter().map(|s| generate_case(spec, s)).collect()
}

/// Balanced fold labels for `n` items: a seeded shuffle, then positions are
/// dealt round-robin, so fold sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec_hash: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "id,volume,mask,fold";

impl DatasetManifest {
    pub fn fold_count(&self) -> usize {
        self.entries.iter().map(|e| e.fold + 1).max().unwrap_or(0)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count()];
        for e in &self.entries {
            sizes[e.fold] += 1;
        }
        sizes
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n# spec_hash={}\n{MANIFEST_HEADER}\n", self.seed, self.spec_hash);
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.id, e.volume.display(), e.mask.display(), e.fold));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("manifest: {m}"));
        let mut seed = None;
        let mut spec_hash = None;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    match k.trim() {
                        "seed" => seed = Some(v.trim().parse().map_err(|_| bad(format!("bad seed {v:?}")))?),
                        "spec_hash" => spec_hash = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line == MANIFEST_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields", no + 1)));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                volume: f[1].into(),
                mask: f[2].into(),
                fold: f[3]
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad fold {:?}", no + 1, f[3])))?,
            });
        }
        Ok(Self {
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            spec_hash: spec_hash.ok_or_else(|| bad("missing spec_hash".into()))?,
            entries,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}

/// Reassign folds with [`fold_assignment`].
pub fn split_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let folds = fold_assignment(manifest.entries.len(), k, seed)?;
    let mut out = manifest.clone();
    for (e, f) in out.entries.iter_mut().zip(folds) {
        e.fold = f;
    }
    Ok(out)
}

/// Generate `n` cases, split them into `k` folds and write volumes, masks,
/// the manifest and the generator config into `dir`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, n: usize, k: usize) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let cases = generate_cases(spec, n)?;
    let entries = cases
        .iter()
        .map(|c| ManifestEntry {
            id: c.id.clone(),
            volume: format!("{}.vol", c.id).into(),
            mask: format!("{}.mask.vol", c.id).into(),
            fold: 0,
        })
        .collect();
    let manifest = split_folds(
        &DatasetManifest {
            seed: spec.seed,
            spec_hash: spec.hash(),
            entries,
        },
        k,
        spec.seed,
    )?;
    cases.par_iter().zip(&manifest.entries).try_for_each(|(c, e)| -> Result<()> {
        vol3::write_volume(&dir.join(&e.volume), &c.volume)?;
        vol3::write_mask(&dir.join(&e.mask), &c.mask, c.volume.spacing())
    })?;
    fs::write(dir.join("phantom.cfg"), spec.to_config().to_text())?;
    manifest.write(dir)?;
    Ok(manifest)
}

/// Load every case listed in the manifest at `dir`.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<CaseRecord>)> {
    let manifest = DatasetManifest::read(dir)?;
    let cases = manifest
        .entries
        .par_iter()
        .map(|e| {
            let volume = vol3::read_volume(&dir.join(&e.volume))?;
            let mask = vol3::read_mask(&dir.join(&e.mask))?;
            CaseRecord::new(e.id.clone(), volume, mask, e.fold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, cases))
}
