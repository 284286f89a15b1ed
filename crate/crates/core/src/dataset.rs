//! Pair generation, on-disk layout and the JSON-lines manifest.
//!
//! Layout per split: `<root>/<split>/<pair_id:08>/{anchor.png, sample.png,
//! anchor_instance.png, aligned_instance.png, mask.png, meta.json}` plus
//! `<root>/<split>/manifest.jsonl`. Every pair draws from its own random
//! stream derived from `(seed, split name, pair_id)`, so the output does not
//! depend on worker count or scheduling.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assembly::{part_diff, sample_state_pair_filtered, AssemblyError, PartCatalog, PartId, StateConstraints};
use crate::geometry::{nqd, perturb_pose, sample_pose, CameraPose, GeometryError, Intrinsics, PoseRange, Quaternion, Vec3};
use crate::image::{self, BinaryMask, ImageError, InstanceMap, RgbImage};
use crate::par::{self, Execution};
use crate::render::{self, augment_pair, AugmentConfig, Background, PairRasters, RenderError, RenderParams};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FILES: [&str; 6] = ["anchor.png", "sample.png", "anchor_instance.png", "aligned_instance.png", "mask.png", "meta.json"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("checksum mismatch for {0}")]
    Checksum(String),
    #[error("pair {0} not in manifest")]
    MissingPair(u64),
    #[error("invalid config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestSeenPose,
    TestNovelPose,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestSeenPose => "test_seen_pose",
            Split::TestNovelPose => "test_novel_pose",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Tiny,
    Small,
}

impl Scale {
    /// `(train pairs, pairs per test split)`.
    pub fn counts(&self) -> (usize, usize) {
        match self {
            Scale::Tiny => (512, 128),
            Scale::Small => (8192, 1024),
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Scale::Tiny),
            "small" => Ok(Scale::Small),
            other => Err(format!("unknown scale {other}")),
        }
    }
}

/// Per-image randomization of lighting and background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub light_elevation_deg: (f64, f64),
    pub ambient: (f64, f64),
    /// Probability of a value-noise background instead of flat gray.
    pub noise_background_prob: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance { light_elevation_deg: (30.0, 80.0), ambient: (0.25, 0.45), noise_background_prob: 0.5 }
    }
}

impl Appearance {
    fn draw<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> RenderParams {
        let el = rng.gen_range(self.light_elevation_deg.0..=self.light_elevation_deg.1).to_radians();
        let az = rng.gen_range(0.0..std::f64::consts::TAU);
        let light_dir = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()).normalized();
        let ambient = rng.gen_range(self.ambient.0..=self.ambient.1);
        let background = if rng.gen::<f64>() < self.noise_background_prob {
            Background::Noise { seed: rng.gen(), tint: [rng.gen_range(90..=230), rng.gen_range(90..=230), rng.gen_range(90..=230)] }
        } else {
            let g = rng.gen_range(70..=200);
            Background::Flat([g, g, g])
        };
        RenderParams { size, light_dir, ambient, background }
    }
}

/// Generation settings for one split.
#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Directory name under the dataset root.
    pub name: String,
    pub split: Split,
    pub count: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub max_nqd: f64,
    pub pose_range: PoseRange,
    pub constraints: StateConstraints,
    /// Camera translation jitter as a fraction of camera distance.
    pub position_frac: f64,
    pub render_size: usize,
    pub fov_deg: f64,
    pub input_size: usize,
    pub margin_frac: f64,
    pub translate: bool,
    pub appearance: Appearance,
    pub seed: u64,
}

impl GenConfig {
    pub fn train(count: usize, seed: u64) -> Self {
        GenConfig {
            name: "train".into(),
            split: Split::Train,
            count,
            d_min: 1,
            d_max: 6,
            max_nqd: 0.1,
            pose_range: PoseRange::training(),
            constraints: StateConstraints::default(),
            position_frac: 0.05,
            render_size: 128,
            fov_deg: 50.0,
            input_size: 64,
            margin_frac: 0.1,
            translate: true,
            appearance: Appearance::default(),
            seed,
        }
    }

    pub fn validate(&self, catalog: &PartCatalog) -> Result<(), DatasetError> {
        if self.count == 0 {
            return Err(DatasetError::Config(format!("{}: pair count must be >= 1", self.name)));
        }
        if self.d_min > self.d_max || self.d_max > catalog.len() {
            return Err(DatasetError::Config(format!(
                "{}: part-diff bounds [{}, {}] invalid",
                self.name, self.d_min, self.d_max
            )));
        }
        if !(0.0..=std::f64::consts::SQRT_2).contains(&self.max_nqd) {
            return Err(DatasetError::Config(format!("{}: max_nqd {} outside [0, sqrt 2]", self.name, self.max_nqd)));
        }
        self.pose_range.validate()?;
        RenderParams::new(self.render_size).validate()?;
        if self.input_size < 16 {
            return Err(DatasetError::Config("input size below 16".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the random stream owned by one pair.
pub fn pair_seed(master: u64, stream: &str, pair_id: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(stream)) ^ splitmix64(pair_id.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn pair_rng(master: u64, stream: &str, pair_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(pair_seed(master, stream, pair_id))
}

fn ser_sig17<S: Serializer, const N: usize>(v: &[f64; N], s: S) -> Result<S::Ok, S::Error> {
    let text = format!("[{}]", v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(","));
    let raw = serde_json::value::RawValue::from_string(text).map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

fn ser_sig17_scalar<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    let raw = serde_json::value::RawValue::from_string(format!("{v:.16e}")).map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

/// Camera pose as persisted: `[w, x, y, z]` and position, 17 significant
/// digits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoredPose {
    #[serde(serialize_with = "ser_sig17")]
    pub quaternion: [f64; 4],
    #[serde(serialize_with = "ser_sig17")]
    pub position: [f64; 3],
}

impl StoredPose {
    pub fn from_pose(p: &CameraPose) -> Self {
        StoredPose { quaternion: p.orientation.to_array(), position: p.position.to_array() }
    }

    pub fn orientation(&self) -> Quaternion {
        Quaternion::from_array(self.quaternion)
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub pair_id: u64,
    pub state_a: u64,
    pub state_b: u64,
    pub pose_a: StoredPose,
    pub pose_b: StoredPose,
    #[serde(serialize_with = "ser_sig17_scalar")]
    pub nqd: f64,
    pub only_in_a: Vec<PartId>,
    pub only_in_b: Vec<PartId>,
}

impl PairMeta {
    pub fn diff_count(&self) -> usize {
        self.only_in_a.len() + self.only_in_b.len()
    }

    pub fn diff(&self) -> crate::assembly::PartDiff {
        crate::assembly::PartDiff {
            only_in_a: self.only_in_a.iter().copied().collect(),
            only_in_b: self.only_in_b.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    #[serde(flatten)]
    pub meta: PairMeta,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Split directory holding `manifest.jsonl`.
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }

    /// Accepts a split directory or a path to its `manifest.jsonl`.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::Manifest(format!("{} line {}: {e}", file.display(), i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Manifest { dir, records })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self) -> Result<(), DatasetError> {
        let p = self.path();
        fs::write(&p, self.to_jsonl()).map_err(io_err(&p))
    }

    pub fn record(&self, pair_id: u64) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.meta.pair_id == pair_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Unordered state pairs, for split-overlap checks.
    pub fn state_pairs(&self) -> HashSet<(u64, u64)> {
        self.records.iter().map(|r| unordered(r.meta.state_a, r.meta.state_b)).collect()
    }
}

pub fn unordered(a: u64, b: u64) -> (u64, u64) {
    (a.min(b), a.max(b))
}

/// A fully loaded pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub split: Split,
    pub meta: PairMeta,
    pub rasters: PairRasters,
}

impl PairRecord {
    /// Training-time augmentation; metadata is unchanged.
    pub fn augmented<R: Rng + ?Sized>(&self, cfg: &AugmentConfig, rng: &mut R) -> PairRecord {
        PairRecord { split: self.split, meta: self.meta.clone(), rasters: augment_pair(&self.rasters, cfg, rng) }
    }
}

/// Generates one pair in memory: states, poses, the three renders, the
/// change mask at the anchor pose, and the ROI crop.
pub fn generate_pair(
    catalog: &PartCatalog,
    cfg: &GenConfig,
    pair_id: u64,
    exclude: &HashSet<(u64, u64)>,
) -> Result<PairRecord, DatasetError> {
    let mut rng = pair_rng(cfg.seed, &cfg.name, pair_id);
    let (a, b) = sample_state_pair_filtered(catalog, cfg.d_min, cfg.d_max, &cfg.constraints, &mut rng, |a, b| {
        !exclude.contains(&unordered(a.present, b.present))
    })?;
    let intrinsics = Intrinsics::from_fov(cfg.render_size, cfg.fov_deg);
    let pose_a = sample_pose(&cfg.pose_range, intrinsics, &mut rng)?;
    let pose_b = perturb_pose(&pose_a, cfg.max_nqd, if cfg.max_nqd > 0.0 { cfg.position_frac } else { 0.0 }, &mut rng)?;
    let params_a = cfg.appearance.draw(cfg.render_size, &mut rng);
    let params_b = cfg.appearance.draw(cfg.render_size, &mut rng);
    let anchor = render::rasterize(catalog, &a, &pose_a, &params_a)?;
    let sample = render::rasterize(catalog, &b, &pose_b, &params_b)?;
    let aligned = render::rasterize(catalog, &b, &pose_a, &params_a)?;
    let mask = render::change_mask(&anchor, &aligned)?;
    let full = PairRasters {
        anchor_rgb: anchor.rgb,
        sample_rgb: sample.rgb,
        anchor_instance: anchor.instance,
        aligned_instance: aligned.instance,
        mask,
    };
    let (rasters, _) = render::roi_crop(&full, cfg.margin_frac, cfg.translate, cfg.input_size, &mut rng)?;
    let diff = part_diff(&a, &b)?;
    let meta = PairMeta {
        pair_id,
        state_a: a.present,
        state_b: b.present,
        pose_a: StoredPose::from_pose(&pose_a),
        pose_b: StoredPose::from_pose(&pose_b),
        nqd: nqd(&pose_a.orientation, &pose_b.orientation)?,
        only_in_a: diff.only_in_a.into_iter().collect(),
        only_in_b: diff.only_in_b.into_iter().collect(),
    };
    Ok(PairRecord { split: cfg.split, meta, rasters })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_pair(dir: &Path, record: &PairRecord) -> Result<Vec<FileEntry>, DatasetError> {
    let rel = format!("{:08}", record.meta.pair_id);
    let pair_dir = dir.join(&rel);
    fs::create_dir_all(&pair_dir).map_err(io_err(&pair_dir))?;
    let r = &record.rasters;
    let meta = serde_json::to_vec_pretty(&record.meta).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    let blobs: [Vec<u8>; 6] = [
        r.anchor_rgb.encode_png()?,
        r.sample_rgb.encode_png()?,
        r.anchor_instance.encode_png()?,
        r.aligned_instance.encode_png()?,
        r.mask.encode_png()?,
        meta,
    ];
    FILES
        .iter()
        .zip(blobs.iter())
        .map(|(name, bytes)| {
            image::write_file(&pair_dir.join(name), bytes)?;
            Ok(FileEntry { path: format!("{rel}/{name}"), sha256: sha256_hex(bytes) })
        })
        .collect()
}

/// Generates every pair of one split into `out_dir` and writes its manifest.
pub fn generate_dataset(
    catalog: &PartCatalog,
    cfg: &GenConfig,
    out_dir: &Path,
    exclude: &HashSet<(u64, u64)>,
    exec: Execution,
) -> Result<Manifest, DatasetError> {
    cfg.validate(catalog)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records = par::try_map_indexed(exec, cfg.count, |i| {
        let rec = generate_pair(catalog, cfg, i as u64, exclude)?;
        let files = write_pair(out_dir, &rec)?;
        Ok::<_, DatasetError>(ManifestRecord { split: rec.split, meta: rec.meta, files })
    })?;
    let manifest = Manifest { dir: out_dir.to_path_buf(), records };
    manifest.write()?;
    Ok(manifest)
}

fn read_checked(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>, DatasetError> {
    let path = dir.join(&entry.path);
    if !path.exists() {
        return Err(DatasetError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "missing pair file"),
        });
    }
    let bytes = image::read_file(&path)?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(DatasetError::Checksum(path.display().to_string()));
    }
    Ok(bytes)
}

fn file<'a>(rec: &'a ManifestRecord, name: &str) -> Result<&'a FileEntry, DatasetError> {
    rec.files
        .iter()
        .find(|f| f.path.ends_with(name))
        .ok_or_else(|| DatasetError::Manifest(format!("pair {} lists no {name}", rec.meta.pair_id)))
}

pub fn load_record(manifest: &Manifest, rec: &ManifestRecord) -> Result<PairRecord, DatasetError> {
    let dir = &manifest.dir;
    let get = |name| read_checked(dir, file(rec, name)?);
    let rasters = PairRasters {
        anchor_rgb: RgbImage::decode_png(&get("anchor.png")?)?,
        sample_rgb: RgbImage::decode_png(&get("sample.png")?)?,
        anchor_instance: InstanceMap::decode_png(&get("anchor_instance.png")?)?,
        aligned_instance: InstanceMap::decode_png(&get("aligned_instance.png")?)?,
        mask: BinaryMask::decode_png(&get("mask.png")?)?,
    };
    let meta: PairMeta =
        serde_json::from_slice(&get("meta.json")?).map_err(|e| DatasetError::Manifest(format!("meta.json: {e}")))?;
    if meta != rec.meta {
        return Err(DatasetError::Manifest(format!("meta.json of pair {} disagrees with manifest", meta.pair_id)));
    }
    Ok(PairRecord { split: rec.split, meta, rasters })
}

/// Loads and checksum-verifies one pair.
pub fn load_pair(manifest: &Manifest, pair_id: u64) -> Result<PairRecord, DatasetError> {
    let rec = manifest.record(pair_id).ok_or(DatasetError::MissingPair(pair_id))?;
    load_record(manifest, rec)
}

pub fn load_all(manifest: &Manifest, exec: Execution) -> Result<Vec<PairRecord>, DatasetError> {
    par::try_map_indexed(exec, manifest.records.len(), |i| load_record(manifest, &manifest.records[i]))
}

/// The standard suite configurations, in generation order.
pub fn standard_suite_configs(catalog: &PartCatalog, scale: Scale, seed: u64) -> Result<Vec<GenConfig>, DatasetError> {
    let (n_train, n_test) = scale.counts();
    let train = GenConfig::train(n_train, seed);
    let val = GenConfig { name: "val".into(), split: Split::Val, count: n_test, ..train.clone() };
    let test_seen = GenConfig {
        name: "test_seen_pose".into(),
        split: Split::TestSeenPose,
        count: n_test,
        d_max: 10,
        max_nqd: 0.4,
        ..train.clone()
    };
    let test_novel = GenConfig {
        name: "test_novel_pose".into(),
        split: Split::TestNovelPose,
        pose_range: PoseRange::novel(),
        ..test_seen.clone()
    };
    let ablation = GenConfig {
        name: "ablation_train".into(),
        constraints: catalog.constraints(&["front_bracket"], &["pulley", "wheel_4"])?,
        ..train.clone()
    };
    let train_aligned = GenConfig { name: "train_aligned".into(), max_nqd: 0.0, ..train.clone() };
    let seen_aligned = GenConfig { name: "test_seen_pose_aligned".into(), max_nqd: 0.0, ..test_seen.clone() };
    Ok(vec![train, val, test_seen, test_novel, ablation, train_aligned, seen_aligned])
}

/// Builds every standard split under `root`. Validation and test splits
/// exclude the state pairs used by the training split.
pub fn build_standard_suites(
    catalog: &PartCatalog,
    root: &Path,
    scale: Scale,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Manifest>, DatasetError> {
    build_suites(catalog, root, &standard_suite_configs(catalog, scale, seed)?, exec)
}

/// Generates `configs` in order under `root/<name>`. Splits other than
/// [`Split::Train`] exclude the state pairs of the split named `train`,
/// which must come first when present.
pub fn build_suites(catalog: &PartCatalog, root: &Path, configs: &[GenConfig], exec: Execution) -> Result<Vec<Manifest>, DatasetError> {
    let mut out = Vec::with_capacity(configs.len());
    let mut train_pairs = HashSet::new();
    for cfg in configs {
        let exclude = if cfg.split == Split::Train { HashSet::new() } else { train_pairs.clone() };
        let m = generate_dataset(catalog, cfg, &root.join(&cfg.name), &exclude, exec)?;
        if cfg.name == "train" {
            train_pairs = m.state_pairs();
        }
        out.push(m);
    }
    Ok(out)
}
