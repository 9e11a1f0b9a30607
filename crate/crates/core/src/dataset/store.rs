//! On-disk layout: one JSON record plus one PLY per part for each object,
//! and a JSON manifest listing every object of a generated split.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ply::{read_ply, write_ply};
use super::toy::ToyParams;
use super::{generate_toy_object, label_object, FracturedObject, Split};
use crate::error::{Error, Result};
use crate::geom::transform::TransformRecord;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORMALIZATION: &str = "assembled object scaled to unit diameter, centred on its bounding-box centre";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PartRecord {
    file: String,
    points: usize,
    gt_pose: TransformRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ObjectRecord {
    version: u32,
    id: String,
    pattern: u8,
    seed: u64,
    split: Split,
    tau: f64,
    parts: Vec<PartRecord>,
    positives: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, kind: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        kind,
        path: path.to_path_buf(),
        location: format!("line {}, column {}", e.line(), e.column()),
        msg: e.to_string(),
    })
}

/// Writes `{dir}/{id}.json` and one `{dir}/{id}_part{k}.ply` per part;
/// returns the JSON path.
pub fn save_object(dir: &Path, obj: &FracturedObject) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parts = Vec::with_capacity(obj.parts.len());
    for (k, (part, gt)) in obj.parts.iter().zip(&obj.gt_poses).enumerate() {
        let file = format!("{}_part{k}.ply", obj.id);
        write_ply(&dir.join(&file), part)?;
        parts.push(PartRecord {
            file,
            points: part.len(),
            gt_pose: gt.into(),
        });
    }
    let record = ObjectRecord {
        version: FORMAT_VERSION,
        id: obj.id.clone(),
        pattern: obj.pattern,
        seed: obj.seed,
        split: obj.split,
        tau: obj.tau,
        parts,
        positives: obj.correspondences.iter().map(|(_, _, c)| c.positives.len()).sum(),
    };
    let path = dir.join(format!("{}.json", obj.id));
    write_json(&path, &record)?;
    Ok(path)
}

/// Reads an object written by [`save_object`] and re-derives its labels,
/// checking them against the stored mating flags and positive count.
pub fn load_object(path: &Path) -> Result<FracturedObject> {
    let record: ObjectRecord = read_json(path, "object")?;
    let bad = |msg: String| Error::Parse {
        kind: "object",
        path: path.to_path_buf(),
        location: "record".into(),
        msg,
    };
    if record.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", record.version)));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut parts = Vec::with_capacity(record.parts.len());
    let mut gt_poses = Vec::with_capacity(record.parts.len());
    for (k, pr) in record.parts.iter().enumerate() {
        let mut cloud = read_ply(&dir.join(&pr.file))?;
        if cloud.len() != pr.points {
            return Err(bad(format!("part {k}: {} points on disk, {} recorded", cloud.len(), pr.points)));
        }
        cloud.part_id = k;
        parts.push(cloud);
        gt_poses.push(pr.gt_pose.to_transform());
    }
    let stored: Vec<Option<Vec<bool>>> = parts.iter().map(|p| p.mating_mask.clone()).collect();
    let correspondences = label_object(&mut parts, &gt_poses, record.tau);
    for (k, (p, s)) in parts.iter().zip(stored).enumerate() {
        if s.is_some() && s != p.mating_mask {
            return Err(bad(format!("part {k}: stored mating flags disagree with ground-truth labels")));
        }
    }
    let positives: usize = correspondences.iter().map(|(_, _, c)| c.positives.len()).sum();
    if positives != record.positives {
        return Err(bad(format!("{positives} positives derived, {} recorded", record.positives)));
    }
    Ok(FracturedObject {
        id: record.id,
        pattern: record.pattern,
        seed: record.seed,
        split: record.split,
        tau: record.tau,
        parts,
        gt_poses,
        correspondences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Object record path relative to the manifest directory.
    pub file: String,
    pub pattern: u8,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub tau: f64,
    pub normalization: String,
    pub master_seed: u64,
    pub params: ToyParams,
    pub objects: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path, "manifest")?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Parse {
                kind: "manifest",
                path: path.to_path_buf(),
                location: "version".into(),
                msg: format!("unsupported version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.objects.iter().filter(move |e| e.split == split)
    }

    /// Checks that every file resolves and that test patterns never appear
    /// in the training or validation splits.
    pub fn validate(&self, root: &Path) -> Result<()> {
        for e in &self.objects {
            let path = root.join(&e.file);
            if !path.is_file() {
                return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
            }
            let test_pattern = e.pattern > 3;
            if test_pattern != (e.split == Split::Test) {
                return Err(Error::InvalidArgument(format!("object {} has pattern {} in split {}", e.id, e.pattern, e.split.name())));
            }
        }
        Ok(())
    }
}

/// Split sizes and seeds for the toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub master_seed: u64,
    pub params: ToyParams,
    pub train_per_pattern: usize,
    pub val_per_pattern: usize,
    pub test_per_pattern: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            master_seed: 0,
            params: ToyParams::default(),
            train_per_pattern: 200,
            val_per_pattern: 50,
            test_per_pattern: 50,
        }
    }
}

impl SplitConfig {
    /// `(split, pattern, count)` in generation order.
    pub fn plan(&self) -> [(Split, u8, usize); 9] {
        [
            (Split::Train, 1, self.train_per_pattern),
            (Split::Train, 2, self.train_per_pattern),
            (Split::Train, 3, self.train_per_pattern),
            (Split::Val, 1, self.val_per_pattern),
            (Split::Val, 2, self.val_per_pattern),
            (Split::Val, 3, self.val_per_pattern),
            (Split::Test, 4, self.test_per_pattern),
            (Split::Test, 5, self.test_per_pattern),
            (Split::Test, 6, self.test_per_pattern),
        ]
    }
}

/// Generates the full split under `out_dir` and writes the manifest. The
/// result is a pure function of the configuration.
pub fn generate_toy_split(cfg: &SplitConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.params.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let mut objects = Vec::new();
    for (split, pattern, count) in cfg.plan() {
        let dir = out_dir.join(split.name());
        for _ in 0..count {
            let seed: u64 = seeds.random();
            let obj = generate_toy_object(pattern, seed, split, &cfg.params)?;
            save_object(&dir, &obj)?;
            objects.push(ManifestEntry {
                file: format!("{}/{}.json", split.name(), obj.id),
                id: obj.id,
                pattern,
                split,
                seed,
            });
        }
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        tau: cfg.params.tau,
        normalization: NORMALIZATION.into(),
        master_seed: cfg.master_seed,
        params: cfg.params.clone(),
        objects,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads every object of `split` listed in the manifest under `root`.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<FracturedObject>> {
    let manifest = DatasetManifest::load(&root.join(MANIFEST_FILE))?;
    let objs: Vec<FracturedObject> = manifest
        .entries(split)
        .map(|e| {
            let o = load_object(&root.join(&e.file))?;
            if o.id != e.id || o.pattern != e.pattern || o.split != e.split {
                return Err(Error::InvalidArgument(format!("object {} disagrees with the manifest", e.file)));
            }
            Ok(o)
        })
        .collect::<Result<_>>()?;
    if objs.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{}` is empty", split.name())));
    }
    Ok(objs)
}
