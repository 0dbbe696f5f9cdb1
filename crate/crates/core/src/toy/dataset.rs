use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{gen_scene, ToyScene, ToyWorldConfig};
use crate::error::{Error, Result};
use crate::flow::{refine_spec, LevelPair};
use crate::layout::{encode_attributes, line_thickness, read_manifest, voxelize_layout, AttributeVocab, SceneAttributes};
use crate::rng::derive_seed;
use crate::volume::io::encode_volume;
use crate::volume::{read_volume, truncate_normalize, udf_from_mesh_nearest, GridSpec, VoxelGrid};

pub const INDEX_FILE: &str = "index.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "heldout" => Some(Split::HeldOut),
            _ => None,
        }
    }
}

/// One in ten ids is held out, chosen by a 64-bit FNV-1a hash of the id.
pub fn split_of(id: &str) -> Split {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    if derive_seed(h, 0) % 10 == 0 {
        Split::HeldOut
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    /// Volume of each level, relative to the dataset root.
    pub levels: Vec<PathBuf>,
    pub layout: PathBuf,
    pub attrs: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub records: Vec<SceneRecord>,
}

impl DatasetIndex {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn level_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.levels.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.level_count();
        let mut ids = HashSet::new();
        for r in &self.records {
            if r.levels.len() != n || n == 0 {
                return Err(Error::Validation(format!("record {} has {} levels, expected {n}", r.id, r.levels.len())));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate scene id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.id);
            for p in r.levels.iter().chain([&r.layout]) {
                write!(s, "\t{}", p.display()).unwrap();
            }
            writeln!(s, "\tattrs={}\tsplit={}", r.attrs.join(","), r.split.name()).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let perr = |line: usize, m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 5 {
                return Err(perr(ln, "expected id, level volumes, layout, attrs= and split="));
            }
            let n = f.len();
            let attrs = f[n - 2]
                .strip_prefix("attrs=")
                .ok_or_else(|| perr(ln, "expected attrs=..."))?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            let split = f[n - 1]
                .strip_prefix("split=")
                .and_then(Split::parse)
                .ok_or_else(|| perr(ln, "expected split=train or split=heldout"))?;
            records.push(SceneRecord {
                id: f[0].to_string(),
                levels: f[1..n - 3].iter().map(PathBuf::from).collect(),
                layout: PathBuf::from(f[n - 3]),
                attrs,
                split,
            });
        }
        let index = DatasetIndex { records };
        index.validate()?;
        Ok(index)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Grid of every level, finest last.
pub fn level_specs(cfg: &ToyWorldConfig) -> Result<Vec<GridSpec>> {
    let mut specs = vec![cfg.base_spec()?];
    for i in 2..=cfg.hierarchy.levels.len() {
        let prev = *specs.last().unwrap();
        specs.push(refine_spec(&prev, cfg.hierarchy.ratio(i)?)?);
    }
    Ok(specs)
}

/// Normalized distance volume of each level, computed from the mesh at that
/// level's resolution. Levels with RGB take the color of the nearest triangle,
/// zero beyond the truncation band.
pub fn scene_volumes(cfg: &ToyWorldConfig, scene: &ToyScene) -> Result<Vec<VoxelGrid>> {
    let mesh = scene.mesh();
    let colors = scene.triangle_colors();
    let tau = cfg.hierarchy.truncation;
    level_specs(cfg)?
        .into_iter()
        .zip(&cfg.hierarchy.levels)
        .map(|(spec, level)| {
            let md = udf_from_mesh_nearest(&mesh, spec, tau)?;
            let udf = truncate_normalize(&md.grid, tau)?;
            if !level.rgb {
                return Ok(udf);
            }
            let mut data = Vec::with_capacity(spec.voxel_count() * 4);
            for (v, &t) in md.nearest.iter().enumerate() {
                data.push(udf.data[v]);
                let c = colors.get(t as usize).copied().unwrap_or([0.0; 3]);
                data.extend_from_slice(&c);
            }
            VoxelGrid::from_data(spec, level.roles(), data)
        })
        .collect()
}

/// Outcome of [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub index: DatasetIndex,
    pub files_written: usize,
    /// Files already on disk with identical bytes.
    pub files_unchanged: usize,
}

impl BuildSummary {
    pub fn unchanged(&self) -> bool {
        self.files_written == 0
    }
}

/// Writes `bytes` unless the file already holds them; returns whether it wrote.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(old) = std::fs::read(path) {
        if old == bytes {
            return Ok(false);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

/// Generates `n_scenes` scenes with seeds derived from `cfg.seed` and writes
/// `scenes/<id>/level<i>.wfv`, `scenes/<id>/layout.wfl` and the index under `out_dir`.
pub fn build_dataset(cfg: &ToyWorldConfig, n_scenes: usize, out_dir: impl AsRef<Path>) -> Result<BuildSummary> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let levels = cfg.hierarchy.levels.len();
    let built: Vec<(SceneRecord, usize, usize)> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let id = format!("scene_{i:05}");
            let scene = gen_scene(cfg, derive_seed(cfg.seed, i as u64))?;
            let vols = scene_volumes(cfg, &scene)?;
            let dir = PathBuf::from("scenes").join(&id);
            let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::with_capacity(levels + 1);
            for (l, v) in vols.iter().enumerate() {
                files.push((dir.join(format!("level{}.wfv", l + 1)), encode_volume(v)?));
            }
            let layout = dir.join("layout.wfl");
            files.push((layout.clone(), scene.manifest(cfg.line_width()).to_text().into_bytes()));
            let (mut written, mut same) = (0, 0);
            for (rel, bytes) in &files {
                if write_if_changed(&out_dir.join(rel), bytes)? {
                    written += 1;
                } else {
                    same += 1;
                }
            }
            let record = SceneRecord {
                split: split_of(&id),
                id,
                levels: files[..levels].iter().map(|f| f.0.clone()).collect(),
                layout,
                attrs: scene.attrs,
            };
            Ok((record, written, same))
        })
        .collect::<Result<_>>()?;
    let mut summary = BuildSummary {
        index: DatasetIndex::default(),
        files_written: 0,
        files_unchanged: 0,
    };
    for (r, w, s) in built {
        summary.index.records.push(r);
        summary.files_written += w;
        summary.files_unchanged += s;
    }
    if write_if_changed(&out_dir.join(INDEX_FILE), summary.index.to_text().as_bytes())? {
        summary.files_written += 1;
    } else {
        summary.files_unchanged += 1;
    }
    Ok(summary)
}

/// Training pairs for the flow into `level` over the records of `split`.
/// With `with_layout` the manifest is rasterized onto the target grid.
pub fn load_pairs(
    root: impl AsRef<Path>,
    index: &DatasetIndex,
    level: usize,
    split: Split,
    vocab: &AttributeVocab,
    with_layout: bool,
) -> Result<Vec<LevelPair>> {
    let root = root.as_ref();
    if level == 0 || level > index.level_count() {
        return Err(Error::Config(format!(
            "level {level} is not in a dataset with {} levels",
            index.level_count()
        )));
    }
    index
        .records
        .par_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let target = read_volume(&root.join(&r.levels[level - 1]))?;
            let source = match level {
                1 => None,
                _ => Some(read_volume(&root.join(&r.levels[level - 2]))?),
            };
            let layout = if with_layout {
                let m = read_manifest(root.join(&r.layout))?;
                let spec = target.spec;
                let width = m.line_width.unwrap_or(spec.voxel_size);
                Some(voxelize_layout(&m.layout, &spec, line_thickness(width, spec.voxel_size))?)
            } else {
                None
            };
            let attrs = encode_attributes(&SceneAttributes::from_names(vocab, &r.attrs)?, vocab.len())?;
            Ok(LevelPair {
                source,
                target,
                layout,
                attrs,
            })
        })
        .collect()
}
