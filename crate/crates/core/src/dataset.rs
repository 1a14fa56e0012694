//! Partially labeled per-step datasets: sampling from phantom scenes, the
//! on-disk directory layout, and the binary sample format (see
//! `docs/FORMATS.md`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{PhantomScene, PhantomSpec};
use crate::relation::{ClassInfo, ClassRegistry, PropositionMatrix};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MATRIX_FILE: &str = "matrix.json";

/// One image labeled for exactly one class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub height: usize,
    pub width: usize,
    /// `3 x H x W`.
    pub image: Vec<f32>,
    /// `H x W`, values 0 or 1.
    pub label: Vec<u8>,
    pub class_id: usize,
    pub scale_id: usize,
    pub scene_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// SplitMix64-style mixing of several seed components into one.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Samples `samples_per_class` copies of every requested class from every
/// scene, then shuffles them with `shuffle_seed`.
pub fn emit_step_dataset(
    scenes: &[PhantomScene],
    classes: &[ClassInfo],
    samples_per_class: usize,
    shuffle_seed: u64,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(scenes.len() * classes.len() * samples_per_class);
    for scene in scenes {
        for class in classes {
            let mask = scene.masks.get(&class.id).ok_or(Error::UnknownClass(class.id))?;
            for _ in 0..samples_per_class {
                out.push(LabeledSample {
                    height: scene.height,
                    width: scene.width,
                    image: scene.image.clone(),
                    label: mask.data().to_vec(),
                    class_id: class.id,
                    scale_id: class.scale.index(),
                    scene_seed: scene.scene_seed,
                });
            }
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SceneCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SceneCounts {
    fn default() -> Self {
        Self { train: 16, val: 4, test: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub file: String,
    pub split: Split,
    pub class_id: usize,
    pub scale_id: usize,
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSeeds {
    pub texture_seed: u64,
    pub shuffle_seed: u64,
    pub scene_seeds: BTreeMap<Split, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub format_version: u32,
    pub step: u32,
    pub class_ids: Vec<usize>,
    /// Every class registered through this step.
    pub registry: Vec<ClassInfo>,
    pub matrix: String,
    pub seeds: StepSeeds,
    pub counts: BTreeMap<Split, usize>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub step: u32,
    pub dir: String,
    pub class_ids: Vec<usize>,
}

/// Top-level `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub seed: u64,
    pub scenes: SceneCounts,
    pub spec: PhantomSpec,
    pub steps: Vec<StepEntry>,
}

impl DatasetIndex {
    pub fn registry(&self) -> Result<ClassRegistry> {
        let used: usize = self.steps.iter().map(|s| s.class_ids.len()).sum();
        ClassRegistry::from_classes(self.spec.layout[..used].iter().map(|e| e.class.clone()).collect())
    }

    pub fn step(&self, step: u32) -> Result<&StepEntry> {
        self.steps
            .iter()
            .find(|s| s.step == step)
            .ok_or_else(|| Error::Data(format!("dataset has no step {step}")))
    }
}

/// Everything needed to generate a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub scenes: SceneCounts,
}

/// Reorders a layout so the classes of `steps` come first, in step order,
/// with dense ids and `step_introduced` set from their position. Classes
/// not named by any step are kept (they still appear in scenes) but get
/// `step_introduced = 0` and are never registered.
pub fn arrange_steps(spec: &PhantomSpec, steps: &[Vec<usize>]) -> Result<PhantomSpec> {
    let n = spec.layout.len();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut step_of = vec![0u32; n];
    for (t, classes) in steps.iter().enumerate() {
        for &c in classes {
            spec.class(c)?;
            if order.contains(&c) {
                return Err(Error::DuplicateClass(c));
            }
            order.push(c);
            step_of[c] = t as u32 + 1;
        }
    }
    order.extend((0..n).filter(|c| step_of[*c] == 0));
    let mut new_id = vec![0usize; n];
    for (i, &c) in order.iter().enumerate() {
        new_id[c] = i;
    }
    let layout = order
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut e = spec.layout[c].clone();
            e.class.id = i;
            e.class.step_introduced = step_of[c];
            e.parent = e.parent.map(|p| new_id[p]);
            e.straddles = e.straddles.map(|p| new_id[p]);
            e
        })
        .collect();
    Ok(PhantomSpec { layout, ..spec.clone() })
}

/// Matrix for `step` of an arranged spec.
pub fn step_matrix(spec: &PhantomSpec, step: u32) -> Result<PropositionMatrix> {
    let classes: Vec<&ClassInfo> = spec.layout.iter().map(|e| &e.class).collect();
    let old: Vec<ClassInfo> =
        classes.iter().filter(|c| c.step_introduced >= 1 && c.step_introduced < step).map(|c| (*c).clone()).collect();
    let new: Vec<ClassInfo> = classes.iter().filter(|c| c.step_introduced == step).map(|c| (*c).clone()).collect();
    let ids = |v: &[ClassInfo]| v.iter().map(|c| c.id).collect::<Vec<_>>();
    let assignments = spec.assignments(&ids(&old), &ids(&new))?;
    PropositionMatrix::build(step, old, new, &assignments)
}

fn scene_seed(seed: u64, step: u32, split: Split, index: usize) -> u64 {
    mix_seed(&[seed, step as u64, split as u64, index as u64])
}

/// Writes `dataset.json` and one directory per step. `config.spec` must
/// already be arranged (see [`arrange_steps`]).
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetIndex> {
    let spec = &config.spec;
    spec.validate()?;
    let num_steps = spec.layout.iter().map(|e| e.class.step_introduced).max().unwrap_or(0);
    if num_steps == 0 {
        return Err(Error::Data("no class is assigned to a step".into()));
    }
    let mut steps = Vec::new();
    for t in 1..=num_steps {
        let classes: Vec<ClassInfo> =
            spec.layout.iter().filter(|e| e.class.step_introduced == t).map(|e| e.class.clone()).collect();
        let registry: Vec<ClassInfo> = spec
            .layout
            .iter()
            .filter(|e| e.class.step_introduced >= 1 && e.class.step_introduced <= t)
            .map(|e| e.class.clone())
            .collect();
        let dir_name = format!("step{t}");
        let dir = out_dir.join(&dir_name);
        let matrix = step_matrix(spec, t)?;
        write_file(&dir.join(MATRIX_FILE), &matrix.to_json())?;
        let shuffle_seed = mix_seed(&[config.seed, t as u64, 0x5348]);
        let mut samples = Vec::new();
        let mut counts = BTreeMap::new();
        let mut scene_seeds = BTreeMap::new();
        for split in Split::ALL {
            let seeds: Vec<u64> = (0..config.scenes.get(split)).map(|i| scene_seed(config.seed, t, split, i)).collect();
            let scenes = seeds.iter().map(|&s| spec.generate_scene(s)).collect::<Result<Vec<_>>>()?;
            let emitted = emit_step_dataset(&scenes, &classes, spec.samples_per_class, mix_seed(&[shuffle_seed, split as u64]))?;
            fs::create_dir_all(dir.join(split.as_str())).map_err(|e| Error::io(dir.join(split.as_str()), e))?;
            for (i, s) in emitted.iter().enumerate() {
                let file = format!("{}/{i:06}.bin", split.as_str());
                write_file(&dir.join(&file), &encode_sample(s))?;
                samples.push(SampleRecord { file, split, class_id: s.class_id, scale_id: s.scale_id, scene_seed: s.scene_seed });
            }
            counts.insert(split, emitted.len());
            scene_seeds.insert(split, seeds);
        }
        let manifest = StepManifest {
            format_version: FORMAT_VERSION,
            step: t,
            class_ids: classes.iter().map(|c| c.id).collect(),
            registry,
            matrix: MATRIX_FILE.to_string(),
            seeds: StepSeeds { texture_seed: spec.texture_seed, shuffle_seed, scene_seeds },
            counts,
            samples,
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        steps.push(StepEntry { step: t, dir: dir_name, class_ids: manifest.class_ids.clone() });
    }
    let index = DatasetIndex {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        scenes: config.scenes,
        spec: spec.clone(),
        steps,
    };
    write_json(&out_dir.join(DATASET_FILE), &index)?;
    Ok(index)
}

/// One step of a dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct StepData {
    pub manifest: StepManifest,
    pub matrix: PropositionMatrix,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl StepData {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&root.join(DATASET_FILE))?;
        if index.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset format version {}", index.format_version)));
        }
        Ok(Self { root: root.to_path_buf(), index })
    }

    pub fn num_steps(&self) -> u32 {
        self.index.steps.len() as u32
    }

    pub fn load_step(&self, step: u32) -> Result<StepData> {
        let entry = self.index.step(step)?;
        let dir = self.root.join(&entry.dir);
        let manifest: StepManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.step != step {
            return Err(Error::Data(format!("{} describes step {}", dir.display(), manifest.step)));
        }
        let matrix = PropositionMatrix::from_json(&read_file(&dir.join(&manifest.matrix))?)?;
        let mut by_split: BTreeMap<Split, Vec<LabeledSample>> = BTreeMap::new();
        for rec in &manifest.samples {
            let mut s = decode_sample(&read_file(&dir.join(&rec.file))?)?;
            s.class_id = rec.class_id;
            s.scale_id = rec.scale_id;
            s.scene_seed = rec.scene_seed;
            if !manifest.class_ids.contains(&rec.class_id) {
                return Err(Error::Data(format!("{} labels class {} outside step {step}", rec.file, rec.class_id)));
            }
            by_split.entry(rec.split).or_default().push(s);
        }
        let mut take = |s| by_split.remove(&s).unwrap_or_default();
        Ok(StepData { train: take(Split::Train), val: take(Split::Val), test: take(Split::Test), manifest, matrix })
    }
}

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn write_header(out: &mut Vec<u8>, channels: usize, height: usize, width: usize, dtype: u8) {
    for v in [channels, height, width] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    out.push(dtype);
    out.push(0);
}

/// Image block (`f32`, 3 channels) followed by mask block (`u8`, 1 channel).
pub fn encode_sample(s: &LabeledSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + s.image.len() * 4 + s.label.len());
    write_header(&mut out, 3, s.height, s.width, DTYPE_F32);
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_header(&mut out, 1, s.height, s.width, DTYPE_U8);
    out.extend_from_slice(&s.label);
    out
}

struct Block<'a> {
    channels: usize,
    height: usize,
    width: usize,
    dtype: u8,
    body: &'a [u8],
}

fn read_block(bytes: &[u8]) -> Result<(Block<'_>, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated array header".into()));
    }
    let u = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let (channels, height, width, dtype) = (u(0), u(2), u(4), bytes[6]);
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        d => return Err(Error::Format(format!("unknown dtype code {d}"))),
    };
    let len = channels * height * width * elem;
    let rest = &bytes[8..];
    if rest.len() < len {
        return Err(Error::Format("truncated array body".into()));
    }
    Ok((Block { channels, height, width, dtype, body: &rest[..len] }, &rest[len..]))
}

pub fn decode_sample(bytes: &[u8]) -> Result<LabeledSample> {
    let (img, rest) = read_block(bytes)?;
    let (mask, rest) = read_block(rest)?;
    if !rest.is_empty() || img.dtype != DTYPE_F32 || mask.dtype != DTYPE_U8 || img.channels != 3 || mask.channels != 1 {
        return Err(Error::Format("sample must hold a 3-channel f32 image and a 1-channel u8 mask".into()));
    }
    if (img.height, img.width) != (mask.height, mask.width) {
        return Err(Error::Format("image and mask sizes differ".into()));
    }
    let image = img.body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let label = mask.body.to_vec();
    if label.iter().any(|&v| v > 1) {
        return Err(Error::InvalidMask);
    }
    Ok(LabeledSample { height: img.height, width: img.width, image, label, class_id: 0, scale_id: 0, scene_seed: 0 })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path)?)?)
}
