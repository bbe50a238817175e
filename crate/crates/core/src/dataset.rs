//! Synthetic dataset generation, manifest and per-channel normalization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::families::{synthesize, Family, MotionClass, MotionParams, SUBJECTS};
use crate::motion::{load_motion, save_motion, MotionSequence};
use crate::rng::substream;
use crate::skeleton::Skeleton;

/// Floor applied to every channel standard deviation.
pub const STD_FLOOR: f64 = 1e-4;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    /// Sequences per family; classes inside a family are filled round-robin.
    pub family_counts: BTreeMap<Family, usize>,
    pub min_len: usize,
    pub max_len: usize,
    pub num_joints: usize,
    pub fps: f64,
    /// Fraction of every class held out for the test split.
    pub test_fraction: f64,
}

impl GenerationSpec {
    /// `per_class` sequences for each of the 34 caption classes.
    pub fn balanced(per_class: usize) -> Self {
        let family_counts = Family::ALL.iter().map(|&f| (f, per_class * f.classes().len())).collect();
        Self { family_counts, min_len: 40, max_len: 120, num_joints: 9, fps: 20.0, test_fraction: 1.0 / 11.0 }
    }

    /// Desk defaults: 65 per class, about 2,000 train and 200 test sequences.
    pub fn desk() -> Self {
        Self::balanced(65)
    }

    pub const REQUIRED: [Family; 8] = [
        Family::WalkStraight,
        Family::WalkCircleCw,
        Family::WalkCircleCcw,
        Family::Figure8,
        Family::TurnNDegrees,
        Family::ArmRaiseLeft,
        Family::ArmRaiseRight,
        Family::KickKTimes,
    ];

    pub fn validate(&self) -> Result<()> {
        for f in Self::REQUIRED {
            if self.family_counts.get(&f).copied().unwrap_or(0) == 0 {
                return Err(CoreError::Config(format!("family {f} must have a positive count")));
            }
        }
        if let Some((f, _)) = self.family_counts.iter().find(|(_, &n)| n == 0) {
            return Err(CoreError::Config(format!("family {f} has a zero count")));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(CoreError::Config(format!("length range [{}, {}] is invalid", self.min_len, self.max_len)));
        }
        let j = Skeleton::desk().num_joints();
        if self.num_joints != j {
            return Err(CoreError::Config(format!("num_joints {} does not match the desk skeleton ({j})", self.num_joints)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(CoreError::Config("fps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(CoreError::Config("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Relative to the manifest directory.
    pub path: String,
    pub caption: String,
    pub length: usize,
    pub family: Family,
    pub class_label: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn class(&self) -> MotionClass {
        MotionClass::from_label(&self.class_label).expect("manifest labels name known classes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.mean.is_empty() || !len.is_multiple_of(self.mean.len()) {
            return Err(CoreError::Validation(format!(
                "buffer of {len} values is not a whole number of {}-channel frames",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_f64(&self, frames: &[f64]) -> Result<Vec<f64>> {
        self.check(frames.len())?;
        let c = self.channels();
        Ok(frames.iter().enumerate().map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c].max(STD_FLOOR)).collect())
    }

    pub fn denormalize_f64(&self, frames: &[f64]) -> Result<Vec<f64>> {
        self.check(frames.len())?;
        let c = self.channels();
        Ok(frames.iter().enumerate().map(|(i, &v)| v * self.std[i % c].max(STD_FLOOR) + self.mean[i % c]).collect())
    }

    /// Normalized copy of a motion's frames, rounded to `f32`.
    pub fn normalize(&self, motion: &MotionSequence) -> Result<Vec<f32>> {
        let x: Vec<f64> = motion.frames().iter().map(|&v| v as f64).collect();
        Ok(self.normalize_f64(&x)?.into_iter().map(|v| v as f32).collect())
    }

    pub fn denormalize(&self, frames: &[f32]) -> Result<Vec<f32>> {
        let x: Vec<f64> = frames.iter().map(|&v| v as f64).collect();
        Ok(self.denormalize_f64(&x)?.into_iter().map(|v| v as f32).collect())
    }
}

/// Per-channel mean and floored population std over valid frames.
pub fn compute_normalization<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Normalization> {
    let motions: Vec<&MotionSequence> = motions.into_iter().collect();
    let c = motions.first().ok_or_else(|| CoreError::Validation("no motions to normalize".into()))?.num_joints() * 3;
    if motions.iter().any(|m| m.num_joints() * 3 != c) {
        return Err(CoreError::Validation("motions disagree on joint count".into()));
    }
    let valid_rows = || motions.iter().flat_map(move |m| m.frames().chunks(c).zip(m.valid_mask()).filter(|(_, &v)| v).map(|(r, _)| r));
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for row in valid_rows() {
        count += 1;
        for (k, &v) in row.iter().enumerate() {
            mean[k] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for row in valid_rows() {
        for (k, &v) in row.iter().enumerate() {
            var[k] += (v as f64 - mean[k]).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(Normalization { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub normalization: Normalization,
    pub seed: u64,
    pub split: SplitIds,
    pub fps: f64,
    pub num_joints: usize,
    pub spec: GenerationSpec,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Manifest plus the motions it describes, index-aligned with `entries`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub motions: Vec<MotionSequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&ManifestEntry, &MotionSequence)> {
        self.manifest.entries.iter().zip(&self.motions).filter(move |(e, _)| e.split == split)
    }

    /// Writes motion binaries under `dir/motions` and `dir/manifest.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let motions_dir = dir.join("motions");
        std::fs::create_dir_all(&motions_dir).map_err(|e| CoreError::io(&motions_dir, e))?;
        for (e, m) in self.manifest.entries.iter().zip(&self.motions) {
            save_motion(dir.join(&e.path), m)?;
        }
        let mpath = dir.join(MANIFEST_FILE);
        std::fs::write(&mpath, self.manifest.to_json()).map_err(|e| CoreError::io(&mpath, e))
    }

    /// Loads a dataset directory, checking every entry against its file.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir.join(MANIFEST_FILE))?;
        let mut motions = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let m = load_motion(dir.join(&e.path), manifest.fps as f32, &e.caption)?;
            if m.num_frames() != e.length || m.num_joints() != manifest.num_joints {
                return Err(CoreError::Validation(format!("{} disagrees with its manifest entry", e.path)));
            }
            motions.push(m);
        }
        Ok(Self { manifest, motions })
    }
}

/// Generates the corpus in memory; a pure function of `(spec, seed)`.
pub fn generate(spec: &GenerationSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let skeleton = Skeleton::desk();
    let mut plan: Vec<MotionClass> = Vec::new();
    for (&family, &count) in &spec.family_counts {
        let classes = family.classes();
        plan.extend((0..count).map(|i| classes[i % classes.len()]));
    }

    let mut test_ids = vec![false; plan.len()];
    for class in MotionClass::all() {
        let mut members: Vec<usize> = (0..plan.len()).filter(|&i| plan[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = substream(seed, "split", &[class.id() as u64]);
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * spec.test_fraction).round() as usize;
        for &i in &members[..n_test.min(members.len() - 1)] {
            test_ids[i] = true;
        }
    }

    let mut entries = Vec::with_capacity(plan.len());
    let mut motions = Vec::with_capacity(plan.len());
    for (id, &class) in plan.iter().enumerate() {
        let mut rng = substream(seed, "data", &[id as u64]);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let subject = rng.random_range(0..SUBJECTS.len());
        let params = MotionParams::sample(&mut rng);
        let motion = synthesize(class, &params, len, spec.fps, subject, &skeleton)?;
        entries.push(ManifestEntry {
            id,
            path: format!("motions/{id:05}.fcm"),
            caption: motion.caption.clone(),
            length: len,
            family: class.family(),
            class_label: class.label(),
            split: if test_ids[id] { Split::Test } else { Split::Train },
        });
        motions.push(motion);
    }
    let split = SplitIds {
        train: entries.iter().filter(|e| e.split == Split::Train).map(|e| e.id).collect(),
        test: entries.iter().filter(|e| e.split == Split::Test).map(|e| e.id).collect(),
    };
    let normalization = compute_normalization(entries.iter().zip(&motions).filter(|(e, _)| e.split == Split::Train).map(|(_, m)| m))?;
    let manifest = DatasetManifest { entries, normalization, seed, split, fps: spec.fps, num_joints: spec.num_joints, spec: spec.clone() };
    Ok(Dataset { manifest, motions })
}

/// Generates and writes the corpus to `out_dir`, returning its manifest.
pub fn generate_dataset(spec: &GenerationSpec, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let ds = generate(spec, seed)?;
    ds.write(out_dir)?;
    Ok(ds.manifest)
}
