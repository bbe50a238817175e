//! A trained run as one object: caption-to-motion generation and the
//! evaluation report.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::Autoencoder;
use crate::batch::{collate_text, MotionItem};
use crate::checkpoint::{self, namespace};
use crate::error::{ModelError, Result};
use crate::flow::{euler_sample, prior_sample, HeadField, LatentStats, SamplerConfig};
use crate::flow_head::FlowHead;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::trainer::{build_flow, final_dir, load_autoencoder, pad_latents, DataInfo, Sample, TrainConfig, TrainData};
use motionflow_core::metrics::{
    diversity, frechet_distance, joint_position_error, kinematic_features, multimodality, retrieval_precision, FeatureStandardizer,
    RetrievalGallery,
};
use motionflow_core::motion::MotionSequence;
use motionflow_core::vocab::Vocabulary;

/// Requests sampled together in one solver run.
const GENERATION_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub caption: String,
    pub frames: usize,
    /// Selects the prior draw: `(sampler seed, request)` fixes it.
    pub request: u64,
}

pub struct Pipeline {
    pub config: TrainConfig,
    pub ae: Autoencoder,
    pub flow_store: ParamStore,
    pub head: FlowHead,
    pub stats: LatentStats,
    pub info: DataInfo,
    pub vocab: Vocabulary,
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hex SHA-256 of the canonical JSON form of a value.
pub fn json_sha256<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex(&Sha256::digest(serde_json::to_vec(v)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Pipeline {
    /// Loads the stage-2 autoencoder and stage-3 flow head of a run.
    pub fn load(run_dir: &Path) -> Result<Self> {
        let device = Device::Cpu;
        let dir3 = final_dir(run_dir, 3);
        if !checkpoint::exists(&dir3) {
            return Err(ModelError::Dependency(format!("no completed stage 3 checkpoint at {}", dir3.display())));
        }
        let (meta3, t3) = checkpoint::load(&dir3, &device)?;
        let config: TrainConfig = serde_json::from_value(meta3.config.clone())?;
        let dir2 = final_dir(run_dir, 2);
        if !checkpoint::exists(&dir2) {
            return Err(ModelError::Dependency(format!("no completed stage 2 checkpoint at {}", dir2.display())));
        }
        let (meta2, t2) = checkpoint::load(&dir2, &device)?;
        let ae = load_autoencoder(&meta2, &t2, &config, &device)?;
        let vocab = Vocabulary::desk();
        let (flow_store, head) = build_flow(&config, &vocab, &device)?;
        flow_store.load_values(&namespace(&t3, "flow"), &[""])?;
        let stats = meta3.latent_stats.ok_or_else(|| ModelError::Checkpoint("stage 3 checkpoint has no latent statistics".into()))?;
        let info = DataInfo::load(run_dir)?;
        Ok(Self { config, ae, flow_store, head, stats, info, vocab })
    }

    /// Checkpoint file hashes of a run, keyed by relative path.
    pub fn checkpoint_hashes(run_dir: &Path) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for stage in 1..=3u8 {
            let dir = final_dir(run_dir, stage);
            for f in [checkpoint::TENSOR_FILE, checkpoint::META_FILE] {
                let p = dir.join(f);
                if p.is_file() {
                    out.push((format!("stage{stage}/final/{f}"), file_sha256(&p)?));
                }
            }
        }
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    /// Solves the flow ODE for every request; returns de-standardized
    /// endpoints `n_i × d_total`.
    pub fn sample_latents(&self, requests: &[GenerationRequest], sampler: &SamplerConfig, use_cache: bool) -> Result<Vec<Vec<f64>>> {
        sampler.validate()?;
        let vae = &self.config.model.vae;
        let d = vae.d_total;
        let device = Device::Cpu;
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(GENERATION_BATCH) {
            let mut priors = Vec::with_capacity(chunk.len());
            for r in chunk {
                let n = vae.latent_len(r.frames);
                if r.frames == 0 || n > vae.max_latent_len {
                    return Err(ModelError::Capacity(format!(
                        "{} frames need {n} latent steps, capacity {}",
                        r.frames, vae.max_latent_len
                    )));
                }
                let z = prior_sample(&[n, d], sampler.seed, r.request, DType::F64, &device)?;
                priors.push(z.flatten_all()?.to_vec1::<f64>()?);
            }
            let refs: Vec<&[f64]> = priors.iter().map(Vec::as_slice).collect();
            let (z0, mask) = pad_latents(&refs, d, self.dtype(), &device)?;
            let captions: Vec<&str> = chunk.iter().map(|r| r.caption.as_str()).collect();
            let text = collate_text(&captions, &self.vocab, self.dtype(), &device)?;
            let cond = self.head.encode_caption(&text, Ctx::eval())?;
            let mut field = HeadField::new(&self.head, &cond, &mask, use_cache)?;
            let z = euler_sample(&mut field, &z0, &mask, sampler)?;
            let z = self.stats.denormalize(&z)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
            for (rows, p) in z.into_iter().zip(&priors) {
                out.push(rows.into_iter().take(p.len() / d).flatten().collect());
            }
        }
        Ok(out)
    }

    /// Decodes endpoints into metric motion sequences.
    pub fn decode(&self, latents: &[Vec<f64>], requests: &[GenerationRequest]) -> Result<Vec<MotionSequence>> {
        let vae = &self.config.model.vae;
        let (d, c) = (vae.d_total, vae.channels);
        let device = Device::Cpu;
        let mut out = Vec::with_capacity(requests.len());
        for (lat, reqs) in latents.chunks(GENERATION_BATCH).zip(requests.chunks(GENERATION_BATCH)) {
            let refs: Vec<&[f64]> = lat.iter().map(Vec::as_slice).collect();
            let (z, mask) = pad_latents(&refs, d, self.dtype(), &device)?;
            let frames = z.dim(1)? * vae.stride;
            let x = self.ae.decoder.forward(&z, &mask, frames, Ctx::eval())?;
            let x = x.to_dtype(DType::F32)?.to_vec3::<f32>()?;
            for (rows, r) in x.into_iter().zip(reqs) {
                let flat: Vec<f32> = rows.into_iter().take(r.frames).flatten().collect();
                debug_assert_eq!(flat.len(), r.frames * c);
                let metric = self.info.normalization.denormalize(&flat)?;
                out.push(MotionSequence::full(metric, r.frames, self.info.num_joints, self.info.fps as f32, r.caption.clone())?);
            }
        }
        Ok(out)
    }

    pub fn generate(&self, requests: &[GenerationRequest], sampler: &SamplerConfig) -> Result<Vec<MotionSequence>> {
        let latents = self.sample_latents(requests, sampler, true)?;
        self.decode(&latents, requests)
    }
}

/// Mean joint position error (meters) of posterior-mean reconstructions.
pub fn reconstruction_error(
    ae: &Autoencoder,
    samples: &[Sample],
    norm: &motionflow_core::dataset::Normalization,
    num_joints: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    let c = ae.config.vae.channels;
    for chunk in samples.chunks(GENERATION_BATCH) {
        let items: Vec<&MotionItem> = chunk.iter().map(|s| &s.item).collect();
        let batch = ae.collate(&items)?;
        let recon = ae.reconstruct(&batch)?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        for (rows, s) in recon.into_iter().zip(chunk) {
            let t = s.item.len();
            let pred: Vec<f32> = rows.into_iter().take(t).flatten().collect();
            debug_assert_eq!(pred.len(), t * c);
            let p = norm.denormalize(&pred)?;
            let g = norm.denormalize(&s.item.frames)?;
            let valid = s.item.mask.iter().filter(|&&m| m).count() as f64;
            total += joint_position_error(&p, &g, num_joints, &s.item.mask)? * valid;
            weight += valid;
        }
    }
    Ok(total / weight)
}

/// Ground-truth reference for generation metrics: feature standardizer and
/// retrieval gallery from the training split, standardized test features.
pub struct Reference {
    pub standardizer: FeatureStandardizer,
    pub gallery: RetrievalGallery,
    pub test_features: Vec<Vec<f64>>,
    pub test_labels: Vec<String>,
}

fn sample_features(s: &Sample, norm: &motionflow_core::dataset::Normalization, info: &DataInfo) -> Result<Vec<f64>> {
    let metric = norm.denormalize(&s.item.frames)?;
    Ok(kinematic_features(&metric, info.num_joints, info.fps, &s.item.mask)?)
}

impl Reference {
    pub fn build(data: &TrainData) -> Result<Self> {
        let info = DataInfo::of(data);
        let train: Vec<Vec<f64>> = data.train.iter().map(|s| sample_features(s, &data.normalization, &info)).collect::<Result<_>>()?;
        let standardizer = FeatureStandardizer::fit(&train)?;
        let std_train: Vec<Vec<f64>> = train.iter().map(|f| standardizer.apply(f)).collect();
        let gallery = RetrievalGallery::build(data.train.iter().zip(&std_train).map(|(s, f)| (s.class_label.as_str(), f.as_slice())));
        let test_features =
            data.test.iter().map(|s| Ok(standardizer.apply(&sample_features(s, &data.normalization, &info)?))).collect::<Result<_>>()?;
        Ok(Self { standardizer, gallery, test_features, test_labels: data.test.iter().map(|s| s.class_label.clone()).collect() })
    }

    /// Retrieval of the ground-truth test motions themselves.
    pub fn self_retrieval(&self, seed: u64) -> Result<Vec<f64>> {
        let q: Vec<(String, Vec<f64>)> = self.test_labels.iter().cloned().zip(self.test_features.iter().cloned()).collect();
        Ok(retrieval_precision(&q, &self.gallery, &[1, 2, 3], seed)?)
    }

    pub fn features(&self, m: &MotionSequence) -> Result<Vec<f64>> {
        let f = kinematic_features(m.frames(), m.num_joints(), m.fps as f64, m.valid_mask())?;
        Ok(self.standardizer.apply(&f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Test sequences to generate for (0 = all).
    pub max_items: usize,
    /// Captions used for the multimodality estimate.
    pub mm_groups: usize,
    /// Generations per multimodality caption.
    pub mm_repeats: usize,
    pub pairs: usize,
    pub metric_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { max_items: 0, mm_groups: 10, mm_repeats: 10, pairs: 300, metric_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub fid_desk: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_3: f64,
    pub diversity: f64,
    pub mmodality: f64,
    pub generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe: f64,
    pub fid_desk: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_3: f64,
    pub diversity: f64,
    pub mmodality: f64,
    /// Retrieval of the ground-truth test motions (protocol sanity check).
    pub gt_r_at_3: f64,
    pub steps: usize,
    pub guidance: f64,
    pub generated: usize,
    pub config_hash: String,
}

/// Offset separating multimodality requests from the per-item requests.
const MM_REQUEST_BASE: u64 = 1 << 32;

/// FID, retrieval, diversity and multimodality of generations for the test
/// split.
pub fn generation_metrics(
    p: &Pipeline,
    data: &TrainData,
    reference: &Reference,
    sampler: &SamplerConfig,
    opts: &EvalOptions,
) -> Result<GenerationMetrics> {
    let n = if opts.max_items == 0 { data.test.len() } else { opts.max_items.min(data.test.len()) };
    if n < 2 {
        return Err(ModelError::Validation("evaluation needs at least two test sequences".into()));
    }
    let requests: Vec<GenerationRequest> = data.test[..n]
        .iter()
        .enumerate()
        .map(|(i, s)| GenerationRequest { caption: s.caption.clone(), frames: s.item.len(), request: i as u64 })
        .collect();
    let motions = p.generate(&requests, sampler)?;
    let feats: Vec<Vec<f64>> = motions.iter().map(|m| reference.features(m)).collect::<Result<_>>()?;
    let fid = frechet_distance(&feats, &reference.test_features[..n])?;
    let queries: Vec<(String, Vec<f64>)> = data.test[..n].iter().map(|s| s.class_label.clone()).zip(feats.iter().cloned()).collect();
    let r = retrieval_precision(&queries, &reference.gallery, &[1, 2, 3], opts.metric_seed)?;
    let div = diversity(&feats, opts.pairs, opts.metric_seed)?;

    // One caption per class for the first `mm_groups` distinct classes.
    let mut seen = std::collections::BTreeSet::new();
    let picks: Vec<&Sample> = data.test.iter().filter(|s| seen.insert(s.class_label.clone())).take(opts.mm_groups).collect();
    let mut mm_requests = Vec::new();
    for (g, s) in picks.iter().enumerate() {
        for k in 0..opts.mm_repeats {
            mm_requests.push(GenerationRequest {
                caption: s.caption.clone(),
                frames: s.item.len(),
                request: MM_REQUEST_BASE + (g * opts.mm_repeats + k) as u64,
            });
        }
    }
    let mm = if mm_requests.is_empty() || opts.mm_repeats < 2 {
        0.0
    } else {
        let mm_motions = p.generate(&mm_requests, sampler)?;
        let groups: Vec<Vec<Vec<f64>>> = mm_motions
            .chunks(opts.mm_repeats)
            .map(|c| c.iter().map(|m| reference.features(m)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        multimodality(&groups, opts.pairs, opts.metric_seed)?
    };
    Ok(GenerationMetrics { fid_desk: fid, r_at_1: r[0], r_at_2: r[1], r_at_3: r[2], diversity: div, mmodality: mm, generated: n })
}

/// The full evaluation report for a trained run.
pub fn evaluate(p: &Pipeline, data: &TrainData, sampler: &SamplerConfig, opts: &EvalOptions) -> Result<EvalReport> {
    if DataInfo::of(data) != p.info {
        return Err(ModelError::Config("evaluation data differs from the training data of this run".into()));
    }
    let reference = Reference::build(data)?;
    let mpjpe = reconstruction_error(&p.ae, &data.test, &data.normalization, data.num_joints)?;
    let g = generation_metrics(p, data, &reference, sampler, opts)?;
    let gt = reference.self_retrieval(opts.metric_seed)?;
    Ok(EvalReport {
        mpjpe,
        fid_desk: g.fid_desk,
        r_at_1: g.r_at_1,
        r_at_2: g.r_at_2,
        r_at_3: g.r_at_3,
        diversity: g.diversity,
        mmodality: g.mmodality,
        gt_r_at_3: gt[2],
        steps: sampler.steps,
        guidance: sampler.guidance,
        generated: g.generated,
        config_hash: json_sha256(&p.config)?,
    })
}
