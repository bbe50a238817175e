//! The hybrid autoencoder: encoder, token and continuous branches, coupling
//! and decoder, plus the EMA teacher used for distillation.
//!
//! With `vae.d_q = 0` the token branch is absent and the model reduces to the
//! latent-only configuration: the coupling sees the continuous latent alone.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::{collate, MotionBatch, MotionItem};
use crate::checkpoint::{insert_namespace, namespace};
use crate::coupling::{Coupling, CouplingConfig};
use crate::distill::{
    batch_mean, distillation_loss, make_views, student_log_distribution, teacher_distribution, DistillConfig, ProjectionHead,
};
use crate::error::{ModelError, Result};
use crate::losses::{kinematic_terms, masked_mse, Denormalizer};
use crate::nn::{masked_mean, Ctx};
use crate::params::ParamStore;
use crate::rvq::{QuantOutput, Quantizer, RvqConfig};
use crate::vae::{split_latent, Decoder, Encoder, Posterior, VaeConfig};
use motionflow_core::rng::{substream_seed, Rng};

pub const STUDENT_PREFIXES: [&str; 4] = ["enc.", "dec.", "coup.", "proj."];
pub const TEACHER_PREFIXES: [&str; 2] = ["enc.", "proj."];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub vae: VaeConfig,
    pub rvq: RvqConfig,
    pub coupling: CouplingConfig,
    pub distill: DistillConfig,
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        if self.vae.d_q > 0 {
            self.rvq.validate()?;
        }
        self.distill.validate()
    }

    /// The same configuration without the token branch.
    pub fn latent_only(&self) -> Self {
        let mut c = self.clone();
        c.vae.d_q = 0;
        c
    }
}

/// Generation endpoint for a batch.
pub struct Endpoint {
    /// `[B, n, d_total]`.
    pub z_gt: Tensor,
    pub quant: Option<QuantOutput>,
    /// Pre-quantization token features `[B, n, d_q]`.
    pub z_q: Option<Tensor>,
}

/// Stage-1 loss components. `commit` and `dis` are zero when their branch is
/// inactive.
pub struct Stage1Terms {
    pub rec: Tensor,
    pub commit: Tensor,
    pub fk: Tensor,
    pub kl: Tensor,
    pub dis: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Weights {
    pub rec: f64,
    pub commit: f64,
    pub fk: f64,
    pub kl: f64,
    pub dis: f64,
}

impl Stage1Terms {
    /// `rec·w_rec + commit·w_commit + fk·w_fk + kl·w_kl + dis·w_dis`.
    pub fn composite(&self, w: &Stage1Weights) -> Result<Tensor> {
        let parts = [(&self.rec, w.rec), (&self.commit, w.commit), (&self.fk, w.fk), (&self.kl, w.kl), (&self.dis, w.dis)];
        let mut total = (self.rec.zeros_like())?;
        for (t, wt) in parts {
            total = (total + (t * wt)?)?;
        }
        Ok(total)
    }
}

/// Distillation loss on one batch plus the teacher statistics needed for the
/// center update.
pub struct DistillOutput {
    pub loss: Tensor,
    pub teacher_mean: Vec<f64>,
}

pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub store: ParamStore,
    pub teacher_store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub coupling: Coupling,
    pub proj: ProjectionHead,
    pub teacher_encoder: Encoder,
    pub teacher_proj: ProjectionHead,
    pub quantizer: Option<Quantizer>,
    pub center: Vec<f64>,
}

impl Autoencoder {
    pub fn new(config: &AutoencoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let init = substream_seed(seed, "init", &[1]);
        let store = ParamStore::new(init, dtype, device);
        // Same init seed: the teacher starts as an exact copy of the student.
        let teacher_store = ParamStore::new(init, dtype, device);
        let vae = &config.vae;
        let d = &config.distill;
        let build_proj = |s: &ParamStore| ProjectionHead::new(&s.scope("proj"), vae.d_c(), d.head_hidden, d.head_out);
        let quantizer = if vae.d_q > 0 { Some(Quantizer::new(config.rvq.clone(), vae.d_q)?) } else { None };
        Ok(Self {
            encoder: Encoder::new(&store.scope("enc"), vae)?,
            decoder: Decoder::new(&store.scope("dec"), vae)?,
            coupling: Coupling::new(&store.scope("coup"), &config.coupling, vae.d_q, vae.d_c())?,
            proj: build_proj(&store)?,
            teacher_encoder: Encoder::new(&teacher_store.scope("enc"), vae)?,
            teacher_proj: build_proj(&teacher_store)?,
            quantizer,
            center: vec![0.0; d.head_out],
            config: config.clone(),
            store,
            teacher_store,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device()
    }

    pub fn collate(&self, items: &[&MotionItem]) -> Result<MotionBatch> {
        collate(items, self.config.vae.channels, self.config.vae.stride, self.dtype(), &self.device())
    }

    pub fn encode(&self, batch: &MotionBatch, ctx: Ctx) -> Result<Posterior> {
        self.encoder.forward(&batch.x, &batch.frame_mask, &batch.latent_mask, ctx)
    }

    /// Splits `z`, quantizes the token part and couples both parts.
    pub fn endpoint(&self, z: &Tensor, latent_lengths: &[usize]) -> Result<Endpoint> {
        match &self.quantizer {
            None => Ok(Endpoint { z_gt: self.coupling.forward(None, z)?, quant: None, z_q: None }),
            Some(q) => {
                let (z_q, z_c) = split_latent(z, self.config.vae.d_q)?;
                let out = q.quantize(&z_q, latent_lengths)?;
                let z_gt = self.coupling.forward(Some(&out.z_q_hat), &z_c)?;
                Ok(Endpoint { z_gt, quant: Some(out), z_q: Some(z_q) })
            }
        }
    }

    pub fn decode(&self, z_gt: &Tensor, batch: &MotionBatch, ctx: Ctx) -> Result<Tensor> {
        self.decoder.forward(z_gt, &batch.latent_mask, batch.frames, ctx)
    }

    /// Deterministic endpoint from the posterior mean.
    pub fn mean_endpoint(&self, batch: &MotionBatch) -> Result<Tensor> {
        let post = self.encode(batch, Ctx::eval())?;
        Ok(self.endpoint(&post.mu, &batch.latent_lengths)?.z_gt)
    }

    /// Encode with the posterior mean, quantize, couple and decode.
    pub fn reconstruct(&self, batch: &MotionBatch) -> Result<Tensor> {
        let z = self.mean_endpoint(batch)?;
        self.decode(&z, batch, Ctx::eval())
    }

    /// Stage-1 losses for a batch. `z` is the sampled latent, `dis` the
    /// distillation loss (if computed this step).
    pub fn stage1_terms(
        &self,
        batch: &MotionBatch,
        post: &Posterior,
        z: &Tensor,
        dis: Option<Tensor>,
        denorm: &Denormalizer,
        ctx: Ctx,
    ) -> Result<(Stage1Terms, Endpoint)> {
        let ep = self.endpoint(z, &batch.latent_lengths)?;
        let recon = self.decode(&ep.z_gt, batch, ctx)?;
        let target = batch.x.narrow(1, 0, batch.frames)?;
        let rec = masked_mse(&recon, &target, &batch.frame_mask)?;
        let kin = kinematic_terms(&denorm.apply(&recon)?, &denorm.apply(&target)?, &batch.frame_mask)?;
        let zero = rec.zeros_like()?;
        let commit = match &ep.quant {
            Some(q) => q.commit_total()?,
            None => zero.clone(),
        };
        let terms = Stage1Terms { rec, commit, fk: kin.fk, kl: post.kl(&batch.latent_mask)?, dis: dis.unwrap_or(zero) };
        Ok((terms, ep))
    }

    fn pooled_logits(&self, enc: &Encoder, proj: &ProjectionHead, batch: &MotionBatch, ctx: Ctx) -> Result<Tensor> {
        let post = enc.forward(&batch.x, &batch.frame_mask, &batch.latent_mask, ctx)?;
        let z_c = match self.config.vae.d_q {
            0 => post.mu,
            d_q => split_latent(&post.mu, d_q)?.1,
        };
        proj.forward(&masked_mean(&z_c, &batch.latent_mask)?)
    }

    /// Multi-view distillation on `items`. Views are drawn from `rng`; the
    /// teacher sees the global views only and carries no gradient.
    pub fn distill(&self, items: &[&MotionItem], rng: &mut Rng, ctx: Ctx) -> Result<DistillOutput> {
        let cfg = &self.config.distill;
        let c = self.config.vae.channels;
        let sets = items.iter().map(|it| make_views(it, c, &cfg.views, rng)).collect::<Result<Vec<_>>>()?;
        let s = items.len();
        let n_views = cfg.views.n_global + cfg.views.n_local;
        // View-major ordering: rows [v*s, (v+1)*s) belong to view v.
        let mut student_items = Vec::with_capacity(n_views * s);
        for v in 0..n_views {
            for set in &sets {
                let view = if v < cfg.views.n_global { &set.global[v] } else { &set.local[v - cfg.views.n_global] };
                student_items.push(&view.item);
            }
        }
        let student = self.pooled_logits(&self.encoder, &self.proj, &self.collate(&student_items)?, ctx)?;
        let n_teacher = cfg.views.n_global * s;
        let teacher = self
            .pooled_logits(&self.teacher_encoder, &self.teacher_proj, &self.collate(&student_items[..n_teacher])?, Ctx::eval())?
            .detach();
        let k = self.center.len();
        let center = Tensor::from_vec(self.center.clone(), (1, k), &self.device())?.to_dtype(self.dtype())?;
        let teacher_p = (0..cfg.views.n_global)
            .map(|v| teacher_distribution(&teacher.narrow(0, v * s, s)?, &center, cfg.tau_teacher))
            .collect::<Result<Vec<_>>>()?;
        let student_lp =
            (0..n_views).map(|v| student_log_distribution(&student.narrow(0, v * s, s)?, cfg.tau_student)).collect::<Result<Vec<_>>>()?;
        Ok(DistillOutput { loss: distillation_loss(&teacher_p, &student_lp)?, teacher_mean: batch_mean(&teacher)? })
    }

    /// Parameter tensors for a checkpoint (`model/…`, `teacher/…`).
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        insert_namespace(&mut out, "model", self.store.snapshot()?);
        insert_namespace(&mut out, "teacher", self.teacher_store.snapshot()?);
        Ok(out)
    }

    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.load_values(&namespace(tensors, "model"), &[""])?;
        self.teacher_store.load_values(&namespace(tensors, "teacher"), &[""])
    }

    /// Restores host-side state saved alongside the tensors.
    pub fn load_host_state(&mut self, codebook: Option<crate::rvq::Codebook>, center: Option<Vec<f64>>) -> Result<()> {
        match (&mut self.quantizer, codebook) {
            (Some(q), Some(cb)) => {
                if cb.dim != q.codebook.dim || cb.size != q.codebook.size {
                    return Err(ModelError::Checkpoint(format!(
                        "codebook {}x{} does not match configuration {}x{}",
                        cb.size, cb.dim, q.codebook.size, q.codebook.dim
                    )));
                }
                q.codebook = cb;
            }
            (Some(_), None) => return Err(ModelError::Checkpoint("checkpoint has no codebook".into())),
            (None, Some(_)) => return Err(ModelError::Checkpoint("checkpoint has a codebook but the token branch is disabled".into())),
            (None, None) => {}
        }
        if let Some(c) = center {
            if c.len() != self.center.len() {
                return Err(ModelError::Checkpoint("distillation center width mismatch".into()));
            }
            self.center = c;
        }
        Ok(())
    }
}
