//! Padding variable-length motion and caption data into batch tensors.

use candle_core::{DType, Device, Tensor};

use crate::error::{ModelError, Result};
use motionflow_core::vocab::{Vocabulary, PAD_ID};

/// One normalized motion: `frames` is `T × C`, `mask` has length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionItem {
    pub frames: Vec<f32>,
    pub mask: Vec<bool>,
}

impl MotionItem {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Padded motion batch.
pub struct MotionBatch {
    /// `[B, T_pad, C]`, zero beyond each sequence.
    pub x: Tensor,
    /// `[B, T_pad]`.
    pub frame_mask: Tensor,
    /// `[B, n_pad]`; a latent step is valid when any frame of its window is.
    pub latent_mask: Tensor,
    pub frames: usize,
    pub lengths: Vec<usize>,
    pub latent_lengths: Vec<usize>,
}

pub fn collate(items: &[&MotionItem], channels: usize, stride: usize, dtype: DType, device: &Device) -> Result<MotionBatch> {
    if items.is_empty() {
        return Err(ModelError::Validation("empty batch".into()));
    }
    for it in items {
        if it.frames.len() != it.mask.len() * channels || it.is_empty() {
            return Err(ModelError::Shape(format!("motion item with {} values and {} frames", it.frames.len(), it.len())));
        }
    }
    let t_max = items.iter().map(|i| i.len()).max().unwrap();
    let n_pad = t_max.div_ceil(stride);
    let t_pad = n_pad * stride;
    let b = items.len();
    let mut x = vec![0f32; b * t_pad * channels];
    let mut fm = vec![0f32; b * t_pad];
    let mut lm = vec![0f32; b * n_pad];
    for (i, it) in items.iter().enumerate() {
        x[i * t_pad * channels..i * t_pad * channels + it.frames.len()].copy_from_slice(&it.frames);
        for (t, &m) in it.mask.iter().enumerate() {
            if m {
                fm[i * t_pad + t] = 1.0;
                lm[i * n_pad + t / stride] = 1.0;
            }
        }
    }
    let lengths: Vec<usize> = items.iter().map(|i| i.len()).collect();
    let latent_lengths = lengths.iter().map(|t| t.div_ceil(stride)).collect();
    Ok(MotionBatch {
        x: Tensor::from_vec(x, (b, t_pad, channels), device)?.to_dtype(dtype)?,
        frame_mask: Tensor::from_vec(fm, (b, t_pad), device)?.to_dtype(dtype)?,
        latent_mask: Tensor::from_vec(lm, (b, n_pad), device)?.to_dtype(dtype)?,
        frames: t_pad,
        lengths,
        latent_lengths,
    })
}

/// Padded caption batch: ids `[B, L]` (u32) and mask `[B, L]`.
pub struct TextBatch {
    pub ids: Tensor,
    pub mask: Tensor,
}

pub fn collate_text(captions: &[&str], vocab: &Vocabulary, dtype: DType, device: &Device) -> Result<TextBatch> {
    let encoded: Vec<Vec<u32>> = captions.iter().map(|c| vocab.encode(c)).collect::<std::result::Result<_, _>>()?;
    let len = encoded.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let b = captions.len();
    let mut ids = vec![PAD_ID; b * len];
    let mut mask = vec![0f32; b * len];
    for (i, e) in encoded.iter().enumerate() {
        ids[i * len..i * len + e.len()].copy_from_slice(e);
        mask[i * len..i * len + e.len()].iter_mut().for_each(|m| *m = 1.0);
    }
    Ok(TextBatch { ids: Tensor::from_vec(ids, (b, len), device)?, mask: Tensor::from_vec(mask, (b, len), device)?.to_dtype(dtype)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collate_pads_and_masks() {
        let a = MotionItem { frames: vec![1.0; 5 * 2], mask: vec![true; 5] };
        let b = MotionItem { frames: vec![2.0; 9 * 2], mask: vec![true; 9] };
        let batch = collate(&[&a, &b], 2, 4, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(batch.x.dims(), [2, 12, 2]);
        assert_eq!(batch.latent_lengths, vec![2, 3]);
        let lm = batch.latent_mask.to_vec2::<f32>().unwrap();
        assert_eq!(lm, vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]]);
    }

    #[test]
    fn text_batch_pads() {
        let v = Vocabulary::desk();
        let t = collate_text(&["a person jumps in place once", "someone walks"], &v, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.ids.dims(), [2, 6]);
        assert_eq!(t.mask.to_vec2::<f32>().unwrap()[1], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
