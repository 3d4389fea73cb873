//! Frozen mock encoders and channel-wise fusion of their outputs.
//!
//! Each encoder frames the waveform with its own window and stride and maps
//! every frame through a fixed random projection, so the three outputs have
//! different lengths. Fusion zero-pads them along time to the longest output
//! in the batch and concatenates along channels.

use usam_numerics::{ParamStore, Tensor};

use crate::config::{EncoderConfig, ModelConfig};
use crate::error::{Result, UsamError};
use crate::nn::Init;

pub fn proj_name(index: usize) -> String {
    format!("encoder.{index}.proj")
}

#[derive(Clone, Debug)]
pub struct MockEncoder {
    pub window: usize,
    pub stride: usize,
    /// `[window, dim]`
    pub proj: Tensor,
}

impl MockEncoder {
    pub fn dim(&self) -> usize {
        self.proj.shape()[1]
    }

    /// Number of complete frames in a waveform of `len` samples.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| (len - self.window) / self.stride + 1)
    }

    /// Frames `samples` and projects each frame: `[T_i, dim]`.
    pub fn encode(&self, samples: &[f64]) -> Result<Tensor> {
        let frames = self.output_len(samples.len()).ok_or_else(|| {
            UsamError::arg(format!(
                "waveform of {} samples is shorter than the encoder window {}",
                samples.len(),
                self.window
            ))
        })?;
        let dim = self.dim();
        let proj = self.proj.data();
        let mut out = vec![0.0; frames * dim];
        for t in 0..frames {
            let frame = &samples[t * self.stride..t * self.stride + self.window];
            let row = &mut out[t * dim..(t + 1) * dim];
            for (k, &s) in frame.iter().enumerate() {
                for (o, &p) in row.iter_mut().zip(&proj[k * dim..(k + 1) * dim]) {
                    *o += s * p;
                }
            }
        }
        Ok(Tensor::new(vec![frames, dim], out)?)
    }
}

/// The three encoders in fixed order; a slot is `None` when its configured
/// dim is zero.
#[derive(Clone, Debug)]
pub struct EncoderBank {
    pub encoders: [Option<MockEncoder>; 3],
}

/// Registers frozen projections with std `1/sqrt(window)`.
pub fn init(init: &mut Init, config: &ModelConfig) -> Result<()> {
    for (i, e) in config.encoders.iter().enumerate() {
        if e.dim > 0 {
            init.normal(&proj_name(i), &[e.window, e.dim], 1.0 / (e.window as f64).sqrt(), false)?;
        }
    }
    Ok(())
}

impl EncoderBank {
    pub fn from_store(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let build = |i: usize, e: &EncoderConfig| -> Result<Option<MockEncoder>> {
            if e.dim == 0 {
                return Ok(None);
            }
            Ok(Some(MockEncoder {
                window: e.window,
                stride: e.stride,
                proj: store.value(&proj_name(i))?.clone(),
            }))
        };
        Ok(Self {
            encoders: [
                build(0, &config.encoders[0])?,
                build(1, &config.encoders[1])?,
                build(2, &config.encoders[2])?,
            ],
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.encoders.iter().flatten().map(MockEncoder::dim).sum()
    }

    /// Encodes a batch and fuses the outputs. Encoders flagged in `zeroed`
    /// keep their valid lengths but contribute all-zero channels.
    pub fn encode_all(&self, batch: &[&[f64]], zeroed: [bool; 3]) -> Result<FusedFeatures> {
        if batch.is_empty() {
            return Err(UsamError::arg("empty batch"));
        }
        let mut outputs = Vec::with_capacity(batch.len());
        for samples in batch {
            let per: Vec<Option<Tensor>> = self
                .encoders
                .iter()
                .map(|e| e.as_ref().map(|e| e.encode(samples)).transpose())
                .collect::<Result<_>>()?;
            outputs.push(per);
        }
        let lengths: Vec<[usize; 3]> = outputs
            .iter()
            .map(|per| {
                let mut l = [0; 3];
                for (slot, t) in l.iter_mut().zip(per) {
                    *slot = t.as_ref().map_or(0, |t| t.shape()[0]);
                }
                l
            })
            .collect();
        let frames = lengths.iter().flatten().copied().max().unwrap_or(0);
        let d_u = self.fused_dim();
        let b = batch.len();
        let mut values = vec![0.0; b * frames * d_u];
        let mut mask = vec![0.0; b * frames];
        for (bi, per) in outputs.iter().enumerate() {
            let mut offset = 0;
            for (ei, out) in per.iter().enumerate() {
                let Some(out) = out else { continue };
                let dim = out.shape()[1];
                if !zeroed[ei] {
                    for t in 0..out.shape()[0] {
                        let dst = (bi * frames + t) * d_u + offset;
                        values[dst..dst + dim].copy_from_slice(out.row(t));
                    }
                }
                offset += dim;
            }
            let valid = lengths[bi].iter().copied().max().unwrap_or(0);
            for m in &mut mask[bi * frames..bi * frames + valid] {
                *m = 1.0;
            }
        }
        Ok(FusedFeatures {
            values: Tensor::new(vec![b, frames, d_u], values)?,
            mask: Tensor::new(vec![b, frames], mask)?,
            lengths,
        })
    }
}

/// Padded, channel-concatenated encoder outputs.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    /// `[B, T, d1 + d2 + d3]`
    pub values: Tensor,
    /// `[B, T]`, 1 where at least one encoder has a frame.
    pub mask: Tensor,
    /// Per example, valid length of each encoder (0 for absent encoders).
    pub lengths: Vec<[usize; 3]>,
}

impl FusedFeatures {
    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Valid frame count of example `b`.
    pub fn valid_frames(&self, b: usize) -> usize {
        self.lengths[b].iter().copied().max().unwrap_or(0)
    }
}
