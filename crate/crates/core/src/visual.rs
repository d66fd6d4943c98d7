//! Coarse-grained visual stream: aspect-preserving crop geometry, a seeded
//! stand-in encoder, and per-channel latent statistics.

use serde::{Deserialize, Serialize};

use crate::error::{DviError, Result};
use crate::tensor::{LatentTensor, SeededGenerator};

pub const DEFAULT_STATS_EPS: f64 = 1e-6;

/// Resize-then-center-crop geometry. Scaling is by the shorter edge so that
/// it lands exactly on `target`; the crop then takes a centered square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub src_h: usize,
    pub src_w: usize,
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub crop_top: usize,
    pub crop_left: usize,
    pub target: usize,
}

/// `round(len * target / short)` with halves rounded up, in exact integers.
fn scale_len(len: usize, target: usize, short: usize) -> usize {
    let num = 2 * len as u128 * target as u128 + short as u128;
    (num / (2 * short as u128)) as usize
}

pub fn plan_crop(src_h: usize, src_w: usize, target: usize) -> Result<CropPlan> {
    if src_h == 0 || src_w == 0 || target == 0 {
        return Err(DviError::InvalidDims(format!(
            "crop plan needs positive dims, got {src_h}x{src_w} -> {target}"
        )));
    }
    let short = src_h.min(src_w);
    let scaled_h = if src_h == short {
        target
    } else {
        scale_len(src_h, target, short)
    };
    let scaled_w = if src_w == short {
        target
    } else {
        scale_len(src_w, target, short)
    };
    Ok(CropPlan {
        src_h,
        src_w,
        scaled_h,
        scaled_w,
        crop_top: (scaled_h - target) / 2,
        crop_left: (scaled_w - target) / 2,
        target,
    })
}

/// Row-stochastic `out x in` channel mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    out_channels: usize,
    in_channels: usize,
    weights: Vec<f64>,
}

impl MixingMatrix {
    /// Positive seeded entries, each row normalized to sum to 1.
    pub fn seeded(gen: SeededGenerator, out_channels: usize, in_channels: usize) -> Self {
        let raw = gen.uniform(out_channels * in_channels, 0.05, 1.0);
        let mut weights = Vec::with_capacity(raw.len());
        for row in raw.chunks_exact(in_channels) {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            weights.extend(row.iter().map(|&v| v as f64 / total));
        }
        Self {
            out_channels,
            in_channels,
            weights,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self {
            out_channels: n,
            in_channels: n,
            weights,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.in_channels..(o + 1) * self.in_channels]
    }
}

/// Deterministic surrogate for a VAE encoder: crop, `f x f` block average,
/// then a fixed 3 -> `out_channels` linear mix.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    pub factor: usize,
    pub mixing: MixingMatrix,
}

impl MockEncoder {
    pub const DEFAULT_FACTOR: usize = 8;

    pub fn new(out_channels: usize, factor: usize, mix_seed: u64) -> Self {
        Self {
            factor,
            mixing: MixingMatrix::seeded(SeededGenerator::new(mix_seed), out_channels, 3),
        }
    }

    pub fn encode(&self, pixels: &LatentTensor, plan: &CropPlan) -> Result<LatentTensor> {
        let (c, h, w) = pixels.shape();
        if c != 3 || self.mixing.in_channels != 3 {
            return Err(DviError::mismatch("pixel channels", 3, c));
        }
        if (h, w) != (plan.scaled_h, plan.scaled_w) {
            return Err(DviError::mismatch(
                "pixel grid (scaled_h x scaled_w)",
                format!("{}x{}", plan.scaled_h, plan.scaled_w),
                format!("{h}x{w}"),
            ));
        }
        let f = self.factor;
        if f == 0 || !plan.target.is_multiple_of(f) {
            return Err(DviError::InvalidDims(format!(
                "crop side {} is not divisible by factor {f}",
                plan.target
            )));
        }
        let side = plan.target / f;
        let area = (f * f) as f64;

        let mut means = vec![0.0f64; 3 * side * side];
        for k in 0..3 {
            for bi in 0..side {
                for bj in 0..side {
                    let mut acc = 0.0f64;
                    for di in 0..f {
                        for dj in 0..f {
                            let i = plan.crop_top + bi * f + di;
                            let j = plan.crop_left + bj * f + dj;
                            acc += pixels.get(k, i, j) as f64;
                        }
                    }
                    means[(k * side + bi) * side + bj] = acc / area;
                }
            }
        }

        let out_c = self.mixing.out_channels;
        let plane = side * side;
        let mut data = Vec::with_capacity(out_c * plane);
        for o in 0..out_c {
            let mix = self.mixing.row(o);
            for p in 0..plane {
                let v: f64 = (0..3).map(|k| mix[k] * means[k * plane + p]).sum();
                data.push(v as f32);
            }
        }
        LatentTensor::new(out_c, side, side, data)
    }
}

/// Per-channel spatial mean and standard deviation of a latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualContext {
    #[serde(rename = "C")]
    pub channels: usize,
    pub eps: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl VisualContext {
    /// `mu` followed by `sigma`, length `2C`.
    pub fn v_ctx(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.channels);
        v.extend_from_slice(&self.mu);
        v.extend_from_slice(&self.sigma);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(DviError::InvalidDims("visual context needs C >= 1".into()));
        }
        if self.mu.len() != self.channels {
            return Err(DviError::mismatch(
                "mu length",
                self.channels,
                self.mu.len(),
            ));
        }
        if self.sigma.len() != self.channels {
            return Err(DviError::mismatch(
                "sigma length",
                self.channels,
                self.sigma.len(),
            ));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(DviError::InvalidArgument(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        if !self.mu.iter().chain(&self.sigma).all(|v| v.is_finite()) {
            return Err(DviError::NonFinite("visual context"));
        }
        if self.sigma.iter().any(|&s| s <= 0.0) {
            return Err(DviError::InvalidArgument(
                "sigma entries must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ctx: Self = serde_json::from_str(s)?;
        ctx.validate()?;
        Ok(ctx)
    }
}

/// Population mean and `sqrt(var + eps)` per channel, accumulated in f64.
pub fn extract_stats(z: &LatentTensor, eps: f64) -> Result<VisualContext> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(DviError::InvalidArgument(format!(
            "eps must be > 0, got {eps}"
        )));
    }
    let n = (z.height() * z.width()) as f64;
    let mut mu = Vec::with_capacity(z.channels());
    let mut sigma = Vec::with_capacity(z.channels());
    for c in 0..z.channels() {
        let plane = z.channel(c);
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        mu.push(mean);
        sigma.push((var + eps).sqrt());
    }
    Ok(VisualContext {
        channels: z.channels(),
        eps,
        mu,
        sigma,
    })
}
