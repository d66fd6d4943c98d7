//! Fine-grained semantic stream with seeded stand-ins for the face backbone
//! and the fusion projection.
//!
//! Token layout of an [`IdEmbedding`]: the first `K` rows come from the local
//! feature rows (one slot per row), the remaining `N - K` rows are separate
//! projections of the global feature vector.

use crate::error::{DviError, Result};
use crate::tensor::{SeededGenerator, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticConfig {
    pub global_dim: usize,
    pub local_tokens: usize,
    pub global_tokens: usize,
    pub embed_dim: usize,
    /// Raw features are clamped to `±clamp_sigma` standard deviations.
    pub clamp_sigma: f32,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            global_dim: 512,
            local_tokens: 4,
            global_tokens: 4,
            embed_dim: 2048,
            clamp_sigma: 4.0,
        }
    }
}

impl SemanticConfig {
    pub fn id_tokens(&self) -> usize {
        self.local_tokens + self.global_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawIdFeatures {
    pub global: Vec<f32>,
    /// K x G.
    pub local: TokenMatrix,
}

impl RawIdFeatures {
    pub fn scaled(&self, a: f32) -> Result<Self> {
        Ok(Self {
            global: self.global.iter().map(|&v| v * a).collect(),
            local: TokenMatrix::new(
                self.local.tokens(),
                self.local.dim(),
                self.local.data().iter().map(|&v| v * a).collect(),
            )?,
        })
    }
}

/// N x D identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdEmbedding(pub TokenMatrix);

impl IdEmbedding {
    pub fn matrix(&self) -> &TokenMatrix {
        &self.0
    }

    pub fn tokens(&self) -> usize {
        self.0.tokens()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// Seeded features for a named identity. Same label and seed give the same
/// features.
pub fn mock_extract(
    label: &str,
    gen: SeededGenerator,
    cfg: &SemanticConfig,
) -> Result<RawIdFeatures> {
    if label.is_empty() {
        return Err(DviError::InvalidArgument(
            "identity label must not be empty".into(),
        ));
    }
    if cfg.global_dim == 0 || cfg.local_tokens == 0 {
        return Err(DviError::InvalidDims(
            "feature dims must be positive".into(),
        ));
    }
    let sub = gen.derive(&format!("identity:{label}"));
    let g = cfg.global_dim;
    let k = cfg.local_tokens;
    let clamp = cfg.clamp_sigma;
    let mut values = sub.gaussian(g + k * g, 1.0);
    for v in &mut values {
        *v = v.clamp(-clamp, clamp);
    }
    let local = values.split_off(g);
    Ok(RawIdFeatures {
        global: values,
        local: TokenMatrix::new(k, g, local)?,
    })
}

/// Frozen per-slot `D x G` maps plus the shared offset vector.
#[derive(Debug, Clone)]
pub struct FrozenProjection {
    slots: Vec<TokenMatrix>,
    local_slots: usize,
    offset: Vec<f32>,
}

impl FrozenProjection {
    pub fn seeded(gen: SeededGenerator, cfg: &SemanticConfig) -> Result<Self> {
        let (g, d) = (cfg.global_dim, cfg.embed_dim);
        if g == 0 || d == 0 || cfg.id_tokens() == 0 {
            return Err(DviError::InvalidDims(
                "projection dims must be positive".into(),
            ));
        }
        let scale = 1.0 / (g as f32).sqrt();
        let slots = (0..cfg.id_tokens())
            .map(|r| {
                let w = gen.derive(&format!("proj:slot{r}")).gaussian(d * g, scale);
                TokenMatrix::new(d, g, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let offset = gen
            .derive("proj:offset")
            .gaussian(d, 0.01 / (d as f32).sqrt());
        Ok(Self {
            slots,
            local_slots: cfg.local_tokens,
            offset,
        })
    }

    /// Square identity maps with zero offset (requires G = D).
    pub fn identity(dim: usize, local_slots: usize, global_slots: usize) -> Result<Self> {
        let mut eye = vec![0.0f32; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        let eye = TokenMatrix::new(dim, dim, eye)?;
        Ok(Self {
            slots: vec![eye; local_slots + global_slots],
            local_slots,
            offset: vec![0.0; dim],
        })
    }

    pub fn with_offset(mut self, offset: Vec<f32>) -> Result<Self> {
        if offset.len() != self.embed_dim() {
            return Err(DviError::mismatch(
                "offset length",
                self.embed_dim(),
                offset.len(),
            ));
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn embed_dim(&self) -> usize {
        self.offset.len()
    }

    pub fn input_dim(&self) -> usize {
        self.slots[0].dim()
    }

    pub fn local_slots(&self) -> usize {
        self.local_slots
    }

    pub fn slot(&self, r: usize) -> &TokenMatrix {
        &self.slots[r]
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn offset(&self) -> &[f32] {
        &self.offset
    }
}

/// `f_id = Proj(F_raw) + offset`, one slot per output token.
pub fn fuse_project(raw: &RawIdFeatures, proj: &FrozenProjection) -> Result<IdEmbedding> {
    let g = proj.input_dim();
    if raw.global.len() != g {
        return Err(DviError::mismatch(
            "global feature length",
            g,
            raw.global.len(),
        ));
    }
    if raw.local.dim() != g {
        return Err(DviError::mismatch(
            "local feature width",
            g,
            raw.local.dim(),
        ));
    }
    if raw.local.tokens() != proj.local_slots {
        return Err(DviError::mismatch(
            "local token count",
            proj.local_slots,
            raw.local.tokens(),
        ));
    }
    let d = proj.embed_dim();
    let mut out = Vec::with_capacity(proj.slot_count() * d);
    for (r, w) in proj.slots.iter().enumerate() {
        let src = if r < proj.local_slots {
            raw.local.row(r)
        } else {
            &raw.global
        };
        for (row, &off) in w.rows().zip(&proj.offset) {
            let acc: f64 = row
                .iter()
                .zip(src)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            out.push((acc + off as f64) as f32);
        }
    }
    Ok(IdEmbedding(TokenMatrix::new(proj.slot_count(), d, out)?))
}

/// Full semantic stream for a label: seeded features through a frozen
/// projection drawn from the same seed.
pub fn identity_embedding(label: &str, seed: u64, cfg: &SemanticConfig) -> Result<IdEmbedding> {
    let gen = SeededGenerator::new(seed);
    let raw = mock_extract(label, gen, cfg)?;
    let proj = FrozenProjection::seeded(gen.derive("projection"), cfg)?;
    fuse_project(&raw, &proj)
}
