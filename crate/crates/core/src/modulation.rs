//! Parameter-free feature modulation: tile the visual descriptor up to the
//! embedding width, layer-normalize each identity token (no affine), and add
//! the tiled descriptor as a shared bias scaled by `lambda * psi`.
//!
//! Fused values are held in f64. Both summands are f32 quantities (the
//! normalized token and the f32-rounded bias), so the f64 sum is exact unless
//! the two differ by more than 29 binary orders of magnitude, and subtracting
//! the bias back out recovers the normalized token bit for bit.

use serde::Serialize;

use crate::error::{DviError, Result};
use crate::semantic::IdEmbedding;
use crate::tensor::TokenMatrix;

pub const DEFAULT_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_PSI: f64 = 0.5;

/// `v_ctx` tiled and truncated to length D.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationVector {
    values: Vec<f64>,
}

impl ModulationVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `m[i] = v_ctx[i mod 2C]` for `i < D`.
pub fn broadcast(v_ctx: &[f64], dim: usize) -> Result<ModulationVector> {
    if v_ctx.is_empty() || dim == 0 {
        return Err(DviError::InvalidDims(format!(
            "broadcast needs non-empty v_ctx and D >= 1 (got {} -> {dim})",
            v_ctx.len()
        )));
    }
    let values = v_ctx.iter().copied().cycle().take(dim).collect();
    Ok(ModulationVector { values })
}

/// Affine-free layer norm of one token, with population variance.
pub fn token_norm(row: &[f32], eps_norm: f64) -> Result<Vec<f32>> {
    if row.len() < 2 {
        return Err(DviError::InvalidDims(format!(
            "token_norm needs D >= 2, got {}",
            row.len()
        )));
    }
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps_norm).sqrt();
    Ok(row
        .iter()
        .map(|&v| round_toward_zero((v as f64 - mean) * inv))
        .collect())
}

/// Narrows to f32 without increasing magnitude, so the stored row never has a
/// larger spread than the exact one.
fn round_toward_zero(x: f64) -> f32 {
    let r = x as f32;
    if (r as f64).abs() > x.abs() {
        f32::from_bits(r.to_bits() - 1)
    } else {
        r
    }
}

/// Token-wise normalized identity embedding. Independent of the timestep, so
/// it is computed once and reused for every fused step.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedId(TokenMatrix);

impl NormalizedId {
    pub fn new(id: &IdEmbedding, eps_norm: f64) -> Result<Self> {
        let m = id.matrix();
        let mut data = Vec::with_capacity(m.data().len());
        for row in m.rows() {
            data.extend(token_norm(row, eps_norm)?);
        }
        Ok(Self(TokenMatrix::new(m.tokens(), m.dim(), data)?))
    }

    pub fn matrix(&self) -> &TokenMatrix {
        &self.0
    }
}

/// Output of [`pffm`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding {
    tokens: usize,
    dim: usize,
    values: Vec<f64>,
    bias: Vec<f32>,
    pub lambda_applied: f64,
    pub psi_coeff: f64,
}

impl FusedEmbedding {
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    /// The bias added to every token: `(lambda * psi) * m_vis`, rounded to f32.
    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Rounds to 32-bit storage.
    pub fn to_token_matrix(&self) -> Result<TokenMatrix> {
        TokenMatrix::new(
            self.tokens,
            self.dim,
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Mean and population variance over all entries.
    pub fn moments(&self) -> (f64, f64) {
        moments(self.values.iter().copied())
    }
}

pub(crate) fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn check_lambda(lambda_t: f64, psi: f64) -> Result<()> {
    if !(lambda_t >= 0.0 && lambda_t.is_finite()) {
        return Err(DviError::InvalidArgument(format!(
            "lambda must be >= 0, got {lambda_t}"
        )));
    }
    if !psi.is_finite() {
        return Err(DviError::InvalidArgument(format!(
            "psi must be finite, got {psi}"
        )));
    }
    Ok(())
}

/// Fuses a pre-normalized embedding with the modulation vector.
pub fn pffm_normalized(
    norm: &NormalizedId,
    m_vis: &ModulationVector,
    lambda_t: f64,
    psi: f64,
) -> Result<FusedEmbedding> {
    check_lambda(lambda_t, psi)?;
    let m = norm.matrix();
    if m.dim() != m_vis.len() {
        return Err(DviError::mismatch(
            "modulation length",
            m.dim(),
            m_vis.len(),
        ));
    }
    let scale = lambda_t * psi;
    let bias: Vec<f32> = m_vis.values().iter().map(|&v| (scale * v) as f32).collect();
    if bias.iter().any(|b| !b.is_finite()) {
        return Err(DviError::NonFinite("modulation bias"));
    }
    let mut values = Vec::with_capacity(m.data().len());
    for row in m.rows() {
        values.extend(row.iter().zip(&bias).map(|(&x, &b)| x as f64 + b as f64));
    }
    Ok(FusedEmbedding {
        tokens: m.tokens(),
        dim: m.dim(),
        values,
        bias,
        lambda_applied: lambda_t,
        psi_coeff: psi,
    })
}

/// `Norm(f_id) + lambda * psi * m_vis`, row by row.
pub fn pffm(
    f_id: &IdEmbedding,
    m_vis: &ModulationVector,
    lambda_t: f64,
    psi: f64,
    eps_norm: f64,
) -> Result<FusedEmbedding> {
    check_lambda(lambda_t, psi)?;
    if f_id.dim() != m_vis.len() {
        return Err(DviError::mismatch(
            "modulation length",
            f_id.dim(),
            m_vis.len(),
        ));
    }
    pffm_normalized(&NormalizedId::new(f_id, eps_norm)?, m_vis, lambda_t, psi)
}

/// Concatenation baseline: the raw ID tokens followed by `m_vis` as one extra
/// token, with no normalization anywhere.
pub fn concat_baseline(f_id: &IdEmbedding, m_vis: &ModulationVector) -> Result<TokenMatrix> {
    if f_id.dim() != m_vis.len() {
        return Err(DviError::mismatch(
            "modulation length",
            f_id.dim(),
            m_vis.len(),
        ));
    }
    let mut data = f_id.matrix().data().to_vec();
    data.extend(m_vis.values().iter().map(|&v| v as f32));
    TokenMatrix::new(f_id.tokens() + 1, f_id.dim(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcatDiagnostics {
    pub appended_norm: f64,
    pub mean_id_norm: f64,
    pub ratio: f64,
}

/// L2 norm of the appended token against the mean L2 norm of the ID tokens.
pub fn concat_diagnostics(concat: &TokenMatrix) -> ConcatDiagnostics {
    let norm = |r: &[f32]| r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let n = concat.tokens() - 1;
    let appended_norm = norm(concat.row(n));
    let mean_id_norm = (0..n).map(|r| norm(concat.row(r))).sum::<f64>() / n.max(1) as f64;
    ConcatDiagnostics {
        appended_norm,
        mean_id_norm,
        ratio: appended_norm / mean_id_norm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenMoments {
    pub mean: f64,
    pub variance: f64,
}

pub fn token_moments(rows: impl Iterator<Item = Vec<f64>>) -> Vec<TokenMoments> {
    rows.map(|r| {
        let (mean, variance) = moments(r.iter().copied());
        TokenMoments { mean, variance }
    })
    .collect()
}
