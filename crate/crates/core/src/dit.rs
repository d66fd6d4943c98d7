//! Toy diffusion transformer with frozen seeded weights.
//!
//! Each block runs pre-norm multi-head self-attention, then identity
//! cross-attention whose values carry the additive `alpha * f_id` term, then a
//! pre-norm GELU MLP. All three are residual. Matmuls accumulate in f64 and
//! store f32.

use crate::error::{DviError, Result};
use crate::modulation::FusedEmbedding;
use crate::semantic::IdEmbedding;
use crate::tensor::{LatentTensor, SeededGenerator, TokenMatrix};

/// Where the additive value term of the identity cross-attention comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSource {
    /// Unmodulated projected ID embedding.
    #[default]
    Raw,
    /// The same modulated tokens that feed K/V.
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    pub id_dim: usize,
    pub weight_seed: u64,
    pub bias_source: BiasSource,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            d_model: 64,
            heads: 4,
            layers: 4,
            patch: 2,
            id_dim: 2048,
            weight_seed: 0,
            bias_source: BiasSource::Raw,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.d_model,
            self.heads,
            self.layers,
            self.patch,
            self.id_dim,
        ];
        if dims.contains(&0) {
            return Err(DviError::InvalidDims(format!(
                "backbone dims must be positive: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(DviError::InvalidDims(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// `x (n x in) . w (in x out)`.
pub fn linear(x: &TokenMatrix, w: &TokenMatrix) -> Result<TokenMatrix> {
    if x.dim() != w.tokens() {
        return Err(DviError::mismatch("matmul inner dim", w.tokens(), x.dim()));
    }
    let out_dim = w.dim();
    let mut out = Vec::with_capacity(x.tokens() * out_dim);
    let mut acc = vec![0.0f64; out_dim];
    for row in x.rows() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&xv, wrow) in row.iter().zip(w.rows()) {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    TokenMatrix::new(x.tokens(), out_dim, out)
}

/// Inputs of one value-biased attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionIO<'a> {
    pub q: &'a TokenMatrix,
    pub k: &'a TokenMatrix,
    pub v: &'a TokenMatrix,
    pub bias: Option<&'a TokenMatrix>,
    pub alpha: f64,
}

fn all_finite(m: &TokenMatrix) -> bool {
    m.data().iter().all(|v| v.is_finite())
}

/// Row-wise `softmax(Q K^T / sqrt(d))` with the row max subtracted.
pub fn attention_weights(q: &TokenMatrix, k: &TokenMatrix) -> Result<Vec<Vec<f64>>> {
    if q.dim() != k.dim() {
        return Err(DviError::mismatch("key dim", q.dim(), k.dim()));
    }
    let scale = 1.0 / (q.dim() as f64).sqrt();
    let mut out = Vec::with_capacity(q.tokens());
    for qr in q.rows() {
        let mut scores: Vec<f64> = k
            .rows()
            .map(|kr| {
                qr.iter()
                    .zip(kr)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in &mut scores {
            *s = (*s - max).exp();
            total += *s;
        }
        scores.iter_mut().for_each(|s| *s /= total);
        out.push(scores);
    }
    Ok(out)
}

/// `softmax(Q K^T / sqrt(d)) (V + alpha * f)`.
pub fn attend(io: &AttentionIO<'_>) -> Result<TokenMatrix> {
    let AttentionIO {
        q,
        k,
        v,
        bias,
        alpha,
    } = *io;
    if k.tokens() != v.tokens() {
        return Err(DviError::mismatch(
            "value token count",
            k.tokens(),
            v.tokens(),
        ));
    }
    if let Some(f) = bias {
        if (f.tokens(), f.dim()) != (v.tokens(), v.dim()) {
            return Err(DviError::mismatch(
                "bias token shape",
                format!("{}x{}", v.tokens(), v.dim()),
                format!("{}x{}", f.tokens(), f.dim()),
            ));
        }
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(DviError::InvalidArgument(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    if !(all_finite(q) && all_finite(k) && all_finite(v) && bias.is_none_or(all_finite)) {
        return Err(DviError::NonFinite("attention inputs"));
    }
    let weights = attention_weights(q, k)?;

    let dv = v.dim();
    let values: Vec<f64> = match bias {
        Some(f) if alpha != 0.0 => v
            .data()
            .iter()
            .zip(f.data())
            .map(|(&a, &b)| a as f64 + alpha * b as f64)
            .collect(),
        _ => v.data().iter().map(|&a| a as f64).collect(),
    };
    let mut out = Vec::with_capacity(q.tokens() * dv);
    let mut acc = vec![0.0f64; dv];
    for row in &weights {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&a, vrow) in row.iter().zip(values.chunks_exact(dv)) {
            for (o, &x) in acc.iter_mut().zip(vrow) {
                *o += a * x;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    TokenMatrix::new(q.tokens(), dv, out)
}

/// Splits a latent into `(h/p)(w/p)` raw patches of length `C p p`, tokens in
/// row-major patch order and each patch flattened as `(c, di, dj)`.
pub fn extract_patches(z: &LatentTensor, p: usize) -> Result<TokenMatrix> {
    let (c, h, w) = z.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(DviError::InvalidDims(format!(
            "latent {h}x{w} not divisible by patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(c * h * w);
    for pi in 0..gh {
        for pj in 0..gw {
            for ch in 0..c {
                for di in 0..p {
                    for dj in 0..p {
                        data.push(z.get(ch, pi * p + di, pj * p + dj));
                    }
                }
            }
        }
    }
    TokenMatrix::new(gh * gw, c * p * p, data)
}

/// Patches projected to model width by `proj` (`C p p x d_model`).
pub fn patchify(z: &LatentTensor, p: usize, proj: &TokenMatrix) -> Result<TokenMatrix> {
    linear(&extract_patches(z, p)?, proj)
}

/// Inverse layout of [`patchify`]: `proj` is `d_model x C p p`.
pub fn unpatchify(
    tokens: &TokenMatrix,
    proj: &TokenMatrix,
    shape: (usize, usize, usize),
    p: usize,
) -> Result<LatentTensor> {
    let (c, h, w) = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(DviError::InvalidDims(format!(
            "latent {h}x{w} not divisible by patch {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.tokens() != gh * gw {
        return Err(DviError::mismatch(
            "patch token count",
            gh * gw,
            tokens.tokens(),
        ));
    }
    if proj.dim() != c * p * p {
        return Err(DviError::mismatch("unpatch width", c * p * p, proj.dim()));
    }
    let patches = linear(tokens, proj)?;
    let mut data = vec![0.0f32; c * h * w];
    for pi in 0..gh {
        for pj in 0..gw {
            let patch = patches.row(pi * gw + pj);
            let mut idx = 0;
            for ch in 0..c {
                for di in 0..p {
                    for dj in 0..p {
                        data[(ch * h + pi * p + di) * w + pj * p + dj] = patch[idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    LatentTensor::new(c, h, w, data)
}

/// Frozen maps of one identity cross-attention: `proj` is `D x d_model`.
#[derive(Debug, Clone)]
pub struct IdCrossWeights {
    pub proj: TokenMatrix,
    pub wq: TokenMatrix,
    pub wk: TokenMatrix,
    pub wv: TokenMatrix,
}

/// `image + softmax(Q K^T/sqrt(d)) (V + alpha * proj(bias))` with
/// `Q = image Wq`, `K = proj(kv) Wk`, `V = proj(kv) Wv`.
pub fn id_cross_attention(
    image_tokens: &TokenMatrix,
    kv_tokens: &TokenMatrix,
    bias_tokens: &TokenMatrix,
    alpha: f64,
    weights: &IdCrossWeights,
) -> Result<TokenMatrix> {
    if kv_tokens.tokens() != bias_tokens.tokens() {
        return Err(DviError::mismatch(
            "ID bias token count",
            kv_tokens.tokens(),
            bias_tokens.tokens(),
        ));
    }
    let q = linear(image_tokens, &weights.wq)?;
    let kv = linear(kv_tokens, &weights.proj)?;
    let k = linear(&kv, &weights.wk)?;
    let v = linear(&kv, &weights.wv)?;
    let f = linear(bias_tokens, &weights.proj)?;
    let attn = attend(&AttentionIO {
        q: &q,
        k: &k,
        v: &v,
        bias: Some(&f),
        alpha,
    })?;
    add(image_tokens, &attn)
}

fn add(a: &TokenMatrix, b: &TokenMatrix) -> Result<TokenMatrix> {
    if (a.tokens(), a.dim()) != (b.tokens(), b.dim()) {
        return Err(DviError::mismatch(
            "residual shape",
            format!("{}x{}", a.tokens(), a.dim()),
            format!("{}x{}", b.tokens(), b.dim()),
        ));
    }
    TokenMatrix::new(
        a.tokens(),
        a.dim(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    )
}

fn layer_norm(x: &TokenMatrix) -> Result<TokenMatrix> {
    let mut data = Vec::with_capacity(x.data().len());
    for row in x.rows() {
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        data.extend(row.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    TokenMatrix::new(x.tokens(), x.dim(), data)
}

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

/// Sinusoidal embedding of `1000 t`: sines in the first half, cosines in the
/// second.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let pos = 1000.0 * t;
    let mut out = vec![0.0f32; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (pos * freq).sin() as f32;
        out[half + k] = (pos * freq).cos() as f32;
    }
    out
}

#[derive(Debug, Clone)]
struct BlockWeights {
    wq: TokenMatrix,
    wk: TokenMatrix,
    wv: TokenMatrix,
    wo: TokenMatrix,
    id: IdCrossWeights,
    mlp_in: TokenMatrix,
    mlp_out: TokenMatrix,
}

/// Identity conditioning for one forward pass.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `Nk x D` tokens feeding the ID keys and values.
    pub kv_tokens: TokenMatrix,
    /// `Nk x D` tokens feeding the additive value term.
    pub bias_tokens: TokenMatrix,
    /// Optional `d_model` vector added to every image token.
    pub prompt: Option<Vec<f32>>,
}

impl Conditioning {
    pub fn from_fused(f_fused: &FusedEmbedding, f_id_raw: &IdEmbedding) -> Result<Self> {
        Ok(Self {
            kv_tokens: f_fused.to_token_matrix()?,
            bias_tokens: f_id_raw.matrix().clone(),
            prompt: None,
        })
    }

    /// Both ID pathways replaced by a single zero token, no prompt.
    pub fn unconditional(id_dim: usize) -> Result<Self> {
        Ok(Self {
            kv_tokens: TokenMatrix::zeros(1, id_dim)?,
            bias_tokens: TokenMatrix::zeros(1, id_dim)?,
            prompt: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dit {
    cfg: DitConfig,
    patch_in: TokenMatrix,
    patch_out: TokenMatrix,
    blocks: Vec<BlockWeights>,
}

impl Dit {
    /// Gaussian weights with scale `1/sqrt(fan_in)`, one derived stream per
    /// matrix.
    pub fn seeded(cfg: DitConfig) -> Result<Self> {
        Self::build(cfg, false)
    }

    /// Every weight zero; the forward pass then predicts zero velocity.
    pub fn zeroed(cfg: DitConfig) -> Result<Self> {
        Self::build(cfg, true)
    }

    fn build(cfg: DitConfig, zero: bool) -> Result<Self> {
        cfg.validate()?;
        let root = SeededGenerator::new(cfg.weight_seed);
        let mat = |name: String, fan_in: usize, fan_out: usize| -> Result<TokenMatrix> {
            if zero {
                return TokenMatrix::zeros(fan_in, fan_out);
            }
            let w = root
                .derive(&name)
                .gaussian(fan_in * fan_out, 1.0 / (fan_in as f32).sqrt());
            TokenMatrix::new(fan_in, fan_out, w)
        };
        let d = cfg.d_model;
        let blocks = (0..cfg.layers)
            .map(|l| {
                Ok(BlockWeights {
                    wq: mat(format!("block{l}.wq"), d, d)?,
                    wk: mat(format!("block{l}.wk"), d, d)?,
                    wv: mat(format!("block{l}.wv"), d, d)?,
                    wo: mat(format!("block{l}.wo"), d, d)?,
                    id: IdCrossWeights {
                        proj: mat(format!("block{l}.id.proj"), cfg.id_dim, d)?,
                        wq: mat(format!("block{l}.id.wq"), d, d)?,
                        wk: mat(format!("block{l}.id.wk"), d, d)?,
                        wv: mat(format!("block{l}.id.wv"), d, d)?,
                    },
                    mlp_in: mat(format!("block{l}.mlp_in"), d, 4 * d)?,
                    mlp_out: mat(format!("block{l}.mlp_out"), 4 * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_in: mat("patch_in".into(), cfg.patch_len(), d)?,
            patch_out: mat("patch_out".into(), d, cfg.patch_len())?,
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn patch_in(&self) -> &TokenMatrix {
        &self.patch_in
    }

    pub fn id_weights(&self, layer: usize) -> &IdCrossWeights {
        &self.blocks[layer].id
    }

    fn self_attention(&self, x: &TokenMatrix, b: &BlockWeights) -> Result<TokenMatrix> {
        let h = layer_norm(x)?;
        let q = linear(&h, &b.wq)?;
        let k = linear(&h, &b.wk)?;
        let v = linear(&h, &b.wv)?;
        let hd = self.cfg.d_model / self.cfg.heads;
        let n = x.tokens();
        let mut merged = vec![0.0f32; n * self.cfg.d_model];
        for head in 0..self.cfg.heads {
            let slice = |m: &TokenMatrix| -> Result<TokenMatrix> {
                let data = m
                    .rows()
                    .flat_map(|r| r[head * hd..(head + 1) * hd].iter().copied())
                    .collect();
                TokenMatrix::new(n, hd, data)
            };
            let (qh, kh, vh) = (slice(&q)?, slice(&k)?, slice(&v)?);
            let out = attend(&AttentionIO {
                q: &qh,
                k: &kh,
                v: &vh,
                bias: None,
                alpha: 0.0,
            })?;
            for (r, row) in out.rows().enumerate() {
                let start = r * self.cfg.d_model + head * hd;
                merged[start..start + hd].copy_from_slice(row);
            }
        }
        let merged = TokenMatrix::new(n, self.cfg.d_model, merged)?;
        add(x, &linear(&merged, &b.wo)?)
    }

    fn mlp(&self, x: &TokenMatrix, b: &BlockWeights) -> Result<TokenMatrix> {
        let h = linear(&layer_norm(x)?, &b.mlp_in)?;
        let h = TokenMatrix::new(
            h.tokens(),
            h.dim(),
            h.data().iter().map(|&v| gelu(v)).collect(),
        )?;
        add(x, &linear(&h, &b.mlp_out)?)
    }

    /// Predicted velocity for latent `z` at time `t`, same shape as `z`.
    pub fn forward(
        &self,
        z: &LatentTensor,
        cond: &Conditioning,
        t: f64,
        alphas: &[f64],
    ) -> Result<LatentTensor> {
        let cfg = &self.cfg;
        if z.channels() != cfg.channels {
            return Err(DviError::mismatch(
                "latent channels",
                cfg.channels,
                z.channels(),
            ));
        }
        if alphas.len() != cfg.layers {
            return Err(DviError::mismatch("alpha count", cfg.layers, alphas.len()));
        }
        if cond.kv_tokens.dim() != cfg.id_dim || cond.bias_tokens.dim() != cfg.id_dim {
            return Err(DviError::mismatch(
                "ID token width",
                cfg.id_dim,
                format!("{}/{}", cond.kv_tokens.dim(), cond.bias_tokens.dim()),
            ));
        }
        let bias_tokens = match cfg.bias_source {
            BiasSource::Raw => &cond.bias_tokens,
            BiasSource::Fused => &cond.kv_tokens,
        };

        let mut x = patchify(z, cfg.patch, &self.patch_in)?;
        let mut shift: Vec<f32> = time_embedding(t, cfg.d_model);
        if let Some(p) = &cond.prompt {
            if p.len() != cfg.d_model {
                return Err(DviError::mismatch("prompt width", cfg.d_model, p.len()));
            }
            shift.iter_mut().zip(p).for_each(|(s, &v)| *s += v);
        }
        x = TokenMatrix::new(
            x.tokens(),
            x.dim(),
            x.rows()
                .flat_map(|r| {
                    r.iter()
                        .zip(&shift)
                        .map(|(&a, &b)| a + b)
                        .collect::<Vec<_>>()
                })
                .collect(),
        )?;

        for (b, &alpha) in self.blocks.iter().zip(alphas) {
            x = self.self_attention(&x, b)?;
            x = id_cross_attention(&x, &cond.kv_tokens, bias_tokens, alpha, &b.id)?;
            x = self.mlp(&x, b)?;
        }
        unpatchify(&layer_norm(&x)?, &self.patch_out, z.shape(), cfg.patch)
    }
}

/// Forward pass conditioned on a fused embedding and the raw ID embedding.
pub fn dit_forward(
    dit: &Dit,
    z: &LatentTensor,
    f_fused: &FusedEmbedding,
    f_id_raw: &IdEmbedding,
    t: f64,
    alphas: &[f64],
) -> Result<LatentTensor> {
    dit.forward(z, &Conditioning::from_fused(f_fused, f_id_raw)?, t, alphas)
}
