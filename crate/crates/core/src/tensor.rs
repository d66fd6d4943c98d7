//! Dense tensor containers, the `.dvt` binary format and seeded synthetic data.
//!
//! A `.dvt` file is laid out as:
//!
//! ```text
//! b"DVT1" | rank: u8 | rank x dim: u32 LE | payload: f32 LE, row-major
//! ```
//!
//! Rank 3 decodes to a [`LatentTensor`] (C, h, w) and rank 2 to a
//! [`TokenMatrix`] (N, D). All values must be finite.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{DviError, Result};

pub const MAGIC: &[u8; 4] = b"DVT1";

/// Latent channel count of the reference VAE.
pub const DEFAULT_LATENT_CHANNELS: usize = 16;

fn check_finite(data: &[f32], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DviError::NonFinite(what))
    }
}

/// C x h x w grid of 32-bit values, row-major with channel outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DviError::InvalidDims(format!(
                "latent dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(DviError::mismatch(
                "latent data length",
                expected,
                data.len(),
            ));
        }
        check_finite(&data, "latent tensor")?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![0.0; channels * height * width],
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Spatial plane of channel `c`.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Applies `f` elementwise, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// N x D row-major matrix of 32-bit values. Also used as a generic dense
/// matrix by the attention code.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(DviError::InvalidDims(format!(
                "token matrix dims must be positive, got {tokens}x{dim}"
            )));
        }
        if data.len() != tokens * dim {
            return Err(DviError::mismatch(
                "token matrix data length",
                tokens * dim,
                data.len(),
            ));
        }
        check_finite(&data, "token matrix")?;
        Ok(Self { tokens, dim, data })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Result<Self> {
        Self::new(tokens, dim, vec![0.0; tokens * dim])
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(DviError::mismatch("row length", dim, bad.len()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.dim + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Either container, as stored in a `.dvt` file.
#[derive(Debug, Clone, PartialEq)]
pub enum DvtTensor {
    Latent(LatentTensor),
    Tokens(TokenMatrix),
}

impl DvtTensor {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Self::Latent(t) => vec![t.channels, t.height, t.width],
            Self::Tokens(t) => vec![t.tokens, t.dim],
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            Self::Latent(t) => t.data(),
            Self::Tokens(t) => t.data(),
        }
    }

    pub fn into_latent(self) -> Result<LatentTensor> {
        match self {
            Self::Latent(t) => Ok(t),
            Self::Tokens(_) => Err(DviError::mismatch("tensor rank", 3, 2)),
        }
    }

    pub fn into_tokens(self) -> Result<TokenMatrix> {
        match self {
            Self::Tokens(t) => Ok(t),
            Self::Latent(_) => Err(DviError::mismatch("tensor rank", 2, 3)),
        }
    }
}

impl From<LatentTensor> for DvtTensor {
    fn from(t: LatentTensor) -> Self {
        Self::Latent(t)
    }
}

impl From<TokenMatrix> for DvtTensor {
    fn from(t: TokenMatrix) -> Self {
        Self::Tokens(t)
    }
}

fn encode_parts(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(5 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(dims.len() as u8);
    for &d in dims {
        let d32 = u32::try_from(d).map_err(|_| DviError::DimOverflow(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Serializes a tensor to `.dvt` bytes.
pub fn encode(t: &DvtTensor) -> Result<Vec<u8>> {
    encode_parts(&t.dims(), t.data())
}

/// Parses `.dvt` bytes.
pub fn decode(bytes: &[u8]) -> Result<DvtTensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(DviError::BadMagic);
    }
    let rank = bytes[4];
    if rank != 2 && rank != 3 {
        return Err(DviError::UnsupportedRank(rank));
    }
    let header_end = 5 + 4 * rank as usize;
    if bytes.len() < header_end {
        return Err(DviError::PayloadLength {
            expected: header_end,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[5..header_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DviError::InvalidDims(format!("{dims:?} overflows")))?;
    let payload = &bytes[header_end..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(DviError::PayloadLength {
            expected: count.saturating_mul(4),
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(&data, "payload")?;
    match *dims.as_slice() {
        [c, h, w] => LatentTensor::new(c, h, w, data).map(DvtTensor::Latent),
        [n, d] => TokenMatrix::new(n, d, data).map(DvtTensor::Tokens),
        _ => unreachable!("rank checked above"),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DvtTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| DviError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DvtTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DviError::io(path, e))?;
    decode(&bytes)
}

/// Deterministic value source. Every random quantity in the crate comes from
/// one of these; there is no OS entropy anywhere.
///
/// The stream is ChaCha8 keyed through `seed_from_u64`, which is specified
/// independently of host endianness and word size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededGenerator {
    seed: u64,
}

impl SeededGenerator {
    pub const ALGORITHM: &'static str = "chacha8/seed_from_u64";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Independent sub-generator for a named purpose: first 8 bytes of
    /// SHA-256(seed_le || tag).
    pub fn derive(&self, tag: &str) -> SeededGenerator {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(tag.as_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        SeededGenerator::new(u64::from_le_bytes(word))
    }

    pub fn gaussian(&self, n: usize, scale: f32) -> Vec<f32> {
        let mut rng = self.rng();
        (0..n)
            .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
            .collect()
    }

    /// Samples in `[lo, hi)`.
    pub fn uniform(&self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        let mut rng = self.rng();
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthFamily {
    /// Uniform on `[-1, 1)`.
    Uniform,
    /// Standard normal.
    Gaussian,
    Constant(f32),
    /// Cell `(c, i, j)` holds `c + i/h + j/w`.
    Gradient,
}

/// Deterministic stand-in for an encoded latent.
pub fn synth_latent(
    gen: SeededGenerator,
    channels: usize,
    height: usize,
    width: usize,
    family: SynthFamily,
) -> Result<LatentTensor> {
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| DviError::InvalidDims("latent size overflows".into()))?;
    let data = match family {
        SynthFamily::Uniform => gen.uniform(n, -1.0, 1.0),
        SynthFamily::Gaussian => gen.gaussian(n, 1.0),
        SynthFamily::Constant(k) => vec![k; n],
        SynthFamily::Gradient => {
            let mut data = Vec::with_capacity(n);
            for c in 0..channels {
                for i in 0..height {
                    for j in 0..width {
                        data.push(c as f32 + i as f32 / height as f32 + j as f32 / width as f32);
                    }
                }
            }
            data
        }
    };
    LatentTensor::new(channels, height, width, data)
}
