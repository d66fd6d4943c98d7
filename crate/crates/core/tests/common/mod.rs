//! Independent reference computations shared by the integration suites.
//! Nothing here calls into the library's arithmetic.

#![allow(dead_code)]

use dvi::dit::Conditioning;
use dvi::pipeline::{euler_step, RunConfig, Sampler};
use dvi::semantic::{identity_embedding, IdEmbedding};
use dvi::tensor::{synth_latent, LatentTensor, SeededGenerator, SynthFamily, TokenMatrix};
use dvi::visual::{extract_stats, VisualContext};

/// Welford's single-pass mean/variance per channel, then `sqrt(var + eps)`.
pub fn stats_oracle(z: &LatentTensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = z.shape();
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for ch in 0..c {
        let (mut mean, mut m2, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..h {
            for j in 0..w {
                let x = z.get(ch, i, j) as f64;
                n += 1.0;
                let d = x - mean;
                mean += d / n;
                m2 += d * (x - mean);
            }
        }
        mu.push(mean);
        sigma.push((m2 / n + eps).sqrt());
    }
    (mu, sigma)
}

pub fn to_rows(m: &TokenMatrix) -> Vec<Vec<f64>> {
    m.rows()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

/// Dense `softmax(Q K^T / sqrt(d)) (V + alpha f)` in f64.
pub fn attention_oracle(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    f: Option<&[Vec<f64>]>,
    alpha: f64,
) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    let scores = matmul(q, &transpose(k));
    let weights: Vec<Vec<f64>> = scores
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|s| ((s - max) / d.sqrt()).exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|x| x / total).collect()
        })
        .collect();
    let values: Vec<Vec<f64>> = match f {
        Some(f) => v
            .iter()
            .zip(f)
            .map(|(vr, fr)| vr.iter().zip(fr).map(|(a, b)| a + alpha * b).collect())
            .collect(),
        None => v.to_vec(),
    };
    matmul(&weights, &values)
}

/// Population layer norm without affine, f64.
pub fn norm_oracle(row: &[f32], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .map(|&v| (v as f64 - mean) / (var + eps).sqrt())
        .collect()
}

pub fn seeded_matrix(seed: u64, n: usize, d: usize, scale: f32) -> TokenMatrix {
    TokenMatrix::new(n, d, SeededGenerator::new(seed).gaussian(n * d, scale)).unwrap()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &TokenMatrix) -> f64 {
    a.iter()
        .zip(b.rows())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, &q)| (p - q as f64).abs()))
        .fold(0.0, f64::max)
}

/// Seeded identity embedding and visual statistics matching `cfg`'s dims.
pub fn fixture(cfg: &RunConfig, family: SynthFamily) -> (VisualContext, IdEmbedding) {
    let id = identity_embedding("alice", cfg.seeds.id, &cfg.semantic_config().unwrap()).unwrap();
    let z = synth_latent(
        SeededGenerator::new(1234),
        cfg.dims.channels,
        16,
        16,
        family,
    )
    .unwrap();
    (extract_stats(&z, 1e-6).unwrap(), id)
}

/// Defaults with a narrow ID embedding for quick runs.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dims.id_dim = 64;
    cfg.steps = 8;
    cfg
}

/// Sampling loop that evaluates only one guidance branch.
pub fn single_branch(
    cfg: &RunConfig,
    stats: &VisualContext,
    id: &IdEmbedding,
    conditional: bool,
) -> LatentTensor {
    let sampler = Sampler::new(cfg, Some(stats), id).unwrap();
    let grid = sampler.grid();
    let mut z = sampler.initial_noise().unwrap();
    for i in 0..grid.steps() {
        let c = if conditional {
            sampler.conditioning(i).unwrap().0
        } else {
            Conditioning::unconditional(cfg.dims.id_dim).unwrap()
        };
        let (t, t_next) = (grid.t(i).unwrap(), grid.t(i + 1).unwrap());
        let v = sampler.dit().forward(&z, &c, t, grid.alphas()).unwrap();
        z = euler_step(&z, &v, t, t_next).unwrap();
    }
    z
}
