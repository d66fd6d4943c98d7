//! Euler sampling with classifier-free guidance and per-step re-modulation.
//!
//! Each step `i` evaluates `lambda(t_i)`, rebuilds the ID conditioning for the
//! configured [`Mode`], runs the backbone once with the identity streams and
//! once with both zeroed, blends the two velocities and takes an Euler step
//! from `t_i` to `t_{i+1}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::{BiasSource, Conditioning, Dit, DitConfig};
use crate::error::{DviError, Result};
use crate::modulation::{
    broadcast, concat_baseline, concat_diagnostics, moments, pffm_normalized, ConcatDiagnostics,
    ModulationVector, NormalizedId, DEFAULT_NORM_EPS, DEFAULT_PSI,
};
use crate::scheduler::{
    build_grid_with_alphas, ScheduleGrid, DEFAULT_ALPHA, DEFAULT_LAMBDA_BASE, DEFAULT_STEPS,
};
use crate::semantic::{IdEmbedding, SemanticConfig};
use crate::tensor::{synth_latent, LatentTensor, SeededGenerator, SynthFamily, TokenMatrix};
use crate::visual::VisualContext;

pub const DEFAULT_GUIDANCE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Modulated ID tokens with the scheduled visual bias.
    Full,
    /// Normalized ID tokens, no visual bias.
    NoVisual,
    /// Raw ID tokens with the tiled descriptor appended as one more token.
    Concat,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoVisual, Mode::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoVisual => "no_visual",
            Mode::Concat => "concat",
        }
    }

    pub fn needs_stats(self) -> bool {
        self != Mode::NoVisual
    }
}

impl std::str::FromStr for Mode {
    type Err = DviError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_visual" | "no-visual" => Ok(Mode::NoVisual),
            "concat" => Ok(Mode::Concat),
            other => Err(DviError::InvalidArgument(format!(
                "unknown mode {other:?} (expected full, no_visual or concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub noise: u64,
    pub weights: u64,
    pub id: u64,
    pub prompt: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            noise: 0,
            weights: 1,
            id: 2,
            prompt: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub patch: usize,
    pub id_dim: usize,
    pub id_tokens: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 16,
            width: 16,
            d_model: 64,
            heads: 4,
            layers: 4,
            patch: 2,
            id_dim: 2048,
            id_tokens: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub steps: usize,
    pub guidance: f64,
    pub lambda_base: f64,
    pub psi: f64,
    pub alpha: f64,
    /// Per-layer override of `alpha`.
    pub alphas: Option<Vec<f64>>,
    pub mode: Mode,
    pub eps_norm: f64,
    pub bias_source: BiasSource,
    pub seeds: Seeds,
    pub dims: Dims,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            lambda_base: DEFAULT_LAMBDA_BASE,
            psi: DEFAULT_PSI,
            alpha: DEFAULT_ALPHA,
            alphas: None,
            mode: Mode::Full,
            eps_norm: DEFAULT_NORM_EPS,
            bias_source: BiasSource::Raw,
            seeds: Seeds::default(),
            dims: Dims::default(),
        }
    }
}

/// Flat `key = value` config file (TOML syntax). Every key is optional and
/// overrides the corresponding [`RunConfig`] field.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub lambda_base: Option<f64>,
    #[serde(alias = "psi")]
    pub psi_coeff: Option<f64>,
    pub alpha: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub mode: Option<Mode>,
    pub eps_norm: Option<f64>,
    pub bias_source: Option<BiasSource>,
    pub seed_noise: Option<u64>,
    pub seed_weights: Option<u64>,
    pub seed_id: Option<u64>,
    pub seed_prompt: Option<u64>,
    pub channels: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub patch: Option<usize>,
    pub id_dim: Option<usize>,
    pub id_tokens: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DviError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DviError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            steps => steps, guidance => guidance, lambda_base => lambda_base, psi_coeff => psi,
            alpha => alpha, mode => mode, eps_norm => eps_norm, bias_source => bias_source,
            seed_noise => seeds.noise, seed_weights => seeds.weights, seed_id => seeds.id,
            seed_prompt => seeds.prompt, channels => dims.channels, height => dims.height,
            width => dims.width, d_model => dims.d_model, heads => dims.heads,
            layers => dims.layers, patch => dims.patch, id_dim => dims.id_dim,
            id_tokens => dims.id_tokens,
        );
        if self.alphas.is_some() {
            cfg.alphas = self.alphas;
        }
    }
}

impl RunConfig {
    pub fn alphas(&self) -> Vec<f64> {
        self.alphas
            .clone()
            .unwrap_or_else(|| vec![self.alpha; self.dims.layers])
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            channels: self.dims.channels,
            d_model: self.dims.d_model,
            heads: self.dims.heads,
            layers: self.dims.layers,
            patch: self.dims.patch,
            id_dim: self.dims.id_dim,
            weight_seed: self.seeds.weights,
            bias_source: self.bias_source,
        }
    }

    /// Semantic-stream shape for this run: 4 global-derived tokens, the rest
    /// local, default feature width.
    pub fn semantic_config(&self) -> Result<SemanticConfig> {
        if self.dims.id_tokens <= 4 {
            return Err(DviError::InvalidDims(format!(
                "id_tokens must exceed the 4 global-derived tokens, got {}",
                self.dims.id_tokens
            )));
        }
        Ok(SemanticConfig {
            local_tokens: self.dims.id_tokens - 4,
            global_tokens: 4,
            embed_dim: self.dims.id_dim,
            ..SemanticConfig::default()
        })
    }

    pub fn grid(&self) -> Result<ScheduleGrid> {
        build_grid_with_alphas(self.steps, self.lambda_base, self.alphas())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(DviError::InvalidArgument(format!(
                "guidance must be >= 0, got {}",
                self.guidance
            )));
        }
        if !self.psi.is_finite() {
            return Err(DviError::InvalidArgument("psi must be finite".into()));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm.is_finite()) {
            return Err(DviError::InvalidArgument("eps_norm must be > 0".into()));
        }
        if self.alphas().len() != self.dims.layers {
            return Err(DviError::mismatch(
                "alphas length",
                self.dims.layers,
                self.alphas().len(),
            ));
        }
        self.dit_config().validate()?;
        let d = &self.dims;
        if !d.height.is_multiple_of(d.patch) || !d.width.is_multiple_of(d.patch) || d.id_tokens == 0
        {
            return Err(DviError::InvalidDims(format!(
                "latent {}x{} must be divisible by patch {} and id_tokens >= 1",
                d.height, d.width, d.patch
            )));
        }
        self.grid().map(drop)
    }
}

/// `(1 - g) * uncond + g * cond`, the same blend as `uncond + g (cond - uncond)`
/// but exact at `g = 0` and `g = 1`.
pub fn cfg_combine(v_cond: &LatentTensor, v_uncond: &LatentTensor, g: f64) -> Result<LatentTensor> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(DviError::mismatch(
            "guidance branch shape",
            format!("{:?}", v_cond.shape()),
            format!("{:?}", v_uncond.shape()),
        ));
    }
    let (c, h, w) = v_cond.shape();
    let data = v_cond
        .data()
        .iter()
        .zip(v_uncond.data())
        .map(|(&vc, &vu)| ((1.0 - g) * vu as f64 + g * vc as f64) as f32)
        .collect();
    LatentTensor::new(c, h, w, data)
}

/// `z + (t_next - t_i) v`.
pub fn euler_step(
    z: &LatentTensor,
    v: &LatentTensor,
    t_i: f64,
    t_next: f64,
) -> Result<LatentTensor> {
    if z.shape() != v.shape() {
        return Err(DviError::mismatch(
            "velocity shape",
            format!("{:?}", z.shape()),
            format!("{:?}", v.shape()),
        ));
    }
    if t_next.partial_cmp(&t_i) != Some(std::cmp::Ordering::Less) {
        return Err(DviError::InvalidArgument(format!(
            "euler step needs t_next < t_i, got {t_i} -> {t_next}"
        )));
    }
    let dt = t_next - t_i;
    let (c, h, w) = z.shape();
    let data = z
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| (a as f64 + dt * b as f64) as f32)
        .collect();
    LatentTensor::new(c, h, w, data)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: f64,
    /// Scale applied to the visual bias at this step (0 outside `full` mode).
    pub lambda: f64,
    pub fused_mean: f64,
    pub fused_variance: f64,
    pub latent_mean: f64,
    pub latent_variance: f64,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutput {
    pub latent: LatentTensor,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Everything a run needs, built once from the config and inputs.
pub struct Sampler {
    cfg: RunConfig,
    grid: ScheduleGrid,
    dit: Dit,
    id: IdEmbedding,
    norm: NormalizedId,
    m_vis: Option<ModulationVector>,
    prompt: Vec<f32>,
    /// Cached concat-mode tokens: (kv, bias).
    concat: Option<(TokenMatrix, TokenMatrix)>,
}

impl Sampler {
    pub fn new(cfg: &RunConfig, stats: Option<&VisualContext>, id: &IdEmbedding) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims;
        if id.dim() != dims.id_dim {
            return Err(DviError::mismatch(
                "ID embedding width",
                dims.id_dim,
                id.dim(),
            ));
        }
        if id.tokens() != dims.id_tokens {
            return Err(DviError::mismatch(
                "ID token count",
                dims.id_tokens,
                id.tokens(),
            ));
        }
        let m_vis = match (cfg.mode.needs_stats(), stats) {
            (true, None) => {
                return Err(DviError::InvalidArgument(format!(
                    "mode {} requires visual statistics",
                    cfg.mode.name()
                )))
            }
            (true, Some(s)) => {
                s.validate()?;
                Some(broadcast(&s.v_ctx(), dims.id_dim)?)
            }
            (false, _) => None,
        };
        let concat = match (&m_vis, cfg.mode) {
            (Some(m), Mode::Concat) => {
                let kv = concat_baseline(id, m)?;
                let mut bias = id.matrix().data().to_vec();
                bias.extend(std::iter::repeat_n(0.0, dims.id_dim));
                let bias = TokenMatrix::new(id.tokens() + 1, dims.id_dim, bias)?;
                Some((kv, bias))
            }
            _ => None,
        };
        let prompt = SeededGenerator::new(cfg.seeds.prompt).gaussian(dims.d_model, 0.5);
        Ok(Self {
            grid: cfg.grid()?,
            dit: Dit::seeded(cfg.dit_config())?,
            norm: NormalizedId::new(id, cfg.eps_norm)?,
            id: id.clone(),
            m_vis,
            prompt,
            concat,
            cfg: cfg.clone(),
        })
    }

    pub fn grid(&self) -> &ScheduleGrid {
        &self.grid
    }

    pub fn dit(&self) -> &Dit {
        &self.dit
    }

    pub fn initial_noise(&self) -> Result<LatentTensor> {
        let d = self.cfg.dims;
        synth_latent(
            SeededGenerator::new(self.cfg.seeds.noise),
            d.channels,
            d.height,
            d.width,
            SynthFamily::Gaussian,
        )
    }

    /// Conditional-branch inputs at step `i` plus (lambda applied, fused
    /// mean, fused variance).
    pub fn conditioning(&self, i: usize) -> Result<(Conditioning, f64, f64, f64)> {
        let prompt = Some(self.prompt.clone());
        if let Some((kv, bias)) = &self.concat {
            let (mean, var) = moments(kv.data().iter().map(|&v| v as f64));
            let cond = Conditioning {
                kv_tokens: kv.clone(),
                bias_tokens: bias.clone(),
                prompt,
            };
            return Ok((cond, 0.0, mean, var));
        }
        let (m, lambda) = match (self.cfg.mode, &self.m_vis) {
            (Mode::Full, Some(m)) => (m.clone(), self.grid.lambda_at(i)?),
            _ => (broadcast(&[0.0], self.cfg.dims.id_dim)?, 0.0),
        };
        let fused = pffm_normalized(&self.norm, &m, lambda, self.cfg.psi)?;
        let (mean, var) = fused.moments();
        let mut cond = Conditioning::from_fused(&fused, &self.id)?;
        cond.prompt = prompt;
        Ok((cond, lambda, mean, var))
    }

    pub fn step(&self, z: &LatentTensor, i: usize) -> Result<(LatentTensor, StepDiagnostics)> {
        let t = self.grid.t(i)?;
        let t_next = self.grid.t(i + 1)?;
        let alphas = self.grid.alphas();
        let (cond, lambda, fused_mean, fused_variance) = self.conditioning(i)?;
        let uncond = Conditioning::unconditional(self.cfg.dims.id_dim)?;
        let v_cond = self.dit.forward(z, &cond, t, alphas)?;
        let v_uncond = self.dit.forward(z, &uncond, t, alphas)?;
        let v = cfg_combine(&v_cond, &v_uncond, self.cfg.guidance)?;
        let next = euler_step(z, &v, t, t_next)?;
        let (latent_mean, latent_variance) = moments(next.data().iter().map(|&v| v as f64));
        let diag = StepDiagnostics {
            step: i,
            t,
            lambda,
            fused_mean,
            fused_variance,
            latent_mean,
            latent_variance,
            alphas: alphas.to_vec(),
        };
        Ok((next, diag))
    }

    pub fn run(&self) -> Result<GenerateOutput> {
        let mut z = self.initial_noise()?;
        let mut diagnostics = Vec::with_capacity(self.grid.steps());
        for i in 0..self.grid.steps() {
            let (next, diag) = self.step(&z, i).map_err(|e| DviError::AtStep {
                step: i,
                source: Box::new(e),
            })?;
            log::debug!(
                "step {i}: t={} lambda={} latent_var={}",
                diag.t,
                diag.lambda,
                diag.latent_variance
            );
            z = next;
            diagnostics.push(diag);
        }
        Ok(GenerateOutput {
            latent: z,
            diagnostics,
        })
    }
}

/// Runs the full sampling loop. Deterministic in `cfg` and the inputs.
pub fn generate(
    cfg: &RunConfig,
    stats: Option<&VisualContext>,
    id: &IdEmbedding,
) -> Result<GenerateOutput> {
    Sampler::new(cfg, stats, id)?.run()
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport<'a> {
    pub mode: Mode,
    pub config: &'a RunConfig,
    pub steps: &'a [StepDiagnostics],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentSummary {
    pub mode: Mode,
    pub mean: f64,
    pub variance: f64,
    pub l2_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDistance {
    pub a: Mode,
    pub b: Mode,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub modes: Vec<LatentSummary>,
    pub distances: Vec<PairDistance>,
    pub concat: ConcatDiagnostics,
}

impl AblationReport {
    pub fn distance(&self, a: Mode, b: Mode) -> Option<f64> {
        self.distances
            .iter()
            .find(|d| (d.a, d.b) == (a, b) || (d.a, d.b) == (b, a))
            .map(|d| d.l2)
    }
}

fn l2_distance(a: &LatentTensor, b: &LatentTensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs all three modes on shared seeds and compares the final latents.
pub fn ablate(cfg: &RunConfig, stats: &VisualContext, id: &IdEmbedding) -> Result<AblationReport> {
    let outputs: Vec<Result<GenerateOutput>> = std::thread::scope(|s| {
        let handles: Vec<_> = Mode::ALL
            .iter()
            .map(|&mode| {
                let run = RunConfig {
                    mode,
                    ..cfg.clone()
                };
                s.spawn(move || generate(&run, Some(stats), id))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let latents = outputs
        .into_iter()
        .map(|r| r.map(|o| o.latent))
        .collect::<Result<Vec<_>>>()?;

    let modes = Mode::ALL
        .iter()
        .zip(&latents)
        .map(|(&mode, z)| {
            let (mean, variance) = moments(z.data().iter().map(|&v| v as f64));
            let l2_norm = z
                .data()
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            LatentSummary {
                mode,
                mean,
                variance,
                l2_norm,
            }
        })
        .collect();
    let mut distances = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            distances.push(PairDistance {
                a: Mode::ALL[i],
                b: Mode::ALL[j],
                l2: l2_distance(&latents[i], &latents[j]),
            });
        }
    }
    let m_vis = broadcast(&stats.v_ctx(), cfg.dims.id_dim)?;
    let concat = concat_diagnostics(&concat_baseline(id, &m_vis)?);
    Ok(AblationReport {
        modes,
        distances,
        concat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(v: &[f32]) -> LatentTensor {
        LatentTensor::new(1, 1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn cfg_identities() {
        let c = lat(&[1.5, -2.0, 1e-8]);
        let u = lat(&[0.25, 3.0, 1.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(
            cfg_combine(&lat(&[2.0]), &lat(&[1.0]), 4.0).unwrap().data(),
            &[5.0]
        );
        assert!(cfg_combine(&c, &lat(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn euler_cases() {
        let z = lat(&[0.5, -1.0]);
        assert_eq!(euler_step(&z, &lat(&[0.0, 0.0]), 1.0, 0.5).unwrap(), z);
        let out = euler_step(&lat(&[0.0, 0.0]), &lat(&[3.0, -2.0]), 1.0, 0.0).unwrap();
        assert_eq!(out.data(), &[-3.0, 2.0]);
        assert!(euler_step(&z, &z, 0.5, 0.5).is_err());
        assert!(euler_step(&z, &lat(&[1.0]), 1.0, 0.5).is_err());
    }

    #[test]
    fn euler_composes_on_constant_field() {
        let v = lat(&[0.7, -1.3, 2.0]);
        let mut z = lat(&[0.1, 0.2, 0.3]);
        for i in 0..25 {
            z = euler_step(&z, &v, (25 - i) as f64 / 25.0, (24 - i) as f64 / 25.0).unwrap();
        }
        let once = euler_step(&lat(&[0.1, 0.2, 0.3]), &v, 1.0, 0.0).unwrap();
        for (a, b) in z.data().iter().zip(once.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<Mode>().unwrap(), Mode::Full);
        assert_eq!("no-visual".parse::<Mode>().unwrap(), Mode::NoVisual);
        assert!("other".parse::<Mode>().is_err());
    }

    #[test]
    fn config_file_overrides() {
        let file = ConfigFile::parse(
            "steps = 10\nguidance = 2.5\nmode = \"concat\"\nseed_noise = 99\nid_dim = 64\nalphas = [0.1, 0.2, 0.3, 0.4]\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        file.apply(&mut cfg);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.guidance, 2.5);
        assert_eq!(cfg.mode, Mode::Concat);
        assert_eq!(cfg.seeds.noise, 99);
        assert_eq!(cfg.dims.id_dim, 64);
        assert_eq!(cfg.alphas(), vec![0.1, 0.2, 0.3, 0.4]);
        cfg.validate().unwrap();
    }

    #[test]
    fn psi_key_accepts_both_spellings() {
        for text in ["psi_coeff = 0.25", "psi = 0.25"] {
            let mut cfg = RunConfig::default();
            ConfigFile::parse(text).unwrap().apply(&mut cfg);
            assert_eq!(cfg.psi, 0.25);
        }
    }

    #[test]
    fn config_file_rejects_unknown_keys_and_bad_types() {
        assert!(ConfigFile::parse("stepz = 3").is_err());
        assert!(ConfigFile::parse("steps = \"three\"").is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = RunConfig {
            guidance: -1.0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.guidance = 4.0;
        cfg.alphas = Some(vec![0.8; 3]);
        assert!(cfg.validate().is_err());
        cfg.alphas = None;
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
    }
}
