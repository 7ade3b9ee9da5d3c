use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{DiscriminatorConfig, GeneratorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    StyleTransfer,
    /// Inputs are Gaussian noise; each style collection is a texture.
    TextureSynthesis,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::StyleTransfer => "style_transfer",
            Mode::TextureSynthesis => "texture_synthesis",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style_transfer" => Ok(Mode::StyleTransfer),
            "texture_synthesis" | "texture" => Ok(Mode::TextureSynthesis),
            _ => Err(Error::Config(format!("unknown mode {s:?} (style_transfer | texture_synthesis)"))),
        }
    }
}

/// What the auto-encoder step reconstructs in texture mode. Style
/// transfer always reconstructs the content input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReconSource {
    /// The generator input (noise in texture mode).
    Input,
    /// The real texture crop of the batch.
    #[default]
    Real,
    /// A crop of the content set, as in style transfer.
    Content,
    /// The real crop and a content crop together.
    Mixed,
}

impl fmt::Display for ReconSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReconSource::Input => "input",
            ReconSource::Real => "real",
            ReconSource::Content => "content",
            ReconSource::Mixed => "mixed",
        })
    }
}

impl FromStr for ReconSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(ReconSource::Input),
            "real" => Ok(ReconSource::Real),
            "content" => Ok(ReconSource::Content),
            "mixed" => Ok(ReconSource::Mixed),
            _ => Err(Error::Config(format!("unknown recon_source {s:?} (input | real | content | mixed)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub k_d: usize,
    pub k_g: usize,
    pub iterations: u64,
    pub image_size: usize,
    /// `None` derives `round(image_size · 143/128)`.
    pub scale_size: Option<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    pub style_count: usize,
    /// Optional display names, one per style.
    pub style_names: Vec<String>,
    pub width_scale: f64,
    pub branch_depth: usize,
    pub mode: Mode,
    pub recon_source: ReconSource,
    pub log_interval: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Record wall-clock step time in the metrics log. Off by default so
    /// logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 1,
            k_d: 1,
            k_g: 1,
            iterations: 5000,
            image_size: 32,
            scale_size: None,
            weights: LossWeights::default(),
            seed: 0,
            style_count: 1,
            style_names: Vec::new(),
            width_scale: 0.25,
            branch_depth: 1,
            mode: Mode::StyleTransfer,
            recon_source: ReconSource::Real,
            log_interval: 50,
            checkpoint_interval: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn scale_size(&self) -> usize {
        self.scale_size.unwrap_or_else(|| (self.image_size as f64 * 143.0 / 128.0).round() as usize)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { styles: self.style_count, width_scale: self.width_scale, branch_depth: self.branch_depth }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { styles: self.style_count, width_scale: self.width_scale }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.k_d == 0 || self.k_g == 0 {
            return bad(format!("k_d and k_g must be at least 1, got {} and {}", self.k_d, self.k_g));
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad(format!("image_size must be a multiple of 4 and at least 8, got {}", self.image_size));
        }
        if self.scale_size() <= self.image_size {
            return bad(format!("scale_size {} must exceed image_size {}", self.scale_size(), self.image_size));
        }
        if self.log_interval == 0 {
            return bad("log_interval must be at least 1".into());
        }
        if !self.style_names.is_empty() && self.style_names.len() != self.style_count {
            return bad(format!("{} style names for {} styles", self.style_names.len(), self.style_count));
        }
        if let Some(n) = self.style_names.iter().find(|n| n.is_empty() || n.contains(',') || n.parse::<usize>().is_ok()) {
            return bad(format!("style name {n:?} must be non-empty, comma-free and not a number"));
        }
        self.weights.validate()?;
        self.generator_config().validate()
    }
}
