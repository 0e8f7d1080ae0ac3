//! The JSON run configuration shared by `craft` and `sweep`.
//!
//! Every key is optional and unknown keys are rejected. Relative paths are
//! resolved against the directory of the config file.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "detector": "detector.bin",
//!   "data": "data/manifest.jsonl",
//!   "artwork": "sunset",
//!   "init": "target",
//!   "patch_size": 32,
//!   "ratio": 0.2,
//!   "alpha": 1.0, "beta": 8.0, "gamma": 0.5, "sim_metric": "cosine",
//!   "eot": {"scale": true, "rotation": true, "noise": true, "contrast": true, "brightness": true},
//!   "iters": 1000, "batch": 8, "lr": 0.03, "plateau_window": 50,
//!   "probe_every": 100, "snapshot_every": 100,
//!   "out": "run"
//! }
//! ```
//!
//! `detector` is a checkpoint path, `"toy"` (train one on `data` first) or
//! `cmd:<program>` (evaluation only). `artwork` is a built-in name
//! (sunset, waves, starry, mondrian) or an image path.

use std::path::{Path, PathBuf};

use advart::imaging::{artwork, load_image, ImageRGB};
use advart::losses::{LossWeights, SimMetric};
use advart::optimize::CraftConfig;
use advart::patchops::{EotConfig, EotRanges, InitMode};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Resolution at which built-in artworks are rendered before resampling.
pub const ARTWORK_RENDER_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EotSection {
    pub scale: bool,
    pub rotation: bool,
    pub noise: bool,
    pub contrast: bool,
    pub brightness: bool,
    pub scale_range: [f64; 2],
    pub max_angle: f64,
    pub noise_amplitude: f64,
    pub contrast_range: [f64; 2],
    pub brightness_amplitude: f64,
}

impl Default for EotSection {
    fn default() -> Self {
        let r = EotRanges::default();
        Self {
            scale: true,
            rotation: true,
            noise: true,
            contrast: true,
            brightness: true,
            scale_range: [r.scale.0, r.scale.1],
            max_angle: r.max_angle_deg,
            noise_amplitude: r.noise,
            contrast_range: [r.contrast.0, r.contrast.1],
            brightness_amplitude: r.brightness,
        }
    }
}

impl EotSection {
    pub fn to_config(&self) -> EotConfig {
        EotConfig {
            scale: self.scale,
            rotation: self.rotation,
            noise: self.noise,
            contrast: self.contrast,
            brightness: self.brightness,
            ranges: EotRanges {
                scale: (self.scale_range[0], self.scale_range[1]),
                max_angle_deg: self.max_angle,
                noise: self.noise_amplitude,
                contrast: (self.contrast_range[0], self.contrast_range[1]),
                brightness: self.brightness_amplitude,
            },
        }
    }

    pub fn set_subset(&mut self, cfg: &EotConfig) {
        self.scale = cfg.scale;
        self.rotation = cfg.rotation;
        self.noise = cfg.noise;
        self.contrast = cfg.contrast;
        self.brightness = cfg.brightness;
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub detector: Option<String>,
    pub data: Option<PathBuf>,
    pub artwork: Option<String>,
    pub init: Option<String>,
    pub patch_size: usize,
    pub ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sim_metric: String,
    pub eot: EotSection,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub plateau_window: usize,
    pub probe_every: usize,
    pub snapshot_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CraftConfig::default();
        Self {
            seed: c.seed,
            detector: None,
            data: None,
            artwork: None,
            init: None,
            patch_size: 32,
            ratio: c.ratio,
            alpha: c.weights.alpha,
            beta: c.weights.beta,
            gamma: c.weights.gamma,
            sim_metric: c.weights.sim_metric.to_string(),
            eot: EotSection::default(),
            iters: c.iterations,
            batch: c.batch,
            lr: c.lr,
            plateau_window: c.plateau_window,
            probe_every: c.probe_every,
            snapshot_every: 100,
            out: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.data = cfg.data.map(|p| resolve(&base, &p));
        cfg.out = cfg.out.map(|p| resolve(&base, &p));
        if let Some(d) = &cfg.detector {
            if d != "toy" && !d.starts_with(crate::adapter::ADAPTER_PREFIX) {
                cfg.detector = Some(resolve(&base, Path::new(d)).to_string_lossy().into_owned());
            }
        }
        if let Some(a) = &cfg.artwork {
            if !artwork::BUILTIN_NAMES.contains(&a.as_str()) {
                cfg.artwork = Some(resolve(&base, Path::new(a)).to_string_lossy().into_owned());
            }
        }
        Ok(cfg)
    }

    pub fn metric(&self) -> CliResult<SimMetric> {
        Ok(self.sim_metric.parse::<SimMetric>()?)
    }

    pub fn craft_config(&self) -> CliResult<CraftConfig> {
        let cfg = CraftConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                sim_metric: self.metric()?,
            },
            eot: self.eot.to_config(),
            ratio: self.ratio,
            iterations: self.iters,
            batch: self.batch,
            lr: self.lr,
            plateau_window: self.plateau_window,
            seed: self.seed,
            probe_every: self.probe_every,
            ..CraftConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn artwork_image(&self) -> CliResult<Option<ImageRGB>> {
        match &self.artwork {
            None => Ok(None),
            Some(a) => Ok(Some(load_artwork(a)?)),
        }
    }

    pub fn init_mode(&self) -> CliResult<InitMode> {
        let default = if self.artwork.is_some() { "target" } else { "random" };
        match self.init.as_deref().unwrap_or(default) {
            "target" => Ok(InitMode::FromTarget),
            "random" => Ok(InitMode::UniformRandom { seed: self.seed }),
            other => Err(CliError::Usage(format!("unknown init mode {other:?} (expected target or random)"))),
        }
    }

    /// Checks that crafting can start: required paths and the artwork.
    pub fn validate_for_craft(&self) -> CliResult<()> {
        if self.data.is_none() {
            return Err(CliError::Usage("no dataset manifest: set \"data\" or pass --data".into()));
        }
        if self.detector.is_none() {
            return Err(CliError::Usage("no detector: set \"detector\" or pass --detector".into()));
        }
        if self.beta > 0.0 && self.artwork.is_none() {
            return Err(CliError::Usage(format!(
                "beta = {} needs a target artwork: set \"artwork\" or pass --artwork",
                self.beta
            )));
        }
        self.craft_config()?;
        self.init_mode()?;
        Ok(())
    }
}

/// A built-in artwork by name, otherwise an image file.
pub fn load_artwork(spec: &str) -> CliResult<ImageRGB> {
    if artwork::BUILTIN_NAMES.contains(&spec) {
        Ok(artwork::builtin(spec, ARTWORK_RENDER_SIZE)?)
    } else {
        Ok(load_image(spec)?)
    }
}
