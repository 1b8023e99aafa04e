use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::ClipPolicy;
use crate::deformation::AMPLITUDE_CAP_RATIO;
use crate::raster::{FillStyle, InverseSettings};
use crate::screening::ScreeningThresholds;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Closed interval `[lo, hi]`, written as a two-element JSON array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn check(&self, name: &str) -> Result<(), ConfigError> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(ConfigError::Invalid(format!(
                "{name}: range [{}, {}] must be finite with lo <= hi",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct IntRange {
    pub lo: u32,
    pub hi: u32,
}

impl From<[u32; 2]> for IntRange {
    fn from(v: [u32; 2]) -> Self {
        Self { lo: v[0], hi: v[1] }
    }
}

impl From<IntRange> for [u32; 2] {
    fn from(r: IntRange) -> Self {
        [r.lo, r.hi]
    }
}

fn zero_tau() -> Range {
    Range::new(0.0, TAU)
}

/// Sampling ranges for one deformation family. Each is enabled per variant
/// with `probability`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeformationRange {
    Elastic {
        probability: f64,
        amplitude: Range,
        cell: Range,
        octaves: IntRange,
    },
    Grid {
        probability: f64,
        amplitude_x: Range,
        amplitude_y: Range,
        wavelength_x: Range,
        wavelength_y: Range,
    },
    Barrel {
        probability: f64,
        k: Range,
    },
    Wave {
        probability: f64,
        amplitude_x: Range,
        amplitude_y: Range,
        wavelength_x: Range,
        wavelength_y: Range,
        #[serde(default = "zero_tau")]
        phase_x: Range,
        #[serde(default = "zero_tau")]
        phase_y: Range,
    },
    Swirl {
        probability: f64,
        strength: Range,
    },
}

impl DeformationRange {
    pub fn probability(&self) -> f64 {
        match *self {
            DeformationRange::Elastic { probability, .. }
            | DeformationRange::Grid { probability, .. }
            | DeformationRange::Barrel { probability, .. }
            | DeformationRange::Wave { probability, .. }
            | DeformationRange::Swirl { probability, .. } => probability,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DeformationRange::Elastic { .. } => "elastic",
            DeformationRange::Grid { .. } => "grid",
            DeformationRange::Barrel { .. } => "barrel",
            DeformationRange::Wave { .. } => "wave",
            DeformationRange::Swirl { .. } => "swirl",
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let kind = self.kind();
        check_probability(&format!("{kind}.probability"), self.probability())?;
        let bad = |m: String| Err(ConfigError::Invalid(format!("{kind}: {m}")));
        // Keeps the inverse iteration a contraction: slope 2*pi*A/lambda for
        // the periodic fields and A/cell for Perlin noise.
        let periodic = |ax: &Range, ay: &Range, lx: &Range, ly: &Range| {
            for (n, r) in [("amplitude_x", ax), ("amplitude_y", ay)] {
                r.check(&format!("{kind}.{n}"))?;
                if r.lo < 0.0 {
                    return bad(format!("{n} must be >= 0"));
                }
            }
            for (n, r) in [("wavelength_x", lx), ("wavelength_y", ly)] {
                r.check(&format!("{kind}.{n}"))?;
                if r.lo <= 0.0 {
                    return bad(format!("{n} must be > 0"));
                }
            }
            for (a, l, axis) in [(ax, lx, "x"), (ay, ly, "y")] {
                let slope = TAU * a.hi / l.lo;
                if slope > AMPLITUDE_CAP_RATIO {
                    return bad(format!(
                        "slope 2*pi*amplitude_{axis}/wavelength_{axis} reaches {slope:.3}, cap is {AMPLITUDE_CAP_RATIO}"
                    ));
                }
            }
            Ok(())
        };
        match self {
            DeformationRange::Elastic {
                amplitude,
                cell,
                octaves,
                ..
            } => {
                amplitude.check("elastic.amplitude")?;
                cell.check("elastic.cell")?;
                if amplitude.lo < 0.0 {
                    return bad("amplitude must be >= 0".into());
                }
                if cell.lo < 2.0 {
                    return bad("cell must be >= 2 px".into());
                }
                if octaves.lo < 1 || octaves.hi > 12 || octaves.lo > octaves.hi {
                    return bad("octaves must satisfy 1 <= lo <= hi <= 12".into());
                }
                if amplitude.hi > AMPLITUDE_CAP_RATIO * cell.lo {
                    return bad(format!(
                        "amplitude {} exceeds {AMPLITUDE_CAP_RATIO} x smallest cell {}",
                        amplitude.hi, cell.lo
                    ));
                }
                Ok(())
            }
            DeformationRange::Grid {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                ..
            } => periodic(amplitude_x, amplitude_y, wavelength_x, wavelength_y),
            DeformationRange::Wave {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                phase_x,
                phase_y,
                ..
            } => {
                phase_x.check("wave.phase_x")?;
                phase_y.check("wave.phase_y")?;
                periodic(amplitude_x, amplitude_y, wavelength_x, wavelength_y)
            }
            DeformationRange::Barrel { k, .. } => {
                k.check("barrel.k")?;
                if k.lo <= -1.0 / 3.0 {
                    return bad("k must stay above -1/3 to remain one-to-one".into());
                }
                if k.max_abs() > 1.0 {
                    return bad("|k| must be <= 1".into());
                }
                Ok(())
            }
            DeformationRange::Swirl { strength, .. } => {
                strength.check("swirl.strength")?;
                if strength.max_abs() > 1.0 {
                    return bad("|strength| must be <= 1 rad".into());
                }
                Ok(())
            }
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ConfigError::Invalid(format!(
            "{name}: probability {p} outside [0, 1]"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineRanges {
    pub flip_h_probability: f64,
    pub flip_v_probability: f64,
    pub scale_x: Range,
    pub scale_y: Range,
    pub shear_x_deg: Range,
    pub shear_y_deg: Range,
    pub rotation_deg: Range,
    pub perspective_x: Range,
    pub perspective_y: Range,
    pub translate_x: Range,
    pub translate_y: Range,
}

impl AffineRanges {
    /// Every range collapsed onto the identity.
    pub fn neutral() -> Self {
        Self {
            flip_h_probability: 0.0,
            flip_v_probability: 0.0,
            scale_x: Range::fixed(1.0),
            scale_y: Range::fixed(1.0),
            shear_x_deg: Range::fixed(0.0),
            shear_y_deg: Range::fixed(0.0),
            rotation_deg: Range::fixed(0.0),
            perspective_x: Range::fixed(0.0),
            perspective_y: Range::fixed(0.0),
            translate_x: Range::fixed(0.0),
            translate_y: Range::fixed(0.0),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        check_probability("affine.flip_h_probability", self.flip_h_probability)?;
        check_probability("affine.flip_v_probability", self.flip_v_probability)?;
        for (n, r) in [
            ("scale_x", &self.scale_x),
            ("scale_y", &self.scale_y),
            ("shear_x_deg", &self.shear_x_deg),
            ("shear_y_deg", &self.shear_y_deg),
            ("rotation_deg", &self.rotation_deg),
            ("perspective_x", &self.perspective_x),
            ("perspective_y", &self.perspective_y),
            ("translate_x", &self.translate_x),
            ("translate_y", &self.translate_y),
        ] {
            r.check(&format!("affine.{n}"))?;
        }
        if self.scale_x.lo <= 0.0 || self.scale_y.lo <= 0.0 {
            return Err(ConfigError::Invalid("affine scales must be > 0".into()));
        }
        if self.shear_x_deg.max_abs() >= 60.0 || self.shear_y_deg.max_abs() >= 60.0 {
            return Err(ConfigError::Invalid(
                "affine shear must stay below 60 degrees".into(),
            ));
        }
        Ok(())
    }
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            flip_h_probability: 0.0,
            flip_v_probability: 0.0,
            scale_x: Range::new(0.85, 1.15),
            scale_y: Range::new(0.85, 1.15),
            shear_x_deg: Range::new(-8.0, 8.0),
            shear_y_deg: Range::new(-8.0, 8.0),
            rotation_deg: Range::new(-20.0, 20.0),
            perspective_x: Range::new(0.0, 0.0002),
            perspective_y: Range::new(0.0, 0.0002),
            translate_x: Range::new(-20.0, 20.0),
            translate_y: Range::new(-20.0, 20.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseConfig {
    pub iters: u32,
    pub tol: f64,
    /// Lattice step of the interpolated backward map; 1 solves every pixel.
    pub map_step: u32,
    /// Residual a lattice cell must meet at its center to be interpolated.
    pub map_tol: f64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        let d = InverseSettings::default();
        Self {
            iters: d.iters,
            tol: d.tol,
            map_step: d.map_step,
            map_tol: d.map_tol,
        }
    }
}

impl From<InverseConfig> for InverseSettings {
    fn from(c: InverseConfig) -> Self {
        InverseSettings {
            iters: c.iters,
            tol: c.tol,
            map_step: c.map_step,
            map_tol: c.map_tol,
        }
    }
}

/// Batch augmentation settings, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub seed: u64,
    /// Augmented variants emitted per source page.
    pub per_image: u32,
    /// Deformations are sampled, and applied, in list order.
    pub deformations: Vec<DeformationRange>,
    pub affine: AffineRanges,
    pub fill: FillStyle,
    pub clip: ClipPolicy,
    pub screening: ScreeningThresholds,
    /// Longest polygon edge, in pixels, before annotation vertices are mapped
    /// through a non-linear plan. `None` keeps the original vertices.
    pub densify_max_edge_px: Option<f64>,
    pub inverse: InverseConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        let p = 0.35;
        Self {
            seed: 0,
            per_image: 1,
            deformations: vec![
                DeformationRange::Wave {
                    probability: p,
                    amplitude_x: Range::new(2.0, 10.0),
                    amplitude_y: Range::new(2.0, 10.0),
                    wavelength_x: Range::new(200.0, 600.0),
                    wavelength_y: Range::new(200.0, 600.0),
                    phase_x: zero_tau(),
                    phase_y: zero_tau(),
                },
                DeformationRange::Grid {
                    probability: p,
                    amplitude_x: Range::new(2.0, 10.0),
                    amplitude_y: Range::new(2.0, 10.0),
                    wavelength_x: Range::new(200.0, 600.0),
                    wavelength_y: Range::new(200.0, 600.0),
                },
                DeformationRange::Elastic {
                    probability: p,
                    amplitude: Range::new(2.0, 8.0),
                    cell: Range::new(48.0, 128.0),
                    octaves: IntRange { lo: 1, hi: 3 },
                },
                DeformationRange::Barrel {
                    probability: p,
                    k: Range::new(-0.15, 0.15),
                },
                DeformationRange::Swirl {
                    probability: p,
                    strength: Range::new(-0.12, 0.12),
                },
            ],
            affine: AffineRanges::default(),
            fill: FillStyle::default(),
            clip: ClipPolicy::default(),
            screening: ScreeningThresholds::default(),
            densify_max_edge_px: Some(8.0),
            inverse: InverseConfig::default(),
        }
    }
}

impl AugmentationConfig {
    /// A config whose every sampled plan is the identity.
    pub fn neutral() -> Self {
        Self {
            deformations: vec![],
            affine: AffineRanges::neutral(),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        // serde would also accept a positional array for the struct.
        if !text.trim_start().starts_with('{') {
            return Err(ConfigError::Invalid("config must be a JSON object".into()));
        }
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.per_image < 1 {
            return Err(ConfigError::Invalid("per_image must be >= 1".into()));
        }
        for d in &self.deformations {
            d.validate()?;
        }
        self.affine.validate()?;
        self.clip.validate().map_err(ConfigError::Invalid)?;
        self.screening.validate().map_err(ConfigError::Invalid)?;
        if let Some(e) = self.densify_max_edge_px {
            if !(e > 0.0 && e.is_finite()) {
                return Err(ConfigError::Invalid(
                    "densify_max_edge_px must be > 0".into(),
                ));
            }
        }
        if self.inverse.iters == 0
            || !(self.inverse.tol > 0.0)
            || self.inverse.map_step == 0
            || !(self.inverse.map_tol > 0.0)
        {
            return Err(ConfigError::Invalid(
                "inverse.iters and inverse.map_step must be >= 1, inverse.tol and inverse.map_tol > 0".into(),
            ));
        }
        Ok(())
    }
}
