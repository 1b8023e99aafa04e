use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{AugmentationConfig, DeformationRange, IntRange, Range};
use super::{Derivation, PlanError, TransformPlan};
use crate::affine::AffineParams;
use crate::deformation::{Deformation, DeformationSpec};

/// Stable per-variant seed: the first 8 bytes (little endian) of
/// SHA-256 over the master seed, the length-prefixed stem and the variant.
pub fn stream_seed(master_seed: u64, source_stem: &str, variant_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update((source_stem.len() as u64).to_le_bytes());
    h.update(source_stem.as_bytes());
    h.update(variant_index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

struct Draw(ChaCha8Rng);

impl Draw {
    /// `lo + (hi - lo) * u` with `u` in `[0, 1)`, so `[v, v]` yields exactly `v`.
    fn uniform(&mut self, r: &Range) -> f64 {
        let u: f64 = self.0.gen();
        r.lo + (r.hi - r.lo) * u
    }

    fn int(&mut self, r: &IntRange) -> u32 {
        let u: f64 = self.0.gen();
        let span = (r.hi - r.lo + 1) as f64;
        r.lo + ((u * span) as u32).min(r.hi - r.lo)
    }

    fn chance(&mut self, p: f64) -> bool {
        let u: f64 = self.0.gen();
        u < p
    }
}

/// Samples the plan for one variant of one source page.
///
/// Every range is always drawn, in a fixed order, whether or not its
/// deformation ends up enabled; changing one probability therefore never
/// shifts the other parameters' draws.
pub fn sample_plan(
    config: &AugmentationConfig,
    source_stem: &str,
    variant_index: u32,
    frame_w: u32,
    frame_h: u32,
) -> Result<TransformPlan, PlanError> {
    let seed = stream_seed(config.seed, source_stem, variant_index);
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed));
    let (w, h) = (frame_w as f64, frame_h as f64);
    let mut deformations = Vec::new();
    for range in &config.deformations {
        let enabled = d.chance(range.probability());
        let deformation = match range {
            DeformationRange::Elastic {
                amplitude,
                cell,
                octaves,
                ..
            } => Deformation::Elastic {
                amplitude: d.uniform(amplitude),
                cell: d.uniform(cell),
                octaves: d.int(octaves),
                seed: d.0.gen(),
            },
            DeformationRange::Grid {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                ..
            } => Deformation::Grid {
                amplitude_x: d.uniform(amplitude_x),
                amplitude_y: d.uniform(amplitude_y),
                wavelength_x: d.uniform(wavelength_x),
                wavelength_y: d.uniform(wavelength_y),
            },
            DeformationRange::Barrel { k, .. } => Deformation::Barrel { k: d.uniform(k) },
            DeformationRange::Wave {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                phase_x,
                phase_y,
                ..
            } => Deformation::Wave {
                amplitude_x: d.uniform(amplitude_x),
                amplitude_y: d.uniform(amplitude_y),
                wavelength_x: d.uniform(wavelength_x),
                wavelength_y: d.uniform(wavelength_y),
                phase_x: d.uniform(phase_x),
                phase_y: d.uniform(phase_y),
            },
            DeformationRange::Swirl { strength, .. } => Deformation::Swirl {
                strength: d.uniform(strength),
            },
        };
        if enabled {
            deformations.push(DeformationSpec::new(deformation, w, h));
        }
    }
    let a = &config.affine;
    let affine = AffineParams {
        flip_h: d.chance(a.flip_h_probability),
        flip_v: d.chance(a.flip_v_probability),
        scale_x: d.uniform(&a.scale_x),
        scale_y: d.uniform(&a.scale_y),
        shear_x_deg: d.uniform(&a.shear_x_deg),
        shear_y_deg: d.uniform(&a.shear_y_deg),
        rotation_deg: d.uniform(&a.rotation_deg),
        perspective_x: d.uniform(&a.perspective_x),
        perspective_y: d.uniform(&a.perspective_y),
        translate_x: d.uniform(&a.translate_x),
        translate_y: d.uniform(&a.translate_y),
        frame_w: w,
        frame_h: h,
    };
    Ok(
        TransformPlan::new(deformations, affine)?.with_derivation(Derivation {
            source_stem: source_stem.to_string(),
            variant_index,
            master_seed: config.seed,
            stream_seed: seed,
        }),
    )
}
