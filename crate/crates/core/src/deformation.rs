//! Non-linear displacement fields.
//!
//! Every field is a forward point map `f(p) = p + d(p)` over the page frame.
//! Annotation vertices go through `f` directly; pixel resampling needs the
//! inverse, which is recovered iteratively from `x_0 = q - d(q)` (or a
//! neighbour's solution) by damped Newton steps on `x + d(x) = q`. The
//! amplitude caps in the pipeline config keep `d` a contraction, so the
//! solution is unique.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeformationError {
    #[error("invalid deformation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("inverse map did not converge (residual {residual:.4} px)")]
pub struct NonConverged {
    pub best: Point2,
    pub residual: f64,
}

/// Kind-specific parameters. Amplitudes are in pixels, wavelengths and cell
/// sizes in pixels, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deformation {
    /// Two independent Perlin channels scaled by `amplitude`.
    Elastic {
        amplitude: f64,
        cell: f64,
        octaves: u32,
        seed: u64,
    },
    /// Product-of-sines lattice warp.
    Grid {
        amplitude_x: f64,
        amplitude_y: f64,
        wavelength_x: f64,
        wavelength_y: f64,
    },
    /// Radial lens model; `k > 0` barrel, `k < 0` pincushion. The radius,
    /// in units of the half diagonal, maps as `r(1 + k r^2)` up to 1 and
    /// continues along the tangent beyond, so the map stays a bijection of
    /// the plane.
    Barrel { k: f64 },
    /// Sinusoidal waves along both axes.
    Wave {
        amplitude_x: f64,
        amplitude_y: f64,
        wavelength_x: f64,
        wavelength_y: f64,
        #[serde(default)]
        phase_x: f64,
        #[serde(default)]
        phase_y: f64,
    },
    /// Rotation about the center by an angle linear in the radius.
    Swirl { strength: f64 },
}

impl Deformation {
    pub fn name(&self) -> &'static str {
        match self {
            Deformation::Elastic { .. } => "elastic",
            Deformation::Grid { .. } => "grid",
            Deformation::Barrel { .. } => "barrel",
            Deformation::Wave { .. } => "wave",
            Deformation::Swirl { .. } => "swirl",
        }
    }

    pub fn is_neutral(&self) -> bool {
        match *self {
            Deformation::Elastic { amplitude, .. } => amplitude == 0.0,
            Deformation::Grid {
                amplitude_x,
                amplitude_y,
                ..
            }
            | Deformation::Wave {
                amplitude_x,
                amplitude_y,
                ..
            } => amplitude_x == 0.0 && amplitude_y == 0.0,
            Deformation::Barrel { k } => k == 0.0,
            Deformation::Swirl { strength } => strength == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub deformation: Deformation,
    pub frame_w: f64,
    pub frame_h: f64,
}

impl DeformationSpec {
    pub fn new(deformation: Deformation, frame_w: f64, frame_h: f64) -> Self {
        Self {
            deformation,
            frame_w,
            frame_h,
        }
    }

    pub fn validate(&self) -> Result<(), DeformationError> {
        let bad = |msg: String| Err(DeformationError::InvalidSpec(msg));
        if !(self.frame_w >= 1.0 && self.frame_h >= 1.0) {
            return bad(format!("frame {}x{}", self.frame_w, self.frame_h));
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self.deformation {
            Deformation::Elastic {
                amplitude,
                cell,
                octaves,
                ..
            } => {
                if !nonneg(amplitude) {
                    return bad(format!("elastic amplitude {amplitude}"));
                }
                if !(cell.is_finite() && cell >= 2.0) {
                    return bad(format!("elastic cell {cell} (need >= 2)"));
                }
                if !(1..=12).contains(&octaves) {
                    return bad(format!("elastic octaves {octaves}"));
                }
            }
            Deformation::Grid {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
            } => {
                if !nonneg(amplitude_x) || !nonneg(amplitude_y) {
                    return bad("grid amplitudes must be >= 0".into());
                }
                if !positive(wavelength_x) || !positive(wavelength_y) {
                    return bad("grid wavelengths must be > 0".into());
                }
            }
            Deformation::Wave {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                phase_x,
                phase_y,
            } => {
                if !nonneg(amplitude_x) || !nonneg(amplitude_y) {
                    return bad("wave amplitudes must be >= 0".into());
                }
                if !positive(wavelength_x) || !positive(wavelength_y) {
                    return bad("wave wavelengths must be > 0".into());
                }
                if !phase_x.is_finite() || !phase_y.is_finite() {
                    return bad("wave phase must be finite".into());
                }
            }
            Deformation::Barrel { k } => {
                // The radial slope 1 + 3k r^2 must stay positive up to r = 1.
                if !(k.is_finite() && k > -1.0 / 3.0) {
                    return bad(format!("barrel k {k} (need > -1/3)"));
                }
            }
            Deformation::Swirl { strength } => {
                if !strength.is_finite() {
                    return bad("swirl strength must be finite".into());
                }
            }
        }
        Ok(())
    }
}

const GRADIENT_COUNT: usize = 256;

fn gradient_table() -> &'static [[f64; 2]; GRADIENT_COUNT] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[[f64; 2]; GRADIENT_COUNT]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; 2]; GRADIENT_COUNT];
        for (k, g) in t.iter_mut().enumerate() {
            let a = TAU * k as f64 / GRADIENT_COUNT as f64;
            *g = [a.cos(), a.sin()];
        }
        t
    })
}

const HASH_X: u64 = 0x9E37_79B9_7F4A_7C15;
const HASH_Y: u64 = 0xC2B2_AE3D_27D4_EB4F;

/// Gradient index for a lattice corner. One multiply-xorshift round over
/// the combined coordinates; the top byte picks the gradient.
#[inline]
fn lattice_hash(seed: u64, ix: i64, iy: i64) -> usize {
    hash_finish(seed ^ (ix as u64).wrapping_mul(HASH_X) ^ (iy as u64).wrapping_mul(HASH_Y))
}

#[inline]
fn hash_finish(mut h: u64) -> usize {
    h ^= h >> 32;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    (h >> 56) as usize
}

/// `floor` for lattice indexing. `f64::floor` is a libm call on baseline
/// x86-64, which dominated noise evaluation.
#[inline]
fn floor_i64(x: f64) -> i64 {
    let t = x as i64;
    t - i64::from(x < t as f64)
}

#[inline]
fn smootherstep(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Single-octave gradient noise at `(x, y)` in lattice units, in `[-1, 1]`.
#[inline]
fn gradient_noise(seed: u64, x: f64, y: f64) -> f64 {
    let table = gradient_table();
    let (ix, iy) = (floor_i64(x), floor_i64(y));
    let (fx, fy) = (x - ix as f64, y - iy as f64);
    let corner = |dx: i64, dy: i64| {
        let g = table[lattice_hash(seed, ix + dx, iy + dy)];
        g[0] * (fx - dx as f64) + g[1] * (fy - dy as f64)
    };
    let (n00, n10, n01, n11) = (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1));
    let (u, v) = (smootherstep(fx), smootherstep(fy));
    let nx0 = n00 + u * (n10 - n00);
    let nx1 = n01 + u * (n11 - n01);
    // Unit gradients bound the raw value by sqrt(1/2).
    ((nx0 + v * (nx1 - nx0)) * std::f64::consts::SQRT_2).clamp(-1.0, 1.0)
}

/// Fractal gradient noise: `octaves` layers with persistence 0.5,
/// renormalized to `[-1, 1]`. Vanishes on multiples of `cell`.
pub fn perlin2(seed: u64, cell: f64, octaves: u32, p: Point2) -> f64 {
    let mut total = 0.0;
    let mut weight = 1.0;
    let mut norm = 0.0;
    let mut scale = 1.0;
    for o in 0..octaves.max(1) {
        let s = seed.wrapping_add((o as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        // Dividing (rather than multiplying by 1/cell) keeps lattice points exact.
        total += weight * gradient_noise(s, p.x * scale / cell, p.y * scale / cell);
        norm += weight;
        weight *= 0.5;
        scale *= 2.0;
    }
    total / norm
}

#[inline]
fn smootherstep_slope(t: f64) -> f64 {
    30.0 * t * t * (t - 1.0) * (t - 1.0)
}

/// Two independent noise channels sharing one lattice walk, each with its
/// gradient in pixel units: `[(value, d/dx, d/dy); 2]`.
fn perlin2_pair_grad(
    seed_a: u64,
    seed_b: u64,
    cell: f64,
    octaves: u32,
    p: Point2,
) -> [(f64, f64, f64); 2] {
    let table = gradient_table();
    let mut acc = [(0.0, 0.0, 0.0); 2];
    let mut weight = 1.0;
    let mut norm = 0.0;
    let mut scale = 1.0;
    for o in 0..octaves.max(1) {
        let off = (o as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        let (x, y) = (p.x * scale / cell, p.y * scale / cell);
        let (ix, iy) = (floor_i64(x), floor_i64(y));
        let (fx, fy) = (x - ix as f64, y - iy as f64);
        let (u, v) = (smootherstep(fx), smootherstep(fy));
        let (du, dv) = (smootherstep_slope(fx), smootherstep_slope(fy));
        let chain = scale / cell;
        let hx = [ix, ix + 1].map(|i| (i as u64).wrapping_mul(HASH_X));
        let hy = [iy, iy + 1].map(|i| (i as u64).wrapping_mul(HASH_Y));
        for (slot, seed) in acc.iter_mut().zip([seed_a, seed_b]) {
            let s = seed.wrapping_add(off);
            let corner = |dx: usize, dy: usize| {
                let g = table[hash_finish(s ^ hx[dx] ^ hy[dy])];
                (
                    g[0] * (fx - dx as f64) + g[1] * (fy - dy as f64),
                    g[0],
                    g[1],
                )
            };
            let (n00, n10, n01, n11) = (corner(0, 0), corner(1, 0), corner(0, 1), corner(1, 1));
            let nx0 = n00.0 + u * (n10.0 - n00.0);
            let nx1 = n01.0 + u * (n11.0 - n01.0);
            let ax0 = n00.1 + u * (n10.1 - n00.1) + du * (n10.0 - n00.0);
            let ax1 = n01.1 + u * (n11.1 - n01.1) + du * (n11.0 - n01.0);
            let bx0 = n00.2 + u * (n10.2 - n00.2);
            let bx1 = n01.2 + u * (n11.2 - n01.2);
            let raw = (nx0 + v * (nx1 - nx0)) * std::f64::consts::SQRT_2;
            let (val, gx, gy) = if raw.abs() > 1.0 {
                (raw.clamp(-1.0, 1.0), 0.0, 0.0)
            } else {
                let k = std::f64::consts::SQRT_2 * chain;
                (
                    raw,
                    (ax0 + v * (ax1 - ax0)) * k,
                    (bx0 + v * (bx1 - bx0) + dv * (nx1 - nx0)) * k,
                )
            };
            slot.0 += weight * val;
            slot.1 += weight * gx;
            slot.2 += weight * gy;
        }
        norm += weight;
        weight *= 0.5;
        scale *= 2.0;
    }
    acc.map(|(v, gx, gy)| (v / norm, gx / norm, gy / norm))
}

const ELASTIC_Y_SEED_XOR: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// A constructed field with its frame constants precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementField {
    spec: DeformationSpec,
    center: Point2,
    r_max: f64,
}

pub fn make_field(spec: &DeformationSpec) -> Result<DisplacementField, DeformationError> {
    spec.validate()?;
    let center = Point2::new(spec.frame_w / 2.0, spec.frame_h / 2.0);
    Ok(DisplacementField {
        spec: *spec,
        center,
        r_max: center.norm(),
    })
}

impl DisplacementField {
    pub fn spec(&self) -> &DeformationSpec {
        &self.spec
    }

    pub fn is_identity(&self) -> bool {
        self.spec.deformation.is_neutral()
    }

    /// Length over which the displacement changes shape: the finest noise
    /// cell, the shorter wavelength, or the frame radius for radial fields.
    pub fn feature_length(&self) -> f64 {
        match self.spec.deformation {
            Deformation::Elastic { cell, octaves, .. } => {
                cell / 2f64.powi(octaves.max(1) as i32 - 1)
            }
            Deformation::Grid {
                wavelength_x,
                wavelength_y,
                ..
            }
            | Deformation::Wave {
                wavelength_x,
                wavelength_y,
                ..
            } => wavelength_x.min(wavelength_y),
            Deformation::Barrel { .. } | Deformation::Swirl { .. } => self.r_max,
        }
    }

    /// Upper bound on `|d(p)|` over the frame.
    pub fn amplitude_bound(&self) -> f64 {
        match self.spec.deformation {
            Deformation::Elastic { amplitude, .. } => amplitude,
            Deformation::Grid {
                amplitude_x,
                amplitude_y,
                ..
            }
            | Deformation::Wave {
                amplitude_x,
                amplitude_y,
                ..
            } => amplitude_x.hypot(amplitude_y),
            Deformation::Barrel { k } => k.abs() * self.r_max,
            Deformation::Swirl { strength } => strength.abs() * self.r_max,
        }
    }

    #[inline]
    pub fn displacement(&self, p: Point2) -> Point2 {
        match self.spec.deformation {
            Deformation::Elastic {
                amplitude,
                cell,
                octaves,
                seed,
            } => {
                if amplitude == 0.0 {
                    return Point2::default();
                }
                // Each channel lies in [-1, 1]; scaling by A / sqrt(2) bounds
                // the norm by A without a clamp, keeping the field smooth.
                Point2::new(
                    perlin2(seed, cell, octaves, p),
                    perlin2(seed ^ ELASTIC_Y_SEED_XOR, cell, octaves, p),
                ) * (amplitude * FRAC_1_SQRT_2)
            }
            Deformation::Grid {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
            } => {
                let s = (TAU * p.x / wavelength_x).sin() * (TAU * p.y / wavelength_y).sin();
                Point2::new(amplitude_x * s, amplitude_y * s)
            }
            Deformation::Wave {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                phase_x,
                phase_y,
            } => Point2::new(
                amplitude_x * (TAU * p.y / wavelength_x + phase_x).sin(),
                amplitude_y * (TAU * p.x / wavelength_y + phase_y).sin(),
            ),
            Deformation::Barrel { k } => {
                let u = p - self.center;
                let rho = u.norm() / self.r_max;
                if rho <= 1.0 {
                    u * (k * rho * rho)
                } else {
                    u * (3.0 * k - 2.0 * k / rho)
                }
            }
            Deformation::Swirl { strength } => {
                let u = p - self.center;
                let theta = strength * u.norm() / self.r_max;
                let (s, c) = theta.sin_cos();
                Point2::new(c * u.x - s * u.y, s * u.x + c * u.y) - u
            }
        }
    }

    #[inline]
    pub fn forward(&self, p: Point2) -> Point2 {
        p + self.displacement(p)
    }

    pub fn inverse(&self, q: Point2, iters: u32, tol: f64) -> Result<Point2, NonConverged> {
        if self.is_identity() {
            return Ok(q);
        }
        self.inverse_from(q, q - self.displacement(q), iters, tol)
    }

    /// Same solve as [`inverse`](Self::inverse) from a caller-supplied
    /// starting point, e.g. a neighbouring pixel's solution.
    ///
    /// Near a fold of a strong field Newton can stall on a non-zero local
    /// minimum of the residual; the solve is then restarted from `q - d(q)`,
    /// `q` and `q` offset by the amplitude bound along each axis, each with
    /// the full iteration budget. The best iterate over all starts is kept.
    #[inline]
    pub fn inverse_from(
        &self,
        q: Point2,
        start: Point2,
        iters: u32,
        tol: f64,
    ) -> Result<Point2, NonConverged> {
        let mut best = match self.newton(q, start, iters, tol) {
            Ok(x) => return Ok(x),
            Err(e) => e,
        };
        let a = self.amplitude_bound();
        let restarts = [
            q - self.displacement(q),
            q,
            q + Point2::new(a, 0.0),
            q - Point2::new(a, 0.0),
            q + Point2::new(0.0, a),
            q - Point2::new(0.0, a),
        ];
        for s in restarts {
            match self.newton(q, s, iters, tol) {
                Ok(x) => return Ok(x),
                Err(e) if e.residual < best.residual => best = e,
                Err(_) => {}
            }
        }
        Err(best)
    }

    /// Damped Newton on `x + d(x) = q` with the analytic Jacobian. A step
    /// that does not lower the residual is retried from the best point at
    /// half the length; a singular Jacobian falls back to the plain step
    /// `q - d(x)`.
    #[inline]
    fn newton(
        &self,
        q: Point2,
        start: Point2,
        iters: u32,
        tol: f64,
    ) -> Result<Point2, NonConverged> {
        let mut x = start;
        let mut best = x;
        let mut best_res = f64::INFINITY;
        let mut best_step = Point2::default();
        let mut damp = 1.0;
        for _ in 0..iters.max(1) {
            let (d, j) = self.displacement_jacobian(x);
            let r = q - x - d;
            let res = r.norm();
            if !(res < best_res) {
                damp *= 0.5;
                x = best + best_step * damp;
                continue;
            }
            best = x;
            best_res = res;
            let (a, b, c, e) = (1.0 + j[0], j[1], j[2], 1.0 + j[3]);
            let det = a * e - b * c;
            let regular = det.is_finite() && det.abs() > 1e-6;
            best_step = if regular {
                Point2::new((e * r.x - b * r.y) / det, (a * r.y - c * r.x) / det)
            } else {
                r
            };
            if res <= tol {
                // The pending Newton step is free and sharpens the answer
                // quadratically, which keeps scanline extrapolation smooth.
                return Ok(if regular && best_step.norm() <= 2.0 * res {
                    x + best_step
                } else {
                    x
                });
            }
            damp = 1.0;
            x = best + best_step;
        }
        Err(NonConverged {
            best,
            residual: best_res,
        })
    }

    /// `d(p)` together with its Jacobian `[dx/dx, dx/dy, dy/dx, dy/dy]`.
    #[inline]
    pub fn displacement_jacobian(&self, p: Point2) -> (Point2, [f64; 4]) {
        match self.spec.deformation {
            Deformation::Elastic {
                amplitude,
                cell,
                octaves,
                seed,
            } => {
                if amplitude == 0.0 {
                    return (Point2::default(), [0.0; 4]);
                }
                let [(nx, gxx, gxy), (ny, gyx, gyy)] =
                    perlin2_pair_grad(seed, seed ^ ELASTIC_Y_SEED_XOR, cell, octaves, p);
                let k = amplitude * FRAC_1_SQRT_2;
                (Point2::new(nx, ny) * k, [gxx, gxy, gyx, gyy].map(|g| g * k))
            }
            Deformation::Grid {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
            } => {
                let (kx, ky) = (TAU / wavelength_x, TAU / wavelength_y);
                let (sx, cx) = (TAU * p.x / wavelength_x).sin_cos();
                let (sy, cy) = (TAU * p.y / wavelength_y).sin_cos();
                let s = sx * sy;
                let (dsx, dsy) = (kx * cx * sy, ky * sx * cy);
                (
                    Point2::new(amplitude_x * s, amplitude_y * s),
                    [
                        amplitude_x * dsx,
                        amplitude_x * dsy,
                        amplitude_y * dsx,
                        amplitude_y * dsy,
                    ],
                )
            }
            Deformation::Wave {
                amplitude_x,
                amplitude_y,
                wavelength_x,
                wavelength_y,
                phase_x,
                phase_y,
            } => {
                let (sx, cx) = (TAU * p.y / wavelength_x + phase_x).sin_cos();
                let (sy, cy) = (TAU * p.x / wavelength_y + phase_y).sin_cos();
                (
                    Point2::new(amplitude_x * sx, amplitude_y * sy),
                    [
                        0.0,
                        amplitude_x * TAU / wavelength_x * cx,
                        amplitude_y * TAU / wavelength_y * cy,
                        0.0,
                    ],
                )
            }
            Deformation::Barrel { k } => {
                let u = p - self.center;
                let r2 = u.dot(u);
                let big_r = self.r_max;
                // d = s(rho) u, so J = s I + (ds/drho) u u^T / (|u| R).
                let (s, g) = if r2 <= big_r * big_r {
                    (k * r2 / (big_r * big_r), 2.0 * k / (big_r * big_r))
                } else {
                    let n = r2.sqrt();
                    (3.0 * k - 2.0 * k * big_r / n, 2.0 * k * big_r / (n * r2))
                };
                (
                    u * s,
                    [
                        s + g * u.x * u.x,
                        g * u.x * u.y,
                        g * u.x * u.y,
                        s + g * u.y * u.y,
                    ],
                )
            }
            Deformation::Swirl { strength } => {
                let u = p - self.center;
                let r = u.norm();
                let theta = strength * r / self.r_max;
                let (s, c) = theta.sin_cos();
                let d = Point2::new(c * u.x - s * u.y, s * u.x + c * u.y) - u;
                let mut j = [c - 1.0, -s, s, c - 1.0];
                if r > 0.0 {
                    // Rotation rate times the gradient of the angle.
                    let (tx, ty) = (-s * u.x - c * u.y, c * u.x - s * u.y);
                    let g = strength / (self.r_max * r);
                    let (gx, gy) = (g * u.x, g * u.y);
                    j[0] += tx * gx;
                    j[1] += tx * gy;
                    j[2] += ty * gx;
                    j[3] += ty * gy;
                }
                (d, j)
            }
        }
    }
}

pub fn forward_map(field: &DisplacementField, p: Point2) -> Point2 {
    field.forward(p)
}

pub fn inverse_map(
    field: &DisplacementField,
    q: Point2,
    iters: u32,
    tol: f64,
) -> Result<Point2, NonConverged> {
    field.inverse(q, iters, tol)
}

/// Fields applied in list order on the forward path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldStack {
    fields: Vec<DisplacementField>,
}

impl FieldStack {
    pub fn new(specs: &[DeformationSpec]) -> Result<Self, DeformationError> {
        let fields = specs
            .iter()
            .map(make_field)
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|f| !f.is_identity())
            .collect();
        Ok(Self { fields })
    }

    pub fn is_identity(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[DisplacementField] {
        &self.fields
    }

    pub fn forward(&self, p: Point2) -> Point2 {
        self.fields.iter().fold(p, |acc, f| f.forward(acc))
    }

    /// Inverts the stack stage by stage in reverse order. A non-converged
    /// stage keeps its best iterate and marks the whole result.
    pub fn inverse(&self, q: Point2, iters: u32, tol: f64) -> (Point2, bool) {
        let mut ok = true;
        let mut x = q;
        for f in self.fields.iter().rev() {
            x = match f.inverse(x, iters, tol) {
                Ok(p) => p,
                Err(e) => {
                    ok = false;
                    e.best
                }
            };
        }
        (x, ok)
    }

    /// Inverse for consecutive pixels along a scanline. `warm` carries one
    /// slot per field; each starts from a quadratic extrapolation of the
    /// displacements found for the three previous pixels.
    pub fn inverse_warm(
        &self,
        q: Point2,
        warm: &mut [WarmStart],
        iters: u32,
        tol: f64,
    ) -> (Point2, bool) {
        debug_assert_eq!(warm.len(), self.fields.len());
        let mut ok = true;
        let mut x = q;
        for (f, w) in self.fields.iter().zip(warm.iter_mut()).rev() {
            let guess = match (w.d1, w.d2, w.d3) {
                (Some(d1), Some(d2), Some(d3)) => x - ((d1 - d2) * 3.0 + d3),
                (Some(d1), Some(d2), None) => x - (d1 * 2.0 - d2),
                (Some(d1), None, _) => x - d1,
                _ => x - f.displacement(x),
            };
            let sol = match f.inverse_from(x, guess, iters, tol) {
                Ok(p) => p,
                Err(e) => {
                    ok = false;
                    e.best
                }
            };
            w.d3 = w.d2;
            w.d2 = w.d1;
            w.d1 = Some(x - sol);
            x = sol;
        }
        (x, ok)
    }
}

/// Per-field state for [`FieldStack::inverse_warm`]; reset it at the start of
/// each scanline.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WarmStart {
    d1: Option<Point2>,
    d2: Option<Point2>,
    d3: Option<Point2>,
}

/// Largest amplitude-to-scale ratio the pipeline config accepts. Sinusoidal
/// fields stay contractions under it; strong gradient noise can fold
/// slightly, which the restarting inverse tolerates.
pub const AMPLITUDE_CAP_RATIO: f64 = 0.4;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(d: Deformation, w: f64, h: f64) -> DisplacementField {
        make_field(&DeformationSpec::new(d, w, h)).unwrap()
    }

    fn wave(ax: f64, lx: f64) -> Deformation {
        Deformation::Wave {
            amplitude_x: ax,
            amplitude_y: 0.0,
            wavelength_x: lx,
            wavelength_y: lx,
            phase_x: 0.0,
            phase_y: 0.0,
        }
    }

    #[test]
    fn perlin_vanishes_on_lattice() {
        for seed in [0u64, 1, 42, u64::MAX] {
            for (i, j) in [(0, 0), (3, -2), (-7, 11), (100, 5)] {
                let p = Point2::new(i as f64 * 32.0, j as f64 * 32.0);
                assert_eq!(perlin2(seed, 32.0, 1, p), 0.0);
                assert_eq!(perlin2(seed, 32.0, 4, p), 0.0);
            }
        }
    }

    #[test]
    fn perlin_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let p = Point2::new(
                rng.gen_range(-5000.0..5000.0),
                rng.gen_range(-5000.0..5000.0),
            );
            let v = perlin2(9, 40.0, 3, p);
            assert_eq!(v, perlin2(9, 40.0, 3, p));
            assert!((-1.0..=1.0).contains(&v));
            sum += v;
        }
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn neutral_fields_are_identity() {
        let neutral = [
            Deformation::Elastic {
                amplitude: 0.0,
                cell: 64.0,
                octaves: 2,
                seed: 5,
            },
            Deformation::Grid {
                amplitude_x: 0.0,
                amplitude_y: 0.0,
                wavelength_x: 50.0,
                wavelength_y: 80.0,
            },
            Deformation::Barrel { k: 0.0 },
            wave(0.0, 100.0),
            Deformation::Swirl { strength: 0.0 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in neutral {
            let f = field(d, 640.0, 480.0);
            assert!(f.is_identity());
            for _ in 0..100 {
                let p = Point2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
                assert_eq!(f.forward(p), p);
                assert_eq!(f.inverse(p, 8, 0.05).unwrap(), p);
            }
        }
    }

    #[test]
    fn pincushion_inverts_beyond_the_frame() {
        let f = field(Deformation::Barrel { k: -0.3 }, 640.0, 480.0);
        let c = Point2::new(320.0, 240.0);
        let mut last = 0.0;
        for step in 1..=60 {
            // Out to three half diagonals along a corner direction.
            let q = c + Point2::new(0.8, 0.6) * (20.0 * step as f64);
            let r = (f.forward(q) - c).norm();
            assert!(r > last, "radial map must increase at step {step}");
            last = r;
            let p = f.inverse(q, 30, 1e-9).unwrap();
            assert!((f.forward(p) - q).norm() < 1e-6, "{q:?}");
        }
    }

    #[test]
    fn barrel_and_swirl_fix_the_center() {
        for k in [-0.3, -0.1, 0.2, 0.9] {
            let f = field(Deformation::Barrel { k }, 640.0, 480.0);
            assert_eq!(
                f.forward(Point2::new(320.0, 240.0)),
                Point2::new(320.0, 240.0)
            );
        }
        let f = field(Deformation::Swirl { strength: 0.7 }, 640.0, 480.0);
        assert_eq!(
            f.forward(Point2::new(320.0, 240.0)),
            Point2::new(320.0, 240.0)
        );
    }

    #[test]
    fn wave_peak_displacement() {
        let lambda = 120.0;
        let f = field(wave(5.0, lambda), 640.0, 480.0);
        let p = Point2::new(17.0, lambda / 4.0);
        let q = f.forward(p);
        assert!((q.x - p.x - 5.0).abs() < 1e-12);
        assert_eq!(q.y, p.y);
    }

    #[test]
    fn rejects_invalid_specs() {
        let bad = [
            Deformation::Elastic {
                amplitude: -1.0,
                cell: 64.0,
                octaves: 1,
                seed: 0,
            },
            Deformation::Elastic {
                amplitude: 1.0,
                cell: 1.0,
                octaves: 1,
                seed: 0,
            },
            Deformation::Elastic {
                amplitude: 1.0,
                cell: 64.0,
                octaves: 0,
                seed: 0,
            },
            Deformation::Grid {
                amplitude_x: 1.0,
                amplitude_y: 1.0,
                wavelength_x: 0.0,
                wavelength_y: 1.0,
            },
            wave(f64::NAN, 10.0),
            Deformation::Barrel { k: -0.5 },
            Deformation::Swirl {
                strength: f64::INFINITY,
            },
        ];
        for d in bad {
            assert!(
                make_field(&DeformationSpec::new(d, 100.0, 100.0)).is_err(),
                "{d:?}"
            );
        }
        assert!(make_field(&DeformationSpec::new(
            Deformation::Barrel { k: 0.1 },
            0.0,
            10.0
        ))
        .is_err());
    }

    #[test]
    fn displacement_respects_amplitude_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let families = [
            Deformation::Elastic {
                amplitude: 6.0,
                cell: 50.0,
                octaves: 3,
                seed: 77,
            },
            Deformation::Grid {
                amplitude_x: 4.0,
                amplitude_y: 3.0,
                wavelength_x: 90.0,
                wavelength_y: 70.0,
            },
            Deformation::Barrel { k: -0.2 },
            Deformation::Wave {
                amplitude_x: 4.0,
                amplitude_y: 7.0,
                wavelength_x: 90.0,
                wavelength_y: 130.0,
                phase_x: 0.3,
                phase_y: 1.1,
            },
            Deformation::Swirl { strength: 0.12 },
        ];
        for d in families {
            let f = field(d, 640.0, 480.0);
            let bound = f.amplitude_bound();
            for _ in 0..10_000 {
                let p = Point2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
                assert!((f.forward(p) - p).norm() <= bound + 1e-9, "{d:?}");
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let kinds = [
            Deformation::Elastic {
                amplitude: 8.0,
                cell: 48.0,
                octaves: 3,
                seed: 11,
            },
            // Strong, coarse noise.
            Deformation::Elastic {
                amplitude: 30.0,
                cell: 40.0,
                octaves: 1,
                seed: 4,
            },
            Deformation::Grid {
                amplitude_x: 4.0,
                amplitude_y: 3.0,
                wavelength_x: 150.0,
                wavelength_y: 210.0,
            },
            Deformation::Wave {
                amplitude_x: 6.0,
                amplitude_y: 2.0,
                wavelength_x: 120.0,
                wavelength_y: 330.0,
                phase_x: 0.3,
                phase_y: 2.0,
            },
            Deformation::Barrel { k: -0.12 },
            Deformation::Swirl { strength: 0.3 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        const H: f64 = 1e-5;
        for k in kinds {
            let f = field(k, 640.0, 480.0);
            for _ in 0..300 {
                // Also off the frame, where the barrel model is linear.
                let p = Point2::new(rng.gen_range(-300.0..940.0), rng.gen_range(-200.0..680.0));
                let (d, j) = f.displacement_jacobian(p);
                assert!((d - f.displacement(p)).norm() < 1e-12, "{k:?}");
                let ex = Point2::new(H, 0.0);
                let ey = Point2::new(0.0, H);
                let cx = (f.displacement(p + ex) - f.displacement(p - ex)) * (0.5 / H);
                let cy = (f.displacement(p + ey) - f.displacement(p - ey)) * (0.5 / H);
                let fd = [cx.x, cy.x, cx.y, cy.y];
                for (a, b) in j.iter().zip(fd) {
                    assert!((a - b).abs() < 1e-4, "{k:?} at {p:?}: {j:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn wave_inverse_residual() {
        let f = field(
            Deformation::Wave {
                amplitude_x: 2.0,
                amplitude_y: 2.0,
                wavelength_x: 200.0,
                wavelength_y: 200.0,
                phase_x: 0.0,
                phase_y: 0.0,
            },
            640.0,
            480.0,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let q = Point2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let x = f.inverse(q, 8, 0.05).unwrap();
            assert!((f.forward(x) - q).norm() < 0.05);
        }
    }

    #[test]
    fn strong_perlin_inverse_converges_on_grid() {
        let cell = 64.0;
        let f = field(
            Deformation::Elastic {
                amplitude: 0.5 * cell,
                cell,
                octaves: 1,
                seed: 1234,
            },
            640.0,
            480.0,
        );
        let mut total = 0usize;
        let mut ok = 0usize;
        for y in 0..480 {
            for x in 0..640 {
                let q = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                total += 1;
                if let Ok(p) = f.inverse(q, 8, 0.05) {
                    assert!((f.forward(p) - q).norm() <= 0.05);
                    ok += 1;
                }
            }
        }
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.999, "converged fraction {frac}");
    }

    #[test]
    fn non_converged_reports_best_iterate() {
        // Amplitude far above the cell size folds the field over itself.
        let f = field(
            Deformation::Elastic {
                amplitude: 40.0,
                cell: 8.0,
                octaves: 2,
                seed: 5,
            },
            640.0,
            480.0,
        );
        let mut failures = 0;
        for i in 0..200 {
            let q = Point2::new(3.1 * i as f64, 1.7 * i as f64);
            if let Err(e) = f.inverse(q, 4, 1e-6) {
                failures += 1;
                assert!(e.residual > 1e-6 && e.best.is_finite());
            }
        }
        assert!(failures > 0);
    }

    #[test]
    fn stack_inverts_in_reverse_order() {
        let specs = [
            DeformationSpec::new(wave(3.0, 150.0), 640.0, 480.0),
            DeformationSpec::new(Deformation::Swirl { strength: 0.1 }, 640.0, 480.0),
            DeformationSpec::new(Deformation::Barrel { k: 0.08 }, 640.0, 480.0),
        ];
        let stack = FieldStack::new(&specs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let p = Point2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let q = stack.forward(p);
            let (back, ok) = stack.inverse(q, 30, 1e-9);
            assert!(ok);
            assert!((back - p).norm() < 1e-6);
        }
    }
}
