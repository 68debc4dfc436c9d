//! Procedural head-and-neck-like longitudinal cases with a known deformation.
//!
//! A case is an elliptic body with spine, airway, fat shell and soft-tissue
//! texture, a primary tumour (GTVp) and a nodal target (GTVn). The
//! late-fraction anatomy is produced by a smooth, compactly supported
//! displacement field: a radial shrink around each tumour centroid plus an
//! inward displacement of the body surface.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{CaseBundle, Targets};
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Volume, VolumeKind};
use crate::warp::{warp_volume, Dvf, WarpMode};

/// Outer support of a tumour shrink field, in units of the shrunken radius.
const RADIAL_SUPPORT: f64 = 2.5;
/// Half-width of the body-surface shell, in elliptic-radius units.
const SHELL_HALF_WIDTH: f64 = 0.3;
const MARGIN_VOXELS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: Dims,
    pub spacing_mm: [f64; 3],
    pub body_semiaxes_mm: [f64; 3],
    pub gtvp_radius_mm: f64,
    pub gtvn_radius_mm: f64,
    /// Target / initial tumour volume ratio.
    pub shrink_factor: f64,
    pub body_shrink_mm: f64,
    /// CBCT noise standard deviation in HU.
    pub noise_sigma_image: f64,
    /// Dose maximum in Gy.
    pub dose_peak: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 16],
            spacing_mm: [2.0, 2.0, 2.0],
            body_semiaxes_mm: [52.0, 44.0, 60.0],
            gtvp_radius_mm: 10.0,
            gtvn_radius_mm: 6.0,
            shrink_factor: 0.6,
            body_shrink_mm: 3.0,
            noise_sigma_image: 15.0,
            dose_peak: 70.0,
            seed: 0,
        }
    }
}

/// Radial shrink about a centre: every point within `support` of the
/// centre samples further out, so structures contract towards it.
///
/// The magnitude profile (in units of the shrunken radius `r_t`) is
/// `U (2t - t^2)` for `t <= 1` and `U (1 - S((t-1)/(T-1)))` up to `T`,
/// with `S` the quintic smoothstep. `U = R - r_t` maps the shrunken
/// boundary exactly onto the original one.
#[derive(Debug, Clone, Copy)]
struct RadialShrink {
    center_mm: [f64; 3],
    r_t: f64,
    peak: f64,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

impl RadialShrink {
    fn new(center_mm: [f64; 3], radius_mm: f64, volume_ratio: f64) -> Self {
        let r_t = radius_mm * volume_ratio.cbrt();
        RadialShrink {
            center_mm,
            r_t,
            peak: radius_mm - r_t,
        }
    }

    fn magnitude(&self, rho: f64) -> f64 {
        let t = rho / self.r_t;
        if t <= 1.0 {
            self.peak * t * (2.0 - t)
        } else if t < RADIAL_SUPPORT {
            self.peak * (1.0 - smoothstep((t - 1.0) / (RADIAL_SUPPORT - 1.0)))
        } else {
            0.0
        }
    }

    fn displacement_mm(&self, p_mm: [f64; 3]) -> [f64; 3] {
        let d = [0, 1, 2].map(|a| p_mm[a] - self.center_mm[a]);
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if rho == 0.0 || self.peak == 0.0 {
            return [0.0; 3];
        }
        let m = self.magnitude(rho) / rho;
        d.map(|v| v * m)
    }
}

/// In-plane displacement on a shell around the elliptic body surface that
/// pulls the surface inwards by `amount_mm`.
#[derive(Debug, Clone, Copy)]
struct SurfaceShrink {
    center_mm: [f64; 3],
    semi_mm: [f64; 2],
    amount_mm: f64,
}

impl SurfaceShrink {
    fn displacement_mm(&self, p_mm: [f64; 3]) -> [f64; 3] {
        if self.amount_mm == 0.0 {
            return [0.0; 3];
        }
        let dx = p_mm[0] - self.center_mm[0];
        let dy = p_mm[1] - self.center_mm[1];
        let q = ((dx / self.semi_mm[0]).powi(2) + (dy / self.semi_mm[1]).powi(2)).sqrt();
        let off = (q - 1.0).abs();
        if off >= SHELL_HALF_WIDTH {
            return [0.0; 3];
        }
        let len = (dx * dx + dy * dy).sqrt();
        let m = self.amount_mm * (1.0 - smoothstep(off / SHELL_HALF_WIDTH)) / len;
        [dx * m, dy * m, 0.0]
    }
}

/// Deterministic geometry derived from a spec (centres are seed-dependent).
#[derive(Debug, Clone)]
pub struct PhantomLayout {
    pub body_center_mm: [f64; 3],
    pub gtvp_center_mm: [f64; 3],
    pub gtvn_center_mm: [f64; 3],
}

fn grid_center_mm(spec: &PhantomSpec) -> [f64; 3] {
    [0, 1, 2].map(|a| (spec.shape[a] as f64 - 1.0) / 2.0 * spec.spacing_mm[a])
}

fn voxel_mm(spec: &PhantomSpec, x: usize, y: usize, z: usize) -> [f64; 3] {
    [
        x as f64 * spec.spacing_mm[0],
        y as f64 * spec.spacing_mm[1],
        z as f64 * spec.spacing_mm[2],
    ]
}

fn in_ellipse(p: [f64; 3], c: [f64; 3], semi: [f64; 2]) -> f64 {
    ((p[0] - c[0]) / semi[0]).powi(2) + ((p[1] - c[1]) / semi[1]).powi(2)
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.shape.contains(&0)
            || !self.spacing_mm.iter().all(|&s| positive(s))
            || !self.body_semiaxes_mm.iter().all(|&s| positive(s))
            || !positive(self.gtvp_radius_mm)
            || !positive(self.gtvn_radius_mm)
        {
            return Err(Error::Invalid(format!("invalid phantom geometry {self:?}")));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor <= 1.0) {
            return Err(Error::Invalid(format!(
                "shrink_factor must lie in (0, 1], got {}",
                self.shrink_factor
            )));
        }
        if !(self.body_shrink_mm >= 0.0)
            || !(self.noise_sigma_image >= 0.0)
            || !(self.dose_peak >= 0.0)
        {
            return Err(Error::Invalid("negative phantom magnitude".into()));
        }
        // Each field's peak displacement stays below a quarter of the radius
        // of the structure it acts on.
        let s3 = self.shrink_factor.cbrt();
        for r in [self.gtvp_radius_mm, self.gtvn_radius_mm] {
            if r * (1.0 - s3) >= r / 4.0 {
                return Err(Error::Invalid(format!(
                    "shrink_factor {} displaces tumours by more than a quarter radius",
                    self.shrink_factor
                )));
            }
        }
        let min_semi = self.body_semiaxes_mm[0].min(self.body_semiaxes_mm[1]);
        if self.body_shrink_mm >= min_semi / 4.0 {
            return Err(Error::Invalid(format!(
                "body_shrink_mm {} exceeds a quarter of the body semi-axis",
                self.body_shrink_mm
            )));
        }
        let c = grid_center_mm(self);
        for a in 0..2 {
            let extent = (self.shape[a] as f64 - 1.0) * self.spacing_mm[a];
            let margin = MARGIN_VOXELS * self.spacing_mm[a];
            if c[a] - self.body_semiaxes_mm[a] < margin
                || c[a] + self.body_semiaxes_mm[a] > extent - margin
            {
                return Err(Error::Invalid(format!(
                    "structures out of bounds: body semi-axis {a} does not fit the grid"
                )));
            }
        }
        Ok(())
    }

    fn fits(&self, center: [f64; 3], radius_mm: f64) -> bool {
        let bc = grid_center_mm(self);
        let semi = [self.body_semiaxes_mm[0], self.body_semiaxes_mm[1]];
        (0..3).all(|a| {
            let extent = (self.shape[a] as f64 - 1.0) * self.spacing_mm[a];
            let margin = MARGIN_VOXELS * self.spacing_mm[a];
            center[a] - radius_mm >= margin - 1e-9
                && center[a] + radius_mm <= extent - margin + 1e-9
        }) && {
            // Keep the tumour, with room to spare, inside the body.
            let q = in_ellipse(center, bc, semi).sqrt();
            q + radius_mm / semi[0].min(semi[1]) <= 0.8
        }
    }

    /// Draws tumour centres: primary on one side of the midline, node on the other.
    pub fn layout(&self) -> Result<PhantomLayout> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c61_796f_7574);
        let bc = grid_center_mm(self);
        let [ax, ay, _] = self.body_semiaxes_mm;
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for _ in 0..200 {
            let p = [
                bc[0] + side * rng.random_range(0.15..0.35) * ax,
                bc[1] + rng.random_range(-0.2..0.1) * ay,
                bc[2],
            ];
            let n = [
                bc[0] - side * rng.random_range(0.3..0.5) * ax,
                bc[1] + rng.random_range(-0.15..0.2) * ay,
                bc[2],
            ];
            let sep = ((p[0] - n[0]).powi(2) + (p[1] - n[1]).powi(2)).sqrt();
            if self.fits(p, self.gtvp_radius_mm)
                && self.fits(n, self.gtvn_radius_mm)
                && sep >= self.gtvp_radius_mm + self.gtvn_radius_mm + 4.0 * self.spacing_mm[0]
            {
                return Ok(PhantomLayout {
                    body_center_mm: bc,
                    gtvp_center_mm: p,
                    gtvn_center_mm: n,
                });
            }
        }
        Err(Error::Invalid(
            "structures out of bounds: tumours do not fit inside the body with margin".into(),
        ))
    }

    fn fields(&self, layout: &PhantomLayout) -> (RadialShrink, RadialShrink, SurfaceShrink) {
        (
            RadialShrink::new(
                layout.gtvp_center_mm,
                self.gtvp_radius_mm,
                self.shrink_factor,
            ),
            RadialShrink::new(
                layout.gtvn_center_mm,
                self.gtvn_radius_mm,
                self.shrink_factor,
            ),
            SurfaceShrink {
                center_mm: layout.body_center_mm,
                semi_mm: [self.body_semiaxes_mm[0], self.body_semiaxes_mm[1]],
                amount_mm: self.body_shrink_mm,
            },
        )
    }

    /// The ground-truth field in voxel units.
    pub fn ground_truth_dvf(&self) -> Result<Dvf> {
        let layout = self.layout()?;
        let (gp, gn, body) = self.fields(&layout);
        let d = self.shape;
        let n = voxel_count(d);
        let mut dvf = Dvf::zeros(d, self.spacing_mm);
        let mut i = 0;
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let p = voxel_mm(self, x, y, z);
                    let a = gp.displacement_mm(p);
                    let b = gn.displacement_mm(p);
                    let c = body.displacement_mm(p);
                    for k in 0..3 {
                        dvf.disp[k * n + i] = ((a[k] + b[k] + c[k]) / self.spacing_mm[k]) as f32;
                    }
                    i += 1;
                }
            }
        }
        Ok(dvf)
    }

    fn mask(&self, f: impl Fn([f64; 3]) -> bool) -> Volume {
        let d = self.shape;
        let mut data = Vec::with_capacity(voxel_count(d));
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    data.push(if f(voxel_mm(self, x, y, z)) { 1.0 } else { 0.0 });
                }
            }
        }
        Volume {
            data,
            shape: d,
            spacing_mm: self.spacing_mm,
            origin_mm: [0.0; 3],
            kind: VolumeKind::Mask,
        }
    }

    /// Initial body outline (elliptic cylinder across the slab).
    pub fn body_mask(&self) -> Result<Volume> {
        let layout = self.layout()?;
        let semi = [self.body_semiaxes_mm[0], self.body_semiaxes_mm[1]];
        let bc = layout.body_center_mm;
        let cz = self.body_semiaxes_mm[2];
        Ok(self.mask(|p| in_ellipse(p, bc, semi) + ((p[2] - bc[2]) / cz).powi(2) <= 1.0))
    }
}

fn sphere_contains(p: [f64; 3], c: [f64; 3], r: f64) -> bool {
    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
}

/// Generates one longitudinal case. Identical specs give bit-identical bundles.
pub fn generate_case(spec: &PhantomSpec, case_id: &str) -> Result<CaseBundle> {
    let layout = spec.layout()?;
    let d = spec.shape;
    let n = voxel_count(d);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bc = layout.body_center_mm;
    let semi = [spec.body_semiaxes_mm[0], spec.body_semiaxes_mm[1]];
    let min_semi = semi[0].min(semi[1]);

    let body = spec.body_mask()?;
    let gtvp = spec.mask(|p| sphere_contains(p, layout.gtvp_center_mm, spec.gtvp_radius_mm));
    let gtvn = spec.mask(|p| sphere_contains(p, layout.gtvn_center_mm, spec.gtvn_radius_mm));

    // Soft-tissue texture: a few broad Gaussian bumps.
    let blobs: Vec<([f64; 3], f64, f64)> = (0..6)
        .map(|_| {
            let c = [
                bc[0] + rng.random_range(-0.7..0.7) * semi[0],
                bc[1] + rng.random_range(-0.7..0.7) * semi[1],
                bc[2] + rng.random_range(-0.5..0.5) * d[2] as f64 * spec.spacing_mm[2],
            ];
            let amp = rng.random_range(-25.0..25.0);
            let sigma = rng.random_range(6.0..14.0);
            (c, amp, sigma)
        })
        .collect();
    let spine_c = [bc[0], bc[1] + 0.55 * semi[1]];
    let spine_r = 0.18 * min_semi;
    let airway_c = [bc[0], bc[1] - 0.45 * semi[1]];
    let airway_r = 0.1 * min_semi;

    let mut ct = vec![-1000.0f32; n];
    let mut i = 0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let p = voxel_mm(spec, x, y, z);
                if body.data[i] == 1.0 {
                    let q = in_ellipse(p, bc, semi).sqrt();
                    let mut hu = if q > 0.85 { -90.0 } else { 35.0 };
                    for (c, amp, sigma) in &blobs {
                        let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                        hu += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                    let in_disc = |c: [f64; 2], r: f64| {
                        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r
                    };
                    if in_disc(spine_c, spine_r) {
                        hu = 650.0;
                    } else if in_disc(airway_c, airway_r) {
                        hu = -1000.0;
                    }
                    if gtvp.data[i] == 1.0 {
                        hu += 25.0;
                    } else if gtvn.data[i] == 1.0 {
                        hu += 20.0;
                    }
                    ct[i] = hu as f32;
                }
                i += 1;
            }
        }
    }

    // Dose: Gaussian blob on the primary, smaller boost on the node.
    let sp = 2.0 * spec.gtvp_radius_mm;
    let sn = 1.5 * spec.gtvn_radius_mm;
    let mut dose = vec![0.0f32; n];
    for (i, v) in dose.iter_mut().enumerate() {
        if body.data[i] == 0.0 {
            continue;
        }
        let c = crate::volume::coords(d, i);
        let p = voxel_mm(spec, c[0], c[1], c[2]);
        let rp: f64 = (0..3)
            .map(|a| (p[a] - layout.gtvp_center_mm[a]).powi(2))
            .sum();
        let rn: f64 = (0..3)
            .map(|a| (p[a] - layout.gtvn_center_mm[a]).powi(2))
            .sum();
        let g = (-rp / (2.0 * sp * sp)).exp() + 0.8 * (-rn / (2.0 * sn * sn)).exp();
        *v = (spec.dose_peak * g.min(1.0)) as f32;
    }

    // CBCT appearance gap: correlated noise and a mild in-body bias ramp.
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let smooth = box_blur3(&white, d);
    let gain = spec.noise_sigma_image * 27f64.sqrt();
    let bias_amp = rng.random_range(10.0..30.0);
    let mut cbct01 = ct.clone();
    for (i, v) in cbct01.iter_mut().enumerate() {
        let mut dv = gain * smooth[i];
        if body.data[i] == 1.0 {
            let c = crate::volume::coords(d, i);
            let p = voxel_mm(spec, c[0], c[1], c[2]);
            dv += bias_amp * (p[0] - bc[0]) / semi[0];
        }
        *v += dv as f32;
    }

    let grid = |data: Vec<f32>, kind| Volume {
        data,
        shape: d,
        spacing_mm: spec.spacing_mm,
        origin_mm: [0.0; 3],
        kind,
    };
    let ct = grid(ct, VolumeKind::Image);
    let dose = grid(dose, VolumeKind::Dose);
    let cbct01 = grid(cbct01, VolumeKind::Image);

    let dvf = spec.ground_truth_dvf()?;
    let targets = Targets {
        cbct21: warp_volume(&cbct01, &dvf, WarpMode::Trilinear)?,
        gtvp21: warp_volume(&gtvp, &dvf, WarpMode::Nearest)?,
        gtvn21: warp_volume(&gtvn, &dvf, WarpMode::Nearest)?,
    };
    let bundle = CaseBundle {
        case_id: case_id.to_string(),
        ct,
        dose,
        cbct01,
        gtvp01: gtvp,
        gtvn01: gtvn,
        targets: Some(targets),
        gt_dvf: Some(dvf),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Separable 3-tap box average with clamped borders (values are iid, the
/// border bias is irrelevant for texture).
fn box_blur3(v: &[f64], d: Dims) -> Vec<f64> {
    let mut cur = v.to_vec();
    let strides = [1, d[0], d[0] * d[1]];
    for a in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = crate::volume::coords(d, i)[a];
            let lo = if c > 0 { i - strides[a] } else { i };
            let hi = if c + 1 < d[a] { i + strides[a] } else { i };
            *out = (cur[lo] + cur[i] + cur[hi]) / 3.0;
        }
        cur = next;
    }
    cur
}

/// Closed interval `[min, max]` a corpus parameter is drawn from.
pub type Range = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRanges {
    pub shape: Dims,
    pub spacing_mm: [f64; 3],
    pub body_semiaxes_mm: [Range; 3],
    pub gtvp_radius_mm: Range,
    pub gtvn_radius_mm: Range,
    pub shrink_factor: Range,
    pub body_shrink_mm: Range,
    pub noise_sigma_image: Range,
    pub dose_peak: Range,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        PhantomRanges {
            shape: [64, 64, 16],
            spacing_mm: [2.0, 2.0, 2.0],
            body_semiaxes_mm: [[48.0, 56.0], [40.0, 46.0], [60.0, 60.0]],
            gtvp_radius_mm: [8.0, 11.0],
            gtvn_radius_mm: [5.0, 7.0],
            shrink_factor: [0.5, 0.8],
            body_shrink_mm: [2.0, 5.0],
            noise_sigma_image: [10.0, 20.0],
            dose_peak: [66.0, 70.0],
        }
    }
}

impl PhantomRanges {
    fn all(&self) -> Vec<(&'static str, Range)> {
        vec![
            ("body_semiaxes_mm[0]", self.body_semiaxes_mm[0]),
            ("body_semiaxes_mm[1]", self.body_semiaxes_mm[1]),
            ("body_semiaxes_mm[2]", self.body_semiaxes_mm[2]),
            ("gtvp_radius_mm", self.gtvp_radius_mm),
            ("gtvn_radius_mm", self.gtvn_radius_mm),
            ("shrink_factor", self.shrink_factor),
            ("body_shrink_mm", self.body_shrink_mm),
            ("noise_sigma_image", self.noise_sigma_image),
            ("dose_peak", self.dose_peak),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in self.all() {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Invalid(format!(
                    "invalid range for {name}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn draw(r: Range, rng: &mut ChaCha8Rng) -> f64 {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..=r[1])
        }
    }

    /// Parameters for `n` cases, each with a seed derived from `seed`.
    pub fn sample_specs(&self, n: usize, seed: u64) -> Result<Vec<PhantomSpec>> {
        if n == 0 {
            return Err(Error::Invalid("corpus size must be at least 1".into()));
        }
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = (0..n)
            .map(|_| PhantomSpec {
                shape: self.shape,
                spacing_mm: self.spacing_mm,
                body_semiaxes_mm: [0, 1, 2].map(|a| Self::draw(self.body_semiaxes_mm[a], &mut rng)),
                gtvp_radius_mm: Self::draw(self.gtvp_radius_mm, &mut rng),
                gtvn_radius_mm: Self::draw(self.gtvn_radius_mm, &mut rng),
                shrink_factor: Self::draw(self.shrink_factor, &mut rng),
                body_shrink_mm: Self::draw(self.body_shrink_mm, &mut rng),
                noise_sigma_image: Self::draw(self.noise_sigma_image, &mut rng),
                dose_peak: Self::draw(self.dose_peak, &mut rng),
                seed: rng.next_u64(),
            })
            .collect::<Vec<_>>();
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

pub fn case_id(i: usize) -> String {
    format!("case{i:03}")
}

/// Generates `n` cases named `case000`, `case001`, ...
pub fn generate_corpus(n: usize, ranges: &PhantomRanges, seed: u64) -> Result<Vec<CaseBundle>> {
    use rayon::prelude::*;
    let specs = ranges.sample_specs(n, seed)?;
    specs
        .par_iter()
        .enumerate()
        .map(|(i, s)| generate_case(s, &case_id(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radial_profile_is_continuous_and_peaks_at_shrunken_radius() {
        let f = RadialShrink::new([0.0; 3], 10.0, 0.5);
        let peak = f.magnitude(f.r_t);
        assert!((peak - f.peak).abs() < 1e-12);
        assert!((f.r_t + peak - 10.0).abs() < 1e-12);
        for k in 1..2000 {
            let rho = k as f64 * 0.02;
            assert!(f.magnitude(rho) <= f.peak + 1e-12);
            // Monotone radial map.
            let h = 1e-6;
            let deriv = (f.magnitude(rho + h) - f.magnitude(rho - h)) / (2.0 * h);
            assert!(1.0 + deriv > 0.0);
        }
        assert_eq!(f.magnitude(RADIAL_SUPPORT * f.r_t + 1e-9), 0.0);
    }

    #[test]
    fn identity_spec_gives_zero_field() {
        let spec = PhantomSpec {
            shrink_factor: 1.0,
            body_shrink_mm: 0.0,
            ..PhantomSpec::default()
        };
        let c = generate_case(&spec, "id").unwrap();
        assert!(c.gt_dvf.as_ref().unwrap().disp.iter().all(|&v| v == 0.0));
        let t = c.targets.unwrap();
        assert_eq!(t.cbct21.data, c.cbct01.data);
        assert_eq!(t.gtvp21, c.gtvp01);
        assert_eq!(t.gtvn21, c.gtvn01);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let too_much = PhantomSpec {
            shrink_factor: 0.3,
            ..PhantomSpec::default()
        };
        assert!(generate_case(&too_much, "x").is_err());
        let huge = PhantomSpec {
            body_semiaxes_mm: [70.0, 44.0, 60.0],
            ..PhantomSpec::default()
        };
        assert!(generate_case(&huge, "x").is_err());
        let big_tumour = PhantomSpec {
            gtvp_radius_mm: 14.0,
            ..PhantomSpec::default()
        };
        assert!(generate_case(&big_tumour, "x").is_err());
    }

    #[test]
    fn corpus_rejects_empty_and_bad_ranges() {
        let r = PhantomRanges::default();
        assert!(generate_corpus(0, &r, 1).is_err());
        let bad = PhantomRanges {
            shrink_factor: [0.8, 0.5],
            ..PhantomRanges::default()
        };
        assert!(bad.sample_specs(3, 1).is_err());
    }
}
