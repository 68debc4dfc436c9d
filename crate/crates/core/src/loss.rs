//! Training objective: SSIM on the warped image, soft Dice on softly warped
//! masks, and a diffusion penalty on the displacement field.
//!
//! Every term comes with its exact gradient with respect to the warped
//! quantity (and through the warp, with respect to the field), so the model
//! can backpropagate from the field alone.

use serde::{Deserialize, Serialize};

use crate::dataset::{Baseline, CaseBundle, InputSelection};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{voxel_count, Dims};
use crate::warp::{warp_channel, warp_channel_backward, Dvf, WarpMode};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
/// Data range of normalized images (values in [-1, 1]).
pub const SSIM_DATA_RANGE: f64 = 2.0;
pub const SSIM_C1: f64 = (0.01 * SSIM_DATA_RANGE) * (0.01 * SSIM_DATA_RANGE);
pub const SSIM_C2: f64 = (0.03 * SSIM_DATA_RANGE) * (0.03 * SSIM_DATA_RANGE);
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_image: f64,
    pub w_gtvp: f64,
    pub w_gtvn: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_image: 1.0,
            w_gtvp: 1.0,
            w_gtvn: 1.0,
            lambda: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if ok(self.w_image) && ok(self.w_gtvp) && ok(self.w_gtvn) && ok(self.lambda) {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )))
        }
    }
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let t = k as f64 - half;
        *v = (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// One axis of the separable window, truncated at the volume border and
/// renormalized so every output is a weighted mean.
fn blur_axis<T: Real>(v: &[T], d: Dims, axis: usize, transpose: bool) -> Vec<T> {
    let taps = gaussian_taps().map(T::c);
    let half = SSIM_WINDOW / 2;
    let n = d[axis];
    let stride = [1, d[0], d[0] * d[1]][axis];
    // Per-position normalizers depend only on the coordinate along the axis.
    let norms: Vec<T> = (0..n)
        .map(|c| {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(n - 1);
            let s: T = (lo..=hi).map(|j| taps[j + half - c]).sum();
            T::one() / s
        })
        .collect();
    let mut out = vec![T::zero(); v.len()];
    let lines = v.len() / n;
    for line in 0..lines {
        // Base index of this line: enumerate all coordinates except `axis`.
        let base = {
            let inner = line % stride;
            let outer = line / stride;
            inner + outer * stride * n
        };
        for c in 0..n {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(n - 1);
            if transpose {
                let g = v[base + c * stride] * norms[c];
                for j in lo..=hi {
                    out[base + j * stride] += g * taps[j + half - c];
                }
            } else {
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += taps[j + half - c] * v[base + j * stride];
                }
                out[base + c * stride] = acc * norms[c];
            }
        }
    }
    out
}

/// Separable Gaussian window average (`transpose` applies its adjoint).
pub fn gaussian_blur<T: Real>(v: &[T], d: Dims, transpose: bool) -> Vec<T> {
    let a = blur_axis(v, d, 0, transpose);
    let b = blur_axis(&a, d, 1, transpose);
    blur_axis(&b, d, 2, transpose)
}

fn check_pair(a: usize, b: usize, d: Dims) -> Result<()> {
    let n = voxel_count(d);
    if a != n || b != n {
        return Err(Error::Shape(format!(
            "expected {n} voxels for grid {d:?}, got {a} and {b}"
        )));
    }
    Ok(())
}

struct SsimStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    map: Vec<T>,
    a2: Vec<T>,
    b1: Vec<T>,
    b2: Vec<T>,
    a1: Vec<T>,
}

fn ssim_stats<T: Real>(x: &[T], y: &[T], d: Dims) -> SsimStats<T> {
    let mu_x = gaussian_blur(x, d, false);
    let mu_y = gaussian_blur(y, d, false);
    let sq = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&p, &q)| p * q).collect::<Vec<T>>();
    let exx = gaussian_blur(&sq(x, x), d, false);
    let eyy = gaussian_blur(&sq(y, y), d, false);
    let exy = gaussian_blur(&sq(x, y), d, false);
    let (c1, c2, two) = (T::c(SSIM_C1), T::c(SSIM_C2), T::c(2.0));
    let n = x.len();
    let mut st = SsimStats {
        map: Vec::with_capacity(n),
        a1: Vec::with_capacity(n),
        a2: Vec::with_capacity(n),
        b1: Vec::with_capacity(n),
        b2: Vec::with_capacity(n),
        mu_x,
        mu_y,
    };
    for i in 0..n {
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        let sxx = exx[i] - mx * mx;
        let syy = eyy[i] - my * my;
        let sxy = exy[i] - mx * my;
        let a1 = two * mx * my + c1;
        let a2 = two * sxy + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = sxx + syy + c2;
        st.map.push((a1 * a2) / (b1 * b2));
        st.a1.push(a1);
        st.a2.push(a2);
        st.b1.push(b1);
        st.b2.push(b2);
    }
    st
}

/// Voxelwise local SSIM map.
pub fn ssim_map<T: Real>(x: &[T], y: &[T], d: Dims) -> Result<Vec<T>> {
    check_pair(x.len(), y.len(), d)?;
    Ok(ssim_stats(x, y, d).map)
}

/// `1 - mean local SSIM`.
pub fn ssim_loss<T: Real>(x: &[T], y: &[T], d: Dims) -> Result<T> {
    let map = ssim_map(x, y, d)?;
    let n = T::c(map.len() as f64);
    Ok(T::one() - map.iter().copied().sum::<T>() / n)
}

/// SSIM loss and its gradient with respect to `x`.
pub fn ssim_loss_grad<T: Real>(x: &[T], y: &[T], d: Dims) -> Result<(T, Vec<T>)> {
    check_pair(x.len(), y.len(), d)?;
    let st = ssim_stats(x, y, d);
    let n = x.len();
    let two = T::c(2.0);
    let scale = -T::one() / T::c(n as f64);
    let mut g_mu = Vec::with_capacity(n);
    let mut g_exx = Vec::with_capacity(n);
    let mut g_exy = Vec::with_capacity(n);
    for i in 0..n {
        let s = st.map[i] * scale;
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        g_mu.push(
            s * (two * my / st.a1[i] - two * my / st.a2[i] - two * mx / st.b1[i]
                + two * mx / st.b2[i]),
        );
        g_exx.push(-s / st.b2[i]);
        g_exy.push(two * s / st.a2[i]);
    }
    let t_mu = gaussian_blur(&g_mu, d, true);
    let t_xx = gaussian_blur(&g_exx, d, true);
    let t_xy = gaussian_blur(&g_exy, d, true);
    let grad = (0..n)
        .map(|i| t_mu[i] + two * x[i] * t_xx[i] + y[i] * t_xy[i])
        .collect();
    let loss = T::one() - st.map.iter().copied().sum::<T>() / T::c(n as f64);
    Ok((loss, grad))
}

/// `1 - (2 sum(ab) + eps) / (sum(a) + sum(b) + eps)`.
pub fn soft_dice_loss<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    Ok(soft_dice_loss_grad(a, b)?.0)
}

/// Soft Dice loss and its gradient with respect to `a`.
pub fn soft_dice_loss_grad<T: Real>(a: &[T], b: &[T]) -> Result<(T, Vec<T>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "dice inputs {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let eps = T::c(DICE_EPS);
    let two = T::c(2.0);
    let inter: T = a.iter().zip(b).map(|(&p, &q)| p * q).sum();
    let sa: T = a.iter().copied().sum();
    let sb: T = b.iter().copied().sum();
    let num = two * inter + eps;
    let den = sa + sb + eps;
    let grad = b
        .iter()
        .map(|&q| -(two * q * den - num) / (den * den))
        .collect();
    Ok((T::one() - num / den, grad))
}

/// Mean squared forward difference of each displacement component along
/// each axis, averaged over the 9 component/axis pairs. Axes of length one
/// contribute zero.
pub fn diffusion_loss<T: Real>(disp: &[T], d: Dims) -> Result<T> {
    Ok(diffusion_loss_grad(disp, d, false)?.0)
}

/// Diffusion loss and (optionally) its gradient with respect to the field.
pub fn diffusion_loss_grad<T: Real>(disp: &[T], d: Dims, want_grad: bool) -> Result<(T, Vec<T>)> {
    let n = voxel_count(d);
    if disp.len() != 3 * n {
        return Err(Error::Shape(format!(
            "field has {} values, expected {}",
            disp.len(),
            3 * n
        )));
    }
    let strides = [1, d[0], d[0] * d[1]];
    let nine = T::c(9.0);
    let mut total = T::zero();
    let mut grad = if want_grad {
        vec![T::zero(); 3 * n]
    } else {
        Vec::new()
    };
    for c in 0..3 {
        let phi = &disp[c * n..(c + 1) * n];
        for a in 0..3 {
            if d[a] < 2 {
                continue;
            }
            let count = n / d[a] * (d[a] - 1);
            let inv = T::one() / (nine * T::c(count as f64));
            let mut acc = T::zero();
            for i in 0..n {
                if (i / strides[a]) % d[a] + 1 == d[a] {
                    continue;
                }
                let e = phi[i + strides[a]] - phi[i];
                acc += e * e;
                if want_grad {
                    let g = T::c(2.0) * e * inv;
                    grad[c * n + i + strides[a]] += g;
                    grad[c * n + i] -= g;
                }
            }
            total += acc * inv;
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ssim: f64,
    pub dice_p: f64,
    pub dice_n: f64,
    pub diffusion: f64,
}

/// Loss inputs for one case, converted to the working precision.
#[derive(Debug, Clone)]
pub struct LossCase<T> {
    pub dims: Dims,
    pub base_image: Vec<T>,
    pub base_gtvp: Vec<T>,
    pub base_gtvn: Vec<T>,
    pub target_image: Vec<T>,
    pub target_gtvp: Vec<T>,
    pub target_gtvn: Vec<T>,
}

impl<T: Real> LossCase<T> {
    pub fn from_bundle(c: &CaseBundle, sel: &InputSelection) -> Result<Self> {
        let t = c.targets()?;
        let conv = |v: &[f32]| v.iter().map(|&x| T::c(x as f64)).collect::<Vec<T>>();
        let base = match sel.baseline {
            Baseline::Cbct01 => &c.cbct01,
            Baseline::Ct => &c.ct,
        };
        Ok(LossCase {
            dims: c.dims(),
            base_image: conv(&base.data),
            base_gtvp: conv(&c.gtvp01.data),
            base_gtvn: conv(&c.gtvn01.data),
            target_image: conv(&t.cbct21.data),
            target_gtvp: conv(&t.gtvp21.data),
            target_gtvn: conv(&t.gtvn21.data),
        })
    }
}

/// Composite loss of a field (voxel units, `[dx | dy | dz]`) and, when
/// requested, its gradient with respect to the field.
pub fn composite_loss_grad<T: Real>(
    case: &LossCase<T>,
    disp: &[T],
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Vec<T>)> {
    let d = case.dims;
    let mut grad = if want_grad {
        vec![T::zero(); disp.len()]
    } else {
        Vec::new()
    };
    let mut accumulate = |upstream: Vec<T>, src: &[T], weight: f64| -> Result<()> {
        if !want_grad || weight == 0.0 {
            return Ok(());
        }
        let wt = T::c(weight);
        let scaled: Vec<T> = upstream.into_iter().map(|g| g * wt).collect();
        let (_, g) = warp_channel_backward(&scaled, src, disp, d, false)?;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
        Ok(())
    };

    let warped = warp_channel(&case.base_image, disp, d, WarpMode::Trilinear)?;
    let (ssim, g) = ssim_loss_grad(&warped, &case.target_image, d)?;
    accumulate(g, &case.base_image, w.w_image)?;

    let warped = warp_channel(&case.base_gtvp, disp, d, WarpMode::Trilinear)?;
    let (dice_p, g) = soft_dice_loss_grad(&warped, &case.target_gtvp)?;
    accumulate(g, &case.base_gtvp, w.w_gtvp)?;

    let warped = warp_channel(&case.base_gtvn, disp, d, WarpMode::Trilinear)?;
    let (dice_n, g) = soft_dice_loss_grad(&warped, &case.target_gtvn)?;
    accumulate(g, &case.base_gtvn, w.w_gtvn)?;

    let (diffusion, g) = diffusion_loss_grad(disp, d, want_grad)?;
    if want_grad {
        let lam = T::c(w.lambda);
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += lam * v;
        }
    }
    let (ssim, dice_p, dice_n, diffusion) =
        (ssim.f64(), dice_p.f64(), dice_n.f64(), diffusion.f64());
    let total = w.w_image * ssim + w.w_gtvp * dice_p + w.w_gtvn * dice_n + w.lambda * diffusion;
    Ok((
        LossBreakdown {
            total,
            ssim,
            dice_p,
            dice_n,
            diffusion,
        },
        grad,
    ))
}

/// Composite loss of a field on a case, evaluated in double precision.
pub fn composite_loss(
    c: &CaseBundle,
    dvf: &Dvf,
    w: &LossWeights,
    sel: &InputSelection,
) -> Result<LossBreakdown> {
    w.validate()?;
    if dvf.dims != c.dims() {
        return Err(Error::Shape(format!(
            "field {:?} vs case {:?}",
            dvf.dims,
            c.dims()
        )));
    }
    let case = LossCase::<f64>::from_bundle(c, sel)?;
    let disp: Vec<f64> = dvf.disp.iter().map(|&v| v as f64).collect();
    Ok(composite_loss_grad(&case, &disp, w, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_images_match_closed_form() {
        let d = [9, 8, 7];
        let n = voxel_count(d);
        let x = vec![0.0f64; n];
        let y = vec![0.5f64; n];
        let got = ssim_loss(&x, &y, d).unwrap();
        let want = 1.0 - SSIM_C1 / (0.25 + SSIM_C1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((want - 0.998403).abs() < 1e-6);
        assert!(ssim_loss(&y, &y, d).unwrap().abs() < 1e-12);
    }

    #[test]
    fn blur_transpose_is_adjoint() {
        let d = [5, 9, 3];
        let n = voxel_count(d);
        let u: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        let gu = gaussian_blur(&u, d, false);
        let gtv = gaussian_blur(&v, d, true);
        let lhs: f64 = gu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&gtv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn dice_examples() {
        let mut a = vec![0.0f64; 16];
        let mut b = vec![0.0f64; 16];
        a[..8].iter_mut().for_each(|v| *v = 1.0);
        b[4..12].iter_mut().for_each(|v| *v = 1.0);
        let l = soft_dice_loss(&a, &b).unwrap();
        assert!((l - (1.0 - (8.0 + 1e-5) / (16.0 + 1e-5))).abs() < 1e-12);
        assert!((l - 0.5).abs() < 1e-6);
        assert!(soft_dice_loss(&a, &a).unwrap() < 1e-9);
        let c: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!((soft_dice_loss(&a, &c).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn diffusion_examples() {
        let d = [6, 5, 4];
        let n = voxel_count(d);
        let mut disp = vec![0.0f64; 3 * n];
        for i in 0..n {
            disp[i] = (i % d[0]) as f64;
        }
        assert!((diffusion_loss(&disp, d).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        let constant = vec![2.5f64; 3 * n];
        assert_eq!(diffusion_loss(&constant, d).unwrap(), 0.0);
        // Flat axes contribute nothing.
        let flat = [6, 5, 1];
        let m = voxel_count(flat);
        let mut disp = vec![0.0f64; 3 * m];
        for i in 0..m {
            disp[2 * m + i] = (i % 6) as f64;
        }
        assert!((diffusion_loss(&disp, flat).unwrap() - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(ssim_loss(&[0.0f64; 8], &[0.0f64; 7], [2, 2, 2]).is_err());
        assert!(soft_dice_loss(&[0.0f64; 8], &[0.0f64; 7]).is_err());
        assert!(diffusion_loss(&[0.0f64; 8], [2, 2, 2]).is_err());
    }
}
