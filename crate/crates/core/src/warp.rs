//! Spatial transformation of volumes by a dense displacement field.
//!
//! Pull convention in voxel units: `out(p) = in(p + phi(p))`. Sample
//! positions outside the grid are clamped to the border.

use serde::{Deserialize, Serialize};

use crate::dataset::{Baseline, CaseBundle, InputSelection};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{voxel_count, Dims, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarpMode {
    Trilinear,
    Nearest,
}

/// Dense displacement field, components stored `[dx | dy | dz]`, each
/// x-fastest over `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dvf {
    pub disp: Vec<f32>,
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
}

impl Dvf {
    pub fn zeros(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Dvf {
            disp: vec![0.0; 3 * voxel_count(dims)],
            dims,
            spacing_mm,
        }
    }

    pub fn from_components(components: [&Volume; 3]) -> Result<Self> {
        let dims = components[0].shape;
        if components.iter().any(|c| c.shape != dims) {
            return Err(Error::Shape("dvf components differ in shape".into()));
        }
        let mut disp = Vec::with_capacity(3 * voxel_count(dims));
        for c in components {
            disp.extend_from_slice(&c.data);
        }
        let dvf = Dvf {
            disp,
            dims,
            spacing_mm: components[0].spacing_mm,
        };
        dvf.check_finite()?;
        Ok(dvf)
    }

    pub fn component(&self, axis: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.disp[axis * n..(axis + 1) * n]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f32] {
        let n = voxel_count(self.dims);
        &mut self.disp[axis * n..(axis + 1) * n]
    }

    /// One component as a volume on `grid`'s geometry.
    pub fn component_volume(&self, axis: usize, grid: &Volume) -> Volume {
        grid.like(self.component(axis).to_vec(), VolumeKind::Displacement)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.disp.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("displacement field".into()))
        }
    }

    pub fn max_magnitude(&self) -> f32 {
        let n = voxel_count(self.dims);
        (0..n)
            .map(|i| {
                let (x, y, z) = (self.disp[i], self.disp[n + i], self.disp[2 * n + i]);
                (x * x + y * y + z * z).sqrt()
            })
            .fold(0.0, f32::max)
    }
}

#[derive(Clone, Copy)]
struct Axis<T> {
    i0: usize,
    i1: usize,
    t: T,
    /// Sample position landed inside `[0, n-1]`, so it has a derivative.
    inside: bool,
}

#[inline]
fn axis_weights<T: Real>(s: T, n: usize) -> Axis<T> {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            t: T::zero(),
            inside: false,
        };
    }
    let hi = T::c((n - 1) as f64);
    let inside = s >= T::zero() && s <= hi;
    let s = s.max(T::zero()).min(hi);
    let i0 = s.floor().to_usize().unwrap_or(0).min(n - 2);
    Axis {
        i0,
        i1: i0 + 1,
        t: s - T::c(i0 as f64),
        inside,
    }
}

#[inline]
fn nearest_index<T: Real>(s: T, n: usize) -> usize {
    let r = (s + T::c(0.5)).floor();
    r.max(T::zero())
        .min(T::c((n - 1) as f64))
        .to_usize()
        .unwrap_or(0)
}

fn check_lengths<T>(src: &[T], disp: &[T], dims: Dims) -> Result<usize> {
    let n = voxel_count(dims);
    if src.len() != n || disp.len() != 3 * n {
        return Err(Error::Shape(format!(
            "warp expects {n} voxels and {} displacement values, got {} and {}",
            3 * n,
            src.len(),
            disp.len()
        )));
    }
    Ok(n)
}

/// Warps one channel: `out(p) = src(p + disp(p))`.
pub fn warp_channel<T: Real>(src: &[T], disp: &[T], dims: Dims, mode: WarpMode) -> Result<Vec<T>> {
    let n = check_lengths(src, disp, dims)?;
    if disp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("displacement field".into()));
    }
    let (nx, ny) = (dims[0], dims[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        let sx = T::c(x as f64) + disp[i];
        let sy = T::c(y as f64) + disp[n + i];
        let sz = T::c(z as f64) + disp[2 * n + i];
        let v = match mode {
            WarpMode::Nearest => {
                let (a, b, c) = (
                    nearest_index(sx, dims[0]),
                    nearest_index(sy, dims[1]),
                    nearest_index(sz, dims[2]),
                );
                src[a + nx * (b + ny * c)]
            }
            WarpMode::Trilinear => {
                let ax = axis_weights(sx, dims[0]);
                let ay = axis_weights(sy, dims[1]);
                let az = axis_weights(sz, dims[2]);
                trilinear(src, nx, ny, ax, ay, az)
            }
        };
        out.push(v);
    }
    Ok(out)
}

#[inline]
fn trilinear<T: Real>(src: &[T], nx: usize, ny: usize, ax: Axis<T>, ay: Axis<T>, az: Axis<T>) -> T {
    let g = |x: usize, y: usize, z: usize| src[x + nx * (y + ny * z)];
    let one = T::one();
    let c00 = g(ax.i0, ay.i0, az.i0) * (one - ax.t) + g(ax.i1, ay.i0, az.i0) * ax.t;
    let c10 = g(ax.i0, ay.i1, az.i0) * (one - ax.t) + g(ax.i1, ay.i1, az.i0) * ax.t;
    let c01 = g(ax.i0, ay.i0, az.i1) * (one - ax.t) + g(ax.i1, ay.i0, az.i1) * ax.t;
    let c11 = g(ax.i0, ay.i1, az.i1) * (one - ax.t) + g(ax.i1, ay.i1, az.i1) * ax.t;
    let c0 = c00 * (one - ay.t) + c10 * ay.t;
    let c1 = c01 * (one - ay.t) + c11 * ay.t;
    c0 * (one - az.t) + c1 * az.t
}

/// Adjoint of trilinear [`warp_channel`].
///
/// Returns the gradient with respect to the source values (when requested)
/// and with respect to the three displacement components. At exact
/// integer sample positions the derivative is taken from the cell whose
/// lower corner is `floor(s)`; clamped samples have zero displacement
/// gradient.
pub fn warp_channel_backward<T: Real>(
    upstream: &[T],
    src: &[T],
    disp: &[T],
    dims: Dims,
    want_src_grad: bool,
) -> Result<(Option<Vec<T>>, Vec<T>)> {
    let n = check_lengths(src, disp, dims)?;
    if upstream.len() != n {
        return Err(Error::Shape("upstream gradient length".into()));
    }
    let (nx, ny) = (dims[0], dims[1]);
    let mut g_src = want_src_grad.then(|| vec![T::zero(); n]);
    let mut g_disp = vec![T::zero(); 3 * n];
    let one = T::one();
    for i in 0..n {
        let g = upstream[i];
        if g == T::zero() {
            continue;
        }
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        let ax = axis_weights(T::c(x as f64) + disp[i], dims[0]);
        let ay = axis_weights(T::c(y as f64) + disp[n + i], dims[1]);
        let az = axis_weights(T::c(z as f64) + disp[2 * n + i], dims[2]);
        let at = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
        let v = |x, y, z| src[at(x, y, z)];

        if ax.inside {
            let dx = |y, z| v(ax.i1, y, z) - v(ax.i0, y, z);
            let d0 = dx(ay.i0, az.i0) * (one - ay.t) + dx(ay.i1, az.i0) * ay.t;
            let d1 = dx(ay.i0, az.i1) * (one - ay.t) + dx(ay.i1, az.i1) * ay.t;
            g_disp[i] = g * (d0 * (one - az.t) + d1 * az.t);
        }
        if ay.inside {
            let dy = |x, z| v(x, ay.i1, z) - v(x, ay.i0, z);
            let d0 = dy(ax.i0, az.i0) * (one - ax.t) + dy(ax.i1, az.i0) * ax.t;
            let d1 = dy(ax.i0, az.i1) * (one - ax.t) + dy(ax.i1, az.i1) * ax.t;
            g_disp[n + i] = g * (d0 * (one - az.t) + d1 * az.t);
        }
        if az.inside {
            let dz = |x, y| v(x, y, az.i1) - v(x, y, az.i0);
            let d0 = dz(ax.i0, ay.i0) * (one - ax.t) + dz(ax.i1, ay.i0) * ax.t;
            let d1 = dz(ax.i0, ay.i1) * (one - ax.t) + dz(ax.i1, ay.i1) * ax.t;
            g_disp[2 * n + i] = g * (d0 * (one - ay.t) + d1 * ay.t);
        }
        if let Some(gs) = g_src.as_mut() {
            for (zi, wz) in [(az.i0, one - az.t), (az.i1, az.t)] {
                for (yi, wy) in [(ay.i0, one - ay.t), (ay.i1, ay.t)] {
                    for (xi, wx) in [(ax.i0, one - ax.t), (ax.i1, ax.t)] {
                        gs[at(xi, yi, zi)] += g * wx * wy * wz;
                    }
                }
            }
        }
    }
    Ok((g_src, g_disp))
}

/// Interpolation cell (lower corner, before clamping) of every sample
/// position. The trilinear warp is smooth in the field as long as these
/// stay fixed.
pub fn sample_cells<T: Real>(disp: &[T], dims: Dims) -> Vec<i64> {
    let n = voxel_count(dims);
    (0..disp.len())
        .map(|k| {
            let (axis, i) = (k / n, k % n);
            let c = crate::volume::coords(dims, i)[axis];
            (T::c(c as f64) + disp[k]).floor().f64() as i64
        })
        .collect()
}

/// Warps a volume. Masks must be warped with [`WarpMode::Nearest`] to stay binary.
pub fn warp_volume(v: &Volume, dvf: &Dvf, mode: WarpMode) -> Result<Volume> {
    if v.shape != dvf.dims {
        return Err(Error::Shape(format!(
            "volume {:?} vs dvf {:?}",
            v.shape, dvf.dims
        )));
    }
    if v.kind == VolumeKind::Mask && mode != WarpMode::Nearest {
        return Err(Error::Invalid(
            "mask volumes are warped with nearest-neighbour sampling".into(),
        ));
    }
    let data = warp_channel(&v.data, &dvf.disp, v.shape, mode)?;
    Ok(v.like(data, v.kind))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image: Volume,
    pub gtvp: Volume,
    pub gtvn: Volume,
}

/// Deforms the baseline image (trilinear) and masks (nearest) by `dvf`.
pub fn predict_anatomy(c: &CaseBundle, dvf: &Dvf, sel: &InputSelection) -> Result<Prediction> {
    let base = match sel.baseline {
        Baseline::Cbct01 => &c.cbct01,
        Baseline::Ct => &c.ct,
    };
    Ok(Prediction {
        image: warp_volume(base, dvf, WarpMode::Trilinear)?,
        gtvp: warp_volume(&c.gtvp01, dvf, WarpMode::Nearest)?,
        gtvn: warp_volume(&c.gtvn01, dvf, WarpMode::Nearest)?,
    })
}
