//! Scalar volumes, their on-disk `.mvol` format and the preprocessing chain
//! (resample, centre crop/pad, intensity normalisation, binarisation).
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Air value used when padding images before normalisation.
pub const PAD_HU: f32 = -1000.0;

#[inline]
pub fn voxel_count(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

#[inline]
pub fn linear_index(d: Dims, x: usize, y: usize, z: usize) -> usize {
    x + d[0] * (y + d[1] * z)
}

#[inline]
pub fn coords(d: Dims, i: usize) -> [usize; 3] {
    [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VolumeKind {
    Image,
    Dose,
    Mask,
    /// One component of a displacement field, in voxel units.
    Displacement,
}

impl VolumeKind {
    fn name(self) -> &'static str {
        match self {
            VolumeKind::Image => "Image",
            VolumeKind::Dose => "Dose",
            VolumeKind::Mask => "Mask",
            VolumeKind::Displacement => "Displacement",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub shape: Dims,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    pub fn new(
        data: Vec<f32>,
        shape: Dims,
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        kind: VolumeKind,
    ) -> Result<Self> {
        let v = Volume {
            data,
            shape,
            spacing_mm,
            origin_mm,
            kind,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(shape: Dims, spacing_mm: [f64; 3], kind: VolumeKind, value: f32) -> Self {
        Volume {
            data: vec![value; voxel_count(shape)],
            shape,
            spacing_mm,
            origin_mm: [0.0; 3],
            kind,
        }
    }

    /// A volume on the same grid as `self` with new data and kind.
    pub fn like(&self, data: Vec<f32>, kind: VolumeKind) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            data,
            shape: self.shape,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.shape == other.shape
            && self.spacing_mm == other.spacing_mm
            && self.origin_mm == other.origin_mm
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Shape(format!("non-positive shape {:?}", self.shape)));
        }
        if self.data.len() != voxel_count(self.shape) {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                self.data.len(),
                self.shape
            )));
        }
        if self
            .spacing_mm
            .iter()
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.kind == VolumeKind::Mask {
            check_binary(&self.data)?;
        }
        Ok(())
    }

    pub fn header(&self, channel: &str) -> VolumeHeader {
        VolumeHeader {
            shape: self.shape,
            spacing_mm: self.spacing_mm,
            origin_mm: self.origin_mm,
            kind: self.kind,
            dtype: DTYPE_TAG.to_string(),
            order: ORDER_TAG.to_string(),
            channel: channel.to_string(),
        }
    }
}

pub(crate) fn check_binary(data: &[f32]) -> Result<()> {
    match data.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(index) => Err(Error::NonBinaryMask {
            value: data[index],
            index,
        }),
        None => Ok(()),
    }
}

pub const DTYPE_TAG: &str = "f32";
pub const ORDER_TAG: &str = "xyz-le";

/// JSON sidecar describing a raw `.mvol.raw` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub shape: Dims,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub kind: VolumeKind,
    pub dtype: String,
    pub order: String,
    #[serde(default)]
    pub channel: String,
}

/// Header and payload paths for a volume base path.
///
/// Accepts `name`, `name.mvol`, `name.mvol.json` or `name.mvol.raw`.
pub fn mvol_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".mvol.json")
        .or_else(|| s.strip_suffix(".mvol.raw"))
        .or_else(|| s.strip_suffix(".mvol"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.mvol.json")),
        PathBuf::from(format!("{base}.mvol.raw")),
    )
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let (header_path, _) = mvol_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != DTYPE_TAG || header.order != ORDER_TAG {
        return Err(Error::Header {
            path: header_path,
            reason: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    Ok(header)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    read_volume_with_channel(path).map(|(v, _)| v)
}

/// Reads a volume together with the channel name stored in its header.
pub fn read_volume_with_channel(path: &Path) -> Result<(Volume, String)> {
    let header = read_header(path)?;
    let (_, raw_path) = mvol_paths(path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = voxel_count(header.shape) * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let v = Volume {
        data,
        shape: header.shape,
        spacing_mm: header.spacing_mm,
        origin_mm: header.origin_mm,
        kind: header.kind,
    };
    v.validate()?;
    Ok((v, header.channel))
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_volume_channel(v, path, "")
}

/// Writes payload then header, each through a temp file and a rename, so a
/// reader never observes a header without its complete payload.
pub fn write_volume_channel(v: &Volume, path: &Path, channel: &str) -> Result<()> {
    v.validate()?;
    let (header_path, raw_path) = mvol_paths(path);
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    let header = serde_json::to_vec_pretty(&v.header(channel))?;
    write_atomic(&raw_path, &payload)?;
    write_atomic(&header_path, &header)
}

/// Writes through a temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// 1-D linear interpolation weights for a continuous coordinate, clamped to
/// the grid. Returns (lower index, upper index, weight of upper).
#[inline]
pub(crate) fn lerp_coord(s: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = (s.floor() as usize).min(n - 2);
    (i0, i0 + 1, s - i0 as f64)
}

#[inline]
pub(crate) fn nearest_coord(s: f64, n: usize) -> usize {
    let r = (s + 0.5).floor();
    r.clamp(0.0, (n - 1) as f64) as usize
}

/// Trilinear sample at a continuous voxel position, clamp-to-edge.
pub fn sample_trilinear(data: &[f32], d: Dims, p: [f64; 3]) -> f32 {
    let (x0, x1, tx) = lerp_coord(p[0], d[0]);
    let (y0, y1, ty) = lerp_coord(p[1], d[1]);
    let (z0, z1, tz) = lerp_coord(p[2], d[2]);
    let g = |x, y, z| data[linear_index(d, x, y, z)] as f64;
    let c00 = g(x0, y0, z0) * (1.0 - tx) + g(x1, y0, z0) * tx;
    let c10 = g(x0, y1, z0) * (1.0 - tx) + g(x1, y1, z0) * tx;
    let c01 = g(x0, y0, z1) * (1.0 - tx) + g(x1, y0, z1) * tx;
    let c11 = g(x0, y1, z1) * (1.0 - tx) + g(x1, y1, z1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    (c0 * (1.0 - tz) + c1 * tz) as f32
}

pub fn sample_nearest(data: &[f32], d: Dims, p: [f64; 3]) -> f32 {
    data[linear_index(
        d,
        nearest_coord(p[0], d[0]),
        nearest_coord(p[1], d[1]),
        nearest_coord(p[2], d[2]),
    )]
}

/// Resamples onto a new spacing, keeping the origin (centre of voxel 0).
///
/// Images, doses and displacement components use trilinear interpolation;
/// masks use nearest neighbour and stay binary. Displacement values are in
/// voxel units, so callers rescale them per axis (see
/// [`resample_displacement`]).
pub fn resample(v: &Volume, target_spacing_mm: [f64; 3]) -> Result<Volume> {
    if target_spacing_mm
        .iter()
        .any(|&s| !(s > 0.0) || !s.is_finite())
    {
        return Err(Error::Invalid(format!(
            "target spacing must be positive, got {target_spacing_mm:?}"
        )));
    }
    if v.spacing_mm == target_spacing_mm {
        return Ok(v.clone());
    }
    let mut shape = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        let extent = v.shape[a] as f64 * v.spacing_mm[a];
        shape[a] = ((extent / target_spacing_mm[a]).round() as usize).max(1);
        step[a] = target_spacing_mm[a] / v.spacing_mm[a];
    }
    let mut data = Vec::with_capacity(voxel_count(shape));
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let p = [x as f64 * step[0], y as f64 * step[1], z as f64 * step[2]];
                data.push(match v.kind {
                    VolumeKind::Mask => sample_nearest(&v.data, v.shape, p),
                    _ => sample_trilinear(&v.data, v.shape, p),
                });
            }
        }
    }
    if v.kind == VolumeKind::Mask {
        for x in &mut data {
            *x = if *x >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(Volume {
        data,
        shape,
        spacing_mm: target_spacing_mm,
        origin_mm: v.origin_mm,
        kind: v.kind,
    })
}

/// Resamples one displacement component (voxel units along `axis`) and
/// rescales its values to the new voxel size.
pub fn resample_displacement(
    v: &Volume,
    axis: usize,
    target_spacing_mm: [f64; 3],
) -> Result<Volume> {
    let mut out = resample(v, target_spacing_mm)?;
    let scale = (v.spacing_mm[axis] / target_spacing_mm[axis]) as f32;
    if scale != 1.0 {
        for x in &mut out.data {
            *x *= scale;
        }
    }
    Ok(out)
}

/// Pad value used for regions created by [`center_crop_pad`].
pub fn pad_value(kind: VolumeKind) -> f32 {
    match kind {
        VolumeKind::Image => PAD_HU,
        _ => 0.0,
    }
}

/// Low-side offset of the centre crop (positive) or pad (negative) per axis.
/// Odd remainders put the extra voxel on the high-index side.
pub fn crop_offsets(shape: Dims, target: Dims) -> [isize; 3] {
    let mut off = [0isize; 3];
    for a in 0..3 {
        let diff = shape[a] as isize - target[a] as isize;
        off[a] = if diff >= 0 { diff / 2 } else { -((-diff) / 2) };
    }
    off
}

pub fn center_crop_pad(v: &Volume, target_shape: Dims) -> Result<Volume> {
    if target_shape.contains(&0) {
        return Err(Error::Invalid(format!(
            "target shape must be positive, got {target_shape:?}"
        )));
    }
    if v.shape == target_shape {
        return Ok(v.clone());
    }
    let off = crop_offsets(v.shape, target_shape);
    let fill = pad_value(v.kind);
    let mut data = vec![fill; voxel_count(target_shape)];
    for z in 0..target_shape[2] {
        let sz = z as isize + off[2];
        if sz < 0 || sz >= v.shape[2] as isize {
            continue;
        }
        for y in 0..target_shape[1] {
            let sy = y as isize + off[1];
            if sy < 0 || sy >= v.shape[1] as isize {
                continue;
            }
            for x in 0..target_shape[0] {
                let sx = x as isize + off[0];
                if sx < 0 || sx >= v.shape[0] as isize {
                    continue;
                }
                data[linear_index(target_shape, x, y, z)] =
                    v.at(sx as usize, sy as usize, sz as usize);
            }
        }
    }
    let mut origin = v.origin_mm;
    for a in 0..3 {
        origin[a] += off[a] as f64 * v.spacing_mm[a];
    }
    Ok(Volume {
        data,
        shape: target_shape,
        spacing_mm: v.spacing_mm,
        origin_mm: origin,
        kind: v.kind,
    })
}

fn require_kind(v: &Volume, kind: VolumeKind) -> Result<()> {
    if v.kind != kind {
        return Err(Error::WrongKind {
            expected: kind.name().into(),
            found: v.kind.name().into(),
        });
    }
    Ok(())
}

/// HU window [-1000, 1000] mapped affinely onto [-1, 1].
pub fn clip_minmax_normalize(v: &Volume) -> Result<Volume> {
    require_kind(v, VolumeKind::Image)?;
    let data = v
        .data
        .iter()
        .map(|&x| x.clamp(-1000.0, 1000.0) / 1000.0)
        .collect();
    Ok(v.like(data, VolumeKind::Image))
}

/// Population z-score. A (near) constant map becomes all zeros.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    require_kind(v, VolumeKind::Dose)?;
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < 1e-8 {
        vec![0.0; v.data.len()]
    } else {
        v.data
            .iter()
            .map(|&x| ((x as f64 - mean) / std) as f32)
            .collect()
    };
    Ok(v.like(data, VolumeKind::Dose))
}

pub fn binarize(v: &Volume, threshold: f32) -> Volume {
    let data = v
        .data
        .iter()
        .map(|&x| if x >= threshold { 1.0 } else { 0.0 })
        .collect();
    v.like(data, VolumeKind::Mask)
}
