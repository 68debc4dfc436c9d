//! Training cases: bundles of aligned volumes, the seven-channel model input,
//! joint augmentation, splits and the on-disk manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    self, read_volume, sample_nearest, sample_trilinear, voxel_count, write_volume_channel, Dims,
    Volume, VolumeKind,
};
use crate::warp::Dvf;

pub const INPUT_CHANNELS: usize = 7;

pub const CH_CT: &str = "ct";
pub const CH_DOSE: &str = "dose";
pub const CH_CBCT01: &str = "cbct01";
pub const CH_GTVP01: &str = "gtvp01";
pub const CH_GTVN01: &str = "gtvn01";
pub const CH_CBCT21: &str = "cbct21";
pub const CH_GTVP21: &str = "gtvp21";
pub const CH_GTVN21: &str = "gtvn21";
pub const CH_DVF: [&str; 3] = ["dvf_x", "dvf_y", "dvf_z"];

/// Late-fraction targets: CBCT21 and its two tumour masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub cbct21: Volume,
    pub gtvp21: Volume,
    pub gtvn21: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub case_id: String,
    pub ct: Volume,
    pub dose: Volume,
    pub cbct01: Volume,
    pub gtvp01: Volume,
    pub gtvn01: Volume,
    pub targets: Option<Targets>,
    /// Ground-truth deformation, known only for phantoms.
    pub gt_dvf: Option<Dvf>,
}

impl CaseBundle {
    pub fn dims(&self) -> Dims {
        self.ct.shape
    }

    pub fn targets(&self) -> Result<&Targets> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("case {} has no targets", self.case_id)))
    }

    fn volumes(&self) -> Vec<(&'static str, &Volume)> {
        let mut v = vec![
            (CH_CT, &self.ct),
            (CH_DOSE, &self.dose),
            (CH_CBCT01, &self.cbct01),
            (CH_GTVP01, &self.gtvp01),
            (CH_GTVN01, &self.gtvn01),
        ];
        if let Some(t) = &self.targets {
            v.push((CH_CBCT21, &t.cbct21));
            v.push((CH_GTVP21, &t.gtvp21));
            v.push((CH_GTVN21, &t.gtvn21));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let kinds = [
            (CH_CT, VolumeKind::Image),
            (CH_DOSE, VolumeKind::Dose),
            (CH_CBCT01, VolumeKind::Image),
            (CH_GTVP01, VolumeKind::Mask),
            (CH_GTVN01, VolumeKind::Mask),
            (CH_CBCT21, VolumeKind::Image),
            (CH_GTVP21, VolumeKind::Mask),
            (CH_GTVN21, VolumeKind::Mask),
        ];
        for (name, v) in self.volumes() {
            v.validate()?;
            if !v.same_grid(&self.ct) {
                return Err(Error::Shape(format!(
                    "case {}: {name} grid differs from ct",
                    self.case_id
                )));
            }
            let want = kinds.iter().find(|(n, _)| *n == name).map(|(_, k)| *k);
            if want != Some(v.kind) {
                return Err(Error::WrongKind {
                    expected: format!("{want:?} for {name}"),
                    found: format!("{:?}", v.kind),
                });
            }
        }
        if let Some(dvf) = &self.gt_dvf {
            if dvf.dims != self.ct.shape {
                return Err(Error::Shape(format!("case {}: gt_dvf grid", self.case_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "CBCT01")]
    Cbct01,
    #[serde(rename = "CT")]
    Ct,
}

/// Which input modalities reach the network and which image is deformed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSelection {
    pub use_ct: bool,
    pub use_dose: bool,
    pub use_gtv_masks: bool,
    pub baseline: Baseline,
}

impl Default for InputSelection {
    fn default() -> Self {
        InputSelection {
            use_ct: true,
            use_dose: true,
            use_gtv_masks: true,
            baseline: Baseline::Cbct01,
        }
    }
}

impl InputSelection {
    /// Row label in the style of the modality ablation table.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_ct || self.baseline == Baseline::Ct {
            parts.push("CT");
        }
        parts.push("CBCT01");
        if self.use_gtv_masks {
            parts.push("GTV");
        }
        if self.use_dose {
            parts.push("Dose");
        }
        let base = match self.baseline {
            Baseline::Cbct01 => "CBCT01",
            Baseline::Ct => "CT",
        };
        format!("{} (Baseline: {base})", parts.join("+"))
    }
}

/// The seven-channel network input, channel-major, each channel x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    pub data: Vec<f32>,
    pub dims: Dims,
}

impl InputStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }
}

/// Stacks `[ct, gtvp_ct, gtvn_ct, dose, baseline, gtvp_base, gtvn_base]`.
///
/// Bundles carry a single pair of tumour masks (contours on the CBCT are
/// propagated from the planning CT), so both mask slots hold them. With a
/// CT baseline the two image slots swap. Channels disabled by `sel` are
/// zero-filled so the tensor is always seven channels.
pub fn stack_input(c: &CaseBundle, sel: &InputSelection) -> Result<InputStack> {
    let dims = c.dims();
    for (name, v) in c.volumes() {
        if v.shape != dims {
            return Err(Error::Shape(format!(
                "case {}: {name} has shape {:?}, ct has {:?}",
                c.case_id, v.shape, dims
            )));
        }
    }
    let (first, base) = match sel.baseline {
        Baseline::Cbct01 => (&c.ct, &c.cbct01),
        Baseline::Ct => (&c.cbct01, &c.ct),
    };
    // CT is always kept when it is the baseline.
    let use_first = match sel.baseline {
        Baseline::Cbct01 => sel.use_ct,
        Baseline::Ct => true,
    };
    let slots: [(&Volume, bool); INPUT_CHANNELS] = [
        (first, use_first),
        (&c.gtvp01, sel.use_gtv_masks),
        (&c.gtvn01, sel.use_gtv_masks),
        (&c.dose, sel.use_dose),
        (base, true),
        (&c.gtvp01, sel.use_gtv_masks),
        (&c.gtvn01, sel.use_gtv_masks),
    ];
    let n = voxel_count(dims);
    let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
    for (v, on) in slots {
        if on {
            data.extend_from_slice(&v.data);
        } else {
            data.extend(std::iter::repeat_n(0.0, n));
        }
    }
    Ok(InputStack { data, dims })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Left-right flips along x.
    pub flip_x: bool,
    pub max_shift_voxels: u32,
    /// In-plane rotation about the slice (z) axis.
    pub max_rotation_deg: f64,
    /// Gaussian noise sigma on input image channels (normalised units).
    pub noise_sigma: f64,
    /// Probability with which each transform is applied.
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            flip_x: true,
            max_shift_voxels: 5,
            max_rotation_deg: 10.0,
            noise_sigma: 0.02,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn disabled() -> Self {
        AugmentSpec {
            probability: 0.0,
            ..AugmentSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability)
            || self.max_rotation_deg < 0.0
            || self.noise_sigma < 0.0
            || !self.max_rotation_deg.is_finite()
            || !self.noise_sigma.is_finite()
        {
            return Err(Error::Invalid(format!(
                "invalid augmentation spec {self:?}"
            )));
        }
        Ok(())
    }
}

/// One sampled rigid in-plane transform.
///
/// Output voxel `p` samples the source at
/// `flip(R (p - shift - c) + c)`, with `c` the in-plane grid centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricTransform {
    pub flip_x: bool,
    pub shift: [i32; 3],
    pub rotation_rad: f64,
}

impl GeometricTransform {
    pub const IDENTITY: GeometricTransform = GeometricTransform {
        flip_x: false,
        shift: [0, 0, 0],
        rotation_rad: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    fn source_point(&self, d: Dims, p: [usize; 3]) -> [f64; 3] {
        let cx = (d[0] as f64 - 1.0) / 2.0;
        let cy = (d[1] as f64 - 1.0) / 2.0;
        let qx = p[0] as f64 - self.shift[0] as f64 - cx;
        let qy = p[1] as f64 - self.shift[1] as f64 - cy;
        let qz = p[2] as f64 - self.shift[2] as f64;
        let (s, c) = self.rotation_rad.sin_cos();
        let (rx, ry) = if self.rotation_rad == 0.0 {
            (qx, qy)
        } else {
            (c * qx - s * qy, s * qx + c * qy)
        };
        let mut x = rx + cx;
        if self.flip_x {
            x = (d[0] as f64 - 1.0) - x;
        }
        [x, ry + cy, qz]
    }

    /// Maps a displacement sampled at the source point into the output frame
    /// (inverse of the linear part `flip * R`).
    fn pull_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let x = if self.flip_x { -v[0] } else { v[0] };
        let (s, c) = self.rotation_rad.sin_cos();
        if self.rotation_rad == 0.0 {
            [x, v[1], v[2]]
        } else {
            [c * x + s * v[1], -s * x + c * v[1], v[2]]
        }
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        if self.is_identity() {
            return v.clone();
        }
        let d = v.shape;
        let mut data = Vec::with_capacity(v.data.len());
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let p = self.source_point(d, [x, y, z]);
                    data.push(match v.kind {
                        VolumeKind::Mask => sample_nearest(&v.data, d, p),
                        _ => sample_trilinear(&v.data, d, p),
                    });
                }
            }
        }
        v.like(data, v.kind)
    }

    pub fn apply_dvf(&self, dvf: &Dvf) -> Dvf {
        if self.is_identity() {
            return dvf.clone();
        }
        let d = dvf.dims;
        let n = voxel_count(d);
        let mut out = Dvf::zeros(d, dvf.spacing_mm);
        let mut i = 0;
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    let p = self.source_point(d, [x, y, z]);
                    let v = [0, 1, 2].map(|a| sample_trilinear(dvf.component(a), d, p) as f64);
                    let w = self.pull_vector(v);
                    for a in 0..3 {
                        out.disp[a * n + i] = w[a] as f32;
                    }
                    i += 1;
                }
            }
        }
        out
    }

    pub fn apply_bundle(&self, c: &CaseBundle) -> CaseBundle {
        CaseBundle {
            case_id: c.case_id.clone(),
            ct: self.apply_volume(&c.ct),
            dose: self.apply_volume(&c.dose),
            cbct01: self.apply_volume(&c.cbct01),
            gtvp01: self.apply_volume(&c.gtvp01),
            gtvn01: self.apply_volume(&c.gtvn01),
            targets: c.targets.as_ref().map(|t| Targets {
                cbct21: self.apply_volume(&t.cbct21),
                gtvp21: self.apply_volume(&t.gtvp21),
                gtvn21: self.apply_volume(&t.gtvn21),
            }),
            gt_dvf: c.gt_dvf.as_ref().map(|f| self.apply_dvf(f)),
        }
    }
}

/// Draws the geometric transform and noise decision for `spec.seed`.
pub fn sample_transform(spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> (GeometricTransform, bool) {
    let p = spec.probability;
    let mut t = GeometricTransform::IDENTITY;
    if spec.flip_x && rng.random::<f64>() < p {
        t.flip_x = true;
    }
    if spec.max_shift_voxels > 0 && rng.random::<f64>() < p {
        let m = spec.max_shift_voxels as i32;
        t.shift = [0, 1, 2].map(|_| rng.random_range(-m..=m));
    }
    if spec.max_rotation_deg > 0.0 && rng.random::<f64>() < p {
        let deg = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg);
        t.rotation_rad = deg.to_radians();
    }
    let noise = spec.noise_sigma > 0.0 && rng.random::<f64>() < p;
    (t, noise)
}

/// Applies one sampled transform jointly to every volume of the bundle and
/// adds Gaussian noise to the input image channels. Deterministic in
/// `spec.seed`.
pub fn augment(c: &CaseBundle, spec: &AugmentSpec) -> Result<CaseBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t, noise) = sample_transform(spec, &mut rng);
    let mut out = t.apply_bundle(c);
    if noise {
        let normal =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in [&mut out.ct, &mut out.cbct01] {
            for x in &mut v.data {
                *x += normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(out)
}

/// Train / validation / test case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then validation and test sizes rounded from their
/// fractions; the remainder goes to training.
pub fn split_cases(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    if ids.is_empty() {
        return Err(Error::Invalid("cannot split an empty id list".into()));
    }
    let (tr, va, te) = fractions;
    if (tr + va + te - 1.0).abs() > 1e-9 || tr < 0.0 || va < 0.0 || te < 0.0 {
        return Err(Error::Invalid(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let n = ids.len();
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * va).round() as usize).min(n);
    let n_test = ((n as f64 * te).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

/// One manifest row: a case id and channel -> relative path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub case_id: String,
    pub paths: BTreeMap<String, String>,
    /// Set once intensities have been normalised by preprocessing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLIT_FILE: &str = "split.json";

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    volume::write_atomic(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(entries)?,
    )
}

pub fn read_split(dir: &Path) -> Result<Split> {
    let p = dir.join(SPLIT_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_split(dir: &Path, split: &Split) -> Result<()> {
    volume::write_atomic(&dir.join(SPLIT_FILE), &serde_json::to_vec_pretty(split)?)
}

fn channel_path(dir: &Path, case_id: &str, channel: &str) -> (PathBuf, String) {
    let rel = format!("{case_id}/{channel}");
    (dir.join(&rel), format!("{rel}.mvol.json"))
}

/// Writes every volume of the bundle under `dir/<case_id>/` and returns
/// its manifest row.
pub fn save_case(dir: &Path, c: &CaseBundle, normalized: bool) -> Result<ManifestEntry> {
    let case_dir = dir.join(&c.case_id);
    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    let mut paths = BTreeMap::new();
    for (name, v) in c.volumes() {
        let (p, rel) = channel_path(dir, &c.case_id, name);
        write_volume_channel(v, &p, name)?;
        paths.insert(name.to_string(), rel);
    }
    if let Some(dvf) = &c.gt_dvf {
        for (a, name) in CH_DVF.iter().enumerate() {
            let (p, rel) = channel_path(dir, &c.case_id, name);
            write_volume_channel(&dvf.component_volume(a, &c.ct), &p, name)?;
            paths.insert(name.to_string(), rel);
        }
    }
    Ok(ManifestEntry {
        case_id: c.case_id.clone(),
        paths,
        normalized,
    })
}

/// Loads a bundle from a case directory laid out by [`save_case`].
pub fn load_case_dir(case_dir: &Path) -> Result<CaseBundle> {
    let case_id = case_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut paths = BTreeMap::new();
    for name in [
        CH_CT, CH_DOSE, CH_CBCT01, CH_GTVP01, CH_GTVN01, CH_CBCT21, CH_GTVP21, CH_GTVN21,
    ]
    .iter()
    .chain(CH_DVF.iter())
    {
        let p = case_dir.join(format!("{name}.mvol.json"));
        if p.exists() {
            paths.insert(name.to_string(), format!("{name}.mvol.json"));
        }
    }
    load_case(
        case_dir,
        &ManifestEntry {
            case_id,
            paths,
            normalized: false,
        },
    )
}

pub fn load_case(dir: &Path, entry: &ManifestEntry) -> Result<CaseBundle> {
    let get = |name: &str| -> Result<Option<Volume>> {
        match entry.paths.get(name) {
            Some(rel) => read_volume(&dir.join(rel)).map(Some),
            None => Ok(None),
        }
    };
    let need = |name: &str| -> Result<Volume> {
        get(name)?.ok_or_else(|| Error::Missing(format!("case {}: channel {name}", entry.case_id)))
    };
    let targets = match (get(CH_CBCT21)?, get(CH_GTVP21)?, get(CH_GTVN21)?) {
        (Some(cbct21), Some(gtvp21), Some(gtvn21)) => Some(Targets {
            cbct21,
            gtvp21,
            gtvn21,
        }),
        (None, None, None) => None,
        _ => {
            return Err(Error::Missing(format!(
                "case {}: targets must be all present or all absent",
                entry.case_id
            )))
        }
    };
    let gt_dvf = match (get(CH_DVF[0])?, get(CH_DVF[1])?, get(CH_DVF[2])?) {
        (Some(x), Some(y), Some(z)) => Some(Dvf::from_components([&x, &y, &z])?),
        _ => None,
    };
    let c = CaseBundle {
        case_id: entry.case_id.clone(),
        ct: need(CH_CT)?,
        dose: need(CH_DOSE)?,
        cbct01: need(CH_CBCT01)?,
        gtvp01: need(CH_GTVP01)?,
        gtvn01: need(CH_GTVN01)?,
        targets,
        gt_dvf,
    };
    c.validate()?;
    Ok(c)
}

/// Target grid of [`preprocess_case`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    pub spacing_mm: [f64; 3],
    pub shape: Dims,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            spacing_mm: [2.0, 2.0, 2.0],
            shape: [128, 128, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Identity,
    Applied,
}

/// What preprocessing did to one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub case_id: String,
    pub resample: StepStatus,
    pub crop_pad: StepStatus,
    pub normalize: StepStatus,
    pub input_shape: Dims,
    pub input_spacing_mm: [f64; 3],
    pub output_shape: Dims,
    pub output_spacing_mm: [f64; 3],
}

fn status(changed: bool) -> StepStatus {
    if changed {
        StepStatus::Applied
    } else {
        StepStatus::Identity
    }
}

/// Intensity normalization by kind: images are windowed to [-1, 1], doses
/// z-scored and masks binarized at 0.5.
pub fn normalize_volume(v: &Volume) -> Result<Volume> {
    match v.kind {
        VolumeKind::Image => volume::clip_minmax_normalize(v),
        VolumeKind::Dose => volume::zscore_normalize(v),
        VolumeKind::Mask => Ok(volume::binarize(v, 0.5)),
        VolumeKind::Displacement => Ok(v.clone()),
    }
}

fn map_volumes(c: &CaseBundle, f: &dyn Fn(&Volume) -> Result<Volume>) -> Result<CaseBundle> {
    let targets = match &c.targets {
        Some(t) => Some(Targets {
            cbct21: f(&t.cbct21)?,
            gtvp21: f(&t.gtvp21)?,
            gtvn21: f(&t.gtvn21)?,
        }),
        None => None,
    };
    Ok(CaseBundle {
        case_id: c.case_id.clone(),
        ct: f(&c.ct)?,
        dose: f(&c.dose)?,
        cbct01: f(&c.cbct01)?,
        gtvp01: f(&c.gtvp01)?,
        gtvn01: f(&c.gtvn01)?,
        targets,
        gt_dvf: c.gt_dvf.clone(),
    })
}

/// Normalizes every channel of a bundle in place of the raw intensities.
pub fn normalize_case(c: &CaseBundle) -> Result<CaseBundle> {
    map_volumes(c, &normalize_volume)
}

/// Resample, then centre crop / pad, then (unless `normalized` says the
/// intensities already are) normalize. The ground-truth field follows the
/// geometric steps with its values rescaled to the new voxel size.
pub fn preprocess_case(
    c: &CaseBundle,
    spec: &PreprocessSpec,
    normalized: bool,
) -> Result<(CaseBundle, Provenance)> {
    c.validate()?;
    let resampled = c.ct.spacing_mm != spec.spacing_mm;
    let mut out = map_volumes(c, &|v| volume::resample(v, spec.spacing_mm))?;
    let cropped = out.ct.shape != spec.shape;
    out = map_volumes(&out, &|v| volume::center_crop_pad(v, spec.shape))?;
    if !normalized {
        out = normalize_case(&out)?;
    }
    if let Some(dvf) = &c.gt_dvf {
        let comps = (0..3)
            .map(|a| {
                let v = volume::resample_displacement(
                    &dvf.component_volume(a, &c.ct),
                    a,
                    spec.spacing_mm,
                )?;
                volume::center_crop_pad(&v, spec.shape)
            })
            .collect::<Result<Vec<_>>>()?;
        out.gt_dvf = Some(Dvf::from_components([&comps[0], &comps[1], &comps[2]])?);
    }
    out.validate()?;
    let prov = Provenance {
        case_id: c.case_id.clone(),
        resample: status(resampled),
        crop_pad: status(cropped),
        normalize: status(!normalized),
        input_shape: c.ct.shape,
        input_spacing_mm: c.ct.spacing_mm,
        output_shape: out.ct.shape,
        output_spacing_mm: out.ct.spacing_mm,
    };
    Ok((out, prov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    #[test]
    fn split_sizes_follow_cohort_fractions() {
        let s = split_cases(&ids(121), (0.66, 0.165, 0.175), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 20, 21));
        let s = split_cases(&ids(10), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_cases(&ids(30), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 3, 3));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let all = ids(37);
        let a = split_cases(&all, (0.7, 0.2, 0.1), 11).unwrap();
        let b = split_cases(&all, (0.7, 0.2, 0.1), 11).unwrap();
        assert_eq!(a, b);
        let mut union: Vec<_> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .cloned()
            .collect();
        union.sort();
        assert_eq!(union, all);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split_cases(&[], (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_cases(&ids(5), (0.8, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn selection_labels_match_ablation_rows() {
        let all = InputSelection::default();
        assert_eq!(all.label(), "CT+CBCT01+GTV+Dose (Baseline: CBCT01)");
        let no_ct = InputSelection {
            use_ct: false,
            ..all
        };
        assert_eq!(no_ct.label(), "CBCT01+GTV+Dose (Baseline: CBCT01)");
        let ct_base = InputSelection {
            baseline: Baseline::Ct,
            ..all
        };
        assert_eq!(ct_base.label(), "CT+CBCT01+GTV+Dose (Baseline: CT)");
    }
}
