//! Evaluation measures (MSE, SSIM, Dice, ASD), body-mask extraction and
//! report assembly.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::CaseBundle;
use crate::error::{Error, Result};
use crate::loss::ssim_loss;
use crate::volume::{Dims, Volume, VolumeKind};
use crate::warp::Prediction;

pub const BODY_THRESHOLD: f32 = -0.5;

fn check_same(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape != b.shape || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Mean squared voxel difference.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let e = x as f64 - y as f64;
            e * e
        })
        .sum();
    Ok(s / a.data.len() as f64)
}

/// Mean local SSIM, computed with the training loss kernel in double precision.
pub fn ssim_eval(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a, b)?;
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    Ok(1.0 - ssim_loss(&x, &y, a.shape)?)
}

fn mask_bits(v: &Volume) -> Vec<bool> {
    v.data.iter().map(|&x| x != 0.0).collect()
}

/// `2|a & b| / (|a| + |b|)`; 1 when both masks are empty.
pub fn dice(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a, b)?;
    dice_bits(&mask_bits(a), &mask_bits(b))
}

pub fn dice_bits(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        na += p as usize;
        nb += q as usize;
        inter += (p && q) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

const NEIGHBORS6: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn neighbor(d: Dims, c: [usize; 3], off: [isize; 3]) -> Option<usize> {
    let mut p = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + off[a];
        if v < 0 || v >= d[a] as isize {
            return None;
        }
        p[a] = v as usize;
    }
    Some(p[0] + d[0] * (p[1] + d[1] * p[2]))
}

/// Mask voxels with at least one 6-neighbour outside the mask; the volume
/// border counts as outside.
pub fn surface(mask: &[bool], d: Dims) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (i, o) in out.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        let c = crate::volume::coords(d, i);
        *o = NEIGHBORS6
            .iter()
            .any(|&off| neighbor(d, c, off).is_none_or(|j| !mask[j]));
    }
    out
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// site, separable lower-envelope transform with anisotropic spacing.
pub fn squared_distance_transform(sites: &[bool], d: Dims, spacing_mm: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, d[0], d[0] * d[1]];
    for a in 0..3 {
        let n = d[a];
        let s2 = spacing_mm[a] * spacing_mm[a];
        let stride = strides[a];
        let lines = f.len() / n;
        let mut line_in = vec![0.0; n];
        let mut line_out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        for line in 0..lines {
            let base = line % stride + (line / stride) * stride * n;
            for (q, slot) in line_in.iter_mut().enumerate() {
                *slot = f[base + q * stride];
            }
            envelope_1d(&line_in, s2, &mut line_out, &mut v, &mut z);
            for (q, &val) in line_out.iter().enumerate() {
                f[base + q * stride] = val;
            }
        }
    }
    f
}

/// `out[p] = min_q s2 (p - q)^2 + f[q]` over finite `f[q]`.
fn envelope_1d(f: &[f64], s2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        let mut s = inter(q, v[k as usize]);
        while s <= z[k as usize] {
            k -= 1;
            if k < 0 {
                break;
            }
            s = inter(q, v[k as usize]);
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        k += 1;
        v[k as usize] = q;
        z[k as usize] = s;
        z[k as usize + 1] = f64::INFINITY;
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        let dq = p as f64 - q as f64;
        *o = s2 * dq * dq + f[q];
    }
}

/// Average symmetric surface distance in millimetres.
pub fn asd(a: &Volume, b: &Volume, spacing_mm: [f64; 3]) -> Result<f64> {
    check_same(a, b)?;
    asd_bits(&mask_bits(a), &mask_bits(b), a.shape, spacing_mm)
}

pub fn asd_bits(a: &[bool], b: &[bool], d: Dims, spacing_mm: [f64; 3]) -> Result<f64> {
    if !a.iter().any(|&v| v) {
        return Err(Error::UndefinedAsd("first"));
    }
    if !b.iter().any(|&v| v) {
        return Err(Error::UndefinedAsd("second"));
    }
    let sa = surface(a, d);
    let sb = surface(b, d);
    let da = squared_distance_transform(&sa, d, spacing_mm);
    let db = squared_distance_transform(&sb, d, spacing_mm);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..sa.len() {
        if sa[i] {
            total += db[i].sqrt();
            count += 1;
        }
    }
    // Sum the reverse direction separately so asd(a, b) == asd(b, a) exactly.
    let mut reverse = 0.0;
    for i in 0..sb.len() {
        if sb[i] {
            reverse += da[i].sqrt();
            count += 1;
        }
    }
    let (lo, hi) = if total <= reverse {
        (total, reverse)
    } else {
        (reverse, total)
    };
    Ok((lo + hi) / count as f64)
}

/// Labels 6-connected components; returns the mask of the largest one
/// (earliest in scan order on ties).
pub fn largest_component(mask: &[bool], d: Dims) -> Vec<bool> {
    let mut label = vec![0u32; mask.len()];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = crate::volume::coords(d, i);
            for off in NEIGHBORS6 {
                if let Some(j) = neighbor(d, c, off) {
                    if mask[j] && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.1).collect()
}

fn dilate6(mask: &[bool], d: Dims) -> Vec<bool> {
    (0..mask.len())
        .map(|i| {
            mask[i] || {
                let c = crate::volume::coords(d, i);
                NEIGHBORS6
                    .iter()
                    .any(|&off| neighbor(d, c, off).is_some_and(|j| mask[j]))
            }
        })
        .collect()
}

fn erode6(mask: &[bool], d: Dims) -> Vec<bool> {
    (0..mask.len())
        .map(|i| {
            mask[i] && {
                let c = crate::volume::coords(d, i);
                NEIGHBORS6
                    .iter()
                    .all(|&off| neighbor(d, c, off).is_some_and(|j| mask[j]))
            }
        })
        .collect()
}

/// Morphological closing with the 6-neighbourhood. The grid is padded by
/// one voxel so the result contains the input and does not grow along the
/// volume border.
pub fn closing6(mask: &[bool], d: Dims) -> Vec<bool> {
    let p = [d[0] + 2, d[1] + 2, d[2] + 2];
    let mut padded = vec![false; p[0] * p[1] * p[2]];
    let inner = |x: usize, y: usize, z: usize| (x + 1) + p[0] * ((y + 1) + p[1] * (z + 1));
    for (i, &m) in mask.iter().enumerate() {
        let c = crate::volume::coords(d, i);
        padded[inner(c[0], c[1], c[2])] = m;
    }
    let closed = erode6(&dilate6(&padded, p), p);
    (0..mask.len())
        .map(|i| {
            let c = crate::volume::coords(d, i);
            closed[inner(c[0], c[1], c[2])]
        })
        .collect()
}

/// Fills background regions of each axial slice not 4-connected to the slice border.
fn fill_holes_per_slice(mask: &mut [bool], d: Dims) {
    let (nx, ny) = (d[0], d[1]);
    let plane = nx * ny;
    let mut outside = vec![false; plane];
    let mut queue = VecDeque::new();
    for z in 0..d[2] {
        let sl = &mut mask[z * plane..(z + 1) * plane];
        outside.iter_mut().for_each(|o| *o = false);
        for y in 0..ny {
            for x in 0..nx {
                if (x == 0 || y == 0 || x + 1 == nx || y + 1 == ny) && !sl[x + nx * y] {
                    outside[x + nx * y] = true;
                    queue.push_back((x, y));
                }
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            let mut visit = |x: usize, y: usize| {
                let j = x + nx * y;
                if !sl[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back((x, y));
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < nx {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < ny {
                visit(x, y + 1);
            }
        }
        for (s, &o) in sl.iter_mut().zip(&outside) {
            if !o {
                *s = true;
            }
        }
    }
}

/// Thresholded foreground before component selection.
pub fn threshold_mask(img: &Volume, threshold: f32) -> Vec<bool> {
    img.data.iter().map(|&v| v > threshold).collect()
}

/// Patient outline of a normalized image: threshold at -0.5, largest
/// 6-connected component, closing with the 6-neighbourhood, per-slice hole
/// filling.
pub fn body_mask(img: &Volume) -> Result<Volume> {
    let d = img.shape;
    let fg = threshold_mask(img, BODY_THRESHOLD);
    let largest = largest_component(&fg, d);
    let mut closed = closing6(&largest, d);
    fill_holes_per_slice(&mut closed, d);
    if !closed.iter().any(|&v| v) {
        return Err(Error::EmptyBodyMask);
    }
    Ok(img.like(
        closed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        VolumeKind::Mask,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricValues {
    pub mse: f64,
    pub ssim: f64,
    pub dice_body: f64,
    pub dice_gtvp: f64,
    pub dice_gtvn: f64,
    pub asd_body_mm: f64,
    pub asd_gtvp_mm: f64,
    pub asd_gtvn_mm: f64,
}

pub const METRIC_NAMES: [&str; 8] = [
    "mse",
    "ssim",
    "dice_body",
    "dice_gtvp",
    "dice_gtvn",
    "asd_body_mm",
    "asd_gtvp_mm",
    "asd_gtvn_mm",
];

impl MetricValues {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.mse,
            self.ssim,
            self.dice_body,
            self.dice_gtvp,
            self.dice_gtvn,
            self.asd_body_mm,
            self.asd_gtvp_mm,
            self.asd_gtvn_mm,
        ]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        MetricValues {
            mse: v[0],
            ssim: v[1],
            dice_body: v[2],
            dice_gtvp: v[3],
            dice_gtvn: v[4],
            asd_body_mm: v[5],
            asd_gtvp_mm: v[6],
            asd_gtvn_mm: v[7],
        }
    }

    fn check(&self) -> Result<()> {
        let v = self.to_array();
        let bad = |what: &str| {
            Err(Error::Invalid(format!(
                "metric out of range: {what} in {self:?}"
            )))
        };
        if v.iter().any(|x| !x.is_finite()) {
            return bad("non-finite");
        }
        if self.mse < 0.0 {
            return bad("mse");
        }
        if !(-1.0..=1.0).contains(&self.ssim) {
            return bad("ssim");
        }
        if v[2..5].iter().any(|d| !(0.0..=1.0).contains(d)) {
            return bad("dice");
        }
        if v[5..].iter().any(|&a| a < 0.0) {
            return bad("asd");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRow {
    pub subject: String,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRows {
    pub case_id: String,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateRow {
    pub subject: String,
    pub median: MetricValues,
    pub std: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub title: String,
    pub cases: Vec<CaseRows>,
    pub aggregate: Vec<AggregateRow>,
}

pub const SUBJECT_CT: &str = "PlanningCT";
pub const SUBJECT_CBCT01: &str = "CBCT01";
pub const SUBJECT_PREDICTED: &str = "Predicted";

fn row(
    subject: &str,
    image: &Volume,
    gtvp: &Volume,
    gtvn: &Volume,
    target: &crate::dataset::Targets,
    target_body: &Volume,
) -> Result<MetricsRow> {
    let sp = image.spacing_mm;
    let body = body_mask(image)?;
    Ok(MetricsRow {
        subject: subject.to_string(),
        values: MetricValues {
            mse: mse(image, &target.cbct21)?,
            ssim: ssim_eval(image, &target.cbct21)?,
            dice_body: dice(&body, target_body)?,
            dice_gtvp: dice(gtvp, &target.gtvp21)?,
            dice_gtvn: dice(gtvn, &target.gtvn21)?,
            asd_body_mm: asd(&body, target_body, sp)?,
            asd_gtvp_mm: asd(gtvp, &target.gtvp21, sp)?,
            asd_gtvn_mm: asd(gtvn, &target.gtvn21, sp)?,
        },
    })
}

/// Rows comparing planning CT, CBCT01 and the prediction against CBCT21.
pub fn evaluate_case(c: &CaseBundle, prediction: &Prediction) -> Result<Vec<MetricsRow>> {
    Ok(vec![
        evaluate_reference(c, SUBJECT_CT)?,
        evaluate_reference(c, SUBJECT_CBCT01)?,
        evaluate_prediction(c, prediction, SUBJECT_PREDICTED)?,
    ])
}

/// Row for one of the unregistered references (`PlanningCT` or `CBCT01`).
pub fn evaluate_reference(c: &CaseBundle, subject: &str) -> Result<MetricsRow> {
    let t = c.targets()?;
    let target_body = body_mask(&t.cbct21)?;
    let image = match subject {
        SUBJECT_CT => &c.ct,
        SUBJECT_CBCT01 => &c.cbct01,
        other => return Err(Error::Invalid(format!("unknown reference subject {other}"))),
    };
    row(subject, image, &c.gtvp01, &c.gtvn01, t, &target_body)
}

pub fn evaluate_prediction(c: &CaseBundle, p: &Prediction, subject: &str) -> Result<MetricsRow> {
    let t = c.targets()?;
    let target_body = body_mask(&t.cbct21)?;
    row(subject, &p.image, &p.gtvp, &p.gtvn, t, &target_body)
}

fn median_lower(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[(v.len() - 1) / 2]
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Per-subject median (lower middle for even counts) and population std.
/// Subjects keep their first-seen order.
pub fn aggregate(title: &str, cases: Vec<CaseRows>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Invalid(
            "cannot aggregate an empty set of cases".into(),
        ));
    }
    let mut subjects: Vec<String> = Vec::new();
    for c in &cases {
        for r in &c.rows {
            if !subjects.contains(&r.subject) {
                subjects.push(r.subject.clone());
            }
        }
    }
    let aggregate = subjects
        .iter()
        .map(|s| {
            let vals: Vec<[f64; 8]> = cases
                .iter()
                .flat_map(|c| c.rows.iter().filter(|r| &r.subject == s))
                .map(|r| r.values.to_array())
                .collect();
            let col = |m: usize| vals.iter().map(|v| v[m]).collect::<Vec<f64>>();
            AggregateRow {
                subject: s.clone(),
                median: MetricValues::from_array(std::array::from_fn(|m| median_lower(col(m)))),
                std: MetricValues::from_array(std::array::from_fn(|m| population_std(&col(m)))),
            }
        })
        .collect();
    Ok(MetricsReport {
        title: title.to_string(),
        cases,
        aggregate,
    })
}

impl MetricsReport {
    pub fn subjects(&self) -> Vec<&str> {
        self.aggregate.iter().map(|r| r.subject.as_str()).collect()
    }

    pub fn aggregate_row(&self, subject: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.subject == subject)
    }

    /// Checks per-row ranges and that the aggregate matches the case rows.
    pub fn validate(&self) -> Result<()> {
        for c in &self.cases {
            for r in &c.rows {
                r.values.check()?;
            }
        }
        let again = aggregate(&self.title, self.cases.clone())?;
        if again.aggregate != self.aggregate {
            return Err(Error::Invalid(
                "aggregate rows do not match the per-case rows".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }

    /// Aligned plain-text table of `median ± std` per subject and metric.
    pub fn to_table(&self) -> String {
        let headers = [
            "Subject",
            "MSE",
            "SSIM",
            "Dice Body",
            "Dice GTVp",
            "Dice GTVn",
            "ASD Body",
            "ASD GTVp",
            "ASD GTVn",
        ];
        let mut cells: Vec<Vec<String>> = vec![headers.iter().map(|s| s.to_string()).collect()];
        for r in &self.aggregate {
            let med = r.median.to_array();
            let sd = r.std.to_array();
            let mut line = vec![r.subject.clone()];
            for m in 0..8 {
                line.push(format!("{:.3}±{:.3}", med[m], sd[m]));
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..headers.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        for (k, r) in cells.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    let pad = widths[c] - s.chars().count();
                    if c == 0 {
                        format!("{s}{}", " ".repeat(pad))
                    } else {
                        format!("{}{s}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if k == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }

    /// One line per case row followed by the median and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("scope,subject,{}\n", METRIC_NAMES.join(","));
        let fmt = |v: [f64; 8]| v.map(|x| format!("{x}")).join(",");
        for c in &self.cases {
            for r in &c.rows {
                let _ = writeln!(
                    out,
                    "{},{},{}",
                    c.case_id,
                    r.subject,
                    fmt(r.values.to_array())
                );
            }
        }
        for r in &self.aggregate {
            let _ = writeln!(out, "median,{},{}", r.subject, fmt(r.median.to_array()));
            let _ = writeln!(out, "std,{},{}", r.subject, fmt(r.std.to_array()));
        }
        out
    }
}

/// Number of voxels in a mask.
pub fn count(mask: &Volume) -> usize {
    mask.data.iter().filter(|&&v| v != 0.0).count()
}

/// Convenience for tests and tools: the grid of a mask as booleans.
pub fn to_bits(mask: &Volume) -> Vec<bool> {
    mask_bits(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::voxel_count;

    fn mask(d: Dims, on: &[usize]) -> Vec<bool> {
        let mut m = vec![false; voxel_count(d)];
        for &i in on {
            m[i] = true;
        }
        m
    }

    #[test]
    fn asd_single_voxels() {
        let d = [8, 3, 3];
        let a = mask(d, &[crate::volume::linear_index(d, 1, 1, 1)]);
        let b = mask(d, &[crate::volume::linear_index(d, 4, 1, 1)]);
        let v = asd_bits(&a, &b, d, [2.0, 2.0, 2.0]).unwrap();
        assert!((v - 6.0).abs() < 1e-12);
        assert_eq!(asd_bits(&a, &a, d, [2.0; 3]).unwrap(), 0.0);
        let empty = vec![false; voxel_count(d)];
        assert!(matches!(
            asd_bits(&a, &empty, d, [1.0; 3]),
            Err(Error::UndefinedAsd(_))
        ));
    }

    #[test]
    fn dice_examples() {
        let d = [16, 1, 1];
        let a = mask(d, &(0..8).collect::<Vec<_>>());
        let b = mask(d, &(4..12).collect::<Vec<_>>());
        assert_eq!(dice_bits(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_bits(&a, &a).unwrap(), 1.0);
        let c = mask(d, &(8..16).collect::<Vec<_>>());
        assert_eq!(dice_bits(&a, &c).unwrap(), 0.0);
        let e = vec![false; 16];
        assert_eq!(dice_bits(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn aggregate_median_and_std() {
        let mk = |id: &str, v: f64| CaseRows {
            case_id: id.into(),
            rows: vec![MetricsRow {
                subject: "X".into(),
                values: MetricValues::from_array([v; 8]),
            }],
        };
        let r = aggregate("t", vec![mk("a", 3.0), mk("b", 1.0), mk("c", 2.0)]).unwrap();
        assert_eq!(r.aggregate[0].median.mse, 2.0);
        assert!((r.aggregate[0].std.mse - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let even = aggregate("t", vec![mk("a", 4.0), mk("b", 1.0)]).unwrap();
        assert_eq!(even.aggregate[0].median.mse, 1.0);
        let single = aggregate("t", vec![mk("a", 0.25)]).unwrap();
        assert_eq!(single.aggregate[0].median.ssim, 0.25);
        assert_eq!(single.aggregate[0].std.ssim, 0.0);
        assert!(aggregate("t", vec![]).is_err());
    }

    #[test]
    fn hole_filling_and_closing() {
        // A hollow box: the interior cavity must be filled slice by slice.
        let d = [9, 9, 3];
        let mut data = vec![-1.0f32; voxel_count(d)];
        for z in 0..3 {
            for y in 1..8 {
                for x in 1..8 {
                    let ring = x == 1 || x == 7 || y == 1 || y == 7;
                    if ring {
                        data[crate::volume::linear_index(d, x, y, z)] = 0.0;
                    }
                }
            }
        }
        let img = Volume::new(data, d, [1.0; 3], [0.0; 3], VolumeKind::Image).unwrap();
        let m = body_mask(&img).unwrap();
        assert_eq!(count(&m), 7 * 7 * 3);
        let air = Volume::filled(d, [1.0; 3], VolumeKind::Image, -1.0);
        assert!(matches!(body_mask(&air), Err(Error::EmptyBodyMask)));
    }
}
