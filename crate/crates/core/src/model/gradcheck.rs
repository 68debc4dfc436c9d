//! Finite-difference verification of the analytic gradients.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::net::gradient_prepared;
use super::{ModelConfig, ParamGroup, Params};
use crate::dataset::INPUT_CHANNELS;
use crate::error::{Error, Result};
use crate::loss::{composite_loss_grad, LossCase, LossWeights};
use crate::volume::{voxel_count, Dims};
use crate::warp::{sample_cells, warp_channel, warp_channel_backward, WarpMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    /// Parameter elements sampled across all groups.
    pub samples: usize,
    /// Field entries sampled for each field-gradient check.
    pub field_samples: usize,
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: scales the analytic gradient of one group so the check
    /// must fail for it.
    pub corrupt_group: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig::tiny(),
            samples: 240,
            field_samples: 40,
            eps: 1e-5,
            floor: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            corrupt_group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub samples: usize,
    pub max_rel_err: f64,
    /// Parameter path (`name[index]`) with the largest error.
    pub worst: String,
    /// Analytic and numeric values at the worst sample.
    pub worst_values: (f64, f64),
    /// Draws discarded because the difference stencil straddled a kink.
    pub rejected: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub eps: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// A smooth synthetic case on `dims`: images in [-1, 1], spherical masks,
/// targets shifted by a smooth field, dense non-zero inputs.
fn synthetic_case(dims: Dims, rng: &mut ChaCha8Rng) -> (Vec<f64>, LossCase<f64>) {
    let n = voxel_count(dims);
    let coord = |i: usize| crate::volume::coords(dims, i).map(|c| c as f64);
    let mut wave = |amp: f64| {
        let k: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let ph: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        move |p: [f64; 3]| amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).sin()
    };
    let (w1, w2, w3) = (wave(0.5), wave(0.3), wave(0.4));
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let r = dims.iter().copied().min().unwrap() as f64 / 3.0;
    let sphere = |p: [f64; 3], c: [f64; 3], r: f64| {
        let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
        if d2 <= r * r {
            1.0
        } else {
            0.0
        }
    };
    let cp = [c[0] - 1.5, c[1], c[2]];
    let cn = [c[0] + 2.5, c[1] + 1.0, c[2]];
    let mut base = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    let (mut gp, mut gn, mut tp, mut tn) = (vec![], vec![], vec![], vec![]);
    for i in 0..n {
        let p = coord(i);
        let q = [p[0] + 0.6, p[1] - 0.4, p[2] + 0.3];
        base.push((w1(p) + w2(p)).clamp(-1.0, 1.0));
        target.push((w1(q) + w2(q) + 0.05 * w3(p)).clamp(-1.0, 1.0));
        gp.push(sphere(p, cp, r));
        gn.push(sphere(p, cn, r * 0.7));
        tp.push(sphere(p, cp, r * 0.85));
        tn.push(sphere(p, cn, r * 0.6));
    }
    let mut input = Vec::with_capacity(INPUT_CHANNELS * n);
    let ct: Vec<f64> = (0..n)
        .map(|i| (0.8 * base[i] + 0.1 * w3(coord(i))).clamp(-1.0, 1.0))
        .collect();
    let dose: Vec<f64> = (0..n).map(|i| w3(coord(i)) + 0.2).collect();
    for ch in [&ct, &gp, &gn, &dose, &base, &gp, &gn] {
        input.extend_from_slice(ch);
    }
    let case = LossCase {
        dims,
        base_image: base,
        base_gtvp: gp,
        base_gtvn: gn,
        target_image: target,
        target_gtvp: tp,
        target_gtvn: tn,
    };
    (input, case)
}

/// Parameters with every entry perturbed away from special values: the
/// zero head gets a random scale so the field is non-trivial and biases
/// move off zero so no activation sits exactly on a kink.
fn perturbed_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Params<f64>> {
    let mut p = Params::<f64>::init(cfg, rng.random())?;
    let small = Normal::new(0.0, 0.05).expect("std");
    let head = Normal::new(0.0, 0.1).expect("std");
    for (s, v) in p.specs.clone().iter().zip(p.values.iter_mut()) {
        let dist = if s.group == ParamGroup::Head {
            head
        } else {
            small
        };
        let is_bias_like = s.name.ends_with(".b") || s.name.ends_with(".g");
        if s.group == ParamGroup::Head || is_bias_like {
            for x in v.iter_mut() {
                *x += dist.sample(rng);
            }
        }
    }
    Ok(p)
}

type Pattern = (Vec<bool>, Vec<i64>);

const MAX_REJECT_FACTOR: usize = 20;

struct Sampled {
    path: String,
    analytic: f64,
    numeric: f64,
}

fn summarize(
    group: &str,
    items: &[Sampled],
    rejected: usize,
    cfg: &GradcheckConfig,
) -> GroupReport {
    let mut worst = (0.0f64, String::new(), (0.0, 0.0));
    for it in items {
        let e = rel_err(it.analytic, it.numeric, cfg.floor);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, it.path.clone(), (it.analytic, it.numeric));
        }
    }
    GroupReport {
        group: group.to_string(),
        samples: items.len(),
        max_rel_err: worst.0,
        worst: worst.1,
        worst_values: worst.2,
        rejected,
        passed: !items.is_empty() && worst.0 <= cfg.tolerance,
    }
}

/// Runs the parameter and field checks in double precision.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.model.validate()?;
    let corrupt = match &cfg.corrupt_group {
        Some(g) => Some(
            ParamGroup::parse(g)
                .map(|p| p.name().to_string())
                .or_else(|| g.starts_with("phi.").then(|| g.clone()))
                .ok_or_else(|| Error::Invalid(format!("unknown parameter group {g}")))?,
        ),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = cfg.model.input_shape;
    let (input, case) = synthetic_case(dims, &mut rng);
    let params = perturbed_params(&cfg.model, &mut rng)?;
    let weights = LossWeights::default();
    let (_, grads) = gradient_prepared(&input, &case, &params, &cfg.model, &weights)?;

    // The network is only piecewise smooth (leaky ReLU, trilinear cells).
    // A central difference is trusted only when both stencil points share
    // the activation pattern and sample cells of the base point.
    let eval = |p: &Params<f64>| -> Result<(f64, Pattern)> {
        let mut tape = crate::tape::Tape::new();
        let f = super::forward_tape(&mut tape, p, &cfg.model, &input)?;
        let disp = tape.value(f.dvf);
        let loss = composite_loss_grad(&case, disp, &weights, false)?.0.total;
        Ok((loss, (tape.activation_pattern(), sample_cells(disp, dims))))
    };
    let (_, base_pattern) = eval(&params)?;

    // Sample parameter elements evenly across the groups present.
    let mut groups: Vec<ParamGroup> = params.specs.iter().map(|s| s.group).collect();
    groups.sort();
    groups.dedup();
    let per_group = cfg.samples.div_ceil(groups.len().max(1));
    let mut reports = Vec::new();
    for g in &groups {
        let members: Vec<usize> = (0..params.len())
            .filter(|&i| params.specs[i].group == *g)
            .collect();
        let mut items = Vec::with_capacity(per_group);
        let mut rejected = 0;
        while items.len() < per_group {
            if rejected > MAX_REJECT_FACTOR * per_group {
                return Err(Error::Invalid(format!(
                    "gradcheck: group {} has no smooth neighbourhood at eps {}",
                    g.name(),
                    cfg.eps
                )));
            }
            let pi = *members.choose(&mut rng).expect("non-empty group");
            let e = rng.random_range(0..params.values[pi].len());
            let theta = params.values[pi][e];
            let mut p = params.clone();
            p.values[pi][e] = theta + cfg.eps;
            let (plus, pat_plus) = eval(&p)?;
            p.values[pi][e] = theta - cfg.eps;
            let (minus, pat_minus) = eval(&p)?;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                rejected += 1;
                continue;
            }
            let mut analytic = grads[pi][e];
            if corrupt.as_deref() == Some(g.name()) {
                analytic = analytic * 1.5 + 1e-3;
            }
            items.push(Sampled {
                path: format!("{}[{e}]", params.specs[pi].name),
                analytic,
                numeric: (plus - minus) / (2.0 * cfg.eps),
            });
        }
        reports.push(summarize(g.name(), &items, rejected, cfg));
    }

    reports.extend(field_checks(cfg, &case, corrupt.as_deref(), &mut rng)?);
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        eps: cfg.eps,
        groups: reports,
        passed,
    })
}

/// Gradients with respect to the displacement field: the warp alone and
/// each loss term in isolation.
fn field_checks(
    cfg: &GradcheckConfig,
    case: &LossCase<f64>,
    corrupt: Option<&str>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GroupReport>> {
    let d = case.dims;
    let n = voxel_count(d);
    let field = Normal::new(0.0, 0.7).expect("std");
    let disp: Vec<f64> = (0..3 * n).map(|_| field.sample(rng)).collect();
    let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let warp_obj = |phi: &[f64]| -> Result<f64> {
        let w = warp_channel(&case.base_image, phi, d, WarpMode::Trilinear)?;
        Ok(w.iter().zip(&probe).map(|(a, b)| a * b).sum())
    };
    let (_, warp_grad) = warp_channel_backward(&probe, &case.base_image, &disp, d, false)?;

    let only = |which: &str| -> LossWeights {
        let mut w = LossWeights {
            w_image: 0.0,
            w_gtvp: 0.0,
            w_gtvn: 0.0,
            lambda: 0.0,
        };
        match which {
            "ssim" => w.w_image = 1.0,
            "dice_p" => w.w_gtvp = 1.0,
            "dice_n" => w.w_gtvn = 1.0,
            _ => w.lambda = 1.0,
        }
        w
    };
    let mut out = Vec::new();
    let names = ["warp", "ssim", "dice_p", "dice_n", "diffusion"];
    for name in names {
        let (analytic, objective): (Vec<f64>, Box<dyn Fn(&[f64]) -> Result<f64>>) = if name
            == "warp"
        {
            (warp_grad.clone(), Box::new(warp_obj))
        } else {
            let w = only(name);
            let (_, g) = composite_loss_grad(case, &disp, &w, true)?;
            (
                g,
                Box::new(move |phi: &[f64]| Ok(composite_loss_grad(case, phi, &w, false)?.0.total)),
            )
        };
        let group = format!("phi.{name}");
        let mut items = Vec::with_capacity(cfg.field_samples);
        let mut rejected = 0;
        while items.len() < cfg.field_samples {
            let e = rng.random_range(0..3 * n);
            let c = crate::volume::coords(d, e % n)[e / n] as f64 + disp[e];
            if (c + cfg.eps).floor() != (c - cfg.eps).floor() {
                rejected += 1;
                continue;
            }
            let mut phi = disp.clone();
            phi[e] = disp[e] + cfg.eps;
            let plus = objective(&phi)?;
            phi[e] = disp[e] - cfg.eps;
            let minus = objective(&phi)?;
            let mut a = analytic[e];
            if corrupt == Some(group.as_str()) {
                a = a * 1.5 + 1e-3;
            }
            items.push(Sampled {
                path: format!("{group}[{e}]"),
                analytic: a,
                numeric: (plus - minus) / (2.0 * cfg.eps),
            });
        }
        out.push(summarize(&group, &items, rejected, cfg));
    }
    Ok(out)
}
