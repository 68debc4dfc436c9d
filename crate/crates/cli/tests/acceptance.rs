//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. `ACCEPTANCE_ONLY=1,5,9` restricts the run.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anapred::dataset::{normalize_case, InputSelection};
use anapred::loss::{composite_loss, diffusion_loss, LossWeights};
use anapred::metrics::{
    asd, dice, mse, ssim_eval, MetricsReport, SUBJECT_CBCT01, SUBJECT_CT, SUBJECT_PREDICTED,
};
use anapred::model::{forward_tape, gradcheck, GradcheckConfig, ModelConfig, Params};
use anapred::phantom::{generate_case, PhantomSpec};
use anapred::tape::Tape;
use anapred::train::{Adam, Plateau};
use anapred::volume::{coords, voxel_count, Dims, Volume, VolumeKind};
use anapred::warp::{warp_channel, Dvf, WarpMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn anapred(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_anapred"))
        .args(args)
        .env("ANAPRED_LOG", "warn")
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "anapred {} exited with {:?}: {}",
            args.first().unwrap_or(&""),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("stdout is not JSON: {e}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Check {
    let t = Instant::now();
    let report = gradcheck(&GradcheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let params: Vec<_> = report
        .groups
        .iter()
        .filter(|g| !g.group.starts_with("phi."))
        .collect();
    let sampled: usize = params.iter().map(|g| g.samples).sum();
    ensure(report.passed, || {
        let f: Vec<_> = report
            .failures()
            .iter()
            .map(|g| format!("{} {:.2e} at {}", g.group, g.max_rel_err, g.worst))
            .collect();
        format!("failing groups: {}", f.join(", "))
    })?;
    ensure(report.max_rel_err() <= 1e-4, || {
        format!("max rel err {:.2e}", report.max_rel_err())
    })?;
    ensure(
        params.len() >= 6 && params.iter().all(|g| g.samples > 0),
        || format!("{} parameter groups", params.len()),
    )?;
    ensure(sampled >= 200, || format!("{sampled} parameter samples"))?;
    ensure(elapsed <= Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "{sampled} parameters over {} groups, {} field checks, max rel err {:.2e}, {:.0?}",
        params.len(),
        report.groups.len() - params.len(),
        report.max_rel_err(),
        elapsed
    ))
}

// ---------------------------------------------------------------- 2

fn shape_ladder() -> Check {
    let cfg = ModelConfig::default();
    ensure(cfg.input_shape == [128, 128, 32], || {
        format!("default grid {:?}", cfg.input_shape)
    })?;
    let params = Params::<f32>::init(&cfg, 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input: Vec<f32> = (0..cfg.in_channels * voxel_count(cfg.input_shape))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut tape = Tape::new();
    let f = forward_tape(&mut tape, &params, &cfg, &input).map_err(|e| e.to_string())?;
    let got: Vec<(Dims, (usize, usize))> = f
        .stages
        .iter()
        .map(|st| (st.grid, tape.shape(st.tokens)))
        .collect();
    let want: Vec<(Dims, (usize, usize))> = vec![
        ([32, 32, 16], (32 * 32 * 16, 96)),
        ([16, 16, 8], (16 * 16 * 8, 192)),
        ([8, 8, 4], (8 * 8 * 4, 384)),
        ([4, 4, 2], (4 * 4 * 2, 768)),
    ];
    ensure(got == want, || format!("stages {got:?}"))?;
    let dvf = tape.shape(f.dvf);
    ensure(dvf == (3, 128 * 128 * 32), || format!("dvf {dvf:?}"))?;
    let v = tape.value(f.dvf);
    ensure(v.iter().all(|x| x.is_finite()), || "non-finite dvf".into())?;
    Ok("stages 32x32x16x96 / 16x16x8x192 / 8x8x4x384 / 4x4x2x768, dvf 3x128x128x32".into())
}

// ---------------------------------------------------------------- 3

fn warp_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_identity = 0.0f32;
    for _ in 0..50 {
        let d = [0, 1, 2].map(|_| rng.random_range(1..10));
        let n = voxel_count(d);
        let src: Vec<f32> = (0..n).map(|_| rng.random_range(-1000.0..1000.0)).collect();
        let zero = vec![0.0f32; 3 * n];
        for mode in [WarpMode::Trilinear, WarpMode::Nearest] {
            let out = warp_channel(&src, &zero, d, mode).map_err(|e| e.to_string())?;
            for (a, b) in out.iter().zip(&src) {
                worst_identity = worst_identity.max((a - b).abs());
            }
        }
        let t = [0, 1, 2].map(|_| rng.random_range(-3i64..=3));
        let mut disp = vec![0.0f32; 3 * n];
        for a in 0..3 {
            disp[a * n..(a + 1) * n]
                .iter_mut()
                .for_each(|v| *v = t[a] as f32);
        }
        let want: Vec<f32> = (0..n)
            .map(|i| {
                let c = coords(d, i);
                let q = [0, 1, 2].map(|a| (c[a] as i64 + t[a]).clamp(0, d[a] as i64 - 1) as usize);
                src[q[0] + d[0] * (q[1] + d[1] * q[2])]
            })
            .collect();
        for mode in [WarpMode::Trilinear, WarpMode::Nearest] {
            let out = warp_channel(&src, &disp, d, mode).map_err(|e| e.to_string())?;
            ensure(out == want, || {
                format!("integer shift {t:?} on {d:?} ({mode:?}) is not exact")
            })?;
        }
    }
    ensure(worst_identity <= 1e-6, || {
        format!("identity error {worst_identity}")
    })?;
    let half = warp_channel(
        &[0.0f64, 10.0],
        &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
        [2, 1, 1],
        WarpMode::Trilinear,
    )
    .map_err(|e| e.to_string())?;
    ensure((half[0] - 5.0).abs() <= 1e-6, || {
        format!("half-voxel value {}", half[0])
    })?;
    Ok(format!(
        "identity err {worst_identity:.1e}, 100 integer shifts exact, half-voxel {}",
        half[0]
    ))
}

// ---------------------------------------------------------------- 4

fn idx(d: Dims, x: usize, y: usize, z: usize) -> usize {
    x + d[0] * (y + d[1] * z)
}

fn oracle_dice(a: &[f32], b: &[f32]) -> f64 {
    let na = a.iter().filter(|&&v| v == 1.0).count();
    let nb = b.iter().filter(|&&v| v == 1.0).count();
    let both = a
        .iter()
        .zip(b)
        .filter(|(&p, &q)| p == 1.0 && q == 1.0)
        .count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn oracle_surface(m: &[f32], d: Dims) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for i in 0..m.len() {
        if m[i] != 1.0 {
            continue;
        }
        let c = coords(d, i).map(|v| v as i64);
        let exposed = (0..3).any(|a| {
            [-1i64, 1].iter().any(|&st| {
                let mut q = c;
                q[a] += st;
                q[a] < 0
                    || q[a] >= d[a] as i64
                    || m[idx(d, q[0] as usize, q[1] as usize, q[2] as usize)] != 1.0
            })
        });
        if exposed {
            out.push(c.map(|v| v as f64));
        }
    }
    out
}

fn oracle_asd(a: &[f32], b: &[f32], d: Dims, sp: [f64; 3]) -> f64 {
    let (sa, sb) = (oracle_surface(a, d), oracle_surface(b, d));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] - q[k]) * sp[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = sa.iter().map(|p| nearest(p, &sb)).sum::<f64>()
        + sb.iter().map(|p| nearest(p, &sa)).sum::<f64>();
    total / (sa.len() + sb.len()) as f64
}

/// Windowed SSIM from the definition: Gaussian window (sigma 1.5, seven
/// taps per axis) cut at the volume border and renormalized, data range 2.
fn oracle_ssim(x: &[f64], y: &[f64], d: Dims) -> f64 {
    let g = |t: i64| (-((t * t) as f64) / 4.5).exp();
    let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
    let mut total = 0.0;
    for i in 0..x.len() {
        let c = coords(d, i).map(|v| v as i64);
        let mut taps = Vec::new();
        for dz in -3..=3i64 {
            for dy in -3..=3i64 {
                for dx in -3..=3i64 {
                    let q = [c[0] + dx, c[1] + dy, c[2] + dz];
                    if (0..3).all(|k| q[k] >= 0 && q[k] < d[k] as i64) {
                        taps.push((
                            idx(d, q[0] as usize, q[1] as usize, q[2] as usize),
                            g(dx) * g(dy) * g(dz),
                        ));
                    }
                }
            }
        }
        let w: f64 = taps.iter().map(|t| t.1).sum();
        let m = |v: &[f64]| taps.iter().map(|&(j, wj)| wj * v[j]).sum::<f64>() / w;
        let (mx, my) = (m(x), m(y));
        let cov = |u: &[f64], mu: f64, v: &[f64], mv: f64| {
            taps.iter()
                .map(|&(j, wj)| wj * (u[j] - mu) * (v[j] - mv))
                .sum::<f64>()
                / w
        };
        let (sxx, syy, sxy) = (cov(x, mx, x, mx), cov(y, my, y, my), cov(x, mx, y, my));
        total +=
            (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
    total / x.len() as f64
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let d: Dims = [0, 1, 2].map(|_| rng.random_range(1..=12));
        let n = voxel_count(d);
        let sp = [0, 1, 2].map(|_| rng.random_range(0.5..3.0));
        let mask = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            let p = rng.random_range(0.05..0.6);
            let mut m: Vec<f32> = (0..n)
                .map(|_| (rng.random::<f64>() < p) as u8 as f32)
                .collect();
            let k = rng.random_range(0..n);
            m[k] = 1.0;
            m
        };
        let (a, b) = (mask(&mut rng), mask(&mut rng));
        let vol = |data: &[f32], kind| Volume::new(data.to_vec(), d, sp, [0.0; 3], kind).unwrap();
        let (ma, mb) = (vol(&a, VolumeKind::Mask), vol(&b, VolumeKind::Mask));
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = x
            .iter()
            .map(|&v| (0.6 * v + rng.random_range(-0.4..0.4)).clamp(-1.0, 1.0))
            .collect();
        let (ix, iy) = (vol(&x, VolumeKind::Image), vol(&y, VolumeKind::Image));
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let want_mse = xf
            .iter()
            .zip(&yf)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            / n as f64;

        let err = [
            (dice(&ma, &mb).unwrap() - oracle_dice(&a, &b)).abs(),
            (asd(&ma, &mb, sp).unwrap() - oracle_asd(&a, &b, d, sp)).abs(),
            (ssim_eval(&ix, &iy).unwrap() - oracle_ssim(&xf, &yf, d)).abs(),
            (mse(&ix, &iy).unwrap() - want_mse).abs(),
        ];
        for k in 0..4 {
            worst[k] = worst[k].max(err[k]);
        }
    }
    let tol = [0.0, 1e-6, 1e-5, 1e-9];
    let names = ["dice", "asd", "ssim", "mse"];
    for k in 0..4 {
        ensure(worst[k] <= tol[k], || {
            format!("{} error {:.3e} > {:.0e}", names[k], worst[k], tol[k])
        })?;
    }
    let d = [9, 7, 5];
    let n = voxel_count(d);
    let mut ramp = vec![0.0f64; 3 * n];
    for (i, v) in ramp.iter_mut().take(n).enumerate() {
        *v = coords(d, i)[0] as f64;
    }
    let r = diffusion_loss(&ramp, d).unwrap();
    ensure((r - 1.0 / 9.0).abs() <= 1e-9, || {
        format!("ramp diffusion {r}")
    })?;
    let c = diffusion_loss(&vec![1.25f64; 3 * n], d).unwrap();
    ensure(c == 0.0, || format!("constant diffusion {c}"))?;
    Ok(format!(
        "200 cases, max err dice {:.0e} asd {:.1e} ssim {:.1e} mse {:.1e}, ramp {r:.6}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

// ---------------------------------------------------------------- 5

fn perfect_case_loss() -> Check {
    let spec = PhantomSpec {
        shrink_factor: 1.0,
        body_shrink_mm: 0.0,
        noise_sigma_image: 0.0,
        ..PhantomSpec::default()
    };
    let c = normalize_case(&generate_case(&spec, "perfect").map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let b = composite_loss(
        &c,
        &Dvf::zeros(c.dims(), c.ct.spacing_mm),
        &LossWeights::default(),
        &InputSelection::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(b.total < 1e-3, || format!("loss {:.3e}", b.total))?;
    Ok(format!("loss {:.2e}", b.total))
}

// ---------------------------------------------------------------- 6, 7

const EXPERIMENT_CASES: &str = "30";
const EXPERIMENT_SEED: &str = "7";

fn experiment_config(dir: &Path) -> PathBuf {
    let grid = json!([44, 44, 16]);
    let cfg = json!({
        "phantom": {"shape": grid, "spacing_mm": [3.0, 3.0, 2.0]},
        "split": {"train": 0.8, "val": 0.1, "test": 0.1},
        "model": {"embed_dim": 24, "depths": [2, 2, 2, 2], "heads": [2, 4, 4, 8], "input_shape": grid, "dec_base": 4},
        "train": {"epochs": 50, "batch_size": 4, "lr0": 1e-3, "augment": {"probability": 0.0}},
    });
    let p = dir.join("experiment.json");
    fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

/// Generate, train, predict and evaluate; returns the evaluation report.
fn experiment(dir: &Path) -> Result<MetricsReport, String> {
    let cfg = experiment_config(dir);
    let cfg = s(&cfg);
    let (data, run, pred) = (dir.join("data"), dir.join("run"), dir.join("pred"));
    let seed = ["--seed", EXPERIMENT_SEED];
    let g = anapred(
        &[
            &[
                "generate",
                "--config",
                cfg,
                "--out",
                s(&data),
                "--n",
                EXPERIMENT_CASES,
            ],
            &seed[..],
        ]
        .concat(),
    )?;
    ensure(
        g["split"] == json!({"train": 24, "val": 3, "test": 3}),
        || format!("split {}", g["split"]),
    )?;
    anapred(
        &[
            &[
                "train",
                "--config",
                cfg,
                "--data",
                s(&data),
                "--out",
                s(&run),
                "--deterministic",
            ],
            &seed[..],
        ]
        .concat(),
    )?;
    let ckpt = run.join("best.ckpt");
    anapred(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&pred),
    ])?;
    let report = dir.join("report");
    let v = anapred(&[
        "evaluate",
        "--config",
        cfg,
        "--data",
        s(&data),
        "--pred",
        s(&pred),
        "--out",
        s(&report),
    ])?;
    serde_json::from_value(v).map_err(|e| e.to_string())
}

fn prediction_beats_baseline(dir: &Path) -> Check {
    let t = Instant::now();
    let report = experiment(dir)?;
    let elapsed = t.elapsed();
    let median = |subject: &str| {
        report
            .aggregate
            .iter()
            .find(|r| r.subject == subject)
            .map(|r| r.median.clone())
            .ok_or_else(|| format!("no {subject} row"))
    };
    let (pred, base) = (median(SUBJECT_PREDICTED)?, median(SUBJECT_CBCT01)?);
    let gain = pred.dice_gtvp - base.dice_gtvp;
    let mut ordered = 0;
    for c in &report.cases {
        let ssim = |subject: &str| {
            c.rows
                .iter()
                .find(|r| r.subject == subject)
                .map(|r| r.values.ssim)
                .unwrap_or(f64::NAN)
        };
        if ssim(SUBJECT_PREDICTED) >= ssim(SUBJECT_CBCT01)
            && ssim(SUBJECT_CBCT01) >= ssim(SUBJECT_CT)
        {
            ordered += 1;
        }
    }
    let detail = format!(
        "median GTVp dice {:.4} vs CBCT01 {:.4} (+{gain:.4}), SSIM ordering {ordered}/{}, {:.1} min",
        pred.dice_gtvp,
        base.dice_gtvp,
        report.cases.len(),
        elapsed.as_secs_f64() / 60.0
    );
    ensure(report.cases.len() == 3, || {
        format!("{} test cases", report.cases.len())
    })?;
    ensure(gain >= 0.05, || detail.clone())?;
    ensure(3 * ordered >= 2 * report.cases.len(), || detail.clone())?;
    ensure(elapsed <= Duration::from_secs(3600), || detail.clone())?;
    Ok(detail)
}

fn reruns_are_identical(first: &Path, second: &Path) -> Check {
    if !first.join("report").exists() {
        experiment(first)?;
    }
    experiment(second)?;
    let files = [
        "run/best.ckpt",
        "run/last.ckpt",
        "run/train.log.jsonl",
        "report/metrics.json",
        "report/metrics.txt",
    ];
    for f in files {
        let a = fs::read(first.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(second.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs"))?;
    }
    Ok(format!("{} files byte-identical", files.len()))
}

// ---------------------------------------------------------------- 8

fn harness_reports(dir: &Path) -> Check {
    let grid = json!([32, 32, 8]);
    let cfg = json!({
        "phantom": {"shape": grid, "spacing_mm": [4.5, 4.5, 8.0]},
        "split": {"train": 0.5, "val": 0.25, "test": 0.25},
        "model": {"embed_dim": 8, "depths": [1, 1], "heads": [2, 2], "input_shape": grid, "dec_base": 4},
        "train": {"epochs": 1, "batch_size": 2},
    });
    let cfg_path = dir.join("harness.json");
    fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let c = s(&cfg_path);
    let data = dir.join("data");
    anapred(&[
        "generate",
        "--config",
        c,
        "--out",
        s(&data),
        "--n",
        "4",
        "--seed",
        "1",
    ])?;

    let mut details = Vec::new();
    for (cmd, stem, want) in [
        (
            "compare",
            "comparison",
            Some(vec!["PlanningCT", "CBCT01", "Swin", "CNN", "ViT"]),
        ),
        ("ablate", "ablation", None),
    ] {
        let out = dir.join(cmd);
        let v = anapred(&[
            cmd,
            "--config",
            c,
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--csv",
        ])?;
        let report: MetricsReport = serde_json::from_value(v.clone()).map_err(|e| e.to_string())?;
        let subjects: Vec<&str> = report
            .aggregate
            .iter()
            .map(|r| r.subject.as_str())
            .collect();
        match &want {
            Some(w) => ensure(&subjects == w, || format!("{cmd} rows {subjects:?}"))?,
            None => {
                let mut distinct = subjects.clone();
                distinct.sort();
                distinct.dedup();
                ensure(subjects.len() == 5 && distinct.len() == 5, || {
                    format!("{cmd} rows {subjects:?}")
                })?;
            }
        }
        for c in &report.cases {
            let rows: Vec<&str> = c.rows.iter().map(|r| r.subject.as_str()).collect();
            ensure(rows == subjects, || {
                format!("{cmd} case {} rows {rows:?}", c.case_id)
            })?;
        }
        let text =
            fs::read_to_string(out.join(format!("{stem}.json"))).map_err(|e| e.to_string())?;
        let parsed = MetricsReport::from_json(&text).map_err(|e| e.to_string())?;
        ensure(parsed == report, || {
            format!("{stem}.json differs from stdout")
        })?;
        ensure(parsed.to_json().map_err(|e| e.to_string())? == text, || {
            format!("{stem}.json does not re-serialize identically")
        })?;
        ensure(out.join(format!("{stem}.csv")).exists(), || {
            format!("{stem}.csv missing")
        })?;
        details.push(format!("{cmd}: {}", subjects.join(" / ")));
    }
    Ok(details.join("; "))
}

// ---------------------------------------------------------------- 9

fn optimizer_sanity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 10;
    let curv: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
    let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |x: &[f64]| {
        (0..n)
            .map(|i| 0.5 * curv[i] * (x[i] - target[i]).powi(2))
            .sum::<f64>()
    };
    let mut x = vec![vec![0.0f64; n]];
    let mut adam = Adam::<f64>::new(0.9, 0.999, 1e-8, [n]);
    let mut steps = None;
    for k in 1..=10_000 {
        let g: Vec<f64> = (0..n).map(|i| curv[i] * (x[0][i] - target[i])).collect();
        adam.update(&mut x, &[g], 1e-3);
        if f(&x[0]) <= 1e-6 {
            steps = Some(k);
            break;
        }
    }
    let steps = steps.ok_or_else(|| format!("gap {:.2e} after 10000 steps", f(&x[0])))?;
    let mut plateau = Plateau::new(1e-3, 0.5, 5, 1e-6, 1e-6);
    let reductions = (0..6).filter(|_| plateau.observe(0.5)).count();
    ensure(reductions == 1 && plateau.lr == 5e-4, || {
        format!("{reductions} reductions, lr {}", plateau.lr)
    })?;
    Ok(format!(
        "quadratic gap <= 1e-6 after {steps} steps; plateau: 1 reduction to {}",
        plateau.lr
    ))
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let work = tempfile::tempdir().expect("temp dir");
    let (first, second) = (
        work.path().join("experiment_a"),
        work.path().join("experiment_b"),
    );
    let harness = work.path().join("harness");
    for d in [&first, &second, &harness] {
        fs::create_dir_all(d).unwrap();
    }

    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Check + '_>)> = vec![
        (1, "gradient check", Box::new(gradient_check)),
        (2, "shape ladder", Box::new(shape_ladder)),
        (3, "spatial transform", Box::new(warp_checks)),
        (4, "metric oracles", Box::new(metric_oracles)),
        (5, "perfect-case loss", Box::new(perfect_case_loss)),
        (
            6,
            "prediction beats baseline",
            Box::new(|| prediction_beats_baseline(&first)),
        ),
        (
            7,
            "bit-identical reruns",
            Box::new(|| reruns_are_identical(&first, &second)),
        ),
        (8, "harness reports", Box::new(|| harness_reports(&harness))),
        (9, "optimizer and scheduler", Box::new(optimizer_sanity)),
    ];
    let mut failed = 0;
    for (k, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(k)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run())).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {k} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {k} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
