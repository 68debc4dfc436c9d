//! Evaluation measures against brute-force implementations written
//! independently of the library.

use anapred::loss::{diffusion_loss, ssim_loss};
use anapred::metrics::{asd, dice, mse, ssim_eval};
use anapred::volume::{voxel_count, Dims, Volume, VolumeKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 200;

fn random_dims(rng: &mut ChaCha8Rng, lo: usize) -> Dims {
    [0, 1, 2].map(|_| rng.random_range(lo..=12))
}

fn random_mask(rng: &mut ChaCha8Rng, d: Dims) -> Vec<f32> {
    let p = rng.random_range(0.05..0.6);
    let mut m: Vec<f32> = (0..voxel_count(d))
        .map(|_| (rng.random::<f64>() < p) as u8 as f32)
        .collect();
    if m.iter().all(|&v| v == 0.0) {
        let i = rng.random_range(0..m.len());
        m[i] = 1.0;
    }
    m
}

fn mask(d: Dims, data: Vec<f32>) -> Volume {
    Volume::new(data, d, [1.0; 3], [0.0; 3], VolumeKind::Mask).unwrap()
}

fn image(d: Dims, data: Vec<f32>) -> Volume {
    Volume::new(data, d, [1.0; 3], [0.0; 3], VolumeKind::Image).unwrap()
}

fn idx(d: Dims, x: usize, y: usize, z: usize) -> usize {
    x + d[0] * (y + d[1] * z)
}

fn brute_dice(a: &[f32], b: &[f32]) -> f64 {
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&p, &q) in a.iter().zip(b) {
        na += (p == 1.0) as u64;
        nb += (q == 1.0) as u64;
        both += (p == 1.0 && q == 1.0) as u64;
    }
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * both as f64 / (na + nb) as f64
}

fn brute_surface(m: &[f32], d: Dims) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if m[idx(d, x, y, z)] != 1.0 {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let mut exposed = false;
                for axis in 0..3 {
                    for step in [-1i64, 1] {
                        let mut q = p;
                        q[axis] += step;
                        let outside = q[axis] < 0 || q[axis] >= d[axis] as i64;
                        if outside || m[idx(d, q[0] as usize, q[1] as usize, q[2] as usize)] != 1.0
                        {
                            exposed = true;
                        }
                    }
                }
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_asd(a: &[f32], b: &[f32], d: Dims, s: [f64; 3]) -> f64 {
    let sa = brute_surface(a, d);
    let sb = brute_surface(b, d);
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * s[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let one_way = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    (one_way(&sa, &sb) + one_way(&sb, &sa)) / (sa.len() + sb.len()) as f64
}

/// Local SSIM from its textbook definition: at every voxel, a Gaussian
/// window truncated to the volume and renormalized, with variances taken
/// as weighted squared deviations from the local means.
fn brute_ssim(x: &[f64], y: &[f64], d: Dims) -> f64 {
    let sigma = 1.5f64;
    let g = |t: i64| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp();
    let c1 = (0.01f64 * 2.0).powi(2);
    let c2 = (0.03f64 * 2.0).powi(2);
    let mut total = 0.0;
    for z in 0..d[2] as i64 {
        for y0 in 0..d[1] as i64 {
            for x0 in 0..d[0] as i64 {
                let mut taps = Vec::new();
                for dz in -3..=3i64 {
                    for dy in -3..=3i64 {
                        for dx in -3..=3i64 {
                            let q = [x0 + dx, y0 + dy, z + dz];
                            if (0..3).any(|k| q[k] < 0 || q[k] >= d[k] as i64) {
                                continue;
                            }
                            let w = g(dx) * g(dy) * g(dz);
                            taps.push((idx(d, q[0] as usize, q[1] as usize, q[2] as usize), w));
                        }
                    }
                }
                let wsum: f64 = taps.iter().map(|t| t.1).sum();
                let mean = |v: &[f64]| taps.iter().map(|&(i, w)| w * v[i]).sum::<f64>() / wsum;
                let (mx, my) = (mean(x), mean(y));
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for &(i, w) in &taps {
                    sxx += w * (x[i] - mx) * (x[i] - mx);
                    syy += w * (y[i] - my) * (y[i] - my);
                    sxy += w * (x[i] - mx) * (y[i] - my);
                }
                let (sxx, syy, sxy) = (sxx / wsum, syy / wsum, sxy / wsum);
                total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sxx + syy + c2));
            }
        }
    }
    total / voxel_count(d) as f64
}

#[test]
fn dice_matches_voxel_count_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let d = random_dims(&mut rng, 1);
        let (a, b) = (random_mask(&mut rng, d), random_mask(&mut rng, d));
        let got = dice(&mask(d, a.clone()), &mask(d, b.clone())).unwrap();
        assert_eq!(got, brute_dice(&a, &b), "{d:?}");
        assert_eq!(got, dice(&mask(d, b.clone()), &mask(d, a.clone())).unwrap());
        assert_eq!(dice(&mask(d, a.clone()), &mask(d, a)).unwrap(), 1.0);
    }
}

#[test]
fn asd_matches_all_pairs_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..CASES {
        let d = random_dims(&mut rng, 1);
        let s = [0, 1, 2].map(|_| rng.random_range(0.5..3.0));
        let (a, b) = (random_mask(&mut rng, d), random_mask(&mut rng, d));
        let (va, vb) = (mask(d, a.clone()), mask(d, b.clone()));
        let got = asd(&va, &vb, s).unwrap();
        let want = brute_asd(&a, &b, d, s);
        assert!((got - want).abs() <= 1e-6, "{d:?} {s:?}: {got} vs {want}");
        assert_eq!(got, asd(&vb, &va, s).unwrap());
        assert_eq!(asd(&va, &va, s).unwrap(), 0.0);
    }
}

#[test]
fn ssim_matches_direct_windowed_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..CASES {
        let d = random_dims(&mut rng, 1);
        let n = voxel_count(d);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Correlated partner so the structure term is exercised.
        let y: Vec<f32> = x
            .iter()
            .map(|&v| (0.7 * v + rng.random_range(-0.3..0.3)).clamp(-1.0, 1.0))
            .collect();
        let got = ssim_eval(&image(d, x.clone()), &image(d, y.clone())).unwrap();
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let want = brute_ssim(&xf, &yf, d);
        assert!((got - want).abs() <= 1e-5, "{d:?}: {got} vs {want}");
        let loss = ssim_loss(&xf, &yf, d).unwrap();
        assert!((got + loss - 1.0).abs() <= 1e-12);
        let swapped = ssim_loss(&yf, &xf, d).unwrap();
        assert!((loss - swapped).abs() <= 1e-9);
    }
}

#[test]
fn mse_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..CASES {
        let d = random_dims(&mut rng, 1);
        let n = voxel_count(d);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = 0.0f64;
        for i in 0..n {
            s += (x[i] as f64 - y[i] as f64).powi(2);
        }
        let want = s / n as f64;
        let got = mse(&image(d, x), &image(d, y)).unwrap();
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn mse_and_ssim_examples() {
    let d = [5, 4, 3];
    let a = Volume::filled(d, [1.0; 3], VolumeKind::Image, 0.0);
    let b = Volume::filled(d, [1.0; 3], VolumeKind::Image, 0.1);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-9);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert!((ssim_eval(&b, &b).unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn asd_single_voxels_at_two_millimetres() {
    let d = [8, 3, 3];
    let mut a = vec![0.0; voxel_count(d)];
    let mut b = a.clone();
    a[idx(d, 1, 1, 1)] = 1.0;
    b[idx(d, 4, 1, 1)] = 1.0;
    let got = asd(&mask(d, a), &mask(d, b), [2.0; 3]).unwrap();
    assert!((got - 6.0).abs() < 1e-12);
}

#[test]
fn diffusion_of_unit_ramp_and_constants() {
    for d in [[6, 5, 4], [12, 12, 12], [3, 7, 2]] {
        let n = voxel_count(d);
        let mut disp = vec![0.0f64; 3 * n];
        for i in 0..n {
            disp[i] = (i % d[0]) as f64;
        }
        let got = diffusion_loss(&disp, d).unwrap();
        assert!((got - 1.0 / 9.0).abs() <= 1e-9, "{d:?}: {got}");
        let constant = vec![2.75f64; 3 * n];
        assert_eq!(diffusion_loss(&constant, d).unwrap(), 0.0);
    }
}

fn field_strategy() -> impl Strategy<Value = (Dims, Vec<f64>, f64)> {
    (1usize..7, 1usize..7, 1usize..5, -3.0f64..3.0).prop_flat_map(|(x, y, z, k)| {
        let n = 3 * x * y * z;
        (
            Just([x, y, z]),
            prop::collection::vec(-2.0f64..2.0, n),
            Just(k),
        )
    })
}

proptest! {
    #[test]
    fn diffusion_scales_quadratically((d, disp, k) in field_strategy()) {
        let base = diffusion_loss(&disp, d).unwrap();
        let scaled: Vec<f64> = disp.iter().map(|v| v * k).collect();
        let got = diffusion_loss(&scaled, d).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((got - k * k * base).abs() <= 1e-9 * (1.0 + base * k * k));
    }

    #[test]
    fn metric_ranges(seed in 0u64..1_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dims(&mut rng, 2);
        let (a, b) = (random_mask(&mut rng, d), random_mask(&mut rng, d));
        let dc = dice(&mask(d, a.clone()), &mask(d, b.clone())).unwrap();
        prop_assert!((0.0..=1.0).contains(&dc));
        prop_assert!(asd(&mask(d, a.clone()), &mask(d, b.clone()), [1.0; 3]).unwrap() >= 0.0);
        let s = ssim_eval(&image(d, a.clone()), &image(d, b.clone())).unwrap();
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&s));
        prop_assert!(mse(&image(d, a), &image(d, b)).unwrap() >= 0.0);
    }
}
