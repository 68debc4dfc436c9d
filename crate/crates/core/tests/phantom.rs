use anapred::loss::diffusion_loss;
use anapred::metrics::{body_mask, count, dice};
use anapred::phantom::{generate_case, generate_corpus, PhantomRanges, PhantomSpec};
use anapred::volume::clip_minmax_normalize;
use anapred::warp::{warp_volume, WarpMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        ..PhantomSpec::default()
    }
}

#[test]
fn half_volume_shrink_halves_the_primary() {
    for seed in 0..4 {
        let c = generate_case(
            &PhantomSpec {
                shrink_factor: 0.5,
                ..spec(seed)
            },
            "c",
        )
        .unwrap();
        let t = c.targets.as_ref().unwrap();
        let ratio = count(&t.gtvp21) as f64 / count(&c.gtvp01) as f64;
        assert!((ratio - 0.5).abs() <= 0.1, "seed {seed}: ratio {ratio}");
        assert!(dice(&c.gtvp01, &t.gtvp21).unwrap() < 1.0);
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let a = generate_case(&spec(7), "c").unwrap();
    let b = generate_case(&spec(7), "c").unwrap();
    assert_eq!(a, b);
    let other = generate_case(&spec(8), "c").unwrap();
    assert_ne!(a.cbct01.data, other.cbct01.data);
}

#[test]
fn stored_targets_match_warping_the_initial_masks() {
    let c = generate_case(&spec(3), "c").unwrap();
    let dvf = c.gt_dvf.as_ref().unwrap();
    let t = c.targets.as_ref().unwrap();
    let again = warp_volume(&c.gtvp01, dvf, WarpMode::Nearest).unwrap();
    assert!(dice(&again, &t.gtvp21).unwrap() >= 0.98);
}

#[test]
fn ground_truth_field_is_smoother_than_noise() {
    let c = generate_case(&spec(5), "c").unwrap();
    let dvf = c.gt_dvf.unwrap();
    let d = dvf.dims;
    let n = d[0] * d[1] * d[2];
    let disp: Vec<f64> = dvf.disp.iter().map(|&v| v as f64).collect();
    let smooth = diffusion_loss(&disp, d).unwrap();
    assert!(smooth.is_finite());
    let amp = disp[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut noisy = disp.clone();
    for v in noisy[..n].iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = amp * g;
    }
    assert!(smooth < diffusion_loss(&noisy, d).unwrap());
}

#[test]
fn smaller_shrink_factor_means_lower_overlap() {
    let mean_dice = |s: f64| {
        (0..10)
            .map(|seed| {
                let c = generate_case(
                    &PhantomSpec {
                        shrink_factor: s,
                        ..spec(seed)
                    },
                    "c",
                )
                .unwrap();
                dice(&c.gtvp01, &c.targets.unwrap().gtvp21).unwrap()
            })
            .sum::<f64>()
            / 10.0
    };
    let (a, b, c) = (mean_dice(0.5), mean_dice(0.7), mean_dice(0.9));
    assert!(a < b && b < c, "{a} {b} {c}");
}

#[test]
fn extracted_body_matches_the_true_outline() {
    for seed in 0..3 {
        let s = spec(seed);
        let c = generate_case(&s, "c").unwrap();
        let ct = clip_minmax_normalize(&c.ct).unwrap();
        let body = body_mask(&ct).unwrap();
        let truth = s.body_mask().unwrap();
        let d = dice(&body, &truth).unwrap();
        assert!(d >= 0.97, "seed {seed}: dice {d}");
    }
}

#[test]
fn corpus_cases_are_valid_and_distinct() {
    let cases = generate_corpus(6, &PhantomRanges::default(), 11).unwrap();
    assert_eq!(cases.len(), 6);
    for c in &cases {
        c.validate().unwrap();
    }
    assert_ne!(cases[0].cbct01.data, cases[1].cbct01.data);

    let fixed = PhantomRanges {
        body_semiaxes_mm: [[50.0, 50.0], [42.0, 42.0], [60.0, 60.0]],
        gtvp_radius_mm: [9.0, 9.0],
        gtvn_radius_mm: [6.0, 6.0],
        shrink_factor: [0.6, 0.6],
        body_shrink_mm: [3.0, 3.0],
        noise_sigma_image: [12.0, 12.0],
        dose_peak: [70.0, 70.0],
        ..PhantomRanges::default()
    };
    let specs = fixed.sample_specs(3, 2).unwrap();
    assert!(specs.windows(2).all(|w| {
        let (mut a, mut b) = (w[0].clone(), w[1].clone());
        assert_ne!(a.seed, b.seed);
        a.seed = 0;
        b.seed = 0;
        a == b
    }));
}
