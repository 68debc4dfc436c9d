use anapred::volume::{
    binarize, center_crop_pad, clip_minmax_normalize, read_volume, resample, write_volume,
    zscore_normalize, Dims, Volume, VolumeKind,
};
use proptest::prelude::*;

fn volume_strategy(kind: VolumeKind, lo: f32, hi: f32) -> impl Strategy<Value = Volume> {
    (
        1usize..9,
        1usize..9,
        1usize..6,
        0.5f64..3.0,
        0.5f64..3.0,
        0.5f64..3.0,
    )
        .prop_flat_map(move |(x, y, z, sx, sy, sz)| {
            prop::collection::vec(lo..hi, x * y * z).prop_map(move |data| {
                let data = if kind == VolumeKind::Mask {
                    data.into_iter()
                        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    data
                };
                Volume::new(data, [x, y, z], [sx, sy, sz], [1.5, -2.0, 0.25], kind).unwrap()
            })
        })
}

fn spacing_strategy() -> impl Strategy<Value = [f64; 3]> {
    [0.7f64..4.0, 0.7f64..4.0, 0.7f64..4.0]
}

fn range(v: &Volume) -> (f32, f32) {
    v.data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_read_is_identity(v in volume_strategy(VolumeKind::Image, -1500.0, 1500.0)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(back.shape, v.shape);
        prop_assert_eq!(back.spacing_mm, v.spacing_mm);
        prop_assert_eq!(back.origin_mm, v.origin_mm);
        prop_assert_eq!(back.kind, v.kind);
        let bits = |x: &Volume| x.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn resample_at_same_spacing_is_identity(v in volume_strategy(VolumeKind::Dose, 0.0, 70.0)) {
        prop_assert_eq!(resample(&v, v.spacing_mm).unwrap(), v);
    }

    #[test]
    fn resample_stays_within_input_range(
        v in volume_strategy(VolumeKind::Image, -1000.0, 1000.0),
        s in spacing_strategy(),
    ) {
        let (lo, hi) = range(&v);
        let out = resample(&v, s).unwrap();
        prop_assert_eq!(out.spacing_mm, s);
        prop_assert!(out.data.iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn resampled_masks_stay_binary(v in volume_strategy(VolumeKind::Mask, 0.0, 1.0), s in spacing_strategy()) {
        let out = resample(&v, s).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert!(out.data.iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn clip_normalize_is_bounded_and_monotone(v in volume_strategy(VolumeKind::Image, -3000.0, 3000.0)) {
        let out = clip_minmax_normalize(&v).unwrap();
        prop_assert!(out.data.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        for i in 0..v.data.len() {
            for j in 0..v.data.len() {
                if v.data[i] <= v.data[j] {
                    prop_assert!(out.data[i] <= out.data[j]);
                }
            }
        }
    }

    #[test]
    fn zscore_has_zero_mean_unit_std(v in volume_strategy(VolumeKind::Dose, 0.0, 70.0)) {
        let n = v.data.len() as f64;
        let mean_in = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let std_in = (v.data.iter().map(|&x| (x as f64 - mean_in).powi(2)).sum::<f64>() / n).sqrt();
        prop_assume!(std_in >= 1e-3);
        let out = zscore_normalize(&v).unwrap();
        let mean = out.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (out.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-5, "mean {}", mean);
        prop_assert!((std - 1.0).abs() <= 1e-4, "std {}", std);
    }

    #[test]
    fn binarize_is_idempotent(v in volume_strategy(VolumeKind::Dose, 0.0, 1.0), t in 0.05f32..0.95) {
        let once = binarize(&v, t);
        prop_assert!(once.validate().is_ok());
        prop_assert_eq!(binarize(&once, 0.5), once.clone());
        prop_assert_eq!(binarize(&once, t.max(0.01)), once);
    }

    #[test]
    fn crop_pad_round_trip_recovers_the_centre(
        v in volume_strategy(VolumeKind::Image, -1000.0, 1000.0),
        grow in [0usize..4, 0usize..4, 0usize..4],
    ) {
        let big: Dims = [0, 1, 2].map(|a| v.shape[a] + grow[a]);
        let padded = center_crop_pad(&v, big).unwrap();
        prop_assert_eq!(padded.shape, big);
        let back = center_crop_pad(&padded, v.shape).unwrap();
        prop_assert_eq!(back.data, v.data);
        for a in 0..3 {
            prop_assert!((back.origin_mm[a] - v.origin_mm[a]).abs() <= 1e-9);
        }
    }
}

#[test]
fn degenerate_dose_becomes_zeros() {
    let v = Volume::filled([4, 4, 2], [2.0; 3], VolumeKind::Dose, 35.0);
    assert!(zscore_normalize(&v).unwrap().data.iter().all(|&x| x == 0.0));
}

#[test]
fn normalizers_check_the_kind() {
    let v = Volume::filled([2, 2, 2], [2.0; 3], VolumeKind::Dose, 1.0);
    assert!(clip_minmax_normalize(&v).is_err());
    let v = Volume::filled([2, 2, 2], [2.0; 3], VolumeKind::Image, 1.0);
    assert!(zscore_normalize(&v).is_err());
}
