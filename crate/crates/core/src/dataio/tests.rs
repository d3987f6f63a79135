use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::spxr;
use super::*;
use crate::numerics::Rng;
use crate::error::FormatError;

fn noiseless(seed: u64) -> SceneConfig {
    let mut c = SceneConfig::desk(seed);
    c.noise_std = 0.0;
    c.signature_jitter = 0.0;
    c
}

#[test]
fn desk_config_is_valid() {
    let c = SceneConfig::desk(0);
    c.validate().unwrap();
    assert_eq!((c.size, c.bands(), c.classes), (32, 8, 4));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = SceneConfig::desk(0);
    c.classes = 1;
    assert!(generate(&c, None, 0).is_err());
    let mut c = SceneConfig::desk(0);
    c.signatures[1] = c.signatures[0].clone();
    assert!(matches!(c.validate(), Err(Error::Data(_))));
    let mut c = SceneConfig::desk(0);
    c.noise_std = 1.0;
    assert!(c.validate().is_err());
    let mut c = SceneConfig::desk(0);
    c.wavelengths.swap(0, 1);
    assert!(c.validate().is_err());
}

#[test]
fn noiseless_spectra_are_signature_times_light() {
    let c = noiseless(1);
    let s = generate(&c, None, 3).unwrap();
    let mut rng = Rng::derive(c.seed, 0x1000 + 3);
    let labels = voronoi_labels(c.size, c.blobs, c.classes, &mut rng);
    let light = illumination_field(c.size, c.illumination, &mut rng);
    assert_eq!(s.labels.as_ref().unwrap().labels(), labels.as_slice());
    for (p, &l) in labels.iter().enumerate() {
        let (y, x) = (p / c.size, p % c.size);
        for (b, &v) in s.image.pixel(y, x).iter().enumerate() {
            assert_eq!(v, (c.signatures[l as usize][b] * light[p]) as f32 as f64);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let c = SceneConfig::desk(2);
    assert_eq!(generate(&c, None, 5).unwrap(), generate(&c, None, 5).unwrap());
    assert_ne!(generate(&c, None, 5).unwrap(), generate(&c, None, 6).unwrap());
}

#[test]
fn nearest_signature_oracle_is_perfect_on_clean_scenes() {
    // Illumination scales spectra, so compare directions.
    let c = noiseless(3);
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let sigs: Vec<Vec<f64>> = c.signatures.iter().map(|s| unit(s)).collect();
    for i in 0..4 {
        let s = generate(&c, None, i).unwrap();
        let truth = s.labels.unwrap();
        for y in 0..c.size {
            for x in 0..c.size {
                let p = unit(s.image.pixel(y, x));
                let best = (0..c.classes)
                    .max_by(|&a, &b| {
                        let da: f64 = p.iter().zip(&sigs[a]).map(|(u, v)| u * v).sum();
                        let db: f64 = p.iter().zip(&sigs[b]).map(|(u, v)| u * v).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best as u16, truth.get(y, x));
            }
        }
    }
}

#[test]
fn shift_preserves_labels_and_zero_is_identity() {
    let c = SceneConfig::desk(4);
    let plain = generate(&c, None, 1).unwrap();
    for kind in [ShiftKind::Regional, ShiftKind::Seasonal] {
        let zero = DomainShift { kind, magnitude: 0.0, seed: 9 };
        assert_eq!(generate(&c, Some(&zero), 1).unwrap(), plain);
        let shift = DomainShift { kind, magnitude: 0.5, seed: 9 };
        let shifted = generate(&c, Some(&shift), 1).unwrap();
        assert_eq!(shifted.labels, plain.labels);
        assert_ne!(shifted.image, plain.image);
    }
}

#[test]
fn seasonal_gain_is_smooth() {
    let c = SceneConfig::desk(0);
    let wl = &c.wavelengths;
    let s = DomainShift { kind: ShiftKind::Seasonal, magnitude: 0.7, seed: 3 };
    let zero = DomainShift { magnitude: 0.0, ..s };
    // Central second differences stay bounded as the step shrinks (C¹ check
    // via derivative continuity).
    for l in (450..2150).step_by(37).map(|l| l as f64) {
        assert_eq!(zero.gain(wl, l), 1.0);
        let d = |h: f64| (s.gain(wl, l + h) - s.gain(wl, l - h)) / (2.0 * h);
        assert!((d(1e-2) - d(1e-3)).abs() < 1e-6);
        let left = (s.gain(wl, l) - s.gain(wl, l - 1e-4)) / 1e-4;
        let right = (s.gain(wl, l + 1e-4) - s.gain(wl, l)) / 1e-4;
        assert!((left - right).abs() < 1e-5);
    }
}

#[test]
fn split_arithmetic_and_partition() {
    let (a, b) = split(10, 0.8, 1).unwrap();
    assert_eq!((a.len(), b.len()), (8, 2));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    assert_eq!(split(10, 0.8, 1).unwrap(), (a, b));
    assert!(matches!(split(10, 1.0, 1), Err(Error::Data(_))));
    assert!(split(1, 0.5, 1).is_err());
}

#[test]
fn spxr_layout_size() {
    let s = generate(&SceneConfig::desk(5), None, 0).unwrap();
    let bytes = spxr::encode(&s.image, s.labels.as_ref()).unwrap();
    assert_eq!(bytes.len(), 4 + 2 + 12 + 32 + 32768 + 1 + 2048 + 4);
    assert_eq!(&bytes[..4], b"SPXR");
    let without = spxr::encode(&s.image, None).unwrap();
    assert_eq!(without.len(), 4 + 2 + 12 + 32 + 32768 + 1 + 4);
}

#[test]
fn spxr_round_trip_and_errors() {
    let s = generate(&SceneConfig::desk(6), None, 0).unwrap();
    let bytes = spxr::encode(&s.image, s.labels.as_ref()).unwrap();
    let r = spxr::decode(&bytes).unwrap();
    assert_eq!(r.image, s.image);
    assert_eq!(r.segmentation(4).unwrap(), s.labels);
    assert_eq!(spxr::encode(&r.image, r.segmentation(4).unwrap().as_ref()).unwrap(), bytes);

    let err = |b: &[u8]| match spxr::decode(b) {
        Err(Error::Format(f)) => f,
        other => panic!("{other:?}"),
    };
    let mut bad = bytes.clone();
    bad[100] ^= 0x40;
    assert!(matches!(err(&bad), FormatError::ChecksumMismatch { .. }));
    bad = bytes.clone();
    bad[1] = b'Q';
    assert_eq!(err(&bad), FormatError::BadMagic);
    bad = bytes.clone();
    bad[4] = 2;
    assert_eq!(err(&bad), FormatError::UnsupportedVersion(2));
    assert_eq!(err(&bytes[..bytes.len() - 1]), FormatError::Truncated);
    assert_eq!(err(&bytes[..3]), FormatError::Truncated);
    assert_eq!(err(&bytes[..200]), FormatError::Truncated);
}

#[test]
fn spxr_detects_every_single_byte_flip_in_a_small_file() {
    let img = SpectralImage::new(2, 2, vec![500.0, 600.0], vec![0.5, 0.25, 1.0, 2.0, 0.0, 3.5, 0.125, 9.0]).unwrap();
    let labels = SegmentationMap::new(2, 2, 3, vec![0, 1, 2, 1]).unwrap();
    let bytes = spxr::encode(&img, Some(&labels)).unwrap();
    for i in 0..bytes.len() {
        for bit in 0..8 {
            let mut bad = bytes.clone();
            bad[i] ^= 1 << bit;
            assert!(spxr::decode(&bad).is_err(), "byte {i} bit {bit}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spxr_round_trips_random_rasters(h in 1usize..6, d in 1usize..5, seed in any::<u64>(), with_labels in any::<bool>()) {
        let w = h;
        let mut rng = Rng::new(seed);
        let wl: Vec<f64> = (0..d).map(|i| 400.0 + 100.0 * i as f64).collect();
        let values: Vec<f64> = (0..h * w * d).map(|_| rng.range(0.0, 10.0) as f32 as f64).collect();
        let img = SpectralImage::new(h, w, wl, values).unwrap();
        let labels = with_labels.then(|| SegmentationMap::new(h, w, 7, (0..h * w).map(|_| rng.below(7) as u16).collect()).unwrap());
        let bytes = spxr::encode(&img, labels.as_ref()).unwrap();
        prop_assert_eq!(Some(bytes.len()), spxr::encoded_len(h, w, d, with_labels));
        let r = spxr::decode(&bytes).unwrap();
        prop_assert_eq!(&r.image, &img);
        prop_assert_eq!(r.segmentation(7).unwrap(), labels);
    }
}
