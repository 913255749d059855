mod common;

use std::path::Path;

use ctl_tensor::Tensor;
use ctlformer::data::augment::augment_with;
use ctlformer::data::container::{pgm_bytes, slice_from_bytes, slice_to_bytes};
use ctlformer::data::corpus::{generate_corpus, patient_id};
use ctlformer::data::{
    augment, generate_phantom, inject_noise, load_slice, read_corpus, save_slice, split_patients,
    streak_segments, write_corpus, CorpusSpec, NoiseSpec, PhantomSpec, SliceImage, SliceKind,
    Transform,
};
use ctlformer::model::{save_checkpoint, Checkpoint};
use ctlformer::{Error, ModelConfig};
use proptest::prelude::*;
use rand::Rng;

fn constant_slice(n: usize, v: f32) -> SliceImage {
    SliceImage::new(Tensor::full(&[1, n, n], v), "T000-syn", 0, SliceKind::Clean).unwrap()
}

fn random_slice(seed: u64, h: usize, w: usize, kind: SliceKind) -> SliceImage {
    let mut r = common::rng(seed);
    let px = Tensor::from_fn(&[1, h, w], |_| r.random_range(0.0..=255.0f32));
    SliceImage::new(px, patient_id(seed as usize % 12), seed as u32, kind).unwrap()
}

fn quiet(sigma: f64, streaks: usize, seed: u64) -> NoiseSpec {
    NoiseSpec {
        gaussian_sigma: sigma,
        streak_count: streaks,
        seed,
        ..NoiseSpec::default()
    }
}

#[test]
fn phantom_is_reproducible() {
    let spec = PhantomSpec {
        seed: 5,
        ..PhantomSpec::default()
    };
    let a = generate_phantom(&spec).unwrap();
    assert_eq!(a, generate_phantom(&spec).unwrap());
    assert_eq!(a.kind, SliceKind::Clean);
    assert_ne!(
        a,
        generate_phantom(&PhantomSpec { seed: 6, ..spec }).unwrap()
    );
}

#[test]
fn phantom_without_ellipses_is_background() {
    let spec = PhantomSpec {
        ellipses: (0, 0),
        background: 37.0,
        ..PhantomSpec::default()
    };
    let img = generate_phantom(&spec).unwrap();
    assert!(img.pixels().data().iter().all(|&v| v == 37.0));
}

#[test]
fn phantoms_stay_in_range_for_many_specs() {
    let mut r = common::rng(40);
    for i in 0..1000 {
        let lo = r.random_range(0.0..255.0);
        let spec = PhantomSpec {
            size: r.random_range(8..40),
            ellipses: (r.random_range(0..4), r.random_range(4..12)),
            intensity: (lo, r.random_range(lo..=255.0)),
            background: r.random_range(0.0..=255.0),
            seed: i,
        };
        let img = generate_phantom(&spec).unwrap();
        assert!(
            img.pixels()
                .data()
                .iter()
                .all(|&v| (0.0..=255.0).contains(&v)),
            "{spec:?}"
        );
    }
}

#[test]
fn noiseless_degradation_is_identity() {
    let clean = generate_phantom(&PhantomSpec::default()).unwrap();
    let out = inject_noise(&clean, &quiet(0.0, 0, 3)).unwrap();
    assert_eq!(out.pixels(), clean.pixels());
    assert_eq!(out.kind, SliceKind::Noisy);
    assert!(inject_noise(&out, &quiet(0.0, 0, 3)).is_err());
}

#[test]
fn gaussian_noise_has_requested_moments() {
    let clean = constant_slice(256, 128.0);
    for seed in 0..20 {
        let noisy = inject_noise(&clean, &quiet(10.0, 0, seed)).unwrap();
        let mut diffs = Vec::new();
        for y in 8..248 {
            for x in 8..248 {
                diffs.push(noisy.pixels().at(&[0, y, x]) as f64 - 128.0);
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.5, "seed {seed}: mean {mean}");
        assert!((std - 10.0).abs() < 0.5, "seed {seed}: std {std}");
    }
}

#[test]
fn streaks_are_the_difference_from_the_streak_free_render() {
    let clean = constant_slice(64, 128.0);
    let with = inject_noise(&clean, &quiet(10.0, 3, 8)).unwrap();
    let without = inject_noise(&clean, &quiet(10.0, 0, 8)).unwrap();
    let segs = streak_segments(&quiet(10.0, 3, 8), 64, 64);
    assert_eq!(segs.len(), 3);
    let mut expect = vec![0.0f64; 64 * 64];
    for s in &segs {
        assert_eq!(s.amplitude.abs(), 25.0);
        let px = s.pixels(64, 64);
        assert!(!px.is_empty());
        for i in px {
            expect[i] += s.amplitude;
        }
    }
    for (i, e) in expect.iter().enumerate() {
        let d = with.pixels().data()[i] as f64 - without.pixels().data()[i] as f64;
        assert!((d - e).abs() < 1e-4, "pixel {i}: {d} vs {e}");
    }
}

fn asymmetric_pair(seed: u64) -> (SliceImage, SliceImage) {
    let c = random_slice(seed, 12, 12, SliceKind::Clean);
    let mut n = random_slice(seed + 1, 12, 12, SliceKind::Noisy);
    n.patient_id = c.patient_id.clone();
    (c, n)
}

#[test]
fn identity_transform_leaves_pair_unchanged() {
    let (c, n) = asymmetric_pair(1);
    let (c2, n2) = augment_with((&c, &n), Transform::default()).unwrap();
    assert_eq!((c2, n2), (c, n));
}

#[test]
fn transforms_permute_pixels() {
    let (c, _) = asymmetric_pair(2);
    let sorted = |s: &Tensor| {
        let mut v: Vec<u32> = s.data().iter().map(|x| x.to_bits()).collect();
        v.sort_unstable();
        v
    };
    let base = sorted(c.pixels());
    let mut seen = Vec::new();
    for tf in Transform::ALL {
        let out = tf.apply(c.pixels()).unwrap();
        assert_eq!(sorted(&out), base);
        assert!(!seen.contains(&out), "{tf:?} duplicates another transform");
        seen.push(out);
    }
}

#[test]
fn augment_commutes_with_differencing() {
    for seed in 0..16 {
        let (c, n) = asymmetric_pair(10 + seed);
        let (c2, n2) = augment((&c, &n), seed).unwrap();
        let tf = Transform::ALL
            .into_iter()
            .find(|tf| tf.apply(c.pixels()).unwrap() == *c2.pixels())
            .unwrap();
        let diff =
            |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape(), |i| a.data()[i] - b.data()[i]);
        let after = diff(n2.pixels(), c2.pixels());
        let before = tf.apply(&diff(n.pixels(), c.pixels())).unwrap();
        assert_eq!(after, before);
    }
    let (c, _) = asymmetric_pair(3);
    let other = random_slice(4, 12, 10, SliceKind::Noisy);
    assert!(augment((&c, &other), 0).is_err());
}

fn slices(patients: usize, per: usize) -> Vec<SliceImage> {
    let mut out = Vec::new();
    for p in 0..patients {
        for s in 0..per {
            let mut img = constant_slice(8, (p * 10 + s) as f32);
            img.patient_id = patient_id(p);
            img.slice_index = s as u32;
            out.push(img);
        }
    }
    out
}

#[test]
fn nine_one_patient_split() {
    let split = split_patients(slices(10, 5), "L506-syn").unwrap();
    assert_eq!((split.train.len(), split.test.len()), (45, 5));
    assert!(split.test.iter().all(|s| s.patient_id == "L506-syn"));
    assert!(split.train.iter().all(|s| s.patient_id != "L506-syn"));
    assert!(split.warnings.is_empty());
}

#[test]
fn single_patient_split_warns() {
    let split = split_patients(slices(1, 3), "L067-syn").unwrap();
    assert!(split.train.is_empty());
    assert_eq!(split.test.len(), 3);
    assert_eq!(split.warnings.len(), 1);
}

#[test]
fn unknown_holdout_is_a_contract_error() {
    assert!(matches!(
        split_patients(slices(3, 2), "L506-syn"),
        Err(Error::Contract(_))
    ));
}

#[test]
fn patient_ids_follow_the_synthetic_scheme() {
    assert_eq!(patient_id(0), "L067-syn");
    assert_eq!(patient_id(9), "L506-syn");
    assert_eq!(patient_id(12), "P012-syn");
}

#[test]
fn slice_container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..8 {
        let s = random_slice(seed, 9 + seed as usize, 17, SliceKind::Denoised);
        let path = dir.path().join(format!("{seed}.ctsl"));
        save_slice(&s, &path).unwrap();
        let back = load_slice(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(slice_to_bytes(&back), std::fs::read(&path).unwrap());
    }
}

#[test]
fn pgm_export_scales_by_257() {
    let bytes = pgm_bytes(&constant_slice(4, 128.0));
    let header = b"P5\n4 4\n65535\n";
    assert_eq!(&bytes[..header.len()], header);
    let samples = &bytes[header.len()..];
    assert_eq!(samples.len(), 32);
    for px in samples.chunks(2) {
        assert_eq!(u16::from_be_bytes([px[0], px[1]]), 32896);
    }
    let top = pgm_bytes(&constant_slice(1, 255.0));
    assert_eq!(&top[top.len() - 2..], &65535u16.to_be_bytes());
}

#[test]
fn slice_loader_rejects_checkpoints_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ctlf");
    let cfg = ModelConfig::tiny();
    let params = ctlformer::model::init(&cfg, 0).unwrap();
    save_checkpoint(
        &Checkpoint {
            config: cfg,
            params,
            step: 0,
            seed: 0,
            moments: None,
        },
        &ck,
    )
    .unwrap();
    assert!(matches!(load_slice(&ck), Err(Error::Integrity { .. })));
    let bytes = slice_to_bytes(&random_slice(1, 8, 8, SliceKind::Clean));
    for cut in [2, 13, bytes.len() - 1] {
        let r = slice_from_bytes(&bytes[..cut], Path::new("t.ctsl"));
        assert!(matches!(r, Err(Error::Integrity { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(
        slice_from_bytes(&bad, Path::new("t.ctsl")),
        Err(Error::Version { .. })
    ));
}

#[test]
fn corpus_round_trips_through_disk() {
    let spec = CorpusSpec {
        patients: 3,
        slices: 2,
        phantom: PhantomSpec {
            size: 24,
            ..PhantomSpec::default()
        },
        ..CorpusSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let written = write_corpus(dir.path(), &spec).unwrap();
    assert_eq!(written, generate_corpus(&spec).unwrap());
    assert_eq!(written.len(), 6);
    assert!(dir.path().join("L096-syn/001.ctsl").exists());
    assert!(dir.path().join("L096-syn/001.noisy.ctsl").exists());
    let mut back = read_corpus(dir.path()).unwrap();
    back.sort_by_key(|p| (p.clean.patient_id.clone(), p.clean.slice_index));
    let mut sorted = written.clone();
    sorted.sort_by_key(|p| (p.clean.patient_id.clone(), p.clean.slice_index));
    assert_eq!(back, sorted);
    let empty = tempfile::tempdir().unwrap();
    assert!(read_corpus(empty.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_partition(patients in 1usize..8, per in 1usize..5, hold in 0usize..8) {
        prop_assume!(hold < patients);
        let items = slices(patients, per);
        let split = split_patients(items.clone(), &patient_id(hold)).unwrap();
        prop_assert_eq!(split.train.len() + split.test.len(), items.len());
        let mut joined: Vec<_> = split.train.iter().chain(&split.test).map(|s| s.label()).collect();
        let mut orig: Vec<_> = items.iter().map(|s| s.label()).collect();
        joined.sort();
        orig.sort();
        prop_assert_eq!(joined, orig);
    }

    #[test]
    fn degradation_is_a_pure_function_of_seed(seed in any::<u64>(), sigma in 0.0f64..30.0, streaks in 0usize..6) {
        let clean = generate_phantom(&PhantomSpec { size: 32, seed, ..PhantomSpec::default() }).unwrap();
        let spec = NoiseSpec { gaussian_sigma: sigma, streak_count: streaks, seed, ..NoiseSpec::default() };
        let a = inject_noise(&clean, &spec).unwrap();
        prop_assert_eq!(&a, &inject_noise(&clean, &spec).unwrap());
        prop_assert!(a.pixels().data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }
}
