use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonotag::augment::{
    cutout, cutout_traced, derive_seed, mixup, sample_lambda, spec_augment, spec_augment_traced, AugmentConfig,
};
use sonotag::dsp::Spectrogram;
use sonotag::taxonomy::{LabelVector, Taxonomy};

fn random_spec(frames: usize, bands: usize, seed: u64) -> Spectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..frames * bands).map(|_| rng.random_range(-20.0f32..5.0)).collect();
    Spectrogram::new(v, frames, bands, 39.98, 1).unwrap()
}

fn masks_only() -> AugmentConfig {
    AugmentConfig {
        time_warp_w: 0,
        ..AugmentConfig::default()
    }
}

fn bits(s: &Spectrogram) -> Vec<u32> {
    s.values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_counts_and_no_warp_is_identity() {
    let s = random_spec(400, 64, 1);
    let cfg = AugmentConfig {
        n_freq_masks: 0,
        n_time_masks: 0,
        time_warp_w: 0,
        ..AugmentConfig::default()
    };
    assert_eq!(bits(&spec_augment(&s, &cfg, 9).unwrap()), bits(&s));
}

#[test]
fn freq_mask_fills_columns_with_the_mean_and_leaves_the_rest() {
    let s = random_spec(400, 64, 2);
    let cfg = AugmentConfig {
        n_freq_masks: 1,
        n_time_masks: 0,
        time_warp_w: 0,
        ..AugmentConfig::default()
    };
    // find a seed whose single mask is non-empty
    let (out, trace) = (0..100)
        .map(|seed| spec_augment_traced(&s, &cfg, seed).unwrap())
        .find(|(_, t)| t.freq_masks[0].len() >= 4)
        .unwrap();
    let band = &trace.freq_masks[0];
    assert_eq!(trace.fill.to_bits(), s.mean().to_bits());
    for t in 0..400 {
        for b in 0..64 {
            if band.contains(&b) {
                assert_eq!(out.get(t, b), s.mean());
            } else {
                assert_eq!(out.get(t, b).to_bits(), s.get(t, b).to_bits());
            }
        }
    }
}

#[test]
fn masking_a_constant_spectrogram_changes_nothing() {
    let s = Spectrogram::new(vec![-3.5; 400 * 64], 400, 64, 39.98, 1).unwrap();
    let out = spec_augment(&s, &AugmentConfig::default(), 4).unwrap();
    assert_eq!(bits(&out), bits(&s));
    let out = cutout(&s, &AugmentConfig::default(), 4).unwrap();
    assert_eq!(bits(&out), bits(&s));
}

#[test]
fn warp_needs_enough_frames() {
    let s = random_spec(20, 64, 3);
    assert!(spec_augment(&s, &AugmentConfig::default(), 0).is_err());
    let cfg = AugmentConfig {
        mixup_alpha: 0.0,
        ..AugmentConfig::default()
    };
    assert!(spec_augment(&random_spec(400, 64, 3), &cfg, 0).is_err());
}

#[test]
fn warp_keeps_end_frames() {
    let s = random_spec(400, 64, 5);
    let cfg = AugmentConfig {
        n_freq_masks: 0,
        n_time_masks: 0,
        ..AugmentConfig::default()
    };
    let (out, trace) = spec_augment_traced(&s, &cfg, 17).unwrap();
    assert!(trace.warp.is_some());
    assert_eq!(out.frame(0), s.frame(0));
    assert_eq!(out.frame(399), s.frame(399));
}

#[test]
fn cutout_zero_count_is_identity() {
    let s = random_spec(100, 64, 6);
    let cfg = AugmentConfig {
        cutout_count: 0,
        ..AugmentConfig::default()
    };
    assert_eq!(bits(&cutout(&s, &cfg, 1).unwrap()), bits(&s));
}

fn changed(a: &Spectrogram, b: &Spectrogram) -> usize {
    a.values().iter().zip(b.values()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

#[test]
fn one_four_by_four_cutout_changes_at_most_sixteen_cells() {
    let s = random_spec(100, 64, 7);
    let cfg = AugmentConfig {
        cutout_count: 1,
        cutout_h: 4,
        cutout_w: 4,
        ..AugmentConfig::default()
    };
    let mut saw_full = false;
    for seed in 0..200 {
        let (out, rects) = cutout_traced(&s, &cfg, seed).unwrap();
        let n = changed(&s, &out);
        assert_eq!(n, rects[0].area());
        assert!(n <= 16);
        saw_full |= n == 16;
    }
    assert!(saw_full);
}

#[test]
fn disjoint_cutouts_change_the_sum_of_their_areas() {
    let s = random_spec(100, 64, 8);
    let cfg = AugmentConfig {
        cutout_count: 2,
        cutout_h: 6,
        cutout_w: 10,
        ..AugmentConfig::default()
    };
    let (out, rects) = (0..100)
        .map(|seed| cutout_traced(&s, &cfg, seed).unwrap())
        .find(|(_, r)| !r[0].intersects(&r[1]))
        .unwrap();
    assert_eq!(changed(&s, &out), rects[0].area() + rects[1].area());
}

fn labelled(tax: &Taxonomy, positives: &[usize]) -> LabelVector {
    LabelVector::from_fine(tax, positives)
}

#[test]
fn mixup_arithmetic() {
    let tax = Taxonomy::bundled();
    let sa = random_spec(10, 64, 9);
    let sb = random_spec(10, 64, 10);
    let mut la = labelled(&tax, &[]);
    let mut lb = labelled(&tax, &[]);
    la.coarse[0] = 1.0;
    lb.coarse[1] = 1.0;

    let (s, l) = mixup((&sa, &la), (&sb, &lb), 1.0).unwrap();
    assert_eq!(bits(&s), bits(&sa));
    assert_eq!(l, la);

    let (_, l) = mixup((&sa, &la), (&sb, &lb), 0.5).unwrap();
    assert_eq!(&l.coarse[..3], &[0.5, 0.5, 0.0]);

    la.fine_mask = vec![1.0; 23];
    lb.fine_mask = vec![1.0; 23];
    la.fine_mask[2] = 0.0;
    lb.fine_mask[1] = 0.0;
    let (_, l) = mixup((&sa, &la), (&sb, &lb), 0.3).unwrap();
    assert_eq!(&l.fine_mask[..3], &[1.0, 0.0, 0.0]);

    let sc = random_spec(11, 64, 11);
    assert!(mixup((&sa, &la), (&sc, &lb), 0.5).is_err());
}

#[test]
fn beta_one_is_uniform() {
    let mut draws: Vec<f64> = (0..100_000).map(|i| sample_lambda(1.0, i).unwrap() as f64).collect();
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS = {ks}");
}

fn two_sample_ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn beta_is_symmetric() {
    for alpha in [0.4, 2.0] {
        let a: Vec<f64> = (0..100_000).map(|i| sample_lambda(alpha, i).unwrap() as f64).collect();
        let b: Vec<f64> = (100_000..200_000).map(|i| 1.0 - sample_lambda(alpha, i).unwrap() as f64).collect();
        let ks = two_sample_ks(a, b);
        assert!(ks < 0.01, "alpha {alpha}: KS = {ks}");
    }
}

#[test]
fn lambda_rejects_nonpositive_alpha() {
    assert!(sample_lambda(0.0, 1).is_err());
    assert!(sample_lambda(-1.0, 1).is_err());
    assert_eq!(sample_lambda(0.4, 5).unwrap(), sample_lambda(0.4, 5).unwrap());
}

#[test]
fn derived_seeds_separate_clips_and_epochs() {
    let a = derive_seed(7, "clip-1", 0);
    assert_eq!(a, derive_seed(7, "clip-1", 0));
    assert_ne!(a, derive_seed(7, "clip-1", 1));
    assert_ne!(a, derive_seed(7, "clip-2", 0));
    assert_ne!(a, derive_seed(8, "clip-1", 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lambda_in_unit_interval(alpha in 0.01f64..20.0, seed in any::<u64>()) {
        let l = sample_lambda(alpha, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn augmentations_preserve_shape(frames in 40usize..120, seed in any::<u64>()) {
        let s = random_spec(frames, 64, seed);
        prop_assert_eq!(spec_augment(&s, &AugmentConfig::default(), seed).unwrap().shape(), s.shape());
        prop_assert_eq!(cutout(&s, &AugmentConfig::default(), seed).unwrap().shape(), s.shape());
    }

    #[test]
    fn masks_touch_only_drawn_regions(seed in any::<u64>()) {
        let s = random_spec(120, 64, seed ^ 1);
        let (out, trace) = spec_augment_traced(&s, &masks_only(), seed).unwrap();
        for t in 0..120 {
            for b in 0..64 {
                let inside = trace.freq_masks.iter().any(|r| r.contains(&b))
                    || trace.time_masks.iter().any(|r| r.contains(&t));
                if inside {
                    prop_assert_eq!(out.get(t, b), trace.fill);
                } else {
                    prop_assert_eq!(out.get(t, b).to_bits(), s.get(t, b).to_bits());
                }
            }
        }
    }

    #[test]
    fn mixup_is_affine(lambda in 0.0f32..=1.0, seed in any::<u64>()) {
        let tax = Taxonomy::bundled();
        let sa = random_spec(8, 64, seed);
        let sb = random_spec(8, 64, seed.wrapping_add(1));
        let la = labelled(&tax, &[0, 5]);
        let lb = labelled(&tax, &[7]);
        let (x, _) = mixup((&sa, &la), (&sb, &lb), lambda).unwrap();
        let (y, _) = mixup((&sb, &lb), (&sa, &la), lambda).unwrap();
        for i in 0..sa.values().len() {
            let sum = x.values()[i] + y.values()[i];
            let want = sa.values()[i] + sb.values()[i];
            prop_assert!((sum - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn same_triple_same_output(seed in any::<u64>(), epoch in 0u64..100) {
        let s = random_spec(120, 64, 3);
        let k = derive_seed(seed, "clip-x", epoch);
        let a = spec_augment(&s, &masks_only(), k).unwrap();
        let b = spec_augment(&s, &masks_only(), k).unwrap();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
