use proptest::prelude::*;
use thermvis_core::quality::*;
use thermvis_core::rng::SeededRng;
use thermvis_core::Image;

/// Rectangles over gray, optionally with noise; sizes 16..=96.
fn scene(seed: u64) -> Luminance {
    let mut rng = SeededRng::new(seed);
    let n = 16 + rng.below(81);
    let rects: Vec<[f64; 5]> = (0..8)
        .map(|_| {
            [
                rng.below(n) as f64,
                rng.below(n) as f64,
                1.0 + rng.below(n / 2) as f64,
                1.0 + rng.below(n / 2) as f64,
                rng.uniform(0.0, 1.0),
            ]
        })
        .collect();
    let noise: Vec<f64> = (0..n * n).map(|_| rng.uniform(0.0, 1.0)).collect();
    let mix = rng.uniform(0.0, 1.0);
    Luminance::from_fn(n, n, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = 0.5;
        for r in &rects {
            if yf >= r[0] && yf < r[0] + r[2] && xf >= r[1] && xf < r[1] + r[3] {
                v = r[4];
            }
        }
        (1.0 - mix) * v + mix * noise[y * n + x]
    })
    .unwrap()
}

/// Four octaves of progressively smoothed uniform noise, stretched to [0,1].
fn natural(seed: u64) -> Luminance {
    let mut rng = SeededRng::new(seed);
    let n = 16 + rng.below(81);
    let mut acc = vec![0.0; n * n];
    for octave in 0..4 {
        let noise = Luminance::from_fn(n, n, |_, _| rng.uniform(0.0, 1.0)).unwrap();
        let smooth = if octave == 0 {
            noise
        } else {
            noise.gaussian_blurred((1 << octave) as f64)
        };
        for (a, v) in acc.iter_mut().zip(smooth.values()) {
            *a += v;
        }
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Luminance::from_fn(n, n, |y, x| (acc[y * n + x] - lo) / (hi - lo)).unwrap()
}

#[test]
fn gaussian_blur_degrades_natural_noise() {
    for seed in 0..40 {
        let img = natural(seed);
        for sigma in [0.7, 1.5] {
            let blurred = img.gaussian_blurred(sigma);
            assert!(sharpness(&blurred) <= sharpness(&img) + 1e-9, "seed {seed}");
            assert!(blur_cpbd(&blurred) <= blur_cpbd(&img) + 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn sharpness_never_increases_under_box_blur() {
    for seed in 0..60 {
        let img = scene(seed);
        let s0 = sharpness(&img);
        for r in 1..=3 {
            let s = sharpness(&img.box_blurred(r));
            assert!(s <= s0 + 1e-12, "seed {seed} radius {r}: {s0} -> {s}");
        }
    }
}

#[test]
fn cpbd_never_increases_under_3x3_box_blur() {
    for seed in 0..60 {
        let img = scene(seed);
        assert!(blur_cpbd(&img.box_blurred(1)) <= blur_cpbd(&img), "seed {seed}");
    }
}

#[test]
fn cpbd_separates_step_from_ramp() {
    let step = Luminance::from_fn(64, 64, |_, x| if x < 32 { 0.1 } else { 0.9 }).unwrap();
    let ramp = step.box_blurred(4);
    assert_eq!(blur_cpbd(&step), 1.0);
    assert_eq!(blur_cpbd(&ramp), 0.0);
}

#[test]
fn accepts_minimum_size_and_gray_input() {
    let gray = Image::from_fn(1, 16, 16, |_, y, x| ((x ^ y) & 1) as f32);
    let q = compute_quality(&gray).unwrap();
    assert!(q.gcf > 0.0 && q.sharpness > 0.0);
    assert!(compute_quality(&Image::filled(3, 16, 16, 1.5)).is_err());
}

proptest! {
    #[test]
    fn metrics_stay_in_range(seed in any::<u64>()) {
        let q = compute_quality_detailed(&Image::from_fn(3, 24, 20, {
            let mut rng = SeededRng::new(seed);
            let px: Vec<f32> = (0..3 * 24 * 20).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
            move |c, y, x| px[(c * 24 + y) * 20 + x]
        })).unwrap().0;
        for (name, v) in QualityVector::NAMES.iter().zip(q.as_array()) {
            prop_assert!(v.is_finite(), "{name}");
            prop_assert!(v >= 0.0, "{name}");
            if *name != "GCF" {
                prop_assert!(v <= 1.0, "{name}");
            }
        }
    }

    #[test]
    fn mirroring_keeps_symmetry_score(seed in 0u64..1000) {
        let img = scene(seed);
        prop_assert!((light_symmetry(&img) - light_symmetry(&img.flipped())).abs() < 1e-12);
        prop_assert!((brightness(&img) - brightness(&img.flipped())).abs() < 1e-12);
    }
}
