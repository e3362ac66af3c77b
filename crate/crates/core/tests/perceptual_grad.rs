use thermvis_core::cx::LossConfig;
use thermvis_core::loss::{loss_against, loss_and_grad, ReferenceFeatures};
use thermvis_core::perceptual::{InputNormalization, PerceptualNet};
use thermvis_core::rng::SeededRng;
use thermvis_core::FeatureMap;

fn random_image(rng: &mut SeededRng, size: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(3, size, size, |_, _, _| rng.uniform(0.2, 0.8))
}

#[test]
fn image_gradient_matches_finite_differences() {
    let net = PerceptualNet::<f64>::seeded(7, InputNormalization::default());
    let mut rng = SeededRng::new(99);
    let source = random_image(&mut rng, 32);
    let target = random_image(&mut rng, 32);
    let generated = random_image(&mut rng, 32);
    let cfg = LossConfig::default();
    let refs = ReferenceFeatures::compute(&net, &source, &target, &cfg).unwrap();
    let (value, grad) = loss_and_grad(&refs, &generated, &net, &cfg, 0).unwrap();
    let again = loss_against(&refs, &generated, &net, &cfg, 0).unwrap();
    assert!((value.total - again.total).abs() < 1e-12);

    let step = 1e-6;
    let (mut diff, mut norm) = (0.0f64, 0.0f64);
    for c in 0..3 {
        for y in 12..20 {
            for x in 12..20 {
                let mut plus = generated.clone();
                let mut minus = generated.clone();
                plus.set(c, y, x, generated.get(c, y, x) + step);
                minus.set(c, y, x, generated.get(c, y, x) - step);
                let lp = loss_against(&refs, &plus, &net, &cfg, 0).unwrap().total;
                let lm = loss_against(&refs, &minus, &net, &cfg, 0).unwrap().total;
                let numeric = (lp - lm) / (2.0 * step);
                diff += (numeric - grad.get(c, y, x)).powi(2);
                norm += grad.get(c, y, x).powi(2);
            }
        }
    }
    assert!(norm > 0.0);
    assert!(
        (diff / norm).sqrt() < 1e-3,
        "relative error {}",
        (diff / norm).sqrt()
    );
}
