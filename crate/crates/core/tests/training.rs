use thermvis_core::crn::{build_crn, CrnConfig};
use thermvis_core::dataset::ImagePair;
use thermvis_core::perceptual::{InputNormalization, PerceptualNet};
use thermvis_core::train::{continue_training, generate, train_fold, Checkpoint, TrainConfig, TrainEvent};
use thermvis_core::{Error, Image};

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-3,
        crn: CrnConfig {
            base_resolution: 4,
            target_resolution: 8,
            channel_schedule: vec![8, 8],
            ..CrnConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn toy_pairs(n: u32) -> Vec<ImagePair> {
    (1..=n)
        .map(|id| {
            let t = Image::from_fn(1, 8, 8, |_, y, x| ((x * 3 + y * id as usize) % 8) as f32 / 7.0);
            ImagePair {
                thermal: thermvis_core::image::replicate_to_rgb(&t).unwrap(),
                visible: Image::from_fn(3, 8, 8, |c, y, x| ((x + 2 * y + c) % 5) as f32 / 4.0),
                identity_id: id,
                variation_id: 1,
            }
        })
        .collect()
}

fn net() -> PerceptualNet<f32> {
    PerceptualNet::seeded(3, InputNormalization::default())
}

#[test]
fn default_parameter_count() {
    let cfg = CrnConfig::default();
    let mut expected = 0;
    let mut prev = 0;
    for &c in &cfg.channel_schedule {
        let input = 3 + prev;
        expected += 9 * input * c + c; // first conv
        expected += 2 * (9 * c * c + c); // two more convs
        expected += 3 * 2 * c; // gain and bias of three norms
        prev = c;
    }
    expected += prev * 3 + 3;
    assert_eq!(expected, 22_042_563);
    assert_eq!(build_crn::<f32>(&cfg).unwrap().count_parameters(), expected);
}

#[test]
fn training_is_reproducible() {
    let pairs = toy_pairs(3);
    let cfg = toy_config(2);
    let a = train_fold(&pairs, &cfg, &net(), |_| {}).unwrap();
    let b = train_fold(&pairs, &cfg, &net(), |_| {}).unwrap();
    assert_eq!(a.model.parameter_digest(), b.model.parameter_digest());
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.epoch, 2);
}

#[test]
fn resuming_matches_uninterrupted_run() {
    let pairs = toy_pairs(3);
    let full = train_fold(&pairs, &toy_config(3), &net(), |_| {}).unwrap();
    let first = train_fold(&pairs, &toy_config(1), &net(), |_| {}).unwrap();
    let resumed = continue_training(first, &pairs, &toy_config(3), &net(), |_| {}).unwrap();
    assert_eq!(full, resumed);
}

#[test]
fn perceptual_weights_stay_frozen() {
    let n = net();
    let before = n.weights_digest();
    let mut steps = 0;
    train_fold(&toy_pairs(2), &toy_config(2), &n, |e| {
        if let TrainEvent::Step { step, loss, .. } = e {
            steps += 1;
            assert_eq!(*step, steps);
            assert!(loss.total.is_finite());
        }
    })
    .unwrap();
    assert_eq!(steps, 4);
    assert_eq!(n.weights_digest(), before);
}

#[test]
fn generation_checks_compatibility() {
    let cfg = toy_config(1);
    let ckpt = Checkpoint::fresh(&cfg).unwrap();
    let out = generate(&ckpt, &toy_pairs(1)[0].thermal, &cfg.crn).unwrap();
    assert_eq!(out.shape(), (3, 8, 8));
    let (lo, hi) = out.min_max();
    assert!(lo >= 0.0 && hi <= 1.0);

    let mut other = cfg.crn.clone();
    other.channel_schedule = vec![8, 4];
    assert!(matches!(
        generate(&ckpt, &toy_pairs(1)[0].thermal, &other),
        Err(Error::Incompatible(_))
    ));
}

#[test]
fn divergence_is_reported_with_step() {
    let mut cfg = toy_config(1);
    cfg.learning_rate = 1e30;
    let pairs = toy_pairs(4);
    match train_fold(&pairs, &cfg, &net(), |_| {}) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}
