//! Per-fold generator training and inference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::crn::{build_crn, CrnConfig, CrnModel};
use crate::cx::LossConfig;
use crate::dataset::ImagePair;
use crate::error::{contract, Error, Result};
use crate::image::Image;
use crate::loss::{self, LossBreakdown, ReferenceFeatures};
use crate::optim::Adam;
use crate::perceptual::PerceptualNet;
use crate::rng::SeededRng;

/// Training sets up to this many pairs keep their reference features in
/// memory instead of recomputing them every step.
pub const REFERENCE_CACHE_PAIRS: usize = 64;

/// Which capture plays the source role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    #[default]
    ThermalToVisible,
    VisibleToThermal,
}

impl Direction {
    /// `(source, target)` images of a pair.
    pub fn roles<'a>(&self, pair: &'a ImagePair) -> (&'a Image, &'a Image) {
        match self {
            Direction::ThermalToVisible => (&pair.thermal, &pair.visible),
            Direction::VisibleToThermal => (&pair.visible, &pair.thermal),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub direction: Direction,
    pub loss: LossConfig,
    pub crn: CrnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 1,
            learning_rate: 1e-4,
            seed: 0,
            direction: Direction::ThermalToVisible,
            loss: LossConfig::default(),
            crn: CrnConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        self.crn.validate()
    }
}

/// Trained (or freshly initialised) generator with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: CrnModel<f32>,
    pub optimizer: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Architecture digest of the generator configuration.
    pub config_digest: String,
    /// Mean loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_crn::<f32>(&cfg.crn)?;
        let optimizer = Adam::new(
            cfg.learning_rate,
            model.named_parameters().iter().map(|p| p.2.len()),
        );
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            config_digest: cfg.crn.digest(),
            loss_history: Vec::new(),
        })
    }

    pub fn check_compatible(&self, crn: &CrnConfig) -> Result<()> {
        let expected = crn.digest();
        if self.config_digest != expected || self.model.config().digest() != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint generator digest {} does not match configured {}",
                self.config_digest, expected
            )));
        }
        Ok(())
    }
}

/// Progress notifications emitted while training.
#[derive(Debug, Clone)]
pub enum TrainEvent {
    Step {
        epoch: usize,
        /// 1-based global step counter.
        step: usize,
        loss: LossBreakdown,
    },
    EpochEnd {
        epoch: usize,
        mean_loss: f64,
    },
}

/// Trains a freshly built generator for `cfg.epochs` epochs.
pub fn train_fold(
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    net: &PerceptualNet<f32>,
    observer: impl FnMut(&TrainEvent),
) -> Result<Checkpoint> {
    let ckpt = Checkpoint::fresh(cfg)?;
    continue_training(ckpt, pairs, cfg, net, observer)
}

/// Runs the remaining epochs of `ckpt` up to `cfg.epochs`.
pub fn continue_training(
    mut ckpt: Checkpoint,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    net: &PerceptualNet<f32>,
    mut observer: impl FnMut(&TrainEvent),
) -> Result<Checkpoint> {
    cfg.validate()?;
    ckpt.check_compatible(&cfg.crn)?;
    contract!(
        !pairs.is_empty() || cfg.epochs <= ckpt.epoch,
        "training needs at least one pair"
    );
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let mut grads = ckpt.model.zeros_like();
    let mut cache: Vec<Option<ReferenceFeatures<f32>>> = Vec::new();
    if pairs.len() <= REFERENCE_CACHE_PAIRS {
        cache.resize_with(pairs.len(), || None);
    }
    for epoch in ckpt.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        SeededRng::derived(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut epoch_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b + 1;
            grads.parameters_mut().into_iter().for_each(|g| g.fill(0.0));
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = LossBreakdown::default();
            for &i in batch {
                let (source, target) = cfg.direction.roles(&pairs[i]);
                let computed;
                let refs = match cache.get_mut(i) {
                    Some(slot) => match slot {
                        Some(r) => &*r,
                        None => &*slot.insert(ReferenceFeatures::compute(net, source, target, &cfg.loss)?),
                    },
                    None => {
                        computed = ReferenceFeatures::compute(net, source, target, &cfg.loss)?;
                        &computed
                    }
                };
                let tape = ckpt.model.forward_with_tape(source)?;
                if !tape.output().is_finite() {
                    return Err(Error::Diverged { step, loss: f64::NAN });
                }
                let seed = cfg.loss.subsample_seed ^ step as u64;
                let (value, mut d_out) = loss::loss_and_grad(refs, tape.output(), net, &cfg.loss, seed)?;
                if !value.total.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        loss: value.total,
                    });
                }
                d_out.data_mut().iter_mut().for_each(|v| *v *= scale);
                ckpt.model.backward(&tape, &d_out, &mut grads)?;
                accumulate(&mut batch_loss, &value, batch.len());
            }
            let grad_refs: Vec<&[f32]> = grads.named_parameters().into_iter().map(|p| p.2).collect();
            if grad_refs.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            ckpt.optimizer.update(ckpt.model.parameters_mut(), grad_refs);
            epoch_sum += batch_loss.total;
            observer(&TrainEvent::Step {
                epoch,
                step,
                loss: batch_loss,
            });
        }
        let mean_loss = epoch_sum / steps_per_epoch as f64;
        ckpt.loss_history.push(mean_loss);
        ckpt.epoch = epoch + 1;
        observer(&TrainEvent::EpochEnd { epoch, mean_loss });
    }
    Ok(ckpt)
}

fn accumulate(acc: &mut LossBreakdown, value: &LossBreakdown, n: usize) {
    let w = 1.0 / n as f64;
    acc.total += w * value.total;
    for (dst, src) in [
        (&mut acc.source_terms, &value.source_terms),
        (&mut acc.target_terms, &value.target_terms),
    ] {
        if dst.is_empty() {
            dst.extend(src.iter().map(|(l, v)| (l.clone(), v * w)));
        } else {
            for ((_, d), (_, s)) in dst.iter_mut().zip(src) {
                *d += s * w;
            }
        }
    }
}

/// Inference-mode generation from a source image.
pub fn generate(ckpt: &Checkpoint, source: &Image, crn: &CrnConfig) -> Result<Image> {
    ckpt.check_compatible(crn)?;
    crate::image::check_unit_range(source)?;
    ckpt.model.forward(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::InputNormalization;
    use alloc::vec;

    fn toy(epochs: usize, batch_size: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate: 1e-3,
            crn: CrnConfig {
                base_resolution: 4,
                target_resolution: 8,
                channel_schedule: vec![4, 4],
                ..CrnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn pairs(n: u32) -> Vec<ImagePair> {
        (1..=n)
            .map(|id| ImagePair {
                thermal: Image::from_fn(3, 8, 8, |_, y, x| ((x + y * id as usize) % 7) as f32 / 6.0),
                visible: Image::from_fn(3, 8, 8, |c, y, x| ((x * 2 + y + c) % 5) as f32 / 4.0),
                identity_id: id,
                variation_id: 1,
            })
            .collect()
    }

    fn net() -> PerceptualNet<f32> {
        PerceptualNet::seeded(5, InputNormalization::default())
    }

    #[test]
    fn zero_epochs_returns_the_fresh_model() {
        let cfg = toy(0, 1);
        let ckpt = train_fold(&pairs(2), &cfg, &net(), |_| panic!("no events expected")).unwrap();
        assert_eq!(ckpt, Checkpoint::fresh(&cfg).unwrap());
    }

    #[test]
    fn batches_cover_every_pair_once_per_epoch() {
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        train_fold(&pairs(3), &toy(2, 2), &net(), |e| match e {
            TrainEvent::Step { step, .. } => steps.push(*step),
            TrainEvent::EpochEnd { epoch, .. } => epochs.push(*epoch),
        })
        .unwrap();
        assert_eq!(steps, [1, 2, 3, 4]);
        assert_eq!(epochs, [0, 1]);
    }

    #[test]
    fn incompatible_architecture_is_rejected() {
        let ckpt = Checkpoint::fresh(&toy(1, 1)).unwrap();
        let mut other = toy(1, 1);
        other.crn.channel_schedule = vec![4, 6];
        assert!(matches!(
            continue_training(ckpt.clone(), &pairs(1), &other, &net(), |_| {}),
            Err(Error::Incompatible(_))
        ));
        let src = &pairs(1)[0].thermal;
        assert!(matches!(generate(&ckpt, src, &other.crn), Err(Error::Incompatible(_))));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train_fold(&[], &toy(1, 1), &net(), |_| {}).is_err());
        assert!(train_fold(&[], &toy(0, 1), &net(), |_| {}).is_ok());
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        assert!(matches!(toy(1, 0).validate(), Err(Error::Config(_))));
        let mut cfg = toy(1, 1);
        cfg.learning_rate = f64::NAN;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
