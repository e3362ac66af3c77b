//! Two-term training objective:
//!
//! `lambda1 * sum_{l in source_layers} -log CX(phi_l(g), phi_l(s))
//!  + lambda2 * sum_{l in target_layers} -log CX(phi_l(g), phi_l(t))`
//!
//! with `s` the source capture, `t` the ground truth and `g` the generated
//! image. Layers within a term carry equal weight.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cx::{self, LossConfig};
use crate::error::{contract, Result};
use crate::perceptual::{FeatureStack, PerceptualNet};
use crate::scalar::Real;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    /// Unweighted `-log CX` per source layer.
    pub source_terms: Vec<(String, f64)>,
    /// Unweighted `-log CX` per target layer.
    pub target_terms: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn source_sum(&self) -> f64 {
        self.source_terms.iter().map(|(_, v)| v).sum()
    }
    pub fn target_sum(&self) -> f64 {
        self.target_terms.iter().map(|(_, v)| v).sum()
    }
}

/// Perceptual features of the source and target images. They do not depend
/// on the generator, so a training step computes them once per pair.
#[derive(Debug, Clone)]
pub struct ReferenceFeatures<T> {
    source: FeatureStack<T>,
    target: FeatureStack<T>,
}

impl<T: Real> ReferenceFeatures<T> {
    pub fn compute(
        net: &PerceptualNet<T>,
        source: &FeatureMap<T>,
        target: &FeatureMap<T>,
        cfg: &LossConfig,
    ) -> Result<Self> {
        contract!(
            source.shape() == target.shape(),
            "source {:?} and target {:?} differ in shape",
            source.shape(),
            target.shape()
        );
        let src_layers: Vec<&str> = cfg.source_layers.iter().map(String::as_str).collect();
        let tgt_layers: Vec<&str> = cfg.target_layers.iter().map(String::as_str).collect();
        Ok(Self {
            source: if cfg.lambda1 > 0.0 {
                net.extract(source, &src_layers)?
            } else {
                FeatureStack::new()
            },
            target: if cfg.lambda2 > 0.0 {
                net.extract(target, &tgt_layers)?
            } else {
                FeatureStack::new()
            },
        })
    }
}

fn layer_seed(seed: u64, layer: &str) -> u64 {
    let idx = crate::perceptual::layer_index(layer).unwrap_or(0) as u64;
    seed ^ idx.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn all_layers(cfg: &LossConfig) -> Vec<&str> {
    let mut layers: Vec<&str> = Vec::new();
    let active = cfg
        .source_layers
        .iter()
        .filter(|_| cfg.lambda1 > 0.0)
        .chain(cfg.target_layers.iter().filter(|_| cfg.lambda2 > 0.0));
    for l in active {
        if !layers.contains(&l.as_str()) {
            layers.push(l.as_str());
        }
    }
    layers
}

fn evaluate<T: Real>(
    refs: &ReferenceFeatures<T>,
    g_stack: &FeatureStack<T>,
    cfg: &LossConfig,
    seed: u64,
    mut grads: Option<&mut FeatureStack<T>>,
) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    let terms = [
        (cfg.lambda1, &cfg.source_layers, &refs.source, false),
        (cfg.lambda2, &cfg.target_layers, &refs.target, true),
    ];
    for (weight, layers, reference, is_target) in terms {
        if weight <= 0.0 {
            continue;
        }
        for layer in layers {
            let g_grid = g_stack
                .get(layer)
                .ok_or_else(|| crate::Error::UnknownLayer(layer.clone()))?;
            let r_grid = reference
                .get(layer)
                .ok_or_else(|| crate::Error::UnknownLayer(layer.clone()))?;
            let seed = layer_seed(seed, layer);
            let g_pos = cx::subsample_positions(g_grid.height(), g_grid.width(), cfg.feature_cap, seed);
            let r_pos = cx::subsample_positions(r_grid.height(), r_grid.width(), cfg.feature_cap, seed);
            let g_set = cx::gather_positions(g_grid, &g_pos)?;
            let r_set = cx::gather_positions(r_grid, &r_pos)?;
            let value = match grads.as_deref_mut() {
                Some(acc) => {
                    let (value, mut rows) = cx::cx_loss_with_grad(&g_set, &r_set, cfg.h, cfg.epsilon)?;
                    rows.iter_mut().for_each(|v| *v *= weight);
                    acc.accumulate(layer, cx::scatter_positions(&rows, &g_pos, g_grid.shape()));
                    value
                }
                None => cx::cx_loss(&g_set, &r_set, cfg.h, cfg.epsilon)?,
            };
            out.total += weight * value;
            let entry = (layer.clone(), value);
            if is_target {
                out.target_terms.push(entry);
            } else {
                out.source_terms.push(entry);
            }
        }
    }
    Ok(out)
}

/// Loss value with per-term breakdown.
pub fn total_loss<T: Real>(
    source: &FeatureMap<T>,
    target: &FeatureMap<T>,
    generated: &FeatureMap<T>,
    net: &PerceptualNet<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let refs = ReferenceFeatures::compute(net, source, target, cfg)?;
    loss_against(&refs, generated, net, cfg, cfg.subsample_seed)
}

/// Loss of `generated` against precomputed reference features.
pub fn loss_against<T: Real>(
    refs: &ReferenceFeatures<T>,
    generated: &FeatureMap<T>,
    net: &PerceptualNet<T>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let g_stack = net.extract(generated, &all_layers(cfg))?;
    evaluate(refs, &g_stack, cfg, seed, None)
}

/// Loss and its gradient with respect to the generated image.
pub fn loss_and_grad<T: Real>(
    refs: &ReferenceFeatures<T>,
    generated: &FeatureMap<T>,
    net: &PerceptualNet<T>,
    cfg: &LossConfig,
    seed: u64,
) -> Result<(LossBreakdown, FeatureMap<T>)> {
    let (g_stack, tape) = net.extract_with_tape(generated, &all_layers(cfg))?;
    let mut grads = FeatureStack::new();
    let breakdown = evaluate(refs, &g_stack, cfg, seed, Some(&mut grads))?;
    let grad = net.backward(&tape, &grads)?;
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::InputNormalization;
    use alloc::vec;

    fn img(seed: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(3, 16, 16, |c, y, x| ((x * 5 + y * 3 + c * 7 + seed) % 11) as f64 / 10.0)
    }

    fn net() -> PerceptualNet<f64> {
        PerceptualNet::seeded(2, InputNormalization::default())
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let cfg = LossConfig::default();
        let b = total_loss(&img(0), &img(1), &img(2), &net(), &cfg).unwrap();
        assert_eq!(b.source_terms.len(), 1);
        assert_eq!(b.target_terms.len(), 2);
        let expected = cfg.lambda1 * b.source_sum() + cfg.lambda2 * b.target_sum();
        assert!((b.total - expected).abs() < 1e-12);
        assert!(b.source_terms.iter().chain(&b.target_terms).all(|(_, v)| *v >= -1e-12));
    }

    #[test]
    fn disabled_term_is_not_computed() {
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 1.0,
            ..LossConfig::default()
        };
        let b = total_loss(&img(0), &img(1), &img(2), &net(), &cfg).unwrap();
        assert!(b.source_terms.is_empty());
        assert!((b.total - b.target_sum()).abs() < 1e-12);
    }

    #[test]
    fn matching_target_scores_lower() {
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 1.0,
            target_layers: vec!["conv2_2".into()],
            ..LossConfig::default()
        };
        let same = total_loss(&img(0), &img(1), &img(1), &net(), &cfg).unwrap();
        let other = total_loss(&img(0), &img(1), &img(4), &net(), &cfg).unwrap();
        assert!(same.total < other.total, "{} vs {}", same.total, other.total);
    }

    #[test]
    fn gradient_path_reports_the_same_value() {
        let cfg = LossConfig::default();
        let net = net();
        let refs = ReferenceFeatures::compute(&net, &img(0), &img(1), &cfg).unwrap();
        let plain = loss_against(&refs, &img(3), &net, &cfg, 9).unwrap();
        let (with_grad, grad) = loss_and_grad(&refs, &img(3), &net, &cfg, 9).unwrap();
        assert_eq!(plain, with_grad);
        assert_eq!(grad.shape(), (3, 16, 16));
        assert!(grad.is_finite());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let small = FeatureMap::<f64>::filled(3, 8, 8, 0.5);
        assert!(ReferenceFeatures::compute(&net(), &img(0), &small, &LossConfig::default()).is_err());
    }
}
