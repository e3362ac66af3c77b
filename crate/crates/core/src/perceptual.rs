//! Frozen 19-layer perceptual network (VGG19 convolutional trunk) used as the
//! feature extractor for the contextual loss.
//!
//! Features are taken after each convolution's ReLU. The network never
//! receives parameter updates; [`PerceptualNet::backward`] only propagates
//! gradients to the input image.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::digest::ParamHasher;
use crate::error::{contract, Error, Result};
use crate::ops::{self, Conv2d};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::FeatureMap;

/// `(name, in_channels, out_channels)` for each 3x3 convolution, in order.
pub const VGG19_CONVS: [(&str, usize, usize); 16] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
    ("conv5_4", 512, 512),
];

/// Indices of the convolutions preceded by a 2x2 max pool.
const POOL_BEFORE: [usize; 4] = [2, 4, 8, 12];

/// Position of each convolution in torchvision's `features` sequential,
/// accepted as an alias for the canonical `convX_Y` parameter names.
const TORCHVISION_INDEX: [usize; 16] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];

/// Affine map from `[0,1]` RGB to network input: `y_c = scale_c * x_c - offset_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputNormalization {
    pub scale: [f64; 3],
    pub offset: [f64; 3],
}

impl InputNormalization {
    /// Caffe / MatConvNet convention: 0..255 RGB minus the ImageNet mean pixel.
    pub const fn caffe() -> Self {
        Self {
            scale: [255.0; 3],
            offset: [123.68, 116.779, 103.939],
        }
    }

    /// torchvision convention: `(x - mean) / std`.
    pub fn torchvision() -> Self {
        let mean = [0.485, 0.456, 0.406];
        let std = [0.229, 0.224, 0.225];
        Self {
            scale: [1.0 / std[0], 1.0 / std[1], 1.0 / std[2]],
            offset: [mean[0] / std[0], mean[1] / std[1], mean[2] / std[2]],
        }
    }

    /// Pixel value (in `[0,1]`) that maps to zero in channel `c`.
    pub fn mean_pixel(&self, c: usize) -> f64 {
        self.offset[c] / self.scale[c]
    }
}

impl Default for InputNormalization {
    fn default() -> Self {
        Self::caffe()
    }
}

/// Named parameter tensor as stored in a weights file.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Per-layer feature grids for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStack<T> {
    layers: BTreeMap<String, FeatureMap<T>>,
}

impl<T: Real> FeatureStack<T> {
    pub fn new() -> Self {
        Self {
            layers: BTreeMap::new(),
        }
    }
    pub fn get(&self, layer: &str) -> Option<&FeatureMap<T>> {
        self.layers.get(layer)
    }
    pub fn insert(&mut self, layer: impl Into<String>, grid: FeatureMap<T>) {
        self.layers.insert(layer.into(), grid);
    }
    pub fn layers(&self) -> impl Iterator<Item = (&str, &FeatureMap<T>)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }
    pub fn len(&self) -> usize {
        self.layers.len()
    }
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
    /// Adds `grid` to the entry for `layer`, creating it if absent.
    pub fn accumulate(&mut self, layer: &str, grid: FeatureMap<T>) {
        match self.layers.get_mut(layer) {
            Some(existing) => existing.add_assign(&grid),
            None => {
                self.layers.insert(layer.to_string(), grid);
            }
        }
    }
}

/// Intermediate state kept by [`PerceptualNet::extract_with_tape`].
#[derive(Debug, Clone)]
pub struct ExtractTape<T> {
    activations: Vec<FeatureMap<T>>,
    pool_indices: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct PerceptualNet<T> {
    convs: Vec<Conv2d<T>>,
    normalization: InputNormalization,
    digest: String,
}

pub fn layer_index(name: &str) -> Result<usize> {
    VGG19_CONVS
        .iter()
        .position(|(n, _, _)| *n == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

impl<T: Real> PerceptualNet<T> {
    /// Builds the network from named tensors, checking every parameter's
    /// presence and shape in layer order. Both `conv3_2.weight` and the
    /// torchvision alias `features.12.weight` are accepted.
    pub fn from_parameters(params: Vec<NamedTensor<T>>, normalization: InputNormalization) -> Result<Self> {
        let mut by_name: BTreeMap<String, NamedTensor<T>> =
            params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut convs = Vec::with_capacity(VGG19_CONVS.len());
        for (i, &(name, cin, cout)) in VGG19_CONVS.iter().enumerate() {
            let mut conv = Conv2d::zeros(cin, cout, 3);
            for (suffix, expected) in [
                ("weight", alloc::vec![cout, cin, 3, 3]),
                ("bias", alloc::vec![cout]),
            ] {
                let canonical = format!("{name}.{suffix}");
                let alias = format!("features.{}.{suffix}", TORCHVISION_INDEX[i]);
                let tensor = by_name
                    .remove(&canonical)
                    .or_else(|| by_name.remove(&alias))
                    .ok_or_else(|| Error::Load(format!("missing parameter {canonical}")))?;
                if tensor.shape != expected || tensor.data.len() != expected.iter().product::<usize>() {
                    return Err(Error::Load(format!(
                        "parameter {canonical}: expected shape {expected:?}, found {:?} with {} values",
                        tensor.shape,
                        tensor.data.len()
                    )));
                }
                if let Some(bad) = tensor.data.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Load(format!(
                        "parameter {canonical}: non-finite value at {bad}"
                    )));
                }
                match suffix {
                    "weight" => conv.weight = tensor.data,
                    _ => conv.bias = tensor.data,
                }
            }
            convs.push(conv);
        }
        let mut net = Self {
            convs,
            normalization,
            digest: String::new(),
        };
        net.digest = net.weights_digest();
        Ok(net)
    }

    /// Randomly initialised stand-in with the VGG19 architecture
    /// (fan-in scaled normal weights, zero biases).
    pub fn seeded(seed: u64, normalization: InputNormalization) -> Self {
        let mut rng = SeededRng::derived(seed, 0x0076_6767_3139);
        let convs = VGG19_CONVS
            .iter()
            .map(|&(_, cin, cout)| {
                let mut conv = Conv2d::zeros(cin, cout, 3);
                let std = libm::sqrt(2.0 / (cin * 9) as f64);
                conv.weight
                    .iter_mut()
                    .for_each(|w| *w = T::of(rng.normal() * std));
                conv
            })
            .collect();
        let mut net = Self {
            convs,
            normalization,
            digest: String::new(),
        };
        net.digest = net.weights_digest();
        net
    }

    /// Parameters under their canonical names, in layer order.
    pub fn named_parameters(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::with_capacity(32);
        for (conv, &(name, cin, cout)) in self.convs.iter().zip(VGG19_CONVS.iter()) {
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: alloc::vec![cout, cin, 3, 3],
                data: conv.weight.clone(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: alloc::vec![cout],
                data: conv.bias.clone(),
            });
        }
        out
    }

    /// Digest recorded when the weights were loaded.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Recomputes the digest from the current weights.
    pub fn weights_digest(&self) -> String {
        let mut h = ParamHasher::new();
        for (conv, (name, _, _)) in self.convs.iter().zip(VGG19_CONVS.iter()) {
            h.label(name);
            h.values(&conv.weight);
            h.values(&conv.bias);
        }
        h.finish()
    }

    pub fn normalization(&self) -> InputNormalization {
        self.normalization
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &'static str> {
        VGG19_CONVS.iter().map(|(n, _, _)| *n)
    }

    /// Maps a `[0,1]` RGB image to the network's input convention.
    pub fn normalize_for_net(&self, image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        normalize_for_net(image, &self.normalization)
    }

    pub fn extract(&self, image: &FeatureMap<T>, layers: &[&str]) -> Result<FeatureStack<T>> {
        self.run(image, layers, false).map(|(stack, _)| stack)
    }

    /// Like [`extract`](Self::extract) but keeps what [`backward`](Self::backward) needs.
    pub fn extract_with_tape(
        &self,
        image: &FeatureMap<T>,
        layers: &[&str],
    ) -> Result<(FeatureStack<T>, ExtractTape<T>)> {
        self.run(image, layers, true)
    }

    fn run(
        &self,
        image: &FeatureMap<T>,
        layers: &[&str],
        keep: bool,
    ) -> Result<(FeatureStack<T>, ExtractTape<T>)> {
        let wanted = layers
            .iter()
            .map(|l| layer_index(l))
            .collect::<Result<Vec<_>>>()?;
        let mut stack = FeatureStack::new();
        let mut tape = ExtractTape {
            activations: Vec::new(),
            pool_indices: Vec::new(),
        };
        let Some(&deepest) = wanted.iter().max() else {
            return Ok((stack, tape));
        };
        let mut x = self.normalize_for_net(image)?;
        for (i, conv) in self.convs[..=deepest].iter().enumerate() {
            if POOL_BEFORE.contains(&i) {
                let (pooled, idx) = ops::max_pool2(&x);
                contract!(
                    pooled.plane_len() > 0,
                    "input {}x{} too small for layer {}",
                    image.height(),
                    image.width(),
                    VGG19_CONVS[i].0
                );
                if keep {
                    tape.pool_indices.push(idx);
                }
                x = pooled;
            }
            x = conv.forward(&x)?;
            ops::relu(&mut x);
            if wanted.contains(&i) {
                stack.insert(VGG19_CONVS[i].0, x.clone());
            }
            if keep {
                tape.activations.push(x.clone());
            }
        }
        Ok((stack, tape))
    }

    /// Gradient of `sum_l <grads[l], features[l]>` with respect to the
    /// `[0,1]` input image.
    pub fn backward(&self, tape: &ExtractTape<T>, grads: &FeatureStack<T>) -> Result<FeatureMap<T>> {
        let depth = tape.activations.len();
        contract!(depth > 0, "empty tape");
        for (name, g) in grads.layers() {
            let i = layer_index(name)?;
            contract!(i < depth, "layer {name} was not recorded on the tape");
            contract!(
                g.shape() == tape.activations[i].shape(),
                "gradient for {name} has shape {:?}, expected {:?}",
                g.shape(),
                tape.activations[i].shape()
            );
        }
        let mut g: Option<FeatureMap<T>> = None;
        for i in (0..depth).rev() {
            if let Some(extra) = grads.get(VGG19_CONVS[i].0) {
                match g.as_mut() {
                    Some(acc) => acc.add_assign(extra),
                    None => g = Some(extra.clone()),
                }
            }
            let Some(mut cur) = g.take() else { continue };
            ops::relu_backward(&tape.activations[i], &mut cur);
            cur = self.convs[i].backward_input(&cur);
            if let Some(slot) = POOL_BEFORE.iter().position(|&p| p == i) {
                cur =
                    ops::max_pool2_backward(&cur, &tape.pool_indices[slot], tape.activations[i - 1].shape());
            }
            g = Some(cur);
        }
        let mut g = g.ok_or_else(|| Error::Contract("no gradient reached the input".into()))?;
        for c in 0..g.channels() {
            let s = T::of(self.normalization.scale[c]);
            g.plane_mut(c).iter_mut().for_each(|v| *v *= s);
        }
        Ok(g)
    }
}

pub fn normalize_for_net<T: Real>(
    image: &FeatureMap<T>,
    normalization: &InputNormalization,
) -> Result<FeatureMap<T>> {
    contract!(
        image.channels() == 3,
        "perceptual network expects 3 channels, got {}",
        image.channels()
    );
    let bad = image
        .data()
        .iter()
        .position(|v| !(*v >= T::zero() && *v <= T::one()));
    contract!(
        bad.is_none(),
        "input value outside [0, 1] at flat index {}",
        bad.unwrap_or(0)
    );
    let mut out = image.clone();
    for c in 0..3 {
        let s = T::of(normalization.scale[c]);
        let o = T::of(normalization.offset[c]);
        out.plane_mut(c).iter_mut().for_each(|v| *v = *v * s - o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalization_examples() {
        let n = InputNormalization::caffe();
        let mean_img = FeatureMap::<f64>::from_fn(3, 2, 2, |c, _, _| n.mean_pixel(c));
        let z = normalize_for_net(&mean_img, &n).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-9));
        let zero = normalize_for_net(&FeatureMap::<f64>::zeros(3, 2, 2), &n).unwrap();
        for c in 0..3 {
            assert!(zero.plane(c).iter().all(|&v| v == -n.offset[c]));
        }
        let a = FeatureMap::<f64>::from_fn(3, 2, 2, |c, y, x| 0.1 * (c + y + x) as f64);
        let b = FeatureMap::<f64>::filled(3, 2, 2, 0.05);
        let (na, nb) = (
            normalize_for_net(&a, &n).unwrap(),
            normalize_for_net(&b, &n).unwrap(),
        );
        for c in 0..3 {
            for i in 0..4 {
                let lhs = na.plane(c)[i] - nb.plane(c)[i];
                let rhs = n.scale[c] * (a.plane(c)[i] - b.plane(c)[i]);
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }
        assert!(normalize_for_net(&FeatureMap::<f64>::filled(3, 1, 1, 1.2), &n).is_err());
    }

    #[test]
    fn unknown_layer_is_a_lookup_error() {
        let net = PerceptualNet::<f32>::seeded(1, InputNormalization::caffe());
        let img = FeatureMap::filled(3, 16, 16, 0.5);
        assert_eq!(
            net.extract(&img, &["conv9_9"]).unwrap_err(),
            Error::UnknownLayer("conv9_9".into())
        );
    }

    #[test]
    fn parameters_round_trip_and_shape_errors() {
        let net = PerceptualNet::<f32>::seeded(5, InputNormalization::caffe());
        let params = net.named_parameters();
        let again = PerceptualNet::from_parameters(params.clone(), InputNormalization::caffe()).unwrap();
        assert_eq!(again.digest(), net.digest());

        let mut broken = params.clone();
        broken[6].shape = vec![128, 64, 3, 1];
        let err = PerceptualNet::from_parameters(broken, InputNormalization::caffe()).unwrap_err();
        assert!(
            matches!(err, Error::Load(ref m) if m.contains("conv2_2.weight")),
            "{err}"
        );

        let renamed: Vec<_> = params
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                let suffix = if i % 2 == 0 { "weight" } else { "bias" };
                p.name = format!("features.{}.{suffix}", TORCHVISION_INDEX[i / 2]);
                p
            })
            .collect();
        let aliased = PerceptualNet::from_parameters(renamed, InputNormalization::caffe()).unwrap();
        assert_eq!(aliased.digest(), net.digest());
    }
}
