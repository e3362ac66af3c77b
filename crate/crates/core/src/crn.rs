//! Cascaded refinement network: a coarse-to-fine chain of three-layer
//! modules. Module `i` works at `base * 2^i`, sees the source image
//! resampled to that resolution concatenated with the previous module's
//! output upsampled 2x, and the finest module feeds a 1x1 projection to RGB
//! squashed into `[0, 1]` by a logistic.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::digest::ParamHasher;
use crate::error::{contract, Error, Result};
use crate::ops::{self, Conv2d, LayerNorm, LayerNormCache};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::FeatureMap;

/// Source image channels fed into every module.
pub const SOURCE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CrnConfig {
    pub base_resolution: usize,
    pub target_resolution: usize,
    /// Output channels of each module, coarse to fine.
    pub channel_schedule: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for CrnConfig {
    fn default() -> Self {
        Self {
            base_resolution: 4,
            target_resolution: 128,
            channel_schedule: vec![512, 512, 512, 256, 128, 64],
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl CrnConfig {
    /// Number of modules implied by the resolution ladder.
    pub fn ladder_len(&self) -> Result<usize> {
        let (base, target) = (self.base_resolution, self.target_resolution);
        if base == 0 || target < base || target % base != 0 || !(target / base).is_power_of_two() {
            return Err(Error::Config(format!(
                "target resolution {target} is not a power-of-two multiple of base {base}"
            )));
        }
        Ok((target / base).trailing_zeros() as usize + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ladder_len()?;
        if self.channel_schedule.len() != n {
            return Err(Error::Config(format!(
                "channel schedule has {} entries, the {}->{} ladder needs {n}",
                self.channel_schedule.len(),
                self.base_resolution,
                self.target_resolution
            )));
        }
        if self.channel_schedule.contains(&0) {
            return Err(Error::Config("channel schedule entries must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> Result<Vec<usize>> {
        let n = self.ladder_len()?;
        Ok((0..n).map(|i| self.base_resolution << i).collect())
    }

    /// Architecture fingerprint; the seed is excluded since it does not
    /// change parameter shapes.
    pub fn digest(&self) -> String {
        let mut h = ParamHasher::new();
        h.label("crn");
        h.bytes(&(self.base_resolution as u64).to_le_bytes());
        h.bytes(&(self.target_resolution as u64).to_le_bytes());
        for &c in &self.channel_schedule {
            h.bytes(&(c as u64).to_le_bytes());
        }
        h.bytes(&self.leaky_slope.to_le_bytes());
        h.finish()
    }
}

/// 3x3 convolution, layer normalization, leaky rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Real> ConvBlock<T> {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::zeros(cin, cout, 3),
            norm: LayerNorm::zeros(cout),
        }
    }

    fn forward(&self, x: &FeatureMap<T>, slope: T) -> Result<(FeatureMap<T>, LayerNormCache<T>)> {
        let pre = self.conv.forward(x)?;
        let (mut y, cache) = self.norm.forward(&pre);
        ops::leaky_relu(&mut y, slope);
        Ok((y, cache))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementModule<T> {
    resolution: usize,
    /// Channels arriving from the previous module (0 for the first).
    prev_channels: usize,
    /// Input, intermediate and output layers.
    pub layers: [ConvBlock<T>; 3],
}

impl<T: Real> RefinementModule<T> {
    pub fn resolution(&self) -> usize {
        self.resolution
    }
    pub fn out_channels(&self) -> usize {
        self.layers[2].conv.out_channels()
    }
    pub fn is_first(&self) -> bool {
        self.prev_channels == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnModel<T> {
    config: CrnConfig,
    modules: Vec<RefinementModule<T>>,
    pub projection: Conv2d<T>,
}

struct BlockTape<T> {
    input: FeatureMap<T>,
    cache: LayerNormCache<T>,
    output: FeatureMap<T>,
}

struct ModuleTape<T> {
    blocks: Vec<BlockTape<T>>,
}

/// Activations recorded by [`CrnModel::forward_with_tape`].
pub struct ForwardTape<T> {
    modules: Vec<ModuleTape<T>>,
    last_features: FeatureMap<T>,
    output: FeatureMap<T>,
}

impl<T: Real> ForwardTape<T> {
    pub fn output(&self) -> &FeatureMap<T> {
        &self.output
    }
}

/// Builds a model with seeded fan-in scaled normal weights.
pub fn build_crn<T: Real>(config: &CrnConfig) -> Result<CrnModel<T>> {
    let mut model = CrnModel::zeros(config)?;
    let mut rng = SeededRng::derived(config.seed, 0x63_726e);
    let mut init = |conv: &mut Conv2d<T>, gain: f64| {
        let fan_in = conv.in_channels() * conv.kernel() * conv.kernel();
        let std = libm::sqrt(gain / fan_in as f64);
        conv.weight
            .iter_mut()
            .for_each(|w| *w = T::of(rng.normal() * std));
    };
    for module in &mut model.modules {
        for block in &mut module.layers {
            init(&mut block.conv, 2.0);
            block.norm = LayerNorm::new(block.conv.out_channels());
        }
    }
    init(&mut model.projection, 1.0);
    Ok(model)
}

impl<T: Real> CrnModel<T> {
    /// Model with every parameter (including normalization gains) at zero.
    pub fn zeros(config: &CrnConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = config.resolutions()?;
        let mut modules = Vec::with_capacity(resolutions.len());
        let mut prev = 0;
        for (&res, &ch) in resolutions.iter().zip(&config.channel_schedule) {
            let cin = SOURCE_CHANNELS + prev;
            modules.push(RefinementModule {
                resolution: res,
                prev_channels: prev,
                layers: [
                    ConvBlock::zeros(cin, ch),
                    ConvBlock::zeros(ch, ch),
                    ConvBlock::zeros(ch, ch),
                ],
            });
            prev = ch;
        }
        Ok(Self {
            config: config.clone(),
            modules,
            projection: Conv2d::zeros(prev, 3, 1),
        })
    }

    /// Zero-valued model with the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated at construction")
    }

    pub fn config(&self) -> &CrnConfig {
        &self.config
    }
    pub fn modules(&self) -> &[RefinementModule<T>] {
        &self.modules
    }
    pub fn modules_mut(&mut self) -> &mut [RefinementModule<T>] {
        &mut self.modules
    }

    pub fn count_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.1.len()).sum()
    }

    /// Parameter tensors under canonical names, e.g.
    /// `module3.intermediate.conv.weight`, with their shapes.
    pub fn named_parameters(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            for (block, role) in m.layers.iter().zip(["input", "intermediate", "output"]) {
                let [o, c, k, _] = block.conv.weight_shape();
                out.push((
                    format!("module{i}.{role}.conv.weight"),
                    vec![o, c, k, k],
                    &block.conv.weight[..],
                ));
                out.push((
                    format!("module{i}.{role}.conv.bias"),
                    vec![o],
                    &block.conv.bias[..],
                ));
                out.push((
                    format!("module{i}.{role}.norm.gain"),
                    vec![o],
                    &block.norm.gain[..],
                ));
                out.push((
                    format!("module{i}.{role}.norm.bias"),
                    vec![o],
                    &block.norm.bias[..],
                ));
            }
        }
        let [o, c, k, _] = self.projection.weight_shape();
        out.push((
            "projection.weight".into(),
            vec![o, c, k, k],
            &self.projection.weight[..],
        ));
        out.push(("projection.bias".into(), vec![o], &self.projection.bias[..]));
        out
    }

    fn parameters(&self) -> Vec<(String, &[T])> {
        self.named_parameters()
            .into_iter()
            .map(|(n, _, d)| (n, d))
            .collect()
    }

    /// Mutable parameter slices in the same order as [`named_parameters`](Self::named_parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for m in &mut self.modules {
            for block in &mut m.layers {
                out.push(&mut block.conv.weight);
                out.push(&mut block.conv.bias);
                out.push(&mut block.norm.gain);
                out.push(&mut block.norm.bias);
            }
        }
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        out
    }

    /// Overwrites a parameter by canonical name, checking its length.
    pub fn set_parameter(&mut self, name: &str, values: &[T]) -> Result<()> {
        let index = self
            .named_parameters()
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Load(format!("unknown generator parameter {name}")))?;
        let slot = self.parameters_mut().swap_remove(index);
        if slot.len() != values.len() {
            return Err(Error::Load(format!(
                "parameter {name}: expected {} values, found {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }

    pub fn parameter_digest(&self) -> String {
        let mut h = ParamHasher::new();
        for (name, values) in self.parameters() {
            h.label(&name);
            h.values(values);
        }
        h.finish()
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    fn check_source(&self, source: &FeatureMap<T>) -> Result<()> {
        let r = self.config.target_resolution;
        contract!(
            source.shape() == (SOURCE_CHANNELS, r, r),
            "generator input must be {SOURCE_CHANNELS}x{r}x{r}, got {:?}",
            source.shape()
        );
        Ok(())
    }

    fn module_input(
        module: &RefinementModule<T>,
        prev: Option<&FeatureMap<T>>,
        source: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let r = module.resolution;
        let src = ops::resize_bilinear(source, r, r);
        match (prev, module.is_first()) {
            (None, true) => Ok(src),
            (Some(p), false) => {
                contract!(
                    p.channels() == module.prev_channels && p.height() * 2 == r && p.width() * 2 == r,
                    "module at {r} expects {}x{}x{} previous features, got {:?}",
                    module.prev_channels,
                    r / 2,
                    r / 2,
                    p.shape()
                );
                src.concat(&ops::resize_bilinear(p, r, r))
            }
            (None, false) => Err(Error::Contract(format!(
                "module at {r} requires previous features"
            ))),
            (Some(_), true) => Err(Error::Contract(
                "the first module takes no previous features".into(),
            )),
        }
    }

    /// One refinement module applied to `prev` (absent for the first module).
    pub fn refine_step(
        &self,
        module_index: usize,
        prev: Option<&FeatureMap<T>>,
        source: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let module = self
            .modules
            .get(module_index)
            .ok_or_else(|| Error::Contract(format!("no module {module_index}")))?;
        let mut x = Self::module_input(module, prev, source)?;
        for block in &module.layers {
            x = block.forward(&x, self.slope())?.0;
        }
        Ok(x)
    }

    /// Generated image, `3 x target x target` in `[0, 1]`.
    pub fn forward(&self, source: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_source(source)?;
        let mut prev: Option<FeatureMap<T>> = None;
        for i in 0..self.modules.len() {
            prev = Some(self.refine_step(i, prev.as_ref(), source)?);
        }
        let mut out = self.projection.forward(&prev.expect("at least one module"))?;
        ops::sigmoid(&mut out);
        Ok(out)
    }

    pub fn forward_with_tape(&self, source: &FeatureMap<T>) -> Result<ForwardTape<T>> {
        self.check_source(source)?;
        let slope = self.slope();
        let mut tapes = Vec::with_capacity(self.modules.len());
        let mut prev: Option<FeatureMap<T>> = None;
        for module in &self.modules {
            let mut x = Self::module_input(module, prev.as_ref(), source)?;
            let mut blocks = Vec::with_capacity(3);
            for block in &module.layers {
                let (y, cache) = block.forward(&x, slope)?;
                blocks.push(BlockTape {
                    input: x,
                    cache,
                    output: y.clone(),
                });
                x = y;
            }
            tapes.push(ModuleTape { blocks });
            prev = Some(x);
        }
        let last = prev.expect("at least one module");
        let mut out = self.projection.forward(&last)?;
        ops::sigmoid(&mut out);
        Ok(ForwardTape {
            modules: tapes,
            last_features: last,
            output: out,
        })
    }

    /// Accumulates parameter gradients of `<d_output, forward(source)>` into `grads`.
    pub fn backward(
        &self,
        tape: &ForwardTape<T>,
        d_output: &FeatureMap<T>,
        grads: &mut CrnModel<T>,
    ) -> Result<()> {
        contract!(
            d_output.shape() == tape.output.shape(),
            "output gradient shape {:?} does not match {:?}",
            d_output.shape(),
            tape.output.shape()
        );
        let slope = self.slope();
        let mut g = d_output.clone();
        ops::sigmoid_backward(&tape.output, &mut g);
        let mut g = self
            .projection
            .backward(&tape.last_features, &g, &mut grads.projection);
        for (mi, (module, mtape)) in self.modules.iter().zip(&tape.modules).enumerate().rev() {
            let gmod = &mut grads.modules[mi];
            for (bi, (block, btape)) in module.layers.iter().zip(&mtape.blocks).enumerate().rev() {
                ops::leaky_relu_backward(&btape.output, &mut g, slope);
                let g_pre = block.norm.backward(&btape.cache, &g, &mut gmod.layers[bi].norm);
                g = block
                    .conv
                    .backward(&btape.input, &g_pre, &mut gmod.layers[bi].conv);
            }
            if module.is_first() {
                break;
            }
            let (_, g_prev_up) = g.split_channels(SOURCE_CHANNELS);
            let half = module.resolution / 2;
            g = ops::resize_bilinear_backward(&g_prev_up, half, half);
        }
        Ok(())
    }
}

pub fn count_parameters<T: Real>(model: &CrnModel<T>) -> usize {
    model.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CrnConfig {
        CrnConfig {
            base_resolution: 4,
            target_resolution: 16,
            channel_schedule: vec![4, 3, 2],
            leaky_slope: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn ladder_errors() {
        let cfg = CrnConfig {
            target_resolution: 96,
            ..CrnConfig::default()
        };
        assert!(matches!(build_crn::<f32>(&cfg), Err(Error::Config(_))));
        let mut cfg = CrnConfig::default();
        cfg.channel_schedule.pop();
        assert!(matches!(build_crn::<f32>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_chain_has_one_module() {
        let cfg = CrnConfig {
            base_resolution: 4,
            target_resolution: 4,
            channel_schedule: vec![1],
            ..CrnConfig::default()
        };
        let m = build_crn::<f32>(&cfg).unwrap();
        assert_eq!(m.modules().len(), 1);
        // 3->1 conv (27+1), two 1->1 convs (9+1 each), three norms (2 each), 1->3 projection (3+3)
        assert_eq!(m.count_parameters(), 28 + 10 + 10 + 3 * 2 + 6);
    }

    #[test]
    fn refine_step_shapes_and_contracts() {
        let m = build_crn::<f64>(&tiny()).unwrap();
        let src = FeatureMap::filled(3, 16, 16, 0.3);
        let first = m.refine_step(0, None, &src).unwrap();
        assert_eq!(first.shape(), (4, 4, 4));
        let second = m.refine_step(1, Some(&first), &src).unwrap();
        assert_eq!(second.shape(), (3, 8, 8));
        assert!(m.refine_step(1, None, &src).is_err());
        assert!(m.refine_step(2, Some(&first), &src).is_err());
        assert!(m.forward(&FeatureMap::filled(3, 8, 8, 0.3)).is_err());
    }

    #[test]
    fn zero_weights_give_input_independent_output() {
        let m = CrnModel::<f64>::zeros(&tiny()).unwrap();
        let a = m
            .refine_step(0, None, &FeatureMap::filled(3, 16, 16, 0.1))
            .unwrap();
        let b = m
            .refine_step(
                0,
                None,
                &FeatureMap::from_fn(3, 16, 16, |c, y, x| ((c + y + x) % 5) as f64 / 5.0),
            )
            .unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let m = build_crn::<f64>(&cfg).unwrap();
        let mut rng = SeededRng::new(3);
        let src = FeatureMap::from_fn(3, 16, 16, |_, _, _| rng.uniform(0.0, 1.0));
        let w = FeatureMap::from_fn(3, 16, 16, |_, _, _| rng.uniform(-1.0, 1.0));
        let objective = |model: &CrnModel<f64>| -> f64 {
            let out = model.forward(&src).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let tape = m.forward_with_tape(&src).unwrap();
        let mut grads = m.zeros_like();
        m.backward(&tape, &w, &mut grads).unwrap();
        let names: Vec<String> = m.named_parameters().into_iter().map(|p| p.0).collect();
        let analytic: Vec<Vec<f64>> = grads
            .named_parameters()
            .into_iter()
            .map(|p| p.2.to_vec())
            .collect();
        for (pi, name) in names.iter().enumerate() {
            let len = analytic[pi].len();
            for k in [0, len / 2, len - 1] {
                let mut plus = m.clone();
                plus.parameters_mut()[pi][k] += 1e-6;
                let mut minus = m.clone();
                minus.parameters_mut()[pi][k] -= 1e-6;
                let fd = (objective(&plus) - objective(&minus)) / 2e-6;
                let an = analytic[pi][k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{name}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn set_parameter_checks_length() {
        let mut m = build_crn::<f32>(&tiny()).unwrap();
        assert!(m.set_parameter("projection.bias", &[0.0; 3]).is_ok());
        assert!(m.set_parameter("projection.bias", &[0.0; 2]).is_err());
        assert!(m.set_parameter("nope", &[0.0]).is_err());
    }
}
