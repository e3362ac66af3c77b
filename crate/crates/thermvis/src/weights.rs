//! Perceptual-network weight files.

use std::path::Path;

use thermvis_core::digest::sha256_hex;
use thermvis_core::perceptual::{InputNormalization, PerceptualNet, VGG19_CONVS};

use crate::config::PerceptualOptions;
use crate::error::{Error, Result};
use crate::tensors;

fn load_error(msg: String) -> Error {
    Error::Core(thermvis_core::Error::Load(msg))
}

/// Writes the network's parameters under their canonical names.
pub fn save_perceptual(path: &Path, net: &PerceptualNet<f32>) -> Result<()> {
    let params = net.named_parameters();
    let bytes = tensors::encode(
        params
            .iter()
            .map(|p| (p.name.as_str(), p.shape.as_slice(), p.data.as_slice())),
        None,
    )
    .map_err(|e| Error::format(path, e))?;
    crate::fsutil::write_atomic(path, &bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(Error::io(path))?))
}

/// Position of a parameter name (canonical or torchvision alias) in layer order.
fn layer_order(name: &str) -> usize {
    let (layer, suffix) = name.rsplit_once('.').unwrap_or((name, ""));
    let bias = usize::from(suffix == "bias");
    let index = VGG19_CONVS
        .iter()
        .position(|(n, _, _)| *n == layer)
        .or_else(|| {
            const TV: [&str; 16] = [
                "0", "2", "5", "7", "10", "12", "14", "16", "19", "21", "23", "25", "28", "30", "32", "34",
            ];
            let idx = layer.strip_prefix("features.")?;
            TV.iter().position(|t| *t == idx)
        })
        .unwrap_or(usize::MAX / 4);
    index * 2 + bias
}

/// Loads and verifies a weights file. Structural problems are reported
/// against the first affected parameter in layer order; when
/// `expected_sha256` is given the file digest must match it.
pub fn load_perceptual(
    path: &Path,
    expected_sha256: Option<&str>,
    normalization: InputNormalization,
) -> Result<PerceptualNet<f32>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let params = match tensors::decode(&bytes) {
        Ok(p) => p,
        Err(reason) => {
            let first = tensors::incomplete_tensors(&bytes).and_then(|mut names| {
                names.sort_by_key(|n| layer_order(n));
                names.into_iter().next()
            });
            return Err(load_error(match first {
                Some(name) => format!("{}: parameter {name} is truncated ({reason})", path.display()),
                None => format!("{}: {reason}", path.display()),
            }));
        }
    };
    let net = PerceptualNet::from_parameters(params, normalization)
        .map_err(|e| load_error(format!("{}: {e}", path.display())))?;
    if let Some(expected) = expected_sha256 {
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(expected.trim()) {
            return Err(load_error(format!(
                "{}: sha256 {actual} does not match expected {expected}",
                path.display()
            )));
        }
    }
    Ok(net)
}

/// Perceptual network selected by the run configuration: the weights file
/// when one is set, otherwise seeded random weights when requested.
pub fn perceptual_from_options(opts: &PerceptualOptions) -> Result<PerceptualNet<f32>> {
    let normalization = opts.normalization.input_normalization();
    match (&opts.weights_path, opts.synthetic_seed) {
        (Some(path), _) => load_perceptual(path, opts.sha256.as_deref(), normalization),
        (None, Some(seed)) => Ok(PerceptualNet::seeded(seed, normalization)),
        (None, None) => Err(Error::Config(
            "no perceptual weights configured: set perceptual.weights_path (or perceptual.synthetic_seed for smoke runs)"
                .into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use thermvis_core::Image;

    #[test]
    fn save_load_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let net = PerceptualNet::<f32>::seeded(4, InputNormalization::default());
        save_perceptual(&path, &net).unwrap();
        let sha = file_sha256(&path).unwrap();
        let a = load_perceptual(&path, Some(&sha), InputNormalization::default()).unwrap();
        let b = load_perceptual(&path, None, InputNormalization::default()).unwrap();
        assert_eq!(a.digest(), net.digest());
        let probe = Image::from_fn(3, 16, 16, |c, y, x| ((c + y + x) % 5) as f32 / 4.0);
        assert_eq!(
            a.extract(&probe, &["conv3_2"]).unwrap(),
            b.extract(&probe, &["conv3_2"]).unwrap()
        );

        let wrong = "0".repeat(64);
        let err = load_perceptual(&path, Some(&wrong), InputNormalization::default()).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_perceptual(&path, None, InputNormalization::default()).unwrap_err();
        assert!(err.to_string().contains("parameter conv"), "{err}");
    }

    #[test]
    fn layer_order_covers_aliases() {
        assert_eq!(layer_order("conv1_1.weight"), 0);
        assert_eq!(layer_order("conv1_1.bias"), 1);
        assert_eq!(layer_order("features.12.weight"), layer_order("conv3_2.weight"));
    }
}
