//! Checkpoint archives: a tar file holding `meta.json`, `params.safetensors`
//! and `optimizer.safetensors`.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thermvis_core::crn::CrnModel;
use thermvis_core::optim::Adam;
use thermvis_core::train::{Checkpoint, TrainConfig};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensors;

pub const FORMAT: &str = "thermvis-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    epoch: usize,
    config_digest: String,
    parameter_digest: String,
    loss_history: Vec<f64>,
    optimizer: OptimizerMeta,
    train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, bytes)
}

/// Serialises `ckpt` together with the configuration that produced it.
pub fn encode_checkpoint(ckpt: &Checkpoint, train: &TrainConfig) -> std::result::Result<Vec<u8>, String> {
    let params = ckpt.model.named_parameters();
    let meta = Meta {
        format: FORMAT.into(),
        version: VERSION,
        epoch: ckpt.epoch,
        config_digest: ckpt.config_digest.clone(),
        parameter_digest: ckpt.model.parameter_digest(),
        loss_history: ckpt.loss_history.clone(),
        optimizer: OptimizerMeta {
            learning_rate: ckpt.optimizer.learning_rate,
            beta1: ckpt.optimizer.beta1,
            beta2: ckpt.optimizer.beta2,
            eps: ckpt.optimizer.eps,
            step: ckpt.optimizer.step,
        },
        train: train.clone(),
    };
    let param_bytes = tensors::encode(
        params.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), *d)),
        None,
    )?;
    let moment_names: Vec<(String, String)> = params
        .iter()
        .map(|(n, _, _)| (format!("m.{n}"), format!("v.{n}")))
        .collect();
    let moments = params
        .iter()
        .zip(&moment_names)
        .zip(
            ckpt.optimizer
                .first_moment
                .iter()
                .zip(&ckpt.optimizer.second_moment),
        )
        .flat_map(|(((_, shape, _), (mn, vn)), (m, v))| {
            [
                (mn.as_str(), shape.as_slice(), m.as_slice()),
                (vn.as_str(), shape.as_slice(), v.as_slice()),
            ]
        });
    let opt_bytes = tensors::encode(moments, None)?;
    let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(|e| e.to_string())?;

    let mut builder = tar::Builder::new(Vec::new());
    let io = |e: std::io::Error| e.to_string();
    append(&mut builder, "meta.json", &meta_bytes).map_err(io)?;
    append(&mut builder, "params.safetensors", &param_bytes).map_err(io)?;
    append(&mut builder, "optimizer.safetensors", &opt_bytes).map_err(io)?;
    builder.into_inner().map_err(io)
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(Checkpoint, TrainConfig), String> {
    let mut meta = None;
    let mut params = None;
    let mut moments = None;
    let mut archive = tar::Archive::new(bytes);
    for entry in archive.entries().map_err(|e| e.to_string())? {
        let mut entry = entry.map_err(|e| e.to_string())?;
        let name = entry.path().map_err(|e| e.to_string())?.display().to_string();
        let mut data = Vec::new();
        entry.read_to_end(&mut data).map_err(|e| e.to_string())?;
        match name.as_str() {
            "meta.json" => {
                meta = Some(serde_json::from_slice::<Meta>(&data).map_err(|e| format!("meta.json: {e}"))?)
            }
            "params.safetensors" => {
                params = Some(tensors::decode(&data).map_err(|e| format!("params: {e}"))?)
            }
            "optimizer.safetensors" => {
                moments = Some(tensors::decode(&data).map_err(|e| format!("optimizer: {e}"))?)
            }
            _ => {}
        }
    }
    let meta = meta.ok_or("missing meta.json")?;
    let params = params.ok_or("missing params.safetensors")?;
    let moments = moments.ok_or("missing optimizer.safetensors")?;
    if meta.format != FORMAT || meta.version != VERSION {
        return Err(format!(
            "unsupported checkpoint {} version {}",
            meta.format, meta.version
        ));
    }
    if meta.loss_history.len() != meta.epoch {
        return Err(format!(
            "loss history has {} entries for {} epochs",
            meta.loss_history.len(),
            meta.epoch
        ));
    }

    let mut model = CrnModel::<f32>::zeros(&meta.train.crn).map_err(|e| e.to_string())?;
    let expected: Vec<String> = model.named_parameters().into_iter().map(|(n, _, _)| n).collect();
    if params.len() != expected.len() {
        return Err(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            params.len()
        ));
    }
    for p in &params {
        model.set_parameter(&p.name, &p.data).map_err(|e| e.to_string())?;
    }
    if model.parameter_digest() != meta.parameter_digest {
        return Err("parameter digest does not match meta.json".into());
    }

    let lens = model.named_parameters().into_iter().map(|(_, _, d)| d.len());
    let mut optimizer = Adam::new(meta.optimizer.learning_rate, lens);
    optimizer.beta1 = meta.optimizer.beta1;
    optimizer.beta2 = meta.optimizer.beta2;
    optimizer.eps = meta.optimizer.eps;
    optimizer.step = meta.optimizer.step;
    let find = |name: &str| {
        moments
            .binary_search_by(|t| t.name.as_str().cmp(name))
            .map(|i| &moments[i].data)
            .map_err(|_| format!("optimizer state for {name} missing"))
    };
    for (i, name) in expected.iter().enumerate() {
        for (slot, prefix) in [
            (&mut optimizer.first_moment[i], "m"),
            (&mut optimizer.second_moment[i], "v"),
        ] {
            let data = find(&format!("{prefix}.{name}"))?;
            if data.len() != slot.len() {
                return Err(format!("optimizer state for {name} has the wrong size"));
            }
            slot.copy_from_slice(data);
        }
    }

    let ckpt = Checkpoint {
        model,
        optimizer,
        epoch: meta.epoch,
        config_digest: meta.config_digest,
        loss_history: meta.loss_history,
    };
    Ok((ckpt, meta.train))
}

/// Atomically writes a checkpoint archive.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, train: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(ckpt, train).map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)
}

/// Reads a checkpoint and the training configuration echoed inside it.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use thermvis_core::crn::CrnConfig;
    use thermvis_core::train::generate;
    use thermvis_core::Image;

    fn toy() -> TrainConfig {
        TrainConfig {
            crn: CrnConfig {
                target_resolution: 8,
                channel_schedule: vec![4, 4],
                seed: 9,
                ..CrnConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = toy();
        let mut ckpt = Checkpoint::fresh(&cfg).unwrap();
        ckpt.optimizer.step = 3;
        ckpt.optimizer.first_moment[2][1] = 0.25;
        ckpt.optimizer.second_moment[5][0] = 1.5;
        ckpt.epoch = 1;
        ckpt.loss_history = vec![0.7];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.tar");
        save_checkpoint(&path, &ckpt, &cfg).unwrap();
        let (back, echo) = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(echo, cfg);
        let probe = Image::from_fn(3, 8, 8, |c, y, x| ((c + 2 * y + x) % 7) as f32 / 6.0);
        let a = generate(&ckpt, &probe, &cfg.crn).unwrap();
        let b = generate(&back, &probe, &cfg.crn).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(
            encode_checkpoint(&ckpt, &cfg).unwrap(),
            std::fs::read(&path).unwrap()
        );
    }

    #[test]
    fn damaged_archive_is_rejected() {
        let cfg = toy();
        let bytes = encode_checkpoint(&Checkpoint::fresh(&cfg).unwrap(), &cfg).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() / 3]).is_err());
        assert!(decode_checkpoint(b"not a tar").is_err());
    }
}
