//! Identity-disjoint cross-validation: per-fold training, checkpointing and
//! generation of the held-out identities.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thermvis_core::dataset::{self, CaptureRecord, Fold, FoldPlan};
use thermvis_core::perceptual::PerceptualNet;
use thermvis_core::train::{continue_training, generate, Checkpoint, TrainConfig, TrainEvent};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::io::write_png;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub identity: u32,
    pub variation: u32,
    pub path: PathBuf,
}

/// Record of one completed fold. Its presence on disk marks the fold done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub fold: usize,
    pub train_identities: Vec<u32>,
    pub test_identities: Vec<u32>,
    pub checkpoint: PathBuf,
    pub generated: Vec<GeneratedImage>,
    pub train_pairs: usize,
    pub excluded_dark: usize,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub config_digest: String,
    pub parameter_digest: String,
    pub perceptual_digest: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FoldSelection {
    All,
    One(usize),
}

impl FoldSelection {
    pub fn indices(self, count: usize) -> Result<Vec<usize>> {
        match self {
            FoldSelection::All => Ok((0..count).collect()),
            FoldSelection::One(i) if i < count => Ok(vec![i]),
            FoldSelection::One(i) => Err(Error::Config(format!(
                "fold {i} out of range, plan has {count} folds"
            ))),
        }
    }
}

impl std::str::FromStr for FoldSelection {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(FoldSelection::All);
        }
        s.parse()
            .map(FoldSelection::One)
            .map_err(|_| format!("expected a fold index or `all`, got `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub enum Progress {
    FoldSkipped {
        fold: usize,
    },
    FoldStarted {
        fold: usize,
        train_pairs: usize,
        resumed_epoch: usize,
    },
    Epoch {
        fold: usize,
        epoch: usize,
        mean_loss: f64,
    },
    FoldFinished {
        fold: usize,
        generated: usize,
    },
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold{fold}"))
}

pub fn manifest_path(out: &Path, fold: usize) -> PathBuf {
    fold_dir(out, fold).join("manifest.json")
}

pub fn checkpoint_path(out: &Path, fold: usize) -> PathBuf {
    fold_dir(out, fold).join("checkpoint.tar")
}

pub fn generated_path(out: &Path, fold: usize, identity: u32, variation: u32) -> PathBuf {
    fold_dir(out, fold).join(format!("{identity}_{variation}_gen.png"))
}

pub fn save_plan(path: &Path, plan: &FoldPlan) -> Result<()> {
    write_json(path, plan)
}

pub fn load_plan(path: &Path) -> Result<FoldPlan> {
    read_json(path)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    read_json(path)
}

/// Identities with at least one complete thermal/visible pair.
pub fn identities(records: &[CaptureRecord]) -> BTreeSet<u32> {
    dataset::group_pairs(records)
        .0
        .iter()
        .map(|p| p.thermal.identity_id())
        .collect()
}

/// Fails unless no generated identity was seen in training.
pub fn check_leakage(manifest: &RunManifest) -> Result<()> {
    let train: BTreeSet<u32> = manifest.train_identities.iter().copied().collect();
    let test: BTreeSet<u32> = manifest.test_identities.iter().copied().collect();
    if let Some(id) = train.intersection(&test).next() {
        return Err(thermvis_core::Error::Contract(format!(
            "fold {}: identity {id} is in both train and test",
            manifest.fold
        ))
        .into());
    }
    if let Some(g) = manifest
        .generated
        .iter()
        .find(|g| train.contains(&g.identity) || !test.contains(&g.identity))
    {
        return Err(thermvis_core::Error::Contract(format!(
            "fold {}: generated identity {} leaks from the training set",
            manifest.fold, g.identity
        ))
        .into());
    }
    Ok(())
}

fn same_except_epochs(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig {
        epochs: 0,
        ..a.clone()
    } == TrainConfig {
        epochs: 0,
        ..b.clone()
    }
}

/// Trains `fold` epoch by epoch, saving a checkpoint after each so an
/// interrupted run resumes from the last finished epoch.
fn train_with_checkpoints(
    pairs: &[dataset::ImagePair],
    train: &TrainConfig,
    net: &PerceptualNet<f32>,
    path: &Path,
    fold: usize,
    progress: &mut dyn FnMut(Progress),
) -> Result<Checkpoint> {
    let mut ckpt = match load_checkpoint(path) {
        Ok((ckpt, echo)) if same_except_epochs(&echo, train) && ckpt.epoch <= train.epochs => ckpt,
        _ => Checkpoint::fresh(train)?,
    };
    progress(Progress::FoldStarted {
        fold,
        train_pairs: pairs.len(),
        resumed_epoch: ckpt.epoch,
    });
    save_checkpoint(path, &ckpt, train)?;
    while ckpt.epoch < train.epochs {
        let step_cfg = TrainConfig {
            epochs: ckpt.epoch + 1,
            ..train.clone()
        };
        ckpt = continue_training(ckpt, pairs, &step_cfg, net, |e| {
            if let TrainEvent::EpochEnd { epoch, mean_loss } = e {
                progress(Progress::Epoch {
                    fold,
                    epoch: *epoch,
                    mean_loss: *mean_loss,
                });
            }
        })?;
        save_checkpoint(path, &ckpt, train)?;
    }
    Ok(ckpt)
}

/// Writes a generated image for every test pair of `fold`.
pub fn generate_fold(
    records: &[CaptureRecord],
    fold: &Fold,
    fold_index: usize,
    ckpt: &Checkpoint,
    train: &TrainConfig,
    out: &Path,
) -> Result<Vec<GeneratedImage>> {
    let pairs = dataset::test_pairs(records, fold, train.crn.target_resolution)?;
    let mut generated = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        if !fold.test.contains(&pair.identity_id) || fold.train.contains(&pair.identity_id) {
            return Err(thermvis_core::Error::Contract(format!(
                "identity {} is not a test identity of fold {fold_index}",
                pair.identity_id
            ))
            .into());
        }
        let (source, _) = train.direction.roles(pair);
        let image = generate(ckpt, source, &train.crn)?;
        let path = generated_path(out, fold_index, pair.identity_id, pair.variation_id);
        write_png(&path, &image)?;
        generated.push(GeneratedImage {
            identity: pair.identity_id,
            variation: pair.variation_id,
            path,
        });
    }
    Ok(generated)
}

/// Runs the selected folds of `plan`. Folds whose manifest already exists
/// for the same configuration are skipped.
pub fn run_cross_validation(
    records: &[CaptureRecord],
    plan: &FoldPlan,
    cfg: &RunConfig,
    net: &PerceptualNet<f32>,
    selection: FoldSelection,
    progress: &mut dyn FnMut(Progress),
) -> Result<Vec<RunManifest>> {
    cfg.validate()?;
    plan.validate(&identities(records))?;
    let train = cfg.train_config();
    let out = cfg.output_dir.as_path();
    let config_digest = train.crn.digest();
    let mut manifests = Vec::new();
    for i in selection.indices(plan.folds.len())? {
        let fold = &plan.folds[i];
        let mpath = manifest_path(out, i);
        if let Ok(done) = load_manifest(&mpath) {
            let same_split = done
                .train_identities
                .iter()
                .copied()
                .eq(fold.train.iter().copied())
                && done.test_identities.iter().copied().eq(fold.test.iter().copied());
            let same_run = done.config_digest == config_digest
                && done.epochs == train.epochs
                && done.perceptual_digest == net.digest();
            if same_split && same_run {
                check_leakage(&done)?;
                progress(Progress::FoldSkipped { fold: i });
                manifests.push(done);
                continue;
            }
        }

        let start = Instant::now();
        let resolution = cfg.network_resolution();
        let pairs = dataset::training_pairs(records, fold, cfg.exclude_dark, resolution, cfg.dark_threshold)?;
        let all_train = dataset::training_pairs(records, fold, false, resolution, cfg.dark_threshold)?.len();
        if let Some(p) = pairs.iter().find(|p| !fold.train.contains(&p.identity_id)) {
            return Err(thermvis_core::Error::Contract(format!(
                "fold {i}: training pair from identity {} outside the training set",
                p.identity_id
            ))
            .into());
        }
        let cpath = checkpoint_path(out, i);
        let ckpt = train_with_checkpoints(&pairs, &train, net, &cpath, i, progress)?;
        let generated = generate_fold(records, fold, i, &ckpt, &train, out)?;
        let manifest = RunManifest {
            fold: i,
            train_identities: fold.train.iter().copied().collect(),
            test_identities: fold.test.iter().copied().collect(),
            checkpoint: cpath,
            generated,
            train_pairs: pairs.len(),
            excluded_dark: all_train - pairs.len(),
            epochs: ckpt.epoch,
            loss_history: ckpt.loss_history.clone(),
            config_digest: config_digest.clone(),
            parameter_digest: ckpt.model.parameter_digest(),
            perceptual_digest: net.digest().to_string(),
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        check_leakage(&manifest)?;
        write_json(&mpath, &manifest)?;
        progress(Progress::FoldFinished {
            fold: i,
            generated: manifest.generated.len(),
        });
        manifests.push(manifest);
    }
    Ok(manifests)
}
