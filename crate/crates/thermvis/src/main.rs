use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thermvis::config::{load_config, RunConfig};
use thermvis::corpus::{capture_path, scan_dataset};
use thermvis::error::{Error, Result};
use thermvis::pipeline::{self, FoldSelection, Progress};
use thermvis::report::{self, AggregateReport};
use thermvis::synth::{self, SynthOptions};
use thermvis::weights;
use thermvis_core::dataset::{self, is_dark, make_folds, preprocess_pair, CaptureRecord, Spectrum};
use thermvis_core::perceptual::PerceptualNet;

#[derive(Parser)]
#[command(
    name = "thermvis",
    version,
    about = "Thermal-to-visible face synthesis and quality evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set loss.lambda1=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for the fold plan, data order and generator initialisation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and write the fold plan.
    Prepare,
    /// Train the selected folds and generate their test images.
    Train {
        #[arg(long, default_value = "all")]
        fold: FoldSelection,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Regenerate test images from saved fold checkpoints.
    Generate {
        #[arg(long, default_value = "all")]
        fold: FoldSelection,
    },
    /// Score O-VIS, O-THM and G-VIS and write the aggregate report.
    Evaluate {
        #[arg(long, default_value = "all")]
        fold: FoldSelection,
        /// Report directory; defaults to `<out>/eval`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Write an O-THM | G-VIS | O-VIS composite for one capture.
    Triptych {
        #[arg(long)]
        identity: u32,
        #[arg(long)]
        variation: u32,
        /// Output PNG; defaults to `<out>/triptych/<identity>_<variation>.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
    /// Write a synthetic corpus to the dataset root.
    SynthCorpus {
        #[arg(long, default_value_t = 10)]
        identities: u32,
        #[arg(long, default_value_t = 2)]
        variations: u32,
        /// Variation rendered nearly black.
        #[arg(long)]
        dark_variation: Option<u32>,
    },
    /// Write randomly initialised perceptual weights (for smoke runs only).
    SynthWeights {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        weights_seed: u64,
    },
}

fn quoted(value: &Path) -> String {
    toml::Value::String(value.display().to_string()).to_string()
}

fn resolve_config(g: &GlobalArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.extend([
            format!("folds.seed={seed}"),
            format!("train.seed={seed}"),
            format!("crn.seed={seed}"),
        ]);
    }
    if let Some(out) = &g.out {
        overrides.push(format!("output_dir={}", quoted(out)));
    }
    overrides.extend_from_slice(extra);
    load_config(g.config.as_deref(), &overrides)
}

fn load_records(cfg: &RunConfig) -> Result<Vec<CaptureRecord>> {
    let scan = scan_dataset(&cfg.dataset_root)?;
    for o in &scan.orphans {
        eprintln!(
            "warning: identity {} variation {}: {} has no counterpart, ignored",
            o.identity_id, o.variation_id, o.source_path
        );
    }
    Ok(scan.records)
}

fn load_plan(cfg: &RunConfig) -> Result<dataset::FoldPlan> {
    let path = cfg.plan_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "fold plan {} not found; run `thermvis prepare` first",
            path.display()
        )));
    }
    pipeline::load_plan(&path)
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let scan = scan_dataset(&cfg.dataset_root)?;
    for (path, reason) in &scan.skipped {
        eprintln!("warning: skipped {}: {reason}", path.display());
    }
    for o in &scan.orphans {
        eprintln!(
            "warning: orphan capture {} (identity {} variation {}, {} only)",
            o.source_path,
            o.identity_id,
            o.variation_id,
            o.present.tag()
        );
    }
    let (pairs, _) = dataset::group_pairs(&scan.records);
    let mut dark = 0;
    for p in &pairs {
        if is_dark(p.visible, cfg.dark_threshold)? {
            dark += 1;
        }
    }
    let ids = pipeline::identities(&scan.records);
    let plan = make_folds(&ids, cfg.folds.count, cfg.folds.seed)?;
    let path = cfg.plan_path();
    pipeline::save_plan(&path, &plan)?;
    println!("identities {}", ids.len());
    println!("pairs {}", pairs.len());
    println!("orphans {}", scan.orphans.len());
    println!(
        "dark {dark} (visible mean luminance < {}; {} from training)",
        cfg.dark_threshold,
        if cfg.exclude_dark { "excluded" } else { "kept" }
    );
    println!("folds {} -> {}", plan.folds.len(), path.display());
    Ok(())
}

fn perceptual(cfg: &RunConfig) -> Result<PerceptualNet<f32>> {
    let net = weights::perceptual_from_options(&cfg.perceptual)?;
    if cfg.perceptual.weights_path.is_none() {
        eprintln!("warning: using randomly initialised perceptual weights; results are not meaningful");
    }
    Ok(net)
}

fn cmd_train(cfg: &RunConfig, fold: FoldSelection) -> Result<()> {
    let plan = load_plan(cfg)?;
    let records = load_records(cfg)?;
    let net = perceptual(cfg)?;
    let mut progress = |p: Progress| match p {
        Progress::FoldSkipped { fold } => eprintln!("fold {fold}: already complete, skipped"),
        Progress::FoldStarted {
            fold,
            train_pairs,
            resumed_epoch,
        } => eprintln!("fold {fold}: {train_pairs} training pairs, starting at epoch {resumed_epoch}"),
        Progress::Epoch { epoch, mean_loss, .. } => println!("epoch {} loss {mean_loss:.6}", epoch + 1),
        Progress::FoldFinished { fold, generated } => {
            eprintln!("fold {fold}: wrote {generated} generated images")
        }
    };
    pipeline::run_cross_validation(&records, &plan, cfg, &net, fold, &mut progress)?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, fold: FoldSelection) -> Result<()> {
    let plan = load_plan(cfg)?;
    let records = load_records(cfg)?;
    let train = cfg.train_config();
    for i in fold.indices(plan.folds.len())? {
        let path = pipeline::checkpoint_path(&cfg.output_dir, i);
        if !path.exists() {
            eprintln!("warning: fold {i}: no checkpoint at {}, skipped", path.display());
            continue;
        }
        let (ckpt, _) = thermvis::checkpoint::load_checkpoint(&path)?;
        let images = pipeline::generate_fold(&records, &plan.folds[i], i, &ckpt, &train, &cfg.output_dir)?;
        eprintln!("fold {i}: wrote {} generated images", images.len());
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, fold: FoldSelection, report_dir: Option<PathBuf>) -> Result<()> {
    let plan = load_plan(cfg).map_err(|e| Error::Evaluation(e.to_string()))?;
    let mut manifests = Vec::new();
    for i in fold.indices(plan.folds.len())? {
        match pipeline::load_manifest(&pipeline::manifest_path(&cfg.output_dir, i)) {
            Ok(m) => manifests.push(m),
            Err(_) => eprintln!("warning: fold {i} has no manifest, not evaluated"),
        }
    }
    let records = load_records(cfg).map_err(|e| Error::Evaluation(e.to_string()))?;
    let mut items = report::original_items(&records, cfg.quality.resolution)?;
    items.extend(report::generated_items(&manifests)?);
    let rows = report::score(&items)?;
    let aggregate = AggregateReport::from_rows(&rows)?;
    let dir = report_dir.unwrap_or_else(|| cfg.output_dir.join("eval"));
    report::write_reports(&dir, &rows, &aggregate)?;
    print!("{}", aggregate.render_table());
    eprintln!("reports written to {}", dir.display());
    Ok(())
}

fn read_for_triptych(
    cfg: &RunConfig,
    identity: u32,
    variation: u32,
) -> Result<(CaptureRecord, CaptureRecord)> {
    let mut out = Vec::new();
    for spectrum in [Spectrum::Thermal, Spectrum::Visible] {
        let path = capture_path(&cfg.dataset_root, identity, variation, spectrum);
        let pixels = thermvis::io::read_capture(&path, spectrum)?;
        out.push(CaptureRecord::new(
            identity,
            variation,
            spectrum,
            pixels,
            path.display().to_string(),
        )?);
    }
    let visible = out.pop().expect("two captures");
    let thermal = out.pop().expect("two captures");
    Ok((thermal, visible))
}

fn cmd_triptych(cfg: &RunConfig, identity: u32, variation: u32, output: Option<PathBuf>) -> Result<()> {
    let plan = load_plan(cfg).map_err(|e| Error::Evaluation(e.to_string()))?;
    let fold = plan
        .folds
        .iter()
        .position(|f| f.test.contains(&identity))
        .ok_or_else(|| Error::Evaluation(format!("identity {identity} is not in the fold plan")))?;
    let (thermal, visible) =
        read_for_triptych(cfg, identity, variation).map_err(|e| Error::Evaluation(e.to_string()))?;
    let generated_path = pipeline::generated_path(&cfg.output_dir, fold, identity, variation);
    let generated = thermvis::io::read_png(&generated_path).map_err(|e| Error::Evaluation(e.to_string()))?;
    let pair = preprocess_pair(&thermal, &visible, generated.height())?;
    let composite = report::triptych(&pair.thermal, &generated, &pair.visible)?;
    let output = output.unwrap_or_else(|| {
        cfg.output_dir
            .join("triptych")
            .join(format!("{identity}_{variation}.png"))
    });
    thermvis::io::write_png(&output, &composite)?;
    println!("{}", output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare => cmd_prepare(&resolve_config(&cli.global, &[])?),
        Command::Train { fold, epochs } => {
            let extra: Vec<String> = epochs.map(|e| format!("train.epochs={e}")).into_iter().collect();
            cmd_train(&resolve_config(&cli.global, &extra)?, fold)
        }
        Command::Generate { fold } => cmd_generate(&resolve_config(&cli.global, &[])?, fold),
        Command::Evaluate { fold, report_dir } => {
            cmd_evaluate(&resolve_config(&cli.global, &[])?, fold, report_dir)
        }
        Command::Triptych {
            identity,
            variation,
            output,
        } => cmd_triptych(&resolve_config(&cli.global, &[])?, identity, variation, output),
        Command::Config => {
            print!("{}", resolve_config(&cli.global, &[])?.to_toml());
            Ok(())
        }
        Command::SynthCorpus {
            identities,
            variations,
            dark_variation,
        } => {
            let cfg = resolve_config(&cli.global, &[])?;
            let opts = SynthOptions {
                identities,
                variations,
                dark_variation,
                seed: cli.global.seed.unwrap_or(0),
                ..SynthOptions::default()
            };
            synth::write_corpus(&cfg.dataset_root, &opts)?;
            println!("{}", cfg.dataset_root.display());
            Ok(())
        }
        Command::SynthWeights { output, weights_seed } => {
            let cfg = resolve_config(&cli.global, &[])?;
            let net = PerceptualNet::<f32>::seeded(
                weights_seed,
                cfg.perceptual.normalization.input_normalization(),
            );
            weights::save_perceptual(&output, &net)?;
            println!("{} sha256 {}", output.display(), weights::file_sha256(&output)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
