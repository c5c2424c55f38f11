//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::ablation;
use crate::config::{self, load_config};

use crate::data_io::{
    latest_checkpoint, load_checkpoint, load_image, load_pair, write_fused, ChromaSource, DatasetManifest,
    ManifestEntry, Split,
};
use crate::error::{FuseError, Result};
use crate::metrics::{evaluate_fusion, MetricTable};
use crate::network::FusionNet;
use crate::plane::Plane;
use crate::training::{run_stage1, run_stage2, TrainConfig, TrainData};

#[derive(Debug, Parser)]
#[command(name = "corrfuse", version, about = "Dual-branch multi-modality image fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set network.embed_dim=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset manifest (overrides `manifest` in the config).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for checkpoints, logs and previews.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train encoder and decoder on per-modality reconstruction.
    TrainStage1(TrainArgs),
    /// Train the full network, including fusion layers.
    TrainStage2 {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 checkpoint directory; defaults to the newest under `<out>/ckpt/stage1`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Fuse every pair of a manifest with a trained checkpoint.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only pairs of this split (default: all).
        #[arg(long)]
        split: Option<String>,
    },
    /// Compute fusion metrics for fused images named after their first source.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// CSV output path (default: `<fused>/metrics.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Write per-channel heat maps of the base and detail features of one pair.
    DecomposeViz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Index of the pair in manifest order.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Short runs of every ablation configuration plus the full model.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Optimizer steps per stage and row.
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Generate a synthetic paired dataset with a manifest.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 2)]
        val: usize,
        #[arg(long, default_value_t = 2)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit status classes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

enum Failure {
    Usage(String),
    Runtime(FuseError),
}

impl From<FuseError> for Failure {
    fn from(e: FuseError) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: FuseError) -> Failure {
    match e {
        FuseError::Config(msg) => Failure::Usage(msg),
        other => Failure::Runtime(other),
    }
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 2 for usage errors and 1 for runtime failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn train_config(args: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides).map_err(usage)?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if cfg.manifest.is_none() {
        return Err(Failure::Usage("no manifest given (use --manifest or set `manifest`)".into()));
    }
    Ok(cfg)
}

fn config_table(args: &TrainArgs) -> std::result::Result<toml::Table, Failure> {
    let mut overrides = args.overrides.clone();
    if let Some(m) = &args.manifest {
        overrides.push(format!("manifest={}", toml::Value::String(m.display().to_string())));
    }
    config::merged_table(args.config.as_deref(), &overrides).map_err(usage)
}

fn write_resolved(cfg: &TrainConfig, out: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| FuseError::io(out, e))?;
    let path = out.join(name);
    std::fs::write(&path, config::to_toml(cfg)).map_err(|e| FuseError::io(&path, e))
}

fn parse_split(s: Option<&str>) -> std::result::Result<Option<Split>, Failure> {
    match s {
        None | Some("all") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e: FuseError| Failure::Usage(e.to_string())),
    }
}

fn select(manifest: &DatasetManifest, split: Option<Split>) -> Vec<&ManifestEntry> {
    match split {
        Some(s) => manifest.split(s),
        None => manifest.entries.iter().collect(),
    }
}

fn output_name(entry: &ManifestEntry) -> String {
    let stem = entry
        .path_a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fused".into());
    format!("{stem}.png")
}

/// Network rebuilt from the architecture stored in a checkpoint.
fn load_network(ckpt: &Path) -> Result<FusionNet> {
    let meta = load_checkpoint(ckpt)?;
    let net = FusionNet::new(&meta.network, DType::F32, 0)?;
    meta.apply_to(&net)?;
    Ok(net)
}

#[derive(Serialize)]
struct FusedRecord {
    path_a: PathBuf,
    path_b: PathBuf,
    output: PathBuf,
    chroma_source: ChromaSource,
}

#[derive(Serialize)]
struct FuseMeta {
    checkpoint: PathBuf,
    modality: String,
    images: Vec<FusedRecord>,
}

fn run(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::TrainStage1(args) => {
            let cfg = train_config(&args)?;
            let data = TrainData::from_manifest(cfg.manifest.as_deref().expect("checked"))?;
            write_resolved(&cfg, &args.out, "config_stage1.toml")?;
            let outcome = run_stage1(&cfg, &data, &args.out)?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::TrainStage2 { train, ckpt } => {
            let cfg = train_config(&train)?;
            let data = TrainData::from_manifest(cfg.manifest.as_deref().expect("checked"))?;
            let ckpt = match ckpt {
                Some(p) => Some(p),
                None if cfg.two_stage => Some(
                    latest_checkpoint(&train.out.join("ckpt"), 1)
                        .map(|(_, p)| p)
                        .ok_or_else(|| {
                            Failure::Usage(format!(
                                "no stage-1 checkpoint under {}; pass --ckpt",
                                train.out.join("ckpt").display()
                            ))
                        })?,
                ),
                None => None,
            };
            write_resolved(&cfg, &train.out, "config_stage2.toml")?;
            let outcome = run_stage2(&cfg, &data, &train.out, ckpt.as_deref())?;
            println!("{}", outcome.checkpoint.display());
        }
        Command::Fuse {
            ckpt,
            manifest,
            out,
            split,
        } => {
            let split = parse_split(split.as_deref())?;
            let manifest_doc = DatasetManifest::load(&manifest)?;
            let net = load_network(&ckpt)?;
            std::fs::create_dir_all(&out).map_err(|e| FuseError::io(&out, e))?;
            let mut images = Vec::new();
            for entry in select(&manifest_doc, split) {
                let pair = load_pair(entry)?;
                let fused = net.fuse(&pair.lum_a.to_tensor(DType::F32)?, &pair.lum_b.to_tensor(DType::F32)?)?;
                let fused = Plane::unbatch(&fused.fused)?.remove(0);
                let (source, chroma) = pair.chroma_for(manifest_doc.modality);
                let target = out.join(output_name(entry));
                write_fused(&fused, chroma, &target)?;
                log::info!("wrote {}", target.display());
                images.push(FusedRecord {
                    path_a: entry.path_a.clone(),
                    path_b: entry.path_b.clone(),
                    output: target,
                    chroma_source: source,
                });
            }
            let meta = FuseMeta {
                checkpoint: ckpt,
                modality: manifest_doc.modality.to_string(),
                images,
            };
            let path = out.join("fuse_meta.json");
            std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json"))
                .map_err(|e| FuseError::io(&path, e))?;
        }
        Command::Eval {
            fused,
            manifest,
            out,
            split,
        } => {
            let split = parse_split(split.as_deref())?;
            let manifest_doc = DatasetManifest::load(&manifest)?;
            let mut table = MetricTable::default();
            for entry in select(&manifest_doc, split) {
                let pair = load_pair(entry)?;
                let name = output_name(entry);
                let image = load_image(&fused.join(&name))?;
                table.push(name, evaluate_fusion(&image.lum, &pair.lum_a, &pair.lum_b)?);
            }
            let csv_path = out.unwrap_or_else(|| fused.join("metrics.csv"));
            if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| FuseError::io(dir, e))?;
            }
            let file = std::fs::File::create(&csv_path).map_err(|e| FuseError::io(&csv_path, e))?;
            table.write_csv(file)?;
            print!("{}", table.to_text());
        }
        Command::DecomposeViz {
            ckpt,
            manifest,
            index,
            out,
        } => {
            let manifest_doc = DatasetManifest::load(&manifest)?;
            let entry = manifest_doc.entries.get(index).ok_or_else(|| {
                Failure::Usage(format!(
                    "index {index} out of range; manifest has {} pairs",
                    manifest_doc.entries.len()
                ))
            })?;
            let pair = load_pair(entry)?;
            let net = load_network(&ckpt)?;
            let a = pair.lum_a.to_tensor(DType::F32)?;
            let b = pair.lum_b.to_tensor(DType::F32)?;
            let (dec_a, dec_b) = net.decompose_pair(&a, &b)?;
            for (name, t) in [
                ("base_a", &dec_a.base),
                ("base_b", &dec_b.base),
                ("detail_a", &dec_a.detail),
                ("detail_b", &dec_b.detail),
            ] {
                crate::viz::write_feature_grid(t, &out.join(format!("{name}.png")))?;
            }
            let fused = Plane::unbatch(&net.fuse(&a, &b)?.fused)?.remove(0);
            crate::data_io::write_gray(&fused, &out.join("fused.png"))?;
        }
        Command::Ablate { train, steps } => {
            let table = config_table(&train)?;
            let base = config::build_config(table.clone(), &[]).map_err(usage)?;
            let manifest = base
                .manifest
                .clone()
                .ok_or_else(|| Failure::Usage("no manifest given (use --manifest or set `manifest`)".into()))?;
            let data = TrainData::from_manifest(&manifest)?;
            let results = ablation::run_ablation(&table, &data, &train.out, steps)?;
            ablation::write_csv(&results, &train.out.join("ablation.csv"))?;
            let text = ablation::format_table(&results);
            let path = train.out.join("ablation.txt");
            std::fs::write(&path, &text).map_err(|e| FuseError::io(&path, e))?;
            print!("{text}");
        }
        Command::ToyData {
            out,
            train,
            val,
            test,
            size,
            seed,
        } => {
            let path =
                crate::toy::write_toy_dataset(&out, &[(Split::Train, train), (Split::Val, val), (Split::Test, test)], size, seed)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(dispatch(["corrfuse"]), EXIT_USAGE);
        assert_eq!(dispatch(["corrfuse", "fuse", "--ckpt", "x"]), EXIT_USAGE);
        assert_eq!(dispatch(["corrfuse", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            dispatch(["corrfuse", "train-stage1", "--manifest", "m.tsv", "--set", "network.bogus=1"]),
            EXIT_USAGE
        );
        assert_eq!(dispatch(["corrfuse", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.tsv");
        let out = dir.path().join("out");
        let code = dispatch([
            "corrfuse".as_ref(),
            "fuse".as_ref(),
            "--ckpt".as_ref(),
            dir.path().as_os_str(),
            "--manifest".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ] as [&std::ffi::OsStr; 8]);
        assert_eq!(code, EXIT_RUNTIME);
    }
}
