use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use semifragile_core::dataset::{ingest, write_synthetic_corpus, DatasetManifest, Split};
use semifragile_core::detector::{detect, DetectionProfile, DEFAULT_FPR_BUDGET};
use semifragile_core::eval::{
    ablation_suite, adaptive_attack_eval, calibrate_profile, fragility_probe, jpeg_curve_svg,
    random_watermarks, robustness_sweep, ManipulationProxy,
};
use semifragile_core::imaging::{load_image, save_image};
use semifragile_core::models::{Checkpoint, Watermark};
use semifragile_core::trainer::{train, TrainArtifacts, TrainingConfig};
use semifragile_core::util::write_json;

/// Caps worker threads used by evaluation.
const THREADS_ENV: &str = "SEMIFRAGILE_THREADS";

#[derive(Parser)]
#[command(name = "semifragile", version, about = "Semi-fragile image watermarking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory of PNG/PPM images and write a split manifest.
    Ingest {
        dir: PathBuf,
        /// First fill `dir` with this many generated images.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Side length of generated images.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train encoder, decoder and discriminator.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Watermark one image.
    Embed {
        image: PathBuf,
        /// Binary digits or 0x-prefixed hex of exactly the watermark length.
        #[arg(long, conflicts_with = "identity")]
        watermark: Option<String>,
        /// Use the ground truth stored in the profile.
        #[arg(long)]
        identity: bool,
    },
    /// Decode the watermark of one image.
    Extract { image: PathBuf },
    /// Fit the detection threshold on validation negatives.
    Calibrate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        identity: String,
        /// Ground-truth watermark; random from the seed when omitted.
        #[arg(long)]
        watermark: Option<String>,
        #[arg(long, default_value_t = DEFAULT_FPR_BUDGET)]
        budget: f64,
    },
    /// Real/fake verdict for one image.
    Detect { image: PathBuf },
    /// Robustness sweep over the post-processing grid on the test split.
    Sweep {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train and compare the four ablation variants.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Adaptive-attacker evaluation against a defender checkpoint.
    Attack {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Attacker checkpoint; trained from the run config when omitted.
        #[arg(long)]
        attacker: Option<PathBuf>,
        /// Use the defender itself as the attacker.
        #[arg(long, conflicts_with = "attacker")]
        control: bool,
        /// Fraction of each image the attacker replaces before re-embedding.
        #[arg(long, default_value_t = 1.0)]
        replace: f64,
        #[arg(long, default_value_t = 4)]
        repeats: usize,
    },
}

/// Everything a run depends on besides dataset bytes.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Dataset manifest.
    dataset: Option<PathBuf>,
    /// Output directory for training artifacts.
    output: Option<PathBuf>,
    training: TrainingConfig,
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.training.seed = seed;
        }
        cfg.training.validate()?;
        Ok(cfg)
    }

    fn manifest(&self, flag: &Option<PathBuf>) -> Result<DatasetManifest> {
        let path = flag
            .as_ref()
            .or(self.dataset.as_ref())
            .context("no dataset manifest (use --manifest or set `dataset` in the config)")?;
        Ok(DatasetManifest::load(path)?)
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("missing --{flag}"))
}

fn load_checkpoint(common: &Common) -> Result<Checkpoint> {
    let path = need(&common.checkpoint, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_profile(common: &Common, ck: &Checkpoint) -> Result<DetectionProfile> {
    let path = need(&common.profile, "profile")?;
    let profile = DetectionProfile::load(path).with_context(|| format!("loading profile {}", path.display()))?;
    profile.check_hash(ck.config_hash())?;
    Ok(profile)
}

fn cap_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Value> {
    cap_threads()?;
    let common = cli.common;
    match cli.command {
        Command::Ingest { dir, synthetic, size } => {
            let seed = common.seed.unwrap_or(0);
            if let Some(n) = synthetic {
                write_synthetic_corpus(&dir, n, size, seed)?;
            }
            let (manifest, skipped) = ingest(&dir, seed)?;
            for s in &skipped {
                eprintln!("warning: skipped {}: {}", s.path, s.reason);
            }
            let out = common.out.unwrap_or_else(|| dir.join("manifest.json"));
            manifest.save(&out)?;
            Ok(json!({
                "manifest": out,
                "manifest_hash": manifest.hash(),
                "split_seed": seed,
                "train": manifest.count(Split::Train),
                "val": manifest.count(Split::Val),
                "test": manifest.count(Split::Test),
                "skipped": skipped,
            }))
        }
        Command::Train { manifest } => {
            let cfg = RunConfig::load(&common)?;
            let m = cfg.manifest(&manifest)?;
            let size = cfg.training.image_size;
            let train_set = m.load_split(Split::Train, size)?;
            let val = m.load_split(Split::Val, size)?;
            let dir = common
                .out
                .or(cfg.output.clone())
                .context("no output directory (use --out or set `output` in the config)")?;
            let artifacts = TrainArtifacts { dir };
            let out = train(&train_set, &val, &cfg.training, Some(&artifacts))?;
            Ok(json!({
                "report": out.report,
                "dataset_hash": m.hash(),
                "best_checkpoint": artifacts.best_checkpoint(),
                "last_checkpoint": artifacts.last_checkpoint(),
            }))
        }
        Command::Embed { image, watermark, identity } => {
            let ck = load_checkpoint(&common)?;
            let len = ck.bundle.arch.watermark_len;
            let wm = if identity {
                load_profile(&common, &ck)?.ground_truth
            } else {
                let s = watermark.context("give --watermark or --identity")?;
                Watermark::parse(&s, len)?
            };
            let out = need(&common.out, "out")?;
            let img = load_image(&image)?;
            let marked = ck.bundle.embed(&img, &wm)?;
            save_image(&marked, out)?;
            Ok(json!({ "out": out, "watermark": wm, "config_hash": ck.config_hash() }))
        }
        Command::Extract { image } => {
            let ck = load_checkpoint(&common)?;
            let logits = ck.bundle.extract(&load_image(&image)?)?;
            Ok(json!({
                "bits": logits.harden()?,
                "logits": logits.values,
                "config_hash": ck.config_hash(),
            }))
        }
        Command::Calibrate { manifest, identity, watermark, budget } => {
            let cfg = RunConfig::load(&common)?;
            let ck = load_checkpoint(&common)?;
            let m = cfg.manifest(&manifest)?;
            let val = m.load_split(Split::Val, cfg.training.image_size)?;
            let len = ck.bundle.arch.watermark_len;
            let wm = match watermark {
                Some(s) => Watermark::parse(&s, len)?,
                None => random_watermarks(1, len, cfg.training.seed).remove(0),
            };
            let profile = calibrate_profile(&ck.bundle, ck.config_hash(), &val, &identity, wm, budget)?;
            if let Some(out) = &common.out {
                profile.save(out)?;
            }
            Ok(serde_json::to_value(&profile)?)
        }
        Command::Detect { image } => {
            let ck = load_checkpoint(&common)?;
            let profile = load_profile(&common, &ck)?;
            let d = detect(&load_image(&image)?, &profile, &ck.bundle)?;
            Ok(json!({
                "identity": profile.identity,
                "verdict": d.verdict,
                "bitacc": d.bitacc,
                "threshold": profile.threshold,
                "extracted": d.extracted,
            }))
        }
        Command::Sweep { manifest } => {
            let cfg = RunConfig::load(&common)?;
            let ck = load_checkpoint(&common)?;
            let threshold = match &common.profile {
                Some(_) => Some(load_profile(&common, &ck)?.threshold),
                None => None,
            };
            let m = cfg.manifest(&manifest)?;
            let test = m.load_split(Split::Test, cfg.training.image_size)?;
            let marks = random_watermarks(test.len(), ck.bundle.arch.watermark_len, cfg.training.seed);
            let report = robustness_sweep(&ck.bundle, &test, &marks, threshold, ck.config_hash())?;
            let probes = [
                ManipulationProxy::RegionReplace { fraction: 0.6 },
                ManipulationProxy::RegionReplace { fraction: 1.0 },
                ManipulationProxy::PiecewiseWarp { magnitude: 4.0 },
            ]
            .into_iter()
            .map(|p| fragility_probe(&ck.bundle, &test, &marks, p, threshold, None, cfg.training.seed))
            .collect::<semifragile_core::Result<Vec<_>>>()?;
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                write_json(&dir.join("sweep.json"), &report)?;
                write_json(&dir.join("fragility.json"), &probes)?;
                report.write_csv(&dir.join("sweep.csv"))?;
                let svg = jpeg_curve_svg(&[("bitacc".into(), report.jpeg_curve())]);
                semifragile_core::util::write_atomic(&dir.join("jpeg_curve.svg"), |f| {
                    std::io::Write::write_all(f, svg.as_bytes())
                })?;
            }
            Ok(json!({
                "config_hash": report.config_hash,
                "images": report.images,
                "watermarked_ssim": report.watermarked_ssim,
                "grid_bitacc": report.grid_mean(),
                "clean_bitacc": report.rows[0].bitacc_mean,
                "jpeg_curve": report.jpeg_curve(),
                "fragility": probes.iter().map(|p| json!({
                    "proxy": p.label, "bitacc_median": p.bitacc_median, "detection_rate": p.detection_rate,
                })).collect::<Vec<_>>(),
            }))
        }
        Command::Ablate { manifest, seeds } => {
            let cfg = RunConfig::load(&common)?;
            let m = cfg.manifest(&manifest)?;
            let size = cfg.training.image_size;
            let (train_set, val, test) = (
                m.load_split(Split::Train, size)?,
                m.load_split(Split::Val, size)?,
                m.load_split(Split::Test, size)?,
            );
            let proxy = ManipulationProxy::RegionReplace { fraction: 1.0 };
            let report = ablation_suite(&train_set, &val, &test, &cfg.training, &seeds, proxy, |run| {
                eprintln!(
                    "{} seed {}: acc {:.4} jpeg {:.4} grid {:.4}",
                    run.variant.name(),
                    run.seed,
                    run.acc,
                    run.jpeg_bitacc,
                    run.grid_bitacc
                );
            })?;
            if let Some(out) = &common.out {
                write_json(out, &report)?;
            }
            Ok(serde_json::to_value(&report.summary)?)
        }
        Command::Attack { manifest, attacker, control, replace, repeats } => {
            let cfg = RunConfig::load(&common)?;
            let ck = load_checkpoint(&common)?;
            let profile = load_profile(&common, &ck)?;
            let m = cfg.manifest(&manifest)?;
            let size = cfg.training.image_size;
            let test = m.load_split(Split::Test, size)?;
            let attacker_bundle = if control {
                ck.bundle.clone()
            } else if let Some(p) = attacker {
                Checkpoint::load(&p)?.bundle
            } else {
                let mut acfg = cfg.training.clone();
                acfg.seed = acfg.seed.wrapping_add(1_000);
                if acfg.hash() == ck.config_hash() {
                    bail!("attacker config must differ from the defender's");
                }
                let train_set = m.load_split(Split::Train, size)?;
                let val = m.load_split(Split::Val, size)?;
                train(&train_set, &val, &acfg, None)?.best
            };
            let marks = vec![profile.ground_truth.clone(); test.len()];
            let report = adaptive_attack_eval(
                &ck.bundle,
                &attacker_bundle,
                &test,
                &marks,
                ManipulationProxy::RegionReplace { fraction: replace },
                profile.threshold,
                repeats,
                cfg.training.seed,
            )?;
            if let Some(out) = &common.out {
                write_json(out, &report)?;
            }
            Ok(json!({ "control": control, "report": report }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("{}", json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}
