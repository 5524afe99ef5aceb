//! Desk-scale evaluation: robustness sweeps, fragility probes with
//! manipulation proxies, the adaptive-attacker protocol and ablations.
//!
//! Watermarked images are quantized to 8 bits before anything reads them, as
//! a PNG save and reload would.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    bitwise_accuracy, calibrate_threshold, false_positive_rate, metrics_from_bitaccs, DetectionProfile,
    MetricsReport, DEFAULT_FPR_BUDGET,
};
use crate::error::{Error, Result};
use crate::imaging::{ssim, Image};
use crate::jpeg::JpegGradient;
use crate::models::{ModelBundle, Watermark};
use crate::postprocess::{apply_post_process, full_grid, OpFamily, PostProcessOp};
use crate::scheduler::SchedulerKind;
use crate::trainer::{train, TrainReport, TrainingConfig};

pub const PROXY_NOTE: &str = "manipulation proxies stand in for face-manipulation generators, which are not part of this evaluation";

/// Seeded random watermarks, one per image.
pub fn random_watermarks(count: usize, len: usize, seed: u64) -> Vec<Watermark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Watermark::random(&mut rng, len)).collect()
}

/// Embeds and quantizes to 8 bits.
pub fn publish(models: &ModelBundle<f32>, images: &[Image], watermarks: &[Watermark]) -> Result<Vec<Image>> {
    Ok(models
        .embed_batch(images, watermarks)?
        .into_iter()
        .map(|im| im.quantized())
        .collect())
}

/// Hardened-bit accuracy of each image against its watermark.
pub fn decode_bitaccs(models: &ModelBundle<f32>, images: &[Image], watermarks: &[Watermark]) -> Result<Vec<f64>> {
    models
        .extract_batch(images)?
        .iter()
        .zip(watermarks)
        .map(|(l, w)| bitwise_accuracy(&l.harden()?, w))
        .collect()
}

fn apply_all(images: &[Image], op: &PostProcessOp) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|im| apply_post_process(im, op).map(|p| p.quantized()))
        .collect()
}

/// Bit accuracies of already-published images under every op, op-major.
pub fn grid_bitaccs(
    models: &ModelBundle<f32>,
    published: &[Image],
    watermarks: &[Watermark],
    ops: &[PostProcessOp],
) -> Result<Vec<Vec<f64>>> {
    ops.par_iter()
        .map(|op| decode_bitaccs(models, &apply_all(published, op)?, watermarks))
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub op: PostProcessOp,
    pub family: OpFamily,
    pub parameter: Option<f64>,
    pub bitacc_mean: f64,
    pub bitacc_median: f64,
    /// SSIM between the op applied to the original and to the watermarked image.
    pub ssim_mean: f64,
    /// Fraction flagged fake at the threshold, when one was given.
    pub detection_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub images: usize,
    pub threshold: Option<f64>,
    /// Mean SSIM(original, watermarked).
    pub watermarked_ssim: f64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, op: &PostProcessOp) -> Option<&SweepRow> {
        self.rows.iter().find(|r| &r.op == op)
    }

    /// Mean bit accuracy over all rows.
    pub fn grid_mean(&self) -> f64 {
        mean(&self.rows.iter().map(|r| r.bitacc_mean).collect::<Vec<_>>())
    }

    pub fn family_mean(&self, family: OpFamily) -> f64 {
        mean(
            &self
                .rows
                .iter()
                .filter(|r| r.family == family)
                .map(|r| r.bitacc_mean)
                .collect::<Vec<_>>(),
        )
    }

    /// `(quality, mean bit accuracy)` for the JPEG rows.
    pub fn jpeg_curve(&self) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.family == OpFamily::Jpeg)
            .filter_map(|r| Some((r.parameter?, r.bitacc_mean)))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["op", "family", "parameter", "bitacc_mean", "bitacc_median", "ssim_mean", "detection_rate"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.op.label(),
                r.family.name().to_string(),
                r.parameter.map(|p| p.to_string()).unwrap_or_default(),
                r.bitacc_mean.to_string(),
                r.bitacc_median.to_string(),
                r.ssim_mean.to_string(),
                r.detection_rate.map(|d| d.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        crate::util::write_atomic(path, |f| std::io::Write::write_all(f, &bytes))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Watermark, post-process and decode every image at every grid point.
pub fn robustness_sweep(
    models: &ModelBundle<f32>,
    images: &[Image],
    watermarks: &[Watermark],
    threshold: Option<f64>,
    config_hash: &str,
) -> Result<SweepReport> {
    if images.is_empty() {
        return Err(Error::Dataset("empty sweep set".into()));
    }
    let published = publish(models, images, watermarks)?;
    let watermarked_ssim = mean(
        &images
            .iter()
            .zip(&published)
            .map(|(a, b)| ssim(a, b))
            .collect::<Result<Vec<_>>>()?,
    );
    let rows = full_grid()
        .into_par_iter()
        .map(|op| {
            let processed = apply_all(&published, &op)?;
            let reference = apply_all(images, &op)?;
            let accs = decode_bitaccs(models, &processed, watermarks)?;
            let ssims = reference
                .iter()
                .zip(&processed)
                .map(|(a, b)| ssim(a, b))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                op,
                family: op.family(),
                parameter: op.parameter(),
                bitacc_mean: mean(&accs),
                bitacc_median: median(&accs),
                ssim_mean: mean(&ssims),
                detection_rate: threshold.map(|t| false_positive_rate(&accs, t)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        config_hash: config_hash.to_string(),
        images: images.len(),
        threshold,
        watermarked_ssim,
        rows,
    })
}

/// Content-altering transforms standing in for face-manipulation generators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManipulationProxy {
    /// Replaces the centered `fraction`² area with another image's content.
    RegionReplace { fraction: f64 },
    /// Resamples through a smooth random displacement field whose control
    /// points move by up to `magnitude` pixels.
    PiecewiseWarp { magnitude: f64 },
    /// Re-encodes with an independently trained encoder and a random message.
    ForeignReencode,
}

const WARP_GRID: usize = 5;

impl ManipulationProxy {
    pub fn label(&self) -> String {
        match self {
            Self::RegionReplace { fraction } => format!("region_replace({fraction})"),
            Self::PiecewiseWarp { magnitude } => format!("piecewise_warp({magnitude})"),
            Self::ForeignReencode => "foreign_reencode".into(),
        }
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        image: &Image,
        donor: &Image,
        foreign: Option<&ModelBundle<f32>>,
        rng: &mut R,
    ) -> Result<Image> {
        match *self {
            Self::RegionReplace { fraction } => region_replace(image, donor, fraction),
            Self::PiecewiseWarp { magnitude } => piecewise_warp(image, magnitude, rng),
            Self::ForeignReencode => {
                let m = foreign.ok_or_else(|| {
                    Error::ParamDomain("foreign re-encoding needs an independently trained model".into())
                })?;
                m.embed(image, &Watermark::random(rng, m.arch.watermark_len))
            }
        }
    }
}

pub fn region_replace(image: &Image, donor: &Image, fraction: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::ParamDomain(format!("replace fraction {fraction} outside [0, 1]")));
    }
    if !image.same_dims(donor) {
        return Err(Error::Shape("donor must match the image size".into()));
    }
    let (h, w) = (image.height(), image.width());
    let rh = (fraction * h as f64).round() as usize;
    let rw = (fraction * w as f64).round() as usize;
    let (top, left) = ((h - rh) / 2, (w - rw) / 2);
    let mut out = image.clone();
    for c in 0..3 {
        for y in top..top + rh {
            for x in left..left + rw {
                out.set(c, y, x, donor.get(c, y, x));
            }
        }
    }
    Ok(out)
}

fn bilinear(img: &Image, c: usize, y: f64, x: f64) -> f32 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn piecewise_warp<R: Rng + ?Sized>(image: &Image, magnitude: f64, rng: &mut R) -> Result<Image> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(Error::ParamDomain(format!("warp magnitude {magnitude} must be >= 0")));
    }
    let control: Vec<(f64, f64)> = (0..WARP_GRID * WARP_GRID)
        .map(|_| {
            if magnitude == 0.0 {
                (0.0, 0.0)
            } else {
                (rng.gen_range(-magnitude..=magnitude), rng.gen_range(-magnitude..=magnitude))
            }
        })
        .collect();
    let (h, w) = (image.height(), image.width());
    let field = |y: usize, x: usize| -> (f64, f64) {
        let gy = y as f64 / (h - 1).max(1) as f64 * (WARP_GRID - 1) as f64;
        let gx = x as f64 / (w - 1).max(1) as f64 * (WARP_GRID - 1) as f64;
        let (y0, x0) = ((gy.floor() as usize).min(WARP_GRID - 2), (gx.floor() as usize).min(WARP_GRID - 2));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        let at = |r: usize, c: usize| control[r * WARP_GRID + c];
        let mix = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        mix(mix(at(y0, x0), at(y0, x0 + 1), fx), mix(at(y0 + 1, x0), at(y0 + 1, x0 + 1), fx), fy)
    };
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = field(y, x);
            for c in 0..3 {
                out.set(c, y, x, bilinear(image, c, y as f64 + dy, x as f64 + dx));
            }
        }
    }
    Ok(out)
}

/// Donor for image `i`: the next unwatermarked image, cyclically.
fn donor(images: &[Image], i: usize, offset: usize) -> &Image {
    &images[(i + 1 + offset % (images.len() - 1).max(1)) % images.len()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragilityReport {
    pub proxy: ManipulationProxy,
    pub label: String,
    pub note: String,
    pub bitaccs: Vec<f64>,
    pub bitacc_mean: f64,
    pub bitacc_median: f64,
    pub detection_rate: Option<f64>,
}

/// Watermark, manipulate with `proxy`, decode.
pub fn fragility_probe(
    models: &ModelBundle<f32>,
    images: &[Image],
    watermarks: &[Watermark],
    proxy: ManipulationProxy,
    threshold: Option<f64>,
    foreign: Option<&ModelBundle<f32>>,
    seed: u64,
) -> Result<FragilityReport> {
    if images.len() < 2 {
        return Err(Error::Dataset("fragility probes need at least two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let published = publish(models, images, watermarks)?;
    let manipulated = published
        .iter()
        .enumerate()
        .map(|(i, im)| proxy.apply(im, donor(images, i, 0), foreign, &mut rng).map(|m| m.quantized()))
        .collect::<Result<Vec<_>>>()?;
    let bitaccs = decode_bitaccs(models, &manipulated, watermarks)?;
    Ok(FragilityReport {
        proxy,
        label: format!("{} (proxy)", proxy.label()),
        note: PROXY_NOTE.into(),
        bitacc_mean: mean(&bitaccs),
        bitacc_median: median(&bitaccs),
        detection_rate: threshold.map(|t| false_positive_rate(&bitaccs, t)),
        bitaccs,
    })
}

/// Negatives (every grid op) from seeded watermarks; returns the threshold
/// and the bit accuracies it was fitted on.
pub fn calibrate_on(
    models: &ModelBundle<f32>,
    images: &[Image],
    seed: u64,
    budget: f64,
) -> Result<(f64, Vec<f64>)> {
    let marks = random_watermarks(images.len(), models.arch.watermark_len, seed);
    let published = publish(models, images, &marks)?;
    let negatives: Vec<f64> = grid_bitaccs(models, &published, &marks, &full_grid())?
        .into_iter()
        .flatten()
        .collect();
    Ok((calibrate_threshold(&negatives, budget)?, negatives))
}

/// Detection profile for one identity: `images` are published with
/// `ground_truth`, post-processed by every grid op, and the threshold is
/// fitted to keep the false-positive rate on them within `budget`.
pub fn calibrate_profile(
    models: &ModelBundle<f32>,
    config_hash: &str,
    images: &[Image],
    identity: &str,
    ground_truth: Watermark,
    budget: f64,
) -> Result<DetectionProfile> {
    let marks = vec![ground_truth.clone(); images.len()];
    let published = publish(models, images, &marks)?;
    let negatives: Vec<f64> = grid_bitaccs(models, &published, &marks, &full_grid())?
        .into_iter()
        .flatten()
        .collect();
    DetectionProfile::calibrate(identity, ground_truth, &negatives, budget, config_hash)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub proxy: ManipulationProxy,
    pub note: String,
    pub threshold: f64,
    pub metrics: MetricsReport,
    /// Metrics for the same positives without re-embedding.
    pub non_adaptive: MetricsReport,
    pub negative_bitacc_mean: f64,
    pub positive_bitacc_mean: f64,
    pub positive_bitacc_median: f64,
}

/// The attacker reads a watermark off a defender-watermarked image with its
/// own decoder, manipulates the image with `proxy`, then re-embeds what it
/// read with its own encoder. Negatives are defender-watermarked images under
/// every grid op.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_attack_eval(
    defender: &ModelBundle<f32>,
    attacker: &ModelBundle<f32>,
    images: &[Image],
    watermarks: &[Watermark],
    proxy: ManipulationProxy,
    threshold: f64,
    repeats: usize,
    seed: u64,
) -> Result<AttackReport> {
    if images.len() < 2 {
        return Err(Error::Dataset("attack evaluation needs at least two images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let published = publish(defender, images, watermarks)?;
    let negatives: Vec<f64> = grid_bitaccs(defender, &published, watermarks, &full_grid())?
        .into_iter()
        .flatten()
        .collect();

    let stolen: Vec<Watermark> = attacker
        .extract_batch(&published)?
        .iter()
        .map(|l| l.harden())
        .collect::<Result<_>>()?;
    let mut manipulated = Vec::new();
    let mut resealed_marks = Vec::new();
    let mut truth = Vec::new();
    for r in 0..repeats.max(1) {
        for (i, im) in published.iter().enumerate() {
            manipulated.push(proxy.apply(im, donor(images, i, r), Some(attacker), &mut rng)?.quantized());
            resealed_marks.push(stolen[i].clone());
            truth.push(watermarks[i].clone());
        }
    }
    let non_adaptive = decode_bitaccs(defender, &manipulated, &truth)?;
    let resealed = publish(attacker, &manipulated, &resealed_marks)?;
    let positives = decode_bitaccs(defender, &resealed, &truth)?;

    let metrics = metrics_from_bitaccs(&negatives, &positives, threshold, &mut rng)?;
    let non_adaptive_metrics = metrics_from_bitaccs(&negatives, &non_adaptive, threshold, &mut rng)?;
    Ok(AttackReport {
        proxy,
        note: format!(
            "{PROXY_NOTE}; the proxy is applied between watermark extraction and re-embedding"
        ),
        threshold,
        metrics,
        non_adaptive: non_adaptive_metrics,
        negative_bitacc_mean: mean(&negatives),
        positive_bitacc_mean: mean(&positives),
        positive_bitacc_median: median(&positives),
    })
}

/// Calibrate on validation images, then test on held-out images with
/// `proxy` manipulations as positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEval {
    pub threshold: f64,
    pub calibration_fpr: f64,
    pub heldout_fpr: f64,
    pub metrics: MetricsReport,
    pub sweep: SweepReport,
}

pub fn evaluate_detector(
    models: &ModelBundle<f32>,
    config_hash: &str,
    val: &[Image],
    test: &[Image],
    proxy: ManipulationProxy,
    seed: u64,
) -> Result<DetectorEval> {
    let (threshold, cal_neg) = calibrate_on(models, val, seed, DEFAULT_FPR_BUDGET)?;
    let marks = random_watermarks(test.len(), models.arch.watermark_len, seed.wrapping_add(1));
    let sweep = robustness_sweep(models, test, &marks, Some(threshold), config_hash)?;
    let published = publish(models, test, &marks)?;
    let negatives: Vec<f64> = grid_bitaccs(models, &published, &marks, &full_grid())?
        .into_iter()
        .flatten()
        .collect();
    let probe = fragility_probe(models, test, &marks, proxy, Some(threshold), None, seed.wrapping_add(2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let metrics = metrics_from_bitaccs(&negatives, &probe.bitaccs, threshold, &mut rng)?;
    Ok(DetectorEval {
        threshold,
        calibration_fpr: false_positive_rate(&cal_neg, threshold),
        heldout_fpr: false_positive_rate(&negatives, threshold),
        metrics,
        sweep,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRl,
    NoJpeg,
    NoRlNoJpeg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRl, Variant::NoJpeg, Variant::NoRlNoJpeg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRl => "w.o. RL",
            Variant::NoJpeg => "w.o. JPEG",
            Variant::NoRlNoJpeg => "w.o. RL/JPEG",
        }
    }

    pub fn configure(self, base: &TrainingConfig, seed: u64) -> TrainingConfig {
        let (rl, jpeg) = match self {
            Variant::Full => (true, true),
            Variant::NoRl => (false, true),
            Variant::NoJpeg => (true, false),
            Variant::NoRlNoJpeg => (false, false),
        };
        TrainingConfig {
            scheduler: if rl { SchedulerKind::Rl } else { SchedulerKind::Random },
            jpeg_gradient: if jpeg { JpegGradient::Surrogate } else { JpegGradient::Zero },
            seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub acc: f64,
    pub threshold: f64,
    pub calibration_fpr: f64,
    pub heldout_fpr: f64,
    pub fnr: f64,
    pub clean_bitacc: f64,
    pub grid_bitacc: f64,
    pub jpeg_bitacc: f64,
    pub watermarked_ssim: f64,
    pub train: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub name: String,
    pub mean_acc: f64,
    pub mean_grid_bitacc: f64,
    pub mean_jpeg_bitacc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub proxy: ManipulationProxy,
    pub note: String,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary_for(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Trains every variant under every seed with matched budgets.
pub fn ablation_suite(
    train_set: &[Image],
    val: &[Image],
    test: &[Image],
    base: &TrainingConfig,
    seeds: &[u64],
    proxy: ManipulationProxy,
    progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    let trainer = |cfg: &TrainingConfig| {
        let out = train(train_set, val, cfg, None)?;
        Ok((out.best, out.report))
    };
    ablation_suite_with(val, test, base, seeds, proxy, trainer, progress)
}

/// [`ablation_suite`] with the training step supplied by the caller, which
/// must return best-on-validation parameters for the given config.
pub fn ablation_suite_with(
    val: &[Image],
    test: &[Image],
    base: &TrainingConfig,
    seeds: &[u64],
    proxy: ManipulationProxy,
    mut trainer: impl FnMut(&TrainingConfig) -> Result<(ModelBundle<f32>, TrainReport)>,
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for v in Variant::ALL {
            let cfg = v.configure(base, seed);
            let (best, report) = trainer(&cfg)?;
            let hash = cfg.hash();
            let ev = evaluate_detector(&best, &hash, val, test, proxy, seed)?;
            let run = AblationRun {
                variant: v,
                seed,
                config_hash: hash,
                acc: ev.metrics.acc()?,
                threshold: ev.threshold,
                calibration_fpr: ev.calibration_fpr,
                heldout_fpr: ev.heldout_fpr,
                fnr: ev.metrics.fnr.unwrap_or(f64::NAN),
                clean_bitacc: ev.sweep.rows[0].bitacc_mean,
                grid_bitacc: ev.sweep.grid_mean(),
                jpeg_bitacc: ev.sweep.family_mean(OpFamily::Jpeg),
                watermarked_ssim: ev.sweep.watermarked_ssim,
                train: report,
            };
            progress(&run);
            runs.push(run);
        }
    }
    let summary = Variant::ALL
        .iter()
        .map(|&v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let avg = |f: fn(&AblationRun) -> f64| mean(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            VariantSummary {
                variant: v,
                name: v.name().into(),
                mean_acc: avg(|r| r.acc),
                mean_grid_bitacc: avg(|r| r.grid_bitacc),
                mean_jpeg_bitacc: avg(|r| r.jpeg_bitacc),
            }
        })
        .collect();
    Ok(AblationReport {
        proxy,
        note: PROXY_NOTE.into(),
        runs,
        summary,
    })
}

/// Line plot of bit accuracy against JPEG quality, one polyline per curve.
pub fn jpeg_curve_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let sx = |q: f64| M + (q - 10.0) / 90.0 * (W - 2.0 * M);
    let sy = |a: f64| H - M - a * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = M,
        t = M,
        b = H - M,
        r = W - M
    );
    for q in (10..=100).step_by(10) {
        let x = sx(q as f64);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{q}</text>"#, H - M + 16.0);
    }
    for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = sy(a);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text>"#, M - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{M}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, W - M);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">JPEG quality</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">bitwise accuracy</text>"#, H / 2.0, H / 2.0);
    for (k, (label, pts)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(q, a)| format!("{:.1},{:.1}", sx(q), sy(a))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{label}</text>"#, M + 8.0, M + 14.0 * (k as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_set;
    use crate::models::ArchConfig;

    fn tiny() -> ModelBundle<f32> {
        ModelBundle::init(ArchConfig { width: 4, watermark_len: 30 }, 1)
    }

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0]), 1.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn region_replace_examples() {
        let a = Image::filled(10, 10, 0.2).unwrap();
        let b = Image::filled(10, 10, 0.9).unwrap();
        assert_eq!(region_replace(&a, &b, 0.0).unwrap(), a);
        assert_eq!(region_replace(&a, &b, 1.0).unwrap(), b);
        let half = region_replace(&a, &b, 0.6).unwrap();
        let replaced = half.data()[..100].iter().filter(|&&v| v == 0.9).count();
        assert_eq!(replaced, 36);
        assert_eq!(half.get(0, 2, 2), 0.9);
        assert_eq!(half.get(0, 1, 2), 0.2);
        assert!(region_replace(&a, &b, 1.5).is_err());
        assert!(region_replace(&a, &Image::filled(9, 10, 0.0).unwrap(), 0.5).is_err());
    }

    #[test]
    fn warp_of_zero_magnitude_is_identity() {
        let img = synthetic_set(1, 16, 4).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(piecewise_warp(&img, 0.0, &mut rng).unwrap(), img);
        let warped = piecewise_warp(&img, 3.0, &mut rng).unwrap();
        assert!(warped.mean_abs_diff(&img) > 1e-3);
        assert!(piecewise_warp(&img, -1.0, &mut rng).is_err());
    }

    #[test]
    fn foreign_reencode_needs_a_model() {
        let img = Image::filled(8, 8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ManipulationProxy::ForeignReencode.apply(&img, &img, None, &mut rng).is_err());
        let m = tiny();
        let out = ManipulationProxy::ForeignReencode.apply(&img, &img, Some(&m), &mut rng).unwrap();
        assert!(out.same_dims(&img));
    }

    #[test]
    fn sweep_covers_the_grid_and_identity_params_match() {
        let m = tiny();
        let images = synthetic_set(3, 32, 5);
        let marks = random_watermarks(3, 30, 1);
        let r = robustness_sweep(&m, &images, &marks, Some(0.9), "h").unwrap();
        assert_eq!(r.rows.len(), 35);
        for fam in OpFamily::ALL {
            let n = r.rows.iter().filter(|row| row.family == fam).count();
            assert_eq!(n, fam.grid().len());
        }
        let id = &r.rows[0];
        for op in [
            PostProcessOp::GaussianBlur { variance: 0.0 },
            PostProcessOp::Crop { size: 1.0 },
            PostProcessOp::Resize { ratio: 1.0 },
        ] {
            let row = r.row(&op).unwrap();
            assert_eq!(row.bitacc_mean, id.bitacc_mean);
            assert_eq!(row.ssim_mean, id.ssim_mean);
        }
        assert!(r.rows.iter().all(|row| (0.0..=1.0).contains(&row.detection_rate.unwrap())));
        assert!(r.watermarked_ssim <= 1.0);
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(&dir.path().join("s.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().count(), 36);
        assert!(text.lines().nth(2).unwrap().starts_with("jpeg(10),jpeg,10,"));
        let svg = jpeg_curve_svg(&[("model".into(), r.jpeg_curve())]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn region_replace_zero_changes_nothing() {
        let m = tiny();
        let images = synthetic_set(3, 16, 6);
        let marks = random_watermarks(3, 30, 2);
        let probe = fragility_probe(&m, &images, &marks, ManipulationProxy::RegionReplace { fraction: 0.0 }, None, None, 0).unwrap();
        let clean = decode_bitaccs(&m, &publish(&m, &images, &marks).unwrap(), &marks).unwrap();
        assert_eq!(probe.bitaccs, clean);
        assert!(probe.label.contains("proxy"));
    }

    #[test]
    fn attack_leaves_negatives_alone() {
        let m = tiny();
        let other = ModelBundle::init(ArchConfig { width: 4, watermark_len: 30 }, 2);
        let images = synthetic_set(4, 32, 7);
        let marks = random_watermarks(4, 30, 3);
        let proxy = ManipulationProxy::RegionReplace { fraction: 1.0 };
        let a = adaptive_attack_eval(&m, &other, &images, &marks, proxy, 0.8, 1, 0).unwrap();
        let b = adaptive_attack_eval(&m, &m, &images, &marks, proxy, 0.8, 1, 0).unwrap();
        assert_eq!(a.metrics.fpr, b.metrics.fpr);
        assert_eq!(a.negative_bitacc_mean, b.negative_bitacc_mean);
        assert_eq!(a.metrics.negatives, 4 * 35);
        assert_eq!(a.metrics.positives, 4);
    }

    #[test]
    fn variants_set_scheduler_and_codec_gradient() {
        let base = TrainingConfig::default();
        let c = Variant::NoRlNoJpeg.configure(&base, 3);
        assert_eq!((c.scheduler, c.jpeg_gradient, c.seed), (SchedulerKind::Random, JpegGradient::Zero, 3));
        let f = Variant::Full.configure(&base, 3);
        assert_eq!((f.scheduler, f.jpeg_gradient), (SchedulerKind::Rl, JpegGradient::Surrogate));
        assert_ne!(c.hash(), f.hash());
    }
}
