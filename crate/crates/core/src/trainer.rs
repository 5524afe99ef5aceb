//! Joint training of encoder, decoder and discriminator with a scheduled
//! post-processing stage between encoder and decoder.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::jpeg::JpegGradient;
use crate::models::{logistic, ArchConfig, Checkpoint, ModelBundle, Watermark};
use crate::nn::{Adam, HasTensors, Scalar, Tensor};
use crate::postprocess::{apply_batch, full_grid, OpFamily, PostProcessOp};
use crate::scheduler::{Scheduler, SchedulerConfig, SchedulerKind, StepRecord};
use crate::util::json_hash;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Passes over the training set.
    pub epochs: u64,
    /// Optional cap on optimizer steps; the cosine schedule spans
    /// `min(epochs * batches_per_epoch, max_steps)`.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub watermark_len: usize,
    /// Hidden channel count of every convolution.
    pub width: usize,
    pub lr_initial: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub scheduler: SchedulerKind,
    pub scheduler_config: SchedulerConfig,
    pub jpeg_gradient: JpegGradient,
    pub seed: u64,
    /// Side length training images are expected to have.
    pub image_size: usize,
    /// Validate every this many steps (0 = only at the end).
    pub validate_every: u64,
    /// Number of validation images used for model selection.
    pub val_images: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 40_000,
            max_steps: None,
            batch_size: 30,
            watermark_len: 30,
            width: 64,
            lr_initial: 0.001,
            lambda1: 0.7,
            lambda2: 0.001,
            scheduler: SchedulerKind::Rl,
            scheduler_config: SchedulerConfig::default(),
            jpeg_gradient: JpegGradient::Surrogate,
            seed: 0,
            image_size: 64,
            validate_every: 0,
            val_images: 32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ParamDomain(m));
        if self.batch_size == 0 || self.watermark_len == 0 || self.width == 0 {
            return bad("batch_size, watermark_len and width must be >= 1".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("lambdas must be >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        for op in crate::postprocess::full_grid() {
            if let Err(e) = op.output_dims(self.image_size, self.image_size) {
                return bad(format!("image_size {} cannot take every grid op: {e}", self.image_size));
            }
        }
        self.scheduler_config.validate()
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            width: self.width,
            watermark_len: self.watermark_len,
        }
    }

    /// Short stable hash identifying this configuration.
    pub fn hash(&self) -> String {
        json_hash(self)
    }

    pub fn total_steps(&self, n_train: usize) -> u64 {
        let per_epoch = (n_train / self.batch_size).max(1) as u64;
        let t = self.epochs.saturating_mul(per_epoch);
        self.max_steps.map_or(t, |m| m.min(t))
    }
}

/// Cosine annealing from `lr` at step 0 to 0 at step `total`.
pub fn lr_at(step: u64, total: u64, lr: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    (lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub pixel: f64,
    pub adversarial: f64,
    pub total: f64,
    pub discriminator: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.reconstruction,
            self.pixel,
            self.adversarial,
            self.total,
            self.discriminator,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn mean_sq_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64
}

/// Encoder/decoder objective: mean squared logit error, plus `lambda1`
/// times mean squared pixel error, plus `lambda2` times the batch mean of
/// `log(1 - D(I_w))`.
pub fn loss_encdec<T: Scalar>(
    image: &[T],
    watermarked: &[T],
    bits: &[T],
    logits: &[T],
    d_prob: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> LossBreakdown {
    let reconstruction = mean_sq_diff(logits, bits);
    let pixel = mean_sq_diff(watermarked, image);
    let adversarial = if d_prob.is_empty() {
        0.0
    } else {
        d_prob.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / d_prob.len() as f64
    };
    LossBreakdown {
        reconstruction,
        pixel,
        adversarial,
        total: reconstruction + lambda1 * pixel + lambda2 * adversarial,
        discriminator: 0.0,
    }
}

/// `mean(log(1 - D(I))) + mean(log(D(I_w)))`.
pub fn loss_discriminator(d_real: &[f64], d_wm: &[f64]) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / v.len().max(1) as f64;
    mean(d_real, &|p| (1.0 - p).ln()) + mean(d_wm, &|p| p.ln())
}

/// d/dz of `log(1 - logistic(z))` or `log(logistic(z))`, zero where the
/// probability was clamped.
fn log_prob_grad(p: f64, complement: bool) -> f64 {
    if p < PROB_EPS || p > 1.0 - PROB_EPS {
        0.0
    } else if complement {
        -p
    } else {
        1.0 - p
    }
}

/// Fraction of hardened logits matching their target bits.
pub fn logit_bitacc<T: Scalar>(logits: &[T], bits: &[T]) -> f64 {
    let hits = logits
        .iter()
        .zip(bits)
        .filter(|(l, b)| (l.as_f64() >= 0.5) == (b.as_f64() >= 0.5))
        .count();
    hits as f64 / logits.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub encoder: Adam<T>,
    pub decoder: Adam<T>,
    pub discriminator: Adam<T>,
}

impl<T: Scalar> Default for Optimizers<T> {
    fn default() -> Self {
        Self {
            encoder: Adam::default(),
            decoder: Adam::default(),
            discriminator: Adam::default(),
        }
    }
}

/// Loss and gradients of the encoder/decoder objective for one batch.
pub struct EncDecPass<T> {
    pub losses: LossBreakdown,
    pub watermarked: Tensor<T>,
    pub logits: Vec<T>,
    pub encoder_grads: ModelBundle<T>,
    /// False when the post-processing stage passes no gradient back.
    pub encoder_has_gradient: bool,
}

/// Forward and backward pass of the encoder/decoder objective. The
/// discriminator runs in training mode on a copy, so its parameters and
/// running statistics are untouched. Only the encoder and decoder parts of
/// `encoder_grads` are filled.
pub fn encdec_pass<T: Scalar>(
    models: &mut ModelBundle<T>,
    images: &Tensor<T>,
    bits: &[T],
    op: &PostProcessOp,
    lambda1: f64,
    lambda2: f64,
    jpeg_gradient: JpegGradient,
) -> Result<EncDecPass<T>> {
    let n = images.batch;
    let mut grads = models.zeroed();

    let (watermarked, enc_trace) = models.encoder.forward_train(images, bits);
    let (processed, pullback) = apply_batch(&watermarked, op)?;
    let (logits, dec_trace) = models.decoder.forward_train(&processed);

    let use_adv = lambda2 > 0.0;
    let mut disc = models.discriminator.clone();
    let (d_prob, disc_trace) = if use_adv {
        let (scores, trace) = disc.forward_train(&watermarked);
        let p: Vec<f64> = scores.iter().map(|z| logistic(z.as_f64())).collect();
        (p, Some(trace))
    } else {
        (Vec::new(), None)
    };

    let losses = loss_encdec(
        &images.data,
        &watermarked.data,
        bits,
        &logits,
        &d_prob,
        lambda1,
        lambda2,
    );

    let scale = 2.0 / logits.len() as f64;
    let g_logits: Vec<T> = logits
        .iter()
        .zip(bits)
        .map(|(l, b)| T::from_f64_lossy(scale * (l.as_f64() - b.as_f64())))
        .collect();
    let g_processed = models
        .decoder
        .backward(&processed, &dec_trace, &g_logits, &mut grads.decoder, true)
        .expect("input gradient requested");

    let blocked = pullback.blocks_gradient(jpeg_gradient);
    if !blocked {
        let mut g_wm = pullback.backward(&g_processed, jpeg_gradient);
        let pix_scale = lambda1 * 2.0 / images.data.len() as f64;
        for ((g, w), x) in g_wm.data.iter_mut().zip(&watermarked.data).zip(&images.data) {
            *g = *g + T::from_f64_lossy(pix_scale * (w.as_f64() - x.as_f64()));
        }
        if let Some(trace) = disc_trace {
            let g_scores: Vec<T> = d_prob
                .iter()
                .map(|&p| T::from_f64_lossy(lambda2 * log_prob_grad(p, true) / n as f64))
                .collect();
            let mut scratch = disc.zeroed();
            let g_disc_in = disc
                .backward(&watermarked, &trace, &g_scores, &mut scratch, true)
                .expect("input gradient requested");
            for (g, d) in g_wm.data.iter_mut().zip(&g_disc_in.data) {
                *g = *g + *d;
            }
        }
        models
            .encoder
            .backward(images, &enc_trace, &g_wm, &mut grads.encoder);
    }

    Ok(EncDecPass {
        losses,
        watermarked,
        logits,
        encoder_grads: grads,
        encoder_has_gradient: !blocked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Mean bitwise accuracy of the batch's decoded watermarks.
    pub bitacc: f64,
    pub encoder_updated: bool,
}

/// Result of the encoder/decoder half of a step.
pub struct EncDecUpdate<T> {
    pub losses: LossBreakdown,
    pub watermarked: Tensor<T>,
    pub logits: Vec<T>,
    pub encoder_updated: bool,
}

/// Encoder/decoder optimizer step with the discriminator frozen. With a
/// gradient-blocking JPEG stage the encoder step is skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn encdec_update<T: Scalar>(
    models: &mut ModelBundle<T>,
    opt: &mut Optimizers<T>,
    images: &Tensor<T>,
    bits: &[T],
    op: &PostProcessOp,
    cfg: &TrainingConfig,
    lr: f64,
    step: u64,
) -> Result<EncDecUpdate<T>> {
    let pass = encdec_pass(
        models,
        images,
        bits,
        op,
        cfg.lambda1,
        cfg.lambda2,
        cfg.jpeg_gradient,
    )?;
    if !pass.losses.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("encoder/decoder loss {:?} under {op}", pass.losses),
        });
    }
    let grads = pass.encoder_grads;
    if pass.encoder_has_gradient {
        opt.encoder.step(&mut models.encoder, &grads.encoder, lr);
    }
    opt.decoder.step(&mut models.decoder, &grads.decoder, lr);
    Ok(EncDecUpdate {
        losses: pass.losses,
        watermarked: pass.watermarked,
        logits: pass.logits,
        encoder_updated: pass.encoder_has_gradient,
    })
}

/// Discriminator optimizer step on real and (detached) watermarked images;
/// returns the discriminator loss before the step.
pub fn discriminator_update<T: Scalar>(
    models: &mut ModelBundle<T>,
    opt: &mut Optimizers<T>,
    images: &Tensor<T>,
    watermarked: &Tensor<T>,
    lr: f64,
    step: u64,
) -> Result<f64> {
    let n = images.batch as f64;
    let mut dgrads = models.discriminator.zeroed();
    let (real_scores, real_trace) = models.discriminator.forward_train(images);
    let (wm_scores, wm_trace) = models.discriminator.forward_train(watermarked);
    let p_real: Vec<f64> = real_scores.iter().map(|z| logistic(z.as_f64())).collect();
    let p_wm: Vec<f64> = wm_scores.iter().map(|z| logistic(z.as_f64())).collect();
    let loss = loss_discriminator(&p_real, &p_wm);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("discriminator loss {loss}"),
        });
    }
    let g_real: Vec<T> = p_real
        .iter()
        .map(|&p| T::from_f64_lossy(log_prob_grad(p, true) / n))
        .collect();
    let g_wm: Vec<T> = p_wm
        .iter()
        .map(|&p| T::from_f64_lossy(log_prob_grad(p, false) / n))
        .collect();
    models
        .discriminator
        .backward(images, &real_trace, &g_real, &mut dgrads, false);
    models
        .discriminator
        .backward(watermarked, &wm_trace, &g_wm, &mut dgrads, false);
    opt.discriminator.step(&mut models.discriminator, &dgrads, lr);
    Ok(loss)
}

/// One alternating update: encoder and decoder first, then the
/// discriminator.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    models: &mut ModelBundle<T>,
    opt: &mut Optimizers<T>,
    images: &Tensor<T>,
    bits: &[T],
    op: &PostProcessOp,
    cfg: &TrainingConfig,
    lr: f64,
    step: u64,
) -> Result<StepOutcome> {
    let ed = encdec_update(models, opt, images, bits, op, cfg, lr, step)?;
    let mut losses = ed.losses;
    losses.discriminator = discriminator_update(models, opt, images, &ed.watermarked, lr, step)?;

    let bad = models.tensors().into_iter().find(|t| t.data.iter().any(|v| !v.is_finite()));
    if let Some(t) = bad {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite values in {}", t.name),
        });
    }
    Ok(StepOutcome {
        losses,
        bitacc: logit_bitacc(&ed.logits, bits),
        encoder_updated: ed.encoder_updated,
    })
}

/// Watermarks, then post-processes and decodes `images` under every op,
/// returning the mean bitwise accuracy per op.
pub fn grid_bitacc(
    models: &ModelBundle<f32>,
    images: &[Image],
    watermarks: &[Watermark],
    ops: &[PostProcessOp],
) -> Result<Vec<f64>> {
    let marked = models.embed_batch(images, watermarks)?;
    ops.iter()
        .map(|op| {
            let processed = marked
                .iter()
                .map(|im| crate::postprocess::apply_post_process(im, op))
                .collect::<Result<Vec<_>>>()?;
            let logits = models.extract_batch(&processed)?;
            let mut total = 0.0;
            for (l, w) in logits.iter().zip(watermarks) {
                let bits: Vec<f32> = w.as_targets();
                total += logit_bitacc(&l.values, &bits);
            }
            Ok(total / images.len().max(1) as f64)
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub op: PostProcessOp,
    pub family: OpFamily,
    pub losses: LossBreakdown,
    pub bitacc: f64,
    pub encoder_updated: bool,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub steps: u64,
    pub epochs_completed: u64,
    pub best_step: u64,
    pub best_validation_bitacc: f64,
    pub final_losses: LossBreakdown,
    /// Steps spent under each op family, in family order.
    pub family_counts: Vec<u64>,
    pub final_q_table: Vec<Vec<f64>>,
}

/// Where the training loop writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub dir: PathBuf,
}

impl TrainArtifacts {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
    pub fn scheduler_path(&self) -> PathBuf {
        self.dir.join("scheduler_trace.jsonl")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn report_path(&self) -> PathBuf {
        self.dir.join("train_report.json")
    }
    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.json")
    }
}

pub struct TrainOutput {
    /// Best-on-validation parameters.
    pub best: ModelBundle<f32>,
    pub last: ModelBundle<f32>,
    pub report: TrainReport,
}

struct JsonLines(Option<BufWriter<File>>);

impl JsonLines {
    fn create(path: Option<PathBuf>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Some(BufWriter::new(File::create(p)?)),
            None => None,
        }))
    }

    fn push<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

/// Independent deterministic streams derived from the run seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_WATERMARKS: u64 = 2;
const STREAM_SCHEDULER: u64 = 3;
const STREAM_OP_PARAMS: u64 = 4;
const STREAM_VALIDATION: u64 = 5;

/// Runs the training loop on same-sized images.
pub fn train(
    train_images: &[Image],
    val_images: &[Image],
    cfg: &TrainingConfig,
    artifacts: Option<&TrainArtifacts>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    if let Some(bad) = train_images
        .iter()
        .chain(val_images)
        .find(|im| im.height() != cfg.image_size || im.width() != cfg.image_size)
    {
        return Err(Error::Dataset(format!(
            "image of {}x{} in a {}x{} training run",
            bad.height(),
            bad.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    let hash = cfg.hash();
    if let Some(a) = artifacts {
        std::fs::create_dir_all(&a.dir)?;
        crate::util::write_json(&a.config_path(), cfg)?;
    }
    let mut log = JsonLines::create(artifacts.map(|a| a.log_path()))?;
    let mut trace = JsonLines::create(artifacts.map(|a| a.scheduler_path()))?;

    let mut models = ModelBundle::<f32>::init(cfg.arch(), cfg.seed);
    let mut opt = Optimizers::default();
    let mut scheduler = Scheduler::new(cfg.scheduler, cfg.scheduler_config.clone())?;

    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut wm_rng = stream(cfg.seed, STREAM_WATERMARKS);
    let mut sched_rng = stream(cfg.seed, STREAM_SCHEDULER);
    let mut op_rng = stream(cfg.seed, STREAM_OP_PARAMS);

    let val_set: Vec<Image> = val_images.iter().take(cfg.val_images).cloned().collect();
    let val_marks: Vec<Watermark> = {
        let mut rng = stream(cfg.seed, STREAM_VALIDATION);
        val_set
            .iter()
            .map(|_| Watermark::random(&mut rng, cfg.watermark_len))
            .collect()
    };
    let grid = full_grid();
    let validate = |m: &ModelBundle<f32>| -> Result<f64> {
        if val_set.is_empty() {
            return Ok(f64::NAN);
        }
        let accs = grid_bitacc(m, &val_set, &val_marks, &grid)?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    };

    let total = cfg.total_steps(train_images.len());
    let batch = cfg.batch_size.min(train_images.len());
    let per_epoch = (train_images.len() / batch).max(1);
    let mut order: Vec<usize> = (0..train_images.len()).collect();

    let mut best = models.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_step = 0;
    let mut family_counts = vec![0u64; OpFamily::ALL.len()];
    let mut last_losses = LossBreakdown::default();
    let mut step = 0u64;
    let mut epoch = 0u64;

    'outer: while step < total {
        order.shuffle(&mut data_rng);
        for b in 0..per_epoch {
            if step >= total {
                break 'outer;
            }
            let idx = &order[b * batch..(b + 1) * batch];
            let imgs: Vec<Image> = idx.iter().map(|&i| train_images[i].clone()).collect();
            let x = Image::batch_tensor::<f32>(&imgs)?;
            let bits: Vec<f32> = (0..batch)
                .flat_map(|_| Watermark::random(&mut wm_rng, cfg.watermark_len).as_targets())
                .collect();
            let family = scheduler.choose(&mut sched_rng);
            let op = family.sample(&mut op_rng);
            let lr = lr_at(step, total, cfg.lr_initial);

            let outcome = match train_step(&mut models, &mut opt, &x, &bits, &op, cfg, lr, step) {
                Ok(o) => o,
                Err(e) => {
                    if let Some(a) = artifacts {
                        let snapshot = serde_json::json!({
                            "step": step, "epoch": epoch, "op": op, "lr": lr,
                            "error": e.to_string(), "last_losses": last_losses,
                        });
                        crate::util::write_json(&a.dir.join("divergence.json"), &snapshot)?;
                    }
                    return Err(e);
                }
            };
            let rec: StepRecord = scheduler.observe(outcome.bitacc)?;
            trace.push(&rec)?;
            family_counts[family.index()] += 1;
            last_losses = outcome.losses;
            step += 1;

            let mut validation = None;
            let at_end = step == total;
            if at_end || (cfg.validate_every > 0 && step % cfg.validate_every == 0) {
                let v = validate(&models)?;
                validation = Some(v);
                if v > best_val || best_val == f64::NEG_INFINITY || v.is_nan() {
                    best_val = v;
                    best_step = step;
                    best = models.clone();
                    if let Some(a) = artifacts {
                        Checkpoint::new(best.clone(), hash.clone()).save(&a.best_checkpoint())?;
                    }
                }
            }
            log.push(&TrainLogRecord {
                step: step - 1,
                epoch,
                lr,
                op,
                family,
                losses: outcome.losses,
                bitacc: outcome.bitacc,
                encoder_updated: outcome.encoder_updated,
                epsilon: rec.epsilon,
                validation,
            })?;
        }
        epoch += 1;
        scheduler.end_epoch(epoch);
    }
    log.finish()?;
    trace.finish()?;

    let report = TrainReport {
        config_hash: hash.clone(),
        steps: step,
        epochs_completed: epoch,
        best_step,
        best_validation_bitacc: best_val,
        final_losses: last_losses,
        family_counts,
        final_q_table: scheduler.q.rows(),
    };
    if let Some(a) = artifacts {
        Checkpoint::new(models.clone(), hash).save(&a.last_checkpoint())?;
        crate::util::write_json(&a.report_path(), &report)?;
    }
    Ok(TrainOutput {
        best,
        last: models,
        report,
    })
}

/// Reads a JSON training config; missing fields take their defaults.
pub fn load_config(path: &Path) -> Result<TrainingConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainingConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
