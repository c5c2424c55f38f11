//! Two-stage training loop: stage I learns per-modality reconstruction,
//! stage II adds the fusion layers.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    latest_checkpoint, load_checkpoint, load_pair, rng_from_state, rng_state, save_checkpoint, stage_dir,
    write_gray, CheckpointMeta, DatasetManifest, Modality, SamplePair, Split,
};
use crate::error::{CheckpointError, FuseError, Result};
use crate::losses::{
    decomposition_terms, scalar, ssim_index, stage1_total_loss, stage2_total_loss, LossVariant, LossWeights,
};
use crate::metrics::{evaluate_fusion, MetricReport};
use crate::network::{groups, FusionNet, NetworkSpec};
use crate::optim::Adam;
use crate::plane::Plane;

/// Seed offset separating the data stream from parameter initialization.
const DATA_STREAM: u64 = 0x5eed_da7a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    /// Optimizer steps per epoch. Defaults to one pass over the training pairs.
    pub steps_per_epoch: Option<usize>,
    pub loss_variant: LossVariant,
    /// When false, stage II starts from random parameters instead of a stage-I checkpoint.
    pub two_stage: bool,
    /// Keep the encoder fixed during stage II.
    pub freeze_encoder: bool,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Run validation at the end of every epoch.
    pub validate: bool,
    /// Continue from the newest checkpoint of the stage, if any.
    pub resume: bool,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub network: NetworkSpec,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 40,
            epochs_stage2: 80,
            batch_size: 16,
            patch_size: 128,
            lr_init: 1e-4,
            lr_decay: 0.5,
            decay_epochs: 20,
            steps_per_epoch: None,
            loss_variant: LossVariant::Division,
            two_stage: true,
            freeze_encoder: false,
            grad_clip: Some(1.0),
            validate: true,
            resume: false,
            seed: 0,
            manifest: None,
            network: NetworkSpec::default(),
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.patch_size == 0 || self.decay_epochs == 0 {
            return Err(FuseError::config("batch_size, patch_size and decay_epochs must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(FuseError::config("steps_per_epoch must be positive"));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay > 0.0) {
            return Err(FuseError::config("learning rate and decay must be positive"));
        }
        if self.patch_size < crate::losses::SSIM_WINDOW {
            return Err(FuseError::config(format!(
                "patch_size {} is smaller than the {}-pixel SSIM window",
                self.patch_size,
                crate::losses::SSIM_WINDOW
            )));
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr_init * lr_decay ^ floor(epoch / decay_epochs)`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_init * cfg.lr_decay.powi((epoch / cfg.decay_epochs) as i32)
}

/// Aligned crops of both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub a: Plane,
    pub b: Plane,
    pub x0: usize,
    pub y0: usize,
}

/// `n` crops of `size` x `size`, each taken at the same window in both
/// images, with offsets uniform over all valid positions.
pub fn sample_patches(pair: &SamplePair, n: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<PatchPair>> {
    let (w, h) = pair.lum_a.dims();
    if w < size || h < size {
        return Err(FuseError::Data(format!(
            "{} is {w}x{h}, smaller than the {size}x{size} patch",
            pair.path_a.display()
        )));
    }
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            Ok(PatchPair {
                a: pair.lum_a.crop(x0, y0, size, size)?,
                b: pair.lum_b.crop(x0, y0, size, size)?,
                x0,
                y0,
            })
        })
        .collect()
}

/// Training and validation pairs held in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub modality: Modality,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
}

impl TrainData {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let load = |split| -> Result<Vec<SamplePair>> { manifest.split(split).into_iter().map(load_pair).collect() };
        let data = Self {
            modality: manifest.modality,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        };
        if data.train.is_empty() {
            return Err(FuseError::Data(format!("{} has no train pairs", path.display())));
        }
        Ok(data)
    }

    fn check_patch(&self, size: usize) -> Result<()> {
        for p in &self.train {
            let (w, h) = p.lum_a.dims();
            if w < size || h < size {
                return Err(FuseError::Data(format!(
                    "{} is {w}x{h}, smaller than patch_size {size}",
                    p.path_a.display()
                )));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub terms: std::collections::BTreeMap<String, f64>,
    pub lr: f64,
    pub cc_base: f64,
    pub cc_detail: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub loss: f64,
    pub cc_base: f64,
    pub cc_detail: f64,
    /// Stage I: reconstruction SSIM of each modality.
    pub ssim_a: Option<f64>,
    pub ssim_b: Option<f64>,
    /// Stage II: mean fusion metrics.
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_cc_base: f64,
    pub mean_cc_detail: f64,
    pub mean_cc_detail_sq: f64,
    pub validation: Option<ValidationRecord>,
}

pub struct TrainOutcome {
    pub net: FusionNet,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

impl Stage {
    fn id(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

struct Losses {
    total: Tensor,
    terms: Vec<(&'static str, Tensor)>,
    cc_base: Tensor,
    cc_detail: Tensor,
}

fn forward_loss(net: &FusionNet, stage: Stage, a: &Tensor, b: &Tensor, cfg: &TrainConfig) -> Result<Losses> {
    match stage {
        Stage::One => {
            let out = net.reconstruct(a, b)?;
            let l = stage1_total_loss(
                a,
                &out.recon_a,
                b,
                &out.recon_b,
                &out.dec_a,
                &out.dec_b,
                &cfg.weights,
                cfg.loss_variant,
            )?;
            Ok(Losses {
                total: l.total,
                terms: vec![("recon_a", l.recon_a), ("recon_b", l.recon_b), ("decomp", l.decomp)],
                cc_base: l.cc_base,
                cc_detail: l.cc_detail,
            })
        }
        Stage::Two => {
            let out = net.fuse(a, b)?;
            let l = stage2_total_loss(&out.fused, a, b, &out.dec_a, &out.dec_b, &cfg.weights, cfg.loss_variant)?;
            Ok(Losses {
                total: l.total,
                terms: vec![("intensity", l.intensity), ("gradient", l.gradient), ("decomp", l.decomp)],
                cc_base: l.cc_base,
                cc_detail: l.cc_detail,
            })
        }
    }
}

fn trainable(stage: Stage, cfg: &TrainConfig) -> impl Fn(&str) -> bool {
    let freeze = stage == Stage::Two && cfg.freeze_encoder;
    move |name: &str| match stage {
        Stage::One => name.starts_with(groups::ENCODER) || name.starts_with(groups::DECODER),
        Stage::Two => !(freeze && name.starts_with(groups::ENCODER)),
    }
}

/// Training-loop state that survives across epochs.
struct Session<'a> {
    stage: Stage,
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    out: &'a Path,
    net: FusionNet,
    adam: Adam,
    rng: ChaCha8Rng,
    start_epoch: usize,
    global_step: u64,
    log: Option<BufWriter<File>>,
}

impl Session<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.data.train.len().div_ceil(self.cfg.batch_size))
            .max(1)
    }

    fn epochs(&self) -> usize {
        match self.stage {
            Stage::One => self.cfg.epochs_stage1,
            Stage::Two => self.cfg.epochs_stage2,
        }
    }

    /// Batch of `batch_size` aligned crops; pairs visited in a per-epoch shuffled order.
    fn batch(&mut self, order: &[usize], step: usize) -> Result<(Tensor, Tensor)> {
        let bs = self.cfg.batch_size;
        let mut patches = Vec::with_capacity(bs);
        for j in 0..bs {
            let pair = &self.data.train[order[(step * bs + j) % order.len()]];
            patches.extend(sample_patches(pair, 1, self.cfg.patch_size, &mut self.rng)?);
        }
        let a: Vec<&Plane> = patches.iter().map(|p| &p.a).collect();
        let b: Vec<&Plane> = patches.iter().map(|p| &p.b).collect();
        Ok((Plane::batch(&a, DType::F32)?, Plane::batch(&b, DType::F32)?))
    }

    fn dump_batch(&self, epoch: usize, a: &Tensor, b: &Tensor, terms: &[(String, f64)]) -> Result<PathBuf> {
        let dir = self
            .out
            .join("diagnostics")
            .join(format!("stage{}_step{}", self.stage.id(), self.global_step));
        std::fs::create_dir_all(&dir).map_err(|e| FuseError::io(&dir, e))?;
        for (tag, t) in [("a", a), ("b", b)] {
            for (i, p) in Plane::unbatch(t)?.iter().enumerate() {
                write_gray(&p.map(|v| if v.is_finite() { v } else { 0.0 }), &dir.join(format!("{tag}_{i}.png")))?;
            }
        }
        let report = serde_json::json!({
            "stage": self.stage.id(),
            "epoch": epoch,
            "step": self.global_step,
            "terms": terms.iter().map(|(k, v)| (k.clone(), if v.is_finite() { serde_json::json!(v) } else { serde_json::json!(v.to_string()) })).collect::<serde_json::Map<_, _>>(),
        });
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("json")).map_err(|e| FuseError::io(&path, e))?;
        Ok(dir)
    }

    fn write_log(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| FuseError::io(self.out.join("train_log.jsonl"), e))?;
        }
        Ok(())
    }

    fn run_epoch(&mut self, epoch: usize, steps: &mut Vec<StepRecord>) -> Result<EpochRecord> {
        let lr = lr_at_epoch(epoch, self.cfg);
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let n_steps = self.steps_per_epoch();
        let (mut sum_loss, mut sum_cb, mut sum_cd, mut sum_cd2) = (0.0, 0.0, 0.0, 0.0);
        let filter = trainable(self.stage, self.cfg);
        for s in 0..n_steps {
            let (a, b) = self.batch(&order, s)?;
            let losses = forward_loss(&self.net, self.stage, &a, &b, self.cfg)?;
            let total = scalar(&losses.total)?;
            let mut terms: Vec<(String, f64)> = losses
                .terms
                .iter()
                .map(|(k, t)| Ok((k.to_string(), scalar(t)?)))
                .collect::<Result<_>>()?;
            let cc_base = scalar(&losses.cc_base)?;
            let cc_detail = scalar(&losses.cc_detail)?;
            if !total.is_finite() {
                terms.push(("total".into(), total));
                terms.push(("cc_base".into(), cc_base));
                terms.push(("cc_detail".into(), cc_detail));
                let dir = self.dump_batch(epoch, &a, &b, &terms)?;
                return Err(FuseError::NonFinite(format!(
                    "stage {} loss became {total} at epoch {epoch}, step {}; batch dumped to {}",
                    self.stage.id(),
                    self.global_step,
                    dir.display()
                )));
            }
            let grads = losses.total.backward()?;
            let info = self.adam.step(self.net.store(), &grads, lr, &filter)?;
            self.global_step += 1;
            let rec = StepRecord {
                stage: self.stage.id(),
                epoch,
                step: self.global_step,
                total,
                terms: terms.into_iter().collect(),
                lr,
                cc_base,
                cc_detail,
                grad_norm: info.grad_norm,
            };
            self.write_log(&rec)?;
            steps.push(rec);
            sum_loss += total;
            sum_cb += cc_base;
            sum_cd += cc_detail;
            sum_cd2 += cc_detail * cc_detail;
        }
        let n = n_steps as f64;
        let validation = if self.cfg.validate && !self.data.val.is_empty() {
            Some(validate(&self.net, self.stage, &self.data.val, self.cfg, self.data.modality, self.out, epoch)?)
        } else {
            None
        };
        Ok(EpochRecord {
            stage: self.stage.id(),
            epoch,
            lr,
            mean_loss: sum_loss / n,
            mean_cc_base: sum_cb / n,
            mean_cc_detail: sum_cd / n,
            mean_cc_detail_sq: sum_cd2 / n,
            validation,
        })
    }

    fn save(&self, epoch: usize) -> Result<PathBuf> {
        let mut meta = CheckpointMeta::from_net(&self.net, self.stage.id(), epoch + 1)?;
        meta.global_step = self.global_step;
        meta.train_config = serde_json::to_value(self.cfg).expect("config serializes");
        meta.optimizer = Some(self.adam.state()?);
        meta.rng = Some(rng_state(&self.rng));
        let dir = stage_dir(&self.out.join("ckpt"), self.stage.id(), epoch + 1);
        save_checkpoint(&meta, &dir)?;
        Ok(dir)
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut steps = Vec::new();
        let mut last = None;
        let epochs = self.epochs();
        for epoch in self.start_epoch..epochs {
            let rec = self.run_epoch(epoch, &mut steps)?;
            log::info!(
                "stage {} epoch {}/{}: loss {:.5} cc_base {:.4} cc_detail {:.4}",
                self.stage.id(),
                epoch + 1,
                epochs,
                rec.mean_loss,
                rec.mean_cc_base,
                rec.mean_cc_detail
            );
            if let Some(log) = self.log.as_mut() {
                let line = serde_json::to_string(&serde_json::json!({ "epoch_summary": &rec })).expect("json");
                writeln!(log, "{line}").map_err(|e| FuseError::io(self.out.join("train_log.jsonl"), e))?;
                log.flush().map_err(|e| FuseError::io(self.out.join("train_log.jsonl"), e))?;
            }
            history.push(rec);
            last = Some(self.save(epoch)?);
        }
        let checkpoint = match last {
            Some(p) => p,
            None => latest_checkpoint(&self.out.join("ckpt"), self.stage.id())
                .map(|(_, p)| p)
                .ok_or_else(|| FuseError::config("no epochs to run and no checkpoint to report"))?,
        };
        Ok(TrainOutcome {
            net: self.net,
            checkpoint,
            history,
            steps,
        })
    }
}

fn validate(
    net: &FusionNet,
    stage: Stage,
    pairs: &[SamplePair],
    cfg: &TrainConfig,
    modality: Modality,
    out: &Path,
    epoch: usize,
) -> Result<ValidationRecord> {
    let n = pairs.len() as f64;
    let (mut loss, mut cb, mut cd, mut sa, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut reports = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let a = p.lum_a.to_tensor(DType::F32)?;
        let b = p.lum_b.to_tensor(DType::F32)?;
        match stage {
            Stage::One => {
                let r = net.reconstruct(&a, &b)?;
                let l = stage1_total_loss(&a, &r.recon_a, &b, &r.recon_b, &r.dec_a, &r.dec_b, &cfg.weights, cfg.loss_variant)?;
                loss += scalar(&l.total)?;
                cb += scalar(&l.cc_base)?;
                cd += scalar(&l.cc_detail)?;
                sa += scalar(&ssim_index(&a, &r.recon_a)?)?;
                sb += scalar(&ssim_index(&b, &r.recon_b)?)?;
            }
            Stage::Two => {
                let r = net.fuse(&a, &b)?;
                let l = stage2_total_loss(&r.fused, &a, &b, &r.dec_a, &r.dec_b, &cfg.weights, cfg.loss_variant)?;
                let d = decomposition_terms(&r.dec_a, &r.dec_b, &cfg.weights, cfg.loss_variant)?;
                loss += scalar(&l.total)?;
                cb += scalar(&d.cc_base)?;
                cd += scalar(&d.cc_detail)?;
                let fused = Plane::unbatch(&r.fused)?.remove(0);
                reports.push(evaluate_fusion(&fused, &p.lum_a, &p.lum_b)?);
                if i == 0 {
                    let preview = out.join("previews").join(format!("stage2_epoch_{}.png", epoch + 1));
                    let (_, chroma) = p.chroma_for(modality);
                    crate::data_io::write_fused(&fused, chroma, &preview)?;
                }
            }
        }
    }
    Ok(match stage {
        Stage::One => ValidationRecord {
            loss: loss / n,
            cc_base: cb / n,
            cc_detail: cd / n,
            ssim_a: Some(sa / n),
            ssim_b: Some(sb / n),
            metrics: None,
        },
        Stage::Two => ValidationRecord {
            loss: loss / n,
            cc_base: cb / n,
            cc_detail: cd / n,
            ssim_a: None,
            ssim_b: None,
            metrics: Some(MetricReport::mean(&reports)),
        },
    })
}

fn open_log(out: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out).map_err(|e| FuseError::io(out, e))?;
    let path = out.join("train_log.jsonl");
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| FuseError::io(&path, e))?;
    Ok(BufWriter::new(f))
}

/// Loads the newest checkpoint of `stage` under `out/ckpt` into a session.
fn resume_from(stage: Stage, out: &Path, net: &FusionNet, adam: &mut Adam) -> Result<Option<(usize, u64, ChaCha8Rng)>> {
    let Some((_, dir)) = latest_checkpoint(&out.join("ckpt"), stage.id()) else {
        return Ok(None);
    };
    let meta = load_checkpoint(&dir)?;
    meta.apply_to(net)?;
    if let Some(opt) = &meta.optimizer {
        adam.restore(opt, net.store())?;
    }
    let rng = match &meta.rng {
        Some(state) => rng_from_state(state)?,
        None => return Err(CheckpointError::Malformed(format!("{} lacks rng state", dir.display())).into()),
    };
    log::info!("resuming stage {} after epoch {}", stage.id(), meta.epoch);
    Ok(Some((meta.epoch, meta.global_step, rng)))
}

fn session<'a>(
    stage: Stage,
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    out: &'a Path,
    net: FusionNet,
) -> Result<Session<'a>> {
    let mut adam = Adam::new(cfg.grad_clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    // distinct data streams per stage
    rng.set_stream(stage.id() as u64);
    let (mut start_epoch, mut global_step) = (0, 0);
    if cfg.resume {
        if let Some((epoch, step, restored)) = resume_from(stage, out, &net, &mut adam)? {
            start_epoch = epoch;
            global_step = step;
            rng = restored;
        }
    }
    Ok(Session {
        stage,
        cfg,
        data,
        out,
        net,
        adam,
        rng,
        start_epoch,
        global_step,
        log: Some(open_log(out)?),
    })
}

/// Stage I: encoder and decoder trained to reconstruct each modality.
/// Checkpoints go to `out/ckpt/stage1/epoch_{N}`, step records to
/// `out/train_log.jsonl`.
pub fn run_stage1(cfg: &TrainConfig, data: &TrainData, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_patch(cfg.patch_size)?;
    let net = FusionNet::new(&cfg.network, DType::F32, cfg.seed)?;
    session(Stage::One, cfg, data, out, net)?.run()
}

/// Stage II: the whole network including fusion layers, trained on the
/// fused-image objective. With `two_stage` the parameters start from
/// `stage1_ckpt`, whose config hash must match `cfg.network`; otherwise they
/// start from random initialization.
pub fn run_stage2(cfg: &TrainConfig, data: &TrainData, out: &Path, stage1_ckpt: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_patch(cfg.patch_size)?;
    let net = FusionNet::new(&cfg.network, DType::F32, cfg.seed)?;
    if cfg.two_stage {
        let path = stage1_ckpt.ok_or_else(|| FuseError::config("two-stage training needs a stage-1 checkpoint"))?;
        let meta = load_checkpoint(path)?;
        let expected = cfg.network.config_hash();
        if meta.config_hash != expected {
            return Err(CheckpointError::HashMismatch {
                expected,
                found: meta.config_hash,
            }
            .into());
        }
        meta.apply_to(&net)?;
    } else if stage1_ckpt.is_some() {
        log::warn!("two_stage is off; ignoring the stage-1 checkpoint and starting from random parameters");
    }
    session(Stage::Two, cfg, data, out, net)?.run()
}
