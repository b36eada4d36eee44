//! The staged pipeline: ingest, train-ae, pretrain-dm, finetune-dp, sample, eval.
//!
//! Every stage reads its inputs from the run's output directory, writes its
//! artifacts atomically and records line-delimited metrics next to them.

use crate::accountant::{calibrate_sigma, PrivacyLedger};
use crate::autoencoder::{train_autoencoder, Autoencoder};
use crate::checkpoint::{
    autoencoder_section, diffusion_section, load_autoencoder, load_diffusion, stats_section, write_atomic, Checkpoint,
    Section, SectionKind,
};
use crate::config::RunConfig;
use crate::data::{ingest, synthetic_shapes, Dataset, Domain};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::{ddpm_sample, pretrain, DiffusionModel, PretrainConfig};
use crate::dp::{trainable_fraction, DpConfig, DpTrainer};
use crate::error::{bail, Error, Result};
use crate::fid::{dp_fid, fid, train_eval_classifier, ClassifierConfig, DpFidOptions, FeatureExtractor, FeatureStats, FidBudget, Neighboring};
use crate::rng::{stream, Purpose};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const PUBLIC: &str = "public.dsa";
pub const PRIVATE: &str = "private.dsa";
pub const TEST: &str = "test.dsa";
pub const AUTOENCODER: &str = "autoencoder.ckpt";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const FINETUNED: &str = "finetuned.ckpt";
pub const PARTIAL: &str = "finetune.partial.ckpt";
/// Seed of the fixed feature network shared by every FID in every run.
pub const EXTRACTOR_SEED: u64 = 0x5EED_F1D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalKind {
    Fid,
    DpFid,
    Classifier,
}

impl FromStr for EvalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fid" => Self::Fid,
            "dpfid" => Self::DpFid,
            "classifier" => Self::Classifier,
            _ => bail!(Config, "unknown evaluation {s}"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    TrainAe,
    PretrainDm,
    FinetuneDp,
    Sample,
    Eval(EvalKind),
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::TrainAe => "train-ae",
            Stage::PretrainDm => "pretrain-dm",
            Stage::FinetuneDp => "finetune-dp",
            Stage::Sample => "sample",
            Stage::Eval(EvalKind::Fid) => "eval-fid",
            Stage::Eval(EvalKind::DpFid) => "eval-dpfid",
            Stage::Eval(EvalKind::Classifier) => "eval-classifier",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StageOptions {
    /// Continue fine-tuning from the partial checkpoint if one exists.
    pub resume: bool,
    /// Stop fine-tuning once the ledger reaches this many steps, leaving a
    /// partial checkpoint behind.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
}

/// Exclusive hold on an output directory for the duration of a stage.
pub struct StageLock {
    path: PathBuf,
}

impl StageLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(State, "{} is locked by another stage", dir.display())
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_metrics(cfg: &RunConfig, stage: Stage, records: &[Value]) -> Result<PathBuf> {
    let path = cfg.path(&format!("{}.metrics.jsonl", stage.name()));
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if !path.exists() {
        bail!(Config, "missing prerequisite {}; run the earlier stage first", path.display());
    }
    Ok(path)
}

fn with_config(mut s: Section, cfg: &RunConfig) -> Section {
    s.meta.insert("config".into(), cfg.to_toml());
    s
}

/// Samples file written by the sample stage for `source`.
pub fn samples_file(source: &str) -> String {
    format!("samples-{source}.dsa")
}

/// Run one stage under the output-directory lock.
pub fn run_stage(cfg: &RunConfig, stage: Stage, opts: &StageOptions) -> Result<StageOutput> {
    cfg.validate()?;
    let _lock = StageLock::acquire(&cfg.out_dir)?;
    write_atomic(&cfg.path("config.toml"), cfg.to_toml().as_bytes())?;
    match stage {
        Stage::Ingest => stage_ingest(cfg),
        Stage::TrainAe => stage_train_ae(cfg),
        Stage::PretrainDm => stage_pretrain(cfg),
        Stage::FinetuneDp => stage_finetune(cfg, opts),
        Stage::Sample => stage_sample(cfg),
        Stage::Eval(kind) => stage_eval(cfg, kind),
    }
}

/// Every stage in order, evaluating FID at the end.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutput>> {
    [Stage::Ingest, Stage::TrainAe, Stage::PretrainDm, Stage::FinetuneDp, Stage::Sample, Stage::Eval(EvalKind::Fid)]
        .into_iter()
        .map(|s| run_stage(cfg, s, &StageOptions::default()))
        .collect()
}

fn stage_ingest(cfg: &RunConfig) -> Result<StageOutput> {
    let (public, private, test) = match &cfg.data.synthetic {
        Some(s) => {
            let all = synthetic_shapes(s.private_n + s.test_n, s.size, Domain::Private, s.seed);
            let private = all.subset(&(0..s.private_n).collect::<Vec<_>>());
            let test = all.subset(&(s.private_n..s.private_n + s.test_n).collect::<Vec<_>>());
            (synthetic_shapes(s.public_n, s.size, Domain::Public, s.seed), private, Some(test))
        }
        None => {
            let (Some(p), Some(q)) = (&cfg.data.public, &cfg.data.private) else {
                bail!(Config, "data needs public and private paths or a synthetic section")
            };
            (ingest(p)?, ingest(q)?, cfg.data.test.as_deref().map(ingest).transpose()?)
        }
    };
    let mut artifacts = Vec::new();
    let mut summary = serde_json::Map::new();
    for (name, ds) in [(PUBLIC, Some(&public)), (PRIVATE, Some(&private)), (TEST, test.as_ref())] {
        let Some(ds) = ds else { continue };
        ds.check_divisible(cfg.autoencoder.factor)?;
        let path = cfg.path(name);
        ds.save(&path)?;
        summary.insert(name.into(), json!({"n": ds.len(), "height": ds.height, "width": ds.width, "classes": ds.class_counts()}));
        artifacts.push(path);
    }
    if public.channels != private.channels || public.height != private.height || public.width != private.width {
        bail!(Data, "public and private images differ in shape");
    }
    let summary = Value::Object(summary);
    artifacts.push(write_metrics(cfg, Stage::Ingest, std::slice::from_ref(&summary))?);
    Ok(StageOutput { stage: Stage::Ingest, artifacts, summary })
}

fn load_dataset(cfg: &RunConfig, name: &str) -> Result<Dataset> {
    Dataset::load(&require(cfg.path(name))?)
}

fn stage_train_ae(cfg: &RunConfig) -> Result<StageOutput> {
    let public = load_dataset(cfg, PUBLIC)?;
    let mut ae_cfg = cfg.ae_config();
    ae_cfg.image_channels = public.channels;
    let images = public.images();
    let (ae, log) = train_autoencoder(&images, ae_cfg, &cfg.ae_train())?;
    let rec = ae.reconstruction_error(&images)?;
    let ck = Checkpoint { sections: vec![with_config(autoencoder_section(&ae, &cfg.hash()), cfg)] };
    let path = cfg.path(AUTOENCODER);
    ck.save(&path)?;
    let mut records: Vec<Value> = log.iter().enumerate().map(|(e, l)| json!({"epoch": e, "loss": l})).collect();
    let summary = json!({"reconstruction_mse": rec, "latent_scale": ae.latent_scale});
    records.push(summary.clone());
    let m = write_metrics(cfg, Stage::TrainAe, &records)?;
    Ok(StageOutput { stage: Stage::TrainAe, artifacts: vec![path, m], summary })
}

fn labels_for(cfg: &RunConfig, ds: &Dataset) -> Result<Option<Vec<usize>>> {
    if cfg.diffusion.conditional {
        Ok(Some(ds.class_labels()?))
    } else {
        Ok(None)
    }
}

fn stage_pretrain(cfg: &RunConfig) -> Result<StageOutput> {
    let ck = Checkpoint::load(&require(cfg.path(AUTOENCODER))?)?;
    let ae = load_autoencoder(ck.section(SectionKind::Autoencoder)?)?;
    let public = load_dataset(cfg, PUBLIC)?;
    let latents = ae.encode(&public.images())?;
    let labels = labels_for(cfg, &public)?;
    let s = latents.shape();
    let unet = cfg.unet_config(s[1], s[2], public.num_classes);
    let schedule = NoiseSchedule::linear_scaled(cfg.diffusion.steps)?;
    let mut model = DiffusionModel::new(unet, schedule, &mut stream(cfg.seed, Purpose::Init, &[1]))?;
    let d = &cfg.diffusion;
    let pcfg = PretrainConfig { epochs: d.epochs, batch_size: d.batch_size, lr: d.lr, seed: cfg.seed };
    let log = pretrain(&mut model, &latents, labels.as_deref(), &pcfg)?;
    let hash = cfg.hash();
    let out = Checkpoint { sections: vec![autoencoder_section(&ae, &hash), with_config(diffusion_section(&model, &hash), cfg)] };
    let path = cfg.path(PRETRAINED);
    out.save(&path)?;
    let records: Vec<Value> = log.iter().enumerate().map(|(e, l)| json!({"epoch": e, "loss": l})).collect();
    let summary = json!({"final_loss": log.last(), "params": model.store.total_count()});
    let m = write_metrics(cfg, Stage::PretrainDm, &records)?;
    Ok(StageOutput { stage: Stage::PretrainDm, artifacts: vec![path, m], summary })
}

/// Noise multiplier, step count and sampling rate of the fine-tune stage.
pub fn finetune_plan(cfg: &RunConfig, n: usize) -> Result<(f64, u64, f64)> {
    let f = &cfg.finetune;
    if n == 0 {
        bail!(Data, "private dataset is empty");
    }
    let steps = DpConfig::steps_for_epochs(f.epochs, n, f.batch_size);
    let q = f.batch_size as f64 / n as f64;
    let sigma = match (f.sigma, f.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(e)) => calibrate_sigma(q, steps, f.delta, e, f.conversion)?,
        (None, None) => bail!(Config, "finetune needs target_epsilon or sigma"),
    };
    Ok((sigma, steps, q))
}

fn stage_finetune(cfg: &RunConfig, opts: &StageOptions) -> Result<StageOutput> {
    let ck = Checkpoint::load(&require(cfg.path(PRETRAINED))?)?;
    let ae = load_autoencoder(ck.section(SectionKind::Autoencoder)?)?;
    let private = load_dataset(cfg, PRIVATE)?;
    let latents = ae.encode(&private.images())?;
    let labels = labels_for(cfg, &private)?;
    let n = private.len();
    let f = &cfg.finetune;
    let (sigma, steps, _) = finetune_plan(cfg, n)?;
    let dp = DpConfig {
        batch_size: f.batch_size,
        clip: f.clip,
        sigma,
        lr: cfg.finetune_lr(),
        steps,
        seed: cfg.seed,
        microbatch: f.microbatch,
        delta: f.delta,
        research_mode: f.research_mode,
    };
    let hash = cfg.hash();
    let partial = cfg.path(PARTIAL);
    let (mut model, mut trainer) = if opts.resume && partial.exists() {
        let pk = Checkpoint::load(&partial)?;
        let sec = pk.section(SectionKind::Diffusion)?;
        if sec.config_hash != hash {
            bail!(State, "partial checkpoint was written under a different config");
        }
        let ledger = sec.ledger.clone().ok_or_else(|| Error::Format("partial checkpoint has no ledger".into()))?;
        let mut ledger_cfg = ledger.clone();
        ledger_cfg.conversion = f.conversion;
        (load_diffusion(sec)?, DpTrainer::resume(dp, &latents, labels.as_deref(), ledger_cfg)?)
    } else {
        let mut model = load_diffusion(ck.section(SectionKind::Diffusion)?)?;
        if f.lora_rank > 0 {
            model.attach_lora(f.lora_rank, f.lora_scale, &mut stream(cfg.seed, Purpose::Init, &[2]))?;
        }
        model.select_trainable(&cfg.trainable_spec()?)?;
        let mut t = DpTrainer::new(dp, &latents, labels.as_deref())?;
        t.ledger.conversion = f.conversion;
        (model, t)
    };
    let fraction = trainable_fraction(&model.store);
    let mut records = Vec::new();
    let save_partial = |model: &DiffusionModel, ledger: &PrivacyLedger| -> Result<()> {
        let mut sec = with_config(diffusion_section(model, &hash), cfg);
        sec.ledger = Some(ledger.clone());
        sec.meta.insert("rng_seed".into(), cfg.seed.to_string());
        sec.meta.insert("next_step".into(), ledger.steps.to_string());
        Checkpoint { sections: vec![autoencoder_section(&ae, &hash), sec] }.save(&partial)
    };
    while !trainer.done() {
        if opts.stop_after.is_some_and(|s| trainer.ledger.steps >= s) {
            save_partial(&model, &trainer.ledger)?;
            let summary = json!({"interrupted_at": trainer.ledger.steps, "steps": steps});
            records.push(summary.clone());
            let m = write_metrics(cfg, Stage::FinetuneDp, &records)?;
            return Ok(StageOutput { stage: Stage::FinetuneDp, artifacts: vec![partial, m], summary });
        }
        let r = trainer.step(&mut model)?;
        records.push(serde_json::to_value(&r).expect("report serializes"));
        if f.checkpoint_every > 0 && trainer.ledger.steps % f.checkpoint_every == 0 && !trainer.done() {
            save_partial(&model, &trainer.ledger)?;
        }
    }
    let ledger = trainer.ledger.clone();
    let eps = ledger.epsilon()?;
    let mut sec = with_config(diffusion_section(&model, &hash), cfg);
    sec.ledger = Some(ledger.clone());
    sec.meta.insert("rng_seed".into(), cfg.seed.to_string());
    sec.meta.insert("next_step".into(), ledger.steps.to_string());
    sec.meta.insert("sigma".into(), sigma.to_string());
    let refusal = match f.target_epsilon {
        Some(target) if !((eps - target).abs() <= 0.01 * target) => {
            Some(format!("accountant gives epsilon {eps}, config targets {target}"))
        }
        _ => None,
    };
    let stamped = refusal.is_none() && eps.is_finite();
    if stamped {
        sec.meta.insert("dp_epsilon".into(), eps.to_string());
        sec.meta.insert("dp_delta".into(), ledger.delta.to_string());
    } else {
        let reason = refusal.clone().unwrap_or_else(|| "no noise was added".into());
        sec.meta.insert("dp_refused".into(), reason);
    }
    let path = cfg.path(FINETUNED);
    Checkpoint { sections: vec![autoencoder_section(&ae, &hash), sec] }.save(&path)?;
    if partial.exists() {
        std::fs::remove_file(&partial)?;
    }
    let summary = json!({
        "epsilon": eps, "delta": ledger.delta, "sigma": sigma, "steps": ledger.steps,
        "q": ledger.q, "trainable_fraction": fraction, "stamped": stamped,
    });
    records.push(summary.clone());
    let m = write_metrics(cfg, Stage::FinetuneDp, &records)?;
    if let Some(reason) = refusal {
        bail!(BudgetRefusal, "{reason}; checkpoint left unstamped");
    }
    Ok(StageOutput { stage: Stage::FinetuneDp, artifacts: vec![path, m], summary })
}

/// Recompute `ε` from the ledger of a DP checkpoint and compare it with the
/// stamped value. Returns the stamped `(ε, δ)`.
pub fn verify_ledger(ck: &Checkpoint) -> Result<(f64, f64)> {
    let sec = ck.section(SectionKind::Diffusion)?;
    let ledger = sec.ledger.as_ref().ok_or_else(|| Error::State("checkpoint has no ledger".into()))?;
    let stamped: f64 = sec
        .meta("dp_epsilon")
        .map_err(|_| Error::State("checkpoint is not stamped as DP".into()))?
        .parse()
        .map_err(|_| Error::Format("bad stamped epsilon".into()))?;
    let next: u64 = sec.meta("next_step")?.parse().map_err(|_| Error::Format("bad step count".into()))?;
    if next != ledger.steps {
        bail!(State, "ledger has {} steps, checkpoint records {next}", ledger.steps);
    }
    let eps = ledger.epsilon()?;
    if eps.to_bits() != stamped.to_bits() {
        bail!(State, "recomputed epsilon {eps} differs from stamped {stamped}");
    }
    Ok((stamped, ledger.delta))
}

/// Class-balanced labels `i mod k`.
pub fn balanced_labels(count: usize, classes: usize) -> Vec<usize> {
    (0..count).map(|i| i % classes.max(1)).collect()
}

/// Decode `count` fresh samples of `model` to images in a dataset.
pub fn generate(ae: &Autoencoder, model: &DiffusionModel, count: usize, labels: bool, seed: u64) -> Result<Dataset> {
    let classes = model.unet.config.num_classes;
    if labels && !model.unet.config.conditional() {
        bail!(Config, "labels requested from an unconditional model");
    }
    let y = labels.then(|| balanced_labels(count, classes));
    let mut rng = stream(seed, Purpose::Sampling, &[0]);
    let z = ddpm_sample(model, &model.schedule, model.latent_shape(), count, y.as_deref(), &mut rng)?;
    let images = ae.decode(&z)?;
    Dataset::from_images(&images, y.as_deref(), classes)
}

fn stage_sample(cfg: &RunConfig) -> Result<StageOutput> {
    let source = cfg.sample.source.as_str();
    let file = if source == "pretrained" { PRETRAINED } else { FINETUNED };
    let ck = Checkpoint::load(&require(cfg.path(file))?)?;
    let ae = load_autoencoder(ck.section(SectionKind::Autoencoder)?)?;
    let model = load_diffusion(ck.section(SectionKind::Diffusion)?)?;
    let ds = generate(&ae, &model, cfg.sample.count, cfg.sample.labels, cfg.seed)?;
    let path = cfg.path(&samples_file(source));
    ds.save(&path)?;
    let summary = json!({"source": source, "count": ds.len(), "labels": cfg.sample.labels});
    let m = write_metrics(cfg, Stage::Sample, std::slice::from_ref(&summary))?;
    Ok(StageOutput { stage: Stage::Sample, artifacts: vec![path, m], summary })
}

/// Feature statistics of a dataset under the shared fixed extractor.
pub fn feature_stats(ds: &Dataset, dim: usize) -> Result<FeatureStats> {
    let ex = FeatureExtractor::new(ds.channels, dim, EXTRACTOR_SEED)?;
    FeatureStats::from_features(&ex.extract(&ds.images())?)
}

fn reference_set(cfg: &RunConfig) -> Result<Dataset> {
    let test = cfg.path(TEST);
    if test.exists() {
        Dataset::load(&test)
    } else {
        load_dataset(cfg, PRIVATE)
    }
}

fn stage_eval(cfg: &RunConfig, kind: EvalKind) -> Result<StageOutput> {
    let source = cfg.sample.source.as_str();
    let samples = load_dataset(cfg, &samples_file(source))?;
    let reference = reference_set(cfg)?;
    let dim = cfg.eval.feature_dim;
    let summary = match kind {
        EvalKind::Fid => {
            let value = fid(&feature_stats(&samples, dim)?, &feature_stats(&reference, dim)?)?;
            json!({"source": source, "fid": value, "samples": samples.len(), "reference": reference.len()})
        }
        EvalKind::DpFid => {
            let opts = DpFidOptions {
                budget: FidBudget::split(cfg.eval.dpfid_epsilon, cfg.eval.dpfid_delta),
                neighboring: Neighboring::default(),
                mean_only: false,
                zero_noise: false,
            };
            let private = feature_stats(&reference, dim)?;
            let public = feature_stats(&samples, dim)?;
            let r = dp_fid(&private, &public, &opts, &mut stream(cfg.seed, Purpose::Privatize, &[0]))?;
            json!({"source": source, "dp_fid": r.value, "epsilon": r.eps, "delta": r.delta})
        }
        EvalKind::Classifier => {
            let train_y = samples.class_labels()?;
            let test_y = reference.class_labels()?;
            let ccfg = ClassifierConfig { epochs: cfg.eval.classifier_epochs, seed: cfg.seed, ..ClassifierConfig::default() };
            let acc = train_eval_classifier(
                &samples.images(),
                &train_y,
                &reference.images(),
                &test_y,
                samples.num_classes.max(reference.num_classes),
                &ccfg,
            )?;
            json!({"source": source, "accuracy": acc})
        }
    };
    let stage = Stage::Eval(kind);
    let path = cfg.path(&format!("{}-{source}.json", stage.name()));
    write_atomic(&path, serde_json::to_string_pretty(&summary).expect("json").as_bytes())?;
    let m = write_metrics(cfg, stage, std::slice::from_ref(&summary))?;
    Ok(StageOutput { stage, artifacts: vec![path, m], summary })
}

/// Load the stats section of a checkpoint, if present.
pub fn load_stats_section(ck: &Checkpoint) -> Result<FeatureStats> {
    crate::checkpoint::load_stats(ck.section(SectionKind::Stats)?)
}

/// Checkpoint holding reference feature statistics.
pub fn stats_checkpoint(stats: &FeatureStats, cfg: &RunConfig) -> Checkpoint {
    Checkpoint { sections: vec![with_config(stats_section(stats, &cfg.hash()), cfg)] }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::synthetic(dir, 1);
        let s = cfg.data.synthetic.as_mut().unwrap();
        s.public_n = 32;
        s.private_n = 16;
        s.test_n = 8;
        s.size = 8;
        cfg.autoencoder.epochs = 1;
        cfg.diffusion.steps = 4;
        cfg.diffusion.epochs = 1;
        cfg.diffusion.batch_size = 16;
        cfg.finetune.batch_size = 8;
        cfg.finetune.epochs = 1;
        cfg.sample.count = 4;
        cfg.eval.feature_dim = 4;
        cfg
    }

    #[test]
    fn tiny_pipeline_runs_and_reverifies() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let outs = run_all(&cfg).unwrap();
        assert_eq!(outs.len(), 6);
        let ck = Checkpoint::load(&cfg.path(FINETUNED)).unwrap();
        let (eps, _) = verify_ledger(&ck).unwrap();
        assert!((eps - 10.0).abs() < 0.1);
        assert!(!dir.path().join(".lock").exists());
    }

    #[test]
    fn missing_prerequisite_and_lock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        assert!(matches!(run_stage(&cfg, Stage::TrainAe, &StageOptions::default()), Err(Error::Config(_))));
        let _held = StageLock::acquire(dir.path()).unwrap();
        assert!(matches!(run_stage(&cfg, Stage::Ingest, &StageOptions::default()), Err(Error::State(_))));
    }
}
