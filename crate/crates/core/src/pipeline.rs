//! Pipeline stages over a run directory:
//!
//! ```text
//! <run>/config.toml                      config echo
//! <run>/splits.json                      split manifest
//! <run>/denoiser/checkpoint.json         + loss_curve.{csv,png}
//! <run>/transfer/<domain>_<variant>/     paired dataset
//! <run>/train/<label>/metrics.json       + one checkpoint per model
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::adaptation::{train_source_only_with_hooks, train_zodi_with_hooks, TrainHooks};
use crate::checkpoint::Checkpoint;
use crate::config::{stage, RunConfig};
use crate::denoiser::{init_denoiser, pretrain, Denoiser, DenoiserConfig, DENOISER_KIND};
use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::io::{
    create_dir, file_digest, read_transfer_dataset, save_plot, write_curve_csv, write_json,
    write_split_manifest, TransferManifest,
};
use crate::report::{DomainScore, ModelRecord, RunMetrics, TrainMode, METRICS_FILE, METRICS_SCHEMA, METRICS_VERSION};
use crate::scene::{make_splits, render_range, Domain, ReadAudit, SceneSample};
use crate::segmentation::{evaluate_miou, SegConfig, SegModel, SEGMENTER_KIND};
use crate::transfer::{transfer_dataset, Variant};

pub fn checkpoint_path(run: &Path) -> PathBuf {
    run.join("denoiser").join("checkpoint.json")
}

pub fn transfer_dir(run: &Path, domain: Domain, variant: Variant) -> PathBuf {
    run.join("transfer").join(format!("{}_{}", domain.name(), variant.name()))
}

pub fn train_dir(run: &Path, label: &str) -> PathBuf {
    run.join("train").join(label)
}

/// Default report label: the mode, plus the variant when it is not the
/// standard one.
pub fn default_label(mode: TrainMode, variant: Variant) -> String {
    match (mode, variant) {
        (TrainMode::SourceOnly, _) | (_, Variant::Zodi) => mode.name().to_owned(),
        _ => format!("{}-{}", mode.name(), variant.name()),
    }
}

pub fn write_config_echo(cfg: &RunConfig, run: &Path) -> Result<()> {
    create_dir(run)?;
    let path = run.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(path, e))
}

pub fn schedule_for(cfg: &RunConfig, den: &DenoiserConfig) -> Result<NoiseSchedule> {
    build_schedule(den.timesteps, cfg.denoiser.schedule)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub checksum: String,
    pub history: Vec<f64>,
}

pub fn run_pretrain(cfg: &RunConfig, run: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    write_config_echo(cfg, run)?;
    write_split_manifest(&run.join("splits.json"), &cfg.split_config())?;
    let splits = make_splits(&cfg.split_config())?;
    let sched = schedule_for(cfg, &cfg.denoiser.model)?;
    let den = init_denoiser(cfg.denoiser.model.clone(), cfg.stage_seed(stage::DENOISER_INIT))?;
    let (den, history) = pretrain(den, &splits.pretrain_corpus, &sched, &cfg.pretrain_config())?;

    let dir = run.join("denoiser");
    create_dir(&dir)?;
    let ckpt = den.to_checkpoint();
    let path = checkpoint_path(run);
    ckpt.save(&path)?;
    let rows: Vec<Vec<f64>> = history.iter().map(|&v| vec![v]).collect();
    write_curve_csv(&dir.join("loss_curve.csv"), &["loss"], &rows)?;
    save_plot(&dir.join("loss_curve.png"), std::slice::from_ref(&history))?;
    Ok(PretrainOutcome {
        checkpoint: path,
        checksum: ckpt.checksum,
        history,
    })
}

pub fn load_denoiser(run: &Path) -> Result<Denoiser> {
    let path = checkpoint_path(run);
    if !path.exists() {
        return Err(Error::Missing {
            what: "denoiser checkpoint (run `pretrain` first)",
            path,
        });
    }
    Denoiser::from_checkpoint(&Checkpoint::load(&path, DENOISER_KIND)?)
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub dir: PathBuf,
    pub manifest: TransferManifest,
    pub reads: BTreeMap<Domain, u64>,
}

pub fn run_transfer(
    cfg: &RunConfig,
    run: &Path,
    domain: Domain,
    strength: Option<f64>,
    variant: Option<Variant>,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    let splits = cfg.split_config();
    if domain == splits.source {
        return Err(invalid!("{domain} is the source domain, not a transfer target"));
    }
    let tcfg = cfg.transfer_config(domain, strength, variant)?;
    let den = load_denoiser(run)?;
    let sched = schedule_for(cfg, den.config())?;
    let samples = render_range(splits.adapt, splits.source);
    let audit = ReadAudit::new();
    let pairs = transfer_dataset(
        &samples,
        &tcfg,
        &den,
        &sched,
        cfg.stage_seed(stage::TRANSFER),
        Some(&audit),
    )?;
    let dir = transfer_dir(run, domain, tcfg.variant);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let manifest = crate::io::write_transfer_dataset(&dir, &pairs, cfg.master_seed, &den.to_checkpoint().checksum)?;
    Ok(TransferOutcome {
        dir,
        manifest,
        reads: audit.snapshot(),
    })
}

pub fn eval_sets(cfg: &RunConfig, domains: &[Domain]) -> Result<BTreeMap<Domain, Vec<SceneSample>>> {
    let splits = cfg.split_config();
    domains
        .iter()
        .map(|&d| {
            let i = splits
                .targets
                .iter()
                .position(|&t| t == d)
                .ok_or_else(|| invalid!("{d} is not a target domain"))?;
            Ok((d, render_range(splits.eval[i], d)))
        })
        .collect()
}

struct Trained {
    model: SegModel,
    seed: u64,
    adapted_to: Option<Domain>,
    history: Vec<crate::adaptation::LossBreakdown>,
    scores: BTreeMap<Domain, f64>,
}

/// Train one segmenter per (domain, seed) and evaluate on held-out target
/// renders. Source-only models are shared by all domains.
pub fn run_train(
    cfg: &RunConfig,
    run: &Path,
    mode: TrainMode,
    variant: Variant,
    domains: &[Domain],
    label: Option<&str>,
) -> Result<RunMetrics> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(invalid!("no target domains selected"));
    }
    let splits = cfg.split_config();
    let evals = eval_sets(cfg, domains)?;
    let audit = ReadAudit::new();
    let lambda = mode.lambda(cfg.trainer.training.lambda);
    let seg_cfg: SegConfig = cfg.trainer.model.clone();
    let init = |seed: u64| SegModel::new(seg_cfg.clone(), cfg.segmenter_init_seed(seed));

    let trained: Vec<Trained> = match mode {
        TrainMode::SourceOnly => {
            let samples = render_range(splits.adapt, splits.source);
            cfg.trainer
                .seeds
                .par_iter()
                .map(|&seed| {
                    let mut hooks = TrainHooks {
                        audit: Some(&audit),
                        on_augment: None,
                    };
                    let (model, history) =
                        train_source_only_with_hooks(init(seed)?, &samples, &cfg.train_config(seed, 0.0), &mut hooks)?;
                    let scores = evals
                        .iter()
                        .map(|(&d, s)| Ok((d, evaluate_miou(&model, s)?)))
                        .collect::<Result<_>>()?;
                    Ok(Trained {
                        model,
                        seed,
                        adapted_to: None,
                        history,
                        scores,
                    })
                })
                .collect::<Result<_>>()?
        }
        TrainMode::Zodi | TrainMode::ZodiNoSim => {
            let mut out = Vec::new();
            for &d in domains {
                let (manifest, pairs) = read_transfer_dataset(&transfer_dir(run, d, variant))?;
                if manifest.source_domain != splits.source || manifest.config.target_domain != d {
                    return Err(invalid!("dataset for {d} has unexpected domains"));
                }
                let models: Vec<Trained> = cfg
                    .trainer
                    .seeds
                    .par_iter()
                    .map(|&seed| {
                        let mut hooks = TrainHooks {
                            audit: Some(&audit),
                            on_augment: None,
                        };
                        let (model, history) =
                            train_zodi_with_hooks(init(seed)?, &pairs, &cfg.train_config(seed, lambda), &mut hooks)?;
                        let score = evaluate_miou(&model, &evals[&d])?;
                        Ok(Trained {
                            model,
                            seed,
                            adapted_to: Some(d),
                            history,
                            scores: BTreeMap::from([(d, score)]),
                        })
                    })
                    .collect::<Result<_>>()?;
                out.extend(models);
            }
            out
        }
    };
    if audit.reads_outside(&[splits.source]) > 0 {
        return Err(Error::Format("adaptation read target-domain images".into()));
    }

    let label = label.map(str::to_owned).unwrap_or_else(|| default_label(mode, variant));
    let dir = train_dir(run, &label);
    create_dir(&dir)?;
    let mut models = Vec::with_capacity(trained.len());
    for t in &trained {
        let name = format!(
            "{}_seed{}.json",
            t.adapted_to.map_or("source", |d| d.name()),
            t.seed
        );
        let path = dir.join(&name);
        t.model
            .to_checkpoint(t.history.len() as u64)
            .save(&path)?;
        models.push(ModelRecord {
            adapted_to: t.adapted_to,
            seed: t.seed,
            checkpoint: name,
            checkpoint_sha256: file_digest(&path)?,
            history: t.history.clone(),
        });
    }
    let domains_scores = domains
        .iter()
        .map(|&d| {
            let values = trained
                .iter()
                .filter_map(|t| t.scores.get(&d).copied())
                .collect();
            (d, DomainScore::from_values(values))
        })
        .collect();
    let metrics = RunMetrics {
        schema: METRICS_SCHEMA.to_owned(),
        version: METRICS_VERSION,
        run: label,
        mode,
        variant: (mode != TrainMode::SourceOnly).then_some(variant),
        lambda,
        master_seed: cfg.master_seed,
        seeds: cfg.trainer.seeds.clone(),
        source_domain: splits.source,
        config: cfg.train_config(0, lambda),
        reads: audit.snapshot(),
        domains: domains_scores,
        models,
    };
    metrics.validate()?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn load_segmenter(path: &Path) -> Result<SegModel> {
    if !path.exists() {
        return Err(Error::Missing {
            what: "segmenter checkpoint",
            path: path.to_path_buf(),
        });
    }
    SegModel::from_checkpoint(&Checkpoint::load(path, SEGMENTER_KIND)?)
}

pub fn run_evaluate(cfg: &RunConfig, checkpoint: &Path, domains: &[Domain]) -> Result<BTreeMap<Domain, f64>> {
    let model = load_segmenter(checkpoint)?;
    eval_sets(cfg, domains)?
        .iter()
        .map(|(&d, s)| Ok((d, evaluate_miou(&model, s)?)))
        .collect()
}
