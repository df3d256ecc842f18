//! The training loop.
//!
//! Every step draws an independent mini-batch per modality slot (uniform,
//! with replacement), runs all forwards on one tape, sums the objective and
//! applies a single update. Batch draws are seeded per step, so a resumed
//! run replays exactly the batches an uninterrupted run would have seen.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mmseg_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::backbone::{self, BackboneConfig};
use crate::eam;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossParts, LossWeights};
use crate::params::{name_rng, Graph};
use crate::synthdata::{Dataset, Sample, Split};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::{TrainConfig, TrainVariant};
use crate::train::optim::OptimizerState;

/// A training image prepared for the model.
#[derive(Clone, Debug)]
pub struct TrainItem {
    /// `[H, W, 3]`
    pub image: Tensor,
    pub labels: Vec<u8>,
}

impl From<&Sample> for TrainItem {
    fn from(s: &Sample) -> Self {
        TrainItem {
            image: s.channels_last(),
            labels: s.label.data.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Dataset modality index of each model slot.
pub fn slot_modalities(cfg: &TrainConfig, ds: &Dataset) -> Result<Vec<usize>> {
    if cfg.variant == TrainVariant::Baseline {
        let m = ds
            .modality_index(&cfg.baseline_modality)
            .ok_or_else(|| Error::Data(format!("dataset has no modality `{}`", cfg.baseline_modality)))?;
        return Ok(vec![m]);
    }
    let n = ds.spec.profiles.len();
    let model = cfg.model_config();
    if model.modalities != n {
        return Err(Error::config(format!(
            "model has {} modality slots, dataset has {n} modalities",
            model.modalities
        )));
    }
    Ok((0..n).collect())
}

/// Checks that the model and the dataset agree on extent and classes.
pub fn check_compatible(model: &BackboneConfig, ds: &Dataset) -> Result<()> {
    let s = &ds.spec.scene;
    if (s.height, s.width, s.classes) != (model.height, model.width, model.classes) {
        return Err(Error::config(format!(
            "model expects {}x{} with {} classes, dataset is {}x{} with {}",
            model.height, model.width, model.classes, s.height, s.width, s.classes
        )));
    }
    Ok(())
}

/// Training pool per slot, honoring the few-shot counts.
pub fn training_pools(cfg: &TrainConfig, ds: &Dataset, slots: &[usize]) -> Result<Vec<Vec<TrainItem>>> {
    if let Some(k) = &cfg.few_shot {
        if k.len() != ds.spec.profiles.len() {
            return Err(Error::config(format!(
                "{} few-shot counts for {} modalities",
                k.len(),
                ds.spec.profiles.len()
            )));
        }
    }
    slots
        .iter()
        .map(|&m| {
            let all = ds.samples(m, Split::Train);
            let take = match &cfg.few_shot {
                Some(k) => {
                    if k[m] > all.len() {
                        return Err(Error::Data(format!(
                            "few-shot count {} exceeds the {} training samples of {}",
                            k[m],
                            all.len(),
                            ds.spec.profiles[m].name
                        )));
                    }
                    k[m]
                }
                None => all.len(),
            };
            let pool: Vec<TrainItem> = all[..take].iter().map(|s| TrainItem::from(*s)).collect();
            assert_eq!(pool.len(), take);
            if pool.is_empty() {
                return Err(Error::Data(format!("no training samples for {}", ds.spec.profiles[m].name)));
            }
            Ok(pool)
        })
        .collect()
}

/// Freshly initialized checkpoint at step 0.
pub fn initial_checkpoint(cfg: &TrainConfig, modality_names: Vec<String>) -> Result<Checkpoint> {
    cfg.validate()?;
    let store = backbone::init_model(&cfg.model_config(), cfg.seed)?;
    let optimizer = Some(OptimizerState::new(&cfg.optimizer, &store));
    Ok(Checkpoint {
        config: cfg.clone(),
        modality_names,
        step: 0,
        store,
        optimizer,
    })
}

fn mean(t: &mut Tape, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = t.add(acc, v)?;
    }
    Ok(t.scale(acc, 1.0 / vs.len() as f64)?)
}

/// Builds the objective for one step. `batches[s]` holds the images of slot
/// `s`; consistency terms pair the `b`-th image of slot 0 with the `b`-th of
/// slot 1.
pub fn step_loss(
    g: &mut Graph,
    model: &BackboneConfig,
    w: &LossWeights,
    batches: &[Vec<&TrainItem>],
) -> Result<(Var, LossBreakdown)> {
    let (h, wd) = (model.height, model.width);
    let need_icr = w.gamma > 0.0 && batches.len() >= 2;
    let need_eam = w.alpha > 0.0 || need_icr;
    let mut parts = LossParts::default();
    let mut corr: Vec<Vec<[Var; 3]>> = Vec::new();
    for (slot, batch) in batches.iter().enumerate() {
        let (mut seg, mut aux, mut es) = (Vec::new(), Vec::new(), Vec::new());
        for item in batch {
            let x = g.tape.constant(item.image.clone());
            let out = backbone::segment(g, model, x, slot)?;
            seg.push(losses::seg_loss(&mut g.tape, out.logits, &item.labels)?);
            if need_eam {
                let e = eam::run_eam_cascade(g, model, &out.features, slot, need_icr)?;
                if w.alpha > 0.0 {
                    aux.push(losses::aux_loss(&mut g.tape, &e.aux_logits, &item.labels, h, wd)?);
                }
                if let Some(c) = e.correlations {
                    es.push(c);
                }
            }
        }
        parts.seg.push(mean(&mut g.tape, &seg)?);
        if !aux.is_empty() {
            parts.aux.push(mean(&mut g.tape, &aux)?);
        }
        corr.push(es);
    }
    if w.beta > 0.0 && batches.len() >= 2 {
        let q0 = g.param(&eam::query_name(0))?;
        let q1 = g.param(&eam::query_name(1))?;
        parts.mcr = Some(losses::mcr_loss(&mut g.tape, q0, q1)?);
    }
    if need_icr {
        let pairs = corr[0].len().min(corr[1].len());
        let mut terms = Vec::with_capacity(pairs);
        for b in 0..pairs {
            terms.push(losses::icr_loss(&mut g.tape, &corr[0][b], &corr[1][b], w.tau)?);
        }
        if !terms.is_empty() {
            parts.icr = Some(mean(&mut g.tape, &terms)?);
        }
    }
    losses::total_loss(&mut g.tape, &parts, w)
}

/// Indices drawn for `step`, one batch per slot.
pub fn batch_indices(seed: u64, step: usize, pools: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut rng = name_rng(seed, &format!("batch.{step}"));
    pools
        .iter()
        .map(|&n| (0..batch).map(|_| rng.random_range(0..n)).collect())
        .collect()
}

fn csv_header(names: &[String]) -> String {
    let mut cols = vec!["step".to_string(), "total".to_string()];
    cols.extend(names.iter().map(|n| format!("seg_{n}")));
    cols.extend(names.iter().map(|n| format!("aux_{n}")));
    cols.push("mcr".into());
    cols.push("icr".into());
    cols.join(",")
}

fn csv_row(row: &LogRow, slots: usize) -> String {
    let l = &row.loss;
    let mut cols = vec![row.step.to_string(), format!("{:.9}", l.total)];
    cols.extend(l.seg.iter().map(|v| format!("{v:.9}")));
    cols.extend((0..slots).map(|i| l.aux.get(i).map_or(String::new(), |v| format!("{v:.9}"))));
    cols.push(format!("{:.9}", l.mcr));
    cols.push(format!("{:.9}", l.icr));
    cols.join(",")
}

/// Writes a training log as CSV.
pub fn write_log(path: &Path, names: &[String], log: &[LogRow]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", csv_header(names)).map_err(io)?;
    for r in log {
        writeln!(w, "{}", csv_row(r, names.len())).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Trains on an in-memory dataset, optionally resuming from `resume`.
pub fn train_on(cfg: &TrainConfig, ds: &Dataset, resume: Option<Checkpoint>) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = cfg.model_config();
    check_compatible(&model, ds)?;
    let slots = slot_modalities(cfg, ds)?;
    let names: Vec<String> = slots.iter().map(|&m| ds.spec.profiles[m].name.clone()).collect();
    let pools = training_pools(cfg, ds, &slots)?;
    let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
    let weights = cfg.effective_losses();

    let mut ckpt = match resume {
        Some(c) => {
            if c.config.model_config() != model || c.modality_names != names {
                return Err(Error::config("checkpoint does not match the training configuration"));
            }
            c
        }
        None => initial_checkpoint(cfg, names.clone())?,
    };
    let mut opt = ckpt
        .optimizer
        .take()
        .unwrap_or_else(|| OptimizerState::new(&cfg.optimizer, &ckpt.store));
    let mut log = Vec::new();

    let result = (|| -> Result<()> {
        for step in ckpt.step..cfg.steps {
            let idx = batch_indices(cfg.seed, step, &sizes, cfg.batch_size);
            let batches: Vec<Vec<&TrainItem>> = idx
                .iter()
                .zip(&pools)
                .map(|(ix, pool)| ix.iter().map(|&i| &pool[i]).collect())
                .collect();
            let mut g = Graph::new(&ckpt.store);
            g.tape = Tape::new().with_finite_checks(false);
            let (loss, breakdown) = step_loss(&mut g, &model, &weights, &batches)?;
            if !breakdown.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("{breakdown:?}"),
                });
            }
            log::debug!("step {step}: total {:.6}", breakdown.total);
            let grads = g.backward(loss)?;
            opt.step(&cfg.optimizer, &mut ckpt.store, &grads)?;
            log.push(LogRow { step, loss: breakdown });
            ckpt.step = step + 1;
        }
        Ok(())
    })();
    if let Some(p) = &cfg.log_path {
        write_log(p, &names, &log)?;
    }
    result?;
    ckpt.optimizer = Some(opt);
    ckpt.config = cfg.clone();
    if let Some(p) = &cfg.checkpoint_path {
        ckpt.save(p)?;
    }
    Ok(TrainOutput { checkpoint: ckpt, log })
}

/// Loads the dataset named by the config and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    if !cfg.data_dir.join(crate::synthdata::MANIFEST).exists() {
        return Err(Error::Data(format!(
            "no dataset at {} (run gen-data first)",
            cfg.data_dir.display()
        )));
    }
    let ds = crate::synthdata::load_dataset(&cfg.data_dir)?;
    train_on(cfg, &ds, None)
}
