//! Held-out evaluation of a trained or exported model.

use std::path::Path;

use crate::backbone;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalSample, LabelMap, MetricReport};
use crate::synthdata::{Dataset, Split};
use crate::train::checkpoint::Checkpoint;
use crate::train::trainer::check_compatible;

/// Pixel spacing used for surface distances on synthetic data.
pub const SPACING: (f64, f64) = (1.0, 1.0);

/// Predicts every sample of `split` for each modality the model was trained
/// on.
pub fn predictions(model: &Checkpoint, ds: &Dataset, split: Split) -> Result<Vec<EvalSample>> {
    let cfg = model.config.model_config();
    check_compatible(&cfg, ds)?;
    let mut out = Vec::new();
    for (slot, name) in model.modality_names.iter().enumerate() {
        let m = ds
            .modality_index(name)
            .ok_or_else(|| Error::Data(format!("dataset has no modality `{name}`")))?;
        for s in ds.samples(m, split) {
            let pred = backbone::predict(&model.store, &cfg, &s.channels_last(), slot)?;
            out.push(EvalSample {
                pred: LabelMap::new(cfg.height, cfg.width, pred)?,
                truth: s.label.clone(),
                modality: slot,
            });
        }
    }
    Ok(out)
}

pub fn evaluate_on(model: &Checkpoint, ds: &Dataset, split: Split) -> Result<MetricReport> {
    let samples = predictions(model, ds, split)?;
    metrics::report(&samples, &model.modality_names, ds.spec.scene.classes, SPACING)
}

/// Evaluates a model file and writes `metrics.csv` and `metrics.txt` into
/// `out_dir` when given.
pub fn evaluate(model_path: &Path, data_dir: &Path, split: Split, out_dir: Option<&Path>) -> Result<MetricReport> {
    let model = Checkpoint::load(model_path)?;
    let ds = crate::synthdata::load_dataset(data_dir)?;
    let report = evaluate_on(&model, &ds, split)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("metrics.txt");
        std::fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(report)
}
