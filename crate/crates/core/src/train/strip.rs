//! Export of an inference model without the external attention branch.
//!
//! V3 blocks read their channel scales from the class embeddings, so before
//! the embeddings can be dropped each block's `Φ₁, Φ₂` are evaluated once
//! per modality and stored as constants.

use mmseg_autodiff::Tape;

use crate::backbone::{folded_name, Variant};
use crate::eam;
use crate::error::{Error, Result};
use crate::nn::{calibration_names, calibration_scales};
use crate::params::ParamGroup;
use crate::train::checkpoint::Checkpoint;

/// Parameters removed by [`strip_eam`]: everything in the EAM and
/// calibration groups.
pub fn removable_count(ckpt: &Checkpoint) -> usize {
    ckpt.store.group_count(ParamGroup::Eam) + ckpt.store.group_count(ParamGroup::Calibration)
}

pub fn strip_eam(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let model = ckpt.config.model_config();
    if ckpt.store.group_count(ParamGroup::Eam) == 0 {
        return Err(Error::config("model has no external attention parameters to strip"));
    }
    let has_calib = ckpt.store.group_count(ParamGroup::Calibration) > 0;
    if has_calib != (model.variant == Variant::V3) {
        return Err(Error::config(format!(
            "variant {:?} does not match the stored calibration weights",
            model.variant
        )));
    }
    let mut store = ckpt.store.clone();
    if model.variant == Variant::V3 {
        for m in 0..model.modalities {
            let q = ckpt.store.get(&eam::query_name(m))?.clone();
            for block in model.block_prefixes(m) {
                let mut t = Tape::new();
                let [w1, w2, w3] = calibration_names(&block).map(|n| ckpt.store.get(&n).cloned());
                let (w1, w2, w3) = (t.constant(w1?), t.constant(w2?), t.constant(w3?));
                let qv = t.constant(q.clone());
                let (p1, p2) = calibration_scales(&mut t, w1, w2, w3, qv)?;
                store.insert(folded_name(m, &block, 1), ParamGroup::Folded, t.value(p1).clone())?;
                store.insert(folded_name(m, &block, 2), ParamGroup::Folded, t.value(p2).clone())?;
            }
        }
    }
    store.retain(|e| !matches!(e.group, ParamGroup::Eam | ParamGroup::Calibration));
    Ok(Checkpoint {
        config: ckpt.config.clone(),
        modality_names: ckpt.modality_names.clone(),
        step: ckpt.step,
        store,
        optimizer: None,
    })
}
