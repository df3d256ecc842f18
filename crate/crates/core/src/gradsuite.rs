//! Finite-difference checks of the model's composite computations.
//!
//! Each composite is rebuilt with fresh random inputs and weights per trial
//! and checked with [`GradCheck`] against central differences. Composites
//! over a whole model differentiate every trainable tensor but probe only a
//! few strided elements of each, keeping the suite within a few minutes.

use mmseg_autodiff::{GradCheck, GradCheckReport, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, Variant};
use crate::eam;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::nn::{self, AttentionWeights, Calibration, Init, ScoreMap};
use crate::params::{Graph, ParamGroup, ParamStore};
use crate::train::trainer::{step_loss, TrainItem};

#[derive(Clone, Debug)]
pub struct CompositeOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub failed_trials: usize,
}

impl CompositeOutcome {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0 && self.trials > 0
    }
}

type Check = fn(&mut ChaCha8Rng, &GradCheck) -> Result<GradCheckReport>;

pub const COMPOSITES: [(&str, Check); 17] = [
    ("image-embedding", image_embedding),
    ("patch-merge", patch_merge),
    ("patch-expand", patch_expand),
    ("cross-attention", cross_attention),
    ("transformer-block", plain_block),
    ("calibrated-block", calibrated_block),
    ("encoder", encoder),
    ("segmentation-model", segmentation_model),
    ("class-embedding-update", class_embedding_update),
    ("semantic-correlation", semantic_correlation),
    ("eam-cascade", eam_cascade),
    ("seg-loss", seg_loss),
    ("aux-loss", aux_loss),
    ("mcr-loss", mcr_loss),
    ("icr-loss", icr_loss),
    ("objective-toy", objective_toy),
    ("objective-model", objective_model),
];

/// Runs `trials` randomized checks of every composite.
pub fn run_composite_suite(trials: usize, seed: u64, check: &GradCheck) -> Result<Vec<CompositeOutcome>> {
    COMPOSITES
        .iter()
        .enumerate()
        .map(|(k, &(name, f))| {
            let mut out = CompositeOutcome {
                name,
                trials,
                checked: 0,
                max_rel_error: 0.0,
                failed_trials: 0,
            };
            for trial in 0..trials {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 40) ^ trial as u64);
                let r = f(&mut rng, check)?;
                out.checked += r.checked;
                out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
                if !r.passed() {
                    log::warn!("{name} trial {trial}: {:?}", r.failures.first());
                    out.failed_trials += 1;
                }
            }
            Ok(out)
        })
        .collect()
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "composite",
            msg: other.to_string(),
        },
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

/// `Σ w ⊙ x` for a fixed weight tensor.
fn readout(t: &mut Tape, x: Var, w: &Tensor) -> std::result::Result<Var, TensorError> {
    let wv = t.constant(w.clone());
    let m = t.mul(x, wv)?;
    t.sum_all(m)
}

/// Replaces every value in the store with a standard normal draw scaled by
/// `s`, so checks do not sit at special points such as unit gains.
fn jitter(store: &mut ParamStore, s: f64, rng: &mut ChaCha8Rng) {
    for e in store.entries_mut() {
        for v in e.value.data_mut() {
            *v += s * Tensor::randn([1], 1.0, rng).data()[0];
        }
    }
}

/// Checks `f` with respect to the store entries `names` followed by the
/// free inputs `extra`.
fn check_store<F>(check: &GradCheck, store: &ParamStore, names: &[String], extra: Vec<Tensor>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut params = names
        .iter()
        .map(|n| store.get(n).cloned())
        .collect::<Result<Vec<_>>>()?;
    let k = params.len();
    params.extend(extra);
    Ok(check.run(
        |t, vars| {
            let tape = std::mem::take(t);
            let mut g = Graph::with_bindings(store, tape, names, &vars[..k]).map_err(to_tensor_error)?;
            let r = f(&mut g, &vars[k..]);
            *t = g.into_tape();
            r.map_err(to_tensor_error)
        },
        &params,
    )?)
}

fn names_with(store: &ParamStore, pred: impl Fn(&str, ParamGroup) -> bool) -> Vec<String> {
    store
        .entries()
        .iter()
        .filter(|e| e.group.is_trainable() && pred(&e.name, e.group))
        .map(|e| e.name.clone())
        .collect()
}

fn minimal(variant: Variant, rng: &mut ChaCha8Rng) -> Result<(BackboneConfig, ParamStore)> {
    let cfg = BackboneConfig::minimal(variant);
    let mut store = backbone::init_model(&cfg, rng.random())?;
    jitter(&mut store, 0.1, rng);
    Ok((cfg, store))
}

fn image_embedding(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V2, rng)?;
    let names = names_with(&store, |n, _| n.starts_with("embed.m0."));
    let img = randn(&[4, 4, 3], rng);
    let w = randn(&[4, 4, 3], rng);
    check_store(check, &store, &names, vec![img], |g, x| {
        let e = backbone::modality_image_embedding(g, &cfg, x[0], 0)?;
        Ok(readout(&mut g.tape, e, &w)?)
    })
}

fn small_store(build: impl FnOnce(&mut Init) -> Result<()>, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    build(&mut Init::new(&mut store, rng.random()))?;
    jitter(&mut store, 0.1, rng);
    Ok(store)
}

fn patch_merge(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (d, out) = (rng.random_range(1..=3), rng.random_range(1..=4));
    let store = small_store(|i| i.linear("m", ParamGroup::Trunk, 4 * d, out, false), rng)?;
    let x = randn(&[4, 2, d], rng);
    let w = randn(&[2, 1, out], rng);
    check_store(check, &store, &["m.weight".into()], vec![x], |g, v| {
        let y = nn::patch_merge(g, v[0], "m")?;
        Ok(readout(&mut g.tape, y, &w)?)
    })
}

fn patch_expand(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (d, out) = (rng.random_range(1..=4), rng.random_range(1..=3));
    let store = small_store(|i| i.linear("e", ParamGroup::Trunk, d, 4 * out, false), rng)?;
    let x = randn(&[2, 3, d], rng);
    let w = randn(&[4, 6, out], rng);
    check_store(check, &store, &["e.weight".into()], vec![x], |g, v| {
        let y = nn::patch_expand(g, v[0], "e")?;
        Ok(readout(&mut g.tape, y, &w)?)
    })
}

fn cross_attention(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let heads = rng.random_range(1..=2);
    let d = 2 * heads;
    let (z, s) = (rng.random_range(1..=3), rng.random_range(2..=5));
    let kind = [ScoreMap::Scaled, ScoreMap::Raw, ScoreMap::Softmax][rng.random_range(0..3)];
    let inputs = vec![
        randn(&[z, d], rng),
        randn(&[s, d], rng),
        randn(&[d, d], rng),
        randn(&[d, d], rng),
        randn(&[d, d], rng),
        randn(&[d, d], rng),
    ];
    let (wo, wm) = (randn(&[z, d], rng), randn(&[z, heads, s], rng));
    Ok(check.run(
        |t, v| {
            let w = AttentionWeights {
                wq: v[2],
                wk: v[3],
                wv: v[4],
                wo: v[5],
            };
            let r = nn::multi_head_cross_attention(t, v[0], v[1], &w, heads, Some(kind)).map_err(to_tensor_error)?;
            let a = readout(t, r.out, &wo)?;
            let b = readout(t, r.maps.expect("maps requested"), &wm)?;
            t.add(a, b)
        },
        &inputs,
    )?)
}

fn block_check(rng: &mut ChaCha8Rng, check: &GradCheck, calibrated: bool) -> Result<GradCheckReport> {
    let (heads, s, z) = (2, rng.random_range(2..=5), 2);
    let d = 4;
    let e = 3;
    let store = small_store(
        |i| {
            i.block("blk", ParamGroup::Trunk, d)?;
            if calibrated {
                let [w1, w2, w3] = nn::calibration_names("blk");
                i.uniform(&w1, ParamGroup::Calibration, &[z], 1.0)?;
                i.uniform(&w2, ParamGroup::Calibration, &[e, d], 1.0)?;
                i.uniform(&w3, ParamGroup::Calibration, &[e, d], 1.0)?;
            }
            Ok(())
        },
        rng,
    )?;
    let names = names_with(&store, |_, _| true);
    let mut extra = vec![randn(&[s, d], rng)];
    if calibrated {
        extra.push(randn(&[z, e], rng));
    }
    let w = randn(&[s, d], rng);
    check_store(check, &store, &names, extra, |g, v| {
        let calib = if calibrated { Calibration::Query(v[1]) } else { Calibration::Off };
        let y = nn::transformer_block(g, v[0], "blk", heads, calib)?;
        Ok(readout(&mut g.tape, y, &w)?)
    })
}

fn plain_block(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    block_check(rng, check, false)
}

fn calibrated_block(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    block_check(rng, check, true)
}

fn sparse(check: &GradCheck, n: usize) -> GradCheck {
    let mut c = check.clone();
    c.max_elements = Some(c.max_elements.map_or(n, |m| m.min(n)));
    c
}

fn encoder(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V3, rng)?;
    let names = names_with(&store, |n, _| n.starts_with("encoder.") || n.starts_with("calib.encoder."));
    let img = randn(&[cfg.height, cfg.width, 3], rng);
    let (w0, w3) = (randn(&[8, 8, 4], rng), randn(&[1, 1, 16], rng));
    check_store(&sparse(check, 3), &store, &names, vec![img], |g, v| {
        let skips = backbone::encode(g, &cfg, v[0], 0)?;
        let a = readout(&mut g.tape, skips[0], &w0)?;
        let b = readout(&mut g.tape, skips[3], &w3)?;
        Ok(g.tape.add(a, b)?)
    })
}

fn segmentation_model(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V1, rng)?;
    let m = rng.random_range(0..2);
    let names = names_with(&store, |_, g| g != ParamGroup::Eam);
    let img = randn(&[cfg.height, cfg.width, 3], rng);
    let w = randn(&[cfg.height, cfg.width, cfg.classes], rng);
    check_store(&sparse(check, 2), &store, &names, vec![img], |g, v| {
        let seg = backbone::segment(g, &cfg, v[0], m)?;
        Ok(readout(&mut g.tape, seg.logits, &w)?)
    })
}

fn class_embedding_update(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V2, rng)?;
    let names = names_with(&store, |n, _| n.starts_with("eam.m0.s1."));
    let (h, w) = cfg.grid(2);
    let d = cfg.embed_width();
    let extra = vec![randn(&[cfg.classes, d], rng), randn(&[h, w, d], rng)];
    let (wq, wa) = (randn(&[cfg.classes, d], rng), randn(&[cfg.classes, cfg.heads, h, w], rng));
    check_store(check, &store, &names, extra, |g, v| {
        let (q, a) = eam::update_class_embeddings(g, &cfg, "eam.m0.s1", v[0], v[1])?;
        let x = readout(&mut g.tape, q, &wq)?;
        let y = readout(&mut g.tape, a, &wa)?;
        Ok(g.tape.add(x, y)?)
    })
}

fn semantic_correlation(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (z, d, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let inputs = vec![randn(&[z, d], rng), randn(&[z, n, h, w], rng), randn(&[z, d, n], rng)];
    let wt = randn(&[z, z], rng);
    Ok(check.run(
        |t, v| {
            let e = eam::semantic_correlations(t, v[0], v[1], v[2]).map_err(to_tensor_error)?;
            readout(t, e, &wt)
        },
        &inputs,
    )?)
}

fn eam_cascade(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V2, rng)?;
    let names = names_with(&store, |n, _| n.starts_with("eam.m1."));
    let taps: Vec<Tensor> = (0..4)
        .map(|i| {
            let (h, w) = cfg.grid(i);
            randn(&[h, w, cfg.widths()[i]], rng)
        })
        .collect();
    let z = cfg.classes;
    let we: Vec<Tensor> = (0..3).map(|_| randn(&[z, z], rng)).collect();
    let wa: Vec<Tensor> = (0..3)
        .map(|k| {
            let (h, w) = cfg.grid(2 - k);
            randn(&[h, w, z], rng)
        })
        .collect();
    check_store(&sparse(check, 4), &store, &names, taps, |g, v| {
        let feats = backbone::MultiScaleFeatures {
            taps: [v[0], v[1], v[2], v[3]],
        };
        let out = eam::run_eam_cascade(g, &cfg, &feats, 1, true)?;
        let mut acc = readout(&mut g.tape, out.aux_logits[0], &wa[0])?;
        for k in 0..3 {
            if k > 0 {
                let a = readout(&mut g.tape, out.aux_logits[k], &wa[k])?;
                acc = g.tape.add(acc, a)?;
            }
            let e = readout(&mut g.tape, out.correlations.expect("requested")[k], &we[k])?;
            acc = g.tape.add(acc, e)?;
        }
        Ok(acc)
    })
}

fn seg_loss(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (h, w, z) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
    let lab = labels(h * w, z, rng);
    Ok(check.run(
        |t, v| losses::seg_loss(t, v[0], &lab).map_err(to_tensor_error),
        &[randn(&[h, w, z], rng)],
    )?)
}

fn aux_loss(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let z = rng.random_range(2..=3);
    let lab = labels(16, z, rng);
    let inputs = vec![randn(&[4, 4, z], rng), randn(&[2, 2, z], rng), randn(&[1, 1, z], rng)];
    Ok(check.run(
        |t, v| losses::aux_loss(t, v, &lab, 4, 4).map_err(to_tensor_error),
        &inputs,
    )?)
}

fn mcr_loss(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (z, d) = (rng.random_range(1..=4), rng.random_range(1..=5));
    Ok(check.run(
        |t, v| losses::mcr_loss(t, v[0], v[1]).map_err(to_tensor_error),
        &[randn(&[z, d], rng), randn(&[z, d], rng)],
    )?)
}

fn icr_loss(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let z = rng.random_range(2..=4);
    let tau = rng.random_range(0.5..8.0);
    let inputs: Vec<Tensor> = (0..6).map(|_| randn(&[z, z], rng)).collect();
    Ok(check.run(
        |t, v| losses::icr_loss(t, &v[..3], &v[3..], tau).map_err(to_tensor_error),
        &inputs,
    )?)
}

/// The full objective on a two-class, 4×4 instance of two modalities:
/// per-modality features, class embeddings, a shared linear segmentation
/// head, attention maps, auxiliary projection and filtering kernels.
fn objective_toy(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (z, d, n, s) = (2, 4, 2, 4);
    let lab: Vec<Vec<u8>> = (0..2).map(|_| labels(s * s, z, rng)).collect();
    let inputs = vec![
        randn(&[s, s, d], rng),  // 0: features, modality 0
        randn(&[s, s, d], rng),  // 1: features, modality 1
        randn(&[z, d], rng),     // 2: class embeddings, modality 0
        randn(&[z, d], rng),     // 3: class embeddings, modality 1
        randn(&[d, d], rng),     // 4: query projection
        randn(&[d, d], rng),     // 5: key projection
        randn(&[z, d, n], rng),  // 6: filtering kernels
        randn(&[z * n, z], rng), // 7: aux weight
        randn(&[z], rng),        // 8: aux bias
        randn(&[d, z], rng),     // 9: head weight
        randn(&[z], rng),        // 10: head bias
    ];
    let weights = LossWeights::default();
    Ok(check.run(
        |t, v| {
            let mut parts = losses::LossParts::default();
            let mut corr = Vec::new();
            for m in 0..2 {
                let logits = t.linear(v[m], v[9], Some(v[10]))?;
                parts.seg.push(losses::seg_loss(t, logits, &lab[m]).map_err(to_tensor_error)?);
                let tokens = t.reshape(v[m], &[s * s, d])?;
                let a = nn::attention_maps(t, v[2 + m], tokens, v[4], v[5], n, ScoreMap::Scaled)
                    .map_err(to_tensor_error)?;
                let a = t.reshape(a, &[z, n, s, s])?;
                let ap = t.permute(a, &[2, 3, 0, 1])?;
                let ap = t.reshape(ap, &[s, s, z * n])?;
                let aux = t.linear(ap, v[7], Some(v[8]))?;
                parts.aux.push(losses::aux_loss(t, &[aux], &lab[m], s, s).map_err(to_tensor_error)?);
                corr.push(eam::semantic_correlations(t, v[2 + m], a, v[6]).map_err(to_tensor_error)?);
            }
            parts.mcr = Some(losses::mcr_loss(t, v[2], v[3]).map_err(to_tensor_error)?);
            parts.icr = Some(losses::icr_loss(t, &corr[..1], &corr[1..], weights.tau).map_err(to_tensor_error)?);
            let (total, _) = losses::total_loss(t, &parts, &weights).map_err(to_tensor_error)?;
            Ok(total)
        },
        &inputs,
    )?)
}

/// One training objective of the minimal V3 model with consistency terms,
/// differentiated with respect to every trainable tensor.
fn objective_model(rng: &mut ChaCha8Rng, check: &GradCheck) -> Result<GradCheckReport> {
    let (cfg, store) = minimal(Variant::V3, rng)?;
    let names = names_with(&store, |_, _| true);
    let items: Vec<TrainItem> = (0..2)
        .map(|_| TrainItem {
            image: randn(&[cfg.height, cfg.width, 3], rng),
            labels: labels(cfg.height * cfg.width, cfg.classes, rng),
        })
        .collect();
    let weights = LossWeights::default();
    check_store(&sparse(check, 2), &store, &names, Vec::new(), |g, _| {
        let batches = vec![vec![&items[0]], vec![&items[1]]];
        Ok(step_loss(g, &cfg, &weights, &batches)?.0)
    })
}
