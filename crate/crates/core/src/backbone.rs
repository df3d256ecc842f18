//! U-shaped transformer encoder/decoder with per-modality image embeddings.
//!
//! Images enter channels-last as `[H, W, 3]`. The encoder cuts `P×P`
//! patches, then runs four stages of widths `[2C, 2C, 4C, 8C]` at strides
//! `[P, 2P, 4P, 8P]`, merging 2×2 neighborhoods between stages. The decoder
//! mirrors it with patch expansion and concatenate-then-project skip fusion,
//! exposing one tap per stage. The head expands stage-1 features back to full
//! resolution and projects to class logits.

use mmseg_autodiff::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::eam;
use crate::error::{Error, Result};
use crate::nn::{self, Calibration, Init, ScoreMap};
use crate::params::{Graph, ParamGroup, ParamStore};

/// Joint architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Modality-specific encoders, shared decoder.
    V1,
    /// Shared encoder and decoder.
    V2,
    /// Shared encoder and decoder with class-embedding channel calibration.
    V3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Base channel count `C`.
    pub channels: usize,
    /// Patch size `P`.
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Semantic classes `Z`, background included.
    pub classes: usize,
    /// Attention heads `N`.
    pub heads: usize,
    pub encoder_depths: [usize; 4],
    pub decoder_depths: [usize; 4],
    pub variant: Variant,
    pub modalities: usize,
    pub shared_head: bool,
    /// Quantity the EAM exposes as its semantic-aware maps.
    pub score_map: ScoreMap,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 4,
            patch: 4,
            height: 64,
            width: 64,
            classes: 4,
            heads: 4,
            encoder_depths: [2, 2, 2, 2],
            decoder_depths: [2, 2, 2, 2],
            variant: Variant::V3,
            modalities: 2,
            shared_head: true,
            score_map: ScoreMap::Scaled,
        }
    }
}

impl BackboneConfig {
    /// Smallest configuration used by the gradient checks: 16×16 input,
    /// two classes, `C = 2`, `P = 2`, one block per stage.
    pub fn minimal(variant: Variant) -> Self {
        BackboneConfig {
            channels: 2,
            patch: 2,
            height: 16,
            width: 16,
            classes: 2,
            heads: 2,
            encoder_depths: [1, 1, 1, 1],
            decoder_depths: [1, 1, 1, 1],
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.classes < 2 || self.heads == 0 || self.modalities == 0 {
            return fail("channels, heads and modalities must be positive and classes >= 2".into());
        }
        if self.classes > u8::MAX as usize + 1 {
            return fail(format!("{} classes do not fit u8 labels", self.classes));
        }
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return fail(format!("patch size {} must be a power of two >= 2", self.patch));
        }
        let q = 8 * self.patch;
        if !self.height.is_multiple_of(q) || !self.width.is_multiple_of(q) {
            return fail(format!(
                "input {}x{} not divisible by 8P = {q}",
                self.height, self.width
            ));
        }
        for w in self.widths() {
            if w % self.heads != 0 {
                return fail(format!("stage width {w} not divisible by {} heads", self.heads));
            }
        }
        if self.variant == Variant::V1 && self.modalities < 2 {
            return fail("V1 needs at least two modalities".into());
        }
        Ok(())
    }

    /// Stage widths `[2C, 2C, 4C, 8C]`.
    pub fn widths(&self) -> [usize; 4] {
        let c = self.channels;
        [2 * c, 2 * c, 4 * c, 8 * c]
    }

    /// Token grid of stage `i` (0-based).
    pub fn grid(&self, i: usize) -> (usize, usize) {
        let s = self.patch << i;
        (self.height / s, self.width / s)
    }

    /// Width of the class embeddings, `4C`.
    pub fn embed_width(&self) -> usize {
        4 * self.channels
    }

    pub fn encoder_prefix(&self, modality: usize) -> String {
        match self.variant {
            Variant::V1 => format!("encoder.m{modality}"),
            _ => "encoder".to_string(),
        }
    }

    pub fn head_prefix(&self, modality: usize) -> String {
        if self.shared_head {
            "head".to_string()
        } else {
            format!("head.m{modality}")
        }
    }

    /// Every transformer block prefix for `modality`, encoder then decoder.
    pub fn block_prefixes(&self, modality: usize) -> Vec<String> {
        let enc = self.encoder_prefix(modality);
        let mut out = Vec::new();
        for (i, &n) in self.encoder_depths.iter().enumerate() {
            out.extend((0..n).map(|j| format!("{enc}.s{}.b{j}", i + 1)));
        }
        for i in (0..4).rev() {
            out.extend((0..self.decoder_depths[i]).map(|j| format!("decoder.s{}.b{j}", i + 1)));
        }
        out
    }

    fn upsample_steps(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }
}

pub fn embed_prefix(modality: usize) -> String {
    format!("embed.m{modality}")
}

pub fn folded_name(modality: usize, block: &str, which: usize) -> String {
    format!("folded.m{modality}.{block}.phi{which}")
}

/// Builds a freshly initialized model (backbone, EAMs and, for V3,
/// calibration weights). Values depend only on `seed` and parameter names.
pub fn init_model(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let w = cfg.widths();
    let c2 = w[0];

    for m in 0..cfg.modalities {
        let p = embed_prefix(m);
        init.linear(&format!("{p}.fc1"), ParamGroup::Embedding, 3, 3, true)?;
        init.linear(&format!("{p}.fc2"), ParamGroup::Embedding, 3, 3, true)?;
    }

    let encoders: Vec<usize> = match cfg.variant {
        Variant::V1 => (0..cfg.modalities).collect(),
        _ => vec![0],
    };
    let enc_group = match cfg.variant {
        Variant::V1 => ParamGroup::ModalityEncoder,
        _ => ParamGroup::Trunk,
    };
    for &m in &encoders {
        let enc = cfg.encoder_prefix(m);
        let (h1, w1) = cfg.grid(0);
        init.linear(&format!("{enc}.patch.proj"), enc_group, 3 * cfg.patch * cfg.patch, c2, true)?;
        init.uniform(&format!("{enc}.patch.pos"), enc_group, &[h1, w1, c2], 0.02)?;
        init.norm(&format!("{enc}.patch.norm"), enc_group, c2)?;
        for i in 0..4 {
            for j in 0..cfg.encoder_depths[i] {
                init.block(&format!("{enc}.s{}.b{j}", i + 1), enc_group, w[i])?;
            }
            if i < 3 {
                init.linear(&format!("{enc}.merge{}", i + 1), enc_group, 4 * w[i], w[i + 1], false)?;
            }
        }
    }

    for j in 0..cfg.decoder_depths[3] {
        init.block(&format!("decoder.s4.b{j}"), ParamGroup::Trunk, w[3])?;
    }
    for i in (0..3).rev() {
        init.linear(&format!("decoder.expand{}", i + 1), ParamGroup::Trunk, w[i + 1], 4 * w[i], false)?;
        init.linear(&format!("decoder.fuse{}", i + 1), ParamGroup::Trunk, 2 * w[i], w[i], true)?;
        for j in 0..cfg.decoder_depths[i] {
            init.block(&format!("decoder.s{}.b{j}", i + 1), ParamGroup::Trunk, w[i])?;
        }
    }

    let heads: Vec<usize> = if cfg.shared_head { vec![0] } else { (0..cfg.modalities).collect() };
    let head_group = if cfg.shared_head { ParamGroup::Trunk } else { ParamGroup::ModalityHead };
    for m in heads {
        let hp = cfg.head_prefix(m);
        for k in 0..cfg.upsample_steps() {
            init.linear(&format!("{hp}.expand{}", k + 1), head_group, c2, 4 * c2, false)?;
        }
        init.linear(&format!("{hp}.proj"), head_group, c2, cfg.classes, true)?;
    }

    for m in 0..cfg.modalities {
        eam::init_eam(&mut init, cfg, m)?;
    }

    if cfg.variant == Variant::V3 {
        init_calibration(&mut init, cfg)?;
    }
    Ok(store)
}

/// Calibration weights start so that `Ω_m W = 𝟙` for every modality: `w₁` is
/// random and `W₂ = W₃` is the minimum-norm solution of that linear system
/// given the initial class embeddings, so each block starts out as an
/// uncalibrated one.
fn init_calibration(init: &mut Init, cfg: &BackboneConfig) -> Result<()> {
    let z = cfg.classes;
    let k = cfg.embed_width();
    let queries: Vec<Tensor> = (0..cfg.modalities)
        .map(|m| init.store.get(&eam::query_name(m)).cloned())
        .collect::<Result<_>>()?;
    let mut blocks: Vec<(String, usize)> = Vec::new();
    let w = cfg.widths();
    for m in 0..cfg.modalities {
        let enc = cfg.encoder_prefix(m);
        for i in 0..4 {
            for j in 0..cfg.encoder_depths[i] {
                let p = format!("{enc}.s{}.b{j}", i + 1);
                if !blocks.iter().any(|(b, _)| *b == p) {
                    blocks.push((p, w[i]));
                }
            }
        }
    }
    for i in (0..4).rev() {
        for j in 0..cfg.decoder_depths[i] {
            blocks.push((format!("decoder.s{}.b{j}", i + 1), w[i]));
        }
    }

    for (block, d) in blocks {
        let [n1, n2, n3] = nn::calibration_names(&block);
        init.uniform(&n1, ParamGroup::Calibration, &[z], 1.0)?;
        let w1 = init.store.get(&n1)?.clone();
        let omegas: Vec<Vec<f64>> = queries
            .iter()
            .map(|q| (0..k).map(|c| (0..z).map(|r| w1.data()[r] * q.at(&[r, c])).sum()).collect())
            .collect();
        let col = min_norm_ones(&omegas, k);
        let mut data = vec![0.0; k * d];
        for (r, &v) in col.iter().enumerate() {
            data[r * d..(r + 1) * d].fill(v);
        }
        let wt = Tensor::new([k, d], data)?;
        init.tensor(&n2, ParamGroup::Calibration, wt.clone())?;
        init.tensor(&n3, ParamGroup::Calibration, wt)?;
    }
    Ok(())
}

/// Minimum-norm `x` with `ω_m · x = 1` for every row `ω_m`, via the normal
/// equations `(Ω Ωᵀ) y = 𝟙`, `x = Ωᵀ y`.
fn min_norm_ones(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    let m = rows.len();
    let mut a: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut r: Vec<f64> = (0..m).map(|j| (0..k).map(|c| rows[i][c] * rows[j][c]).sum()).collect();
            r.push(1.0);
            r
        })
        .collect();
    for col in 0..m {
        let piv = (col..m)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        if p.abs() < 1e-12 {
            continue;
        }
        for r in 0..m {
            if r != col {
                let f = a[r][col] / p;
                for c in col..=m {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let y: Vec<f64> = (0..m)
        .map(|i| if a[i][i].abs() < 1e-12 { 0.0 } else { a[i][m] / a[i][i] })
        .collect();
    (0..k).map(|c| (0..m).map(|i| rows[i][c] * y[i]).sum()).collect()
}

/// Optional forward-pass interventions used by ablation checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace every encoder skip with zeros before fusion.
    pub zero_skips: bool,
}

/// Decoder taps per stage: `[H/P, W/P, 2C]`, `[H/2P, W/2P, 2C]`,
/// `[H/4P, W/4P, 4C]`, `[H/8P, W/8P, 8C]`.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub taps: [Var; 4],
}

#[derive(Clone, Copy, Debug)]
pub struct Segmentation {
    pub features: MultiScaleFeatures,
    /// `[H, W, Z]`
    pub logits: Var,
}

fn check_modality(cfg: &BackboneConfig, modality: usize) -> Result<()> {
    if modality >= cfg.modalities {
        return Err(Error::UnknownModality(modality));
    }
    Ok(())
}

/// Two per-pixel 3→3 affine layers with a gelu in between.
pub fn modality_image_embedding(g: &mut Graph, cfg: &BackboneConfig, image: Var, modality: usize) -> Result<Var> {
    check_modality(cfg, modality)?;
    let p = embed_prefix(modality);
    let h = nn::linear(g, image, &format!("{p}.fc1"))?;
    let h = g.tape.gelu(h)?;
    nn::linear(g, h, &format!("{p}.fc2"))
}

fn block_calibration(g: &mut Graph, cfg: &BackboneConfig, block: &str, modality: usize) -> Result<Calibration> {
    if cfg.variant != Variant::V3 {
        return Ok(Calibration::Off);
    }
    if g.has(&nn::calibration_names(block)[0]) {
        let q = g.param(&eam::query_name(modality)).map_err(|_| {
            Error::config(format!("calibrated block {block} needs class embeddings of modality {modality}"))
        })?;
        return Ok(Calibration::Query(q));
    }
    let (n1, n2) = (folded_name(modality, block, 1), folded_name(modality, block, 2));
    if g.has(&n1) && g.has(&n2) {
        return Ok(Calibration::Fixed {
            phi1: g.param(&n1)?,
            phi2: g.param(&n2)?,
        });
    }
    Err(Error::config(format!(
        "V3 block {block} has neither calibration weights nor folded scales"
    )))
}

fn run_blocks(g: &mut Graph, cfg: &BackboneConfig, x: Var, prefix: &str, depth: usize, modality: usize) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let mut t = g.tape.reshape(x, &[h * w, d])?;
    for j in 0..depth {
        let block = format!("{prefix}.b{j}");
        let calib = block_calibration(g, cfg, &block, modality)?;
        t = nn::transformer_block(g, t, &block, cfg.heads, calib)?;
    }
    Ok(g.tape.reshape(t, &[h, w, d])?)
}

/// Patch embedding and the four encoder stages. Returns each stage's output
/// grid (the skips).
pub fn encode(g: &mut Graph, cfg: &BackboneConfig, embedded: Var, modality: usize) -> Result<[Var; 4]> {
    check_modality(cfg, modality)?;
    let enc = cfg.encoder_prefix(modality);
    let (p, w) = (cfg.patch, cfg.widths());
    let (h1, w1) = cfg.grid(0);
    let t = &mut g.tape;
    let x = t.reshape(embedded, &[h1, p, w1, p, 3])?;
    let x = t.permute(x, &[0, 2, 1, 3, 4])?;
    let x = t.reshape(x, &[h1, w1, p * p * 3])?;
    let x = nn::linear(g, x, &format!("{enc}.patch.proj"))?;
    let pos = g.param(&format!("{enc}.patch.pos"))?;
    let x = g.tape.add(x, pos)?;
    let mut x = nn::layer_norm(g, x, &format!("{enc}.patch.norm"))?;

    let mut skips = [x; 4];
    for i in 0..4 {
        x = run_blocks(g, cfg, x, &format!("{enc}.s{}", i + 1), cfg.encoder_depths[i], modality)?;
        skips[i] = x;
        if i < 3 {
            x = nn::patch_merge(g, x, &format!("{enc}.merge{}", i + 1))?;
        }
        debug_assert_eq!(g.tape.shape(skips[i])[2], w[i]);
    }
    Ok(skips)
}

pub fn decode(
    g: &mut Graph,
    cfg: &BackboneConfig,
    skips: [Var; 4],
    modality: usize,
    opts: ForwardOptions,
) -> Result<MultiScaleFeatures> {
    let mut taps = [skips[3]; 4];
    let mut x = run_blocks(g, cfg, skips[3], "decoder.s4", cfg.decoder_depths[3], modality)?;
    taps[3] = x;
    for i in (0..3).rev() {
        let up = nn::patch_expand(g, x, &format!("decoder.expand{}", i + 1))?;
        let skip = if opts.zero_skips {
            let shape = g.tape.shape(skips[i]).to_vec();
            g.tape.constant(Tensor::zeros(shape))
        } else {
            skips[i]
        };
        let cat = g.tape.concat(&[up, skip], 2)?;
        let fused = nn::linear(g, cat, &format!("decoder.fuse{}", i + 1))?;
        x = run_blocks(g, cfg, fused, &format!("decoder.s{}", i + 1), cfg.decoder_depths[i], modality)?;
        taps[i] = x;
    }
    for (i, &t) in taps.iter().enumerate() {
        let (h, w) = cfg.grid(i);
        let expect = [h, w, cfg.widths()[i]];
        if g.tape.shape(t) != expect {
            return Err(Error::config(format!(
                "tap {} has shape {:?}, expected {expect:?}",
                i + 1,
                g.tape.shape(t)
            )));
        }
    }
    Ok(MultiScaleFeatures { taps })
}

/// Expands stage-1 features to full resolution and projects to `[H, W, Z]`.
pub fn head(g: &mut Graph, cfg: &BackboneConfig, tap1: Var, modality: usize) -> Result<Var> {
    let hp = cfg.head_prefix(modality);
    let mut x = tap1;
    for k in 0..cfg.upsample_steps() {
        x = nn::patch_expand(g, x, &format!("{hp}.expand{}", k + 1))?;
    }
    nn::linear(g, x, &format!("{hp}.proj"))
}

/// Full forward pass from an `[H, W, 3]` image.
pub fn segment(g: &mut Graph, cfg: &BackboneConfig, image: Var, modality: usize) -> Result<Segmentation> {
    segment_with(g, cfg, image, modality, ForwardOptions::default())
}

pub fn segment_with(
    g: &mut Graph,
    cfg: &BackboneConfig,
    image: Var,
    modality: usize,
    opts: ForwardOptions,
) -> Result<Segmentation> {
    let expect = [cfg.height, cfg.width, 3];
    if g.tape.shape(image) != expect {
        return Err(Error::config(format!(
            "image shape {:?}, expected {expect:?}",
            g.tape.shape(image)
        )));
    }
    let e = modality_image_embedding(g, cfg, image, modality)?;
    let skips = encode(g, cfg, e, modality)?;
    let features = decode(g, cfg, skips, modality, opts)?;
    let logits = head(g, cfg, features.taps[0], modality)?;
    Ok(Segmentation { features, logits })
}

/// Argmax label map for one image, using constants only.
pub fn predict(store: &ParamStore, cfg: &BackboneConfig, image: &Tensor, modality: usize) -> Result<Vec<u8>> {
    let mut g = Graph::inference(store);
    let x = g.tape.constant(image.clone());
    let seg = segment(&mut g, cfg, x, modality)?;
    Ok(g.tape.value(seg.logits).argmax_last().into_iter().map(|c| c as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        Tensor::randn([cfg.height, cfg.width, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn toy_config_tap_shapes() {
        let cfg = BackboneConfig::default();
        let store = init_model(&cfg, 3).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.tape.constant(image(&cfg, 1));
        let seg = segment(&mut g, &cfg, x, 0).unwrap();
        let shapes: Vec<Vec<usize>> = seg.features.taps.iter().map(|&t| g.tape.shape(t).to_vec()).collect();
        assert_eq!(shapes, vec![vec![16, 16, 8], vec![8, 8, 8], vec![4, 4, 16], vec![2, 2, 32]]);
        assert_eq!(g.tape.shape(seg.logits), &[64, 64, 4]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig {
            height: 60,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.height = 64;
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        assert!(BackboneConfig::minimal(Variant::V2).validate().is_ok());
    }

    #[test]
    fn calibration_starts_at_ones() {
        let cfg = BackboneConfig::minimal(Variant::V3);
        let store = init_model(&cfg, 5).unwrap();
        for m in 0..2 {
            let mut g = Graph::inference(&store);
            let q = g.param(&eam::query_name(m)).unwrap();
            for block in cfg.block_prefixes(m) {
                let [a, b, c] = nn::calibration_names(&block).map(|n| g.param(&n).unwrap());
                let (p1, p2) = nn::calibration_scales(&mut g.tape, a, b, c, q).unwrap();
                for &v in g.tape.value(p1).data().iter().chain(g.tape.value(p2).data()) {
                    assert!((v - 1.0).abs() < 1e-9, "{block}: {v}");
                }
            }
        }
    }

    #[test]
    fn unknown_modality_is_rejected() {
        let cfg = BackboneConfig::minimal(Variant::V2);
        let store = init_model(&cfg, 1).unwrap();
        assert!(matches!(
            predict(&store, &cfg, &image(&cfg, 0), 2),
            Err(Error::UnknownModality(2))
        ));
    }
}
