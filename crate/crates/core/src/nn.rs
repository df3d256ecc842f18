//! Attention building blocks: cross-attention, the pre-norm transformer block
//! with optional channel calibration, and patch merging/expanding.
//!
//! Token tensors are `[S, D]`; spatial grids are channels-last `[H, W, D]`.
//! Functions taking a [`Tape`] operate on explicit variables; functions
//! taking a [`Graph`] read their weights from the parameter store under a
//! dotted prefix.

use mmseg_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{name_rng, Graph, ParamGroup, ParamStore};

/// Which attention quantity is exposed as the semantic-aware map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMap {
    /// `q kᵀ / √d`, before the softmax.
    #[default]
    Scaled,
    /// `q kᵀ` without the temperature.
    Raw,
    /// Attention weights after the softmax.
    Softmax,
}

/// Single-head cross-attention. `q: [Z, D]`, `f: [S, D]`, projections
/// `[D, D']`. Returns `(softmax(s)·v, s)` with `s = q kᵀ/√D'` of shape `[Z, S]`.
pub fn cross_attention(t: &mut Tape, q: Var, f: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let dh = t.shape(wq)[1];
    let qp = t.matmul(q, wq)?;
    let kp = t.matmul(f, wk)?;
    let vp = t.matmul(f, wv)?;
    let kt = t.transpose(kp)?;
    let raw = t.matmul(qp, kt)?;
    let scores = t.scale(raw, 1.0 / (dh as f64).sqrt())?;
    let probs = t.softmax(scores, 1)?;
    let out = t.matmul(probs, vp)?;
    Ok((out, scores))
}

/// Packed multi-head projections: each `[D, D]`, head `h` owning columns
/// `h·D/N .. (h+1)·D/N` of `wq`, `wk`, `wv` and the matching rows of `wo`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaOutput {
    /// `[Z, D]`
    pub out: Var,
    /// `[Z, N, S]` when requested.
    pub maps: Option<Var>,
}

/// Multi-head cross-attention of `q: [Z, D]` over `f: [S, D]`.
pub fn multi_head_cross_attention(
    t: &mut Tape,
    q: Var,
    f: Var,
    w: &AttentionWeights,
    heads: usize,
    maps: Option<ScoreMap>,
) -> Result<MhaOutput> {
    let (z, d) = (t.shape(q)[0], t.shape(q)[1]);
    let s = t.shape(f)[0];
    if t.shape(f)[1] != d {
        return Err(Error::config(format!("query width {d} vs feature width {}", t.shape(f)[1])));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qp = t.linear(q, w.wq, None)?;
    let qp = t.reshape(qp, &[z, heads, dh])?;
    let qp = t.permute(qp, &[1, 0, 2])?;
    let kp = t.linear(f, w.wk, None)?;
    let kp = t.reshape(kp, &[s, heads, dh])?;
    let kp = t.permute(kp, &[1, 2, 0])?;
    let vp = t.linear(f, w.wv, None)?;
    let vp = t.reshape(vp, &[s, heads, dh])?;
    let vp = t.permute(vp, &[1, 0, 2])?;

    let raw = t.bmm(qp, kp)?;
    let scaled = t.scale(raw, 1.0 / (dh as f64).sqrt())?;
    let probs = t.softmax(scaled, 2)?;
    let ctx = t.bmm(probs, vp)?;
    let ctx = t.permute(ctx, &[1, 0, 2])?;
    let ctx = t.reshape(ctx, &[z, d])?;
    let out = t.linear(ctx, w.wo, None)?;

    let maps = match maps {
        None => None,
        Some(kind) => {
            let src = match kind {
                ScoreMap::Scaled => scaled,
                ScoreMap::Raw => raw,
                ScoreMap::Softmax => probs,
            };
            Some(t.permute(src, &[1, 0, 2])?)
        }
    };
    Ok(MhaOutput { out, maps })
}

/// Per-head score maps `[Z, N, S]` of `q: [Z, D]` against `f: [S, D]`
/// without the value path, for consumers that only need the maps.
pub fn attention_maps(t: &mut Tape, q: Var, f: Var, wq: Var, wk: Var, heads: usize, kind: ScoreMap) -> Result<Var> {
    let (z, d) = (t.shape(q)[0], t.shape(q)[1]);
    let s = t.shape(f)[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let qp = t.linear(q, wq, None)?;
    let qp = t.reshape(qp, &[z, heads, dh])?;
    let qp = t.permute(qp, &[1, 0, 2])?;
    let kp = t.linear(f, wk, None)?;
    let kp = t.reshape(kp, &[s, heads, dh])?;
    let kp = t.permute(kp, &[1, 2, 0])?;
    let raw = t.bmm(qp, kp)?;
    let src = match kind {
        ScoreMap::Raw => raw,
        ScoreMap::Scaled => t.scale(raw, 1.0 / (dh as f64).sqrt())?,
        ScoreMap::Softmax => {
            let scaled = t.scale(raw, 1.0 / (dh as f64).sqrt())?;
            t.softmax(scaled, 2)?
        }
    };
    Ok(t.permute(src, &[1, 0, 2])?)
}

/// Channel scales for one block's two residual branches.
#[derive(Clone, Copy, Debug)]
pub enum Calibration {
    /// No scaling; the branch outputs are added unchanged.
    Off,
    /// Derive `Φ = diag(Ω W)` from class embeddings `[Z, 4C]` via the block's
    /// calibration weights.
    Query(Var),
    /// Precomputed `[D]` scales.
    Fixed { phi1: Var, phi2: Var },
}

/// `Ω = w₁ Q`, `Φ₁ = Ω W₂`, `Φ₂ = Ω W₃`, each returned as a `[D]` vector.
pub fn calibration_scales(t: &mut Tape, w1: Var, w2: Var, w3: Var, q: Var) -> Result<(Var, Var)> {
    let z = t.shape(w1)[0];
    let row = t.reshape(w1, &[1, z])?;
    let omega = t.matmul(row, q)?;
    let d = t.shape(w2)[1];
    let p1 = t.matmul(omega, w2)?;
    let p1 = t.reshape(p1, &[d])?;
    let p2 = t.matmul(omega, w3)?;
    let p2 = t.reshape(p2, &[d])?;
    Ok((p1, p2))
}

/// Names of the calibration weights that belong to block `prefix`.
pub fn calibration_names(prefix: &str) -> [String; 3] {
    ["w1", "w2", "w3"].map(|k| format!("calib.{prefix}.{k}"))
}

pub fn linear(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.maybe_param(&format!("{prefix}.bias"))?;
    Ok(g.tape.linear(x, w, b)?)
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    Ok(g.tape.layer_norm(x, gain, bias)?)
}

pub fn attention_weights(g: &mut Graph, prefix: &str) -> Result<AttentionWeights> {
    Ok(AttentionWeights {
        wq: g.param(&format!("{prefix}.wq"))?,
        wk: g.param(&format!("{prefix}.wk"))?,
        wv: g.param(&format!("{prefix}.wv"))?,
        wo: g.param(&format!("{prefix}.wo"))?,
    })
}

/// Two-layer MLP with a gelu in between.
pub fn feed_forward(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

fn scale_channels(t: &mut Tape, x: Var, phi: Var) -> Result<Var> {
    let shape = t.shape(x).to_vec();
    let d = *shape.last().unwrap();
    let mut row = vec![1; shape.len()];
    row[shape.len() - 1] = d;
    let p = t.reshape(phi, &row)?;
    let p = t.broadcast_to(p, &shape)?;
    Ok(t.mul(x, p)?)
}

/// Pre-norm transformer block on tokens `[S, D]`:
/// `x' = x + Φ₁⊙MSA(LN(x))`, `out = x' + Φ₂⊙FFN(LN(x'))`.
pub fn transformer_block(g: &mut Graph, x: Var, prefix: &str, heads: usize, calib: Calibration) -> Result<Var> {
    let phi = match calib {
        Calibration::Off => None,
        Calibration::Fixed { phi1, phi2 } => Some((phi1, phi2)),
        Calibration::Query(q) => {
            let names = calibration_names(prefix);
            if !names.iter().all(|n| g.has(n)) {
                return Err(Error::config(format!("block {prefix} has no calibration weights")));
            }
            let [w1, w2, w3] = [&names[0], &names[1], &names[2]].map(|n| g.param(n));
            Some(calibration_scales(&mut g.tape, w1?, w2?, w3?, q)?)
        }
    };

    let h = layer_norm(g, x, &format!("{prefix}.norm1"))?;
    let w = attention_weights(g, &format!("{prefix}.attn"))?;
    let mut a = multi_head_cross_attention(&mut g.tape, h, h, &w, heads, None)?.out;
    if let Some((p1, _)) = phi {
        a = scale_channels(&mut g.tape, a, p1)?;
    }
    let x1 = g.tape.add(x, a)?;

    let h = layer_norm(g, x1, &format!("{prefix}.norm2"))?;
    let mut m = feed_forward(g, h, &format!("{prefix}.ffn"))?;
    if let Some((_, p2)) = phi {
        m = scale_channels(&mut g.tape, m, p2)?;
    }
    Ok(g.tape.add(x1, m)?)
}

/// Concatenates each 2×2 neighborhood of `[H, W, D]` into `4D` channels
/// (order: top-left, top-right, bottom-left, bottom-right) and projects with
/// `{prefix}.weight: [4D, D_out]`.
pub fn patch_merge(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let (h, w, d) = (s[0], s[1], s[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("patch_merge needs even extents, got {h}x{w}")));
    }
    let t = &mut g.tape;
    let y = t.reshape(x, &[h / 2, 2, w / 2, 2, d])?;
    let y = t.permute(y, &[0, 2, 1, 3, 4])?;
    let y = t.reshape(y, &[h / 2, w / 2, 4 * d])?;
    linear(g, y, prefix)
}

/// Projects `[H, W, D]` with `{prefix}.weight: [D, 4·D_out]` and unfolds the
/// result into `[2H, 2W, D_out]`.
pub fn patch_expand(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let (h, w) = (s[0], s[1]);
    let y = linear(g, x, prefix)?;
    let c4 = *g.tape.shape(y).last().unwrap();
    if !c4.is_multiple_of(4) {
        return Err(Error::config(format!("patch_expand projection width {c4} not divisible by 4")));
    }
    let c = c4 / 4;
    let t = &mut g.tape;
    let y = t.reshape(y, &[h, w, 2, 2, c])?;
    let y = t.permute(y, &[0, 2, 1, 3, 4])?;
    Ok(t.reshape(y, &[2 * h, 2 * w, c])?)
}

/// Registers freshly initialized parameters. Projection weights are uniform
/// in `±1/√fan_in`, biases zero, layer-norm gains one.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, seed }
    }

    pub fn tensor(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<()> {
        self.store.insert(name, group, value)
    }

    pub fn uniform(&mut self, name: &str, group: ParamGroup, shape: &[usize], bound: f64) -> Result<()> {
        let mut rng = name_rng(self.seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.store.insert(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn weight(&mut self, name: &str, group: ParamGroup, fan_in: usize, shape: &[usize]) -> Result<()> {
        self.uniform(name, group, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn linear(&mut self, prefix: &str, group: ParamGroup, cin: usize, cout: usize, bias: bool) -> Result<()> {
        self.weight(&format!("{prefix}.weight"), group, cin, &[cin, cout])?;
        if bias {
            self.tensor(&format!("{prefix}.bias"), group, Tensor::zeros([cout]))?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, group: ParamGroup, d: usize) -> Result<()> {
        self.tensor(&format!("{prefix}.gain"), group, Tensor::ones([d]))?;
        self.tensor(&format!("{prefix}.bias"), group, Tensor::zeros([d]))
    }

    pub fn attention(&mut self, prefix: &str, group: ParamGroup, d: usize) -> Result<()> {
        for k in ["wq", "wk", "wv", "wo"] {
            self.weight(&format!("{prefix}.{k}"), group, d, &[d, d])?;
        }
        Ok(())
    }

    pub fn feed_forward(&mut self, prefix: &str, group: ParamGroup, d: usize) -> Result<()> {
        self.linear(&format!("{prefix}.fc1"), group, d, 4 * d, true)?;
        self.linear(&format!("{prefix}.fc2"), group, 4 * d, d, true)
    }

    pub fn block(&mut self, prefix: &str, group: ParamGroup, d: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), group, d)?;
        self.attention(&format!("{prefix}.attn"), group, d)?;
        self.norm(&format!("{prefix}.norm2"), group, d)?;
        self.feed_forward(&format!("{prefix}.ffn"), group, d)
    }
}
