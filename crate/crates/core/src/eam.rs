//! External attention modules: a three-scale cascade that refines class
//! embeddings against decoder taps and extracts per-image inter-class
//! correlation matrices.
//!
//! At each scale the class embeddings attend to the tap features; the
//! per-head score maps `A` (`[Z, N, H', W']`) feed three steps:
//!
//! * filtering: `K^i = Q^i W^i`, `S^{ij}(p) = Σ_n K^i_n A^j_n(p)`
//! * re-weighting: `gate^i = softmax_j(S^{ij})`, `B^{ij} = A^j ⊙ gate^{ij}`
//! * aggregation: `E^{ij} = Σ_{n,p} B^{ij}_n(p) / (Σ_p gate^{ij}(p) + ε)`
//!
//! Everything here lives under the `eam.` namespace and can be dropped at
//! inference without touching the segmentation path.

use mmseg_autodiff::{Tape, Tensor, Var};

use crate::backbone::{BackboneConfig, MultiScaleFeatures};
use crate::error::{Error, Result};
use crate::nn::{self, Init};
use crate::params::{Graph, ParamGroup};

/// Guard added to the aggregation denominator.
pub const AGGREGATION_EPS: f64 = 1e-8;

pub fn prefix(modality: usize) -> String {
    format!("eam.m{modality}")
}

pub fn query_name(modality: usize) -> String {
    format!("eam.m{modality}.query")
}

/// Registers one modality's class embeddings and three scales of EAM
/// weights. The last scale only produces maps, so it has no value path.
pub fn init_eam(init: &mut Init, cfg: &BackboneConfig, modality: usize) -> Result<()> {
    let p = prefix(modality);
    let g = ParamGroup::Eam;
    let (z, n) = (cfg.classes, cfg.heads);
    let d4 = cfg.embed_width();
    let d2 = cfg.widths()[0];
    init.uniform(&query_name(modality), g, &[z, d4], 1.0)?;
    for (scale, d) in [(1, d4), (2, d2), (3, d2)] {
        let s = format!("{p}.s{scale}");
        init.norm(&format!("{s}.norm_q"), g, d)?;
        init.norm(&format!("{s}.norm_f"), g, d)?;
        if scale < 3 {
            init.attention(&format!("{s}.mca"), g, d)?;
            init.norm(&format!("{s}.norm_mlp"), g, d)?;
            init.feed_forward(&format!("{s}.mlp"), g, d)?;
        } else {
            init.weight(&format!("{s}.mca.wq"), g, d, &[d, d])?;
            init.weight(&format!("{s}.mca.wk"), g, d, &[d, d])?;
        }
        init.weight(&format!("{s}.kernels"), g, d, &[z, d, n])?;
        init.linear(&format!("{s}.aux"), g, z * n, z, true)?;
    }
    init.linear(&format!("{p}.reduce"), g, d4, d2, true)?;
    Ok(())
}

fn grid_tokens(t: &mut Tape, f: Var) -> Result<(Var, usize, usize)> {
    let s = t.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::config(format!("tap must be [H, W, D], got {s:?}")));
    }
    Ok((t.reshape(f, &[s[0] * s[1], s[2]])?, s[0], s[1]))
}

/// `Q̂ = MCA(LN(Q), LN(F)) + Q`, `Q_out = MLP(LN(Q̂)) + Q̂`. Returns `Q_out`
/// and the maps `A: [Z, N, H', W']`.
pub fn update_class_embeddings(
    g: &mut Graph,
    cfg: &BackboneConfig,
    scale_prefix: &str,
    q: Var,
    tap: Var,
) -> Result<(Var, Var)> {
    let (f, h, w) = grid_tokens(&mut g.tape, tap)?;
    let z = g.tape.shape(q)[0];
    let qn = nn::layer_norm(g, q, &format!("{scale_prefix}.norm_q"))?;
    let fnorm = nn::layer_norm(g, f, &format!("{scale_prefix}.norm_f"))?;
    let wts = nn::attention_weights(g, &format!("{scale_prefix}.mca"))?;
    let mha = nn::multi_head_cross_attention(&mut g.tape, qn, fnorm, &wts, cfg.heads, Some(cfg.score_map))?;
    let q_hat = g.tape.add(mha.out, q)?;
    let hn = nn::layer_norm(g, q_hat, &format!("{scale_prefix}.norm_mlp"))?;
    let m = nn::feed_forward(g, hn, &format!("{scale_prefix}.mlp"))?;
    let q_out = g.tape.add(m, q_hat)?;
    let a = g.tape.reshape(mha.maps.expect("maps requested"), &[z, cfg.heads, h, w])?;
    Ok((q_out, a))
}

/// Maps only, for the final scale whose refined embeddings have no consumer.
pub fn semantic_maps(g: &mut Graph, cfg: &BackboneConfig, scale_prefix: &str, q: Var, tap: Var) -> Result<Var> {
    let (f, h, w) = grid_tokens(&mut g.tape, tap)?;
    let z = g.tape.shape(q)[0];
    let qn = nn::layer_norm(g, q, &format!("{scale_prefix}.norm_q"))?;
    let fnorm = nn::layer_norm(g, f, &format!("{scale_prefix}.norm_f"))?;
    let wq = g.param(&format!("{scale_prefix}.mca.wq"))?;
    let wk = g.param(&format!("{scale_prefix}.mca.wk"))?;
    let a = nn::attention_maps(&mut g.tape, qn, fnorm, wq, wk, cfg.heads, cfg.score_map)?;
    Ok(g.tape.reshape(a, &[z, cfg.heads, h, w])?)
}

/// `[Z, 4C] → [Z, 2C]` channel projection.
pub fn reduce_embeddings(g: &mut Graph, modality: usize, q: Var) -> Result<Var> {
    nn::linear(g, q, &format!("{}.reduce", prefix(modality)))
}

/// `S: [Z, Z, H', W']` from `q: [Z, D]`, `a: [Z, N, H', W']` and kernels
/// `[Z, D, N]`.
pub fn semantic_filtering(t: &mut Tape, q: Var, a: Var, kernels: Var) -> Result<Var> {
    let (qs, as_, ks) = (t.shape(q).to_vec(), t.shape(a).to_vec(), t.shape(kernels).to_vec());
    if as_.len() != 4 || ks.len() != 3 || ks[0] != qs[0] || ks[1] != qs[1] || ks[2] != as_[1] || as_[0] != qs[0] {
        return Err(Error::config(format!(
            "filtering shapes q {qs:?}, maps {as_:?}, kernels {ks:?}"
        )));
    }
    let (z, d, n, h, w) = (qs[0], qs[1], as_[1], as_[2], as_[3]);
    let q3 = t.reshape(q, &[z, 1, d])?;
    let k = t.bmm(q3, kernels)?;
    let k = t.reshape(k, &[z, n])?;
    let ap = t.permute(a, &[1, 0, 2, 3])?;
    let ap = t.reshape(ap, &[n, z * h * w])?;
    let s = t.matmul(k, ap)?;
    Ok(t.reshape(s, &[z, z, h, w])?)
}

/// Gates `softmax` over the second (class `j`) axis of `s` and applies them
/// to the maps, broadcasting over heads. Returns `(B: [Z, Z, N, H', W'],
/// gate: [Z, Z, H', W'])`.
pub fn semantic_reweighting(t: &mut Tape, a: Var, s: Var) -> Result<(Var, Var)> {
    let as_ = t.shape(a).to_vec();
    let ss = t.shape(s).to_vec();
    if ss.len() != 4 || ss[1] != as_[0] || ss[2..] != as_[2..] {
        return Err(Error::config(format!("re-weighting shapes maps {as_:?}, scores {ss:?}")));
    }
    let (zi, z, n, h, w) = (ss[0], as_[0], as_[1], as_[2], as_[3]);
    let full = [zi, z, n, h, w];
    let gate = t.softmax(s, 1)?;
    let g5 = t.reshape(gate, &[zi, z, 1, h, w])?;
    let g5 = t.broadcast_to(g5, &full)?;
    let a5 = t.reshape(a, &[1, z, n, h, w])?;
    let a5 = t.broadcast_to(a5, &full)?;
    Ok((t.mul(a5, g5)?, gate))
}

/// `E: [Z, Z]` with `E^{ij} = Σ_{n,p} B^{ij}_n(p) / (Σ_p gate^{ij}(p) + ε)`.
pub fn semantic_aggregation(t: &mut Tape, b: Var, gate: Var) -> Result<Var> {
    let bs = t.shape(b).to_vec();
    let (zi, z) = (bs[0], bs[1]);
    let num = t.sum_axes(b, &[2, 3, 4])?;
    let num = t.reshape(num, &[zi, z])?;
    let den = t.sum_axes(gate, &[2, 3])?;
    let den = t.reshape(den, &[zi, z])?;
    let den = t.add_scalar(den, AGGREGATION_EPS)?;
    Ok(t.div(num, den)?)
}

/// Filtering, re-weighting and aggregation in one call.
pub fn semantic_correlations(t: &mut Tape, q: Var, a: Var, kernels: Var) -> Result<Var> {
    let s = semantic_filtering(t, q, a, kernels)?;
    let (b, gate) = semantic_reweighting(t, a, s)?;
    semantic_aggregation(t, b, gate)
}

/// Per-pixel class logits `[H', W', Z]` from maps `[Z, N, H', W']` via a
/// 1×1 projection over the flattened `Z·N` class/head axis.
pub fn aux_logits(g: &mut Graph, scale_prefix: &str, a: Var) -> Result<Var> {
    let s = g.tape.shape(a).to_vec();
    let (z, n, h, w) = (s[0], s[1], s[2], s[3]);
    let x = g.tape.permute(a, &[2, 3, 0, 1])?;
    let x = g.tape.reshape(x, &[h, w, z * n])?;
    nn::linear(g, x, &format!("{scale_prefix}.aux"))
}

#[derive(Clone, Copy, Debug)]
pub struct EamOutput {
    /// Class embeddings `Q: [Z, 4C]` used at scale 1.
    pub query: Var,
    /// `A₁..A₃`, each `[Z, N, H_λ, W_λ]`.
    pub maps: [Var; 3],
    /// `E₁..E₃`, each `[Z, Z]`; `None` when not requested.
    pub correlations: Option<[Var; 3]>,
    /// Refined embeddings `Q₁, Q₂`, each `[Z, 2C]`.
    pub refined: [Var; 2],
    /// Per-scale `[H_λ, W_λ, Z]` logits.
    pub aux_logits: [Var; 3],
}

/// Runs the three scales on one image's taps: stage-3 with `Q`, stage-2 with
/// `Q₁`, stage-1 with `Q₂`.
pub fn run_eam_cascade(
    g: &mut Graph,
    cfg: &BackboneConfig,
    taps: &MultiScaleFeatures,
    modality: usize,
    with_correlations: bool,
) -> Result<EamOutput> {
    if modality >= cfg.modalities {
        return Err(Error::UnknownModality(modality));
    }
    let p = prefix(modality);
    let q = g.param(&query_name(modality))?;

    let s1 = format!("{p}.s1");
    let (q_tilde, a1) = update_class_embeddings(g, cfg, &s1, q, taps.taps[2])?;
    let q1 = reduce_embeddings(g, modality, q_tilde)?;
    let s2 = format!("{p}.s2");
    let (q2, a2) = update_class_embeddings(g, cfg, &s2, q1, taps.taps[1])?;
    let s3 = format!("{p}.s3");
    let a3 = semantic_maps(g, cfg, &s3, q2, taps.taps[0])?;

    let maps = [a1, a2, a3];
    let scales = [&s1, &s2, &s3];
    let correlations = if with_correlations {
        let reps = [q, q1, q2];
        let mut e = [q; 3];
        for k in 0..3 {
            let kernels = g.param(&format!("{}.kernels", scales[k]))?;
            e[k] = semantic_correlations(&mut g.tape, reps[k], maps[k], kernels)?;
        }
        Some(e)
    } else {
        None
    };
    let mut aux = [q; 3];
    for k in 0..3 {
        aux[k] = aux_logits(g, scales[k], maps[k])?;
    }
    Ok(EamOutput {
        query: q,
        maps,
        correlations,
        refined: [q1, q2],
        aux_logits: aux,
    })
}

/// Row-major CSV of a `[Z, Z]` correlation matrix with a header row.
pub fn correlations_csv(e: &Tensor, class_names: &[String]) -> String {
    let z = e.shape()[0];
    let mut out = String::from("class");
    for n in class_names.iter().take(z) {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..z {
        out.push_str(class_names.get(i).map(String::as_str).unwrap_or("?"));
        for j in 0..z {
            out.push_str(&format!(",{}", e.at(&[i, j])));
        }
        out.push('\n');
    }
    out
}

/// Straight-line scalar-loop versions of filtering, re-weighting and
/// aggregation, used as oracles.
pub mod reference {
    use mmseg_autodiff::Tensor;

    /// `q: [Z, D]`, `a: [Z, N, H, W]`, `kernels: [Z, D, N]` → `[Z, Z, H, W]`.
    pub fn filtering(q: &Tensor, a: &Tensor, kernels: &Tensor) -> Tensor {
        let (z, d) = (q.shape()[0], q.shape()[1]);
        let (n, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
        let mut out = Tensor::zeros([z, z, h, w]);
        for i in 0..z {
            let mut k = vec![0.0; n];
            for (ni, kn) in k.iter_mut().enumerate() {
                for c in 0..d {
                    *kn += q.at(&[i, c]) * kernels.at(&[i, c, ni]);
                }
            }
            for j in 0..z {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for (ni, kn) in k.iter().enumerate() {
                            acc += kn * a.at(&[j, ni, y, x]);
                        }
                        out.data_mut()[((i * z + j) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    /// Returns `(B: [Z, Z, N, H, W], gate: [Z, Z, H, W])`.
    pub fn reweighting(a: &Tensor, s: &Tensor) -> (Tensor, Tensor) {
        let (z, n, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
        let zi = s.shape()[0];
        let mut gate = Tensor::zeros([zi, z, h, w]);
        let mut b = Tensor::zeros([zi, z, n, h, w]);
        for i in 0..zi {
            for y in 0..h {
                for x in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..z {
                        m = m.max(s.at(&[i, j, y, x]));
                    }
                    let mut tot = 0.0;
                    for j in 0..z {
                        tot += (s.at(&[i, j, y, x]) - m).exp();
                    }
                    for j in 0..z {
                        let gv = (s.at(&[i, j, y, x]) - m).exp() / tot;
                        gate.data_mut()[((i * z + j) * h + y) * w + x] = gv;
                        for ni in 0..n {
                            b.data_mut()[(((i * z + j) * n + ni) * h + y) * w + x] = a.at(&[j, ni, y, x]) * gv;
                        }
                    }
                }
            }
        }
        (b, gate)
    }

    /// `[Z, Z]` normalized sums.
    pub fn aggregation(b: &Tensor, gate: &Tensor, eps: f64) -> Tensor {
        let s = b.shape();
        let (zi, z, n, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut e = Tensor::zeros([zi, z]);
        for i in 0..zi {
            for j in 0..z {
                let mut num = 0.0;
                let mut den = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        for ni in 0..n {
                            num += b.at(&[i, j, ni, y, x]);
                        }
                        den += gate.at(&[i, j, y, x]);
                    }
                }
                e.data_mut()[i * z + j] = num / (den + eps);
            }
        }
        e
    }
}
