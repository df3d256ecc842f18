//! Training objectives: cross-entropy plus soft Dice for segmentation and
//! auxiliary maps, cosine alignment of class embeddings across modalities,
//! symmetric KL between per-image correlation rows, and their weighted sum.

use mmseg_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive smoothing in each per-class soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Lower clamp on row norms in the cosine alignment.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Auxiliary multi-scale loss weight.
    pub alpha: f64,
    /// Class-embedding alignment weight.
    pub beta: f64,
    /// Correlation consistency weight.
    pub gamma: f64,
    /// Softmax temperature of the correlation rows.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 1.0,
            gamma: 1.0,
            tau: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma >= 0.0 && self.tau > 0.0;
        if !ok || ![self.alpha, self.beta, self.gamma, self.tau].iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelRange { label: bad, classes });
    }
    Ok(())
}

fn flatten_logits(t: &mut Tape, logits: Var, labels: &[u8]) -> Result<(Var, usize)> {
    let shape = t.shape(logits).to_vec();
    let z = *shape.last().ok_or_else(|| Error::config("scalar logits"))?;
    let rows = shape.iter().product::<usize>() / z;
    if rows != labels.len() {
        return Err(Error::config(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    check_labels(labels, z)?;
    Ok((t.reshape(logits, &[rows, z])?, z))
}

/// Mean pixel cross-entropy of channels-last logits `[..., Z]`.
pub fn cross_entropy(t: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let (x, _) = flatten_logits(t, logits, labels)?;
    let lp = t.log_softmax(x, 1)?;
    ce_from_log_probs(t, lp, labels)
}

fn ce_from_log_probs(t: &mut Tape, lp: Var, labels: &[u8]) -> Result<Var> {
    let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let picked = t.gather_rows(lp, &idx)?;
    let m = t.mean_all(picked)?;
    Ok(t.scale(m, -1.0)?)
}

/// `1 − mean_c (2Σp·g + s) / (Σp + Σg + s)` over all `Z` classes. A class
/// absent from the labels with no predicted mass scores 1 and adds no loss.
pub fn soft_dice_loss(t: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let (x, z) = flatten_logits(t, logits, labels)?;
    let p = t.softmax(x, 1)?;
    dice_from_probs(t, p, labels, z)
}

fn dice_from_probs(t: &mut Tape, p: Var, labels: &[u8], z: usize) -> Result<Var> {
    let rows = labels.len();
    let mut onehot = vec![0.0; rows * z];
    let mut counts = vec![0.0; z];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * z + l as usize] = 1.0;
        counts[l as usize] += 1.0;
    }
    let g = t.constant(Tensor::new([rows, z], onehot)?);
    let inter = t.mul(p, g)?;
    let inter = t.sum_axes(inter, &[0])?;
    let num = t.scale(inter, 2.0)?;
    let num = t.add_scalar(num, DICE_SMOOTH)?;
    let psum = t.sum_axes(p, &[0])?;
    let gsum = t.constant(Tensor::new([1, z], counts)?);
    let den = t.add(psum, gsum)?;
    let den = t.add_scalar(den, DICE_SMOOTH)?;
    let dice = t.div(num, den)?;
    let m = t.mean_all(dice)?;
    let neg = t.scale(m, -1.0)?;
    Ok(t.add_scalar(neg, 1.0)?)
}

/// Cross-entropy plus soft Dice.
pub fn seg_loss(t: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let (x, z) = flatten_logits(t, logits, labels)?;
    let lp = t.log_softmax(x, 1)?;
    let ce = ce_from_log_probs(t, lp, labels)?;
    let p = t.exp(lp)?;
    let dice = dice_from_probs(t, p, labels, z)?;
    Ok(t.add(ce, dice)?)
}

/// Nearest-neighbor downsampling of an `h×w` label map to `th×tw`, sampling
/// the center of each source cell.
pub fn downsample_nearest(labels: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = ((2 * y + 1) * h / (2 * th)).min(h - 1);
        for x in 0..tw {
            let sx = ((2 * x + 1) * w / (2 * tw)).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

/// Sum over scales of [`seg_loss`] on `[H_λ, W_λ, Z]` logits against
/// full-resolution labels downsampled to each scale.
pub fn aux_loss(t: &mut Tape, aux_logits: &[Var], labels: &[u8], h: usize, w: usize) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &l in aux_logits {
        let s = t.shape(l).to_vec();
        let small = downsample_nearest(labels, h, w, s[0], s[1]);
        let term = seg_loss(t, l, &small)?;
        total = Some(match total {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::config("aux loss needs at least one scale"))
}

/// `Σ_i (1 − cos(Q₁^i, Q₂^i))`.
pub fn mcr_loss(t: &mut Tape, q1: Var, q2: Var) -> Result<Var> {
    let z = t.shape(q1)[0] as f64;
    let cos = t.cosine_rows(q1, q2, COSINE_EPS)?;
    let s = t.sum_all(cos)?;
    let neg = t.scale(s, -1.0)?;
    Ok(t.add_scalar(neg, z)?)
}

/// Symmetric KL between row-wise softmaxes of `a/τ` and `b/τ`, summed over rows.
fn symmetric_kl(t: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let sa = t.scale(a, 1.0 / tau)?;
    let sb = t.scale(b, 1.0 / tau)?;
    let la = t.log_softmax(sa, 1)?;
    let lb = t.log_softmax(sb, 1)?;
    let kl_ab = kl_term(t, la, lb)?;
    let kl_ba = kl_term(t, lb, la)?;
    Ok(t.add(kl_ab, kl_ba)?)
}

/// `Σ p (log p − log q)` from log-probabilities.
fn kl_term(t: &mut Tape, lp: Var, lq: Var) -> Result<Var> {
    let p = t.exp(lp)?;
    let d = t.sub(lp, lq)?;
    let m = t.mul(p, d)?;
    Ok(t.sum_all(m)?)
}

/// `Σ_λ Σ_i [KL(σ(E₁/τ) ‖ σ(E₂/τ)) + KL(σ(E₂/τ) ‖ σ(E₁/τ))]` over paired
/// `[Z, Z]` correlation matrices.
pub fn icr_loss(t: &mut Tape, e1: &[Var], e2: &[Var], tau: f64) -> Result<Var> {
    if e1.len() != e2.len() || e1.is_empty() {
        return Err(Error::config(format!("{} vs {} correlation scales", e1.len(), e2.len())));
    }
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in e1.iter().zip(e2) {
        let term = symmetric_kl(t, a, b, tau)?;
        total = Some(match total {
            None => term,
            Some(acc) => t.add(acc, term)?,
        });
    }
    Ok(total.unwrap())
}

/// Inputs to [`total_loss`]: one segmentation and one auxiliary term per
/// modality, plus the optional consistency terms.
#[derive(Clone, Debug, Default)]
pub struct LossParts {
    pub seg: Vec<Var>,
    pub aux: Vec<Var>,
    pub mcr: Option<Var>,
    pub icr: Option<Var>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: Vec<f64>,
    pub aux: Vec<f64>,
    pub mcr: f64,
    pub icr: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the logged parts with `w` in the same order as
    /// [`total_loss`].
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut total = self.seg.iter().fold(0.0, |a, b| a + b);
        if w.alpha != 0.0 && !self.aux.is_empty() {
            total += w.alpha * self.aux.iter().fold(0.0, |a, b| a + b);
        }
        if w.beta != 0.0 {
            total += w.beta * self.mcr;
        }
        if w.gamma != 0.0 {
            total += w.gamma * self.icr;
        }
        total
    }

    pub fn is_finite(&self) -> bool {
        self.seg.iter().chain(&self.aux).all(|v| v.is_finite())
            && self.mcr.is_finite()
            && self.icr.is_finite()
            && self.total.is_finite()
    }
}

fn sum_vars(t: &mut Tape, vs: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vs {
        acc = Some(match acc {
            None => v,
            Some(a) => t.add(a, v)?,
        });
    }
    Ok(acc)
}

/// `Σ seg + α Σ aux + β mcr + γ icr`. Terms with zero weight are skipped.
pub fn total_loss(t: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let scalar = |t: &Tape, v: Var| t.value(v).item();
    let mut total = match sum_vars(t, &parts.seg)? {
        Some(v) => v,
        None => t.constant(Tensor::scalar(0.0)),
    };
    let mut breakdown = LossBreakdown {
        seg: parts.seg.iter().map(|&v| scalar(t, v)).collect::<Result<_, _>>()?,
        aux: parts.aux.iter().map(|&v| scalar(t, v)).collect::<Result<_, _>>()?,
        ..Default::default()
    };
    if w.alpha != 0.0 {
        if let Some(a) = sum_vars(t, &parts.aux)? {
            let a = t.scale(a, w.alpha)?;
            total = t.add(total, a)?;
        }
    }
    if let Some(m) = parts.mcr {
        breakdown.mcr = scalar(t, m)?;
        if w.beta != 0.0 {
            let m = t.scale(m, w.beta)?;
            total = t.add(total, m)?;
        }
    }
    if let Some(i) = parts.icr {
        breakdown.icr = scalar(t, i)?;
        if w.gamma != 0.0 {
            let i = t.scale(i, w.gamma)?;
            total = t.add(total, i)?;
        }
    }
    breakdown.total = scalar(t, total)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn value(t: &Tape, v: Var) -> f64 {
        t.value(v).item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_z() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([3, 3, 4]));
        let labels = [0, 1, 2, 3, 0, 1, 2, 3, 1];
        let ce = cross_entropy(&mut t, x, &labels).unwrap();
        assert!((value(&t, ce) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_approach_zero() {
        let labels = [0u8, 1, 1, 0];
        let mut data = Vec::new();
        for &l in &labels {
            data.extend(if l == 0 { [40.0, -40.0] } else { [-40.0, 40.0] });
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2, 2, 2], data).unwrap());
        let l = seg_loss(&mut t, x, &labels).unwrap();
        let v = value(&t, l);
        assert!((0.0..1e-9).contains(&v), "{v}");
    }

    #[test]
    fn hand_computed_two_class_loss() {
        // 2×2 image, logits per pixel [a, 0], labels [0, 1, 1, 1]
        let a = [1.0f64, 0.5, -1.0, 2.0];
        let labels = [0u8, 1, 1, 1];
        let mut data = Vec::new();
        for &v in &a {
            data.extend([v, 0.0]);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2, 2, 2], data).unwrap());
        let l = seg_loss(&mut t, x, &labels).unwrap();

        let p0: Vec<f64> = a.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let ce = -(p0[0].ln() + (1.0 - p0[1]).ln() + (1.0 - p0[2]).ln() + (1.0 - p0[3]).ln()) / 4.0;
        let i0 = p0[0];
        let i1 = (1.0 - p0[1]) + (1.0 - p0[2]) + (1.0 - p0[3]);
        let s0: f64 = p0.iter().sum();
        let s1 = 4.0 - s0;
        let d0 = (2.0 * i0 + DICE_SMOOTH) / (s0 + 1.0 + DICE_SMOOTH);
        let d1 = (2.0 * i1 + DICE_SMOOTH) / (s1 + 3.0 + DICE_SMOOTH);
        let expect = ce + 1.0 - (d0 + d1) / 2.0;
        assert!((value(&t, l) - expect).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 3]));
        assert!(matches!(seg_loss(&mut t, x, &[0, 3]), Err(Error::LabelRange { label: 3, classes: 3 })));
    }

    #[test]
    fn mcr_closed_forms() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn([4, 6], 1.0, &mut r);
        let neg = Tensor::new([4, 6], q.data().iter().map(|v| -v).collect()).unwrap();
        let mut t = Tape::new();
        let a = t.constant(q);
        let b = t.constant(neg);
        let same = mcr_loss(&mut t, a, a).unwrap();
        let anti = mcr_loss(&mut t, a, b).unwrap();
        assert!(value(&t, same).abs() < 1e-12);
        assert!((value(&t, anti) - 8.0).abs() < 1e-12);

        let e = t.constant(Tensor::eye(4));
        let rolled: Vec<f64> = (0..16).map(|k| if (k / 4 + 1) % 4 == k % 4 { 1.0 } else { 0.0 }).collect();
        let o = t.constant(Tensor::new([4, 4], rolled).unwrap());
        let orth = mcr_loss(&mut t, e, o).unwrap();
        assert_eq!(value(&t, orth), 4.0);
    }

    #[test]
    fn icr_scalar_kl_oracle() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([1, 2], vec![0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::new([1, 2], vec![1.0, 0.0]).unwrap());
        let l = icr_loss(&mut t, &[a], &[b], 4.0).unwrap();
        let p = [1.0 / (1.0 + 0.25f64.exp()), 1.0 / (1.0 + (-0.25f64).exp())];
        let q = [p[1], p[0]];
        let kl = |x: [f64; 2], y: [f64; 2]| x[0] * (x[0] / y[0]).ln() + x[1] * (x[1] / y[1]).ln();
        let expect = kl(p, q) + kl(q, p);
        assert!((value(&t, l) - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_leave_segmentation_only() {
        let mut t = Tape::new();
        let s1 = t.constant(Tensor::scalar(0.7));
        let s2 = t.constant(Tensor::scalar(0.2));
        let a = t.constant(Tensor::scalar(5.0));
        let m = t.constant(Tensor::scalar(3.0));
        let parts = LossParts {
            seg: vec![s1, s2],
            aux: vec![a, a],
            mcr: Some(m),
            icr: Some(m),
        };
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            tau: 4.0,
        };
        let (total, b) = total_loss(&mut t, &parts, &w).unwrap();
        assert_eq!(value(&t, total), 0.7 + 0.2);
        assert_eq!(b.recombine(&w), b.total);
    }

    #[test]
    fn downsampling_picks_cell_centers() {
        let labels: Vec<u8> = (0..16).collect();
        assert_eq!(downsample_nearest(&labels, 4, 4, 2, 2), vec![5, 7, 13, 15]);
        assert_eq!(downsample_nearest(&labels, 4, 4, 4, 4), labels);
    }
}
