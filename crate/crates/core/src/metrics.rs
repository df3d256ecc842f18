//! Dice coefficient and average symmetric surface distance, with per-class
//! and per-modality aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H×W` map of class ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Data(format!(
                "{} labels for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&label) => Err(Error::LabelRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn fraction(&self, class: u8) -> f64 {
        self.data.iter().filter(|&&v| v == class).count() as f64 / self.data.len() as f64
    }

    fn same_extent(&self, other: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Data(format!(
                "extent mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `200·|P∩T| / (|P|+|T|)` in percent; `None` when the class is absent from
/// both maps.
pub fn dice_coefficient(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<Option<f64>> {
    pred.same_extent(truth)?;
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&truth.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(None);
    }
    Ok(Some(200.0 * inter as f64 / (p + t) as f64))
}

/// Pixels of `class` with at least one 4-neighbor outside the class (the
/// image border counts as outside).
pub fn boundary(map: &LabelMap, class: u8) -> Vec<(usize, usize)> {
    let (h, w) = (map.height, map.width);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && map.get(y as usize, x as usize) == class
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.get(y, x) != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = !inside(yi - 1, xi) || !inside(yi + 1, xi) || !inside(yi, xi - 1) || !inside(yi, xi + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed_sum(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> f64 {
    let mut total = 0.0;
    for &(y, x) in from {
        let mut best = f64::INFINITY;
        for &(v, u) in to {
            let dy = (y as f64 - v as f64) * spacing.0;
            let dx = (x as f64 - u as f64) * spacing.1;
            best = best.min(dy * dy + dx * dx);
        }
        total += best.sqrt();
    }
    total
}

/// Mean over both boundaries of each boundary pixel's Euclidean distance to
/// the other boundary, with per-axis `spacing = (dy, dx)`. `None` when either
/// mask is empty.
pub fn average_symmetric_surface_distance(
    pred: &LabelMap,
    truth: &LabelMap,
    class: u8,
    spacing: (f64, f64),
) -> Result<Option<f64>> {
    pred.same_extent(truth)?;
    let bp = boundary(pred, class);
    let bt = boundary(truth, class);
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    let a = directed_sum(&bp, &bt, spacing);
    let b = directed_sum(&bt, &bp, spacing);
    Ok(Some((a + b) / (bp.len() + bt.len()) as f64))
}

/// Rounds half away from zero at `digits` decimals, after snapping away
/// binary representation error (so 91.35 becomes 91.4, as printed tables do).
pub fn round_half_up(x: f64, digits: i32) -> f64 {
    let f = 10f64.powi(digits);
    let scaled: f64 = format!("{:.9}", x * f).parse().unwrap_or(x * f);
    scaled.round() / f
}

/// Mean, population standard deviation and counts of one quantity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    /// Entries excluded because the metric was undefined.
    pub undefined: usize,
}

impl Stat {
    pub fn from_options(values: &[Option<f64>]) -> Stat {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let undefined = values.len() - defined.len();
        if defined.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                undefined,
            };
        }
        let n = defined.len() as f64;
        let mean = defined.iter().sum::<f64>() / n;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
            count: defined.len(),
            undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u8,
    /// Percent.
    pub dice: Stat,
    /// Spacing units.
    pub asd: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub name: String,
    pub samples: usize,
    pub per_class: Vec<ClassReport>,
    /// Per-sample foreground-mean Dice aggregated over samples.
    pub dice: Stat,
    pub asd: Stat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: usize,
    pub modalities: Vec<ModalityReport>,
    /// Mean of the modality Dice means.
    pub overall_dice: f64,
    pub overall_asd: f64,
}

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub pred: LabelMap,
    pub truth: LabelMap,
    pub modality: usize,
}

fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = values.iter().flatten().copied().collect();
    if d.is_empty() {
        None
    } else {
        Some(d.iter().sum::<f64>() / d.len() as f64)
    }
}

/// Aggregates foreground classes `1..Z` per modality. Modalities without
/// samples are omitted.
pub fn report(samples: &[EvalSample], modality_names: &[String], classes: usize, spacing: (f64, f64)) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to report".into()));
    }
    let mut modalities = Vec::new();
    for (m, name) in modality_names.iter().enumerate() {
        let group: Vec<&EvalSample> = samples.iter().filter(|s| s.modality == m).collect();
        if group.is_empty() {
            continue;
        }
        let mut dice_rows: Vec<Vec<Option<f64>>> = Vec::new();
        let mut asd_rows: Vec<Vec<Option<f64>>> = Vec::new();
        for s in &group {
            let mut d = Vec::new();
            let mut a = Vec::new();
            for c in 1..classes {
                d.push(dice_coefficient(&s.pred, &s.truth, c as u8)?);
                a.push(average_symmetric_surface_distance(&s.pred, &s.truth, c as u8, spacing)?);
            }
            dice_rows.push(d);
            asd_rows.push(a);
        }
        let per_class = (1..classes)
            .map(|c| {
                let k = c - 1;
                ClassReport {
                    class: c as u8,
                    dice: Stat::from_options(&dice_rows.iter().map(|r| r[k]).collect::<Vec<_>>()),
                    asd: Stat::from_options(&asd_rows.iter().map(|r| r[k]).collect::<Vec<_>>()),
                }
            })
            .collect();
        let sample_dice: Vec<Option<f64>> = dice_rows.iter().map(|r| mean_defined(r)).collect();
        let sample_asd: Vec<Option<f64>> = asd_rows.iter().map(|r| mean_defined(r)).collect();
        modalities.push(ModalityReport {
            name: name.clone(),
            samples: group.len(),
            per_class,
            dice: Stat::from_options(&sample_dice),
            asd: Stat::from_options(&sample_asd),
        });
    }
    if modalities.is_empty() {
        return Err(Error::Data("no sample matches a named modality".into()));
    }
    let overall = |f: fn(&ModalityReport) -> f64| {
        let v: Vec<f64> = modalities.iter().map(f).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let overall_dice = overall(|m| m.dice.mean);
    let overall_asd = overall(|m| m.asd.mean);
    Ok(MetricReport {
        classes,
        modalities,
        overall_dice,
        overall_asd,
    })
}

impl MetricReport {
    pub fn modality(&self, name: &str) -> Option<&ModalityReport> {
        self.modalities.iter().find(|m| m.name == name)
    }

    /// One row per (modality, class, metric) plus modality and overall rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,class,metric,mean,std,count,undefined\n");
        for m in &self.modalities {
            for c in &m.per_class {
                for (metric, s) in [("dice", &c.dice), ("asd", &c.asd)] {
                    let _ = writeln!(
                        out,
                        "{},{},{metric},{},{},{},{}",
                        m.name, c.class, s.mean, s.std, s.count, s.undefined
                    );
                }
            }
            for (metric, s) in [("dice", &m.dice), ("asd", &m.asd)] {
                let _ = writeln!(
                    out,
                    "{},mean,{metric},{},{},{},{}",
                    m.name, s.mean, s.std, s.count, s.undefined
                );
            }
        }
        let _ = writeln!(out, "overall,mean,dice,{},,,", self.overall_dice);
        let _ = writeln!(out, "overall,mean,asd,{},,,", self.overall_asd);
        out
    }

    /// Text table: one row per modality with per-class Dice and the modality
    /// mean ± std, then the overall mean.
    pub fn to_table(&self) -> String {
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{:.1}", round_half_up(v, 1))
            } else {
                "n/a".to_string()
            }
        };
        let mut out = format!("{:<10}", "Dice (%)");
        for c in 1..self.classes {
            let _ = write!(out, "{:>9}", format!("class {c}"));
        }
        let _ = writeln!(out, "{:>16}{:>12}", "mean ± std", "ASD");
        for m in &self.modalities {
            let _ = write!(out, "{:<10}", m.name);
            for c in &m.per_class {
                let _ = write!(out, "{:>9}", fmt(c.dice.mean));
            }
            let _ = writeln!(
                out,
                "{:>16}{:>12}",
                format!("{} ± {}", fmt(m.dice.mean), fmt(m.dice.std)),
                format!("{:.2}", m.asd.mean)
            );
        }
        let _ = writeln!(
            out,
            "{:<10}{:>width$}{:>12}",
            "overall",
            fmt(self.overall_dice),
            format!("{:.2}", self.overall_asd),
            width = 9 * (self.classes - 1) + 16
        );
        out
    }
}
