//! Multi-seed comparisons at toy scale: the variant grid, the few-shot
//! comparison against a single-modality baseline, and the temperature sweep.

use std::fmt::Write as _;

use mmseg_autodiff::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses;
use crate::metrics::MetricReport;
use crate::synthdata::{generate_dataset, DatasetSpec, Split};
use crate::train::config::{TrainConfig, TrainVariant};
use crate::train::evaluate::evaluate_on;
use crate::train::trainer::train_on;

/// Shared settings of a multi-seed experiment. Seed `s` trains with
/// `base.seed + s` on a dataset generated from `data_seed + s`.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub base: TrainConfig,
    /// Samples per modality before the 70/10/20 split.
    pub samples: usize,
    pub seeds: usize,
    pub data_seed: u64,
}

impl Protocol {
    pub fn new(base: TrainConfig, samples: usize, seeds: usize) -> Self {
        Protocol {
            base,
            samples,
            seeds,
            data_seed: 1000,
        }
    }

    fn run(&self, seed: usize, edit: impl Fn(&mut TrainConfig)) -> Result<MetricReport> {
        let ds = generate_dataset(&DatasetSpec::bimodal(self.samples, self.data_seed + seed as u64))?;
        let mut cfg = self.base.clone();
        cfg.seed = self.base.seed + seed as u64;
        cfg.log_path = None;
        cfg.checkpoint_path = None;
        edit(&mut cfg);
        let out = train_on(&cfg, &ds, None)?;
        evaluate_on(&out.checkpoint, &ds, Split::Test)
    }
}

/// Test-split Dice of one configuration across seeds.
#[derive(Clone, Debug)]
pub struct SeedSummary {
    pub label: String,
    /// Per seed, per modality mean Dice.
    pub per_seed: Vec<Vec<(String, f64)>>,
    pub overall: Vec<f64>,
}

impl SeedSummary {
    fn push(&mut self, r: &MetricReport) {
        self.per_seed.push(r.modalities.iter().map(|m| (m.name.clone(), m.dice.mean)).collect());
        self.overall.push(r.overall_dice);
    }

    /// Mean over seeds of the overall Dice.
    pub fn mean_overall(&self) -> f64 {
        mean(&self.overall)
    }

    /// Mean over seeds of one modality's Dice.
    pub fn mean_modality(&self, name: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .per_seed
            .iter()
            .map(|row| row.iter().find(|(n, _)| n == name).map(|(_, d)| *d))
            .collect::<Option<_>>()?;
        Some(mean(&v))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains every variant for every seed and collects test Dice.
pub fn ablate(protocol: &Protocol, variants: &[TrainVariant]) -> Result<Vec<SeedSummary>> {
    let mut out: Vec<SeedSummary> = variants
        .iter()
        .map(|v| SeedSummary {
            label: v.label().to_string(),
            per_seed: Vec::new(),
            overall: Vec::new(),
        })
        .collect();
    for seed in 0..protocol.seeds {
        for (v, row) in variants.iter().zip(out.iter_mut()) {
            let r = protocol.run(seed, |c| c.variant = *v)?;
            log::info!("{} seed {seed}: overall Dice {:.2}", v.label(), r.overall_dice);
            row.push(&r);
        }
    }
    Ok(out)
}

/// Joint training with `scarce` samples of `scarce_modality` (and all of the
/// others) against a single-modality baseline trained on those same samples.
pub fn few_shot(
    protocol: &Protocol,
    joint: TrainVariant,
    scarce_modality: &str,
    scarce: usize,
) -> Result<[SeedSummary; 2]> {
    let labels = [joint.label().to_string(), format!("baseline-{scarce_modality}")];
    let mut out = labels.map(|label| SeedSummary {
        label,
        per_seed: Vec::new(),
        overall: Vec::new(),
    });
    let spec = DatasetSpec::bimodal(protocol.samples, 0);
    let train_counts = crate::synthdata::split_counts(protocol.samples)[0];
    let counts: Vec<usize> = spec
        .profiles
        .iter()
        .map(|p| if p.name == scarce_modality { scarce } else { train_counts })
        .collect();
    for seed in 0..protocol.seeds {
        for (k, variant) in [joint, TrainVariant::Baseline].into_iter().enumerate() {
            let r = protocol.run(seed, |c| {
                c.variant = variant;
                c.few_shot = Some(counts.clone());
                c.baseline_modality = scarce_modality.to_string();
            })?;
            log::info!("{} seed {seed}: overall Dice {:.2}", out[k].label, r.overall_dice);
            out[k].push(&r);
        }
    }
    Ok(out)
}

/// Formats seed-averaged Dice per modality plus the overall mean.
pub fn comparison_table(rows: &[SeedSummary]) -> String {
    let names: Vec<String> = rows
        .first()
        .and_then(|r| r.per_seed.first())
        .map(|s| s.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut out = format!("{:<14}", "variant");
    for n in &names {
        let _ = write!(out, " {:>8}", format!("Dice {n}"));
    }
    let _ = writeln!(out, " {:>8}", "overall");
    for r in rows {
        let _ = write!(out, "{:<14}", r.label);
        for n in &names {
            match r.mean_modality(n) {
                Some(d) => {
                    let _ = write!(out, " {d:>8.2}");
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>8.2}", r.mean_overall());
    }
    out
}

/// One temperature of the sweep.
#[derive(Clone, Debug)]
pub struct TauPoint {
    pub tau: f64,
    /// Mean consistency loss over fixed random correlation pairs.
    pub icr_fixed: f64,
    /// Seed-averaged Dice after training with this temperature, if trained.
    pub dice: Option<SeedSummary>,
}

/// Consistency loss on `pairs` fixed random correlation pairs per `tau`,
/// optionally followed by training runs at each temperature.
pub fn sweep_tau(taus: &[f64], pairs: usize, protocol: Option<&Protocol>) -> Result<Vec<TauPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a05);
    let z = 4;
    let inputs: Vec<(Vec<Tensor>, Vec<Tensor>)> = (0..pairs)
        .map(|_| {
            let mut draw = || (0..3).map(|_| Tensor::randn([z, z], 2.0, &mut rng)).collect::<Vec<_>>();
            (draw(), draw())
        })
        .collect();
    let mut out = Vec::new();
    for &tau in taus {
        let mut total = 0.0;
        for (a, b) in &inputs {
            let mut t = Tape::new();
            let av: Vec<_> = a.iter().map(|e| t.constant(e.clone())).collect();
            let bv: Vec<_> = b.iter().map(|e| t.constant(e.clone())).collect();
            let l = losses::icr_loss(&mut t, &av, &bv, tau)?;
            total += t.value(l).item()?;
        }
        let dice = match protocol {
            None => None,
            Some(p) => {
                let mut s = SeedSummary {
                    label: format!("tau={tau}"),
                    per_seed: Vec::new(),
                    overall: Vec::new(),
                };
                for seed in 0..p.seeds {
                    let r = p.run(seed, |c| c.losses.tau = tau)?;
                    s.push(&r);
                }
                Some(s)
            }
        };
        out.push(TauPoint {
            tau,
            icr_fixed: total / pairs.max(1) as f64,
            dice,
        });
    }
    Ok(out)
}

pub fn tau_table(points: &[TauPoint]) -> String {
    let mut out = format!("{:>8} {:>12} {:>10}\n", "tau", "icr(fixed)", "Dice");
    for p in points {
        let dice = p.dice.as_ref().map_or("-".to_string(), |s| format!("{:.2}", s.mean_overall()));
        let _ = writeln!(out, "{:>8} {:>12.6} {:>10}", p.tau, p.icr_fixed, dice);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_icr_shrinks_with_temperature() {
        let pts = sweep_tau(&[1.0, 2.0, 4.0, 8.0, 16.0], 8, None).unwrap();
        assert!(pts.windows(2).all(|w| w[1].icr_fixed <= w[0].icr_fixed));
        assert!(tau_table(&pts).lines().count() == 6);
    }

    #[test]
    fn table_lists_every_row() {
        let rows = vec![SeedSummary {
            label: "joint-v2".into(),
            per_seed: vec![vec![("A".into(), 50.0), ("B".into(), 40.0)]],
            overall: vec![45.0],
        }];
        let t = comparison_table(&rows);
        assert!(t.contains("Dice A") && t.contains("joint-v2") && t.contains("45.00"));
    }
}
