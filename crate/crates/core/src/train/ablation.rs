//! Transform-family ablation and hyperparameter sweeps.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;

use super::{evaluate, headline, train, Dataset, OptimConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::network::{convert_with, ArchDescriptor, ConvertOptions, Model};
use crate::real::Real;
use crate::rng::derive_seed;
use crate::transforms::{Bounds, TransformFamily};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub family: String,
    pub trial: usize,
    pub seed: u64,
    /// Test accuracy or test mIoU after training.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilySummary {
    pub family: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Per-family mean and spread, best first.
    pub fn summary(&self) -> Vec<FamilySummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.family.as_str()) {
                names.push(&r.family);
            }
        }
        let mut out: Vec<FamilySummary> = names
            .into_iter()
            .map(|f| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.family == f).map(|r| r.metric).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let std = if v.len() > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                FamilySummary {
                    family: f.to_string(),
                    mean,
                    std,
                }
            })
            .collect();
        out.sort_by(|a, b| b.mean.total_cmp(&a.mean));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,trial,seed,metric\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6}", r.family, r.trial, r.seed, r.metric);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("rank,family,mean,std\n");
        for (i, f) in self.summary().iter().enumerate() {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", i + 1, f.family, f.mean, f.std);
        }
        s
    }
}

fn run_one<T: Real>(
    desc: &ArchDescriptor,
    data: &Dataset<T>,
    optim: &OptimConfig,
    seed: u64,
) -> Result<f64> {
    let mut model = Model::<T>::build(desc, seed)?;
    train(&mut model, data, optim, &TrainOptions { seed, augment: true })?;
    let m = evaluate(&model, &data.test, data.task, 1)?;
    Ok(headline(&m, data.task))
}

/// Converts `base` once per family and trial, trains and records the test
/// metric. Trial `t` uses seed `derive_seed(convert.seed, t)` for every
/// family, so families are compared on equal footing.
pub fn ablate_families<T: Real>(
    base: &ArchDescriptor,
    families: &[TransformFamily],
    data: &Dataset<T>,
    optim: &OptimConfig,
    trials: usize,
    convert: &ConvertOptions,
) -> Result<AblationTable> {
    if trials == 0 {
        return Err(Error::arg("trials must be at least 1"));
    }
    if families.is_empty() {
        return Err(Error::arg("no families to ablate"));
    }
    let mut table = AblationTable::default();
    for &family in families {
        for trial in 0..trials {
            let seed = derive_seed(convert.seed, trial as u64);
            let opts = ConvertOptions {
                family,
                seed,
                ..convert.clone()
            };
            let desc = convert_with(base, &opts);
            table.rows.push(AblationRow {
                family: family.name().to_string(),
                trial,
                seed,
                metric: run_one(&desc, data, optim, seed)?,
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    OmegaBounds,
    PsiBounds,
    Fanout,
    SeedChannels,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "omega_bounds" | "omega" => Ok(SweepAxis::OmegaBounds),
            "psi_bounds" | "psi" => Ok(SweepAxis::PsiBounds),
            "fanout" | "k" => Ok(SweepAxis::Fanout),
            "c_s" | "cs" | "seed_channels" => Ok(SweepAxis::SeedChannels),
            _ => Err(Error::arg(format!("unknown sweep axis '{s}' (omega_bounds, psi_bounds, fanout, c_s)"))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::OmegaBounds => "omega_bounds",
            SweepAxis::PsiBounds => "psi_bounds",
            SweepAxis::Fanout => "fanout",
            SweepAxis::SeedChannels => "c_s",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepValue {
    Count(usize),
    Range(Bounds),
}

impl FromStr for SweepValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.contains(':') {
            s.parse().map(SweepValue::Range)
        } else {
            s.trim()
                .parse()
                .map(SweepValue::Count)
                .map_err(|_| Error::arg(format!("bad sweep value '{s}'")))
        }
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Count(n) => write!(f, "{n}"),
            SweepValue::Range(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub metric: f64,
    /// Learnable parameters of the converted network.
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCurve {
    pub axis: String,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,value,metric,params\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{:.6},{}", self.axis, p.value, p.metric, p.params);
        }
        s
    }
}

/// Trains one converted network per value of `axis`, all from the seed in
/// `convert`, and records the test metric and parameter count.
pub fn sweep_hyperparams<T: Real>(
    base: &ArchDescriptor,
    axis: SweepAxis,
    values: &[SweepValue],
    data: &Dataset<T>,
    optim: &OptimConfig,
    convert: &ConvertOptions,
) -> Result<SweepCurve> {
    if values.is_empty() {
        return Err(Error::arg("sweep needs at least one value"));
    }
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut opts = convert.clone();
        match (axis, value) {
            (SweepAxis::Fanout, SweepValue::Count(k)) if k > 0 => opts.fanout = k,
            (SweepAxis::SeedChannels, SweepValue::Count(c)) if c > 0 => opts.c_s = c,
            (SweepAxis::OmegaBounds | SweepAxis::PsiBounds, SweepValue::Range(b)) => {
                if opts.family != TransformFamily::Sinusoidal {
                    return Err(Error::arg(format!("{axis} applies to the sinusoidal family only")));
                }
                if axis == SweepAxis::OmegaBounds {
                    opts.bounds.omega = b;
                } else {
                    opts.bounds.psi = b;
                }
                opts.bounds.validate()?;
            }
            _ => return Err(Error::arg(format!("value '{value}' does not fit axis {axis}"))),
        }
        let desc = convert_with(base, &opts);
        points.push(SweepPoint {
            value: value.to_string(),
            metric: run_one(&desc, data, optim, convert.seed)?,
            params: desc.learnable_params(),
        });
    }
    Ok(SweepCurve {
        axis: axis.to_string(),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_orders_by_mean() {
        let t = AblationTable {
            rows: vec![
                AblationRow { family: "a".into(), trial: 0, seed: 0, metric: 0.5 },
                AblationRow { family: "a".into(), trial: 1, seed: 1, metric: 0.7 },
                AblationRow { family: "b".into(), trial: 0, seed: 0, metric: 0.9 },
            ],
        };
        let s = t.summary();
        assert_eq!(s[0].family, "b");
        assert!((s[1].mean - 0.6).abs() < 1e-12);
        assert!((s[1].std - 0.1414213562373095).abs() < 1e-12);
    }

    #[test]
    fn parse_values() {
        assert_eq!("5".parse::<SweepValue>().unwrap(), SweepValue::Count(5));
        assert_eq!("0:1".parse::<SweepValue>().unwrap(), SweepValue::Range(Bounds::new(0.0, 1.0)));
        assert_eq!("c_s".parse::<SweepAxis>().unwrap(), SweepAxis::SeedChannels);
        assert!("zeta".parse::<SweepAxis>().is_err());
    }
}
