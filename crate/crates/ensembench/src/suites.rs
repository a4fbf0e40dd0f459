//! Named experiment suites at desk or full scale.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use ensembench_core::data::AugLevel;
use ensembench_core::train::epochs_for;
use ensembench_core::zoo::ArchitectureSpec;

use crate::config::{parse_with_defaults, DatasetKind, DesignKind, ExperimentConfig};
use crate::formats::dataset::CifarVariant;
use crate::run::{self, jobs, Options, RunDir, TrainOutcome};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Accuracy of ensemble, deep and wide designs across `N`.
    DesignSpace,
    /// The design-space runs plus sensitivity reports and embedding plots.
    SensitivityMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::DesignSpace => "design-space",
            Suite::SensitivityMap => "sensitivity-map",
        }
    }
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "design-space" => Ok(Suite::DesignSpace),
            "sensitivity-map" => Ok(Suite::SensitivityMap),
            _ => Err(Error::Usage(format!(
                "unknown suite `{}` (design-space, sensitivity-map)",
                s
            ))),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Usage(format!("unknown scale `{}` (desk, full)", s))),
        }
    }
}

/// Both suites share one config per scale, so the sensitivity suite reuses
/// the design-space checkpoints.
pub fn suite_config(_suite: Suite, scale: Scale) -> ExperimentConfig {
    let base = ArchitectureSpec::resnet(8, 16, 10);
    let dataset = DatasetKind::Cifar(CifarVariant::Cifar10);
    match scale {
        Scale::Desk => {
            let mut c = ExperimentConfig::new(dataset, base, vec![10, 50], vec![5]);
            c.seeds = vec![1, 2, 3];
            c.epochs = Some(100);
            c.aug = AugLevel::Plus;
            c.designs = vec![DesignKind::Ensemble, DesignKind::Deep, DesignKind::Wide];
            c
        }
        Scale::Full => {
            let mut c = ExperimentConfig::new(dataset, base, vec![10, 50, 100, 250], vec![5, 10, 20]);
            c.seeds = (1..=5).collect();
            c.designs = vec![
                DesignKind::Base,
                DesignKind::Ensemble,
                DesignKind::Deep,
                DesignKind::Wide,
            ];
            c
        }
    }
}

/// Assumed sustained training throughput of one worker, in FLOP/s.
pub const ASSUMED_FLOPS_PER_SECOND: f64 = 2e9;

/// Rough single-worker training time: forward plus backward is taken as
/// three forward passes per sample and epoch.
pub fn estimate_hours(cfg: &ExperimentConfig) -> Result<f64> {
    let mut flops = 0.0;
    for j in jobs(cfg)? {
        let per_sample = j.spec.flops()?.flops() as f64 * j.members as f64;
        let epochs = epochs_for(j.n_per_class, cfg.epochs)? as f64;
        flops += 3.0 * per_sample * (j.n_per_class * cfg.base.num_classes) as f64 * epochs;
    }
    Ok(flops / ASSUMED_FLOPS_PER_SECOND / 3600.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReproduceOutcome {
    pub run_dir: std::path::PathBuf,
    pub train: TrainOutcome,
    pub estimated_hours: f64,
}

/// Runs every stage of a suite; `overrides` is config text applied on top
/// of the suite defaults.
pub fn reproduce(suite: Suite, scale: Scale, overrides: Option<&str>, opts: Options) -> Result<ReproduceOutcome> {
    let defaults = suite_config(suite, scale);
    let cfg = match overrides {
        Some(text) => parse_with_defaults(text, &defaults)?,
        None => defaults,
    };
    cfg.validate()?;
    let hours = estimate_hours(&cfg)?;
    if scale == Scale::Full || hours > 8.0 {
        eprintln!(
            "warning: {} at {} scale needs roughly {:.0} CPU-hours of training at {:.0} GFLOP/s",
            suite.name(),
            scale.name(),
            hours,
            ASSUMED_FLOPS_PER_SECOND / 1e9
        );
    }
    let dir = RunDir::open(&cfg)?;
    let mut m = format!(
        "suite = {}\nscale = {}\nestimated_cpu_hours = {:.1}\n",
        suite.name(),
        scale.name(),
        hours
    );
    let _ = write!(m, "{}", dir.manifest_text()?);
    let path = dir.root.join(format!("{}.suite", suite.name()));
    if fs::read_to_string(&path).map(|old| old != m).unwrap_or(true) {
        fs::write(&path, &m).map_err(Error::io(&path))?;
    }

    let train = run::cmd_train(&cfg, opts)?;
    if suite == Suite::SensitivityMap {
        run::cmd_sensitivity(&cfg, opts)?;
    }
    run::cmd_eval(&cfg, opts)?;
    if suite == Suite::SensitivityMap {
        run::cmd_train_oracle(&cfg, opts)?;
        run::cmd_embed(&cfg, opts)?;
    }
    Ok(ReproduceOutcome {
        run_dir: dir.root,
        train,
        estimated_hours: hours,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_share_a_run_directory() {
        let a = suite_config(Suite::DesignSpace, Scale::Desk);
        let b = suite_config(Suite::SensitivityMap, Scale::Desk);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(jobs(&a).unwrap().len(), 2 * 3 * 3);
    }

    #[test]
    fn full_scale_costs_more() {
        let desk = estimate_hours(&suite_config(Suite::DesignSpace, Scale::Desk)).unwrap();
        let full = estimate_hours(&suite_config(Suite::DesignSpace, Scale::Full)).unwrap();
        assert!(desk > 0.0 && full > 10.0 * desk);
    }

    #[test]
    fn names_parse() {
        assert_eq!("sensitivity-map".parse::<Suite>().unwrap(), Suite::SensitivityMap);
        assert!("table".parse::<Suite>().is_err());
        assert_eq!("full".parse::<Scale>().unwrap(), Scale::Full);
    }
}
