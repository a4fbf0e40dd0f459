//! Experiment configuration files.
//!
//! A config is `key = value` text with `#` comments. Lists are
//! comma-separated. Required keys: `dataset`, `family`, `depth`, `width`,
//! `n_per_class`, `members`. Every other key has a default:
//!
//! | key | default |
//! |-----|---------|
//! | `data_path` | `$ENSEMBENCH_DATA` |
//! | `classes`, `input` | taken from the dataset |
//! | `head` | `softmax-xe` |
//! | `dropout` | family default |
//! | `aug` | `+` |
//! | `designs` | `ensemble, deep, wide` |
//! | `seeds` | `1, 2, 3, 4, 5` |
//! | `epochs` | tabulated by `n_per_class` |
//! | `optimizer` | `sgd` (`adam` also accepted) |
//! | `lr0` | family and depth default |
//! | `batch_size` | `32` |
//! | `independent_member_augmentation` | `false` |
//! | `sensitivity_cap` | `2000` (`all` for the full test set) |
//! | `sensitivity_seed` | `0` |
//! | `oracle_epochs` | `epochs`, else `100` |
//! | `tsne_perplexity`, `tsne_iterations`, `tsne_seed` | `30`, `1000`, `0` |
//! | `clip_quantile` | `0.99` |
//! | `synthetic_classes`, `synthetic_train_per_class`, `synthetic_test_per_class`, `synthetic_size`, `synthetic_separation`, `synthetic_seed` | `10`, `50`, `20`, `32`, `1`, `0` |
//! | `out` | `runs` |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use ensembench_core::data::AugLevel;
use ensembench_core::zoo::{ArchitectureSpec, Family, Head};
use sha2::{Digest, Sha256};

use crate::formats::checkpoint::parse_input;
use crate::formats::dataset::CifarVariant;
use crate::formats::kv;
use crate::{Error, Result};

pub const REQUIRED: [&str; 6] = ["dataset", "family", "depth", "width", "n_per_class", "members"];

/// Every accepted key.
pub const KEYS: [&str; 33] = [
    "dataset",
    "data_path",
    "family",
    "depth",
    "width",
    "classes",
    "input",
    "head",
    "dropout",
    "n_per_class",
    "aug",
    "members",
    "designs",
    "seeds",
    "epochs",
    "optimizer",
    "lr0",
    "batch_size",
    "independent_member_augmentation",
    "sensitivity_cap",
    "sensitivity_seed",
    "oracle_epochs",
    "tsne_perplexity",
    "tsne_iterations",
    "tsne_seed",
    "clip_quantile",
    "synthetic_classes",
    "synthetic_train_per_class",
    "synthetic_test_per_class",
    "synthetic_size",
    "synthetic_separation",
    "synthetic_seed",
    "out",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar(CifarVariant),
    /// `train.sds` and `test.sds` under the data path.
    Portable,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar(CifarVariant::Cifar10) => "cifar10",
            DatasetKind::Cifar(CifarVariant::Cifar100) => "cifar100",
            DatasetKind::Portable => "sds",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "cifar10" => DatasetKind::Cifar(CifarVariant::Cifar10),
            "cifar100" => DatasetKind::Cifar(CifarVariant::Cifar100),
            "sds" => DatasetKind::Portable,
            "synthetic" => DatasetKind::Synthetic,
            _ => return Err(format!("unknown dataset `{}`", s)),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DesignKind {
    Base,
    Ensemble,
    Deep,
    Wide,
}

impl DesignKind {
    pub const ALL: [DesignKind; 4] = [
        DesignKind::Base,
        DesignKind::Ensemble,
        DesignKind::Deep,
        DesignKind::Wide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DesignKind::Base => "base",
            DesignKind::Ensemble => "ensemble",
            DesignKind::Deep => "deep",
            DesignKind::Wide => "wide",
        }
    }
}

impl FromStr for DesignKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        DesignKind::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown design `{}`", s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        SyntheticData {
            classes: 10,
            train_per_class: 50,
            test_per_class: 20,
            size: 32,
            separation: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub synthetic: SyntheticData,
    pub base: ArchitectureSpec,
    pub n_per_class: Vec<usize>,
    pub aug: AugLevel,
    /// Budget multipliers: ensemble sizes, each paired with a deep and a wide
    /// single network of the same cost.
    pub members: Vec<usize>,
    pub designs: Vec<DesignKind>,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub optimizer: OptimizerKind,
    pub lr0: Option<f64>,
    pub batch_size: usize,
    pub independent_member_augmentation: bool,
    pub sensitivity_cap: Option<usize>,
    pub sensitivity_seed: u64,
    pub oracle_epochs: Option<usize>,
    pub tsne_perplexity: f64,
    pub tsne_iterations: usize,
    pub tsne_seed: u64,
    pub clip_quantile: f64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for every optional key around the given base network.
    pub fn new(dataset: DatasetKind, base: ArchitectureSpec, n_per_class: Vec<usize>, members: Vec<usize>) -> Self {
        ExperimentConfig {
            dataset,
            data_path: None,
            synthetic: SyntheticData::default(),
            base,
            n_per_class,
            aug: AugLevel::Plus,
            members,
            designs: vec![DesignKind::Ensemble, DesignKind::Deep, DesignKind::Wide],
            seeds: (1..=5).collect(),
            epochs: None,
            optimizer: OptimizerKind::Sgd,
            lr0: None,
            batch_size: 32,
            independent_member_augmentation: false,
            sensitivity_cap: Some(ensembench_core::eval::SENSITIVITY_CAP),
            sensitivity_seed: 0,
            oracle_epochs: None,
            tsne_perplexity: 30.0,
            tsne_iterations: 1000,
            tsne_seed: 0,
            clip_quantile: 0.99,
            out: PathBuf::from("runs"),
        }
    }

    /// Classes and input shape implied by the dataset, where fixed.
    pub fn dataset_geometry(&self) -> Option<(usize, [usize; 3])> {
        match self.dataset {
            DatasetKind::Cifar(v) => Some((v.classes(), [32, 32, 3])),
            DatasetKind::Synthetic => {
                let s = self.synthetic.size;
                Some((self.synthetic.classes, [s, s, 3]))
            }
            DatasetKind::Portable => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config { line: 0, message: m });
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.n_per_class.is_empty() || self.n_per_class.contains(&0) {
            return bad("n_per_class needs positive values".into());
        }
        if self.members.is_empty() || self.members.contains(&0) {
            return bad("members needs positive values".into());
        }
        if self.designs.is_empty() {
            return bad("no designs selected".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.clip_quantile) || self.clip_quantile == 0.0 {
            return bad("clip_quantile must be in (0, 1]".into());
        }
        self.base.validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[String]| v.join(", ");
        let b = &self.base;
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        if let Some(p) = &self.data_path {
            let _ = writeln!(s, "data_path = {}", p.display());
        }
        let _ = writeln!(s, "family = {}", b.family);
        let _ = writeln!(s, "depth = {}", b.depth);
        let _ = writeln!(s, "width = {}", b.width);
        let _ = writeln!(s, "classes = {}", b.num_classes);
        let _ = writeln!(s, "input = {}x{}x{}", b.input[0], b.input[1], b.input[2]);
        let _ = writeln!(s, "head = {}", b.head);
        let _ = writeln!(s, "dropout = {}", b.dropout);
        let _ = writeln!(
            s,
            "n_per_class = {}",
            list(&self.n_per_class.iter().map(|v| v.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(s, "aug = {}", self.aug.name());
        let _ = writeln!(
            s,
            "members = {}",
            list(&self.members.iter().map(|v| v.to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(
            s,
            "designs = {}",
            list(&self.designs.iter().map(|d| d.name().to_string()).collect::<Vec<_>>())
        );
        let _ = writeln!(
            s,
            "seeds = {}",
            list(&self.seeds.iter().map(|v| v.to_string()).collect::<Vec<_>>())
        );
        if let Some(e) = self.epochs {
            let _ = writeln!(s, "epochs = {}", e);
        }
        let opt = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let _ = writeln!(s, "optimizer = {}", opt);
        if let Some(lr) = self.lr0 {
            let _ = writeln!(s, "lr0 = {}", lr);
        }
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(
            s,
            "independent_member_augmentation = {}",
            self.independent_member_augmentation
        );
        match self.sensitivity_cap {
            Some(c) => writeln!(s, "sensitivity_cap = {}", c),
            None => writeln!(s, "sensitivity_cap = all"),
        }
        .ok();
        let _ = writeln!(s, "sensitivity_seed = {}", self.sensitivity_seed);
        if let Some(e) = self.oracle_epochs {
            let _ = writeln!(s, "oracle_epochs = {}", e);
        }
        let _ = writeln!(s, "tsne_perplexity = {}", self.tsne_perplexity);
        let _ = writeln!(s, "tsne_iterations = {}", self.tsne_iterations);
        let _ = writeln!(s, "tsne_seed = {}", self.tsne_seed);
        let _ = writeln!(s, "clip_quantile = {}", self.clip_quantile);
        if self.dataset == DatasetKind::Synthetic {
            let y = &self.synthetic;
            let _ = writeln!(s, "synthetic_classes = {}", y.classes);
            let _ = writeln!(s, "synthetic_train_per_class = {}", y.train_per_class);
            let _ = writeln!(s, "synthetic_test_per_class = {}", y.test_per_class);
            let _ = writeln!(s, "synthetic_size = {}", y.size);
            let _ = writeln!(s, "synthetic_separation = {}", y.separation);
            let _ = writeln!(s, "synthetic_seed = {}", y.seed);
        }
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }

    /// Hex SHA-256 over everything that determines results; `out` and
    /// `data_path` are excluded.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("out =") && !l.starts_with("data_path ="))
            .map(|l| format!("{}\n", l))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }
}

fn value<T: FromStr>(e: &kv::Entry) -> Result<T> {
    e.value.parse().map_err(|_| Error::Config {
        line: e.line,
        message: format!("invalid value `{}` for `{}`", e.value, e.key),
    })
}

fn list<T: FromStr>(e: &kv::Entry) -> Result<Vec<T>> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                line: e.line,
                message: format!("invalid list item `{}` for `{}`", s, e.key),
            })
        })
        .collect()
}

fn parsed<T, E: std::fmt::Display>(e: &kv::Entry, r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|err| Error::Config {
        line: e.line,
        message: err.to_string(),
    })
}

/// Parses a config file. Unknown and repeated keys are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_over(text, None)
}

/// Parses `text` on top of `defaults`, so no key is required.
pub fn parse_with_defaults(text: &str, defaults: &ExperimentConfig) -> Result<ExperimentConfig> {
    parse_over(text, Some(defaults))
}

fn parse_over(text: &str, defaults: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    let entries = kv::parse(text)?;
    for (i, e) in entries.iter().enumerate() {
        if entries[..i].iter().any(|p| p.key == e.key) {
            return Err(Error::Config {
                line: e.line,
                message: format!("`{}` is set twice", e.key),
            });
        }
    }
    if let Some(e) = entries.iter().find(|e| !KEYS.contains(&e.key.as_str())) {
        return Err(Error::Config {
            line: e.line,
            message: format!("unknown key `{}`", e.key),
        });
    }
    let get = |k: &str| entries.iter().find(|e| e.key == k);
    let mut cfg = match defaults {
        Some(d) => d.clone(),
        None => {
            let missing: Vec<&'static str> = REQUIRED.into_iter().filter(|k| get(k).is_none()).collect();
            if !missing.is_empty() {
                return Err(Error::MissingKeys(missing));
            }
            let dataset = get("dataset").unwrap();
            let dataset = parsed(dataset, dataset.value.parse::<DatasetKind>())?;
            let family = get("family").unwrap();
            let family = parsed(family, family.value.parse::<Family>())?;
            let base = ArchitectureSpec::new(family, value(get("depth").unwrap())?, value(get("width").unwrap())?, 10);
            ExperimentConfig::new(dataset, base, Vec::new(), Vec::new())
        }
    };
    let mut classes = None;
    let mut input = None;
    let mut dropout = None;
    for e in &entries {
        match e.key.as_str() {
            "dataset" => cfg.dataset = parsed(e, e.value.parse())?,
            "data_path" => cfg.data_path = Some(PathBuf::from(&e.value)),
            "family" => {
                cfg.base.family = parsed(e, e.value.parse())?;
            }
            "depth" => cfg.base.depth = value(e)?,
            "width" => cfg.base.width = value(e)?,
            "classes" => classes = Some(value(e)?),
            "input" => {
                input = Some(parse_input(&e.value).ok_or_else(|| Error::Config {
                    line: e.line,
                    message: format!("input must look like 32x32x3, got `{}`", e.value),
                })?)
            }
            "head" => cfg.base.head = parsed(e, e.value.parse::<Head>())?,
            "dropout" => dropout = Some(value(e)?),
            "n_per_class" => cfg.n_per_class = list(e)?,
            "aug" => cfg.aug = parsed(e, e.value.parse::<AugLevel>())?,
            "members" => cfg.members = list(e)?,
            "designs" => cfg.designs = list(e)?,
            "seeds" => cfg.seeds = list(e)?,
            "epochs" => cfg.epochs = Some(value(e)?),
            "optimizer" => {
                cfg.optimizer = match e.value.as_str() {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(Error::Config {
                            line: e.line,
                            message: format!("unknown optimizer `{}`", e.value),
                        })
                    }
                }
            }
            "lr0" => cfg.lr0 = Some(value(e)?),
            "batch_size" => cfg.batch_size = value(e)?,
            "independent_member_augmentation" => cfg.independent_member_augmentation = value(e)?,
            "sensitivity_cap" => {
                cfg.sensitivity_cap = if e.value == "all" { None } else { Some(value(e)?) };
            }
            "sensitivity_seed" => cfg.sensitivity_seed = value(e)?,
            "oracle_epochs" => cfg.oracle_epochs = Some(value(e)?),
            "tsne_perplexity" => cfg.tsne_perplexity = value(e)?,
            "tsne_iterations" => cfg.tsne_iterations = value(e)?,
            "tsne_seed" => cfg.tsne_seed = value(e)?,
            "clip_quantile" => cfg.clip_quantile = value(e)?,
            "synthetic_classes" => cfg.synthetic.classes = value(e)?,
            "synthetic_train_per_class" => cfg.synthetic.train_per_class = value(e)?,
            "synthetic_test_per_class" => cfg.synthetic.test_per_class = value(e)?,
            "synthetic_size" => cfg.synthetic.size = value(e)?,
            "synthetic_separation" => cfg.synthetic.separation = value(e)?,
            "synthetic_seed" => cfg.synthetic.seed = value(e)?,
            "out" => cfg.out = PathBuf::from(&e.value),
            other => {
                return Err(Error::Config {
                    line: e.line,
                    message: format!("unknown key `{}`", other),
                })
            }
        }
    }
    if let Some((k, shape)) = cfg.dataset_geometry() {
        cfg.base.num_classes = k;
        cfg.base.input = shape;
    }
    if let Some(k) = classes {
        cfg.base.num_classes = k;
    }
    if let Some(i) = input {
        cfg.base.input = i;
    }
    cfg.base.dropout = dropout.unwrap_or(if defaults.is_some() && get("family").is_none() {
        cfg.base.dropout
    } else {
        cfg.base.family.default_dropout()
    });
    if let Some((k, shape)) = cfg.dataset_geometry() {
        if cfg.base.num_classes != k || cfg.base.input != shape {
            let line = get("classes").or(get("input")).map_or(0, |e| e.line);
            return Err(Error::Config {
                line,
                message: format!("dataset {} has {} classes of {:?} images", cfg.dataset.name(), k, shape),
            });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        "dataset = cifar10\nfamily = resnet\ndepth = 8\nwidth = 16\nn_per_class = 10, 50\nmembers = 5\n";

    #[test]
    fn minimal_file_round_trips() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.base, ArchitectureSpec::resnet(8, 16, 10));
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.aug, AugLevel::Plus);
        let again = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn typo_names_its_line() {
        let text = format!("{}epcohs = 3\n", MINIMAL);
        match parse_config(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("epcohs"));
            }
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn empty_file_lists_required_keys() {
        match parse_config("") {
            Err(Error::MissingKeys(k)) => assert_eq!(k, REQUIRED.to_vec()),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn invalid_values_and_specs() {
        assert!(matches!(
            parse_config(&MINIMAL.replace("depth = 8", "depth = 9")),
            Err(Error::Core(_))
        ));
        assert!(matches!(
            parse_config(&format!("{}seeds = \n", MINIMAL)),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            parse_config(&format!("{}aug = ++++\n", MINIMAL)),
            Err(Error::Config { line: 7, .. })
        ));
        assert!(matches!(
            parse_config(&format!("{}members = 3\n", MINIMAL)),
            Err(Error::Config { line: 7, .. })
        ));
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(&format!("{}out = elsewhere\n", MINIMAL)).unwrap();
        let c = parse_config(&format!("{}epochs = 3\n", MINIMAL)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn synthetic_geometry() {
        let text = "dataset = synthetic\nfamily = resnet\ndepth = 8\nwidth = 4\nn_per_class = 5\nmembers = 2\nsynthetic_classes = 3\nsynthetic_size = 8\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!((cfg.base.num_classes, cfg.base.input), (3, [8, 8, 3]));
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }
}
