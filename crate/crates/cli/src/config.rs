//! Flat `key=value` experiment files.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use amcl_core::data::DatasetSpec;
use amcl_core::trainer::TrainConfig;
use amcl_core::{Error, Result};

/// Optional evaluation outputs. Error tables are always written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Report {
    Histograms,
    CeSplit,
    Purity,
}

impl Report {
    pub fn as_str(self) -> &'static str {
        match self {
            Report::Histograms => "histograms",
            Report::CeSplit => "ce_split",
            Report::Purity => "purity",
        }
    }
}

impl FromStr for Report {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "histograms" | "hist" => Ok(Report::Histograms),
            "ce_split" | "ce" => Ok(Report::CeSplit),
            "purity" | "purity_flow" => Ok(Report::Purity),
            other => Err(Error::Config(format!("unknown report '{other}' (histograms, ce_split, purity)"))),
        }
    }
}

/// Parses a comma-separated report list. An empty string selects nothing.
pub fn parse_reports(s: &str) -> Result<BTreeSet<Report>> {
    s.split(',').map(str::trim).filter(|r| !r.is_empty()).map(str::parse).collect()
}

fn format_reports(reports: &BTreeSet<Report>) -> String {
    reports.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// Held-out data used for the summary and reports. Defaults to the training set.
    pub test_dataset: Option<DatasetSpec>,
    pub out: PathBuf,
    pub reports: BTreeSet<Report>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            dataset: DatasetSpec::images(2, 100, 16, 0.1, 1),
            test_dataset: None,
            out: PathBuf::from("runs/default"),
            reports: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "method" => t.method = v.to_string(),
            "members" => t.members = parse(key, v)?,
            "overlap" => t.penalty.k = parse(key, v)?,
            "beta" => t.penalty.beta = parse(key, v)?,
            "gamma" => t.penalty.gamma = parse(key, v)?,
            "t_tau" => t.penalty.t_tau = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "lr" => t.sgd.learning_rate = parse(key, v)?,
            "momentum" => t.sgd.momentum = parse(key, v)?,
            "weight_decay" => t.sgd.weight_decay = parse(key, v)?,
            "fusion" => t.fusion = v.parse()?,
            "reduction" => t.fusion_cfg.reduction = parse(key, v)?,
            "residual_scale" => t.fusion_cfg.residual_scale = parse(key, v)?,
            "p_share" => t.fusion_cfg.p_share = parse(key, v)?,
            "arch" => t.arch = v.parse()?,
            "hidden" => {
                let (a, b) = v.split_once(',').ok_or_else(|| Error::Config(format!("hidden: expected A,B, got '{v}'")))?;
                t.hidden = [parse(key, a.trim())?, parse(key, b.trim())?];
            }
            "num_classes" => t.num_classes = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "dataset" => self.dataset = v.parse()?,
            "test_dataset" => self.test_dataset = if v.is_empty() { None } else { Some(v.parse()?) },
            "out" => self.out = PathBuf::from(v),
            "reports" => self.reports = parse_reports(v)?,
            other => return Err(Error::Config(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse_file_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_file_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.train;
        writeln!(f, "method={}", t.method)?;
        writeln!(f, "members={}", t.members)?;
        writeln!(f, "overlap={}", t.penalty.k)?;
        writeln!(f, "beta={}", t.penalty.beta)?;
        writeln!(f, "gamma={}", t.penalty.gamma)?;
        writeln!(f, "t_tau={}", t.penalty.t_tau)?;
        writeln!(f, "epochs={}", t.epochs)?;
        writeln!(f, "batch_size={}", t.batch_size)?;
        writeln!(f, "seed={}", t.seed)?;
        writeln!(f, "lr={}", t.sgd.learning_rate)?;
        writeln!(f, "momentum={}", t.sgd.momentum)?;
        writeln!(f, "weight_decay={}", t.sgd.weight_decay)?;
        writeln!(f, "fusion={}", t.fusion)?;
        writeln!(f, "reduction={}", t.fusion_cfg.reduction)?;
        writeln!(f, "residual_scale={}", t.fusion_cfg.residual_scale)?;
        writeln!(f, "p_share={}", t.fusion_cfg.p_share)?;
        writeln!(f, "arch={}", t.arch)?;
        writeln!(f, "hidden={},{}", t.hidden[0], t.hidden[1])?;
        if let Some(nc) = t.num_classes {
            writeln!(f, "num_classes={nc}")?;
        }
        writeln!(f, "dataset={}", self.dataset)?;
        if let Some(d) = &self.test_dataset {
            writeln!(f, "test_dataset={d}")?;
        }
        writeln!(f, "out={}", self.out.display())?;
        writeln!(f, "reports={}", format_reports(&self.reports))
    }
}
