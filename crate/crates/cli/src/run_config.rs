//! The full configuration of a train or sweep command: network, training,
//! sweep and dataset settings plus where inputs and outputs live, as one
//! flat `key = value` file.

use std::path::PathBuf;

use wsseg::config::{self, KeyValue};
use wsseg::evaluation::{sha256_hex, SweepConfig};
use wsseg::network::NetConfig;
use wsseg::synthdata::DatasetSpec;
use wsseg::training::TrainConfig;
use wsseg::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub dataset: DatasetSpec,
    /// Directory written by `gen`; the sweep generates data in memory
    /// when this is unset.
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Train on (or score) one cross-validation fold instead of everything.
    pub fold: Option<usize>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            dataset: DatasetSpec::default(),
            data: None,
            manifest: None,
            fold: None,
            out: PathBuf::from("out"),
        }
    }
}

fn optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), T::to_string)
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl KeyValue for RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "manifest" => self.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
            "fold" => {
                self.fold = if value.is_empty() {
                    None
                } else {
                    Some(config::value(key, value)?)
                }
            }
            "out" => self.out = PathBuf::from(value),
            // one dropout rate for the network and the loop
            "dropout_p" => {
                self.net.set(key, value)?;
                self.train.set(key, value)?;
            }
            _ => {
                return Ok(self.dataset.set(key, value)?
                    || self.net.set(key, value)?
                    || self.train.set(key, value)?
                    || self.sweep.set(key, value)?)
            }
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut e = vec![
            ("data", path_text(&self.data)),
            ("manifest", path_text(&self.manifest)),
            ("fold", optional(&self.fold)),
            ("out", self.out.display().to_string()),
        ];
        e.extend(self.dataset.entries());
        e.extend(self.net.entries().into_iter().filter(|(k, _)| *k != "dropout_p"));
        e.extend(self.train.entries());
        e.extend(self.sweep.entries());
        e
    }

    fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        if let Some(f) = self.fold {
            if f >= self.sweep.folds {
                return Err(Error::Config(format!(
                    "fold {f} out of range for {} folds",
                    self.sweep.folds
                )));
            }
        }
        Ok(())
    }
}

impl RunConfig {
    /// Defaults, then the file, then `key=value` overrides in order.
    pub fn load(file: Option<&std::path::Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
            None => String::new(),
        };
        let mut cfg = RunConfig::default();
        for e in config::parse(&text)? {
            if !cfg.set(&e.key, &e.value)? {
                return Err(Error::Config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return Err(Error::Config(format!("override `{o}` is not key=value")));
            };
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Config text headed by its fingerprint, as echoed next to outputs.
    pub fn echo(&self) -> String {
        format!("# fingerprint = {}\n{}", self.fingerprint(), self.to_text())
    }
}
