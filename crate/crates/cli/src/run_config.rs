//! Run configuration: `key = value` lines covering the model, the optimiser
//! and the dataset. Later assignments override earlier ones, so command-line
//! overrides are simply appended after the file's entries.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attnet::config::{parse_bool, parse_kv, parse_value};
use attnet::data_io::{
    load_fer2013_csv, load_pgm_dir, synthetic_dataset_with_noise, DatasetBatch, UsageFilter,
};
use attnet::models::ModelSpec;
use attnet::tensor::Shape4;
use attnet::train_eval::TrainConfig;
use attnet::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Fer2013,
    Pgm,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Fer2013 => "fer2013",
            Self::Pgm => "pgm",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "synthetic" => Ok(Self::Synthetic),
            "fer2013" | "fer" => Ok(Self::Fer2013),
            "pgm" => Ok(Self::Pgm),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

/// Where the images come from and how they are shaped for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// FER2013 CSV file or PGM class-directory root.
    pub path: Option<PathBuf>,
    pub usage: UsageFilter,
    /// Validation source. For FER2013 it defaults to `path`.
    pub val_path: Option<PathBuf>,
    /// FER2013 rows used for validation; no validation set when unset.
    pub val_usage: Option<UsageFilter>,
    pub per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    /// Keep the images' native size and adapt the model input instead.
    pub no_resize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            usage: UsageFilter::Training,
            val_path: None,
            val_usage: None,
            per_class: 10,
            noise: 0.1,
            data_seed: 0,
            no_resize: false,
        }
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let path = |v: &str| (v != "none").then(|| PathBuf::from(v));
        match key {
            "dataset" => self.kind = value.parse()?,
            "data_path" => self.path = path(value),
            "usage" => self.usage = value.parse()?,
            "val_path" => self.val_path = path(value),
            "val_usage" => {
                self.val_usage = match value {
                    "none" => None,
                    v => Some(v.parse()?),
                }
            }
            "per_class" => self.per_class = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "no_resize" => self.no_resize = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        format!(
            "dataset = {}\ndata_path = {}\nusage = {}\nval_path = {}\nval_usage = {}\nper_class = {}\nnoise = {}\ndata_seed = {}\nno_resize = {}\n",
            self.kind,
            path(&self.path),
            self.usage,
            path(&self.val_path),
            self.val_usage.map_or("none".to_string(), |u| u.to_string()),
            self.per_class,
            self.noise,
            self.data_seed,
            self.no_resize,
        )
    }

    fn require_path(&self) -> Result<&Path> {
        let p = self
            .path
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset '{}' needs data_path", self.kind)))?;
        if !p.exists() {
            return Err(Error::Config(format!("dataset path {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Loads the training and optional validation sets, shaped for `model`.
    /// With `no_resize` the model input takes the images' size instead.
    pub fn load(&self, model: &mut ModelSpec) -> Result<(DatasetBatch, Option<DatasetBatch>)> {
        let (train, val) = match self.kind {
            DatasetKind::Synthetic => {
                let hw = (model.input.h, model.input.w);
                let d = synthetic_dataset_with_noise(model.classes, self.per_class, hw, self.data_seed, self.noise)?;
                (d, None)
            }
            DatasetKind::Fer2013 => {
                let path = self.require_path()?;
                let train = load_fer2013_csv(path, self.usage)?;
                let val = match self.val_usage {
                    None => None,
                    Some(u) => Some(load_fer2013_csv(self.val_path.as_deref().unwrap_or(path), u)?),
                };
                (train, val)
            }
            DatasetKind::Pgm => {
                let path = self.require_path()?;
                let target = match self.no_resize {
                    true => native_pgm_size(path)?,
                    false => (model.input.h, model.input.w),
                };
                let val = self.val_path.as_deref().map(|p| load_pgm_dir(p, target)).transpose()?;
                (load_pgm_dir(path, target)?, val)
            }
        };
        if self.no_resize {
            let s = train.images.dims4()?;
            model.input = Shape4::new(1, model.input.c, s.h, s.w)?;
        }
        if train.classes() != model.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model has {}",
                train.classes(),
                model.classes
            )));
        }
        let shape = |d: DatasetBatch| d.preprocessed((model.input.h, model.input.w), model.input.c);
        Ok((shape(train)?, val.map(shape).transpose()?))
    }
}

/// Size of the first image under a PGM class-directory root.
fn native_pgm_size(root: &Path) -> Result<(usize, usize)> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("pgm"))
            .collect();
        files.sort();
        if let Some(f) = files.first() {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let (w, h, _) = attnet::data_io::parse_pgm(&bytes)?;
            return Ok((h, w));
        }
    }
    Err(Error::EmptyDataset(format!("no .pgm images under {}", root.display())))
}

/// Everything a `train` or `eval` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// A small VGG-style network on the synthetic 7-class set.
    fn default() -> Self {
        let input = Shape4 { n: 1, c: 1, h: 32, w: 32 };
        Self {
            model: ModelSpec::toy_vgg(vec![vec![8], vec![16]], vec![32], input, 7),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies `key = value` pairs in order; unknown keys are rejected.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (key, value) in pairs {
            let known = self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)?;
            if !known {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
        }
        Ok(())
    }

    /// Defaults, then the file's entries, then `overrides` (`key=value`).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let entries = parse_kv(&text)?;
            for e in &entries {
                cfg.apply([(e.key.as_str(), e.value.as_str())])
                    .map_err(|err| Error::Config(format!("{} line {}: {err}", path.display(), e.line)))?;
            }
        }
        let pairs = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.apply(pairs)?;
        cfg.train.validate()?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Canonical text; reading it back gives an equal config.
    pub fn to_text(&self) -> String {
        format!(
            "# model\n{}# training\n{}# data\n{}",
            self.model.to_text(),
            self.train.to_text(),
            self.data.to_text()
        )
    }
}
