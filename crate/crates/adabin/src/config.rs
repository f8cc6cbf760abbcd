//! Run configuration: a flat key=value file with command-line overrides,
//! plus the two built-in schedule profiles.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{ActQuant, ModelConfig, Nonlinearity, WeightQuant};
use crate::quantize::AlphaGradMode;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub dataset: String,
    /// 0 means the full training split.
    pub subset: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub width: f32,
    pub weight_mode: WeightQuant,
    pub act_mode: ActQuant,
    pub nonlin: Nonlinearity,
    pub alpha_grad: AlphaGradMode,
    pub binarize_first_last: bool,
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    /// The full-scale configuration: 400 epochs, batch 256, lr 0.1,
    /// adaptive weights and activations with Maxout.
    fn default() -> Self {
        RunConfig {
            arch: "resnet20-adabin".into(),
            dataset: "cifar10".into(),
            subset: 0,
            epochs: 400,
            batch_size: 256,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            width: 1.0,
            weight_mode: WeightQuant::Adabin,
            act_mode: ActQuant::Adabin,
            nonlin: Nonlinearity::Maxout,
            alpha_grad: AlphaGradMode::Consistent,
            binarize_first_last: false,
            data_dir: String::new(),
            out_dir: "runs".into(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

pub fn weight_mode_from_str(v: &str) -> Result<WeightQuant> {
    match v {
        "scaled-sign" => Ok(WeightQuant::ScaledSign),
        "adabin" => Ok(WeightQuant::Adabin),
        "adabin-learnable" => Ok(WeightQuant::AdabinLearnable),
        _ => Err(Error::Config(format!(
            "weight_mode '{v}' (valid: scaled-sign, adabin, adabin-learnable)"
        ))),
    }
}

pub fn weight_mode_str(m: WeightQuant) -> &'static str {
    match m {
        WeightQuant::ScaledSign => "scaled-sign",
        WeightQuant::Adabin => "adabin",
        WeightQuant::AdabinLearnable => "adabin-learnable",
    }
}

pub fn act_mode_from_str(v: &str) -> Result<ActQuant> {
    match v {
        "sign" => Ok(ActQuant::Sign),
        "adabin" => Ok(ActQuant::Adabin),
        _ => Err(Error::Config(format!("act_mode '{v}' (valid: sign, adabin)"))),
    }
}

pub fn act_mode_str(m: ActQuant) -> &'static str {
    match m {
        ActQuant::Sign => "sign",
        ActQuant::Adabin => "adabin",
    }
}

pub fn nonlin_from_str(v: &str) -> Result<Nonlinearity> {
    match v {
        "none" => Ok(Nonlinearity::None),
        "prelu" => Ok(Nonlinearity::Prelu),
        "maxout-pos" => Ok(Nonlinearity::MaxoutPos),
        "maxout" => Ok(Nonlinearity::Maxout),
        _ => Err(Error::Config(format!(
            "nonlin '{v}' (valid: none, prelu, maxout-pos, maxout)"
        ))),
    }
}

pub fn nonlin_str(m: Nonlinearity) -> &'static str {
    match m {
        Nonlinearity::None => "none",
        Nonlinearity::Prelu => "prelu",
        Nonlinearity::MaxoutPos => "maxout-pos",
        Nonlinearity::Maxout => "maxout",
    }
}

pub fn alpha_grad_from_str(v: &str) -> Result<AlphaGradMode> {
    match v {
        "consistent" => Ok(AlphaGradMode::Consistent),
        "paper" => Ok(AlphaGradMode::PaperVerbatim),
        _ => Err(Error::Config(format!("alpha_grad '{v}' (valid: consistent, paper)"))),
    }
}

pub fn alpha_grad_str(m: AlphaGradMode) -> &'static str {
    match m {
        AlphaGradMode::Consistent => "consistent",
        AlphaGradMode::PaperVerbatim => "paper",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "arch" => self.arch = v.into(),
            "dataset" => self.dataset = v.into(),
            "subset" => self.subset = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr0" => self.lr0 = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "weight_mode" => self.weight_mode = weight_mode_from_str(v)?,
            "act_mode" => self.act_mode = act_mode_from_str(v)?,
            "nonlin" => self.nonlin = nonlin_from_str(v)?,
            "alpha_grad" => self.alpha_grad = alpha_grad_from_str(v)?,
            "binarize_first_last" => self.binarize_first_last = parse_bool(key, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines skipped.
    pub fn from_str_cfg(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        RunConfig::from_str_cfg(&std::fs::read_to_string(path)?)
    }

    pub fn apply_overrides<'a>(&mut self, kvs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for kv in kvs {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `paper`: the full published schedule; `desk`: 30 epochs on a 10k
    /// stratified subset, sized for a laptop CPU.
    pub fn apply_profile(&mut self, profile: &str) -> Result<()> {
        match profile {
            "paper" => {
                self.epochs = 400;
                self.batch_size = 256;
                self.lr0 = 0.1;
                self.subset = 0;
            }
            "desk" => {
                self.epochs = 30;
                self.batch_size = 128;
                self.subset = 10_000;
            }
            other => {
                return Err(Error::Config(format!("unknown profile '{other}' (valid: paper, desk)")))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.lr0 < 0.0 || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 {} must be finite and >= 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.width <= 0.0 {
            return Err(Error::Config("width must be > 0".into()));
        }
        if !["cifar10", "mnist", "synthetic"].contains(&self.dataset.as_str()) {
            return Err(Error::Config(format!(
                "dataset '{}' (valid: cifar10, mnist, synthetic)",
                self.dataset
            )));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.dataset == "mnist" {
            1
        } else {
            3
        }
    }

    /// Side length of the (square) input images for this dataset.
    pub fn image_side(&self) -> usize {
        if self.dataset == "mnist" {
            28
        } else {
            32
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch.clone(),
            classes: 10,
            in_channels: self.in_channels(),
            width: self.width,
            weight_mode: self.weight_mode,
            act_mode: self.act_mode,
            nonlin: self.nonlin,
            alpha_grad: self.alpha_grad,
            binarize_first_last: self.binarize_first_last,
            seed: self.seed,
        }
    }

    /// Full key=value dump; parsing it back reproduces this config.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch={}", self.arch);
        let _ = writeln!(s, "dataset={}", self.dataset);
        let _ = writeln!(s, "subset={}", self.subset);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "lr0={}", self.lr0);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "weight_mode={}", weight_mode_str(self.weight_mode));
        let _ = writeln!(s, "act_mode={}", act_mode_str(self.act_mode));
        let _ = writeln!(s, "nonlin={}", nonlin_str(self.nonlin));
        let _ = writeln!(s, "alpha_grad={}", alpha_grad_str(self.alpha_grad));
        let _ = writeln!(s, "binarize_first_last={}", self.binarize_first_last);
        let _ = writeln!(s, "data_dir={}", self.data_dir);
        let _ = writeln!(s, "out_dir={}", self.out_dir);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.epochs, 400);
        assert_eq!(c.batch_size, 256);
        assert!((c.lr0 - 0.1).abs() < 1e-9);
        assert_eq!(c.weight_mode, WeightQuant::Adabin);
        assert_eq!(c.act_mode, ActQuant::Adabin);
        assert_eq!(c.nonlin, Nonlinearity::Maxout);
        c.validate().unwrap();
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.apply_profile("desk").unwrap();
        c.set("weight_mode", "scaled-sign").unwrap();
        c.set("nonlin", "prelu").unwrap();
        c.set("seed", "7").unwrap();
        let back = RunConfig::from_str_cfg(&c.snapshot()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn every_ablation_row_is_expressible() {
        for wm in ["scaled-sign", "adabin", "adabin-learnable"] {
            for am in ["sign", "adabin"] {
                for nl in ["none", "prelu", "maxout-pos", "maxout"] {
                    let mut c = RunConfig::default();
                    c.set("weight_mode", wm).unwrap();
                    c.set("act_mode", am).unwrap();
                    c.set("nonlin", nl).unwrap();
                    c.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn comments_and_overrides() {
        let text = "epochs=5 # quick\n\n# full line comment\nbatch_size=16\n";
        let mut c = RunConfig::from_str_cfg(text).unwrap();
        assert_eq!((c.epochs, c.batch_size), (5, 16));
        c.apply_overrides(["epochs=7", "nonlin=maxout-pos"]).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.nonlin, Nonlinearity::MaxoutPos);
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(RunConfig::from_str_cfg("nope\n").is_err());
        assert!(RunConfig::from_str_cfg("unknown_key=1\n").is_err());
        assert!(RunConfig::from_str_cfg("epochs=many\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.apply_profile("gpu").is_err());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }
}
