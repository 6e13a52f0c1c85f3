//! Run configuration: a flat key=value text format (one pair per line, `#`
//! comments), with every key overridable from the command line. Unknown
//! keys are rejected, and every run writes its resolved configuration next
//! to its outputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::crm::{CrmConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::layers::EncoderConfig;
use crate::rcm::ExchangeKind;
use crate::synthdata::{SceneSpec, ShapeClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Lovasz,
    CrossEntropy,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lovasz" => Ok(LossKind::Lovasz),
            "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::InvalidConfig(format!(
                "unknown loss '{other}' (lovasz|ce)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Lovasz => "lovasz",
            LossKind::CrossEntropy => "ce",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub roi: usize,
    pub exchange: ExchangeKind,
    pub levels: usize,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub strategy: crate::groupstrat::Strategy,
    pub canvas: usize,
    pub channels: Vec<usize>,
    pub crm_channels: usize,
    pub train_groups: usize,
    pub test_groups: usize,
    pub val_groups: usize,
    pub train_classes: Vec<ShapeClass>,
    pub test_classes: Vec<ShapeClass>,
    pub distractors: usize,
    pub noise: f64,
    pub group_n: usize,
    pub loss: LossKind,
    pub candidate_gate_standard: bool,
    pub eval_every: usize,
    pub tuple_cap: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 4,
            roi: 2,
            exchange: ExchangeKind::Rcm,
            levels: 1,
            k: 2,
            lr: 1e-3,
            weight_decay: 5e-4,
            iterations: 2000,
            strategy: crate::groupstrat::Strategy::D,
            canvas: 64,
            channels: vec![8, 16, 32],
            crm_channels: 16,
            train_groups: 500,
            test_groups: 100,
            val_groups: 20,
            train_classes: vec![ShapeClass::Disk, ShapeClass::Square, ShapeClass::Triangle],
            test_classes: vec![ShapeClass::Cross, ShapeClass::Ring],
            distractors: 2,
            noise: 0.05,
            group_n: 40,
            loss: LossKind::Lovasz,
            candidate_gate_standard: false,
            eval_every: 200,
            tuple_cap: 10_000,
            out_dir: "runs/default".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse '{value}'")))
}

fn parse_classes(key: &str, value: &str) -> Result<Vec<ShapeClass>> {
    let classes: Vec<ShapeClass> = value
        .split(',')
        .filter(|s| !s.is_empty())
        .map(ShapeClass::parse)
        .collect::<Result<_>>()?;
    if classes.is_empty() {
        return Err(Error::InvalidConfig(format!("{key}: no classes given")));
    }
    Ok(classes)
}

impl RunConfig {
    /// Apply one key=value pair. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "roi" => self.roi = parse_num(key, value)?,
            "exchange" => self.exchange = ExchangeKind::parse(value)?,
            "levels" => self.levels = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "iterations" => self.iterations = parse_num(key, value)?,
            "strategy" => self.strategy = crate::groupstrat::Strategy::parse(value)?,
            "canvas" => self.canvas = parse_num(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num::<usize>(key, s))
                    .collect::<Result<_>>()?;
            }
            "crm_channels" => self.crm_channels = parse_num(key, value)?,
            "train_groups" => self.train_groups = parse_num(key, value)?,
            "test_groups" => self.test_groups = parse_num(key, value)?,
            "val_groups" => self.val_groups = parse_num(key, value)?,
            "train_classes" => self.train_classes = parse_classes(key, value)?,
            "test_classes" => self.test_classes = parse_classes(key, value)?,
            "distractors" => self.distractors = parse_num(key, value)?,
            "noise" => self.noise = parse_num(key, value)?,
            "group_n" => self.group_n = parse_num(key, value)?,
            "loss" => self.loss = LossKind::parse(value)?,
            "candidate_gate" => {
                self.candidate_gate_standard = match value {
                    "verbatim" => false,
                    "standard" => true,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "candidate_gate: '{other}' (verbatim|standard)"
                        )))
                    }
                }
            }
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "tuple_cap" => self.tuple_cap = parse_num(key, value)?,
            "out_dir" => self.out_dir = value.to_string(),
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{}:{}: expected key=value, got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig("k must be >= 2".into()));
        }
        if self.distractors > 2 {
            return Err(Error::InvalidConfig("distractors must be <= 2".into()));
        }
        if self
            .train_classes
            .iter()
            .any(|c| self.test_classes.contains(c))
        {
            return Err(Error::InvalidConfig(
                "train and test classes must be disjoint (held-out split)".into(),
            ));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                channels: self.channels.clone(),
            },
            levels: self.levels,
            crm_channels: self.crm_channels,
            classes: 2,
        }
    }

    pub fn crm_config(&self) -> CrmConfig {
        CrmConfig {
            steps: self.steps,
            exchange: self.exchange,
            roi: if self.roi == 0 {
                None
            } else {
                Some((self.roi, self.roi))
            },
            standard_candidate: self.candidate_gate_standard,
        }
    }

    pub fn scene_spec(&self, classes: &[ShapeClass], seed: u64) -> SceneSpec {
        SceneSpec {
            canvas: self.canvas,
            classes: classes.to_vec(),
            distractor_classes: Vec::new(),
            max_distractors: self.distractors,
            noise_amp: self.noise,
            seed,
        }
    }

    /// Stable key=value rendering, the file a run writes next to its
    /// outputs; feeding it back reproduces the run.
    pub fn to_config_string(&self) -> String {
        let classes = |v: &[ShapeClass]| {
            v.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
        };
        let channels = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "steps={}", self.steps);
        let _ = writeln!(s, "roi={}", self.roi);
        let _ = writeln!(s, "exchange={}", self.exchange.name());
        let _ = writeln!(s, "levels={}", self.levels);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "iterations={}", self.iterations);
        let _ = writeln!(s, "strategy={}", self.strategy.name());
        let _ = writeln!(s, "canvas={}", self.canvas);
        let _ = writeln!(s, "channels={channels}");
        let _ = writeln!(s, "crm_channels={}", self.crm_channels);
        let _ = writeln!(s, "train_groups={}", self.train_groups);
        let _ = writeln!(s, "test_groups={}", self.test_groups);
        let _ = writeln!(s, "val_groups={}", self.val_groups);
        let _ = writeln!(s, "train_classes={}", classes(&self.train_classes));
        let _ = writeln!(s, "test_classes={}", classes(&self.test_classes));
        let _ = writeln!(s, "distractors={}", self.distractors);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "group_n={}", self.group_n);
        let _ = writeln!(s, "loss={}", self.loss.name());
        let _ = writeln!(
            s,
            "candidate_gate={}",
            if self.candidate_gate_standard {
                "standard"
            } else {
                "verbatim"
            }
        );
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "tuple_cap={}", self.tuple_cap);
        let _ = writeln!(s, "out_dir={}", self.out_dir);
        s
    }
}
