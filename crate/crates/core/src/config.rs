//! Run configuration: a TOML file layered over defaults, with dotted-key
//! overrides from the command line on top.
//!
//! ```toml
//! mode = "baseline"        # baseline | mix-loss | mix-rep | mix-input | train-diffusion
//!                          # | generate | eval | synth-data | gradcheck
//! seed = 0
//! deterministic = true
//! batch_size = 64
//! epochs = 100             # hard cap on top of early stopping
//! early_stop_patience = 5
//! input_size = 32
//! train_fraction = 0.9
//! threshold = 0.5
//! data = "data"            # holds train.csv and train/
//! out = "runs/baseline"
//! synthetic = "runs/gen"   # holds generated.csv and generated/ (mix modes)
//! checkpoint = ""          # eval: defaults to {out}/checkpoints/best.ckpt
//! eval_split = "val"       # val | all
//!
//! [backbone]  depth = "r18"   width = 0.25
//! [loss]      kind = "bce"    gamma = 2.0  alpha = 0.25  scale = 30.0  margin = 0.5
//! [schedule]  kind = "a"      init_lr = 1e-3
//! [mix]       mode = "representation"  beta = 0.3
//! [diffusion] steps = 200  beta_start = 1e-4  beta_end = 0.02  epochs = 30  lr = 1e-4
//!             batch_size = 64  embed_dim = 4  hidden = 32  per_class = 384  checkpoint = ""
//! [synth]     per_class = 40  size = 32  multi_label = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Depth};
use crate::error::{Error, Result};
use crate::losses::{ArcMargin, FocalParams, LossKind};
use crate::schedulers::ScheduleKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    MixLoss,
    MixRep,
    MixInput,
    TrainDiffusion,
    Generate,
    Eval,
    SynthData,
    Gradcheck,
}

impl Mode {
    pub fn mix_mode(self) -> Option<MixMode> {
        match self {
            Mode::MixLoss => Some(MixMode::Loss),
            Mode::MixRep => Some(MixMode::Representation),
            Mode::MixInput => Some(MixMode::Input),
            _ => None,
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Mode::Baseline | Mode::MixLoss | Mode::MixRep | Mode::MixInput)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Input,
    Representation,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub depth: Depth,
    pub width: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            depth: Depth::R18,
            width: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: f64,
    pub scale: f64,
    pub margin: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let f = FocalParams::default();
        let a = ArcMargin::default();
        Self {
            kind: LossKind::Bce,
            gamma: f.gamma,
            alpha: f.alpha,
            scale: a.scale,
            margin: a.margin,
        }
    }
}

impl LossSection {
    pub fn focal(&self) -> Result<FocalParams> {
        FocalParams::new(self.gamma, self.alpha)
    }

    pub fn arc(&self) -> Result<ArcMargin> {
        ArcMargin::new(self.scale, self.margin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub init_lr: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::A,
            init_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSection {
    /// Must agree with `mode` when both are given; filled in from `mode`.
    pub mode: Option<MixMode>,
    pub beta: f64,
}

impl Default for MixSection {
    fn default() -> Self {
        Self { mode: None, beta: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub per_class: usize,
    /// Denoiser checkpoint for `generate`; defaults to
    /// `{out}/checkpoints/best.ckpt`.
    pub checkpoint: PathBuf,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            epochs: 30,
            lr: 1e-4,
            batch_size: 64,
            embed_dim: 4,
            hidden: 32,
            per_class: 384,
            checkpoint: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub per_class: usize,
    pub size: usize,
    pub multi_label: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            per_class: 40,
            size: 32,
            multi_label: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub deterministic: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub input_size: usize,
    pub train_fraction: f64,
    pub threshold: f64,
    pub data: PathBuf,
    pub out: PathBuf,
    pub synthetic: PathBuf,
    pub checkpoint: PathBuf,
    pub eval_split: EvalSplit,
    pub backbone: BackboneSection,
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    pub mix: MixSection,
    pub diffusion: DiffusionSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            seed: 0,
            deterministic: true,
            batch_size: 64,
            epochs: 100,
            early_stop_patience: 5,
            input_size: 32,
            train_fraction: 0.9,
            threshold: 0.5,
            data: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            synthetic: PathBuf::new(),
            checkpoint: PathBuf::new(),
            eval_split: EvalSplit::Val,
            backbone: BackboneSection::default(),
            loss: LossSection::default(),
            schedule: ScheduleSection::default(),
            mix: MixSection::default(),
            diffusion: DiffusionSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional file, then `key=value` overrides with
    /// dotted keys (`loss.kind=focal`). Values are parsed as TOML literals,
    /// falling back to plain strings.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_literal(raw))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.materialize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn materialize(&mut self) -> Result<()> {
        match (self.mode.mix_mode(), self.mix.mode) {
            (Some(m), None) => self.mix.mode = Some(m),
            (Some(m), Some(given)) if m != given => {
                return Err(Error::config(format!(
                    "mix.mode = {given:?} contradicts mode = {:?}",
                    self.mode
                )))
            }
            _ => {}
        }
        if self.checkpoint.as_os_str().is_empty() {
            self.checkpoint = self.out.join("checkpoints").join("best.ckpt");
        }
        if self.diffusion.checkpoint.as_os_str().is_empty() {
            self.diffusion.checkpoint = self.out.join("checkpoints").join("best.ckpt");
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("diffusion.steps", self.diffusion.steps),
            ("diffusion.epochs", self.diffusion.epochs),
            ("diffusion.batch_size", self.diffusion.batch_size),
            ("diffusion.per_class", self.diffusion.per_class),
            ("synth.per_class", self.synth.per_class),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        crate::schedulers::LrSchedule::new(self.schedule.kind, self.schedule.init_lr)?;
        if !(self.diffusion.lr > 0.0 && self.diffusion.lr.is_finite()) {
            return Err(Error::config("diffusion.lr must be positive"));
        }
        if !(self.mix.beta > 0.0 && self.mix.beta.is_finite()) {
            return Err(Error::config(format!("mix.beta must be positive, got {}", self.mix.beta)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.synth.size < 16 {
            return Err(Error::config("synth.size must be at least 16"));
        }
        self.backbone_config().validate()?;
        self.loss.focal()?;
        self.loss.arc()?;
        crate::diffusion::make_linear_schedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)?;
        self.denoiser_config().validate()?;
        if let Some(m) = self.mix.mode.filter(|_| self.mode.is_classifier()) {
            let ok = match m {
                MixMode::Loss => matches!(self.loss.kind, LossKind::Bce | LossKind::Focal),
                MixMode::Representation | MixMode::Input => self.loss.kind == LossKind::Bce,
            };
            if !ok {
                return Err(Error::config(format!(
                    "loss.kind = {:?} is not supported with mix mode {m:?}; mixed soft targets need bce \
                     (loss mode also accepts focal)",
                    self.loss.kind
                )));
            }
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::new(self.backbone.depth, self.backbone.width, self.input_size)
    }

    pub fn denoiser_config(&self) -> crate::diffusion::DenoiserConfig {
        crate::diffusion::DenoiserConfig {
            embed_dim: self.diffusion.embed_dim,
            hidden: self.diffusion.hidden,
            ..Default::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `{out}/resolved_config`.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join("resolved_config");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::config(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("{key}: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
