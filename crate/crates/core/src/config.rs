//! Run configuration and the flat `key = value` config file format.
//!
//! Lines are `key = value`; `#` starts a comment; unknown keys are errors.
//! Every key has a default, so an empty file is a valid config. See
//! [`RunConfig::to_text`] for the full list.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::synth::GenConfig;
use crate::train::TrainConfig;

/// How the transient switch decision is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchMode {
    /// Threshold the learned score at 0.5.
    Learned,
    /// Switch always off: the persistent-only ablation.
    Off,
    /// Switch always on (used by gradient checks).
    On,
}

impl SwitchMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned" => Some(Self::Learned),
            "off" => Some(Self::Off),
            "on" => Some(Self::On),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SwitchMode::Learned => "learned",
            SwitchMode::Off => "off",
            SwitchMode::On => "on",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Observed steps (T).
    pub obs_steps: usize,
    /// Predicted steps (L).
    pub horizon: usize,
    pub hidden_dim: usize,
    pub att_dim: usize,
    pub mlp_hidden: usize,
    /// Inward edge radius (mm).
    pub rho_in_mm: f64,
    /// Outward edge radius (mm).
    pub rho_out_mm: f64,
    /// Initial switch distance decay rate (per mm).
    pub beta_init: f64,
    /// Network inputs and the prediction loss use `coordinate / coord_scale_mm`.
    pub coord_scale_mm: f64,
    /// Prediction heads emit displacements in units of `delta_scale_mm`.
    pub delta_scale_mm: f64,
    pub attn_sigma: Activation,
    pub phi: Activation,
    pub mlp_activation: Activation,
    pub switch_mode: SwitchMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            obs_steps: 10,
            horizon: 20,
            hidden_dim: 64,
            att_dim: 64,
            mlp_hidden: 64,
            rho_in_mm: 500.0,
            rho_out_mm: 100.0,
            beta_init: 1.0 / 500.0,
            coord_scale_mm: 1000.0,
            delta_scale_mm: 100.0,
            attn_sigma: Activation::Tanh,
            phi: Activation::Tanh,
            mlp_activation: Activation::Relu,
            switch_mode: SwitchMode::Learned,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.obs_steps == 0 {
            return bad("obs_steps must be positive");
        }
        if self.hidden_dim == 0 || self.att_dim == 0 || self.mlp_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.rho_out_mm >= 0.0 && self.rho_out_mm <= self.rho_in_mm) {
            return bad("need 0 <= rho_out_mm <= rho_in_mm");
        }
        if !(self.beta_init > 0.0) {
            return bad("beta_init must be positive");
        }
        if !(self.coord_scale_mm > 0.0 && self.delta_scale_mm > 0.0) {
            return bad("scales must be positive");
        }
        Ok(())
    }
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_act(key: &str, v: &str) -> Result<Activation> {
    Activation::parse(v).ok_or_else(|| Error::Config(format!("invalid activation `{v}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let g = &mut self.gen;
        match key {
            "obs_steps" => m.obs_steps = parse_num(key, v)?,
            "horizon" => m.horizon = parse_num(key, v)?,
            "hidden_dim" => m.hidden_dim = parse_num(key, v)?,
            "att_dim" => m.att_dim = parse_num(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse_num(key, v)?,
            "rho_in_mm" => m.rho_in_mm = parse_num(key, v)?,
            "rho_out_mm" => m.rho_out_mm = parse_num(key, v)?,
            "beta_init" => m.beta_init = parse_num(key, v)?,
            "coord_scale_mm" => m.coord_scale_mm = parse_num(key, v)?,
            "delta_scale_mm" => m.delta_scale_mm = parse_num(key, v)?,
            "attn_sigma" => m.attn_sigma = parse_act(key, v)?,
            "phi" => m.phi = parse_act(key, v)?,
            "mlp_activation" => m.mlp_activation = parse_act(key, v)?,
            "switch_mode" => {
                m.switch_mode = SwitchMode::parse(v)
                    .ok_or_else(|| Error::Config(format!("invalid switch_mode `{v}`")))?
            }
            "lambda" => t.lambda = parse_num(key, v)?,
            "learning_rate" => t.learning_rate = parse_num(key, v)?,
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "adam_beta1" => t.beta1 = parse_num(key, v)?,
            "adam_beta2" => t.beta2 = parse_num(key, v)?,
            "adam_eps" => t.eps = parse_num(key, v)?,
            "clip_norm" => t.clip_norm = parse_num(key, v)?,
            "train_fraction" => t.train_fraction = parse_num(key, v)?,
            "gen_seed" => g.seed = parse_num(key, v)?,
            "num_scenes" => g.num_scenes = parse_num(key, v)?,
            "scene_steps" => g.steps = parse_num(key, v)?,
            "dt" => g.dt = parse_num(key, v)?,
            "humans_min" => g.humans_min = parse_num(key, v)?,
            "humans_max" => g.humans_max = parse_num(key, v)?,
            "objects_min" => g.objects_min = parse_num(key, v)?,
            "objects_max" => g.objects_max = parse_num(key, v)?,
            "episode_rate" => g.episode_rate = parse_num(key, v)?,
            "episode_start_min" => g.episode_start_min = parse_num(key, v)?,
            "episode_start_max" => g.episode_start_max = parse_num(key, v)?,
            "approach_steps_min" => g.approach_steps_min = parse_num(key, v)?,
            "approach_steps_max" => g.approach_steps_max = parse_num(key, v)?,
            "carry_steps_min" => g.carry_steps_min = parse_num(key, v)?,
            "carry_steps_max" => g.carry_steps_max = parse_num(key, v)?,
            "label_onset_offset" => g.label_onset_offset = parse_num(key, v)?,
            "arena_mm" => g.arena_mm = parse_num(key, v)?,
            "speed_min" => g.speed_min = parse_num(key, v)?,
            "speed_max" => g.speed_max = parse_num(key, v)?,
            "gen_rho_out_mm" => g.rho_out_mm = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()
    }

    /// Resolved configuration in the same format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let (m, t, g) = (&self.model, &self.train, &self.gen);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("obs_steps", m.obs_steps.to_string());
        kv("horizon", m.horizon.to_string());
        kv("hidden_dim", m.hidden_dim.to_string());
        kv("att_dim", m.att_dim.to_string());
        kv("mlp_hidden", m.mlp_hidden.to_string());
        kv("rho_in_mm", m.rho_in_mm.to_string());
        kv("rho_out_mm", m.rho_out_mm.to_string());
        kv("beta_init", m.beta_init.to_string());
        kv("coord_scale_mm", m.coord_scale_mm.to_string());
        kv("delta_scale_mm", m.delta_scale_mm.to_string());
        kv("attn_sigma", m.attn_sigma.as_str().into());
        kv("phi", m.phi.as_str().into());
        kv("mlp_activation", m.mlp_activation.as_str().into());
        kv("switch_mode", m.switch_mode.as_str().into());
        kv("lambda", t.lambda.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("adam_beta1", t.beta1.to_string());
        kv("adam_beta2", t.beta2.to_string());
        kv("adam_eps", t.eps.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("train_fraction", t.train_fraction.to_string());
        kv("gen_seed", g.seed.to_string());
        kv("num_scenes", g.num_scenes.to_string());
        kv("scene_steps", g.steps.to_string());
        kv("dt", g.dt.to_string());
        kv("humans_min", g.humans_min.to_string());
        kv("humans_max", g.humans_max.to_string());
        kv("objects_min", g.objects_min.to_string());
        kv("objects_max", g.objects_max.to_string());
        kv("episode_rate", g.episode_rate.to_string());
        kv("episode_start_min", g.episode_start_min.to_string());
        kv("episode_start_max", g.episode_start_max.to_string());
        kv("approach_steps_min", g.approach_steps_min.to_string());
        kv("approach_steps_max", g.approach_steps_max.to_string());
        kv("carry_steps_min", g.carry_steps_min.to_string());
        kv("carry_steps_max", g.carry_steps_max.to_string());
        kv("label_onset_offset", g.label_onset_offset.to_string());
        kv("arena_mm", g.arena_mm.to_string());
        kv("speed_min", g.speed_min.to_string());
        kv("speed_max", g.speed_max.to_string());
        kv("gen_rho_out_mm", g.rho_out_mm.to_string());
        s
    }
}
