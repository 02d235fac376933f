//! Flat `key=value` run configuration.
//!
//! One key per line, `#` starts a comment. Every key has a default; unknown
//! keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::augment::{AugmentProfile, MultiCrop};
use crate::encoder::EncoderConfig;
use crate::error::{CloveError, Result};
use crate::evalkit::corpus::CorpusProfile;
use crate::objective::{LossConfig, LossMode, NegativeStrategy};
use crate::optim::LarsConfig;
use crate::predictor::AttentionConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_frac: f64,
    pub lars: LarsConfig,
    pub ema_alpha0: f64,
    pub t_pos: f64,
    pub symmetric: bool,
    pub n_global: usize,
    pub n_local: usize,
    pub global_aug: AugmentProfile,
    pub local_aug: AugmentProfile,
    pub loss: LossConfig,
    pub queue_size: usize,
    pub n_heads: usize,
    pub temperature: f64,
    pub normalize_qk: bool,
    pub encoder: EncoderConfig,
    pub data_seed: u64,
    pub train_size: usize,
    pub eval_size: usize,
    pub resolution: usize,
    pub eval_t_pos: f64,
    pub eval_crop_min: f64,
    pub eval_use_teacher: bool,
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 64,
            lr: 0.4,
            lr_min: 0.0,
            warmup_frac: 0.05,
            lars: LarsConfig::default(),
            ema_alpha0: 0.99,
            t_pos: 0.7,
            symmetric: true,
            n_global: 2,
            n_local: 0,
            global_aug: AugmentProfile::global(32),
            local_aug: AugmentProfile::local(16),
            loss: LossConfig::default(),
            queue_size: 16384,
            n_heads: 8,
            temperature: 0.2,
            normalize_qk: true,
            encoder: EncoderConfig::default(),
            data_seed: 0,
            train_size: 2048,
            eval_size: 256,
            resolution: 32,
            eval_t_pos: 0.1,
            eval_crop_min: 0.3,
            eval_use_teacher: true,
            log_wallclock: true,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed; also read from CLOVE_SEED by the CLI"),
    ("steps", "optimizer steps"),
    ("batch_size", "images per step"),
    ("lr", "peak learning rate"),
    ("lr_min", "final learning rate of the cosine decay"),
    ("warmup_frac", "fraction of steps spent in linear warmup"),
    ("weight_decay", "decay on conv/linear weights"),
    ("lars.momentum", "optimizer momentum"),
    ("lars.trust", "LARS trust coefficient"),
    ("ema.alpha0", "teacher momentum at step 0, ramped to 1 by cosine"),
    ("t_pos", "canonical distance below which two cells match"),
    ("symmetric", "also predict view 1 from view 2"),
    ("crop.global", "global views per image"),
    ("crop.local", "low-resolution local views per image"),
    ("aug.crop_min", "smallest global crop area fraction"),
    ("aug.crop_max", "largest global crop area fraction"),
    ("aug.local_crop_min", "smallest local crop area fraction"),
    ("aug.local_crop_max", "largest local crop area fraction"),
    ("aug.flip_prob", "horizontal flip probability"),
    ("aug.jitter_prob", "color jitter probability"),
    ("aug.brightness", "brightness jitter strength"),
    ("aug.contrast", "contrast jitter strength"),
    ("aug.saturation", "saturation jitter strength"),
    ("aug.grayscale_prob", "grayscale probability"),
    ("loss.mode", "rank or l2"),
    ("loss.margin", "ranking margin"),
    ("loss.scale", "weight of the positive similarity"),
    ("loss.top_k", "size of the hard-negative region"),
    ("loss.negatives", "intra, inter or inter-avg"),
    ("loss.queue_size", "capacity of the negative queue"),
    ("attn.heads", "attention heads; must divide enc.dim"),
    ("attn.temperature", "softmax temperature"),
    ("attn.normalize_qk", "unit-normalize queries and keys"),
    ("enc.channels", "comma-separated stage widths"),
    ("enc.hidden", "projection head hidden width"),
    ("enc.dim", "local embedding width"),
    ("enc.bn_momentum", "running-statistics momentum"),
    ("data.seed", "corpus seed"),
    ("data.train_size", "training images"),
    ("data.eval_size", "evaluation images"),
    ("data.resolution", "image side and global view side"),
    ("eval.t_pos", "distance for the per-threshold breakdown"),
    ("eval.crop_min", "smallest crop area fraction of evaluation views"),
    ("eval.teacher", "evaluate teacher (true) or student (false) features"),
    ("log_wallclock", "write elapsed milliseconds to the metrics file"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| CloveError::config(key, format!("cannot parse `{value}`: {e}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "weight_decay" => self.lars.weight_decay = parse(key, v)?,
            "lars.momentum" => self.lars.momentum = parse(key, v)?,
            "lars.trust" => self.lars.trust_coeff = parse(key, v)?,
            "ema.alpha0" => self.ema_alpha0 = parse(key, v)?,
            "t_pos" => self.t_pos = parse(key, v)?,
            "symmetric" => self.symmetric = parse(key, v)?,
            "crop.global" => self.n_global = parse(key, v)?,
            "crop.local" => self.n_local = parse(key, v)?,
            "aug.crop_min" => self.global_aug.crop_scale.0 = parse(key, v)?,
            "aug.crop_max" => self.global_aug.crop_scale.1 = parse(key, v)?,
            "aug.local_crop_min" => self.local_aug.crop_scale.0 = parse(key, v)?,
            "aug.local_crop_max" => self.local_aug.crop_scale.1 = parse(key, v)?,
            "aug.flip_prob" => {
                self.global_aug.flip_prob = parse(key, v)?;
                self.local_aug.flip_prob = self.global_aug.flip_prob;
            }
            "aug.jitter_prob" => {
                self.global_aug.jitter_prob = parse(key, v)?;
                self.local_aug.jitter_prob = self.global_aug.jitter_prob;
            }
            "aug.brightness" => {
                self.global_aug.brightness = parse(key, v)?;
                self.local_aug.brightness = self.global_aug.brightness;
            }
            "aug.contrast" => {
                self.global_aug.contrast = parse(key, v)?;
                self.local_aug.contrast = self.global_aug.contrast;
            }
            "aug.saturation" => {
                self.global_aug.saturation = parse(key, v)?;
                self.local_aug.saturation = self.global_aug.saturation;
            }
            "aug.grayscale_prob" => {
                self.global_aug.grayscale_prob = parse(key, v)?;
                self.local_aug.grayscale_prob = self.global_aug.grayscale_prob;
            }
            "loss.mode" => self.loss.mode = parse::<LossMode>(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "loss.scale" => self.loss.scale = parse(key, v)?,
            "loss.top_k" => self.loss.top_k = parse(key, v)?,
            "loss.negatives" => self.loss.negatives = parse::<NegativeStrategy>(key, v)?,
            "loss.queue_size" => self.queue_size = parse(key, v)?,
            "attn.heads" => self.n_heads = parse(key, v)?,
            "attn.temperature" => self.temperature = parse(key, v)?,
            "attn.normalize_qk" => self.normalize_qk = parse(key, v)?,
            "enc.channels" => {
                self.encoder.channels = v
                    .split(',')
                    .map(|c| parse(key, c))
                    .collect::<Result<Vec<usize>>>()?
            }
            "enc.hidden" => self.encoder.head_hidden = parse(key, v)?,
            "enc.dim" => self.encoder.out_dim = parse(key, v)?,
            "enc.bn_momentum" => self.encoder.bn_momentum = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.train_size" => self.train_size = parse(key, v)?,
            "data.eval_size" => self.eval_size = parse(key, v)?,
            "data.resolution" => {
                self.resolution = parse(key, v)?;
                let r = self.resolution;
                (self.global_aug.out_h, self.global_aug.out_w) = (r, r);
                (self.local_aug.out_h, self.local_aug.out_w) = ((r / 2).max(1), (r / 2).max(1));
            }
            "eval.t_pos" => self.eval_t_pos = parse(key, v)?,
            "eval.crop_min" => self.eval_crop_min = parse(key, v)?,
            "eval.teacher" => self.eval_use_teacher = parse(key, v)?,
            "log_wallclock" => self.log_wallclock = parse(key, v)?,
            _ => return Err(CloveError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "warmup_frac" => self.warmup_frac.to_string(),
            "weight_decay" => self.lars.weight_decay.to_string(),
            "lars.momentum" => self.lars.momentum.to_string(),
            "lars.trust" => self.lars.trust_coeff.to_string(),
            "ema.alpha0" => self.ema_alpha0.to_string(),
            "t_pos" => self.t_pos.to_string(),
            "symmetric" => self.symmetric.to_string(),
            "crop.global" => self.n_global.to_string(),
            "crop.local" => self.n_local.to_string(),
            "aug.crop_min" => self.global_aug.crop_scale.0.to_string(),
            "aug.crop_max" => self.global_aug.crop_scale.1.to_string(),
            "aug.local_crop_min" => self.local_aug.crop_scale.0.to_string(),
            "aug.local_crop_max" => self.local_aug.crop_scale.1.to_string(),
            "aug.flip_prob" => self.global_aug.flip_prob.to_string(),
            "aug.jitter_prob" => self.global_aug.jitter_prob.to_string(),
            "aug.brightness" => self.global_aug.brightness.to_string(),
            "aug.contrast" => self.global_aug.contrast.to_string(),
            "aug.saturation" => self.global_aug.saturation.to_string(),
            "aug.grayscale_prob" => self.global_aug.grayscale_prob.to_string(),
            "loss.mode" => self.loss.mode.to_string(),
            "loss.margin" => self.loss.margin.to_string(),
            "loss.scale" => self.loss.scale.to_string(),
            "loss.top_k" => self.loss.top_k.to_string(),
            "loss.negatives" => self.loss.negatives.to_string(),
            "loss.queue_size" => self.queue_size.to_string(),
            "attn.heads" => self.n_heads.to_string(),
            "attn.temperature" => self.temperature.to_string(),
            "attn.normalize_qk" => self.normalize_qk.to_string(),
            "enc.channels" => self
                .encoder
                .channels
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "enc.hidden" => self.encoder.head_hidden.to_string(),
            "enc.dim" => self.encoder.out_dim.to_string(),
            "enc.bn_momentum" => self.encoder.bn_momentum.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.train_size" => self.train_size.to_string(),
            "data.eval_size" => self.eval_size.to_string(),
            "data.resolution" => self.resolution.to_string(),
            "eval.t_pos" => self.eval_t_pos.to_string(),
            "eval.crop_min" => self.eval_crop_min.to_string(),
            "eval.teacher" => self.eval_use_teacher.to_string(),
            "log_wallclock" => self.log_wallclock.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CloveError::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CloveError::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text)
    }

    /// Every key with its effective value, one per line.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k}={}\n", self.get(k).expect("listed keys are known")))
            .collect()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            head_dim: self.encoder.out_dim.checked_div(self.n_heads).unwrap_or(0),
            temperature: self.temperature,
            normalize_qk: self.normalize_qk,
        }
    }

    pub fn multicrop(&self) -> MultiCrop {
        MultiCrop {
            global: self.global_aug.clone(),
            local: self.local_aug.clone(),
        }
    }

    /// Evaluation views: global recipe with a larger minimum crop.
    pub fn eval_profile(&self) -> AugmentProfile {
        AugmentProfile {
            crop_scale: (self.eval_crop_min, 1.0),
            ..self.global_aug.clone()
        }
    }

    pub fn corpus_profile(&self) -> CorpusProfile {
        CorpusProfile {
            resolution: self.resolution,
            ..CorpusProfile::default()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("crop.global", self.n_global),
            ("data.train_size", self.train_size),
            ("data.eval_size", self.eval_size),
            ("loss.queue_size", self.queue_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(CloveError::config(k, "must be positive"));
            }
        }
        if self.n_global + self.n_local < 2 {
            return Err(CloveError::config("crop.global", "need at least two views per image"));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(CloveError::config("lr", "need lr > 0 and 0 <= lr_min <= lr"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(CloveError::config("warmup_frac", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha0) {
            return Err(CloveError::config("ema.alpha0", "must lie in [0, 1]"));
        }
        if !(self.lars.weight_decay >= 0.0) || !(self.lars.trust_coeff > 0.0) || !(0.0..1.0).contains(&self.lars.momentum) {
            return Err(CloveError::config("lars", "need weight_decay >= 0, trust > 0, 0 <= momentum < 1"));
        }
        if !(self.t_pos > 0.0) || !(self.eval_t_pos > 0.0) {
            return Err(CloveError::config("t_pos", "must be positive"));
        }
        if !(self.eval_crop_min > 0.0 && self.eval_crop_min <= 1.0) {
            return Err(CloveError::config("eval.crop_min", "must lie in (0, 1]"));
        }
        let stride = self.encoder.total_stride();
        if self.resolution % stride != 0 || (self.n_local > 0 && (self.resolution / 2) % stride != 0) {
            return Err(CloveError::config(
                "data.resolution",
                format!("view sides must be divisible by the encoder stride {stride}"),
            ));
        }
        self.encoder.validate()?;
        self.attention().validate(self.encoder.out_dim)?;
        self.loss.validate()?;
        self.global_aug.validate()?;
        self.local_aug.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = TrainConfig::default();
        c.set("lr", "0.123456789").unwrap();
        c.set("enc.channels", "8,16").unwrap();
        c.set("loss.negatives", "inter-avg").unwrap();
        let back = TrainConfig::from_text(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn every_listed_key_is_settable() {
        let c = TrainConfig::default();
        for (k, _) in KEYS {
            let mut d = c.clone();
            d.set(k, &c.get(k).unwrap()).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::from_text("steps=10\nbogus.key=1\n").unwrap_err();
        assert!(matches!(&e, CloveError::Config { key, .. } if key == "bogus.key"));
        let e = TrainConfig::from_text("steps=ten").unwrap_err();
        assert!(matches!(&e, CloveError::Config { key, .. } if key == "steps"));
        assert!(TrainConfig::from_text("no equals sign").is_err());
        let c = TrainConfig::from_text("# comment\n\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn invalid_combinations() {
        let bad = |k: &str, v: &str| {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            c.validate().is_err()
        };
        assert!(bad("attn.heads", "3"));
        assert!(bad("steps", "0"));
        assert!(bad("data.resolution", "36"));
        assert!(bad("loss.top_k", "1"));
        assert!(bad("t_pos", "0"));
    }
}
