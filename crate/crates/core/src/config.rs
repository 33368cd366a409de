//! Run configuration and its flat `key=value` text form.
//!
//! Defaults carry the published hyperparameters (lr 2e-5, tau 0.07, lambda1
//! 0.2, lambda2 0.1, k 3, mask ratio 0.4, label smoothing 0.1, warmup 10%,
//! weight decay 0.05, beam 3); model dimensions default to desk-scale toys.
//! Parsing starts from these defaults and applies overrides line by line;
//! `to_text` emits every key in sorted order so two equal configs serialize
//! byte-identically.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Precision;

/// Model dimensions (encoder/decoder widths, image geometry).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_shared: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub max_resp_len: usize,
    pub layer_norm_eps: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_shared: 32,
            n_heads: 4,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 2,
            image_size: 16,
            patch_size: 4,
            max_text_len: 32,
            max_resp_len: 16,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        Ok(())
    }
}

/// Which modules are active; disabling mirrors the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleToggles {
    pub tim: bool,
    pub tamim: bool,
    pub mf: bool,
    pub it: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        ModuleToggles { tim: true, tamim: true, mf: true, it: true }
    }
}

/// Training and inference hyperparameters for both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size_stage1: usize,
    pub batch_size_stage2: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Hard caps on optimizer steps per stage; 0 means no cap.
    pub max_steps_stage1: usize,
    pub max_steps_stage2: usize,
    pub warmup_fraction: f64,
    pub weight_decay_stage1: f64,
    pub weight_decay_stage2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub top_k: usize,
    pub mask_ratio: f64,
    /// Mask block side, in patches.
    pub mask_block: usize,
    pub label_smoothing: f64,
    pub beam_size: usize,
    pub max_gen_len: usize,
    pub tau_init: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub precision: Precision,
    pub toggles: ModuleToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            batch_size_stage1: 16,
            batch_size_stage2: 8,
            epochs_stage1: 20,
            epochs_stage2: 10,
            max_steps_stage1: 0,
            max_steps_stage2: 0,
            warmup_fraction: 0.10,
            weight_decay_stage1: 0.05,
            weight_decay_stage2: 0.01,
            lambda1: 0.2,
            lambda2: 0.1,
            top_k: 3,
            mask_ratio: 0.4,
            mask_block: 2,
            label_smoothing: 0.1,
            beam_size: 3,
            max_gen_len: 14,
            tau_init: 0.07,
            grad_clip: 1.0,
            seed: 0,
            precision: Precision::F32,
            toggles: ModuleToggles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

macro_rules! parse_num {
    ($value:expr, $key:expr) => {
        $value.parse().map_err(|_| {
            Error::Config(format!("invalid value '{}' for key '{}'", $value, $key))
        })?
    };
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1), got {}",
                t.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio must be in [0, 1), got {}",
                t.mask_ratio
            )));
        }
        if t.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if t.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if t.tau_init <= 0.0 {
            return Err(Error::Config(format!("tau_init must be positive, got {}", t.tau_init)));
        }
        for v in [t.lambda1, t.lambda2, t.label_smoothing, t.weight_decay_stage1, t.weight_decay_stage2] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("hyperparameter {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "d_model" => m.d_model = parse_num!(value, key),
            "d_shared" => m.d_shared = parse_num!(value, key),
            "n_heads" => m.n_heads = parse_num!(value, key),
            "d_ff" => m.d_ff = parse_num!(value, key),
            "n_enc_layers" => m.n_enc_layers = parse_num!(value, key),
            "n_dec_layers" => m.n_dec_layers = parse_num!(value, key),
            "image_size" => m.image_size = parse_num!(value, key),
            "patch_size" => m.patch_size = parse_num!(value, key),
            "max_text_len" => m.max_text_len = parse_num!(value, key),
            "max_resp_len" => m.max_resp_len = parse_num!(value, key),
            "layer_norm_eps" => m.layer_norm_eps = parse_num!(value, key),
            "dropout" => m.dropout = parse_num!(value, key),
            "lr" => t.lr = parse_num!(value, key),
            "batch_size_stage1" => t.batch_size_stage1 = parse_num!(value, key),
            "batch_size_stage2" => t.batch_size_stage2 = parse_num!(value, key),
            "epochs_stage1" => t.epochs_stage1 = parse_num!(value, key),
            "epochs_stage2" => t.epochs_stage2 = parse_num!(value, key),
            "max_steps_stage1" => t.max_steps_stage1 = parse_num!(value, key),
            "max_steps_stage2" => t.max_steps_stage2 = parse_num!(value, key),
            "warmup_fraction" => t.warmup_fraction = parse_num!(value, key),
            "weight_decay_stage1" => t.weight_decay_stage1 = parse_num!(value, key),
            "weight_decay_stage2" => t.weight_decay_stage2 = parse_num!(value, key),
            "lambda1" => t.lambda1 = parse_num!(value, key),
            "lambda2" => t.lambda2 = parse_num!(value, key),
            "top_k" => t.top_k = parse_num!(value, key),
            "mask_ratio" => t.mask_ratio = parse_num!(value, key),
            "mask_block" => t.mask_block = parse_num!(value, key),
            "label_smoothing" => t.label_smoothing = parse_num!(value, key),
            "beam_size" => t.beam_size = parse_num!(value, key),
            "max_gen_len" => t.max_gen_len = parse_num!(value, key),
            "tau_init" => t.tau_init = parse_num!(value, key),
            "grad_clip" => t.grad_clip = parse_num!(value, key),
            "seed" => t.seed = parse_num!(value, key),
            "precision" => {
                t.precision = Precision::parse(value).ok_or_else(|| {
                    Error::Config(format!("invalid precision '{value}' (expected f32 or f64)"))
                })?
            }
            "use_tim" => t.toggles.tim = parse_num!(value, key),
            "use_tamim" => t.toggles.tamim = parse_num!(value, key),
            "use_mf" => t.toggles.mf = parse_num!(value, key),
            "use_it" => t.toggles.it = parse_num!(value, key),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses flat `key=value` text over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every key in sorted order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut pairs: Vec<(&str, String)> = alloc::vec![
            ("d_model", m.d_model.to_string()),
            ("d_shared", m.d_shared.to_string()),
            ("n_heads", m.n_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("n_enc_layers", m.n_enc_layers.to_string()),
            ("n_dec_layers", m.n_dec_layers.to_string()),
            ("image_size", m.image_size.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("max_text_len", m.max_text_len.to_string()),
            ("max_resp_len", m.max_resp_len.to_string()),
            ("layer_norm_eps", format!("{:e}", m.layer_norm_eps)),
            ("dropout", m.dropout.to_string()),
            ("lr", format!("{:e}", t.lr)),
            ("batch_size_stage1", t.batch_size_stage1.to_string()),
            ("batch_size_stage2", t.batch_size_stage2.to_string()),
            ("epochs_stage1", t.epochs_stage1.to_string()),
            ("epochs_stage2", t.epochs_stage2.to_string()),
            ("max_steps_stage1", t.max_steps_stage1.to_string()),
            ("max_steps_stage2", t.max_steps_stage2.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("weight_decay_stage1", t.weight_decay_stage1.to_string()),
            ("weight_decay_stage2", t.weight_decay_stage2.to_string()),
            ("lambda1", t.lambda1.to_string()),
            ("lambda2", t.lambda2.to_string()),
            ("top_k", t.top_k.to_string()),
            ("mask_ratio", t.mask_ratio.to_string()),
            ("mask_block", t.mask_block.to_string()),
            ("label_smoothing", t.label_smoothing.to_string()),
            ("beam_size", t.beam_size.to_string()),
            ("max_gen_len", t.max_gen_len.to_string()),
            ("tau_init", t.tau_init.to_string()),
            ("grad_clip", t.grad_clip.to_string()),
            ("seed", t.seed.to_string()),
            ("precision", t.precision.as_str().to_string()),
            ("use_tim", t.toggles.tim.to_string()),
            ("use_tamim", t.toggles.tamim.to_string()),
            ("use_mf", t.toggles.mf.to_string()),
            ("use_it", t.toggles.it.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = Config::default();
        assert_eq!(c.train.lr, 2e-5);
        assert_eq!(c.train.tau_init, 0.07);
        assert_eq!(c.train.lambda1, 0.2);
        assert_eq!(c.train.lambda2, 0.1);
        assert_eq!(c.train.top_k, 3);
        assert_eq!(c.train.mask_ratio, 0.4);
        assert_eq!(c.train.label_smoothing, 0.1);
        assert_eq!(c.train.warmup_fraction, 0.10);
        assert_eq!(c.train.weight_decay_stage1, 0.05);
        assert_eq!(c.train.beam_size, 3);
    }

    #[test]
    fn parse_roundtrip_is_stable() {
        let mut c = Config::default();
        c.set("d_model", "32").unwrap();
        c.set("seed", "7").unwrap();
        let text = c.to_text();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(Config::parse("nonsense=1"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::parse("lr=-1").is_err());
        assert!(Config::parse("mask_ratio=1.5").is_err());
        assert!(Config::parse("precision=f16").is_err());
        assert!(Config::parse("d_model=65").is_err());
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let c = Config::parse("# comment\n\nseed = 9\n").unwrap();
        assert_eq!(c.train.seed, 9);
    }
}
