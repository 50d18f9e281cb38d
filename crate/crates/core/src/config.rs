//! Run configuration: one strict JSON document with `schedule`, `model`,
//! `data`, `trainer`, and `sampler` sections plus a top-level `seed`.
//!
//! Loading is strict in two ways. First, unknown keys anywhere in the
//! document are rejected, and the error lists every offending key at once so
//! a typo'd config fails with the full picture rather than one key per
//! attempt. Second, [`RunConfig::validate`] runs the same constructors the
//! pipeline will use (schedules, geometry, networks) and collects every
//! violation it finds.
//!
//! Missing keys fall back to the desk-scale defaults documented on each
//! field, so `{}` is a complete, valid configuration. Command-line overrides
//! are dotted assignments like `trainer.lr=5e-4`, applied to the raw JSON
//! before the strict parse so a mistyped path is caught like any other
//! unknown key.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Geometry, GlyphAlphabet, StagePlan};
use crate::denoiser::{DenoiserConfig, TextDecoder, Unet};
use crate::error::{Error, Result};
use crate::fusion::{MomConfig, MomLite};
use crate::metrics::LossWeights;
use crate::ocr::OcrHead;
use crate::schedules::{make_shift_schedule, make_text_schedule};

/// Diffusion-time schedule endpoints shared by the image and text chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Number of diffusion steps. Default 18.
    #[serde(rename = "T")]
    pub t: usize,
    /// Noise-to-shift ratio of the image chain. Default 2.0.
    pub kappa: f64,
    /// Image-chain shift fraction after the first step. Default 0.005.
    pub eta_1: f64,
    /// Image-chain shift fraction at the final step. Default 0.9999.
    #[serde(rename = "eta_T")]
    pub eta_t: f64,
    /// Text-chain signal retention at the final step. Default 0.02.
    pub final_alphabar: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t: 18, kappa: 2.0, eta_1: 0.005, eta_t: 0.9999, final_alphabar: 0.02 }
    }
}

/// Network and codec sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Denoiser channels at full latent resolution; level l uses `base << l`.
    /// Default 32.
    pub base: usize,
    /// Denoiser resolution levels (1 = no downsampling). Default 2.
    pub levels: usize,
    /// Self-attention runs on latent grids with at most `threshold²`
    /// positions. Default 16.
    pub attn_threshold: usize,
    /// Embedding width of the conditioning mixer and text decoder. Default 64.
    pub d: usize,
    /// Codec patch size: each `patch × patch` pixel block becomes one latent
    /// pixel with `patch²` channels. Default 2.
    pub patch: usize,
    /// Softmax temperature of the template recognizer that seeds text
    /// confidences. Default 25.0.
    pub ocr_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base: 32, levels: 2, attn_threshold: 16, d: 64, patch: 2, ocr_temperature: 25.0 }
    }
}

/// Synthetic corpus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Alphabet size including the blank symbol. Default 16.
    #[serde(rename = "K")]
    pub k: usize,
    /// Image height in pixels. Default 32.
    pub height: usize,
    /// Image width in pixels. Default 128.
    pub width: usize,
    /// Shortest rendered text. Default 3.
    pub min_len: usize,
    /// Longest rendered text; also the number of text slots. Default 8.
    pub max_len: usize,
    /// Corpus size drawn by `gen-data`. Default 1000.
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { k: 16, height: 32, width: 128, min_len: 3, max_len: 8, n: 1000 }
    }
}

/// Which forward corruption the trainer applies to the clean latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardKind {
    /// Shift-to-input marginal: the corrupted latent drifts toward the
    /// degraded input as t grows. The default.
    Residual,
    /// Classic variance-schedule corruption toward pure noise, for A/B
    /// comparison under an otherwise identical pipeline.
    DdpmLike,
}

/// Degradation curriculum over training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curriculum {
    /// Synthetic-only, then mix in real-proxy inputs, then re-degraded
    /// real-proxy inputs (boundaries at `r1` and `r2`). The default.
    Staged,
    /// The final mixture from step 0, for ablation.
    StageCOnly,
}

/// Optimization settings for pretraining and the main loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Main-loop steps. Default 3000.
    pub steps: usize,
    /// Samples per step. Default 16.
    pub batch: usize,
    /// Adam learning rate. Default 1e-3.
    pub lr: f64,
    /// First curriculum boundary (last step of the synthetic-only stage).
    /// Default 1000.
    pub r1: usize,
    /// Second curriculum boundary. Default 2000.
    pub r2: usize,
    /// Weight of the pixel reconstruction term. Default 1.0.
    pub loss_l1: f64,
    /// Weight of the feature-space reconstruction term. Default 1.0.
    pub loss_perceptual: f64,
    /// Weight of the recognizability term. Default 0.02.
    pub loss_ce: f64,
    /// Forward corruption used for training targets. Default `residual`.
    pub forward: ForwardKind,
    /// Degradation schedule. Default `staged`.
    pub curriculum: Curriculum,
    /// Checkpoint cadence in main-loop steps (the final step always saves).
    /// Default 500.
    pub checkpoint_every: usize,
    /// Steps for pretraining the recognizability head on clean renders.
    /// Default 400.
    pub pretrain_ocr_steps: usize,
    /// Steps for pretraining the text-denoising decoder. Default 1200.
    pub pretrain_tau_steps: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            r1: 1000,
            r2: 2000,
            loss_l1: 1.0,
            loss_perceptual: 1.0,
            loss_ce: 0.02,
            forward: ForwardKind::Residual,
            curriculum: Curriculum::Staged,
            checkpoint_every: 500,
            pretrain_ocr_steps: 400,
            pretrain_tau_steps: 1200,
        }
    }
}

/// Inference-time choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Take the modal symbol at each text step instead of sampling.
    /// Default false.
    pub argmax_text: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { argmax_text: false }
    }
}

/// The full run configuration. `{}` parses to the documented defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Root seed; every random stream in a run derives from it. Default 0.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
}

const TOP_KEYS: &[&str] = &["seed", "schedule", "model", "data", "trainer", "sampler"];
const SECTION_KEYS: &[(&str, &[&str])] = &[
    ("schedule", &["T", "kappa", "eta_1", "eta_T", "final_alphabar"]),
    ("model", &["base", "levels", "attn_threshold", "d", "patch", "ocr_temperature"]),
    ("data", &["K", "height", "width", "min_len", "max_len", "n"]),
    (
        "trainer",
        &[
            "steps",
            "batch",
            "lr",
            "r1",
            "r2",
            "loss_l1",
            "loss_perceptual",
            "loss_ce",
            "forward",
            "curriculum",
            "checkpoint_every",
            "pretrain_ocr_steps",
            "pretrain_tau_steps",
        ],
    ),
    ("sampler", &["argmax_text"]),
];

fn section_keys(section: &str) -> Option<&'static [&'static str]> {
    SECTION_KEYS.iter().find(|(s, _)| *s == section).map(|(_, keys)| *keys)
}

/// Collects the dotted paths of every key the schema does not know.
fn unknown_keys(doc: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    let Some(top) = doc.as_object() else {
        return bad;
    };
    for (key, val) in top {
        if !TOP_KEYS.contains(&key.as_str()) {
            bad.push(key.clone());
            continue;
        }
        let (Some(known), Some(obj)) = (section_keys(key), val.as_object()) else {
            continue;
        };
        for sub in obj.keys() {
            if !known.contains(&sub.as_str()) {
                bad.push(format!("{key}.{sub}"));
            }
        }
    }
    bad
}

impl RunConfig {
    /// Parses a raw JSON document, rejecting unknown keys (all listed at
    /// once), then type errors, then semantic violations.
    pub fn from_value(doc: &Value) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::Config("configuration root must be a JSON object".into()));
        }
        let bad = unknown_keys(doc);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown configuration keys: {}", bad.join(", "))));
        }
        let cfg: RunConfig = serde_json::from_value(doc.clone())
            .map_err(|e| Error::Config(format!("configuration does not parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses JSON text via [`Self::from_value`].
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("configuration is not valid JSON: {e}")))?;
        Self::from_value(&doc)
    }

    /// The fully resolved document, suitable for run manifests.
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Latent grid height after the codec packs pixels.
    pub fn latent_h(&self) -> usize {
        self.data.height / self.model.patch
    }

    /// Latent grid width after the codec packs pixels.
    pub fn latent_w(&self) -> usize {
        self.data.width / self.model.patch
    }

    /// Latent channels: one grayscale channel times `patch²`.
    pub fn latent_channels(&self) -> usize {
        self.model.patch * self.model.patch
    }

    /// Mixer dimensions implied by this configuration.
    pub fn mom_config(&self) -> MomConfig {
        MomConfig {
            d: self.model.d,
            k: self.data.k,
            m: self.data.max_len,
            latent_channels: self.latent_channels(),
            latent_h: self.latent_h(),
            latent_w: self.latent_w(),
        }
    }

    /// Denoiser dimensions implied by this configuration.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            base: self.model.base,
            levels: self.model.levels,
            attn_threshold: self.model.attn_threshold,
            d: self.model.d,
            k: self.data.k,
            m: self.data.max_len,
            latent_channels: self.latent_channels(),
            latent_h: self.latent_h(),
            latent_w: self.latent_w(),
        }
    }

    /// Runs every constructor the pipeline depends on and reports all
    /// violations together.
    pub fn validate(&self) -> Result<()> {
        fn check(problems: &mut Vec<String>, section: &str, r: std::result::Result<(), Error>) {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        }
        let mut problems: Vec<String> = Vec::new();

        check(
            &mut problems,
            "schedule",
            make_shift_schedule(
                self.schedule.t,
                self.schedule.eta_1,
                self.schedule.eta_t,
                self.schedule.kappa,
            )
            .map(|_| ()),
        );
        check(
            &mut problems,
            "schedule",
            make_text_schedule(self.schedule.t, self.data.k, self.schedule.final_alphabar)
                .map(|_| ()),
        );
        check(&mut problems, "data", GlyphAlphabet::new(self.data.k).map(|_| ()));
        if self.data.min_len == 0 || self.data.min_len > self.data.max_len {
            problems.push(format!(
                "data: min_len {} outside [1, max_len = {}]",
                self.data.min_len, self.data.max_len
            ));
        }
        if self.data.n == 0 {
            problems.push("data: corpus size n must be positive".into());
        }
        let geom = Geometry::new(self.data.height, self.data.width, self.data.max_len);
        match &geom {
            Err(e) => problems.push(format!("data: {e}")),
            Ok(g) => {
                check(&mut problems, "model", OcrHead::new(g, self.data.k).map(|_| ()));
            }
        }
        if self.model.patch == 0
            || self.data.height % self.model.patch.max(1) != 0
            || self.data.width % self.model.patch.max(1) != 0
        {
            problems.push(format!(
                "model: patch {} must divide the {}x{} image",
                self.model.patch, self.data.height, self.data.width
            ));
        } else {
            check(&mut problems, "model", MomLite::new(self.mom_config()).map(|_| ()));
            check(&mut problems, "model", Unet::new(self.denoiser_config()).map(|_| ()));
            check(
                &mut problems,
                "model",
                TextDecoder::new(self.model.d, self.data.k, self.data.max_len).map(|_| ()),
            );
        }
        if !(self.model.ocr_temperature.is_finite() && self.model.ocr_temperature > 0.0) {
            problems.push(format!(
                "model: ocr_temperature must be positive and finite, got {}",
                self.model.ocr_temperature
            ));
        }
        check(&mut problems, "trainer", StagePlan::new(self.trainer.r1, self.trainer.r2).map(|_| ()));
        if self.trainer.steps == 0 {
            problems.push("trainer: steps must be positive".into());
        }
        if self.trainer.batch == 0 {
            problems.push("trainer: batch must be positive".into());
        }
        if self.trainer.checkpoint_every == 0 {
            problems.push("trainer: checkpoint_every must be positive".into());
        }
        if !(self.trainer.lr.is_finite() && self.trainer.lr > 0.0) {
            problems.push(format!(
                "trainer: learning rate must be positive and finite, got {}",
                self.trainer.lr
            ));
        }
        let weights = LossWeights {
            l1: self.trainer.loss_l1,
            perceptual: self.trainer.loss_perceptual,
            ce: self.trainer.loss_ce,
        };
        check(&mut problems, "trainer", weights.validate());

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Splits a `path=value` assignment at the first `=`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    let Some(eq) = s.find('=') else {
        return Err(Error::Config(format!("override '{s}' is not of the form path=value")));
    };
    let (path, value) = (s[..eq].trim(), &s[eq + 1..]);
    if path.is_empty() {
        return Err(Error::Config(format!("override '{s}' has an empty path")));
    }
    Ok((path, value))
}

/// Sets a dotted path inside a JSON document, creating intermediate objects.
/// The value is parsed as JSON when possible and kept as a string otherwise,
/// so `trainer.lr=5e-4`, `sampler.argmax_text=true`, and
/// `trainer.forward=ddpm_like` all do the expected thing.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' has an empty segment")));
    }
    for part in &parts[..parts.len() - 1] {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override path '{path}' descends into a non-object"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .expect("checked above")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cursor.as_object_mut().ok_or_else(|| {
        Error::Config(format!("override path '{path}' descends into a non-object"))
    })?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Loads a config document from optional JSON text plus dotted overrides:
/// the document starts as the file contents (or `{}`), each override lands
/// in it, and the result goes through the strict parse.
pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: Value = match file_text {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("configuration is not valid JSON: {e}")))?,
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(Error::Config("configuration root must be a JSON object".into()));
    }
    for entry in overrides {
        let (path, raw) = parse_assignment(entry)?;
        apply_override(&mut doc, path, raw)?;
    }
    RunConfig::from_value(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let doc = cfg.to_value();
        assert_eq!(doc["schedule"]["T"], json!(18));
        assert_eq!(doc["data"]["K"], json!(16));
        assert_eq!(doc["trainer"]["forward"], json!("residual"));
        let back = RunConfig::from_value(&doc).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_yields_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_document_keeps_other_defaults() {
        let cfg =
            RunConfig::from_value(&json!({"data": {"K": 8, "width": 64, "max_len": 4}})).unwrap();
        assert_eq!(cfg.data.k, 8);
        assert_eq!(cfg.data.width, 64);
        assert_eq!(cfg.data.height, 32);
        assert_eq!(cfg.trainer.steps, 3000);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let doc = json!({
            "schedul": {"T": 10},
            "trainer": {"learning_rate": 0.1, "steps": 5},
            "model": {"depth": 3}
        });
        let err = RunConfig::from_value(&doc).unwrap_err().to_string();
        assert!(err.contains("schedul"), "{err}");
        assert!(err.contains("trainer.learning_rate"), "{err}");
        assert!(err.contains("model.depth"), "{err}");
        assert!(!err.contains("trainer.steps"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_fields_and_parse_types() {
        let cfg = resolve(
            None,
            &[
                "trainer.lr=0.5".into(),
                "schedule.T=6".into(),
                "sampler.argmax_text=true".into(),
                "trainer.forward=ddpm_like".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.lr, 0.5);
        assert_eq!(cfg.schedule.t, 6);
        assert!(cfg.sampler.argmax_text);
        assert_eq!(cfg.trainer.forward, ForwardKind::DdpmLike);
    }

    #[test]
    fn override_with_unknown_path_is_rejected() {
        let err = resolve(None, &["trainer.lrate=0.5".into()]).unwrap_err().to_string();
        assert!(err.contains("trainer.lrate"), "{err}");
        let err = resolve(None, &["broken".into()]).unwrap_err().to_string();
        assert!(err.contains("path=value"), "{err}");
    }

    #[test]
    fn semantic_validation_collects_every_problem() {
        let doc = json!({
            "schedule": {"kappa": -1.0},
            "data": {"min_len": 0},
            "trainer": {"lr": 0.0}
        });
        let err = RunConfig::from_value(&doc).unwrap_err().to_string();
        assert!(err.contains("kappa"), "{err}");
        assert!(err.contains("min_len"), "{err}");
        assert!(err.contains("learning rate"), "{err}");
    }

    #[test]
    fn file_plus_overrides_resolve_together() {
        let text = r#"{"data": {"K": 8}, "trainer": {"steps": 10}}"#;
        let cfg = resolve(Some(text), &["trainer.steps=20".into()]).unwrap();
        assert_eq!(cfg.data.k, 8);
        assert_eq!(cfg.trainer.steps, 20);
    }
}
