//! Joint reverse-time inference: starting from the degraded input, the image
//! chain and the text chain are iterated backwards together, each step fusing
//! the current text state (weighted by the input-derived confidence) into the
//! image denoiser and refreshing the text state from the fused image features.
//! Produces the restored image, the recovered symbol sequence, and an optional
//! per-step trace; [`infer_batch`] evaluates a whole manifest split to PGM
//! files plus a metrics JSON.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::json;

use autograd::{ParamStore, StoreParams, Tape, Tensor};

use crate::config::RunConfig;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::image::{write_pgm, ImageTensor, LatentTensor};
use crate::image_diffusion::{init_inference, reverse_step};
use crate::metrics::{psnr, text_metrics};
use crate::models::{load_checkpoint, CheckpointMeta, Models, Phase};
use crate::ocr::OcrResult;
use crate::rng::stream;
use crate::text_diffusion::{
    apply_confidence, text_argmax, text_final_sample, text_posterior, CharState,
};

/// Where the text prior that seeds and conditions a run comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorMode {
    /// Run the template recognizer on the degraded input (the normal path).
    FromOcr,
    /// Inject an external prediction and confidence vector, both of length
    /// `max_len`. Used for controlled experiments: wrong symbols probe
    /// robustness, `conf` of all zeros silences the prior, all ones trusts
    /// it unconditionally.
    Forced { pred: Vec<usize>, conf: Vec<f64> },
}

/// How much to record per reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Off,
    /// Scalar statistics and the text readout at every step.
    Stats,
    /// Statistics plus the decoded image of every intermediate latent.
    WithImages,
}

/// One per-step trace record, captured on entry to the step for level `t`.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    /// Diffusion level about to be reversed (runs T down to 1).
    pub t: usize,
    /// Euclidean norm of the current latent.
    pub z_norm: f64,
    /// Modal symbol per cell of the current text state, as display characters.
    pub text: String,
    /// Mean per-cell confidence carried by the current text state.
    pub mean_conf: f64,
    /// Decoded current latent (only under [`TraceMode::WithImages`]).
    #[serde(skip)]
    pub decoded: Option<ImageTensor>,
}

/// The result of one restoration run.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Restored image, clipped to [0, 1].
    pub image: ImageTensor,
    /// Final symbol index per cell (length `max_len`, blank-padded).
    pub text: Vec<usize>,
    /// Final per-cell confidence.
    pub conf: Vec<f64>,
    /// Exactly T records when tracing was requested.
    pub trace: Option<Vec<TraceRecord>>,
}

/// Drops trailing blank cells; interior blanks stay (and count as errors in
/// sequence metrics).
pub fn trim_trailing_blanks(text: &[usize], blank: usize) -> Vec<usize> {
    let end = text.iter().rposition(|&c| c != blank).map_or(0, |p| p + 1);
    text[..end].to_vec()
}

fn l2_norm(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A loaded model ready to restore images. Holds the parameter store and the
/// wiring rebuilt from the configuration that rides in the checkpoint.
pub struct Sampler {
    cfg: RunConfig,
    models: Models,
    store: ParamStore,
}

impl Sampler {
    /// Wraps a parameter store and its metadata. Rejects checkpoints still in
    /// a pretraining phase: they have no trained denoiser to sample from.
    pub fn new(store: ParamStore, meta: &CheckpointMeta) -> Result<Self> {
        if meta.phase != Phase::Train {
            return Err(Error::Config(format!(
                "checkpoint is from the {:?} phase; inference needs one saved during or after \
                 main training",
                meta.phase
            )));
        }
        let models = Models::from_store(&meta.config, &store)?;
        Ok(Self { cfg: meta.config.clone(), models, store })
    }

    /// Loads a checkpoint file and wraps it.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        Self::new(store, &meta)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    /// Replaces per-step categorical text sampling with the modal symbol.
    pub fn set_argmax_text(&mut self, on: bool) {
        self.cfg.sampler.argmax_text = on;
    }

    /// Restores one image with the normal input-derived text prior.
    pub fn infer(&self, y: &ImageTensor, seed: u64, trace: TraceMode) -> Result<Inference> {
        self.infer_with_prior(y, &PriorMode::FromOcr, seed, trace)
    }

    /// Restores one image. `y` must match the trained geometry (single
    /// channel, configured height and width); `seed` drives every random
    /// draw of the run, so equal seeds give bit-identical results.
    pub fn infer_with_prior(
        &self,
        y: &ImageTensor,
        prior: &PriorMode,
        seed: u64,
        trace: TraceMode,
    ) -> Result<Inference> {
        let (h, w) = (self.cfg.data.height, self.cfg.data.width);
        if y.c() != 1 || y.h() != h || y.w() != w {
            return Err(Error::ShapeMismatch(format!(
                "input must be [1, {h}, {w}], got [{}, {}, {}]",
                y.c(),
                y.h(),
                y.w()
            )));
        }
        let t_total = self.models.shift.t_total();
        let m = self.cfg.data.max_len;

        // The text prior is read from the input once; its confidence vector
        // weights the fused conditioning at every step below.
        let ocr = self.resolve_prior(y, prior)?;
        let prior_conf = ocr.conf.clone();
        let mut c = CharState::one_hot(&ocr.pred, self.cfg.data.k, m)?.with_conf(ocr.conf)?;

        let z_y = self.models.codec.encode(y)?;
        let mut z = init_inference(&z_y, &self.models.shift, &self.latent_noise(seed, 0)?)?;

        let mut records = match trace {
            TraceMode::Off => None,
            _ => Some(Vec::with_capacity(t_total)),
        };

        for t in (1..=t_total).rev() {
            if let Some(records) = records.as_mut() {
                let decoded = match trace {
                    TraceMode::WithImages => Some(clip01(self.models.codec.decode(&z)?)),
                    _ => None,
                };
                records.push(TraceRecord {
                    t,
                    z_norm: l2_norm(z.data()),
                    text: self.models.alphabet.display(&c.argmax()),
                    mean_conf: c.conf().iter().sum::<f64>() / m as f64,
                    decoded,
                });
            }

            // Fuse the current text state, weighted by the fixed input-derived
            // confidence, with both latents; predict the clean latent.
            let feat = apply_confidence(&c.clone().with_conf(prior_conf.clone())?);
            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let z_y_node = tape.constant(z_y.tensor().clone());
            let z_t_node = tape.constant(z.tensor().clone());
            let feat_node = tape.constant(feat);
            let bundle =
                self.models.mom.forward(&mut tape, &mut params, z_y_node, z_t_node, feat_node, t)?;
            let z0_node = self.models.unet.forward(
                &mut tape,
                &mut params,
                z_t_node,
                z_y_node,
                t,
                bundle.c_cond,
            )?;
            let z0_hat = LatentTensor::new(tape.value(z0_node).clone())?;
            let i_cond = tape.value(bundle.i_cond).clone();
            drop(tape);

            // Image chain: posterior step towards the prediction (exact at
            // t = 1, where the noise coefficient vanishes).
            let eps = self.latent_noise(seed, t)?;
            z = reverse_step(&z, &z0_hat, t, &self.models.shift, &eps)?;

            // Text chain: re-read the characters from the fused image
            // features, then step the state. Above the final level the next
            // state is drawn from the posterior around that prediction; at
            // the final level it collapses to the prediction itself.
            let c_pred = self.models.tau.decode(&self.store, &c, &i_cond, t)?;
            let next = if t > 1 {
                text_posterior(&c, &c_pred, t, &self.models.text)?
            } else {
                c_pred
            };
            c = if self.cfg.sampler.argmax_text {
                text_argmax(&next)
            } else {
                text_final_sample(&next, &self.text_draws(seed, t))?
            };
        }

        Ok(Inference {
            image: clip01(self.models.codec.decode(&z)?),
            text: c.argmax(),
            conf: c.conf().to_vec(),
            trace: records,
        })
    }

    fn resolve_prior(&self, y: &ImageTensor, prior: &PriorMode) -> Result<OcrResult> {
        match prior {
            PriorMode::FromOcr => self.models.template_ocr.recognize(y),
            PriorMode::Forced { pred, conf } => {
                let m = self.cfg.data.max_len;
                if pred.len() != m || conf.len() != m {
                    return Err(Error::InvalidArgument(format!(
                        "forced prior wants {m} cells, got {} symbols and {} confidences",
                        pred.len(),
                        conf.len()
                    )));
                }
                if let Some(&bad) = pred.iter().find(|&&s| s >= self.cfg.data.k) {
                    return Err(Error::InvalidArgument(format!(
                        "forced prior symbol {bad} outside alphabet of {}",
                        self.cfg.data.k
                    )));
                }
                if let Some(&bad) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
                    return Err(Error::InvalidArgument(format!(
                        "forced prior confidence {bad} outside [0, 1]"
                    )));
                }
                Ok(OcrResult { pred: pred.clone(), conf: conf.clone() })
            }
        }
    }

    /// Standard-normal latent for step `t` (slot 0 is the start latent).
    fn latent_noise(&self, seed: u64, t: usize) -> Result<LatentTensor> {
        let shape = [self.cfg.latent_channels(), self.cfg.latent_h(), self.cfg.latent_w()];
        let purpose = if t == 0 { "infer.init" } else { "infer.z" };
        LatentTensor::new(Tensor::randn(&shape, &mut stream(seed, t as u64, 0, purpose)))
    }

    fn text_draws(&self, seed: u64, t: usize) -> Vec<f64> {
        let mut rng = stream(seed, t as u64, 0, "infer.text");
        (0..self.cfg.data.max_len).map(|_| rng.gen::<f64>()).collect()
    }
}

fn clip01(img: ImageTensor) -> ImageTensor {
    ImageTensor::new(img.tensor().map(|v| v.clamp(0.0, 1.0))).expect("clipped image is finite")
}

fn split_name(split: Option<Split>) -> &'static str {
    match split {
        None => "all",
        Some(Split::Train) => "train",
        Some(Split::Test) => "test",
    }
}

/// Restores every manifest sample in the chosen split (or all of them),
/// writing one `out_{index:05}.pgm` per sample plus a `metrics.json` into
/// `out_dir`, and returns the metrics document. Per-sample seeds derive from
/// `seed` and the sample index, so results are reproducible and independent
/// of split selection. Reported image quality is measured on the 8-bit form
/// that survives the PGM files, so it can be recomputed from them exactly.
pub fn infer_batch(
    manifest: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    seed: u64,
    split: Option<Split>,
    argmax_text: Option<bool>,
) -> Result<serde_json::Value> {
    let corpus = Corpus::load_manifest(manifest)?;
    let mut sampler = Sampler::from_checkpoint(checkpoint)?;
    if let Some(on) = argmax_text {
        sampler.set_argmax_text(on);
    }
    let cfg = sampler.config();
    let geom = corpus.geometry();
    if corpus.alphabet().k() != cfg.data.k
        || geom.height != cfg.data.height
        || geom.width != cfg.data.width
        || geom.max_len != cfg.data.max_len
    {
        return Err(Error::Config(format!(
            "manifest geometry (K={}, {}x{}, max_len {}) does not match the checkpoint \
             (K={}, {}x{}, max_len {})",
            corpus.alphabet().k(),
            geom.height,
            geom.width,
            geom.max_len,
            cfg.data.k,
            cfg.data.height,
            cfg.data.width,
            cfg.data.max_len
        )));
    }
    let indices: Vec<usize> = match split {
        None => (0..corpus.len()).collect(),
        Some(Split::Train) => corpus.train_indices(),
        Some(Split::Test) => corpus.test_indices(),
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest has no samples in the '{}' selection",
            split_name(split)
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let blank = corpus.alphabet().blank();
    let started = Instant::now();
    let mut per_image = Vec::with_capacity(indices.len());
    let mut preds = Vec::with_capacity(indices.len());
    let mut truths = Vec::with_capacity(indices.len());
    let (mut psnr_sum, mut input_psnr_sum, mut seconds_sum, mut seconds_max) =
        (0.0, 0.0, 0.0, 0.0f64);
    for &i in &indices {
        let y = corpus.y_real(i)?;
        let hr = corpus.hr_image(i)?;
        let run_seed = stream(seed, i as u64, 0, "infer.run").gen::<u64>();
        let clock = Instant::now();
        let out = sampler.infer(&y, run_seed, TraceMode::Off)?;
        let seconds = clock.elapsed().as_secs_f64();
        let name = format!("out_{i:05}.pgm");
        write_pgm(&out_dir.join(&name), &out.image)?;
        let saved = out.image.round_trip_8bit();
        let quality = psnr(saved.tensor(), hr.tensor(), 1.0)?;
        let input_quality = psnr(y.tensor(), hr.tensor(), 1.0)?;
        let pred = trim_trailing_blanks(&out.text, blank);
        per_image.push(json!({
            "index": i,
            "output": name,
            "psnr": quality,
            "input_psnr": input_quality,
            "seconds": seconds,
            "text": corpus.alphabet().display(&pred),
        }));
        preds.push(pred);
        truths.push(corpus.sample(i).text.clone());
        psnr_sum += quality;
        input_psnr_sum += input_quality;
        seconds_sum += seconds;
        seconds_max = seconds_max.max(seconds);
    }
    let seconds_total = started.elapsed().as_secs_f64();
    let text = text_metrics(&preds, &truths)?;
    let n = indices.len() as f64;
    let metrics = json!({
        "n": indices.len(),
        "split": split_name(split),
        "seed": seed,
        "argmax_text": sampler.config().sampler.argmax_text,
        "psnr_mean": psnr_sum / n,
        "input_psnr_mean": input_psnr_sum / n,
        "acc": text.acc,
        "ned": text.ned,
        "seconds_total": seconds_total,
        "seconds_mean": seconds_sum / n,
        "seconds_max": seconds_max,
        "per_image": per_image,
    });
    std::fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    Ok(metrics)
}
