//! Three-phase training. Phase one fits the recognizability head on clean
//! renders; phase two fits the text-denoising decoder on corrupted one-hots
//! (co-training the conditioning mixer, whose image summary the decoder
//! reads); both are then frozen and phase three trains the latent denoiser
//! and mixer end-to-end: staged degradation sampling, matched forward
//! corruption of both chains, confidence-weighted fusion, decoding, and the
//! weighted loss, under Adam.
//!
//! Every random draw comes from a stream keyed on (seed, step, slot,
//! purpose), never from RNG state carried across steps, so a run is a pure
//! function of (config, corpus) and a resumed run continues bit-exactly:
//! the checkpoint holds the weights, the Adam moments (`adam.m.*` /
//! `adam.v.*`, frozen), and the phase/step/update counters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use autograd::{ParamNodes, ParamStore, StoreParams, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Curriculum, ForwardKind, RunConfig};
use crate::data::{sample_with_stage, stage_of, Corpus, Stage, StagePlan};
use crate::error::{Error, Result};
use crate::image::LatentTensor;
use crate::image_diffusion::forward_marginal;
use crate::metrics::{loss_total, LossWeights};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointMeta, Models, Phase, CODEC_KEY};
use crate::rng::stream;
use crate::text_diffusion::{apply_confidence, text_forward_sample};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Held-out accuracy both pretrained heads must reach before freezing.
pub const PRETRAIN_TARGET: f64 = 0.99;

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub stage: String,
    pub lr: f64,
}

/// Timestep drawn for main-loop step `r`, slot `s`: uniform over {1..T}.
pub fn draw_timestep(seed: u64, r: usize, s: usize, t_total: usize) -> usize {
    stream(seed, r as u64, s as u64, "train.t").gen_range(1..=t_total)
}

/// Owns the parameters, optimizer state, and phase bookkeeping of one run.
pub struct Trainer {
    cfg: RunConfig,
    models: Models,
    store: ParamStore,
    corpus: Corpus,
    plan: StagePlan,
    weights: LossWeights,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    phase: Phase,
    step: usize,
    adam_t: usize,
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<()> {
    if corpus.alphabet().k() != cfg.data.k {
        return Err(Error::Config(format!(
            "corpus alphabet has K = {}, configuration says {}",
            corpus.alphabet().k(),
            cfg.data.k
        )));
    }
    let want =
        crate::data::Geometry::new(cfg.data.height, cfg.data.width, cfg.data.max_len)?;
    if *corpus.geometry() != want {
        return Err(Error::Config(format!(
            "corpus geometry {:?} does not match configuration {:?}",
            corpus.geometry(),
            want
        )));
    }
    if corpus.train_indices().is_empty() {
        return Err(Error::Config("corpus has no training samples".into()));
    }
    Ok(())
}

impl Trainer {
    /// Fresh run: new parameters, phase set to the first pretraining stage.
    pub fn new(cfg: &RunConfig, corpus: Corpus) -> Result<Self> {
        check_corpus(cfg, &corpus)?;
        let (models, store) = Models::init(cfg)?;
        Self::assemble(cfg.clone(), models, store, corpus, Phase::PretrainOcr, 0, 0)
    }

    /// Continues from a checkpoint; the config rides in the checkpoint.
    pub fn resume(path: &Path, corpus: Corpus) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        Self::resume_with(store, meta, corpus)
    }

    /// Continues from already loaded checkpoint parts — the entry point for
    /// callers that patch the metadata (e.g. trainer knobs) before resuming.
    pub fn resume_with(store: ParamStore, meta: CheckpointMeta, corpus: Corpus) -> Result<Self> {
        check_corpus(&meta.config, &corpus)?;
        let models = Models::from_store(&meta.config, &store)?;
        Self::assemble(meta.config, models, store, corpus, meta.phase, meta.step, meta.adam_t)
    }

    fn assemble(
        cfg: RunConfig,
        models: Models,
        store: ParamStore,
        corpus: Corpus,
        phase: Phase,
        step: usize,
        adam_t: usize,
    ) -> Result<Self> {
        let plan = StagePlan::new(cfg.trainer.r1, cfg.trainer.r2)?;
        let weights = LossWeights {
            l1: cfg.trainer.loss_l1,
            perceptual: cfg.trainer.loss_perceptual,
            ce: cfg.trainer.loss_ce,
        };
        let train_idx = corpus.train_indices();
        let test_idx = corpus.test_indices();
        Ok(Self {
            cfg,
            models,
            store,
            corpus,
            plan,
            weights,
            train_idx,
            test_idx,
            phase,
            step,
            adam_t,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.cfg.clone(),
            phase: self.phase,
            step: self.step,
            adam_t: self.adam_t,
        }
    }

    /// Writes the current state as a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, &self.meta())
    }

    /// Stops gradient updates for every parameter under `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.store.freeze_prefix(prefix);
    }

    fn pick_sample(&self, purpose: &str, r: usize, s: usize) -> usize {
        let mut rng = stream(self.cfg.seed, r as u64, s as u64, purpose);
        self.train_idx[rng.gen_range(0..self.train_idx.len())]
    }

    fn pair_seed(&self, phase_tag: u64, s: usize) -> u64 {
        stream(self.cfg.seed, phase_tag, s as u64, "pair.seed").gen::<u64>()
    }

    fn latent_noise(&self, purpose: &str, r: usize, s: usize) -> Result<LatentTensor> {
        let shape =
            [self.cfg.latent_channels(), self.cfg.latent_h(), self.cfg.latent_w()];
        let mut rng = stream(self.cfg.seed, r as u64, s as u64, purpose);
        LatentTensor::new(Tensor::randn(&shape, &mut rng))
    }

    fn text_draws(&self, purpose: &str, r: usize, s: usize) -> Vec<f64> {
        let mut rng = stream(self.cfg.seed, r as u64, s as u64, purpose);
        (0..self.cfg.data.max_len).map(|_| rng.gen::<f64>()).collect()
    }

    /// Corrupts the clean latent to level `t` under the configured forward:
    /// the shift-to-input marginal by default, or the classic
    /// `√ᾱ_t·z0 + √(1−ᾱ_t)·ε` line (reusing the text chain's rescaled
    /// cosine ᾱ) behind the ablation flag.
    fn corrupt_image(
        &self,
        z0: &LatentTensor,
        e0: &LatentTensor,
        t: usize,
        eps: &LatentTensor,
    ) -> Result<LatentTensor> {
        match self.cfg.trainer.forward {
            ForwardKind::Residual => forward_marginal(z0, e0, t, &self.models.shift, eps),
            ForwardKind::DdpmLike => {
                let abar = self.models.text.alphabar(t);
                let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
                LatentTensor::new(z0.tensor().zip_map(eps.tensor(), |z, e| a * z + b * e)?)
            }
        }
    }

    fn latent_sub(a: &LatentTensor, b: &LatentTensor) -> Result<LatentTensor> {
        LatentTensor::new(a.tensor().zip_map(b.tensor(), |x, y| x - y)?)
    }

    fn check_finite(&self, loss: f64, r: usize, s: usize, idx: usize, t: usize) -> Result<()> {
        if loss.is_finite() {
            return Ok(());
        }
        Err(Error::Diverged(format!(
            "{:?} step {r}, slot {s}, sample {idx}, t={t}: loss = {loss}; \
             lr={}, adam updates so far={}",
            self.phase, self.cfg.trainer.lr, self.adam_t
        )))
    }

    fn accumulate(
        acc: &mut BTreeMap<String, Tensor>,
        grads: BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(prev) => prev.axpy(1.0, &g)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
        Ok(())
    }

    /// One Adam update from batch-mean gradients (β1 0.9, β2 0.999, ε 1e-8),
    /// trainable parameters only; moments live in the store under `adam.*`.
    fn adam_update(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.adam_t += 1;
        let t = self.adam_t as f64;
        let c1 = 1.0 - BETA1.powf(t);
        let c2 = 1.0 - BETA2.powf(t);
        let lr = self.cfg.trainer.lr;
        for (name, g) in grads {
            let m_key = format!("adam.m.{name}");
            let v_key = format!("adam.v.{name}");
            if !self.store.contains(&m_key) {
                self.store.insert(&m_key, Tensor::zeros(g.shape()), false)?;
                self.store.insert(&v_key, Tensor::zeros(g.shape()), false)?;
            }
            let m = self.store.get(&m_key)?.value.zip_map(g, |m, gi| {
                BETA1 * m + (1.0 - BETA1) * gi
            })?;
            let v = self.store.get(&v_key)?.value.zip_map(g, |v, gi| {
                BETA2 * v + (1.0 - BETA2) * gi * gi
            })?;
            let theta = &self.store.get(name)?.value;
            let mut out = Vec::with_capacity(theta.numel());
            for ((&p, &mi), &vi) in theta.data().iter().zip(m.data()).zip(v.data()) {
                out.push(p - lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS));
            }
            let updated = Tensor::new(theta.shape().to_vec(), out)?;
            self.store.set_value(name, updated)?;
            self.store.set_value(&m_key, m)?;
            self.store.set_value(&v_key, v)?;
        }
        Ok(())
    }

    /// One batch of recognizability-head pretraining: cross-entropy on
    /// clean renders against the true character rows.
    pub fn pretrain_ocr_step(&mut self, r: usize) -> Result<StepRecord> {
        self.phase = Phase::PretrainOcr;
        let mut acc = BTreeMap::new();
        let mut loss_sum = 0.0;
        for s in 0..self.cfg.trainer.batch {
            let idx = self.pick_sample("ocr.pick", r, s);
            let x0 = self.corpus.hr_image(idx)?;
            let c0 = self.corpus.c0(idx)?;
            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let img = tape.constant(x0.tensor().clone());
            let logits = self.models.ocr_head.logits(&mut tape, &mut params, img)?;
            let targets = tape.constant(c0.probs().clone());
            let loss = crate::nn::cross_entropy_rows(&mut tape, logits, targets)?;
            let lv = tape.value(loss).data()[0];
            self.check_finite(lv, r, s, idx, 0)?;
            loss_sum += lv;
            tape.backward(loss)?;
            Self::accumulate(&mut acc, params.gradients(&tape)?)?;
        }
        self.finish_step(r, loss_sum, acc, "pretrain_ocr")
    }

    /// One batch of text-decoder pretraining: corrupt the true text to a
    /// random level, condition on the mixer's image summary (mixer weights
    /// co-train), and score the decoder's logits against the clean text.
    pub fn pretrain_tau_step(&mut self, r: usize) -> Result<StepRecord> {
        self.phase = Phase::PretrainTau;
        let t_total = self.models.shift.t_total();
        let mut acc = BTreeMap::new();
        let mut loss_sum = 0.0;
        for s in 0..self.cfg.trainer.batch {
            let idx = self.pick_sample("tau.pick", r, s);
            let x0 = self.corpus.hr_image(idx)?;
            let y_real = self.corpus.y_real(idx)?;
            let c0 = self.corpus.c0(idx)?;
            // The decoder is frozen after this phase and must serve every
            // later curriculum stage, so it pretrains on the full mixture.
            let pair =
                sample_with_stage(&x0, &y_real, &c0, r, Stage::C, self.pair_seed(2, s))?;
            let t = stream(self.cfg.seed, r as u64, s as u64, "tau.t").gen_range(1..=t_total);
            let ocr = self.models.template_ocr.recognize(&pair.lr)?;
            let z0 = self.models.codec.encode(&pair.x0)?;
            let z_y = self.models.codec.encode(&pair.lr)?;
            let e0 = Self::latent_sub(&z_y, &z0)?;
            let eps = self.latent_noise("tau.eps", r, s)?;
            let z_t = self.corrupt_image(&z0, &e0, t, &eps)?;
            let draws = self.text_draws("tau.ctext", r, s);
            let c_t = text_forward_sample(&pair.c0, t, &self.models.text, &draws)?;
            let feat = apply_confidence(&c_t.clone().with_conf(ocr.conf)?);

            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let z_y_node = tape.constant(z_y.tensor().clone());
            let z_t_node = tape.constant(z_t.tensor().clone());
            let feat_node = tape.constant(feat);
            let bundle =
                self.models.mom.forward(&mut tape, &mut params, z_y_node, z_t_node, feat_node, t)?;
            let probs = tape.constant(c_t.probs().clone());
            let logits =
                self.models.tau.logits(&mut tape, &mut params, probs, bundle.i_cond, t)?;
            let targets = tape.constant(pair.c0.probs().clone());
            let loss = crate::nn::cross_entropy_rows(&mut tape, logits, targets)?;
            let lv = tape.value(loss).data()[0];
            self.check_finite(lv, r, s, idx, t)?;
            loss_sum += lv;
            tape.backward(loss)?;
            Self::accumulate(&mut acc, params.gradients(&tape)?)?;
        }
        self.finish_step(r, loss_sum, acc, "pretrain_tau")
    }

    /// One main-loop batch: staged pair, twin forward corruption,
    /// confidence-weighted fusion, denoise, decode, weighted loss, Adam.
    pub fn main_step(&mut self, r: usize) -> Result<StepRecord> {
        self.phase = Phase::Train;
        let t_total = self.models.shift.t_total();
        let stage = match self.cfg.trainer.curriculum {
            Curriculum::Staged => stage_of(r, &self.plan),
            Curriculum::StageCOnly => Stage::C,
        };
        let stage_name = match stage {
            Stage::A => "A",
            Stage::B => "B",
            Stage::C => "C",
        };
        let mut acc = BTreeMap::new();
        let mut loss_sum = 0.0;
        for s in 0..self.cfg.trainer.batch {
            let idx = self.pick_sample("train.pick", r, s);
            let x0 = self.corpus.hr_image(idx)?;
            let y_real = self.corpus.y_real(idx)?;
            let c0 = self.corpus.c0(idx)?;
            let pair = sample_with_stage(&x0, &y_real, &c0, r, stage, self.pair_seed(3, s))?;
            let t = draw_timestep(self.cfg.seed, r, s, t_total);
            let ocr = self.models.template_ocr.recognize(&pair.lr)?;
            let z0 = self.models.codec.encode(&pair.x0)?;
            let z_y = self.models.codec.encode(&pair.lr)?;
            let e0 = Self::latent_sub(&z_y, &z0)?;
            let eps = self.latent_noise("train.eps", r, s)?;
            let z_t = self.corrupt_image(&z0, &e0, t, &eps)?;
            let draws = self.text_draws("train.ctext", r, s);
            let c_t = text_forward_sample(&pair.c0, t, &self.models.text, &draws)?;
            let feat = apply_confidence(&c_t.clone().with_conf(ocr.conf)?);

            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let z_y_node = tape.constant(z_y.tensor().clone());
            let z_t_node = tape.constant(z_t.tensor().clone());
            let feat_node = tape.constant(feat);
            let bundle =
                self.models.mom.forward(&mut tape, &mut params, z_y_node, z_t_node, feat_node, t)?;
            let z0_hat = self.models.unet.forward(
                &mut tape,
                &mut params,
                z_t_node,
                z_y_node,
                t,
                bundle.c_cond,
            )?;
            let m_node = params.node(&mut tape, CODEC_KEY)?;
            let x0_hat = self.models.codec.decode_node(&mut tape, m_node, z0_hat)?;
            let ocr_logits = self.models.ocr_head.logits(&mut tape, &mut params, x0_hat)?;
            let x0_node = tape.constant(pair.x0.tensor().clone());
            let loss = loss_total(
                &mut tape,
                &mut params,
                x0_node,
                x0_hat,
                &pair.c0,
                ocr_logits,
                &self.weights,
            )?;
            let lv = tape.value(loss).data()[0];
            self.check_finite(lv, r, s, idx, t)?;
            loss_sum += lv;
            tape.backward(loss)?;
            Self::accumulate(&mut acc, params.gradients(&tape)?)?;
        }
        self.finish_step(r, loss_sum, acc, stage_name)
    }

    fn finish_step(
        &mut self,
        r: usize,
        loss_sum: f64,
        mut acc: BTreeMap<String, Tensor>,
        stage: &str,
    ) -> Result<StepRecord> {
        let batch = self.cfg.trainer.batch as f64;
        for g in acc.values_mut() {
            *g = g.map(|v| v / batch);
        }
        self.adam_update(&acc)?;
        self.step = r + 1;
        Ok(StepRecord {
            step: r,
            loss: loss_sum / batch,
            stage: stage.to_string(),
            lr: self.cfg.trainer.lr,
        })
    }

    /// Per-cell accuracy of the recognizability head on clean renders.
    pub fn eval_ocr_accuracy(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for &i in indices {
            let x0 = self.corpus.hr_image(i)?;
            let c0 = self.corpus.c0(i)?;
            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let img = tape.constant(x0.tensor().clone());
            let logits = self.models.ocr_head.logits(&mut tape, &mut params, img)?;
            let lt = tape.value(logits);
            let k = self.cfg.data.k;
            let truth = c0.argmax();
            for (row, &want) in truth.iter().enumerate() {
                let cells = &lt.data()[row * k..(row + 1) * k];
                let got = cells
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(j, _)| j)
                    .expect("non-empty row");
                hit += usize::from(got == want);
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }

    /// Per-cell accuracy of the text decoder fed clean one-hots at t = 1
    /// (the identity regime): its argmax must reproduce the input text.
    pub fn eval_tau_identity(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for &i in indices {
            let x0 = self.corpus.hr_image(i)?;
            let y_real = self.corpus.y_real(i)?;
            let c0 = self.corpus.c0(i)?;
            let ocr = self.models.template_ocr.recognize(&y_real)?;
            let z0 = self.models.codec.encode(&x0)?;
            let z_y = self.models.codec.encode(&y_real)?;
            let e0 = Self::latent_sub(&z_y, &z0)?;
            let mut rng = stream(self.cfg.seed, 0, i as u64, "tau.eval");
            let eps = LatentTensor::new(Tensor::randn(z0.tensor().shape(), &mut rng))?;
            let z_1 = self.corrupt_image(&z0, &e0, 1, &eps)?;
            let feat = apply_confidence(&c0.clone().with_conf(ocr.conf)?);

            let mut tape = Tape::new();
            let mut params = StoreParams::new(&self.store);
            let z_y_node = tape.constant(z_y.tensor().clone());
            let z_t_node = tape.constant(z_1.tensor().clone());
            let feat_node = tape.constant(feat);
            let bundle =
                self.models.mom.forward(&mut tape, &mut params, z_y_node, z_t_node, feat_node, 1)?;
            let i_cond = tape.value(bundle.i_cond).clone();
            let pred = self.models.tau.decode(&self.store, &c0, &i_cond, 1)?;
            for (got, want) in pred.argmax().iter().zip(c0.argmax()) {
                hit += usize::from(*got == want);
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }

    fn open_log(out_dir: &Path) -> Result<fs::File> {
        fs::create_dir_all(out_dir)?;
        Ok(fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("train_log.jsonl"))?)
    }

    fn log_record(log: &mut impl std::io::Write, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("log record does not serialize: {e}")))?;
        writeln!(log, "{line}")?;
        Ok(())
    }

    /// Runs (the rest of) the recognizability-head phase, freezes the head,
    /// checks the held-out accuracy bar, and saves `ckpt_pretrain_ocr.bin`.
    pub fn run_pretrain_ocr(
        &mut self,
        out_dir: &Path,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        if self.phase != Phase::PretrainOcr {
            return Err(Error::Config(format!(
                "recognizer pretraining is already complete (checkpoint is at {:?})",
                self.phase
            )));
        }
        let mut log = std::io::BufWriter::new(Self::open_log(out_dir)?);
        while self.step < self.cfg.trainer.pretrain_ocr_steps {
            let rec = self.pretrain_ocr_step(self.step)?;
            Self::log_record(&mut log, &rec)?;
            on_step(&rec);
        }
        log.flush()?;
        self.store.freeze_prefix("ocr.");
        let acc = self.eval_ocr_accuracy(&self.test_idx)?;
        let path = out_dir.join("ckpt_pretrain_ocr.bin");
        if acc < PRETRAIN_TARGET {
            self.save(&path)?;
            return Err(Error::NotConverged(format!(
                "clean-render recognizer reached {acc:.4} held-out accuracy \
                 (target {PRETRAIN_TARGET}) after {} steps",
                self.cfg.trainer.pretrain_ocr_steps
            )));
        }
        self.phase = Phase::PretrainTau;
        self.step = 0;
        self.save(&path)?;
        Ok(path)
    }

    /// Runs (the rest of) the text-decoder phase, freezes the decoder,
    /// checks the identity bar, and saves `ckpt_pretrain_tau.bin`.
    pub fn run_pretrain_tau(
        &mut self,
        out_dir: &Path,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        if self.phase != Phase::PretrainTau {
            return Err(Error::Config(format!(
                "text-decoder pretraining needs a completed recognizer phase \
                 (checkpoint is at {:?})",
                self.phase
            )));
        }
        let mut log = std::io::BufWriter::new(Self::open_log(out_dir)?);
        while self.step < self.cfg.trainer.pretrain_tau_steps {
            let rec = self.pretrain_tau_step(self.step)?;
            Self::log_record(&mut log, &rec)?;
            on_step(&rec);
        }
        log.flush()?;
        self.store.freeze_prefix("tau.");
        let acc = self.eval_tau_identity(&self.test_idx)?;
        let path = out_dir.join("ckpt_pretrain_tau.bin");
        if acc < PRETRAIN_TARGET {
            self.save(&path)?;
            return Err(Error::NotConverged(format!(
                "text decoder reached {acc:.4} identity accuracy \
                 (target {PRETRAIN_TARGET}) after {} steps",
                self.cfg.trainer.pretrain_tau_steps
            )));
        }
        self.phase = Phase::Train;
        self.step = 0;
        self.save(&path)?;
        Ok(path)
    }

    /// Runs (the rest of) the main loop with periodic checkpoints and a
    /// final `ckpt_final.bin`.
    pub fn run_train(
        &mut self,
        out_dir: &Path,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        if self.phase != Phase::Train {
            return Err(Error::Config(format!(
                "main training needs both pretraining phases complete \
                 (checkpoint is at {:?})",
                self.phase
            )));
        }
        let mut log = std::io::BufWriter::new(Self::open_log(out_dir)?);
        let total = self.cfg.trainer.steps;
        while self.step < total {
            let rec = self.main_step(self.step)?;
            Self::log_record(&mut log, &rec)?;
            on_step(&rec);
            if self.step % self.cfg.trainer.checkpoint_every == 0 && self.step < total {
                self.save(&out_dir.join(format!("ckpt_step_{:05}.bin", self.step)))?;
            }
        }
        log.flush()?;
        let path = out_dir.join("ckpt_final.bin");
        self.save(&path)?;
        Ok(path)
    }

    /// Runs every remaining phase in order and returns the final checkpoint.
    pub fn run(
        &mut self,
        out_dir: &Path,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<PathBuf> {
        if self.phase == Phase::PretrainOcr {
            self.run_pretrain_ocr(out_dir, &mut on_step)?;
        }
        if self.phase == Phase::PretrainTau {
            self.run_pretrain_tau(out_dir, &mut on_step)?;
        }
        self.run_train(out_dir, on_step)
    }
}
