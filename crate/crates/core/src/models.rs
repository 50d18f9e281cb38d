//! The assembled pipeline: codec, template recognizer, conditioning mixer,
//! latent denoiser, text decoder, and recognizability head, all sized from
//! one [`RunConfig`], plus a single-file binary checkpoint format.
//!
//! Everything with learned state lives in a [`ParamStore`]; the pieces here
//! are shape/wiring descriptions that are cheap to rebuild. The codec's
//! mixing matrix is seeded at init and stored in the store under `codec.m`
//! (frozen), so a checkpoint is self-contained: the matrix travels with the
//! weights rather than depending on the seed used at inference time.
//!
//! Checkpoint layout: an 8-byte magic, a little-endian u64 header length, a
//! JSON header (`meta` plus the ordered parameter table of name, shape,
//! trainable), then every tensor's values as little-endian f64 in table
//! order. Loading verifies magic, lengths, and finiteness of the header
//! fields it needs, and a reload is bit-identical to what was saved.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use autograd::{ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::config::RunConfig;
use crate::data::{Geometry, GlyphAlphabet};
use crate::denoiser::{TextDecoder, Unet};
use crate::error::{Error, Result};
use crate::fusion::MomLite;
use crate::metrics::init_perceptual;
use crate::ocr::{OcrHead, TemplateOcr};
use crate::rng::stream;
use crate::schedules::{make_shift_schedule, make_text_schedule, ShiftSchedule, TextSchedule};

/// Store key of the codec's frozen mixing matrix.
pub const CODEC_KEY: &str = "codec.m";

const MAGIC: &[u8; 8] = b"GSCKPT1\n";

/// Every component the trainer and sampler need, derived from one config.
pub struct Models {
    pub geom: Geometry,
    pub alphabet: GlyphAlphabet,
    pub shift: ShiftSchedule,
    pub text: TextSchedule,
    pub codec: LatentCodec,
    pub template_ocr: TemplateOcr,
    pub mom: MomLite,
    pub unet: Unet,
    pub tau: TextDecoder,
    pub ocr_head: OcrHead,
}

impl Models {
    /// Fresh parameters for every component, seeded from `cfg.seed` with a
    /// distinct stream per component so adding one never shifts another.
    pub fn init(cfg: &RunConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let codec_seed = stream(cfg.seed, 0, 0, "codec").gen::<u64>();
        let codec = LatentCodec::new(1, cfg.model.patch, codec_seed)?;
        store.insert(CODEC_KEY, codec.matrix().clone(), false)?;

        let mom = MomLite::new(cfg.mom_config())?;
        mom.init_params(&mut store, &mut stream(cfg.seed, 0, 0, "init.mom"))?;
        let unet = Unet::new(cfg.denoiser_config())?;
        unet.init_params(&mut store, &mut stream(cfg.seed, 0, 0, "init.unet"))?;
        let tau = TextDecoder::new(cfg.model.d, cfg.data.k, cfg.data.max_len)?;
        tau.init_params(&mut store, &mut stream(cfg.seed, 0, 0, "init.tau"))?;
        let geom = Geometry::new(cfg.data.height, cfg.data.width, cfg.data.max_len)?;
        let ocr_head = OcrHead::new(&geom, cfg.data.k)?;
        ocr_head.init_params(&mut store, &mut stream(cfg.seed, 0, 0, "init.ocr"))?;
        init_perceptual(&mut store, cfg.seed)?;

        let models = Self::from_store(cfg, &store)?;
        Ok((models, store))
    }

    /// Rebuilds the wiring around an existing parameter store (typically one
    /// loaded from a checkpoint). The codec matrix comes from the store.
    pub fn from_store(cfg: &RunConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let geom = Geometry::new(cfg.data.height, cfg.data.width, cfg.data.max_len)?;
        let alphabet = GlyphAlphabet::new(cfg.data.k)?;
        let shift = make_shift_schedule(
            cfg.schedule.t,
            cfg.schedule.eta_1,
            cfg.schedule.eta_t,
            cfg.schedule.kappa,
        )?;
        let text = make_text_schedule(cfg.schedule.t, cfg.data.k, cfg.schedule.final_alphabar)?;
        let matrix = store
            .get(CODEC_KEY)
            .map_err(|_| {
                Error::Config(format!("parameter store has no codec matrix '{CODEC_KEY}'"))
            })?
            .value
            .clone();
        let codec = LatentCodec::from_matrix(1, cfg.model.patch, matrix)?;
        let template_ocr = TemplateOcr::new(&alphabet, &geom, cfg.model.ocr_temperature)?;
        let mom = MomLite::new(cfg.mom_config())?;
        let unet = Unet::new(cfg.denoiser_config())?;
        let tau = TextDecoder::new(cfg.model.d, cfg.data.k, cfg.data.max_len)?;
        let ocr_head = OcrHead::new(&geom, cfg.data.k)?;
        Ok(Self {
            geom,
            alphabet,
            shift,
            text,
            codec,
            template_ocr,
            mom,
            unet,
            tau,
            ocr_head,
        })
    }
}

/// Training phase recorded in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainOcr,
    PretrainTau,
    Train,
}

/// Bookkeeping stored alongside the weights. The resolved config rides in
/// the checkpoint so inference needs no separate config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub phase: Phase,
    /// Steps completed within `phase`.
    pub step: usize,
    /// Optimizer updates applied so far (drives bias correction on resume).
    pub adam_t: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

/// Writes the store and metadata to one binary file.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let params: Vec<ParamEntry> = store
        .iter()
        .map(|(name, p)| ParamEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta: meta.clone(), params })
        .map_err(|e| Error::Format(format!("checkpoint header does not serialize: {e}")))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, p) in store.iter() {
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a store plus its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    len_bytes.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let body = MAGIC.len() + 8;
    if bytes.len() < body + header_len {
        return Err(Error::Format(format!("{} is truncated in the header", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[body..body + header_len])
        .map_err(|e| Error::Format(format!("checkpoint header does not parse: {e}")))?;
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let payload = &bytes[body + header_len..];
    if payload.len() != expected * 8 {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes but the header promises {} values",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[(offset + i) * 8..(offset + i + 1) * 8]);
            data.push(f64::from_le_bytes(b));
        }
        offset += n;
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?, entry.trainable)?;
    }
    header.meta.config.validate()?;
    Ok((store, header.meta))
}
