//! Training objective and evaluation metrics: the weighted L1 + perceptual +
//! character cross-entropy loss, PSNR, and exact-match / edit-distance text
//! scores.
//!
//! The perceptual term compares features from a fixed, seeded, three-layer
//! random convolution stack ("phi." parameters, frozen): random conv features
//! are a standard stand-in for learned perceptual embeddings at small scale.
//! Zero-weighted terms are skipped entirely, so a zero weight vector yields a
//! constant-zero loss with no gradient flow.

use autograd::{NodeId, ParamNodes, ParamStore, Tape, Tensor};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng::stream;
use crate::text_diffusion::CharState;

/// Checkpoint prefix for the frozen perceptual feature stack.
pub const PHI_PREFIX: &str = "phi.";

/// PSNR values are capped here; exact matches report the cap instead of ∞.
pub const PSNR_CAP: f64 = 99.0;

const PHI_CHANNELS: [usize; 3] = [8, 16, 32];

/// Non-negative weights for the L1, perceptual, and cross-entropy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, perceptual: 1.0, ce: 0.02 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("perceptual", self.perceptual), ("ce", self.ce)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Registers the frozen three-layer random conv stack under "phi.", seeded so
/// two processes with the same seed measure identical perceptual distances.
pub fn init_perceptual(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = stream(seed, 0, 0, "phi");
    let mut c_in = 1;
    for (i, &c_out) in PHI_CHANNELS.iter().enumerate() {
        nn::init_conv(
            store,
            &format!("phi.conv{i}"),
            nn::kaiming_conv(c_out, c_in, 3, 3, &mut rng),
            false,
        )?;
        c_in = c_out;
    }
    Ok(())
}

/// The perceptual feature stack: three stride-2 convolutions with SiLU.
fn phi(tape: &mut Tape, params: &mut dyn ParamNodes, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for i in 0..PHI_CHANNELS.len() {
        h = nn::conv(tape, params, &format!("phi.conv{i}"), h, (2, 2), (1, 1))?;
        h = tape.silu(h)?;
    }
    Ok(h)
}

/// Mean squared distance between the perceptual features of two images.
pub fn perceptual_distance(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let fa = phi(tape, params, a)?;
    let fb = phi(tape, params, b)?;
    let diff = tape.sub(fa, fb)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Weighted training loss:
/// `w.l1 · mean|x0 − x0_hat| + w.perceptual · mean((φ(x0) − φ(x0_hat))²)
///  + w.ce · mean-over-positions CE(logits, c0)`.
/// `logits` are the recognition head's per-position scores for `x0_hat`.
pub fn loss_total(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    x0: NodeId,
    x0_hat: NodeId,
    c0: &CharState,
    logits: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    weights.validate()?;
    if tape.value(x0).shape() != tape.value(x0_hat).shape() {
        return Err(Error::ShapeMismatch(format!(
            "loss wants matching images, got {:?} and {:?}",
            tape.value(x0).shape(),
            tape.value(x0_hat).shape()
        )));
    }
    if tape.value(logits).shape() != [c0.m(), c0.k()] {
        return Err(Error::ShapeMismatch(format!(
            "loss wants [{}, {}] logits, got {:?}",
            c0.m(),
            c0.k(),
            tape.value(logits).shape()
        )));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    if weights.l1 > 0.0 {
        let diff = tape.sub(x0, x0_hat)?;
        let mag = tape.abs(diff)?;
        let term = tape.mean(mag)?;
        let term = tape.scale(term, weights.l1)?;
        total = tape.add(total, term)?;
    }
    if weights.perceptual > 0.0 {
        let term = perceptual_distance(tape, params, x0, x0_hat)?;
        let term = tape.scale(term, weights.perceptual)?;
        total = tape.add(total, term)?;
    }
    if weights.ce > 0.0 {
        let targets = tape.constant(c0.probs().clone());
        let term = nn::cross_entropy_rows(tape, logits, targets)?;
        let term = tape.scale(term, weights.ce)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Peak signal-to-noise ratio in dB against a given peak value, capped at
/// [`PSNR_CAP`]; identical images report the cap.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr wants matching shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if max_val <= 0.0 || !max_val.is_finite() {
        return Err(Error::InvalidArgument(format!("psnr peak must be positive, got {max_val}")));
    }
    if a.numel() == 0 {
        return Err(Error::InvalidArgument("psnr of empty tensors".into()));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

/// Levenshtein distance with unit-cost insert/delete/substitute.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Exact-match accuracy and mean normalized edit similarity over paired
/// sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextMetrics {
    /// Fraction of pairs that match exactly.
    pub acc: f64,
    /// Mean of 1 − distance/max-length; 1 means every pair matches.
    pub ned: f64,
}

/// Per-pair normalized edit similarity: 1 − levenshtein/max(len); a pair of
/// empty sequences counts as a perfect match.
pub fn ned_pair(a: &[usize], b: &[usize]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / denom as f64
}

/// Aggregates [`ned_pair`] and exact-match accuracy over aligned lists.
pub fn text_metrics(pred: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<TextMetrics> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "text metrics want equal nonempty lists, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let ned = pred.iter().zip(truth).map(|(p, t)| ned_pair(p, t)).sum::<f64>() / n;
    Ok(TextMetrics { acc, ned })
}
