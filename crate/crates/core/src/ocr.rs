//! Two recognizers over cell-aligned text images.
//!
//! [`TemplateOcr`] is the non-differentiable matcher that produces the
//! per-character confidences used for conditioning: each cell is scored
//! against every canonical glyph template by normalized cross-correlation
//! (searched over ±1-pixel shifts, then cubed so near-perfect matches
//! dominate family resemblance between similar glyphs), blanks are detected
//! by near-zero cell variance, and a temperature softmax turns scores into a
//! prediction and its confidence. Correlation is computed on mean-centered
//! cells, so predictions and confidences are invariant to global affine
//! brightness changes as long as cell contrast stays clear of the blank
//! cutoff.
//!
//! [`OcrHead`] is a small differentiable conv classifier used only inside
//! the training loss, where gradients must flow back into the generated
//! image; the template matcher cannot provide that path.

use autograd::{NodeId, ParamNodes, ParamStore, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::data::{render_cell_canonical, Geometry, GlyphAlphabet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn;

/// Blank cells are detected by cell standard deviation: below this cutoff the
/// blank score is exp(−(std/BLANK_SCALE)²), above it exactly 0 (the hard zero
/// keeps clean-render confidences exactly affine-invariant).
const BLANK_STD_CUTOFF: f64 = 0.12;
const BLANK_SCALE: f64 = 0.05;

/// Prediction plus per-character confidence from the template matcher.
#[derive(Debug, Clone, PartialEq)]
pub struct OcrResult {
    /// Symbol index per cell (length max_len; trailing cells read blank).
    pub pred: Vec<usize>,
    /// Softmax maximum per cell, in [0, 1].
    pub conf: Vec<f64>,
}

/// Template matcher over the canonical (jitter-free) glyph renderings.
#[derive(Debug, Clone)]
pub struct TemplateOcr {
    geom: Geometry,
    k: usize,
    temperature: f64,
    /// K−1 glyph templates, each a full cell (height × cell_w), raw values.
    templates: Vec<Vec<f64>>,
}

impl TemplateOcr {
    pub fn new(alphabet: &GlyphAlphabet, geom: &Geometry, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let mut templates = Vec::with_capacity(alphabet.k() - 1);
        for sym in 0..alphabet.k() - 1 {
            templates.push(render_cell_canonical(sym, alphabet, geom)?.data().to_vec());
        }
        Ok(Self { geom: *geom, k: alphabet.k(), temperature, templates })
    }

    fn check_image(&self, img: &ImageTensor) -> Result<()> {
        if img.tensor().shape() != [1, self.geom.height, self.geom.width] {
            return Err(Error::ShapeMismatch(format!(
                "recognizer wants [1, {}, {}], got {:?}",
                self.geom.height,
                self.geom.width,
                img.tensor().shape()
            )));
        }
        Ok(())
    }

    /// Match scores per cell, shape [max_len, K]: cubed best-shift NCC for
    /// each glyph, variance-based blank score in the last column.
    pub fn scores(&self, img: &ImageTensor) -> Result<Tensor> {
        self.check_image(img)?;
        let (h, cw, m) = (self.geom.height, self.geom.cell_w(), self.geom.max_len);
        let mut out = vec![0.0; m * self.k];
        for cell in 0..m {
            // Extract and center the cell.
            let mut values = vec![0.0; h * cw];
            for y in 0..h {
                for x in 0..cw {
                    values[y * cw + x] = img.at(0, y, cell * cw + x);
                }
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            for v in &mut values {
                *v -= mean;
            }
            let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let std = norm / n.sqrt();

            let row = &mut out[cell * self.k..(cell + 1) * self.k];
            if norm > 1e-12 {
                for (j, tpl) in self.templates.iter().enumerate() {
                    let mut best = -1.0_f64;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            best = best.max(shifted_ncc(&values, norm, tpl, h, cw, dy, dx));
                        }
                    }
                    row[j] = best.powi(3);
                }
            }
            // Blank score: flat cells score by how flat they are.
            row[self.k - 1] =
                if std < BLANK_STD_CUTOFF { (-(std / BLANK_SCALE).powi(2)).exp() } else { 0.0 };
        }
        Ok(Tensor::new(vec![m, self.k], out)?)
    }

    /// Per-cell probabilities: softmax of temperature-scaled match scores.
    pub fn probabilities(&self, img: &ImageTensor) -> Result<Tensor> {
        let scores = self.scores(img)?;
        let (m, k) = (self.geom.max_len, self.k);
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            let row = &scores.data()[i * k..(i + 1) * k];
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &s) in row.iter().enumerate() {
                let e = (self.temperature * (s - top)).exp();
                out[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                out[i * k + j] /= z;
            }
        }
        Ok(Tensor::new(vec![m, k], out)?)
    }

    /// Prediction and confidence: per-cell argmax and maximum of
    /// [`Self::probabilities`].
    pub fn recognize(&self, img: &ImageTensor) -> Result<OcrResult> {
        let probs = self.probabilities(img)?;
        let (m, k) = (self.geom.max_len, self.k);
        let mut pred = Vec::with_capacity(m);
        let mut conf = Vec::with_capacity(m);
        for i in 0..m {
            let row = &probs.data()[i * k..(i + 1) * k];
            let (j, &p) = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .expect("non-empty row");
            pred.push(j);
            conf.push(p);
        }
        Ok(OcrResult { pred, conf })
    }
}

/// NCC between a centered cell and a template translated by (dy, dx); pixels
/// shifted in from outside read 0. Returns 0 when the shifted template has
/// no contrast.
fn shifted_ncc(
    centered_cell: &[f64],
    cell_norm: f64,
    tpl: &[f64],
    h: usize,
    cw: usize,
    dy: i64,
    dx: i64,
) -> f64 {
    let n = (h * cw) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut dot = 0.0;
    for y in 0..h as i64 {
        for x in 0..cw as i64 {
            let (sy, sx) = (y - dy, x - dx);
            let t = if sy < 0 || sx < 0 || sy >= h as i64 || sx >= cw as i64 {
                0.0
            } else {
                tpl[(sy * cw as i64 + sx) as usize]
            };
            sum += t;
            sq += t * t;
            dot += t * centered_cell[(y * cw as i64 + x) as usize];
        }
    }
    // <c, t − mean(t)> = <c, t> because c is centered; only norms need the
    // template mean.
    let tpl_norm = (sq - sum * sum / n).max(0.0).sqrt();
    if tpl_norm <= 1e-12 {
        return 0.0;
    }
    dot / (cell_norm * tpl_norm)
}

/// One-call template recognition.
pub fn ocr_template(
    img: &ImageTensor,
    alphabet: &GlyphAlphabet,
    geom: &Geometry,
    temperature: f64,
) -> Result<OcrResult> {
    TemplateOcr::new(alphabet, geom, temperature)?.recognize(img)
}

/// Differentiable per-cell classifier: four stride-2 conv stages collapse
/// each 16-pixel-wide cell column to one feature vector, then a small MLP
/// yields per-cell logits. Parameters live under the "ocr." prefix.
#[derive(Debug, Clone)]
pub struct OcrHead {
    geom: Geometry,
    k: usize,
}

/// Conv stage widths; after four stride-2 stages a cell column is 1 wide.
const OCR_CHANNELS: [usize; 4] = [8, 16, 32, 64];
const OCR_GROUPS: usize = 4;

impl OcrHead {
    /// The head's geometry is fixed by its downsampling: height must be a
    /// multiple of 16 and cells exactly 16 wide.
    pub fn new(geom: &Geometry, k: usize) -> Result<Self> {
        if geom.height % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs height divisible by 16, got {}",
                geom.height
            )));
        }
        if geom.cell_w() != 16 {
            return Err(Error::InvalidArgument(format!(
                "classifier needs 16-pixel cells, got {}",
                geom.cell_w()
            )));
        }
        if k < 2 {
            return Err(Error::InvalidArgument(format!("alphabet needs K >= 2, got {k}")));
        }
        Ok(Self { geom: *geom, k })
    }

    /// Registers all "ocr." parameters (trainable until pretraining freezes
    /// them).
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut in_c = 1;
        for (i, &out_c) in OCR_CHANNELS.iter().enumerate() {
            nn::init_conv(store, &format!("ocr.conv{i}"), nn::kaiming_conv(out_c, in_c, 3, 3, rng), true)?;
            nn::init_norm_affine(store, &format!("ocr.gn{i}"), out_c, true)?;
            in_c = out_c;
        }
        let col_h = self.geom.height / 16;
        nn::init_conv(store, "ocr.col", nn::kaiming_conv(64, 64, col_h, 1, rng), true)?;
        nn::init_linear(store, "ocr.fc", nn::kaiming_linear(64, 64, rng), true)?;
        nn::init_linear(store, "ocr.head", nn::xavier_linear(64, self.k, rng), true)?;
        Ok(())
    }

    /// Builds the classifier graph: img node [1, H, W] → logits [max_len, K].
    pub fn logits(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        img: NodeId,
    ) -> Result<NodeId> {
        let shape = tape.value(img).shape().to_vec();
        if shape != [1, self.geom.height, self.geom.width] {
            return Err(Error::ShapeMismatch(format!(
                "classifier wants [1, {}, {}], got {shape:?}",
                self.geom.height, self.geom.width
            )));
        }
        let mut x = img;
        for (i, _) in OCR_CHANNELS.iter().enumerate() {
            x = nn::conv(tape, params, &format!("ocr.conv{i}"), x, (2, 2), (1, 1))?;
            x = nn::group_norm_affine(tape, params, &format!("ocr.gn{i}"), x, OCR_GROUPS)?;
            x = tape.silu(x)?;
        }
        // [64, H/16, W/16] → collapse the column → [64, 1, m] → [m, 64].
        x = nn::conv(tape, params, "ocr.col", x, (1, 1), (0, 0))?;
        let m = self.geom.max_len;
        let flat = tape.reshape(x, &[64, m])?;
        let tokens = tape.transpose(flat)?;
        let hidden = nn::linear(tape, params, "ocr.fc", tokens)?;
        let hidden = tape.silu(hidden)?;
        nn::linear(tape, params, "ocr.head", hidden)
    }
}
