//! Synthetic data: glyph rendering, the two degradation families, the staged
//! LR-HR pair sampler, and the corpus container.
//!
//! Rendering places per-character glyph bitmaps into fixed-width cells with
//! seeded jitter (position, scale, stroke gamma, intensity), so the same
//! (text, style_seed) pair always produces bit-identical images.
//!
//! Degradation runs blur → area downsample → noise → clip → 8-level
//! quantization → bicubic upsample back to size. The `InDomain` family is
//! what training pairs are built from; `RealProxy` draws from disjoint,
//! harsher parameter sub-ranges with anisotropic blur and stands in for
//! unseen real-world degradations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::imgproc::{
    add_gaussian_noise, clip01, downsample_area, gaussian_blur, quantize, upsample_bicubic,
};
use crate::rng::{hash_text, stream};
use crate::text_diffusion::CharState;

const GLYPH_ROWS: usize = 7;
const GLYPH_COLS: usize = 5;

/// Built-in 7×5 bitmaps for "0123456789ACEFH" (15 symbols; blank is added
/// separately as index K−1).
const BUILTIN: [(char, [&str; GLYPH_ROWS]); 15] = [
    ('0', ["01110", "10001", "10011", "10101", "11001", "10001", "01110"]),
    ('1', ["00100", "01100", "00100", "00100", "00100", "00100", "01110"]),
    ('2', ["01110", "10001", "00001", "00010", "00100", "01000", "11111"]),
    ('3', ["11111", "00010", "00100", "00010", "00001", "10001", "01110"]),
    ('4', ["00010", "00110", "01010", "10010", "11111", "00010", "00010"]),
    ('5', ["11111", "10000", "11110", "00001", "00001", "10001", "01110"]),
    ('6', ["00110", "01000", "10000", "11110", "10001", "10001", "01110"]),
    ('7', ["11111", "00001", "00010", "00100", "01000", "01000", "01000"]),
    ('8', ["01110", "10001", "10001", "01110", "10001", "10001", "01110"]),
    ('9', ["01110", "10001", "10001", "01111", "00001", "00010", "01100"]),
    ('A', ["01110", "10001", "10001", "11111", "10001", "10001", "10001"]),
    ('C', ["01110", "10001", "10000", "10000", "10000", "10001", "01110"]),
    ('E', ["11111", "10000", "10000", "11110", "10000", "10000", "11111"]),
    ('F', ["11111", "10000", "10000", "11110", "10000", "10000", "10000"]),
    ('H', ["10001", "10001", "10001", "11111", "10001", "10001", "10001"]),
];

/// Fixed-cell page geometry: `max_len` equal-width cells across the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub max_len: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize, max_len: usize) -> Result<Self> {
        if max_len == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("geometry dimensions must be positive".into()));
        }
        if width % max_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {width} not divisible into {max_len} cells"
            )));
        }
        let g = Self { height, width, max_len };
        // Largest glyph box (jitter scale 1.1) must fit a cell.
        let gh = (0.62 * height as f64 * 1.1).round() as usize;
        let gw = (gh as f64 * GLYPH_COLS as f64 / GLYPH_ROWS as f64).round() as usize;
        if gh > height || gw > g.cell_w() {
            return Err(Error::InvalidArgument(format!(
                "cells {}x{} too small for glyph box {gh}x{gw}",
                height,
                g.cell_w()
            )));
        }
        Ok(g)
    }

    pub fn cell_w(&self) -> usize {
        self.width / self.max_len
    }
}

/// K-symbol alphabet of 7×5 bitmaps with a reserved all-zero blank at K−1.
#[derive(Debug, Clone)]
pub struct GlyphAlphabet {
    bitmaps: Vec<[u8; GLYPH_ROWS * GLYPH_COLS]>,
    chars: Vec<char>,
}

impl GlyphAlphabet {
    /// Builds the alphabet with K−1 drawable symbols plus the blank. The
    /// first 15 symbols are legible built-ins; beyond that, bitmaps encode
    /// the symbol number in binary so arbitrary K stays well-defined.
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("alphabet needs K >= 2, got {k}")));
        }
        let mut bitmaps = Vec::with_capacity(k);
        let mut chars = Vec::with_capacity(k);
        for i in 0..k - 1 {
            if i < BUILTIN.len() {
                let (ch, rows) = BUILTIN[i];
                let mut bm = [0u8; GLYPH_ROWS * GLYPH_COLS];
                for (r, row) in rows.iter().enumerate() {
                    for (c, b) in row.bytes().enumerate() {
                        bm[r * GLYPH_COLS + c] = (b == b'1') as u8;
                    }
                }
                bitmaps.push(bm);
                chars.push(ch);
            } else {
                // Symbol number in binary across the cells; always non-zero
                // and distinct for distinct indices.
                let code = (i + 1) as u64;
                let mut bm = [0u8; GLYPH_ROWS * GLYPH_COLS];
                for (j, slot) in bm.iter_mut().enumerate().take(35) {
                    *slot = ((code >> j) & 1) as u8;
                }
                bitmaps.push(bm);
                chars.push('?');
            }
        }
        bitmaps.push([0u8; GLYPH_ROWS * GLYPH_COLS]); // blank
        chars.push('_');
        for a in 0..bitmaps.len() {
            for b in a + 1..bitmaps.len() {
                if bitmaps[a] == bitmaps[b] {
                    return Err(Error::InvalidArgument(format!(
                        "bitmaps for symbols {a} and {b} collide"
                    )));
                }
            }
        }
        Ok(Self { bitmaps, chars })
    }

    pub fn k(&self) -> usize {
        self.bitmaps.len()
    }

    pub fn blank(&self) -> usize {
        self.bitmaps.len() - 1
    }

    pub fn bitmap(&self, i: usize) -> &[u8] {
        &self.bitmaps[i]
    }

    /// Printable stand-in for a symbol ('_' = blank, '?' = procedural).
    pub fn display_char(&self, i: usize) -> char {
        self.chars[i]
    }

    /// Renders symbol indices as a display string.
    pub fn display(&self, text: &[usize]) -> String {
        text.iter().map(|&i| self.display_char(i)).collect()
    }
}

/// Bilinear lookup into a glyph bitmap; coordinates outside read as 0.
fn bitmap_sample(bm: &[u8], sy: f64, sx: f64) -> f64 {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let read = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= GLYPH_ROWS as i64 || c >= GLYPH_COLS as i64 {
            0.0
        } else {
            bm[r as usize * GLYPH_COLS + c as usize] as f64
        }
    };
    let (r, c) = (y0 as i64, x0 as i64);
    read(r, c) * (1.0 - fy) * (1.0 - fx)
        + read(r, c + 1) * (1.0 - fy) * fx
        + read(r + 1, c) * fy * (1.0 - fx)
        + read(r + 1, c + 1) * fy * fx
}

struct GlyphStyle {
    dx: i64,
    dy: i64,
    scale: f64,
    gamma: f64,
    intensity: f64,
}

impl GlyphStyle {
    fn canonical() -> Self {
        Self { dx: 0, dy: 0, scale: 1.0, gamma: 1.0, intensity: 1.0 }
    }

    fn jittered(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.gen_range(-1..=1),
            dy: rng.gen_range(-1..=1),
            scale: rng.gen_range(0.9..=1.1),
            gamma: rng.gen_range(0.8..=1.25),
            intensity: rng.gen_range(0.85..=1.0),
        }
    }
}

/// Rasterizes one glyph into its cell (columns [cell·cell_w, (cell+1)·cell_w)),
/// clamped so the glyph box never leaves the cell; max-composited.
fn draw_glyph(
    canvas: &mut [f64],
    geom: &Geometry,
    cell: usize,
    bm: &[u8],
    style: &GlyphStyle,
) {
    let (h, w, cw) = (geom.height, geom.width, geom.cell_w());
    let gh = ((0.62 * h as f64 * style.scale).round() as usize).clamp(1, h);
    let gw = (((gh as f64) * GLYPH_COLS as f64 / GLYPH_ROWS as f64).round() as usize).clamp(1, cw);
    let top = (((h - gh) / 2) as i64 + style.dy).clamp(0, (h - gh) as i64) as usize;
    let left = (((cw - gw) / 2) as i64 + style.dx).clamp(0, (cw - gw) as i64) as usize;
    let x0 = cell * cw + left;
    for yy in 0..gh {
        let sy = (yy as f64 + 0.5) / gh as f64 * GLYPH_ROWS as f64 - 0.5;
        for xx in 0..gw {
            let sx = (xx as f64 + 0.5) / gw as f64 * GLYPH_COLS as f64 - 0.5;
            let a = bitmap_sample(bm, sy, sx);
            if a > 0.0 {
                let v = style.intensity * a.powf(style.gamma);
                let px = &mut canvas[(top + yy) * w + x0 + xx];
                if v > *px {
                    *px = v;
                }
            }
        }
    }
}

/// Renders `text` (symbol indices) left-to-right into HR cells with seeded
/// per-character jitter. Deterministic in (text, style_seed).
pub fn render_text(
    text: &[usize],
    alphabet: &GlyphAlphabet,
    geom: &Geometry,
    style_seed: u64,
) -> Result<ImageTensor> {
    if text.is_empty() || text.len() > geom.max_len {
        return Err(Error::InvalidArgument(format!(
            "text length {} outside [1, {}]",
            text.len(),
            geom.max_len
        )));
    }
    let mut canvas = vec![0.0; geom.height * geom.width];
    let mut rng = stream(style_seed, 0, 0, "render");
    for (cell, &sym) in text.iter().enumerate() {
        if sym >= alphabet.k() {
            return Err(Error::InvalidArgument(format!(
                "symbol {sym} outside alphabet of {}",
                alphabet.k()
            )));
        }
        let style = GlyphStyle::jittered(&mut rng);
        draw_glyph(&mut canvas, geom, cell, alphabet.bitmap(sym), &style);
    }
    ImageTensor::new(autograd::Tensor::new(vec![1, geom.height, geom.width], canvas)?)
}

/// Canonical single-cell rendering (no jitter, unit style): the template the
/// recognizer matches against. Shape [1, height, cell_w].
pub fn render_cell_canonical(
    sym: usize,
    alphabet: &GlyphAlphabet,
    geom: &Geometry,
) -> Result<ImageTensor> {
    if sym >= alphabet.k() {
        return Err(Error::InvalidArgument(format!(
            "symbol {sym} outside alphabet of {}",
            alphabet.k()
        )));
    }
    let cell_geom = Geometry { height: geom.height, width: geom.cell_w(), max_len: 1 };
    let mut canvas = vec![0.0; geom.height * geom.cell_w()];
    draw_glyph(&mut canvas, &cell_geom, 0, alphabet.bitmap(sym), &GlyphStyle::canonical());
    ImageTensor::new(autograd::Tensor::new(vec![1, geom.height, geom.cell_w()], canvas)?)
}

/// Degradation family: training-domain vs held-out harsher proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    InDomain,
    RealProxy,
}

/// One concrete degradation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub scale: usize,
    pub noise_sigma: f64,
}

impl DegradeParams {
    /// Draws parameters from the family's sub-ranges in a fixed order.
    /// InDomain: isotropic blur σ ∈ [0.5, 1.5), noise σ ∈ [0.01, 0.045).
    /// RealProxy: anisotropic blur σx ∈ [1.5, 2.5), σy = σx·U[0.5, 1),
    /// noise σ ∈ [0.045, 0.08). Both: area downsample ×2 or ×4.
    pub fn draw(family: Family, rng: &mut ChaCha8Rng) -> Self {
        match family {
            Family::InDomain => {
                let sigma = rng.gen_range(0.5..1.5);
                let scale = if rng.gen::<f64>() < 0.5 { 2 } else { 4 };
                let noise_sigma = rng.gen_range(0.01..0.045);
                Self { sigma_x: sigma, sigma_y: sigma, scale, noise_sigma }
            }
            Family::RealProxy => {
                let sigma_x = rng.gen_range(1.5..2.5);
                let sigma_y = sigma_x * rng.gen_range(0.5..1.0);
                let scale = if rng.gen::<f64>() < 0.5 { 2 } else { 4 };
                let noise_sigma = rng.gen_range(0.045..0.08);
                Self { sigma_x, sigma_y, scale, noise_sigma }
            }
        }
    }
}

/// Runs the degradation pipeline with explicit parameters (the RNG supplies
/// only the additive noise). Output is back at input size, clipped to [0,1].
pub fn degrade_with(
    x: &ImageTensor,
    params: &DegradeParams,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    if x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArgument("degradation input must lie in [0, 1]".into()));
    }
    let blurred = gaussian_blur(x, params.sigma_x, params.sigma_y)?;
    let small = downsample_area(&blurred, params.scale)?;
    let noisy = if params.noise_sigma > 0.0 {
        add_gaussian_noise(&small, params.noise_sigma, rng)?
    } else {
        small
    };
    let clipped = clip01(&noisy);
    let quantized = quantize(&clipped, 8)?;
    let up = upsample_bicubic(&quantized, x.h(), x.w())?;
    Ok(clip01(&up))
}

/// Seeded draw-and-degrade: blur → ↓s (area) → noise → clip → 8-level
/// quantize → bicubic ↑ to original size → clip.
pub fn degrade(x: &ImageTensor, family: Family, seed: u64) -> Result<ImageTensor> {
    let mut rng = stream(seed, 0, 0, "degrade");
    let params = DegradeParams::draw(family, &mut rng);
    degrade_with(x, &params, &mut rng)
}

/// Curriculum thresholds; steps < r1 are stage A, [r1, r2) stage B, ≥ r2 C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub r1: usize,
    pub r2: usize,
}

impl StagePlan {
    pub fn new(r1: usize, r2: usize) -> Result<Self> {
        if r1 == 0 || r1 >= r2 {
            return Err(Error::InvalidArgument(format!(
                "stage thresholds need 0 < r1 < r2, got {r1}, {r2}"
            )));
        }
        Ok(Self { r1, r2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A,
    B,
    C,
}

/// Pure stage membership; boundary steps belong to the later stage.
pub fn stage_of(r: usize, plan: &StagePlan) -> Stage {
    if r < plan.r1 {
        Stage::A
    } else if r < plan.r2 {
        Stage::B
    } else {
        Stage::C
    }
}

/// Which source the LR side of a pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// x̂_0: HR freshly degraded in-domain.
    DegradedHr,
    /// y: the sample's fixed real-proxy LR.
    RealLr,
    /// ŷ: the real-proxy LR degraded again in-domain.
    DegradedLr,
}

/// One training pair; all images are HR-sized.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub x0: ImageTensor,
    pub lr: ImageTensor,
    pub c0: CharState,
    pub source_tag: SourceTag,
}

/// Builds the LR side for training step `r` under the staged curriculum:
/// stage A uses freshly degraded HR only; stage B flips a fair coin between
/// that and the fixed real-proxy LR; stage C picks uniformly among those two
/// and a re-degraded real-proxy LR (fixed order: degraded HR, real, degraded
/// real). Deterministic in (seed, r).
pub fn sample_pair(
    x0: &ImageTensor,
    y_real: &ImageTensor,
    c0: &CharState,
    r: usize,
    plan: &StagePlan,
    seed: u64,
) -> Result<TrainSample> {
    sample_with_stage(x0, y_real, c0, r, stage_of(r, plan), seed)
}

/// [`sample_pair`] with the stage chosen by the caller, for curricula that
/// do not follow the staged plan (e.g. the final mixture from step 0).
pub fn sample_with_stage(
    x0: &ImageTensor,
    y_real: &ImageTensor,
    c0: &CharState,
    r: usize,
    stage: Stage,
    seed: u64,
) -> Result<TrainSample> {
    if !x0.same_shape(y_real) {
        return Err(Error::ShapeMismatch(format!(
            "HR {:?} and real-LR {:?} differ",
            x0.tensor().shape(),
            y_real.tensor().shape()
        )));
    }
    let mut rng = stream(seed, r as u64, 0, "pair");
    let pick: f64 = rng.gen();
    let degrade_seed = rng.gen::<u64>();
    let (lr, source_tag) = match stage {
        Stage::A => (degrade(x0, Family::InDomain, degrade_seed)?, SourceTag::DegradedHr),
        Stage::B => {
            if pick < 0.5 {
                (degrade(x0, Family::InDomain, degrade_seed)?, SourceTag::DegradedHr)
            } else {
                (y_real.clone(), SourceTag::RealLr)
            }
        }
        Stage::C => {
            if pick < 1.0 / 3.0 {
                (degrade(x0, Family::InDomain, degrade_seed)?, SourceTag::DegradedHr)
            } else if pick < 2.0 / 3.0 {
                (y_real.clone(), SourceTag::RealLr)
            } else {
                (degrade(y_real, Family::InDomain, degrade_seed)?, SourceTag::DegradedLr)
            }
        }
    };
    Ok(TrainSample { x0: x0.clone(), lr, c0: c0.clone(), source_tag })
}

/// Train/test membership, stable under the content hash of the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-sample corpus record; images are regenerated from these fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub text: Vec<usize>,
    pub style_seed: u64,
    pub real_seed: u64,
    pub split: Split,
}

/// Manifest header: everything needed to regenerate the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    k: usize,
    height: usize,
    width: usize,
    max_len: usize,
    min_len: usize,
    seed: u64,
}

/// A generated corpus. Images are deterministic functions of the records, so
/// only the records persist; `hr_image`/`y_real` re-render on demand.
#[derive(Debug, Clone)]
pub struct Corpus {
    alphabet: GlyphAlphabet,
    geom: Geometry,
    min_len: usize,
    seed: u64,
    samples: Vec<CorpusSample>,
}

impl Corpus {
    /// Draws `n` samples: text length uniform in [min_len, max_len], symbols
    /// uniform over the drawable alphabet (never blank). The 20% test split
    /// is by text content hash, so regenerating with a different seed keeps
    /// any repeated text in the same split.
    pub fn generate(
        k: usize,
        geom: Geometry,
        min_len: usize,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if min_len == 0 || min_len > geom.max_len {
            return Err(Error::InvalidArgument(format!(
                "min_len {min_len} outside [1, {}]",
                geom.max_len
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("corpus needs at least one sample".into()));
        }
        let alphabet = GlyphAlphabet::new(k)?;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream(seed, i as u64, 0, "corpus");
            let len = rng.gen_range(min_len..=geom.max_len);
            let text: Vec<usize> = (0..len).map(|_| rng.gen_range(0..k - 1)).collect();
            let style_seed = rng.gen::<u64>();
            let real_seed = rng.gen::<u64>();
            let split = if hash_text(&text) % 5 == 0 { Split::Test } else { Split::Train };
            samples.push(CorpusSample { text, style_seed, real_seed, split });
        }
        Ok(Self { alphabet, geom, min_len, seed, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &CorpusSample {
        &self.samples[i]
    }

    pub fn alphabet(&self) -> &GlyphAlphabet {
        &self.alphabet
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Clean HR rendering of sample `i`.
    pub fn hr_image(&self, i: usize) -> Result<ImageTensor> {
        let s = &self.samples[i];
        render_text(&s.text, &self.alphabet, &self.geom, s.style_seed)
    }

    /// The sample's fixed "real-world" LR: the held-out proxy degradation
    /// applied once with the sample's frozen seed.
    pub fn y_real(&self, i: usize) -> Result<ImageTensor> {
        let hr = self.hr_image(i)?;
        degrade(&hr, Family::RealProxy, self.samples[i].real_seed)
    }

    /// Ground-truth text state, blank-padded to max_len (padding has
    /// confidence 0).
    pub fn c0(&self, i: usize) -> Result<CharState> {
        CharState::one_hot(&self.samples[i].text, self.alphabet.k(), self.geom.max_len)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == Split::Test).collect()
    }

    /// Writes the corpus as JSON lines: a header object, then one record per
    /// sample.
    pub fn save_manifest(&self, path: &std::path::Path) -> Result<()> {
        let header = ManifestHeader {
            k: self.alphabet.k(),
            height: self.geom.height,
            width: self.geom.width,
            max_len: self.geom.max_len,
            min_len: self.min_len,
            seed: self.seed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a manifest written by `save_manifest`.
    pub fn load_manifest(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let mut lines = body.lines();
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Format("manifest is empty".into()))?,
        )
        .map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        let geom = Geometry::new(header.height, header.width, header.max_len)?;
        let alphabet = GlyphAlphabet::new(header.k)?;
        let mut samples = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: CorpusSample = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", ln + 2)))?;
            if s.text.is_empty()
                || s.text.len() > geom.max_len
                || s.text.iter().any(|&c| c >= header.k)
            {
                return Err(Error::Format(format!("manifest line {} has invalid text", ln + 2)));
            }
            samples.push(s);
        }
        if samples.is_empty() {
            return Err(Error::Format("manifest has no samples".into()));
        }
        Ok(Self { alphabet, geom, min_len: header.min_len, seed: header.seed, samples })
    }
}
