//! The two denoising networks: a latent-space UNet that predicts the clean
//! latent ẑ₀ from the noisy latent, the degraded-input latent, the timestep,
//! and a text conditioning sequence; and a transformer text decoder that
//! predicts the clean character distribution from the current character
//! state, an image conditioning sequence, and the timestep.
//!
//! Every UNet resolution stage runs a residual conv block, then (on grids at
//! or below the attention threshold) a self-attention block, then a
//! cross-attention block over the text conditioning. Cross-attention output
//! projections start at zero, so a freshly initialized UNet is exactly
//! independent of the text stream — conditioning fades in as training moves
//! those weights. Timestep information enters every residual block as a
//! learned per-channel shift.
//!
//! Parameters live under the "unet." and "tau." prefixes.

use autograd::{NodeId, ParamNodes, ParamStore, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::text_diffusion::CharState;

/// Checkpoint prefix for the image denoiser.
pub const UNET_PREFIX: &str = "unet.";
/// Checkpoint prefix for the text decoder.
pub const TAU_PREFIX: &str = "tau.";

/// Static shape of the image denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    /// Channels at the first resolution level; level l uses `base << l`.
    pub base: usize,
    /// Number of resolution levels (1 = no downsampling).
    pub levels: usize,
    /// Self-attention runs on grids with at most `threshold²` positions.
    pub attn_threshold: usize,
    /// Conditioning embedding width (must match the mixer).
    pub d: usize,
    /// Alphabet size.
    pub k: usize,
    /// Text positions.
    pub m: usize,
    /// Channels of each input latent.
    pub latent_channels: usize,
    /// Latent grid height.
    pub latent_h: usize,
    /// Latent grid width.
    pub latent_w: usize,
}

impl DenoiserConfig {
    fn temb_dim(&self) -> usize {
        2 * self.base
    }

    fn attn_on(&self, h: usize, w: usize) -> bool {
        h * w <= self.attn_threshold * self.attn_threshold
    }

    /// Grid of level `l`.
    fn grid(&self, l: usize) -> (usize, usize) {
        (self.latent_h >> l, self.latent_w >> l)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Encoder/decoder UNet over latent grids, conditioned on a timestep and a
/// cross-attended text sequence; predicts the clean latent.
#[derive(Debug, Clone)]
pub struct Unet {
    cfg: DenoiserConfig,
}

impl Unet {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        if cfg.base == 0 || cfg.levels == 0 {
            return Err(Error::InvalidArgument(
                "denoiser needs positive base channels and levels".into(),
            ));
        }
        if cfg.d < 2 || cfg.d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "conditioning width must be even and ≥ 2, got {}",
                cfg.d
            )));
        }
        if cfg.k < 2 || cfg.m == 0 || cfg.latent_channels == 0 {
            return Err(Error::InvalidArgument(
                "denoiser needs k ≥ 2, m ≥ 1, and ≥ 1 latent channel".into(),
            ));
        }
        let down = 1usize << (cfg.levels - 1);
        if cfg.latent_h % down != 0 || cfg.latent_w % down != 0 || cfg.latent_h < down * 2 {
            return Err(Error::InvalidArgument(format!(
                "latent grid {}×{} does not support {} levels",
                cfg.latent_h, cfg.latent_w, cfg.levels
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Registers all UNet parameters (trainable) under "unet.".
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = &self.cfg;
        let td = cfg.temb_dim();
        nn::init_linear(store, "unet.temb.fc1", nn::kaiming_linear(td, td, rng), true)?;
        nn::init_linear(store, "unet.temb.fc2", nn::xavier_linear(td, td, rng), true)?;
        nn::init_conv(
            store,
            "unet.stem",
            nn::kaiming_conv(cfg.base, 2 * cfg.latent_channels, 3, 3, rng),
            true,
        )?;
        for l in 0..cfg.levels {
            let c = cfg.base << l;
            let (h, w) = cfg.grid(l);
            self.init_stage(store, &format!("unet.enc{l}"), c, c, h, w, rng)?;
            if l + 1 < cfg.levels {
                nn::init_conv(
                    store,
                    &format!("unet.down{l}"),
                    nn::kaiming_conv(2 * c, c, 3, 3, rng),
                    true,
                )?;
            }
        }
        let c_top = cfg.base << (cfg.levels - 1);
        let (h, w) = cfg.grid(cfg.levels - 1);
        self.init_stage(store, "unet.mid", c_top, c_top, h, w, rng)?;
        for l in (0..cfg.levels).rev() {
            let c = cfg.base << l;
            let (h, w) = cfg.grid(l);
            self.init_stage(store, &format!("unet.dec{l}"), c, c, h, w, rng)?;
            if l > 0 {
                nn::init_conv(
                    store,
                    &format!("unet.up{l}"),
                    nn::kaiming_conv(2 * c, c, 1, 1, rng),
                    true,
                )?;
            }
        }
        nn::init_norm_affine(store, "unet.out.gn", cfg.base, true)?;
        nn::init_conv(
            store,
            "unet.out.conv",
            nn::kaiming_conv(cfg.latent_channels, cfg.base, 3, 3, rng),
            true,
        )?;
        Ok(())
    }

    fn init_stage(
        &self,
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let td = self.cfg.temb_dim();
        nn::init_norm_affine(store, &format!("{name}.res.gn1"), c_in, true)?;
        nn::init_conv(store, &format!("{name}.res.conv1"), nn::kaiming_conv(c_out, c_in, 3, 3, rng), true)?;
        nn::init_linear(store, &format!("{name}.res.temb"), nn::xavier_linear(td, c_out, rng), true)?;
        nn::init_norm_affine(store, &format!("{name}.res.gn2"), c_out, true)?;
        nn::init_conv(store, &format!("{name}.res.conv2"), nn::kaiming_conv(c_out, c_out, 3, 3, rng), true)?;
        if c_in != c_out {
            nn::init_conv(store, &format!("{name}.res.skip"), nn::kaiming_conv(c_out, c_in, 1, 1, rng), true)?;
        }
        if self.cfg.attn_on(h, w) {
            nn::init_attention(store, &format!("{name}.attn"), c_out, c_out, c_out, rng, true)?;
        }
        nn::init_attention(store, &format!("{name}.cross"), c_out, self.cfg.d, c_out, rng, true)?;
        Ok(())
    }

    /// Predicts the clean latent from the noisy latent `z_t`, the degraded
    /// input latent `z_y`, the timestep `t` (≥ 1), and the text conditioning
    /// sequence `c_cond` [m, d]. Output shape equals the input latent shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        z_t: NodeId,
        z_y: NodeId,
        t: usize,
        c_cond: NodeId,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let want = [cfg.latent_channels, cfg.latent_h, cfg.latent_w];
        if tape.value(z_t).shape() != want || tape.value(z_y).shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "denoiser wants two {want:?} latents, got {:?} and {:?}",
                tape.value(z_t).shape(),
                tape.value(z_y).shape()
            )));
        }
        if tape.value(c_cond).shape() != [cfg.m, cfg.d] {
            return Err(Error::ShapeMismatch(format!(
                "denoiser wants [{}, {}] conditioning, got {:?}",
                cfg.m,
                cfg.d,
                tape.value(c_cond).shape()
            )));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("timestep must be ≥ 1".into()));
        }
        let td = cfg.temb_dim();
        let temb = tape.constant(nn::timestep_embed(t, td)?.reshaped(&[1, td])?);
        let temb = nn::linear(tape, params, "unet.temb.fc1", temb)?;
        let temb = tape.silu(temb)?;
        let temb = nn::linear(tape, params, "unet.temb.fc2", temb)?;

        let mut x = tape.concat(0, &[z_t, z_y])?;
        x = nn::conv(tape, params, "unet.stem", x, (1, 1), (1, 1))?;
        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let (h, w) = cfg.grid(l);
            x = self.stage(tape, params, &format!("unet.enc{l}"), x, temb, c_cond, h, w)?;
            skips.push(x);
            if l + 1 < cfg.levels {
                x = nn::conv(tape, params, &format!("unet.down{l}"), x, (2, 2), (1, 1))?;
            }
        }
        let (h, w) = cfg.grid(cfg.levels - 1);
        x = self.stage(tape, params, "unet.mid", x, temb, c_cond, h, w)?;
        for l in (0..cfg.levels).rev() {
            let (h, w) = cfg.grid(l);
            x = tape.add(x, skips[l])?;
            x = self.stage(tape, params, &format!("unet.dec{l}"), x, temb, c_cond, h, w)?;
            if l > 0 {
                x = nn::conv(tape, params, &format!("unet.up{l}"), x, (1, 1), (0, 0))?;
                x = tape.depth_to_space(x, 2)?;
            }
        }
        let groups = gcd(8, cfg.base);
        x = nn::group_norm_affine(tape, params, "unet.out.gn", x, groups)?;
        x = tape.silu(x)?;
        Ok(nn::conv(tape, params, "unet.out.conv", x, (1, 1), (1, 1))?)
    }

    /// One resolution stage: residual conv block, optional self-attention,
    /// cross-attention over the text conditioning.
    fn stage(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        name: &str,
        x: NodeId,
        temb: NodeId,
        c_cond: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        let x = self.res_block(tape, params, &format!("{name}.res"), x, temb)?;
        let c = tape.value(x).shape()[0];
        let flat = tape.reshape(x, &[c, h * w])?;
        let mut tokens = tape.transpose(flat)?;
        if self.cfg.attn_on(h, w) {
            tokens = nn::token_self_attention(tape, params, &format!("{name}.attn"), tokens)?;
        }
        tokens = nn::cross_attention(tape, params, &format!("{name}.cross"), tokens, c_cond)?;
        let back = tape.transpose(tokens)?;
        Ok(tape.reshape(back, &[c, h, w])?)
    }

    /// GN → SiLU → 3×3 conv → timestep shift → GN → SiLU → 3×3 conv, with an
    /// identity (or 1×1-projected) skip around the whole block.
    fn res_block(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        name: &str,
        x: NodeId,
        temb: NodeId,
    ) -> Result<NodeId> {
        let c_in = tape.value(x).shape()[0];
        let h = nn::group_norm_affine(tape, params, &format!("{name}.gn1"), x, gcd(8, c_in))?;
        let h = tape.silu(h)?;
        let h = nn::conv(tape, params, &format!("{name}.conv1"), h, (1, 1), (1, 1))?;
        let c_out = tape.value(h).shape()[0];
        let shift = nn::linear(tape, params, &format!("{name}.temb"), temb)?;
        let shift = tape.reshape(shift, &[c_out])?;
        let h = tape.add_vec(h, shift, 0)?;
        let h = nn::group_norm_affine(tape, params, &format!("{name}.gn2"), h, gcd(8, c_out))?;
        let h = tape.silu(h)?;
        let h = nn::conv(tape, params, &format!("{name}.conv2"), h, (1, 1), (1, 1))?;
        let skip = if c_in == c_out {
            x
        } else {
            nn::conv(tape, params, &format!("{name}.skip"), x, (1, 1), (0, 0))?
        };
        Ok(tape.add(skip, h)?)
    }
}

/// Transformer text decoder: embeds the current character distribution,
/// mixes it through self-attention blocks with cross-attention into the
/// image-side conditioning, and emits per-position logits over the alphabet.
#[derive(Debug, Clone)]
pub struct TextDecoder {
    d: usize,
    k: usize,
    m: usize,
}

impl TextDecoder {
    pub fn new(d: usize, k: usize, m: usize) -> Result<Self> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder width must be even and ≥ 2, got {d}"
            )));
        }
        if k < 2 || m == 0 {
            return Err(Error::InvalidArgument(
                "decoder needs k ≥ 2 and m ≥ 1".into(),
            ));
        }
        Ok(Self { d, k, m })
    }

    /// Registers all decoder parameters (trainable) under "tau.".
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.d;
        nn::init_linear(store, "tau.embed", nn::xavier_linear(self.k, d, rng), true)?;
        store.insert("tau.pos", Tensor::randn(&[self.m, d], rng).map(|v| 0.02 * v), true)?;
        nn::init_linear(store, "tau.temb.fc1", nn::kaiming_linear(d, d, rng), true)?;
        nn::init_linear(store, "tau.temb.fc2", nn::xavier_linear(d, d, rng), true)?;
        for blk in 0..2 {
            nn::init_self_attention_block(store, &format!("tau.blk{blk}"), d, rng, true)?;
            nn::init_attention(store, &format!("tau.blk{blk}.cross"), d, d, d, rng, true)?;
        }
        nn::init_norm_affine(store, "tau.out_ln", d, true)?;
        nn::init_linear(store, "tau.head", nn::xavier_linear(d, self.k, rng), true)?;
        Ok(())
    }

    /// Per-position logits [m, K] from the character distribution `c_probs`
    /// [m, K], the conditioning sequence `i_cond` [m, d], and timestep `t`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        c_probs: NodeId,
        i_cond: NodeId,
        t: usize,
    ) -> Result<NodeId> {
        if tape.value(c_probs).shape() != [self.m, self.k] {
            return Err(Error::ShapeMismatch(format!(
                "decoder wants [{}, {}] character rows, got {:?}",
                self.m,
                self.k,
                tape.value(c_probs).shape()
            )));
        }
        if tape.value(i_cond).shape() != [self.m, self.d] {
            return Err(Error::ShapeMismatch(format!(
                "decoder wants [{}, {}] conditioning, got {:?}",
                self.m,
                self.d,
                tape.value(i_cond).shape()
            )));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("timestep must be ≥ 1".into()));
        }
        let d = self.d;
        let temb = tape.constant(nn::timestep_embed(t, d)?.reshaped(&[1, d])?);
        let temb = nn::linear(tape, params, "tau.temb.fc1", temb)?;
        let temb = tape.silu(temb)?;
        let temb = nn::linear(tape, params, "tau.temb.fc2", temb)?;
        let temb = tape.reshape(temb, &[d])?;

        let mut x = nn::linear(tape, params, "tau.embed", c_probs)?;
        let pos = params.node(tape, "tau.pos")?;
        x = tape.add(x, pos)?;
        x = tape.add_vec(x, temb, 1)?;
        for blk in 0..2 {
            x = nn::self_attention_block(tape, params, &format!("tau.blk{blk}"), x)?;
            x = nn::cross_attention(tape, params, &format!("tau.blk{blk}.cross"), x, i_cond)?;
        }
        x = nn::layer_norm_rows(tape, params, "tau.out_ln", x)?;
        Ok(nn::linear(tape, params, "tau.head", x)?)
    }

    /// Full decode to a clean-character prediction: softmaxed rows, with each
    /// position's confidence set to its top probability.
    pub fn decode(
        &self,
        store: &ParamStore,
        c_t: &CharState,
        i_cond: &Tensor,
        t: usize,
    ) -> Result<CharState> {
        let mut tape = Tape::new();
        let mut params = autograd::StoreParams::new(store);
        let probs = tape.constant(c_t.probs().clone());
        let cond = tape.constant(i_cond.clone());
        let logits = self.logits(&mut tape, &mut params, probs, cond, t)?;
        let soft = tape.softmax(logits, 1)?;
        let rows = tape.value(soft).clone();
        let conf: Vec<f64> = rows
            .data()
            .chunks(self.k)
            .map(|row| row.iter().cloned().fold(0.0, f64::max))
            .collect();
        CharState::new(rows, conf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use autograd::{FixedParams, GradCheck, StoreParams};
    use std::collections::BTreeMap;

    fn unet_cfg(levels: usize) -> DenoiserConfig {
        DenoiserConfig {
            base: 8,
            levels,
            attn_threshold: 8,
            d: 16,
            k: 6,
            m: 3,
            latent_channels: 4,
            latent_h: 8,
            latent_w: 16,
        }
    }

    fn ready_unet(cfg: DenoiserConfig, seed: u64) -> (Unet, ParamStore) {
        let unet = Unet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        unet.init_params(&mut store, &mut stream(seed, 0, 0, "unet-init")).unwrap();
        (unet, store)
    }

    fn run_unet(unet: &Unet, store: &ParamStore, z_t: &Tensor, z_y: &Tensor, t: usize, c: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut params = StoreParams::new(store);
        let zt = tape.constant(z_t.clone());
        let zy = tape.constant(z_y.clone());
        let cc = tape.constant(c.clone());
        let out = unet.forward(&mut tape, &mut params, zt, zy, t, cc).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn output_shape_matches_input_latent_at_one_and_two_levels() {
        for levels in [1, 2] {
            let (unet, store) = ready_unet(unet_cfg(levels), 21);
            let mut rng = stream(21, levels as u64, 0, "unet-data");
            let z_t = Tensor::randn(&[4, 8, 16], &mut rng);
            let z_y = Tensor::randn(&[4, 8, 16], &mut rng);
            let c = Tensor::randn(&[3, 16], &mut rng);
            let out = run_unet(&unet, &store, &z_t, &z_y, 5, &c);
            assert_eq!(out.shape(), &[4, 8, 16], "levels = {levels}");
            assert!(out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fresh_denoiser_ignores_text_until_projections_move() {
        let (unet, mut store) = ready_unet(unet_cfg(2), 22);
        let mut rng = stream(22, 1, 0, "unet-data");
        let z_t = Tensor::randn(&[4, 8, 16], &mut rng);
        let z_y = Tensor::randn(&[4, 8, 16], &mut rng);
        let c_a = Tensor::randn(&[3, 16], &mut rng);
        let c_b = Tensor::randn(&[3, 16], &mut rng);

        let out_a = run_unet(&unet, &store, &z_t, &z_y, 3, &c_a);
        let out_b = run_unet(&unet, &store, &z_t, &z_y, 3, &c_b);
        assert_eq!(out_a.data(), out_b.data(), "zero-initialized cross-attention leaked text");

        // Nudge one cross-attention output projection: conditioning turns on.
        let name = "unet.mid.cross.o.w";
        let shape = store.get(name).unwrap().value.shape().to_vec();
        store
            .set_value(name, Tensor::randn(&shape, &mut rng).map(|v| 0.05 * v))
            .unwrap();
        let out_a2 = run_unet(&unet, &store, &z_t, &z_y, 3, &c_a);
        let out_b2 = run_unet(&unet, &store, &z_t, &z_y, 3, &c_b);
        assert_ne!(out_a2.data(), out_b2.data(), "text conditioning is dead");
    }

    #[test]
    fn timestep_changes_the_prediction() {
        let (unet, store) = ready_unet(unet_cfg(2), 23);
        let mut rng = stream(23, 1, 0, "unet-data");
        let z_t = Tensor::randn(&[4, 8, 16], &mut rng);
        let z_y = Tensor::randn(&[4, 8, 16], &mut rng);
        let c = Tensor::randn(&[3, 16], &mut rng);
        let o1 = run_unet(&unet, &store, &z_t, &z_y, 1, &c);
        let o9 = run_unet(&unet, &store, &z_t, &z_y, 9, &c);
        assert_ne!(o1.data(), o9.data());
    }

    #[test]
    fn rejects_bad_shapes_and_configs() {
        let (unet, store) = ready_unet(unet_cfg(2), 24);
        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let good = tape.constant(Tensor::zeros(&[4, 8, 16]));
        let bad = tape.constant(Tensor::zeros(&[4, 8, 8]));
        let c = tape.constant(Tensor::zeros(&[3, 16]));
        assert!(unet.forward(&mut tape, &mut params, good, bad, 1, c).is_err());
        let narrow = tape.constant(Tensor::zeros(&[3, 8]));
        assert!(unet.forward(&mut tape, &mut params, good, good, 1, narrow).is_err());
        assert!(unet.forward(&mut tape, &mut params, good, good, 0, c).is_err());

        assert!(Unet::new(DenoiserConfig { levels: 5, ..unet_cfg(1) }).is_err());
        assert!(Unet::new(DenoiserConfig { d: 9, ..unet_cfg(1) }).is_err());
        assert!(TextDecoder::new(16, 1, 3).is_err());
    }

    #[test]
    fn one_level_denoiser_gradchecks() {
        let cfg = DenoiserConfig {
            base: 8,
            levels: 1,
            attn_threshold: 16,
            d: 8,
            k: 4,
            m: 2,
            latent_channels: 2,
            latent_h: 4,
            latent_w: 4,
        };
        let (unet, store) = ready_unet(cfg, 25);
        let mut rng = stream(25, 1, 0, "unet-data");
        let z_t = Tensor::randn(&[2, 4, 4], &mut rng);
        let z_y = Tensor::randn(&[2, 4, 4], &mut rng);
        let c = Tensor::randn(&[2, 8], &mut rng);
        let stem_w = store.get("unet.stem.w").unwrap().value.clone();
        let out_w = store.get("unet.out.conv.w").unwrap().value.clone();

        let report = GradCheck::default()
            .check("denoiser", &[z_t, z_y, c, stem_w, out_w], |tape, inputs| {
                let mut map = BTreeMap::new();
                for (name, p) in store.iter() {
                    if name == "unet.stem.w" {
                        map.insert(name.clone(), inputs[3]);
                    } else if name == "unet.out.conv.w" {
                        map.insert(name.clone(), inputs[4]);
                    } else {
                        map.insert(name.clone(), tape.constant(p.value.clone()));
                    }
                }
                let mut fp = FixedParams { map };
                let out = unet
                    .forward(tape, &mut fp, inputs[0], inputs[1], 2, inputs[2])
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))?;
                let sq = tape.mul(out, out)?;
                tape.mean(sq)
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn decoder_rows_are_probabilities_with_top_prob_confidence() {
        let tau = TextDecoder::new(16, 6, 3).unwrap();
        let mut store = ParamStore::new();
        tau.init_params(&mut store, &mut stream(26, 0, 0, "tau-init")).unwrap();
        let c_t = CharState::one_hot(&[1, 4], 6, 3).unwrap();
        let mut rng = stream(26, 1, 0, "tau-data");
        let i_cond = Tensor::randn(&[3, 16], &mut rng);

        let pred = tau.decode(&store, &c_t, &i_cond, 4).unwrap();
        assert_eq!(pred.m(), 3);
        assert_eq!(pred.k(), 6);
        for i in 0..3 {
            let row = pred.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let top = row.iter().cloned().fold(0.0, f64::max);
            assert!((pred.conf()[i] - top).abs() < 1e-12);
        }
        // Same inputs twice → bit-identical rows.
        let again = tau.decode(&store, &c_t, &i_cond, 4).unwrap();
        assert_eq!(pred.probs().data(), again.probs().data());
    }

    #[test]
    fn decoder_is_equivariant_to_joint_position_permutation() {
        let tau = TextDecoder::new(16, 5, 4).unwrap();
        let mut store = ParamStore::new();
        tau.init_params(&mut store, &mut stream(27, 0, 0, "tau-init")).unwrap();
        // Give the cross blocks live output projections so i_cond matters.
        for blk in 0..2 {
            let name = format!("tau.blk{blk}.cross.o.w");
            let shape = store.get(&name).unwrap().value.shape().to_vec();
            store
                .set_value(&name, Tensor::randn(&shape, &mut stream(27, 2, blk as u64, "tau-o")).map(|v| 0.1 * v))
                .unwrap();
        }
        let mut rng = stream(27, 1, 0, "tau-data");
        let c_t = CharState::one_hot(&[1, 4, 0, 2], 5, 4).unwrap();
        let i_cond = Tensor::randn(&[4, 16], &mut rng);

        let base = tau.decode(&store, &c_t, &i_cond, 3).unwrap();

        // Permutation (reverse order), applied to inputs and to the learned
        // positional table.
        let perm = [3usize, 2, 1, 0];
        let permute_rows = |t: &Tensor, width: usize| {
            let mut data = vec![0.0; t.numel()];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * width..(dst + 1) * width]
                    .copy_from_slice(&t.data()[src * width..(src + 1) * width]);
            }
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let c_perm = CharState::new(
            permute_rows(c_t.probs(), 5),
            perm.iter().map(|&i| c_t.conf()[i]).collect(),
        )
        .unwrap();
        let i_perm = permute_rows(&i_cond, 16);
        let pos = store.get("tau.pos").unwrap().value.clone();
        store.set_value("tau.pos", permute_rows(&pos, 16)).unwrap();

        let permuted = tau.decode(&store, &c_perm, &i_perm, 3).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..5 {
                let a = permuted.row(dst)[j];
                let b = base.row(src)[j];
                assert!(
                    (a - b).abs() < 1e-9,
                    "row {dst} (source {src}) differs: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn decoder_cross_entropy_gradchecks() {
        let tau = TextDecoder::new(8, 4, 2).unwrap();
        let mut store = ParamStore::new();
        tau.init_params(&mut store, &mut stream(28, 0, 0, "tau-init")).unwrap();
        let mut rng = stream(28, 1, 0, "tau-data");
        let c_probs = Tensor::new(
            vec![2, 4],
            vec![0.7, 0.1, 0.1, 0.1, 0.05, 0.05, 0.8, 0.1],
        )
        .unwrap();
        let i_cond = Tensor::randn(&[2, 8], &mut rng);
        let embed_w = store.get("tau.embed.w").unwrap().value.clone();
        let head_w = store.get("tau.head.w").unwrap().value.clone();
        let targets = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();

        let report = GradCheck::default()
            .check("text_decoder_ce", &[c_probs, i_cond, embed_w, head_w], |tape, inputs| {
                let mut map = BTreeMap::new();
                for (name, p) in store.iter() {
                    if name == "tau.embed.w" {
                        map.insert(name.clone(), inputs[2]);
                    } else if name == "tau.head.w" {
                        map.insert(name.clone(), inputs[3]);
                    } else {
                        map.insert(name.clone(), tape.constant(p.value.clone()));
                    }
                }
                let mut fp = FixedParams { map };
                let logits = tau
                    .logits(tape, &mut fp, inputs[0], inputs[1], 2)
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))?;
                let t = tape.constant(targets.clone());
                nn::cross_entropy_rows(tape, logits, t)
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }
}
