//! Multimodal mixer that fuses the degraded-image latent, the current
//! diffusion latent, and confidence-weighted character features into two
//! conditioning streams: `i_cond` feeds the text decoder, `c_cond` supplies
//! cross-attention keys/values to the image denoiser.
//!
//! The two latents are channel-concatenated and folded into tokens by a 2×2
//! patch convolution; text rows pass through a per-position linear embedding.
//! Both token groups get learned positional offsets plus a shared timestep
//! embedding, then mix in a joint two-block transformer. The text-position
//! rows of the mixed sequence, read out through two separate linear heads,
//! form the bundle. Because the text embedding is linear in its input,
//! characters whose confidence has been scaled to zero are indistinguishable
//! from absent text — conditioning fades continuously with confidence.
//!
//! Parameters live under the "mom." prefix in the shared store.

use autograd::{NodeId, ParamNodes, ParamStore, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;

/// Checkpoint prefix for every mixer parameter.
pub const MOM_PREFIX: &str = "mom.";

/// Static geometry of the mixer: embedding width, alphabet size, text length,
/// and the latent grid it will consume.
#[derive(Debug, Clone, PartialEq)]
pub struct MomConfig {
    /// Embedding width shared by both output streams.
    pub d: usize,
    /// Alphabet size of the incoming text features.
    pub k: usize,
    /// Number of text positions.
    pub m: usize,
    /// Channels of each input latent (the codec's packed depth).
    pub latent_channels: usize,
    /// Latent grid height.
    pub latent_h: usize,
    /// Latent grid width.
    pub latent_w: usize,
}

impl MomConfig {
    /// Number of image tokens after 2×2 patching.
    pub fn image_tokens(&self) -> usize {
        (self.latent_h / 2) * (self.latent_w / 2)
    }
}

/// The two conditioning streams produced by one mixer pass, as live tape
/// nodes: `i_cond` (text-decoder side) and `c_cond` (denoiser side), both
/// [m, d].
#[derive(Debug, Clone, Copy)]
pub struct CondBundle {
    /// Conditioning sequence consumed by the text decoder.
    pub i_cond: NodeId,
    /// Cross-attention key/value sequence consumed by the image denoiser.
    pub c_cond: NodeId,
}

/// Two-block transformer mixer over patched latent tokens and embedded text.
#[derive(Debug, Clone)]
pub struct MomLite {
    cfg: MomConfig,
}

impl MomLite {
    /// Validates the geometry: even embedding width, 2×2-patchable latent
    /// grid, at least two symbols and one text position.
    pub fn new(cfg: MomConfig) -> Result<Self> {
        if cfg.d < 2 || cfg.d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "mixer width must be even and ≥ 2, got {}",
                cfg.d
            )));
        }
        if cfg.k < 2 {
            return Err(Error::InvalidArgument(format!(
                "mixer needs an alphabet of ≥ 2 symbols, got {}",
                cfg.k
            )));
        }
        if cfg.m == 0 {
            return Err(Error::InvalidArgument("mixer needs ≥ 1 text position".into()));
        }
        if cfg.latent_channels == 0 {
            return Err(Error::InvalidArgument("latent channels must be positive".into()));
        }
        if cfg.latent_h == 0 || cfg.latent_w == 0 || cfg.latent_h % 2 != 0 || cfg.latent_w % 2 != 0
        {
            return Err(Error::InvalidArgument(format!(
                "latent grid {}×{} is not 2×2-patchable",
                cfg.latent_h, cfg.latent_w
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &MomConfig {
        &self.cfg
    }

    /// Registers all mixer parameters (trainable) under "mom.".
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.cfg.d;
        nn::init_conv(
            store,
            "mom.patch",
            nn::kaiming_conv(d, 2 * self.cfg.latent_channels, 2, 2, rng),
            true,
        )?;
        nn::init_linear(store, "mom.text", nn::xavier_linear(self.cfg.k, d, rng), true)?;
        let pos_img = Tensor::randn(&[self.cfg.image_tokens(), d], rng).map(|v| 0.02 * v);
        store.insert("mom.pos_img", pos_img, true)?;
        let pos_txt = Tensor::randn(&[self.cfg.m, d], rng).map(|v| 0.02 * v);
        store.insert("mom.pos_txt", pos_txt, true)?;
        nn::init_linear(store, "mom.temb.fc1", nn::kaiming_linear(d, d, rng), true)?;
        nn::init_linear(store, "mom.temb.fc2", nn::xavier_linear(d, d, rng), true)?;
        for blk in 0..2 {
            nn::init_self_attention_block(store, &format!("mom.blk{blk}"), d, rng, true)?;
        }
        nn::init_norm_affine(store, "mom.out_ln", d, true)?;
        nn::init_linear(store, "mom.head_i", nn::xavier_linear(d, d, rng), true)?;
        nn::init_linear(store, "mom.head_c", nn::xavier_linear(d, d, rng), true)?;
        Ok(())
    }

    /// One mixer pass. `z_y` and `z_t` are [C, H, W] latents on the tape,
    /// `text_feat` is the [m, K] confidence-scaled character matrix, `t` the
    /// current timestep (≥ 1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut dyn ParamNodes,
        z_y: NodeId,
        z_t: NodeId,
        text_feat: NodeId,
        t: usize,
    ) -> Result<CondBundle> {
        let want = [self.cfg.latent_channels, self.cfg.latent_h, self.cfg.latent_w];
        if tape.value(z_y).shape() != want || tape.value(z_t).shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "mixer wants two {want:?} latents, got {:?} and {:?}",
                tape.value(z_y).shape(),
                tape.value(z_t).shape()
            )));
        }
        if tape.value(text_feat).shape() != [self.cfg.m, self.cfg.k] {
            return Err(Error::ShapeMismatch(format!(
                "mixer wants [{}, {}] text features, got {:?}",
                self.cfg.m,
                self.cfg.k,
                tape.value(text_feat).shape()
            )));
        }
        if t == 0 {
            return Err(Error::InvalidArgument("timestep must be ≥ 1".into()));
        }
        let d = self.cfg.d;
        let n_img = self.cfg.image_tokens();

        // Shared timestep code: sinusoid → 2-layer MLP → one [d] vector.
        let temb = tape.constant(nn::timestep_embed(t, d)?.reshaped(&[1, d])?);
        let temb = nn::linear(tape, params, "mom.temb.fc1", temb)?;
        let temb = tape.silu(temb)?;
        let temb = nn::linear(tape, params, "mom.temb.fc2", temb)?;
        let temb = tape.reshape(temb, &[d])?;

        // Image side: concat channels, patchify, flatten to [n_img, d] tokens.
        let stacked = tape.concat(0, &[z_y, z_t])?;
        let patched = nn::conv(tape, params, "mom.patch", stacked, (2, 2), (0, 0))?;
        let tokens = tape.reshape(patched, &[d, n_img])?;
        let tokens = tape.transpose(tokens)?;
        let pos_img = params.node(tape, "mom.pos_img")?;
        let tokens = tape.add(tokens, pos_img)?;
        let img_tokens = tape.add_vec(tokens, temb, 1)?;

        // Text side: linear K→d embedding per position.
        let embedded = nn::linear(tape, params, "mom.text", text_feat)?;
        let pos_txt = params.node(tape, "mom.pos_txt")?;
        let embedded = tape.add(embedded, pos_txt)?;
        let txt_tokens = tape.add_vec(embedded, temb, 1)?;

        // Joint mixing, then read the text-position rows back out.
        let mut joint = tape.concat(0, &[img_tokens, txt_tokens])?;
        for blk in 0..2 {
            joint = nn::self_attention_block(tape, params, &format!("mom.blk{blk}"), joint)?;
        }
        let rows = tape.slice0(joint, n_img, self.cfg.m)?;
        let rows = nn::layer_norm_rows(tape, params, "mom.out_ln", rows)?;
        let i_cond = nn::linear(tape, params, "mom.head_i", rows)?;
        let c_cond = nn::linear(tape, params, "mom.head_c", rows)?;
        Ok(CondBundle { i_cond, c_cond })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::text_diffusion::{apply_confidence, CharState};
    use autograd::{FixedParams, GradCheck, StoreParams};
    use std::collections::BTreeMap;

    fn small_cfg() -> MomConfig {
        MomConfig { d: 16, k: 6, m: 3, latent_channels: 4, latent_h: 4, latent_w: 4 }
    }

    fn ready(cfg: &MomConfig, seed: u64) -> (MomLite, ParamStore) {
        let mom = MomLite::new(cfg.clone()).unwrap();
        let mut store = ParamStore::new();
        mom.init_params(&mut store, &mut stream(seed, 0, 0, "mom-init")).unwrap();
        (mom, store)
    }

    fn run(
        mom: &MomLite,
        store: &ParamStore,
        z_y: &Tensor,
        z_t: &Tensor,
        text: &Tensor,
        t: usize,
    ) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut params = StoreParams::new(store);
        let zy = tape.constant(z_y.clone());
        let zt = tape.constant(z_t.clone());
        let tf = tape.constant(text.clone());
        let bundle = mom.forward(&mut tape, &mut params, zy, zt, tf, t).unwrap();
        (tape.value(bundle.i_cond).clone(), tape.value(bundle.c_cond).clone())
    }

    #[test]
    fn output_shapes_follow_config_and_runs_are_bit_identical() {
        let cfg = small_cfg();
        let (mom, store) = ready(&cfg, 11);
        let mut rng = stream(11, 1, 0, "mom-data");
        let z_y = Tensor::randn(&[4, 4, 4], &mut rng);
        let z_t = Tensor::randn(&[4, 4, 4], &mut rng);
        let text = CharState::one_hot(&[1, 4], 6, 3).unwrap();
        let feat = apply_confidence(&text);

        let (i1, c1) = run(&mom, &store, &z_y, &z_t, &feat, 5);
        let (i2, c2) = run(&mom, &store, &z_y, &z_t, &feat, 5);
        assert_eq!(i1.shape(), &[3, 16]);
        assert_eq!(c1.shape(), &[3, 16]);
        assert!(i1.data().iter().chain(c1.data()).all(|v| v.is_finite()));
        assert_eq!(i1.data(), i2.data(), "two passes over the same inputs diverged");
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn zero_confidence_text_is_indistinguishable_from_no_text() {
        let cfg = small_cfg();
        let (mom, store) = ready(&cfg, 12);
        let mut rng = stream(12, 1, 0, "mom-data");
        let z_y = Tensor::randn(&[4, 4, 4], &mut rng);
        let z_t = Tensor::randn(&[4, 4, 4], &mut rng);

        let silenced_a = apply_confidence(
            &CharState::one_hot(&[0, 2], 6, 3).unwrap().with_conf(vec![0.0; 3]).unwrap(),
        );
        let silenced_b = apply_confidence(
            &CharState::one_hot(&[5, 1], 6, 3).unwrap().with_conf(vec![0.0; 3]).unwrap(),
        );
        let no_text = Tensor::zeros(&[3, 6]);

        let (ia, ca) = run(&mom, &store, &z_y, &z_t, &silenced_a, 3);
        let (ib, cb) = run(&mom, &store, &z_y, &z_t, &silenced_b, 3);
        let (i0, c0) = run(&mom, &store, &z_y, &z_t, &no_text, 3);
        assert_eq!(ca.data(), c0.data(), "suppressed text leaked into c_cond");
        assert_eq!(cb.data(), c0.data());
        assert_eq!(ia.data(), i0.data());
        assert_eq!(ib.data(), i0.data());
    }

    #[test]
    fn confidence_level_moves_the_conditioning() {
        let cfg = small_cfg();
        let (mom, store) = ready(&cfg, 13);
        let mut rng = stream(13, 1, 0, "mom-data");
        let z_y = Tensor::randn(&[4, 4, 4], &mut rng);
        let z_t = Tensor::randn(&[4, 4, 4], &mut rng);
        let text = CharState::one_hot(&[1, 4], 6, 3).unwrap();

        let full = apply_confidence(&text);
        let half = apply_confidence(&text.with_conf(vec![0.5, 0.5, 0.5]).unwrap());
        let (_, c_full) = run(&mom, &store, &z_y, &z_t, &full, 3);
        let (_, c_half) = run(&mom, &store, &z_y, &z_t, &half, 3);
        let delta: f64 = c_full
            .data()
            .iter()
            .zip(c_half.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 1e-8, "halving confidence left c_cond unchanged (Δ = {delta})");
    }

    #[test]
    fn timestep_enters_both_streams() {
        let cfg = small_cfg();
        let (mom, store) = ready(&cfg, 14);
        let mut rng = stream(14, 1, 0, "mom-data");
        let z_y = Tensor::randn(&[4, 4, 4], &mut rng);
        let z_t = Tensor::randn(&[4, 4, 4], &mut rng);
        let feat = apply_confidence(&CharState::one_hot(&[1, 4], 6, 3).unwrap());
        let (i1, c1) = run(&mom, &store, &z_y, &z_t, &feat, 1);
        let (i9, c9) = run(&mom, &store, &z_y, &z_t, &feat, 9);
        assert_ne!(i1.data(), i9.data());
        assert_ne!(c1.data(), c9.data());
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let cfg = small_cfg();
        let (mom, store) = ready(&cfg, 15);
        let mut rng = stream(15, 1, 0, "mom-data");
        let good = Tensor::randn(&[4, 4, 4], &mut rng);
        let bad = Tensor::randn(&[4, 2, 4], &mut rng);
        let feat = apply_confidence(&CharState::one_hot(&[1, 4], 6, 3).unwrap());

        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let g = tape.constant(good.clone());
        let b = tape.constant(bad);
        let f = tape.constant(feat.clone());
        assert!(mom.forward(&mut tape, &mut params, g, b, f, 1).is_err());
        let wide = tape.constant(Tensor::zeros(&[3, 7]));
        assert!(mom.forward(&mut tape, &mut params, g, g, wide, 1).is_err());
        assert!(mom.forward(&mut tape, &mut params, g, g, f, 0).is_err());

        assert!(MomLite::new(MomConfig { latent_h: 3, ..small_cfg() }).is_err());
        assert!(MomLite::new(MomConfig { d: 7, ..small_cfg() }).is_err());
    }

    #[test]
    fn gradients_reach_latents_text_and_parameters() {
        let cfg = MomConfig { d: 8, k: 4, m: 2, latent_channels: 2, latent_h: 2, latent_w: 2 };
        let (mom, store) = ready(&cfg, 16);
        let mut rng = stream(16, 1, 0, "mom-data");
        let z_y = Tensor::randn(&[2, 2, 2], &mut rng);
        let z_t = Tensor::randn(&[2, 2, 2], &mut rng);
        let feat = apply_confidence(
            &CharState::one_hot(&[1, 3], 4, 2).unwrap().with_conf(vec![0.9, 0.7]).unwrap(),
        );
        let text_w = store.get("mom.text.w").unwrap().value.clone();
        let patch_w = store.get("mom.patch.w").unwrap().value.clone();

        let report = GradCheck::default()
            .check("mixer", &[z_y, z_t, feat, text_w, patch_w], |tape, inputs| {
                let mut map = BTreeMap::new();
                for (name, p) in store.iter() {
                    if name == "mom.text.w" {
                        map.insert(name.clone(), inputs[3]);
                    } else if name == "mom.patch.w" {
                        map.insert(name.clone(), inputs[4]);
                    } else {
                        map.insert(name.clone(), tape.constant(p.value.clone()));
                    }
                }
                let mut fp = FixedParams { map };
                let bundle = mom
                    .forward(tape, &mut fp, inputs[0], inputs[1], inputs[2], 2)
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))?;
                // Asymmetric readout so no gradient direction cancels.
                let ci = tape.mean(bundle.i_cond)?;
                let cc = bundle.c_cond;
                let sq = tape.mul(cc, cc)?;
                let cc = tape.mean(sq)?;
                let both = tape.add(ci, cc)?;
                Ok(both)
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }
}
