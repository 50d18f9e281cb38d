//! The categorical (multinomial) diffusion over character sequences.
//!
//! States are length-m sequences of K-dimensional probability rows plus a
//! per-position confidence vector. The forward kernel mixes each one-hot
//! toward the uniform distribution; the reverse uses the standard
//! multinomial-diffusion posterior with the model prediction c_pred standing
//! in for c_0:
//!
//! π̃ ∝ [α_t·c_t + (1−α_t)/K] ⊙ [ᾱ_{t−1}·c_pred + (1−ᾱ_{t−1})/K]
//!
//! All sampling is inverse-CDF on caller-supplied uniforms, so every function
//! here is pure.

use autograd::Tensor;

use crate::error::{Error, Result};
use crate::schedules::TextSchedule;

/// Length-m sequence of K-dim probability (or one-hot) rows with a
/// per-position confidence vector in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CharState {
    /// m×K; each row sums to 1 (before any confidence scaling).
    probs: Tensor,
    /// Per-position confidence ᾱ ∈ [0,1]^m (distinct from the schedule's ᾱ_t).
    conf: Vec<f64>,
}

impl CharState {
    pub fn new(probs: Tensor, conf: Vec<f64>) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "char state wants [m, K], got {:?}",
                probs.shape()
            )));
        }
        let (m, k) = (probs.shape()[0], probs.shape()[1]);
        if m == 0 || k < 2 {
            return Err(Error::InvalidArgument(format!("need m >= 1 and K >= 2, got {m}x{k}")));
        }
        if conf.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "confidence length {} != sequence length {m}",
                conf.len()
            )));
        }
        for (i, row) in probs.data().chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!("row {i} has invalid entries")));
            }
        }
        if conf.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidArgument("confidence entries must lie in [0, 1]".into()));
        }
        Ok(Self { probs, conf })
    }

    /// One-hot state for `indices`, padded with `blank` (index K−1) up to
    /// `pad_to` positions; real positions get confidence 1, padding 0.
    pub fn one_hot(indices: &[usize], k: usize, pad_to: usize) -> Result<Self> {
        let m = pad_to.max(indices.len());
        if indices.is_empty() && m == 0 {
            return Err(Error::InvalidArgument("empty text".into()));
        }
        let mut probs = vec![0.0; m * k];
        let mut conf = vec![0.0; m];
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= k {
                return Err(Error::InvalidArgument(format!("symbol {idx} outside alphabet {k}")));
            }
            probs[i * k + idx] = 1.0;
            conf[i] = 1.0;
        }
        for i in indices.len()..m {
            probs[i * k + (k - 1)] = 1.0; // reserved blank
        }
        Ok(Self { probs: Tensor::new(vec![m, k], probs)?, conf })
    }

    pub fn m(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn conf(&self) -> &[f64] {
        &self.conf
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs.data()[i * self.k()..(i + 1) * self.k()]
    }

    /// Replaces the confidence vector (length must match).
    pub fn with_conf(mut self, conf: Vec<f64>) -> Result<Self> {
        if conf.len() != self.m() {
            return Err(Error::ShapeMismatch(format!(
                "confidence length {} != sequence length {}",
                conf.len(),
                self.m()
            )));
        }
        if conf.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidArgument("confidence entries must lie in [0, 1]".into()));
        }
        self.conf = conf;
        Ok(self)
    }

    /// Per-position argmax indices.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.m())
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                    .expect("non-empty row")
                    .0
            })
            .collect()
    }

    /// True when every row is exactly one-hot.
    pub fn is_one_hot(&self) -> bool {
        (0..self.m()).all(|i| {
            self.row(i).iter().filter(|&&p| p == 1.0).count() == 1
                && self.row(i).iter().all(|&p| p == 0.0 || p == 1.0)
        })
    }
}

fn check_t(t: usize, lo: usize, ts: &TextSchedule) -> Result<()> {
    if t < lo || t > ts.t_total() {
        return Err(Error::InvalidArgument(format!("step {t} outside [{lo}, {}]", ts.t_total())));
    }
    Ok(())
}

fn check_k(c: &CharState, ts: &TextSchedule) -> Result<()> {
    if c.k() != ts.k() {
        return Err(Error::ShapeMismatch(format!(
            "state has K={}, schedule has K={}",
            c.k(),
            ts.k()
        )));
    }
    Ok(())
}

/// Inverse-CDF draw from a non-negative weight row (renormalized by its sum).
fn sample_row(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.len() - 1 // u at (or rounding past) the top of the CDF
}

/// Forward corruption: each position sampled from
/// `ᾱ_t·c_0 + (1−ᾱ_t)/K` via inverse-CDF on `draws` (one uniform per
/// position). Requires one-hot input rows; the confidence vector is carried
/// through unchanged.
pub fn text_forward_sample(
    c0: &CharState,
    t: usize,
    ts: &TextSchedule,
    draws: &[f64],
) -> Result<CharState> {
    check_t(t, 1, ts)?;
    check_k(c0, ts)?;
    if !c0.is_one_hot() {
        return Err(Error::InvalidArgument("forward corruption wants one-hot rows".into()));
    }
    if draws.len() != c0.m() {
        return Err(Error::InvalidArgument(format!(
            "need {} uniforms, got {}",
            c0.m(),
            draws.len()
        )));
    }
    let (m, k) = (c0.m(), c0.k());
    let abar = ts.alphabar(t);
    let base = (1.0 - abar) / k as f64;
    let mut probs = vec![0.0; m * k];
    for i in 0..m {
        let row: Vec<f64> = c0.row(i).iter().map(|&p| abar * p + base).collect();
        let idx = sample_row(&row, draws[i]);
        probs[i * k + idx] = 1.0;
    }
    CharState::new(Tensor::new(vec![m, k], probs)?, c0.conf().to_vec())
}

/// Reverse posterior for t ∈ [2, T]:
/// `π̃ = [α_t·c_t + (1−α_t)/K] ⊙ [ᾱ_{t−1}·c_pred + (1−ᾱ_{t−1})/K]`,
/// returned row-normalized. Confidence is carried from `c_t`.
pub fn text_posterior(
    c_t: &CharState,
    c_pred: &CharState,
    t: usize,
    ts: &TextSchedule,
) -> Result<CharState> {
    check_t(t, 2, ts)?;
    check_k(c_t, ts)?;
    check_k(c_pred, ts)?;
    if c_t.m() != c_pred.m() {
        return Err(Error::ShapeMismatch(format!(
            "state lengths differ: {} vs {}",
            c_t.m(),
            c_pred.m()
        )));
    }
    let (m, k) = (c_t.m(), c_t.k());
    let a = ts.alpha(t);
    let abar_prev = ts.alphabar(t - 1);
    let (base_a, base_b) = ((1.0 - a) / k as f64, (1.0 - abar_prev) / k as f64);
    let mut probs = vec![0.0; m * k];
    for i in 0..m {
        let row = &mut probs[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (j, slot) in row.iter_mut().enumerate() {
            let left = a * c_t.row(i)[j] + base_a;
            let right = abar_prev * c_pred.row(i)[j] + base_b;
            *slot = left * right;
            sum += *slot;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "posterior row {i} has zero mass (degenerate schedule)"
            )));
        }
        for slot in row.iter_mut() {
            *slot /= sum;
        }
    }
    CharState::new(Tensor::new(vec![m, k], probs)?, c_t.conf().to_vec())
}

/// Final step (t = 1): sample each position directly from `c_pred`.
pub fn text_final_sample(c_pred: &CharState, draws: &[f64]) -> Result<CharState> {
    if draws.len() != c_pred.m() {
        return Err(Error::InvalidArgument(format!(
            "need {} uniforms, got {}",
            c_pred.m(),
            draws.len()
        )));
    }
    let (m, k) = (c_pred.m(), c_pred.k());
    let mut probs = vec![0.0; m * k];
    for i in 0..m {
        let idx = sample_row(c_pred.row(i), draws[i]);
        probs[i * k + idx] = 1.0;
    }
    CharState::new(Tensor::new(vec![m, k], probs)?, c_pred.conf().to_vec())
}

/// Degenerate sampling: per-position argmax as a one-hot state (the
/// `--argmax-text` path).
pub fn text_argmax(c: &CharState) -> CharState {
    let (m, k) = (c.m(), c.k());
    let mut probs = vec![0.0; m * k];
    for (i, idx) in c.argmax().into_iter().enumerate() {
        probs[i * k + idx] = 1.0;
    }
    CharState::new(Tensor::new(vec![m, k], probs).expect("shape"), c.conf().to_vec())
        .expect("one-hot rows")
}

/// Confidence-scaled text features: row i of the output is `conf_i · probs_i`,
/// so each row sums to its confidence entry. This is the ᾱ·c_t term fed to
/// the fusion module.
pub fn apply_confidence(c: &CharState) -> Tensor {
    let (m, k) = (c.m(), c.k());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[i * k + j] = c.conf()[i] * c.row(i)[j];
        }
    }
    Tensor::new(vec![m, k], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use crate::rng::stream;
    use crate::schedules::make_text_schedule;

    fn uniforms(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 0, 0, "text-test");
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn no_corruption_when_retention_is_one() {
        // Raw schedule with ᾱ_1 = 1: c_1 = c_0 for any uniforms.
        let ts = TextSchedule::from_raw(vec![1.0, 1.0, 0.04], 4);
        let c0 = CharState::one_hot(&[2, 0, 3], 4, 3).unwrap();
        for u in [0.0, 0.31, 0.9999] {
            let ct = text_forward_sample(&c0, 1, &ts, &[u, u, u]).unwrap();
            assert_eq!(ct.probs(), c0.probs());
        }
    }

    #[test]
    fn full_corruption_is_uniform_over_k() {
        // ᾱ → 0 limit via a raw schedule: frequencies within 3σ of 1/K.
        let ts = TextSchedule::from_raw(vec![1.0, 1e-300], 4);
        let c0 = CharState::one_hot(&[1], 4, 1).unwrap();
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        let us = uniforms(n, 7);
        for &u in &us {
            counts[text_forward_sample(&c0, 1, &ts, &[u]).unwrap().argmax()[0]] += 1;
        }
        let p = 0.25;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for &c in &counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * sigma, "counts {counts:?}");
        }
    }

    #[test]
    fn binary_keep_flip_probabilities_by_enumeration() {
        // K=2, ᾱ_t = 0.5, c_0 = [1, 0]: P(keep) = 0.75, P(flip) = 0.25.
        // The inverse CDF walks [0.75, 0.25], so the boundary sits at u=0.75.
        let ts = TextSchedule::from_raw(vec![1.0, 0.5, 0.04], 2);
        let c0 = CharState::one_hot(&[0], 2, 1).unwrap();
        let keep = text_forward_sample(&c0, 1, &ts, &[0.7499999]).unwrap();
        assert_eq!(keep.argmax(), vec![0]);
        let flip = text_forward_sample(&c0, 1, &ts, &[0.7500001]).unwrap();
        assert_eq!(flip.argmax(), vec![1]);
    }

    #[test]
    fn posterior_matches_brute_force_recomputation() {
        let ts = make_text_schedule(6, 5, 0.02).unwrap();
        let mut rng = stream(11, 0, 0, "post");
        for t in 2..=6 {
            // Random c_t one-hot, random c_pred probability rows.
            let ct = CharState::one_hot(&[rng.gen_range(0..5), rng.gen_range(0..5)], 5, 2).unwrap();
            let mut pred = vec![0.0; 10];
            for row in pred.chunks_mut(5) {
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen::<f64>() + 1e-3;
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            let c_pred = CharState::new(Tensor::new(vec![2, 5], pred.clone()).unwrap(),
                                        vec![1.0, 1.0]).unwrap();
            let post = text_posterior(&ct, &c_pred, t, &ts).unwrap();

            // Independent recomputation, accumulated in a different order
            // (mul_add per factor instead of separate products).
            let (a, abar) = (ts.alpha(t), ts.alphabar(t - 1));
            for i in 0..2 {
                let mut tilde = [0.0f64; 5];
                for j in 0..5 {
                    let left = ct.row(i)[j].mul_add(a, (1.0 - a) / 5.0);
                    let right = c_pred.row(i)[j].mul_add(abar, (1.0 - abar) / 5.0);
                    tilde[j] = left * right;
                }
                let z: f64 = tilde.iter().sum();
                for j in 0..5 {
                    assert!((post.row(i)[j] - tilde[j] / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_matches_bayes_enumeration_for_one_hot_prediction() {
        // With one-hot c_pred acting as c_0, the posterior must equal exact
        // Bayes over the two-step kernel:
        //   q(c_{t−1}=j | c_t, c_0) ∝ q(c_t | c_{t−1}=j) · q(c_{t−1}=j | c_0).
        let ts = make_text_schedule(6, 5, 0.02).unwrap();
        let mut rng = stream(12, 0, 0, "bayes");
        for t in 2..=6 {
            let ct_idx = rng.gen_range(0..5);
            let c0_idx = rng.gen_range(0..5);
            let ct = CharState::one_hot(&[ct_idx], 5, 1).unwrap();
            let c0 = CharState::one_hot(&[c0_idx], 5, 1).unwrap();
            let post = text_posterior(&ct, &c0, t, &ts).unwrap();

            let (a, abar) = (ts.alpha(t), ts.alphabar(t - 1));
            let mut bayes = [0.0f64; 5];
            for j in 0..5 {
                let lik = if j == ct_idx { a + (1.0 - a) / 5.0 } else { (1.0 - a) / 5.0 };
                let prior = if j == c0_idx { abar + (1.0 - abar) / 5.0 } else { (1.0 - abar) / 5.0 };
                bayes[j] = lik * prior;
            }
            let z: f64 = bayes.iter().sum();
            for j in 0..5 {
                assert!(
                    (post.row(0)[j] - bayes[j] / z).abs() < 1e-12,
                    "t={t} j={j}: {} vs {}",
                    post.row(0)[j],
                    bayes[j] / z
                );
            }
        }
    }

    #[test]
    fn deterministic_prior_factor_pins_the_posterior() {
        // ᾱ_{t−1} = 1 with one-hot c_pred at j zeroes every other entry.
        let ts = TextSchedule::from_raw(vec![1.0, 1.0, 0.5, 0.04], 4);
        let ct = CharState::one_hot(&[0], 4, 1).unwrap();
        let c_pred = CharState::one_hot(&[2], 4, 1).unwrap();
        let post = text_posterior(&ct, &c_pred, 2, &ts).unwrap();
        assert_eq!(post.row(0), &[0.0, 0.0, 1.0, 0.0]);

        // α_t = 1 with c_t = c_pred one-hot at j: posterior one-hot at j.
        let ts2 = TextSchedule::from_raw(vec![1.0, 0.9, 0.9, 0.04], 4);
        assert_eq!(ts2.alpha(2), 1.0);
        let cj = CharState::one_hot(&[1], 4, 1).unwrap();
        let post = text_posterior(&cj, &cj, 2, &ts2).unwrap();
        assert_eq!(post.row(0), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_chain_composition_matches_closed_form_marginal() {
        // Multiplying per-step kernels (α_s·I + (1−α_s)/K·J) must reproduce
        // the closed-form marginal kernel ᾱ_t·I + (1−ᾱ_t)/K·J exactly.
        let ts = make_text_schedule(4, 4, 0.03).unwrap();
        let k = 4usize;
        let mut kernel = vec![0.0; k * k]; // identity
        for i in 0..k {
            kernel[i * k + i] = 1.0;
        }
        for t in 1..=4 {
            let a = ts.alpha(t);
            // step kernel S[i][j] = P(j | i)
            let mut next = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    next[i * k + j] =
                        if i == j { a + (1.0 - a) / k as f64 } else { (1.0 - a) / k as f64 };
                }
            }
            // kernel <- kernel · next
            let mut composed = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..k {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += kernel[i * k + l] * next[l * k + j];
                    }
                    composed[i * k + j] = acc;
                }
            }
            kernel = composed;

            let abar = ts.alphabar(t);
            for i in 0..k {
                for j in 0..k {
                    let expect = if i == j {
                        abar + (1.0 - abar) / k as f64
                    } else {
                        (1.0 - abar) / k as f64
                    };
                    assert!(
                        (kernel[i * k + j] - expect).abs() < 1e-10,
                        "t={t} ({i},{j}): {} vs {expect}",
                        kernel[i * k + j]
                    );
                }
            }
        }
    }

    #[test]
    fn final_sample_behaviour() {
        // One-hot prediction passes through for any draw.
        let c = CharState::one_hot(&[3, 1], 5, 2).unwrap();
        let out = text_final_sample(&c, &[0.0, 0.999]).unwrap();
        assert_eq!(out.probs(), c.probs());

        // Uniform prediction: frequencies within 3σ of 1/4 over 10^5 draws.
        let uniform =
            CharState::new(Tensor::full(&[1, 4], 0.25), vec![1.0]).unwrap();
        let mut counts = [0usize; 4];
        for &u in &uniforms(100_000, 9) {
            counts[text_final_sample(&uniform, &[u]).unwrap().argmax()[0]] += 1;
        }
        let sigma = (0.25_f64 * 0.75 / 1e5).sqrt();
        for &c in &counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 3.0 * sigma);
        }

        // Argmax mode is the degenerate version.
        let skew = CharState::new(
            Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap(),
            vec![0.4, 0.9],
        )
        .unwrap();
        let am = text_argmax(&skew);
        assert_eq!(am.argmax(), vec![1, 0]);
        assert!(am.is_one_hot());
        assert_eq!(am.conf(), skew.conf());
    }

    #[test]
    fn confidence_scaling() {
        let c = CharState::one_hot(&[0], 2, 1).unwrap().with_conf(vec![0.5]).unwrap();
        assert_eq!(apply_confidence(&c).data(), &[0.5, 0.0]);

        let mixed = CharState::new(
            Tensor::new(vec![2, 2], vec![0.25, 0.75, 1.0, 0.0]).unwrap(),
            vec![1.0, 0.0],
        )
        .unwrap();
        let feat = apply_confidence(&mixed);
        assert_eq!(feat.data(), &[0.25, 0.75, 0.0, 0.0]);
        // Row sums equal the confidence entries.
        assert_eq!(feat.data()[0] + feat.data()[1], 1.0);
        assert_eq!(feat.data()[2] + feat.data()[3], 0.0);
    }

    #[test]
    fn padding_uses_blank_with_zero_confidence() {
        let c = CharState::one_hot(&[2, 5], 8, 4).unwrap();
        assert_eq!(c.m(), 4);
        assert_eq!(c.argmax(), vec![2, 5, 7, 7]);
        assert_eq!(c.conf(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let ts = make_text_schedule(6, 5, 0.02).unwrap();
        let soft = CharState::new(Tensor::full(&[1, 5], 0.2), vec![1.0]).unwrap();
        assert!(text_forward_sample(&soft, 1, &ts, &[0.5]).is_err()); // not one-hot
        let c = CharState::one_hot(&[0], 5, 1).unwrap();
        assert!(text_forward_sample(&c, 0, &ts, &[0.5]).is_err());
        assert!(text_forward_sample(&c, 7, &ts, &[0.5]).is_err());
        assert!(text_forward_sample(&c, 1, &ts, &[]).is_err());
        assert!(text_posterior(&c, &soft, 1, &ts).is_err()); // t < 2
        let bad_rows = Tensor::full(&[1, 5], 0.3);
        assert!(CharState::new(bad_rows, vec![1.0]).is_err());
        assert!(CharState::one_hot(&[9], 5, 1).is_err());
        let k4 = CharState::one_hot(&[0], 4, 1).unwrap();
        assert!(text_posterior(&k4, &k4, 2, &ts).is_err()); // K mismatch
    }

    proptest! {
        #[test]
        fn posterior_rows_are_normalized_and_non_negative(
            seed in 0u64..1000,
            t in 2usize..=6,
            m in 1usize..5,
        ) {
            let ts = make_text_schedule(6, 5, 0.02).unwrap();
            let mut rng = stream(seed, 0, 0, "prop-post");
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let ct = CharState::one_hot(&idx, 5, m).unwrap();
            let mut pred = vec![0.0; m * 5];
            for row in pred.chunks_mut(5) {
                let mut s = 0.0;
                for v in row.iter_mut() { *v = rng.gen::<f64>() + 1e-6; s += *v; }
                for v in row.iter_mut() { *v /= s; }
            }
            let c_pred = CharState::new(Tensor::new(vec![m, 5], pred).unwrap(), vec![1.0; m]).unwrap();
            let post = text_posterior(&ct, &c_pred, t, &ts).unwrap();
            for i in 0..m {
                let sum: f64 = post.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(post.row(i).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn positional_independence_under_permutation(seed in 0u64..1000) {
            // Reversing the positions of all inputs reverses the outputs.
            let ts = make_text_schedule(6, 5, 0.02).unwrap();
            let mut rng = stream(seed, 0, 0, "prop-perm");
            let m = 4usize;
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let conf: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let ct = CharState::one_hot(&idx, 5, m).unwrap().with_conf(conf.clone()).unwrap();
            let mut pred = vec![0.0; m * 5];
            for row in pred.chunks_mut(5) {
                let mut s = 0.0;
                for v in row.iter_mut() { *v = rng.gen::<f64>() + 1e-6; s += *v; }
                for v in row.iter_mut() { *v /= s; }
            }
            let c_pred = CharState::new(Tensor::new(vec![m, 5], pred.clone()).unwrap(), vec![1.0; m]).unwrap();

            let post = text_posterior(&ct, &c_pred, 3, &ts).unwrap();

            let rev_idx: Vec<usize> = idx.iter().rev().copied().collect();
            let rev_conf: Vec<f64> = conf.iter().rev().copied().collect();
            let ct_rev = CharState::one_hot(&rev_idx, 5, m).unwrap().with_conf(rev_conf).unwrap();
            let mut pred_rev = vec![0.0; m * 5];
            for i in 0..m {
                pred_rev[i * 5..(i + 1) * 5].copy_from_slice(&pred[(m - 1 - i) * 5..(m - i) * 5]);
            }
            let c_pred_rev = CharState::new(Tensor::new(vec![m, 5], pred_rev).unwrap(), vec![1.0; m]).unwrap();
            let post_rev = text_posterior(&ct_rev, &c_pred_rev, 3, &ts).unwrap();

            for i in 0..m {
                for j in 0..5 {
                    prop_assert_eq!(post.row(i)[j], post_rev.row(m - 1 - i)[j]);
                }
            }
        }

        #[test]
        fn apply_confidence_row_sums_equal_confidence(seed in 0u64..1000) {
            let mut rng = stream(seed, 0, 0, "prop-conf");
            let m = 3usize;
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let conf: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
            let c = CharState::one_hot(&idx, 5, m).unwrap().with_conf(conf.clone()).unwrap();
            let feat = apply_confidence(&c);
            for i in 0..m {
                let sum: f64 = feat.data()[i * 5..(i + 1) * 5].iter().sum();
                // One-hot rows sum to exactly 1, so the scaled sum is exact.
                prop_assert_eq!(sum, conf[i]);
            }
        }
    }
}
