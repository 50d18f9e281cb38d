//! Shared building blocks for the differentiable networks: seeded weight
//! initializers, named linear/conv/normalization helpers that pull their
//! weights through a [`ParamNodes`] binder, pre-norm transformer blocks
//! (self-attention and zero-initialized cross-attention), the sinusoidal
//! timestep embedding, and the row-wise cross-entropy used by every text
//! loss.

use autograd::{standard_normal, NodeId, ParamNodes, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// He-scaled Gaussian conv kernel [out, in, kh, kw] (right before SiLU/ReLU
/// nonlinearities).
pub fn kaiming_conv(out_c: usize, in_c: usize, kh: usize, kw: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / (in_c * kh * kw) as f64).sqrt();
    Tensor::new(
        vec![out_c, in_c, kh, kw],
        (0..out_c * in_c * kh * kw).map(|_| std * standard_normal(rng)).collect(),
    )
    .expect("shape")
}

/// He-scaled Gaussian linear weight [in, out].
pub fn kaiming_linear(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / in_dim as f64).sqrt();
    Tensor::new(
        vec![in_dim, out_dim],
        (0..in_dim * out_dim).map(|_| std * standard_normal(rng)).collect(),
    )
    .expect("shape")
}

/// Unit-variance-preserving linear weight [in, out] (attention projections).
pub fn xavier_linear(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (1.0 / in_dim as f64).sqrt();
    Tensor::new(
        vec![in_dim, out_dim],
        (0..in_dim * out_dim).map(|_| std * standard_normal(rng)).collect(),
    )
    .expect("shape")
}

/// `x · W + b` for row-major activations x [n, in]; binds "{name}.w" [in, out]
/// and "{name}.b" [out].
pub fn linear(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = params.node(tape, &format!("{name}.w"))?;
    let b = params.node(tape, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add_vec(y, b, 1)?)
}

/// 2-D convolution plus per-channel bias; binds "{name}.w" [out, in, kh, kw]
/// and "{name}.b" [out]. Input and output are [c, h, w].
pub fn conv(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<NodeId> {
    let w = params.node(tape, &format!("{name}.w"))?;
    let b = params.node(tape, &format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    Ok(tape.add_vec(y, b, 0)?)
}

/// Group normalization over [c, h, w] with a learned per-channel affine;
/// binds "{name}.g" and "{name}.b" (both [c]).
pub fn group_norm_affine(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
    groups: usize,
) -> Result<NodeId> {
    let g = params.node(tape, &format!("{name}.g"))?;
    let b = params.node(tape, &format!("{name}.b"))?;
    let y = tape.group_norm(x, groups, 1e-5)?;
    let y = tape.mul_vec(y, g, 0)?;
    Ok(tape.add_vec(y, b, 0)?)
}

/// Layer normalization of each row of a [n, d] activation (mean 0, variance
/// 1 per row, then a learned per-column affine); binds "{name}.g"/"{name}.b"
/// (both [d]). Built on the rank-3 group normalizer with one group per row.
pub fn layer_norm_rows(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let g = params.node(tape, &format!("{name}.g"))?;
    let b = params.node(tape, &format!("{name}.b"))?;
    let r3 = tape.reshape(x, &[n, d, 1])?;
    let normed = tape.group_norm(r3, n, 1e-5)?;
    let r2 = tape.reshape(normed, &[n, d])?;
    let y = tape.mul_vec(r2, g, 1)?;
    Ok(tape.add_vec(y, b, 1)?)
}

/// Registers the affine pair for a normalization layer: gain 1, shift 0.
pub fn init_norm_affine(
    store: &mut autograd::ParamStore,
    name: &str,
    dim: usize,
    trainable: bool,
) -> Result<()> {
    store.insert(&format!("{name}.g"), Tensor::full(&[dim], 1.0), trainable)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[dim]), trainable)?;
    Ok(())
}

/// Registers a linear layer's weight and zero bias.
pub fn init_linear(
    store: &mut autograd::ParamStore,
    name: &str,
    w: Tensor,
    trainable: bool,
) -> Result<()> {
    let out_dim = w.shape()[1];
    store.insert(&format!("{name}.w"), w, trainable)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out_dim]), trainable)?;
    Ok(())
}

/// Registers a conv layer's kernel and zero bias.
pub fn init_conv(
    store: &mut autograd::ParamStore,
    name: &str,
    w: Tensor,
    trainable: bool,
) -> Result<()> {
    let out_c = w.shape()[0];
    store.insert(&format!("{name}.w"), w, trainable)?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[out_c]), trainable)?;
    Ok(())
}

/// Pre-norm transformer block over a [n, d] token sequence: layer norm →
/// single-head self-attention → residual, then layer norm → 4× SiLU MLP →
/// residual. Binds parameters under "{name}." as laid out by
/// [`init_self_attention_block`].
pub fn self_attention_block(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let normed = layer_norm_rows(tape, params, &format!("{name}.ln1"), x)?;
    let q = linear(tape, params, &format!("{name}.q"), normed)?;
    let k = linear(tape, params, &format!("{name}.k"), normed)?;
    let v = linear(tape, params, &format!("{name}.v"), normed)?;
    let width = tape.value(q).shape()[1] as f64;
    let mixed = tape.attention(q, k, v, 1.0 / width.sqrt())?;
    let mixed = linear(tape, params, &format!("{name}.o"), mixed)?;
    let x = tape.add(x, mixed)?;
    let normed = layer_norm_rows(tape, params, &format!("{name}.ln2"), x)?;
    let h = linear(tape, params, &format!("{name}.mlp.fc1"), normed)?;
    let h = tape.silu(h)?;
    let h = linear(tape, params, &format!("{name}.mlp.fc2"), h)?;
    Ok(tape.add(x, h)?)
}

/// Registers the parameters for [`self_attention_block`]: two layer norms,
/// four width-preserving attention projections, and a 4× expansion MLP.
pub fn init_self_attention_block(
    store: &mut autograd::ParamStore,
    name: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
    trainable: bool,
) -> Result<()> {
    init_norm_affine(store, &format!("{name}.ln1"), d, trainable)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{proj}"), xavier_linear(d, d, rng), trainable)?;
    }
    init_norm_affine(store, &format!("{name}.ln2"), d, trainable)?;
    init_linear(store, &format!("{name}.mlp.fc1"), kaiming_linear(d, 4 * d, rng), trainable)?;
    init_linear(store, &format!("{name}.mlp.fc2"), xavier_linear(4 * d, d, rng), trainable)?;
    Ok(())
}

/// Residual single-head cross-attention: layer-normed queries from `x`
/// [n, dx], keys and values from `ctx` [m, dc]. Binds parameters under
/// "{name}.". With the output projection zero-initialized (as
/// [`init_attention`] does) a fresh block is exactly the identity on `x`,
/// so conditioning switches on only as training moves the projection.
pub fn cross_attention(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
    ctx: NodeId,
) -> Result<NodeId> {
    let normed = layer_norm_rows(tape, params, &format!("{name}.ln"), x)?;
    let q = linear(tape, params, &format!("{name}.q"), normed)?;
    let k = linear(tape, params, &format!("{name}.k"), ctx)?;
    let v = linear(tape, params, &format!("{name}.v"), ctx)?;
    let width = tape.value(q).shape()[1] as f64;
    let mixed = tape.attention(q, k, v, 1.0 / width.sqrt())?;
    let mixed = linear(tape, params, &format!("{name}.o"), mixed)?;
    Ok(tape.add(x, mixed)?)
}

/// Residual attention-only block over [n, d] tokens: layer norm → single-head
/// self-attention over the normed tokens → output projection → residual. Uses
/// the same parameter layout as [`cross_attention`] (see [`init_attention`]).
pub fn token_self_attention(
    tape: &mut Tape,
    params: &mut dyn ParamNodes,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let normed = layer_norm_rows(tape, params, &format!("{name}.ln"), x)?;
    let q = linear(tape, params, &format!("{name}.q"), normed)?;
    let k = linear(tape, params, &format!("{name}.k"), normed)?;
    let v = linear(tape, params, &format!("{name}.v"), normed)?;
    let width = tape.value(q).shape()[1] as f64;
    let mixed = tape.attention(q, k, v, 1.0 / width.sqrt())?;
    let mixed = linear(tape, params, &format!("{name}.o"), mixed)?;
    Ok(tape.add(x, mixed)?)
}

/// Registers the parameters for a residual attention block
/// ([`cross_attention`] or [`token_self_attention`]) with a zero output
/// projection: queries are dx→da, keys/values dc→da, output da→dx. The zero
/// output keeps a fresh block exactly the identity on its residual stream.
pub fn init_attention(
    store: &mut autograd::ParamStore,
    name: &str,
    x_dim: usize,
    ctx_dim: usize,
    attn_dim: usize,
    rng: &mut ChaCha8Rng,
    trainable: bool,
) -> Result<()> {
    init_norm_affine(store, &format!("{name}.ln"), x_dim, trainable)?;
    init_linear(store, &format!("{name}.q"), xavier_linear(x_dim, attn_dim, rng), trainable)?;
    init_linear(store, &format!("{name}.k"), xavier_linear(ctx_dim, attn_dim, rng), trainable)?;
    init_linear(store, &format!("{name}.v"), xavier_linear(ctx_dim, attn_dim, rng), trainable)?;
    init_linear(store, &format!("{name}.o"), Tensor::zeros(&[attn_dim, x_dim]), trainable)?;
    Ok(())
}

/// Mean over rows of −Σ_j target[i][j]·log softmax(logits[i])[j]; `targets`
/// rows must be distributions (one-hot or soft).
pub fn cross_entropy_rows(tape: &mut Tape, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let n = tape.value(logits).shape()[0];
    let lp = tape.log_softmax(logits)?;
    let picked = tape.mul(lp, targets)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Sinusoidal timestep embedding of even dimension `dim`: interleaved
/// sin(t·ω_i), cos(t·ω_i) pairs with ω geometrically spaced from 1 down to
/// 1/10000.
pub fn timestep_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(crate::error::Error::InvalidArgument(format!(
            "timestep embedding needs even dim, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let omega = (-(10000.0_f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (t as f64 * omega).sin();
        out[2 * i + 1] = (t as f64 * omega).cos();
    }
    Ok(Tensor::new(vec![dim], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::{FixedParams, GradCheck, ParamStore, StoreParams};
    use std::collections::BTreeMap;
    use crate::rng::stream;

    #[test]
    fn initializers_have_requested_moments() {
        let mut rng = stream(0, 0, 0, "init");
        let w = kaiming_linear(256, 64, &mut rng);
        let n = w.data().len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        let want = 2.0 / 256.0;
        assert!(mean.abs() < 3.0 * (want / n).sqrt());
        assert!((var - want).abs() < 0.2 * want);

        let k = kaiming_conv(8, 4, 3, 3, &mut rng);
        assert_eq!(k.shape(), &[8, 4, 3, 3]);
        let x = xavier_linear(100, 100, &mut rng);
        let vx: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!((vx - 0.01).abs() < 0.002);
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store = ParamStore::new();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
        init_linear(&mut store, "fc", w, true).unwrap();
        store.set_value("fc.b", Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = linear(&mut tape, &mut params, "fc", x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5, 4.5, 2.5]);
    }

    #[test]
    fn layer_norm_rows_normalizes_each_row() {
        let mut store = ParamStore::new();
        init_norm_affine(&mut store, "ln", 4, true).unwrap();
        let mut tape = Tape::new();
        let mut params = StoreParams::new(&store);
        let x = tape.constant(
            Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap(),
        );
        let y = layer_norm_rows(&mut tape, &mut params, "ln", x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3); // eps keeps it slightly under 1
        }
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two rows, one-hot targets: loss = mean(−log softmax(logits)[target]).
        let mut tape = Tape::new();
        let logits = tape.constant(
            Tensor::new(vec![2, 3], vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let targets = tape.constant(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let loss = cross_entropy_rows(&mut tape, logits, targets).unwrap();
        let z0 = (2.0_f64.exp() + 1.0_f64.exp() + 1.0).ln();
        let want = ((z0 - 2.0) + (3.0_f64).ln()) / 2.0;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let mut rng = stream(3, 0, 0, "ce-grad");
        let logits = Tensor::randn(&[4, 5], &mut rng);
        let target_rows: Vec<f64> = (0..4)
            .flat_map(|i| (0..5).map(move |j| if j == (i * 2) % 5 { 1.0 } else { 0.0 }))
            .collect();
        let targets = Tensor::new(vec![4, 5], target_rows).unwrap();
        let report = GradCheck::default()
            .check("cross_entropy_rows", &[logits], |tape, inputs| {
                let t = tape.constant(targets.clone());
                cross_entropy_rows(tape, inputs[0], t).map_err(|e| autograd::Error::InvalidArgument(e.to_string()))
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn helpers_gradcheck_through_fixed_params() {
        // One linear + layer norm + CE, differentiating input AND weights.
        let mut rng = stream(4, 0, 0, "nn-grad");
        let x = Tensor::randn(&[3, 4], &mut rng);
        let w = kaiming_linear(4, 6, &mut rng);
        let targets = Tensor::new(
            vec![3, 6],
            (0..18).map(|i| if i % 6 == (i / 6) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let report = GradCheck::default()
            .check("linear+ln+ce", &[x, w], |tape, inputs| {
                let b = tape.leaf(Tensor::zeros(&[6]), false);
                let g = tape.leaf(Tensor::full(&[6], 1.0), false);
                let b2 = tape.leaf(Tensor::zeros(&[6]), false);
                let mut fp = FixedParams {
                    map: BTreeMap::from([
                        ("fc.w".to_string(), inputs[1]),
                        ("fc.b".to_string(), b),
                        ("ln.g".to_string(), g),
                        ("ln.b".to_string(), b2),
                    ]),
                };
                let h = linear(tape, &mut fp, "fc", inputs[0])
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))?;
                let n = layer_norm_rows(tape, &mut fp, "ln", h)
                    .map_err(|e| autograd::Error::InvalidArgument(e.to_string()))?;
                let t = tape.constant(targets.clone());
                cross_entropy_rows(tape, n, t).map_err(|e| autograd::Error::InvalidArgument(e.to_string()))
            })
            .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let e1 = timestep_embed(1, 64).unwrap();
        let e2 = timestep_embed(2, 64).unwrap();
        assert_eq!(e1.shape(), &[64]);
        assert!(e1.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e1.data(), e2.data());
        // t=0 interleaves to [sin 0, cos 0, ...] = [0, 1, ...].
        let e0 = timestep_embed(0, 2).unwrap();
        assert_eq!(e0.data(), &[0.0, 1.0]);
        let e0 = timestep_embed(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e0.data()[2 * i], 0.0);
            assert_eq!(e0.data()[2 * i + 1], 1.0);
        }
        assert!(timestep_embed(1, 7).is_err());
        // No collisions across the full timestep range at modest width.
        let embeds: Vec<Vec<f64>> = (1..=18)
            .map(|t| timestep_embed(t, 8).unwrap().data().to_vec())
            .collect();
        for a in 0..embeds.len() {
            for b in a + 1..embeds.len() {
                let gap: f64 = embeds[a]
                    .iter()
                    .zip(&embeds[b])
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(gap > 1e-3, "timesteps {} and {} collide", a + 1, b + 1);
            }
        }
    }
}
