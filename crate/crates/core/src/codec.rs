//! Fixed invertible linear latent codec.
//!
//! Encoding is space-to-depth by a patch factor p followed by a fixed
//! orthogonal mixing matrix M applied per spatial site; decoding is the exact
//! inverse (Mᵀ, then depth-to-space). Because M is orthogonal the codec is
//! lossless up to float rounding, which isolates diffusion behavior from
//! codec error.
//!
//! M is produced by QR-orthogonalizing a seeded Gaussian matrix (sign-fixed
//! so the factorization is canonical) and travels with the checkpoint under
//! the "codec." prefix, so a reloaded model always decodes with the matrix it
//! was trained with.

use autograd::{NodeId, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, LatentTensor};
use crate::rng::stream;

/// Orthogonal per-site channel mixer over p×p patches.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    /// Image channels C.
    channels: usize,
    /// Patch size p; latent channels = C·p².
    patch: usize,
    /// n×n orthogonal mixing matrix, n = C·p².
    m: Tensor,
}

impl LatentCodec {
    /// Builds the codec with a seeded random orthogonal mixer.
    pub fn new(channels: usize, patch: usize, seed: u64) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return Err(Error::InvalidArgument("channels and patch must be positive".into()));
        }
        let n = channels * patch * patch;
        let mut rng = stream(seed, 0, 0, "codec");
        let m = random_orthogonal(n, &mut rng);
        Self::from_matrix(channels, patch, m)
    }

    /// Builds the codec from an explicit mixing matrix (e.g. one loaded from
    /// a checkpoint). Rejects matrices that are not orthogonal within 1e-10.
    pub fn from_matrix(channels: usize, patch: usize, m: Tensor) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return Err(Error::InvalidArgument("channels and patch must be positive".into()));
        }
        let n = channels * patch * patch;
        if m.shape() != [n, n] {
            return Err(Error::ShapeMismatch(format!(
                "mixing matrix wants [{n}, {n}], got {:?}",
                m.shape()
            )));
        }
        let gram = m.transposed()?.matmul(&m)?;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if (gram.data()[i * n + j] - want).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "mixing matrix is not orthogonal: (MᵀM)[{i}][{j}] = {}",
                        gram.data()[i * n + j]
                    )));
                }
            }
        }
        Ok(Self { channels, patch, m })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Latent channel count C·p².
    pub fn latent_channels(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn matrix(&self) -> &Tensor {
        &self.m
    }

    fn check_image(&self, x: &ImageTensor) -> Result<(usize, usize)> {
        if x.c() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, codec wants {}",
                x.c(),
                self.channels
            )));
        }
        if x.h() % self.patch != 0 || x.w() % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by patch {}",
                x.h(),
                x.w(),
                self.patch
            )));
        }
        Ok((x.h() / self.patch, x.w() / self.patch))
    }

    /// [C, H, W] → [C·p², H/p, W/p]: space-to-depth, then M per spatial site.
    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let (hp, wp) = self.check_image(x)?;
        let n = self.latent_channels();
        let stacked = space_to_depth(x.tensor(), self.patch)?;
        let flat = stacked.reshaped(&[n, hp * wp])?;
        let mixed = self.m.matmul(&flat)?;
        LatentTensor::new(mixed.reshaped(&[n, hp, wp])?)
    }

    /// Exact inverse of `encode`: Mᵀ per site, then depth-to-space.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let n = self.latent_channels();
        if z.c() != n {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} channels, codec wants {n}",
                z.c()
            )));
        }
        let flat = z.tensor().reshaped(&[n, z.h() * z.w()])?;
        let unmixed = self.m.transposed()?.matmul(&flat)?;
        let stacked = unmixed.reshaped(&[n, z.h(), z.w()])?;
        ImageTensor::new(depth_to_space(&stacked, self.patch, self.channels)?)
    }

    /// `decode` as a differentiable graph node: `z` is a [C·p², h, w] node,
    /// `m_node` holds the mixing matrix (a frozen leaf or constant).
    pub fn decode_node(&self, tape: &mut Tape, m_node: NodeId, z: NodeId) -> Result<NodeId> {
        let n = self.latent_channels();
        let shape = tape.value(z).shape().to_vec();
        if shape.len() != 3 || shape[0] != n {
            return Err(Error::ShapeMismatch(format!(
                "latent node wants [{n}, h, w], got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let flat = tape.reshape(z, &[n, h * w])?;
        let mt = tape.transpose(m_node)?;
        let unmixed = tape.matmul(mt, flat)?;
        let stacked = tape.reshape(unmixed, &[n, h, w])?;
        Ok(tape.depth_to_space(stacked, self.patch)?)
    }
}

/// [C, H, W] → [C·p², H/p, W/p] with out[c·p²+dy·p+dx, i, j] = x[c, i·p+dy, j·p+dx].
fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hp, wp) = (h / p, w / p);
    let mut out = vec![0.0; c * p * p * hp * wp];
    let src = x.data();
    for cc in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let oc = cc * p * p + dy * p + dx;
                for i in 0..hp {
                    for j in 0..wp {
                        out[(oc * hp + i) * wp + j] = src[(cc * h + i * p + dy) * w + j * p + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c * p * p, hp, wp], out)?)
}

/// Inverse of `space_to_depth`; `c_out` is the image channel count.
fn depth_to_space(z: &Tensor, p: usize, c_out: usize) -> Result<Tensor> {
    let (hp, wp) = (z.shape()[1], z.shape()[2]);
    let (h, w) = (hp * p, wp * p);
    let mut out = vec![0.0; c_out * h * w];
    let src = z.data();
    for cc in 0..c_out {
        for dy in 0..p {
            for dx in 0..p {
                let ic = cc * p * p + dy * p + dx;
                for i in 0..hp {
                    for j in 0..wp {
                        out[(cc * h + i * p + dy) * w + j * p + dx] = src[(ic * hp + i) * wp + j];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c_out, h, w], out)?)
}

/// Orthogonal matrix from Householder QR of a Gaussian sample, with the sign
/// convention diag(R) > 0 so the result is a canonical function of the draw.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut r: Vec<f64> = (0..n * n).map(|_| autograd::standard_normal(rng)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    let mut v = vec![0.0; n];
    for k in 0..n {
        // Householder vector for column k of the trailing block.
        let mut norm = 0.0;
        for i in k..n {
            v[i] = r[i * n + k];
            norm += v[i] * v[i];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if v[k] >= 0.0 { -norm } else { norm };
        v[k] -= alpha;
        let vnorm2: f64 = v[k..n].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R ← H·R (rows k.. only), Q ← Q·H.
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * r[i * n + j]).sum();
            let s = 2.0 * dot / vnorm2;
            for i in k..n {
                r[i * n + j] -= s * v[i];
            }
        }
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| v[j] * q[i * n + j]).sum();
            let s = 2.0 * dot / vnorm2;
            for j in k..n {
                q[i * n + j] -= s * v[j];
            }
        }
    }
    // Canonical sign: make diag(R) positive by flipping matching Q columns.
    for j in 0..n {
        if r[j * n + j] < 0.0 {
            for i in 0..n {
                q[i * n + j] = -q[i * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], q).expect("square matrix")
}
