//! Dense channel-first image and latent containers, plus 8-bit PGM I/O.
//!
//! Both containers wrap a rank-3 tensor laid out `[channels, height, width]`.
//! `ImageTensor` lives in pixel space (nominal range [0, 1]); `LatentTensor`
//! lives in the codec's latent space and is unbounded but always finite.

use std::fs::File;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use autograd::Tensor;

use crate::error::{Error, Result};

macro_rules! chw_container {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            /// Wraps a rank-3 `[c, h, w]` tensor; rejects other ranks and
            /// non-finite entries.
            pub fn new(t: Tensor) -> Result<Self> {
                if t.rank() != 3 {
                    return Err(Error::ShapeMismatch(format!(
                        "expected [c, h, w], got {:?}",
                        t.shape()
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite(concat!(stringify!($name), " entries").into()));
                }
                Ok(Self(t))
            }

            pub fn zeros(c: usize, h: usize, w: usize) -> Self {
                Self(Tensor::zeros(&[c, h, w]))
            }

            pub fn c(&self) -> usize {
                self.0.shape()[0]
            }

            pub fn h(&self) -> usize {
                self.0.shape()[1]
            }

            pub fn w(&self) -> usize {
                self.0.shape()[2]
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            pub fn data_mut(&mut self) -> &mut [f64] {
                self.0.data_mut()
            }

            /// Value at `(channel, row, col)`.
            pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
                self.0.data()[(c * self.h() + y) * self.w() + x]
            }

            pub fn same_shape(&self, other: &Self) -> bool {
                self.0.shape() == other.0.shape()
            }
        }
    };
}

chw_container!(ImageTensor, "Pixel-space image, `[c, h, w]`, nominal range [0, 1].");
chw_container!(LatentTensor, "Latent-space tensor, `[c, h, w]`, finite entries.");

impl ImageTensor {
    /// Clamps to [0, 1], rounds to 8-bit levels, and maps back to [0, 1] —
    /// exactly the precision that survives a PGM round trip. Metrics are
    /// computed on this form so they can be recomputed from saved files.
    pub fn round_trip_8bit(&self) -> ImageTensor {
        ImageTensor(self.0.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
    }
}

/// Writes a single-channel image as a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.c() != 1 {
        return Err(Error::InvalidArgument(format!(
            "PGM is single-channel, image has {} channels",
            img.c()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{} {}\n255\n", img.w(), img.h())?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary (P5) PGM with maxval 255 into a `[1, h, w]` image.
pub fn read_pgm(path: &Path) -> Result<ImageTensor> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let mut pos = 0usize;

    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comment lines between header tokens.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw)? != "P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad PGM header field: {s}")))
    };
    let w = parse(token(&raw)?)?;
    let h = parse(token(&raw)?)?;
    let maxval = parse(token(&raw)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    if raw.len() < pos + w * h {
        return Err(Error::Format("PGM pixel data truncated".into()));
    }
    let data: Vec<f64> = raw[pos..pos + w * h].iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(Tensor::new(vec![1, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_rank_and_non_finite() {
        assert!(ImageTensor::new(Tensor::zeros(&[4, 4])).is_err());
        let mut t = Tensor::zeros(&[1, 2, 2]);
        t.data_mut()[0] = f64::NAN;
        assert!(LatentTensor::new(t).is_err());
    }

    #[test]
    fn accessors_follow_chw_layout() {
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let img = ImageTensor::new(t).unwrap();
        assert_eq!((img.c(), img.h(), img.w()), (2, 2, 3));
        assert_eq!(img.at(0, 0, 0), 0.0);
        assert_eq!(img.at(0, 1, 2), 5.0);
        assert_eq!(img.at(1, 0, 1), 7.0);
    }

    #[test]
    fn pgm_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut img = ImageTensor::zeros(1, 3, 5);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i as f64) / 14.0;
        }
        let quantized = img.round_trip_8bit();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, quantized);
        // A second round trip is the identity.
        write_pgm(&path, &back).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), back);
    }

    #[test]
    fn pgm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P2\n2 2\n255\n0 0 0 0\n").unwrap();
        assert!(read_pgm(&path).is_err());
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn pgm_writer_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        let mut img = ImageTensor::zeros(1, 4, 4);
        img.data_mut()[5] = 0.7;
        write_pgm(&a, &img).unwrap();
        write_pgm(&b, &img).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
