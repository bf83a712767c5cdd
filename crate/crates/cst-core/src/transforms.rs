//! Single-level orthonormal 2-D Haar transform over multi-channel feature
//! maps. Channels last: `data[(y * w + x) * c + ch]`.

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("spatial size {h}x{w} must be even in both directions")]
    OddDimensions { h: usize, w: usize },
    #[error("channel count {c} must be divisible by 4")]
    BadChannelCount { c: usize },
    #[error("data length {len} does not match {h}x{w}x{c}")]
    ShapeMismatch { h: usize, w: usize, c: usize, len: usize },
}

/// Dense `h x w x c` array of reals, channels varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self, TransformError> {
        if data.len() != h * w * c {
            return Err(TransformError::ShapeMismatch { h, w, c, len: data.len() });
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![T::zero(); h * w * c] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Haar coefficients at half resolution; channels ordered `[LL|LH|HL|HH]`,
/// each block `c_base` channels wide.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs<T: Scalar> {
    pub h: usize,
    pub w: usize,
    /// Total channel count, four times the analysed map's channels.
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> WaveletCoeffs<T> {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self, TransformError> {
        if c % 4 != 0 {
            return Err(TransformError::BadChannelCount { c });
        }
        if data.len() != h * w * c {
            return Err(TransformError::ShapeMismatch { h, w, c, len: data.len() });
        }
        Ok(Self { h, w, c, data })
    }

    /// Channels per subband.
    pub fn c_base(&self) -> usize {
        self.c / 4
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> T {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Orthonormal analysis step. Per 2x2 block `[a b; c d]` of each channel:
/// `LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2`.
pub fn dwt2<T: Scalar>(x: &FeatureMap<T>) -> Result<WaveletCoeffs<T>, TransformError> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(TransformError::OddDimensions { h: x.h, w: x.w });
    }
    let (hh, hw, c) = (x.h / 2, x.w / 2, x.c);
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); hh * hw * 4 * c];
    for y in 0..hh {
        for xx in 0..hw {
            let o = (y * hw + xx) * 4 * c;
            for ch in 0..c {
                let a = x.at(2 * y, 2 * xx, ch);
                let b = x.at(2 * y, 2 * xx + 1, ch);
                let cc = x.at(2 * y + 1, 2 * xx, ch);
                let d = x.at(2 * y + 1, 2 * xx + 1, ch);
                out[o + ch] = (a + b + cc + d) * half;
                out[o + c + ch] = (a + b - cc - d) * half;
                out[o + 2 * c + ch] = (a - b + cc - d) * half;
                out[o + 3 * c + ch] = (a - b - cc + d) * half;
            }
        }
    }
    Ok(WaveletCoeffs { h: hh, w: hw, c: 4 * c, data: out })
}

/// Exact inverse of [`dwt2`]; orthonormality makes it the transpose as well.
pub fn idwt2<T: Scalar>(w: &WaveletCoeffs<T>) -> Result<FeatureMap<T>, TransformError> {
    if w.c % 4 != 0 {
        return Err(TransformError::BadChannelCount { c: w.c });
    }
    let c = w.c / 4;
    let (fh, fw) = (w.h * 2, w.w * 2);
    let half = T::from_f64(0.5);
    let mut out = vec![T::zero(); fh * fw * c];
    for y in 0..w.h {
        for xx in 0..w.w {
            for ch in 0..c {
                let ll = w.at(y, xx, ch);
                let lh = w.at(y, xx, c + ch);
                let hl = w.at(y, xx, 2 * c + ch);
                let hh = w.at(y, xx, 3 * c + ch);
                let a = (ll + lh + hl + hh) * half;
                let b = (ll + lh - hl - hh) * half;
                let cc = (ll - lh + hl - hh) * half;
                let d = (ll - lh - hl + hh) * half;
                out[((2 * y) * fw + 2 * xx) * c + ch] = a;
                out[((2 * y) * fw + 2 * xx + 1) * c + ch] = b;
                out[((2 * y + 1) * fw + 2 * xx) * c + ch] = cc;
                out[((2 * y + 1) * fw + 2 * xx + 1) * c + ch] = d;
            }
        }
    }
    Ok(FeatureMap { h: fh, w: fw, c, data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_image_concentrates_in_ll() {
        let v: f64 = 0.7;
        let x = FeatureMap::new(4, 6, 2, vec![v; 4 * 6 * 2]).unwrap();
        let w = dwt2(&x).unwrap();
        assert_eq!((w.h, w.w, w.c), (2, 3, 8));
        for y in 0..w.h {
            for xx in 0..w.w {
                for ch in 0..2 {
                    assert!((w.at(y, xx, ch) - 2.0 * v).abs() < 1e-15);
                    for band in 1..4 {
                        assert_eq!(w.at(y, xx, band * 2 + ch), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn hand_computed_block() {
        let x = FeatureMap::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = dwt2(&x).unwrap();
        assert_eq!(w.data, vec![5.0, -2.0, -1.0, 0.0]);
    }

    #[test]
    fn zero_maps_to_zero() {
        let w = dwt2(&FeatureMap::<f64>::zeros(8, 8, 3)).unwrap();
        assert!(w.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_sizes_are_rejected() {
        assert!(matches!(
            dwt2(&FeatureMap::<f64>::zeros(3, 4, 1)),
            Err(TransformError::OddDimensions { .. })
        ));
        assert!(matches!(
            dwt2(&FeatureMap::<f64>::zeros(4, 5, 1)),
            Err(TransformError::OddDimensions { .. })
        ));
    }

    #[test]
    fn bad_channel_count_is_rejected() {
        assert!(matches!(
            WaveletCoeffs::new(2, 2, 3, vec![0.0f64; 12]),
            Err(TransformError::BadChannelCount { .. })
        ));
    }

    #[test]
    fn ll_only_coefficients_invert_to_block_constants() {
        // One block with LL = 5: every pixel of the block equals 5/2.
        let w = WaveletCoeffs::new(1, 1, 4, vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        let x = idwt2(&w).unwrap();
        assert_eq!(x.data, vec![2.5; 4]);
    }

    #[test]
    fn round_trip_in_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..16 * 12 * 4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let x = FeatureMap::new(16, 12, 4, data).unwrap();
        let back = idwt2(&dwt2(&x).unwrap()).unwrap();
        let worst = x
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6);
    }

    #[test]
    fn linearity() {
        let x = random_map(8, 8, 3, 1);
        let y = random_map(8, 8, 3, 2);
        let (a, b) = (1.7, -0.4);
        let mixed = FeatureMap::new(
            8,
            8,
            3,
            x.data.iter().zip(&y.data).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let wm = dwt2(&mixed).unwrap();
        let wx = dwt2(&x).unwrap();
        let wy = dwt2(&y).unwrap();
        for i in 0..wm.data.len() {
            assert!((wm.data[i] - (a * wx.data[i] + b * wy.data[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn ll_projection_is_idempotent() {
        let x = random_map(16, 16, 2, 9);
        let project = |m: &FeatureMap<f64>| {
            let mut w = dwt2(m).unwrap();
            let c = w.c_base();
            for y in 0..w.h {
                for xx in 0..w.w {
                    for ch in c..4 * c {
                        w.data[(y * w.w + xx) * w.c + ch] = 0.0;
                    }
                }
            }
            idwt2(&w).unwrap()
        };
        let once = project(&x);
        let twice = project(&once);
        for i in 0..x.data.len() {
            assert!((once.data[i] - twice.data[i]).abs() < 1e-6);
        }
        // Orthogonal projection: residual is perpendicular to the projection.
        let dot: f64 = x
            .data
            .iter()
            .zip(&once.data)
            .map(|(orig, proj)| (orig - proj) * proj)
            .sum();
        assert!(dot.abs() < 1e-9 * norm(&x.data) * norm(&once.data));
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_parseval(
            hw in prop::sample::select(vec![2usize, 4, 8, 16, 32, 64]),
            ww in prop::sample::select(vec![2usize, 4, 8, 16, 32, 64]),
            c in prop::sample::select(vec![1usize, 3, 8]),
            seed in 0u64..1000,
        ) {
            let x = random_map(hw, ww, c, seed);
            let w = dwt2(&x).unwrap();
            let back = idwt2(&w).unwrap();
            let worst = x.data.iter().zip(&back.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            prop_assert!(worst <= 1e-12);
            let nx = norm(&x.data);
            let nw = norm(&w.data);
            prop_assert!((nx - nw).abs() <= 1e-9 * nx.max(1e-30));
        }
    }
}
