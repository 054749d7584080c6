//! Minimal iterative radix-2 complex FFT, enough for power-of-two frame
//! sizes in filterbank extraction. Kept local so the crate stays no_std.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// In-place FFT over interleaved (re, im) pairs; `n` must be a power of two.
pub fn fft_inplace<T: Scalar>(re: &mut [T], im: &mut [T]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    debug_assert_eq!(im.len(), n);
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (T::from_f64(ang.cos()), T::from_f64(ang.sin()));
        let mut i = 0;
        while i < n {
            let mut cur_r = T::one();
            let mut cur_i = T::zero();
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cur_r - im[i + k + len / 2] * cur_i,
                    re[i + k + len / 2] * cur_i + im[i + k + len / 2] * cur_r,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let nr = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = nr;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Power spectrum (|X_k|^2 for k = 0..n/2) of a real frame zero-padded to
/// `n_fft`.
pub fn power_spectrum<T: Scalar>(frame: &[T], n_fft: usize) -> Vec<T> {
    let mut re = vec![T::zero(); n_fft];
    let mut im = vec![T::zero(); n_fft];
    re[..frame.len()].copy_from_slice(frame);
    fft_inplace(&mut re, &mut im);
    (0..=n_fft / 2)
        .map(|k| re[k] * re[k] + im[k] * im[k])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n^2) reference DFT.
    fn naive_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
        (0..=n_fft / 2)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * core::f64::consts::PI * (k * t) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let frame: Vec<f64> = (0..100)
            .map(|t| (t as f64 * 0.31).sin() + 0.5 * (t as f64 * 1.7).cos())
            .collect();
        let fast = power_spectrum(&frame, 128);
        let slow = naive_power(&frame, 128);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
