//! In-place iterative radix-2 FFT.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<(f64, f64)>,
    bitrev: Vec<usize>,
}

impl Fft {
    /// Plans a transform of length `n`, which must be a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2, "fft length must be a power of two");
        let bits = n.trailing_zeros();
        let bitrev = (0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                (libm::cos(a), libm::sin(a))
            })
            .collect();
        Self { n, twiddles, bitrev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Forward transform of `(re, im)` in place.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let (wr, wi) = self.twiddles[k * stride];
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
    }

    /// Power spectrum `|X_k|^2` for `k = 0..=n/2` of a real signal.
    pub fn power_spectrum(&self, signal: &[f64]) -> Vec<f64> {
        let mut re = signal.to_vec();
        re.resize(self.n, 0.0);
        let mut im = alloc::vec![0.0; self.n];
        self.forward(&mut re, &mut im);
        (0..=self.n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_power(x: &[f64], n: usize) -> Vec<f64> {
        (0..=n / 2)
            .map(|k| {
                let (mut r, mut i) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    r += v * libm::cos(a);
                    i += v * libm::sin(a);
                }
                r * r + i * i
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..50).map(|i| libm::sin(i as f64 * 0.37) + 0.1 * i as f64).collect();
        let fft = Fft::new(64);
        let got = fft.power_spectrum(&x);
        let want = naive_power(&x, 64);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9 * w.abs().max(1.0), "{g} vs {w}");
        }
    }
}
