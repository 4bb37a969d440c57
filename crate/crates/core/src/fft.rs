//! Radix-2 fast Fourier transform.
//!
//! Forward transform is the unnormalized DFT, X[k] = sum_j x[j] exp(-2 pi i
//! j k / n); the inverse carries the 1/n factor. Lengths must be powers of
//! two, which is all the pipeline ever uses (analysis frames and synthesis
//! segments are 1024 and 8192).

use num_complex::Complex64;

use crate::error::{Error, Result};

/// In-place iterative Cooley-Tukey, decimation in time.
pub fn fft_in_place(x: &mut [Complex64]) -> Result<()> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "fft length must be a nonzero power of two, got {n}"
        )));
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i as u64).reverse_bits() >> (64 - bits) as u64;
        let j = j as usize;
        if j > i {
            x.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = x[start + k];
                let b = x[start + k + len / 2] * w;
                x[start + k] = a + b;
                x[start + k + len / 2] = a - b;
                w *= wlen;
            }
        }
        len <<= 1;
    }
    Ok(())
}

/// Forward transform of a real signal.
pub fn fft_real(x: &[f64]) -> Result<Vec<Complex64>> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf)?;
    Ok(buf)
}

/// Forward transform of a complex signal.
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut buf = x.to_vec();
    fft_in_place(&mut buf)?;
    Ok(buf)
}

/// Inverse transform, normalized by 1/n: ifft(fft(x)) == x.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|c| c.conj()).collect();
    fft_in_place(&mut buf)?;
    let scale = 1.0 / n as f64;
    for c in buf.iter_mut() {
        *c = c.conj() * scale;
    }
    Ok(buf)
}
