//! Radix-2 FFT and frequency-domain 1-d convolution.
//!
//! Direct evaluation of the long temporal convolutions (500 ms kernels over
//! 6 s of audio) costs ~1.5e11 multiply-adds; the FFT route brings that to a
//! few seconds on one core. Used only for stride-1 convolutions above a size
//! threshold; small convolutions stay on the direct path, which the tests
//! compare against a nested-loop oracle.

/// In-place iterative radix-2 FFT. `re`/`im` length must be a power of two.
pub fn fft(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    if n <= 1 {
        return;
    }

    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n - 1 {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut mask = n >> 1;
        while j & mask != 0 {
            j &= !mask;
            mask >>= 1;
        }
        j |= mask;
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (w_re, w_im) = (ang.cos(), ang.sin());
        let half = len / 2;
        let mut start = 0;
        while start < n {
            let (mut cur_re, mut cur_im) = (1.0, 0.0);
            for off in 0..half {
                let a = start + off;
                let b = a + half;
                let tr = re[b] * cur_re - im[b] * cur_im;
                let ti = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let nr = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = nr;
            }
            start += len;
        }
        len <<= 1;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            *r *= scale;
            *i *= scale;
        }
    }
}

/// Frequency-domain representation of a zero-padded real signal.
struct Spectrum {
    re: Vec<f64>,
    im: Vec<f64>,
}

fn spectrum(signal: &[f64], n: usize) -> Spectrum {
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    re[..signal.len()].copy_from_slice(signal);
    fft(&mut re, &mut im, false);
    Spectrum { re, im }
}

fn spectrum_rev(signal: &[f64], n: usize) -> Spectrum {
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for (dst, src) in re[..signal.len()].iter_mut().zip(signal.iter().rev()) {
        *dst = *src;
    }
    fft(&mut re, &mut im, false);
    Spectrum { re, im }
}

/// acc += a * b (complex, pointwise).
fn mul_acc(acc_re: &mut [f64], acc_im: &mut [f64], a: &Spectrum, b: &Spectrum) {
    for idx in 0..acc_re.len() {
        acc_re[idx] += a.re[idx] * b.re[idx] - a.im[idx] * b.im[idx];
        acc_im[idx] += a.re[idx] * b.im[idx] + a.im[idx] * b.re[idx];
    }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Forward cross-correlation, stride 1:
/// `out[co, t] = sum_ci sum_m kernels[co, ci, m] * padded[ci, t + m]`
/// with `t_out = t_pad - k + 1`.
pub fn conv1d_forward(
    padded: &[f64],
    c_in: usize,
    t_pad: usize,
    kernels: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let t_out = t_pad - k + 1;
    let n = next_pow2(t_pad + k);
    let inputs: Vec<Spectrum> = (0..c_in)
        .map(|ci| spectrum(&padded[ci * t_pad..(ci + 1) * t_pad], n))
        .collect();
    let mut out = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        let mut acc_re = vec![0.0; n];
        let mut acc_im = vec![0.0; n];
        for (ci, input) in inputs.iter().enumerate() {
            let row = &kernels[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let kern = spectrum_rev(row, n);
            mul_acc(&mut acc_re, &mut acc_im, input, &kern);
        }
        fft(&mut acc_re, &mut acc_im, true);
        // correlation = conv(padded, rev(kernel)) offset by k-1
        out[co * t_out..(co + 1) * t_out].copy_from_slice(&acc_re[k - 1..k - 1 + t_out]);
    }
    out
}

/// Gradient w.r.t. the padded input:
/// `g_pad[ci, j] = sum_co sum_m kernels[co, ci, m] * g_out[co, j - m]`.
pub fn conv1d_grad_input(
    g_out: &[f64],
    c_out: usize,
    t_out: usize,
    kernels: &[f64],
    c_in: usize,
    k: usize,
) -> Vec<f64> {
    let t_pad = t_out + k - 1;
    let n = next_pow2(t_pad + 1);
    let gouts: Vec<Spectrum> = (0..c_out)
        .map(|co| spectrum(&g_out[co * t_out..(co + 1) * t_out], n))
        .collect();
    let mut g_pad = vec![0.0; c_in * t_pad];
    for ci in 0..c_in {
        let mut acc_re = vec![0.0; n];
        let mut acc_im = vec![0.0; n];
        for (co, gspec) in gouts.iter().enumerate() {
            let row = &kernels[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let kern = spectrum(row, n);
            mul_acc(&mut acc_re, &mut acc_im, gspec, &kern);
        }
        fft(&mut acc_re, &mut acc_im, true);
        g_pad[ci * t_pad..(ci + 1) * t_pad].copy_from_slice(&acc_re[..t_pad]);
    }
    g_pad
}

/// Gradient w.r.t. the kernels:
/// `g_k[co, ci, m] = sum_t g_out[co, t] * padded[ci, t + m]`.
pub fn conv1d_grad_kernels(
    padded: &[f64],
    c_in: usize,
    t_pad: usize,
    g_out: &[f64],
    c_out: usize,
    t_out: usize,
) -> Vec<f64> {
    let k = t_pad - t_out + 1;
    let n = next_pow2(t_pad + t_out);
    let inputs: Vec<Spectrum> = (0..c_in)
        .map(|ci| spectrum(&padded[ci * t_pad..(ci + 1) * t_pad], n))
        .collect();
    let mut g_k = vec![0.0; c_out * c_in * k];
    for co in 0..c_out {
        let grev = spectrum_rev(&g_out[co * t_out..(co + 1) * t_out], n);
        for (ci, input) in inputs.iter().enumerate() {
            let mut acc_re = vec![0.0; n];
            let mut acc_im = vec![0.0; n];
            mul_acc(&mut acc_re, &mut acc_im, input, &grev);
            fft(&mut acc_re, &mut acc_im, true);
            let dst = &mut g_k[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            dst.copy_from_slice(&acc_re[t_out - 1..t_out - 1 + k]);
        }
    }
    g_k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn direct_corr(
        padded: &[f64],
        c_in: usize,
        t_pad: usize,
        kernels: &[f64],
        c_out: usize,
        k: usize,
    ) -> Vec<f64> {
        let t_out = t_pad - k + 1;
        let mut out = vec![0.0; c_out * t_out];
        for co in 0..c_out {
            for t in 0..t_out {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for m in 0..k {
                        acc += kernels[(co * c_in + ci) * k + m] * padded[ci * t_pad + t + m];
                    }
                }
                out[co * t_out + t] = acc;
            }
        }
        out
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = Rng::new(3);
        let mut re: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let mut im: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
        let (orig_re, orig_im) = (re.clone(), im.clone());
        fft(&mut re, &mut im, false);
        fft(&mut re, &mut im, true);
        for i in 0..256 {
            assert!((re[i] - orig_re[i]).abs() < 1e-12);
            assert!((im[i] - orig_im[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_conv_matches_direct() {
        let mut rng = Rng::new(11);
        let (c_in, t_pad, c_out, k) = (3, 500, 4, 37);
        let padded: Vec<f64> = (0..c_in * t_pad).map(|_| rng.normal()).collect();
        let kernels: Vec<f64> = (0..c_out * c_in * k).map(|_| rng.normal()).collect();
        let fast = conv1d_forward(&padded, c_in, t_pad, &kernels, c_out, k);
        let slow = direct_corr(&padded, c_in, t_pad, &kernels, c_out, k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
