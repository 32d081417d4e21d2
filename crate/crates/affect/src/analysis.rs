//! Acoustic descriptors and the gate-activation correlation study.
//!
//! Descriptors per 40 ms frame: RMS energy, the max-min range of RMS over a
//! sliding 1 s window, loudness as log-compressed RMS, and the fundamental
//! frequency from a normalized autocorrelation peak search in [80, 400] Hz
//! with parabolic refinement. Unvoiced frames (peak below 0.3) carry the
//! last voiced estimate forward.
//!
//! The correlation study runs a trained model over an unseen recording,
//! records every recurrent cell's hidden-output trace, and reports the
//! Pearson correlation of each cell against each descriptor.

use crate::error::{AffectError, Result};
use crate::lstm::StackTrace;
use crate::metrics;
use crate::synth::{Recording, AUDIO_RATE, FRAME_RATE};

/// Samples per 40 ms descriptor frame.
pub const FRAME_SAMPLES: usize = AUDIO_RATE / FRAME_RATE;

/// F0 search band in Hz.
pub const F0_BAND: (f64, f64) = (80.0, 400.0);

/// Normalized-autocorrelation threshold below which a frame is unvoiced.
pub const VOICING_THRESHOLD: f64 = 0.3;

/// Loudness reference level.
pub const LOUDNESS_REF: f64 = 1e-3;

/// Per-frame acoustic descriptors.
#[derive(Clone, Debug, Default)]
pub struct AcousticDescriptorFrame {
    pub rms_energy: f64,
    /// max - min of RMS over a centered 1 s window
    pub rms_range: f64,
    /// log(1 + rms / 1e-3)
    pub loudness: f64,
    /// Hz; carries the last voiced estimate when unvoiced, 0 before any
    /// voiced frame has been seen
    pub f0: f64,
    pub voiced: bool,
}

pub const DESCRIPTOR_NAMES: [&str; 4] = ["rms_energy", "rms_range", "loudness", "f0"];

/// Compute descriptors for 16 kHz mono audio, one frame per 40 ms.
pub fn compute_descriptors(audio: &[f64]) -> Result<Vec<AcousticDescriptorFrame>> {
    if audio.is_empty() {
        return Err(AffectError::Data("empty audio".into()));
    }
    let frames = audio.len() / FRAME_SAMPLES;
    if frames == 0 {
        return Err(AffectError::Data(format!(
            "audio shorter than one {FRAME_SAMPLES}-sample frame"
        )));
    }
    let mut rms = Vec::with_capacity(frames);
    for f in 0..frames {
        let chunk = &audio[f * FRAME_SAMPLES..(f + 1) * FRAME_SAMPLES];
        rms.push((chunk.iter().map(|x| x * x).sum::<f64>() / chunk.len() as f64).sqrt());
    }

    let half_window = FRAME_RATE / 2; // 1 s sliding window, centered
    let mut out = Vec::with_capacity(frames);
    let mut last_f0 = 0.0;
    for f in 0..frames {
        let lo = f.saturating_sub(half_window);
        let hi = (f + half_window + 1).min(frames);
        let window = &rms[lo..hi];
        let max = window.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let min = window.iter().fold(f64::INFINITY, |m, v| m.min(*v));

        let chunk = &audio[f * FRAME_SAMPLES..(f + 1) * FRAME_SAMPLES];
        let voiced_f0 = estimate_f0(chunk, AUDIO_RATE as f64);
        let voiced = voiced_f0.is_some();
        if let Some(hz) = voiced_f0 {
            last_f0 = hz;
        }
        out.push(AcousticDescriptorFrame {
            rms_energy: rms[f],
            rms_range: max - min,
            loudness: (1.0 + rms[f] / LOUDNESS_REF).ln(),
            f0: last_f0,
            voiced,
        });
    }
    Ok(out)
}

/// Normalized autocorrelation peak search with parabolic refinement.
/// Returns None for unvoiced frames.
pub fn estimate_f0(chunk: &[f64], sample_rate: f64) -> Option<f64> {
    let n = chunk.len();
    let energy: f64 = chunk.iter().map(|x| x * x).sum();
    if energy < 1e-12 {
        return None;
    }
    let lag_min = (sample_rate / F0_BAND.1).floor() as usize; // 40 at 16 kHz
    let lag_max = (sample_rate / F0_BAND.0).ceil() as usize; // 200 at 16 kHz
    if lag_max + 2 >= n {
        return None;
    }
    let corr = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..n - lag {
            acc += chunk[i] * chunk[i + lag];
        }
        acc / energy
    };
    let mut best_lag = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for lag in lag_min..=lag_max {
        let v = corr(lag);
        if v > best_val {
            best_val = v;
            best_lag = lag;
        }
    }
    if best_val < VOICING_THRESHOLD {
        return None;
    }
    // parabolic refinement around the peak
    let (a, b, c) = (corr(best_lag - 1), best_val, corr(best_lag + 1));
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let lag = best_lag as f64 + delta;
    Some(sample_rate / lag)
}

/// One row of the correlation report.
#[derive(Clone, Debug)]
pub struct GateCorrelation {
    pub layer: usize,
    pub cell: usize,
    pub descriptor: &'static str,
    pub rho: f64,
    /// true when the cell trace was constant and no correlation is defined
    pub degenerate: bool,
}

/// The full study: every (cell, descriptor) pair, both recurrent layers.
#[derive(Clone, Debug, Default)]
pub struct GateCorrelationReport {
    pub rows: Vec<GateCorrelation>,
    /// layer-major cell traces, for plot exports
    pub traces: Vec<Vec<f64>>,
    pub descriptors: Vec<AcousticDescriptorFrame>,
}

impl GateCorrelationReport {
    /// Rows sorted by |rho| descending; degenerate rows sink to the end.
    pub fn sorted_rows(&self) -> Vec<&GateCorrelation> {
        let mut rows: Vec<&GateCorrelation> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            b.rho
                .abs()
                .partial_cmp(&a.rho.abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.layer.cmp(&b.layer))
                .then(a.cell.cmp(&b.cell))
        });
        rows
    }

    /// Best absolute correlation against one descriptor.
    pub fn best_against(&self, descriptor: &str) -> Option<&GateCorrelation> {
        self.rows
            .iter()
            .filter(|r| r.descriptor == descriptor && !r.degenerate)
            .max_by(|a, b| {
                a.rho
                    .abs()
                    .partial_cmp(&b.rho.abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    }
}

/// Correlate every recurrent cell of both fusion-LSTM layers with every
/// acoustic descriptor on one recording.
pub fn gate_correlation(trace: &StackTrace, recording: &Recording) -> Result<GateCorrelationReport> {
    let descriptors = compute_descriptors(&recording.audio)?;
    let frames = descriptors.len().min(trace.layer1.steps);
    if frames < 8 {
        return Err(AffectError::Data(
            "recording too short for a correlation study".into(),
        ));
    }
    let series: Vec<Vec<f64>> = (0..4)
        .map(|d| {
            descriptors[..frames]
                .iter()
                .map(|fr| match d {
                    0 => fr.rms_energy,
                    1 => fr.rms_range,
                    2 => fr.loudness,
                    _ => fr.f0,
                })
                .collect()
        })
        .collect();

    let mut report = GateCorrelationReport {
        rows: Vec::new(),
        traces: Vec::new(),
        descriptors,
    };
    for (layer_idx, layer) in [&trace.layer1, &trace.layer2].into_iter().enumerate() {
        for cell in 0..layer.cells {
            let cell_trace: Vec<f64> = layer.cell_series(cell)[..frames].to_vec();
            for (d, name) in DESCRIPTOR_NAMES.iter().enumerate() {
                match metrics::pearson(&cell_trace, &series[d]) {
                    Ok(rho) => report.rows.push(GateCorrelation {
                        layer: layer_idx + 1,
                        cell,
                        descriptor: name,
                        rho,
                        degenerate: false,
                    }),
                    Err(_) => report.rows.push(GateCorrelation {
                        layer: layer_idx + 1,
                        cell,
                        descriptor: name,
                        rho: 0.0,
                        degenerate: true,
                    }),
                }
            }
            report.traces.push(cell_trace);
        }
    }
    Ok(report)
}

/// Normalize a series into [0, 1] for plot overlays.
pub fn normalize_unit(series: &[f64]) -> Vec<f64> {
    let max = series.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let min = series.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if max - min < 1e-12 {
        return vec![0.5; series.len()];
    }
    series.iter().map(|v| (v - min) / (max - min)).collect()
}

/// Hand-measured per-frame features that make the synthetic data learnable
/// without any network: RMS, F0, mean brightness, mouth-curvature proxy.
/// Used to separate "model bug" from "impossible data" in tests.
pub fn oracle_features(recording: &Recording) -> Result<Vec<Vec<f64>>> {
    let descriptors = compute_descriptors(&recording.audio)?;
    let frames = recording.frame_count().min(descriptors.len());
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let pixels = recording.frames.frame_real(f);
        let hw = recording.frames.height * recording.frames.width;
        let brightness = pixels.iter().take(hw).sum::<f64>() / hw as f64;
        let curvature = mouth_mass_offset(&pixels, recording.frames.width, recording.frames.height);
        out.push(vec![
            descriptors[f].rms_energy,
            descriptors[f].f0 / 400.0,
            brightness,
            curvature,
        ]);
    }
    Ok(out)
}

/// Center of mass (in rows, relative to the nominal mouth line) of dark
/// pixels in the lower face region; sign tracks the mouth curvature.
fn mouth_mass_offset(pixels: &[f64], width: usize, height: usize) -> f64 {
    let mouth_y = height as f64 / 2.0 + 16.0;
    // the mouth is drawn near 0.05; the darkest background is ~0.13
    let threshold = 0.11;
    let (mut num, mut den) = (0.0, 0.0);
    for y in height / 2..height {
        for x in width / 5..width * 4 / 5 {
            let v = pixels[y * width + x];
            if v < threshold {
                let weight = threshold - v;
                num += (y as f64 - mouth_y) * weight;
                den += weight;
            }
        }
    }
    if den > 1e-9 {
        num / den / 8.0
    } else {
        0.0
    }
}
