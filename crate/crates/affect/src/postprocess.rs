//! Prediction post-processing: median filtering, centring, scaling, and
//! time-shifting, fitted greedily on a validation pair and replayed on
//! test predictions.
//!
//! Steps apply in that fixed order, each kept only if it strictly improved
//! validation concordance. The fitted chain is a plain value that can be
//! serialized, so a test-set application is exactly the validation-time
//! computation.

use crate::error::{AffectError, Result};
use crate::metrics;

/// Frames per second of every track this module touches.
pub const TRACK_RATE: usize = 25;

/// Candidate median windows: 0.4 s to 20 s in a doubling progression,
/// rounded to odd frame counts.
pub const MEDIAN_GRID_SECONDS: [f64; 7] = [0.4, 0.8, 1.6, 3.2, 6.4, 12.8, 20.0];

/// Largest forward shift searched: 10 s.
pub const MAX_SHIFT_FRAMES: usize = 250;

/// A fitted chain. Each step is present only if it improved validation
/// concordance when fitted; `rho_trace` records the concordance before
/// fitting and after each kept step.
#[derive(Clone, Debug, PartialEq)]
pub struct PostProcessChain {
    pub median_window: Option<usize>,
    pub center_bias: Option<f64>,
    pub scale_ratio: Option<f64>,
    pub shift_frames: Option<usize>,
    pub rho_trace: Vec<f64>,
}

impl PostProcessChain {
    pub fn identity() -> Self {
        PostProcessChain {
            median_window: None,
            center_bias: None,
            scale_ratio: None,
            shift_frames: None,
            rho_trace: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.median_window.is_none()
            && self.center_bias.is_none()
            && self.scale_ratio.is_none()
            && self.shift_frames.is_none()
    }

    /// Structured-text serialization: one line per step with its parameter,
    /// kept flag, and the validation rho before/after fitting.
    pub fn to_text(&self) -> String {
        let mut out = String::from("postprocess-chain v1\n");
        let fmt_opt_usize =
            |name: &str, v: Option<usize>| match v {
                Some(x) => format!("{name} kept=true value={x}\n"),
                None => format!("{name} kept=false\n"),
            };
        out.push_str(&fmt_opt_usize("median_window", self.median_window));
        match self.center_bias {
            Some(b) => out.push_str(&format!("center_bias kept=true value={}\n", crate::io::fmt_f64(b))),
            None => out.push_str("center_bias kept=false\n"),
        }
        match self.scale_ratio {
            Some(r) => out.push_str(&format!("scale_ratio kept=true value={}\n", crate::io::fmt_f64(r))),
            None => out.push_str("scale_ratio kept=false\n"),
        }
        out.push_str(&fmt_opt_usize("shift_frames", self.shift_frames));
        let trace: Vec<String> = self.rho_trace.iter().map(|v| crate::io::fmt_f64(*v)).collect();
        out.push_str(&format!("rho_trace = {}\n", trace.join(" ")));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut chain = PostProcessChain::identity();
        let mut lines = text.lines();
        if lines.next() != Some("postprocess-chain v1") {
            return Err(AffectError::Parse {
                file: "<chain>".into(),
                offset: 0,
                detail: "bad chain header".into(),
            });
        }
        for line in lines {
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            let value_of = |rest: &[&str]| -> Option<String> {
                rest.iter()
                    .find_map(|w| w.strip_prefix("value=").map(|s| s.to_string()))
            };
            let kept = rest.iter().any(|w| *w == "kept=true");
            match key {
                "median_window" if kept => {
                    chain.median_window = value_of(&rest).and_then(|v| v.parse().ok())
                }
                "center_bias" if kept => {
                    chain.center_bias = value_of(&rest).and_then(|v| v.parse().ok())
                }
                "scale_ratio" if kept => {
                    chain.scale_ratio = value_of(&rest).and_then(|v| v.parse().ok())
                }
                "shift_frames" if kept => {
                    chain.shift_frames = value_of(&rest).and_then(|v| v.parse().ok())
                }
                "rho_trace" => {
                    chain.rho_trace = rest
                        .iter()
                        .skip(1) // the '='
                        .filter_map(|w| w.parse().ok())
                        .collect();
                }
                _ => {}
            }
        }
        Ok(chain)
    }
}

/// Centered sliding median with shrunken windows at the edges; length
/// preserving. The window must be odd, at least 3, and no longer than the
/// track.
pub fn median_filter(pred: &[f64], window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window < 3 {
        return Err(AffectError::param(format!(
            "median window must be odd and >= 3, got {window}"
        )));
    }
    if window > pred.len() {
        return Err(AffectError::param(format!(
            "median window {window} exceeds track length {}",
            pred.len()
        )));
    }
    let half = window / 2;
    let mut out = Vec::with_capacity(pred.len());
    let mut scratch: Vec<f64> = Vec::with_capacity(window);
    for i in 0..pred.len() {
        let lo = i.saturating_sub(half);
        let hi = (i + half + 1).min(pred.len());
        scratch.clear();
        scratch.extend_from_slice(&pred[lo..hi]);
        scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = scratch.len();
        let median = if m % 2 == 1 {
            scratch[m / 2]
        } else {
            0.5 * (scratch[m / 2 - 1] + scratch[m / 2])
        };
        out.push(median);
    }
    Ok(out)
}

/// Add a constant bias.
pub fn center(pred: &[f64], bias: f64) -> Vec<f64> {
    pred.iter().map(|v| v + bias).collect()
}

/// Scale deviations about the prediction mean by `ratio`, leaving the mean
/// alone so an earlier centring step is not undone.
pub fn scale(pred: &[f64], ratio: f64) -> Result<Vec<f64>> {
    if ratio.is_nan() || ratio <= 0.0 {
        return Err(AffectError::param(format!(
            "scale ratio must be positive, got {ratio}"
        )));
    }
    if ratio == 1.0 {
        return Ok(pred.to_vec());
    }
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    Ok(pred.iter().map(|v| mean + ratio * (v - mean)).collect())
}

/// Shift the prediction forward in time by `k` frames: `out[t] = pred[t-k]`,
/// holding the first value over the first `k` frames.
pub fn time_shift(pred: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= pred.len() {
        return Err(AffectError::param(format!(
            "shift {k} out of range for track of {}",
            pred.len()
        )));
    }
    let mut out = vec![pred[0]; pred.len()];
    out[k..].copy_from_slice(&pred[..pred.len() - k]);
    Ok(out)
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_of(xs: &[f64]) -> f64 {
    let mu = mean_of(xs);
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Odd frame counts for the documented second grid.
pub fn median_windows_frames() -> Vec<usize> {
    MEDIAN_GRID_SECONDS
        .iter()
        .map(|s| {
            let frames = (s * TRACK_RATE as f64).round() as usize;
            if frames % 2 == 0 {
                frames + 1
            } else {
                frames
            }
        })
        .collect()
}

/// Greedy fit in the fixed order median -> center -> scale -> shift.
/// Each step searches its grid and is kept only on a strict improvement of
/// validation concordance; grid ties resolve to the smallest parameter.
pub fn fit_chain(val_pred: &[f64], val_gold: &[f64]) -> Result<PostProcessChain> {
    let mut chain = PostProcessChain::identity();
    let mut current = val_pred.to_vec();
    let mut best_rho = metrics::ccc(&current, val_gold)?;
    chain.rho_trace.push(best_rho);

    // (i) median filtering
    let mut best_window = None;
    for window in median_windows_frames() {
        if window > current.len() {
            continue;
        }
        let candidate = median_filter(&current, window)?;
        if let Ok(rho) = metrics::ccc(&candidate, val_gold) {
            if rho > best_rho {
                best_rho = rho;
                best_window = Some(window);
            }
        }
    }
    if let Some(window) = best_window {
        current = median_filter(&current, window)?;
        chain.median_window = Some(window);
        chain.rho_trace.push(best_rho);
    }

    // (ii) centring with the fitted bias
    let bias = mean_of(val_gold) - mean_of(&current);
    let candidate = center(&current, bias);
    if let Ok(rho) = metrics::ccc(&candidate, val_gold) {
        if rho > best_rho {
            best_rho = rho;
            current = candidate;
            chain.center_bias = Some(bias);
            chain.rho_trace.push(best_rho);
        }
    }

    // (iii) scaling with the fitted deviation ratio
    let pred_std = std_of(&current);
    if pred_std > 1e-12 {
        let ratio = std_of(val_gold) / pred_std;
        if ratio > 0.0 {
            let candidate = scale(&current, ratio)?;
            if let Ok(rho) = metrics::ccc(&candidate, val_gold) {
                if rho > best_rho {
                    best_rho = rho;
                    current = candidate;
                    chain.scale_ratio = Some(ratio);
                    chain.rho_trace.push(best_rho);
                }
            }
        }
    }

    // (iv) forward time shift, every frame up to 10 s
    let mut best_shift = None;
    for k in 1..=MAX_SHIFT_FRAMES.min(current.len().saturating_sub(1)) {
        let candidate = time_shift(&current, k)?;
        if let Ok(rho) = metrics::ccc(&candidate, val_gold) {
            if rho > best_rho {
                best_rho = rho;
                best_shift = Some(k);
            }
        }
    }
    if let Some(k) = best_shift {
        chain.shift_frames = Some(k);
        chain.rho_trace.push(best_rho);
    }

    Ok(chain)
}

/// Apply the kept steps, in order, to a fresh track.
pub fn apply_chain(chain: &PostProcessChain, pred: &[f64]) -> Result<Vec<f64>> {
    let mut out = pred.to_vec();
    if let Some(window) = chain.median_window {
        out = median_filter(&out, window)?;
    }
    if let Some(bias) = chain.center_bias {
        out = center(&out, bias);
    }
    if let Some(ratio) = chain.scale_ratio {
        out = scale(&out, ratio)?;
    }
    if let Some(k) = chain.shift_frames {
        out = time_shift(&out, k)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute_force_median(pred: &[f64], window: usize) -> Vec<f64> {
        let half = window / 2;
        (0..pred.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(pred.len());
                let mut w: Vec<f64> = pred[lo..hi].to_vec();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if w.len() % 2 == 1 {
                    w[w.len() / 2]
                } else {
                    0.5 * (w[w.len() / 2 - 1] + w[w.len() / 2])
                }
            })
            .collect()
    }

    #[test]
    fn median_basics() {
        let constant = vec![0.4; 20];
        assert_eq!(median_filter(&constant, 5).unwrap(), constant);

        let track = [1.0, 5.0, 2.0, 8.0, 3.0];
        let filtered = median_filter(&track, 3).unwrap();
        assert_eq!(filtered[1..4], [2.0, 5.0, 3.0]);

        let mut impulse = vec![0.0; 11];
        impulse[5] = 10.0;
        let cleaned = median_filter(&impulse, 3).unwrap();
        assert!(cleaned.iter().all(|v| *v == 0.0));

        assert!(median_filter(&track, 4).is_err());
        assert!(median_filter(&track, 7).is_err());
    }

    #[test]
    fn median_matches_brute_force_oracle() {
        let mut rng = Rng::new(14);
        for _ in 0..200 {
            let n = 8 + rng.index(60);
            let track: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let window = [3, 5, 7][rng.index(3)].min(if n % 2 == 0 { n - 1 } else { n });
            let fast = median_filter(&track, window).unwrap();
            let slow = brute_force_median(&track, window);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn center_and_scale_match_validation_moments() {
        let mut rng = Rng::new(15);
        let gold: Vec<f64> = (0..200).map(|_| rng.normal() * 0.3 + 0.1).collect();
        let pred: Vec<f64> = gold.iter().map(|g| 0.5 * g - 0.2 + 0.05 * rng.normal()).collect();

        assert_eq!(center(&pred, 0.0), pred);
        let bias = mean_of(&gold) - mean_of(&pred);
        let centered = center(&pred, bias);
        assert!((mean_of(&centered) - mean_of(&gold)).abs() < 1e-12);

        assert_eq!(scale(&centered, 1.0).unwrap(), centered);
        let ratio = std_of(&gold) / std_of(&centered);
        let scaled = scale(&centered, ratio).unwrap();
        assert!((std_of(&scaled) - std_of(&gold)).abs() < 1e-12);
        // scaling about the mean leaves the centring intact
        assert!((mean_of(&scaled) - mean_of(&gold)).abs() < 1e-12);

        let doubled = scale(&pred, 2.0).unwrap();
        let m = mean_of(&pred);
        for (d, p) in doubled.iter().zip(&pred) {
            assert!((d - (m + 2.0 * (p - m))).abs() < 1e-12);
        }
        assert!(scale(&pred, 0.0).is_err());
    }

    #[test]
    fn shift_holds_leading_edge() {
        let track = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(time_shift(&track, 0).unwrap(), track);
        assert_eq!(time_shift(&track, 2).unwrap(), [1.0, 1.0, 1.0, 2.0, 3.0]);
        let constant = [0.3; 6];
        assert_eq!(time_shift(&constant, 4).unwrap(), constant);
        assert!(time_shift(&track, 5).is_err());
    }

    #[test]
    fn perfect_predictions_fit_an_empty_chain() {
        let mut rng = Rng::new(16);
        let gold: Vec<f64> = (0..400).map(|_| (rng.normal() * 0.2).clamp(-0.9, 0.9)).collect();
        let chain = fit_chain(&gold, &gold).unwrap();
        assert!(chain.is_identity(), "{chain:?}");
        assert_eq!(chain.rho_trace, vec![1.0]);
    }

    /// Slow two-tone gold track with its opening held constant, and the
    /// prediction running `k0` frames ahead of it (ratings lag the signal).
    fn delayed_copy(n: usize, k0: usize) -> (Vec<f64>, Vec<f64>) {
        let mut gold: Vec<f64> = (0..n)
            .map(|t| {
                let x = t as f64;
                0.55 * (2.0 * std::f64::consts::PI * x / 1500.0).sin()
                    + 0.2 * (2.0 * std::f64::consts::PI * x / 3000.0 + 1.0).sin()
            })
            .collect();
        for i in 0..k0 {
            gold[i] = gold[k0];
        }
        let pred: Vec<f64> = (0..n).map(|t| gold[(t + k0).min(n - 1)]).collect();
        (pred, gold)
    }

    #[test]
    fn fit_recovers_injected_delay() {
        // A forward shift of exactly k0 realigns prediction and ratings.
        let (pred, gold) = delayed_copy(3000, 25);
        let chain = fit_chain(&pred, &gold).unwrap();
        assert_eq!(chain.shift_frames, Some(25), "{chain:?}");
        let fixed = apply_chain(&chain, &pred).unwrap();
        let rho = crate::metrics::ccc(&fixed, &gold).unwrap();
        assert!(rho >= 0.999, "post-shift rho {rho}");
    }

    #[test]
    fn rho_trace_is_non_decreasing_and_replay_matches() {
        let mut rng = Rng::new(18);
        let n = 1000;
        let mut gold = Vec::with_capacity(n);
        let mut v = 0.2;
        for _ in 0..n {
            v += 0.01 * (0.1 - v) + 0.04 * rng.normal();
            gold.push(v.clamp(-0.9, 0.9));
        }
        // biased, scaled, delayed, noisy copy
        let pred: Vec<f64> = (0..n)
            .map(|t| 0.5 * gold[(t + 10).min(n - 1)] + 0.2 + 0.02 * rng.normal())
            .collect();

        let chain = fit_chain(&pred, &gold).unwrap();
        for w in chain.rho_trace.windows(2) {
            assert!(w[1] >= w[0], "trace decreased: {:?}", chain.rho_trace);
        }
        // replay on the validation predictions reproduces the fitted rho
        let replayed = apply_chain(&chain, &pred).unwrap();
        let rho = crate::metrics::ccc(&replayed, &gold).unwrap();
        assert_eq!(rho, *chain.rho_trace.last().unwrap());

        // identity chain applies as identity; applications are deterministic
        let id = PostProcessChain::identity();
        assert_eq!(apply_chain(&id, &pred).unwrap(), pred);
        assert_eq!(
            apply_chain(&chain, &pred).unwrap(),
            apply_chain(&chain, &pred).unwrap()
        );
    }

    #[test]
    fn chain_text_round_trip() {
        let mut rng = Rng::new(19);
        let n = 600;
        let gold: Vec<f64> = (0..n).map(|i| (i as f64 / 40.0).sin() * 0.5).collect();
        let pred: Vec<f64> = (0..n)
            .map(|t: usize| 0.7 * gold[t.saturating_sub(7)] - 0.1 + 0.03 * rng.normal())
            .collect();
        let chain = fit_chain(&pred, &gold).unwrap();
        let text = chain.to_text();
        let back = PostProcessChain::from_text(&text).unwrap();
        assert_eq!(back.median_window, chain.median_window);
        assert_eq!(back.center_bias, chain.center_bias);
        assert_eq!(back.scale_ratio, chain.scale_ratio);
        assert_eq!(back.shift_frames, chain.shift_frames);
    }

    #[test]
    fn grid_windows_are_odd_and_in_range() {
        let windows = median_windows_frames();
        assert_eq!(windows.len(), 7);
        for w in &windows {
            assert!(w % 2 == 1);
            assert!((9..=501).contains(w));
        }
        assert_eq!(windows[0], 11); // 0.4 s at 25 Hz, rounded odd
    }
}
