//! Deterministic synthetic recordings shaped like the real corpus: a latent
//! affect trajectory drives a rendered voice-like tone and a schematic face,
//! with the trajectory itself as the gold annotation.
//!
//! By construction arousal drives the audio (fundamental frequency and RMS
//! amplitude are affine in arousal) and valence drives the video (overall
//! brightness and mouth curvature are affine in valence), mirroring which
//! modality predicts which dimension in practice. Everything derives from
//! `(seed, recording index)`, so a dataset regenerates bit-identically.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{AffectError, Result};
use crate::io::{self, FrameSet};
use crate::rng::Rng;

/// Annotation frame rate: one value per 40 ms.
pub const FRAME_RATE: usize = 25;
/// Audio sample rate.
pub const AUDIO_RATE: usize = 16_000;
/// Rendered frame edge length.
pub const FRAME_SIZE: usize = 96;

/// Smooth per-40 ms arousal/valence tracks in [-0.9, 0.9].
#[derive(Clone, Debug, PartialEq)]
pub struct AffectTrajectory {
    pub arousal: Vec<f64>,
    pub valence: Vec<f64>,
    pub duration_s: usize,
}

impl AffectTrajectory {
    pub fn frames(&self) -> usize {
        self.arousal.len()
    }
}

/// Mean-reverting random walk, low-pass smoothed, clamped to [-0.9, 0.9].
/// The smoothing constant bounds successive differences by 0.09 < 0.1.
pub fn gen_trajectory(seed: u64, duration_s: usize) -> Result<AffectTrajectory> {
    if duration_s == 0 || duration_s % 6 != 0 {
        return Err(AffectError::param(format!(
            "duration {duration_s} s must be a positive multiple of 6 s"
        )));
    }
    let frames = duration_s * FRAME_RATE;
    let mut tracks = Vec::with_capacity(2);
    for dim in 0..2u64 {
        let mut rng = Rng::derive(seed, 0xA11E + dim);
        let mut walk = rng.range(-0.5, 0.5);
        let mut smooth = walk;
        let mut track = Vec::with_capacity(frames);
        for _ in 0..frames {
            walk += 0.005 * (0.0 - walk) + 0.06 * rng.normal();
            walk = walk.clamp(-0.9, 0.9);
            smooth += 0.05 * (walk - smooth);
            smooth = smooth.clamp(-0.9, 0.9);
            track.push(smooth);
        }
        tracks.push(track);
    }
    let valence = tracks.pop().unwrap();
    let arousal = tracks.pop().unwrap();
    Ok(AffectTrajectory {
        arousal,
        valence,
        duration_s,
    })
}

fn arousal_f0(a: f64) -> f64 {
    120.0 + 80.0 * (a + 1.0) / 2.0
}

fn arousal_amp(a: f64) -> f64 {
    0.1 + 0.4 * (a + 1.0) / 2.0
}

/// Render the audio track: a phase-continuous harmonic tone whose
/// fundamental is `120 + 80*(a+1)/2` Hz and whose amplitude is
/// `0.1 + 0.4*(a+1)/2`, with -30 dB additive noise. Per-sample parameters
/// interpolate linearly between 40 ms frames.
pub fn render_audio(traj: &AffectTrajectory, seed: u64) -> Vec<f64> {
    let samples = traj.duration_s * AUDIO_RATE;
    let per_frame = AUDIO_RATE / FRAME_RATE;
    let mut rng = Rng::derive(seed, 0xAD10);
    let mut out = Vec::with_capacity(samples);
    let mut phase = 0.0f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let frames = traj.frames();
    for s in 0..samples {
        // linear interpolation between frame centers
        let pos = s as f64 / per_frame as f64;
        let f0 = pos.floor() as usize;
        let f1 = (f0 + 1).min(frames - 1);
        let w = pos - f0 as f64;
        let a = traj.arousal[f0] * (1.0 - w) + traj.arousal[f1] * w;
        let freq = arousal_f0(a);
        let amp = arousal_amp(a);
        phase += two_pi * freq / AUDIO_RATE as f64;
        if phase > two_pi {
            phase -= two_pi;
        }
        let tone = 0.8 * phase.sin() + 0.15 * (2.0 * phase).sin() + 0.05 * (3.0 * phase).sin();
        let noise = amp * 0.0316 * rng.normal(); // -30 dB relative
        out.push(amp * tone + noise);
    }
    out
}

fn valence_brightness(v: f64) -> f64 {
    0.45 + 0.35 * v
}

/// Mouth curvature in pixels at the mouth corners; negative (image
/// coordinates grow downward) means the corners rise into a smile.
fn valence_curvature(v: f64) -> f64 {
    -8.0 * v
}

/// Render the video track: a schematic face whose background brightness and
/// mouth-arc curvature are affine in valence, with ±1 px center jitter.
pub fn render_video(traj: &AffectTrajectory, seed: u64) -> FrameSet {
    let mut rng = Rng::derive(seed, 0x51DE0);
    let mut set = FrameSet::new(FRAME_SIZE, FRAME_SIZE, 3);
    let s = FRAME_SIZE as f64;
    for f in 0..traj.frames() {
        let v = traj.valence[f];
        let bg = valence_brightness(v);
        let curv = valence_curvature(v);
        let jx = rng.range(-1.0, 1.0);
        let jy = rng.range(-1.0, 1.0);
        let (cx, cy) = (s / 2.0 + jx, s / 2.0 + jy);

        let mut frame = vec![0u8; FRAME_SIZE * FRAME_SIZE * 3];
        for y in 0..FRAME_SIZE {
            for x in 0..FRAME_SIZE {
                let dx = (x as f64 - cx) / 30.0;
                let dy = (y as f64 - cy) / 36.0;
                let inside = dx * dx + dy * dy <= 1.0;
                let level = if inside { bg + 0.15 } else { bg };
                let noise = rng.range(-0.008, 0.008);
                let value = ((level + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                let at = (y * FRAME_SIZE + x) * 3;
                frame[at] = value;
                frame[at + 1] = value;
                // slight blue tint keeps the channels distinguishable
                frame[at + 2] = value.saturating_add(6);
            }
        }

        // eyes
        for (ex, ey) in [(cx - 12.0, cy - 12.0), (cx + 12.0, cy - 12.0)] {
            paint_disc(&mut frame, ex, ey, 2.5, 0.05);
        }
        // mouth arc: y = mouth_y + curv * (dx/14)^2
        let mouth_y = cy + 16.0;
        for step in -14..=14 {
            let dx = step as f64;
            let y = mouth_y + curv * (dx / 14.0) * (dx / 14.0);
            paint_disc(&mut frame, cx + dx, y, 1.6, 0.05);
        }
        set.push_frame(&frame).expect("frame size fixed");
    }
    set
}

fn paint_disc(frame: &mut [u8], cx: f64, cy: f64, radius: f64, level: f64) {
    let value = (level * 255.0).round() as u8;
    let r = radius.ceil() as i64;
    let (icx, icy) = (cx.round() as i64, cy.round() as i64);
    for y in icy - r..=icy + r {
        for x in icx - r..=icx + r {
            if x < 0 || y < 0 || x >= FRAME_SIZE as i64 || y >= FRAME_SIZE as i64 {
                continue;
            }
            let (fx, fy) = (x as f64 - cx, y as f64 - cy);
            if fx * fx + fy * fy <= radius * radius {
                let at = (y as usize * FRAME_SIZE + x as usize) * 3;
                frame[at] = value;
                frame[at + 1] = value;
                frame[at + 2] = value;
            }
        }
    }
}

/// One fully materialized recording.
#[derive(Clone, Debug)]
pub struct Recording {
    pub id: String,
    pub seed: u64,
    pub audio: Vec<f64>,
    pub frames: FrameSet,
    pub arousal: Vec<f64>,
    pub valence: Vec<f64>,
}

impl Recording {
    pub fn frame_count(&self) -> usize {
        self.arousal.len()
    }

    pub fn duration_s(&self) -> usize {
        self.frame_count() / FRAME_RATE
    }
}

/// Which recordings belong to which partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn all_ids(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .cloned()
            .collect()
    }

    pub fn of(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "validation" => Ok(&self.validation),
            "test" => Ok(&self.test),
            other => Err(AffectError::param(format!("unknown split '{other}'"))),
        }
    }
}

/// Generation parameters for a whole dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub duration_s: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        // split counts mirror the corpus partitions; 60 s per recording
        // keeps a full run desk-sized
        DatasetSpec {
            seed: 1,
            train: 16,
            validation: 15,
            test: 15,
            duration_s: 60,
        }
    }
}

/// Synthesize recording `index` of a dataset.
pub fn synthesize_recording(spec_seed: u64, index: usize, duration_s: usize) -> Result<Recording> {
    let seed = Rng::derive(spec_seed, 0xBEC0 + index as u64).next_u64();
    let traj = gen_trajectory(seed, duration_s)?;
    let audio = render_audio(&traj, seed);
    let frames = render_video(&traj, seed);
    Ok(Recording {
        id: format!("rec_{index:03}"),
        seed,
        audio,
        frames,
        arousal: traj.arousal,
        valence: traj.valence,
    })
}

/// Generate the full dataset in memory.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(Vec<Recording>, DatasetSplit)> {
    let total = spec.train + spec.validation + spec.test;
    let mut recordings = Vec::with_capacity(total);
    for index in 0..total {
        recordings.push(synthesize_recording(spec.seed, index, spec.duration_s)?);
    }
    let ids: Vec<String> = recordings.iter().map(|r| r.id.clone()).collect();
    let split = DatasetSplit {
        train: ids[..spec.train].to_vec(),
        validation: ids[spec.train..spec.train + spec.validation].to_vec(),
        test: ids[spec.train + spec.validation..].to_vec(),
    };
    Ok((recordings, split))
}

/// Uniform access for trainers: in-memory or on-disk datasets.
pub trait DataSource: Sync {
    fn split(&self) -> &DatasetSplit;
    fn load(&self, id: &str) -> Result<Arc<Recording>>;
}

/// Fully in-memory dataset.
pub struct MemoryDataset {
    split: DatasetSplit,
    recordings: Vec<Arc<Recording>>,
}

impl MemoryDataset {
    pub fn new(recordings: Vec<Recording>, split: DatasetSplit) -> Self {
        MemoryDataset {
            split,
            recordings: recordings.into_iter().map(Arc::new).collect(),
        }
    }

    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (recordings, split) = generate_dataset(spec)?;
        Ok(Self::new(recordings, split))
    }
}

impl DataSource for MemoryDataset {
    fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn load(&self, id: &str) -> Result<Arc<Recording>> {
        self.recordings
            .iter()
            .find(|r| r.id == id)
            .cloned()
            .ok_or_else(|| AffectError::Data(format!("unknown recording '{id}'")))
    }
}

// ---- on-disk layout ----
//
//   <root>/manifest
//   <root>/audio/<id>.wav
//   <root>/video/<id>.frms
//   <root>/labels/<id>.csv

/// Write recordings and split to `dir` in the documented layout.
pub fn write_dataset(recordings: &[Recording], split: &DatasetSplit, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("audio"))?;
    std::fs::create_dir_all(dir.join("video"))?;
    std::fs::create_dir_all(dir.join("labels"))?;

    let mut manifest = String::from("affect-dataset v1\n");
    for rec in recordings {
        io::write_wav(
            &dir.join("audio").join(format!("{}.wav", rec.id)),
            &rec.audio,
            AUDIO_RATE as u32,
        )?;
        io::write_frames(&dir.join("video").join(format!("{}.frms", rec.id)), &rec.frames)?;
        let rows: Vec<Vec<String>> = (0..rec.frame_count())
            .map(|f| {
                vec![
                    io::fmt_f64(f as f64 / FRAME_RATE as f64),
                    io::fmt_f64(rec.arousal[f]),
                    io::fmt_f64(rec.valence[f]),
                ]
            })
            .collect();
        io::write_csv(
            &dir.join("labels").join(format!("{}.csv", rec.id)),
            &["time_s", "arousal", "valence"],
            &rows,
        )?;
        manifest.push_str(&format!("recording {} seed={}\n", rec.id, rec.seed));
    }
    manifest.push_str(&format!("split train = {}\n", split.train.join(" ")));
    manifest.push_str(&format!("split validation = {}\n", split.validation.join(" ")));
    manifest.push_str(&format!("split test = {}\n", split.test.join(" ")));
    io::atomic_write(&dir.join("manifest"), manifest.as_bytes())
}

/// On-disk dataset handle; recordings load lazily.
pub struct DiskDataset {
    root: PathBuf,
    split: DatasetSplit,
    ids: Vec<String>,
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| AffectError::Parse {
            file: manifest_path.display().to_string(),
            offset: 0,
            detail: format!("cannot read manifest: {e}"),
        })?;
        let mut lines = text.lines();
        if lines.next() != Some("affect-dataset v1") {
            return Err(AffectError::Parse {
                file: manifest_path.display().to_string(),
                offset: 0,
                detail: "bad manifest header".into(),
            });
        }
        let mut ids = Vec::new();
        let mut split = DatasetSplit::default();
        for line in lines {
            if let Some(rest) = line.strip_prefix("recording ") {
                let id = rest.split_whitespace().next().unwrap_or_default();
                ids.push(id.to_string());
            } else if let Some(rest) = line.strip_prefix("split ") {
                let (name, members) = rest.split_once(" = ").ok_or_else(|| AffectError::Parse {
                    file: manifest_path.display().to_string(),
                    offset: 0,
                    detail: format!("malformed split line '{line}'"),
                })?;
                let members: Vec<String> = members
                    .split_whitespace()
                    .map(|s| s.to_string())
                    .collect();
                match name {
                    "train" => split.train = members,
                    "validation" => split.validation = members,
                    "test" => split.test = members,
                    _ => {}
                }
            }
        }
        Ok(DiskDataset {
            root: root.to_path_buf(),
            split,
            ids,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn load_recording(&self, id: &str) -> Result<Recording> {
        if !self.ids.iter().any(|i| i == id) {
            return Err(AffectError::Data(format!("unknown recording '{id}'")));
        }
        let (audio, rate) = io::read_wav(&self.root.join("audio").join(format!("{id}.wav")))?;
        if rate as usize != AUDIO_RATE {
            return Err(AffectError::Data(format!(
                "recording '{id}' has sample rate {rate}, expected {AUDIO_RATE}"
            )));
        }
        let frames = io::read_frames(&self.root.join("video").join(format!("{id}.frms")))?;
        let labels_path = self.root.join("labels").join(format!("{id}.csv"));
        let text = std::fs::read_to_string(&labels_path).map_err(|e| AffectError::Parse {
            file: labels_path.display().to_string(),
            offset: 0,
            detail: format!("cannot read labels: {e}"),
        })?;
        let mut arousal = Vec::new();
        let mut valence = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                if line != "time_s,arousal,valence" {
                    return Err(AffectError::Parse {
                        file: labels_path.display().to_string(),
                        offset: 0,
                        detail: "bad label header".into(),
                    });
                }
                continue;
            }
            let mut cells = line.split(',');
            let bad = |detail: String| AffectError::Parse {
                file: labels_path.display().to_string(),
                offset: lineno as u64,
                detail,
            };
            let _time: f64 = cells
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad time cell".into()))?;
            let a: f64 = cells
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad arousal cell".into()))?;
            let v: f64 = cells
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad valence cell".into()))?;
            arousal.push(a);
            valence.push(v);
        }
        Ok(Recording {
            id: id.to_string(),
            seed: 0, // seeds live in the manifest; not needed to use the data
            audio,
            frames,
            arousal,
            valence,
        })
    }
}

impl DataSource for DiskDataset {
    fn split(&self) -> &DatasetSplit {
        &self.split
    }

    fn load(&self, id: &str) -> Result<Arc<Recording>> {
        Ok(Arc::new(self.load_recording(id)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_is_deterministic_and_smooth() {
        let a = gen_trajectory(7, 60).unwrap();
        let b = gen_trajectory(7, 60).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames(), 1500);
        assert!(gen_trajectory(7, 5).is_err());

        // smoothness and range over many seeds
        for seed in 0..100 {
            let t = gen_trajectory(seed, 12).unwrap();
            for track in [&t.arousal, &t.valence] {
                assert!(track.iter().all(|v| v.abs() <= 0.9));
                for w in track.windows(2) {
                    assert!((w[1] - w[0]).abs() <= 0.1, "jump {}", (w[1] - w[0]).abs());
                }
            }
        }
    }

    #[test]
    fn audio_rms_tracks_arousal() {
        let quiet = AffectTrajectory {
            arousal: vec![-1.0; 150],
            valence: vec![0.0; 150],
            duration_s: 6,
        };
        let loud = AffectTrajectory {
            arousal: vec![1.0; 150],
            valence: vec![0.0; 150],
            duration_s: 6,
        };
        let rms = |xs: &[f64]| (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt();
        let q = rms(&render_audio(&quiet, 3));
        let l = rms(&render_audio(&loud, 3));
        let ratio = q / l;
        assert!((ratio - 0.2).abs() < 0.01, "rms ratio {ratio}");
    }

    #[test]
    fn audio_is_deterministic_per_seed() {
        let traj = gen_trajectory(9, 6).unwrap();
        let a = render_audio(&traj, 5);
        let b = render_audio(&traj, 5);
        assert_eq!(a, b);
        let c = render_audio(&traj, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn video_contract_and_mouth_asymmetry() {
        let smile_traj = AffectTrajectory {
            arousal: vec![0.0; 25],
            valence: vec![0.9; 25],
            duration_s: 1, // duration only used for audio length
        };
        let frown_traj = AffectTrajectory {
            arousal: vec![0.0; 25],
            valence: vec![-0.9; 25],
            duration_s: 1,
        };
        let smile = render_video(&smile_traj, 11);
        let frown = render_video(&frown_traj, 11);
        assert_eq!(smile.len(), 25);
        assert_eq!((smile.height, smile.width, smile.channels), (96, 96, 3));

        // center of mass of dark pixels in the mouth region: above the
        // mouth line for a smile, below for a frown
        let mass_offset = |set: &FrameSet| {
            let f = set.frame_real(0);
            let hw = 96 * 96;
            let mouth_y = 48.0 + 16.0;
            let (mut num, mut den) = (0.0, 0.0);
            for y in 48..96 {
                for x in 20..76 {
                    let v = f[y * 96 + x];
                    if v < 0.11 {
                        num += (y as f64 - mouth_y) * (0.11 - v);
                        den += 0.11 - v;
                    }
                }
            }
            let _ = hw;
            num / den.max(1e-9)
        };
        let s = mass_offset(&smile);
        let fr = mass_offset(&frown);
        assert!(s < 0.0, "smile mass should sit above the mouth line: {s}");
        assert!(fr > 0.0, "frown mass should sit below the mouth line: {fr}");
    }

    #[test]
    fn dataset_regenerates_identically() {
        let spec = DatasetSpec {
            seed: 21,
            train: 2,
            validation: 1,
            test: 1,
            duration_s: 6,
        };
        let (a, split_a) = generate_dataset(&spec).unwrap();
        let (b, split_b) = generate_dataset(&spec).unwrap();
        assert_eq!(split_a, split_b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.audio, y.audio);
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.arousal, y.arousal);
        }
        assert_eq!(a[0].frame_count(), 150);
        assert_eq!(a[0].audio.len(), 6 * AUDIO_RATE);
    }

    #[test]
    fn disk_round_trip() {
        let dir = std::env::temp_dir().join("affect_synth_roundtrip");
        std::fs::remove_dir_all(&dir).ok();
        let spec = DatasetSpec {
            seed: 33,
            train: 1,
            validation: 1,
            test: 0,
            duration_s: 6,
        };
        let (recordings, split) = generate_dataset(&spec).unwrap();
        write_dataset(&recordings, &split, &dir).unwrap();

        let ds = DiskDataset::open(&dir).unwrap();
        assert_eq!(ds.split(), &split);
        let rec = ds.load_recording("rec_000").unwrap();
        // annotations are lossless
        assert_eq!(rec.arousal, recordings[0].arousal);
        assert_eq!(rec.valence, recordings[0].valence);
        // audio is lossless within PCM quantization
        for (a, b) in rec.audio.iter().zip(&recordings[0].audio) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        // frames are exact
        assert_eq!(rec.frames, recordings[0].frames);

        // missing labels file is a parse error
        std::fs::remove_file(dir.join("labels/rec_001.csv")).unwrap();
        assert!(matches!(
            ds.load_recording("rec_001"),
            Err(AffectError::Parse { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
