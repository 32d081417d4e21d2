//! Training orchestration: unimodal pretraining, multimodal fusion
//! training, prediction, checkpointing, and the sequence-length ablation.
//!
//! One trainer owns the parameters for the duration of a run. Batch items
//! are forwarded on independent tapes (optionally across worker threads)
//! and their gradients are reduced in item order, so a fixed seed
//! reproduces the whole parameter trajectory bit for bit regardless of
//! thread count.

use std::path::Path;
use std::sync::Arc;

use crate::error::{AffectError, Result};
use crate::lstm::{self, LstmStack, LstmVars, OutputHead, StackTrace};
use crate::metrics;
use crate::rng::Rng;
use crate::speech::{self, SpeechNet, SpeechNetConfig, SpeechVars};
use crate::synth::{DataSource, Recording};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::visual::{self, Frame, VisualNet, VisualNetConfig, VisualVars};

/// Training objective. Evaluation always reports concordance regardless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ccc,
    Mse,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ccc" => Ok(Objective::Ccc),
            "mse" => Ok(Objective::Mse),
            other => Err(AffectError::param(format!("unknown objective '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ccc => "ccc",
            Objective::Mse => "mse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Speech,
    Visual,
    Fusion,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(Modality::Speech),
            "visual" => Ok(Modality::Visual),
            "fusion" => Ok(Modality::Fusion),
            other => Err(AffectError::param(format!("unknown modality '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modality::Speech => "speech",
            Modality::Visual => "visual",
            Modality::Fusion => "fusion",
        }
    }

    /// The dimension a modality is expected to carry: speech drives
    /// arousal, video drives valence, fusion needs both.
    fn target_metric(&self, ccc: (f64, f64)) -> f64 {
        match self {
            Modality::Speech => ccc.0,
            Modality::Visual => ccc.1,
            Modality::Fusion => ccc.0.min(ccc.1),
        }
    }
}

/// Everything a training run needs to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub audio_batch: usize,
    pub video_batch: usize,
    pub epochs: usize,
    /// Frames per recurrent sub-sequence (75, 150, or 300).
    pub sequence_length: usize,
    pub objective: Objective,
    pub seed: u64,
    /// Hard cap on optimizer steps across all epochs, if set.
    pub max_steps: Option<usize>,
    /// Stop early once the modality's training concordance reaches this.
    pub target_train_ccc: Option<f64>,
    /// Steps between concordance evaluations.
    pub eval_every_steps: usize,
    /// Global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Train only the recurrent layers and head during fusion.
    pub freeze_extractors: bool,
    pub threads: usize,
    pub speech: SpeechNetConfig,
    pub visual: VisualNetConfig,
    pub lstm_hidden: usize,
}

impl TrainConfig {
    /// The published recipe: learning rate 1e-4, audio batches of 25,
    /// video batches of 2, 60 epochs, sequence length 150, full-scale
    /// extractors, 256-cell LSTM layers.
    pub fn published(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            audio_batch: 25,
            video_batch: 2,
            epochs: 60,
            sequence_length: 150,
            objective: Objective::Ccc,
            seed,
            max_steps: None,
            target_train_ccc: None,
            eval_every_steps: 25,
            grad_clip: Some(5.0),
            freeze_extractors: false,
            threads: default_threads(),
            speech: SpeechNetConfig::full(),
            visual: VisualNetConfig::full(),
            lstm_hidden: 256,
        }
    }

    /// Desk scale: tiny extractors, 32-cell LSTM layers, a faster learning
    /// rate, small batches, capped steps.
    pub fn tiny(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            audio_batch: 4,
            video_batch: 2,
            epochs: 1000,
            sequence_length: 150,
            objective: Objective::Ccc,
            seed,
            max_steps: Some(500),
            target_train_ccc: None,
            eval_every_steps: 20,
            grad_clip: Some(5.0),
            freeze_extractors: false,
            threads: default_threads(),
            speech: SpeechNetConfig::tiny(),
            visual: VisualNetConfig::tiny(),
            lstm_hidden: 32,
        }
    }

    pub fn batch_for(&self, modality: Modality) -> usize {
        match modality {
            Modality::Speech => self.audio_batch,
            // frames dominate memory once video is involved
            Modality::Visual | Modality::Fusion => self.video_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(AffectError::Config("non-positive learning rate".into()));
        }
        if self.sequence_length == 0 {
            return Err(AffectError::Config("zero sequence length".into()));
        }
        if self.audio_batch == 0 || self.video_batch == 0 {
            return Err(AffectError::Config("zero batch size".into()));
        }
        self.speech.validate()?;
        self.visual.validate()
    }
}

/// Worker count: the `AFFECT_E2E_THREADS` environment variable, else the
/// machine's parallelism.
pub fn default_threads() -> usize {
    if let Ok(v) = std::env::var("AFFECT_E2E_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// The trained system: both extractors, the recurrent stack over the fused
/// features, and the output head. Unimodal pretraining phases reuse the
/// same structure with the stack sized for that modality's features alone.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub speech: SpeechNet,
    pub visual: VisualNet,
    pub fusion: LstmStack,
    pub head: OutputHead,
    pub lstm_hidden: usize,
    pub meta: BundleMeta,
}

#[derive(Clone, Debug, Default)]
pub struct BundleMeta {
    pub seed: u64,
    pub epoch: usize,
    pub objective: String,
    pub sequence_length: usize,
    pub modality: String,
}

impl ModelBundle {
    /// Width of the concatenated per-frame feature vector.
    pub fn fusion_input_width(&self) -> usize {
        self.speech.config.feature_dim() + self.visual.config.output_features
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.meta.modality.as_str() {
            "speech" => self.speech.config.feature_dim(),
            "visual" => self.visual.config.output_features,
            _ => self.fusion_input_width(),
        };
        let got = self.fusion.layer1.input_size;
        if want != got {
            return Err(AffectError::dim(format!(
                "recurrent stack expects {got} inputs but the feature path emits {want}"
            )));
        }
        Ok(())
    }

    /// Freshly initialized bundle for a phase, with parameter streams
    /// derived from the config seed.
    pub fn init(modality: Modality, config: &TrainConfig) -> Result<Self> {
        let mut rng_speech = Rng::derive(config.seed, 0x5133C4);
        let mut rng_visual = Rng::derive(config.seed, 0x715A11);
        let speech = SpeechNet::init(config.speech.clone(), &mut rng_speech)?;
        let visual = VisualNet::init(config.visual.clone(), &mut rng_visual)?;
        Self::with_extractors(modality, speech, visual, config)
    }

    fn with_extractors(
        modality: Modality,
        speech: SpeechNet,
        visual: VisualNet,
        config: &TrainConfig,
    ) -> Result<Self> {
        let input = match modality {
            Modality::Speech => speech.config.feature_dim(),
            Modality::Visual => visual.config.output_features,
            Modality::Fusion => speech.config.feature_dim() + visual.config.output_features,
        };
        let mut rng_stack = Rng::derive(config.seed, 0x157A);
        let mut rng_head = Rng::derive(config.seed, 0x4EAD);
        Ok(ModelBundle {
            speech,
            visual,
            fusion: LstmStack::init(input, config.lstm_hidden, &mut rng_stack),
            head: OutputHead::init(config.lstm_hidden, &mut rng_head),
            lstm_hidden: config.lstm_hidden,
            meta: BundleMeta {
                seed: config.seed,
                epoch: 0,
                objective: config.objective.name().to_string(),
                sequence_length: config.sequence_length,
                modality: modality.name().to_string(),
            },
        })
    }
}

/// Named read-only views of every parameter, in canonical order.
pub fn bundle_param_view(bundle: &ModelBundle) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![
        ("speech.kernels_1".into(), &bundle.speech.kernels_1),
        ("speech.kernels_2".into(), &bundle.speech.kernels_2),
        ("visual.stem".into(), &bundle.visual.stem),
    ];
    for (i, block) in bundle.visual.blocks.iter().enumerate() {
        out.push((format!("visual.block{i:02}.reduce"), &block.reduce));
        out.push((format!("visual.block{i:02}.conv"), &block.conv));
        out.push((format!("visual.block{i:02}.expand"), &block.expand));
        if let Some(p) = block.projection.as_ref() {
            out.push((format!("visual.block{i:02}.projection"), p));
        }
    }
    out.push(("visual.proj_weight".into(), &bundle.visual.proj_weight));
    out.push(("visual.proj_bias".into(), &bundle.visual.proj_bias));
    out.push(("fusion.layer1.w_input".into(), &bundle.fusion.layer1.w_input));
    out.push((
        "fusion.layer1.w_recurrent".into(),
        &bundle.fusion.layer1.w_recurrent,
    ));
    out.push(("fusion.layer1.bias".into(), &bundle.fusion.layer1.bias));
    out.push(("fusion.layer2.w_input".into(), &bundle.fusion.layer2.w_input));
    out.push((
        "fusion.layer2.w_recurrent".into(),
        &bundle.fusion.layer2.w_recurrent,
    ));
    out.push(("fusion.layer2.bias".into(), &bundle.fusion.layer2.bias));
    out.push(("head.weight".into(), &bundle.head.weight));
    out.push(("head.bias".into(), &bundle.head.bias));
    out
}

/// Mutable twin of [`bundle_param_view`]; the orders must agree.
pub fn bundle_param_slots(bundle: &mut ModelBundle) -> Vec<(String, &mut Tensor)> {
    let mut out: Vec<(String, &mut Tensor)> = vec![
        ("speech.kernels_1".into(), &mut bundle.speech.kernels_1),
        ("speech.kernels_2".into(), &mut bundle.speech.kernels_2),
        ("visual.stem".into(), &mut bundle.visual.stem),
    ];
    for (i, block) in bundle.visual.blocks.iter_mut().enumerate() {
        out.push((format!("visual.block{i:02}.reduce"), &mut block.reduce));
        out.push((format!("visual.block{i:02}.conv"), &mut block.conv));
        out.push((format!("visual.block{i:02}.expand"), &mut block.expand));
        if let Some(p) = block.projection.as_mut() {
            out.push((format!("visual.block{i:02}.projection"), p));
        }
    }
    out.push((
        "visual.proj_weight".into(),
        &mut bundle.visual.proj_weight,
    ));
    out.push(("visual.proj_bias".into(), &mut bundle.visual.proj_bias));
    out.push((
        "fusion.layer1.w_input".into(),
        &mut bundle.fusion.layer1.w_input,
    ));
    out.push((
        "fusion.layer1.w_recurrent".into(),
        &mut bundle.fusion.layer1.w_recurrent,
    ));
    out.push(("fusion.layer1.bias".into(), &mut bundle.fusion.layer1.bias));
    out.push((
        "fusion.layer2.w_input".into(),
        &mut bundle.fusion.layer2.w_input,
    ));
    out.push((
        "fusion.layer2.w_recurrent".into(),
        &mut bundle.fusion.layer2.w_recurrent,
    ));
    out.push(("fusion.layer2.bias".into(), &mut bundle.fusion.layer2.bias));
    out.push(("head.weight".into(), &mut bundle.head.weight));
    out.push(("head.bias".into(), &mut bundle.head.bias));
    out
}

/// Which parameter groups receive gradients in a phase.
#[derive(Clone, Copy, Debug)]
struct TrainMask {
    speech: bool,
    visual: bool,
    fusion: bool,
    head: bool,
}

impl TrainMask {
    fn for_phase(modality: Modality, freeze_extractors: bool) -> Self {
        match modality {
            Modality::Speech => TrainMask {
                speech: true,
                visual: false,
                fusion: true,
                head: true,
            },
            Modality::Visual => TrainMask {
                speech: false,
                visual: true,
                fusion: true,
                head: true,
            },
            Modality::Fusion => TrainMask {
                speech: !freeze_extractors,
                visual: !freeze_extractors,
                fusion: true,
                head: true,
            },
        }
    }

    fn eval() -> Self {
        TrainMask {
            speech: false,
            visual: false,
            fusion: false,
            head: false,
        }
    }
}

/// Parameter leaves on a tape, in canonical order, plus typed handles.
struct TapedBundle {
    speech: SpeechVars,
    visual: VisualVars,
    fusion1: LstmVars,
    fusion2: LstmVars,
    head: lstm::HeadVars,
    ordered: Vec<Var>,
}

fn tape_bundle(tape: &mut Tape, bundle: &ModelBundle, mask: TrainMask) -> TapedBundle {
    let mut ordered = Vec::new();
    let leaf = |tape: &mut Tape, tensor: &Tensor, rg: bool, ordered: &mut Vec<Var>| {
        let mut t = tensor.clone();
        t.requires_grad = rg;
        let var = tape.leaf(&t);
        ordered.push(var);
        var
    };

    let k1 = leaf(tape, &bundle.speech.kernels_1, mask.speech, &mut ordered);
    let k2 = leaf(tape, &bundle.speech.kernels_2, mask.speech, &mut ordered);
    let stem = leaf(tape, &bundle.visual.stem, mask.visual, &mut ordered);
    let mut blocks = Vec::with_capacity(bundle.visual.blocks.len());
    for block in &bundle.visual.blocks {
        let reduce = leaf(tape, &block.reduce, mask.visual, &mut ordered);
        let conv = leaf(tape, &block.conv, mask.visual, &mut ordered);
        let expand = leaf(tape, &block.expand, mask.visual, &mut ordered);
        let projection = block
            .projection
            .as_ref()
            .map(|p| leaf(tape, p, mask.visual, &mut ordered));
        blocks.push(visual::BlockVars {
            reduce,
            conv,
            expand,
            projection,
            stride: block.stride,
        });
    }
    let proj_weight = leaf(tape, &bundle.visual.proj_weight, mask.visual, &mut ordered);
    let proj_bias = leaf(tape, &bundle.visual.proj_bias, mask.visual, &mut ordered);
    let f1 = LstmVars {
        w_input: leaf(tape, &bundle.fusion.layer1.w_input, mask.fusion, &mut ordered),
        w_recurrent: leaf(
            tape,
            &bundle.fusion.layer1.w_recurrent,
            mask.fusion,
            &mut ordered,
        ),
        bias: leaf(tape, &bundle.fusion.layer1.bias, mask.fusion, &mut ordered),
    };
    let f2 = LstmVars {
        w_input: leaf(tape, &bundle.fusion.layer2.w_input, mask.fusion, &mut ordered),
        w_recurrent: leaf(
            tape,
            &bundle.fusion.layer2.w_recurrent,
            mask.fusion,
            &mut ordered,
        ),
        bias: leaf(tape, &bundle.fusion.layer2.bias, mask.fusion, &mut ordered),
    };
    let head = lstm::HeadVars {
        weight: leaf(tape, &bundle.head.weight, mask.head, &mut ordered),
        bias: leaf(tape, &bundle.head.bias, mask.head, &mut ordered),
    };

    TapedBundle {
        speech: SpeechVars {
            kernels_1: k1,
            kernels_2: k2,
        },
        visual: VisualVars {
            stem,
            blocks,
            proj_weight,
            proj_bias,
        },
        fusion1: f1,
        fusion2: f2,
        head,
        ordered,
    }
}

// ---- feature extraction on a tape ----

/// Speech features covering frames `[start, start + len)` of a recording:
/// forwards every touched 6 s segment and slices the requested rows.
fn speech_features(
    tape: &mut Tape,
    taped: &TapedBundle,
    bundle: &ModelBundle,
    recording: &Recording,
    start: usize,
    len: usize,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let config = &bundle.speech.config;
    let per_seg = config.frame_count()?;
    let samples = config.segment_samples();
    let first = start / per_seg;
    let last = (start + len - 1) / per_seg;
    let mut parts = Vec::with_capacity(last - first + 1);
    for seg in first..=last {
        let range = seg * samples..(seg + 1) * samples;
        if range.end > recording.audio.len() {
            return Err(AffectError::Data(format!(
                "recording '{}' audio too short for segment {seg}",
                recording.id
            )));
        }
        let normalized = speech::normalize_segment(&recording.audio[range], config)?;
        let node = tape.constant(vec![1, samples], normalized.samples)?;
        parts.push(speech::forward(tape, node, &taped.speech, config, training, rng)?);
    }
    let all = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    tape.slice_rows(all, start - first * per_seg, len)
}

/// Visual features for frames `[start, start + len)`: one forward per
/// frame, stacked. Augmentation applies only in training mode.
fn visual_features(
    tape: &mut Tape,
    taped: &TapedBundle,
    bundle: &ModelBundle,
    recording: &Recording,
    start: usize,
    len: usize,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let config = &bundle.visual.config;
    if start + len > recording.frames.len() {
        return Err(AffectError::Data(format!(
            "recording '{}' has {} frames, needs {}",
            recording.id,
            recording.frames.len(),
            start + len
        )));
    }
    let size = config.input_size;
    let mut rows = Vec::with_capacity(len);
    for f in start..start + len {
        let pixels = recording.frames.frame_real(f);
        let frame = Frame::new(size, pixels)?;
        let frame = if training {
            visual::augment(&frame, rng)
        } else {
            frame
        };
        let node = tape.constant(vec![3, size, size], frame.pixels)?;
        rows.push(visual::forward_frame(tape, node, &taped.visual, config)?);
    }
    tape.concat_rows(&rows)
}

fn item_features(
    tape: &mut Tape,
    taped: &TapedBundle,
    bundle: &ModelBundle,
    modality: Modality,
    recording: &Recording,
    start: usize,
    len: usize,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    match modality {
        Modality::Speech => {
            speech_features(tape, taped, bundle, recording, start, len, training, rng)
        }
        Modality::Visual => {
            visual_features(tape, taped, bundle, recording, start, len, training, rng)
        }
        Modality::Fusion => {
            let s = speech_features(tape, taped, bundle, recording, start, len, training, rng)?;
            let v = visual_features(tape, taped, bundle, recording, start, len, training, rng)?;
            tape.concat_cols(s, v)
        }
    }
}

/// Forward one sub-sequence to its scalar loss.
#[allow(clippy::too_many_arguments)]
fn item_loss(
    tape: &mut Tape,
    taped: &TapedBundle,
    bundle: &ModelBundle,
    modality: Modality,
    objective: Objective,
    recording: &Recording,
    start: usize,
    len: usize,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let features = item_features(
        tape, taped, bundle, modality, recording, start, len, training, rng,
    )?;
    let (hidden, _, _) = lstm::stack_forward(
        tape,
        features,
        &taped.fusion1,
        &taped.fusion2,
        bundle.lstm_hidden,
        None,
    )?;
    let tracks = lstm::head_forward(tape, hidden, &taped.head)?;
    let pred_arousal = tape.slice_cols(tracks, 0, 1)?;
    let pred_valence = tape.slice_cols(tracks, 1, 1)?;
    let gold_arousal = &recording.arousal[start..start + len];
    let gold_valence = &recording.valence[start..start + len];
    let (la, lv) = match objective {
        Objective::Ccc => (
            tape.ccc_loss(pred_arousal, gold_arousal)?,
            tape.ccc_loss(pred_valence, gold_valence)?,
        ),
        Objective::Mse => (
            tape.mse_loss(pred_arousal, gold_arousal)?,
            tape.mse_loss(pred_valence, gold_valence)?,
        ),
    };
    let sum = tape.add(la, lv)?;
    Ok(tape.scale(sum, 0.5))
}

// ---- items ----

#[derive(Clone)]
struct Item {
    recording: Arc<Recording>,
    frame_start: usize,
}

fn build_items(data: &dyn DataSource, ids: &[String], len: usize) -> Result<Vec<Item>> {
    if ids.is_empty() {
        return Err(AffectError::Data("empty split".into()));
    }
    let mut items = Vec::new();
    for id in ids {
        let rec = data.load(id)?;
        let frames = rec.frame_count();
        if frames == 0 || rec.audio.is_empty() {
            return Err(AffectError::Data(format!(
                "recording '{id}' is missing {}",
                if frames == 0 { "video frames" } else { "audio" }
            )));
        }
        if frames % len != 0 {
            return Err(AffectError::Config(format!(
                "sequence length {len} does not divide the {frames} frames of '{id}'"
            )));
        }
        for chunk in 0..frames / len {
            items.push(Item {
                recording: Arc::clone(&rec),
                frame_start: chunk * len,
            });
        }
    }
    Ok(items)
}

// ---- the training loop ----

/// One point of the evaluation history.
#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub split: &'static str,
    pub ccc_arousal: f64,
    pub ccc_valence: f64,
}

/// What a training run reports back.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EvalPoint>,
    pub final_train: (f64, f64),
    pub final_validation: (f64, f64),
    pub steps_run: usize,
    pub epochs_run: usize,
}

fn item_rng(seed: u64, step: usize, index: usize, purpose: u64) -> Rng {
    Rng::derive(
        seed ^ purpose,
        ((step as u64) << 24) ^ (index as u64).wrapping_mul(0x9E37_79B9),
    )
}

/// Forward+backward one item, returning its loss and the gradients of every
/// ordered parameter (None where no gradient flowed).
#[allow(clippy::too_many_arguments)]
fn item_grads(
    bundle: &ModelBundle,
    mask: TrainMask,
    modality: Modality,
    objective: Objective,
    item: &Item,
    len: usize,
    seed: u64,
    step: usize,
    index: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let taped = tape_bundle(&mut tape, bundle, mask);
    let mut rng = item_rng(seed, step, index, 0xD20);
    let loss = item_loss(
        &mut tape,
        &taped,
        bundle,
        modality,
        objective,
        &item.recording,
        item.frame_start,
        len,
        true,
        &mut rng,
    )?;
    let value = tape.value(loss);
    if !value.is_finite() {
        return Err(AffectError::DegenerateInput(format!(
            "non-finite loss {value} on '{}'",
            item.recording.id
        )));
    }
    tape.backward(loss)?;
    let grads = taped
        .ordered
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.to_vec()))
        .collect();
    Ok((value, grads))
}

/// Concatenated evaluation tracks for a list of recordings.
fn eval_ccc(
    bundle: &ModelBundle,
    modality: Modality,
    data: &dyn DataSource,
    ids: &[String],
) -> Result<(f64, f64)> {
    if ids.is_empty() {
        return Err(AffectError::Data("empty split".into()));
    }
    let mut pred_a = Vec::new();
    let mut pred_v = Vec::new();
    let mut gold_a = Vec::new();
    let mut gold_v = Vec::new();
    for id in ids {
        let rec = data.load(id)?;
        let (a, v) = predict_tracks(bundle, modality, &rec)?;
        pred_a.extend(a);
        pred_v.extend(v);
        gold_a.extend_from_slice(&rec.arousal);
        gold_v.extend_from_slice(&rec.valence);
    }
    Ok((
        metrics::ccc(&pred_a, &gold_a)?,
        metrics::ccc(&pred_v, &gold_v)?,
    ))
}

/// Evaluation-mode prediction at 25 Hz over a whole recording.
pub fn predict_tracks(
    bundle: &ModelBundle,
    modality: Modality,
    recording: &Recording,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (tracks, _) = predict_with_trace(bundle, modality, recording)?;
    Ok(tracks)
}

/// Prediction plus the recurrent activation traces (for the gate study).
pub fn predict_with_trace(
    bundle: &ModelBundle,
    modality: Modality,
    recording: &Recording,
) -> Result<((Vec<f64>, Vec<f64>), StackTrace)> {
    if recording.audio.is_empty() && matches!(modality, Modality::Speech | Modality::Fusion) {
        return Err(AffectError::Data(format!(
            "recording '{}' is missing the audio stream",
            recording.id
        )));
    }
    if recording.frames.is_empty() && matches!(modality, Modality::Visual | Modality::Fusion) {
        return Err(AffectError::Data(format!(
            "recording '{}' is missing the video stream",
            recording.id
        )));
    }
    let frames = recording.frame_count();
    let per_seg = bundle.speech.config.frame_count()?;
    let usable = match modality {
        // speech features exist only for whole 6 s segments
        Modality::Speech | Modality::Fusion => (frames / per_seg) * per_seg,
        Modality::Visual => frames,
    };
    if usable == 0 {
        return Err(AffectError::Data(format!(
            "recording '{}' shorter than one segment",
            recording.id
        )));
    }

    let mut tape = Tape::new();
    let taped = tape_bundle(&mut tape, bundle, TrainMask::eval());
    let mut rng = Rng::new(0); // eval mode draws nothing
    let features = item_features(
        &mut tape, &taped, bundle, modality, recording, 0, usable, false, &mut rng,
    )?;
    let (hidden, _, trace) = lstm::stack_forward(
        &mut tape,
        features,
        &taped.fusion1,
        &taped.fusion2,
        bundle.lstm_hidden,
        None,
    )?;
    let tracks = lstm::head_forward(&mut tape, hidden, &taped.head)?;
    let data = tape.data(tracks);
    let mut arousal = Vec::with_capacity(frames);
    let mut valence = Vec::with_capacity(frames);
    for t in 0..usable {
        arousal.push(data[2 * t]);
        valence.push(data[2 * t + 1]);
    }
    // a trailing partial segment repeats the last prediction
    while arousal.len() < frames {
        arousal.push(*arousal.last().unwrap());
        valence.push(*valence.last().unwrap());
    }
    Ok(((arousal, valence), trace))
}

/// The generic loop shared by all three phases.
fn run_training(
    bundle: &mut ModelBundle,
    data: &dyn DataSource,
    modality: Modality,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let mask = TrainMask::for_phase(modality, config.freeze_extractors);
    let split = data.split().clone();
    let items = build_items(data, &split.train, config.sequence_length)?;
    if split.validation.is_empty() {
        return Err(AffectError::Data("empty validation split".into()));
    }
    let batch = config.batch_for(modality).min(items.len()).max(1);
    let names: Vec<String> = bundle_param_view(bundle)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut adam: Vec<AdamState> = bundle_param_view(bundle)
        .iter()
        .map(|(_, t)| AdamState::new(t.numel(), AdamConfig::default()))
        .collect();

    let mut report = TrainReport::default();
    let mut step = 0usize;
    let threads = config.threads.max(1);

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = Rng::derive(config.seed, 0xE90C ^ epoch as u64);
        shuffle_rng.shuffle(&mut order);

        for batch_ids in order.chunks(batch) {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }

            // forward/backward each item, optionally across workers
            let results: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> = if threads == 1
                || batch_ids.len() == 1
            {
                batch_ids
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        item_grads(
                            bundle,
                            mask,
                            modality,
                            config.objective,
                            &items[id],
                            config.sequence_length,
                            config.seed,
                            step,
                            i,
                        )
                    })
                    .collect()
            } else {
                let mut slots: Vec<Option<Result<(f64, Vec<Option<Vec<f64>>>)>>> =
                    (0..batch_ids.len()).map(|_| None).collect();
                std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for worker in 0..threads.min(batch_ids.len()) {
                        let bundle_ref = &*bundle;
                        let items_ref = &items;
                        let handle = scope.spawn(move || {
                            let mut local = Vec::new();
                            for (i, &id) in batch_ids.iter().enumerate() {
                                if i % threads == worker {
                                    local.push((
                                        i,
                                        item_grads(
                                            bundle_ref,
                                            mask,
                                            modality,
                                            config.objective,
                                            &items_ref[id],
                                            config.sequence_length,
                                            config.seed,
                                            step,
                                            i,
                                        ),
                                    ));
                                }
                            }
                            local
                        });
                        handles.push(handle);
                    }
                    for handle in handles {
                        for (i, res) in handle.join().expect("worker panicked") {
                            slots[i] = Some(res);
                        }
                    }
                });
                slots.into_iter().map(|s| s.expect("slot filled")).collect()
            };

            // reduce gradients in item order
            let mut sums: Vec<Option<Vec<f64>>> = vec![None; names.len()];
            for res in results {
                let (_, grads) = res?;
                for (slot, g) in sums.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match slot {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            none => *none = Some(g),
                        }
                    }
                }
            }
            let scale = 1.0 / batch_ids.len() as f64;
            for slot in sums.iter_mut().flatten() {
                for g in slot.iter_mut() {
                    *g *= scale;
                }
            }

            // global-norm clip
            if let Some(clip) = config.grad_clip {
                let norm: f64 = sums
                    .iter()
                    .flatten()
                    .flat_map(|g| g.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let factor = clip / norm;
                    for slot in sums.iter_mut().flatten() {
                        for g in slot.iter_mut() {
                            *g *= factor;
                        }
                    }
                }
            }

            // apply updates
            {
                let mut slots = bundle_param_slots(bundle);
                for (idx, grad) in sums.into_iter().enumerate() {
                    if let Some(grad) = grad {
                        let (_, tensor) = &mut slots[idx];
                        let mut values = tensor.data().to_vec();
                        adam_step(&mut values, &grad, &mut adam[idx], config.learning_rate)?;
                        tensor.set_data(values)?;
                    }
                }
            }

            step += 1;
            report.steps_run = step;
            report.epochs_run = epoch + 1;
            bundle.meta.epoch = epoch + 1;

            // periodic evaluation and early stop
            if step % config.eval_every_steps == 0 || Some(step) == config.max_steps {
                let train_ccc = eval_ccc(bundle, modality, data, &split.train)?;
                report.history.push(EvalPoint {
                    step,
                    epoch: epoch + 1,
                    split: "train",
                    ccc_arousal: train_ccc.0,
                    ccc_valence: train_ccc.1,
                });
                if let Some(target) = config.target_train_ccc {
                    if modality.target_metric(train_ccc) >= target {
                        break 'epochs;
                    }
                }
            }
        }
    }

    report.final_train = eval_ccc(bundle, modality, data, &split.train)?;
    report.final_validation = eval_ccc(bundle, modality, data, &split.validation)?;
    report.history.push(EvalPoint {
        step,
        epoch: report.epochs_run,
        split: "validation",
        ccc_arousal: report.final_validation.0,
        ccc_valence: report.final_validation.1,
    });
    Ok(report)
}

/// Train the speech front-end with a temporary recurrent stack; the stack
/// is discarded, the filter banks are kept.
pub fn pretrain_speech(
    data: &dyn DataSource,
    config: &TrainConfig,
) -> Result<(SpeechNet, TrainReport)> {
    let mut bundle = ModelBundle::init(Modality::Speech, config)?;
    let report = run_training(&mut bundle, data, Modality::Speech, config)?;
    Ok((bundle.speech, report))
}

/// Train the visual network with a temporary recurrent stack; augmentation
/// is active in training mode.
pub fn pretrain_visual(
    data: &dyn DataSource,
    config: &TrainConfig,
) -> Result<(VisualNet, TrainReport)> {
    let mut bundle = ModelBundle::init(Modality::Visual, config)?;
    let report = run_training(&mut bundle, data, Modality::Visual, config)?;
    Ok((bundle.visual, report))
}

/// Fuse pretrained extractors under a fresh recurrent stack; everything
/// fine-tunes unless `freeze_extractors` is set.
pub fn train_multimodal(
    data: &dyn DataSource,
    speech: SpeechNet,
    visual: VisualNet,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    let mut bundle = ModelBundle::with_extractors(Modality::Fusion, speech, visual, config)?;
    bundle.validate()?;
    let report = run_training(&mut bundle, data, Modality::Fusion, config)?;
    Ok((bundle, report))
}

/// Train a unimodal model end to end and return the phase bundle itself
/// (extractor plus its recurrent stack), for workflows that evaluate or
/// analyze the unimodal system directly.
pub fn train_unimodal(
    data: &dyn DataSource,
    modality: Modality,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainReport)> {
    let mut bundle = ModelBundle::init(modality, config)?;
    let report = run_training(&mut bundle, data, modality, config)?;
    Ok((bundle, report))
}

/// One ablation measurement.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub modality: Modality,
    pub sequence_length: usize,
    pub arousal: f64,
    pub valence: f64,
}

/// Train each unimodal network at each sequence length and report the
/// validation concordance per dimension.
pub fn ablate_sequence_length(
    data: &dyn DataSource,
    lengths: &[usize],
    base: &TrainConfig,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &modality in &[Modality::Visual, Modality::Speech] {
        for &len in lengths {
            let mut config = base.clone();
            config.sequence_length = len;
            let (_, report) = train_unimodal(data, modality, &config)?;
            cells.push(AblationCell {
                modality,
                sequence_length: len,
                arousal: report.final_validation.0,
                valence: report.final_validation.1,
            });
        }
    }
    Ok(cells)
}

// ---- checkpointing ----

/// Write the bundle as a directory: a structured-text manifest plus one
/// tensor container per parameter.
pub fn save_bundle(dir: &Path, bundle: &ModelBundle) -> Result<()> {
    std::fs::create_dir_all(dir.join("tensors"))?;
    let mut manifest = String::from("affect-model v1\n");
    let meta = &bundle.meta;
    manifest.push_str(&format!("seed = {}\n", meta.seed));
    manifest.push_str(&format!("epoch = {}\n", meta.epoch));
    manifest.push_str(&format!("objective = {}\n", meta.objective));
    manifest.push_str(&format!("sequence_length = {}\n", meta.sequence_length));
    manifest.push_str(&format!("modality = {}\n", meta.modality));
    manifest.push_str(&format!("lstm_hidden = {}\n", bundle.lstm_hidden));

    let s = &bundle.speech.config;
    manifest.push_str(&format!(
        "speech = rate:{} seconds:{} f1:{} k1:{} pool_t:{} f2:{} k2:{} pool_c:{} dropout:{} frame_ms:{}\n",
        s.sample_rate,
        crate::io::fmt_f64(s.segment_seconds),
        s.filters_1,
        s.kernel_1,
        s.time_pool,
        s.filters_2,
        s.kernel_2,
        s.channel_pool,
        crate::io::fmt_f64(s.dropout_p),
        s.frame_ms
    ));
    let v = &bundle.visual.config;
    manifest.push_str(&format!(
        "visual = size:{} stem_c:{} stem_k:{} stem_s:{} pool:{} pool_s:{} out:{}\n",
        v.input_size,
        v.stem_channels,
        v.stem_kernel,
        v.stem_stride,
        v.stem_pool,
        v.stem_pool_stride,
        v.output_features
    ));
    for (spec, stride) in v.stages.iter().zip(&v.stage_strides) {
        manifest.push_str(&format!(
            "stage = rep:{} c:{},{},{} stride:{}\n",
            spec.replication, spec.channels.0, spec.channels.1, spec.channels.2, stride
        ));
    }
    for (name, tensor) in bundle_param_view(bundle) {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("tensor = {} {}\n", name, dims.join(" ")));
        crate::tensor::write_tensor_file(&dir.join("tensors").join(format!("{name}.tnsr")), tensor)?;
    }
    crate::io::atomic_write(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Load a bundle saved by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| AffectError::Parse {
        file: manifest_path.display().to_string(),
        offset: 0,
        detail: format!("cannot read manifest: {e}"),
    })?;
    let bad = |detail: String| AffectError::Parse {
        file: manifest_path.display().to_string(),
        offset: 0,
        detail,
    };

    let mut meta = BundleMeta::default();
    let mut lstm_hidden = 0usize;
    let mut speech_config: Option<SpeechNetConfig> = None;
    let mut visual_head: Option<(usize, usize, usize, usize, usize, usize, usize)> = None;
    let mut stages = Vec::new();
    let mut strides = Vec::new();
    let mut tensor_names = Vec::new();

    let mut lines = text.lines();
    if lines.next() != Some("affect-model v1") {
        return Err(bad("bad manifest header".into()));
    }
    for line in lines {
        let Some((key, value)) = line.split_once(" = ") else {
            continue;
        };
        match key {
            "seed" => meta.seed = value.parse().map_err(|_| bad("bad seed".into()))?,
            "epoch" => meta.epoch = value.parse().map_err(|_| bad("bad epoch".into()))?,
            "objective" => meta.objective = value.to_string(),
            "sequence_length" => {
                meta.sequence_length = value.parse().map_err(|_| bad("bad length".into()))?
            }
            "modality" => meta.modality = value.to_string(),
            "lstm_hidden" => {
                lstm_hidden = value.parse().map_err(|_| bad("bad lstm_hidden".into()))?
            }
            "speech" => {
                let fields: std::collections::BTreeMap<&str, &str> = value
                    .split_whitespace()
                    .filter_map(|w| w.split_once(':'))
                    .collect();
                let get = |k: &str| -> Result<&str> {
                    fields
                        .get(k)
                        .copied()
                        .ok_or_else(|| bad(format!("speech config missing {k}")))
                };
                speech_config = Some(SpeechNetConfig {
                    sample_rate: get("rate")?.parse().map_err(|_| bad("rate".into()))?,
                    segment_seconds: get("seconds")?.parse().map_err(|_| bad("seconds".into()))?,
                    filters_1: get("f1")?.parse().map_err(|_| bad("f1".into()))?,
                    kernel_1: get("k1")?.parse().map_err(|_| bad("k1".into()))?,
                    time_pool: get("pool_t")?.parse().map_err(|_| bad("pool_t".into()))?,
                    filters_2: get("f2")?.parse().map_err(|_| bad("f2".into()))?,
                    kernel_2: get("k2")?.parse().map_err(|_| bad("k2".into()))?,
                    channel_pool: get("pool_c")?.parse().map_err(|_| bad("pool_c".into()))?,
                    dropout_p: get("dropout")?.parse().map_err(|_| bad("dropout".into()))?,
                    frame_ms: get("frame_ms")?.parse().map_err(|_| bad("frame_ms".into()))?,
                });
            }
            "visual" => {
                let fields: std::collections::BTreeMap<&str, &str> = value
                    .split_whitespace()
                    .filter_map(|w| w.split_once(':'))
                    .collect();
                let get = |k: &str| -> Result<usize> {
                    fields
                        .get(k)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| bad(format!("visual config missing {k}")))
                };
                visual_head = Some((
                    get("size")?,
                    get("stem_c")?,
                    get("stem_k")?,
                    get("stem_s")?,
                    get("pool")?,
                    get("pool_s")?,
                    get("out")?,
                ));
            }
            "stage" => {
                let fields: std::collections::BTreeMap<&str, &str> = value
                    .split_whitespace()
                    .filter_map(|w| w.split_once(':'))
                    .collect();
                let rep: usize = fields
                    .get("rep")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("stage rep".into()))?;
                let channels: Vec<usize> = fields
                    .get("c")
                    .map(|v| v.split(',').filter_map(|c| c.parse().ok()).collect())
                    .unwrap_or_default();
                let stride: usize = fields
                    .get("stride")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("stage stride".into()))?;
                if channels.len() != 3 {
                    return Err(bad("stage channels".into()));
                }
                stages.push(visual::BottleneckSpec {
                    replication: rep,
                    channels: (channels[0], channels[1], channels[2]),
                });
                strides.push(stride);
            }
            "tensor" => {
                let name = value.split_whitespace().next().unwrap_or_default();
                tensor_names.push(name.to_string());
            }
            _ => {}
        }
    }

    let speech_config = speech_config.ok_or_else(|| bad("missing speech config".into()))?;
    let (size, stem_c, stem_k, stem_s, pool, pool_s, out) =
        visual_head.ok_or_else(|| bad("missing visual config".into()))?;
    let visual_config = VisualNetConfig {
        input_size: size,
        stem_channels: stem_c,
        stem_kernel: stem_k,
        stem_stride: stem_s,
        stem_pool: pool,
        stem_pool_stride: pool_s,
        stages,
        stage_strides: strides,
        output_features: out,
    };

    // build a zero bundle with the right shapes, then load tensor data
    let mut rng = Rng::new(0);
    let speech = SpeechNet::init(speech_config, &mut rng)?;
    let visual = VisualNet::init(visual_config, &mut rng)?;
    let input = match meta.modality.as_str() {
        "speech" => speech.config.feature_dim(),
        "visual" => visual.config.output_features,
        _ => speech.config.feature_dim() + visual.config.output_features,
    };
    let mut bundle = ModelBundle {
        speech,
        visual,
        fusion: LstmStack::init(input, lstm_hidden, &mut rng),
        head: OutputHead::init(lstm_hidden, &mut rng),
        lstm_hidden,
        meta,
    };

    for (name, tensor) in bundle_param_slots(&mut bundle) {
        let path = dir.join("tensors").join(format!("{name}.tnsr"));
        let loaded = crate::tensor::read_tensor_file(&path)?;
        if loaded.shape() != tensor.shape() {
            return Err(AffectError::dim(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                loaded.shape(),
                tensor.shape()
            )));
        }
        tensor.set_data(loaded.data().to_vec())?;
    }
    bundle.validate()?;
    Ok(bundle)
}
