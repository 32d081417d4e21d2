//! Command-line driver: data synthesis, training, evaluation,
//! post-processing, the sequence-length ablation, and the gate study.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data/runtime errors.
//! Every command logs its (seed, config) echo and writes results as CSV
//! under `--out`.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use affect::analysis;
use affect::error::{AffectError, Result};
use affect::io;
use affect::metrics;
use affect::postprocess::{self, PostProcessChain};
use affect::synth::{self, DataSource, DatasetSpec, DiskDataset};
use affect::trainer::{self, Modality, Objective, TrainConfig};

#[derive(Parser)]
#[command(
    name = "affect",
    about = "End-to-end audio-visual affect regression on synthetic data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset
    SynthData(SynthDataArgs),
    /// Train a speech, visual, or fusion model
    Train(TrainArgs),
    /// Evaluate a checkpoint: concordance per dimension, raw and post-processed
    Eval(EvalArgs),
    /// Fit a post-processing chain on the validation split
    PostprocessFit(PostprocessFitArgs),
    /// Apply fitted chains to another split
    PostprocessApply(PostprocessApplyArgs),
    /// Train both unimodal networks at several sequence lengths
    AblateSeqLen(AblateArgs),
    /// Correlate recurrent cells with acoustic descriptors
    AnalyzeGates(AnalyzeGatesArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    train: usize,
    #[arg(long, default_value_t = 15)]
    validation: usize,
    #[arg(long, default_value_t = 15)]
    test: usize,
    /// Seconds per recording (multiple of 6)
    #[arg(long, default_value_t = 60)]
    duration: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    modality: String,
    #[arg(long, default_value = "ccc")]
    objective: String,
    #[arg(long = "seq-len", default_value_t = 150)]
    seq_len: usize,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Network scale: tiny (desk) or full (published sizes)
    #[arg(long, default_value = "tiny")]
    scale: String,
    #[arg(long = "max-steps")]
    max_steps: Option<usize>,
    #[arg(long = "target-ccc")]
    target_ccc: Option<f64>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long = "audio-batch")]
    audio_batch: Option<usize>,
    #[arg(long = "video-batch")]
    video_batch: Option<usize>,
    #[arg(long = "freeze-extractors", default_value_t = false)]
    freeze_extractors: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "validation")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Sanity mode: score the gold standard against itself instead of
    /// running the model
    #[arg(long, default_value_t = false)]
    oracle: bool,
}

#[derive(Args)]
struct PostprocessFitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PostprocessApplyArgs {
    #[arg(long)]
    chain: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "75,150,300")]
    lengths: String,
    #[arg(long, default_value = "tiny")]
    scale: String,
    #[arg(long = "max-steps")]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeGatesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Recording id; defaults to the first recording of --split
    #[arg(long)]
    recording: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 3)]
    top: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parse and run. Returns the process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::PostprocessFit(args) => cmd_postprocess_fit(args),
        Command::PostprocessApply(args) => cmd_postprocess_apply(args),
        Command::AblateSeqLen(args) => cmd_ablate(args),
        Command::AnalyzeGates(args) => cmd_analyze_gates(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn build_config(
    scale: &str,
    seed: u64,
    objective: &str,
    seq_len: usize,
    epochs: usize,
    max_steps: Option<usize>,
    target_ccc: Option<f64>,
    learning_rate: Option<f64>,
    audio_batch: Option<usize>,
    video_batch: Option<usize>,
    freeze_extractors: bool,
) -> Result<TrainConfig> {
    let mut config = match scale {
        "tiny" => TrainConfig::tiny(seed),
        "full" => TrainConfig::published(seed),
        other => {
            return Err(AffectError::Parameter(format!(
                "unknown scale '{other}' (expected tiny or full)"
            )))
        }
    };
    config.objective = Objective::parse(objective)?;
    config.sequence_length = seq_len;
    config.epochs = epochs;
    if max_steps.is_some() {
        config.max_steps = max_steps;
    }
    config.target_train_ccc = target_ccc;
    if let Some(lr) = learning_rate {
        config.learning_rate = lr;
    }
    if let Some(b) = audio_batch {
        config.audio_batch = b;
    }
    if let Some(b) = video_batch {
        config.video_batch = b;
    }
    config.freeze_extractors = freeze_extractors;
    Ok(config)
}

fn config_echo(config: &TrainConfig, modality: &str) -> String {
    format!(
        "affect-train-config v1\nmodality = {}\nseed = {}\nobjective = {}\nsequence_length = {}\nepochs = {}\nmax_steps = {:?}\nlearning_rate = {}\naudio_batch = {}\nvideo_batch = {}\nlstm_hidden = {}\nfreeze_extractors = {}\ngrad_clip = {:?}\n",
        modality,
        config.seed,
        config.objective.name(),
        config.sequence_length,
        config.epochs,
        config.max_steps,
        io::fmt_f64(config.learning_rate),
        config.audio_batch,
        config.video_batch,
        config.lstm_hidden,
        config.freeze_extractors,
        config.grad_clip,
    )
}

fn write_history_csv(path: &Path, report: &trainer::TrainReport) -> Result<()> {
    let rows: Vec<Vec<String>> = report
        .history
        .iter()
        .map(|p| {
            vec![
                p.step.to_string(),
                p.epoch.to_string(),
                p.split.to_string(),
                io::fmt_f64(p.ccc_arousal),
                io::fmt_f64(p.ccc_valence),
            ]
        })
        .collect();
    io::write_csv(
        path,
        &["step", "epoch", "split", "ccc_arousal", "ccc_valence"],
        &rows,
    )
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        seed: args.seed,
        train: args.train,
        validation: args.validation,
        test: args.test,
        duration_s: args.duration,
    };
    let (recordings, split) = synth::generate_dataset(&spec)?;
    synth::write_dataset(&recordings, &split, &args.out)?;
    println!(
        "wrote {} recordings ({} train / {} validation / {} test) to {}",
        recordings.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let modality = Modality::parse(&args.modality)?;
    let config = build_config(
        &args.scale,
        args.seed,
        &args.objective,
        args.seq_len,
        args.epochs,
        args.max_steps,
        args.target_ccc,
        args.learning_rate,
        args.audio_batch,
        args.video_batch,
        args.freeze_extractors,
    )?;
    let data = DiskDataset::open(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    io::atomic_write(
        &args.out.join("config.txt"),
        config_echo(&config, modality.name()).as_bytes(),
    )?;

    let (bundle, report) = match modality {
        Modality::Fusion => {
            let (speech, speech_report) = trainer::pretrain_speech(&data, &config)?;
            println!(
                "speech pretrain: validation arousal {:.3} valence {:.3}",
                speech_report.final_validation.0, speech_report.final_validation.1
            );
            write_history_csv(&args.out.join("metrics_speech.csv"), &speech_report)?;
            let (visual, visual_report) = trainer::pretrain_visual(&data, &config)?;
            println!(
                "visual pretrain: validation arousal {:.3} valence {:.3}",
                visual_report.final_validation.0, visual_report.final_validation.1
            );
            write_history_csv(&args.out.join("metrics_visual.csv"), &visual_report)?;
            trainer::train_multimodal(&data, speech, visual, &config)?
        }
        unimodal => trainer::train_unimodal(&data, unimodal, &config)?,
    };
    write_history_csv(&args.out.join("metrics.csv"), &report)?;
    trainer::save_bundle(&args.out.join("checkpoint"), &bundle)?;
    println!(
        "{} model: {} steps, validation arousal {:.3} valence {:.3}",
        modality.name(),
        report.steps_run,
        report.final_validation.0,
        report.final_validation.1
    );
    println!("checkpoint written to {}", args.out.join("checkpoint").display());
    Ok(())
}

/// Concatenated predictions and gold for one split.
fn split_tracks(
    bundle: &trainer::ModelBundle,
    data: &DiskDataset,
    split: &str,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let modality = Modality::parse(&bundle.meta.modality)?;
    let ids = data.split().of(split)?;
    if ids.is_empty() {
        return Err(AffectError::Data(format!("split '{split}' is empty")));
    }
    let mut pred_a = Vec::new();
    let mut pred_v = Vec::new();
    let mut gold_a = Vec::new();
    let mut gold_v = Vec::new();
    for id in ids {
        let rec = data.load(id)?;
        let (a, v) = trainer::predict_tracks(bundle, modality, &rec)?;
        pred_a.extend(a);
        pred_v.extend(v);
        gold_a.extend_from_slice(&rec.arousal);
        gold_v.extend_from_slice(&rec.valence);
    }
    Ok((pred_a, pred_v, gold_a, gold_v))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let data = DiskDataset::open(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let (pred_a, pred_v, gold_a, gold_v) = if args.oracle {
        let ids = data.split().of(&args.split)?;
        if ids.is_empty() {
            return Err(AffectError::Data(format!("split '{}' is empty", args.split)));
        }
        let mut gold_a = Vec::new();
        let mut gold_v = Vec::new();
        for id in ids {
            let rec = data.load(id)?;
            gold_a.extend_from_slice(&rec.arousal);
            gold_v.extend_from_slice(&rec.valence);
        }
        (gold_a.clone(), gold_v.clone(), gold_a, gold_v)
    } else {
        let bundle = trainer::load_bundle(&args.model)?;
        split_tracks(&bundle, &data, &args.split)?
    };

    let rho_a = metrics::ccc(&pred_a, &gold_a)?;
    let rho_v = metrics::ccc(&pred_v, &gold_v)?;

    // chains fit on validation, applied to the requested split
    let (chain_a, chain_v) = if args.oracle {
        (PostProcessChain::identity(), PostProcessChain::identity())
    } else {
        let bundle = trainer::load_bundle(&args.model)?;
        let (va, vv, ga, gv) = split_tracks(&bundle, &data, "validation")?;
        (
            postprocess::fit_chain(&va, &ga)?,
            postprocess::fit_chain(&vv, &gv)?,
        )
    };
    let post_a = postprocess::apply_chain(&chain_a, &pred_a)?;
    let post_v = postprocess::apply_chain(&chain_v, &pred_v)?;
    let rho_post_a = metrics::ccc(&post_a, &gold_a)?;
    let rho_post_v = metrics::ccc(&post_v, &gold_v)?;

    io::write_csv(
        &args.out.join("eval.csv"),
        &["split", "dimension", "ccc_raw", "ccc_postprocessed"],
        &[
            vec![
                args.split.clone(),
                "arousal".into(),
                io::fmt_f64(rho_a),
                io::fmt_f64(rho_post_a),
            ],
            vec![
                args.split.clone(),
                "valence".into(),
                io::fmt_f64(rho_v),
                io::fmt_f64(rho_post_v),
            ],
        ],
    )?;
    println!(
        "{}: arousal ccc {:.4} -> {:.4}, valence ccc {:.4} -> {:.4}",
        args.split, rho_a, rho_post_a, rho_v, rho_post_v
    );
    Ok(())
}

fn cmd_postprocess_fit(args: PostprocessFitArgs) -> Result<()> {
    let data = DiskDataset::open(&args.data)?;
    let bundle = trainer::load_bundle(&args.model)?;
    std::fs::create_dir_all(&args.out)?;
    let (pred_a, pred_v, gold_a, gold_v) = split_tracks(&bundle, &data, "validation")?;
    let chain_a = postprocess::fit_chain(&pred_a, &gold_a)?;
    let chain_v = postprocess::fit_chain(&pred_v, &gold_v)?;
    io::atomic_write(&args.out.join("chain_arousal.txt"), chain_a.to_text().as_bytes())?;
    io::atomic_write(&args.out.join("chain_valence.txt"), chain_v.to_text().as_bytes())?;
    let trace_a: Vec<String> = chain_a.rho_trace.iter().map(|v| io::fmt_f64(*v)).collect();
    let trace_v: Vec<String> = chain_v.rho_trace.iter().map(|v| io::fmt_f64(*v)).collect();
    println!("arousal chain: {}", trace_a.join(" -> "));
    println!("valence chain: {}", trace_v.join(" -> "));
    Ok(())
}

fn read_chain(path: &Path) -> Result<PostProcessChain> {
    let text = std::fs::read_to_string(path).map_err(|e| AffectError::Parse {
        file: path.display().to_string(),
        offset: 0,
        detail: format!("cannot read chain: {e}"),
    })?;
    PostProcessChain::from_text(&text)
}

fn cmd_postprocess_apply(args: PostprocessApplyArgs) -> Result<()> {
    let data = DiskDataset::open(&args.data)?;
    let bundle = trainer::load_bundle(&args.model)?;
    std::fs::create_dir_all(&args.out)?;
    let chain_a = read_chain(&args.chain.join("chain_arousal.txt"))?;
    let chain_v = read_chain(&args.chain.join("chain_valence.txt"))?;
    let (pred_a, pred_v, gold_a, gold_v) = split_tracks(&bundle, &data, &args.split)?;
    let post_a = postprocess::apply_chain(&chain_a, &pred_a)?;
    let post_v = postprocess::apply_chain(&chain_v, &pred_v)?;
    io::write_csv(
        &args.out.join("postprocessed.csv"),
        &["split", "dimension", "ccc_raw", "ccc_postprocessed"],
        &[
            vec![
                args.split.clone(),
                "arousal".into(),
                io::fmt_f64(metrics::ccc(&pred_a, &gold_a)?),
                io::fmt_f64(metrics::ccc(&post_a, &gold_a)?),
            ],
            vec![
                args.split.clone(),
                "valence".into(),
                io::fmt_f64(metrics::ccc(&pred_v, &gold_v)?),
                io::fmt_f64(metrics::ccc(&post_v, &gold_v)?),
            ],
        ],
    )?;
    println!(
        "applied chains to {}: results in {}",
        args.split,
        args.out.join("postprocessed.csv").display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let lengths: Vec<usize> = args
        .lengths
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| AffectError::Parameter(format!("bad length '{s}'")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut config = build_config(
        &args.scale,
        args.seed,
        "ccc",
        150,
        args.epochs,
        args.max_steps,
        None,
        None,
        None,
        None,
        false,
    )?;
    config.eval_every_steps = 50;
    let data = DiskDataset::open(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    io::atomic_write(
        &args.out.join("config.txt"),
        config_echo(&config, "ablation").as_bytes(),
    )?;
    let cells = trainer::ablate_sequence_length(&data, &lengths, &config)?;
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.modality.name().to_string(),
                c.sequence_length.to_string(),
                io::fmt_f64(c.arousal),
                io::fmt_f64(c.valence),
            ]
        })
        .collect();
    io::write_csv(
        &args.out.join("ablation.csv"),
        &["modality", "sequence_length", "ccc_arousal", "ccc_valence"],
        &rows,
    )?;
    for c in &cells {
        println!(
            "{:7} len {:3}: arousal {:+.3} valence {:+.3}",
            c.modality.name(),
            c.sequence_length,
            c.arousal,
            c.valence
        );
    }
    Ok(())
}

fn cmd_analyze_gates(args: AnalyzeGatesArgs) -> Result<()> {
    let data = DiskDataset::open(&args.data)?;
    let bundle = trainer::load_bundle(&args.model)?;
    let modality = Modality::parse(&bundle.meta.modality)?;
    std::fs::create_dir_all(&args.out)?;
    let id = match &args.recording {
        Some(id) => id.clone(),
        None => data
            .split()
            .of(&args.split)?
            .first()
            .ok_or_else(|| AffectError::Data(format!("split '{}' is empty", args.split)))?
            .clone(),
    };
    let rec = data.load(&id)?;
    let (_, trace) = trainer::predict_with_trace(&bundle, modality, &rec)?;
    io::atomic_write(
        &args.out.join("activation_trace_layer1.csv"),
        trace.layer1.to_csv(synth::FRAME_RATE).as_bytes(),
    )?;
    io::atomic_write(
        &args.out.join("activation_trace_layer2.csv"),
        trace.layer2.to_csv(synth::FRAME_RATE).as_bytes(),
    )?;
    let report = analysis::gate_correlation(&trace, &rec)?;

    let rows: Vec<Vec<String>> = report
        .sorted_rows()
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.cell.to_string(),
                r.descriptor.to_string(),
                io::fmt_f64(r.rho),
                r.degenerate.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &args.out.join("gate_correlations.csv"),
        &["layer", "cell", "descriptor", "rho", "degenerate"],
        &rows,
    )?;

    // plot data: top cells against normalized descriptors
    let cells_per_layer = trace.layer1.cells;
    let mut top: Vec<(usize, usize, f64)> = Vec::new();
    for r in report.sorted_rows() {
        if r.degenerate {
            continue;
        }
        if !top.iter().any(|(l, c, _)| *l == r.layer && *c == r.cell) {
            top.push((r.layer, r.cell, r.rho));
        }
        if top.len() >= args.top {
            break;
        }
    }
    let frames = report.descriptors.len().min(trace.layer1.steps);
    let mut header: Vec<String> = vec!["time_s".into()];
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (layer, cell, _) in &top {
        header.push(format!("layer{layer}_cell{cell:03}"));
        let trace_idx = (layer - 1) * cells_per_layer + cell;
        columns.push(analysis::normalize_unit(&report.traces[trace_idx][..frames]));
    }
    for (d, name) in analysis::DESCRIPTOR_NAMES.iter().enumerate() {
        header.push((*name).to_string());
        let series: Vec<f64> = report.descriptors[..frames]
            .iter()
            .map(|fr| match d {
                0 => fr.rms_energy,
                1 => fr.rms_range,
                2 => fr.loudness,
                _ => fr.f0,
            })
            .collect();
        columns.push(analysis::normalize_unit(&series));
    }
    let rows: Vec<Vec<String>> = (0..frames)
        .map(|t| {
            let mut row = vec![io::fmt_f64(t as f64 / synth::FRAME_RATE as f64)];
            row.extend(columns.iter().map(|c| io::fmt_f64(c[t])));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    io::write_csv(&args.out.join("gate_top_traces.csv"), &header_refs, &rows)?;

    if let Some(best) = report.best_against("rms_energy") {
        println!(
            "recording {id}: best |rho| vs rms_energy = {:.3} (layer {} cell {})",
            best.rho.abs(),
            best.layer,
            best.cell
        );
    }
    println!("{} correlation rows written", report.rows.len());
    Ok(())
}
