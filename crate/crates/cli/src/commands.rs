//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;

use diffaug::data::{self, ManifestRow};
use diffaug::denoisers::{checkpoint, CondNetConfig, CondNetLite};
use diffaug::diffusion::{fit, LabeledSample, TrainConfig};
use diffaug::dsp::{self, AugmentPolicy, FeaturizeConfig};
use diffaug::numerics::{AdamWConfig, Grid};
use diffaug::samplers::scalar::{
    sample_scalar, wasserstein1_to_gaussian, BoundScalarGaussian, ScalarGaussianEps,
};
use diffaug::samplers::{Method, Prediction, Sampler, SolverConfig, Thresholding};
use diffaug::schedule::{NoiseSchedule, ScheduleSpec, TimeSpacing};
use diffaug::selection::{
    topk_filter, train_discriminator, ClassifierConfig, ClassifierTrainConfig, ConvClassifier,
    Discriminator,
};

use crate::config::{prepare_out_dir, Resolver, UsageError};

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn resolve_against(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load a manifest of SGRM files into labeled samples. Relative paths are
/// resolved against `root` when given, else the manifest's directory.
fn load_sgrm_dataset(
    manifest_path: &Path,
    root: Option<&Path>,
) -> anyhow::Result<(Vec<ManifestRow>, Vec<LabeledSample>)> {
    let rows = data::read_manifest(manifest_path)
        .with_context(|| format!("reading manifest {}", manifest_path.display()))?;
    let base = root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    let mut samples = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = resolve_against(&base, &row.path);
        let (grid, _) = data::load_spectrogram(&path)
            .with_context(|| format!("loading {}", path.display()))?;
        samples.push(LabeledSample {
            spectrogram: grid,
            class_id: row.class_id,
            fold: row.fold,
        });
    }
    Ok((rows, samples))
}

/// Load every `.sgrm` in a directory, sorted by file name.
fn load_sgrm_dir(dir: &Path) -> anyhow::Result<Vec<(String, Grid, Option<u8>)>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "sgrm").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no .sgrm files under {}", dir.display());
    }
    let mut out = Vec::with_capacity(names.len());
    for path in names {
        let (grid, label) = data::load_spectrogram(&path)
            .with_context(|| format!("loading {}", path.display()))?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.push((name, grid, label));
    }
    Ok(out)
}

fn parse_usize_list(raw: &str, what: &str) -> anyhow::Result<Vec<usize>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| UsageError(format!("{what} entry `{s}`: {e}")).into())
        })
        .collect()
}

fn classifier_accuracy(clf: &ConvClassifier, samples: &[&LabeledSample]) -> anyhow::Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let scores = clf.predict_scores(&s.spectrogram)?;
        let best = (0..scores.len())
            .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
            .unwrap();
        if best == s.class_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// featurize
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct FeaturizeArgs {
    /// CSV manifest: path,fold,class_id,class_name.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Base directory for relative audio paths (default: manifest directory).
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Target sample rate in Hz (default 22050).
    #[arg(long)]
    sample_rate: Option<u32>,
    /// Mel bands = output rows (default 128).
    #[arg(long)]
    bands: Option<usize>,
    /// Output frames = columns (default 128).
    #[arg(long)]
    frames: Option<usize>,
}

pub fn featurize(config_path: Option<&Path>, args: FeaturizeArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let manifest = r.path(args.manifest, "manifest")?;
    let out = r.path(args.out, "out")?;
    let audio_root = r.path_opt(args.audio_root, "audio-root")?;
    let sample_rate = r.get(args.sample_rate, "sample-rate", 22050u32)?;
    let bands = r.get(args.bands, "bands", 128usize)?;
    let frames = r.get(args.frames, "frames", 128usize)?;

    let rows = data::read_manifest(&manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let base = audio_root
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let out = prepare_out_dir(&out)?;
    let spectra_dir = out.join("spectra");
    std::fs::create_dir_all(&spectra_dir)?;

    let feat_config = FeaturizeConfig {
        sample_rate,
        mel_bands: bands,
        frames,
        ..FeaturizeConfig::default()
    };
    let mut out_rows = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let wav_path = resolve_against(&base, &row.path);
        let wave = data::read_wav(&wav_path, Some(sample_rate))
            .with_context(|| format!("reading {}", wav_path.display()))?;
        let grid = dsp::featurize(&wave, &feat_config)?;
        let stem = wav_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("clip{i}"));
        let name = format!("{i:05}_{stem}.sgrm");
        let label = u8::try_from(row.class_id).ok();
        data::save_spectrogram(spectra_dir.join(&name), &grid, label)?;
        out_rows.push(ManifestRow {
            path: format!("spectra/{name}"),
            fold: row.fold,
            class_id: row.class_id,
            class_name: row.class_name.clone(),
        });
    }
    data::write_manifest(out.join("manifest.csv"), &out_rows)?;
    r.write_snapshot(&out, "featurize")?;
    log::info!("featurized {} clips into {}", out_rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct AugmentArgs {
    /// CSV manifest of WAV files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Base directory for relative audio paths.
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory of ambience WAV clips; synthesized demo ambience when absent.
    #[arg(long)]
    ambience: Option<PathBuf>,
    /// Augmented copies per input (default 1).
    #[arg(long)]
    copies: Option<usize>,
    /// Working sample rate in Hz (default 22050).
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn augment(config_path: Option<&Path>, args: AugmentArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let manifest = r.path(args.manifest, "manifest")?;
    let out = r.path(args.out, "out")?;
    let audio_root = r.path_opt(args.audio_root, "audio-root")?;
    let ambience_dir = r.path_opt(args.ambience, "ambience")?;
    let copies = r.get(args.copies, "copies", 1usize)?;
    let sample_rate = r.get(args.sample_rate, "sample-rate", 22050u32)?;
    let seed = r.seed(args.seed)?;

    let rows = data::read_manifest(&manifest)?;
    let base = audio_root
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let out = prepare_out_dir(&out)?;
    let audio_dir = out.join("audio");
    std::fs::create_dir_all(&audio_dir)?;

    let ambience = match ambience_dir {
        Some(dir) => {
            let mut clips = Vec::new();
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no .wav ambience clips under {}", dir.display());
            }
            for p in paths {
                clips.push(data::read_wav(&p, Some(sample_rate))?);
            }
            clips
        }
        None => {
            log::info!("no ambience directory given; synthesizing demo ambience");
            dsp::demo_ambience(seed, 60.0, sample_rate)
        }
    };
    let policy = AugmentPolicy::table_defaults(ambience);
    policy.validate()?;

    let mut out_rows = Vec::with_capacity(rows.len() * copies);
    for (i, row) in rows.iter().enumerate() {
        let wav_path = resolve_against(&base, &row.path);
        let wave = data::read_wav(&wav_path, Some(sample_rate))
            .with_context(|| format!("reading {}", wav_path.display()))?;
        let stem = wav_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("clip{i}"));
        for copy in 0..copies {
            let mut rng = diffaug::rng::stream(seed, i as u64, copy as u64);
            let augmented = dsp::apply_policy(&wave, &policy, &mut rng)?;
            let name = format!("{i:05}_{stem}_aug{copy}.wav");
            data::write_wav(audio_dir.join(&name), &augmented)?;
            out_rows.push(ManifestRow {
                path: format!("audio/{name}"),
                fold: row.fold,
                class_id: row.class_id,
                class_name: row.class_name.clone(),
            });
        }
    }
    data::write_manifest(out.join("manifest.csv"), &out_rows)?;
    r.write_snapshot(&out, "augment")?;
    log::info!("wrote {} augmented clips", out_rows.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-dpm
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainDpmArgs {
    /// Manifest of SGRM spectrograms (from `featurize`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (default 500).
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (default 16).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Null-label dropout probability (default 0.1).
    #[arg(long)]
    label_dropout: Option<f64>,
    /// Learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f32>,
    /// Weight decay (default 0.05).
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Diffusion steps T (default 1000).
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Base channel width (default 16).
    #[arg(long)]
    base_width: Option<usize>,
    /// Comma-separated channel multipliers (default 1,2,4,8).
    #[arg(long)]
    channel_mults: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train_dpm(config_path: Option<&Path>, args: TrainDpmArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let manifest = r.path(args.data, "data")?;
    let out = r.path(args.out, "out")?;
    let epochs = r.get(args.epochs, "epochs", 500usize)?;
    let batch_size = r.get(args.batch_size, "batch-size", 16usize)?;
    let label_dropout = r.get(args.label_dropout, "label-dropout", 0.1f64)?;
    let lr = r.get(args.lr, "lr", 1e-4f32)?;
    let weight_decay = r.get(args.weight_decay, "weight-decay", 0.05f32)?;
    let t_steps = r.get(args.t_steps, "t-steps", 1000usize)?;
    let beta_start = r.get(args.beta_start, "beta-start", 1e-4f64)?;
    let beta_end = r.get(args.beta_end, "beta-end", 0.02f64)?;
    let base_width = r.get(args.base_width, "base-width", 16usize)?;
    let mults_raw = r.get(args.channel_mults, "channel-mults", "1,2,4,8".to_string())?;
    let seed = r.seed(args.seed)?;

    let channel_mults = parse_usize_list(&mults_raw, "channel-mults")?;
    let (_, dataset) = load_sgrm_dataset(&manifest, None)?;
    let num_classes = dataset.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;
    let shape = dataset[0].spectrogram.shape().to_vec();
    if shape.len() != 2 {
        bail!("expected 2-D spectrograms, got shape {shape:?}");
    }

    let spec = ScheduleSpec {
        t_count: t_steps,
        beta_start,
        beta_end,
    };
    let schedule = spec.build()?;
    let net_config = CondNetConfig {
        in_channels: 1,
        base_width,
        channel_mults,
        time_embed_dim: 16,
        num_classes,
        height: shape[0],
        width: shape[1],
        time_scale: t_steps as f64,
    };
    let mut model = CondNetLite::new(net_config, seed)?;
    let train_config = TrainConfig {
        epochs,
        batch_size,
        label_dropout,
        optimizer: AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        },
        seed,
    };
    log::info!(
        "training denoiser: {} samples, {} classes, {} epochs",
        dataset.len(),
        num_classes,
        epochs
    );
    let out = prepare_out_dir(&out)?;
    let trace = fit(&mut model, &dataset, &train_config, &schedule)?;
    checkpoint::save_condnet(out.join("model.denw"), &model, &spec)?;
    trace.write_csv(out.join("loss.csv"))?;
    r.write_snapshot(&out, "train-dpm")?;
    log::info!(
        "final epoch loss {:.5}; checkpoint at {}",
        trace.per_epoch.last().copied().unwrap_or(f64::NAN),
        out.join("model.denw").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SampleArgs {
    /// Denoiser checkpoint from `train-dpm`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of samples (default 8).
    #[arg(long)]
    n: Option<usize>,
    /// Solver steps (default 20).
    #[arg(long)]
    steps: Option<usize>,
    /// ancestral | first_order | dpm2s | dpm2m (default dpm2m).
    #[arg(long)]
    method: Option<String>,
    /// Guidance weight w >= -1 (default 0).
    #[arg(long)]
    guidance_w: Option<f64>,
    /// none | static[:bound] | dynamic[:percentile] (default none).
    #[arg(long)]
    threshold: Option<String>,
    /// epsilon | data (default data).
    #[arg(long)]
    prediction: Option<String>,
    /// Conditioning class id; omitted = unconditional.
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn sample(config_path: Option<&Path>, args: SampleArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let model_path = r.path(args.model, "model")?;
    let out = r.path(args.out, "out")?;
    let n = r.get(args.n, "n", 8usize)?;
    let steps = r.get(args.steps, "steps", 20usize)?;
    let method_raw = r.get(args.method, "method", "dpm2m".to_string())?;
    let guidance = r.get(args.guidance_w, "guidance-w", 0.0f64)?;
    let threshold_raw = r.get(args.threshold, "threshold", "none".to_string())?;
    let prediction_raw = r.get(args.prediction, "prediction", "data".to_string())?;
    let label: Option<usize> = r.get_opt(args.label, "label")?;
    let seed = r.seed(args.seed)?;

    let method: Method = method_raw.parse().map_err(|e| UsageError(format!("{e}")))?;
    let thresholding: Thresholding =
        threshold_raw.parse().map_err(|e| UsageError(format!("{e}")))?;
    let prediction: Prediction =
        prediction_raw.parse().map_err(|e| UsageError(format!("{e}")))?;

    let (model, spec) = checkpoint::load(&model_path)
        .with_context(|| format!("loading {}", model_path.display()))?
        .into_condnet()?;
    if let Some(class) = label {
        if class >= model.config().num_classes {
            return Err(UsageError(format!(
                "label {class} out of range for {} classes",
                model.config().num_classes
            ))
            .into());
        }
    }
    let schedule = spec.build()?;
    let solver_config = SolverConfig {
        method,
        num_steps: steps,
        guidance_scale: guidance,
        thresholding,
        prediction,
        seed,
        ..SolverConfig::default()
    };
    let sampler = Sampler::new(&model, &schedule, solver_config)?;
    let shape = [model.config().height, model.config().width];
    log::info!("sampling {n} spectrograms with {method_raw} at {steps} steps");
    let samples = sampler.sample(&shape, n, label)?;

    let out = prepare_out_dir(&out)?;
    let samples_dir = out.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    let label_byte = label.and_then(|l| u8::try_from(l).ok());
    for (i, grid) in samples.iter().enumerate() {
        data::save_spectrogram(samples_dir.join(format!("sample_{i:05}.sgrm")), grid, label_byte)?;
    }
    r.write_snapshot(&out, "sample")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct FilterArgs {
    /// Directory of labeled SGRM samples.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Classifier checkpoint from `train-clf`.
    #[arg(long)]
    clf: Option<PathBuf>,
    /// Top-k rank threshold (default 1).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn filter(config_path: Option<&Path>, args: FilterArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let samples_dir = r.path(args.samples, "samples")?;
    let clf_path = r.path(args.clf, "clf")?;
    let k = r.get(args.k, "k", 1usize)?;
    let out = r.path(args.out, "out")?;

    let clf = checkpoint::load(&clf_path)
        .with_context(|| format!("loading {}", clf_path.display()))?
        .into_classifier()?;
    let entries = load_sgrm_dir(&samples_dir)?;
    let mut grids = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    let mut names = Vec::with_capacity(entries.len());
    for (name, grid, label) in entries {
        let Some(label) = label else {
            bail!("{name}: sample carries no label byte; filtering needs conditioning labels");
        };
        grids.push(grid);
        labels.push(label as usize);
        names.push(name);
    }
    let (_, report) = topk_filter(&grids, &labels, &clf, k)?;

    let out = prepare_out_dir(&out)?;
    let accepted_dir = out.join("accepted");
    std::fs::create_dir_all(&accepted_dir)?;
    // re-run the acceptance decision per sample to keep file names stable
    for ((grid, &label), name) in grids.iter().zip(&labels).zip(&names) {
        let scores = clf.predict_scores(grid)?;
        if diffaug::selection::top_k_classes(&scores, k).contains(&label) {
            data::save_spectrogram(accepted_dir.join(name), grid, Some(label as u8))?;
        }
    }
    report.write_csv(out.join("report.csv"))?;
    r.write_snapshot(&out, "filter")?;
    log::info!(
        "accepted {}/{} samples at k={k}",
        report.accepted,
        report.total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-clf
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainClfArgs {
    /// Manifest of SGRM spectrograms to train on (pass the augmented
    /// manifest for the default pipeline, or the real one).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training epochs (default 500).
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (default 30).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Label smoothing (default 0.1).
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Comma-separated conv widths (default 16,32,64).
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train_clf(config_path: Option<&Path>, args: TrainClfArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let manifest = r.path(args.data, "data")?;
    let out = r.path(args.out, "out")?;
    let epochs = r.get(args.epochs, "epochs", 500usize)?;
    let batch_size = r.get(args.batch_size, "batch-size", 30usize)?;
    let label_smoothing = r.get(args.label_smoothing, "label-smoothing", 0.1f64)?;
    let lr = r.get(args.lr, "lr", 1e-4f32)?;
    let weight_decay = r.get(args.weight_decay, "weight-decay", 0.05f32)?;
    let widths_raw = r.get(args.widths, "widths", "16,32,64".to_string())?;
    let seed = r.seed(args.seed)?;

    let widths = parse_usize_list(&widths_raw, "widths")?;
    let (_, dataset) = load_sgrm_dataset(&manifest, None)?;
    let num_classes = dataset.iter().map(|s| s.class_id).max().unwrap_or(0) + 1;
    let shape = dataset[0].spectrogram.shape().to_vec();
    let clf_config = ClassifierConfig {
        in_channels: 1,
        widths,
        num_classes,
        height: shape[0],
        width: shape[1],
    };
    let train_config = ClassifierTrainConfig {
        epochs,
        batch_size,
        label_smoothing,
        optimizer: AdamWConfig {
            lr,
            weight_decay,
            ..AdamWConfig::default()
        },
        seed,
    };
    log::info!(
        "training classifier: {} samples, {} classes, {} epochs",
        dataset.len(),
        num_classes,
        epochs
    );
    let clf = train_discriminator(&dataset, &clf_config, &train_config)?;
    let out = prepare_out_dir(&out)?;
    checkpoint::save_classifier(out.join("clf.denw"), &clf)?;
    let train_refs: Vec<&LabeledSample> = dataset.iter().collect();
    let acc = classifier_accuracy(&clf, &train_refs)?;
    r.write_snapshot(&out, "train-clf")?;
    log::info!("training accuracy {acc:.3}; checkpoint at {}", out.join("clf.denw").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvaluateArgs {
    /// Manifest of real SGRM spectrograms with predefined folds.
    #[arg(long)]
    real: Option<PathBuf>,
    /// Manifest of traditionally augmented spectrograms (optional arm).
    #[arg(long)]
    traditional: Option<PathBuf>,
    /// Directory of accepted synthetic samples (optional arm).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Number of folds (default 10).
    #[arg(long)]
    folds: Option<u32>,
    /// Classifier epochs per arm and fold (default 100).
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size (default 30).
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Comma-separated conv widths (default 16,32,64).
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn evaluate(config_path: Option<&Path>, args: EvaluateArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let real_path = r.path(args.real, "real")?;
    let traditional_path = r.path_opt(args.traditional, "traditional")?;
    let synthetic_dir = r.path_opt(args.synthetic, "synthetic")?;
    let folds = r.get(args.folds, "folds", 10u32)?;
    let epochs = r.get(args.epochs, "epochs", 100usize)?;
    let batch_size = r.get(args.batch_size, "batch-size", 30usize)?;
    let lr = r.get(args.lr, "lr", 1e-4f32)?;
    let widths_raw = r.get(args.widths, "widths", "16,32,64".to_string())?;
    let out = r.path(args.out, "out")?;
    let seed = r.seed(args.seed)?;

    let widths = parse_usize_list(&widths_raw, "widths")?;
    let (real_rows, real_samples) = load_sgrm_dataset(&real_path, None)?;
    let splits = data::kfold_splits(&real_rows, folds)?;
    if splits.is_empty() {
        bail!("no usable folds in {}", real_path.display());
    }

    let traditional: Vec<LabeledSample> = match &traditional_path {
        Some(path) => load_sgrm_dataset(path, None)?.1,
        None => Vec::new(),
    };
    let synthetic: Vec<LabeledSample> = match &synthetic_dir {
        Some(dir) => load_sgrm_dir(dir)?
            .into_iter()
            .map(|(name, grid, label)| {
                let label = label
                    .ok_or_else(|| anyhow::anyhow!("{name}: synthetic sample without label"))?;
                Ok(LabeledSample {
                    spectrogram: grid,
                    class_id: label as usize,
                    fold: 1,
                })
            })
            .collect::<anyhow::Result<_>>()?,
        None => Vec::new(),
    };

    let num_classes = real_samples
        .iter()
        .map(|s| s.class_id)
        .chain(synthetic.iter().map(|s| s.class_id))
        .chain(traditional.iter().map(|s| s.class_id))
        .max()
        .unwrap_or(0)
        + 1;
    let shape = real_samples[0].spectrogram.shape().to_vec();

    let mut arms: Vec<(&str, &[LabeledSample])> = vec![("real", &[])];
    if !traditional.is_empty() {
        arms.push(("real+traditional", &traditional));
    }
    if !synthetic.is_empty() {
        arms.push(("real+synthetic", &synthetic));
    }

    let mut csv = String::from("arm,fold,accuracy\n");
    let mut means = Vec::new();
    for (arm_name, extra) in &arms {
        let mut fold_accs = Vec::new();
        for split in &splits {
            let mut train_set: Vec<LabeledSample> = split
                .train
                .iter()
                .map(|&i| real_samples[i].clone())
                .collect();
            train_set.extend(extra.iter().cloned());
            let clf = train_discriminator(
                &train_set,
                &ClassifierConfig {
                    in_channels: 1,
                    widths: widths.clone(),
                    num_classes,
                    height: shape[0],
                    width: shape[1],
                },
                &ClassifierTrainConfig {
                    epochs,
                    batch_size,
                    label_smoothing: 0.1,
                    optimizer: AdamWConfig {
                        lr,
                        ..AdamWConfig::default()
                    },
                    seed,
                },
            )?;
            let test_refs: Vec<&LabeledSample> =
                split.test.iter().map(|&i| &real_samples[i]).collect();
            let acc = classifier_accuracy(&clf, &test_refs)?;
            csv.push_str(&format!("{arm_name},{},{acc}\n", split.fold));
            fold_accs.push(acc);
        }
        let mean = fold_accs.iter().sum::<f64>() / fold_accs.len() as f64;
        means.push((arm_name.to_string(), mean));
        csv.push_str(&format!("{arm_name},mean,{mean}\n"));
    }

    let out = prepare_out_dir(&out)?;
    std::fs::write(out.join("accuracy.csv"), &csv)?;
    r.write_snapshot(&out, "evaluate")?;
    for (arm, mean) in means {
        log::info!("{arm}: fold-mean accuracy {mean:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-solver
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BenchSolverArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated step counts (default 10,15,20,30,60).
    #[arg(long)]
    steps: Option<String>,
    /// Comma-separated methods (default first_order,dpm2s,dpm2m).
    #[arg(long)]
    methods: Option<String>,
    /// Trajectories per configuration (default 10000).
    #[arg(long)]
    samples: Option<usize>,
    /// Oracle data mean (default 3.0).
    #[arg(long)]
    mu: Option<f64>,
    /// Oracle data standard deviation (default 0.5).
    #[arg(long)]
    sigma0: Option<f64>,
    /// Diffusion steps T (default 1000).
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn bench_solver(config_path: Option<&Path>, args: BenchSolverArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let out = r.path(args.out, "out")?;
    let steps_raw = r.get(args.steps, "steps", "10,15,20,30,60".to_string())?;
    let methods_raw = r.get(args.methods, "methods", "first_order,dpm2s,dpm2m".to_string())?;
    let samples = r.get(args.samples, "samples", 10_000usize)?;
    let mu = r.get(args.mu, "mu", 3.0f64)?;
    let sigma0 = r.get(args.sigma0, "sigma0", 0.5f64)?;
    let t_steps = r.get(args.t_steps, "t-steps", 1000usize)?;
    let seed = r.seed(args.seed)?;

    let step_counts = parse_usize_list(&steps_raw, "steps")?;
    let methods: Vec<Method> = methods_raw
        .split(',')
        .map(|s| s.trim().parse::<Method>().map_err(|e| UsageError(format!("{e}")).into()))
        .collect::<anyhow::Result<_>>()?;

    let schedule = NoiseSchedule::linear(t_steps, 1e-4, 0.02)?;
    let model = BoundScalarGaussian {
        model: ScalarGaussianEps { mu, sigma0 },
        schedule: &schedule,
    };
    let mut csv = String::from("method,steps,w1\n");
    for method in &methods {
        for &steps in &step_counts {
            let mut xs = sample_scalar(
                &model,
                &schedule,
                *method,
                Prediction::Data,
                steps,
                TimeSpacing::UniformT,
                samples,
                seed,
            )?;
            let w1 = wasserstein1_to_gaussian(&mut xs, mu, sigma0);
            let label = match method {
                Method::Ancestral => "ancestral",
                Method::FirstOrder => "first_order",
                Method::Dpm2s => "dpm2s",
                Method::Dpm2m => "dpm2m",
            };
            let effective_steps = if matches!(method, Method::Ancestral) {
                t_steps
            } else {
                steps
            };
            csv.push_str(&format!("{label},{effective_steps},{w1}\n"));
            log::info!("{label} @ {effective_steps} steps: W1 = {w1:.5}");
        }
    }
    let out = prepare_out_dir(&out)?;
    std::fs::write(out.join("bench.csv"), &csv)?;
    r.write_snapshot(&out, "bench-solver")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export-pgm
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ExportPgmArgs {
    /// SGRM file to export.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn export_pgm(config_path: Option<&Path>, args: ExportPgmArgs) -> anyhow::Result<()> {
    let mut r = Resolver::new(config_path)?;
    let input = r.path(args.input, "input")?;
    let out = r.path(args.out, "out")?;

    let (grid, _) = data::load_spectrogram(&input)
        .with_context(|| format!("loading {}", input.display()))?;
    let shape = grid.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for &v in grid.data() {
        let byte = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8;
        pgm.push(byte);
    }
    let out = prepare_out_dir(&out)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "spectrogram".into());
    let path = out.join(format!("{stem}.pgm"));
    std::fs::write(&path, pgm).with_context(|| format!("writing {}", path.display()))?;
    r.write_snapshot(&out, "export-pgm")?;
    log::info!("wrote {}", path.display());
    Ok(())
}
