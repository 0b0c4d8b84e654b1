use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neunet::checkpoint::load_checkpoint;
use neunet::io::{read_key_values, read_volume, write_bytes, write_volume, KeyValues};
use neunet::metrics::metrics_csv;
use neunet::network::NetConfig;
use neunet::ops::{checkerboard_csv, checkerboard_experiment, CheckerboardSetup};
use neunet::preprocess::{
    make_phantoms, preprocess_case, read_dataset, target_spacing, write_dataset, Dataset,
};
use neunet::train::{evaluate, trainer_for_dir, TrainConfig};
use neunet::wavelet::{dwt3d, idwt3d, AxisFlags, SubbandSet};
use neunet::{Error, Result};

#[derive(Parser)]
#[command(name = "neunet", version, about = "Volumetric segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Phantoms(PhantomArgs),
    /// Crop, resample and normalize a dataset directory.
    Preprocess(PreprocessArgs),
    /// Train on a preprocessed dataset directory.
    Train(TrainArgs),
    /// Dice / HD95 report of a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Multi-level Haar decomposition of a volume into band files.
    Dwt(DwtArgs),
    /// Reassemble a volume from band files written by `dwt`.
    Idwt(IdwtArgs),
    /// Phase imbalance of transposed convolution vs the sub-pixel block.
    Checkerboard(CheckerboardArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Class count including background.
    #[arg(long, default_value_t = 3)]
    classes: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for log.csv and checkpoints; an existing
    /// last.nvckpt there is resumed.
    #[arg(long)]
    out: PathBuf,
    /// Number of trailing cases held out for validation.
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Patch edge, `n` or `a,b,c`.
    #[arg(long)]
    patch: Option<String>,
    /// Plain-text `key=value` settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 64)]
    channel_cap: usize,
    /// Zero and freeze the wavelet branch.
    #[arg(long)]
    ablate: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DwtArgs {
    input: PathBuf,
    /// Transformed axes as letters from `ijk`.
    #[arg(long, default_value = "ijk")]
    axes: String,
    #[arg(long, default_value_t = 1)]
    levels: usize,
    /// Output prefix; defaults to the input path without extension.
    #[arg(long)]
    stem: Option<PathBuf>,
}

#[derive(Args)]
struct IdwtArgs {
    /// Prefix given to (or chosen by) `dwt`.
    stem: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckerboardArgs {
    #[arg(long, default_value_t = 50)]
    seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 2)]
    stride: usize,
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantoms(a) => phantoms(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Dwt(a) => dwt(a),
        Command::Idwt(a) => idwt(a),
        Command::Checkerboard(a) => checkerboard(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_patch(text: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("patch `{text}` is not a list of integers")))?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Argument(format!("patch needs 1 or 3 values, got `{text}`"))),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_bytes(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn phantoms(a: PhantomArgs) -> Result<()> {
    let ds = make_phantoms(a.cases, [a.size; 3], a.classes, a.seed)?;
    write_dataset(&a.out, &ds)?;
    eprintln!("wrote {} cases to {}", ds.cases.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let (raw, fp) = read_dataset(&a.input)?;
    let spacing = target_spacing(&fp);
    let cases = raw
        .cases
        .iter()
        .map(|c| preprocess_case(c, &fp, spacing))
        .collect::<Result<Vec<_>>>()?;
    let out = Dataset {
        cases,
        ..raw
    };
    write_dataset(&a.out, &out)?;
    // statistics the normalization used, for applying it to new cases
    write_bytes(&a.out.join("source_fingerprint.json"), fp.to_key_values().to_text().as_bytes())?;
    eprintln!("preprocessed {} cases at spacing {spacing:?}", out.cases.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig {
        epochs: 1000,
        ..Default::default()
    };
    let (mut base, mut cap, mut ablate) = (a.base_channels, a.channel_cap, a.ablate);
    if let Some(path) = &a.config {
        let kv = read_key_values(path)?;
        let mut rest = KeyValues::new();
        for key in kv.keys() {
            let value = kv.get(key).unwrap_or_default();
            let bad = || Error::Config(format!("`{key}` has invalid value `{value}`"));
            match key {
                "base_channels" => base = value.parse().map_err(|_| bad())?,
                "channel_cap" => cap = value.parse().map_err(|_| bad())?,
                "ablate" => ablate = ablate || value.parse().map_err(|_| bad())?,
                _ => rest.insert(key, value),
            }
        }
        cfg.apply(&rest)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.initial_lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(p) = &a.patch {
        cfg.patch = parse_patch(p)?;
    }
    cfg.validate()?;

    let (ds, _) = read_dataset(&a.data)?;
    if a.val >= ds.cases.len() {
        return Err(Error::Argument(format!(
            "cannot hold out {} of {} cases for validation",
            a.val,
            ds.cases.len()
        )));
    }
    let spacing = ds.cases[0].spacing();
    let in_channels = ds.cases[0].image.channels();
    let net_cfg = NetConfig::for_spacing(spacing, in_channels, ds.num_classes as usize, base, cap)?;
    let (train, val) = ds.cases.split_at(ds.cases.len() - a.val);

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut trainer = trainer_for_dir(&a.out, net_cfg, cfg)?;
    if ablate {
        trainer.net.zero_wavelet_branch();
    }
    trainer.fit(train, val, Some(&a.out), |r| {
        let dice = r
            .val_dice
            .as_ref()
            .map(|d| format!(" val_dice {d:.4?}"))
            .unwrap_or_default();
        eprintln!("epoch {:4} lr {:.6} loss {:.5}{dice}", r.epoch, r.lr, r.loss);
    })?;
    if let (Some(d), Some(e)) = (trainer.best_dice, trainer.best_epoch) {
        eprintln!("best mean validation dice {d:.4} at epoch {e}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (ds, _) = read_dataset(&a.data)?;
    let patch = match &a.patch {
        Some(p) => parse_patch(p)?,
        None => TrainConfig::default().patch,
    };
    let rows = evaluate(&ckpt.net, &ds.cases, patch, a.overlap)?;
    emit(a.out.as_deref(), &metrics_csv(&rows))
}

fn parse_axes(text: &str) -> Result<AxisFlags> {
    let mut flags = [false; 3];
    for ch in text.chars() {
        let axis = "ijk"
            .find(ch)
            .ok_or_else(|| Error::Argument(format!("unknown axis `{ch}` in `{text}`; use letters from ijk")))?;
        flags[axis] = true;
    }
    if flags == [false; 3] {
        return Err(Error::Argument("at least one axis must be transformed".into()));
    }
    Ok(flags)
}

fn axes_text(flags: AxisFlags) -> String {
    "ijk"
        .chars()
        .zip(flags)
        .filter(|(_, f)| *f)
        .map(|(c, _)| c)
        .collect()
}

fn band_path(stem: &Path, level: usize, band: usize) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(format!(".l{level}.band{band}.vol"));
    PathBuf::from(name)
}

fn manifest_path(stem: &Path) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(".dwt");
    PathBuf::from(name)
}

/// Level `l` keeps its detail bands; the approximation is transformed
/// again, and only the last level writes its approximation (band 0).
fn dwt(a: DwtArgs) -> Result<()> {
    if a.levels == 0 {
        return Err(Error::Argument("levels must be at least 1".into()));
    }
    let flags = parse_axes(&a.axes)?;
    let stem = a.stem.unwrap_or_else(|| a.input.with_extension(""));
    let mut current = read_volume(&a.input)?;
    for level in 1..=a.levels {
        let set = dwt3d(&current, flags)?;
        for (k, band) in set.bands.iter().enumerate().skip(1) {
            write_volume(&band_path(&stem, level, k), band)?;
        }
        current = set.bands[0].clone();
    }
    write_volume(&band_path(&stem, a.levels, 0), &current)?;
    let mut kv = KeyValues::new();
    kv.insert("axes", axes_text(flags));
    kv.insert("levels", a.levels);
    write_bytes(&manifest_path(&stem), kv.to_text().as_bytes())?;
    eprintln!(
        "{} levels over axes {}; approximation shape {:?}",
        a.levels,
        axes_text(flags),
        current.shape()
    );
    Ok(())
}

fn idwt(a: IdwtArgs) -> Result<()> {
    let manifest = manifest_path(&a.stem);
    let kv = read_key_values(&manifest)?;
    let bad = |reason: String| Error::Format {
        path: manifest.clone(),
        reason,
    };
    let flags = parse_axes(kv.require("axes").map_err(bad)?)?;
    let levels: usize = kv.parse_value("levels").map_err(bad)?;
    let count = 1usize << flags.iter().filter(|&&f| f).count();
    let mut current = read_volume(&band_path(&a.stem, levels, 0))?;
    for level in (1..=levels).rev() {
        let mut bands = vec![current];
        for k in 1..count {
            bands.push(read_volume(&band_path(&a.stem, level, k))?);
        }
        current = idwt3d(&SubbandSet {
            bands,
            axis_flags: flags,
        })?;
    }
    write_volume(&a.out, &current)
}

fn checkerboard(a: CheckerboardArgs) -> Result<()> {
    let setup = CheckerboardSetup {
        kernel: a.kernel,
        stride: a.stride,
        size: a.size,
        channels: a.channels,
    };
    let rows = checkerboard_experiment(setup, a.seed, a.seeds)?;
    emit(a.out.as_deref(), &checkerboard_csv(&rows))
}
