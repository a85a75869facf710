//! The `lgatt` command line: `gendata`, `train`, `eval` and `analyze`.
//!
//! Every command reads an optional TOML [`ExperimentConfig`], applies flag
//! overrides, validates the result before doing any work and writes the
//! resolved config next to its outputs. Exit codes: 0 success, 2 config or
//! usage error, 3 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    attention_profile, band_neighborhoods, cosine_similarity_matrix, default_window, gradient_matrix,
    locality_statistic, write_heatmap, TowerEncoder,
};
use crate::attention::Mode;
use crate::checkpoint;
use crate::data::{generate_synthetic, pad_record, read_records, write_records, PaddedVideo, SynthConfig, VideoRecord};
use crate::encoder::{Modality, Model, ModelConfig, VariantSpec};
use crate::error::{Error, Result};
use crate::masks::MaskSpec;
use crate::metrics::{evaluate, EvalReport};
use crate::train::{predict_all, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Parameters of the synthetic corpus. Feature dims and class count come from
/// the model section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `train/`, `val/` and `test/`.
    pub dir: PathBuf,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub motif_len: usize,
    pub min_motifs: usize,
    pub max_motifs: usize,
    pub noise: f64,
    pub signal: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_videos: 2000,
            val_videos: 500,
            test_videos: 500,
            min_frames: 24,
            max_frames: 32,
            motif_len: 3,
            min_motifs: 1,
            max_motifs: 3,
            noise: 1.0,
            signal: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub modality: Modality,
    /// Number of videos analyzed, taken in id order.
    pub videos: usize,
    /// Radius of the `N_i` band; defaults to the tower's local-mask window.
    pub window: Option<usize>,
    /// Encoder block whose attention maps are profiled.
    pub block: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            modality: Modality::Visual,
            videos: 50,
            window: None,
            block: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation, model initialization and shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config("config", format!("{}: {reason}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| prefix_field("model", e))?;
        self.train
            .validate()
            .map_err(|e| prefix_field("train", e))?;
        self.synth_config(0)
            .validate()
            .map_err(|e| prefix_field("data", e))?;
        if self.data.train_videos == 0 || self.data.val_videos == 0 || self.data.test_videos == 0 {
            return Err(Error::config("data", "every split needs at least one video"));
        }
        if self.analysis.videos == 0 {
            return Err(Error::config("analysis.videos", "must be >= 1"));
        }
        if self.analysis.block >= self.model.depth {
            return Err(Error::config(
                "analysis.block",
                format!("block {} but depth is {}", self.analysis.block, self.model.depth),
            ));
        }
        Ok(())
    }

    /// Generator settings for the whole corpus, all splits together.
    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            num_videos: d.train_videos + d.val_videos + d.test_videos,
            num_classes: self.model.num_classes,
            min_frames: d.min_frames,
            max_frames: d.max_frames,
            motif_len: d.motif_len,
            min_motifs: d.min_motifs,
            max_motifs: d.max_motifs,
            noise: d.noise,
            signal: d.signal,
            visual_dim: self.model.visual_dim,
            audio_dim: self.model.audio_dim,
            seed,
            id_prefix: "vid".into(),
        }
    }

    /// Sets both towers to `mode`, keeping or replacing their masks. ShareAtt
    /// repeats a single mask over its local heads.
    pub fn set_variant(&mut self, mode: Option<Mode>, mask: Option<MaskSpec>) {
        let heads = self.model.heads;
        for spec in [&mut self.model.visual_variant, &mut self.model.audio_variant] {
            let mode = mode.unwrap_or(spec.mode);
            let base = mask.or_else(|| spec.masks.first().copied());
            let masks = match (mode, base) {
                (Mode::Baseline, _) => Vec::new(),
                (Mode::ShareAtt, Some(m)) if mask.is_some() || spec.masks.len() != heads / 2 => vec![m; heads / 2],
                (Mode::ShareAtt, _) => spec.masks.clone(),
                (_, Some(m)) => vec![m],
                (_, None) => Vec::new(),
            };
            *spec = VariantSpec::new(mode, masks);
        }
    }
}

fn prefix_field(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, reason } => Error::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    }
}

#[derive(Debug, Parser)]
#[command(name = "lgatt", version, about = "Local/global gated self-attention video classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic motif corpus (train/val/test) to the output directory.
    Gendata(Common),
    /// Train a model; writes the best checkpoint and a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Score a checkpoint on a dataset split; writes an EvalReport JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Attention profiles, frame similarity, gradient matrices and locality
    /// statistics for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Tower to analyze: visual or audio.
        #[arg(long, value_parser = parse_modality)]
        modality: Option<Modality>,
        /// Number of videos to analyze.
        #[arg(long)]
        videos: Option<usize>,
        /// Radius of the neighborhoods used for the locality statistic.
        #[arg(long)]
        window: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Dataset root with train/, val/ and test/ splits.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VariantArgs {
    /// baseline, shareatt, gateatt, gateop or local.
    #[arg(long)]
    variant: Option<Mode>,
    /// Local mask: bd:W, tp:W, td:W:L or full.
    #[arg(long)]
    mask: Option<MaskSpec>,
}

#[derive(Debug, Args)]
struct Target {
    /// Defaults to <out-dir>/model.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    match s.to_ascii_lowercase().as_str() {
        "visual" => Ok(Modality::Visual),
        "audio" => Ok(Modality::Audio),
        _ => Err(format!("unknown modality {s:?} (expected visual or audio)")),
    }
}

/// Exit code for an error: configuration and missing-input problems are usage
/// errors, everything else is a runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidMask(_) => EXIT_USAGE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(d) = &common.data_dir {
        cfg.data.dir = d.clone();
    }
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gendata(common) => {
            let mut cfg = resolve(&common)?;
            if common.out_dir.is_some() {
                cfg.data.dir = cfg.out_dir.clone();
            }
            cfg.validate()?;
            gendata(&cfg)
        }
        Command::Train { common, variant } => {
            let mut cfg = resolve(&common)?;
            cfg.set_variant(variant.variant, variant.mask);
            cfg.validate()?;
            run_train(&cfg)
        }
        Command::Eval { common, target } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            let report = run_eval(&cfg, &target.checkpoint_path(&cfg), &target.split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Analyze {
            common,
            target,
            modality,
            videos,
            window,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = modality {
                cfg.analysis.modality = m;
            }
            if let Some(v) = videos {
                cfg.analysis.videos = v;
            }
            if window.is_some() {
                cfg.analysis.window = window;
            }
            cfg.validate()?;
            run_analyze(&cfg, &target.checkpoint_path(&cfg), &target.split)
        }
    }
}

impl Target {
    fn checkpoint_path(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
    }
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn split_dir(cfg: &ExperimentConfig, split: &str) -> Result<PathBuf> {
    if !SPLITS.contains(&split) {
        return Err(Error::config("split", format!("unknown split {split:?}")));
    }
    let dir = cfg.data.dir.join(split);
    if !dir.is_dir() {
        return Err(Error::config(
            "data.dir",
            format!("{} does not exist; run gendata first", dir.display()),
        ));
    }
    Ok(dir)
}

/// Generates the corpus and writes it as `train/`, `val/` and `test/` under
/// `cfg.data.dir`, in id order.
pub fn gendata(cfg: &ExperimentConfig) -> Result<()> {
    let records = generate_synthetic(&cfg.synth_config(cfg.seed))?;
    let d = &cfg.data;
    let (train_set, rest) = records.split_at(d.train_videos);
    let (val_set, test_set) = rest.split_at(d.val_videos);
    for (name, part) in SPLITS.iter().zip([train_set, val_set, test_set]) {
        write_records(part, &d.dir.join(name))?;
    }
    echo_config(cfg, &d.dir)?;
    eprintln!(
        "wrote {} / {} / {} videos to {}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        d.dir.display()
    );
    Ok(())
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<()> {
    let train_set = read_records(&split_dir(cfg, "train")?)?;
    let val_set = read_records(&split_dir(cfg, "val")?)?;
    check_dims(cfg, &train_set)?;
    fs::create_dir_all(&cfg.out_dir)?;
    echo_config(cfg, &cfg.out_dir)?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut log = BufWriter::new(fs::File::create(cfg.out_dir.join(TRAIN_LOG_FILE))?);
    let mut write_err = None;
    let outcome = train(model, &train_set, &val_set, &cfg.train, &mut |rec| {
        eprintln!(
            "iter {:>7}  loss {:.6}  val_gap {:.4}  lr {:.2e}{}",
            rec.iter,
            rec.loss,
            rec.val_gap,
            rec.lr,
            if rec.best { "  *" } else { "" }
        );
        let res = serde_json::to_writer(&mut log, rec)
            .map_err(Error::from)
            .and_then(|_| log.write_all(b"\n").map_err(Error::from))
            .and_then(|_| log.flush().map_err(Error::from));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    checkpoint::save(&outcome.best, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    eprintln!(
        "best val_gap {:.4} at iter {} ({} iters{})",
        outcome.best_val_gap,
        outcome.best_iter,
        outcome.iters,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

fn check_dims(cfg: &ExperimentConfig, records: &[VideoRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| {
        r.visual.cols() != cfg.model.visual_dim
            || r.audio.cols() != cfg.model.audio_dim
            || r.labels.iter().any(|&l| l >= cfg.model.num_classes)
    }) {
        return Err(Error::Record {
            id: r.id.clone(),
            reason: format!(
                "features {}+{} dims or labels {:?} do not fit the model ({}+{} dims, {} classes)",
                r.visual.cols(),
                r.audio.cols(),
                r.labels,
                cfg.model.visual_dim,
                cfg.model.audio_dim,
                cfg.model.num_classes
            ),
        });
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(Error::config("checkpoint", format!("{} not found", path.display())));
    }
    checkpoint::load(path)
}

/// `cfg` with its model section replaced by the checkpoint's.
fn with_model(cfg: &ExperimentConfig, model: &Model) -> ExperimentConfig {
    ExperimentConfig {
        model: model.config.clone(),
        ..cfg.clone()
    }
}

fn load_split(cfg: &ExperimentConfig, model: &Model, split: &str) -> Result<Vec<PaddedVideo>> {
    let records = read_records(&split_dir(cfg, split)?)?;
    check_dims(&with_model(cfg, model), &records)?;
    Ok(records
        .iter()
        .map(|r| pad_record(r, model.config.max_frames))
        .collect())
}

pub fn run_eval(cfg: &ExperimentConfig, ckpt: &Path, split: &str) -> Result<EvalReport> {
    let model = load_checkpoint(ckpt)?;
    let videos = load_split(cfg, &model, split)?;
    if videos.is_empty() {
        return Err(Error::config("split", format!("{split} split is empty")));
    }
    let report = evaluate(&predict_all(&model, &videos)?)?;
    echo_config(&with_model(cfg, &model), &cfg.out_dir)?;
    let mut f = fs::File::create(cfg.out_dir.join(EVAL_FILE))?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    writeln!(f)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    modality: Modality,
    window: usize,
    videos: Vec<String>,
    mean_locality: f64,
}

struct VideoAnalysis {
    id: String,
    profile: Vec<f64>,
    locality: Vec<f64>,
    maps: Vec<crate::Tensor>,
    similarity: crate::Tensor,
    gradient: crate::Tensor,
}

/// Writes, under `<out_dir>/analysis`: `profiles.csv` and `locality.csv`
/// (`video,frame,value` rows), one directory per video with PGM heatmaps of
/// each head's map, the frame similarity and `G`, PGMs of the tower's local
/// masks, and `summary.json`.
pub fn run_analyze(cfg: &ExperimentConfig, ckpt: &Path, split: &str) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let a = &cfg.analysis;
    if a.block >= model.config.depth {
        return Err(Error::config(
            "analysis.block",
            format!("block {} but the checkpoint has depth {}", a.block, model.config.depth),
        ));
    }
    let mut videos = load_split(cfg, &model, split)?;
    videos.sort_by(|x, y| x.id.cmp(&y.id));
    videos.truncate(a.videos);
    if videos.is_empty() {
        return Err(Error::config("split", format!("{split} split is empty")));
    }
    let window = a
        .window
        .unwrap_or_else(|| default_window(&model.config, a.modality));
    let tower = model.tower(a.modality);

    let results = videos
        .par_iter()
        .map(|v| {
            let n = v.valid_len;
            if 2 * window + 1 >= n {
                return Err(Error::config(
                    "analysis.window",
                    format!("window {window} leaves no frames outside N_i for video {} ({n} frames)", v.id),
                ));
            }
            let x = match a.modality {
                Modality::Visual => &v.visual,
                Modality::Audio => &v.audio,
            };
            let (_, caches) = tower.forward(x, n)?;
            let maps: Vec<crate::Tensor> = caches[a.block]
                .attention()
                .head_maps()
                .into_iter()
                .map(|h| leading_block(&h.used, n))
                .collect::<Result<_>>()?;
            let profile = attention_profile(&maps)?;
            let valid_x = leading_rows(x, n)?;
            let g = gradient_matrix(&TowerEncoder { tower, valid_len: n }, x)?.leading(n)?;
            let s = locality_statistic(&g, &band_neighborhoods(n, window))?;
            Ok(VideoAnalysis {
                id: v.id.clone(),
                profile: profile.into_data(),
                locality: s.into_data(),
                maps,
                similarity: cosine_similarity_matrix(&valid_x),
                gradient: g.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let out = cfg.out_dir.join("analysis");
    fs::create_dir_all(&out)?;
    echo_config(&with_model(cfg, &model), &cfg.out_dir)?;
    let mut profiles = String::from("video,frame,attention\n");
    let mut locality = String::from("video,frame,s\n");
    let mut s_sum = 0.0;
    let mut s_count = 0usize;
    for r in &results {
        for (j, p) in r.profile.iter().enumerate() {
            profiles.push_str(&format!("{},{j},{p}\n", r.id));
        }
        for (i, s) in r.locality.iter().enumerate() {
            locality.push_str(&format!("{},{i},{s}\n", r.id));
            s_sum += s;
            s_count += 1;
        }
        let dir = out.join(&r.id);
        fs::create_dir_all(&dir)?;
        for (m, map) in r.maps.iter().enumerate() {
            write_heatmap(&dir.join(format!("head{m}.pgm")), map)?;
        }
        write_heatmap(&dir.join("similarity.pgm"), &r.similarity)?;
        write_heatmap(&dir.join("gradient.pgm"), &r.gradient)?;
    }
    fs::write(out.join("profiles.csv"), profiles)?;
    fs::write(out.join("locality.csv"), locality)?;
    let variant = tower.blocks[0].attention.variant.clone();
    for (k, mask) in variant.local_masks.iter().enumerate() {
        fs::write(out.join(format!("mask{k}.pgm")), mask.to_pgm())?;
    }
    let summary = AnalysisSummary {
        modality: a.modality,
        window,
        videos: results.iter().map(|r| r.id.clone()).collect(),
        mean_locality: s_sum / s_count as f64,
    };
    let mut f = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    eprintln!(
        "analyzed {} videos; mean S_i {:.4} (window {window})",
        results.len(),
        summary.mean_locality
    );
    Ok(())
}

fn leading_rows(t: &crate::Tensor, n: usize) -> Result<crate::Tensor> {
    crate::Tensor::new(vec![n, t.cols()], t.data()[..n * t.cols()].to_vec())
}

fn leading_block(t: &crate::Tensor, n: usize) -> Result<crate::Tensor> {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| t.row(i)[..n].to_vec()).collect();
    crate::Tensor::from_rows(&rows)
}
