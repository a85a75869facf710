//! Synthetic planted-motif corpus, the on-disk feature format, and
//! truncation/padding to a fixed frame count.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/manifest.jsonl        one JSON object per record
//! <dir>/features/<id>.visual.f32
//! <dir>/features/<id>.audio.f32
//! ```
//!
//! Feature files carry a 16-byte little-endian header
//! `{magic "Y8MF", version u32, rows u32, cols u32}` followed by `rows * cols`
//! IEEE-754 `f32` values in row-major order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"Y8MF";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURES_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub visual: Tensor,
    pub audio: Tensor,
    pub labels: BTreeSet<usize>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.visual.rows()
    }
}

/// A record cut or padded to exactly `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedVideo {
    pub id: String,
    pub visual: Tensor,
    pub audio: Tensor,
    pub valid_len: usize,
    pub labels: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_classes: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Length of each planted motif window.
    pub motif_len: usize,
    pub min_motifs: usize,
    pub max_motifs: usize,
    /// Standard deviation of the per-frame background noise.
    pub noise: f64,
    /// Scale of the class template added inside a motif window.
    #[serde(default = "default_signal")]
    pub signal: f64,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_signal() -> f64 {
    1.0
}

fn default_prefix() -> String {
    "vid".to_string()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config("min_frames", "need 1 <= min_frames <= max_frames"));
        }
        if self.motif_len == 0 || self.motif_len > self.min_frames {
            return Err(Error::config(
                "motif_len",
                format!("motif length {} must be in 1..=min_frames ({})", self.motif_len, self.min_frames),
            ));
        }
        if self.min_motifs > self.max_motifs || self.max_motifs > self.num_classes {
            return Err(Error::config(
                "max_motifs",
                "need min_motifs <= max_motifs <= num_classes",
            ));
        }
        if self.visual_dim == 0 || self.audio_dim == 0 {
            return Err(Error::config("visual_dim", "feature dims must be >= 1"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.signal.is_finite()) {
            return Err(Error::config("noise", "noise and signal must be finite, noise >= 0"));
        }
        Ok(())
    }
}

/// Planted-motif multi-label corpus.
///
/// Every class owns a fixed visual and audio template drawn once from the
/// seed. A video is Gaussian noise; each of its labels is planted by adding
/// the class template over one random contiguous window of `motif_len` frames
/// in both modalities. Labels are exactly the planted classes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    let mut template_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
        // unit-norm direction times sqrt(d) keeps per-entry scale ~1
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n * (d as f64).sqrt()).collect()
    };
    let templates: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.num_classes)
        .map(|_| {
            let v = unit(&mut template_rng, cfg.visual_dim);
            let a = unit(&mut template_rng, cfg.audio_dim);
            (v, a)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let classes: Vec<usize> = (0..cfg.num_classes).collect();
    let width = cfg.num_videos.max(1).to_string().len();
    let mut out = Vec::with_capacity(cfg.num_videos);
    for n in 0..cfg.num_videos {
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
        let k = rng.random_range(cfg.min_motifs..=cfg.max_motifs);
        let planted: Vec<usize> = classes.choose_multiple(&mut rng, k).copied().collect();
        let mut visual = vec![0.0; frames * cfg.visual_dim];
        let mut audio = vec![0.0; frames * cfg.audio_dim];
        for v in visual.iter_mut().chain(audio.iter_mut()) {
            *v = rng.sample::<f64, _>(StandardNormal) * cfg.noise;
        }
        for &c in &planted {
            let start = rng.random_range(0..=frames - cfg.motif_len);
            let (tv, ta) = &templates[c];
            for f in start..start + cfg.motif_len {
                for (x, t) in visual[f * cfg.visual_dim..(f + 1) * cfg.visual_dim].iter_mut().zip(tv) {
                    *x += cfg.signal * t;
                }
                for (x, t) in audio[f * cfg.audio_dim..(f + 1) * cfg.audio_dim].iter_mut().zip(ta) {
                    *x += cfg.signal * t;
                }
            }
        }
        for v in visual.iter_mut().chain(audio.iter_mut()) {
            *v = *v as f32 as f64;
        }
        out.push(VideoRecord {
            id: format!("{}{:0width$}", cfg.id_prefix, n),
            visual: Tensor::new(vec![frames, cfg.visual_dim], visual)?,
            audio: Tensor::new(vec![frames, cfg.audio_dim], audio)?,
            labels: planted.into_iter().collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub num_frames: usize,
    pub labels: Vec<usize>,
    pub visual_file: String,
    pub audio_file: String,
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::format(path, format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = FEATURE_HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, "empty feature matrix"));
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![rows, cols], data).map_err(|_| Error::format(path, "non-finite feature value"))
}

fn file_stem(id: &str) -> Result<&str> {
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::Record {
            id: id.to_string(),
            reason: "id is not usable as a file name".into(),
        });
    }
    Ok(id)
}

pub fn write_records(records: &[VideoRecord], dir: &Path) -> Result<()> {
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for r in records {
        let stem = file_stem(&r.id)?;
        if r.audio.rows() != r.visual.rows() {
            return Err(Error::Record {
                id: r.id.clone(),
                reason: "visual and audio frame counts differ".into(),
            });
        }
        let entry = ManifestEntry {
            id: r.id.clone(),
            num_frames: r.num_frames(),
            labels: r.labels.iter().copied().collect(),
            visual_file: format!("{FEATURES_DIR}/{stem}.visual.f32"),
            audio_file: format!("{FEATURES_DIR}/{stem}.audio.f32"),
        };
        fs::write(dir.join(&entry.visual_file), encode_features(&r.visual))?;
        fs::write(dir.join(&entry.audio_file), encode_features(&r.audio))?;
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

/// Reads every record listed in `dir/manifest.jsonl`. Fails on the first bad
/// record without returning a partial dataset.
pub fn read_records(dir: &Path) -> Result<Vec<VideoRecord>> {
    let entries = read_manifest(dir)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let load = |rel: &str| -> Result<(PathBuf, Tensor)> {
            let p = dir.join(rel);
            let bytes = fs::read(&p).map_err(|err| Error::Record {
                id: e.id.clone(),
                reason: format!("{}: {err}", p.display()),
            })?;
            let t = decode_features(&bytes, &p).map_err(|err| Error::Record {
                id: e.id.clone(),
                reason: err.to_string(),
            })?;
            Ok((p, t))
        };
        let (vp, visual) = load(&e.visual_file)?;
        let (ap, audio) = load(&e.audio_file)?;
        for (p, t) in [(&vp, &visual), (&ap, &audio)] {
            if t.rows() != e.num_frames {
                return Err(Error::Record {
                    id: e.id.clone(),
                    reason: format!(
                        "manifest says {} frames but {} holds {}",
                        e.num_frames,
                        p.display(),
                        t.rows()
                    ),
                });
            }
        }
        out.push(VideoRecord {
            id: e.id,
            visual,
            audio,
            labels: e.labels.into_iter().collect(),
        });
    }
    Ok(out)
}

fn fit_rows(t: &Tensor, frames: usize) -> Tensor {
    let d = t.cols();
    let keep = t.rows().min(frames);
    let mut out = Tensor::zeros(&[frames, d]);
    out.data_mut()[..keep * d].copy_from_slice(&t.data()[..keep * d]);
    out
}

/// Keeps the first `frames` frames, or zero-pads up to `frames`.
pub fn pad_record(r: &VideoRecord, frames: usize) -> PaddedVideo {
    PaddedVideo {
        id: r.id.clone(),
        visual: fit_rows(&r.visual, frames),
        audio: fit_rows(&r.audio, frames),
        valid_len: r.num_frames().min(frames),
        labels: r.labels.clone(),
    }
}

/// Pads every record to `frames` and groups them into batches after a seeded
/// shuffle. The final batch may be smaller.
pub fn batch_and_pad(
    records: &[VideoRecord],
    frames: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<PaddedVideo>>> {
    if frames == 0 {
        return Err(Error::config("max_frames", "must be >= 1"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| idx.iter().map(|&i| pad_record(&records[i], frames)).collect())
        .collect())
}
