//! Diagnostics on trained encoders: attention profiles, inter-frame cosine
//! similarity, the input-output gradient matrix `G` and the locality
//! statistic `S_i` derived from it.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::encoder::{EncoderBlock, ModelConfig, Modality, Tower};
use crate::error::{Error, Result};
use crate::masks::{neighborhood, toeplitz_mask};
use crate::tensor::Tensor;

/// Attention received by each frame: column means of the maps, averaged over
/// maps (heads) and query rows.
pub fn attention_profile(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::shape("attention_profile", "no maps"))?;
    let t = first.rows();
    let mut out = vec![0.0; t];
    for m in maps {
        if m.shape() != [t, t] {
            return Err(Error::shape(
                "attention_profile",
                format!("map {:?}, expected [{t}, {t}]", m.shape()),
            ));
        }
        for i in 0..t {
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
    }
    let k = 1.0 / (maps.len() * t) as f64;
    Tensor::vector(out.into_iter().map(|v| v * k).collect())
}

/// Pairwise cosine similarity of the rows of `x`. Pairs involving a zero row
/// are 0.
pub fn cosine_similarity_matrix(x: &Tensor) -> Tensor {
    let t = x.rows();
    let norms: Vec<f64> = (0..t)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i..t {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

/// A map from frame features `T x D_in` to contextualized frames `T x D_out`
/// with reverse-mode input gradients.
pub trait FrameEncoder: Sync {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;

    /// `dL/dX` for each upstream gradient `dL/dY`, all at input `x`.
    fn input_vjps(&self, x: &Tensor, upstream: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// An encoder tower run with the first `valid_len` rows as real frames.
#[derive(Debug, Clone, Copy)]
pub struct TowerEncoder<'a> {
    pub tower: &'a Tower,
    pub valid_len: usize,
}

impl FrameEncoder for TowerEncoder<'_> {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.tower.forward(x, self.valid_len)?.0)
    }

    fn input_vjps(&self, x: &Tensor, upstream: &[Tensor]) -> Result<Vec<Tensor>> {
        let (_, caches) = self.tower.forward(x, self.valid_len)?;
        upstream
            .iter()
            .map(|dy| Ok(self.tower.backward(&caches, dy)?.0))
            .collect()
    }
}

impl FrameEncoder for EncoderBlock {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, x.rows())?.0)
    }

    fn input_vjps(&self, x: &Tensor, upstream: &[Tensor]) -> Result<Vec<Tensor>> {
        let (_, cache) = self.forward(x, x.rows())?;
        upstream
            .iter()
            .map(|dy| Ok(self.backward(&cache, dy)?.0))
            .collect()
    }
}

/// `G[i, j]`: Frobenius norm of the Jacobian block `dY[i] / dX[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix(pub Tensor);

impl GradientMatrix {
    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// The top-left `n x n` block.
    pub fn leading(&self, n: usize) -> Result<GradientMatrix> {
        if n == 0 || n > self.size() {
            return Err(Error::OutOfRange {
                index: n,
                len: self.size(),
            });
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|i| self.0.row(i)[..n].to_vec()).collect();
        Ok(GradientMatrix(Tensor::from_rows(&rows)?))
    }
}

/// Exact `G` from `T * D_out` backward passes, one per output coordinate.
pub fn gradient_matrix<E: FrameEncoder + ?Sized>(encoder: &E, x: &Tensor) -> Result<GradientMatrix> {
    let y = encoder.encode(x)?;
    let (t, d_out) = (y.rows(), y.cols());
    let rows = (0..t)
        .into_par_iter()
        .map(|i| {
            let upstream: Vec<Tensor> = (0..d_out)
                .map(|d| {
                    let mut e = Tensor::zeros(y.shape());
                    e.set(i, d, 1.0);
                    e
                })
                .collect();
            let dxs = encoder.input_vjps(x, &upstream)?;
            let mut sq = vec![0.0; x.rows()];
            for dx in &dxs {
                for (j, s) in sq.iter_mut().enumerate() {
                    *s += dx.row(j).iter().map(|v| v * v).sum::<f64>();
                }
            }
            Ok(sq.into_iter().map(f64::sqrt).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradientMatrix(Tensor::from_rows(&rows)?))
}

/// `S_i = in_i / (in_i + out_i)` where `in_i` and `out_i` are the mean of
/// `G[i, .]` over `N_i` and over its complement.
pub fn locality_statistic(g: &GradientMatrix, neighborhoods: &[BTreeSet<usize>]) -> Result<Tensor> {
    let t = g.size();
    if neighborhoods.len() != t {
        return Err(Error::shape(
            "locality_statistic",
            format!("{} neighborhoods for {t} frames", neighborhoods.len()),
        ));
    }
    let mut out = Vec::with_capacity(t);
    for (i, n) in neighborhoods.iter().enumerate() {
        if n.is_empty() || n.len() >= t || n.iter().any(|&j| j >= t) {
            return Err(Error::config(
                "neighborhood",
                format!("N_{i} must be a nonempty proper subset of 0..{t}"),
            ));
        }
        let row = g.0.row(i);
        let inside: f64 = n.iter().map(|&j| row[j]).sum::<f64>() / n.len() as f64;
        let outside: f64 = (0..t).filter(|j| !n.contains(j)).map(|j| row[j]).sum::<f64>() / (t - n.len()) as f64;
        if inside + outside == 0.0 {
            return Err(Error::Metric(format!("row {i} of G is zero")));
        }
        out.push(inside / (inside + outside));
    }
    Tensor::vector(out)
}

/// `N_i = { j : |i - j| <= window }` for every frame.
pub fn band_neighborhoods(size: usize, window: usize) -> Vec<BTreeSet<usize>> {
    let mask = toeplitz_mask(size, window);
    (0..size)
        .map(|i| neighborhood(&mask, i).expect("index within mask"))
        .collect()
}

/// Neighborhood radius: the tower's own local-mask window when it has one,
/// otherwise `ceil(T / 10)`.
pub fn default_window(config: &ModelConfig, modality: Modality) -> usize {
    let spec = match modality {
        Modality::Visual => &config.visual_variant,
        Modality::Audio => &config.audio_variant,
    };
    spec.masks
        .iter()
        .find_map(|m| m.window())
        .unwrap_or_else(|| config.max_frames.div_ceil(10))
}

/// Row-major matrix as CSV, one row per line, shortest round-trip decimal
/// formatting.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let line: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Grayscale P5 image of a matrix, linearly scaled so that the minimum maps
/// to 0 and the maximum to 255. A constant matrix maps to 0.
pub fn heatmap_pgm(t: &Tensor) -> (Vec<u8>, HeatmapScale) {
    let (rows, cols) = (t.rows(), t.cols());
    let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    (out, HeatmapScale { min, max, rows, cols })
}

/// Writes `path` (PGM) and `path.json` holding the value range.
pub fn write_heatmap(path: &Path, t: &Tensor) -> Result<()> {
    let (pgm, scale) = heatmap_pgm(t);
    fs::write(path, pgm)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let mut f = fs::File::create(sidecar)?;
    serde_json::to_writer_pretty(&mut f, &scale)?;
    writeln!(f)?;
    Ok(())
}
