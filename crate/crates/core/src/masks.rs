//! Local-attention neighborhoods: block-diagonal (BD), Toeplitz band (TP) and
//! dilated Toeplitz band (TD).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskFamily {
    BlockDiagonal,
    Toeplitz,
    ToeplitzDilated,
    /// Result of combining a family mask with a padding mask.
    Derived,
}

/// `T x T` keep/forbid pattern. `keep[i][j]` means query frame `i` may attend
/// to key frame `j`.
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    keep: Vec<bool>,
    family: MaskFamily,
    window: usize,
    dilation: usize,
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "AttentionMask {{ size: {}, family: {:?}, window: {}, dilation: {} }}",
            self.size, self.family, self.window, self.dilation
        )?;
        for i in 0..self.size {
            let row: String = (0..self.size)
                .map(|j| if self.keeps(i, j) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl AttentionMask {
    fn build(
        size: usize,
        family: MaskFamily,
        window: usize,
        dilation: usize,
        rule: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut keep = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                keep[i * size + j] = rule(i, j);
            }
        }
        AttentionMask {
            size,
            keep,
            family,
            window,
            dilation,
        }
    }

    /// Every entry kept.
    pub fn full(size: usize) -> Self {
        block_diagonal_mask(size, size.max(1)).expect("size >= 1")
    }

    #[cfg(test)]
    pub(crate) fn from_keep_unchecked(rows: Vec<Vec<bool>>) -> Self {
        let size = rows.len();
        AttentionMask {
            size,
            keep: rows.concat(),
            family: MaskFamily::Derived,
            window: 0,
            dilation: 1,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn family(&self) -> MaskFamily {
        self.family
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    #[inline]
    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.size + j]
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Restricts the mask to a sequence whose first `valid_len` frames are real.
    ///
    /// Valid query rows lose every padded key column. Padded query rows attend
    /// only to themselves, which keeps each row non-empty and stops padded
    /// frames from ever mixing into valid ones.
    pub fn with_padding(&self, valid_len: usize) -> AttentionMask {
        if valid_len >= self.size {
            return self.clone();
        }
        let n = valid_len;
        AttentionMask::build(self.size, MaskFamily::Derived, self.window, self.dilation, |i, j| {
            if i < n {
                j < n && self.keeps(i, j)
            } else {
                i == j
            }
        })
    }

    /// Mask that only hides padded frames.
    pub fn padding(size: usize, valid_len: usize) -> AttentionMask {
        AttentionMask::full(size).with_padding(valid_len)
    }

    /// Binary PGM (P5): 255 for kept entries, 0 for forbidden ones.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend(self.keep.iter().map(|&k| if k { 255u8 } else { 0u8 }));
        out
    }
}

/// Non-overlapping segments of `window` frames; the last segment holds the
/// remaining `T mod W` frames when `W` does not divide `T`.
pub fn block_diagonal_mask(size: usize, window: usize) -> Result<AttentionMask> {
    if window < 1 {
        return Err(Error::InvalidMask("block-diagonal window must be >= 1".into()));
    }
    if window > size {
        return Err(Error::InvalidMask(format!(
            "block-diagonal window {window} exceeds sequence length {size}"
        )));
    }
    Ok(AttentionMask::build(size, MaskFamily::BlockDiagonal, window, 1, |i, j| {
        i / window == j / window
    }))
}

/// Band of half-width `window`: frame `i` sees `|i - j| <= W`.
pub fn toeplitz_mask(size: usize, window: usize) -> AttentionMask {
    AttentionMask::build(size, MaskFamily::Toeplitz, window, 1, |i, j| {
        i.abs_diff(j) <= window
    })
}

/// Band of half-width `window` that keeps only every `dilation`-th frame,
/// counted from the reference frame itself.
pub fn toeplitz_dilated_mask(size: usize, window: usize, dilation: usize) -> Result<AttentionMask> {
    if dilation < 1 {
        return Err(Error::InvalidMask("dilation must be >= 1".into()));
    }
    Ok(AttentionMask::build(
        size,
        MaskFamily::ToeplitzDilated,
        window,
        dilation,
        |i, j| {
            let d = i.abs_diff(j);
            d <= window && d % dilation == 0
        },
    ))
}

/// `N_i`: the key frames that query frame `i` may attend to.
pub fn neighborhood(mask: &AttentionMask, i: usize) -> Result<BTreeSet<usize>> {
    if i >= mask.size {
        return Err(Error::OutOfRange {
            index: i,
            len: mask.size,
        });
    }
    Ok((0..mask.size).filter(|&j| mask.keeps(i, j)).collect())
}

/// Size-independent description of a mask, written `bd:W`, `tp:W`, `td:W:L`
/// or `full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSpec {
    Full,
    BlockDiagonal { window: usize },
    Toeplitz { window: usize },
    ToeplitzDilated { window: usize, dilation: usize },
}

impl MaskSpec {
    pub fn build(&self, size: usize) -> Result<AttentionMask> {
        match *self {
            MaskSpec::Full => Ok(AttentionMask::full(size)),
            MaskSpec::BlockDiagonal { window } => block_diagonal_mask(size, window),
            MaskSpec::Toeplitz { window } => Ok(toeplitz_mask(size, window)),
            MaskSpec::ToeplitzDilated { window, dilation } => {
                toeplitz_dilated_mask(size, window, dilation)
            }
        }
    }

    /// Half-width of the neighborhood a frame sees, used as the default `N_i`
    /// radius for the locality statistic.
    pub fn window(&self) -> Option<usize> {
        match *self {
            MaskSpec::Full => None,
            MaskSpec::BlockDiagonal { window }
            | MaskSpec::Toeplitz { window }
            | MaskSpec::ToeplitzDilated { window, .. } => Some(window),
        }
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::Full => write!(f, "full"),
            MaskSpec::BlockDiagonal { window } => write!(f, "bd:{window}"),
            MaskSpec::Toeplitz { window } => write!(f, "tp:{window}"),
            MaskSpec::ToeplitzDilated { window, dilation } => write!(f, "td:{window}:{dilation}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidMask(format!("cannot parse {s:?}; expected bd:W, tp:W, td:W:L or full"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["full"] => Ok(MaskSpec::Full),
            ["bd", w] => {
                let window = num(w)?;
                if window < 1 {
                    return Err(Error::InvalidMask("bd window must be >= 1".into()));
                }
                Ok(MaskSpec::BlockDiagonal { window })
            }
            ["tp", w] => Ok(MaskSpec::Toeplitz { window: num(w)? }),
            ["td", w, l] => {
                let dilation = num(l)?;
                if dilation < 1 {
                    return Err(Error::InvalidMask("td dilation must be >= 1".into()));
                }
                Ok(MaskSpec::ToeplitzDilated {
                    window: num(w)?,
                    dilation,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for MaskSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
