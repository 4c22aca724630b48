//! Sparsity and importance of latent codes, and the mask that keeps only
//! informative dimensions.

use std::fs;
use std::path::Path;

use crate::diffnet::Mat;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.15;

/// Mean Hoyer sparsity of the rows of `encodings`.
///
/// An all-zero row has no defined L1/L2 ratio; it contributes 0 and is
/// counted in the second return value.
pub fn hoyer_sparsity(encodings: &Mat) -> Result<(f64, usize)> {
    let (n, d) = encodings.dim();
    if n == 0 {
        return Err(Error::Domain("no encodings".into()));
    }
    if d < 2 {
        return Err(Error::Domain(format!("sparsity needs at least 2 dimensions, got {d}")));
    }
    let sd = (d as f64).sqrt();
    let mut zero_rows = 0;
    let mut total = 0.0;
    for row in encodings.rows() {
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        let l2 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if l2 == 0.0 {
            zero_rows += 1;
            continue;
        }
        total += ((sd - l1 / l2) / (sd - 1.0)).clamp(0.0, 1.0);
    }
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero latent codes counted as sparsity 0");
    }
    Ok((total / n as f64, zero_rows))
}

/// Unbiased per-dimension standard deviation of the rows of `encodings`.
pub fn dim_importance(encodings: &Mat) -> Result<Vec<f64>> {
    let n = encodings.nrows();
    if n < 2 {
        return Err(Error::Domain(format!("importance needs at least 2 samples, got {n}")));
    }
    Ok(encodings
        .columns()
        .into_iter()
        .map(|col| {
            let mean = col.sum() / n as f64;
            (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub keep: Vec<bool>,
    pub threshold_used: f64,
    pub importance: Vec<f64>,
    /// Set when nothing exceeded the threshold and the most important
    /// dimension was kept instead.
    pub fallback: bool,
}

impl LatentMask {
    pub fn all(dim: usize) -> Self {
        Self { keep: vec![true; dim], threshold_used: 0.0, importance: vec![f64::INFINITY; dim], fallback: false }
    }

    pub fn latent_dim(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn to_text(&self) -> String {
        let join = |it: Vec<String>| it.join(" ");
        format!(
            "latent_dim {}\nthreshold {}\nfallback {}\nimportance {}\nkeep {}\n",
            self.keep.len(),
            self.threshold_used,
            self.fallback,
            join(self.importance.iter().map(|v| v.to_string()).collect()),
            join(self.keep.iter().map(|k| if *k { "1" } else { "0" }.to_string()).collect()),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("mask file: {m}"));
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing '{key}'")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(bad(format!("expected '{key}', found '{line}'")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number '{s}'")));
        let dim: usize = field("latent_dim")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad latent_dim".into()))?;
        let threshold_used = num(field("threshold")?.first().map(String::as_str).unwrap_or(""))?;
        let fallback = match field("fallback")?.first().map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            other => return Err(bad(format!("bad fallback flag {other:?}"))),
        };
        let importance = field("importance")?.iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let keep = field("keep")?
            .iter()
            .map(|s| match s.as_str() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(bad(format!("bad keep flag '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if importance.len() != dim || keep.len() != dim {
            return Err(bad(format!("expected {dim} entries per row")));
        }
        if !keep.contains(&true) {
            return Err(bad("no kept dimension".into()));
        }
        Ok(Self { keep, threshold_used, importance, fallback })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_text(&text)
    }
}

/// Keeps dimensions whose importance exceeds `threshold`, or the single most
/// important one when none does.
pub fn build_mask(importance: &[f64], threshold: f64) -> Result<LatentMask> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be nonnegative, got {threshold}")));
    }
    if importance.is_empty() {
        return Err(Error::Domain("empty importance vector".into()));
    }
    let mut keep: Vec<bool> = importance.iter().map(|&v| v > threshold).collect();
    let fallback = !keep.contains(&true);
    if fallback {
        let best = (0..importance.len()).fold(0, |b, i| if importance[i] > importance[b] { i } else { b });
        keep[best] = true;
        log::warn!("no latent dimension exceeds threshold {threshold}; keeping dimension {best}");
    }
    Ok(LatentMask { keep, threshold_used: threshold, importance: importance.to_vec(), fallback })
}

pub fn apply_mask(z: &[f64], mask: &LatentMask) -> Result<Vec<f64>> {
    if z.len() != mask.latent_dim() {
        return Err(Error::Shape(format!("latent length {}, mask covers {}", z.len(), mask.latent_dim())));
    }
    Ok(z.iter().zip(&mask.keep).filter(|(_, k)| **k).map(|(v, _)| *v).collect())
}

/// Row-wise [`apply_mask`].
pub fn apply_mask_rows(z: &Mat, mask: &LatentMask) -> Result<Mat> {
    if z.ncols() != mask.latent_dim() {
        return Err(Error::Shape(format!("latent width {}, mask covers {}", z.ncols(), mask.latent_dim())));
    }
    Ok(z.select(ndarray::Axis(1), &mask.kept_indices()))
}

/// Inverse of [`apply_mask_rows`] with zeros in the dropped dimensions.
pub fn unmask_rows(s: &Mat, mask: &LatentMask) -> Result<Mat> {
    let idx = mask.kept_indices();
    if s.ncols() != idx.len() {
        return Err(Error::Shape(format!("state width {}, mask keeps {}", s.ncols(), idx.len())));
    }
    let mut z = Mat::zeros((s.nrows(), mask.latent_dim()));
    for (j, &d) in idx.iter().enumerate() {
        z.column_mut(d).assign(&s.column(j));
    }
    Ok(z)
}
