//! Per-pixel semantic representations: hard label images, class-logit images,
//! multi-scale logit pyramids, and interpolated log-probability lookups.
//!
//! Logits are unnormalized log-probabilities over a dense class list; all
//! probabilistic queries go through a numerically stable log-softmax. Images
//! are row-major; a logit image stores `height x width x num_classes` with the
//! class axis fastest.

use nalgebra::Vector2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SemanticsError {
    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: u8, num_classes: u8 },
    #[error("bad image dimensions {width}x{height}: {detail}")]
    DimensionError { width: u32, height: u32, detail: &'static str },
    #[error("sample ({u:.3}, {v:.3}) outside the interpolation-safe interior")]
    OutOfBounds { u: f64, v: f64 },
    #[error("predicted probability {0} must lie in (1/num_classes, 1)")]
    InvalidProbability(f64),
    #[error("invalid class table: {0}")]
    InvalidClassTable(&'static str),
}

/// Errors for the on-disk frame formats (labels as PGM, logits as SLOG).
#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed {format} file: {detail}")]
    Format { format: &'static str, detail: String },
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

fn format_err(format: &'static str, detail: impl Into<String>) -> FrameIoError {
    FrameIoError::Format { format, detail: detail.into() }
}

/// Dense class list; ids are indices into `names`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClassTable {
    names: Vec<String>,
    background_id: u8,
}

impl ClassTable {
    pub fn new(names: Vec<String>, background_id: u8) -> Result<Self, SemanticsError> {
        if names.len() < 2 || names.len() > 255 {
            return Err(SemanticsError::InvalidClassTable("need between 2 and 255 classes"));
        }
        if background_id as usize >= names.len() {
            return Err(SemanticsError::InvalidClassTable("background id out of range"));
        }
        Ok(ClassTable { names, background_id })
    }

    pub fn num_classes(&self) -> u8 {
        self.names.len() as u8
    }

    pub fn background_id(&self) -> u8 {
        self.background_id
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(|s| s.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }
}

/// Hard per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: u32, height: u32, labels: Vec<u8>) -> Result<Self, SemanticsError> {
        if labels.len() != (width as usize) * (height as usize) {
            return Err(SemanticsError::DimensionError {
                width,
                height,
                detail: "label buffer length does not match dimensions",
            });
        }
        Ok(LabelImage { width, height, labels })
    }

    pub fn filled(width: u32, height: u32, label: u8) -> Self {
        LabelImage { width, height, labels: vec![label; (width * height) as usize] }
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: u8) {
        self.labels[(y * self.width + x) as usize] = label;
    }

    /// Ensures every label is a valid id for `num_classes` classes.
    pub fn validate_labels(&self, num_classes: u8) -> Result<(), SemanticsError> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(&label) => Err(SemanticsError::InvalidLabel { label, num_classes }),
            None => Ok(()),
        }
    }

    /// Half-resolution copy keeping the top-left pixel of every 2x2 cell.
    pub fn downsample2(&self) -> Result<LabelImage, SemanticsError> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(SemanticsError::DimensionError {
                width: self.width,
                height: self.height,
                detail: "downsampling requires even dimensions",
            });
        }
        let (w, h) = (self.width / 2, self.height / 2);
        let mut labels = Vec::with_capacity((w * h) as usize);
        for y in 0..h {
            for x in 0..w {
                labels.push(self.at(2 * x, 2 * y));
            }
        }
        Ok(LabelImage { width: w, height: h, labels })
    }
}

/// Per-pixel class logits, row-major with the class axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsImage {
    pub width: u32,
    pub height: u32,
    pub num_classes: u8,
    data: Vec<f64>,
}

impl LogitsImage {
    pub fn new(width: u32, height: u32, num_classes: u8, data: Vec<f64>) -> Result<Self, SemanticsError> {
        if num_classes < 2 {
            return Err(SemanticsError::InvalidClassTable("need at least 2 classes"));
        }
        if data.len() != (width as usize) * (height as usize) * (num_classes as usize) {
            return Err(SemanticsError::DimensionError {
                width,
                height,
                detail: "logit buffer length does not match dimensions",
            });
        }
        Ok(LogitsImage { width, height, num_classes, data })
    }

    #[inline]
    fn base(&self, x: u32, y: u32) -> usize {
        ((y * self.width + x) as usize) * self.num_classes as usize
    }

    #[inline]
    pub fn at(&self, x: u32, y: u32, class_id: u8) -> f64 {
        self.data[self.base(x, y) + class_id as usize]
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[f64] {
        let b = self.base(x, y);
        &self.data[b..b + self.num_classes as usize]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Class probabilities at one pixel (stable softmax; sums to one).
    pub fn softmax_at(&self, x: u32, y: u32) -> Vec<f64> {
        let logits = self.pixel(x, y);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        probs
    }

    /// Hard per-pixel argmax labels (first class wins ties).
    pub fn argmax_labels(&self) -> LabelImage {
        let mut labels = Vec::with_capacity((self.width * self.height) as usize);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(x, y);
                let mut best = 0usize;
                for (c, &l) in px.iter().enumerate() {
                    if l > px[best] {
                        best = c;
                    }
                }
                labels.push(best as u8);
            }
        }
        LabelImage { width: self.width, height: self.height, labels }
    }

    /// Half-resolution image whose logits are the arithmetic mean of each
    /// 2x2 block, per class. Corners are summed top-left, top-right,
    /// bottom-left, bottom-right, then multiplied by 1/4; tests may rely on
    /// this exact evaluation order.
    pub fn downscale(&self) -> Result<LogitsImage, SemanticsError> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(SemanticsError::DimensionError {
                width: self.width,
                height: self.height,
                detail: "downscaling requires even dimensions",
            });
        }
        let (w, h) = (self.width / 2, self.height / 2);
        let n = self.num_classes as usize;
        let mut data = vec![0.0; (w as usize) * (h as usize) * n];
        for y in 0..h {
            for x in 0..w {
                let b00 = self.base(2 * x, 2 * y);
                let b10 = self.base(2 * x + 1, 2 * y);
                let b01 = self.base(2 * x, 2 * y + 1);
                let b11 = self.base(2 * x + 1, 2 * y + 1);
                let out = ((y * w + x) as usize) * n;
                for c in 0..n {
                    data[out + c] =
                        (self.data[b00 + c] + self.data[b10 + c] + self.data[b01 + c] + self.data[b11 + c]) * 0.25;
                }
            }
        }
        Ok(LogitsImage { width: w, height: h, num_classes: self.num_classes, data })
    }

    /// Bilinearly interpolated log-probability of `class_id` at continuous
    /// pixel coordinates, with its analytic gradient wrt `(u, v)`.
    ///
    /// Logits are interpolated first and log-softmax is applied to the
    /// interpolated values. The sample must keep one pixel of margin from the
    /// image border.
    pub fn sample_logprob(&self, class_id: u8, uv: &Vector2<f64>) -> Result<(f64, Vector2<f64>), SemanticsError> {
        if class_id >= self.num_classes {
            return Err(SemanticsError::InvalidLabel { label: class_id, num_classes: self.num_classes });
        }
        let (u, v) = (uv.x, uv.y);
        let (max_u, max_v) = ((self.width - 2) as f64, (self.height - 2) as f64);
        if !(u >= 1.0 && v >= 1.0 && u <= max_u && v <= max_v) {
            return Err(SemanticsError::OutOfBounds { u, v });
        }
        let i = u.floor() as u32;
        let j = v.floor() as u32;
        let a = u - i as f64;
        let b = v - j as f64;
        let n = self.num_classes as usize;
        let p00 = &self.data[self.base(i, j)..];
        let p10 = &self.data[self.base(i + 1, j)..];
        let p01 = &self.data[self.base(i, j + 1)..];
        let p11 = &self.data[self.base(i + 1, j + 1)..];

        // Blend logits and their in-cell slopes for every class in one pass.
        let mut blended = Vec::with_capacity(n);
        let mut max_logit = f64::NEG_INFINITY;
        for c in 0..n {
            let (l00, l10, l01, l11) = (p00[c], p10[c], p01[c], p11[c]);
            let top = l00 + a * (l10 - l00);
            let bottom = l01 + a * (l11 - l01);
            let val = top + b * (bottom - top);
            let du = (1.0 - b) * (l10 - l00) + b * (l11 - l01);
            let dv = bottom - top;
            max_logit = max_logit.max(val);
            blended.push((val, du, dv));
        }

        let mut sum = 0.0;
        let mut grad_u = 0.0;
        let mut grad_v = 0.0;
        for &(val, du, dv) in &blended {
            let e = (val - max_logit).exp();
            sum += e;
            grad_u += e * du;
            grad_v += e * dv;
        }
        let (val_c, du_c, dv_c) = blended[class_id as usize];
        let logprob = val_c - max_logit - sum.ln();
        let grad = Vector2::new(du_c - grad_u / sum, dv_c - grad_v / sum);
        Ok((logprob, grad))
    }
}

/// Converts hard labels into logits that softmax back to `p_pred` for the
/// labeled class and `(1 - p_pred) / (n - 1)` for every other class.
pub fn labels_to_logits(labels: &LabelImage, num_classes: u8, p_pred: f64) -> Result<LogitsImage, SemanticsError> {
    labels.validate_labels(num_classes)?;
    let n = num_classes as usize;
    if !(p_pred > 1.0 / n as f64 && p_pred < 1.0) {
        return Err(SemanticsError::InvalidProbability(p_pred));
    }
    let logit_hit = p_pred.ln();
    let logit_miss = ((1.0 - p_pred) / (n as f64 - 1.0)).ln();
    let mut data = vec![logit_miss; labels.labels.len() * n];
    for (px, &label) in labels.labels.iter().enumerate() {
        data[px * n + label as usize] = logit_hit;
    }
    Ok(LogitsImage { width: labels.width, height: labels.height, num_classes, data })
}

/// Mean-downscaled logit pyramid; level 0 is the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsPyramid {
    levels: Vec<LogitsImage>,
}

impl LogitsPyramid {
    /// Builds `levels` levels by repeated 2x2 mean downscaling. The base
    /// dimensions must be divisible by `2^(levels - 1)`.
    pub fn build(base: LogitsImage, levels: usize) -> Result<Self, SemanticsError> {
        assert!(levels >= 1, "a pyramid needs at least one level");
        let div = 1u32 << (levels - 1);
        if base.width % div != 0 || base.height % div != 0 {
            return Err(SemanticsError::DimensionError {
                width: base.width,
                height: base.height,
                detail: "dimensions must be divisible by 2^(levels-1)",
            });
        }
        let mut all = Vec::with_capacity(levels);
        all.push(base);
        for _ in 1..levels {
            let next = all.last().unwrap().downscale()?;
            all.push(next);
        }
        Ok(LogitsPyramid { levels: all })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> &LogitsImage {
        &self.levels[level]
    }

    /// Spatial offset, in level-`level` pixel units, between a stored mean
    /// logit and the content it represents.
    ///
    /// Level coordinates map to full resolution as `u0 = 2^level * u`
    /// (intrinsics are halved as fx/2, cx/2), so index `u` names the
    /// top-left corner of its 2^level-wide block while the block mean's
    /// centroid sits at `u0 + (2^level - 1)/2`. Sampling the stored array at
    /// `u - content_offset(level)` therefore reads the field at the
    /// geometric position `u`; on a linear field the recovery is exact.
    pub fn content_offset(level: usize) -> f64 {
        0.5 * (1.0 - 0.5f64.powi(level as i32))
    }
}

// --- on-disk formats ------------------------------------------------------

const SLOG_MAGIC: &[u8; 4] = b"SLOG";

/// Writes a logit image as SLOG: magic `SLOG`, little-endian u32 width,
/// height and class count, then row-major `h x w x n` float32 logits.
pub fn save_logits(path: &Path, img: &LogitsImage) -> Result<(), FrameIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SLOG_MAGIC)?;
    w.write_all(&img.width.to_le_bytes())?;
    w.write_all(&img.height.to_le_bytes())?;
    w.write_all(&(img.num_classes as u32).to_le_bytes())?;
    for &v in img.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_logits(path: &Path) -> Result<LogitsImage, FrameIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| format_err("SLOG", "file shorter than its 16-byte header"))?;
    if &head[0..4] != SLOG_MAGIC {
        return Err(format_err("SLOG", "bad magic bytes"));
    }
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap());
    let num_classes = u32::from_le_bytes(head[12..16].try_into().unwrap());
    if num_classes < 2 || num_classes > 255 {
        return Err(format_err("SLOG", format!("class count {num_classes} out of range")));
    }
    let count = width as usize * height as usize * num_classes as usize;
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|_| format_err("SLOG", "truncated logit payload"))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err("SLOG", "trailing bytes after logit payload"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(LogitsImage::new(width, height, num_classes as u8, data)?)
}

/// Writes labels as a binary 8-bit grayscale PGM (`P5`, maxval 255).
pub fn save_labels(path: &Path, img: &LabelImage) -> Result<(), FrameIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.labels)?;
    w.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<LabelImage, FrameIoError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, FrameIoError> {
        // Skip whitespace and `#` comment lines between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("PGM", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(format_err("PGM", "expected binary grayscale magic P5"));
    }
    let width: u32 = token(&bytes)?.parse().map_err(|_| format_err("PGM", "bad width"))?;
    let height: u32 = token(&bytes)?.parse().map_err(|_| format_err("PGM", "bad height"))?;
    let maxval: u32 = token(&bytes)?.parse().map_err(|_| format_err("PGM", "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err("PGM", format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let count = width as usize * height as usize;
    if bytes.len() < pos + count {
        return Err(format_err("PGM", "truncated pixel payload"));
    }
    let labels = bytes[pos..pos + count].to_vec();
    Ok(LabelImage::new(width, height, labels)?)
}
