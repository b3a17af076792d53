//! Seeded synthetic datasets and their on-disk text format.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Dataset;
use crate::transforms::ImageShape;

pub const GLYPH_SIDE: usize = 16;

/// Gaussian clusters with unit per-coordinate spread. Class `c` is centered
/// at `margin / sqrt(2) * e_c`, so any two centers are `margin` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    pub margin: f64,
    pub seed: u64,
}

/// 16x16 single-channel glyphs: a per-class stroke pattern plus seeded
/// pixel noise, clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphSpec {
    pub classes: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    Blobs(BlobSpec),
    Glyphs(GlyphSpec),
}

impl DataSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DataSpec::Blobs(s) => gen_blobs(s),
            DataSpec::Glyphs(s) => gen_glyphs(s),
        }
    }

    pub fn samples(&self) -> usize {
        match self {
            DataSpec::Blobs(s) => s.samples,
            DataSpec::Glyphs(s) => s.samples,
        }
    }

    pub fn with_samples(&self, samples: usize) -> Self {
        let mut out = self.clone();
        match &mut out {
            DataSpec::Blobs(s) => s.samples = samples,
            DataSpec::Glyphs(s) => s.samples = samples,
        }
        out
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DataSpec::Blobs(s) => s.seed = seed,
            DataSpec::Glyphs(s) => s.seed = seed,
        }
        out
    }
}

fn check_counts(classes: usize, samples: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least two classes"));
    }
    if samples < classes {
        return Err(Error::invalid("samples", "need at least one sample per class"));
    }
    Ok(())
}

/// Labels cycle through the classes in order.
pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    check_counts(spec.classes, spec.samples)?;
    if spec.dim < spec.classes {
        return Err(Error::invalid("dim", "must be at least the number of classes"));
    }
    if !(spec.margin >= 0.0 && spec.margin.is_finite()) {
        return Err(Error::invalid("margin", "must be nonnegative and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offset = spec.margin / std::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        let mut x: Vec<f64> = (0..spec.dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        x[c] += offset;
        inputs.push(x);
        labels.push(c);
    }
    Dataset::new(spec.dim, spec.classes, inputs, labels)
}

/// Stroke pattern for class `c`; returns 1.0 on the glyph, 0.0 off it.
fn glyph_pattern(c: usize, r: usize, col: usize) -> f64 {
    let n = GLYPH_SIDE as i64;
    let (r, col) = (r as i64, col as i64);
    let on = match c % 10 {
        0 => (6..10).contains(&r) && (2..14).contains(&col),
        1 => (6..10).contains(&col) && (2..14).contains(&r),
        2 => (r - col).abs() <= 1 && (1..15).contains(&r),
        3 => (r + col - (n - 1)).abs() <= 1 && (1..15).contains(&r),
        4 => {
            let border = r == 2 || r == 3 || r == 12 || r == 13 || col == 2 || col == 3 || col == 12 || col == 13;
            border && (2..14).contains(&r) && (2..14).contains(&col)
        }
        5 => {
            let dr = 2 * r - (n - 1);
            let dc = 2 * col - (n - 1);
            dr * dr + dc * dc <= 100
        }
        6 => ((r / 4) + (col / 4)) % 2 == 0,
        7 => (2..6).contains(&r) || (10..14).contains(&r),
        8 => (2..6).contains(&col) || (10..14).contains(&col),
        _ => ((6..10).contains(&r) && (2..14).contains(&col)) || ((6..10).contains(&col) && (2..14).contains(&r)),
    };
    if on {
        1.0
    } else {
        0.0
    }
}

const GLYPH_ON: f64 = 0.85;
const GLYPH_OFF: f64 = 0.1;

pub fn glyph_shape() -> ImageShape {
    ImageShape::square(GLYPH_SIDE)
}

pub fn gen_glyphs(spec: &GlyphSpec) -> Result<Dataset> {
    check_counts(spec.classes, spec.samples)?;
    if spec.classes > 10 {
        return Err(Error::invalid("classes", "glyph generator supports at most 10 classes"));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise", "must be nonnegative and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("positive spread");
    let dim = GLYPH_SIDE * GLYPH_SIDE;
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        let x = (0..dim)
            .map(|p| {
                let base = GLYPH_OFF + (GLYPH_ON - GLYPH_OFF) * glyph_pattern(c, p / GLYPH_SIDE, p % GLYPH_SIDE);
                let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                (base + noise).clamp(0.0, 1.0)
            })
            .collect();
        inputs.push(x);
        labels.push(c);
    }
    Dataset::new(dim, spec.classes, inputs, labels)
}

const DATA_MAGIC: &str = "# tamoo-dataset v1";

fn digest_hex(body: &str) -> String {
    let digest = Sha256::digest(body.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Text encoding: a header, one `label,x1,...,xd` line per sample with
/// shortest round-trip floats, and a checksum trailer over everything
/// before it.
pub fn encode_dataset(data: &Dataset) -> String {
    let mut body = format!(
        "{DATA_MAGIC}\n# dim={} classes={} samples={}\n",
        data.dim,
        data.classes,
        data.len()
    );
    for (x, y) in data.inputs.iter().zip(&data.labels) {
        write!(body, "{y}").expect("write to string");
        for v in x {
            write!(body, ",{v}").expect("write to string");
        }
        body.push('\n');
    }
    let sum = digest_hex(&body);
    body.push_str(&format!("# sha256={sum}\n"));
    body
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(data)).map_err(|e| Error::io(path, e))
}

fn parse_header_field(line: &str, key: &str, path: &Path, lineno: usize) -> Result<usize> {
    line.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            line: lineno,
            reason: format!("missing `{key}` in header"),
        })
}

pub fn decode_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.into(),
        line,
        reason,
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first() != Some(&DATA_MAGIC) {
        return Err(parse_err(1, "not a dataset file".into()));
    }
    let header = lines.get(1).ok_or_else(|| parse_err(2, "missing header".into()))?;
    let dim = parse_header_field(header, "dim", path, 2)?;
    let classes = parse_header_field(header, "classes", path, 2)?;
    let samples = parse_header_field(header, "samples", path, 2)?;
    let trailer_idx = 2 + samples;
    let trailer = lines
        .get(trailer_idx)
        .ok_or_else(|| parse_err(lines.len() + 1, "file truncated".into()))?;
    let stored_hex = trailer
        .strip_prefix("# sha256=")
        .ok_or_else(|| parse_err(trailer_idx + 1, "missing checksum trailer".into()))?;
    let body_len: usize = lines[..trailer_idx].iter().map(|l| l.len() + 1).sum();
    let computed_hex = digest_hex(&text[..body_len]);
    if stored_hex != computed_hex {
        return Err(Error::Checksum {
            path: path.into(),
            stored: u64::from_str_radix(stored_hex, 16).unwrap_or(0),
            computed: u64::from_str_radix(&computed_hex, 16).unwrap_or(0),
        });
    }
    let mut inputs = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for (k, line) in lines[2..trailer_idx].iter().enumerate() {
        let lineno = k + 3;
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err(lineno, "bad label".into()))?;
        let x = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        if x.len() != dim {
            return Err(parse_err(lineno, format!("expected {dim} features, found {}", x.len())));
        }
        inputs.push(x);
        labels.push(label);
    }
    Dataset::new(dim, classes, inputs, labels)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&text, path)
}
