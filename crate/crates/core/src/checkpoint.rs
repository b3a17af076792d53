//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "TAMOOCK1"
//! u64 model count
//! per model:
//!   u64 input dim, u64 classes, u64 hidden count, u64 per hidden width
//!   u8 has-accuracy, f64 accuracy
//!   per layer: f64 weights (row-major, outputs x inputs), f64 bias
//! u64 checksum: first 8 bytes of SHA-256 over everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ArchSpec, Classifier, Layer};

const MAGIC: &[u8; 8] = b"TAMOOCK1";
const MAX_WIDTH: u64 = 1 << 24;

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn encode_models(models: &[Classifier]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((models.len() as u64).to_le_bytes());
    for model in models {
        let arch = model.arch();
        out.extend((arch.input_dim as u64).to_le_bytes());
        out.extend((arch.classes as u64).to_le_bytes());
        out.extend((arch.hidden.len() as u64).to_le_bytes());
        for &h in &arch.hidden {
            out.extend((h as u64).to_le_bytes());
        }
        out.push(model.train_accuracy.is_some() as u8);
        out.extend(model.train_accuracy.unwrap_or(0.0).to_le_bytes());
        for layer in model.layers() {
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend(v.to_le_bytes());
            }
        }
    }
    let sum = checksum(&out);
    out.extend(sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, reason: &str) -> Error {
        Error::Parse {
            path: self.path.into(),
            line: 0,
            reason: format!("{reason} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail("unexpected end of checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn size(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v == 0 || v > MAX_WIDTH {
            return Err(self.fail("implausible layer size"));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_models(bytes: &[u8], path: &Path) -> Result<Vec<Classifier>> {
    if bytes.len() < MAGIC.len() + 16 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            reason: "not a model checkpoint".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.into(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
        path,
    };
    let count = r.u64()?;
    let mut models = Vec::new();
    for _ in 0..count {
        let input_dim = r.size()?;
        let classes = r.size()?;
        let depth = r.u64()?;
        if depth > 64 {
            return Err(r.fail("implausible depth"));
        }
        let hidden = (0..depth).map(|_| r.size()).collect::<Result<Vec<_>>>()?;
        let has_acc = r.take(1)?[0];
        let acc = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let arch = ArchSpec {
            input_dim,
            hidden,
            classes,
        };
        let sizes = arch.sizes();
        let layers = sizes
            .windows(2)
            .map(|p| {
                Ok(Layer {
                    inputs: p[0],
                    outputs: p[1],
                    weights: r.f64s(p[0] * p[1])?,
                    bias: r.f64s(p[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Classifier::new(layers)?;
        model.train_accuracy = (has_acc != 0).then_some(acc);
        models.push(model);
    }
    if r.pos != body.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(models)
}

pub fn save_models(models: &[Classifier], path: &Path) -> Result<()> {
    std::fs::write(path, encode_models(models)).map_err(|e| Error::io(path, e))
}

pub fn load_models(path: &Path) -> Result<Vec<Classifier>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_models(&bytes, path)
}
