//! Versioned binary container for classifier and generator states.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every state tensor as little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, Classifier, Generator, GeneratorArch};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GRCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelDescriptor {
    Classifier { arch: ArchSpec, head_widths: Vec<usize> },
    Generator { arch: GeneratorArch, covered_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelDescriptor,
    pub config_hash: String,
    pub digest: String,
    pub shapes: Vec<Vec<usize>>,
}

fn encode(header: &CheckpointHeader, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + head.len() + tensors.iter().map(|t| t.numel() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut pos = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let chunk = bytes.get(pos..pos + n * 8).ok_or_else(|| bad("truncated tensor data"))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(shape.clone(), data)?);
        pos += n * 8;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn fill(targets: Vec<&mut Tensor>, source: Vec<Tensor>) -> Result<()> {
    if targets.len() != source.len() {
        return Err(Error::Checkpoint(format!(
            "architecture has {} tensors, file has {}",
            targets.len(),
            source.len()
        )));
    }
    for (t, s) in targets.into_iter().zip(source) {
        if t.shape() != s.shape() {
            return Err(Error::Checkpoint(format!("tensor shape {:?} vs stored {:?}", t.shape(), s.shape())));
        }
        *t = s;
    }
    Ok(())
}

pub fn save_classifier(model: &Classifier, config_hash: &str, path: &Path) -> Result<CheckpointHeader> {
    let tensors = model.state_tensors();
    let header = CheckpointHeader {
        model: ModelDescriptor::Classifier { arch: model.arch().clone(), head_widths: model.head_widths() },
        config_hash: config_hash.to_string(),
        digest: model.digest(),
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    write_atomic(path, &encode(&header, &tensors)?)?;
    Ok(header)
}

pub fn save_generator(model: &Generator, config_hash: &str, path: &Path) -> Result<CheckpointHeader> {
    let tensors = model.state_tensors();
    let header = CheckpointHeader {
        model: ModelDescriptor::Generator { arch: model.arch().clone(), covered_classes: model.covered_classes() },
        config_hash: config_hash.to_string(),
        digest: model.digest(),
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
    };
    write_atomic(path, &encode(&header, &tensors)?)?;
    Ok(header)
}

/// Reads only the header (and validates the tensor payload length).
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&fs::read(path)?)?.0)
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, CheckpointHeader)> {
    let (header, tensors) = decode(&fs::read(path)?)?;
    let ModelDescriptor::Classifier { arch, head_widths } = &header.model else {
        return Err(Error::Checkpoint("file holds a generator, not a classifier".into()));
    };
    let mut model = Classifier::skeleton(arch.clone(), head_widths)?;
    fill(model.state_tensors_mut(), tensors)?;
    if model.digest() != header.digest {
        return Err(Error::Checkpoint("digest mismatch after load".into()));
    }
    Ok((model, header))
}

pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointHeader)> {
    let (header, tensors) = decode(&fs::read(path)?)?;
    let ModelDescriptor::Generator { arch, covered_classes } = &header.model else {
        return Err(Error::Checkpoint("file holds a classifier, not a generator".into()));
    };
    let mut model = Generator::skeleton(arch.clone(), *covered_classes)?;
    fill(model.state_tensors_mut(), tensors)?;
    if model.digest() != header.digest {
        return Err(Error::Checkpoint("digest mismatch after load".into()));
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let mut c = Classifier::new(ArchSpec::tiny(1, 8), 3, 5).unwrap();
        c.expand_head(2, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_classifier(&c, "abc", &path).unwrap();
        let (back, header) = load_classifier(&path).unwrap();
        assert_eq!(header.config_hash, "abc");
        assert_eq!(back, c);
        let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(back.logits(&x).unwrap(), c.logits(&x).unwrap());
        assert!(matches!(load_generator(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn generator_round_trip_and_corruption() {
        let g = Generator::new(GeneratorArch::desk(1, 8), 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        save_generator(&g, "h", &path).unwrap();
        assert_eq!(load_generator(&path).unwrap().0, g);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_generator(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(read_header(&path), Err(Error::Checkpoint(_))));
    }
}
