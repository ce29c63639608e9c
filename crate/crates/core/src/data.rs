//! Labelled image collections, on-disk dataset formats and the synthetic
//! desk-scale dataset.
//!
//! Two on-disk layouts are understood, both normalised to pixels in `[-1, 1]`:
//!
//! * image folder: `manifest.json` plus `<split>/<class name>/*.png`;
//! * binary: `index.json` plus `data.bin`, a sequence of records
//!   `u32 label | c·h·w f32 pixels`, little-endian, splits stored back to back.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[n, c, h, w]` with one global class id per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    images: Tensor,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Dimension(format!("images must be [n, c, h, w], got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn empty(image_shape: [usize; 3]) -> Self {
        Self {
            images: Tensor::zeros(&[0, image_shape[0], image_shape[1], image_shape[2]]),
            labels: Vec::new(),
        }
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Examples whose label is in `classes`, in their original order.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&LabeledSet]) -> Result<Self> {
        let imgs: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let images = Tensor::cat_rows(&imgs)?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Ok(Self { images, labels })
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// A dataset with train and eval splits over classes `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: LabeledSet,
    pub eval: LabeledSet,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    /// Content digest over both splits and the class names.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for c in &self.class_names {
            h.update(c.as_bytes());
            h.update([0]);
        }
        h.update(self.train.digest().as_bytes());
        h.update(self.eval.digest().as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FolderManifest {
    name: String,
    classes: Vec<String>,
    image_shape: [usize; 3],
}

fn to_unit(p: u8) -> f64 {
    p as f64 / 255.0 * 2.0 - 1.0
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Loads the class-per-directory PNG layout.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let manifest: FolderManifest = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    let [c, h, w] = manifest.image_shape;
    if c != 1 && c != 3 {
        return Err(Error::Dataset(format!("image folders hold 1 or 3 channels, manifest says {c}")));
    }
    let mut splits = Vec::new();
    for split in ["train", "eval"] {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (label, class) in manifest.classes.iter().enumerate() {
            let dir = root.join(split).join(class);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<_> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                let img = image::open(&f)?;
                if img.width() as usize != w || img.height() as usize != h {
                    return Err(Error::Dataset(format!(
                        "{} is {}x{}, manifest says {}x{}",
                        f.display(),
                        img.width(),
                        img.height(),
                        w,
                        h
                    )));
                }
                if c == 1 {
                    data.extend(img.to_luma8().pixels().map(|p| to_unit(p.0[0])));
                } else {
                    let rgb = img.to_rgb8();
                    for ch in 0..3 {
                        data.extend(rgb.pixels().map(|p| to_unit(p.0[ch])));
                    }
                }
                labels.push(label);
            }
        }
        let n = labels.len();
        splits.push(LabeledSet::new(Tensor::new(vec![n, c, h, w], data)?, labels)?);
    }
    let eval = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(Dataset { name: manifest.name, class_names: manifest.classes, train, eval })
}

/// Writes the class-per-directory PNG layout (8-bit quantised).
pub fn write_image_folder(ds: &Dataset, root: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::Dataset(format!("image folders hold 1 or 3 channels, dataset has {c}")));
    }
    fs::create_dir_all(root)?;
    let manifest = FolderManifest { name: ds.name.clone(), classes: ds.class_names.clone(), image_shape: [c, h, w] };
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    for (split, set) in [("train", &ds.train), ("eval", &ds.eval)] {
        for i in 0..set.len() {
            let class = &ds.class_names[set.labels()[i]];
            let dir = root.join(split).join(class);
            fs::create_dir_all(&dir)?;
            let row = set.images().row(i);
            let path = dir.join(format!("{i:06}.png"));
            if c == 1 {
                let buf: Vec<u8> = row.iter().map(|&v| to_byte(v)).collect();
                image::GrayImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from shape")
                    .save(path)?;
            } else {
                let plane = h * w;
                let buf: Vec<u8> = (0..plane)
                    .flat_map(|p| (0..3).map(move |ch| (p, ch)))
                    .map(|(p, ch)| to_byte(row[ch * plane + p]))
                    .collect();
                image::RgbImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from shape")
                    .save(path)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BinaryIndex {
    name: String,
    classes: Vec<String>,
    image_shape: [usize; 3],
    train_count: usize,
    eval_count: usize,
}

/// Writes the binary layout (`index.json` + `data.bin`).
pub fn write_binary(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let index = BinaryIndex {
        name: ds.name.clone(),
        classes: ds.class_names.clone(),
        image_shape: ds.image_shape(),
        train_count: ds.train.len(),
        eval_count: ds.eval.len(),
    };
    fs::write(root.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    let mut out = BufWriter::new(fs::File::create(root.join("data.bin"))?);
    for set in [&ds.train, &ds.eval] {
        for i in 0..set.len() {
            out.write_all(&(set.labels()[i] as u32).to_le_bytes())?;
            for &v in set.images().row(i) {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads the binary layout.
pub fn load_binary(root: &Path) -> Result<Dataset> {
    let index: BinaryIndex = serde_json::from_slice(&fs::read(root.join("index.json"))?)?;
    let [c, h, w] = index.image_shape;
    let per = c * h * w;
    let mut input = BufReader::new(fs::File::open(root.join("data.bin"))?);
    let mut read_split = |count: usize| -> Result<LabeledSet> {
        let mut data = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        let mut word = [0u8; 4];
        for _ in 0..count {
            input.read_exact(&mut word)?;
            let label = u32::from_le_bytes(word) as usize;
            if label >= index.classes.len() {
                return Err(Error::Dataset(format!("label {label} outside {} classes", index.classes.len())));
            }
            labels.push(label);
            for _ in 0..per {
                input.read_exact(&mut word)?;
                data.push(f32::from_le_bytes(word) as f64);
            }
        }
        LabeledSet::new(Tensor::new(vec![count, c, h, w], data)?, labels)
    };
    let train = read_split(index.train_count)?;
    let eval = read_split(index.eval_count)?;
    Ok(Dataset { name: index.name, class_names: index.classes, train, eval })
}

/// Loads whichever layout `root` contains.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if root.join("index.json").is_file() {
        load_binary(root)
    } else if root.join("manifest.json").is_file() {
        load_image_folder(root)
    } else {
        Err(Error::Dataset(format!(
            "{} has neither index.json nor manifest.json",
            root.display()
        )))
    }
}

/// Parameters of the synthetic prototype dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub side: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Per-pixel Gaussian noise added to the class prototype.
    pub noise: f64,
    /// Pairs `(a, b)` where `b`'s prototype is a perturbation of `a`'s.
    pub confusable: Vec<(usize, usize)>,
    /// Fraction of an independent pattern mixed into the second class of a
    /// confusable pair (0 = identical prototypes).
    pub confusable_mix: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn desk(num_classes: usize, seed: u64) -> Self {
        Self {
            num_classes,
            channels: 1,
            side: 8,
            train_per_class: 100,
            eval_per_class: 50,
            noise: 0.35,
            confusable: Vec::new(),
            confusable_mix: 0.35,
            seed,
        }
    }
}

/// Smooth random pattern: a coarse Gaussian grid bilinearly upsampled.
fn smooth_pattern<R: Rng>(channels: usize, side: usize, rng: &mut R) -> Vec<f64> {
    let g = (side / 2).max(2);
    let mut out = Vec::with_capacity(channels * side * side);
    for _ in 0..channels {
        let grid: Vec<f64> = (0..g * g).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for y in 0..side {
            for x in 0..side {
                let fy = y as f64 * (g - 1) as f64 / (side - 1) as f64;
                let fx = x as f64 * (g - 1) as f64 / (side - 1) as f64;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let v = grid[y0 * g + x0] * (1.0 - ty) * (1.0 - tx)
                    + grid[y0 * g + x1] * (1.0 - ty) * tx
                    + grid[y1 * g + x0] * ty * (1.0 - tx)
                    + grid[y1 * g + x1] * ty * tx;
                out.push(v);
            }
        }
    }
    out
}

/// Builds the synthetic dataset: one smooth prototype per class, samples are
/// prototypes plus pixel noise and a random ±1 pixel circular shift, squashed
/// into `[-1, 1]` by `tanh`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.side < 2 || spec.channels == 0 {
        return Err(Error::Config("synthetic dataset needs ≥2 classes, side ≥2 and ≥1 channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut protos: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| smooth_pattern(spec.channels, spec.side, &mut rng))
        .collect();
    for &(a, b) in &spec.confusable {
        if a >= spec.num_classes || b >= spec.num_classes || a == b {
            return Err(Error::Config(format!("invalid confusable pair ({a}, {b})")));
        }
        let fresh = smooth_pattern(spec.channels, spec.side, &mut rng);
        let m = spec.confusable_mix;
        protos[b] = protos[a].iter().zip(&fresh).map(|(p, f)| (1.0 - m) * p + m * f).collect();
    }
    let (c, s) = (spec.channels, spec.side);
    let make = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<LabeledSet> {
        let mut data = Vec::with_capacity(spec.num_classes * per_class * c * s * s);
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for (label, proto) in protos.iter().enumerate() {
                let dy = rng.random_range(-1i64..=1);
                let dx = rng.random_range(-1i64..=1);
                for ch in 0..c {
                    for y in 0..s {
                        for x in 0..s {
                            let sy = (y as i64 + dy).rem_euclid(s as i64) as usize;
                            let sx = (x as i64 + dx).rem_euclid(s as i64) as usize;
                            let base = proto[(ch * s + sy) * s + sx];
                            let n: f64 = rng.sample(StandardNormal);
                            data.push((base + spec.noise * n).tanh());
                        }
                    }
                }
                labels.push(label);
            }
        }
        let n = labels.len();
        LabeledSet::new(Tensor::new(vec![n, c, s, s], data)?, labels)
    };
    let train = make(spec.train_per_class, &mut rng)?;
    let eval = make(spec.eval_per_class, &mut rng)?;
    Ok(Dataset {
        name: format!("synthetic-{}c-{}px-s{}", spec.num_classes, spec.side, spec.seed),
        class_names: (0..spec.num_classes).map(|i| format!("class{i:03}")).collect(),
        train,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec { train_per_class: 5, eval_per_class: 2, ..SyntheticSpec::desk(4, 7) };
        let a = synthetic(&spec).unwrap();
        let b = synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 20);
        assert_eq!(a.eval.len(), 8);
        assert!(a.train.images().data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a.train.class_counts().values().copied().collect::<Vec<_>>(), vec![5; 4]);
    }

    #[test]
    fn binary_round_trip() {
        let spec = SyntheticSpec { train_per_class: 3, eval_per_class: 1, channels: 3, ..SyntheticSpec::desk(3, 1) };
        let ds = synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_binary(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.train.labels(), ds.train.labels());
        for (a, b) in back.train.images().data().iter().zip(ds.train.images().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn image_folder_round_trip_quantises_to_8_bits() {
        for channels in [1, 3] {
            let spec = SyntheticSpec { train_per_class: 2, eval_per_class: 1, channels, ..SyntheticSpec::desk(3, 2) };
            let ds = synthetic(&spec).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_image_folder(&ds, dir.path()).unwrap();
            let back = load_dataset(dir.path()).unwrap();
            assert_eq!(back.train.len(), ds.train.len());
            assert_eq!(back.eval.class_counts(), ds.eval.class_counts());
            // folder order is by class then file name; compare per-class multisets loosely
            let tol = 2.0 / 255.0;
            let first_class0 = (0..ds.train.len()).find(|&i| ds.train.labels()[i] == 0).unwrap();
            let back0 = (0..back.train.len()).find(|&i| back.train.labels()[i] == 0).unwrap();
            for (a, b) in ds.train.images().row(first_class0).iter().zip(back.train.images().row(back0)) {
                assert!((a - b).abs() <= tol);
            }
        }
    }

    #[test]
    fn missing_layout_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }
}
