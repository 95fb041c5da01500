//! MNIST / CIFAR-10 loaders, deterministic class-balanced subsets, and a
//! lossless tensor dump for caching prepared sets.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::rng_from_seed;

/// Spatial size every prepared image is brought to.
pub const IMAGE_SIDE: usize = 32;

const MNIST_IMAGE_MAGIC: u32 = 0x0000_0803;
const MNIST_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const DUMP_MAGIC: &[u8; 4] = b"FFDS";
const DUMP_VERSION: u32 = 1;

/// A batch of images (`n × channels × height × width`, values in `[0, 1]`)
/// with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
    /// Position of each image in the file(s) it was loaded from.
    pub source_indices: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        let n = images.len_of(Axis(0));
        let source_indices = (0..n).collect();
        let set = Self { images, labels, class_count, name: name.into(), source_indices };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let n = self.images.len_of(Axis(0));
        if self.labels.len() != n || self.source_indices.len() != n {
            return Err(shape_err(format!("{n} images, {} labels, {} source indices", self.labels.len(), self.source_indices.len())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(invalid(format!("label {bad} outside {} classes", self.class_count)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.len_of(Axis(1))
    }

    pub fn height(&self) -> usize {
        self.images.len_of(Axis(2))
    }

    pub fn width(&self) -> usize {
        self.images.len_of(Axis(3))
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), i)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Images at `indices`, in that order. Source indices carry over.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(invalid(format!("index {bad} outside a set of {}", self.len())));
        }
        Ok(Self {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
            source_indices: indices.iter().map(|&i| self.source_indices[i]).collect(),
        })
    }

    /// Same labels and provenance with new pixel data.
    pub fn with_images(&self, images: Array4<f32>, name: impl Into<String>) -> Result<Self> {
        if images.len_of(Axis(0)) != self.len() {
            return Err(shape_err(format!("{} replacement images for a set of {}", images.len_of(Axis(0)), self.len())));
        }
        Ok(Self {
            images,
            labels: self.labels.clone(),
            class_count: self.class_count,
            name: name.into(),
            source_indices: self.source_indices.clone(),
        })
    }

    /// Writes the set in the internal little-endian dump format.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.images.len() * 4 + self.len() * 16);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        let (n, c, h, w) = self.images.dim();
        for v in [n, c, h, w, self.class_count, self.name.len()] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(self.name.as_bytes());
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &i in &self.source_indices {
            buf.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for &v in self.images.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let fmt = |msg: &str| Error::Format { path: path.to_path_buf(), msg: msg.to_string() };
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| fmt("truncated header"))? != DUMP_MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = cur.u32_le().ok_or_else(|| fmt("truncated header"))?;
        if version != DUMP_VERSION {
            return Err(fmt(&format!("unsupported dump version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = cur.u64_le().ok_or_else(|| fmt("truncated header"))? as usize;
        }
        let [n, c, h, w, class_count, name_len] = dims;
        let name =
            String::from_utf8(cur.take(name_len).ok_or_else(|| fmt("truncated name"))?.to_vec()).map_err(|_| fmt("name is not UTF-8"))?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(cur.u32_le().ok_or_else(|| fmt("truncated labels"))? as usize);
        }
        let mut source_indices = Vec::with_capacity(n);
        for _ in 0..n {
            source_indices.push(cur.u64_le().ok_or_else(|| fmt("truncated indices"))? as usize);
        }
        let count = n * c * h * w;
        let raw = cur.take(count * 4).ok_or_else(|| fmt("truncated pixels"))?;
        let pixels: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if cur.pos != bytes.len() {
            return Err(fmt("trailing bytes"));
        }
        let images = Array4::from_shape_vec((n, c, h, w), pixels).map_err(|e| fmt(&e.to_string()))?;
        let set = Self { images, labels, class_count, name, source_indices };
        set.validate()?;
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(len)?)?;
        self.pos += len;
        Some(out)
    }

    fn u32_le(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64_le(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::from)
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

/// Loads an MNIST IDX image/label pair, scales pixels to `[0, 1]` and
/// zero-pads each 28×28 digit symmetrically to 32×32.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<LabeledImageSet> {
    let img = read_file(image_path)?;
    let lab = read_file(label_path)?;
    let img_err = |msg: String| Error::Format { path: image_path.to_path_buf(), msg };
    let lab_err = |msg: String| Error::Format { path: label_path.to_path_buf(), msg };

    let magic = be_u32(&img, 0).ok_or_else(|| img_err("truncated header".into()))?;
    if magic != MNIST_IMAGE_MAGIC {
        return Err(img_err(format!("bad magic 0x{magic:08x}, expected 0x{MNIST_IMAGE_MAGIC:08x}")));
    }
    let (count, rows, cols) = match (be_u32(&img, 4), be_u32(&img, 8), be_u32(&img, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(img_err("truncated header".into())),
    };
    let lmagic = be_u32(&lab, 0).ok_or_else(|| lab_err("truncated header".into()))?;
    if lmagic != MNIST_LABEL_MAGIC {
        return Err(lab_err(format!("bad magic 0x{lmagic:08x}, expected 0x{MNIST_LABEL_MAGIC:08x}")));
    }
    let lcount = be_u32(&lab, 4).ok_or_else(|| lab_err("truncated header".into()))? as usize;
    if lcount != count {
        return Err(invalid(format!("{count} images but {lcount} labels")));
    }
    if img.len() != 16 + count * rows * cols {
        return Err(img_err(format!("expected {} pixel bytes, found {}", count * rows * cols, img.len() - 16)));
    }
    if lab.len() != 8 + count {
        return Err(lab_err(format!("expected {count} label bytes, found {}", lab.len() - 8)));
    }
    if rows > IMAGE_SIDE || cols > IMAGE_SIDE || !(IMAGE_SIDE - rows).is_multiple_of(2) || !(IMAGE_SIDE - cols).is_multiple_of(2) {
        return Err(img_err(format!("cannot pad {rows}x{cols} symmetrically to {IMAGE_SIDE}")));
    }
    let (top, left) = ((IMAGE_SIDE - rows) / 2, (IMAGE_SIDE - cols) / 2);
    let mut images = Array4::<f32>::zeros((count, 1, IMAGE_SIDE, IMAGE_SIDE));
    for (i, mut dst) in images.outer_iter_mut().enumerate() {
        let src = &img[16 + i * rows * cols..16 + (i + 1) * rows * cols];
        let mut window = dst.slice_mut(s![0, top..top + rows, left..left + cols]);
        for (d, &p) in window.iter_mut().zip(src) {
            *d = p as f32 / 255.0;
        }
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(lab_err(format!("label {bad} out of range")));
    }
    LabeledImageSet::new(images, labels, 10, "mnist")
}

/// Concatenates CIFAR-10 binary batches (3073-byte records: label byte, then
/// the R, G and B planes).
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<LabeledImageSet> {
    let mut blobs = Vec::with_capacity(batch_paths.len());
    let mut count = 0;
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read_file(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            });
        }
        count += bytes.len() / CIFAR_RECORD;
        blobs.push((path.to_path_buf(), bytes));
    }
    let mut images = Array4::<f32>::zeros((count, 3, IMAGE_SIDE, IMAGE_SIDE));
    let mut labels = Vec::with_capacity(count);
    let mut i = 0;
    for (path, bytes) in &blobs {
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Format { path: path.clone(), msg: format!("label byte {} > 9", rec[0]) });
            }
            labels.push(rec[0] as usize);
            let mut dst = images.index_axis_mut(Axis(0), i);
            for (d, &p) in dst.iter_mut().zip(&rec[1..]) {
                *d = p as f32 / 255.0;
            }
            i += 1;
        }
    }
    LabeledImageSet::new(images, labels, 10, "cifar10")
}

/// Exactly `per_class` images of every class, chosen by a seeded shuffle and
/// returned in ascending original order.
pub fn subset(set: &LabeledImageSet, per_class: usize, seed: u64) -> Result<LabeledImageSet> {
    let hist = set.class_histogram();
    if let Some((c, &have)) = hist.iter().enumerate().find(|(_, &h)| h < per_class) {
        return Err(invalid(format!("class {c} has {have} images, {per_class} requested")));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut taken = vec![0usize; set.class_count];
    let mut chosen = Vec::with_capacity(per_class * set.class_count);
    for i in order {
        let l = set.labels[i];
        if taken[l] < per_class {
            taken[l] += 1;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    set.select(&chosen)
}

/// The two benchmark datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DatasetName {
    /// Canonical file locations below a dataset root directory.
    pub fn files(self, root: &Path, split: Split) -> Vec<PathBuf> {
        match (self, split) {
            (Self::Mnist, Split::Train) => vec![root.join("mnist/train-images-idx3-ubyte"), root.join("mnist/train-labels-idx1-ubyte")],
            (Self::Mnist, Split::Test) => vec![root.join("mnist/t10k-images-idx3-ubyte"), root.join("mnist/t10k-labels-idx1-ubyte")],
            (Self::Cifar10, Split::Train) => (1..=5).map(|i| root.join(format!("cifar-10-batches-bin/data_batch_{i}.bin"))).collect(),
            (Self::Cifar10, Split::Test) => vec![root.join("cifar-10-batches-bin/test_batch.bin")],
        }
    }

    pub fn load(self, root: &Path, split: Split) -> Result<LabeledImageSet> {
        let files = self.files(root, split);
        match self {
            Self::Mnist => load_mnist(&files[0], &files[1]),
            Self::Cifar10 => load_cifar10(&files),
        }
    }

    pub fn available(self, root: &Path) -> bool {
        [Split::Train, Split::Test].into_iter().all(|s| self.files(root, s).iter().all(|p| p.is_file()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&MNIST_IMAGE_MAGIC.to_be_bytes());
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(&rows.to_be_bytes());
        v.extend_from_slice(&cols.to_be_bytes());
        for i in 0..(count * rows * cols) as usize {
            v.push(fill(i));
        }
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&MNIST_LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("ffcnn-data-{tag}-{}", std::process::id()));
        fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn mnist_padding_and_scaling() {
        let dir = temp_dir("mnist");
        let imgs = write(&dir, "i", &idx_images(3, 28, 28, |_| 255));
        let labs = write(&dir, "l", &idx_labels(&[0, 5, 9]));
        let set = load_mnist(&imgs, &labs).unwrap();
        assert_eq!(set.images.dim(), (3, 1, 32, 32));
        assert_eq!(set.labels, vec![0, 5, 9]);
        for img in set.images.outer_iter() {
            let ch = img.index_axis(Axis(0), 0);
            for r in 0..32 {
                for c in 0..32 {
                    let border = !(2..30).contains(&r) || !(2..30).contains(&c);
                    assert_eq!(ch[[r, c]], if border { 0.0 } else { 1.0 });
                }
            }
        }
    }

    #[test]
    fn mnist_bad_magic_and_count_mismatch() {
        let dir = temp_dir("mnist-bad");
        let mut bad = idx_images(2, 28, 28, |_| 0);
        bad[3] = 0x01;
        let imgs = write(&dir, "bad", &bad);
        let labs = write(&dir, "l", &idx_labels(&[0, 1]));
        assert!(matches!(load_mnist(&imgs, &labs), Err(Error::Format { .. })));

        let imgs = write(&dir, "ok", &idx_images(2, 28, 28, |_| 0));
        let labs3 = write(&dir, "l3", &idx_labels(&[0, 1, 2]));
        assert!(load_mnist(&imgs, &labs3).is_err());
        // Swapped files trip the magic check.
        assert!(load_mnist(&labs, &imgs).is_err());
    }

    #[test]
    fn cifar_single_record() {
        let dir = temp_dir("cifar");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        let p = write(&dir, "b.bin", &rec);
        let set = load_cifar10(&[&p]).unwrap();
        assert_eq!(set.images.dim(), (1, 3, 32, 32));
        assert_eq!(set.labels, vec![7]);
        assert!(set.images.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_plane_layout() {
        let dir = temp_dir("cifar-planes");
        let mut rec = vec![1u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        rec.extend(std::iter::repeat_n(51u8, 1024));
        let p = write(&dir, "b.bin", &rec);
        let set = load_cifar10(&[&p]).unwrap();
        assert_eq!(set.images[[0, 0, 5, 7]], 1.0);
        assert_eq!(set.images[[0, 1, 5, 7]], 0.0);
        assert!((set.images[[0, 2, 31, 31]] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn cifar_format_errors() {
        let dir = temp_dir("cifar-bad");
        let p = write(&dir, "short.bin", &[0u8; 3072]);
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format { .. })));
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat_n(0u8, 3072));
        let p = write(&dir, "label.bin", &rec);
        assert!(load_cifar10(&[&p]).is_err());
    }

    fn toy_set() -> LabeledImageSet {
        let n = 30;
        let images = Array4::from_shape_fn((n, 1, 4, 4), |(i, _, r, c)| ((i * 16 + r * 4 + c) % 7) as f32 / 7.0);
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledImageSet::new(images, labels, 3, "toy").unwrap()
    }

    #[test]
    fn subset_counts_and_determinism() {
        let set = toy_set();
        let a = subset(&set, 4, 0).unwrap();
        let b = subset(&set, 4, 0).unwrap();
        assert_eq!(a.class_histogram(), vec![4, 4, 4]);
        assert_eq!(a.source_indices, b.source_indices);
        let c = subset(&set, 4, 1).unwrap();
        assert_ne!(a.source_indices, c.source_indices);
        let full = subset(&set, 10, 9).unwrap();
        assert_eq!(full.source_indices, (0..30).collect::<Vec<_>>());
        assert!(subset(&set, 11, 0).is_err());
    }

    #[test]
    fn dump_roundtrip_is_bit_exact() {
        let set = subset(&toy_set(), 3, 5).unwrap();
        let dir = temp_dir("dump");
        let p = dir.join("set.ffds");
        set.write_dump(&p).unwrap();
        let back = LabeledImageSet::read_dump(&p).unwrap();
        assert_eq!(back, set);
        assert!(back.images.iter().zip(set.images.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
