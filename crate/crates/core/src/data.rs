//! Datasets, batching and checkpoint files.
//!
//! IDX files are the big-endian container used by the MNIST distribution.
//! Checkpoints are a small binary container of their own:
//!
//! ```text
//! RANK1CNN-CHECKPOINT 1\n
//! record*   where record = u32 name_len | name | u8 kind | u64 count | payload
//! ```
//!
//! `kind` 0 is UTF-8 text (`count` bytes), kind 1 is `count` little-endian
//! f64 values. The records `spec`, `mode` and `seed` are required; every
//! other record is a named parameter or running statistic of the network.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::layers::ConvMode;
use crate::network::{Network, NetworkSpec};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[M, C, H, W]` with pixel values in `[0, 1]` and one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!("images must be [M, C, H, W], got {:?}", images.shape()));
        }
        if images.shape()[0] == 0 {
            return Err(Error::Empty("dataset"));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        if !images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of a single sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let per = self.images.len() / self.len();
        let (c, h, w) = self.sample_shape();
        let images = Tensor::new(vec![n, c, h, w], self.images.data()[..n * per].to_vec())?;
        Dataset::new(images, self.labels[..n].to_vec(), self.classes)
    }

    /// Gathers the samples at `indices` into one batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.images.len() / self.len();
        let (c, h, w) = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Batches in a seeded random order, or in storage order when
    /// `shuffle_seed` is `None`. The last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// Sample indices in visiting order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            what,
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let what = "IDX image file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok((n, rows, cols, bytes[16..expected].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let what = "IDX label file";
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads an IDX image/label pair as a single-channel dataset with pixels
/// scaled by 1/255. The class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("IDX dataset"));
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, classes)
}

/// Serialises images and labels in IDX form (pixels rounded from `[0, 1]`
/// to bytes). Only single-channel datasets can be written.
pub fn write_idx(data: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (c, h, w) = data.sample_shape();
    if c != 1 {
        return Err(shape_err!("IDX images are single-channel, dataset has {c} channels"));
    }
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Gaussian blobs around one random prototype image per class.
///
/// Prototypes are uniform in `[0.2, 0.8]` per pixel and samples add noise
/// with standard deviation 0.05 (clamped to `[0, 1]`), so classes are far
/// apart relative to their spread. Samples are stored class by class.
pub fn synth_blobs(classes: usize, per_class: usize, dims: (usize, usize, usize), seed: u64) -> Result<Dataset> {
    synth_blobs_split(classes, per_class, dims, seed, 0)
}

/// Like [`synth_blobs`], but draws an independent sample set around the same
/// prototypes for each `split`, so a train/test pair shares its classes.
pub fn synth_blobs_split(classes: usize, per_class: usize, dims: (usize, usize, usize), seed: u64, split: u64) -> Result<Dataset> {
    let (c, h, w) = dims;
    if classes < 2 || per_class == 0 || c * h * w == 0 {
        return Err(Error::InvalidArgument(
            "synthetic blobs need at least two classes, one sample per class and positive dims".into(),
        ));
    }
    let d = c * h * w;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Tensor> = (0..classes)
        .map(|_| Tensor::random_uniform(&[d], 0.2, 0.8, &mut proto_rng))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split + 1);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut data = Vec::with_capacity(classes * per_class * d);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.data().iter().map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![classes * per_class, c, h, w], data)?, labels, classes)
}

pub const CHECKPOINT_MAGIC: &str = "RANK1CNN-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TEXT: u8 = 0;
const KIND_F64: u8 = 1;

/// A network restored from disk together with the seed it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub seed: u64,
}

fn write_record<W: Write>(out: &mut W, name: &str, kind: u8, count: usize, payload: &[u8]) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&[kind])?;
    out.write_all(&(count as u64).to_le_bytes())?;
    out.write_all(payload)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, network: &Network, seed: u64) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    for (name, text) in [
        ("spec", network.spec().to_string()),
        ("mode", network.mode().as_str().to_string()),
        ("seed", seed.to_string()),
    ] {
        write_record(&mut out, name, KIND_TEXT, text.len(), text.as_bytes())?;
    }
    for (name, values) in network.state() {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_record(&mut out, &name, KIND_F64, values.len(), &bytes)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, network: &Network, seed: u64) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, network, seed)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            what: "checkpoint",
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptRecord("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::CorruptRecord("header is not UTF-8".into()))?;
    let version = match header.split_once(' ') {
        Some((CHECKPOINT_MAGIC, v)) => v,
        _ => return Err(Error::CorruptRecord(format!("not a checkpoint header: `{header}`"))),
    };
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut cur = Cursor {
        bytes: &bytes,
        pos: newline + 1,
    };
    let (mut spec, mut mode, mut seed) = (None, None, None);
    let mut state = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::CorruptRecord("record name is not UTF-8".into()))?
            .to_string();
        let kind = cur.take(1)?[0];
        let count = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let count = usize::try_from(count).map_err(|_| Error::CorruptRecord(format!("record `{name}` is too large")))?;
        match kind {
            KIND_TEXT => {
                let text = std::str::from_utf8(cur.take(count)?)
                    .map_err(|_| Error::CorruptRecord(format!("record `{name}` is not UTF-8")))?
                    .to_string();
                match name.as_str() {
                    "spec" => spec = Some(text),
                    "mode" => mode = Some(text),
                    "seed" => seed = Some(text),
                    _ => return Err(Error::CorruptRecord(format!("unknown text record `{name}`"))),
                }
            }
            KIND_F64 => {
                let raw = cur.take(count.checked_mul(8).ok_or_else(|| {
                    Error::CorruptRecord(format!("record `{name}` is too large"))
                })?)?;
                let values = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                state.push((name, values));
            }
            other => return Err(Error::CorruptRecord(format!("record `{name}` has unknown kind {other}"))),
        }
    }

    let missing = |what: &str| Error::CorruptRecord(format!("missing `{what}` record"));
    let spec: NetworkSpec = spec.ok_or_else(|| missing("spec"))?.parse()?;
    let mode: ConvMode = mode.ok_or_else(|| missing("mode"))?.parse()?;
    let seed: u64 = seed
        .ok_or_else(|| missing("seed"))?
        .parse()
        .map_err(|_| Error::CorruptRecord("seed is not an integer".into()))?;
    let mut network = Network::new(&spec, mode, seed)?;
    network.load_state(&state)?;
    Ok(Checkpoint { network, seed })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_xent;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_LABELS_MAGIC, labels.len() as u32] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = vec![0, 255, 51, 102, 7, 8, 9, 10, 11, 12, 13, 14];
        fs::write(dir.path().join("img"), idx_images(2, 2, 3, &pixels)).unwrap();
        fs::write(dir.path().join("lab"), idx_labels(&[3, 1])).unwrap();
        let ds = load_idx(dir.path().join("img"), dir.path().join("lab")).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels(), &[3, 1]);
        assert_eq!(ds.classes(), 4);
        for (v, p) in ds.images().data().iter().zip(&pixels) {
            assert_eq!(*v, f64::from(*p) / 255.0);
        }
    }

    #[test]
    fn idx_errors_are_typed() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::BadMagic { found: 0x801, .. })));
        assert!(matches!(parse_idx_images(&idx_images(2, 2, 2, &[0; 5])), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Truncated { .. })));
        assert!(matches!(parse_idx_labels(&idx_images(1, 1, 1, &[0])), Err(Error::BadMagic { .. })));

        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("img"), idx_images(2, 1, 1, &[0, 1])).unwrap();
        fs::write(dir.path().join("lab"), idx_labels(&[0, 1, 1])).unwrap();
        assert!(matches!(
            load_idx(dir.path().join("img"), dir.path().join("lab")),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
        assert!(matches!(load_idx(dir.path().join("nope"), dir.path().join("lab")), Err(Error::Io(_))));
    }

    #[test]
    fn idx_write_read_round_trip() {
        let ds = synth_blobs(3, 4, (1, 5, 4), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_idx(&ds, dir.path().join("i"), dir.path().join("l")).unwrap();
        let back = load_idx(dir.path().join("i"), dir.path().join("l")).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert!(back.images().max_abs_diff(ds.images()).unwrap() <= 0.5 / 255.0 + 1e-15);
    }

    #[test]
    fn synth_blobs_basics() {
        let ds = synth_blobs(2, 50, (1, 4, 4), 9).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds, synth_blobs(2, 50, (1, 4, 4), 9).unwrap());
        assert_ne!(ds, synth_blobs(2, 50, (1, 4, 4), 10).unwrap());
        assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_blobs(1, 5, (1, 2, 2), 0).is_err());
    }

    #[test]
    fn nearest_centroid_separates_held_out_split() {
        let fit = synth_blobs(4, 30, (1, 6, 6), 5).unwrap();
        let ds = synth_blobs_split(4, 30, (1, 6, 6), 5, 1).unwrap();
        assert_ne!(fit, ds);
        let d = 36;
        let mut centroids = vec![vec![0.0; d]; 4];
        for (i, &l) in fit.labels().iter().enumerate() {
            for (c, v) in centroids[l].iter_mut().zip(&fit.images().data()[i * d..(i + 1) * d]) {
                *c += v / 30.0;
            }
        }
        let correct = (0..ds.len())
            .filter(|&i| {
                let x = &ds.images().data()[i * d..(i + 1) * d];
                let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == ds.labels()[i]
            })
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn batch_sizes_and_shuffle() {
        let ds = synth_blobs(2, 5, (1, 2, 2), 0).unwrap();
        let sizes: Vec<usize> = ds.batches(3, Some(1)).unwrap().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let a = ds.batches(3, Some(1)).unwrap();
        let b = ds.batches(3, Some(1)).unwrap();
        assert_eq!(a.order(), b.order());
        let mut sorted = a.order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(ds.batches(4, None).unwrap().order(), (0..10).collect::<Vec<_>>().as_slice());
        assert!(ds.batches(0, None).is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[1, 1, 2, 2]), vec![2], 2).is_err());
        assert!(Dataset::new(Tensor::full(&[1, 1, 2, 2], 1.5), vec![0], 2).is_err());
        let ds = synth_blobs(2, 5, (1, 2, 2), 0).unwrap();
        assert_eq!(ds.take(3).unwrap().len(), 3);
        assert_eq!(ds.take(30).unwrap().len(), 10);
    }

    fn trained_micro(mode: ConvMode) -> Network {
        let spec: NetworkSpec = "input 1x6x6; conv 1->3 3x3; batchnorm; relu; maxpool2; fc 27->2".parse().unwrap();
        let mut net = Network::new(&spec, mode, 4).unwrap();
        let ds = synth_blobs(2, 4, (1, 6, 6), 1).unwrap();
        for (x, y) in ds.batches(4, Some(0)).unwrap() {
            let logits = net.forward(&x, true).unwrap();
            let (_, d) = softmax_xent(&logits, &y).unwrap();
            net.backward(&d).unwrap();
            net.step(0.1, 0.0).unwrap();
        }
        net
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = synth_blobs(2, 4, (1, 6, 6), 1).unwrap();
        for mode in [ConvMode::Standard, ConvMode::Rank1, ConvMode::Sequential] {
            let mut net = trained_micro(mode);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &net, 77).unwrap();
            let mut back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.seed, 77);
            assert_eq!(back.network.mode(), mode);
            let a = net.state();
            let b = back.network.state();
            assert_eq!(a.len(), b.len());
            for ((na, va), (nb, vb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(va), bits(vb));
            }
            let x = ds.images();
            assert_eq!(net.forward(x, false).unwrap(), back.network.forward(x, false).unwrap());
        }
    }

    #[test]
    fn checkpoint_errors() {
        let net = trained_micro(ConvMode::Rank1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net, 1).unwrap();

        for cut in [buf.len() - 3, buf.len() / 2, 30] {
            assert!(matches!(read_checkpoint(&buf[..cut]), Err(Error::Truncated { .. })), "cut at {cut}");
        }
        let mut v2 = buf.clone();
        let pos = CHECKPOINT_MAGIC.len() + 1;
        v2[pos] = b'2';
        assert!(matches!(read_checkpoint(v2.as_slice()), Err(Error::VersionMismatch { .. })));
        assert!(matches!(read_checkpoint(&b"hello\n"[..]), Err(Error::CorruptRecord(_))));
        assert!(matches!(read_checkpoint(&b""[..]), Err(Error::CorruptRecord(_))));
        let header_only = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
        assert!(matches!(read_checkpoint(header_only.as_bytes()), Err(Error::CorruptRecord(_))));
    }

    #[test]
    fn checkpoint_file_helpers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let net = trained_micro(ConvMode::Standard);
        save_checkpoint(&path, &net, 3).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network.state(), net.state());
    }
}
