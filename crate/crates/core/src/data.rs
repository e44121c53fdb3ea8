//! Image datasets held in memory as `[0,1]` float tensors.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::ops;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// `(N, C, H, W)` in `[0,1]`.
    pub images: Tensor,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        let n = images.dim(0)?;
        if labels.len() != n {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        let ids = (0..n).map(|i| format!("{i:06}")).collect();
        Ok(Self {
            images,
            labels,
            num_classes,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn geometry(&self) -> Result<[usize; 3]> {
        let (_, c, h, w) = self.images.dims4()?;
        Ok([c, h, w])
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.images.device(),
        )?;
        Ok(Dataset {
            images: self.images.index_select(&idx, 0)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }

    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    /// Deterministic random subset of `n` samples.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let d = self.select(indices)?;
        Ok(LabeledBatch {
            images: d.images,
            labels: d.labels,
        })
    }

    /// Batches in order, or shuffled by `rng` when given. The last batch may be short.
    pub fn batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: Option<&mut R>) -> Result<Vec<LabeledBatch>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(r) = rng {
            idx.shuffle(r);
        }
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<u32>, Vec<f32>)> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Parse {
            offset: whole,
            msg: format!(
                "trailing {} bytes do not form a {CIFAR_RECORD}-byte record",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Parse {
                offset: i * CIFAR_RECORD,
                msg: format!("label byte {} is not a CIFAR-10 class", rec[0]),
            });
        }
        labels.push(rec[0] as u32);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((labels, pixels))
}

pub fn cifar_dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (labels, pixels) = parse_cifar_records(bytes)?;
    let n = labels.len();
    let images = Tensor::from_vec(pixels, (n, 3, CIFAR_SIDE, CIFAR_SIDE), &Device::Cpu)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Reads `data_batch_{1..5}.bin` or `test_batch.bin` from `root`.
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![root.join("test_batch.bin")],
    };
    let mut bytes = Vec::new();
    for f in &files {
        let chunk = std::fs::read(f).context(format!("reading {}", f.display()))?;
        parse_cifar_records(&chunk).context(format!("parsing {}", f.display()))?;
        bytes.extend(chunk);
    }
    cifar_dataset_from_bytes(&bytes)
}

/// Largest PNG side accepted by [`decode_png`].
pub const MAX_PNG_SIDE: u32 = 8192;
const MAX_PNG_DECODE_BYTES: u64 = 256 << 20;

/// Decodes a PNG into a `(3, H, W)` tensor in `[0,1]`; grey and alpha channels are converted.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_PNG_SIDE);
    limits.max_image_height = Some(MAX_PNG_SIDE);
    limits.max_alloc = Some(MAX_PNG_DECODE_BYTES);
    let mut reader = image::ImageReader::with_format(std::io::Cursor::new(bytes), image::ImageFormat::Png);
    reader.limits(limits);
    let img = reader.decode()?.to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), &Device::Cpu)?)
}

/// Encodes a `(3, H, W)` `[0,1]` tensor as an 8-bit PNG.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::Data(format!("expected 3 channels, got {c}")));
    }
    let v = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            raw[i * 3 + ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(image)?).context(format!("writing {}", path.display()))
}

/// Every `*.png` directly inside `dir`, in lexicographic file-name order. Images are resized to
/// `resize` if given; otherwise they must all share the first image's size.
pub fn load_image_folder(dir: &Path, resize: Option<(usize, usize)>) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .context(format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", dir.display())));
    }
    let mut images = Vec::with_capacity(paths.len());
    let mut target = resize;
    for p in &paths {
        let bytes = std::fs::read(p).context(format!("reading {}", p.display()))?;
        let img = decode_png(&bytes).context(format!("decoding {}", p.display()))?;
        let (_, h, w) = img.dims3()?;
        let (th, tw) = *target.get_or_insert((h, w));
        let img = if (h, w) != (th, tw) {
            if resize.is_none() {
                return Err(Error::Data(format!(
                    "{} is {h}x{w}, expected {th}x{tw}; pass a resize policy",
                    p.display()
                )));
            }
            ops::resize_bilinear(&img.unsqueeze(0)?, th, tw)?
                .squeeze(0)?
                .clamp(0f32, 1f32)?
        } else {
            img
        };
        images.push(img);
    }
    let stacked = Tensor::stack(&images, 0)?;
    let mut ds = Dataset::new(stacked, vec![0; paths.len()], 1)?;
    ds.ids = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    Ok(ds)
}

/// Toy image classes: each class is a soft coloured blob at its own position on a dark,
/// slightly noisy background.
pub fn synthetic_blobs(per_class: usize, classes: usize, side: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.04).expect("valid std");
    let n = per_class * classes;
    let mut pixels = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for i in 0..n {
        let class = i % classes;
        let angle = std::f64::consts::TAU * class as f64 / classes.max(1) as f64;
        let cy = s * (0.5 + 0.25 * angle.sin()) + jitter.sample(&mut rng) * s;
        let cx = s * (0.5 + 0.25 * angle.cos()) + jitter.sample(&mut rng) * s;
        let radius = s * (0.16 + 0.03 * rng.random::<f64>());
        let hue = [
            0.5 + 0.45 * angle.cos(),
            0.5 + 0.45 * (angle + 2.1).cos(),
            0.5 + 0.45 * (angle + 4.2).cos(),
        ];
        for colour in hue {
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    let blob = (-d2 / (2.0 * radius * radius)).exp();
                    let v = 0.1 + blob * (colour - 0.1) + 0.02 * jitter.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class as u32);
    }
    let images = Tensor::from_vec(pixels, (n, 3, side, side), &Device::Cpu)?;
    Dataset::new(images, labels, classes)
}

/// Bilinear enlargement by an integer factor per side.
pub fn upscale(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::Config(format!("upscale factor must be >= 1, got {factor}")));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    ops::resize_bilinear(x, h * factor, w * factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10Binary,
    ImageFolder,
    SyntheticBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    /// Directory; relative paths resolve against the data root.
    pub path: PathBuf,
    pub split: Split,
    /// Resize every image to this `(H, W)`.
    pub resize: Option<(usize, usize)>,
    /// Keep a seeded random subset of at most this many samples.
    pub limit: Option<usize>,
    /// Synthetic-blob parameters.
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SyntheticBlobs,
            path: PathBuf::new(),
            split: Split::Train,
            resize: None,
            limit: None,
            classes: 2,
            per_class: 64,
            side: 32,
        }
    }
}

/// Name of the environment variable holding the data root.
pub const DATA_ROOT_VAR: &str = "ARINV_DATA";

pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from)
}

pub fn load_dataset(src: &DatasetSource, seed: u64) -> Result<Dataset> {
    let resolve = |p: &Path| -> PathBuf {
        match data_root() {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    };
    let ds = match src.kind {
        DatasetKind::Cifar10Binary => {
            let root = resolve(&src.path);
            let ds = load_cifar10(&root, src.split)?;
            match src.resize {
                Some((h, w)) if (h, w) != (CIFAR_SIDE, CIFAR_SIDE) => Dataset {
                    images: ops::resize_bilinear(&ds.images, h, w)?.clamp(0f32, 1f32)?,
                    ..ds
                },
                _ => ds,
            }
        }
        DatasetKind::ImageFolder => load_image_folder(&resolve(&src.path), src.resize)?,
        DatasetKind::SyntheticBlobs => {
            let split_seed = match src.split {
                Split::Train => seed,
                Split::Test => seed ^ 0x5eed_7e57,
            };
            synthetic_blobs(src.per_class, src.classes, src.side, split_seed)?
        }
    };
    match src.limit {
        Some(n) if n < ds.len() => ds.sample(n, seed),
        _ => Ok(ds),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn cifar_label_and_planar_pixels() {
        let mut bytes = record(7, 0);
        bytes[1] = 255; // red (0,0)
        bytes[1 + 1024 + 33] = 51; // green (1,1)
        bytes.extend(record(2, 255));
        let ds = cifar_dataset_from_bytes(&bytes).unwrap();
        assert_eq!(ds.labels, vec![7, 2]);
        let img = ds.images.get(0).unwrap();
        let v = to_f64_vec(&img).unwrap();
        assert_eq!(v[0], 1.0);
        assert!((v[1024 + 33] - 0.2).abs() < 1e-6);
        assert_eq!(v[2048], 0.0);
        assert!(to_f64_vec(&ds.images.get(1).unwrap())
            .unwrap()
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn cifar_truncated_record_reports_offset() {
        let mut bytes = record(1, 3);
        bytes.extend(vec![0u8; 100]);
        match parse_cifar_records(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label() {
        let mut bytes = record(1, 3);
        bytes.extend(record(10, 3));
        assert!(matches!(
            parse_cifar_records(&bytes),
            Err(Error::Parse {
                offset: CIFAR_RECORD,
                ..
            })
        ));
    }

    #[test]
    fn cifar_files_from_root() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for i in 0..4u8 {
            bytes.extend(record(i, i * 10));
        }
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_classes, 10);
        assert!(load_cifar10(dir.path(), Split::Train).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dev = Device::Cpu;
        let v: Vec<f32> = (0..3 * 5 * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        let t = Tensor::from_vec(v.clone(), (3, 5, 4), &dev).unwrap();
        let back = decode_png(&encode_png(&t).unwrap()).unwrap();
        assert_eq!(back.dims(), &[3, 5, 4]);
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v);
    }

    #[test]
    fn oversized_png_is_refused() {
        let wide = Tensor::zeros((3, 1, MAX_PNG_SIDE as usize + 1), DType::F32, &Device::Cpu).unwrap();
        assert!(decode_png(&encode_png(&wide).unwrap()).is_err());
        assert!(decode_png(b"\x89PNG\r\n\x1a\n").is_err());
    }

    #[test]
    fn image_folder_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (name, val) in [("b.png", 0.5f32), ("a.png", 0.0), ("c.png", 1.0)] {
            let t = Tensor::full(val, (3, 6, 6), &Device::Cpu).unwrap();
            write_png(&dir.path().join(name), &t).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let ds = load_image_folder(dir.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.ids, vec!["a", "b", "c"]);
        let firsts: Vec<f64> = (0..3)
            .map(|i| to_f64_vec(&ds.images.get(i).unwrap()).unwrap()[0])
            .collect();
        assert_eq!(firsts[0], 0.0);
        assert_eq!(firsts[2], 1.0);
    }

    #[test]
    fn image_folder_size_policy() {
        let dir = tempfile::tempdir().unwrap();
        write_png(
            &dir.path().join("a.png"),
            &Tensor::zeros((3, 6, 6), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        write_png(
            &dir.path().join("b.png"),
            &Tensor::zeros((3, 8, 8), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!(load_image_folder(dir.path(), None).is_err());
        let ds = load_image_folder(dir.path(), Some((4, 4))).unwrap();
        assert_eq!(ds.geometry().unwrap(), [3, 4, 4]);
    }

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = synthetic_blobs(3, 2, 16, 5).unwrap();
        let b = synthetic_blobs(3, 2, 16, 5).unwrap();
        assert_eq!(to_f64_vec(&a.images).unwrap(), to_f64_vec(&b.images).unwrap());
        assert_eq!(a.labels, vec![0, 1, 0, 1, 0, 1]);
        assert!(to_f64_vec(&a.images).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn upscale_factors() {
        let x = Tensor::full(0.3f32, (1, 3, 8, 8), &Device::Cpu).unwrap();
        assert_eq!(upscale(&x, 1).unwrap().dims(), x.dims());
        let y = upscale(&x, 4).unwrap();
        assert_eq!(y.dims(), &[1, 3, 32, 32]);
        assert!(to_f64_vec(&y).unwrap().iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert!(upscale(&x, 0).is_err());
    }

    #[test]
    fn batching_and_subsets() {
        let ds = synthetic_blobs(5, 2, 8, 1).unwrap();
        let batches = ds.batches::<ChaCha8Rng>(4, None).unwrap();
        assert_eq!(
            batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shuffled = ds.batches(4, Some(&mut rng)).unwrap();
        assert_eq!(shuffled.iter().map(|b| b.labels.len()).sum::<usize>(), 10);
        assert_eq!(ds.class_indices(1), vec![1, 3, 5, 7, 9]);
        let s = ds.sample(4, 9).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.ids, ds.sample(4, 9).unwrap().ids);
    }
}
