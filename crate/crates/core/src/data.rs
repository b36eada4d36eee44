//! Image datasets: the on-disk archive, directory and IDX ingestion, and the
//! built-in synthetic shapes generator.

use crate::error::{bail, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use rand::Rng;
use std::path::Path;

pub const ARCHIVE_MAGIC: [u8; 8] = *b"DPLDMDS\0";
pub const ARCHIVE_VERSION: u16 = 1;
/// Class id stored for unlabeled images.
pub const UNLABELED: u16 = 0xFFFF;
const HEADER_LEN: usize = 8 + 2 + 4 + 2 + 2 + 2 + 2;

/// Images stored as row-major 8-bit pixels in `[n][ch][h][w]` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
}

pub fn pixel_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_pixel(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(|&l| l != UNLABELED)
    }

    /// Images as `[n, ch, h, w]` with values in `[-1, 1]`.
    pub fn images(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| pixel_to_unit(p)).collect();
        Tensor::new(&[self.len(), self.channels, self.height, self.width], data).expect("consistent dataset")
    }

    /// Class ids, failing if any image is unlabeled.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        if !self.is_labeled() {
            bail!(Data, "dataset has unlabeled images");
        }
        Ok(self.labels.iter().map(|&l| l as usize).collect())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            if let Some(c) = counts.get_mut(l as usize) {
                *c += 1;
            }
        }
        counts
    }

    /// Quantize `[n, ch, h, w]` images in `[-1, 1]` into a dataset.
    pub fn from_images(images: &Tensor, labels: Option<&[usize]>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            bail!(Dimension, "expected [n, ch, h, w], got {:?}", s);
        }
        let labels = match labels {
            Some(l) if l.len() != s[0] => bail!(Data, "{} labels for {} images", l.len(), s[0]),
            Some(l) => l.iter().map(|&c| c as u16).collect(),
            None => vec![UNLABELED; s[0]],
        };
        let ds = Self {
            height: s[2],
            width: s[3],
            channels: s[1],
            num_classes,
            pixels: images.data().iter().map(|&x| unit_to_pixel(x)).collect(),
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let len = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * len..(i + 1) * len]);
        }
        Self { pixels, labels: indices.iter().map(|&i| self.labels[i]).collect(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            bail!(Format, "{} pixel bytes for {} images of {} bytes", self.pixels.len(), self.len(), self.image_len());
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l != UNLABELED && l as usize >= self.num_classes) {
            bail!(Data, "label {l} outside {} classes", self.num_classes);
        }
        Ok(())
    }

    /// Fails unless both spatial extents are divisible by `factor`.
    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            bail!(Config, "{}x{} images are not divisible by f = {factor}", self.height, self.width);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() + 2 * self.len());
        out.extend_from_slice(&ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in [self.height, self.width, self.channels, self.num_classes] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..8] != ARCHIVE_MAGIC {
            bail!(Format, "not a dataset archive");
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(8);
        if version != ARCHIVE_VERSION {
            bail!(Format, "unsupported archive version {version}");
        }
        let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let (height, width, channels, num_classes) =
            (u16_at(14) as usize, u16_at(16) as usize, u16_at(18) as usize, u16_at(20) as usize);
        let pix = n * height * width * channels;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != pix + 2 * n {
            bail!(Format, "payload is {} bytes, header implies {}", payload.len(), pix + 2 * n);
        }
        let labels = payload[pix..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let ds = Self { height, width, channels, num_classes, pixels: payload[..pix].to_vec(), labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn image_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Read a directory of images. Files directly inside `dir` are unlabeled;
/// if `dir` holds only subdirectories, each one is a class, in sorted order.
/// Grayscale inputs give one channel, anything else is converted to RGB.
pub fn ingest_dir(dir: &Path) -> Result<Dataset> {
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut groups = Vec::new();
    if subdirs.is_empty() {
        groups.push((UNLABELED, image_files(dir)?));
    } else {
        for (c, sub) in subdirs.iter().enumerate() {
            groups.push((c as u16, image_files(sub)?));
        }
    }
    let num_classes = if subdirs.is_empty() { 0 } else { subdirs.len() };
    let mut shape: Option<(usize, usize, usize)> = None;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for (label, files) in groups {
        for file in files {
            let img = image::open(&file).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
            let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16);
            let (w, h) = (img.width() as usize, img.height() as usize);
            let ch = if gray { 1 } else { 3 };
            match shape {
                None => shape = Some((h, w, ch)),
                Some(s) if s != (h, w, ch) => bail!(
                    Data,
                    "{} is {h}x{w}x{ch}, earlier images are {}x{}x{}",
                    file.display(),
                    s.0,
                    s.1,
                    s.2
                ),
                _ => {}
            }
            if gray {
                pixels.extend_from_slice(img.to_luma8().as_raw());
            } else {
                let rgb = img.to_rgb8();
                for c in 0..3 {
                    pixels.extend(rgb.pixels().map(|p| p.0[c]));
                }
            }
            labels.push(label);
        }
    }
    let Some((height, width, channels)) = shape else { bail!(Data, "no images in {}", dir.display()) };
    let ds = Dataset { height, width, channels, num_classes, pixels, labels };
    ds.validate()?;
    Ok(ds)
}

fn idx_header(bytes: &[u8], kind: u8, ndim: usize) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 + 4 * ndim || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] != kind {
        bail!(Format, "bad IDX header");
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let body = &bytes[4 + 4 * ndim..];
    if body.len() != dims.iter().product::<usize>() {
        bail!(Format, "IDX body has {} bytes, header implies {}", body.len(), dims.iter().product::<usize>());
    }
    Ok((dims, body))
}

/// Import MNIST-format IDX files (`idx3-ubyte` images, optional `idx1-ubyte` labels).
pub fn ingest_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let raw = std::fs::read(images)?;
    let (dims, body) = idx_header(&raw, 3, 3)?;
    let n = dims[0];
    let (labels, num_classes) = match labels {
        Some(p) => {
            let raw = std::fs::read(p)?;
            let (ldims, lbody) = idx_header(&raw, 1, 1)?;
            if ldims[0] != n {
                bail!(Format, "{} labels for {n} images", ldims[0]);
            }
            let classes = lbody.iter().copied().max().map_or(0, |m| m as usize + 1);
            (lbody.iter().map(|&l| l as u16).collect(), classes)
        }
        None => (vec![UNLABELED; n], 0),
    };
    let ds = Dataset { height: dims[1], width: dims[2], channels: 1, num_classes, pixels: body.to_vec(), labels };
    ds.validate()?;
    Ok(ds)
}

/// Load a dataset archive or ingest a directory.
pub fn ingest(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        ingest_dir(path)
    } else {
        Dataset::load(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Public,
    Private,
}

/// Rendering parameters of one domain of the shapes generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeStyle {
    /// Half-extent range as a fraction of the image size.
    pub size: (f64, f64),
    /// Probability of drawing an outline instead of a filled shape.
    pub outline: f64,
    /// Stroke width range in pixels for outlines.
    pub stroke: (f64, f64),
    pub foreground: (f64, f64),
    pub background: (f64, f64),
}

impl ShapeStyle {
    /// The public domain is broad; the private one is a narrow corner of it
    /// (large bright outlines on a grey background).
    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Public => Self {
                size: (0.15, 0.42),
                outline: 0.5,
                stroke: (1.0, 2.5),
                foreground: (0.2, 1.0),
                background: (-1.0, -0.2),
            },
            Domain::Private => Self {
                size: (0.30, 0.42),
                outline: 1.0,
                stroke: (1.4, 1.8),
                foreground: (0.8, 1.0),
                background: (-0.5, -0.2),
            },
        }
    }
}

/// Number of classes of the shapes generator: 0 = circle, 1 = square.
pub const SHAPE_CLASSES: usize = 2;

fn covered(class: usize, stroke: Option<f64>, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    // signed distance to the boundary, negative inside
    let d = if class == 0 { (dx * dx + dy * dy).sqrt() - r } else { dx.abs().max(dy.abs()) - r };
    match stroke {
        None => d <= 0.0,
        Some(s) => d.abs() <= s / 2.0,
    }
}

/// One `size x size` grayscale shape, 4x4 supersampled.
pub fn render_shape<R: Rng + ?Sized>(class: usize, size: usize, style: &ShapeStyle, rng: &mut R) -> Vec<u8> {
    let s = size as f64;
    let r = rng.gen_range(style.size.0..=style.size.1) * s;
    let stroke = rng.gen_bool(style.outline).then(|| rng.gen_range(style.stroke.0..=style.stroke.1));
    let margin = r + stroke.unwrap_or(0.0) / 2.0;
    let lo = margin.min(s / 2.0);
    let hi = (s - margin).max(s / 2.0);
    let cx = rng.gen_range(lo..=hi);
    let cy = rng.gen_range(lo..=hi);
    let fg = rng.gen_range(style.foreground.0..=style.foreground.1);
    let bg = rng.gen_range(style.background.0..=style.background.1);
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                    let y = py as f64 + (sy as f64 + 0.5) / 4.0;
                    hits += covered(class, stroke, cx, cy, r, x, y) as usize;
                }
            }
            let a = hits as f64 / 16.0;
            out.push(unit_to_pixel(bg + a * (fg - bg)));
        }
    }
    out
}

/// Class-balanced shapes dataset: image `i` has class `i mod 2`, and its
/// geometry is drawn from a stream keyed by `(seed, domain, i)`.
pub fn synthetic_shapes(n: usize, size: usize, domain: Domain, seed: u64) -> Dataset {
    let style = ShapeStyle::for_domain(domain);
    let tag = match domain {
        Domain::Public => 0,
        Domain::Private => 1,
    };
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        pixels.extend(render_shape(class, size, &style, &mut stream(seed, Purpose::Data, &[tag, i as u64])));
        labels.push(class as u16);
    }
    Dataset { height: size, width: size, channels: 1, num_classes: SHAPE_CLASSES, pixels, labels }
}
