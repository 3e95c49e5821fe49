//! Chip ingestion, per-class subsampling, preprocessing and a synthetic
//! SAR-like chip generator.
//!
//! On disk a dataset is `root/<class_name>/<chip>.pgm` (binary P5, 8-bit)
//! with an optional `root/manifest.csv` carrying `file,class,depression`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MIN_CHIP_SIZE: usize = 32;
pub const TRAIN_DEPRESSION: f64 = 17.0;
pub const TEST_DEPRESSION: f64 = 15.0;
pub const MANIFEST_FILE: &str = "manifest.csv";
const STD_FLOOR: f64 = 1e-6;

/// Single-channel image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height * width != pixels.len() || height == 0 || width == 0 {
            return Err(Error::Dataset(format!(
                "image {height}x{width} cannot hold {} pixels",
                pixels.len()
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub label: usize,
    pub class_name: String,
    pub depression_deg: Option<f64>,
    pub source_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    /// All samples per class.
    pub counts: Vec<usize>,
    /// Samples per class at the training depression angle.
    pub train_counts: Vec<usize>,
    /// Samples per class at the test depression angle.
    pub test_counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn from_samples(classes: Vec<String>, samples: &[Sample]) -> Self {
        let k = classes.len();
        let mut m = DatasetManifest {
            classes,
            counts: vec![0; k],
            train_counts: vec![0; k],
            test_counts: vec![0; k],
        };
        for s in samples {
            m.counts[s.label] += 1;
            match s.depression_deg {
                Some(d) if d == TRAIN_DEPRESSION => m.train_counts[s.label] += 1,
                Some(d) if d == TEST_DEPRESSION => m.test_counts[s.label] += 1,
                _ => {}
            }
        }
        m
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

// ---------------------------------------------------------------- PGM

/// Parse a binary (P5) PGM with maxval ≤ 255. `path` only labels errors.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let bad = |detail: String| Error::Image {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0usize;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if header[0] != "P5" {
        return Err(bad(format!("expected magic P5, found '{}'", header[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| bad(format!("{what} '{s}' is not a positive integer")))
    };
    let width = num(&header[1], "width")?;
    let height = num(&header[2], "height")?;
    let maxval = num(&header[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(bad(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    let expected = width * height;
    if raster.len() != expected {
        return Err(bad(format!(
            "raster has {} bytes, {width}x{height} needs {expected}",
            raster.len()
        )));
    }
    let maxval_f = maxval as f32;
    let mut pixels = Vec::with_capacity(expected);
    for &b in raster {
        if b as usize > maxval {
            return Err(bad(format!("pixel value {b} exceeds maxval {maxval}")));
        }
        pixels.push(b as f32 / maxval_f);
    }
    GrayImage::new(height, width, pixels)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

/// Encode as P5 with maxval 255, rounding to the nearest level.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------- loading

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    file: String,
    class: String,
    depression: Option<f64>,
}

/// Load every `root/<class>/*.pgm`. Classes and files are visited in
/// lexicographic order; labels follow class order.
pub fn load_chip_dataset(root: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            class_dirs.push(entry.path());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{} contains no class directories",
            root.display()
        )));
    }

    let depressions = read_manifest(root)?;
    let mut classes = Vec::with_capacity(class_dirs.len());
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no .pgm chips",
                dir.display()
            )));
        }
        for path in files {
            let image = read_pgm(&path)?;
            if image.height < MIN_CHIP_SIZE || image.width < MIN_CHIP_SIZE {
                return Err(Error::Image {
                    path,
                    detail: format!(
                        "{}x{} is below the {MIN_CHIP_SIZE}x{MIN_CHIP_SIZE} minimum",
                        image.height, image.width
                    ),
                });
            }
            let file_name = path.file_name().unwrap_or_default().to_string_lossy();
            let rel = format!("{class_name}/{file_name}");
            let source_id = rel.trim_end_matches(".pgm").to_string();
            let depression_deg = match &depressions {
                Some(map) => match map.get(&rel) {
                    Some((cls, d)) if cls == &class_name => *d,
                    Some((cls, _)) => {
                        return Err(Error::Dataset(format!(
                            "manifest lists {rel} under class '{cls}'"
                        )))
                    }
                    None => None,
                },
                None => None,
            };
            seen.insert(rel);
            samples.push(Sample {
                image,
                label,
                class_name: class_name.clone(),
                depression_deg,
                source_id,
            });
        }
        classes.push(class_name);
    }
    if let Some(map) = &depressions {
        if let Some(missing) = map.keys().find(|f| !seen.contains(*f)) {
            return Err(Error::Dataset(format!(
                "manifest lists {missing}, which does not exist"
            )));
        }
    }
    let manifest = DatasetManifest::from_samples(classes, &samples);
    Ok((samples, manifest))
}

type DepressionMap = BTreeMap<String, (String, Option<f64>)>;

fn read_manifest(root: &Path) -> Result<Option<DepressionMap>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut map = BTreeMap::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row.map_err(|e| csv_error(&path, e))?;
        let file = row.file.replace('\\', "/");
        if map.insert(file.clone(), (row.class, row.depression)).is_some() {
            return Err(Error::Dataset(format!(
                "{} lists {file} more than once",
                path.display()
            )));
        }
    }
    Ok(Some(map))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

/// Partition by depression angle. Every sample must carry one of the two
/// angles; anything else is an error rather than silently dropped.
pub fn split_by_depression(
    samples: Vec<Sample>,
    train_deg: f64,
    test_deg: f64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        match s.depression_deg {
            Some(d) if d == train_deg => train.push(s),
            Some(d) if d == test_deg => test.push(s),
            Some(d) => {
                return Err(Error::Dataset(format!(
                    "{} has depression {d}, expected {train_deg} or {test_deg}",
                    s.source_id
                )))
            }
            None => {
                return Err(Error::Dataset(format!(
                    "{} has no depression angle; a manifest.csv is required to split",
                    s.source_id
                )))
            }
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------- subsampling

/// Draw `k` samples per class uniformly without replacement. Each class uses
/// its own random stream, so one class's draw does not depend on another's
/// size. Output is ordered by label, then by original position.
pub fn subsample_per_class(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k == 0 {
        return Err(Error::Config("per-class sample count must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    if by_class.is_empty() {
        return Err(Error::Dataset("cannot subsample an empty dataset".into()));
    }
    let mut out = Vec::with_capacity(k * by_class.len());
    for (&label, members) in &by_class {
        if members.len() < k {
            return Err(Error::ClassTooSmall {
                class: samples[members[0]].class_name.clone(),
                available: members.len(),
                requested: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label as u64);
        let mut picked = index::sample(&mut rng, members.len(), k).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|j| samples[members[j]].clone()));
    }
    Ok(out)
}

// ---------------------------------------------------------------- preprocessing

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Gray1,
    Replicate3,
}

impl ChannelMode {
    pub fn channels(self) -> usize {
        match self {
            ChannelMode::Gray1 => 1,
            ChannelMode::Replicate3 => 3,
        }
    }
}

impl FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray1" => Ok(ChannelMode::Gray1),
            "replicate3" => Ok(ChannelMode::Replicate3),
            other => Err(Error::Config(format!(
                "unknown channel mode '{other}' (expected gray1 or replicate3)"
            ))),
        }
    }
}

/// Bilinear resize with half-pixel centers; edges clamp.
pub fn resize_bilinear(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    if img.height == out_h && img.width == out_w {
        return img.clone();
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let s = ((dst as f32 + 0.5) * src_len as f32 / dst_len as f32 - 0.5)
            .clamp(0.0, (src_len - 1) as f32);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, s - lo as f32)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, img.width, out_w)).collect();
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, img.height, out_h);
        for &(x0, x1, fx) in &cols {
            let top = img.at(y0, x0) * (1.0 - fx) + img.at(y0, x1) * fx;
            let bottom = img.at(y1, x0) * (1.0 - fx) + img.at(y1, x1) * fx;
            pixels.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    GrayImage {
        height: out_h,
        width: out_w,
        pixels,
    }
}

/// Resize to `resolution × resolution`, standardize per image and lay out
/// as `[C, H, W]`.
pub fn preprocess<T: Scalar>(
    sample: &Sample,
    resolution: usize,
    mode: ChannelMode,
) -> Result<Tensor<T>> {
    if resolution < MIN_CHIP_SIZE {
        return Err(Error::Config(format!(
            "target resolution {resolution} is below {MIN_CHIP_SIZE}"
        )));
    }
    let resized = resize_bilinear(&sample.image, resolution, resolution);
    let n = resized.pixels.len() as f64;
    let mean = resized.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = resized
        .pixels
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(STD_FLOOR);
    let plane: Vec<T> = resized
        .pixels
        .iter()
        .map(|&v| T::lit((v as f64 - mean) / std))
        .collect();
    let c = mode.channels();
    let mut data = Vec::with_capacity(c * plane.len());
    for _ in 0..c {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[c, resolution, resolution], data)
}

// ---------------------------------------------------------------- synthetic

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub manifest: DatasetManifest,
}

#[derive(Clone, Debug)]
struct Scatterer {
    dx: f64,
    dy: f64,
    amplitude: f64,
}

pub fn synth_class_name(label: usize) -> String {
    format!("class_{label:02}")
}

/// Deterministic SAR-like chips: each class is a fixed constellation of
/// point scatterers, rendered at a random azimuth with small translation
/// jitter and multiplicative exponential speckle. Pixels are quantized to
/// 8 bits so that a written and reloaded dataset is identical to the
/// in-memory one.
pub fn synth_sar_generate(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    resolution: usize,
    seed: u64,
) -> Result<SynthDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!(
            "at least 2 classes required, got {num_classes}"
        )));
    }
    if resolution < MIN_CHIP_SIZE {
        return Err(Error::Config(format!(
            "resolution {resolution} is below {MIN_CHIP_SIZE}"
        )));
    }
    let mut layout_rng = ChaCha8Rng::seed_from_u64(seed);
    layout_rng.set_stream(0);
    let r = resolution as f64;
    let layouts: Vec<Vec<Scatterer>> = (0..num_classes)
        .map(|_| {
            let count = layout_rng.gen_range(5..=9);
            (0..count)
                .map(|_| Scatterer {
                    dx: layout_rng.gen_range(-0.3..0.3) * r,
                    dy: layout_rng.gen_range(-0.3..0.3) * r,
                    amplitude: layout_rng.gen_range(0.35..0.75),
                })
                .collect()
        })
        .collect();

    let render_split = |stream: u64, per_class: usize, depression: f64, tag: &str| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut out = Vec::with_capacity(per_class * num_classes);
        for (label, layout) in layouts.iter().enumerate() {
            for i in 0..per_class {
                let image = render_chip(layout, resolution, &mut rng);
                let class_name = synth_class_name(label);
                out.push(Sample {
                    image,
                    label,
                    source_id: format!("{class_name}/{tag}_{i:04}"),
                    class_name,
                    depression_deg: Some(depression),
                });
            }
        }
        out
    };
    let train = render_split(1, per_class_train, TRAIN_DEPRESSION, "train");
    let test = render_split(2, per_class_test, TEST_DEPRESSION, "test");
    let classes = (0..num_classes).map(synth_class_name).collect();
    let all: Vec<Sample> = train.iter().chain(&test).cloned().collect();
    let manifest = DatasetManifest::from_samples(classes, &all);
    Ok(SynthDataset {
        train,
        test,
        manifest,
    })
}

fn render_chip<R: Rng>(layout: &[Scatterer], resolution: usize, rng: &mut R) -> GrayImage {
    let r = resolution as f64;
    let sigma = r / 40.0;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let jx = rng.gen_range(-2.0..=2.0);
    let jy = rng.gen_range(-2.0..=2.0);
    let center = (r - 1.0) / 2.0;
    let points: Vec<(f64, f64, f64)> = layout
        .iter()
        .map(|s| {
            (
                center + s.dx * cos - s.dy * sin + jx,
                center + s.dx * sin + s.dy * cos + jy,
                s.amplitude,
            )
        })
        .collect();
    // blobs are negligible beyond 4σ
    let reach = 4.0 * sigma;
    let mut clean = vec![0.0f64; resolution * resolution];
    for &(px, py, amp) in &points {
        let y0 = (py - reach).floor().max(0.0) as usize;
        let y1 = ((py + reach).ceil() as usize).min(resolution - 1);
        let x0 = (px - reach).floor().max(0.0) as usize;
        let x1 = ((px + reach).ceil() as usize).min(resolution - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                clean[y * resolution + x] += amp * (-d2 * inv_two_sigma2).exp();
            }
        }
    }
    let pixels = clean
        .into_iter()
        .map(|v| {
            let speckle: f64 = Exp1.sample(rng);
            let level = quantize((v * speckle) as f32);
            level as f32 / 255.0
        })
        .collect();
    GrayImage {
        height: resolution,
        width: resolution,
        pixels,
    }
}

/// Write samples in the on-disk chip layout plus `manifest.csv`. Files are
/// named after each sample's source id.
pub fn write_chip_dataset(root: &Path, classes: &[String], samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for class in classes {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("{}.pgm", s.source_id);
        write_pgm(&s.image, &root.join(&file))?;
        rows.push(ManifestRow {
            file,
            class: s.class_name.clone(),
            depression: s.depression_deg,
        });
    }
    rows.sort_by(|a, b| a.file.cmp(&b.file));
    let path = root.join(MANIFEST_FILE);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| csv_error(&path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chip(label: usize, id: usize) -> Sample {
        Sample {
            image: GrayImage::constant(32, 32, 0.5),
            label,
            class_name: format!("c{label}"),
            depression_deg: None,
            source_id: format!("c{label}/{id}"),
        }
    }

    #[test]
    fn pgm_mid_gray() {
        let mut bytes = b"P5\n# comment\n32 32\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(128u8, 32 * 32));
        let img = parse_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert!(img.pixels.iter().all(|&v| (v - 0.50196).abs() < 1e-5));
    }

    #[test]
    fn pgm_errors_name_the_file() {
        let err = parse_pgm(b"P2\n2 2\n255\n0 0 0 0", Path::new("bad_chip.pgm")).unwrap_err();
        assert!(err.to_string().contains("bad_chip.pgm"), "{err}");
        let mut short = b"P5\n4 4\n255\n".to_vec();
        short.extend([0u8; 10]);
        assert!(parse_pgm(&short, Path::new("s.pgm")).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(2, 3, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let back = parse_pgm(&encode_pgm(&img), Path::new("r.pgm")).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn subsample_sizes_and_errors() {
        let samples: Vec<Sample> = (0..3).flat_map(|c| (0..5).map(move |i| chip(c, i))).collect();
        let out = subsample_per_class(&samples, 2, 1).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(subsample_per_class(&samples, 5, 9).unwrap(), samples);
        match subsample_per_class(&samples, 6, 0) {
            Err(Error::ClassTooSmall { class, .. }) => assert_eq!(class, "c0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preprocess_standardizes() {
        let pixels = (0..128 * 128).map(|i| ((i * 7) % 255) as f32 / 255.0).collect();
        let s = Sample {
            image: GrayImage::new(128, 128, pixels).unwrap(),
            ..chip(0, 0)
        };
        let t = preprocess::<f64>(&s, 64, ChannelMode::Gray1).unwrap();
        assert_eq!(t.dims(), &[1, 64, 64]);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_image_goes_to_zero() {
        let t = preprocess::<f32>(&chip(0, 0), 48, ChannelMode::Replicate3).unwrap();
        assert_eq!(t.dims(), &[3, 48, 48]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let r = resize_bilinear(&GrayImage::constant(40, 50, 0.3), 77, 33);
        assert!(r.pixels.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn replicate3_copies_channel() {
        let pixels = (0..40 * 40).map(|i| (i % 17) as f32 / 17.0).collect();
        let s = Sample {
            image: GrayImage::new(40, 40, pixels).unwrap(),
            ..chip(0, 0)
        };
        let t = preprocess::<f32>(&s, 32, ChannelMode::Replicate3).unwrap();
        let plane = 32 * 32;
        assert_eq!(t.data()[..plane], t.data()[plane..2 * plane]);
        assert_eq!(t.data()[..plane], t.data()[2 * plane..]);
    }

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_sar_generate(3, 4, 2, 32, 7).unwrap();
        let b = synth_sar_generate(3, 4, 2, 32, 7).unwrap();
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 6);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.manifest.train_counts, vec![4, 4, 4]);
        assert!(synth_sar_generate(1, 4, 2, 32, 7).is_err());
        let ids: HashSet<_> = a.train.iter().map(|s| &s.source_id).collect();
        assert!(a.test.iter().all(|s| !ids.contains(&s.source_id)));
    }

    #[test]
    fn split_requires_depression() {
        assert!(split_by_depression(vec![chip(0, 0)], 17.0, 15.0).is_err());
    }
}
