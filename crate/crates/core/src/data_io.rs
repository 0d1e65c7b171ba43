//! Dataset loaders and image preprocessing.
//!
//! All loaders produce `(N, C, H, W)` tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// FER2013 class names in label order.
pub const FER_CLASSES: [&str; 7] = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"];
pub const FER_SIDE: usize = 48;

/// Images with labels and class names.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl DatasetBatch {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let s = images.dims4()?;
        if labels.len() != s.n {
            return Err(Error::shape(format!("{} labels for {} images", labels.len(), s.n)));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::BadLabel {
                label,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            out.extend_from_slice(&data[i * per..(i + 1) * per]);
        }
        let mut s = shape.to_vec();
        s[0] = indices.len();
        let images = Tensor::from_vec(s, out).expect("gathered rows are finite");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Same data with images passed through [`preprocess`].
    pub fn preprocessed(&self, target: (usize, usize), channels: usize) -> Result<Self> {
        Ok(Self {
            images: preprocess(&self.images, target, channels)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UsageFilter {
    Training,
    PublicTest,
    PrivateTest,
    All,
}

impl UsageFilter {
    fn accepts(self, usage: &str) -> bool {
        match self {
            Self::All => true,
            Self::Training => usage == "Training",
            Self::PublicTest => usage == "PublicTest",
            Self::PrivateTest => usage == "PrivateTest",
        }
    }
}

impl fmt::Display for UsageFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Training => "training",
            Self::PublicTest => "publictest",
            Self::PrivateTest => "privatetest",
            Self::All => "all",
        })
    }
}

impl FromStr for UsageFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "training" | "train" => Ok(Self::Training),
            "publictest" => Ok(Self::PublicTest),
            "privatetest" => Ok(Self::PrivateTest),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown usage filter '{other}'"))),
        }
    }
}

/// Parses FER2013 CSV text.
///
/// Row numbers in errors are 1-based file lines, so the header is row 1 and
/// the first image is row 2.
pub fn parse_fer2013_csv(text: &str, filter: UsageFilter) -> Result<DatasetBatch> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
    if header != "emotion,pixels,Usage" {
        return Err(Error::Parse {
            row: 1,
            msg: format!("expected header 'emotion,pixels,Usage', got '{header}'"),
        });
    }
    let plane = FER_SIDE * FER_SIDE;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { row, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("label '{}' is not an integer", fields[0])))?;
        if label >= FER_CLASSES.len() {
            return Err(bad(format!("label {label} is outside 0..=6")));
        }
        let usage = fields[2].trim();
        let pixels: Vec<&str> = fields[1].split_whitespace().collect();
        if pixels.len() != plane {
            return Err(bad(format!("expected {plane} pixels, got {}", pixels.len())));
        }
        let values = pixels
            .iter()
            .map(|p| p.parse::<u8>().map(|v| v as f64 / 255.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("pixels must be integers in 0..=255".into()))?;
        if filter.accepts(usage) {
            data.extend(values);
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("no FER2013 rows match {filter:?}")));
    }
    let images = Tensor::from_vec(vec![labels.len(), 1, FER_SIDE, FER_SIDE], data)?;
    DatasetBatch::new(images, labels, FER_CLASSES.iter().map(|s| s.to_string()).collect())
}

pub fn load_fer2013_csv(path: &Path, filter: UsageFilter) -> Result<DatasetBatch> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_fer2013_csv(&text, filter)
}

/// Writes `(N, 1, 48, 48)` images back to FER2013 CSV, one usage per row.
pub fn to_fer2013_csv(batch: &DatasetBatch, usages: &[&str]) -> Result<String> {
    let s = batch.images.dims4()?;
    if (s.c, s.h, s.w) != (1, FER_SIDE, FER_SIDE) {
        return Err(Error::shape(format!("FER2013 rows need (N, 1, 48, 48) images, got {s}")));
    }
    if usages.len() != s.n {
        return Err(Error::shape(format!("{} usages for {} rows", usages.len(), s.n)));
    }
    let mut out = String::from("emotion,pixels,Usage\n");
    for (i, chunk) in batch.images.data().chunks(s.plane()).enumerate() {
        let pixels: Vec<String> = chunk.iter().map(|v| ((v * 255.0).round() as u8).to_string()).collect();
        out.push_str(&format!("{},{},{}\n", batch.labels[i], pixels.join(" "), usages[i]));
    }
    Ok(out)
}

/// Decodes a binary (P5) PGM with maxval 255 into `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Parse {
        row: 0,
        msg: format!("PGM: {msg}"),
    };
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if tokens[0] != "P5" {
        return Err(bad(&format!("only binary P5 is supported, got '{}'", tokens[0])));
    }
    let num = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad header number '{t}'")));
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if maxval != 255 {
        return Err(bad(&format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| bad("raster is truncated"))?;
    if bytes.len() != pos + w * h {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((w, h, raster.to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Loads `root/<class>/<file>.pgm`. Classes and files are taken in sorted
/// order and every image is resized to `target` (one channel).
pub fn load_pgm_dir(root: &Path, target: (usize, usize)) -> Result<DatasetBatch> {
    let read_dir = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut entries = fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(p, err)))
            .collect::<Result<Vec<_>>>()?;
        entries.sort();
        Ok(entries)
    };
    let class_dirs: Vec<_> = read_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut class_names = Vec::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for dir in &class_dirs {
        let label = class_names.len();
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for file in read_dir(dir)? {
            if file.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let (w, h, px) = parse_pgm(&bytes).map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse {
                    row: labels.len() + 1,
                    msg: format!("{}: {msg}", file.display()),
                },
                other => other,
            })?;
            let img = Tensor::from_vec(vec![1, 1, h, w], px.iter().map(|&v| v as f64 / 255.0).collect())?;
            data.extend(preprocess(&img, target, 1)?.into_data());
            labels.push(label);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("no .pgm images under {}", root.display())));
    }
    let images = Tensor::from_vec(vec![labels.len(), 1, target.0, target.1], data)?;
    DatasetBatch::new(images, labels, class_names)
}

/// Bilinear resize to `target` plus 1 -> 3 channel replication.
///
/// Output pixel `d` samples the source at `(d + 0.5) * src / dst - 0.5`,
/// clamped to the valid range, on each axis. Resizing to the current size is
/// an exact copy.
pub fn preprocess(images: &Tensor, target: (usize, usize), channels: usize) -> Result<Tensor> {
    let s = images.dims4()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    if channels != s.c && !(s.c == 1 && channels == 3) {
        return Err(Error::Config(format!("cannot convert {} channels to {channels}", s.c)));
    }
    let resized = if (s.h, s.w) == (th, tw) {
        images.clone()
    } else {
        let ys = sample_points(s.h, th);
        let xs = sample_points(s.w, tw);
        let mut out = Vec::with_capacity(s.n * s.c * th * tw);
        for plane in images.data().chunks(s.plane()) {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * s.w + x0] * (1.0 - fx) + plane[y0 * s.w + x1] * fx;
                    let bottom = plane[y1 * s.w + x0] * (1.0 - fx) + plane[y1 * s.w + x1] * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Tensor::from_vec(vec![s.n, s.c, th, tw], out)?
    };
    if channels == s.c {
        return Ok(resized);
    }
    let plane = th * tw;
    let mut out = Vec::with_capacity(s.n * 3 * plane);
    for img in resized.data().chunks(plane) {
        for _ in 0..3 {
            out.extend_from_slice(img);
        }
    }
    Tensor::from_vec(vec![s.n, 3, th, tw], out)
}

/// Source indices and blend weight for each destination coordinate.
fn sample_points(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let p = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

/// Gaussian-blob classification set with noise of standard deviation 0.1.
pub fn synthetic_dataset(classes: usize, per_class: usize, hw: (usize, usize), seed: u64) -> Result<DatasetBatch> {
    synthetic_dataset_with_noise(classes, per_class, hw, seed, 0.1)
}

/// One-channel images; class `k` is a bright blob centred on a circle at
/// angle `2 pi k / classes`, plus `N(0, noise^2)` pixel noise, clipped to
/// `[0, 1]`. Samples cycle through the classes in order.
pub fn synthetic_dataset_with_noise(
    classes: usize,
    per_class: usize,
    hw: (usize, usize),
    seed: u64,
    noise: f64,
) -> Result<DatasetBatch> {
    if classes < 2 {
        return Err(Error::Config(format!("at least 2 classes required, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::EmptyDataset("zero samples per class".into()));
    }
    let (h, w) = hw;
    if h == 0 || w == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let blob = 0.12 * h.min(w) as f64;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / classes as f64;
            let cy = (0.5 + 0.3 * angle.sin()) * h as f64;
            let cx = (0.5 + 0.3 * angle.cos()) * w as f64;
            (0..h * w)
                .map(|i| {
                    let dy = (i / w) as f64 + 0.5 - cy;
                    let dx = (i % w) as f64 + 0.5 - cx;
                    (-(dy * dy + dx * dx) / (2.0 * blob * blob)).exp()
                })
                .collect()
        })
        .collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let mut rng = SplitMix64::stream(seed, i as u64);
        data.extend(templates[k].iter().map(|&v| (v + noise * rng.next_normal()).clamp(0.0, 1.0)));
        labels.push(k);
    }
    let names = (0..classes).map(|k| format!("class{k}")).collect();
    DatasetBatch::new(Tensor::from_vec(vec![n, 1, h, w], data)?, labels, names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: usize, pixel: &str, count: usize, usage: &str) -> String {
        format!("{label},{},{usage}\n", vec![pixel; count].join(" "))
    }

    #[test]
    fn black_image_row() {
        let text = format!("emotion,pixels,Usage\n{}", row(3, "0", 2304, "Training"));
        let b = parse_fer2013_csv(&text, UsageFilter::All).unwrap();
        assert_eq!(b.images.shape(), &[1, 1, 48, 48]);
        assert!(b.images.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.labels, vec![3]);
    }

    #[test]
    fn short_row_reports_line() {
        let text = format!(
            "emotion,pixels,Usage\n{}{}",
            row(0, "1", 2304, "Training"),
            row(1, "1", 2303, "Training")
        );
        assert!(matches!(
            parse_fer2013_csv(&text, UsageFilter::All),
            Err(Error::Parse { row: 3, .. })
        ));
    }

    #[test]
    fn usage_filter() {
        let mut text = String::from("emotion,pixels,Usage\n");
        for i in 0..5 {
            text += &row(i, "7", 2304, "Training");
        }
        for i in 0..2 {
            text += &row(i, "9", 2304, "PublicTest");
        }
        assert_eq!(parse_fer2013_csv(&text, UsageFilter::Training).unwrap().len(), 5);
        assert_eq!(parse_fer2013_csv(&text, UsageFilter::PublicTest).unwrap().len(), 2);
        assert_eq!(parse_fer2013_csv(&text, UsageFilter::All).unwrap().len(), 7);
        assert!(matches!(
            parse_fer2013_csv(&text, UsageFilter::PrivateTest),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn bad_label_and_pixel() {
        let text = format!("emotion,pixels,Usage\n{}", row(7, "0", 2304, "Training"));
        assert!(matches!(parse_fer2013_csv(&text, UsageFilter::All), Err(Error::Parse { row: 2, .. })));
        let text = format!("emotion,pixels,Usage\n{}", row(1, "256", 2304, "Training"));
        assert!(matches!(parse_fer2013_csv(&text, UsageFilter::All), Err(Error::Parse { row: 2, .. })));
        let text = format!("emotion,pixels,Usage\n{}", row(1, "x", 2304, "Training"));
        assert!(matches!(parse_fer2013_csv(&text, UsageFilter::All), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn pgm_header_rules() {
        let ok = encode_pgm(2, 1, &[0, 255]);
        assert_eq!(parse_pgm(&ok).unwrap(), (2, 1, vec![0, 255]));
        let commented = b"P5\n# made by hand\n2 1\n255\n\x00\xff".to_vec();
        assert_eq!(parse_pgm(&commented).unwrap().2, vec![0, 255]);
        assert!(parse_pgm(b"P2\n2 1\n255\n0 255\n").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn bilinear_columns() {
        let x = Tensor::new(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = preprocess(&x, (4, 4), 1).unwrap();
        for r in y.data().chunks(4) {
            assert_eq!(r, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn constant_and_identity() {
        let c = Tensor::full(&[2, 1, 48, 48], 0.4);
        let y = preprocess(&c, (80, 80), 3).unwrap();
        assert_eq!(y.shape(), &[2, 3, 80, 80]);
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let x = Tensor::new(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.5]).unwrap();
        assert_eq!(preprocess(&x, (2, 2), 1).unwrap(), x);
        assert!(preprocess(&Tensor::zeros(&[1, 3, 4, 4]), (2, 2), 1).is_err());
    }

    #[test]
    fn synthetic_contract() {
        let d = synthetic_dataset(7, 10, (32, 32), 1).unwrap();
        assert_eq!(d.len(), 70);
        for k in 0..7 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d, synthetic_dataset(7, 10, (32, 32), 1).unwrap());
        assert_ne!(d, synthetic_dataset(7, 10, (32, 32), 2).unwrap());
        assert!(synthetic_dataset(1, 10, (32, 32), 1).is_err());
    }
}
