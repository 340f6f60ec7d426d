//! Synthetic segmentation data, arbitrary-angle image rotation, and PGM
//! file I/O.
//!
//! The generator draws textured geometric shapes on a dark background and
//! is a pure function of its arguments, so a dataset can be reproduced from
//! its seed alone. Images are quantized to 256 gray levels at generation
//! time, which makes a save/load round trip lossless.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Scalar, Shape, Tensor};

/// One grayscale image with its per-pixel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<E: Scalar> {
    pub image: Tensor<E>,
    pub mask: LabelMap,
    pub id: String,
}

/// Converts a label map into a `(1, 1, H, W)` tensor of label values, for
/// use as a training target.
pub fn mask_to_tensor<E: Scalar>(mask: &LabelMap) -> Tensor<E> {
    Tensor::from_fn(Shape::new(1, 1, mask.height, mask.width), |_, _, y, x| {
        E::from_f64(mask.get(y, x) as f64)
    })
}

fn quantize_unit<E: Scalar>(v: E) -> u8 {
    let v = v.to_f64().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

fn gray_to_unit<E: Scalar>(v: u8) -> E {
    E::from_f64(v as f64 / 255.0)
}

struct Canvas {
    size: usize,
    gray: Vec<f64>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: i64, x: i64, value: f64, class: u8) {
        if y >= 0 && x >= 0 && (y as usize) < self.size && (x as usize) < self.size {
            let idx = y as usize * self.size + x as usize;
            self.gray[idx] = value;
            self.labels[idx] = class;
        }
    }
}

/// Oriented sinusoidal brightness pattern used to fill shape interiors.
struct Texture {
    base: f64,
    amplitude: f64,
    frequency: f64,
    cos: f64,
    sin: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha20Rng) -> Self {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Texture {
            base: rng.random_range(0.55..0.85),
            amplitude: rng.random_range(0.08..0.15),
            frequency: rng.random_range(0.5..1.5),
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let phase = self.frequency * (x as f64 * self.cos + y as f64 * self.sin);
        self.base + self.amplitude * phase.sin()
    }
}

fn draw_ellipse(canvas: &mut Canvas, rng: &mut ChaCha20Rng, class: u8) {
    let n = canvas.size as f64;
    let cy = rng.random_range(0.2 * n..0.8 * n);
    let cx = rng.random_range(0.2 * n..0.8 * n);
    let a = rng.random_range(n / 8.0..n / 3.0).max(1.5);
    let b = rng.random_range(n / 8.0..n / 3.0).max(1.5);
    let texture = Texture::random(rng);
    for y in 0..canvas.size {
        for x in 0..canvas.size {
            let dy = (y as f64 - cy) / b;
            let dx = (x as f64 - cx) / a;
            if dy * dy + dx * dx <= 1.0 {
                canvas.paint(y as i64, x as i64, texture.at(y, x), class);
            }
        }
    }
}

fn draw_rectangle(canvas: &mut Canvas, rng: &mut ChaCha20Rng, class: u8) {
    let n = canvas.size;
    let h = rng.random_range(n / 6..n / 2).max(2);
    let w = rng.random_range(n / 6..n / 2).max(2);
    let top = rng.random_range(0..n - h);
    let left = rng.random_range(0..n - w);
    let texture = Texture::random(rng);
    for y in top..top + h {
        for x in left..left + w {
            canvas.paint(y as i64, x as i64, texture.at(y, x), class);
        }
    }
}

const COMPASS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

fn draw_polyline(canvas: &mut Canvas, rng: &mut ChaCha20Rng, class: u8) {
    let n = canvas.size as i64;
    let mut y = rng.random_range(0..n);
    let mut x = rng.random_range(0..n);
    let brightness = rng.random_range(0.85..1.0);
    let segments = rng.random_range(3..=6);
    canvas.paint(y, x, brightness, class);
    for _ in 0..segments {
        let (dy, dx) = COMPASS[rng.random_range(0..COMPASS.len())];
        let steps = rng.random_range(2..=(canvas.size / 2).max(2));
        for _ in 0..steps {
            y = (y + dy).clamp(0, n - 1);
            x = (x + dx).clamp(0, n - 1);
            canvas.paint(y, x, brightness, class);
        }
    }
}

/// Generates `count` textured-shape samples of extent `size`-by-`size` with
/// labels in `0..classes` (0 is background). The result is a pure function
/// of the arguments. Every sample's foreground covers strictly between 1%
/// and 99% of the pixels.
pub fn gen_shapes<E: Scalar>(
    seed: u64,
    count: usize,
    size: usize,
    classes: u8,
) -> Result<Vec<Sample<E>>> {
    if size < 8 {
        return Err(Error::InvalidConfig(format!(
            "shape images need size >= 8, got {size}"
        )));
    }
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "shape labels need at least 2 classes, got {classes}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut accepted = None;
        for _ in 0..64 {
            let background = rng.random_range(0.05..0.2);
            let mut canvas = Canvas {
                size,
                gray: vec![background; size * size],
                labels: vec![0; size * size],
            };
            let shapes = rng.random_range(1..=3);
            for _ in 0..shapes {
                let class = rng.random_range(1..classes);
                match rng.random_range(0..3) {
                    0 => draw_ellipse(&mut canvas, &mut rng, class),
                    1 => draw_rectangle(&mut canvas, &mut rng, class),
                    _ => draw_polyline(&mut canvas, &mut rng, class),
                }
            }
            let foreground = canvas.labels.iter().filter(|&&v| v != 0).count();
            let fraction = foreground as f64 / (size * size) as f64;
            if fraction > 0.01 && fraction < 0.99 {
                accepted = Some(canvas);
                break;
            }
        }
        let canvas = accepted.ok_or_else(|| {
            Error::InvalidConfig("shape generator kept missing the coverage band".to_string())
        })?;
        let image = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, y, x| {
            gray_to_unit::<E>(quantize_unit(E::from_f64(canvas.gray[y * size + x])))
        });
        let mask = LabelMap::from_vec(size, size, canvas.labels)?;
        samples.push(Sample {
            image,
            mask,
            id: format!("{index:04}"),
        });
    }
    Ok(samples)
}

/// How [`rotate_arbitrary`] samples between pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

/// What [`rotate_arbitrary`] reads where the source position falls outside
/// the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fill {
    Zero,
    Reflect,
}

/// Reflects an index into `0..n` symmetrically about the pixel edges.
fn reflect_index(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Source position in the input for output pixel `(y, x)` after a
/// counterclockwise rotation by `rad` about the plane center. At 90 degrees
/// this lands exactly on the quarter-turn correspondence.
fn source_position(y: usize, x: usize, h: usize, w: usize, rad: f64) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let dy = y as f64 - cy;
    let dx = x as f64 - cx;
    let (sin, cos) = rad.sin_cos();
    let sx = cx + cos * dx - sin * dy;
    let sy = cy + sin * dx + cos * dy;
    (sy, sx)
}

/// Rotates every plane of `input` counterclockwise by `degrees` about its
/// center, keeping the extent. Zero degrees is an exact identity.
pub fn rotate_arbitrary<E: Scalar>(
    input: &Tensor<E>,
    degrees: f64,
    interpolation: Interpolation,
    fill: Fill,
) -> Tensor<E> {
    if degrees == 0.0 {
        return input.clone();
    }
    let s = input.shape();
    let rad = degrees.to_radians();
    let fetch = |b: usize, c: usize, y: i64, x: i64| -> E {
        if y >= 0 && x >= 0 && (y as usize) < s.height && (x as usize) < s.width {
            input.get(b, c, y as usize, x as usize)
        } else {
            match fill {
                Fill::Zero => E::zero(),
                Fill::Reflect => input.get(
                    b,
                    c,
                    reflect_index(y, s.height),
                    reflect_index(x, s.width),
                ),
            }
        }
    };
    Tensor::from_fn(s, |b, c, y, x| {
        let (sy, sx) = source_position(y, x, s.height, s.width, rad);
        match interpolation {
            Interpolation::Nearest => {
                fetch(b, c, sy.round() as i64, sx.round() as i64)
            }
            Interpolation::Bilinear => {
                let fy = sy.floor();
                let fx = sx.floor();
                let wy = E::from_f64(sy - fy);
                let wx = E::from_f64(sx - fx);
                let (y0, x0) = (fy as i64, fx as i64);
                let one = E::one();
                let top = fetch(b, c, y0, x0) * (one - wx) + fetch(b, c, y0, x0 + 1) * wx;
                let bottom =
                    fetch(b, c, y0 + 1, x0) * (one - wx) + fetch(b, c, y0 + 1, x0 + 1) * wx;
                top * (one - wy) + bottom * wy
            }
        }
    })
}

/// Rotates a label map counterclockwise by `degrees` with nearest-neighbor
/// sampling. Returns the rotated map and a per-pixel validity mask: pixels
/// whose source fell outside the input get label 0 and `false`.
pub fn rotate_labels_arbitrary(labels: &LabelMap, degrees: f64) -> (LabelMap, Vec<bool>) {
    if degrees == 0.0 {
        return (labels.clone(), vec![true; labels.data().len()]);
    }
    let (h, w) = (labels.height, labels.width);
    let rad = degrees.to_radians();
    let mut out = LabelMap::zeros(h, w);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source_position(y, x, h, w, rad);
            let ry = sy.round() as i64;
            let rx = sx.round() as i64;
            if ry >= 0 && rx >= 0 && (ry as usize) < h && (rx as usize) < w {
                out.set(y, x, labels.get(ry as usize, rx as usize));
                valid[y * w + x] = true;
            }
        }
    }
    (out, valid)
}

/// Writes an 8-bit grayscale image in binary PGM (P5) format.
pub fn write_pgm(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::LengthMismatch {
            expected: height * width,
            got: data.len(),
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PGM (P5) image. Header comments are skipped; the text
/// variant (P2) and depths above 8 bits are rejected.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::BadFileFormat("truncated pgm header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(&bytes)?;
    if magic == "P2" {
        return Err(Error::BadFileFormat(
            "plain-text pgm (P2) is not supported, use binary P5".to_string(),
        ));
    }
    if magic != "P5" {
        return Err(Error::BadFileFormat(format!(
            "expected pgm magic P5, got {magic:?}"
        )));
    }
    let parse = |s: String| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::BadFileFormat(format!("bad pgm header number {s:?}")))
    };
    let width = parse(token(&bytes)?)?;
    let height = parse(token(&bytes)?)?;
    let maxval = parse(token(&bytes)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::BadFileFormat(format!(
            "pgm depth {maxval} is outside the 8-bit range"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::BadFileFormat("missing pgm header terminator".to_string()));
    }
    pos += 1;
    let need = height * width;
    if bytes.len() < pos + need {
        return Err(Error::BadFileFormat(format!(
            "pgm payload holds {} bytes, header promises {need}",
            bytes.len() - pos
        )));
    }
    Ok((height, width, bytes[pos..pos + need].to_vec()))
}

/// Description of a stored dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub size: usize,
    pub classes: u8,
    pub ids: Vec<String>,
}

/// Writes samples as `<id>.img.pgm` / `<id>.mask.pgm` pairs plus a
/// `manifest.json`. The manifest is written last, so its presence marks a
/// complete directory.
pub fn save_dataset<E: Scalar>(
    dir: &Path,
    seed: u64,
    size: usize,
    classes: u8,
    samples: &[Sample<E>],
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut ids = Vec::with_capacity(samples.len());
    for sample in samples {
        let s = sample.image.shape();
        if s.height != size || s.width != size {
            return Err(Error::ShapeMismatch {
                context: "dataset sample extent",
                expected: format!("{size}x{size}"),
                got: format!("{}x{}", s.width, s.height),
            });
        }
        let gray: Vec<u8> = sample.image.data().iter().map(|&v| quantize_unit(v)).collect();
        write_pgm(&dir.join(format!("{}.img.pgm", sample.id)), s.height, s.width, &gray)?;
        write_pgm(
            &dir.join(format!("{}.mask.pgm", sample.id)),
            sample.mask.height,
            sample.mask.width,
            sample.mask.data(),
        )?;
        ids.push(sample.id.clone());
    }
    let manifest = DatasetManifest {
        seed,
        size,
        classes,
        ids,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset<E: Scalar>(dir: &Path) -> Result<(DatasetManifest, Vec<Sample<E>>)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        let (ih, iw, gray) = read_pgm(&dir.join(format!("{id}.img.pgm")))?;
        let (mh, mw, labels) = read_pgm(&dir.join(format!("{id}.mask.pgm")))?;
        if (ih, iw) != (mh, mw) {
            return Err(Error::ShapeMismatch {
                context: "mask extent",
                expected: format!("{iw}x{ih}"),
                got: format!("{mw}x{mh}"),
            });
        }
        if labels.iter().any(|&v| v >= manifest.classes) {
            return Err(Error::InvalidLabels(format!(
                "sample {id} holds a label outside 0..{}",
                manifest.classes
            )));
        }
        let image = Tensor::from_fn(Shape::new(1, 1, ih, iw), |_, _, y, x| {
            gray_to_unit::<E>(gray[y * iw + x])
        });
        let mask = LabelMap::from_vec(mh, mw, labels)?;
        samples.push(Sample {
            image,
            mask,
            id: id.clone(),
        });
    }
    Ok((manifest, samples))
}
