//! Image and dataset I/O: binary PGM/PPM codecs, a `labels.csv` directory
//! loader, and a deterministic synthetic age-image generator.
//!
//! The synthetic images are "wrinkle proxies": a smooth random background,
//! a number of thin dark arcs that grows linearly with age, and per-pixel
//! noise. The age signal is therefore local and irregular — exactly the
//! kind of structure a patch graph can pick up — while staying simple
//! enough that a pixel-counting oracle can certify the dataset carries
//! signal (see the learnability test).

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

// ── PNM codec ────────────────────────────────────────────────────────────

struct Scan<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn is_pnm_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

impl<'a> Scan<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b if is_pnm_ws(b) => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(&'a [u8], usize)> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !is_pnm_ws(self.bytes[self.pos])
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                message: format!("unexpected end of header while reading {what}"),
            });
        }
        Ok((&self.bytes[start..self.pos], start))
    }

    fn uint(&mut self, what: &str) -> Result<(usize, usize)> {
        let (tok, off) = self.token(what)?;
        let s = std::str::from_utf8(tok).ok().and_then(|s| s.parse::<usize>().ok());
        match s {
            Some(v) => Ok((v, off)),
            None => Err(Error::Parse {
                offset: off,
                message: format!("invalid {what} {:?}", String::from_utf8_lossy(tok)),
            }),
        }
    }
}

/// Decodes a binary PGM (`P5`, gray → `[H, W]`) or PPM (`P6`, color →
/// `[H, W, 3]`) image. Pixel values are kept raw (0..=maxval), matching
/// what [`patchify`](crate::patchgraph::patchify) expects.
pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut s = Scan { bytes, pos: 0 };
    let (magic, _) = s.token("magic")?;
    let channels = match magic {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected \"P5\" or \"P6\"",
                    String::from_utf8_lossy(other)
                ),
            })
        }
    };
    let (width, woff) = s.uint("width")?;
    let (height, hoff) = s.uint("height")?;
    let (maxval, moff) = s.uint("maxval")?;
    if width == 0 {
        return Err(Error::Parse { offset: woff, message: "width must be positive".into() });
    }
    if height == 0 {
        return Err(Error::Parse { offset: hoff, message: "height must be positive".into() });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse {
            offset: moff,
            message: format!("maxval {maxval} outside 1..=255"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if s.pos >= bytes.len() || !is_pnm_ws(bytes[s.pos]) {
        return Err(Error::Parse {
            offset: s.pos,
            message: "expected a single whitespace byte after maxval".into(),
        });
    }
    s.pos += 1;
    let need = width * height * channels;
    let have = bytes.len() - s.pos;
    if have < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated pixel data: wanted {need} bytes, got {have}"),
        });
    }
    if have > need {
        return Err(Error::Parse {
            offset: s.pos + need,
            message: format!("{} trailing bytes after pixel data", have - need),
        });
    }
    let raster = &bytes[s.pos..];
    if let Some(bad) = raster.iter().position(|&b| b as usize > maxval) {
        return Err(Error::Parse {
            offset: s.pos + bad,
            message: format!("pixel value {} exceeds maxval {maxval}", raster[bad]),
        });
    }
    let data: Vec<f64> = raster.iter().map(|&b| b as f64).collect();
    let shape = if channels == 1 { vec![height, width] } else { vec![height, width, 3] };
    Tensor::new(shape, data)
}

/// Encodes an image tensor (`[H, W]`/`[H, W, 1]` → P5, `[H, W, 3]` → P6)
/// into canonical bytes: `P5\n{w} {h}\n255\n` followed by the raster.
/// Every value must already be an integer in 0..=255.
pub fn pnm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = match image.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, 1] => (*h, *w, 1),
        [h, w, 3] => (*h, *w, 3),
        other => {
            return Err(Error::Argument(format!(
                "cannot encode shape {other:?} as PGM/PPM (expected [H,W], [H,W,1] or [H,W,3])"
            )))
        }
    };
    let mut raster = Vec::with_capacity(h * w * c);
    for (i, &v) in image.data().iter().enumerate() {
        let r = v.round();
        if !v.is_finite() || (v - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) {
            return Err(Error::Argument(format!(
                "pixel {i} is {v}, not an integer in 0..=255"
            )));
        }
        raster.push(r as u8);
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&raster);
    Ok(out)
}

/// Reads a PGM/PPM file (see [`parse_pnm`]).
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_pnm(&fs::read(path)?)
}

/// Writes a canonical PGM/PPM file (see [`pnm_bytes`]).
pub fn write_pnm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, pnm_bytes(image)?)?;
    Ok(())
}

// ── datasets ─────────────────────────────────────────────────────────────

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Directory,
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub age: f64,
}

/// An ordered collection of labeled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads images listed in a `filename,age` CSV (header required), resolving
/// filenames against `dir`. Sample order follows the CSV.
pub fn load_dataset(dir: impl AsRef<Path>, labels_csv: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(labels_csv.as_ref())?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "filename,age" => {}
        Some((_, header)) => {
            return Err(Error::Load(format!(
                "labels header is {header:?}, expected \"filename,age\""
            )))
        }
        None => return Err(Error::Load("labels file is empty".into())),
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, age_str) = line.rsplit_once(',').ok_or_else(|| {
            Error::Load(format!("labels line {}: missing comma in {line:?}", lineno + 1))
        })?;
        let age: f64 = age_str.trim().parse().map_err(|_| {
            Error::Load(format!(
                "labels line {}: cannot parse age {:?}",
                lineno + 1,
                age_str.trim()
            ))
        })?;
        let image = read_pnm(dir.join(name.trim()))?;
        samples.push(Sample { name: name.trim().to_string(), image, age });
    }
    Ok(Dataset { samples, provenance: Provenance::Directory })
}

/// Writes every sample as a canonical PGM/PPM plus a `labels.csv`, the
/// layout [`load_dataset`] reads back.
pub fn write_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut labels = String::from("filename,age\n");
    for s in &dataset.samples {
        write_pnm(dir.join(&s.name), &s.image)?;
        labels.push_str(&format!("{},{}\n", s.name, s.age));
    }
    fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

// ── synthetic generator ──────────────────────────────────────────────────

/// Maximum arc count, reached at the oldest age.
pub const ARC_COUNT_MAX: usize = 24;
/// Pixels traced per arc (roughly one per step along the circle).
const ARC_STEPS: usize = 10;
/// Gray value arcs are drawn with, well below the background range.
const ARC_VALUE: f64 = 30.0;

/// Arcs drawn for a given age: `round((y - 16) / 61 · 24)`. Zero at the
/// young end of the range, [`ARC_COUNT_MAX`] at the old end.
pub fn arc_count(age: f64) -> usize {
    (((age - 16.0) / 61.0) * ARC_COUNT_MAX as f64).round() as usize
}

/// Generates `n` grayscale age images deterministically from a seed. Each
/// sample draws an age uniformly in [16, 77], renders a smooth background
/// (bilinear blend of four corner levels in [100, 180]), traces
/// [`arc_count`] thin dark arcs at random positions and curvatures, adds
/// uniform noise in [−8, 8], clamps to [0, 255], and rounds so the image
/// survives a PGM round trip unchanged.
pub fn synth_dataset(n: usize, seed: u64, size: (usize, usize)) -> Result<Dataset> {
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Argument(format!(
            "synthetic images must be at least 8x8, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let age = rng.gen_range(16.0..=77.0);

        let c00 = rng.gen_range(100.0..=180.0);
        let c01 = rng.gen_range(100.0..=180.0);
        let c10 = rng.gen_range(100.0..=180.0);
        let c11 = rng.gen_range(100.0..=180.0);
        let mut img = vec![0.0; h * w];
        for r in 0..h {
            let fy = if h > 1 { r as f64 / (h - 1) as f64 } else { 0.0 };
            for c in 0..w {
                let fx = if w > 1 { c as f64 / (w - 1) as f64 } else { 0.0 };
                let top = c00 * (1.0 - fx) + c01 * fx;
                let bottom = c10 * (1.0 - fx) + c11 * fx;
                img[r * w + c] = top * (1.0 - fy) + bottom * fy;
            }
        }

        // Each arc stays fully in frame (center at least one radius from
        // every edge) and is traced until it has set ARC_STEPS *new* dark
        // pixels, so the dark-pixel count tracks the arc count tightly and
        // the pixel-counting oracle below can certify the signal.
        for _ in 0..arc_count(age) {
            let max_r = (h.min(w) as f64 / 4.0).max(2.0);
            let radius = rng.gen_range(2.0_f64.min(max_r)..=max_r);
            let cx = rng.gen_range(radius..=(w - 1) as f64 - radius);
            let cy = rng.gen_range(radius..=(h - 1) as f64 - radius);
            let mut theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let step = if rng.gen::<bool>() { 1.0 } else { -1.0 } / radius;
            let mut drawn = 0;
            let mut guard = 0;
            while drawn < ARC_STEPS && guard < 4 * ARC_STEPS {
                let px = (cx + radius * theta.cos()).round() as usize;
                let py = (cy + radius * theta.sin()).round() as usize;
                if img[py * w + px] != ARC_VALUE {
                    img[py * w + px] = ARC_VALUE;
                    drawn += 1;
                }
                theta += step;
                guard += 1;
            }
        }

        for v in &mut img {
            *v = (*v + rng.gen_range(-8.0..=8.0)).clamp(0.0, 255.0).round();
        }

        samples.push(Sample {
            name: format!("img_{idx:04}.pgm"),
            image: Tensor::new(vec![h, w], img)?,
            age,
        });
    }
    Ok(Dataset { samples, provenance: Provenance::Synthetic })
}
