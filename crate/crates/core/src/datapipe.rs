//! Image ingestion and the shifted square crop.
//!
//! A source image is resized so its shorter side equals the training size,
//! a position map is built for the whole resized image at token resolution,
//! and one square window is cut from both at the same (patch-aligned) offset.
//! The crop therefore carries the coordinates it had inside the full frame.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_camera, make_position_map, CameraTransform, PositionMap};
use crate::seed;
use crate::textcond::{Tokenizer, COLORS, PLACES, SHAPES};

/// Planar `[C, H, W]` pixels, normally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    /// Rows `[y0, y0+h)` and columns `[x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// 8-bit values mapped to `[-1, 1]`.
    pub fn from_rgb8(img: &image::RgbImage) -> Result<Image> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w == 0 || h == 0 {
            return Err(Error::InvalidImage("image has no pixels".into()));
        }
        let mut out = Image::filled(3, h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, normalize(p.0[c]));
            }
        }
        Ok(out)
    }

    /// Clamps to `[-1, 1]` and quantizes. Single-channel images export as gray.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 && self.channels != 1 {
            return Err(Error::InvalidImage(format!("cannot export {} channels as RGB", self.channels)));
        }
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            for c in 0..3 {
                let src = if self.channels == 1 { 0 } else { c };
                p.0[c] = export(self.at(src, y as usize, x as usize));
            }
        }
        Ok(out)
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = t.dims3()?;
        Image::new(c, h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }
}

pub fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn export(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Stacks images into `[B, C, H, W]`.
pub fn stack_images(images: &[Image], dtype: DType) -> Result<Tensor> {
    let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    Image::from_rgb8(&image::open(path)?.to_rgb8())
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.to_rgb8()?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Output size for a shorter-side resize to `x`; the long side is floored.
pub fn min_dim_size(h: usize, w: usize, x: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidImage(format!("degenerate {h}x{w} image")));
    }
    if x == 0 {
        return Err(Error::InvalidDimension("target size must be positive".into()));
    }
    Ok(if h <= w { (x, w * x / h) } else { (h * x / w, x) })
}

/// Bilinear resize so that `min(H, W) == x`.
pub fn resize_min_dim(img: &Image, x: usize) -> Result<Image> {
    let (nh, nw) = min_dim_size(img.height, img.width, x)?;
    if (nh, nw) == (img.height, img.width) {
        return Ok(img.clone());
    }
    Ok(resize_bilinear(img, nh, nw))
}

/// Half-pixel-centered bilinear interpolation with edge clamping.
pub fn resize_bilinear(img: &Image, nh: usize, nw: usize) -> Image {
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(nh, img.height);
    let xs = taps(nw, img.width);
    let mut out = Image::filled(img.channels, nh, nw, 0.0);
    for c in 0..img.channels {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bot = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Full position map at token resolution for a resized image.
pub fn token_position_map(h: usize, w: usize, patch: usize) -> Result<PositionMap> {
    if patch == 0 || h < patch || w < patch {
        return Err(Error::InvalidDimension(format!("{h}x{w} image has no whole {patch}-pixel patch")));
    }
    make_position_map(h / patch, w / patch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image: Image,
    pub pos: PositionMap,
    /// Pixel offset `(y0, x0)` inside the resized image.
    pub origin: (usize, usize),
}

/// Square crop of side `min(H, W)` at a random patch-aligned offset along the
/// long axis; the same window is sliced from `pos_map`.
pub fn shifted_square_crop<R: Rng>(img: &Image, pos_map: &PositionMap, patch: usize, rng: &mut R) -> Result<Crop> {
    let (h, w) = (img.height, img.width);
    if patch == 0 || (pos_map.height(), pos_map.width()) != (h / patch, w / patch) {
        return Err(Error::Shape(format!(
            "position map {}x{} does not match a {h}x{w} image at patch {patch}",
            pos_map.height(),
            pos_map.width()
        )));
    }
    let x = h.min(w);
    if x % patch != 0 {
        return Err(Error::Shape(format!("crop side {x} not divisible by patch {patch}")));
    }
    let xt = x / patch;
    let (ht, wt) = (pos_map.height(), pos_map.width());
    let (ty, tx) = if h > w {
        (rng.random_range(0..=ht - xt), 0)
    } else if w > h {
        (0, rng.random_range(0..=wt - xt))
    } else {
        (0, 0)
    };
    Ok(Crop {
        image: img.crop(ty * patch, tx * patch, x, x)?,
        pos: pos_map.slice(ty, tx, xt, xt)?,
        origin: (ty * patch, tx * patch),
    })
}

/// Uncropped map for the requested output size with a camera transform.
pub fn inference_position_map(h: usize, w: usize, patch: usize, cam: &CameraTransform) -> Result<PositionMap> {
    if patch == 0 || h == 0 || w == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Shape(format!("{h}x{w} is not a positive multiple of patch {patch}")));
    }
    apply_camera(h / patch, w / patch, cam)
}

// Procedural scenes.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scene {
    pub shape: usize,
    pub color: usize,
    pub place: usize,
}

impl Scene {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            shape: rng.random_range(0..SHAPES.len()),
            color: rng.random_range(0..COLORS.len()),
            place: rng.random_range(0..PLACES.len()),
        }
    }

    pub fn caption(&self) -> String {
        format!("{} {} {}", COLORS[self.color], SHAPES[self.shape], PLACES[self.place])
    }

    pub fn rgb(&self) -> [f32; 3] {
        match COLORS[self.color] {
            "red" => [1.0, -1.0, -1.0],
            "green" => [-1.0, 1.0, -1.0],
            "blue" => [-1.0, -1.0, 1.0],
            "yellow" => [1.0, 1.0, -1.0],
            "magenta" => [1.0, -1.0, 1.0],
            _ => [-1.0, 1.0, 1.0],
        }
    }

    /// Shape center in pixels.
    pub fn center(&self, h: usize, w: usize) -> (f64, f64) {
        let (h, w) = (h as f64, w as f64);
        match PLACES[self.place] {
            "top" => (0.28 * h, 0.5 * w),
            "bottom" => (0.72 * h, 0.5 * w),
            "left" => (0.5 * h, 0.28 * w),
            "right" => (0.5 * h, 0.72 * w),
            _ => (0.5 * h, 0.5 * w),
        }
    }

    /// Colored shape on a black background.
    pub fn render(&self, h: usize, w: usize) -> Image {
        let mut img = Image::filled(3, h, w, -1.0);
        let (cy, cx) = self.center(h, w);
        let r = 0.22 * h.min(w) as f64;
        let rgb = self.rgb();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match SHAPES[self.shape] {
                    "circle" => dx * dx + dy * dy <= r * r,
                    "square" => dx.abs() <= r && dy.abs() <= r,
                    // Apex up, base down.
                    _ => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
                };
                if inside {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
        img
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// `procedural:<seed>`, an image directory with `.txt` sidecars, or a
    /// JSON manifest of `{"image", "caption"}` entries.
    pub source: String,
    /// Square training side in pixels.
    pub train_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Only use the first `limit` source items.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Rendered size of procedural scenes; square at `train_size` when absent.
    #[serde(default)]
    pub procedural_dims: Option<[usize; 2]>,
}

impl DatasetSpec {
    pub fn procedural(seed: u64, train_size: usize) -> Self {
        Self {
            source: format!("procedural:{seed}"),
            train_size,
            seed,
            limit: None,
            procedural_dims: None,
        }
    }

    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.train_size == 0 || patch == 0 || !self.train_size.is_multiple_of(patch) {
            return Err(Error::InvalidConfig(format!(
                "train size {} must be a positive multiple of patch {patch}",
                self.train_size
            )));
        }
        if let Some([h, w]) = self.procedural_dims {
            if h.min(w) < self.train_size {
                return Err(Error::InvalidConfig("procedural dims smaller than train size".into()));
            }
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct CropSample {
    pub image: Image,
    pub pos: PositionMap,
    pub caption: String,
    pub tokens: Vec<u32>,
    pub crop_origin: (usize, usize),
    pub source_dims: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub image: PathBuf,
    pub caption: String,
}

/// Image/caption pairs whose images decoded at load time.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub skipped: usize,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "gif" | "webp")
    )
}

#[derive(Deserialize)]
struct ManifestEntry {
    image: PathBuf,
    caption: String,
}

/// Lists pairs from a directory (same-stem `.txt` captions) or a JSON manifest.
/// Files that fail to decode are skipped and counted.
pub fn load_corpus(source: &Path) -> Result<Corpus> {
    let mut candidates = Vec::new();
    if source.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(source)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        for p in paths.into_iter().filter(|p| is_image(p)) {
            let caption = std::fs::read_to_string(p.with_extension("txt")).unwrap_or_default();
            candidates.push(CorpusEntry {
                image: p,
                caption: caption.trim().to_string(),
            });
        }
    } else {
        let text = std::fs::read_to_string(source)?;
        let items: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Corpus(format!("bad manifest: {e}")))?;
        let base = source.parent().unwrap_or(Path::new("."));
        candidates.extend(items.into_iter().map(|m| CorpusEntry {
            image: base.join(m.image),
            caption: m.caption,
        }));
    }
    if candidates.is_empty() {
        return Err(Error::Corpus(format!("no images found in {}", source.display())));
    }
    let total = candidates.len();
    let mut entries = Vec::with_capacity(total);
    for c in candidates {
        match image::open(&c.image) {
            Ok(img) if img.width() > 0 && img.height() > 0 => entries.push(c),
            _ => log::warn!("skipping undecodable image {}", c.image.display()),
        }
    }
    let skipped = total - entries.len();
    if 2 * skipped > total {
        return Err(Error::Corpus(format!("{skipped} of {total} images failed to decode")));
    }
    if skipped > 0 {
        log::warn!("{skipped} of {total} corpus images skipped");
    }
    Ok(Corpus { entries, skipped })
}

enum Source {
    Procedural { seed: u64, dims: (usize, usize) },
    Corpus(Corpus),
}

/// Stateless sample stream: sample `i` depends only on the spec and `i`.
pub struct Dataset {
    spec: DatasetSpec,
    patch: usize,
    tokenizer: Tokenizer,
    source: Source,
}

impl Dataset {
    pub fn new(spec: &DatasetSpec, patch: usize, tokenizer: Tokenizer) -> Result<Self> {
        spec.validate(patch)?;
        let source = match spec.source.strip_prefix("procedural:") {
            Some(s) => {
                let seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad procedural seed in `{}`", spec.source)))?;
                let [h, w] = spec.procedural_dims.unwrap_or([spec.train_size; 2]);
                Source::Procedural { seed, dims: (h, w) }
            }
            None => Source::Corpus(load_corpus(Path::new(&spec.source))?),
        };
        Ok(Self {
            spec: spec.clone(),
            patch,
            tokenizer,
            source,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Distinct source items, after `limit`.
    pub fn num_items(&self) -> Option<usize> {
        let n = match &self.source {
            Source::Procedural { .. } => None,
            Source::Corpus(c) => Some(c.entries.len()),
        };
        match (n, self.spec.limit) {
            (Some(n), Some(l)) => Some(n.min(l)),
            (None, Some(l)) => Some(l),
            (n, None) => n,
        }
    }

    /// Source image and caption for item `i`, before resize and crop.
    pub fn item(&self, i: usize) -> Result<(Image, String)> {
        let i = self.num_items().map_or(i, |n| i % n);
        match &self.source {
            Source::Procedural { seed, dims } => {
                let scene = Scene::random(&mut seed::rng(*seed, &[seed::stream::DATA, i as u64]));
                Ok((scene.render(dims.0, dims.1), scene.caption()))
            }
            Source::Corpus(c) => {
                let e = &c.entries[i];
                Ok((read_image(&e.image)?, e.caption.clone()))
            }
        }
    }

    /// Resize, map, crop, tokenize.
    pub fn sample(&self, index: u64) -> Result<CropSample> {
        let mut rng = seed::rng(self.spec.seed, &[seed::stream::DATA, index]);
        let item = match self.num_items() {
            Some(n) => rng.random_range(0..n),
            None => index as usize,
        };
        let (img, caption) = self.item(item)?;
        let resized = resize_min_dim(&img, self.spec.train_size)?;
        let pos = token_position_map(resized.height, resized.width, self.patch)?;
        let crop = shifted_square_crop(&resized, &pos, self.patch, &mut rng)?;
        Ok(CropSample {
            image: crop.image,
            pos: crop.pos,
            tokens: self.tokenizer.encode(&caption),
            caption,
            crop_origin: crop.origin,
            source_dims: (resized.height, resized.width),
        })
    }
}
