//! Image decoding, geometric and photometric preprocessing, and the two
//! augmentation pipelines.
//!
//! Randomness comes exclusively from [`ChaCha8Rng`] (the 8-round ChaCha
//! stream cipher RNG from `rand_chacha`), seeded through
//! `SeedableRng::seed_from_u64`. Per-sample streams are derived with
//! [`derive_seed`], so a (seed, epoch, index) triple always reproduces the
//! same augmentation.

use std::io::Cursor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageBuffer({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::InvalidInput(format!(
                "{height}x{width}x{channels} image needs {} bytes, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        Self::new(height, width, 1, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    fn map_pixels(&self, f: impl Fn(u8) -> u8) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
            ..self.clone()
        }
    }

    /// Luma (ITU-R BT.601 weights) for RGB input; gray input is returned as is.
    pub fn to_gray(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks(3)
            .map(|p| {
                (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
                    .round()
                    .clamp(0.0, 255.0) as u8
            })
            .collect();
        Self {
            channels: 1,
            pixels,
            ..*self
        }
    }

    /// Replicates a gray channel into RGB; RGB input is returned as is.
    pub fn to_rgb(&self) -> Self {
        if self.channels == 3 {
            return self.clone();
        }
        Self {
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
            ..*self
        }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        if channels == 1 {
            self.to_gray()
        } else {
            self.to_rgb()
        }
    }
}

impl std::ops::Deref for ImageBuffer {
    type Target = [u8];

    fn deref(&self) -> &[u8] {
        &self.pixels
    }
}

/// Decodes PNG or JPEG bytes. Gray images stay single-channel; alpha is
/// dropped; 16-bit samples are reduced to 8 bits.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    let sniffed = image::guess_format(bytes).ok();
    let format_name = || {
        sniffed
            .map(|f| format!("{f:?}").to_lowercase())
            .unwrap_or_else(|| "unknown".to_string())
    };
    let format = match sniffed {
        Some(f @ (image::ImageFormat::Png | image::ImageFormat::Jpeg)) => f,
        _ => {
            return Err(Error::NotAnImage {
                format: format_name(),
            })
        }
    };
    let decoded = image::load(Cursor::new(bytes), format).map_err(|_| Error::NotAnImage {
        format: format_name(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    if gray {
        ImageBuffer::new(h, w, 1, decoded.into_luma8().into_raw())
    } else {
        ImageBuffer::new(h, w, 3, decoded.into_rgb8().into_raw())
    }
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &img.pixels,
        img.width as u32,
        img.height as u32,
        color,
    )
    .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out)
}

/// Source coordinate and blend weight for half-pixel-center resampling
/// along one axis: `src = (dst + 0.5)·in/out − 0.5`, clamped to the image.
#[inline]
fn half_pixel_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let src = ((dst as f32 + 0.5) * in_len as f32 / out_len as f32 - 0.5)
        .clamp(0.0, (in_len - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f32)
}

/// Bilinear resampling of a single float plane with half-pixel centers.
pub fn resize_plane(plane: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(plane.len(), h * w, "plane size");
    let cols: Vec<_> = (0..out_w).map(|x| half_pixel_taps(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = half_pixel_taps(y, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Bilinear resize with half-pixel centers; results are rounded to nearest.
pub fn resize_bilinear(img: &ImageBuffer, out_h: usize, out_w: usize) -> ImageBuffer {
    assert!(out_h >= 1 && out_w >= 1, "resize target must be non-empty");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let ch = img.channels;
    let cols: Vec<_> = (0..out_w).map(|x| half_pixel_taps(x, img.width, out_w)).collect();
    let mut pixels = Vec::with_capacity(out_h * out_w * ch);
    for y in 0..out_h {
        let (y0, y1, fy) = half_pixel_taps(y, img.height, out_h);
        for &(x0, x1, fx) in &cols {
            for c in 0..ch {
                let p = |yy, xx| img.get(yy, xx, c) as f32;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer {
        height: out_h,
        width: out_w,
        channels: ch,
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `p / 255`.
    UnitInterval,
    /// `(p / 255 − mean_c) / std_c` with the usual ImageNet channel statistics.
    ImagenetStats,
}

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Converts to a `[C, H, W]` float tensor. ImageNet statistics need three
/// channels, so gray input is replicated first in that mode.
pub fn normalize(img: &ImageBuffer, mode: NormalizationMode) -> Tensor {
    let img = match mode {
        NormalizationMode::ImagenetStats => img.to_rgb(),
        NormalizationMode::UnitInterval => img.clone(),
    };
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut data = vec![0.0f32; ch * h * w];
    for c in 0..ch {
        let (mean, std) = match mode {
            NormalizationMode::UnitInterval => (0.0, 1.0),
            NormalizationMode::ImagenetStats => (IMAGENET_MEAN[c], IMAGENET_STD[c]),
        };
        for i in 0..h * w {
            data[c * h * w + i] = (img.pixels[i * ch + c] as f32 / 255.0 - mean) / std;
        }
    }
    Tensor::from_parts(vec![ch, h, w], data)
}

/// Exact clockwise quarter turns (index permutation only).
pub fn rotate_quarter(img: &ImageBuffer, turns: u8) -> ImageBuffer {
    let turns = turns % 4;
    if turns == 0 {
        return img.clone();
    }
    let (h, w, ch) = (img.height, img.width, img.channels);
    let (oh, ow) = if turns == 2 { (h, w) } else { (w, h) };
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = match turns {
                1 => (h - 1 - x, y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (x, w - 1 - y),
            };
            let base = (sy * w + sx) * ch;
            pixels.extend_from_slice(&img.pixels[base..base + ch]);
        }
    }
    ImageBuffer {
        height: oh,
        width: ow,
        channels: ch,
        pixels,
    }
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let (w, ch) = (img.width, img.channels);
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks(w * ch) {
        for x in (0..w).rev() {
            pixels.extend_from_slice(&row[x * ch..(x + 1) * ch]);
        }
    }
    ImageBuffer {
        pixels,
        ..img.clone()
    }
}

/// Rotation by `angle_deg` (counter-clockwise) and magnification by `zoom`
/// about the image center, bilinear, replicating border pixels.
pub fn rotate_zoom(img: &ImageBuffer, angle_deg: f64, zoom: f64) -> ImageBuffer {
    if angle_deg == 0.0 && zoom == 1.0 {
        return img.clone();
    }
    let (h, w, ch) = (img.height, img.width, img.channels);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..h {
        for x in 0..w {
            // Inverse map: output -> source.
            let (dx, dy) = ((x as f64 - cx) / zoom, (y as f64 - cy) / zoom);
            let sx = (cx + cos * dx - sin * dy).clamp(0.0, (w - 1) as f64);
            let sy = (cy + sin * dx + cos * dy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..ch {
                let p = |yy, xx| img.get(yy, xx, c) as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                pixels.push((top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer {
        pixels,
        ..img.clone()
    }
}

/// Crops a `scale`-sized window at fractional offsets `(oy, ox)` in `[0, 1]`
/// of the free margin, then resizes back to the original dimensions.
pub fn crop_resize(img: &ImageBuffer, scale: f64, oy: f64, ox: f64) -> ImageBuffer {
    if scale >= 1.0 {
        return img.clone();
    }
    let ch_ = ((img.height as f64 * scale).round() as usize).clamp(1, img.height);
    let cw = ((img.width as f64 * scale).round() as usize).clamp(1, img.width);
    let y0 = ((img.height - ch_) as f64 * oy).round() as usize;
    let x0 = ((img.width - cw) as f64 * ox).round() as usize;
    let ch = img.channels;
    let mut pixels = Vec::with_capacity(ch_ * cw * ch);
    for y in y0..y0 + ch_ {
        let start = (y * img.width + x0) * ch;
        pixels.extend_from_slice(&img.pixels[start..start + cw * ch]);
    }
    let crop = ImageBuffer {
        height: ch_,
        width: cw,
        channels: ch,
        pixels,
    };
    resize_bilinear(&crop, img.height, img.width)
}

/// Adds `delta` (unit scale, so 0.1 ≈ 25.5 gray levels) and clamps.
pub fn adjust_brightness(img: &ImageBuffer, delta: f64) -> ImageBuffer {
    if delta == 0.0 {
        return img.clone();
    }
    let shift = delta * 255.0;
    img.map_pixels(|p| (p as f64 + shift).round().clamp(0.0, 255.0) as u8)
}

/// Blacks out the top `fraction` of rows.
pub fn occlude_top(img: &ImageBuffer, fraction: f64) -> ImageBuffer {
    let rows = ((img.height as f64 * fraction).round() as usize).min(img.height);
    let mut out = img.clone();
    out.pixels[..rows * img.width * img.channels].fill(0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Filter,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub pipeline: PipelineKind,
    pub max_rotation_deg: f64,
    pub max_zoom_fraction: f64,
    pub hflip_prob: f64,
    pub brightness_delta: f64,
    pub top_occlusion_max_fraction: f64,
    pub crop_scale_range: (f64, f64),
}

impl AugmentSpec {
    /// Small rotations and zoom only.
    pub fn filter() -> Self {
        Self {
            pipeline: PipelineKind::Filter,
            max_rotation_deg: 5.0,
            max_zoom_fraction: 0.10,
            hflip_prob: 0.0,
            brightness_delta: 0.0,
            top_occlusion_max_fraction: 0.0,
            crop_scale_range: (1.0, 1.0),
        }
    }

    pub fn classifier() -> Self {
        Self {
            pipeline: PipelineKind::Classifier,
            max_rotation_deg: 10.0,
            max_zoom_fraction: 0.10,
            hflip_prob: 0.5,
            brightness_delta: 0.2,
            top_occlusion_max_fraction: 0.15,
            crop_scale_range: (0.85, 1.0),
        }
    }

    /// Every magnitude zero: augmentation becomes the identity.
    pub fn null(pipeline: PipelineKind) -> Self {
        Self {
            pipeline,
            max_rotation_deg: 0.0,
            max_zoom_fraction: 0.0,
            hflip_prob: 0.0,
            brightness_delta: 0.0,
            top_occlusion_max_fraction: 0.0,
            crop_scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("max_zoom_fraction", self.max_zoom_fraction),
            ("hflip_prob", self.hflip_prob),
            ("brightness_delta", self.brightness_delta),
            ("top_occlusion_max_fraction", self.top_occlusion_max_fraction),
            ("crop_scale_range.0", self.crop_scale_range.0),
            ("crop_scale_range.1", self.crop_scale_range.1),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.crop_scale_range.0 > self.crop_scale_range.1 || self.crop_scale_range.0 == 0.0 {
            return Err(Error::Config(format!(
                "crop_scale_range {:?} must be an ordered, non-empty range",
                self.crop_scale_range
            )));
        }
        if self.max_rotation_deg < 0.0 {
            return Err(Error::Config("max_rotation_deg must be non-negative".into()));
        }
        Ok(())
    }
}

/// Applies the pipeline's transforms in a fixed order: horizontal flip,
/// rotation + zoom, crop-and-resize, brightness, top occlusion.
///
/// Seven values are drawn from `rng` on every call regardless of which
/// transforms are enabled, so enabling one transform never shifts the draws
/// of another.
pub fn augment(img: &ImageBuffer, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let mut uniform = || rng.random::<f64>();
    let flip = uniform() < spec.hflip_prob;
    let angle = spec.max_rotation_deg * (2.0 * uniform() - 1.0);
    let zoom = 1.0 + spec.max_zoom_fraction * (2.0 * uniform() - 1.0);
    let (lo, hi) = spec.crop_scale_range;
    let crop_scale = lo + (hi - lo) * uniform();
    let (crop_oy, crop_ox) = (uniform(), uniform());
    let brightness = spec.brightness_delta * (2.0 * uniform() - 1.0);
    let occlusion = spec.top_occlusion_max_fraction * uniform();

    let mut out = if flip {
        flip_horizontal(img)
    } else {
        img.clone()
    };
    out = rotate_zoom(&out, angle, zoom);
    out = crop_resize(&out, crop_scale, crop_oy, crop_ox);
    out = adjust_brightness(&out, brightness);
    if occlusion > 0.0 {
        out = occlude_top(&out, occlusion);
    }
    out
}

/// SplitMix64 finalizer over the combined inputs; used to give every
/// (seed, epoch, sample) its own independent RNG stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Everything needed to turn a decoded image into a network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: usize,
    pub channels: usize,
    pub normalization: NormalizationMode,
}

impl Preprocess {
    /// Resize (after optional augmentation), convert channels, normalize.
    pub fn apply(&self, img: &ImageBuffer, augmentation: Option<(&AugmentSpec, &mut ChaCha8Rng)>) -> Tensor {
        let img = img.with_channels(self.channels);
        let img = match augmentation {
            Some((spec, rng)) => augment(&img, spec, rng),
            None => img,
        };
        let img = resize_bilinear(&img, self.input_size, self.input_size);
        normalize(&img, self.normalization)
    }
}

/// 256-entry "jet" ramp: for `t = i/255`,
/// `r = clamp(1.5 − |4t − 3|)`, `g = clamp(1.5 − |4t − 2|)`,
/// `b = clamp(1.5 − |4t − 1|)`, each scaled to 0..=255 and rounded.
pub fn heat_ramp() -> [[u8; 3]; 256] {
    let mut ramp = [[0u8; 3]; 256];
    for (i, entry) in ramp.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let ch = |center: f64| ((1.5 - (4.0 * t - center).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
        *entry = [ch(3.0), ch(2.0), ch(1.0)];
    }
    ramp
}

/// Colors a `[H, W]` map with values in `[0, 1]` through [`heat_ramp`].
pub fn render_heatmap(map: &Tensor) -> Result<ImageBuffer> {
    let (h, w) = map.dims2("render_heatmap")?;
    let ramp = heat_ramp();
    let pixels = map
        .data()
        .iter()
        .flat_map(|&v| ramp[(v.clamp(0.0, 1.0) * 255.0).round() as usize])
        .collect();
    ImageBuffer::new(h, w, 3, pixels)
}

/// `alpha·heat + (1 − alpha)·gray(base)` per channel.
pub fn blend_overlay(base: &ImageBuffer, heat: &ImageBuffer, alpha: f64) -> Result<ImageBuffer> {
    if (base.height, base.width) != (heat.height, heat.width) {
        return Err(Error::InvalidInput(format!(
            "overlay of {}x{} onto {}x{}",
            heat.height, heat.width, base.height, base.width
        )));
    }
    let base = base.to_gray().to_rgb();
    let heat = heat.to_rgb();
    let pixels = base
        .pixels
        .iter()
        .zip(&heat.pixels)
        .map(|(&b, &h)| (alpha * h as f64 + (1.0 - alpha) * b as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageBuffer::new(base.height, base.width, 3, pixels)
}
