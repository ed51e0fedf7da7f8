//! Frames, patch tokenization and style classification.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An image with pixel values in `[0, 1]`, stored height-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Frame {
    /// Pixel values are clamped into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Dimension(format!(
                "frame {height}x{width}x{channels}: need positive size and 1 or 3 channels"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "frame {height}x{width}x{channels} given {} values",
                pixels.len()
            )));
        }
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Reads an 8-bit PNG or portable pixmap; values are divided by 255.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color().channel_count() {
            1 | 2 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        Self::new(h, w, channels, raw.into_iter().map(|v| v as f64 / 255.0).collect())
    }

    /// Writes an 8-bit PNG (values rounded to the nearest level).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &raw, self.width as u32, self.height as u32, color).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }

    /// Same frame after an 8-bit quantize/dequantize, i.e. what a PNG
    /// round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|v| (v * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// Splits a frame into non-overlapping `patch x patch` tiles in row-major
/// tile order. Each row of the result is one tile flattened as
/// `(dy, dx, channel)`.
pub fn patchify(frame: &Frame, patch: usize) -> Result<Tensor> {
    let (h, w, c) = frame.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "frame {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let per = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * per);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * w + px * patch) * c;
                out.extend_from_slice(&frame.pixels[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, per], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Frame> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Dimension("unpatchify: indivisible dimensions".into()));
    }
    let (gh, gw) = (height / patch, width / patch);
    let per = patch * patch * channels;
    if patches.shape() != [gh * gw, per] {
        return Err(Error::Dimension(format!(
            "unpatchify: expected [{}, {per}], got {:?}",
            gh * gw,
            patches.shape()
        )));
    }
    let mut pixels = vec![0.0; height * width * channels];
    for (i, tile) in patches.data().chunks(per).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for dy in 0..patch {
            let y = py * patch + dy;
            let start = (y * width + px * patch) * channels;
            pixels[start..start + patch * channels]
                .copy_from_slice(&tile[dy * patch * channels..(dy + 1) * patch * channels]);
        }
    }
    Frame::new(height, width, channels, pixels)
}

/// Tokens of one frame together with where each token sits on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub frame_index: usize,
    pub tokens: Tensor,
    pub spatial_positions: Vec<(usize, usize)>,
}

impl TokenGrid {
    /// Raster index of each token, i.e. its 1-D spatial position.
    pub fn raster_positions(&self) -> Vec<usize> {
        (0..self.spatial_positions.len()).collect()
    }
}

/// Projects raw patches `[m, p*p*c]` with `projection: [p*p*c, d]` plus a
/// bias row.
pub fn embed_tokens(
    patches: &Tensor,
    projection: &Tensor,
    bias: &Tensor,
    frame_index: usize,
    grid_width: usize,
) -> Result<TokenGrid> {
    let (_, d) = match projection.shape() {
        [k, d] => (*k, *d),
        s => return Err(Error::Dimension(format!("projection must be a matrix, got {s:?}"))),
    };
    if bias.len() != d {
        return Err(Error::Dimension(format!("bias has {} values for width {d}", bias.len())));
    }
    let mut tokens = patches.matmul(projection)?;
    let cols = d;
    for row in tokens.data_mut().chunks_mut(cols) {
        for (x, b) in row.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    let m = tokens.shape()[0];
    let spatial_positions = (0..m).map(|i| (i / grid_width, i % grid_width)).collect();
    Ok(TokenGrid {
        frame_index,
        tokens,
        spatial_positions,
    })
}

/// Source of unit-norm style embeddings for images and text.
pub trait StyleEmbedder {
    fn dim(&self) -> usize;

    fn embed_image(&self, frame: &Frame) -> Result<Tensor>;

    fn embed_text(&self, text: &str) -> Result<Tensor>;

    /// Image embedding when the producer of the frame knows its style.
    /// Embedders that cannot use the hint ignore it.
    fn embed_image_hinted(&self, frame: &Frame, _style: Option<usize>) -> Result<Tensor> {
        self.embed_image(frame)
    }
}

pub fn style_prompt(style: &str) -> String {
    format!("This is a {style} painting.")
}

pub const DESK_STYLES: [&str; 4] = ["watercolor", "oil", "sketch", "digital"];

/// One text embedding per style, from the prompt "This is a {style} painting."
#[derive(Clone, Debug)]
pub struct StylePrototypeTable {
    pub styles: Vec<String>,
    pub embeddings: Tensor,
}

impl StylePrototypeTable {
    pub fn build(styles: &[String], embedder: &dyn StyleEmbedder) -> Result<Self> {
        if styles.len() < 2 {
            return Err(Error::Contract("a style table needs at least two styles".into()));
        }
        let mut data = Vec::with_capacity(styles.len() * embedder.dim());
        for s in styles {
            data.extend_from_slice(embedder.embed_text(&style_prompt(s))?.data());
        }
        Ok(Self {
            styles: styles.to_vec(),
            embeddings: Tensor::new(vec![styles.len(), embedder.dim()], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn prototype(&self, i: usize) -> Tensor {
        Tensor::vector(self.embeddings.row(i).to_vec())
    }
}

/// Index and embedding of the prototype with the highest cosine score.
/// Ties go to the lowest index.
pub fn classify_embedding(image_embedding: &Tensor, table: &StylePrototypeTable) -> Result<(usize, Tensor)> {
    if table.is_empty() {
        return Err(Error::Contract("empty style table".into()));
    }
    let n = image_embedding.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput("zero-norm image embedding".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..table.len() {
        let row = table.embeddings.row(i);
        let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let score = image_embedding.data().iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / (n * rn);
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok((best.0, table.prototype(best.0)))
}

pub fn classify_style(
    reference: &Frame,
    table: &StylePrototypeTable,
    embedder: &dyn StyleEmbedder,
) -> Result<(usize, Tensor)> {
    classify_embedding(&embedder.embed_image(reference)?, table)
}

/// Deterministic stand-in for a pretrained vision-language embedder.
///
/// Text prototypes are a seeded orthonormal set, one per style. Images are
/// average-pooled to an 8x8 grid and sent through a fixed random
/// projection. A style hint blends the image vector toward that style's
/// prototype by `bias_strength` (1.0 returns the prototype itself).
#[derive(Clone, Debug)]
pub struct MockStyleEmbedder {
    seed: u64,
    dim: usize,
    styles: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    projection: Vec<f64>,
    pub bias_strength: f64,
}

const POOL: usize = 8;

impl MockStyleEmbedder {
    pub fn new(seed: u64, dim: usize, styles: &[String]) -> Result<Self> {
        if dim < styles.len() || styles.is_empty() {
            return Err(Error::Config(format!(
                "mock embedder needs dim >= number of styles ({} < {})",
                dim,
                styles.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(styles.len());
        while prototypes.len() < styles.len() {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for p in &prototypes {
                let d: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(p) {
                    *x -= d * y;
                }
            }
            // second pass keeps the set orthogonal to rounding level
            for p in &prototypes {
                let d: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(p) {
                    *x -= d * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                prototypes.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let k = POOL * POOL * 3;
        let projection = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self {
            seed,
            dim,
            styles: styles.to_vec(),
            prototypes,
            projection,
            bias_strength: 1.0,
        })
    }

    pub fn desk(seed: u64) -> Self {
        let styles: Vec<String> = DESK_STYLES.iter().map(|s| s.to_string()).collect();
        Self::new(seed, 64, &styles).expect("desk embedder config is valid")
    }

    pub fn styles(&self) -> &[String] {
        &self.styles
    }

    fn pooled(frame: &Frame) -> Vec<f64> {
        let (h, w, c) = frame.dims();
        let mut sums = vec![0.0; POOL * POOL * 3];
        let mut counts = vec![0usize; POOL * POOL];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * POOL / h) * POOL + x * POOL / w;
                counts[cell] += 1;
                for ch in 0..3 {
                    sums[cell * 3 + ch] += frame.get(y, x, if c == 1 { 0 } else { ch });
                }
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for ch in 0..3 {
                sums[cell * 3 + ch] /= n.max(1) as f64;
            }
        }
        sums
    }

    fn text_seed(&self, text: &str) -> u64 {
        // FNV-1a, stable across platforms and runs
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    fn blend(&self, v: Vec<f64>, style: usize) -> Vec<f64> {
        let b = self.bias_strength.clamp(0.0, 1.0);
        if b >= 1.0 {
            return self.prototypes[style].clone();
        }
        let mixed: Vec<f64> = v
            .iter()
            .zip(&self.prototypes[style])
            .map(|(x, p)| (1.0 - b) * x + b * p)
            .collect();
        unit(mixed).unwrap_or_else(|_| self.prototypes[style].clone())
    }
}

fn unit(v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateInput("cannot normalize a zero vector".into()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

impl StyleEmbedder for MockStyleEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, frame: &Frame) -> Result<Tensor> {
        let pooled = Self::pooled(frame);
        let mut out = vec![0.0; self.dim];
        for (i, p) in pooled.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.projection[i * self.dim..(i + 1) * self.dim]) {
                *o += p * w;
            }
        }
        Ok(Tensor::vector(unit(out)?))
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        if let Some(i) = self.styles.iter().position(|s| text == style_prompt(s)) {
            return Ok(Tensor::vector(self.prototypes[i].clone()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.text_seed(text));
        let v = unit((0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let v = match self.styles.iter().position(|s| text.contains(s.as_str())) {
            Some(i) => self.blend(v, i),
            None => v,
        };
        Ok(Tensor::vector(v))
    }

    fn embed_image_hinted(&self, frame: &Frame, style: Option<usize>) -> Result<Tensor> {
        match style {
            Some(s) if s < self.prototypes.len() => {
                let v = match self.embed_image(frame) {
                    Ok(t) => t.into_data(),
                    Err(_) => vec![0.0; self.dim],
                };
                Ok(Tensor::vector(self.blend(v, s)))
            }
            _ => self.embed_image(frame),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frame(h: usize, w: usize) -> Frame {
        let px = (0..h * w * 3).map(|i| (i % 251) as f64 / 250.0).collect();
        Frame::new(h, w, 3, px).unwrap()
    }

    #[test]
    fn patch_counts_and_roundtrip() {
        let f = gradient_frame(64, 64);
        let p = patchify(&f, 8).unwrap();
        assert_eq!(p.shape(), &[64, 192]);
        assert_eq!(unpatchify(&p, 64, 64, 3, 8).unwrap(), f);
    }

    #[test]
    fn whole_frame_patch_is_flattened_frame() {
        let f = gradient_frame(8, 8);
        let p = patchify(&f, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
        assert_eq!(p.data(), f.pixels());
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let f = gradient_frame(12, 12);
        assert!(matches!(patchify(&f, 8), Err(Error::Dimension(_))));
    }

    #[test]
    fn pixels_are_clamped() {
        let f = Frame::new(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(f.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_patches_give_bias_rows() {
        let patches = Tensor::zeros(&[4, 12]);
        let proj = Tensor::full(&[12, 5], 0.3);
        let bias = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let grid = embed_tokens(&patches, &proj, &bias, 0, 2).unwrap();
        for r in 0..4 {
            assert_eq!(grid.tokens.row(r), bias.data());
        }
        assert_eq!(grid.spatial_positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn identity_projection_passes_patches_through() {
        let f = gradient_frame(4, 4);
        let p = patchify(&f, 2).unwrap();
        let grid = embed_tokens(&p, &Tensor::eye(12), &Tensor::zeros(&[12]), 3, 2).unwrap();
        assert_eq!(grid.tokens, p);
        assert_eq!(grid.frame_index, 3);
    }

    #[test]
    fn mock_prototypes_are_orthonormal_and_deterministic() {
        let a = MockStyleEmbedder::desk(5);
        let b = MockStyleEmbedder::desk(5);
        let table = StylePrototypeTable::build(a.styles(), &a).unwrap();
        let table_b = StylePrototypeTable::build(b.styles(), &b).unwrap();
        assert_eq!(table.embeddings, table_b.embeddings);
        for i in 0..4 {
            let pi = table.prototype(i);
            assert!((pi.norm() - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(pi.dot(&table.prototype(j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = MockStyleEmbedder::desk(1);
        let f = gradient_frame(16, 16);
        assert!((e.embed_image(&f).unwrap().norm() - 1.0).abs() < 1e-9);
        assert!((e.embed_text("an oil painting of a harbour").unwrap().norm() - 1.0).abs() < 1e-9);
        let mut half = e.clone();
        half.bias_strength = 0.5;
        assert!((half.embed_image_hinted(&f, Some(2)).unwrap().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn black_frame_is_degenerate() {
        let e = MockStyleEmbedder::desk(1);
        let table = StylePrototypeTable::build(e.styles(), &e).unwrap();
        let f = Frame::filled(8, 8, 3, 0.0).unwrap();
        assert!(matches!(classify_style(&f, &table, &e), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn classify_exact_prototype_and_ties() {
        let e = MockStyleEmbedder::desk(9);
        let table = StylePrototypeTable::build(e.styles(), &e).unwrap();
        assert_eq!(classify_embedding(&table.prototype(2), &table).unwrap().0, 2);
        let axes = StylePrototypeTable {
            styles: vec!["a".into(), "b".into(), "c".into()],
            embeddings: Tensor::eye(3),
        };
        let tie = Tensor::vector(vec![0.0, 1.0, 1.0]);
        assert_eq!(classify_embedding(&tie, &axes).unwrap().0, 1);
        // positive rescaling does not change the decision
        let scaled = Tensor::vector(vec![0.0, 3.0, 3.0]);
        assert_eq!(classify_embedding(&scaled, &axes).unwrap().0, 1);
    }
}
