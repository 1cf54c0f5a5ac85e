//! Classical per-pair change scorers: HoG distance, color-histogram
//! distance, and embedding distance.
//!
//! Descriptor hyperparameters are frozen here so scores stay comparable
//! across runs: grayscale at 128x128, 8x8-pixel cells, 9 unsigned
//! orientation bins with linear vote interpolation, 2x2-cell blocks at
//! stride 1 with L2 normalization; color histograms use 8x8x8 RGB bins
//! with L1 normalization.

use std::collections::BTreeMap;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use super::DetectError;
use crate::embedding::EmbeddingVector;
use crate::gateway::{Gateway, GatewayError};

const CELL: usize = 8;
const BINS: usize = 9;
const BLOCK: usize = 2;
const BIN_WIDTH: f64 = 180.0 / BINS as f64;
const NORM_EPS: f64 = 1e-5;
const RESIZE_TO: u32 = 128;

fn open_image(uri: &str) -> Result<image::DynamicImage, DetectError> {
    image::open(uri).map_err(|source| DetectError::Image { uri: uri.to_string(), source })
}

/// HoG descriptor of an image as-is (no resize): per-cell orientation
/// histograms, block-normalized and concatenated, block rows top to bottom.
///
/// Gradients are centered differences with replicated borders; orientation
/// is unsigned (mod 180 degrees) and each pixel's magnitude is split
/// linearly between the two nearest bin centers, wrapping at the 0/180
/// boundary. Pixels in partial edge cells (when a dimension is not a
/// multiple of 8) are ignored.
pub fn hog_descriptor(gray: &GrayImage) -> Vec<f64> {
    let w = gray.width() as usize;
    let h = gray.height() as usize;
    let cells_x = w / CELL;
    let cells_y = h / CELL;
    if cells_x < BLOCK || cells_y < BLOCK {
        return Vec::new();
    }

    let pixel = |x: usize, y: usize| -> f64 { gray.get_pixel(x as u32, y as u32)[0] as f64 };
    let mut hists = vec![[0.0f64; BINS]; cells_x * cells_y];
    for y in 0..h {
        for x in 0..w {
            let cx = x / CELL;
            let cy = y / CELL;
            if cx >= cells_x || cy >= cells_y {
                continue;
            }
            let gx = pixel((x + 1).min(w - 1), y) - pixel(x.saturating_sub(1), y);
            let gy = pixel(x, (y + 1).min(h - 1)) - pixel(x, y.saturating_sub(1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            let pos = angle / BIN_WIDTH - 0.5;
            let lower = pos.floor();
            let frac = pos - lower;
            let b0 = (lower as i64).rem_euclid(BINS as i64) as usize;
            let b1 = (b0 + 1) % BINS;
            let hist = &mut hists[cy * cells_x + cx];
            hist[b0] += mag * (1.0 - frac);
            hist[b1] += mag * frac;
        }
    }

    let mut descriptor = Vec::with_capacity((cells_x - 1) * (cells_y - 1) * BLOCK * BLOCK * BINS);
    for by in 0..=cells_y - BLOCK {
        for bx in 0..=cells_x - BLOCK {
            let mut block = [0.0f64; BLOCK * BLOCK * BINS];
            let mut k = 0;
            for dy in 0..BLOCK {
                for dx in 0..BLOCK {
                    let hist = &hists[(by + dy) * cells_x + (bx + dx)];
                    block[k..k + BINS].copy_from_slice(hist);
                    k += BINS;
                }
            }
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + NORM_EPS * NORM_EPS).sqrt();
            descriptor.extend(block.iter().map(|v| v / norm));
        }
    }
    descriptor
}

/// Cosine distance over raw (not pre-normalized) descriptors. Two zero
/// vectors are identical (0); a zero against a nonzero vector is maximally
/// unrelated (1).
fn cosine_distance_raw(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        }
    }
}

fn load_gray_resized(uri: &str) -> Result<GrayImage, DetectError> {
    let gray = open_image(uri)?.to_luma8();
    Ok(image::imageops::resize(&gray, RESIZE_TO, RESIZE_TO, FilterType::Triangle))
}

/// Cosine distance between the HoG descriptors of two images.
pub fn hog_pair_score(img_a: &str, img_b: &str) -> Result<f64, DetectError> {
    let da = hog_descriptor(&load_gray_resized(img_a)?);
    let db = hog_descriptor(&load_gray_resized(img_b)?);
    Ok(cosine_distance_raw(&da, &db))
}

/// 8x8x8 RGB histogram (top 3 bits per channel), L1-normalized.
pub fn color_histogram(img: &RgbImage) -> Vec<f64> {
    let mut hist = vec![0.0f64; 512];
    for p in img.pixels() {
        let idx = (((p[0] >> 5) as usize) << 6) | (((p[1] >> 5) as usize) << 3) | ((p[2] >> 5) as usize);
        hist[idx] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        for v in &mut hist {
            *v /= total;
        }
    }
    hist
}

/// L1 distance between the color histograms of two images. Ranges over
/// `[0, 2]`; disjoint color distributions score the full 2.
pub fn color_hist_pair_score(img_a: &str, img_b: &str) -> Result<f64, DetectError> {
    let ha = color_histogram(&open_image(img_a)?.to_rgb8());
    let hb = color_histogram(&open_image(img_b)?.to_rgb8());
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum())
}

/// Anything that maps an image reference to an embedding: a remote
/// image-embedding model, caption-then-embed, or the synthetic oracle.
pub trait ImageEmbedder: Send + Sync {
    fn embed_image(&self, uri: &str) -> Result<EmbeddingVector, DetectError>;
}

/// Cosine distance between per-image embedding vectors.
pub fn embedding_pair_score(
    img_a: &str,
    img_b: &str,
    backend: &dyn ImageEmbedder,
) -> Result<f64, DetectError> {
    let a = backend.embed_image(img_a)?;
    let b = backend.embed_image(img_b)?;
    Ok(1.0 - a.dot(&b)?)
}

/// Caption-then-embed mode: look a caption up for each image and embed the
/// caption text. Identical captions give identical vectors, so unchanged
/// scenes score 0.
pub struct CaptionThenEmbed<'a> {
    pub captions: &'a BTreeMap<String, String>,
    pub gateway: &'a Gateway,
}

impl ImageEmbedder for CaptionThenEmbed<'_> {
    fn embed_image(&self, uri: &str) -> Result<EmbeddingVector, DetectError> {
        let caption = self.captions.get(uri).ok_or_else(|| {
            DetectError::Gateway(GatewayError::BadRequest(format!("no caption for image {uri}")))
        })?;
        Ok(self.gateway.embed_text(caption)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::Path;

    fn save_rgb(path: &Path, img: &RgbImage) {
        img.save(path).unwrap();
    }

    fn checkerboard(side: u32, square: u32) -> RgbImage {
        ImageBuffer::from_fn(side, side, |x, y| {
            if ((x / square) + (y / square)) % 2 == 0 {
                Rgb([255u8, 255, 255])
            } else {
                Rgb([0u8, 0, 0])
            }
        })
    }

    fn solid(side: u32, rgb: [u8; 3]) -> RgbImage {
        ImageBuffer::from_pixel(side, side, Rgb(rgb))
    }

    fn random_image(seed: u64, side: u32) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(side, side, |_, _| {
            Rgb([rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()])
        })
    }

    /// Independent re-derivation of the descriptor definition with
    /// different code structure: per-pixel votes into a dense 4-D table,
    /// then block gathering by explicit index arithmetic.
    fn naive_hog(gray: &GrayImage) -> Vec<f64> {
        let w = gray.width() as usize;
        let h = gray.height() as usize;
        let cx_n = w / 8;
        let cy_n = h / 8;
        if cx_n < 2 || cy_n < 2 {
            return Vec::new();
        }
        let px = |x: i64, y: i64| -> f64 {
            let x = x.clamp(0, w as i64 - 1) as u32;
            let y = y.clamp(0, h as i64 - 1) as u32;
            gray.get_pixel(x, y)[0] as f64
        };
        let mut table = vec![vec![vec![0.0f64; 9]; cx_n]; cy_n];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (cx, cy) = (x as usize / 8, y as usize / 8);
                if cx >= cx_n || cy >= cy_n {
                    continue;
                }
                let gx = px(x + 1, y) - px(x - 1, y);
                let gy = px(x, y + 1) - px(x, y - 1);
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let mut theta = gy.atan2(gx).to_degrees();
                while theta < 0.0 {
                    theta += 180.0;
                }
                while theta >= 180.0 {
                    theta -= 180.0;
                }
                // Centers at 10, 30, ..., 170 degrees.
                let rel = theta / 20.0 - 0.5;
                let lo = rel.floor() as i64;
                let t = rel - rel.floor();
                let b_lo = lo.rem_euclid(9) as usize;
                let b_hi = (b_lo + 1) % 9;
                table[cy][cx][b_lo] += (1.0 - t) * mag;
                table[cy][cx][b_hi] += t * mag;
            }
        }
        let mut out = Vec::new();
        for by in 0..cy_n - 1 {
            for bx in 0..cx_n - 1 {
                let mut block = Vec::with_capacity(36);
                for dy in 0..2 {
                    for dx in 0..2 {
                        block.extend_from_slice(&table[by + dy][bx + dx]);
                    }
                }
                let norm =
                    (block.iter().map(|v| v * v).sum::<f64>() + 1e-5f64 * 1e-5f64).sqrt();
                out.extend(block.into_iter().map(|v| v / norm));
            }
        }
        out
    }

    fn pattern_16(kind: u8) -> GrayImage {
        ImageBuffer::from_fn(16, 16, |x, y| match kind {
            // Diagonal ramp.
            0 => Luma([((x * 13 + y * 7) % 256) as u8]),
            // Vertical stripes.
            1 => Luma([if x % 4 < 2 { 30 } else { 220 }]),
            // Blob-ish radial pattern.
            _ => {
                let dx = x as f64 - 7.5;
                let dy = y as f64 - 7.5;
                Luma([(255.0 - (dx * dx + dy * dy) * 2.0).clamp(0.0, 255.0) as u8])
            }
        })
    }

    #[test]
    fn descriptor_matches_independent_reference() {
        for kind in 0..3u8 {
            let img = pattern_16(kind);
            let fast = hog_descriptor(&img);
            let naive = naive_hog(&img);
            assert_eq!(fast.len(), naive.len());
            assert_eq!(fast.len(), 36, "16x16 image has exactly one 2x2-cell block");
            for (i, (a, b)) in fast.iter().zip(&naive).enumerate() {
                assert!((a - b).abs() < 1e-12, "pattern {kind}, component {i}: {a} vs {b}");
            }
        }
        // Cross-pattern distances agree too.
        let d_fast = cosine_distance_raw(&hog_descriptor(&pattern_16(0)), &hog_descriptor(&pattern_16(1)));
        let d_naive = cosine_distance_raw(&naive_hog(&pattern_16(0)), &naive_hog(&pattern_16(1)));
        assert!((d_fast - d_naive).abs() < 1e-12);
        assert!(d_fast > 0.0);
    }

    #[test]
    fn hog_identical_images_score_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        save_rgb(&path, &checkerboard(64, 8));
        let uri = path.to_str().unwrap();
        let score = hog_pair_score(uri, uri).unwrap();
        assert!(score.abs() < 1e-9, "score was {score}");
    }

    #[test]
    fn hog_pattern_vs_flat_gray_is_positive() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("pattern.png");
        let b = dir.path().join("gray.png");
        save_rgb(&a, &checkerboard(64, 8));
        save_rgb(&b, &solid(64, [128, 128, 128]));
        let score = hog_pair_score(a.to_str().unwrap(), b.to_str().unwrap()).unwrap();
        assert!(score > 0.0, "score was {score}");
    }

    #[test]
    fn hog_undecodable_image_names_the_uri() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("not-an-image.png");
        std::fs::write(&bad, b"plain text").unwrap();
        let err = hog_pair_score(bad.to_str().unwrap(), bad.to_str().unwrap()).unwrap_err();
        assert!(err.to_string().contains("not-an-image.png"), "error was: {err}");
    }

    #[test]
    fn color_hist_worked_examples() {
        let dir = tempfile::tempdir().unwrap();
        let red = dir.path().join("red.png");
        let blue = dir.path().join("blue.png");
        let half = dir.path().join("half.png");
        save_rgb(&red, &solid(8, [255, 0, 0]));
        save_rgb(&blue, &solid(8, [0, 0, 255]));
        // Left half red, right half blue.
        save_rgb(
            &half,
            &ImageBuffer::from_fn(8, 8, |x, _| {
                if x < 4 {
                    Rgb([255u8, 0, 0])
                } else {
                    Rgb([0u8, 0, 255])
                }
            }),
        );
        let (red, blue, half) =
            (red.to_str().unwrap(), blue.to_str().unwrap(), half.to_str().unwrap());
        assert_eq!(color_hist_pair_score(red, red).unwrap(), 0.0);
        assert!((color_hist_pair_score(red, blue).unwrap() - 2.0).abs() < 1e-12);
        assert!((color_hist_pair_score(half, red).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_scorers_are_symmetric_with_zero_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<String> = (0..3)
            .map(|i| {
                let p = dir.path().join(format!("r{i}.png"));
                save_rgb(&p, &random_image(100 + i, 32));
                p.to_str().unwrap().to_string()
            })
            .collect();
        for a in &paths {
            assert!(hog_pair_score(a, a).unwrap().abs() < 1e-9);
            assert_eq!(color_hist_pair_score(a, a).unwrap(), 0.0);
            for b in &paths {
                let hog_ab = hog_pair_score(a, b).unwrap();
                let hog_ba = hog_pair_score(b, a).unwrap();
                assert!((hog_ab - hog_ba).abs() < 1e-12);
                let ch_ab = color_hist_pair_score(a, b).unwrap();
                let ch_ba = color_hist_pair_score(b, a).unwrap();
                assert!((ch_ab - ch_ba).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_score_matches_hand_computed_cosine() {
        use crate::gateway::{GatewayConfig, SyntheticBackend, SyntheticWorld};
        use std::sync::Arc;
        let mut world = SyntheticWorld::new(4, 3);
        world.image_embeddings.insert("a.png".into(), vec![1.0, 0.0, 0.0, 0.0]);
        world.image_embeddings.insert("b.png".into(), vec![0.6, 0.8, 0.0, 0.0]);
        let backend = SyntheticBackend::new(world);
        // Unit vectors with dot 0.6 → distance 0.4.
        let d = embedding_pair_score("a.png", "b.png", &backend).unwrap();
        assert!((d - 0.4).abs() < 1e-6, "distance was {d}");
        assert!(embedding_pair_score("a.png", "a.png", &backend).unwrap().abs() < 1e-6);

        // Caption mode: identical captions embed identically.
        let world2 = SyntheticWorld::new(8, 3);
        let gateway = Gateway::new(
            Arc::new(SyntheticBackend::new(world2)),
            GatewayConfig::default(),
        )
        .unwrap();
        let captions: BTreeMap<String, String> = [
            ("x.png".to_string(), "a".to_string()),
            ("y.png".to_string(), "a".to_string()),
        ]
        .into();
        let capt = CaptionThenEmbed { captions: &captions, gateway: &gateway };
        let d = embedding_pair_score("x.png", "y.png", &capt).unwrap();
        assert!(d.abs() < 1e-6, "distance was {d}");
        assert!(embedding_pair_score("missing.png", "x.png", &capt).is_err());
    }
}
