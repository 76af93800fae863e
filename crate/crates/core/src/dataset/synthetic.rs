//! Seeded stick-figure triplets for tests, benches and demos.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BodyType, Mask, Member, Triplet};

/// Figure of the given height whose lowest row is `bottom` and whose legs
/// straddle column `cx`. `half_width` is the torso half-width in pixels.
pub fn figure_mask(width: u32, height: u32, bottom: u32, tall: u32, cx: u32, half_width: f64) -> Mask {
    let top = bottom as f64 - tall as f64 + 1.0;
    let t = tall as f64;
    let cx = cx as f64;
    let head_r = 0.1 * t;
    let head_cy = top + head_r;
    let torso_cy = top + 0.42 * t;
    let torso_ry = 0.24 * t;
    let legs_top = top + 0.6 * t;
    Mask::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        if y < top || y > bottom as f64 {
            return false;
        }
        let head = (x - cx).powi(2) + (y - head_cy).powi(2) <= head_r * head_r;
        let torso = ((x - cx) / half_width).powi(2) + ((y - torso_cy) / torso_ry).powi(2) <= 1.0;
        let off = (x - cx).abs();
        let legs = y >= legs_top && off >= 0.1 * half_width && off <= 0.7 * half_width;
        // Keep the top row occupied so the figure's height is exactly `tall`.
        let crown = y == top && off <= 0.5;
        head || torso || legs || crown
    })
}

fn paint(background: &RgbImage, mask: &Mask, color: [u8; 3]) -> RgbImage {
    let mut img = background.clone();
    for (x, y, p) in img.enumerate_pixels_mut() {
        if mask.get(x, y) {
            let shade = ((x * 5 + y * 3) % 32) as u8;
            *p = Rgb([color[0].saturating_add(shade), color[1].saturating_add(shade), color[2].saturating_add(shade)]);
        }
    }
    img
}

/// A triplet on a `width`×`height` canvas. The thin member stands near the
/// bottom; the fat and muscular members are drawn at other heights and
/// positions so that normalization has real work to do, while staying
/// small enough to fit the canvas after scaling.
pub fn synthetic_triplet(identity: &str, seed: u64, width: u32, height: u32) -> Triplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let base: [u8; 3] = [rng.gen_range(40..90), rng.gen_range(90..140), rng.gen_range(140..200)];
    let background = RgbImage::from_fn(width, height, |x, y| {
        Rgb([base[0].wrapping_add((x * 64 / width) as u8), base[1].wrapping_add((y * 64 / height) as u8), base[2]])
    });

    let thin_tall = rng.gen_range((0.55 * h) as u32..=(0.7 * h) as u32);
    let thin_bottom = rng.gen_range((0.85 * h) as u32..=(0.95 * h) as u32).min(height - 1);
    let thin_cx = rng.gen_range((0.4 * w) as u32..=(0.6 * w) as u32);
    let mut members = BTreeMap::new();
    let thin_mask = figure_mask(width, height, thin_bottom, thin_tall, thin_cx, 0.1 * thin_tall as f64);
    members.insert(BodyType::Thin, Member { image: paint(&background, &thin_mask, [200, 150, 120]), mask: thin_mask });

    for (body, girth, color) in [(BodyType::Fat, 0.22, [180, 120, 100]), (BodyType::Muscular, 0.16, [160, 110, 90])] {
        let tall = rng.gen_range((0.4 * h) as u32..=(0.8 * h) as u32);
        let bottom = rng.gen_range(tall.max((0.5 * h) as u32)..height);
        let hw = girth * tall as f64;
        let margin = hw.ceil() as u32 + 1;
        let cx = rng.gen_range(margin..width - margin);
        let mask = figure_mask(width, height, bottom, tall, cx, hw);
        members.insert(body, Member { image: paint(&background, &mask, color), mask });
    }
    Triplet { identity: identity.to_string(), background, members }
}
