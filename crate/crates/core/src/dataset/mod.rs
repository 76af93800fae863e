//! Normalization geometry for (thin, fat, muscular) image triplets and the
//! expansion of triplets into ordered transformation pairs.
//!
//! The thin member is the reference: the other members are cut out along
//! their masks, scaled uniformly to the thin mask's height and composited
//! onto the shared background so that their bottom anchors coincide.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

mod manifest;
pub mod synthetic;

pub use manifest::{
    apply_curation, enumerate_pairs, normalize_manifest, read_jsonl, read_manifest, write_jsonl, CurationFlag,
    CurationOutcome, CurationReport, ManifestEntry, MemberPaths, NormalizeRecord, TransformationPair,
};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("reference height must be at least 1 pixel")]
    BadReferenceHeight,
    #[error("triplet {identity} is missing its {member} member")]
    MissingMember { identity: String, member: BodyType },
    #[error("triplet {identity}: {what}")]
    DimensionMismatch { identity: String, what: String },
    #[error("triplet {identity} has {count} member(s); pairs need at least 2")]
    TooFewMembers { identity: String, count: usize },
    #[error("curation flag names unknown pair {0}")]
    UnknownPair(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path} line {line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyType {
    Thin,
    Fat,
    Muscular,
}

impl BodyType {
    pub const ALL: [BodyType; 3] = [BodyType::Thin, BodyType::Fat, BodyType::Muscular];

    pub fn as_str(self) -> &'static str {
        match self {
            BodyType::Thin => "thin",
            BodyType::Fat => "fat",
            BodyType::Muscular => "muscular",
        }
    }
}

impl fmt::Display for BodyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary foreground mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Mask { width, height, data: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Mask::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[(y * width + x) as usize] = f(x, y);
            }
        }
        m
    }

    /// Pixels at or above mid-gray are foreground.
    pub fn from_gray(img: &image::GrayImage) -> Self {
        Mask::from_fn(img.width(), img.height(), |x, y| img.get_pixel(x, y)[0] >= 128)
    }

    pub fn to_gray(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| image::Luma([if self.get(x, y) { 255 } else { 0 }]))
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.data[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    /// (x0, y0, x1, y1) inclusive bounds of the occupied pixels.
    pub fn bounding_box(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, _)) => (x0.min(x), y0, x1.max(x), y),
                    });
                }
            }
        }
        b
    }
}

/// Height and bottom anchor of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskExtent {
    pub height_px: u32,
    pub top_row: u32,
    pub bottom_row: u32,
    /// Midpoint (rounded down) of the leftmost and rightmost occupied
    /// columns of the bottom row.
    pub bottom_center_col: u32,
}

pub fn mask_extent(mask: &Mask) -> Result<MaskExtent> {
    let (_, top, _, bottom) = mask.bounding_box().ok_or(DatasetError::EmptyMask)?;
    let row = (0..mask.width).filter(|&x| mask.get(x, bottom));
    let (lo, hi) = row.fold((u32::MAX, 0), |(lo, hi), x| (lo.min(x), hi.max(x)));
    Ok(MaskExtent { height_px: bottom - top + 1, top_row: top, bottom_row: bottom, bottom_center_col: (lo + hi) / 2 })
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Cuts the mask's bounding box out of `image` and scales it uniformly by
/// `ref_height / mask height`. The image is resampled bilinearly. The mask
/// is resampled by nearest neighbour when enlarging and by footprint
/// coverage (any source pixel set) when shrinking, so the scaled mask's
/// height is exactly `ref_height`.
pub fn scale_to_reference(image: &RgbImage, mask: &Mask, ref_height: u32) -> Result<(RgbImage, Mask)> {
    if ref_height == 0 {
        return Err(DatasetError::BadReferenceHeight);
    }
    let (x0, y0, x1, y1) = mask.bounding_box().ok_or(DatasetError::EmptyMask)?;
    let (w, h) = ((x1 - x0 + 1) as u64, (y1 - y0 + 1) as u64);
    let r = ref_height as u64;
    let out_w = ((2 * w * r + h) / (2 * h)).max(1);
    let out_h = r;
    let inv = h as f64 / r as f64;

    let out_img = RgbImage::from_fn(out_w as u32, out_h as u32, |j, i| {
        bilinear(image, x0 as f64 + (j as f64 + 0.5) * inv - 0.5, y0 as f64 + (i as f64 + 0.5) * inv - 0.5)
    });

    let src = |sx: u64, sy: u64| mask.get(x0 + sx as u32, y0 + sy as u32);
    let out_mask = if r >= h {
        let nn = |k: u64, len: u64| ((2 * k + 1) * h / (2 * r)).min(len - 1);
        Mask::from_fn(out_w as u32, out_h as u32, |j, i| src(nn(j as u64, w), nn(i as u64, h)))
    } else {
        let span = |k: u64, n_out: u64, len: u64| {
            let lo = (k * h / r).min(len - 1);
            let hi = if k + 1 == n_out { len } else { ((k + 1) * h).div_ceil(r).min(len) };
            lo..hi.max(lo + 1)
        };
        Mask::from_fn(out_w as u32, out_h as u32, |j, i| {
            let rows = span(i as u64, out_h, h);
            rows.into_iter().any(|sy| span(j as u64, out_w, w).any(|sx| src(sx, sy)))
        })
    };
    Ok((out_img, out_mask))
}

/// Result of pasting a cutout onto a background.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: RgbImage,
    pub mask: Mask,
    /// Some masked pixels fell outside the canvas and were dropped.
    pub clipped: bool,
}

/// Pastes the masked pixels of the cutout onto `background`, translated so
/// that the cutout's bottom row and bottom centre land on `anchor`.
pub fn composite(background: &RgbImage, cutout: &RgbImage, cutout_mask: &Mask, anchor: &MaskExtent) -> Composite {
    let mut image = background.clone();
    let mut mask = Mask::empty(background.width(), background.height());
    let Ok(ext) = mask_extent(cutout_mask) else {
        return Composite { image, mask, clipped: false };
    };
    let dx = anchor.bottom_center_col as i64 - ext.bottom_center_col as i64;
    let dy = anchor.bottom_row as i64 - ext.bottom_row as i64;
    let mut clipped = false;
    for y in 0..cutout_mask.height {
        for x in 0..cutout_mask.width {
            if !cutout_mask.get(x, y) {
                continue;
            }
            let (tx, ty) = (x as i64 + dx, y as i64 + dy);
            if tx < 0 || ty < 0 || tx >= background.width() as i64 || ty >= background.height() as i64 {
                clipped = true;
                continue;
            }
            image.put_pixel(tx as u32, ty as u32, *cutout.get_pixel(x, y));
            mask.set(tx as u32, ty as u32, true);
        }
    }
    Composite { image, mask, clipped }
}

/// One member of a triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub image: RgbImage,
    pub mask: Mask,
}

/// Images of one identity in up to three body types over a shared clean
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub identity: String,
    pub background: RgbImage,
    pub members: BTreeMap<BodyType, Member>,
}

impl Triplet {
    fn validate(&self) -> Result<()> {
        let dims = self.background.dimensions();
        for (t, m) in &self.members {
            for (what, d) in [("image", m.image.dimensions()), ("mask", m.mask.dimensions())] {
                if d != dims {
                    return Err(DatasetError::DimensionMismatch {
                        identity: self.identity.clone(),
                        what: format!("{t} {what} is {}x{}, background is {}x{}", d.0, d.1, dims.0, dims.1),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTriplet {
    pub triplet: Triplet,
    /// Members whose composite lost pixels at the canvas edge.
    pub clipped: Vec<BodyType>,
}

/// Scales every non-thin member to the thin mask's height and composites it
/// onto the background at the thin member's anchor. The thin member is
/// returned unchanged.
pub fn normalize_triplet(triplet: &Triplet) -> Result<NormalizedTriplet> {
    triplet.validate()?;
    let thin = triplet
        .members
        .get(&BodyType::Thin)
        .ok_or_else(|| DatasetError::MissingMember { identity: triplet.identity.clone(), member: BodyType::Thin })?;
    let anchor = mask_extent(&thin.mask)?;
    let mut out = triplet.clone();
    let mut clipped = Vec::new();
    for (&t, member) in &triplet.members {
        if t == BodyType::Thin {
            continue;
        }
        let (img, mask) = scale_to_reference(&member.image, &member.mask, anchor.height_px)?;
        let c = composite(&triplet.background, &img, &mask, &anchor);
        if c.clipped {
            clipped.push(t);
        }
        out.members.insert(t, Member { image: c.image, mask: c.mask });
    }
    Ok(NormalizedTriplet { triplet: out, clipped })
}
