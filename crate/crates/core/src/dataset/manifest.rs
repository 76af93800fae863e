//! Manifest and curation files, pair enumeration and batch normalization.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{mask_extent, normalize_triplet, BodyType, DatasetError, Mask, MaskExtent, Member, Result, Triplet};
use crate::Exec;

/// Image and mask files of one triplet member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberPaths {
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// One line of a dataset manifest. Relative paths are resolved against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub identity: String,
    pub background: PathBuf,
    pub members: BTreeMap<BodyType, MemberPaths>,
}

/// An ordered source→target pair of one identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationPair {
    /// `identity/source→target`.
    pub id: String,
    pub identity: String,
    pub source: BodyType,
    pub target: BodyType,
    pub source_image: PathBuf,
    pub target_image: PathBuf,
    pub keep: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_reason: Option<String>,
}

pub fn pair_id(identity: &str, source: BodyType, target: BodyType) -> String {
    format!("{identity}/{source}→{target}")
}

/// All ordered pairs of distinct present members: m·(m − 1) of them.
pub fn enumerate_pairs(entry: &ManifestEntry) -> Result<Vec<TransformationPair>> {
    let present: Vec<_> = entry.members.iter().collect();
    if present.len() < 2 {
        return Err(DatasetError::TooFewMembers { identity: entry.identity.clone(), count: present.len() });
    }
    let mut pairs = Vec::with_capacity(present.len() * (present.len() - 1));
    for &(&source, src) in &present {
        for &(&target, dst) in &present {
            if source == target {
                continue;
            }
            pairs.push(TransformationPair {
                id: pair_id(&entry.identity, source, target),
                identity: entry.identity.clone(),
                source,
                target,
                source_image: src.image.clone(),
                target_image: dst.image.clone(),
                keep: true,
                drop_reason: None,
            });
        }
    }
    Ok(pairs)
}

/// One line of a curation flags file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationFlag {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Dropped-pair count per reason.
    pub reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationOutcome {
    /// Every input pair, with `keep` and `drop_reason` filled in.
    pub pairs: Vec<TransformationPair>,
    pub report: CurationReport,
}

impl CurationOutcome {
    pub fn kept(&self) -> impl Iterator<Item = &TransformationPair> {
        self.pairs.iter().filter(|p| p.keep)
    }
}

/// Marks flagged pairs as dropped. A pair flagged more than once keeps its
/// first reason.
pub fn apply_curation(mut pairs: Vec<TransformationPair>, flags: &[CurationFlag]) -> Result<CurationOutcome> {
    let index: HashMap<&str, usize> = pairs.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut drops: Vec<(usize, &str)> = Vec::with_capacity(flags.len());
    for f in flags {
        let i = *index.get(f.pair_id.as_str()).ok_or_else(|| DatasetError::UnknownPair(f.pair_id.clone()))?;
        drops.push((i, &f.reason));
    }
    let mut report = CurationReport { total: pairs.len(), ..Default::default() };
    for (i, reason) in drops {
        let p = &mut pairs[i];
        if p.keep {
            p.keep = false;
            p.drop_reason = Some(reason.to_string());
            *report.reasons.entry(reason.to_string()).or_default() += 1;
            report.dropped += 1;
        }
    }
    report.kept = report.total - report.dropped;
    Ok(CurationOutcome { pairs, report })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|source| DatasetError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let io = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for item in items {
        let line = serde_json::to_string(item).expect("plain data serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a manifest and makes its paths absolute relative to its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<ManifestEntry> = read_jsonl(path)?;
    for e in &mut entries {
        e.background = base.join(&e.background);
        for m in e.members.values_mut() {
            m.image = base.join(&m.image);
            m.mask = base.join(&m.mask);
        }
    }
    Ok(entries)
}

fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

fn load_mask(path: &Path) -> Result<Mask> {
    image::open(path)
        .map(|i| Mask::from_gray(&i.to_luma8()))
        .map_err(|source| DatasetError::Image { path: path.to_path_buf(), source })
}

impl ManifestEntry {
    pub fn load(&self) -> Result<Triplet> {
        let mut members = BTreeMap::new();
        for (&t, p) in &self.members {
            members.insert(t, Member { image: load_rgb(&p.image)?, mask: load_mask(&p.mask)? });
        }
        Ok(Triplet { identity: self.identity.clone(), background: load_rgb(&self.background)?, members })
    }
}

impl Triplet {
    /// Writes `<dir>/background.png`, `<dir>/<type>.png` and
    /// `<dir>/<type>_mask.png`, returning the manifest line describing them.
    pub fn save(&self, dir: &Path) -> Result<ManifestEntry> {
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
        let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, path: PathBuf| {
            img(&path).map_err(|source| DatasetError::Image { path: path.clone(), source })?;
            Ok::<_, DatasetError>(path)
        };
        let background = save(&|p| self.background.save(p), dir.join("background.png"))?;
        let mut members = BTreeMap::new();
        for (&t, m) in &self.members {
            let image = save(&|p| m.image.save(p), dir.join(format!("{t}.png")))?;
            let mask = save(&|p| m.mask.to_gray().save(p), dir.join(format!("{t}_mask.png")))?;
            members.insert(t, MemberPaths { image, mask });
        }
        Ok(ManifestEntry { identity: self.identity.clone(), background, members })
    }
}

/// Summary of one normalized triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizeRecord {
    pub identity: String,
    pub anchor: MaskExtent,
    pub heights: BTreeMap<BodyType, u32>,
    pub clipped: Vec<BodyType>,
    pub output: ManifestEntry,
}

/// Loads, normalizes and saves every triplet under `out_dir/<identity>/`.
/// Triplets are independent and run under `exec`; records come back in
/// manifest order.
pub fn normalize_manifest(entries: &[ManifestEntry], out_dir: &Path, exec: Exec) -> Result<Vec<NormalizeRecord>> {
    exec.map_indices(entries.len(), |i| {
        let entry = &entries[i];
        let normalized = normalize_triplet(&entry.load()?)?;
        let t = &normalized.triplet;
        let anchor = mask_extent(&t.members[&BodyType::Thin].mask)?;
        let mut heights = BTreeMap::new();
        for (&b, m) in &t.members {
            heights.insert(b, mask_extent(&m.mask)?.height_px);
        }
        let output = t.save(&out_dir.join(&entry.identity))?;
        Ok(NormalizeRecord { identity: entry.identity.clone(), anchor, heights, clipped: normalized.clipped, output })
    })
    .into_iter()
    .collect()
}
