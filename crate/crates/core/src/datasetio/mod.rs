//! Dataset persistence: normalized label files, a COCO-style manifest,
//! nested random partitions, pixel-area size bins and the small-only test
//! subset.

mod coco;
mod labels;

pub use coco::{read_coco_manifest, write_coco_manifest};
pub use labels::{parse_labels_normalized, write_labels_normalized, write_labels_for_boxes};

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelBox;
use crate::rng;
use crate::scenario::{AnnotatedFrame, ModelId, SceneId};

/// Default bin edges in px²: 8², 16², 32².
pub const DEFAULT_BIN_EDGES: [f64; 3] = [64.0, 256.0, 1024.0];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: PixelBox<f64>,
    pub model_id: Option<ModelId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    /// Image path relative to the dataset root; `None` in label-only mode.
    pub image_path: Option<String>,
    pub width: u32,
    pub height: u32,
    pub scene_id: Option<SceneId>,
    pub boxes: Vec<LabeledBox>,
    pub splits: Vec<String>,
}

impl DatasetEntry {
    pub fn from_frame(frame: &AnnotatedFrame, image_path: Option<String>) -> Self {
        Self {
            id: frame.id.clone(),
            image_path,
            width: frame.image_width,
            height: frame.image_height,
            scene_id: Some(frame.scene_id),
            boxes: frame
                .boxes
                .iter()
                .map(|b| LabeledBox { bbox: b.bbox, model_id: Some(b.model_id) })
                .collect(),
            splits: Vec::new(),
        }
    }

    pub fn model_ids(&self) -> Vec<ModelId> {
        self.boxes.iter().filter_map(|b| b.model_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn largest_area(&self) -> Option<f64> {
        self.boxes.iter().map(|b| b.bbox.area()).reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    entries: Vec<DatasetEntry>,
    bin_edges: [f64; 3],
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self { entries: Vec::new(), bin_edges: DEFAULT_BIN_EDGES }
    }
}

impl DatasetManifest {
    pub fn new(entries: Vec<DatasetEntry>, bin_edges: [f64; 3]) -> Result<Self> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                problems.push(format!("duplicate entry id '{}'", e.id));
            }
        }
        if !(bin_edges[0] > 0.0 && bin_edges[0] < bin_edges[1] && bin_edges[1] < bin_edges[2]) {
            problems.push(format!("bin edges must be positive and strictly increasing, got {bin_edges:?}"));
        }
        if problems.is_empty() {
            Ok(Self { entries, bin_edges })
        } else {
            Err(DatasetError::Invalid(problems))
        }
    }

    pub fn from_entries(entries: Vec<DatasetEntry>) -> Result<Self> {
        Self::new(entries, DEFAULT_BIN_EDGES)
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bin_edges(&self) -> [f64; 3] {
        self.bin_edges
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    /// Entries whose id is in `ids`, in manifest order.
    pub fn select(&self, ids: &[String]) -> Self {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            entries: self.entries.iter().filter(|e| wanted.contains(e.id.as_str())).cloned().collect(),
            bin_edges: self.bin_edges,
        }
    }

    /// Adds `tag` to the split list of every entry in `ids`.
    pub fn tag_split(&mut self, ids: &[String], tag: &str) {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        for e in &mut self.entries {
            if wanted.contains(e.id.as_str()) && !e.splits.iter().any(|s| s == tag) {
                e.splits.push(tag.to_string());
            }
        }
    }

    /// Writes `labels/<id>.txt` for every entry under `root`.
    pub fn write_label_files(&self, root: &Path) -> Result<()> {
        let dir = root.join("labels");
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for e in &self.entries {
            let path = dir.join(format!("{}.txt", e.id));
            let text = write_labels_for_boxes(e.boxes.iter().map(|b| &b.bbox), e.width, e.height);
            std::fs::write(&path, text).map_err(|err| io_err(&path, err))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        read_coco_manifest(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, write_coco_manifest(self)).map_err(|e| io_err(path, e))
    }
}

/// The four Table-style pixel-area strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    /// `[0, 8²]`
    Tiny,
    /// `(8², 16²]`
    Small,
    /// `(16², 32²]`
    Medium,
    /// `(32², ∞)`
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 4] = [SizeClass::Tiny, SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    /// Bins are right-closed; the first one also includes 0.
    pub fn of_area(area: f64, edges: [f64; 3]) -> Self {
        if area <= edges[0] {
            SizeClass::Tiny
        } else if area <= edges[1] {
            SizeClass::Small
        } else if area <= edges[2] {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeClass::Tiny => "0~8^2",
            SizeClass::Small => "8^2~16^2",
            SizeClass::Medium => "16^2~32^2",
            SizeClass::Large => ">=32^2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeBin {
    pub class: SizeClass,
    pub count: usize,
}

/// How multi-target images are counted in [`size_histogram`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinCounting {
    /// One count per image, in the bin of its largest box.
    #[default]
    LargestBox,
    /// One count per box.
    PerBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub bins: [SizeBin; 4],
    /// Images with no boxes (only counted in [`BinCounting::LargestBox`]).
    pub empty_images: usize,
}

impl SizeHistogram {
    pub fn counts(&self) -> [usize; 4] {
        self.bins.map(|b| b.count)
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum::<usize>() + self.empty_images
    }

    /// One row shaped like the dataset table: four bins then the total.
    pub fn table_row(&self, name: &str) -> String {
        let c = self.counts();
        format!("{name:<16}{:>10}{:>10}{:>11}{:>9}{:>9}", c[0], c[1], c[2], c[3], self.total())
    }

    pub fn table_header() -> String {
        format!(
            "{:<16}{:>10}{:>10}{:>11}{:>9}{:>9}",
            "subset", "0~8^2", "8^2~16^2", "16^2~32^2", ">=32^2", "total"
        )
    }
}

pub fn size_histogram(manifest: &DatasetManifest, counting: BinCounting) -> SizeHistogram {
    let edges = manifest.bin_edges;
    let mut bins = SizeClass::ALL.map(|class| SizeBin { class, count: 0 });
    let mut empty_images = 0;
    for e in &manifest.entries {
        match counting {
            BinCounting::LargestBox => match e.largest_area() {
                Some(a) => bins[SizeClass::of_area(a, edges).index()].count += 1,
                None => empty_images += 1,
            },
            BinCounting::PerBox => {
                for b in &e.boxes {
                    bins[SizeClass::of_area(b.bbox.area(), edges).index()].count += 1;
                }
            }
        }
    }
    SizeHistogram { bins, empty_images }
}

/// Images whose every box has area at most the upper small edge (32²).
pub fn filter_small_test(manifest: &DatasetManifest) -> DatasetManifest {
    let limit = manifest.bin_edges[2];
    DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| e.boxes.iter().all(|b| b.bbox.area() <= limit))
            .cloned()
            .collect(),
        bin_edges: manifest.bin_edges,
    }
}

/// Disjoint random chunks; subset `k` is the union of chunks `0..=k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedPartition {
    /// Each chunk's ids, sorted.
    pub chunks: Vec<Vec<String>>,
}

impl NestedPartition {
    pub fn parts(&self) -> usize {
        self.chunks.len()
    }

    pub fn subset(&self, k: usize) -> Vec<String> {
        self.chunks[..=k].iter().flatten().cloned().collect()
    }

    pub fn subsets(&self) -> Vec<Vec<String>> {
        (0..self.chunks.len()).map(|k| self.subset(k)).collect()
    }

    /// Newline-terminated id list of subset `k`, chunk by chunk.
    pub fn split_file_contents(&self, k: usize) -> String {
        let mut s = String::new();
        for id in self.subset(k) {
            s.push_str(&id);
            s.push('\n');
        }
        s
    }

    /// Writes `<prefix><k>.split.txt` for `k = 1..=parts`.
    pub fn write_split_files(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        (0..self.parts())
            .map(|k| {
                let path = dir.join(format!("{prefix}{}.split.txt", k + 1));
                std::fs::write(&path, self.split_file_contents(k)).map_err(|e| io_err(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}

/// Cut points of `n` items into `parts` chunks, rounding `n·k/parts` half up.
pub fn chunk_bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| (2 * n * k + parts) / (2 * parts)).collect()
}

pub fn partition_nested(manifest: &DatasetManifest, parts: usize, seed: u64) -> Result<NestedPartition> {
    if parts == 0 {
        return Err(DatasetError::Invalid(vec!["parts must be at least 1".into()]));
    }
    if parts > manifest.len() {
        return Err(DatasetError::Invalid(vec![format!(
            "cannot cut {} entries into {parts} parts",
            manifest.len()
        )]));
    }
    let mut ids = manifest.ids();
    ids.shuffle(&mut rng::stream(seed, rng::PARTITION));
    let bounds = chunk_bounds(ids.len(), parts);
    let chunks = bounds
        .windows(2)
        .map(|w| {
            let mut c = ids[w[0]..w[1]].to_vec();
            c.sort();
            c
        })
        .collect();
    Ok(NestedPartition { chunks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn entry(id: &str, sides: &[(f64, f64)]) -> DatasetEntry {
        DatasetEntry {
            id: id.to_string(),
            image_path: None,
            width: 640,
            height: 640,
            scene_id: Some(SceneId::Pool),
            boxes: sides
                .iter()
                .map(|&(w, h)| LabeledBox { bbox: PixelBox::new(10.0, 10.0, 10.0 + w, 10.0 + h).unwrap(), model_id: None })
                .collect(),
            splits: vec![],
        }
    }

    fn manifest_of(n: usize) -> DatasetManifest {
        DatasetManifest::from_entries((0..n).map(|i| entry(&format!("img{i:06}"), &[(5.0, 5.0)])).collect()).unwrap()
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DatasetManifest::from_entries(vec![entry("a", &[]), entry("a", &[])]).unwrap_err();
        assert!(matches!(err, DatasetError::Invalid(_)));
        assert!(DatasetManifest::new(vec![], [64.0, 64.0, 1024.0]).is_err());
    }

    #[test]
    fn histogram_of_empty_manifest() {
        let h = size_histogram(&DatasetManifest::default(), BinCounting::LargestBox);
        assert_eq!(h.counts(), [0; 4]);
        assert_eq!(h.total(), 0);
    }

    #[test]
    fn ten_by_ten_is_second_bin() {
        let m = DatasetManifest::from_entries(vec![entry("a", &[(10.0, 10.0)])]).unwrap();
        assert_eq!(size_histogram(&m, BinCounting::LargestBox).counts(), [0, 1, 0, 0]);
    }

    #[test]
    fn bin_edges_are_right_closed() {
        let e = DEFAULT_BIN_EDGES;
        assert_eq!(SizeClass::of_area(0.0, e), SizeClass::Tiny);
        assert_eq!(SizeClass::of_area(64.0, e), SizeClass::Tiny);
        assert_eq!(SizeClass::of_area(64.5, e), SizeClass::Small);
        assert_eq!(SizeClass::of_area(256.0, e), SizeClass::Small);
        assert_eq!(SizeClass::of_area(1024.0, e), SizeClass::Medium);
        assert_eq!(SizeClass::of_area(1024.001, e), SizeClass::Large);
    }

    #[test]
    fn largest_box_decides_image_bin() {
        let m = DatasetManifest::from_entries(vec![entry("a", &[(4.0, 4.0), (20.0, 20.0)]), entry("b", &[])]).unwrap();
        let h = size_histogram(&m, BinCounting::LargestBox);
        assert_eq!(h.counts(), [0, 0, 1, 0]);
        assert_eq!(h.empty_images, 1);
        assert_eq!(h.total(), m.len());
        assert_eq!(size_histogram(&m, BinCounting::PerBox).counts(), [1, 0, 1, 0]);
    }

    #[test]
    fn small_filter_is_per_image() {
        let m = DatasetManifest::from_entries(vec![
            entry("mixed", &[(20.0, 20.0), (40.0, 40.0)]),
            entry("small", &[(32.0, 32.0)]),
            entry("large", &[(33.0, 32.0)]),
        ])
        .unwrap();
        assert_eq!(filter_small_test(&m).ids(), vec!["small".to_string()]);
        let all_large = DatasetManifest::from_entries(vec![entry("x", &[(50.0, 50.0)])]).unwrap();
        assert!(filter_small_test(&all_large).is_empty());
    }

    #[test]
    fn single_part_is_whole() {
        let m = manifest_of(7);
        let p = partition_nested(&m, 1, 3).unwrap();
        let mut ids = m.ids();
        ids.sort();
        assert_eq!(p.subset(0), ids);
    }

    #[test]
    fn too_many_parts_rejected() {
        assert!(partition_nested(&manifest_of(2), 3, 0).is_err());
        assert!(partition_nested(&manifest_of(2), 0, 0).is_err());
    }

    #[test]
    fn rd_style_split_sizes() {
        assert_eq!(chunk_bounds(18481, 3), vec![0, 6160, 12321, 18481]);
        let p = partition_nested(&manifest_of(18481), 3, 11).unwrap();
        let sizes: Vec<usize> = p.subsets().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![6160, 12321, 18481]);
    }

    #[test]
    fn split_files_reproducible() {
        let m = manifest_of(50);
        let a = partition_nested(&m, 3, 99).unwrap();
        let b = partition_nested(&m, 3, 99).unwrap();
        for k in 0..3 {
            assert_eq!(a.split_file_contents(k), b.split_file_contents(k));
        }
        assert_ne!(a, partition_nested(&m, 3, 100).unwrap());
        assert!(a.split_file_contents(2).starts_with(&a.split_file_contents(1)));
    }

    proptest! {
        #[test]
        fn partition_nesting_and_disjointness(n in 1usize..300, parts in 1usize..8, seed in any::<u64>()) {
            prop_assume!(parts <= n);
            let m = manifest_of(n);
            let p = partition_nested(&m, parts, seed).unwrap();
            let mut seen = BTreeSet::new();
            for c in &p.chunks {
                for id in c {
                    prop_assert!(seen.insert(id.clone()), "chunks overlap");
                }
            }
            prop_assert_eq!(seen.len(), n);
            let subsets = p.subsets();
            for w in subsets.windows(2) {
                let small: BTreeSet<_> = w[0].iter().collect();
                let big: BTreeSet<_> = w[1].iter().collect();
                prop_assert!(small.is_subset(&big) && small.len() < big.len());
            }
            prop_assert_eq!(subsets.last().unwrap().len(), n);
            for (k, c) in p.chunks.iter().enumerate() {
                let exact = n as f64 / parts as f64;
                prop_assert!((c.len() as f64 - exact).abs() <= 1.0 + 1e-9, "chunk {} has {}", k, c.len());
            }
        }

        #[test]
        fn histogram_and_filter_match_brute_force(
            images in proptest::collection::vec(proptest::collection::vec((0.5f64..60.0, 0.5f64..60.0), 0..5), 0..40)
        ) {
            let entries: Vec<_> = images.iter().enumerate().map(|(i, s)| entry(&format!("e{i}"), s)).collect();
            let m = DatasetManifest::from_entries(entries).unwrap();
            // Independent recount.
            let mut expect = [0usize; 4];
            let mut empty = 0usize;
            let mut small_ids = Vec::new();
            for (i, sides) in images.iter().enumerate() {
                let areas: Vec<f64> = sides.iter().map(|(w, h)| (10.0 + w - 10.0) * (10.0 + h - 10.0)).collect();
                if let Some(max) = areas.iter().cloned().fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |m| m.max(a)))) {
                    let bin = [64.0, 256.0, 1024.0].iter().position(|&edge| max <= edge).unwrap_or(3);
                    expect[bin] += 1;
                } else {
                    empty += 1;
                }
                if areas.iter().all(|&a| a <= 1024.0) {
                    small_ids.push(format!("e{i}"));
                }
            }
            let h = size_histogram(&m, BinCounting::LargestBox);
            prop_assert_eq!(h.counts(), expect);
            prop_assert_eq!(h.empty_images, empty);
            prop_assert_eq!(h.total(), m.len());
            let f = filter_small_test(&m);
            prop_assert_eq!(f.ids(), small_ids);
            prop_assert_eq!(filter_small_test(&f), f);
        }
    }
}
