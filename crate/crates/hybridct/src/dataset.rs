//! Dataset discovery, deterministic stratified splitting, and image loading.
//!
//! The on-disk layout is one directory per class under a single root
//! (`<root>/COVID/*.png`, `<root>/non-COVID/*.png`). Scanning produces a
//! [`DatasetManifest`]; [`split_dataset`] assigns every record to TRAIN, VAL
//! or TEST deterministically given a seed; [`load_image`] decodes a record
//! into a `224x224x3` tensor scaled to `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Side length expected by all three backbones.
pub const IMAGE_SIDE: usize = 224;

/// Binary class label; COVID is the positive class throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Covid,
    NonCovid,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Covid, Label::NonCovid];

    /// Numeric encoding used for training targets (COVID = 1).
    pub fn as_f32(self) -> f32 {
        match self {
            Label::Covid => 1.0,
            Label::NonCovid => 0.0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Covid => write!(f, "COVID"),
            Label::NonCovid => write!(f, "NONCOVID"),
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "COVID" => Ok(Label::Covid),
            "NONCOVID" => Ok(Label::NonCovid),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

/// Split assignment of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "TRAIN"),
            Split::Val => write!(f, "VAL"),
            Split::Test => write!(f, "TEST"),
        }
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// One labeled image. `record_id` is the root-relative path with `/`
/// separators, which keeps manifests machine-independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub record_id: String,
    pub label: Label,
    pub split: Option<Split>,
}

/// Seed and fractions that produced a split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    /// Fraction of all records assigned to the training portion (TRAIN + VAL).
    pub train_frac: f64,
    /// Fraction of the training portion carved out as VAL.
    pub val_frac: f64,
}

/// The labeled corpus plus (optionally) its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub split: Option<SplitSpec>,
}

impl DatasetManifest {
    /// Absolute path of a record under this manifest's root.
    pub fn path_of(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.record_id)
    }

    /// Records assigned to `split`, in manifest order.
    pub fn records_in(&self, split: Split) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .collect()
    }

    /// Count of records per (label, split). Unsplit records are ignored.
    pub fn counts(&self) -> BTreeMap<(Label, Split), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            if let Some(s) = r.split {
                *counts.entry((r.label, s)).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Count of records per label.
    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }
}

/// How class directory names map to labels. Any directory whose name is not
/// listed in `covid_names` maps to NONCOVID.
#[derive(Debug, Clone)]
pub struct LabelMapping {
    pub covid_names: Vec<String>,
}

impl Default for LabelMapping {
    fn default() -> Self {
        LabelMapping {
            covid_names: vec!["COVID".to_string()],
        }
    }
}

impl LabelMapping {
    fn label_for(&self, dir_name: &str) -> Label {
        if self.covid_names.iter().any(|n| n == dir_name) {
            Label::Covid
        } else {
            Label::NonCovid
        }
    }
}

/// Result of a scan: the manifest plus any files that were skipped because
/// they could not be decoded as images.
#[derive(Debug)]
pub struct ScanOutcome {
    pub manifest: DatasetManifest,
    pub skipped: Vec<PathBuf>,
}

/// Discover the two-class corpus under `root`.
///
/// `root` must contain exactly two subdirectories, one per class. Files whose
/// header does not decode as an image are skipped with a warning rather than
/// failing the scan. Records come back sorted by relative path so downstream
/// seeded shuffles are machine-independent.
pub fn scan_dataset(root: &Path, mapping: &LabelMapping) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() != 2 {
        return Err(Error::Config(format!(
            "expected exactly 2 class directories under {}, found {}",
            root.display(),
            class_dirs.len()
        )));
    }
    let names: Vec<String> = class_dirs
        .iter()
        .map(|d| d.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let labels: Vec<Label> = names.iter().map(|n| mapping.label_for(n)).collect();
    if labels[0] == labels[1] {
        return Err(Error::Config(format!(
            "class directories '{}' and '{}' both map to label {}",
            names[0], names[1], labels[0]
        )));
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (dir, &label) in class_dirs.iter().zip(&labels) {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(Error::io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            if decodable(&file) {
                let dir_name = dir.file_name().unwrap_or_default().to_string_lossy();
                let file_name = file.file_name().unwrap_or_default().to_string_lossy();
                records.push(ImageRecord {
                    record_id: format!("{dir_name}/{file_name}"),
                    label,
                    split: None,
                });
            } else {
                log::warn!("skipping undecodable file {}", file.display());
                skipped.push(file);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    Ok(ScanOutcome {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            records,
            split: None,
        },
        skipped,
    })
}

/// Cheap decodability probe: reads only the image header.
fn decodable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .ok()
        .and_then(|r| r.with_guessed_format().ok())
        .and_then(|r| r.into_dimensions().ok())
        .is_some()
}

/// Largest-remainder apportionment of `total_target` items over classes with
/// ideal shares `targets[i]`. Guarantees each count is within one of its
/// ideal share and the counts sum to `total_target`.
fn apportion(targets: &[f64], total_target: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let mut remaining = total_target.saturating_sub(counts.iter().sum::<usize>());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    // Largest fractional remainder first; ties broken toward the larger share.
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra)
            .unwrap()
            .then(targets[b].partial_cmp(&targets[a]).unwrap())
            .then(a.cmp(&b))
    });
    for &i in &order {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Assign every record to TRAIN / VAL / TEST, stratified by class.
///
/// The training portion holds `train_frac` of all records; `val_frac` of
/// that portion is carved out as VAL so TEST is never seen during training.
/// Per-class quotas come from a controlled rounding of the class-by-split
/// contingency table, which keeps every (class, split) cell within one image
/// of the global class proportion. Record order within a class is shuffled
/// with a seed-derived generator, so the whole assignment is a pure function
/// of `(seed, fractions, sorted record ids)`.
pub fn split_dataset(
    manifest: &DatasetManifest,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Invalid(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Invalid(format!(
            "val_frac must be in [0, 1), got {val_frac}"
        )));
    }

    let label_counts = manifest.label_counts();
    let labels: Vec<Label> = label_counts.keys().copied().collect();
    let sizes: Vec<usize> = label_counts.values().copied().collect();
    let total: usize = sizes.iter().sum();

    // Split totals: TEST, VAL, TRAIN.
    let train_portion_total = ((total as f64) * train_frac).floor() as usize;
    let val_total = ((train_portion_total as f64) * val_frac).floor() as usize;
    let split_totals = [
        total - train_portion_total,
        val_total,
        train_portion_total - val_total,
    ];

    // Round the first class's cells to its exact size; remaining classes take
    // the column remainders, so every cell deviates from the ideal
    // `split_total * class_fraction` by less than one image.
    let mut cells: Vec<[usize; 3]> = Vec::with_capacity(labels.len());
    match sizes.len() {
        1 => cells.push(split_totals),
        2 => {
            let ideals: Vec<f64> = split_totals
                .iter()
                .map(|&s| s as f64 * sizes[0] as f64 / total as f64)
                .collect();
            let first = apportion(&ideals, sizes[0]);
            cells.push([first[0], first[1], first[2]]);
            cells.push([
                split_totals[0] - first[0],
                split_totals[1] - first[1],
                split_totals[2] - first[2],
            ]);
        }
        n => {
            return Err(Error::Stratification(format!(
                "expected a binary dataset, found {n} classes"
            )));
        }
    }

    for (&label, class_cells) in labels.iter().zip(&cells) {
        let [n_test, n_val, n_train] = *class_cells;
        if n_train == 0 || n_test == 0 {
            return Err(Error::Stratification(format!(
                "class {label} has {} images, too few for fractions train={train_frac} \
                 val={val_frac} (test {n_test}, val {n_val}, train {n_train})",
                label_counts[&label]
            )));
        }
        if val_frac > 0.0 && n_val == 0 {
            return Err(Error::Stratification(format!(
                "class {label} has {} images, too few to populate VAL at val_frac={val_frac}",
                label_counts[&label]
            )));
        }
    }

    let mut out = manifest.clone();
    for (class_idx, &label) in labels.iter().enumerate() {
        let mut idx: Vec<usize> = out
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = derive_rng(seed, "split", class_idx as u64);
        idx.shuffle(&mut rng);

        let [n_test, n_val, _] = cells[class_idx];
        for (pos, &rec_i) in idx.iter().enumerate() {
            out.records[rec_i].split = Some(if pos < n_test {
                Split::Test
            } else if pos < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    out.split = Some(SplitSpec {
        seed,
        train_frac,
        val_frac,
    });
    Ok(out)
}

/// Like [`split_dataset`] but assigns whole patient groups to a split.
///
/// `patient_regex` is applied to each record id; capture group 1 is the
/// patient key. Groups are shuffled per class and assigned greedily to TEST,
/// then VAL, until each quota is met, so per-class counts can deviate from
/// the image-level quotas by up to one group.
pub fn split_dataset_by_patient(
    manifest: &DatasetManifest,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
    patient_regex: &str,
) -> Result<DatasetManifest> {
    let re = regex::Regex::new(patient_regex)
        .map_err(|e| Error::Config(format!("bad patient regex: {e}")))?;
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Invalid(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }

    let mut out = manifest.clone();
    let label_counts = manifest.label_counts();
    for (class_idx, (&label, &n)) in label_counts.iter().enumerate() {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in out.records.iter().enumerate() {
            if r.label != label {
                continue;
            }
            let key = re
                .captures(&r.record_id)
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().to_string())
                .ok_or_else(|| {
                    Error::Config(format!(
                        "patient regex '{patient_regex}' did not match record '{}'",
                        r.record_id
                    ))
                })?;
            groups.entry(key).or_default().push(i);
        }
        if groups.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {label} has {} patient group(s); need at least 2",
                groups.len()
            )));
        }
        let mut keys: Vec<&String> = groups.keys().collect();
        let mut rng = derive_rng(seed, "patient-split", class_idx as u64);
        keys.shuffle(&mut rng);

        let n_test_quota = n - ((n as f64) * train_frac).floor() as usize;
        let n_val_quota = (((n - n_test_quota) as f64) * val_frac).floor() as usize;
        let mut assigned_test = 0usize;
        let mut assigned_val = 0usize;
        for key in keys {
            let members = &groups[key];
            let split = if assigned_test < n_test_quota {
                assigned_test += members.len();
                Split::Test
            } else if assigned_val < n_val_quota {
                assigned_val += members.len();
                Split::Val
            } else {
                Split::Train
            };
            for &i in members {
                out.records[i].split = Some(split);
            }
        }
        let n_train = out
            .records
            .iter()
            .filter(|r| r.label == label && r.split == Some(Split::Train))
            .count();
        if n_train == 0 || assigned_test == 0 {
            return Err(Error::Stratification(format!(
                "class {label}: patient grouping left an empty TRAIN or TEST split"
            )));
        }
    }
    out.split = Some(SplitSpec {
        seed,
        train_frac,
        val_frac,
    });
    Ok(out)
}

/// A decoded, resized, `[0, 1]`-scaled image: shape `(224, 224, 3)`, HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    /// Record id the tensor came from.
    pub source: String,
}

impl ImageTensor {
    /// Convert an already-decoded image. Grayscale inputs get their single
    /// channel replicated; resize is bilinear.
    pub fn from_dynamic(img: &image::DynamicImage, source: impl Into<String>) -> ImageTensor {
        let rgb = img.to_rgb8();
        let side = IMAGE_SIDE as u32;
        let resized = if rgb.width() == side && rgb.height() == side {
            rgb
        } else {
            image::imageops::resize(&rgb, side, side, image::imageops::FilterType::Triangle)
        };
        let mut data = Array3::<f32>::zeros((IMAGE_SIDE, IMAGE_SIDE, 3));
        for (x, y, pixel) in resized.enumerate_pixels() {
            for c in 0..3 {
                data[(y as usize, x as usize, c)] = f32::from(pixel.0[c]) / 255.0;
            }
        }
        ImageTensor {
            data,
            source: source.into(),
        }
    }
}

/// Decode, resize to 224x224 (bilinear), replicate grayscale channels, and
/// scale to `[0, 1]`.
pub fn load_image(path: &Path, source: impl Into<String>) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::ImageLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(ImageTensor::from_dynamic(&img, source))
}

/// Load a record relative to its manifest root.
pub fn load_record(manifest: &DatasetManifest, record: &ImageRecord) -> Result<ImageTensor> {
    load_image(&manifest.path_of(record), record.record_id.clone())
}

const MANIFEST_HEADER: &str = "hybridct-manifest v1";

/// Write a manifest as line-oriented structured text. The same manifest
/// always serializes to identical bytes.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(MANIFEST_HEADER);
    buf.push('\n');
    buf.push_str(&format!("root\t{}\n", manifest.root.display()));
    if let Some(spec) = &manifest.split {
        buf.push_str(&format!(
            "split\tseed={}\ttrain_frac={}\tval_frac={}\n",
            spec.seed, spec.train_frac, spec.val_frac
        ));
        for ((label, split), count) in manifest.counts() {
            buf.push_str(&format!("count\t{label}\t{split}\t{count}\n"));
        }
    }
    buf.push_str(&format!("records\t{}\n", manifest.records.len()));
    for r in &manifest.records {
        let split = r.split.map_or("-".to_string(), |s| s.to_string());
        buf.push_str(&format!("record\t{split}\t{}\t{}\n", r.label, r.record_id));
    }
    std::fs::write(path, buf).map_err(Error::io(path))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Read a manifest written by [`write_manifest`]. Errors carry the offending
/// line number; header counts are validated against the records.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty manifest file"))?;
    let first = first.map_err(Error::io(path))?;
    if first != MANIFEST_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{MANIFEST_HEADER}', found '{first}'"),
        ));
    }

    let mut root = None;
    let mut split = None;
    let mut declared_counts: BTreeMap<(Label, Split), usize> = BTreeMap::new();
    let mut declared_records = None;
    let mut records = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(Error::io(path))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields[0] {
            "root" if fields.len() == 2 => root = Some(PathBuf::from(fields[1])),
            "split" if fields.len() == 4 => {
                let get = |field: &str, prefix: &str| -> Result<f64> {
                    field
                        .strip_prefix(prefix)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| parse_err(path, line_no, format!("bad field '{field}'")))
                };
                let seed = fields[1]
                    .strip_prefix("seed=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| parse_err(path, line_no, format!("bad field '{}'", fields[1])))?;
                split = Some(SplitSpec {
                    seed,
                    train_frac: get(fields[2], "train_frac=")?,
                    val_frac: get(fields[3], "val_frac=")?,
                });
            }
            "count" if fields.len() == 4 => {
                let label: Label = fields[1]
                    .parse()
                    .map_err(|e: String| parse_err(path, line_no, e))?;
                let sp: Split = fields[2]
                    .parse()
                    .map_err(|e: String| parse_err(path, line_no, e))?;
                let count: usize = fields[3]
                    .parse()
                    .map_err(|_| parse_err(path, line_no, format!("bad count '{}'", fields[3])))?;
                declared_counts.insert((label, sp), count);
            }
            "records" if fields.len() == 2 => {
                declared_records = Some(fields[1].parse::<usize>().map_err(|_| {
                    parse_err(path, line_no, format!("bad record count '{}'", fields[1]))
                })?);
            }
            "record" if fields.len() == 4 => {
                let sp = match fields[1] {
                    "-" => None,
                    s => Some(s.parse::<Split>().map_err(|e| parse_err(path, line_no, e))?),
                };
                let label: Label = fields[2]
                    .parse()
                    .map_err(|e: String| parse_err(path, line_no, e))?;
                records.push(ImageRecord {
                    record_id: fields[3].to_string(),
                    label,
                    split: sp,
                });
            }
            other => {
                return Err(parse_err(path, line_no, format!("unrecognized line '{other}'")));
            }
        }
    }

    let manifest = DatasetManifest {
        root: root.ok_or_else(|| parse_err(path, 0, "missing root line"))?,
        records,
        split,
    };
    if let Some(n) = declared_records {
        if n != manifest.records.len() {
            return Err(parse_err(
                path,
                0,
                format!("header declares {n} records, found {}", manifest.records.len()),
            ));
        }
    }
    if !declared_counts.is_empty() && declared_counts != manifest.counts() {
        return Err(parse_err(path, 0, "header counts disagree with records"));
    }
    let mut seen = std::collections::HashSet::new();
    for r in &manifest.records {
        if !seen.insert(&r.record_id) {
            return Err(parse_err(path, 0, format!("duplicate record id '{}'", r.record_id)));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(path: &Path, w: u32, h: u32, value: u8) {
        let img = RgbImage::from_pixel(w, h, Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    fn fake_manifest(n_covid: usize, n_non: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for i in 0..n_covid {
            records.push(ImageRecord {
                record_id: format!("COVID/img{i:04}.png"),
                label: Label::Covid,
                split: None,
            });
        }
        for i in 0..n_non {
            records.push(ImageRecord {
                record_id: format!("non-COVID/img{i:04}.png"),
                label: Label::NonCovid,
                split: None,
            });
        }
        records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        DatasetManifest {
            root: PathBuf::from("/data"),
            records,
            split: None,
        }
    }

    #[test]
    fn scan_minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("COVID")).unwrap();
        std::fs::create_dir(dir.path().join("non-COVID")).unwrap();
        write_png(&dir.path().join("COVID/a.png"), 8, 8, 200);
        write_png(&dir.path().join("non-COVID/b.png"), 8, 8, 10);

        let out = scan_dataset(dir.path(), &LabelMapping::default()).unwrap();
        assert_eq!(out.manifest.records.len(), 2);
        let counts = out.manifest.label_counts();
        assert_eq!(counts[&Label::Covid], 1);
        assert_eq!(counts[&Label::NonCovid], 1);
        assert!(out.skipped.is_empty());
    }

    #[test]
    fn scan_skips_undecodable_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("COVID")).unwrap();
        std::fs::create_dir(dir.path().join("non-COVID")).unwrap();
        write_png(&dir.path().join("COVID/a.png"), 8, 8, 200);
        write_png(&dir.path().join("non-COVID/b.png"), 8, 8, 10);
        std::fs::write(dir.path().join("non-COVID/notes.txt"), "not an image").unwrap();

        let out = scan_dataset(dir.path(), &LabelMapping::default()).unwrap();
        assert_eq!(out.manifest.records.len(), 2);
        assert_eq!(out.skipped.len(), 1);
    }

    #[test]
    fn scan_rejects_wrong_directory_count() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("COVID")).unwrap();
        let err = scan_dataset(dir.path(), &LabelMapping::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn scan_rejects_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("COVID")).unwrap();
        std::fs::create_dir(dir.path().join("non-COVID")).unwrap();
        let err = scan_dataset(dir.path(), &LabelMapping::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)), "{err}");
    }

    #[test]
    fn split_matches_reference_counts() {
        // The reference corpus sizes: 1252 + 1229 images at 85/15 give 2108/373.
        let manifest = fake_manifest(1252, 1229);
        let split = split_dataset(&manifest, 0.85, 0.0, 42).unwrap();
        let counts = split.counts();
        let train: usize = Split::ALL
            .iter()
            .filter(|&&s| s != Split::Test)
            .flat_map(|&s| Label::ALL.iter().map(move |&l| (l, s)))
            .filter_map(|k| counts.get(&k))
            .sum();
        let test: usize = Label::ALL
            .iter()
            .filter_map(|&l| counts.get(&(l, Split::Test)))
            .sum();
        assert_eq!(train, 2108);
        assert_eq!(test, 373);
    }

    #[test]
    fn split_exact_stratification_small() {
        let manifest = fake_manifest(5, 5);
        let split = split_dataset(&manifest, 0.8, 0.0, 7).unwrap();
        let counts = split.counts();
        assert_eq!(counts[&(Label::Covid, Split::Train)], 4);
        assert_eq!(counts[&(Label::NonCovid, Split::Train)], 4);
        assert_eq!(counts[&(Label::Covid, Split::Test)], 1);
        assert_eq!(counts[&(Label::NonCovid, Split::Test)], 1);
    }

    #[test]
    fn split_is_deterministic_and_file_roundtrips() {
        let manifest = fake_manifest(23, 17);
        let a = split_dataset(&manifest, 0.85, 0.1, 99).unwrap();
        let b = split_dataset(&manifest, 0.85, 0.1, 99).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.txt");
        let pb = dir.path().join("b.txt");
        write_manifest(&a, &pa).unwrap();
        write_manifest(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

        let back = read_manifest(&pa).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn split_rejects_tiny_class() {
        let manifest = fake_manifest(1, 50);
        let err = split_dataset(&manifest, 0.85, 0.0, 1).unwrap_err();
        assert!(matches!(err, Error::Stratification(_)), "{err}");
    }

    #[test]
    fn patient_split_keeps_groups_together() {
        let mut records = Vec::new();
        for patient in 0..6 {
            for slice in 0..5 {
                records.push(ImageRecord {
                    record_id: format!("COVID/p{patient}_s{slice}.png"),
                    label: Label::Covid,
                    split: None,
                });
                records.push(ImageRecord {
                    record_id: format!("non-COVID/q{patient}_s{slice}.png"),
                    label: Label::NonCovid,
                    split: None,
                });
            }
        }
        let manifest = DatasetManifest {
            root: PathBuf::from("/data"),
            records,
            split: None,
        };
        let split =
            split_dataset_by_patient(&manifest, 0.8, 0.0, 3, r"/([pq]\d+)_").unwrap();
        let mut by_patient: BTreeMap<String, Vec<Split>> = BTreeMap::new();
        let re = regex::Regex::new(r"/([pq]\d+)_").unwrap();
        for r in &split.records {
            let key = re.captures(&r.record_id).unwrap()[1].to_string();
            by_patient.entry(key).or_default().push(r.split.unwrap());
        }
        for (patient, splits) in by_patient {
            assert!(
                splits.windows(2).all(|w| w[0] == w[1]),
                "patient {patient} straddles splits: {splits:?}"
            );
        }
    }

    #[test]
    fn load_constant_images() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        let black = dir.path().join("black.png");
        write_png(&white, 10, 10, 255);
        write_png(&black, 10, 10, 0);

        let w = load_image(&white, "white").unwrap();
        assert_eq!(w.data.dim(), (224, 224, 3));
        assert!(w.data.iter().all(|&v| v == 1.0));

        let b = load_image(&black, "black").unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::GrayImage::from_fn(182, 129, |x, y| image::Luma([((x + y) % 251) as u8]));
        img.save(&path).unwrap();

        let t = load_image(&path, "gray").unwrap();
        assert_eq!(t.data.dim(), (224, 224, 3));
        assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for y in [0usize, 100, 223] {
            for x in [0usize, 57, 223] {
                assert_eq!(t.data[(y, x, 0)], t.data[(y, x, 1)]);
                assert_eq!(t.data[(y, x, 1)], t.data[(y, x, 2)]);
            }
        }
    }

    #[test]
    fn load_missing_file_errors() {
        let err = load_image(Path::new("/nonexistent/x.png"), "x").unwrap_err();
        assert!(matches!(err, Error::ImageLoad { .. }), "{err}");
    }

    #[test]
    fn manifest_parse_errors_carry_line_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(
            &path,
            format!("{MANIFEST_HEADER}\nroot\t/data\nrecords\t1\nrecord\tTRAIN\tBOGUS\tCOVID/a.png\n"),
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("BOGUS"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn manifest_empty_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }
}
