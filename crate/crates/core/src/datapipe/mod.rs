//! Dataset ingestion: manifests, landmark annotations, frame images, frame
//! sampling, stratified splits and the synthetic scenario generator.

mod annotations;
mod ppm;
mod sample;
mod synth;

pub use annotations::{read_annotations, write_annotations, AnnotationRow, Annotations};
pub use ppm::{read_ppm, resize_bilinear, write_ppm};
pub use sample::{load_sample, BackgroundSubtractor, Passthrough, VideoSample};
pub use synth::{
    synth_generate, write_dataset, yaw_toward, AgentState, FrameSignal, FrameTruth, SynthConfig, SynthVideo, LANDMARK_CANVAS,
};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FRAMES_PER_VIDEO;
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Stalking,
    NonStalking,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Stalking, Label::NonStalking];

    /// Network target: the sigmoid output is P(stalking).
    pub fn target(self) -> f64 {
        match self {
            Label::Stalking => 1.0,
            Label::NonStalking => 0.0,
        }
    }

    pub fn from_probability(p: f64, threshold: f64) -> Self {
        if p >= threshold {
            Label::Stalking
        } else {
            Label::NonStalking
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Stalking => "stalking",
            Label::NonStalking => "non_stalking",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown label {s:?}")))
    }
}

/// One manifest line. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub label: Label,
    pub frames: Vec<PathBuf>,
    pub landmarks: PathBuf,
    /// Size of the image the landmarks were annotated on; defaults to the frame size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<VideoRecord>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<VideoRecord>> {
    let mut records: Vec<VideoRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: VideoRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Validation(format!("duplicate video id {:?} in {}", rec.id, origin.display())));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Manifest {
        dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records: parse_manifest(&text, path)?,
    })
}

pub fn write_manifest(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// `k` evenly spread indices `floor(j·(n−1)/(k−1))`.
pub fn sample_frames(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(Error::Cardinality(format!("cannot pick {k} frames from {n}")));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    Ok((0..k).map(|j| j * (n - 1) / (k - 1)).collect())
}

/// The five frame indices used for a record.
pub fn sample_record_frames(record: &VideoRecord) -> Result<Vec<usize>> {
    sample_frames(record.frames.len(), FRAMES_PER_VIDEO).map_err(|_| {
        Error::Cardinality(format!(
            "video {} has {} frames, needs at least {FRAMES_PER_VIDEO}",
            record.id,
            record.frames.len()
        ))
    })
}

pub trait Labeled {
    fn label(&self) -> Label;
}

impl Labeled for VideoRecord {
    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for Label {
    fn label(&self) -> Label {
        *self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
            stratified: true,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let fr = [self.train, self.val, self.test];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Splits `total` items over groups of `sizes` by largest remainder.
fn allocate(total: usize, sizes: &[usize], fraction: f64) -> Vec<usize> {
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(out.iter().sum());
    for &g in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if out[g] < sizes[g] {
            out[g] += 1;
            left -= 1;
        }
    }
    out
}

/// Validation and test sizes are `round(N·fraction)`; training gets the rest.
/// With stratification each class is shuffled separately and allocated
/// proportionally. Items keep their input order inside each part.
pub fn split<T: Labeled>(items: Vec<T>, spec: &SplitSpec) -> Result<Split<T>> {
    spec.validate()?;
    let n = items.len();
    if n < 5 {
        return Err(Error::Contract(format!("splitting needs at least 5 items, got {n}")));
    }
    let n_val = (n as f64 * spec.val).round() as usize;
    let n_test = (n as f64 * spec.test).round() as usize;
    let groups: Vec<Vec<usize>> = if spec.stratified {
        Label::ALL
            .iter()
            .map(|&l| (0..n).filter(|&i| items[i].label() == l).collect::<Vec<_>>())
            .collect()
    } else {
        vec![(0..n).collect()]
    };
    if spec.stratified {
        if let Some((l, _)) = Label::ALL.iter().zip(&groups).find(|(_, g)| g.is_empty()) {
            return Err(Error::Validation(format!("stratified split has no {l} items")));
        }
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let val_alloc = allocate(n_val, &sizes, spec.val);
    let rest: Vec<usize> = sizes.iter().zip(&val_alloc).map(|(s, v)| s - v).collect();
    let test_alloc = {
        let mut t = allocate(n_test, &sizes, spec.test);
        for (x, r) in t.iter_mut().zip(&rest) {
            *x = (*x).min(*r);
        }
        t
    };
    let mut part = vec![0u8; n];
    for (g, idx) in groups.iter().enumerate() {
        let mut idx = idx.clone();
        let name = if spec.stratified { Label::ALL[g].as_str() } else { "all" };
        idx.shuffle(&mut substream(spec.seed, &format!("split/{name}")));
        for &i in &idx[..val_alloc[g]] {
            part[i] = 1;
        }
        for &i in &idx[val_alloc[g]..val_alloc[g] + test_alloc[g]] {
            part[i] = 2;
        }
    }
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (item, p) in items.into_iter().zip(part) {
        match p {
            1 => out.val.push(item),
            2 => out.test.push(item),
            _ => out.train.push(item),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_sampling() {
        assert_eq!(sample_frames(5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_frames(9, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert!(matches!(sample_frames(4, 5), Err(Error::Cardinality(_))));
    }

    fn labels(stalk: usize, non: usize) -> Vec<(usize, Label)> {
        (0..stalk)
            .map(|i| (i, Label::Stalking))
            .chain((0..non).map(|i| (stalk + i, Label::NonStalking)))
            .collect()
    }

    impl Labeled for (usize, Label) {
        fn label(&self) -> Label {
            self.1
        }
    }

    #[test]
    fn split_of_238_videos() {
        let s = split(labels(117, 121), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (142, 48, 48));
        for part in [&s.val, &s.test] {
            let st = part.iter().filter(|x| x.1 == Label::Stalking).count() as f64;
            assert!((st - 48.0 * 117.0 / 238.0).abs() <= 1.0);
        }
        let s2 = split(labels(117, 121), &SplitSpec::default()).unwrap();
        assert_eq!(s, s2);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.0).collect();
        all.sort();
        assert_eq!(all, (0..238).collect::<Vec<_>>());
        let s = split(labels(120, 120), &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (144, 48, 48));
    }

    #[test]
    fn seed_changes_partition() {
        let a = split(labels(20, 20), &SplitSpec::default()).unwrap();
        let b = split(labels(20, 20), &SplitSpec::default().with_seed(9)).unwrap();
        assert_ne!(a.test, b.test);
    }

    #[test]
    fn empty_class_rejected() {
        assert!(matches!(split(labels(10, 0), &SplitSpec::default()), Err(Error::Validation(_))));
        let spec = SplitSpec {
            stratified: false,
            ..Default::default()
        };
        let s = split(labels(10, 0), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    }

    #[test]
    fn manifest_parsing() {
        let text = r#"{"id":"a","label":"stalking","frames":["f0.ppm","f1.ppm","f2.ppm","f3.ppm"],"landmarks":"a.csv","extra":1}
{"id":"b","label":"non_stalking","frames":[],"landmarks":"b.csv"}
"#;
        let recs = parse_manifest(text, Path::new("m.jsonl")).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(sample_record_frames(&recs[0]).is_err());
        let dup = format!("{}\n{}", text.lines().next().unwrap(), text.lines().next().unwrap());
        let err = parse_manifest(&dup, Path::new("m.jsonl")).unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
        let bad = parse_manifest("{\"id\":\"x\"}\n{oops", Path::new("m.jsonl")).unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 1, .. }));
    }
}
