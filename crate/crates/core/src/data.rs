//! Annotation files, annotator aggregation, dataset indexing, relabeling
//! and the synthetic tone dataset.
//!
//! An annotation file is a CSV with one row per (clip, annotator):
//!
//! ```text
//! clip_id,split,verified,week,day,hour,latitude,longitude,coarse:<tag>…,fine:<tag>…[,other:<tag>…]
//! ```
//!
//! Tag columns hold `1`, `0` or `-1` (unknown). Relabeled files use the
//! same schema with soft values in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav_i16, Waveform};
use crate::error::{Error, Result};
use crate::loss::TargetBundle;
use crate::nn::MetadataRecord;
use crate::taxonomy::{LabelVector, OutputLayout, Taxonomy};

pub const ANNOTATIONS: &str = "annotations.csv";
pub const AUDIO_DIR: &str = "audio";

const FIXED_COLUMNS: [&str; 8] = ["clip_id", "split", "verified", "week", "day", "hour", "latitude", "longitude"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validate,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validate => "validate",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validate" => Ok(Split::Validate),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

/// One annotator's row. Tag values are `-1` for unknown, otherwise in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRow {
    pub clip_id: String,
    pub split: Split,
    pub verified: bool,
    pub meta: MetadataRecord,
    pub coarse: Vec<f32>,
    pub fine: Vec<f32>,
    pub other: Option<Vec<f32>>,
}

/// Parsed annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    /// Whether the file carries `other:*` columns.
    pub has_other: bool,
    pub rows: Vec<AnnotationRow>,
}

/// Column names of an annotation file, in order.
pub fn header(tax: &Taxonomy, has_other: bool) -> Vec<String> {
    let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend(tax.coarse_tags().iter().map(|t| format!("coarse:{t}")));
    h.extend(tax.fine_tags().iter().map(|t| format!("fine:{t}")));
    if has_other {
        h.extend(tax.other_unknown().iter().map(|&c| format!("other:{}", tax.coarse_tags()[c])));
    }
    h
}

fn parse_tag(s: &str) -> std::result::Result<f32, String> {
    let v: f32 = s.trim().parse().map_err(|_| format!("bad tag value {s:?}"))?;
    if v == -1.0 || (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("tag value {s} is neither -1 nor in [0, 1]"))
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(format!("bad verified flag {other:?}")),
    }
}

/// Reads and validates an annotation file.
pub fn parse_annotations(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Annotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, tax, path)
}

/// As [`parse_annotations`], from text; `path` is only used in errors.
pub fn parse_annotations_str(text: &str, tax: &Taxonomy, path: &Path) -> Result<Annotations> {
    let err = |line: u64, reason: String| Error::Annotations {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let head: Vec<String> = rdr
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let col = |name: &str| head.iter().position(|h| h == name);
    let has_other = head.iter().any(|h| h.starts_with("other:"));
    let mut index = Vec::new();
    for name in header(tax, has_other) {
        index.push(col(&name).ok_or_else(|| err(1, format!("missing column {name}")))?);
    }
    let (nc, nf, no) = (tax.n_coarse(), tax.n_fine(), tax.n_other());

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(index[i]).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| err(line, format!("bad {} value {:?}", FIXED_COLUMNS[i], field(i))))
        };
        let int = |i: usize| -> Result<u32> {
            field(i)
                .parse::<u32>()
                .map_err(|_| err(line, format!("bad {} value {:?}", FIXED_COLUMNS[i], field(i))))
        };
        let clip_id = field(0).to_string();
        if clip_id.is_empty() || clip_id.contains(['/', '\\']) {
            return Err(err(line, format!("invalid clip_id {clip_id:?}")));
        }
        let split = field(1).parse().map_err(|e: Error| err(line, e.to_string()))?;
        let verified = parse_bool(field(2)).map_err(|r| err(line, r))?;
        let meta = MetadataRecord {
            week: int(3)?,
            day: int(4)?,
            hour: int(5)?,
            latitude: num(6)?,
            longitude: num(7)?,
        };
        meta.validate().map_err(|e| err(line, e.to_string()))?;
        let tags = |from: usize, n: usize| -> Result<Vec<f32>> {
            (from..from + n).map(|i| parse_tag(field(i)).map_err(|r| err(line, r))).collect()
        };
        let base = FIXED_COLUMNS.len();
        let coarse = tags(base, nc)?;
        let fine = tags(base + nc, nf)?;
        let other = if has_other { Some(tags(base + nc + nf, no)?) } else { None };
        rows.push(AnnotationRow {
            clip_id,
            split,
            verified,
            meta,
            coarse,
            fine,
            other,
        });
    }
    Ok(Annotations { has_other, rows })
}

fn fmt_tag(v: f32) -> String {
    format!("{v}")
}

/// Serialises rows in canonical column order.
pub fn write_annotations(ann: &Annotations, tax: &Taxonomy) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Dataset(format!("csv: {e}"));
    w.write_record(header(tax, ann.has_other)).map_err(csv_err)?;
    for r in &ann.rows {
        let mut rec = vec![
            r.clip_id.clone(),
            r.split.to_string(),
            if r.verified { "1" } else { "0" }.to_string(),
            r.meta.week.to_string(),
            r.meta.day.to_string(),
            r.meta.hour.to_string(),
            r.meta.latitude.to_string(),
            r.meta.longitude.to_string(),
        ];
        rec.extend(r.coarse.iter().chain(&r.fine).map(|&v| fmt_tag(v)));
        match (&r.other, ann.has_other) {
            (Some(o), true) => rec.extend(o.iter().map(|&v| fmt_tag(v))),
            (None, true) => rec.extend(std::iter::repeat("-1".to_string()).take(tax.n_other())),
            _ => {}
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Dataset(e.to_string()))
}

/// Combines the rows of one clip.
///
/// A tag is as positive as its most positive annotator. Coarse tags are
/// always observed (unknown counts as 0). A fine tag is unknown (mask 0)
/// when nobody gave it a value and its coarse category is positive or
/// unknown; otherwise an unanswered fine tag is a confident 0.
pub fn aggregate_annotators(tax: &Taxonomy, rows: &[&AnnotationRow]) -> Result<TargetBundle> {
    let Some(first) = rows.first() else {
        return Err(Error::Dataset("cannot aggregate zero annotator rows".into()));
    };
    let best = |vals: &mut dyn Iterator<Item = f32>| -> Option<f32> {
        vals.filter(|&v| v >= 0.0).fold(None, |m: Option<f32>, v| Some(m.map_or(v, |m| m.max(v))))
    };
    let mut t = LabelVector::zeros(tax);
    let mut coarse_open = vec![false; tax.n_coarse()];
    for c in 0..tax.n_coarse() {
        let v = best(&mut rows.iter().map(|r| r.coarse[c]));
        t.coarse[c] = v.unwrap_or(0.0);
        coarse_open[c] = v.is_none_or(|v| v > 0.0);
    }
    for f in 0..tax.n_fine() {
        match best(&mut rows.iter().map(|r| r.fine[f])) {
            Some(v) => t.fine[f] = v,
            None if coarse_open[tax.parent(f)] => t.fine_mask[f] = 0.0,
            None => {}
        }
    }
    if first.other.is_some() {
        let other = (0..tax.n_other())
            .map(|o| best(&mut rows.iter().filter_map(|r| r.other.as_ref().map(|x| x[o]))).unwrap_or(0.0))
            .collect();
        t.other = Some(other);
    }
    Ok(t)
}

/// The single annotator row that aggregates back to `t`.
pub fn target_row_values(tax: &Taxonomy, t: &TargetBundle) -> (Vec<f32>, Vec<f32>) {
    let fine: Vec<f32> = t.fine.iter().zip(&t.fine_mask).map(|(&v, &m)| if m > 0.0 { v } else { -1.0 }).collect();
    let coarse = (0..tax.n_coarse())
        .map(|c| {
            let hidden = tax.children(c).iter().any(|&f| t.fine_mask[f] == 0.0);
            if t.coarse[c] == 0.0 && hidden {
                -1.0
            } else {
                t.coarse[c]
            }
        })
        .collect();
    (coarse, fine)
}

/// One clip of an indexed dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub audio: PathBuf,
    pub split: Split,
    pub verified: bool,
    pub meta: MetadataRecord,
    pub targets: TargetBundle,
}

/// All clips of a dataset directory (`annotations.csv` + `audio/`).
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub records: Vec<ClipRecord>,
    pub taxonomy_hash: String,
}

impl DatasetIndex {
    /// Loads `root/annotations.csv`.
    pub fn load(root: impl AsRef<Path>, tax: &Taxonomy) -> Result<Self> {
        let root = root.as_ref();
        Self::load_with(root, &root.join(ANNOTATIONS), tax)
    }

    /// Loads a dataset whose annotations live at `annotations` (e.g. a
    /// relabeled file) and whose audio is under `root/audio`.
    pub fn load_with(root: &Path, annotations: &Path, tax: &Taxonomy) -> Result<Self> {
        let ann = parse_annotations(annotations, tax)?;
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&AnnotationRow>> = BTreeMap::new();
        for r in &ann.rows {
            let g = groups.entry(&r.clip_id).or_default();
            if g.is_empty() {
                order.push(&r.clip_id);
            } else if (g[0].split, g[0].verified, g[0].meta) != (r.split, r.verified, r.meta) {
                return Err(Error::Dataset(format!(
                    "annotator rows of clip {} disagree on split, verified flag or metadata",
                    r.clip_id
                )));
            }
            g.push(r);
        }
        let mut records = Vec::with_capacity(order.len());
        for id in order {
            let rows = &groups[id];
            let audio = root.join(AUDIO_DIR).join(format!("{id}.wav"));
            if !audio.is_file() {
                return Err(Error::Dataset(format!("audio for clip {id} not found at {}", audio.display())));
            }
            records.push(ClipRecord {
                clip_id: id.to_string(),
                audio,
                split: rows[0].split,
                verified: rows[0].verified,
                meta: rows[0].meta,
                targets: aggregate_annotators(tax, rows)?,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
            taxonomy_hash: tax.hash(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records.iter().find(|r| r.clip_id == clip_id)
    }

    /// Records whose split is in `splits`, in file order.
    pub fn select(&self, splits: &[Split]) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| splits.contains(&r.split)).collect()
    }

    /// Ids of verified clips.
    pub fn verified_ids(&self) -> BTreeSet<String> {
        self.records.iter().filter(|r| r.verified).map(|r| r.clip_id.clone()).collect()
    }
}

/// How model outputs become new targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RelabelMode {
    /// Sigmoid outputs used as they are.
    Soft,
    /// Outputs thresholded at `tau` (≥ is positive).
    Hard(f64),
}

/// Counts reported by [`relabel`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelabelSummary {
    pub relabeled: usize,
    pub protected: usize,
}

/// Rewrites an annotation file with model predictions.
///
/// Rows of protected clips are copied byte for byte. Every other clip is
/// collapsed to one row with the original split, flag and metadata and
/// with coarse/fine (and, when the file has them, other) values taken from
/// `predictions` (keyed by clip id, in `layout` order). All fine values are
/// known afterwards.
pub fn relabel(
    src: &Path,
    tax: &Taxonomy,
    layout: &OutputLayout,
    predictions: &BTreeMap<String, Vec<f64>>,
    protected: &BTreeSet<String>,
    mode: RelabelMode,
) -> Result<(String, RelabelSummary)> {
    let text = fs::read_to_string(src).map_err(|e| Error::io(src, e))?;
    let ann = parse_annotations_str(&text, tax, src)?;

    // byte span of every data record in the original text
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut starts = Vec::new();
    let mut rec = csv::StringRecord::new();
    let header_end = {
        rdr.headers().map_err(|e| Error::Dataset(e.to_string()))?;
        rdr.position().byte() as usize
    };
    loop {
        let pos = rdr.position().byte() as usize;
        if !rdr.read_record(&mut rec).map_err(|e| Error::Dataset(e.to_string()))? {
            break;
        }
        starts.push(pos);
    }
    let spans: Vec<&str> = starts
        .iter()
        .enumerate()
        .map(|(i, &s)| &text[s..starts.get(i + 1).copied().unwrap_or(text.len())])
        .collect();

    let value = |p: f64| -> f32 {
        match mode {
            RelabelMode::Soft => p as f32,
            RelabelMode::Hard(tau) => {
                if p >= tau {
                    1.0
                } else {
                    0.0
                }
            }
        }
    };

    let mut out = String::from(&text[..header_end]);
    if !out.ends_with('\n') {
        out.push('\n');
    }
    let mut done = BTreeSet::new();
    let mut summary = RelabelSummary { relabeled: 0, protected: 0 };
    for (row, span) in ann.rows.iter().zip(&spans) {
        if protected.contains(&row.clip_id) {
            out.push_str(span);
            if !span.ends_with('\n') {
                out.push('\n');
            }
            if done.insert(row.clip_id.clone()) {
                summary.protected += 1;
            }
            continue;
        }
        if !done.insert(row.clip_id.clone()) {
            continue;
        }
        let p = predictions
            .get(&row.clip_id)
            .ok_or_else(|| Error::Dataset(format!("no prediction for clip {}", row.clip_id)))?;
        if p.len() != layout.dim() {
            return Err(Error::Dataset(format!(
                "prediction for {} has {} values, layout expects {}",
                row.clip_id,
                p.len(),
                layout.dim()
            )));
        }
        let other = match (ann.has_other, layout.other_range().is_empty()) {
            (false, _) => None,
            (true, false) => Some(layout.other_range().map(|i| value(p[i])).collect()),
            // keep the annotators' other/unknown values when the model has no such outputs
            (true, true) => {
                let rows: Vec<&AnnotationRow> = ann.rows.iter().filter(|r| r.clip_id == row.clip_id).collect();
                aggregate_annotators(tax, &rows)?.other
            }
        };
        let new = AnnotationRow {
            coarse: layout.coarse_range().map(|i| value(p[i])).collect(),
            fine: layout.fine_range().map(|i| value(p[i])).collect(),
            other,
            ..row.clone()
        };
        let one = write_annotations(
            &Annotations {
                has_other: ann.has_other,
                rows: vec![new],
            },
            tax,
        )?;
        out.push_str(one.split_once('\n').map_or("", |(_, body)| body));
        summary.relabeled += 1;
    }
    Ok((out, summary))
}

/// Frequency of the tone that marks fine tag `i`: band centres spread
/// evenly on the mel scale between 300 Hz and 7 kHz.
pub fn tone_frequency(tax: &Taxonomy, i: usize) -> f64 {
    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(300.0), mel(7000.0));
    let n = tax.n_fine().max(2) - 1;
    hz(lo + (hi - lo) * i as f64 / n as f64)
}

/// Options of [`synth_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub duration_secs: f64,
    pub sample_rate: u32,
    /// Standard deviation of the white noise floor.
    pub noise_std: f64,
    /// Fraction of clips in the validate split; those are also verified.
    pub validate_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            duration_secs: 10.0,
            sample_rate: 44_100,
            noise_std: 0.01,
            validate_fraction: 0.25,
        }
    }
}

/// Writes `n` clips of tag-keyed tones plus noise to `root/audio/` and their
/// annotations to `root/annotations.csv`.
///
/// Clip `k` always contains the tone of fine tag `k mod 23`, plus up to two
/// more random tags; each tone sounds over a random stretch of at least 30%
/// of the clip. Some clips get a second annotator who misses positives;
/// any-positive aggregation recovers the truth. Deterministic given `seed`.
pub fn synth_dataset(root: impl AsRef<Path>, n: usize, seed: u64, tax: &Taxonomy, opts: &SynthOptions) -> Result<Annotations> {
    let root = root.as_ref();
    if n < 2 {
        return Err(Error::Dataset(format!("synth_dataset needs at least 2 clips, got {n}")));
    }
    let audio_dir = root.join(AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise_std).map_err(|e| Error::Dataset(e.to_string()))?;
    let len = (opts.duration_secs * opts.sample_rate as f64).round() as usize;
    let n_validate = ((n as f64) * opts.validate_fraction).round() as usize;
    let mut rows = Vec::new();

    for k in 0..n {
        let clip_id = format!("synth_{k:04}");
        let mut tags = BTreeSet::from([k % tax.n_fine()]);
        for _ in 0..rng.random_range(0..=2) {
            tags.insert(rng.random_range(0..tax.n_fine()));
        }
        let mut samples: Vec<f64> = (0..len).map(|_| noise.sample(&mut rng)).collect();
        for &t in &tags {
            let f = tone_frequency(tax, t);
            let amp = rng.random_range(0.05..0.2);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let span = rng.random_range(len * 3 / 10..=len);
            let start = rng.random_range(0..=len - span);
            let w = std::f64::consts::TAU * f / opts.sample_rate as f64;
            for (i, s) in samples[start..start + span].iter_mut().enumerate() {
                *s += amp * (w * (start + i) as f64 + phase).sin();
            }
        }
        let wave = Waveform::new(samples.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect(), opts.sample_rate);
        write_wav_i16(audio_dir.join(format!("{clip_id}.wav")), &wave)?;

        let validate = k >= n - n_validate;
        let meta = MetadataRecord {
            week: rng.random_range(1..=52),
            day: rng.random_range(0..=6),
            hour: rng.random_range(0..=23),
            latitude: (rng.random_range(40.5..40.9f64) * 1e4).round() / 1e4,
            longitude: (rng.random_range(-74.2..-73.7f64) * 1e4).round() / 1e4,
        };
        let truth = LabelVector::from_fine(tax, &tags.iter().copied().collect::<Vec<_>>());
        let base = AnnotationRow {
            clip_id: clip_id.clone(),
            split: if validate { Split::Validate } else { Split::Train },
            verified: validate,
            meta,
            coarse: truth.coarse.clone(),
            fine: truth.fine.clone(),
            other: None,
        };
        let second = (!validate && rng.random_bool(0.3)).then(|| {
            let fine: Vec<f32> = base.fine.iter().map(|&v| if v > 0.0 && rng.random_bool(0.5) { 0.0 } else { v }).collect();
            let pos: Vec<usize> = (0..fine.len()).filter(|&i| fine[i] > 0.0).collect();
            AnnotationRow {
                coarse: LabelVector::from_fine(tax, &pos).coarse,
                fine,
                ..base.clone()
            }
        });
        rows.push(base);
        rows.extend(second);
    }
    let ann = Annotations { has_other: false, rows };
    let path = root.join(ANNOTATIONS);
    fs::write(&path, write_annotations(&ann, tax)?).map_err(|e| Error::io(&path, e))?;
    Ok(ann)
}
