//! Clip ingestion, uniform temporal subsampling, mask compositing, feature
//! loading and ground-truth construction.
//!
//! Dataset layout:
//!
//! ```text
//! clips/<id>/frame_000000.png ...
//! masks/<id>.jsonl            {"frame":0,"class":"car","bbox":[x,y,w,h],"confidence":0.9}
//! annotations.csv             clip_id,annotator_id,rating
//! features/<id>.tnsr          [N × d]
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::InputMode;
use crate::error::{Error, Result};
use crate::tensor::{io as tensor_io, Tensor};

pub const NOMINAL_FPS: f64 = 29.4;
pub const MASK_ALPHA: f64 = 0.7;
pub const POSITIVE_FRACTION: f64 = 0.05;

/// One training/evaluation example: a `[T × ...]` input, a one-hot label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip_id: String,
    pub x: Tensor,
    pub y: Tensor,
}

impl Sample {
    pub fn new(clip_id: impl Into<String>, x: Tensor, is_risky: bool) -> Self {
        Sample {
            clip_id: clip_id.into(),
            x,
            y: one_hot(is_risky),
        }
    }

    pub fn is_risky(&self) -> bool {
        self.y.data()[1] > 0.5
    }
}

/// Safe → (1, 0), risky → (0, 1).
pub fn one_hot(is_risky: bool) -> Tensor {
    let v = if is_risky { vec![0.0, 1.0] } else { vec![1.0, 0.0] };
    Tensor::vector(v).expect("two components")
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<RgbImage>,
    pub fps: f64,
}

impl Clip {
    pub fn new(id: impl Into<String>, frames: Vec<RgbImage>) -> Result<Self> {
        let id = id.into();
        let Some(first) = frames.first() else {
            return Err(Error::Input(format!("clip {id} has no frames")));
        };
        let dims = first.dimensions();
        if let Some(bad) = frames.iter().position(|f| f.dimensions() != dims) {
            return Err(Error::Input(format!(
                "clip {id}: frame {bad} is {:?}, frame 0 is {dims:?}",
                frames[bad].dimensions()
            )));
        }
        Ok(Clip {
            id,
            frames,
            fps: NOMINAL_FPS,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Indices of `t` frames spread evenly over `n`, endpoints included.
///
/// `idx_j = round(j·(n−1)/(t−1))`, rounding half up; `t = 1` picks `⌊n/2⌋`.
pub fn subsample_indices(n: usize, t: usize) -> Result<Vec<usize>> {
    if t == 0 || t > n {
        return Err(Error::Input(format!("cannot pick {t} frames from {n}")));
    }
    if t == 1 {
        return Ok(vec![n / 2]);
    }
    let (num, den) = (n - 1, t - 1);
    Ok((0..t).map(|j| (2 * j * num + den) / (2 * den)).collect())
}

pub fn subsample_uniform<T: Clone>(frames: &[T], t: usize) -> Result<Vec<T>> {
    Ok(subsample_indices(frames.len(), t)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Truck,
    Other,
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Other => "other",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// `x, y, w, h` in pixels.
    Box { x: f64, y: f64, w: f64, h: f64 },
    Polygon(Vec<[f64; 2]>),
}

impl Region {
    /// Pixel membership, tested at the pixel centre.
    pub fn contains(&self, px: u32, py: u32) -> bool {
        let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
        match self {
            Region::Box { x, y, w, h } => cx >= *x && cx < x + w && cy >= *y && cy < y + h,
            Region::Polygon(pts) => {
                // even-odd rule
                let mut inside = false;
                let mut j = pts.len().wrapping_sub(1);
                for i in 0..pts.len() {
                    let ([xi, yi], [xj, yj]) = (pts[i], pts[j]);
                    if (yi > cy) != (yj > cy) && cx < (xj - xi) * (cy - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            Region::Box { x, y, w, h } => (*x, *y, x + w, y + h),
            Region::Polygon(pts) => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), [x, y]| (a.min(*x), b.min(*y), c.max(*x), d.max(*y)),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRecord {
    pub frame: usize,
    pub class: ObjectClass,
    pub region: Region,
    pub confidence: f64,
}

#[derive(Serialize, Deserialize)]
struct MaskLine {
    frame: usize,
    class: ObjectClass,
    bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    polygon: Option<Vec<[f64; 2]>>,
    confidence: f64,
}

impl SegmentationRecord {
    pub fn from_json_line(line: &str) -> Result<Self> {
        let m: MaskLine =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("bad mask record: {e}")))?;
        let region = match m.polygon {
            Some(p) if p.len() >= 3 => Region::Polygon(p),
            Some(_) => return Err(Error::Data("mask polygon needs at least 3 vertices".into())),
            None => {
                let [x, y, w, h] = m.bbox;
                Region::Box { x, y, w, h }
            }
        };
        if !(0.0..=1.0).contains(&m.confidence) {
            return Err(Error::Data(format!("mask confidence {} outside [0, 1]", m.confidence)));
        }
        Ok(SegmentationRecord {
            frame: m.frame,
            class: m.class,
            region,
            confidence: m.confidence,
        })
    }

    pub fn to_json_line(&self) -> String {
        let (x0, y0, x1, y1) = self.region.bounds();
        let m = MaskLine {
            frame: self.frame,
            class: self.class.clone(),
            bbox: [x0, y0, x1 - x0, y1 - y0],
            polygon: match &self.region {
                Region::Polygon(p) => Some(p.clone()),
                Region::Box { .. } => None,
            },
            confidence: self.confidence,
        };
        serde_json::to_string(&m).expect("mask records serialize")
    }
}

/// Class → RGB fill colour.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette(pub HashMap<ObjectClass, [u8; 3]>);

impl Default for Palette {
    fn default() -> Self {
        Palette(HashMap::from([
            (ObjectClass::Car, [0, 255, 255]),
            (ObjectClass::Truck, [255, 0, 255]),
            (ObjectClass::Other, [255, 255, 0]),
        ]))
    }
}

impl Palette {
    pub fn colour(&self, class: &ObjectClass) -> Result<[u8; 3]> {
        self.0
            .get(class)
            .copied()
            .ok_or_else(|| Error::Config(format!("no palette colour for class '{class}'")))
    }
}

/// `round(alpha·fill + (1 − alpha)·value)`, half up.
pub fn blend_channel(value: u8, fill: u8, alpha: f64) -> u8 {
    let v = alpha * fill as f64 + (1.0 - alpha) * value as f64;
    // The tolerance absorbs representation error in values such as 208.5.
    (v + 0.5 + 1e-9).floor().clamp(0.0, 255.0) as u8
}

/// Fills every record's region with its class colour at opacity `alpha`.
/// Records are drawn from highest to lowest confidence.
pub fn overlay_masks(
    frame: &RgbImage,
    records: &[SegmentationRecord],
    palette: &Palette,
    alpha: f64,
) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    let (w, h) = frame.dimensions();
    let mut order: Vec<&SegmentationRecord> = records.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut out = frame.clone();
    for rec in order {
        let fill = palette.colour(&rec.class)?;
        let (x0, y0, x1, y1) = rec.region.bounds();
        if x0 < 0.0 || y0 < 0.0 || x1 > w as f64 || y1 > h as f64 {
            return Err(Error::Input(format!(
                "{} region [{x0}, {y0}, {x1}, {y1}] exceeds {w}×{h} frame",
                rec.class
            )));
        }
        let px_range = |lo: f64, hi: f64, max: u32| (lo.floor() as u32)..(hi.ceil() as u32).min(max);
        for py in px_range(y0, y1, h) {
            for px in px_range(x0, x1, w) {
                if rec.region.contains(px, py) {
                    let Rgb(p) = *out.get_pixel(px, py);
                    let blended = [0, 1, 2].map(|c| blend_channel(p[c], fill[c], alpha));
                    out.put_pixel(px, py, Rgb(blended));
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize (half-pixel centres, edge clamp) to `(height, width)`,
/// scaled to `[0, 1]`. Returns `[T × H × W × 3]`.
pub fn prepare_frames(frames: &[RgbImage], resolution: (usize, usize)) -> Result<Tensor> {
    let (oh, ow) = resolution;
    if frames.is_empty() || oh == 0 || ow == 0 {
        return Err(Error::Input(format!(
            "cannot prepare {} frames at {oh}×{ow}",
            frames.len()
        )));
    }
    let mut data = Vec::with_capacity(frames.len() * oh * ow * 3);
    for f in frames {
        let (w, h) = f.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = f.as_raw();
        if (h, w) == (oh, ow) {
            data.extend(raw.iter().map(|&v| v as f64 / 255.0));
            continue;
        }
        let axis = |dst: usize, src: usize, out: usize| {
            let s = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        };
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, h, oh);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, w, ow);
                for c in 0..3 {
                    let px = |yy: usize, xx: usize| raw[(yy * w + xx) * 3 + c] as f64;
                    let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                    let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                    data.push((top * (1.0 - fy) + bottom * fy) / 255.0);
                }
            }
        }
    }
    Tensor::new(&[frames.len(), oh, ow, 3], data)
}

/// Raw ratings, `ratings[a][c]` for annotator `a` and clip `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub clip_ids: Vec<String>,
    pub annotator_ids: Vec<String>,
    pub ratings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    clip_id: String,
    annotator_id: String,
    rating: f64,
}

impl AnnotationSet {
    /// Reads long-format `clip_id,annotator_id,rating` rows. Every annotator
    /// must rate every clip exactly once.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        let mut clips = BTreeSet::new();
        for row in rdr.deserialize::<AnnotationRow>() {
            let row = row.map_err(|e| csv_error(path, e))?;
            if !(1.0..=5.0).contains(&row.rating) {
                return Err(Error::Data(format!(
                    "rating {} by {} for {} outside 1..5",
                    row.rating, row.annotator_id, row.clip_id
                )));
            }
            clips.insert(row.clip_id.clone());
            if table
                .entry(row.annotator_id.clone())
                .or_default()
                .insert(row.clip_id.clone(), row.rating)
                .is_some()
            {
                return Err(Error::Data(format!(
                    "annotator {} rated {} twice",
                    row.annotator_id, row.clip_id
                )));
            }
        }
        let clip_ids: Vec<String> = clips.into_iter().collect();
        let mut annotator_ids = Vec::new();
        let mut ratings = Vec::new();
        for (a, row) in table {
            if row.len() != clip_ids.len() {
                return Err(Error::Data(format!(
                    "annotator {a} rated {} of {} clips",
                    row.len(),
                    clip_ids.len()
                )));
            }
            ratings.push(row.into_values().collect());
            annotator_ids.push(a);
        }
        Ok(AnnotationSet {
            clip_ids,
            annotator_ids,
            ratings,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for (c, clip) in self.clip_ids.iter().enumerate() {
            for (a, annotator) in self.annotator_ids.iter().enumerate() {
                w.serialize(AnnotationRow {
                    clip_id: clip.clone(),
                    annotator_id: annotator.clone(),
                    rating: self.ratings[a][c],
                })
                .map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipLabel {
    pub clip_id: String,
    pub score: f64,
    pub is_risky: bool,
}

/// Z-scores each annotator (population std), averages per clip, and marks
/// the top `⌊0.05·n⌋` clips risky. Ties at the cut go to the smaller id.
pub fn build_labels(set: &AnnotationSet) -> Result<Vec<ClipLabel>> {
    let n = set.clip_ids.len();
    if set.ratings.is_empty() || n < 2 {
        return Err(Error::Data(format!(
            "need ≥ 1 annotator and ≥ 2 clips, got {} and {n}",
            set.ratings.len()
        )));
    }
    let mut score = vec![0.0; n];
    for (a, row) in set.ratings.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Data(format!(
                "annotator {} has {} ratings for {n} clips",
                set.annotator_ids[a],
                row.len()
            )));
        }
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        if var == 0.0 {
            return Err(Error::Data(format!(
                "annotator {} gave every clip the same rating",
                set.annotator_ids[a]
            )));
        }
        let sd = var.sqrt();
        for (s, r) in score.iter_mut().zip(row) {
            *s += (r - mean) / sd;
        }
    }
    for s in &mut score {
        *s /= set.ratings.len() as f64;
    }
    let k = positive_count(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then_with(|| set.clip_ids[a].cmp(&set.clip_ids[b])));
    let mut risky = vec![false; n];
    for &i in &order[..k] {
        risky[i] = true;
    }
    Ok((0..n)
        .map(|i| ClipLabel {
            clip_id: set.clip_ids[i].clone(),
            score: score[i],
            is_risky: risky[i],
        })
        .collect())
}

/// `⌊0.05·n⌋`, computed exactly.
pub fn positive_count(n: usize) -> usize {
    n / 20
}

/// Reads a rank-2 `[N × d]` feature file.
pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let t = tensor_io::read(path)?;
    if t.rank() != 2 {
        // rank byte sits after magic, version and dtype
        return Err(Error::format(6, format!("feature file must be rank 2, got rank {}", t.rank())));
    }
    Ok(t)
}

pub fn load_features(root: impl AsRef<Path>, clip_id: &str) -> Result<Tensor> {
    read_feature_matrix(feature_path(root.as_ref(), clip_id))
}

/// Keeps the given rows of a `[N × ...]` tensor.
pub fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * t.len() / n);
    for &r in rows {
        if r >= n {
            return Err(Error::Input(format!("row {r} out of range for {n} rows")));
        }
        data.extend_from_slice(t.outer(r));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(&shape, data)
}

pub fn clip_dir(root: &Path, id: &str) -> PathBuf {
    root.join("clips").join(id)
}

pub fn frame_path(root: &Path, id: &str, index: usize) -> PathBuf {
    clip_dir(root, id).join(format!("frame_{index:06}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.jsonl"))
}

pub fn feature_path(root: &Path, id: &str) -> PathBuf {
    root.join("features").join(format!("{id}.tnsr"))
}

pub fn annotations_path(root: &Path) -> PathBuf {
    root.join("annotations.csv")
}

fn list_dir(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        out.push(entry.file_name().to_string_lossy().into_owned());
    }
    out.sort();
    Ok(out)
}

/// Clip ids under `clips/`, sorted.
pub fn list_clips(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = root.as_ref().join("clips");
    let mut ids = Vec::new();
    for name in list_dir(&dir)? {
        if dir.join(&name).is_dir() {
            ids.push(name);
        }
    }
    Ok(ids)
}

/// Number of `frame_%06d.png` files in a clip directory; they must be
/// numbered contiguously from 0.
pub fn frame_count(root: &Path, id: &str) -> Result<usize> {
    let dir = clip_dir(root, id);
    let n = list_dir(&dir)?
        .iter()
        .filter(|f| f.starts_with("frame_") && f.ends_with(".png"))
        .count();
    if n == 0 {
        return Err(Error::Input(format!("clip {id} has no frames")));
    }
    if !frame_path(root, id, n - 1).exists() {
        return Err(Error::Input(format!("clip {id}: frame files are not numbered 0..{}", n - 1)));
    }
    Ok(n)
}

pub fn read_frame(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_frame(path: &Path, frame: &RgbImage) -> Result<()> {
    frame.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_clip(root: impl AsRef<Path>, id: &str) -> Result<Clip> {
    let root = root.as_ref();
    let n = frame_count(root, id)?;
    let frames = (0..n)
        .map(|i| read_frame(&frame_path(root, id, i)))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(id, frames)
}

/// Mask records for a clip, grouped by frame. A missing mask file means no
/// detections.
pub fn load_masks(root: impl AsRef<Path>, id: &str) -> Result<BTreeMap<usize, Vec<SegmentationRecord>>> {
    let path = mask_path(root.as_ref(), id);
    let mut out: BTreeMap<usize, Vec<SegmentationRecord>> = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = SegmentationRecord::from_json_line(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.entry(rec.frame).or_default().push(rec);
    }
    Ok(out)
}

pub fn write_masks(path: &Path, records: &[SegmentationRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// How a dataset is turned into samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub input_mode: InputMode,
    pub frames: usize,
    pub resolution: (usize, usize),
    pub palette: Palette,
    pub alpha: f64,
}

impl SampleSpec {
    pub fn new(input_mode: InputMode, frames: usize, resolution: (usize, usize)) -> Self {
        SampleSpec {
            input_mode,
            frames,
            resolution,
            palette: Palette::default(),
            alpha: MASK_ALPHA,
        }
    }
}

/// Labels from `annotations.csv`, keyed by clip id.
pub fn dataset_labels(root: impl AsRef<Path>) -> Result<Vec<ClipLabel>> {
    build_labels(&AnnotationSet::read_csv(annotations_path(root.as_ref()))?)
}

/// Builds one sample per labelled clip, in clip-id order.
pub fn load_samples(root: impl AsRef<Path>, spec: &SampleSpec) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let labels = dataset_labels(root)?;
    labels
        .par_iter()
        .map(|l| load_sample(root, &l.clip_id, l.is_risky, spec))
        .collect()
}

pub fn load_sample(root: &Path, id: &str, is_risky: bool, spec: &SampleSpec) -> Result<Sample> {
    let x = match spec.input_mode {
        InputMode::Features => {
            let f = load_features(root, id)?;
            select_rows(&f, &subsample_indices(f.shape()[0], spec.frames)?)?
        }
        mode => {
            let n = frame_count(root, id)?;
            let idx = subsample_indices(n, spec.frames)?;
            let masks = if mode == InputMode::Masked {
                load_masks(root, id)?
            } else {
                BTreeMap::new()
            };
            let mut frames = Vec::with_capacity(idx.len());
            for &i in &idx {
                let f = read_frame(&frame_path(root, id, i))?;
                frames.push(match masks.get(&i) {
                    Some(recs) => overlay_masks(&f, recs, &spec.palette, spec.alpha)?,
                    None => f,
                });
            }
            prepare_frames(&frames, spec.resolution)?
        }
    };
    Ok(Sample::new(id, x, is_risky))
}

impl FromStr for Palette {
    type Err = Error;

    /// `class=r,g,b;class=r,g,b`
    fn from_str(s: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for entry in s.split(';').filter(|e| !e.trim().is_empty()) {
            let (class, rgb) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("palette entry '{entry}' lacks '='")))?;
            let class: ObjectClass = serde_json::from_value(serde_json::Value::String(class.trim().into()))
                .map_err(|_| Error::Config(format!("unknown class '{class}'")))?;
            let parts: Vec<u8> = rgb
                .split(',')
                .map(|p| p.trim().parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad colour '{rgb}'")))?;
            let [r, g, b] = parts[..] else {
                return Err(Error::Config(format!("colour '{rgb}' needs three channels")));
            };
            map.insert(class, [r, g, b]);
        }
        Ok(Palette(map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_indices(300, 5).unwrap(), vec![0, 75, 150, 224, 299]);
        assert_eq!(subsample_indices(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(subsample_indices(300, 1).unwrap(), vec![150]);
        assert!(matches!(subsample_indices(4, 5), Err(Error::Input(_))));
        assert!(subsample_indices(4, 0).is_err());
    }

    #[test]
    fn subsample_frames_follow_indices() {
        let frames: Vec<usize> = (100..110).collect();
        assert_eq!(subsample_uniform(&frames, 4).unwrap(), vec![100, 103, 106, 109]);
    }

    fn grey(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn boxed(class: ObjectClass, x: f64, y: f64, w: f64, h: f64, confidence: f64) -> SegmentationRecord {
        SegmentationRecord {
            frame: 0,
            class,
            region: Region::Box { x, y, w, h },
            confidence,
        }
    }

    #[test]
    fn cyan_over_grey() {
        let out = overlay_masks(
            &grey(4, 4, 100),
            &[boxed(ObjectClass::Car, 1.0, 1.0, 2.0, 2.0, 0.9)],
            &Palette::default(),
            0.7,
        )
        .unwrap();
        assert_eq!(out.get_pixel(1, 1).0, [30, 209, 209]);
        assert_eq!(out.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(out.get_pixel(3, 2).0, [100, 100, 100]);
    }

    #[test]
    fn magenta_truck_and_transparent_overlay() {
        let p = Palette::default();
        assert_eq!(p.colour(&ObjectClass::Truck).unwrap(), [255, 0, 255]);
        assert_eq!(p.colour(&ObjectClass::Car).unwrap(), [0, 255, 255]);
        let f = grey(3, 3, 77);
        let recs = [boxed(ObjectClass::Truck, 0.0, 0.0, 3.0, 3.0, 0.5)];
        assert_eq!(overlay_masks(&f, &recs, &p, 0.0).unwrap(), f);
    }

    #[test]
    fn missing_palette_entry_is_config_error() {
        let p = Palette(HashMap::from([(ObjectClass::Car, [0, 255, 255])]));
        let recs = [boxed(ObjectClass::Truck, 0.0, 0.0, 1.0, 1.0, 0.5)];
        assert!(matches!(
            overlay_masks(&grey(2, 2, 0), &recs, &p, 0.7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overlapping_regions_draw_low_confidence_last() {
        let recs = [
            boxed(ObjectClass::Car, 0.0, 0.0, 1.0, 1.0, 0.3),
            boxed(ObjectClass::Truck, 0.0, 0.0, 1.0, 1.0, 0.9),
        ];
        let out = overlay_masks(&grey(1, 1, 100), &recs, &Palette::default(), 0.7).unwrap();
        let truck = [0, 1, 2].map(|c| blend_channel(100, [255, 0, 255][c], 0.7));
        let both = [0, 1, 2].map(|c| blend_channel(truck[c], [0, 255, 255][c], 0.7));
        assert_eq!(out.get_pixel(0, 0).0, both);
    }

    #[test]
    fn polygon_region_fills_triangle() {
        let rec = SegmentationRecord {
            frame: 0,
            class: ObjectClass::Car,
            region: Region::Polygon(vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]),
            confidence: 1.0,
        };
        let out = overlay_masks(&grey(4, 4, 0), &[rec], &Palette::default(), 1.0).unwrap();
        assert_eq!(out.get_pixel(0, 0).0, [0, 255, 255]);
        assert_eq!(out.get_pixel(1, 1).0, [0, 255, 255]);
        assert_eq!(out.get_pixel(3, 3).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(2, 2).0, [0, 0, 0]);
    }

    #[test]
    fn region_outside_frame_is_rejected() {
        let recs = [boxed(ObjectClass::Car, 2.0, 0.0, 3.0, 1.0, 0.5)];
        assert!(matches!(
            overlay_masks(&grey(4, 4, 0), &recs, &Palette::default(), 0.7),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mask_json_roundtrip() {
        let line = r#"{"frame":3,"class":"truck","bbox":[1,2,3,4],"confidence":0.8}"#;
        let r = SegmentationRecord::from_json_line(line).unwrap();
        assert_eq!(r, SegmentationRecord { frame: 3, ..boxed(ObjectClass::Truck, 1.0, 2.0, 3.0, 4.0, 0.8) });
        assert_eq!(SegmentationRecord::from_json_line(&r.to_json_line()).unwrap(), r);
        assert!(SegmentationRecord::from_json_line(r#"{"frame":0}"#).is_err());
        let poly = r#"{"frame":0,"class":"car","bbox":[0,0,2,2],"polygon":[[0,0],[2,0],[2,2]],"confidence":1}"#;
        assert!(matches!(
            SegmentationRecord::from_json_line(poly).unwrap().region,
            Region::Polygon(_)
        ));
    }

    #[test]
    fn palette_parses() {
        let p: Palette = "car=1,2,3; truck=4,5,6".parse().unwrap();
        assert_eq!(p.colour(&ObjectClass::Car).unwrap(), [1, 2, 3]);
        assert!(p.colour(&ObjectClass::Other).is_err());
        assert!("bus=1,2,3".parse::<Palette>().is_err());
    }

    #[test]
    fn one_hot_encoding() {
        assert_eq!(one_hot(false).data(), &[1.0, 0.0]);
        assert_eq!(one_hot(true).data(), &[0.0, 1.0]);
        assert_eq!(one_hot(true).sum(), 1.0);
    }

    #[test]
    fn prepare_frames_scales_and_resizes() {
        let zeros = prepare_frames(&[grey(5, 3, 0)], (4, 4)).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let ones = prepare_frames(&[grey(5, 3, 255)], (4, 4)).unwrap();
        assert!(ones.data().iter().all(|&v| v == 1.0));

        let mut chk = RgbImage::new(2, 2);
        chk.put_pixel(1, 0, Rgb([255; 3]));
        chk.put_pixel(0, 1, Rgb([255; 3]));
        let t = prepare_frames(&[chk], (4, 4)).unwrap();
        // source coordinates per axis: 0, 0.25, 0.75, 1 (clamped)
        let w = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let want = w[x] * (1.0 - w[y]) + (1.0 - w[x]) * w[y];
                assert!((t.data()[(y * 4 + x) * 3] - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    fn annotations(ratings: Vec<Vec<f64>>) -> AnnotationSet {
        let n = ratings[0].len();
        AnnotationSet {
            clip_ids: (0..n).map(|i| format!("{i:04}")).collect(),
            annotator_ids: (0..ratings.len()).map(|a| format!("a{a}")).collect(),
            ratings,
        }
    }

    #[test]
    fn labels_for_860_clips() {
        let row: Vec<f64> = (0..860).map(|i| (1 + (i * 7919) % 5) as f64).collect();
        let labels = build_labels(&annotations(vec![row])).unwrap();
        let pos = labels.iter().filter(|l| l.is_risky).count();
        assert_eq!((pos, labels.len() - pos), (43, 817));
    }

    #[test]
    fn affine_annotators_agree() {
        let a: Vec<f64> = vec![1., 2., 5., 3., 3., 4., 1., 2., 5., 4., 2., 3.];
        let b: Vec<f64> = a.iter().map(|r| 2.5 * r + 7.0).collect();
        let la = build_labels(&annotations(vec![a.clone()])).unwrap();
        let lb = build_labels(&annotations(vec![b])).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert!((x.score - y.score).abs() < 1e-12);
            assert_eq!(x.is_risky, y.is_risky);
        }
    }

    #[test]
    fn labels_match_rank_oracle_on_40_clips() {
        let ratings: Vec<Vec<f64>> = (0..3)
            .map(|a| (0..40).map(|c| (1 + (c * (a + 2) + a * 11) % 5) as f64).collect())
            .collect();
        let set = annotations(ratings.clone());
        let got: Vec<String> = build_labels(&set)
            .unwrap()
            .into_iter()
            .filter(|l| l.is_risky)
            .map(|l| l.clip_id)
            .collect();
        // brute force: normalise with two-pass statistics, pick the best two
        let mut avg = vec![0.0; 40];
        for row in &ratings {
            let m = row.iter().sum::<f64>() / 40.0;
            let sd = (row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 40.0).sqrt();
            for c in 0..40 {
                avg[c] += (row[c] - m) / sd / 3.0;
            }
        }
        let mut want = Vec::new();
        for _ in 0..2 {
            let best = (0..40)
                .filter(|c| !want.contains(c))
                .fold(None, |acc: Option<usize>, c| match acc {
                    Some(b) if avg[b] >= avg[c] - 1e-12 => Some(b),
                    _ => Some(c),
                })
                .unwrap();
            want.push(best);
        }
        want.sort();
        let want: Vec<String> = want.iter().map(|c| format!("{c:04}")).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn constant_annotator_is_named() {
        let set = annotations(vec![vec![1., 2., 3.], vec![4., 4., 4.]]);
        match build_labels(&set) {
            Err(Error::Data(msg)) => assert!(msg.contains("a1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ties_at_threshold_prefer_lower_id() {
        // 20 clips → one positive; clips 3 and 7 tie at the top
        let mut row = vec![1.0; 20];
        row[0] = 2.0;
        row[3] = 5.0;
        row[7] = 5.0;
        let labels = build_labels(&annotations(vec![row])).unwrap();
        let pos: Vec<_> = labels.iter().filter(|l| l.is_risky).map(|l| l.clip_id.as_str()).collect();
        assert_eq!(pos, vec!["0003"]);
    }

    #[test]
    fn feature_file_rank_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let f = Tensor::new(&[300, 50], (0..15000).map(|v| v as f64).collect()).unwrap();
        let path = dir.path().join("a.tnsr");
        tensor_io::write(&path, &f, tensor_io::DType::F64).unwrap();
        let t = read_feature_matrix(&path).unwrap();
        let rows = select_rows(&t, &subsample_indices(300, 5).unwrap()).unwrap();
        let firsts: Vec<f64> = (0..5).map(|i| rows.outer(i)[0] / 50.0).collect();
        assert_eq!(firsts, vec![0.0, 75.0, 150.0, 224.0, 299.0]);

        let r3 = dir.path().join("b.tnsr");
        tensor_io::write(&r3, &Tensor::zeros(&[2, 2, 2]), tensor_io::DType::F32).unwrap();
        assert!(matches!(read_feature_matrix(&r3), Err(Error::Format { offset: 6, .. })));
        let empty = dir.path().join("c.tnsr");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(read_feature_matrix(&empty), Err(Error::Format { .. })));
    }

    #[test]
    fn annotation_csv_roundtrip_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let set = annotations(vec![vec![1., 3., 5.], vec![2., 2., 4.]]);
        let path = dir.path().join("annotations.csv");
        set.write_csv(&path).unwrap();
        assert_eq!(AnnotationSet::read_csv(&path).unwrap(), set);
        std::fs::write(&path, "clip_id,annotator_id,rating\nx,a,1\ny,a,2\nx,b,3\n").unwrap();
        assert!(matches!(AnnotationSet::read_csv(&path), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn subsample_is_increasing_with_endpoints(n in 1usize..400, t_frac in 0.0f64..1.0) {
            let t = 1 + ((n - 1) as f64 * t_frac) as usize;
            let idx = subsample_indices(n, t).unwrap();
            prop_assert_eq!(idx.len(), t);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(*idx.last().unwrap() < n);
            if t >= 2 {
                prop_assert_eq!(idx[0], 0);
                prop_assert_eq!(idx[t - 1], n - 1);
            }
        }

        #[test]
        fn overlay_touches_only_regions(
            v in any::<u8>(), x in 0u32..6, y in 0u32..6, w in 1u32..4, h in 1u32..4,
            alpha in 0.0f64..=1.0, truck in any::<bool>()
        ) {
            let frame = grey(10, 10, v);
            let class = if truck { ObjectClass::Truck } else { ObjectClass::Car };
            let rec = boxed(class, x as f64, y as f64, w as f64, h as f64, 0.5);
            let out = overlay_masks(&frame, std::slice::from_ref(&rec), &Palette::default(), alpha).unwrap();
            for (px, py, p) in out.enumerate_pixels() {
                if !rec.region.contains(px, py) {
                    prop_assert_eq!(p.0, [v; 3]);
                }
            }
            let again = overlay_masks(&frame, &[rec], &Palette::default(), alpha).unwrap();
            prop_assert_eq!(out, again);
        }

        #[test]
        fn positive_count_is_five_percent(n in 20usize..3000) {
            let row: Vec<f64> = (0..n).map(|i| (1 + (i * 31 + i / 7) % 5) as f64).collect();
            let labels = build_labels(&annotations(vec![row])).unwrap();
            prop_assert_eq!(labels.iter().filter(|l| l.is_risky).count(), n * 5 / 100);
        }
    }
}
