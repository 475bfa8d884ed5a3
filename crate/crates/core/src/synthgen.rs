//! Synthetic lane-change clips with a known latent risk.
//!
//! Each clip shows a road, a dashed lane mark that sweeps across the image as
//! the ego vehicle changes lane, and one lead vehicle. The vehicle's apparent
//! size follows `s(τ) = s_mid · exp(γ·(τ − ½))` for `τ ∈ [0, 1]`, where `γ` is
//! the clip's log-growth (closing rate). Risk lives in `γ`, not in the size
//! of any single frame.
//!
//! Latent risk:
//!
//! ```text
//! r = clamp(γ / γ_max, 0, 1) · (0.75 + 0.25 · proximity)
//! ```
//!
//! where `proximity ∈ [0, 1]` is the normalised log-size of the last frame
//! (a small final gap means high proximity). Risky clips draw
//! `γ/γ_max ∈ [0.85, 1]`, safe clips `γ/γ_max ∈ [−0.4, 0.4]`, so the two
//! classes never overlap in `r`.
//!
//! `overlap` controls how much the per-frame size distributions of the two
//! classes coincide. At 1 the centre log-size of safe clips is spread over the
//! full range of sizes seen in risky clips; at 0 every safe clip sits at the
//! middle size.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    annotations_path, clip_dir, feature_path, frame_path, mask_path, write_frame, write_masks, AnnotationSet,
    ObjectClass, Region, SegmentationRecord,
};
use crate::error::{Error, Result};
use crate::tensor::io::{self as tensor_io, DType};
use crate::tensor::Tensor;

/// Log-growth of the most dangerous clip, `ln 2.5`.
pub const MAX_GROWTH: f64 = 0.916_290_731_874_155;
const MID_SIZE: f64 = 0.33;
const RISKY_SPREAD: f64 = 0.25;
const HORIZON: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub n_clips: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per clip.
    pub frames: usize,
    pub seed: u64,
    pub risk_fraction: f64,
    pub annotators: usize,
    /// Standard deviation of per-rating noise, in units of `r`.
    pub annotator_noise: f64,
    /// Scales the per-annotator bias (±0.05) and scale (1 ± 0.1). Zero makes
    /// all annotators identical.
    pub annotator_spread: f64,
    pub overlap: f64,
    /// Width of the stand-in feature files; `None` writes no features.
    pub feature_dim: Option<usize>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            n_clips: 200,
            height: 32,
            width: 32,
            frames: 60,
            seed: 0,
            risk_fraction: 0.05,
            annotators: 10,
            annotator_noise: 0.05,
            annotator_spread: 1.0,
            overlap: 1.0,
            feature_dim: None,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clips == 0 {
            return bad("n_clips must be positive".into());
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("frame size must be at least 16×16, got {}×{}", self.height, self.width));
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames per clip, got {}", self.frames));
        }
        if !(self.risk_fraction > 0.0 && self.risk_fraction < 1.0) {
            return bad(format!("risk fraction must lie in (0, 1), got {}", self.risk_fraction));
        }
        if self.annotators == 0 {
            return bad("need at least one annotator".into());
        }
        if !(self.annotator_noise >= 0.0 && self.annotator_noise.is_finite()) {
            return bad(format!("annotator noise must be ≥ 0, got {}", self.annotator_noise));
        }
        if !(self.annotator_spread >= 0.0 && self.annotator_spread.is_finite()) {
            return bad(format!("annotator spread must be ≥ 0, got {}", self.annotator_spread));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1], got {}", self.overlap));
        }
        if self.feature_dim == Some(0) {
            return bad("feature dimension must be positive".into());
        }
        Ok(())
    }

    pub fn risky_count(&self) -> usize {
        (self.risk_fraction * self.n_clips as f64 + 1e-9).floor() as usize
    }

    /// Bounds of the per-frame log-size (as a fraction of the short side).
    fn log_size_range(&self) -> (f64, f64) {
        let half = RISKY_SPREAD + MAX_GROWTH / 2.0;
        (MID_SIZE.ln() - half, MID_SIZE.ln() + half)
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub id: String,
    pub class: ObjectClass,
    pub is_risky: bool,
    /// `γ / γ_max`.
    pub closing: f64,
    /// Log-size at `τ = ½`.
    pub centre_log_size: f64,
    pub lateral: f64,
    pub lane_direction: f64,
    pub road: f64,
    pub body: [f64; 3],
    pub confidence: f64,
    pub latent_risk: f64,
}

impl Scene {
    pub fn log_size(&self, tau: f64) -> f64 {
        self.centre_log_size + self.closing * MAX_GROWTH * (tau - 0.5)
    }
}

pub fn latent_risk(closing: f64, final_log_size: f64, range: (f64, f64)) -> f64 {
    let proximity = ((final_log_size - range.0) / (range.1 - range.0)).clamp(0.0, 1.0);
    closing.clamp(0.0, 1.0) * (0.75 + 0.25 * proximity)
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn clip_stream(seed: u64, index: usize) -> ChaCha8Rng {
    stream(seed, 2 * index as u64 + 2)
}

fn rating_stream(seed: u64, index: usize) -> ChaCha8Rng {
    stream(seed, 2 * index as u64 + 3)
}

/// Picks the risky clips and draws every clip's scene parameters.
pub fn plan(params: &SceneParams) -> Result<Vec<Scene>> {
    params.validate()?;
    let mut order: Vec<usize> = (0..params.n_clips).collect();
    order.shuffle(&mut stream(params.seed, 0));
    let mut risky = vec![false; params.n_clips];
    for &i in &order[..params.risky_count()] {
        risky[i] = true;
    }
    let range = params.log_size_range();
    let mid = MID_SIZE.ln();
    Ok((0..params.n_clips)
        .map(|index| {
            let mut rng = clip_stream(params.seed, index);
            let is_risky = risky[index];
            let closing = if is_risky {
                rng.random_range(0.85..=1.0)
            } else {
                rng.random_range(-0.4..=0.4)
            };
            let centre_log_size = if is_risky {
                mid + rng.random_range(-RISKY_SPREAD..=RISKY_SPREAD)
            } else {
                let half = params.overlap * (range.1 - range.0) / 2.0;
                let u: f64 = rng.random_range(-1.0..=1.0);
                let raw = mid + u * half;
                let drift = closing * MAX_GROWTH / 2.0;
                raw.clamp(range.0 + drift.abs(), range.1 - drift.abs())
            };
            let road = rng.random_range(85.0..=115.0);
            let contrast = rng.random_range(25.0..=70.0);
            let body = [0; 3].map(|_| road - contrast + rng.random_range(-15.0..=15.0));
            let scene = Scene {
                index,
                id: clip_id(index),
                class: if index % 2 == 0 { ObjectClass::Car } else { ObjectClass::Truck },
                is_risky,
                closing,
                centre_log_size,
                lateral: rng.random_range(-0.06..=0.06),
                lane_direction: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                road,
                body,
                confidence: rng.random_range(0.8..=1.0),
                latent_risk: 0.0,
            };
            let latent = latent_risk(closing, scene.log_size(1.0), range);
            Scene {
                latent_risk: latent,
                ..scene
            }
        })
        .collect())
}

/// Vehicle box in pixels at time `tau`.
pub fn vehicle_box(params: &SceneParams, scene: &Scene, tau: f64) -> (f64, f64, f64, f64) {
    let (h, w) = (params.height as f64, params.width as f64);
    let short = h.min(w);
    let s = scene.log_size(tau).exp();
    let bw = (s * short).min(w);
    let aspect = if scene.class == ObjectClass::Truck { 0.85 } else { 0.6 };
    let bh = (bw * aspect).min(h);
    let cx = w * (0.5 + scene.lateral - 0.08 * scene.lane_direction * (tau - 0.5));
    let bottom = h * (0.42 + 0.55 * s);
    let x = (cx - bw / 2.0).clamp(0.0, w - bw);
    let y = (bottom - bh).clamp(0.0, h - bh);
    (x, y, bw, bh)
}

fn px(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders the clip's frames and one vehicle record per frame.
pub fn render(params: &SceneParams, scene: &Scene) -> (Vec<RgbImage>, Vec<SegmentationRecord>) {
    let (h, w) = (params.height, params.width);
    let mut rng = clip_stream(params.seed ^ 0x7E47_5EED, scene.index);
    let texture: Vec<f64> = (0..h * w).map(|_| rng.random_range(-10.0..=10.0)).collect();
    let horizon = HORIZON * h as f64;
    let mark_width = (w / 32).max(1) as f64;
    let mut frames = Vec::with_capacity(params.frames);
    let mut records = Vec::with_capacity(params.frames);
    for j in 0..params.frames {
        let tau = j as f64 / (params.frames - 1) as f64;
        let base = w as f64 * (0.5 + 0.35 * scene.lane_direction * (1.0 - 2.0 * tau));
        let (bx, by, bw, bh) = vehicle_box(params, scene, tau);
        let region = Region::Box { x: bx, y: by, w: bw, h: bh };
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            let cy = y as f64 + 0.5;
            let depth = (cy - horizon) / (h as f64 - horizon);
            let mark_x = w as f64 * 0.5 + (base - w as f64 * 0.5) * depth;
            let dashed = ((cy * 0.5 + 6.0 * tau).floor() as i64).rem_euclid(2) == 0;
            for x in 0..w {
                let cx = x as f64 + 0.5;
                let t = texture[y * w + x] + rng.random_range(-3.0..=3.0);
                let mut c = if cy < horizon {
                    [140.0 + t, 160.0 + t, 185.0 + t]
                } else if dashed && (cx - mark_x).abs() < mark_width {
                    [225.0 + t / 2.0; 3]
                } else {
                    [scene.road + t; 3]
                };
                if region.contains(x as u32, y as u32) {
                    let shade = if cy < by + 0.3 * bh { 30.0 } else { 0.0 };
                    c = scene.body.map(|b| b - shade + t / 2.0);
                }
                img.put_pixel(x as u32, y as u32, Rgb(c.map(px)));
            }
        }
        frames.push(img);
        records.push(SegmentationRecord {
            frame: j,
            class: scene.class.clone(),
            region,
            confidence: scene.confidence,
        });
    }
    (frames, records)
}

/// Ratings `clamp(round(1 + 4·(bias + scale·r + noise)), 1, 5)`.
pub fn annotate(params: &SceneParams, scenes: &[Scene]) -> AnnotationSet {
    let mut rng = stream(params.seed, 1);
    let raters: Vec<(f64, f64)> = (0..params.annotators)
        .map(|_| {
            let bias = rng.random_range(-0.05..=0.05) * params.annotator_spread;
            let scale = 1.0 + rng.random_range(-0.1..=0.1) * params.annotator_spread;
            (bias, scale)
        })
        .collect();
    let mut ratings = vec![Vec::with_capacity(scenes.len()); params.annotators];
    for scene in scenes {
        let mut rng = rating_stream(params.seed, scene.index);
        for (a, &(bias, scale)) in raters.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let v = 1.0 + 4.0 * (bias + scale * scene.latent_risk + params.annotator_noise * z);
            ratings[a].push(v.round().clamp(1.0, 5.0));
        }
    }
    AnnotationSet {
        clip_ids: scenes.iter().map(|s| s.id.clone()).collect(),
        annotator_ids: (0..params.annotators).map(|a| format!("a{a:02}")).collect(),
        ratings,
    }
}

/// Stand-in backbone features `[N × d]`: a fixed random projection of the
/// per-frame geometry through `tanh`, plus noise.
pub fn stand_in_features(params: &SceneParams, scene: &Scene, dim: usize) -> Tensor {
    let mut proj_rng = stream(params.seed, u64::MAX - 1);
    let proj: Vec<[f64; 4]> = (0..dim)
        .map(|_| [0; 4].map(|_| proj_rng.random_range(-1.0..=1.0)))
        .collect();
    let mut rng = clip_stream(params.seed ^ 0xFEA7, scene.index);
    let range = params.log_size_range();
    let mut data = Vec::with_capacity(params.frames * dim);
    for j in 0..params.frames {
        let tau = j as f64 / (params.frames - 1) as f64;
        let size = 2.0 * (scene.log_size(tau) - range.0) / (range.1 - range.0) - 1.0;
        let (bx, _, bw, _) = vehicle_box(params, scene, tau);
        let centre = 2.0 * (bx + bw / 2.0) / params.width as f64 - 1.0;
        let v = [size, centre, scene.lane_direction * (1.0 - 2.0 * tau), 1.0];
        for p in &proj {
            let dot: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
            data.push((1.5 * dot).tanh() + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::new(&[params.frames, dim], data).expect("shape matches data")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub clip_id: String,
    pub latent_risk: f64,
    pub is_risky: bool,
}

pub fn ground_truth_path(root: &Path) -> PathBuf {
    root.join("ground_truth.csv")
}

pub fn write_ground_truth(path: &Path, rows: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::datapipe::csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::datapipe::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::datapipe::csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| crate::datapipe::csv_error(path, e)))
        .collect()
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a complete dataset under `root` and returns its ground truth.
pub fn generate(params: &SceneParams, root: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let root = root.as_ref();
    let scenes = plan(params)?;
    mkdir(&root.join("clips"))?;
    mkdir(&root.join("masks"))?;
    if params.feature_dim.is_some() {
        mkdir(&root.join("features"))?;
    }
    scenes.par_iter().try_for_each(|scene| -> Result<()> {
        let (frames, records) = render(params, scene);
        mkdir(&clip_dir(root, &scene.id))?;
        for (j, f) in frames.iter().enumerate() {
            write_frame(&frame_path(root, &scene.id, j), f)?;
        }
        write_masks(&mask_path(root, &scene.id), &records)?;
        if let Some(d) = params.feature_dim {
            tensor_io::write(feature_path(root, &scene.id), &stand_in_features(params, scene, d), DType::F32)?;
        }
        Ok(())
    })?;
    annotate(params, &scenes).write_csv(annotations_path(root))?;
    let truth: Vec<GroundTruth> = scenes
        .iter()
        .map(|s| GroundTruth {
            clip_id: s.id.clone(),
            latent_risk: s.latent_risk,
            is_risky: s.is_risky,
        })
        .collect();
    write_ground_truth(&ground_truth_path(root), &truth)?;
    Ok(truth)
}
