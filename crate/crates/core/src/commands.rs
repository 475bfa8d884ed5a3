//! The `synth`, `overlay`, `train`, `crossval` and `report` workflows, and
//! the run configuration they share.
//!
//! Configuration is layered: profile defaults, then a `key=value` file, then
//! command-line overrides. The seed falls back to `LANERISK_SEED` when
//! neither the file nor the overrides set one.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::architectures::{Family, InputMode, Model, ModelSpec};
use crate::datapipe::{
    self, annotations_path, clip_dir, load_clip, load_masks, mask_path, overlay_masks, write_frame,
    Palette, SampleSpec, MASK_ALPHA,
};
use crate::error::{Error, Result};
use crate::eval::{self, CvOutcome, ReportRow};
use crate::synthgen::{self, GroundTruth, SceneParams};
use crate::training::{train, AdamConfig, TrainConfig, TrainHistory};

pub const SEED_ENV: &str = "LANERISK_SEED";
pub const PAPER_T_SWEEP: [usize; 6] = [5, 10, 15, 20, 50, 100];
pub const DESK_T_SWEEP: [usize; 5] = [5, 10, 15, 20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub dataset: Option<PathBuf>,
    pub architectures: Vec<Family>,
    /// `None` picks raw frames for image models and features otherwise.
    pub input_mode: Option<InputMode>,
    pub t_sweep: Vec<usize>,
    pub k: usize,
    pub train: TrainConfig,
    pub resolution: (usize, usize),
    pub alpha: f64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let paper = RunConfig {
            profile,
            dataset: None,
            architectures: vec![Family::CnnLstm],
            input_mode: None,
            t_sweep: PAPER_T_SWEEP.to_vec(),
            k: 10,
            train: TrainConfig::default(),
            resolution: (28, 28),
            alpha: MASK_ALPHA,
            jobs: None,
            out: PathBuf::from("runs"),
        };
        match profile {
            Profile::Paper => paper,
            Profile::Desk => RunConfig {
                t_sweep: DESK_T_SWEEP.to_vec(),
                resolution: (32, 32),
                train: TrainConfig {
                    epochs: 60,
                    adam: AdamConfig {
                        lr: 1e-3,
                        ..AdamConfig::default()
                    },
                    balance_classes: true,
                    ..TrainConfig::default()
                },
                ..paper
            },
        }
    }

    /// Applies one `key=value` setting. Keys match the long flag names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("{key}: invalid {what} {value:?}"));
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "arch" => {
                self.architectures = value
                    .split(',')
                    .map(|a| a.trim().parse::<Family>())
                    .collect::<Result<_>>()?;
            }
            "input" => self.input_mode = Some(value.parse()?),
            "t-sweep" => {
                self.t_sweep = value
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| bad("frame count")))
                    .collect::<Result<_>>()?;
            }
            "k" => self.k = value.parse().map_err(|_| bad("fold count"))?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad("seed"))?,
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad("epoch count"))?,
            "batch" => self.train.batch_size = value.parse().map_err(|_| bad("batch size"))?,
            "lr" => self.train.adam.lr = value.parse().map_err(|_| bad("learning rate"))?,
            "decay" => self.train.adam.decay = value.parse().map_err(|_| bad("decay"))?,
            "split" => self.train.split = value.parse().map_err(|_| bad("split"))?,
            "balance" => self.train.balance_classes = value.parse().map_err(|_| bad("boolean"))?,
            "resolution" => self.resolution = parse_resolution(value)?,
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "jobs" => self.jobs = Some(value.parse().map_err(|_| bad("job count"))?),
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Profile defaults, then `file` settings, then `overrides`. `env_seed`
    /// is used only when no layer sets `seed`.
    pub fn resolve(
        profile: Option<Profile>,
        file: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let file_pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        let file_profile = file_pairs.iter().rev().find(|(k, _)| k == "profile");
        let profile = match (profile, file_profile) {
            (Some(p), _) => p,
            (None, Some((_, v))) => v.parse()?,
            (None, None) => Profile::Desk,
        };
        let mut cfg = RunConfig::for_profile(profile);
        let mut seeded = false;
        for (k, v) in file_pairs.iter().chain(overrides) {
            if k == "profile" {
                continue;
            }
            seeded |= k == "seed";
            cfg.set(k, v)?;
        }
        if !seeded {
            if let Some(s) = env_seed {
                cfg.train.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}: invalid seed {s:?}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.architectures.is_empty() {
            return bad("no architecture requested".into());
        }
        if self.t_sweep.is_empty() || self.t_sweep.contains(&0) {
            return bad(format!("T sweep must be non-empty and positive, got {:?}", self.t_sweep));
        }
        if self.k < 2 {
            return bad(format!("need at least 2 folds, got {}", self.k));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        self.train.validate()?;
        for &family in &self.architectures {
            for &t in &self.t_sweep {
                self.spec(family, t, Some(1))?.validate()?;
            }
        }
        Ok(())
    }

    pub fn mode_for(&self, family: Family) -> InputMode {
        self.input_mode.unwrap_or(if family.uses_features() {
            InputMode::Features
        } else {
            InputMode::Raw
        })
    }

    pub fn spec(&self, family: Family, frames: usize, feature_dim: Option<usize>) -> Result<ModelSpec> {
        let input_mode = self.mode_for(family);
        Ok(ModelSpec {
            family,
            input_mode,
            frames: if family.is_frame_level() { 1 } else { frames },
            resolution: self.resolution,
            feature_dim: if family.uses_features() { feature_dim } else { None },
        })
    }

    pub fn sample_spec(&self, mode: InputMode, frames: usize) -> SampleSpec {
        SampleSpec {
            alpha: self.alpha,
            ..SampleSpec::new(mode, frames, self.resolution)
        }
    }

    pub fn dataset(&self) -> Result<&Path> {
        let path = self
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given".into()))?;
        if !annotations_path(path).is_file() {
            return Err(Error::Config(format!("{} is not a dataset (no annotations.csv)", path.display())));
        }
        Ok(path)
    }

    /// The resolved configuration in the file format [`RunConfig::resolve`]
    /// reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("profile", self.profile.to_string());
        if let Some(d) = &self.dataset {
            put("dataset", d.display().to_string());
        }
        put(
            "arch",
            self.architectures.iter().map(|f| f.cli_name()).collect::<Vec<_>>().join(","),
        );
        if let Some(m) = self.input_mode {
            put("input", m.to_string());
        }
        put(
            "t-sweep",
            self.t_sweep.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","),
        );
        put("k", self.k.to_string());
        put("seed", self.train.seed.to_string());
        put("epochs", self.train.epochs.to_string());
        put("batch", self.train.batch_size.to_string());
        put("lr", self.train.adam.lr.to_string());
        put("decay", self.train.adam.decay.to_string());
        put("split", self.train.split.to_string());
        put("balance", self.train.balance_classes.to_string());
        put("resolution", format!("{}x{}", self.resolution.0, self.resolution.1));
        put("alpha", self.alpha.to_string());
        if let Some(j) = self.jobs {
            put("jobs", j.to_string());
        }
        put("out", self.out.display().to_string());
        s
    }

    pub fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        with_jobs(self.jobs, f)
    }
}

/// Runs `f` on a pool of `jobs` workers, or on the global pool.
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match jobs {
        None => Ok(f()),
        Some(0) => Err(Error::Config("jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// `H×W`, `HxW` or a single size for square frames.
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("invalid resolution {s:?} (expected HxW)"));
    let parts: Vec<&str> = s.split(['x', 'X', '×']).map(str::trim).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match nums[..] {
        [n] => Ok((n, n)),
        [h, w] => Ok((h, w)),
        _ => Err(bad()),
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(params: &SceneParams, out: &Path) -> Result<Vec<GroundTruth>> {
    params.validate()?;
    synthgen::generate(params, out)
}

/// Writes every frame of `clip` with its masks composited. Frames without
/// records are copied unchanged. Returns the number of frames written.
pub fn cmd_overlay(dataset: &Path, clip: &str, out: &Path, palette: &Palette, alpha: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !clip_dir(dataset, clip).is_dir() {
        return Err(Error::Config(format!("no clip {clip:?} in {}", dataset.display())));
    }
    let masks_file = mask_path(dataset, clip);
    if !masks_file.is_file() {
        return Err(Error::io(
            masks_file,
            std::io::Error::new(std::io::ErrorKind::NotFound, "mask file not found"),
        ));
    }
    let frames = load_clip(dataset, clip)?.frames;
    let masks = load_masks(dataset, clip)?;
    mkdir(out)?;
    for (j, frame) in frames.iter().enumerate() {
        let img = match masks.get(&j) {
            Some(records) => overlay_masks(frame, records, palette, alpha)?,
            None => frame.clone(),
        };
        write_frame(&out.join(format!("frame_{j:06}.png")), &img)?;
    }
    Ok(frames.len())
}

fn feature_dim(dataset: &Path, mode: InputMode) -> Result<Option<usize>> {
    if mode != InputMode::Features {
        return Ok(None);
    }
    let labels = datapipe::dataset_labels(dataset)?;
    let first = labels.first().ok_or_else(|| Error::Data("dataset has no clips".into()))?;
    Ok(Some(datapipe::load_features(dataset, &first.clip_id)?.shape()[1]))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub spec: ModelSpec,
    pub params: usize,
    pub history: TrainHistory,
    pub checkpoint: PathBuf,
}

/// One train/validate run of the first requested architecture at the first
/// T of the sweep. Writes `model.ckpt`, `history.csv` and `run.cfg`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    let family = cfg.architectures[0];
    let t = cfg.t_sweep[0];
    let mode = cfg.mode_for(family);
    let spec = cfg.spec(family, t, feature_dim(dataset, mode)?)?;
    let mut model = Model::from_spec(&spec, cfg.train.seed)?;
    let samples = cfg.run(|| datapipe::load_samples(dataset, &cfg.sample_spec(mode, t)))??;
    let history = cfg.run(|| train(&mut model, &samples, &cfg.train))??;
    mkdir(&cfg.out)?;
    let checkpoint = cfg.out.join("model.ckpt");
    model.save_checkpoint(&checkpoint)?;
    history.write_csv(cfg.out.join("history.csv"))?;
    write(&cfg.out.join("run.cfg"), &cfg.to_text())?;
    Ok(TrainOutcome {
        params: model.param_count(),
        spec,
        history,
        checkpoint,
    })
}

/// Cross-validates one architecture over the sweep.
pub fn crossval_one(cfg: &RunConfig, family: Family) -> Result<(ReportRow, CvOutcome)> {
    let dataset = cfg.dataset()?;
    let mode = cfg.mode_for(family);
    let dim = feature_dim(dataset, mode)?;
    let base = cfg.spec(family, cfg.t_sweep[0], dim)?;
    let outcome = cfg.run(|| {
        eval::cross_validate_with(
            cfg.k,
            &cfg.t_sweep,
            cfg.train.seed,
            |t| datapipe::load_samples(dataset, &cfg.sample_spec(mode, t)),
            |task| eval::train_and_score(&base, &cfg.train, task),
        )
    })??;
    let best = cfg.spec(family, outcome.best_t, dim)?;
    let params = Model::from_spec(&best, 0)?.param_count();
    Ok((ReportRow::from_outcome(&best, params, &outcome), outcome))
}

/// Full sweep for every requested architecture. Writes `report.csv`,
/// `report.txt`, one `sweep_<arch>_<input>.csv` per row and `run.cfg`.
pub fn cmd_crossval(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let dataset = cfg.dataset()?;
    if let Some(&t) = cfg.t_sweep.iter().max() {
        let labels = datapipe::dataset_labels(dataset)?;
        if let Some(l) = labels.first() {
            if cfg.mode_for(cfg.architectures[0]) != InputMode::Features {
                let n = datapipe::frame_count(dataset, &l.clip_id)?;
                if t > n {
                    return Err(Error::Config(format!("T={t} exceeds the {n} frames of clip {}", l.clip_id)));
                }
            }
        }
    }
    let mut rows = Vec::new();
    let mut sweeps = Vec::new();
    for &family in &cfg.architectures {
        let (row, outcome) = crossval_one(cfg, family)?;
        sweeps.push((
            format!("sweep_{}_{}.csv", family.cli_name(), cfg.mode_for(family)),
            eval::sweep_csv(&outcome),
        ));
        rows.push(row);
    }
    mkdir(&cfg.out)?;
    for (name, text) in &sweeps {
        write(&cfg.out.join(name), text)?;
    }
    write(&cfg.out.join("report.csv"), &eval::report_csv(&rows)?)?;
    write(&cfg.out.join("report.txt"), &eval::render_report(&rows))?;
    write(&cfg.out.join("run.cfg"), &cfg.to_text())?;
    Ok(rows)
}

/// Merges `report.csv` files found in `dir` and its immediate
/// subdirectories. Rows sharing an architecture and input mode get the run
/// directory name appended.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    if dir.join("report.csv").is_file() {
        files.push(dir.join("report.csv"));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    files.extend(subdirs.iter().map(|d| d.join("report.csv")).filter(|p| p.is_file()));
    if files.is_empty() {
        return Err(Error::Config(format!("no report.csv under {}", dir.display())));
    }
    let mut tagged = Vec::new();
    for f in &files {
        let run = f
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into());
        for row in eval::read_report_csv(f)? {
            tagged.push((run.clone(), row));
        }
    }
    let mut seen: BTreeMap<(String, InputMode), usize> = BTreeMap::new();
    for (_, row) in &tagged {
        *seen.entry((row.architecture.clone(), row.input_mode)).or_default() += 1;
    }
    Ok(tagged
        .into_iter()
        .map(|(run, mut row)| {
            if seen[&(row.architecture.clone(), row.input_mode)] > 1 {
                row.architecture = format!("{} [{run}]", row.architecture);
            }
            row
        })
        .collect())
}
