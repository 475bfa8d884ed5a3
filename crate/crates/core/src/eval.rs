//! AUC, stratified k-fold splitting, the T-sweep cross-validation harness
//! and tabular reporting.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::architectures::{Family, InputMode, Model, ModelSpec};
use crate::datapipe::{csv_error, Sample};
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

/// Mann–Whitney AUC: the fraction of (risky, safe) pairs where the risky
/// clip scores higher, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {bad} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the pair count keeps the half-ties integral.
    let mut twice = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Stratified folds of indices into `labels`. Each class is shuffled with
/// the seed and dealt round-robin; negatives continue where positives
/// stopped, so fold sizes differ by at most one.
pub fn kfold_split(labels: &[bool], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot split {n} clips into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !labels[i]).collect();
    if pos.len() < k {
        return Err(Error::Config(format!(
            "only {} risky clips for {k} folds; use k ≤ {}",
            pos.len(),
            pos.len().max(1)
        )));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        folds[slot % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// One unit of cross-validation work.
pub struct FoldTask<'a> {
    pub t: usize,
    pub fold: usize,
    pub seed: u64,
    pub train: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
}

/// Scores for the held-out clips, in `test` order. Frame-level scorers may
/// add per-frame scores with their labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FoldScores {
    pub clip_scores: Vec<f64>,
    pub frame_scores: Option<(Vec<f64>, Vec<bool>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub t: usize,
    pub fold: usize,
    pub clip_auc: f64,
    pub frame_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvOutcome {
    pub entries: Vec<SweepEntry>,
    /// `(T, mean clip AUC)` in sweep order.
    pub means: Vec<(usize, f64)>,
    pub best_t: usize,
}

impl CvOutcome {
    pub fn fold_aucs(&self, t: usize) -> Vec<f64> {
        self.entries.iter().filter(|e| e.t == t).map(|e| e.clip_auc).collect()
    }

    pub fn best_auc(&self) -> f64 {
        self.means.iter().find(|(t, _)| *t == self.best_t).map(|m| m.1).unwrap_or(f64::NAN)
    }
}

/// Deterministic per-(seed, T, fold) stream seed.
pub fn fold_seed(seed: u64, t: usize, fold: usize) -> u64 {
    let mut z = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (fold as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// T-sweep × k-fold harness. `samples_for` yields the dataset at a given T
/// (same clips, same order, for every T); `scorer` fits on the training
/// folds and scores the held-out fold. Folds are fixed across T.
pub fn cross_validate_with<L, S>(
    k: usize,
    t_sweep: &[usize],
    seed: u64,
    mut samples_for: L,
    scorer: S,
) -> Result<CvOutcome>
where
    L: FnMut(usize) -> Result<Vec<Sample>>,
    S: Fn(&FoldTask<'_>) -> Result<FoldScores> + Sync,
{
    if t_sweep.is_empty() {
        return Err(Error::Config("empty T sweep".into()));
    }
    let mut folds: Option<(Vec<String>, Vec<Vec<usize>>)> = None;
    let mut entries = Vec::new();
    let mut means = Vec::new();
    for &t in t_sweep {
        let samples = samples_for(t)?;
        let ids: Vec<String> = samples.iter().map(|s| s.clip_id.clone()).collect();
        let (fold_ids, fold_idx) = match &folds {
            Some(f) => f,
            None => {
                let labels: Vec<bool> = samples.iter().map(Sample::is_risky).collect();
                let negatives = labels.iter().filter(|l| !**l).count();
                if negatives < k {
                    return Err(Error::Config(format!("only {negatives} safe clips for {k} folds")));
                }
                folds.insert((ids.clone(), kfold_split(&labels, k, seed)?))
            }
        };
        if *fold_ids != ids {
            return Err(Error::Data(format!("dataset at T={t} lists different clips")));
        }
        let mut membership = vec![0usize; samples.len()];
        for (f, idx) in fold_idx.iter().enumerate() {
            for &i in idx {
                membership[i] = f;
            }
        }
        let results: Vec<Result<SweepEntry>> = (0..k)
            .into_par_iter()
            .map(|fold| {
                let task = FoldTask {
                    t,
                    fold,
                    seed: fold_seed(seed, t, fold),
                    train: (0..samples.len()).filter(|&i| membership[i] != fold).map(|i| &samples[i]).collect(),
                    test: fold_idx[fold].iter().map(|&i| &samples[i]).collect(),
                };
                let scores = scorer(&task)?;
                if scores.clip_scores.len() != task.test.len() {
                    return Err(Error::Metric(format!(
                        "scorer returned {} scores for {} clips",
                        scores.clip_scores.len(),
                        task.test.len()
                    )));
                }
                let labels: Vec<bool> = task.test.iter().map(|s| s.is_risky()).collect();
                let clip_auc = auc(&scores.clip_scores, &labels)?;
                let frame_auc = match &scores.frame_scores {
                    Some((s, l)) => Some(auc(s, l)?),
                    None => None,
                };
                Ok(SweepEntry {
                    t,
                    fold,
                    clip_auc,
                    frame_auc,
                })
            })
            .collect();
        let fold_entries = results.into_iter().collect::<Result<Vec<_>>>()?;
        means.push((t, mean(&fold_entries.iter().map(|e| e.clip_auc).collect::<Vec<_>>())));
        entries.extend(fold_entries);
    }
    // argmax, ties toward the smaller T
    let best_t = means
        .iter()
        .fold(None::<(usize, f64)>, |best, &(t, m)| match best {
            Some((bt, bm)) if bm > m || (bm == m && bt < t) => Some((bt, bm)),
            _ => Some((t, m)),
        })
        .map(|b| b.0)
        .expect("non-empty sweep");
    Ok(CvOutcome {
        entries,
        means,
        best_t,
    })
}

/// Model spec used at a sweep point: frame-level families always take one
/// frame per input.
pub fn spec_at(base: &ModelSpec, t: usize) -> ModelSpec {
    ModelSpec {
        frames: if base.family.is_frame_level() { 1 } else { t },
        ..base.clone()
    }
}

/// Trains a fresh model on the task's training clips and scores the
/// held-out clips.
pub fn train_and_score(base: &ModelSpec, config: &TrainConfig, task: &FoldTask<'_>) -> Result<FoldScores> {
    let spec = spec_at(base, task.t);
    let mut model = Model::from_spec(&spec, task.seed)?;
    let train_set: Vec<Sample> = task.train.iter().map(|s| (*s).clone()).collect();
    train(
        &mut model,
        &train_set,
        &TrainConfig {
            seed: task.seed,
            ..*config
        },
    )?;
    score_clips(&mut model, &task.test)
}

pub fn score_clips(model: &mut Model, clips: &[&Sample]) -> Result<FoldScores> {
    let mut clip_scores = Vec::with_capacity(clips.len());
    let mut frames = (Vec::new(), Vec::new());
    for s in clips {
        if model.is_frame_level() {
            let p = model.probabilities(&s.x)?;
            let per_frame: Vec<f64> = p.data().chunks_exact(2).map(|r| r[1]).collect();
            clip_scores.push(crate::architectures::frame_mean_score(per_frame.iter().copied()));
            frames.1.extend(std::iter::repeat_n(s.is_risky(), per_frame.len()));
            frames.0.extend(per_frame);
        } else {
            clip_scores.push(model.predict_clip(&s.x)?);
        }
    }
    Ok(FoldScores {
        clip_scores,
        frame_scores: model.is_frame_level().then_some(frames),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub architecture: String,
    pub input_mode: InputMode,
    pub params: usize,
    pub best_t: usize,
    pub auc: f64,
    pub fold_aucs: Vec<f64>,
}

impl ReportRow {
    pub fn from_outcome(spec: &ModelSpec, params: usize, outcome: &CvOutcome) -> Self {
        ReportRow {
            architecture: spec.label(),
            input_mode: spec.input_mode,
            params,
            best_t: outcome.best_t,
            auc: outcome.best_auc(),
            fold_aucs: outcome.fold_aucs(outcome.best_t),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    architecture: String,
    input_mode: String,
    params: usize,
    #[serde(rename = "best_T")]
    best_t: usize,
    auc: f64,
    fold_aucs: String,
}

fn sorted(rows: &[ReportRow]) -> Vec<&ReportRow> {
    let mut out: Vec<&ReportRow> = rows.iter().collect();
    out.sort_by(|a, b| {
        a.auc
            .total_cmp(&b.auc)
            .then_with(|| a.architecture.cmp(&b.architecture))
            .then_with(|| a.input_mode.cmp(&b.input_mode))
    });
    out
}

/// `architecture,input_mode,params,best_T,auc,fold_aucs`, sorted by AUC.
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in sorted(rows) {
        w.serialize(CsvRow {
            architecture: r.architecture.clone(),
            input_mode: r.input_mode.to_string(),
            params: r.params,
            best_t: r.best_t,
            auc: r.auc,
            fold_aucs: r.fold_aucs.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
        })
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok("architecture,input_mode,params,best_T,auc,fold_aucs\n".into());
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let fold_aucs = if row.fold_aucs.is_empty() {
            Vec::new()
        } else {
            row.fold_aucs
                .split(';')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}: bad fold AUC list: {e}", path.display())))?
        };
        out.push(ReportRow {
            architecture: row.architecture,
            input_mode: row.input_mode.parse()?,
            params: row.params,
            best_t: row.best_t,
            auc: row.auc,
            fold_aucs,
        });
    }
    Ok(out)
}

/// Plain-text table sorted by AUC ascending, best row last.
pub fn render_report(rows: &[ReportRow]) -> String {
    let header = ["Architecture", "Input mode", "#Params", "Best T", "AUC"];
    let body: Vec<[String; 5]> = sorted(rows)
        .into_iter()
        .map(|r| {
            [
                r.architecture.clone(),
                r.input_mode.to_string(),
                r.params.to_string(),
                r.best_t.to_string(),
                format!("{:.3}", r.auc),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for row in &body {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(width).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let _ = write!(s, "{c:<w$}");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in &body {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    out
}

/// Per-fold sweep results, one line per (T, fold).
pub fn sweep_csv(outcome: &CvOutcome) -> String {
    let mut s = String::from("T,fold,clip_auc,frame_auc\n");
    for e in &outcome.entries {
        let frame = e.frame_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", e.t, e.fold, e.clip_auc, frame);
    }
    s
}

/// Family of a report label, when it names one of the built-in stacks.
pub fn family_of(label: &str) -> Option<Family> {
    match label {
        "FbF CNN" | "FbF SMT+CNN" => Some(Family::FbfCnn),
        "CNN+LSTM" | "SMT+CNN+LSTM" => Some(Family::CnnLstm),
        "FbF FT" => Some(Family::FtSoftmax),
        "FT+LSTM" => Some(Family::FtLstm),
        _ => None,
    }
}
