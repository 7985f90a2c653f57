//! Coarse-to-fine orchestration: sample preparation for both stages,
//! candidate-box generation, three-channel voting inference, fold
//! evaluation and the CSV reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::boxes::{bbox_from_mask, box_iou, box_recall, enlarge, scale_up, BoundingBox};
use crate::config::{parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::losscore::{dsc, LossConfig};
use crate::tinynet::{train_epochs, AdamConfig, EpochLog, OptimizerState, Sample, Tensor, TrainConfig, UNetConfig, UNetParams};
use crate::volgrid::{
    crop, downsample_intensity, downsample_label, fit_to, pad_to_multiple, paste, upsample_label, Dims, LabelMap,
    Volume,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Decimation factor between the full and coarse grids.
    pub factor: usize,
    /// Margin around the ground-truth box of stage-2 training crops.
    pub train_margin: usize,
    /// Margin, in coarse voxels, around the coarse box before scaling up.
    pub coarse_test_margin: usize,
    /// Margin around the box of the upsampled coarse mask.
    pub fine_test_margin: usize,
    /// Votes out of three needed for a foreground voxel.
    pub vote_threshold: usize,
    pub prob_threshold: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            train_margin: 10,
            coarse_test_margin: 2,
            fine_test_margin: 10,
            vote_threshold: 2,
            prob_threshold: 0.5,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("cascade.factor must be at least 1".into()));
        }
        if !(1..=3).contains(&self.vote_threshold) {
            return Err(Error::Config("cascade.vote_threshold must be 1, 2 or 3".into()));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config("cascade.prob_threshold must be in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("cascade.") else {
            return Ok(false);
        };
        match field {
            "factor" => self.factor = parse_value(key, value)?,
            "train_margin" => self.train_margin = parse_value(key, value)?,
            "coarse_test_margin" => self.coarse_test_margin = parse_value(key, value)?,
            "fine_test_margin" => self.fine_test_margin = parse_value(key, value)?,
            "vote_threshold" => self.vote_threshold = parse_value(key, value)?,
            "prob_threshold" => self.prob_threshold = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(true)
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("cascade.factor", self.factor);
        kv.set("cascade.train_margin", self.train_margin);
        kv.set("cascade.coarse_test_margin", self.coarse_test_margin);
        kv.set("cascade.fine_test_margin", self.fine_test_margin);
        kv.set("cascade.vote_threshold", self.vote_threshold);
        kv.set("cascade.prob_threshold", self.prob_threshold);
        kv
    }
}

/// One preprocessed case: intensities in `[0, 1]` and the target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMap,
    pub fold: usize,
}

impl CaseRecord {
    pub fn new(id: String, volume: Volume, mask: LabelMap, fold: usize) -> Result<Self> {
        if volume.dims() != mask.dims() {
            return Err(Error::dims(volume.dims().to_array(), mask.dims().to_array()));
        }
        Ok(Self { id, volume, mask, fold })
    }
}

/// Zero-pad to a multiple of `factor · divisor`, then decimate, so the
/// coarse grid divides evenly through every pooling level.
pub fn stage1_input(volume: &Volume, factor: usize, divisor: usize) -> Result<Volume> {
    downsample_intensity(&pad_to_multiple(volume, factor * divisor)?, factor)
}

pub fn make_stage1_sample(case: &CaseRecord, cfg: &CascadeConfig, divisor: usize) -> Result<(Volume, LabelMap)> {
    let m = cfg.factor * divisor;
    let volume = stage1_input(&case.volume, cfg.factor, divisor)?;
    let mask = downsample_label(&pad_to_multiple(&case.mask, m)?, cfg.factor)?;
    Ok((volume, mask))
}

/// Crop around the enlarged ground-truth box, padded for the network.
/// `None` for an empty mask: such a case has no crop to learn from.
pub fn make_stage2_training_crop(
    case: &CaseRecord,
    cfg: &CascadeConfig,
    divisor: usize,
) -> Result<Option<(Volume, LabelMap)>> {
    let Some(gt) = bbox_from_mask(&case.mask) else {
        return Ok(None);
    };
    let b = enlarge(&gt, cfg.train_margin, case.mask.dims());
    let volume = pad_to_multiple(&crop(&case.volume, &b)?, divisor)?;
    let mask = pad_to_multiple(&crop(&case.mask, &b)?, divisor)?;
    Ok(Some((volume, mask)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateBoxes {
    /// From the coarse box: enlarged on the coarse grid, then scaled up.
    pub box1: BoundingBox,
    /// From the upsampled coarse mask, enlarged on the full grid.
    pub box2: BoundingBox,
    /// The coarse mask had no foreground inside the volume, so both boxes
    /// cover the whole volume.
    pub fallback: bool,
}

pub fn candidate_boxes(coarse: &LabelMap, full: Dims, cfg: &CascadeConfig) -> Result<CandidateBoxes> {
    let up = fit_to(&upsample_label(coarse, cfg.factor)?, full)?;
    let fine_box = bbox_from_mask(&up);
    let coarse_box = bbox_from_mask(coarse)
        .and_then(|b| scale_up(&enlarge(&b, cfg.coarse_test_margin, coarse.dims()), cfg.factor).clamp_to(full));
    Ok(match (coarse_box, fine_box) {
        (Some(box1), Some(b)) => CandidateBoxes {
            box1,
            box2: enlarge(&b, cfg.fine_test_margin, full),
            fallback: false,
        },
        _ => CandidateBoxes {
            box1: BoundingBox::full(full),
            box2: BoundingBox::full(full),
            fallback: true,
        },
    })
}

/// Per-voxel vote: foreground iff at least `threshold` of the three masks are.
pub fn majority_vote(a: &LabelMap, b: &LabelMap, c: &LabelMap, threshold: usize) -> Result<LabelMap> {
    for m in [b, c] {
        if m.dims() != a.dims() {
            return Err(Error::dims(a.dims().to_array(), m.dims().to_array()));
        }
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| ((x + y + z) as usize >= threshold) as u8)
        .collect();
    LabelMap::new(a.dims(), data)
}

/// A binary segmentation model for one stage.
pub trait Segmenter: Sync {
    /// Every input axis is padded to a multiple of this before `segment`.
    fn divisor(&self) -> usize {
        1
    }

    /// Mask on `input`'s grid. `input` is the region `region` of the stage's
    /// grid for `case` (the coarse grid for stage 1, the full grid for
    /// stage 2), possibly zero-padded at the high end.
    fn segment(&self, case: &CaseRecord, input: &Volume, region: &BoundingBox) -> Result<LabelMap>;
}

/// A trained network thresholded at a fixed probability.
pub struct NetSegmenter<'a> {
    pub params: &'a UNetParams<f32>,
    pub threshold: f64,
}

impl Segmenter for NetSegmenter<'_> {
    fn divisor(&self) -> usize {
        self.params.config().divisor()
    }

    fn segment(&self, _case: &CaseRecord, input: &Volume, _region: &BoundingBox) -> Result<LabelMap> {
        let padded = pad_to_multiple(input, self.divisor())?;
        let (pred, _) = self.params.forward(&Tensor::from_volume(&padded))?;
        fit_to(&pred.binarize(self.threshold), input.dims())
    }
}

/// Stage-2 stand-in that returns the ground truth inside the region.
pub struct OracleFine;

impl Segmenter for OracleFine {
    fn segment(&self, case: &CaseRecord, input: &Volume, region: &BoundingBox) -> Result<LabelMap> {
        fit_to(&crop(&case.mask, region)?, input.dims())
    }
}

/// Stage-1 stand-in that returns the decimated ground truth.
pub struct OracleCoarse {
    pub factor: usize,
    pub divisor: usize,
}

impl Segmenter for OracleCoarse {
    fn divisor(&self) -> usize {
        self.divisor
    }

    fn segment(&self, case: &CaseRecord, input: &Volume, region: &BoundingBox) -> Result<LabelMap> {
        let coarse = downsample_label(&pad_to_multiple(&case.mask, self.factor * self.divisor)?, self.factor)?;
        fit_to(&crop(&coarse, region)?, input.dims())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    /// Thresholded stage-1 output on the (padded) coarse grid.
    pub coarse: LabelMap,
    /// Channel 3: the coarse mask upsampled onto the full grid.
    pub coarse_up: LabelMap,
    /// Channels 1 and 2: stage-2 masks of the two candidate boxes.
    pub fine1: LabelMap,
    pub fine2: LabelMap,
    pub fused: LabelMap,
    pub boxes: CandidateBoxes,
}

fn fine_channel(case: &CaseRecord, fine: &dyn Segmenter, b: &BoundingBox) -> Result<LabelMap> {
    let input = crop(&case.volume, b)?;
    let m = fine.segment(case, &input, b)?;
    if m.dims() != b.dims() {
        return Err(Error::dims(m.dims().to_array(), b.extent()));
    }
    paste(&m, b, case.volume.dims())
}

pub fn infer_case(
    case: &CaseRecord,
    coarse: &dyn Segmenter,
    fine: &dyn Segmenter,
    cfg: &CascadeConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let full = case.volume.dims();
    let input = stage1_input(&case.volume, cfg.factor, coarse.divisor())?;
    let coarse_mask = coarse.segment(case, &input, &BoundingBox::full(input.dims()))?;
    if coarse_mask.dims() != input.dims() {
        return Err(Error::dims(coarse_mask.dims().to_array(), input.dims().to_array()));
    }
    let coarse_up = fit_to(&upsample_label(&coarse_mask, cfg.factor)?, full)?;
    let boxes = candidate_boxes(&coarse_mask, full, cfg)?;
    let (fine1, fine2) = rayon::join(
        || fine_channel(case, fine, &boxes.box1),
        || fine_channel(case, fine, &boxes.box2),
    );
    let (fine1, fine2) = (fine1?, fine2?);
    let fused = majority_vote(&fine1, &fine2, &coarse_up, cfg.vote_threshold)?;
    Ok(InferenceResult {
        coarse: coarse_mask,
        coarse_up,
        fine1,
        fine2,
        fused,
        boxes,
    })
}

/// Per-case metrics of one inference.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub id: String,
    pub fold: usize,
    pub dsc_stage1: f64,
    pub dsc_fused: f64,
    pub dsc_ch1: f64,
    pub dsc_ch2: f64,
    /// Box metrics against the ground-truth box; an empty ground truth
    /// counts as fully recalled with zero overlap.
    pub recall_box1: f64,
    pub recall_box2: f64,
    pub iou_box1: f64,
    pub iou_box2: f64,
    pub box1: BoundingBox,
    pub box2: BoundingBox,
    pub fallback: bool,
}

fn box_scores(gt: Option<&BoundingBox>, b: &BoundingBox) -> (f64, f64) {
    match gt {
        Some(g) => (box_recall(g, b), box_iou(g, b)),
        None => (1.0, 0.0),
    }
}

pub fn report_case(case: &CaseRecord, r: &InferenceResult) -> Result<CaseReport> {
    let gt = bbox_from_mask(&case.mask);
    let (recall_box1, iou_box1) = box_scores(gt.as_ref(), &r.boxes.box1);
    let (recall_box2, iou_box2) = box_scores(gt.as_ref(), &r.boxes.box2);
    Ok(CaseReport {
        id: case.id.clone(),
        fold: case.fold,
        dsc_stage1: dsc(&case.mask, &r.coarse_up)?,
        dsc_fused: dsc(&case.mask, &r.fused)?,
        dsc_ch1: dsc(&case.mask, &r.fine1)?,
        dsc_ch2: dsc(&case.mask, &r.fine2)?,
        recall_box1,
        recall_box2,
        iou_box1,
        iou_box2,
        box1: r.boxes.box1,
        box2: r.boxes.box2,
        fallback: r.boxes.fallback,
    })
}

/// Infer and score every case; cases run in parallel, rows keep input order.
pub fn evaluate_fold(
    cases: &[CaseRecord],
    coarse: &dyn Segmenter,
    fine: &dyn Segmenter,
    cfg: &CascadeConfig,
) -> Result<Vec<CaseReport>> {
    cases
        .par_iter()
        .map(|c| report_case(c, &infer_case(c, coarse, fine, cfg)?))
        .collect()
}

const CASE_HEADER: &str = "id,fold,dsc_stage1,dsc_stage2_fused,dsc_ch1,dsc_ch2,recall_box1,recall_box2,iou_box1,iou_box2,\
box1_x0,box1_y0,box1_z0,box1_x1,box1_y1,box1_z1,box2_x0,box2_y0,box2_z0,box2_x1,box2_y1,box2_z1,fallback";

pub fn case_csv(rows: &[CaseReport]) -> String {
    let mut s = format!("{CASE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.id,
            r.fold,
            r.dsc_stage1,
            r.dsc_fused,
            r.dsc_ch1,
            r.dsc_ch2,
            r.recall_box1,
            r.recall_box2,
            r.iou_box1,
            r.iou_box2,
            r.box1.to_csv(),
            r.box2.to_csv(),
            r.fallback as u8
        );
    }
    s
}

pub fn parse_case_csv(text: &str) -> Result<Vec<CaseReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CASE_HEADER => {}
        _ => return Err(Error::Format("case report: missing or unexpected header".into())),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("case report: malformed row {}", i + 1));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 23 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            let bx = |j: usize| BoundingBox::from_csv(&f[j..j + 6].join(",")).ok_or_else(bad);
            Ok(CaseReport {
                id: f[0].to_string(),
                fold: f[1].parse().map_err(|_| bad())?,
                dsc_stage1: num(2)?,
                dsc_fused: num(3)?,
                dsc_ch1: num(4)?,
                dsc_ch2: num(5)?,
                recall_box1: num(6)?,
                recall_box2: num(7)?,
                iou_box1: num(8)?,
                iou_box2: num(9)?,
                box1: bx(10)?,
                box2: bx(16)?,
                fallback: match f[22] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Stats {
            mean,
            std: var.sqrt(),
            max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSummary {
    /// Fold number, or `all` for the pooled row.
    pub fold: String,
    pub cases: usize,
    pub stage1: Stats,
    pub stage2: Stats,
    pub recall_box1: f64,
    pub iou_box1: f64,
    pub recall_box2: f64,
    pub iou_box2: f64,
}

fn summarize_rows(label: String, rows: &[&CaseReport]) -> Option<FoldSummary> {
    let col = |f: fn(&CaseReport) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
    let mean = |f: fn(&CaseReport) -> f64| Stats::of(&col(f)).map(|s| s.mean);
    Some(FoldSummary {
        fold: label,
        cases: rows.len(),
        stage1: Stats::of(&col(|r| r.dsc_stage1))?,
        stage2: Stats::of(&col(|r| r.dsc_fused))?,
        recall_box1: mean(|r| r.recall_box1)?,
        iou_box1: mean(|r| r.iou_box1)?,
        recall_box2: mean(|r| r.recall_box2)?,
        iou_box2: mean(|r| r.iou_box2)?,
    })
}

/// One row per fold present in `rows`, then a pooled `all` row.
pub fn summarize(rows: &[CaseReport]) -> Vec<FoldSummary> {
    let mut folds: Vec<usize> = rows.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();
    let mut out: Vec<FoldSummary> = folds
        .iter()
        .filter_map(|&f| {
            let sel: Vec<&CaseReport> = rows.iter().filter(|r| r.fold == f).collect();
            summarize_rows(f.to_string(), &sel)
        })
        .collect();
    out.extend(summarize_rows("all".into(), &rows.iter().collect::<Vec<_>>()));
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Percentages with two decimals: per-stage DSC mean, std, max, min, then
/// mean recall and IoU of each candidate box.
pub fn summary_csv(summary: &[FoldSummary]) -> String {
    let mut s = String::from(
        "fold,cases,stage1_mean,stage1_std,stage1_max,stage1_min,stage2_mean,stage2_std,stage2_max,stage2_min,\
box1_recall,box1_iou,box2_recall,box2_iou\n",
    );
    for f in summary {
        let st = |x: &Stats| [x.mean, x.std, x.max, x.min].map(pct).join(",");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            f.fold,
            f.cases,
            st(&f.stage1),
            st(&f.stage2),
            pct(f.recall_box1),
            pct(f.iou_box1),
            pct(f.recall_box2),
            pct(f.iou_box2)
        );
    }
    s
}

/// Human-readable two-table rendering of the pooled row.
pub fn summary_table(summary: &[FoldSummary]) -> String {
    let Some(all) = summary.iter().find(|f| f.fold == "all") else {
        return String::from("no cases\n");
    };
    let line = |name: &str, s: &Stats| {
        format!(
            "{name:<9} {:>6} ± {:<6} {:>7} {:>7}\n",
            pct(s.mean),
            pct(s.std),
            pct(s.max),
            pct(s.min)
        )
    };
    let mut t = format!("DSC (%) over {} cases\n{:<9} {:>15} {:>7} {:>7}\n", all.cases, "", "mean ± std", "max", "min");
    t += &line("stage 1", &all.stage1);
    t += &line("stage 2", &all.stage2);
    t += &format!("\n{:<9} {:>11} {:>9}\n", "box", "recall (%)", "IoU (%)");
    t += &format!("{:<9} {:>11} {:>9}\n", "box 1", pct(all.recall_box1), pct(all.iou_box1));
    t += &format!("{:<9} {:>11} {:>9}\n", "box 2", pct(all.recall_box2), pct(all.iou_box2));
    t
}

/// Training settings shared by both stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPlan {
    pub unet: UNetConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub loss: LossConfig,
}

/// Desk-scale recipe. Both stages start at a saturated-looking prior, where
/// Adam at 1e-3 can tip a net into the all-background optimum, hence the
/// gentler rate. Stage 1 sees only ~30 small coarse volumes and also trains
/// on mirrored copies; stage 2's crops converge within a few epochs.
impl Default for TrainPlan {
    fn default() -> Self {
        let adam = |lr| AdamConfig { lr, ..AdamConfig::default() };
        Self {
            unet: UNetConfig::default(),
            stage1: TrainConfig {
                epochs: 100,
                adam: adam(3e-4),
                seed: 0,
                flip: true,
            },
            stage2: TrainConfig {
                epochs: 10,
                adam: adam(3e-4),
                seed: 0,
                flip: false,
            },
            loss: LossConfig::default(),
        }
    }
}

impl TrainPlan {
    /// Derive every seed from one run seed. Stage 2 gets its own
    /// initialization and case order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.unet.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed.wrapping_add(1);
        self
    }

    pub fn stage_unet(&self, stage: u8) -> UNetConfig {
        UNetConfig {
            seed: self.unet.seed.wrapping_add(u64::from(stage) - 1),
            ..self.unet
        }
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let stage = |s: &mut TrainConfig, f: &str| -> Result<()> {
            match f {
                "epochs" => s.epochs = parse_value(key, value)?,
                "lr" => s.adam.lr = parse_value(key, value)?,
                "flip" => s.flip = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
            Ok(())
        };
        if let Some(f) = key.strip_prefix("unet.") {
            match f {
                "depth" => self.unet.depth = parse_value(key, value)?,
                "base_channels" => self.unet.base_channels = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        } else if let Some(f) = key.strip_prefix("stage1.") {
            stage(&mut self.stage1, f)?;
        } else if let Some(f) = key.strip_prefix("stage2.") {
            stage(&mut self.stage2, f)?;
        } else if let Some(f) = key.strip_prefix("loss.") {
            match f {
                "gamma0" => self.loss.gamma0 = parse_value(key, value)?,
                "gamma_cutoff_epoch" => self.loss.gamma_cutoff_epoch = parse_value(key, value)?,
                "epsilon" => self.loss.epsilon = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("unknown key {key}"))),
            }
        } else {
            return Ok(false);
        }
        Ok(true)
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("unet.depth", self.unet.depth);
        kv.set("unet.base_channels", self.unet.base_channels);
        kv.set("stage1.epochs", self.stage1.epochs);
        kv.set("stage1.lr", self.stage1.adam.lr);
        kv.set("stage1.flip", self.stage1.flip);
        kv.set("stage2.epochs", self.stage2.epochs);
        kv.set("stage2.lr", self.stage2.adam.lr);
        kv.set("stage2.flip", self.stage2.flip);
        kv.set("loss.gamma0", self.loss.gamma0);
        kv.set("loss.gamma_cutoff_epoch", self.loss.gamma_cutoff_epoch);
        kv.set("loss.epsilon", self.loss.epsilon);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.loss.validate()?;
        for s in [&self.stage1, &self.stage2] {
            if !(s.adam.lr > 0.0 && s.adam.lr.is_finite()) {
                return Err(Error::Config("learning rates must be positive".into()));
            }
        }
        Ok(())
    }
}

fn to_sample(volume: &Volume, target: LabelMap) -> Sample<f32> {
    Sample {
        input: Tensor::from_volume(volume),
        target,
    }
}

pub fn stage1_samples(cases: &[CaseRecord], cfg: &CascadeConfig, divisor: usize) -> Result<Vec<Sample<f32>>> {
    cases
        .par_iter()
        .map(|c| make_stage1_sample(c, cfg, divisor).map(|(v, m)| to_sample(&v, m)))
        .collect()
}

/// Stage-2 crops and the ids of cases skipped for an empty mask.
pub fn stage2_samples(
    cases: &[CaseRecord],
    cfg: &CascadeConfig,
    divisor: usize,
) -> Result<(Vec<Sample<f32>>, Vec<String>)> {
    let crops = cases
        .par_iter()
        .map(|c| make_stage2_training_crop(c, cfg, divisor))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (c, crop) in cases.iter().zip(crops) {
        match crop {
            Some((v, m)) => samples.push(to_sample(&v, m)),
            None => skipped.push(c.id.clone()),
        }
    }
    Ok((samples, skipped))
}

/// One epoch's mean loss terms, tagged with its stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub stage: u8,
    pub log: EpochLog,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("epoch,stage,dice_loss,center_loss,gamma,combined\n");
    for r in rows {
        let l = &r.log;
        let _ = writeln!(
            s,
            "{},{},{:.8},{:.8},{:e},{:.8}",
            l.epoch, r.stage, l.dice, l.center, l.gamma, l.total
        );
    }
    s
}

/// Pooled foreground fraction of the targets.
pub fn foreground_fraction(samples: &[Sample<f32>]) -> Option<f64> {
    let total: usize = samples.iter().map(|s| s.target.dims().voxel_count()).sum();
    let fg: usize = samples.iter().map(|s| s.target.count()).sum();
    (total > 0).then(|| fg as f64 / total as f64)
}

/// Initialize at the training set's foreground prior, then train.
pub fn train_stage(
    samples: &[Sample<f32>],
    unet: UNetConfig,
    train: &TrainConfig,
    loss: &LossConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(UNetParams<f32>, Vec<EpochLog>)> {
    let mut params = UNetParams::<f32>::init(unet)?;
    if let Some(f) = foreground_fraction(samples) {
        params.set_output_prior(f);
    }
    let mut state = OptimizerState::new(&params, train.adam);
    let logs = train_epochs(&mut params, &mut state, samples, train, loss, on_epoch)?;
    Ok((params, logs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedCascade {
    pub stage1: UNetParams<f32>,
    pub stage2: UNetParams<f32>,
    pub losses: Vec<LossRow>,
    /// Cases left out of stage 2 for an empty ground truth.
    pub skipped: Vec<String>,
}

/// Train both stages, one after the other, on `cases`.
pub fn train_cascade(
    cases: &[CaseRecord],
    cfg: &CascadeConfig,
    plan: &TrainPlan,
    mut progress: impl FnMut(u8, &EpochLog),
) -> Result<TrainedCascade> {
    cfg.validate()?;
    plan.validate()?;
    let divisor = plan.unet.divisor();
    let mut losses = Vec::new();
    let s1 = stage1_samples(cases, cfg, divisor)?;
    let (stage1, logs1) = train_stage(&s1, plan.stage_unet(1), &plan.stage1, &plan.loss, |l| progress(1, l))?;
    losses.extend(logs1.into_iter().map(|log| LossRow { stage: 1, log }));
    drop(s1);
    let (s2, skipped) = stage2_samples(cases, cfg, divisor)?;
    let (stage2, logs2) = train_stage(&s2, plan.stage_unet(2), &plan.stage2, &plan.loss, |l| progress(2, l))?;
    losses.extend(logs2.into_iter().map(|log| LossRow { stage: 2, log }));
    Ok(TrainedCascade {
        stage1,
        stage2,
        losses,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldRun {
    pub fold: usize,
    pub models: TrainedCascade,
    pub reports: Vec<CaseReport>,
}

/// Train on every other fold, evaluate on `fold`.
pub fn run_fold(
    cases: &[CaseRecord],
    fold: usize,
    cfg: &CascadeConfig,
    plan: &TrainPlan,
    progress: impl FnMut(u8, &EpochLog),
) -> Result<FoldRun> {
    let train: Vec<CaseRecord> = cases.iter().filter(|c| c.fold != fold).cloned().collect();
    let test: Vec<CaseRecord> = cases.iter().filter(|c| c.fold == fold).cloned().collect();
    if test.is_empty() {
        return Err(Error::Config(format!("fold {fold} has no cases")));
    }
    let models = train_cascade(&train, cfg, plan, progress)?;
    let coarse = NetSegmenter {
        params: &models.stage1,
        threshold: cfg.prob_threshold,
    };
    let fine = NetSegmenter {
        params: &models.stage2,
        threshold: cfg.prob_threshold,
    };
    let reports = evaluate_fold(&test, &coarse, &fine, cfg)?;
    Ok(FoldRun { fold, models, reports })
}

/// Axial slice `z` as RGB: intensity in grey, ground truth in green,
/// prediction in red (overlap shows yellow).
pub fn overlay_slice(volume: &Volume, gt: &LabelMap, pred: &LabelMap, z: usize) -> Result<image::RgbImage> {
    let dims = volume.dims();
    if gt.dims() != dims || pred.dims() != dims {
        return Err(Error::dims(dims.to_array(), gt.dims().to_array()));
    }
    if z >= dims.d {
        return Err(Error::Shape(format!("slice {z} outside depth {}", dims.d)));
    }
    Ok(image::RgbImage::from_fn(dims.w as u32, dims.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = (volume.get(x, y, z).clamp(0.0, 1.0) * 255.0) as u8;
        let mut px = [g / 2; 3];
        if gt.get(x, y, z) == 1 {
            px[1] = 255;
        }
        if pred.get(x, y, z) == 1 {
            px[0] = 255;
        }
        image::Rgb(px)
    }))
}

pub fn save_overlay(path: &Path, volume: &Volume, gt: &LabelMap, pred: &LabelMap, z: usize) -> Result<()> {
    overlay_slice(volume, gt, pred, z)?
        .save(path)
        .map_err(|e| Error::Format(format!("png: {e}")))
}
