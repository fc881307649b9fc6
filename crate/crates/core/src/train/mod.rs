//! Training, video fine-tuning and evaluation loops.

mod checkpoint;
mod config;
mod optim;
mod schedule;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use self::checkpoint::{from_archive, load_checkpoint, save_checkpoint, to_archive, Checkpoint, TrainState};
pub use self::config::{
    apply_override, DataConfig, EvalStyle, FinetuneConfig, RunConfig, ScheduleKind, TrainConfig,
};
pub use self::optim::{build_param_groups, decays_weight, layer_multiplier, AdamW, ParamGroup};
pub use self::schedule::{warmup_steps, LrSchedule};

use crate::data::{
    augment_scene, mask_background_patches, normalize_imagenet, resize_image, sample_rng, GazeSample, HeadBox,
    ImageSource, ImageTensor,
};
use crate::grid::PatchGrid;
use crate::metrics::{auc, average_precision, distances, MetricsReport, AUC_GRID};
use crate::model::{prepare_image, GazeModel, TrainExample};
use crate::nn::{zeroed_like, Parameterized};
use crate::{Error, Result, Scalar};

/// Environment variable naming the compute device.
pub const DEVICE_ENV: &str = "VITGAZE_DEVICE";

/// Resolve the device from a flag, then the environment; only `cpu` exists.
pub fn resolve_device(flag: Option<&str>) -> Result<String> {
    let env = std::env::var(DEVICE_ENV).ok();
    let dev = flag.map(str::to_string).or(env).unwrap_or_else(|| "cpu".into());
    if dev.eq_ignore_ascii_case("cpu") {
        Ok("cpu".into())
    } else {
        Err(Error::Config(format!("unsupported device `{dev}`; this build runs on cpu only")))
    }
}

/// Samples plus the images they refer to.
pub struct Dataset<'a> {
    pub samples: Vec<GazeSample>,
    pub images: &'a dyn ImageSource,
    frame_heads: HashMap<String, Vec<HeadBox>>,
}

impl<'a> Dataset<'a> {
    pub fn new(samples: Vec<GazeSample>, images: &'a dyn ImageSource) -> Self {
        let mut frame_heads: HashMap<String, Vec<HeadBox>> = HashMap::new();
        for s in &samples {
            let heads = frame_heads.entry(s.image_ref.clone()).or_default();
            if !heads.contains(&s.head) {
                heads.push(s.head);
            }
        }
        Self {
            samples,
            images,
            frame_heads,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Annotated heads sharing the frame of sample `i`, itself excluded.
    pub fn other_heads(&self, i: usize) -> Vec<HeadBox> {
        let s = &self.samples[i];
        self.frame_heads[&s.image_ref]
            .iter()
            .filter(|h| **h != s.head)
            .copied()
            .collect()
    }

    fn load<T: Scalar>(&self, i: usize) -> Result<ImageTensor<T>> {
        let img = self.images.load(&self.samples[i].image_ref)?;
        Ok(img.mapv(|v| T::lit(v as f64)))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub resolution: usize,
    pub loss: f64,
    pub heatmap: f64,
    pub inout: f64,
    pub aux: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: GazeModel<T>,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Augmented, masked and normalised training example for sample `i`.
///
/// Everything random is drawn from `sample_rng(seed, stream)`, so the same
/// arguments always give the same example.
pub fn training_example<T: Scalar>(
    data: &Dataset<'_>,
    i: usize,
    cfg: &RunConfig,
    resolution: usize,
    stream: u64,
) -> Result<TrainExample<T>> {
    let mut rng = sample_rng(cfg.seed, stream);
    let img = data.load::<T>(i)?;
    let others = data.other_heads(i);
    let (img, sample, others) = augment_scene(&data.samples[i], &others, &img, &cfg.augment, &mut rng);
    let img = resize_image(&img, resolution, resolution);
    let grid = PatchGrid::for_image(resolution, resolution, cfg.model.vit.patch_size)?;
    let mut all_heads = vec![sample.head];
    all_heads.extend(others);
    let (img, mask) = mask_background_patches(
        img,
        &all_heads,
        grid,
        cfg.augment.mask_token_prob,
        cfg.augment.background_overlap_threshold,
        &mut rng,
    );
    Ok(TrainExample {
        image: normalize_imagenet(&img),
        mask: mask.iter().any(|&m| m).then_some(mask),
        head: sample.head,
        all_heads,
        gaze: sample.primary_gaze(),
        inside: sample.inside,
    })
}

/// Per-epoch sample order.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = sample_rng(seed ^ 0x5eed_0f0d, epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn stream_id(epoch: usize, i: usize) -> u64 {
    ((epoch as u64) << 32) | i as u64
}

struct Phase<'p> {
    name: &'p str,
    epochs: usize,
    schedule: LrSchedule,
}

struct Log {
    out: Option<BufWriter<File>>,
}

impl Log {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let out = match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join("train_log.jsonl");
                let f = File::options()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        Ok(Self { out })
    }

    fn write(&mut self, rec: &StepRecord, dir: Option<&Path>) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::to_string(rec).expect("records serialise");
            let path = dir.map(|d| d.join("train_log.jsonl")).unwrap_or_default();
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(step: usize, rec: &StepRecord, grad: &GazeModel<T>) -> Result<()> {
    if !rec.loss.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!(
                "non-finite loss (heatmap {}, inout {}, aux {})",
                rec.heatmap, rec.inout, rec.aux
            ),
        });
    }
    let mut bad = None;
    grad.visit("", &mut |name, g| {
        if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::Divergence {
            step,
            detail: format!("non-finite gradient in {name}"),
        }),
        None => Ok(()),
    }
}

fn run_phase<T: Scalar>(
    mut model: GazeModel<T>,
    cfg: &RunConfig,
    data: &Dataset<'_>,
    phase: Phase<'_>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    let t = &cfg.train;
    let groups = build_param_groups(&model, model.config.vit.depth, t.layerwise_decay, t.weight_decay);
    let mut opt = AdamW::new(t.momentum_decay, t.variance_decay, t.epsilon, groups);
    let mut log = Log::open(out_dir)?;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let n = data.len();
    let mut step = 0;
    for epoch in 0..phase.epochs {
        let resolution = t.resolution_for_epoch(epoch, phase.epochs);
        let order = epoch_order(cfg.seed, epoch, n);
        for chunk in order.chunks(t.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| training_example(data, i, cfg, resolution, stream_id(epoch, i)))
                .collect::<Result<Vec<TrainExample<T>>>>()?;
            let lr = phase.schedule.lr_at(step);
            let mut grad = zeroed_like(&model);
            let out = model.loss_and_grad(&batch, &cfg.loss, &mut grad)?;
            let rec = StepRecord {
                phase: phase.name.to_string(),
                epoch,
                step,
                lr,
                resolution,
                loss: out.total,
                heatmap: out.parts.heatmap,
                inout: out.parts.inout,
                aux: out.parts.aux,
            };
            check_finite(step, &rec, &grad)?;
            model.update_running_stats(&out.stats);
            opt.step(&mut model, &grad, lr)?;
            log.write(&rec, out_dir)?;
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
        if let Some(dir) = out_dir {
            let state = TrainState {
                phase: phase.name.to_string(),
                epoch: epoch + 1,
                step,
                schedule: phase.schedule,
            };
            let path = dir.join(format!("{}_epoch{:03}.safetensors", phase.name, epoch + 1));
            save_checkpoint(&path, &model, cfg, &state)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
    })
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Full training run from an initialised model.
///
/// A checkpoint is written after every epoch when `out_dir` is given,
/// together with a line-delimited JSON log of every step.
pub fn train<T: Scalar>(
    model: GazeModel<T>,
    cfg: &RunConfig,
    data: &Dataset<'_>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if !model.backbone.is_loaded() {
        return Err(Error::State("backbone weights must be loaded or initialised before training".into()));
    }
    if data.is_empty() {
        return Err(Error::Precondition("training manifest is empty".into()));
    }
    let t = &cfg.train;
    let total = t.epochs * steps_per_epoch(data.len(), t.batch_size);
    let schedule = match t.schedule {
        ScheduleKind::Cosine => LrSchedule::cosine(t.base_lr, t.final_lr, t.warmup_ratio, total),
        ScheduleKind::Constant => LrSchedule::Constant { lr: t.base_lr },
    };
    let phase = Phase {
        name: "train",
        epochs: t.epochs,
        schedule,
    };
    run_phase(model, cfg, data, phase, out_dir, on_step)
}

/// Fine-tune from a training checkpoint at a constant learning rate.
/// Frames are independent samples. An empty manifest returns the initial
/// model unchanged.
pub fn finetune_video<T: Scalar>(
    init: &Path,
    cfg: &RunConfig,
    data: &Dataset<'_>,
    out_dir: Option<&Path>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let ck = load_checkpoint::<T>(init)?;
    let mut cfg = cfg.clone();
    cfg.model = ck.model.config.clone();
    let phase = Phase {
        name: "finetune",
        epochs: cfg.finetune.epochs,
        schedule: LrSchedule::Constant { lr: cfg.finetune.lr },
    };
    if data.is_empty() {
        let mut checkpoints = Vec::new();
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("finetune_epoch000.safetensors");
            let state = TrainState {
                phase: phase.name.into(),
                epoch: 0,
                step: 0,
                schedule: phase.schedule,
            };
            save_checkpoint(&path, &ck.model, &cfg, &state)?;
            checkpoints.push(path);
        }
        return Ok(TrainOutcome {
            model: ck.model,
            history: Vec::new(),
            checkpoints,
        });
    }
    run_phase(ck.model, &cfg, data, phase, out_dir, on_step)
}

/// Resolve `Auto` against the samples.
pub fn resolve_style(style: EvalStyle, samples: &[GazeSample]) -> EvalStyle {
    match style {
        EvalStyle::Auto if samples.iter().any(|s| !s.inside) => EvalStyle::Video,
        EvalStyle::Auto => EvalStyle::Gazefollow,
        s => s,
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-sample inference, decoding and metric aggregation.
///
/// GazeFollow style reports `auc`, `min_dist` and `avg_dist`; video style
/// reports `auc`, `dist` and `ap`. Location metrics average over in-frame
/// samples; AP ranks every sample by `p_out`. A metric with no eligible
/// samples is reported as NaN with count 0.
pub fn evaluate<T: Scalar>(
    model: &GazeModel<T>,
    data: &Dataset<'_>,
    resolution: usize,
    style: EvalStyle,
) -> Result<MetricsReport> {
    let style = resolve_style(style, &data.samples);
    let mut aucs = Vec::new();
    let mut mins = Vec::new();
    let mut avgs = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        let img = prepare_image(&data.load::<T>(i)?, resolution);
        let pred = model.predict(&img, &s.head)?;
        scores.push(pred.p_out.as_f64());
        labels.push(!s.inside);
        if s.inside && !s.gaze_points.is_empty() {
            aucs.push(auc(pred.heatmap.view(), &s.gaze_points, (AUC_GRID, AUC_GRID))?);
            let (dmin, davg) = distances(pred.gaze, &s.gaze_points)?;
            mins.push(dmin);
            avgs.push(davg);
        }
    }
    let mut report = MetricsReport::default();
    report.push("auc", mean(&aucs), aucs.len());
    match style {
        EvalStyle::Video => {
            report.push("dist", mean(&avgs), avgs.len());
            let ap = if labels.iter().any(|&l| l) {
                average_precision(&scores, &labels)?
            } else {
                f64::NAN
            };
            let count = if ap.is_nan() { 0 } else { labels.len() };
            report.push("ap", ap, count);
        }
        _ => {
            report.push("min_dist", mean(&mins), mins.len());
            report.push("avg_dist", mean(&avgs), avgs.len());
        }
    }
    Ok(report)
}
