//! Training loop: view sampling, hybrid-loss steps, staged densification,
//! held-out evaluation and checkpoints.
//!
//! Randomness comes from a single ChaCha8 stream seeded with
//! `TrainConfig::seed`. It drives decoder initialisation, view shuffling and
//! optional random backgrounds, and is stored in checkpoints so a resumed run
//! continues the same sequence.

mod checkpoint;
mod config;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::MultiPeriodDataset;
use crate::error::{Error, Result};
use crate::geom::{Camera, Vec3};
use crate::model::{model_tensors_mut, Model, TENSOR_NAMES};
use crate::optim::{hybrid_loss, psnr, spatial_lr_scale, ssim, ImageShape, LossReport, ParamGroup};
use crate::raster::{render, render_backward, RasterSettings};
use crate::scaffold::{voxel_size_from_fraction, AnchorDims, AnchorScaffold};

/// Complete resumable training state; this is what a checkpoint stores.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    /// One Adam group per tensor, in [`TENSOR_NAMES`] order.
    pub groups: Vec<ParamGroup>,
    /// Completed optimisation steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    /// Training-image indices of the current epoch.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub spatial_lr_scale: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub grown: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based number of the step just taken.
    pub iteration: u64,
    pub image: usize,
    pub loss: LossReport,
    pub anchors: usize,
    pub densify: Option<DensifyReport>,
}

impl TrainConfig {
    /// Raster settings used for training renders and evaluation.
    pub fn raster_settings(&self) -> RasterSettings {
        RasterSettings {
            background: self.background,
            tile_size: (self.tile_size > 0).then_some(self.tile_size),
            ..RasterSettings::default()
        }
    }
}

impl TrainState {
    /// Builds the scaffold from the dataset's points and a freshly seeded decoder.
    pub fn new(config: TrainConfig, dataset: &MultiPeriodDataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let train = dataset.train_indices();
        if train.is_empty() {
            return Err(Error::EmptyDataset("no training images".into()));
        }
        let voxel = if config.voxel_size > 0.0 {
            config.voxel_size
        } else {
            voxel_size_from_fraction(dataset.per_period_points.iter().flatten(), config.voxel_fraction)
        };
        if !(voxel > 0.0) {
            return Err(Error::ConfigInvalid("point cloud spans zero volume; set voxel_size".into()));
        }
        let dims = AnchorDims {
            k: config.k,
            base: config.d_b,
            var: config.d_v,
            periods: dataset.periods,
        };
        let scaffold = AnchorScaffold::init(&dataset.per_period_points, voxel, dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(scaffold, config.d_g, config.d_f, config.mask(), &mut rng);
        let centers: Vec<Vec3> = train.iter().map(|&i| dataset.cameras[i].center()).collect();
        let spatial = spatial_lr_scale(&centers);
        let groups = fresh_groups(&config, &model, spatial);
        Ok(TrainState {
            config,
            model,
            groups,
            iteration: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            spatial_lr_scale: spatial,
        })
    }

    fn next_view(&mut self, dataset: &MultiPeriodDataset) -> Result<usize> {
        if self.cursor >= self.order.len() {
            self.order = self.epoch_order(dataset);
            self.cursor = 0;
        }
        let i = *self
            .order
            .get(self.cursor)
            .ok_or_else(|| Error::EmptyDataset("no training images".into()))?;
        if i >= dataset.cameras.len() || dataset.is_test[i] {
            return Err(Error::Invariant(format!("view order names non-training image {i}")));
        }
        self.cursor += 1;
        Ok(i)
    }

    fn epoch_order(&mut self, dataset: &MultiPeriodDataset) -> Vec<usize> {
        let mut all = dataset.train_indices();
        if !self.config.balance_periods {
            all.shuffle(&mut self.rng);
            return all;
        }
        let mut per: Vec<Vec<usize>> = (0..dataset.periods)
            .map(|t| all.iter().copied().filter(|&i| dataset.cameras[i].period == t).collect())
            .collect();
        per.iter_mut().for_each(|v| v.shuffle(&mut self.rng));
        let longest = per.iter().map(Vec::len).max().unwrap_or(0);
        all.clear();
        for j in 0..longest {
            all.extend(per.iter().filter_map(|v| v.get(j)));
        }
        all
    }

    /// One optimisation step on the next view of the shuffled epoch, followed
    /// by densification when the schedule calls for it.
    pub fn step(&mut self, dataset: &MultiPeriodDataset) -> Result<StepReport> {
        let image = self.next_view(dataset)?;
        let loss = self.training_step(&dataset.cameras[image], &dataset.images[image].data)?;
        let it = self.iteration;
        let densify = if self.config.is_densify_iteration(it) {
            Some(self.densify()?)
        } else {
            None
        };
        if it == self.config.densify_end {
            self.model.scaffold.reset_stats();
        }
        Ok(StepReport {
            iteration: it,
            image,
            loss,
            anchors: self.model.scaffold.len(),
            densify,
        })
    }

    /// Forward, loss, backward and Adam update against one image.
    pub fn training_step(&mut self, camera: &Camera, target: &[f64]) -> Result<LossReport> {
        let c = &self.config;
        let mut settings = c.raster_settings();
        if c.random_background {
            settings.background = Vec3::new(self.rng.random(), self.rng.random(), self.rng.random());
        }
        let graph = render(&self.model, camera, camera.period as f64, &settings, true)?;
        let shape = ImageShape::new(camera.width, camera.height);
        let (report, grad) = hybrid_loss(graph.image(), target, shape, c.lambda)?;
        let grads = render_backward(&graph, &self.model, &grad)?;
        drop(graph);
        let step = self.iteration + 1;
        if self.config.collects_stats(step) {
            self.model.scaffold.accumulate_stats(&grads.view_stats);
        }
        let frozen = frozen_groups(self.model.mask);
        let lr_step = self.iteration.min(self.config.total_iters);
        let params = model_tensors_mut(&mut self.model);
        for (((g, p), d), frozen) in self.groups.iter_mut().zip(params).zip(grads.model.tensors()).zip(frozen) {
            if frozen {
                continue;
            }
            let lr = g.schedule.lr_at(lr_step)?;
            g.adam_step(p, d, lr)?;
        }
        self.iteration = step;
        if !report.total.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at iteration {step}")));
        }
        Ok(report)
    }

    /// Grows anchors from accumulated gradients, prunes faint ones, keeps the
    /// optimizer moments row-aligned and resets statistics.
    pub fn densify(&mut self) -> Result<DensifyReport> {
        let c = &self.config;
        let (tau, vis, min_op, min_samples) = (c.tau_g, c.min_visibility(), c.min_opacity, c.min_samples());
        let s = &mut self.model.scaffold;
        let before = s.len();
        let grown = s.grow_anchors(tau, vis);
        let removed = s.prune_anchors(min_op, min_samples);
        let len_after_grow = before + grown;
        let mut keep = vec![true; len_after_grow];
        removed.iter().for_each(|&i| keep[i] = false);
        let d = s.dims;
        let rows = [d.base, d.periods * d.var, d.k * 3, 3, 3];
        for (g, row) in self.groups.iter_mut().zip(rows) {
            g.grow_to(len_after_grow * row);
            g.retain_rows(row, &keep);
        }
        s.reset_stats();
        self.model.check()?;
        for (g, t) in self.groups.iter().zip(checkpoint::tensor_lens(&self.model)) {
            if g.m.len() != t {
                return Err(Error::Invariant(format!("optimizer group `{}` misaligned after densification", g.name)));
            }
        }
        log::debug!(
            "densify at {}: +{grown} -{} anchors -> {}",
            self.iteration,
            removed.len(),
            self.model.scaffold.len()
        );
        Ok(DensifyReport { grown, pruned: removed.len() })
    }

    /// Runs until `config.total_iters` steps are complete, calling `on_step`
    /// after every step.
    pub fn train<F>(&mut self, dataset: &MultiPeriodDataset, mut on_step: F) -> Result<()>
    where
        F: FnMut(&mut TrainState, &StepReport) -> Result<()>,
    {
        while self.iteration < self.config.total_iters {
            let report = self.step(dataset)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

fn frozen_groups(mask: crate::temporal::FeatureMask) -> [bool; 9] {
    let mut f = [false; 9];
    f[0] = !mask.base;
    f[1] = !mask.var;
    f[5] = !mask.global;
    f
}

fn fresh_groups(config: &TrainConfig, model: &Model, spatial: f64) -> Vec<ParamGroup> {
    let schedules = config.lr.schedules(spatial, config.total_iters);
    let lens = checkpoint::tensor_lens(model);
    TENSOR_NAMES
        .iter()
        .zip(schedules)
        .zip(lens)
        .map(|((n, s), len)| ParamGroup::new(*n, s, len))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodMetrics {
    pub period: usize,
    pub views: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Periods with at least one held-out view.
    pub per_period: Vec<PeriodMetrics>,
    /// Unweighted mean over `per_period`.
    pub psnr: f64,
    pub ssim: f64,
}

/// Renders every held-out view at its own period and averages PSNR and SSIM
/// per period, then across periods.
pub fn evaluate(model: &Model, dataset: &MultiPeriodDataset, settings: &RasterSettings) -> Result<EvalReport> {
    let mut per_period = Vec::new();
    for t in 0..dataset.periods {
        let ids = dataset.test_indices_of(t);
        if ids.is_empty() {
            continue;
        }
        let (mut p, mut s) = (0.0, 0.0);
        for &i in &ids {
            let cam = &dataset.cameras[i];
            let g = render(model, cam, t as f64, settings, false)?;
            let gt = &dataset.images[i].data;
            p += psnr(g.image(), gt)?;
            s += ssim(g.image(), gt, ImageShape::new(cam.width, cam.height))?.0;
        }
        let n = ids.len() as f64;
        per_period.push(PeriodMetrics { period: t, views: ids.len(), psnr: p / n, ssim: s / n });
    }
    if per_period.is_empty() {
        return Err(Error::EmptyDataset("no held-out views".into()));
    }
    let n = per_period.len() as f64;
    Ok(EvalReport {
        psnr: per_period.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_period.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_period,
    })
}

/// One line of the JSONL metric log.
#[derive(Clone, Debug, Serialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub anchors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_psnr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_ssim: Option<Vec<f64>>,
}

impl LogRecord {
    pub fn from_step(r: &StepReport) -> Self {
        LogRecord {
            iteration: r.iteration,
            loss: r.loss.total,
            l1: r.loss.l1,
            ssim: r.loss.ssim,
            anchors: r.anchors,
            densify: r.densify,
            eval_psnr: None,
            eval_ssim: None,
        }
    }

    pub fn with_eval(mut self, e: &EvalReport) -> Self {
        self.eval_psnr = Some(e.per_period.iter().map(|m| m.psnr).collect());
        self.eval_ssim = Some(e.per_period.iter().map(|m| m.ssim).collect());
        self
    }

    pub fn write_to(&self, w: &mut dyn Write) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| Error::Invariant(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("metric log", e))
    }
}
