//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::optim::LearningRates;
use crate::temporal::FeatureMask;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub d_b: usize,
    pub d_v: usize,
    pub d_g: usize,
    pub k: usize,
    pub d_f: usize,
    pub total_iters: u64,
    pub warmup_end: u64,
    pub densify_start: u64,
    pub densify_end: u64,
    pub densify_interval: u64,
    pub stats_start: u64,
    pub stats_end: u64,
    pub tau_g: f64,
    /// Grown slots must be visible in this fraction of half a densify interval.
    pub success_threshold: f64,
    pub min_opacity: f64,
    pub lambda: f64,
    /// Voxel edge as a fraction of the initial point-cloud bounding-box diagonal.
    pub voxel_fraction: f64,
    /// Absolute voxel edge; overrides `voxel_fraction` when positive.
    pub voxel_size: f64,
    pub seed: u64,
    /// Kept for the record; every reduction already runs in a fixed order.
    pub deterministic: bool,
    pub disable_base: bool,
    pub disable_var: bool,
    pub disable_global: bool,
    pub background: Vec3,
    pub random_background: bool,
    /// Draws training views round-robin over periods instead of one global shuffle.
    pub balance_periods: bool,
    /// Tile edge in pixels; 0 composites against the global depth order.
    pub tile_size: u32,
    pub log_every: u64,
    /// Held-out evaluation interval in iterations; 0 disables it.
    pub eval_every: u64,
    /// Intermediate checkpoint interval in iterations; 0 disables it.
    pub checkpoint_every: u64,
    pub lr: LearningRates,
}

impl TrainConfig {
    /// Full-length schedule.
    pub fn full() -> Self {
        TrainConfig {
            d_b: 16,
            d_v: 16,
            d_g: 32,
            k: 10,
            d_f: 64,
            total_iters: 40_000,
            warmup_end: 500,
            densify_start: 1500,
            densify_end: 20_000,
            densify_interval: 100,
            stats_start: 500,
            stats_end: 1500,
            tau_g: 0.0002,
            success_threshold: 0.8,
            min_opacity: 0.005,
            lambda: 0.8,
            voxel_fraction: 0.001,
            voxel_size: 0.0,
            seed: 0,
            deterministic: false,
            disable_base: false,
            disable_var: false,
            disable_global: false,
            background: Vec3::zeros(),
            random_background: false,
            balance_periods: false,
            tile_size: 16,
            log_every: 100,
            eval_every: 0,
            checkpoint_every: 0,
            lr: LearningRates::default(),
        }
    }

    /// Workstation-scale schedule.
    pub fn desk() -> Self {
        TrainConfig {
            total_iters: 5000,
            warmup_end: 100,
            densify_start: 300,
            densify_end: 2500,
            densify_interval: 100,
            stats_start: 100,
            stats_end: 300,
            ..Self::full()
        }
    }

    pub fn mask(&self) -> FeatureMask {
        FeatureMask {
            base: !self.disable_base,
            var: !self.disable_var,
            global: !self.disable_global,
        }
    }

    /// Visibility count a slot needs before it may spawn an anchor.
    pub fn min_visibility(&self) -> u32 {
        (0.5 * self.success_threshold * self.densify_interval as f64).round() as u32
    }

    /// Views an anchor must have been rendered in before it may be pruned.
    pub fn min_samples(&self) -> u32 {
        (0.5 * self.densify_interval as f64).round() as u32
    }

    pub fn is_densify_iteration(&self, it: u64) -> bool {
        it >= self.densify_start && it <= self.densify_end && it.is_multiple_of(self.densify_interval)
    }

    /// Statistics are gathered from the start of the statistics window until densification ends.
    pub fn collects_stats(&self, it: u64) -> bool {
        it >= self.stats_start && it < self.densify_end
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.warmup_end <= self.densify_start
            && self.densify_start <= self.densify_end
            && self.densify_end <= self.total_iters)
        {
            return bad("schedule must satisfy warmup_end <= densify_start <= densify_end <= total_iters");
        }
        if !(self.stats_start <= self.stats_end && self.stats_start >= self.warmup_end) {
            return bad("stats window must start after warmup and be ordered");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be positive");
        }
        if self.k == 0 || self.d_f == 0 {
            return bad("k and d_f must be positive");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.voxel_fraction > 0.0) && !(self.voxel_size > 0.0) {
            return bad("voxel_fraction or voxel_size must be positive");
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    /// Applies `key = value` lines (`#` comments and blank lines ignored).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Preset named by an optional `preset` key, then the remaining keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let preset = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "preset")
            .map(|(_, v)| v.trim().to_string());
        let mut c = match preset.as_deref() {
            None | Some("desk") => Self::desk(),
            Some("full") => Self::full(),
            Some(other) => return Err(Error::ConfigInvalid(format!("unknown preset `{other}`"))),
        };
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::ConfigInvalid(format!("invalid value `{v}` for `{key}`")))
        }
        let lr = &mut self.lr;
        match key {
            "preset" => {}
            "d_b" => self.d_b = p(key, value)?,
            "d_v" => self.d_v = p(key, value)?,
            "d_g" => self.d_g = p(key, value)?,
            "k" => self.k = p(key, value)?,
            "d_f" => self.d_f = p(key, value)?,
            "total_iters" => self.total_iters = p(key, value)?,
            "warmup_end" => self.warmup_end = p(key, value)?,
            "densify_start" => self.densify_start = p(key, value)?,
            "densify_end" => self.densify_end = p(key, value)?,
            "densify_interval" => self.densify_interval = p(key, value)?,
            "stats_start" => self.stats_start = p(key, value)?,
            "stats_end" => self.stats_end = p(key, value)?,
            "tau_g" => self.tau_g = p(key, value)?,
            "success_threshold" => self.success_threshold = p(key, value)?,
            "min_opacity" => self.min_opacity = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "voxel_fraction" => self.voxel_fraction = p(key, value)?,
            "voxel_size" => self.voxel_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "deterministic" => self.deterministic = p(key, value)?,
            "disable_base" => self.disable_base = p(key, value)?,
            "disable_var" => self.disable_var = p(key, value)?,
            "disable_global" => self.disable_global = p(key, value)?,
            "background" => {
                let c: Vec<f64> = value.split(',').map(|s| p(key, s.trim())).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(Error::ConfigInvalid("background needs three comma-separated values".into()));
                }
                self.background = Vec3::new(c[0], c[1], c[2]);
            }
            "random_background" => self.random_background = p(key, value)?,
            "balance_periods" => self.balance_periods = p(key, value)?,
            "tile_size" => self.tile_size = p(key, value)?,
            "log_every" => self.log_every = p(key, value)?,
            "eval_every" => self.eval_every = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "lr_offsets_init" => lr.offsets.0 = p(key, value)?,
            "lr_offsets_final" => lr.offsets.1 = p(key, value)?,
            "lr_mlp_opacity_init" => lr.mlp_opacity.0 = p(key, value)?,
            "lr_mlp_opacity_final" => lr.mlp_opacity.1 = p(key, value)?,
            "lr_mlp_covariance" => lr.mlp_covariance = p(key, value)?,
            "lr_mlp_color_init" => lr.mlp_color.0 = p(key, value)?,
            "lr_mlp_color_final" => lr.mlp_color.1 = p(key, value)?,
            "lr_f_base" => lr.f_base = p(key, value)?,
            "lr_scaling" => lr.scaling = p(key, value)?,
            "lr_f_var" => lr.f_var = p(key, value)?,
            "lr_global" => lr.global = p(key, value)?,
            other => return Err(Error::ConfigInvalid(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its value; [`Self::from_text`] reproduces `self` from it exactly.
    pub fn to_text(&self) -> String {
        let l = &self.lr;
        let b = &self.background;
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("d_b", self.d_b.to_string()),
            ("d_v", self.d_v.to_string()),
            ("d_g", self.d_g.to_string()),
            ("k", self.k.to_string()),
            ("d_f", self.d_f.to_string()),
            ("total_iters", self.total_iters.to_string()),
            ("warmup_end", self.warmup_end.to_string()),
            ("densify_start", self.densify_start.to_string()),
            ("densify_end", self.densify_end.to_string()),
            ("densify_interval", self.densify_interval.to_string()),
            ("stats_start", self.stats_start.to_string()),
            ("stats_end", self.stats_end.to_string()),
            ("tau_g", format!("{:?}", self.tau_g)),
            ("success_threshold", format!("{:?}", self.success_threshold)),
            ("min_opacity", format!("{:?}", self.min_opacity)),
            ("lambda", format!("{:?}", self.lambda)),
            ("voxel_fraction", format!("{:?}", self.voxel_fraction)),
            ("voxel_size", format!("{:?}", self.voxel_size)),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("disable_base", self.disable_base.to_string()),
            ("disable_var", self.disable_var.to_string()),
            ("disable_global", self.disable_global.to_string()),
            ("background", format!("{:?},{:?},{:?}", b.x, b.y, b.z)),
            ("random_background", self.random_background.to_string()),
            ("balance_periods", self.balance_periods.to_string()),
            ("tile_size", self.tile_size.to_string()),
            ("log_every", self.log_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("lr_offsets_init", format!("{:?}", l.offsets.0)),
            ("lr_offsets_final", format!("{:?}", l.offsets.1)),
            ("lr_mlp_opacity_init", format!("{:?}", l.mlp_opacity.0)),
            ("lr_mlp_opacity_final", format!("{:?}", l.mlp_opacity.1)),
            ("lr_mlp_covariance", format!("{:?}", l.mlp_covariance)),
            ("lr_mlp_color_init", format!("{:?}", l.mlp_color.0)),
            ("lr_mlp_color_final", format!("{:?}", l.mlp_color.1)),
            ("lr_f_base", format!("{:?}", l.f_base)),
            ("lr_scaling", format!("{:?}", l.scaling)),
            ("lr_f_var", format!("{:?}", l.f_var)),
            ("lr_global", format!("{:?}", l.global)),
        ];
        for (k, v) in rows {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
