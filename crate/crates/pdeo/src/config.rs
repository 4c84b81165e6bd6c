//! Training configuration and the flat `key = value` config file format.
//!
//! Unknown keys are hard errors so that typos in ablation scripts fail loudly
//! instead of silently running defaults.

use crate::error::{Error, Result};
use crate::F;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Image2d,
    Ortho3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseOptimizer {
    PlainSgd,
    AdaptiveMoment,
}

/// Direction of the cosine densification test. `Disagree` densifies when the
/// angle between particle and voxel velocity exceeds `theta_p` (cosine below
/// the threshold); `Agree` densifies when the cosine is above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosineMode {
    Disagree,
    Agree,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Initial Gaussian count.
    pub count: usize,
    pub iterations: u64,
    pub image_width: usize,
    pub image_height: usize,
    /// Number of training views (3D mode only).
    pub views: usize,
    /// Render one extra held-out view for evaluation (3D mode only).
    pub holdout: bool,

    /// Field decay coefficient in [0,1].
    pub lambda_g: F,
    /// Particle blend coefficient in [0,1].
    pub lambda_p: F,
    /// Densification disagreement angle threshold, degrees in (0,180).
    pub theta_p: F,
    /// Scale-loss margin (normalized scene units).
    pub beta: F,
    pub omega_s: F,
    pub omega_t: F,

    pub lr_position: F,
    /// Optional final position learning rate (exponential decay over the run).
    pub lr_position_final: Option<F>,
    pub lr_color: F,
    pub lr_opacity: F,
    pub lr_scale: F,
    pub lr_rotation: F,

    pub densify_interval: u64,
    pub densify_start: u64,
    pub densify_stop: u64,
    pub grad_threshold: F,
    pub prune_opacity: F,
    pub max_gaussians: usize,

    pub grid_cells_per_axis: usize,
    pub seed: u64,
    pub deterministic: bool,
    pub base_optimizer: BaseOptimizer,
    pub densify_cosine_mode: CosineMode,
    /// Use the pre-blend update for the cosine test instead of the blended one.
    pub densify_preblend: bool,
    /// Enable the velocity-disagreement densification trigger.
    pub use_cosine_densify: bool,
    /// Enable the positional-gradient densification trigger.
    pub use_grad_densify: bool,
    /// Run the P2G/G2P position pipeline. When false positions apply raw
    /// updates and the field is never touched.
    pub pdeo: bool,
    pub white_background: bool,
    /// Target image: "synthetic" or a PPM path (2D mode).
    pub target: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Image2d,
            count: 64,
            iterations: 2000,
            image_width: 64,
            image_height: 64,
            views: 4,
            holdout: false,
            lambda_g: 0.8,
            lambda_p: 0.8,
            theta_p: 120.0,
            beta: 0.6,
            omega_s: 0.04,
            omega_t: 0.04,
            lr_position: 2e-3,
            lr_position_final: None,
            lr_color: 1e-2,
            lr_opacity: 2e-2,
            lr_scale: 5e-3,
            lr_rotation: 2e-3,
            densify_interval: 100,
            densify_start: 300,
            densify_stop: 1500,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            max_gaussians: 4096,
            grid_cells_per_axis: 16,
            seed: 0,
            deterministic: true,
            base_optimizer: BaseOptimizer::AdaptiveMoment,
            densify_cosine_mode: CosineMode::Disagree,
            densify_preblend: false,
            use_cosine_densify: true,
            use_grad_densify: true,
            pdeo: true,
            white_background: false,
            target: "synthetic".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.count == 0 {
            return bad("count must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_g) || !(0.0..=1.0).contains(&self.lambda_p) {
            return bad("lambda_g and lambda_p must lie in [0,1]".into());
        }
        if !(self.theta_p > 0.0 && self.theta_p < 180.0) {
            return bad("theta_p must lie in (0,180) degrees".into());
        }
        for (name, lr) in [
            ("lr_position", self.lr_position),
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_scale", self.lr_scale),
            ("lr_rotation", self.lr_rotation),
        ] {
            if !lr.is_finite() || lr <= 0.0 {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !(self.densify_start < self.densify_stop && self.densify_stop <= self.iterations)
            && self.iterations > 0
        {
            return bad("require densify_start < densify_stop <= iterations".into());
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be >= 1".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be >= 1".into());
        }
        if self.mode == Mode::Ortho3d && self.views == 0 {
            return bad("3D mode needs at least one view".into());
        }
        if self.grid_cells_per_axis == 0 {
            return bad("grid_cells_per_axis must be >= 1".into());
        }
        Ok(())
    }

    /// Parse the flat `key = value` format. `#` starts a comment. Errors name
    /// the offending line.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {lineno}: expected `key = value`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn f(v: &str) -> std::result::Result<F, String> {
            v.parse::<F>().map_err(|_| format!("bad float `{v}`"))
        }
        fn u(v: &str) -> std::result::Result<u64, String> {
            v.parse::<u64>().map_err(|_| format!("bad integer `{v}`"))
        }
        fn b(v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("bad bool `{v}`")),
            }
        }
        match key {
            "mode" => {
                self.mode = match value {
                    "image2d" => Mode::Image2d,
                    "ortho3d" => Mode::Ortho3d,
                    _ => return Err(format!("unknown mode `{value}`")),
                }
            }
            "count" => self.count = u(value)? as usize,
            "iterations" => self.iterations = u(value)?,
            "image_width" => self.image_width = u(value)? as usize,
            "image_height" => self.image_height = u(value)? as usize,
            "views" => self.views = u(value)? as usize,
            "holdout" => self.holdout = b(value)?,
            "lambda_g" => self.lambda_g = f(value)?,
            "lambda_p" => self.lambda_p = f(value)?,
            "theta_p" => self.theta_p = f(value)?,
            "beta" => self.beta = f(value)?,
            "omega_s" => self.omega_s = f(value)?,
            "omega_t" => self.omega_t = f(value)?,
            "lr_position" => self.lr_position = f(value)?,
            "lr_position_final" => self.lr_position_final = Some(f(value)?),
            "lr_color" => self.lr_color = f(value)?,
            "lr_opacity" => self.lr_opacity = f(value)?,
            "lr_scale" => self.lr_scale = f(value)?,
            "lr_rotation" => self.lr_rotation = f(value)?,
            "densify_interval" => self.densify_interval = u(value)?,
            "densify_start" => self.densify_start = u(value)?,
            "densify_stop" => self.densify_stop = u(value)?,
            "grad_threshold" => self.grad_threshold = f(value)?,
            "prune_opacity" => self.prune_opacity = f(value)?,
            "max_gaussians" => self.max_gaussians = u(value)? as usize,
            "grid_cells_per_axis" => self.grid_cells_per_axis = u(value)? as usize,
            "seed" => self.seed = u(value)?,
            "deterministic" => self.deterministic = b(value)?,
            "base_optimizer" => {
                self.base_optimizer = match value {
                    "plain_sgd" => BaseOptimizer::PlainSgd,
                    "adaptive_moment" => BaseOptimizer::AdaptiveMoment,
                    _ => return Err(format!("unknown base_optimizer `{value}`")),
                }
            }
            "densify_cosine_mode" => {
                self.densify_cosine_mode = match value {
                    "disagree" => CosineMode::Disagree,
                    "agree" => CosineMode::Agree,
                    _ => return Err(format!("unknown densify_cosine_mode `{value}`")),
                }
            }
            "densify_preblend" => self.densify_preblend = b(value)?,
            "use_cosine_densify" => self.use_cosine_densify = b(value)?,
            "use_grad_densify" => self.use_grad_densify = b(value)?,
            "pdeo" => self.pdeo = b(value)?,
            "white_background" => self.white_background = b(value)?,
            "target" => self.target = value.to_string(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// All keys with their effective values, suitable for `config.resolved`.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv(
            "mode",
            match self.mode {
                Mode::Image2d => "image2d".into(),
                Mode::Ortho3d => "ortho3d".into(),
            },
        );
        kv("count", self.count.to_string());
        kv("iterations", self.iterations.to_string());
        kv("image_width", self.image_width.to_string());
        kv("image_height", self.image_height.to_string());
        kv("views", self.views.to_string());
        kv("holdout", self.holdout.to_string());
        kv("lambda_g", format!("{}", self.lambda_g));
        kv("lambda_p", format!("{}", self.lambda_p));
        kv("theta_p", format!("{}", self.theta_p));
        kv("beta", format!("{}", self.beta));
        kv("omega_s", format!("{}", self.omega_s));
        kv("omega_t", format!("{}", self.omega_t));
        kv("lr_position", format!("{}", self.lr_position));
        if let Some(v) = self.lr_position_final {
            kv("lr_position_final", format!("{v}"));
        }
        kv("lr_color", format!("{}", self.lr_color));
        kv("lr_opacity", format!("{}", self.lr_opacity));
        kv("lr_scale", format!("{}", self.lr_scale));
        kv("lr_rotation", format!("{}", self.lr_rotation));
        kv("densify_interval", self.densify_interval.to_string());
        kv("densify_start", self.densify_start.to_string());
        kv("densify_stop", self.densify_stop.to_string());
        kv("grad_threshold", format!("{}", self.grad_threshold));
        kv("prune_opacity", format!("{}", self.prune_opacity));
        kv("max_gaussians", self.max_gaussians.to_string());
        kv("grid_cells_per_axis", self.grid_cells_per_axis.to_string());
        kv("seed", self.seed.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv(
            "base_optimizer",
            match self.base_optimizer {
                BaseOptimizer::PlainSgd => "plain_sgd".into(),
                BaseOptimizer::AdaptiveMoment => "adaptive_moment".into(),
            },
        );
        kv(
            "densify_cosine_mode",
            match self.densify_cosine_mode {
                CosineMode::Disagree => "disagree".into(),
                CosineMode::Agree => "agree".into(),
            },
        );
        kv("densify_preblend", self.densify_preblend.to_string());
        kv("use_cosine_densify", self.use_cosine_densify.to_string());
        kv("use_grad_densify", self.use_grad_densify.to_string());
        kv("pdeo", self.pdeo.to_string());
        kv("white_background", self.white_background.to_string());
        kv("target", self.target.clone());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_through_resolved() {
        let cfg = TrainConfig::default();
        let parsed = TrainConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(parsed.count, cfg.count);
        assert_eq!(parsed.lambda_g, cfg.lambda_g);
        assert_eq!(parsed.base_optimizer, cfg.base_optimizer);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = TrainConfig::parse("lambda_q = 0.5\n").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("lambda_q"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = TrainConfig::parse("# comment\n\nlambda_g = 0.5 # trailing\n").unwrap();
        assert_eq!(cfg.lambda_g, 0.5);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(TrainConfig::parse("count = 0\n").is_err());
    }

    #[test]
    fn bad_schedule_rejected() {
        assert!(TrainConfig::parse("densify_start = 1800\ndensify_stop = 1500\n").is_err());
    }
}
