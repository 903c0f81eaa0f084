//! Flat JSON run configuration shared by generation, training and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::VideoSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::train::Schedule;

/// Every knob of a run. Missing keys take the desk defaults; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // network
    pub feature_dim: usize,
    pub model_dim: usize,
    pub conv_kernel: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub num_queries: usize,
    pub te_rows: usize,
    pub ffn_hidden: usize,
    // optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    // schedule
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_seconds: f64,
    pub seed: u64,
    pub freeze_intervals: bool,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    // synthetic data
    pub num_videos: usize,
    pub holdout_videos: usize,
    pub video_seconds: f64,
    pub fps: f64,
    pub moments_per_video: usize,
    pub min_moment: f64,
    pub max_moment: f64,
    pub noise_level: f64,
    pub vocab_size: usize,
    pub distinct_concepts: bool,
    // evaluation
    pub nlq_k: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    // paths
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let a = AdamConfig::default();
        let v = VideoSpec::default();
        Self {
            feature_dim: m.feature_dim,
            model_dim: m.model_dim,
            conv_kernel: m.conv_kernel,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            head_dim: m.head_dim,
            num_queries: m.num_queries,
            te_rows: m.te_rows,
            ffn_hidden: m.ffn_hidden,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            epochs: 30,
            batch_size: 8,
            chunk_seconds: 50.0,
            seed: 0,
            freeze_intervals: false,
            checkpoint_every: 0,
            num_videos: 32,
            holdout_videos: 8,
            video_seconds: v.duration,
            fps: v.fps,
            moments_per_video: v.moments,
            min_moment: v.min_moment,
            max_moment: v.max_moment,
            noise_level: v.noise_level,
            vocab_size: 16,
            distinct_concepts: v.distinct_concepts,
            nlq_k: vec![1, 5],
            iou_thresholds: vec![0.3, 0.5],
            data_dir: "data".into(),
            out_dir: "run".into(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            model_dim: self.model_dim,
            conv_kernel: self.conv_kernel,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            head_dim: self.head_dim,
            num_queries: self.num_queries,
            te_rows: self.te_rows,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            freeze_intervals: self.freeze_intervals,
        }
    }

    pub fn video_spec(&self) -> VideoSpec {
        VideoSpec {
            moments: self.moments_per_video,
            duration: self.video_seconds,
            fps: self.fps,
            noise_level: self.noise_level,
            min_moment: self.min_moment,
            max_moment: self.max_moment,
            distinct_concepts: self.distinct_concepts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model().validate()?;
        if self.num_queries < self.moments_per_video {
            return bad(format!(
                "num_queries {} is below the {} narrations a chunk can hold",
                self.num_queries, self.moments_per_video
            ));
        }
        if !(self.lr > 0.0) || !(self.epsilon > 0.0) {
            return bad("lr and epsilon must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.chunk_seconds > 0.0) || !(self.video_seconds > 0.0) || !(self.fps > 0.0) {
            return bad("chunk_seconds, video_seconds and fps must be positive".into());
        }
        if self.num_videos == 0 || self.holdout_videos >= self.num_videos {
            return bad(format!(
                "need at least one training video: {} videos, {} held out",
                self.num_videos, self.holdout_videos
            ));
        }
        if self.moments_per_video == 0 || self.vocab_size == 0 {
            return bad("moments_per_video and vocab_size must be positive".into());
        }
        if self.distinct_concepts && self.vocab_size < self.moments_per_video {
            return bad("distinct_concepts needs vocab_size ≥ moments_per_video".into());
        }
        if !(self.min_moment > 0.0) || self.max_moment < self.min_moment {
            return bad(format!("moment range [{}, {}] is invalid", self.min_moment, self.max_moment));
        }
        if self.moments_per_video as f64 * self.max_moment > self.video_seconds {
            return bad(format!(
                "{} moments of up to {} s may not fit in {} s",
                self.moments_per_video, self.max_moment, self.video_seconds
            ));
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise_level must be non-negative".into());
        }
        if let Some(&k) = self.nlq_k.iter().find(|&&k| k == 0 || k > self.num_queries) {
            return bad(format!("NLQ K = {k} must lie in 1..={}", self.num_queries));
        }
        if let Some(&t) = self.iou_thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return bad(format!("IoU threshold {t} must lie in (0, 1]"));
        }
        if (self.chunk_seconds * self.fps).floor() < self.conv_kernel as f64 {
            return bad(format!(
                "a {} s chunk at {} fps is shorter than the tokenizer kernel {}",
                self.chunk_seconds, self.fps, self.conv_kernel
            ));
        }
        Ok(())
    }

    /// Fields that shape the training trajectory must agree before resuming;
    /// `epochs`, paths, checkpoint cadence and evaluation settings may change.
    pub fn check_resume(&self, saved: &RunConfig) -> Result<()> {
        let mut a = self.clone();
        let mut b = saved.clone();
        for c in [&mut a, &mut b] {
            c.epochs = 0;
            c.checkpoint_every = 0;
            c.data_dir.clear();
            c.out_dir.clear();
            c.nlq_k.clear();
            c.iou_thresholds.clear();
        }
        if a == b {
            return Ok(());
        }
        let (va, vb) = (a.to_json(), b.to_json());
        let diffs: Vec<String> = va
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| vb.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {} vs run {v}", vb[k.as_str()]))
            .collect();
        Err(Error::Config(format!("config differs from checkpoint ({})", diffs.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_value(c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"epochs": 3, "seed": 9}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.batch_size, 8);
        assert!(serde_json::from_str::<RunConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>)> = vec![
            ("model_dim", Box::new(|c| c.model_dim = 63)),
            ("heads", Box::new(|c| c.heads = 3)),
            ("num_queries", Box::new(|c| c.num_queries = 3)),
            ("beta1", Box::new(|c| c.beta1 = 1.0)),
            ("held out", Box::new(|c| c.holdout_videos = 32)),
            ("fit", Box::new(|c| c.max_moment = 30.0)),
            ("NLQ", Box::new(|c| c.nlq_k = vec![17])),
            ("IoU", Box::new(|c| c.iou_thresholds = vec![0.0])),
            ("kernel", Box::new(|c| c.chunk_seconds = 1.0)),
        ];
        for (needle, mutate) in cases {
            let mut c = RunConfig::default();
            mutate(&mut c);
            let err = c.validate().unwrap_err();
            assert_eq!(err.category(), "config");
            assert!(err.to_string().contains(needle) || needle == "model_dim", "{needle}: {err}");
        }
    }

    #[test]
    fn resume_check_ignores_epochs_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.epochs = 99;
        b.out_dir = "elsewhere".into();
        a.check_resume(&b).unwrap();
        b.lr = 1e-3;
        let err = a.check_resume(&b).unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }
}
