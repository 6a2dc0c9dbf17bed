//! Reproducible experiments: configuration, dataset materialization,
//! training, evaluation, robustness sweeps, ablations and timing.
//!
//! Every command is a pure function of an [`ExperimentConfig`]; outputs carry
//! the configuration hash. Batch commands record per-sample failures instead
//! of aborting and report them through [`Outcome`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetSpec, ManifestEntry, SceneRanges, SpeedModel, Split};
use crate::error::{Error, Result};
use crate::flm::{self, FlmParams};
use crate::formats;
use crate::model::checkpoint;
use crate::model::{build_model, evaluate, train, ConfusionMatrix, LrSchedule, Model, ModelConfig, Samples, TrainConfig, TrainReport};
use crate::pipeline::{cube_to_dtm, degrade_snr, Dtm, HighPass, PipelineConfig, RangeSelection, Window};
use crate::seeds;
use crate::sim::{Geometry, LabelSet, RadarParams};

/// What the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The DTM itself.
    Raw,
    /// The FLM-augmented map `J / 255`.
    Augmented,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Raw => "raw",
            InputMode::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub radar: RadarParams,
    pub scene: SceneRanges,
    pub labels: LabelSet,
    pub per_class: usize,
    pub pipeline: PipelineConfig,
    pub flm: FlmParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub input: InputMode,
    /// SNR drops (dB) of the robustness sweep.
    pub drops: Vec<f64>,
    /// Noise fields averaged per drop.
    pub noise_seeds: usize,
    /// Training seeds averaged per ablation row.
    pub ablate_seeds: usize,
    /// DTMs timed by the benchmark.
    pub bench_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            radar: RadarParams::default(),
            scene: SceneRanges::default(),
            labels: LabelSet::default(),
            per_class: 80,
            pipeline: PipelineConfig::default(),
            flm: FlmParams::default(),
            model: ModelConfig::full(),
            train: TrainConfig::default(),
            input: InputMode::Augmented,
            drops: vec![0.0, 4.0, 8.0, 12.0],
            noise_seeds: 3,
            ablate_seeds: 3,
            bench_samples: 100,
        }
    }
}

/// Text form of a configuration value.
trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
        }
    )*};
}

plain_value!(f64, usize, u64, bool);

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

fn split_list<T: ConfigValue>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',').map(|p| T::parse_value(p.trim())).collect()
}

impl ConfigValue for Vec<f64> {
    fn render(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        split_list(s)
    }
}

impl ConfigValue for [usize; 3] {
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = split_list(s)?;
        v.try_into().map_err(|_| "expected three comma-separated integers".to_string())
    }
}

/// `ROWSxCOLS`.
impl ConfigValue for (usize, usize) {
    fn render(&self) -> String {
        format!("{}x{}", self.0, self.1)
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once('x').ok_or("expected ROWSxCOLS")?;
        Ok((usize::parse_value(a.trim())?, usize::parse_value(b.trim())?))
    }
}

impl ConfigValue for Option<(usize, usize)> {
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.render())
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            <(usize, usize)>::parse_value(s).map(Some)
        }
    }
}

impl ConfigValue for LabelSet {
    fn render(&self) -> String {
        self.angles_deg.render()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(LabelSet { angles_deg: split_list(s)? })
    }
}

impl ConfigValue for Window {
    fn render(&self) -> String {
        self.name().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Window::parse(s).map_err(|e| e.to_string())
    }
}

macro_rules! keyword_value {
    ($t:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn render(&self) -> String {
                match self { $($variant => $name.to_string()),* }
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($variant),)*
                    other => Err(format!("unknown value '{other}'")),
                }
            }
        }
    };
}

keyword_value!(HighPass { HighPass::TwoPulse => "two_pulse", HighPass::FourthOrder => "fourth_order" });
keyword_value!(SpeedModel { SpeedModel::Independent => "independent", SpeedModel::StrideLinked => "stride_linked" });
keyword_value!(LrSchedule { LrSchedule::Constant => "constant", LrSchedule::Cosine => "cosine" });
keyword_value!(InputMode { InputMode::Raw => "raw", InputMode::Augmented => "augmented" });

/// `constant_aspect` or `planar:LATERAL_OFFSET`.
impl ConfigValue for Geometry {
    fn render(&self) -> String {
        match self {
            Geometry::ConstantAspect => "constant_aspect".into(),
            Geometry::Planar { lateral_offset } => format!("planar:{lateral_offset}"),
        }
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "constant_aspect" => Ok(Geometry::ConstantAspect),
            Some(("planar", off)) => Ok(Geometry::Planar { lateral_offset: f64::parse_value(off)? }),
            _ => Err(format!("expected constant_aspect or planar:OFFSET, got '{s}'")),
        }
    }
}

/// `max_energy:WIDTH` or `fixed:CENTER:WIDTH`.
impl ConfigValue for RangeSelection {
    fn render(&self) -> String {
        match self {
            RangeSelection::MaxEnergy { width } => format!("max_energy:{width}"),
            RangeSelection::Fixed { center, width } => format!("fixed:{center}:{width}"),
        }
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts[..] {
            ["max_energy", w] => Ok(RangeSelection::MaxEnergy { width: usize::parse_value(w)? }),
            ["fixed", c, w] => Ok(RangeSelection::Fixed {
                center: usize::parse_value(c)?,
                width: usize::parse_value(w)?,
            }),
            _ => Err(format!("expected max_energy:W or fixed:C:W, got '{s}'")),
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:tt).+ , $doc:literal;)*) => {
        impl ExperimentConfig {
            /// `(key, value, description)` for every setting, in file order.
            pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
                vec![$(($key, ConfigValue::render(&self.$($field).+), $doc)),*]
            }

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    })*
                    other => return Err(Error::Config(format!("unknown key '{other}'"))),
                }
                Ok(())
            }
        }
    };
}

config_keys! {
    "seed" => seed, "root seed of every random stream";
    "paths.out" => out, "output directory";
    "radar.fc" => radar.fc, "carrier frequency (Hz)";
    "radar.bandwidth" => radar.bandwidth, "sweep bandwidth (Hz)";
    "radar.fs" => radar.fs, "fast-time sample rate (Hz)";
    "radar.prf" => radar.prf, "chirp repetition frequency (Hz)";
    "radar.n_pulses" => radar.n_pulses, "slow-time samples per cube";
    "radar.n_fast" => radar.n_fast, "fast-time samples per chirp";
    "radar.n_channels" => radar.n_channels, "receive channels";
    "dataset.per_class" => per_class, "samples per direction class";
    "dataset.labels" => labels, "direction classes (degrees)";
    "scene.speed_min" => scene.speed.0, "torso speed lower bound (m/s)";
    "scene.speed_max" => scene.speed.1, "torso speed upper bound (m/s)";
    "scene.gait_freq_min" => scene.gait_freq.0, "gait cycle rate lower bound (Hz)";
    "scene.gait_freq_max" => scene.gait_freq.1, "gait cycle rate upper bound (Hz)";
    "scene.stride_min" => scene.stride.0, "stride length lower bound (m)";
    "scene.stride_max" => scene.stride.1, "stride length upper bound (m)";
    "scene.speed_model" => scene.speed_model, "stride_linked | independent";
    "scene.limb_jitter_min" => scene.limb_jitter.0, "micro-motion amplitude factor lower bound";
    "scene.limb_jitter_max" => scene.limb_jitter.1, "micro-motion amplitude factor upper bound";
    "scene.initial_range" => scene.initial_range, "torso range at the start of the dwell (m)";
    "scene.noise_floor_db" => scene.noise_floor_db, "per-sample noise power relative to a unit echo (dB)";
    "scene.geometry" => scene.geometry, "constant_aspect | planar:LATERAL_OFFSET_M";
    "pipeline.window" => pipeline.stft.window, "hann | hamming | rectangular";
    "pipeline.window_len" => pipeline.stft.window_len, "STFT window length (pulses)";
    "pipeline.hop" => pipeline.stft.hop, "STFT hop (pulses)";
    "pipeline.fft_size" => pipeline.stft.fft_size, "STFT transform size (Doppler rows)";
    "pipeline.highpass" => pipeline.highpass, "two_pulse | fourth_order";
    "pipeline.range" => pipeline.range, "max_energy:WIDTH | fixed:CENTER:WIDTH";
    "pipeline.resize" => pipeline.resize, "DTM size ROWSxCOLS, or none";
    "flm.f" => flm.f, "membrane decay";
    "flm.alpha" => flm.alpha, "feeding weight";
    "flm.beta" => flm.beta, "linking weight";
    "flm.g" => flm.g, "threshold decay";
    "flm.h" => flm.h, "threshold jump after a spike";
    "flm.eps_link" => flm.eps_link, "global linking suppression";
    "flm.eps_norm" => flm.eps_norm, "normalization bias";
    "flm.radius" => flm.radius, "linking radius (pixels)";
    "flm.theta0" => flm.theta0, "initial threshold";
    "flm.n_max" => flm.n_max, "iteration cap";
    "model.input_size" => model.input_size, "classifier input ROWSxCOLS";
    "model.channels" => model.stage_channels, "stage channels C1,C2,C3";
    "model.heads" => model.heads, "attention heads";
    "model.pool" => model.pool, "path-B average-pool kernel";
    "model.invres_expansion" => model.invres_expansion, "inverted-residual expansion ratio";
    "model.num_classes" => model.num_classes, "output classes";
    "model.toy_scale" => model.toy_scale, "desk-scale configuration flag";
    "train.input" => input, "raw | augmented";
    "train.epochs" => train.epochs, "passes over the training split";
    "train.lr" => train.lr, "initial Adam learning rate";
    "train.schedule" => train.schedule, "constant | cosine (decays to zero over the run)";
    "train.beta1" => train.beta1, "Adam first-moment decay";
    "train.beta2" => train.beta2, "Adam second-moment decay";
    "train.eps_adam" => train.eps_adam, "Adam denominator offset";
    "train.batch_size" => train.batch_size, "samples per update";
    "train.seed" => train.seed, "initialization and batch-order seed";
    "robustness.drops" => drops, "SNR drops (dB)";
    "robustness.noise_seeds" => noise_seeds, "noise fields averaged per drop";
    "ablate.seeds" => ablate_seeds, "training seeds averaged per ablation row";
    "bench.samples" => bench_samples, "DTMs timed by the benchmark";
}

impl ExperimentConfig {
    /// Desk-scale defaults: toy channels, 64x64 inputs, batch 16.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.make_toy();
        cfg
    }

    pub fn make_toy(&mut self) {
        self.model = ModelConfig::toy();
        self.pipeline.resize = Some(self.model.input_size);
        self.train.batch_size = TrainConfig::toy().batch_size;
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text, each key preceded by its description.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (key, value, doc) in self.entries() {
            let sec = key.split('.').next().unwrap_or("");
            if sec != section && key.contains('.') {
                let _ = writeln!(s, "\n# [{sec}]");
                section = sec;
            }
            let _ = writeln!(s, "# {doc}\n{key} = {value}");
        }
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, with the
    /// output directory left out.
    pub fn hash(&self) -> String {
        let text = ExperimentConfig { out: PathBuf::new(), ..self.clone() }.to_text();
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            per_class: self.per_class,
            radar: self.radar.clone(),
            scene: self.scene.clone(),
            labels: self.labels.clone(),
            seed: self.seed,
        }
    }

    /// Checks every section; nothing is written before this passes.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.pipeline.validate()?;
        self.flm.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.labels.len() {
            return Err(Error::Config(format!(
                "model.num_classes = {} but {} labels are configured",
                self.model.num_classes,
                self.labels.len()
            )));
        }
        if self.drops.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::Config("robustness.drops must be finite and >= 0".into()));
        }
        if self.noise_seeds == 0 || self.ablate_seeds == 0 || self.bench_samples == 0 {
            return Err(Error::Config("noise_seeds, ablate.seeds and bench.samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-sample failures of a batch command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub processed: usize,
    pub failures: Vec<(String, String)>,
}

impl Outcome {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    fn write_failures(&self, dir: &Path) -> Result<()> {
        if self.is_partial() {
            let mut s = String::from("sample,error\n");
            for (p, e) in &self.failures {
                let _ = writeln!(s, "{p},\"{}\"", e.replace('"', "'"));
            }
            std::fs::write(dir.join("failures.csv"), s)?;
        }
        Ok(())
    }
}

/// Labelled DTMs with their split assignment.
#[derive(Debug, Clone, Default)]
pub struct DtmSet {
    pub dtms: Vec<Dtm<f32>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub seeds: Vec<u64>,
}

impl DtmSet {
    pub fn len(&self) -> usize {
        self.dtms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dtms.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Synthesizes and preprocesses the configured dataset in memory.
pub fn generate_dtm_set(cfg: &ExperimentConfig) -> Result<(DtmSet, Outcome)> {
    cfg.validate()?;
    let plans = dataset::plan_dataset(&cfg.dataset_spec())?;
    let results = dataset::generate_dtms::<f32>(&plans, &cfg.radar, &cfg.pipeline);
    let mut set = DtmSet::default();
    let mut outcome = Outcome::default();
    for (p, r) in plans.iter().zip(results) {
        match r {
            Ok(d) => {
                set.dtms.push(d);
                set.labels.push(p.label);
                set.splits.push(p.split);
                set.seeds.push(p.seed);
                outcome.processed += 1;
            }
            Err(e) => outcome.failures.push((format!("sample {}", p.index), e.to_string())),
        }
    }
    Ok((set, outcome))
}

/// Zero-mean, unit-variance copy of `v`; a constant image maps to zeros.
pub fn standardize(v: &[f32]) -> Vec<f32> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return vec![0.0; v.len()];
    }
    let inv = 1.0 / var.sqrt();
    v.iter().map(|&x| ((f64::from(x) - mean) * inv) as f32).collect()
}

/// Classifier input for one DTM: resized to the model input, optionally
/// augmented, then standardized.
pub fn model_input(dtm: &Dtm<f32>, cfg: &ExperimentConfig, mode: InputMode) -> Result<Vec<f32>> {
    let (h, w) = cfg.model.input_size;
    let resized;
    let dtm = if (dtm.rows, dtm.cols) == (h, w) {
        dtm
    } else {
        resized = dtm.resize(h, w)?;
        &resized
    };
    Ok(match mode {
        InputMode::Raw => standardize(&dtm.data),
        InputMode::Augmented => {
            let j = flm::augment(dtm, &cfg.flm)?.j;
            standardize(&j.iter().map(|&v| f32::from(v) / 255.0).collect::<Vec<_>>())
        }
    })
}

/// Builds classifier inputs for `indices`, in parallel; `degrade` applies an
/// SNR drop with a per-sample seed before augmentation.
pub fn build_samples(
    set: &DtmSet,
    indices: &[usize],
    cfg: &ExperimentConfig,
    mode: InputMode,
    degrade: Option<(f64, u64)>,
) -> Result<Samples<f32>> {
    let inputs: Vec<Vec<f32>> = indices
        .par_iter()
        .map(|&i| match degrade {
            Some((db, seed)) if db > 0.0 => {
                let noisy = degrade_snr(&set.dtms[i], db, seeds::derive(seed, set.seeds[i]))?;
                model_input(&noisy, cfg, mode)
            }
            _ => model_input(&set.dtms[i], cfg, mode),
        })
        .collect::<Result<_>>()?;
    let (h, w) = cfg.model.input_size;
    let mut samples = Samples::new(h, w);
    for (img, &i) in inputs.iter().zip(indices) {
        samples.push(img, set.labels[i])?;
    }
    Ok(samples)
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub confusion: ConfusionMatrix,
    pub seconds: f64,
}

/// Trains a fresh model with `train_seed` on the training split and evaluates
/// it on the validation split.
pub fn train_on_set(cfg: &ExperimentConfig, set: &DtmSet, mode: InputMode, train_seed: u64) -> Result<TrainedRun> {
    let train_set = build_samples(set, &set.indices(Split::Train), cfg, mode, None)?;
    let val_set = build_samples(set, &set.indices(Split::Val), cfg, mode, None)?;
    let start = Instant::now();
    let mut model = build_model::<f32>(&cfg.model, train_seed)?;
    let tcfg = TrainConfig { seed: train_seed, ..cfg.train.clone() };
    let report = train(&mut model, &train_set, Some(&val_set), &tcfg)?;
    let confusion = evaluate(&model, &val_set)?;
    Ok(TrainedRun { model, report, confusion, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub drop_db: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

/// Validation accuracy of a trained model against SNR drops, averaged over
/// `cfg.noise_seeds` noise fields. A zero drop is evaluated once, unperturbed.
pub fn robustness_curve(cfg: &ExperimentConfig, model: &Model<f32>, set: &DtmSet, mode: InputMode) -> Result<Vec<RobustnessRow>> {
    let val = set.indices(Split::Val);
    cfg.drops
        .iter()
        .map(|&drop_db| {
            let runs = if drop_db > 0.0 { cfg.noise_seeds } else { 1 };
            let accuracies = (0..runs)
                .map(|k| {
                    let seed = seeds::derive(cfg.seed ^ 0x0015_E000, k as u64);
                    let samples = build_samples(set, &val, cfg, mode, Some((drop_db, seed)))?;
                    Ok(evaluate(model, &samples)?.accuracy())
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            Ok(RobustnessRow { drop_db, accuracies, mean })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub input: InputMode,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Mean seconds per DTM for input preparation (including augmentation)
    /// plus one forward pass.
    pub seconds_per_dtm: f64,
}

/// Raw versus augmented inputs on the same data, `cfg.ablate_seeds` training
/// seeds each.
pub fn ablation(cfg: &ExperimentConfig, set: &DtmSet) -> Result<Vec<AblationRow>> {
    [InputMode::Raw, InputMode::Augmented]
        .into_iter()
        .map(|mode| {
            let mut accuracies = Vec::new();
            let mut model = None;
            for k in 0..cfg.ablate_seeds {
                let run = train_on_set(cfg, set, mode, seeds::derive(cfg.train.seed, k as u64))?;
                log::info!("ablation {} seed {k}: {:.4}", mode.name(), run.confusion.accuracy());
                accuracies.push(run.confusion.accuracy());
                model = Some(run.model);
            }
            let model = model.expect("at least one ablation seed");
            let bench = time_stages(cfg, &model, set, mode, cfg.bench_samples.min(set.len()))?;
            Ok(AblationRow {
                input: mode,
                mean: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
                accuracies,
                seconds_per_dtm: bench.end_to_end.mean,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean: f64,
    pub p95: f64,
}

impl Timing {
    fn of(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let p95 = v.get(((v.len() as f64 * 0.95).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
        Timing { mean, p95 }
    }
}

/// Per-DTM wall times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub dtm_size: (usize, usize),
    /// FLM augmentation (zero for raw inputs).
    pub augmentation: Timing,
    /// Input preparation and one forward pass.
    pub inference: Timing,
    pub end_to_end: Timing,
    pub parameter_count: usize,
    pub accuracy: Option<f64>,
}

impl BenchReport {
    /// `|augmentation + inference - end_to_end| / end_to_end` of the means.
    pub fn accounting_gap(&self) -> f64 {
        let sum = self.augmentation.mean + self.inference.mean;
        (sum - self.end_to_end.mean).abs() / self.end_to_end.mean
    }

    pub fn to_csv(&self, hash: &str) -> String {
        let mut s = format!("# config_hash={hash}\nstage,mean_s,p95_s\n");
        for (name, t) in [
            ("augmentation", self.augmentation),
            ("inference", self.inference),
            ("end_to_end", self.end_to_end),
        ] {
            let _ = writeln!(s, "{name},{:.6e},{:.6e}", t.mean, t.p95);
        }
        let _ = writeln!(s, "parameter_count,{},", self.parameter_count);
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "accuracy,{a:.6},");
        }
        s
    }
}

/// Times augmentation and single-DTM inference separately, sequentially on
/// the calling thread, over the first `n` DTMs of `set` (cycled if needed).
pub fn time_stages(cfg: &ExperimentConfig, model: &Model<f32>, set: &DtmSet, mode: InputMode, n: usize) -> Result<BenchReport> {
    if set.is_empty() || n == 0 {
        return Err(Error::Data("nothing to benchmark".into()));
    }
    let (h, w) = cfg.model.input_size;
    let (mut aug, mut inf, mut e2e) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let dtm = &set.dtms[k % set.len()];
        let t0 = Instant::now();
        let resized = if (dtm.rows, dtm.cols) == (h, w) { dtm.clone() } else { dtm.resize(h, w)? };
        let image: Vec<f32> = match mode {
            InputMode::Raw => resized.data,
            InputMode::Augmented => flm::augment(&resized, &cfg.flm)?.j.iter().map(|&v| f32::from(v) / 255.0).collect(),
        };
        let t1 = Instant::now();
        let x = crate::model::Tensor { shape: vec![1, 1, h, w], data: standardize(&image) };
        std::hint::black_box(model.logits(&x)?);
        let t2 = Instant::now();
        let (a, b) = ((t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64());
        if mode == InputMode::Augmented {
            aug.push(a);
            inf.push(b);
        } else {
            aug.push(0.0);
            inf.push(a + b);
        }
        e2e.push((t2 - t0).as_secs_f64());
    }
    Ok(BenchReport {
        samples: n,
        dtm_size: (h, w),
        augmentation: Timing::of(aug),
        inference: Timing::of(inf),
        end_to_end: Timing::of(e2e),
        parameter_count: model.parameter_count(),
        accuracy: None,
    })
}

fn with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

fn label_names(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.labels.angles_deg.iter().map(|a| format!("{a}")).collect()
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.to_text());
    std::fs::write(out.join("config.txt"), text)?;
    Ok(())
}

fn resolve(manifest: &Path, entry: &Path) -> PathBuf {
    if entry.is_absolute() {
        entry.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(entry)
    }
}

/// `simulate`: writes cubes and `manifest.json` into `out`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    dataset::make_dataset(&cfg.dataset_spec(), out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sample".into())
}

/// `preprocess`: cube manifest to DTM1 files, PGM previews and
/// `dtm_manifest.json`; with `with_augment`, also FLM outputs under `aug/`.
pub fn cmd_preprocess(cfg: &ExperimentConfig, manifest: &Path, out: &Path, with_augment: bool) -> Result<Outcome> {
    cfg.validate()?;
    let entries = dataset::read_manifest(manifest)?;
    prepare_out(cfg, out)?;
    std::fs::create_dir_all(out.join("dtm"))?;
    if with_augment {
        std::fs::create_dir_all(out.join("aug"))?;
    }
    let results: Vec<Result<ManifestEntry>> = entries
        .par_iter()
        .map(|e| {
            let cube = formats::load_cube::<f32>(&resolve(manifest, &e.path), &cfg.radar)?;
            let dtm = cube_to_dtm(&cube, &cfg.pipeline)?;
            let stem = file_stem(&e.path);
            let rel = PathBuf::from("dtm").join(format!("{stem}.dtm"));
            formats::save_dtm(&dtm, &out.join(&rel))?;
            formats::save_pgm(&formats::to_gray(&dtm), dtm.rows, dtm.cols, &out.join("dtm").join(format!("{stem}.pgm")))?;
            if with_augment {
                let a = flm::augment(&dtm, &cfg.flm)?;
                formats::save_pgm(&a.j, a.rows, a.cols, &out.join("aug").join(format!("{stem}.pgm")))?;
                formats::save_dtm(&a.to_dtm::<f32>(), &out.join("aug").join(format!("{stem}.dtm")))?;
            }
            Ok(ManifestEntry { path: rel, ..e.clone() })
        })
        .collect();
    finish_batch(&entries, results, out, "dtm_manifest.json")
}

fn finish_batch(entries: &[ManifestEntry], results: Vec<Result<ManifestEntry>>, out: &Path, name: &str) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    let mut written = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok(m) => {
                written.push(m);
                outcome.processed += 1;
            }
            Err(err) => {
                log::warn!("{}: {err}", e.path.display());
                outcome.failures.push((e.path.display().to_string(), err.to_string()));
            }
        }
    }
    if !written.is_empty() {
        dataset::write_manifest(&written, &out.join(name))?;
    }
    outcome.write_failures(out)?;
    if written.is_empty() {
        return Err(Error::Data(format!("all {} samples failed", entries.len())));
    }
    Ok(outcome)
}

/// `augment`: FLM outputs for every DTM of a DTM manifest, as DTM1 (`J / 255`)
/// and PGM files plus `aug_manifest.json`.
pub fn cmd_augment(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let entries = dataset::read_manifest(manifest)?;
    prepare_out(cfg, out)?;
    let results: Vec<Result<ManifestEntry>> = entries
        .par_iter()
        .map(|e| {
            let dtm = formats::load_dtm::<f32>(&resolve(manifest, &e.path))?;
            let a = flm::augment(&dtm, &cfg.flm)?;
            let stem = file_stem(&e.path);
            formats::save_pgm(&a.j, a.rows, a.cols, &out.join(format!("{stem}.pgm")))?;
            let rel = PathBuf::from(format!("{stem}.dtm"));
            formats::save_dtm(&a.to_dtm::<f32>(), &out.join(&rel))?;
            Ok(ManifestEntry { path: rel, ..e.clone() })
        })
        .collect();
    finish_batch(&entries, results, out, "aug_manifest.json")
}

/// Loads the DTMs of a DTM manifest; unreadable entries become failures.
pub fn load_dtm_set(cfg: &ExperimentConfig, manifest: &Path) -> Result<(DtmSet, Outcome)> {
    let entries = dataset::read_manifest(manifest)?;
    let loaded: Vec<Result<(Dtm<f32>, usize)>> = entries
        .par_iter()
        .map(|e| {
            let label = cfg.labels.index_of(e.label_deg).ok_or_else(|| {
                Error::Data(format!("label {} deg is not a configured class", e.label_deg))
            })?;
            Ok((formats::load_dtm(&resolve(manifest, &e.path))?, label))
        })
        .collect();
    let mut set = DtmSet::default();
    let mut outcome = Outcome::default();
    for (e, r) in entries.iter().zip(loaded) {
        match r {
            Ok((d, l)) => {
                set.dtms.push(d);
                set.labels.push(l);
                set.splits.push(e.split);
                set.seeds.push(e.seed);
                outcome.processed += 1;
            }
            Err(err) => outcome.failures.push((e.path.display().to_string(), err.to_string())),
        }
    }
    if set.is_empty() {
        return Err(Error::Data(format!("no readable DTMs in {}", manifest.display())));
    }
    Ok((set, outcome))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub input: InputMode,
    pub parameter_count: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub seconds: f64,
}

fn write_eval(cfg: &ExperimentConfig, out: &Path, cm: &ConfusionMatrix, summary: &RunSummary) -> Result<()> {
    std::fs::write(out.join("confusion.csv"), with_hash(&cfg.hash(), &cm.to_csv(&label_names(cfg))))?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// `train`: fits a model on the training split of a DTM manifest; writes
/// `model.hmd`, `curves.csv`, `confusion.csv` and `metrics.json`.
pub fn cmd_train(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<(TrainedRun, Outcome)> {
    cfg.validate()?;
    let (set, outcome) = load_dtm_set(cfg, manifest)?;
    prepare_out(cfg, out)?;
    let run = train_on_set(cfg, &set, cfg.input, cfg.train.seed)?;
    checkpoint::save(&run.model, &out.join("model.hmd"))?;
    std::fs::write(out.join("curves.csv"), with_hash(&cfg.hash(), &run.report.to_csv()))?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        input: cfg.input,
        parameter_count: run.model.parameter_count(),
        accuracy: run.confusion.accuracy(),
        per_class_accuracy: run.confusion.per_class_accuracy(),
        seconds: run.seconds,
    };
    write_eval(cfg, out, &run.confusion, &summary)?;
    outcome.write_failures(out)?;
    Ok((run, outcome))
}

/// `eval`: confusion matrix of a checkpoint on the validation split.
pub fn cmd_eval(cfg: &ExperimentConfig, model_path: &Path, manifest: &Path, out: &Path) -> Result<(ConfusionMatrix, Outcome)> {
    cfg.validate()?;
    let model = checkpoint::load::<f32>(model_path)?;
    let cfg = &ExperimentConfig { model: model.config.clone(), ..cfg.clone() };
    let (set, outcome) = load_dtm_set(cfg, manifest)?;
    prepare_out(cfg, out)?;
    let start = Instant::now();
    let val = build_samples(&set, &set.indices(Split::Val), cfg, cfg.input, None)?;
    let cm = evaluate(&model, &val)?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        input: cfg.input,
        parameter_count: model.parameter_count(),
        accuracy: cm.accuracy(),
        per_class_accuracy: cm.per_class_accuracy(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_eval(cfg, out, &cm, &summary)?;
    outcome.write_failures(out)?;
    Ok((cm, outcome))
}

/// `robustness`: accuracy of a checkpoint against SNR drops; `robustness.csv`.
pub fn cmd_robustness(cfg: &ExperimentConfig, model_path: &Path, manifest: &Path, out: &Path) -> Result<(Vec<RobustnessRow>, Outcome)> {
    cfg.validate()?;
    let model = checkpoint::load::<f32>(model_path)?;
    let cfg = &ExperimentConfig { model: model.config.clone(), ..cfg.clone() };
    let (set, outcome) = load_dtm_set(cfg, manifest)?;
    prepare_out(cfg, out)?;
    let rows = robustness_curve(cfg, &model, &set, cfg.input)?;
    let mut s = String::from("drop_db,mean_accuracy,accuracies\n");
    for r in &rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(s, "{},{:.6},{}", r.drop_db, r.mean, accs.join(";"));
    }
    std::fs::write(out.join("robustness.csv"), with_hash(&cfg.hash(), &s))?;
    outcome.write_failures(out)?;
    Ok((rows, outcome))
}

/// `ablate`: raw versus augmented inputs; `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, manifest: &Path, out: &Path) -> Result<(Vec<AblationRow>, Outcome)> {
    cfg.validate()?;
    let (set, outcome) = load_dtm_set(cfg, manifest)?;
    prepare_out(cfg, out)?;
    let rows = ablation(cfg, &set)?;
    let mut s = String::from("model,input,mean_accuracy,accuracies,seconds_per_dtm\n");
    for r in &rows {
        let accs: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.6}")).collect();
        let _ = writeln!(s, "hmdd,{},{:.6},{},{:.6e}", r.input.name(), r.mean, accs.join(";"), r.seconds_per_dtm);
    }
    std::fs::write(out.join("ablation.csv"), with_hash(&cfg.hash(), &s))?;
    outcome.write_failures(out)?;
    Ok((rows, outcome))
}

/// `bench`: per-stage timing over `bench.samples` DTMs of a manifest, with an
/// optional checkpoint (a freshly initialized model otherwise); `bench.csv`.
pub fn cmd_bench(cfg: &ExperimentConfig, model_path: Option<&Path>, manifest: &Path, out: &Path) -> Result<(BenchReport, Outcome)> {
    cfg.validate()?;
    let model = match model_path {
        Some(p) => checkpoint::load::<f32>(p)?,
        None => build_model::<f32>(&cfg.model, cfg.train.seed)?,
    };
    let cfg = &ExperimentConfig { model: model.config.clone(), ..cfg.clone() };
    let (set, outcome) = load_dtm_set(cfg, manifest)?;
    prepare_out(cfg, out)?;
    let mut report = time_stages(cfg, &model, &set, cfg.input, cfg.bench_samples)?;
    if model_path.is_some() {
        let val_idx = set.indices(Split::Val);
        if !val_idx.is_empty() {
            let val = build_samples(&set, &val_idx, cfg, cfg.input, None)?;
            report.accuracy = Some(evaluate(&model, &val)?.accuracy());
        }
    }
    std::fs::write(out.join("bench.csv"), report.to_csv(&cfg.hash()))?;
    outcome.write_failures(out)?;
    Ok((report, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_round_trips() {
        let cfg = ExperimentConfig::toy();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = ExperimentConfig::default();
        let mut other = ExperimentConfig::default();
        for (k, v, _) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(ExperimentConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("radar.fc"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("radar.fc = fast"), Err(Error::Config(_))));
        let cfg = ExperimentConfig::parse("dataset.labels = 0,30,45,60,90,300,315,331 # comment\n").unwrap();
        assert_eq!(cfg.labels.angles_deg[7], 331.0);
        let cfg = ExperimentConfig::parse("scene.geometry = planar:-1.5\npipeline.resize = none").unwrap();
        assert_eq!(cfg.scene.geometry, Geometry::Planar { lateral_offset: -1.5 });
        assert_eq!(cfg.pipeline.resize, None);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation_checks_cross_section_constraints() {
        let mut cfg = ExperimentConfig::toy();
        cfg.labels = LabelSet { angles_deg: vec![0.0, 90.0] };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::toy();
        cfg.drops = vec![-1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn standardize_moments() {
        let v = standardize(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f32 = v.iter().sum::<f32>() / 4.0;
        let var: f32 = v.iter().map(|x| x * x).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
        assert_eq!(standardize(&[2.0; 3]), vec![0.0; 3]);
    }
}
