//! End-to-end orchestration: run configuration, prepared datasets,
//! training, checkpoints, evaluation, caption runs and heatmap export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avmaps::{iterative_identify, upsample_bilinear, AudioQuery, IdentifyParams};
use crate::dataio::{
    load_clip, read_manifest, scale_for_encoder, normalize_channels, TOY_PIXEL_MEAN, TOY_PIXEL_STD, synthetic_clip, write_dataset, write_gray_png, write_png, AVClip,
    AudioConfig, AudioData, GtBox, Spectrogrammer, SyntheticSpec,
};
use crate::encoders::{
    from_grid_layout, to_grid_layout, AudioEmbedding, AudioEncoder, EncoderConfig, FixtureTextEncoder,
    ReferenceEmbeddings, VisualEncoder, VisualFeatureMap,
};
use crate::error::{ensure, Error, Result};
use crate::evalkit::{binarize, ciou, mask_iou, EvalMode, HeatmapPrediction, MetricReport, MultiSourceRule, SampleRecord};
use crate::guidance::{
    fixture_captions, get_or_generate, prompt_version, to_reference_embeddings, CaptionCache, CaptionClient,
    CaptionSource, GuidanceCaptions, HttpCaptionClient, Provider, FIXTURE_MODEL,
};
use crate::losses::{objective, LossReport, ObjectiveConfig};
use crate::nn::{Adam, AdamConfig};
use crate::sim::cosine;

pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DatasetConfig {
    /// JSON-lines manifest; when absent the synthetic corpus is generated
    /// in memory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the step count implied by `epochs`.
    pub max_steps: Option<usize>,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 1,
            max_steps: Some(2000),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Fixture,
    Client,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Defaults to `captions.jsonl` in the output directory.
    pub cache_path: Option<PathBuf>,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Fixture,
            cache_path: None,
            model: "internvl2-8b".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Heatmaps are binarised at this fraction of their maximum.
    pub binarize_frac: f64,
    pub identify: IdentifyParams,
    pub multi_rule: MultiSourceRule,
    /// Query multi-source clips with their separated component audio when
    /// available, otherwise with the mixture.
    pub use_components: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            binarize_frac: 0.5,
            identify: IdentifyParams::default(),
            multi_rule: MultiSourceRule::AllSources,
            use_components: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub audio: AudioConfig,
    pub encoder: EncoderConfig,
    pub loss: ObjectiveConfig,
    pub optimizer: AdamConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            audio: AudioConfig::default(),
            encoder: EncoderConfig::default(),
            loss: ObjectiveConfig::default(),
            optimizer: AdamConfig::default(),
            train: TrainConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.dataset.manifest {
            ensure(m.exists(), || format!("manifest {} does not exist", m.display()))?;
        } else {
            self.dataset.synthetic.validate()?;
        }
        self.audio.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        let o = &self.optimizer;
        ensure(o.lr > 0.0 && o.lr.is_finite(), || format!("learning rate must be positive, got {}", o.lr))?;
        ensure((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), || "Adam betas must lie in [0, 1)".into())?;
        ensure(o.eps > 0.0, || "Adam eps must be positive".into())?;
        ensure(self.train.batch_size >= 1, || "batch_size must be at least 1".into())?;
        ensure(
            self.eval.binarize_frac > 0.0 && self.eval.binarize_frac <= 1.0,
            || "binarize_frac must lie in (0, 1]".into(),
        )?;
        self.eval.identify.masks.validate()
    }

    pub fn cache_path(&self) -> PathBuf {
        self.guidance
            .cache_path
            .clone()
            .unwrap_or_else(|| self.output_dir.join("captions.jsonl"))
    }

    pub fn caption_model(&self) -> &str {
        match self.guidance.mode {
            GuidanceMode::Fixture => FIXTURE_MODEL,
            GuidanceMode::Client => &self.guidance.model,
        }
    }
}

// ----------------------------------------------------------------- model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
}

impl Model {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            encoder: cfg.clone(),
            visual: VisualEncoder::new(cfg)?,
            audio: AudioEncoder::new(cfg)?,
        })
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.visual.params().into_iter().chain(self.audio.params()).map(|p| p.dim()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = self.visual.params_mut();
        p.extend(self.audio.params_mut());
        p
    }

    pub fn text_encoder(&self) -> FixtureTextEncoder {
        FixtureTextEncoder::new(self.encoder.feature_channels, self.encoder.seed)
    }

    /// (w, h, c) feature grid of a prepared clip.
    pub fn feature_grid(&self, clip: &PreparedClip) -> Array3<f64> {
        to_grid_layout(&self.visual.forward_stemmed(clip.visual_input.clone()).0)
    }

    pub fn audio_embedding(&self, input: &Array3<f64>) -> Array1<f64> {
        self.audio.forward_stemmed(input.clone()).0
    }
}

// ------------------------------------------------------------------ data

/// A clip reduced to what training and evaluation need: pooled encoder
/// inputs plus labels and boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    pub clip_id: String,
    pub class_labels: Vec<String>,
    pub silent_objects: Vec<String>,
    pub gt_boxes: Vec<GtBox>,
    pub k: usize,
    /// (H, W) of the original image.
    pub image_size: (usize, usize),
    pub visual_input: Array3<f64>,
    pub audio_input: Array3<f64>,
    pub component_inputs: Vec<Array3<f64>>,
}

pub struct Preparer {
    model: Model,
    spectro: Spectrogrammer,
    audio: AudioConfig,
}

impl Preparer {
    pub fn new(encoder: &EncoderConfig, audio: &AudioConfig) -> Result<Self> {
        Ok(Self {
            model: Model::new(encoder)?,
            spectro: Spectrogrammer::new(*audio)?,
            audio: *audio,
        })
    }

    fn audio_input(&self, samples: &[f64], sr: u32) -> Result<Array3<f64>> {
        let spec = self.spectro.compute(samples, sr)?;
        Ok(self.model.audio.stem_input(scale_for_encoder(&spec).view()))
    }

    pub fn prepare(&self, clip: &AVClip) -> Result<PreparedClip> {
        clip.validate()?;
        self.model.visual.check_input(clip.image.view())?;
        let audio_input = match &clip.audio {
            AudioData::Waveform { samples, sample_rate } => self.audio_input(samples, *sample_rate)?,
            AudioData::Spectrogram(spec) => {
                self.model.audio.check_input(spec.view())?;
                self.model.audio.stem_input(scale_for_encoder(spec).view())
            }
        };
        let sr = match &clip.audio {
            AudioData::Waveform { sample_rate, .. } => *sample_rate,
            AudioData::Spectrogram(_) => self.audio.sample_rate,
        };
        let component_inputs = clip
            .components
            .iter()
            .map(|c| self.audio_input(c, sr))
            .collect::<Result<_>>()?;
        let (_, h, w) = clip.image.dim();
        Ok(PreparedClip {
            clip_id: clip.clip_id.clone(),
            class_labels: clip.class_labels.clone(),
            silent_objects: clip.silent_objects.clone(),
            gt_boxes: clip.gt_boxes.clone(),
            k: clip.k,
            image_size: (h, w),
            visual_input: self.model.visual.stem_input(normalize_channels(&clip.image, TOY_PIXEL_MEAN, TOY_PIXEL_STD).view()),
            audio_input,
            component_inputs,
        })
    }
}

/// Where the clips of a run come from.
pub enum ClipSource {
    Manifest { entries: Vec<crate::dataio::ManifestEntry>, root: PathBuf },
    Synthetic(SyntheticSpec),
}

impl ClipSource {
    pub fn from_config(cfg: &DatasetConfig) -> Result<Self> {
        match &cfg.manifest {
            Some(m) => Ok(Self::Manifest {
                entries: read_manifest(m)?,
                root: m.parent().unwrap_or(Path::new(".")).to_path_buf(),
            }),
            None => {
                cfg.synthetic.validate()?;
                Ok(Self::Synthetic(cfg.synthetic.clone()))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Manifest { entries, .. } => entries.len(),
            Self::Synthetic(spec) => spec.n_clips,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip_id(&self, i: usize) -> String {
        match self {
            Self::Manifest { entries, .. } => entries[i].clip_id.clone(),
            Self::Synthetic(spec) => format!("{}_{i:05}", if spec.duet { "duet" } else { "clip" }),
        }
    }

    pub fn clip(&self, i: usize) -> Result<AVClip> {
        match self {
            Self::Manifest { entries, root } => load_clip(&entries[i], root),
            Self::Synthetic(spec) => synthetic_clip(spec, i),
        }
    }

    pub fn find(&self, clip_id: &str) -> Option<usize> {
        (0..self.len()).find(|&i| self.clip_id(i) == clip_id)
    }

    /// Loads and prepares every clip, one at a time.
    pub fn prepare_all(&self, preparer: &Preparer) -> Result<Vec<PreparedClip>> {
        (0..self.len()).map(|i| preparer.prepare(&self.clip(i)?)).collect()
    }
}

// -------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_frg: f64,
    pub l_bkg: f64,
    pub l_oca: f64,
    pub l_ori: f64,
    pub l_contrastive: f64,
    pub l_total: f64,
    pub fn_count: usize,
}

impl StepLog {
    fn from_report(step: usize, epoch: usize, r: &LossReport) -> Self {
        Self {
            step,
            epoch,
            l_frg: r.l_frg,
            l_bkg: r.l_bkg,
            l_oca: r.l_oca,
            l_ori: r.l_ori,
            l_contrastive: r.l_contrastive,
            l_total: r.l_total,
            fn_count: r.false_negative_count,
        }
    }
}

pub fn planned_steps(n_clips: usize, train: &TrainConfig) -> usize {
    let per_epoch = n_clips.div_ceil(train.batch_size.max(1));
    let by_epochs = per_epoch * train.epochs;
    train.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
}

/// Stacks per-clip reference embeddings for the given indices.
fn select_refs(all: &ReferenceEmbeddings, idx: &[usize]) -> Result<ReferenceEmbeddings> {
    ReferenceEmbeddings::new(all.foreground.select(Axis(0), idx), all.background.select(Axis(0), idx))
}

/// Optimisation state carried between steps.
pub struct Trainer<'a> {
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    cfg: &'a RunConfig,
    data: &'a [PreparedClip],
    refs: ReferenceEmbeddings,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `captions[i]` belongs to `data[i]`.
    pub fn new(model: Model, cfg: &'a RunConfig, data: &'a [PreparedClip], captions: &[GuidanceCaptions]) -> Result<Self> {
        cfg.loss.validate()?;
        ensure(!data.is_empty(), || "no training clips".into())?;
        ensure(data.len() == captions.len(), || "one caption record per clip required".into())?;
        let refs = to_reference_embeddings(captions, &model.text_encoder())?;
        let optimizer = Adam::new(cfg.optimizer.clone(), &model.param_shapes());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        Ok(Self {
            model,
            optimizer,
            step: 0,
            cfg,
            data,
            refs,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let bs = self.cfg.train.batch_size.min(self.data.len());
        if self.order.is_empty() || self.cursor + bs > self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + bs].to_vec();
        self.cursor += bs;
        batch
    }

    /// Loss and gradients for a batch without touching the parameters.
    pub fn evaluate_batch(&self, idx: &[usize]) -> Result<(LossReport, Vec<Array2<f64>>)> {
        let (m, data) = (&self.model, self.data);
        let first = &data[idx[0]];
        let mut visual = Vec::with_capacity(idx.len());
        let mut audio = Vec::with_capacity(idx.len());
        for &i in idx {
            if data[i].visual_input.dim() != first.visual_input.dim() {
                return Err(Error::Dimension(format!(
                    "clip {} has a different image size from {}",
                    data[i].clip_id, first.clip_id
                )));
            }
            visual.push(m.visual.forward_stemmed(data[i].visual_input.clone()));
            audio.push(m.audio.forward_stemmed(data[i].audio_input.clone()));
        }
        let (c, gh, gw) = visual[0].0.dim();
        let mut fv = Array4::zeros((idx.len(), gw, gh, c));
        let mut la = Array2::zeros((idx.len(), c));
        for (bi, ((feat, _), (emb, _))) in visual.iter().zip(&audio).enumerate() {
            fv.slice_mut(s![bi, .., .., ..]).assign(&feat.view().permuted_axes([2, 1, 0]));
            la.row_mut(bi).assign(emb);
        }
        let fv = VisualFeatureMap::new(fv)?;
        let la = AudioEmbedding::new(la)?;
        let refs = select_refs(&self.refs, idx)?;
        let (report, grads) = objective(&fv, &la, &refs, &self.cfg.loss, false)?;

        let mut pg: Vec<Array2<f64>> = m.param_shapes().into_iter().map(Array2::zeros).collect();
        let nv = m.visual.convs.len();
        let (vg, ag) = pg.split_at_mut(nv);
        for (bi, ((_, vcache), (_, acache))) in visual.iter().zip(&audio).enumerate() {
            let dfeat = from_grid_layout(grads.d_fv.slice(s![bi, .., .., ..]));
            m.visual.backward_one(vcache, dfeat, vg);
            m.audio.backward_one(acache, &grads.d_la.row(bi).to_owned(), ag);
        }
        Ok((report, pg))
    }

    /// One optimisation step; returns the pre-update loss record.
    pub fn step(&mut self) -> Result<(StepLog, LossReport)> {
        let batch = self.next_batch();
        let (report, grads) = self.evaluate_batch(&batch)?;
        if !report.l_total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            let ids: Vec<&str> = batch.iter().map(|&i| self.data[i].clip_id.as_str()).collect();
            let dump = serde_json::json!({"step": self.step, "batch": ids, "report": report});
            let path = self.cfg.output_dir.join("nan_dump.json");
            if fs::create_dir_all(&self.cfg.output_dir).is_ok() {
                let _ = fs::write(&path, serde_json::to_string_pretty(&dump).unwrap_or_default());
            }
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} on batch [{}]; dump written to {}",
                self.step,
                ids.join(", "),
                path.display()
            )));
        }
        self.optimizer.step(self.model.params_mut(), &grads);
        let log = StepLog::from_report(self.step, self.epoch, &report);
        self.step += 1;
        Ok((log, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub metrics: Option<LossReport>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        ensure(ck.version == CHECKPOINT_VERSION, || {
            format!("checkpoint version {} is not supported", ck.version)
        })?;
        Ok(ck)
    }

    /// Untrained model straight from the configuration.
    pub fn initial(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(&cfg.encoder)?;
        let optimizer = Adam::new(cfg.optimizer.clone(), &model.param_shapes());
        Ok(Self {
            version: CHECKPOINT_VERSION,
            step: 0,
            config: cfg.clone(),
            model,
            optimizer,
            metrics: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub n_clips: usize,
    pub excluded_clips: Vec<String>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Fixture captions for prepared clips, without touching any cache.
pub fn fixture_caption_set(data: &[PreparedClip]) -> Vec<GuidanceCaptions> {
    data.iter()
        .map(|p| {
            let stub = AVClip {
                clip_id: p.clip_id.clone(),
                image: Array3::zeros((3, 0, 0)),
                audio: AudioData::Spectrogram(Array3::zeros((1, 0, 0))),
                components: Vec::new(),
                class_labels: p.class_labels.clone(),
                gt_boxes: Vec::new(),
                k: p.k,
                silent_objects: p.silent_objects.clone(),
            };
            let pair = fixture_captions(&stub);
            GuidanceCaptions {
                clip_id: p.clip_id.clone(),
                class_labels: p.class_labels.clone(),
                foreground: pair.foreground,
                background: pair.background,
                source: CaptionSource::Fixture,
                prompt_version: prompt_version(),
            }
        })
        .collect()
}

/// Trains in memory for `steps` steps, calling `on_step` after each one.
pub fn train_in_memory(
    cfg: &RunConfig,
    data: &[PreparedClip],
    captions: &[GuidanceCaptions],
    steps: usize,
    mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>,
) -> Result<(Model, Vec<StepLog>)> {
    let mut trainer = Trainer::new(Model::new(&cfg.encoder)?, cfg, data, captions)?;
    let mut logs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (log, _) = trainer.step()?;
        on_step(&log, &trainer)?;
        logs.push(log);
    }
    Ok((trainer.model, logs))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let source = ClipSource::from_config(&cfg.dataset)?;
    let cache = CaptionCache::open(&cfg.cache_path())?;
    let preparer = Preparer::new(&cfg.encoder, &cfg.audio)?;
    let mut data = Vec::new();
    let mut captions = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..source.len() {
        let id = source.clip_id(i);
        match cache.get(&id, cfg.caption_model()) {
            Some(rec) => {
                data.push(preparer.prepare(&source.clip(i)?)?);
                captions.push(GuidanceCaptions {
                    clip_id: rec.clip_id.clone(),
                    class_labels: rec.class_labels.clone(),
                    foreground: rec.foreground.clone(),
                    background: rec.background.clone(),
                    source: CaptionSource::Cache,
                    prompt_version: rec.prompt_version.clone(),
                });
            }
            None => excluded.push(id),
        }
    }
    if data.is_empty() {
        return Err(Error::Validation(format!(
            "no clip has a cached caption in {}; run the caption step first",
            cache.path().display()
        )));
    }
    if !excluded.is_empty() {
        log::warn!("{} clips have no caption and are excluded from training", excluded.len());
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let log_path = cfg.output_dir.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let ck_dir = cfg.output_dir.join("checkpoints");
    let steps = planned_steps(data.len(), &cfg.train);
    let mut trainer = Trainer::new(Model::new(&cfg.encoder)?, cfg, &data, &captions)?;
    let (mut initial, mut last) = (f64::NAN, None);
    for _ in 0..steps {
        let (log, report) = trainer.step()?;
        if log.step == 0 {
            initial = log.l_total;
        }
        writeln!(writer, "{}", serde_json::to_string(&log)?).map_err(|e| Error::io(&log_path, e))?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 && trainer.step < steps {
            checkpoint_of(&trainer, cfg, Some(report.clone())).save(&ck_dir.join(format!("step_{:06}.json", trainer.step)))?;
        }
        last = Some(report);
    }
    writer.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_loss = last.as_ref().map_or(f64::NAN, |r| r.l_total);
    let checkpoint = ck_dir.join("final.json");
    checkpoint_of(&trainer, cfg, last).save(&checkpoint)?;
    Ok(TrainSummary {
        steps,
        n_clips: data.len(),
        excluded_clips: excluded,
        initial_loss: initial,
        final_loss,
        checkpoint,
        log_path,
    })
}

fn checkpoint_of(t: &Trainer, cfg: &RunConfig, metrics: Option<LossReport>) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        step: t.step,
        config: cfg.clone(),
        model: t.model.clone(),
        optimizer: t.optimizer.clone(),
        metrics,
    }
}

// ------------------------------------------------------------ evaluation

/// Per-source heatmaps of one clip at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    pub heatmap: HeatmapPrediction,
    /// Highest raw audio-visual cosine of each source map.
    pub confidences: Vec<f64>,
    /// (K, H, W) heatmaps of each query without suppression.
    pub unsuppressed: Array3<f64>,
}

/// Rescales `map` to [0, 1] over the cells where `keep` holds; the other
/// cells become 0.
fn minmax_where(map: &Array2<f64>, keep: impl Fn(usize, usize) -> bool) -> Array2<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for ((i, j), &v) in map.indexed_iter() {
        if keep(i, j) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Array2::from_shape_fn(map.dim(), |(i, j)| {
        if !keep(i, j) {
            0.0
        } else if hi > lo {
            (map[[i, j]] - lo) / (hi - lo)
        } else {
            1.0
        }
    })
}

fn query_for(model: &Model, clip: &PreparedClip, mode: EvalMode, cfg: &EvalConfig) -> (AudioQuery, usize) {
    let k = match mode {
        EvalMode::Single => 1,
        EvalMode::Multi => clip.k,
    };
    if mode == EvalMode::Multi && cfg.use_components && clip.component_inputs.len() == k {
        let comps = clip.component_inputs.iter().map(|c| model.audio_embedding(c)).collect();
        (AudioQuery::Components(comps), k)
    } else {
        (AudioQuery::Mixed(model.audio_embedding(&clip.audio_input)), k)
    }
}

/// Localises the sources of one clip. Source `t` is assigned the clip's
/// t-th class label. Heatmaps are the raw cosine maps rescaled to [0, 1]
/// over the cells earlier iterations left unclaimed.
pub fn predict(model: &Model, clip: &PreparedClip, mode: EvalMode, cfg: &EvalConfig) -> Result<ClipPrediction> {
    let grid = model.feature_grid(clip);
    let (query, k) = query_for(model, clip, mode, cfg);
    let result = iterative_identify(grid.view(), &query, k, cfg.identify)?;
    let (h, w) = clip.image_size;
    let (gw, gh, _) = grid.dim();
    let mut maps = Array3::zeros((k, h, w));
    let mut unsuppressed = Array3::zeros((k, h, w));
    let mut confidences = Vec::with_capacity(k);
    let mut claimed = Array2::from_elem((gw, gh), false);
    for t in 0..k {
        let scores = result.score_maps.index_axis(Axis(0), t).to_owned();
        let conf = scores
            .indexed_iter()
            .filter(|&((i, j), _)| !claimed[[i, j]])
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        confidences.push(if conf.is_finite() { conf } else { -1.0 });
        let norm = minmax_where(&scores, |i, j| !claimed[[i, j]]);
        maps.index_axis_mut(Axis(0), t).assign(&upsample_bilinear(&norm, w, h));

        let audio = match &query {
            AudioQuery::Mixed(a) => a,
            AudioQuery::Components(v) => &v[t],
        };
        let raw = Array2::from_shape_fn((gw, gh), |(i, j)| {
            cosine(grid.slice(s![i, j, ..]).as_slice().expect("contiguous"), audio.as_slice().expect("contiguous")).value
        });
        let free = minmax_where(&raw, |_, _| true);
        unsuppressed.index_axis_mut(Axis(0), t).assign(&upsample_bilinear(&free, w, h));

        let bin = result.binarized_masks.index_axis(Axis(0), t);
        ndarray::Zip::from(&mut claimed).and(&bin).for_each(|c, &b| *c |= b);
    }
    let labels = clip.class_labels.iter().cycle().take(k).cloned().collect();
    Ok(ClipPrediction {
        heatmap: HeatmapPrediction::new(maps, labels)?,
        confidences,
        unsuppressed,
    })
}

fn expected_sources(clip: &PreparedClip, mode: EvalMode) -> usize {
    match mode {
        EvalMode::Single => 1,
        EvalMode::Multi => clip.k,
    }
}

/// Scores supplied heatmaps against the clips' boxes. Clips whose
/// prediction is missing or whose source count disagrees with the ground
/// truth are flagged and count as failures.
pub fn evaluate_predictions(
    clips: &[PreparedClip],
    predictions: &[Option<ClipPrediction>],
    mode: EvalMode,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    ensure(clips.len() == predictions.len(), || "one prediction slot per clip required".into())?;
    let mut records = Vec::with_capacity(clips.len());
    for (clip, pred) in clips.iter().zip(predictions) {
        let k = expected_sources(clip, mode);
        let flag = match pred {
            None => Some("no prediction".to_string()),
            Some(p) => {
                let (pk, ph, pw) = p.heatmap.per_source.dim();
                if pk != k || clip.gt_boxes.len() != k {
                    Some(format!("K mismatch: {pk} maps, {} boxes, {k} expected", clip.gt_boxes.len()))
                } else if (ph, pw) != clip.image_size {
                    Some(format!("heatmap {ph}x{pw} does not match the image"))
                } else {
                    None
                }
            }
        };
        records.push(match (flag, pred) {
            (None, Some(p)) => SampleRecord {
                clip_id: clip.clip_id.clone(),
                scores: ciou(&p.heatmap, &clip.gt_boxes, cfg.binarize_frac),
                confidences: p.confidences.clone(),
                flagged: None,
            },
            (flag, _) => SampleRecord {
                clip_id: clip.clip_id.clone(),
                scores: Vec::new(),
                confidences: Vec::new(),
                flagged: flag,
            },
        });
    }
    let n_flagged = records.iter().filter(|r| r.flagged.is_some()).count();
    if n_flagged > 0 {
        log::warn!("{n_flagged} of {} clips flagged during evaluation", records.len());
    }
    MetricReport::from_samples(mode, records, cfg.multi_rule)
}

pub fn evaluate(model: &Model, clips: &[PreparedClip], mode: EvalMode, cfg: &EvalConfig) -> Result<MetricReport> {
    let preds: Vec<Option<ClipPrediction>> = clips
        .iter()
        .map(|c| {
            if c.k < expected_sources(c, mode) {
                Ok(None)
            } else {
                predict(model, c, mode, cfg).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    evaluate_predictions(clips, &preds, mode, cfg)
}

/// Heatmaps that are the rasterised ground-truth boxes of each clip.
pub fn oracle_prediction(clip: &PreparedClip) -> ClipPrediction {
    let (h, w) = clip.image_size;
    let k = clip.gt_boxes.len();
    let maps = Array3::from_shape_fn((k, h, w), |(t, y, x)| {
        let b = &clip.gt_boxes[t];
        let (x, y) = (x as f64, y as f64);
        (x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1) as u8 as f64
    });
    ClipPrediction {
        heatmap: HeatmapPrediction {
            per_source: maps.clone(),
            class_assignments: clip.gt_boxes.iter().map(|b| b.class.clone()).collect(),
        },
        confidences: vec![1.0; k],
        unsuppressed: maps,
    }
}

/// Mean IoU between every pair of binarised unsuppressed source maps of
/// multi-source clips.
pub fn mean_pairwise_overlap(model: &Model, clips: &[PreparedClip], cfg: &EvalConfig) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for clip in clips.iter().filter(|c| c.k >= 2) {
        let pred = predict(model, clip, EvalMode::Multi, cfg)?;
        let bins: Vec<Array2<bool>> = pred
            .unsuppressed
            .outer_iter()
            .map(|m| binarize(m, cfg.binarize_frac))
            .collect();
        for a in 0..bins.len() {
            for b in a + 1..bins.len() {
                total += mask_iou(&bins[a], &bins[b]);
                n += 1;
            }
        }
    }
    ensure(n > 0, || "no multi-source clips to compare".into())?;
    Ok(total / n as f64)
}

/// Gaussian bump centred in the image, the usual centre-prior baseline.
pub fn center_prior(clip: &PreparedClip) -> ClipPrediction {
    let (h, w) = clip.image_size;
    let k = clip.k;
    let sigma = h.min(w) as f64 / 4.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let map = Array2::from_shape_fn((h, w), |(y, x)| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });
    let maps = ndarray::stack(Axis(0), &vec![map.view(); k]).expect("same shape");
    ClipPrediction {
        heatmap: HeatmapPrediction {
            per_source: maps.clone(),
            class_assignments: clip.class_labels.iter().cycle().take(k).cloned().collect(),
        },
        confidences: vec![1.0; k],
        unsuppressed: maps,
    }
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ensure(ck.model.encoder == cfg.encoder, || {
                "checkpoint encoder config differs from the run config".into()
            })?;
            Ok(ck.model)
        }
        None => Model::new(&cfg.encoder),
    }
}

/// Evaluates a checkpoint (or the untrained model) and writes the report
/// as JSON, a text table and a per-sample CSV into the output directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, mode: EvalMode) -> Result<MetricReport> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let source = ClipSource::from_config(&cfg.dataset)?;
    let data = source.prepare_all(&Preparer::new(&cfg.encoder, &cfg.audio)?)?;
    let report = evaluate(&model, &data, mode, &cfg.eval)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let stem = match mode {
        EvalMode::Single => "eval_single",
        EvalMode::Multi => "eval_multi",
    };
    for (ext, body) in [("json", report.to_json()?), ("txt", report.to_table()), ("csv", report.to_csv())] {
        let path = cfg.output_dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

// -------------------------------------------------------------- captions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub n_clips: usize,
    pub cached: usize,
    pub generated: usize,
    pub flagged: Vec<(String, String)>,
    pub cache_path: PathBuf,
    /// Set when a client failure stopped the run early.
    pub aborted: Option<String>,
}

/// Ensures every clip has a cache entry. Clips whose responses stay
/// malformed are flagged; a transport failure aborts the run, leaving the
/// entries written so far in place.
pub fn caption_clips(source: &ClipSource, provider: &Provider, cache: &mut CaptionCache) -> Result<CaptionReport> {
    let mut report = CaptionReport {
        n_clips: source.len(),
        cached: 0,
        generated: 0,
        flagged: Vec::new(),
        cache_path: cache.path().to_path_buf(),
        aborted: None,
    };
    for i in 0..source.len() {
        let id = source.clip_id(i);
        if cache.get(&id, provider.model()).is_some() {
            report.cached += 1;
            continue;
        }
        let clip = source.clip(i)?;
        match get_or_generate(&clip, provider, cache) {
            Ok(_) => report.generated += 1,
            Err(Error::Client(msg)) => {
                report.aborted = Some(format!("client failure on {id}: {msg}"));
                break;
            }
            Err(e @ (Error::Parse { .. } | Error::SourceCountMismatch { .. } | Error::Validation(_))) => {
                report.flagged.push((id, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

pub fn cmd_caption(cfg: &RunConfig, client: Option<&dyn CaptionClient>) -> Result<CaptionReport> {
    cfg.validate()?;
    let source = ClipSource::from_config(&cfg.dataset)?;
    let mut cache = CaptionCache::open(&cfg.cache_path())?;
    let http;
    let provider = match (cfg.guidance.mode, client) {
        (GuidanceMode::Fixture, _) => Provider::Fixture,
        (GuidanceMode::Client, Some(c)) => Provider::Client(c),
        (GuidanceMode::Client, None) => {
            http = HttpCaptionClient::from_env(&cfg.guidance.model, Duration::from_secs(cfg.guidance.timeout_secs))?;
            Provider::Client(&http)
        }
    };
    let report = caption_clips(&source, &provider, &mut cache)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("caption_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    match &report.aborted {
        Some(reason) => Err(Error::Client(format!(
            "{reason}; {} generated, {} cached before stopping",
            report.generated, report.cached
        ))),
        None => Ok(report),
    }
}

// ------------------------------------------------------------- synthetic

pub fn cmd_synth(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let clips = crate::dataio::generate_synthetic(spec)?;
    write_dataset(dir, &clips)
}

// ------------------------------------------------------------ visualise

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub clip_id: String,
    pub source: usize,
    pub class: String,
    pub confidence: f64,
    pub binarize_frac: f64,
    /// Half-open bounding box of the binarised heatmap, if non-empty.
    pub bbox: Option<[usize; 4]>,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct VisualizeReport {
    pub written: Vec<HeatmapSidecar>,
    pub missing: Vec<String>,
}

fn bbox_of(mask: &Array2<bool>) -> Option<[usize; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            b = Some(match b {
                None => [x, y, x + 1, y + 1],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
            });
        }
    }
    b
}

/// Blends the heatmap into the image in red.
pub fn overlay(image: ArrayView3<f64>, heat: &Array2<f64>) -> Array3<f64> {
    Array3::from_shape_fn(image.dim(), |(c, y, x)| {
        let h = heat[[y, x]].clamp(0.0, 1.0);
        let tint = if c == 0 { 1.0 } else { 0.0 };
        image[[c, y, x]] * (1.0 - 0.6 * h) + 0.6 * h * tint
    })
}

/// Writes a grayscale heatmap, an overlay and a JSON sidecar per source
/// of each requested clip (multi-source clips use iterative
/// identification).
pub fn cmd_visualize(cfg: &RunConfig, checkpoint: Option<&Path>, clip_ids: &[String], out_dir: &Path) -> Result<VisualizeReport> {
    cfg.validate()?;
    let model = load_model(cfg, checkpoint)?;
    let source = ClipSource::from_config(&cfg.dataset)?;
    let preparer = Preparer::new(&cfg.encoder, &cfg.audio)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = VisualizeReport::default();
    for id in clip_ids {
        let Some(i) = source.find(id) else {
            report.missing.push(id.clone());
            continue;
        };
        let clip = source.clip(i)?;
        let prepared = preparer.prepare(&clip)?;
        let mode = if clip.k > 1 { EvalMode::Multi } else { EvalMode::Single };
        let pred = predict(&model, &prepared, mode, &cfg.eval)?;
        for (t, heat) in pred.heatmap.per_source.outer_iter().enumerate() {
            let heat = heat.to_owned();
            let heatmap = out_dir.join(format!("{id}_src{t}_heatmap.png"));
            let over = out_dir.join(format!("{id}_src{t}_overlay.png"));
            write_gray_png(&heatmap, heat.view())?;
            write_png(&over, overlay(clip.image.view(), &heat).view())?;
            let sidecar = HeatmapSidecar {
                clip_id: id.clone(),
                source: t,
                class: pred.heatmap.class_assignments[t].clone(),
                confidence: pred.confidences[t],
                binarize_frac: cfg.eval.binarize_frac,
                bbox: bbox_of(&binarize(heat.view(), cfg.eval.binarize_frac)),
                heatmap,
                overlay: over,
            };
            let path = out_dir.join(format!("{id}_src{t}.json"));
            fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
            report.written.push(sidecar);
        }
    }
    Ok(report)
}
