//! Clip ingestion and preprocessing, duet mixing, and the synthetic
//! shapes-and-tones corpus.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{concatenate, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const IMAGE_SIZE: usize = 224;

/// Per-channel statistics for [`normalize_channels`] (the usual ImageNet
/// values).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Statistics the pipeline uses in front of the toy visual encoder. Mid
/// grey maps to 0, so zero padding looks like plain background and border
/// cells carry no position code.
pub const TOY_PIXEL_MEAN: [f64; 3] = [0.5; 3];
pub const TOY_PIXEL_STD: [f64; 3] = [0.25; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: String,
    /// Half-open pixel box: column `x` is inside when `x0 <= x < x1`.
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GtBox {
    pub fn shifted_x(&self, dx: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            x1: self.x1 + dx,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AudioData {
    Waveform { samples: Vec<f64>, sample_rate: u32 },
    /// Already-computed (1, F, T) log-magnitude spectrogram.
    Spectrogram(Array3<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AVClip {
    pub clip_id: String,
    /// (3, H, W) in [0, 1].
    pub image: Array3<f64>,
    pub audio: AudioData,
    /// Separate waveform of each source of a mixture, in `class_labels`
    /// order. Empty for single-source clips.
    pub components: Vec<Vec<f64>>,
    pub class_labels: Vec<String>,
    pub gt_boxes: Vec<GtBox>,
    pub k: usize,
    /// Classes of visible objects that make no sound.
    pub silent_objects: Vec<String>,
}

impl AVClip {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        ensure(c == 3, || format!("clip {}: expected 3 channels, got {c}", self.clip_id))?;
        ensure(self.k >= 1, || format!("clip {}: K must be at least 1", self.clip_id))?;
        ensure(self.image.iter().all(|v| v.is_finite()), || {
            format!("clip {}: non-finite pixels", self.clip_id)
        })?;
        for b in &self.gt_boxes {
            ensure(
                b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= w as f64 && b.y1 <= h as f64 && b.x0 < b.x1 && b.y0 < b.y1,
                || format!("clip {}: box {:?} outside {w}x{h} image", self.clip_id, b),
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- images

/// Bilinear resize of one (H, W) plane, sampling at pixel centres.
pub fn resize_plane(plane: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let coord = |p: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src = ((p as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), src - lo as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = xs[x];
        let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
        let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_image(image: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let planes: Vec<_> = image.outer_iter().map(|p| resize_plane(p, out_h, out_w)).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).expect("equal plane shapes")
}

/// 8-bit RGB to a (3, 224, 224) tensor in [0, 1].
pub fn preprocess_image(raw: &image::RgbImage) -> Array3<f64> {
    let img = rgb_to_array(raw);
    if img.dim() == (3, IMAGE_SIZE, IMAGE_SIZE) {
        img
    } else {
        resize_image(img.view(), IMAGE_SIZE, IMAGE_SIZE)
    }
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize_channels(image: &Array3<f64>, mean: [f64; 3], std: [f64; 3]) -> Array3<f64> {
    let mut out = image.clone();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
    out
}

pub fn rgb_to_array(raw: &image::RgbImage) -> Array3<f64> {
    let (w, h) = raw.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        raw.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn array_to_rgb(image: ArrayView3<f64>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn write_png(path: &Path, image: ArrayView3<f64>) -> Result<()> {
    array_to_rgb(image)
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn write_gray_png(path: &Path, plane: ArrayView2<f64>) -> Result<()> {
    let (h, w) = plane.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(plane[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
    .save(path)
    .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

// ----------------------------------------------------------------- audio

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub seconds: f64,
    pub window: usize,
    pub hop: usize,
    /// Added to the magnitude before taking the log.
    pub log_floor: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            seconds: 3.0,
            window: 512,
            hop: 160,
            log_floor: 1e-5,
        }
    }
}

impl AudioConfig {
    pub fn samples(&self) -> usize {
        (self.sample_rate as f64 * self.seconds).round() as usize
    }

    /// (F, T) of every spectrogram produced with this configuration.
    pub fn spectrogram_shape(&self) -> (usize, usize) {
        (self.window / 2 + 1, 1 + (self.samples() - self.window) / self.hop)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.sample_rate > 0 && self.seconds > 0.0, || "empty audio clip length".into())?;
        ensure(self.window >= 2 && self.hop >= 1, || "window and hop must be positive".into())?;
        ensure(self.samples() >= self.window, || "clip shorter than one STFT window".into())?;
        ensure(self.log_floor > 0.0, || "log floor must be positive".into())
    }
}

/// Short-time Fourier transform with a periodic Hann window and no
/// centring padding.
pub struct Spectrogrammer {
    cfg: AudioConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Spectrogrammer {
    pub fn new(cfg: AudioConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        let n = cfg.window;
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        Ok(Self { cfg, fft, window })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    /// Waveform at `sr` to a (1, F, T) log-magnitude spectrogram. The audio
    /// is resampled, then looped or truncated to the configured length.
    pub fn compute(&self, samples: &[f64], sr: u32) -> Result<Array3<f64>> {
        ensure(!samples.is_empty(), || "empty audio".into())?;
        ensure(sr > 0, || "sample rate must be positive".into())?;
        ensure(samples.iter().all(|s| s.is_finite()), || "audio contains non-finite samples".into())?;
        let resampled = resample_linear(samples, sr, self.cfg.sample_rate);
        let fixed = loop_to_length(&resampled, self.cfg.samples());
        let (f_bins, frames) = self.cfg.spectrogram_shape();
        let mut out = Array3::zeros((1, f_bins, frames));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.window];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(fixed[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for f in 0..f_bins {
                out[[0, f, t]] = (buf[f].norm() + self.cfg.log_floor).ln();
            }
        }
        Ok(out)
    }
}

pub fn preprocess_audio(samples: &[f64], sr: u32, cfg: &AudioConfig) -> Result<Array3<f64>> {
    Spectrogrammer::new(*cfg)?.compute(samples, sr)
}

/// Standardises a log spectrogram per clip (zero mean, unit variance over
/// all bins). A constant spectrogram maps to zeros.
pub fn scale_for_encoder(spec: &Array3<f64>) -> Array3<f64> {
    let n = spec.len().max(1) as f64;
    let mean = spec.sum() / n;
    let std = (spec.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-9 {
        return Array3::zeros(spec.dim());
    }
    spec.mapv(|v| (v - mean) / std)
}

pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return samples.to_vec();
    }
    let n_out = ((samples.len() as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let ratio = from as f64 / to as f64;
    (0..n_out)
        .map(|i| {
            let src = i as f64 * ratio;
            let lo = (src.floor() as usize).min(samples.len() - 1);
            let hi = (lo + 1).min(samples.len() - 1);
            let frac = src - lo as f64;
            samples[lo] * (1.0 - frac) + samples[hi] * frac
        })
        .collect()
}

fn loop_to_length(samples: &[f64], n: usize) -> Vec<f64> {
    samples.iter().cycle().take(n).cloned().collect()
}

fn peak_normalize(samples: &mut [f64]) -> f64 {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
        1.0 / peak
    } else {
        1.0
    }
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wrap = |e: hound::Error| Error::io(path, std::io::Error::other(e));
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in samples {
        w.write_sample(s as f32).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// Mono samples (channels averaged) and the sample rate.
pub fn read_wav(path: &Path) -> std::result::Result<(Vec<f64>, u32), String> {
    let mut r = hound::WavReader::open(path).map_err(|e| e.to_string())?;
    let spec = r.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = 2f64.powi(spec.bits_per_sample as i32 - 1);
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| e.to_string())?;
    let ch = spec.channels.max(1) as usize;
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok((mono, spec.sample_rate))
}

// ------------------------------------------------------------------ duets

/// Places `a` left of `b`, sums the waveforms and peak-normalises the mix.
/// The components keep the same scale factor as the mix.
pub fn mix_duet(a: &AVClip, b: &AVClip) -> Result<AVClip> {
    for c in [a, b] {
        ensure(c.image.dim() == (3, IMAGE_SIZE, IMAGE_SIZE) && c.k == 1, || {
            format!("clip {} is not a single-source 224x224 clip", c.clip_id)
        })?;
    }
    let (wa, sra, wb, srb) = match (&a.audio, &b.audio) {
        (
            AudioData::Waveform { samples: wa, sample_rate: sra },
            AudioData::Waveform { samples: wb, sample_rate: srb },
        ) => (wa, *sra, wb, *srb),
        _ => return Err(Error::Validation("duet mixing needs raw waveforms".into())),
    };
    ensure(sra == srb && wa.len() == wb.len(), || {
        format!("mismatched audio: {} samples at {sra} Hz vs {} at {srb} Hz", wa.len(), wb.len())
    })?;
    let mut mix: Vec<f64> = wa.iter().zip(wb).map(|(x, y)| x + y).collect();
    let gain = peak_normalize(&mut mix);
    let scaled = |w: &Vec<f64>| w.iter().map(|s| s * gain).collect::<Vec<_>>();

    let image = concatenate(Axis(2), &[a.image.view(), b.image.view()]).expect("same height");
    let mut gt_boxes = a.gt_boxes.clone();
    gt_boxes.extend(b.gt_boxes.iter().map(|g| g.shifted_x(IMAGE_SIZE as f64)));
    let mut class_labels = a.class_labels.clone();
    class_labels.extend(b.class_labels.iter().cloned());
    let mut silent_objects = a.silent_objects.clone();
    silent_objects.extend(b.silent_objects.iter().cloned());
    Ok(AVClip {
        clip_id: format!("{}+{}", a.clip_id, b.clip_id),
        image,
        audio: AudioData::Waveform {
            samples: mix,
            sample_rate: sra,
        },
        components: vec![scaled(wa), scaled(wb)],
        class_labels,
        gt_boxes,
        k: 2,
        silent_objects,
    })
}

// -------------------------------------------------------------- synthetic

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "circle" => Some(Shape::Circle),
            "square" => Some(Shape::Square),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    /// Whether pixel centre (x, y) falls in a shape of extent `size`
    /// centred on (cx, cy).
    fn contains(self, cx: f64, cy: f64, size: f64, x: f64, y: f64) -> bool {
        let half = size / 2.0;
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= half * half,
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            Shape::Triangle => {
                let t = (dy + half) / size;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * half
            }
        }
    }
}

const PALETTE: [[f64; 3]; 3] = [[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.25, 0.35, 0.9]];
const OUTLINE: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub shape_classes: Vec<String>,
    /// Tone frequency in Hz for each class.
    pub tone_map: BTreeMap<String, f64>,
    pub silent_distractor_prob: f64,
    /// Chance that a distractor reuses the sounding class (drawn as an
    /// outline); otherwise it is a filled shape of another class.
    pub same_class_prob: f64,
    /// Standard deviation of the Gaussian pixel noise on the grey background.
    pub background_noise: f64,
    pub duet: bool,
    pub min_size: f64,
    pub max_size: f64,
    pub audio: AudioConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let classes = ["circle", "square", "triangle"];
        Self {
            seed: 0,
            n_clips: 100,
            shape_classes: classes.iter().map(|s| s.to_string()).collect(),
            tone_map: classes.iter().map(|s| s.to_string()).zip([440.0, 880.0, 1320.0]).collect(),
            silent_distractor_prob: 0.5,
            same_class_prob: 0.5,
            background_noise: 0.0,
            duet: false,
            min_size: 56.0,
            max_size: 84.0,
            audio: AudioConfig::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(!self.shape_classes.is_empty(), || "no shape classes".into())?;
        for c in &self.shape_classes {
            ensure(Shape::parse(c).is_some(), || format!("unknown shape class {c:?}"))?;
            ensure(self.tone_map.contains_key(c), || format!("no tone for class {c:?}"))?;
        }
        let mut freqs: Vec<f64> = self.shape_classes.iter().map(|c| self.tone_map[c]).collect();
        freqs.sort_by(f64::total_cmp);
        ensure(freqs.windows(2).all(|w| w[0] != w[1]), || "tone frequencies must be distinct".into())?;
        let nyquist = self.audio.sample_rate as f64 / 2.0;
        ensure(freqs.iter().all(|&f| f > 0.0 && f < nyquist), || "tones must lie below Nyquist".into())?;
        ensure(self.background_noise >= 0.0 && self.background_noise.is_finite(), || "background_noise must be non-negative".into())?;
        for p in [self.silent_distractor_prob, self.same_class_prob] {
            ensure((0.0..=1.0).contains(&p), || format!("probability {p} outside [0, 1]"))?;
        }
        ensure(
            self.min_size >= 2.0 * OUTLINE + 2.0 && self.min_size <= self.max_size && self.max_size <= IMAGE_SIZE as f64 / 2.0,
            || format!("shape sizes [{}, {}] unusable", self.min_size, self.max_size),
        )?;
        ensure(!self.duet || self.shape_classes.len() >= 2, || "duets need two classes".into())?;
        self.audio.validate()
    }
}

fn draw(image: &mut Array3<f64>, shape: Shape, cx: f64, cy: f64, size: f64, color: [f64; 3], filled: bool) {
    let (_, h, w) = image.dim();
    let half = size / 2.0;
    let x_lo = (cx - half).floor().max(0.0) as usize;
    let x_hi = ((cx + half).ceil() as usize).min(w);
    let y_lo = (cy - half).floor().max(0.0) as usize;
    let y_hi = ((cy + half).ceil() as usize).min(h);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = shape.contains(cx, cy, size, px, py);
            let hole = !filled && shape.contains(cx, cy, size - 2.0 * OUTLINE, px, py);
            if inside && !hole {
                for c in 0..3 {
                    image[[c, y, x]] = color[c];
                }
            }
        }
    }
}

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    cx: f64,
    cy: f64,
    size: f64,
}

impl Placed {
    fn bbox(&self) -> [f64; 4] {
        let half = self.size / 2.0;
        [self.cx - half, self.cy - half, self.cx + half, self.cy + half]
    }

    fn overlaps(&self, other: &Placed, margin: f64) -> bool {
        let [a0, b0, a1, b1] = self.bbox();
        let [c0, d0, c1, d1] = other.bbox();
        a0 < c1 + margin && c0 < a1 + margin && b0 < d1 + margin && d0 < b1 + margin
    }
}

fn place(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Placed {
    // Even integer sizes keep boxes on the pixel grid.
    let size = 2.0 * (rng.gen_range(spec.min_size..=spec.max_size) / 2.0).round();
    let half = size / 2.0;
    let cx = rng.gen_range(half..=IMAGE_SIZE as f64 - half).round();
    let cy = rng.gen_range(half..=IMAGE_SIZE as f64 - half).round();
    Placed { cx, cy, size }
}

fn single_clip(clip_id: String, class_idx: usize, rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> AVClip {
    let noise = Normal::new(0.0, spec.background_noise).expect("validated");
    let mut image = Array3::from_shape_simple_fn((3, IMAGE_SIZE, IMAGE_SIZE), || 0.5 + noise.sample(rng));

    let class = spec.shape_classes[class_idx].clone();
    let shape = Shape::parse(&class).expect("validated");
    let sounding = place(rng, spec);
    let color = PALETTE[class_idx % PALETTE.len()];
    draw(&mut image, shape, sounding.cx, sounding.cy, sounding.size, color, true);

    let mut silent_objects = Vec::new();
    if rng.gen_bool(spec.silent_distractor_prob) {
        let same = spec.shape_classes.len() == 1 || rng.gen_bool(spec.same_class_prob);
        let d_idx = if same {
            class_idx
        } else {
            let others: Vec<usize> = (0..spec.shape_classes.len()).filter(|&i| i != class_idx).collect();
            others[rng.gen_range(0..others.len())]
        };
        for _ in 0..100 {
            let d = place(rng, spec);
            if !d.overlaps(&sounding, 4.0) {
                let d_shape = Shape::parse(&spec.shape_classes[d_idx]).expect("validated");
                draw(&mut image, d_shape, d.cx, d.cy, d.size, PALETTE[d_idx % PALETTE.len()], !same);
                silent_objects.push(spec.shape_classes[d_idx].clone());
                break;
            }
        }
    }
    image.mapv_inplace(quantize_u8);

    let sr = spec.audio.sample_rate;
    let freq = spec.tone_map[&class];
    let phase = rng.gen_range(0.0..2.0 * PI);
    let hiss = Normal::new(0.0, 0.005).expect("finite");
    let samples: Vec<f64> = (0..spec.audio.samples())
        .map(|i| {
            let t = i as f64 / sr as f64;
            // Stored as 32-bit float so a disk round trip is exact.
            (0.5 * (2.0 * PI * freq * t + phase).sin() + hiss.sample(rng)) as f32 as f64
        })
        .collect();

    let [x0, y0, x1, y1] = sounding.bbox();
    AVClip {
        clip_id,
        image,
        audio: AudioData::Waveform {
            samples,
            sample_rate: sr,
        },
        components: Vec::new(),
        class_labels: vec![class.clone()],
        gt_boxes: vec![GtBox {
            class,
            x0: x0.max(0.0),
            y0: y0.max(0.0),
            x1: x1.min(IMAGE_SIZE as f64),
            y1: y1.min(IMAGE_SIZE as f64),
        }],
        k: 1,
        silent_objects,
    }
}

/// Fully seeded corpus. Clip `i` depends only on the seed and `i`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<AVClip>> {
    spec.validate()?;
    (0..spec.n_clips).map(|i| synthetic_clip(spec, i)).collect()
}

/// Clip `i` of the corpus described by `spec`; each clip has its own RNG
/// stream, so clips can be generated independently and in any order.
pub fn synthetic_clip(spec: &SyntheticSpec, i: usize) -> Result<AVClip> {
    spec.validate()?;
    let n_classes = spec.shape_classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    if spec.duet {
        let a = rng.gen_range(0..n_classes);
        let b = (a + rng.gen_range(1..n_classes)) % n_classes;
        let left = single_clip(format!("duet_{i:05}_a"), a, &mut rng, spec);
        let right = single_clip(format!("duet_{i:05}_b"), b, &mut rng, spec);
        let mut mixed = mix_duet(&left, &right)?;
        mixed.clip_id = format!("duet_{i:05}");
        let f32_exact = |w: &mut Vec<f64>| w.iter_mut().for_each(|s| *s = *s as f32 as f64);
        if let AudioData::Waveform { samples, .. } = &mut mixed.audio {
            f32_exact(samples);
        }
        mixed.components.iter_mut().for_each(f32_exact);
        Ok(mixed)
    } else {
        let c = rng.gen_range(0..n_classes);
        Ok(single_clip(format!("clip_{i:05}"), c, &mut rng, spec))
    }
}

// -------------------------------------------------------------- manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub image_path: PathBuf,
    pub audio_path: PathBuf,
    pub class_labels: Vec<String>,
    pub gt_boxes: Vec<GtBox>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub silent_objects: Vec<String>,
    #[serde(default)]
    pub component_paths: Vec<PathBuf>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes PNG frames, float WAV audio and `manifest.jsonl` under `dir`.
/// Paths in the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, clips: &[AVClip]) -> Result<PathBuf> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("audio"))?;
    let manifest = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for clip in clips {
        let (samples, sr) = match &clip.audio {
            AudioData::Waveform { samples, sample_rate } => (samples, *sample_rate),
            AudioData::Spectrogram(_) => {
                return Err(Error::Validation(format!("clip {} has no waveform to write", clip.clip_id)))
            }
        };
        let image_path = PathBuf::from("images").join(format!("{}.png", clip.clip_id));
        let audio_path = PathBuf::from("audio").join(format!("{}.wav", clip.clip_id));
        write_png(&dir.join(&image_path), clip.image.view())?;
        write_wav(&dir.join(&audio_path), samples, sr)?;
        let mut component_paths = Vec::new();
        for (k, comp) in clip.components.iter().enumerate() {
            let p = PathBuf::from("audio").join(format!("{}_src{k}.wav", clip.clip_id));
            write_wav(&dir.join(&p), comp, sr)?;
            component_paths.push(p);
        }
        let entry = ManifestEntry {
            clip_id: clip.clip_id.clone(),
            image_path,
            audio_path,
            class_labels: clip.class_labels.clone(),
            gt_boxes: clip.gt_boxes.clone(),
            k: clip.k,
            silent_objects: clip.silent_objects.clone(),
            component_paths,
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            clip_id: format!("{}:{}", path.display(), no + 1),
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads one manifest entry. Frames that are neither 224x224 nor a
/// 448x224 duet are resized to 224x224.
pub fn load_clip(entry: &ManifestEntry, root: &Path) -> Result<AVClip> {
    let fail = |reason: String| Error::Ingestion {
        clip_id: entry.clip_id.clone(),
        reason,
    };
    let image_path = root.join(&entry.image_path);
    let raw = image::open(&image_path)
        .map_err(|e| fail(format!("{}: {e}", image_path.display())))?
        .to_rgb8();
    let image = match raw.dimensions() {
        (w, h) if h as usize == IMAGE_SIZE && (w as usize == IMAGE_SIZE || w as usize == 2 * IMAGE_SIZE) => rgb_to_array(&raw),
        _ => preprocess_image(&raw),
    };
    let (samples, sample_rate) =
        read_wav(&root.join(&entry.audio_path)).map_err(|e| fail(format!("{}: {e}", entry.audio_path.display())))?;
    let components = entry
        .component_paths
        .iter()
        .map(|p| read_wav(&root.join(p)).map(|(s, _)| s).map_err(|e| fail(format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let clip = AVClip {
        clip_id: entry.clip_id.clone(),
        image,
        audio: AudioData::Waveform { samples, sample_rate },
        components,
        class_labels: entry.class_labels.clone(),
        gt_boxes: entry.gt_boxes.clone(),
        k: entry.k,
        silent_objects: entry.silent_objects.clone(),
    };
    clip.validate().map_err(|e| fail(e.to_string()))?;
    Ok(clip)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<AVClip>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|e| load_clip(e, root)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn tone(freq: f64, seconds: f64, sr: u32) -> Vec<f64> {
        (0..(seconds * sr as f64) as usize)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn resize_cases() {
        let gray = image::RgbImage::from_pixel(448, 448, image::Rgb([128, 128, 128]));
        let out = preprocess_image(&gray);
        assert_eq!(out.dim(), (3, 224, 224));
        assert!(out.iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));

        let checker = Array2::from_shape_fn((2, 2), |(y, x)| ((x + y) % 2) as f64);
        let up = resize_plane(checker.view(), 224, 224);
        let down = resize_plane(up.view(), 2, 2);
        assert!((down.mean().unwrap() - checker.mean().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn channel_normalisation() {
        let img = Array3::from_elem((3, 2, 2), 0.485);
        let n = normalize_channels(&img, CHANNEL_MEAN, CHANNEL_STD);
        assert!(n.slice(s![0, .., ..]).iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn silence_gives_constant_floor() {
        let cfg = AudioConfig::default();
        let spec = preprocess_audio(&vec![0.0; 48_000], 16_000, &cfg).unwrap();
        assert_eq!(spec.dim(), (1, 257, 297));
        assert!(spec.iter().all(|&v| v == 1e-5f64.ln()));
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let cfg = AudioConfig::default();
        let spec = preprocess_audio(&tone(440.0, 3.0, 16_000), 16_000, &cfg).unwrap();
        let expected = (440.0f64 / (16_000.0 / 512.0)).round() as usize;
        for t in 0..spec.dim().2 {
            let col = spec.slice(s![0, .., t]);
            let argmax = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, expected);
        }
    }

    #[test]
    fn shape_fixed_for_any_length_and_rate() {
        let cfg = AudioConfig::default();
        for (secs, sr) in [(3.0, 16_000), (1.3, 16_000), (5.0, 16_000), (3.0, 44_100)] {
            let spec = preprocess_audio(&tone(300.0, secs, sr), sr, &cfg).unwrap();
            assert_eq!(spec.dim(), (1, 257, 297));
        }
        assert!(preprocess_audio(&[], 16_000, &cfg).is_err());
    }

    fn spec_with(n: usize, duet: bool, distractor: f64) -> SyntheticSpec {
        SyntheticSpec {
            seed: 3,
            n_clips: n,
            duet,
            silent_distractor_prob: distractor,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&spec_with(4, false, 0.5)).unwrap();
        let b = generate_synthetic(&spec_with(4, false, 0.5)).unwrap();
        assert_eq!(a, b);
        // Earlier clips do not depend on how many are generated.
        let c = generate_synthetic(&spec_with(2, false, 0.5)).unwrap();
        assert_eq!(&a[..2], &c[..]);
    }

    #[test]
    fn no_distractors_means_one_shape() {
        for clip in generate_synthetic(&spec_with(6, false, 0.0)).unwrap() {
            assert!(clip.silent_objects.is_empty());
            let b = &clip.gt_boxes[0];
            // Every strongly coloured pixel lies inside the sounding box.
            let (_, h, w) = clip.image.dim();
            for y in 0..h {
                for x in 0..w {
                    let px: Vec<f64> = (0..3).map(|c| clip.image[[c, y, x]]).collect();
                    let spread = px.iter().cloned().fold(0.0, f64::max) - px.iter().cloned().fold(1.0, f64::min);
                    if spread > 0.4 {
                        assert!((x as f64) >= b.x0 && (x as f64) < b.x1 && (y as f64) >= b.y0 && (y as f64) < b.y1);
                    }
                }
            }
        }
    }

    #[test]
    fn duet_boxes_are_in_separate_halves() {
        for clip in generate_synthetic(&spec_with(5, true, 0.5)).unwrap() {
            assert_eq!(clip.image.dim(), (3, 224, 448));
            assert_eq!(clip.k, 2);
            assert_eq!(clip.gt_boxes.len(), 2);
            assert_ne!(clip.class_labels[0], clip.class_labels[1]);
            let (l, r) = (&clip.gt_boxes[0], &clip.gt_boxes[1]);
            assert!(l.x1 <= r.x0);
            clip.validate().unwrap();
        }
    }

    #[test]
    fn duet_mixing_rules() {
        let clips = generate_synthetic(&spec_with(2, false, 0.0)).unwrap();
        let mut b = clips[1].clone();
        b.gt_boxes[0] = GtBox {
            class: b.class_labels[0].clone(),
            x0: 10.0,
            y0: 10.0,
            x1: 50.0,
            y1: 50.0,
        };
        let d = mix_duet(&clips[0], &b).unwrap();
        assert_eq!(d.image.dim(), (3, 224, 448));
        assert_eq!(d.gt_boxes[1], GtBox { class: b.class_labels[0].clone(), x0: 234.0, y0: 10.0, x1: 274.0, y1: 50.0 });

        let cfg = AudioConfig::default();
        let spectrum = |c: &AVClip| match &c.audio {
            AudioData::Waveform { samples, sample_rate } => preprocess_audio(samples, *sample_rate, &cfg).unwrap(),
            _ => unreachable!(),
        };
        let ab = spectrum(&mix_duet(&clips[0], &clips[1]).unwrap());
        let ba = spectrum(&mix_duet(&clips[1], &clips[0]).unwrap());
        assert!((&ab - &ba).iter().all(|d| d.abs() < 1e-6));

        let mut silent = clips[1].clone();
        silent.audio = AudioData::Waveform { samples: vec![0.0; 48_000], sample_rate: 16_000 };
        let with_silence = spectrum(&mix_duet(&clips[0], &silent).unwrap());
        let mut alone = match &clips[0].audio {
            AudioData::Waveform { samples, .. } => samples.clone(),
            _ => unreachable!(),
        };
        peak_normalize(&mut alone);
        let direct = preprocess_audio(&alone, 16_000, &cfg).unwrap();
        assert!((&with_silence - &direct).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn class_balance_is_plausible() {
        let clips = generate_synthetic(&spec_with(300, false, 0.5)).unwrap();
        for class in ["circle", "square", "triangle"] {
            let n = clips.iter().filter(|c| c.class_labels[0] == class).count() as f64;
            // 100 expected, binomial sd ~ 8.2; allow 4 sd.
            assert!((n - 100.0).abs() < 33.0, "{class}: {n}");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate_synthetic(&spec_with(3, true, 0.5)).unwrap();
        let manifest = write_dataset(dir.path(), &clips).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded, clips);
    }

    #[test]
    fn corrupt_image_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate_synthetic(&spec_with(1, false, 0.0)).unwrap();
        let manifest = write_dataset(dir.path(), &clips).unwrap();
        fs::write(dir.path().join("images/clip_00000.png"), b"not a png").unwrap();
        match load_dataset(&manifest) {
            Err(Error::Ingestion { clip_id, .. }) => assert_eq!(clip_id, "clip_00000"),
            other => panic!("{other:?}"),
        }
    }
}
