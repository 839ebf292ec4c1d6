//! Frame-level prosodic analysis of mono waveforms: RMS energy,
//! autocorrelation F0 and mel cepstra, plus mean pooling into fixed-length
//! prosody embeddings.
//!
//! Every extractor slices the waveform the same way: frame `i` covers
//! samples `[i * hop, i * hop + frame_len)` and only whole frames are kept,
//! so a signal of `n` samples has `(n - frame_len) / hop + 1` frames.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{mean_pool_rows, Matrix, MeanStd, Vector};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Floor applied to mel band magnitudes before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    sample_rate: u32,
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::Validation(format!(
                "sample {pos} = {} lies outside [-1, 1]",
                samples[pos]
            )));
        }
        Ok(Self {
            sample_rate,
            samples,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    frame_len: usize,
    hop: usize,
}

impl FrameSpec {
    pub fn new(frame_len: usize, hop: usize) -> Result<Self> {
        if hop == 0 || hop > frame_len {
            return Err(Error::Parameter(format!(
                "frame spec needs 0 < hop <= frame_len, got frame_len {frame_len}, hop {hop}"
            )));
        }
        Ok(Self { frame_len, hop })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Number of whole frames in `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    fn frames<'a>(&self, w: &'a Waveform) -> Result<impl Iterator<Item = &'a [f64]> + use<'a>> {
        let n = self.frame_count(w.len());
        if n == 0 {
            return Err(Error::EmptyInput(format!(
                "waveform of {} samples is shorter than one {}-sample frame",
                w.len(),
                self.frame_len
            )));
        }
        let (len, hop) = (self.frame_len, self.hop);
        Ok((0..n).map(move |i| &w.samples[i * hop..i * hop + len]))
    }
}

impl Default for FrameSpec {
    /// 512-sample frames, 160-sample hop (10 ms at 16 kHz).
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 160,
        }
    }
}

/// Per-frame feature matrix, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures(Matrix);

impl FrameFeatures {
    pub fn new(values: Matrix) -> Self {
        Self(values)
    }

    pub fn n_frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Fixed-length utterance-level prosody vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyEmbedding(pub(crate) Vector);

impl ProsodyEmbedding {
    pub fn new(values: Vector) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn values(&self) -> &Vector {
        &self.0
    }
}

/// Per-frame pitch; `None` marks an unvoiced frame.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Track {
    frames: Vec<Option<f64>>,
}

impl F0Track {
    pub fn new(frames: Vec<Option<f64>>) -> Self {
        Self { frames }
    }

    pub fn frames(&self) -> &[Option<f64>] {
        &self.frames
    }

    pub fn voiced(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().flatten().copied()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced().count()
    }

    /// `n_frames x 1` matrix with `0.0` for unvoiced frames.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let data = self.frames.iter().map(|f| f.unwrap_or(0.0)).collect();
        Matrix::new(self.frames.len(), 1, data)
    }

    /// Inverse of [`F0Track::to_matrix`]: non-positive entries are unvoiced.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols() != 1 {
            return Err(Error::Dimension(format!(
                "an F0 track has one column, got {}",
                m.cols()
            )));
        }
        Ok(Self::new(
            m.as_slice()
                .iter()
                .map(|&v| (v > 0.0).then_some(v))
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Config {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum normalized autocorrelation peak for a frame to count as voiced.
    pub voicing_threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            f0_min: 50.0,
            f0_max: 500.0,
            voicing_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CepstralConfig {
    pub n_mels: usize,
    pub n_ceps: usize,
}

impl Default for CepstralConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            n_ceps: 13,
        }
    }
}

/// Decodes 16-bit PCM mono RIFF/WAVE; sample `s` maps to `s / 32768`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    // the file is readable, so decoder failures mean malformed content
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| wav_decode_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit {:?} (only 16-bit PCM is supported)",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_decode_error(path, e))?;
    Waveform::new(spec.sample_rate, samples)
}

/// Encodes `w` as 16-bit PCM mono, rounding `s * 32768` and saturating.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_decode_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::UnsupportedFormat(format!("{}", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Root-mean-square amplitude per frame, `n_frames x 1`.
pub fn frame_energy(w: &Waveform, spec: FrameSpec) -> Result<FrameFeatures> {
    let data: Vec<f64> = spec
        .frames(w)?
        .map(|f| (f.iter().map(|s| s * s).sum::<f64>() / f.len() as f64).sqrt())
        .collect();
    Ok(FrameFeatures(Matrix::new(data.len(), 1, data)?))
}

/// Normalized-autocorrelation pitch tracker.
///
/// Each frame is mean-removed and scored at every integer lag whose period
/// falls inside `[f0_min, f0_max]`. A frame is voiced when the best score
/// reaches the voicing threshold. Among local peaks within
/// [`SUBHARMONIC_RATIO`] of the best score the shortest lag wins, so a
/// periodic frame is not reported at a sub-multiple of its pitch.
pub fn estimate_f0(w: &Waveform, spec: FrameSpec, config: &F0Config) -> Result<F0Track> {
    let F0Config {
        f0_min,
        f0_max,
        voicing_threshold,
    } = *config;
    if !(f0_min > 0.0 && f0_min < f0_max && f0_max.is_finite()) {
        return Err(Error::Parameter(format!(
            "F0 band must satisfy 0 < f0_min < f0_max, got [{f0_min}, {f0_max}]"
        )));
    }
    let sr = f64::from(w.sample_rate);
    if sr / f0_min > spec.frame_len as f64 {
        return Err(Error::Parameter(format!(
            "a {f0_min} Hz period ({} samples) does not fit in a {}-sample frame",
            sr / f0_min,
            spec.frame_len
        )));
    }
    let lag_min = (sr / f0_max).ceil().max(1.0) as usize;
    let lag_max = ((sr / f0_min).floor() as usize).min(spec.frame_len - 1);
    if lag_min > lag_max {
        return Err(Error::Parameter(format!(
            "F0 band [{f0_min}, {f0_max}] Hz contains no integer lag at {sr} Hz"
        )));
    }

    let frames = spec
        .frames(w)?
        .map(|frame| {
            pick_pitch(frame, lag_min, lag_max, voicing_threshold).map(|lag| sr / lag as f64)
        })
        .collect();
    Ok(F0Track::new(frames))
}

pub const SUBHARMONIC_RATIO: f64 = 0.9;

fn pick_pitch(frame: &[f64], lag_min: usize, lag_max: usize, threshold: f64) -> Option<usize> {
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|s| s - mean).collect();
    let lo = lag_min.saturating_sub(1).max(1);
    let hi = (lag_max + 1).min(x.len() - 1);
    let scores: Vec<f64> = (lo..=hi).map(|lag| normalized_autocorr(&x, lag)).collect();
    let at = |lag: usize| scores[lag - lo];

    let (best_lag, best) = (lag_min..=lag_max).map(|lag| (lag, at(lag))).fold(
        (lag_min, f64::NEG_INFINITY),
        |acc, cur| if cur.1 > acc.1 { cur } else { acc },
    );
    if best < threshold || best.is_nan() {
        return None;
    }
    let is_peak = |lag: usize| {
        let s = at(lag);
        (lag == lo || s >= at(lag - 1)) && (lag == hi || s >= at(lag + 1))
    };
    (lag_min..best_lag)
        .find(|&lag| at(lag) >= SUBHARMONIC_RATIO * best && is_peak(lag))
        .or(Some(best_lag))
}

fn normalized_autocorr(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (head, tail) = (&x[..n], &x[lag..]);
    let cross: f64 = head.iter().zip(tail).map(|(a, b)| a * b).sum();
    let e0: f64 = head.iter().map(|a| a * a).sum();
    let e1: f64 = tail.iter().map(|b| b * b).sum();
    let denom = (e0 * e1).sqrt();
    if denom > 0.0 {
        cross / denom
    } else {
        0.0
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning `0..sr/2`, evaluated at
/// the `n_fft / 2 + 1` bin centre frequencies. Rows are filters.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<Matrix> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let bank = Matrix::from_fn(n_mels, n_bins, |m, k| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
    })?;
    if let Some(empty) = bank
        .row_iter()
        .position(|row| row.iter().all(|&w| w == 0.0))
    {
        return Err(Error::Parameter(format!(
            "mel filter {empty} of {n_mels} covers no FFT bin at n_fft = {n_fft}; use fewer mel bands or longer frames"
        )));
    }
    Ok(bank)
}

/// Orthonormal DCT-II basis, `n_out x n_in`.
pub fn dct_matrix(n_in: usize, n_out: usize) -> Result<Matrix> {
    let n = n_in as f64;
    Matrix::from_fn(n_out, n_in, |k, i| {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos()
    })
}

/// Periodic Hann window.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Mel-frequency cepstra per frame, `n_frames x n_ceps`, coefficient 0 first.
///
/// Frames are Hann-windowed and zero-padded to the next power of two before
/// the FFT. The magnitude spectrum goes through the mel filterbank, a
/// floored natural log, and an orthonormal DCT-II.
pub fn mel_cepstra(
    w: &Waveform,
    spec: FrameSpec,
    config: &CepstralConfig,
) -> Result<FrameFeatures> {
    let CepstralConfig { n_mels, n_ceps } = *config;
    if n_mels == 0 || n_ceps == 0 || n_ceps > n_mels {
        return Err(Error::Parameter(format!(
            "need 1 <= n_ceps <= n_mels, got n_ceps {n_ceps}, n_mels {n_mels}"
        )));
    }
    let n_fft = spec.frame_len.next_power_of_two();
    let bank = mel_filterbank(w.sample_rate, n_fft, n_mels)?;
    let dct = dct_matrix(n_mels, n_ceps)?;
    let window = hann(spec.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut log_mel = vec![0.0; n_mels];
    let mut out = Vec::new();
    let mut n_frames = 0;
    for frame in spec.frames(w)? {
        for (slot, (s, h)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(s * h, 0.0);
        }
        buf[spec.frame_len..].fill(Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (band, weights) in log_mel.iter_mut().zip(bank.row_iter()) {
            let e: f64 = weights
                .iter()
                .zip(&buf[..n_bins])
                .map(|(wt, c)| wt * c.norm())
                .sum();
            *band = e.max(LOG_FLOOR).ln();
        }
        for basis in dct.row_iter() {
            out.push(basis.iter().zip(&log_mel).map(|(b, v)| b * v).sum());
        }
        n_frames += 1;
    }
    Ok(FrameFeatures(Matrix::new(n_frames, n_ceps, out)?))
}

/// Mean over frames.
pub fn pool_frames(f: &FrameFeatures) -> Result<ProsodyEmbedding> {
    mean_pool_rows(&f.0).map(ProsodyEmbedding)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProsodyReport {
    /// Over voiced frames only; absent when nothing is voiced.
    pub pitch: Option<MeanStd>,
    pub energy: MeanStd,
    pub voiced_count: usize,
    pub frame_count: usize,
}

/// Population mean/std of voiced F0 and of frame energy.
pub fn prosody_stats(f0: &F0Track, energy: &FrameFeatures) -> ProsodyReport {
    let voiced: Vec<f64> = f0.voiced().collect();
    let energy_values: Vec<f64> = energy.values().as_slice().to_vec();
    ProsodyReport {
        pitch: MeanStd::of(&voiced),
        energy: MeanStd::of(&energy_values).expect("frame features have at least one frame"),
        voiced_count: voiced.len(),
        frame_count: energy.n_frames(),
    }
}
