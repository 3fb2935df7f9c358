//! Waveforms, sweep synthesis, linear convolution and the STFT magnitude front-end.

use std::f64::consts::PI;
use std::path::Path;

use echodepth_tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::echo::Rir;
use crate::error::{Error, Result};

/// Multichannel audio at a fixed sample rate. All channels share one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::InvalidArgument(format!("waveform needs 1 or 2 channels, got {}", channels.len())));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(Error::InvalidArgument("waveform channels differ in length".into()));
        }
        Ok(Waveform { channels, sample_rate })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![left, right], sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    /// Rounds every sample through `f32`, making the waveform exactly representable on disk.
    pub fn quantized(&self) -> Waveform {
        Waveform {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&v| v as f32 as f64).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Writes 32-bit float PCM WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: self.channels.len() as u16,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for i in 0..self.len() {
            for c in &self.channels {
                w.write_sample(c[i] as f32).map_err(wav_err)?;
            }
        }
        w.finalize().map_err(wav_err)
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let wav_err = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut r = hound::WavReader::open(path).map_err(wav_err)?;
        let spec = r.spec();
        if spec.sample_format != hound::SampleFormat::Float || spec.bits_per_sample != 32 {
            return Err(Error::format(path, "expected 32-bit float PCM"));
        }
        let n_ch = spec.channels as usize;
        let mut channels = vec![Vec::new(); n_ch];
        for (i, s) in r.samples::<f32>().enumerate() {
            channels[i % n_ch].push(s.map_err(wav_err)? as f64);
        }
        Waveform::new(channels, spec.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    /// All-ones window; used to check energy bookkeeping.
    Rectangular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
    pub duration_ms: f64,
    pub window: WindowKind,
}

impl SpectrogramConfig {
    /// 44.1 kHz, 60 ms, window 64, hop 16, 512-point FFT.
    pub fn replica() -> Self {
        SpectrogramConfig {
            window_len: 64,
            hop_len: 16,
            n_fft: 512,
            sample_rate: 44_100,
            duration_ms: 60.0,
            window: WindowKind::Hann,
        }
    }

    /// 16 kHz, 60 ms, window 32, hop 8, 512-point FFT.
    pub fn matterport() -> Self {
        SpectrogramConfig {
            window_len: 32,
            hop_len: 8,
            n_fft: 512,
            sample_rate: 16_000,
            duration_ms: 60.0,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.window_len > self.n_fft {
            return Err(Error::Config(format!(
                "window length {} must be in 1..={}",
                self.window_len, self.n_fft
            )));
        }
        if self.hop_len == 0 {
            return Err(Error::Config("hop length must be at least 1".into()));
        }
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!("n_fft {} must be even", self.n_fft)));
        }
        if self.sample_rate == 0 || !(self.duration_ms > 0.0) {
            return Err(Error::Config("sample rate and duration must be positive".into()));
        }
        Ok(())
    }

    /// `round(duration_ms · fs / 1000)`.
    pub fn num_samples(&self) -> usize {
        (self.duration_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self) -> usize {
        self.num_samples() / self.hop_len + 1
    }

    /// `(channels, P, Q)` of the spectrogram this config produces.
    pub fn shape(&self) -> [usize; 3] {
        [2, self.freq_bins(), self.frames()]
    }

    /// Analysis window of `window_len` samples centered in an `n_fft` frame.
    pub fn padded_window(&self) -> Vec<f64> {
        let core = match self.window {
            WindowKind::Hann => hanning(self.window_len).expect("window_len validated"),
            WindowKind::Rectangular => vec![1.0; self.window_len],
        };
        let mut w = vec![0.0; self.n_fft];
        let offset = (self.n_fft - self.window_len) / 2;
        w[offset..offset + self.window_len].copy_from_slice(&core);
        w
    }
}

/// Magnitude STFT, channels × frequency bins × frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    pub config: SpectrogramConfig,
}

impl Spectrogram {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Symmetric Hann window, `w[k] = 0.5·(1 − cos(2πk/(n−1)))`.
pub fn hanning(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::InvalidArgument("hanning window length must be positive".into())),
        1 => Ok(vec![1.0]),
        _ => Ok((0..n)
            .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / (n - 1) as f64).cos()))
            .collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chirp {
    pub wave: Waveform,
    /// Upper sweep frequency actually used.
    pub f1_effective: f64,
    /// Set when the requested upper frequency exceeded Nyquist and was clamped.
    pub nyquist_clamped: bool,
}

/// Linear-frequency sweep from `f0` to `f1`, unit amplitude, zero initial phase.
pub fn chirp(duration_s: f64, f0: f64, f1: f64, sample_rate: u32) -> Result<Chirp> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(duration_s > 0.0) || sample_rate == 0 {
        return Err(Error::InvalidArgument("chirp duration and sample rate must be positive".into()));
    }
    if !(f0 > 0.0) || f1 < f0 || f0 > nyquist {
        return Err(Error::InvalidArgument(format!(
            "chirp needs 0 < f0 <= f1 and f0 <= Nyquist ({nyquist} Hz), got f0={f0}, f1={f1}"
        )));
    }
    let nyquist_clamped = f1 > nyquist;
    let f1_effective = f1.min(nyquist);
    let n = (duration_s * sample_rate as f64).round() as usize;
    let rate = (f1_effective - f0) / duration_s;
    let fs = sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect();
    Ok(Chirp {
        wave: Waveform::mono(samples, sample_rate)?,
        f1_effective,
        nyquist_clamped,
    })
}

/// Full linear convolution of `signal` with each RIR channel. A mono signal is
/// fed to both channels. With `length = Some(n)` the output is truncated or
/// zero-padded to exactly `n` samples.
pub fn convolve(signal: &Waveform, kernel: &Rir, length: Option<usize>) -> Result<Waveform> {
    if kernel.is_empty() {
        return Err(Error::InvalidArgument("convolution kernel is empty".into()));
    }
    if signal.is_empty() {
        return Err(Error::InvalidArgument("convolution signal is empty".into()));
    }
    let full = signal.len() + kernel.len() - 1;
    let out_len = length.unwrap_or(full);
    let taps = [kernel.left(), kernel.right()];
    let mut out = Vec::with_capacity(2);
    for (ch, tap) in taps.iter().enumerate() {
        let x = signal.channel(ch.min(signal.num_channels() - 1));
        let mut y = vec![0.0; out_len];
        for (j, &h) in tap.iter().enumerate() {
            if h == 0.0 || j >= out_len {
                continue;
            }
            let end = (j + x.len()).min(out_len);
            for (yi, xi) in y[j..end].iter_mut().zip(x) {
                *yi += h * xi;
            }
        }
        out.push(y);
    }
    let right = out.pop().expect("two channels");
    let left = out.pop().expect("two channels");
    Waveform::stereo(left, right, signal.sample_rate())
}

/// Magnitudes of the first `n/2 + 1` DFT bins of an already-windowed frame.
pub fn magnitude_spectrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Center-aligned magnitude STFT of a stereo waveform.
///
/// Each channel is reflect-padded by `n_fft/2` on both ends and framed with
/// hop `hop_len`, giving `floor(L/hop) + 1` frames for `L` input samples.
pub fn stft_magnitude(wave: &Waveform, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if wave.num_channels() != 2 {
        return Err(Error::InvalidArgument(format!(
            "spectrogram needs 2 channels, got {}",
            wave.num_channels()
        )));
    }
    if wave.len() != cfg.num_samples() {
        return Err(Error::InvalidArgument(format!(
            "waveform has {} samples, config expects {}",
            wave.len(),
            cfg.num_samples()
        )));
    }
    let pad = cfg.n_fft / 2;
    if wave.len() <= pad {
        return Err(Error::InvalidArgument(format!(
            "waveform of {} samples is too short to reflect-pad by {pad}",
            wave.len()
        )));
    }
    let window = cfg.padded_window();
    let [_, p, q] = cfg.shape();
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let mut values = vec![0.0; 2 * p * q];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    for ch in 0..2 {
        let padded = reflect_pad(wave.channel(ch), pad);
        for t in 0..q {
            let start = t * cfg.hop_len;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            for f in 0..p {
                values[(ch * p + f) * q + t] = buf[f].norm();
            }
        }
    }
    Ok(Spectrogram {
        values: Tensor::new(&[2, p, q], values)?,
        config: cfg.clone(),
    })
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| x[i]));
    out.extend_from_slice(x);
    out.extend((1..=pad).map(|i| x[n - 1 - i]));
    out
}
