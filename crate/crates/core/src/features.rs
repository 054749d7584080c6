//! Acoustic features: log-Mel filterbank extraction, oracle-VAD silence
//! removal, and the bidirectional map back to the original timeline.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{err, Result};
use crate::fft::power_spectrum;
use crate::tensor::{Scalar, Tensor};

/// PCM audio normalized to [-1, 1], one sample vector per channel.
#[derive(Debug, Clone)]
pub struct AudioSignal {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(err!(InvalidInput, "sample rate must be positive"));
        }
        if channels.is_empty() {
            return Err(err!(InvalidInput, "audio needs at least one channel"));
        }
        let len = channels[0].len();
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != len {
                return Err(err!(InvalidInput, "channel {i} length differs"));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(err!(InvalidInput, "channel {i} contains non-finite samples"));
            }
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.len_samples() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }
}

/// Log-Mel filterbank configuration. Defaults: 80 mel bins over 25 ms
/// Hamming-windowed frames with a 10 ms shift at 16 kHz, natural-log
/// energies floored at 1e-10.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub num_mels: usize,
    pub frame_length_s: f64,
    pub frame_shift_s: f64,
    pub low_freq_hz: f64,
    pub high_freq_hz: f64,
    pub floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            num_mels: 80,
            frame_length_s: 0.025,
            frame_shift_s: 0.010,
            low_freq_hz: 0.0,
            high_freq_hz: 8_000.0,
            floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn frame_samples(&self) -> usize {
        (self.frame_length_s * self.sample_rate as f64).round() as usize
    }
    pub fn shift_samples(&self) -> usize {
        (self.frame_shift_s * self.sample_rate as f64).round() as usize
    }
    pub fn n_fft(&self) -> usize {
        self.frame_samples().next_power_of_two()
    }
}

/// H x L matrix of log-Mel energies (mel bins by frames).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub values: Tensor<T>,
    pub frame_shift_s: f64,
    pub frame_length_s: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn num_mels(&self) -> usize {
        self.values.dim(0)
    }
    pub fn num_frames(&self) -> usize {
        self.values.dim(1)
    }
    /// Mel bin `h` of frame `l`.
    pub fn at(&self, h: usize, l: usize) -> T {
        self.values.at2(h, l)
    }
    pub fn empty(num_mels: usize, config: &FbankConfig) -> Self {
        Self {
            values: Tensor::zeros(&[num_mels, 0]),
            frame_shift_s: config.frame_shift_s,
            frame_length_s: config.frame_length_s,
        }
    }
    /// Columns `start..end` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        let (h, l) = (self.num_mels(), self.num_frames());
        if start > end || end > l {
            return Err(err!(Range, "frame slice [{start}, {end}) of {l}"));
        }
        let mut data = Vec::with_capacity(h * (end - start));
        for hi in 0..h {
            data.extend_from_slice(&self.values.row(hi)[start..end]);
        }
        Ok(Self {
            values: Tensor::new(&[h, end - start], data)?,
            frame_shift_s: self.frame_shift_s,
            frame_length_s: self.frame_length_s,
        })
    }
    /// Append another matrix on the frame axis (must share the mel axis).
    pub fn append(&mut self, other: &Self) -> Result<()> {
        if other.num_frames() == 0 {
            return Ok(());
        }
        if self.num_mels() != other.num_mels() {
            return Err(err!(Shape, "mel axis {} vs {}", self.num_mels(), other.num_mels()));
        }
        let (h, l0, l1) = (self.num_mels(), self.num_frames(), other.num_frames());
        let mut data = Vec::with_capacity(h * (l0 + l1));
        for hi in 0..h {
            data.extend_from_slice(self.values.row(hi));
            data.extend_from_slice(other.values.row(hi));
        }
        self.values = Tensor::new(&[h, l0 + l1], data)?;
        Ok(())
    }
}

/// Triangular mel filterbank on the HTK mel scale: each filter is a list of
/// (fft_bin, weight) pairs.
fn mel_filters(config: &FbankConfig) -> Vec<Vec<(usize, f64)>> {
    fn hz_to_mel(hz: f64) -> f64 {
        2595.0 * (1.0 + hz / 700.0).log10()
    }
    fn mel_to_hz(mel: f64) -> f64 {
        700.0 * (10f64.powf(mel / 2595.0) - 1.0)
    }
    let n_fft = config.n_fft();
    let num_bins = n_fft / 2 + 1;
    let mel_lo = hz_to_mel(config.low_freq_hz);
    let mel_hi = hz_to_mel(config.high_freq_hz);
    let centers: Vec<f64> = (0..config.num_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.num_mels + 1) as f64))
        .collect();
    let hz_per_bin = config.sample_rate as f64 / n_fft as f64;
    (0..config.num_mels)
        .map(|m| {
            let (left, center, right) = (centers[m], centers[m + 1], centers[m + 2]);
            let mut taps = Vec::new();
            for bin in 0..num_bins {
                let f = bin as f64 * hz_per_bin;
                let w = if f > left && f < center {
                    (f - left) / (center - left)
                } else if f >= center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((bin, w));
                }
            }
            taps
        })
        .collect()
}

/// Extract log-Mel filterbank energies from a single 16 kHz channel.
///
/// Frame count follows `floor((samples - frame)/shift) + 1`; trailing
/// samples that cannot fill a frame are dropped.
pub fn compute_fbank<T: Scalar>(samples: &[f32], config: &FbankConfig) -> Result<FeatureMatrix<T>> {
    if config.sample_rate != 16_000 {
        return Err(err!(
            Config,
            "filterbank expects 16 kHz input, got {} (resample first)",
            config.sample_rate
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(err!(InvalidInput, "audio contains non-finite samples"));
    }
    let frame = config.frame_samples();
    let shift = config.shift_samples();
    if samples.len() < frame {
        return Err(err!(
            InvalidInput,
            "signal of {} samples is shorter than one {} sample frame",
            samples.len(),
            frame
        ));
    }
    let num_frames = (samples.len() - frame) / shift + 1;
    let filters = mel_filters(config);
    let window: Vec<T> = (0..frame)
        .map(|i| {
            T::from_f64(
                0.54 - 0.46 * (2.0 * core::f64::consts::PI * i as f64 / (frame - 1) as f64).cos(),
            )
        })
        .collect();
    let n_fft = config.n_fft();
    let floor = T::from_f64(config.floor);
    let mut out = vec![T::zero(); config.num_mels * num_frames];
    let mut buf = vec![T::zero(); frame];
    for fi in 0..num_frames {
        let start = fi * shift;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = T::from_f64(samples[start + i] as f64) * window[i];
        }
        let power = power_spectrum(&buf, n_fft);
        for (m, taps) in filters.iter().enumerate() {
            let mut e = T::zero();
            for &(bin, w) in taps {
                e += power[bin] * T::from_f64(w);
            }
            let e = if e > floor { e } else { floor };
            out[m * num_frames + fi] = e.ln();
        }
    }
    Ok(FeatureMatrix {
        values: Tensor::new(&[config.num_mels, num_frames], out)?,
        frame_shift_s: config.frame_shift_s,
        frame_length_s: config.frame_length_s,
    })
}

/// Sorted, disjoint speech intervals in seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VadSegments {
    intervals: Vec<(f64, f64)>,
}

impl VadSegments {
    /// Build from (onset, offset) pairs; overlapping or touching intervals
    /// are merged.
    pub fn new(mut intervals: Vec<(f64, f64)>) -> Result<Self> {
        for &(on, off) in &intervals {
            if !(on < off) || on < 0.0 {
                return Err(err!(InvalidInput, "bad vad interval ({on}, {off})"));
            }
        }
        intervals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
        for (on, off) in intervals {
            match merged.last_mut() {
                Some(last) if on <= last.1 => last.1 = last.1.max(off),
                _ => merged.push((on, off)),
            }
        }
        Ok(Self { intervals: merged })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals
            .iter()
            .any(|&(on, off)| t >= on && t < off)
    }

    pub fn total_speech_s(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }
}

/// Monotone map from post-silence-removal frame indices back to original
/// frame indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimelineMap {
    original: Vec<usize>,
}

impl TimelineMap {
    pub fn identity(n: usize) -> Self {
        Self {
            original: (0..n).collect(),
        }
    }

    pub fn from_indices(original: Vec<usize>) -> Result<Self> {
        if original.windows(2).any(|w| w[0] >= w[1]) {
            return Err(err!(InvalidInput, "timeline map must be strictly increasing"));
        }
        Ok(Self { original })
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    /// Original frame index for a post-removal index.
    pub fn to_original(&self, idx: usize) -> Result<usize> {
        self.original
            .get(idx)
            .copied()
            .ok_or_else(|| err!(Range, "index {idx} outside map domain of {}", self.original.len()))
    }

    /// Post-removal index for an original frame, if that frame was kept.
    pub fn to_removed(&self, original_idx: usize) -> Option<usize> {
        self.original.binary_search(&original_idx).ok()
    }

    /// Append another map shifted to start at `original_offset`.
    pub fn extend_with(&mut self, other: &TimelineMap, original_offset: usize) -> Result<()> {
        for &idx in &other.original {
            let mapped = idx + original_offset;
            if let Some(&last) = self.original.last() {
                if mapped <= last {
                    return Err(err!(InvalidInput, "timeline extension not increasing"));
                }
            }
            self.original.push(mapped);
        }
        Ok(())
    }
}

/// Keep exactly the frames whose centers fall inside a VAD interval.
pub fn remove_silence<T: Scalar>(
    features: &FeatureMatrix<T>,
    vad: &VadSegments,
) -> Result<(FeatureMatrix<T>, TimelineMap)> {
    let h = features.num_mels();
    let l = features.num_frames();
    let mut keep = Vec::new();
    for i in 0..l {
        let center = i as f64 * features.frame_shift_s + features.frame_length_s / 2.0;
        if vad.contains(center) {
            keep.push(i);
        }
    }
    let mut data = Vec::with_capacity(h * keep.len());
    for hi in 0..h {
        let row = features.values.row(hi);
        data.extend(keep.iter().map(|&i| row[i]));
    }
    Ok((
        FeatureMatrix {
            values: Tensor::new(&[h, keep.len()], data)?,
            frame_shift_s: features.frame_shift_s,
            frame_length_s: features.frame_length_s,
        },
        TimelineMap::from_indices(keep)?,
    ))
}

/// Polyphase-style rational resampler using a windowed-sinc kernel.
/// Used to bring non-16 kHz audio to the filterbank rate.
pub fn resample(samples: &[f32], from_hz: u32, to_hz: u32) -> Result<Vec<f32>> {
    if from_hz == 0 || to_hz == 0 {
        return Err(err!(InvalidInput, "zero sample rate"));
    }
    if from_hz == to_hz {
        return Ok(samples.to_vec());
    }
    fn gcd(a: u32, b: u32) -> u32 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(from_hz, to_hz);
    let up = (to_hz / g) as usize;
    let down = (from_hz / g) as usize;
    let out_len = samples.len() * up / down;
    // anti-alias cutoff at the lower Nyquist, 16 zero-crossings per side
    let cutoff = 0.5 / up.max(down) as f64;
    let half_taps = 16 * up.max(down);
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        // position of output sample n on the upsampled grid
        let pos = n * down;
        let mut acc = 0.0f64;
        let lo = pos.saturating_sub(half_taps);
        let hi = (pos + half_taps).min(samples.len() * up);
        let mut k = lo + (up - (lo % up)) % up; // first multiple of `up` >= lo
        while k < hi {
            let x = samples[k / up] as f64;
            let d = pos as f64 - k as f64;
            let t = 2.0 * core::f64::consts::PI * cutoff * d;
            let sinc = if d == 0.0 { 1.0 } else { t.sin() / t };
            // Hann window over the kernel support
            let w = 0.5 + 0.5 * (core::f64::consts::PI * d / half_taps as f64).cos();
            acc += x * sinc * w;
            k += up;
        }
        out.push((acc * 2.0 * cutoff * up as f64) as f32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_second_gives_98_frames() {
        let samples = vec![0.01f32; 16_000];
        let f = compute_fbank::<f32>(&samples, &FbankConfig::default()).unwrap();
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.num_mels(), 80);
    }

    #[test]
    fn all_zero_signal_hits_the_log_floor() {
        let samples = vec![0.0f32; 4000];
        let cfg = FbankConfig::default();
        let f = compute_fbank::<f64>(&samples, &cfg).unwrap();
        let want = cfg.floor.ln();
        for &v in f.values.data() {
            assert_eq!(v, want);
        }
    }

    #[test]
    fn short_or_nan_input_is_rejected() {
        let cfg = FbankConfig::default();
        assert!(compute_fbank::<f32>(&vec![0.0; 100], &cfg).is_err());
        assert!(compute_fbank::<f32>(&vec![f32::NAN; 1000], &cfg).is_err());
    }

    #[test]
    fn determinism() {
        let samples: Vec<f32> = (0..8000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        let cfg = FbankConfig::default();
        let a = compute_fbank::<f32>(&samples, &cfg).unwrap();
        let b = compute_fbank::<f32>(&samples, &cfg).unwrap();
        assert_eq!(a, b);
    }

    /// Independent oracle: naive DFT plus independently coded mel weights,
    /// checking where the per-frame energy peaks for a pure tone.
    #[test]
    fn pure_tone_peaks_in_the_right_mel_bin() {
        let cfg = FbankConfig::default();
        let hz = 1000.0f64;
        let samples: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin() as f32 * 0.5)
            .collect();
        let f = compute_fbank::<f64>(&samples, &cfg).unwrap();

        // oracle: one frame, naive DFT, hand mel triangle evaluation
        let frame = cfg.frame_samples();
        let n_fft = cfg.n_fft();
        let windowed: Vec<f64> = (0..frame)
            .map(|i| {
                let w = 0.54
                    - 0.46
                        * (2.0 * std::f64::consts::PI * i as f64 / (frame - 1) as f64).cos();
                samples[i] as f64 * w
            })
            .collect();
        let hz2mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let mel2hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let mel_hi = hz2mel(cfg.high_freq_hz);
        let edge = |i: usize| mel2hz(mel_hi * i as f64 / (cfg.num_mels + 1) as f64);
        let mut best = (0usize, f64::MIN);
        for m in 0..cfg.num_mels {
            let (l, c, r) = (edge(m), edge(m + 1), edge(m + 2));
            let mut e = 0.0;
            for bin in 0..=n_fft / 2 {
                let fhz = bin as f64 * 16_000.0 / n_fft as f64;
                let w = if fhz > l && fhz < c {
                    (fhz - l) / (c - l)
                } else if fhz >= c && fhz < r {
                    (r - fhz) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    let mut re = 0.0;
                    let mut im = 0.0;
                    for (t, &x) in windowed.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * (bin * t) as f64 / n_fft as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    e += w * (re * re + im * im);
                }
            }
            if e > best.1 {
                best = (m, e);
            }
        }
        // production path: argmax per frame must equal the oracle bin
        for fi in 0..f.num_frames() {
            let mut arg = 0;
            let mut mx = f64::MIN;
            for m in 0..cfg.num_mels {
                if f.at(m, fi) > mx {
                    mx = f.at(m, fi);
                    arg = m;
                }
            }
            assert_eq!(arg, best.0, "frame {fi}");
        }
    }

    #[test]
    fn silence_removal_cases() {
        let cfg = FbankConfig::default();
        // 300 frames of fake features
        let l = 300;
        let data: Vec<f32> = (0..80 * l).map(|i| i as f32).collect();
        let feats = FeatureMatrix::<f32> {
            values: Tensor::new(&[80, l], data).unwrap(),
            frame_shift_s: cfg.frame_shift_s,
            frame_length_s: cfg.frame_length_s,
        };
        // empty vad -> empty output
        let (out, map) = remove_silence(&feats, &VadSegments::empty()).unwrap();
        assert_eq!(out.num_frames(), 0);
        assert!(map.is_empty());
        // full coverage -> identity
        let full = VadSegments::new(vec![(0.0, 10.0)]).unwrap();
        let (out, map) = remove_silence(&feats, &full).unwrap();
        assert_eq!(out, feats);
        assert_eq!(map, TimelineMap::identity(l));
        // frames 0..100 and 200..300 kept: centers are at 10ms*i + 12.5ms,
        // so the interval edges sit between frame 99/100 and 199/200 centers
        let vad = VadSegments::new(vec![(0.0, 1.01), (2.01, 3.01)]).unwrap();
        let (out, map) = remove_silence(&feats, &vad).unwrap();
        assert_eq!(out.num_frames(), 200);
        assert_eq!(map.to_original(0).unwrap(), 0);
        assert_eq!(map.to_original(99).unwrap(), 99);
        assert_eq!(map.to_original(100).unwrap(), 200);
        assert_eq!(map.to_original(150).unwrap(), 250);
        assert!(map.to_original(200).is_err());
        // strictly increasing + roundtrip
        let mut prev = None;
        for i in 0..map.len() {
            let o = map.to_original(i).unwrap();
            if let Some(p) = prev {
                assert!(o > p);
            }
            assert_eq!(map.to_removed(o), Some(i));
            prev = Some(o);
        }
    }

    #[test]
    fn vad_merging_and_validation() {
        let v = VadSegments::new(vec![(1.0, 2.0), (1.5, 3.0), (5.0, 6.0)]).unwrap();
        assert_eq!(v.intervals(), &[(1.0, 3.0), (5.0, 6.0)]);
        assert!(VadSegments::new(vec![(2.0, 1.0)]).is_err());
        assert!(VadSegments::new(vec![(-1.0, 1.0)]).is_err());
    }

    #[test]
    fn resample_preserves_a_tone() {
        // 440 Hz at 8 kHz resampled to 16 kHz should still be a 440 Hz tone
        let from = 8000u32;
        let to = 16000u32;
        let samples: Vec<f32> = (0..8000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / from as f64).sin() as f32)
            .collect();
        let out = resample(&samples, from, to).unwrap();
        assert_eq!(out.len(), 16000);
        // compare against the ideal tone away from the edges
        for i in 2000..14000 {
            let want = (2.0 * std::f64::consts::PI * 440.0 * i as f64 / to as f64).sin() as f32;
            assert!(
                (out[i] - want).abs() < 0.05,
                "sample {i}: {} vs {want}",
                out[i]
            );
        }
    }
}
