//! Sampled complex-envelope buffers shared by every stage of the simulator.
//!
//! A [`SampleBuffer`] holds the complex envelope `a(t)` of a signal relative
//! to an absolute `center_frequency`; the physical field (or voltage) is
//! `Re{a(t) exp(j 2 pi f_c t)}`. Power is `mean |a|^2`: watts for optical
//! buffers, a 1-ohm volt-squared convention for electrical ones. Noise
//! densities follow the same convention, two-sided over the complex rate.

use crate::error::{Result, SimError};
use crate::fft::{bin_frequency, fft_in_place, ifft_in_place};
use crate::rng::RngStream;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalDomain {
    Optical,
    Electrical,
}

/// Uniformly sampled complex envelope with its grid metadata.
#[derive(Debug, Clone)]
pub struct SampleBuffer {
    pub samples: Vec<Complex64>,
    sample_rate: f64,
    center_frequency: f64,
    domain: SignalDomain,
    /// Declared band of interest relative to `center_frequency`.
    /// Generators set it; receivers may re-declare it before decimating.
    occupied: (f64, f64),
}

impl SampleBuffer {
    pub fn new(
        samples: Vec<Complex64>,
        sample_rate: f64,
        center_frequency: f64,
        domain: SignalDomain,
    ) -> Self {
        assert!(sample_rate > 0.0, "sample_rate must be positive");
        assert!(!samples.is_empty(), "buffer must hold at least one sample");
        let ny = sample_rate / 2.0;
        Self {
            samples,
            sample_rate,
            center_frequency,
            domain,
            occupied: (-ny, ny),
        }
    }

    pub fn silence(
        len: usize,
        sample_rate: f64,
        center_frequency: f64,
        domain: SignalDomain,
    ) -> Self {
        Self::new(
            vec![Complex64::new(0.0, 0.0); len],
            sample_rate,
            center_frequency,
            domain,
        )
    }

    /// Complex tone at `freq_rel` Hz from the buffer center with the given
    /// mean power.
    pub fn tone(
        len: usize,
        sample_rate: f64,
        center_frequency: f64,
        domain: SignalDomain,
        freq_rel: f64,
        power: f64,
    ) -> Self {
        let amp = power.sqrt();
        let w = 2.0 * std::f64::consts::PI * freq_rel / sample_rate;
        let samples = (0..len)
            .map(|n| Complex64::from_polar(amp, w * n as f64))
            .collect();
        let mut buf = Self::new(samples, sample_rate, center_frequency, domain);
        buf.occupied = (freq_rel, freq_rel);
        buf
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn center_frequency(&self) -> f64 {
        self.center_frequency
    }

    pub fn domain(&self) -> SignalDomain {
        self.domain
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Declared occupied band relative to the center frequency.
    pub fn occupied_band(&self) -> (f64, f64) {
        self.occupied
    }

    /// Re-declares the band of interest, e.g. before a receiver decimates
    /// away out-of-band noise on purpose.
    pub fn set_occupied_band(&mut self, lo: f64, hi: f64) {
        assert!(lo <= hi, "band must be ordered");
        let ny = self.nyquist();
        self.occupied = (lo.max(-ny), hi.min(ny));
    }

    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.len() as f64
    }

    pub fn peak_power(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.norm_sqr())
            .fold(0.0, f64::max)
    }

    /// Mean power in dBm (1 mW reference).
    pub fn power_dbm(&self) -> f64 {
        10.0 * (self.mean_power() / 1e-3).log10()
    }

    /// Peak-to-average power ratio in dB.
    pub fn papr_db(&self) -> f64 {
        10.0 * (self.peak_power() / self.mean_power()).log10()
    }

    /// Multiplies every sample by a real amplitude factor.
    pub fn scale_amplitude(&mut self, factor: f64) {
        for s in self.samples.iter_mut() {
            *s *= factor;
        }
    }

    /// Applies a power gain (positive) or loss (negative) in dB.
    pub fn scale_power_db(&mut self, gain_db: f64) {
        self.scale_amplitude(10f64.powf(gain_db / 20.0));
    }

    /// Rescales so that `power_dbm()` reports exactly `target_dbm`.
    pub fn set_power_dbm(&mut self, target_dbm: f64) {
        let current = self.mean_power();
        assert!(current > 0.0, "cannot set the power of an all-zero buffer");
        let target = 1e-3 * 10f64.powf(target_dbm / 10.0);
        self.scale_amplitude((target / current).sqrt());
    }

    /// The real waveform `Re{a(t)}`, meaningful for a baseband-centered
    /// electrical buffer whose content sits at positive frequencies.
    pub fn to_real(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.re).collect()
    }
}

/// Translates the spectrum by `delta_f` while keeping the grid fixed.
///
/// Rejects shifts that would push the declared occupied band across the
/// Nyquist edge.
pub fn frequency_shift(buf: &SampleBuffer, delta_f: f64) -> Result<SampleBuffer> {
    let (lo, hi) = buf.occupied;
    let ny = buf.nyquist();
    if lo + delta_f < -ny || hi + delta_f > ny {
        return Err(SimError::AliasingShift {
            shift_hz: delta_f,
            band_lo_hz: lo,
            band_hi_hz: hi,
            nyquist_hz: ny,
        });
    }
    let mut out = buf.clone();
    if delta_f != 0.0 {
        let w = 2.0 * std::f64::consts::PI * delta_f / buf.sample_rate;
        for (n, s) in out.samples.iter_mut().enumerate() {
            *s *= Complex64::from_polar(1.0, w * n as f64);
        }
    }
    out.occupied = (lo + delta_f, hi + delta_f);
    Ok(out)
}

/// Re-labels the buffer onto a new center frequency without moving the
/// content in absolute terms: the envelope is rotated by the difference and
/// the declared center updated.
pub fn retune(buf: &SampleBuffer, new_center: f64) -> Result<SampleBuffer> {
    let delta = buf.center_frequency - new_center;
    let (lo, hi) = buf.occupied;
    let ny = buf.nyquist();
    if lo + delta < -ny || hi + delta > ny {
        return Err(SimError::AliasingShift {
            shift_hz: delta,
            band_lo_hz: lo,
            band_hi_hz: hi,
            nyquist_hz: ny,
        });
    }
    let mut out = frequency_shift(buf, delta)?;
    out.center_frequency = new_center;
    Ok(out)
}

/// Raised-cosine guard taper used at the band edge of the resampler.
fn guard_taper(f_abs: f64, nyquist: f64) -> f64 {
    let pass_edge = 0.95 * nyquist;
    if f_abs <= pass_edge {
        1.0
    } else if f_abs >= nyquist {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (f_abs - pass_edge) / (nyquist - pass_edge)).cos())
    }
}

/// Rate conversion by zero-stuffed frequency-domain interpolation.
///
/// The declared occupied band must fit inside the new Nyquist range, and the
/// rate ratio must map the buffer onto an integer number of samples. Content
/// in the top 5% below the smaller Nyquist frequency falls into the guard
/// taper.
pub fn resample(buf: &SampleBuffer, new_rate: f64) -> Result<SampleBuffer> {
    if (new_rate - buf.sample_rate).abs() < 1e-9 * buf.sample_rate {
        return Ok(buf.clone());
    }
    let (lo, hi) = buf.occupied;
    if lo < -new_rate / 2.0 || hi > new_rate / 2.0 {
        return Err(SimError::RateBelowBand {
            new_rate_hz: new_rate,
            band_lo_hz: lo,
            band_hi_hz: hi,
        });
    }
    let n = buf.len();
    let m_exact = n as f64 * new_rate / buf.sample_rate;
    let m = m_exact.round() as usize;
    if (m_exact - m as f64).abs() > 1e-6 || m == 0 {
        return Err(SimError::NonCommensurateRates {
            len: n,
            old_rate_hz: buf.sample_rate,
            new_rate_hz: new_rate,
        });
    }

    let mut spectrum = buf.samples.clone();
    fft_in_place(&mut spectrum);

    let min_ny = buf.sample_rate.min(new_rate) / 2.0;
    let scale = m as f64 / n as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    for (k, v) in spectrum.iter().enumerate() {
        let f = bin_frequency(k, n, buf.sample_rate);
        let w = guard_taper(f.abs(), min_ny);
        if w == 0.0 {
            continue;
        }
        // Same physical frequency on the output grid.
        let signed = (f * m as f64 / new_rate).round() as i64;
        let j = signed.rem_euclid(m as i64) as usize;
        out[j] = v * (w * scale);
    }
    ifft_in_place(&mut out);

    let mut result = SampleBuffer::new(out, new_rate, buf.center_frequency, buf.domain);
    result.occupied = buf.occupied;
    Ok(result)
}

/// Adds circular complex Gaussian noise with the given two-sided spectral
/// density (power per Hz over the full complex rate).
pub fn add_gaussian_noise(buf: &SampleBuffer, psd: f64, rng: &RngStream) -> Result<SampleBuffer> {
    if psd < 0.0 {
        return Err(SimError::Invalid(format!(
            "noise density must be non-negative, got {psd:.3e}"
        )));
    }
    let mut out = buf.clone();
    if psd == 0.0 {
        return Ok(out);
    }
    let sigma = (psd * buf.sample_rate / 2.0).sqrt();
    let mut r = rng.rng();
    let normal = StandardNormal;
    for s in out.samples.iter_mut() {
        let re: f64 = normal.sample(&mut r);
        let im: f64 = normal.sample(&mut r);
        *s += Complex64::new(re * sigma, im * sigma);
    }
    let ny = out.nyquist();
    out.occupied = (-ny, ny);
    Ok(out)
}

const META_FORMAT: &str = "rofsim-iq-v1";

/// Writes the buffer as little-endian interleaved f64 I/Q plus a plain-text
/// `key=value` sidecar next to it (`<path>.iq` / `<path>.meta`).
pub fn export_waveform<P: AsRef<Path>>(buf: &SampleBuffer, path: P) -> Result<()> {
    let base = path.as_ref();
    let iq_path = base.with_extension("iq");
    let meta_path = base.with_extension("meta");

    let mut w = BufWriter::new(std::fs::File::create(&iq_path)?);
    for s in &buf.samples {
        w.write_all(&s.re.to_le_bytes())?;
        w.write_all(&s.im.to_le_bytes())?;
    }
    w.flush()?;

    let domain = match buf.domain {
        SignalDomain::Optical => "optical",
        SignalDomain::Electrical => "electrical",
    };
    let meta = format!(
        "format={META_FORMAT}\nsample_rate_hz={:.17e}\ncenter_frequency_hz={:.17e}\ndomain={domain}\noccupied_lo_hz={:.17e}\noccupied_hi_hz={:.17e}\nsamples={}\n",
        buf.sample_rate, buf.center_frequency, buf.occupied.0, buf.occupied.1, buf.len()
    );
    std::fs::write(meta_path, meta)?;
    Ok(())
}

/// Reads a waveform written by [`export_waveform`].
pub fn import_waveform<P: AsRef<Path>>(path: P) -> Result<SampleBuffer> {
    let base = path.as_ref();
    let meta = std::fs::read_to_string(base.with_extension("meta"))?;
    let mut rate = None;
    let mut center = None;
    let mut domain = None;
    let mut occ_lo = None;
    let mut occ_hi = None;
    let mut count = None;
    for line in meta.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key.trim() {
            "format" => {
                if value.trim() != META_FORMAT {
                    return Err(SimError::Invalid(format!(
                        "unsupported waveform format '{}'",
                        value.trim()
                    )));
                }
            }
            "sample_rate_hz" => rate = value.trim().parse::<f64>().ok(),
            "center_frequency_hz" => center = value.trim().parse::<f64>().ok(),
            "domain" => {
                domain = match value.trim() {
                    "optical" => Some(SignalDomain::Optical),
                    "electrical" => Some(SignalDomain::Electrical),
                    _ => None,
                }
            }
            "occupied_lo_hz" => occ_lo = value.trim().parse::<f64>().ok(),
            "occupied_hi_hz" => occ_hi = value.trim().parse::<f64>().ok(),
            "samples" => count = value.trim().parse::<usize>().ok(),
            _ => {}
        }
    }
    let (Some(rate), Some(center), Some(domain), Some(count)) = (rate, center, domain, count)
    else {
        return Err(SimError::Invalid(
            "waveform sidecar is missing required keys".into(),
        ));
    };

    let mut r = BufReader::new(std::fs::File::open(base.with_extension("iq"))?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 16 {
        return Err(SimError::Invalid(format!(
            "waveform payload holds {} bytes, expected {}",
            bytes.len(),
            count * 16
        )));
    }
    let samples = bytes
        .chunks_exact(16)
        .map(|c| {
            let re = f64::from_le_bytes(c[0..8].try_into().unwrap());
            let im = f64::from_le_bytes(c[8..16].try_into().unwrap());
            Complex64::new(re, im)
        })
        .collect();
    let mut buf = SampleBuffer::new(samples, rate, center, domain);
    if let (Some(lo), Some(hi)) = (occ_lo, occ_hi) {
        buf.set_occupied_band(lo, hi);
    }
    Ok(buf)
}
