//! Measurement instruments: averaged-periodogram spectrum estimation, an
//! OSNR meter referred to 12.5 GHz (0.1 nm), and a carrier/sideband power
//! meter for double-sideband signals.

use crate::error::{Result, SimError};
use crate::fft::{bin_frequency, fft_in_place};
use crate::signal::SampleBuffer;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// 0.1 nm reference bandwidth near 1550 nm.
pub const OSNR_REFERENCE_BANDWIDTH: f64 = 12.5e9;

/// Equivalent noise bandwidth of the 4-term Blackman-Harris window, in bins.
const BH_ENBW_BINS: f64 = 2.0044;

fn blackman_harris(n: usize, len: usize) -> f64 {
    let x = 2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64;
    0.35875 - 0.48829 * x.cos() + 0.14128 * (2.0 * x).cos() - 0.01168 * (3.0 * x).cos()
}

/// Two-sided power spectral density on an ascending absolute-frequency grid.
#[derive(Debug, Clone)]
pub struct SpectrumEstimate {
    /// Absolute bin-center frequencies, ascending.
    pub frequencies: Vec<f64>,
    /// Linear power density per Hz in the buffer's power unit.
    pub psd: Vec<f64>,
    pub resolution_bandwidth: f64,
    pub bin_width: f64,
    pub segments_averaged: usize,
}

impl SpectrumEstimate {
    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    pub fn psd_dbm_per_hz(&self, i: usize) -> f64 {
        10.0 * (self.psd[i].max(f64::MIN_POSITIVE) / 1e-3).log10()
    }

    pub fn peak_frequency(&self) -> f64 {
        let (i, _) = self
            .psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        self.frequencies[i]
    }

    /// Integrated power over the absolute band [lo, hi].
    pub fn band_power(&self, lo: f64, hi: f64) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.psd)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, p)| p * self.bin_width)
            .sum()
    }

    pub fn band_power_dbm(&self, lo: f64, hi: f64) -> f64 {
        10.0 * (self.band_power(lo, hi).max(f64::MIN_POSITIVE) / 1e-3).log10()
    }

    pub fn total_power(&self) -> f64 {
        self.psd.iter().map(|p| p * self.bin_width).sum()
    }

    /// Mean PSD over a narrow window around an absolute frequency.
    pub fn psd_at(&self, f: f64, half_window: f64) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for (fc, p) in self.frequencies.iter().zip(&self.psd) {
            if (fc - f).abs() <= half_window {
                acc += p;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            acc / count as f64
        }
    }

    pub fn covers(&self, f: f64) -> bool {
        f >= self.frequencies[0] && f <= *self.frequencies.last().unwrap()
    }

    /// Sums bin-by-bin with another estimate on the identical grid, e.g. to
    /// combine the two polarizations of a field.
    pub fn add_assign(&mut self, other: &SpectrumEstimate) {
        assert_eq!(self.len(), other.len(), "spectrum grids differ");
        for (a, b) in self.psd.iter_mut().zip(&other.psd) {
            *a += b;
        }
    }
}

/// Welch estimate with 50% overlap and a Blackman-Harris taper. The segment
/// length is derived from the requested resolution bandwidth; buffers much
/// longer than a segment give the variance reduction of many averages.
pub fn estimate_spectrum(buf: &SampleBuffer, rbw: f64) -> Result<SpectrumEstimate> {
    let rate = buf.sample_rate();
    let n = buf.len();
    if rbw <= 0.0 {
        return Err(SimError::Invalid("resolution bandwidth must be positive".into()));
    }
    let seg_len = ((BH_ENBW_BINS * rate / rbw).round() as usize).max(8);
    if seg_len > n {
        return Err(SimError::RbwTooFine {
            rbw_hz: rbw,
            len: n,
            rate_hz: rate,
        });
    }
    let hop = (seg_len / 2).max(1);
    let n_segments = (n - seg_len) / hop + 1;

    let window: Vec<f64> = (0..seg_len).map(|i| blackman_harris(i, seg_len)).collect();
    let s2: f64 = window.iter().map(|w| w * w).sum();

    let mut acc = vec![0.0f64; seg_len];
    let mut work = vec![Complex64::new(0.0, 0.0); seg_len];
    for s in 0..n_segments {
        let start = s * hop;
        for (i, w) in window.iter().enumerate() {
            work[i] = buf.samples[start + i] * *w;
        }
        fft_in_place(&mut work);
        for (a, v) in acc.iter_mut().zip(&work) {
            *a += v.norm_sqr();
        }
    }
    let norm = 1.0 / (n_segments as f64 * rate * s2);

    // Reorder to an ascending grid around the buffer center.
    let mut indexed: Vec<(f64, f64)> = acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            (
                buf.center_frequency() + bin_frequency(k, seg_len, rate),
                p * norm,
            )
        })
        .collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    Ok(SpectrumEstimate {
        frequencies: indexed.iter().map(|(f, _)| *f).collect(),
        psd: indexed.iter().map(|(_, p)| *p).collect(),
        resolution_bandwidth: rbw,
        bin_width: rate / seg_len as f64,
        segments_averaged: n_segments,
    })
}

/// Which side(s) of the signal band the OSNR meter may sample the ASE floor
/// on. WSS filtering can remove one side's floor entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorSides {
    Both,
    Low,
    High,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OsnrConfig {
    /// Near and far floor sampling offsets from the band edges, Hz.
    pub floor_offset_near: f64,
    pub floor_offset_far: f64,
    pub sides: FloorSides,
    /// Resolution bandwidth for the underlying spectrum; `None` picks one
    /// from the band width.
    pub rbw: Option<f64>,
    pub ceiling_db: f64,
}

impl Default for OsnrConfig {
    fn default() -> Self {
        Self {
            floor_offset_near: 2.5e9,
            floor_offset_far: 5.0e9,
            sides: FloorSides::Both,
            rbw: None,
            ceiling_db: 60.0,
        }
    }
}

/// Outcome of an OSNR measurement. A missing noise floor is reported as
/// such instead of producing a misleading number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Osnr {
    Db { osnr_db: f64 },
    AboveCeiling { ceiling_db: f64 },
    Unmeasurable { reason: String },
}

impl Osnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Osnr::Db { osnr_db } => Some(*osnr_db),
            _ => None,
        }
    }
}

/// Signal power in `signal_band` over the interpolated out-of-band floor
/// referred to 12.5 GHz.
pub fn measure_osnr(
    buf: &SampleBuffer,
    signal_band: (f64, f64),
    cfg: &OsnrConfig,
) -> Result<Osnr> {
    let width = signal_band.1 - signal_band.0;
    if width <= 0.0 {
        return Err(SimError::Invalid("signal band must have positive width".into()));
    }
    let rbw = cfg
        .rbw
        .unwrap_or((width / 32.0).max(2.0 * buf.sample_rate() / buf.len() as f64));
    let spectrum = estimate_spectrum(buf, rbw)?;
    measure_osnr_from_spectrum(&spectrum, signal_band, cfg)
}

/// Same as [`measure_osnr`] but on a pre-computed spectrum, which also lets
/// the caller sum polarizations first.
pub fn measure_osnr_from_spectrum(
    spectrum: &SpectrumEstimate,
    signal_band: (f64, f64),
    cfg: &OsnrConfig,
) -> Result<Osnr> {
    let half = spectrum.bin_width;
    let floor_side = |edge: f64, sign: f64| -> Option<(f64, f64)> {
        let near = edge + sign * cfg.floor_offset_near;
        let far = edge + sign * cfg.floor_offset_far;
        if !spectrum.covers(near) || !spectrum.covers(far) {
            return None;
        }
        let psd = 0.5 * (spectrum.psd_at(near, half) + spectrum.psd_at(far, half));
        Some(((near + far) / 2.0, psd))
    };

    let low = floor_side(signal_band.0, -1.0);
    let high = floor_side(signal_band.1, 1.0);
    let picked: Vec<(f64, f64)> = match cfg.sides {
        FloorSides::Both => match (low, high) {
            (Some(l), Some(h)) => vec![l, h],
            _ => vec![],
        },
        FloorSides::Low => low.into_iter().collect(),
        FloorSides::High => high.into_iter().collect(),
    };
    if picked.is_empty() {
        return Ok(Osnr::Unmeasurable {
            reason: format!(
                "noise floor at +/-{:.2}-{:.2} GHz from the band edges is outside the captured span",
                cfg.floor_offset_near / 1e9,
                cfg.floor_offset_far / 1e9
            ),
        });
    }

    // Linear interpolation of the floor across the band (flat when only one
    // side is available).
    let band_center = (signal_band.0 + signal_band.1) / 2.0;
    let floor_psd = if picked.len() == 2 {
        let (f0, p0) = picked[0];
        let (f1, p1) = picked[1];
        p0 + (p1 - p0) * (band_center - f0) / (f1 - f0)
    } else {
        picked[0].1
    };

    let band_power = spectrum.band_power(signal_band.0, signal_band.1);
    let signal_power = (band_power - floor_psd.max(0.0) * (signal_band.1 - signal_band.0))
        .max(f64::MIN_POSITIVE);
    let noise_ref = floor_psd.max(0.0) * OSNR_REFERENCE_BANDWIDTH;
    if noise_ref <= 0.0 {
        return Ok(Osnr::AboveCeiling {
            ceiling_db: cfg.ceiling_db,
        });
    }
    let osnr_db = 10.0 * (signal_power / noise_ref).log10();
    if osnr_db >= cfg.ceiling_db {
        Ok(Osnr::AboveCeiling {
            ceiling_db: cfg.ceiling_db,
        })
    } else {
        Ok(Osnr::Db { osnr_db })
    }
}

/// Carrier and sideband powers of a double-sideband signal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidebandReport {
    pub carrier_power_dbm: f64,
    pub lower_sideband_power_dbm: f64,
    pub upper_sideband_power_dbm: f64,
    /// Upper minus lower, dB. Negative when the upper sideband is weaker.
    pub asymmetry_db: f64,
}

/// Integrates the PSD over the carrier (+/- 50 MHz) and over the two
/// sideband bands `carrier +/- if_freq +/- bw/2`.
pub fn measure_sidebands(
    buf: &SampleBuffer,
    carrier: f64,
    if_freq: f64,
    bw: f64,
) -> Result<SidebandReport> {
    check_sideband_geometry(if_freq, bw)?;
    let spectrum = estimate_spectrum(buf, (bw / 64.0).max(2.0 * buf.sample_rate() / buf.len() as f64))?;
    measure_sidebands_from_spectrum(&spectrum, carrier, if_freq, bw)
}

const CARRIER_HALF_WIDTH: f64 = 50e6;

fn check_sideband_geometry(if_freq: f64, bw: f64) -> Result<()> {
    if if_freq - bw / 2.0 <= CARRIER_HALF_WIDTH {
        return Err(SimError::BandOverlap(format!(
            "sideband band ({:.3e} Hz wide at +/-{:.3e} Hz) reaches into the carrier window",
            bw, if_freq
        )));
    }
    Ok(())
}

pub fn measure_sidebands_from_spectrum(
    spectrum: &SpectrumEstimate,
    carrier: f64,
    if_freq: f64,
    bw: f64,
) -> Result<SidebandReport> {
    check_sideband_geometry(if_freq, bw)?;
    for f in [
        carrier - if_freq - bw / 2.0,
        carrier + if_freq + bw / 2.0,
    ] {
        if !spectrum.covers(f) {
            return Err(SimError::SlotOutsideBand {
                slot_lo_hz: carrier - if_freq - bw / 2.0,
                slot_hi_hz: carrier + if_freq + bw / 2.0,
                band_lo_hz: spectrum.frequencies[0],
                band_hi_hz: *spectrum.frequencies.last().unwrap(),
            });
        }
    }
    let carrier_power =
        spectrum.band_power_dbm(carrier - CARRIER_HALF_WIDTH, carrier + CARRIER_HALF_WIDTH);
    let lower =
        spectrum.band_power_dbm(carrier - if_freq - bw / 2.0, carrier - if_freq + bw / 2.0);
    let upper =
        spectrum.band_power_dbm(carrier + if_freq - bw / 2.0, carrier + if_freq + bw / 2.0);
    Ok(SidebandReport {
        carrier_power_dbm: carrier_power,
        lower_sideband_power_dbm: lower,
        upper_sideband_power_dbm: upper,
        asymmetry_db: upper - lower,
    })
}

/// Spearman rank correlation, used to compare per-subcarrier EVM profiles
/// against channel tilt.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    assert!(n >= 2);
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let ra = rank(a);
    let rb = rank(b);
    let mean = (n as f64 - 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..n {
        let x = ra[i] - mean;
        let y = rb[i] - mean;
        num += x * y;
        da += x * x;
        db += y * y;
    }
    num / (da.sqrt() * db.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::signal::{add_gaussian_noise, SignalDomain};

    #[test]
    fn tone_integrates_to_its_power() {
        let buf = SampleBuffer::tone(1 << 16, 8e9, 0.0, SignalDomain::Optical, 1.1e9, 1e-3);
        let spec = estimate_spectrum(&buf, 4e6).unwrap();
        let p = spec.band_power_dbm(1.1e9 - 30e6, 1.1e9 + 30e6);
        assert!(p.abs() < 0.1, "integrated tone power {p:.3} dBm");
    }

    #[test]
    fn white_noise_psd_is_flat_and_calibrated() {
        let base = SampleBuffer::silence(1 << 18, 4e9, 0.0, SignalDomain::Optical);
        let psd = 2.5e-13;
        let noisy = add_gaussian_noise(&base, psd, &RngStream::new(5, 9)).unwrap();
        let spec = estimate_spectrum(&noisy, 50e6).unwrap();
        for (f, p) in spec.frequencies.iter().zip(&spec.psd) {
            if f.abs() > 1.9e9 {
                continue;
            }
            let err_db = 10.0 * (p / psd).log10();
            assert!(err_db.abs() < 0.5, "PSD at {f:.3e}: off by {err_db:.2} dB");
        }
    }

    #[test]
    fn parseval_total_power_agreement() {
        let base = SampleBuffer::tone(1 << 14, 4e9, 0.0, SignalDomain::Optical, 0.7e9, 1e-3);
        let noisy = add_gaussian_noise(&base, 1e-14, &RngStream::new(8, 2)).unwrap();
        let spec = estimate_spectrum(&noisy, 8e6).unwrap();
        let ratio = spec.total_power() / noisy.mean_power();
        assert!((ratio - 1.0).abs() < 0.01, "Parseval ratio {ratio:.4}");
    }

    #[test]
    fn rbw_too_fine_is_rejected() {
        let buf = SampleBuffer::silence(1024, 4e9, 0.0, SignalDomain::Optical);
        let err = estimate_spectrum(&buf, 1e3).unwrap_err();
        assert!(matches!(err, SimError::RbwTooFine { .. }));
    }

    #[test]
    fn osnr_of_synthesized_mix_is_recovered() {
        // Signal at 0 dBm in a 6 GHz band plus ASE at a known density:
        // OSNR target 28.5 dB in 12.5 GHz.
        let rate = 40e9;
        let len = 1 << 20;
        let signal_power = 1e-3;
        let target_osnr_db = 28.5;
        let ase_psd = signal_power / (10f64.powf(target_osnr_db / 10.0) * OSNR_REFERENCE_BANDWIDTH);
        let mut buf = SampleBuffer::tone(len, rate, 0.0, SignalDomain::Optical, 0.0, signal_power);
        buf = add_gaussian_noise(&buf, ase_psd, &RngStream::new(77, 1)).unwrap();
        let osnr = measure_osnr(&buf, (-3e9, 3e9), &OsnrConfig::default()).unwrap();
        match osnr {
            Osnr::Db { osnr_db } => {
                assert!((osnr_db - target_osnr_db).abs() < 0.3, "got {osnr_db:.2} dB")
            }
            other => panic!("expected a numeric OSNR, got {other:?}"),
        }
    }

    #[test]
    fn pure_signal_reports_above_ceiling() {
        let buf = SampleBuffer::tone(1 << 18, 40e9, 0.0, SignalDomain::Optical, 0.0, 1e-3);
        let osnr = measure_osnr(&buf, (-3e9, 3e9), &OsnrConfig::default()).unwrap();
        assert!(matches!(osnr, Osnr::AboveCeiling { .. }), "got {osnr:?}");
    }

    #[test]
    fn missing_floor_is_unmeasurable() {
        // 16 GSa/s grid: +/-8 GHz coverage, floor required out to 9 GHz.
        let base = SampleBuffer::tone(1 << 16, 16e9, 0.0, SignalDomain::Optical, 0.0, 1e-3);
        let noisy = add_gaussian_noise(&base, 1e-15, &RngStream::new(4, 4)).unwrap();
        let osnr = measure_osnr(&noisy, (-4e9, 4e9), &OsnrConfig::default()).unwrap();
        assert!(matches!(osnr, Osnr::Unmeasurable { .. }), "got {osnr:?}");
    }

    #[test]
    fn symmetric_dsb_has_zero_asymmetry() {
        let rate = 16e9;
        let len = 1 << 17;
        let carrier = SampleBuffer::tone(len, rate, 200e12, SignalDomain::Optical, 0.0, 1e-3);
        let mut buf = carrier;
        let w = 2.0 * std::f64::consts::PI * 1.5e9 / rate;
        for (n, s) in buf.samples.iter_mut().enumerate() {
            let phase = w * n as f64;
            let sb = 0.05 * ((phase).cos() * 2.0);
            *s += Complex64::new(sb * 1e-3f64.sqrt(), 0.0);
        }
        let report = measure_sidebands(&buf, 200e12, 1.5e9, 0.6e9).unwrap();
        assert!(
            report.asymmetry_db.abs() < 0.2,
            "asymmetry {:.3} dB",
            report.asymmetry_db
        );
    }

    #[test]
    fn overlapping_bands_are_rejected() {
        let buf = SampleBuffer::tone(1 << 12, 16e9, 0.0, SignalDomain::Optical, 0.0, 1e-3);
        let err = measure_sidebands(&buf, 0.0, 0.2e9, 0.5e9).unwrap_err();
        assert!(matches!(err, SimError::BandOverlap(_)));
    }

    #[test]
    fn spearman_ranks() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        let c = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
