//! Optical component models. Each element is a transform over
//! [`SampleBuffer`]s (or the dual-polarization [`OpticalField`]): laser,
//! dual-drive Mach-Zehnder modulator at quadrature, fibre span with
//! chromatic dispersion, EDFA with ASE, super-Gaussian WSS passbands, VOA,
//! coupler and square-law photodetector.

use crate::analysis::{estimate_spectrum, SpectrumEstimate};
use crate::error::{Result, SimError};
use crate::fft::{bin_frequency, fft_in_place, ifft_in_place};
use crate::rng::RngStream;
use crate::signal::{add_gaussian_noise, SampleBuffer, SignalDomain};
use crate::{ELECTRON_CHARGE, PLANCK, SPEED_OF_LIGHT};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Flexgrid slot granularity of the ROADM filters.
pub const SLOT_GRANULE: f64 = 6.25e9;

fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * db_to_power(dbm)
}

/// Optical field with one or two polarization components. The analog
/// channel is generated on a single polarization; amplifiers populate the
/// orthogonal one with their spontaneous emission.
#[derive(Debug, Clone)]
pub struct OpticalField {
    pub x: SampleBuffer,
    pub y: Option<SampleBuffer>,
}

impl OpticalField {
    pub fn single(x: SampleBuffer) -> Self {
        Self { x, y: None }
    }

    pub fn dual(x: SampleBuffer, y: SampleBuffer) -> Self {
        Self { x, y: Some(y) }
    }

    pub fn sample_rate(&self) -> f64 {
        self.x.sample_rate()
    }

    pub fn center_frequency(&self) -> f64 {
        self.x.center_frequency()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn total_mean_power(&self) -> f64 {
        self.x.mean_power() + self.y.as_ref().map_or(0.0, |y| y.mean_power())
    }

    pub fn power_dbm(&self) -> f64 {
        10.0 * (self.total_mean_power() / 1e-3).log10()
    }

    pub fn map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&SampleBuffer) -> Result<SampleBuffer>,
    {
        Ok(Self {
            x: f(&self.x)?,
            y: self.y.as_ref().map(|y| f(y)).transpose()?,
        })
    }

    /// Polarization-summed power spectral density.
    pub fn summed_spectrum(&self, rbw: f64) -> Result<SpectrumEstimate> {
        let mut spec = estimate_spectrum(&self.x, rbw)?;
        if let Some(y) = &self.y {
            let spec_y = estimate_spectrum(y, rbw)?;
            spec.add_assign(&spec_y);
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserSpec {
    /// Emission frequency, Hz.
    pub frequency: f64,
    pub power_dbm: f64,
    /// Lorentzian linewidth, Hz. Zero gives a deterministic carrier.
    #[serde(default)]
    pub linewidth: f64,
}

impl LaserSpec {
    pub fn validate(&self) -> Result<()> {
        if !(-20.0..=17.0).contains(&self.power_dbm) {
            return Err(SimError::Invalid(format!(
                "laser power {} dBm outside the [-20, +17] dBm sanity bounds",
                self.power_dbm
            )));
        }
        if self.frequency <= 0.0 || self.linewidth < 0.0 {
            return Err(SimError::Invalid(
                "laser frequency must be positive and linewidth non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Continuous-wave field of the laser on its own grid.
pub fn laser_field(spec: &LaserSpec, len: usize, sample_rate: f64, rng: &RngStream) -> SampleBuffer {
    let amp = dbm_to_watts(spec.power_dbm).sqrt();
    let samples = if spec.linewidth > 0.0 {
        // Wiener phase noise with variance 2 pi dv / fs per step.
        let sigma = (2.0 * std::f64::consts::PI * spec.linewidth / sample_rate).sqrt();
        let mut r = rng.rng();
        let normal = StandardNormal;
        let mut phase = 0.0f64;
        (0..len)
            .map(|_| {
                let step: f64 = normal.sample(&mut r);
                phase += sigma * step;
                Complex64::from_polar(amp, phase)
            })
            .collect()
    } else {
        vec![Complex64::new(amp, 0.0); len]
    };
    let mut buf = SampleBuffer::new(samples, sample_rate, spec.frequency, SignalDomain::Optical);
    buf.set_occupied_band(-2.0 * spec.linewidth, 2.0 * spec.linewidth);
    buf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MzmSpec {
    pub v_pi: f64,
    /// Bias as a fraction of V_pi; 0.5 is quadrature.
    pub bias_point: f64,
    /// Peak drive over V_pi.
    pub modulation_index: f64,
    pub insertion_loss_db: f64,
}

impl Default for MzmSpec {
    fn default() -> Self {
        Self {
            v_pi: 4.0,
            bias_point: 0.5,
            modulation_index: 0.2,
            insertion_loss_db: 6.0,
        }
    }
}

impl MzmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.modulation_index > 0.0 && self.modulation_index <= 1.0) {
            return Err(SimError::Invalid(format!(
                "modulation_index {} outside (0, 1]",
                self.modulation_index
            )));
        }
        if !(0.0..=1.0).contains(&self.bias_point) {
            return Err(SimError::Invalid(format!(
                "bias_point {} outside [0, 1]",
                self.bias_point
            )));
        }
        if self.v_pi <= 0.0 || self.insertion_loss_db < 0.0 {
            return Err(SimError::Invalid("v_pi must be positive and insertion loss non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MzmOutput {
    pub field: SampleBuffer,
    /// Set when the instantaneous drive exceeded V_pi.
    pub overmodulated: bool,
}

/// Push-pull DD-MZM modeled as its single-ended equivalent:
/// `E = sqrt(P_in L) cos(pi/2 (bias + m v(t)))` with the drive normalized to
/// unit peak, producing the carrier plus two sidebands.
///
/// The output stays on the drive's sample grid; promote the drive to a wider
/// grid first when harmonics matter.
pub fn mzm_modulate(
    carrier: &LaserSpec,
    drive: &SampleBuffer,
    spec: &MzmSpec,
    rng: &RngStream,
) -> Result<MzmOutput> {
    carrier.validate()?;
    spec.validate()?;
    if drive.domain() != SignalDomain::Electrical {
        return Err(SimError::Invalid("MZM drive must be an electrical buffer".into()));
    }

    let v: Vec<f64> = drive.samples.iter().map(|s| s.re).collect();
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = if peak > 0.0 {
        spec.modulation_index / peak
    } else {
        0.0
    };
    let overmodulated = spec.modulation_index > 1.0 + 1e-12;

    let laser = laser_field(carrier, drive.len(), drive.sample_rate(), rng);
    let loss = db_to_amplitude(-spec.insertion_loss_db);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let samples: Vec<Complex64> = laser
        .samples
        .iter()
        .zip(&v)
        .map(|(e, v)| e * loss * (half_pi * (spec.bias_point + scale * v)).cos())
        .collect();

    let mut field = SampleBuffer::new(
        samples,
        drive.sample_rate(),
        carrier.frequency,
        SignalDomain::Optical,
    );
    let (lo, hi) = drive.occupied_band();
    let reach = 3.0 * lo.abs().max(hi.abs());
    let ny = field.nyquist();
    field.set_occupied_band((-reach).max(-ny), reach.min(ny));
    Ok(MzmOutput {
        field,
        overmodulated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberSpec {
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub dispersion_ps_nm_km: f64,
}

impl Default for FiberSpec {
    fn default() -> Self {
        Self {
            length_km: 0.0,
            attenuation_db_per_km: 0.2,
            dispersion_ps_nm_km: 17.0,
        }
    }
}

impl FiberSpec {
    pub fn with_length(length_km: f64) -> Self {
        Self {
            length_km,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_km < 0.0 {
            return Err(SimError::Invalid(format!("fibre length {} km negative", self.length_km)));
        }
        if self.attenuation_db_per_km <= 0.0 {
            return Err(SimError::Invalid(
                "fibre attenuation must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn loss_db(&self) -> f64 {
        self.length_km * self.attenuation_db_per_km
    }

    /// Accumulated dispersion in SI units (s/m).
    pub fn dispersion_total_si(&self) -> f64 {
        self.dispersion_ps_nm_km * 1e-6 * self.length_km * 1e3
    }
}

/// Frequency-domain quadratic phase for an accumulated dispersion
/// `d_total` (s/m) about the buffer center frequency.
pub fn dispersion_phase(d_total_si: f64, center_frequency: f64, f_rel: f64) -> f64 {
    let lambda = SPEED_OF_LIGHT / center_frequency;
    std::f64::consts::PI * d_total_si * lambda * lambda * f_rel * f_rel / SPEED_OF_LIGHT
}

/// Attenuation plus chromatic dispersion applied as a quadratic spectral
/// phase about the buffer center.
pub fn propagate_fiber(field: &SampleBuffer, spec: &FiberSpec) -> Result<SampleBuffer> {
    spec.validate()?;
    if field.domain() != SignalDomain::Optical {
        return Err(SimError::Invalid("fibre input must be an optical buffer".into()));
    }
    if spec.length_km == 0.0 {
        return Ok(field.clone());
    }
    let mut out = field.clone();
    let n = out.len();
    let rate = out.sample_rate();
    let d_total = spec.dispersion_total_si();
    fft_in_place(&mut out.samples);
    for (k, v) in out.samples.iter_mut().enumerate() {
        let f = bin_frequency(k, n, rate);
        let phi = dispersion_phase(d_total, field.center_frequency(), f);
        *v *= Complex64::from_polar(1.0, phi);
    }
    ifft_in_place(&mut out.samples);
    out.scale_power_db(-spec.loss_db());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdfaSpec {
    pub gain_db: f64,
    pub noise_figure_db: f64,
    pub saturation_output_dbm: f64,
    /// Spontaneous emission can be switched off for noiseless reference runs.
    #[serde(default = "default_true")]
    pub ase_enabled: bool,
}

fn default_true() -> bool {
    true
}

/// Configurable gain range of the ROADM amplifiers.
pub const EDFA_GAIN_MIN_DB: f64 = 5.0;
pub const EDFA_GAIN_MAX_DB: f64 = 25.0;

impl Default for EdfaSpec {
    fn default() -> Self {
        Self {
            gain_db: EDFA_GAIN_MIN_DB,
            noise_figure_db: 5.0,
            saturation_output_dbm: 23.0,
            ase_enabled: true,
        }
    }
}

impl EdfaSpec {
    pub fn validate(&self) -> Result<()> {
        if !(EDFA_GAIN_MIN_DB..=EDFA_GAIN_MAX_DB).contains(&self.gain_db) {
            return Err(SimError::Invalid(format!(
                "EDFA gain {} dB outside the configurable {}-{} dB range",
                self.gain_db, EDFA_GAIN_MIN_DB, EDFA_GAIN_MAX_DB
            )));
        }
        if self.noise_figure_db < 3.0 {
            return Err(SimError::Invalid(format!(
                "EDFA noise figure {} dB below the 3 dB quantum limit",
                self.noise_figure_db
            )));
        }
        Ok(())
    }

    /// ASE spectral density per polarization, W/Hz.
    pub fn ase_psd(&self, frequency: f64) -> f64 {
        if !self.ase_enabled {
            return 0.0;
        }
        let g = db_to_power(self.gain_db);
        let nf = db_to_power(self.noise_figure_db);
        ((g - 1.0).max(0.0)) * PLANCK * frequency * nf / 2.0
    }
}

#[derive(Debug, Clone)]
pub struct AmplifiedBuffer {
    pub field: SampleBuffer,
    pub compressed: bool,
}

/// Scales the field by sqrt(gain) and adds the amplifier's spontaneous
/// emission; the output is clamped at the saturation power.
pub fn amplify(field: &SampleBuffer, spec: &EdfaSpec, rng: &RngStream) -> Result<AmplifiedBuffer> {
    if field.domain() != SignalDomain::Optical {
        return Err(SimError::Invalid("EDFA input must be an optical buffer".into()));
    }
    if spec.gain_db < 0.0 {
        return Err(SimError::Invalid(format!("EDFA gain {} dB negative", spec.gain_db)));
    }
    let mut out = field.clone();
    out.scale_power_db(spec.gain_db);
    let psd = spec.ase_psd(field.center_frequency());
    let mut out = add_gaussian_noise(&out, psd, rng)?;

    let sat = dbm_to_watts(spec.saturation_output_dbm);
    let power = out.mean_power();
    let compressed = power > sat;
    if compressed {
        out.scale_amplitude((sat / power).sqrt());
    }
    Ok(AmplifiedBuffer {
        field: out,
        compressed,
    })
}

/// Amplifies both polarizations, creating the orthogonal one from pure ASE
/// when absent; saturation acts on the total power.
pub fn amplify_field(
    field: &OpticalField,
    spec: &EdfaSpec,
    rng: &RngStream,
) -> Result<(OpticalField, bool)> {
    let mut x = field.x.clone();
    x.scale_power_db(spec.gain_db);
    let psd = spec.ase_psd(field.center_frequency());
    let x = add_gaussian_noise(&x, psd, rng)?;

    let y_in = match &field.y {
        Some(y) => y.clone(),
        None => SampleBuffer::silence(
            field.len(),
            field.sample_rate(),
            field.center_frequency(),
            SignalDomain::Optical,
        ),
    };
    let mut y = y_in;
    y.scale_power_db(spec.gain_db);
    let y = add_gaussian_noise(&y, psd, &rng.substream(1))?;

    let mut out = OpticalField::dual(x, y);
    let sat = dbm_to_watts(spec.saturation_output_dbm);
    let power = out.total_mean_power();
    let compressed = power > sat;
    if compressed {
        let s = (sat / power).sqrt();
        out.x.scale_amplitude(s);
        if let Some(y) = out.y.as_mut() {
            y.scale_amplitude(s);
        }
    }
    Ok((out, compressed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WssFilterProfile {
    pub slot_low: f64,
    pub slot_high: f64,
    /// Super-Gaussian order n in exp(-ln2 (2 df / B)^(2n)).
    pub shape_order: u32,
    /// Per-device frequency offset added to both edges, Hz.
    pub misalignment: f64,
    pub floor_rejection_db: f64,
}

impl WssFilterProfile {
    pub fn new(slot_low: f64, slot_high: f64) -> Self {
        Self {
            slot_low,
            slot_high,
            shape_order: 4,
            misalignment: 0.0,
            floor_rejection_db: 40.0,
        }
    }

    pub fn center(&self) -> f64 {
        (self.slot_low + self.slot_high) / 2.0
    }

    pub fn width(&self) -> f64 {
        self.slot_high - self.slot_low
    }

    /// Edge steepness at the half-power point, dB per GHz.
    pub fn edge_steepness_db_per_ghz(&self) -> f64 {
        let atten_3db = 10.0 * 2f64.log10();
        atten_3db * 4.0 * self.shape_order as f64 / (self.width() / 1e9)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slot_high <= self.slot_low {
            return Err(SimError::Invalid(format!(
                "slot_high {:.6e} must exceed slot_low {:.6e}",
                self.slot_high, self.slot_low
            )));
        }
        if self.floor_rejection_db < 35.0 {
            return Err(SimError::Invalid(format!(
                "floor rejection {} dB below the 35 dB minimum",
                self.floor_rejection_db
            )));
        }
        let granules = self.width() / SLOT_GRANULE;
        if (granules - granules.round()).abs() > 1e-6 {
            return Err(SimError::Invalid(format!(
                "slot width {:.4} GHz is not a multiple of the {:.2} GHz granule",
                self.width() / 1e9,
                SLOT_GRANULE / 1e9
            )));
        }
        if self.shape_order == 0 {
            return Err(SimError::Invalid("shape_order must be at least 1".into()));
        }
        Ok(())
    }

    /// Power transfer at an absolute frequency,
    /// `exp(-ln2 (2 df / B)^(2n))`, floored at the rejection limit. The
    /// half-power points land on the (misaligned) slot edges.
    pub fn power_transfer(&self, f_abs: f64) -> f64 {
        let x = 2.0 * (f_abs - self.center() - self.misalignment) / self.width();
        let ln2 = std::f64::consts::LN_2;
        let shape = (-ln2 * x.powi(2 * self.shape_order as i32)).exp();
        shape.max(db_to_power(-self.floor_rejection_db))
    }

    /// Field amplitude response, the square root of the power transfer.
    pub fn amplitude(&self, f_abs: f64) -> f64 {
        self.power_transfer(f_abs).sqrt()
    }
}

/// Filters the buffer with one slot passband.
pub fn wss_filter(field: &SampleBuffer, profile: &WssFilterProfile) -> Result<SampleBuffer> {
    wss_filter_multi(field, std::slice::from_ref(profile))
}

/// Filters with the union response of several slots of one device, e.g. an
/// express WSS passing two neighboring channels. The device floor applies
/// between and beyond the slots.
pub fn wss_filter_multi(
    field: &SampleBuffer,
    profiles: &[WssFilterProfile],
) -> Result<SampleBuffer> {
    if profiles.is_empty() {
        return Err(SimError::Invalid("WSS needs at least one slot".into()));
    }
    if field.domain() != SignalDomain::Optical {
        return Err(SimError::Invalid("WSS input must be an optical buffer".into()));
    }
    let lo = field.center_frequency() - field.nyquist();
    let hi = field.center_frequency() + field.nyquist();
    for p in profiles {
        p.validate()?;
        if p.slot_low < lo || p.slot_high > hi {
            return Err(SimError::SlotOutsideBand {
                slot_lo_hz: p.slot_low,
                slot_hi_hz: p.slot_high,
                band_lo_hz: lo,
                band_hi_hz: hi,
            });
        }
    }
    let mut out = field.clone();
    let n = out.len();
    let rate = out.sample_rate();
    fft_in_place(&mut out.samples);
    for (k, v) in out.samples.iter_mut().enumerate() {
        let f = field.center_frequency() + bin_frequency(k, n, rate);
        let h = profiles
            .iter()
            .map(|p| p.amplitude(f))
            .fold(0.0f64, f64::max);
        *v *= h;
    }
    ifft_in_place(&mut out.samples);
    Ok(out)
}

/// Flat power attenuation; the VOA role restricts this to [0, 20] dB at the
/// scenario level, the raw operation only rejects negative values.
pub fn attenuate(field: &SampleBuffer, atten_db: f64) -> Result<SampleBuffer> {
    if atten_db < 0.0 {
        return Err(SimError::NegativeAttenuation { atten_db });
    }
    let mut out = field.clone();
    out.scale_power_db(-atten_db);
    Ok(out)
}

/// `sqrt(ratio) a + sqrt(1 - ratio) b` on a shared grid.
pub fn couple(a: &SampleBuffer, b: &SampleBuffer, ratio: f64) -> Result<SampleBuffer> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SimError::Invalid(format!("coupling ratio {ratio} outside [0, 1]")));
    }
    if a.domain() != SignalDomain::Optical || b.domain() != SignalDomain::Optical {
        return Err(SimError::Invalid("coupler inputs must be optical buffers".into()));
    }
    if (a.sample_rate() - b.sample_rate()).abs() > 1e-6
        || (a.center_frequency() - b.center_frequency()).abs() > 1e-6
        || a.len() != b.len()
    {
        return Err(SimError::GridMismatch(format!(
            "coupler inputs differ: {} samples at {:.6e} Sa/s around {:.6e} Hz vs {} at {:.6e} around {:.6e}",
            a.len(),
            a.sample_rate(),
            a.center_frequency(),
            b.len(),
            b.sample_rate(),
            b.center_frequency()
        )));
    }
    let ka = ratio.sqrt();
    let kb = (1.0 - ratio).sqrt();
    let samples = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| x * ka + y * kb)
        .collect();
    let mut out = SampleBuffer::new(samples, a.sample_rate(), a.center_frequency(), a.domain());
    let (alo, ahi) = a.occupied_band();
    let (blo, bhi) = b.occupied_band();
    out.set_occupied_band(alo.min(blo), ahi.max(bhi));
    Ok(out)
}

/// Polarization-wise coupling; a missing polarization couples as silence.
pub fn couple_fields(a: &OpticalField, b: &OpticalField, ratio: f64) -> Result<OpticalField> {
    let x = couple(&a.x, &b.x, ratio)?;
    let y = match (&a.y, &b.y) {
        (Some(ya), Some(yb)) => Some(couple(ya, yb, ratio)?),
        (Some(ya), None) => {
            let mut y = ya.clone();
            y.scale_amplitude(ratio.sqrt());
            Some(y)
        }
        (None, Some(yb)) => {
            let mut y = yb.clone();
            y.scale_amplitude((1.0 - ratio).sqrt());
            Some(y)
        }
        (None, None) => None,
    };
    Ok(OpticalField { x, y })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotodetectorSpec {
    pub responsivity_a_per_w: f64,
    pub bandwidth_hz: f64,
    /// Input-referred current noise, A/sqrt(Hz).
    pub thermal_noise_density: f64,
    pub shot_noise: bool,
}

impl Default for PhotodetectorSpec {
    fn default() -> Self {
        Self {
            responsivity_a_per_w: 0.7,
            bandwidth_hz: 20e9,
            thermal_noise_density: 15e-12,
            shot_noise: true,
        }
    }
}

impl PhotodetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_hz <= 0.0 {
            return Err(SimError::Invalid("photodetector bandwidth must be positive".into()));
        }
        if !(self.responsivity_a_per_w > 0.0 && self.responsivity_a_per_w <= 1.2) {
            return Err(SimError::Invalid(format!(
                "responsivity {} A/W outside (0, 1.2]",
                self.responsivity_a_per_w
            )));
        }
        if self.thermal_noise_density < 0.0 {
            return Err(SimError::Invalid("thermal noise density negative".into()));
        }
        Ok(())
    }
}

/// Steepness of the detector's low-pass edge; order 8 keeps beats 25% past
/// the 3 dB bandwidth more than 100 dB down.
const PD_FILTER_ORDER: i32 = 8;

/// Square-law detection of one polarization. See [`photodetect_field`] for
/// the dual-polarization sum.
pub fn photodetect(
    field: &SampleBuffer,
    spec: &PhotodetectorSpec,
    rng: &RngStream,
) -> Result<SampleBuffer> {
    photodetect_field(&OpticalField::single(field.clone()), spec, rng)
}

/// Photocurrent `i = R (|Ex|^2 + |Ey|^2)`, low-pass filtered at the detector
/// bandwidth, with shot and thermal noise.
pub fn photodetect_field(
    field: &OpticalField,
    spec: &PhotodetectorSpec,
    rng: &RngStream,
) -> Result<SampleBuffer> {
    spec.validate()?;
    if field.x.domain() != SignalDomain::Optical {
        return Err(SimError::Invalid("photodetector input must be optical".into()));
    }
    let r = spec.responsivity_a_per_w;
    let mut current: Vec<Complex64> = field
        .x
        .samples
        .iter()
        .map(|e| Complex64::new(r * e.norm_sqr(), 0.0))
        .collect();
    if let Some(y) = &field.y {
        for (i, e) in current.iter_mut().zip(&y.samples) {
            i.re += r * e.norm_sqr();
        }
    }
    let mean_current: f64 = current.iter().map(|c| c.re).sum::<f64>() / current.len() as f64;

    let n = current.len();
    let rate = field.sample_rate();
    let ln2 = std::f64::consts::LN_2;
    fft_in_place(&mut current);
    for (k, v) in current.iter_mut().enumerate() {
        let f = bin_frequency(k, n, rate);
        let h = (-ln2 * (f / spec.bandwidth_hz).powi(2 * PD_FILTER_ORDER)).exp();
        *v *= h;
    }
    ifft_in_place(&mut current);

    let mut out = SampleBuffer::new(current, rate, 0.0, SignalDomain::Electrical);
    let band = spec.bandwidth_hz.min(out.nyquist());
    out.set_occupied_band(-band, band);

    // One-sided shot density 2qI and thermal i_n^2 map onto the two-sided
    // complex convention as half each.
    let mut psd = spec.thermal_noise_density.powi(2) / 2.0;
    if spec.shot_noise {
        psd += ELECTRON_CHARGE * mean_current;
    }
    add_gaussian_noise(&out, psd, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet_rng() -> RngStream {
        RngStream::new(1234, 0)
    }

    fn noiseless_pd() -> PhotodetectorSpec {
        PhotodetectorSpec {
            thermal_noise_density: 0.0,
            shot_noise: false,
            ..Default::default()
        }
    }

    /// Series expansion of the Bessel function of the first kind, the
    /// independent reference for the modulator's line spectrum.
    fn bessel_j(n: u32, z: f64) -> f64 {
        let mut sum = 0.0;
        let mut term = (z / 2.0).powi(n as i32)
            / (1..=n as u64).product::<u64>().max(1) as f64;
        let mut m = 0u64;
        loop {
            sum += term;
            m += 1;
            term *= -(z / 2.0) * (z / 2.0) / (m as f64 * (m + n as u64) as f64);
            if term.abs() < 1e-16 {
                break;
            }
        }
        sum
    }

    fn ecl() -> LaserSpec {
        LaserSpec {
            frequency: 194.97e12,
            power_dbm: 10.0,
            linewidth: 0.0,
        }
    }

    #[test]
    fn laser_power_bounds() {
        let mut spec = ecl();
        spec.power_dbm = 18.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn quadrature_mzm_with_zero_drive_is_a_half_power_carrier() {
        let drive = SampleBuffer::silence(4096, 32e9, 0.0, SignalDomain::Electrical);
        let spec = MzmSpec::default();
        let out = mzm_modulate(&ecl(), &drive, &spec, &quiet_rng()).unwrap();
        // P_in - insertion - 3.0103 dB (cos^2(pi/4) = 1/2)
        let expected = 10.0 - 6.0 - 10.0 * 2f64.log10();
        assert_abs_diff_eq!(out.field.power_dbm(), expected, epsilon = 1e-9);
        assert!(!out.overmodulated);
    }

    #[test]
    fn mzm_line_spectrum_matches_the_bessel_series() {
        let rate = 32e9;
        let n = 1 << 16;
        let f0 = 1.5e9;
        let drive = SampleBuffer::tone(n, rate, 0.0, SignalDomain::Electrical, f0, 2.0);
        // tone() produces a complex exponential; the modulator takes the
        // real part, a cosine with unit peak from power 2.
        let spec = MzmSpec {
            modulation_index: 0.2,
            ..Default::default()
        };
        let out = mzm_modulate(&ecl(), &drive, &spec, &quiet_rng()).unwrap();
        let spectrum = estimate_spectrum(&out.field, 20e6).unwrap();

        let p_in = dbm_to_watts(10.0) * db_to_power(-6.0);
        let z = std::f64::consts::FRAC_PI_2 * spec.modulation_index;
        let carrier_expect = p_in * bessel_j(0, z).powi(2) / 2.0;
        let first_expect = p_in * bessel_j(1, z).powi(2) / 2.0;
        let second_expect = p_in * bessel_j(2, z).powi(2) / 2.0;

        let fc = 194.97e12;
        let line = |offset: f64| spectrum.band_power(fc + offset - 100e6, fc + offset + 100e6);
        for (name, measured, expected) in [
            ("carrier", line(0.0), carrier_expect),
            ("+1", line(f0), first_expect),
            ("-1", line(-f0), first_expect),
            ("+2", line(2.0 * f0), second_expect),
            ("-2", line(-2.0 * f0), second_expect),
        ] {
            let err_db = 10.0 * (measured / expected).log10();
            assert!(
                err_db.abs() < 0.2,
                "{name} line: {measured:.3e} vs Bessel {expected:.3e} ({err_db:+.2} dB)"
            );
        }

        // At this drive the second-order lines sit near J2^2/J1^2 of the
        // first-order ones, about -22 dB; they fall below -30 dB only for
        // weaker drives (checked at m = 0.05 below).
        let ratio_db = 10.0 * (line(2.0 * f0) / line(f0)).log10();
        let bessel_db = 20.0 * (bessel_j(2, z) / bessel_j(1, z)).log10();
        assert!((ratio_db - bessel_db).abs() < 0.3, "{ratio_db:.2} vs {bessel_db:.2}");

        let weak = MzmSpec {
            modulation_index: 0.05,
            ..Default::default()
        };
        let out = mzm_modulate(&ecl(), &drive, &weak, &quiet_rng()).unwrap();
        let spectrum = estimate_spectrum(&out.field, 20e6).unwrap();
        let line = |offset: f64| spectrum.band_power(fc + offset - 100e6, fc + offset + 100e6);
        let ratio_db = 10.0 * (line(2.0 * f0) / line(f0)).log10();
        assert!(ratio_db < -30.0, "second harmonic at {ratio_db:.1} dB");
    }

    #[test]
    fn mzm_sideband_power_tracks_m_squared() {
        let rate = 32e9;
        let drive = SampleBuffer::tone(1 << 15, rate, 0.0, SignalDomain::Electrical, 1.5e9, 2.0);
        let sideband_power = |m: f64| {
            let spec = MzmSpec {
                modulation_index: m,
                ..Default::default()
            };
            let out = mzm_modulate(&ecl(), &drive, &spec, &quiet_rng()).unwrap();
            let s = estimate_spectrum(&out.field, 20e6).unwrap();
            let fc = 194.97e12;
            s.band_power(fc + 1.4e9, fc + 1.6e9) + s.band_power(fc - 1.6e9, fc - 1.4e9)
        };
        let ratio = sideband_power(0.1) / sideband_power(0.05);
        assert!((ratio / 4.0 - 1.0).abs() < 0.05, "m^2 scaling ratio {ratio:.3}");
    }

    #[test]
    fn fiber_attenuation_arithmetic() {
        let field = SampleBuffer::tone(4096, 32e9, 194.97e12, SignalDomain::Optical, 0.0, 1e-3);
        let out = propagate_fiber(&field, &FiberSpec::with_length(25.0)).unwrap();
        assert_abs_diff_eq!(out.power_dbm(), field.power_dbm() - 5.0, epsilon = 1e-9);

        let identity = propagate_fiber(&field, &FiberSpec::with_length(0.0)).unwrap();
        assert_eq!(identity.samples, field.samples);
    }

    #[test]
    fn fiber_spans_compose() {
        let mut field = SampleBuffer::tone(1 << 12, 32e9, 194.97e12, SignalDomain::Optical, 2e9, 1e-3);
        field = add_gaussian_noise(&field, 1e-18, &quiet_rng()).unwrap();
        let half = FiberSpec::with_length(12.5);
        let full = FiberSpec::with_length(25.0);
        let two = propagate_fiber(&propagate_fiber(&field, &half).unwrap(), &half).unwrap();
        let one = propagate_fiber(&field, &full).unwrap();
        let db_err = (two.power_dbm() - one.power_dbm()).abs();
        assert!(db_err < 1e-9, "power differs by {db_err:.2e} dB");
        let rms: f64 = (two
            .samples
            .iter()
            .zip(&one.samples)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            / one.len() as f64)
            .sqrt();
        assert!(rms < 1e-10 * one.mean_power().sqrt(), "field RMS error {rms:.2e}");
    }

    #[test]
    fn dispersion_is_all_pass() {
        let mut field = SampleBuffer::silence(1 << 12, 32e9, 194.97e12, SignalDomain::Optical);
        field = add_gaussian_noise(&field, 1e-15, &quiet_rng()).unwrap();
        let spec = FiberSpec::with_length(84.0);
        let out = propagate_fiber(&field, &spec).unwrap();
        assert_abs_diff_eq!(
            out.power_dbm(),
            field.power_dbm() - spec.loss_db(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn unit_gain_edfa_is_near_identity() {
        let field = SampleBuffer::tone(4096, 32e9, 194.97e12, SignalDomain::Optical, 0.0, 1e-3);
        let spec = EdfaSpec {
            gain_db: 0.0,
            noise_figure_db: 3.0,
            ..Default::default()
        };
        let out = amplify(&field, &spec, &quiet_rng()).unwrap();
        assert!(!out.compressed);
        assert_abs_diff_eq!(out.field.power_dbm(), field.power_dbm(), epsilon = 1e-9);
    }

    #[test]
    fn edfa_osnr_matches_the_formula() {
        // OSNR = P_in - NF - 10 log10(h nu B_ref / 1 mW), with B_ref 12.5 GHz.
        let nu = 194.97e12;
        let p_in_dbm = -30.0;
        let nf_db = 5.0;
        let field = SampleBuffer::tone(1 << 20, 64e9, nu, SignalDomain::Optical, 0.0, dbm_to_watts(p_in_dbm));
        let spec = EdfaSpec {
            gain_db: 20.0,
            noise_figure_db: nf_db,
            ..Default::default()
        };
        let (out, compressed) = amplify_field(&OpticalField::single(field), &spec, &quiet_rng()).unwrap();
        assert!(!compressed);

        let expected = p_in_dbm
            - nf_db
            - 10.0 * (PLANCK * nu * crate::analysis::OSNR_REFERENCE_BANDWIDTH / 1e-3).log10();

        let spectrum = out.summed_spectrum(100e6).unwrap();
        let osnr = crate::analysis::measure_osnr_from_spectrum(
            &spectrum,
            (nu - 2e9, nu + 2e9),
            &crate::analysis::OsnrConfig::default(),
        )
        .unwrap();
        let measured = osnr.db().expect("measurable OSNR");
        assert!(
            (measured - expected).abs() < 0.3,
            "OSNR {measured:.2} dB vs formula {expected:.2} dB"
        );
    }

    #[test]
    fn edfa_cascade_is_noisier_than_a_single_stage() {
        // Two stages with a pad between them, end-to-end gain equal to the
        // single amplifier: the noise accumulation oracle predicts roughly
        // 1 dB of OSNR penalty for 15 dB stages around a 10 dB pad.
        let nu = 194.97e12;
        let field = SampleBuffer::tone(1 << 18, 64e9, nu, SignalDomain::Optical, 0.0, dbm_to_watts(-20.0));
        let single = EdfaSpec {
            gain_db: 20.0,
            ..Default::default()
        };
        let stage = EdfaSpec {
            gain_db: 15.0,
            ..Default::default()
        };
        let osnr_of = |field: &SampleBuffer| {
            let spectrum = estimate_spectrum(field, 100e6).unwrap();
            crate::analysis::measure_osnr_from_spectrum(
                &spectrum,
                (nu - 2e9, nu + 2e9),
                &crate::analysis::OsnrConfig::default(),
            )
            .unwrap()
            .db()
            .expect("measurable")
        };
        let one = amplify(&field, &single, &quiet_rng()).unwrap().field;
        let first = amplify(&field, &stage, &quiet_rng()).unwrap().field;
        let padded = attenuate(&first, 10.0).unwrap();
        let two = amplify(&padded, &stage, &RngStream::new(1234, 1)).unwrap().field;
        assert!(
            osnr_of(&two) < osnr_of(&one) - 0.5,
            "cascade {:.2} dB vs single {:.2} dB",
            osnr_of(&two),
            osnr_of(&one)
        );
    }

    fn arof_slot() -> WssFilterProfile {
        WssFilterProfile::new(194968.75e9, 194975.00e9)
    }

    #[test]
    fn wss_passband_center_and_edge() {
        let slot = arof_slot();
        let center = slot.center();
        let field = SampleBuffer::tone(1 << 14, 64e9, center, SignalDomain::Optical, 0.0, 1e-3);
        let out = wss_filter(&field, &slot).unwrap();
        assert!(field.power_dbm() - out.power_dbm() < 0.1, "center loss too high");

        let edge_tone = SampleBuffer::tone(1 << 14, 64e9, center, SignalDomain::Optical, slot.width() / 2.0, 1e-3);
        let out = wss_filter(&edge_tone, &slot).unwrap();
        let loss = edge_tone.power_dbm() - out.power_dbm();
        assert!((loss - 3.0103).abs() < 0.3, "edge loss {loss:.3} dB");
    }

    #[test]
    fn wss_cascade_narrows_by_the_closed_form() {
        let slot = arof_slot();
        // Composite -3 dB bandwidth of N identical order-n filters is
        // B N^(-1/(2n)).
        for n_filters in [1usize, 2, 4, 8] {
            let atten_db = |f: f64| -> f64 { -20.0 * slot.amplitude(f).log10() * n_filters as f64 };
            // Bisect the -3 dB point on the upper edge.
            let mut lo = slot.center();
            let mut hi = slot.center() + slot.width();
            for _ in 0..200 {
                let mid = (lo + hi) / 2.0;
                if atten_db(mid) < 3.0103 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let measured_bw = 2.0 * ((lo + hi) / 2.0 - slot.center());
            let expected = slot.width() * (n_filters as f64).powf(-1.0 / (2.0 * slot.shape_order as f64));
            let rel = (measured_bw - expected).abs() / expected;
            assert!(
                rel < 0.01,
                "N={n_filters}: {measured_bw:.4e} vs {expected:.4e} ({:.2}%)",
                rel * 100.0
            );
        }
    }

    #[test]
    fn misaligned_cascade_moves_the_composite_center() {
        let mut slot = arof_slot();
        slot.misalignment = -0.8e9;
        // Center of mass of |H|^2 for 4 identical misaligned filters.
        let n_filters = 4;
        let mut num = 0.0;
        let mut den = 0.0;
        let f0 = slot.slot_low - 3e9;
        let f1 = slot.slot_high + 3e9;
        let steps = 20000;
        for i in 0..=steps {
            let f = f0 + (f1 - f0) * i as f64 / steps as f64;
            let h2 = slot.amplitude(f).powi(2 * n_filters);
            num += f * h2;
            den += h2;
        }
        let com = num / den;
        let expected = slot.center() + slot.misalignment;
        assert!(
            (com - expected).abs() < 50e6,
            "center of mass {:.4e} vs {:.4e}",
            com,
            expected
        );
    }

    #[test]
    fn wss_rejects_slot_outside_band() {
        let field = SampleBuffer::tone(1 << 12, 16e9, 194.95e12, SignalDomain::Optical, 0.0, 1e-3);
        let err = wss_filter(&field, &arof_slot()).unwrap_err();
        assert!(matches!(err, SimError::SlotOutsideBand { .. }));
    }

    #[test]
    fn voa_attenuation_is_exact() {
        let field = SampleBuffer::tone(2048, 16e9, 194.97e12, SignalDomain::Optical, 0.0, 1e-3);
        let out = attenuate(&field, 10.0).unwrap();
        assert_abs_diff_eq!(out.power_dbm(), -10.0, epsilon = 1e-9);

        let identity = attenuate(&field, 0.0).unwrap();
        assert_eq!(identity.samples, field.samples);

        let two_pads = attenuate(&attenuate(&field, 5.0).unwrap(), 5.0).unwrap();
        assert_abs_diff_eq!(two_pads.power_dbm(), out.power_dbm(), epsilon = 1e-9);

        assert!(matches!(
            attenuate(&field, -1.0),
            Err(SimError::NegativeAttenuation { .. })
        ));
    }

    #[test]
    fn coupler_splits_and_rejects_mismatched_grids() {
        let a = SampleBuffer::tone(2048, 16e9, 194.97e12, SignalDomain::Optical, 1e9, 1e-3);
        let silence = SampleBuffer::silence(2048, 16e9, 194.97e12, SignalDomain::Optical);

        let full = couple(&a, &silence, 1.0).unwrap();
        assert_abs_diff_eq!(full.power_dbm(), a.power_dbm(), epsilon = 1e-12);

        let half = couple(&a, &silence, 0.5).unwrap();
        assert_abs_diff_eq!(half.power_dbm(), a.power_dbm() - 3.0103, epsilon = 1e-3);

        let other_grid = SampleBuffer::silence(2048, 32e9, 194.97e12, SignalDomain::Optical);
        assert!(matches!(
            couple(&a, &other_grid, 0.5),
            Err(SimError::GridMismatch(_))
        ));
    }

    #[test]
    fn fifty_fifty_coupling_of_two_channels() {
        let rate = 64e9;
        let len = 1 << 16;
        let center = 194.95e12;
        let a = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, -10e9, 1e-3);
        let b = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, 10e9, 1e-3);
        let out = couple(&a, &b, 0.5).unwrap();
        let spec = estimate_spectrum(&out, 50e6).unwrap();
        for offset in [-10e9, 10e9] {
            let p = spec.band_power_dbm(center + offset - 0.5e9, center + offset + 0.5e9);
            assert!((p - (0.0 - 3.0103)).abs() < 0.1, "channel at {offset:.1e}: {p:.2} dBm");
        }
    }

    #[test]
    fn cw_detection_gives_a_clean_dc_current() {
        let p = 1e-3;
        let field = SampleBuffer::tone(1 << 14, 64e9, 194.97e12, SignalDomain::Optical, 0.0, p);
        let out = photodetect(&field, &noiseless_pd(), &quiet_rng()).unwrap();
        let dc: f64 = out.samples.iter().map(|s| s.re).sum::<f64>() / out.len() as f64;
        assert_abs_diff_eq!(dc, 0.7 * p, epsilon = 1e-12);
        let ripple: f64 = out
            .samples
            .iter()
            .map(|s| (s.re - dc).powi(2))
            .sum::<f64>()
            / out.len() as f64;
        assert!(ripple < 1e-20, "AC ripple {ripple:.2e}");
    }

    #[test]
    fn carrier_sideband_beat_matches_the_square_law() {
        let rate = 64e9;
        let len = 1 << 16;
        let center = 194.97e12;
        let p_c = 1e-3;
        let p_s = 1e-5;
        let carrier = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, 0.0, p_c);
        let sideband = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, 1.5e9, p_s);
        let mut field = carrier;
        for (a, b) in field.samples.iter_mut().zip(&sideband.samples) {
            *a += b;
        }
        let out = photodetect(&field, &noiseless_pd(), &quiet_rng()).unwrap();
        let spec = estimate_spectrum(&out, 20e6).unwrap();
        // Real beat tone of amplitude 2 R sqrt(Pc Ps): mean square 2 R^2 Pc Ps,
        // split between the +-1.5 GHz lines of the complex spectrum.
        let measured = spec.band_power(1.4e9, 1.6e9) + spec.band_power(-1.6e9, -1.4e9);
        let expected = 2.0 * 0.7f64.powi(2) * p_c * p_s;
        let err_db = 10.0 * (measured / expected).log10();
        assert!(err_db.abs() < 0.2, "beat power off by {err_db:.2} dB");
    }

    #[test]
    fn beats_beyond_the_detector_bandwidth_are_suppressed() {
        let rate = 128e9;
        let len = 1 << 16;
        let center = 194.95e12;
        let p_c = 1e-3;
        let p_s = 1e-4;
        let carrier = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, 0.0, p_c);
        let remnant = SampleBuffer::tone(len, rate, center, SignalDomain::Optical, 25e9, p_s);
        let mut field = carrier;
        for (a, b) in field.samples.iter_mut().zip(&remnant.samples) {
            *a += b;
        }
        let out = photodetect(&field, &noiseless_pd(), &quiet_rng()).unwrap();
        let spec = estimate_spectrum(&out, 50e6).unwrap();
        let measured = spec.band_power(24.5e9, 25.5e9) + spec.band_power(-25.5e9, -24.5e9);
        let unfiltered = 2.0 * 0.7f64.powi(2) * p_c * p_s;
        let suppression_db = -10.0 * (measured / unfiltered).log10();
        assert!(suppression_db >= 40.0, "suppression {suppression_db:.1} dB");
    }

    #[test]
    fn passive_elements_never_gain_power() {
        let mut field = SampleBuffer::tone(1 << 13, 64e9, 194.95e12, SignalDomain::Optical, 3e9, 1e-3);
        field = add_gaussian_noise(&field, 1e-16, &quiet_rng()).unwrap();
        let p_in = field.power_dbm();
        let tol = 1e-9;

        let after_fiber = propagate_fiber(&field, &FiberSpec::with_length(10.0)).unwrap();
        assert!(after_fiber.power_dbm() <= p_in + tol);

        let slot = WssFilterProfile::new(194.95e12 - 3.125e9, 194.95e12 + 3.125e9);
        let after_wss = wss_filter(&field, &slot).unwrap();
        assert!(after_wss.power_dbm() <= p_in + tol);

        let after_voa = attenuate(&field, 2.0).unwrap();
        assert!(after_voa.power_dbm() <= p_in + tol);

        let silence = SampleBuffer::silence(field.len(), 64e9, 194.95e12, SignalDomain::Optical);
        let after_coupler = couple(&field, &silence, 0.5).unwrap();
        assert!(after_coupler.power_dbm() <= p_in + tol);
    }

    #[test]
    fn linear_elements_scale_with_the_field() {
        let mut field = SampleBuffer::tone(1 << 12, 64e9, 194.95e12, SignalDomain::Optical, 2e9, 1e-3);
        field = add_gaussian_noise(&field, 1e-16, &quiet_rng()).unwrap();
        let slot = WssFilterProfile::new(194.95e12 - 3.125e9, 194.95e12 + 3.125e9);

        for alpha in [0.5f64, 2.0] {
            let mut scaled = field.clone();
            scaled.scale_amplitude(alpha);
            for (name, out_base, out_scaled) in [
                (
                    "fiber",
                    propagate_fiber(&field, &FiberSpec::with_length(5.0)).unwrap(),
                    propagate_fiber(&scaled, &FiberSpec::with_length(5.0)).unwrap(),
                ),
                (
                    "wss",
                    wss_filter(&field, &slot).unwrap(),
                    wss_filter(&scaled, &slot).unwrap(),
                ),
                (
                    "voa",
                    attenuate(&field, 3.0).unwrap(),
                    attenuate(&scaled, 3.0).unwrap(),
                ),
            ] {
                let max_rel: f64 = out_base
                    .samples
                    .iter()
                    .zip(&out_scaled.samples)
                    .map(|(a, b)| (a * alpha - b).norm() / (a.norm() * alpha).max(1e-30))
                    .fold(0.0, f64::max);
                assert!(max_rel < 1e-10, "{name} at alpha={alpha}: {max_rel:.2e}");
            }
        }
    }

    #[test]
    fn edfa_range_validation() {
        let mut spec = EdfaSpec::default();
        spec.gain_db = 30.0;
        assert!(spec.validate().is_err());
        spec.gain_db = 11.0;
        spec.noise_figure_db = 2.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn wss_slot_granularity_validation() {
        let mut slot = arof_slot();
        slot.slot_high = slot.slot_low + 5.0e9;
        assert!(slot.validate().is_err());
        let mut slot = arof_slot();
        slot.floor_rejection_db = 30.0;
        assert!(slot.validate().is_err());
    }
}
