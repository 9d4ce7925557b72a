//! Declarative composition of optical elements into the looped access-metro
//! architecture: the four preset ROADM cascades, gain planning, and chain
//! evaluation with power-monitor taps at every element boundary.

use crate::analysis::{measure_osnr_from_spectrum, FloorSides, Osnr, OsnrConfig};
use crate::error::{Result, SimError};
use crate::optics::{
    amplify_field, attenuate, couple_fields, mzm_modulate, propagate_fiber, wss_filter_multi,
    EdfaSpec, FiberSpec, LaserSpec, MzmSpec, OpticalField, PhotodetectorSpec, WssFilterProfile,
    EDFA_GAIN_MAX_DB, EDFA_GAIN_MIN_DB,
};
use crate::rng::{streams, RngStream};
use crate::signal::{resample, retune, SampleBuffer, SignalDomain};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Frequency plan of the converged link: a 37.5 GHz coherent allocation next
/// to one 6.25 GHz analog slot, simulated on a common wideband grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub coherent_slot: (f64, f64),
    pub arof_slot: (f64, f64),
    /// Analog optical carrier position inside its slot.
    pub arof_carrier: f64,
    pub coherent_center: f64,
    /// Common simulation grid for the combined band.
    pub grid_rate: f64,
    pub grid_center: f64,
    pub wss_shape_order: u32,
    pub wss_floor_rejection_db: f64,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            coherent_slot: (194931.25e9, 194968.75e9),
            arof_slot: (194968.75e9, 194975.00e9),
            // Slot center; the lab carrier position inside the slot is not
            // a settled quantity, so it stays configurable.
            arof_carrier: 194971.875e9,
            coherent_center: 194950.0e9,
            grid_rate: 128e9,
            grid_center: 194953.0e9,
            wss_shape_order: 4,
            wss_floor_rejection_db: 40.0,
        }
    }
}

impl ChannelPlan {
    pub fn coherent_slot_profile(&self) -> WssFilterProfile {
        WssFilterProfile {
            slot_low: self.coherent_slot.0,
            slot_high: self.coherent_slot.1,
            shape_order: self.wss_shape_order,
            misalignment: 0.0,
            floor_rejection_db: self.wss_floor_rejection_db,
        }
    }

    pub fn arof_slot_profile(&self) -> WssFilterProfile {
        WssFilterProfile {
            slot_low: self.arof_slot.0,
            slot_high: self.arof_slot.1,
            shape_order: self.wss_shape_order,
            misalignment: 0.0,
            floor_rejection_db: self.wss_floor_rejection_db,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.coherent_slot_profile().validate()?;
        self.arof_slot_profile().validate()?;
        let lo = self.grid_center - self.grid_rate / 2.0;
        let hi = self.grid_center + self.grid_rate / 2.0;
        if self.coherent_slot.0 < lo || self.arof_slot.1 > hi {
            return Err(SimError::Invalid(format!(
                "channel plan [{:.2}, {:.2}] GHz exceeds the simulation grid [{:.2}, {:.2}] GHz",
                self.coherent_slot.0 / 1e9,
                self.arof_slot.1 / 1e9,
                lo / 1e9,
                hi / 1e9
            )));
        }
        if !(self.arof_slot.0..=self.arof_slot.1).contains(&self.arof_carrier) {
            return Err(SimError::Invalid(format!(
                "analog carrier {:.3} GHz outside its slot",
                self.arof_carrier / 1e9
            )));
        }
        Ok(())
    }
}

/// One element of a chain, labeled for power traces and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementSpec {
    pub label: String,
    #[serde(flatten)]
    pub kind: ElementKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementKind {
    Laser(LaserSpec),
    Mzm(MzmSpec),
    Coupler { ratio: f64 },
    Fiber(FiberSpec),
    Edfa(EdfaSpec),
    Voa { attenuation_db: f64 },
    /// Express filter: the union passband of this device's configured slots.
    Wss {
        slots: Vec<WssFilterProfile>,
        insertion_loss_db: f64,
    },
    /// Discriminating filter: the analog slot continues down the chain, the
    /// coherent slot leaves on a second port.
    WssDrop {
        arof_slot: WssFilterProfile,
        coherent_slot: WssFilterProfile,
        insertion_loss_db: f64,
    },
    Pd(PhotodetectorSpec),
    Monitor,
}

impl ElementKind {
    fn is_wss(&self) -> bool {
        matches!(self, ElementKind::Wss { .. } | ElementKind::WssDrop { .. })
    }
}

/// Ordered cascade plus the labels whose taps also get an OSNR estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyChain {
    pub plan: ChannelPlan,
    pub elements: Vec<ElementSpec>,
    #[serde(default)]
    pub monitor_taps: BTreeSet<String>,
}

impl TopologyChain {
    pub fn wss_count(&self) -> usize {
        self.elements.iter().filter(|e| e.kind.is_wss()).count()
    }

    pub fn total_fiber_km(&self) -> f64 {
        self.elements
            .iter()
            .map(|e| match &e.kind {
                ElementKind::Fiber(f) => f.length_km,
                _ => 0.0,
            })
            .sum()
    }

    pub fn total_dispersion_si(&self) -> f64 {
        self.elements
            .iter()
            .map(|e| match &e.kind {
                ElementKind::Fiber(f) => f.dispersion_total_si(),
                _ => 0.0,
            })
            .sum()
    }

    /// Applies one misalignment offset per WSS device, in chain order, to
    /// every slot of that device.
    pub fn set_misalignments(&mut self, offsets: &[f64]) -> Result<()> {
        let count = self.wss_count();
        if offsets.len() != count {
            return Err(SimError::Invalid(format!(
                "{} misalignment offsets for {count} WSS devices",
                offsets.len()
            )));
        }
        let mut it = offsets.iter();
        for e in self.elements.iter_mut() {
            match &mut e.kind {
                ElementKind::Wss { slots, .. } => {
                    let d = *it.next().unwrap();
                    for s in slots {
                        s.misalignment = d;
                    }
                }
                ElementKind::WssDrop {
                    arof_slot,
                    coherent_slot,
                    ..
                } => {
                    let d = *it.next().unwrap();
                    arof_slot.misalignment = d;
                    coherent_slot.misalignment = d;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let mut problems = Vec::new();
        let mut labels = BTreeSet::new();
        for e in &self.elements {
            if !labels.insert(e.label.clone()) {
                problems.push(format!("duplicate element label '{}'", e.label));
            }
            let check = match &e.kind {
                ElementKind::Laser(s) => s.validate(),
                ElementKind::Mzm(s) => s.validate(),
                ElementKind::Coupler { ratio } => {
                    if (0.0..=1.0).contains(ratio) {
                        Ok(())
                    } else {
                        Err(SimError::Invalid(format!("coupler ratio {ratio} outside [0, 1]")))
                    }
                }
                ElementKind::Fiber(s) => s.validate(),
                ElementKind::Edfa(s) => s.validate(),
                ElementKind::Voa { attenuation_db } => {
                    if (0.0..=20.0).contains(attenuation_db) {
                        Ok(())
                    } else {
                        Err(SimError::Invalid(format!(
                            "VOA attenuation {attenuation_db} dB outside the 0-20 dB range"
                        )))
                    }
                }
                ElementKind::Wss { slots, .. } => {
                    slots.iter().try_for_each(|s| s.validate())
                }
                ElementKind::WssDrop {
                    arof_slot,
                    coherent_slot,
                    ..
                } => arof_slot.validate().and_then(|_| coherent_slot.validate()),
                ElementKind::Pd(s) => s.validate(),
                ElementKind::Monitor => Ok(()),
            };
            if let Err(err) = check {
                problems.push(format!("{}: {err}", e.label));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

/// Per-device filter misalignment policy of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MisalignmentPolicy {
    Aligned,
    /// One shared offset for every WSS device.
    Common { offset_ghz: f64 },
    Explicit { offsets_ghz: Vec<f64> },
    Random { delta_max_ghz: f64 },
}

impl Default for MisalignmentPolicy {
    fn default() -> Self {
        Self::Aligned
    }
}

impl MisalignmentPolicy {
    pub fn offsets_hz(&self, wss_count: usize, rng: &RngStream) -> Result<Vec<f64>> {
        match self {
            Self::Aligned => Ok(vec![0.0; wss_count]),
            Self::Common { offset_ghz } => Ok(vec![offset_ghz * 1e9; wss_count]),
            Self::Explicit { offsets_ghz } => {
                if offsets_ghz.len() != wss_count {
                    return Err(SimError::Invalid(format!(
                        "misalignment list has {} entries for {} WSS devices",
                        offsets_ghz.len(),
                        wss_count
                    )));
                }
                Ok(offsets_ghz.iter().map(|g| g * 1e9).collect())
            }
            Self::Random { delta_max_ghz } => {
                use rand::Rng;
                let mut r = rng.substream(streams::MISALIGNMENT).rng();
                Ok((0..wss_count)
                    .map(|_| r.gen_range(-delta_max_ghz * 1e9..=delta_max_ghz * 1e9))
                    .collect())
            }
        }
    }
}

/// Component values shared by every preset chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub laser_power_dbm: f64,
    #[serde(default)]
    pub laser_linewidth_hz: f64,
    pub mzm: MzmSpec,
    pub pd: PhotodetectorSpec,
    pub edfa_noise_figure_db: f64,
    pub edfa_saturation_dbm: f64,
    pub wss_insertion_loss_db: f64,
}

impl Default for HardwareProfile {
    fn default() -> Self {
        Self {
            laser_power_dbm: 16.0,
            laser_linewidth_hz: 0.0,
            mzm: MzmSpec::default(),
            pd: PhotodetectorSpec::default(),
            edfa_noise_figure_db: 5.5,
            edfa_saturation_dbm: 23.0,
            wss_insertion_loss_db: 6.0,
        }
    }
}

/// Launch and restoration targets of the gain plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPlan {
    /// Per-channel restoration target at each ROADM egress booster, dBm.
    pub roadm_egress_dbm: f64,
    /// Restoration target at the receive-side inline amplifier, dBm.
    pub rx_boost_dbm: f64,
    /// Pad on the add port ahead of the first mux, dB.
    pub add_port_voa_db: f64,
    /// Analog power at the detector, set by sweeping the receive VOA, dBm.
    pub received_dbm: f64,
}

impl Default for PowerPlan {
    fn default() -> Self {
        Self {
            roadm_egress_dbm: 5.0,
            rx_boost_dbm: 10.0,
            add_port_voa_db: 10.0,
            received_dbm: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresetName {
    A,
    B,
    C,
    D,
}

impl PresetName {
    pub fn roadm_count(&self) -> usize {
        match self {
            Self::A => 1,
            Self::B => 2,
            Self::C => 3,
            Self::D => 4,
        }
    }

    pub fn all() -> [Self; 4] {
        [Self::A, Self::B, Self::C, Self::D]
    }
}

impl std::str::FromStr for PresetName {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            other => Err(SimError::Invalid(format!("unknown preset '{other}'"))),
        }
    }
}

/// Builds one of the four preset cascades: the add-side mux and booster,
/// `n - 1` express ROADMs joined by 25 km spans, the 9 km leased span, and
/// the receive side (inline amplifier, discriminating WSS, VOA, detector).
pub fn build_preset(
    name: PresetName,
    plan: &ChannelPlan,
    policy: &MisalignmentPolicy,
    hw: &HardwareProfile,
    power: &PowerPlan,
    rng: &RngStream,
) -> Result<TopologyChain> {
    let coh = plan.coherent_slot_profile();
    let arof = plan.arof_slot_profile();
    let edfa = |_: &str| EdfaSpec {
        gain_db: EDFA_GAIN_MIN_DB,
        noise_figure_db: hw.edfa_noise_figure_db,
        saturation_output_dbm: hw.edfa_saturation_dbm,
        ase_enabled: true,
    };
    let express = |label: &str| ElementSpec {
        label: label.into(),
        kind: ElementKind::Wss {
            slots: vec![coh.clone(), arof.clone()],
            insertion_loss_db: hw.wss_insertion_loss_db,
        },
    };

    let mut elements = vec![
        ElementSpec {
            label: "ecl".into(),
            kind: ElementKind::Laser(LaserSpec {
                frequency: plan.arof_carrier,
                power_dbm: hw.laser_power_dbm,
                linewidth: hw.laser_linewidth_hz,
            }),
        },
        ElementSpec {
            label: "ddmzm".into(),
            kind: ElementKind::Mzm(hw.mzm.clone()),
        },
        ElementSpec {
            label: "coupler".into(),
            kind: ElementKind::Coupler { ratio: 0.5 },
        },
        ElementSpec {
            label: "add_voa".into(),
            kind: ElementKind::Voa {
                attenuation_db: power.add_port_voa_db,
            },
        },
        express("r1_mux"),
        ElementSpec {
            label: "r1_booster".into(),
            kind: ElementKind::Edfa(edfa("r1_booster")),
        },
    ];

    for i in 2..=name.roadm_count() {
        elements.push(ElementSpec {
            label: format!("span{}", i - 1),
            kind: ElementKind::Fiber(FiberSpec::with_length(25.0)),
        });
        elements.push(ElementSpec {
            label: format!("r{i}_preamp"),
            kind: ElementKind::Edfa(edfa("preamp")),
        });
        elements.push(express(&format!("r{i}_demux")));
        elements.push(express(&format!("r{i}_mux")));
        elements.push(ElementSpec {
            label: format!("r{i}_booster"),
            kind: ElementKind::Edfa(edfa("booster")),
        });
    }

    elements.push(ElementSpec {
        label: "dark_fiber".into(),
        kind: ElementKind::Fiber(FiberSpec::with_length(9.0)),
    });
    elements.push(ElementSpec {
        label: "rx_preamp".into(),
        kind: ElementKind::Edfa(edfa("rx_preamp")),
    });
    elements.push(ElementSpec {
        label: "rx_demux".into(),
        kind: ElementKind::WssDrop {
            arof_slot: arof.clone(),
            coherent_slot: coh.clone(),
            insertion_loss_db: hw.wss_insertion_loss_db,
        },
    });
    elements.push(ElementSpec {
        label: "rx_voa".into(),
        kind: ElementKind::Voa { attenuation_db: 0.0 },
    });
    elements.push(ElementSpec {
        label: "pd".into(),
        kind: ElementKind::Pd(hw.pd.clone()),
    });

    let mut chain = TopologyChain {
        plan: plan.clone(),
        elements,
        monitor_taps: BTreeSet::from(["rx_preamp".to_string()]),
    };
    let offsets = policy.offsets_hz(chain.wss_count(), rng)?;
    chain.set_misalignments(&offsets)?;

    let mut targets = std::collections::BTreeMap::new();
    targets.insert("rx_preamp".to_string(), power.rx_boost_dbm);
    autoset_gains_with(&mut chain, power.roadm_egress_dbm, &targets)?;
    chain.validate()?;
    Ok(chain)
}

/// Nominal per-channel power ledger through the declared gains and losses.
/// The analog carrier at quadrature sits 3 dB below the laser, each coupler
/// leg costs its split, filters cost their insertion loss.
fn ledger_step(kind: &ElementKind, power_dbm: f64) -> f64 {
    match kind {
        ElementKind::Laser(s) => s.power_dbm,
        ElementKind::Mzm(s) => power_dbm - s.insertion_loss_db - 10.0 * 2f64.log10(),
        ElementKind::Coupler { ratio } => power_dbm + 10.0 * ratio.log10(),
        ElementKind::Fiber(f) => power_dbm - f.loss_db(),
        ElementKind::Edfa(e) => power_dbm + e.gain_db,
        ElementKind::Voa { attenuation_db } => power_dbm - attenuation_db,
        ElementKind::Wss {
            insertion_loss_db, ..
        }
        | ElementKind::WssDrop {
            insertion_loss_db, ..
        } => power_dbm - insertion_loss_db,
        ElementKind::Pd(_) | ElementKind::Monitor => power_dbm,
    }
}

/// Sets every amplifier's gain so the nominal per-channel power returns to
/// `target_launch_dbm` at its output, clamped to the configurable range.
pub fn autoset_gains(chain: &mut TopologyChain, target_launch_dbm: f64) -> Result<()> {
    autoset_gains_with(chain, target_launch_dbm, &Default::default())
}

/// Like [`autoset_gains`] with per-label target overrides (e.g. a higher
/// restoration point for the receive-side inline amplifier).
pub fn autoset_gains_with(
    chain: &mut TopologyChain,
    default_target_dbm: f64,
    overrides: &std::collections::BTreeMap<String, f64>,
) -> Result<()> {
    let mut power = f64::NAN;
    for e in chain.elements.iter_mut() {
        if let ElementKind::Edfa(spec) = &mut e.kind {
            let target = overrides.get(&e.label).copied().unwrap_or(default_target_dbm);
            if power.is_nan() {
                power = target - EDFA_GAIN_MIN_DB;
            }
            let needed = target - power;
            if needed > EDFA_GAIN_MAX_DB {
                return Err(SimError::InfeasibleGain {
                    label: e.label.clone(),
                    needed_db: needed,
                    min_db: EDFA_GAIN_MIN_DB,
                    max_db: EDFA_GAIN_MAX_DB,
                });
            }
            spec.gain_db = needed.clamp(EDFA_GAIN_MIN_DB, EDFA_GAIN_MAX_DB);
        }
        power = ledger_step(&e.kind, power);
    }
    Ok(())
}

/// Channel inputs for a chain evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    /// Analog IF waveform for the modulator, on the modem's IF grid.
    pub drive: Option<SampleBuffer>,
    /// Coherent channel on its own generation grid.
    pub coherent: Option<OpticalField>,
    /// Direct field input for chains without a transmitter front end.
    pub primary: Option<OpticalField>,
}

/// Power (and optional OSNR) recorded after every element.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub label: String,
    pub power_dbm: f64,
    pub osnr_db: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PowerTrace {
    pub entries: Vec<TraceEntry>,
}

impl PowerTrace {
    pub fn get(&self, label: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.label == label)
    }
}

/// Extra observability knobs for a chain run.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Labels whose output also gets a stored polarization-summed spectrum.
    pub spectrum_taps: BTreeSet<String>,
    pub spectrum_rbw: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            spectrum_taps: BTreeSet::new(),
            spectrum_rbw: 50e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    /// Detected analog waveform at the scope.
    pub arof_electrical: Option<SampleBuffer>,
    /// Optical field incident on the detector.
    pub arof_optical_at_pd: Option<OpticalField>,
    /// Coherent-port output of the discriminating WSS.
    pub coherent_output: Option<OpticalField>,
    /// Combined field right before the discriminating WSS.
    pub pre_drop: Option<OpticalField>,
    pub trace: PowerTrace,
    /// Spectra captured at the requested taps.
    pub spectra: Vec<(String, crate::analysis::SpectrumEstimate)>,
    pub accumulated_dispersion_si: f64,
    pub warnings: Vec<String>,
}

fn element_err(label: &str, source: SimError) -> SimError {
    SimError::Element {
        label: label.to_string(),
        source: Box::new(source),
    }
}

/// Runs the chain left to right. Elements see the combined dual-polarization
/// field; all randomness derives from `rng` with per-element streams, so a
/// fixed seed reproduces the run bit for bit.
pub fn evaluate(
    chain: &TopologyChain,
    inputs: &EvalInputs,
    rng: &RngStream,
    options: &EvalOptions,
) -> Result<EvalOutput> {
    let plan = &chain.plan;
    let mut current: Option<OpticalField> = inputs.primary.clone();
    let mut pending_laser: Option<LaserSpec> = None;
    let mut out = EvalOutput {
        arof_electrical: None,
        arof_optical_at_pd: None,
        coherent_output: None,
        pre_drop: None,
        trace: PowerTrace::default(),
        spectra: Vec::new(),
        accumulated_dispersion_si: 0.0,
        warnings: Vec::new(),
    };

    let osnr_cfg = OsnrConfig {
        floor_offset_near: 1.5e9,
        floor_offset_far: 3.0e9,
        sides: FloorSides::High,
        rbw: Some(100e6),
        ceiling_db: 60.0,
    };

    for (index, e) in chain.elements.iter().enumerate() {
        let label = e.label.as_str();
        let stream = rng.substream(streams::EDFA_BASE + 2 * index as u64);
        match &e.kind {
            ElementKind::Laser(spec) => {
                spec.validate().map_err(|err| element_err(label, err))?;
                pending_laser = Some(spec.clone());
            }
            ElementKind::Mzm(spec) => {
                let laser = pending_laser.take().ok_or_else(|| {
                    element_err(label, SimError::Invalid("modulator without a laser".into()))
                })?;
                let drive = inputs.drive.as_ref().ok_or_else(|| {
                    element_err(label, SimError::Invalid("modulator without a drive input".into()))
                })?;
                let wide = resample(drive, plan.grid_rate).map_err(|err| element_err(label, err))?;
                let mzm_out =
                    mzm_modulate(&laser, &wide, spec, &stream).map_err(|err| element_err(label, err))?;
                if mzm_out.overmodulated {
                    out.warnings.push(format!("{label}: drive exceeded V_pi"));
                }
                let on_grid =
                    retune(&mzm_out.field, plan.grid_center).map_err(|err| element_err(label, err))?;
                current = Some(OpticalField::single(on_grid));
            }
            ElementKind::Coupler { ratio } => {
                let field = current.take().ok_or_else(|| {
                    element_err(label, SimError::Invalid("coupler without a field".into()))
                })?;
                let other = match &inputs.coherent {
                    Some(coh) => coh
                        .map(|buf| {
                            let wide = resample(buf, plan.grid_rate)?;
                            retune(&wide, plan.grid_center)
                        })
                        .map_err(|err| element_err(label, err))?,
                    None => OpticalField::single(SampleBuffer::silence(
                        field.len(),
                        field.sample_rate(),
                        field.center_frequency(),
                        SignalDomain::Optical,
                    )),
                };
                current =
                    Some(couple_fields(&field, &other, *ratio).map_err(|err| element_err(label, err))?);
            }
            ElementKind::Fiber(spec) => {
                let field = take_field(&mut current, label)?;
                current = Some(
                    field
                        .map(|buf| propagate_fiber(buf, spec))
                        .map_err(|err| element_err(label, err))?,
                );
                out.accumulated_dispersion_si += spec.dispersion_total_si();
            }
            ElementKind::Edfa(spec) => {
                let field = take_field(&mut current, label)?;
                let (amplified, compressed) =
                    amplify_field(&field, spec, &stream).map_err(|err| element_err(label, err))?;
                if compressed {
                    out.warnings
                        .push(format!("{label}: output clamped at saturation, gain compressed"));
                }
                current = Some(amplified);
            }
            ElementKind::Voa { attenuation_db } => {
                let field = take_field(&mut current, label)?;
                current = Some(
                    field
                        .map(|buf| attenuate(buf, *attenuation_db))
                        .map_err(|err| element_err(label, err))?,
                );
            }
            ElementKind::Wss {
                slots,
                insertion_loss_db,
            } => {
                let field = take_field(&mut current, label)?;
                let filtered = field
                    .map(|buf| {
                        let mut f = wss_filter_multi(buf, slots)?;
                        f.scale_power_db(-insertion_loss_db);
                        Ok(f)
                    })
                    .map_err(|err| element_err(label, err))?;
                current = Some(filtered);
            }
            ElementKind::WssDrop {
                arof_slot,
                coherent_slot,
                insertion_loss_db,
            } => {
                let field = take_field(&mut current, label)?;
                let coherent_port = field
                    .map(|buf| {
                        let mut f = wss_filter_multi(buf, std::slice::from_ref(coherent_slot))?;
                        f.scale_power_db(-insertion_loss_db);
                        Ok(f)
                    })
                    .map_err(|err| element_err(label, err))?;
                out.coherent_output = Some(coherent_port);
                let arof_port = field
                    .map(|buf| {
                        let mut f = wss_filter_multi(buf, std::slice::from_ref(arof_slot))?;
                        f.scale_power_db(-insertion_loss_db);
                        Ok(f)
                    })
                    .map_err(|err| element_err(label, err))?;
                out.pre_drop = Some(field);
                current = Some(arof_port);
            }
            ElementKind::Pd(spec) => {
                let field = take_field(&mut current, label)?;
                let electrical = crate::optics::photodetect_field(
                    &field,
                    spec,
                    &rng.substream(streams::PD_THERMAL),
                )
                .map_err(|err| element_err(label, err))?;
                out.arof_optical_at_pd = Some(field);
                out.arof_electrical = Some(electrical);
            }
            ElementKind::Monitor => {}
        }

        // Tap after every element that leaves a field on the line.
        let tapped_power = match (&current, &out.arof_electrical) {
            (Some(field), _) => Some(field.power_dbm()),
            (None, Some(elec)) if matches!(e.kind, ElementKind::Pd(_)) => Some(elec.power_dbm()),
            _ => None,
        };
        if let Some(power_dbm) = tapped_power {
            let osnr_db = if chain.monitor_taps.contains(label) {
                current.as_ref().and_then(|field| {
                    field
                        .summed_spectrum(osnr_cfg.rbw.unwrap())
                        .ok()
                        .and_then(|spectrum| {
                            measure_osnr_from_spectrum(&spectrum, plan.arof_slot, &osnr_cfg)
                                .ok()
                                .and_then(|o| match o {
                                    Osnr::Db { osnr_db } => Some(osnr_db),
                                    Osnr::AboveCeiling { ceiling_db } => Some(ceiling_db),
                                    Osnr::Unmeasurable { .. } => None,
                                })
                        })
                })
            } else {
                None
            };
            out.trace.entries.push(TraceEntry {
                label: label.to_string(),
                power_dbm,
                osnr_db,
            });
        }

        if options.spectrum_taps.contains(label) {
            let spectrum = match (&current, &out.arof_electrical) {
                (Some(field), _) => Some(field.summed_spectrum(options.spectrum_rbw)),
                (None, Some(elec)) => Some(crate::analysis::estimate_spectrum(
                    elec,
                    options.spectrum_rbw,
                )),
                _ => None,
            };
            if let Some(spectrum) = spectrum {
                out.spectra
                    .push((label.to_string(), spectrum.map_err(|err| element_err(label, err))?));
            }
        }
    }

    Ok(out)
}

fn take_field(current: &mut Option<OpticalField>, label: &str) -> Result<OpticalField> {
    current.take().ok_or_else(|| {
        element_err(
            label,
            SimError::Invalid("no optical field on the line at this element".into()),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quiet() -> RngStream {
        RngStream::new(99, 0)
    }

    #[test]
    fn presets_match_the_published_counts() {
        let plan = ChannelPlan::default();
        let expectations = [
            (PresetName::A, 2, 9.0),
            (PresetName::B, 4, 34.0),
            (PresetName::C, 6, 59.0),
            (PresetName::D, 8, 84.0),
        ];
        for (name, wss, km) in expectations {
            let chain = build_preset(
                name,
                &plan,
                &MisalignmentPolicy::Aligned,
                &HardwareProfile::default(),
                &PowerPlan::default(),
                &quiet(),
            )
            .unwrap();
            assert_eq!(chain.wss_count(), wss, "{name:?} WSS count");
            assert_abs_diff_eq!(chain.total_fiber_km(), km, epsilon = 1e-12);
            chain.validate().unwrap();
        }
    }

    #[test]
    fn preset_b_extends_a_by_one_roadm_and_a_span() {
        let plan = ChannelPlan::default();
        let build = |name| {
            build_preset(
                name,
                &plan,
                &MisalignmentPolicy::Aligned,
                &HardwareProfile::default(),
                &PowerPlan::default(),
                &quiet(),
            )
            .unwrap()
        };
        let a = build(PresetName::A);
        let b = build(PresetName::B);
        assert_eq!(b.wss_count() - a.wss_count(), 2);
        assert_abs_diff_eq!(b.total_fiber_km() - a.total_fiber_km(), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_chain_is_identity() {
        let chain = TopologyChain {
            plan: ChannelPlan::default(),
            elements: vec![],
            monitor_taps: Default::default(),
        };
        let field = SampleBuffer::tone(
            4096,
            128e9,
            ChannelPlan::default().grid_center,
            SignalDomain::Optical,
            0.0,
            1e-3,
        );
        let inputs = EvalInputs {
            primary: Some(OpticalField::single(field.clone())),
            ..Default::default()
        };
        let out = evaluate(&chain, &inputs, &quiet(), &EvalOptions::default()).unwrap();
        assert!(out.trace.entries.is_empty());
        assert!(out.arof_electrical.is_none());
    }

    #[test]
    fn single_voa_chain_traces_the_loss() {
        let plan = ChannelPlan::default();
        let chain = TopologyChain {
            plan: plan.clone(),
            elements: vec![ElementSpec {
                label: "pad".into(),
                kind: ElementKind::Voa { attenuation_db: 10.0 },
            }],
            monitor_taps: Default::default(),
        };
        let field = SampleBuffer::tone(
            4096,
            plan.grid_rate,
            plan.grid_center,
            SignalDomain::Optical,
            0.0,
            1e-3,
        );
        let inputs = EvalInputs {
            primary: Some(OpticalField::single(field.clone())),
            ..Default::default()
        };
        let out = evaluate(&chain, &inputs, &quiet(), &EvalOptions::default()).unwrap();
        assert_eq!(out.trace.entries.len(), 1);
        assert_abs_diff_eq!(out.trace.entries[0].power_dbm, -10.0, epsilon = 1e-9);
    }

    #[test]
    fn consecutive_taps_differ_by_the_element_budget() {
        let plan = ChannelPlan::default();
        let chain = TopologyChain {
            plan: plan.clone(),
            elements: vec![
                ElementSpec {
                    label: "pad".into(),
                    kind: ElementKind::Voa { attenuation_db: 7.0 },
                },
                ElementSpec {
                    label: "span".into(),
                    kind: ElementKind::Fiber(FiberSpec::with_length(25.0)),
                },
                ElementSpec {
                    label: "amp".into(),
                    kind: ElementKind::Edfa(EdfaSpec {
                        gain_db: 12.0,
                        ase_enabled: false,
                        ..Default::default()
                    }),
                },
            ],
            monitor_taps: Default::default(),
        };
        let field = SampleBuffer::tone(
            4096,
            plan.grid_rate,
            plan.grid_center,
            SignalDomain::Optical,
            0.0,
            1e-3,
        );
        let inputs = EvalInputs {
            primary: Some(OpticalField::single(field)),
            ..Default::default()
        };
        let out = evaluate(&chain, &inputs, &quiet(), &EvalOptions::default()).unwrap();
        let p: Vec<f64> = out.trace.entries.iter().map(|t| t.power_dbm).collect();
        assert_abs_diff_eq!(p[0], 0.0 - 7.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1] - p[0], -5.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2] - p[1], 12.0, epsilon = 1e-9);
    }

    #[test]
    fn autoset_restores_span_and_filter_losses() {
        // 25 km (5 dB) plus one 6 dB filter: the amplifier lands at 11 dB.
        let plan = ChannelPlan::default();
        let slot = plan.arof_slot_profile();
        let mut chain = TopologyChain {
            plan,
            elements: vec![
                ElementSpec {
                    label: "span".into(),
                    kind: ElementKind::Fiber(FiberSpec::with_length(25.0)),
                },
                ElementSpec {
                    label: "filter".into(),
                    kind: ElementKind::Wss {
                        slots: vec![slot],
                        insertion_loss_db: 6.0,
                    },
                },
                ElementSpec {
                    label: "amp".into(),
                    kind: ElementKind::Edfa(EdfaSpec::default()),
                },
            ],
            monitor_taps: Default::default(),
        };
        // Anchor the ledger with a 0 dBm source ahead of the span.
        chain.elements.insert(
            0,
            ElementSpec {
                label: "src".into(),
                kind: ElementKind::Laser(LaserSpec {
                    frequency: ChannelPlan::default().arof_carrier,
                    power_dbm: 0.0,
                    linewidth: 0.0,
                }),
            },
        );
        autoset_gains(&mut chain, 0.0).unwrap();
        let ElementKind::Edfa(spec) = &chain.elements[3].kind else {
            panic!("expected the amplifier");
        };
        assert_abs_diff_eq!(spec.gain_db, 11.0, epsilon = 1e-9);
    }

    #[test]
    fn autoset_clamps_lossless_chains_to_minimum_gain() {
        let plan = ChannelPlan::default();
        let mut chain = TopologyChain {
            plan,
            elements: vec![
                ElementSpec {
                    label: "src".into(),
                    kind: ElementKind::Laser(LaserSpec {
                        frequency: ChannelPlan::default().arof_carrier,
                        power_dbm: 0.0,
                        linewidth: 0.0,
                    }),
                },
                ElementSpec {
                    label: "amp".into(),
                    kind: ElementKind::Edfa(EdfaSpec::default()),
                },
            ],
            monitor_taps: Default::default(),
        };
        autoset_gains(&mut chain, 0.0).unwrap();
        let ElementKind::Edfa(spec) = &chain.elements[1].kind else {
            panic!()
        };
        assert_eq!(spec.gain_db, EDFA_GAIN_MIN_DB);
    }

    #[test]
    fn autoset_reports_infeasible_targets() {
        let plan = ChannelPlan::default();
        let mut chain = TopologyChain {
            plan,
            elements: vec![
                ElementSpec {
                    label: "src".into(),
                    kind: ElementKind::Laser(LaserSpec {
                        frequency: ChannelPlan::default().arof_carrier,
                        power_dbm: -10.0,
                        linewidth: 0.0,
                    }),
                },
                ElementSpec {
                    label: "big_pad".into(),
                    kind: ElementKind::Voa { attenuation_db: 20.0 },
                },
                ElementSpec {
                    label: "amp".into(),
                    kind: ElementKind::Edfa(EdfaSpec::default()),
                },
            ],
            monitor_taps: Default::default(),
        };
        let err = autoset_gains(&mut chain, 0.0).unwrap_err();
        match err {
            SimError::InfeasibleGain { label, needed_db, .. } => {
                assert_eq!(label, "amp");
                assert_abs_diff_eq!(needed_db, 30.0, epsilon = 1e-9);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn misalignment_policies_resolve() {
        let plan = ChannelPlan::default();
        let chain = build_preset(
            PresetName::B,
            &plan,
            &MisalignmentPolicy::Explicit {
                offsets_ghz: vec![-0.8; 4],
            },
            &HardwareProfile::default(),
            &PowerPlan::default(),
            &quiet(),
        )
        .unwrap();
        for e in &chain.elements {
            if let ElementKind::Wss { slots, .. } = &e.kind {
                for s in slots {
                    assert_abs_diff_eq!(s.misalignment, -0.8e9, epsilon = 1e-3);
                }
            }
        }

        let wrong = MisalignmentPolicy::Explicit {
            offsets_ghz: vec![0.0; 3],
        };
        assert!(wrong.offsets_hz(4, &quiet()).is_err());

        let random = MisalignmentPolicy::Random { delta_max_ghz: 1.0 };
        let a = random.offsets_hz(8, &RngStream::new(5, 0)).unwrap();
        let b = random.offsets_hz(8, &RngStream::new(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.abs() <= 1.0e9));
    }

    #[test]
    fn evaluation_is_referentially_transparent() {
        let plan = ChannelPlan::default();
        let chain = build_preset(
            PresetName::A,
            &plan,
            &MisalignmentPolicy::Aligned,
            &HardwareProfile::default(),
            &PowerPlan::default(),
            &quiet(),
        )
        .unwrap();
        let mut field = SampleBuffer::tone(
            1 << 14,
            plan.grid_rate,
            plan.grid_center,
            SignalDomain::Optical,
            plan.arof_carrier - plan.grid_center,
            1e-3,
        );
        field.set_occupied_band(
            plan.arof_carrier - plan.grid_center - 2e9,
            plan.arof_carrier - plan.grid_center + 2e9,
        );
        // Skip the transmitter front end: drive the line directly.
        let mut line = chain.clone();
        line.elements.retain(|e| {
            !matches!(
                e.kind,
                ElementKind::Laser(_) | ElementKind::Mzm(_) | ElementKind::Coupler { .. }
            )
        });
        let inputs = EvalInputs {
            primary: Some(OpticalField::single(field)),
            ..Default::default()
        };
        let out1 = evaluate(&line, &inputs, &RngStream::new(7, 0), &EvalOptions::default()).unwrap();
        let out2 = evaluate(&line, &inputs, &RngStream::new(7, 0), &EvalOptions::default()).unwrap();
        let a = out1.arof_electrical.unwrap();
        let b = out2.arof_electrical.unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
