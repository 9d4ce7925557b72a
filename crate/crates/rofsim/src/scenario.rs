//! Scenario files: the JSON description of one experiment (numerology,
//! channel plan, topology, power plan, noise switches, outputs), with
//! validation that reports every violation by field path.

use crate::coherent::CoherentSpec;
use crate::error::{Result, SimError};
use crate::ofdm::OfdmNumerology;
use crate::topology::{
    ChannelPlan, HardwareProfile, MisalignmentPolicy, PowerPlan, PresetName, TopologyChain,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Upper bound on the capture length; keeps a single run inside a few
/// hundred MB of field buffers.
pub const MAX_PAYLOAD_SYMBOLS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub payload_symbols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseToggles {
    #[serde(default = "yes")]
    pub ase: bool,
    #[serde(default = "yes")]
    pub pd_thermal: bool,
    #[serde(default = "yes")]
    pub pd_shot: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseToggles {
    fn default() -> Self {
        Self {
            ase: true,
            pd_thermal: true,
            pd_shot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologySelect {
    Preset(PresetName),
    Chain(Box<TopologyChain>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputRequests {
    #[serde(default)]
    pub emit_spectra: bool,
    /// Element labels whose output spectra are written when spectra are
    /// requested; empty means the detector input.
    #[serde(default)]
    pub spectrum_taps: Vec<String>,
    /// Labels whose trace entries also carry an OSNR estimate.
    #[serde(default)]
    pub osnr_taps: Vec<String>,
    #[serde(default)]
    pub emit_constellation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub numerology: OfdmNumerology,
    pub capture: Capture,
    #[serde(default = "yes")]
    pub arof_enabled: bool,
    #[serde(default = "yes")]
    pub coherent_enabled: bool,
    pub coherent: CoherentSpec,
    #[serde(default)]
    pub plan: ChannelPlan,
    #[serde(default)]
    pub hardware: HardwareProfile,
    pub power: PowerPlan,
    pub topology: TopologySelect,
    #[serde(default)]
    pub misalignment: MisalignmentPolicy,
    #[serde(default)]
    pub noise: NoiseToggles,
    /// Optional calibration overlay, resolved relative to the scenario file.
    #[serde(default)]
    pub calibration_file: Option<String>,
    #[serde(default)]
    pub outputs: OutputRequests,
}

/// The shipped calibration: receiver thermal-noise density plus the common
/// WSS misalignment. One file calibrates preset A; the other presets reuse
/// it untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub pd_thermal_noise_density_a_per_sqrt_hz: f64,
    pub wss_misalignment_ghz: f64,
}

impl Scenario {
    /// Applies a calibration overlay to the receiver noise and the
    /// misalignment policy.
    pub fn apply_calibration(&mut self, cal: &Calibration) {
        self.hardware.pd.thermal_noise_density = cal.pd_thermal_noise_density_a_per_sqrt_hz;
        self.misalignment = MisalignmentPolicy::Common {
            offset_ghz: cal.wss_misalignment_ghz,
        };
        self.calibration_file = None;
    }

    /// Semantic validation. Collects every violation with its field path
    /// instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            problems.push(format!(
                "schema_version: {} unsupported, expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if let Err(e) = self.numerology.validate() {
            push_nested(&mut problems, "numerology", e);
        }
        if self.capture.payload_symbols == 0 {
            problems.push("capture.payload_symbols: must be at least 1".into());
        }
        if self.capture.payload_symbols > MAX_PAYLOAD_SYMBOLS {
            problems.push(format!(
                "capture.payload_symbols: {} exceeds the {MAX_PAYLOAD_SYMBOLS}-symbol cap",
                self.capture.payload_symbols
            ));
        }
        if let Err(e) = self.plan.validate() {
            push_nested(&mut problems, "plan", e);
        }
        let coherent_slot_width = self.plan.coherent_slot.1 - self.plan.coherent_slot.0;
        if let Err(e) = self.coherent.validate(coherent_slot_width) {
            push_nested(&mut problems, "coherent", e);
        }
        if let Err(e) = self.hardware.mzm.validate() {
            push_nested(&mut problems, "hardware.mzm", e);
        }
        if let Err(e) = self.hardware.pd.validate() {
            push_nested(&mut problems, "hardware.pd", e);
        }
        if !(0.0..=20.0).contains(&self.power.add_port_voa_db) {
            problems.push(format!(
                "power.add_port_voa_db: {} outside the 0-20 dB VOA range",
                self.power.add_port_voa_db
            ));
        }
        if let TopologySelect::Chain(chain) = &self.topology {
            if let Err(e) = chain.validate() {
                push_nested(&mut problems, "topology.chain", e);
            }
        }
        if let MisalignmentPolicy::Explicit { offsets_ghz } = &self.misalignment {
            if offsets_ghz.iter().any(|d| d.abs() > 3.0) {
                problems.push(
                    "misalignment.offsets_ghz: offsets beyond +/-3 GHz exceed half the analog slot"
                        .into(),
                );
            }
        }
        if !self.arof_enabled && !self.coherent_enabled {
            problems.push("arof_enabled/coherent_enabled: at least one channel must be on".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }

    /// Canonical digest over the resolved scenario, stable across runs.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn push_nested(problems: &mut Vec<String>, prefix: &str, err: SimError) {
    match err {
        SimError::Validation(inner) => {
            for p in inner {
                problems.push(format!("{prefix}.{p}"));
            }
        }
        other => problems.push(format!("{prefix}: {other}")),
    }
}

/// Parses scenario text; parse errors carry line and column, semantic
/// problems come back as one diagnostic per field.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| {
        SimError::Validation(vec![format!(
            "parse error at line {}, column {}: {e}",
            e.line(),
            e.column()
        )])
    })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Loads a scenario file and resolves its calibration overlay relative to
/// the scenario's directory.
pub fn load_scenario<P: AsRef<Path>>(path: P) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut scenario = parse_scenario(&text)?;
    if let Some(cal_rel) = scenario.calibration_file.clone() {
        let cal_path: PathBuf = path
            .parent()
            .map(|d| d.join(&cal_rel))
            .unwrap_or_else(|| PathBuf::from(&cal_rel));
        let cal_text = std::fs::read_to_string(&cal_path).map_err(|e| {
            SimError::Validation(vec![format!(
                "calibration_file: cannot read '{}': {e}",
                cal_path.display()
            )])
        })?;
        let cal: Calibration = serde_json::from_str(&cal_text).map_err(|e| {
            SimError::Validation(vec![format!(
                "calibration_file: '{}' line {}, column {}: {e}",
                cal_path.display(),
                e.line(),
                e.column()
            )])
        })?;
        scenario.apply_calibration(&cal);
        scenario.validate()?;
    }
    Ok(scenario)
}

/// A ready-to-run reference scenario on the published numerology and
/// channel plan.
pub fn reference_scenario(preset: PresetName) -> Scenario {
    let received_dbm = match preset {
        PresetName::A => 2.0,
        PresetName::B => -1.0,
        PresetName::C => -3.0,
        PresetName::D => -6.0,
    };
    Scenario {
        schema_version: SCHEMA_VERSION,
        name: format!("paper_topology_{preset:?}"),
        seed: 20240917,
        numerology: OfdmNumerology::table1(),
        capture: Capture {
            payload_symbols: 64,
        },
        arof_enabled: true,
        coherent_enabled: true,
        coherent: CoherentSpec {
            launch_power_dbm: 7.0,
            impl_noise_snr_db: Some(crate::coherent::TRANSPONDER_FLOOR_SNR_DB),
            ..Default::default()
        },
        plan: ChannelPlan::default(),
        hardware: HardwareProfile::default(),
        power: PowerPlan {
            received_dbm,
            ..Default::default()
        },
        topology: TopologySelect::Preset(preset),
        misalignment: MisalignmentPolicy::Aligned,
        noise: NoiseToggles::default(),
        calibration_file: Some("calibration.json".into()),
        outputs: OutputRequests {
            osnr_taps: vec!["rx_preamp".into()],
            ..Default::default()
        },
    }
}
