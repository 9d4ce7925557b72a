//! Scenario execution: transmitter generation, gain/VOA planning passes,
//! chain evaluation, receiver metrics, and the report/CSV artifacts.

use crate::analysis::{
    measure_osnr_from_spectrum, measure_sidebands_from_spectrum, FloorSides, Osnr, OsnrConfig,
    SidebandReport, SpectrumEstimate,
};
use crate::coherent::{coherent_receive, generate_dp_qpsk, CoherentMetrics};
use crate::error::{Result, SimError};
use crate::ofdm::{demodulate, generate_waveform, EvmResult, OfdmFrame};
use crate::optics::{OpticalField, WssFilterProfile};
use crate::rng::{streams, RngStream};
use crate::scenario::{Scenario, TopologySelect};
use crate::signal::{SampleBuffer, SignalDomain};
use crate::topology::{
    build_preset, evaluate, ElementKind, EvalInputs, EvalOptions, PowerTrace, TopologyChain,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Everything a finished run reports. Requested quantities that could not be
/// produced appear in `failures` with their reason instead of a number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_name: String,
    pub scenario_digest: String,
    pub preset: Option<String>,
    pub wss_count: usize,
    pub fiber_km: f64,
    /// Exact occupied bandwidth on the modem grid, Hz.
    pub occupied_bandwidth_hz: f64,
    /// The same value at display precision, MHz.
    pub occupied_bandwidth_mhz_reported: f64,
    pub gross_rate_bps: f64,
    pub net_rate_bps: f64,
    pub evm: Option<EvmResult>,
    pub coherent: Option<CoherentMetrics>,
    pub sidebands: Option<SidebandReport>,
    /// Coherent power routed out of the analog drop port, dBm.
    pub leakage_dbm: Option<f64>,
    pub received_power_dbm: Option<f64>,
    pub rx_voa_db: Option<f64>,
    pub arof_papr_db: Option<f64>,
    pub power_trace: PowerTrace,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// Report plus the bulky artifacts that only go to CSV files.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub constellation: Vec<Complex64>,
    pub spectra: Vec<(String, SpectrumEstimate)>,
}

fn apply_noise_toggles(chain: &mut TopologyChain, scenario: &Scenario) {
    for e in chain.elements.iter_mut() {
        match &mut e.kind {
            ElementKind::Edfa(spec) => spec.ase_enabled &= scenario.noise.ase,
            ElementKind::Pd(spec) => {
                if !scenario.noise.pd_thermal {
                    spec.thermal_noise_density = 0.0;
                }
                spec.shot_noise &= scenario.noise.pd_shot;
            }
            _ => {}
        }
    }
}

fn silence_all_noise(chain: &mut TopologyChain) {
    for e in chain.elements.iter_mut() {
        match &mut e.kind {
            ElementKind::Edfa(spec) => spec.ase_enabled = false,
            ElementKind::Pd(spec) => {
                spec.thermal_noise_density = 0.0;
                spec.shot_noise = false;
            }
            _ => {}
        }
    }
}

fn find_rx_voa(chain: &TopologyChain) -> Option<usize> {
    let pd = chain
        .elements
        .iter()
        .rposition(|e| matches!(e.kind, ElementKind::Pd(_)))?;
    chain.elements[..pd]
        .iter()
        .rposition(|e| matches!(e.kind, ElementKind::Voa { .. }))
}

fn build_chain(scenario: &Scenario) -> Result<TopologyChain> {
    let rng = RngStream::new(scenario.seed, streams::MISALIGNMENT);
    let mut chain = match &scenario.topology {
        TopologySelect::Preset(name) => build_preset(
            *name,
            &scenario.plan,
            &scenario.misalignment,
            &scenario.hardware,
            &scenario.power,
            &rng,
        )?,
        TopologySelect::Chain(chain) => {
            let mut chain = (**chain).clone();
            if scenario.misalignment != crate::topology::MisalignmentPolicy::Aligned {
                let offsets = scenario
                    .misalignment
                    .offsets_hz(chain.wss_count(), &rng)?;
                chain.set_misalignments(&offsets)?;
            }
            chain.validate()?;
            chain
        }
    };
    if !scenario.arof_enabled {
        chain.elements.retain(|e| {
            !matches!(e.kind, ElementKind::Laser(_) | ElementKind::Mzm(_))
        });
    }
    for tap in &scenario.outputs.osnr_taps {
        chain.monitor_taps.insert(tap.clone());
    }
    apply_noise_toggles(&mut chain, scenario);
    Ok(chain)
}

/// Runs one scenario end to end. Deterministic under a fixed seed.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutcome> {
    let started = std::time::Instant::now();
    scenario.validate()?;
    let num = &scenario.numerology;
    let mut chain = build_chain(scenario)?;

    let frame = OfdmFrame::random(
        num,
        scenario.capture.payload_symbols,
        &RngStream::new(scenario.seed, streams::PAYLOAD_BITS),
    );
    let drive = generate_waveform(&frame, num)?;
    let grid_len = (drive.len() as f64 * scenario.plan.grid_rate / drive.sample_rate()).round()
        as usize;

    // The coherent tributary spans the same capture window exactly.
    let coherent_len_native =
        (grid_len as f64 * scenario.coherent.modem_rate() / scenario.plan.grid_rate).round()
            as usize;
    let (coherent_field, coherent_ref) = if scenario.coherent_enabled {
        let n_symbols = coherent_len_native / 2;
        let (field, reference) =
            generate_dp_qpsk(&scenario.coherent, n_symbols, &RngStream::new(scenario.seed, 0))?;
        (Some(field), Some(reference))
    } else {
        (None, None)
    };

    let inputs = EvalInputs {
        drive: scenario.arof_enabled.then(|| drive.clone()),
        coherent: coherent_field,
        primary: (!scenario.arof_enabled).then(|| {
            OpticalField::single(SampleBuffer::silence(
                grid_len,
                scenario.plan.grid_rate,
                scenario.plan.grid_center,
                SignalDomain::Optical,
            ))
        }),
    };
    let rng = RngStream::new(scenario.seed, 1);

    // Receive-side VOA sweep: hit the requested detector power on a
    // noiseless pass, mirroring the bench procedure.
    let mut rx_voa_db = None;
    if let Some(voa_index) = find_rx_voa(&chain) {
        let mut probe = chain.clone();
        silence_all_noise(&mut probe);
        if let ElementKind::Voa { attenuation_db } = &mut probe.elements[voa_index].kind {
            *attenuation_db = 0.0;
        }
        let label = probe.elements[voa_index].label.clone();
        let nominal = evaluate(&probe, &inputs, &rng, &EvalOptions::default())?;
        let at_voa = nominal
            .trace
            .get(&label)
            .ok_or_else(|| SimError::Invalid(format!("no trace entry at '{label}'")))?
            .power_dbm;
        let needed = at_voa - scenario.power.received_dbm;
        if !(-0.05..=20.0 + 0.05).contains(&needed) {
            return Err(SimError::InfeasibleGain {
                label,
                needed_db: -needed,
                min_db: -20.0,
                max_db: 0.0,
            });
        }
        let setting = needed.clamp(0.0, 20.0);
        if let ElementKind::Voa { attenuation_db } = &mut chain.elements[voa_index].kind {
            *attenuation_db = setting;
        }
        rx_voa_db = Some(setting);
    }

    let mut options = EvalOptions::default();
    if scenario.outputs.emit_spectra {
        let taps: BTreeSet<String> = if scenario.outputs.spectrum_taps.is_empty() {
            BTreeSet::from(["pd".to_string(), "rx_demux".to_string()])
        } else {
            scenario.outputs.spectrum_taps.iter().cloned().collect()
        };
        options.spectrum_taps = taps;
    }
    let out = evaluate(&chain, &inputs, &rng, &options)?;

    let mut failures = Vec::new();
    let mut constellation = Vec::new();

    let evm = if scenario.arof_enabled {
        match &out.arof_electrical {
            Some(electrical) => match demodulate(electrical, num, &frame) {
                Ok(mut result) => {
                    constellation = std::mem::take(&mut result.constellation);
                    Some(result)
                }
                Err(e) => {
                    failures.push(format!("arof_demodulation: {e}"));
                    None
                }
            },
            None => {
                failures.push("arof_demodulation: chain produced no detected waveform".into());
                None
            }
        }
    } else {
        None
    };

    let sidebands = if scenario.arof_enabled {
        match &out.arof_optical_at_pd {
            Some(field) => {
                let spectrum = field.summed_spectrum(20e6)?;
                match measure_sidebands_from_spectrum(
                    &spectrum,
                    scenario.plan.arof_carrier,
                    num.if_frequency,
                    num.occupied_bandwidth_exact(),
                ) {
                    Ok(report) => Some(report),
                    Err(e) => {
                        failures.push(format!("sideband_measurement: {e}"));
                        None
                    }
                }
            }
            None => None,
        }
    } else {
        None
    };

    // Coherent metrics: demodulate the coherent drop port; OSNR comes from
    // the pre-drop field where the floor is still observable.
    let coherent = if let (Some(reference), Some(port)) = (&coherent_ref, &out.coherent_output) {
        match coherent_receive(
            port,
            &scenario.coherent,
            reference,
            out.accumulated_dispersion_si,
            None,
        ) {
            Ok(mut metrics) => {
                if let Some(pre) = &out.pre_drop {
                    let spectrum = pre.summed_spectrum(200e6)?;
                    let cfg = OsnrConfig {
                        sides: FloorSides::Low,
                        ..Default::default()
                    };
                    metrics.osnr_db = match measure_osnr_from_spectrum(
                        &spectrum,
                        scenario.plan.coherent_slot,
                        &cfg,
                    )? {
                        Osnr::Db { osnr_db } => Some(osnr_db),
                        Osnr::AboveCeiling { ceiling_db } => Some(ceiling_db),
                        Osnr::Unmeasurable { .. } => None,
                    };
                }
                Some(metrics)
            }
            Err(e) => {
                failures.push(format!("coherent_receiver: {e}"));
                None
            }
        }
    } else {
        None
    };

    // Leakage: coherent-band power that the misaligned analog port passes.
    let leakage_dbm = match (&out.pre_drop, drop_profile(&chain)) {
        (Some(pre), Some(profile)) if scenario.coherent_enabled => {
            let spectrum = pre.summed_spectrum(100e6)?;
            let mut power = 0.0;
            for (f, p) in spectrum.frequencies.iter().zip(&spectrum.psd) {
                if *f <= scenario.plan.coherent_slot.1 {
                    power += p * spectrum.bin_width * profile.power_transfer(*f);
                }
            }
            Some((10.0 * (power.max(f64::MIN_POSITIVE) / 1e-3).log10()).max(-80.0))
        }
        _ => None,
    };

    let received_power_dbm = out
        .trace
        .get("rx_voa")
        .or_else(|| {
            find_rx_voa(&chain).and_then(|i| out.trace.get(&chain.elements[i].label))
        })
        .map(|t| t.power_dbm);

    let preset = match &scenario.topology {
        TopologySelect::Preset(p) => Some(format!("{p:?}")),
        TopologySelect::Chain(_) => None,
    };

    let report = RunReport {
        scenario_name: scenario.name.clone(),
        scenario_digest: scenario.digest(),
        preset,
        wss_count: chain.wss_count(),
        fiber_km: chain.total_fiber_km(),
        occupied_bandwidth_hz: num.occupied_bandwidth_exact(),
        occupied_bandwidth_mhz_reported: (num.occupied_bandwidth_exact() / 1e6 * 100.0).round()
            / 100.0,
        gross_rate_bps: num.gross_rate(),
        net_rate_bps: num.net_rate(),
        evm,
        coherent,
        sidebands,
        leakage_dbm,
        received_power_dbm,
        rx_voa_db,
        arof_papr_db: scenario.arof_enabled.then(|| drive.papr_db()),
        power_trace: out.trace,
        warnings: out.warnings,
        failures,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };

    Ok(RunOutcome {
        report,
        constellation,
        spectra: out.spectra,
    })
}

fn drop_profile(chain: &TopologyChain) -> Option<WssFilterProfile> {
    chain.elements.iter().find_map(|e| match &e.kind {
        ElementKind::WssDrop { arof_slot, .. } => Some(arof_slot.clone()),
        _ => None,
    })
}

/// One point of a parameter sweep.
#[derive(Debug)]
pub struct SweepPoint {
    pub value: serde_json::Value,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Sets `axis` (a dot path into the scenario JSON) to each value and runs
/// the resulting scenarios. Per-point failures are recorded and the sweep
/// continues. `workers` caps the number of parallel points.
pub fn run_sweep(
    base: &Scenario,
    axis: &str,
    values: &[serde_json::Value],
    workers: usize,
) -> Result<Vec<SweepPoint>> {
    let base_value = serde_json::to_value(base)?;
    resolve_path(&base_value, axis)?;

    let scenarios: Vec<std::result::Result<Scenario, String>> = values
        .iter()
        .map(|v| {
            let mut point = base_value.clone();
            set_path(&mut point, axis, v.clone())?;
            let scenario: Scenario = serde_json::from_value(point)
                .map_err(|e| format!("axis value {v}: {e}"))?;
            scenario.validate().map_err(|e| e.to_string())?;
            Ok(scenario)
        })
        .collect();

    let workers = workers.max(1);
    let mut outcomes: Vec<Option<SweepPoint>> = (0..values.len()).map(|_| None).collect();
    let jobs: Vec<(usize, &std::result::Result<Scenario, String>)> =
        scenarios.iter().enumerate().collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = jobs.chunks(values.len().div_ceil(workers).max(1)).collect();
        let mut handles = Vec::new();
        for chunk in chunks {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|(i, s)| {
                        let outcome = match s {
                            Ok(scenario) => run_scenario(scenario).map_err(|e| e.to_string()),
                            Err(msg) => Err(msg.clone()),
                        };
                        (*i, outcome)
                    })
                    .collect::<Vec<_>>()
            }));
        }
        for handle in handles {
            for (i, outcome) in handle.join().expect("sweep worker panicked") {
                outcomes[i] = Some(SweepPoint {
                    value: values[i].clone(),
                    outcome,
                });
            }
        }
    });
    Ok(outcomes.into_iter().map(|p| p.expect("all points ran")).collect())
}

fn resolve_path<'a>(root: &'a serde_json::Value, path: &str) -> Result<&'a serde_json::Value> {
    let mut cursor = root;
    for segment in path.split('.') {
        cursor = cursor.get(segment).ok_or_else(|| {
            SimError::Invalid(format!("axis path '{path}' has no field '{segment}'"))
        })?;
    }
    Ok(cursor)
}

fn set_path(
    root: &mut serde_json::Value,
    path: &str,
    value: serde_json::Value,
) -> std::result::Result<(), String> {
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        cursor = cursor
            .get_mut(*segment)
            .ok_or_else(|| format!("axis path '{path}' has no field '{segment}'"))?;
    }
    let last = segments.last().unwrap();
    match cursor.get_mut(*last) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(format!("axis path '{path}' has no field '{last}'")),
    }
}

/// Writes bytes to `path` atomically (temp file then rename).
pub fn atomic_write<P: AsRef<Path>>(path: P, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_report_json<P: AsRef<Path>>(path: P, report: &RunReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn write_power_trace_csv<P: AsRef<Path>>(path: P, trace: &PowerTrace) -> Result<()> {
    let mut text = String::from("label,power_dbm,osnr_db\n");
    for entry in &trace.entries {
        let osnr = entry
            .osnr_db
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        text.push_str(&format!("{},{:.6},{}\n", entry.label, entry.power_dbm, osnr));
    }
    atomic_write(path, text.as_bytes())
}

pub fn write_per_subcarrier_csv<P: AsRef<Path>>(path: P, evm: &EvmResult) -> Result<()> {
    let mut text = String::from("subcarrier_index,evm_percent,mean_power_db\n");
    for (i, (e, p)) in evm
        .per_subcarrier_evm_percent
        .iter()
        .zip(&evm.per_subcarrier_power_db)
        .enumerate()
    {
        text.push_str(&format!("{i},{e:.6},{p:.6}\n"));
    }
    atomic_write(path, text.as_bytes())
}

pub fn write_constellation_csv<P: AsRef<Path>>(path: P, points: &[Complex64]) -> Result<()> {
    let mut text = String::from("i,q\n");
    for p in points {
        text.push_str(&format!("{:.9},{:.9}\n", p.re, p.im));
    }
    atomic_write(path, text.as_bytes())
}

pub fn write_spectrum_csv<P: AsRef<Path>>(path: P, spectrum: &SpectrumEstimate) -> Result<()> {
    let mut text = String::from("frequency_hz,psd_dbm_per_hz\n");
    for i in 0..spectrum.len() {
        text.push_str(&format!(
            "{:.3},{:.6}\n",
            spectrum.frequencies[i],
            spectrum.psd_dbm_per_hz(i)
        ));
    }
    atomic_write(path, text.as_bytes())
}

/// Aggregate CSV over sweep points, one row per point in order.
pub fn write_sweep_csv<P: AsRef<Path>>(path: P, axis: &str, points: &[SweepPoint]) -> Result<()> {
    let mut text = String::from(
        "axis_value,wss_count,fiber_km,received_dbm,evm_percent,evm_std_error,q_factor_db,snr_db,sideband_asymmetry_db,error\n",
    );
    for p in points {
        match &p.outcome {
            Ok(outcome) => {
                let r = &outcome.report;
                let evm = r
                    .evm
                    .as_ref()
                    .map(|e| format!("{:.6}", e.evm_rms_percent))
                    .unwrap_or_default();
                let se = r
                    .evm
                    .as_ref()
                    .map(|e| format!("{:.6}", e.evm_std_error_percent))
                    .unwrap_or_default();
                let q = r
                    .coherent
                    .as_ref()
                    .map(|c| format!("{:.6}", c.q_factor_db))
                    .unwrap_or_default();
                let snr = r
                    .coherent
                    .as_ref()
                    .map(|c| format!("{:.6}", c.snr_db))
                    .unwrap_or_default();
                let asym = r
                    .sidebands
                    .as_ref()
                    .map(|s| format!("{:.6}", s.asymmetry_db))
                    .unwrap_or_default();
                let recv = r
                    .received_power_dbm
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default();
                text.push_str(&format!(
                    "{},{},{:.3},{},{},{},{},{},{},\n",
                    p.value, r.wss_count, r.fiber_km, recv, evm, se, q, snr, asym
                ));
            }
            Err(msg) => {
                text.push_str(&format!(
                    "{},,,,,,,,,\"{}\"\n",
                    p.value,
                    msg.replace('"', "'")
                ));
            }
        }
    }
    let _ = axis;
    atomic_write(path, text.as_bytes())
}
