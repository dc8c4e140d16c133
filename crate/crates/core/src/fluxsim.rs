//! Calibrated stochastic upset generator.
//!
//! A [`FlipRateModel`] is fitted to observed flip counts, then an
//! [`ExposurePlan`] is turned into a homogeneous Poisson stream of
//! [`FlipEvent`]s. Every run is a pure function of `(plan, model)`; the
//! random stream comes from the plan's seed alone.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafiles::{self, DataError, DataSource};
use crate::memmodel::{FlipEvent, MemoryDevice, TestPattern, GIB};
use crate::physics::{attenuate, AttenuationTable, Isotope, PhysicsError, ShieldSpec};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Upsets per GiB-day at ground level, midpoint of 0.2..1 per day.
pub const DEFAULT_AMBIENT_PER_DAY_PER_GIB: f64 = 0.6;

/// Source-to-module distance at which the lab observations were taken.
pub const REFERENCE_DISTANCE_CM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum FluxError {
    #[error("no observations supplied")]
    NoObservations,
    #[error("observation {index}: {reason}")]
    BadObservation { index: usize, reason: String },
    #[error("isotope `{0}` has no 0xFF reference observation")]
    MissingReference(String),
    #[error("model has no rate for isotope `{0}`")]
    Uncalibrated(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("plan has zero effective rate; cannot place {0} conditioned flips")]
    ZeroRate(u64),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub isotope: String,
    pub pattern: TestPattern,
    pub duration_s: f64,
    pub region_gib: f64,
    pub flip_count: u64,
}

#[derive(Deserialize)]
struct ObservationFile {
    observations: Vec<Observation>,
}

/// The lab observations shipped in `calibration.toml`.
pub fn load_observations(source: &DataSource) -> Result<Vec<Observation>, DataError> {
    let file: ObservationFile = source.parse(datafiles::CALIBRATION)?;
    Ok(file.observations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotopeRate {
    /// Upsets per second per GiB with the 0xFF pattern at the reference
    /// geometry.
    pub base_rate_per_s_per_gib: f64,
    /// Rate of each observed pattern relative to 0xFF.
    pub pattern_factor: BTreeMap<TestPattern, f64>,
}

impl IsotopeRate {
    /// Patterns without an observation fall back to the 0xFF rate.
    pub fn factor(&self, pattern: TestPattern) -> f64 {
        self.pattern_factor.get(&pattern).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateModel {
    pub isotopes: BTreeMap<String, IsotopeRate>,
    pub ambient_rate_per_s_per_gib: f64,
}

impl FlipRateModel {
    pub fn rate_for(&self, isotope: &Isotope) -> Option<&IsotopeRate> {
        self.isotopes
            .iter()
            .find(|(name, _)| isotope.matches(name))
            .map(|(_, r)| r)
    }

    pub fn with_ambient_per_day(mut self, per_day_per_gib: f64) -> Self {
        self.ambient_rate_per_s_per_gib = per_day_per_gib / SECONDS_PER_DAY;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationWarning {
    /// Every observation of the isotope saw zero flips; its rate is 0.
    ZeroCounts { isotope: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: FlipRateModel,
    pub warnings: Vec<CalibrationWarning>,
}

/// Maximum-likelihood Poisson rates from observed counts.
///
/// The base rate of an isotope is total 0xFF flips over total 0xFF
/// exposure (GiB·s); each pattern factor is that pattern's pooled rate
/// divided by the base rate. Input order does not affect the result.
pub fn calibrate(observations: &[Observation]) -> Result<Calibration, FluxError> {
    if observations.is_empty() {
        return Err(FluxError::NoObservations);
    }
    for (index, o) in observations.iter().enumerate() {
        let bad = |reason: &str| FluxError::BadObservation {
            index,
            reason: reason.to_string(),
        };
        if !(o.duration_s > 0.0 && o.duration_s.is_finite()) {
            return Err(bad("duration must be positive"));
        }
        if !(o.region_gib > 0.0 && o.region_gib.is_finite()) {
            return Err(bad("region size must be positive"));
        }
        if o.isotope.trim().is_empty() {
            return Err(bad("isotope name is empty"));
        }
    }

    let mut sorted: Vec<&Observation> = observations.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.isotope, a.pattern, a.flip_count)
            .cmp(&(&b.isotope, b.pattern, b.flip_count))
            .then(a.duration_s.total_cmp(&b.duration_s))
            .then(a.region_gib.total_cmp(&b.region_gib))
    });

    // isotope -> pattern -> (flips, GiB·s)
    let mut pooled: BTreeMap<&str, BTreeMap<TestPattern, (u64, f64)>> = BTreeMap::new();
    for o in sorted {
        let slot = pooled
            .entry(o.isotope.as_str())
            .or_default()
            .entry(o.pattern)
            .or_insert((0, 0.0));
        slot.0 += o.flip_count;
        slot.1 += o.duration_s * o.region_gib;
    }

    let mut isotopes = BTreeMap::new();
    let mut warnings = Vec::new();
    for (name, patterns) in pooled {
        let (ref_flips, ref_exposure) = *patterns
            .get(&TestPattern::ONES)
            .ok_or_else(|| FluxError::MissingReference(name.to_string()))?;
        let base = ref_flips as f64 / ref_exposure;
        let total: u64 = patterns.values().map(|(n, _)| n).sum();
        if total == 0 {
            warnings.push(CalibrationWarning::ZeroCounts {
                isotope: name.to_string(),
            });
        }
        let pattern_factor = patterns
            .iter()
            .map(|(&p, &(n, exposure))| {
                let factor = if base > 0.0 {
                    (n as f64 / exposure) / base
                } else {
                    1.0
                };
                (p, factor)
            })
            .collect();
        isotopes.insert(
            name.to_string(),
            IsotopeRate {
                base_rate_per_s_per_gib: base,
                pattern_factor,
            },
        );
    }

    Ok(Calibration {
        model: FlipRateModel {
            isotopes,
            ambient_rate_per_s_per_gib: DEFAULT_AMBIENT_PER_DAY_PER_GIB / SECONDS_PER_DAY,
        },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    Isotope(Isotope),
    /// Ground-level background only.
    Ambient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposurePlan {
    pub source: Source,
    pub shield: ShieldSpec,
    pub device: MemoryDevice,
    pub pattern: TestPattern,
    pub duration_s: f64,
    pub seed: u64,
    /// Inverse-square extrapolation from the reference distance. `None`
    /// means the reference geometry the model was calibrated at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_cm: Option<f64>,
}

impl ExposurePlan {
    pub fn new(
        isotope: Isotope,
        device: MemoryDevice,
        pattern: TestPattern,
        duration_s: f64,
        seed: u64,
    ) -> Self {
        Self {
            source: Source::Isotope(isotope),
            shield: ShieldSpec::none(),
            device,
            pattern,
            duration_s,
            seed,
            distance_cm: None,
        }
    }

    pub fn ambient(device: MemoryDevice, pattern: TestPattern, duration_s: f64, seed: u64) -> Self {
        Self {
            source: Source::Ambient,
            shield: ShieldSpec::none(),
            device,
            pattern,
            duration_s,
            seed,
            distance_cm: None,
        }
    }

    pub fn with_shield(self, shield: ShieldSpec) -> Self {
        Self { shield, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), FluxError> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(FluxError::InvalidPlan(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if let Some(d) = self.distance_cm {
            if !(d > 0.0 && d.is_finite()) {
                return Err(FluxError::InvalidPlan(format!("distance must be positive, got {d}")));
            }
        }
        Ok(())
    }

    fn region_len(&self) -> u64 {
        self.device.test_region_bytes
    }
}

/// Where the upsets of a plan come from, split by shield coverage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBreakdown {
    /// Flips per second over the bare part of the test region.
    pub open_rate_per_s: f64,
    /// Flips per second over the part under lead.
    pub shielded_rate_per_s: f64,
    /// Transmitted over unshielded intensity of the lines that can upset
    /// the device.
    pub transmission: f64,
    /// Covered interval `[start, end)` within the test region.
    pub shielded_range: (u64, u64),
    /// True when no line reaches the device's threshold.
    pub below_threshold: bool,
}

impl RateBreakdown {
    pub fn total_rate_per_s(&self) -> f64 {
        self.open_rate_per_s + self.shielded_rate_per_s
    }
}

pub fn rate_breakdown(
    plan: &ExposurePlan,
    model: &FlipRateModel,
    attenuation: &AttenuationTable,
) -> Result<RateBreakdown, FluxError> {
    plan.validate()?;
    let len = plan.region_len();
    let (s, e) = plan.shield.covered_within(len);
    let shielded_gib = (e - s) as f64 / GIB as f64;
    let open_gib = (len - (e - s)) as f64 / GIB as f64;

    let distance = plan
        .distance_cm
        .map_or(1.0, |d| (REFERENCE_DISTANCE_CM / d).powi(2));

    let (per_gib, transmission, below_threshold) = match &plan.source {
        Source::Ambient => (model.ambient_rate_per_s_per_gib, 1.0, false),
        Source::Isotope(iso) => {
            let rate = model
                .rate_for(iso)
                .ok_or_else(|| FluxError::Uncalibrated(iso.name.clone()))?;
            let upsetting: Vec<_> = iso
                .lines
                .iter()
                .filter(|l| plan.device.is_susceptible(l) && l.intensity > 0.0)
                .collect();
            if upsetting.is_empty() {
                (0.0, 0.0, true)
            } else {
                let bare: f64 = upsetting.iter().map(|l| l.intensity).sum();
                let transmission = if e > s {
                    let mut through = 0.0;
                    for line in &upsetting {
                        through += attenuate(line, plan.shield.lead_thickness_mm, attenuation)?
                            .intensity;
                    }
                    through / bare
                } else {
                    1.0
                };
                let per_gib = rate.base_rate_per_s_per_gib * rate.factor(plan.pattern) * distance;
                (per_gib, transmission, false)
            }
        }
    };

    Ok(RateBreakdown {
        open_rate_per_s: per_gib * open_gib,
        shielded_rate_per_s: per_gib * shielded_gib * transmission,
        transmission,
        shielded_range: (s, e),
        below_threshold,
    })
}

/// Mean number of flips over the plan's duration.
pub fn expected_count(
    plan: &ExposurePlan,
    model: &FlipRateModel,
    attenuation: &AttenuationTable,
) -> Result<f64, FluxError> {
    Ok(rate_breakdown(plan, model, attenuation)?.total_rate_per_s() * plan.duration_s)
}

/// Mean waiting time between flips; infinite when the rate is zero.
pub fn expected_seconds_per_flip(
    model: &FlipRateModel,
    plan: &ExposurePlan,
    attenuation: &AttenuationTable,
) -> Result<f64, FluxError> {
    let rate = rate_breakdown(plan, model, attenuation)?.total_rate_per_s();
    Ok(if rate > 0.0 { 1.0 / rate } else { f64::INFINITY })
}

struct Placer {
    len: u64,
    shielded: (u64, u64),
    open_share: f64,
}

impl Placer {
    fn new(plan: &ExposurePlan, rates: &RateBreakdown) -> Self {
        Self {
            len: plan.region_len(),
            shielded: rates.shielded_range,
            open_share: rates.open_rate_per_s / rates.total_rate_per_s(),
        }
    }

    fn offset(&self, rng: &mut ChaCha8Rng) -> u64 {
        let (s, e) = self.shielded;
        let covered = e - s;
        if covered < self.len && rng.random::<f64>() < self.open_share {
            let idx = rng.random_range(0..self.len - covered);
            if idx >= s {
                idx + covered
            } else {
                idx
            }
        } else {
            rng.random_range(s..e)
        }
    }

    fn event(&self, rng: &mut ChaCha8Rng, t: f64, pattern: TestPattern) -> FlipEvent {
        let offset = self.offset(rng);
        let bit = rng.random_range(0..8u8);
        FlipEvent::new(t, offset, bit, pattern, self.len).expect("placer stays in range")
    }
}

/// Poisson stream of upsets for the plan, sorted by time.
pub fn simulate_exposure(
    plan: &ExposurePlan,
    model: &FlipRateModel,
    attenuation: &AttenuationTable,
) -> Result<Vec<FlipEvent>, FluxError> {
    let rates = rate_breakdown(plan, model, attenuation)?;
    let rate = rates.total_rate_per_s();
    if rate <= 0.0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let gaps = Exp::new(rate).expect("rate is positive and finite");
    let placer = Placer::new(plan, &rates);
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut rng);
        if t >= plan.duration_s {
            break;
        }
        events.push(placer.event(&mut rng, t, plan.pattern));
    }
    Ok(events)
}

/// Exactly `count` upsets with the plan's spatial law and times drawn
/// as Poisson arrivals conditioned on the total. Used to replay a
/// recorded session whose count is known.
pub fn simulate_with_count(
    plan: &ExposurePlan,
    model: &FlipRateModel,
    attenuation: &AttenuationTable,
    count: u64,
) -> Result<Vec<FlipEvent>, FluxError> {
    let rates = rate_breakdown(plan, model, attenuation)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if rates.total_rate_per_s() <= 0.0 {
        return Err(FluxError::ZeroRate(count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut times: Vec<f64> = (0..count)
        .map(|_| rng.random::<f64>() * plan.duration_s)
        .collect();
    times.sort_by(f64::total_cmp);
    let placer = Placer::new(plan, &rates);
    Ok(times
        .into_iter()
        .map(|t| placer.event(&mut rng, t, plan.pattern))
        .collect())
}

/// First line of an event log: everything needed to replay the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub record: String,
    pub tool_version: String,
    pub plan: ExposurePlan,
    pub model: FlipRateModel,
    pub rate_per_s: f64,
    pub expected_count: f64,
    /// Set when the run was conditioned on a known flip count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned_count: Option<u64>,
}

impl LogHeader {
    pub const RECORD: &'static str = "header";

    pub fn new(
        plan: ExposurePlan,
        model: FlipRateModel,
        rates: &RateBreakdown,
        conditioned_count: Option<u64>,
    ) -> Self {
        Self {
            record: Self::RECORD.to_string(),
            tool_version: crate::VERSION.to_string(),
            expected_count: rates.total_rate_per_s() * plan.duration_s,
            rate_per_s: rates.total_rate_per_s(),
            plan,
            model,
            conditioned_count,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("empty log: missing header line")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_event_log<W: Write>(
    mut out: W,
    header: &LogHeader,
    events: &[FlipEvent],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for ev in events {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses a log written by [`write_event_log`], validating every event
/// against the header's pattern and region.
pub fn read_event_log<R: BufRead>(input: R) -> Result<(LogHeader, Vec<FlipEvent>), LogError> {
    let mut lines = input.lines().enumerate();
    let header: LogHeader = loop {
        match lines.next() {
            None => return Err(LogError::MissingHeader),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let header: LogHeader =
                    serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
                        line: i + 1,
                        message: format!("bad header: {e}"),
                    })?;
                if header.record != LogHeader::RECORD {
                    return Err(LogError::Corrupt {
                        line: i + 1,
                        message: format!("expected header record, found `{}`", header.record),
                    });
                }
                break header;
            }
        }
    };
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: FlipEvent = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        ev.validate(header.plan.pattern, header.plan.device.test_region_bytes)
            .map_err(|e| LogError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
        events.push(ev);
    }
    Ok((header, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memmodel::{make_device, DevicePreset, FlipDirection};
    use crate::physics::{Coverage, PhysicsData};

    fn table() -> PhysicsData {
        PhysicsData::builtin()
    }

    fn lab_model() -> FlipRateModel {
        calibrate(&load_observations(&DataSource::embedded()).unwrap())
            .unwrap()
            .model
    }

    fn cobalt_plan(seed: u64) -> ExposurePlan {
        let d = table();
        ExposurePlan::new(
            d.isotope("Co-60").unwrap().clone(),
            make_device(DevicePreset::T41p1gb),
            TestPattern::ONES,
            1200.0,
            seed,
        )
    }

    #[test]
    fn cobalt_calibration_matches_table() {
        let m = lab_model();
        let co = &m.isotopes["Co-60"];
        assert!((co.base_rate_per_s_per_gib - 27.0 / 1200.0).abs() < 1e-15);
        assert_eq!(co.factor(TestPattern::ONES), 1.0);
        assert!((co.factor(TestPattern::ZEROS) - 22.0 / 27.0).abs() < 1e-12);
        assert!((co.factor(TestPattern::LETTER_A) - 19.0 / 27.0).abs() < 1e-12);
        let cs = &m.isotopes["Cs-137"];
        assert!((cs.base_rate_per_s_per_gib - 7.0 / 1200.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_is_order_independent() {
        let mut obs = load_observations(&DataSource::embedded()).unwrap();
        let a = calibrate(&obs).unwrap();
        obs.reverse();
        let b = calibrate(&obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn null_calibration_warns() {
        let obs = [Observation {
            isotope: "Cs-137".into(),
            pattern: TestPattern::ONES,
            duration_s: 1200.0,
            region_gib: 4.0,
            flip_count: 0,
        }];
        let cal = calibrate(&obs).unwrap();
        assert_eq!(cal.model.isotopes["Cs-137"].base_rate_per_s_per_gib, 0.0);
        assert_eq!(
            cal.warnings,
            vec![CalibrationWarning::ZeroCounts {
                isotope: "Cs-137".into()
            }]
        );
    }

    #[test]
    fn calibration_input_errors() {
        assert!(matches!(calibrate(&[]), Err(FluxError::NoObservations)));
        let no_ref = [Observation {
            isotope: "Co-60".into(),
            pattern: TestPattern::ZEROS,
            duration_s: 10.0,
            region_gib: 1.0,
            flip_count: 3,
        }];
        assert!(matches!(calibrate(&no_ref), Err(FluxError::MissingReference(_))));
        let bad = [Observation {
            isotope: "Co-60".into(),
            pattern: TestPattern::ONES,
            duration_s: 0.0,
            region_gib: 1.0,
            flip_count: 3,
        }];
        assert!(matches!(calibrate(&bad), Err(FluxError::BadObservation { index: 0, .. })));
    }

    #[test]
    fn seconds_per_flip() {
        let m = lab_model();
        let att = table().attenuation;
        let plan = cobalt_plan(0);
        let s = expected_seconds_per_flip(&m, &plan, &att).unwrap();
        assert!((s - 1200.0 / 27.0).abs() < 1e-9);

        let mut doubled = plan.clone();
        doubled.device = doubled.device.with_test_region(2 * GIB).unwrap();
        let s2 = expected_seconds_per_flip(&m, &doubled, &att).unwrap();
        assert!((s2 - s / 2.0).abs() < 1e-9);

        let mut modern = plan;
        modern.device = make_device(DevicePreset::Rpi4b8gb);
        assert!(expected_seconds_per_flip(&m, &modern, &att).unwrap().is_infinite());
    }

    #[test]
    fn deterministic_streams() {
        let m = lab_model();
        let att = table().attenuation;
        let a = simulate_exposure(&cobalt_plan(7), &m, &att).unwrap();
        let b = simulate_exposure(&cobalt_plan(7), &m, &att).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, simulate_exposure(&cobalt_plan(8), &m, &att).unwrap());
        assert!(a.windows(2).all(|w| w[0].t_s() <= w[1].t_s()));
        assert!(a.iter().all(|e| e.direction() == FlipDirection::OneToZero));
    }

    #[test]
    fn modern_device_gates_gamma() {
        let d = table();
        let m = lab_model();
        let plan = ExposurePlan::new(
            d.isotope("Cs-137").unwrap().clone(),
            make_device(DevicePreset::Rpi4b8gb),
            TestPattern::ZEROS,
            1.0e6,
            3,
        );
        assert!(simulate_exposure(&plan, &m, &d.attenuation).unwrap().is_empty());
        let rates = rate_breakdown(&plan, &m, &d.attenuation).unwrap();
        assert!(rates.below_threshold);
    }

    #[test]
    fn ambient_with_zero_rate_is_silent() {
        let m = lab_model().with_ambient_per_day(0.0);
        let mut device = make_device(DevicePreset::Rpi4b8gb);
        device = device.with_test_region(4 * GIB).unwrap();
        let ten_months = 300.0 * SECONDS_PER_DAY;
        let plan = ExposurePlan::ambient(device, TestPattern::ONES, ten_months, 1);
        assert!(simulate_exposure(&plan, &m, &table().attenuation)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ambient_default_rate() {
        let m = lab_model();
        let device = make_device(DevicePreset::Rpi4b8gb);
        let plan = ExposurePlan::ambient(device, TestPattern::ONES, SECONDS_PER_DAY, 1);
        let n = expected_count(&plan, &m, &table().attenuation).unwrap();
        assert!((n - 0.6 * 4.0).abs() < 1e-9);
    }

    #[test]
    fn full_shield_scales_by_transmission() {
        let d = table();
        let m = lab_model();
        let bare = cobalt_plan(1);
        let shielded = bare.clone().with_shield(ShieldSpec::whole(10.0).unwrap());
        let r = rate_breakdown(&shielded, &m, &d.attenuation).unwrap();
        let mu_117 = d.attenuation.gamma_mu_per_cm(1.17).unwrap();
        let mu_133 = d.attenuation.gamma_mu_per_cm(1.33).unwrap();
        let expect = ((-mu_117).exp() + (-mu_133).exp()) / 2.0;
        assert!((r.transmission - expect).abs() < 1e-12);
        let n_bare = expected_count(&bare, &m, &d.attenuation).unwrap();
        let n_shield = expected_count(&shielded, &m, &d.attenuation).unwrap();
        assert!((n_shield - n_bare * expect).abs() < 1e-9);
    }

    #[test]
    fn partial_shield_places_flips_in_both_parts() {
        let d = table();
        let m = lab_model();
        let plan = cobalt_plan(5).with_shield(
            ShieldSpec::new(
                1000.0,
                Coverage::Range {
                    start: 0,
                    end: GIB / 2,
                },
            )
            .unwrap(),
        );
        let r = rate_breakdown(&plan, &m, &d.attenuation).unwrap();
        assert!(r.shielded_rate_per_s < 1e-12);
        for seed in 0..50 {
            for ev in simulate_exposure(&plan.clone().with_seed(seed), &m, &d.attenuation).unwrap() {
                assert!(ev.byte_offset() >= GIB / 2);
            }
        }
    }

    #[test]
    fn conditioned_count_is_exact() {
        let d = table();
        let m = lab_model();
        let ev = simulate_with_count(&cobalt_plan(2), &m, &d.attenuation, 27).unwrap();
        assert_eq!(ev.len(), 27);
        assert!(ev.windows(2).all(|w| w[0].t_s() <= w[1].t_s()));
        let mut modern = cobalt_plan(2);
        modern.device = make_device(DevicePreset::Rpi4b8gb);
        assert!(matches!(
            simulate_with_count(&modern, &m, &d.attenuation, 3),
            Err(FluxError::ZeroRate(3))
        ));
    }

    #[test]
    fn event_log_roundtrip_and_corruption() {
        let d = table();
        let m = lab_model();
        let plan = cobalt_plan(11);
        let rates = rate_breakdown(&plan, &m, &d.attenuation).unwrap();
        let events = simulate_exposure(&plan, &m, &d.attenuation).unwrap();
        let header = LogHeader::new(plan, m, &rates, None);
        let mut buf = Vec::new();
        write_event_log(&mut buf, &header, &events).unwrap();
        let (h2, e2) = read_event_log(buf.as_slice()).unwrap();
        assert_eq!(h2, header);
        assert_eq!(e2, events);

        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"t_s\": oops}\n");
        match read_event_log(text.as_bytes()) {
            Err(LogError::Corrupt { line, .. }) => assert_eq!(line, events.len() + 2),
            other => panic!("expected corrupt line, got {other:?}"),
        }
        assert!(matches!(read_event_log(&b""[..]), Err(LogError::MissingHeader)));
    }
}
