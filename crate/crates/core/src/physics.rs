//! Radioactive source modeling: decay, emission lines, lead shielding and
//! the neutron–silicon reaction table.
//!
//! All values here are immutable after construction and every operation
//! is a pure function, so the types can be shared freely across threads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datafiles::{self, DataError, DataSource};

#[derive(Debug, Error, PartialEq)]
pub enum PhysicsError {
    #[error("no attenuation coefficient for {particle} at {energy_mev} MeV")]
    NoCoefficient { particle: Particle, energy_mev: f64 },
    #[error("unsupported reaction target `{0}` (expected Si28, Si29 or Si30)")]
    UnsupportedTarget(String),
    #[error("unsupported projectile {0}: only neutron reactions are tabulated")]
    UnsupportedProjectile(Particle),
    #[error("invalid emission line: {0}")]
    InvalidLine(String),
    #[error("invalid isotope `{name}`: {reason}")]
    InvalidIsotope { name: String, reason: String },
    #[error("invalid shield: {0}")]
    InvalidShield(String),
    #[error("unknown isotope `{0}`")]
    UnknownIsotope(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Particle {
    Alpha,
    Beta,
    Gamma,
    Neutron,
}

impl Particle {
    pub fn is_charged(self) -> bool {
        matches!(self, Particle::Alpha | Particle::Beta)
    }
}

impl fmt::Display for Particle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Particle::Alpha => "alpha",
            Particle::Beta => "beta",
            Particle::Gamma => "gamma",
            Particle::Neutron => "neutron",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLine")]
pub struct EmissionLine {
    pub particle: Particle,
    pub energy_mev: f64,
    /// Emissions per decay, in `[0, 1]`.
    pub intensity: f64,
}

#[derive(Deserialize)]
struct RawLine {
    particle: Particle,
    energy_mev: f64,
    intensity: f64,
}

impl TryFrom<RawLine> for EmissionLine {
    type Error = PhysicsError;

    fn try_from(raw: RawLine) -> Result<Self, Self::Error> {
        EmissionLine::new(raw.particle, raw.energy_mev, raw.intensity)
    }
}

impl EmissionLine {
    pub fn new(particle: Particle, energy_mev: f64, intensity: f64) -> Result<Self, PhysicsError> {
        if !(energy_mev > 0.0 && energy_mev.is_finite()) {
            return Err(PhysicsError::InvalidLine(format!(
                "energy must be positive, got {energy_mev}"
            )));
        }
        if !(0.0..=1.0).contains(&intensity) {
            return Err(PhysicsError::InvalidLine(format!(
                "intensity must lie in [0, 1], got {intensity}"
            )));
        }
        Ok(Self {
            particle,
            energy_mev,
            intensity,
        })
    }

    fn scaled(self, factor: f64) -> Self {
        Self {
            intensity: self.intensity * factor,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isotope {
    pub name: String,
    pub half_life_s: f64,
    pub daughter: String,
    pub lines: Vec<EmissionLine>,
}

impl Isotope {
    pub fn new(
        name: impl Into<String>,
        half_life_s: f64,
        daughter: impl Into<String>,
        lines: Vec<EmissionLine>,
    ) -> Result<Self, PhysicsError> {
        let iso = Self {
            name: name.into(),
            half_life_s,
            daughter: daughter.into(),
            lines,
        };
        iso.validate()?;
        Ok(iso)
    }

    fn validate(&self) -> Result<(), PhysicsError> {
        let bad = |reason: &str| PhysicsError::InvalidIsotope {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if !(self.half_life_s > 0.0 && self.half_life_s.is_finite()) {
            return Err(bad("half-life must be positive"));
        }
        if self.lines.is_empty() {
            return Err(bad("at least one emission line is required"));
        }
        Ok(())
    }

    /// Matches `Co-60`, `co60`, `CO_60` and so on.
    pub fn matches(&self, name: &str) -> bool {
        normalize_name(&self.name) == normalize_name(name)
    }

    pub fn max_energy_mev(&self, particle: Particle) -> Option<f64> {
        self.lines
            .iter()
            .filter(|l| l.particle == particle)
            .map(|l| l.energy_mev)
            .reduce(f64::max)
    }
}

fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Byte range of a device covered by lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Coverage {
    WholeDevice,
    /// Half-open `[start, end)` byte interval.
    Range { start: u64, end: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldSpec {
    pub lead_thickness_mm: f64,
    pub covered: Coverage,
}

impl Default for ShieldSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl ShieldSpec {
    pub fn none() -> Self {
        Self {
            lead_thickness_mm: 0.0,
            covered: Coverage::WholeDevice,
        }
    }

    pub fn whole(lead_thickness_mm: f64) -> Result<Self, PhysicsError> {
        Self::new(lead_thickness_mm, Coverage::WholeDevice)
    }

    pub fn new(lead_thickness_mm: f64, covered: Coverage) -> Result<Self, PhysicsError> {
        if !(lead_thickness_mm >= 0.0 && lead_thickness_mm.is_finite()) {
            return Err(PhysicsError::InvalidShield(format!(
                "thickness must be non-negative, got {lead_thickness_mm}"
            )));
        }
        if let Coverage::Range { start, end } = covered {
            if start > end {
                return Err(PhysicsError::InvalidShield(format!(
                    "covered range start {start} exceeds end {end}"
                )));
            }
        }
        Ok(Self {
            lead_thickness_mm,
            covered,
        })
    }

    /// Portion of `[0, len)` under the lead, as a half-open interval.
    pub fn covered_within(&self, len: u64) -> (u64, u64) {
        if self.lead_thickness_mm == 0.0 {
            return (0, 0);
        }
        match self.covered {
            Coverage::WholeDevice => (0, len),
            Coverage::Range { start, end } => {
                let s = start.min(len);
                (s, end.min(len).max(s))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
struct CoefficientPoint {
    energy_mev: f64,
    mass_cm2_per_g: f64,
}

/// Photon attenuation in lead plus the charged-particle cutoff.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(try_from = "RawAttenuation")]
pub struct AttenuationTable {
    density_g_per_cm3: f64,
    charged_cutoff_mm: f64,
    points: Vec<CoefficientPoint>,
}

#[derive(Deserialize)]
struct RawAttenuation {
    density_g_per_cm3: f64,
    charged_cutoff_mm: f64,
    points: Vec<CoefficientPoint>,
}

impl TryFrom<RawAttenuation> for AttenuationTable {
    type Error = String;

    fn try_from(raw: RawAttenuation) -> Result<Self, String> {
        if raw.points.len() < 2 {
            return Err("need at least two coefficient points".into());
        }
        if !(raw.density_g_per_cm3 > 0.0) {
            return Err("density must be positive".into());
        }
        if !(raw.charged_cutoff_mm >= 0.0) {
            return Err("charged cutoff must be non-negative".into());
        }
        for pair in raw.points.windows(2) {
            if pair[1].energy_mev <= pair[0].energy_mev {
                return Err("energies must be strictly increasing".into());
            }
            if pair[1].mass_cm2_per_g > pair[0].mass_cm2_per_g {
                return Err("coefficients must be non-increasing in energy".into());
            }
        }
        if raw.points.iter().any(|p| !(p.mass_cm2_per_g > 0.0)) {
            return Err("coefficients must be positive".into());
        }
        Ok(Self {
            density_g_per_cm3: raw.density_g_per_cm3,
            charged_cutoff_mm: raw.charged_cutoff_mm,
            points: raw.points,
        })
    }
}

impl AttenuationTable {
    pub fn charged_cutoff_mm(&self) -> f64 {
        self.charged_cutoff_mm
    }

    pub fn energy_range_mev(&self) -> (f64, f64) {
        (
            self.points[0].energy_mev,
            self.points[self.points.len() - 1].energy_mev,
        )
    }

    /// Linear attenuation coefficient of lead in 1/cm for a photon of
    /// the given energy.
    pub fn gamma_mu_per_cm(&self, energy_mev: f64) -> Result<f64, PhysicsError> {
        let none = || PhysicsError::NoCoefficient {
            particle: Particle::Gamma,
            energy_mev,
        };
        let (lo, hi) = self.energy_range_mev();
        if !(energy_mev >= lo && energy_mev <= hi) {
            return Err(none());
        }
        let idx = self
            .points
            .partition_point(|p| p.energy_mev < energy_mev)
            .max(1);
        let (a, b) = (self.points[idx - 1], self.points[idx]);
        let w = (energy_mev.ln() - a.energy_mev.ln()) / (b.energy_mev.ln() - a.energy_mev.ln());
        let ln_mu = a.mass_cm2_per_g.ln() + w * (b.mass_cm2_per_g.ln() - a.mass_cm2_per_g.ln());
        Ok(ln_mu.exp() * self.density_g_per_cm3)
    }

    /// Fraction of the line's intensity that survives `thickness_mm` of lead.
    pub fn transmission(&self, line: &EmissionLine, thickness_mm: f64) -> Result<f64, PhysicsError> {
        if thickness_mm == 0.0 {
            return Ok(1.0);
        }
        match line.particle {
            p if p.is_charged() => Ok(if thickness_mm >= self.charged_cutoff_mm {
                0.0
            } else {
                1.0
            }),
            Particle::Gamma => {
                let mu = self.gamma_mu_per_cm(line.energy_mev)?;
                Ok((-mu * thickness_mm / 10.0).exp())
            }
            particle => Err(PhysicsError::NoCoefficient {
                particle,
                energy_mev: line.energy_mev,
            }),
        }
    }
}

/// Fraction of the original nuclei remaining after `elapsed_s`.
pub fn decay_fraction(isotope: &Isotope, elapsed_s: f64) -> f64 {
    debug_assert!(elapsed_s >= 0.0);
    (-elapsed_s / isotope.half_life_s).exp2()
}

pub fn attenuate(
    line: &EmissionLine,
    lead_thickness_mm: f64,
    table: &AttenuationTable,
) -> Result<EmissionLine, PhysicsError> {
    Ok(line.scaled(table.transmission(line, lead_thickness_mm)?))
}

/// Emission lines reaching the target after `elapsed_s` of source decay
/// and the shield's lead layer.
pub fn effective_spectrum(
    isotope: &Isotope,
    elapsed_s: f64,
    shield: &ShieldSpec,
    table: &AttenuationTable,
) -> Result<Vec<EmissionLine>, PhysicsError> {
    let remaining = decay_fraction(isotope, elapsed_s);
    isotope
        .lines
        .iter()
        .map(|line| attenuate(&line.scaled(remaining), shield.lead_thickness_mm, table))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiIsotope {
    Si28,
    Si29,
    Si30,
}

impl FromStr for SiIsotope {
    type Err = PhysicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_name(s).as_str() {
            "si28" | "28si" => Ok(SiIsotope::Si28),
            "si29" | "29si" => Ok(SiIsotope::Si29),
            "si30" | "30si" => Ok(SiIsotope::Si30),
            _ => Err(PhysicsError::UnsupportedTarget(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ejectile {
    Proton,
    Alpha,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnergyUnit {
    MeV,
    #[serde(rename = "keV")]
    KeV,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactionEnergy {
    pub value: f64,
    pub unit: EnergyUnit,
}

impl ReactionEnergy {
    pub fn mev(&self) -> f64 {
        match self.unit {
            EnergyUnit::MeV => self.value,
            EnergyUnit::KeV => self.value / 1000.0,
        }
    }
}

impl fmt::Display for ReactionEnergy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match self.unit {
            EnergyUnit::MeV => "MeV",
            EnergyUnit::KeV => "keV",
        };
        write!(f, "{:.3} {unit}", self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiReaction {
    pub target: SiIsotope,
    pub product: String,
    pub ejected: Ejectile,
    pub energy: ReactionEnergy,
}

impl fmt::Display for SiReaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let target = match self.target {
            SiIsotope::Si28 => "28Si",
            SiIsotope::Si29 => "29Si",
            SiIsotope::Si30 => "30Si",
        };
        let ejected = match self.ejected {
            Ejectile::Proton => "p",
            Ejectile::Alpha => "alpha",
        };
        write!(f, "{target} + n -> {} + {ejected} @ {}", self.product, self.energy)
    }
}

#[derive(Deserialize)]
struct RawReaction {
    target: SiIsotope,
    product: String,
    ejected: Ejectile,
    energy: f64,
    unit: EnergyUnit,
}

#[derive(Deserialize)]
struct ReactionFile {
    reactions: Vec<RawReaction>,
}

#[derive(Deserialize)]
struct IsotopeFile {
    isotope: Vec<Isotope>,
}

/// Isotopes, attenuation coefficients and reaction table loaded together.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsData {
    pub isotopes: Vec<Isotope>,
    pub attenuation: AttenuationTable,
    pub reactions: Vec<SiReaction>,
}

impl PhysicsData {
    pub fn builtin() -> Self {
        Self::load(&DataSource::embedded()).expect("embedded physics data is valid")
    }

    pub fn load(source: &DataSource) -> Result<Self, DataError> {
        let isotopes: IsotopeFile = source.parse(datafiles::ISOTOPES)?;
        for iso in &isotopes.isotope {
            iso.validate().map_err(|e| DataError::Invalid {
                file: datafiles::ISOTOPES.into(),
                message: e.to_string(),
            })?;
        }
        let attenuation: AttenuationTable = source.parse(datafiles::LEAD_ATTENUATION)?;
        let reactions: ReactionFile = source.parse(datafiles::SI_REACTIONS)?;
        let reactions = reactions
            .reactions
            .into_iter()
            .map(|r| SiReaction {
                target: r.target,
                product: r.product,
                ejected: r.ejected,
                energy: ReactionEnergy {
                    value: r.energy,
                    unit: r.unit,
                },
            })
            .collect();
        Ok(Self {
            isotopes: isotopes.isotope,
            attenuation,
            reactions,
        })
    }

    pub fn isotope(&self, name: &str) -> Result<&Isotope, PhysicsError> {
        self.isotopes
            .iter()
            .find(|i| i.matches(name))
            .ok_or_else(|| PhysicsError::UnknownIsotope(name.to_string()))
    }

    /// Both tabulated branches (proton, then alpha) for a neutron on `target`.
    pub fn lookup_si_reaction(
        &self,
        target: &str,
        projectile: Particle,
    ) -> Result<[SiReaction; 2], PhysicsError> {
        let si: SiIsotope = target.parse()?;
        if projectile != Particle::Neutron {
            return Err(PhysicsError::UnsupportedProjectile(projectile));
        }
        let branch = |ejected| {
            self.reactions
                .iter()
                .find(|r| r.target == si && r.ejected == ejected)
                .cloned()
                .ok_or_else(|| PhysicsError::UnsupportedTarget(target.to_string()))
        };
        Ok([branch(Ejectile::Proton)?, branch(Ejectile::Alpha)?])
    }
}
