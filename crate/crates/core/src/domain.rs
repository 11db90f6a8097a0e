//! Record types, the hospital-level taxonomy and the exclusion rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ingest::{Dataset, RawDataset};

/// The four provider tiers. Serialized as integer codes 0-3 in declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HospitalLevel {
    MedicalCenter,
    RegionalHospital,
    DistrictHospital,
    Clinic,
}

impl HospitalLevel {
    pub const COUNT: usize = 4;
    pub const ALL: [HospitalLevel; 4] = [
        HospitalLevel::MedicalCenter,
        HospitalLevel::RegionalHospital,
        HospitalLevel::DistrictHospital,
        HospitalLevel::Clinic,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            HospitalLevel::MedicalCenter => "medical_center",
            HospitalLevel::RegionalHospital => "regional_hospital",
            HospitalLevel::DistrictHospital => "district_hospital",
            HospitalLevel::Clinic => "clinic",
        }
    }
}

impl fmt::Display for HospitalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for HospitalLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for HospitalLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        HospitalLevel::from_code(code)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid hospital level code {code}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
        }
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "M" | "m" | "male" => Ok(Gender::Male),
            "F" | "f" | "female" => Ok(Gender::Female),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    Outpatient,
    Emergency,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Outpatient => "outpatient",
            Setting::Emergency => "emergency",
        }
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "outpatient" => Ok(Setting::Outpatient),
            "emergency" => Ok(Setting::Emergency),
            other => Err(format!("unknown setting `{other}`")),
        }
    }
}

/// Beneficiary registry entry as loaded, before validation.
///
/// `genders` collects every gender the registry lists for the patient, so an
/// empty set means missing and more than one means conflicting entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPatient {
    pub patient_id: String,
    pub birth_date: Option<NaiveDate>,
    pub genders: BTreeSet<Gender>,
    pub low_income: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatientProfile {
    pub patient_id: String,
    pub birth_date: NaiveDate,
    pub gender: Gender,
    pub low_income: bool,
}

impl From<&PatientProfile> for RawPatient {
    fn from(p: &PatientProfile) -> Self {
        RawPatient {
            patient_id: p.patient_id.clone(),
            birth_date: Some(p.birth_date),
            genders: BTreeSet::from([p.gender]),
            low_income: p.low_income,
        }
    }
}

/// Provider registry entry as loaded. Missing level or region marks the
/// provider's information as incomplete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawProvider {
    pub provider_id: String,
    pub level: Option<HospitalLevel>,
    pub region_code: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProviderProfile {
    pub provider_id: String,
    pub level: HospitalLevel,
    pub region_code: String,
}

impl From<&ProviderProfile> for RawProvider {
    fn from(p: &ProviderProfile) -> Self {
        RawProvider {
            provider_id: p.provider_id.clone(),
            level: Some(p.level),
            region_code: Some(p.region_code.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVisit {
    pub patient_id: String,
    pub provider_id: String,
    pub visit_date: Option<NaiveDate>,
    pub primary_dx: String,
    pub dx_codes: BTreeSet<String>,
    pub treatment_codes: BTreeSet<String>,
    pub triage_level: Option<u8>,
    pub catastrophic_illness: bool,
    pub setting: Setting,
}

/// One accepted claims line. Field order defines the canonical sort:
/// patient, then date, then the remaining content.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct VisitRecord {
    pub patient_id: String,
    pub visit_date: NaiveDate,
    pub provider_id: String,
    pub primary_dx: String,
    /// Always contains `primary_dx`.
    pub dx_codes: BTreeSet<String>,
    pub treatment_codes: BTreeSet<String>,
    pub triage_level: Option<u8>,
    pub catastrophic_illness: bool,
    pub setting: Setting,
}

impl From<&VisitRecord> for RawVisit {
    fn from(v: &VisitRecord) -> Self {
        RawVisit {
            patient_id: v.patient_id.clone(),
            provider_id: v.provider_id.clone(),
            visit_date: Some(v.visit_date),
            primary_dx: v.primary_dx.clone(),
            dx_codes: v.dx_codes.clone(),
            treatment_codes: v.treatment_codes.clone(),
            triage_level: v.triage_level,
            catastrophic_illness: v.catastrophic_illness,
            setting: v.setting,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region_code: String,
    /// Practicing physicians per ten thousand residents.
    pub physician_density: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    MissingBirthOrGender,
    ConflictingGender,
    MissingVisitDate,
    BirthAfterVisit,
    NoVisits,
    NoPrimaryDiagnosis,
    IncompleteHospitalInfo,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 7] = [
        ExclusionReason::MissingBirthOrGender,
        ExclusionReason::ConflictingGender,
        ExclusionReason::MissingVisitDate,
        ExclusionReason::BirthAfterVisit,
        ExclusionReason::NoVisits,
        ExclusionReason::NoPrimaryDiagnosis,
        ExclusionReason::IncompleteHospitalInfo,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Excluded(Vec<ExclusionReason>),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// Providers keyed by id, as needed by [`validate_record`].
pub type ProviderIndex = BTreeMap<String, RawProvider>;

/// Applies the record-level exclusion rules to one visit.
///
/// A visit whose patient is absent from the registry is treated as lacking
/// birth date and gender. Every firing rule is reported, in
/// [`ExclusionReason`] declaration order.
pub fn validate_record(record: &RawVisit, patient: Option<&RawPatient>, providers: &ProviderIndex) -> Verdict {
    let mut reasons = Vec::new();
    let birth = patient.and_then(|p| p.birth_date);
    let genders = patient.map_or(0, |p| p.genders.len());

    if birth.is_none() || genders == 0 {
        reasons.push(ExclusionReason::MissingBirthOrGender);
    }
    if genders > 1 {
        reasons.push(ExclusionReason::ConflictingGender);
    }
    match record.visit_date {
        None => reasons.push(ExclusionReason::MissingVisitDate),
        Some(date) => {
            if birth.is_some_and(|b| b > date) {
                reasons.push(ExclusionReason::BirthAfterVisit);
            }
        }
    }
    if record.primary_dx.trim().is_empty() {
        reasons.push(ExclusionReason::NoPrimaryDiagnosis);
    }
    let provider_complete = providers
        .get(&record.provider_id)
        .is_some_and(|p| p.level.is_some() && p.region_code.as_deref().is_some_and(|r| !r.is_empty()));
    if !provider_complete {
        reasons.push(ExclusionReason::IncompleteHospitalInfo);
    }

    if reasons.is_empty() {
        Verdict::Accepted
    } else {
        Verdict::Excluded(reasons)
    }
}

/// Per-reason removal counts. Record-level reasons count records; `NoVisits`
/// counts patients left without any accepted record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionAudit {
    pub counts: BTreeMap<ExclusionReason, usize>,
}

impl Default for ExclusionAudit {
    fn default() -> Self {
        ExclusionAudit {
            counts: ExclusionReason::ALL.iter().map(|&r| (r, 0)).collect(),
        }
    }
}

impl ExclusionAudit {
    pub fn count(&self, reason: ExclusionReason) -> usize {
        self.counts.get(&reason).copied().unwrap_or(0)
    }

    pub fn record(&mut self, reason: ExclusionReason) {
        *self.counts.entry(reason).or_insert(0) += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_clean(&self) -> bool {
        self.total() == 0
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.counts).map_err(|e| Error::json("exclusion audit", e))
    }
}

/// Two-pass exclusion: record-level rules first, then patients left without
/// any accepted record are dropped.
pub fn apply_exclusions(raw: &RawDataset) -> Result<(Dataset, ExclusionAudit)> {
    let mut audit = ExclusionAudit::default();
    let patients: BTreeMap<&str, &RawPatient> = raw.patients.iter().map(|p| (p.patient_id.as_str(), p)).collect();
    let providers: ProviderIndex = raw
        .providers
        .iter()
        .map(|p| (p.provider_id.clone(), p.clone()))
        .collect();

    let mut visits = Vec::with_capacity(raw.visits.len());
    for visit in &raw.visits {
        let patient = patients.get(visit.patient_id.as_str()).copied();
        match validate_record(visit, patient, &providers) {
            Verdict::Accepted => visits.push(accepted_visit(visit)),
            Verdict::Excluded(reasons) => reasons.into_iter().for_each(|r| audit.record(r)),
        }
    }

    let with_visits: BTreeSet<&str> = visits.iter().map(|v| v.patient_id.as_str()).collect();
    let mut kept = Vec::new();
    for p in &raw.patients {
        if !with_visits.contains(p.patient_id.as_str()) {
            audit.record(ExclusionReason::NoVisits);
            continue;
        }
        // Accepted visits imply a valid birth date and exactly one gender.
        kept.push(PatientProfile {
            patient_id: p.patient_id.clone(),
            birth_date: p.birth_date.expect("validated"),
            gender: *p.genders.iter().next().expect("validated"),
            low_income: p.low_income,
        });
    }
    if visits.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut provider_list: Vec<ProviderProfile> = raw
        .providers
        .iter()
        .filter_map(|p| {
            Some(ProviderProfile {
                provider_id: p.provider_id.clone(),
                level: p.level?,
                region_code: p.region_code.clone().filter(|r| !r.is_empty())?,
            })
        })
        .collect();
    provider_list.sort();
    provider_list.dedup_by(|a, b| a.provider_id == b.provider_id);

    let dataset = Dataset::new(
        kept,
        provider_list,
        visits,
        raw.region_stats.clone(),
        raw.calendar.clone(),
        raw.code_sets.clone(),
    );
    Ok((dataset, audit))
}

fn accepted_visit(v: &RawVisit) -> VisitRecord {
    let mut dx_codes = v.dx_codes.clone();
    dx_codes.insert(v.primary_dx.clone());
    VisitRecord {
        patient_id: v.patient_id.clone(),
        visit_date: v.visit_date.expect("validated"),
        provider_id: v.provider_id.clone(),
        primary_dx: v.primary_dx.clone(),
        dx_codes,
        treatment_codes: v.treatment_codes.clone(),
        triage_level: v.triage_level,
        catastrophic_illness: v.catastrophic_illness,
        setting: v.setting,
    }
}
