//! Continuity of care indices, provider votes, incident flags and the
//! 18-column visit vector.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::domain::{Gender, HospitalLevel, PatientProfile, ProviderProfile, Setting, VisitRecord};
use crate::error::{Error, Result};
use crate::ingest::{write_file, Calendar, CodeSets, Dataset};
use crate::scalar::Scalar;

/// How a feature enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Unbounded count or measurement, min-max scaled on training rows.
    Scaled,
    /// Already a ratio in [0, 1].
    Ratio,
    /// 0/1 indicator.
    Binary,
}

macro_rules! features {
    ($($variant:ident => ($name:literal, $kind:ident)),* $(,)?) => {
        /// The model inputs in column order.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Feature { $($variant),* }

        impl Feature {
            pub const ALL: [Feature; FEATURE_COUNT] = [$(Feature::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Feature::$variant => $name),* }
            }

            pub fn kind(self) -> FeatureKind {
                match self { $(Feature::$variant => FeatureKind::$kind),* }
            }
        }
    };
}

pub const FEATURE_COUNT: usize = 18;

features! {
    Age => ("age", Scaled),
    Male => ("male", Binary),
    LowIncome => ("low_income", Binary),
    TotalVisits => ("total_visits", Scaled),
    TotalDiseases => ("total_diseases", Scaled),
    TotalChronicDiseases => ("total_chronic_diseases", Scaled),
    Upc => ("upc", Ratio),
    Lupc => ("lupc", Ratio),
    Secoc => ("secoc", Ratio),
    Coci => ("coci", Ratio),
    PhysicianDensity => ("physician_density", Scaled),
    Mfpc => ("mfpc", Scaled),
    Lfpc => ("lfpc", Scaled),
    IsSurgery => ("is_surgery", Binary),
    IsEr => ("is_er", Binary),
    IsSevere => ("is_severe", Binary),
    IsWorkday => ("is_workday", Binary),
    Dir => ("dir", Ratio),
}

impl Feature {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.iter().copied().find(|f| f.name() == name)
    }
}

pub fn feature_names() -> Vec<String> {
    Feature::ALL.iter().map(|f| f.name().to_string()).collect()
}

/// A patient's providers in visit order, with per-provider counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitSequence {
    pub patient_id: String,
    pub providers: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

impl VisitSequence {
    pub fn new(patient_id: impl Into<String>, providers: Vec<String>) -> Self {
        let mut counts = BTreeMap::new();
        for p in &providers {
            *counts.entry(p.clone()).or_insert(0) += 1;
        }
        VisitSequence {
            patient_id: patient_id.into(),
            providers,
            counts,
        }
    }

    /// Builds the sequence from one patient's chronologically sorted visits.
    pub fn from_visits(visits: &[VisitRecord]) -> Self {
        let id = visits.first().map(|v| v.patient_id.clone()).unwrap_or_default();
        VisitSequence::new(id, visits.iter().map(|v| v.provider_id.clone()).collect())
    }

    pub fn total(&self) -> usize {
        self.providers.len()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Most visited provider; ties go to the smallest id.
    pub fn usual_provider(&self) -> Option<&str> {
        let mut best: Option<(&str, usize)> = None;
        for (id, &n) in &self.counts {
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((id, n));
            }
        }
        best.map(|(id, _)| id)
    }

    /// Least visited provider among those visited; ties go to the smallest id.
    pub fn least_usual_provider(&self) -> Option<&str> {
        let mut best: Option<(&str, usize)> = None;
        for (id, &n) in &self.counts {
            if best.is_none_or(|(_, m)| n < m) {
                best = Some((id, n));
            }
        }
        best.map(|(id, _)| id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuityIndices<T> {
    pub upc: T,
    pub lupc: T,
    pub secoc: T,
    pub coci: T,
}

/// UPC, LUPC, SECOC and COCI for one visit sequence.
///
/// With a single visit the SECOC and COCI denominators vanish; both are
/// defined as 1.
pub fn continuity_indices<T: Scalar>(seq: &VisitSequence) -> Result<ContinuityIndices<T>> {
    let n = seq.total();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let total = T::from_count(n);
    let max = seq.counts.values().copied().max().unwrap_or(0);
    let min = seq.counts.values().copied().min().unwrap_or(0);
    let upc = T::from_count(max) / total;
    let lupc = T::from_count(min) / total;
    if n == 1 {
        return Ok(ContinuityIndices {
            upc,
            lupc,
            secoc: T::one(),
            coci: T::one(),
        });
    }
    let same = seq.providers.windows(2).filter(|w| w[0] == w[1]).count();
    let secoc = T::from_count(same) / T::from_count(n - 1);
    let squares: usize = seq.counts.values().map(|&c| c * c).sum();
    let coci = T::from_count(squares - n) / T::from_count(n * (n - 1));
    Ok(ContinuityIndices { upc, lupc, secoc, coci })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderVotes {
    pub provider_id: String,
    /// Patients whose usual provider this is.
    pub mfpc: u64,
    /// Patients whose least usual provider this is.
    pub lfpc: u64,
}

/// Tallies one UPC and one LUPC vote per patient. Providers without votes
/// are absent and count as zero.
pub fn provider_votes(sequences: &[VisitSequence]) -> BTreeMap<String, ProviderVotes> {
    fn entry<'a>(votes: &'a mut BTreeMap<String, ProviderVotes>, id: &str) -> &'a mut ProviderVotes {
        votes.entry(id.to_string()).or_insert_with(|| ProviderVotes {
            provider_id: id.to_string(),
            ..Default::default()
        })
    }

    let mut votes = BTreeMap::new();
    for seq in sequences {
        if let Some(id) = seq.usual_provider() {
            entry(&mut votes, id).mfpc += 1;
        }
        if let Some(id) = seq.least_usual_provider() {
            entry(&mut votes, id).lfpc += 1;
        }
    }
    votes
}

/// Share of the patient's visits whose primary diagnosis equals the target's.
pub fn disease_importance_rate<T: Scalar>(visits: &[VisitRecord], target: &VisitRecord) -> T {
    let matching = visits.iter().filter(|v| v.primary_dx == target.primary_dx).count();
    T::from_count(matching) / T::from_count(visits.len().max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IncidentFlags {
    pub is_surgery: bool,
    pub is_er: bool,
    pub is_severe: bool,
    pub is_workday: bool,
}

/// Triage levels 1-3 (resuscitation, emergency, urgent) count as severe.
pub const SEVERE_TRIAGE_MAX: u8 = 3;

pub fn incident_flags(record: &VisitRecord, codes: &CodeSets, calendar: &Calendar) -> Result<IncidentFlags> {
    let is_surgery = record.treatment_codes.iter().any(|c| codes.surgery_codes.contains(c));
    let is_er =
        record.setting == Setting::Emergency || record.treatment_codes.iter().any(|c| codes.er_codes.contains(c));
    let is_severe = record
        .triage_level
        .is_some_and(|t| (1..=SEVERE_TRIAGE_MAX).contains(&t))
        || record.catastrophic_illness
        || codes.catastrophic_dx_codes.contains(&record.primary_dx);
    Ok(IncidentFlags {
        is_surgery,
        is_er,
        is_severe,
        is_workday: calendar.is_workday(record.visit_date)?,
    })
}

/// Per-patient aggregates shared by all of the patient's visits.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSummary {
    pub total_visits: usize,
    /// Distinct diagnosis codes across all visits.
    pub total_diseases: usize,
    /// Distinct chronic diagnosis codes across all visits.
    pub total_chronic_diseases: usize,
    pub indices: ContinuityIndices<f64>,
}

impl PatientSummary {
    pub fn from_visits(visits: &[VisitRecord], codes: &CodeSets) -> Result<Self> {
        let dx: BTreeSet<&str> = visits
            .iter()
            .flat_map(|v| v.dx_codes.iter().map(String::as_str))
            .collect();
        let chronic = dx.iter().filter(|c| codes.chronic_dx_codes.contains(**c)).count();
        Ok(PatientSummary {
            total_visits: visits.len(),
            total_diseases: dx.len(),
            total_chronic_diseases: chronic,
            indices: continuity_indices(&VisitSequence::from_visits(visits))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitFeatureVector {
    pub values: [f64; FEATURE_COUNT],
    pub label: HospitalLevel,
}

impl VisitFeatureVector {
    pub fn get(&self, f: Feature) -> f64 {
        self.values[f.index()]
    }
}

/// Whole years between birth and visit, counting a birthday only once reached.
pub fn age_in_years(birth: NaiveDate, visit: NaiveDate) -> u32 {
    let mut years = visit.year() - birth.year();
    if (visit.month(), visit.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    years.max(0) as u32
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_visit_vector(
    record: &VisitRecord,
    patient: &PatientProfile,
    provider: &ProviderProfile,
    summary: &PatientSummary,
    votes: Option<&ProviderVotes>,
    density: &BTreeMap<String, f64>,
    dir: f64,
    flags: IncidentFlags,
) -> Result<VisitFeatureVector> {
    let density = *density
        .get(&provider.region_code)
        .ok_or_else(|| Error::UnknownRegion(provider.region_code.clone()))?;
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let mut v = [0.0; FEATURE_COUNT];
    v[Feature::Age.index()] = f64::from(age_in_years(patient.birth_date, record.visit_date));
    v[Feature::Male.index()] = b(patient.gender == Gender::Male);
    v[Feature::LowIncome.index()] = b(patient.low_income);
    v[Feature::TotalVisits.index()] = summary.total_visits as f64;
    v[Feature::TotalDiseases.index()] = summary.total_diseases as f64;
    v[Feature::TotalChronicDiseases.index()] = summary.total_chronic_diseases as f64;
    v[Feature::Upc.index()] = summary.indices.upc;
    v[Feature::Lupc.index()] = summary.indices.lupc;
    v[Feature::Secoc.index()] = summary.indices.secoc;
    v[Feature::Coci.index()] = summary.indices.coci;
    v[Feature::PhysicianDensity.index()] = density;
    v[Feature::Mfpc.index()] = votes.map_or(0.0, |x| x.mfpc as f64);
    v[Feature::Lfpc.index()] = votes.map_or(0.0, |x| x.lfpc as f64);
    v[Feature::IsSurgery.index()] = b(flags.is_surgery);
    v[Feature::IsEr.index()] = b(flags.is_er);
    v[Feature::IsSevere.index()] = b(flags.is_severe);
    v[Feature::IsWorkday.index()] = b(flags.is_workday);
    v[Feature::Dir.index()] = dir;
    Ok(VisitFeatureVector {
        values: v,
        label: provider.level,
    })
}

/// Feature rows for every visit of a clean dataset, in canonical visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<VisitFeatureVector>,
    /// Owning patient of each row, for patient-level splitting.
    pub patient_ids: Vec<String>,
}

impl FeatureTable {
    pub fn labels(&self) -> Vec<HospitalLevel> {
        self.rows.iter().map(|r| r.label).collect()
    }
}

/// Runs every feature computation over the dataset. Provider votes are
/// tallied once over all patients.
pub fn build_feature_table(data: &Dataset) -> Result<FeatureTable> {
    let groups: Vec<&[VisitRecord]> = data.visits_by_patient().collect();
    let sequences: Vec<VisitSequence> = groups.iter().map(|g| VisitSequence::from_visits(g)).collect();
    let votes = provider_votes(&sequences);
    let density: BTreeMap<String, f64> = data
        .region_stats
        .iter()
        .map(|r| (r.region_code.clone(), r.physician_density))
        .collect();

    let mut rows = Vec::with_capacity(data.visits.len());
    let mut patient_ids = Vec::with_capacity(data.visits.len());
    for visits in groups {
        let id = &visits[0].patient_id;
        let patient = data.patient(id).ok_or_else(|| Error::UnknownReference {
            kind: "patient",
            id: id.clone(),
        })?;
        let summary = PatientSummary::from_visits(visits, &data.code_sets)?;
        for record in visits {
            let provider = data
                .provider(&record.provider_id)
                .ok_or_else(|| Error::UnknownReference {
                    kind: "provider",
                    id: record.provider_id.clone(),
                })?;
            let flags = incident_flags(record, &data.code_sets, &data.calendar)?;
            let dir = disease_importance_rate(visits, record);
            rows.push(assemble_visit_vector(
                record,
                patient,
                provider,
                &summary,
                votes.get(&record.provider_id),
                &density,
                dir,
                flags,
            )?);
            patient_ids.push(id.clone());
        }
    }
    Ok(FeatureTable { rows, patient_ids })
}

/// Min-max ranges of the scaled features, fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    /// `Some((min, max))` for scaled features, `None` for ratios and flags.
    pub ranges: Vec<Option<(f64, f64)>>,
}

impl ScalerParams {
    pub fn range(&self, f: Feature) -> Option<(f64, f64)> {
        self.ranges[f.index()]
    }

    pub fn is_degenerate(&self, f: Feature) -> bool {
        self.range(f).is_some_and(|(lo, hi)| lo == hi)
    }

    pub fn scaled_features(&self) -> Vec<Feature> {
        Feature::ALL
            .iter()
            .copied()
            .filter(|f| self.range(*f).is_some())
            .collect()
    }
}

pub fn fit_scaler(rows: &[&VisitFeatureVector]) -> Result<ScalerParams> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot fit a scaler on zero rows".into()));
    }
    let ranges = Feature::ALL
        .iter()
        .map(|&f| {
            (f.kind() == FeatureKind::Scaled).then(|| {
                rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    let x = r.get(f);
                    (lo.min(x), hi.max(x))
                })
            })
        })
        .collect();
    Ok(ScalerParams { ranges })
}

/// Min-max scales the `Scaled` features, clamping to [0, 1]; degenerate
/// ranges map to 0. Ratio and binary features pass through.
pub fn scale_vector(v: &VisitFeatureVector, s: &ScalerParams) -> [f64; FEATURE_COUNT] {
    let mut out = v.values;
    for (x, range) in out.iter_mut().zip(&s.ranges) {
        if let Some((lo, hi)) = *range {
            *x = if hi > lo {
                ((*x - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Full-precision decimal: 17 significant digits round-trips every `f64`.
pub fn format_exact(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the 18 named columns plus `label`. `header_comment` becomes a
/// leading `#` line.
pub fn write_feature_csv(table: &FeatureTable, path: &Path, header_comment: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(c) = header_comment {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str(&feature_names().join(","));
    out.push_str(",label\n");
    for row in &table.rows {
        for x in &row.values {
            out.push_str(&format_exact(*x));
            out.push(',');
        }
        out.push_str(&row.label.code().to_string());
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<VisitFeatureVector>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let file = path.display().to_string();
    let parse_err = |line: u64, field: &str, message: String| Error::Parse {
        file: file.clone(),
        line,
        field: field.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| parse_err(0, "-", e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(1, "header", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut expected = feature_names();
    expected.push("label".into());
    if header != expected {
        return Err(parse_err(1, "header", format!("unexpected columns {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(0, "-", e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut values = [0.0; FEATURE_COUNT];
        for (i, v) in values.iter_mut().enumerate() {
            *v = rec[i]
                .parse()
                .map_err(|_| parse_err(line, &expected[i], format!("invalid number `{}`", &rec[i])))?;
        }
        let label = rec[FEATURE_COUNT]
            .parse::<u8>()
            .ok()
            .and_then(HospitalLevel::from_code)
            .ok_or_else(|| parse_err(line, "label", format!("invalid label `{}`", &rec[FEATURE_COUNT])))?;
        rows.push(VisitFeatureVector { values, label });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(providers: &[&str]) -> VisitSequence {
        VisitSequence::new("P", providers.iter().map(|s| s.to_string()).collect())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn single_provider_is_fully_continuous() {
        let c: ContinuityIndices<f64> = continuity_indices(&seq(&["A", "A", "A"])).unwrap();
        assert_eq!((c.upc, c.lupc, c.secoc, c.coci), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_distinct_providers() {
        let c: ContinuityIndices<f64> = continuity_indices(&seq(&["A", "B", "C"])).unwrap();
        assert!(close(c.upc, 1.0 / 3.0) && close(c.lupc, 1.0 / 3.0));
        assert_eq!((c.secoc, c.coci), (0.0, 0.0));
    }

    #[test]
    fn mixed_sequence_hand_values() {
        // counts (3,1,1): sum of squares 11, N = 5, one repeated pair of four
        let c: ContinuityIndices<f64> = continuity_indices(&seq(&["A", "A", "B", "A", "C"])).unwrap();
        assert!(close(c.upc, 0.6));
        assert!(close(c.lupc, 0.2));
        assert!(close(c.secoc, 0.25));
        assert!(close(c.coci, 0.3));
    }

    #[test]
    fn single_visit_is_defined_as_one() {
        let c: ContinuityIndices<f64> = continuity_indices(&seq(&["A"])).unwrap();
        assert_eq!((c.upc, c.lupc, c.secoc, c.coci), (1.0, 1.0, 1.0, 1.0));
        assert!(matches!(
            continuity_indices::<f64>(&seq(&[])),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn indices_in_single_precision() {
        let c: ContinuityIndices<f32> = continuity_indices(&seq(&["A", "A", "B", "A", "C"])).unwrap();
        assert!((c.coci - 0.3).abs() < 1e-6);
    }

    #[test]
    fn votes_follow_usual_and_least_usual_provider() {
        let p1 = VisitSequence::new("P1", vec!["A".into(), "B".into(), "A".into()]);
        let p2 = VisitSequence::new("P2", vec!["A".into(), "A".into(), "A".into()]);
        let v = provider_votes(&[p1, p2]);
        assert_eq!(v["A"].mfpc, 2);
        assert_eq!(v["A"].lfpc, 1);
        assert_eq!(v["B"].mfpc, 0);
        assert_eq!(v["B"].lfpc, 1);
        assert!(!v.contains_key("C"));
    }

    #[test]
    fn vote_ties_go_to_smallest_id() {
        let p = VisitSequence::new("P", vec!["B".into(), "A".into(), "B".into(), "A".into()]);
        let v = provider_votes(&[p]);
        assert_eq!(v["A"].mfpc, 1);
        assert_eq!(v["A"].lfpc, 1);
        assert!(!v.contains_key("B"));
    }

    fn record(dx: &str) -> VisitRecord {
        VisitRecord {
            patient_id: "P".into(),
            visit_date: "2010-01-04".parse().unwrap(),
            provider_id: "H".into(),
            primary_dx: dx.into(),
            dx_codes: BTreeSet::from([dx.to_string()]),
            treatment_codes: BTreeSet::new(),
            triage_level: None,
            catastrophic_illness: false,
            setting: Setting::Outpatient,
        }
    }

    #[test]
    fn dir_counts_matching_primary_diagnoses() {
        let mut visits: Vec<VisitRecord> = (0..4).map(|_| record("J06")).collect();
        visits.extend((0..6).map(|i| record(&format!("X{i}"))));
        assert!(close(disease_importance_rate(&visits, &visits[0]), 0.4));
        assert!(close(disease_importance_rate(&visits, &visits[9]), 0.1));
        let same: Vec<_> = (0..3).map(|_| record("A")).collect();
        assert_eq!(disease_importance_rate::<f64>(&same, &same[1]), 1.0);
    }

    fn calendar() -> Calendar {
        Calendar::new(BTreeMap::from([("2010-01-04".parse().unwrap(), true)]))
    }

    #[test]
    fn severe_by_triage_or_catastrophic() {
        let codes = CodeSets::default();
        let mut r = record("J06");
        r.triage_level = Some(2);
        assert!(incident_flags(&r, &codes, &calendar()).unwrap().is_severe);
        r.triage_level = Some(4);
        assert!(!incident_flags(&r, &codes, &calendar()).unwrap().is_severe);
        r.triage_level = None;
        r.catastrophic_illness = true;
        assert!(incident_flags(&r, &codes, &calendar()).unwrap().is_severe);
    }

    #[test]
    fn plain_outpatient_workday_visit() {
        let flags = incident_flags(&record("J06"), &CodeSets::default(), &calendar()).unwrap();
        assert_eq!(
            flags,
            IncidentFlags {
                is_surgery: false,
                is_er: false,
                is_severe: false,
                is_workday: true
            }
        );
        let mut r = record("J06");
        r.visit_date = "2010-01-05".parse().unwrap();
        assert!(incident_flags(&r, &CodeSets::default(), &calendar()).is_err());
    }

    #[test]
    fn code_sets_drive_surgery_and_er() {
        let codes = CodeSets {
            surgery_codes: BTreeSet::from(["S1".to_string()]),
            er_codes: BTreeSet::from(["E1".to_string()]),
            catastrophic_dx_codes: BTreeSet::from(["C9".to_string()]),
            ..Default::default()
        };
        let mut r = record("C9");
        r.treatment_codes = BTreeSet::from(["S1".to_string(), "E1".to_string()]);
        let f = incident_flags(&r, &codes, &calendar()).unwrap();
        assert!(f.is_surgery && f.is_er && f.is_severe);
    }

    #[test]
    fn age_is_floor_of_years() {
        let b: NaiveDate = "1970-05-01".parse().unwrap();
        assert_eq!(age_in_years(b, "2010-04-30".parse().unwrap()), 39);
        assert_eq!(age_in_years(b, "2010-05-01".parse().unwrap()), 40);
        let leap: NaiveDate = "2000-02-29".parse().unwrap();
        assert_eq!(age_in_years(leap, "2001-02-28".parse().unwrap()), 0);
        assert_eq!(age_in_years(leap, "2001-03-01".parse().unwrap()), 1);
    }

    fn vector_for(visits: &[VisitRecord], chronic: &[&str], level: HospitalLevel) -> VisitFeatureVector {
        let codes = CodeSets {
            chronic_dx_codes: chronic.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        };
        let patient = PatientProfile {
            patient_id: "P".into(),
            birth_date: "1970-05-01".parse().unwrap(),
            gender: Gender::Male,
            low_income: false,
        };
        let provider = ProviderProfile {
            provider_id: "H".into(),
            level,
            region_code: "R".into(),
        };
        let summary = PatientSummary::from_visits(visits, &codes).unwrap();
        let density = BTreeMap::from([("R".to_string(), 24.0)]);
        let flags = incident_flags(&visits[0], &codes, &calendar()).unwrap();
        assemble_visit_vector(&visits[0], &patient, &provider, &summary, None, &density, 0.5, flags).unwrap()
    }

    #[test]
    fn disease_totals_count_distinct_codes() {
        let v = vector_for(&[record("x"), record("y"), record("y")], &["y"], HospitalLevel::Clinic);
        assert_eq!(v.get(Feature::TotalDiseases), 2.0);
        assert_eq!(v.get(Feature::TotalChronicDiseases), 1.0);
        assert_eq!(v.get(Feature::TotalVisits), 3.0);
        assert_eq!(v.get(Feature::Male), 1.0);
        assert_eq!(v.get(Feature::Mfpc), 0.0);
        assert_eq!(v.label, HospitalLevel::Clinic);
        assert_eq!(v.label.code(), 3);
    }

    #[test]
    fn unknown_region_is_an_error() {
        let visits = [record("x")];
        let provider = ProviderProfile {
            provider_id: "H".into(),
            level: HospitalLevel::Clinic,
            region_code: "ZZ".into(),
        };
        let patient = PatientProfile {
            patient_id: "P".into(),
            birth_date: "1970-05-01".parse().unwrap(),
            gender: Gender::Female,
            low_income: true,
        };
        let summary = PatientSummary::from_visits(&visits, &CodeSets::default()).unwrap();
        let flags = incident_flags(&visits[0], &CodeSets::default(), &calendar()).unwrap();
        let err = assemble_visit_vector(
            &visits[0],
            &patient,
            &provider,
            &summary,
            None,
            &BTreeMap::new(),
            1.0,
            flags,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnknownRegion(r) if r == "ZZ"));
    }

    fn with_age(age: f64) -> VisitFeatureVector {
        let mut values = [0.5; FEATURE_COUNT];
        values[Feature::Age.index()] = age;
        VisitFeatureVector {
            values,
            label: HospitalLevel::Clinic,
        }
    }

    #[test]
    fn scaler_fits_min_max_on_scaled_features_only() {
        let rows = [with_age(20.0), with_age(40.0), with_age(60.0)];
        let refs: Vec<_> = rows.iter().collect();
        let s = fit_scaler(&refs).unwrap();
        assert_eq!(s.range(Feature::Age), Some((20.0, 60.0)));
        assert_eq!(s.range(Feature::Upc), None);
        assert_eq!(s.range(Feature::Male), None);
        assert!(s.is_degenerate(Feature::Mfpc));
        assert!(!s.is_degenerate(Feature::Age));
        assert_eq!(scale_vector(&with_age(40.0), &s)[Feature::Age.index()], 0.5);
        assert_eq!(scale_vector(&with_age(70.0), &s)[Feature::Age.index()], 1.0);
        assert_eq!(scale_vector(&with_age(10.0), &s)[Feature::Age.index()], 0.0);
        // degenerate column maps to zero
        assert_eq!(scale_vector(&with_age(40.0), &s)[Feature::Mfpc.index()], 0.0);
    }

    #[test]
    fn ratio_features_pass_through() {
        let mut v = with_age(30.0);
        v.values[Feature::Upc.index()] = 0.52;
        let s = fit_scaler(&[&v]).unwrap();
        assert_eq!(scale_vector(&v, &s)[Feature::Upc.index()], 0.52);
        for f in s.scaled_features() {
            let (lo, hi) = s.range(f).unwrap();
            assert_eq!(lo, hi);
        }
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn feature_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = with_age(33.0);
        a.values[Feature::Dir.index()] = 1.0 / 3.0;
        a.values[Feature::PhysicianDensity.index()] = 24.224_f64.next_up();
        let table = FeatureTable {
            rows: vec![a, with_age(0.1)],
            patient_ids: vec!["P1".into(), "P2".into()],
        };
        let path = dir.path().join("features.csv");
        write_feature_csv(&table, &path, Some("config_hash=abc")).unwrap();
        assert_eq!(read_feature_csv(&path).unwrap(), table.rows);
    }

    fn provider_seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(0u8..4, 1..=8)
            .prop_map(|v| v.into_iter().map(|p| ((b'A' + p) as char).to_string()).collect())
    }

    proptest! {
        #[test]
        fn index_ranges_and_equivalences(providers in provider_seq()) {
            let s = VisitSequence::new("P", providers.clone());
            let c: ContinuityIndices<f64> = continuity_indices(&s).unwrap();
            for x in [c.upc, c.lupc, c.secoc, c.coci] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(c.upc >= c.lupc);
            prop_assert!(c.upc >= 1.0 / s.distinct() as f64 - 1e-15);
            if s.total() >= 2 {
                let single = s.distinct() == 1;
                prop_assert_eq!(c.coci == 1.0, single);
                prop_assert_eq!(c.secoc == 1.0, single);
                prop_assert_eq!(c.coci == 0.0, s.distinct() == s.total());
            }
        }

        #[test]
        fn permutation_invariance_except_secoc(providers in provider_seq(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = providers.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a: ContinuityIndices<f64> = continuity_indices(&VisitSequence::new("P", providers)).unwrap();
            let b: ContinuityIndices<f64> = continuity_indices(&VisitSequence::new("P", shuffled)).unwrap();
            prop_assert_eq!((a.upc, a.lupc, a.coci), (b.upc, b.lupc, b.coci));
        }

        #[test]
        fn dir_shares_sum_to_one(dx in prop::collection::vec(0u8..5, 1..20)) {
            let visits: Vec<VisitRecord> = dx.iter().map(|d| record(&d.to_string())).collect();
            let mut seen = BTreeSet::new();
            let mut total = 0.0;
            for v in &visits {
                if seen.insert(v.primary_dx.clone()) {
                    total += disease_importance_rate::<f64>(&visits, v);
                }
            }
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn scaled_vectors_stay_in_unit_box(
            train in prop::collection::vec(prop::array::uniform18(0.0f64..100.0), 1..10),
            probe in prop::array::uniform18(-50.0f64..150.0),
        ) {
            let clamp_ratios = |mut v: [f64; FEATURE_COUNT]| {
                for f in Feature::ALL {
                    if f.kind() != FeatureKind::Scaled {
                        v[f.index()] = (v[f.index()] / 100.0).clamp(0.0, 1.0);
                    }
                }
                VisitFeatureVector { values: v, label: HospitalLevel::Clinic }
            };
            let rows: Vec<_> = train.into_iter().map(clamp_ratios).collect();
            let refs: Vec<_> = rows.iter().collect();
            let s = fit_scaler(&refs).unwrap();
            let scaled = scale_vector(&clamp_ratios(probe), &s);
            prop_assert!(scaled.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
