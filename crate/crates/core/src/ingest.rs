//! Delimited-text loaders and writers for the claims file set.
//!
//! All tables are UTF-8, comma-delimited, with a header line and ISO-8601
//! dates. Multi-valued columns use `|` as separator. Code sets are plain text,
//! one code per line; blank lines and `#` comments are ignored.
//!
//! | file | columns |
//! |------|---------|
//! | `visits.csv` | `patient_id,provider_id,date,primary_dx,dx_codes,treatment_codes,triage,catastrophic,setting` |
//! | `patients.csv` | `patient_id,birth_date,gender,low_income` |
//! | `providers.csv` | `provider_id,level,region_code` |
//! | `density.csv` | `region_code,physician_density` |
//! | `calendar.csv` | `date,is_workday` |
//! | `surgery_codes.txt`, `er_codes.txt`, `chronic_codes.txt`, `catastrophic_codes.txt` | one code per line |
//!
//! A patient may appear on several registry lines; their genders are merged so
//! that conflicting entries surface as an exclusion rather than a parse error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use crate::domain::{
    apply_exclusions, ExclusionAudit, Gender, HospitalLevel, PatientProfile, ProviderProfile, RawPatient, RawProvider,
    RawVisit, RegionStats, Setting, VisitRecord,
};
use crate::error::{Error, Result};

/// Workday lookup table keyed by date.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Calendar {
    days: BTreeMap<NaiveDate, bool>,
}

impl Calendar {
    pub fn new(days: BTreeMap<NaiveDate, bool>) -> Self {
        Calendar { days }
    }

    /// Whether `date` is a workday. Dates missing from the table are an
    /// error, never a default.
    pub fn is_workday(&self, date: NaiveDate) -> Result<bool> {
        self.days.get(&date).copied().ok_or(Error::CalendarCoverage(date))
    }

    pub fn days(&self) -> &BTreeMap<NaiveDate, bool> {
        &self.days
    }

    pub fn first_day(&self) -> Option<NaiveDate> {
        self.days.keys().next().copied()
    }

    pub fn last_day(&self) -> Option<NaiveDate> {
        self.days.keys().next_back().copied()
    }
}

/// Configured code lists. Membership is exact string equality.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeSets {
    pub surgery_codes: BTreeSet<String>,
    pub er_codes: BTreeSet<String>,
    pub chronic_dx_codes: BTreeSet<String>,
    pub catastrophic_dx_codes: BTreeSet<String>,
}

/// Everything as read from disk, before exclusions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawDataset {
    pub patients: Vec<RawPatient>,
    pub providers: Vec<RawProvider>,
    pub visits: Vec<RawVisit>,
    pub region_stats: Vec<RegionStats>,
    pub calendar: Calendar,
    pub code_sets: CodeSets,
}

/// Clean dataset. Patients, providers and regions are sorted by id; visits
/// are in canonical `(patient_id, visit_date, content)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientProfile>,
    pub providers: Vec<ProviderProfile>,
    pub visits: Vec<VisitRecord>,
    pub region_stats: Vec<RegionStats>,
    pub calendar: Calendar,
    pub code_sets: CodeSets,
}

impl Dataset {
    pub fn new(
        mut patients: Vec<PatientProfile>,
        mut providers: Vec<ProviderProfile>,
        mut visits: Vec<VisitRecord>,
        mut region_stats: Vec<RegionStats>,
        calendar: Calendar,
        code_sets: CodeSets,
    ) -> Self {
        patients.sort();
        providers.sort();
        visits.sort();
        region_stats.sort_by(|a, b| a.region_code.cmp(&b.region_code));
        Dataset {
            patients,
            providers,
            visits,
            region_stats,
            calendar,
            code_sets,
        }
    }

    pub fn patient(&self, id: &str) -> Option<&PatientProfile> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.patients[i])
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderProfile> {
        self.providers
            .binary_search_by(|p| p.provider_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.providers[i])
    }

    pub fn region(&self, code: &str) -> Option<&RegionStats> {
        self.region_stats
            .binary_search_by(|r| r.region_code.as_str().cmp(code))
            .ok()
            .map(|i| &self.region_stats[i])
    }

    /// Contiguous runs of visits, one per patient, in patient order.
    pub fn visits_by_patient(&self) -> impl Iterator<Item = &[VisitRecord]> {
        self.visits.chunk_by(|a, b| a.patient_id == b.patient_id)
    }

    pub fn to_raw(&self) -> RawDataset {
        RawDataset {
            patients: self.patients.iter().map(RawPatient::from).collect(),
            providers: self.providers.iter().map(RawProvider::from).collect(),
            visits: self.visits.iter().map(RawVisit::from).collect(),
            region_stats: self.region_stats.clone(),
            calendar: self.calendar.clone(),
            code_sets: self.code_sets.clone(),
        }
    }
}

/// Locations of the input files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataPaths {
    pub visits: PathBuf,
    pub patients: PathBuf,
    pub providers: PathBuf,
    pub density: PathBuf,
    pub calendar: PathBuf,
    pub surgery_codes: PathBuf,
    pub er_codes: PathBuf,
    pub chronic_codes: PathBuf,
    pub catastrophic_codes: PathBuf,
}

impl DataPaths {
    /// Standard file names inside one directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        DataPaths {
            visits: dir.join("visits.csv"),
            patients: dir.join("patients.csv"),
            providers: dir.join("providers.csv"),
            density: dir.join("density.csv"),
            calendar: dir.join("calendar.csv"),
            surgery_codes: dir.join("surgery_codes.txt"),
            er_codes: dir.join("er_codes.txt"),
            chronic_codes: dir.join("chronic_codes.txt"),
            catastrophic_codes: dir.join("catastrophic_codes.txt"),
        }
    }
}

/// Loads the file set and runs the exclusion pass.
pub fn load_dataset(paths: &DataPaths) -> Result<(Dataset, ExclusionAudit)> {
    let raw = load_raw(paths)?;
    apply_exclusions(&raw)
}

pub fn load_raw(paths: &DataPaths) -> Result<RawDataset> {
    Ok(RawDataset {
        patients: read_patients(&paths.patients)?,
        providers: read_providers(&paths.providers)?,
        visits: read_visits(&paths.visits)?,
        region_stats: read_density(&paths.density)?,
        calendar: read_calendar(&paths.calendar)?,
        code_sets: CodeSets {
            surgery_codes: read_code_set(&paths.surgery_codes)?,
            er_codes: read_code_set(&paths.er_codes)?,
            chronic_dx_codes: read_code_set(&paths.chronic_codes)?,
            catastrophic_dx_codes: read_code_set(&paths.catastrophic_codes)?,
        },
    })
}

/// Writes the full file set into `dir` using the standard names.
pub fn write_raw(data: &RawDataset, dir: impl AsRef<Path>) -> Result<()> {
    write_raw_with_header(data, dir, None)
}

/// As [`write_raw`], starting every file with `# <header>` when given.
pub fn write_raw_with_header(data: &RawDataset, dir: impl AsRef<Path>, header: Option<&str>) -> Result<()> {
    let dir = dir.as_ref();
    let prefix = header.map(|h| format!("# {h}\n")).unwrap_or_default();
    let write_file = |path: &Path, body: &str| write_file(path, &format!("{prefix}{body}"));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DataPaths::in_dir(dir);

    let mut out = String::from("patient_id,birth_date,gender,low_income\n");
    for p in &data.patients {
        let genders: Vec<&str> = p.genders.iter().map(|g| g.code()).collect();
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.patient_id,
            p.birth_date.map(|d| d.to_string()).unwrap_or_default(),
            genders.join("|"),
            u8::from(p.low_income)
        ));
    }
    write_file(&paths.patients, &out)?;

    let mut out = String::from("provider_id,level,region_code\n");
    for p in &data.providers {
        out.push_str(&format!(
            "{},{},{}\n",
            p.provider_id,
            p.level.map(|l| l.code().to_string()).unwrap_or_default(),
            p.region_code.as_deref().unwrap_or("")
        ));
    }
    write_file(&paths.providers, &out)?;

    let mut out =
        String::from("patient_id,provider_id,date,primary_dx,dx_codes,treatment_codes,triage,catastrophic,setting\n");
    for v in &data.visits {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            v.patient_id,
            v.provider_id,
            v.visit_date.map(|d| d.to_string()).unwrap_or_default(),
            v.primary_dx,
            join_codes(&v.dx_codes),
            join_codes(&v.treatment_codes),
            v.triage_level.map(|t| t.to_string()).unwrap_or_default(),
            u8::from(v.catastrophic_illness),
            v.setting.as_str()
        ));
    }
    write_file(&paths.visits, &out)?;

    let mut out = String::from("region_code,physician_density\n");
    for r in &data.region_stats {
        out.push_str(&format!("{},{}\n", r.region_code, r.physician_density));
    }
    write_file(&paths.density, &out)?;

    let mut out = String::from("date,is_workday\n");
    for (d, w) in data.calendar.days() {
        out.push_str(&format!("{},{}\n", d, u8::from(*w)));
    }
    write_file(&paths.calendar, &out)?;

    let sets = &data.code_sets;
    write_file(&paths.surgery_codes, &code_lines(&sets.surgery_codes))?;
    write_file(&paths.er_codes, &code_lines(&sets.er_codes))?;
    write_file(&paths.chronic_codes, &code_lines(&sets.chronic_dx_codes))?;
    write_file(&paths.catastrophic_codes, &code_lines(&sets.catastrophic_dx_codes))?;
    Ok(())
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

fn join_codes(codes: &BTreeSet<String>) -> String {
    codes.iter().map(String::as_str).collect::<Vec<_>>().join("|")
}

fn code_lines(codes: &BTreeSet<String>) -> String {
    codes.iter().map(|c| format!("{c}\n")).collect()
}

/// A CSV table with a validated header, yielding rows with line numbers.
struct Table {
    file: String,
    columns: Vec<&'static str>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn open(path: &Path, columns: &[&'static str]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(&file, e))?;
        let header = reader.headers().map_err(|e| csv_error(&file, e))?.clone();
        let found: Vec<&str> = header.iter().collect();
        if found != columns {
            return Err(Error::Parse {
                file,
                line: 1,
                field: "header".into(),
                message: format!("expected columns {columns:?}, found {found:?}"),
            });
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(&file, e))?;
            let line = record.position().map_or(0, |p| p.line());
            rows.push((line, record));
        }
        Ok(Table {
            file,
            columns: columns.to_vec(),
            rows,
        })
    }

    fn error(&self, line: u64, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            line,
            field: self.columns[column].to_string(),
            message: message.into(),
        }
    }
}

fn csv_error(file: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        file: file.to_string(),
        line,
        field: "-".into(),
        message: e.to_string(),
    }
}

fn parse_opt_date(t: &Table, line: u64, col: usize, s: &str) -> Result<Option<NaiveDate>> {
    if s.is_empty() {
        return Ok(None);
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(Some)
        .map_err(|e| t.error(line, col, format!("invalid date `{s}`: {e}")))
}

fn parse_bool(t: &Table, line: u64, col: usize, s: &str) -> Result<bool> {
    match s {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(t.error(line, col, format!("expected 0 or 1, found `{other}`"))),
    }
}

fn split_codes(s: &str) -> BTreeSet<String> {
    s.split('|')
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect()
}

fn read_patients(path: &Path) -> Result<Vec<RawPatient>> {
    let t = Table::open(path, &["patient_id", "birth_date", "gender", "low_income"])?;
    let mut merged: BTreeMap<String, RawPatient> = BTreeMap::new();
    let mut conflicting_birth = BTreeSet::new();
    for (line, r) in &t.rows {
        let id = r[0].to_string();
        if id.is_empty() {
            return Err(t.error(*line, 0, "empty patient id"));
        }
        let birth = parse_opt_date(&t, *line, 1, &r[1])?;
        let mut genders = BTreeSet::new();
        for g in r[2].split('|').map(str::trim).filter(|g| !g.is_empty()) {
            genders.insert(g.parse::<Gender>().map_err(|m| t.error(*line, 2, m))?);
        }
        let low_income = parse_bool(&t, *line, 3, &r[3])?;
        match merged.get_mut(&id) {
            None => {
                merged.insert(
                    id.clone(),
                    RawPatient {
                        patient_id: id,
                        birth_date: birth,
                        genders,
                        low_income,
                    },
                );
            }
            Some(existing) => {
                existing.genders.extend(genders);
                existing.low_income |= low_income;
                match (existing.birth_date, birth) {
                    (None, b) => existing.birth_date = b,
                    (Some(a), Some(b)) if a != b => {
                        conflicting_birth.insert(id);
                    }
                    _ => {}
                }
            }
        }
    }
    // Registry lines that disagree on the birth date leave it unknown.
    for id in conflicting_birth {
        if let Some(p) = merged.get_mut(&id) {
            p.birth_date = None;
        }
    }
    Ok(merged.into_values().collect())
}

fn read_providers(path: &Path) -> Result<Vec<RawProvider>> {
    let t = Table::open(path, &["provider_id", "level", "region_code"])?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let id = r[0].to_string();
        if id.is_empty() {
            return Err(t.error(*line, 0, "empty provider id"));
        }
        if !seen.insert(id.clone()) {
            return Err(t.error(*line, 0, format!("duplicate provider `{id}`")));
        }
        let level = if r[1].is_empty() {
            None
        } else {
            let code: u8 = r[1]
                .parse()
                .map_err(|_| t.error(*line, 1, format!("invalid level `{}`", &r[1])))?;
            Some(
                HospitalLevel::from_code(code)
                    .ok_or_else(|| t.error(*line, 1, format!("level code {code} out of range 0-3")))?,
            )
        };
        let region = Some(r[2].to_string()).filter(|s| !s.is_empty());
        out.push(RawProvider {
            provider_id: id,
            level,
            region_code: region,
        });
    }
    Ok(out)
}

fn read_visits(path: &Path) -> Result<Vec<RawVisit>> {
    let t = Table::open(
        path,
        &[
            "patient_id",
            "provider_id",
            "date",
            "primary_dx",
            "dx_codes",
            "treatment_codes",
            "triage",
            "catastrophic",
            "setting",
        ],
    )?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (line, r) in &t.rows {
        let triage_level = if r[6].is_empty() {
            None
        } else {
            match r[6].parse::<u8>() {
                Ok(level @ 1..=5) => Some(level),
                _ => return Err(t.error(*line, 6, format!("triage `{}` not in 1-5", &r[6]))),
            }
        };
        out.push(RawVisit {
            patient_id: r[0].to_string(),
            provider_id: r[1].to_string(),
            visit_date: parse_opt_date(&t, *line, 2, &r[2])?,
            primary_dx: r[3].to_string(),
            dx_codes: split_codes(&r[4]),
            treatment_codes: split_codes(&r[5]),
            triage_level,
            catastrophic_illness: parse_bool(&t, *line, 7, &r[7])?,
            setting: r[8].parse::<Setting>().map_err(|m| t.error(*line, 8, m))?,
        });
    }
    Ok(out)
}

fn read_density(path: &Path) -> Result<Vec<RegionStats>> {
    let t = Table::open(path, &["region_code", "physician_density"])?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, r) in &t.rows {
        let code = r[0].to_string();
        if !seen.insert(code.clone()) {
            return Err(t.error(*line, 0, format!("duplicate region `{code}`")));
        }
        let density: f64 = r[1]
            .parse()
            .map_err(|_| t.error(*line, 1, format!("invalid number `{}`", &r[1])))?;
        if !density.is_finite() || density < 0.0 {
            return Err(t.error(*line, 1, "density must be finite and non-negative"));
        }
        out.push(RegionStats {
            region_code: code,
            physician_density: density,
        });
    }
    Ok(out)
}

fn read_calendar(path: &Path) -> Result<Calendar> {
    let t = Table::open(path, &["date", "is_workday"])?;
    let mut days = BTreeMap::new();
    for (line, r) in &t.rows {
        let date = parse_opt_date(&t, *line, 0, &r[0])?.ok_or_else(|| t.error(*line, 0, "empty date"))?;
        let workday = parse_bool(&t, *line, 1, &r[1])?;
        if days.insert(date, workday).is_some() {
            return Err(t.error(*line, 0, format!("duplicate date {date}")));
        }
    }
    Ok(Calendar::new(days))
}

fn read_code_set(path: &Path) -> Result<BTreeSet<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ExclusionReason;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn fixture(dir: &Path, visits: &str) {
        let files = [
            (
                "patients.csv",
                "patient_id,birth_date,gender,low_income\nP1,1970-05-01,F,0\nP2,1980-01-01,M,1\nP3,1990-02-02,F,0\n",
            ),
            ("providers.csv", "provider_id,level,region_code\nH1,3,R1\nH2,0,R2\n"),
            ("density.csv", "region_code,physician_density\nR1,12.5\nR2,40\n"),
            (
                "calendar.csv",
                "date,is_workday\n2010-01-01,0\n2010-01-02,0\n2010-01-03,0\n2010-01-04,1\n2010-01-05,1\n",
            ),
            ("surgery_codes.txt", "# surgery\nS1\n"),
            ("er_codes.txt", "ER1\n"),
            ("chronic_codes.txt", "E11\n\n"),
            ("catastrophic_codes.txt", ""),
            ("visits.csv", visits),
        ];
        for (name, body) in files {
            fs::write(dir.join(name), body).unwrap();
        }
    }

    const HEADER: &str =
        "patient_id,provider_id,date,primary_dx,dx_codes,treatment_codes,triage,catastrophic,setting\n";

    #[test]
    fn loads_well_formed_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let visits = format!(
            "{HEADER}P1,H1,2010-01-04,J06,J06|E11,S1,,0,outpatient\nP2,H2,2010-01-05,E11,,,2,0,emergency\nP3,H1,2010-01-04,J06,,,,0,outpatient\n"
        );
        fixture(dir.path(), &visits);
        let (data, audit) = load_dataset(&DataPaths::in_dir(dir.path())).unwrap();
        assert_eq!(data.patients.len(), 3);
        assert_eq!(data.visits.len(), 3);
        assert!(audit.is_clean());
        assert_eq!(data.code_sets.surgery_codes, BTreeSet::from(["S1".to_string()]));
        assert_eq!(data.visits[1].triage_level, Some(2));
        assert!(data.visits[2].dx_codes.contains("J06"));
    }

    #[test]
    fn visit_before_birth_is_dropped_and_audited() {
        let dir = tempfile::tempdir().unwrap();
        let visits = format!(
            "{HEADER}P1,H1,2010-01-04,J06,,,,0,outpatient\nP2,H1,1979-06-01,J06,,,,0,outpatient\nP2,H2,2010-01-05,J06,,,,0,outpatient\nP3,H1,2010-01-04,J06,,,,0,outpatient\n"
        );
        fixture(dir.path(), &visits);
        let (data, audit) = load_dataset(&DataPaths::in_dir(dir.path())).unwrap();
        assert_eq!(data.visits.len(), 3);
        assert_eq!(audit.count(ExclusionReason::BirthAfterVisit), 1);
        assert_eq!(audit.total(), 1);
    }

    #[test]
    fn bad_date_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let visits = format!("{HEADER}P1,H1,2010-01-04,J06,,,,0,outpatient\nP2,H1,yesterday,J06,,,,0,outpatient\n");
        fixture(dir.path(), &visits);
        let err = load_dataset(&DataPaths::in_dir(dir.path())).unwrap_err();
        match err {
            Error::Parse { line, field, file, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "date");
                assert!(file.ends_with("visits.csv"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), HEADER);
        fs::remove_file(dir.path().join("density.csv")).unwrap();
        assert!(matches!(
            load_raw(&DataPaths::in_dir(dir.path())),
            Err(Error::MissingFile(p)) if p.ends_with("density.csv")
        ));
    }

    #[test]
    fn calendar_lookup() {
        let cal = Calendar::new(BTreeMap::from([(d("2010-01-01"), true), (d("2010-01-02"), false)]));
        assert!(!cal.is_workday(d("2010-01-02")).unwrap());
        assert!(cal.is_workday(d("2010-01-01")).unwrap());
        assert!(matches!(
            cal.is_workday(d("2010-01-03")),
            Err(Error::CalendarCoverage(x)) if x == d("2010-01-03")
        ));
    }

    #[test]
    fn duplicate_registry_lines_merge_genders() {
        let dir = tempfile::tempdir().unwrap();
        fixture(
            dir.path(),
            &format!("{HEADER}P1,H1,2010-01-04,J06,,,,0,outpatient\nP9,H1,2010-01-04,J06,,,,0,outpatient\n"),
        );
        let mut patients = fs::read_to_string(dir.path().join("patients.csv")).unwrap();
        patients.push_str("P9,1970-01-01,F,0\nP9,1970-01-01,M,0\n");
        fs::write(dir.path().join("patients.csv"), patients).unwrap();
        let (data, audit) = load_dataset(&DataPaths::in_dir(dir.path())).unwrap();
        assert_eq!(audit.count(ExclusionReason::ConflictingGender), 1);
        assert!(data.patient("P9").is_none());
    }
}
