//! Seeded synthetic claims cohort.
//!
//! Generative rule. Providers are exchangeable while visits are drawn: each
//! has a region and a log-normal popularity, each patient has one preferred
//! provider, and every visit goes to that provider with probability
//! `loyalty`, otherwise to a provider drawn by popularity. Once all visits
//! exist, provider votes (mfpc, lfpc) are tallied exactly as the feature
//! stage does, and each provider's level is drawn from
//!
//! ```text
//! P(level = c) ∝ exp(a_c + s * (b_c,mfpc * m + b_c,lfpc * l + b_c,density * d))
//! ```
//!
//! where `m = ln(1 + mfpc)`, `l = ln(1 + lfpc)` and `d` is the region's
//! physician density, each standardized over providers, and `s` is the
//! signal strength. The intercepts `a_c` are tuned so visit-weighted level
//! shares hit the class priors. With `s = 0` levels are independent of every
//! feature.
//!
//! Demographics, visit counts and incident flags follow the configured
//! marginals; binary rates are allocated by exact quota.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    ExclusionAudit, ExclusionReason, Gender, HospitalLevel, RawPatient, RawProvider, RawVisit, RegionStats, Setting,
};
use crate::error::{Error, Result};
use crate::features::{provider_votes, VisitSequence};
use crate::ingest::{write_file, write_raw_with_header, Calendar, CodeSets, RawDataset};
use crate::kv::KeyValues;

/// Per-class coefficients of the level tilt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltCoefficients {
    pub mfpc: f64,
    pub lfpc: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub seed: u64,
    /// Visit share per level, in [`HospitalLevel::ALL`] order.
    pub priors: [f64; 4],
    pub age_mean: f64,
    pub age_sd: f64,
    pub male_rate: f64,
    pub low_income_rate: f64,
    pub visits_mean: f64,
    pub visits_sd: f64,
    pub surgery_rate: f64,
    pub er_rate: f64,
    pub severe_rate: f64,
    pub workday_rate: f64,
    pub signal_strength: f64,
    pub coefficients: [TiltCoefficients; 4],
    /// Probability that a visit goes to the patient's preferred provider.
    pub loyalty: f64,
    pub patients_per_provider: f64,
    pub popularity_sigma: f64,
    pub n_regions: usize,
    pub density_mean: f64,
    pub density_sd: f64,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub dx_vocabulary: usize,
    pub zipf_exponent: f64,
    /// Instances of each exclusion rule to inject; 0 writes a clean cohort.
    pub dirty_count: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let c = |mfpc, lfpc, density| TiltCoefficients { mfpc, lfpc, density };
        CohortSpec {
            n_patients: 5000,
            seed: 0,
            priors: [0.0851, 0.1073, 0.0835, 0.7242],
            age_mean: 45.80,
            age_sd: 16.33,
            male_rate: 0.4791,
            low_income_rate: 0.0228,
            visits_mean: 16.70,
            visits_sd: 15.39,
            surgery_rate: 0.0279,
            er_rate: 0.0181,
            severe_rate: 0.0349,
            workday_rate: 0.8373,
            signal_strength: 0.8,
            coefficients: [
                c(6.0, 1.0, 3.0),
                c(3.0, 2.0, -1.0),
                c(1.5, -1.0, -3.0),
                c(0.0, 0.0, 0.0),
            ],
            loyalty: 0.52,
            patients_per_provider: 1.0,
            popularity_sigma: 0.5,
            n_regions: 22,
            density_mean: 24.224,
            density_sd: 21.90,
            start_date: NaiveDate::from_ymd_opt(2008, 1, 1).expect("valid"),
            end_date: NaiveDate::from_ymd_opt(2011, 12, 31).expect("valid"),
            dx_vocabulary: 200,
            zipf_exponent: 1.1,
            dirty_count: 0,
        }
    }
}

/// Published percentages are rounded, so priors need only sum to 1 within
/// this tolerance; they are renormalized before use.
pub const PRIOR_SUM_TOLERANCE: f64 = 1e-3;

impl CohortSpec {
    pub fn normalized_priors(&self) -> [f64; 4] {
        let total: f64 = self.priors.iter().sum();
        self.priors.map(|p| p / total)
    }

    /// Reads `key=value` settings over the defaults. Priors are
    /// `prior.<level>`, coefficients `coef.<level>.<mfpc|lfpc|density>`,
    /// with level names as in [`HospitalLevel::name`].
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut s = CohortSpec::default();
        kv.set("n_patients", &mut s.n_patients)?;
        kv.set("seed", &mut s.seed)?;
        kv.set("age_mean", &mut s.age_mean)?;
        kv.set("age_sd", &mut s.age_sd)?;
        kv.set("male_rate", &mut s.male_rate)?;
        kv.set("low_income_rate", &mut s.low_income_rate)?;
        kv.set("visits_mean", &mut s.visits_mean)?;
        kv.set("visits_sd", &mut s.visits_sd)?;
        kv.set("surgery_rate", &mut s.surgery_rate)?;
        kv.set("er_rate", &mut s.er_rate)?;
        kv.set("severe_rate", &mut s.severe_rate)?;
        kv.set("workday_rate", &mut s.workday_rate)?;
        kv.set("signal_strength", &mut s.signal_strength)?;
        kv.set("loyalty", &mut s.loyalty)?;
        kv.set("patients_per_provider", &mut s.patients_per_provider)?;
        kv.set("popularity_sigma", &mut s.popularity_sigma)?;
        kv.set("n_regions", &mut s.n_regions)?;
        kv.set("density_mean", &mut s.density_mean)?;
        kv.set("density_sd", &mut s.density_sd)?;
        kv.set("start_date", &mut s.start_date)?;
        kv.set("end_date", &mut s.end_date)?;
        kv.set("dx_vocabulary", &mut s.dx_vocabulary)?;
        kv.set("zipf_exponent", &mut s.zipf_exponent)?;
        kv.set("dirty_count", &mut s.dirty_count)?;
        for level in HospitalLevel::ALL {
            let i = level.index();
            kv.set(&format!("prior.{}", level.name()), &mut s.priors[i])?;
            let c = &mut s.coefficients[i];
            kv.set(&format!("coef.{}.mfpc", level.name()), &mut c.mfpc)?;
            kv.set(&format!("coef.{}.lfpc", level.name()), &mut c.lfpc)?;
            kv.set(&format!("coef.{}.density", level.name()), &mut c.density)?;
        }
        let tunable: BTreeSet<String> = s.to_kv().entries.into_keys().collect();
        if let Some(key) = kv.entries.keys().find(|k| !tunable.contains(*k)) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let mut put = |k: String, v: String| {
            kv.entries.insert(k, v);
        };
        put("n_patients".into(), self.n_patients.to_string());
        put("seed".into(), self.seed.to_string());
        put("age_mean".into(), self.age_mean.to_string());
        put("age_sd".into(), self.age_sd.to_string());
        put("male_rate".into(), self.male_rate.to_string());
        put("low_income_rate".into(), self.low_income_rate.to_string());
        put("visits_mean".into(), self.visits_mean.to_string());
        put("visits_sd".into(), self.visits_sd.to_string());
        put("surgery_rate".into(), self.surgery_rate.to_string());
        put("er_rate".into(), self.er_rate.to_string());
        put("severe_rate".into(), self.severe_rate.to_string());
        put("workday_rate".into(), self.workday_rate.to_string());
        put("signal_strength".into(), self.signal_strength.to_string());
        put("loyalty".into(), self.loyalty.to_string());
        put("patients_per_provider".into(), self.patients_per_provider.to_string());
        put("popularity_sigma".into(), self.popularity_sigma.to_string());
        put("n_regions".into(), self.n_regions.to_string());
        put("density_mean".into(), self.density_mean.to_string());
        put("density_sd".into(), self.density_sd.to_string());
        put("start_date".into(), self.start_date.to_string());
        put("end_date".into(), self.end_date.to_string());
        put("dx_vocabulary".into(), self.dx_vocabulary.to_string());
        put("zipf_exponent".into(), self.zipf_exponent.to_string());
        put("dirty_count".into(), self.dirty_count.to_string());
        for level in HospitalLevel::ALL {
            let i = level.index();
            put(format!("prior.{}", level.name()), self.priors[i].to_string());
            let c = self.coefficients[i];
            put(format!("coef.{}.mfpc", level.name()), c.mfpc.to_string());
            put(format!("coef.{}.lfpc", level.name()), c.lfpc.to_string());
            put(format!("coef.{}.density", level.name()), c.density.to_string());
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.priors.iter().any(|p| !(*p > 0.0 && *p <= 1.0))
            || (self.priors.iter().sum::<f64>() - 1.0).abs() > PRIOR_SUM_TOLERANCE
        {
            return bad(format!("priors must be positive and sum to 1, got {:?}", self.priors));
        }
        let rates = [
            ("male_rate", self.male_rate),
            ("low_income_rate", self.low_income_rate),
            ("surgery_rate", self.surgery_rate),
            ("er_rate", self.er_rate),
            ("severe_rate", self.severe_rate),
            ("workday_rate", self.workday_rate),
            ("signal_strength", self.signal_strength),
            ("loyalty", self.loyalty),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        if !(self.visits_mean >= 1.0 && self.visits_sd >= 0.0 && self.age_sd >= 0.0 && self.density_sd >= 0.0) {
            return bad("visit and age moments must be non-negative, visits_mean >= 1".into());
        }
        if !(self.density_mean > 0.0 && self.patients_per_provider > 0.0 && self.popularity_sigma >= 0.0) {
            return bad("density_mean and patients_per_provider must be positive".into());
        }
        if self.n_regions == 0 || self.dx_vocabulary < 5 {
            return bad("n_regions must be positive and dx_vocabulary at least 5".into());
        }
        if self.start_date > self.end_date {
            return bad("start_date must not follow end_date".into());
        }
        let coef_ok = self
            .coefficients
            .iter()
            .all(|c| c.mfpc.is_finite() && c.lfpc.is_finite() && c.density.is_finite());
        if !coef_ok || !self.zipf_exponent.is_finite() {
            return bad("coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Generated files plus the audit that ingest should report.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub data: RawDataset,
    pub expected_audit: ExclusionAudit,
}

/// Fixed holidays (month, day) treated as non-working days.
const HOLIDAYS: [(u32, u32); 4] = [(1, 1), (2, 28), (4, 4), (10, 10)];

pub fn is_default_workday(date: NaiveDate) -> bool {
    !matches!(date.weekday(), Weekday::Sat | Weekday::Sun) && !HOLIDAYS.contains(&(date.month(), date.day()))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Exactly `round(rate * n)` of `n` positions, chosen uniformly.
fn quota(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<bool> {
    let k = ((rate * n as f64).round() as usize).min(n);
    let mut out = vec![false; n];
    for i in sample(rng, n, k) {
        out[i] = true;
    }
    out
}

/// Log-normal parameters matching a target mean and standard deviation.
fn lognormal_params(mean: f64, sd: f64) -> (f64, f64) {
    let sigma2 = (1.0 + (sd / mean).powi(2)).ln();
    (mean.ln() - sigma2 / 2.0, sigma2.sqrt())
}

fn lognormal(mean: f64, sd: f64) -> Result<LogNormal<f64>> {
    let (mu, sigma) = lognormal_params(mean, sd);
    LogNormal::new(mu, sigma).map_err(|e| Error::Config(format!("log-normal({mean}, {sd}): {e}")))
}

fn weighted(weights: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights).map_err(|e| Error::Config(format!("sampling weights: {e}")))
}

fn code_set(codes: impl IntoIterator<Item = String>) -> BTreeSet<String> {
    codes.into_iter().collect()
}

fn dx_code(i: usize) -> String {
    format!("D{i:03}")
}

const SURGERY_CODES: usize = 5;
const PROCEDURE_CODES: usize = 20;
const CATASTROPHIC_CODES: usize = 5;
const ER_CODE: &str = "ER1";

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let seed = spec.seed;

    // regions
    let mut rng = stream(seed, 1);
    let density = lognormal(spec.density_mean, spec.density_sd.max(1e-9))?;
    let region_stats: Vec<RegionStats> = (0..spec.n_regions)
        .map(|r| RegionStats {
            region_code: format!("R{:02}", r + 1),
            physician_density: (density.sample(&mut rng) * 100.0).round() / 100.0,
        })
        .collect();

    // providers, exchangeable until levels are assigned
    let n_providers = ((spec.n_patients as f64 / spec.patients_per_provider).ceil() as usize).max(8);
    let mut rng = stream(seed, 2);
    let popularity_dist =
        LogNormal::new(0.0, spec.popularity_sigma).map_err(|e| Error::Config(format!("popularity: {e}")))?;
    let provider_region: Vec<usize> = (0..n_providers).map(|_| rng.random_range(0..spec.n_regions)).collect();
    let popularity: Vec<f64> = (0..n_providers).map(|_| popularity_dist.sample(&mut rng)).collect();
    let by_popularity = weighted(&popularity)?;
    let provider_id = |i: usize| format!("H{:05}", i + 1);

    // patients
    let mut rng = stream(seed, 3);
    let n = spec.n_patients;
    let male = quota(&mut rng, n, spec.male_rate);
    let low_income = quota(&mut rng, n, spec.low_income_rate);
    let age_dist = Normal::new(spec.age_mean, spec.age_sd).map_err(|e| Error::Config(format!("age: {e}")))?;
    let visits_dist = lognormal(spec.visits_mean, spec.visits_sd.max(1e-9))?;
    let reference = spec.start_date + Duration::days((spec.end_date - spec.start_date).num_days() / 2);
    let mut patients = Vec::with_capacity(n);
    let mut visit_counts = Vec::with_capacity(n);
    let mut preferred = Vec::with_capacity(n);
    for i in 0..n {
        let age = age_dist.sample(&mut rng).clamp(0.0, 110.0);
        let birth = (reference - Duration::days((age * 365.2425).round() as i64)).min(spec.start_date);
        patients.push(RawPatient {
            patient_id: format!("P{:06}", i + 1),
            birth_date: Some(birth),
            genders: BTreeSet::from([if male[i] { Gender::Male } else { Gender::Female }]),
            low_income: low_income[i],
        });
        visit_counts.push((visits_dist.sample(&mut rng).round() as usize).max(1));
        preferred.push(by_popularity.sample(&mut rng));
    }

    // visit-to-provider assignment
    let mut rng = stream(seed, 4);
    let mut visit_patient = Vec::new();
    let mut visit_provider = Vec::new();
    for (p, &count) in visit_counts.iter().enumerate() {
        for _ in 0..count {
            let h = if rng.random::<f64>() < spec.loyalty {
                preferred[p]
            } else {
                by_popularity.sample(&mut rng)
            };
            visit_patient.push(p);
            visit_provider.push(h);
        }
    }
    let n_visits = visit_patient.len();

    // provider votes and level tilt
    let levels = assign_levels(
        spec,
        &region_stats,
        &provider_region,
        &visit_patient,
        &visit_provider,
        n_providers,
    )?;

    // calendar
    let mut days = BTreeMap::new();
    let mut workdays = Vec::new();
    let mut offdays = Vec::new();
    let mut d = spec.start_date;
    while d <= spec.end_date {
        let w = is_default_workday(d);
        days.insert(d, w);
        if w {
            workdays.push(d)
        } else {
            offdays.push(d)
        }
        d += Duration::days(1);
    }
    let calendar = Calendar::new(days);

    // incident flags by quota
    let mut rng = stream(seed, 5);
    let on_workday = quota(&mut rng, n_visits, spec.workday_rate);
    let surgery = quota(&mut rng, n_visits, spec.surgery_rate);
    let er = quota(&mut rng, n_visits, spec.er_rate);
    let severe = quota(&mut rng, n_visits, spec.severe_rate);

    // diagnoses
    let mut rng = stream(seed, 6);
    let zipf: Vec<f64> = (0..spec.dx_vocabulary)
        .map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent))
        .collect();
    let by_zipf = weighted(&zipf)?;
    let conditions: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=4);
            (0..k).map(|_| by_zipf.sample(&mut rng)).collect()
        })
        .collect();

    let mut visits = Vec::with_capacity(n_visits);
    for v in 0..n_visits {
        let p = visit_patient[v];
        let use_workday = (on_workday[v] && !workdays.is_empty()) || offdays.is_empty();
        let date = if use_workday {
            workdays[rng.random_range(0..workdays.len())]
        } else {
            offdays[rng.random_range(0..offdays.len())]
        };
        let personal = &conditions[p];
        let draw_dx = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < 0.7 {
                personal[rng.random_range(0..personal.len())]
            } else {
                by_zipf.sample(rng)
            }
        };
        let mut primary_dx = dx_code(draw_dx(&mut rng));
        let mut dx_codes = BTreeSet::from([primary_dx.clone()]);
        for _ in 0..rng.random_range(0..=2) {
            dx_codes.insert(dx_code(draw_dx(&mut rng)));
        }
        let mut treatment_codes: BTreeSet<String> = (0..rng.random_range(0..=2))
            .map(|_| format!("T{:02}", rng.random_range(1..=PROCEDURE_CODES)))
            .collect();
        if surgery[v] {
            treatment_codes.insert(format!("S{:02}", rng.random_range(1..=SURGERY_CODES)));
        }
        let mut triage_level = None;
        let mut catastrophic_illness = false;
        let setting = if er[v] { Setting::Emergency } else { Setting::Outpatient };
        if er[v] {
            treatment_codes.insert(ER_CODE.to_string());
            triage_level = Some(if severe[v] {
                rng.random_range(1..=3)
            } else {
                rng.random_range(4..=5)
            });
        } else if severe[v] {
            if rng.random::<bool>() {
                catastrophic_illness = true;
            } else {
                dx_codes.remove(&primary_dx);
                primary_dx = format!("C{:02}", rng.random_range(1..=CATASTROPHIC_CODES));
                dx_codes.insert(primary_dx.clone());
            }
        }
        visits.push(RawVisit {
            patient_id: patients[p].patient_id.clone(),
            provider_id: provider_id(visit_provider[v]),
            visit_date: Some(date),
            primary_dx,
            dx_codes,
            treatment_codes,
            triage_level,
            catastrophic_illness,
            setting,
        });
    }

    let providers: Vec<RawProvider> = (0..n_providers)
        .map(|i| RawProvider {
            provider_id: provider_id(i),
            level: Some(levels[i]),
            region_code: Some(region_stats[provider_region[i]].region_code.clone()),
        })
        .collect();

    let code_sets = CodeSets {
        surgery_codes: code_set((1..=SURGERY_CODES).map(|i| format!("S{i:02}"))),
        er_codes: code_set([ER_CODE.to_string()]),
        chronic_dx_codes: code_set((0..spec.dx_vocabulary).step_by(5).map(dx_code)),
        catastrophic_dx_codes: code_set((1..=CATASTROPHIC_CODES).map(|i| format!("C{i:02}"))),
    };

    let mut data = RawDataset {
        patients,
        providers,
        visits,
        region_stats,
        calendar,
        code_sets,
    };
    let expected_audit = inject_violations(&mut data, spec, &workdays)?;
    Ok(Cohort { data, expected_audit })
}

/// Draws every provider's level from the tilted categorical, with intercepts
/// tuned so visit-weighted shares match the priors. Each provider keeps one
/// uniform draw throughout the tuning, so levels change only at thresholds.
fn assign_levels(
    spec: &CohortSpec,
    regions: &[RegionStats],
    provider_region: &[usize],
    visit_patient: &[usize],
    visit_provider: &[usize],
    n_providers: usize,
) -> Result<Vec<HospitalLevel>> {
    let mut by_patient: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (&p, &h) in visit_patient.iter().zip(visit_provider) {
        by_patient.entry(p).or_default().push(format!("H{:05}", h + 1));
    }
    let sequences: Vec<VisitSequence> = by_patient
        .into_iter()
        .map(|(p, hs)| VisitSequence::new(p.to_string(), hs))
        .collect();
    let votes = provider_votes(&sequences);
    let vote = |i: usize| {
        votes
            .get(&format!("H{:05}", i + 1))
            .map_or((0, 0), |v| (v.mfpc, v.lfpc))
    };

    let raw: Vec<[f64; 3]> = (0..n_providers)
        .map(|i| {
            let (m, l) = vote(i);
            [
                (1.0 + m as f64).ln(),
                (1.0 + l as f64).ln(),
                regions[provider_region[i]].physician_density,
            ]
        })
        .collect();
    let standardized = standardize(&raw);
    let s = spec.signal_strength;
    let tilt: Vec<[f64; 4]> = standardized
        .iter()
        .map(|x| {
            let mut t = [0.0; 4];
            for (c, coef) in spec.coefficients.iter().enumerate() {
                t[c] = s * (coef.mfpc * x[0] + coef.lfpc * x[1] + coef.density * x[2]);
            }
            t
        })
        .collect();

    let mut volume = vec![0.0; n_providers];
    for &h in visit_provider {
        volume[h] += 1.0;
    }
    let total: f64 = volume.iter().sum();
    let mut rng = stream(spec.seed, 7);
    let u: Vec<f64> = (0..n_providers).map(|_| rng.random::<f64>()).collect();

    let draw = |alpha: &[f64; 4]| -> Vec<usize> {
        tilt.iter()
            .zip(&u)
            .map(|(t, &ui)| {
                let logits: Vec<f64> = (0..4).map(|c| alpha[c] + t[c]).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = w.iter().sum();
                let mut acc = 0.0;
                for (c, wc) in w.iter().enumerate() {
                    acc += wc / z;
                    if ui < acc {
                        return c;
                    }
                }
                3
            })
            .collect()
    };
    let shares = |levels: &[usize]| {
        let mut sh = [0.0; 4];
        for (h, &c) in levels.iter().enumerate() {
            sh[c] += volume[h] / total;
        }
        sh
    };
    let priors = spec.normalized_priors();
    let deviation = |sh: &[f64; 4]| {
        sh.iter()
            .zip(&priors)
            .map(|(a, p)| ((a - p) / p).abs())
            .fold(0.0, f64::max)
    };

    let mut alpha = [0.0; 4];
    for c in 0..4 {
        alpha[c] = priors[c].ln();
    }
    let mut best = (f64::INFINITY, draw(&alpha));
    for iter in 0..400 {
        let levels = draw(&alpha);
        let sh = shares(&levels);
        let dev = deviation(&sh);
        if dev < best.0 {
            best = (dev, levels);
        }
        if dev < 0.005 {
            break;
        }
        let step = if iter < 100 { 1.0 } else { 0.3 };
        for c in 0..4 {
            alpha[c] += step * (priors[c] / sh[c].max(1e-6)).ln();
        }
    }
    Ok(best
        .1
        .into_iter()
        .map(|c| HospitalLevel::from_index(c).expect("four classes"))
        .collect())
}

fn standardize(rows: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = rows.len().max(1) as f64;
    let mut out = rows.to_vec();
    for j in 0..3 {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Adds `dirty_count` instances of every exclusion rule and returns the audit
/// ingest must report. Each injected record triggers exactly one rule.
fn inject_violations(data: &mut RawDataset, spec: &CohortSpec, workdays: &[NaiveDate]) -> Result<ExclusionAudit> {
    let k = spec.dirty_count;
    let mut audit = ExclusionAudit::default();
    if k == 0 {
        return Ok(audit);
    }
    let mut rng = stream(spec.seed, 8);
    let template = data.visits[0].clone();
    let any_day = |rng: &mut ChaCha8Rng| workdays[rng.random_range(0..workdays.len())];
    let birth = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid");
    let new_patient = |data: &mut RawDataset, tag: &str, i: usize, birth_date, genders: &[Gender]| {
        let id = format!("X{tag}{i:05}");
        data.patients.push(RawPatient {
            patient_id: id.clone(),
            birth_date,
            genders: genders.iter().copied().collect(),
            low_income: false,
        });
        id
    };
    let n_clean = spec.n_patients;
    let clean_patient = |rng: &mut ChaCha8Rng| rng.random_range(0..n_clean);

    let dirty_provider = "HX0001".to_string();
    data.providers.push(RawProvider {
        provider_id: dirty_provider.clone(),
        level: None,
        region_code: Some(data.region_stats[0].region_code.clone()),
    });

    for i in 0..k {
        // registry problems: one visit each, patient then has none accepted
        let id = new_patient(data, "B", i, None, &[Gender::Female]);
        let date = any_day(&mut rng);
        data.visits.push(RawVisit {
            patient_id: id,
            visit_date: Some(date),
            ..template.clone()
        });

        let id = new_patient(data, "G", i, Some(birth), &[Gender::Male, Gender::Female]);
        let date = any_day(&mut rng);
        data.visits.push(RawVisit {
            patient_id: id,
            visit_date: Some(date),
            ..template.clone()
        });

        // registry entry without any claims
        new_patient(data, "N", i, Some(birth), &[Gender::Male]);

        // record problems on patients that keep other accepted visits
        let p = clean_patient(&mut rng);
        let patient = data.patients[p].clone();
        data.visits.push(RawVisit {
            patient_id: patient.patient_id.clone(),
            visit_date: None,
            ..template.clone()
        });
        let before = patient.birth_date.expect("clean patient") - Duration::days(rng.random_range(1..=365));
        let p2 = clean_patient(&mut rng);
        data.visits.push(RawVisit {
            patient_id: patient.patient_id.clone(),
            visit_date: Some(before),
            ..template.clone()
        });
        let date = any_day(&mut rng);
        data.visits.push(RawVisit {
            patient_id: data.patients[p2].patient_id.clone(),
            visit_date: Some(date),
            primary_dx: String::new(),
            dx_codes: BTreeSet::new(),
            ..template.clone()
        });
        let p3 = clean_patient(&mut rng);
        let date = any_day(&mut rng);
        data.visits.push(RawVisit {
            patient_id: data.patients[p3].patient_id.clone(),
            provider_id: if i % 2 == 0 {
                dirty_provider.clone()
            } else {
                format!("HX{:04}", 9000 + i)
            },
            visit_date: Some(date),
            ..template.clone()
        });
    }
    for reason in ExclusionReason::ALL {
        let count = if reason == ExclusionReason::NoVisits { 3 * k } else { k };
        audit.counts.insert(reason, count);
    }
    Ok(audit)
}

/// Writes the ingest file set, the spec snapshot and, for dirty cohorts, the
/// expected audit as `injected.json`. A given config hash is stamped on every
/// file.
pub fn write_cohort(cohort: &Cohort, spec: &CohortSpec, dir: &Path, config_hash: Option<&str>) -> Result<()> {
    let header = config_hash.map(|h| format!("config_hash={h}"));
    write_raw_with_header(&cohort.data, dir, header.as_deref())?;
    let comment = header.as_ref().map(|h| format!("# {h}\n")).unwrap_or_default();
    write_file(&dir.join("cohort.cfg"), &format!("{comment}{}", spec.to_kv().render()))?;
    if spec.dirty_count > 0 {
        let mut value = serde_json::to_value(&cohort.expected_audit).map_err(|e| Error::json("injected audit", e))?;
        if let (Some(h), Some(map)) = (config_hash, value.as_object_mut()) {
            map.insert("config_hash".into(), h.into());
        }
        let text = serde_json::to_string_pretty(&value).map_err(|e| Error::json("injected audit", e))?;
        write_file(&dir.join("injected.json"), &text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::apply_exclusions;

    fn small(n: usize, seed: u64) -> CohortSpec {
        CohortSpec {
            n_patients: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn lognormal_matches_moments() {
        let (mu, sigma) = lognormal_params(16.70, 15.39);
        let mean = (mu + sigma * sigma / 2.0).exp();
        let var = (sigma * sigma).exp_m1() * (2.0 * mu + sigma * sigma).exp();
        assert!((mean - 16.70).abs() < 1e-9);
        assert!((var.sqrt() - 15.39).abs() < 1e-9);
    }

    #[test]
    fn quota_is_exact() {
        let mut rng = stream(0, 0);
        let q = quota(&mut rng, 1000, 0.0279);
        assert_eq!(q.iter().filter(|&&b| b).count(), 28);
    }

    #[test]
    fn holidays_and_weekends() {
        assert!(!is_default_workday(NaiveDate::from_ymd_opt(2010, 10, 10).unwrap()));
        assert!(!is_default_workday(NaiveDate::from_ymd_opt(2010, 1, 2).unwrap()));
        assert!(is_default_workday(NaiveDate::from_ymd_opt(2010, 1, 4).unwrap()));
    }

    #[test]
    fn clean_cohort_passes_ingest_untouched() {
        let cohort = generate_cohort(&small(300, 3)).unwrap();
        let (clean, audit) = apply_exclusions(&cohort.data).unwrap();
        assert!(audit.is_clean());
        assert_eq!(clean.visits.len(), cohort.data.visits.len());
        assert_eq!(clean.patients.len(), 300);
    }

    #[test]
    fn dirty_cohort_matches_injected_counts() {
        let spec = CohortSpec {
            dirty_count: 3,
            ..small(200, 1)
        };
        let cohort = generate_cohort(&spec).unwrap();
        let (_, audit) = apply_exclusions(&cohort.data).unwrap();
        assert_eq!(audit, cohort.expected_audit);
        assert_eq!(audit.count(ExclusionReason::NoVisits), 9);
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&small(150, 7)).unwrap();
        let b = generate_cohort(&small(150, 7)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small(150, 8)).unwrap();
        assert_ne!(a.data.visits, c.data.visits);
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let spec = CohortSpec {
            signal_strength: 0.25,
            dirty_count: 2,
            ..small(10, 4)
        };
        assert_eq!(CohortSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        let mut kv = spec.to_kv();
        kv.assign("prior.clinic=0.8").unwrap();
        assert!(CohortSpec::from_kv(&kv).is_err());
        let mut kv = spec.to_kv();
        kv.assign("coef.hospital.mfpc=1").unwrap();
        assert!(CohortSpec::from_kv(&kv).is_err());
        let mut kv = spec.to_kv();
        kv.assign("male_rate=1.5").unwrap();
        assert!(CohortSpec::from_kv(&kv).is_err());
    }
}
