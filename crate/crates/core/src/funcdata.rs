//! Irregularly sampled trajectories: validation, cleaning, gap filling,
//! differentiation, and the CSV layouts used to move datasets around.
//!
//! A [`Trajectory`] lives on its own time domain. Nothing here assumes that
//! two subjects share sampling times or durations.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, fmt_f64, write_comment};

/// One subject's functional predictor, sampled at strictly increasing times
/// (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.len() != values.len() {
            return Err(Error::Validation(format!(
                "subject {subject_id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::Validation(format!(
                "subject {subject_id}: need at least 2 samples, got {}",
                times.len()
            )));
        }
        if let Some(bad) = times.iter().chain(&values).find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("subject {subject_id}: non-finite sample {bad}")));
        }
        if let Some(k) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "subject {subject_id}: times not strictly increasing at t={}",
                times[k + 1]
            )));
        }
        Ok(Trajectory { subject_id, times, values })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `T_i`, the length of the observed time domain.
    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    /// Same samples with every time stamp shifted by `offset`.
    pub fn shifted(&self, offset: f64) -> Result<Trajectory> {
        Trajectory::new(
            self.subject_id.clone(),
            self.times.iter().map(|t| t + offset).collect(),
            self.values.clone(),
        )
    }
}

/// Trajectories joined to covariates `z` (n×q) and binary outcomes `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub covariate_names: Vec<String>,
    pub covariates: DMatrix<f64>,
    pub outcomes: Vec<u8>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, covariate_names: Vec<String>, covariates: DMatrix<f64>, outcomes: Vec<u8>) -> Result<Self> {
        let n = trajectories.len();
        if n == 0 {
            return Err(Error::Validation("dataset has no subjects".into()));
        }
        if covariates.nrows() != n || outcomes.len() != n {
            return Err(Error::Validation(format!(
                "inconsistent sizes: {n} trajectories, {} covariate rows, {} outcomes",
                covariates.nrows(),
                outcomes.len()
            )));
        }
        if covariates.ncols() != covariate_names.len() {
            return Err(Error::Validation(format!(
                "{} covariate columns but {} names",
                covariates.ncols(),
                covariate_names.len()
            )));
        }
        if let Some(bad) = outcomes.iter().find(|&&y| y > 1) {
            return Err(Error::Validation(format!("outcome {bad} is not 0/1")));
        }
        Ok(Dataset {
            trajectories,
            covariate_names,
            covariates,
            outcomes,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            covariates: self.covariates.select_rows(indices),
            outcomes: indices.iter().map(|&i| self.outcomes[i]).collect(),
        }
    }

    /// Same subjects with a different outcome vector.
    pub fn with_outcomes(&self, outcomes: Vec<u8>) -> Result<Dataset> {
        Dataset::new(
            self.trajectories.clone(),
            self.covariate_names.clone(),
            self.covariates.clone(),
            outcomes,
        )
    }

    /// Appends a covariate column.
    pub fn with_covariate(&self, name: &str, column: &[f64]) -> Result<Dataset> {
        if column.len() != self.len() {
            return Err(Error::Validation(format!(
                "covariate {name} has {} rows, dataset has {}",
                column.len(),
                self.len()
            )));
        }
        let n = self.len();
        let q = self.n_covariates();
        let mut z = self.covariates.clone().resize_horizontally(q + 1, 0.0);
        for i in 0..n {
            z[(i, q)] = column[i];
        }
        let mut names = self.covariate_names.clone();
        names.push(name.to_string());
        Dataset::new(self.trajectories.clone(), names, z, self.outcomes.clone())
    }
}

/// Data-quality rules applied per trajectory before analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleaningPolicy {
    pub value_min: f64,
    pub value_max: f64,
    /// Largest tolerated spacing between consecutive kept samples (seconds).
    pub max_gap: f64,
    /// Shortest tolerated duration (seconds).
    pub min_duration: f64,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            value_min: 10.0,
            value_max: 250.0,
            max_gap: 300.0,
            min_duration: 1800.0,
        }
    }
}

impl CleaningPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.value_min < self.value_max) {
            return Err(Error::Validation(format!(
                "cleaning bounds [{}, {}] are empty",
                self.value_min, self.value_max
            )));
        }
        if !(self.max_gap > 0.0) || !(self.min_duration > 0.0) {
            return Err(Error::Validation("max_gap and min_duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    /// A gap between kept samples exceeds `max_gap`.
    Gap,
    /// Kept samples span less than `min_duration`.
    Short,
    /// Fewer than two samples survive the value bounds.
    Empty,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Gap => "gap",
            RejectReason::Short => "short",
            RejectReason::Empty => "empty",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CleanOutcome {
    Kept(Trajectory),
    Rejected(RejectReason),
}

/// Drops out-of-range samples, then rejects trajectories with excessive gaps,
/// too short a duration, or fewer than two remaining samples.
pub fn clean(traj: &Trajectory, policy: &CleaningPolicy) -> CleanOutcome {
    let (times, values): (Vec<f64>, Vec<f64>) = traj
        .times
        .iter()
        .zip(&traj.values)
        .filter(|(_, &v)| v >= policy.value_min && v <= policy.value_max)
        .map(|(&t, &v)| (t, v))
        .unzip();
    if times.len() < 2 {
        return CleanOutcome::Rejected(RejectReason::Empty);
    }
    if times.windows(2).any(|w| w[1] - w[0] > policy.max_gap) {
        return CleanOutcome::Rejected(RejectReason::Gap);
    }
    if times[times.len() - 1] - times[0] < policy.min_duration {
        return CleanOutcome::Rejected(RejectReason::Short);
    }
    CleanOutcome::Kept(Trajectory {
        subject_id: traj.subject_id.clone(),
        times,
        values,
    })
}

/// One row of the cleaning report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleaningRecord {
    pub subject_id: String,
    pub reason: Option<RejectReason>,
}

/// Cleans every trajectory, keeping covariates and outcomes of the surviving
/// subjects. Rejections are returned alongside, never dropped silently.
pub fn clean_dataset(dataset: &Dataset, policy: &CleaningPolicy) -> Result<(Dataset, Vec<CleaningRecord>)> {
    policy.validate()?;
    let mut kept_idx = Vec::new();
    let mut kept = Vec::new();
    let mut report = Vec::with_capacity(dataset.len());
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        match clean(traj, policy) {
            CleanOutcome::Kept(t) => {
                kept_idx.push(i);
                kept.push(t);
                report.push(CleaningRecord {
                    subject_id: traj.subject_id.clone(),
                    reason: None,
                });
            }
            CleanOutcome::Rejected(reason) => report.push(CleaningRecord {
                subject_id: traj.subject_id.clone(),
                reason: Some(reason),
            }),
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation("every trajectory was rejected by the cleaning policy".into()));
    }
    let mut out = dataset.subset(&kept_idx);
    out.trajectories = kept;
    Ok((out, report))
}

/// Inserts linearly interpolated points wherever consecutive samples are
/// more than `target_dt` apart, so every spacing ends up `<= target_dt`.
/// Original samples are kept bit-for-bit.
pub fn fill_gaps(traj: &Trajectory, target_dt: f64) -> Result<Trajectory> {
    if !(target_dt > 0.0) {
        return Err(Error::InvalidInput(format!("target_dt must be positive, got {target_dt}")));
    }
    // Spacings within rounding of target_dt count as filled.
    let limit = target_dt * (1.0 + 1e-9);
    let n = traj.len();
    let mut times = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for k in 0..n - 1 {
        let (t0, t1) = (traj.times[k], traj.times[k + 1]);
        let (v0, v1) = (traj.values[k], traj.values[k + 1]);
        times.push(t0);
        values.push(v0);
        let gap = t1 - t0;
        if gap > limit {
            let pieces = (gap / target_dt).ceil() as usize;
            let step = gap / pieces as f64;
            for m in 1..pieces {
                let t = t0 + step * m as f64;
                if t >= t1 {
                    break;
                }
                times.push(t);
                values.push(v0 + (v1 - v0) * (t - t0) / gap);
            }
        }
    }
    times.push(traj.times[n - 1]);
    values.push(traj.values[n - 1]);
    Trajectory::new(traj.subject_id.clone(), times, values)
}

/// Rate of change at each sample: central divided differences inside,
/// one-sided differences at the two endpoints.
pub fn derivative(traj: &Trajectory) -> Vec<f64> {
    let (t, x) = (&traj.times, &traj.values);
    let n = t.len();
    let mut d = Vec::with_capacity(n);
    d.push((x[1] - x[0]) / (t[1] - t[0]));
    for k in 1..n - 1 {
        d.push((x[k + 1] - x[k - 1]) / (t[k + 1] - t[k - 1]));
    }
    d.push((x[n - 1] - x[n - 2]) / (t[n - 1] - t[n - 2]));
    d
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, what: &str, path: &Path) -> Result<T> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).ok_or_else(|| Error::Parse {
        file: path.to_path_buf(),
        line,
        message: format!("missing field {what}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        file: path.to_path_buf(),
        line,
        message: format!("cannot parse {what} from {raw:?}"),
    })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?)
}

fn check_header(found: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    let ok = found.len() >= expected.len() && expected.iter().zip(found.iter()).all(|(e, f)| e == &f);
    if ok {
        Ok(())
    } else {
        Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header starting with {}, found {}",
                expected.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        })
    }
}

/// Reads a trajectory CSV (`subject_id,t_seconds,value`, rows in any order)
/// and a table CSV (`subject_id,y,z1,...,zq`), joined on `subject_id`. The
/// dataset follows the table's row order.
pub fn load_dataset(trajectory_path: &Path, table_path: &Path) -> Result<Dataset> {
    let mut samples: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut rdr = csv_reader(trajectory_path)?;
    check_header(rdr.headers()?, &["subject_id", "t_seconds", "value"], trajectory_path)?;
    for rec in rdr.records() {
        let rec = rec?;
        let id: String = parse_field(&rec, 0, "subject_id", trajectory_path)?;
        let t: f64 = parse_field(&rec, 1, "t_seconds", trajectory_path)?;
        let v: f64 = parse_field(&rec, 2, "value", trajectory_path)?;
        samples.entry(id).or_default().push((t, v));
    }

    let mut rdr = csv_reader(table_path)?;
    let header = rdr.headers()?.clone();
    check_header(&header, &["subject_id", "y"], table_path)?;
    let covariate_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let q = covariate_names.len();

    let mut trajectories = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut outcomes = Vec::new();
    let mut seen = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != q + 2 {
            return Err(Error::Parse {
                file: table_path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", q + 2, rec.len()),
            });
        }
        let id: String = parse_field(&rec, 0, "subject_id", table_path)?;
        let y: u8 = parse_field(&rec, 1, "y", table_path)?;
        if y > 1 {
            return Err(Error::Parse {
                file: table_path.to_path_buf(),
                line,
                message: format!("y must be 0 or 1, found {y}"),
            });
        }
        for j in 0..q {
            z_rows.push(parse_field(&rec, j + 2, &covariate_names[j], table_path)?);
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(Error::Validation(format!("subject {id} appears twice in {}", table_path.display())));
        }
        let mut pts = samples.remove(&id).ok_or_else(|| {
            Error::Join(format!(
                "subject {id} (line {line} of {}) has no trajectory samples",
                table_path.display()
            ))
        })?;
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (times, values) = pts.into_iter().unzip();
        trajectories.push(Trajectory::new(id, times, values)?);
        outcomes.push(y);
    }
    if let Some(orphan) = samples.keys().min() {
        return Err(Error::Join(format!(
            "subject {orphan} has trajectory samples but no row in {}",
            table_path.display()
        )));
    }
    let n = trajectories.len();
    let covariates = DMatrix::from_row_slice(n, q, &z_rows);
    Dataset::new(trajectories, covariate_names, covariates, outcomes)
}

pub fn write_trajectories(out: &mut dyn Write, dataset: &Dataset, comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "t_seconds", "value"])?;
    for traj in &dataset.trajectories {
        for (t, v) in traj.times.iter().zip(&traj.values) {
            w.write_record([traj.subject_id.as_str(), &fmt_f64(*t), &fmt_f64(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(out: &mut dyn Write, dataset: &Dataset, comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id".to_string(), "y".to_string()];
    header.extend(dataset.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        let mut row = vec![traj.subject_id.clone(), dataset.outcomes[i].to_string()];
        row.extend(dataset.covariates.row(i).iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cleaning_report(out: &mut dyn Write, report: &[CleaningRecord], comment: Option<&str>) -> Result<()> {
    write_comment(out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "status", "reason"])?;
    for r in report {
        let (status, reason) = match r.reason {
            None => ("kept", ""),
            Some(reason) => ("rejected", reason.as_str()),
        };
        w.write_record([r.subject_id.as_str(), status, reason])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trajectories.csv` and `table.csv` into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset, comment: Option<&str>) -> Result<()> {
    atomic_write(&dir.join("trajectories.csv"), |w| write_trajectories(w, dataset, comment))?;
    atomic_write(&dir.join("table.csv"), |w| write_table(w, dataset, comment))
}
