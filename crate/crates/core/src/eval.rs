//! Reconstruction metrics: MSE, TMP correlation, activation-time correlation
//! and scar Dice, plus per-split aggregation and CSV output.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::apsim::{Case, TmpSequence};
use crate::error::{CoreError, Result};
use crate::geometry::Geometry;

pub const CSV_HEADER: &str = "case_id,split,mse,tmp_corr,at_corr,dice,quality_flags";

fn check_same_shape(op: &'static str, a: &TmpSequence, b: &TmpSequence) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(CoreError::shape(
            op,
            format!("{:?} vs {:?}", a.values.shape(), b.values.shape()),
        ));
    }
    Ok(())
}

pub fn mse(x: &TmpSequence, xh: &TmpSequence) -> Result<f64> {
    check_same_shape("mse", x, xh)?;
    let n = x.values.len() as f64;
    Ok(x.values
        .data()
        .iter()
        .zip(xh.values.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::shape(
            "pearson_corr",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CoreError::undefined("pearson_corr", "zero-variance input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTimes {
    pub times: Vec<usize>,
    /// Nodes whose trace never rises; their time is 0.
    pub flat: Vec<bool>,
}

impl ActivationTimes {
    pub fn flat_count(&self) -> usize {
        self.flat.iter().filter(|&&f| f).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.times.iter().map(|&t| t as f64).collect()
    }
}

/// Frame at which each node's steepest upstroke lands: for the largest
/// forward difference `x[k+1] − x[k]` (first occurrence) the time is `k + 1`.
/// Traces with no positive difference get time 0 and are flagged.
pub fn activation_time(x: &TmpSequence) -> ActivationTimes {
    let n = x.nodes();
    let mut times = Vec::with_capacity(n);
    let mut flat = Vec::with_capacity(n);
    for j in 0..n {
        let trace = x.trace(j);
        let mut best = (0, f64::NEG_INFINITY);
        for (k, w) in trace.windows(2).enumerate() {
            let d = w[1] - w[0];
            if d > best.1 {
                best = (k, d);
            }
        }
        if best.1 > 0.0 {
            times.push(best.0 + 1);
            flat.push(false);
        } else {
            times.push(0);
            flat.push(true);
        }
    }
    ActivationTimes { times, flat }
}

pub fn at_corr(x: &TmpSequence, xh: &TmpSequence) -> Result<f64> {
    check_same_shape("at_corr", x, xh)?;
    pearson_corr(&activation_time(x).as_f64(), &activation_time(xh).as_f64())
}

/// Thresholds of the duration-based scar rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarRule {
    /// A frame counts toward a node's duration when its value exceeds this.
    pub level: f64,
    /// A node is scar when its duration is below this fraction of the median.
    pub fraction: f64,
}

impl Default for ScarRule {
    fn default() -> Self {
        Self {
            level: 0.5,
            fraction: 0.5,
        }
    }
}

pub fn durations(x: &TmpSequence, level: f64) -> Vec<usize> {
    (0..x.nodes())
        .map(|j| x.trace(j).iter().filter(|&&v| v > level).count())
        .collect()
}

fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn scar_from_tmp(xh: &TmpSequence, rule: &ScarRule) -> BTreeSet<usize> {
    let d = durations(xh, rule.level);
    let cut = rule.fraction * median(&d);
    (0..d.len()).filter(|&j| (d[j] as f64) < cut).collect()
}

pub fn dice(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64,
    }
}

pub fn mask_to_set(mask: &[bool]) -> BTreeSet<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mse: f64,
    pub tmp_corr: f64,
    pub at_corr: f64,
    pub dice: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["mse", "tmp_corr", "at_corr", "dice"];

impl MetricsRecord {
    pub fn to_array(self) -> [f64; 4] {
        [self.mse, self.tmp_corr, self.at_corr, self.dice]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            mse: a[0],
            tmp_corr: a[1],
            at_corr: a[2],
            dice: a[3],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRIC_NAMES
            .iter()
            .position(|&n| n == name)
            .map(|i| self.to_array()[i])
    }
}

/// Metrics of one case. An undefined metric is NaN and named in the flags.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRow {
    pub case_id: usize,
    pub split: String,
    pub metrics: MetricsRecord,
    pub flags: Vec<String>,
}

pub fn case_metrics(
    x: &TmpSequence,
    xh: &TmpSequence,
    scar_mask: &[bool],
    rule: &ScarRule,
) -> Result<(MetricsRecord, Vec<String>)> {
    let m = mse(x, xh)?;
    let mut flags = Vec::new();
    let tmp_corr = pearson_corr(x.values.data(), xh.values.data()).unwrap_or_else(|_| {
        flags.push("tmp_corr_undefined".to_string());
        f64::NAN
    });
    let (at_x, at_h) = (activation_time(x), activation_time(xh));
    for (name, at) in [("flat_at_true", &at_x), ("flat_at_recon", &at_h)] {
        if at.flat_count() > 0 {
            flags.push(format!("{name}={}", at.flat_count()));
        }
    }
    let at_corr = pearson_corr(&at_x.as_f64(), &at_h.as_f64()).unwrap_or_else(|_| {
        flags.push("at_corr_undefined".to_string());
        f64::NAN
    });
    let d = dice(&scar_from_tmp(xh, rule), &mask_to_set(scar_mask));
    Ok((
        MetricsRecord {
            mse: m,
            tmp_corr,
            at_corr,
            dice: d,
        },
        flags,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub split: String,
    pub n_cases: usize,
    pub mean: MetricsRecord,
    pub std: MetricsRecord,
    /// Cases left out of each metric's statistics because it was undefined.
    pub excluded: [usize; 4],
}

/// Mean and population standard deviation per metric over the defined
/// values.
pub fn aggregate(split: &str, rows: &[CaseRow]) -> Aggregate {
    let mut mean = [f64::NAN; 4];
    let mut std = [f64::NAN; 4];
    let mut excluded = [0; 4];
    for k in 0..4 {
        let vals: Vec<f64> = rows
            .iter()
            .map(|r| r.metrics.to_array()[k])
            .filter(|v| v.is_finite())
            .collect();
        excluded[k] = rows.len() - vals.len();
        if !vals.is_empty() {
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            mean[k] = m;
            std[k] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        }
    }
    Aggregate {
        split: split.to_string(),
        n_cases: rows.len(),
        mean: MetricsRecord::from_array(mean),
        std: MetricsRecord::from_array(std),
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    pub rows: Vec<CaseRow>,
    pub aggregate: Aggregate,
}

/// Reconstructs every case with `recon` and scores it against the ground
/// truth and the case's scar.
pub fn evaluate_split<F>(
    split: &str,
    cases: &[&Case],
    geom: &Geometry,
    rule: &ScarRule,
    mut recon: F,
) -> Result<SplitEval>
where
    F: FnMut(&Case) -> Result<TmpSequence>,
{
    if cases.is_empty() {
        return Err(CoreError::EmptySplit(split.to_string()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let xh = recon(case)?;
        let (metrics, flags) = case_metrics(&case.x, &xh, &case.scar_mask(geom), rule)?;
        rows.push(CaseRow {
            case_id: case.id,
            split: split.to_string(),
            metrics,
            flags,
        });
    }
    let aggregate = aggregate(split, &rows);
    Ok(SplitEval { rows, aggregate })
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Writes per-case rows followed by one `AGG:<split>` row per split. The
/// aggregate row carries means; its flags hold the case count, standard
/// deviations and exclusion counts.
pub fn write_csv<W: Write>(out: W, evals: &[SplitEval]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for e in evals {
        for r in &e.rows {
            let m = r.metrics.to_array();
            w.write_record([
                r.case_id.to_string(),
                r.split.clone(),
                fmt_f(m[0]),
                fmt_f(m[1]),
                fmt_f(m[2]),
                fmt_f(m[3]),
                r.flags.join(";"),
            ])
            .map_err(csv_err)?;
        }
        let a = &e.aggregate;
        let m = a.mean.to_array();
        let s = a.std.to_array();
        let mut flags = vec![format!("n={}", a.n_cases)];
        for k in 0..4 {
            flags.push(format!("std_{}={}", METRIC_NAMES[k], fmt_f(s[k])));
        }
        for k in 0..4 {
            if a.excluded[k] > 0 {
                flags.push(format!("excluded_{}={}", METRIC_NAMES[k], a.excluded[k]));
            }
        }
        w.write_record([
            format!("AGG:{}", a.split),
            a.split.clone(),
            fmt_f(m[0]),
            fmt_f(m[1]),
            fmt_f(m[2]),
            fmt_f(m[3]),
            flags.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Io(std::io::Error::other(e))
}
