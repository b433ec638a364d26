use serde::{Deserialize, Serialize};

use super::report::ResultRecord;
use super::HarnessError;
use crate::geometry::{rotation_to_euler, PoseSE3};

/// Distance between camera centers, meters.
pub fn translation_error(gt: &PoseSE3, est: &PoseSE3) -> f64 {
    (gt.camera_center() - est.camera_center()).norm()
}

/// Largest absolute Euler angle of `R_gt · R_estᵀ`, degrees.
pub fn max_orientation_error(gt: &PoseSE3, est: &PoseSE3) -> f64 {
    rotation_to_euler(&(gt.rotation() * est.rotation().transpose())).max_abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub queries: usize,
    pub successes: usize,
    /// Percent of queries with status success and translation error within the threshold.
    pub success_rate: f64,
    pub median_translation_error: Option<f64>,
    pub rmse_translation_error: Option<f64>,
    pub median_orientation_error: Option<f64>,
    pub rmse_orientation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub schema_version: u32,
    pub failure_threshold: f64,
    pub methods: Vec<MethodSummary>,
}

pub fn is_success(record: &ResultRecord, threshold: f64) -> bool {
    record.status == "success" && record.translation_error <= threshold
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn rmse(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt())
}

/// Per-method success rate and error statistics over successful records.
/// Methods are listed in order of first appearance.
pub fn summarize(records: &[ResultRecord], threshold: f64) -> Result<SummaryReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    let mut order: Vec<String> = Vec::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    let methods = order
        .into_iter()
        .map(|m| {
            let rows: Vec<&ResultRecord> = records.iter().filter(|r| r.method == m).collect();
            let ok: Vec<&ResultRecord> = rows.iter().copied().filter(|r| is_success(r, threshold)).collect();
            let mut t: Vec<f64> = ok.iter().map(|r| r.translation_error).collect();
            let mut o: Vec<f64> = ok.iter().map(|r| r.orientation_error).collect();
            MethodSummary {
                method: m,
                queries: rows.len(),
                successes: ok.len(),
                success_rate: 100.0 * ok.len() as f64 / rows.len() as f64,
                rmse_translation_error: rmse(&t),
                rmse_orientation_error: rmse(&o),
                median_translation_error: median(&mut t),
                median_orientation_error: median(&mut o),
            }
        })
        .collect();
    Ok(SummaryReport { schema_version: super::report::SCHEMA_VERSION, failure_threshold: threshold, methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_rotation, Axis};
    use nalgebra::Vector3;

    fn record(method: &str, status: &str, t: f64, o: f64) -> ResultRecord {
        ResultRecord {
            query_id: 0,
            method: method.into(),
            status: status.into(),
            translation_error: t,
            orientation_error: o,
            ..Default::default()
        }
    }

    #[test]
    fn identical_poses_have_zero_error() {
        let p = PoseSE3::new(axis_rotation(Axis::X, 12.0), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(translation_error(&p, &p), 0.0);
        assert!(max_orientation_error(&p, &p).abs() < 1e-12);
    }

    #[test]
    fn three_four_five() {
        let gt = PoseSE3::identity();
        let est = PoseSE3::new(nalgebra::Matrix3::identity(), Vector3::new(-3.0, -4.0, 0.0)).unwrap();
        assert!((translation_error(&gt, &est) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_error() {
        let gt = PoseSE3::identity();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let est = PoseSE3::new(axis_rotation(axis, 10.0), Vector3::zeros()).unwrap();
            assert!((max_orientation_error(&gt, &est) - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn all_success_zero_error() {
        let recs = vec![record("fb", "success", 0.0, 0.0), record("fb", "success", 0.0, 0.0)];
        let s = summarize(&recs, 10.0).unwrap();
        assert_eq!(s.methods[0].success_rate, 100.0);
        assert_eq!(s.methods[0].median_translation_error, Some(0.0));
        assert_eq!(s.methods[0].rmse_translation_error, Some(0.0));
    }

    #[test]
    fn over_threshold_counts_as_failure() {
        let recs = vec![record("mi", "success", 1.0, 0.5), record("mi", "success", 12.0, 0.1)];
        let s = summarize(&recs, 10.0).unwrap();
        assert_eq!(s.methods[0].success_rate, 50.0);
        assert_eq!(s.methods[0].median_translation_error, Some(1.0));
    }

    #[test]
    fn statistics_match_direct_recomputation() {
        let recs: Vec<ResultRecord> = (0..9)
            .map(|i| {
                let status = if i % 4 == 3 { "no_consensus" } else { "success" };
                record(if i % 2 == 0 { "fb" } else { "hy" }, status, 0.3 * i as f64, 0.7 * i as f64)
            })
            .collect();
        let s = summarize(&recs, 2.0).unwrap();
        for m in &s.methods {
            let ok: Vec<&ResultRecord> =
                recs.iter().filter(|r| r.method == m.method && r.status == "success" && r.translation_error <= 2.0).collect();
            let mut t: Vec<f64> = ok.iter().map(|r| r.translation_error).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want_median = if t.len() % 2 == 1 { t[t.len() / 2] } else { (t[t.len() / 2 - 1] + t[t.len() / 2]) / 2.0 };
            let want_rmse = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
            assert!((m.median_translation_error.unwrap() - want_median).abs() < 1e-12);
            assert!((m.rmse_translation_error.unwrap() - want_rmse).abs() < 1e-12);
            let total = recs.iter().filter(|r| r.method == m.method).count();
            assert!((m.success_rate - 100.0 * ok.len() as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn no_records_is_error() {
        assert!(matches!(summarize(&[], 10.0), Err(HarnessError::NoRecords)));
    }
}
