//! Run records and metrics: one JSON line per control step during an
//! episode, and pure functions reducing those lines to the summary
//! numbers. Wall-clock timing is kept out of `metrics.json` (it goes to
//! `timing.json`) so identical seeds produce byte-identical metric files.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("record io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty run record")]
    EmptyRun,
}

/// One control step of an episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub t: f64,
    /// Vehicle state: X, Y, psi, v_x, v_y, omega.
    pub state: [f64; 6],
    /// Applied control (a_x, delta_f).
    pub control: [f64; 2],
    /// Reference feedforward control at this step.
    pub control_ref: [f64; 2],
    /// Barrier coefficient chosen this cycle (0 = inactive).
    pub mu: f64,
    pub in_pursuit_region: bool,
    pub no_escape: bool,
    /// Signed distance to the nearest repulsive boundary; absent when the
    /// scene has no obstacles.
    pub nearest_obstacle_distance: Option<f64>,
    /// Signed lateral offset from the guiding trajectory (m).
    pub e_y: f64,
    /// Heading offset from the guiding-trajectory tangent (rad).
    pub e_psi: f64,
    /// Arc-length progress along the guiding trajectory (m).
    pub progress: f64,
    /// Wall-clock seconds spent producing this step's control.
    pub solve_time: f64,
    pub iterations: usize,
    pub converged: bool,
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Online model sizes: (inducing points, kernel centers).
    pub gp_inducing: usize,
    pub kernel_centers: usize,
}

/// Deterministic summary: a pure function of the run record and the
/// metric weights — no wall-clock content.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DeterministicMetrics {
    pub length_m: f64,
    pub j_mc: f64,
    pub ct_s: f64,
    pub min_obstacle_distance_m: Option<f64>,
    pub mean_abs_ey_m: f64,
    pub n_steps: usize,
}

/// Wall-clock summary, reported separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub aver_st_s: f64,
    pub max_st_s: f64,
}

/// Full report: the deterministic block plus average solve time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub deterministic: DeterministicMetrics,
    #[serde(flatten)]
    pub timing: TimingReport,
}

/// Reduce a run record to its metrics. The per-step tracking cost is
/// `Q1 e_y^2 + Q2 e_psi^2 + (u - u_ref)^T R (u - u_ref)` with diagonal
/// `R = diag(r_diag)`, averaged over the M steps.
pub fn compute_metrics(
    records: &[RunRecord],
    q1: f64,
    q2: f64,
    r_diag: [f64; 2],
) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let mut length = 0.0;
    for w in records.windows(2) {
        let dx = w[1].state[0] - w[0].state[0];
        let dy = w[1].state[1] - w[0].state[1];
        length += (dx * dx + dy * dy).sqrt();
    }
    let m = records.len() as f64;
    let mut j_mc = 0.0;
    let mut abs_ey = 0.0;
    let mut min_dist: Option<f64> = None;
    let mut st_sum = 0.0;
    let mut st_max = 0.0f64;
    for r in records {
        let du = [r.control[0] - r.control_ref[0], r.control[1] - r.control_ref[1]];
        j_mc += q1 * r.e_y * r.e_y
            + q2 * r.e_psi * r.e_psi
            + r_diag[0] * du[0] * du[0]
            + r_diag[1] * du[1] * du[1];
        abs_ey += r.e_y.abs();
        if let Some(d) = r.nearest_obstacle_distance {
            min_dist = Some(match min_dist {
                Some(cur) => cur.min(d),
                None => d,
            });
        }
        st_sum += r.solve_time;
        st_max = st_max.max(r.solve_time);
    }
    Ok(MetricsReport {
        deterministic: DeterministicMetrics {
            length_m: length,
            j_mc: j_mc / m,
            ct_s: records.last().unwrap().t,
            min_obstacle_distance_m: min_dist,
            mean_abs_ey_m: abs_ey / m,
            n_steps: records.len(),
        },
        timing: TimingReport { aver_st_s: st_sum / m, max_st_s: st_max },
    })
}

pub fn write_jsonl(records: &[RunRecord], path: &Path) -> Result<(), MetricsError> {
    let io_err = |source| MetricsError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>, MetricsError> {
    let file = std::fs::File::open(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|source| MetricsError::Malformed { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

/// Serialize the deterministic block to `metrics.json` and the timing
/// block to `timing.json` in `dir`.
pub fn write_reports(report: &MetricsReport, dir: &Path) -> Result<(), MetricsError> {
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| MetricsError::Io { path: path.clone(), source }
    };
    let mpath = dir.join("metrics.json");
    let bytes = serde_json::to_vec_pretty(&report.deterministic).expect("metrics serialize");
    std::fs::write(&mpath, bytes).map_err(io_err(&mpath))?;
    let tpath = dir.join("timing.json");
    let bytes = serde_json::to_vec_pretty(&report.timing).expect("timing serialize");
    std::fs::write(&tpath, bytes).map_err(io_err(&tpath))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn blank_record(step: usize) -> RunRecord {
        RunRecord {
            step,
            t: step as f64 * 0.1,
            state: [0.0; 6],
            control: [0.0; 2],
            control_ref: [0.0; 2],
            mu: 0.0,
            in_pursuit_region: false,
            no_escape: false,
            nearest_obstacle_distance: None,
            e_y: 0.0,
            e_psi: 0.0,
            progress: 0.0,
            solve_time: 0.001,
            iterations: 1,
            converged: true,
            critic_loss: 0.0,
            actor_loss: 0.0,
            gp_inducing: 0,
            kernel_centers: 1,
        }
    }

    #[test]
    fn straight_three_point_run_has_length_two() {
        let mut records: Vec<RunRecord> = (0..3).map(blank_record).collect();
        for (i, r) in records.iter_mut().enumerate() {
            r.state[0] = i as f64;
        }
        let m = compute_metrics(&records, 1.0, 1.0, [1.0, 1.0]).unwrap();
        assert_eq!(m.deterministic.length_m, 2.0);
        assert_eq!(m.deterministic.n_steps, 3);
        assert_eq!(m.deterministic.ct_s, 0.2);
    }

    #[test]
    fn perfect_tracking_scores_zero() {
        let records: Vec<RunRecord> = (0..5).map(blank_record).collect();
        let m = compute_metrics(&records, 1.0, 1.0, [1.0, 1.0]).unwrap();
        assert_eq!(m.deterministic.j_mc, 0.0);
        assert_eq!(m.deterministic.mean_abs_ey_m, 0.0);
        assert_eq!(m.deterministic.min_obstacle_distance_m, None);
    }

    #[test]
    fn weighted_cost_matches_hand_sum() {
        let mut records: Vec<RunRecord> = (0..2).map(blank_record).collect();
        records[0].e_y = 0.5;
        records[0].e_psi = 0.1;
        records[0].control = [1.0, 0.2];
        records[0].control_ref = [0.5, 0.1];
        records[1].e_y = -0.25;
        records[1].nearest_obstacle_distance = Some(2.0);
        records[0].nearest_obstacle_distance = Some(3.5);
        // Step 0: 2*0.25 + 3*0.01 + 0.5*0.25 + 4*0.01 = 0.695
        // Step 1: 2*0.0625 = 0.125; mean = 0.41
        let m = compute_metrics(&records, 2.0, 3.0, [0.5, 4.0]).unwrap();
        assert!((m.deterministic.j_mc - 0.41).abs() < 1e-12);
        assert!((m.deterministic.mean_abs_ey_m - 0.375).abs() < 1e-12);
        assert_eq!(m.deterministic.min_obstacle_distance_m, Some(2.0));
    }

    #[test]
    fn empty_run_is_an_error() {
        assert!(matches!(
            compute_metrics(&[], 1.0, 1.0, [1.0, 1.0]),
            Err(MetricsError::EmptyRun)
        ));
    }

    #[test]
    fn jsonl_round_trip_and_report_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut records: Vec<RunRecord> = (0..4).map(blank_record).collect();
        records[2].e_y = 0.125;
        records[3].mu = 1.0;
        let path = dir.path().join("run.jsonl");
        write_jsonl(&records, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[2].e_y, 0.125);
        assert_eq!(back[3].mu, 1.0);

        let report = compute_metrics(&back, 1.0, 1.0, [1.0, 1.0]).unwrap();
        write_reports(&report, dir.path()).unwrap();
        let metrics_bytes = std::fs::read(dir.path().join("metrics.json")).unwrap();
        let parsed: DeterministicMetrics = serde_json::from_slice(&metrics_bytes).unwrap();
        assert_eq!(parsed, report.deterministic);
        // Timing stays out of the deterministic file.
        assert!(!String::from_utf8(metrics_bytes).unwrap().contains("aver_st"));
        let timing: TimingReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("timing.json")).unwrap())
                .unwrap();
        assert!((timing.aver_st_s - 0.001).abs() < 1e-12);
    }
}
