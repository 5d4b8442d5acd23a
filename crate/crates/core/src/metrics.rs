//! Alignment curves, their normalized regression summary, judge-agreement
//! statistics and long-term profile curves.

use serde::{Deserialize, Serialize};

use crate::env::EpisodeRecord;
use crate::error::{Error, Result};

/// Per-turn alignment levels AL(k), k = 1..K, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCurve {
    pub values: Vec<f64>,
    pub instances: usize,
}

impl AlignmentCurve {
    pub fn new(values: Vec<f64>, instances: usize) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Argument(format!("alignment level {v} outside [0, 100]")));
        }
        Ok(AlignmentCurve { values, instances })
    }

    /// AL(k) for every k up to the shortest episode.
    pub fn from_episodes(episodes: &[EpisodeRecord]) -> Result<Self> {
        let horizon = episodes.iter().map(|e| e.turns.len()).min().unwrap_or(0);
        let values = (1..=horizon)
            .map(|k| alignment_level(episodes, k))
            .collect::<Result<Vec<_>>>()?;
        AlignmentCurve::new(values, episodes.len())
    }

    pub fn average(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Global min/max normalization followed by the least-squares fit.
    pub fn summary(&self) -> Result<RegressionFit> {
        fit_improvement(&normalize_curve(&self.values, Normalization::Global)?)
    }
}

/// Percentage of episodes whose turn-`k` response was judged aligned.
pub fn alignment_level(episodes: &[EpisodeRecord], k: usize) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Argument("no episodes".into()));
    }
    if k == 0 {
        return Err(Error::Argument("turns are numbered from 1".into()));
    }
    let mut pass = 0usize;
    for e in episodes {
        let turn = e.turns.get(k - 1).ok_or_else(|| {
            Error::Argument(format!(
                "episode {} has {} turns, asked for turn {k}",
                e.scenario_id,
                e.turns.len()
            ))
        })?;
        pass += usize::from(turn.aligned);
    }
    Ok(alignment_level_from_counts(pass, episodes.len()))
}

pub fn alignment_level_from_counts(pass: usize, total: usize) -> f64 {
    100.0 * pass as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Min and max over the whole curve.
    #[default]
    Global,
    /// Min and max over turns 1..=k for each k; a zero range maps to 0.
    Running,
}

/// N-AL(k) = (AL(k) − m) / (M − m). Constant curves map to all zeros.
pub fn normalize_curve(values: &[f64], mode: Normalization) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 turns to normalize, got {}",
            values.len()
        )));
    }
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    Ok(match mode {
        Normalization::Global => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            values.iter().map(|&v| scale(v, lo, hi)).collect()
        }
        Normalization::Running => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            values
                .iter()
                .map(|&v| {
                    lo = lo.min(v);
                    hi = hi.max(v);
                    scale(v, lo, hi)
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    /// N-IR.
    pub slope: f64,
    pub intercept: f64,
    /// N-R².
    pub r_squared: f64,
}

/// Ordinary least squares of `values[k-1]` against k = 1..K.
pub fn fit_improvement(values: &[f64]) -> Result<RegressionFit> {
    if values.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 points to fit, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean_x = (n + 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (i, y) in values.iter().enumerate() {
        let dx = (i + 1) as f64 - mean_x;
        let dy = y - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if syy <= f64::EPSILON * n {
        return Ok(RegressionFit {
            slope: 0.0,
            intercept: mean_y,
            r_squared: 0.0,
        });
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = values
        .iter()
        .enumerate()
        .map(|(i, y)| (y - (intercept + slope * (i + 1) as f64)).powi(2))
        .sum();
    Ok(RegressionFit {
        slope,
        intercept,
        r_squared: 1.0 - ss_res / syy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    /// Tallies (predicted, actual) pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = ConfusionMatrix::default();
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, true) => m.fn_ += 1,
                (false, false) => m.tn += 1,
            }
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Cohen's kappa; `None` when chance agreement is 1.
    pub kappa: Option<f64>,
}

impl AgreementStats {
    pub const CSV_HEADER: &'static str = "tp,fp,fn,tn,accuracy,precision,recall,f1,specificity,kappa";

    pub fn csv_row(&self, m: &ConfusionMatrix) -> String {
        let kappa = self.kappa.map_or_else(|| "undefined".to_owned(), |k| format!("{k:.4}"));
        format!(
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            m.tp, m.fp, m.fn_, m.tn, self.accuracy, self.precision, self.recall, self.f1, self.specificity, kappa
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn agreement_stats(m: &ConfusionMatrix) -> Result<AgreementStats> {
    let n = m.total();
    if n == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let nf = n as f64;
    let p_o = (m.tp + m.tn) as f64 / nf;
    let p_e = ((m.tp + m.fp) as f64 * (m.tp + m.fn_) as f64 + (m.fn_ + m.tn) as f64 * (m.fp + m.tn) as f64)
        / (nf * nf);
    Ok(AgreementStats {
        accuracy: p_o,
        precision: ratio(m.tp, m.tp + m.fp),
        recall: ratio(m.tp, m.tp + m.fn_),
        f1: ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_),
        specificity: ratio(m.tn, m.tn + m.fp),
        kappa: (p_e < 1.0).then(|| (p_o - p_e) / (1.0 - p_e)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongtermRow {
    pub turn: usize,
    /// Recall of the estimate against the true profile.
    pub profile_score: f64,
    pub f1: f64,
    pub theoretical_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongtermCurve {
    pub rows: Vec<LongtermRow>,
    pub average: LongtermRow,
}

impl LongtermCurve {
    pub const CSV_HEADER: &'static str = "turn,profile_score,f1,theoretical_max";

    pub fn csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.turn, r.profile_score, r.f1, r.theoretical_max));
        }
        let a = &self.average;
        out.push_str(&format!("AVG,{},{},{}\n", a.profile_score, a.f1, a.theoretical_max));
        out
    }
}

/// The long-term checkpoints 1, 10, 20, …, `horizon`.
pub fn longterm_checkpoints(horizon: usize) -> Vec<usize> {
    let mut ks = vec![1];
    ks.extend((10..=horizon).step_by(10));
    ks
}

pub fn longterm_profile_curve(episode: &EpisodeRecord, checkpoints: &[usize]) -> Result<LongtermCurve> {
    if checkpoints.is_empty() {
        return Err(Error::Argument("no checkpoints".into()));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &k in checkpoints {
        if k == 0 || k > episode.turns.len() {
            return Err(Error::Argument(format!(
                "checkpoint {k} outside episode of {} turns",
                episode.turns.len()
            )));
        }
        let t = &episode.turns[k - 1];
        rows.push(LongtermRow {
            turn: k,
            profile_score: t.profile_recall,
            f1: t.reward.profile,
            theoretical_max: t.theoretical_max,
        });
    }
    let n = rows.len() as f64;
    let average = LongtermRow {
        turn: 0,
        profile_score: rows.iter().map(|r| r.profile_score).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        theoretical_max: rows.iter().map(|r| r.theoretical_max).sum::<f64>() / n,
    };
    Ok(LongtermCurve { rows, average })
}

/// Mean of several long-term curves over the same checkpoints.
pub fn mean_longterm_curve(curves: &[LongtermCurve]) -> Result<LongtermCurve> {
    let first = curves.first().ok_or_else(|| Error::Argument("no curves".into()))?;
    let n = curves.len() as f64;
    let avg_row = |pick: &dyn Fn(&LongtermCurve) -> LongtermRow| {
        let rows: Vec<LongtermRow> = curves.iter().map(pick).collect();
        LongtermRow {
            turn: rows[0].turn,
            profile_score: rows.iter().map(|r| r.profile_score).sum::<f64>() / n,
            f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
            theoretical_max: rows.iter().map(|r| r.theoretical_max).sum::<f64>() / n,
        }
    };
    let mut rows = Vec::with_capacity(first.rows.len());
    for i in 0..first.rows.len() {
        if curves.iter().any(|c| c.rows.get(i).map(|r| r.turn) != Some(first.rows[i].turn)) {
            return Err(Error::Argument("curves use different checkpoints".into()));
        }
        rows.push(avg_row(&|c| c.rows[i]));
    }
    Ok(LongtermCurve {
        rows,
        average: avg_row(&|c| c.average),
    })
}

/// Per-turn AL table: `method,1,…,K,AVG,N-IR,N-R2`.
pub fn alignment_table_csv(rows: &[(String, AlignmentCurve)]) -> Result<String> {
    let k = rows.iter().map(|(_, c)| c.values.len()).max().unwrap_or(0);
    let mut out = String::from("method");
    for i in 1..=k {
        out.push_str(&format!(",{i}"));
    }
    out.push_str(",AVG,N-IR,N-R2\n");
    for (label, curve) in rows {
        let fit = curve.summary()?;
        out.push_str(label);
        for v in &curve.values {
            out.push_str(&format!(",{v:.2}"));
        }
        out.push_str(&format!(",{:.2},{:.3},{:.3}\n", curve.average(), fit.slope, fit.r_squared));
    }
    Ok(out)
}

/// Summary table: `method,AVG,N-IR,N-R2,R2_raw`.
pub fn summary_table_csv(rows: &[(String, AlignmentCurve)]) -> Result<String> {
    let mut out = String::from("method,AVG,N-IR,N-R2,R2_raw\n");
    for (label, curve) in rows {
        let fit = curve.summary()?;
        let raw = fit_improvement(&curve.values)?;
        out.push_str(&format!(
            "{label},{:.2},{:.3},{:.3},{:.3}\n",
            curve.average(),
            fit.slope,
            fit.r_squared,
            raw.r_squared
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const STEADY: [f64; 10] = [62.16, 68.92, 70.27, 74.32, 72.97, 74.32, 75.68, 78.38, 77.03, 79.73];
    const PLATEAU: [f64; 10] = [2.7, 24.32, 41.89, 40.54, 59.46, 56.76, 54.05, 54.05, 54.05, 55.41];

    #[test]
    fn alignment_level_counts() {
        assert_abs_diff_eq!(alignment_level_from_counts(46, 74), 62.16, epsilon = 0.005);
        assert_eq!(alignment_level_from_counts(74, 74), 100.0);
        assert_eq!(alignment_level_from_counts(0, 74), 0.0);
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_curve(&STEADY, Normalization::Global).unwrap();
        assert_eq!(n[0], 0.0);
        assert_eq!(n[9], 1.0);
        assert_eq!(normalize_curve(&[50.0; 3], Normalization::Global).unwrap(), vec![0.0; 3]);
        assert_eq!(normalize_curve(&[0.0, 100.0], Normalization::Global).unwrap(), vec![0.0, 1.0]);
        let running = normalize_curve(&[10.0, 20.0, 15.0], Normalization::Running).unwrap();
        assert_eq!(running, vec![0.0, 1.0, 0.5]);
        assert!(normalize_curve(&[1.0], Normalization::Global).is_err());
    }

    #[test]
    fn published_rows() {
        let fit = fit_improvement(&normalize_curve(&STEADY, Normalization::Global).unwrap()).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.090, epsilon = 0.001);
        assert_abs_diff_eq!(fit.r_squared, 0.855, epsilon = 0.005);
        let fit = fit_improvement(&normalize_curve(&PLATEAU, Normalization::Global).unwrap()).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.083, epsilon = 0.001);
        assert_abs_diff_eq!(fit.r_squared, 0.628, epsilon = 0.01);
    }

    #[test]
    fn linear_and_constant_fits() {
        let fit = fit_improvement(&[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_abs_diff_eq!(fit.slope, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        let flat = fit_improvement(&[0.0; 4]).unwrap();
        assert_eq!((flat.slope, flat.r_squared), (0.0, 0.0));
    }

    #[test]
    fn agreement_examples() {
        let s = agreement_stats(&ConfusionMatrix::new(124, 21, 18, 137)).unwrap();
        assert_abs_diff_eq!(s.accuracy, 0.87, epsilon = 0.001);
        assert_abs_diff_eq!(s.precision, 0.855, epsilon = 0.001);
        assert_abs_diff_eq!(s.recall, 0.873, epsilon = 0.001);
        assert_abs_diff_eq!(s.f1, 0.864, epsilon = 0.001);
        assert_abs_diff_eq!(s.specificity, 0.867, epsilon = 0.001);
        assert_abs_diff_eq!(s.kappa.unwrap(), 0.740, epsilon = 0.001);

        let s = agreement_stats(&ConfusionMatrix::new(50, 0, 0, 50)).unwrap();
        assert_eq!((s.accuracy, s.f1, s.kappa), (1.0, 1.0, Some(1.0)));

        let s = agreement_stats(&ConfusionMatrix::new(25, 25, 25, 25)).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert_abs_diff_eq!(s.kappa.unwrap(), 0.0, epsilon = 1e-12);

        // every label positive on both sides: chance agreement is 1
        assert_eq!(agreement_stats(&ConfusionMatrix::new(10, 0, 0, 0)).unwrap().kappa, None);
        assert!(agreement_stats(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn confusion_from_pairs() {
        let m = ConfusionMatrix::from_pairs([(true, true), (true, false), (false, true), (false, false), (true, true)]);
        assert_eq!(m, ConfusionMatrix::new(2, 1, 1, 1));
    }

    #[test]
    fn checkpoints_layout() {
        assert_eq!(longterm_checkpoints(70), vec![1, 10, 20, 30, 40, 50, 60, 70]);
    }

    #[test]
    fn table_layout() {
        let curve = AlignmentCurve::new(STEADY.to_vec(), 74).unwrap();
        let csv = alignment_table_csv(&[("STEADY".into(), curve)]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,1,2,3,4,5,6,7,8,9,10,AVG,N-IR,N-R2");
        assert!(lines.next().unwrap().ends_with(",73.38,0.090,0.855"));
        assert!(AlignmentCurve::new(vec![120.0], 1).is_err());
    }
}
