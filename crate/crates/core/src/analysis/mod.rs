//! Correlation statistics, checkpoint selection and experiment orchestration.

pub mod experiment;
pub mod svg;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use experiment::{run_experiment, ExperimentBundle, ExperimentConfig, ExperimentSummary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    TooShort(usize),
    #[error("series is constant")]
    ConstantSeries,
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("series {0} and {1} are sampled at different epochs")]
    Misaligned(String, String),
    #[error("need at least {need} series, got {got}")]
    TooFewSeries { need: usize, got: usize },
    #[error("empty score series")]
    Empty,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooShort(a.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(StatsError::ConstantSeries);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, tied values share their average rank.
pub fn ranks(a: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
    let mut r = vec![0.0; a.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && a[idx[j + 1]] == a[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Rank correlation: Pearson of the average-rank transforms.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    check_pair(a, b)?;
    pearson(&ranks(a), &ranks(b))
}

/// Values of one quantity at a sequence of checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub label: String,
    pub epochs: Vec<usize>,
    pub values: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(label: &str, epochs: Vec<usize>, values: Vec<f64>) -> Result<Self, StatsError> {
        let s = Self { label: label.to_string(), epochs, values };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.epochs.len() != self.values.len() {
            return Err(StatsError::LengthMismatch(self.epochs.len(), self.values.len()));
        }
        if self.epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(StatsError::Misaligned(self.label.clone(), "epochs not strictly increasing".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().position(|&e| e == epoch).map(|i| self.values[i])
    }
}

/// Epoch of the highest score, earliest on ties.
pub fn select_checkpoint(series: &ScoreSeries) -> Result<usize, StatsError> {
    let mut best: Option<(usize, f64)> = None;
    for (&e, &v) in series.epochs.iter().zip(&series.values) {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((e, v));
        }
    }
    best.map(|(e, _)| e).ok_or(StatsError::Empty)
}

/// Epoch of the lowest value (e.g. a loss), earliest on ties.
pub fn select_min(series: &ScoreSeries) -> Result<usize, StatsError> {
    let neg = ScoreSeries { values: series.values.iter().map(|v| -v).collect(), ..series.clone() };
    select_checkpoint(&neg)
}

/// Pairwise Pearson and Spearman coefficients. `None` marks pairs with a
/// constant series, which have no defined correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub pearson: Vec<Vec<Option<f64>>>,
    pub spearman: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn pearson_of(&self, a: &str, b: &str) -> Option<f64> {
        self.pearson[self.index(a)?][self.index(b)?]
    }

    pub fn spearman_of(&self, a: &str, b: &str) -> Option<f64> {
        self.spearman[self.index(a)?][self.index(b)?]
    }

    /// Labels whose series were constant (every off-diagonal cell empty).
    pub fn excluded(&self) -> Vec<String> {
        let n = self.labels.len();
        (0..n).filter(|&i| (0..n).all(|j| self.pearson[i][j].is_none())).map(|i| self.labels[i].clone()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,pearson,spearman\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "excluded".into());
        for (i, a) in self.labels.iter().enumerate() {
            for (j, b) in self.labels.iter().enumerate() {
                out.push_str(&format!("{a},{b},{},{}\n", cell(self.pearson[i][j]), cell(self.spearman[i][j])));
            }
        }
        out
    }
}

/// All pairwise correlations of series sampled at identical epochs.
pub fn correlation_matrix(series: &[ScoreSeries]) -> Result<CorrelationMatrix, StatsError> {
    if series.len() < 2 {
        return Err(StatsError::TooFewSeries { need: 2, got: series.len() });
    }
    for s in series {
        s.validate()?;
        if s.epochs != series[0].epochs {
            return Err(StatsError::Misaligned(series[0].label.clone(), s.label.clone()));
        }
    }
    let n = series.len();
    let mut p = vec![vec![None; n]; n];
    let mut r = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let pv = pearson(&series[i].values, &series[j].values);
            let rv = spearman(&series[i].values, &series[j].values);
            for (m, v) in [(&mut p, pv), (&mut r, rv)] {
                match v {
                    Ok(x) => {
                        let x = if i == j { 1.0 } else { x };
                        m[i][j] = Some(x);
                        m[j][i] = Some(x);
                    }
                    // undefined correlation: constant series, or a single checkpoint
                    Err(StatsError::ConstantSeries | StatsError::TooShort(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(CorrelationMatrix { labels: series.iter().map(|s| s.label.clone()).collect(), pearson: p, spearman: r })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_cases() {
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 2.0]).unwrap(), -1.0);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ConstantSeries));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(StatsError::TooShort(1)));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 5.0], &[0.1, 0.2, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(StatsError::ConstantSeries));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn selection() {
        let s = ScoreSeries::new("v", vec![5, 10, 15], vec![0.1, 0.3, 0.2]).unwrap();
        assert_eq!(select_checkpoint(&s).unwrap(), 10);
        let flat = ScoreSeries::new("v", vec![5, 10, 15], vec![0.4; 3]).unwrap();
        assert_eq!(select_checkpoint(&flat).unwrap(), 5);
        assert_eq!(select_min(&s).unwrap(), 5);
        let one = ScoreSeries::new("v", vec![25], vec![0.0]).unwrap();
        assert_eq!(select_checkpoint(&one).unwrap(), 25);
    }

    #[test]
    fn matrix_excludes_constant() {
        let e = vec![5, 10, 15];
        let s = vec![
            ScoreSeries::new("a", e.clone(), vec![1.0, 2.0, 3.0]).unwrap(),
            ScoreSeries::new("b", e.clone(), vec![0.0, 0.0, 0.0]).unwrap(),
            ScoreSeries::new("c", e, vec![3.0, 1.0, 2.0]).unwrap(),
        ];
        let m = correlation_matrix(&s).unwrap();
        assert_eq!(m.excluded(), vec!["b".to_string()]);
        assert_eq!(m.pearson_of("a", "a"), Some(1.0));
        assert_eq!(m.pearson_of("a", "c"), m.pearson_of("c", "a"));
    }

    #[test]
    fn misaligned_rejected() {
        let a = ScoreSeries::new("a", vec![5, 10], vec![1.0, 2.0]).unwrap();
        let b = ScoreSeries::new("b", vec![15, 20], vec![1.0, 2.0]).unwrap();
        assert!(matches!(correlation_matrix(&[a, b]), Err(StatsError::Misaligned(..))));
    }
}
