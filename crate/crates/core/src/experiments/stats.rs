use serde::{Deserialize, Serialize};

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// A metric sampled on an axis with one value per repetition (or ensemble
/// member) at each point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub axis: Vec<f64>,
    /// `values[i][r]`: point `i`, repetition `r`.
    pub values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: String, axis: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        assert_eq!(axis.len(), values.len(), "one value set per axis point");
        let (mean, std) = values.iter().map(|v| mean_std(v)).unzip();
        Self {
            name,
            axis,
            values,
            mean,
            std,
        }
    }

    pub fn median(&self) -> Vec<f64> {
        self.values.iter().map(|v| median(v)).collect()
    }

    /// Mean at the axis point equal to `x`.
    pub fn mean_at(&self, x: f64) -> Option<f64> {
        self.axis.iter().position(|&a| a == x).map(|i| self.mean[i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn stored_statistics_match_recomputation(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..6), 1..8)
        ) {
            let axis: Vec<f64> = (0..rows.len()).map(|i| i as f64).collect();
            let s = MetricSeries::new("p".into(), axis, rows.clone());
            for (i, r) in rows.iter().enumerate() {
                let (m, sd) = mean_std(r);
                prop_assert_eq!(s.mean[i], m);
                prop_assert_eq!(s.std[i], sd);
                prop_assert!(r.iter().cloned().fold(f64::INFINITY, f64::min) <= m + 1e-9);
                prop_assert!(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) >= m - 1e-9);
            }
            let back: MetricSeries = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let s = MetricSeries::new("m".into(), vec![1.0, 2.0], vec![vec![1.0, 3.0], vec![5.0]]);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.mean_at(2.0), Some(5.0));
        assert_eq!(s.median(), vec![2.0, 5.0]);
    }
}
