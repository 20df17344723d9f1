//! Confusion-matrix accuracy metrics and aggregation over repeated runs.

use num_rational::Ratio;

use crate::error::{Error, Result};

/// Confusion counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
        }
        let mut c = Confusion::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::InvalidArg(format!("class pair ({t},{p}) outside {k} classes")));
            }
            c.counts[t * k + p] += 1;
        }
        Ok(c)
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }
}

/// OA, AA and kappa as exact fractions. AA averages recall over classes with
/// nonzero support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactMetrics {
    pub oa: Ratio<i128>,
    pub aa: Ratio<i128>,
    pub kappa: Ratio<i128>,
}

impl ExactMetrics {
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        let total = c.total() as i128;
        if total == 0 {
            return Err(Error::EmptyEvalSet);
        }
        let oa = Ratio::new(c.trace() as i128, total);
        let supported: Vec<usize> = (0..c.k).filter(|&i| c.row_sum(i) > 0).collect();
        let aa = supported
            .iter()
            .map(|&i| Ratio::new(c.get(i, i) as i128, c.row_sum(i) as i128))
            .sum::<Ratio<i128>>()
            / Ratio::from_integer(supported.len() as i128);
        let chance: i128 = (0..c.k).map(|i| c.row_sum(i) as i128 * c.col_sum(i) as i128).sum();
        let pe = Ratio::new(chance, total * total);
        let one = Ratio::from_integer(1);
        // p_e = 1 only when every sample sits in one class on both axes
        let kappa = if pe == one { one } else { (oa - pe) / (one - pe) };
        Ok(ExactMetrics { oa, aa, kappa })
    }
}

fn to_f64(r: &Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let exact = ExactMetrics::from_confusion(&confusion)?;
        let per_class_recall = (0..confusion.k)
            .map(|i| match confusion.row_sum(i) {
                0 => f64::NAN,
                n => confusion.get(i, i) as f64 / n as f64,
            })
            .collect();
        Ok(Metrics {
            oa: to_f64(&exact.oa),
            aa: to_f64(&exact.aa),
            kappa: to_f64(&exact.kappa),
            per_class_recall,
            confusion,
        })
    }

    pub fn from_predictions(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        Self::from_confusion(Confusion::from_predictions(k, truth, pred)?)
    }
}

/// Mean and sample standard deviation (zero for a single run).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `metric<TAB>mean<TAB>std` lines for OA, AA, kappa and each class recall.
pub fn format_report(runs: &[Metrics]) -> String {
    let mut rows: Vec<(String, Vec<f64>)> = vec![
        ("oa".into(), runs.iter().map(|m| m.oa).collect()),
        ("aa".into(), runs.iter().map(|m| m.aa).collect()),
        ("kappa".into(), runs.iter().map(|m| m.kappa).collect()),
    ];
    if let Some(first) = runs.first() {
        for k in 0..first.per_class_recall.len() {
            rows.push((
                format!("recall_{k}"),
                runs.iter().map(|m| m.per_class_recall[k]).collect(),
            ));
        }
    }
    rows.iter()
        .map(|(name, xs)| {
            let (m, s) = mean_std(xs);
            format!("{name}\t{m:.6}\t{s:.6}\n")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_case_is_exact() {
        let c = Confusion {
            k: 2,
            counts: vec![2, 1, 1, 2],
        };
        let m = ExactMetrics::from_confusion(&c).unwrap();
        assert_eq!(m.oa, Ratio::new(2, 3));
        assert_eq!(m.aa, Ratio::new(2, 3));
        assert_eq!(m.kappa, Ratio::new(1, 3));
    }

    #[test]
    fn perfect_and_chance() {
        let m = Metrics::from_predictions(3, &[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!((m.oa, m.aa, m.kappa), (1.0, 1.0, 1.0));
        let m = Metrics::from_predictions(2, &[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.kappa, 0.0);
        assert_eq!(m.aa, 0.5);
    }

    #[test]
    fn empty_set_errors() {
        assert!(matches!(
            Metrics::from_predictions(2, &[], &[]),
            Err(Error::EmptyEvalSet)
        ));
    }

    #[test]
    fn report_lines() {
        let a = Metrics::from_predictions(2, &[0, 1], &[0, 1]).unwrap();
        let b = Metrics::from_predictions(2, &[0, 1], &[0, 0]).unwrap();
        let r = format_report(&[a, b]);
        let first = r.lines().next().unwrap();
        assert_eq!(first, "oa\t0.750000\t0.353553");
        assert_eq!(r.lines().count(), 5);
    }
}
