//! Estimation utilities: empirical measures, total variation, tail fits and
//! moment-generating-function estimates.
//!
//! Total variation against a continuous law is always taken after binning
//! both sides onto a common cell structure. The binning itself belongs to the
//! caller (see [`crate::joint::Binning`]).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("cell structures differ: {left} cells vs {right} cells")]
    CellMismatch { left: usize, right: usize },
    #[error("insufficient data: got {got} usable points, need {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("invalid mass vector: {0}")]
    InvalidMass(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed value {value:?} on line {line}")]
    Parse { line: usize, value: String },
}

/// A probability vector over a fixed, caller-defined list of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    masses: Vec<f64>,
    sample_count: u64,
}

impl EmpiricalMeasure {
    /// Normalizes nonnegative weights (counts, occupation times, ...).
    pub fn from_weights(weights: Vec<f64>, sample_count: u64) -> Result<Self, StatsError> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(StatsError::InvalidMass(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(StatsError::InvalidMass("total weight is zero".into()));
        }
        let masses = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            masses,
            sample_count,
        })
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self, StatsError> {
        let n = counts.iter().sum();
        Self::from_weights(counts.iter().map(|&c| c as f64).collect(), n)
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn tv_to(&self, other: &[f64]) -> Result<f64, StatsError> {
        tv_distance(&self.masses, other)
    }
}

/// Total variation distance `(1/2) Σ |p_i − q_i|` between two mass vectors
/// on the same cells.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    if p.len() != q.len() {
        return Err(StatsError::CellMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).min(1.0))
}

/// Supremum distance between the empirical CDF of `samples` and `cdf`.
///
/// `samples` is sorted in place.
pub fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut worst: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let below = i as f64 / n;
        let above = (i + 1) as f64 / n;
        worst = worst.max((f - below).abs()).max((above - f).abs());
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailModel {
    /// `y ≈ A e^{slope·x}`; regress `ln y` on `x`.
    Exponential,
    /// `y ≈ A x^{slope}`; regress `ln y` on `ln x`.
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitRange {
    All,
    /// The last fraction of the points (by position), e.g. `1/3` for the tail third.
    TailFraction(f64),
    /// Points whose abscissa lies in `[lo, hi]`.
    Window { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub model: TailModel,
    /// Slope for exponential fits, exponent for power fits.
    pub slope: f64,
    pub intercept: f64,
    pub range: (f64, f64),
    pub points: usize,
    pub r_squared: f64,
}

pub const MIN_FIT_POINTS: usize = 20;

/// Least-squares fit on log-transformed coordinates.
///
/// Points with nonpositive ordinate (or nonpositive abscissa for power fits)
/// are dropped before the range policy is applied.
pub fn fit_tail(
    xs: &[f64],
    ys: &[f64],
    model: TailModel,
    range: FitRange,
) -> Result<TailFit, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::CellMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let usable: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| {
            y.is_finite() && **y > 0.0 && x.is_finite() && (model == TailModel::Exponential || **x > 0.0)
        })
        .map(|(x, y)| (*x, *y))
        .collect();
    let selected: Vec<(f64, f64)> = match range {
        FitRange::All => usable,
        FitRange::TailFraction(frac) => {
            let keep = ((usable.len() as f64) * frac.clamp(0.0, 1.0)).ceil() as usize;
            usable[usable.len() - keep.min(usable.len())..].to_vec()
        }
        FitRange::Window { lo, hi } => usable
            .into_iter()
            .filter(|(x, _)| *x >= lo && *x <= hi)
            .collect(),
    };
    if selected.len() < MIN_FIT_POINTS {
        return Err(StatsError::InsufficientData {
            got: selected.len(),
            need: MIN_FIT_POINTS,
        });
    }
    let pts: Vec<(f64, f64)> = selected
        .iter()
        .map(|&(x, y)| match model {
            TailModel::Exponential => (x, y.ln()),
            TailModel::Power => (x.ln(), y.ln()),
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(StatsError::InsufficientData {
            got: 1,
            need: MIN_FIT_POINTS,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    let lo = selected.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = selected.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(TailFit {
        model,
        slope,
        intercept,
        range: (lo, hi),
        points: selected.len(),
        r_squared,
    })
}

/// Empirical survival curve `(t_(i), P̂(T > t_(i)))` over the sorted sample,
/// omitting the last order statistic where the estimate is zero.
pub fn survival_curve(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut ts = Vec::with_capacity(n);
    let mut ps = Vec::with_capacity(n);
    for (i, t) in sorted.iter().enumerate() {
        let surv = (n - i - 1) as f64 / n as f64;
        if surv > 0.0 {
            ts.push(*t);
            ps.push(surv);
        }
    }
    (ts, ps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn mean_stderr(samples: &[f64]) -> MeanEstimate {
    let n = samples.len();
    if n == 0 {
        return MeanEstimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            count: 0,
        };
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanEstimate {
        mean,
        stderr,
        count: n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgfEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Set when the top 1% of samples carry more than half of the sum.
    pub heavy_tail: bool,
}

/// Sample mean of `e^{u x}` with a jackknife standard error.
pub fn mgf_estimate(samples: &[f64], u: f64) -> MgfEstimate {
    let n = samples.len();
    if n == 0 {
        return MgfEstimate {
            mean: f64::NAN,
            stderr: f64::NAN,
            heavy_tail: false,
        };
    }
    let ys: Vec<f64> = samples.iter().map(|x| (u * x).exp()).collect();
    let total: f64 = ys.iter().sum();
    let mean = total / n as f64;
    let stderr = if n > 1 {
        let nf = n as f64;
        let loo: Vec<f64> = ys.iter().map(|y| (total - y) / (nf - 1.0)).collect();
        let loo_mean = loo.iter().sum::<f64>() / nf;
        let ss: f64 = loo.iter().map(|m| (m - loo_mean).powi(2)).sum();
        ((nf - 1.0) / nf * ss).sqrt()
    } else {
        0.0
    };
    let mut sorted = ys;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = n.div_ceil(100);
    let top_sum: f64 = sorted[..top].iter().sum();
    let heavy_tail = n >= 2 && total > 0.0 && top_sum > 0.5 * total;
    MgfEstimate {
        mean,
        stderr,
        heavy_tail,
    }
}

/// Writes numeric columns as CSV with a header row.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<f64>]) -> Result<(), StatsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads one numeric column (by header name) from CSV.
pub fn read_csv_column<R: Read>(input: R, column: &str) -> Result<Vec<f64>, StatsError> {
    let mut r = csv::Reader::from_reader(input);
    let idx = r
        .headers()?
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| StatsError::Parse {
            line: 1,
            value: column.to_string(),
        })?;
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let raw = rec.get(idx).unwrap_or("").trim();
        let v = raw.parse::<f64>().map_err(|_| StatsError::Parse {
            line: i + 2,
            value: raw.to_string(),
        })?;
        values.push(v);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.6, 0.4], &[0.5, 0.5]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(
            tv_distance(&[1.0], &[0.5, 0.5]),
            Err(StatsError::CellMismatch { .. })
        ));
    }

    #[test]
    fn empirical_measure_normalizes() {
        let m = EmpiricalMeasure::from_counts(&[1, 3, 0]).unwrap();
        assert_eq!(m.masses(), &[0.25, 0.75, 0.0]);
        assert_eq!(m.sample_count(), 4);
        assert!(EmpiricalMeasure::from_weights(vec![-1.0, 2.0], 1).is_err());
    }

    #[test]
    fn exact_exponential_curve_slope() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (-2.0 * x).exp()).collect();
        let fit = fit_tail(&xs, &ys, TailModel::Exponential, FitRange::All).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_power_curve_exponent() {
        let xs: Vec<f64> = (1..60).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
        let fit = fit_tail(&xs, &ys, TailModel::Power, FitRange::All).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_exponential_within_ten_percent() {
        let kappa = 0.7;
        let mut rng = stream_rng(11, 0);
        let xs: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (-kappa * x).exp() * (1.0 + 0.05 * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        let fit = fit_tail(&xs, &ys, TailModel::Exponential, FitRange::All).unwrap();
        assert!((fit.slope + kappa).abs() < 0.1 * kappa, "{fit:?}");
    }

    #[test]
    fn fit_needs_twenty_points() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys = vec![1.0; 10];
        assert!(matches!(
            fit_tail(&xs, &ys, TailModel::Exponential, FitRange::All),
            Err(StatsError::InsufficientData { got: 10, .. })
        ));
    }

    #[test]
    fn mgf_at_zero_and_degenerate() {
        let est = mgf_estimate(&[0.3, 1.2, 5.0], 0.0);
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
        let est = mgf_estimate(&[2.0; 10], 0.4);
        assert!((est.mean - (0.8f64).exp()).abs() < 1e-14);
        assert!(est.stderr.abs() < 1e-14);
    }

    #[test]
    fn mgf_of_exponential_samples() {
        let beta = 2.0;
        let u = 0.5;
        let mut rng = stream_rng(3, 0);
        let exp = Exp::new(beta).unwrap();
        let xs: Vec<f64> = (0..200_000).map(|_| exp.sample(&mut rng)).collect();
        let est = mgf_estimate(&xs, u);
        let exact = beta / (beta - u);
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{est:?} vs {exact}");
        assert!(!est.heavy_tail);
    }

    #[test]
    fn jackknife_matches_plain_stderr_for_linear_statistic() {
        let xs = [0.1, 0.4, 0.9, 1.3, 2.2];
        let jk = mgf_estimate(&xs, 1.0);
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.exp()).collect();
        let plain = mean_stderr(&ys);
        assert!((jk.stderr - plain.stderr).abs() < 1e-12);
    }

    #[test]
    fn heavy_tail_flag() {
        let mut xs = vec![0.0; 200];
        xs[0] = 50.0;
        assert!(mgf_estimate(&xs, 1.0).heavy_tail);
    }

    #[test]
    fn ks_distance_of_exact_quantiles_is_small() {
        let n = 1000;
        let mut xs: Vec<f64> = (0..n)
            .map(|i| -(1.0 - (i as f64 + 0.5) / n as f64).ln())
            .collect();
        let d = ks_distance(&mut xs, |x| 1.0 - (-x).exp());
        assert!(d <= 0.5 / n as f64 + 1e-12);
    }

    #[test]
    fn csv_round_trip_of_a_column() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &["t", "tv"], &[vec![1.0, 0.5], vec![2.0, 0.25]]).unwrap();
        let tv = read_csv_column(buf.as_slice(), "tv").unwrap();
        assert_eq!(tv, vec![0.5, 0.25]);
    }

    #[test]
    fn survival_curve_drops_final_point() {
        let (ts, ps) = survival_curve(&[3.0, 1.0, 2.0]);
        assert_eq!(ts, vec![1.0, 2.0]);
        assert_eq!(ps, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    fn measure(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("nonzero", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-9).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(p in measure(8), q in measure(8), r in measure(8)) {
            let pq = tv_distance(&p, &q).unwrap();
            let qp = tv_distance(&q, &p).unwrap();
            let pr = tv_distance(&p, &r).unwrap();
            let rq = tv_distance(&r, &q).unwrap();
            prop_assert!((pq - qp).abs() < 1e-15);
            prop_assert!(pq <= pr + rq + 1e-12);
            prop_assert!((0.0..=1.0).contains(&pq));
        }

        #[test]
        fn refining_cells_never_lowers_tv(p in measure(16), q in measure(16)) {
            let coarse = |m: &[f64]| -> Vec<f64> { m.chunks(4).map(|c| c.iter().sum()).collect() };
            let fine = tv_distance(&p, &q).unwrap();
            let rough = tv_distance(&coarse(&p), &coarse(&q)).unwrap();
            prop_assert!(fine + 1e-12 >= rough);
        }
    }
}
