//! Bag of little bootstraps over a disjoint partition.
//!
//! Each subset of size `b` is resampled up to the full size `n` with
//! multinomial multiplicities, and the estimator is fit on `(subset rows,
//! multiplicities)` directly; the `n`-row resample is never materialized.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stream;

/// Row-major table of real values, with an optional response column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    ncols: usize,
    response: Option<usize>,
    names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from row-major values. Column names default to `c0, c1, …`.
    pub fn new(values: Vec<f64>, ncols: usize, response: Option<usize>) -> Result<Self> {
        if ncols == 0 || !values.len().is_multiple_of(ncols) {
            return Err(Error::invalid(format!(
                "{} values do not form rows of {ncols} columns",
                values.len()
            )));
        }
        if let Some(r) = response {
            if r >= ncols {
                return Err(Error::invalid(format!("response column {r} out of range")));
            }
        }
        let names = (0..ncols).map(|j| format!("c{j}")).collect();
        Ok(Dataset {
            values,
            ncols,
            response,
            names,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], response: Option<usize>) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::invalid("ragged rows"));
        }
        Dataset::new(rows.concat(), ncols, response)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.ncols {
            return Err(Error::invalid("column name count does not match"));
        }
        self.names = names;
        Ok(self)
    }

    /// Reads a CSV with a header row. `response` names the response column, if any.
    pub fn read_csv<R: Read>(reader: R, response: Option<&str>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::invalid(format!("csv header: {e}")))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let response = match response {
            Some(name) => Some(
                names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| Error::invalid(format!("no column named {name:?}")))?,
            ),
            None => None,
        };
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("csv record {}: {e}", line + 1)))?;
            if rec.len() != names.len() {
                return Err(Error::invalid(format!("csv record {} has {} fields", line + 1, rec.len())));
            }
            for field in rec.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::invalid(format!("csv record {}: {field:?} is not a number", line + 1))
                })?;
                values.push(v);
            }
        }
        Dataset::new(values, names.len(), response)?.with_names(names)
    }

    pub fn nrows(&self) -> usize {
        self.values.len() / self.ncols
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn response(&self) -> Option<usize> {
        self.response
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.ncols)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Number of non-response columns.
    pub fn n_features(&self) -> usize {
        self.ncols - usize::from(self.response.is_some())
    }

    /// Copies the listed non-response entries of row `i` into `out`.
    pub fn features_into(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        let row = self.row(i);
        out.extend(
            row.iter()
                .enumerate()
                .filter(|&(j, _)| Some(j) != self.response)
                .map(|(_, &v)| v),
        );
    }

    pub fn response_value(&self, i: usize) -> Option<f64> {
        self.response.map(|r| self.row(i)[r])
    }

    /// A new dataset holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.ncols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Dataset {
            values,
            ncols: self.ncols,
            response: self.response,
            names: self.names.clone(),
        }
    }

    /// Replaces column `j` in place.
    pub fn map_column(&mut self, j: usize, f: impl Fn(f64) -> f64) {
        for row in self.values.chunks_exact_mut(self.ncols) {
            row[j] = f(row[j]);
        }
    }
}

/// A point estimator that accepts integer multiplicity weights.
pub trait Estimator: Sync {
    /// Dimension of the parameter vector fit on `data`.
    fn dim(&self, data: &Dataset) -> usize;

    /// Fits on `data` with row `i` counted `weights[i]` times.
    fn fit(&self, data: &Dataset, weights: &[u64]) -> Result<DVector<f64>>;

    /// Rate `r(n)` at which the estimator's covariance decays.
    fn convergence_rate(&self, n: f64) -> f64 {
        1.0 / n
    }
}

/// Randomly partitions the rows into `k` disjoint subsets whose sizes differ
/// by at most one.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, k: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    let n = data.nrows();
    if k == 0 || 2 * k > n {
        return Err(Error::invalid(format!(
            "cannot split {n} rows into {k} subsets of at least two rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(data.select(&idx[start..start + len]));
        start += len;
    }
    Ok(out)
}

/// Draws `Multinomial(n, 1_b / b)` counts by sequential conditional binomials.
pub fn multinomial_weights<R: Rng + ?Sized>(b: usize, n: u64, rng: &mut R) -> Result<Vec<u64>> {
    if b == 0 {
        return Err(Error::invalid("multinomial needs at least one cell"));
    }
    if b as u64 > n {
        return Err(Error::invalid(format!("{b} cells exceed total count {n}")));
    }
    let mut out = Vec::with_capacity(b);
    let mut remaining = n;
    for j in 0..b - 1 {
        if remaining == 0 {
            out.push(0);
            continue;
        }
        let p = 1.0 / (b - j) as f64;
        let draw = Binomial::new(remaining, p)
            .map_err(|e| Error::invalid(format!("binomial({remaining}, {p}): {e}")))?
            .sample(rng);
        out.push(draw);
        remaining -= draw;
    }
    out.push(remaining);
    Ok(out)
}

/// Per-subset replicate means and covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct BlbEstimates {
    pub theta: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub k: usize,
    pub r: usize,
    pub n: usize,
}

impl BlbEstimates {
    pub fn dim(&self) -> usize {
        self.theta.first().map_or(0, |t| t.len())
    }

    /// Mean of the `k` replicate means.
    pub fn mean_theta(&self) -> DVector<f64> {
        mean_of(&self.theta)
    }

    /// Mean of the `k` replicate covariances.
    pub fn mean_sigma(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        for s in &self.sigma {
            acc += s;
        }
        acc / self.sigma.len() as f64
    }

    /// Empirical covariance (denominator `k − 1`) of the replicate means.
    pub fn cov_theta(&self) -> DMatrix<f64> {
        sample_covariance(&self.theta)
    }
}

pub(crate) fn mean_of(xs: &[DVector<f64>]) -> DVector<f64> {
    let d = xs.first().map_or(0, |x| x.len());
    let mut acc = DVector::zeros(d);
    for x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

/// Unbiased sample covariance, exactly symmetric.
pub fn sample_covariance(xs: &[DVector<f64>]) -> DMatrix<f64> {
    let m = xs.len();
    let mean = mean_of(xs);
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    if m < 2 {
        return cov;
    }
    for x in xs {
        let c = x - &mean;
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (m - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Runs the bag of little bootstraps: `r` weighted fits on each of `k`
/// subsets, each resampled to total weight `n`.
///
/// Subsets run in parallel; replicate `(i, a)` draws from its own stream
/// under a master seed taken from `rng`, so the output is deterministic.
pub fn blb_run<R, E>(data: &Dataset, est: &E, k: usize, r: usize, rng: &mut R) -> Result<BlbEstimates>
where
    R: Rng + ?Sized,
    E: Estimator + ?Sized,
{
    if r < 2 {
        return Err(Error::invalid("BLB needs at least two replicates per subset"));
    }
    let n = data.nrows();
    let subsets = partition(data, k, rng)?;
    let master = stream::master_seed(rng);
    let per_subset: Vec<(DVector<f64>, DMatrix<f64>)> = subsets
        .par_iter()
        .enumerate()
        .map(|(i, subset)| {
            let fits = (0..r)
                .map(|a| {
                    let mut rr = stream::child(master, i as u32, a as u32);
                    let w = multinomial_weights(subset.nrows(), n as u64, &mut rr)?;
                    est.fit(subset, &w)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Replicate {
                    subset: i,
                    source: Box::new(e),
                })?;
            Ok((mean_of(&fits), sample_covariance(&fits)))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = per_subset[0].0.len();
    if per_subset.iter().any(|(t, _)| t.len() != d) {
        return Err(Error::invalid("estimator returned vectors of differing length"));
    }
    let (theta, sigma) = per_subset.into_iter().unzip();
    Ok(BlbEstimates { theta, sigma, k, r, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{Constant, WeightedMean};

    fn seq_data(n: usize) -> Dataset {
        Dataset::new((0..n).map(|i| i as f64).collect(), 1, None).unwrap()
    }

    #[test]
    fn partition_sizes() {
        let mut rng = stream::from_seed(1);
        let parts = partition(&seq_data(10), 2, &mut rng).unwrap();
        assert_eq!(parts.iter().map(Dataset::nrows).collect::<Vec<_>>(), vec![5, 5]);
        let parts = partition(&seq_data(10), 3, &mut rng).unwrap();
        let mut sizes: Vec<_> = parts.iter().map(Dataset::nrows).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let parts = partition(&seq_data(10), 1, &mut rng).unwrap();
        assert_eq!(parts[0].nrows(), 10);
        assert!(partition(&seq_data(10), 6, &mut rng).is_err());
        assert!(partition(&seq_data(10), 0, &mut rng).is_err());
    }

    #[test]
    fn partition_is_a_permutation() {
        let mut rng = stream::from_seed(2);
        let data = seq_data(101);
        let parts = partition(&data, 7, &mut rng).unwrap();
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.column(0)).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, data.column(0));
    }

    #[test]
    fn multinomial_examples() {
        let mut rng = stream::from_seed(3);
        assert_eq!(multinomial_weights(1, 7, &mut rng).unwrap(), vec![7]);
        for _ in 0..1000 {
            let w = multinomial_weights(13, 500, &mut rng).unwrap();
            assert_eq!(w.iter().sum::<u64>(), 500);
        }
        let w = multinomial_weights(2, 1_000_000, &mut rng).unwrap();
        let sd = (2.5e5_f64).sqrt();
        assert!((w[0] as f64 - 5e5).abs() < 4.0 * sd);
        assert!(multinomial_weights(5, 3, &mut rng).is_err());
    }

    #[test]
    fn multinomial_cells_are_binomial() {
        // each cell is marginally Binomial(n, 1/b): check the last cell's mean and variance
        let mut rng = stream::from_seed(4);
        let (b, n, trials) = (5usize, 40u64, 20_000);
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..trials {
            let w = multinomial_weights(b, n, &mut rng).unwrap();
            let x = w[b - 1] as f64;
            s += x;
            s2 += x * x;
        }
        let mean = s / trials as f64;
        let var = s2 / trials as f64 - mean * mean;
        assert!((mean - 8.0).abs() < 0.1, "{mean}");
        assert!((var - 6.4).abs() < 0.3, "{var}");
    }

    #[test]
    fn constant_estimator_gives_zero_covariance() {
        let mut rng = stream::from_seed(5);
        let c = DVector::from_vec(vec![1.5, -2.0]);
        let est = Constant(c.clone());
        let blb = blb_run(&seq_data(40), &est, 4, 10, &mut rng).unwrap();
        assert_eq!(blb.theta.len(), 4);
        for (t, s) in blb.theta.iter().zip(&blb.sigma) {
            assert_eq!(t, &c);
            assert_eq!(s.amax(), 0.0);
        }
    }

    #[test]
    fn weighted_mean_bootstrap_variance() {
        // k = 1 reduces to the ordinary bootstrap: Var ≈ population var / n
        let data = Dataset::new(vec![1.0, 2.0, 4.0, 7.0, 11.0, 16.0], 1, None).unwrap();
        let vals = data.column(0);
        let mean = vals.iter().sum::<f64>() / 6.0;
        let pop_var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        let mut rng = stream::from_seed(6);
        let blb = blb_run(&data, &WeightedMean { column: 0 }, 1, 20_000, &mut rng).unwrap();
        assert!((blb.theta[0][0] - mean).abs() < 0.05);
        let v = blb.sigma[0][(0, 0)];
        assert!((v / (pop_var / 6.0) - 1.0).abs() < 0.05, "{v} vs {}", pop_var / 6.0);
    }

    #[test]
    fn blb_is_deterministic_and_symmetric() {
        let mut rng = stream::from_seed(7);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random(), rng.random()]).collect();
        let data = Dataset::from_rows(&rows, None).unwrap();
        let est = crate::estimators::ColumnMeans;
        let a = blb_run(&data, &est, 5, 8, &mut stream::from_seed(9)).unwrap();
        let b = blb_run(&data, &est, 5, 8, &mut stream::from_seed(9)).unwrap();
        assert_eq!(a, b);
        for s in &a.sigma {
            assert!((s - s.transpose()).amax() <= 1e-12);
        }
    }

    #[test]
    fn replicate_errors_name_the_subset() {
        struct Fails;
        impl Estimator for Fails {
            fn dim(&self, _: &Dataset) -> usize {
                1
            }
            fn fit(&self, _: &Dataset, _: &[u64]) -> Result<DVector<f64>> {
                Err(Error::SingularFit("nope".into()))
            }
        }
        let mut rng = stream::from_seed(1);
        let err = blb_run(&seq_data(10), &Fails, 2, 2, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Replicate { .. }), "{err}");
    }

    #[test]
    fn csv_ingestion() {
        let text = "x, y\n1, 2\n3,4\n";
        let d = Dataset::read_csv(text.as_bytes(), Some("y")).unwrap();
        assert_eq!(d.nrows(), 2);
        assert_eq!(d.response(), Some(1));
        assert_eq!(d.row(1), &[3.0, 4.0]);
        assert!(Dataset::read_csv("x\nfoo\n".as_bytes(), None).is_err());
        assert!(Dataset::read_csv(text.as_bytes(), Some("z")).is_err());
    }
}
