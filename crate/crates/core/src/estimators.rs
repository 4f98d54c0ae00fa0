//! Weighted point estimators usable inside the bootstrap.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::blb::{Dataset, Estimator};
use crate::error::{Error, Result};

/// Relative ridge added to a Gram matrix whose Cholesky factorization fails.
pub const GRAM_JITTER_REL: f64 = 1e-10;

fn total_weight(data: &Dataset, weights: &[u64]) -> Result<f64> {
    if weights.len() != data.nrows() {
        return Err(Error::invalid(format!(
            "{} weights for {} rows",
            weights.len(),
            data.nrows()
        )));
    }
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::invalid("all weights are zero"));
    }
    Ok(total as f64)
}

fn design_row(data: &Dataset, i: usize, intercept: bool, out: &mut Vec<f64>) {
    data.features_into(i, out);
    if intercept {
        out.insert(0, 1.0);
    }
}

fn need_response(data: &Dataset) -> Result<usize> {
    data.response()
        .ok_or_else(|| Error::invalid("estimator needs a response column"))
}

/// Weighted ordinary least squares of the response on the other columns.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ols {
    pub intercept: bool,
}

impl Ols {
    fn solve(gram: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(ch) = Cholesky::new(gram.clone()) {
            return Ok(ch.solve(rhs));
        }
        let p = gram.nrows();
        let jitter = GRAM_JITTER_REL * gram.trace() / p as f64;
        if jitter > 0.0 && jitter.is_finite() {
            let ridged = gram + DMatrix::identity(p, p) * jitter;
            if let Some(ch) = Cholesky::new(ridged) {
                return Ok(ch.solve(rhs));
            }
        }
        Err(Error::SingularFit("weighted Gram matrix is singular".into()))
    }
}

impl Estimator for Ols {
    fn dim(&self, data: &Dataset) -> usize {
        data.n_features() + usize::from(self.intercept)
    }

    fn fit(&self, data: &Dataset, weights: &[u64]) -> Result<DVector<f64>> {
        need_response(data)?;
        total_weight(data, weights)?;
        let p = self.dim(data);
        if p == 0 {
            return Err(Error::invalid("no covariates"));
        }
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        let mut x = Vec::with_capacity(p);
        for (i, &w) in weights.iter().enumerate() {
            if w == 0 {
                continue;
            }
            let w = w as f64;
            design_row(data, i, self.intercept, &mut x);
            let y = data.response_value(i).unwrap_or_default();
            for a in 0..p {
                rhs[a] += w * x[a] * y;
                for b in a..p {
                    gram[(a, b)] += w * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let beta = Ols::solve(gram, &rhs)?;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularFit("non-finite coefficients".into()));
        }
        Ok(beta)
    }
}

/// Weighted logistic regression fit by Newton's method with step halving.
/// The response must be 0/1; `tol` applies to the weight-averaged gradient.
#[derive(Debug, Clone, Copy)]
pub struct Logistic {
    pub intercept: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for Logistic {
    fn default() -> Self {
        Logistic {
            intercept: false,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// A fit whose every residual is below this has separated the classes.
const SEPARATION_RESIDUAL: f64 = 1e-6;

/// Coefficients beyond this magnitude are taken as a sign of separation.
const LOGISTIC_DIVERGENCE: f64 = 1e4;

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    fn design(&self, data: &Dataset, weights: &[u64]) -> (Vec<DVector<f64>>, Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        let mut buf = Vec::new();
        for (i, &w) in weights.iter().enumerate() {
            if w == 0 {
                continue;
            }
            design_row(data, i, self.intercept, &mut buf);
            xs.push(DVector::from_column_slice(&buf));
            ys.push(data.response_value(i).unwrap_or_default());
            ws.push(w as f64);
        }
        (xs, ys, ws)
    }

    fn neg_loglik(beta: &DVector<f64>, xs: &[DVector<f64>], ys: &[f64], ws: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .zip(ws)
            .map(|((x, &y), &w)| {
                let z = x.dot(beta);
                w * (log1p_exp(z) - y * z)
            })
            .sum()
    }
}

impl Estimator for Logistic {
    fn dim(&self, data: &Dataset) -> usize {
        data.n_features() + usize::from(self.intercept)
    }

    fn fit(&self, data: &Dataset, weights: &[u64]) -> Result<DVector<f64>> {
        need_response(data)?;
        total_weight(data, weights)?;
        let p = self.dim(data);
        let (xs, ys, ws) = self.design(data, weights);
        if ys.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("logistic response must be 0 or 1"));
        }
        if !(ys.contains(&0.0) && ys.contains(&1.0)) {
            return Err(Error::NotConverged {
                iterations: 0,
                grad_norm: f64::NAN,
            });
        }
        let total: f64 = ws.iter().sum();
        let mut beta = DVector::zeros(p);
        let mut loss = Logistic::neg_loglik(&beta, &xs, &ys, &ws) / total;
        let mut grad_norm = f64::INFINITY;
        for iter in 0..self.max_iter {
            let mut grad = DVector::zeros(p);
            let mut hess = DMatrix::zeros(p, p);
            for ((x, &y), &w) in xs.iter().zip(&ys).zip(&ws) {
                let mu = sigmoid(x.dot(&beta));
                grad.axpy(w * (mu - y), x, 1.0);
                hess.ger(w * mu * (1.0 - mu), x, x, 1.0);
            }
            grad /= total;
            hess /= total;
            grad_norm = grad.norm();
            if grad_norm <= self.tol {
                let perfect = xs
                    .iter()
                    .zip(&ys)
                    .all(|(x, &y)| (sigmoid(x.dot(&beta)) - y).abs() < SEPARATION_RESIDUAL);
                if perfect {
                    return Err(Error::NotConverged {
                        iterations: iter,
                        grad_norm,
                    });
                }
                return Ok(beta);
            }
            let step = match Cholesky::new(hess) {
                Some(ch) => ch.solve(&grad),
                None => {
                    return Err(Error::NotConverged {
                        iterations: iter,
                        grad_norm,
                    })
                }
            };
            let mut t = 1.0;
            loop {
                let cand = &beta - &step * t;
                let cand_loss = Logistic::neg_loglik(&cand, &xs, &ys, &ws) / total;
                if cand_loss <= loss + 64.0 * f64::EPSILON * loss.abs() || t < 1e-10 {
                    beta = cand;
                    loss = cand_loss;
                    break;
                }
                t *= 0.5;
            }
            if beta.amax() > LOGISTIC_DIVERGENCE || !beta.iter().all(|v| v.is_finite()) {
                return Err(Error::NotConverged {
                    iterations: iter + 1,
                    grad_norm,
                });
            }
        }
        Err(Error::NotConverged {
            iterations: self.max_iter,
            grad_norm,
        })
    }
}

/// Weighted mean of one column.
#[derive(Debug, Clone, Copy)]
pub struct WeightedMean {
    pub column: usize,
}

impl Estimator for WeightedMean {
    fn dim(&self, _: &Dataset) -> usize {
        1
    }

    fn fit(&self, data: &Dataset, weights: &[u64]) -> Result<DVector<f64>> {
        if self.column >= data.ncols() {
            return Err(Error::invalid(format!("column {} out of range", self.column)));
        }
        let total = total_weight(data, weights)?;
        let s: f64 = data
            .rows()
            .zip(weights)
            .map(|(r, &w)| w as f64 * r[self.column])
            .sum();
        Ok(DVector::from_element(1, s / total))
    }
}

/// Weighted mean of every column.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColumnMeans;

impl Estimator for ColumnMeans {
    fn dim(&self, data: &Dataset) -> usize {
        data.ncols()
    }

    fn fit(&self, data: &Dataset, weights: &[u64]) -> Result<DVector<f64>> {
        let total = total_weight(data, weights)?;
        let mut acc = DVector::zeros(data.ncols());
        for (r, &w) in data.rows().zip(weights) {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += w as f64 * v;
            }
        }
        Ok(acc / total)
    }
}

/// Ignores the data. Useful for checking the bootstrap plumbing.
#[derive(Debug, Clone)]
pub struct Constant(pub DVector<f64>);

impl Estimator for Constant {
    fn dim(&self, _: &Dataset) -> usize {
        self.0.len()
    }

    fn fit(&self, _: &Dataset, _: &[u64]) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ols_weight_example() {
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]], Some(1)).unwrap();
        let beta = Ols::default().fit(&data, &[2, 0]).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ols_weights_equal_repetition() {
        let mut rng = stream::from_seed(3);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let z: f64 = rng.random();
                vec![x, z, 1.0 + 2.0 * x - z + 0.1 * rng.random::<f64>()]
            })
            .collect();
        let data = Dataset::from_rows(&rows, Some(2)).unwrap();
        let w: Vec<u64> = (0..30).map(|i| (i % 4) as u64).collect();
        let mut expanded = Vec::new();
        for (r, &c) in rows.iter().zip(&w) {
            for _ in 0..c {
                expanded.push(r.clone());
            }
        }
        let big = Dataset::from_rows(&expanded, Some(2)).unwrap();
        let ols = Ols { intercept: true };
        let a = ols.fit(&data, &w).unwrap();
        let b = ols.fit(&big, &vec![1; expanded.len()]).unwrap();
        assert_eq!(a.len(), 3);
        assert!((a - b).amax() < 1e-10);
    }

    #[test]
    fn ols_singular_is_reported() {
        let data = Dataset::from_rows(&[vec![0.0, 1.0], vec![0.0, 2.0]], Some(1)).unwrap();
        assert!(matches!(
            Ols::default().fit(&data, &[1, 1]),
            Err(Error::SingularFit(_))
        ));
        assert!(Ols::default().fit(&data, &[0, 0]).is_err());
        let no_y = Dataset::from_rows(&[vec![1.0]], None).unwrap();
        assert!(Ols::default().fit(&no_y, &[1]).is_err());
    }

    #[test]
    fn logistic_recovers_coefficients() {
        let mut rng = stream::from_seed(5);
        let truth = [0.5, -1.0];
        let rows: Vec<Vec<f64>> = (0..20_000)
            .map(|_| {
                let x1: f64 = StandardNormal.sample(&mut rng);
                let x2: f64 = StandardNormal.sample(&mut rng);
                let p = sigmoid(truth[0] * x1 + truth[1] * x2);
                let y = f64::from(rng.random::<f64>() < p);
                vec![x1, x2, y]
            })
            .collect();
        let data = Dataset::from_rows(&rows, Some(2)).unwrap();
        let beta = Logistic::default().fit(&data, &vec![1; rows.len()]).unwrap();
        assert!((beta[0] - 0.5).abs() < 0.06, "{beta}");
        assert!((beta[1] + 1.0).abs() < 0.06, "{beta}");
    }

    #[test]
    fn logistic_separation_fails() {
        let rows = vec![
            vec![-2.0, 0.0],
            vec![-1.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 1.0],
        ];
        let data = Dataset::from_rows(&rows, Some(1)).unwrap();
        let err = Logistic::default().fit(&data, &[1, 1, 1, 1]).unwrap_err();
        assert!(matches!(err, Error::NotConverged { .. }), "{err}");
        let one_class = Dataset::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]], Some(1)).unwrap();
        assert!(Logistic::default().fit(&one_class, &[1, 1]).is_err());
    }

    #[test]
    fn means() {
        let data = Dataset::from_rows(&[vec![1.0, 10.0], vec![3.0, 20.0]], None).unwrap();
        assert_eq!(WeightedMean { column: 1 }.fit(&data, &[1, 3]).unwrap()[0], 17.5);
        assert_eq!(
            ColumnMeans.fit(&data, &[1, 1]).unwrap(),
            DVector::from_vec(vec![2.0, 15.0])
        );
        assert!(WeightedMean { column: 2 }.fit(&data, &[1, 1]).is_err());
    }
}
