//! Two-dimensional linear projection of value embeddings for plotting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const POWER_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedValue {
    pub value: String,
    /// Gold attribute, `?` when the value is unlabeled.
    pub attribute: String,
    pub x: f64,
    pub y: f64,
}

/// Leading eigenvector of a symmetric positive semi-definite matrix, with
/// its largest-magnitude entry made positive.
fn leading_eigenvector(m: &Array2<f64>) -> (Array1<f64>, f64) {
    let d = m.nrows();
    let mut v = Array1::from_iter((0..d).map(|i| 1.0 + i as f64 / d as f64));
    v /= v.dot(&v).sqrt();
    let mut lambda = 0.0;
    for _ in 0..POWER_STEPS {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            return (v, 0.0);
        }
        let next = w / norm;
        let delta = (&next - &v).mapv(f64::abs).sum();
        v = next;
        lambda = norm;
        if delta < 1e-12 {
            break;
        }
    }
    let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if pivot < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    (v, lambda)
}

/// Coordinates of each row of `points` on its two principal axes.
pub fn pca_2d(points: &Array2<f64>) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Empty("no points to project".into()));
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centered = points - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    let (first, l1) = leading_eigenvector(&cov);
    cov -= &(l1 * outer(&first, &first));
    let (second, _) = leading_eigenvector(&cov);
    let mut out = Array2::zeros((n, 2));
    out.column_mut(0).assign(&centered.dot(&first));
    out.column_mut(1).assign(&centered.dot(&second));
    Ok(out)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Projects named value vectors; `labels` maps values to gold attributes.
pub fn project_values<S: Scalar>(
    vectors: &BTreeMap<String, Array1<S>>,
    labels: &BTreeMap<String, String>,
) -> Result<Vec<ProjectedValue>> {
    let dim = vectors.values().next().map_or(0, Array1::len);
    let mut points = Array2::zeros((vectors.len(), dim));
    for (mut row, v) in points.rows_mut().into_iter().zip(vectors.values()) {
        if v.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        row.assign(&v.mapv(|x| x.as_f64()));
    }
    let coords = pca_2d(&points)?;
    Ok(vectors
        .keys()
        .zip(coords.rows())
        .map(|(value, c)| ProjectedValue {
            value: value.clone(),
            attribute: labels.get(value).cloned().unwrap_or_else(|| "?".into()),
            x: c[0],
            y: c[1],
        })
        .collect())
}

pub fn write_projection(path: impl AsRef<Path>, rows: &[ProjectedValue]) -> Result<()> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "value\tattribute\tx\ty").map_err(io)?;
    for r in rows {
        writeln!(w, "{}\t{}\t{:.6}\t{:.6}", r.value, r.attribute, r.x, r.y).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn recovers_dominant_axes() {
        // spread 3 along x+y, 1 along x-y, nothing along z
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let mut pts = Vec::new();
        for (a, b) in [(3.0, 1.0), (-3.0, 1.0), (3.0, -1.0), (-3.0, -1.0)] {
            pts.extend([a * s + b * s, a * s - b * s, 0.0]);
        }
        let points = Array2::from_shape_vec((4, 3), pts).unwrap();
        let c = pca_2d(&points).unwrap();
        for (row, (a, b)) in c.rows().into_iter().zip([(3.0f64, 1.0f64), (-3.0, 1.0), (3.0, -1.0), (-3.0, -1.0)]) {
            assert_abs_diff_eq!(row[0].abs(), a.abs(), epsilon = 1e-9);
            assert_abs_diff_eq!(row[1].abs(), b.abs(), epsilon = 1e-9);
        }
    }

    #[test]
    fn labels_and_determinism() {
        let mut v = BTreeMap::new();
        v.insert("a".to_string(), array![1.0f32, 0.0]);
        v.insert("b".to_string(), array![0.0f32, 1.0]);
        v.insert("c".to_string(), array![1.0f32, 1.0]);
        let labels: BTreeMap<String, String> = [("a".to_string(), "brand".to_string())].into_iter().collect();
        let rows = project_values(&v, &labels).unwrap();
        assert_eq!(rows.iter().map(|r| r.attribute.as_str()).collect::<Vec<_>>(), vec!["brand", "?", "?"]);
        assert_eq!(rows, project_values(&v, &labels).unwrap());
        assert!(project_values::<f32>(&BTreeMap::new(), &labels).is_err());
    }
}
