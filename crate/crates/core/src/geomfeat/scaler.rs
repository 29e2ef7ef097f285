use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose population σ falls below this are treated as constant.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-column z-score parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Constant columns whose σ was floored to 1.
    pub flagged: Vec<usize>,
}

/// Column means and population standard deviations of `rows`.
pub fn fit_scaler<R: AsRef<[f64]>>(rows: &[R]) -> Result<ScalerParams> {
    if rows.len() < 2 {
        return Err(Error::Contract(format!(
            "fitting a scaler needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let width = rows[0].as_ref().len();
    if let Some(i) = rows.iter().position(|r| r.as_ref().len() != width) {
        return Err(Error::dim(
            "fit_scaler",
            format!("row {i} has {} values, row 0 has {width}", rows[i].as_ref().len()),
        ));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut flagged = Vec::new();
    let std = var
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / n).sqrt();
            if sd < SIGMA_FLOOR {
                flagged.push(j);
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(ScalerParams { mean, std, flagged })
}

impl ScalerParams {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a flat buffer of consecutive rows in place.
    pub fn transform_in_place(&self, data: &mut [f64]) -> Result<()> {
        let w = self.width();
        if w == 0 || !data.len().is_multiple_of(w) {
            return Err(Error::dim(
                "scaler transform",
                format!("{} values do not form rows of width {w}", data.len()),
            ));
        }
        for row in data.chunks_exact_mut(w) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }

    pub fn transform<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                let mut out = r.as_ref().to_vec();
                if out.len() != self.width() {
                    return Err(Error::dim(
                        "scaler transform",
                        format!("row has {} values, scaler width is {}", out.len(), self.width()),
                    ));
                }
                self.transform_in_place(&mut out)?;
                Ok(out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_z_scores() {
        let rows = [[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let p = fit_scaler(&rows).unwrap();
        assert!((p.std[0] - 0.816496580927726).abs() < 1e-12);
        assert_eq!(p.flagged, vec![1]);
        let z = p.transform(&rows).unwrap();
        let col: Vec<f64> = z.iter().map(|r| r[0]).collect();
        for (a, b) in col.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(z.iter().all(|r| r[1] == 0.0));
    }

    #[test]
    fn needs_two_rows() {
        assert!(matches!(fit_scaler(&[[1.0, 2.0]]), Err(Error::Contract(_))));
        assert!(matches!(fit_scaler::<[f64; 2]>(&[]), Err(Error::Contract(_))));
    }
}
