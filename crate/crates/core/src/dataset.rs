//! Design matrix plus response, the raw input of every procedure.

use ndarray::{Array1, Array2, Axis};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::InvalidInput("need n >= 1 and p >= 1".into()));
        }
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows but y has length {}",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite entries in X or y".into()));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Columns of X restricted to an index set, in the set's order.
    pub fn x_cols(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((self.n(), idx.len()));
        for (j, &col) in idx.iter().enumerate() {
            out.column_mut(j).assign(&self.x.column(col));
        }
        out
    }

    /// Rows restricted to an index set.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset {
        let x = self.x.select(Axis(0), rows);
        let y = self.y.select(Axis(0), rows);
        Dataset { x, y }
    }

    /// True when every column has empirical variance 1 (denominator n),
    /// within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let n = self.n() as f64;
        self.x.axis_iter(Axis(1)).all(|col| {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (var - 1.0).abs() <= tol
        })
    }

    /// Rescales each column to empirical variance 1 in place.
    pub fn normalize_columns(&mut self) {
        let n = self.n() as f64;
        for mut col in self.x.axis_iter_mut(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if var > 0.0 {
                let s = var.sqrt();
                col.mapv_inplace(|v| v / s);
            }
        }
    }

    /// Reads a CSV with a header row: response column `y`, predictors
    /// `x1..xp` (any column order).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut y_col = None;
        let mut x_cols: Vec<(usize, usize)> = Vec::new(); // (csv index, predictor number)
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if h == "y" {
                y_col = Some(i);
            } else if let Some(num) = h.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                if num == 0 {
                    return Err(Error::InvalidInput("predictor columns start at x1".into()));
                }
                x_cols.push((i, num));
            } else {
                return Err(Error::InvalidInput(format!("unrecognized column `{h}`")));
            }
        }
        let y_col = y_col.ok_or_else(|| Error::InvalidInput("missing `y` column".into()))?;
        x_cols.sort_by_key(|&(_, num)| num);
        for (rank, &(_, num)) in x_cols.iter().enumerate() {
            if num != rank + 1 {
                return Err(Error::InvalidInput("predictor columns must be x1..xp".into()));
            }
        }

        let mut ys = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad float in row {}", rows.len() + 1)))
            };
            ys.push(parse(y_col)?);
            let mut row = Vec::with_capacity(x_cols.len());
            for &(i, _) in &x_cols {
                row.push(parse(i)?);
            }
            rows.push(row);
        }
        let n = rows.len();
        let p = x_cols.len();
        if n == 0 || p == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let mut x = Array2::zeros((n, p));
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
        Dataset::new(x, Array1::from_vec(ys))
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_csv_reader(f)
    }

    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{:.17e}", self.y[i])];
            rec.extend((0..self.p()).map(|j| format!("{:.17e}", self.x[[i, j]])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_csv_writer(f)
    }
}
