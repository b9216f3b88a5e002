//! Affine selection events `{z : A z <= a}` — the universal representation
//! every selection procedure in this crate reduces to.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Default slack below which a constraint row counts as satisfied.
/// Boundary points are reported as inside.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct AffineEvent {
    a_mat: Array2<f64>,
    offset: Array1<f64>,
}

impl AffineEvent {
    pub fn new(a_mat: Array2<f64>, offset: Array1<f64>) -> Result<Self> {
        if a_mat.nrows() != offset.len() {
            return Err(Error::DimensionMismatch(format!(
                "A has {} rows but offset has length {}",
                a_mat.nrows(),
                offset.len()
            )));
        }
        Ok(AffineEvent { a_mat, offset })
    }

    /// Event with no constraints on a `dim`-dimensional variable.
    pub fn unconstrained(dim: usize) -> Self {
        AffineEvent {
            a_mat: Array2::zeros((0, dim)),
            offset: Array1::zeros(0),
        }
    }

    pub fn rows(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a_mat.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.a_mat
    }

    pub fn offset(&self) -> &Array1<f64> {
        &self.offset
    }

    pub fn contains(&self, z: &ArrayView1<f64>) -> bool {
        self.contains_with_tol(z, MEMBERSHIP_TOL)
    }

    pub fn contains_with_tol(&self, z: &ArrayView1<f64>, tol: f64) -> bool {
        if self.rows() == 0 {
            return true;
        }
        let v = self.a_mat.dot(z) - &self.offset;
        v.iter().all(|x| *x <= tol)
    }

    /// Smallest slack `a - A z` over rows; negative means outside.
    pub fn margin(&self, z: &ArrayView1<f64>) -> f64 {
        if self.rows() == 0 {
            return f64::INFINITY;
        }
        let v = &self.offset - &self.a_mat.dot(z);
        v.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Event over `t` obtained by substituting `z = map t + residual`.
    pub fn substitute(&self, map: &Array2<f64>, residual: &Array1<f64>) -> Result<AffineEvent> {
        if map.nrows() != self.dim() || residual.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "event dim {} vs map rows {} / residual {}",
                self.dim(),
                map.nrows(),
                residual.len()
            )));
        }
        let a = self.a_mat.dot(map);
        let off = &self.offset - &self.a_mat.dot(residual);
        AffineEvent::new(a, off)
    }

    /// Rescales the variable coordinatewise: the event over `w` where
    /// `z_j = scale_j * w_j`.
    pub fn rescale_columns(&self, scales: &[f64]) -> Result<AffineEvent> {
        if scales.len() != self.dim() {
            return Err(Error::DimensionMismatch("scale length != event dim".into()));
        }
        let mut a = self.a_mat.clone();
        for (j, &s) in scales.iter().enumerate() {
            a.column_mut(j).mapv_inplace(|v| v * s);
        }
        AffineEvent::new(a, self.offset.clone())
    }
}

/// Conjunction of events on the same variable.
pub fn stack_events(events: &[AffineEvent]) -> Result<AffineEvent> {
    let first = events
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack an empty event list".into()))?;
    let dim = first.dim();
    if events.iter().any(|e| e.dim() != dim) {
        return Err(Error::DimensionMismatch(
            "stacked events must share the variable dimension".into(),
        ));
    }
    let rows: usize = events.iter().map(|e| e.rows()).sum();
    let mut a = Array2::zeros((rows, dim));
    let mut off = Array1::zeros(rows);
    let mut r = 0;
    for e in events {
        for i in 0..e.rows() {
            a.row_mut(r).assign(&e.a_mat.row(i));
            off[r] = e.offset[i];
            r += 1;
        }
    }
    AffineEvent::new(a, off)
}

/// Block-diagonal stacking on disjoint variables: the output constrains the
/// concatenated vector, event `k` acting on its own block.
pub fn stack_events_block_diag(events: &[AffineEvent]) -> Result<AffineEvent> {
    if events.is_empty() {
        return Err(Error::InvalidInput("cannot stack an empty event list".into()));
    }
    let rows: usize = events.iter().map(|e| e.rows()).sum();
    let dim: usize = events.iter().map(|e| e.dim()).sum();
    let mut a = Array2::zeros((rows, dim));
    let mut off = Array1::zeros(rows);
    let (mut r, mut c) = (0, 0);
    for e in events {
        for i in 0..e.rows() {
            a.row_mut(r)
                .slice_mut(ndarray::s![c..c + e.dim()])
                .assign(&e.a_mat.row(i));
            off[r] = e.offset[i];
            r += 1;
        }
        c += e.dim();
    }
    AffineEvent::new(a, off)
}

/// Concatenates offsets/matrices row-wise after validating (used internally
/// by event builders that assemble rows incrementally).
pub fn from_rows(rows: Vec<(Array1<f64>, f64)>, dim: usize) -> Result<AffineEvent> {
    let m = rows.len();
    let mut a = Array2::zeros((m, dim));
    let mut off = Array1::zeros(m);
    for (i, (row, b)) in rows.into_iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch("row length != dim".into()));
        }
        a.index_axis_mut(Axis(0), i).assign(&row);
        off[i] = b;
    }
    AffineEvent::new(a, off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn membership_with_tolerance_and_boundary() {
        let e = AffineEvent::new(array![[1.0]], array![2.0]).unwrap();
        assert!(e.contains(&array![2.0].view())); // boundary counts as inside
        assert!(e.contains(&array![2.0 + 0.5e-9].view()));
        assert!(!e.contains(&array![2.0 + 1e-6].view()));
    }

    #[test]
    fn membership_monotone_in_tolerance() {
        let e = AffineEvent::new(array![[1.0], [-1.0]], array![1.0, 0.5]).unwrap();
        let z = array![1.0 + 1e-8];
        assert!(!e.contains_with_tol(&z.view(), 1e-9));
        assert!(e.contains_with_tol(&z.view(), 1e-7));
    }

    #[test]
    fn stack_singleton_is_identity() {
        let e = AffineEvent::new(array![[1.0, 0.0]], array![1.0]).unwrap();
        let s = stack_events(&[e.clone()]).unwrap();
        assert_eq!(s.rows(), 1);
        assert_eq!(s.matrix(), e.matrix());
    }

    #[test]
    fn stack_two_rows_same_variable() {
        let e1 = AffineEvent::new(array![[1.0]], array![2.0]).unwrap();
        let e2 = AffineEvent::new(array![[-1.0]], array![0.0]).unwrap();
        let s = stack_events(&[e1, e2]).unwrap();
        assert_eq!(s.rows(), 2);
        assert!(s.contains(&array![1.0].view()));
        assert!(!s.contains(&array![-0.5].view()));
    }

    #[test]
    fn stack_empty_errors() {
        assert!(stack_events(&[]).is_err());
    }

    #[test]
    fn block_diagonal_acts_on_disjoint_blocks() {
        let e1 = AffineEvent::new(array![[1.0]], array![0.0]).unwrap(); // z1 <= 0
        let e2 = AffineEvent::new(array![[-1.0]], array![0.0]).unwrap(); // z2 >= 0
        let s = stack_events_block_diag(&[e1, e2]).unwrap();
        assert_eq!(s.dim(), 2);
        assert!(s.contains(&array![-1.0, 1.0].view()));
        assert!(!s.contains(&array![1.0, 1.0].view()));
    }

    #[test]
    fn substitute_scalar_case() {
        // A = [1], a = [2], map = 0.5, residual = 3  ->  {0.5 t <= -1}
        let e = AffineEvent::new(array![[1.0]], array![2.0]).unwrap();
        let out = e.substitute(&array![[0.5]], &array![3.0]).unwrap();
        assert!((out.matrix()[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((out.offset()[0] + 1.0).abs() < 1e-15);
    }
}
