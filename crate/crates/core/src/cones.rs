//! Cones and their Euclidean projections.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConeError {
    #[error("vector of length {actual} does not match cone dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cone dimension must be at least 1")]
    EmptyCone,
}

/// A single cone factor. Second-order cone elements are laid out as `(t, u)`
/// with `t` first and `‖u‖ ≤ t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    Zero(usize),
    NonNeg(usize),
    SecondOrder(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(d) | Cone::NonNeg(d) | Cone::SecondOrder(d) => d,
        }
    }

    fn check(&self, len: usize) -> Result<(), ConeError> {
        if len != self.dim() {
            return Err(ConeError::DimensionMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Euclidean projection onto the cone.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, ConeError> {
        self.check(v.len())?;
        let mut out = v.to_vec();
        self.project_in_place(&mut out);
        Ok(out)
    }

    /// Projects `v` in place; `v.len()` must equal `self.dim()`.
    pub fn project_in_place(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim());
        match self {
            Cone::Zero(_) => v.fill(0.0),
            Cone::NonNeg(_) => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Cone::SecondOrder(_) => project_soc(v),
        }
    }

    /// Projection onto the dual cone `K* = {y : ⟨x, y⟩ ≥ 0 ∀x ∈ K}`. The zero
    /// cone's dual is the whole space; the other cones are self-dual.
    pub fn project_dual(&self, v: &[f64]) -> Result<Vec<f64>, ConeError> {
        self.check(v.len())?;
        let mut out = v.to_vec();
        self.project_dual_in_place(&mut out);
        Ok(out)
    }

    pub fn project_dual_in_place(&self, v: &mut [f64]) {
        if !matches!(self, Cone::Zero(_)) {
            self.project_in_place(v);
        }
    }

    /// Membership up to an additive tolerance.
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        if v.len() != self.dim() {
            return false;
        }
        match self {
            Cone::Zero(_) => v.iter().all(|x| x.abs() <= tol),
            Cone::NonNeg(_) => v.iter().all(|x| *x >= -tol),
            Cone::SecondOrder(_) => norm(&v[1..]) <= v[0] + tol,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn project_soc(v: &mut [f64]) {
    let t = v[0];
    let u_norm = norm(&v[1..]);
    if u_norm <= t {
        return;
    }
    if u_norm <= -t {
        v.fill(0.0);
        return;
    }
    let a = 0.5 * (t + u_norm);
    v[0] = a;
    let s = a / u_norm;
    v[1..].iter_mut().for_each(|x| *x *= s);
}

/// Ordered Cartesian product of cones.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConeProduct {
    factors: Vec<Cone>,
    total_dim: usize,
}

impl ConeProduct {
    pub fn new(factors: Vec<Cone>) -> Result<Self, ConeError> {
        if factors.iter().any(|c| c.dim() == 0) {
            return Err(ConeError::EmptyCone);
        }
        let total_dim = factors.iter().map(Cone::dim).sum();
        Ok(Self { factors, total_dim })
    }

    pub fn factors(&self) -> &[Cone] {
        &self.factors
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>, ConeError> {
        if v.len() != self.total_dim {
            return Err(ConeError::DimensionMismatch {
                expected: self.total_dim,
                actual: v.len(),
            });
        }
        let mut out = v.to_vec();
        self.project_in_place(&mut out);
        Ok(out)
    }

    pub fn project_in_place(&self, v: &mut [f64]) {
        self.each_block(v, Cone::project_in_place);
    }

    /// Projects onto the product of the dual cones.
    pub fn project_dual_in_place(&self, v: &mut [f64]) {
        self.each_block(v, Cone::project_dual_in_place);
    }

    fn each_block(&self, v: &mut [f64], f: impl Fn(&Cone, &mut [f64])) {
        let mut offset = 0;
        for cone in &self.factors {
            let d = cone.dim();
            f(cone, &mut v[offset..offset + d]);
            offset += d;
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        if v.len() != self.total_dim {
            return false;
        }
        let mut offset = 0;
        self.factors.iter().all(|cone| {
            let d = cone.dim();
            let ok = cone.contains(&v[offset..offset + d], tol);
            offset += d;
            ok
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonneg_clamps() {
        assert_eq!(Cone::NonNeg(2).project(&[-1.0, 2.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn soc_cases() {
        let soc = Cone::SecondOrder(3);
        assert_eq!(soc.project(&[2.0, 1.0, 0.0]).unwrap(), vec![2.0, 1.0, 0.0]);
        assert_eq!(soc.project(&[0.0, 3.0, 4.0]).unwrap(), vec![2.5, 1.5, 2.0]);
        assert_eq!(soc.project(&[-5.0, 3.0, 4.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        // t < 0 with u = 0 lands in the polar branch without dividing by ‖u‖
        assert_eq!(soc.project(&[-1.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        assert_eq!(Cone::SecondOrder(1).project(&[-2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn product_blocks() {
        let k = ConeProduct::new(vec![Cone::NonNeg(2), Cone::SecondOrder(3)]).unwrap();
        assert_eq!(
            k.project(&[-1.0, 1.0, 0.0, 3.0, 4.0]).unwrap(),
            vec![0.0, 1.0, 2.5, 1.5, 2.0]
        );
        let k = ConeProduct::new(vec![Cone::Zero(1), Cone::NonNeg(1)]).unwrap();
        assert_eq!(k.project(&[5.0, -5.0]).unwrap(), vec![0.0, 0.0]);
        let single = ConeProduct::new(vec![Cone::SecondOrder(3)]).unwrap();
        assert_eq!(
            single.project(&[0.0, 3.0, 4.0]).unwrap(),
            Cone::SecondOrder(3).project(&[0.0, 3.0, 4.0]).unwrap()
        );
    }

    #[test]
    fn membership() {
        assert!(Cone::NonNeg(2).contains(&[0.0, 0.0], 0.0));
        assert!(!Cone::SecondOrder(3).contains(&[1.0, 1.0, 0.1], 0.0));
        assert!(Cone::SecondOrder(3).contains(&[5.0, 3.0, 4.0], 0.0));
        assert!(Cone::Zero(1).contains(&[1e-12], 1e-9));
    }

    #[test]
    fn dual_projection() {
        assert_eq!(Cone::Zero(2).project_dual(&[-1.0, 2.0]).unwrap(), vec![-1.0, 2.0]);
        assert_eq!(Cone::SecondOrder(3).project_dual(&[0.0, 3.0, 4.0]).unwrap(), vec![2.5, 1.5, 2.0]);
        let k = ConeProduct::new(vec![Cone::Zero(1), Cone::NonNeg(1)]).unwrap();
        let mut v = [5.0, -5.0];
        k.project_dual_in_place(&mut v);
        assert_eq!(v, [5.0, 0.0]);
    }

    #[test]
    fn dimension_errors() {
        assert!(matches!(
            Cone::NonNeg(2).project(&[1.0]),
            Err(ConeError::DimensionMismatch { expected: 2, actual: 1 })
        ));
        let k = ConeProduct::new(vec![Cone::NonNeg(2)]).unwrap();
        assert!(k.project(&[1.0, 2.0, 3.0]).is_err());
        assert!(ConeProduct::new(vec![Cone::Zero(0)]).is_err());
    }
}
