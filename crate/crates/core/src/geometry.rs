//! Points and bisecting hyperplanes.

use std::ops::Deref;

use crate::numeric::{DEGENERACY_TOL, GEOM_TOL};
use crate::{Error, Result};

/// A finite point in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidArgument("point must have at least one coordinate".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("point"));
        }
        Ok(Point(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Point {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Oriented hyperplane `{x : wᵀx + b = 0}` with unit normal `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    w: Vec<f64>,
    b: f64,
}

impl Hyperplane {
    /// Builds a hyperplane from a normal that must already be unit length.
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if w.iter().any(|c| !c.is_finite()) || !b.is_finite() {
            return Err(Error::NonFinite("hyperplane"));
        }
        let norm = norm(&w);
        if (norm - 1.0).abs() > GEOM_TOL {
            return Err(Error::InvalidArgument(format!("hyperplane normal has norm {norm}")));
        }
        Ok(Hyperplane { w, b })
    }

    pub fn normal(&self) -> &[f64] {
        &self.w
    }

    pub fn offset(&self) -> f64 {
        self.b
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// The same plane with the opposite orientation, `(-w, -b)`.
    pub fn negated(&self) -> Hyperplane {
        Hyperplane { w: self.w.iter().map(|v| -v).collect(), b: -self.b }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Squared Euclidean distance, summed in coordinate order.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Bisecting normal hyperplane of the segment `x_i x_j`, oriented so that
/// `x_i` lies on the positive side.
pub fn bisect(x_i: &[f64], x_j: &[f64]) -> Result<Hyperplane> {
    check_dim(x_i.len(), x_j.len())?;
    let diff: Vec<f64> = x_i.iter().zip(x_j).map(|(a, b)| a - b).collect();
    let dist = norm(&diff);
    if !dist.is_finite() {
        return Err(Error::NonFinite("bisect input"));
    }
    if dist <= DEGENERACY_TOL {
        return Err(Error::CoincidentPoints { distance: dist });
    }
    let w = diff.into_iter().map(|v| v / dist).collect();
    let b = (dot(x_j, x_j) - dot(x_i, x_i)) / (2.0 * dist);
    Ok(Hyperplane { w, b })
}

/// `wᵀx + b`.
pub fn signed_distance(h: &Hyperplane, x: &[f64]) -> Result<f64> {
    check_dim(h.dim(), x.len())?;
    Ok(dot(&h.w, x) + h.b)
}

/// Mirror image of `z` across `h`: `z - 2(wᵀz + b)w`.
pub fn reflect(z: &[f64], h: &Hyperplane) -> Result<Vec<f64>> {
    let s = signed_distance(h, z)?;
    Ok(z.iter().zip(&h.w).map(|(zi, wi)| zi - 2.0 * s * wi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn plane(w: &[f64], b: f64) -> Hyperplane {
        Hyperplane::new(w.to_vec(), b).unwrap()
    }

    #[test]
    fn bisect_symmetric_pair() {
        let h = bisect(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(h.normal(), &[1.0, 0.0]);
        assert_eq!(h.offset(), 0.0);
    }

    #[test]
    fn bisect_shifted_pair() {
        let h = bisect(&[2.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(h.normal(), &[1.0, 0.0]);
        assert_eq!(h.offset(), -1.0);
    }

    #[test]
    fn bisect_rejects_coincident_points() {
        assert!(matches!(bisect(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::CoincidentPoints { .. })));
        assert!(matches!(bisect(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bisect_random_pairs_are_equidistant_in_signed_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h = bisect(&a, &b).unwrap();
            let da = signed_distance(&h, &a).unwrap();
            let db = signed_distance(&h, &b).unwrap();
            assert!((da + db).abs() < 1e-9);
            assert!(da > 0.0);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            assert!(signed_distance(&h, &mid).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn signed_distance_examples() {
        assert_eq!(signed_distance(&plane(&[1.0, 0.0], -1.0), &[1.0, 5.0]).unwrap(), 0.0);
        assert_eq!(signed_distance(&plane(&[1.0, 0.0], 0.0), &[3.0, 0.0]).unwrap(), 3.0);
        assert_eq!(signed_distance(&plane(&[0.0, 1.0], 2.0), &[7.0, -2.0]).unwrap(), 0.0);
        assert!(signed_distance(&plane(&[0.0, 1.0], 2.0), &[7.0]).is_err());
    }

    #[test]
    fn reflect_examples() {
        let h = plane(&[1.0, 0.0], 0.0);
        assert_eq!(reflect(&[2.0, 0.0], &h).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(reflect(&[0.0, 3.0], &h).unwrap(), vec![0.0, 3.0]);
    }

    #[test]
    fn hyperplane_requires_unit_normal() {
        assert!(Hyperplane::new(vec![2.0, 0.0], 0.0).is_err());
        assert!(Point::new(vec![f64::NAN]).is_err());
        assert!(Point::new(vec![]).is_err());
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, d)
    }

    proptest! {
        #[test]
        fn bisect_is_antisymmetric(a in vec_strategy(4), b in vec_strategy(4)) {
            prop_assume!(dist2(&a, &b) > 1e-6);
            let h = bisect(&a, &b).unwrap();
            let g = bisect(&b, &a).unwrap();
            for (x, y) in h.normal().iter().zip(g.normal()) {
                prop_assert!((x + y).abs() < 1e-9);
            }
            prop_assert!((h.offset() + g.offset()).abs() < 1e-9);
        }

        #[test]
        fn closer_point_is_on_positive_side(a in vec_strategy(3), b in vec_strategy(3), x in vec_strategy(3)) {
            prop_assume!(dist2(&a, &b) > 1e-6);
            let da = dist2(&a, &x);
            let db = dist2(&b, &x);
            prop_assume!((da - db).abs() > 1e-6);
            let s = signed_distance(&bisect(&a, &b).unwrap(), &x).unwrap();
            prop_assert_eq!(s > 0.0, da < db);
        }

        #[test]
        fn reflection_is_an_involution(z in vec_strategy(5), w in vec_strategy(5), b in -5.0f64..5.0) {
            let n = norm(&w);
            prop_assume!(n > 1e-3);
            let h = plane(&w.iter().map(|v| v / n).collect::<Vec<_>>(), b);
            let once = reflect(&z, &h).unwrap();
            let twice = reflect(&once, &h).unwrap();
            for (x, y) in z.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let s0 = signed_distance(&h, &z).unwrap();
            let s1 = signed_distance(&h, &once).unwrap();
            prop_assert!((s0 + s1).abs() < 1e-9);
            let mid: Vec<f64> = z.iter().zip(&once).map(|(a, c)| 0.5 * (a + c)).collect();
            prop_assert!(signed_distance(&h, &mid).unwrap().abs() < 1e-9);
        }
    }
}
