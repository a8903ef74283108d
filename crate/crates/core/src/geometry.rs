//! Small fixed-size vector type and periodic-box helpers.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.0[1]
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.0[2]
    }

    #[inline]
    pub fn dot(&self, other: &Vec3) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    #[inline]
    pub fn norm2(&self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn normalized(&self) -> Vec3 {
        *self * (1.0 / self.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl SubAssign for Vec3 {
    #[inline]
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    #[inline]
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Wraps a coordinate into `[0, side)`.
#[inline]
pub fn wrap_coord(x: f64, side: f64) -> f64 {
    let mut w = x - side * (x / side).floor();
    // floor can leave w == side through rounding for tiny negative x
    if w >= side {
        w -= side;
    }
    if w < 0.0 {
        w = 0.0;
    }
    w
}

#[inline]
pub fn wrap(p: Vec3, side: f64) -> Vec3 {
    Vec3([
        wrap_coord(p.0[0], side),
        wrap_coord(p.0[1], side),
        wrap_coord(p.0[2], side),
    ])
}

/// Minimum-image representative of a separation component.
#[inline]
pub fn min_image_coord(d: f64, side: f64) -> f64 {
    d - side * (d / side).round()
}

/// Minimum-image separation vector `b - a` in a cubic periodic box.
#[inline]
pub fn min_image(a: Vec3, b: Vec3, side: f64) -> Vec3 {
    let d = b - a;
    Vec3([
        min_image_coord(d.0[0], side),
        min_image_coord(d.0[1], side),
        min_image_coord(d.0[2], side),
    ])
}

#[inline]
pub fn periodic_distance(a: Vec3, b: Vec3, side: f64) -> f64 {
    min_image(a, b, side).norm()
}

#[inline]
pub fn sphere_volume(r: f64) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * r * r * r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_box() {
        assert_eq!(wrap_coord(-1e-18, 10.0), 0.0);
        assert_eq!(wrap_coord(10.0, 10.0), 0.0);
        assert!((wrap_coord(-2.5, 10.0) - 7.5).abs() < 1e-12);
        assert!((wrap_coord(23.0, 10.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn min_image_picks_short_way() {
        let a = Vec3::new(0.5, 5.0, 9.5);
        let b = Vec3::new(9.5, 5.0, 0.5);
        let d = min_image(a, b, 10.0);
        assert!((d.x() + 1.0).abs() < 1e-12);
        assert!((d.z() - 1.0).abs() < 1e-12);
        assert!((periodic_distance(a, b, 10.0) - 2f64.sqrt()).abs() < 1e-12);
    }
}
