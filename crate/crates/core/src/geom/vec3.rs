//! Free functions on `[T; 3]` vectors.

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];

#[inline]
pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm_sq<T: Real>(a: Vec3<T>) -> T {
    dot(a, a)
}

#[inline]
pub fn norm<T: Real>(a: Vec3<T>) -> T {
    norm_sq(a).sqrt()
}

#[inline]
pub fn dist_sq<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    norm_sq(sub(a, b))
}

/// Unit vector along `a`, or `None` for a zero vector.
#[inline]
pub fn normalize<T: Real>(a: Vec3<T>) -> Option<Vec3<T>> {
    let n = norm(a);
    if n > T::zero() && n.is_finite() {
        Some(scale(a, T::one() / n))
    } else {
        None
    }
}

pub fn centroid<T: Real>(points: &[Vec3<T>]) -> Vec3<T> {
    if points.is_empty() {
        return [T::zero(); 3];
    }
    let mut acc = [T::zero(); 3];
    for p in points {
        acc = add(acc, *p);
    }
    scale(acc, T::one() / T::from_usize_lossy(points.len()))
}

pub fn cast<T: Real, U: Real>(a: Vec3<T>) -> Vec3<U> {
    [U::c(a[0].as_f64()), U::c(a[1].as_f64()), U::c(a[2].as_f64())]
}
