//! Inner-loop primitives. All reductions run in a fixed 8-lane order so the
//! compiler can vectorize them while results stay bit-identical run to run
//! and independent of thread count.

use crate::scalar::Real;

/// `y += a * x`, elementwise.
#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for j in 0..8 {
            acc[j] = acc[j] + a[i + j] * b[i + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    lanes_sum(&acc) + tail
}

/// Sum with a fixed 8-lane accumulation order.
#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for j in 0..8 {
            acc[j] = acc[j] + a[i + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i];
    }
    lanes_sum(&acc) + tail
}

/// Sum of squares with a fixed 8-lane accumulation order.
#[inline]
pub fn sum_squares<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for j in 0..8 {
            acc[j] = acc[j] + a[i + j] * a[i + j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * a[i];
    }
    lanes_sum(&acc) + tail
}

#[inline]
fn lanes_sum<T: Real>(acc: &[T; 8]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}
