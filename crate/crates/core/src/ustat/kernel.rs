use std::cmp::Ordering;

/// `I(a - b < c - d) + ½ I(a - b = c - d)`: compares the treated-minus-control
/// difference of the first stratum with that of the second.
#[inline]
pub fn kernel_phi(y1t: f64, y1c: f64, y2t: f64, y2c: f64) -> f64 {
    compare_differences(y1t - y1c, y2t - y2c)
}

#[inline]
pub(crate) fn compare_differences(dp: f64, dq: f64) -> f64 {
    match dp.partial_cmp(&dq) {
        Some(Ordering::Less) => 1.0,
        Some(Ordering::Equal) => 0.5,
        _ => 0.0,
    }
}
