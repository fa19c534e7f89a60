use crate::error::{Error, Result};
use crate::scalar::{Real, Vec3};

/// Farthest point sampling.
///
/// Starts at `start_index`; every following pick maximizes the minimum
/// distance to the points picked so far. Ties go to the lowest index and
/// no index is picked twice, even among duplicate points.
pub fn farthest_point_sampling<T: Real>(
    points: &[Vec3<T>],
    k: usize,
    start_index: usize,
) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("farthest point sampling on an empty point set"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "cannot select {k} of {n} points"
        )));
    }
    if start_index >= n {
        return Err(Error::invalid(format!(
            "start index {start_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![T::max_value().unwrap(); n];
    let mut current = start_index;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let c = points[current];
        let mut best: Option<(usize, T)> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = (points[i] - c).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if best.is_none_or(|(_, bd)| min_d2[i] > bd) {
                best = Some((i, min_d2[i]));
            }
        }
        current = best.expect("k <= n leaves an untaken point").0;
    }
    Ok(selected)
}

/// Largest distance from any point to its nearest selected point.
pub fn coverage_radius<T: Real>(points: &[Vec3<T>], selected: &[usize]) -> T {
    points
        .iter()
        .map(|p| {
            selected
                .iter()
                .map(|&s| (points[s] - p).norm())
                .fold(T::max_value().unwrap(), |a, b| a.min(b))
        })
        .fold(T::zero(), |a, b| a.max(b))
}
