//! Equal error rate and minimum detection cost.
//!
//! A trial is accepted when its score is at least the threshold. The
//! operating points are the thresholds at every distinct score plus +∞
//! (reject everything), so tied scores always fall on the same side.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no {0} trials")]
    EmptyClass(&'static str),
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

/// Miss count `a` (targets below θ) and false-alarm count `b` (non-targets
/// at or above θ) for each operating point, from θ = min score to θ = +∞.
pub fn operating_points(target: &[f64], nontarget: &[f64]) -> Result<Vec<(u64, u64)>, MetricsError> {
    if target.is_empty() {
        return Err(MetricsError::EmptyClass("target"));
    }
    if nontarget.is_empty() {
        return Err(MetricsError::EmptyClass("nontarget"));
    }
    if let Some(&s) = target.iter().chain(nontarget).find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(s));
    }
    let mut all: Vec<(f64, bool)> =
        target.iter().map(|&s| (s, true)).chain(nontarget.iter().map(|&s| (s, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut misses, mut fas) = (0u64, nontarget.len() as u64);
    let mut points = Vec::with_capacity(all.len() + 1);
    let mut i = 0;
    while i < all.len() {
        points.push((misses, fas));
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                misses += 1;
            } else {
                fas -= 1;
            }
            i += 1;
        }
    }
    points.push((misses, fas));
    Ok(points)
}

/// Miss rate at the point where the segment between two operating points
/// meets `P_miss = P_fa`, as an exact fraction `(num, den)`.
pub fn diagonal_crossing(p: (u64, u64), q: (u64, u64), nt: u64, nn: u64) -> (i128, i128) {
    let (a1, b1) = (p.0 as i128, p.1 as i128);
    let (a2, b2) = (q.0 as i128, q.1 as i128);
    let den = (a2 - a1) * nn as i128 - (b2 - b1) * nt as i128;
    let num = b1 * a2 - a1 * b2;
    if den < 0 {
        (-num, -den)
    } else {
        (num, den)
    }
}

/// EER in percent, read off the convex hull of the ROC.
pub fn eer(target: &[f64], nontarget: &[f64]) -> Result<f64, MetricsError> {
    let points = operating_points(target, nontarget)?;
    let (nt, nn) = (target.len() as u64, nontarget.len() as u64);
    // Scaled coordinates x = P_fa·nt·nn, y = P_miss·nt·nn, ordered by
    // increasing false-alarm rate.
    let coord = |&(a, b): &(u64, u64)| ((b * nt) as i128, (a * nn) as i128);
    let mut ordered: Vec<(u64, u64)> = points.into_iter().rev().collect();
    ordered.sort_by_key(|p| coord(p));
    let mut hull: Vec<(u64, u64)> = Vec::new();
    for p in ordered {
        while hull.len() >= 2 {
            let (ox, oy) = coord(&hull[hull.len() - 2]);
            let (ax, ay) = coord(&hull[hull.len() - 1]);
            let (bx, by) = coord(&p);
            let cross = (ax - ox) * (by - oy) - (ay - oy) * (bx - ox);
            if cross <= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    // Along the hull P_miss − P_fa decreases from +1 to −1.
    let diff = |p: &(u64, u64)| {
        let (x, y) = coord(p);
        y - x
    };
    let k = hull.iter().position(|p| diff(p) <= 0).expect("hull ends at P_miss = 0, P_fa = 1");
    let (num, den) = if diff(&hull[k]) == 0 || k == 0 {
        (hull[k].0 as i128, nt as i128)
    } else {
        diagonal_crossing(hull[k - 1], hull[k], nt, nn)
    };
    Ok(100.0 * num as f64 / den as f64)
}

/// Normalized detection cost of one operating point.
pub fn detection_cost(misses: u64, fas: u64, nt: u64, nn: u64, p_tar: f64, c_miss: f64, c_fa: f64) -> f64 {
    let p_miss = misses as f64 / nt as f64;
    let p_fa = fas as f64 / nn as f64;
    let floor = (c_miss * p_tar).min(c_fa * (1.0 - p_tar));
    (c_miss * p_tar * p_miss + c_fa * (1.0 - p_tar) * p_fa) / floor
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(target: &[f64], nontarget: &[f64], p_tar: f64, c_miss: f64, c_fa: f64) -> Result<f64, MetricsError> {
    let points = operating_points(target, nontarget)?;
    let (nt, nn) = (target.len() as u64, nontarget.len() as u64);
    Ok(points
        .iter()
        .map(|&(a, b)| detection_cost(a, b, nt, nn, p_tar, c_miss, c_fa))
        .fold(f64::INFINITY, f64::min))
}

/// `min_dcf` at P(tar) = 0.01 with unit costs.
pub fn min_dcf_default(target: &[f64], nontarget: &[f64]) -> Result<f64, MetricsError> {
    min_dcf(target, nontarget, 0.01, 1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(eer(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(min_dcf_default(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn identical_distributions() {
        let s = [0.3, 1.0, -2.0, 5.5];
        assert_eq!(eer(&s, &s).unwrap(), 50.0);
    }

    #[test]
    fn one_error_in_four() {
        assert_eq!(eer(&[1.0, 3.0], &[0.0, 2.0]).unwrap(), 25.0);
    }

    #[test]
    fn all_equal_scores_cost_one() {
        assert_eq!(min_dcf_default(&[1.0; 3], &[1.0; 5]).unwrap(), 1.0);
    }

    #[test]
    fn fully_reversed_scores() {
        assert_eq!(eer(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 50.0);
        assert_eq!(min_dcf_default(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
    }

    #[test]
    fn empty_classes_and_nan_rejected() {
        assert_eq!(eer(&[], &[1.0]), Err(MetricsError::EmptyClass("target")));
        assert_eq!(min_dcf_default(&[1.0], &[]), Err(MetricsError::EmptyClass("nontarget")));
        assert!(matches!(eer(&[f64::NAN], &[1.0]), Err(MetricsError::NonFinite(_))));
    }
}
