use std::collections::HashMap;
use std::hash::Hash;

/// Duplicate-aware intersection over union.
///
/// Intersection takes the smaller count of each distinct item, union the
/// larger. Two empty lists score 1.0.
pub fn multiset_iou<R: Eq + Hash>(a: &[R], b: &[R]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&R, (usize, usize)> = HashMap::new();
    for r in a {
        counts.entry(r).or_default().0 += 1;
    }
    for r in b {
        counts.entry(r).or_default().1 += 1;
    }
    let (inter, union) = counts
        .values()
        .fold((0usize, 0usize), |(i, u), &(ca, cb)| (i + ca.min(cb), u + ca.max(cb)));
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(multiset_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(multiset_iou(&[1, 2, 3], &[1, 2, 4]), 0.5);
        assert_eq!(multiset_iou(&[1, 1], &[1]), 0.5);
        assert_eq!(multiset_iou::<u8>(&[], &[]), 1.0);
        assert_eq!(multiset_iou(&[1], &[]), 0.0);
    }

    #[test]
    fn symmetric() {
        let a = [1, 1, 2, 5];
        let b = [1, 2, 2, 2, 7];
        assert_eq!(multiset_iou(&a, &b), multiset_iou(&b, &a));
    }
}
