use crate::error::{CdtError, Result};

/// Levenshtein distance with unit insert, delete, and substitute costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length; can exceed 1.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(CdtError::DegenerateInput("error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Exhaustive recursion, exponential but exact for short inputs.
    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn known_distances() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), 0);
        assert_eq!(edit_distance(&chars("kitten"), &chars("sitting")), 3);
        assert_eq!(edit_distance(&chars(""), &chars("abc")), 3);
        // Seven-token reference "sitting", hypothesis "kitten".
        assert!((cer(&chars("sitting"), &chars("kitten")).unwrap() - 3.0 / 7.0).abs() < 1e-12);
        assert!((cer(&chars("kitten"), &chars("sitting")).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(cer(&chars("abcd"), &chars("")).unwrap(), 1.0);
        assert!(matches!(cer::<char>(&[], &chars("a")), Err(CdtError::DegenerateInput(_))));
    }

    fn short() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(0u8..4, 0..=7)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn matches_brute_force(a in short(), b in short()) {
            prop_assert_eq!(edit_distance(&a, &b), brute(&a, &b));
        }

        #[test]
        fn is_a_metric(a in short(), b in short(), c in short()) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn appending_a_wrong_token_never_helps(r in prop::collection::vec(0u8..4, 1..=7), h in short()) {
            let mut worse = h.clone();
            worse.push(9);
            prop_assert!(cer(&r, &worse).unwrap() >= cer(&r, &h).unwrap());
            prop_assert_eq!(cer(&r, &r).unwrap(), 0.0);
        }
    }
}
