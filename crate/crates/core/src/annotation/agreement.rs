//! Label aggregation and inter-annotator agreement.

use crate::error::{Error, Result};

pub const DEFAULT_REQUIRED_JUDGMENTS: usize = 3;

/// Number of grades on the relevance scale (0..=3).
pub const GRADES: usize = 4;

/// Most frequent grade. When several grades tie for most frequent, the
/// median of the sorted grades (lower middle for even counts) is returned.
pub fn majority_vote(grades: &[u8], required: usize) -> Result<u8> {
    if grades.len() < required.max(1) {
        return Err(Error::UnderAnnotated {
            found: grades.len(),
            required,
        });
    }
    let mut counts = [0usize; GRADES];
    for &g in grades {
        if g as usize >= GRADES {
            return Err(Error::GradeOutOfRange(g as i64));
        }
        counts[g as usize] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let mut modes = (0..GRADES as u8).filter(|&g| counts[g as usize] == top);
    let first = modes.next().unwrap();
    if modes.next().is_none() {
        return Ok(first);
    }
    let mut sorted = grades.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

/// Fleiss' kappa for an item × category count matrix in which every item
/// received the same number of ratings.
pub fn fleiss_kappa(matrix: &[Vec<usize>]) -> Result<f64> {
    let Some(first) = matrix.first() else {
        return Err(Error::Invalid("kappa needs at least one item".into()));
    };
    let raters: usize = first.iter().sum();
    if raters < 2 {
        return Err(Error::Invalid(format!(
            "kappa needs at least 2 raters per item, got {raters}"
        )));
    }
    let categories = first.len();
    for (i, row) in matrix.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n != raters || row.len() != categories {
            return Err(Error::UnequalRatings {
                item: i,
                found: n,
                expected: raters,
            });
        }
    }
    let items = matrix.len() as f64;
    let n = raters as f64;

    let mut column = vec![0usize; categories];
    let mut agreement_sum = 0.0;
    for row in matrix {
        let sq: usize = row.iter().map(|&c| c * c).sum();
        agreement_sum += (sq as f64 - n) / (n * (n - 1.0));
        for (j, &c) in row.iter().enumerate() {
            column[j] += c;
        }
    }
    let mean_agreement = agreement_sum / items;
    let expected: f64 = column
        .iter()
        .map(|&c| {
            let p = c as f64 / (items * n);
            p * p
        })
        .sum();
    // Expected agreement of 1 means every rating fell in a single category.
    if column.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::KappaUndefined);
    }
    Ok((mean_agreement - expected) / (1.0 - expected))
}

/// Rough verbal band for a kappa value.
pub fn interpret_kappa(kappa: f64) -> &'static str {
    match kappa {
        k if k < 0.0 => "poor",
        k if k < 0.2 => "slight",
        k if k < 0.4 => "fair",
        k if k < 0.6 => "moderate",
        k if k < 0.8 => "substantial",
        _ => "almost perfect",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_majority() {
        assert_eq!(majority_vote(&[3, 3, 1], 3).unwrap(), 3);
        assert_eq!(majority_vote(&[0, 0, 0], 3).unwrap(), 0);
    }

    #[test]
    fn three_way_split_uses_median() {
        assert_eq!(majority_vote(&[1, 2, 3], 3).unwrap(), 2);
        assert_eq!(majority_vote(&[3, 0, 1], 3).unwrap(), 1);
    }

    #[test]
    fn even_tie_takes_lower_middle() {
        assert_eq!(majority_vote(&[3, 0, 3, 0], 3).unwrap(), 0);
    }

    #[test]
    fn under_annotated() {
        assert!(matches!(
            majority_vote(&[3, 3], 3),
            Err(Error::UnderAnnotated {
                found: 2,
                required: 3
            })
        ));
    }

    /// Every multiset of three grades: a grade held by two or more raters
    /// wins, otherwise the middle value.
    #[test]
    fn all_three_grade_multisets() {
        for a in 0..4u8 {
            for b in a..4 {
                for c in b..4 {
                    // Sorted, so a shared grade is either a or b and the middle is b.
                    let expect = if a == b { a } else { b };
                    for perm in [
                        [a, b, c],
                        [a, c, b],
                        [b, a, c],
                        [b, c, a],
                        [c, a, b],
                        [c, b, a],
                    ] {
                        assert_eq!(majority_vote(&perm, 3).unwrap(), expect, "{perm:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn unanimous_items() {
        assert_eq!(fleiss_kappa(&[vec![3, 0], vec![0, 3]]).unwrap(), 1.0);
        assert_eq!(
            fleiss_kappa(&[vec![0, 0, 0, 3], vec![0, 3, 0, 0], vec![3, 0, 0, 0]]).unwrap(),
            1.0
        );
    }

    #[test]
    fn hand_evaluated_matrix() {
        // p = [1/2, 1/2], P_i = [1, 1/3, 1/3, 1], P̄ = 2/3, P̄e = 1/2 → κ = 1/3.
        let k = fleiss_kappa(&[vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]).unwrap();
        assert!((k - 1.0 / 3.0).abs() < 1e-12, "{k}");
    }

    #[test]
    fn single_category_undefined() {
        assert!(matches!(
            fleiss_kappa(&[vec![3, 0, 0], vec![3, 0, 0]]),
            Err(Error::KappaUndefined)
        ));
    }

    #[test]
    fn unequal_counts() {
        assert!(matches!(
            fleiss_kappa(&[vec![3, 0], vec![1, 1]]),
            Err(Error::UnequalRatings { item: 1, .. })
        ));
    }
}
