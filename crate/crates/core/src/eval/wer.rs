use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Sub,
    Ins,
    Del,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: &ErrorCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }

    /// Errors over reference length; fails on an empty reference.
    pub fn wer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::invalid("wer", "reference has no tokens"));
        }
        Ok(self.errors() as f64 / self.ref_len as f64)
    }
}

/// Minimal-cost edit script turning `reference` into `hypothesis`. Among
/// equal-cost scripts the backtrace prefers substitution, then insertion,
/// then deletion.
pub fn align(reference: &[usize], hypothesis: &[usize]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same { EditOp::Match } else { EditOp::Sub });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Ins);
            j -= 1;
        } else {
            ops.push(EditOp::Del);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn count_errors(reference: &[usize], hypothesis: &[usize]) -> ErrorCounts {
    let mut c = ErrorCounts {
        ref_len: reference.len(),
        ..ErrorCounts::default()
    };
    for op in align(reference, hypothesis) {
        match op {
            EditOp::Sub => c.substitutions += 1,
            EditOp::Ins => c.insertions += 1,
            EditOp::Del => c.deletions += 1,
            EditOp::Match => {}
        }
    }
    c
}

/// Replays an edit script; `None` if it does not fit the sequences.
pub fn apply_script(reference: &[usize], hypothesis: &[usize], ops: &[EditOp]) -> Option<Vec<usize>> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    for op in ops {
        match op {
            EditOp::Match => {
                if reference.get(i)? != hypothesis.get(j)? {
                    return None;
                }
                out.push(reference[i]);
                i += 1;
                j += 1;
            }
            EditOp::Sub => {
                reference.get(i)?;
                out.push(*hypothesis.get(j)?);
                i += 1;
                j += 1;
            }
            EditOp::Ins => {
                out.push(*hypothesis.get(j)?);
                j += 1;
            }
            EditOp::Del => {
                reference.get(i)?;
                i += 1;
            }
        }
    }
    (i == reference.len() && j == hypothesis.len()).then_some(out)
}

/// Corpus-level error counts over paired lists.
pub fn wer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<(f64, ErrorCounts)> {
    if refs.len() != hyps.len() {
        return Err(Error::shape("wer", &[refs.len()], &[hyps.len()]));
    }
    let mut total = ErrorCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&count_errors(r, h));
    }
    Ok((total.wer()?, total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_zero() {
        let r = vec![vec![1, 2, 3], vec![4]];
        assert_eq!(wer(&r, &r).unwrap().0, 0.0);
    }

    #[test]
    fn one_substitution() {
        let (w, c) = wer(&[vec![1, 2, 3]], &[vec![1, 9, 3]]).unwrap();
        assert_eq!(w, 1.0 / 3.0);
        assert_eq!(c.substitutions, 1);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let (w, c) = wer(&[vec![1, 2]], &[vec![]]).unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(c.deletions, 2);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(wer(&[vec![]], &[vec![1]]).is_err());
        assert!(wer(&[vec![1]], &[]).is_err());
    }

    #[test]
    fn substitution_preferred_over_insert_delete() {
        // [a] -> [b]: one sub rather than ins + del
        assert_eq!(align(&[1], &[2]), vec![EditOp::Sub]);
        // [a, b] -> [b]: the deletion is forced; [b] -> [a, b] the insertion
        let c = count_errors(&[1, 2], &[2]);
        assert_eq!((c.substitutions, c.deletions), (0, 1));
        let c = count_errors(&[2], &[1, 2]);
        assert_eq!((c.substitutions, c.insertions), (0, 1));
    }

    #[test]
    fn script_reconstructs_hypothesis() {
        let (r, h) = ([3, 1, 4, 1, 5], [3, 4, 1, 1, 9, 5]);
        let ops = align(&r, &h);
        assert_eq!(apply_script(&r, &h, &ops).unwrap(), h.to_vec());
    }
}
