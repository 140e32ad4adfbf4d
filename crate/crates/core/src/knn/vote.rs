use serde::Serialize;

use super::NeighborList;
use crate::datamodel::LabelTable;
use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-5;

/// Unweighted neighbor vote over a class list.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelDistribution {
    pub probs: Vec<f64>,
    pub support: usize,
}

/// `probs[c]` is the fraction of neighbors labeled `c`.
pub fn vote(nbrs: &NeighborList, labels: &LabelTable) -> Result<LabelDistribution> {
    let mut counts = vec![0usize; labels.n_classes()];
    for n in nbrs.iter() {
        let c = labels
            .get(&n.id)
            .ok_or_else(|| Error::MissingLabel(n.id.to_string()))?;
        counts[c] += 1;
    }
    let k = nbrs.len();
    if k == 0 {
        return Err(Error::InvalidDistribution("no neighbors to vote".into()));
    }
    Ok(LabelDistribution {
        probs: counts.iter().map(|&c| c as f64 / k as f64).collect(),
        support: k,
    })
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(
            "entries must be finite and >= 0".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Shannon entropy in nats, `0 ln 0 = 0`, clamped to `[0, ln C]`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

/// Argmax class (lowest index on ties) and confidence `-entropy`.
pub fn predict_label(p: &[f64]) -> Result<(usize, f64)> {
    let h = entropy(p)?;
    Ok((argmax(p), -h))
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::SampleId;
    use crate::knn::Neighbor;

    fn nbrs(ids: &[&str]) -> NeighborList {
        NeighborList(
            ids.iter()
                .enumerate()
                .map(|(i, s)| Neighbor {
                    id: SampleId::new(*s).unwrap(),
                    row: i,
                    similarity: 1.0,
                })
                .collect(),
        )
    }

    fn labels(pairs: &[(&str, &str)]) -> LabelTable {
        LabelTable::from_named(
            pairs
                .iter()
                .map(|(i, c)| (SampleId::new(*i).unwrap(), c.to_string())),
        )
        .unwrap()
    }

    #[test]
    fn vote_counts() {
        let l = labels(&[("x", "a"), ("y", "a"), ("z", "b")]);
        let d = vote(&nbrs(&["x", "y", "z"]), &l).unwrap();
        assert_eq!(d.probs, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(d.support, 3);
        let one = vote(&nbrs(&["x", "y"]), &l).unwrap();
        assert_eq!(one.probs, vec![1.0, 0.0]);
    }

    #[test]
    fn vote_missing_label() {
        let l = labels(&[("x", "a")]);
        assert!(matches!(vote(&nbrs(&["x", "q"]), &l), Err(Error::MissingLabel(id)) if id == "q"));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-9);
        assert!((entropy(&[2.0 / 3.0, 1.0 / 3.0]).unwrap() - 0.6365).abs() < 1e-4);
        assert!(matches!(entropy(&[0.5, 0.3]), Err(Error::InvalidDistribution(_))));
        assert!(matches!(entropy(&[1.5, -0.5]), Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn predictions() {
        assert_eq!(predict_label(&[0.0, 0.0, 1.0]).unwrap(), (2, 0.0));
        let (c, conf) = predict_label(&[0.2; 5]).unwrap();
        assert_eq!(c, 0);
        assert!((conf + 5f64.ln()).abs() < 1e-12);
        let (c, conf) = predict_label(&[0.5, 0.3, 0.2]).unwrap();
        assert_eq!(c, 0);
        assert!((conf + 1.0297).abs() < 1e-3);
    }
}
