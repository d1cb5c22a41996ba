//! Measurement-error bias estimated from held-out survey pairs, and accuracy
//! of estimates against benchmark tables.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{same_grid, BenchmarkTable, CellKey, EstimateTable, SubgroupKey};

/// Per-cell bias `ε_jc` of nonprobability estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasMatrix {
    pub questions: Vec<String>,
    pub entries: BTreeMap<CellKey, f64>,
    /// `(nps table index, ps table index)` pairs averaged into every cell.
    pub provenance: Vec<(usize, usize)>,
}

impl BiasMatrix {
    pub fn get(&self, key: &CellKey) -> Option<f64> {
        self.entries.get(key).copied()
    }
}

/// `ε_jc` = average over all (nps, ps) cross-pairs of the per-cell difference
/// `μ̂_CLW − μ̂_ps`. Two tables per side give the four-term average.
pub fn estimate_bias(nps: &[EstimateTable], ps: &[EstimateTable]) -> Result<BiasMatrix> {
    let first = nps
        .first()
        .ok_or_else(|| Error::GridMismatch("no nonprobability tables".into()))?;
    if ps.is_empty() {
        return Err(Error::GridMismatch("no probability tables".into()));
    }
    first.shape()?;
    for t in nps.iter().chain(ps) {
        same_grid(&first.cells, &t.cells)?;
    }
    let provenance: Vec<(usize, usize)> = (0..nps.len())
        .flat_map(|a| (0..ps.len()).map(move |b| (a, b)))
        .collect();
    let pairs = provenance.len() as f64;
    let entries = first
        .cells
        .keys()
        .map(|key| {
            let total: f64 = provenance
                .iter()
                .map(|&(a, b)| nps[a].cells[key].value - ps[b].cells[key].value)
                .sum();
            (*key, total / pairs)
        })
        .collect();
    Ok(BiasMatrix {
        questions: first.questions.clone(),
        entries,
        provenance,
    })
}

/// Mean absolute error in percent, overall and by margin.
#[derive(Clone, Debug, PartialEq)]
pub struct MaeReport {
    pub overall: f64,
    pub per_subgroup: BTreeMap<SubgroupKey, f64>,
    pub per_question: BTreeMap<usize, f64>,
    /// `|Ȳ̂_jc − Ȳ_jc|` on the proportion scale.
    pub per_cell: BTreeMap<CellKey, f64>,
}

fn abs_diffs(estimates: &EstimateTable, benchmark: &BenchmarkTable) -> Result<BTreeMap<CellKey, f64>> {
    same_grid(&estimates.cells, benchmark.cells())?;
    Ok(estimates
        .cells
        .iter()
        .map(|(k, e)| (*k, (e.value - benchmark.cells()[k]).abs()))
        .collect())
}

/// `MAE = m⁻¹ Σ_j [k⁻¹ Σ_c |Ȳ̂_jc − Ȳ_jc|]`, reported ×100.
pub fn mae(estimates: &EstimateTable, benchmark: &BenchmarkTable) -> Result<MaeReport> {
    let per_cell = abs_diffs(estimates, benchmark)?;

    let mut by_question: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut by_group: BTreeMap<SubgroupKey, Vec<f64>> = BTreeMap::new();
    for (k, &d) in &per_cell {
        by_question.entry(k.question).or_default().push(d);
        by_group.entry(k.group).or_default().push(d);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let per_question: BTreeMap<usize, f64> = by_question
        .iter()
        .map(|(q, v)| (*q, 100.0 * mean(v)))
        .collect();
    let per_subgroup = by_group
        .iter()
        .map(|(g, v)| (*g, 100.0 * mean(v)))
        .collect();
    let overall = per_question.values().sum::<f64>() / per_question.len() as f64;
    Ok(MaeReport {
        overall,
        per_subgroup,
        per_question,
        per_cell,
    })
}

/// Per-cell absolute differences plus the largest one.
#[derive(Clone, Debug, PartialEq)]
pub struct AbsDiffTable {
    pub cells: BTreeMap<CellKey, f64>,
    pub max_cell: CellKey,
    pub max_value: f64,
}

pub fn abs_diff_table(estimates: &EstimateTable, benchmark: &BenchmarkTable) -> Result<AbsDiffTable> {
    let cells = abs_diffs(estimates, benchmark)?;
    let (max_cell, max_value) = cells
        .iter()
        .fold(None, |best: Option<(CellKey, f64)>, (k, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((*k, v)),
        })
        .ok_or_else(|| Error::GridMismatch("empty table".into()))?;
    Ok(AbsDiffTable {
        cells,
        max_cell,
        max_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Factor, MeanEstimate, Source};
    use approx::assert_abs_diff_eq;

    fn age(level: u32) -> SubgroupKey {
        SubgroupKey::new(Factor::Age, level, 3).unwrap()
    }

    fn estimates(values: &[(usize, u32, f64)], source: Source) -> EstimateTable {
        let mut t = EstimateTable::new(vec![]);
        for &(q, g, v) in values {
            t.insert(CellKey::new(q, age(g)), MeanEstimate::new(v, 0.0, source));
        }
        t
    }

    fn bench(values: &[(usize, u32, f64)]) -> BenchmarkTable {
        BenchmarkTable::new(
            vec![],
            values
                .iter()
                .map(|&(q, g, v)| (CellKey::new(q, age(g)), v))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_pair_bias() {
        let n = estimates(&[(0, 1, 0.30)], Source::Clw);
        let p = estimates(&[(0, 1, 0.25)], Source::Ps);
        let b = estimate_bias(&[n], &[p]).unwrap();
        assert_abs_diff_eq!(b.get(&CellKey::new(0, age(1))).unwrap(), 0.05, epsilon = 1e-15);
        assert_eq!(b.provenance, vec![(0, 0)]);
    }

    #[test]
    fn equal_differences_average_to_themselves() {
        let n = estimates(&[(0, 1, 0.5)], Source::Clw);
        let p = estimates(&[(0, 1, 0.4)], Source::Ps);
        let b = estimate_bias(&[n.clone(), n], &[p.clone(), p]).unwrap();
        assert_abs_diff_eq!(b.entries.values().next().copied().unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn four_term_cross_pair_average() {
        let cells = |a: f64| vec![(0, 1, a), (0, 2, a)];
        let o1 = estimates(&cells(0.3), Source::Clw);
        let o2 = estimates(&cells(0.4), Source::Clw);
        let p1 = estimates(&cells(0.2), Source::Ps);
        let p2 = estimates(&cells(0.1), Source::Ps);
        let b = estimate_bias(&[o1, o2], &[p1, p2]).unwrap();
        assert_eq!(b.provenance.len(), 4);
        for v in b.entries.values() {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn bias_grid_mismatch() {
        let n = estimates(&[(0, 1, 0.3)], Source::Clw);
        let p = estimates(&[(1, 1, 0.3)], Source::Ps);
        assert!(matches!(estimate_bias(&[n], &[p]), Err(Error::GridMismatch(_))));
        assert!(estimate_bias(&[], &[estimates(&[(0, 1, 0.1)], Source::Ps)]).is_err());
    }

    #[test]
    fn mae_zero_when_equal() {
        let cells = [(0, 1, 0.4), (0, 2, 0.7)];
        let r = mae(&estimates(&cells, Source::Ps), &bench(&cells)).unwrap();
        assert_eq!(r.overall, 0.0);
    }

    #[test]
    fn mae_single_question() {
        let r = mae(
            &estimates(&[(0, 1, 0.52), (0, 2, 0.44)], Source::Ps),
            &bench(&[(0, 1, 0.50), (0, 2, 0.40)]),
        )
        .unwrap();
        assert_abs_diff_eq!(r.overall, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mae_nested_average() {
        let r = mae(
            &estimates(&[(0, 1, 0.52), (0, 2, 0.44), (1, 1, 0.20), (1, 2, 0.36)], Source::Ps),
            &bench(&[(0, 1, 0.50), (0, 2, 0.40), (1, 1, 0.30), (1, 2, 0.30)]),
        )
        .unwrap();
        assert_abs_diff_eq!(r.overall, 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_question[&0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_question[&1], 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_subgroup[&age(1)], 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_subgroup[&age(2)], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn mae_grid_mismatch() {
        assert!(matches!(
            mae(&estimates(&[(0, 1, 0.5)], Source::Ps), &bench(&[(0, 2, 0.5)])),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn abs_diff_max_marker() {
        let cells = [(0, 1, 0.4), (0, 2, 0.7)];
        let t = abs_diff_table(&estimates(&cells, Source::Ps), &bench(&cells)).unwrap();
        assert_eq!(t.max_value, 0.0);

        let t = abs_diff_table(
            &estimates(&[(0, 1, 0.50)], Source::Clw),
            &bench(&[(0, 1, 0.28)]),
        )
        .unwrap();
        assert_abs_diff_eq!(t.max_value, 0.22, epsilon = 1e-12);

        let t = abs_diff_table(
            &estimates(&[(0, 1, 0.39), (0, 2, 0.43)], Source::Clw),
            &bench(&[(0, 1, 0.30), (0, 2, 0.40)]),
        )
        .unwrap();
        assert_abs_diff_eq!(t.max_value, 0.09, epsilon = 1e-12);
        assert_eq!(t.max_cell, CellKey::new(0, age(1)));
    }
}
