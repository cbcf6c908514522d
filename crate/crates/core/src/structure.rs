//! Transition tables over latent states: estimation from assignments,
//! collapsing into categories, alignment against reference states, and
//! export as CSV and Graphviz DOT.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::corpus::Dialog;
use crate::error::{Error, Result};

/// Latent states of one dialog, in turn order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogAssignment {
    pub dialog_id: String,
    pub states: Vec<usize>,
    /// Posterior distribution over states for each exchange.
    pub posteriors: Vec<Vec<f64>>,
}

/// Per-exchange state assignments for a whole corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentAssignment {
    pub n_states: usize,
    pub dialogs: Vec<DialogAssignment>,
}

impl LatentAssignment {
    /// Builds an assignment from hard labels with one-hot posteriors.
    pub fn from_states(n_states: usize, states: &[Vec<usize>]) -> Self {
        let dialogs = states
            .iter()
            .enumerate()
            .map(|(i, s)| DialogAssignment {
                dialog_id: format!("{i}"),
                states: s.clone(),
                posteriors: s
                    .iter()
                    .map(|&k| (0..n_states).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
                    .collect(),
            })
            .collect();
        Self { n_states, dialogs }
    }

    pub fn num_exchanges(&self) -> usize {
        self.dialogs.iter().map(|d| d.states.len()).sum()
    }

    /// Flat list of states in corpus order.
    pub fn flat_states(&self) -> Vec<usize> {
        self.dialogs.iter().flat_map(|d| d.states.iter().copied()).collect()
    }
}

/// Row-stochastic matrix of state-to-state probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub matrix: Array2<f64>,
    pub occupancy: Vec<u64>,
    pub labels: Option<Vec<String>>,
}

impl TransitionTable {
    pub fn new(matrix: Array2<f64>, occupancy: Vec<u64>, labels: Option<Vec<String>>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n || occupancy.len() != n {
            return Err(Error::InvalidInput(format!(
                "transition table must be square with one occupancy per state (got {:?}, {} counts)",
                matrix.dim(),
                occupancy.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidInput(format!("{} labels for {n} states", l.len())));
            }
        }
        for (i, row) in matrix.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("row {i} is not a probability distribution: {row}")));
            }
        }
        Ok(Self { matrix, occupancy, labels })
    }

    pub fn n_states(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn label(&self, i: usize) -> String {
        self.labels.as_ref().map_or_else(|| format!("state_{i}"), |l| l[i].clone())
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.matrix.row(i).to_vec()
    }

    /// Header of labels plus `occupancy`, then one row of probabilities per state.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.n_states();
        let mut header: Vec<String> = (0..n).map(|i| self.label(i)).collect();
        header.push("occupancy".into());
        w.write_record(&header)?;
        for i in 0..n {
            let mut rec: Vec<String> = self.matrix.row(i).iter().map(|p| p.to_string()).collect();
            rec.push(self.occupancy[i].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.last().map(String::as_str) != Some("occupancy") {
            return Err(Error::InvalidInput("transition CSV must end with an `occupancy` column".into()));
        }
        let n = header.len() - 1;
        let mut matrix = Array2::zeros((n, n));
        let mut occupancy = Vec::with_capacity(n);
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if i >= n || rec.len() != n + 1 {
                return Err(Error::InvalidInput(format!("transition CSV row {} has wrong shape", i + 1)));
            }
            for j in 0..n {
                matrix[[i, j]] = rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("row {}, column {}: {e}", i + 1, j + 1)))?;
            }
            occupancy.push(rec[n].trim().parse::<u64>().map_err(|e| Error::InvalidInput(format!("row {} occupancy: {e}", i + 1)))?);
            rows += 1;
        }
        if rows != n {
            return Err(Error::InvalidInput(format!("transition CSV has {rows} rows for {n} states")));
        }
        Self::new(matrix, occupancy, Some(header[..n].to_vec()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Bigram counts `#(i, j)` over consecutive exchanges and per-state occupancy.
pub fn transition_counts(assignment: &LatentAssignment, n_states: usize) -> Result<(Array2<u64>, Vec<u64>)> {
    let mut counts = Array2::zeros((n_states, n_states));
    let mut occupancy = vec![0u64; n_states];
    for d in &assignment.dialogs {
        if let Some(&bad) = d.states.iter().find(|&&s| s >= n_states) {
            return Err(Error::InvalidInput(format!("dialog `{}` has state {bad} but only {n_states} states exist", d.dialog_id)));
        }
        for &s in &d.states {
            occupancy[s] += 1;
        }
        for w in d.states.windows(2) {
            counts[[w[0], w[1]]] += 1;
        }
    }
    Ok((counts, occupancy))
}

/// `p[i][j] = #(i, j) / #(i with a successor)`; rows without any successor are uniform.
pub fn estimate_transition_table_frequency(assignment: &LatentAssignment, n_states: usize) -> Result<TransitionTable> {
    let (counts, occupancy) = transition_counts(assignment, n_states)?;
    let mut matrix = Array2::zeros((n_states, n_states));
    for i in 0..n_states {
        let out: u64 = counts.row(i).sum();
        for j in 0..n_states {
            matrix[[i, j]] = if out == 0 { 1.0 / n_states as f64 } else { counts[[i, j]] as f64 / out as f64 };
        }
    }
    TransitionTable::new(matrix, occupancy, None)
}

/// Surjective grouping of latent states into categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseMap {
    pub state_to_category: BTreeMap<usize, usize>,
    #[serde(default)]
    pub category_names: Vec<String>,
}

impl CollapseMap {
    pub fn identity(n: usize) -> Self {
        Self { state_to_category: (0..n).map(|i| (i, i)).collect(), category_names: vec![] }
    }

    pub fn from_assignment(map: &[usize]) -> Self {
        Self { state_to_category: map.iter().copied().enumerate().collect(), category_names: vec![] }
    }

    pub fn num_categories(&self) -> usize {
        self.state_to_category.values().max().map_or(0, |m| m + 1)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Merges states into categories. Columns of merged states are summed; rows
/// are combined as the occupancy-weighted average of the member rows.
pub fn collapse_states(table: &TransitionTable, map: &CollapseMap) -> Result<TransitionTable> {
    let n = table.n_states();
    let mut category = vec![0; n];
    for (i, c) in category.iter_mut().enumerate() {
        *c = *map
            .state_to_category
            .get(&i)
            .ok_or_else(|| Error::InvalidInput(format!("collapse map does not cover state {i}")))?;
    }
    if let Some(extra) = map.state_to_category.keys().find(|&&s| s >= n) {
        return Err(Error::InvalidInput(format!("collapse map names state {extra}, table has {n} states")));
    }
    let k = map.num_categories();
    let mut members = vec![Vec::new(); k];
    for (i, &c) in category.iter().enumerate() {
        members[c].push(i);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("category {empty} has no member states")));
    }
    if !map.category_names.is_empty() && map.category_names.len() != k {
        return Err(Error::InvalidInput(format!("{} category names for {k} categories", map.category_names.len())));
    }
    let mut matrix = Array2::zeros((k, k));
    let mut occupancy = vec![0u64; k];
    for (c, group) in members.iter().enumerate() {
        let total: u64 = group.iter().map(|&i| table.occupancy[i]).sum();
        occupancy[c] = total;
        for &i in group {
            let w = if total == 0 { 1.0 / group.len() as f64 } else { table.occupancy[i] as f64 / total as f64 };
            for j in 0..n {
                matrix[[c, category[j]]] += w * table.matrix[[i, j]];
            }
        }
    }
    let labels = (!map.category_names.is_empty()).then(|| map.category_names.clone());
    TransitionTable::new(matrix, occupancy, labels)
}

/// Graphviz digraph with one node per state and an edge wherever `p >= threshold`.
pub fn export_dot(table: &TransitionTable, labels: Option<&[String]>, threshold: f64) -> String {
    let n = table.n_states();
    let label = |i: usize| labels.and_then(|l| l.get(i).cloned()).unwrap_or_else(|| table.label(i));
    let max_occ = table.occupancy.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = String::from("digraph dialog_structure {\n    node [shape=ellipse];\n");
    for i in 0..n {
        let occ = table.occupancy[i];
        let width = 0.75 + 1.25 * occ as f64 / max_occ;
        let _ = writeln!(
            out,
            "    s{i} [label=\"{}\\n(n={occ})\", width={width:.2}];",
            label(i).replace('\\', "\\\\").replace('"', "\\\"")
        );
    }
    for i in 0..n {
        for j in 0..n {
            let p = table.matrix[[i, j]];
            if p >= threshold {
                let _ = writeln!(out, "    s{i} -> s{j} [label=\"{p:.2}\"];");
            }
        }
    }
    out.push_str("}\n");
    out
}

/// One exchange shown as evidence for a state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StateExample {
    pub dialog_id: String,
    pub turn_index: usize,
    pub posterior: f64,
    pub user: String,
    pub system: String,
    pub previous: Option<(String, String)>,
}

/// For every state, the `k` member exchanges with the highest posterior for it.
pub fn top_exchanges_per_state(assignment: &LatentAssignment, dialogs: &[Dialog], k: usize) -> Result<BTreeMap<usize, Vec<StateExample>>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if assignment.dialogs.len() != dialogs.len() {
        return Err(Error::InvalidInput(format!(
            "assignment covers {} dialogs, corpus has {}",
            assignment.dialogs.len(),
            dialogs.len()
        )));
    }
    let mut report: BTreeMap<usize, Vec<StateExample>> = (0..assignment.n_states).map(|s| (s, Vec::new())).collect();
    for (a, d) in assignment.dialogs.iter().zip(dialogs) {
        for (t, (&s, post)) in a.states.iter().zip(&a.posteriors).enumerate() {
            let Some(ex) = d.exchanges.get(t) else {
                return Err(Error::InvalidInput(format!("dialog `{}` has fewer exchanges than assignments", d.dialog_id)));
            };
            let previous = t.checked_sub(1).map(|p| (d.exchanges[p].user_tokens.join(" "), d.exchanges[p].system_tokens.join(" ")));
            report.entry(s).or_default().push(StateExample {
                dialog_id: d.dialog_id.clone(),
                turn_index: t,
                posterior: post[s],
                user: ex.user_tokens.join(" "),
                system: ex.system_tokens.join(" "),
                previous,
            });
        }
    }
    for list in report.values_mut() {
        list.sort_by(|a, b| b.posterior.total_cmp(&a.posterior));
        list.truncate(k);
    }
    Ok(report)
}

/// Maps each learned state onto a reference state. The one-to-one part is a
/// maximum-weight matching on the confusion counts; learned states left over
/// join the reference state they overlap most.
pub fn align_states(learned: &LatentAssignment, reference: &[Vec<usize>], n_reference: usize) -> Result<Vec<usize>> {
    let n_learned = learned.n_states;
    if learned.dialogs.len() != reference.len() {
        return Err(Error::InvalidInput("assignment and reference cover different dialogs".into()));
    }
    let mut confusion = vec![vec![0i64; n_reference]; n_learned];
    for (a, r) in learned.dialogs.iter().zip(reference) {
        if a.states.len() != r.len() {
            return Err(Error::InvalidInput(format!("dialog `{}` lengths differ", a.dialog_id)));
        }
        for (&l, &t) in a.states.iter().zip(r) {
            if t >= n_reference || l >= n_learned {
                return Err(Error::InvalidInput(format!("state out of range in dialog `{}`", a.dialog_id)));
            }
            confusion[l][t] += 1;
        }
    }
    let best_reference = |l: usize| (0..n_reference).max_by_key(|&t| (confusion[l][t], std::cmp::Reverse(t))).unwrap_or(0);
    let mut map: Vec<Option<usize>> = vec![None; n_learned];
    if n_learned >= n_reference {
        let weights = Matrix::from_fn(n_reference, n_learned, |(t, l)| confusion[l][t]);
        let (_, assign) = kuhn_munkres(&weights);
        for (t, &l) in assign.iter().enumerate() {
            map[l] = Some(t);
        }
    } else {
        let weights = Matrix::from_fn(n_learned, n_reference, |(l, t)| confusion[l][t]);
        let (_, assign) = kuhn_munkres(&weights);
        for (l, &t) in assign.iter().enumerate() {
            map[l] = Some(t);
        }
    }
    Ok((0..n_learned).map(|l| map[l].unwrap_or_else(|| best_reference(l))).collect())
}

/// Total-variation distance between row `row` of two equally sized tables.
pub fn total_variation(a: &Array2<f64>, b: &Array2<f64>, row: usize) -> f64 {
    0.5 * a.row(row).iter().zip(b.row(row)).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table(m: Array2<f64>, occ: Vec<u64>) -> TransitionTable {
        TransitionTable::new(m, occ, None).unwrap()
    }

    #[test]
    fn frequency_counting_definition() {
        let a = LatentAssignment::from_states(3, &[vec![0, 1, 1, 2]]);
        let t = estimate_transition_table_frequency(&a, 3).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(t.matrix, array![[0.0, 1.0, 0.0], [0.0, 0.5, 0.5], [third, third, third]]);
        assert_eq!(t.occupancy, vec![1, 2, 1]);
    }

    #[test]
    fn single_exchange_dialogs_give_uniform_rows() {
        let a = LatentAssignment::from_states(4, &[vec![0], vec![3], vec![2]]);
        let t = estimate_transition_table_frequency(&a, 4).unwrap();
        assert!(t.matrix.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn out_of_range_state_is_an_error() {
        let a = LatentAssignment::from_states(3, &[vec![0, 5]]);
        assert!(estimate_transition_table_frequency(&a, 3).is_err());
    }

    #[test]
    fn collapse_identity_is_noop() {
        let t = table(array![[0.2, 0.8], [0.6, 0.4]], vec![3, 7]);
        assert_eq!(collapse_states(&t, &CollapseMap::identity(2)).unwrap(), t);
    }

    #[test]
    fn collapse_everything_gives_one() {
        let t = table(array![[0.2, 0.8], [0.6, 0.4]], vec![3, 7]);
        let c = collapse_states(&t, &CollapseMap::from_assignment(&[0, 0])).unwrap();
        assert_eq!(c.matrix.dim(), (1, 1));
        assert!((c.matrix[[0, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(c.occupancy, vec![10]);
    }

    #[test]
    fn collapse_uses_occupancy_weights() {
        let t = table(
            array![[0.5, 0.25, 0.25], [0.1, 0.2, 0.7], [0.3, 0.3, 0.4]],
            vec![5, 10, 30],
        );
        let c = collapse_states(&t, &CollapseMap::from_assignment(&[0, 1, 1])).unwrap();
        // merged row = (10 r1 + 30 r2) / 40 = (0.25, 0.275, 0.475); columns 1 and 2 summed
        assert!((c.matrix[[1, 0]] - 0.25).abs() < 1e-12);
        assert!((c.matrix[[1, 1]] - 0.75).abs() < 1e-12);
        assert!((c.matrix[[0, 1]] - 0.5).abs() < 1e-12);
        assert_eq!(c.occupancy, vec![5, 40]);
    }

    #[test]
    fn collapse_rejects_empty_category_and_partial_maps() {
        let t = table(array![[0.5, 0.5], [0.5, 0.5]], vec![1, 1]);
        assert!(collapse_states(&t, &CollapseMap::from_assignment(&[0, 2])).is_err());
        let partial = CollapseMap { state_to_category: BTreeMap::from([(0, 0)]), category_names: vec![] };
        assert!(collapse_states(&t, &partial).is_err());
    }

    fn edges(dot: &str) -> usize {
        dot.lines().filter(|l| l.contains("->")).count()
    }

    #[test]
    fn dot_threshold_filters_edges() {
        let t = table(array![[0.0, 1.0], [1.0, 0.0]], vec![1, 1]);
        assert_eq!(edges(&export_dot(&t, None, 0.2)), 2);
        let u = table(Array2::from_elem((10, 10), 0.1), vec![1; 10]);
        assert_eq!(edges(&export_dot(&u, None, 0.2)), 0);
        assert_eq!(edges(&export_dot(&u, None, 0.0)), 100);
        assert_eq!(export_dot(&u, None, 0.0), export_dot(&u, None, 0.0));
        assert!(export_dot(&t, None, 0.2).contains("s0 -> s1 [label=\"1.00\"]"));
    }

    #[test]
    fn csv_round_trip() {
        let t = TransitionTable::new(array![[0.25, 0.75], [1.0, 0.0]], vec![4, 9], Some(vec!["ask".into(), "done".into()])).unwrap();
        let back = TransitionTable::from_csv(&t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(TransitionTable::from_csv("a,b\n0.5,1\n").is_err());
    }

    #[test]
    fn top_exchanges_sorted_and_truncated() {
        use crate::corpus::{tokenize, Exchange};
        let ex = |u: &str, t: usize| Exchange { user_tokens: tokenize(u), system_tokens: tokenize("ok"), entities: vec![], turn_index: t };
        let dialogs = vec![Dialog { dialog_id: "d".into(), exchanges: vec![ex("a", 0), ex("b", 1), ex("c", 2)] }];
        let a = LatentAssignment {
            n_states: 3,
            dialogs: vec![DialogAssignment {
                dialog_id: "d".into(),
                states: vec![0, 0, 1],
                posteriors: vec![vec![0.6, 0.4, 0.0], vec![0.9, 0.1, 0.0], vec![0.2, 0.7, 0.1]],
            }],
        };
        let r = top_exchanges_per_state(&a, &dialogs, 5).unwrap();
        assert_eq!(r[&0].iter().map(|e| e.user.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!(r[&0][0].previous, Some(("a".into(), "ok".into())));
        assert_eq!(r[&1].len(), 1);
        assert!(r[&2].is_empty());
        let r1 = top_exchanges_per_state(&a, &dialogs, 1).unwrap();
        assert_eq!(r1[&0].len(), 1);
    }

    #[test]
    fn alignment_recovers_permutation() {
        let truth = vec![vec![0, 1, 2, 2], vec![1, 0]];
        let learned: Vec<Vec<usize>> = truth.iter().map(|d| d.iter().map(|&s| [2, 3, 0][s]).collect()).collect();
        let a = LatentAssignment::from_states(4, &learned);
        let map = align_states(&a, &truth, 3).unwrap();
        assert_eq!(map[2], 0);
        assert_eq!(map[3], 1);
        assert_eq!(map[0], 2);
    }

    proptest::proptest! {
        #[test]
        fn frequency_rows_match_successor_counts(seqs in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..8), 0..10)) {
            let a = LatentAssignment::from_states(4, &seqs);
            let (counts, _) = transition_counts(&a, 4).unwrap();
            for i in 0..4 {
                let with_successor: u64 = seqs.iter().map(|s| s.iter().take(s.len().saturating_sub(1)).filter(|&&x| x == i).count() as u64).sum();
                proptest::prop_assert_eq!(counts.row(i).sum(), with_successor);
            }
            let t = estimate_transition_table_frequency(&a, 4).unwrap();
            for row in t.matrix.rows() {
                proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn collapse_keeps_rows_stochastic(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 5), 5),
            occ in proptest::collection::vec(0u64..50, 5),
            map in proptest::collection::vec(0usize..3, 5),
        ) {
            let m = Array2::from_shape_fn((5, 5), |(i, j)| raw[i][j] / raw[i].iter().sum::<f64>());
            let t = TransitionTable::new(m, occ.clone(), None).unwrap();
            let mut ids: Vec<usize> = map.clone();
            ids.sort();
            ids.dedup();
            let dense: Vec<usize> = map.iter().map(|c| ids.iter().position(|x| x == c).unwrap()).collect();
            let c = collapse_states(&t, &CollapseMap::from_assignment(&dense)).unwrap();
            for row in c.matrix.rows() {
                proptest::prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            proptest::prop_assert_eq!(c.occupancy.iter().sum::<u64>(), occ.iter().sum::<u64>());
        }
    }
}
