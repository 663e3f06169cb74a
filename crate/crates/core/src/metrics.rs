//! Edit-distance and match-ratio metrics, plus the first-order Markov
//! chain baseline over road segments.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::network::{circular_distance, EdgeId, RoadNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{pred} predictions for {truth} ground-truth trajectories")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("ground truth {index} has {got} edges, expected {expected}")]
    TruthLength { index: usize, expected: usize, got: usize },
    #[error("no trajectories to score")]
    Empty,
}

/// Levenshtein distance with unit costs.
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

/// Positions where the prediction equals the truth. Missing predicted
/// positions never match.
pub fn matches<T: PartialEq>(pred: &[T], truth: &[T]) -> usize {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryScore {
    pub edit: usize,
    pub matches: usize,
}

pub fn score(pred: &[EdgeId], truth: &[EdgeId]) -> TrajectoryScore {
    TrajectoryScore { edit: edit_distance(pred, truth), matches: matches(pred, truth) }
}

/// Corpus-level metrics, all in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub de: f64,
    pub amr: f64,
    /// `mr[k - 1]` is MR(k) for `k` in `1..=l_out`.
    pub mr: Vec<f64>,
    pub count: usize,
    pub l_out: usize,
    pub total_edit: usize,
    pub total_matches: usize,
}

pub fn compute_metrics(pred: &[Vec<EdgeId>], truth: &[Vec<EdgeId>]) -> Result<MetricsReport, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    let l_out = truth.first().ok_or(MetricsError::Empty)?.len();
    if l_out == 0 {
        return Err(MetricsError::TruthLength { index: 0, expected: 1, got: 0 });
    }
    let mut total_edit = 0;
    let mut total_matches = 0;
    let mut at_least = vec![0usize; l_out + 1];
    for (index, (p, t)) in pred.iter().zip(truth).enumerate() {
        if t.len() != l_out {
            return Err(MetricsError::TruthLength { index, expected: l_out, got: t.len() });
        }
        let s = score(p, t);
        total_edit += s.edit;
        total_matches += s.matches;
        at_least[s.matches] += 1;
    }
    // at_least[k] becomes the count with >= k matches
    for k in (0..l_out).rev() {
        at_least[k] += at_least[k + 1];
    }
    let n = truth.len();
    let denom = (n * l_out) as f64;
    Ok(MetricsReport {
        de: 100.0 * total_edit as f64 / denom,
        amr: 100.0 * total_matches as f64 / denom,
        mr: (1..=l_out).map(|k| 100.0 * at_least[k] as f64 / n as f64).collect(),
        count: n,
        l_out,
        total_edit,
        total_matches,
    })
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "DE,{}", self.de)?;
        writeln!(w, "AMR,{}", self.amr)?;
        for (k, v) in self.mr.iter().enumerate() {
            writeln!(w, "MR{},{}", k + 1, v)?;
        }
        writeln!(w, "count,{}", self.count)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "trajectories  {}", self.count)?;
        writeln!(f, "DE            {:.2}", self.de)?;
        writeln!(f, "AMR           {:.2}", self.amr)?;
        for (k, v) in self.mr.iter().enumerate() {
            writeln!(f, "MR({})         {:.2}", k + 1, v)?;
        }
        Ok(())
    }
}

/// Per-trajectory detail rows: `traj_id,edit,matches`.
pub fn write_details<W: Write>(
    mut w: W,
    ids: &[String],
    pred: &[Vec<EdgeId>],
    truth: &[Vec<EdgeId>],
) -> io::Result<()> {
    writeln!(w, "traj_id,edit,matches")?;
    for ((id, p), t) in ids.iter().zip(pred).zip(truth) {
        let s = score(p, t);
        writeln!(w, "{id},{},{}", s.edit, s.matches)?;
    }
    Ok(())
}

/// First-order transition counts between consecutive road segments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarkovModel {
    counts: HashMap<EdgeId, BTreeMap<EdgeId, u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub edges: Vec<EdgeId>,
    /// Prediction stopped early at a node without outgoing edges.
    pub dead_end: bool,
}

impl MarkovModel {
    pub fn fit<'a>(trajectories: impl IntoIterator<Item = &'a [EdgeId]>) -> Self {
        let mut counts: HashMap<EdgeId, BTreeMap<EdgeId, u64>> = HashMap::new();
        for t in trajectories {
            for pair in t.windows(2) {
                *counts.entry(pair[0]).or_default().entry(pair[1]).or_default() += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, from: EdgeId, to: EdgeId) -> u64 {
        self.counts.get(&from).and_then(|m| m.get(&to)).copied().unwrap_or(0)
    }

    /// Transition probability estimate; zero for unseen states.
    pub fn probability(&self, from: EdgeId, to: EdgeId) -> f64 {
        match self.counts.get(&from) {
            Some(m) => {
                let total: u64 = m.values().sum();
                m.get(&to).map_or(0.0, |&c| c as f64 / total as f64)
            }
            None => 0.0,
        }
    }

    /// Most frequent successor, lowest edge id on ties.
    pub fn most_likely(&self, from: EdgeId) -> Option<EdgeId> {
        let m = self.counts.get(&from)?;
        let mut best: Option<(EdgeId, u64)> = None;
        for (&e, &c) in m {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((e, c));
            }
        }
        best.map(|(e, _)| e)
    }

    /// `steps` greedy transitions after `last`. Unseen states fall back to
    /// the outgoing edge closest in heading to the current one.
    pub fn predict(&self, net: &RoadNetwork, last: EdgeId, steps: usize) -> McPrediction {
        let mut edges = Vec::with_capacity(steps);
        let mut cur = last;
        for _ in 0..steps {
            let next = self.most_likely(cur).or_else(|| straight_ahead(net, cur));
            match next {
                Some(e) => {
                    edges.push(e);
                    cur = e;
                }
                None => return McPrediction { edges, dead_end: true },
            }
        }
        McPrediction { edges, dead_end: false }
    }
}

/// The out-edge at the end of `e` with the smallest heading change,
/// lowest id on ties.
pub fn straight_ahead(net: &RoadNetwork, e: EdgeId) -> Option<EdgeId> {
    let rec = net.edge(e);
    let heading = rec.heading.unwrap_or(0.0);
    let mut best: Option<(EdgeId, f64)> = None;
    for &o in net.out_edge_ids(rec.target) {
        let dev = circular_distance(net.edge(o).heading.unwrap_or(0.0), heading);
        if best.map_or(true, |(_, d)| dev < d) {
            best = Some((o, dev));
        }
    }
    best.map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[usize]) -> Vec<EdgeId> {
        v.iter().map(|&i| EdgeId(i)).collect()
    }

    /// Shortest number of unit edits, found by breadth-first search over
    /// sequences. Only usable for tiny alphabets and lengths.
    fn brute_edit(a: &[u8], b: &[u8]) -> usize {
        use std::collections::{HashSet, VecDeque};
        let alphabet: Vec<u8> = a.iter().chain(b).copied().collect::<HashSet<_>>().into_iter().collect();
        let mut seen = HashSet::from([a.to_vec()]);
        let mut queue = VecDeque::from([(a.to_vec(), 0)]);
        while let Some((s, d)) = queue.pop_front() {
            if s == b {
                return d;
            }
            let mut next = Vec::new();
            for i in 0..s.len() {
                let mut del = s.clone();
                del.remove(i);
                next.push(del);
                for &c in &alphabet {
                    let mut sub = s.clone();
                    sub[i] = c;
                    next.push(sub);
                }
            }
            if s.len() < a.len().max(b.len()) {
                for i in 0..=s.len() {
                    for &c in &alphabet {
                        let mut ins = s.clone();
                        ins.insert(i, c);
                        next.push(ins);
                    }
                }
            }
            for n in next {
                if seen.insert(n.clone()) {
                    queue.push_back((n, d + 1));
                }
            }
        }
        unreachable!("b is always reachable")
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&['a', 'b', 'c'], &['a', 'x', 'c']), 1);
        assert_eq!(brute_edit(b"abc", b"axc"), 1);
        let empty: [u8; 0] = [];
        assert_eq!(edit_distance(&empty, &[1, 2, 3, 4, 5]), 5);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    proptest! {
        #[test]
        fn edit_distance_matches_search(a in proptest::collection::vec(0u8..3, 0..4), b in proptest::collection::vec(0u8..3, 0..4)) {
            prop_assert_eq!(edit_distance(&a, &b), brute_edit(&a, &b));
        }

        #[test]
        fn edit_never_exceeds_hamming(a in proptest::collection::vec(0usize..4, 5), b in proptest::collection::vec(0usize..4, 0..7)) {
            let (a, b) = (ids(&a), ids(&b));
            let hamming = a.len().max(b.len()) - matches(&b, &a);
            prop_assert!(edit_distance(&b, &a) <= hamming);
        }
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![ids(&[1, 2, 3, 4, 5]), ids(&[6, 7, 8, 9, 10])];
        let r = compute_metrics(&truth, &truth).unwrap();
        assert_eq!((r.de, r.amr), (0.0, 100.0));
        assert!(r.mr.iter().all(|&m| m == 100.0));
    }

    #[test]
    fn three_of_five() {
        let truth = vec![ids(&[1, 2, 3, 4, 5])];
        let pred = vec![ids(&[1, 2, 3, 9, 9])];
        let r = compute_metrics(&pred, &truth).unwrap();
        assert_eq!(r.amr, 60.0);
        assert_eq!(r.mr, vec![100.0, 100.0, 100.0, 0.0, 0.0]);
        assert_eq!(r.de, 40.0);
    }

    #[test]
    fn truncated_predictions_are_penalized() {
        let truth = vec![ids(&[1, 2, 3, 4, 5])];
        let r = compute_metrics(&[ids(&[1, 2])], &truth).unwrap();
        assert_eq!((r.amr, r.de), (40.0, 60.0));
        let r = compute_metrics(&[vec![]], &truth).unwrap();
        assert_eq!((r.amr, r.de), (0.0, 100.0));
    }

    #[test]
    fn metric_errors() {
        let truth = vec![ids(&[1, 2]), ids(&[1])];
        assert_eq!(
            compute_metrics(&truth, &truth),
            Err(MetricsError::TruthLength { index: 1, expected: 2, got: 1 })
        );
        assert_eq!(compute_metrics(&[], &truth[..1]), Err(MetricsError::LengthMismatch { pred: 0, truth: 1 }));
        assert_eq!(compute_metrics(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn report_formats() {
        let truth = vec![ids(&[1, 2])];
        let r = compute_metrics(&[ids(&[1, 3])], &truth).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "metric,value\nDE,50\nAMR,50\nMR1,100\nMR2,0\ncount,1\n");
        assert!(r.to_string().contains("AMR           50.00"));
        let mut out = Vec::new();
        write_details(&mut out, &["a".into()], &[ids(&[1, 3])], &truth).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "traj_id,edit,matches\na,1,1\n");
    }

    #[test]
    fn permutation_invariance() {
        let truth = vec![ids(&[1, 2, 3]), ids(&[4, 5, 6]), ids(&[7, 8, 9])];
        let pred = vec![ids(&[1, 0, 3]), ids(&[4, 5, 6]), ids(&[0, 8])];
        let a = compute_metrics(&pred, &truth).unwrap();
        let order = [2, 0, 1];
        let p2: Vec<_> = order.iter().map(|&i| pred[i].clone()).collect();
        let t2: Vec<_> = order.iter().map(|&i| truth[i].clone()).collect();
        assert_eq!(a, compute_metrics(&p2, &t2).unwrap());
    }

    #[test]
    fn markov_argmax_and_ties() {
        let t1 = ids(&[0, 2, 4]);
        let t2 = ids(&[0, 2, 5]);
        let t3 = ids(&[0, 3]);
        let mc = MarkovModel::fit([t1.as_slice(), t2.as_slice(), t3.as_slice()]);
        assert_eq!(mc.most_likely(EdgeId(0)), Some(EdgeId(2)));
        assert_eq!(mc.count(EdgeId(0), EdgeId(2)), 2);
        assert!((mc.probability(EdgeId(0), EdgeId(3)) - 1.0 / 3.0).abs() < 1e-12);
        // 4 and 5 are tied after 2
        assert_eq!(mc.most_likely(EdgeId(2)), Some(EdgeId(4)));
        assert_eq!(mc.most_likely(EdgeId(9)), None);
        assert_eq!(mc.probability(EdgeId(9), EdgeId(0)), 0.0);
    }
}
