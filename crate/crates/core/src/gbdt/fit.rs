//! Exact greedy boosting on the regularized second-order logistic objective.
//!
//! Trees grow level by level. Every column is ranked once (distinct values in
//! ascending order). Per level and sampled feature, gradient sums are
//! gathered per (open node, value rank), either into dense buckets in row
//! order or, when the bucket table would be large, by walking the presorted
//! column with running sums. Both visit exactly the boundaries between
//! adjacent distinct values present in each node. Features are scanned in
//! parallel and reduced in index order.

use std::ops::ControlFlow;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::features::FeatureMatrix;
use super::tree::{BoostedEnsemble, GbdtHyperParams, Node, RegressionTree};
use crate::error::{Error, Result};
use crate::nn::layers::sigmoid;
use crate::seed::stream_rng;

const INACTIVE: u32 = u32::MAX;

/// `sign(g) * max(|g| - alpha, 0)`.
fn soft_threshold(g: f64, alpha: f64) -> f64 {
    if g > alpha {
        g - alpha
    } else if g < -alpha {
        g + alpha
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Reg {
    l1: f64,
    l2: f64,
    gamma: f64,
    min_child_weight: f64,
}

impl Reg {
    fn score(&self, g: f64, h: f64) -> f64 {
        let t = soft_threshold(g, self.l1);
        t * t / (h + self.l2)
    }

    fn weight(&self, g: f64, h: f64) -> f64 {
        -soft_threshold(g, self.l1) / (h + self.l2)
    }

    fn gain(&self, gl: f64, hl: f64, g: f64, h: f64) -> f64 {
        let (gr, hr) = (g - gl, h - hl);
        0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h)) - self.gamma
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    /// Highest value rank sent left.
    left_rank: u32,
}

struct BuildNode {
    g: f64,
    h: f64,
    depth: usize,
    split: Option<(Candidate, usize, usize)>,
}

/// Ranked view of one column.
struct Column {
    /// Distinct values, ascending (`-0.0` and `0.0` are one value).
    values: Vec<f32>,
    ranks: Vec<u32>,
    /// Rows in (value, row) order; kept only for high-cardinality columns.
    order: Option<Vec<u32>>,
}

const SORTED_ORDER_MIN_DISTINCT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScanPath {
    Buckets,
    Sorted,
}

/// Ranked columns of one feature matrix; reusable across fits.
pub struct GbdtTrainer<'a> {
    fm: &'a FeatureMatrix,
    columns: Vec<Column>,
    targets: Vec<f64>,
    forced_path: Option<ScanPath>,
}

impl<'a> GbdtTrainer<'a> {
    pub fn new(fm: &'a FeatureMatrix) -> Result<Self> {
        Self::build(fm, SORTED_ORDER_MIN_DISTINCT)
    }

    fn build(fm: &'a FeatureMatrix, sorted_min_distinct: usize) -> Result<Self> {
        if fm.rows() < 2 {
            return Err(Error::Shape("boosting needs at least 2 rows".into()));
        }
        if fm.rows() >= INACTIVE as usize {
            return Err(Error::Shape("too many rows".into()));
        }
        let targets: Vec<f64> = fm.labels().iter().map(|l| l.target()).collect();
        let positives = targets.iter().filter(|&&t| t == 1.0).count();
        if positives == 0 || positives == targets.len() {
            return Err(Error::DegenerateLabels);
        }
        let (n, d) = (fm.rows(), fm.cols());
        let columns = (0..d)
            .into_par_iter()
            .map(|f| {
                let mut col: Vec<(f32, u32)> =
                    (0..n).map(|i| (fm.values()[i * d + f], i as u32)).collect();
                col.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)));
                let mut values: Vec<f32> = Vec::new();
                let mut ranks = vec![0u32; n];
                for &(v, row) in &col {
                    if values.last() != Some(&v) {
                        values.push(v);
                    }
                    ranks[row as usize] = (values.len() - 1) as u32;
                }
                let order = (values.len() >= sorted_min_distinct)
                    .then(|| col.iter().map(|&(_, r)| r).collect());
                Column {
                    values,
                    ranks,
                    order,
                }
            })
            .collect();
        Ok(GbdtTrainer {
            fm,
            columns,
            targets,
            forced_path: None,
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        self.fm
    }

    /// Fits `hp.n_estimators` trees. `on_tree(round, ensemble)` runs after
    /// each tree; returning `Break` stops early.
    pub fn fit_with<F>(
        &self,
        hp: &GbdtHyperParams,
        seed: u64,
        mut on_tree: F,
    ) -> Result<BoostedEnsemble>
    where
        F: FnMut(usize, &BoostedEnsemble) -> ControlFlow<()>,
    {
        hp.validate()?;
        let (n, d) = (self.fm.rows(), self.fm.cols());
        let mean = self.targets.iter().sum::<f64>() / n as f64;
        let mut ens = BoostedEnsemble {
            params: hp.clone(),
            n_features: d,
            base_score: (mean / (1.0 - mean)).ln(),
            trees: Vec::with_capacity(hp.n_estimators),
        };
        let reg = Reg {
            l1: hp.l1(),
            l2: hp.l2(),
            gamma: hp.gamma,
            min_child_weight: hp.min_child_weight,
        };
        let n_cols = ((hp.colsample_bytree * d as f64).round() as usize).clamp(1, d);
        let mut sums = vec![0.0f64; n];
        let mut grad = vec![(0.0f64, 0.0f64); n];

        for round in 0..hp.n_estimators {
            let mut rng = stream_rng(seed, round as u64);
            grad.par_iter_mut()
                .zip(&sums)
                .zip(&self.targets)
                .for_each(|((gh, &s), &y)| {
                    let p = sigmoid(ens.margin_from_sum(s));
                    *gh = (p - y, p * (1.0 - p));
                });
            let mut node_of: Vec<u32> = if hp.subsample < 1.0 {
                (0..n)
                    .map(|_| {
                        if rng.gen::<f64>() < hp.subsample {
                            0
                        } else {
                            INACTIVE
                        }
                    })
                    .collect()
            } else {
                vec![0; n]
            };
            let mut cols: Vec<usize> = sample(&mut rng, d, n_cols).into_vec();
            cols.sort_unstable();

            let (tree, bounds) = self.grow(&reg, hp.max_depth, &grad, &mut node_of, &cols);
            let outputs: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| self.eval_ranked(&tree, &bounds, i))
                .collect();
            for (s, o) in sums.iter_mut().zip(outputs) {
                *s += o;
            }
            ens.trees.push(tree);
            if on_tree(round, &ens).is_break() {
                break;
            }
        }
        Ok(ens)
    }

    fn grow(
        &self,
        reg: &Reg,
        max_depth: usize,
        grad: &[(f64, f64)],
        node_of: &mut [u32],
        cols: &[usize],
    ) -> (RegressionTree, Vec<u32>) {
        let (mut g, mut h) = (0.0, 0.0);
        for (&(gi, hi), &nd) in grad.iter().zip(node_of.iter()) {
            if nd != INACTIVE {
                g += gi;
                h += hi;
            }
        }
        let mut nodes = vec![BuildNode {
            g,
            h,
            depth: 0,
            split: None,
        }];
        let mut frontier: Vec<usize> = vec![0];

        while !frontier.is_empty() {
            frontier.retain(|&i| {
                nodes[i].depth < max_depth && nodes[i].h >= 2.0 * reg.min_child_weight
            });
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![usize::MAX; nodes.len()];
            for (s, &i) in frontier.iter().enumerate() {
                slot_of[i] = s;
            }
            let totals: Vec<(f64, f64)> =
                frontier.iter().map(|&i| (nodes[i].g, nodes[i].h)).collect();

            let row_slot: Vec<u32> = node_of
                .iter()
                .map(|&nd| match nd {
                    INACTIVE => INACTIVE,
                    nd => match slot_of[nd as usize] {
                        usize::MAX => INACTIVE,
                        s => s as u32,
                    },
                })
                .collect();
            let per_feature = self.scan_level(cols, reg, grad, &row_slot, &totals);
            let mut best: Vec<Option<Candidate>> = vec![None; frontier.len()];
            for (_, cands) in per_feature {
                for (b, c) in best.iter_mut().zip(cands) {
                    if let Some(c) = c {
                        if b.map_or(true, |b| c.gain > b.gain) {
                            *b = Some(c);
                        }
                    }
                }
            }

            // Children inherit row membership; nodes that do not split close.
            let mut next = Vec::new();
            let mut child_of = vec![None; nodes.len()];
            for (s, &i) in frontier.iter().enumerate() {
                if let Some(c) = best[s] {
                    let depth = nodes[i].depth + 1;
                    let l = nodes.len();
                    nodes.push(BuildNode {
                        g: 0.0,
                        h: 0.0,
                        depth,
                        split: None,
                    });
                    nodes.push(BuildNode {
                        g: 0.0,
                        h: 0.0,
                        depth,
                        split: None,
                    });
                    nodes[i].split = Some((c, l, l + 1));
                    child_of[i] = Some((c, l));
                    next.push(l);
                    next.push(l + 1);
                }
            }
            for (row, nd) in node_of.iter_mut().enumerate() {
                if *nd == INACTIVE {
                    continue;
                }
                let cur = *nd as usize;
                match child_of[cur] {
                    Some((c, l)) => {
                        let r = self.columns[c.feature].ranks[row];
                        let child = if r <= c.left_rank { l } else { l + 1 };
                        nodes[child].g += grad[row].0;
                        nodes[child].h += grad[row].1;
                        *nd = child as u32;
                    }
                    None => *nd = INACTIVE,
                }
            }
            frontier = next;
        }

        // Emit in preorder, with each split's rank bound alongside.
        fn emit(
            nodes: &[BuildNode],
            i: usize,
            reg: &Reg,
            out: &mut Vec<Node>,
            bounds: &mut Vec<u32>,
        ) {
            let me = out.len();
            match nodes[i].split {
                None => {
                    out.push(Node::Leaf {
                        weight: reg.weight(nodes[i].g, nodes[i].h),
                    });
                    bounds.push(0);
                }
                Some((c, l, r)) => {
                    out.push(Node::Leaf { weight: 0.0 });
                    bounds.push(c.left_rank);
                    let left = out.len();
                    emit(nodes, l, reg, out, bounds);
                    let right = out.len();
                    emit(nodes, r, reg, out, bounds);
                    out[me] = Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right,
                    };
                }
            }
        }
        let mut out = Vec::with_capacity(nodes.len());
        let mut bounds = Vec::with_capacity(nodes.len());
        emit(&nodes, 0, reg, &mut out, &mut bounds);
        let tree = RegressionTree::from_nodes(out).expect("grown trees are preorder");
        (tree, bounds)
    }

    /// Same result as `tree.eval(row)` on a training row, via column ranks.
    fn eval_ranked(&self, tree: &RegressionTree, bounds: &[u32], row: usize) -> f64 {
        let nodes = tree.nodes();
        let mut i = 0;
        loop {
            match nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    i = if self.columns[feature].ranks[row] <= bounds[i] {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    fn path_for(&self, f: usize, slots: usize, n: usize) -> ScanPath {
        let col = &self.columns[f];
        self.forced_path.unwrap_or(match col.order {
            Some(_) if slots * col.values.len() > 4 * n => ScanPath::Sorted,
            _ => ScanPath::Buckets,
        })
    }

    /// Best split per open node for every feature in `cols`, as
    /// `(feature, candidates)` in ascending feature order.
    fn scan_level(
        &self,
        cols: &[usize],
        reg: &Reg,
        grad: &[(f64, f64)],
        row_slot: &[u32],
        totals: &[(f64, f64)],
    ) -> Vec<(usize, Vec<Option<Candidate>>)> {
        let (n, slots) = (row_slot.len(), totals.len());
        let (bucketed, sorted): (Vec<usize>, Vec<usize>) = cols
            .iter()
            .partition(|&&f| self.path_for(f, slots, n) == ScanPath::Buckets);

        // Features sharing one pass over the rows, with bounded table size.
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut size = 0;
        for &f in &bucketed {
            let cells = slots * self.columns[f].values.len();
            if groups.is_empty()
                || (size + cells > GROUP_CELLS && !groups.last().unwrap().is_empty())
            {
                groups.push(Vec::new());
                size = 0;
            }
            groups.last_mut().unwrap().push(f);
            size += cells;
        }

        let mut out: Vec<(usize, Vec<Option<Candidate>>)> = groups
            .par_iter()
            .flat_map_iter(|group| {
                let tables = self.bucket_tables(group, grad, row_slot, slots);
                group
                    .iter()
                    .zip(tables)
                    .map(|(&f, table)| (f, self.from_buckets(f, &table, reg, totals)))
                    .collect::<Vec<_>>()
            })
            .chain(
                sorted
                    .par_iter()
                    .map(|&f| (f, self.scan_sorted(f, reg, grad, row_slot, totals))),
            )
            .collect();
        out.sort_by_key(|(f, _)| *f);
        out
    }

    /// Per-feature `(g, h, count)` tables indexed by `slot * distinct + rank`,
    /// filled in ascending row order.
    fn bucket_tables(
        &self,
        group: &[usize],
        grad: &[(f64, f64)],
        row_slot: &[u32],
        slots: usize,
    ) -> Vec<Vec<(f64, f64, u32)>> {
        let mut tables: Vec<Vec<(f64, f64, u32)>> = group
            .iter()
            .map(|&f| vec![(0.0, 0.0, 0); slots * self.columns[f].values.len()])
            .collect();
        let n = row_slot.len();
        for start in (0..n).step_by(ROW_BLOCK) {
            let end = (start + ROW_BLOCK).min(n);
            let rs = &row_slot[start..end];
            let gs = &grad[start..end];
            for (&f, table) in group.iter().zip(tables.iter_mut()) {
                let k = self.columns[f].values.len();
                let ranks = &self.columns[f].ranks[start..end];
                for ((&s, &r), &(g, h)) in rs.iter().zip(ranks).zip(gs) {
                    if s != INACTIVE {
                        let b = &mut table[s as usize * k + r as usize];
                        b.0 += g;
                        b.1 += h;
                        b.2 += 1;
                    }
                }
            }
        }
        tables
    }

    fn from_buckets(
        &self,
        f: usize,
        table: &[(f64, f64, u32)],
        reg: &Reg,
        totals: &[(f64, f64)],
    ) -> Vec<Option<Candidate>> {
        let k = self.columns[f].values.len();
        let mut sc = Scanner::new(f, &self.columns[f].values, reg, totals);
        for s in 0..totals.len() {
            let mut st = RunState::default();
            for (r, &(g, h, c)) in table[s * k..(s + 1) * k].iter().enumerate() {
                if c > 0 {
                    sc.step(&mut st, s, r as u32, g, h);
                }
            }
        }
        sc.best
    }

    /// Walks the presorted column. Groups of equal rank arrive contiguously
    /// per node with rows ascending, so group sums match the bucket tables
    /// bit for bit.
    fn scan_sorted(
        &self,
        f: usize,
        reg: &Reg,
        grad: &[(f64, f64)],
        row_slot: &[u32],
        totals: &[(f64, f64)],
    ) -> Vec<Option<Candidate>> {
        let col = &self.columns[f];
        let order = col.order.as_ref().expect("sorted order kept");
        let slots = totals.len();
        let mut sc = Scanner::new(f, &col.values, reg, totals);
        let mut states = vec![RunState::default(); slots];
        let mut open: Vec<Option<(u32, f64, f64)>> = vec![None; slots];
        for &row in order {
            let row = row as usize;
            let s = row_slot[row];
            if s == INACTIVE {
                continue;
            }
            let s = s as usize;
            let rank = col.ranks[row];
            match &mut open[s] {
                Some((r, g, h)) if *r == rank => {
                    *g += grad[row].0;
                    *h += grad[row].1;
                }
                slot => {
                    if let Some((r, g, h)) = *slot {
                        sc.step(&mut states[s], s, r, g, h);
                    }
                    *slot = Some((rank, grad[row].0, grad[row].1));
                }
            }
        }
        for s in 0..slots {
            if let Some((r, g, h)) = open[s] {
                sc.step(&mut states[s], s, r, g, h);
            }
        }
        sc.best
    }
}

const ROW_BLOCK: usize = 2048;
/// Bucket cells (24 bytes each) filled in one pass over the rows.
const GROUP_CELLS: usize = 1 << 19;

/// Running left-side sums of one node while ranks are visited in order.
#[derive(Clone, Copy, Default)]
struct RunState {
    g: f64,
    h: f64,
    last: Option<u32>,
}

struct Scanner<'s> {
    feature: usize,
    values: &'s [f32],
    reg: &'s Reg,
    totals: &'s [(f64, f64)],
    best: Vec<Option<Candidate>>,
}

impl<'s> Scanner<'s> {
    fn new(feature: usize, values: &'s [f32], reg: &'s Reg, totals: &'s [(f64, f64)]) -> Self {
        Scanner {
            feature,
            values,
            reg,
            totals,
            best: vec![None; totals.len()],
        }
    }

    /// Scores the boundary below `rank`, then adds that rank's sums.
    fn step(&mut self, st: &mut RunState, s: usize, rank: u32, g: f64, h: f64) {
        if let Some(last) = st.last {
            let (tg, th) = self.totals[s];
            let mcw = self.reg.min_child_weight;
            if st.h >= mcw && th - st.h >= mcw {
                let gain = self.reg.gain(st.g, st.h, tg, th);
                let b = &mut self.best[s];
                if gain > 0.0 && b.map_or(true, |b| gain > b.gain) {
                    *b = Some(Candidate {
                        gain,
                        feature: self.feature,
                        threshold: (self.values[last as usize] as f64
                            + self.values[rank as usize] as f64)
                            / 2.0,
                        left_rank: last,
                    });
                }
            }
        }
        st.g += g;
        st.h += h;
        st.last = Some(rank);
    }
}

pub fn fit_gbdt(fm: &FeatureMatrix, hp: &GbdtHyperParams, seed: u64) -> Result<BoostedEnsemble> {
    GbdtTrainer::new(fm)?.fit_with(hp, seed, |_, _| ControlFlow::Continue(()))
}

/// Mean logistic loss of `ens` on `fm`, probabilities clamped to
/// `[1e-15, 1 - 1e-15]`.
pub fn logloss(ens: &BoostedEnsemble, fm: &FeatureMatrix) -> Result<f64> {
    let p = super::tree::predict_proba(ens, fm)?;
    let total: f64 = p
        .iter()
        .zip(fm.labels())
        .map(|(&p, l)| {
            let p = p.clamp(1e-15, 1.0 - 1e-15);
            if l.target() == 1.0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / fm.rows() as f64)
}
