//! Multiclass gradient-boosted decision trees (second-order, exact greedy).

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{ClassProbabilities, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtHyperparams {
    pub max_depth: usize,
    pub eta: f64,
    pub gamma: f64,
    pub colsample_bytree: f64,
    pub min_child_weight: f64,
    pub subsample: f64,
    pub rounds: usize,
    pub lambda: f64,
}

impl Default for GbtHyperparams {
    fn default() -> Self {
        GbtHyperparams {
            max_depth: 6,
            eta: 0.2,
            gamma: 1.0,
            colsample_bytree: 0.9,
            min_child_weight: 20.0,
            subsample: 0.8,
            rounds: 60,
            lambda: 1.0,
        }
    }
}

/// Optimal leaf value `-G / (H + lambda)`.
pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

/// Loss reduction of splitting a node into (L, R), minus `gamma`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        leaf: f64,
        /// Hessian sum of the training rows that reached the leaf.
        cover: f64,
    },
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Leaf reached by `x`; non-finite values follow the default branch.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { leaf, .. } => return *leaf,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_finite() { v < *threshold } else { *default_left };
                    k = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match &t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    /// `(cover, is_root)` of every leaf.
    pub fn leaves(&self) -> Vec<(f64, bool)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(k, n)| match n {
                Node::Leaf { cover, .. } => Some((*cover, k == 0)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub hp: GbtHyperparams,
    pub classes: usize,
    pub num_features: usize,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    pub version: u32,
}

impl GbtModel {
    pub fn empty(hp: GbtHyperparams, num_features: usize) -> Self {
        GbtModel {
            hp,
            classes: NUM_CLASSES,
            num_features,
            trees: Vec::new(),
            version: 1,
        }
    }

    pub fn scores(&self, x: &[f64]) -> Result<[f64; NUM_CLASSES]> {
        if x.len() != self.num_features {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.num_features,
                x.len()
            )));
        }
        let mut s = [0.0; NUM_CLASSES];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(x);
            }
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GbtModel = serde_json::from_str(s)?;
        if m.version != 1 || m.classes != NUM_CLASSES || m.trees.iter().any(|r| r.len() != NUM_CLASSES) {
            return Err(Error::Shape("unsupported boosted-tree model".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn predict_gbt(m: &GbtModel, x: &[f64]) -> Result<ClassProbabilities> {
    Ok(ClassProbabilities::softmax(&m.scores(x)?))
}

/// Multiclass log loss of raw scores against labels.
pub fn log_loss(scores: &[[f64; NUM_CLASSES]], y: &[usize]) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(y)
        .map(|(s, &c)| -ClassProbabilities::softmax(s).0[c].max(1e-300).ln())
        .sum();
    total / y.len().max(1) as f64
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    order: &'a [Vec<usize>],
    g: &'a [f64],
    h: &'a [f64],
    hp: &'a GbtHyperparams,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
    hl: f64,
    hr: f64,
}

impl Grower<'_> {
    /// Grows one tree level by level over `rows` using the listed features.
    fn grow(&self, rows: &[usize], features: &[usize]) -> Tree {
        let n = self.x.len();
        let mut node_of: Vec<Option<usize>> = vec![None; n];
        for &r in rows {
            node_of[r] = Some(0);
        }
        let (g0, h0) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &r| (g + self.g[r], h + self.h[r]));
        // Per node: gradient sum, hessian sum.
        let mut sums = vec![(g0, h0)];
        let mut nodes: Vec<Option<Node>> = vec![None];
        let mut frontier = vec![0usize];
        let mut depth = 0;
        while !frontier.is_empty() {
            let mut best: Vec<Option<Best>> = vec![None; nodes.len()];
            if depth < self.hp.max_depth {
                let open: Vec<bool> = {
                    let mut v = vec![false; nodes.len()];
                    for &k in &frontier {
                        v[k] = true;
                    }
                    v
                };
                for &f in features {
                    // Running (GL, HL, last value) per node.
                    let mut scan: Vec<(f64, f64, Option<f64>)> = vec![(0.0, 0.0, None); nodes.len()];
                    for &r in &self.order[f] {
                        let Some(k) = node_of[r] else { continue };
                        if !open[k] {
                            continue;
                        }
                        let v = self.x[r][f];
                        let (gl, hl, last) = scan[k];
                        if let Some(last) = last {
                            if v > last {
                                let (gt, ht) = sums[k];
                                let (gr, hr) = (gt - gl, ht - hl);
                                if hl >= self.hp.min_child_weight && hr >= self.hp.min_child_weight {
                                    let gain =
                                        split_gain(gl, hl, gr, hr, self.hp.lambda, self.hp.gamma);
                                    if gain > 0.0 && best[k].map_or(true, |b| gain > b.gain) {
                                        let mid = last + (v - last) / 2.0;
                                        let threshold = if mid > last { mid } else { v };
                                        best[k] = Some(Best { gain, feature: f, threshold, hl, hr });
                                    }
                                }
                            }
                        }
                        scan[k] = (gl + self.g[r], hl + self.h[r], Some(v));
                    }
                }
            }
            let mut next = Vec::new();
            let mut children: Vec<Option<(usize, usize, usize, f64)>> = vec![None; nodes.len()];
            for &k in &frontier {
                match best[k] {
                    Some(b) => {
                        let left = nodes.len();
                        nodes.push(None);
                        nodes.push(None);
                        sums.push((0.0, 0.0));
                        sums.push((0.0, 0.0));
                        nodes[k] = Some(Node::Split {
                            feature: b.feature,
                            threshold: b.threshold,
                            default_left: b.hl >= b.hr,
                            left,
                            right: left + 1,
                            gain: b.gain,
                        });
                        children[k] = Some((b.feature, left, left + 1, b.threshold));
                        next.push(left);
                        next.push(left + 1);
                    }
                    None => {
                        let (g, h) = sums[k];
                        nodes[k] = Some(Node::Leaf {
                            leaf: self.hp.eta * leaf_weight(g, h, self.hp.lambda),
                            cover: h,
                        });
                    }
                }
            }
            for &r in rows {
                let Some(k) = node_of[r] else { continue };
                match children.get(k).copied().flatten() {
                    Some((f, left, right, thr)) => {
                        let c = if self.x[r][f] < thr { left } else { right };
                        node_of[r] = Some(c);
                        sums[c].0 += self.g[r];
                        sums[c].1 += self.h[r];
                    }
                    None => node_of[r] = None,
                }
            }
            frontier = next;
            depth += 1;
        }
        Tree {
            nodes: nodes.into_iter().map(|n| n.expect("every node resolved")).collect(),
        }
    }
}

fn validate_inputs(x: &[Vec<f64>], y: &[usize], hp: &GbtHyperparams) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::DegenerateData("no training rows".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("non-finite feature value".into()));
    }
    if let Some(&c) = y.iter().find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {c} out of range")));
    }
    if (x.len() as f64) < 2.0 * hp.min_child_weight {
        return Err(Error::DegenerateData(format!(
            "{} rows cannot satisfy min_child_weight {}",
            x.len(),
            hp.min_child_weight
        )));
    }
    Ok(d)
}

/// Trains the boosted ensemble; also returns the training log loss after
/// each round.
pub fn train_gbt_with_history(
    x: &[Vec<f64>],
    y: &[usize],
    hp: &GbtHyperparams,
    seed: u64,
) -> Result<(GbtModel, Vec<f64>)> {
    let d = validate_inputs(x, y, hp)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<Vec<usize>> = (0..d)
        .map(|f| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            o
        })
        .collect();
    let n_rows = ((hp.subsample * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((hp.colsample_bytree * d as f64).round() as usize).clamp(1, d);
    let mut scores = vec![[0.0; NUM_CLASSES]; n];
    let mut model = GbtModel::empty(*hp, d);
    let mut history = Vec::with_capacity(hp.rounds);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..hp.rounds {
        let probs: Vec<[f64; NUM_CLASSES]> =
            scores.iter().map(|s| ClassProbabilities::softmax(s).0).collect();
        let mut round = Vec::with_capacity(NUM_CLASSES);
        for c in 0..NUM_CLASSES {
            for i in 0..n {
                let p = probs[i][c];
                g[i] = p - (y[i] == c) as u8 as f64;
                h[i] = p * (1.0 - p);
            }
            let mut rows = sample(&mut rng, n, n_rows).into_vec();
            rows.sort_unstable();
            let mut cols = sample(&mut rng, d, n_cols).into_vec();
            cols.sort_unstable();
            let grower = Grower {
                x,
                order: &order,
                g: &g,
                h: &h,
                hp,
            };
            round.push(grower.grow(&rows, &cols));
        }
        for (s, row) in scores.iter_mut().zip(x) {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(row);
            }
        }
        model.trees.push(round);
        history.push(log_loss(&scores, y));
    }
    Ok((model, history))
}

pub fn train_gbt(x: &[Vec<f64>], y: &[usize], hp: &GbtHyperparams, seed: u64) -> Result<GbtModel> {
    train_gbt_with_history(x, y, hp, seed).map(|(m, _)| m)
}
