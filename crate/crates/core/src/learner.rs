//! Feature encoding and a CART classifier standing in for the user's
//! labeling function.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domains::DomainSpec;
use crate::error::{Error, Result};
use crate::mdp::Step;
use crate::sim_user::{LabeledTransition, MessageMask};

pub const TREE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

/// Column layout of encoded rows: state features, action, one bit per
/// message, and optionally the next state's features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub domain: String,
    pub catalog: Vec<String>,
    pub include_next: bool,
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(spec: &DomainSpec, include_next: bool) -> Self {
        let numeric = |name: String| FeatureSpec {
            name,
            kind: FeatureKind::Numeric,
        };
        let mut features: Vec<FeatureSpec> = spec
            .feature_decls()
            .iter()
            .map(|f| numeric(f.name.to_string()))
            .collect();
        features.push(FeatureSpec {
            name: "action".into(),
            kind: FeatureKind::Categorical,
        });
        features.extend(spec.messages().iter().map(|m| numeric(format!("msg:{}", m.id))));
        if include_next {
            features.extend(spec.feature_decls().iter().map(|f| numeric(format!("next:{}", f.name))));
        }
        FeatureSchema {
            domain: spec.name().to_string(),
            catalog: spec.messages().iter().map(|m| m.id.clone()).collect(),
            include_next,
            features,
        }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("schema serializes"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureRow {
    pub values: Vec<i64>,
    pub label: u8,
}

/// Encodes with the schema's column layout.
pub fn encode(spec: &DomainSpec, schema: &FeatureSchema, t: &LabeledTransition) -> Result<FeatureRow> {
    Ok(FeatureRow {
        values: encode_features(spec, schema, t.transition, &t.messages)?,
        label: t.label,
    })
}

pub fn encode_features(spec: &DomainSpec, schema: &FeatureSchema, t: Step, mask: &MessageMask) -> Result<Vec<i64>> {
    if schema.domain != spec.name() {
        return Err(Error::SchemaMismatch(format!(
            "schema for `{}` used with `{}`",
            schema.domain,
            spec.name()
        )));
    }
    if mask.width() != schema.catalog.len() {
        return Err(Error::SchemaMismatch(format!(
            "mask width {} but schema has {} messages",
            mask.width(),
            schema.catalog.len()
        )));
    }
    let n = spec.n_states();
    if t.state >= n || t.next >= n || t.action >= spec.actions().len() {
        return Err(Error::SchemaMismatch(format!("transition {t:?} outside the domain")));
    }
    let mut v = spec.state_features(t.state);
    v.push(t.action as i64);
    v.extend(mask.bits().iter().map(|&b| i64::from(b)));
    if schema.include_next {
        v.extend(spec.state_features(t.next));
    }
    debug_assert_eq!(v.len(), schema.width());
    Ok(v)
}

pub fn encode_all(spec: &DomainSpec, schema: &FeatureSchema, rows: &[LabeledTransition]) -> Result<Vec<FeatureRow>> {
    rows.iter().map(|t| encode(spec, schema, t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeHyper {
    /// Only `gini` is supported.
    pub criterion: Criterion,
    pub min_leaf: usize,
    /// `None` is unlimited.
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Gini,
}

impl Default for TreeHyper {
    fn default() -> Self {
        TreeHyper {
            criterion: Criterion::Gini,
            min_leaf: 1,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SplitTest {
    /// Numeric: left when `x <= threshold`.
    Le { threshold: f64 },
    /// Categorical one-vs-rest: left when `x == category`.
    Eq { category: i64 },
}

impl SplitTest {
    fn goes_left(&self, x: i64) -> bool {
        match *self {
            SplitTest::Le { threshold } => (x as f64) <= threshold,
            SplitTest::Eq { category } => x == category,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        test: SplitTest,
        left: usize,
        right: usize,
    },
    Leaf {
        label: u8,
        /// Training counts of labels 0 and 1.
        counts: [usize; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionTree {
    pub schema_version: u32,
    pub schema_hash: String,
    pub schema: FeatureSchema,
    pub hyper: TreeHyper,
    pub seed: u64,
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn predict(&self, values: &[i64]) -> Result<u8> {
        if values.len() != self.schema.width() {
            return Err(Error::SchemaMismatch(format!(
                "row has {} features, tree expects {}",
                values.len(),
                self.schema.width()
            )));
        }
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { label, .. } => return Ok(*label),
                Node::Split {
                    feature,
                    test,
                    left,
                    right,
                } => {
                    at = if test.goes_left(values[*feature]) {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Hex SHA-256 over the node list and hyperparameters.
    pub fn structure_hash(&self) -> String {
        let bytes = serde_json::to_vec(&(&self.hyper, &self.nodes)).expect("tree serializes");
        sha256_hex(&bytes)
    }

    /// Errors unless the tree was trained for this schema.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch(format!(
                "tree schema {} does not match {}",
                short(&self.schema_hash),
                short(&schema.hash())
            )));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn predict(tree: &DecisionTree, row: &FeatureRow) -> Result<u8> {
    tree.predict(&row.values)
}

pub fn accuracy(tree: &DecisionTree, rows: &[FeatureRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut hits = 0;
    for r in rows {
        if tree.predict(&r.values)? == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Greedy CART with Gini impurity.
///
/// Splits are tried in order of feature index and then threshold (or
/// category); the first best gain wins. Zero-gain splits are taken while a
/// node is impure, so labels that depend jointly on several features are
/// still separated.
pub fn train_tree(rows: &[FeatureRow], schema: &FeatureSchema, hyper: TreeHyper, seed: u64) -> Result<DecisionTree> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if hyper.min_leaf == 0 {
        return Err(Error::Config("min_leaf must be at least 1".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.values.len() != schema.width() || r.label > 1) {
        return Err(Error::SchemaMismatch(format!(
            "row with {} features and label {} does not fit the schema ({} features)",
            bad.values.len(),
            bad.label,
            schema.width()
        )));
    }
    let kinds: Vec<FeatureKind> = schema.features.iter().map(|f| f.kind).collect();
    let mut nodes = Vec::new();
    let idx: Vec<usize> = (0..rows.len()).collect();
    grow(rows, &kinds, hyper, idx, 0, &mut nodes);
    Ok(DecisionTree {
        schema_version: TREE_SCHEMA_VERSION,
        schema_hash: schema.hash(),
        schema: schema.clone(),
        hyper,
        seed,
        nodes,
    })
}

fn counts(rows: &[FeatureRow], idx: &[usize]) -> [usize; 2] {
    let ones = idx.iter().filter(|&&i| rows[i].label == 1).count();
    [idx.len() - ones, ones]
}

fn gini(c: [usize; 2]) -> f64 {
    let n = (c[0] + c[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p = c[1] as f64 / n;
    2.0 * p * (1.0 - p)
}

/// Majority label; ties go to explicable.
fn majority(c: [usize; 2]) -> u8 {
    u8::from(c[1] >= c[0])
}

fn grow(
    rows: &[FeatureRow],
    kinds: &[FeatureKind],
    hyper: TreeHyper,
    idx: Vec<usize>,
    depth: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    let c = counts(rows, &idx);
    let leaf = Node::Leaf {
        label: majority(c),
        counts: c,
    };
    nodes.push(leaf.clone());
    if c[0] == 0 || c[1] == 0 || hyper.max_depth.is_some_and(|d| depth >= d) {
        return id;
    }
    let Some((feature, test)) = best_split(rows, kinds, hyper.min_leaf, &idx, c) else {
        return id;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| test.goes_left(rows[i].values[feature]));
    let left = grow(rows, kinds, hyper, l, depth + 1, nodes);
    let right = grow(rows, kinds, hyper, r, depth + 1, nodes);
    nodes[id] = Node::Split {
        feature,
        test,
        left,
        right,
    };
    id
}

/// Gains closer than this count as ties.
const GAIN_TIE: f64 = 1e-12;

fn best_split(
    rows: &[FeatureRow],
    kinds: &[FeatureKind],
    min_leaf: usize,
    idx: &[usize],
    total: [usize; 2],
) -> Option<(usize, SplitTest)> {
    let n = idx.len();
    let parent = gini(total);
    let mut best: Option<(f64, usize, SplitTest)> = None;
    let mut consider = |gain: f64, f: usize, test: SplitTest, left: [usize; 2]| {
        let nl = left[0] + left[1];
        if nl < min_leaf || n - nl < min_leaf {
            return;
        }
        if best.as_ref().is_none_or(|(g, _, _)| gain > *g + GAIN_TIE) {
            best = Some((gain, f, test));
        }
    };
    for (f, kind) in kinds.iter().enumerate() {
        // per distinct value: label counts, ascending by value
        let mut by_value: Vec<(i64, [usize; 2])> = {
            let mut m: HashMap<i64, [usize; 2]> = HashMap::new();
            for &i in idx {
                m.entry(rows[i].values[f]).or_default()[rows[i].label as usize] += 1;
            }
            m.into_iter().collect()
        };
        if by_value.len() < 2 {
            continue;
        }
        by_value.sort_unstable_by_key(|(v, _)| *v);
        let gain_of = |left: [usize; 2]| {
            let right = [total[0] - left[0], total[1] - left[1]];
            let nl = (left[0] + left[1]) as f64;
            let nr = (right[0] + right[1]) as f64;
            parent - (nl * gini(left) + nr * gini(right)) / n as f64
        };
        match kind {
            FeatureKind::Numeric => {
                let mut left = [0, 0];
                for w in by_value.windows(2) {
                    left[0] += w[0].1[0];
                    left[1] += w[0].1[1];
                    let threshold = (w[0].0 as f64 + w[1].0 as f64) / 2.0;
                    consider(gain_of(left), f, SplitTest::Le { threshold }, left);
                }
            }
            FeatureKind::Categorical => {
                for &(category, left) in &by_value {
                    consider(gain_of(left), f, SplitTest::Eq { category }, left);
                }
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

/// Fraction of rows whose feature vector also occurs with the other label.
pub fn conflict_rate(rows: &[FeatureRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut seen: HashMap<&[i64], [bool; 2]> = HashMap::new();
    for r in rows {
        seen.entry(&r.values).or_default()[r.label as usize] = true;
    }
    let conflicted = rows
        .iter()
        .filter(|r| seen[r.values.as_slice()] == [true, true])
        .count();
    conflicted as f64 / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub fold_accuracy: Vec<f64>,
}

/// Stratified k-fold cross-validation with a seeded shuffle.
pub fn cross_validate(
    rows: &[FeatureRow],
    schema: &FeatureSchema,
    hyper: TreeHyper,
    k: usize,
    seed: u64,
) -> Result<CvReport> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > rows.len() {
        return Err(Error::InsufficientData(format!("{k} folds over {} rows", rows.len())));
    }
    let folds = stratified_folds(rows, k, seed);
    let fold_accuracy = folds
        .iter()
        .map(|test| {
            let in_test: std::collections::HashSet<usize> = test.iter().copied().collect();
            let train: Vec<FeatureRow> = (0..rows.len())
                .filter(|i| !in_test.contains(i))
                .map(|i| rows[i].clone())
                .collect();
            let held: Vec<FeatureRow> = test.iter().map(|&i| rows[i].clone()).collect();
            let tree = train_tree(&train, schema, hyper, seed)?;
            accuracy(&tree, &held)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_accuracy = fold_accuracy.iter().sum::<f64>() / k as f64;
    Ok(CvReport {
        k,
        seed,
        mean_accuracy,
        fold_accuracy,
    })
}

/// Row indices per fold. Each class is shuffled and dealt round-robin, the
/// deal continuing across classes so fold sizes differ by at most one.
pub fn stratified_folds(rows: &[FeatureRow], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut deal = 0;
    for label in [0u8, 1] {
        let mut class: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label == label).collect();
        class.shuffle(&mut rng);
        for i in class {
            folds[deal % k].push(i);
            deal += 1;
        }
    }
    folds
}

/// How much of the shuffled data is held out for testing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSplit {
    Fraction(f64),
    Count(usize),
    /// Everything beyond the largest training size.
    Remainder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub train_size: usize,
    pub test_size: usize,
    pub test_accuracy: f64,
}

/// Test accuracy for nested training prefixes against one held-out set.
pub fn training_curve(
    rows: &[FeatureRow],
    schema: &FeatureSchema,
    hyper: TreeHyper,
    sizes: &[usize],
    split: TestSplit,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let max = sizes.iter().copied().max().unwrap_or(0);
    let n_test = match split {
        TestSplit::Fraction(f) if (0.0..1.0).contains(&f) => (rows.len() as f64 * f).round() as usize,
        TestSplit::Fraction(f) => return Err(Error::Config(format!("test fraction {f} outside [0, 1)"))),
        TestSplit::Count(n) => n,
        TestSplit::Remainder => rows.len().saturating_sub(max),
    };
    if n_test == 0 || max + n_test > rows.len() {
        return Err(Error::InsufficientData(format!(
            "need {max} training and {n_test} (>0) test rows, have {}",
            rows.len()
        )));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: Vec<FeatureRow> = order[rows.len() - n_test..].iter().map(|&i| rows[i].clone()).collect();
    sizes
        .iter()
        .map(|&size| {
            if size == 0 {
                return Err(Error::Config("training size must be positive".into()));
            }
            let train: Vec<FeatureRow> = order[..size].iter().map(|&i| rows[i].clone()).collect();
            let tree = train_tree(&train, schema, hyper, seed)?;
            Ok(CurvePoint {
                train_size: size,
                test_size: n_test,
                test_accuracy: accuracy(&tree, &test)?,
            })
        })
        .collect()
}
