//! Logged bandit data, policy families and the seeded synthetic environments.
//!
//! Every generator draws from a ChaCha8 stream selected by `(seed, stream)`,
//! so a [`ScenarioSpec`] fully determines its dataset.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::PointSet;

/// Counter-based generator for `(seed, stream)`. Streams are independent
/// ChaCha8 streams under one key.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Scalar(f64),
    /// Ordered list of distinct item indices.
    List(Vec<usize>),
}

impl Action {
    pub fn as_scalar(&self) -> Result<f64> {
        match self {
            Action::Scalar(a) => Ok(*a),
            Action::List(_) => Err(Error::UnsupportedAction(
                "expected a scalar action, found an item list".into(),
            )),
        }
    }
}

/// Item feature table, `M` rows of dimension `d`.
pub type Catalog = Arc<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Continuous,
    ItemLists {
        list_len: usize,
        /// Absent when a dataset was read back from CSV.
        catalog: Option<Catalog>,
    },
}

impl ActionSpace {
    pub fn feature_dim(&self) -> Result<usize> {
        match self {
            ActionSpace::Continuous => Ok(1),
            ActionSpace::ItemLists { catalog, .. } => {
                let cat = catalog_or_err(catalog)?;
                Ok(cat.first().map(Vec::len).unwrap_or(0))
            }
        }
    }

    /// Feature vector of an action: the scalar itself, or the mean item vector
    /// of a list. The click model sees a list only through that mean.
    pub fn features(&self, a: &Action, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        match (self, a) {
            (ActionSpace::Continuous, Action::Scalar(v)) => out.push(*v),
            (ActionSpace::ItemLists { list_len, catalog }, Action::List(items)) => {
                let cat = catalog_or_err(catalog)?;
                if items.len() != *list_len {
                    return Err(Error::DimensionMismatch {
                        expected: *list_len,
                        found: items.len(),
                    });
                }
                out.resize(cat.first().map_or(0, Vec::len), 0.0);
                let k = items.len() as f64;
                for &m in items {
                    let row = cat.get(m).ok_or_else(|| {
                        Error::UnsupportedAction(format!("item {m} outside catalog of {}", cat.len()))
                    })?;
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v / k;
                    }
                }
            }
            _ => {
                return Err(Error::UnsupportedAction(
                    "action does not belong to this action space".into(),
                ))
            }
        }
        Ok(())
    }
}

fn catalog_or_err(catalog: &Option<Catalog>) -> Result<&Catalog> {
    catalog.as_ref().ok_or_else(|| {
        Error::config("item-list actions need the item catalog; regenerate the dataset from its scenario")
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub covariates: PointSet,
    pub actions: Vec<Action>,
    pub outcomes: Vec<f64>,
    pub action_space: ActionSpace,
}

impl LoggedDataset {
    pub fn new(
        covariates: PointSet,
        actions: Vec<Action>,
        outcomes: Vec<f64>,
        action_space: ActionSpace,
    ) -> Result<Self> {
        let n = covariates.len();
        if actions.len() != n || outcomes.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if actions.len() != n {
                    actions.len()
                } else {
                    outcomes.len()
                },
            });
        }
        if covariates.as_slice().iter().chain(&outcomes).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logged dataset"));
        }
        for a in &actions {
            match (a, &action_space) {
                (Action::Scalar(v), ActionSpace::Continuous) => {
                    if !v.is_finite() {
                        return Err(Error::NonFinite("logged action"));
                    }
                }
                (Action::List(items), ActionSpace::ItemLists { list_len, catalog }) => {
                    if items.len() != *list_len {
                        return Err(Error::DimensionMismatch {
                            expected: *list_len,
                            found: items.len(),
                        });
                    }
                    if !all_distinct(items) {
                        return Err(Error::UnsupportedAction(format!(
                            "item list {items:?} repeats an item"
                        )));
                    }
                    if let Some(cat) = catalog {
                        if items.iter().any(|&m| m >= cat.len()) {
                            return Err(Error::UnsupportedAction(format!(
                                "item list {items:?} outside catalog of {}",
                                cat.len()
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::UnsupportedAction(
                        "action kind does not match the action space".into(),
                    ))
                }
            }
        }
        Ok(Self {
            covariates,
            actions,
            outcomes,
            action_space,
        })
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.dim()
    }

    pub fn covariate(&self, i: usize) -> &[f64] {
        self.covariates.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            covariates: self.covariates.select(idx),
            actions: idx.iter().map(|&i| self.actions[i].clone()).collect(),
            outcomes: idx.iter().map(|&i| self.outcomes[i]).collect(),
            action_space: self.action_space.clone(),
        }
    }

    /// Rows `[lo, hi)`.
    pub fn slice(&self, lo: usize, hi: usize) -> Self {
        let idx: Vec<usize> = (lo..hi).collect();
        self.subset(&idx)
    }

    pub fn scalar_actions(&self) -> Result<Vec<f64>> {
        self.actions.iter().map(Action::as_scalar).collect()
    }

    pub fn action_features(&self) -> Result<PointSet> {
        let dim = self.action_space.feature_dim()?;
        let mut data = Vec::with_capacity(self.len() * dim);
        let mut buf = Vec::with_capacity(dim);
        for a in &self.actions {
            self.action_space.features(a, &mut buf)?;
            data.extend_from_slice(&buf);
        }
        PointSet::new(data, dim)
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = (0..self.dim()).map(|j| format!("x_{j}")).collect();
        match &self.action_space {
            ActionSpace::Continuous => h.push("a".into()),
            ActionSpace::ItemLists { list_len, .. } => {
                h.extend((0..*list_len).map(|k| format!("a_{k}")))
            }
        }
        h.push("y".into());
        h
    }

    /// CSV with header `x_0,..,x_{d-1},a,y` (or `a_0,..,a_{K-1}` for item
    /// lists). Floats use the shortest representation that round-trips.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.header())?;
        let mut rec: Vec<String> = Vec::new();
        for i in 0..self.len() {
            rec.clear();
            rec.extend(self.covariate(i).iter().map(|v| format!("{v:?}")));
            match &self.actions[i] {
                Action::Scalar(a) => rec.push(format!("{a:?}")),
                Action::List(items) => rec.extend(items.iter().map(|m| m.to_string())),
            }
            rec.push(format!("{:?}", self.outcomes[i]));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the format written by [`LoggedDataset::write_csv`]. Item-list
    /// datasets come back without their catalog.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let d = cols.iter().take_while(|c| c.starts_with("x_")).count();
        let expect_header = |col: usize, msg: String| Error::Parse {
            line: 1,
            column: col + 1,
            message: msg,
        };
        for (j, c) in cols.iter().take(d).enumerate() {
            if *c != format!("x_{j}") {
                return Err(expect_header(j, format!("expected x_{j}, found {c}")));
            }
        }
        if d == 0 {
            return Err(expect_header(0, "no covariate columns".into()));
        }
        if cols.last() != Some(&"y") {
            return Err(expect_header(cols.len().saturating_sub(1), "last column must be y".into()));
        }
        let action_cols = &cols[d..cols.len() - 1];
        let list_len = match action_cols {
            ["a"] => None,
            cs if !cs.is_empty() && cs.iter().enumerate().all(|(k, c)| *c == format!("a_{k}")) => {
                Some(cs.len())
            }
            _ => return Err(expect_header(d, "expected action column `a` or `a_0..`".into())),
        };

        let mut x = Vec::new();
        let mut actions = Vec::new();
        let mut y = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    column: rec.len().min(cols.len()) + 1,
                    message: format!("expected {} fields, found {}", cols.len(), rec.len()),
                });
            }
            let parse_f = |j: usize| -> Result<f64> {
                let s = rec.get(j).unwrap_or("");
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    column: j + 1,
                    message: format!("`{s}`: {e}"),
                })
            };
            for j in 0..d {
                x.push(parse_f(j)?);
            }
            match list_len {
                None => actions.push(Action::Scalar(parse_f(d)?)),
                Some(k) => {
                    let mut items = Vec::with_capacity(k);
                    for j in d..d + k {
                        let s = rec.get(j).unwrap_or("");
                        items.push(s.trim().parse::<usize>().map_err(|e| Error::Parse {
                            line,
                            column: j + 1,
                            message: format!("`{s}`: {e}"),
                        })?);
                    }
                    actions.push(Action::List(items));
                }
            }
            y.push(parse_f(cols.len() - 1)?);
        }
        let space = match list_len {
            None => ActionSpace::Continuous,
            Some(k) => ActionSpace::ItemLists {
                list_len: k,
                catalog: None,
            },
        };
        Self::new(PointSet::new(x, d)?, actions, y, space)
    }
}

fn all_distinct(items: &[usize]) -> bool {
    items
        .iter()
        .enumerate()
        .all(|(i, m)| !items[..i].contains(m))
}

/// A conditional action law that can be evaluated at `(a, x)`.
pub trait ConditionalDensity {
    fn density(&self, a: &Action, x: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub w: Vec<f64>,
    pub sd: f64,
}

/// Plackett-Luce list policy: items are drawn without replacement with
/// probabilities proportional to `exp(b_j . v_l)` for the user `j` whose
/// features equal the covariates.
#[derive(Clone)]
pub struct ItemListPolicy {
    users: Arc<Vec<Vec<f64>>>,
    params: Arc<Vec<Vec<f64>>>,
    items: Catalog,
    list_len: usize,
    index: Arc<HashMap<Vec<u64>, usize>>,
}

impl std::fmt::Debug for ItemListPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ItemListPolicy")
            .field("users", &self.users.len())
            .field("items", &self.items.len())
            .field("list_len", &self.list_len)
            .finish()
    }
}

impl PartialEq for ItemListPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.list_len == other.list_len
            && self.users == other.users
            && self.params == other.params
            && self.items == other.items
    }
}

fn bits_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

/// Ordered lists are enumerated only below this count.
const MAX_ENUMERATED_LISTS: usize = 200_000;

impl ItemListPolicy {
    pub fn new(
        users: Arc<Vec<Vec<f64>>>,
        params: Vec<Vec<f64>>,
        items: Catalog,
        list_len: usize,
    ) -> Result<Self> {
        if users.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: users.len(),
                found: params.len(),
            });
        }
        if list_len == 0 || list_len > items.len() {
            return Err(Error::config(format!(
                "list length {list_len} must be in [1, {}]",
                items.len()
            )));
        }
        let d = items.first().map(Vec::len).unwrap_or(0);
        if params.iter().chain(users.iter()).any(|p| p.len() != d) {
            return Err(Error::config("user and item features must share a dimension"));
        }
        let index = users
            .iter()
            .enumerate()
            .map(|(j, u)| (bits_key(u), j))
            .collect();
        Ok(Self {
            users,
            params: Arc::new(params),
            items,
            list_len,
            index: Arc::new(index),
        })
    }

    pub fn users(&self) -> &Arc<Vec<Vec<f64>>> {
        &self.users
    }

    pub fn items(&self) -> &Catalog {
        &self.items
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    pub fn user_index(&self, x: &[f64]) -> Result<usize> {
        self.index
            .get(&bits_key(x))
            .copied()
            .ok_or_else(|| Error::UnsupportedAction("covariates do not match any known user".into()))
    }

    /// Log-weights `b_j . v_l` for every item.
    fn scores(&self, user: usize) -> Vec<f64> {
        let b = &self.params[user];
        self.items
            .iter()
            .map(|v| v.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect()
    }

    pub fn mass(&self, items: &[usize], x: &[f64]) -> Result<f64> {
        let user = self.user_index(x)?;
        if items.len() != self.list_len {
            return Err(Error::DimensionMismatch {
                expected: self.list_len,
                found: items.len(),
            });
        }
        if let Some(&m) = items.iter().find(|&&m| m >= self.items.len()) {
            return Err(Error::UnsupportedAction(format!("item {m} outside catalog")));
        }
        if !all_distinct(items) {
            return Ok(0.0);
        }
        let scores = self.scores(user);
        let mut taken = vec![false; scores.len()];
        let mut log_mass = 0.0;
        for &m in items {
            let lse = log_sum_exp(scores.iter().zip(&taken).filter(|(_, t)| !**t).map(|(s, _)| *s));
            log_mass += scores[m] - lse;
            taken[m] = true;
        }
        Ok(log_mass.exp())
    }

    fn sample_list<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<usize>> {
        let user = self.user_index(x)?;
        let scores = self.scores(user);
        let mut taken = vec![false; scores.len()];
        let mut out = Vec::with_capacity(self.list_len);
        for _ in 0..self.list_len {
            let max = scores
                .iter()
                .zip(&taken)
                .filter(|(_, t)| !**t)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores
                .iter()
                .zip(&taken)
                .map(|(s, t)| if *t { 0.0 } else { (s - max).exp() })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (m, w) in weights.iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                pick = Some(m);
                if u < *w {
                    break;
                }
                u -= w;
            }
            let m = pick.expect("at least one item remains");
            taken[m] = true;
            out.push(m);
        }
        Ok(out)
    }

    fn enumerate_lists(&self, x: &[f64]) -> Result<Vec<(Action, f64)>> {
        let m = self.items.len();
        let count = (0..self.list_len).fold(1usize, |acc, k| acc.saturating_mul(m - k));
        if count > MAX_ENUMERATED_LISTS {
            return Err(Error::NotEnumerable(format!(
                "{count} ordered lists of length {} from {m} items",
                self.list_len
            )));
        }
        let mut out = Vec::with_capacity(count);
        let mut current = Vec::with_capacity(self.list_len);
        self.enumerate_rec(&mut current, x, &mut out)?;
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        current: &mut Vec<usize>,
        x: &[f64],
        out: &mut Vec<(Action, f64)>,
    ) -> Result<()> {
        if current.len() == self.list_len {
            let p = self.mass(current, x)?;
            out.push((Action::List(current.clone()), p));
            return Ok(());
        }
        for m in 0..self.items.len() {
            if current.contains(&m) {
                continue;
            }
            current.push(m);
            self.enumerate_rec(current, x, out)?;
            current.pop();
        }
        Ok(())
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    max + it.map(|s| (s - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// `a ~ N(x.w, sd^2)`.
    GaussianLinear { w: Vec<f64>, sd: f64 },
    GaussianMixture { components: Vec<MixtureComponent> },
    /// `a ~ Logistic(x.w, scale)`.
    LogisticLinear { w: Vec<f64>, scale: f64 },
    /// Context-free uniform law on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Context-free finite law over scalar actions. Repeated support points
    /// pool their mass.
    Categorical { support: Vec<f64>, probs: Vec<f64> },
    MultinomialList(ItemListPolicy),
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn normal_pdf(a: f64, mean: f64, sd: f64) -> f64 {
    let z = (a - mean) / sd;
    INV_SQRT_2PI / sd * (-0.5 * z * z).exp()
}

fn dot(x: &[f64], w: &[f64]) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: x.len(),
        });
    }
    Ok(x.iter().zip(w).map(|(a, b)| a * b).sum())
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            Policy::GaussianLinear { sd, .. } => positive(*sd, "policy sd"),
            Policy::LogisticLinear { scale, .. } => positive(*scale, "logistic scale"),
            Policy::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(Error::config("mixture needs at least one component"));
                }
                let mut total = 0.0;
                for c in components {
                    positive(c.sd, "mixture component sd")?;
                    if !(c.weight >= 0.0) {
                        return Err(Error::config("mixture weights must be nonnegative"));
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("mixture weights sum to {total}, not 1")));
                }
                Ok(())
            }
            Policy::Uniform { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo < hi {
                    Ok(())
                } else {
                    Err(Error::config(format!("uniform policy needs lo < hi, got [{lo}, {hi}]")))
                }
            }
            Policy::Categorical { support, probs } => {
                if support.is_empty() || support.len() != probs.len() {
                    return Err(Error::config("categorical policy needs matching support and probs"));
                }
                let total: f64 = probs.iter().sum();
                if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::config("categorical probabilities must be a distribution"));
                }
                Ok(())
            }
            Policy::MultinomialList(_) => Ok(()),
        }
    }

    /// Density (continuous families) or probability mass (finite families).
    pub fn density(&self, a: &Action, x: &[f64]) -> Result<f64> {
        self.validate()?;
        match self {
            Policy::MultinomialList(p) => match a {
                Action::List(items) => p.mass(items, x),
                Action::Scalar(_) => Err(Error::UnsupportedAction(
                    "list policy evaluated at a scalar action".into(),
                )),
            },
            _ => {
                let a = a.as_scalar()?;
                Ok(match self {
                    Policy::GaussianLinear { w, sd } => normal_pdf(a, dot(x, w)?, *sd),
                    Policy::GaussianMixture { components } => {
                        let mut p = 0.0;
                        for c in components {
                            p += c.weight * normal_pdf(a, dot(x, &c.w)?, c.sd);
                        }
                        p
                    }
                    Policy::LogisticLinear { w, scale } => {
                        let z = ((a - dot(x, w)?) / scale).abs();
                        let e = (-z).exp();
                        e / (scale * (1.0 + e) * (1.0 + e))
                    }
                    Policy::Uniform { lo, hi } => {
                        if a >= *lo && a <= *hi {
                            1.0 / (hi - lo)
                        } else {
                            0.0
                        }
                    }
                    Policy::Categorical { support, probs } => support
                        .iter()
                        .zip(probs)
                        .filter(|(s, _)| **s == a)
                        .map(|(_, p)| p)
                        .sum(),
                    Policy::MultinomialList(_) => unreachable!(),
                })
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Action> {
        self.validate()?;
        Ok(match self {
            Policy::GaussianLinear { w, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                Action::Scalar(dot(x, w)? + sd * z)
            }
            Policy::GaussianMixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = components.last().expect("validated");
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                let z: f64 = rng.sample(StandardNormal);
                Action::Scalar(dot(x, &chosen.w)? + chosen.sd * z)
            }
            Policy::LogisticLinear { w, scale } => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                Action::Scalar(dot(x, w)? + scale * (u / (1.0 - u)).ln())
            }
            Policy::Uniform { lo, hi } => Action::Scalar(rng.random_range(*lo..=*hi)),
            Policy::Categorical { support, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = *support.last().expect("validated");
                for (s, p) in support.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        pick = *s;
                        break;
                    }
                }
                Action::Scalar(pick)
            }
            Policy::MultinomialList(p) => Action::List(p.sample_list(x, rng)?),
        })
    }

    /// All actions with positive mass at `x`, for finite policies.
    pub fn enumerate(&self, x: &[f64]) -> Result<Vec<(Action, f64)>> {
        self.validate()?;
        match self {
            Policy::Categorical { support, probs } => Ok(support
                .iter()
                .zip(probs)
                .filter(|(_, p)| **p > 0.0)
                .map(|(s, p)| (Action::Scalar(*s), *p))
                .collect()),
            Policy::MultinomialList(p) => p.enumerate_lists(x),
            _ => Err(Error::NotEnumerable("continuous action policy".into())),
        }
    }

    /// Number of actions with possibly positive mass, for finite policies.
    pub fn enumeration_size(&self) -> Option<usize> {
        match self {
            Policy::Categorical { support, .. } => Some(support.len()),
            Policy::MultinomialList(p) => {
                let m = p.items.len();
                Some((0..p.list_len).fold(1usize, |acc, k| acc.saturating_mul(m - k)))
            }
            _ => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Policy::Categorical { .. } | Policy::MultinomialList(_))
    }

    /// Mean action at `x` for scalar continuous families.
    pub fn mean_action(&self, x: &[f64]) -> Result<f64> {
        match self {
            Policy::GaussianLinear { w, .. } | Policy::LogisticLinear { w, .. } => dot(x, w),
            Policy::GaussianMixture { components } => {
                let mut m = 0.0;
                for c in components {
                    m += c.weight * dot(x, &c.w)?;
                }
                Ok(m)
            }
            Policy::Uniform { lo, hi } => Ok(0.5 * (lo + hi)),
            Policy::Categorical { support, probs } => {
                Ok(support.iter().zip(probs).map(|(s, p)| s * p).sum())
            }
            Policy::MultinomialList(_) => Err(Error::UnsupportedAction(
                "list policies have no scalar mean".into(),
            )),
        }
    }
}

impl ConditionalDensity for Policy {
    fn density(&self, a: &Action, x: &[f64]) -> Result<f64> {
        Policy::density(self, a, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    TestI,
    TestII,
    TestIII,
    TestIV,
    HerdLogisticNonlinear,
    HerdLogisticQuadratic,
    HerdUniformNonlinear,
    HerdUniformQuadratic,
    OpeRecommend,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 9] = [
        ScenarioKind::TestI,
        ScenarioKind::TestII,
        ScenarioKind::TestIII,
        ScenarioKind::TestIV,
        ScenarioKind::HerdLogisticNonlinear,
        ScenarioKind::HerdLogisticQuadratic,
        ScenarioKind::HerdUniformNonlinear,
        ScenarioKind::HerdUniformQuadratic,
        ScenarioKind::OpeRecommend,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::TestI => "I",
            ScenarioKind::TestII => "II",
            ScenarioKind::TestIII => "III",
            ScenarioKind::TestIV => "IV",
            ScenarioKind::HerdLogisticNonlinear => "logistic-nonlinear",
            ScenarioKind::HerdLogisticQuadratic => "logistic-quadratic",
            ScenarioKind::HerdUniformNonlinear => "uniform-nonlinear",
            ScenarioKind::HerdUniformQuadratic => "uniform-quadratic",
            ScenarioKind::OpeRecommend => "ope-recommend",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = key.strip_prefix("test").unwrap_or(&key).trim_start_matches(['-', '_']);
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(key))
            .or(match key {
                "1" => Some(ScenarioKind::TestI),
                "2" => Some(ScenarioKind::TestII),
                "3" => Some(ScenarioKind::TestIII),
                "4" => Some(ScenarioKind::TestIV),
                "ope" | "recommend" => Some(ScenarioKind::OpeRecommend),
                _ => None,
            })
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}`")))
    }

    pub fn is_test(&self) -> bool {
        matches!(
            self,
            ScenarioKind::TestI | ScenarioKind::TestII | ScenarioKind::TestIII | ScenarioKind::TestIV
        )
    }

    pub fn is_herding(&self) -> bool {
        matches!(
            self,
            ScenarioKind::HerdLogisticNonlinear
                | ScenarioKind::HerdLogisticQuadratic
                | ScenarioKind::HerdUniformNonlinear
                | ScenarioKind::HerdUniformQuadratic
        )
    }
}

/// Full description of one synthetic environment draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// Replication stream under `seed`.
    #[serde(default)]
    pub stream: u64,
    /// Outcome noise standard deviation.
    pub noise_sd: f64,
    /// Treatment effect in the linear test outcome.
    pub gamma: f64,
    /// Shift `delta` of the alternative policy weights (Scenarios II and IV).
    pub shift: f64,
    /// Half-distance between the Scenario III mixture components.
    pub mixture_shift: f64,
    /// Coefficients cycled over rows by index: row `i` uses `beta_grid[i % len]`.
    pub beta_grid: Vec<f64>,
    /// Constant added to test outcomes.
    #[serde(default)]
    pub intercept: f64,
    /// Logging-to-target similarity for the recommendation scenario.
    pub alpha: f64,
    pub n_items: usize,
    pub n_users: usize,
    pub list_len: usize,
}

pub const DEFAULT_BETA_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Herding environments: uniform logging support.
pub const HERD_UNIFORM_RANGE: (f64, f64) = (-2.0, 2.0);
/// Herding environments: logistic logging scale.
pub const HERD_LOGISTIC_SCALE: f64 = 0.5;
/// Herding environments: the target policy is `N(x.w * TARGET_GAIN, TARGET_SD^2)`.
pub const HERD_TARGET_GAIN: f64 = 0.5;
pub const HERD_TARGET_SD: f64 = 0.5;

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            d: if kind == ScenarioKind::OpeRecommend { 10 } else { 5 },
            seed,
            stream: 0,
            noise_sd: 1.0,
            gamma: 1.0,
            shift: 2.0,
            mixture_shift: 1.0,
            beta_grid: DEFAULT_BETA_GRID.to_vec(),
            intercept: 0.0,
            alpha: -1.0,
            n_items: 20,
            n_users: 100,
            list_len: 4,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("d must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd must be nonnegative"));
        }
        if self.beta_grid.is_empty() {
            return Err(Error::config("beta grid must be nonempty"));
        }
        if self.kind == ScenarioKind::OpeRecommend {
            if !(-1.0..=1.0).contains(&self.alpha) {
                return Err(Error::config(format!("alpha {} outside [-1, 1]", self.alpha)));
            }
            if self.n_users == 0 || self.n_items == 0 {
                return Err(Error::config("need at least one user and one item"));
            }
            if self.list_len == 0 || self.list_len > self.n_items {
                return Err(Error::config("list length must be in [1, n_items]"));
            }
        }
        Ok(())
    }

    /// Base weight vector `w = 1_d / sqrt(d)`.
    pub fn base_weights(&self) -> Vec<f64> {
        vec![1.0 / (self.d as f64).sqrt(); self.d]
    }

    fn beta(&self, i: usize) -> f64 {
        self.beta_grid[i % self.beta_grid.len()]
    }
}

/// A generated environment: logged data plus the policies under study.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub data: LoggedDataset,
    pub logging: Policy,
    pub target: Policy,
    /// Second policy for the test scenarios.
    pub alternative: Option<Policy>,
}

fn shifted(w: &[f64], by: f64) -> Vec<f64> {
    w.iter().map(|v| v + by).collect()
}

fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Outcome model for the continuous-action scenarios. `i` selects the cycled
/// coefficient.
fn continuous_outcome<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    x: &[f64],
    a: f64,
    i: usize,
    rng: &mut R,
) -> f64 {
    let xb = spec.beta(i) * x.iter().sum::<f64>();
    let eps: f64 = rng.sample(StandardNormal);
    let noise = spec.noise_sd * eps;
    match spec.kind {
        ScenarioKind::TestI | ScenarioKind::TestII | ScenarioKind::TestIII | ScenarioKind::TestIV => {
            spec.intercept + xb + spec.gamma * a + noise
        }
        ScenarioKind::HerdLogisticNonlinear | ScenarioKind::HerdUniformNonlinear => {
            xb.sin() + a * a + noise
        }
        ScenarioKind::HerdLogisticQuadratic | ScenarioKind::HerdUniformQuadratic => {
            xb * xb + a * a + noise
        }
        ScenarioKind::OpeRecommend => unreachable!("recommendation outcomes use click_outcome"),
    }
}

/// Click model: `theta = 1 / (1 + exp(-abar.x + eps))`.
fn click_probability(items: &[Vec<f64>], list: &[usize], x: &[f64], eps: f64) -> f64 {
    let k = list.len() as f64;
    let mut score = 0.0;
    for &m in list {
        score += items[m].iter().zip(x).map(|(v, u)| v * u).sum::<f64>();
    }
    1.0 / (1.0 + (-(score / k) + eps).exp())
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, spec.stream);
    if spec.kind == ScenarioKind::OpeRecommend {
        return generate_recommendation(spec, &mut rng);
    }
    let w = spec.base_weights();
    let gaussian = |w: Vec<f64>| Policy::GaussianLinear { w, sd: 1.0 };
    let (logging, target, alternative) = match spec.kind {
        ScenarioKind::TestI => (gaussian(w.clone()), gaussian(w.clone()), Some(gaussian(w.clone()))),
        ScenarioKind::TestII => (
            gaussian(w.clone()),
            gaussian(w.clone()),
            Some(gaussian(shifted(&w, spec.shift))),
        ),
        ScenarioKind::TestIII => (
            gaussian(w.clone()),
            gaussian(w.clone()),
            Some(Policy::GaussianMixture {
                components: vec![
                    MixtureComponent {
                        weight: 0.5,
                        w: shifted(&w, spec.mixture_shift),
                        sd: 1.0,
                    },
                    MixtureComponent {
                        weight: 0.5,
                        w: shifted(&w, -spec.mixture_shift),
                        sd: 1.0,
                    },
                ],
            }),
        ),
        ScenarioKind::TestIV => (
            gaussian(w.clone()),
            gaussian(w.clone()),
            Some(Policy::GaussianMixture {
                components: vec![
                    MixtureComponent {
                        weight: 0.5,
                        w: shifted(&w, spec.shift),
                        sd: 1.0,
                    },
                    MixtureComponent {
                        weight: 0.5,
                        w: w.clone(),
                        sd: 1.0,
                    },
                ],
            }),
        ),
        _ => {
            let logging = match spec.kind {
                ScenarioKind::HerdUniformNonlinear | ScenarioKind::HerdUniformQuadratic => {
                    Policy::Uniform {
                        lo: HERD_UNIFORM_RANGE.0,
                        hi: HERD_UNIFORM_RANGE.1,
                    }
                }
                _ => Policy::LogisticLinear {
                    w: w.clone(),
                    scale: HERD_LOGISTIC_SCALE,
                },
            };
            let target = Policy::GaussianLinear {
                w: w.iter().map(|v| v * HERD_TARGET_GAIN).collect(),
                sd: HERD_TARGET_SD,
            };
            (logging, target, None)
        }
    };

    let n = spec.n;
    let mut xs = Vec::with_capacity(n * spec.d);
    let mut actions = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let x = standard_normal_vec(spec.d, &mut rng);
        let a = logging.sample(&x, &mut rng)?.as_scalar()?;
        let y = continuous_outcome(spec, &x, a, i, &mut rng);
        xs.extend_from_slice(&x);
        actions.push(Action::Scalar(a));
        ys.push(y);
    }
    let data = LoggedDataset::new(
        PointSet::new(xs, spec.d)?,
        actions,
        ys,
        ActionSpace::Continuous,
    )?;
    Ok(Scenario {
        spec: spec.clone(),
        data,
        logging,
        target,
        alternative,
    })
}

fn generate_recommendation<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Scenario> {
    let d = spec.d;
    let users: Arc<Vec<Vec<f64>>> =
        Arc::new((0..spec.n_users).map(|_| standard_normal_vec(d, rng)).collect());
    let items: Catalog = Arc::new((0..spec.n_items).map(|_| standard_normal_vec(d, rng)).collect());
    let target_params: Vec<Vec<f64>> = users
        .iter()
        .map(|x| {
            x.iter()
                .map(|v| if rng.random_bool(0.5) { *v } else { 0.0 })
                .collect()
        })
        .collect();
    let logging_params: Vec<Vec<f64>> = target_params
        .iter()
        .map(|b| b.iter().map(|v| spec.alpha * v).collect())
        .collect();
    let target = Policy::MultinomialList(ItemListPolicy::new(
        users.clone(),
        target_params,
        items.clone(),
        spec.list_len,
    )?);
    let logging = Policy::MultinomialList(ItemListPolicy::new(
        users.clone(),
        logging_params,
        items.clone(),
        spec.list_len,
    )?);

    let mut xs = Vec::with_capacity(spec.n * d);
    let mut actions = Vec::with_capacity(spec.n);
    let mut ys = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let j = rng.random_range(0..spec.n_users);
        let x = &users[j];
        let a = logging.sample(x, rng)?;
        let y = click_outcome(spec, &items, &a, x, rng)?;
        xs.extend_from_slice(x);
        actions.push(a);
        ys.push(y);
    }
    let data = LoggedDataset::new(
        PointSet::new(xs, d)?,
        actions,
        ys,
        ActionSpace::ItemLists {
            list_len: spec.list_len,
            catalog: Some(items),
        },
    )?;
    Ok(Scenario {
        spec: spec.clone(),
        data,
        logging,
        target,
        alternative: None,
    })
}

fn click_outcome<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    items: &[Vec<f64>],
    a: &Action,
    x: &[f64],
    rng: &mut R,
) -> Result<f64> {
    let Action::List(list) = a else {
        return Err(Error::UnsupportedAction("recommendation needs item lists".into()));
    };
    let eps: f64 = rng.sample(StandardNormal);
    let theta = click_probability(items, list, x, spec.noise_sd * eps);
    Ok(if rng.random::<f64>() < theta { 1.0 } else { 0.0 })
}

/// Outcomes drawn directly under `policy`, for evaluation only. Rows cycle the
/// outcome coefficients in the same way as the logged data.
pub fn oracle_outcomes<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    policy: &Policy,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(m);
    if spec.kind == ScenarioKind::OpeRecommend {
        let Policy::MultinomialList(p) = policy else {
            return Err(Error::UnsupportedAction(
                "recommendation oracle needs an item-list policy".into(),
            ));
        };
        for _ in 0..m {
            let j = rng.random_range(0..p.users().len());
            let x = p.users()[j].clone();
            let a = policy.sample(&x, rng)?;
            out.push(click_outcome(spec, p.items(), &a, &x, rng)?);
        }
        return Ok(out);
    }
    for i in 0..m {
        let x = standard_normal_vec(spec.d, rng);
        let a = policy.sample(&x, rng)?.as_scalar()?;
        out.push(continuous_outcome(spec, &x, a, i, rng));
    }
    Ok(out)
}

/// Expected click rate under `policy`, averaging the click probability rather
/// than Bernoulli draws.
pub fn recommendation_value<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    policy: &Policy,
    m: usize,
    rng: &mut R,
) -> Result<f64> {
    let Policy::MultinomialList(p) = policy else {
        return Err(Error::UnsupportedAction(
            "recommendation value needs an item-list policy".into(),
        ));
    };
    let mut total = 0.0;
    for _ in 0..m {
        let j = rng.random_range(0..p.users().len());
        let x = &p.users()[j];
        let Action::List(list) = policy.sample(x, rng)? else {
            unreachable!()
        };
        let eps: f64 = rng.sample(StandardNormal);
        total += click_probability(p.items(), &list, x, spec.noise_sd * eps);
    }
    Ok(total / m as f64)
}
