//! Rating and social data: TSV ingestion, filtering, splits, RMSE and a
//! synthetic generator whose social ties correlate user preferences.
//!
//! File formats (one record per line, `#` starts a comment line):
//!
//! ```text
//! ratings: user<TAB>item<TAB>rating
//! social:  user<TAB>user[<TAB>weight]
//! ```
//!
//! Ids are arbitrary strings. After filtering they are mapped to dense
//! integers in order of first appearance; the mapping is kept on the dataset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::recommender::Rating;
use crate::sparsela::SparseMatrix;

pub const DEFAULT_MIN_INTERACTIONS: usize = 15;
pub const RATING_MIN: f64 = 0.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RatingDataset {
    pub m: usize,
    pub n: usize,
    pub ratings: Vec<Rating>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocialDataset {
    pub m: usize,
    /// Sorted by `(user, user)`, duplicates already summed.
    pub edges: Vec<(usize, usize, f64)>,
}

impl SocialDataset {
    pub fn from_edges(m: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let s = SparseMatrix::from_triplets(m, m, edges)?;
        Ok(SocialDataset { m, edges: s.iter().collect() })
    }

    pub fn nnz(&self) -> usize {
        self.edges.len()
    }

    pub fn to_sparse(&self) -> SparseMatrix<f64> {
        SparseMatrix::from_triplets(self.m, self.m, self.edges.iter().copied()).expect("edges are in range")
    }
}

/// One raw rating line before filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub value: f64,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn parse_value(field: &str, line: usize, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse { line, msg: format!("{what} '{field}' is not a number") })
}

/// Parses ratings TSV. Duplicate `(user, item)` pairs keep the last value.
pub fn parse_ratings(text: &str) -> Result<Vec<RawRating>> {
    let mut out: Vec<RawRating> = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let mut duplicates = 0usize;
    for (line, l) in data_lines(text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse { line, msg: format!("expected 3 tab-separated fields, found {}", fields.len()) });
        }
        let value = parse_value(fields[2], line, "rating")?;
        if !(RATING_MIN..=RATING_MAX).contains(&value) {
            return Err(Error::Validation(format!("line {line}: rating {value} outside [0, 5]")));
        }
        let key = (fields[0].trim().to_string(), fields[1].trim().to_string());
        match seen.get(&key) {
            Some(&idx) => {
                out[idx].value = value;
                duplicates += 1;
            }
            None => {
                seen.insert(key.clone(), out.len());
                out.push(RawRating { user: key.0, item: key.1, value });
            }
        }
    }
    if duplicates > 0 {
        info!("ratings: {duplicates} duplicate (user, item) lines; last value kept");
    }
    Ok(out)
}

/// Parses social TSV into `(user, user, weight)` with weight defaulting to 1.
pub fn parse_social(text: &str) -> Result<Vec<(String, String, f64)>> {
    data_lines(text)
        .map(|(line, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            let weight = match fields.len() {
                2 => 1.0,
                3 => parse_value(fields[2], line, "weight")?,
                n => return Err(Error::Parse { line, msg: format!("expected 2 or 3 tab-separated fields, found {n}") }),
            };
            Ok((fields[0].trim().to_string(), fields[1].trim().to_string(), weight))
        })
        .collect()
}

/// Drops users and items with fewer than `min` ratings, repeating until no
/// more are removed.
pub fn filter_to_fixpoint(mut ratings: Vec<RawRating>, min: usize) -> Vec<RawRating> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &ratings {
            *users.entry(&r.user).or_default() += 1;
            *items.entry(&r.item).or_default() += 1;
        }
        let keep: Vec<bool> = ratings.iter().map(|r| users[r.user.as_str()] >= min && items[r.item.as_str()] >= min).collect();
        if keep.iter().all(|&k| k) {
            return ratings;
        }
        let mut it = keep.into_iter();
        ratings.retain(|_| it.next().expect("one flag per rating"));
    }
}

/// Filters, reindexes and restricts the social pairs to surviving users.
pub fn preprocess(
    raw_ratings: Vec<RawRating>,
    raw_social: &[(String, String, f64)],
    min_interactions: usize,
) -> Result<(RatingDataset, SocialDataset)> {
    let before = raw_ratings.len();
    let kept = filter_to_fixpoint(raw_ratings, min_interactions);
    info!("filtering at {min_interactions} interactions kept {} of {before} ratings", kept.len());
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut ratings = Vec::with_capacity(kept.len());
    for r in kept {
        let u = *user_index.entry(r.user.clone()).or_insert_with(|| {
            user_ids.push(r.user.clone());
            user_ids.len() - 1
        });
        let i = *item_index.entry(r.item.clone()).or_insert_with(|| {
            item_ids.push(r.item.clone());
            item_ids.len() - 1
        });
        ratings.push((u, i, r.value));
    }
    let m = user_ids.len();
    let edges = raw_social
        .iter()
        .filter_map(|(a, b, w)| Some((*user_index.get(a)?, *user_index.get(b)?, *w)));
    let social = SocialDataset::from_edges(m, edges)?;
    Ok((RatingDataset { m, n: item_ids.len(), ratings, user_ids, item_ids }, social))
}

pub fn load(ratings_path: &Path, social_path: &Path, min_interactions: usize) -> Result<(RatingDataset, SocialDataset)> {
    let ratings = parse_ratings(&fs::read_to_string(ratings_path)?)?;
    let social = parse_social(&fs::read_to_string(social_path)?)?;
    preprocess(ratings, &social, min_interactions)
}

/// Writes ratings as TSV with `header` lines emitted as `#` comments.
pub fn ratings_to_tsv(data: &RatingDataset, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for &(u, i, r) in &data.ratings {
        let _ = writeln!(out, "{}\t{}\t{}", data.user_ids[u], data.item_ids[i], r);
    }
    out
}

/// Social TSV using the dataset's user ids.
pub fn social_to_tsv(social: &SocialDataset, user_ids: &[String], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for &(a, b, w) in &social.edges {
        let _ = writeln!(out, "{}\t{}\t{}", user_ids[a], user_ids[b], w);
    }
    out
}

/// Dense-id mapping as TSV: `kind<TAB>index<TAB>original id`.
pub fn id_mapping_tsv(data: &RatingDataset) -> String {
    let mut out = String::from("# kind\tindex\tid\n");
    for (i, id) in data.user_ids.iter().enumerate() {
        let _ = writeln!(out, "user\t{i}\t{id}");
    }
    for (i, id) in data.item_ids.iter().enumerate() {
        let _ = writeln!(out, "item\t{i}\t{id}");
    }
    out
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::usage(format!(
            "rmse needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub m: usize,
    pub n: usize,
    pub k_true: usize,
    /// Social density; the generated S has exactly `round(alpha * m^2)`
    /// directed edges (capped at `m * (m - 1)`, no self-loops).
    pub alpha_social: f64,
    pub noise_sd: f64,
    /// Probability that a given (user, item) pair is rated.
    pub rating_density: f64,
    /// Weight of the friends' mean in each user's latent vector.
    pub blend: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { m: 20, n: 30, k_true: 3, alpha_social: 0.1, noise_sd: 0.3, rating_density: 0.3, blend: 0.8, seed: 0 }
    }
}

impl SynthConfig {
    pub fn edge_count(&self) -> usize {
        let t = (self.alpha_social * (self.m * self.m) as f64).round() as usize;
        t.min(self.m * self.m.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k_true == 0 {
            return Err(Error::Config("m, n and k_true must be positive".into()));
        }
        if !(self.alpha_social > 0.0 && self.alpha_social <= 1.0) {
            return Err(Error::Config(format!("alpha_social must lie in (0, 1], got {}", self.alpha_social)));
        }
        if !(self.rating_density > 0.0 && self.rating_density <= 1.0) {
            return Err(Error::Config(format!("rating_density must lie in (0, 1], got {}", self.rating_density)));
        }
        if !(self.noise_sd >= 0.0 && (0.0..=1.0).contains(&self.blend)) {
            return Err(Error::Config("noise_sd must be >= 0 and blend in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Synthetic ratings whose latent user vectors are pulled towards their
/// friends', so the social graph carries preference information.
pub fn synth(cfg: &SynthConfig) -> Result<(RatingDataset, SocialDataset)> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (m, n, k) = (cfg.m, cfg.n, cfg.k_true);

    // exactly t distinct off-diagonal pairs
    let t = cfg.edge_count();
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(t);
    if t * 2 > m * (m - 1) {
        let mut all: Vec<(usize, usize)> = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).filter(|(a, b)| a != b).collect();
        all.shuffle(&mut rng);
        edges.extend_from_slice(&all[..t]);
    } else {
        let mut seen = HashSet::with_capacity(t);
        while edges.len() < t {
            let (a, b) = (rng.gen_range(0..m), rng.gen_range(0..m));
            if a != b && seen.insert((a, b)) {
                edges.push((a, b));
            }
        }
    }

    // uT v has unit variance for unit-variance entries scaled by k^(-1/4)
    let sd = (k as f64).powf(-0.25);
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let own: Vec<Vec<f64>> = (0..m).map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect()).collect();
    let items: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mut friends: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &(a, b) in &edges {
        friends[a].push(b);
        friends[b].push(a);
    }
    let users: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            if friends[i].is_empty() {
                return own[i].clone();
            }
            (0..k)
                .map(|f| {
                    let mean = friends[i].iter().map(|&p| own[p][f]).sum::<f64>() / friends[i].len() as f64;
                    (1.0 - cfg.blend) * own[i][f] + cfg.blend * mean
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let mut ratings = Vec::new();
    for (i, u) in users.iter().enumerate() {
        for (j, v) in items.iter().enumerate() {
            if rng.gen_bool(cfg.rating_density) {
                let clean = 2.5 + u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                // quantized to 1e-6 so TSV output round-trips exactly
                let r = ((clean + eps).clamp(RATING_MIN, RATING_MAX) * 1e6).round() / 1e6;
                ratings.push((i, j, r));
            }
        }
    }
    let data = RatingDataset {
        m,
        n,
        ratings,
        user_ids: (0..m).map(|i| format!("u{i}")).collect(),
        item_ids: (0..n).map(|j| format!("i{j}")).collect(),
    };
    let social = SocialDataset::from_edges(m, edges.into_iter().map(|(a, b)| (a, b, 1.0)))?;
    Ok((data, social))
}

/// Keeps each social pair independently with probability `rate`.
pub fn sample_social(s: &SocialDataset, rate: f64, seed: u64) -> Result<SocialDataset> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::usage(format!("sampling rate must lie in (0, 1], got {rate}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let edges = s.edges.iter().copied().filter(|_| rate >= 1.0 || rng.gen_bool(rate)).collect();
    Ok(SocialDataset { m: s.m, edges })
}

/// Seeded partition of rating indices into folds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    folds: usize,
    assignment: Vec<usize>,
}

impl FoldSplit {
    pub const DEFAULT_FOLDS: usize = 5;

    pub fn new(count: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::usage("need at least two folds"));
        }
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let mut assignment = vec![0; count];
        for (pos, &idx) in order.iter().enumerate() {
            assignment[idx] = pos % folds;
        }
        Ok(FoldSplit { folds, assignment })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    /// `(train, test)` index sets for `fold`.
    pub fn indices(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] != fold)
    }

    pub fn split(&self, ratings: &[Rating], fold: usize) -> (Vec<Rating>, Vec<Rating>) {
        let (train, test) = self.indices(fold);
        (train.iter().map(|&i| ratings[i]).collect(), test.iter().map(|&i| ratings[i]).collect())
    }
}

/// Per-user and per-item rating counts.
pub fn interaction_counts(data: &RatingDataset) -> (Vec<usize>, Vec<usize>) {
    let mut users = vec![0; data.m];
    let mut items = vec![0; data.n];
    for &(u, i, _) in &data.ratings {
        users[u] += 1;
        items[i] += 1;
    }
    (users, items)
}

/// Raw form of a processed dataset, for re-filtering.
pub fn to_raw(data: &RatingDataset) -> Vec<RawRating> {
    data.ratings
        .iter()
        .map(|&(u, i, value)| RawRating { user: data.user_ids[u].clone(), item: data.item_ids[i].clone(), value })
        .collect()
}

/// Ratings keyed by original ids, for comparisons that ignore reindexing.
pub fn keyed_ratings(data: &RatingDataset) -> BTreeMap<(String, String), f64> {
    to_raw(data).into_iter().map(|r| ((r.user, r.item), r.value)).collect()
}
