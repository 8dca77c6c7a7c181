//! Comparison recommenders: item popularity, PMF rating order and disjoint
//! LinUCB over the users' embedding vectors.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::agent::sort_scored;
use crate::datasets::Dataset;
use crate::envloop::{OnlinePolicy, Ranker};
use crate::error::{Error, Result};
use crate::numkit::Scalar;
use crate::pmf::EmbeddingTable;
use crate::staterep::History;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopularityStrategy {
    AverageRating,
    PositiveCount,
}

impl PopularityStrategy {
    pub const ALL: [PopularityStrategy; 2] = [PopularityStrategy::AverageRating, PopularityStrategy::PositiveCount];

    pub fn as_str(self) -> &'static str {
        match self {
            PopularityStrategy::AverageRating => "avg_rating",
            PopularityStrategy::PositiveCount => "positive_count",
        }
    }
}

impl fmt::Display for PopularityStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PopularityStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PopularityStrategy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown popularity strategy {s:?}")))
    }
}

/// Per-item statistics from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    /// Mean training rating; the scale minimum for unrated items.
    pub average_rating: Vec<f64>,
    pub positive_count: Vec<u64>,
    pub strategy: PopularityStrategy,
}

impl PopularityModel {
    pub fn fit(train: &Dataset, strategy: PopularityStrategy) -> Self {
        let n = train.num_items;
        let mut sum = vec![0.0; n];
        let mut count = vec![0u64; n];
        let mut positive_count = vec![0u64; n];
        for e in &train.events {
            sum[e.item] += e.rating;
            count[e.item] += 1;
            if train.scale.is_positive(e.rating) {
                positive_count[e.item] += 1;
            }
        }
        let average_rating = sum
            .iter()
            .zip(&count)
            .map(|(&s, &c)| if c == 0 { train.scale.min_rating } else { s / c as f64 })
            .collect();
        PopularityModel { average_rating, positive_count, strategy }
    }

    pub fn statistic(&self, item: usize) -> f64 {
        match self.strategy {
            PopularityStrategy::AverageRating => self.average_rating.get(item).copied().unwrap_or(f64::MIN),
            PopularityStrategy::PositiveCount => self.positive_count.get(item).copied().unwrap_or(0) as f64,
        }
    }

    /// Highest statistic among the candidates; ties to the lower item id.
    pub fn recommend(&self, candidates: &[usize]) -> Result<usize> {
        Ok(self.rank_items(candidates)?[0])
    }

    fn rank_items(&self, candidates: &[usize]) -> Result<Vec<usize>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let mut scored: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, self.statistic(i))).collect();
        sort_scored(&mut scored);
        Ok(scored.into_iter().map(|x| x.0).collect())
    }
}

impl Ranker for PopularityModel {
    fn name(&self) -> String {
        format!("popularity_{}", self.strategy)
    }

    fn rank(&self, _user: usize, _history: &History, candidates: &[usize]) -> Result<Vec<usize>> {
        self.rank_items(candidates)
    }
}

/// Items ordered by the embedding table's predicted rating.
pub struct PmfRanker<'a, T> {
    pub tbl: &'a EmbeddingTable<T>,
}

impl<T: Scalar> PmfRanker<'_, T> {
    pub fn recommend(&self, user: usize, candidates: &[usize]) -> Result<usize> {
        Ok(self.rank_items(user, candidates)?[0])
    }

    fn rank_items(&self, user: usize, candidates: &[usize]) -> Result<Vec<usize>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let mut scored = candidates
            .iter()
            .map(|&i| Ok((i, self.tbl.predict_rating(user, i)?)))
            .collect::<Result<Vec<_>>>()?;
        sort_scored(&mut scored);
        Ok(scored.into_iter().map(|x| x.0).collect())
    }
}

impl<T: Scalar> Ranker for PmfRanker<'_, T> {
    fn name(&self) -> String {
        "pmf".into()
    }

    fn rank(&self, user: usize, _history: &History, candidates: &[usize]) -> Result<Vec<usize>> {
        self.rank_items(user, candidates)
    }
}

/// Ridge statistics of one arm. `a_inv` is kept directly and refreshed with
/// the Sherman-Morrison identity; `theta = a_inv * b` is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub a_inv: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
    pub pulls: u64,
}

impl Arm {
    fn new(d: usize) -> Self {
        let mut a_inv = vec![0.0; d * d];
        for i in 0..d {
            a_inv[i * d + i] = 1.0;
        }
        Arm { a_inv, b: vec![0.0; d], theta: vec![0.0; d], pulls: 0 }
    }

    fn quad(&self, x: &[f64]) -> f64 {
        let d = x.len();
        (0..d)
            .map(|r| x[r] * self.a_inv[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    fn update(&mut self, x: &[f64], reward: f64) {
        let d = x.len();
        let ax: Vec<f64> = (0..d)
            .map(|r| self.a_inv[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let denom = 1.0 + x.iter().zip(&ax).map(|(a, b)| a * b).sum::<f64>();
        for r in 0..d {
            for c in 0..d {
                self.a_inv[r * d + c] -= ax[r] * ax[c] / denom;
            }
        }
        for (bi, xi) in self.b.iter_mut().zip(x) {
            *bi += reward * xi;
        }
        self.theta = (0..d)
            .map(|r| self.a_inv[r * d..(r + 1) * d].iter().zip(&self.b).map(|(a, b)| a * b).sum())
            .collect();
        self.pulls += 1;
    }
}

/// Disjoint LinUCB with the user's embedding as context. Arms start at
/// `A = I, b = 0` and are allocated when first pulled.
#[derive(Debug, Clone)]
pub struct LinUcbModel<'a, T> {
    pub alpha: f64,
    tbl: &'a EmbeddingTable<T>,
    arms: HashMap<usize, Arm>,
    // x^T A_i^-1 x for the cached user, invalidated when an arm is updated
    cache_user: Option<usize>,
    quad_cache: HashMap<usize, f64>,
}

impl<'a, T: Scalar> LinUcbModel<'a, T> {
    pub fn new(tbl: &'a EmbeddingTable<T>, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("LinUCB alpha {alpha} must be >= 0")));
        }
        Ok(LinUcbModel { alpha, tbl, arms: HashMap::new(), cache_user: None, quad_cache: HashMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.tbl.k
    }

    pub fn arm(&self, item: usize) -> Option<&Arm> {
        self.arms.get(&item)
    }

    pub fn context(&self, user: usize) -> Result<Vec<f64>> {
        self.tbl.check_user(user)?;
        Ok(self.tbl.user(user).iter().map(|v| v.as_f64()).collect())
    }

    /// `theta_i . x + alpha * sqrt(x^T A_i^-1 x)` for every candidate.
    pub fn ucb_scores(&mut self, x: &[f64], user: Option<usize>, candidates: &[usize]) -> Vec<(usize, f64)> {
        if user.is_none() || self.cache_user != user {
            self.quad_cache.clear();
            self.cache_user = user;
        }
        let fresh = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        candidates
            .iter()
            .map(|&i| match self.arms.get(&i) {
                None => (i, self.alpha * fresh),
                Some(arm) => {
                    let q = *self.quad_cache.entry(i).or_insert_with(|| arm.quad(x));
                    let mean: f64 = arm.theta.iter().zip(x).map(|(a, b)| a * b).sum();
                    (i, mean + self.alpha * q.max(0.0).sqrt())
                }
            })
            .collect()
    }

    pub fn select(&mut self, x: &[f64], user: Option<usize>, candidates: &[usize]) -> Result<usize> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("context of length {} for d = {}", x.len(), self.dim())));
        }
        let mut scored = self.ucb_scores(x, user, candidates);
        sort_scored(&mut scored);
        Ok(scored[0].0)
    }

    /// `A_i += x x^T`, `b_i += r x`.
    pub fn update(&mut self, item: usize, x: &[f64], reward: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("context of length {} for d = {}", x.len(), self.dim())));
        }
        let d = self.dim();
        self.arms.entry(item).or_insert_with(|| Arm::new(d)).update(x, reward);
        self.quad_cache.remove(&item);
        Ok(())
    }
}

impl<T: Scalar> OnlinePolicy for LinUcbModel<'_, T> {
    fn name(&self) -> String {
        format!("linucb_{}", self.alpha)
    }

    /// Bandit statistics carry over between sessions.
    fn start_session(&mut self) -> Result<()> {
        Ok(())
    }

    fn choose(&mut self, user: usize, _history: &History, candidates: &[usize], _rng: &mut ChaCha8Rng) -> Result<usize> {
        let x = self.context(user)?;
        self.select(&x, Some(user), candidates)
    }

    fn observe(
        &mut self,
        user: usize,
        _history: &History,
        item: usize,
        reward: f64,
        _next_history: &History,
        _terminal: bool,
        _rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let x = self.context(user)?;
        self.update(item, &x, reward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{IdMaps, RatingEvent, RatingScale};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn dataset(events: &[(usize, usize, f64)], items: usize) -> Dataset {
        let events = events
            .iter()
            .enumerate()
            .map(|(t, &(user, item, rating))| RatingEvent { user, item, rating, timestamp: t as i64 })
            .collect();
        Dataset::new(events, 3, items, RatingScale::FIVE_STAR, Arc::new(IdMaps::default())).unwrap()
    }

    fn table(k: usize, items: usize) -> EmbeddingTable<f64> {
        EmbeddingTable::zeros(k, 1, items, 3.0, RatingScale::FIVE_STAR)
    }

    #[test]
    fn popularity_examples() {
        let ds = dataset(&[(0, 0, 5.0), (1, 0, 4.0), (2, 0, 4.0), (0, 1, 5.0), (1, 1, 2.0)], 3);
        let count = PopularityModel::fit(&ds, PopularityStrategy::PositiveCount);
        assert_eq!(count.recommend(&[1, 0]).unwrap(), 0);
        assert_eq!(count.rank_items(&[2, 1, 0]).unwrap(), vec![0, 1, 2]);
        let avg = PopularityModel::fit(&ds, PopularityStrategy::AverageRating);
        assert_eq!(avg.average_rating[2], 1.0);
        assert_eq!(avg.recommend(&[2, 1, 0]).unwrap(), 0);
        assert!(avg.recommend(&[]).is_err());
    }

    #[test]
    fn pmf_ranker_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tbl = table(3, 5);
        for v in tbl.item_vectors.iter_mut().chain(tbl.user_vectors.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        let ranker = PmfRanker { tbl: &tbl };
        let got = ranker.rank_items(0, &[4, 3, 2, 1, 0]).unwrap();
        let mut oracle: Vec<(usize, f64)> = (0..5)
            .map(|i| {
                let raw: f64 = 3.0 + (0..3).map(|f| tbl.user_vectors[f] * tbl.item_vectors[i * 3 + f]).sum::<f64>();
                (i, raw.clamp(1.0, 5.0))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(got, oracle.iter().map(|x| x.0).collect::<Vec<_>>());
        assert_eq!(ranker.recommend(0, &[3]).unwrap(), 3);
    }

    #[test]
    fn linucb_untrained_ties_break_by_id() {
        let tbl = table(2, 4);
        let mut m = LinUcbModel::new(&tbl, 0.0).unwrap();
        assert_eq!(m.select(&[0.3, 0.4], None, &[3, 1, 2]).unwrap(), 1);
        assert_eq!(m.select(&[0.3, 0.4], None, &[2]).unwrap(), 2);
        assert!(m.select(&[0.3, 0.4], None, &[]).is_err());
    }

    #[test]
    fn linucb_one_dimensional_ridge() {
        let tbl = table(1, 2);
        let mut m = LinUcbModel::new(&tbl, 0.0).unwrap();
        m.update(0, &[1.0], 1.0).unwrap();
        assert_eq!(m.arm(0).unwrap().theta, vec![0.5]);
        assert_eq!(m.select(&[1.0], None, &[0, 1]).unwrap(), 0);
    }

    #[test]
    fn linucb_converges_to_constant_reward() {
        let tbl = table(1, 1);
        let mut m = LinUcbModel::new(&tbl, 0.0).unwrap();
        for _ in 0..10_000 {
            m.update(0, &[1.0], 0.7).unwrap();
        }
        assert!((m.arm(0).unwrap().theta[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn linucb_inverse_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let tbl = table(d, 1);
        let mut m = LinUcbModel::new(&tbl, 0.5).unwrap();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = 1.0;
        }
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.update(0, &x, rng.random_range(-1.0..1.0)).unwrap();
            for r in 0..d {
                for c in 0..d {
                    a[r * d + c] += x[r] * x[c];
                }
            }
        }
        let inv = &m.arm(0).unwrap().a_inv;
        for r in 0..d {
            for c in 0..d {
                let prod: f64 = (0..d).map(|j| a[r * d + j] * inv[j * d + c]).sum();
                assert!((prod - if r == c { 1.0 } else { 0.0 }).abs() < 1e-9);
                assert!((inv[r * d + c] - inv[c * d + r]).abs() < 1e-12);
            }
        }
    }
}
