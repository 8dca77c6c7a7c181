//! Mean-centred matrix factorisation trained by SGD.
//!
//! The resulting [`EmbeddingTable`] provides the frozen user/item vectors fed
//! to the agent and doubles as the rating simulator for online evaluation.
//! Note that using the same table for both roles favours policies that agree
//! with the factorisation; treat simulated rewards accordingly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::{Dataset, RatingScale};
use crate::error::{Error, Result};
use crate::numkit::Scalar;

/// Pretrained user and item vectors plus the global mean offset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub k: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// Row-major `num_users x k`.
    pub user_vectors: Vec<T>,
    /// Row-major `num_items x k`.
    pub item_vectors: Vec<T>,
    pub global_mean: T,
    pub min_rating: T,
    pub max_rating: T,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(k: usize, num_users: usize, num_items: usize, global_mean: T, scale: RatingScale) -> Self {
        EmbeddingTable {
            k,
            num_users,
            num_items,
            user_vectors: vec![T::zero(); num_users * k],
            item_vectors: vec![T::zero(); num_items * k],
            global_mean,
            min_rating: T::of(scale.min_rating),
            max_rating: T::of(scale.max_rating),
        }
    }

    pub fn user(&self, u: usize) -> &[T] {
        &self.user_vectors[u * self.k..(u + 1) * self.k]
    }

    pub fn item(&self, i: usize) -> &[T] {
        &self.item_vectors[i * self.k..(i + 1) * self.k]
    }

    pub fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.num_users {
            return Err(Error::IdOutOfRange { what: "user", id: u, count: self.num_users });
        }
        Ok(())
    }

    pub fn check_item(&self, i: usize) -> Result<()> {
        if i >= self.num_items {
            return Err(Error::IdOutOfRange { what: "item", id: i, count: self.num_items });
        }
        Ok(())
    }

    /// Unclamped `mu + U_u . V_i`.
    pub fn raw_score(&self, u: usize, i: usize) -> T {
        self.global_mean + dot(self.user(u), self.item(i))
    }

    /// `mu + U_u . V_i`, clamped to the rating scale.
    pub fn predict_rating(&self, u: usize, i: usize) -> Result<T> {
        self.check_user(u)?;
        self.check_item(i)?;
        Ok(self.raw_score(u, i).max(self.min_rating).min(self.max_rating))
    }

    pub fn is_finite(&self) -> bool {
        self.global_mean.is_finite()
            && self.user_vectors.iter().all(|v| v.is_finite())
            && self.item_vectors.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmfConfig {
    pub k: usize,
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialisation.
    pub init_scale: f64,
}

impl Default for PmfConfig {
    fn default() -> Self {
        PmfConfig {
            k: 100,
            learning_rate: 0.005,
            l2_lambda: 0.02,
            epochs: 30,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl PmfConfig {
    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.epochs == 0 || !(self.l2_lambda >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid PMF config {self:?}")));
        }
        Ok(())
    }
}

/// Gaussian-initialised table, exactly as training starts from it.
pub fn init_table<T: Scalar>(train: &Dataset, cfg: &PmfConfig) -> Result<EmbeddingTable<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_with(train, cfg, &mut rng)
}

fn init_with<T: Scalar>(train: &Dataset, cfg: &PmfConfig, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable<T>> {
    let normal = Normal::new(0.0, cfg.init_scale)
        .map_err(|e| Error::InvalidArgument(format!("init_scale: {e}")))?;
    let mut tbl = EmbeddingTable::zeros(
        cfg.k,
        train.num_users,
        train.num_items,
        T::of(train.mean_rating()),
        train.scale,
    );
    for v in tbl.user_vectors.iter_mut().chain(tbl.item_vectors.iter_mut()) {
        *v = T::of(normal.sample(rng));
    }
    Ok(tbl)
}

/// Regularised training objective
/// `sum (r - mu - U_u.V_i)^2 + lambda (|U|^2 + |V|^2)`.
pub fn objective<T: Scalar>(tbl: &EmbeddingTable<T>, ds: &Dataset, l2_lambda: f64) -> f64 {
    let sq: f64 = ds
        .events
        .iter()
        .map(|e| {
            let err = e.rating - tbl.raw_score(e.user, e.item).as_f64();
            err * err
        })
        .sum();
    let reg: f64 = tbl
        .user_vectors
        .iter()
        .chain(&tbl.item_vectors)
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    sq + l2_lambda * reg
}

/// Root-mean-square error of the clamped prediction over `ds`.
pub fn rmse<T: Scalar>(tbl: &EmbeddingTable<T>, ds: &Dataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let sq: f64 = ds
        .events
        .iter()
        .map(|e| {
            let p = tbl
                .predict_rating(e.user, e.item)
                .map(Scalar::as_f64)
                .unwrap_or(f64::NAN);
            (e.rating - p).powi(2)
        })
        .sum();
    (sq / ds.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmfReport {
    /// Objective after each epoch.
    pub epoch_objective: Vec<f64>,
}

pub fn train_pmf<T: Scalar>(train: &Dataset, cfg: &PmfConfig) -> Result<EmbeddingTable<T>> {
    train_pmf_with_report(train, cfg).map(|(tbl, _)| tbl)
}

/// SGD over shuffled observed entries. Aborts when the objective becomes
/// non-finite or rises by more than 5% between epochs.
pub fn train_pmf_with_report<T: Scalar>(
    train: &Dataset,
    cfg: &PmfConfig,
) -> Result<(EmbeddingTable<T>, PmfReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("PMF training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tbl: EmbeddingTable<T> = init_with(train, cfg, &mut rng)?;
    let (lr, lambda) = (T::of(cfg.learning_rate), T::of(cfg.l2_lambda));
    let k = cfg.k;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = PmfReport {
        epoch_objective: Vec::with_capacity(cfg.epochs),
    };
    let mut prev = objective(&tbl, train, cfg.l2_lambda);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let e = &train.events[idx];
            let err = T::of(e.rating) - tbl.raw_score(e.user, e.item);
            let (uo, io) = (e.user * k, e.item * k);
            for f in 0..k {
                let u = tbl.user_vectors[uo + f];
                let v = tbl.item_vectors[io + f];
                tbl.user_vectors[uo + f] = u + lr * (err * v - lambda * u);
                tbl.item_vectors[io + f] = v + lr * (err * u - lambda * v);
            }
        }
        let obj = objective(&tbl, train, cfg.l2_lambda);
        if !obj.is_finite() || !tbl.is_finite() {
            return Err(Error::Diverged { epoch, loss: obj });
        }
        if obj > prev * 1.05 {
            log::error!("PMF objective rose from {prev} to {obj} at epoch {epoch}");
            return Err(Error::Diverged { epoch, loss: obj });
        }
        if obj > prev * 1.01 {
            log::warn!("PMF objective rose from {prev} to {obj} at epoch {epoch}");
        }
        log::debug!("pmf epoch {epoch}: objective {obj:.4}");
        report.epoch_objective.push(obj);
        prev = obj;
    }
    Ok((tbl, report))
}

const MAGIC: &[u8; 8] = b"DRREMBED";
const VERSION: u8 = 1;

/// Binary layout, all little-endian:
///
/// ```text
/// 0   8 bytes  magic "DRREMBED"
/// 8   u8       version (1)
/// 9   u64      k
/// 17  u64      number of users
/// 25  u64      number of items
/// 33  f64      global mean
/// 41  f64      minimum rating
/// 49  f64      maximum rating
/// 57  f64 * users * k   user matrix, row-major
///     f64 * items * k   item matrix, row-major
/// ```
pub fn save_embeddings<T: Scalar>(tbl: &EmbeddingTable<T>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&encode_embeddings(tbl))?;
    out.flush()?;
    Ok(())
}

pub fn encode_embeddings<T: Scalar>(tbl: &EmbeddingTable<T>) -> Vec<u8> {
    let floats = tbl.user_vectors.len() + tbl.item_vectors.len();
    let mut buf = Vec::with_capacity(57 + 8 * floats);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for n in [tbl.k, tbl.num_users, tbl.num_items] {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for x in [tbl.global_mean, tbl.min_rating, tbl.max_rating]
        .iter()
        .chain(&tbl.user_vectors)
        .chain(&tbl.item_vectors)
    {
        buf.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    buf
}

pub fn load_embeddings<T: Scalar>(path: &Path) -> Result<EmbeddingTable<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_embeddings(&bytes)
}

pub fn decode_embeddings<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingTable<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad embedding magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!("unsupported embedding version {version}")));
    }
    let k = r.u64()? as usize;
    let num_users = r.u64()? as usize;
    let num_items = r.u64()? as usize;
    let expected = (3 + (num_users + num_items) * k) * 8;
    if r.remaining() != expected {
        return Err(Error::Format(format!(
            "header declares k={k}, {num_users} users, {num_items} items ({expected} payload bytes) but {} remain",
            r.remaining()
        )));
    }
    let global_mean = T::of(r.f64()?);
    let min_rating = T::of(r.f64()?);
    let max_rating = T::of(r.f64()?);
    let user_vectors = (0..num_users * k).map(|_| r.f64().map(T::of)).collect::<Result<_>>()?;
    let item_vectors = (0..num_items * k).map(|_| r.f64().map(T::of)).collect::<Result<_>>()?;
    Ok(EmbeddingTable {
        k,
        num_users,
        num_items,
        user_vectors,
        item_vectors,
        global_mean,
        min_rating,
        max_rating,
    })
}

/// Cursor over a byte slice for the little-endian file formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "truncated payload: need {n} bytes at offset {}, {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
