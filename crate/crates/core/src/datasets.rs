//! Rating-log ingestion, canonical form, random splits, per-user sessions and
//! the consecutive-run rating analysis.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Bounds of a rating scale and the rule separating positive feedback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingScale {
    pub min_rating: f64,
    pub max_rating: f64,
    pub positive_threshold: f64,
    /// When set, positive means `rating > threshold`, otherwise `>=`.
    pub strict: bool,
}

impl RatingScale {
    /// 1..5 stars, 4 and 5 are positive.
    pub const FIVE_STAR: RatingScale = RatingScale {
        min_rating: 1.0,
        max_rating: 5.0,
        positive_threshold: 4.0,
        strict: false,
    };

    /// Continuous -10..10, strictly above 0 is positive.
    pub const JESTER: RatingScale = RatingScale {
        min_rating: -10.0,
        max_rating: 10.0,
        positive_threshold: 0.0,
        strict: true,
    };

    pub fn new(min_rating: f64, max_rating: f64, positive_threshold: f64, strict: bool) -> Result<Self> {
        if !(min_rating < max_rating) || !(min_rating..=max_rating).contains(&positive_threshold) {
            return Err(Error::InvalidArgument(format!(
                "scale [{min_rating}, {max_rating}] with threshold {positive_threshold}"
            )));
        }
        Ok(RatingScale {
            min_rating,
            max_rating,
            positive_threshold,
            strict,
        })
    }

    pub fn is_positive(&self, rating: f64) -> bool {
        if self.strict {
            rating > self.positive_threshold
        } else {
            rating >= self.positive_threshold
        }
    }

    pub fn contains(&self, rating: f64) -> bool {
        (self.min_rating..=self.max_rating).contains(&rating)
    }

    pub fn clamp(&self, rating: f64) -> f64 {
        rating.clamp(self.min_rating, self.max_rating)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingEvent {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    /// Seconds; 0 when the source carries no timestamps.
    pub timestamp: i64,
}

/// Raw-id <-> dense-id table. Dense ids are assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn identity(len: usize) -> Self {
        let mut map = IdMap::default();
        for i in 0..len {
            map.intern(&i.to_string());
        }
        map
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(String::as_str)
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMaps {
    pub users: IdMap,
    pub items: IdMap,
}

/// A canonical rating log: events sorted by `(user, timestamp, file order)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub events: Vec<RatingEvent>,
    pub num_users: usize,
    pub num_items: usize,
    pub scale: RatingScale,
    pub id_maps: Arc<IdMaps>,
}

impl PartialEq for Dataset {
    /// Id maps are reporting metadata and do not take part in equality.
    fn eq(&self, other: &Self) -> bool {
        self.events == other.events
            && self.num_users == other.num_users
            && self.num_items == other.num_items
            && self.scale == other.scale
    }
}

impl Dataset {
    /// Sorts events into canonical order and validates ids and ratings.
    pub fn new(
        mut events: Vec<RatingEvent>,
        num_users: usize,
        num_items: usize,
        scale: RatingScale,
        id_maps: Arc<IdMaps>,
    ) -> Result<Self> {
        for e in &events {
            if e.user >= num_users {
                return Err(Error::IdOutOfRange { what: "user", id: e.user, count: num_users });
            }
            if e.item >= num_items {
                return Err(Error::IdOutOfRange { what: "item", id: e.item, count: num_items });
            }
            if !scale.contains(e.rating) {
                return Err(Error::InvalidArgument(format!(
                    "rating {} outside [{}, {}]",
                    e.rating, scale.min_rating, scale.max_rating
                )));
            }
        }
        // stable: equal (user, timestamp) keep file order
        events.sort_by_key(|e| (e.user, e.timestamp));
        Ok(Dataset {
            events,
            num_users,
            num_items,
            scale,
            id_maps,
        })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Same users, items, scale and id maps with a different event list.
    pub fn with_events(&self, events: Vec<RatingEvent>) -> Dataset {
        let mut ds = Dataset {
            events,
            num_users: self.num_users,
            num_items: self.num_items,
            scale: self.scale,
            id_maps: Arc::clone(&self.id_maps),
        };
        ds.events.sort_by_key(|e| (e.user, e.timestamp));
        ds
    }

    /// Events grouped per user, each group in chronological order.
    pub fn by_user(&self) -> Vec<&[RatingEvent]> {
        let mut groups = vec![&self.events[0..0]; self.num_users];
        let mut start = 0;
        while start < self.events.len() {
            let user = self.events[start].user;
            let end = start + self.events[start..].iter().take_while(|e| e.user == user).count();
            groups[user] = &self.events[start..end];
            start = end;
        }
        groups
    }

    pub fn mean_rating(&self) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        self.events.iter().map(|e| e.rating).sum::<f64>() / self.events.len() as f64
    }

    /// Latest rating per `(user, item)` pair.
    pub fn rating_lookup(&self) -> HashMap<(usize, usize), f64> {
        self.events.iter().map(|e| ((e.user, e.item), e.rating)).collect()
    }

    /// Writes the canonical CSV: `user,item,rating,timestamp` with dense ids.
    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.canonical_string().as_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn canonical_string(&self) -> String {
        let mut s = String::with_capacity(self.events.len() * 24 + 32);
        s.push_str("user,item,rating,timestamp\n");
        for e in &self.events {
            s.push_str(&format!("{},{},{},{}\n", e.user, e.item, e.rating, e.timestamp));
        }
        s
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path)?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_delimited(path: &Path, sep: &str, scale: RatingScale) -> Result<Dataset> {
    let mut maps = IdMaps::default();
    let mut events = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 4 fields separated by {sep:?}, got {}", fields.len()),
            ));
        }
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad rating {:?}", fields[2])))?;
        if !scale.contains(rating) {
            return Err(parse_err(
                path,
                line_no,
                format!(
                    "rating {rating} outside [{}, {}]",
                    scale.min_rating, scale.max_rating
                ),
            ));
        }
        let timestamp: i64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad timestamp {:?}", fields[3])))?;
        let user = maps.users.intern(fields[0].trim());
        let item = maps.items.intern(fields[1].trim());
        events.push(RatingEvent {
            user,
            item,
            rating,
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(Error::NoEvents(path.to_path_buf()));
    }
    let (nu, ni) = (maps.users.len(), maps.items.len());
    Dataset::new(events, nu, ni, scale, Arc::new(maps))
}

/// MovieLens 100k `u.data`: `user<TAB>item<TAB>rating<TAB>timestamp`.
pub fn parse_movielens_100k(path: &Path) -> Result<Dataset> {
    parse_delimited(path, "\t", RatingScale::FIVE_STAR)
}

/// MovieLens 1M `ratings.dat`: `UserID::MovieID::Rating::Timestamp`.
pub fn parse_movielens_1m(path: &Path) -> Result<Dataset> {
    parse_delimited(path, "::", RatingScale::FIVE_STAR)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Name(String),
    Index(usize),
}

/// Column mapping for [`parse_generic_csv`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub user: Column,
    pub item: Column,
    pub rating: Column,
    pub timestamp: Option<Column>,
    pub has_header: bool,
    pub delimiter: u8,
}

impl CsvSchema {
    /// Header-named columns `user,item,rating[,timestamp]`.
    pub fn named(user: &str, item: &str, rating: &str, timestamp: Option<&str>) -> Self {
        CsvSchema {
            user: Column::Name(user.into()),
            item: Column::Name(item.into()),
            rating: Column::Name(rating.into()),
            timestamp: timestamp.map(|t| Column::Name(t.into())),
            has_header: true,
            delimiter: b',',
        }
    }
}

/// Reads any delimited export given a column mapping and a declared scale.
pub fn parse_generic_csv(path: &Path, schema: &CsvSchema, scale: RatingScale) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .flexible(true)
        .from_path(path)?;
    let headers = if schema.has_header {
        Some(reader.headers()?.clone())
    } else {
        None
    };
    let resolve = |col: &Column| -> Result<usize> {
        match col {
            Column::Index(i) => Ok(*i),
            Column::Name(name) => headers
                .as_ref()
                .and_then(|h| h.iter().position(|f| f.trim() == name))
                .ok_or_else(|| parse_err(path, 1, format!("missing column {name:?}"))),
        }
    };
    let (uc, ic, rc) = (resolve(&schema.user)?, resolve(&schema.item)?, resolve(&schema.rating)?);
    let tc = schema.timestamp.as_ref().map(resolve).transpose()?;

    let mut maps = IdMaps::default();
    let mut events = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 1 + usize::from(schema.has_header);
        let record = record?;
        let field = |c: usize| {
            record
                .get(c)
                .map(str::trim)
                .ok_or_else(|| parse_err(path, line, format!("missing column #{c}")))
        };
        let rating: f64 = field(rc)?
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad rating {:?}", field(rc).unwrap_or(""))))?;
        if !rating.is_finite() || !scale.contains(rating) {
            return Err(parse_err(path, line, format!("rating {rating} outside scale")));
        }
        let timestamp = match tc {
            Some(c) => {
                let raw = field(c)?;
                raw.parse::<i64>()
                    .or_else(|_| raw.parse::<f64>().map(|t| t as i64))
                    .map_err(|_| parse_err(path, line, format!("bad timestamp {raw:?}")))?
            }
            None => 0,
        };
        let user = maps.users.intern(field(uc)?);
        let item = maps.items.intern(field(ic)?);
        events.push(RatingEvent {
            user,
            item,
            rating,
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(Error::NoEvents(path.to_path_buf()));
    }
    let (nu, ni) = (maps.users.len(), maps.items.len());
    Dataset::new(events, nu, ni, scale, Arc::new(maps))
}

/// Reads a file written by [`Dataset::write_canonical`], keeping its dense ids.
pub fn load_canonical(path: &Path, scale: RatingScale) -> Result<Dataset> {
    let mut events = Vec::new();
    let (mut nu, mut ni) = (0, 0);
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line_no == 1 {
            if line.trim() != "user,item,rating,timestamp" {
                return Err(parse_err(path, 1, "expected header user,item,rating,timestamp"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(path, line_no, "expected 4 fields"));
        }
        let bad = |what: &str| parse_err(path, line_no, format!("bad {what}"));
        let e = RatingEvent {
            user: f[0].parse().map_err(|_| bad("user"))?,
            item: f[1].parse().map_err(|_| bad("item"))?,
            rating: f[2].parse().map_err(|_| bad("rating"))?,
            timestamp: f[3].parse().map_err(|_| bad("timestamp"))?,
        };
        nu = nu.max(e.user + 1);
        ni = ni.max(e.item + 1);
        events.push(e);
    }
    if events.is_empty() {
        return Err(Error::NoEvents(path.to_path_buf()));
    }
    let maps = IdMaps {
        users: IdMap::identity(nu),
        items: IdMap::identity(ni),
    };
    Dataset::new(events, nu, ni, scale, Arc::new(maps))
}

/// Disjoint train/test partition of a dataset's events.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub fraction: f64,
}

/// Uniform random partition by event. The train side receives
/// `round(fraction * len)` events, kept within `1..len` so neither side is
/// empty whenever there are at least two events.
pub fn split_random(ds: &Dataset, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let n = ds.events.len();
    let mut n_train = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (e, keep) in ds.events.iter().zip(&in_train) {
        if *keep {
            train.push(*e);
        } else {
            test.push(*e);
        }
    }
    Ok(Split {
        train: ds.with_events(train),
        test: ds.with_events(test),
        seed,
        fraction,
    })
}

/// One user's chronological log, bootstrapped by its first `n` positives.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user: usize,
    pub bootstrap: Vec<usize>,
    pub remainder: Vec<RatingEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sessions {
    pub sessions: Vec<Session>,
    /// Users with fewer than `n` positive events.
    pub skipped_users: usize,
}

pub fn build_sessions(ds: &Dataset, n: usize) -> Result<Sessions> {
    if n == 0 {
        return Err(Error::InvalidArgument("history length n must be >= 1".into()));
    }
    let mut sessions = Vec::new();
    let mut skipped = 0;
    for (user, events) in ds.by_user().into_iter().enumerate() {
        if events.is_empty() {
            continue;
        }
        let mut bootstrap = Vec::with_capacity(n);
        let mut cut = None;
        for (idx, e) in events.iter().enumerate() {
            if ds.scale.is_positive(e.rating) {
                bootstrap.push(e.item);
                if bootstrap.len() == n {
                    cut = Some(idx + 1);
                    break;
                }
            }
        }
        match cut {
            Some(cut) => sessions.push(Session {
                user,
                bootstrap,
                remainder: events[cut..].to_vec(),
            }),
            None => skipped += 1,
        }
    }
    log::info!("built {} sessions, skipped {skipped} users with < {n} positives", sessions.len());
    Ok(Sessions {
        sessions,
        skipped_users: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternRow {
    pub run_length: usize,
    pub polarity: Polarity,
    /// NaN when the bucket is empty.
    pub mean_rating: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternReport {
    /// Positive runs `1..=max_run`, then negative runs `1..=max_run`.
    pub rows: Vec<PatternRow>,
    pub global_mean: f64,
    pub total_events: usize,
}

impl PatternReport {
    pub fn row(&self, run_length: usize, polarity: Polarity) -> Option<&PatternRow> {
        self.rows
            .iter()
            .find(|r| r.run_length == run_length && r.polarity == polarity)
    }

    /// `run_length,polarity,mean_rating,count`, followed by a `0,global,...`
    /// line carrying the overall mean.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_length,polarity,mean_rating,count\n");
        for r in &self.rows {
            let mean = if r.count == 0 {
                String::new()
            } else {
                format!("{:.6}", r.mean_rating)
            };
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.run_length,
                r.polarity.as_str(),
                mean,
                r.count
            ));
        }
        s.push_str(&format!("0,global,{:.6},{}\n", self.global_mean, self.total_events));
        s
    }
}

/// For every event, the maximal run of same-polarity events immediately
/// before it (within the user's timeline) is measured; an event preceded by a
/// run of length `L` contributes its rating to buckets `1..=min(L, max_run)`.
pub fn analyze_sequential_patterns(ds: &Dataset, max_run: usize) -> PatternReport {
    let mut sums = vec![[0.0f64; 2]; max_run + 1];
    let mut counts = vec![[0usize; 2]; max_run + 1];
    for events in ds.by_user() {
        // lengths of the current positive / negative runs ending just before i
        let (mut pos_run, mut neg_run) = (0usize, 0usize);
        for e in events {
            for (slot, run) in [(0, pos_run), (1, neg_run)] {
                for m in 1..=run.min(max_run) {
                    sums[m][slot] += e.rating;
                    counts[m][slot] += 1;
                }
            }
            if ds.scale.is_positive(e.rating) {
                pos_run += 1;
                neg_run = 0;
            } else {
                neg_run += 1;
                pos_run = 0;
            }
        }
    }
    let mut rows = Vec::with_capacity(2 * max_run);
    for (slot, polarity) in [(0, Polarity::Positive), (1, Polarity::Negative)] {
        for m in 1..=max_run {
            let count = counts[m][slot];
            rows.push(PatternRow {
                run_length: m,
                polarity,
                mean_rating: if count == 0 { f64::NAN } else { sums[m][slot] / count as f64 },
                count,
            });
        }
    }
    PatternReport {
        rows,
        global_mean: ds.mean_rating(),
        total_events: ds.len(),
    }
}

/// Dataset formats understood by [`load`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    MovieLens100k,
    MovieLens1m,
    Jester,
    Canonical,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml100k" | "ml-100k" => Ok(Format::MovieLens100k),
            "ml1m" | "ml-1m" => Ok(Format::MovieLens1m),
            "jester" => Ok(Format::Jester),
            "canonical" => Ok(Format::Canonical),
            other => Err(Error::InvalidArgument(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl Format {
    pub fn as_str(self) -> &'static str {
        match self {
            Format::MovieLens100k => "ml100k",
            Format::MovieLens1m => "ml1m",
            Format::Jester => "jester",
            Format::Canonical => "canonical",
        }
    }

    pub fn scale(self) -> RatingScale {
        match self {
            Format::Jester => RatingScale::JESTER,
            _ => RatingScale::FIVE_STAR,
        }
    }
}

/// Loads a dataset; Jester is read as a `user,item,rating` CSV with header.
pub fn load(path: &Path, format: Format) -> Result<Dataset> {
    match format {
        Format::MovieLens100k => parse_movielens_100k(path),
        Format::MovieLens1m => parse_movielens_1m(path),
        Format::Jester => parse_generic_csv(
            path,
            &CsvSchema::named("user", "item", "rating", None),
            RatingScale::JESTER,
        ),
        Format::Canonical => load_canonical(path, RatingScale::FIVE_STAR),
    }
}

/// Default location of a dataset file relative to a data root.
pub fn default_path(root: &Path, format: Format) -> PathBuf {
    match format {
        Format::MovieLens100k => root.join("ml-100k").join("u.data"),
        Format::MovieLens1m => root.join("ml-1m").join("ratings.dat"),
        Format::Jester => root.join("jester").join("ratings.csv"),
        Format::Canonical => root.join("canonical.csv"),
    }
}
