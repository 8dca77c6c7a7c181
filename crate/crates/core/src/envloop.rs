//! Reward mapping, the training loop, offline reranking evaluation,
//! simulator-backed online evaluation and the ranking metrics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{explore, item_action, score_items, AgentBundle};
use crate::datasets::{RatingScale, Sessions, Split};
use crate::error::{Error, Result};
use crate::numkit::Scalar;
use crate::pmf::EmbeddingTable;
use crate::replay::{beta_at, PrioritizedReplay, ReplayConfig, Transition};
use crate::staterep::History;

/// Rating-to-reward normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSpec {
    /// `(rating - 3) / 2`.
    FiveStar,
    /// `rating / 10`.
    Jester,
}

impl RewardSpec {
    pub fn for_scale(scale: RatingScale) -> RewardSpec {
        if scale == RatingScale::JESTER {
            RewardSpec::Jester
        } else {
            RewardSpec::FiveStar
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RewardSpec::FiveStar => "five_star",
            RewardSpec::Jester => "jester",
        }
    }
}

/// Normalised reward in `[-1, 1]`.
pub fn reward(rating: f64, spec: RewardSpec) -> f64 {
    let r = match spec {
        RewardSpec::FiveStar => (rating - 3.0) / 2.0,
        RewardSpec::Jester => rating / 10.0,
    };
    r.clamp(-1.0, 1.0)
}

/// Ranks a candidate set for one step; used by offline evaluation.
pub trait Ranker: Sync {
    fn name(&self) -> String;

    /// Candidates best first. Must return a permutation of `candidates`.
    fn rank(&self, user: usize, history: &History, candidates: &[usize]) -> Result<Vec<usize>>;
}

/// A recommender that keeps learning from the rewards it observes.
pub trait OnlinePolicy {
    fn name(&self) -> String;

    /// Called before every session.
    fn start_session(&mut self) -> Result<()>;

    fn choose(&mut self, user: usize, history: &History, candidates: &[usize], rng: &mut ChaCha8Rng) -> Result<usize>;

    #[allow(clippy::too_many_arguments)]
    fn observe(
        &mut self,
        user: usize,
        history: &History,
        item: usize,
        reward: f64,
        next_history: &History,
        terminal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()>;
}

/// Agent plus replay buffer, driven one step at a time.
#[derive(Debug, Clone)]
pub struct DrrLearner<'t, T> {
    pub bundle: AgentBundle<T>,
    pub replay: PrioritizedReplay<Transition<T>>,
    tbl: &'t EmbeddingTable<T>,
    /// Interaction steps taken, which drives the epsilon schedule.
    pub steps: u64,
    /// Steps over which the importance exponent is annealed.
    pub beta_horizon: u64,
    /// Fixed exploration rate instead of the schedule.
    pub epsilon: Option<f64>,
    pending: Option<(usize, Vec<T>)>,
}

impl<'t, T: Scalar> DrrLearner<'t, T> {
    pub fn new(bundle: AgentBundle<T>, tbl: &'t EmbeddingTable<T>, beta_horizon: u64) -> Result<Self> {
        let c = &bundle.config;
        if tbl.k != c.k {
            return Err(Error::Shape(format!("embeddings have k = {}, agent expects {}", tbl.k, c.k)));
        }
        let replay = PrioritizedReplay::new(ReplayConfig {
            capacity: c.buffer_capacity,
            alpha: c.priority_alpha,
            priority_floor: c.priority_floor,
        })?;
        Ok(DrrLearner { bundle, replay, tbl, steps: 0, beta_horizon, epsilon: None, pending: None })
    }

    pub fn table(&self) -> &'t EmbeddingTable<T> {
        self.tbl
    }

    pub fn current_epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| self.bundle.config.epsilon_at(self.steps))
    }

    /// Epsilon-greedy item; remembers the action to store with the transition.
    pub fn choose(&mut self, user: usize, history: &History, candidates: &[usize], rng: &mut ChaCha8Rng) -> Result<usize> {
        let a = self.bundle.actor.act(user, history, self.tbl)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("actor output".into()));
        }
        let choice = explore(&a, self.current_epsilon(), candidates, self.tbl, rng)?;
        let stored = if choice.explored { item_action(&a, choice.item, self.tbl) } else { a };
        self.pending = Some((choice.item, stored));
        Ok(choice.item)
    }

    /// Stores the transition and, once the buffer holds a batch, performs one
    /// critic, actor and target update. Returns the critic loss if updated.
    pub fn observe(
        &mut self,
        user: usize,
        history: &History,
        item: usize,
        reward: f64,
        next_history: &History,
        terminal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<f64>> {
        let action = match self.pending.take() {
            Some((chosen, a)) if chosen == item => a,
            _ => return Err(Error::InvalidArgument(format!("item {item} was not the last choice"))),
        };
        let t = Transition::new(user, history.clone(), action, reward, next_history.clone(), terminal)?;
        self.replay.push_max(t);
        self.steps += 1;
        self.learn(rng)
    }

    fn learn(&mut self, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        let c = &self.bundle.config;
        if self.replay.len() < c.batch_size {
            return Ok(None);
        }
        let beta = beta_at(self.steps, self.beta_horizon, c.priority_beta_start, c.priority_beta_end);
        let sample = self.replay.sample(c.batch_size, beta, rng)?;
        let step = self.bundle.critic_update(&sample.items, &sample.is_weights, self.tbl)?;
        let users: Vec<usize> = sample.items.iter().map(|t| t.user).collect();
        let histories: Vec<&History> = sample.items.iter().map(|t| &t.history).collect();
        self.bundle.actor_update(&users, &histories, self.tbl)?;
        let slots = sample.slots;
        self.replay.update_priorities(&slots, &step.td_errors)?;
        let tau = self.bundle.config.tau;
        self.bundle.soft_update(tau)?;
        self.bundle.updates += 1;
        Ok(Some(step.loss))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of episodes `M`.
    pub episodes: usize,
    /// Horizon `T`.
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub episode: usize,
    pub step: usize,
    pub item: usize,
    pub reward: f64,
    pub critic_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub transitions: u64,
    pub updates: u64,
}

impl TrainLog {
    pub const HEADER: &'static str = "episode,step,item,reward,critic_loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let loss = r.critic_loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.episode, r.step, r.item, r.reward, loss));
        }
        out
    }
}

/// Runs `M` episodes of at most `T` steps over the training sessions, cycling
/// through them in a reshuffled order. Rewards come from the logged rating
/// when the user rated the item in the training split, otherwise from the
/// embedding table's prediction.
///
/// On error the learner holds the last state whose updates completed, so the
/// caller can still checkpoint it.
pub fn train<T: Scalar>(
    learner: &mut DrrLearner<'_, T>,
    sessions: &Sessions,
    train_ratings: &HashMap<(usize, usize), f64>,
    spec: RewardSpec,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if sessions.sessions.is_empty() {
        return Err(Error::Empty("training sessions"));
    }
    let tbl = learner.table();
    let n_items = tbl.num_items;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let updates_before = learner.bundle.updates;
    let mut candidates = Vec::with_capacity(n_items);
    for episode in 0..cfg.episodes {
        if order.is_empty() {
            order = (0..sessions.sessions.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let session = &sessions.sessions[order.pop().expect("refilled above")];
        let user = session.user;
        let mut history = History::new(session.bootstrap.clone())?;
        let seen: HashSet<usize> = session.bootstrap.iter().copied().collect();
        candidates.clear();
        candidates.extend((0..n_items).filter(|i| !seen.contains(i)));
        let steps = cfg.horizon.min(candidates.len());
        for step in 0..steps {
            let item = learner.choose(user, &history, &candidates, &mut rng)?;
            let rating = match train_ratings.get(&(user, item)) {
                Some(&r) => r,
                None => tbl.predict_rating(user, item)?.as_f64(),
            };
            let r = reward(rating, spec);
            let next = history.update(item, r);
            let pos = candidates.iter().position(|&c| c == item).expect("chosen from candidates");
            candidates.remove(pos);
            let terminal = step + 1 == steps;
            let loss = learner.observe(user, &history, item, r, &next, terminal, &mut rng)?;
            log.transitions += 1;
            log.rows.push(TrainLogRow { episode, step, item, reward: r, critic_loss: loss });
            history = next;
        }
    }
    log.updates = learner.bundle.updates - updates_before;
    Ok(log)
}

/// One user's evaluation session: the latest `n` positive training items as
/// the starting history and the user's test items as candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSession {
    pub user: usize,
    pub history: History,
    /// Ascending item ids.
    pub candidates: Vec<usize>,
    /// Test ratings of the candidates.
    pub ratings: HashMap<usize, f64>,
}

/// Sessions for users with at least `n` positive training events and at least
/// one test event, in ascending user order.
pub fn build_eval_sessions(split: &Split, n: usize) -> Result<Vec<EvalSession>> {
    if n == 0 {
        return Err(Error::InvalidArgument("history length n must be >= 1".into()));
    }
    let scale = split.train.scale;
    let train = split.train.by_user();
    let test = split.test.by_user();
    let mut out = Vec::new();
    for (user, events) in test.iter().enumerate() {
        if events.is_empty() {
            continue;
        }
        let positives: Vec<usize> = train
            .get(user)
            .map(|ev| ev.iter().filter(|e| scale.is_positive(e.rating)).map(|e| e.item).collect())
            .unwrap_or_default();
        if positives.len() < n {
            continue;
        }
        let history = History::new(positives[positives.len() - n..].to_vec())?;
        let ratings: HashMap<usize, f64> = events.iter().map(|e| (e.item, e.rating)).collect();
        let mut candidates: Vec<usize> = ratings.keys().copied().collect();
        candidates.sort_unstable();
        out.push(EvalSession { user, history, candidates, ratings });
    }
    Ok(out)
}

/// One step of an evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// The first `max k` entries of the step's ranking.
    pub top: Vec<usize>,
    /// Relevance of each entry of `top`.
    pub relevant: Vec<bool>,
    /// Relevant items among all of the step's candidates.
    pub relevant_total: usize,
    /// Size of the candidate set at this step.
    pub available: usize,
    pub item: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub user: usize,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub precision_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub cumulative_reward: f64,
    pub episodes: usize,
    pub steps: usize,
    /// Steps at which fewer candidates than the largest k remained.
    pub short_steps: usize,
    pub seed: u64,
    pub config_digest: String,
    pub variant: String,
    pub dataset: String,
}

impl MetricsReport {
    pub const HEADER: &'static str = "metric,k,value,seed,variant,dataset";

    /// Tidy rows: precision and ndcg per k, then the cumulative reward with an
    /// empty `k`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        self.write_rows(&mut out);
        out
    }

    pub fn write_rows(&self, out: &mut String) {
        let tail = format!("{},{},{}", self.seed, self.variant, self.dataset);
        for (k, v) in &self.precision_at {
            out.push_str(&format!("precision,{k},{v},{tail}\n"));
        }
        for (k, v) in &self.ndcg_at {
            out.push_str(&format!("ndcg,{k},{v},{tail}\n"));
        }
        out.push_str(&format!("cumulative_reward,,{},{tail}\n", self.cumulative_reward));
    }
}

fn log2_discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// Precision@k and NDCG@k per step (over `min(k, available)` positions,
/// binary gains), averaged over steps and then over episodes. Episodes without
/// steps contribute only to the episode count and reward.
pub fn compute_metrics(records: &[EpisodeRecord], ks: &[usize]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Empty("episode records"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("k list must be non-empty with k >= 1".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let mut prec: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = prec.clone();
    let mut scored = 0usize;
    let mut report = MetricsReport::default();
    for ep in records {
        report.cumulative_reward += ep.total_reward();
        report.steps += ep.steps.len();
        if ep.steps.is_empty() {
            continue;
        }
        scored += 1;
        for &k in ks {
            let (mut p_sum, mut n_sum) = (0.0, 0.0);
            for s in &ep.steps {
                let depth = k.min(s.available);
                let hits = s.relevant.iter().take(depth).filter(|&&r| r).count();
                p_sum += hits as f64 / depth as f64;
                let dcg: f64 = s
                    .relevant
                    .iter()
                    .take(depth)
                    .enumerate()
                    .filter(|(_, &r)| r)
                    .map(|(j, _)| log2_discount(j))
                    .sum();
                let idcg: f64 = (0..s.relevant_total.min(depth)).map(log2_discount).sum();
                n_sum += if idcg > 0.0 { dcg / idcg } else { 0.0 };
            }
            let steps = ep.steps.len() as f64;
            *prec.get_mut(&k).expect("k present") += p_sum / steps;
            *ndcg.get_mut(&k).expect("k present") += n_sum / steps;
        }
        report.short_steps += ep.steps.iter().filter(|s| s.available < max_k).count();
    }
    if scored > 0 {
        for v in prec.values_mut().chain(ndcg.values_mut()) {
            *v /= scored as f64;
        }
    }
    report.precision_at = prec;
    report.ndcg_at = ndcg;
    report.episodes = records.len();
    Ok(report)
}

/// Reranks each session's test items for up to `horizon` steps without any
/// learning: rank, record the top of the list, recommend the first item,
/// take the logged reward, update the history and drop the item.
pub fn run_offline(
    ranker: &dyn Ranker,
    sessions: &[EvalSession],
    ks: &[usize],
    horizon: usize,
    scale: RatingScale,
    threads: usize,
) -> Result<Vec<EpisodeRecord>> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let spec = RewardSpec::for_scale(scale);
    let one = |s: &EvalSession| -> Result<EpisodeRecord> {
        let mut history = s.history.clone();
        let mut candidates = s.candidates.clone();
        let mut steps = Vec::new();
        for _ in 0..horizon.min(s.candidates.len()) {
            let ranked = ranker.rank(s.user, &history, &candidates)?;
            if ranked.len() != candidates.len() {
                return Err(Error::Shape(format!(
                    "{} ranked {} of {} candidates",
                    ranker.name(),
                    ranked.len(),
                    candidates.len()
                )));
            }
            let positive = |i: &usize| scale.is_positive(s.ratings[i]);
            let top: Vec<usize> = ranked.iter().take(max_k).copied().collect();
            let item = ranked[0];
            let rating = s.ratings[&item];
            let r = reward(rating, spec);
            steps.push(StepRecord {
                relevant: top.iter().map(positive).collect(),
                top,
                relevant_total: candidates.iter().filter(|i| positive(i)).count(),
                available: candidates.len(),
                item,
                reward: r,
            });
            history = history.update(item, r);
            candidates.retain(|&c| c != item);
        }
        Ok(EpisodeRecord { user: s.user, steps })
    };
    let threads = threads.max(1).min(sessions.len().max(1));
    if threads == 1 {
        return sessions.iter().map(one).collect();
    }
    let chunk = sessions.len().div_ceil(threads);
    let parts: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sessions
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(sessions.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Offline evaluation followed by metric aggregation.
pub fn eval_offline(
    ranker: &dyn Ranker,
    sessions: &[EvalSession],
    ks: &[usize],
    horizon: usize,
    scale: RatingScale,
    threads: usize,
) -> Result<MetricsReport> {
    let records = run_offline(ranker, sessions, ks, horizon, scale, threads)?;
    compute_metrics(&records, ks)
}

/// The trained actor as a frozen ranker.
pub struct DrrRanker<'a, T> {
    pub bundle: &'a AgentBundle<T>,
    pub tbl: &'a EmbeddingTable<T>,
}

impl<T: Scalar> Ranker for DrrRanker<'_, T> {
    fn name(&self) -> String {
        self.bundle.config.variant.to_string()
    }

    fn rank(&self, user: usize, history: &History, candidates: &[usize]) -> Result<Vec<usize>> {
        let a = self.bundle.actor.act(user, history, self.tbl)?;
        Ok(score_items(&a, candidates, self.tbl)?.into_iter().map(|x| x.0).collect())
    }
}

/// Outcome of a simulator-backed run.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineReport {
    pub episodes: Vec<EpisodeRecord>,
    pub cumulative_reward: f64,
}

/// Plays every session against the simulator for up to `horizon` steps with
/// the candidate set being all items outside the starting history that were
/// not yet recommended. The policy learns as it goes.
pub fn run_online<T: Scalar>(
    policy: &mut dyn OnlinePolicy,
    simulator: &EmbeddingTable<T>,
    sessions: &[EvalSession],
    horizon: usize,
    spec: RewardSpec,
    seed: u64,
) -> Result<OnlineReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(sessions.len());
    let mut total = 0.0;
    for s in sessions {
        policy.start_session()?;
        let mut history = s.history.clone();
        let start: HashSet<usize> = history.items().iter().copied().collect();
        let mut candidates: Vec<usize> = (0..simulator.num_items).filter(|i| !start.contains(i)).collect();
        let steps = horizon.min(candidates.len());
        let mut records = Vec::with_capacity(steps);
        for step in 0..steps {
            let item = policy.choose(s.user, &history, &candidates, &mut rng)?;
            let pos = candidates
                .iter()
                .position(|&c| c == item)
                .ok_or_else(|| Error::InvalidArgument(format!("{} chose item {item} outside the candidates", policy.name())))?;
            let available = candidates.len();
            candidates.remove(pos);
            let r = reward(simulator.predict_rating(s.user, item)?.as_f64(), spec);
            let next = history.update(item, r);
            policy.observe(s.user, &history, item, r, &next, step + 1 == steps, &mut rng)?;
            total += r;
            records.push(StepRecord {
                top: vec![item],
                relevant: vec![r > 0.0],
                relevant_total: 0,
                available,
                item,
                reward: r,
            });
            history = next;
        }
        episodes.push(EpisodeRecord { user: s.user, steps: records });
    }
    Ok(OnlineReport { episodes, cumulative_reward: total })
}

/// DRR under online evaluation: parameters and optimizer state return to the
/// trained snapshot at the start of every session; the replay buffer persists.
pub struct DrrOnline<'t, T> {
    snapshot: AgentBundle<T>,
    snapshot_digest: u64,
    pub learner: DrrLearner<'t, T>,
    /// Parameter digest observed at each session start.
    pub session_start_digests: Vec<u64>,
}

impl<'t, T: Scalar> DrrOnline<'t, T> {
    /// `epsilon` is the fixed exploration rate during evaluation.
    pub fn new(trained: &AgentBundle<T>, tbl: &'t EmbeddingTable<T>, epsilon: f64, beta_horizon: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let mut learner = DrrLearner::new(trained.clone(), tbl, beta_horizon)?;
        learner.epsilon = Some(epsilon);
        Ok(DrrOnline {
            snapshot_digest: trained.param_digest(),
            snapshot: trained.clone(),
            learner,
            session_start_digests: Vec::new(),
        })
    }

    pub fn snapshot_digest(&self) -> u64 {
        self.snapshot_digest
    }
}

impl<T: Scalar> OnlinePolicy for DrrOnline<'_, T> {
    fn name(&self) -> String {
        self.snapshot.config.variant.to_string()
    }

    fn start_session(&mut self) -> Result<()> {
        self.learner.bundle = self.snapshot.clone();
        let digest = self.learner.bundle.param_digest();
        if digest != self.snapshot_digest {
            return Err(Error::InvalidArgument("parameter reset did not restore the snapshot".into()));
        }
        self.session_start_digests.push(digest);
        Ok(())
    }

    fn choose(&mut self, user: usize, history: &History, candidates: &[usize], rng: &mut ChaCha8Rng) -> Result<usize> {
        self.learner.choose(user, history, candidates, rng)
    }

    fn observe(
        &mut self,
        user: usize,
        history: &History,
        item: usize,
        reward: f64,
        next_history: &History,
        terminal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        self.learner.observe(user, history, item, reward, next_history, terminal, rng)?;
        Ok(())
    }
}
