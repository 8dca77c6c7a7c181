//! Actor, critic, their target copies and the deterministic policy-gradient
//! update rules.
//!
//! The actor maps a state to an action `a in (-1, 1)^k` through two ReLU layers
//! and a Tanh layer; items are ranked by `V_i . a`. The critic scores
//! `concat(s, a)` with two ReLU layers and a linear output. The slot weights of
//! the state module belong to the actor and are trained only by the policy
//! gradient; the critic sees the state as a constant input.

use std::path::Path;

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::numkit::{fan_in_uniform, Activation, Adam, AdamConfig, Graph, Param, Scalar, Tensor, Var};
use crate::pmf::{dot, ByteReader, EmbeddingTable};
use crate::replay::Transition;
use crate::staterep::{History, StateRep, StateVec, Variant};

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Dense {
            weight: Param::new(fan_in_uniform(rng, d_in, d_out)),
            bias: Param::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn record(&self, g: &mut Graph<T>, trainable: bool) -> (Var, Var) {
        if trainable {
            (g.param(&self.weight), g.param(&self.bias))
        } else {
            (g.frozen(&self.weight), g.frozen(&self.bias))
        }
    }
}

/// Three dense layers; `leaves` records the parameter nodes in
/// `[W1, b1, W2, b2, W3, b3]` order.
fn mlp<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[Dense<T>; 3],
    input: Var,
    out_activation: Activation,
    trainable: bool,
    leaves: &mut Vec<Var>,
) -> Result<Var> {
    let mut x = input;
    for (idx, layer) in layers.iter().enumerate() {
        let (w, b) = layer.record(g, trainable);
        leaves.push(w);
        leaves.push(b);
        let act = if idx == 2 { out_activation } else { Activation::Relu };
        x = g.dense(x, w, b, act)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor<T> {
    pub state_rep: StateRep<T>,
    pub layers: [Dense<T>; 3],
}

impl<T: Scalar> Actor<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &AgentConfig) -> Result<Self> {
        let state_rep = StateRep::new(cfg.variant, cfg.n)?;
        let d = state_rep.state_len(cfg.k);
        let [h1, h2] = cfg.actor_hidden;
        Ok(Actor {
            state_rep,
            layers: [Dense::new(rng, d, h1), Dense::new(rng, h1, h2), Dense::new(rng, h2, cfg.k)],
        })
    }

    pub fn state_len(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn action_len(&self) -> usize {
        self.layers[2].d_out()
    }

    /// Parameters in a fixed order: slot weights first (only for variants
    /// that use them), then the dense layers.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::with_capacity(7);
        if self.state_rep.variant.has_weights() {
            out.push(&self.state_rep.item_weights);
        }
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(7);
        if self.state_rep.variant.has_weights() {
            out.push(&mut self.state_rep.item_weights);
        }
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Every parameter including unused slot weights; used for copying.
    fn all_params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.state_rep.item_weights];
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    fn all_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.state_rep.item_weights];
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// State rows for a batch, without gradients.
    pub fn states(&self, users: &[usize], histories: &[&History], tbl: &EmbeddingTable<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = g.frozen(&self.state_rep.item_weights);
        let s = self.state_rep.forward(&mut g, w, users, histories, tbl)?;
        Ok(g.value(s).clone())
    }

    /// Policy head applied to precomputed state rows `[B x state_len]`.
    pub fn act_on_states(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        if states.cols() != self.state_len() {
            return Err(Error::Shape(format!(
                "state of length {} for an actor expecting {}",
                states.cols(),
                self.state_len()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(states.clone());
        let a = mlp(&mut g, &self.layers, x, Activation::Tanh, false, &mut Vec::new())?;
        Ok(g.value(a).clone())
    }

    pub fn act_on_state(&self, s: &StateVec<T>) -> Result<Vec<T>> {
        Ok(self.act_on_states(&Tensor::row(s.values.clone()))?.into_data())
    }

    /// `pi(f(H))` for one user.
    pub fn act(&self, user: usize, history: &History, tbl: &EmbeddingTable<T>) -> Result<Vec<T>> {
        let s = self.states(&[user], &[history], tbl)?;
        Ok(self.act_on_states(&s)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T> {
    pub layers: [Dense<T>; 3],
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &AgentConfig) -> Self {
        let d = cfg.variant.state_len(cfg.n, cfg.k) + cfg.k;
        let [h1, h2] = cfg.critic_hidden;
        Critic {
            layers: [Dense::new(rng, d, h1), Dense::new(rng, h1, h2), Dense::new(rng, h2, 1)],
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn record(&self, g: &mut Graph<T>, s: Var, a: Var, trainable: bool, leaves: &mut Vec<Var>) -> Result<Var> {
        let (sv, av) = (g.value(s), g.value(a));
        if sv.cols() + av.cols() != self.layers[0].d_in() {
            return Err(Error::Shape(format!(
                "critic expects {} inputs, got state {} + action {}",
                self.layers[0].d_in(),
                sv.cols(),
                av.cols()
            )));
        }
        let x = g.concat(&[s, a])?;
        mlp(g, &self.layers, x, Activation::Identity, trainable, leaves)
    }

    /// Q-values `[B]` for state rows and action rows.
    pub fn q_values(&self, states: &Tensor<T>, actions: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let s = g.constant(states.clone());
        let a = g.constant(actions.clone());
        let q = self.record(&mut g, s, a, false, &mut Vec::new())?;
        Ok(g.value(q).data().to_vec())
    }

    pub fn q_value(&self, s: &[T], a: &[T]) -> Result<T> {
        let q = self.q_values(&Tensor::row(s.to_vec()), &Tensor::row(a.to_vec()))?;
        let q = q[0];
        if !q.is_finite() {
            return Err(Error::NonFinite("critic output".into()));
        }
        Ok(q)
    }
}

/// Hyperparameters of the agent and its training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub variant: Variant,
    /// History window length.
    pub n: usize,
    /// Embedding dimension (and action length).
    pub k: usize,
    pub actor_hidden: [usize; 2],
    pub critic_hidden: [usize; 2],
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub l2: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub buffer_capacity: usize,
    pub priority_alpha: f64,
    pub priority_beta_start: f64,
    pub priority_beta_end: f64,
    pub priority_floor: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::DrrAve,
            n: 5,
            k: 100,
            actor_hidden: [256, 128],
            critic_hidden: [256, 128],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            l2: 1e-6,
            gamma: 0.9,
            tau: 0.001,
            batch_size: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 10_000,
            buffer_capacity: 100_000,
            priority_alpha: 0.6,
            priority_beta_start: 0.4,
            priority_beta_end: 1.0,
            priority_floor: 1e-5,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_owned()));
        if self.n == 0 || self.k == 0 {
            return bad("n and k must be >= 1");
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch size and buffer capacity must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if !(self.priority_floor > 0.0) {
            return bad("priority floor must be > 0");
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.eps_decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// Actor, critic, target copies and optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBundle<T> {
    pub config: AgentConfig,
    pub actor: Actor<T>,
    pub critic: Critic<T>,
    pub target_actor: Actor<T>,
    pub target_critic: Critic<T>,
    /// Number of completed critic/actor update pairs.
    pub updates: u64,
}

/// Loss and per-sample `|y - Q|` of a critic step.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

impl<T: Scalar> AgentBundle<T> {
    /// Random online networks; targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let actor = Actor::new(rng, &config)?;
        let critic = Critic::new(rng, &config);
        Ok(AgentBundle {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            config,
            updates: 0,
        })
    }

    pub fn actor_optimizer(&self) -> Adam {
        Adam::new(AdamConfig::with_lr(self.config.actor_lr, self.config.l2))
    }

    pub fn critic_optimizer(&self) -> Adam {
        Adam::new(AdamConfig::with_lr(self.config.critic_lr, self.config.l2))
    }

    pub fn actor_forward(&self, s: &StateVec<T>) -> Result<Vec<T>> {
        if s.variant != self.config.variant {
            return Err(Error::Shape(format!(
                "{} state for a {} agent",
                s.variant, self.config.variant
            )));
        }
        self.actor.act_on_state(s)
    }

    pub fn critic_forward(&self, s: &[T], a: &[T]) -> Result<T> {
        self.critic.q_value(s, a)
    }

    /// `y_i = r_i + gamma * Q'(s'_i, pi'(s'_i))`, or `r_i` for terminal
    /// transitions. Reads the target networks only.
    pub fn td_targets(&self, batch: &[&Transition<T>], tbl: &EmbeddingTable<T>) -> Result<Vec<T>> {
        td_targets(&self.target_actor, &self.target_critic, self.config.gamma, batch, tbl)
    }

    /// Weighted MSE of the critic and its gradients, without stepping.
    pub fn critic_loss_and_grads(
        &self,
        batch: &[&Transition<T>],
        is_weights: &[f64],
        tbl: &EmbeddingTable<T>,
    ) -> Result<(CriticStep, Vec<Tensor<T>>)> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        if is_weights.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} importance weights for {} transitions",
                is_weights.len(),
                batch.len()
            )));
        }
        let targets = self.td_targets(batch, tbl)?;
        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let histories: Vec<&History> = batch.iter().map(|t| &t.history).collect();
        let states = self.actor.states(&users, &histories, tbl)?;
        let actions = Tensor::from_rows(&batch.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let s = g.constant(states);
        let a = g.constant(actions);
        let mut leaves = Vec::with_capacity(6);
        let q = self.critic.record(&mut g, s, a, true, &mut leaves)?;
        let y = g.constant(Tensor::from_vec(vec![batch.len(), 1], targets.clone())?);
        let diff = g.sub(q, y)?;
        let sq = g.square(diff);
        let weighted = g.mul_const(sq, is_weights.iter().map(|&w| T::of(w)).collect())?;
        let loss = g.mean(weighted)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("critic loss {loss_value}")));
        }
        let td_errors = g.value(diff).data().iter().map(|d| d.as_f64().abs()).collect();
        g.backward(loss)?;
        let grads = collect_grads(&g, &leaves, &self.critic.params());
        Ok((CriticStep { loss: loss_value, td_errors }, grads))
    }

    /// One Adam step on the critic.
    pub fn critic_update(
        &mut self,
        batch: &[&Transition<T>],
        is_weights: &[f64],
        tbl: &EmbeddingTable<T>,
    ) -> Result<CriticStep> {
        let (step, grads) = self.critic_loss_and_grads(batch, is_weights, tbl)?;
        let opt = self.critic_optimizer();
        let mut params = self.critic.params_mut();
        apply_grads(&mut params, grads);
        opt.step(&mut params)?;
        Ok(step)
    }

    /// `-(1/N) sum Q(s, pi(s))` with the critic held fixed, and its gradients
    /// with respect to the actor parameters (slot weights included).
    pub fn actor_loss_and_grads(
        &self,
        users: &[usize],
        histories: &[&History],
        tbl: &EmbeddingTable<T>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        if users.is_empty() {
            return Err(Error::Empty("actor batch"));
        }
        let mut g = Graph::new();
        let mut leaves = Vec::with_capacity(7);
        let w = if self.actor.state_rep.variant.has_weights() {
            let w = g.param(&self.actor.state_rep.item_weights);
            leaves.push(w);
            w
        } else {
            g.frozen(&self.actor.state_rep.item_weights)
        };
        let s = self.actor.state_rep.forward(&mut g, w, users, histories, tbl)?;
        let a = mlp(&mut g, &self.actor.layers, s, Activation::Tanh, true, &mut leaves)?;
        // the critic sees the state as data; only the action path carries gradient
        let s_fixed = g.constant(g.value(s).clone());
        let q = self.critic.record(&mut g, s_fixed, a, false, &mut Vec::new())?;
        let mean_q = g.mean(q)?;
        let loss = g.scale(mean_q, -T::one());
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("actor objective {loss_value}")));
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, &leaves, &self.actor.params());
        Ok((loss_value, grads))
    }

    /// One Adam step ascending the critic's value of the policy's actions.
    /// Returns the pre-step objective `-(mean Q)`.
    pub fn actor_update(&mut self, users: &[usize], histories: &[&History], tbl: &EmbeddingTable<T>) -> Result<f64> {
        let (loss, grads) = self.actor_loss_and_grads(users, histories, tbl)?;
        let opt = self.actor_optimizer();
        let mut params = self.actor.params_mut();
        apply_grads(&mut params, grads);
        opt.step(&mut params)?;
        Ok(loss)
    }

    /// `target <- tau * online + (1 - tau) * target` for both networks.
    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
        }
        let tau_t = T::of(tau);
        for (t, o) in self.target_actor.all_params_mut().into_iter().zip(self.actor.all_params()) {
            if tau == 1.0 {
                t.value = o.value.clone();
            } else {
                t.blend_from(o, tau_t);
            }
        }
        for (t, o) in self.target_critic.params_mut().into_iter().zip(self.critic.params()) {
            if tau == 1.0 {
                t.value = o.value.clone();
            } else {
                t.blend_from(o, tau_t);
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter value of all four
    /// networks; equal digests mean bitwise-equal parameters.
    pub fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let nets = [
            self.actor.all_params(),
            self.critic.params(),
            self.target_actor.all_params(),
            self.target_critic.params(),
        ];
        for p in nets.iter().flatten() {
            for v in p.value.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub(crate) fn networks(&self) -> [Vec<&Param<T>>; 4] {
        [
            self.actor.all_params(),
            self.critic.params(),
            self.target_actor.all_params(),
            self.target_critic.params(),
        ]
    }

    pub(crate) fn networks_mut(&mut self) -> [Vec<&mut Param<T>>; 4] {
        [
            self.actor.all_params_mut(),
            self.critic.params_mut(),
            self.target_actor.all_params_mut(),
            self.target_critic.params_mut(),
        ]
    }
}

/// TD targets computed from an explicit pair of target networks.
pub fn td_targets<T: Scalar>(
    target_actor: &Actor<T>,
    target_critic: &Critic<T>,
    gamma: f64,
    batch: &[&Transition<T>],
    tbl: &EmbeddingTable<T>,
) -> Result<Vec<T>> {
    let gamma = T::of(gamma);
    let live: Vec<&Transition<T>> = batch.iter().copied().filter(|t| !t.terminal).collect();
    let mut next_q = Vec::new();
    if !live.is_empty() && gamma != T::zero() {
        let users: Vec<usize> = live.iter().map(|t| t.user).collect();
        let histories: Vec<&History> = live.iter().map(|t| &t.next_history).collect();
        let states = target_actor.states(&users, &histories, tbl)?;
        let actions = target_actor.act_on_states(&states)?;
        next_q = target_critic.q_values(&states, &actions)?;
    }
    let mut next = next_q.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            let r = T::of(t.reward);
            if t.terminal || gamma == T::zero() {
                r
            } else {
                r + gamma * next.next().expect("one Q' per live transition")
            }
        })
        .collect())
}

fn collect_grads<T: Scalar>(g: &Graph<T>, leaves: &[Var], params: &[&Param<T>]) -> Vec<Tensor<T>> {
    leaves
        .iter()
        .zip(params)
        .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn apply_grads<T: Scalar>(params: &mut [&mut Param<T>], grads: Vec<Tensor<T>>) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.zero_grad();
        p.accumulate(Some(&g));
    }
}

/// Items ranked by `V_i . a`, descending; ties by ascending item id.
pub fn score_items<T: Scalar>(a: &[T], candidates: &[usize], tbl: &EmbeddingTable<T>) -> Result<Vec<(usize, T)>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if a.len() != tbl.k {
        return Err(Error::Shape(format!("action of length {} for k = {}", a.len(), tbl.k)));
    }
    let mut scored = candidates
        .iter()
        .map(|&i| {
            tbl.check_item(i)?;
            Ok((i, dot(tbl.item(i), a)))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_scored(&mut scored);
    Ok(scored)
}

/// Descending by score, ascending item id on ties.
pub fn sort_scored<T: PartialOrd>(scored: &mut [(usize, T)]) {
    scored.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.0.cmp(&y.0))
    });
}

/// Outcome of an epsilon-greedy choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    pub item: usize,
    /// The item was drawn uniformly rather than taken from the ranking.
    pub explored: bool,
}

/// With probability `eps` a uniformly random candidate, otherwise the top
/// ranked one.
pub fn explore<T: Scalar, R: Rng + ?Sized>(
    a: &[T],
    eps: f64,
    candidates: &[usize],
    tbl: &EmbeddingTable<T>,
    rng: &mut R,
) -> Result<Choice> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} outside [0, 1]")));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if eps > 0.0 && rng.random::<f64>() < eps {
        let item = candidates[rng.random_range(0..candidates.len())];
        return Ok(Choice { item, explored: true });
    }
    Ok(Choice { item: top_item(a, candidates, tbl)?, explored: false })
}

/// First entry of [`score_items`] without sorting the rest.
pub fn top_item<T: Scalar>(a: &[T], candidates: &[usize], tbl: &EmbeddingTable<T>) -> Result<usize> {
    if a.len() != tbl.k {
        return Err(Error::Shape(format!("action of length {} for k = {}", a.len(), tbl.k)));
    }
    let mut best: Option<(usize, T)> = None;
    for &i in candidates {
        tbl.check_item(i)?;
        let s = dot(tbl.item(i), a);
        best = match best {
            Some((bi, bs)) if bs > s || (bs == s && bi < i) => Some((bi, bs)),
            _ => Some((i, s)),
        };
    }
    best.map(|b| b.0).ok_or(Error::Empty("candidate set"))
}

/// Action stored for an explored item: the item's embedding direction rescaled
/// to the norm of the policy's action and clipped into the Tanh range, so that
/// the critic learns from an action consistent with the item actually shown.
pub fn item_action<T: Scalar>(policy_action: &[T], item: usize, tbl: &EmbeddingTable<T>) -> Vec<T> {
    let v = tbl.item(item);
    let vn = dot(v, v).sqrt();
    let an = dot(policy_action, policy_action).sqrt();
    let limit = T::of(0.999);
    if vn == T::zero() {
        return policy_action.to_vec();
    }
    let c = an / vn;
    v.iter().map(|&x| (x * c).max(-limit).min(limit)).collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DRRAGENT";
const CHECKPOINT_VERSION: u8 = 1;

/// Serializes the configuration, all four networks and their Adam state.
///
/// Layout (little-endian): magic, version byte, variant byte, then `n`, `k`,
/// the four hidden widths, batch size, decay steps, buffer capacity and
/// update count as u64; the ten float hyperparameters as f64; then for every
/// parameter tensor its rank, dims, Adam step count, values, first and second
/// moments.
pub fn encode_checkpoint<T: Scalar>(bundle: &AgentBundle<T>) -> Vec<u8> {
    let c = &bundle.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(c.variant.code());
    let ints = [
        c.n,
        c.k,
        c.actor_hidden[0],
        c.actor_hidden[1],
        c.critic_hidden[0],
        c.critic_hidden[1],
        c.batch_size,
        c.eps_decay_steps as usize,
        c.buffer_capacity,
        bundle.updates as usize,
    ];
    for v in ints {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    let floats = [
        c.actor_lr,
        c.critic_lr,
        c.l2,
        c.gamma,
        c.tau,
        c.eps_start,
        c.eps_end,
        c.priority_alpha,
        c.priority_beta_start,
        c.priority_beta_end,
    ];
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.priority_floor.to_le_bytes());
    for p in bundle.networks().iter().flatten() {
        out.extend_from_slice(&(p.shape().len() as u64).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.step_count.to_le_bytes());
        for t in [&p.value, &p.adam_m, &p.adam_v] {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<AgentBundle<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let code = r.take(1)?[0];
    let variant = Variant::from_code(code).ok_or_else(|| Error::Format(format!("unknown variant code {code}")))?;
    let mut ints = [0usize; 10];
    for v in &mut ints {
        *v = r.u64()? as usize;
    }
    let mut floats = [0f64; 11];
    for v in &mut floats {
        *v = r.f64()?;
    }
    let config = AgentConfig {
        variant,
        n: ints[0],
        k: ints[1],
        actor_hidden: [ints[2], ints[3]],
        critic_hidden: [ints[4], ints[5]],
        batch_size: ints[6],
        eps_decay_steps: ints[7] as u64,
        buffer_capacity: ints[8],
        actor_lr: floats[0],
        critic_lr: floats[1],
        l2: floats[2],
        gamma: floats[3],
        tau: floats[4],
        eps_start: floats[5],
        eps_end: floats[6],
        priority_alpha: floats[7],
        priority_beta_start: floats[8],
        priority_beta_end: floats[9],
        priority_floor: floats[10],
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    // shapes come from a freshly built bundle; the file must agree with them
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut bundle = AgentBundle::<T>::new(config, &mut rng)?;
    bundle.updates = ints[9] as u64;
    for p in bundle.networks_mut().into_iter().flatten() {
        let rank = r.u64()? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != p.shape() {
            return Err(Error::Format(format!(
                "tensor shape {shape:?} does not match expected {:?}",
                p.shape()
            )));
        }
        p.step_count = r.u64()?;
        for t in [&mut p.value, &mut p.adam_m, &mut p.adam_v] {
            for v in t.data_mut() {
                *v = T::of(r.f64()?);
            }
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
    }
    Ok(bundle)
}

pub fn save_checkpoint<T: Scalar>(bundle: &AgentBundle<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<AgentBundle<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::RatingScale;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(variant: Variant) -> AgentConfig {
        AgentConfig {
            variant,
            n: 2,
            k: 2,
            actor_hidden: [4, 4],
            critic_hidden: [4, 4],
            ..Default::default()
        }
    }

    fn tiny_table(rng: &mut ChaCha8Rng) -> EmbeddingTable<f64> {
        let mut tbl = EmbeddingTable::zeros(2, 2, 4, 3.0, RatingScale::FIVE_STAR);
        for v in tbl.user_vectors.iter_mut().chain(tbl.item_vectors.iter_mut()) {
            *v = rng.random_range(-1.0..1.0);
        }
        tbl
    }

    fn zero_bundle(variant: Variant) -> AgentBundle<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = AgentBundle::<f64>::new(tiny_config(variant), &mut rng).unwrap();
        for net in b.networks_mut() {
            for p in net {
                p.value.fill(0.0);
            }
        }
        b
    }

    #[test]
    fn zero_actor_gives_zero_action_and_zero_q() {
        let b = zero_bundle(Variant::DrrAve);
        let s = StateVec { values: vec![0.3; 6], variant: Variant::DrrAve };
        assert_eq!(b.actor_forward(&s).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.critic_forward(&s.values, &[0.5, -0.5]).unwrap(), 0.0);
    }

    #[test]
    fn actor_rejects_wrong_state() {
        let b = zero_bundle(Variant::DrrAve);
        let s = StateVec { values: vec![0.3; 5], variant: Variant::DrrAve };
        assert!(matches!(b.actor_forward(&s), Err(Error::Shape(_))));
        let s = StateVec { values: vec![0.3; 6], variant: Variant::DrrP };
        assert!(b.actor_forward(&s).is_err());
        assert!(b.critic_forward(&[0.0; 6], &[0.0; 3]).is_err());
    }

    #[test]
    fn actions_in_tanh_range_and_deterministic() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            AgentBundle::<f64>::new(tiny_config(Variant::DrrP), &mut rng).unwrap()
        };
        let (b1, b2) = (make(), make());
        let s = StateVec { values: vec![50.0, -80.0, 3.0, 9.0, 100.0, -7.0], variant: Variant::DrrP };
        let a1 = b1.actor_forward(&s).unwrap();
        assert_eq!(a1, b2.actor_forward(&s).unwrap());
        assert!(a1.iter().all(|x| x.abs() < 1.0));
    }

    #[test]
    fn score_items_examples() {
        let mut tbl = EmbeddingTable::<f64>::zeros(2, 1, 3, 3.0, RatingScale::FIVE_STAR);
        tbl.item_vectors.copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
        let r = score_items(&[1.0, 0.0], &[0, 1], &tbl).unwrap();
        assert_eq!(r[0], (0, 1.0));
        let r = score_items(&[0.0, 0.0], &[2, 0, 1], &tbl).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(score_items(&[0.0, 0.0], &[], &tbl).is_err());
    }

    #[test]
    fn score_items_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tbl = EmbeddingTable::<f64>::zeros(3, 1, 4, 3.0, RatingScale::FIVE_STAR);
        for v in tbl.item_vectors.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let a = [0.3, -0.8, 0.1];
        // oracle: explicit scores, pairwise selection of the max
        let mut remaining: Vec<usize> = (0..4).collect();
        let mut expected = Vec::new();
        while !remaining.is_empty() {
            let mut best = remaining[0];
            for &i in &remaining {
                let s = |j: usize| (0..3).map(|f| tbl.item_vectors[j * 3 + f] * a[f]).sum::<f64>();
                if s(i) > s(best) {
                    best = i;
                }
            }
            expected.push(best);
            remaining.retain(|&i| i != best);
        }
        let got: Vec<usize> = score_items(&a, &[0, 1, 2, 3], &tbl).unwrap().iter().map(|x| x.0).collect();
        assert_eq!(got, expected);
        assert_eq!(top_item(&a, &[3, 1, 0, 2], &tbl).unwrap(), expected[0]);
        assert_eq!(top_item(&[0.0; 3], &[3, 1, 2], &tbl).unwrap(), 1);
    }

    #[test]
    fn soft_update_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = AgentBundle::<f64>::new(tiny_config(Variant::DrrU), &mut rng).unwrap();
        let before = b.target_actor.clone();
        b.actor.layers[0].weight.value.fill(2.0);
        b.target_actor.layers[0].weight.value.fill(0.0);
        let snapshot = b.target_actor.clone();
        b.soft_update(0.0).unwrap();
        assert_eq!(b.target_actor, snapshot);
        b.soft_update(0.5).unwrap();
        assert!(b.target_actor.layers[0].weight.value.data().iter().all(|&v| v == 1.0));
        b.soft_update(1.0).unwrap();
        assert_eq!(b.target_actor.all_params().len(), before.all_params().len());
        for (t, o) in b.target_actor.all_params().iter().zip(b.actor.all_params()) {
            assert_eq!(t.value, o.value);
        }
        assert!(b.soft_update(1.5).is_err());
        assert!(b.soft_update(-0.1).is_err());
    }

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig::default();
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(5_000) - 0.525).abs() < 1e-12);
        assert_eq!(c.epsilon_at(10_000), 0.05);
        assert_eq!(c.epsilon_at(50_000), 0.05);
    }

    #[test]
    fn explore_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tbl = tiny_table(&mut rng);
        let a = [0.4, -0.2];
        let best = score_items(&a, &[0, 1, 2, 3], &tbl).unwrap()[0].0;
        for _ in 0..100 {
            let c = explore(&a, 0.0, &[0, 1, 2, 3], &tbl, &mut rng).unwrap();
            assert_eq!(c, Choice { item: best, explored: false });
        }
        assert!(explore(&a, 1.2, &[0], &tbl, &mut rng).is_err());
        assert!(explore(&a, 0.5, &[], &tbl, &mut rng).is_err());
    }

    #[test]
    fn item_action_points_at_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tbl = tiny_table(&mut rng);
        let a = [0.3, 0.4];
        let proxy = item_action(&a, 2, &tbl);
        let v = tbl.item(2);
        let cos = dot(&proxy, v) / (dot(&proxy, &proxy).sqrt() * dot(v, v).sqrt());
        assert!((cos - 1.0).abs() < 1e-9);
        assert!((dot(&proxy, &proxy).sqrt() - 0.5).abs() < 1e-9);
    }

    fn tiny_batch(rng: &mut ChaCha8Rng, size: usize) -> Vec<Transition<f64>> {
        (0..size)
            .map(|j| {
                let h = History::new(vec![rng.random_range(0..4), rng.random_range(0..4)]).unwrap();
                let item = rng.random_range(0..4);
                let reward: f64 = rng.random_range(-1.0..1.0);
                let next = h.update(item, reward);
                let action = vec![rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
                Transition::new(rng.random_range(0..2), h, action, reward, next, j % 3 == 2).unwrap()
            })
            .collect()
    }

    fn random_bundle(variant: Variant, seed: u64) -> AgentBundle<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = AgentBundle::<f64>::new(tiny_config(variant), &mut rng).unwrap();
        // distinct targets so that the TD target is not a function of the online nets
        for p in b.target_critic.params_mut().into_iter().chain(b.target_actor.all_params_mut()) {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        for w in b.actor.state_rep.item_weights.value.data_mut() {
            *w = rng.random_range(0.5..1.5);
        }
        // nonzero biases keep pre-activations off the ReLU kink at exactly 0
        for l in b.actor.layers.iter_mut().chain(b.critic.layers.iter_mut()) {
            for v in l.bias.value.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        b
    }

    /// Central differences over every scalar of every parameter tensor.
    fn check_gradients(
        params: &mut dyn FnMut() -> Vec<*mut Tensor<f64>>,
        loss: &mut dyn FnMut() -> f64,
        grads: &[Tensor<f64>],
    ) {
        let h = 1e-6;
        let tensors = params();
        assert_eq!(tensors.len(), grads.len());
        for (ti, (t, g)) in tensors.into_iter().zip(grads).enumerate() {
            for idx in 0..g.len() {
                // SAFETY: the pointers come from live parameters of a bundle
                // that is not otherwise borrowed while the loss is evaluated.
                let orig = unsafe { (*t).data()[idx] };
                unsafe { (*t).data_mut()[idx] = orig + h };
                let up = loss();
                unsafe { (*t).data_mut()[idx] = orig - h };
                let down = loss();
                unsafe { (*t).data_mut()[idx] = orig };
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.data()[idx];
                let tol = 1e-5 * (1.0 + numeric.abs().max(analytic.abs()));
                assert!(
                    (numeric - analytic).abs() < tol,
                    "tensor {ti} entry {idx}: finite difference {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        for seed in 0..10 {
            let variant = Variant::ALL[seed as usize % 4];
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let tbl = tiny_table(&mut rng);
            let batch = tiny_batch(&mut rng, 5);
            let refs: Vec<&Transition<f64>> = batch.iter().collect();
            let is_w: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
            let bundle = std::cell::RefCell::new(random_bundle(variant, seed));
            let (_, grads) = bundle.borrow().critic_loss_and_grads(&refs, &is_w, &tbl).unwrap();
            check_gradients(
                &mut || {
                    bundle
                        .borrow_mut()
                        .critic
                        .params_mut()
                        .into_iter()
                        .map(|p| &mut p.value as *mut _)
                        .collect()
                },
                &mut || bundle.borrow().critic_loss_and_grads(&refs, &is_w, &tbl).unwrap().0.loss,
                &grads,
            );
        }
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        for seed in 0..10 {
            let variant = Variant::ALL[seed as usize % 4];
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let tbl = tiny_table(&mut rng);
            let batch = tiny_batch(&mut rng, 4);
            let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
            let hist: Vec<&History> = batch.iter().map(|t| &t.history).collect();
            let bundle = std::cell::RefCell::new(random_bundle(variant, seed));
            let (loss, grads) = bundle.borrow().actor_loss_and_grads(&users, &hist, &tbl).unwrap();
            let fixed_states = bundle.borrow().actor.states(&users, &hist, &tbl).unwrap();
            let direct = {
                let b = bundle.borrow();
                let q = b.critic.q_values(&fixed_states, &b.actor.act_on_states(&fixed_states).unwrap()).unwrap();
                -q.iter().sum::<f64>() / q.len() as f64
            };
            assert!((loss - direct).abs() < 1e-12);
            assert_eq!(grads.len(), if variant.has_weights() { 7 } else { 6 });
            check_gradients(
                &mut || {
                    bundle
                        .borrow_mut()
                        .actor
                        .params_mut()
                        .into_iter()
                        .map(|p| &mut p.value as *mut _)
                        .collect()
                },
                &mut || {
                    // the policy gradient treats the critic's state input as data
                    let b = bundle.borrow();
                    let states = b.actor.states(&users, &hist, &tbl).unwrap();
                    let actions = b.actor.act_on_states(&states).unwrap();
                    let q = b.critic.q_values(&fixed_states, &actions).unwrap();
                    -q.iter().sum::<f64>() / q.len() as f64
                },
                &grads,
            );
        }
    }

    #[test]
    fn actor_update_leaves_critic_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tbl = tiny_table(&mut rng);
        let batch = tiny_batch(&mut rng, 4);
        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let hist: Vec<&History> = batch.iter().map(|t| &t.history).collect();
        let mut b = random_bundle(Variant::DrrAve, 3);
        let critic = b.critic.clone();
        let actor = b.actor.clone();
        b.actor_update(&users, &hist, &tbl).unwrap();
        assert_eq!(b.critic, critic);
        assert_ne!(b.actor.layers[2].weight.value, actor.layers[2].weight.value);
        assert_ne!(b.actor.state_rep.item_weights.value, actor.state_rep.item_weights.value);
    }

    #[test]
    fn td_targets_read_only_target_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tbl = tiny_table(&mut rng);
        let batch = tiny_batch(&mut rng, 6);
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let mut b = random_bundle(Variant::DrrP, 4);
        let y = b.td_targets(&refs, &tbl).unwrap();
        for p in b.actor.params_mut().into_iter().chain(b.critic.params_mut()) {
            p.value.fill(0.37);
        }
        assert_eq!(b.td_targets(&refs, &tbl).unwrap(), y);
        b.target_critic.layers[2].bias.value.fill(5.0);
        let y2 = b.td_targets(&refs, &tbl).unwrap();
        for (t, (a, c)) in batch.iter().zip(y.iter().zip(&y2)) {
            if t.terminal {
                assert_eq!(a, c);
                assert_eq!(*a, t.reward);
            } else {
                assert_ne!(a, c);
            }
        }
    }

    #[test]
    fn zero_td_error_gives_zero_loss_and_no_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tbl = tiny_table(&mut rng);
        let mut batch = tiny_batch(&mut rng, 4);
        for t in &mut batch {
            t.reward = 0.0;
        }
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let mut b = zero_bundle(Variant::DrrN);
        b.config.l2 = 0.0;
        let before = b.critic.clone();
        let step = b.critic_update(&refs, &[1.0; 4], &tbl).unwrap();
        assert_eq!(step.loss, 0.0);
        assert!(step.td_errors.iter().all(|&d| d == 0.0));
        for (p, q) in b.critic.params().iter().zip(before.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn critic_update_rejects_bad_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tbl = tiny_table(&mut rng);
        let batch = tiny_batch(&mut rng, 3);
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let mut b = random_bundle(Variant::DrrN, 1);
        assert!(b.critic_update(&refs, &[1.0; 2], &tbl).is_err());
        assert!(b.critic_update(&[], &[], &tbl).is_err());
    }

    #[test]
    fn repeated_critic_updates_fit_fixed_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tbl = tiny_table(&mut rng);
        let mut batch = tiny_batch(&mut rng, 8);
        for t in &mut batch {
            t.terminal = true;
        }
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let mut b = random_bundle(Variant::DrrAve, 2);
        b.config.critic_lr = 1e-2;
        let first = b.critic_update(&refs, &[1.0; 8], &tbl).unwrap().loss;
        let mut last = first;
        for _ in 0..300 {
            last = b.critic_update(&refs, &[1.0; 8], &tbl).unwrap().loss;
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tbl = tiny_table(&mut rng);
        let batch = tiny_batch(&mut rng, 4);
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let mut b = random_bundle(Variant::DrrU, 5);
        b.critic_update(&refs, &[1.0; 4], &tbl).unwrap();
        b.updates = 17;
        let bytes = encode_checkpoint(&b);
        let back: AgentBundle<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.param_digest(), b.param_digest());
        assert_eq!(back.config, b.config);
        assert_eq!(back.updates, 17);
        for (x, y) in back.networks().iter().flatten().zip(b.networks().iter().flatten()) {
            assert_eq!(x.value, y.value);
            assert_eq!(x.adam_m, y.adam_m);
            assert_eq!(x.adam_v, y.adam_v);
            assert_eq!(x.step_count, y.step_count);
        }
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f64>(&extra).is_err());
        assert!(decode_checkpoint::<f64>(b"NOTACKPT").is_err());
    }

    #[test]
    fn f32_bundle_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let b = AgentBundle::<f32>::new(tiny_config(Variant::DrrAve), &mut rng).unwrap();
        let a = b.actor_forward(&StateVec { values: vec![0.1f32; 6], variant: Variant::DrrAve }).unwrap();
        assert_eq!(a.len(), 2);
        let back: AgentBundle<f32> = decode_checkpoint(&encode_checkpoint(&b)).unwrap();
        assert_eq!(back.param_digest(), b.param_digest());
    }

    #[test]
    fn actor_step_does_not_lower_mean_q() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let tbl = tiny_table(&mut rng);
            let batch = tiny_batch(&mut rng, 6);
            let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
            let hist: Vec<&History> = batch.iter().map(|t| &t.history).collect();
            let mut b = random_bundle(Variant::ALL[seed as usize % 4], seed);
            let before = b.actor_update(&users, &hist, &tbl).unwrap();
            let (after, _) = b.actor_loss_and_grads(&users, &hist, &tbl).unwrap();
            assert!(after <= before + 1e-12, "{before} -> {after}");
        }
    }

    #[test]
    fn actor_zero_lr_or_flat_critic_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let tbl = tiny_table(&mut rng);
        let batch = tiny_batch(&mut rng, 4);
        let users: Vec<usize> = batch.iter().map(|t| t.user).collect();
        let hist: Vec<&History> = batch.iter().map(|t| &t.history).collect();
        let mut b = random_bundle(Variant::DrrU, 6);
        b.config.actor_lr = 0.0;
        let actor = b.actor.clone();
        b.actor_update(&users, &hist, &tbl).unwrap();
        for (p, q) in b.actor.params().iter().zip(actor.params()) {
            assert_eq!(p.value, q.value);
        }
        // a critic whose first layer ignores the action block is constant in a
        let mut b = random_bundle(Variant::DrrU, 6);
        b.config.l2 = 0.0;
        let d_state = b.actor.state_len();
        let w = &mut b.critic.layers[0].weight.value;
        let cols = w.cols();
        for r in d_state..w.rows() {
            w.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
        let (_, grads) = b.actor_loss_and_grads(&users, &hist, &tbl).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let actor = b.actor.clone();
        b.actor_update(&users, &hist, &tbl).unwrap();
        for (p, q) in b.actor.params().iter().zip(actor.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn td_target_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let tbl = tiny_table(&mut rng);
        let mut b = zero_bundle(Variant::DrrAve);
        // target critic outputs exactly 1.0 everywhere
        b.target_critic.layers[2].bias.value.fill(1.0);
        let h = History::new(vec![0, 1]).unwrap();
        let t = Transition::new(0, h.clone(), vec![0.0, 0.0], 0.5, h.clone(), false).unwrap();
        let y = b.td_targets(&[&t], &tbl).unwrap();
        assert!((y[0] - 1.4).abs() < 1e-12);
        b.config.gamma = 0.0;
        assert_eq!(b.td_targets(&[&t], &tbl).unwrap(), vec![0.5]);
    }
}
