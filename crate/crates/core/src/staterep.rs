//! State representation structures mapping the positive-history window (and
//! the user embedding) to the state vector consumed by the actor and critic.
//!
//! | variant   | layout                                               | length            |
//! |-----------|------------------------------------------------------|-------------------|
//! | `DrrN`    | `i_1 .. i_n`                                         | `n k`             |
//! | `DrrP`    | `i_1 .. i_n, p_ab (a < b)`                           | `k (n + n(n-1)/2)`|
//! | `DrrU`    | `u * w_a i_a (a = 1..n), p_ab (a < b)`               | `k (n + n(n-1)/2)`|
//! | `DrrAve`  | `u, u * g, g` with `g = (1/n) sum_a w_a i_a`         | `3 k`             |
//!
//! `p_ab = (w_a i_a) * (w_b i_b)` element-wise; pairs are emitted in
//! lexicographic `(a, b)` order. The weights `w` are attached to history slots,
//! not to item identities.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::{Graph, Param, Scalar, Tensor, Var};
use crate::pmf::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    DrrN,
    DrrP,
    DrrU,
    DrrAve,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::DrrN, Variant::DrrP, Variant::DrrU, Variant::DrrAve];

    pub fn state_len(self, n: usize, k: usize) -> usize {
        match self {
            Variant::DrrN => n * k,
            Variant::DrrP | Variant::DrrU => k * (n + n * (n - 1) / 2),
            Variant::DrrAve => 3 * k,
        }
    }

    /// Whether the variant has trainable slot weights.
    pub fn has_weights(self) -> bool {
        !matches!(self, Variant::DrrN)
    }

    pub fn uses_user(self) -> bool {
        matches!(self, Variant::DrrU | Variant::DrrAve)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DrrN => "drr_n",
            Variant::DrrP => "drr_p",
            Variant::DrrU => "drr_u",
            Variant::DrrAve => "drr_ave",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Variant> {
        Variant::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s || v.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// The `n` most recent positively rated items, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct History {
    items: Vec<usize>,
}

impl History {
    pub fn new(items: Vec<usize>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("history"));
        }
        Ok(History { items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Positive reward shifts the window: drop the oldest, append `item`.
    /// Zero or negative reward leaves it unchanged.
    pub fn update(&self, item: usize, reward: f64) -> History {
        if reward > 0.0 {
            let mut items = Vec::with_capacity(self.items.len());
            items.extend_from_slice(&self.items[1..]);
            items.push(item);
            History { items }
        } else {
            self.clone()
        }
    }
}

/// A computed state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVec<T> {
    pub values: Vec<T>,
    pub variant: Variant,
}

/// Slot weights of the state module.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRep<T> {
    pub variant: Variant,
    pub n: usize,
    pub item_weights: Param<T>,
}

impl<T: Scalar> StateRep<T> {
    /// All slot weights start at 1.
    pub fn new(variant: Variant, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("history length n must be >= 1".into()));
        }
        Ok(StateRep {
            variant,
            n,
            item_weights: Param::new(Tensor::filled(&[n], T::one())),
        })
    }

    pub fn state_len(&self, k: usize) -> usize {
        self.variant.state_len(self.n, k)
    }

    /// Records the state computation for a batch of `(user, history)` pairs.
    /// `weights` is the graph node holding the slot weights (a leaf when they
    /// are trained, a constant otherwise; ignored by `DrrN`).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        weights: Var,
        users: &[usize],
        histories: &[&History],
        tbl: &EmbeddingTable<T>,
    ) -> Result<Var> {
        if users.len() != histories.len() || histories.is_empty() {
            return Err(Error::Shape(format!(
                "{} users for {} histories",
                users.len(),
                histories.len()
            )));
        }
        let (b, k, n) = (histories.len(), tbl.k, self.n);
        for h in histories {
            if h.len() != n {
                return Err(Error::Shape(format!("history of length {} for n = {n}", h.len())));
            }
            for &i in h.items() {
                tbl.check_item(i)?;
            }
        }
        // slot a of every history, stacked into a [B x k] block
        let slots: Vec<Var> = (0..n)
            .map(|a| {
                let mut data = Vec::with_capacity(b * k);
                for h in histories {
                    data.extend_from_slice(tbl.item(h.items()[a]));
                }
                g.constant(Tensor::from_vec(vec![b, k], data).expect("b*k values"))
            })
            .collect();
        let user_block = if self.variant.uses_user() {
            let mut data = Vec::with_capacity(b * k);
            for &u in users {
                tbl.check_user(u)?;
                data.extend_from_slice(tbl.user(u));
            }
            Some(g.constant(Tensor::from_vec(vec![b, k], data)?))
        } else {
            None
        };

        match self.variant {
            Variant::DrrN => g.concat(&slots),
            Variant::DrrP => {
                let weighted = weighted_slots(g, &slots, weights)?;
                let mut parts = slots.clone();
                parts.extend(pair_products(g, &weighted)?);
                g.concat(&parts)
            }
            Variant::DrrU => {
                let u = user_block.expect("DrrU uses the user block");
                let weighted = weighted_slots(g, &slots, weights)?;
                let mut parts = Vec::with_capacity(n + n * (n - 1) / 2);
                for &wi in &weighted {
                    parts.push(g.mul(u, wi)?);
                }
                parts.extend(pair_products(g, &weighted)?);
                g.concat(&parts)
            }
            Variant::DrrAve => {
                let u = user_block.expect("DrrAve uses the user block");
                let pooled = g.weighted_average(&slots, weights)?;
                let inter = g.mul(u, pooled)?;
                g.concat(&[u, inter, pooled])
            }
        }
    }

    /// Forward pass outside any training graph.
    pub fn compute(&self, user: usize, history: &History, tbl: &EmbeddingTable<T>) -> Result<StateVec<T>> {
        let mut g = Graph::new();
        let w = g.frozen(&self.item_weights);
        let s = self.forward(&mut g, w, &[user], &[history], tbl)?;
        Ok(StateVec {
            values: g.value(s).data().to_vec(),
            variant: self.variant,
        })
    }
}

fn weighted_slots<T: Scalar>(g: &mut Graph<T>, slots: &[Var], weights: Var) -> Result<Vec<Var>> {
    slots
        .iter()
        .enumerate()
        .map(|(a, &x)| g.scale_slot(x, weights, a))
        .collect()
}

fn pair_products<T: Scalar>(g: &mut Graph<T>, weighted: &[Var]) -> Result<Vec<Var>> {
    let n = weighted.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            out.push(g.mul(weighted[a], weighted[b])?);
        }
    }
    Ok(out)
}

/// Free-function form of [`History::update`].
pub fn update_history(history: &History, recommended_item: usize, reward: f64) -> History {
    history.update(recommended_item, reward)
}
