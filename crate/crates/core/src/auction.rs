//! Ascending-price deferred acceptance shared by every layer of both markets.
//!
//! Buyers (MUs, or ES cloud-slot requests) carry one price level. A buyer
//! offers seller `j` the price `min(level, cap_j)` and ranks sellers by
//! `value_j - price_j`, ties to the lower seller id.
//!
//! Prices follow a shared clock: round `r` quotes `p_min + (r - 1) * step`.
//! Within a round, deferred acceptance runs at fixed levels until nobody
//! proposes. A rejection below the cap closes the pair for the rest of the
//! round and lifts the buyer to the next round's clock; a rejection at the cap
//! exhausts the pair. A buyer whose caps all sit below the clock is lifted to
//! its top cap on the spot instead, so once the clock passes every cap no
//! further round opens and rounds never exceed
//! `ceil((max cap - p_min) / step) + 1`.
//!
//! Exhaustion is revisited whenever the seller's held set changes, so the
//! terminal state has no seller that would now take an exhausted buyer.

use serde::{Deserialize, Serialize};

use crate::error::{MarketError, Result};

const KEY_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Opt {
    pub seller: usize,
    /// Buyer-side value; ranking key is `value - price`.
    pub value: f64,
    pub cap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bid {
    pub buyer: usize,
    /// Index into the buyer's option list.
    pub opt: usize,
    pub price: f64,
}

/// A seller's choice function over a set of bids.
pub trait ChoiceRule {
    /// Buyers the seller keeps out of `bids`.
    fn choose(&self, seller: usize, bids: &[Bid]) -> Vec<usize>;

    /// Held buyers that drop out after being told the seller's new set.
    fn evict(&self, _seller: usize, _held: &[Bid]) -> Vec<usize> {
        Vec::new()
    }
}

/// Which layer an auction clears; only MU↔ES traffic counts toward NI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    MuEs,
    EsCs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Proposal,
    Response,
    /// Unsolicited message: displacement, withdrawal or eviction.
    Notice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub link: Link,
    pub round: u32,
    pub kind: InteractionKind,
    pub buyer: usize,
    pub seller: usize,
}

/// Interaction counters. Every proposal, response and unsolicited notice is one interaction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Traffic {
    pub proposals: u64,
    pub responses: u64,
    pub notices: u64,
}

impl Traffic {
    pub fn total(&self) -> u64 {
        self.proposals + self.responses + self.notices
    }
}

#[derive(Clone, Debug)]
pub struct Auction {
    pub opts: Vec<Vec<Opt>>,
    pub level: Vec<f64>,
    p_min: f64,
    step: f64,
    /// Clock of the current round.
    clock: f64,
    top: Vec<f64>,
    /// (seller, opt, price) currently held.
    pub held_at: Vec<Option<(usize, usize, f64)>>,
    pub held: Vec<Vec<usize>>,
    by_seller: Vec<Vec<(usize, usize)>>,
    pub exhausted: Vec<Vec<bool>>,
    pub blocked: Vec<Vec<bool>>,
    /// Rejected below the cap in the current round.
    closed: Vec<Vec<bool>>,
    /// Lifted to the clock when the next round opens.
    raise: Vec<bool>,
    removed: Vec<bool>,
    dirty: Vec<bool>,
    pub traffic: Traffic,
    /// Proposals each buyer made; each is one request/reply exchange.
    pub exchanges: Vec<u32>,
    pub rounds: u32,
    /// Every counted message, when tracing is on.
    pub trace: Option<Vec<Interaction>>,
    link: Link,
}

impl Auction {
    /// Options with a cap below the opening price are dropped.
    pub fn new(n_sellers: usize, opts: Vec<Vec<Opt>>, p_min: f64, step: f64) -> Self {
        let opts: Vec<Vec<Opt>> = opts
            .into_iter()
            .map(|o| o.into_iter().filter(|x| x.cap >= p_min).collect())
            .collect();
        let n = opts.len();
        let mut by_seller = vec![Vec::new(); n_sellers];
        for (b, o) in opts.iter().enumerate() {
            for (k, x) in o.iter().enumerate() {
                by_seller[x.seller].push((b, k));
            }
        }
        let top = opts.iter().map(|o| o.iter().map(|x| x.cap).fold(p_min, f64::max)).collect();
        Auction {
            exhausted: opts.iter().map(|o| vec![false; o.len()]).collect(),
            blocked: opts.iter().map(|o| vec![false; o.len()]).collect(),
            closed: opts.iter().map(|o| vec![false; o.len()]).collect(),
            raise: vec![false; n],
            opts,
            level: vec![p_min; n],
            p_min,
            step,
            clock: p_min,
            top,
            held_at: vec![None; n],
            held: vec![Vec::new(); n_sellers],
            by_seller,
            removed: vec![false; n],
            dirty: vec![false; n],
            traffic: Traffic::default(),
            exchanges: vec![0; n],
            rounds: 0,
            trace: None,
            link: Link::MuEs,
        }
    }

    pub fn with_trace(mut self, link: Link) -> Self {
        self.trace = Some(Vec::new());
        self.link = link;
        self
    }

    fn note(&mut self, kind: InteractionKind, buyer: usize, seller: usize) {
        match kind {
            InteractionKind::Proposal => self.traffic.proposals += 1,
            InteractionKind::Response => self.traffic.responses += 1,
            InteractionKind::Notice => self.traffic.notices += 1,
        }
        let (link, round) = (self.link, self.rounds);
        if let Some(t) = self.trace.as_mut() {
            t.push(Interaction { link, round, kind, buyer, seller });
        }
    }

    pub fn n_buyers(&self) -> usize {
        self.opts.len()
    }

    pub fn price(&self, buyer: usize, opt: usize) -> f64 {
        self.level[buyer].min(self.opts[buyer][opt].cap)
    }

    fn key(&self, buyer: usize, opt: usize, price: f64) -> f64 {
        self.opts[buyer][opt].value - price
    }

    fn open(&self, buyer: usize, opt: usize) -> bool {
        !self.exhausted[buyer][opt] && !self.blocked[buyer][opt] && !self.closed[buyer][opt]
    }

    fn best_open(&self, buyer: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for o in 0..self.opts[buyer].len() {
            if !self.open(buyer, o) {
                continue;
            }
            let k = self.key(buyer, o, self.price(buyer, o));
            // Options are stored in ascending seller order, so strict > keeps the lower id.
            if best.is_none_or(|(_, bk)| k > bk + KEY_EPS) {
                best = Some((o, k));
            }
        }
        best.map(|(o, _)| o)
    }

    fn held_bids(&self, seller: usize) -> Vec<Bid> {
        self.held[seller]
            .iter()
            .map(|&b| {
                let (_, opt, price) = self.held_at[b].expect("held buyer has a record");
                Bid { buyer: b, opt, price }
            })
            .collect()
    }

    pub fn held_bids_of(&self, seller: usize) -> Vec<Bid> {
        self.held_bids(seller)
    }

    fn reject(&mut self, buyer: usize, opt: usize, price: f64) {
        if price >= self.opts[buyer][opt].cap - KEY_EPS {
            self.exhausted[buyer][opt] = true;
        } else if self.clock >= self.top[buyer] && self.level[buyer] < self.top[buyer] {
            // The clock is past every cap of this buyer: go straight to the top.
            self.level[buyer] = self.top[buyer];
            self.closed[buyer].fill(false);
        } else {
            self.closed[buyer][opt] = true;
            self.raise[buyer] = true;
        }
    }

    fn release(&mut self, buyer: usize) -> Option<(usize, usize, f64)> {
        let rec = self.held_at[buyer].take();
        if let Some((s, _, _)) = rec {
            self.held[s].retain(|&b| b != buyer);
        }
        rec
    }

    /// Seller drops held buyers as if it had rejected them at their held price.
    pub fn force_reject(&mut self, seller: usize, buyers: &[usize]) {
        for &b in buyers {
            if let Some((s, opt, price)) = self.held_at[b] {
                if s == seller {
                    self.release(b);
                    self.note(InteractionKind::Notice, b, s);
                    self.reject(b, opt, price);
                }
            }
        }
    }

    /// Buyer leaves the market altogether.
    pub fn remove_buyer(&mut self, buyer: usize) {
        if let Some((s, _, _)) = self.release(buyer) {
            self.note(InteractionKind::Notice, buyer, s);
        }
        self.removed[buyer] = true;
    }

    /// Seller leaves the market; its buyers become free and can never return.
    pub fn remove_seller(&mut self, seller: usize) {
        for b in self.held[seller].clone() {
            self.release(b);
            self.note(InteractionKind::Notice, b, seller);
        }
        for &(b, o) in &self.by_seller[seller] {
            self.blocked[b][o] = true;
        }
    }

    pub fn is_removed(&self, buyer: usize) -> bool {
        self.removed[buyer]
    }

    /// Re-admits exhausted pairs the seller would now take (e.g. after its
    /// choice rule changed or its held set shrank).
    pub fn recheck(&mut self, rule: &dyn ChoiceRule, seller: usize) {
        let base = self.held_bids(seller);
        for i in 0..self.by_seller[seller].len() {
            let (b, o) = self.by_seller[seller][i];
            if self.removed[b] || !self.exhausted[b][o] || self.blocked[b][o] {
                continue;
            }
            let mut bids = base.clone();
            bids.push(Bid { buyer: b, opt: o, price: self.price(b, o) });
            if rule.choose(seller, &bids).contains(&b) {
                self.exhausted[b][o] = false;
                self.dirty[b] = true;
            }
        }
    }

    pub fn recheck_all(&mut self, rule: &dyn ChoiceRule) {
        for s in 0..self.held.len() {
            self.recheck(rule, s);
        }
    }

    /// Opens the next clock round: lifts buyers rejected below a cap.
    fn open_round(&mut self, round: u32) {
        let clock = self.p_min + f64::from(round - 1) * self.step;
        self.clock = clock;
        for b in 0..self.n_buyers() {
            if !std::mem::take(&mut self.raise[b]) {
                continue;
            }
            self.level[b] = self.level[b].max(clock).min(self.top[b]);
            self.closed[b].fill(false);
            // A held buyer may now prefer a seller that turned it down.
            if self.held_at[b].is_some() {
                self.dirty[b] = true;
            }
        }
    }

    /// One deferred-acceptance step at fixed levels. False when nobody proposed.
    fn step_once(&mut self, rule: &dyn ChoiceRule) -> bool {
        let mut proposals: Vec<Vec<Bid>> = vec![Vec::new(); self.held.len()];
        let mut any = false;
        for b in 0..self.n_buyers() {
            if self.removed[b] {
                continue;
            }
            let choice = match self.held_at[b] {
                None => self.best_open(b),
                Some((_, h_opt, h_price)) if self.dirty[b] => self
                    .best_open(b)
                    .filter(|&o| self.key(b, o, self.price(b, o)) > self.key(b, h_opt, h_price) + KEY_EPS),
                Some(_) => None,
            };
            self.dirty[b] = false;
            if let Some(o) = choice {
                if let Some((s, _, _)) = self.release(b) {
                    // Withdrawal notice to the seller being left.
                    self.note(InteractionKind::Notice, b, s);
                }
                let price = self.price(b, o);
                let seller = self.opts[b][o].seller;
                proposals[seller].push(Bid { buyer: b, opt: o, price });
                self.exchanges[b] += 1;
                self.note(InteractionKind::Proposal, b, seller);
                any = true;
            }
        }
        if !any {
            return false;
        }
        let mut changed = Vec::new();
        for (s, new) in proposals.into_iter().enumerate() {
            if new.is_empty() {
                continue;
            }
            let mut bids = self.held_bids(s);
            let before: Vec<usize> = self.held[s].clone();
            bids.extend(new.iter().copied());
            let mut keep = rule.choose(s, &bids);
            keep.sort_unstable();
            for bid in &new {
                self.note(InteractionKind::Response, bid.buyer, s);
                if keep.binary_search(&bid.buyer).is_ok() {
                    self.held_at[bid.buyer] = Some((s, bid.opt, bid.price));
                } else {
                    self.reject(bid.buyer, bid.opt, bid.price);
                }
            }
            for &b in &before {
                if keep.binary_search(&b).is_err() {
                    let (_, opt, price) = self.held_at[b].take().expect("held");
                    self.note(InteractionKind::Notice, b, s);
                    self.reject(b, opt, price);
                }
            }
            self.held[s] = keep;
            if self.held[s] != before {
                changed.push(s);
            }
            let evicted = rule.evict(s, &self.held_bids(s));
            for b in evicted {
                if let Some((_, opt, _)) = self.release(b) {
                    self.blocked[b][opt] = true;
                    self.note(InteractionKind::Notice, b, s);
                    if !changed.contains(&s) {
                        changed.push(s);
                    }
                }
            }
        }
        for s in changed {
            self.recheck(rule, s);
        }
        true
    }

    /// Plays clock rounds until a round ends with no rejection below a cap.
    /// Returns the rounds in which anybody proposed.
    pub fn run(&mut self, rule: &dyn ChoiceRule, max_rounds: u32) -> Result<u32> {
        let start = self.rounds;
        // Fixed-price deferred acceptance closes or exhausts a pair per
        // rejection; the guard only trips on a non-substitutable choice rule.
        let step_guard = 64 * (self.opts.iter().map(Vec::len).sum::<usize>() + 1);
        loop {
            let round = self.rounds + 1;
            self.open_round(round);
            self.rounds = round;
            let mut steps = 0usize;
            while self.step_once(rule) {
                steps += 1;
                if steps > step_guard {
                    return Err(MarketError::Invariant(format!("round {round} did not settle at fixed prices")));
                }
            }
            if steps == 0 {
                self.rounds -= 1;
                break;
            }
            if self.rounds - start > max_rounds {
                return Err(MarketError::Invariant(format!(
                    "auction exceeded {max_rounds} rounds without settling"
                )));
            }
            if !self.raise.iter().zip(&self.removed).any(|(&r, &gone)| r && !gone) {
                break;
            }
        }
        Ok(self.rounds - start)
    }
}
