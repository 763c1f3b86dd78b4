//! DQN training loop in which every feasible action is simulated at each
//! step and the outcomes are stored together as one replay entry.
//!
//! Random number consumption order (single ChaCha8 stream seeded from
//! [`TrainerConfig::seed`]): per epoch one draw for the episode; per period
//! one draw for the exploration coin and, when exploring, one draw for the
//! action; per update the batch indices.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actionspace::{
    action_count, argmax, map_action, ActionIndex, FeasibilityContext, TradeAction,
};
use crate::environment::{EnvError, Environment, EpisodeConfig, PortfolioState};
use crate::marketdata::MarketData;
use crate::qnet::{Gradients, QNetError, QNetwork};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] QNetError),
    #[error("non-finite loss in epoch {epoch}")]
    Diverged {
        epoch: usize,
        last_good: Box<QNetwork>,
    },
    #[error("episode catalog is empty")]
    NoEpisodes,
    #[error("invalid trainer configuration: {0}")]
    Config(String),
}

/// A contiguous run of tradable periods (bar indices, inclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Calendar year for yearly catalogs.
    pub label: i32,
    pub first: usize,
    pub last: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.last + 1 - self.first
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCatalog {
    /// Chronological order.
    pub episodes: Vec<Episode>,
    pub test_year: i32,
}

impl EpisodeCatalog {
    /// One episode per calendar year of bars `train_first..=train_last`.
    /// A period is tradable when its window is full (`t >= window`) and its
    /// next bar is still inside the training range.
    pub fn yearly(
        market: &MarketData,
        train_first: usize,
        train_last: usize,
        window: usize,
        test_year: i32,
    ) -> Result<Self, TrainError> {
        let mut episodes = Vec::new();
        for (year, (start, end)) in market.years() {
            let first = start.max(train_first).max(window);
            let last = end.min(train_last.saturating_sub(1));
            if first <= last && year < test_year {
                episodes.push(Episode {
                    label: year,
                    first,
                    last,
                });
            }
        }
        if episodes.is_empty() {
            return Err(TrainError::NoEpisodes);
        }
        Ok(Self {
            episodes,
            test_year,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Truncated geometric probabilities in catalog order. Recency rank `k`
    /// (0 = episode closest to the test period) gets
    /// `beta (1 - beta)^k / (1 - (1 - beta)^N)`.
    pub fn probabilities(&self, beta: f64) -> Vec<f64> {
        let n = self.episodes.len();
        let norm = 1.0 - (1.0 - beta).powi(n as i32);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| std::cmp::Reverse((self.episodes[i].label, self.episodes[i].first)));
        let mut probs = vec![0.0; n];
        for (rank, &i) in order.iter().enumerate() {
            probs[i] = beta * (1.0 - beta).powi(rank as i32) / norm;
        }
        probs
    }
}

/// Draws an episode index by inverting the cumulative distribution.
pub fn sample_episode(catalog: &EpisodeCatalog, beta: f64, rng: &mut ChaCha8Rng) -> usize {
    let probs = catalog.probabilities(beta);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Outcome of one simulated action.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub action: TradeAction,
    pub reward: f64,
    pub next_state: PortfolioState,
    /// The next state lies past the end of the episode.
    pub terminal: bool,
}

/// Every feasible action's outcome from one shared state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceList {
    pub state: PortfolioState,
    pub entries: Vec<Experience>,
}

impl ExperienceList {
    pub fn entry(&self, action: &TradeAction) -> Option<&Experience> {
        self.entries.iter().find(|e| e.action == *action)
    }
}

/// Bounded FIFO of experience lists.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<ExperienceList>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, list: ExperienceList) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(list);
    }

    pub fn get(&self, i: usize) -> Option<&ExperienceList> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperienceList> {
        self.items.iter()
    }

    /// `batch` distinct indices, or `None` while the memory holds fewer lists.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        if self.items.len() < batch || batch == 0 {
            return None;
        }
        Some(rand::seq::index::sample(rng, self.items.len(), batch).into_vec())
    }
}

/// Linear decay from `start` to `end` over the first `decay_fraction` of
/// the epochs, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_fraction: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.1,
            decay_fraction: 0.8,
        }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, epoch: usize, epochs: usize) -> f64 {
        let span = self.decay_fraction * epochs as f64;
        if span <= 0.0 {
            return self.end;
        }
        let frac = (epoch as f64 / span).min(1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub memory_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            gamma: 0.9,
            beta: 0.3,
            learning_rate: 1e-7,
            memory_capacity: 2000,
            epsilon: EpsilonSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::Config(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(TrainError::Config(format!(
                "beta {} outside (0, 1)",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(TrainError::Config("learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Epsilon-greedy choice. With probability `epsilon` a uniformly random
/// feasible action; otherwise the arg-max, mapped when infeasible.
pub fn act(
    ctx: &FeasibilityContext,
    q_values: &[f64],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> TradeAction {
    let u: f64 = rng.gen();
    if u < epsilon {
        let feasible = ctx.feasible_set();
        let k = rng.gen_range(0..feasible.len());
        return feasible[k].clone();
    }
    greedy_action(ctx, q_values)
}

/// Arg-max action, passed through the mapping function when infeasible.
pub fn greedy_action(ctx: &FeasibilityContext, q_values: &[f64]) -> TradeAction {
    let best =
        TradeAction::decode(ActionIndex(argmax(q_values)), ctx.assets()).expect("q-vector width");
    if ctx.is_feasible(&best) {
        best
    } else {
        map_action(ctx, &best, q_values)
    }
}

/// Regression targets for one experience list.
///
/// Feasible action `a` with reward `r` and next state `s'` gets
/// `r + gamma * Q'(s', a*)`, where `a*` is the target network's arg-max at
/// `s'` mapped to a feasible action if needed; terminal entries get `r`.
/// Every other output keeps its current prediction and is marked inactive.
pub fn build_targets_with<F>(
    list: &ExperienceList,
    gamma: f64,
    online_q: &[f64],
    cfg: &EpisodeConfig,
    mut target_q: F,
) -> (Vec<f64>, Vec<bool>)
where
    F: FnMut(&PortfolioState) -> Vec<f64>,
{
    let mut z = online_q.to_vec();
    let mut active = vec![false; online_q.len()];
    for e in &list.entries {
        let idx = e.action.encode().0;
        let bootstrap = if e.terminal || gamma == 0.0 {
            0.0
        } else {
            let q_next = target_q(&e.next_state);
            let ctx = cfg.context(&e.next_state.weights, e.next_state.value);
            let best = greedy_action(&ctx, &q_next);
            q_next[best.encode().0]
        };
        z[idx] = e.reward + gamma * bootstrap;
        active[idx] = true;
    }
    (z, active)
}

pub fn build_targets(
    list: &ExperienceList,
    target: &QNetwork,
    gamma: f64,
    online_q: &[f64],
    cfg: &EpisodeConfig,
) -> Result<(Vec<f64>, Vec<bool>), QNetError> {
    let mut err = None;
    let out = build_targets_with(list, gamma, online_q, cfg, |s| match target.forward(s) {
        Ok(q) => q,
        Err(e) => {
            err = Some(e);
            vec![0.0; online_q.len()]
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub episode_year: i32,
    pub loss_mean: f64,
    pub episode_return: f64,
    pub epsilon: f64,
    pub updates: usize,
}

pub fn write_log_csv<W: Write>(log: &[EpochLog], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "episode_year",
        "loss_mean",
        "episode_return",
        "epsilon",
    ])?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.episode_year.to_string(),
            row.loss_mean.to_string(),
            row.episode_return.to_string(),
            row.epsilon.to_string(),
        ])?;
    }
    w.flush()
}

pub struct TrainOutcome {
    pub network: QNetwork,
    pub log: Vec<EpochLog>,
}

pub struct Trainer {
    env: Environment,
    cfg: TrainerConfig,
    online: QNetwork,
    target: QNetwork,
    replay: ReplayMemory,
    rng: ChaCha8Rng,
    /// Encoded features per period; populated only while the encoder is frozen.
    latents: Vec<Option<Vec<f64>>>,
}

impl Trainer {
    pub fn new(
        env: Environment,
        cfg: TrainerConfig,
        network: QNetwork,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if network.assets != env.config().assets || network.window != env.config().window {
            return Err(TrainError::Config(format!(
                "network expects {} assets / window {}, environment has {} / {}",
                network.assets,
                network.window,
                env.config().assets,
                env.config().window
            )));
        }
        let target = network.clone_to_target();
        Ok(Self {
            replay: ReplayMemory::new(cfg.memory_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            latents: Vec::new(),
            env,
            cfg,
            online: network,
            target,
        })
    }

    pub fn network(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn replay(&self) -> &ReplayMemory {
        &self.replay
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    fn prepare_latents(&mut self, catalog: &EpisodeCatalog) -> Result<(), TrainError> {
        self.latents.clear();
        if !self.online.encoder_frozen {
            return Ok(());
        }
        let last = catalog
            .episodes
            .iter()
            .map(|e| e.last + 1)
            .max()
            .unwrap_or(0);
        let first = catalog.episodes.iter().map(|e| e.first).min().unwrap_or(0);
        let periods: Vec<usize> = (first..=last).collect();
        let encoded: Vec<(usize, Vec<f64>)> = periods
            .par_iter()
            .map(|&t| {
                let x = self.env.features(t)?;
                Ok((t, self.online.encode(&x)))
            })
            .collect::<Result<_, EnvError>>()?;
        self.latents = vec![None; last + 1];
        for (t, l) in encoded {
            self.latents[t] = Some(l);
        }
        Ok(())
    }

    fn q_values(&self, net: &QNetwork, state: &PortfolioState) -> Result<Vec<f64>, QNetError> {
        match self.latents.get(state.period) {
            Some(Some(l)) if net.encoder_frozen => Ok(net.q_from_latents(l, &state.weights)),
            _ => net.forward(state),
        }
    }

    /// One gradient step on a sampled batch; `None` while the memory is short.
    pub fn update(&mut self) -> Result<Option<f64>, TrainError> {
        let Some(indices) = self
            .replay
            .sample_indices(self.cfg.batch_size, &mut self.rng)
        else {
            return Ok(None);
        };
        let cfg = self.env.config().clone();
        let gamma = self.cfg.gamma;
        let this = &*self;
        let per_list: Vec<(f64, Gradients)> = indices
            .par_iter()
            .map(|&i| {
                let list = this.replay.get(i).expect("sampled index");
                let online_q = this.q_values(&this.online, &list.state)?;
                let mut err = None;
                let (z, active) = build_targets_with(list, gamma, &online_q, &cfg, |s| {
                    this.q_values(&this.target, s).unwrap_or_else(|e| {
                        err = Some(e);
                        vec![0.0; online_q.len()]
                    })
                });
                if let Some(e) = err {
                    return Err(e);
                }
                match this.latents.get(list.state.period) {
                    Some(Some(l)) if this.online.encoder_frozen => this
                        .online
                        .backward_from_latents(l, &list.state.weights, &z, &active),
                    _ => {
                        this.online
                            .backward(&list.state.features, &list.state.weights, &z, &active)
                    }
                }
            })
            .collect::<Result<_, QNetError>>()?;
        let mut grads = Gradients::zeros_for(&self.online);
        let mut loss = 0.0;
        for (l, g) in &per_list {
            loss += l;
            grads.add(g);
        }
        let k = per_list.len() as f64;
        loss /= k;
        grads.scale(1.0 / k);
        if !loss.is_finite() || !grads.all_finite() {
            return Ok(Some(f64::NAN));
        }
        self.online.sgd_update(&grads, self.cfg.learning_rate);
        Ok(Some(loss))
    }

    /// Simulates every feasible action from `state`.
    pub fn experience_list(
        &self,
        state: &PortfolioState,
        terminal: bool,
    ) -> Result<ExperienceList, TrainError> {
        let outcomes = self.env.simulate_all(state)?.ok_or_else(|| {
            TrainError::Config(format!("period {} has no next-period data", state.period))
        })?;
        Ok(ExperienceList {
            state: state.clone(),
            entries: outcomes
                .into_iter()
                .map(|(action, o)| Experience {
                    action,
                    reward: o.reward,
                    next_state: o.next_state,
                    terminal,
                })
                .collect(),
        })
    }

    /// Runs one epoch over `episode`.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        episode: &Episode,
        epsilon: f64,
    ) -> Result<EpochLog, TrainError> {
        let mut state = self.env.initial_state(episode.first)?;
        let mut losses = Vec::new();
        for t in episode.first..=episode.last {
            let q = self.q_values(&self.online, &state)?;
            let ctx = self.env.context(&state);
            let action = act(&ctx, &q, epsilon, &mut self.rng);
            let list = self.experience_list(&state, t == episode.last)?;
            let next = list
                .entry(&action)
                .expect("chosen action is feasible")
                .next_state
                .clone();
            self.replay.push(list);
            if let Some(loss) = self.update()? {
                if !loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        last_good: Box::new(self.online.clone()),
                    });
                }
                losses.push(loss);
            }
            state = next;
        }
        self.target = self.online.clone_to_target();
        let p0 = self.env.config().initial_value;
        Ok(EpochLog {
            epoch,
            episode_year: episode.label,
            loss_mean: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            episode_return: (state.value - p0) / p0,
            epsilon,
            updates: losses.len(),
        })
    }

    /// Full training run; `on_epoch` sees each log row and the current network.
    pub fn train<F>(
        mut self,
        catalog: &EpisodeCatalog,
        mut on_epoch: F,
    ) -> Result<TrainOutcome, TrainError>
    where
        F: FnMut(&EpochLog, &QNetwork),
    {
        if catalog.is_empty() {
            return Err(TrainError::NoEpisodes);
        }
        self.prepare_latents(catalog)?;
        let mut log = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let epsilon = self.cfg.epsilon.value(epoch, self.cfg.epochs);
            let idx = sample_episode(catalog, self.cfg.beta, &mut self.rng);
            let row = self.run_epoch(epoch, &catalog.episodes[idx], epsilon)?;
            on_epoch(&row, &self.online);
            log.push(row);
        }
        Ok(TrainOutcome {
            network: self.online,
            log,
        })
    }
}

/// Number of network outputs for `assets`.
pub fn output_width(assets: usize) -> usize {
    action_count(assets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actionspace::TradeAction;
    use crate::marketdata::FeatureTensor;
    use std::sync::Arc;

    fn state(period: usize, weights: Vec<f64>) -> PortfolioState {
        PortfolioState {
            period,
            features: Arc::new(FeatureTensor::zeros(weights.len() - 1, 1)),
            weights,
            value: 1_000_000.0,
        }
    }

    fn list_with(period: usize) -> ExperienceList {
        ExperienceList {
            state: state(period, vec![0.5, 0.5]),
            entries: vec![Experience {
                action: TradeAction::hold(1),
                reward: period as f64,
                next_state: state(period + 1, vec![0.5, 0.5]),
                terminal: false,
            }],
        }
    }

    #[test]
    fn replay_is_bounded_fifo() {
        let mut m = ReplayMemory::new(3);
        for p in 0..5 {
            m.push(list_with(p));
        }
        assert_eq!(m.len(), 3);
        let periods: Vec<usize> = m.iter().map(|l| l.state.period).collect();
        assert_eq!(periods, vec![2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample_indices(4, &mut rng).is_none());
        let idx = m.sample_indices(3, &mut rng).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn epsilon_schedule_shape() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0, 100), 1.0);
        assert!((s.value(40, 100) - 0.55).abs() < 1e-12);
        assert!((s.value(80, 100) - 0.1).abs() < 1e-12);
        assert!((s.value(99, 100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn geometric_probabilities() {
        let cat = |n: i32| EpisodeCatalog {
            episodes: (0..n)
                .map(|k| Episode {
                    label: 2012 + k,
                    first: 0,
                    last: 0,
                })
                .collect(),
            test_year: 2012 + n,
        };
        assert!((cat(1).probabilities(0.3)[0] - 1.0).abs() < 1e-12);
        let p = cat(2).probabilities(0.5);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12 && (p[0] - 1.0 / 3.0).abs() < 1e-12);
        let p = cat(5).probabilities(0.3);
        assert!((p[4] - 0.3 / (1.0 - 0.7f64.powi(5))).abs() < 1e-12);
        assert!((p[4] - 0.36061).abs() < 1e-5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn epsilon_one_explores_uniformly() {
        let ctx = FeasibilityContext {
            weights: vec![1.0, 0.0, 0.0],
            value: 1_000.0,
            delta: 100.0,
            cost_sell: 0.0,
            cost_buy: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = vec![0.0; 9];
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..4000 {
            *counts
                .entry(act(&ctx, &q, 1.0, &mut rng).encode().0)
                .or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(
            counts.values().all(|c| (*c - 1000i32).abs() < 120),
            "{counts:?}"
        );
    }

    #[test]
    fn greedy_maps_infeasible_argmax() {
        let ctx = FeasibilityContext {
            weights: vec![0.015, 0.485, 0.5],
            value: 1_000_000.0,
            delta: 10_000.0,
            cost_sell: 0.0025,
            cost_buy: 0.0025,
        };
        let mut q = vec![0.0; 9];
        q[TradeAction::parse("1,1").unwrap().encode().0] = 9.0;
        q[TradeAction::parse("1,0").unwrap().encode().0] = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            act(&ctx, &q, 0.0, &mut rng),
            TradeAction::parse("1,0").unwrap()
        );
        assert_eq!(
            act(&ctx, &q, 0.0, &mut rng),
            map_action(&ctx, &TradeAction::parse("1,1").unwrap(), &q)
        );
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        let cfg = EpisodeConfig {
            assets: 1,
            window: 1,
            delta: 10.0,
            cost_sell: 0.0,
            cost_buy: 0.0,
            initial_value: 100.0,
            initial_weights: vec![0.5, 0.5],
        };
        let list = list_with(4);
        let online = vec![7.0, 8.0, 9.0];
        let (z, active) = build_targets_with(&list, 0.0, &online, &cfg, |_| panic!("no bootstrap"));
        assert_eq!(z, vec![7.0, 4.0, 9.0]);
        assert_eq!(active, vec![false, true, false]);
    }
}
