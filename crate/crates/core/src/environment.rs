//! Portfolio MDP: rebalancing with proportional costs, market moves, and the
//! trend-removed reward measured against the do-nothing portfolio.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actionspace::{all_actions, Direction, FeasibilityContext, TradeAction};
use crate::marketdata::{DataError, FeatureTensor, MarketData};

/// Tolerance for simplex checks and cash clamping.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("portfolio wiped out (value multiplier {0})")]
    Ruin(f64),
    #[error("infeasible action {action} executed at period {period}")]
    InfeasibleAction { action: String, period: usize },
    #[error("action has {got} components, portfolio has {expected} assets")]
    Dimension { got: usize, expected: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Trading parameters of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub assets: usize,
    pub window: usize,
    pub delta: f64,
    pub cost_sell: f64,
    pub cost_buy: f64,
    pub initial_value: f64,
    /// Cash first; `assets + 1` entries.
    pub initial_weights: Vec<f64>,
}

impl EpisodeConfig {
    /// Equal weight on cash and every asset.
    pub fn equal_weights(assets: usize) -> Vec<f64> {
        vec![1.0 / (assets + 1) as f64; assets + 1]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.assets == 0 || self.window == 0 {
            return Err(EnvError::Config(
                "assets and window must be positive".into(),
            ));
        }
        if self.initial_value.is_nan() || self.initial_value <= 0.0 {
            return Err(EnvError::Config("initial value must be > 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < self.initial_value / self.assets as f64) {
            return Err(EnvError::Config(format!(
                "trading size {} must lie in (0, P0/I = {})",
                self.delta,
                self.initial_value / self.assets as f64
            )));
        }
        for c in [self.cost_sell, self.cost_buy] {
            if !(0.0..1.0).contains(&c) {
                return Err(EnvError::Config(format!(
                    "cost rate {c} must lie in [0, 1)"
                )));
            }
        }
        if self.initial_weights.len() != self.assets + 1 || !on_simplex(&self.initial_weights, 1e-9)
        {
            return Err(EnvError::Config(
                "initial weights must be a simplex vector of length I+1".into(),
            ));
        }
        Ok(())
    }

    pub fn context(&self, weights: &[f64], value: f64) -> FeasibilityContext {
        FeasibilityContext {
            weights: weights.to_vec(),
            value,
            delta: self.delta,
            cost_sell: self.cost_sell,
            cost_buy: self.cost_buy,
        }
    }
}

pub fn on_simplex(w: &[f64], tol: f64) -> bool {
    w.iter().all(|x| *x >= -tol) && (w.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// State before the agent acts at the end of `period`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioState {
    pub period: usize,
    pub features: Arc<FeatureTensor>,
    /// Pre-action weights, cash first.
    pub weights: Vec<f64>,
    /// Pre-action value.
    pub value: f64,
}

impl PortfolioState {
    pub fn assets(&self) -> usize {
        self.weights.len() - 1
    }
}

/// `(e_1, ..., e_I) -> (1, e_1 + 1, ..., e_I + 1)`.
pub fn phi(rates: &[f64]) -> Vec<f64> {
    std::iter::once(1.0)
        .chain(rates.iter().map(|e| e + 1.0))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moves `(value, weights)` through one period of price changes `next_kc`.
pub fn market_transition(
    value: f64,
    weights: &[f64],
    next_kc: &[f64],
) -> Result<(f64, Vec<f64>), EnvError> {
    if next_kc.len() + 1 != weights.len() {
        return Err(EnvError::Dimension {
            got: next_kc.len(),
            expected: weights.len() - 1,
        });
    }
    let growth = phi(next_kc);
    let multiplier = dot(weights, &growth);
    if multiplier.is_nan() || multiplier <= 0.0 {
        return Err(EnvError::Ruin(multiplier));
    }
    let next_weights = weights
        .iter()
        .zip(&growth)
        .map(|(w, g)| w * g / multiplier)
        .collect();
    Ok((value * multiplier, next_weights))
}

/// Portfolio right after executing an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rebalance {
    /// Post-action value `P_t`.
    pub value: f64,
    /// Post-action weights `w_t`.
    pub weights: Vec<f64>,
    /// Auxiliary weights before renormalisation.
    pub aux_weights: Vec<f64>,
    /// Value decay rate from transaction costs.
    pub cost_rate: f64,
}

/// Executes a feasible action on the pre-action portfolio.
pub fn apply_action(
    value: f64,
    weights: &[f64],
    action: &TradeAction,
    cfg: &EpisodeConfig,
    period: usize,
) -> Result<Rebalance, EnvError> {
    if action.len() + 1 != weights.len() {
        return Err(EnvError::Dimension {
            got: action.len(),
            expected: weights.len() - 1,
        });
    }
    if !cfg.context(weights, value).is_feasible(action) {
        return Err(EnvError::InfeasibleAction {
            action: action.to_string(),
            period,
        });
    }
    if action.is_hold() {
        return Ok(Rebalance {
            value,
            weights: weights.to_vec(),
            aux_weights: weights.to_vec(),
            cost_rate: 0.0,
        });
    }
    let step = cfg.delta / value;
    let sells = action.sells() as f64;
    let buys = action.buys() as f64;
    let cost_rate = step * (cfg.cost_sell * sells + cfg.cost_buy * buys);

    let mut aux = Vec::with_capacity(weights.len());
    aux.push(weights[0] + step * ((1.0 - cfg.cost_sell) * sells - (1.0 + cfg.cost_buy) * buys));
    for (w, d) in weights[1..].iter().zip(action.directions()) {
        aux.push(match d {
            Direction::Sell => w - step,
            Direction::Buy => w + step,
            Direction::Hold => *w,
        });
    }
    for a in aux.iter_mut() {
        if *a < 0.0 {
            if *a < -SIMPLEX_TOL {
                return Err(EnvError::InfeasibleAction {
                    action: action.to_string(),
                    period,
                });
            }
            *a = 0.0;
        }
    }
    let total: f64 = aux.iter().sum();
    let new_weights = aux.iter().map(|a| a / total).collect();
    Ok(Rebalance {
        value: value * (1.0 - cost_rate),
        weights: new_weights,
        aux_weights: aux,
        cost_rate,
    })
}

/// Return of the acted portfolio relative to the do-nothing portfolio over
/// the next period.
pub fn reward(
    pre_value: f64,
    pre_weights: &[f64],
    post_value: f64,
    post_weights: &[f64],
    next_kc: &[f64],
) -> Result<f64, EnvError> {
    let growth = phi(next_kc);
    let static_value = pre_value * dot(pre_weights, &growth);
    if static_value.is_nan() || static_value <= 0.0 {
        return Err(EnvError::Ruin(static_value));
    }
    let next_value = post_value * dot(post_weights, &growth);
    Ok((next_value - static_value) / static_value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: PortfolioState,
    pub post_value: f64,
    pub post_weights: Vec<f64>,
    pub aux_weights: Vec<f64>,
    pub cost_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Outcome(StepOutcome),
    /// No next-period data exists for the requested period.
    EpisodeComplete,
}

/// Market environment over a fixed dataset.
#[derive(Debug, Clone)]
pub struct Environment {
    market: Arc<MarketData>,
    cfg: EpisodeConfig,
}

impl Environment {
    pub fn new(market: Arc<MarketData>, cfg: EpisodeConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        if market.num_assets() != cfg.assets {
            return Err(EnvError::Config(format!(
                "market has {} assets, config has {}",
                market.num_assets(),
                cfg.assets
            )));
        }
        Ok(Self { market, cfg })
    }

    pub fn market(&self) -> &Arc<MarketData> {
        &self.market
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    /// First period with a full feature window.
    pub fn first_period(&self) -> usize {
        self.cfg.window
    }

    /// Last period that can be acted on (needs next-period data).
    pub fn last_period(&self) -> Option<usize> {
        let last = self.market.len().checked_sub(2)?;
        (last >= self.first_period()).then_some(last)
    }

    pub fn features(&self, period: usize) -> Result<Arc<FeatureTensor>, EnvError> {
        Ok(Arc::new(
            self.market.feature_tensor(period, self.cfg.window)?,
        ))
    }

    /// State at `period` with the configured initial portfolio.
    pub fn initial_state(&self, period: usize) -> Result<PortfolioState, EnvError> {
        Ok(PortfolioState {
            period,
            features: self.features(period)?,
            weights: self.cfg.initial_weights.clone(),
            value: self.cfg.initial_value,
        })
    }

    pub fn context(&self, state: &PortfolioState) -> FeasibilityContext {
        self.cfg.context(&state.weights, state.value)
    }

    /// Rebalance, reward, market move and next features.
    pub fn step(&self, state: &PortfolioState, action: &TradeAction) -> Result<Step, EnvError> {
        if state.period + 1 >= self.market.len() {
            return Ok(Step::EpisodeComplete);
        }
        let features = self.features(state.period + 1)?;
        self.step_with(state, action, &features).map(Step::Outcome)
    }

    fn step_with(
        &self,
        state: &PortfolioState,
        action: &TradeAction,
        next_features: &Arc<FeatureTensor>,
    ) -> Result<StepOutcome, EnvError> {
        let next_kc = self.market.kc(state.period + 1)?;
        let rebalance = apply_action(state.value, &state.weights, action, &self.cfg, state.period)?;
        let r = reward(
            state.value,
            &state.weights,
            rebalance.value,
            &rebalance.weights,
            &next_kc,
        )?;
        let (next_value, next_weights) =
            market_transition(rebalance.value, &rebalance.weights, &next_kc)?;
        Ok(StepOutcome {
            reward: r,
            next_state: PortfolioState {
                period: state.period + 1,
                features: Arc::clone(next_features),
                weights: next_weights,
                value: next_value,
            },
            post_value: rebalance.value,
            post_weights: rebalance.weights,
            aux_weights: rebalance.aux_weights,
            cost_rate: rebalance.cost_rate,
        })
    }

    /// Outcome of every feasible action at `state`, in action-index order.
    /// Returns `None` when the period has no next-period data.
    pub fn simulate_all(
        &self,
        state: &PortfolioState,
    ) -> Result<Option<Vec<(TradeAction, StepOutcome)>>, EnvError> {
        if state.period + 1 >= self.market.len() {
            return Ok(None);
        }
        let features = self.features(state.period + 1)?;
        let ctx = self.context(state);
        all_actions(self.cfg.assets)
            .filter(|a| ctx.is_feasible(a))
            .map(|a| {
                let outcome = self.step_with(state, &a, &features)?;
                Ok((a, outcome))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actionspace::TradeAction;

    fn cfg(assets: usize, c: f64) -> EpisodeConfig {
        EpisodeConfig {
            assets,
            window: 1,
            delta: 10_000.0,
            cost_sell: c,
            cost_buy: c,
            initial_value: 1_000_000.0,
            initial_weights: EpisodeConfig::equal_weights(assets),
        }
    }

    fn act(v: &[i64]) -> TradeAction {
        TradeAction::from_i64s(v).unwrap()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(&[0.0, 0.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(phi(&[0.1, -0.05]), vec![1.0, 1.1, 0.95]);
        assert_eq!(phi(&[-1.0])[1], 0.0);
    }

    #[test]
    fn identity_market_move() {
        let w = [0.2, 0.3, 0.5];
        let (v, w2) = market_transition(123.0, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(v, 123.0);
        assert_eq!(w2, w.to_vec());
        let (v, w2) = market_transition(123.0, &[1.0, 0.0, 0.0], &[0.3, -0.4]).unwrap();
        assert_eq!(v, 123.0);
        assert_eq!(w2, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn ruin_is_reported() {
        let err = market_transition(1.0, &[0.0, 1.0], &[-1.0]).unwrap_err();
        assert!(matches!(err, EnvError::Ruin(_)));
    }

    #[test]
    fn hold_is_free() {
        let w = vec![0.5, 0.25, 0.25];
        let r = apply_action(1_000_000.0, &w, &TradeAction::hold(2), &cfg(2, 0.0025), 0).unwrap();
        assert_eq!(r.cost_rate, 0.0);
        assert_eq!(r.value, 1_000_000.0);
        assert_eq!(r.weights, w);
    }

    #[test]
    fn infeasible_action_is_rejected() {
        let w = vec![0.0, 0.5, 0.5];
        let err = apply_action(1_000_000.0, &w, &act(&[1, 0]), &cfg(2, 0.0025), 7).unwrap_err();
        assert!(matches!(err, EnvError::InfeasibleAction { period: 7, .. }));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(3, 0.0025);
        assert!(c.validate().is_ok());
        c.delta = 400_000.0;
        assert!(c.validate().is_err());
        let mut c = cfg(3, 0.0025);
        c.initial_weights = vec![0.5, 0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
    }
}
