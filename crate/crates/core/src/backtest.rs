//! Out-of-sample simulation of a policy or benchmark strategy, with
//! cumulative return, Sharpe ratio, average turnover and phase-change
//! counts.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actionspace::{
    argmax, best_feasible, ActionIndex, Direction, FeasibilityContext, TradeAction,
};
use crate::environment::{EnvError, Environment, PortfolioState, Step};
use crate::qnet::{QNetError, QNetwork};
use crate::trainer::greedy_action;

/// Daily risk-free rate used by the Sharpe ratio.
pub const RISK_FREE_DAILY: f64 = 0.0001;
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] QNetError),
    #[error("test range {first}..={last} is invalid for {len} bars with window {window}")]
    Range {
        first: usize,
        last: usize,
        len: usize,
        window: usize,
    },
    #[error("strategy {strategy} produced infeasible action {action} at period {period}")]
    Contract {
        strategy: String,
        action: TradeAction,
        period: usize,
    },
    #[error("undefined Sharpe ratio: {0}")]
    UndefinedSharpe(&'static str),
    #[error("average turnover needs at least two periods")]
    EmptyTrace,
}

/// What a strategy decided at one period.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Action counted for phase changes.
    pub recorded: TradeAction,
    /// Action actually executed.
    pub executed: TradeAction,
}

impl Decision {
    fn same(action: TradeAction) -> Self {
        Self {
            recorded: action.clone(),
            executed: action,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Strategy {
    BuyAndHold,
    Random {
        seed: u64,
    },
    Momentum,
    Reversion,
    Dqn {
        network: Box<QNetwork>,
        mapping: bool,
    },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::BuyAndHold => "buy_and_hold",
            Strategy::Random { .. } => "random",
            Strategy::Momentum => "momentum",
            Strategy::Reversion => "reversion",
            Strategy::Dqn { mapping: true, .. } => "dqn",
            Strategy::Dqn { mapping: false, .. } => "dqn_no_mapping",
        }
    }
}

struct Runner<'a> {
    strategy: &'a Strategy,
    rng: Option<ChaCha8Rng>,
}

impl Runner<'_> {
    fn decide(
        &mut self,
        env: &Environment,
        state: &PortfolioState,
        ctx: &FeasibilityContext,
    ) -> Result<Decision, BacktestError> {
        let assets = ctx.assets();
        Ok(match self.strategy {
            Strategy::BuyAndHold => Decision::same(TradeAction::hold(assets)),
            Strategy::Random { .. } => {
                let rng = self.rng.as_mut().expect("random strategy has a generator");
                let feasible = ctx.feasible_set();
                Decision::same(feasible[rng.gen_range(0..feasible.len())].clone())
            }
            Strategy::Momentum => Decision::same(momentum_action(
                &env.market().kc(state.period).map_err(EnvError::from)?,
                ctx,
            )),
            Strategy::Reversion => Decision::same(reversion_action(
                &env.market().kc(state.period).map_err(EnvError::from)?,
                ctx,
            )),
            Strategy::Dqn { network, mapping } => {
                let q = network.forward(state)?;
                if *mapping {
                    Decision::same(greedy_action(ctx, &q))
                } else {
                    let raw = TradeAction::decode(ActionIndex(argmax(&q)), assets)
                        .expect("q-vector width");
                    let executed = if ctx.is_feasible(&raw) {
                        raw.clone()
                    } else {
                        best_feasible(ctx, &q)
                    };
                    Decision {
                        recorded: raw,
                        executed,
                    }
                }
            }
        })
    }
}

fn sign_action(kc: &[f64], flip: bool) -> TradeAction {
    TradeAction::new(
        kc.iter()
            .map(|&k| {
                let k = if flip { -k } else { k };
                if k > 0.0 {
                    Direction::Buy
                } else if k < 0.0 {
                    Direction::Sell
                } else {
                    Direction::Hold
                }
            })
            .collect(),
    )
}

/// Sells what can be sold, then keeps buys in `priority` order while the
/// action stays feasible.
fn constrain(mut action: TradeAction, ctx: &FeasibilityContext, priority: &[usize]) -> TradeAction {
    for i in 0..action.len() {
        if action.get(i) == Direction::Sell && !ctx.can_sell(i) {
            action.set(i, Direction::Hold);
        }
    }
    let mut out = action.clone();
    for i in 0..out.len() {
        if out.get(i) == Direction::Buy {
            out.set(i, Direction::Hold);
        }
    }
    for &i in priority {
        if action.get(i) == Direction::Buy {
            out.set(i, Direction::Buy);
            if !ctx.is_feasible(&out) {
                out.set(i, Direction::Hold);
            }
        }
    }
    out
}

/// Buys risers, sells fallers; the largest risers get cash first.
pub fn momentum_action(kc: &[f64], ctx: &FeasibilityContext) -> TradeAction {
    let mut order: Vec<usize> = (0..kc.len()).collect();
    order.sort_by(|&a, &b| kc[b].total_cmp(&kc[a]).then(a.cmp(&b)));
    constrain(sign_action(kc, false), ctx, &order)
}

/// Buys fallers, sells risers; the largest fallers get cash first.
pub fn reversion_action(kc: &[f64], ctx: &FeasibilityContext) -> TradeAction {
    let mut order: Vec<usize> = (0..kc.len()).collect();
    order.sort_by(|&a, &b| kc[a].total_cmp(&kc[b]).then(a.cmp(&b)));
    constrain(sign_action(kc, true), ctx, &order)
}

/// Percentage growth from the first to the last value.
pub fn cumulative_return(values: &[f64]) -> f64 {
    let p0 = values[0];
    (values[values.len() - 1] - p0) / p0 * 100.0
}

pub fn daily_returns(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| (w[1] - w[0]) / w[0]).collect()
}

/// Annualised mean excess daily return over the sample standard deviation.
pub fn sharpe_ratio(returns: &[f64], risk_free: f64) -> Result<f64, BacktestError> {
    if returns.len() < 2 {
        return Err(BacktestError::UndefinedSharpe("fewer than two returns"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(BacktestError::UndefinedSharpe("zero standard deviation"));
    }
    Ok((mean - risk_free) / std * TRADING_DAYS.sqrt())
}

/// Half the mean absolute non-cash weight displacement, in percent.
/// Each entry pairs the post-trade auxiliary weights with the pre-trade
/// weights of one period (cash first); `t_f` is the entry count minus one.
pub fn average_turnover(trace: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, BacktestError> {
    if trace.len() < 2 {
        return Err(BacktestError::EmptyTrace);
    }
    let tf = (trace.len() - 1) as f64;
    let total: f64 = trace
        .iter()
        .map(|(aux, pre)| {
            aux[1..]
                .iter()
                .zip(&pre[1..])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / (2.0 * tf) * 100.0)
}

/// Per asset, the number of switches between selling and buying across
/// successive non-hold actions.
pub fn phase_change_count(log: &[TradeAction]) -> Vec<usize> {
    let assets = log.first().map_or(0, |a| a.len());
    (0..assets)
        .map(|i| {
            let mut last = None;
            let mut count = 0;
            for a in log {
                let d = a.get(i);
                if d == Direction::Hold {
                    continue;
                }
                if last.is_some_and(|l| l != d) {
                    count += 1;
                }
                last = Some(d);
            }
            count
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub strategy: String,
    pub seed: u64,
    pub dates: Vec<chrono::NaiveDate>,
    /// Initial value followed by the post-action value of each day.
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub recorded: Vec<TradeAction>,
    pub executed: Vec<TradeAction>,
    /// (auxiliary, pre-trade) weights per day.
    pub weight_trace: Vec<(Vec<f64>, Vec<f64>)>,
    pub pre_values: Vec<f64>,
    pub cr: f64,
    pub sr: Option<f64>,
    pub at: f64,
    pub phase_changes: Vec<usize>,
    /// Recorded actions that were infeasible at their state.
    pub infeasible_recorded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub strategy: String,
    pub seed: u64,
    pub first_date: String,
    pub last_date: String,
    pub days: usize,
    pub initial_value: f64,
    pub final_value: f64,
    pub cumulative_return_pct: f64,
    pub sharpe_ratio: Option<f64>,
    pub average_turnover_pct: f64,
    pub phase_changes: Vec<usize>,
    pub infeasible_recorded: usize,
    pub sharpe_std: String,
    pub risk_free_daily: f64,
}

impl BacktestReport {
    pub fn summary(&self) -> BacktestSummary {
        BacktestSummary {
            strategy: self.strategy.clone(),
            seed: self.seed,
            first_date: self.dates[0].to_string(),
            last_date: self.dates[self.dates.len() - 1].to_string(),
            days: self.dates.len(),
            initial_value: self.values[0],
            final_value: self.values[self.values.len() - 1],
            cumulative_return_pct: self.cr,
            sharpe_ratio: self.sr,
            average_turnover_pct: self.at,
            phase_changes: self.phase_changes.clone(),
            infeasible_recorded: self.infeasible_recorded,
            sharpe_std: "sample".into(),
            risk_free_daily: RISK_FREE_DAILY,
        }
    }

    /// `date,value,reward,action_vector`, one row per day.
    pub fn write_series_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "value", "reward", "action_vector"])?;
        for (k, date) in self.dates.iter().enumerate() {
            w.write_record([
                date.to_string(),
                self.values[k + 1].to_string(),
                self.rewards[k].to_string(),
                self.executed[k].to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Simulates `strategy` from period `first` to bar `last` starting from the
/// configured initial portfolio. An action is taken every day before `last`;
/// the final day holds.
pub fn run(
    env: &Environment,
    strategy: &Strategy,
    first: usize,
    last: usize,
) -> Result<BacktestReport, BacktestError> {
    let len = env.market().len();
    let window = env.config().window;
    if first < window || last <= first || last >= len {
        return Err(BacktestError::Range {
            first,
            last,
            len,
            window,
        });
    }
    let seed = match strategy {
        Strategy::Random { seed } => *seed,
        _ => 0,
    };
    let mut runner = Runner {
        strategy,
        rng: matches!(strategy, Strategy::Random { .. }).then(|| ChaCha8Rng::seed_from_u64(seed)),
    };
    let assets = env.config().assets;
    let mut state = env.initial_state(first)?;
    let mut report = BacktestReport {
        strategy: strategy.name().into(),
        seed,
        dates: Vec::new(),
        values: vec![state.value],
        rewards: Vec::new(),
        recorded: Vec::new(),
        executed: Vec::new(),
        weight_trace: Vec::new(),
        pre_values: Vec::new(),
        cr: 0.0,
        sr: None,
        at: 0.0,
        phase_changes: Vec::new(),
        infeasible_recorded: 0,
    };
    loop {
        let t = state.period;
        report.dates.push(env.market().date(t));
        report.pre_values.push(state.value);
        if t == last {
            report.values.push(state.value);
            report.rewards.push(0.0);
            report.recorded.push(TradeAction::hold(assets));
            report.executed.push(TradeAction::hold(assets));
            report
                .weight_trace
                .push((state.weights.clone(), state.weights.clone()));
            break;
        }
        let ctx = env.context(&state);
        let decision = runner.decide(env, &state, &ctx)?;
        if !ctx.is_feasible(&decision.executed) {
            return Err(BacktestError::Contract {
                strategy: strategy.name().into(),
                action: decision.executed,
                period: t,
            });
        }
        if !ctx.is_feasible(&decision.recorded) {
            report.infeasible_recorded += 1;
        }
        let Step::Outcome(outcome) = env.step(&state, &decision.executed)? else {
            unreachable!("period {t} precedes the last bar");
        };
        report.values.push(outcome.post_value);
        report.rewards.push(outcome.reward);
        report
            .weight_trace
            .push((outcome.aux_weights.clone(), state.weights.clone()));
        report.recorded.push(decision.recorded);
        report.executed.push(decision.executed);
        state = outcome.next_state;
    }
    report.cr = cumulative_return(&report.values);
    report.sr = sharpe_ratio(&daily_returns(&report.values), RISK_FREE_DAILY).ok();
    report.at = average_turnover(&report.weight_trace)?;
    report.phase_changes = phase_change_count(&report.recorded);
    Ok(report)
}

/// One row of the strategy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: String,
    pub cr: f64,
    pub sr: Option<f64>,
    pub at: f64,
    pub samples: usize,
}

impl From<&BacktestSummary> for ComparisonRow {
    fn from(s: &BacktestSummary) -> Self {
        Self {
            strategy: s.strategy.clone(),
            cr: s.cumulative_return_pct,
            sr: s.sharpe_ratio,
            at: s.average_turnover_pct,
            samples: 1,
        }
    }
}

/// Mean metrics of the random strategy over `seeds`.
pub fn random_mean(
    env: &Environment,
    first: usize,
    last: usize,
    seeds: &[u64],
) -> Result<ComparisonRow, BacktestError> {
    use rayon::prelude::*;
    let reports: Vec<BacktestReport> = seeds
        .par_iter()
        .map(|&seed| run(env, &Strategy::Random { seed }, first, last))
        .collect::<Result<_, _>>()?;
    let n = reports.len() as f64;
    let srs: Vec<f64> = reports.iter().filter_map(|r| r.sr).collect();
    Ok(ComparisonRow {
        strategy: "random".into(),
        cr: reports.iter().map(|r| r.cr).sum::<f64>() / n,
        sr: (!srs.is_empty()).then(|| srs.iter().sum::<f64>() / srs.len() as f64),
        at: reports.iter().map(|r| r.at).sum::<f64>() / n,
        samples: reports.len(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}"))
}

/// `strategy,CR(%),SR,AT(%),samples`
pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "CR(%)", "SR", "AT(%)", "samples"])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            format!("{:.3}", r.cr),
            fmt_opt(r.sr),
            format!("{:.3}", r.at),
            r.samples.to_string(),
        ])?;
    }
    w.flush()
}

/// Per-asset phase changes with and without the mapping function.
pub fn write_phase_change_csv<W: Write>(
    names: &[String],
    with_mapping: &[usize],
    without_mapping: &[usize],
    out: W,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["asset", "with_mapping", "without_mapping", "reduction"])?;
    for (i, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            with_mapping[i].to_string(),
            without_mapping[i].to_string(),
            (without_mapping[i] as i64 - with_mapping[i] as i64).to_string(),
        ])?;
    }
    w.flush()
}
