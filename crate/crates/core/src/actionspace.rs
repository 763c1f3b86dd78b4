//! The `3^I` sell/hold/buy action space, feasibility under a long-only
//! portfolio with a fixed trading size, and the mapping of infeasible
//! actions onto the closest high-value feasible action.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ActionError {
    #[error("action index {index} out of range for {assets} assets")]
    IndexOutOfRange { index: usize, assets: usize },
    #[error("invalid direction {0}; expected -1, 0 or 1")]
    InvalidDirection(i64),
    #[error("cannot parse action `{0}`")]
    Parse(String),
    #[error("action has {got} components, expected {expected}")]
    WrongLength { got: usize, expected: usize },
}

/// Trading direction for one asset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Sell,
    Hold,
    Buy,
}

impl Direction {
    pub fn from_i64(v: i64) -> Result<Self, ActionError> {
        match v {
            -1 => Ok(Direction::Sell),
            0 => Ok(Direction::Hold),
            1 => Ok(Direction::Buy),
            other => Err(ActionError::InvalidDirection(other)),
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Direction::Sell => -1,
            Direction::Hold => 0,
            Direction::Buy => 1,
        }
    }

    fn digit(self) -> usize {
        (self.as_i8() + 1) as usize
    }

    fn from_digit(d: usize) -> Self {
        match d {
            0 => Direction::Sell,
            1 => Direction::Hold,
            _ => Direction::Buy,
        }
    }
}

/// One direction per asset, asset 1 first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TradeAction(Vec<Direction>);

impl TradeAction {
    pub fn new(directions: Vec<Direction>) -> Self {
        Self(directions)
    }

    pub fn hold(assets: usize) -> Self {
        Self(vec![Direction::Hold; assets])
    }

    pub fn from_i64s(values: &[i64]) -> Result<Self, ActionError> {
        values
            .iter()
            .map(|v| Direction::from_i64(*v))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    /// Parses `"1,-1,0"` (whitespace and a leading `+` allowed).
    pub fn parse(s: &str) -> Result<Self, ActionError> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(ActionError::Parse(s.into()));
        }
        let values = parts
            .iter()
            .map(|p| {
                p.trim_start_matches('+')
                    .parse::<i64>()
                    .map_err(|_| ActionError::Parse(s.into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_i64s(&values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.0
    }

    pub fn get(&self, asset: usize) -> Direction {
        self.0[asset]
    }

    pub fn set(&mut self, asset: usize, d: Direction) {
        self.0[asset] = d;
    }

    pub fn as_i8s(&self) -> Vec<i8> {
        self.0.iter().map(|d| d.as_i8()).collect()
    }

    pub fn is_hold(&self) -> bool {
        self.0.iter().all(|d| *d == Direction::Hold)
    }

    pub fn sells(&self) -> usize {
        self.0.iter().filter(|d| **d == Direction::Sell).count()
    }

    pub fn buys(&self) -> usize {
        self.0.iter().filter(|d| **d == Direction::Buy).count()
    }

    pub fn hamming(&self, other: &TradeAction) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// Base-3 index with digit `a_i + 1`, asset 1 most significant.
    pub fn encode(&self) -> ActionIndex {
        ActionIndex(self.0.iter().fold(0, |acc, d| acc * 3 + d.digit()))
    }

    pub fn decode(index: ActionIndex, assets: usize) -> Result<Self, ActionError> {
        if index.0 >= action_count(assets) {
            return Err(ActionError::IndexOutOfRange {
                index: index.0,
                assets,
            });
        }
        let mut rest = index.0;
        let mut dirs = vec![Direction::Hold; assets];
        for slot in dirs.iter_mut().rev() {
            *slot = Direction::from_digit(rest % 3);
            rest /= 3;
        }
        Ok(Self(dirs))
    }
}

impl fmt::Display for TradeAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match d {
                Direction::Sell => write!(f, "-1")?,
                Direction::Hold => write!(f, "0")?,
                Direction::Buy => write!(f, "+1")?,
            }
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionIndex(pub usize);

pub fn action_count(assets: usize) -> usize {
    3usize.pow(assets as u32)
}

/// All `3^I` actions in index order.
pub fn all_actions(assets: usize) -> impl Iterator<Item = TradeAction> {
    (0..action_count(assets))
        .map(move |i| TradeAction::decode(ActionIndex(i), assets).expect("in range"))
}

/// What feasibility depends on: pre-action weights (cash first) and value,
/// the trading size and the proportional cost rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityContext {
    pub weights: Vec<f64>,
    pub value: f64,
    pub delta: f64,
    pub cost_sell: f64,
    pub cost_buy: f64,
}

impl FeasibilityContext {
    pub fn assets(&self) -> usize {
        self.weights.len() - 1
    }

    /// Currency held in asset `i` (1-based; 0 is cash).
    pub fn holding(&self, i: usize) -> f64 {
        self.weights[i] * self.value
    }

    /// True when asset `asset` (0-based) holds at least one trading size.
    pub fn can_sell(&self, asset: usize) -> bool {
        self.holding(asset + 1) >= self.delta
    }

    /// Cash left after executing the action, sell proceeds included.
    pub fn cash_after(&self, action: &TradeAction) -> f64 {
        self.holding(0) + self.delta * (1.0 - self.cost_sell) * action.sells() as f64
            - self.delta * (1.0 + self.cost_buy) * action.buys() as f64
    }

    pub fn has_asset_shortage(&self, action: &TradeAction) -> bool {
        action
            .directions()
            .iter()
            .enumerate()
            .any(|(i, d)| *d == Direction::Sell && !self.can_sell(i))
    }

    pub fn has_cash_shortage(&self, action: &TradeAction) -> bool {
        self.cash_after(action) < 0.0
    }

    pub fn is_feasible(&self, action: &TradeAction) -> bool {
        !self.has_asset_shortage(action) && !self.has_cash_shortage(action)
    }

    pub fn feasible_set(&self) -> Vec<TradeAction> {
        all_actions(self.assets())
            .filter(|a| self.is_feasible(a))
            .collect()
    }

    /// Feasibility of every action, indexed by [`ActionIndex`].
    pub fn feasibility_mask(&self) -> Vec<bool> {
        all_actions(self.assets())
            .map(|a| self.is_feasible(&a))
            .collect()
    }
}

pub fn is_feasible(ctx: &FeasibilityContext, action: &TradeAction) -> bool {
    ctx.is_feasible(action)
}

pub fn feasible_set(ctx: &FeasibilityContext) -> Vec<TradeAction> {
    ctx.feasible_set()
}

/// Steps taken by [`map_action_traced`].
#[derive(Debug, Clone, PartialEq)]
pub struct MappingTrace {
    pub original: TradeAction,
    /// Result of turning unsellable sells into holds, if any were changed.
    pub after_asset_rule: Option<TradeAction>,
    /// Buy-to-hold candidates examined by the cash rule, with feasibility and value.
    pub candidates: Vec<(TradeAction, bool, f64)>,
    pub result: TradeAction,
}

pub fn map_action(ctx: &FeasibilityContext, action: &TradeAction, q_values: &[f64]) -> TradeAction {
    map_action_traced(ctx, action, q_values).result
}

/// Maps `action` to a feasible action.
///
/// Sells of assets holding less than one trading size become holds. If cash
/// is still short, every nonempty subset of the remaining buys is switched to
/// hold, smallest subsets first; the answer is the highest-valued feasible
/// candidate of the smallest size that has one, ties going to the lower index.
pub fn map_action_traced(
    ctx: &FeasibilityContext,
    action: &TradeAction,
    q_values: &[f64],
) -> MappingTrace {
    assert_eq!(
        q_values.len(),
        action_count(action.len()),
        "q-value vector length"
    );
    let mut trace = MappingTrace {
        original: action.clone(),
        after_asset_rule: None,
        candidates: Vec::new(),
        result: action.clone(),
    };
    if ctx.is_feasible(action) {
        return trace;
    }

    let mut relaxed = action.clone();
    for i in 0..relaxed.len() {
        if relaxed.get(i) == Direction::Sell && !ctx.can_sell(i) {
            relaxed.set(i, Direction::Hold);
        }
    }
    if relaxed != *action {
        trace.after_asset_rule = Some(relaxed.clone());
    }
    if ctx.is_feasible(&relaxed) {
        trace.result = relaxed;
        return trace;
    }

    let buys: Vec<usize> = (0..relaxed.len())
        .filter(|&i| relaxed.get(i) == Direction::Buy)
        .collect();
    let mut best: Option<(f64, usize, TradeAction)> = None;
    for size in 1..=buys.len() {
        for subset in combinations(buys.len(), size) {
            let mut candidate = relaxed.clone();
            for k in subset {
                candidate.set(buys[k], Direction::Hold);
            }
            let feasible = ctx.is_feasible(&candidate);
            let idx = candidate.encode().0;
            let q = q_values[idx];
            trace.candidates.push((candidate.clone(), feasible, q));
            if !feasible {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bq, bidx, _)) => q > *bq || (q == *bq && idx < *bidx),
            };
            if better {
                best = Some((q, idx, candidate));
            }
        }
        if best.is_some() {
            break;
        }
    }
    // Switching every buy leaves only affordable sells and holds.
    trace.result = best.map(|(_, _, a)| a).unwrap_or_else(|| {
        let mut all_held = relaxed.clone();
        for &i in &buys {
            all_held.set(i, Direction::Hold);
        }
        all_held
    });
    trace
}

/// Index subsets of `0..n` with exactly `k` elements, in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Highest-valued feasible action: the naive masking rule, kept for the
/// mapping ablation.
pub fn best_feasible(ctx: &FeasibilityContext, q_values: &[f64]) -> TradeAction {
    let mask = ctx.feasibility_mask();
    let mut best: Option<usize> = None;
    for (i, ok) in mask.iter().enumerate() {
        if *ok && best.is_none_or(|b| q_values[i] > q_values[b]) {
            best = Some(i);
        }
    }
    TradeAction::decode(
        ActionIndex(best.expect("hold is always feasible")),
        ctx.assets(),
    )
    .expect("in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(v: &[i64]) -> TradeAction {
        TradeAction::from_i64s(v).unwrap()
    }

    fn ctx(weights: &[f64], value: f64, delta: f64, c: f64) -> FeasibilityContext {
        FeasibilityContext {
            weights: weights.to_vec(),
            value,
            delta,
            cost_sell: c,
            cost_buy: c,
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(act(&[-1, -1, -1]).encode(), ActionIndex(0));
        assert_eq!(act(&[1, 1, 1]).encode(), ActionIndex(26));
        assert_eq!(act(&[-1, 1]).encode(), ActionIndex(2));
        assert_eq!(act(&[0, 0]).encode(), ActionIndex(4));
        assert_eq!(
            TradeAction::decode(ActionIndex(9), 2),
            Err(ActionError::IndexOutOfRange {
                index: 9,
                assets: 2
            })
        );
    }

    #[test]
    fn parse_and_display() {
        assert_eq!(TradeAction::parse("+1, -1,0").unwrap(), act(&[1, -1, 0]));
        assert_eq!(act(&[1, -1, 0]).to_string(), "(+1,-1,0)");
        assert!(TradeAction::parse("1,,0").is_err());
        assert!(TradeAction::parse("2").is_err());
    }

    #[test]
    fn hold_always_feasible() {
        let c = ctx(&[0.0, 0.0, 1.0], 100.0, 10.0, 0.5);
        assert!(c.is_feasible(&TradeAction::hold(2)));
    }

    #[test]
    fn buy_without_cash_is_infeasible() {
        let c = ctx(&[0.0, 0.5, 0.5], 1_000_000.0, 10_000.0, 0.0025);
        assert!(!c.is_feasible(&act(&[1, 0])));
    }

    #[test]
    fn worked_cash_shortage_example() {
        let c = ctx(&[0.015, 0.485, 0.5], 1_000_000.0, 10_000.0, 0.0025);
        assert!((c.cash_after(&act(&[1, 1])) - (15_000.0 - 20_050.0)).abs() < 1e-9);
        assert!(!c.is_feasible(&act(&[1, 1])));
        assert!(c.is_feasible(&act(&[1, 0])));
    }

    #[test]
    fn all_cash_allows_only_non_sells() {
        let c = ctx(&[1.0, 0.0, 0.0], 1_000.0, 100.0, 0.0);
        let set = c.feasible_set();
        assert_eq!(set.len(), 4);
        assert!(set.iter().all(|a| a.sells() == 0));
    }

    #[test]
    fn starved_state_allows_only_hold() {
        // every holding is below one trading size (only possible with delta > P'/I)
        let c = ctx(&[0.0, 0.5, 0.5], 1_000.0, 600.0, 0.0);
        assert_eq!(c.feasible_set(), vec![TradeAction::hold(2)]);
    }

    #[test]
    fn cash_shortage_picks_higher_value_neighbour() {
        // cash for exactly one buy
        let c = ctx(&[0.015, 0.485, 0.5], 1_000_000.0, 10_000.0, 0.0025);
        let mut q = vec![0.0; 9];
        q[act(&[1, 0]).encode().0] = 2.0;
        q[act(&[0, 1]).encode().0] = 1.0;
        q[act(&[0, 0]).encode().0] = 5.0;
        assert_eq!(map_action(&c, &act(&[1, 1]), &q), act(&[1, 0]));
        q[act(&[0, 1]).encode().0] = 3.0;
        assert_eq!(map_action(&c, &act(&[1, 1]), &q), act(&[0, 1]));
    }

    #[test]
    fn asset_shortage_holds_the_short_asset() {
        let c = ctx(&[0.3, 0.695, 0.005], 1_000_000.0, 10_000.0, 0.0025);
        let q = vec![0.0; 9];
        let trace = map_action_traced(&c, &act(&[-1, -1]), &q);
        assert_eq!(trace.result, act(&[-1, 0]));
        assert!(trace.candidates.is_empty());
    }

    #[test]
    fn asset_rule_then_cash_rule() {
        // asset 1 cannot be sold; without its proceeds the buy is unaffordable
        let c = ctx(&[0.005, 0.005, 0.99], 1_000_000.0, 10_000.0, 0.0025);
        let q: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let trace = map_action_traced(&c, &act(&[-1, 1]), &q);
        assert_eq!(trace.after_asset_rule, Some(act(&[0, 1])));
        assert_eq!(trace.result, act(&[0, 0]));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let c = ctx(&[0.015, 0.485, 0.5], 1_000_000.0, 10_000.0, 0.0025);
        let q = vec![1.0; 9];
        // (0,1) encodes to 5, (1,0) to 7
        assert_eq!(map_action(&c, &act(&[1, 1]), &q), act(&[0, 1]));
    }

    #[test]
    fn naive_rule_can_flip_directions() {
        let c = ctx(&[0.3, 0.695, 0.005], 1_000_000.0, 10_000.0, 0.0025);
        let mut q = vec![0.0; 9];
        q[act(&[-1, -1]).encode().0] = 10.0;
        q[act(&[1, 1]).encode().0] = 9.0;
        assert_eq!(best_feasible(&c, &q), act(&[1, 1]));
        assert_eq!(map_action(&c, &act(&[-1, -1]), &q), act(&[-1, 0]));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn combinations_are_exhaustive() {
        assert_eq!(combinations(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        let total: usize = (0..=5).map(|k| combinations(5, k).len()).sum();
        assert_eq!(total, 32);
    }
}
