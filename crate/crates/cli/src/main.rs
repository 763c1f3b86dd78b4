//! `dqn-portfolio`: ingest, pretrain, train, backtest and report from a
//! single run configuration.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! artifact error, 3 numeric failure.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dqn_portfolio::actionspace::{all_actions, map_action_traced, FeasibilityContext, TradeAction};
use dqn_portfolio::backtest::{self, BacktestSummary, ComparisonRow, Strategy};
use dqn_portfolio::checkpoint::Checkpoint;
use dqn_portfolio::config::{ConfigError, Periods, RunConfig, TradingSection};
use dqn_portfolio::environment::Environment;
use dqn_portfolio::marketdata::{AlignmentReport, MarketData, QualityFlag};
use dqn_portfolio::qnet::{training_windows, Autoencoder, QNetError};
use dqn_portfolio::synthetic;
use dqn_portfolio::trainer::{self, EpisodeCatalog, TrainError, Trainer};

const ENCODER_FILE: &str = "encoder.ckpt";
const POLICY_FILE: &str = "policy.ckpt";
const RESOLVED_FILE: &str = "resolved_config.toml";
const REPORT_STRATEGIES: [StrategyName; 5] = [
    StrategyName::BuyAndHold,
    StrategyName::Random,
    StrategyName::Momentum,
    StrategyName::Reversion,
    StrategyName::Dqn,
];

#[derive(Parser)]
#[command(
    name = "dqn-portfolio",
    version,
    about = "Deep Q-learning portfolio trading"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, align and index the asset files; write a data report.
    Ingest,
    /// Train the sequence autoencoder and keep its encoder.
    Pretrain,
    /// Train the Q-network on top of the pretrained encoder.
    Train,
    /// Simulate one strategy over the test range.
    Backtest {
        #[arg(long, value_enum)]
        strategy: StrategyName,
        /// Policy checkpoint for the learned strategies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Merge backtest results into comparison tables.
    Report,
    /// Print the feasibility table and, optionally, a mapping trace.
    InspectActions {
        /// Pre-trade weights, cash first.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        weights: Vec<f64>,
        #[arg(long)]
        value: f64,
        /// Action to map, e.g. `1,-1,0`.
        #[arg(long, allow_hyphen_values = true)]
        action: Option<String>,
        /// Action values in index order; zeros when omitted.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q: Vec<f64>,
    },
    /// Write a deterministic synthetic market as CSV files.
    Synth {
        #[arg(long, default_value_t = 3)]
        assets: usize,
        #[arg(long, default_value_t = 1040)]
        bars: usize,
        #[arg(long, default_value = "2016-01-01")]
        start: chrono::NaiveDate,
        #[arg(long, default_value_t = 7)]
        generator_seed: u64,
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Debug)]
enum StrategyName {
    BuyAndHold,
    Random,
    Momentum,
    Reversion,
    Dqn,
    DqnNoMapping,
}

impl StrategyName {
    fn label(self) -> &'static str {
        match self {
            StrategyName::BuyAndHold => "buy_and_hold",
            StrategyName::Random => "random",
            StrategyName::Momentum => "momentum",
            StrategyName::Reversion => "reversion",
            StrategyName::Dqn => "dqn",
            StrategyName::DqnNoMapping => "dqn_no_mapping",
        }
    }

    fn cli_name(self) -> &'static str {
        match self {
            StrategyName::BuyAndHold => "buy-and-hold",
            StrategyName::DqnNoMapping => "dqn-no-mapping",
            other => other.label(),
        }
    }
}

/// One backtest result file.
#[derive(Serialize, Deserialize)]
struct BacktestFile {
    comparison: ComparisonRow,
    runs: Vec<BacktestSummary>,
}

#[derive(Serialize)]
struct DataReport<'a> {
    assets: &'a [String],
    bars: usize,
    alignment: &'a AlignmentReport,
    quality_flags: &'a [QualityFlag],
    periods: Periods,
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

fn data<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Data(e.into())
}

type Outcome<T> = Result<T, Failure>;

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(cli: &Cli) -> Outcome<Self> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Failure::Usage(anyhow!("this command needs --config <path>")))?;
        let mut cfg = RunConfig::load(path, &cli.overrides).map_err(|e| match e {
            ConfigError::Io { .. } => data(e),
            other => Failure::Usage(other.into()),
        })?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.output_dir = out.clone();
        }
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out)
            .with_context(|| format!("creating {}", out.display()))
            .map_err(data)?;
        fs::write(out.join(RESOLVED_FILE), cfg.to_toml())
            .with_context(|| format!("writing {}", out.join(RESOLVED_FILE).display()))
            .map_err(data)?;
        Ok(Self { cfg, out })
    }

    fn market(&self) -> Outcome<(MarketData, AlignmentReport)> {
        MarketData::load(
            &self.cfg.data.assets,
            &self.cfg.data.schema,
            self.cfg.network.window + 2,
        )
        .map_err(data)
    }

    fn periods(&self, market: &MarketData) -> Outcome<Periods> {
        self.cfg.periods(market).map_err(data)
    }

    fn environment(&self, market: MarketData) -> Outcome<Environment> {
        Environment::new(Arc::new(market), self.cfg.episode_config())
            .map_err(|e| Failure::Usage(e.into()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, command: &str) -> Outcome<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(data(anyhow!(
                "{} not found; run `dqn-portfolio {command}` with this config first",
                p.display()
            )))
        }
    }
}

fn create(path: &Path) -> Outcome<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(data)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(data)
}

fn ingest(run: &Run) -> Outcome<()> {
    let (market, alignment) = run.market()?;
    let periods = run.periods(&market)?;
    let dir = run.path("indicators");
    fs::create_dir_all(&dir).map_err(data)?;
    for (i, name) in market.names().iter().enumerate() {
        let w = create(&dir.join(format!("{name}.csv")))?;
        market.write_indicator_csv(i, w).map_err(data)?;
    }
    write_json(
        &run.path("data_report.json"),
        &DataReport {
            assets: market.names(),
            bars: market.len(),
            alignment: &alignment,
            quality_flags: market.quality_flags(),
            periods,
        },
    )?;
    println!(
        "aligned {} assets over {} bars ({} .. {}), {} dates dropped, {} quality flags",
        market.num_assets(),
        market.len(),
        fmt_date(alignment.first_date),
        fmt_date(alignment.last_date),
        alignment
            .dropped
            .iter()
            .map(|(_, d)| d.len())
            .sum::<usize>(),
        market.quality_flags().len()
    );
    Ok(())
}

fn fmt_date(d: Option<chrono::NaiveDate>) -> String {
    d.map_or_else(|| "-".into(), |d| d.to_string())
}

fn pretrain(run: &Run) -> Outcome<()> {
    let (market, _) = run.market()?;
    let periods = run.periods(&market)?;
    let window = run.cfg.network.window;
    let windows = training_windows(&market, periods.train_first..=periods.train_last, window)
        .map_err(data)?;
    let mut ae = Autoencoder::seeded(
        run.cfg.network.encoder_hidden,
        run.cfg.network.latent,
        run.cfg.seed,
    );
    let report = ae
        .pretrain(&windows, &run.cfg.pretrain_config())
        .map_err(|e| match e {
            QNetError::Diverged { .. } => Failure::Numeric(e.into()),
            other => data(other),
        })?;
    report
        .write_csv(create(&run.path("pretrain_log.csv"))?)
        .map_err(data)?;
    Checkpoint::from_encoder(&ae.encoder, market.num_assets(), window)
        .save(&run.path(ENCODER_FILE))
        .map_err(data)?;
    println!(
        "pretrained on {} windows: mse {:.6e} -> {:.6e}",
        windows.len(),
        report.losses[0],
        report.losses[report.losses.len() - 1]
    );
    Ok(())
}

fn train(run: &Run) -> Outcome<()> {
    let encoder_path = run.require(ENCODER_FILE, "pretrain")?;
    let encoder = Checkpoint::load(&encoder_path)
        .and_then(|c| c.into_encoder())
        .map_err(data)?;
    let (market, _) = run.market()?;
    let periods = run.periods(&market)?;
    let test_year = run
        .cfg
        .data
        .test_start
        .format("%Y")
        .to_string()
        .parse()
        .unwrap_or(i32::MAX);
    let catalog = EpisodeCatalog::yearly(
        &market,
        periods.train_first,
        periods.train_last,
        run.cfg.network.window,
        test_year,
    )
    .map_err(data)?;
    let env = run.environment(market)?;
    let net = run.cfg.build_network(encoder);
    let trainer =
        Trainer::new(env, run.cfg.trainer_config(), net).map_err(|e| Failure::Usage(e.into()))?;
    let every = run.cfg.train.checkpoint_every;
    let ckpt_dir = run.path("checkpoints");
    if every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(data)?;
    }
    let mut save_error = None;
    let result = trainer.train(&catalog, |row, net| {
        if every > 0 && (row.epoch + 1) % every == 0 && save_error.is_none() {
            let p = ckpt_dir.join(format!("epoch_{:05}.ckpt", row.epoch + 1));
            if let Err(e) = Checkpoint::from_network(net).save(&p) {
                save_error = Some(e);
            }
        }
    });
    if let Some(e) = save_error {
        return Err(data(e));
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, last_good }) => {
            let p = run.path("diverged.ckpt");
            Checkpoint::from_network(&last_good)
                .save(&p)
                .map_err(data)?;
            return Err(Failure::Numeric(anyhow!(
                "non-finite loss in epoch {epoch}; last finite parameters saved to {}",
                p.display()
            )));
        }
        Err(e @ TrainError::Net(_)) => return Err(Failure::Numeric(e.into())),
        Err(e) => return Err(data(e)),
    };
    trainer::write_log_csv(&outcome.log, create(&run.path("train_log.csv"))?).map_err(data)?;
    Checkpoint::from_network(&outcome.network)
        .save(&run.path(POLICY_FILE))
        .map_err(data)?;
    let last = outcome.log.last();
    println!(
        "trained {} epochs over {} episodes; last loss {:.6e}, last episode return {:.4}",
        outcome.log.len(),
        catalog.len(),
        last.map_or(0.0, |l| l.loss_mean),
        last.map_or(0.0, |l| l.episode_return)
    );
    Ok(())
}

fn run_backtest(run: &Run, name: StrategyName, checkpoint: Option<&Path>) -> Outcome<BacktestFile> {
    let (market, _) = run.market()?;
    let periods = run.periods(&market)?;
    let env = run.environment(market)?;
    let (first, last) = (periods.test_first, periods.test_last);
    let fail = |e: backtest::BacktestError| match e {
        backtest::BacktestError::Net(_) => Failure::Numeric(e.into()),
        other => data(other),
    };
    let strategy = match name {
        StrategyName::BuyAndHold => Strategy::BuyAndHold,
        StrategyName::Momentum => Strategy::Momentum,
        StrategyName::Reversion => Strategy::Reversion,
        StrategyName::Random => {
            let seeds: Vec<u64> = (0..run.cfg.backtest.random_samples as u64)
                .map(|k| run.cfg.seed.wrapping_add(k))
                .collect();
            let mean = backtest::random_mean(&env, first, last, &seeds).map_err(fail)?;
            let mut runs = Vec::new();
            for (k, &seed) in seeds.iter().enumerate() {
                let report =
                    backtest::run(&env, &Strategy::Random { seed }, first, last).map_err(fail)?;
                if k == 0 {
                    report
                        .write_series_csv(create(&run.path("backtest_random.csv"))?)
                        .map_err(data)?;
                }
                runs.push(report.summary());
            }
            return Ok(BacktestFile {
                comparison: mean,
                runs,
            });
        }
        StrategyName::Dqn | StrategyName::DqnNoMapping => {
            let path = match checkpoint {
                Some(p) => p.to_path_buf(),
                None => run.require(POLICY_FILE, "train")?,
            };
            let network = Checkpoint::load(&path)
                .and_then(|c| c.network())
                .map_err(data)?;
            Strategy::Dqn {
                network: Box::new(network),
                mapping: name == StrategyName::Dqn,
            }
        }
    };
    let report = backtest::run(&env, &strategy, first, last).map_err(fail)?;
    if name == StrategyName::Dqn && report.infeasible_recorded != 0 {
        return Err(Failure::Data(anyhow!(
            "mapped policy recorded {} infeasible actions",
            report.infeasible_recorded
        )));
    }
    report
        .write_series_csv(create(
            &run.path(&format!("backtest_{}.csv", name.label())),
        )?)
        .map_err(data)?;
    let summary = report.summary();
    Ok(BacktestFile {
        comparison: ComparisonRow::from(&summary),
        runs: vec![summary],
    })
}

fn backtest_command(run: &Run, name: StrategyName, checkpoint: Option<&Path>) -> Outcome<()> {
    let file = run_backtest(run, name, checkpoint)?;
    write_json(&run.path(&format!("backtest_{}.json", name.label())), &file)?;
    let c = &file.comparison;
    println!(
        "{}: CR {:.3}%  SR {}  AT {:.3}%  ({} run{})",
        c.strategy,
        c.cr,
        c.sr.map_or_else(|| "undefined".into(), |v| format!("{v:.3}")),
        c.at,
        c.samples,
        if c.samples == 1 { "" } else { "s" }
    );
    Ok(())
}

fn read_backtest(run: &Run, name: StrategyName) -> Outcome<BacktestFile> {
    let label = name.label();
    let path = run.require(
        &format!("backtest_{label}.json"),
        &format!("backtest --strategy {}", name.cli_name()),
    )?;
    let text = fs::read_to_string(&path).map_err(data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(data)
}

fn report(run: &Run) -> Outcome<()> {
    let rows = REPORT_STRATEGIES
        .iter()
        .map(|&s| read_backtest(run, s).map(|f| f.comparison))
        .collect::<Outcome<Vec<_>>>()?;
    backtest::write_comparison_csv(&rows, create(&run.path("comparison.csv"))?).map_err(data)?;
    println!(
        "{:<16}{:>10}{:>10}{:>10}",
        "strategy", "CR(%)", "SR", "AT(%)"
    );
    for r in &rows {
        println!(
            "{:<16}{:>10.3}{:>10}{:>10.3}",
            r.strategy,
            r.cr,
            r.sr.map_or_else(|| "undefined".into(), |v| format!("{v:.3}")),
            r.at
        );
    }
    if run.path("backtest_dqn_no_mapping.json").exists() {
        let with = read_backtest(run, StrategyName::Dqn)?;
        let without = read_backtest(run, StrategyName::DqnNoMapping)?;
        let (market, _) = run.market()?;
        backtest::write_phase_change_csv(
            market.names(),
            &with.runs[0].phase_changes,
            &without.runs[0].phase_changes,
            create(&run.path("phase_changes.csv"))?,
        )
        .map_err(data)?;
        println!("phase changes (with / without mapping):");
        for (i, name) in market.names().iter().enumerate() {
            println!(
                "  {name}: {} / {}",
                with.runs[0].phase_changes[i], without.runs[0].phase_changes[i]
            );
        }
    }
    Ok(())
}

fn inspect_actions(
    cli: &Cli,
    weights: &[f64],
    value: f64,
    action: Option<&str>,
    q: &[f64],
) -> Outcome<()> {
    let trading = match &cli.config {
        Some(_) => Run::new(cli)?.cfg.trading,
        None => TradingSection::default(),
    };
    let assets = weights
        .len()
        .checked_sub(1)
        .filter(|&a| a > 0)
        .ok_or_else(|| Failure::Usage(anyhow!("--weights needs cash plus at least one asset")))?;
    let ctx = FeasibilityContext {
        weights: weights.to_vec(),
        value,
        delta: trading.delta,
        cost_sell: trading.cost_sell,
        cost_buy: trading.cost_buy,
    };
    let count = dqn_portfolio::actionspace::action_count(assets);
    let q = if q.is_empty() {
        vec![0.0; count]
    } else {
        q.to_vec()
    };
    if q.len() != count {
        return Err(Failure::Usage(anyhow!(
            "--q needs {count} values, got {}",
            q.len()
        )));
    }
    println!(
        "{:>5}  {:<14}{:<10}{:>16}  q",
        "index", "action", "feasible", "cash after"
    );
    for a in all_actions(assets) {
        let idx = a.encode().0;
        let note = if ctx.has_asset_shortage(&a) {
            "asset shortage"
        } else if ctx.has_cash_shortage(&a) {
            "cash shortage"
        } else {
            "yes"
        };
        println!(
            "{idx:>5}  {:<14}{note:<10}{:>16.2}  {}",
            a.to_string(),
            ctx.cash_after(&a),
            q[idx]
        );
    }
    if let Some(raw) = action {
        let a = TradeAction::parse(raw).map_err(|e| Failure::Usage(e.into()))?;
        if a.len() != assets {
            return Err(Failure::Usage(anyhow!(
                "action has {} entries, expected {assets}",
                a.len()
            )));
        }
        let trace = map_action_traced(&ctx, &a, &q);
        println!("\nmapping {}", trace.original);
        if let Some(a) = &trace.after_asset_rule {
            println!("  after unsellable sells -> hold: {a}");
        }
        for (candidate, feasible, value) in &trace.candidates {
            println!("  candidate {candidate}  feasible={feasible}  q={value}");
        }
        println!("  result {}", trace.result);
    }
    Ok(())
}

fn synth(
    assets: usize,
    bars: usize,
    start: chrono::NaiveDate,
    seed: u64,
    dir: &Path,
) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(data)?;
    for s in synthetic::random_walk_series(assets, start, bars, seed) {
        let p = dir.join(format!("{}.csv", s.name));
        synthetic::write_series_csv(&s, create(&p)?).map_err(data)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Ingest => ingest(&Run::new(cli)?),
        Command::Pretrain => pretrain(&Run::new(cli)?),
        Command::Train => train(&Run::new(cli)?),
        Command::Backtest {
            strategy,
            checkpoint,
        } => backtest_command(&Run::new(cli)?, *strategy, checkpoint.as_deref()),
        Command::Report => report(&Run::new(cli)?),
        Command::InspectActions {
            weights,
            value,
            action,
            q,
        } => inspect_actions(cli, weights, *value, action.as_deref(), q),
        Command::Synth {
            assets,
            bars,
            start,
            generator_seed,
            dir,
        } => synth(*assets, *bars, *start, *generator_seed, dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
