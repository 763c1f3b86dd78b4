//! Deterministic synthetic markets for tests, smoke runs and the bundled
//! fixture.

use std::io::Write;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::marketdata::{AssetSeries, DataError, MarketData, OhlcvBar};

/// `count` consecutive weekdays starting at (or after) `start`.
pub fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// Series whose close moves by `rates[t]` from bar `t - 1` to bar `t`.
/// Opens equal the previous close, highs and lows bracket open and close.
pub fn series_from_rates(
    name: &str,
    dates: &[NaiveDate],
    start_price: f64,
    rates: &[f64],
    volume: f64,
) -> AssetSeries {
    assert_eq!(dates.len(), rates.len() + 1);
    let mut bars = Vec::with_capacity(dates.len());
    let mut close = start_price;
    bars.push(OhlcvBar {
        date: dates[0],
        open: close,
        high: close,
        low: close,
        close,
        volume,
    });
    for (date, r) in dates[1..].iter().zip(rates) {
        let open = close;
        close = open * (1.0 + r);
        bars.push(OhlcvBar {
            date: *date,
            open,
            high: open.max(close),
            low: open.min(close),
            close,
            volume,
        });
    }
    AssetSeries {
        name: name.to_string(),
        bars,
    }
}

/// Two assets: the first closes 1% higher every day, the second 1% lower.
pub fn planted_market(bars: usize) -> MarketData {
    let dates = business_days(NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(), bars);
    let up = series_from_rates("RISE", &dates, 100.0, &vec![0.01; bars - 1], 1_000_000.0);
    let down = series_from_rates("FALL", &dates, 100.0, &vec![-0.01; bars - 1], 1_000_000.0);
    MarketData::from_aligned(&[up, down]).expect("planted market is aligned")
}

/// Every price constant.
pub fn flat_market(assets: usize, bars: usize) -> MarketData {
    let dates = business_days(NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(), bars);
    let series: Vec<AssetSeries> = (0..assets)
        .map(|i| {
            series_from_rates(
                &format!("FLAT{i}"),
                &dates,
                50.0,
                &vec![0.0; bars - 1],
                1000.0,
            )
        })
        .collect();
    MarketData::from_aligned(&series).expect("flat market is aligned")
}

/// Independent random walks with intraday noise and varying volume.
pub fn random_walk_series(
    assets: usize,
    start: NaiveDate,
    bars: usize,
    seed: u64,
) -> Vec<AssetSeries> {
    let dates = business_days(start, bars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..assets)
        .map(|i| {
            let drift = 0.0004 * (i as f64 - 0.5 * (assets as f64 - 1.0));
            let vol = 0.01 + 0.004 * i as f64;
            let mut bars_out = Vec::with_capacity(bars);
            let mut close: f64 = 50.0 + 25.0 * i as f64;
            let mut volume: f64 = 1.0e6;
            for (t, date) in dates.iter().enumerate() {
                let open = if t == 0 {
                    close
                } else {
                    close * (1.0 + rng.gen_range(-0.5..0.5) * vol)
                };
                let z: f64 = rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0);
                let next = (close * (1.0 + drift + vol * z)).max(1.0);
                if t > 0 {
                    close = next;
                }
                let high = open.max(close) * (1.0 + rng.gen_range(0.0..0.5) * vol);
                let low = open.min(close) * (1.0 - rng.gen_range(0.0..0.5) * vol);
                volume = (volume * (1.0 + rng.gen_range(-0.2..0.2)))
                    .clamp(1.0e5, 1.0e7)
                    .round();
                bars_out.push(OhlcvBar {
                    date: *date,
                    open: round4(open),
                    high: round4(high),
                    low: round4(low),
                    close: round4(close),
                    volume,
                });
            }
            AssetSeries {
                name: format!("SYN{}", i + 1),
                bars: bars_out,
            }
        })
        .collect()
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn random_walk_market(assets: usize, bars: usize, seed: u64) -> Result<MarketData, DataError> {
    let series = random_walk_series(
        assets,
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
        bars,
        seed,
    );
    MarketData::from_aligned(&series)
}

/// Writes a series in the default CSV schema.
pub fn write_series_csv<W: Write>(series: &AssetSeries, out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "open", "high", "low", "close", "volume"])?;
    for b in &series.bars {
        w.write_record([
            b.date.format("%Y-%m-%d").to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    w.flush()
}
