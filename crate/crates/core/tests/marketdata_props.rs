use dqn_portfolio::marketdata::{compute_indicators, parse_series, CsvSchema, MarketData};
use dqn_portfolio::synthetic;
use proptest::prelude::*;

fn written(series: &dqn_portfolio::marketdata::AssetSeries) -> Vec<u8> {
    let mut buf = Vec::new();
    synthetic::write_series_csv(series, &mut buf).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip(assets in 1usize..4, bars in 2usize..80, seed in any::<u64>()) {
        let start = chrono::NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        for s in synthetic::random_walk_series(assets, start, bars, seed) {
            let parsed = parse_series(written(&s).as_slice(), &CsvSchema::default(), &s.name).unwrap();
            prop_assert_eq!(parsed, s);
        }
    }

    #[test]
    fn indicators_follow_bar_ratios(bars in 2usize..120, seed in any::<u64>()) {
        let start = chrono::NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let s = synthetic::random_walk_series(1, start, bars, seed).remove(0);
        let (rows, _) = compute_indicators(&s, 0).unwrap();
        prop_assert_eq!(rows.len(), bars - 1);
        for (row, pair) in rows.iter().zip(s.bars.windows(2)) {
            let (p, c) = (pair[0], pair[1]);
            prop_assert!(row.as_array().iter().all(|x| x.is_finite()));
            prop_assert!(row.kh <= 0.0 && row.kl >= 0.0);
            prop_assert!((row.kc - (c.close / p.close - 1.0)).abs() < 1e-12);
            prop_assert!((row.ko - (c.open / p.close - 1.0)).abs() < 1e-12);
            prop_assert!((row.kh - (c.close / c.high - 1.0)).abs() < 1e-12);
            prop_assert!((row.kl - (c.close / c.low - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_windows_hold_recent_indicators(bars in 25usize..60, n in 1usize..20, seed in any::<u64>()) {
        let market = synthetic::random_walk_market(2, bars, seed).unwrap();
        let t = bars - 2;
        let x = market.feature_tensor(t, n).unwrap();
        prop_assert_eq!(x.shape(), (2, n, 5));
        for a in 0..2 {
            for k in 0..n {
                let row = market.indicator(a, t + 1 - n + k).as_array();
                for (f, value) in row.iter().enumerate() {
                    prop_assert_eq!(x.get(a, k, f), *value);
                }
            }
        }
    }

    #[test]
    fn parser_never_panics(text in "\\PC{0,400}") {
        let _ = parse_series(text.as_bytes(), &CsvSchema::default(), "fuzz");
    }
}

#[test]
fn market_years_cover_every_period() {
    let market: MarketData = synthetic::random_walk_market(2, 600, 3).unwrap();
    let years = market.years();
    let covered: usize = years.values().map(|(a, b)| b - a + 1).sum();
    assert_eq!(covered, market.len());
}
