#![no_main]

use dqn_portfolio::marketdata::{compute_indicators, parse_series, CsvSchema};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(series) = parse_series(data, &CsvSchema::default(), "fuzz") {
        let _ = compute_indicators(&series, 0);
    }
});
