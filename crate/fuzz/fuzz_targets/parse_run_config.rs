#![no_main]

use dqn_portfolio::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml_str(text, &[]) {
        let again = RunConfig::from_toml_str(&cfg.to_toml(), &[]).expect("resolved config parses");
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
});
