#![no_main]

use dqn_portfolio::actionspace::TradeAction;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(action) = TradeAction::parse(text) {
        let text: Vec<String> = action.as_i8s().iter().map(|d| d.to_string()).collect();
        let back = TradeAction::parse(&text.join(",")).expect("canonical form parses");
        assert_eq!(back, action);
    }
});
