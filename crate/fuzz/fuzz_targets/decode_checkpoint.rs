#![no_main]

use dqn_portfolio::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let _ = ckpt.encoder();
        if let Ok(net) = ckpt.network() {
            let _ = Checkpoint::from_network(&net).to_bytes();
        }
    }
});
