use std::fs;
use std::path::{Path, PathBuf};

use dqn_portfolio::actionspace::TradeAction;
use dqn_portfolio::checkpoint::Checkpoint;
use dqn_portfolio::config::RunConfig;
use dqn_portfolio::marketdata::{compute_indicators, parse_series, CsvSchema};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn series_seeds() {
    let mut parsed = 0;
    for (_, bytes) in seeds("parse_series_csv") {
        if let Ok(series) = parse_series(bytes.as_slice(), &CsvSchema::default(), "seed") {
            compute_indicators(&series, 0).unwrap();
            parsed += 1;
        }
    }
    assert_eq!(parsed, 2);
}

#[test]
fn config_seeds() {
    for (path, bytes) in seeds("parse_run_config") {
        let cfg = RunConfig::from_toml_str(std::str::from_utf8(&bytes).unwrap(), &[])
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let again = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

#[test]
fn checkpoint_seeds() {
    for (path, bytes) in seeds("decode_checkpoint") {
        let decoded = Checkpoint::from_bytes(&bytes);
        let name = path.file_name().unwrap().to_str().unwrap();
        match name {
            "encoder.ckpt" => assert!(decoded.unwrap().encoder().is_ok()),
            "policy.ckpt" => {
                let net = decoded.unwrap().network().unwrap();
                assert_eq!(Checkpoint::from_network(&net).to_bytes(), bytes);
            }
            _ => assert!(decoded.is_err()),
        }
    }
}

#[test]
fn action_seeds() {
    let parsed: Vec<Option<Vec<i8>>> = seeds("parse_action")
        .into_iter()
        .map(|(_, b)| {
            TradeAction::parse(std::str::from_utf8(&b).unwrap())
                .ok()
                .map(|a| a.as_i8s())
        })
        .collect();
    assert_eq!(
        parsed,
        vec![None, Some(vec![-1]), Some(vec![1, 0]), Some(vec![1, -1, 0])]
    );
}
