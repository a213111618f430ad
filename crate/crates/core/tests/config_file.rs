use crossfusion::config::RunConfig;

#[test]
fn shipped_config_matches_the_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let cfg = RunConfig::layered(Some(&text), &[], Vec::new()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}
