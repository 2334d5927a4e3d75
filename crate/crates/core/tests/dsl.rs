mod common;

use common::{fixture_source, parse};
use xpflow_core::{canonical_form, check_semantics, parse_experiment};

#[test]
fn fixtures_parse_validate_and_round_trip() {
    for name in ["experiment.xp", "quadratic.xp"] {
        let spec = parse(&fixture_source(name));
        assert!(check_semantics(&spec).is_ok(), "{name}: {:?}", check_semantics(&spec));
        let text = canonical_form(&spec);
        let again = parse_experiment(&text).unwrap();
        assert_eq!(again, spec, "{name}");
        assert_eq!(canonical_form(&again), text);
    }
}

#[test]
fn fixture_spans_nine_configurations() {
    let spec = parse(&fixture_source("experiment.xp"));
    assert_eq!(spec.space_size(), 9);
    assert_eq!(parse(&fixture_source("quadratic.xp")).space_size(), 101);
}

#[test]
fn errors_carry_positions() {
    let src = fixture_source("experiment.xp").replace("strategy grid;", "strategy grid");
    let errs = parse_experiment(&src).unwrap_err();
    let line = src.lines().position(|l| l.contains("metrics {")).unwrap() + 1;
    assert_eq!(errs[0].line, line);
    assert_eq!(errs[0].column, 3);
}
