//! Golden traces. Set `VPCCTL_BLESS=1` to regenerate the files and the
//! manifest after an intended behaviour change.

mod common;

use std::fs;

use common::*;
use vpc_core::hash::Digest256;
use vpc_core::harness::Scenario;

#[test]
fn golden_traces_match() {
    if std::env::var_os("VPCCTL_BLESS").is_some() {
        let mut traces = Vec::new();
        for s in Scenario::ALL {
            let (events, text) = render(s, GOLDEN_SEED);
            // The 10 s steady-state run is kept as a hash only.
            let file = (s != Scenario::Normal).then(|| format!("{s}.jsonl"));
            if let Some(f) = &file {
                fs::write(golden_dir().join(f), &text).unwrap();
            }
            traces.push(GoldenEntry { scenario: s, events, sha256: Digest256::of(text.as_bytes()).to_string(), file });
        }
        let m = GoldenManifest { seed: GOLDEN_SEED, traces };
        fs::write(golden_dir().join("manifest.json"), serde_json::to_string_pretty(&m).unwrap() + "\n").unwrap();
    }
    let m = load_manifest();
    assert_eq!(m.traces.len(), Scenario::ALL.len());
    for e in &m.traces {
        if e.scenario == Scenario::Normal {
            // Checked by the acceptance suite.
            continue;
        }
        let (events, text) = render(e.scenario, m.seed);
        let stored = fs::read_to_string(golden_dir().join(e.file.as_ref().unwrap())).unwrap();
        assert_eq!(Digest256::of(stored.as_bytes()).to_string(), e.sha256, "{}: stored file does not match manifest", e.scenario);
        if let Some((i, (a, b))) = text.lines().zip(stored.lines()).enumerate().find(|(_, (a, b))| a != b) {
            panic!("{}: trace diverges at line {}\n  now:    {a}\n  golden: {b}", e.scenario, i + 1);
        }
        assert_eq!(events, e.events, "{}", e.scenario);
        assert_eq!(Digest256::of(text.as_bytes()).to_string(), e.sha256, "{}", e.scenario);
    }
}
