//! Replays the checked-in fuzz corpus through each parser on stable, so a seed
//! that panics fails the normal test run.

use std::path::PathBuf;

use stripe_core::config::RunConfig;
use stripe_core::data::{dataset_from_csv, parse_norm, parse_series};
use stripe_core::metrics::EvalReport;
use stripe_core::nn::ParameterStore;
use stripe_core::stripe::Manifest;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p.file_name().unwrap().to_string_lossy().into_owned(), String::from_utf8_lossy(&bytes).into_owned())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Parses every seed plus every prefix of it, and reports which seeds parsed.
fn replay<T>(target: &str, parse: impl Fn(&str) -> stripe_core::Result<T>) -> Vec<String> {
    let mut ok = Vec::new();
    for (name, text) in seeds(target) {
        for cut in (0..=text.len()).filter(|&c| text.is_char_boundary(c)).step_by(7) {
            let _ = parse(&text[..cut]);
        }
        if parse(&text).is_ok() {
            ok.push(name);
        }
    }
    ok
}

#[test]
fn config_seeds() {
    assert_eq!(replay("config", RunConfig::parse), ["effective", "partial"]);
}

#[test]
fn dataset_seeds() {
    assert_eq!(replay("dataset_csv", dataset_from_csv), ["synthetic", "windows"]);
}

#[test]
fn series_seeds() {
    assert_eq!(replay("series", parse_series), ["blank_lines", "header"]);
}

#[test]
fn checkpoint_seeds() {
    assert_eq!(replay("checkpoint", ParameterStore::from_checkpoint), ["forecaster"]);
}

#[test]
fn manifest_seeds() {
    assert_eq!(replay("manifest", Manifest::parse), ["full"]);
}

#[test]
fn norm_seeds() {
    assert_eq!(replay("norm", parse_norm), ["single"]);
}

#[test]
fn eval_report_seeds() {
    assert_eq!(replay("eval_report", EvalReport::from_csv), ["report"]);
}
