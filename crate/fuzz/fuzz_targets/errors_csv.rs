#![no_main]
use lasdi_cli::pipeline::{build_heatmap, parse_errors};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_errors(data) {
        if let Ok(map) = build_heatmap(&rows) {
            assert_eq!(map.errors.len(), map.nu.len());
        }
    }
});
