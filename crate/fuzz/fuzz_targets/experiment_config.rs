#![no_main]
use lasdi_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<ExperimentConfig>(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.resolved().shared_hash();
            let _ = cfg.grid.points();
        }
    }
});
