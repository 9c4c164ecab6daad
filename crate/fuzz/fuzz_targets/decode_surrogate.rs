#![no_main]
use lasdi::fom::ParameterPoint;
use lasdi::gp::{decode_surrogate, encode_surrogate};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = decode_surrogate(data) {
        let bytes = encode_surrogate(&s).unwrap();
        assert!(decode_surrogate(&bytes).is_ok());
        // posterior queries must not panic on whatever the file held
        let _ = s.posterior(&ParameterPoint { nu: 0.1, omega: 1.0 });
    }
});
