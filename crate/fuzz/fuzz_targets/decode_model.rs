#![no_main]
use lasdi::formats::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_model(data) {
        let again = decode_model(&encode_model(&model).unwrap()).unwrap();
        assert_eq!(again.encoder.widths(), model.encoder.widths());
        assert_eq!(again.decoder.widths(), model.decoder.widths());
    }
});
