#![no_main]
use lasdi::formats::{decode_trajectory, encode_trajectory};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(traj) = decode_trajectory(data) {
        let bytes = encode_trajectory(&traj).unwrap();
        assert_eq!(bytes, data);
    }
});
