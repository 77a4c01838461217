#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::models::ModelBundle;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = ModelBundle::from_bytes(data) {
        assert_eq!(ModelBundle::from_bytes(&b.to_bytes()).unwrap(), b);
    }
});
