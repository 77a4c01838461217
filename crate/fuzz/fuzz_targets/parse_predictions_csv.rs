#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::eval::PredictionTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = PredictionTable::parse_csv(text) {
        assert_eq!(PredictionTable::parse_csv(&t.to_csv()).unwrap(), t);
    }
});
