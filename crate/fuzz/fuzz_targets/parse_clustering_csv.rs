#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::taxonomy::Clustering;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = Clustering::parse_csv(text) {
        let again = Clustering::parse_csv(&c.to_csv()).expect("csv reparses");
        assert_eq!(again, c);
        let _ = semcode::clustering::balance(&c);
    }
});
