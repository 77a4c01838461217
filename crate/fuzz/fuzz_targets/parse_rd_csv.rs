#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::eval::{bd_rate, export_rd, parse_rd, BdMethod};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(points) = parse_rd(text) {
        let again = parse_rd(&export_rd(&points)).expect("export reparses");
        assert_eq!(again.len(), points.len());
        for method in [BdMethod::Cubic, BdMethod::Pchip] {
            let _ = bd_rate(&points, &points, method);
        }
    }
});
