#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::codec::{rate_report, Header, ProgressiveBitstream};

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = Header::parse(data) {
        let _ = rate_report(&h);
        let mut out = Vec::new();
        h.write(&mut out);
        assert_eq!(&out[..], &data[..out.len()]);
    }
    if let Ok(bs) = ProgressiveBitstream::from_bytes(data) {
        assert_eq!(bs.to_bytes(), data);
        for level in 0..=bs.header.channels.num_blocks() {
            let _ = bs.truncate_to_level(level);
        }
    }
});
