#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::taxonomy::Taxonomy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = Taxonomy::parse(text) {
        let again = Taxonomy::parse(&t.to_edge_list()).expect("edge list reparses");
        assert_eq!(again.len(), t.len());
        let names: Vec<&str> = t.names().take(8).collect();
        for a in &names {
            for b in &names {
                let w = t.wup(a, b).unwrap();
                assert!(w > 0.0 && w <= 1.0);
            }
        }
        let _ = t.depth_cut(1 + data.len() % 7);
    }
});
