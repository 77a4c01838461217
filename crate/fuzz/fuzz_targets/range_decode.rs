#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::entropycoder::{decode_symbols, in_support, GaussianModel};

fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let mu = f64::from(data[0] as i8) / 4.0;
    let sigma = f64::from(data[1]) / 8.0;
    let n = usize::from(u16::from_le_bytes([data[2], data[3]]) % 2048);
    let models: Vec<GaussianModel> = (0..n)
        .map(|i| GaussianModel::new(mu + (i % 5) as f64, sigma + (i % 3) as f64))
        .collect();
    let d = decode_symbols(&data[4..], &models);
    assert!(d.decoded_count() <= n);
    assert!(d.symbols.iter().all(|&s| in_support(s)));
});
