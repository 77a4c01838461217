#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::entropycoder::{decode_symbols, encode_symbols, GaussianModel};

fuzz_target!(|data: &[u8]| {
    let mut symbols = Vec::new();
    let mut models = Vec::new();
    for c in data.chunks_exact(3) {
        symbols.push(i32::from(c[0] as i8));
        let mu = f64::from(c[1] as i8);
        let sigma = f64::from(c[2]) / 4.0;
        models.push(GaussianModel::new(mu, sigma));
    }
    let seg = encode_symbols(&symbols, &models).expect("symbols are in support");
    let d = decode_symbols(&seg, &models);
    assert_eq!(d.decoded_count(), symbols.len());
    assert_eq!(&d.symbols[..symbols.len()], &symbols[..]);
    let cut = &seg[..seg.len() / 2];
    let p = decode_symbols(cut, &models);
    let k = p.decoded_count();
    assert_eq!(&p.symbols[..k], &symbols[..k]);
});
