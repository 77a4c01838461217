#![no_main]

use libfuzzer_sys::fuzz_target;
use semcode::formats::{read_tensor, write_tensor};
use semcode::latent::LatentTensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = read_tensor(data) {
        assert_eq!(read_tensor(&write_tensor(&t)).unwrap(), t);
        let _ = LatentTensor::from_tensor(&t);
    }
});
