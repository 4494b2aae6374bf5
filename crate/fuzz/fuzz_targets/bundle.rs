#![no_main]

use libfuzzer_sys::fuzz_target;
use polrep::trainer::Bundle;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = Bundle::from_bytes(data) {
        let bytes = b.to_bytes().unwrap();
        assert_eq!(Bundle::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }
});
