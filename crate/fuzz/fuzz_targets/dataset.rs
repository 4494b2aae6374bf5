#![no_main]

use libfuzzer_sys::fuzz_target;
use polrep::dataio::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_bytes(data) {
        assert_eq!(Dataset::from_bytes(&ds.to_bytes()).unwrap().to_bytes(), ds.to_bytes());
    }
});
