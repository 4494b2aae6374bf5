#![no_main]

use libfuzzer_sys::fuzz_target;
use polrep::diffnet::ParamStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = ParamStore::from_bytes(data) {
        let again = ParamStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(again.to_bytes(), store.to_bytes());
    }
});
