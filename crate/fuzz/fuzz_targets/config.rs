#![no_main]

use libfuzzer_sys::fuzz_target;
use polrep::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let canon = cfg.to_canonical_string().unwrap();
        assert_eq!(RunConfig::parse(&canon).unwrap(), cfg);
    }
});
