#![no_main]

use libfuzzer_sys::fuzz_target;
use taylor_hjb::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_json(text) else {
        return;
    };
    let again = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(again.to_json().unwrap(), cfg.to_json().unwrap());
});
