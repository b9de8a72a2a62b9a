#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::harness::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let printed = cfg.to_text();
        let again = TrainConfig::from_text(&printed).expect("printed config parses");
        assert_eq!(again.to_text(), printed);
    }
});
