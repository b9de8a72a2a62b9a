#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::harness::EpochRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = EpochRecord::from_csv(line) {
        let again = EpochRecord::from_csv(&rec.to_csv()).expect("roundtrip");
        assert_eq!(again.to_csv(), rec.to_csv());
    }
});
