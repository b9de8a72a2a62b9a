#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::rewards::decode_human_mask;
use pxpo_service::decode_feedback;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_feedback(Some("application/json"), data) {
        let _ = decode_human_mask(&mask, 24, 24);
    }
});
