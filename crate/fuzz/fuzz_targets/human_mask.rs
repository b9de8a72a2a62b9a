#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::rewards::{decode_human_mask, encode_human_mask};

// First two bytes pick the mask size, the rest is the payload.
fuzz_target!(|data: &[u8]| {
    let [h, w, payload @ ..] = data else { return };
    if let Ok(map) = decode_human_mask(payload, *h as usize, *w as usize) {
        assert_eq!(encode_human_mask(&map).expect("decoded masks re-encode"), payload);
    }
});
