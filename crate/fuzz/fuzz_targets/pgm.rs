#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::grid::read_pgm_bytes;
use pxpo_core::rewards::{decode_mask_pgm, encode_mask_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = read_pgm_bytes(data) {
        assert_eq!(read_pgm_bytes(&img.encode_pgm()).expect("roundtrip"), img);
    }
    if let Ok(mask) = decode_mask_pgm(data) {
        let bytes = encode_mask_pgm(&mask).expect("decoded masks re-encode");
        assert_eq!(decode_mask_pgm(&bytes).expect("roundtrip"), mask);
    }
});
