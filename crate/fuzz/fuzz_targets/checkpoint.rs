#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::net::DenoiserParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = DenoiserParams::decode_checkpoint(data) {
        let q = DenoiserParams::decode_checkpoint(&p.encode_checkpoint()).expect("roundtrip");
        assert_eq!(p.spec, q.spec);
        assert_eq!(p.layers, q.layers);
        assert_eq!(p.values.len(), q.values.len());
    }
});
