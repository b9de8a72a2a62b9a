#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::diffusion::TrajectoryDump;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = TrajectoryDump::decode(data) {
        let e = TrajectoryDump::decode(&d.encode()).expect("roundtrip");
        assert_eq!(d.states.len(), e.states.len());
        assert_eq!(d.means.len(), e.means.len());
        assert_eq!((d.class_id, d.seed), (e.class_id, e.seed));
    }
});
