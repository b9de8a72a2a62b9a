#![no_main]

use libfuzzer_sys::fuzz_target;
use pxpo_core::grid::Grid;

fuzz_target!(|data: &[u8]| {
    if let Ok((grid, used)) = Grid::decode(data) {
        assert!(used <= data.len());
        let again = Grid::from_bytes(&grid.encode()).expect("re-encoded frame decodes");
        assert_eq!(again.shape(), grid.shape());
        let same = again.as_slice().iter().zip(grid.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }
});
