#![no_main]

use libfuzzer_sys::fuzz_target;
use morseflow::field::ScalarField;

// First 24 bytes: a point in R^3. The rest: expression source.
fuzz_target!(|data: &[u8]| {
    if data.len() < 24 {
        return;
    }
    let (head, tail) = data.split_at(24);
    let x: Vec<f64> = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let Ok(src) = std::str::from_utf8(tail) else { return };
    let Ok(f) = ScalarField::parse(src, 3) else { return };
    if let Ok(jet) = f.jet2(&x) {
        assert!(jet.value.is_finite());
        assert!(jet.gradient.iter().all(|g| g.is_finite()));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(jet.hessian(i, j).to_bits(), jet.hessian(j, i).to_bits());
            }
        }
    }
});
