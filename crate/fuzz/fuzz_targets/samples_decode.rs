#![no_main]

use latecut::data::{decode_samples, encode_samples};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(samples) = decode_samples(data) {
        let bytes = encode_samples(&samples).expect("decoded samples re-encode");
        let again = decode_samples(&bytes).expect("re-encoded samples decode");
        assert_eq!(again.len(), samples.len());
        for (a, b) in again.iter().zip(&samples) {
            assert_eq!(a.label, b.label);
            assert!(a.input.iter().zip(&b.input).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
});
