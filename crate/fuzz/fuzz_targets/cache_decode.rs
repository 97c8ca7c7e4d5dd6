#![no_main]

use latecut::distill::PseudoLabelCache;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cache) = PseudoLabelCache::decode(data) {
        assert_eq!(cache.encode(), data);
    }
});
