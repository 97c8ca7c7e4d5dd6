#![no_main]

use latecut::latency::LatencyProfile;
use latecut::SkipSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(profile) = LatencyProfile::from_json(text) {
        for b in &profile.per_block {
            let _ = profile.latency_saving(&SkipSet::single(b.block_id));
        }
        let _ = profile.latency_saving(&profile.per_block.iter().map(|b| b.block_id).collect());
        if let Ok(json) = profile.to_json() {
            let _ = LatencyProfile::from_json(&json);
        }
    }
});
