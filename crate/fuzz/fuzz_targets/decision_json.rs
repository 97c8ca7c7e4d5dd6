#![no_main]

use latecut::pruning::PruneDecision;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(decision) = PruneDecision::from_json(text) {
        assert_eq!(decision.pruned.len(), decision.n_p);
        if let Ok(json) = decision.to_json() {
            let _ = PruneDecision::from_json(&json);
        }
    }
});
