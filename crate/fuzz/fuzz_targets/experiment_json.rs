#![no_main]

use latecut::experiment::{ExperimentConfig, ExperimentGrid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ExperimentConfig::from_json(text);
    if let Ok(grid) = ExperimentGrid::from_json(text) {
        // configs are only enumerated, never run
        for c in grid.configs().take(64) {
            c.validate().expect("grid validation covers every cell");
        }
    }
});
