#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        for closed in [false, true] {
            let _ = racesim::eval::ReferenceTrajectory::from_csv(text, closed);
        }
    }
});
