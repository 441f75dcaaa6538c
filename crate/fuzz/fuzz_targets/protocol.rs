#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = racesim::bridge::Message::decode(text);
        let _ = racesim::bridge::decode_frame(text);
        let _ = racesim::bridge::decode_command(text);
    }
});
