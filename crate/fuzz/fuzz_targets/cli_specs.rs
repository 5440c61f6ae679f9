#![no_main]

use libfuzzer_sys::fuzz_target;
use taylor_hjb::config::{parse_degrees, parse_scales, Direction, Y0Spec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = text.parse::<Y0Spec>() {
        assert!(spec.scale.is_finite());
    }
    if let Ok(dir) = text.parse::<Direction>() {
        if !matches!(dir, Direction::Values(_)) {
            assert_eq!(dir.id().parse::<Direction>().unwrap().id(), dir.id());
        }
    }
    if let Ok(scales) = parse_scales(text) {
        assert!(scales.iter().all(|s| *s > 0.0 && s.is_finite()));
    }
    if let Ok(degrees) = parse_degrees(text) {
        assert!(degrees.iter().all(|&p| p >= 2));
    }
});
