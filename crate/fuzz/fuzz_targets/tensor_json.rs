#![no_main]

use libfuzzer_sys::fuzz_target;
use taylor_hjb::SymTensor;

fuzz_target!(|data: &[u8]| {
    let Ok(t) = serde_json::from_slice::<SymTensor>(data) else {
        return;
    };
    assert_eq!(t.entries().len(), t.dim().pow(t.order() as u32));
    let text = serde_json::to_string(&t).unwrap();
    let back: SymTensor = serde_json::from_str(&text).unwrap();
    assert_eq!(back.entries().len(), t.entries().len());
    assert!(back.entries().iter().zip(t.entries()).all(|(a, b)| a.to_bits() == b.to_bits()));
});
