#![no_main]

use libfuzzer_sys::fuzz_target;
use taylor_hjb::study::{read_records_csv, write_records_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(records) = read_records_csv(data) else {
        return;
    };
    let mut out = Vec::new();
    write_records_csv(&mut out, &records).unwrap();
    assert_eq!(read_records_csv(out.as_slice()).unwrap().len(), records.len());
});
