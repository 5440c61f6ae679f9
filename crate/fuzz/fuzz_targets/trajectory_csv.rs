#![no_main]

use libfuzzer_sys::fuzz_target;
use taylor_hjb::dynamics::Trajectory;

fuzz_target!(|data: &[u8]| {
    let Ok(traj) = Trajectory::read_csv(data) else {
        return;
    };
    let mut out = Vec::new();
    traj.write_csv(&mut out, true).unwrap();
    let back = Trajectory::read_csv(out.as_slice()).unwrap();
    assert_eq!(back.len(), traj.len());
});
