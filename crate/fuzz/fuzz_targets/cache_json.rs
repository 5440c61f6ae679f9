#![no_main]

use libfuzzer_sys::fuzz_target;
use nalgebra::{DMatrix, DVector};
use taylor_hjb::lyapchain::ExpansionCoeffs;
use taylor_hjb::BilinearSystem;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let system = BilinearSystem::new(
        "fuzz",
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
        DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.2, -0.1]),
        DVector::from_vec(vec![1.0, 1.0]),
        1.0,
    )
    .unwrap();
    if let Ok(coeffs) = ExpansionCoeffs::from_cache_json(text, &system) {
        assert_eq!(coeffs.dim, 2);
        assert_eq!(coeffs.tensors.len() + 2, coeffs.degree);
    }
});
