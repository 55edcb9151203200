//! Weight initialization.

use ndarray::ArrayD;

use crate::rng::Stream;

/// Kaiming-normal initialization for ReLU networks: i.i.d. normal entries
/// with mean 0 and standard deviation sqrt(2 / fan_in), filled in row-major
/// order so a given stream always produces the same tensor.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, stream: &mut Stream) -> ArrayD<f64> {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| std * stream.normal()).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches data length")
}
