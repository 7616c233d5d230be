use std::f64::consts::PI;

/// Angular rate (radians per unit of normalised coordinate) of the highest
/// frequency band.
pub const POINT_ENCODING_SCALE: f64 = 16.0 * PI;
const TEMPERATURE: f64 = 100.0;

/// Sinusoidal encoding of a normalised point: `d/2` channels for `x`
/// followed by `d/2` for `y`, each as interleaved `sin, cos` pairs over a
/// geometric ladder of frequencies.
///
/// # Panics
/// If `d_model` is not a multiple of 4.
pub fn sinusoidal_point_encoding(p: [f64; 2], d_model: usize) -> Vec<f64> {
    assert!(d_model % 4 == 0, "d_model {d_model} must be divisible by 4");
    let bands = d_model / 4;
    let mut out = Vec::with_capacity(d_model);
    for coord in p {
        for i in 0..bands {
            let rate = POINT_ENCODING_SCALE * TEMPERATURE.powf(-(i as f64) / bands as f64);
            let a = coord * rate;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}
