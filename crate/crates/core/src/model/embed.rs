use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sinusoidal features of a flow time `t` in `[0, 1]`, width `d`.
///
/// `t` is scaled by 1000 so the lowest frequency spans the unit interval the
/// way integer diffusion steps do. Layout is `[cos(..) | sin(..)]`, with a
/// trailing zero when `d` is odd.
pub fn sinusoidal_features<T: Scalar>(t: T, d: usize) -> Result<Vec<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::contract(format!("timestep {t} outside [0, 1]")));
    }
    let half = d / 2;
    let arg = t.as_f64() * 1000.0;
    let mut out = vec![T::zero(); d];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = T::of((arg * freq).cos());
        out[half + i] = T::of((arg * freq).sin());
    }
    Ok(out)
}

/// Nearest-neighbour resampling along time: output row `j` copies input row
/// `floor(j * t_v / t_audio)`.
pub fn resample_video<T: Scalar>(video: &Tensor<T>, t_audio: usize) -> Result<Tensor<T>> {
    if video.shape().len() != 2 || video.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "video features must be a non-empty [t_v, d] matrix, got {:?}",
            video.shape()
        )));
    }
    let (t_v, d) = (video.shape()[0], video.shape()[1]);
    let mut data = Vec::with_capacity(t_audio * d);
    for j in 0..t_audio {
        data.extend_from_slice(video.row(j * t_v / t_audio));
    }
    Tensor::from_vec(vec![t_audio, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(t_v: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(&[t_v, d], |i| (i / d) as f64 * 10.0 + (i % d) as f64)
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        let v = frames(5, 3);
        assert_eq!(resample_video(&v, 5).unwrap(), v);
    }

    #[test]
    fn resample_single_frame_repeats() {
        let v = frames(1, 3);
        let r = resample_video(&v, 7).unwrap();
        for j in 0..7 {
            assert_eq!(r.row(j), v.row(0));
        }
    }

    #[test]
    fn resample_eight_to_thirty_two_repeats_each_frame_four_times() {
        let v = frames(8, 2);
        let r = resample_video(&v, 32).unwrap();
        // index oracle: frame f occupies rows 4f..4f+4
        for f in 0..8 {
            for k in 0..4 {
                assert_eq!(r.row(4 * f + k), v.row(f));
            }
        }
    }

    #[test]
    fn resample_rejects_empty() {
        let v = Tensor::<f64>::zeros(&[0, 4]);
        assert!(resample_video(&v, 4).is_err());
    }

    #[test]
    fn sinusoid_rejects_out_of_range() {
        assert!(sinusoidal_features(1.5f64, 8).is_err());
        assert!(sinusoidal_features(-0.1f64, 8).is_err());
        assert!(sinusoidal_features(f64::NAN, 8).is_err());
        assert_eq!(sinusoidal_features(0.3f64, 7).unwrap()[6], 0.0);
    }
}
