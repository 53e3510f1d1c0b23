//! Bilinear resampling with half-pixel centers and edge clamping.
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * in/out - 0.5`,
//! clamped to `[0, in - 1]`. The same taps serve image preprocessing, the
//! 2x upsampling in the multi-scale fusion block, and resizing teacher
//! feature maps to the student's resolution.

/// Interpolation taps along one axis: `(lo, hi, w_lo, w_hi)` per output index.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        assert!(
            input > 0 && output > 0,
            "bilinear axis sizes must be positive"
        );
        let scale = input as f64 / output as f64;
        let max = (input - 1) as f64;
        let taps = (0..output)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                let frac = src - lo as f64;
                (lo, hi, 1.0 - frac, frac)
            })
            .collect();
        Self { taps }
    }
}

/// Resizes one `h_in × w_in` plane to `h_out × w_out`.
pub fn resize_plane_f64(
    src: &[f64],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), h_in * w_in);
    let ty = AxisTaps::new(h_in, h_out);
    let tx = AxisTaps::new(w_in, w_out);
    let mut out = vec![0.0; h_out * w_out];
    for (y, &(y0, y1, wy0, wy1)) in ty.taps.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in tx.taps.iter().enumerate() {
            out[y * w_out + x] = wy0 * (wx0 * src[y0 * w_in + x0] + wx1 * src[y0 * w_in + x1])
                + wy1 * (wx0 * src[y1 * w_in + x0] + wx1 * src[y1 * w_in + x1]);
        }
    }
    out
}

/// f32 variant; accumulation happens in f64.
pub fn resize_plane_f32(
    src: &[f32],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f32> {
    let wide: Vec<f64> = src.iter().map(|&v| v as f64).collect();
    resize_plane_f64(&wide, h_in, w_in, h_out, w_out)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}

/// Adjoint of [`resize_plane_f32`]: scatters `grad_out` back onto the
/// source grid, accumulating into `grad_in`.
pub fn resize_plane_adjoint_f32(
    grad_out: &[f32],
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    grad_in: &mut [f32],
) {
    assert_eq!(grad_out.len(), h_out * w_out);
    assert_eq!(grad_in.len(), h_in * w_in);
    let ty = AxisTaps::new(h_in, h_out);
    let tx = AxisTaps::new(w_in, w_out);
    for (y, &(y0, y1, wy0, wy1)) in ty.taps.iter().enumerate() {
        for (x, &(x0, x1, wx0, wx1)) in tx.taps.iter().enumerate() {
            let g = grad_out[y * w_out + x] as f64;
            grad_in[y0 * w_in + x0] += (g * wy0 * wx0) as f32;
            grad_in[y0 * w_in + x1] += (g * wy0 * wx1) as f32;
            grad_in[y1 * w_in + x0] += (g * wy1 * wx0) as f32;
            grad_in[y1 * w_in + x1] += (g * wy1 * wx1) as f32;
        }
    }
}
