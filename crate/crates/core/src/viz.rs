//! Visualisation of flow fields and weight maps as RGB images.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Segment lengths of the standard optical-flow colour wheel
/// (red→yellow→green→cyan→blue→magenta→red).
const WHEEL_SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6];

/// The 55 colours of the wheel, in `[0, 1]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(WHEEL_SEGMENTS.iter().sum());
    // Each segment ramps one primary up or down while the others stay fixed.
    let ramps: [([f64; 3], usize, bool); 6] = [
        ([1.0, 0.0, 0.0], 1, true),
        ([1.0, 1.0, 0.0], 0, false),
        ([0.0, 1.0, 0.0], 2, true),
        ([0.0, 1.0, 1.0], 1, false),
        ([0.0, 0.0, 1.0], 0, true),
        ([1.0, 0.0, 1.0], 2, false),
    ];
    for (&n, &(base, ch, up)) in WHEEL_SEGMENTS.iter().zip(&ramps) {
        for i in 0..n {
            let f = i as f64 / n as f64;
            let mut c = base;
            c[ch] = if up { f } else { 1.0 - f };
            wheel.push(c);
        }
    }
    wheel
}

/// Renders a `[2, h, w]` flow with the colour wheel: hue encodes direction and
/// saturation the magnitude relative to `max_magnitude` (the field's own
/// maximum when `None`). Magnitudes beyond the normaliser are dimmed.
pub fn flow_to_color<T: Real>(flow: &Tensor<T>, max_magnitude: Option<f64>) -> Result<Tensor<T>> {
    let (c, h, w) = flow.check_chw("flow")?;
    if c != 2 {
        return Err(Error::shape(format_args!("flow needs 2 channels, got {c}")));
    }
    let (fx, fy) = (flow.channel(0), flow.channel(1));
    let norm = max_magnitude.unwrap_or_else(|| {
        fx.iter().zip(fy).map(|(&u, &v)| u.as_f64().hypot(v.as_f64())).filter(|m| m.is_finite()).fold(0.0, f64::max)
    });
    let norm = if norm > 0.0 { norm } else { 1.0 };
    let wheel = color_wheel();
    let n = wheel.len();
    let mut out = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    for i in 0..plane {
        let (u, v) = (fx[i].as_f64() / norm, fy[i].as_f64() / norm);
        let rad = u.hypot(v);
        let rgb = if !rad.is_finite() {
            [0.0; 3]
        } else {
            let a = (-v).atan2(-u) / core::f64::consts::PI;
            let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
            let k0 = (fk.floor() as usize).min(n - 1);
            let k1 = (k0 + 1) % n;
            let f = fk - k0 as f64;
            core::array::from_fn(|ci| {
                let col = (1.0 - f) * wheel[k0][ci] + f * wheel[k1][ci];
                if rad <= 1.0 {
                    1.0 - rad * (1.0 - col)
                } else {
                    col * 0.75
                }
            })
        };
        for ci in 0..3 {
            out.data_mut()[ci * plane + i] = T::lit(rgb[ci]);
        }
    }
    Ok(out)
}

/// Renders channel `c` of a map with values in `[0, 1]` as a grey RGB image.
pub fn channel_to_gray<T: Real>(map: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (mc, h, w) = map.check_chw("map")?;
    if c >= mc {
        return Err(Error::arg(format_args!("channel {c} out of range for {mc} channels")));
    }
    let src = map.channel(c);
    Ok(Tensor::from_fn_chw(3, h, w, |_, y, x| src[y * w + x].max(T::zero()).min(T::one())))
}
