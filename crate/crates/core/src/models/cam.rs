use crate::error::{Error, Result};
use crate::imaging::resize_plane;
use crate::tensor::Tensor;

/// `m[y,x] = Σ_f w[class,f]·features[f,y,x]` for `[F,h,w]` features and
/// `[C,F]` head weights.
pub fn raw_cam(features: &Tensor, head_weights: &Tensor, class_index: usize) -> Result<Tensor> {
    let (f, h, w) = match features.shape()[..] {
        [f, h, w] => (f, h, w),
        _ => {
            return Err(Error::dim(
                "compute_cam",
                format!("features must be [F,h,w], got {:?}", features.shape()),
            ))
        }
    };
    let (c, wf) = head_weights.dims2("compute_cam")?;
    if wf != f {
        return Err(Error::dim(
            "compute_cam",
            format!("head weights have {wf} feature columns but the maps have {f} channels"),
        ));
    }
    if class_index >= c {
        return Err(Error::InvalidInput(format!(
            "class index {class_index} out of range for {c} classes"
        )));
    }
    let row = &head_weights.data()[class_index * f..(class_index + 1) * f];
    let mut map = vec![0.0f32; h * w];
    for (plane, &wt) in features.data().chunks(h * w).zip(row) {
        for (m, &v) in map.iter_mut().zip(plane) {
            *m += wt * v;
        }
    }
    Tensor::new(vec![h, w], map)
}

/// Class activation map upsampled to `out_h × out_w` and min-max scaled to
/// `[0, 1]`. A constant raw map becomes uniformly 0.5.
///
/// Extrema are taken on the raw map; bilinear upsampling cannot leave that
/// range, so the scaled output stays in `[0, 1]`.
pub fn compute_cam(
    features: &Tensor,
    head_weights: &Tensor,
    class_index: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput(format!("heatmap size {out_h}x{out_w}")));
    }
    let raw = raw_cam(features, head_weights, class_index)?;
    let (h, w) = raw.dims2("compute_cam")?;
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return Ok(Tensor::full(&[out_h, out_w], 0.5));
    }
    let up = resize_plane(raw.data(), h, w, out_h, out_w);
    let scale = hi - lo;
    Tensor::new(
        vec![out_h, out_w],
        up.into_iter().map(|v| ((v - lo) / scale).clamp(0.0, 1.0)).collect(),
    )
}
