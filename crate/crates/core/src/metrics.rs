//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DynamicField;
use crate::priors::DirectPriorTargets;
use crate::render::{render_image, render_scene_flow, FieldView, RenderSettings};

/// Reported PSNR for bit-identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`. Returns
/// [`PSNR_CAP`] only when the images are identical; any nonzero error
/// reports strictly less.
pub fn psnr(pred: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "psnr of {} vs {} pixels",
            pred.len(),
            target.len()
        )));
    }
    let n = (3 * pred.len()).max(1) as f64;
    let mse: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| (0..3).map(move |c| (p[c] - t[c]).powi(2)))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP - 1e-6))
}

/// Intersection over union of two masks thresholded at one half. Two empty
/// masks have IoU 1.
pub fn mask_iou(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("iou of {} vs {} pixels", pred.len(), target.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        let (a, b) = (p >= 0.5, t >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean endpoint error over pixels where `mask >= 0.5`; zero when none.
pub fn endpoint_error(pred: &[[f64; 2]], target: &[[f64; 2]], mask: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "epe of {} vs {} pixels with a {}-pixel mask",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..pred.len() {
        if mask[i] >= 0.5 {
            sum += ((pred[i][0] - target[i][0]).powi(2) + (pred[i][1] - target[i][1]).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Maximum endpoint error over masked pixels.
pub fn max_endpoint_error(pred: &[[f64; 2]], target: &[[f64; 2]], mask: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m >= 0.5)
        .map(|((p, t), _)| ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Means {
    pub psnr: f64,
    pub iou: f64,
    pub epe: f64,
}

/// Per-frame metrics of a field against a reference clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub iou: Vec<f64>,
    /// One entry per frame with a successor.
    pub epe: Vec<f64>,
    pub means: Means,
}

/// Render every frame of `clip` from its camera (white background,
/// `samples` per ray) and compare RGB, alpha and flow.
pub fn evaluate(field: &DynamicField, clip: &DirectPriorTargets, samples: usize) -> Result<EvalReport> {
    clip.validate()?;
    let view = FieldView::dynamic(field);
    let settings = RenderSettings {
        samples,
        ..RenderSettings::evaluation()
    };
    let (mut p, mut iou, mut epe) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..clip.len() {
        let cam = &clip.cameras[k];
        let out = render_image(&view, cam, clip.times[k], &settings, 0)?;
        if (out.width, out.height) != (clip.frames[k].width, clip.frames[k].height) {
            return Err(Error::Shape(format!(
                "frame {k}: render {}x{} vs reference {}x{}",
                out.width, out.height, clip.frames[k].width, clip.frames[k].height
            )));
        }
        p.push(psnr(&out.rgb, &clip.frames[k].rgb)?);
        iou.push(mask_iou(&out.alpha, &clip.masks[k].values)?);
        if let Some(target) = clip.flows.get(k) {
            let dt = clip.times[k + 1] - clip.times[k];
            let flow = render_scene_flow(&view, cam, clip.times[k], dt, samples)?;
            epe.push(endpoint_error(&flow.flow, &target.flow, &clip.masks[k].values)?);
        }
    }
    let means = Means {
        psnr: mean(&p),
        iou: mean(&iou),
        epe: mean(&epe),
    };
    Ok(EvalReport { psnr: p, iou, epe, means })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_only_for_identical_images() {
        let a = vec![[0.2, 0.4, 0.6]; 4];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let mut b = a.clone();
        b[0][0] += 1e-12;
        assert!(psnr(&a, &b).unwrap() < PSNR_CAP);
        let c = vec![[0.3, 0.4, 0.6]; 4];
        // mse = 0.01 / 3
        assert!((psnr(&a, &c).unwrap() - 10.0 * (300.0f64).log10()).abs() < 1e-9);
    }

    #[test]
    fn iou_and_epe() {
        assert_eq!(mask_iou(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 1.0 / 3.0);
        assert_eq!(mask_iou(&[0.0; 3], &[0.0; 3]).unwrap(), 1.0);
        let e = endpoint_error(&[[3.0, 4.0], [9.0, 9.0]], &[[0.0, 0.0]; 2], &[1.0, 0.0]).unwrap();
        assert_eq!(e, 5.0);
        assert!(psnr(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
