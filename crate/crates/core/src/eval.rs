//! Evaluation: degrade each image, super-resolve it, and score against HR.

use rayon::prelude::*;

use crate::data::{eval_pair, Image};
use crate::error::Result;
use crate::metrics::{ImageScore, QualityReport};
use crate::model::Model;
use crate::resample::resize_to;
use crate::scale::ScalePair;
use crate::tensor::Tensor;

pub struct Evaluation {
    pub model: QualityReport,
    pub bicubic: Option<QualityReport>,
}

/// Scores `model` (and optionally bicubic upscaling of the same LR input) on
/// every image. Rows are sorted by image name.
pub fn evaluate(
    model: &Model<f32>,
    images: &[Image],
    scale: ScalePair,
    baseline: bool,
) -> Result<Evaluation> {
    scale.check(model.config().scale_max)?;
    let mut report = QualityReport::new("model", scale);
    let mut bicubic = baseline.then(|| QualityReport::new("bicubic", scale));
    let crop = report.crop;
    let rows: Vec<(ImageScore, Option<ImageScore>)> = images
        .par_iter()
        .map(|img| -> Result<_> {
            let (hr, lr) = eval_pair(&img.pixels, scale, model.config().round)?;
            let sr = model.forward(&lr, scale)?;
            let score = |out: &Tensor<f32>| -> Result<ImageScore> {
                Ok(ImageScore {
                    image: img.name.clone(),
                    psnr: crate::metrics::psnr(out, &hr, crop)?,
                    ssim: crate::metrics::ssim(out, &hr, crop)?,
                })
            };
            let base = if baseline {
                let [_, _, h, w] = hr.shape();
                Some(score(&resize_to(&lr, h, w, scale)?)?)
            } else {
                None
            };
            Ok((score(&sr)?, base))
        })
        .collect::<Result<_>>()?;
    for (m, b) in rows {
        report.rows.push(m);
        if let (Some(r), Some(b)) = (bicubic.as_mut(), b) {
            r.rows.push(b);
        }
    }
    report.sort();
    if let Some(b) = bicubic.as_mut() {
        b.sort();
    }
    Ok(Evaluation {
        model: report,
        bicubic,
    })
}

/// Mean absolute error of full-image reconstructions, averaged over images
/// and `scales`.
pub fn mean_l1(model: &Model<f32>, images: &[Image], scales: &[ScalePair]) -> Result<f64> {
    let mut total = 0.0;
    for &s in scales {
        for img in images {
            let (hr, lr) = eval_pair(&img.pixels, s, model.config().round)?;
            let sr = model.forward(&lr, s)?;
            let sum: f64 = sr
                .data()
                .iter()
                .zip(hr.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum();
            total += sum / hr.numel() as f64;
        }
    }
    Ok(total / (scales.len() * images.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn images() -> Vec<Image> {
        ["b.png", "a.png", "c.png"]
            .iter()
            .enumerate()
            .map(|(i, n)| Image {
                name: n.to_string(),
                pixels: Tensor::from_fn([1, 3, 40, 36], |[_, c, y, x]| {
                    ((x * (i + 1) + y * 2 + c) % 9) as f32 / 8.0
                }),
            })
            .collect()
    }

    #[test]
    fn reports_are_sorted_and_paired() {
        let m = Model::<f32>::build(&ModelConfig::default()).unwrap();
        let e = evaluate(&m, &images(), ScalePair::new(2.0, 3.0), true).unwrap();
        let names: Vec<_> = e.model.rows.iter().map(|r| r.image.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
        let b = e.bicubic.unwrap();
        assert_eq!(b.rows.len(), 3);
        assert!(b.rows.iter().all(|r| r.psnr.is_finite() && r.ssim <= 1.0));
        assert!(evaluate(&m, &images(), ScalePair::uniform(1.7), false)
            .unwrap()
            .bicubic
            .is_none());
        assert!(evaluate(&m, &images(), ScalePair::uniform(6.0), false).is_err());
        assert!(mean_l1(&m, &images(), &[ScalePair::uniform(2.0)]).unwrap() > 0.0);
    }
}
