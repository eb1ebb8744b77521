//! Multi-view weighted fusion of per-view denoiser outputs onto a shared
//! canvas, window schedules with horizontal wraparound, and stitch-window
//! extraction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hooks::ImageHook;
use crate::raster::Image;

/// One view's output warped onto the canvas.
///
/// `mapping[y * width + x]` is the canvas pixel that view pixel `(x, y)`
/// lands on; `weight` is a one-channel map of the same size as `image`.
#[derive(Clone, Debug)]
pub struct ViewContribution {
    pub image: Image,
    pub weight: Image,
    pub mapping: Vec<(usize, usize)>,
}

impl ViewContribution {
    pub fn new(image: Image, weight: Image, mapping: Vec<(usize, usize)>) -> Result<Self> {
        if weight.channels() != 1 || weight.width() != image.width() || weight.height() != image.height() {
            return Err(Error::Contract(format!(
                "weight map {}x{}x{} must be {}x{}x1",
                weight.width(),
                weight.height(),
                weight.channels(),
                image.width(),
                image.height()
            )));
        }
        if mapping.len() != image.pixel_count() {
            return Err(Error::Contract(format!(
                "mapping has {} entries for {} pixels",
                mapping.len(),
                image.pixel_count()
            )));
        }
        if let Some(w) = weight.data().iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Contract(format!("weight {w} must be finite and >= 0")));
        }
        Ok(Self {
            image,
            weight,
            mapping,
        })
    }

    /// Unit weights over a window footprint.
    pub fn from_footprint(image: Image, footprint: &Footprint, canvas_width: usize) -> Result<Self> {
        let weight = Image::filled(image.width(), image.height(), &[1.0]);
        let mapping = footprint.mapping(canvas_width);
        Self::new(image, weight, mapping)
    }
}

/// Per-pixel weighted mean `Σ wᵢ vᵢ / Σ wⱼ` over all contributions that
/// cover each canvas pixel.
///
/// Per-pixel terms are summed in a canonical order (sorted by weight, then
/// value) so the result does not depend on the order of `contribs`.
pub fn fuse_views(contribs: &[ViewContribution], canvas_width: usize, canvas_height: usize) -> Result<Image> {
    let first = contribs
        .first()
        .ok_or_else(|| Error::Contract("fusion needs at least one contribution".into()))?;
    let channels = first.image.channels();
    for (i, c) in contribs.iter().enumerate() {
        if c.image.channels() != channels {
            return Err(Error::Contract(format!(
                "contribution {i} has {} channels, expected {channels}",
                c.image.channels()
            )));
        }
        if let Some(&(x, y)) = c.mapping.iter().find(|&&(x, y)| x >= canvas_width || y >= canvas_height) {
            return Err(Error::Contract(format!(
                "contribution {i} maps to ({x}, {y}) outside the {canvas_width}x{canvas_height} canvas"
            )));
        }
    }

    // gather (weight, value index) per canvas pixel
    let mut terms: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); canvas_width * canvas_height];
    for (ci, c) in contribs.iter().enumerate() {
        for (pi, &(x, y)) in c.mapping.iter().enumerate() {
            terms[y * canvas_width + x].push((c.weight.data()[pi], ci, pi));
        }
    }

    let uncovered: Vec<(usize, usize)> = terms
        .iter()
        .enumerate()
        .filter(|(_, t)| t.iter().map(|(w, _, _)| *w).sum::<f64>() <= 0.0)
        .map(|(i, _)| (i % canvas_width, i / canvas_width))
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Coverage(uncovered));
    }

    let value = |ci: usize, pi: usize| &contribs[ci].image.data()[pi * channels..(pi + 1) * channels];
    let pixels: Vec<Vec<f64>> = terms
        .into_par_iter()
        .map(|mut t| {
            t.sort_by(|a, b| {
                a.0.total_cmp(&b.0).then_with(|| {
                    let (va, vb) = (value(a.1, a.2), value(b.1, b.2));
                    va.iter()
                        .zip(vb)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
            let total: f64 = t.iter().map(|(w, _, _)| w).sum();
            let mut acc = vec![0.0; channels];
            for &(w, ci, pi) in &t {
                for (a, v) in acc.iter_mut().zip(value(ci, pi)) {
                    *a += w * v;
                }
            }
            let mut out: Vec<f64> = acc.iter().map(|a| a / total).collect();
            // a convex combination of equal values is that value
            let (lo, hi) = t.iter().fold((vec![f64::INFINITY; channels], vec![f64::NEG_INFINITY; channels]), |(mut lo, mut hi), &(w, ci, pi)| {
                if w > 0.0 {
                    for (k, v) in value(ci, pi).iter().enumerate() {
                        lo[k] = lo[k].min(*v);
                        hi[k] = hi[k].max(*v);
                    }
                }
                (lo, hi)
            });
            for k in 0..channels {
                out[k] = out[k].clamp(lo[k], hi[k]);
            }
            out
        })
        .collect();
    Image::from_vec(canvas_width, canvas_height, channels, pixels.concat())
}

/// A rectangular window on the canvas; columns wrap around horizontally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Footprint {
    pub fn mapping(&self, canvas_width: usize) -> Vec<(usize, usize)> {
        let mut m = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                m.push(((self.x0 + x) % canvas_width, self.y0 + y));
            }
        }
        m
    }

    pub fn extract(&self, canvas: &Image) -> Image {
        let cw = canvas.width();
        Image::from_fn(self.width, self.height, canvas.channels(), |x, y, px| {
            px.copy_from_slice(canvas.pixel((self.x0 + x) % cw, self.y0 + y));
        })
    }
}

/// Windows of `win_w × win_h` stepping by `stride` in both directions.
///
/// Horizontally the schedule wraps around the canvas and covers every
/// column; vertically the last row of windows is aligned to the bottom edge.
pub fn window_schedule(
    canvas_width: usize,
    canvas_height: usize,
    win_w: usize,
    win_h: usize,
    stride: usize,
) -> Result<Vec<Footprint>> {
    if win_w == 0 || win_h == 0 || stride == 0 || win_w > canvas_width || win_h > canvas_height {
        return Err(Error::Dimension(format!(
            "window {win_w}x{win_h} stride {stride} does not fit canvas {canvas_width}x{canvas_height}"
        )));
    }
    if stride > win_w || stride > win_h {
        return Err(Error::Dimension(format!(
            "stride {stride} exceeds window {win_w}x{win_h}, leaving gaps"
        )));
    }
    let cols = canvas_width.div_ceil(stride);
    let mut rows: Vec<usize> = (0..=canvas_height - win_h).step_by(stride).collect();
    if *rows.last().unwrap() != canvas_height - win_h {
        rows.push(canvas_height - win_h);
    }
    let mut out = Vec::with_capacity(cols * rows.len());
    for &y0 in &rows {
        for c in 0..cols {
            out.push(Footprint {
                x0: c * stride,
                y0,
                width: win_w,
                height: win_h,
            });
        }
    }
    Ok(out)
}

/// Horizontally centered `H × 2H` window of a stitched plane.
///
/// The stitched plane must carry at least one extra column on each side,
/// i.e. `width ≥ 2H + 2`.
pub fn extract_stitch_center(stitched: &Image) -> Result<Image> {
    let h = stitched.height();
    let w = stitched.width();
    if w < 2 * h + 2 {
        return Err(Error::Dimension(format!(
            "stitched width {w} must be at least 2H+2 = {} for height {h}",
            2 * h + 2
        )));
    }
    let offset = (w - 2 * h) / 2;
    stitched.crop(offset, 0, 2 * h, h)
}

/// One fusion round: every footprint is cut from the canvas, sent through
/// the denoiser with its prompt, and the results are fused with unit
/// weights. `prompts` holds one prompt per footprint, or a single prompt
/// shared by all of them.
pub fn run_denoise_round(
    canvas: &Image,
    prompts: &[String],
    denoiser: &dyn ImageHook,
    schedule: &[Footprint],
) -> Result<Image> {
    if schedule.is_empty() {
        return Err(Error::Contract("denoise schedule is empty".into()));
    }
    if prompts.len() != 1 && prompts.len() != schedule.len() {
        return Err(Error::Contract(format!(
            "{} prompts for {} views",
            prompts.len(),
            schedule.len()
        )));
    }
    let outputs: Vec<Result<Image>> = schedule
        .par_iter()
        .enumerate()
        .map(|(i, fp)| {
            let view = fp.extract(canvas);
            let prompt = &prompts[if prompts.len() == 1 { 0 } else { i }];
            let out = denoiser
                .apply(&view, prompt)
                .map_err(|source| Error::ViewHook { view: i, source })?;
            if !out.same_shape(&view) {
                return Err(Error::ViewHook {
                    view: i,
                    source: crate::hooks::HookError::Shape {
                        expected: (view.width(), view.height()),
                        got: (out.width(), out.height()),
                    },
                });
            }
            Ok(out)
        })
        .collect();
    let mut contribs = Vec::with_capacity(schedule.len());
    for (fp, out) in schedule.iter().zip(outputs) {
        contribs.push(ViewContribution::from_footprint(out?, fp, canvas.width())?);
    }
    fuse_views(&contribs, canvas.width(), canvas.height())
}
