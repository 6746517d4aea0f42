//! Patch geometry: transform sampling, bilinear warping onto the canvas,
//! compositing `(1 - mask) * x + mask * patch`, and the adjoint path from
//! image gradients back to patch pixels.
//!
//! Coordinates put pixel centers on integers. The patch center is anchored
//! at `floor((W - P) / 2) + (P - 1) / 2` (same for rows), so an identity
//! transform lands the patch on whole pixels. A transform rotates the patch
//! about that anchor and then translates it.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH_MAGIC: &[u8; 4] = b"PFP1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
    pub epochs: usize,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    pub loss_min: Option<f64>,
}

/// An adversarial patch `[C, P, P]` with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Tensor,
    pub target_class: usize,
    pub patch_id: String,
    pub provenance: Provenance,
}

impl Patch {
    pub fn new(pixels: Tensor, target_class: usize, patch_id: impl Into<String>) -> Result<Self> {
        match *pixels.shape() {
            [c, p, q] if c > 0 && p > 0 && p == q => {}
            _ => {
                return Err(Error::Shape(format!(
                    "patch must be [C, P, P] with positive sizes, got {:?}",
                    pixels.shape()
                )))
            }
        }
        if let Some(i) = pixels.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "patch pixel {i} = {} outside [0, 1]",
                pixels.data()[i]
            )));
        }
        Ok(Patch {
            pixels,
            target_class,
            patch_id: patch_id.into(),
            provenance: Provenance::default(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn bit_eq(&self, other: &Patch) -> bool {
        self.pixels.bit_eq(&other.pixels)
            && self.target_class == other.target_class
            && self.patch_id == other.patch_id
            && self.provenance == other.provenance
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PatchHeader {
            patch_id: self.patch_id.clone(),
            target_class: self.target_class,
            side: self.side(),
            channels: self.channels(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("patch header serializes");
        codec::encode_container(PATCH_MAGIC, &json, &[&self.pixels])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header: PatchHeader = codec::decode_header(&mut r, PATCH_MAGIC)?;
        let at = r.position();
        let pixels = codec::decode_tensor(&mut r)?;
        r.finish()?;
        if pixels.shape() != [header.channels, header.side, header.side] {
            return Err(Error::format(
                at,
                format!(
                    "pixel tensor {:?} disagrees with header (C={}, P={})",
                    pixels.shape(),
                    header.channels,
                    header.side
                ),
            ));
        }
        let mut patch = Patch::new(pixels, header.target_class, header.patch_id)
            .map_err(|e| Error::format(at, e.to_string()))?;
        patch.provenance = header.provenance;
        Ok(patch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchHeader {
    patch_id: String,
    target_class: usize,
    side: usize,
    channels: usize,
    provenance: Provenance,
}

/// Rotation about the patch anchor followed by a translation (pixels).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub rotation: f64,
    pub translate_x: f64,
    pub translate_y: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        rotation: 0.0,
        translate_x: 0.0,
        translate_y: 0.0,
    };
}

/// Uniform box over rotation and translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformDistribution {
    pub rot_bound: f64,
    pub trans_bound: f64,
}

impl TransformDistribution {
    pub fn new(rot_bound: f64, trans_bound: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(rot_bound) || !ok(trans_bound) {
            return Err(Error::invalid(format!(
                "transform bounds must be finite and non-negative (rot {rot_bound}, trans {trans_bound})"
            )));
        }
        Ok(TransformDistribution { rot_bound, trans_bound })
    }

    /// Rotations up to pi/8 and the largest translation that keeps the
    /// rotated patch's bounding box on the canvas.
    pub fn for_canvas(height: usize, width: usize, side: usize) -> Self {
        TransformDistribution {
            rot_bound: PI / 8.0,
            trans_bound: default_trans_bound(height, width, side),
        }
    }

    pub fn identity() -> Self {
        TransformDistribution {
            rot_bound: 0.0,
            trans_bound: 0.0,
        }
    }
}

pub fn default_trans_bound(height: usize, width: usize, side: usize) -> f64 {
    let footprint = (side as f64 * std::f64::consts::SQRT_2).ceil() as i64;
    let room = height.min(width) as i64 - footprint;
    (room.max(0) / 2) as f64
}

pub fn sample_transform<R: Rng + ?Sized>(dist: &TransformDistribution, rng: &mut R) -> AffineTransform {
    let mut draw = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let rotation = draw(dist.rot_bound);
    let translate_x = draw(dist.trans_bound);
    let translate_y = draw(dist.trans_bound);
    AffineTransform {
        rotation,
        translate_x,
        translate_y,
    }
}

/// The patch resampled onto the canvas.
///
/// `canvas_pixels` holds the interpolated patch color wherever `mask > 0`
/// and zero elsewhere; `mask` is the warped all-ones field.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedPatch {
    pub canvas_pixels: Tensor,
    pub mask: Tensor,
    pub transform: AffineTransform,
}

/// Bilinear taps from every canvas pixel into the patch grid.
pub(crate) struct WarpPlan {
    channels: usize,
    side: usize,
    height: usize,
    width: usize,
    transform: AffineTransform,
    /// Canvas pixel `i` reads `taps[starts[i]..starts[i + 1]]`.
    starts: Vec<u32>,
    taps: Vec<(u32, f64)>,
    mask: Vec<f64>,
}

impl WarpPlan {
    pub(crate) fn new(channels: usize, side: usize, t: &AffineTransform, canvas: (usize, usize)) -> Result<Self> {
        let (height, width) = canvas;
        if side == 0 || side > height.min(width) {
            return Err(Error::invalid(format!(
                "patch side {side} does not fit a {height}x{width} canvas"
            )));
        }
        if !(t.rotation.is_finite() && t.translate_x.is_finite() && t.translate_y.is_finite()) {
            return Err(Error::invalid("transform has non-finite parameters"));
        }
        let pc = (side as f64 - 1.0) / 2.0;
        let ax = ((width - side) / 2) as f64 + pc + t.translate_x;
        let ay = ((height - side) / 2) as f64 + pc + t.translate_y;
        let (sin, cos) = t.rotation.sin_cos();
        let p = side as i64;
        let mut starts = Vec::with_capacity(height * width + 1);
        let mut taps = Vec::new();
        let mut mask = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                starts.push(taps.len() as u32);
                let dx = c as f64 - ax;
                let dy = r as f64 - ay;
                let u = cos * dx + sin * dy + pc;
                let v = -sin * dx + cos * dy + pc;
                let mut total = 0.0;
                if u > -1.0 && v > -1.0 && u < side as f64 && v < side as f64 {
                    let (u0, v0) = (u.floor(), v.floor());
                    let (fu, fv) = (u - u0, v - v0);
                    let (u0, v0) = (u0 as i64, v0 as i64);
                    for (du, dv, w) in [
                        (0, 0, (1.0 - fu) * (1.0 - fv)),
                        (1, 0, fu * (1.0 - fv)),
                        (0, 1, (1.0 - fu) * fv),
                        (1, 1, fu * fv),
                    ] {
                        let (pu, pv) = (u0 + du, v0 + dv);
                        if w > 0.0 && (0..p).contains(&pu) && (0..p).contains(&pv) {
                            taps.push(((pv * p + pu) as u32, w));
                            total += w;
                        }
                    }
                }
                mask.push(total);
            }
        }
        starts.push(taps.len() as u32);
        Ok(WarpPlan {
            channels,
            side,
            height,
            width,
            transform: *t,
            starts,
            taps,
            mask,
        })
    }

    fn pixel_taps(&self, i: usize) -> &[(u32, f64)] {
        &self.taps[self.starts[i] as usize..self.starts[i + 1] as usize]
    }

    pub(crate) fn render(&self, pixels: &[f32]) -> WarpedPatch {
        let plane = self.height * self.width;
        let pp = self.side * self.side;
        let mut canvas = vec![0f32; self.channels * plane];
        for i in 0..plane {
            let m = self.mask[i];
            if m <= 0.0 {
                continue;
            }
            for ch in 0..self.channels {
                let src = &pixels[ch * pp..(ch + 1) * pp];
                let acc: f64 = self.pixel_taps(i).iter().map(|&(s, w)| w * src[s as usize] as f64).sum();
                canvas[ch * plane + i] = (acc / m) as f32;
            }
        }
        WarpedPatch {
            canvas_pixels: Tensor::from_raw(vec![self.channels, self.height, self.width], canvas),
            mask: Tensor::from_raw(
                vec![self.height, self.width],
                self.mask.iter().map(|&m| m as f32).collect(),
            ),
            transform: self.transform,
        }
    }

    /// `mask * canvas_pixels`, the part of the composite that is linear in
    /// the patch.
    pub(crate) fn premultiplied(&self, pixels: &[f32]) -> Vec<f32> {
        let plane = self.height * self.width;
        let pp = self.side * self.side;
        let mut out = vec![0f32; self.channels * plane];
        for i in 0..plane {
            for ch in 0..self.channels {
                let src = &pixels[ch * pp..(ch + 1) * pp];
                let acc: f64 = self.pixel_taps(i).iter().map(|&(s, w)| w * src[s as usize] as f64).sum();
                out[ch * plane + i] = acc as f32;
            }
        }
        out
    }

    /// Transpose of [`premultiplied`](Self::premultiplied).
    pub(crate) fn backward(&self, grad: &[f32]) -> Vec<f32> {
        let plane = self.height * self.width;
        let pp = self.side * self.side;
        let mut out = vec![0f64; self.channels * pp];
        for i in 0..plane {
            for ch in 0..self.channels {
                let g = grad[ch * plane + i] as f64;
                if g == 0.0 {
                    continue;
                }
                for &(s, w) in self.pixel_taps(i) {
                    out[ch * pp + s as usize] += g * w;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

pub fn warp(patch: &Patch, t: &AffineTransform, canvas: (usize, usize)) -> Result<WarpedPatch> {
    let plan = WarpPlan::new(patch.channels(), patch.side(), t, canvas)?;
    Ok(plan.render(patch.pixels().data()))
}

/// The linear part `mask * warped_pixels` of the composite, as `[C, H, W]`.
pub fn warp_premultiplied(patch: &Patch, t: &AffineTransform, canvas: (usize, usize)) -> Result<Tensor> {
    let plan = WarpPlan::new(patch.channels(), patch.side(), t, canvas)?;
    Ok(Tensor::from_raw(
        vec![patch.channels(), canvas.0, canvas.1],
        plan.premultiplied(patch.pixels().data()),
    ))
}

pub(crate) fn composite(x: &[f32], canvas: &[f32], mask: &[f32]) -> Vec<f32> {
    let plane = mask.len();
    x.iter()
        .zip(canvas)
        .enumerate()
        .map(|(i, (&xv, &dv))| {
            let m = mask[i % plane] as f64;
            ((1.0 - m) * xv as f64 + m * dv as f64).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// `(1 - mask) * x + mask * canvas_pixels`, mask broadcast over channels.
pub fn apply(x: &Tensor, w: &WarpedPatch) -> Result<Tensor> {
    if x.shape() != w.canvas_pixels.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs warped patch {:?}",
            x.shape(),
            w.canvas_pixels.shape()
        )));
    }
    let out = composite(x.data(), w.canvas_pixels.data(), w.mask.data());
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Gradient w.r.t. the patch pixels of a loss on `apply(x, warp(patch, t))`,
/// given the loss gradient w.r.t. the composited image.
///
/// The mask is the warp of a constant field, so it carries no patch
/// dependence and the chain reduces to the bilinear weights.
pub fn warp_backward(grad_canvas: &Tensor, patch: &Patch, t: &AffineTransform, canvas: (usize, usize)) -> Result<Tensor> {
    let want = [patch.channels(), canvas.0, canvas.1];
    if grad_canvas.shape() != want {
        return Err(Error::Shape(format!(
            "canvas gradient {:?} does not match the warp geometry {want:?}",
            grad_canvas.shape()
        )));
    }
    let plan = WarpPlan::new(patch.channels(), patch.side(), t, canvas)?;
    Ok(Tensor::from_raw(
        vec![patch.channels(), patch.side(), patch.side()],
        plan.backward(grad_canvas.data()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use proptest::prelude::*;

    fn patch_from(c: usize, p: usize, data: Vec<f32>) -> Patch {
        Patch::new(Tensor::new(vec![c, p, p], data).unwrap(), 0, "t").unwrap()
    }

    #[test]
    fn degenerate_distribution_is_identity() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..10 {
            assert_eq!(sample_transform(&TransformDistribution::identity(), &mut r), AffineTransform::IDENTITY);
        }
    }

    #[test]
    fn rotation_draws_are_uniform() {
        let b = PI / 8.0;
        let dist = TransformDistribution::new(b, 3.0).unwrap();
        let mut r = rng::stream(2, &[]);
        let draws: Vec<_> = (0..10_000).map(|_| sample_transform(&dist, &mut r)).collect();
        let mean_abs = draws.iter().map(|t| t.rotation.abs()).sum::<f64>() / draws.len() as f64;
        // E|U(-b, b)| = b / 2
        assert!((mean_abs - b / 2.0).abs() <= 0.05 * b / 2.0, "{mean_abs}");
        assert!(draws.iter().all(|t| t.rotation.abs() <= b && t.translate_x.abs() <= 3.0 && t.translate_y.abs() <= 3.0));
        let again = sample_transform(&dist, &mut rng::stream(2, &[]));
        assert_eq!(again, draws[0]);
    }

    #[test]
    fn default_bound_matches_geometry() {
        // 8 * sqrt(2) = 11.3 -> 12; (28 - 12) / 2 = 8
        assert_eq!(default_trans_bound(28, 28, 8), 8.0);
        // 50 * sqrt(2) = 70.7 -> 71; (224 - 71) / 2 = 76
        assert_eq!(default_trans_bound(224, 224, 50), 76.0);
        assert_eq!(default_trans_bound(4, 4, 4), 0.0);
    }

    #[test]
    fn identity_full_canvas_is_exact() {
        let data: Vec<f32> = (0..2 * 9).map(|i| i as f32 / 20.0).collect();
        let p = patch_from(2, 3, data.clone());
        let w = warp(&p, &AffineTransform::IDENTITY, (3, 3)).unwrap();
        assert_eq!(w.canvas_pixels.data(), &data[..]);
        assert!(w.mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn identity_mask_is_centered_block() {
        let p = patch_from(1, 4, vec![0.5; 16]);
        let w = warp(&p, &AffineTransform::IDENTITY, (10, 8)).unwrap();
        for r in 0..10 {
            for c in 0..8 {
                let inside = (3..7).contains(&r) && (2..6).contains(&c);
                assert_eq!(w.mask.data()[r * 8 + c], inside as u8 as f32, "({r}, {c})");
            }
        }
    }

    #[test]
    fn quarter_turn_permutes_a_2x2_patch() {
        // patch rows [a, b], [c, d]; rotating by pi/2 with y pointing down
        // maps canvas(r, col) <- patch(row 1 - col, col r): [[c, a], [d, b]]
        let (a, b, c, d) = (0.1, 0.2, 0.3, 0.4);
        let p = patch_from(1, 2, vec![a, b, c, d]);
        let t = AffineTransform { rotation: PI / 2.0, ..Default::default() };
        let w = warp(&p, &t, (2, 2)).unwrap();
        for (got, want) in w.canvas_pixels.data().iter().zip([c, a, d, b]) {
            assert!((got - want).abs() < 1e-6, "{:?}", w.canvas_pixels.data());
        }
        assert!(w.mask.data().iter().all(|&m| (m - 1.0).abs() < 1e-6));
    }

    #[test]
    fn apply_formula_cases() {
        let x = Tensor::new(vec![1, 1, 1], vec![0.8]).unwrap();
        let w = WarpedPatch {
            canvas_pixels: Tensor::new(vec![1, 1, 1], vec![0.4]).unwrap(),
            mask: Tensor::new(vec![1, 1], vec![0.25]).unwrap(),
            transform: AffineTransform::IDENTITY,
        };
        assert!((apply(&x, &w).unwrap().data()[0] - 0.7).abs() < 1e-7);

        let img = Tensor::new(vec![2, 2, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let canvas = Tensor::new(vec![2, 2, 2], vec![0.9, 0.0, 0.3, 1.0, 0.25, 0.5, 0.75, 0.125]).unwrap();
        let zero = WarpedPatch { canvas_pixels: canvas.clone(), mask: Tensor::zeros(&[2, 2]), transform: AffineTransform::IDENTITY };
        assert!(apply(&img, &zero).unwrap().bit_eq(&img));
        let one = WarpedPatch { canvas_pixels: canvas.clone(), mask: Tensor::filled(&[2, 2], 1.0), transform: AffineTransform::IDENTITY };
        assert!(apply(&img, &one).unwrap().bit_eq(&canvas));
        assert!(apply(&Tensor::zeros(&[1, 2, 2]), &one).is_err());
    }

    #[test]
    fn identity_backward_is_a_crop() {
        let p = patch_from(1, 2, vec![0.5; 4]);
        let g: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let gt = Tensor::new(vec![1, 4, 4], g).unwrap();
        let gp = warp_backward(&gt, &p, &AffineTransform::IDENTITY, (4, 4)).unwrap();
        assert_eq!(gp.data(), &[5.0, 6.0, 9.0, 10.0]);
        let zero = warp_backward(&Tensor::zeros(&[1, 4, 4]), &p, &AffineTransform { rotation: 0.3, ..Default::default() }, (4, 4)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(warp_backward(&Tensor::zeros(&[2, 4, 4]), &p, &AffineTransform::IDENTITY, (4, 4)).is_err());
    }

    #[test]
    fn oversized_patch_rejected() {
        let p = patch_from(1, 5, vec![0.5; 25]);
        assert!(warp(&p, &AffineTransform::IDENTITY, (4, 8)).is_err());
    }

    #[test]
    fn patch_file_round_trip_and_guards() {
        let mut p = patch_from(3, 2, (0..12).map(|i| i as f32 / 11.0).collect());
        p.provenance.loss_min = Some(0.1 + 0.2);
        p.provenance.config_digest = "abc".into();
        let bytes = p.to_bytes();
        assert!(Patch::from_bytes(&bytes).unwrap().bit_eq(&p));
        let mut bad = bytes.clone();
        bad[3] = b'0';
        assert!(matches!(Patch::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(Patch::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    }

    fn arb_transform() -> impl Strategy<Value = AffineTransform> {
        (-1.0f64..1.0, -3.0f64..3.0, -3.0f64..3.0).prop_map(|(rotation, translate_x, translate_y)| AffineTransform {
            rotation,
            translate_x,
            translate_y,
        })
    }

    proptest! {
        #[test]
        fn warp_backward_is_the_adjoint(t in arb_transform(), seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let p = patch_from(2, 4, (0..32).map(|_| r.random::<f32>()).collect());
            let g = Tensor::new(vec![2, 9, 10], (0..180).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
            let fwd = warp_premultiplied(&p, &t, (9, 10)).unwrap();
            let back = warp_backward(&g, &p, &t, (9, 10)).unwrap();
            let lhs: f64 = g.data().iter().zip(fwd.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            let rhs: f64 = back.data().iter().zip(p.pixels().data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()));
        }

        #[test]
        fn composite_stays_in_range_and_in_footprint(t in arb_transform(), seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let p = patch_from(1, 3, (0..9).map(|_| r.random::<f32>()).collect());
            let x = Tensor::new(vec![1, 11, 11], (0..121).map(|_| r.random::<f32>()).collect()).unwrap();
            let w = warp(&p, &t, (11, 11)).unwrap();
            let out = apply(&x, &w).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(w.mask.data().iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
            // bilinear support is the patch square inflated by one pixel:
            // half-width 2 around the anchor, rotated
            let half = 2.0 * (t.rotation.cos().abs() + t.rotation.sin().abs()) + 1e-9;
            let (ax, ay) = (5.0 + t.translate_x, 5.0 + t.translate_y);
            for rr in 0..11 {
                for cc in 0..11 {
                    let i = rr * 11 + cc;
                    if w.mask.data()[i] > 0.0 {
                        prop_assert!((cc as f64 - ax).abs() <= half && (rr as f64 - ay).abs() <= half);
                    } else {
                        prop_assert_eq!(out.data()[i], x.data()[i]);
                    }
                }
            }
        }
    }
}
