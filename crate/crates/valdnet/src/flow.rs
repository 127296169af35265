//! Optical flow: a classical variational estimator, image warping, the
//! correlation cost volume, and Middlebury `.flo` interchange.
//!
//! The estimator minimizes brightness-constancy error plus `alpha` times a
//! smoothness penalty (Horn–Schunck) with Jacobi iterations from a zero
//! field, so identical frames yield an exactly zero flow. Warping and the
//! cost volume are the two parameter-free operators kept from pyramid flow
//! networks; `.flo` files let externally computed flow be swapped in.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

/// Dense per-pixel displacement field, row-major, f64 internally.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Flow values fed to the network are clamped to this magnitude, then
/// scaled by its reciprocal into [-1, 1].
pub const FLOW_CLAMP: f64 = 8.0;

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dim("flow field with zero extent".into()));
        }
        if u.len() != width * height || v.len() != width * height {
            return Err(Error::Dim(format!(
                "flow component lengths {}/{} do not match {width}x{height}",
                u.len(),
                v.len()
            )));
        }
        check_finite(&u, "flow u component")?;
        check_finite(&v, "flow v component")?;
        Ok(FlowField { width, height, u, v })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.width * self.height) as f64;
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .sum::<f64>()
            / n
    }

    /// `[2,H,W]` network input: channel 0 = u, channel 1 = v, each clamped
    /// to ±FLOW_CLAMP and scaled into [-1, 1].
    pub fn to_input_tensor(&self) -> Tensor {
        let squash = |x: &f64| x.clamp(-FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP;
        let mut data: Vec<f64> = self.u.iter().map(squash).collect();
        data.extend(self.v.iter().map(squash));
        Tensor::new(vec![2, self.height, self.width], data)
            .expect("flow components are finite by invariant")
    }
}

/// Luminance (0.299 R + 0.587 G + 0.114 B): `[3,H,W] -> [H,W]`.
pub fn grayscale(rgb: &Tensor) -> Result<Tensor> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dim(format!("grayscale wants [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = rgb.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .collect();
    Tensor::new(vec![h, w], gray)
}

/// Forward-difference derivative estimates over the 2x2 pixel block of both
/// frames (indices clamped at the far edges), as in the classical method.
fn derivatives(a: &[f64], b: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let at = |img: &[f64], y: usize, x: usize| img[y.min(h - 1) * w + x.min(w - 1)];
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    let mut it = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            ix[i] = 0.25
                * (at(a, y, x + 1) - at(a, y, x) + at(a, y + 1, x + 1) - at(a, y + 1, x)
                    + at(b, y, x + 1)
                    - at(b, y, x)
                    + at(b, y + 1, x + 1)
                    - at(b, y + 1, x));
            iy[i] = 0.25
                * (at(a, y + 1, x) - at(a, y, x) + at(a, y + 1, x + 1) - at(a, y, x + 1)
                    + at(b, y + 1, x)
                    - at(b, y, x)
                    + at(b, y + 1, x + 1)
                    - at(b, y, x + 1));
            it[i] = 0.25
                * (at(b, y, x) - at(a, y, x) + at(b, y + 1, x) - at(a, y + 1, x)
                    + at(b, y, x + 1)
                    - at(a, y, x + 1)
                    + at(b, y + 1, x + 1)
                    - at(a, y + 1, x + 1));
        }
    }
    (ix, iy, it)
}

/// Four-neighbor mean with replicated borders.
fn neighbor_mean(field: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        field[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                0.25 * (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1));
        }
    }
}

pub const DEFAULT_FLOW_ALPHA: f64 = 15.0;
pub const DEFAULT_FLOW_ITERATIONS: usize = 100;

/// The classical smoothness weights are calibrated against intensities in
/// 0..255; frames arrive normalized to [0,1], so the solver rescales them
/// internally to keep `alpha` on its textbook scale. (The converged flow is
/// scale-invariant; the rate at which the data term asserts itself is not —
/// without this, default `alpha` would need thousands of iterations.)
const INTENSITY_SCALE: f64 = 255.0;

/// Estimate flow between two grayscale frames in [0,1]. `alpha` weights the
/// smoothness term (on the conventional 0..255 intensity scale); `iterations`
/// Jacobi sweeps run from a zero field (zero sweeps return the zero field).
pub fn estimate_flow(
    frame_a: &Tensor,
    frame_b: &Tensor,
    alpha: f64,
    iterations: usize,
) -> Result<FlowField> {
    let (sa, sb) = (frame_a.shape(), frame_b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dim(format!("flow frames {sa:?} vs {sb:?}")));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::Contract(format!("flow alpha must be positive, got {alpha}")));
    }
    let (h, w) = (sa[0], sa[1]);
    let scale = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|p| p * INTENSITY_SCALE).collect() };
    let (ix, iy, it) = derivatives(&scale(frame_a), &scale(frame_b), h, w);

    let n = h * w;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut ubar = vec![0.0; n];
    let mut vbar = vec![0.0; n];
    for _ in 0..iterations {
        neighbor_mean(&u, h, w, &mut ubar);
        neighbor_mean(&v, h, w, &mut vbar);
        for i in 0..n {
            let t = (ix[i] * ubar[i] + iy[i] * vbar[i] + it[i]) / (alpha + ix[i] * ix[i] + iy[i] * iy[i]);
            u[i] = ubar[i] - ix[i] * t;
            v[i] = vbar[i] - iy[i] * t;
        }
    }
    FlowField::new(w, h, u, v)
}

/// Backward-warp an image by a flow field: `output(p)` is the bilinear
/// sample of `image` at `p + flow(p)`, with sample coordinates clamped to
/// the border.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != flow.height || s[2] != flow.width {
        return Err(Error::Dim(format!(
            "warp image {s:?} vs flow {}x{}",
            flow.height, flow.width
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + flow.u[i]).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + flow.v[i]).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for ch in 0..c {
                let base = ch * h * w;
                let top = (1.0 - fx) * d[base + y0 * w + x0] + fx * d[base + y0 * w + x1];
                let bottom = (1.0 - fx) * d[base + y1 * w + x0] + fx * d[base + y1 * w + x1];
                out[base + i] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Correlation cost volume: channel for displacement `(dx, dy)` (dy-major,
/// both in `-d..=d`) holds `(1/C) * sum_c a(c,p) * b(c, p+(dy,dx))`, zero
/// where the displaced position falls outside.
pub fn cost_volume(feat_a: &Tensor, feat_b: &Tensor, max_disp: usize) -> Result<Tensor> {
    let (sa, sb) = (feat_a.shape(), feat_b.shape());
    if sa.len() != 3 || sa != sb {
        return Err(Error::Dim(format!("cost volume shapes {sa:?} vs {sb:?}")));
    }
    let (c, h, w) = (sa[0], sa[1], sa[2]);
    let side = 2 * max_disp + 1;
    let d = max_disp as isize;
    let (da, db) = (feat_a.data(), feat_b.data());
    let mut out = vec![0.0; side * side * h * w];
    let inv_c = 1.0 / c as f64;
    for (ci, (dy, dx)) in (-d..=d)
        .flat_map(|dy| (-d..=d).map(move |dx| (dy, dx)))
        .enumerate()
    {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h as isize {
            let by = y + dy;
            if by < 0 || by >= h as isize {
                continue;
            }
            for x in 0..w as isize {
                let bx = x + dx;
                if bx < 0 || bx >= w as isize {
                    continue;
                }
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += da[(ch * h + y as usize) * w + x as usize]
                        * db[(ch * h + by as usize) * w + bx as usize];
                }
                plane[y as usize * w + x as usize] = acc * inv_c;
            }
        }
    }
    Tensor::new(vec![side * side, h, w], out)
}

// ── Middlebury .flo interchange ──────────────────────────────────────

const FLO_MAGIC: f32 = 202021.25;

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + flow.width * flow.height * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for i in 0..flow.width * flow.height {
        buf.extend_from_slice(&(flow.u[i] as f32).to_le_bytes());
        buf.extend_from_slice(&(flow.v[i] as f32).to_le_bytes());
    }
    buf
}

pub fn read_flo(bytes: &[u8]) -> Result<FlowField> {
    let take = |pos: usize| -> Result<[u8; 4]> {
        bytes
            .get(pos..pos + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::Format("truncated .flo data".into()))
    };
    let magic = f32::from_le_bytes(take(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!(".flo magic {magic} != {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(take(4)?);
    let height = i32::from_le_bytes(take(8)?);
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!(".flo extents {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            ".flo payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for i in 0..w * h {
        u.push(f32::from_le_bytes(take(12 + i * 8)?) as f64);
        v.push(f32::from_le_bytes(take(16 + i * 8)?) as f64);
    }
    FlowField::new(w, h, u, v)
}

pub fn save_flo(path: &Path, flow: &FlowField) -> Result<()> {
    std::fs::write(path, write_flo(flow))?;
    Ok(())
}

pub fn load_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path)?;
    read_flo(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
