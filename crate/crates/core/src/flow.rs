//! Optical-flow plumbing: Middlebury `.flo` I/O, backward warping,
//! forward/backward consistency masks and synthetic flow fixtures.
//!
//! A flow stored for frame `a -> b` lives on frame `a`'s pixel grid: pixel
//! `(r, c)` of frame `a` appears at `(r + v, c + u)` in frame `b`. Warping a
//! previous output into the current frame therefore uses the *backward*
//! flow `current -> previous`.

use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;
const FORMAT: &str = "flo";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowDirection {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved `(u, v)` pairs, row-major.
    data: Vec<f32>,
    direction: Option<FlowDirection>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("flow field {width}x{height} is empty")));
        }
        if data.len() != 2 * height * width {
            return Err(Error::Shape(format!(
                "flow field {width}x{height} needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("flow value {i} is not finite")));
        }
        Ok(Self {
            height,
            width,
            data,
            direction: None,
        })
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        Self::from_fn(height, width, |_, _| (u, v))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut data = Vec::with_capacity(2 * height * width);
        for r in 0..height {
            for c in 0..width {
                let (u, v) = f(r, c);
                data.push(u);
                data.push(v);
            }
        }
        Self::new(height, width, data).expect("from_fn: invalid flow field")
    }

    pub fn with_direction(mut self, source: usize, target: usize) -> Self {
        self.direction = Some(FlowDirection { source, target });
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn direction(&self) -> Option<FlowDirection> {
        self.direction
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, r: usize, c: usize) -> (f32, f32) {
        let i = 2 * (r * self.width + c);
        (self.data[i], self.data[i + 1])
    }

    /// Bilinear sample at a sub-pixel location, clamped to the grid.
    fn sample_clamped(&self, y: f64, x: f64) -> (f64, f64) {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let taps = bilinear_taps(y, x, self.height, self.width);
        let (mut u, mut v) = (0.0, 0.0);
        for (r, c, w) in taps {
            let (a, b) = self.at(r, c);
            u += w * a as f64;
            v += w * b as f64;
        }
        (u, v)
    }

    pub fn stats(&self) -> FlowStats {
        let mut s = FlowStats {
            width: self.width,
            height: self.height,
            u_min: f32::INFINITY,
            u_max: f32::NEG_INFINITY,
            u_mean: 0.0,
            v_min: f32::INFINITY,
            v_max: f32::NEG_INFINITY,
            v_mean: 0.0,
        };
        let (mut su, mut sv) = (0.0f64, 0.0f64);
        for uv in self.data.chunks_exact(2) {
            s.u_min = s.u_min.min(uv[0]);
            s.u_max = s.u_max.max(uv[0]);
            s.v_min = s.v_min.min(uv[1]);
            s.v_max = s.v_max.max(uv[1]);
            su += uv[0] as f64;
            sv += uv[1] as f64;
        }
        let n = (self.width * self.height) as f64;
        s.u_mean = su / n;
        s.v_mean = sv / n;
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowStats {
    pub width: usize,
    pub height: usize,
    pub u_min: f32,
    pub u_max: f32,
    pub u_mean: f64,
    pub v_min: f32,
    pub v_max: f32,
    pub v_mean: f64,
}

pub fn parse_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            format: FORMAT,
            needed: 12,
            found: bytes.len(),
        }
        .into());
    }
    let word = |i: usize| -> [u8; 4] { bytes[i..i + 4].try_into().unwrap() };
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(FormatError::BadMagic { format: FORMAT }.into());
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            format: FORMAT,
            needed: 12,
            found: bytes.len(),
        }
        .into());
    }
    let width = i32::from_le_bytes(word(4)) as i64;
    let height = i32::from_le_bytes(word(8)) as i64;
    if width <= 0 || height <= 0 {
        return Err(FormatError::BadDimensions {
            format: FORMAT,
            width,
            height,
        }
        .into());
    }
    let count = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(2))
        .ok_or(FormatError::BadDimensions {
            format: FORMAT,
            width,
            height,
        })?;
    let needed = 12 + count * 4;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            format: FORMAT,
            needed,
            found: bytes.len(),
        }
        .into());
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes {
            format: FORMAT,
            extra: bytes.len() - needed,
        }
        .into());
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite {
            format: FORMAT,
            index,
        }
        .into());
    }
    FlowField::new(height as usize, width as usize, data)
}

pub fn write_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 4);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    parse_flo(&bytes)
}

/// Up to four `(row, col, weight)` bilinear taps for an in-grid position.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (r0, c0) = (y0 as usize, x0 as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    [
        (r0, c0, (1.0 - fy) * (1.0 - fx)),
        (r0, c1, (1.0 - fy) * fx),
        (r1, c0, fy * (1.0 - fx)),
        (r1, c1, fy * fx),
    ]
    .into_iter()
    .filter(|&(_, _, w)| w != 0.0)
}

fn in_bounds(y: f64, x: f64, h: usize, w: usize) -> bool {
    y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64
}

/// Per-pixel boolean field, `true` marking a temporally consistent pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencyMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    count: usize,
}

impl ConsistencyMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        let count = data.iter().filter(|&&b| b).count();
        Ok(Self {
            height,
            width,
            data,
            count,
        })
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    /// Number of consistent pixels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `1.0` / `0.0` per pixel.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn and(&self, other: &ConsistencyMask) -> Result<ConsistencyMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("mask dimensions differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        ConsistencyMask::new(self.height, self.width, data)
    }
}

/// Fraction of pixels that failed the consistency checks.
pub fn inconsistency_fraction(mask: &ConsistencyMask) -> f64 {
    1.0 - mask.count() as f64 / mask.len() as f64
}

/// Backward-warps `image` (frame `i - j`) into frame `i`'s geometry with
/// the flow `i -> i - j`, sampling bilinearly at `p + flow(p)`.
///
/// Pixels whose sample lies outside the source image are zero in the
/// result and `false` in the returned validity mask.
pub fn warp(image: &Tensor, flow: &FlowField) -> Result<(Tensor, ConsistencyMask)> {
    let (h, w, c) = image.dims3()?;
    if (h, w) != (flow.height, flow.width) {
        return Err(Error::Shape(format!(
            "warp: image {w}x{h} vs flow {}x{}",
            flow.width, flow.height
        )));
    }
    let src = image.data();
    let mut out = vec![0.0f32; h * w * c];
    let mut valid = vec![false; h * w];
    let mut acc = vec![0.0f64; c];
    for r in 0..h {
        for col in 0..w {
            let (u, v) = flow.at(r, col);
            let (y, x) = (r as f64 + v as f64, col as f64 + u as f64);
            if !in_bounds(y, x, h, w) {
                continue;
            }
            acc.fill(0.0);
            for (sr, sc, wt) in bilinear_taps(y, x, h, w) {
                let base = (sr * w + sc) * c;
                for (a, &s) in acc.iter_mut().zip(&src[base..base + c]) {
                    *a += wt * s as f64;
                }
            }
            let dst = (r * w + col) * c;
            for (o, &a) in out[dst..dst + c].iter_mut().zip(&acc) {
                *o = a as f32;
            }
            valid[r * w + col] = true;
        }
    }
    Ok((Tensor::new(vec![h, w, c], out)?, ConsistencyMask::new(h, w, valid)?))
}

/// Constants of the forward/backward and motion-boundary tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyParams {
    pub disagreement_ratio: f64,
    pub disagreement_offset: f64,
    pub boundary_ratio: f64,
    pub boundary_offset: f64,
    /// Mark pixels whose backward sample leaves the frame as inconsistent.
    pub mark_out_of_bounds: bool,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            disagreement_ratio: 0.01,
            disagreement_offset: 0.5,
            boundary_ratio: 0.01,
            boundary_offset: 0.002,
            mark_out_of_bounds: true,
        }
    }
}

/// Which tests fired at one pixel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelChecks {
    pub out_of_bounds: bool,
    pub disagreement: bool,
    pub motion_boundary: bool,
}

impl PixelChecks {
    pub fn consistent(&self) -> bool {
        !(self.out_of_bounds || self.disagreement || self.motion_boundary)
    }
}

/// Squared gradient magnitude `|grad u|^2 + |grad v|^2` of a flow field,
/// central differences inside and one-sided differences at borders.
pub fn flow_gradient_energy(flow: &FlowField) -> Vec<f64> {
    let (h, w) = (flow.height, flow.width);
    let diff = |lo: (usize, usize), hi: (usize, usize), span: f64| -> (f64, f64) {
        let (a, b) = (flow.at(lo.0, lo.1), flow.at(hi.0, hi.1));
        (
            (b.0 as f64 - a.0 as f64) / span,
            (b.1 as f64 - a.1 as f64) / span,
        )
    };
    let axis = |i: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            (0, 0, 1.0)
        } else if i == 0 {
            (0, 1, 1.0)
        } else if i == n - 1 {
            (n - 2, n - 1, 1.0)
        } else {
            (i - 1, i + 1, 2.0)
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (c0, c1, sx) = axis(c, w);
            let (r0, r1, sy) = axis(r, h);
            let (ux, vx) = diff((r, c0), (r, c1), sx);
            let (uy, vy) = diff((r0, c), (r1, c), sy);
            out.push(ux * ux + uy * uy + vx * vx + vy * vy);
        }
    }
    out
}

/// Runs the three consistency tests for the pair `forward: i-j -> i` and
/// `backward: i -> i-j`, on frame `i`'s grid.
pub fn consistency_checks(
    forward: &FlowField,
    backward: &FlowField,
    params: &ConsistencyParams,
) -> Result<Vec<PixelChecks>> {
    if (forward.height, forward.width) != (backward.height, backward.width) {
        return Err(Error::Shape(format!(
            "consistency: forward {}x{} vs backward {}x{}",
            forward.width, forward.height, backward.width, backward.height
        )));
    }
    if let (Some(f), Some(b)) = (forward.direction, backward.direction) {
        if f.source != b.target || f.target != b.source {
            return Err(Error::Contract(format!(
                "consistency: flows {}->{} and {}->{} are not a forward/backward pair",
                f.source, f.target, b.source, b.target
            )));
        }
    }
    let (h, w) = (backward.height, backward.width);
    let energy = flow_gradient_energy(backward);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (bu, bv) = backward.at(r, c);
            let (bu, bv) = (bu as f64, bv as f64);
            let (y, x) = (r as f64 + bv, c as f64 + bu);
            let (fu, fv) = forward.sample_clamped(y, x);
            let sum = (fu + bu).powi(2) + (fv + bv).powi(2);
            let mag_f = fu * fu + fv * fv;
            let mag_b = bu * bu + bv * bv;
            out.push(PixelChecks {
                out_of_bounds: params.mark_out_of_bounds && !in_bounds(y, x, h, w),
                disagreement: sum
                    > params.disagreement_ratio * (mag_f + mag_b) + params.disagreement_offset,
                motion_boundary: energy[r * w + c]
                    > params.boundary_ratio * mag_b + params.boundary_offset,
            });
        }
    }
    Ok(out)
}

pub fn consistency_mask(
    forward: &FlowField,
    backward: &FlowField,
    params: &ConsistencyParams,
) -> Result<ConsistencyMask> {
    let checks = consistency_checks(forward, backward, params)?;
    ConsistencyMask::new(
        backward.height,
        backward.width,
        checks.iter().map(PixelChecks::consistent).collect(),
    )
}

/// Analytic motion models for fixtures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthFlow {
    /// Content moves by `(dx, dy)` pixels from the earlier to the later frame.
    Translation { dx: f32, dy: f32 },
    /// Content rotates by `radians` about the image centre.
    Rotation { radians: f32 },
}

/// Exact `(forward earlier->later, backward later->earlier)` flow pair.
pub fn synth_flow(kind: SynthFlow, height: usize, width: usize) -> (FlowField, FlowField) {
    match kind {
        SynthFlow::Translation { dx, dy } => (
            FlowField::constant(height, width, dx, dy),
            FlowField::constant(height, width, -dx, -dy),
        ),
        SynthFlow::Rotation { radians } => {
            let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
            let field = |theta: f64| {
                let (s, co) = theta.sin_cos();
                FlowField::from_fn(height, width, |r, c| {
                    let (x, y) = (c as f64 - cx, r as f64 - cy);
                    let (rx, ry) = (co * x - s * y, s * x + co * y);
                    ((rx - x) as f32, (ry - y) as f32)
                })
            };
            (field(radians as f64), field(-(radians as f64)))
        }
    }
}

/// Supplies `(forward earlier->later, backward later->earlier)` flow pairs
/// for 1-based frame indices.
pub trait FlowSource {
    fn pair(&self, earlier: usize, later: usize) -> Result<(FlowField, FlowField)>;
}

/// Flows stored as `forward_{a}_{b}.flo` / `backward_{b}_{a}.flo` in one
/// directory.
#[derive(Clone, Debug)]
pub struct FlowDir {
    root: PathBuf,
}

impl FlowDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn forward_path(&self, earlier: usize, later: usize) -> PathBuf {
        self.root.join(forward_name(earlier, later))
    }

    pub fn backward_path(&self, earlier: usize, later: usize) -> PathBuf {
        self.root.join(backward_name(earlier, later))
    }
}

pub fn forward_name(earlier: usize, later: usize) -> String {
    format!("forward_{earlier}_{later}.flo")
}

pub fn backward_name(earlier: usize, later: usize) -> String {
    format!("backward_{later}_{earlier}.flo")
}

impl FlowSource for FlowDir {
    fn pair(&self, earlier: usize, later: usize) -> Result<(FlowField, FlowField)> {
        let fwd = read_flo(&self.forward_path(earlier, later))?;
        let bwd = read_flo(&self.backward_path(earlier, later))?;
        Ok((
            fwd.with_direction(earlier, later),
            bwd.with_direction(later, earlier),
        ))
    }
}

/// In-memory flow pairs keyed by `(earlier, later)`.
#[derive(Clone, Debug, Default)]
pub struct MemoryFlows {
    pairs: std::collections::BTreeMap<(usize, usize), (FlowField, FlowField)>,
}

impl MemoryFlows {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, earlier: usize, later: usize, forward: FlowField, backward: FlowField) {
        self.pairs.insert(
            (earlier, later),
            (
                forward.with_direction(earlier, later),
                backward.with_direction(later, earlier),
            ),
        );
    }
}

impl FlowSource for MemoryFlows {
    fn pair(&self, earlier: usize, later: usize) -> Result<(FlowField, FlowField)> {
        self.pairs.get(&(earlier, later)).cloned().ok_or_else(|| {
            Error::Missing(format!(
                "flow pair {} / {}",
                forward_name(earlier, later),
                backward_name(earlier, later)
            ))
        })
    }
}
