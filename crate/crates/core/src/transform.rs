//! Centered, unitary 2D DFT. DC sits at `(h/2, w/2)` in both domains and
//! both directions scale by `1/sqrt(h*w)`, so the forward operator is
//! unitary and its inverse is its adjoint.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::complex::{CoilStack, ComplexImage, C64};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Reusable plan for one `(height, width, direction)`.
pub struct FftPlan {
    height: usize,
    width: usize,
    direction: Direction,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("direction", &self.direction)
            .finish()
    }
}

impl FftPlan {
    pub fn new(height: usize, width: usize, direction: Direction) -> Self {
        let mut planner = FftPlanner::new();
        let (rows, cols) = match direction {
            Direction::Forward => (planner.plan_fft_forward(width), planner.plan_fft_forward(height)),
            Direction::Inverse => (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height)),
        };
        Self {
            height,
            width,
            direction,
            rows,
            cols,
            scale: 1.0 / ((height * width) as f64).sqrt(),
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Transforms one `height x width` plane from `input` into `out`.
    pub fn apply(&self, input: &[C64], out: &mut [C64]) {
        let (h, w) = (self.height, self.width);
        assert_eq!(input.len(), h * w, "plan is for {h}x{w}");
        assert_eq!(out.len(), h * w, "plan is for {h}x{w}");

        // ifftshift on the way in: buf[i] = x[(i + n/2) % n]
        let (sh, sw) = (h / 2, w / 2);
        let mut buf = vec![C64::new(0.0, 0.0); h * w];
        for r in 0..h {
            let src = (r + sh) % h;
            for c in 0..w {
                buf[r * w + c] = input[src * w + (c + sw) % w];
            }
        }
        let mut scratch = vec![C64::new(0.0, 0.0); self.rows.get_inplace_scratch_len()];
        for row in buf.chunks_exact_mut(w) {
            self.rows.process_with_scratch(row, &mut scratch);
        }

        // fftshift on the way out: out[i] = y[(i + ceil(n/2)) % n]
        let (uh, uw) = (h - h / 2, w - w / 2);
        let mut col = vec![C64::new(0.0, 0.0); h];
        scratch.resize(self.cols.get_inplace_scratch_len(), C64::new(0.0, 0.0));
        for c in 0..w {
            for r in 0..h {
                col[r] = buf[r * w + c];
            }
            self.cols.process_with_scratch(&mut col, &mut scratch);
            let oc = (c + w - uw) % w;
            for (r, v) in col.iter().enumerate() {
                let or = (r + h - uh) % h;
                out[or * w + oc] = v * self.scale;
            }
        }
    }

    pub fn execute(&self, img: &ComplexImage) -> Result<ComplexImage> {
        if img.shape() != (self.height, self.width) {
            return Err(shape_err(format!(
                "plan for {}x{} applied to {:?}",
                self.height,
                self.width,
                img.shape()
            )));
        }
        let mut out = ComplexImage::zeros(self.height, self.width);
        self.apply(img.data(), out.data_mut());
        Ok(out)
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize, Direction), Arc<FftPlan>>> =
        RefCell::new(HashMap::new());
}

/// Cached plan for the calling thread.
pub fn plan(height: usize, width: usize, direction: Direction) -> Arc<FftPlan> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((height, width, direction))
            .or_insert_with(|| Arc::new(FftPlan::new(height, width, direction)))
            .clone()
    })
}

pub fn fft2c(img: &ComplexImage) -> ComplexImage {
    let (h, w) = img.shape();
    let mut out = ComplexImage::zeros(h, w);
    plan(h, w, Direction::Forward).apply(img.data(), out.data_mut());
    out
}

pub fn ifft2c(ksp: &ComplexImage) -> ComplexImage {
    let (h, w) = ksp.shape();
    let mut out = ComplexImage::zeros(h, w);
    plan(h, w, Direction::Inverse).apply(ksp.data(), out.data_mut());
    out
}

fn multicoil(stack: &CoilStack, direction: Direction) -> CoilStack {
    let (h, w) = stack.image_shape();
    let p = plan(h, w, direction);
    let mut out = CoilStack::zeros(stack.coils(), h, w);
    for c in 0..stack.coils() {
        p.apply(stack.coil(c), out.coil_mut(c));
    }
    out
}

/// Per-coil [`fft2c`].
pub fn fft2c_multicoil(stack: &CoilStack) -> CoilStack {
    multicoil(stack, Direction::Forward)
}

/// Per-coil [`ifft2c`].
pub fn ifft2c_multicoil(stack: &CoilStack) -> CoilStack {
    multicoil(stack, Direction::Inverse)
}

/// Rolls each axis so index 0 moves to `n/2` (forward centering).
pub fn fftshift(data: &[C64], height: usize, width: usize) -> Vec<C64> {
    roll(data, height, width, height / 2, width / 2)
}

/// Inverse of [`fftshift`]; rolls by `ceil(n/2)`.
pub fn ifftshift(data: &[C64], height: usize, width: usize) -> Vec<C64> {
    roll(data, height, width, height - height / 2, width - width / 2)
}

fn roll(data: &[C64], h: usize, w: usize, dr: usize, dc: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            out[((r + dr) % h) * w + (c + dc) % w] = data[r * w + c];
        }
    }
    out
}
