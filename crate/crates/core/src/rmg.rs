//! Recursive mosaic generator.
//!
//! One recursion splits a rectangular region into four equal quadrants and
//! reassembles them in a random order. The next recursion picks one of the
//! four freshly produced quadrants and repeats, so after `r` recursions the
//! image holds blocks at `r + 1` granularities.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Depth above which [`RmgConfig`] demands an explicit override.
pub const MAX_DEFAULT_DEPTH: u32 = 3;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(image: &ImageTensor) -> Self {
        Self::new(0, 0, image.width(), image.height())
    }

    /// Quadrants in reading order: top-left, top-right, bottom-left, bottom-right.
    pub fn quadrants(&self) -> [Rect; 4] {
        let (hw, hh) = (self.w / 2, self.h / 2);
        [
            Rect::new(self.x, self.y, hw, hh),
            Rect::new(self.x + hw, self.y, hw, hh),
            Rect::new(self.x, self.y + hh, hw, hh),
            Rect::new(self.x + hw, self.y + hh, hw, hh),
        ]
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    fn check(&self, image: &ImageTensor) -> Result<()> {
        if self.x + self.w > image.width() || self.y + self.h > image.height() {
            return Err(Error::OutOfBounds {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
                width: image.width(),
                height: image.height(),
            });
        }
        if !self.w.is_multiple_of(2) || !self.h.is_multiple_of(2) {
            return Err(Error::OddRegion {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            });
        }
        Ok(())
    }
}

/// Bijection on the four quadrant slots. Output slot `i` receives input
/// quadrant `self.0[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Permutation([u8; 4]);

impl Permutation {
    pub const IDENTITY: Permutation = Permutation([0, 1, 2, 3]);

    pub fn new(order: [u8; 4]) -> Result<Self> {
        let mut seen = [false; 4];
        for &i in &order {
            if i > 3 || seen[i as usize] {
                return Err(Error::IncompatibleTrace(format!("{order:?} is not a permutation of 0..4")));
            }
            seen[i as usize] = true;
        }
        Ok(Self(order))
    }

    /// Uniform over all 24 orderings, identity included.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        Self(order)
    }

    pub fn source(&self, slot: usize) -> usize {
        self.0[slot] as usize
    }

    pub fn as_array(&self) -> [u8; 4] {
        self.0
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.0;
        write!(f, "{a},{b},{c},{d}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MosaicStep {
    pub region: Rect,
    pub permutation: Permutation,
}

/// The recorded recursion of one generator application.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MosaicTrace {
    pub steps: Vec<MosaicStep>,
}

impl MosaicTrace {
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    /// Line-oriented debug record, one `depth x y w h perm` line per step.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.steps.iter().enumerate() {
            let r = s.region;
            out.push_str(&format!("{} {} {} {} {} {}\n", i + 1, r.x, r.y, r.w, r.h, s.permutation));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut steps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::TraceParse {
                line: lineno + 1,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(bad("expected `depth x y w h perm`"));
            }
            let nums: Vec<usize> = fields[..5]
                .iter()
                .map(|f| f.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("non-numeric field"))?;
            if nums[0] != steps.len() + 1 {
                return Err(bad("depths must count up from 1"));
            }
            let perm: Vec<u8> = fields[5]
                .split(',')
                .map(|p| p.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad permutation"))?;
            let perm: [u8; 4] = perm.try_into().map_err(|_| bad("permutation needs four entries"))?;
            steps.push(MosaicStep {
                region: Rect::new(nums[1], nums[2], nums[3], nums[4]),
                permutation: Permutation::new(perm).map_err(|_| bad("not a permutation"))?,
            });
        }
        Ok(Self { steps })
    }

    /// Maximal untouched blocks after all recursions: the three quadrants
    /// left behind at every step plus all four quadrants of the last one.
    /// `full` is returned alone for an empty trace.
    pub fn blocks(&self, full: Rect) -> Vec<Rect> {
        let Some(last) = self.steps.last() else {
            return vec![full];
        };
        let mut blocks = Vec::new();
        for pair in self.steps.windows(2) {
            let next = pair[1].region;
            blocks.extend(pair[0].region.quadrants().into_iter().filter(|q| *q != next));
        }
        blocks.extend(last.region.quadrants());
        blocks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RmgConfig {
    pub r: u32,
    pub rng_seed: u64,
    /// Allows `r > 3`.
    pub allow_deep: bool,
}

impl RmgConfig {
    pub fn new(r: u32, rng_seed: u64) -> Self {
        Self {
            r,
            rng_seed,
            allow_deep: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r > MAX_DEFAULT_DEPTH && !self.allow_deep {
            return Err(Error::RecursionLimit(self.r));
        }
        Ok(())
    }
}

/// Rearranges the quadrants of `region` according to `perm`, in place.
pub fn permute_region(image: &mut ImageTensor, region: Rect, perm: Permutation) -> Result<()> {
    region.check(image)?;
    if perm.is_identity() {
        return Ok(());
    }
    let src = image.crop(region.y, region.x, region.h, region.w)?;
    let (hw, hh) = (region.w / 2, region.h / 2);
    let c = image.channels();
    let origin = |q: usize| ((q % 2) * hw, (q / 2) * hh);
    for slot in 0..4 {
        let (dx, dy) = origin(slot);
        let (sx, sy) = origin(perm.source(slot));
        for row in 0..hh {
            let s = src.index(sy + row, sx, 0);
            let d = image.index(region.y + dy + row, region.x + dx, 0);
            image.values_mut()[d..d + hw * c].copy_from_slice(&src.values()[s..s + hw * c]);
        }
    }
    Ok(())
}

/// One mosaic recursion on `region` with a uniformly drawn permutation.
pub fn mosaic_step<R: Rng + ?Sized>(
    image: &ImageTensor,
    region: Rect,
    rng: &mut R,
) -> Result<(ImageTensor, Permutation)> {
    region.check(image)?;
    let perm = Permutation::random(rng);
    let mut out = image.clone();
    permute_region(&mut out, region, perm)?;
    Ok((out, perm))
}

fn check_divisible(image: &ImageTensor, depth: u32) -> Result<()> {
    let unit = 1usize.checked_shl(depth).unwrap_or(0);
    if unit == 0 || !image.width().is_multiple_of(unit) || !image.height().is_multiple_of(unit) {
        return Err(Error::IndivisibleImage {
            width: image.width(),
            height: image.height(),
            depth,
        });
    }
    Ok(())
}

/// Applies `r` nested recursions drawing randomness from `rng`.
pub fn generate_with_rng<R: Rng + ?Sized>(
    image: &ImageTensor,
    r: u32,
    rng: &mut R,
) -> Result<(ImageTensor, MosaicTrace)> {
    check_divisible(image, r)?;
    let mut out = image.clone();
    let mut trace = MosaicTrace::default();
    let mut region = Rect::full(image);
    for depth in 0..r {
        let perm = Permutation::random(rng);
        permute_region(&mut out, region, perm)?;
        trace.steps.push(MosaicStep {
            region,
            permutation: perm,
        });
        if depth + 1 < r {
            region = region.quadrants()[rng.gen_range(0..4)];
        }
    }
    Ok((out, trace))
}

/// `G(p, r)` with a generator seeded from `config.rng_seed`.
pub fn generate(image: &ImageTensor, config: &RmgConfig) -> Result<(ImageTensor, MosaicTrace)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    generate_with_rng(image, config.r, &mut rng)
}

/// Re-applies a recorded trace. The first step must cover the whole image.
pub fn replay(image: &ImageTensor, trace: &MosaicTrace) -> Result<ImageTensor> {
    if let Some(first) = trace.steps.first() {
        if first.region != Rect::full(image) {
            return Err(Error::IncompatibleTrace(format!(
                "trace starts at {:?}, image is {}x{}",
                first.region,
                image.width(),
                image.height()
            )));
        }
    }
    let mut out = image.clone();
    for (k, step) in trace.steps.iter().enumerate() {
        if k > 0 && !trace.steps[k - 1].region.quadrants().contains(&step.region) {
            return Err(Error::IncompatibleTrace(format!(
                "step {} region {:?} is not a quadrant of the previous region",
                k + 1,
                step.region
            )));
        }
        permute_region(&mut out, step.region, step.permutation)
            .map_err(|e| Error::IncompatibleTrace(format!("step {}: {e}", k + 1)))?;
    }
    Ok(out)
}
