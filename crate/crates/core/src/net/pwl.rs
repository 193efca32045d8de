//! Piecewise-linear scalar functions.
//!
//! A function is described by breakpoints `s_1 < ... < s_{k+1}` (the outer
//! ones may be infinite) and one affine piece per segment. Segment `i` owns
//! the half-open range `[s_i, s_{i+1})`; the last segment is closed.

use serde::{Deserialize, Serialize};

/// Tolerance for the continuity check at interior breakpoints.
pub const CONTINUITY_TOL: f64 = 1e-9;

/// An affine function `slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
}

impl Line {
    pub const ZERO: Line = Line {
        slope: 0.0,
        intercept: 0.0,
    };
    pub const IDENTITY: Line = Line {
        slope: 1.0,
        intercept: 0.0,
    };

    pub fn new(slope: f64, intercept: f64) -> Self {
        Line { slope, intercept }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearFn {
    breakpoints: Vec<f64>,
    pieces: Vec<Line>,
}

impl PiecewiseLinearFn {
    /// Builds a function from raw parts. Only the shape (`k >= 1` pieces and
    /// `k + 1` breakpoints) is checked here; ordering and continuity are
    /// reported by [`PiecewiseLinearFn::issues`] so that malformed functions
    /// can still be loaded and diagnosed.
    pub fn new(breakpoints: Vec<f64>, pieces: Vec<Line>) -> Result<Self, String> {
        if pieces.is_empty() {
            return Err("a piecewise-linear function needs at least one piece".into());
        }
        if breakpoints.len() != pieces.len() + 1 {
            return Err(format!(
                "{} pieces need {} breakpoints, got {}",
                pieces.len(),
                pieces.len() + 1,
                breakpoints.len()
            ));
        }
        if breakpoints.iter().any(|b| b.is_nan()) {
            return Err("breakpoints must not be NaN".into());
        }
        if pieces
            .iter()
            .any(|p| !p.slope.is_finite() || !p.intercept.is_finite())
        {
            return Err("slopes and intercepts must be finite".into());
        }
        Ok(PiecewiseLinearFn {
            breakpoints,
            pieces,
        })
    }

    pub fn relu() -> Self {
        PiecewiseLinearFn {
            breakpoints: vec![f64::NEG_INFINITY, 0.0, f64::INFINITY],
            pieces: vec![Line::ZERO, Line::IDENTITY],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn pieces(&self) -> &[Line] {
        &self.pieces
    }

    pub fn num_segments(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_relu(&self) -> bool {
        *self == Self::relu()
    }

    /// Closed range `[s_i, s_{i+1}]` of segment `i`.
    pub fn segment_range(&self, i: usize) -> (f64, f64) {
        (self.breakpoints[i], self.breakpoints[i + 1])
    }

    /// Problems that make the function unusable: unsorted breakpoints or a
    /// jump at an interior breakpoint.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            out.push("breakpoints not sorted".to_string());
            return out;
        }
        for i in 1..self.pieces.len() {
            let s = self.breakpoints[i];
            let left = self.pieces[i - 1].eval(s);
            let right = self.pieces[i].eval(s);
            if (left - right).abs() > CONTINUITY_TOL * (1.0 + s.abs()) {
                out.push(format!(
                    "discontinuous at breakpoint {s}: left {left}, right {right}"
                ));
            }
        }
        out
    }

    /// Segment owning `x` under the half-open convention. Values outside
    /// `[s_1, s_{k+1}]` extrapolate the first or last piece.
    pub fn segment_of(&self, x: f64) -> usize {
        let k = self.pieces.len();
        // interior breakpoints s_2..s_k
        let interior = &self.breakpoints[1..k];
        interior.partition_point(|&s| s <= x)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.pieces[self.segment_of(x)].eval(x)
    }

    /// Lowest-index segment whose closed range contains `[lo, hi]`.
    pub fn segment_containing(&self, lo: f64, hi: f64) -> Option<usize> {
        (0..self.pieces.len()).find(|&i| {
            let (a, b) = self.segment_range(i);
            a <= lo && hi <= b
        })
    }

    /// Segments whose closed range meets `[lo, hi]`.
    pub fn segments_overlapping(&self, lo: f64, hi: f64) -> Vec<usize> {
        (0..self.pieces.len())
            .filter(|&i| {
                let (a, b) = self.segment_range(i);
                a <= hi && lo <= b
            })
            .collect()
    }

    pub fn max_abs_slope(&self) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.slope.abs())
            .fold(0.0, f64::max)
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.pieces.iter().all(|p| p.slope >= 0.0)
    }

    /// Points where `f - line` can attain its extremes over `[lo, hi]`:
    /// the ends and every interior breakpoint strictly inside.
    fn critical_points(&self, lo: f64, hi: f64) -> impl Iterator<Item = f64> + '_ {
        let inner = self.breakpoints[1..self.pieces.len()]
            .iter()
            .copied()
            .filter(move |&s| lo < s && s < hi);
        std::iter::once(lo).chain(inner).chain(std::iter::once(hi))
    }

    /// Exact range of the function over `[lo, hi]` (finite `lo <= hi`).
    pub fn range_over(&self, lo: f64, hi: f64) -> (f64, f64) {
        self.deviation_range(Line::ZERO, lo, hi)
    }

    /// Exact range of `f(x) - line(x)` over `[lo, hi]`.
    pub fn deviation_range(&self, line: Line, lo: f64, hi: f64) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for x in self.critical_points(lo, hi) {
            let d = self.eval(x) - line.eval(x);
            min = min.min(d);
            max = max.max(d);
        }
        (min, max)
    }

    /// Maximum of `|f - line|` over `[lo, hi]`.
    pub fn max_error(&self, line: Line, lo: f64, hi: f64) -> f64 {
        let (a, b) = self.deviation_range(line, lo, hi);
        a.abs().max(b.abs())
    }

    /// Sound linear envelopes `(lower, upper)` with
    /// `lower(x) <= f(x) <= upper(x)` on `[lo, hi]`.
    ///
    /// Candidate slopes are the pieces at both ends and the chord; each is
    /// shifted to touch `f` and the one that is tightest at the midpoint
    /// wins. For ReLU this is the usual triangle relaxation: the chord on
    /// top, and `0` or `x` below depending on which side dominates.
    pub fn envelopes(&self, lo: f64, hi: f64) -> (Line, Line) {
        if hi - lo <= 0.0 {
            let piece = self.pieces[self.segment_of(lo)];
            return (piece, piece);
        }
        let chord = (self.eval(hi) - self.eval(lo)) / (hi - lo);
        let first = self.pieces[self.segment_of(lo)].slope;
        let last = self.pieces[self.segment_of(hi)].slope;
        let mid = 0.5 * (lo + hi);

        let shifted = |slope: f64| {
            let (dmin, dmax) = self.deviation_range(Line::new(slope, 0.0), lo, hi);
            (Line::new(slope, dmin), Line::new(slope, dmax))
        };

        let mut lower: Option<Line> = None;
        for slope in [first, last, chord] {
            let (l, _) = shifted(slope);
            if lower.is_none_or(|best| l.eval(mid) > best.eval(mid)) {
                lower = Some(l);
            }
        }
        let mut upper: Option<Line> = None;
        for slope in [chord, first, last] {
            let (_, u) = shifted(slope);
            if upper.is_none_or(|best| u.eval(mid) < best.eval(mid)) {
                upper = Some(u);
            }
        }
        (lower.unwrap(), upper.unwrap())
    }

    /// A minimax-style replacement line over `[lo, hi]`: the chord shifted
    /// to split the deviation evenly. For ReLU with `lo < 0 < hi` this is
    /// exactly the minimal-error line. Returns the line and its max error.
    pub fn relaxed_line(&self, lo: f64, hi: f64) -> (Line, f64) {
        if hi - lo <= 0.0 {
            return (self.pieces[self.segment_of(lo)], 0.0);
        }
        let chord = (self.eval(hi) - self.eval(lo)) / (hi - lo);
        let (dmin, dmax) = self.deviation_range(Line::new(chord, 0.0), lo, hi);
        let line = Line::new(chord, 0.5 * (dmin + dmax));
        (line, 0.5 * (dmax - dmin))
    }
}
