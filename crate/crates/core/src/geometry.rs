//! Cartesian and ego-centred polar coordinates.
//!
//! Angles are measured from the frame's lateral (x) axis, counterclockwise
//! positive, in `(-pi, pi]`. A [`Frame`] may carry a heading: the frame is
//! then rotated so the heading direction becomes the +y (longitudinal) axis.
//! An axis-aligned frame has heading `pi/2` and applies no rotation.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::CoreError;

/// Position in meters; `x` lateral, `y` longitudinal.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CartPoint {
    pub x: f64,
    pub y: f64,
}

impl CartPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: CartPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotation by `angle` radians counterclockwise about `pivot`.
    pub fn rotated_about(self, pivot: CartPoint, angle: f64) -> CartPoint {
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (self.x - pivot.x, self.y - pivot.y);
        CartPoint::new(pivot.x + c * dx - s * dy, pivot.y + s * dx + c * dy)
    }

    pub fn translated(self, dx: f64, dy: f64) -> CartPoint {
        CartPoint::new(self.x + dx, self.y + dy)
    }
}

/// Distance `rho >= 0` and angle `theta` in `(-pi, pi]` relative to a frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolarPoint {
    pub rho: f64,
    pub theta: f64,
}

impl PolarPoint {
    /// Validates the range invariants; `theta` is wrapped into `(-pi, pi]`.
    pub fn new(rho: f64, theta: f64) -> Result<Self, CoreError> {
        if !(rho.is_finite() && theta.is_finite()) || rho < 0.0 {
            return Err(CoreError::InvalidInput(format!(
                "polar point (rho={rho}, theta={theta}) out of range"
            )));
        }
        Ok(Self {
            rho,
            theta: wrap_angle(theta),
        })
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Stationary reference frame centred on the ego vehicle at the reference time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: CartPoint,
    /// Direction (radians, world frame) that maps onto the frame's +y axis.
    pub heading: f64,
}

impl Frame {
    /// Axis-aligned frame at `origin`.
    pub fn new(origin: CartPoint) -> Self {
        Self {
            origin,
            heading: FRAC_PI_2,
        }
    }

    pub fn with_heading(origin: CartPoint, heading: f64) -> Self {
        Self { origin, heading }
    }

    fn rotation(&self) -> f64 {
        FRAC_PI_2 - self.heading
    }

    /// World point expressed in the frame's (possibly rotated) Cartesian axes.
    pub fn to_local(&self, p: CartPoint) -> CartPoint {
        let (s, c) = self.rotation().sin_cos();
        let (dx, dy) = (p.x - self.origin.x, p.y - self.origin.y);
        if self.heading == FRAC_PI_2 {
            return CartPoint::new(dx, dy);
        }
        CartPoint::new(c * dx - s * dy, s * dx + c * dy)
    }

    /// Inverse of [`Frame::to_local`].
    pub fn to_world(&self, p: CartPoint) -> CartPoint {
        if self.heading == FRAC_PI_2 {
            return CartPoint::new(p.x + self.origin.x, p.y + self.origin.y);
        }
        let (s, c) = (-self.rotation()).sin_cos();
        CartPoint::new(
            self.origin.x + c * p.x - s * p.y,
            self.origin.y + s * p.x + c * p.y,
        )
    }
}

/// Polar coordinates of a frame-local Cartesian offset; `(0, 0)` maps to `(0, 0)`.
pub fn local_to_polar(p: CartPoint) -> PolarPoint {
    let rho = p.x.hypot(p.y);
    let theta = if rho == 0.0 { 0.0 } else { p.y.atan2(p.x) };
    PolarPoint { rho, theta }
}

pub fn polar_to_local(p: PolarPoint) -> CartPoint {
    let (s, c) = p.theta.sin_cos();
    CartPoint::new(p.rho * c, p.rho * s)
}

pub fn cart_to_polar(p: CartPoint, frame: &Frame) -> PolarPoint {
    local_to_polar(frame.to_local(p))
}

pub fn polar_to_cart(p: PolarPoint, frame: &Frame) -> CartPoint {
    frame.to_world(polar_to_local(p))
}

/// Re-expresses every agent's track relative to the ego position at `t_ref`.
///
/// `tracks[0]` is the ego. Missing samples stay missing.
pub fn to_ego_frame(
    tracks: &[Vec<Option<CartPoint>>],
    t_ref: usize,
) -> Result<Vec<Vec<Option<PolarPoint>>>, CoreError> {
    let origin = tracks
        .first()
        .and_then(|ego| ego.get(t_ref).copied().flatten())
        .ok_or(CoreError::MissingEgoFrame(t_ref))?;
    let frame = Frame::new(origin);
    Ok(tracks
        .iter()
        .map(|track| {
            track
                .iter()
                .map(|p| p.map(|p| cart_to_polar(p, &frame)))
                .collect()
        })
        .collect())
}

/// Heading estimate from a track: direction of the chord from its first to
/// its last point. `None` when the track barely moves.
pub fn chord_heading(track: &[CartPoint]) -> Option<f64> {
    const MIN_TRAVEL: f64 = 1e-6;
    let (first, last) = (track.first()?, track.last()?);
    let (dx, dy) = (last.x - first.x, last.y - first.y);
    (dx.hypot(dy) > MIN_TRAVEL).then(|| dy.atan2(dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_point() {
        let p = cart_to_polar(CartPoint::new(1.0, 0.0), &Frame::new(CartPoint::default()));
        assert_eq!(p, PolarPoint { rho: 1.0, theta: 0.0 });
    }

    #[test]
    fn three_four_five() {
        let p = cart_to_polar(CartPoint::new(3.0, 4.0), &Frame::new(CartPoint::default()));
        // atan2(4, 3) to 17 significant digits
        assert_eq!(p.rho, 5.0);
        assert!((p.theta - 0.927_295_218_001_612_2).abs() < 1e-15);
    }

    #[test]
    fn origin_maps_to_zero() {
        let o = CartPoint::new(2.5, -1.0);
        let p = cart_to_polar(o, &Frame::new(o));
        assert_eq!(p, PolarPoint { rho: 0.0, theta: 0.0 });
    }

    #[test]
    fn inverse_cases() {
        let f = Frame::new(CartPoint::default());
        assert_eq!(
            polar_to_cart(PolarPoint { rho: 1.0, theta: 0.0 }, &f),
            CartPoint::new(1.0, 0.0)
        );
        let g = Frame::new(CartPoint::new(4.0, -3.0));
        assert_eq!(
            polar_to_cart(PolarPoint { rho: 0.0, theta: 1.3 }, &g),
            CartPoint::new(4.0, -3.0)
        );
    }

    #[test]
    fn behind_is_distinguished_from_ahead() {
        let f = Frame::new(CartPoint::default());
        let ahead = cart_to_polar(CartPoint::new(0.0, 10.0), &f);
        let behind = cart_to_polar(CartPoint::new(0.0, -10.0), &f);
        assert!((ahead.theta - FRAC_PI_2).abs() < 1e-15);
        assert!((behind.theta + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn ego_frame_stationary_neighbor() {
        let ego = vec![Some(CartPoint::default()); 4];
        let nb = vec![Some(CartPoint::new(10.0, 0.0)); 4];
        let out = to_ego_frame(&[ego, nb], 3).unwrap();
        assert_eq!(out[0][3], Some(PolarPoint { rho: 0.0, theta: 0.0 }));
        for p in &out[1] {
            assert_eq!(*p, Some(PolarPoint { rho: 10.0, theta: 0.0 }));
        }
    }

    #[test]
    fn ego_frame_offset_origin() {
        let ego = vec![Some(CartPoint::new(5.0, 5.0))];
        let nb = vec![Some(CartPoint::new(5.0, 8.0))];
        let out = to_ego_frame(&[ego, nb], 0).unwrap();
        let p = out[1][0].unwrap();
        assert_eq!(p.rho, 3.0);
        assert!((p.theta - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn ego_frame_requires_reference_sample() {
        let ego = vec![Some(CartPoint::default()), None];
        assert!(matches!(
            to_ego_frame(&[ego], 1),
            Err(CoreError::MissingEgoFrame(1))
        ));
    }

    #[test]
    fn heading_frame_maps_heading_to_plus_y() {
        let f = Frame::with_heading(CartPoint::new(1.0, 1.0), 0.0);
        let p = cart_to_polar(CartPoint::new(4.0, 1.0), &f);
        assert!((p.rho - 3.0).abs() < 1e-12);
        assert!((p.theta - FRAC_PI_2).abs() < 1e-12);
        let back = polar_to_cart(p, &f);
        assert!(back.distance(CartPoint::new(4.0, 1.0)) < 1e-12);
    }

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn chord_heading_of_stationary_track_is_none() {
        let track = vec![CartPoint::new(2.0, 2.0); 5];
        assert!(chord_heading(&track).is_none());
        let moving = [CartPoint::new(0.0, 0.0), CartPoint::new(0.0, 3.0)];
        assert!((chord_heading(&moving).unwrap() - FRAC_PI_2).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn coord() -> impl Strategy<Value = f64> {
            -1e3..1e3f64
        }

        proptest! {
            #[test]
            fn polar_round_trip(x in coord(), y in coord(), ox in coord(), oy in coord(), h in -PI..PI) {
                let frame = Frame::with_heading(CartPoint::new(ox, oy), h);
                let p = CartPoint::new(x, y);
                let back = polar_to_cart(cart_to_polar(p, &frame), &frame);
                prop_assert!(back.distance(p) < 1e-9);
                let q = cart_to_polar(p, &frame);
                prop_assert!(q.rho >= 0.0 && q.theta > -PI && q.theta <= PI);
            }

            #[test]
            fn rho_is_translation_invariant(x in coord(), y in coord(), ox in coord(), oy in coord(), dx in coord(), dy in coord()) {
                let a = cart_to_polar(CartPoint::new(x, y), &Frame::new(CartPoint::new(ox, oy)));
                let b = cart_to_polar(CartPoint::new(x + dx, y + dy), &Frame::new(CartPoint::new(ox + dx, oy + dy)));
                prop_assert!((a.rho - b.rho).abs() < 1e-9);
                prop_assert!(a.rho < 1e-9 || wrap_angle(a.theta - b.theta).abs() < 1e-9);
            }

            #[test]
            fn rotation_shifts_theta(x in coord(), y in coord(), ox in coord(), oy in coord(), phi in -PI..PI) {
                let origin = CartPoint::new(ox, oy);
                let p = CartPoint::new(x, y);
                prop_assume!(p.distance(origin) > 1e-3);
                let frame = Frame::new(origin);
                let a = cart_to_polar(p, &frame);
                let b = cart_to_polar(p.rotated_about(origin, phi), &frame);
                prop_assert!((a.rho - b.rho).abs() < 1e-9);
                prop_assert!(wrap_angle(b.theta - a.theta - phi).abs() < 1e-9);
            }
        }
    }
}

