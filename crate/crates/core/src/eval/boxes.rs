use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Axis-aligned box in pixel corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Scalar> From<[T; 4]> for BBox<T> {
    fn from([x1, y1, x2, y2]: [T; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl<T: Scalar> BBox<T> {
    /// A box with positive width and height.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let half = T::of(0.5);
        Self::new(cx - half * w, cy - half * h, cx + half * w, cy + half * h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let half = T::of(0.5);
        (half * (self.x1 + self.x2), half * (self.y1 + self.y2))
    }

    pub fn lies_within(&self, width: T, height: T) -> bool {
        self.x1 >= T::zero() && self.y1 >= T::zero() && self.x2 <= width && self.y2 <= height
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }
}

/// Intersection over union of two boxes; 0 for disjoint boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(T::zero());
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(T::zero());
    let inter = iw * ih;
    if inter == T::zero() {
        return Ok(T::zero());
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).min(T::one()))
}
