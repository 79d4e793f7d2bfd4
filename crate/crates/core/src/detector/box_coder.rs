use crate::geometry::BBox;

/// Maximum log-scale change applied when decoding.
const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Centre/size delta parameterisation with per-coordinate normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub stds: [f64; 4],
}

impl BoxCoder {
    pub const RPN: BoxCoder = BoxCoder { stds: [1.0, 1.0, 1.0, 1.0] };
    pub const ROI: BoxCoder = BoxCoder { stds: [0.1, 0.1, 0.2, 0.2] };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (px, py) = reference.center();
        let (pw, ph) = (reference.width(), reference.height());
        let (gx, gy) = target.center();
        let (gw, gh) = (target.width(), target.height());
        [
            (gx - px) / pw / self.stds[0],
            (gy - py) / ph / self.stds[1],
            (gw / pw).ln() / self.stds[2],
            (gh / ph).ln() / self.stds[3],
        ]
    }

    /// Decoded box in unclipped coordinates. Always has positive extent.
    pub fn decode(&self, reference: &BBox, deltas: &[f64]) -> BBox {
        let (px, py) = reference.center();
        let (pw, ph) = (reference.width(), reference.height());
        let dx = deltas[0] * self.stds[0];
        let dy = deltas[1] * self.stds[1];
        let dw = (deltas[2] * self.stds[2]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let dh = (deltas[3] * self.stds[3]).clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let cx = px + dx * pw;
        let cy = py + dy * ph;
        let w = pw * dw.exp();
        let h = ph * dh.exp();
        BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }
}

/// Clip to the image and enforce a minimum side of `min_size` pixels.
pub fn clip_box(b: &BBox, width: f64, height: f64, min_size: f64) -> Option<BBox> {
    let c = b.clip(width, height)?;
    (c.width() >= min_size && c.height() >= min_size).then_some(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_is_identity() {
        let r = BBox::new(3.0, 4.0, 17.0, 12.0).unwrap();
        for coder in [BoxCoder::RPN, BoxCoder::ROI] {
            let d = coder.decode(&r, &[0.0; 4]);
            for (a, b) in d.coords().iter().zip(r.coords()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let r = BBox::new(3.0, 4.0, 17.0, 12.0).unwrap();
        let t = BBox::new(5.0, 1.0, 30.0, 14.5).unwrap();
        let d = BoxCoder::ROI.decode(&r, &BoxCoder::ROI.encode(&r, &t));
        for (a, b) in d.coords().iter().zip(t.coords()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
